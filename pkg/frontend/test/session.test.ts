import { describe, expect, it } from "vitest";

import { ApiClient, ApiError } from "../src/api.js";
import { MaskBuffer } from "../src/mask.js";
import { maskToPngB64 } from "../src/png.js";
import { EditSession, ReplayMismatch, type EditStep } from "../src/session.js";
import { fakeFetch } from "./fake_server.js";
import { nodeCodec } from "./node_codec.js";

const guidance = { kind: "classifier_free" as const, scale: 3 };

function client(fetchFn: ReturnType<typeof fakeFetch>["fetchFn"]) {
  return new ApiClient("http://fake", fetchFn, 1);
}

function maskB64(): string {
  const m = new MaskBuffer(16, 16);
  m.paintRect(4, 4, 11, 11);
  return maskToPngB64(m, nodeCodec);
}

async function threeStepSession(c: ApiClient): Promise<EditSession> {
  const session = new EditSession();
  const base = { guidance, steps: "100" as string | null, mask: null,
                 mode: null, tStart: null };
  await EditSession.execute(c, session, {
    ...base, kind: "generate", prompt: "a cozy scene", seed: 1,
  });
  await EditSession.execute(c, session, {
    ...base, kind: "inpaint", prompt: "a red square", seed: 2,
    mask: maskB64(), mode: "replacement",
  });
  await EditSession.execute(c, session, {
    ...base, kind: "inpaint", prompt: "a blue circle", seed: 3,
    mask: maskB64(), mode: "replacement",
  });
  return session;
}

describe("EditSession", () => {
  it("chains steps: each input is the previous result", async () => {
    const { fetchFn } = fakeFetch();
    const session = await threeStepSession(client(fetchFn));
    expect(session.steps).toHaveLength(3);
    expect(session.steps[0].input).toBeNull();
    expect(session.steps[1].input).toBe(session.steps[0].result);
    expect(session.steps[2].input).toBe(session.steps[1].result);
  });

  it("rejects steps whose input is not the current canvas", () => {
    const session = new EditSession();
    const step: EditStep = {
      kind: "inpaint", prompt: "x", guidance, steps: null, seed: 0,
      input: "bogus", mask: maskB64(), mode: null, tStart: null, result: "r",
    };
    expect(() => session.addStep(step)).toThrow(/previous step/);
  });

  it("serializes and replays byte-identically against a deterministic server", async () => {
    const { fetchFn } = fakeFetch();
    const c = client(fetchFn);
    const session = await threeStepSession(c);
    const restored = EditSession.fromJSON(session.toJSON());
    expect(restored.steps).toHaveLength(3);
    await restored.replay(c); // same fake server -> identical bytes
  });

  it("replay raises on divergent results", async () => {
    const { fetchFn } = fakeFetch();
    const c = client(fetchFn);
    const session = await threeStepSession(c);
    const tampered = JSON.parse(session.toJSON());
    tampered.steps[2].seed = 999; // recorded result no longer matches
    const restored = EditSession.fromJSON(JSON.stringify(tampered));
    await expect(restored.replay(c)).rejects.toThrow(ReplayMismatch);
  });

  it("completed steps are frozen", async () => {
    const { fetchFn } = fakeFetch();
    const session = await threeStepSession(client(fetchFn));
    expect(() => {
      (session.steps[0] as { prompt: string }).prompt = "mutated";
    }).toThrow();
  });

  it("rejects malformed session files", () => {
    expect(() => EditSession.fromJSON("{}")).toThrow(/session/);
  });
});

describe("ApiClient", () => {
  it("polls jobs to completion and returns the result", async () => {
    const { fetchFn, calls } = fakeFetch();
    const res = await client(fetchFn).generate({
      prompt: "a", guidance, steps: null, seed: 5, count: 1,
    });
    expect(res.images).toHaveLength(1);
    expect(calls.some((c) => c.url.includes("/v1/jobs/"))).toBe(true);
  });

  it("surfaces API errors verbatim", async () => {
    const { fetchFn } = fakeFetch({ failFirst: 1 });
    await expect(
      client(fetchFn).generate({ prompt: "a", guidance, steps: null, seed: 0, count: 1 }),
    ).rejects.toThrow(/job queue is full/);
    // and the same client succeeds on retry
    const res = await client(fetchFn).generate({
      prompt: "a", guidance, steps: null, seed: 0, count: 1,
    });
    expect(res.images).toHaveLength(1);
  });

  it("wraps failures with status codes", async () => {
    const { fetchFn } = fakeFetch({ failFirst: 1 });
    try {
      await client(fetchFn).generate({ prompt: "a", guidance, steps: null, seed: 0, count: 1 });
      expect.unreachable();
    } catch (err) {
      expect(err).toBeInstanceOf(ApiError);
      expect((err as ApiError).status).toBe(503);
    }
  });
});
