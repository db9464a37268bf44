/**
 * An edit session is the ordered list of steps that produced the current
 * canvas: each step's input is the previous step's result, every step records
 * the full request (prompt, guidance, seed, mask), and replaying the session
 * through the API reproduces every image byte-for-byte.
 */

import type { ApiClient } from "./api.js";
import type { GuidanceSpec } from "./types.js";

export interface EditStep {
  readonly kind: "generate" | "inpaint" | "sdedit";
  readonly prompt: string;
  readonly guidance: GuidanceSpec;
  readonly steps: string | null;
  readonly seed: number;
  readonly input: string | null; // base64 PNG; null only for the first generate
  readonly mask: string | null;  // base64 PNG for inpaint steps
  readonly mode: "replacement" | "finetuned" | null;
  readonly tStart: number | null;
  readonly result: string;       // base64 PNG
}

export class ReplayMismatch extends Error {
  constructor(readonly stepIndex: number) {
    super(`replayed step ${stepIndex} produced different bytes`);
  }
}

export class EditSession {
  private readonly _steps: EditStep[] = [];

  get steps(): readonly EditStep[] {
    return this._steps;
  }

  current(): string | null {
    return this._steps.length ? this._steps[this._steps.length - 1].result : null;
  }

  addStep(step: EditStep): void {
    if (step.input !== this.current()) {
      throw new Error("step input must equal the previous step's result");
    }
    if (step.kind !== "generate" && step.input === null) {
      throw new Error(`${step.kind} needs an input image`);
    }
    if (step.kind === "inpaint" && !step.mask) {
      throw new Error("inpaint needs a mask");
    }
    this._steps.push(Object.freeze({ ...step }));
  }

  toJSON(): string {
    return JSON.stringify({ version: 1, steps: this._steps });
  }

  static fromJSON(text: string): EditSession {
    const parsed = JSON.parse(text) as { version: number; steps: EditStep[] };
    if (parsed.version !== 1 || !Array.isArray(parsed.steps)) {
      throw new Error("not a session file");
    }
    const session = new EditSession();
    for (const step of parsed.steps) session.addStep(step);
    return session;
  }

  /** Execute one step against the API and append it. */
  static async execute(
    client: ApiClient,
    session: EditSession,
    params: Omit<EditStep, "result" | "input">,
  ): Promise<EditStep> {
    const input = session.current();
    const result = await runRequest(client, { ...params, input });
    const step: EditStep = { ...params, input, result };
    session.addStep(step);
    return step;
  }

  /** Re-run every step; byte-identical results or ReplayMismatch. */
  async replay(client: ApiClient): Promise<void> {
    let carried: string | null = null;
    for (let i = 0; i < this._steps.length; i++) {
      const step = this._steps[i];
      const replayed = await runRequest(client, { ...step, input: carried });
      if (replayed !== step.result) throw new ReplayMismatch(i);
      carried = replayed;
    }
  }
}

async function runRequest(
  client: ApiClient,
  step: Omit<EditStep, "result">,
): Promise<string> {
  if (step.kind === "generate") {
    const res = await client.generate({
      prompt: step.prompt,
      guidance: step.guidance,
      steps: step.steps,
      seed: step.seed,
      count: 1,
    });
    return res.images[0];
  }
  if (step.input === null) throw new Error(`${step.kind} needs an input image`);
  if (step.kind === "inpaint") {
    if (!step.mask) throw new Error("inpaint needs a mask");
    const res = await client.inpaint({
      image: step.input,
      mask: step.mask,
      prompt: step.prompt,
      guidance: step.guidance,
      steps: step.steps,
      seed: step.seed,
      mode: step.mode ?? "replacement",
    });
    return res.images[0];
  }
  if (step.tStart === null) throw new Error("sdedit needs tStart");
  const res = await client.sdedit({
    image: step.input,
    t_start: step.tStart,
    prompt: step.prompt,
    guidance: step.guidance,
    steps: step.steps,
    seed: step.seed,
  });
  return res.images[0];
}
