/**
 * Typed client for the generation service. Jobs are submitted, then polled
 * (default 1s) until they reach a terminal state; API errors are surfaced
 * verbatim so the UI can show them with a retry.
 */

import type {
  EchoResponse, GenerateRequest, InpaintRequest, JobResult, JobView,
  ModelInfo, SdeditRequest,
} from "./types.js";

export class ApiError extends Error {
  constructor(readonly status: number, readonly detail: string) {
    super(`API ${status}: ${detail}`);
  }
}

type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

const sleep = (ms: number) => new Promise((r) => setTimeout(r, ms));

export class ApiClient {
  constructor(
    readonly baseUrl: string,
    private readonly fetchFn: FetchLike = (...args) => fetch(...args),
    private readonly pollMs = 1000,
  ) {}

  private async request<T>(path: string, body?: unknown): Promise<T> {
    const init: RequestInit = body === undefined
      ? {}
      : {
          method: "POST",
          headers: { "Content-Type": "application/json" },
          body: JSON.stringify(body),
        };
    const resp = await this.fetchFn(`${this.baseUrl}${path}`, init);
    const payload = await resp.json().catch(() => ({}));
    if (!resp.ok) {
      const detail = typeof (payload as { detail?: unknown }).detail === "string"
        ? (payload as { detail: string }).detail
        : JSON.stringify(payload);
      throw new ApiError(resp.status, detail);
    }
    return payload as T;
  }

  health(): Promise<{ status: string }> {
    return this.request("/health");
  }

  models(): Promise<{ models: ModelInfo[] }> {
    return this.request("/v1/models");
  }

  job(id: string): Promise<JobView> {
    return this.request(`/v1/jobs/${id}`);
  }

  echoMask(maskB64: string): Promise<EchoResponse> {
    return this.request("/v1/echo", { mask: maskB64 });
  }

  private async waitForJob(jobId: string, timeoutMs = 600_000): Promise<JobResult> {
    const deadline = Date.now() + timeoutMs;
    for (;;) {
      const view = await this.job(jobId);
      if (view.state === "done" && view.result) return view.result;
      if (view.state === "failed") {
        throw new ApiError(500, view.error ?? "job failed");
      }
      if (Date.now() > deadline) throw new ApiError(408, `job ${jobId} timed out`);
      await sleep(this.pollMs);
    }
  }

  private async submitAndWait(path: string, body: unknown): Promise<JobResult> {
    const { job_id } = await this.request<{ job_id: string }>(path, body);
    return this.waitForJob(job_id);
  }

  generate(req: GenerateRequest): Promise<JobResult> {
    return this.submitAndWait("/v1/generate", req);
  }

  inpaint(req: InpaintRequest): Promise<JobResult> {
    return this.submitAndWait("/v1/inpaint", req);
  }

  sdedit(req: SdeditRequest): Promise<JobResult> {
    return this.submitAndWait("/v1/sdedit", req);
  }
}
