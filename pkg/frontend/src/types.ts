/** JSON contracts of the generation service. */

export interface GuidanceSpec {
  kind: "none" | "classifier_free" | "clip";
  scale: number;
}

export interface GenerateRequest {
  prompt: string;
  guidance: GuidanceSpec;
  steps: string | null;
  seed: number;
  count: number;
  model?: string;
}

export interface InpaintRequest {
  image: string; // base64 PNG
  mask: string;  // base64 PNG, white = keep
  prompt: string;
  guidance: GuidanceSpec;
  steps: string | null;
  seed: number;
  mode: "replacement" | "finetuned";
  model?: string | null;
}

export interface SdeditRequest {
  image: string;
  t_start: number;
  prompt: string;
  guidance: GuidanceSpec;
  steps: string | null;
  seed: number;
  model?: string;
}

export interface JobResult {
  images: string[]; // base64 PNGs
  metadata: {
    seed: number;
    scale: number | null;
    steps: string | null;
    model: string;
  };
}

export interface JobView {
  id: string;
  kind: string;
  state: "queued" | "running" | "done" | "failed";
  result?: JobResult;
  error?: string;
}

export interface EchoResponse {
  width: number;
  height: number;
  sha256: string;
  mask: string;
}

export interface ModelInfo {
  name: string;
  arch: string;
  [key: string]: unknown;
}
