/**
 * Browser glue: a zoomed canvas showing the current image, erase-stroke
 * painting over it, prompt/guidance controls, and the session history strip.
 * One edit is in flight at a time; the queue is disabled while a job runs.
 */

import { ApiClient, ApiError } from "./api.js";
import { MaskBuffer } from "./mask.js";
import { bytesToB64, b64ToBytes, maskToPngB64, type PngCodec } from "./png.js";
import { EditSession } from "./session.js";

const SIZE = 16;
const ZOOM = 20;

/** Canvas-backed PNG codec (grayscale travels in RGB, read back as R). */
export const canvasCodec: PngCodec = {
  encodeGray(width, height, raw255) {
    const canvas = document.createElement("canvas");
    canvas.width = width;
    canvas.height = height;
    const ctx = canvas.getContext("2d")!;
    const img = ctx.createImageData(width, height);
    for (let i = 0; i < raw255.length; i++) {
      img.data[4 * i] = img.data[4 * i + 1] = img.data[4 * i + 2] = raw255[i];
      img.data[4 * i + 3] = 255;
    }
    ctx.putImageData(img, 0, 0);
    const dataUrl = canvas.toDataURL("image/png");
    return b64ToBytes(dataUrl.split(",")[1]);
  },
  decodeGray() {
    throw new Error("browser codec only encodes");
  },
};

interface Refs {
  canvas: HTMLCanvasElement;
  prompt: HTMLInputElement;
  scale: HTMLInputElement;
  scaleLabel: HTMLElement;
  mode: HTMLSelectElement;
  seed: HTMLInputElement;
  submit: HTMLButtonElement;
  clear: HTMLButtonElement;
  save: HTMLButtonElement;
  load: HTMLInputElement;
  status: HTMLElement;
  history: HTMLElement;
}

export class Editor {
  private mask = new MaskBuffer(SIZE, SIZE);
  private session = new EditSession();
  private busy = false;
  private painting = false;

  constructor(private readonly client: ApiClient, private readonly refs: Refs) {
    const { canvas } = refs;
    canvas.width = SIZE * ZOOM;
    canvas.height = SIZE * ZOOM;
    canvas.addEventListener("pointerdown", (e) => {
      this.painting = true;
      this.stroke(e);
    });
    canvas.addEventListener("pointermove", (e) => this.painting && this.stroke(e));
    window.addEventListener("pointerup", () => (this.painting = false));
    refs.scale.addEventListener("input", () => {
      refs.scaleLabel.textContent = refs.scale.value;
    });
    refs.submit.addEventListener("click", () => void this.submit());
    refs.clear.addEventListener("click", () => {
      this.mask = new MaskBuffer(SIZE, SIZE);
      this.draw();
    });
    refs.save.addEventListener("click", () => this.download());
    refs.load.addEventListener("change", () => void this.upload());
    this.draw();
  }

  private stroke(e: PointerEvent): void {
    if (this.busy || !this.session.current()) return;
    const rect = this.refs.canvas.getBoundingClientRect();
    const x = Math.floor(((e.clientX - rect.left) / rect.width) * SIZE);
    const y = Math.floor(((e.clientY - rect.top) / rect.height) * SIZE);
    if (x < 0 || y < 0 || x >= SIZE || y >= SIZE) return;
    this.mask.paintCircle(x, y, 1.2);
    this.draw();
  }

  private draw(): void {
    const ctx = this.refs.canvas.getContext("2d")!;
    ctx.imageSmoothingEnabled = false;
    ctx.fillStyle = "#202020";
    ctx.fillRect(0, 0, SIZE * ZOOM, SIZE * ZOOM);
    const current = this.session.current();
    const finish = () => {
      // translucent green over erased pixels
      ctx.fillStyle = "rgba(80, 220, 100, 0.55)";
      for (let y = 0; y < SIZE; y++) {
        for (let x = 0; x < SIZE; x++) {
          if (this.mask.at(x, y) === 0) {
            ctx.fillRect(x * ZOOM, y * ZOOM, ZOOM, ZOOM);
          }
        }
      }
      this.refs.submit.disabled =
        this.busy || (this.session.current() !== null && this.mask.isEmpty()
          && this.refs.mode.value === "inpaint");
    };
    if (current) {
      const img = new Image();
      img.onload = () => {
        ctx.drawImage(img, 0, 0, SIZE * ZOOM, SIZE * ZOOM);
        finish();
      };
      img.src = `data:image/png;base64,${current}`;
    } else {
      finish();
    }
  }

  private async submit(): Promise<void> {
    if (this.busy) return;
    this.busy = true;
    this.refs.submit.disabled = true;
    this.refs.status.textContent = "running...";
    const guidance = {
      kind: "classifier_free" as const,
      scale: Number(this.refs.scale.value),
    };
    const common = {
      prompt: this.refs.prompt.value,
      guidance,
      steps: "100",
      seed: Number(this.refs.seed.value),
      mask: null as string | null,
      mode: null as "replacement" | "finetuned" | null,
      tStart: null as number | null,
    };
    try {
      if (!this.session.current()) {
        await EditSession.execute(this.client, this.session, {
          ...common, kind: "generate",
        });
      } else if (this.refs.mode.value === "sdedit") {
        await EditSession.execute(this.client, this.session, {
          ...common, kind: "sdedit", tStart: 40,
        });
      } else {
        await EditSession.execute(this.client, this.session, {
          ...common,
          kind: "inpaint",
          mode: "replacement",
          mask: maskToPngB64(this.mask, canvasCodec),
        });
      }
      this.mask = new MaskBuffer(SIZE, SIZE);
      this.refs.status.textContent = "done";
      this.renderHistory();
    } catch (err) {
      const detail = err instanceof ApiError ? err.message : String(err);
      this.refs.status.textContent = `${detail} (retry?)`;
    } finally {
      this.busy = false;
      this.draw();
    }
  }

  private renderHistory(): void {
    this.refs.history.replaceChildren(
      ...this.session.steps.map((step, i) => {
        const img = document.createElement("img");
        img.src = `data:image/png;base64,${step.result}`;
        img.title = `${i}: ${step.kind} "${step.prompt}" s=${step.guidance.scale}`;
        img.width = 64;
        img.height = 64;
        img.style.imageRendering = "pixelated";
        return img;
      }),
    );
  }

  private download(): void {
    const blob = new Blob([this.session.toJSON()], { type: "application/json" });
    const a = document.createElement("a");
    a.href = URL.createObjectURL(blob);
    a.download = "session.json";
    a.click();
    URL.revokeObjectURL(a.href);
  }

  private async upload(): Promise<void> {
    const file = this.refs.load.files?.[0];
    if (!file) return;
    this.session = EditSession.fromJSON(await file.text());
    this.renderHistory();
    this.draw();
  }
}

export function mount(baseUrl: string): Editor {
  const byId = <T extends HTMLElement>(id: string) =>
    document.getElementById(id) as T;
  return new Editor(new ApiClient(baseUrl), {
    canvas: byId<HTMLCanvasElement>("canvas"),
    prompt: byId<HTMLInputElement>("prompt"),
    scale: byId<HTMLInputElement>("scale"),
    scaleLabel: byId("scale-label"),
    mode: byId<HTMLSelectElement>("mode"),
    seed: byId<HTMLInputElement>("seed"),
    submit: byId<HTMLButtonElement>("submit"),
    clear: byId<HTMLButtonElement>("clear"),
    save: byId<HTMLButtonElement>("save"),
    load: byId<HTMLInputElement>("load"),
    status: byId("status"),
    history: byId("history"),
  });
}
