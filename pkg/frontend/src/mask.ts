/**
 * Binary inpainting masks. Pixels are 1 where the image is kept and 0 where
 * the user painted (the region to regenerate); a mask with no strokes is all
 * ones and is not submittable.
 */

export class MaskBuffer {
  readonly width: number;
  readonly height: number;
  readonly data: Uint8Array; // 1 = keep, 0 = erase

  constructor(width: number, height: number, data?: Uint8Array) {
    if (width < 1 || height < 1) {
      throw new Error(`bad mask size ${width}x${height}`);
    }
    this.width = width;
    this.height = height;
    if (data) {
      if (data.length !== width * height) {
        throw new Error(`mask data length ${data.length} != ${width * height}`);
      }
      this.data = data;
    } else {
      this.data = new Uint8Array(width * height).fill(1);
    }
  }

  clone(): MaskBuffer {
    return new MaskBuffer(this.width, this.height, this.data.slice());
  }

  at(x: number, y: number): number {
    return this.data[y * this.width + x];
  }

  /** Paint an erase stroke: a filled disc at (cx, cy) in pixel coordinates. */
  paintCircle(cx: number, cy: number, radius: number): void {
    if (cx < 0 || cy < 0 || cx >= this.width || cy >= this.height) {
      throw new Error(`stroke (${cx},${cy}) outside ${this.width}x${this.height}`);
    }
    const r2 = radius * radius;
    const x0 = Math.max(0, Math.floor(cx - radius));
    const x1 = Math.min(this.width - 1, Math.ceil(cx + radius));
    const y0 = Math.max(0, Math.floor(cy - radius));
    const y1 = Math.min(this.height - 1, Math.ceil(cy + radius));
    for (let y = y0; y <= y1; y++) {
      for (let x = x0; x <= x1; x++) {
        const dx = x - cx;
        const dy = y - cy;
        if (dx * dx + dy * dy <= r2) {
          this.data[y * this.width + x] = 0;
        }
      }
    }
  }

  paintRect(x0: number, y0: number, x1: number, y1: number): void {
    for (let y = Math.max(0, y0); y <= Math.min(this.height - 1, y1); y++) {
      for (let x = Math.max(0, x0); x <= Math.min(this.width - 1, x1); x++) {
        this.data[y * this.width + x] = 0;
      }
    }
  }

  /** True when nothing has been painted yet (submit stays disabled). */
  isEmpty(): boolean {
    return this.data.every((v) => v === 1);
  }

  erasedFraction(): number {
    let erased = 0;
    for (const v of this.data) if (v === 0) erased++;
    return erased / this.data.length;
  }

  /** Raw grayscale bytes (0 or 255), the hashing/transport layout. */
  toRaw255(): Uint8Array {
    const out = new Uint8Array(this.data.length);
    for (let i = 0; i < this.data.length; i++) out[i] = this.data[i] ? 255 : 0;
    return out;
  }

  static fromRaw255(width: number, height: number, raw: Uint8Array): MaskBuffer {
    const data = new Uint8Array(raw.length);
    for (let i = 0; i < raw.length; i++) data[i] = raw[i] > 127 ? 1 : 0;
    return new MaskBuffer(width, height, data);
  }

  equals(other: MaskBuffer): boolean {
    return (
      this.width === other.width &&
      this.height === other.height &&
      this.data.every((v, i) => v === other.data[i])
    );
  }

  /** sha256 hex of the raw 0/255 bytes; matches the server's echo hash. */
  async sha256(): Promise<string> {
    const raw = this.toRaw255();
    const copy = new Uint8Array(new ArrayBuffer(raw.length));
    copy.set(raw);
    const digest = await crypto.subtle.digest("SHA-256", copy);
    return [...new Uint8Array(digest)]
      .map((b) => b.toString(16).padStart(2, "0"))
      .join("");
  }
}
