/**
 * PNG transport for masks. The codec is injected per environment: node tests
 * use pngjs, the browser uses a canvas-backed codec (see editor.ts).
 */

import { MaskBuffer } from "./mask.js";

export interface GrayPng {
  width: number;
  height: number;
  raw255: Uint8Array;
}

export interface PngCodec {
  encodeGray(width: number, height: number, raw255: Uint8Array): Uint8Array;
  decodeGray(bytes: Uint8Array): GrayPng;
}

export function bytesToB64(bytes: Uint8Array): string {
  let bin = "";
  for (const b of bytes) bin += String.fromCharCode(b);
  return btoa(bin);
}

export function b64ToBytes(b64: string): Uint8Array {
  const bin = atob(b64);
  const out = new Uint8Array(bin.length);
  for (let i = 0; i < bin.length; i++) out[i] = bin.charCodeAt(i);
  return out;
}

export function maskToPngB64(mask: MaskBuffer, codec: PngCodec): string {
  return bytesToB64(codec.encodeGray(mask.width, mask.height, mask.toRaw255()));
}

export function maskFromPngB64(b64: string, codec: PngCodec): MaskBuffer {
  const { width, height, raw255 } = codec.decodeGray(b64ToBytes(b64));
  return MaskBuffer.fromRaw255(width, height, raw255);
}
