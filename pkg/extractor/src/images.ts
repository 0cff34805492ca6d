import * as tf from '@tensorflow/tfjs';
import { PNG } from 'pngjs';
import { readFileSync } from 'fs';

/**
 * Every image is preprocessed the same fixed way before inference; the policy
 * is part of the tool contract and is stamped into the extraction metadata.
 */
export const RESIZE_POLICY =
  'decode to RGB, scale channels to [0, 1], bilinear-resize the full frame to ' +
  'the model input size (no crop, aspect ratio not preserved)';

export class DecodeError extends Error {}

export interface RawImage {
  width: number;
  height: number;
  /** RGB interleaved, [0, 1], length = width * height * 3 */
  data: Float32Array;
}

const PNG_MAGIC = Buffer.from([0x89, 0x50, 0x4e, 0x47]);

function decodePng(buf: Buffer, file: string): RawImage {
  let png: PNG;
  try {
    png = PNG.sync.read(buf);
  } catch (e) {
    throw new DecodeError(`${file}: ${(e as Error).message}`);
  }
  const data = new Float32Array(png.width * png.height * 3);
  for (let i = 0; i < png.width * png.height; i++) {
    data[i * 3] = png.data[i * 4] / 255;
    data[i * 3 + 1] = png.data[i * 4 + 1] / 255;
    data[i * 3 + 2] = png.data[i * 4 + 2] / 255;
  }
  return { width: png.width, height: png.height, data };
}

// binary PPM (P6), 8-bit; handy for fixtures because it can be written by hand
function decodePpm(buf: Buffer, file: string): RawImage {
  const header: number[] = [];
  let pos = 2;
  while (header.length < 3 && pos < buf.length) {
    while (pos < buf.length && /\s/.test(String.fromCharCode(buf[pos]))) pos++;
    if (buf[pos] === 0x23) {
      while (pos < buf.length && buf[pos] !== 0x0a) pos++;
      continue;
    }
    let token = '';
    while (pos < buf.length && !/\s/.test(String.fromCharCode(buf[pos]))) {
      token += String.fromCharCode(buf[pos]);
      pos++;
    }
    const value = Number(token);
    if (!Number.isInteger(value) || value <= 0) {
      throw new DecodeError(`${file}: bad PPM header token '${token}'`);
    }
    header.push(value);
  }
  pos++; // single whitespace after maxval
  const [width, height, maxval] = header;
  if (header.length < 3 || maxval > 255) {
    throw new DecodeError(`${file}: unsupported PPM header`);
  }
  const need = width * height * 3;
  if (buf.length - pos < need) {
    throw new DecodeError(`${file}: PPM payload truncated`);
  }
  const data = new Float32Array(need);
  for (let i = 0; i < need; i++) {
    data[i] = buf[pos + i] / maxval;
  }
  return { width, height, data };
}

/** Decode a PNG or binary PPM file, sniffing the content rather than the name. */
export function decodeImage(file: string): RawImage {
  let buf: Buffer;
  try {
    buf = readFileSync(file);
  } catch (e) {
    throw new DecodeError(`${file}: ${(e as Error).message}`);
  }
  if (buf.subarray(0, 4).equals(PNG_MAGIC)) {
    return decodePng(buf, file);
  }
  if (buf.length > 2 && buf[0] === 0x50 && buf[1] === 0x36) {
    return decodePpm(buf, file);
  }
  throw new DecodeError(`${file}: not a PNG or binary PPM image`);
}

/** Apply the fixed resize policy, yielding a [size, size, 3] float tensor. */
export function imageToInput(image: RawImage, size: number): tf.Tensor3D {
  return tf.tidy(() => {
    const full = tf.tensor3d(image.data, [image.height, image.width, 3]);
    if (image.height === size && image.width === size) {
      return full;
    }
    return tf.image.resizeBilinear(full, [size, size]);
  });
}
