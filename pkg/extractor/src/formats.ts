import { writeFileSync } from 'fs';
import * as path from 'path';

/**
 * Writers for the dataset file formats consumed by cbir-dx:
 *
 *   <name>.manifest.csv   image_id,lesion_id,label,split,has_pathology
 *   <name>.vectors.f32    row-major little-endian float32, one row per record
 *   <name>.softmax.csv    image_id plus one probability column per class
 *
 * CSV lines end with CRLF and float columns carry the shortest round-trip
 * decimal form, matching the files the cbir-dx tooling itself emits.
 */

export interface OutputRecord {
  imageId: string;
  lesionId: string;
  label: string;
  split: string;
  hasPathology: boolean;
  features: Float32Array;
  probabilities: Float32Array;
}

const CRLF = '\r\n';

export function floatsToBufferLE(values: Float32Array): Buffer {
  const buf = Buffer.allocUnsafe(values.length * 4);
  for (let i = 0; i < values.length; i++) {
    buf.writeFloatLE(values[i], i * 4);
  }
  return buf;
}

export function bufferToFloatsLE(buf: Buffer): Float32Array {
  if (buf.length % 4 !== 0) {
    throw new Error(`payload of ${buf.length} bytes is not whole float32 values`);
  }
  const out = new Float32Array(buf.length / 4);
  for (let i = 0; i < out.length; i++) {
    out[i] = buf.readFloatLE(i * 4);
  }
  return out;
}

function csvField(value: string): string {
  if (/[",\r\n]/.test(value)) {
    return '"' + value.replace(/"/g, '""') + '"';
  }
  return value;
}

export function writeManifest(outDir: string, name: string, records: OutputRecord[]): string {
  const lines = ['image_id,lesion_id,label,split,has_pathology'];
  for (const rec of records) {
    lines.push(
      [
        csvField(rec.imageId),
        csvField(rec.lesionId),
        csvField(rec.label),
        rec.split,
        rec.hasPathology ? 'true' : 'false',
      ].join(','),
    );
  }
  const file = path.join(outDir, `${name}.manifest.csv`);
  writeFileSync(file, lines.join(CRLF) + CRLF);
  return file;
}

export function writeVectors(outDir: string, name: string, records: OutputRecord[]): string {
  const file = path.join(outDir, `${name}.vectors.f32`);
  const rows = records.map(rec => floatsToBufferLE(rec.features));
  writeFileSync(file, Buffer.concat(rows));
  return file;
}

export function writeSoftmax(
  outDir: string,
  name: string,
  classes: string[],
  records: OutputRecord[],
): string {
  const lines = [['image_id', ...classes.map(csvField)].join(',')];
  for (const rec of records) {
    const row = [csvField(rec.imageId)];
    for (let i = 0; i < classes.length; i++) {
      row.push(String(rec.probabilities[i]));
    }
    lines.push(row.join(','));
  }
  const file = path.join(outDir, `${name}.softmax.csv`);
  writeFileSync(file, lines.join(CRLF) + CRLF);
  return file;
}
