import * as tf from '@tensorflow/tfjs';
import Papa from 'papaparse';
import { readFileSync, writeFileSync, mkdirSync } from 'fs';
import * as path from 'path';

import { DecodeError, RESIZE_POLICY, decodeImage, imageToInput } from './images';
import { OutputRecord, writeManifest, writeSoftmax, writeVectors } from './formats';
import { loadModel } from './weights';

const SPLITS = new Set(['train', 'valid', 'test']);
const BOOL_TOKENS: Record<string, boolean> = { true: true, '1': true, false: false, '0': false };

export interface LabelRow {
  file: string;
  imageId: string;
  lesionId: string;
  label: string;
  split: string;
  hasPathology: boolean;
}

export interface ExtractionJob {
  imagesDir: string;
  labelsCsv: string;
  weightsPath: string;
  outDir: string;
  modelId: string;
  /** output base name; files become <name>.manifest.csv etc. */
  name: string;
  batchSize: number;
  strict: boolean;
  /** expected feature width; mismatch against the model is an error */
  declaredDim?: number;
}

export interface ExtractionReport {
  name: string;
  records: number;
  featureWidth: number;
  classes: string[];
  skipped: { file: string; reason: string }[];
  files: string[];
}

/**
 * Parse the label CSV. Required columns: file, lesion_id, label, split.
 * Optional: image_id (defaults to the file name without extension) and
 * has_pathology (defaults to true).
 */
export function readLabels(labelsCsv: string): LabelRow[] {
  const parsed = Papa.parse<Record<string, string>>(readFileSync(labelsCsv, 'utf8'), {
    header: true,
    skipEmptyLines: true,
  });
  if (parsed.errors.length > 0) {
    const first = parsed.errors[0];
    throw new Error(`${labelsCsv}: ${first.message} (row ${first.row})`);
  }
  const fields = parsed.meta.fields ?? [];
  for (const required of ['file', 'lesion_id', 'label', 'split']) {
    if (!fields.includes(required)) {
      throw new Error(`${labelsCsv}: missing column '${required}'`);
    }
  }
  const rows: LabelRow[] = [];
  const seenIds = new Set<string>();
  for (const raw of parsed.data) {
    const file = raw.file.trim();
    if (!file) {
      throw new Error(`${labelsCsv}: empty file column`);
    }
    const imageId = (raw.image_id ?? '').trim() || path.basename(file, path.extname(file));
    if (seenIds.has(imageId)) {
      throw new Error(
        `${labelsCsv}: duplicate image_id '${imageId}' ` +
          `(add an explicit image_id column to disambiguate repeated files)`,
      );
    }
    seenIds.add(imageId);
    const split = raw.split.trim();
    if (!SPLITS.has(split)) {
      throw new Error(`${labelsCsv}: unknown split token '${split}' for '${imageId}'`);
    }
    let hasPathology = true;
    if (raw.has_pathology !== undefined && raw.has_pathology.trim() !== '') {
      const token = raw.has_pathology.trim().toLowerCase();
      if (!(token in BOOL_TOKENS)) {
        throw new Error(`${labelsCsv}: bad has_pathology token '${raw.has_pathology}'`);
      }
      hasPathology = BOOL_TOKENS[token];
    }
    rows.push({
      file,
      imageId,
      lesionId: raw.lesion_id.trim(),
      label: raw.label.trim(),
      split,
      hasPathology,
    });
  }
  if (rows.length === 0) {
    throw new Error(`${labelsCsv}: no data rows`);
  }
  return rows;
}

function checkFinite(values: Float32Array, what: string, imageId: string): void {
  let norm = 0;
  for (let i = 0; i < values.length; i++) {
    if (!Number.isFinite(values[i])) {
      throw new Error(`model produced a non-finite ${what} value for '${imageId}'`);
    }
    norm += Math.abs(values[i]);
  }
  if (norm === 0) {
    throw new Error(`model produced an all-zero ${what} vector for '${imageId}'`);
  }
}

async function runBatch(
  model: tf.LayersModel,
  inputs: tf.Tensor3D[],
): Promise<{ features: Float32Array[]; probabilities: Float32Array[] }> {
  const [featT, probT] = tf.tidy(() => {
    const batch = tf.stack(inputs);
    return model.predict(batch) as tf.Tensor[];
  });
  for (const t of inputs) t.dispose();
  const featData = (await featT.data()) as Float32Array;
  const probData = (await probT.data()) as Float32Array;
  const featWidth = featT.shape[1] as number;
  const probWidth = probT.shape[1] as number;
  featT.dispose();
  probT.dispose();
  const features: Float32Array[] = [];
  const probabilities: Float32Array[] = [];
  for (let i = 0; i < inputs.length; i++) {
    features.push(featData.slice(i * featWidth, (i + 1) * featWidth));
    probabilities.push(probData.slice(i * probWidth, (i + 1) * probWidth));
  }
  return { features, probabilities };
}

/**
 * Run the job end to end: decode every labeled image, push batches through
 * the model in inference mode, and write the manifest, vector payload,
 * softmax table and an extraction metadata sidecar into the output directory.
 * Row order follows the label CSV, minus any skipped images.
 */
export async function extract(job: ExtractionJob): Promise<ExtractionReport> {
  const rows = readLabels(job.labelsCsv);
  const { arch, classes, model } = loadModel({
    weightsPath: job.weightsPath,
    modelId: job.modelId,
  });
  try {
    if (job.declaredDim !== undefined && job.declaredDim !== arch.featureWidth) {
      throw new Error(
        `dimension mismatch: --dim ${job.declaredDim} but model '${arch.id}' ` +
          `emits ${arch.featureWidth}-wide features`,
      );
    }
    const skipped: { file: string; reason: string }[] = [];
    const records: OutputRecord[] = [];
    let pending: { row: LabelRow; input: tf.Tensor3D }[] = [];

    const flush = async () => {
      if (pending.length === 0) return;
      const batch = pending;
      pending = [];
      const { features, probabilities } = await runBatch(
        model,
        batch.map(p => p.input),
      );
      for (let i = 0; i < batch.length; i++) {
        const row = batch[i].row;
        checkFinite(features[i], 'feature', row.imageId);
        checkFinite(probabilities[i], 'probability', row.imageId);
        records.push({
          imageId: row.imageId,
          lesionId: row.lesionId,
          label: row.label,
          split: row.split,
          hasPathology: row.hasPathology,
          features: features[i],
          probabilities: probabilities[i],
        });
      }
    };

    for (const row of rows) {
      const file = path.join(job.imagesDir, row.file);
      try {
        const image = decodeImage(file);
        pending.push({ row, input: imageToInput(image, arch.inputSize) });
      } catch (e) {
        if (!(e instanceof DecodeError)) throw e;
        if (job.strict) {
          for (const p of pending) p.input.dispose();
          throw new Error(`undecodable image: ${e.message}`);
        }
        skipped.push({ file: row.file, reason: e.message });
        continue;
      }
      if (pending.length >= job.batchSize) {
        await flush();
      }
    }
    await flush();
    if (records.length === 0) {
      throw new Error('no decodable images, nothing to extract');
    }

    mkdirSync(job.outDir, { recursive: true });
    const files = [
      writeManifest(job.outDir, job.name, records),
      writeVectors(job.outDir, job.name, records),
      writeSoftmax(job.outDir, job.name, classes, records),
    ];
    const metadata = {
      model: arch.id,
      input_size: arch.inputSize,
      feature_width: arch.featureWidth,
      classes,
      resize_policy: RESIZE_POLICY,
      weights_file: path.basename(job.weightsPath),
      records: records.length,
      skipped,
    };
    const metaFile = path.join(job.outDir, `${job.name}.extraction.json`);
    writeFileSync(metaFile, JSON.stringify(metadata, null, 2) + '\n');
    files.push(metaFile);

    return {
      name: job.name,
      records: records.length,
      featureWidth: arch.featureWidth,
      classes,
      skipped,
      files,
    };
  } finally {
    model.dispose();
  }
}
