import * as tf from '@tensorflow/tfjs';
import seedrandom from 'seedrandom';
import { readFileSync, writeFileSync } from 'fs';

import { ArchSpec, getArch } from './model';
import { floatsToBufferLE, bufferToFloatsLE } from './formats';

/**
 * Weights live in a single self-describing file:
 *
 *   bytes 0..3   magic "EMBW"
 *   bytes 4..7   uint32 LE header length
 *   header       JSON: model id, input size, feature width, class names,
 *                per-tensor shapes in model order
 *   payload      concatenated float32 LE tensor values in header order
 *
 * The header ties the payload to one architecture and one class list, so a
 * file made for another model is rejected instead of silently misloaded.
 */

const MAGIC = 'EMBW';
const FORMAT = 1;

interface TensorEntry {
  name: string;
  shape: number[];
}

export interface WeightsHeader {
  format: number;
  model: string;
  inputSize: number;
  featureWidth: number;
  classes: string[];
  tensors: TensorEntry[];
}

export interface LoadedModel {
  arch: ArchSpec;
  classes: string[];
  model: tf.LayersModel;
}

function glorotLimit(shape: number[]): number {
  let fanIn: number;
  let fanOut: number;
  if (shape.length === 4) {
    const receptive = shape[0] * shape[1];
    fanIn = receptive * shape[2];
    fanOut = receptive * shape[3];
  } else if (shape.length === 2) {
    fanIn = shape[0];
    fanOut = shape[1];
  } else {
    fanIn = fanOut = shape.reduce((a, b) => a * b, 1);
  }
  return Math.sqrt(6 / (fanIn + fanOut));
}

function initialValues(name: string, shape: number[], rng: seedrandom.PRNG): Float32Array {
  const size = shape.reduce((a, b) => a * b, 1);
  const values = new Float32Array(size);
  if (name.includes('gamma') || name.includes('moving_variance')) {
    values.fill(1);
  } else if (name.includes('kernel')) {
    const limit = glorotLimit(shape);
    for (let i = 0; i < size; i++) {
      values[i] = (2 * rng() - 1) * limit;
    }
  }
  // bias, beta and moving_mean stay zero
  return values;
}

function checkClasses(classes: string[]): void {
  if (classes.length < 2) {
    throw new Error('need at least two class names');
  }
  if (new Set(classes).size !== classes.length) {
    throw new Error(`duplicate class name in ${JSON.stringify(classes)}`);
  }
}

/**
 * Build a model and write a fresh seeded-random weights file for it. This is
 * a stand-in for real trained weights, enough to exercise the full pipeline.
 */
export function writeInitialWeights(opts: {
  modelId: string;
  classes: string[];
  seed: number;
  outPath: string;
}): void {
  const arch = getArch(opts.modelId);
  checkClasses(opts.classes);
  const model = arch.build(opts.classes.length);
  try {
    const rng = seedrandom(`weights-${opts.seed}`);
    const tensors: TensorEntry[] = [];
    const chunks: Buffer[] = [];
    for (const variable of model.weights) {
      // weight shapes never carry the null batch dimension
      const shape = (variable.shape as number[]).slice();
      const values = initialValues(variable.originalName, shape, rng);
      tensors.push({ name: variable.originalName, shape });
      chunks.push(floatsToBufferLE(values));
    }
    const header: WeightsHeader = {
      format: FORMAT,
      model: arch.id,
      inputSize: arch.inputSize,
      featureWidth: arch.featureWidth,
      classes: opts.classes,
      tensors,
    };
    const headerBuf = Buffer.from(JSON.stringify(header), 'utf8');
    const lenBuf = Buffer.alloc(4);
    lenBuf.writeUInt32LE(headerBuf.length, 0);
    writeFileSync(opts.outPath, Buffer.concat([Buffer.from(MAGIC), lenBuf, headerBuf, ...chunks]));
  } finally {
    model.dispose();
  }
}

export function readWeightsHeader(weightsPath: string): { header: WeightsHeader; payload: Buffer } {
  const buf = readFileSync(weightsPath);
  if (buf.length < 8 || buf.toString('utf8', 0, 4) !== MAGIC) {
    throw new Error(`${weightsPath} is not a weights file (bad magic)`);
  }
  const headerLen = buf.readUInt32LE(4);
  if (8 + headerLen > buf.length) {
    throw new Error(`${weightsPath} is truncated`);
  }
  let header: WeightsHeader;
  try {
    header = JSON.parse(buf.toString('utf8', 8, 8 + headerLen));
  } catch {
    throw new Error(`${weightsPath} has an unreadable header`);
  }
  if (header.format !== FORMAT) {
    throw new Error(`${weightsPath}: unsupported weights format ${header.format}`);
  }
  return { header, payload: buf.subarray(8 + headerLen) };
}

/** Rebuild the architecture and load tensor values from a weights file. */
export function loadModel(opts: { weightsPath: string; modelId: string }): LoadedModel {
  const { header, payload } = readWeightsHeader(opts.weightsPath);
  if (header.model !== opts.modelId) {
    throw new Error(
      `model mismatch: weights file ${opts.weightsPath} was made for model ` +
        `'${header.model}', not '${opts.modelId}'`,
    );
  }
  const arch = getArch(opts.modelId);
  if (header.featureWidth !== arch.featureWidth || header.inputSize !== arch.inputSize) {
    throw new Error(
      `dimension mismatch: weights file declares ${header.featureWidth}-wide features ` +
        `at input size ${header.inputSize}, model '${arch.id}' expects ` +
        `${arch.featureWidth} at ${arch.inputSize}`,
    );
  }
  checkClasses(header.classes);
  const model = arch.build(header.classes.length);
  if (header.tensors.length !== model.weights.length) {
    model.dispose();
    throw new Error(
      `dimension mismatch: weights file holds ${header.tensors.length} tensors, ` +
        `model '${arch.id}' has ${model.weights.length}`,
    );
  }
  let offset = 0;
  for (let i = 0; i < model.weights.length; i++) {
    const variable = model.weights[i];
    const entry = header.tensors[i];
    const expected = (variable.shape as number[]).slice();
    if (JSON.stringify(entry.shape) !== JSON.stringify(expected)) {
      model.dispose();
      throw new Error(
        `dimension mismatch: tensor ${i} ('${entry.name}') has shape ` +
          `[${entry.shape}], model '${arch.id}' expects [${expected}]`,
      );
    }
    const size = expected.reduce((a, b) => a * b, 1);
    const bytes = size * 4;
    if (offset + bytes > payload.length) {
      model.dispose();
      throw new Error(`${opts.weightsPath} payload is shorter than its header declares`);
    }
    const values = bufferToFloatsLE(payload.subarray(offset, offset + bytes));
    offset += bytes;
    const tensor = tf.tensor(values, expected, 'float32');
    variable.write(tensor);
    tensor.dispose();
  }
  if (offset !== payload.length) {
    model.dispose();
    throw new Error(`${opts.weightsPath} payload is longer than its header declares`);
  }
  return { arch, classes: header.classes, model };
}
