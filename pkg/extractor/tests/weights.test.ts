import * as tf from '@tensorflow/tfjs';
import { beforeAll, describe, expect, it } from 'vitest';
import { mkdtempSync, readFileSync, writeFileSync } from 'fs';
import { tmpdir } from 'os';
import * as path from 'path';

import { loadModel, readWeightsHeader, writeInitialWeights } from '../src/weights';

beforeAll(async () => {
  await tf.setBackend('cpu');
  await tf.ready();
});

function tmpFile(name: string): string {
  return path.join(mkdtempSync(path.join(tmpdir(), 'wts-')), name);
}

const CLASSES = ['mel', 'nv', 'bkl'];

describe('weights files', () => {
  it('stamps model, width and classes into the header', () => {
    const file = tmpFile('w.bin');
    writeInitialWeights({ modelId: 'tiny', classes: CLASSES, seed: 7, outPath: file });
    const { header, payload } = readWeightsHeader(file);
    expect(header.model).toBe('tiny');
    expect(header.featureWidth).toBe(32);
    expect(header.classes).toEqual(CLASSES);
    const declared = header.tensors.reduce(
      (total, t) => total + t.shape.reduce((a, b) => a * b, 1) * 4,
      0,
    );
    expect(payload.length).toBe(declared);
  });

  it('is deterministic per seed and differs across seeds', () => {
    const a = tmpFile('a.bin');
    const b = tmpFile('b.bin');
    const c = tmpFile('c.bin');
    writeInitialWeights({ modelId: 'tiny', classes: CLASSES, seed: 7, outPath: a });
    writeInitialWeights({ modelId: 'tiny', classes: CLASSES, seed: 7, outPath: b });
    writeInitialWeights({ modelId: 'tiny', classes: CLASSES, seed: 8, outPath: c });
    expect(readFileSync(a).equals(readFileSync(b))).toBe(true);
    expect(readFileSync(a).equals(readFileSync(c))).toBe(false);
  });

  it('loads back and predicts identically across loads', async () => {
    const file = tmpFile('w.bin');
    writeInitialWeights({ modelId: 'tiny', classes: CLASSES, seed: 3, outPath: file });
    const input = tf.randomUniform([1, 32, 32, 3], 0, 1, 'float32', 11);
    const out: Float32Array[] = [];
    for (let round = 0; round < 2; round++) {
      const { model, classes } = loadModel({ weightsPath: file, modelId: 'tiny' });
      expect(classes).toEqual(CLASSES);
      const [features] = model.predict(input) as tf.Tensor[];
      out.push((await features.data()) as Float32Array);
      features.dispose();
      model.dispose();
    }
    input.dispose();
    expect(Buffer.from(out[0].buffer).equals(Buffer.from(out[1].buffer))).toBe(true);
  });

  it('rejects a file made for another model', () => {
    const file = tmpFile('w.bin');
    writeInitialWeights({ modelId: 'tiny', classes: CLASSES, seed: 1, outPath: file });
    expect(() => loadModel({ weightsPath: file, modelId: 'resnet50' })).toThrow(
      'model mismatch',
    );
  });

  it('rejects a tampered feature width', () => {
    const file = tmpFile('w.bin');
    writeInitialWeights({ modelId: 'tiny', classes: CLASSES, seed: 1, outPath: file });
    const buf = readFileSync(file);
    const headerLen = buf.readUInt32LE(4);
    const header = JSON.parse(buf.toString('utf8', 8, 8 + headerLen));
    header.featureWidth = 64;
    const headerBuf = Buffer.from(JSON.stringify(header), 'utf8');
    const lenBuf = Buffer.alloc(4);
    lenBuf.writeUInt32LE(headerBuf.length, 0);
    writeFileSync(
      file,
      Buffer.concat([Buffer.from('EMBW'), lenBuf, headerBuf, buf.subarray(8 + headerLen)]),
    );
    expect(() => loadModel({ weightsPath: file, modelId: 'tiny' })).toThrow(
      'dimension mismatch',
    );
  });

  it('rejects a truncated payload', () => {
    const file = tmpFile('w.bin');
    writeInitialWeights({ modelId: 'tiny', classes: CLASSES, seed: 1, outPath: file });
    const buf = readFileSync(file);
    writeFileSync(file, buf.subarray(0, buf.length - 40));
    expect(() => loadModel({ weightsPath: file, modelId: 'tiny' })).toThrow('shorter');
  });

  it('rejects junk files and short class lists', () => {
    const file = tmpFile('junk.bin');
    writeFileSync(file, 'not weights at all');
    expect(() => loadModel({ weightsPath: file, modelId: 'tiny' })).toThrow('bad magic');
    expect(() =>
      writeInitialWeights({ modelId: 'tiny', classes: ['only'], seed: 1, outPath: file }),
    ).toThrow('at least two');
  });
});
