import { PNG } from 'pngjs';
import seedrandom from 'seedrandom';
import { spawnSync, SpawnSyncReturns } from 'child_process';
import { mkdirSync, writeFileSync } from 'fs';
import * as path from 'path';

export function writeNoisePng(file: string, width: number, height: number, seed: string): void {
  const rng = seedrandom(seed);
  const png = new PNG({ width, height });
  for (let i = 0; i < width * height; i++) {
    png.data[i * 4] = Math.floor(rng() * 256);
    png.data[i * 4 + 1] = Math.floor(rng() * 256);
    png.data[i * 4 + 2] = Math.floor(rng() * 256);
    png.data[i * 4 + 3] = 255;
  }
  writeFileSync(file, PNG.sync.write(png));
}

export function writeNoisePpm(file: string, width: number, height: number, seed: string): void {
  const rng = seedrandom(seed);
  const pixels = Buffer.allocUnsafe(width * height * 3);
  for (let i = 0; i < pixels.length; i++) {
    pixels[i] = Math.floor(rng() * 256);
  }
  writeFileSync(file, Buffer.concat([Buffer.from(`P6\n${width} ${height}\n255\n`), pixels]));
}

export interface ToyFixture {
  imagesDir: string;
  labelsCsv: string;
  /** rows as written, in order */
  rows: string[][];
}

/**
 * Ten varied-size noise images across two classes and three splits, with the
 * lesion grouping and has_pathology cases the ingest format cares about.
 * One image is a PPM to cover the second decode path.
 */
export function makeToyFixture(dir: string): ToyFixture {
  const imagesDir = path.join(dir, 'images');
  mkdirSync(imagesDir, { recursive: true });
  const rows: string[][] = [
    ['img0.png', 'L0', 'mel', 'train', 'true'],
    ['img1.png', 'L0', 'mel', 'train', 'true'],
    ['img2.png', 'L1', 'nv', 'train', 'true'],
    ['img3.png', 'L2', 'nv', 'train', 'false'],
    ['img4.ppm', 'L3', 'mel', 'train', 'true'],
    ['img5.png', 'L4', 'nv', 'train', 'true'],
    ['img6.png', 'L5', 'nv', 'valid', 'true'],
    ['img7.png', 'L6', 'mel', 'test', 'true'],
    ['img8.png', 'L7', 'nv', 'test', 'true'],
    ['img9.png', 'L8', 'nv', 'test', 'true'],
  ];
  const sizes: [number, number][] = [
    [32, 32], [40, 28], [28, 40], [33, 31], [24, 24],
    [48, 48], [32, 32], [36, 30], [30, 36], [32, 32],
  ];
  rows.forEach((row, i) => {
    const [w, h] = sizes[i];
    const file = path.join(imagesDir, row[0]);
    if (row[0].endsWith('.ppm')) {
      writeNoisePpm(file, w, h, `toy-${i}`);
    } else {
      writeNoisePng(file, w, h, `toy-${i}`);
    }
  });
  const labelsCsv = path.join(dir, 'toy.csv');
  const lines = ['file,lesion_id,label,split,has_pathology'];
  for (const row of rows) {
    lines.push(row.join(','));
  }
  writeFileSync(labelsCsv, lines.join('\n') + '\n');
  return { imagesDir, labelsCsv, rows };
}

const CLI = path.join(__dirname, '..', 'dist', 'cli.js');

export function runCli(args: string[], cwd?: string): SpawnSyncReturns<string> {
  return spawnSync('node', [CLI, ...args], { encoding: 'utf8', cwd, timeout: 120_000 });
}

export function runCbirDx(args: string[], cwd?: string): SpawnSyncReturns<string> {
  return spawnSync('cbir-dx', args, { encoding: 'utf8', cwd, timeout: 120_000 });
}
