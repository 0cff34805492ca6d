#!/usr/bin/env node
import * as tf from '@tensorflow/tfjs';
import yargs from 'yargs';
import { hideBin } from 'yargs/helpers';
import * as path from 'path';

import { extract } from './extract';
import { RESIZE_POLICY } from './images';
import { DEFAULT_ARCH, archIds } from './model';
import { writeInitialWeights } from './weights';

async function setup(): Promise<void> {
  try {
    tf.env().set('PROD', true); // silence the tfjs-node advertisement
  } catch {
    // flag not known in this tfjs build, banner is harmless
  }
  await tf.setBackend('cpu');
  await tf.ready();
}

function fail(e: unknown): void {
  if (e instanceof Error) {
    console.error(`error: ${e.message}`);
    process.exitCode = 1;
  } else {
    console.error(`runtime error: ${String(e)}`);
    process.exitCode = 2;
  }
}

export async function main(argv: string[]): Promise<unknown> {
  return yargs(argv)
    .scriptName('extract-embeddings')
    .command(
      '$0',
      'extract features and class probabilities from an image folder',
      y =>
        y
          .option('images', { type: 'string', demandOption: true, describe: 'image directory' })
          .option('labels', {
            type: 'string',
            demandOption: true,
            describe: 'CSV with columns file,lesion_id,label,split (optional image_id,has_pathology)',
          })
          .option('weights', { type: 'string', demandOption: true, describe: 'weights file' })
          .option('out', { type: 'string', demandOption: true, describe: 'output directory' })
          .option('model', {
            type: 'string',
            default: DEFAULT_ARCH,
            choices: archIds(),
            describe: 'backbone identifier',
          })
          .option('name', {
            type: 'string',
            describe: 'output base name (default: label CSV name)',
          })
          .option('batch', { type: 'number', default: 16, describe: 'inference batch size' })
          .option('dim', {
            type: 'number',
            describe: 'expected feature width, rejected on mismatch',
          })
          .option('strict', {
            type: 'boolean',
            default: false,
            describe: 'fail on the first undecodable image instead of skipping it',
          }),
      async args => {
        try {
          await setup();
          if (!Number.isInteger(args.batch) || args.batch < 1) {
            throw new Error(`--batch must be a positive integer, got ${args.batch}`);
          }
          const report = await extract({
            imagesDir: args.images,
            labelsCsv: args.labels,
            weightsPath: args.weights,
            outDir: args.out,
            modelId: args.model,
            name: args.name ?? path.basename(args.labels, path.extname(args.labels)),
            batchSize: args.batch,
            strict: args.strict,
            declaredDim: args.dim,
          });
          for (const s of report.skipped) {
            console.error(`skipped: ${s.file} (${s.reason})`);
          }
          for (const f of report.files) {
            console.log(`wrote: ${f}`);
          }
          const skipNote = report.skipped.length > 0 ? `, ${report.skipped.length} skipped` : '';
          console.log(
            `done: ${report.records} images, d=${report.featureWidth}, ` +
              `${report.classes.length} classes${skipNote}`,
          );
        } catch (e) {
          fail(e);
        }
      },
    )
    .command(
      'init-weights',
      'write a seeded-random weights file (stand-in for trained weights)',
      y =>
        y
          .option('model', {
            type: 'string',
            default: DEFAULT_ARCH,
            choices: archIds(),
            describe: 'backbone identifier',
          })
          .option('classes', {
            type: 'string',
            demandOption: true,
            describe: 'comma-separated class names, fixes the softmax columns',
          })
          .option('seed', { type: 'number', default: 0 })
          .option('out', { type: 'string', demandOption: true, describe: 'weights file to write' }),
      async args => {
        try {
          await setup();
          writeInitialWeights({
            modelId: args.model,
            classes: args.classes.split(',').map(c => c.trim()).filter(c => c.length > 0),
            seed: args.seed,
            outPath: args.out,
          });
          console.log(`wrote: ${args.out}`);
        } catch (e) {
          fail(e);
        }
      },
    )
    .epilogue(
      `Preprocessing is fixed for reproducibility: ${RESIZE_POLICY}. ` +
        'Inference runs in evaluation mode, so repeated extraction of the same ' +
        'inputs is bitwise identical. Outputs are <name>.manifest.csv, ' +
        '<name>.vectors.f32, <name>.softmax.csv in the cbir-dx dataset formats ' +
        'plus <name>.extraction.json recording model, preprocessing and skips. ' +
        'Exit codes: 0 ok, 1 bad input, 2 unexpected failure.',
    )
    .strict()
    .help()
    .parse();
}

if (require.main === module) {
  main(hideBin(process.argv));
}
