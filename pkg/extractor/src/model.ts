import * as tf from '@tensorflow/tfjs';

/**
 * A backbone architecture selectable by identifier. `build` returns a model
 * with two outputs: the global-pooled penultimate activations (`featureWidth`
 * wide) and the class probabilities.
 */
export interface ArchSpec {
  id: string;
  inputSize: number;
  featureWidth: number;
  build(numClasses: number): tf.LayersModel;
}

export const DEFAULT_ARCH = 'resnet50';

function buildTiny(numClasses: number): tf.LayersModel {
  const input = tf.input({ shape: [32, 32, 3] });
  // weight-bearing layers carry explicit names so weights files are stable
  let x = tf.layers
    .conv2d({ filters: 8, kernelSize: 3, padding: 'same', activation: 'relu', name: 'c1' })
    .apply(input) as tf.SymbolicTensor;
  x = tf.layers.maxPooling2d({ poolSize: 2 }).apply(x) as tf.SymbolicTensor;
  x = tf.layers
    .conv2d({ filters: 16, kernelSize: 3, padding: 'same', activation: 'relu', name: 'c2' })
    .apply(x) as tf.SymbolicTensor;
  x = tf.layers.maxPooling2d({ poolSize: 2 }).apply(x) as tf.SymbolicTensor;
  // last conv stays linear so the pooled feature vector is (almost surely)
  // never exactly zero, which the downstream ingest would reject
  x = tf.layers
    .conv2d({ filters: 32, kernelSize: 3, padding: 'same', name: 'c3' })
    .apply(x) as tf.SymbolicTensor;
  const pooled = tf.layers
    .globalAveragePooling2d({ name: 'pool' })
    .apply(x) as tf.SymbolicTensor;
  const probs = tf.layers
    .dense({ units: numClasses, activation: 'softmax', name: 'probs' })
    .apply(pooled) as tf.SymbolicTensor;
  return tf.model({ inputs: input, outputs: [pooled, probs] });
}

function bottleneck(
  x: tf.SymbolicTensor,
  filters: number,
  stride: number,
  project: boolean,
  stage: string,
): tf.SymbolicTensor {
  let shortcut = x;
  if (project) {
    shortcut = tf.layers
      .conv2d({ filters: filters * 4, kernelSize: 1, strides: stride, name: `${stage}_proj` })
      .apply(x) as tf.SymbolicTensor;
    shortcut = tf.layers
      .batchNormalization({ name: `${stage}_proj_bn` })
      .apply(shortcut) as tf.SymbolicTensor;
  }
  let y = tf.layers
    .conv2d({ filters, kernelSize: 1, strides: stride, name: `${stage}_a` })
    .apply(x) as tf.SymbolicTensor;
  y = tf.layers.batchNormalization({ name: `${stage}_a_bn` }).apply(y) as tf.SymbolicTensor;
  y = tf.layers.reLU().apply(y) as tf.SymbolicTensor;
  y = tf.layers
    .conv2d({ filters, kernelSize: 3, padding: 'same', name: `${stage}_b` })
    .apply(y) as tf.SymbolicTensor;
  y = tf.layers.batchNormalization({ name: `${stage}_b_bn` }).apply(y) as tf.SymbolicTensor;
  y = tf.layers.reLU().apply(y) as tf.SymbolicTensor;
  y = tf.layers
    .conv2d({ filters: filters * 4, kernelSize: 1, name: `${stage}_c` })
    .apply(y) as tf.SymbolicTensor;
  y = tf.layers.batchNormalization({ name: `${stage}_c_bn` }).apply(y) as tf.SymbolicTensor;
  const merged = tf.layers.add().apply([y, shortcut]) as tf.SymbolicTensor;
  return tf.layers.reLU().apply(merged) as tf.SymbolicTensor;
}

/** Standard 50-layer residual network; the pooled output is 2048 wide. */
function buildResnet50(numClasses: number): tf.LayersModel {
  const input = tf.input({ shape: [224, 224, 3] });
  let x = tf.layers
    .conv2d({ filters: 64, kernelSize: 7, strides: 2, padding: 'same', name: 'stem' })
    .apply(input) as tf.SymbolicTensor;
  x = tf.layers.batchNormalization({ name: 'stem_bn' }).apply(x) as tf.SymbolicTensor;
  x = tf.layers.reLU().apply(x) as tf.SymbolicTensor;
  x = tf.layers
    .maxPooling2d({ poolSize: 3, strides: 2, padding: 'same' })
    .apply(x) as tf.SymbolicTensor;

  const blocks = [3, 4, 6, 3];
  const widths = [64, 128, 256, 512];
  for (let s = 0; s < blocks.length; s++) {
    for (let b = 0; b < blocks[s]; b++) {
      const stride = s > 0 && b === 0 ? 2 : 1;
      x = bottleneck(x, widths[s], stride, b === 0, `s${s + 1}b${b + 1}`);
    }
  }

  const pooled = tf.layers
    .globalAveragePooling2d({ name: 'pool' })
    .apply(x) as tf.SymbolicTensor;
  const probs = tf.layers
    .dense({ units: numClasses, activation: 'softmax', name: 'probs' })
    .apply(pooled) as tf.SymbolicTensor;
  return tf.model({ inputs: input, outputs: [pooled, probs] });
}

const ARCHS: Record<string, ArchSpec> = {
  tiny: { id: 'tiny', inputSize: 32, featureWidth: 32, build: buildTiny },
  resnet50: { id: 'resnet50', inputSize: 224, featureWidth: 2048, build: buildResnet50 },
};

export function archIds(): string[] {
  return Object.keys(ARCHS);
}

export function getArch(id: string): ArchSpec {
  const arch = ARCHS[id];
  if (!arch) {
    throw new Error(`unknown model '${id}' (choose from: ${archIds().join(', ')})`);
  }
  return arch;
}
