//! Independent reference implementations used by the integration tests.
//! Everything here is plain f64 loop nests written from the layer
//! definitions, sharing no code with the engine.

#![allow(dead_code)]

use mobilepipe::nn::{ArchitectureSpec, LayerSpec};

/// Forward pass of one NHWC sample. `weights` holds weight then bias for
/// every conv/dense layer. Returns class probabilities.
pub fn oracle_forward(arch: &ArchitectureSpec, weights: &[Vec<f64>], input: &[f64]) -> Vec<f64> {
    let (mut h, mut w, mut c) = (arch.input_size, arch.input_size, arch.channels);
    let mut x = input.to_vec();
    let mut flat = false;
    let mut wi = 0;
    for layer in &arch.layers {
        match *layer {
            LayerSpec::Conv2d { filters } => {
                let (k, b) = (&weights[wi], &weights[wi + 1]);
                wi += 2;
                let (oh, ow) = (h - 2, w - 2);
                let mut out = vec![0.0; oh * ow * filters];
                for y in 0..oh {
                    for xx in 0..ow {
                        for f in 0..filters {
                            let mut s = b[f];
                            for dy in 0..3 {
                                for dx in 0..3 {
                                    for ci in 0..c {
                                        let kv = k[((f * 3 + dy) * 3 + dx) * c + ci];
                                        s += kv * x[((y + dy) * w + xx + dx) * c + ci];
                                    }
                                }
                            }
                            out[(y * ow + xx) * filters + f] = s;
                        }
                    }
                }
                x = out;
                h = oh;
                w = ow;
                c = filters;
            }
            LayerSpec::MaxPool2d => {
                let (oh, ow) = (h / 2, w / 2);
                let mut out = vec![f64::NEG_INFINITY; oh * ow * c];
                for y in 0..oh {
                    for xx in 0..ow {
                        for ci in 0..c {
                            let o = &mut out[(y * ow + xx) * c + ci];
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    *o = o.max(x[((2 * y + dy) * w + 2 * xx + dx) * c + ci]);
                                }
                            }
                        }
                    }
                }
                x = out;
                h = oh;
                w = ow;
            }
            LayerSpec::Flatten => flat = true,
            LayerSpec::Dense { units } => {
                assert!(flat, "dense before flatten");
                let (m, b) = (&weights[wi], &weights[wi + 1]);
                wi += 2;
                let n_in = x.len();
                let mut out = b.clone();
                for (j, o) in out.iter_mut().enumerate() {
                    for i in 0..n_in {
                        *o += x[i] * m[i * units + j];
                    }
                }
                x = out;
            }
            LayerSpec::Relu => x.iter_mut().for_each(|v| *v = v.max(0.0)),
            LayerSpec::Softmax => {
                let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
                let s: f64 = e.iter().sum();
                x = e.into_iter().map(|v| v / s).collect();
            }
        }
    }
    x
}

/// Mean categorical cross-entropy of a batch of samples.
pub fn oracle_loss(arch: &ArchitectureSpec, weights: &[Vec<f64>], inputs: &[Vec<f64>], labels: &[usize]) -> f64 {
    inputs
        .iter()
        .zip(labels)
        .map(|(x, &l)| -oracle_forward(arch, weights, x)[l].ln())
        .sum::<f64>()
        / inputs.len() as f64
}

/// Central finite difference of the batch loss with respect to one weight.
pub fn finite_difference(
    arch: &ArchitectureSpec,
    weights: &mut [Vec<f64>],
    inputs: &[Vec<f64>],
    labels: &[usize],
    tensor: usize,
    index: usize,
    h: f64,
) -> f64 {
    let orig = weights[tensor][index];
    weights[tensor][index] = orig + h;
    let plus = oracle_loss(arch, weights, inputs, labels);
    weights[tensor][index] = orig - h;
    let minus = oracle_loss(arch, weights, inputs, labels);
    weights[tensor][index] = orig;
    (plus - minus) / (2.0 * h)
}

/// Parameters of the selection rule re-implemented from the emitted CSVs:
/// the cell with the fewest parameters among those within `tolerance` of
/// the best accuracy, first in row-major order on ties.
pub fn audit_selection(accuracy: &[Vec<f64>], params: &[Vec<f64>], tolerance: f64) -> (usize, usize) {
    let mut best = f64::MIN;
    for row in accuracy {
        for &a in row {
            if a > best {
                best = a;
            }
        }
    }
    let mut pick = None;
    let mut pick_params = f64::MAX;
    for i in 0..accuracy.len() {
        for j in 0..accuracy[i].len() {
            if accuracy[i][j] + tolerance + 1e-9 >= best && params[i][j] < pick_params {
                pick_params = params[i][j];
                pick = Some((i, j));
            }
        }
    }
    pick.expect("non-empty grid")
}
