//! Independent oracles shared by the integration tests: central finite
//! differences, nested-loop convolutions and plain statistics.

#![allow(dead_code)]

use binarygan_core::data::{binarize, synthetic_digits, BinarizedDataset};
use binarygan_core::rng::{stream, Stream};
use binarygan_core::{Tape, Tensor, Var};
use rand::seq::index::sample;
use rand::Rng;

pub const FD_STEP: f64 = 1e-6;

/// Relative error with an absolute floor, so gradients that are zero up to
/// rounding compare as equal.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

pub fn random_tensor<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub fn random_ints<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-3i32..=3) as f64).collect()).unwrap()
}

/// Outcome of comparing tape gradients against finite differences.
#[derive(Debug)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
    pub all_finite: bool,
    pub worst: String,
}

/// Compare the tape gradient of the scalar `f(inputs)` against central
/// differences. With `per_tensor = Some(k)` only `k` random coordinates of
/// each input are perturbed; every analytic entry is still checked for
/// finiteness.
pub fn grad_check<F, R>(inputs: &[Tensor<f64>], f: F, per_tensor: Option<usize>, rng: &mut R) -> GradCheck
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Var,
    R: Rng,
{
    grad_check_with_step(FD_STEP, inputs, f, per_tensor, rng)
}

pub fn grad_check_with_step<F, R>(
    step: f64,
    inputs: &[Tensor<f64>],
    mut f: F,
    per_tensor: Option<usize>,
    rng: &mut R,
) -> GradCheck
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Var,
    R: Rng,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.grad(out, &vars, false).expect("analytic gradient");
    let analytic: Vec<Tensor<f64>> = grads.iter().map(|&g| tape.value(g).clone()).collect();

    let mut eval = |xs: &[Tensor<f64>]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).item()
    };

    let mut report = GradCheck {
        max_rel_err: 0.0,
        checked: 0,
        all_finite: analytic.iter().all(|g| g.is_finite()),
        worst: String::new(),
    };
    for (i, input) in inputs.iter().enumerate() {
        let coords: Vec<usize> = match per_tensor {
            Some(k) if k < input.len() => sample(rng, input.len(), k).into_vec(),
            _ => (0..input.len()).collect(),
        };
        for j in coords {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] += step;
            let up = eval(&xs);
            xs[i].data_mut()[j] -= 2.0 * step;
            let down = eval(&xs);
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[i].data()[j];
            let e = rel_err(a, numeric);
            report.checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = format!("input {i} coord {j}: analytic {a:e} numeric {numeric:e}");
            }
        }
    }
    report
}

/// Fixed random projection to a scalar, so every output entry carries a
/// distinct weight in the loss.
pub fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Var {
    let shape = tape.shape(y).to_vec();
    let mut rng = stream(seed, Stream::Eval);
    let w = tape.constant(random_tensor(&shape, &mut rng));
    let p = tape.mul(y, w).unwrap();
    tape.sum_all(p)
}

/// `x: [n, ci, h, w]`, `k: [co, ci, kh, kw]`, zero padding `pad` on every side.
pub fn conv2d_oracle(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (n, ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let xi = |b, c, i, j| x.data()[((b * ci + c) * h + i) * w + j];
    let ki = |o, c, a, d| k.data()[((o * ci + c) * kh + a) * kw + d];
    let mut out = vec![0.0; n * co * oh * ow];
    for b in 0..n {
        for o in 0..co {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for a in 0..kh {
                            for d in 0..kw {
                                let (r, s) = ((i * stride + a) as isize - pad as isize, (j * stride + d) as isize - pad as isize);
                                if r >= 0 && s >= 0 && (r as usize) < h && (s as usize) < w {
                                    acc += xi(b, c, r as usize, s as usize) * ki(o, c, a, d);
                                }
                            }
                        }
                    }
                    out[((b * co + o) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, co, oh, ow], out).unwrap()
}

/// Scatter form of the transposed convolution: every input value adds a
/// scaled copy of the kernel at `stride` spacing. `k: [ci, co, kh, kw]`
/// where `ci` are the channels of `y`; the output is cropped by `pad`.
pub fn conv_transpose2d_oracle(y: &Tensor<f64>, k: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (n, ci, h, w) = (y.shape()[0], y.shape()[1], y.shape()[2], y.shape()[3]);
    let (co, kh, kw) = (k.shape()[1], k.shape()[2], k.shape()[3]);
    let full_h = (h - 1) * stride + kh;
    let full_w = (w - 1) * stride + kw;
    let (oh, ow) = (full_h - 2 * pad, full_w - 2 * pad);
    let mut out = vec![0.0; n * co * oh * ow];
    for b in 0..n {
        for c in 0..ci {
            for i in 0..h {
                for j in 0..w {
                    let v = y.data()[((b * ci + c) * h + i) * w + j];
                    for o in 0..co {
                        for a in 0..kh {
                            for d in 0..kw {
                                let (r, s) = ((i * stride + a) as isize - pad as isize, (j * stride + d) as isize - pad as isize);
                                if r >= 0 && s >= 0 && (r as usize) < oh && (s as usize) < ow {
                                    out[((b * co + o) * oh + r as usize) * ow + s as usize] +=
                                        v * k.data()[((c * co + o) * kh + a) * kw + d];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, co, oh, ow], out).unwrap()
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Synthetic stroke images standing in for the digit data.
pub fn fixture(count: usize, seed: u64) -> BinarizedDataset {
    binarize(&synthetic_digits(count, &mut stream(seed, Stream::Init)))
}

/// Every file under `dir`, relative path to contents, sorted by path.
pub fn snapshot(dir: &std::path::Path) -> Vec<(std::path::PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}
