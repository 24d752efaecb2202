//! Reference implementations the library is checked against. Each one is
//! written from the definition, without calling into the code under test.

#![allow(dead_code)]

use kws_core::supernet::{Network, SubnetSpec, SupernetConfig};
use kws_core::tensor::Tensor;
use rand::Rng;

/// `y[n,c,t] = b[c] + Σ_i Σ_k w[c,i,k]·xp[n,i,t+k]`, summed in that order
/// over the zero-padded input.
pub fn naive_conv1d(x: &Tensor, w: &Tensor, b: &Tensor, pad: usize) -> Tensor {
    let (n, ci, len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let out_len = len + 2 * pad - k + 1;
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    let mut y = vec![0.0f32; n * co * out_len];
    for s in 0..n {
        for c in 0..co {
            for t in 0..out_len {
                let mut acc = bd[c];
                for i in 0..ci {
                    for j in 0..k {
                        let p = (t + j) as isize - pad as isize;
                        let v = if p < 0 || p >= len as isize {
                            0.0
                        } else {
                            xd[(s * ci + i) * len + p as usize]
                        };
                        acc += wd[(c * ci + i) * k + j] * v;
                    }
                }
                y[(s * co + c) * out_len + t] = acc;
            }
        }
    }
    Tensor::new(vec![n, co, out_len], y).unwrap()
}

/// `X[f] = Σ_t x[t]·e^{-2πi f t / n}` in f64.
pub fn naive_dft(re: &[f64], im: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = re.len();
    let mut out_re = vec![0.0; n];
    let mut out_im = vec![0.0; n];
    for f in 0..n {
        for t in 0..n {
            let a = -2.0 * std::f64::consts::PI * ((f * t) % n) as f64 / n as f64;
            let (s, c) = a.sin_cos();
            out_re[f] += re[t] * c - im[t] * s;
            out_im[f] += re[t] * s + im[t] * c;
        }
    }
    (out_re, out_im)
}

/// Parameters counted by building every tensor's shape from the layer list:
/// conv weight, conv bias, optionally γ and β, then the head.
pub fn count_params_by_shapes(cfg: &SupernetConfig, spec: &SubnetSpec, with_bn: bool) -> u64 {
    let mut shapes: Vec<Vec<usize>> = Vec::new();
    let mut c_in = cfg.input_channels;
    for unit in &spec.units {
        for l in unit {
            shapes.push(vec![l.width, c_in, l.kernel]);
            shapes.push(vec![l.width]);
            if with_bn {
                shapes.push(vec![l.width]);
                shapes.push(vec![l.width]);
            }
            c_in = l.width;
        }
    }
    shapes.push(vec![cfg.n_classes, c_in]);
    shapes.push(vec![cfg.n_classes]);
    shapes
        .iter()
        .map(|s| s.iter().product::<usize>() as u64)
        .sum()
}

/// Eval-mode float forward of one `[C, L]` example with every multiply
/// counted: same-padded convolutions (padded taps included), batch norm as
/// a separate affine step that is not counted, ReLU, pooling, head.
pub fn counting_forward(net: &Network, x: &[f32], c: usize, len: usize) -> (Vec<f32>, u64) {
    let mut macs = 0u64;
    let mut cur = x.to_vec();
    let (mut c_cur, mut l_cur) = (c, len);
    let n_units = net.units.len();
    for (u, unit) in net.units.iter().enumerate() {
        for layer in unit {
            let (co, k) = (layer.weight.shape()[0], layer.weight.shape()[2]);
            let pad = k / 2;
            let w = layer.weight.data();
            let mut y = vec![0.0f32; co * l_cur];
            for o in 0..co {
                for t in 0..l_cur {
                    let mut acc = layer.bias.data()[o];
                    for i in 0..c_cur {
                        for j in 0..k {
                            let p = (t + j) as isize - pad as isize;
                            let v = if p < 0 || p >= l_cur as isize {
                                0.0
                            } else {
                                cur[i * l_cur + p as usize]
                            };
                            acc += w[(o * c_cur + i) * k + j] * v;
                            macs += 1;
                        }
                    }
                    y[o * l_cur + t] = acc;
                }
            }
            if let Some(bn) = &layer.bn {
                for o in 0..co {
                    let s = bn.gamma.data()[o]
                        / (bn.running_var[o] + kws_core::supernet::BN_EPS).sqrt();
                    for t in 0..l_cur {
                        let v = &mut y[o * l_cur + t];
                        *v = (*v - bn.running_mean[o]) * s + bn.beta.data()[o];
                    }
                }
            }
            y.iter_mut().for_each(|v| *v = v.max(0.0));
            cur = y;
            c_cur = co;
        }
        if u + 1 < n_units {
            let half = l_cur / 2;
            let mut y = vec![0.0f32; c_cur * half];
            for i in 0..c_cur {
                for t in 0..half {
                    y[i * half + t] = cur[i * l_cur + 2 * t].max(cur[i * l_cur + 2 * t + 1]);
                }
            }
            cur = y;
            l_cur = half;
        } else {
            cur = (0..c_cur)
                .map(|i| cur[i * l_cur..(i + 1) * l_cur].iter().sum::<f32>() / l_cur as f32)
                .collect();
            l_cur = 1;
        }
    }
    let hw = net.head.weight.data();
    let classes = net.head.bias.len();
    let logits = (0..classes)
        .map(|o| {
            let mut acc = net.head.bias.data()[o];
            for i in 0..c_cur {
                acc += hw[o * c_cur + i] * cur[i];
                macs += 1;
            }
            acc
        })
        .collect();
    (logits, macs)
}

pub fn random_tensor<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::uniform(shape, 1.0, rng)
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f32::max)
}
