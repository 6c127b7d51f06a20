//! Scalar reference implementations used as test oracles. Everything here is
//! plain `f64` loops over flat buffers, independent of the tensor code.
#![allow(dead_code)]

use std::collections::BTreeMap;

use boldsynth_core::{DType, Tensor, Var};

pub fn to_vec(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `erf` by its Maclaurin series, saturating beyond |x| = 5.
pub fn erf(x: f64) -> f64 {
    if x.abs() > 5.0 {
        return x.signum();
    }
    let mut term = x;
    let mut sum = x;
    for n in 1..200 {
        term *= -x * x / n as f64;
        let add = term / (2 * n + 1) as f64;
        sum += add;
        if add.abs() < 1e-17 {
            break;
        }
    }
    sum * 2.0 / std::f64::consts::PI.sqrt()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

/// `y = W x + b` with `W` stored `(out, in)` row-major.
pub fn linear(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let out = b.len();
    let inp = x.len();
    (0..out)
        .map(|o| b[o] + (0..inp).map(|i| w[o * inp + i] * x[i]).sum::<f64>())
        .collect()
}

pub fn layer_norm(x: &[f64], g: &[f64], b: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) / (var + eps).sqrt() * g[i] + b[i])
        .collect()
}

/// Parameters of one pre-norm block, looked up by dotted name.
pub struct BlockRef<'a> {
    pub p: &'a BTreeMap<String, Vec<f64>>,
    pub prefix: String,
    pub heads: usize,
    pub eps: f64,
}

impl<'a> BlockRef<'a> {
    fn get(&self, name: &str) -> &[f64] {
        let key = format!("{}.{name}", self.prefix);
        self.p.get(&key).unwrap_or_else(|| panic!("missing {key}"))
    }

    /// One block over a `(T, D)` sequence with O(T²) scalar attention.
    pub fn forward(&self, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let t = x.len();
        let d = x[0].len();
        let hd = d / self.heads;
        let h: Vec<Vec<f64>> = x
            .iter()
            .map(|r| layer_norm(r, self.get("norm1.weight"), self.get("norm1.bias"), self.eps))
            .collect();
        let qkv: Vec<Vec<f64>> = h
            .iter()
            .map(|r| linear(r, self.get("attn.qkv.weight"), self.get("attn.qkv.bias")))
            .collect();
        let mut attn = vec![vec![0.0; d]; t];
        for head in 0..self.heads {
            for i in 0..t {
                let q = &qkv[i][head * hd..(head + 1) * hd];
                let scores: Vec<f64> = (0..t)
                    .map(|j| {
                        let k = &qkv[j][d + head * hd..d + (head + 1) * hd];
                        q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (hd as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for j in 0..t {
                    let v = &qkv[j][2 * d + head * hd..2 * d + (head + 1) * hd];
                    for c in 0..hd {
                        attn[i][head * hd + c] += e[j] / z * v[c];
                    }
                }
            }
        }
        let mut out = Vec::with_capacity(t);
        for i in 0..t {
            let a = linear(&attn[i], self.get("attn.proj.weight"), self.get("attn.proj.bias"));
            let x1: Vec<f64> = x[i].iter().zip(&a).map(|(u, v)| u + v).collect();
            let n2 = layer_norm(&x1, self.get("norm2.weight"), self.get("norm2.bias"), self.eps);
            let hidden: Vec<f64> = linear(&n2, self.get("mlp.fc1.weight"), self.get("mlp.fc1.bias"))
                .into_iter()
                .map(gelu)
                .collect();
            let m = linear(&hidden, self.get("mlp.fc2.weight"), self.get("mlp.fc2.bias"));
            out.push(x1.iter().zip(&m).map(|(u, v)| u + v).collect());
        }
        out
    }
}

pub fn gaussian(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let g: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Single-image MS-SSIM with a direct 2D window, valid filtering and 2×2
/// average pooling between scales.
pub fn ms_ssim_ref(x: &[f64], y: &[f64], h: usize, w: usize, scales: usize) -> f64 {
    const WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let g = gaussian(11, 1.5);
    let wsum: f64 = WEIGHTS[..scales].iter().sum();
    let (mut x, mut y) = (x.to_vec(), y.to_vec());
    let (mut h, mut w) = (h, w);
    let mut result = 1.0;
    for s in 0..scales {
        let (oh, ow) = (h - 10, w - 10);
        let (mut ssim_sum, mut cs_sum) = (0.0, 0.0);
        for i in 0..oh {
            for j in 0..ow {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for a in 0..11 {
                    for b in 0..11 {
                        let wt = g[a] * g[b];
                        let (u, v) = (x[(i + a) * w + j + b], y[(i + a) * w + j + b]);
                        mx += wt * u;
                        my += wt * v;
                        sxx += wt * u * u;
                        syy += wt * v * v;
                        sxy += wt * u * v;
                    }
                }
                let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                let cs = (2.0 * cov + c2) / (vx + vy + c2);
                let l = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
                ssim_sum += l * cs;
                cs_sum += cs;
            }
        }
        let n = (oh * ow) as f64;
        let term = if s + 1 == scales { ssim_sum / n } else { cs_sum / n };
        result *= term.max(1e-6).powf(WEIGHTS[s] / wsum);
        if s + 1 < scales {
            let (nh, nw) = (h / 2, w / 2);
            let pool = |src: &[f64]| -> Vec<f64> {
                let mut out = vec![0.0; nh * nw];
                for i in 0..nh {
                    for j in 0..nw {
                        out[i * nw + j] = (src[2 * i * w + 2 * j]
                            + src[2 * i * w + 2 * j + 1]
                            + src[(2 * i + 1) * w + 2 * j]
                            + src[(2 * i + 1) * w + 2 * j + 1])
                            / 4.0;
                    }
                }
                out
            };
            x = pool(&x);
            y = pool(&y);
            h = nh;
            w = nw;
        }
    }
    result
}

/// Central-difference check of `f` at `coords`. Returns the worst relative
/// error `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
pub fn gradient_check<F>(input: &Tensor, coords: &[usize], h: f64, floor: f64, f: F) -> f64
where
    F: Fn(&Tensor) -> Tensor,
{
    let var = Var::from_tensor(input).unwrap();
    let loss = f(var.as_tensor());
    let grads = loss.backward().unwrap();
    let analytic = to_vec(grads.get(var.as_tensor()).expect("input receives a gradient"));
    let base = to_vec(input);
    let shape = input.dims().to_vec();
    let eval = |v: &[f64]| -> f64 {
        let t = Tensor::from_vec(v.to_vec(), shape.as_slice(), input.device()).unwrap();
        scalar(&f(&t))
    };
    let mut worst: f64 = 0.0;
    for &i in coords {
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        worst = worst.max(rel);
    }
    worst
}
