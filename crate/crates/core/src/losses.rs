//! Training losses: masked L1, MS-SSIM, image-gradient L1 and the frozen
//! encoder feature loss, plus their weighted sum.
//!
//! All functions take `(N, 1, S, S)` tensors and are differentiable with
//! respect to `pred`. L1-type reductions are means.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::encoder::Encoder;
use crate::error::{Error, Result};

/// Per-scale exponents of the five-scale MS-SSIM.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
/// Data range is fixed to 1 since volumes are min-max normalised.
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// Per-scale terms are clamped here before the fractional power, which keeps
/// the power's derivative finite.
pub const MS_SSIM_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_l1: f64,
    pub lambda_ssim: f64,
    pub lambda_grad: f64,
    pub lambda_perc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_l1: 1.0,
            lambda_ssim: 0.5,
            lambda_grad: 0.1,
            lambda_perc: 0.05,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_l1, self.lambda_ssim, self.lambda_grad, self.lambda_perc];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("loss weights must be >= 0: {all:?}")));
        }
        if all.iter().all(|&w| w == 0.0) {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }

    pub fn recombine(&self, r: &LossReport) -> f64 {
        self.lambda_l1 * r.l1
            + self.lambda_ssim * r.ms_ssim
            + self.lambda_grad * r.grad
            + self.lambda_perc * r.perc
    }
}

/// Which terms are enabled; enabled terms keep their configured weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossSet {
    L1,
    #[serde(rename = "l1_msssim")]
    L1Ssim,
    #[serde(rename = "l1_msssim_grad")]
    L1SsimGrad,
    #[default]
    Full,
}

impl LossSet {
    pub fn apply(self, w: LossWeights) -> LossWeights {
        let (ssim, grad, perc) = match self {
            LossSet::L1 => (false, false, false),
            LossSet::L1Ssim => (true, false, false),
            LossSet::L1SsimGrad => (true, true, false),
            LossSet::Full => (true, true, true),
        };
        LossWeights {
            lambda_l1: w.lambda_l1,
            lambda_ssim: if ssim { w.lambda_ssim } else { 0.0 },
            lambda_grad: if grad { w.lambda_grad } else { 0.0 },
            lambda_perc: if perc { w.lambda_perc } else { 0.0 },
        }
    }
}

impl std::str::FromStr for LossSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '+', ' '], "_").as_str() {
            "l1" => Ok(LossSet::L1),
            "l1_ssim" | "l1_msssim" | "l1_ms_ssim" => Ok(LossSet::L1Ssim),
            "l1_ssim_grad" | "l1_msssim_grad" | "l1_ms_ssim_grad" => Ok(LossSet::L1SsimGrad),
            "full" => Ok(LossSet::Full),
            other => Err(Error::Config(format!("unknown loss set `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l1: f64,
    pub ms_ssim: f64,
    pub grad: f64,
    pub perc: f64,
    pub total: f64,
}

impl LossReport {
    pub fn scaled(&self, s: f64) -> Self {
        Self {
            l1: self.l1 * s,
            ms_ssim: self.ms_ssim * s,
            grad: self.grad * s,
            perc: self.perc * s,
            total: self.total * s,
        }
    }

    pub fn add(&self, o: &LossReport) -> Self {
        Self {
            l1: self.l1 + o.l1,
            ms_ssim: self.ms_ssim + o.ms_ssim,
            grad: self.grad + o.grad,
            perc: self.perc + o.perc,
            total: self.total + o.total,
        }
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Mean absolute error over voxels where `mask == 1`; zero for an empty mask.
pub fn masked_l1(pred: &Tensor, target: &Tensor, mask: &Tensor) -> Result<Tensor> {
    same_shape(pred, target, "masked_l1 pred/target")?;
    same_shape(pred, mask, "masked_l1 pred/mask")?;
    let count = scalar(&mask.sum_all()?)?;
    if count == 0.0 {
        return Ok(Tensor::zeros((), pred.dtype(), pred.device())?);
    }
    let err = (pred - target)?.abs()?.mul(mask)?.sum_all()?;
    Ok((err / count)?)
}

/// Mean L1 distance between forward differences along both in-plane axes.
pub fn gradient_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    same_shape(pred, target, "gradient_loss")?;
    let (_, _, h, w) = pred.dims4()?;
    if h < 2 || w < 2 {
        return Err(Error::Shape(format!(
            "gradient loss needs at least 2×2 images, got {h}×{w}"
        )));
    }
    let diff = (pred - target)?;
    let dx = (diff.narrow(3, 1, w - 1)? - diff.narrow(3, 0, w - 1)?)?;
    let dy = (diff.narrow(2, 1, h - 1)? - diff.narrow(2, 0, h - 1)?)?;
    Ok((dx.abs()?.mean_all()? + dy.abs()?.mean_all()?)?)
}

/// Normalised 1D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = g.iter().sum();
    g.into_iter().map(|v| v / sum).collect()
}

/// Smallest image side that supports `scales` levels.
pub fn min_size_for_scales(scales: usize) -> usize {
    SSIM_WINDOW << scales.saturating_sub(1)
}

/// Largest scale count (at most five) usable for `min_side`.
pub fn max_scales(min_side: usize) -> usize {
    (1..=MS_SSIM_WEIGHTS.len())
        .rev()
        .find(|&s| min_size_for_scales(s) <= min_side)
        .unwrap_or(0)
}

/// Exponents for `scales` levels: the leading five-scale weights, renormalised.
pub fn scale_weights(scales: usize) -> Vec<f64> {
    let w = &MS_SSIM_WEIGHTS[..scales];
    let sum: f64 = w.iter().sum();
    w.iter().map(|v| v / sum).collect()
}

fn gaussian_filter(x: &Tensor, taps: &Tensor) -> Result<Tensor> {
    let n = taps.dim(0)?;
    let kx = taps.reshape((1, 1, 1, n))?;
    let ky = taps.reshape((1, 1, n, 1))?;
    Ok(x.conv2d(&kx, 0, 1, 1, 1)?.conv2d(&ky, 0, 1, 1, 1)?)
}

/// Per-image mean SSIM and contrast-structure terms, each `(N)`.
fn ssim_terms(x: &Tensor, y: &Tensor, taps: &Tensor) -> Result<(Tensor, Tensor)> {
    let n = x.dim(0)?;
    let stacked = Tensor::cat(&[x, y, &x.sqr()?, &y.sqr()?, &(x * y)?], 0)?.contiguous()?;
    let f = gaussian_filter(&stacked, taps)?;
    let mu_x = f.narrow(0, 0, n)?;
    let mu_y = f.narrow(0, n, n)?;
    let mu_xx = mu_x.sqr()?;
    let mu_yy = mu_y.sqr()?;
    let mu_xy = (&mu_x * &mu_y)?;
    let var_x = (f.narrow(0, 2 * n, n)? - &mu_xx)?;
    let var_y = (f.narrow(0, 3 * n, n)? - &mu_yy)?;
    let cov = (f.narrow(0, 4 * n, n)? - &mu_xy)?;
    let cs_map = ((cov * 2.0)? + SSIM_C2)?.div(&((var_x + var_y)? + SSIM_C2)?)?;
    let lum = ((mu_xy * 2.0)? + SSIM_C1)?.div(&((mu_xx + mu_yy)? + SSIM_C1)?)?;
    let ssim_map = (lum * &cs_map)?;
    Ok((
        ssim_map.flatten_from(1)?.mean(1)?,
        cs_map.flatten_from(1)?.mean(1)?,
    ))
}

/// Multi-scale SSIM per image, `(N)`.
pub fn ms_ssim(x: &Tensor, y: &Tensor, scales: usize) -> Result<Tensor> {
    same_shape(x, y, "ms_ssim")?;
    let (_, c, h, w) = x.dims4()?;
    if c != 1 {
        return Err(Error::Shape(format!("ms_ssim expects one channel, got {c}")));
    }
    if scales == 0 || scales > MS_SSIM_WEIGHTS.len() || h.min(w) < min_size_for_scales(scales) {
        return Err(Error::Shape(format!(
            "{h}×{w} image is too small for {scales} MS-SSIM scales (needs {})",
            min_size_for_scales(scales.max(1))
        )));
    }
    let taps = Tensor::new(gaussian_window(SSIM_WINDOW, SSIM_SIGMA).as_slice(), x.device())?
        .to_dtype(x.dtype())?;
    let weights = scale_weights(scales);
    let (mut x, mut y) = (x.contiguous()?, y.contiguous()?);
    let mut acc: Option<Tensor> = None;
    for (j, &wj) in weights.iter().enumerate() {
        let (ssim, cs) = ssim_terms(&x, &y, &taps)?;
        let term = if j + 1 == scales { ssim } else { cs };
        let term = term.maximum(MS_SSIM_FLOOR)?.powf(wj)?;
        acc = Some(match acc {
            None => term,
            Some(a) => (a * term)?,
        });
        if j + 1 < scales {
            x = x.avg_pool2d(2)?;
            y = y.avg_pool2d(2)?;
        }
    }
    Ok(acc.expect("at least one scale"))
}

/// `1 − MS-SSIM(mask ⊙ pred, mask ⊙ target)`, averaged over the batch.
pub fn ms_ssim_loss(pred: &Tensor, target: &Tensor, mask: &Tensor, scales: usize) -> Result<Tensor> {
    same_shape(pred, mask, "ms_ssim_loss pred/mask")?;
    let score = ms_ssim(&pred.mul(mask)?, &target.mul(mask)?, scales)?;
    Ok(score.mean_all()?.affine(-1.0, 1.0)?)
}

/// Encoder-feature L1 between prediction and target at `layers`.
///
/// Inputs are masked, replicated to three channels and preprocessed like the
/// encoder's normal input. The target pass is detached; encoder weights are
/// constants, so gradient reaches `pred` only.
pub fn perceptual_loss(
    pred: &Tensor,
    target: &Tensor,
    mask: &Tensor,
    encoder: &Encoder,
    layers: &[usize],
) -> Result<Tensor> {
    same_shape(pred, target, "perceptual_loss")?;
    let depth = encoder.config().depth;
    if let Some(&l) = layers.iter().find(|&&l| l == 0 || l > depth) {
        return Err(Error::Config(format!(
            "perceptual tap {l} outside encoder depth {depth}"
        )));
    }
    let (n, _, h, w) = pred.dims4()?;
    let as_input = |t: &Tensor| -> Result<Tensor> {
        let rgb = t
            .mul(mask)?
            .broadcast_as((n, crate::slicing::CHANNELS, h, w))?
            .contiguous()?;
        encoder.preprocess(&rgb)
    };
    let fp = encoder.forward_taps(&as_input(pred)?, layers)?;
    let ft = encoder.forward_taps(&as_input(&target.detach())?, layers)?;
    let mut total: Option<Tensor> = None;
    for l in layers {
        let d = (&fp[l] - ft[l].detach())?.abs()?.mean_all()?;
        total = Some(match total {
            None => d,
            Some(t) => (t + d)?,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => Ok(Tensor::zeros((), pred.dtype(), pred.device())?),
    }
}

/// Perceptual term wiring: the frozen encoder and the taps it compares.
#[derive(Clone, Copy)]
pub struct PerceptualTerm<'a> {
    pub encoder: &'a Encoder,
    pub layers: &'a [usize],
}

/// Weighted sum of the four terms. Terms with zero weight are skipped and
/// reported as zero.
pub fn total_loss(
    pred: &Tensor,
    target: &Tensor,
    mask: &Tensor,
    weights: &LossWeights,
    ssim_scales: usize,
    perceptual: Option<PerceptualTerm<'_>>,
) -> Result<(Tensor, LossReport)> {
    weights.validate()?;
    let mut report = LossReport::default();
    let mut total = Tensor::zeros((), pred.dtype(), pred.device())?;

    let l1 = masked_l1(pred, target, mask)?;
    report.l1 = scalar(&l1)?;
    if weights.lambda_l1 > 0.0 {
        total = (total + (l1 * weights.lambda_l1)?)?;
    }
    if weights.lambda_ssim > 0.0 {
        let t = ms_ssim_loss(pred, target, mask, ssim_scales)?;
        report.ms_ssim = scalar(&t)?;
        total = (total + (t * weights.lambda_ssim)?)?;
    }
    if weights.lambda_grad > 0.0 {
        let t = gradient_loss(pred, target)?;
        report.grad = scalar(&t)?;
        total = (total + (t * weights.lambda_grad)?)?;
    }
    if weights.lambda_perc > 0.0 {
        let term = perceptual.ok_or_else(|| {
            Error::Config("perceptual weight is positive but no encoder was supplied".into())
        })?;
        let t = perceptual_loss(pred, target, mask, term.encoder, term.layers)?;
        report.perc = scalar(&t)?;
        total = (total + (t * weights.lambda_perc)?)?;
    }
    report.total = scalar(&total)?;
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn img(values: Vec<f64>, h: usize, w: usize) -> Tensor {
        Tensor::from_vec(values, (1, 1, h, w), &Device::Cpu).unwrap()
    }

    fn val(t: &Tensor) -> f64 {
        t.to_scalar::<f64>().unwrap()
    }

    fn rand_img(n: usize, s: usize, seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..n * s * s).map(|_| rng.random()).collect();
        Tensor::from_vec(v, (n, 1, s, s), &Device::Cpu).unwrap()
    }

    #[test]
    fn l1_examples() {
        let a = rand_img(1, 4, 1);
        let ones = Tensor::ones((1, 1, 4, 4), DType::F64, &Device::Cpu).unwrap();
        assert_eq!(val(&masked_l1(&a, &a, &ones).unwrap()), 0.0);
        let shifted = (&a + 0.3).unwrap();
        assert!((val(&masked_l1(&shifted, &a, &ones).unwrap()) - 0.3).abs() < 1e-12);

        let b = rand_img(1, 4, 2);
        let mask: Vec<f64> = (0..16).map(|i| if i < 8 { 1.0 } else { 0.0 }).collect();
        let mask_t = img(mask.clone(), 4, 4);
        let av = a.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let bv = b.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let mut hand = 0.0;
        for i in 0..16 {
            if mask[i] == 1.0 {
                hand += (av[i] - bv[i]).abs();
            }
        }
        assert!((val(&masked_l1(&a, &b, &mask_t).unwrap()) - hand / 8.0).abs() < 1e-12);

        let empty = Tensor::zeros((1, 1, 4, 4), DType::F64, &Device::Cpu).unwrap();
        assert_eq!(val(&masked_l1(&a, &b, &empty).unwrap()), 0.0);
        assert!(masked_l1(&a, &rand_img(1, 3, 0), &ones).is_err());
    }

    #[test]
    fn gradient_examples() {
        let c1 = Tensor::full(0.2f64, (1, 1, 4, 4), &Device::Cpu).unwrap();
        let c2 = Tensor::full(0.7f64, (1, 1, 4, 4), &Device::Cpu).unwrap();
        assert_eq!(val(&gradient_loss(&c1, &c2).unwrap()), 0.0);
        let a = rand_img(1, 4, 3);
        assert_eq!(val(&gradient_loss(&a, &a).unwrap()), 0.0);

        let ramp = |slope: f64| img((0..16).map(|i| slope * (i % 4) as f64).collect(), 4, 4);
        let (sa, sb) = (0.3, -0.1);
        let got = val(&gradient_loss(&ramp(sa), &ramp(sb)).unwrap());
        // x-term |a − b|, y-term 0
        assert!((got - (sa - sb).abs()).abs() < 1e-12);

        let tiny = rand_img(1, 1, 0);
        assert!(gradient_loss(&tiny, &tiny).is_err());
    }

    #[test]
    fn ms_ssim_examples() {
        let ones = Tensor::ones((1, 1, 32, 32), DType::F64, &Device::Cpu).unwrap();
        let a = rand_img(1, 32, 4);
        assert!(val(&ms_ssim_loss(&a, &a, &ones, 2).unwrap()).abs() < 1e-6);

        let noise = (rand_img(1, 32, 5) * 1e-4).unwrap();
        let l = val(&ms_ssim_loss(&(&a + noise).unwrap(), &a, &ones, 2).unwrap());
        assert!(l > 0.0 && l < 0.01, "{l}");

        assert!(ms_ssim_loss(&a, &a, &ones, 3).is_err());
    }

    #[test]
    fn gaussian_and_scale_helpers() {
        let g = gaussian_window(11, 1.5);
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(g[0], g[10]);
        assert_eq!(max_scales(224), 5);
        assert_eq!(max_scales(32), 2);
        assert_eq!(max_scales(64), 3);
        assert_eq!(max_scales(10), 0);
        let w = scale_weights(2);
        assert!((w[0] - 0.0448 / 0.3304).abs() < 1e-12);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn loss_set_weights() {
        let w = LossWeights::default();
        assert_eq!(
            LossSet::L1.apply(w),
            LossWeights { lambda_l1: 1.0, lambda_ssim: 0.0, lambda_grad: 0.0, lambda_perc: 0.0 }
        );
        assert_eq!(LossSet::L1SsimGrad.apply(w).lambda_grad, 0.1);
        assert_eq!(LossSet::L1SsimGrad.apply(w).lambda_perc, 0.0);
        assert_eq!(LossSet::Full.apply(w), w);
        assert_eq!("l1+ms-ssim".parse::<LossSet>().unwrap(), LossSet::L1Ssim);
        assert!("bogus".parse::<LossSet>().is_err());
        assert!(LossWeights { lambda_l1: 0.0, lambda_ssim: 0.0, lambda_grad: 0.0, lambda_perc: 0.0 }
            .validate()
            .is_err());
        assert!(LossWeights { lambda_l1: -1.0, ..w }.validate().is_err());
    }

    #[test]
    fn total_reduces_to_l1() {
        let a = rand_img(2, 32, 6);
        let b = rand_img(2, 32, 7);
        let ones = Tensor::ones((2, 1, 32, 32), DType::F64, &Device::Cpu).unwrap();
        let w = LossWeights { lambda_l1: 1.0, lambda_ssim: 0.0, lambda_grad: 0.0, lambda_perc: 0.0 };
        let (t, r) = total_loss(&a, &b, &ones, &w, 2, None).unwrap();
        assert_eq!(val(&t), val(&masked_l1(&a, &b, &ones).unwrap()));
        assert_eq!(r.total, r.l1);
        assert!(total_loss(&a, &b, &ones, &LossWeights::default(), 2, None).is_err());
    }
}
