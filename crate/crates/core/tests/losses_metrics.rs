mod common;

use boldsynth_core::losses::{
    gradient_loss, masked_l1, max_scales, ms_ssim, scale_weights, total_loss, LossSet, LossWeights,
};
use boldsynth_core::metrics::{evaluate_dataset, ms_ssim_slices, psnr, EvalOptions, Psnr, VolumePredictor};
use boldsynth_core::{Device, Tensor, Volume3D};
use common::*;
use ndarray::Array3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random::<f64>()).collect()
}

fn smooth_image(h: usize, w: usize, phase: f64) -> Vec<f64> {
    (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            0.5 + 0.4 * (0.21 * x + phase).sin() * (0.17 * y - phase).cos()
        })
        .collect()
}

fn tensor(v: &[f64], shape: &[usize]) -> Tensor {
    Tensor::from_vec(v.to_vec(), shape, &Device::Cpu).unwrap()
}

fn noisy(v: &Volume3D, sigma: f32, seed: u64) -> Volume3D {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = v.data.mapv(|x| x + sigma * (rng.random::<f32>() * 2.0 - 1.0));
    Volume3D::new(data, v.voxel_size)
}

#[test]
fn ms_ssim_matches_direct_window_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (h, w, scales) in [(32, 32, 2), (64, 48, 3), (40, 40, 1)] {
        let x = smooth_image(h, w, 0.3);
        let y: Vec<f64> = x.iter().map(|v| v + 0.05 * (rng.random::<f64>() - 0.5)).collect();
        let got = scalar(&ms_ssim(&tensor(&x, &[1, 1, h, w]), &tensor(&y, &[1, 1, h, w]), scales).unwrap().squeeze(0).unwrap());
        let want = ms_ssim_ref(&x, &y, h, w, scales);
        assert!((got - want).abs() < 1e-9, "{h}x{w}@{scales}: {got} vs {want}");
    }
}

#[test]
fn per_slice_metric_matches_reference_on_random_volume() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (h, w, z) = (64, 64, 4);
    let a = Array3::from_shape_fn((h, w, z), |_| rng.random::<f32>());
    let b = a.mapv(|v| (v * 0.8 + 0.1) as f32);
    let (va, vb) = (Volume3D::new(a.clone(), [1.0; 3]), Volume3D::new(b.clone(), [1.0; 3]));
    let got = ms_ssim_slices(&va, &vb, None, None).unwrap();
    assert_eq!(got.len(), z);
    for k in 0..z {
        let flat = |m: &Array3<f32>| -> Vec<f64> {
            (0..h).flat_map(|i| (0..w).map(move |j| (i, j))).map(|(i, j)| m[[i, j, k]] as f64).collect()
        };
        let want = ms_ssim_ref(&flat(&a), &flat(&b), h, w, 3);
        assert!((got[k] - want).abs() < 1e-6, "slice {k}: {} vs {want}", got[k]);
    }
}

#[test]
fn scale_count_tracks_image_size() {
    assert_eq!(max_scales(32), 2);
    assert_eq!(max_scales(64), 3);
    assert_eq!(max_scales(224), 5);
    for s in 1..=5 {
        let w = scale_weights(s);
        assert_eq!(w.len(), s);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn l1_and_gradient_loss_match_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (h, w) = (9, 7);
    let (p, t) = (random_image(&mut rng, h * w), random_image(&mut rng, h * w));
    let m: Vec<f64> = (0..h * w).map(|i| (i % 3 != 0) as u8 as f64).collect();
    let l1 = scalar(&masked_l1(&tensor(&p, &[1, 1, h, w]), &tensor(&t, &[1, 1, h, w]), &tensor(&m, &[1, 1, h, w])).unwrap());
    let num: f64 = (0..h * w).map(|i| m[i] * (p[i] - t[i]).abs()).sum();
    assert!((l1 - num / m.iter().sum::<f64>()).abs() < 1e-12);

    let g = scalar(&gradient_loss(&tensor(&p, &[1, 1, h, w]), &tensor(&t, &[1, 1, h, w])).unwrap());
    let d = |v: &[f64], i: usize, j: usize| v[i * w + j];
    let mut sx = 0.0;
    for i in 0..h {
        for j in 0..w - 1 {
            sx += ((d(&p, i, j + 1) - d(&p, i, j)) - (d(&t, i, j + 1) - d(&t, i, j))).abs();
        }
    }
    let mut sy = 0.0;
    for i in 0..h - 1 {
        for j in 0..w {
            sy += ((d(&p, i + 1, j) - d(&p, i, j)) - (d(&t, i + 1, j) - d(&t, i, j))).abs();
        }
    }
    let want = sx / (h * (w - 1)) as f64 + sy / ((h - 1) * w) as f64;
    assert!((g - want).abs() < 1e-12, "{g} vs {want}");
}

#[test]
fn loss_sets_zero_the_dropped_terms() {
    let w = LossWeights::default();
    let l1 = LossSet::L1.apply(w);
    assert_eq!((l1.lambda_ssim, l1.lambda_grad, l1.lambda_perc), (0.0, 0.0, 0.0));
    let ls = LossSet::L1Ssim.apply(w);
    assert_eq!((ls.lambda_ssim, ls.lambda_grad, ls.lambda_perc), (0.5, 0.0, 0.0));
    assert_eq!(LossSet::Full.apply(w), w);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let shape = [1, 1, 32, 32];
    let p = tensor(&random_image(&mut rng, 1024), &shape);
    let t = tensor(&random_image(&mut rng, 1024), &shape);
    let ones = tensor(&vec![1.0; 1024], &shape);
    let (loss, r) = total_loss(&p, &t, &ones, &l1, 2, None).unwrap();
    assert_eq!((r.ms_ssim, r.grad, r.perc), (0.0, 0.0, 0.0));
    assert!((scalar(&loss) - r.l1).abs() < 1e-12);
}

#[test]
fn psnr_falls_as_noise_grows() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let clean = Volume3D::new(Array3::from_shape_fn((16, 16, 3), |_| rng.random::<f32>()), [1.0; 3]);
    let values: Vec<f64> = [0.01, 0.05, 0.1, 0.3]
        .iter()
        .map(|&s| psnr(&noisy(&clean, s, 9), &clean, 1.0, None).unwrap().as_f64())
        .collect();
    assert!(values.windows(2).all(|w| w[0] > w[1]), "{values:?}");
    assert_eq!(psnr(&clean, &clean, 1.0, None).unwrap(), Psnr::Identical);
    assert_eq!(Psnr::Identical.to_string(), "identical");
}

#[test]
fn shape_mismatch_is_rejected() {
    let a = Volume3D::zeros((8, 8, 2));
    let b = Volume3D::zeros((8, 8, 3));
    assert!(psnr(&a, &b, 1.0, None).is_err());
    assert!(ms_ssim_slices(&a, &b, None, None).is_err());
}

struct Echo;

impl VolumePredictor for Echo {
    fn predict_volume(&self, t1: &Volume3D) -> boldsynth_core::Result<Volume3D> {
        Ok(t1.clone())
    }
}

#[test]
fn dataset_evaluation_writes_mean_row() {
    let subjects = boldsynth_core::synth::phantom_subjects(&boldsynth_core::PhantomSpec::default(), 2).unwrap();
    let res = evaluate_dataset(&Echo, &subjects, &EvalOptions::default()).unwrap();
    assert_eq!(res.per_subject.len(), 2);
    let mean = res.per_subject.iter().map(|s| s.psnr.as_f64()).sum::<f64>() / 2.0;
    assert!((res.psnr.as_f64() - mean).abs() < 1e-9);
    let mut buf = Vec::new();
    res.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "subject_id,psnr_db,ms_ssim");
    assert!(lines[1].starts_with("sub-000,"));
    assert!(lines[3].starts_with("mean,"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn ms_ssim_is_symmetric_and_bounded(seed in 0u64..1000, phase in 0.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = smooth_image(32, 32, phase);
        let y: Vec<f64> = x.iter().map(|v| v + 0.2 * (rng.random::<f64>() - 0.5)).collect();
        let (tx, ty) = (tensor(&x, &[1, 1, 32, 32]), tensor(&y, &[1, 1, 32, 32]));
        let a = to_vec(&ms_ssim(&tx, &ty, 2).unwrap())[0];
        let b = to_vec(&ms_ssim(&ty, &tx, 2).unwrap())[0];
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!(a <= 1.0 + 1e-12 && a > 0.0);
        let s = to_vec(&ms_ssim(&tx, &tx, 2).unwrap())[0];
        prop_assert!((s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn psnr_of_constant_offset_is_closed_form(offset in 0.001f32..0.5) {
        let a = Volume3D::new(Array3::from_elem((6, 5, 2), 0.25f32), [1.0; 3]);
        let b = Volume3D::new(a.data.mapv(|v| v + offset), [1.0; 3]);
        let got = psnr(&b, &a, 1.0, None).unwrap().as_f64();
        let want = -20.0 * (offset as f64).log10();
        prop_assert!((got - want).abs() < 1e-3, "{} vs {}", got, want);
    }
}
