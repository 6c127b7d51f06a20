use boldsynth_core::dataset::{load_manifest, read_manifest};
use boldsynth_core::synth::{build_manifest, generate_cohort, generate_pair, phantom_subjects, Mapping};
use boldsynth_core::volume_io::compute_mean_bold;
use boldsynth_core::{Error, PhantomSpec};
use ndarray::Array3;
use proptest::prelude::*;

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Direct (non-separable) 3D Gaussian of `a·x + b·x²`, zero outside the grid
/// and outside the support of `t1`.
fn mapped_reference(t1: &Array3<f32>, m: &Mapping) -> Array3<f64> {
    let r = (3.0 * m.radius).ceil() as isize;
    let g = |d: isize| (-((d * d) as f64) / (2.0 * m.radius * m.radius)).exp();
    let norm: f64 = (-r..=r).map(g).sum();
    let (h, w, z) = t1.dim();
    Array3::from_shape_fn((h, w, z), |(i, j, k)| {
        if t1[[i, j, k]] == 0.0 {
            return 0.0;
        }
        let mut acc = 0.0;
        for di in -r..=r {
            for dj in -r..=r {
                for dk in -r..=r {
                    let (a, b, c) = (i as isize + di, j as isize + dj, k as isize + dk);
                    if a < 0 || b < 0 || c < 0 || a >= h as isize || b >= w as isize || c >= z as isize {
                        continue;
                    }
                    let x = t1[[a as usize, b as usize, c as usize]] as f64;
                    acc += g(di) * g(dj) * g(dk) * (m.a * x + m.b * x * x);
                }
            }
        }
        acc / norm.powi(3)
    })
}

#[test]
fn generation_is_deterministic_per_seed() {
    let spec = PhantomSpec::default();
    let (a1, b1) = generate_pair(&spec).unwrap();
    let (a2, b2) = generate_pair(&spec).unwrap();
    assert_eq!(a1, a2);
    assert_eq!(b1.data, b2.data);
    let (a3, _) = generate_pair(&spec.with_seed(1)).unwrap();
    assert_ne!(a1, a3);
}

#[test]
fn noiseless_mean_over_one_kept_frame_is_the_clean_mapping() {
    let spec = PhantomSpec { shape: (16, 16, 8), frames: 11, noise_sigma: 0.0, ..PhantomSpec::default() };
    let (t1, bold) = generate_pair(&spec).unwrap();
    let mean = compute_mean_bold(&bold, 10).unwrap();
    let want = mapped_reference(&t1.data, &spec.mapping);
    let worst = mean
        .data
        .iter()
        .zip(want.iter())
        .map(|(&g, &w)| (g as f64 - w).abs())
        .fold(0.0, f64::max);
    assert!(worst < 1e-5, "deviation {worst}");
}

#[test]
fn t1_and_mean_bold_share_support_and_correlate() {
    let spec = PhantomSpec::default();
    for s in phantom_subjects(&spec, 3).unwrap() {
        let mut a = Vec::new();
        let mut b = Vec::new();
        for (&t, &y) in s.t1.data.iter().zip(s.target.data.iter()) {
            assert!(t > 0.0 || y == 0.0, "BOLD outside the head in {}", s.id);
            if t > 0.0 {
                a.push(t as f64);
                b.push(y as f64);
            }
        }
        let r = pearson(&a, &b);
        assert!(r > 0.5, "{}: correlation {r}", s.id);
        let (lo, hi) = s.target.intensity_range();
        assert_eq!((lo, hi), (0.0, 1.0));
    }
}

#[test]
fn noiseless_volumes_share_support() {
    let spec = PhantomSpec { noise_sigma: 0.0, ..PhantomSpec::default() };
    let s = &phantom_subjects(&spec, 1).unwrap()[0];
    for (&t, &y) in s.t1.data.iter().zip(s.target.data.iter()) {
        assert_eq!(t > 0.0, y > 0.0);
    }
}

#[test]
fn invalid_specs_are_rejected() {
    assert!(generate_pair(&PhantomSpec { frames: 10, ..PhantomSpec::default() }).is_err());
    assert!(generate_pair(&PhantomSpec { shape: (1, 8, 4), ..PhantomSpec::default() }).is_err());
    assert!(generate_pair(&PhantomSpec { noise_sigma: -1.0, ..PhantomSpec::default() }).is_err());
}

#[test]
fn manifest_round_trips_through_nifti() {
    let dir = tempfile::tempdir().unwrap();
    let spec = PhantomSpec { shape: (12, 10, 5), ..PhantomSpec::default() };
    let cohort = generate_cohort(&spec, 3).unwrap();
    let manifest = build_manifest(&cohort, dir.path()).unwrap();
    let entries = read_manifest(&manifest).unwrap();
    assert_eq!(entries.len(), 3);
    assert_eq!(entries[2].subject_id, "sub-002");
    assert!(entries.iter().all(|e| e.t1_path.exists() && e.bold_path.exists()));

    let loaded = load_manifest(&manifest, 10).unwrap();
    let direct = phantom_subjects(&spec, 3).unwrap();
    for (l, d) in loaded.iter().zip(&direct) {
        assert_eq!(l.id, d.id);
        assert_eq!(l.t1.data, d.t1.data);
        let worst = l.target.data.iter().zip(d.target.data.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(worst < 1e-6, "{}: {worst}", l.id);
    }
}

#[test]
fn missing_file_error_names_the_subject() {
    let dir = tempfile::tempdir().unwrap();
    let spec = PhantomSpec { shape: (8, 8, 3), ..PhantomSpec::default() };
    let manifest = build_manifest(&generate_cohort(&spec, 2).unwrap(), dir.path()).unwrap();
    std::fs::remove_file(dir.path().join("sub-001_bold.nii.gz")).unwrap();
    let err = load_manifest(&manifest, 10).unwrap_err();
    assert!(matches!(&err, Error::Subject { subject, .. } if subject == "sub-001"), "{err}");
    assert!(err.to_string().contains("sub-001"));
}

#[test]
fn empty_manifest_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("manifest.csv");
    std::fs::write(&path, "subject_id,t1_path,bold_path\n").unwrap();
    assert!(read_manifest(&path).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn transient_frames_never_reach_the_mean(seed in 0u64..500, transient in 0.0f64..5.0) {
        let base = PhantomSpec { shape: (10, 10, 4), seed, ..PhantomSpec::default() };
        let (_, a) = generate_pair(&base).unwrap();
        let (_, b) = generate_pair(&PhantomSpec { transient, ..base }).unwrap();
        let ma = compute_mean_bold(&a, 10).unwrap();
        let mb = compute_mean_bold(&b, 10).unwrap();
        prop_assert_eq!(ma.data, mb.data);
    }
}
