use rand::Rng;
use skillformer::data::{
    bayes_oracle, class_priors, generate, label_from_latent, label_posterior, preprocess, sample_frames, Dataset,
    Pixels, SyntheticSpec, NUM_CLASSES,
};
use skillformer::exec::Exec;
use skillformer::rng;
use skillformer::Error;

fn small_spec() -> SyntheticSpec {
    SyntheticSpec {
        frames: 4,
        image_size: 12,
        ..SyntheticSpec::default()
    }
}

fn bytes(ds: &Dataset) -> Vec<u8> {
    let mut out = Vec::new();
    ds.write(&mut out).unwrap();
    out
}

#[test]
fn label_examples() {
    assert_eq!(label_from_latent(&[1.0; 5]), 3);
    assert_eq!(label_from_latent(&[0.0; 5]), 0);
    assert_eq!(label_from_latent(&[0.5, 0.5]), 2);
    assert_eq!(label_from_latent(&[0.2, 0.29]), 0);
}

#[test]
fn generation_is_deterministic_across_executors() {
    let spec = small_spec();
    let a = generate(&spec, 30, 7, Exec::Sequential).unwrap();
    let b = generate(&spec, 30, 7, Exec::Parallel).unwrap();
    assert_eq!(bytes(&a), bytes(&b));
    let c = generate(&spec, 30, 8, Exec::Sequential).unwrap();
    assert_ne!(bytes(&a), bytes(&c));
    assert!(matches!(generate(&spec, 0, 1, Exec::Sequential), Err(Error::Contract(_))));
}

#[test]
fn samples_follow_their_latents() {
    let spec = SyntheticSpec {
        noise_sigma: 0.0,
        ..small_spec()
    };
    let ds = generate(&spec, 60, 1, Exec::default()).unwrap();
    let per_view = spec.frames * spec.image_size * spec.image_size;
    let (mut zs, mut means) = (Vec::new(), Vec::new());
    for s in &ds.samples {
        let z = s.latent.as_ref().unwrap();
        assert_eq!(s.label as usize, label_from_latent(z));
        assert!(s.pixels.iter().all(|&p| (0.0..=1.0).contains(&p)));
        if s.scenario == 2 {
            continue; // occluded scenario
        }
        for (v, &zv) in z.iter().enumerate() {
            let view = &s.pixels[v * per_view..(v + 1) * per_view];
            zs.push(zv);
            means.push(view.iter().map(|&p| p as f64).sum::<f64>() / per_view as f64);
        }
    }
    // Pearson correlation between a view's latent and its mean brightness
    let n = zs.len() as f64;
    let (mz, mm) = (zs.iter().sum::<f64>() / n, means.iter().sum::<f64>() / n);
    let cov: f64 = zs.iter().zip(&means).map(|(z, m)| (z - mz) * (m - mm)).sum();
    let vz: f64 = zs.iter().map(|z| (z - mz).powi(2)).sum();
    let vm: f64 = means.iter().map(|m| (m - mm).powi(2)).sum();
    assert!(cov / (vz * vm).sqrt() > 0.9);
}

#[test]
fn scenarios_are_balanced_round_robin() {
    let ds = generate(&small_spec(), 500, 3, Exec::default()).unwrap();
    for s in 0..3u8 {
        assert!(ds.scenarios().iter().filter(|&&x| x == s).count() >= 40);
    }
}

#[test]
fn priors_match_direct_simulation() {
    let priors = class_priors(5);
    assert!((priors.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let mut r = rng::seeded(11);
    let m = 200_000;
    let mut counts = [0usize; NUM_CLASSES];
    for _ in 0..m {
        let z: Vec<f64> = (0..5).map(|_| r.gen()).collect();
        counts[label_from_latent(&z)] += 1;
    }
    for (c, p) in counts.iter().zip(priors) {
        let se = (p * (1.0 - p) / m as f64).sqrt();
        assert!((*c as f64 / m as f64 - p).abs() < 4.0 * se, "{counts:?} {priors:?}");
    }
}

#[test]
fn dataset_label_frequencies_match_priors() {
    let ds = generate(&small_spec(), 2000, 4, Exec::default()).unwrap();
    let n = ds.len() as f64;
    for (y, p) in class_priors(5).iter().enumerate() {
        let freq = ds.labels().iter().filter(|&&l| l == y).count() as f64 / n;
        let sigma = (p * (1.0 - p) / n).sqrt();
        assert!((freq - p).abs() < 3.0 * sigma, "class {y}: {freq} vs {p}");
    }
}

#[test]
fn skew_mode_favours_upper_classes() {
    let spec = SyntheticSpec {
        skew: true,
        ..small_spec()
    };
    let ds = generate(&spec, 1000, 5, Exec::default()).unwrap();
    let labels = ds.labels();
    let upper = labels.iter().filter(|&&l| l >= 2).count();
    assert!(upper as f64 / 1000.0 > 0.6);
}

#[test]
fn posterior_is_a_distribution() {
    for (obs, hidden) in [(0.3, 4), (2.5, 2), (0.0, 0), (4.9, 0)] {
        let p = label_posterior(5, obs, hidden);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(p.iter().all(|&v| v >= 0.0));
    }
    assert_eq!(label_posterior(5, 4.9, 0), [0.0, 0.0, 0.0, 1.0]);
}

#[test]
fn oracle_examples() {
    let all = bayes_oracle(5, &[0, 1, 2, 3, 4], 10_000, 1, Exec::default()).unwrap();
    assert_eq!((all.accuracy, all.std_error), (1.0, 0.0));
    let none = bayes_oracle(5, &[], 100_000, 2, Exec::default()).unwrap();
    let max_prior = class_priors(5).into_iter().fold(0.0, f64::max);
    assert!((none.accuracy - max_prior).abs() < 4.0 * none.std_error);
    let one = bayes_oracle(5, &[2], 100_000, 3, Exec::default()).unwrap();
    assert!(none.accuracy < one.accuracy && one.accuracy < all.accuracy);
    assert!(all.accuracy - one.accuracy >= 0.15);
    assert!(matches!(bayes_oracle(5, &[0], 9_999, 1, Exec::default()), Err(Error::Contract(_))));
    assert!(matches!(bayes_oracle(5, &[5], 10_000, 1, Exec::default()), Err(Error::Config(_))));
}

#[test]
fn oracle_is_executor_independent() {
    let a = bayes_oracle(5, &[0, 1], 20_000, 9, Exec::Sequential).unwrap();
    let b = bayes_oracle(5, &[0, 1], 20_000, 9, Exec::Parallel).unwrap();
    assert_eq!(a, b);
}

#[test]
fn frame_sampling_examples() {
    assert_eq!(sample_frames(8, 8).unwrap(), (0..8).collect::<Vec<_>>());
    assert_eq!(sample_frames(9, 3).unwrap(), vec![0, 4, 8]);
    let oracle: Vec<usize> = (0..16).map(|i| (i as f64 * 99.0 / 15.0).round() as usize).collect();
    assert_eq!(sample_frames(100, 16).unwrap(), oracle);
    assert_eq!(sample_frames(5, 1).unwrap(), vec![0]);
    let up = sample_frames(3, 7).unwrap();
    assert!(up.windows(2).all(|w| w[0] <= w[1]) && up[6] == 2);
    assert!(sample_frames(0, 3).is_err());
}

#[test]
fn preprocess_examples() {
    let flat = vec![0.45f32; 2 * 16];
    let t = preprocess(Pixels::F32(&flat), 2, 1, 4, 4, 4).unwrap();
    assert!(t.data().iter().all(|v| v.abs() < 1e-7));
    let t = preprocess(Pixels::U8(&[255]), 1, 1, 1, 1, 1).unwrap();
    assert!((t.item() - (1.0 - 0.45) / 0.225).abs() < 1e-12);

    // the crop of a 40x40 frame to 32x32 keeps rows/cols 4..=35
    let frame: Vec<f32> = (0..40 * 40).map(|i| ((i / 40) * 40 + i % 40) as f32 / 1600.0).collect();
    let t = preprocess(Pixels::F32(&frame), 1, 1, 40, 40, 32).unwrap();
    let back = |v: f64| ((v * 0.225 + 0.45) * 1600.0).round() as usize;
    assert_eq!(back(t.data()[0]), 4 * 40 + 4);
    assert_eq!(back(t.data()[32 * 32 - 1]), 35 * 40 + 35);

    assert!(matches!(preprocess(Pixels::F32(&frame), 1, 1, 40, 40, 48), Err(Error::Data(_))));
    let once = preprocess(Pixels::F32(&frame), 1, 1, 40, 40, 40).unwrap();
    let as_f32: Vec<f32> = once.data().iter().map(|&v| v as f32).collect();
    assert!(matches!(preprocess(Pixels::F32(&as_f32), 1, 1, 40, 40, 40), Err(Error::Data(_))));
}

#[test]
fn dataset_file_round_trip_and_errors() {
    let ds = generate(&small_spec(), 12, 6, Exec::default()).unwrap();
    let raw = bytes(&ds);
    let back = Dataset::from_bytes(&raw).unwrap();
    assert_eq!(bytes(&back), raw);
    assert_eq!(back.labels(), ds.labels());
    assert!(back.samples.iter().all(|s| s.latent.is_none()));

    let mut bad = raw.clone();
    bad[0] = b'X';
    assert!(matches!(Dataset::from_bytes(&bad), Err(Error::Parse { .. })));
    let mut bad = raw.clone();
    bad[4] = 9;
    assert!(matches!(Dataset::from_bytes(&bad), Err(Error::Parse { .. })));
    let truncated = &raw[..raw.len() - 3];
    let err = Dataset::from_bytes(truncated).unwrap_err();
    assert!(err.to_string().contains("byte offset"), "{err}");
    let mut huge = raw.clone();
    huge[28..32].copy_from_slice(&u32::MAX.to_le_bytes());
    assert!(Dataset::from_bytes(&huge).is_err());
}

#[test]
fn view_batch_selects_views_and_frames() {
    let spec = small_spec();
    let ds = generate(&spec, 4, 2, Exec::default()).unwrap();
    let b = ds.view_batch(&[3, 1], &[4, 0], 2, 8).unwrap();
    assert_eq!(b.clips.shape(), &[2, 2, 2, 1, 8, 8]);
    assert_eq!(b.labels, vec![ds.samples[3].label as usize, ds.samples[1].label as usize]);
    assert!(matches!(ds.view_batch(&[0], &[5], 2, 8), Err(Error::Config(_))));
}

#[test]
fn spec_files_parse_with_locations() {
    let spec = SyntheticSpec::parse(
        "views = 3\nframes = 8\nimage_size = 40\nchannels = 1\nnoise_sigma = 0.05\n\n\
         [[scenarios]]\nname = \"a\"\nnoise_scale = 1.0\nocclusion = 0.0\n",
    )
    .unwrap();
    assert_eq!(spec.views, 3);
    let err = SyntheticSpec::parse("views = 3\nframez = 8\n").unwrap_err();
    assert!(matches!(&err, Error::Parse { location, .. } if location == "line 2"), "{err:?}");
}
