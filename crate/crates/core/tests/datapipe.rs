use gaplab::datapipe::preprocess::{pad_crop_at, Example, psnr, random_offsets, scaled_pad};
use gaplab::datapipe::*;
use gaplab::sim::drivers::LineFollower;
use gaplab::sim::{Lighting, World, WorldConfig};
use gaplab::tensor::init::derive_seed;
use gaplab::zoo::InputClass;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn episodes(n: usize, ticks: usize) -> Vec<Episode> {
    (0..n)
        .map(|k| {
            let w = World::new(WorldConfig {
                lighting: if k % 2 == 0 { Lighting::High } else { Lighting::Low },
                ..Default::default()
            })
            .unwrap();
            let mut drv = LineFollower::wandering(0.1, k as u64);
            record_episode(&w, &mut drv, ticks, &format!("s{k}"), "scripted", k as u64 * 1_000_000)
        })
        .collect()
}

#[test]
fn crop_offsets_are_uniform() {
    let pad = scaled_pad(64);
    assert_eq!(pad, 6);
    let side = 2 * pad + 1;
    let mut counts = vec![0usize; side * side];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let draws = 100 * side * side;
    for _ in 0..draws {
        let (oy, ox) = random_offsets(&mut rng, pad);
        counts[oy * side + ox] += 1;
    }
    let expect = draws as f64 / counts.len() as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
    // 168 degrees of freedom; 99.9th percentile is about 231.
    assert!(chi2 < 231.0, "chi-square {chi2}");
}

#[test]
fn noise_hits_ten_db_over_five_hundred_frames() {
    let eps = episodes(3, 240);
    let cfg = PipelineConfig::new(InputClass::Color);
    let mut per_frame = Vec::new();
    let mut seed = 0;
    while per_frame.len() < 500 {
        per_frame.extend(noisy_copy_psnr(&eps, &cfg, seed));
        seed += 1;
    }
    let mean = per_frame[..500].iter().sum::<f64>() / 500.0;
    assert!((mean - 10.0).abs() <= 0.5, "mean PSNR {mean}");
}

/// Per-frame PSNR of one batch's noisy copies, measured in pixel space.
fn noisy_copy_psnr(eps: &[Episode], cfg: &PipelineConfig, seed: u64) -> Vec<f64> {
    let b = sample_batch(eps, cfg, seed).unwrap();
    let idx = eligible(&eps[b.episode], cfg);
    let k = idx.iter().position(|&i| i == b.start).unwrap();
    let half = b.labels.len() / 2;
    let data = b.inputs.data();
    let each = data.len() / b.labels.len();
    (0..half)
        .map(|n| {
            let ex = example_at(&eps[b.episode], idx[k + n], cfg).unwrap();
            let shell = |d: &[f64]| Example { data: d.to_vec(), ..ex.clone() };
            let a = shell(&data[n * each..(n + 1) * each]).to_pixels();
            let z = shell(&data[(half + n) * each..(half + n + 1) * each]).to_pixels();
            psnr(&a, &z, 255.0)
        })
        .collect()
}

#[test]
fn batch_is_crop_of_eval_examples_in_order() {
    let eps = episodes(2, 120);
    for class in InputClass::ALL {
        let cfg = PipelineConfig {
            noise: false,
            ..PipelineConfig::new(class)
        };
        for seed in 0..4 {
            let b = sample_batch(&eps, &cfg, seed).unwrap();
            assert_eq!(b.noise_sigma, None);
            let ep = &eps[b.episode];
            let idx = eligible(ep, &cfg);
            let k = idx.iter().position(|&i| i == b.start).unwrap();
            let each = b.inputs.len() / cfg.batch_size;
            for n in 0..cfg.batch_size {
                let i = idx[k + n];
                assert_eq!(b.labels[n], ep.records[i].action.label().unwrap());
                let ex = example_at(ep, i, &cfg).unwrap();
                let pad = scaled_pad(ex.width);
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, n as u64));
                let (oy, ox) = random_offsets(&mut rng, pad);
                let want = pad_crop_at(&ex, pad, oy, ox);
                assert_eq!(&b.inputs.data()[n * each..(n + 1) * each], &want.data[..], "{class} seed {seed} n {n}");
            }
        }
    }
}

#[test]
fn noise_doubles_batch_and_labels() {
    let eps = episodes(2, 120);
    let cfg = PipelineConfig::new(InputClass::Gray);
    let clean = sample_batch(&eps, &PipelineConfig { noise: false, ..cfg }, 3).unwrap();
    let noisy = sample_batch(&eps, &cfg, 3).unwrap();
    let n = clean.labels.len();
    assert_eq!(noisy.labels.len(), 2 * n);
    assert_eq!(&noisy.labels[..n], &clean.labels[..]);
    assert_eq!(&noisy.labels[n..], &clean.labels[..]);
    assert_eq!(&noisy.inputs.data()[..clean.inputs.len()], clean.inputs.data());
    assert!(noisy.noise_sigma.unwrap() > 0.0);
}

#[test]
fn label_distribution_matches_counts() {
    let eps = episodes(3, 150);
    let d = label_distribution(&eps).unwrap();
    let mut counts = [0usize; 4];
    let mut total = 0;
    for ep in &eps {
        for r in &ep.records {
            if let Some(l) = r.action.label() {
                counts[l] += 1;
                total += 1;
            }
        }
    }
    for k in 0..4 {
        assert_eq!(d[k], counts[k] as f64 / total as f64);
    }
    assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn framestack_skips_frames_without_history() {
    let eps = episodes(1, 60);
    let fs = PipelineConfig::new(InputClass::Framestack);
    let idx = eligible(&eps[0], &fs);
    assert!(idx.iter().all(|&i| i >= 15));
    assert!(example_at(&eps[0], 3, &fs).is_err());
    assert_eq!(example_at(&eps[0], 20, &fs).unwrap().channels, 3);
}
