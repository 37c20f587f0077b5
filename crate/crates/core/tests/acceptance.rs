//! The acceptance suite. Runs every criterion, prints one PASS/FAIL line
//! each, and exits non-zero if any failed. No libtest harness, so the lines
//! always show up in `cargo test` output.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use gaplab::analysis::*;
use gaplab::datapipe::preprocess::{class_frame, psnr, Example, NORM_EPSILON};
use gaplab::datapipe::*;
use gaplab::demo::{search_gap, DemoConfig, DEMO_SEEDS, GAP_SUCCESS, MATCHED_VAL_LOSS};
use gaplab::evalproto::*;
use gaplab::frame::Frame;
use gaplab::sim::drivers::{Alternator, Constant, Controller, LineFollower, Replay, Shuttle};
use gaplab::sim::{Action, Lighting, World, WorldConfig};
use gaplab::tensor::network::SpecBuilder;
use gaplab::tensor::{check_gradients, GradCheckOptions, Init, LayerSpec, Network, Padding, Tensor};
use gaplab::trainer::{run_dir, save_outcome, train};
use gaplab::zoo::{build, ArchitectureId, Family, InputClass};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Verdict = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---- gradients

fn gradients() -> Verdict {
    let started = Instant::now();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for family in Family::ALL {
        let spec = build(&ArchitectureId::new(family, InputClass::Color), 8, 12).map_err(|e| e.to_string())?;
        for seed in 0..5u64 {
            let net = Network::new(spec.clone(), seed).map_err(|e| e.to_string())?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            let mut shape = vec![2];
            shape.extend_from_slice(&spec.input_shape);
            let n = shape.iter().product();
            let x = Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.7..1.7)).collect()).unwrap();
            let labels = [rng.random_range(0..4), rng.random_range(0..4)];
            let opts = GradCheckOptions {
                step: 1e-4,
                seed,
                ..Default::default()
            };
            let r = check_gradients(&net, &x, &labels, opts).map_err(|e| e.to_string())?;
            ensure(r.checked > 0 && r.max_rel_err < 1e-3, || format!("{} seed {seed}: {r:?}", family.name()))?;
            worst = worst.max(r.max_rel_err);
            checked += r.checked;
        }
    }
    let took = started.elapsed();
    ensure(took < Duration::from_secs(120), || format!("took {took:?}"))?;
    Ok(format!("7 minis x 5 seeds, {checked} probes, max rel err {worst:.2e}, {:.1}s", took.as_secs_f64()))
}

// ---- success rate

fn fixture(completions: usize) -> Campaign {
    let trials = campaign_grid()
        .into_iter()
        .enumerate()
        .map(|(k, (position, lighting))| TrialResult {
            arch: "fixture".into(),
            input_class: "none".into(),
            phase: 1,
            position,
            lighting,
            seed: k as u64,
            outcome: if k < completions { Outcome::LapComplete } else { Outcome::CollisionStuck },
            duration_s: 1.0,
            trajectory: Vec::new(),
            diagnostic: None,
        })
        .collect();
    Campaign { trials }
}

fn protocol_arithmetic() -> Verdict {
    ensure(success_rate(&fixture(40)).unwrap() == 1.0, || "40/40".into())?;
    ensure(success_rate(&fixture(22)).unwrap() == 0.55, || "22/40".into())?;
    for k in 0..=40 {
        let got = success_rate(&fixture(k)).unwrap();
        ensure(got == k as f64 / 40.0, || format!("{k}/40 gave {got}"))?;
    }
    let mut short = fixture(40);
    short.trials.pop();
    ensure(success_rate(&short).is_err(), || "39 trials accepted".into())?;
    Ok("40/40 = 1, 22/40 = 0.55, all 41 counts exact".into())
}

// ---- termination

fn trial_labels() -> TrialLabels {
    TrialLabels {
        arch: "scripted".into(),
        input_class: "none".into(),
        phase: 1,
    }
}

fn termination() -> Verdict {
    let w = World::new(WorldConfig::default()).unwrap();
    let rules = Rules::default();
    let cases: Vec<(Box<dyn Controller>, usize, Outcome)> = vec![
        (Box::new(LineFollower::new()), 0, Outcome::LapComplete),
        (Box::new(Shuttle::new(0.25, 0.07)), 2, Outcome::WrongDirection),
        (Box::new(Constant(Action::Forward)), 0, Outcome::CollisionStuck),
        (Box::new(Alternator { period: 10 }), 1, Outcome::OscillationTimeout),
    ];
    let mut out = Vec::new();
    for (mut ctl, position, want) in cases {
        let a = run_trial(&w, ctl.as_mut(), position, Lighting::High, 17, &rules, &trial_labels());
        let b = run_trial(&w, ctl.as_mut(), position, Lighting::High, 17, &rules, &trial_labels());
        ensure(a.outcome == want, || format!("wanted {want:?}, got {:?} after {}s", a.outcome, a.duration_s))?;
        ensure(a == b, || format!("{want:?}: rerun differs"))?;
        let actions = a.trajectory[1..].iter().map(|r| r.action).collect();
        let r = run_trial(&w, &mut Replay::new(actions), position, Lighting::High, 17, &rules, &trial_labels());
        ensure(r == a, || format!("{want:?}: replay differs"))?;
        out.push(format!("{want:?} {:.2}s", a.duration_s));
    }
    ensure(out.len() == 4, || "missing outcome".into())?;
    Ok(out.join(", "))
}

// ---- path metric

fn walk(rng: &mut ChaCha8Rng, n: usize) -> Vec<(f64, f64)> {
    let (mut x, mut y) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    (0..n)
        .map(|_| {
            x += rng.random_range(-0.05..0.05);
            y += rng.random_range(-0.05..0.05);
            (x, y)
        })
        .collect()
}

fn path_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    let mut unequal = 0;
    for _ in 0..100 {
        let (na, nb) = (rng.random_range(1..120), rng.random_range(1..120));
        unequal += (na != nb) as usize;
        let (a, b) = (walk(&mut rng, na), walk(&mut rng, nb));
        let n = na.min(nb);
        let mut total = 0.0;
        for i in 0..n {
            total += (a[i].0 - b[i].0).powi(2) + (a[i].1 - b[i].1).powi(2);
        }
        let want = total / n as f64;
        let got = path_difference(&a, &b).map_err(|e| e.to_string())?;
        worst = worst.max((got - want).abs());
    }
    ensure(worst <= 1e-9, || format!("max deviation {worst:e}"))?;
    ensure(unequal > 0, || "no unequal-length pairs".into())?;
    Ok(format!("100 pairs ({unequal} of unequal length), max deviation {worst:.1e}"))
}

// ---- saliency

fn one_conv_net(seed: u64) -> Network {
    let mut b = SpecBuilder::new("one-conv", &[8, 8, 3]);
    b.then(
        "conv",
        LayerSpec::Conv2d {
            filters: 4,
            kernel: 8,
            stride: 1,
            padding: Padding::Valid,
            init: Init::UniformVarianceScaling,
            weight_decay: 0.0,
        },
    );
    b.then("flatten", LayerSpec::Flatten);
    b.then("softmax", LayerSpec::Softmax);
    let mut net = Network::new(b.build(), seed).unwrap();
    net.trainable_mut()[1].data_mut().copy_from_slice(&[0.2, -0.1, 0.05, 0.0]);
    net
}

/// Standardize each channel, take the weighted sum, softmax.
fn brute_outputs(kernel: &[f64], bias: &[f64], img: &Frame) -> Vec<f64> {
    let c = img.channels;
    let p = (img.width * img.height) as f64;
    let px: Vec<f64> = img.data.iter().map(|&v| v as f64).collect();
    let mut norm = vec![0.0; px.len()];
    for ch in 0..c {
        let vals: Vec<f64> = px.iter().skip(ch).step_by(c).copied().collect();
        let mut mean = 0.0;
        for v in &vals {
            mean += v;
        }
        mean *= 1.0 / p;
        let mut var = 0.0;
        for v in &vals {
            var += (v - mean) * (v - mean);
        }
        var *= 1.0 / p;
        let inv = 1.0 / (var + NORM_EPSILON).sqrt();
        for (k, v) in vals.iter().enumerate() {
            norm[k * c + ch] = (v - mean) * inv;
        }
    }
    let mut logits = bias.to_vec();
    for (f, l) in logits.iter_mut().enumerate() {
        for y in 0..8 {
            for x in 0..8 {
                for ch in 0..c {
                    *l += norm[(y * 8 + x) * c + ch] * kernel[((y * 8 + x) * c + ch) * 4 + f];
                }
            }
        }
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let mut s = 0.0;
    for v in &e {
        s += v;
    }
    e.iter().map(|v| v / s).collect()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

fn saliency_oracle() -> Verdict {
    let mut flips = 0;
    for seed in 0..5u64 {
        let net = one_conv_net(seed);
        let kernel = net.params()[0][0].data().to_vec();
        let bias = net.params()[0][1].data().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
        let img = Frame::new(8, 8, 3, (0..192).map(|_| rng.random()).collect()).unwrap();
        let s = pixel_flip_saliency(&net, &img, "img", "one-conv").map_err(|e| e.to_string())?;
        let base = brute_outputs(&kernel, &bias, &img);
        ensure(s.baseline == base, || format!("seed {seed}: baseline differs"))?;
        for p in 0..64 {
            let mut f = img.clone();
            for ch in 0..3 {
                let v = f.data[p * 3 + ch];
                f.data[p * 3 + ch] = if v > 127 { 0 } else { 255 };
            }
            let out = brute_outputs(&kernel, &bias, &f);
            let mse = out.iter().zip(&base).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 4.0;
            let changed = argmax(&out) != argmax(&base);
            ensure(s.heatmap.mse[p] == mse, || format!("seed {seed} pixel {p}: mse {} vs {mse}", s.heatmap.mse[p]))?;
            ensure(s.heatmap.changed[p] == changed, || format!("seed {seed} pixel {p}: change bit"))?;
            flips += changed as usize;
        }
    }
    Ok(format!("5 nets x 64 pixels exact, {flips} action changes"))
}

// ---- psnr

fn driving(n: usize, ticks: usize, world: WorldConfig) -> Vec<Episode> {
    (0..n)
        .map(|k| {
            let w = World::new(WorldConfig {
                lighting: if k % 2 == 0 { Lighting::High } else { Lighting::Low },
                ..world.clone()
            })
            .unwrap();
            let mut drv = LineFollower::wandering(0.1, k as u64);
            record_episode(&w, &mut drv, ticks, &format!("s{k}"), "scripted", k as u64 * 1_000_000)
        })
        .collect()
}

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

fn psnr_calibration() -> Verdict {
    let eps = driving(4, 240, WorldConfig::default());
    let mut means = Vec::new();
    for class in [InputClass::Color, InputClass::Gray] {
        let cfg = PipelineConfig::new(class);
        let mut per_frame = Vec::new();
        let mut seed = 0;
        while per_frame.len() < 1500 {
            per_frame.extend(noisy_copy_psnr(&eps, &cfg, seed));
            seed += 1;
        }
        for sample in per_frame[..1500].chunks(500) {
            let mean = sample.iter().sum::<f64>() / 500.0;
            ensure((mean - 10.0).abs() <= 0.5, || format!("{class:?}: mean {mean:.3} dB"))?;
            means.push(format!("{mean:.2}"));
        }
    }
    Ok(format!("six 500-frame samples, mean dB {}", means.join(" ")))
}

// ---- ssim

fn ssim_ordering() -> Verdict {
    let eps = driving(6, 400, WorldConfig::default());
    let (mut color, mut stack, mut n) = (0.0, 0.0, 0);
    for ep in &eps {
        let raw: Vec<&Frame> = ep.records.iter().map(|r| &r.frame).collect();
        for t in 15..raw.len() {
            if n == 1200 {
                break;
            }
            let c = class_frame(InputClass::Color, raw[t], None).unwrap();
            let s = class_frame(InputClass::Framestack, raw[t], Some((raw[t - 5], raw[t - 15]))).unwrap();
            color += channel_ssim(&c, SsimMode::Window(7)).unwrap();
            stack += channel_ssim(&s, SsimMode::Window(7)).unwrap();
            n += 1;
        }
    }
    ensure(n >= 1000, || format!("only {n} frames"))?;
    let (c, s) = (color / n as f64, stack / n as f64);
    ensure(c > s + 0.05, || format!("color {c:.4} framestack {s:.4}"))?;
    Ok(format!("{n} frames, color {c:.4} > framestack {s:.4} + 0.05"))
}

// ---- deployment gap

fn gap_demo() -> Verdict {
    let cfg = DemoConfig::default();
    let split = cfg.record().map_err(|e| e.to_string())?;
    let attempts = search_gap(&cfg, &split, |a| eprintln!("  gap attempt {}", a.summary())).map_err(|e| e.to_string())?;
    let last = attempts.last().unwrap();
    ensure(last.shows_gap(), || {
        format!(
            "no gap on seeds {DEMO_SEEDS:?} (need loss diff <= {MATCHED_VAL_LOSS}, success diff >= {GAP_SUCCESS}); last {}",
            last.summary()
        )
    })?;
    Ok(format!(
        "{}; loss diff {:.4}, success diff {:.3}",
        last.summary(),
        last.val_loss_diff(),
        last.success_diff()
    ))
}

// ---- determinism

fn pipeline_run(root: &Path) -> Result<(), String> {
    let cfg = DemoConfig {
        train_episodes: 6,
        validation_episodes: 2,
        ticks: 120,
        iterations: 200,
        noise: true,
        ..Default::default()
    };
    let split = cfg.record().map_err(|e| e.to_string())?;
    for ep in split.train.iter().chain(&split.validation) {
        ep.save(&root.join("sessions").join(&ep.meta.session_id)).map_err(|e| e.to_string())?;
    }
    let tc = cfg.train_config(Family::Cnn2, 7);
    let out = train(&tc, &split, |_| {}).map_err(|e| e.to_string())?;
    let dir = run_dir(root, &tc.arch, tc.seed);
    save_outcome(&dir, &tc, &out).map_err(|e| e.to_string())?;
    let world = World::new(cfg.world()).map_err(|e| e.to_string())?;
    let mut driver = NetworkDriver::new(out.network, cfg.input_class);
    let labels = TrialLabels {
        arch: tc.arch.label(),
        input_class: cfg.input_class.name().into(),
        phase: 1,
    };
    let c = run_campaign(&world, &mut driver, 7, &Rules::default(), &labels);
    c.save(&dir.join("phase1")).map_err(|e| e.to_string())?;
    Ok(())
}

fn files(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = walkdir(root)
        .into_iter()
        .map(|p| (p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

fn walkdir(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walkdir(&p));
        } else {
            out.push(p);
        }
    }
    out
}

fn determinism() -> Verdict {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline_run(a.path())?;
    pipeline_run(b.path())?;
    let (fa, fb) = (files(a.path()), files(b.path()));
    let names: Vec<_> = fa.iter().map(|f| f.0.as_str()).collect();
    for want in ["curve.csv", "checkpoint_final.json", "checkpoint_best.json", "phase1/campaign.csv"] {
        ensure(names.iter().any(|n| n.ends_with(want)), || format!("no {want} written"))?;
    }
    ensure(fa.len() == fb.len(), || format!("{} vs {} files", fa.len(), fb.len()))?;
    for (x, y) in fa.iter().zip(&fb) {
        ensure(x == y, || format!("{} differs", x.0))?;
    }
    let bytes: usize = fa.iter().map(|f| f.1.len()).sum();
    Ok(format!("{} files, {bytes} bytes, identical across two runs", fa.len()))
}

// ---- forest

fn forest_sanity() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let rows: Vec<FeatureRow> = (0..120)
        .map(|k| {
            let sim: f64 = rng.random();
            FeatureRow {
                condition: format!("c{k}"),
                flops: rng.random::<f64>() * 1e7,
                params: rng.random::<f64>() * 1e5,
                hidden_layers: rng.random_range(1..8) as f64,
                max_conv_filters: rng.random_range(0..64) as f64,
                tail_val_loss: rng.random(),
                initial_val_loss: 1.0 + rng.random::<f64>(),
                path_self_similarity: sim,
                input_class: rng.random_range(0..3) as f64,
                success_phase1: if sim > 0.5 { 0.9 } else { 0.2 },
                success_phase2: 0.0,
            }
        })
        .collect();
    let names: Vec<String> = FEATURE_NAMES.iter().map(|s| s.to_string()).collect();
    let x: Vec<Vec<f64>> = rows.iter().map(FeatureRow::predictors).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.success_phase1).collect();
    let rep = forest_importance(&names, &x, &y, 1000, 5).map_err(|e| e.to_string())?;
    let at = FEATURE_NAMES.iter().position(|n| *n == "path_self_similarity").unwrap();
    for (p, _) in &rep.runs {
        ensure((500..=5000).contains(&p.n_estimators) && (1..=7).contains(&p.max_features), || format!("{p:?}"))?;
    }
    ensure(rep.runs.len() == 1000, || "run count".into())?;
    ensure(rep.mean[at] > 0.8, || format!("importance {:?}", rep.mean))?;
    Ok(format!("path_self_similarity mean importance {:.3} over 1000 runs", rep.mean[at]))
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 10] = [
        ("gradient correctness", gradients),
        ("protocol arithmetic", protocol_arithmetic),
        ("termination rules", termination),
        ("path metric oracle", path_oracle),
        ("saliency oracle", saliency_oracle),
        ("psnr calibration", psnr_calibration),
        ("ssim ordering", ssim_ordering),
        ("deployment gap", gap_demo),
        ("end-to-end determinism", determinism),
        ("forest sanity", forest_sanity),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in criteria {
        if !only.is_empty() && !only.iter().any(|o| name.contains(o.as_str())) {
            continue;
        }
        let t = Instant::now();
        let r = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = t.elapsed().as_secs_f64();
        match r {
            Ok(detail) => println!("PASS {name} ({secs:.1}s): {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name} ({secs:.1}s): {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
