//! Acceptance run: one PASS/FAIL line per criterion. Set `ACCEPTANCE_ONLY`
//! to a comma-separated list of criterion numbers to run a subset.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{Context as _, Result};
use augment::{run_augmentation, RunOptions, TemplateBackend};
use maskgst::bpe::CaptionTokens;
use maskgst::data::{attach_augmentations, load_sidecar, SyntheticConfig};
use maskgst::eval::{char_metrics, frechet_feature_distance, MetricsReport};
use maskgst::inference::*;
use maskgst::model::{build_input, visual_rows, Context, MaskGst, ModelConfig};
use maskgst::numeric::Tensor;
use maskgst::pipeline::{self, Assets, ExperimentConfig};
use maskgst::rng::{derive_seed, seeded};
use maskgst::training::{gamma, model_gradcheck, prepare_stories, sample_mask, sample_mask_at, train_epoch, TrainConfig, TrainRngs};
use maskgst::vq::quantize;
use maskgst_cli::Workspace;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Training epochs per seed for the guidance experiments.
const EPOCHS: usize = 8;
const SEEDS: [u64; 3] = [0, 1, 2];
const LAMBDAS: [f64; 4] = [0.0, 0.2, 0.4, 0.6];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Result<Verdict> {
    Ok(Verdict { pass, detail: detail.into() })
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        d: 16,
        n_full: 1,
        n_self: 1,
        n_head: 2,
        codebook_size: 8,
        seq_len: 16,
        caption_len: 4,
        text_vocab: 16,
        n_chars: 3,
        story_len: 2,
        ffn_mult: 2,
    }
}

fn tiny_prompt(seed: u64) -> StoryPrompt {
    let mut rng = seeded(seed);
    StoryPrompt {
        captions: (0..2)
            .map(|_| CaptionTokens {
                ids: (0..4).map(|_| rng.random_range(3..16)).collect(),
            })
            .collect(),
        presence: (0..2).map(|_| (0..3).map(|_| rng.random_bool(0.5)).collect()).collect(),
    }
}

fn c1_gradients() -> Result<Verdict> {
    let cfg = ModelConfig {
        text_vocab: 64,
        ..ModelConfig::default()
    };
    let start = Instant::now();
    let r = model_gradcheck(cfg.clone(), 200, 3)?;
    let secs = start.elapsed().as_secs_f64();
    verdict(
        r.max_rel_err < 1e-4 && secs < 300.0 && (cfg.d, cfg.seq_len, cfg.caption_len, cfg.n_chars) == (64, 64, 32, 9),
        format!("max rel err {:.2e} over {} probes, f64, {secs:.0}s", r.max_rel_err, r.probes),
    )
}

fn c2_guidance_exactness() -> Result<Verdict> {
    let mut rng = seeded(11);
    let mut mismatches = 0;
    for _ in 0..200 {
        let lam: f64 = rng.random_range(0.0..1.0);
        let v = |r: &mut maskgst::rng::Rng| (0..64).map(|_| r.random_range(-8.0..8.0)).collect::<Vec<f64>>();
        let (t, c, n) = (v(&mut rng), v(&mut rng), v(&mut rng));
        let ours = guided_logits(&t, &c, &n, lam)?;
        for i in 0..64 {
            let expect = (1.0 - lam) * t[i] + (2.0 * lam) * c[i] - lam * n[i];
            mismatches += (ours[i].to_bits() != expect.to_bits()) as usize;
        }
    }
    let hand = guided_logits(&[1.0f64], &[2.0], &[0.5], 0.2)?[0];
    let model = MaskGst::<f32>::init(tiny_config(), 9)?;
    let prompts: Vec<StoryPrompt> = (0..3).map(tiny_prompt).collect();
    let base = DecodeConfig {
        steps: 8,
        guidance: None,
        batch_stories: 2,
        ..Default::default()
    };
    let zero = DecodeConfig {
        guidance: Some(GuidanceConfig::new(0.0)?),
        ..base.clone()
    };
    let same = (0..5).all(|s| decode_stories(&model, &prompts, &base, s).ok() == decode_stories(&model, &prompts, &zero, s).ok());
    verdict(
        mismatches == 0 && (hand - 1.5).abs() < 1e-12 && same,
        format!("{mismatches} bit mismatches in 12800 elements, hand example {hand}, lambda=0 decode identical: {same}"),
    )
}

fn c3_mask_schedule() -> Result<Verdict> {
    let grid: Vec<f64> = (0..=1000).map(|i| gamma(i as f64 / 1000.0)).collect();
    let monotone = grid.windows(2).all(|w| w[1] < w[0]);
    let ends = gamma(0.0) == 1.0 && gamma(1.0).abs() < 1e-15;
    let mut rng = seeded(5);
    let n = 64;
    let mean = (0..10_000).map(|_| sample_mask(n, &mut rng).count() as f64 / n as f64).sum::<f64>() / 10_000.0;
    let target = 2.0 / PI;
    verdict(
        monotone && ends && (mean - target).abs() <= 0.01,
        format!("gamma(0)=1, gamma(1)={:.1e}, monotone {monotone}; mean mask fraction {mean:.4} (N={n}) vs 2/pi {target:.4}", gamma(1.0)),
    )
}

fn c4_decoding_invariants() -> Result<Verdict> {
    let model = MaskGst::<f32>::init(tiny_config(), 5)?;
    let mut rng = seeded(17);
    let mut violations = Vec::new();
    for case in 0..1000 {
        let steps = rng.random_range(1..=32);
        let seed: u64 = rng.random();
        let cfg = DecodeConfig {
            steps,
            guidance: (case % 2 == 1).then(|| GuidanceConfig::new(0.3).unwrap()),
            ..Default::default()
        };
        let mut prev: Option<Vec<DecodeState>> = None;
        decode_stories_observed(&model, &[tiny_prompt(seed)], &cfg, seed, |states| {
            for (f, s) in states[0].iter().enumerate() {
                if s.kept() != keep_total(s.step, steps, 16) {
                    violations.push(format!("case {case} frame {f} step {}: kept {}", s.step, s.kept()));
                }
                if let Some(p) = &prev {
                    if s.kept() < p[f].kept() {
                        violations.push(format!("case {case}: unmasking went backwards"));
                    }
                    for q in 0..16 {
                        if !p[f].mask[q] && (s.mask[q] || s.canvas[q] != p[f].canvas[q]) {
                            violations.push(format!("case {case} frame {f}: kept token {q} changed"));
                        }
                    }
                }
            }
            prev = Some(states[0].clone());
        })?;
        if !prev.as_ref().is_some_and(|l| l.iter().all(|s| s.masked() == 0 && s.step == steps)) {
            violations.push(format!("case {case}: masked tokens remain after {steps} steps"));
        }
    }
    let first = violations.first().cloned().unwrap_or_default();
    verdict(violations.is_empty(), format!("1000 decodes, T in [1,32], {} violations {first}", violations.len()))
}

fn c5_sampling_fidelity() -> Result<Verdict> {
    let logits = [0.3f64, -1.0, 2.0, 0.0, 1.1, -0.4, 0.7, -2.5];
    let probs = softmax(&logits);
    let cfg = DecodeConfig {
        steps: 1,
        noise_temperature: 0.0,
        guidance: None,
        ..Default::default()
    };
    let draws = 100_000;
    let mut counts = [0usize; 8];
    let mut rng = seeded(3);
    for _ in 0..draws {
        let mut s = DecodeState::new(1, 8, 1);
        apply_step(&mut s, &logits, 8, &cfg, &mut rng);
        counts[s.canvas[0]] += 1;
    }
    let worst = counts
        .iter()
        .zip(&probs)
        .map(|(&c, &p)| (c as f64 - draws as f64 * p).abs() / (draws as f64 * p * (1.0 - p)).sqrt())
        .fold(0.0, f64::max);
    verdict(worst <= 3.0, format!("100000 draws, largest deviation {worst:.2} sigma"))
}

fn c6_vq_oracle() -> Result<Verdict> {
    let mut rng = seeded(23);
    let (k, d) = (128, 16);
    let codebook = Tensor::from_fn(&[k, d], |_| rng.random_range(-1.0..1.0));
    let latents = Tensor::from_fn(&[10_000, d], |_| rng.random_range(-1.5..1.5));
    let (idx, q) = quantize::<f64>(&codebook, &latents);
    let mut wrong = 0;
    for r in 0..10_000 {
        let z = latents.row(r);
        let dist = |j: usize| -> f64 { (0..d).map(|i| (z[i] - codebook.row(j)[i]).powi(2)).sum() };
        let best = (0..k).min_by(|&a, &b| dist(a).total_cmp(&dist(b))).unwrap();
        wrong += (idx[r] != best || q.row(r) != codebook.row(best)) as usize;
    }
    verdict(wrong == 0, format!("{wrong} of 10000 assignments differ from exhaustive search (K={k})"))
}

/// Trained models shared by criteria 7, 8 and 9.
struct Experiment {
    cfg: ExperimentConfig,
    assets: Assets,
    assets_secs: f64,
    models: Vec<MaskGst<f32>>,
    train_secs: Vec<f64>,
    /// Per seed, per lambda index: report and decode seconds.
    reports: Vec<Vec<(MetricsReport, f64)>>,
}

fn lambda_decode(cfg: &ExperimentConfig, lambda: f64) -> Result<DecodeConfig> {
    Ok(DecodeConfig {
        guidance: if lambda == 0.0 { None } else { Some(GuidanceConfig::new(lambda)?) },
        ..cfg.decode.clone()
    })
}

fn run_experiment() -> Result<Experiment> {
    let mut cfg = ExperimentConfig::default();
    cfg.train.epochs = EPOCHS;
    let start = Instant::now();
    let assets = pipeline::build_assets(&cfg)?;
    let assets_secs = start.elapsed().as_secs_f64();
    eprintln!("  assets ready in {assets_secs:.0}s ({} training stories)", assets.train.len());
    let mut exp = Experiment {
        cfg,
        assets,
        assets_secs,
        models: Vec::new(),
        train_secs: Vec::new(),
        reports: Vec::new(),
    };
    for &seed in &SEEDS {
        let tc = TrainConfig {
            seed,
            ..exp.cfg.train.clone()
        };
        let t = Instant::now();
        let model = pipeline::train_model(&exp.cfg.model, &tc, &exp.assets.train, |s| {
            eprintln!("  seed {seed} epoch {} loss {:.4} ({:.0}s)", s.epoch, s.loss, s.wall_time);
        })?;
        exp.train_secs.push(t.elapsed().as_secs_f64());
        let mut row = Vec::new();
        for &lambda in &LAMBDAS {
            let t = Instant::now();
            let (_, r) = pipeline::generate_and_score(&model, &exp.assets, &exp.cfg, &lambda_decode(&exp.cfg, lambda)?, derive_seed(seed, "eval"))?;
            let secs = t.elapsed().as_secs_f64();
            eprintln!("  seed {seed} lambda {lambda}: f1 {:.4} acc {:.4} ({secs:.0}s)", r.char_f1, r.char_acc);
            row.push((r, secs));
        }
        exp.reports.push(row);
        exp.models.push(model);
    }
    Ok(exp)
}

fn mean_over_seeds(exp: &Experiment, li: usize, f: impl Fn(&MetricsReport) -> f64) -> f64 {
    exp.reports.iter().map(|r| f(&r[li].0)).sum::<f64>() / exp.reports.len() as f64
}

fn c7_ablation(exp: &Experiment) -> Result<Verdict> {
    let (f0, f2) = (mean_over_seeds(exp, 0, |r| r.char_f1), mean_over_seeds(exp, 1, |r| r.char_f1));
    let (a0, a2) = (mean_over_seeds(exp, 0, |r| r.char_acc), mean_over_seeds(exp, 1, |r| r.char_acc));
    let secs = exp.assets_secs + exp.train_secs.iter().sum::<f64>() + exp.reports.iter().map(|r| r[0].1 + r[1].1).sum::<f64>();
    verdict(
        f2 - f0 >= 0.05 && a2 - a0 >= 0.05 && secs < 3600.0,
        format!(
            "{} seeds, {EPOCHS} epochs: Char-F1 {:.2} -> {:.2} ({:+.2}), Char-Acc {:.2} -> {:.2} ({:+.2}) points; {:.1} min",
            SEEDS.len(),
            100.0 * f0,
            100.0 * f2,
            100.0 * (f2 - f0),
            100.0 * a0,
            100.0 * a2,
            100.0 * (a2 - a0),
            secs / 60.0
        ),
    )
}

fn c8_sweep(exp: &Experiment) -> Result<Verdict> {
    let f1: Vec<f64> = (0..LAMBDAS.len()).map(|i| mean_over_seeds(exp, i, |r| r.char_f1)).collect();
    let shape_ok = f1[1] >= f1[0] - 0.01 && f1[2] >= f1[1] - 0.01;
    let table: Vec<String> = LAMBDAS.iter().zip(&f1).map(|(l, f)| format!("{l}: {:.2}", 100.0 * f)).collect();
    verdict(shape_ok, format!("mean Char-F1 by lambda {{{}}}", table.join(", ")))
}

fn c9_cross_attention(exp: &Experiment) -> Result<Verdict> {
    let model = &exp.models[0];
    let cfg = model.config();
    let story = &exp.assets.train[0];
    let mut rng = seeded(31);
    let i = 2;
    let mask = sample_mask_at(cfg.seq_len, 0.5, &mut rng);
    let inp = build_input(cfg, &story.tokens[i], &mask.bits, &story.captions[i], Some(&story.sample.presence[i]))?;
    let frame_len = inp.len();
    let full = model.logits(&[inp.clone()], &[story.context()], &[0])?;
    let zeroed = model.logits(&[inp.clone()], &[Context::Zeros], &[0])?;
    let diff = visual_rows(&full, 0, frame_len, cfg.seq_len)
        .iter()
        .zip(visual_rows(&zeroed, 0, frame_len, cfg.seq_len))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    let selfonly = model.without_cross_attention();
    let a = selfonly.logits(&[inp.clone()], &[story.context()], &[0])?;
    let b = selfonly.logits(&[inp], &[Context::Zeros], &[0])?;
    verdict(
        diff as f64 > 1e-6 && a == b,
        format!("trained model: zeroed context moves frame {i} logits by {diff:.3e}; Self-Layers only: outputs identical {}", a == b),
    )
}

fn c10_metric_harness(exp: &Experiment) -> Result<Verdict> {
    let clf = &exp.assets.classifier;
    let (frames, truth) = pipeline::all_frames(&exp.assets.dataset.test);
    let f1 = char_metrics(&clf.predict(&frames)?, &truth)?.f1();
    let feats = clf.features(&frames)?;
    let self_dist = frechet_feature_distance(&feats, &feats)?;
    let mut rng = seeded(41);
    let draw = |mean: f64, sd: f64, rng: &mut maskgst::rng::Rng| -> Vec<Vec<f64>> {
        let n = Normal::new(mean, sd).unwrap();
        (0..20_000).map(|_| vec![n.sample(rng)]).collect()
    };
    let a = draw(0.0, 1.0, &mut rng);
    let cases = [(1.0, 1.0, 1.0), (0.5, 2.0, 1.25)];
    let mut worst: f64 = 0.0;
    for (mean, sd, closed) in cases {
        let d = frechet_feature_distance(&a, &draw(mean, sd, &mut rng))?;
        worst = worst.max((d - closed).abs());
    }
    verdict(
        f1 >= 0.95 && self_dist < 1e-6 && worst <= 0.05,
        format!("ground-truth Char-F1 {f1:.4} on {} test frames; d(X,X) {self_dist:.1e}; 1-D Gaussian max error {worst:.4}", frames.len()),
    )
}

fn c11_augmentation(exp: &Experiment) -> Result<Verdict> {
    let dir = tempfile::tempdir()?;
    let out = dir.path().join("aug.jsonl");
    let ds = &exp.assets.dataset;
    let report = run_augmentation(&ds.train, &ds.characters, &TemplateBackend, &out, RunOptions::default())?;
    let records = load_sidecar(&out)?;
    let expected: usize = ds.train.iter().map(|s| s.len()).sum();
    let mut stories = ds.train.clone();
    attach_augmentations(&mut stories, &records);
    let complete = records.len() == expected && stories.iter().all(|s| s.aug_captions.is_some());

    let cfg = &exp.cfg;
    let data = prepare_stories(&stories, &exp.assets.tokenizer, &exp.assets.vocab, cfg.model.caption_len, true)?;
    let small = ModelConfig {
        d: 16,
        n_full: 1,
        n_self: 1,
        n_head: 2,
        ffn_mult: 1,
        ..cfg.model.clone()
    };
    let tc = TrainConfig {
        augmentation: true,
        batch_stories: 8,
        ..cfg.train.clone()
    };
    let mut model = MaskGst::<f32>::init(small, 1)?;
    let stats = train_epoch(&mut model, &data, &tc, &mut TrainRngs::new(3), 0)?;
    let rate = stats.original_caption_rate;
    verdict(
        complete && report.coverage() == 1.0 && (rate - 0.5).abs() <= 0.02,
        format!(
            "offline sidecar: {} records for {expected} frames, duplicate-free; original-caption rate {rate:.4} over {} frames",
            records.len(),
            stats.frames
        ),
    )
}

const ARTIFACTS: [&str; 10] = [
    "resolved-config.toml",
    "data/train.jsonl",
    "vq.ckpt",
    "vq-stats.jsonl",
    "vocab.txt",
    "model.ckpt",
    "train-stats.jsonl",
    "classifier.ckpt",
    "generations/grid.png",
    "report.json",
];

fn small_run(dir: &Path) -> Result<()> {
    let mut cfg = ExperimentConfig::default();
    cfg.data = SyntheticConfig {
        train_stories: 200,
        val_stories: 40,
        test_stories: 8,
        ..cfg.data
    };
    cfg.vq_train.epochs = 4;
    cfg.vq_frames = 400;
    cfg.train.epochs = 1;
    cfg.eval_stories = 8;
    let ws = Workspace::open(dir, cfg)?;
    ws.synth_data()?;
    ws.train_vq()?;
    ws.train_model()?;
    ws.generate()?;
    ws.evaluate()?;
    Ok(())
}

fn c12_reproducibility() -> Result<Verdict> {
    let (a, b) = (tempfile::tempdir()?, tempfile::tempdir()?);
    small_run(a.path())?;
    small_run(b.path())?;
    let mut differing = Vec::new();
    for f in ARTIFACTS {
        let x = fs::read(a.path().join(f)).with_context(|| f.to_string())?;
        let y = fs::read(b.path().join(f)).with_context(|| f.to_string())?;
        if x != y {
            differing.push(f);
        }
    }
    verdict(differing.is_empty(), format!("{} artifacts compared across two runs, differing: {differing:?}", ARTIFACTS.len()))
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let wanted = |i: usize| only.as_ref().is_none_or(|o| o.contains(&i));
    let names: BTreeMap<usize, &str> = [
        (1, "gradient correctness"),
        (2, "guidance exactness"),
        (3, "mask schedule"),
        (4, "decoding invariants"),
        (5, "sampling fidelity"),
        (6, "VQ nearest-neighbour oracle"),
        (7, "guidance ablation direction"),
        (8, "lambda sweep shape"),
        (9, "cross-attention liveness"),
        (10, "metric harness self-test"),
        (11, "augmentation pipeline"),
        (12, "reproducibility"),
    ]
    .into_iter()
    .collect();
    let mut results: Vec<(usize, Result<Verdict>)> = Vec::new();
    let mut record = |i: usize, f: &mut dyn FnMut() -> Result<Verdict>| {
        if wanted(i) {
            eprintln!("running criterion {i} ({})", names[&i]);
            let r = f();
            let line = match &r {
                Ok(v) => format!("{} {i:>2} {}: {}", if v.pass { "PASS" } else { "FAIL" }, names[&i], v.detail),
                Err(e) => format!("FAIL {i:>2} {}: error: {e:#}", names[&i]),
            };
            println!("{line}");
            results.push((i, r));
        }
    };
    record(1, &mut c1_gradients);
    record(2, &mut c2_guidance_exactness);
    record(3, &mut c3_mask_schedule);
    record(4, &mut c4_decoding_invariants);
    record(5, &mut c5_sampling_fidelity);
    record(6, &mut c6_vq_oracle);
    if [7, 8, 9, 10, 11].iter().any(|&i| wanted(i)) {
        match run_experiment() {
            Ok(exp) => {
                record(7, &mut || c7_ablation(&exp));
                record(8, &mut || c8_sweep(&exp));
                record(9, &mut || c9_cross_attention(&exp));
                record(10, &mut || c10_metric_harness(&exp));
                record(11, &mut || c11_augmentation(&exp));
            }
            Err(e) => {
                let msg = format!("{e:#}");
                for i in 7..=11 {
                    record(i, &mut || Err(anyhow::anyhow!("shared experiment failed: {msg}")));
                }
            }
        }
    }
    record(12, &mut c12_reproducibility);
    let failed: Vec<usize> = results.iter().filter(|(_, r)| !r.as_ref().is_ok_and(|v| v.pass)).map(|(i, _)| *i).collect();
    println!("{} of {} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
