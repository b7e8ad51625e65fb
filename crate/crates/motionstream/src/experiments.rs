//! Named experiments. Each writes `config.toml`, its CSVs and
//! `summary.json` into a fresh run directory.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use motionstream_core::audio::{synthesize as synth_audio, AudioClass, AudioParams};
use motionstream_core::collapse::{self, CollapseBenchmark};
use motionstream_core::crossroad::crossroad_train_and_probe;
use motionstream_core::generator::Generator;
use motionstream_core::kinematics::{MotionClip, Skeleton};
use motionstream_core::rewards::RetrievalReport;
use motionstream_core::rl::AlignStep;
use motionstream_core::streaming::{frames_for_seconds, latency_profile, latency_rows, CylinderGuard, LatencyReport, StreamEngine, BUDGET_MS, STAGES};
use motionstream_core::synthetic::SyntheticDatasetSpec;
use motionstream_core::tokenizer::{mpjpe, Tokenizer};
use motionstream_core::{seeded, Rng};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::pipeline::{self, AlignMethod, RewardModels};
use crate::runs::create_run_dir;
use crate::WallClock;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    TokenizerAblation,
    CorruptionAblation,
    Crossroad,
    RlCompare,
    Retrieval,
    Latency,
}

impl Experiment {
    pub const ALL: [Experiment; 6] = [
        Experiment::TokenizerAblation,
        Experiment::CorruptionAblation,
        Experiment::Crossroad,
        Experiment::RlCompare,
        Experiment::Retrieval,
        Experiment::Latency,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::TokenizerAblation => "tokenizer-ablation",
            Experiment::CorruptionAblation => "corruption-ablation",
            Experiment::Crossroad => "crossroad",
            Experiment::RlCompare => "rl-compare",
            Experiment::Retrieval => "retrieval",
            Experiment::Latency => "latency",
        }
    }

    pub fn names() -> Vec<&'static str> {
        Self::ALL.iter().map(|e| e.name()).collect()
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnknownExperiment(pub String);

impl fmt::Display for UnknownExperiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "unknown experiment `{}`; valid names: {}", self.0, Experiment::names().join(", "))
    }
}

impl std::error::Error for UnknownExperiment {}

impl FromStr for Experiment {
    type Err = UnknownExperiment;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Self::ALL.into_iter().find(|e| e.name() == s).ok_or_else(|| UnknownExperiment(s.to_string()))
    }
}

/// Where an experiment wrote, plus its summary.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub dir: PathBuf,
    pub summary: Value,
}

pub fn run(exp: Experiment, cfg: &RunConfig, runs_root: &Path) -> Result<Outcome> {
    let dir = create_run_dir(runs_root, exp.name())?;
    cfg.save(&dir.join("config.toml"))?;
    let summary = match exp {
        Experiment::TokenizerAblation => tokenizer_ablation(cfg, &dir)?,
        Experiment::CorruptionAblation => corruption_ablation(cfg, &dir)?,
        Experiment::Crossroad => crossroad(cfg, &dir)?,
        Experiment::RlCompare => rl_compare(cfg, &dir)?,
        Experiment::Retrieval => retrieval(cfg, &dir)?,
        Experiment::Latency => latency(cfg, &dir)?,
    };
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(Outcome { dir, summary })
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct DepthRow {
    depth: usize,
    mpjpe_mm: f64,
    final_loss: f64,
}

/// Held-out reconstruction error per residual depth.
pub fn tokenizer_ablation(cfg: &RunConfig, dir: &Path) -> Result<Value> {
    let train = pipeline::synthesize(cfg)?;
    let test = pipeline::synthesize(&RunConfig {
        data: SyntheticDatasetSpec {
            clips_per_domain: cfg.data.clips_per_domain.div_ceil(4).max(1),
            seed: cfg.data.seed.wrapping_add(1),
            ..cfg.data.clone()
        },
        ..cfg.clone()
    })?;
    let mut rows = Vec::new();
    for &depth in &cfg.experiments.tokenizer_depths {
        let mut c = cfg.clone();
        c.tokenizer.model.rvq_depth = depth;
        let mut rng = seeded(cfg.seed);
        let mut last = f64::NAN;
        let tok = pipeline::train_tokenizer(&c, &train, &mut rng, &mut |_, l| last = l)?;
        let errs = test
            .examples
            .iter()
            .map(|e| {
                let r = tok.reconstruct(&e.motion)?;
                let n = r.len().min(e.motion.len());
                let cut = |m: &MotionClip| MotionClip { fps: m.fps, frames: m.frames.slice_rows(0, n) };
                mpjpe(&test.skeleton, &cut(&e.motion), &cut(&r))
            })
            .collect::<motionstream_core::error::Result<Vec<f64>>>()?;
        rows.push(DepthRow {
            depth,
            mpjpe_mm: 1000.0 * mean(&errs),
            final_loss: last,
        });
    }
    write_rows(&dir.join("tokenizer_ablation.csv"), &rows)?;
    let monotone = rows.windows(2).all(|w| w[1].mpjpe_mm <= w[0].mpjpe_mm * 1.05);
    Ok(json!({
        "experiment": "tokenizer-ablation",
        "mpjpe_mm": rows.iter().map(|r| json!({"depth": r.depth, "mpjpe_mm": r.mpjpe_mm})).collect::<Vec<_>>(),
        "deeper_is_not_worse": monotone,
    }))
}

#[derive(Serialize)]
struct CollapseRow {
    seed: u64,
    rate: f64,
    switch_accuracy: f64,
    matched_accuracy: f64,
    final_loss: f64,
}

/// Domain-switch accuracy of a clean-context model against a corrupted-context one.
pub fn corruption_ablation(cfg: &RunConfig, dir: &Path) -> Result<Value> {
    let base = &cfg.experiments.collapse;
    let rate = if base.rate > 0.0 { base.rate } else { 0.5 };
    let (clean, corrupted, rows) = collapse_seeds(base, rate, cfg.experiments.seeds, cfg.seed)?;
    write_rows(&dir.join("corruption_ablation.csv"), &rows)?;
    let gap = mean(&corrupted) - mean(&clean);
    Ok(json!({
        "experiment": "corruption-ablation",
        "rate": rate,
        "clean_switch_accuracy": mean(&clean),
        "corrupted_switch_accuracy": mean(&corrupted),
        "gap_pp": 100.0 * gap,
        "pass": gap >= 0.2,
    }))
}

fn collapse_seeds(base: &CollapseBenchmark, rate: f64, seeds: usize, seed0: u64) -> Result<(Vec<f64>, Vec<f64>, Vec<CollapseRow>)> {
    let (mut clean, mut corrupted, mut rows) = (Vec::new(), Vec::new(), Vec::new());
    for s in 0..seeds as u64 {
        for r in [0.0, rate] {
            let b = CollapseBenchmark {
                seed: seed0 + s,
                rate: r,
                ..base.clone()
            };
            let rep = collapse::run(&b)?;
            if r == 0.0 { &mut clean } else { &mut corrupted }.push(rep.switch_accuracy);
            rows.push(CollapseRow {
                seed: seed0 + s,
                rate: r,
                switch_accuracy: rep.switch_accuracy,
                matched_accuracy: rep.matched_accuracy,
                final_loss: rep.final_loss,
            });
        }
    }
    Ok((clean, corrupted, rows))
}

#[derive(Serialize)]
struct CrossroadRow {
    pi_k: f64,
    measured_logit: f64,
    rho: f64,
}

#[derive(Serialize)]
struct SlopeRow {
    seed: u64,
    rho: f64,
    slope: f64,
    uniform_spread: f64,
    recovery: f64,
    final_loss: f64,
}

/// Context logit against path prior, per corruption rate and seed.
pub fn crossroad(cfg: &RunConfig, dir: &Path) -> Result<Value> {
    let e = &cfg.experiments;
    let mut points = Vec::new();
    let mut slopes = Vec::new();
    for s in 0..e.seeds as u64 {
        for &rho in &e.crossroad_rates {
            let r = crossroad_train_and_probe(&e.crossroad_world, rho, &e.crossroad_training, cfg.seed + s)?;
            points.extend(r.points.iter().map(|&(pi_k, measured_logit)| CrossroadRow { pi_k, measured_logit, rho }));
            slopes.push(SlopeRow {
                seed: cfg.seed + s,
                rho,
                slope: r.slope,
                uniform_spread: r.uniform_spread,
                recovery: r.recovery,
                final_loss: r.final_loss,
            });
        }
    }
    write_rows(&dir.join("crossroad.csv"), &points)?;
    write_rows(&dir.join("crossroad_slopes.csv"), &slopes)?;
    let per_rate: Vec<Value> = e
        .crossroad_rates
        .iter()
        .map(|&rho| {
            let v: Vec<f64> = slopes.iter().filter(|s| s.rho == rho).map(|s| s.slope).collect();
            json!({"rho": rho, "mean_slope": mean(&v), "predicted": 1.0 - rho})
        })
        .collect();
    Ok(json!({"experiment": "crossroad", "slopes": per_rate}))
}

#[derive(Serialize)]
pub struct AlignRow {
    pub step: usize,
    pub loss: f64,
    pub mean_reward: f64,
    pub kl: f64,
}

pub fn align_rows(steps: &[AlignStep]) -> Vec<AlignRow> {
    steps
        .iter()
        .enumerate()
        .map(|(i, s)| AlignRow {
            step: i + 1,
            loss: s.loss,
            mean_reward: s.mean_reward,
            kl: s.kl,
        })
        .collect()
}

/// Trained models for alignment runs, built from the configured synthetic set.
pub struct Stack {
    pub data: pipeline::Dataset,
    pub tokenizer: Tokenizer,
    pub generator: Generator,
    pub quality: motionstream_core::rewards::QualityModel,
    pub aligner: motionstream_core::rewards::Aligner,
}

pub fn train_stack(cfg: &RunConfig, rng: &mut Rng) -> Result<Stack> {
    let data = pipeline::synthesize(cfg)?;
    let tokenizer = pipeline::train_tokenizer(cfg, &data, rng, &mut |_, _| {})?;
    let pairs = pipeline::tokenize_pairs(&tokenizer, &data, cfg.generator.model.audio_frames_per_chunk)?;
    let generator = pipeline::train_generator(cfg, &pairs, rng, &mut |_, _| {})?;
    let (quality, _) = pipeline::train_quality(cfg, &tokenizer, &data, rng)?;
    let aligner = pipeline::train_aligner(cfg, &data, rng, &mut |_, _| {})?;
    Ok(Stack {
        data,
        tokenizer,
        generator,
        quality,
        aligner,
    })
}

/// GRPO against DPO from the same starting generator and reward models.
pub fn rl_compare(cfg: &RunConfig, dir: &Path) -> Result<Value> {
    let mut rng = seeded(cfg.seed);
    let stack = train_stack(cfg, &mut rng)?;
    let rewards = RewardModels {
        tokenizer: &stack.tokenizer,
        quality: &stack.quality,
        aligner: &stack.aligner,
        weights: cfg.rewards.weights,
        fps: stack.data.examples.first().map(|e| e.motion.fps).unwrap_or(30.0),
    };
    let apc = cfg.generator.model.audio_frames_per_chunk;
    let prompts = pipeline::prompts(&stack.data, cfg.experiments.retrieval.window_chunks, apc);
    let eval_prompts: Vec<_> = prompts.iter().take(6).cloned().collect();
    let before = pipeline::mean_rollout_reward(&stack.generator, &rewards, &eval_prompts, 2, &mut seeded(cfg.seed ^ 0xE1))?;
    let mut summary = vec![];
    for method in [AlignMethod::Grpo, AlignMethod::Dpo] {
        let mut gen = stack.generator.clone();
        let mut r = seeded(cfg.seed ^ 0xA1);
        let steps = pipeline::align(cfg, method, &mut gen, &rewards, &prompts, &mut r, &mut |_, _| {})?;
        let name = format!("{method:?}").to_lowercase();
        write_rows(&dir.join(format!("align_{name}.csv")), &align_rows(&steps))?;
        let after = pipeline::mean_rollout_reward(&gen, &rewards, &eval_prompts, 2, &mut seeded(cfg.seed ^ 0xE1))?;
        summary.push(json!({"method": name, "reward_before": before, "reward_after": after}));
    }
    Ok(json!({"experiment": "rl-compare", "methods": summary}))
}

#[derive(Serialize)]
struct RetrievalRow {
    direction: &'static str,
    #[serde(rename = "R@1")]
    r1: f64,
    #[serde(rename = "R@3")]
    r3: f64,
    #[serde(rename = "R@5")]
    r5: f64,
    #[serde(rename = "R@10")]
    r10: f64,
    #[serde(rename = "MedR")]
    medr: f64,
    #[serde(rename = "MRR")]
    mrr: f64,
}

pub fn write_retrieval_csv(path: &Path, r: &RetrievalReport) -> Result<()> {
    let row = |direction, s: &motionstream_core::rewards::RetrievalScores| RetrievalRow {
        direction,
        r1: s.r1,
        r3: s.r3,
        r5: s.r5,
        r10: s.r10,
        medr: s.median_rank,
        mrr: s.mrr,
    };
    write_rows(path, &[row("A2M", &r.audio_to_motion), row("M2A", &r.motion_to_audio)])
}

pub fn retrieval(cfg: &RunConfig, dir: &Path) -> Result<Value> {
    let bench = motionstream_core::benchmarks::RetrievalBenchmark {
        seed: cfg.seed,
        ..cfg.experiments.retrieval.clone()
    };
    let (_, rep) = bench.run(&Skeleton::humanoid())?;
    write_retrieval_csv(&dir.join("retrieval.csv"), &rep.report)?;
    Ok(json!({
        "experiment": "retrieval",
        "gallery": rep.gallery,
        "a2m_r1": rep.report.audio_to_motion.r1,
        "m2a_r1": rep.report.motion_to_audio.r1,
        "chance_r1": rep.chance_r1,
        "pass": rep.report.audio_to_motion.r1 >= 7.8 && rep.gallery == 256,
    }))
}

#[derive(Serialize)]
pub struct LatencyRow {
    pub step: usize,
    pub stage: &'static str,
    pub ms: f64,
}

pub fn write_latency_csv(path: &Path, stamps: &[[f64; 4]]) -> Result<()> {
    let rows: Vec<LatencyRow> = latency_rows(stamps).into_iter().map(|(step, stage, ms)| LatencyRow { step, stage, ms }).collect();
    write_rows(path, &rows)
}

pub fn pretty_latency(r: &LatencyReport) -> String {
    let mut s = format!("{:<18} {:>10} {:>10}\n", "stage", "mean_ms", "std_ms");
    for st in &r.stages {
        s.push_str(&format!("{:<18} {:>10.2} {:>10.2}\n", st.stage, st.mean_ms, st.std_ms));
    }
    s.push_str(&format!("{:<18} {:>10.2} {:>10.2}\n", "total", r.total_ms, r.total_std_ms));
    s.push_str(&format!("budget {BUDGET_MS} ms over {} steps: {}\n", r.steps, if r.violation { "EXCEEDED" } else { "ok" }));
    s
}

/// Engine built from freshly initialised models of the configured sizes.
pub fn desk_engine(cfg: &RunConfig) -> Result<StreamEngine> {
    let skeleton = Skeleton::humanoid();
    let mut rng = seeded(cfg.seed);
    let tok = Tokenizer::new(cfg.tokenizer.model.clone(), skeleton.num_joints(), &mut rng)?;
    let gen = Generator::new(cfg.generator.model.clone(), &mut rng)?;
    let mut guard = CylinderGuard::humanoid(&skeleton)?;
    guard.radii = cfg.streaming.guard_radii;
    Ok(StreamEngine::new(gen, tok, skeleton, guard, cfg.streaming.stream)?)
}

/// Synthetic waveform samples of one domain.
pub fn synthetic_samples(class: AudioClass, seconds: f64, seed: u64) -> Vec<f32> {
    let mut rng = seeded(seed);
    let params = AudioParams::random(class, &mut rng);
    let events = motionstream_core::audio::event_times(&params, seconds, &mut rng);
    synth_audio(&params, &events, seconds, &mut rng).samples
}

pub fn latency(cfg: &RunConfig, dir: &Path) -> Result<Value> {
    let mut engine = desk_engine(cfg)?;
    let samples = synthetic_samples(AudioClass::Music, 4.0, cfg.seed);
    let (report, stamps) = latency_profile(&mut engine, &samples, cfg.streaming.profile_steps, &mut WallClock::new())?;
    write_latency_csv(&dir.join("latency.csv"), &stamps)?;
    fs::write(dir.join("latency.txt"), pretty_latency(&report))?;
    if report.stages.len() != STAGES.len() {
        bail!("latency report lacks stages");
    }
    Ok(json!({
        "experiment": "latency",
        "steps": report.steps,
        "mean_total_ms": report.total_ms,
        "std_total_ms": report.total_std_ms,
        "stages": report.stages.iter().map(|s| json!({"stage": s.stage, "mean_ms": s.mean_ms, "std_ms": s.std_ms})).collect::<Vec<_>>(),
        "frames_for_60s": frames_for_seconds(60.0),
        "pass": !report.violation,
    }))
}
