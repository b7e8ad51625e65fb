//! Command-line front end.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use motionstream_core::audio::{AudioClass, AudioTokens};
use motionstream_core::corruption::{corrupt, CorruptionMode, CorruptionSpec};
use motionstream_core::kinematics::{MotionClip, Skeleton};
use motionstream_core::rewards::retrieval_eval;
use motionstream_core::seeded;
use motionstream_core::streaming::{latency_rows, CylinderGuard, LatencyReport, StreamEngine, CHUNK_SAMPLES};
use motionstream_core::synthetic::{FRAMES_PER_CHUNK, MOTION_FPS};
use motionstream_core::tensor::Tensor;

use crate::config::RunConfig;
use crate::experiments::{self, align_rows, pretty_latency, synthetic_samples, write_latency_csv, write_retrieval_csv, Experiment};
use crate::formats::{read_audio, read_motion, read_tokens, write_motion, write_tokens, MOTION_EXT};
use crate::models::*;
use crate::pipeline::{self, AlignMethod, RewardModels};
use crate::WallClock;

#[derive(Debug, Parser)]
#[command(name = "motionstream", version, about = "Streaming audio-driven motion generation")]
pub struct Cli {
    /// TOML run configuration; `MOTIONSTREAM_<SECTION>__<KEY>` variables override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run every stage on one thread (the default build never spawns more).
    #[arg(long, global = true)]
    pub single_thread: bool,
    /// Root for experiment outputs.
    #[arg(long, global = true, default_value = "runs")]
    pub runs: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic paired dataset (motion, audio tokens, beats, manifest).
    GenData(GenData),
    /// Fit the motion tokenizer (encoder, residual codebooks, decoder).
    TrainTokenizer(TrainTokenizer),
    /// Fit the token generator on tokenized pairs, optionally with corruption.
    TrainGenerator(TrainGenerator),
    /// Train the quality model and the audio/motion aligner.
    TrainReward(TrainReward),
    /// Preference alignment of a generator against the composite reward.
    Align(Align),
    /// Offline generation for one audio token file.
    Generate(Generate),
    /// Chunk-by-chunk causal generation with per-stage timing.
    Stream(Stream),
    /// Metric table (FID, diversity, beat alignment) over generated clips.
    Evaluate(Evaluate),
    /// Corrupt a token file.
    Corrupt(Corrupt),
    /// Run a named experiment into runs/<name>/<timestamp>/.
    Experiment(ExperimentArgs),
    /// Retrieval metrics of an aligner on a dataset.
    EvalRetrieval(EvalRetrieval),
    /// Print the effective configuration.
    ShowConfig,
}

#[derive(Debug, Args)]
pub struct GenData {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub clips_per_domain: Option<usize>,
    #[arg(long)]
    pub seconds: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainTokenizer {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Also write the codebooks as a standalone file.
    #[arg(long)]
    pub codebooks: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainGenerator {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub tokenizer: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, value_enum)]
    pub corruption: Option<ModeArg>,
    #[arg(long)]
    pub rate: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainReward {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub tokenizer: PathBuf,
    #[arg(long)]
    pub quality_out: PathBuf,
    #[arg(long)]
    pub aligner_out: PathBuf,
}

#[derive(Debug, Args)]
pub struct Align {
    #[arg(long, value_enum)]
    pub method: AlignMethod,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub generator: PathBuf,
    #[arg(long)]
    pub tokenizer: PathBuf,
    #[arg(long)]
    pub quality: PathBuf,
    #[arg(long)]
    pub aligner: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// KL weight (GRPO) or preference temperature (DPO).
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub group_size: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Per-step CSV (step, loss, mean_reward, kl).
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Generate {
    #[arg(long)]
    pub generator: PathBuf,
    #[arg(long)]
    pub tokenizer: PathBuf,
    /// Audio token file.
    #[arg(long)]
    pub audio: PathBuf,
    /// Token file whose first layer is used as a style exemplar.
    #[arg(long)]
    pub exemplar: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub tokens_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Stream {
    /// Audio token file, or `synthetic:<silence|speech|music>:<seconds>[:seed]`.
    #[arg(long)]
    pub input: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-step stage timings as CSV (step, stage, ms).
    #[arg(long)]
    pub profile: Option<PathBuf>,
    /// Trained models; fresh models of the configured size otherwise.
    #[arg(long, requires = "tokenizer")]
    pub generator: Option<PathBuf>,
    #[arg(long, requires = "generator")]
    pub tokenizer: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Evaluate {
    /// Directory of generated motion files.
    #[arg(long)]
    pub generated: PathBuf,
    /// Dataset directory of reference motion (for FID).
    #[arg(long)]
    pub real: Option<PathBuf>,
    /// Directory holding `<stem>.beats.csv` for each generated `<stem>.msm`.
    #[arg(long)]
    pub beats: Option<PathBuf>,
    /// Tokenizer whose encoder supplies FID features.
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Uniform,
    Hierarchical,
}

impl From<ModeArg> for CorruptionMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Uniform => CorruptionMode::Uniform,
            ModeArg::Hierarchical => CorruptionMode::Hierarchical,
        }
    }
}

#[derive(Debug, Args)]
pub struct Corrupt {
    #[arg(long, value_enum)]
    pub mode: ModeArg,
    #[arg(long)]
    pub rate: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    pub name: String,
    #[arg(long)]
    pub seeds: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalRetrieval {
    #[arg(long)]
    pub aligner: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Window length in chunks; defaults to the configured one.
    #[arg(long)]
    pub chunks: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Usage-level failure (bad names, missing inputs); exits with code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn load_config(cli: &Cli) -> Result<RunConfig> {
    let base = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut cfg = base.with_env()?;
    cfg.single_thread |= cli.single_thread;
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::GenData(a) => gen_data(cfg, a),
        Command::TrainTokenizer(a) => train_tokenizer(cfg, a),
        Command::TrainGenerator(a) => train_generator(cfg, a),
        Command::TrainReward(a) => train_reward(cfg, a),
        Command::Align(a) => align(cfg, a),
        Command::Generate(a) => generate(cfg, a),
        Command::Stream(a) => stream(cfg, a),
        Command::Evaluate(a) => evaluate(cfg, a),
        Command::Corrupt(a) => corrupt_cmd(a),
        Command::Experiment(a) => experiment(cfg, a, &cli.runs),
        Command::EvalRetrieval(a) => eval_retrieval(cfg, a),
        Command::ShowConfig => {
            print!("{}", cfg.to_toml()?);
            Ok(())
        }
    }
}

fn gen_data(mut cfg: RunConfig, a: GenData) -> Result<()> {
    if let Some(n) = a.clips_per_domain {
        cfg.data.clips_per_domain = n;
    }
    if let Some(s) = a.seconds {
        cfg.data.seconds = s;
    }
    if let Some(s) = a.seed {
        cfg.data.seed = s;
    }
    let data = pipeline::synthesize(&cfg)?;
    let m = pipeline::write_dataset(&a.out, &data, cfg.data.seed)?;
    println!("wrote {} clips to {}", m.entries.len(), a.out.display());
    Ok(())
}

fn train_tokenizer(mut cfg: RunConfig, a: TrainTokenizer) -> Result<()> {
    if let Some(s) = a.steps {
        cfg.tokenizer.steps = s;
    }
    let data = pipeline::read_dataset(&a.data)?;
    let mut rng = seeded(cfg.seed);
    let every = (cfg.tokenizer.steps / 10).max(1);
    let tok = pipeline::train_tokenizer(&cfg, &data, &mut rng, &mut |s, l| {
        if (s + 1) % every == 0 {
            println!("step {:>5} loss {l:.5}", s + 1);
        }
    })?;
    save_tokenizer(&a.out, &tok)?;
    if let Some(p) = a.codebooks {
        crate::formats::write_codebooks(&p, &tok.codebooks)?;
    }
    Ok(())
}

fn train_generator(mut cfg: RunConfig, a: TrainGenerator) -> Result<()> {
    if let Some(s) = a.steps {
        cfg.generator.steps = s;
    }
    if let Some(m) = a.corruption {
        cfg.generator.corruption = m.into();
    }
    if let Some(r) = a.rate {
        cfg.generator.corruption_rate = r;
    }
    let data = pipeline::read_dataset(&a.data)?;
    let tok = load_tokenizer(&a.tokenizer)?;
    sync_generator_layout(&mut cfg, &tok);
    let pairs = pipeline::tokenize_pairs(&tok, &data, cfg.generator.model.audio_frames_per_chunk)?;
    let mut rng = seeded(cfg.seed);
    let every = (cfg.generator.steps / 10).max(1);
    let gen = pipeline::train_generator(&cfg, &pairs, &mut rng, &mut |s, l| {
        if (s + 1) % every == 0 {
            println!("step {:>5} loss {l:.5}", s + 1);
        }
    })?;
    save_generator(&a.out, &gen)?;
    Ok(())
}

/// The generator's motion vocabulary follows the tokenizer it is paired with.
fn sync_generator_layout(cfg: &mut RunConfig, tok: &motionstream_core::tokenizer::Tokenizer) {
    let m = &mut cfg.generator.model;
    m.motion_layers = tok.config.rvq_depth;
    m.parts = tok.num_parts();
    m.codebook_size = tok.config.codebook_size;
    m.steps_per_chunk = (FRAMES_PER_CHUNK / tok.config.downsample_ratio).max(1);
}

fn train_reward(cfg: RunConfig, a: TrainReward) -> Result<()> {
    let data = pipeline::read_dataset(&a.data)?;
    let tok = load_tokenizer(&a.tokenizer)?;
    let mut rng = seeded(cfg.seed);
    let (quality, qloss) = pipeline::train_quality(&cfg, &tok, &data, &mut rng)?;
    println!("quality final loss {qloss:.5}");
    save_quality(&a.quality_out, &quality)?;
    let mut last = f64::NAN;
    let aligner = pipeline::train_aligner(&cfg, &data, &mut rng, &mut |_, l| last = l)?;
    println!("aligner final loss {last:.5}");
    save_aligner(&a.aligner_out, &aligner)?;
    Ok(())
}

fn align(mut cfg: RunConfig, a: Align) -> Result<()> {
    if let Some(b) = a.beta {
        match a.method {
            AlignMethod::Grpo => cfg.rl.align.grpo_beta = b,
            AlignMethod::Dpo => cfg.rl.align.dpo_beta = b,
        }
    }
    if let Some(g) = a.group_size {
        cfg.rl.align.group_size = g;
        cfg.rl.align.candidates = g;
    }
    if let Some(s) = a.steps {
        cfg.rl.steps = s;
    }
    let data = pipeline::read_dataset(&a.data)?;
    let tok = load_tokenizer(&a.tokenizer)?;
    let quality = load_quality(&a.quality)?;
    let aligner = load_aligner(&a.aligner)?;
    let mut gen = load_generator(&a.generator)?;
    let rewards = RewardModels {
        tokenizer: &tok,
        quality: &quality,
        aligner: &aligner,
        weights: cfg.rewards.weights,
        fps: MOTION_FPS,
    };
    let prompts = pipeline::prompts(&data, gen.config.window_chunks, gen.config.audio_frames_per_chunk);
    let mut rng = seeded(cfg.seed);
    let steps = pipeline::align(&cfg, a.method, &mut gen, &rewards, &prompts, &mut rng, &mut |i, s| {
        println!("step {:>4} loss {:.5} reward {:.5} kl {:.5}", i + 1, s.loss, s.mean_reward, s.kl);
    })?;
    if let Some(p) = &a.log {
        let mut w = csv::Writer::from_path(p)?;
        for r in align_rows(&steps) {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    save_generator(&a.out, &gen)?;
    Ok(())
}

fn generate(cfg: RunConfig, a: Generate) -> Result<()> {
    let gen = load_generator(&a.generator)?;
    let tok = load_tokenizer(&a.tokenizer)?;
    let audio = read_audio(&a.audio)?;
    let exemplar = match &a.exemplar {
        Some(p) => {
            let g = read_tokens(p)?;
            let n = gen.config.exemplar_steps.min(g.steps);
            Some(g.slice_steps(0, n))
        }
        None => None,
    };
    let apc = gen.config.audio_frames_per_chunk;
    let usable = audio.frames() / apc * apc;
    if usable == 0 {
        return Err(UsageError(format!("audio must hold at least one chunk ({apc} frames)")).into());
    }
    let temperature = a.temperature.unwrap_or(cfg.generator.temperature);
    let mut session = gen.session(exemplar, temperature, cfg.generator.top_k, a.seed);
    let grid = gen.generate(&mut session, &audio.slice_frames(0, usable))?;
    let motion = tok.decode(&grid, MOTION_FPS)?;
    write_motion(&a.out, &Skeleton::humanoid(), &motion)?;
    if let Some(p) = &a.tokens_out {
        write_tokens(p, &grid)?;
    }
    println!("wrote {} frames to {}", motion.len(), a.out.display());
    Ok(())
}

enum StreamSource {
    Tokens(AudioTokens),
    Samples(Vec<f32>),
}

fn parse_stream_input(s: &str) -> Result<StreamSource> {
    if let Some(rest) = s.strip_prefix("synthetic:") {
        let parts: Vec<&str> = rest.split(':').collect();
        let class = parts.first().and_then(|c| AudioClass::parse(c)).ok_or_else(|| UsageError(format!("bad synthetic domain in `{s}`")))?;
        let seconds: f64 = parts.get(1).and_then(|v| v.parse().ok()).ok_or_else(|| UsageError(format!("bad duration in `{s}`")))?;
        let seed: u64 = parts.get(2).map(|v| v.parse()).transpose().map_err(|_| UsageError(format!("bad seed in `{s}`")))?.unwrap_or(0);
        return Ok(StreamSource::Samples(synthetic_samples(class, seconds, seed)));
    }
    Ok(StreamSource::Tokens(read_audio(Path::new(s))?))
}

fn stream(cfg: RunConfig, a: Stream) -> Result<()> {
    let mut engine = match (&a.generator, &a.tokenizer) {
        (Some(g), Some(t)) => {
            let skeleton = Skeleton::humanoid();
            let mut guard = CylinderGuard::humanoid(&skeleton)?;
            guard.radii = cfg.streaming.guard_radii;
            StreamEngine::new(load_generator(g)?, load_tokenizer(t)?, skeleton, guard, cfg.streaming.stream)?
        }
        _ => experiments::desk_engine(&cfg)?,
    };
    let source = parse_stream_input(&a.input)?;
    let mut clock = WallClock::new();
    engine.warm_up(&mut clock)?;
    let apc = engine.generator.config.audio_frames_per_chunk;
    let mut frames: Vec<Tensor> = Vec::new();
    let mut stamps = Vec::new();
    match source {
        StreamSource::Tokens(audio) => {
            for c in 0..audio.frames() / apc {
                let chunk = engine.step_tokens(audio.slice_frames(c * apc, apc), &mut clock)?;
                stamps.push(chunk.stamps);
                frames.push(chunk.frames);
            }
        }
        StreamSource::Samples(samples) => {
            for chunk in samples.chunks_exact(CHUNK_SAMPLES) {
                let c = engine.step(chunk, &mut clock)?;
                stamps.push(c.stamps);
                frames.push(c.frames);
            }
        }
    }
    if frames.is_empty() {
        return Err(UsageError("input holds less than one chunk".into()).into());
    }
    let refs: Vec<&Tensor> = frames.iter().collect();
    let clip = MotionClip::new(MOTION_FPS, Tensor::concat_rows(&refs))?;
    write_motion(&a.out, &engine.skeleton, &clip)?;
    if let Some(p) = &a.profile {
        write_latency_csv(p, &stamps)?;
    }
    println!("streamed {} chunks, {} frames", frames.len(), clip.len());
    if stamps.len() >= 2 {
        print!("{}", pretty_latency(&LatencyReport::from_stamps(&stamps)?));
    } else {
        for (step, stage, ms) in latency_rows(&stamps) {
            println!("step {step} {stage} {ms:.2} ms");
        }
    }
    Ok(())
}

fn evaluate(cfg: RunConfig, a: Evaluate) -> Result<()> {
    let files = pipeline::files_with_ext(&a.generated, MOTION_EXT)?;
    if files.is_empty() {
        return Err(UsageError(format!("no .{MOTION_EXT} files in {}", a.generated.display())).into());
    }
    let mut skeleton = None;
    let mut generated = Vec::new();
    let mut beats = Vec::new();
    for f in &files {
        let m = read_motion(f)?;
        skeleton.get_or_insert(m.skeleton);
        generated.push(m.clip);
        if let Some(dir) = &a.beats {
            let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            beats.push(pipeline::read_beats(&dir.join(format!("{stem}.beats.csv")))?);
        }
    }
    let real: Vec<MotionClip> = match &a.real {
        Some(d) => pipeline::read_dataset(d)?.examples.into_iter().map(|e| e.motion).collect(),
        None => Vec::new(),
    };
    let tok = a.tokenizer.as_deref().map(load_tokenizer).transpose()?;
    let rows = pipeline::evaluate(skeleton.as_ref().context("no skeleton")?, &generated, &beats, &real, tok.as_ref(), cfg.metrics.sigma)?;
    print!("{}", pipeline::pretty_metrics(&rows));
    if let Some(p) = &a.out {
        pipeline::write_metric_csv(p, &rows)?;
    }
    Ok(())
}

fn corrupt_cmd(a: Corrupt) -> Result<()> {
    let grid = read_tokens(&a.input)?;
    let spec = CorruptionSpec::new(a.mode.into(), a.rate, a.seed)?;
    write_tokens(&a.out, &corrupt(&grid, &spec)?)?;
    Ok(())
}

fn experiment(mut cfg: RunConfig, a: ExperimentArgs, runs: &Path) -> Result<()> {
    let exp: Experiment = a.name.parse().map_err(|e: experiments::UnknownExperiment| UsageError(e.to_string()))?;
    if let Some(s) = a.seeds {
        cfg.experiments.seeds = s;
    }
    let out = experiments::run(exp, &cfg, runs)?;
    println!("{}", serde_json::to_string_pretty(&out.summary)?);
    println!("results in {}", out.dir.display());
    Ok(())
}

fn eval_retrieval(cfg: RunConfig, a: EvalRetrieval) -> Result<()> {
    let model = load_aligner(&a.aligner)?;
    let data = pipeline::read_dataset(&a.data)?;
    let chunks = a.chunks.unwrap_or(cfg.experiments.retrieval.window_chunks);
    // One window per clip keeps the gallery free of duplicates.
    let mut seen = std::collections::HashSet::new();
    let pairs: Vec<_> = pipeline::align_pairs(&data, chunks, cfg.generator.model.audio_frames_per_chunk)
        .into_iter()
        .filter(|p| seen.insert(p.key / 10_000))
        .collect();
    if pairs.len() < 2 {
        bail!("need at least two clips for retrieval");
    }
    let audio = model.embed_audio(&pairs.iter().map(|p| &p.audio).collect::<Vec<_>>())?;
    let motion = model.embed_motion(&pairs.iter().map(|p| &p.motion).collect::<Vec<_>>())?;
    let pairing: Vec<usize> = (0..pairs.len()).collect();
    let report = retrieval_eval(&audio, &motion, &pairing)?;
    let s = |n: &str, r: &motionstream_core::rewards::RetrievalScores| {
        format!("{n:<4} R@1 {:>6.2} R@3 {:>6.2} R@5 {:>6.2} R@10 {:>6.2} MedR {:>6.1} MRR {:.4}\n", r.r1, r.r3, r.r5, r.r10, r.median_rank, r.mrr)
    };
    print!("gallery {}\n{}{}", pairs.len(), s("A2M", &report.audio_to_motion), s("M2A", &report.motion_to_audio));
    if let Some(p) = &a.out {
        write_retrieval_csv(p, &report)?;
    }
    Ok(())
}
