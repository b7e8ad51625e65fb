//! Dataset IO and the training/evaluation steps shared by CLI commands and
//! experiments.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use motionstream_core::audio::{AudioClass, AudioTokens};
use motionstream_core::generator::{sample_training_windows, Generator, GeneratorTrainer};
use motionstream_core::kinematics::{forward_kinematics, mirror_clip, MotionClip, Skeleton};
use motionstream_core::metrics::{ba_dance, ba_gesture_from_positions, fid, l1_diversity, BeatSet};
use motionstream_core::benchmarks::QualityBenchmark;
use motionstream_core::rewards::{AlignPair, Aligner, AlignerTrainer, QualityModel};
use motionstream_core::rl::{composite_reward, rollout, AlignStep, AlignTrainer, RewardWeights};
use motionstream_core::synthetic::{generate_dataset, FRAMES_PER_CHUNK};
use motionstream_core::tensor::Tensor;
use motionstream_core::tokenizer::{sample_windows, TokenGrid, Tokenizer, TokenizerTrainer};
use motionstream_core::Rng;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::formats::{read_audio, read_motion, write_audio, write_motion, AUDIO_EXT, MOTION_EXT};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: usize,
    /// Stored for evaluation only; never fed to a model.
    pub domain: AudioClass,
    pub motion: String,
    pub audio: String,
    pub beats: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: usize,
    pub domain: AudioClass,
    pub motion: MotionClip,
    pub audio: AudioTokens,
    pub beats: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub skeleton: Skeleton,
    pub examples: Vec<Example>,
}

/// Generates the configured synthetic set in memory.
pub fn synthesize(cfg: &RunConfig) -> Result<Dataset> {
    let skeleton = Skeleton::humanoid();
    let clips = generate_dataset(&skeleton, &cfg.data)?;
    let examples = clips
        .into_iter()
        .map(|c| Example {
            id: c.id,
            domain: c.params.class,
            motion: c.motion,
            audio: c.audio,
            beats: c.events,
        })
        .collect();
    Ok(Dataset { skeleton, examples })
}

pub fn write_beats(path: &Path, beats: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["time_s"])?;
    for b in beats {
        w.write_record([format!("{b}")])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_beats(path: &Path) -> Result<Vec<f64>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let v: f64 = rec.get(0).unwrap_or("").trim().parse().with_context(|| format!("bad beat time in {}", path.display()))?;
        out.push(v);
    }
    Ok(out)
}

/// Writes motion, audio-token and beat files plus a manifest.
pub fn write_dataset(dir: &Path, data: &Dataset, seed: u64) -> Result<Manifest> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut entries = Vec::with_capacity(data.examples.len());
    for e in &data.examples {
        let stem = format!("clip_{:05}", e.id);
        let motion = format!("{stem}.{MOTION_EXT}");
        let audio = format!("{stem}.{AUDIO_EXT}");
        let beats = format!("{stem}.beats.csv");
        write_motion(&dir.join(&motion), &data.skeleton, &e.motion)?;
        write_audio(&dir.join(&audio), &e.audio)?;
        write_beats(&dir.join(&beats), &e.beats)?;
        entries.push(ManifestEntry {
            id: e.id,
            domain: e.domain,
            motion,
            audio,
            beats,
        });
    }
    let manifest = Manifest { seed, entries };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST);
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?)
        .with_context(|| format!("parsing {}", path.display()))?;
    let mut skeleton = Skeleton::humanoid();
    let mut examples = Vec::with_capacity(manifest.entries.len());
    for (i, e) in manifest.entries.iter().enumerate() {
        let m = read_motion(&dir.join(&e.motion))?;
        if i == 0 {
            skeleton = m.skeleton.clone();
        } else if m.skeleton.parents != skeleton.parents {
            bail!("{} uses a different skeleton", e.motion);
        }
        examples.push(Example {
            id: e.id,
            domain: e.domain,
            motion: m.clip,
            audio: read_audio(&dir.join(&e.audio))?,
            beats: read_beats(&dir.join(&e.beats))?,
        });
    }
    Ok(Dataset { skeleton, examples })
}

// ---------------------------------------------------------------------------
// Training steps

pub fn train_tokenizer(cfg: &RunConfig, data: &Dataset, rng: &mut Rng, log: &mut dyn FnMut(usize, f64)) -> Result<Tokenizer> {
    let s = &cfg.tokenizer;
    let clips: Vec<MotionClip> = data.examples.iter().map(|e| e.motion.clone()).collect();
    let window = s.window.max(s.model.downsample_ratio);
    let mut tok = Tokenizer::new(s.model.clone(), data.skeleton.num_joints(), rng)?;
    let mut trainer = TokenizerTrainer::new(&tok);
    for step in 0..s.steps {
        let batch = sample_windows(&clips, window, s.batch, rng);
        if batch.is_empty() {
            bail!("no clip is at least {window} frames long");
        }
        let l = trainer.step(&mut tok, &data.skeleton, &batch, rng)?;
        log(step, l.total);
        if (step + 1) % 50 == 0 {
            trainer.end_epoch(&mut tok, rng);
        }
    }
    Ok(tok)
}

/// Paired (audio, motion tokens) per example, cut to whole chunks.
pub fn tokenize_pairs(tok: &Tokenizer, data: &Dataset, audio_per_chunk: usize) -> Result<Vec<(AudioTokens, TokenGrid)>> {
    data.examples
        .iter()
        .map(|e| {
            let chunks = (e.motion.len() / FRAMES_PER_CHUNK).min(e.audio.frames() / audio_per_chunk);
            let motion = MotionClip {
                fps: e.motion.fps,
                frames: e.motion.frames.slice_rows(0, chunks * FRAMES_PER_CHUNK),
            };
            Ok((e.audio.slice_frames(0, chunks * audio_per_chunk), tok.tokenize(&motion)?))
        })
        .collect()
}

pub fn train_generator(cfg: &RunConfig, pairs: &[(AudioTokens, TokenGrid)], rng: &mut Rng, log: &mut dyn FnMut(usize, f64)) -> Result<Generator> {
    let s = &cfg.generator;
    let mut gen = Generator::new(s.model.clone(), rng)?;
    let corruption = (s.corruption_rate > 0.0).then_some((s.corruption, s.corruption_rate));
    let mut trainer = GeneratorTrainer::new(&gen, corruption);
    for step in 0..s.steps {
        let windows = sample_training_windows(&s.model, pairs, s.batch, s.exemplar_prob, rng)?;
        log(step, trainer.step(&mut gen, &windows, rng)?.total);
    }
    Ok(gen)
}

/// Quality regressor on clean, reconstructed and corrupted windows.
pub fn train_quality(cfg: &RunConfig, tok: &Tokenizer, data: &Dataset, rng: &mut Rng) -> Result<(QualityModel, f64)> {
    let r = &cfg.rewards;
    let bench = QualityBenchmark {
        quality: r.quality.clone(),
        table: r.table.clone(),
        steps: r.quality_steps,
        batch: r.batch,
        ..cfg.experiments.quality.clone()
    };
    let clips: Vec<MotionClip> = data.examples.iter().map(|e| e.motion.clone()).collect();
    let longest = clips.iter().map(|c| c.len()).max().unwrap_or(0);
    let windows = sample_windows(&clips, r.quality.window.min(longest), clips.len(), rng);
    if windows.is_empty() {
        bail!("no training windows for the quality model");
    }
    let families = windows.iter().map(|c| bench.family(tok, c, rng)).collect::<motionstream_core::error::Result<Vec<_>>>()?;
    Ok(bench.train(&data.skeleton, &families, rng)?)
}

/// Audio/motion windows of `chunks` chunks; the key names clip and window.
pub fn align_pairs(data: &Dataset, chunks: usize, audio_per_chunk: usize) -> Vec<AlignPair> {
    let mut out = Vec::new();
    for e in &data.examples {
        let n = (e.motion.len() / FRAMES_PER_CHUNK).min(e.audio.frames() / audio_per_chunk);
        for w in 0..n / chunks.max(1) {
            out.push(AlignPair {
                audio: e.audio.slice_frames(w * chunks * audio_per_chunk, chunks * audio_per_chunk),
                motion: MotionClip {
                    fps: e.motion.fps,
                    frames: e.motion.frames.slice_rows(w * chunks * FRAMES_PER_CHUNK, chunks * FRAMES_PER_CHUNK),
                },
                key: e.id * 10_000 + w,
            });
        }
    }
    out
}

pub fn train_aligner(cfg: &RunConfig, data: &Dataset, rng: &mut Rng, log: &mut dyn FnMut(usize, f64)) -> Result<Aligner> {
    let r = &cfg.rewards;
    let apc = cfg.generator.model.audio_frames_per_chunk;
    let pairs = align_pairs(data, cfg.experiments.retrieval.window_chunks, apc);
    let first = pairs.first().context("no aligner training windows")?;
    let mut model = Aligner::new(r.aligner.clone(), data.skeleton.frame_dim(), first.audio.layers, first.audio.codebook_size, rng)?;
    let mut trainer = AlignerTrainer::new(&model);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for step in 0..r.aligner_steps {
        let (picked, _) = order.partial_shuffle(rng, r.batch.max(2));
        let mut batch = Vec::with_capacity(2 * picked.len());
        for &i in picked.iter() {
            let p = &pairs[i];
            if rng.gen_bool(0.5) {
                batch.push(AlignPair {
                    motion: mirror_clip(&data.skeleton, &p.motion),
                    ..p.clone()
                });
            }
            batch.push(p.clone());
        }
        log(step, trainer.step(&mut model, &batch)?);
    }
    Ok(model)
}

/// Composite reward of a rollout: quality and alignment of its decoded motion.
pub struct RewardModels<'a> {
    pub tokenizer: &'a Tokenizer,
    pub quality: &'a QualityModel,
    pub aligner: &'a Aligner,
    pub weights: RewardWeights,
    pub fps: f64,
}

impl RewardModels<'_> {
    pub fn reward(&self, audio: &AudioTokens, grid: &TokenGrid) -> motionstream_core::error::Result<f64> {
        let motion = self.tokenizer.decode(grid, self.fps)?;
        let q = self.quality.score(&motion)?;
        let a = self.aligner.reward(audio, &motion)?;
        Ok(composite_reward(q, a, self.weights))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum AlignMethod {
    Grpo,
    Dpo,
}

/// Runs `steps` alignment steps; each step draws fresh prompts.
pub fn align(
    cfg: &RunConfig,
    method: AlignMethod,
    gen: &mut Generator,
    rewards: &RewardModels,
    prompts: &[AudioTokens],
    rng: &mut Rng,
    log: &mut dyn FnMut(usize, &AlignStep),
) -> Result<Vec<AlignStep>> {
    if prompts.is_empty() {
        bail!("no prompts");
    }
    let reference = gen.clone();
    let mut trainer = AlignTrainer::new(cfg.rl.align);
    let mut reward = |a: &AudioTokens, g: &TokenGrid| rewards.reward(a, g);
    let mut out = Vec::with_capacity(cfg.rl.steps);
    for step in 0..cfg.rl.steps {
        let batch: Vec<AudioTokens> = (0..cfg.rl.prompts.max(1)).map(|_| prompts[rng.gen_range(0..prompts.len())].clone()).collect();
        let s = match method {
            AlignMethod::Grpo => trainer.grpo_step(gen, &reference, &batch, &mut reward, rng)?,
            AlignMethod::Dpo => {
                let pairs = trainer.build_preference_pairs(gen, &batch, &mut reward, rng)?;
                if pairs.is_empty() {
                    AlignStep {
                        loss: f64::NAN,
                        mean_reward: f64::NAN,
                        kl: f64::NAN,
                    }
                } else {
                    trainer.dpo_step(gen, &reference, &pairs)?
                }
            }
        };
        log(step, &s);
        out.push(s);
    }
    Ok(out)
}

/// Prompts: the first `chunks` chunks of every example's audio.
pub fn prompts(data: &Dataset, chunks: usize, audio_per_chunk: usize) -> Vec<AudioTokens> {
    data.examples
        .iter()
        .filter(|e| e.audio.frames() >= chunks * audio_per_chunk)
        .map(|e| e.audio.slice_frames(0, chunks * audio_per_chunk))
        .collect()
}

pub fn mean_rollout_reward(gen: &Generator, rewards: &RewardModels, prompts: &[AudioTokens], per_prompt: usize, rng: &mut Rng) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for p in prompts {
        for _ in 0..per_prompt {
            let y = rollout(gen, p, rng.gen())?;
            total += rewards.reward(p, &y)?;
            n += 1;
        }
    }
    Ok(total / n.max(1) as f64)
}

// ---------------------------------------------------------------------------
// Evaluation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub value: f64,
    /// Value as printed in the results table (after `scale`).
    pub reported: f64,
    pub scale: String,
}

impl MetricRow {
    fn new(metric: &str, value: f64, factor: f64, scale: &str) -> Self {
        Self {
            metric: metric.into(),
            value,
            reported: value * factor,
            scale: scale.into(),
        }
    }
}

/// FID (tokenizer features, when a tokenizer is given), diversity and both
/// beat-alignment scores over generated clips with their audio beat sets.
pub fn evaluate(
    skeleton: &Skeleton,
    generated: &[MotionClip],
    beats: &[Vec<f64>],
    real: &[MotionClip],
    tokenizer: Option<&Tokenizer>,
    sigma: f64,
) -> Result<Vec<MetricRow>> {
    if generated.is_empty() {
        bail!("no generated clips to evaluate");
    }
    let mut rows = Vec::new();
    if let Some(tok) = tokenizer.filter(|_| !real.is_empty()) {
        let feats = |clips: &[MotionClip]| -> Result<Tensor> {
            let rows: Vec<Vec<f64>> = clips.iter().map(|c| tok.features(c)).collect::<motionstream_core::error::Result<_>>()?;
            let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
            Ok(Tensor::from_rows(&refs))
        };
        let f = fid(&feats(real)?, &feats(generated)?)?;
        rows.push(MetricRow::new("FID", f, 1.0, "x1"));
    }
    let positions = generated.iter().map(|c| forward_kinematics(skeleton, c)).collect::<motionstream_core::error::Result<Vec<_>>>()?;
    let div = positions.iter().map(l1_diversity).sum::<f64>() / positions.len() as f64;
    rows.push(MetricRow::new("Diversity", div, 1.0, "x1"));
    if !beats.is_empty() {
        if beats.len() != generated.len() {
            bail!("need one beat file per generated clip ({} vs {})", beats.len(), generated.len());
        }
        let mut bad = 0.0;
        let mut bag = 0.0;
        let mut n = 0usize;
        for ((c, p), b) in generated.iter().zip(&positions).zip(beats) {
            if b.is_empty() {
                continue;
            }
            let set = BeatSet::audio(b.clone())?;
            bad += ba_dance(&set, p, c.fps, sigma)?;
            bag += ba_gesture_from_positions(&set, p, &skeleton.upper_body_joints, c.fps, sigma)?;
            n += 1;
        }
        if n > 0 {
            rows.push(MetricRow::new("BA_D", bad / n as f64, 10.0, "x10^-1"));
            rows.push(MetricRow::new("BA_G", bag / n as f64, 10.0, "x10^-1"));
        }
    }
    Ok(rows)
}

pub fn write_metric_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn pretty_metrics(rows: &[MetricRow]) -> String {
    let mut s = format!("{:<10} {:>12} {:>12}  {}\n", "metric", "value", "reported", "scale");
    for r in rows {
        s.push_str(&format!("{:<10} {:>12.6} {:>12.4}  {}\n", r.metric, r.value, r.reported, r.scale));
    }
    s
}

/// Every file with extension `ext` directly inside `dir`, sorted.
pub fn files_with_ext(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some(ext))
        .collect();
    v.sort();
    Ok(v)
}
