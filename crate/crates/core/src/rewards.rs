//! Reward models: a motion-quality regressor supervised by corruption
//! severity, and an audio-motion contrastive aligner with retrieval metrics.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::audio::AudioTokens;
use crate::corruption::CorruptionMode;
use crate::error::{Error, Result};
use crate::graph::{AttnMask, Graph, ParamId, ParamStore, Var};
use crate::kinematics::MotionClip;
use crate::nn::{sinusoidal, Embedding, LayerNorm, Linear, Mlp, Transformer};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;
use crate::Rng;

/// Shortest clip the quality encoder accepts.
pub const MIN_QUALITY_FRAMES: usize = 4;
/// Initial contrastive temperature (a scale on cosine similarity).
pub const INITIAL_TEMPERATURE: f64 = 1.0 / 0.07;
pub const SMOOTH_L1_BETA: f64 = 1.0;

// ---------------------------------------------------------------------------
// Score table

/// What a training clip is: the clean source, a tokenizer round trip, or a
/// corrupted round trip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum QualityLabel {
    GroundTruth,
    Reconstruction,
    Corrupted { mode: CorruptionMode, rate: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityScoreTable {
    pub ground_truth: f64,
    pub reconstruction: f64,
    /// `(ρ, score)` rows, ascending in ρ.
    pub hierarchical: Vec<(f64, f64)>,
    pub uniform: Vec<(f64, f64)>,
}

impl Default for QualityScoreTable {
    fn default() -> Self {
        let rates = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];
        let hier = [0.88, 0.84, 0.79, 0.75, 0.70, 0.64, 0.57, 0.52, 0.46, 0.40];
        let unif = [0.76, 0.58, 0.36, 0.30, 0.24, 0.18, 0.12, 0.06, 0.02, 0.00];
        Self {
            ground_truth: 0.97,
            reconstruction: 0.91,
            hierarchical: rates.iter().copied().zip(hier).collect(),
            uniform: rates.iter().copied().zip(unif).collect(),
        }
    }
}

impl QualityScoreTable {
    pub fn rows(&self, mode: CorruptionMode) -> &[(f64, f64)] {
        match mode {
            CorruptionMode::Hierarchical => &self.hierarchical,
            CorruptionMode::Uniform => &self.uniform,
        }
    }

    /// Scores strictly decrease in ρ, start below the reconstruction score,
    /// and uniform never beats hierarchical at the same ρ.
    pub fn validate(&self) -> Result<()> {
        if self.ground_truth < self.reconstruction {
            return Err(Error::config("ground truth must score at least the reconstruction"));
        }
        for mode in [CorruptionMode::Hierarchical, CorruptionMode::Uniform] {
            let rows = self.rows(mode);
            if rows.is_empty() {
                return Err(Error::config("empty score rows"));
            }
            let mut prev = (0.0, self.reconstruction);
            for &(rate, score) in rows {
                if rate <= prev.0 || score >= prev.1 || !(0.0..=1.0).contains(&score) {
                    return Err(Error::config("scores must strictly decrease in rate"));
                }
                prev = (rate, score);
            }
        }
        for &(rate, s) in &self.uniform {
            if s > self.score(QualityLabel::Corrupted {
                mode: CorruptionMode::Hierarchical,
                rate,
            })? {
                return Err(Error::config("uniform scores must not exceed hierarchical"));
            }
        }
        Ok(())
    }

    /// Target for a label; rates between rows interpolate linearly, with
    /// ρ = 0 anchored at the reconstruction score.
    pub fn score(&self, label: QualityLabel) -> Result<f64> {
        match label {
            QualityLabel::GroundTruth => Ok(self.ground_truth),
            QualityLabel::Reconstruction => Ok(self.reconstruction),
            QualityLabel::Corrupted { mode, rate } => {
                if !(0.0..=1.0).contains(&rate) {
                    return Err(Error::config("corruption rate must lie in [0, 1]"));
                }
                let mut prev = (0.0, self.reconstruction);
                for &(r, s) in self.rows(mode) {
                    if rate <= r + 1e-12 {
                        let span = r - prev.0;
                        let w = if span > 0.0 { (rate - prev.0) / span } else { 1.0 };
                        return Ok(prev.1 + w.clamp(0.0, 1.0) * (s - prev.1));
                    }
                    prev = (r, s);
                }
                Ok(prev.1)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Shared encoder pieces

/// Per-frame `[m_t, m_t - m_{t-1}]`, with a zero difference on the first frame.
pub fn motion_features(clip: &MotionClip) -> Tensor {
    let (n, d) = clip.frames.shape();
    let mut out = Tensor::zeros(n, 2 * d);
    for t in 0..n {
        let cur = clip.frames.row(t);
        let row = out.row_mut(t);
        row[..d].copy_from_slice(cur);
        if t > 0 {
            let prev = clip.frames.row(t - 1);
            for c in 0..d {
                row[d + c] = cur[c] - prev[c];
            }
        }
    }
    out
}

/// Positional rows restarting at zero for every packed segment.
fn segment_positions(lens: &[usize], dim: usize) -> Tensor {
    sinusoidal(lens.iter().flat_map(|&n| (0..n).map(|t| t as f64)), dim)
}

/// Input projection, bidirectional encoder, mean pool per segment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PooledEncoder {
    pub input: Linear,
    pub body: Transformer,
    pub width: usize,
}

impl PooledEncoder {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, width: usize, layers: usize, heads: usize, rng: &mut Rng) -> Self {
        Self {
            input: Linear::new(store, &alloc::format!("{name}.input"), in_dim, width, rng),
            body: Transformer::new(store, &alloc::format!("{name}.body"), layers, width, heads, rng),
            width,
        }
    }

    /// `x` packs segments of the given lengths; returns one row per segment.
    pub fn forward(&self, g: &mut Graph, x: Var, lens: &[usize]) -> Var {
        let h = self.input.forward(g, x);
        let pe = g.constant(segment_positions(lens, self.width));
        let h = g.add(h, pe);
        let mask = AttnMask::bidirectional().with_segments(lens.to_vec());
        let h = self.body.forward(g, h, &mask);
        g.mean_segments(h, lens.to_vec())
    }
}

fn concat_features(clips: &[&MotionClip]) -> Result<(Tensor, Vec<usize>)> {
    let first = clips.first().ok_or_else(|| Error::dim("empty batch"))?;
    let d = first.frames.cols();
    let mut rows = Vec::new();
    let mut lens = Vec::with_capacity(clips.len());
    for c in clips {
        if c.frames.cols() != d {
            return Err(Error::dim("clips in a batch must share a frame width"));
        }
        rows.push(motion_features(c));
        lens.push(c.len());
    }
    Ok((Tensor::concat_rows(&rows.iter().collect::<Vec<_>>()), lens))
}

// ---------------------------------------------------------------------------
// Quality model

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QualityConfig {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    /// Training / scoring window in frames.
    pub window: usize,
    pub lr: f64,
}

impl Default for QualityConfig {
    fn default() -> Self {
        Self {
            width: 32,
            layers: 2,
            heads: 4,
            hidden: 32,
            window: 80,
            lr: 3e-3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QualityModel {
    pub config: QualityConfig,
    pub frame_dim: usize,
    pub store: ParamStore,
    pub encoder: PooledEncoder,
    pub head: Mlp,
}

impl QualityModel {
    pub fn new(config: QualityConfig, frame_dim: usize, rng: &mut Rng) -> Result<Self> {
        if config.width == 0 || config.heads == 0 || config.width % config.heads != 0 || config.window < MIN_QUALITY_FRAMES {
            return Err(Error::config("quality model: width must split into heads and window must be >= 4"));
        }
        let mut store = ParamStore::new();
        let encoder = PooledEncoder::new(&mut store, "quality", 2 * frame_dim, config.width, config.layers, config.heads, rng);
        let head = Mlp::new(&mut store, "quality.head", config.width, config.hidden, 1, rng);
        Ok(Self {
            config,
            frame_dim,
            store,
            encoder,
            head,
        })
    }

    fn check(&self, clip: &MotionClip) -> Result<()> {
        if clip.len() < MIN_QUALITY_FRAMES {
            return Err(Error::TooShort {
                needed: MIN_QUALITY_FRAMES,
                got: clip.len(),
            });
        }
        if clip.frames.cols() != self.frame_dim {
            return Err(Error::dim("clip frame width differs from the quality model"));
        }
        Ok(())
    }

    /// Scores in (0, 1), one row per clip.
    fn forward(&self, g: &mut Graph, clips: &[&MotionClip]) -> Result<Var> {
        for c in clips {
            self.check(c)?;
        }
        let (x, lens) = concat_features(clips)?;
        let x = g.constant(x);
        let pooled = self.encoder.forward(g, x, &lens);
        let logit = self.head.forward(g, pooled);
        Ok(g.sigmoid(logit))
    }

    /// Quality score of one clip; long clips average over whole windows.
    pub fn score(&self, clip: &MotionClip) -> Result<f64> {
        self.check(clip)?;
        let w = self.config.window;
        let pieces: Vec<MotionClip> = if clip.len() <= w {
            vec![clip.clone()]
        } else {
            (0..clip.len() / w)
                .map(|i| MotionClip {
                    fps: clip.fps,
                    frames: clip.frames.slice_rows(i * w, w),
                })
                .collect()
        };
        let mut g = Graph::new(&self.store);
        let refs: Vec<&MotionClip> = pieces.iter().collect();
        let s = self.forward(&mut g, &refs)?;
        Ok(g.value(s).mean())
    }

    /// SmoothL1 between predicted scores and targets.
    pub fn loss(&self, g: &mut Graph, clips: &[&MotionClip], targets: &[f64]) -> Result<Var> {
        if clips.len() != targets.len() {
            return Err(Error::dim("one target per clip"));
        }
        let s = self.forward(g, clips)?;
        Ok(g.smooth_l1(s, Tensor::from_vec(targets.len(), 1, targets.to_vec()), SMOOTH_L1_BETA))
    }
}

pub struct QualityTrainer {
    pub adam: Adam,
}

impl QualityTrainer {
    pub fn new(model: &QualityModel) -> Self {
        Self {
            adam: Adam::new(AdamConfig::default().with_lr(model.config.lr)),
        }
    }

    pub fn step(&mut self, model: &mut QualityModel, clips: &[&MotionClip], targets: &[f64]) -> Result<f64> {
        let (value, grads) = {
            let mut g = Graph::new(&model.store);
            let l = model.loss(&mut g, clips, targets)?;
            (g.value(l).item(), g.backward(l))
        };
        if !value.is_finite() {
            return Err(Error::numerical("quality loss"));
        }
        self.adam.step(&mut model.store, &grads);
        Ok(value)
    }
}

// ---------------------------------------------------------------------------
// Contrastive loss

/// Positive sets from per-item source keys: items sharing a key are positives.
pub fn positives_from_keys(keys: &[usize]) -> Vec<Vec<usize>> {
    keys.iter()
        .map(|k| keys.iter().enumerate().filter(|(_, o)| *o == k).map(|(j, _)| j).collect())
        .collect()
}

/// Soft-label matrix: row `i` spreads mass 1 evenly over `P_i`.
fn soft_labels(positives: &[Vec<usize>]) -> Result<Tensor> {
    let b = positives.len();
    let mut w = Tensor::zeros(b, b);
    for (i, p) in positives.iter().enumerate() {
        if p.is_empty() {
            return Err(Error::Label(alloc::format!("item {i} has no positive")));
        }
        for &j in p {
            if j >= b {
                return Err(Error::Label(alloc::format!("positive {j} outside batch of {b}")));
            }
            w.set(i, j, 1.0 / p.len() as f64);
        }
    }
    Ok(w)
}

/// Symmetric InfoNCE over `S = τ · ā vᵀ` with soft labels. `audio` and
/// `motion` are `B x d` (normalized here); `temperature` is a `1 x 1` node.
pub fn infonce_graph(g: &mut Graph, audio: Var, motion: Var, temperature: Var, positives: &[Vec<usize>]) -> Result<Var> {
    let (b, d) = g.shape(audio);
    if g.shape(motion) != (b, d) || positives.len() != b {
        return Err(Error::dim("audio, motion and positive sets must share the batch size"));
    }
    let w = soft_labels(positives)?;
    let wt = w.transpose();
    let a = g.l2_normalize_rows(audio);
    let v = g.l2_normalize_rows(motion);
    let s_am = g.matmul_nt(a, v);
    let s_am = g.scale_by(s_am, temperature);
    let s_ma = g.matmul_nt(v, a);
    let s_ma = g.scale_by(s_ma, temperature);
    let l_am = g.log_softmax(s_am);
    let l_ma = g.log_softmax(s_ma);
    let w = g.constant(w);
    let wt = g.constant(wt);
    let x = g.mul(l_am, w);
    let y = g.mul(l_ma, wt);
    let x = g.sum(x);
    let y = g.sum(y);
    let total = g.add(x, y);
    Ok(g.scale(total, -0.5 / b as f64))
}

/// Plain-value InfoNCE for fixed embeddings and temperature.
pub fn infonce_loss(audio: &Tensor, motion: &Tensor, temperature: f64, positives: &[Vec<usize>]) -> Result<f64> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let a = g.constant(audio.clone());
    let v = g.constant(motion.clone());
    let t = g.constant(Tensor::scalar(temperature));
    let l = infonce_graph(&mut g, a, v, t, positives)?;
    Ok(g.value(l).item())
}

// ---------------------------------------------------------------------------
// Aligner

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignerConfig {
    pub embed_dim: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    /// Audio frames averaged before the audio encoder.
    pub audio_pool: usize,
    pub lr: f64,
}

impl Default for AlignerConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            width: 32,
            layers: 1,
            heads: 4,
            audio_pool: 5,
            lr: 3e-3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Aligner {
    pub config: AlignerConfig,
    pub frame_dim: usize,
    pub audio_layers: usize,
    pub audio_size: usize,
    pub store: ParamStore,
    pub audio_embed: Embedding,
    pub audio_encoder: PooledEncoder,
    pub audio_proj: Linear,
    pub audio_norm: LayerNorm,
    pub motion_encoder: PooledEncoder,
    pub motion_proj: Linear,
    pub motion_norm: LayerNorm,
    /// θ with τ = exp(θ).
    pub log_temperature: ParamId,
}

/// One audio window paired with one motion window.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignPair {
    pub audio: AudioTokens,
    pub motion: MotionClip,
    /// Source file and segment; pairs sharing a key are positives.
    pub key: usize,
}

impl Aligner {
    pub fn new(config: AlignerConfig, frame_dim: usize, audio_layers: usize, audio_size: usize, rng: &mut Rng) -> Result<Self> {
        let c = &config;
        if c.width == 0 || c.heads == 0 || c.width % c.heads != 0 || c.audio_pool == 0 || c.embed_dim == 0 {
            return Err(Error::config("aligner: width must split into heads; pool and embedding must be positive"));
        }
        let mut store = ParamStore::new();
        let audio_embed = Embedding::new(&mut store, "align.audio_embed", audio_layers * audio_size, c.width, rng);
        let audio_encoder = PooledEncoder::new(&mut store, "align.audio", c.width, c.width, c.layers, c.heads, rng);
        let audio_proj = Linear::new(&mut store, "align.audio_proj", c.width, c.embed_dim, rng);
        let audio_norm = LayerNorm::new(&mut store, "align.audio_norm", c.embed_dim);
        let motion_encoder = PooledEncoder::new(&mut store, "align.motion", 2 * frame_dim, c.width, c.layers, c.heads, rng);
        let motion_proj = Linear::new(&mut store, "align.motion_proj", c.width, c.embed_dim, rng);
        let motion_norm = LayerNorm::new(&mut store, "align.motion_norm", c.embed_dim);
        let log_temperature = store.add("align.log_temperature", Tensor::scalar(INITIAL_TEMPERATURE.ln()));
        Ok(Self {
            config,
            frame_dim,
            audio_layers,
            audio_size,
            store,
            audio_embed,
            audio_encoder,
            audio_proj,
            audio_norm,
            motion_encoder,
            motion_proj,
            motion_norm,
            log_temperature,
        })
    }

    pub fn temperature(&self) -> f64 {
        self.store.get(self.log_temperature).item().exp()
    }

    fn audio_forward(&self, g: &mut Graph, audio: &[&AudioTokens]) -> Result<Var> {
        let pool = self.config.audio_pool;
        let mut ids = Vec::new();
        let mut lens = Vec::with_capacity(audio.len());
        for a in audio {
            if a.layers != self.audio_layers || a.codebook_size != self.audio_size {
                return Err(Error::dim("audio token layout differs from the aligner"));
            }
            let frames = a.frames() / pool * pool;
            if frames == 0 {
                return Err(Error::TooShort { needed: pool, got: a.frames() });
            }
            for f in 0..frames {
                for l in 0..a.layers {
                    let id = a.get(f, l) as usize;
                    if id >= self.audio_size {
                        return Err(Error::Token { index: id, size: self.audio_size });
                    }
                    ids.push(l * self.audio_size + id);
                }
            }
            lens.push(frames / pool);
        }
        let e = self.audio_embed.forward(g, &ids);
        // Mean over layers and `pool` consecutive frames.
        let x = g.pool_rows(e, self.audio_layers * pool);
        let h = self.audio_encoder.forward(g, x, &lens);
        let h = self.audio_proj.forward(g, h);
        Ok(self.audio_norm.forward(g, h))
    }

    fn motion_forward(&self, g: &mut Graph, motion: &[&MotionClip]) -> Result<Var> {
        for m in motion {
            if m.frames.cols() != self.frame_dim {
                return Err(Error::dim("clip frame width differs from the aligner"));
            }
        }
        let (x, lens) = concat_features(motion)?;
        let x = g.constant(x);
        let h = self.motion_encoder.forward(g, x, &lens);
        let h = self.motion_proj.forward(g, h);
        Ok(self.motion_norm.forward(g, h))
    }

    /// Unit-norm audio embeddings, one row per window.
    pub fn embed_audio(&self, audio: &[&AudioTokens]) -> Result<Tensor> {
        let mut g = Graph::new(&self.store);
        let a = self.audio_forward(&mut g, audio)?;
        let a = g.l2_normalize_rows(a);
        Ok(g.value(a).clone())
    }

    /// Unit-norm motion embeddings, one row per clip.
    pub fn embed_motion(&self, motion: &[&MotionClip]) -> Result<Tensor> {
        let mut g = Graph::new(&self.store);
        let v = self.motion_forward(&mut g, motion)?;
        let v = g.l2_normalize_rows(v);
        Ok(g.value(v).clone())
    }

    pub fn loss(&self, g: &mut Graph, batch: &[AlignPair]) -> Result<Var> {
        let audio: Vec<&AudioTokens> = batch.iter().map(|p| &p.audio).collect();
        let motion: Vec<&MotionClip> = batch.iter().map(|p| &p.motion).collect();
        let a = self.audio_forward(g, &audio)?;
        let v = self.motion_forward(g, &motion)?;
        let theta = g.param(self.log_temperature);
        let tau = g.exp(theta);
        let keys: Vec<usize> = batch.iter().map(|p| p.key).collect();
        infonce_graph(g, a, v, tau, &positives_from_keys(&keys))
    }

    /// Cosine between the audio and motion embeddings of one pair.
    pub fn reward(&self, audio: &AudioTokens, motion: &MotionClip) -> Result<f64> {
        let a = self.embed_audio(&[audio])?;
        let v = self.embed_motion(&[motion])?;
        alignment_reward(a.row(0), v.row(0))
    }
}

pub struct AlignerTrainer {
    pub adam: Adam,
}

impl AlignerTrainer {
    pub fn new(model: &Aligner) -> Self {
        Self {
            adam: Adam::new(AdamConfig::default().with_lr(model.config.lr)),
        }
    }

    pub fn step(&mut self, model: &mut Aligner, batch: &[AlignPair]) -> Result<f64> {
        let (value, grads) = {
            let mut g = Graph::new(&model.store);
            let l = model.loss(&mut g, batch)?;
            (g.value(l).item(), g.backward(l))
        };
        if !value.is_finite() {
            return Err(Error::numerical("contrastive loss"));
        }
        self.adam.step(&mut model.store, &grads);
        Ok(value)
    }
}

/// Exact cosine similarity.
pub fn alignment_reward(audio: &[f64], motion: &[f64]) -> Result<f64> {
    if audio.len() != motion.len() {
        return Err(Error::dim("embedding sizes differ"));
    }
    let na = crate::tensor::dot(audio, audio).sqrt();
    let nm = crate::tensor::dot(motion, motion).sqrt();
    if na == 0.0 || nm == 0.0 {
        return Err(Error::DegenerateEmbedding);
    }
    Ok((crate::tensor::dot(audio, motion) / (na * nm)).clamp(-1.0, 1.0))
}

// ---------------------------------------------------------------------------
// Retrieval

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalScores {
    /// Percentages.
    pub r1: f64,
    pub r3: f64,
    pub r5: f64,
    pub r10: f64,
    pub median_rank: f64,
    pub mrr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub audio_to_motion: RetrievalScores,
    pub motion_to_audio: RetrievalScores,
}

/// 1-based rank of `target` among `scores`, higher first, ties to the lower index.
pub fn rank_of(scores: &[f64], target: usize) -> usize {
    let s = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < target))
        .count()
}

fn summarize(ranks: &[usize]) -> RetrievalScores {
    let n = ranks.len().max(1) as f64;
    let at = |k: usize| 100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    let m = sorted.len();
    let median_rank = if m == 0 {
        0.0
    } else if m % 2 == 1 {
        sorted[m / 2] as f64
    } else {
        (sorted[m / 2 - 1] + sorted[m / 2]) as f64 / 2.0
    };
    RetrievalScores {
        r1: at(1),
        r3: at(3),
        r5: at(5),
        r10: at(10),
        median_rank,
        mrr: ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n,
    }
}

/// Cosine-similarity retrieval in both directions. `pairing[i]` is the motion
/// row matching audio row `i` and must be a permutation.
pub fn retrieval_eval(audio: &Tensor, motion: &Tensor, pairing: &[usize]) -> Result<RetrievalReport> {
    let n = audio.rows();
    if motion.rows() != n || pairing.len() != n || audio.cols() != motion.cols() {
        return Err(Error::dim("retrieval needs equal counts and widths"));
    }
    let mut inverse = vec![usize::MAX; n];
    for (i, &j) in pairing.iter().enumerate() {
        if j >= n || inverse[j] != usize::MAX {
            return Err(Error::Label("pairing must be a permutation".into()));
        }
        inverse[j] = i;
    }
    let norm = |t: &Tensor| {
        let mut t = t.clone();
        for r in 0..t.rows() {
            let row = t.row_mut(r);
            let l = crate::tensor::dot(row, row).sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= l);
        }
        t
    };
    let a = norm(audio);
    let m = norm(motion);
    let sim = a.matmul_nt(&m);
    let a2m: Vec<usize> = (0..n).map(|i| rank_of(sim.row(i), pairing[i])).collect();
    let st = sim.transpose();
    let m2a: Vec<usize> = (0..n).map(|j| rank_of(st.row(j), inverse[j])).collect();
    Ok(RetrievalReport {
        audio_to_motion: summarize(&a2m),
        motion_to_audio: summarize(&m2a),
    })
}
