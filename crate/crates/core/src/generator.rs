//! Decoder-only generator over one vocabulary of audio, motion and control
//! tokens.
//!
//! Windows interleave chunk by chunk:
//! `[BOS] [EX_START ex.. EX_END]? ([audio chunk] [SEP] [motion chunk])*`.
//! A motion chunk is flattened step-major, then layer, then part. Only motion
//! positions carry loss, weighted by `γ^q` normalized to sum to `Q`.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::audio::{AudioTokens, ToyCodec};
use crate::corruption::{corrupt_in_place, CorruptionMode};
use crate::error::{Error, Result};
use crate::graph::{AttnMask, Graph, ParamStore, Var};
use crate::nn::{sinusoidal, sinusoidal_row, Embedding, KvCache, LayerNorm, Linear, Transformer};
use crate::optim::{Adam, AdamConfig};
use crate::synthetic::{AUDIO_FRAMES_PER_CHUNK, FRAMES_PER_CHUNK};
use crate::tensor::Tensor;
use crate::tokenizer::TokenGrid;
use crate::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Special {
    Bos,
    Sep,
    ExemplarStart,
    ExemplarEnd,
    Pad,
}

impl Special {
    pub const ALL: [Special; 5] = [Special::Bos, Special::Sep, Special::ExemplarStart, Special::ExemplarEnd, Special::Pad];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Token {
    Audio { layer: usize, id: usize },
    Motion { layer: usize, part: usize, id: usize },
    Special(Special),
}

/// Id ranges: audio per layer, motion per (layer, part), then specials.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabLayout {
    pub audio_layers: usize,
    pub audio_size: usize,
    pub motion_layers: usize,
    pub parts: usize,
    pub codebook_size: usize,
}

impl VocabLayout {
    pub fn motion_offset(&self) -> usize {
        self.audio_layers * self.audio_size
    }

    pub fn special_offset(&self) -> usize {
        self.motion_offset() + self.motion_layers * self.parts * self.codebook_size
    }

    pub fn size(&self) -> usize {
        self.special_offset() + Special::ALL.len()
    }

    pub fn audio_range(&self, layer: usize) -> Range<usize> {
        layer * self.audio_size..(layer + 1) * self.audio_size
    }

    pub fn motion_range(&self, layer: usize, part: usize) -> Range<usize> {
        let s = self.motion_offset() + (layer * self.parts + part) * self.codebook_size;
        s..s + self.codebook_size
    }

    pub fn encode(&self, t: Token) -> Result<usize> {
        match t {
            Token::Audio { layer, id } if layer < self.audio_layers && id < self.audio_size => Ok(layer * self.audio_size + id),
            Token::Motion { layer, part, id } if layer < self.motion_layers && part < self.parts && id < self.codebook_size => {
                Ok(self.motion_range(layer, part).start + id)
            }
            Token::Special(s) => Ok(self.special_offset() + Special::ALL.iter().position(|x| *x == s).unwrap_or(0)),
            _ => Err(Error::Token {
                index: usize::MAX,
                size: self.size(),
            }),
        }
    }

    pub fn decode(&self, id: usize) -> Result<Token> {
        if id < self.motion_offset() {
            Ok(Token::Audio {
                layer: id / self.audio_size,
                id: id % self.audio_size,
            })
        } else if id < self.special_offset() {
            let r = id - self.motion_offset();
            let group = r / self.codebook_size;
            Ok(Token::Motion {
                layer: group / self.parts,
                part: group % self.parts,
                id: r % self.codebook_size,
            })
        } else if id < self.size() {
            Ok(Token::Special(Special::ALL[id - self.special_offset()]))
        } else {
            Err(Error::Token { index: id, size: self.size() })
        }
    }

    pub fn special(&self, s: Special) -> usize {
        self.encode(Token::Special(s)).unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    /// Context length in 8-frame chunks (15 is the 4 s window).
    pub window_chunks: usize,
    pub audio_layers: usize,
    pub audio_size: usize,
    pub audio_frames_per_chunk: usize,
    /// Latent steps per chunk (8 frames / downsampling ratio).
    pub steps_per_chunk: usize,
    pub motion_layers: usize,
    pub parts: usize,
    pub codebook_size: usize,
    /// Latent steps of layer-0 exemplar tokens in a prefix.
    pub exemplar_steps: usize,
    /// Layer loss decay.
    pub gamma: f64,
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub lr: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            window_chunks: 4,
            audio_layers: ToyCodec::LAYERS,
            audio_size: ToyCodec::CODEBOOK_SIZE,
            audio_frames_per_chunk: AUDIO_FRAMES_PER_CHUNK,
            steps_per_chunk: 2,
            motion_layers: 3,
            parts: 3,
            codebook_size: 64,
            exemplar_steps: 4,
            gamma: 0.8,
            layers: 2,
            heads: 4,
            width: 48,
            lr: 3e-3,
        }
    }
}

impl GeneratorConfig {
    /// Full-scale layout: 4 s window, 6 layers, 3 parts, 128 entries.
    pub fn full_scale() -> Self {
        Self {
            window_chunks: 15,
            motion_layers: 6,
            parts: 3,
            codebook_size: 128,
            layers: 4,
            heads: 4,
            width: 128,
            ..Default::default()
        }
    }

    pub fn layout(&self) -> VocabLayout {
        VocabLayout {
            audio_layers: self.audio_layers,
            audio_size: self.audio_size,
            motion_layers: self.motion_layers,
            parts: self.parts,
            codebook_size: self.codebook_size,
        }
    }

    pub fn motion_per_chunk(&self) -> usize {
        self.steps_per_chunk * self.motion_layers * self.parts
    }

    pub fn audio_per_chunk(&self) -> usize {
        self.audio_frames_per_chunk * self.audio_layers
    }

    pub fn chunk_len(&self) -> usize {
        self.audio_per_chunk() + 1 + self.motion_per_chunk()
    }

    pub fn exemplar_len(&self) -> usize {
        self.exemplar_steps * self.parts + 2
    }

    /// Longest packed window.
    pub fn max_len(&self) -> usize {
        1 + self.exemplar_len() + self.window_chunks * self.chunk_len()
    }

    /// Layer weights `γ^q`, scaled to sum to `Q`.
    pub fn layer_weights(&self) -> Vec<f64> {
        let raw: Vec<f64> = (0..self.motion_layers).map(|q| self.gamma.powi(q as i32)).collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|w| w * self.motion_layers as f64 / s).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_chunks == 0 || self.steps_per_chunk == 0 || self.audio_frames_per_chunk == 0 {
            return Err(Error::config("window, steps per chunk and audio frames per chunk must be positive"));
        }
        if self.motion_layers == 0 || self.parts == 0 || self.codebook_size == 0 || self.audio_layers == 0 || self.audio_size == 0 {
            return Err(Error::config("vocabulary sizes must be positive"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config("gamma must lie in (0, 1]"));
        }
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::config("heads must divide width"));
        }
        if FRAMES_PER_CHUNK % self.steps_per_chunk != 0 {
            return Err(Error::config("steps per chunk must divide 8 frames"));
        }
        Ok(())
    }
}

/// What sits at a packed position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Slot {
    Bos,
    ExemplarStart,
    Exemplar { step: usize, part: usize },
    ExemplarEnd,
    Audio { chunk: usize, frame: usize, layer: usize },
    Sep { chunk: usize },
    Motion { chunk: usize, step: usize, layer: usize, part: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequencePack {
    pub ids: Vec<usize>,
    pub slots: Vec<Slot>,
}

impl SequencePack {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn count(&self, pred: impl Fn(&Slot) -> bool) -> usize {
        self.slots.iter().filter(|s| pred(s)).count()
    }
}

/// Number of whole chunks covered by paired audio and motion.
pub fn chunk_count(cfg: &GeneratorConfig, audio: &AudioTokens, grid: &TokenGrid) -> Result<usize> {
    let af = cfg.audio_frames_per_chunk;
    let ms = cfg.steps_per_chunk;
    if audio.frames() % af != 0 || grid.steps % ms != 0 || audio.frames() / af != grid.steps / ms {
        return Err(Error::Alignment(alloc::format!(
            "{} audio frames and {} latent steps do not cover the same whole chunks",
            audio.frames(),
            grid.steps
        )));
    }
    Ok(grid.steps / ms)
}

fn push_exemplar(cfg: &GeneratorConfig, ids: &mut Vec<usize>, slots: &mut Vec<Slot>, ex: &TokenGrid) -> Result<()> {
    let lay = cfg.layout();
    ids.push(lay.special(Special::ExemplarStart));
    slots.push(Slot::ExemplarStart);
    for s in 0..ex.steps {
        for p in 0..cfg.parts {
            ids.push(lay.encode(Token::Motion {
                layer: 0,
                part: p,
                id: ex.get(s, 0, p) as usize,
            })?);
            slots.push(Slot::Exemplar { step: s, part: p });
        }
    }
    ids.push(lay.special(Special::ExemplarEnd));
    slots.push(Slot::ExemplarEnd);
    Ok(())
}

fn push_audio_chunk(cfg: &GeneratorConfig, ids: &mut Vec<usize>, slots: &mut Vec<Slot>, audio: &AudioTokens, chunk: usize) -> Result<()> {
    let lay = cfg.layout();
    for f in 0..cfg.audio_frames_per_chunk {
        let frame = chunk * cfg.audio_frames_per_chunk + f;
        for l in 0..cfg.audio_layers {
            ids.push(lay.encode(Token::Audio {
                layer: l,
                id: audio.get(frame, l) as usize,
            })?);
            slots.push(Slot::Audio { chunk, frame: f, layer: l });
        }
    }
    ids.push(lay.special(Special::Sep));
    slots.push(Slot::Sep { chunk });
    Ok(())
}

/// Motion slots of one chunk in emission order.
pub fn motion_slots(cfg: &GeneratorConfig, chunk: usize) -> Vec<Slot> {
    let mut out = Vec::with_capacity(cfg.motion_per_chunk());
    for step in 0..cfg.steps_per_chunk {
        for layer in 0..cfg.motion_layers {
            for part in 0..cfg.parts {
                out.push(Slot::Motion { chunk, step, layer, part });
            }
        }
    }
    out
}

/// Packs one window. `exemplar` holds layer-0 tokens (any layer count; only
/// layer 0 is read).
pub fn pack_sequence(cfg: &GeneratorConfig, audio: &AudioTokens, grid: &TokenGrid, exemplar: Option<&TokenGrid>) -> Result<SequencePack> {
    if audio.layers != cfg.audio_layers || grid.layers != cfg.motion_layers || grid.parts != cfg.parts {
        return Err(Error::dim("token streams do not match the generator layout"));
    }
    let chunks = chunk_count(cfg, audio, grid)?;
    let lay = cfg.layout();
    let mut ids = vec![lay.special(Special::Bos)];
    let mut slots = vec![Slot::Bos];
    if let Some(ex) = exemplar {
        if ex.steps > 0 {
            push_exemplar(cfg, &mut ids, &mut slots, ex)?;
        }
    }
    for c in 0..chunks {
        push_audio_chunk(cfg, &mut ids, &mut slots, audio, c)?;
        for slot in motion_slots(cfg, c) {
            let Slot::Motion { step, layer, part, .. } = slot else { continue };
            let id = grid.get(c * cfg.steps_per_chunk + step, layer, part) as usize;
            ids.push(lay.encode(Token::Motion { layer, part, id })?);
            slots.push(slot);
        }
    }
    Ok(SequencePack { ids, slots })
}

/// Inverse of [`pack_sequence`].
pub fn unpack_sequence(cfg: &GeneratorConfig, pack: &SequencePack) -> Result<(AudioTokens, TokenGrid, Option<TokenGrid>)> {
    let lay = cfg.layout();
    let chunks = pack.count(|s| matches!(s, Slot::Sep { .. }));
    let ex_steps = pack.count(|s| matches!(s, Slot::Exemplar { .. })) / cfg.parts;
    let has_ex = pack.slots.contains(&Slot::ExemplarStart);
    let mut audio = AudioTokens {
        layers: cfg.audio_layers,
        codebook_size: cfg.audio_size,
        ids: vec![0; chunks * cfg.audio_per_chunk()],
    };
    let mut grid = TokenGrid::zeros(chunks * cfg.steps_per_chunk, cfg.motion_layers, cfg.parts, cfg.codebook_size);
    let mut ex = TokenGrid::zeros(ex_steps, 1, cfg.parts, cfg.codebook_size);
    for (&id, slot) in pack.ids.iter().zip(&pack.slots) {
        match (*slot, lay.decode(id)?) {
            (Slot::Audio { chunk, frame, layer }, Token::Audio { id, .. }) => {
                audio.ids[(chunk * cfg.audio_frames_per_chunk + frame) * cfg.audio_layers + layer] = id as u16;
            }
            (Slot::Motion { chunk, step, layer, part }, Token::Motion { id, .. }) => {
                grid.set(chunk * cfg.steps_per_chunk + step, layer, part, id as u16);
            }
            (Slot::Exemplar { step, part }, Token::Motion { id, .. }) => ex.set(step, 0, part, id as u16),
            (_, Token::Special(_)) => {}
            _ => return Err(Error::Label("slot and token kind disagree".into())),
        }
    }
    Ok((audio, grid, has_ex.then_some(ex)))
}

/// Samples from `logits` restricted to `legal`. Temperature 0 (or top-k 1)
/// takes the argmax; ties go to the lowest id.
pub fn sample_next(logits: &[f64], legal: Range<usize>, temperature: f64, top_k: usize, rng: &mut Rng) -> Result<usize> {
    let legal = legal.start.min(logits.len())..legal.end.min(logits.len());
    let mut cands: Vec<(usize, f64)> = legal.map(|i| (i, logits[i])).filter(|(_, v)| !v.is_nan() && *v > f64::NEG_INFINITY).collect();
    if cands.is_empty() {
        return Err(Error::Mask);
    }
    // Stable sort keeps lower ids first among equal logits.
    cands.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(core::cmp::Ordering::Equal));
    if temperature <= 0.0 || top_k == 1 {
        return Ok(cands[0].0);
    }
    if top_k > 0 {
        cands.truncate(top_k);
    }
    let m = cands[0].1;
    let w: Vec<f64> = cands.iter().map(|(_, v)| ((v - m) / temperature).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for ((id, _), wi) in cands.iter().zip(&w) {
        if u < *wi {
            return Ok(*id);
        }
        u -= wi;
    }
    Ok(cands[cands.len() - 1].0)
}

/// Curriculum phase: embeddings only, then everything, then exemplar
/// prefixes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    EmbeddingAlignment,
    AcousticKinematic,
    Exemplar,
}

#[derive(Clone)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub store: ParamStore,
    embed: Embedding,
    body: Transformer,
    norm: LayerNorm,
    head: Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorLoss {
    pub total: f64,
    /// Mean cross-entropy per motion layer.
    pub per_layer: Vec<f64>,
    pub targets: usize,
}

/// One training window: paired streams plus an optional exemplar.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingWindow {
    pub audio: AudioTokens,
    pub grid: TokenGrid,
    pub exemplar: Option<TokenGrid>,
}

/// Inputs and loss targets for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedBatch {
    pub inputs: Vec<Vec<usize>>,
    /// For each input row, `(row, target id, motion layer)` of motion targets.
    pub targets: Vec<Vec<(usize, usize, usize)>>,
}

impl Generator {
    pub fn new(config: GeneratorConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let v = config.layout().size();
        let embed = Embedding::new(&mut store, "embed", v, config.width, rng);
        let body = Transformer::new(&mut store, "body", config.layers, config.width, config.heads, rng);
        let norm = LayerNorm::new(&mut store, "norm", config.width);
        let head = Linear::new(&mut store, "head", config.width, v, rng);
        Ok(Self {
            config,
            store,
            embed,
            body,
            norm,
            head,
        })
    }

    pub fn layout(&self) -> VocabLayout {
        self.config.layout()
    }

    pub fn set_phase(&mut self, phase: Phase) {
        let frozen = phase == Phase::EmbeddingAlignment;
        self.store.set_trainable_prefix("body", !frozen);
        self.store.set_trainable_prefix("norm", !frozen);
    }

    /// Logits for every row of equal-length sequences packed as segments.
    fn forward(&self, g: &mut Graph, seqs: &[Vec<usize>]) -> Var {
        let lens: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
        let ids: Vec<usize> = seqs.iter().flatten().copied().collect();
        let x = self.embed.forward(g, &ids);
        let pe = Tensor::concat_rows(&lens.iter().map(|&l| sinusoidal((0..l).map(|p| p as f64), self.config.width)).collect::<Vec<_>>().iter().collect::<Vec<_>>());
        let pe = g.constant(pe);
        let x = g.add(x, pe);
        let mask = AttnMask::causal(None).with_segments(lens);
        let h = self.body.forward(g, x, &mask);
        let h = self.norm.forward(g, h);
        self.head.forward(g, h)
    }

    /// Logits at every position of one sequence, on the tape.
    pub fn logits(&self, ids: &[usize]) -> Tensor {
        let mut g = Graph::new(&self.store);
        let l = self.forward(&mut g, &[ids.to_vec()]);
        g.value(l).clone()
    }

    /// Builds inputs (context motion corrupted) and clean motion targets.
    pub fn prepare_batch(&self, windows: &[TrainingWindow], corruption: Option<(CorruptionMode, f64)>, rng: &mut Rng) -> Result<PreparedBatch> {
        let cfg = &self.config;
        let mut inputs = Vec::with_capacity(windows.len());
        let mut targets = Vec::with_capacity(windows.len());
        for w in windows {
            let clean = pack_sequence(cfg, &w.audio, &w.grid, w.exemplar.as_ref())?;
            let input = match corruption {
                Some((mode, rate)) if rate > 0.0 => {
                    let mut noisy = w.grid.clone();
                    corrupt_in_place(&mut noisy, mode, rate, rng);
                    pack_sequence(cfg, &w.audio, &noisy, w.exemplar.as_ref())?.ids
                }
                _ => clean.ids.clone(),
            };
            let n = clean.len();
            let mut t = Vec::new();
            for i in 1..n {
                if let Slot::Motion { layer, .. } = clean.slots[i] {
                    t.push((i - 1, clean.ids[i], layer));
                }
            }
            inputs.push(input[..n - 1].to_vec());
            targets.push(t);
        }
        Ok(PreparedBatch { inputs, targets })
    }

    /// Weighted loss on the tape; returns the loss node and its breakdown.
    fn loss_graph<'a>(&'a self, g: &mut Graph<'a>, batch: &PreparedBatch, weights: &[f64]) -> Result<(Var, GeneratorLoss)> {
        let logits = self.forward(g, &batch.inputs);
        let lp = g.log_softmax(logits);
        let mut rows = Vec::new();
        let mut ids = Vec::new();
        let mut w = Vec::new();
        let mut layers = Vec::new();
        let mut base = 0;
        for (inp, tg) in batch.inputs.iter().zip(&batch.targets) {
            for &(r, id, q) in tg {
                rows.push(base + r);
                ids.push(id);
                w.push(weights[q]);
                layers.push(q);
            }
            base += inp.len();
        }
        if rows.is_empty() {
            return Err(Error::config("batch has no motion targets"));
        }
        let count = rows.len();
        let sel = g.gather_rows(lp, rows);
        let picked = g.pick(sel, ids);
        let nll: Vec<f64> = g.value(picked).data().iter().map(|v| -v).collect();
        let wv = g.constant(Tensor::from_vec(count, 1, w));
        let weighted = g.mul(picked, wv);
        let s = g.sum(weighted);
        let loss = g.scale(s, -1.0 / count as f64);
        let total = g.value(loss).item();
        if !total.is_finite() {
            return Err(Error::numerical("generator loss"));
        }
        let mut per = vec![0.0; self.config.motion_layers];
        let mut cnt = vec![0usize; self.config.motion_layers];
        for (q, v) in layers.iter().zip(&nll) {
            per[*q] += v;
            cnt[*q] += 1;
        }
        for (p, c) in per.iter_mut().zip(&cnt) {
            *p /= (*c).max(1) as f64;
        }
        Ok((loss, GeneratorLoss { total, per_layer: per, targets: count }))
    }

    pub fn loss(&self, batch: &PreparedBatch) -> Result<GeneratorLoss> {
        let mut g = Graph::new(&self.store);
        Ok(self.loss_graph(&mut g, batch, &self.config.layer_weights())?.1)
    }

    /// Parameter-gradient norm induced by each layer's weighted term alone.
    pub fn layer_gradient_norms(&self, batch: &PreparedBatch) -> Result<Vec<f64>> {
        let weights = self.config.layer_weights();
        let mut out = Vec::new();
        for q in 0..self.config.motion_layers {
            let only: Vec<f64> = (0..weights.len()).map(|i| if i == q { weights[i] } else { 0.0 }).collect();
            let mut g = Graph::new(&self.store);
            let (loss, _) = self.loss_graph(&mut g, batch, &only)?;
            out.push(g.backward(loss).global_norm());
        }
        Ok(out)
    }

    /// Log-probabilities of every motion token of each window under the
    /// policy (softmax over the token's legal range, temperature 1), as one
    /// column on the tape, plus the window index of each row.
    pub fn motion_log_probs(&self, g: &mut Graph, windows: &[(AudioTokens, TokenGrid)]) -> Result<(Var, Vec<usize>)> {
        let lay = self.config.layout();
        let mut inputs = Vec::with_capacity(windows.len());
        // (layer, part) -> [(row, local id, window)]
        let mut groups: Vec<Vec<(usize, usize, usize)>> = vec![Vec::new(); self.config.motion_layers * self.config.parts];
        let mut base = 0;
        for (w, (audio, grid)) in windows.iter().enumerate() {
            let pack = pack_sequence(&self.config, audio, grid, None)?;
            let n = pack.len();
            for i in 1..n {
                if let Slot::Motion { layer, part, .. } = pack.slots[i] {
                    let local = pack.ids[i] - lay.motion_range(layer, part).start;
                    groups[layer * self.config.parts + part].push((base + i - 1, local, w));
                }
            }
            inputs.push(pack.ids[..n - 1].to_vec());
            base += n - 1;
        }
        let logits = self.forward(g, &inputs);
        let mut cols = Vec::new();
        let mut owner = Vec::new();
        for (gi, members) in groups.iter().enumerate() {
            if members.is_empty() {
                continue;
            }
            let range = lay.motion_range(gi / self.config.parts, gi % self.config.parts);
            let rows = g.gather_rows(logits, members.iter().map(|m| m.0).collect());
            let sub = g.slice_cols(rows, range.start, range.len());
            let lp = g.log_softmax(sub);
            cols.push(g.pick(lp, members.iter().map(|m| m.1).collect()));
            owner.extend(members.iter().map(|m| m.2));
        }
        if cols.is_empty() {
            return Err(Error::config("windows hold no motion tokens"));
        }
        Ok((g.concat_rows(&cols), owner))
    }

    /// Feeds tokens through the cached stack; returns the last row's logits.
    fn feed(&self, cache: &mut KvCache, ids: &[usize]) -> Vec<f64> {
        let d = self.config.width;
        let table = self.store.get(self.embed.table);
        let mut pe = vec![0.0; d];
        let mut last = Vec::new();
        for &id in ids {
            sinusoidal_row(cache.len() as f64, d, &mut pe);
            let x: Vec<f64> = table.row(id).iter().zip(&pe).map(|(a, b)| a + b).collect();
            last = self.body.step(&self.store, cache, &x);
        }
        let h = self.norm.apply(&self.store, &last);
        self.head.apply(&self.store, &h)
    }

    pub fn session(&self, exemplar: Option<TokenGrid>, temperature: f64, top_k: usize, seed: u64) -> GenerationSession {
        let c = &self.config;
        GenerationSession {
            audio: AudioTokens::empty(c.audio_layers, c.audio_size),
            motion: TokenGrid::zeros(0, c.motion_layers, c.parts, c.codebook_size),
            exemplar,
            temperature,
            top_k,
            rng: crate::seeded(seed),
            chunks: 0,
        }
    }

    /// Generates the motion tokens of one chunk given its audio. History is
    /// left-truncated to `window_chunks - 1` chunks.
    pub fn generate_window(&self, session: &mut GenerationSession, audio_chunk: &AudioTokens) -> Result<TokenGrid> {
        let cfg = &self.config;
        if audio_chunk.frames() != cfg.audio_frames_per_chunk || audio_chunk.layers != cfg.audio_layers {
            return Err(Error::Alignment("audio chunk must hold one chunk of frames".into()));
        }
        let keep = (cfg.window_chunks - 1).min(session.history_chunks(cfg));
        session.truncate(cfg, keep);
        let lay = cfg.layout();
        let mut ids = vec![lay.special(Special::Bos)];
        let mut slots = vec![Slot::Bos];
        if let Some(ex) = &session.exemplar {
            if ex.steps > 0 {
                push_exemplar(cfg, &mut ids, &mut slots, ex)?;
            }
        }
        for c in 0..keep {
            push_audio_chunk(cfg, &mut ids, &mut slots, &session.audio, c)?;
            for slot in motion_slots(cfg, c) {
                let Slot::Motion { step, layer, part, .. } = slot else { continue };
                let id = session.motion.get(c * cfg.steps_per_chunk + step, layer, part) as usize;
                ids.push(lay.encode(Token::Motion { layer, part, id })?);
            }
        }
        push_audio_chunk(cfg, &mut ids, &mut slots, audio_chunk, 0)?;
        let mut cache = KvCache::default();
        let mut logits = self.feed(&mut cache, &ids);
        let mut out = TokenGrid::zeros(cfg.steps_per_chunk, cfg.motion_layers, cfg.parts, cfg.codebook_size);
        let slots = motion_slots(cfg, 0);
        for (i, slot) in slots.iter().enumerate() {
            let Slot::Motion { step, layer, part, .. } = *slot else { continue };
            let range = lay.motion_range(layer, part);
            let id = sample_next(&logits, range.clone(), session.temperature, session.top_k, &mut session.rng)?;
            out.set(step, layer, part, (id - range.start) as u16);
            if i + 1 < slots.len() {
                logits = self.feed(&mut cache, &[id]);
            }
        }
        session.audio.append(audio_chunk);
        session.motion.append(&out);
        session.chunks += 1;
        Ok(out)
    }

    /// Streams every whole chunk of `audio` through [`Self::generate_window`].
    pub fn generate(&self, session: &mut GenerationSession, audio: &AudioTokens) -> Result<TokenGrid> {
        let cfg = &self.config;
        let chunks = audio.frames() / cfg.audio_frames_per_chunk;
        let mut out = TokenGrid::zeros(0, cfg.motion_layers, cfg.parts, cfg.codebook_size);
        for c in 0..chunks {
            let chunk = audio.slice_frames(c * cfg.audio_frames_per_chunk, cfg.audio_frames_per_chunk);
            out.append(&self.generate_window(session, &chunk)?);
        }
        Ok(out)
    }
}

/// Mutable per-stream state: the visible history and the sampler.
#[derive(Debug, Clone)]
pub struct GenerationSession {
    pub audio: AudioTokens,
    pub motion: TokenGrid,
    pub exemplar: Option<TokenGrid>,
    pub temperature: f64,
    pub top_k: usize,
    pub rng: Rng,
    /// Chunks generated so far.
    pub chunks: usize,
}

impl GenerationSession {
    fn history_chunks(&self, cfg: &GeneratorConfig) -> usize {
        self.motion.steps / cfg.steps_per_chunk
    }

    fn truncate(&mut self, cfg: &GeneratorConfig, keep: usize) {
        let have = self.history_chunks(cfg);
        if have > keep {
            let drop = have - keep;
            self.audio = self.audio.slice_frames(drop * cfg.audio_frames_per_chunk, keep * cfg.audio_frames_per_chunk);
            self.motion = self.motion.slice_steps(drop * cfg.steps_per_chunk, keep * cfg.steps_per_chunk);
        }
    }

    /// Replaces the history with given paired streams (whole chunks).
    pub fn prime(&mut self, cfg: &GeneratorConfig, audio: &AudioTokens, grid: &TokenGrid) -> Result<()> {
        chunk_count(cfg, audio, grid)?;
        self.audio = audio.clone();
        self.motion = grid.clone();
        Ok(())
    }
}

/// Adam over the generator with optional context corruption.
pub struct GeneratorTrainer {
    pub adam: Adam,
    pub corruption: Option<(CorruptionMode, f64)>,
}

impl GeneratorTrainer {
    pub fn new(gen: &Generator, corruption: Option<(CorruptionMode, f64)>) -> Self {
        Self {
            adam: Adam::new(AdamConfig::default().with_lr(gen.config.lr)),
            corruption,
        }
    }

    pub fn step(&mut self, gen: &mut Generator, windows: &[TrainingWindow], rng: &mut Rng) -> Result<GeneratorLoss> {
        let batch = gen.prepare_batch(windows, self.corruption, rng)?;
        let weights = gen.config.layer_weights();
        let (grads, report) = {
            let mut g = Graph::new(&gen.store);
            let (loss, report) = gen.loss_graph(&mut g, &batch, &weights)?;
            (g.backward(loss), report)
        };
        self.adam.step(&mut gen.store, &grads);
        Ok(report)
    }
}

/// Random whole-chunk windows of up to `window_chunks` chunks, with an
/// exemplar cut from elsewhere in the same clip when `exemplar_prob` fires.
pub fn sample_training_windows(
    cfg: &GeneratorConfig,
    clips: &[(AudioTokens, TokenGrid)],
    count: usize,
    exemplar_prob: f64,
    rng: &mut Rng,
) -> Result<Vec<TrainingWindow>> {
    if clips.is_empty() {
        return Err(Error::config("no clips to sample from"));
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let (audio, grid) = &clips[rng.gen_range(0..clips.len())];
        let chunks = chunk_count(cfg, audio, grid)?;
        if chunks == 0 {
            return Err(Error::TooShort { needed: 1, got: 0 });
        }
        let len = cfg.window_chunks.min(chunks);
        let start = rng.gen_range(0..=chunks - len);
        let a = audio.slice_frames(start * cfg.audio_frames_per_chunk, len * cfg.audio_frames_per_chunk);
        let g = grid.slice_steps(start * cfg.steps_per_chunk, len * cfg.steps_per_chunk);
        let exemplar = if exemplar_prob > 0.0 && rng.gen_bool(exemplar_prob.min(1.0)) && grid.steps >= cfg.exemplar_steps {
            let s = rng.gen_range(0..=grid.steps - cfg.exemplar_steps);
            Some(grid.slice_steps(s, cfg.exemplar_steps))
        } else {
            None
        };
        out.push(TrainingWindow { audio: a, grid: g, exemplar });
    }
    Ok(out)
}
