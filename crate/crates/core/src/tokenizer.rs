//! Causal attention motion tokenizer with residual vector quantization.
//!
//! Every body part has its own encoder, codebook stack and decoder, so the
//! tokens of one part never see another part's channels. The encoder runs
//! causal attention over frames, then folds each group of `ratio` frames into
//! one latent through two summed paths (a pooled projection and a
//! concatenate-then-MLP path). The decoder mirrors it with row replication
//! plus a channel-expansion MLP.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{AttnMask, Gradients, Graph, ParamStore, Var};
use crate::kinematics::{self, AuxLoss, AuxWeights, MotionClip, Skeleton, IDENTITY_6D, ROOT_CHANNELS};
use crate::nn::{sinusoidal, Linear, Mlp, Transformer};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;
use crate::Rng;

/// A named group of joints (and optionally the root channels) sharing one
/// encoder and codebook stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodyPart {
    pub name: String,
    pub joints: Vec<usize>,
    /// Owns root velocity and height.
    pub root_channels: bool,
}

impl BodyPart {
    /// Frame columns fed to this part, in ascending order.
    pub fn channels(&self) -> Vec<usize> {
        let mut c = Vec::new();
        if self.root_channels {
            c.extend(0..ROOT_CHANNELS);
        }
        let mut joints = self.joints.clone();
        joints.sort_unstable();
        for j in joints {
            c.extend(ROOT_CHANNELS + 6 * j..ROOT_CHANNELS + 6 * j + 6);
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodyPartition {
    pub parts: Vec<BodyPart>,
}

impl BodyPartition {
    /// Upper body, lower body (with root), hands for [`Skeleton::humanoid`].
    pub fn humanoid() -> Self {
        let part = |name: &str, joints: Vec<usize>, root| BodyPart {
            name: String::from(name),
            joints,
            root_channels: root,
        };
        Self {
            parts: vec![
                part("upper", vec![1, 2, 3, 4, 5, 6, 9, 10], false),
                part("lower", vec![0, 13, 14, 15, 16, 17, 18, 19, 20], true),
                part("hands", vec![7, 8, 11, 12], false),
            ],
        }
    }

    /// Everything in one part.
    pub fn whole(num_joints: usize) -> Self {
        Self {
            parts: vec![BodyPart {
                name: String::from("body"),
                joints: (0..num_joints).collect(),
                root_channels: true,
            }],
        }
    }

    pub fn len(&self) -> usize {
        self.parts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parts.is_empty()
    }

    pub fn validate(&self, num_joints: usize) -> Result<()> {
        if self.parts.is_empty() {
            return Err(Error::config("body partition has no parts"));
        }
        let mut seen = vec![0usize; num_joints];
        for p in &self.parts {
            for &j in &p.joints {
                if j >= num_joints {
                    return Err(Error::config(format!("part {} names joint {j} of {num_joints}", p.name)));
                }
                seen[j] += 1;
            }
        }
        if seen.iter().any(|&c| c != 1) {
            return Err(Error::config("body parts must cover every joint exactly once"));
        }
        if self.parts.iter().filter(|p| p.root_channels).count() != 1 {
            return Err(Error::config("exactly one body part owns the root channels"));
        }
        if self.parts.iter().any(|p| p.channels().is_empty()) {
            return Err(Error::config("empty body part"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerConfig {
    /// Frames per latent step.
    pub downsample_ratio: usize,
    pub codebook_size: usize,
    pub latent_dim: usize,
    pub rvq_depth: usize,
    /// Frames visible to each causal attention row (including itself).
    pub lookback_frames: usize,
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub commitment_weight: f64,
    pub aux_weights: AuxWeights,
    pub ema_decay: f64,
    /// Entries used fewer times than this over an epoch are re-seeded.
    pub dead_code_threshold: f64,
    /// Start the latent projection at zero.
    pub zero_init_latent: bool,
    pub lr: f64,
    pub parts: BodyPartition,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            downsample_ratio: 4,
            codebook_size: 64,
            latent_dim: 32,
            rvq_depth: 3,
            lookback_frames: 32,
            layers: 2,
            heads: 4,
            width: 32,
            commitment_weight: 0.5,
            aux_weights: AuxWeights::default(),
            ema_decay: 0.99,
            dead_code_threshold: 1.0,
            zero_init_latent: false,
            lr: 2e-3,
            parts: BodyPartition::humanoid(),
        }
    }
}

impl TokenizerConfig {
    pub fn validate(&self, num_joints: usize) -> Result<()> {
        if self.downsample_ratio == 0 {
            return Err(Error::config("downsample_ratio must be >= 1"));
        }
        if self.codebook_size < 2 || self.codebook_size > u16::MAX as usize + 1 {
            return Err(Error::config("codebook_size must be in [2, 65536]"));
        }
        if self.rvq_depth == 0 {
            return Err(Error::config("rvq_depth must be >= 1"));
        }
        if self.lookback_frames == 0 {
            return Err(Error::config("lookback_frames must be >= 1"));
        }
        if self.latent_dim == 0 || self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::config("width must be a positive multiple of heads"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::config("ema_decay must be in [0, 1)"));
        }
        if self.commitment_weight < 0.0 {
            return Err(Error::config("commitment_weight must be nonnegative"));
        }
        self.parts.validate(num_joints)
    }

    /// Frames of history a streaming encoder or decoder must keep so new
    /// outputs match an offline pass exactly.
    pub fn history_frames(&self) -> usize {
        let r = self.downsample_ratio;
        let need = self.layers * (self.lookback_frames - 1);
        need.div_ceil(r) * r
    }
}

/// Discrete tokens, `steps x layers x parts`, stored step-major, then layer,
/// then part.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenGrid {
    pub steps: usize,
    pub layers: usize,
    pub parts: usize,
    pub codebook_size: usize,
    pub indices: Vec<u16>,
}

impl TokenGrid {
    pub fn zeros(steps: usize, layers: usize, parts: usize, codebook_size: usize) -> Self {
        Self {
            steps,
            layers,
            parts,
            codebook_size,
            indices: vec![0; steps * layers * parts],
        }
    }

    pub fn new(steps: usize, layers: usize, parts: usize, codebook_size: usize, indices: Vec<u16>) -> Result<Self> {
        let g = Self {
            steps,
            layers,
            parts,
            codebook_size,
            indices,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.indices.len() != self.steps * self.layers * self.parts {
            return Err(Error::dim("token grid length does not match its shape"));
        }
        if let Some(&bad) = self.indices.iter().find(|&&i| i as usize >= self.codebook_size) {
            return Err(Error::Token {
                index: bad as usize,
                size: self.codebook_size,
            });
        }
        Ok(())
    }

    #[inline]
    pub fn offset(&self, step: usize, layer: usize, part: usize) -> usize {
        (step * self.layers + layer) * self.parts + part
    }

    #[inline]
    pub fn get(&self, step: usize, layer: usize, part: usize) -> u16 {
        self.indices[self.offset(step, layer, part)]
    }

    #[inline]
    pub fn set(&mut self, step: usize, layer: usize, part: usize, v: u16) {
        let o = self.offset(step, layer, part);
        self.indices[o] = v;
    }

    /// Tokens per step.
    pub fn stride(&self) -> usize {
        self.layers * self.parts
    }

    pub fn slice_steps(&self, start: usize, len: usize) -> TokenGrid {
        let s = self.stride();
        TokenGrid {
            steps: len,
            layers: self.layers,
            parts: self.parts,
            codebook_size: self.codebook_size,
            indices: self.indices[start * s..(start + len) * s].to_vec(),
        }
    }

    pub fn append(&mut self, other: &TokenGrid) {
        assert_eq!((self.layers, self.parts), (other.layers, other.parts), "grid shapes differ");
        self.indices.extend_from_slice(&other.indices);
        self.steps += other.steps;
    }
}

/// `K x d` tables, one per (layer, part), indexed `layer * parts + part`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebooks {
    pub size: usize,
    pub dim: usize,
    pub depth: usize,
    pub parts: usize,
    pub tables: Vec<Tensor>,
}

impl Codebooks {
    /// Small random entries; entry 0 of every residual layer is zero.
    pub fn random(size: usize, dim: usize, depth: usize, parts: usize, rng: &mut Rng) -> Self {
        let mut tables = Vec::with_capacity(depth * parts);
        for q in 0..depth {
            for _ in 0..parts {
                let mut t = Tensor::randn(size, dim, 0.1 / (1 + q) as f64, rng);
                if q > 0 {
                    t.row_mut(0).iter_mut().for_each(|v| *v = 0.0);
                }
                tables.push(t);
            }
        }
        Self {
            size,
            dim,
            depth,
            parts,
            tables,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.dim == 0 {
            return Err(Error::config("empty codebook"));
        }
        if self.tables.len() != self.depth * self.parts {
            return Err(Error::dim("codebook table count does not match depth x parts"));
        }
        for t in &self.tables {
            if t.shape() != (self.size, self.dim) {
                return Err(Error::dim("codebook table shape"));
            }
            if !t.all_finite() {
                return Err(Error::numerical("codebook"));
            }
        }
        Ok(())
    }

    pub fn table(&self, layer: usize, part: usize) -> &Tensor {
        &self.tables[layer * self.parts + part]
    }

    pub fn table_mut(&mut self, layer: usize, part: usize) -> &mut Tensor {
        &mut self.tables[layer * self.parts + part]
    }

    /// Tables of one part, layer by layer.
    pub fn part_tables(&self, part: usize) -> Vec<&Tensor> {
        (0..self.depth).map(|q| self.table(q, part)).collect()
    }

    /// Sum of the selected entries for one part: `steps x d`.
    pub fn lookup(&self, grid: &TokenGrid, part: usize) -> Result<Tensor> {
        if grid.layers != self.depth || grid.parts != self.parts || grid.codebook_size != self.size {
            return Err(Error::dim("token grid does not match codebooks"));
        }
        grid.validate()?;
        let mut out = Tensor::zeros(grid.steps, self.dim);
        for t in 0..grid.steps {
            for q in 0..self.depth {
                let e = self.table(q, part).row(grid.get(t, q, part) as usize);
                for (o, v) in out.row_mut(t).iter_mut().zip(e) {
                    *o += v;
                }
            }
        }
        Ok(out)
    }
}

/// Index of the nearest row of `table` to `v` in L2; ties go to the lowest index.
pub fn nearest(table: &Tensor, v: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for k in 0..table.rows() {
        let d: f64 = table.row(k).iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best
}

/// Result of quantizing one latent trajectory through a codebook stack.
#[derive(Debug, Clone, PartialEq)]
pub struct RvqOutput {
    /// `[step][layer]`.
    pub indices: Vec<Vec<usize>>,
    /// Sum of the selected entries.
    pub quantized: Tensor,
    /// Selected entries per layer.
    pub layer_entries: Vec<Tensor>,
    /// Input of each layer: `z` minus everything quantized before it.
    pub residuals: Vec<Tensor>,
}

/// Residual quantization of `z` (`steps x d`) through `tables` (layer order).
pub fn rvq_quantize(z: &Tensor, tables: &[&Tensor]) -> Result<RvqOutput> {
    if tables.is_empty() || tables.iter().any(|t| t.rows() == 0) {
        return Err(Error::config("empty codebook"));
    }
    if tables.iter().any(|t| t.cols() != z.cols()) {
        return Err(Error::dim("latent width does not match codebook width"));
    }
    if !z.all_finite() {
        return Err(Error::numerical("latents"));
    }
    let (n, d) = z.shape();
    let mut residual = z.clone();
    let mut quantized = Tensor::zeros(n, d);
    let mut indices = vec![Vec::with_capacity(tables.len()); n];
    let mut layer_entries = Vec::with_capacity(tables.len());
    let mut residuals = Vec::with_capacity(tables.len());
    for table in tables {
        residuals.push(residual.clone());
        let mut entries = Tensor::zeros(n, d);
        for t in 0..n {
            let k = nearest(table, residual.row(t));
            indices[t].push(k);
            let e = table.row(k);
            entries.row_mut(t).copy_from_slice(e);
            for ((r, qv), ev) in residual.row_mut(t).iter_mut().zip(quantized.row_mut(t).iter_mut()).zip(e) {
                *r -= ev;
                *qv += ev;
            }
        }
        layer_entries.push(entries);
    }
    Ok(RvqOutput {
        indices,
        quantized,
        layer_entries,
        residuals,
    })
}

/// Encoder, latent projections and decoder for one body part.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartCodec {
    pub channels: Vec<usize>,
    pub in_proj: Linear,
    pub encoder: Transformer,
    pub pool_proj: Linear,
    pub concat_mlp: Mlp,
    pub latent_out: Linear,
    pub latent_in: Linear,
    pub expand_mlp: Mlp,
    pub decoder: Transformer,
    pub out_proj: Linear,
}

/// Per-latent-step encoder outputs of every part.
pub type Latents = Vec<Tensor>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tokenizer {
    pub config: TokenizerConfig,
    pub num_joints: usize,
    pub store: ParamStore,
    pub parts: Vec<PartCodec>,
    pub codebooks: Codebooks,
}

/// Loss terms of one tokenizer evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenizerLoss {
    pub total: f64,
    pub reconstruction: f64,
    pub commitment: f64,
    pub aux: AuxLoss,
}

fn gather_cols(t: &Tensor, cols: &[usize]) -> Tensor {
    let mut out = Tensor::zeros(t.rows(), cols.len());
    for r in 0..t.rows() {
        let src = t.row(r);
        for (o, &c) in out.row_mut(r).iter_mut().zip(cols) {
            *o = src[c];
        }
    }
    out
}

fn scatter_cols(dst: &mut Tensor, src: &Tensor, cols: &[usize]) {
    for r in 0..src.rows() {
        let s = src.row(r);
        let d = dst.row_mut(r);
        for (&c, v) in cols.iter().zip(s) {
            d[c] = *v;
        }
    }
}

/// Frame positions of packed segments, each starting at its own offset.
fn packed_positions(segments: &[usize], starts: &[usize]) -> Vec<f64> {
    let mut p = Vec::new();
    for (&len, &s) in segments.iter().zip(starts) {
        p.extend((s..s + len).map(|i| i as f64));
    }
    p
}

/// `L = |m̂ - m|₁ + η Σ_q |z^q - sg(ẑ^q)|² + Φ`, value only.
///
/// `residuals[p][q]` is the input to layer `q` of part `p` and
/// `entries[p][q]` the entry it selected. The reconstruction term is a mean
/// over frame channels; the commitment term sums over latent channels,
/// layers and parts and averages over steps.
pub fn tokenizer_loss(
    m: &MotionClip,
    m_hat: &MotionClip,
    residuals: &[Vec<Tensor>],
    entries: &[Vec<Tensor>],
    skeleton: &Skeleton,
    config: &TokenizerConfig,
) -> Result<TokenizerLoss> {
    if m.frames.shape() != m_hat.frames.shape() {
        return Err(Error::dim("reconstruction shape"));
    }
    let reconstruction = m_hat.frames.zip_map(&m.frames, |a, b| (a - b).abs()).mean();
    let mut commitment = 0.0;
    for (rp, ep) in residuals.iter().zip(entries) {
        for (r, e) in rp.iter().zip(ep) {
            if r.shape() != e.shape() {
                return Err(Error::dim("commitment shapes"));
            }
            commitment += r.zip_map(e, |a, b| (a - b) * (a - b)).sum() / r.rows().max(1) as f64;
        }
    }
    let aux = kinematics::auxiliary_loss(skeleton, m_hat, m, &config.aux_weights)?;
    let total = reconstruction + config.commitment_weight * commitment + aux.total;
    for (name, v) in [
        ("reconstruction", reconstruction),
        ("commitment", commitment),
        ("auxiliary", aux.total),
    ] {
        if !v.is_finite() {
            return Err(Error::numerical(name));
        }
    }
    Ok(TokenizerLoss {
        total,
        reconstruction,
        commitment,
        aux,
    })
}

impl Tokenizer {
    pub fn new(config: TokenizerConfig, num_joints: usize, rng: &mut Rng) -> Result<Self> {
        config.validate(num_joints)?;
        let mut store = ParamStore::new();
        let c = &config;
        let (w, r, d) = (c.width, c.downsample_ratio, c.latent_dim);
        let mut parts = Vec::with_capacity(c.parts.len());
        for (pi, part) in c.parts.parts.iter().enumerate() {
            let name = format!("part{pi}");
            let channels = part.channels();
            let cp = channels.len();
            let latent_out = if c.zero_init_latent {
                Linear::zeroed(&mut store, &format!("{name}.latent_out"), w, d)
            } else {
                Linear::new(&mut store, &format!("{name}.latent_out"), w, d, rng)
            };
            let out_proj = Linear::new(&mut store, &format!("{name}.out_proj"), w, cp, rng);
            // Start decoding near the rest pose so early outputs are valid rotations.
            if let Some(b) = out_proj.bias {
                let rest = rest_frame(num_joints);
                let bias = store.get_mut(b);
                for (o, &ch) in bias.data_mut().iter_mut().zip(&channels) {
                    *o = rest[ch];
                }
            }
            let codec = PartCodec {
                in_proj: Linear::new(&mut store, &format!("{name}.in_proj"), cp, w, rng),
                encoder: Transformer::new(&mut store, &format!("{name}.encoder"), c.layers, w, c.heads, rng),
                pool_proj: Linear::new(&mut store, &format!("{name}.pool_proj"), w, w, rng),
                concat_mlp: Mlp::new(&mut store, &format!("{name}.concat_mlp"), r * w, w, w, rng),
                latent_out,
                latent_in: Linear::new(&mut store, &format!("{name}.latent_in"), d, w, rng),
                expand_mlp: Mlp::new(&mut store, &format!("{name}.expand_mlp"), w, w, r * w, rng),
                decoder: Transformer::new(&mut store, &format!("{name}.decoder"), c.layers, w, c.heads, rng),
                out_proj,
                channels,
            };
            parts.push(codec);
        }
        let codebooks = Codebooks::random(c.codebook_size, d, c.rvq_depth, c.parts.len(), rng);
        Ok(Self {
            config,
            num_joints,
            store,
            parts,
            codebooks,
        })
    }

    pub fn frame_dim(&self) -> usize {
        ROOT_CHANNELS + 6 * self.num_joints
    }

    pub fn num_parts(&self) -> usize {
        self.parts.len()
    }

    fn mask(&self, segments: Vec<usize>) -> AttnMask {
        AttnMask::causal(Some(self.config.lookback_frames)).with_segments(segments)
    }

    /// Encoder graph for one part: `frames x channels` in, `steps x d` out.
    fn encode_graph(&self, g: &mut Graph, part: usize, x: Var, segments: &[usize], starts: &[usize]) -> Var {
        let pc = &self.parts[part];
        let r = self.config.downsample_ratio;
        let w = self.config.width;
        let rows = g.shape(x).0;
        let h = pc.in_proj.forward(g, x);
        let pe = g.constant(sinusoidal(packed_positions(segments, starts), w));
        let h = g.add(h, pe);
        let h = pc.encoder.forward(g, h, &self.mask(segments.to_vec()));
        let pooled = g.pool_rows(h, r);
        let pooled = pc.pool_proj.forward(g, pooled);
        let stacked = g.reshape(h, rows / r, r * w);
        let stacked = pc.concat_mlp.forward(g, stacked);
        let s = g.add(pooled, stacked);
        pc.latent_out.forward(g, s)
    }

    /// Decoder graph for one part: `steps x d` in, `frames x channels` out.
    fn decode_graph(&self, g: &mut Graph, part: usize, z: Var, step_segments: &[usize], step_starts: &[usize]) -> Var {
        let pc = &self.parts[part];
        let r = self.config.downsample_ratio;
        let w = self.config.width;
        let steps = g.shape(z).0;
        let u = pc.latent_in.forward(g, z);
        let rep = g.repeat_rows(u, r);
        let exp = pc.expand_mlp.forward(g, u);
        let exp = g.reshape(exp, steps * r, w);
        let h = g.add(rep, exp);
        let segments: Vec<usize> = step_segments.iter().map(|s| s * r).collect();
        let starts: Vec<usize> = step_starts.iter().map(|s| s * r).collect();
        let pe = g.constant(sinusoidal(packed_positions(&segments, &starts), w));
        let h = g.add(h, pe);
        let h = pc.decoder.forward(g, h, &self.mask(segments));
        pc.out_proj.forward(g, h)
    }

    fn check_frames(&self, frames: &Tensor) -> Result<()> {
        if frames.cols() != self.frame_dim() {
            return Err(Error::dim(format!(
                "frame width {} does not match tokenizer width {}",
                frames.cols(),
                self.frame_dim()
            )));
        }
        let r = self.config.downsample_ratio;
        if frames.rows() % r != 0 {
            return Err(Error::PaddingRequired {
                len: frames.rows(),
                ratio: r,
            });
        }
        if !frames.all_finite() {
            return Err(Error::numerical("motion frames"));
        }
        Ok(())
    }

    /// Latents of frames whose first row sits at absolute frame `start`.
    fn encode_at(&self, frames: &Tensor, start: usize) -> Result<Latents> {
        self.check_frames(frames)?;
        let mut out = Vec::with_capacity(self.parts.len());
        for (p, pc) in self.parts.iter().enumerate() {
            let mut g = Graph::new(&self.store);
            let x = g.constant(gather_cols(frames, &pc.channels));
            let z = self.encode_graph(&mut g, p, x, &[frames.rows()], &[start]);
            out.push(g.value(z).clone());
        }
        Ok(out)
    }

    /// Continuous latents, one `n x d` tensor per part.
    pub fn encode(&self, clip: &MotionClip) -> Result<Latents> {
        self.encode_at(&clip.frames, 0)
    }

    /// Quantizes every part's latents into one grid.
    pub fn quantize(&self, latents: &Latents) -> Result<(TokenGrid, Vec<RvqOutput>)> {
        if latents.len() != self.parts.len() {
            return Err(Error::dim("latent part count"));
        }
        let n = latents[0].rows();
        let c = &self.codebooks;
        let mut grid = TokenGrid::zeros(n, c.depth, c.parts, c.size);
        let mut outs = Vec::with_capacity(latents.len());
        for (p, z) in latents.iter().enumerate() {
            let o = rvq_quantize(z, &c.part_tables(p))?;
            for (t, idx) in o.indices.iter().enumerate() {
                for (q, &k) in idx.iter().enumerate() {
                    grid.set(t, q, p, k as u16);
                }
            }
            outs.push(o);
        }
        Ok((grid, outs))
    }

    pub fn tokenize(&self, clip: &MotionClip) -> Result<TokenGrid> {
        let z = self.encode(clip)?;
        Ok(self.quantize(&z)?.0)
    }

    fn decode_at(&self, latents: &Latents, start_step: usize) -> Result<Tensor> {
        if latents.len() != self.parts.len() {
            return Err(Error::dim("latent part count"));
        }
        let n = latents[0].rows();
        let r = self.config.downsample_ratio;
        let mut frames = Tensor::zeros(n * r, self.frame_dim());
        for (p, pc) in self.parts.iter().enumerate() {
            let z = &latents[p];
            if z.shape() != (n, self.config.latent_dim) {
                return Err(Error::dim("latent shape"));
            }
            let mut g = Graph::new(&self.store);
            let zv = g.constant(z.clone());
            let out = self.decode_graph(&mut g, p, zv, &[n], &[start_step]);
            scatter_cols(&mut frames, g.value(out), &pc.channels);
        }
        Ok(frames)
    }

    /// Frames from (quantized or continuous) latents.
    pub fn decode_latents(&self, latents: &Latents, fps: f64) -> Result<MotionClip> {
        Ok(MotionClip {
            fps,
            frames: self.decode_at(latents, 0)?,
        })
    }

    /// Codebook lookup per part.
    pub fn dequantize(&self, grid: &TokenGrid) -> Result<Latents> {
        (0..self.parts.len()).map(|p| self.codebooks.lookup(grid, p)).collect()
    }

    pub fn decode(&self, grid: &TokenGrid, fps: f64) -> Result<MotionClip> {
        let z = self.dequantize(grid)?;
        self.decode_latents(&z, fps)
    }

    /// `decode(quantize(encode(clip)))`.
    pub fn reconstruct(&self, clip: &MotionClip) -> Result<MotionClip> {
        let grid = self.tokenize(clip)?;
        self.decode(&grid, clip.fps)
    }

    /// Time-pooled continuous latents of every part, concatenated: the feature
    /// vector used for distribution metrics.
    pub fn features(&self, clip: &MotionClip) -> Result<Vec<f64>> {
        let padded = clip.pad_front_to_multiple(self.config.downsample_ratio);
        let z = self.encode(&padded)?;
        let mut f = Vec::with_capacity(z.len() * self.config.latent_dim);
        for t in &z {
            for c in 0..t.cols() {
                f.push((0..t.rows()).map(|r| t.get(r, c)).sum::<f64>() / t.rows() as f64);
            }
        }
        Ok(f)
    }

    pub fn encoder_state(&self) -> EncoderState {
        EncoderState {
            offset: 0,
            history: Tensor::zeros(0, self.frame_dim()),
        }
    }

    /// Encodes new frames (a multiple of the ratio) given carried history.
    /// The latents equal the matching rows of an offline pass over the full
    /// stream.
    pub fn encode_stream(&self, state: &mut EncoderState, frames: &Tensor) -> Result<Latents> {
        self.check_frames(frames)?;
        let r = self.config.downsample_ratio;
        let buf = Tensor::concat_rows(&[&state.history, frames]);
        let all = self.encode_at(&buf, state.offset)?;
        let skip = state.history.rows() / r;
        let new = frames.rows() / r;
        let keep = self.config.history_frames().min(buf.rows());
        state.offset += buf.rows() - keep;
        state.history = buf.slice_rows(buf.rows() - keep, keep);
        Ok(all.into_iter().map(|z| z.slice_rows(skip, new)).collect())
    }

    pub fn decoder_state(&self) -> DecoderState {
        DecoderState {
            offset_steps: 0,
            history: vec![Tensor::zeros(0, self.config.latent_dim); self.parts.len()],
        }
    }

    /// Decodes new latent steps given carried latent history.
    pub fn decode_stream(&self, state: &mut DecoderState, latents: &Latents) -> Result<Tensor> {
        if latents.len() != self.parts.len() {
            return Err(Error::dim("latent part count"));
        }
        let r = self.config.downsample_ratio;
        let bufs: Latents = state
            .history
            .iter()
            .zip(latents)
            .map(|(h, z)| Tensor::concat_rows(&[h, z]))
            .collect();
        let frames = self.decode_at(&bufs, state.offset_steps)?;
        let skip = state.history[0].rows();
        let new = latents[0].rows();
        let total = bufs[0].rows();
        let keep = (self.config.history_frames() / r).min(total);
        state.offset_steps += total - keep;
        state.history = bufs.iter().map(|b| b.slice_rows(total - keep, keep)).collect();
        Ok(frames.slice_rows(skip * r, new * r))
    }

    /// Loss and parameter gradients on a batch of clips (each a multiple of
    /// the ratio long). With `quantize` off the decoder reads the continuous
    /// latents and the commitment term vanishes.
    pub fn loss_and_grads(
        &self,
        skeleton: &Skeleton,
        batch: &[MotionClip],
        quantize: bool,
    ) -> Result<(TokenizerLoss, Gradients, Vec<BatchLatents>)> {
        if batch.is_empty() {
            return Err(Error::config("empty batch"));
        }
        let r = self.config.downsample_ratio;
        for c in batch {
            self.check_frames(&c.frames)?;
        }
        let segments: Vec<usize> = batch.iter().map(|c| c.len()).collect();
        let starts = vec![0; batch.len()];
        let step_segments: Vec<usize> = segments.iter().map(|s| s / r).collect();
        let all_frames = Tensor::concat_rows(&batch.iter().map(|c| &c.frames).collect::<Vec<_>>());
        let total_rows = all_frames.rows();
        let dim = self.frame_dim();
        let bsz = batch.len() as f64;

        let mut g = Graph::new(&self.store);
        let mut outputs = Vec::with_capacity(self.parts.len());
        let mut latents_out = Vec::with_capacity(self.parts.len());
        let mut commit_value = 0.0;
        let mut loss_terms = Vec::new();
        for (p, pc) in self.parts.iter().enumerate() {
            let x = g.constant(gather_cols(&all_frames, &pc.channels));
            let z = self.encode_graph(&mut g, p, x, &segments, &starts);
            let zval = g.value(z).clone();
            let dec_in = if quantize {
                let o = rvq_quantize(&zval, &self.codebooks.part_tables(p))?;
                let steps = zval.rows() as f64;
                // Σ_q |z - Σ_{q'≤q} ẑ^{q'}|², averaged over steps and clips.
                let mut cum = Tensor::zeros(zval.rows(), zval.cols());
                for e in &o.layer_entries {
                    cum.add_assign(e);
                    let tv = g.constant(cum.clone());
                    let d = g.sub(z, tv);
                    let sq = g.square(d);
                    let s = g.sum(sq);
                    let term = g.scale(s, self.config.commitment_weight / steps);
                    commit_value += g.value(s).item() / steps;
                    loss_terms.push(term);
                }
                let zq = g.straight_through(z, o.quantized.clone());
                latents_out.push(BatchLatents {
                    latents: zval,
                    rvq: Some(o),
                });
                zq
            } else {
                latents_out.push(BatchLatents {
                    latents: zval,
                    rvq: None,
                });
                z
            };
            let out = self.decode_graph(&mut g, p, dec_in, &step_segments, &starts);
            let target = g.constant(gather_cols(&all_frames, &pc.channels));
            let d = g.sub(out, target);
            let a = g.abs(d);
            let s = g.sum(a);
            loss_terms.push(g.scale(s, 1.0 / (total_rows * dim) as f64));
            outputs.push(out);
        }

        // Auxiliary FK loss on assembled frames, averaged over clips.
        let mut hat = Tensor::zeros(total_rows, dim);
        for (pc, &out) in self.parts.iter().zip(&outputs) {
            scatter_cols(&mut hat, g.value(out), &pc.channels);
        }
        let mut aux = AuxLoss::default();
        let mut aux_grad = Tensor::zeros(total_rows, dim);
        let mut row = 0;
        for clip in batch {
            let n = clip.len();
            let clip_hat = MotionClip {
                fps: clip.fps,
                frames: hat.slice_rows(row, n),
            };
            let (l, gr) = kinematics::auxiliary_loss_with_grad(skeleton, &clip_hat, clip, &self.config.aux_weights)?;
            aux.total += l.total / bsz;
            aux.pos += l.pos / bsz;
            aux.vel += l.vel / bsz;
            aux.acc += l.acc / bsz;
            aux.foot_vel += l.foot_vel / bsz;
            aux.foot_pos += l.foot_pos / bsz;
            for i in 0..n {
                for (o, v) in aux_grad.row_mut(row + i).iter_mut().zip(gr.row(i)) {
                    *o = v / bsz;
                }
            }
            row += n;
        }
        for (p, (pc, &out)) in self.parts.iter().zip(&outputs).enumerate() {
            let value = if p == 0 { aux.total } else { 0.0 };
            loss_terms.push(g.external(out, value, gather_cols(&aux_grad, &pc.channels)));
        }

        let mut loss = loss_terms[0];
        for &t in &loss_terms[1..] {
            loss = g.add(loss, t);
        }
        let reconstruction = hat.zip_map(&all_frames, |a, b| (a - b).abs()).mean();
        let commitment = commit_value;
        let total = g.value(loss).item();
        for (name, v) in [("reconstruction", reconstruction), ("commitment", commitment), ("auxiliary", aux.total)] {
            if !v.is_finite() {
                return Err(Error::numerical(name));
            }
        }
        let grads = g.backward(loss);
        Ok((
            TokenizerLoss {
                total,
                reconstruction,
                commitment,
                aux,
            },
            grads,
            latents_out,
        ))
    }
}

/// Encoder outputs of one part over a training batch.
#[derive(Debug, Clone)]
pub struct BatchLatents {
    pub latents: Tensor,
    pub rvq: Option<RvqOutput>,
}

/// Rest frame: zero velocity and height, identity rotations.
fn rest_frame(num_joints: usize) -> Vec<f64> {
    let mut f = vec![0.0; ROOT_CHANNELS + 6 * num_joints];
    for j in 0..num_joints {
        f[ROOT_CHANNELS + 6 * j..ROOT_CHANNELS + 6 * j + 6].copy_from_slice(&IDENTITY_6D);
    }
    f
}

/// Carried state of a streaming encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderState {
    /// Absolute frame index of `history`'s first row.
    pub offset: usize,
    pub history: Tensor,
}

/// Carried state of a streaming decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderState {
    pub offset_steps: usize,
    pub history: Latents,
}

/// EMA codebook statistics plus per-epoch usage counts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmaState {
    counts: Vec<Vec<f64>>,
    sums: Vec<Tensor>,
    usage: Vec<Vec<f64>>,
    initialized: bool,
}

impl EmaState {
    pub fn new(codebooks: &Codebooks) -> Self {
        let n = codebooks.tables.len();
        Self {
            counts: vec![vec![1.0; codebooks.size]; n],
            sums: codebooks.tables.clone(),
            usage: vec![vec![0.0; codebooks.size]; n],
            initialized: false,
        }
    }
}

/// Optimizer plus codebook statistics for tokenizer training.
#[derive(Debug, Clone)]
pub struct TokenizerTrainer {
    pub adam: Adam,
    pub ema: EmaState,
    /// Recent residuals per table, used to re-seed dead entries.
    pool: Vec<Vec<Vec<f64>>>,
    pub quantize: bool,
}

impl TokenizerTrainer {
    pub fn new(tok: &Tokenizer) -> Self {
        Self {
            adam: Adam::new(AdamConfig::default().with_lr(tok.config.lr)),
            ema: EmaState::new(&tok.codebooks),
            pool: vec![Vec::new(); tok.codebooks.tables.len()],
            quantize: true,
        }
    }

    /// One optimizer step plus EMA codebook update.
    pub fn step(&mut self, tok: &mut Tokenizer, skeleton: &Skeleton, batch: &[MotionClip], rng: &mut Rng) -> Result<TokenizerLoss> {
        if self.quantize && !self.ema.initialized {
            self.init_codebooks(tok, skeleton, batch, rng)?;
        }
        let (loss, grads, latents) = tok.loss_and_grads(skeleton, batch, self.quantize)?;
        self.adam.step(&mut tok.store, &grads);
        if !tok.store.all_finite() {
            return Err(Error::numerical("tokenizer parameters"));
        }
        if self.quantize {
            self.ema_update(tok, &latents, rng);
        }
        Ok(loss)
    }

    /// Seeds every codebook layer from batch residuals.
    fn init_codebooks(&mut self, tok: &mut Tokenizer, _skeleton: &Skeleton, batch: &[MotionClip], rng: &mut Rng) -> Result<()> {
        let frames = Tensor::concat_rows(&batch.iter().map(|c| &c.frames).collect::<Vec<_>>());
        let latents = tok.encode_at(&frames, 0)?;
        let c = &mut tok.codebooks;
        for (p, z) in latents.iter().enumerate() {
            let mut residual = z.clone();
            for q in 0..c.depth {
                let (size, parts) = (c.size, c.parts);
                let table = &mut c.tables[q * parts + p];
                let first = if q > 0 { 1 } else { 0 };
                for k in first..size {
                    let r = rng.gen_range(0..residual.rows());
                    let noise = Tensor::randn(1, residual.cols(), 1e-3, rng);
                    for ((t, v), n) in table.row_mut(k).iter_mut().zip(residual.row(r)).zip(noise.data()) {
                        *t = v + n;
                    }
                }
                for t in 0..residual.rows() {
                    let k = nearest(table, residual.row(t));
                    let e = table.row(k).to_vec();
                    for (rv, ev) in residual.row_mut(t).iter_mut().zip(e) {
                        *rv -= ev;
                    }
                }
            }
        }
        self.ema = EmaState::new(&tok.codebooks);
        self.ema.initialized = true;
        Ok(())
    }

    fn ema_update(&mut self, tok: &mut Tokenizer, latents: &[BatchLatents], rng: &mut Rng) {
        let decay = tok.config.ema_decay;
        let c = &mut tok.codebooks;
        let (size, dim, parts) = (c.size, c.dim, c.parts);
        for (p, bl) in latents.iter().enumerate() {
            let Some(rvq) = &bl.rvq else { continue };
            for q in 0..c.depth {
                let ti = q * parts + p;
                let residual = &rvq.residuals[q];
                let mut count = vec![0.0; size];
                let mut sum = Tensor::zeros(size, dim);
                for t in 0..residual.rows() {
                    let k = rvq.indices[t][q];
                    count[k] += 1.0;
                    for (s, v) in sum.row_mut(k).iter_mut().zip(residual.row(t)) {
                        *s += v;
                    }
                }
                let pool = &mut self.pool[ti];
                for _ in 0..4.min(residual.rows()) {
                    let t = rng.gen_range(0..residual.rows());
                    pool.push(residual.row(t).to_vec());
                }
                if pool.len() > 256 {
                    let excess = pool.len() - 256;
                    pool.drain(0..excess);
                }
                let counts = &mut self.ema.counts[ti];
                let sums = &mut self.ema.sums[ti];
                let usage = &mut self.ema.usage[ti];
                let table = &mut c.tables[ti];
                for k in 0..size {
                    usage[k] += count[k];
                    if q > 0 && k == 0 {
                        continue;
                    }
                    counts[k] = decay * counts[k] + (1.0 - decay) * count[k];
                    for (s, v) in sums.row_mut(k).iter_mut().zip(sum.row(k)) {
                        *s = decay * *s + (1.0 - decay) * v;
                    }
                    let n = counts[k].max(1e-5);
                    for (e, s) in table.row_mut(k).iter_mut().zip(sums.row(k)) {
                        *e = s / n;
                    }
                }
            }
        }
    }

    /// Re-seeds entries used less than the configured threshold since the
    /// last call; returns how many were re-seeded.
    pub fn end_epoch(&mut self, tok: &mut Tokenizer, rng: &mut Rng) -> usize {
        let threshold = tok.config.dead_code_threshold;
        let c = &mut tok.codebooks;
        let parts = c.parts;
        let mut reseeded = 0;
        for ti in 0..c.tables.len() {
            let q = ti / parts;
            let pool = &self.pool[ti];
            for k in 0..c.size {
                let used = self.ema.usage[ti][k];
                self.ema.usage[ti][k] = 0.0;
                if (q > 0 && k == 0) || used >= threshold || pool.is_empty() {
                    continue;
                }
                let v = &pool[rng.gen_range(0..pool.len())];
                c.tables[ti].row_mut(k).copy_from_slice(v);
                self.ema.sums[ti].row_mut(k).copy_from_slice(v);
                self.ema.counts[ti][k] = 1.0;
                reseeded += 1;
            }
        }
        reseeded
    }
}

/// Random windows of `len` frames (a multiple of the ratio) from `clips`.
pub fn sample_windows(clips: &[MotionClip], len: usize, count: usize, rng: &mut Rng) -> Vec<MotionClip> {
    let usable: Vec<&MotionClip> = clips.iter().filter(|c| c.len() >= len).collect();
    if usable.is_empty() {
        return Vec::new();
    }
    (0..count)
        .map(|_| {
            let c = usable[rng.gen_range(0..usable.len())];
            let s = rng.gen_range(0..=c.len() - len);
            MotionClip {
                fps: c.fps,
                frames: c.frames.slice_rows(s, len),
            }
        })
        .collect()
}

/// Mean per-joint position error between two clips (meters).
pub fn mpjpe(skeleton: &Skeleton, a: &MotionClip, b: &MotionClip) -> Result<f64> {
    let pa = kinematics::forward_kinematics(skeleton, a)?;
    let pb = kinematics::forward_kinematics(skeleton, b)?;
    if pa.data.len() != pb.data.len() {
        return Err(Error::dim("mpjpe clip lengths"));
    }
    let total: f64 = pa
        .data
        .iter()
        .zip(&pb.data)
        .map(|(x, y)| kinematics::norm3(kinematics::sub(*x, *y)))
        .sum();
    Ok(total / pa.data.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::Skeleton;
    use proptest::prelude::*;

    pub(crate) fn tiny_config(parts: BodyPartition) -> TokenizerConfig {
        TokenizerConfig {
            codebook_size: 8,
            latent_dim: 6,
            rvq_depth: 2,
            lookback_frames: 6,
            layers: 2,
            heads: 2,
            width: 8,
            parts,
            ..TokenizerConfig::default()
        }
    }

    fn two_joint() -> (Skeleton, BodyPartition) {
        let mut s = Skeleton::chain(&[[0.0, 0.0, 0.0], [0.0, 0.5, 0.1]]);
        s.foot_joints = vec![1];
        let parts = BodyPartition {
            parts: vec![
                BodyPart {
                    name: "a".into(),
                    joints: vec![0],
                    root_channels: true,
                },
                BodyPart {
                    name: "b".into(),
                    joints: vec![1],
                    root_channels: false,
                },
            ],
        };
        (s, parts)
    }

    fn random_clip(joints: usize, frames: usize, rng: &mut crate::Rng) -> MotionClip {
        let mut t = Tensor::randn(frames, ROOT_CHANNELS + 6 * joints, 0.2, rng);
        for f in 0..frames {
            for j in 0..joints {
                t.row_mut(f)[ROOT_CHANNELS + 6 * j] += 1.0;
                t.row_mut(f)[ROOT_CHANNELS + 6 * j + 4] += 1.0;
            }
        }
        MotionClip::new(30.0, t).unwrap()
    }

    #[test]
    fn humanoid_partition_covers_the_skeleton() {
        let s = Skeleton::humanoid();
        let p = BodyPartition::humanoid();
        p.validate(s.num_joints()).unwrap();
        let widths: Vec<usize> = p.parts.iter().map(|x| x.channels().len()).collect();
        assert_eq!(widths, vec![48, 57, 24]);
    }

    #[test]
    fn rvq_examples() {
        let table = Tensor::from_rows(&[&[0.0, 0.0], &[1.0, 1.0]]);
        let z = Tensor::from_rows(&[&[0.9, 0.9]]);
        let o = rvq_quantize(&z, &[&table]).unwrap();
        assert_eq!(o.indices, vec![vec![1]]);
        assert_eq!(o.quantized.data(), &[1.0, 1.0]);
        let res = z.zip_map(&o.quantized, |a, b| a - b);
        assert!((res.data()[0] + 0.1).abs() < 1e-12 && (res.data()[1] + 0.1).abs() < 1e-12);

        let exact = Tensor::from_rows(&[&[1.0, 1.0]]);
        let o = rvq_quantize(&exact, &[&table]).unwrap();
        assert_eq!(o.quantized, exact);

        let empty = Tensor::zeros(0, 2);
        assert!(matches!(rvq_quantize(&z, &[&empty]), Err(Error::Config(_))));
    }

    #[test]
    fn rvq_ties_pick_lowest_index() {
        let table = Tensor::from_rows(&[&[1.0], &[-1.0], &[1.0]]);
        let o = rvq_quantize(&Tensor::from_rows(&[&[0.0]]), &[&table]).unwrap();
        assert_eq!(o.indices[0][0], 0);
    }

    #[test]
    fn full_scale_codebook_config_is_accepted() {
        let c = TokenizerConfig {
            codebook_size: 512,
            rvq_depth: 6,
            latent_dim: 512,
            ..TokenizerConfig::default()
        };
        c.validate(21).unwrap();
    }

    #[test]
    fn encode_shapes_and_padding() {
        let mut rng = crate::seeded(0);
        let s = Skeleton::humanoid();
        let tok = Tokenizer::new(tiny_config(BodyPartition::humanoid()), s.num_joints(), &mut rng).unwrap();
        let clip = random_clip(s.num_joints(), 8, &mut rng);
        let z = tok.encode(&clip).unwrap();
        assert_eq!(z.len(), 3);
        assert!(z.iter().all(|t| t.shape() == (2, 6)));
        let out = tok.decode_latents(&z, 30.0).unwrap();
        assert_eq!(out.frames.shape(), (8, s.frame_dim()));

        let odd = MotionClip::new(30.0, clip.frames.slice_rows(0, 7)).unwrap();
        assert_eq!(tok.encode(&odd).unwrap_err(), Error::PaddingRequired { len: 7, ratio: 4 });
        let padded = odd.pad_front_to_multiple(4);
        assert_eq!(padded.len(), 8);
        assert_eq!(padded.frames.row(0), odd.frames.row(0));
        assert_eq!(padded.frames.row(1), odd.frames.row(0));
    }

    #[test]
    fn zero_input_through_zeroed_projection_gives_zero_latents() {
        let mut rng = crate::seeded(1);
        let cfg = TokenizerConfig {
            zero_init_latent: true,
            ..tiny_config(BodyPartition::whole(2))
        };
        let tok = Tokenizer::new(cfg, 2, &mut rng).unwrap();
        let clip = MotionClip::new(30.0, Tensor::zeros(8, ROOT_CHANNELS + 12)).unwrap();
        let z = tok.encode(&clip).unwrap();
        assert!(z[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoder_and_decoder_are_causal() {
        let mut rng = crate::seeded(2);
        let s = Skeleton::humanoid();
        let tok = Tokenizer::new(tiny_config(BodyPartition::humanoid()), s.num_joints(), &mut rng).unwrap();
        let clip = random_clip(s.num_joints(), 16, &mut rng);
        let mut changed = clip.clone();
        changed.frames.row_mut(7).iter_mut().for_each(|v| *v += 0.5);
        let (a, b) = (tok.encode(&clip).unwrap(), tok.encode(&changed).unwrap());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.row(0), y.row(0));
            assert_ne!(x.row(1), y.row(1));
        }
        let mut z2 = a.clone();
        for t in &mut z2 {
            t.row_mut(1).iter_mut().for_each(|v| *v += 1.0);
        }
        let (fa, fb) = (tok.decode_at(&a, 0).unwrap(), tok.decode_at(&z2, 0).unwrap());
        assert_eq!(fa.slice_rows(0, 4), fb.slice_rows(0, 4));
        assert_ne!(fa.slice_rows(4, 4), fb.slice_rows(4, 4));
    }

    #[test]
    fn streaming_matches_offline() {
        let mut rng = crate::seeded(3);
        let s = Skeleton::humanoid();
        let tok = Tokenizer::new(tiny_config(BodyPartition::humanoid()), s.num_joints(), &mut rng).unwrap();
        let clip = random_clip(s.num_joints(), 40, &mut rng);
        let offline = tok.encode(&clip).unwrap();
        let (grid, _) = tok.quantize(&offline).unwrap();
        let mut st = tok.encoder_state();
        let mut dst = tok.decoder_state();
        let mut streamed = TokenGrid::zeros(0, 2, 3, 8);
        let mut frames = Vec::new();
        for c in 0..5 {
            let z = tok.encode_stream(&mut st, &clip.frames.slice_rows(c * 8, 8)).unwrap();
            for (p, zp) in z.iter().enumerate() {
                assert_eq!(zp, &offline[p].slice_rows(c * 2, 2));
            }
            let (g, _) = tok.quantize(&z).unwrap();
            streamed.append(&g);
            let zq = tok.dequantize(&g).unwrap();
            frames.push(tok.decode_stream(&mut dst, &zq).unwrap());
        }
        assert_eq!(streamed, grid);
        let off = tok.decode(&grid, 30.0).unwrap();
        let on = Tensor::concat_rows(&frames.iter().collect::<Vec<_>>());
        assert_eq!(off.frames, on);
    }

    #[test]
    fn hands_tokens_ignore_lower_body_channels() {
        let mut rng = crate::seeded(4);
        let s = Skeleton::humanoid();
        let tok = Tokenizer::new(tiny_config(BodyPartition::humanoid()), s.num_joints(), &mut rng).unwrap();
        let clip = random_clip(s.num_joints(), 12, &mut rng);
        let mut changed = clip.clone();
        let lower = BodyPartition::humanoid().parts[1].channels();
        for f in 0..12 {
            for &c in &lower {
                changed.frames.row_mut(f)[c] += 0.3;
            }
        }
        let (a, b) = (tok.tokenize(&clip).unwrap(), tok.tokenize(&changed).unwrap());
        for t in 0..a.steps {
            for q in 0..a.layers {
                assert_eq!(a.get(t, q, 2), b.get(t, q, 2));
            }
        }
    }

    #[test]
    fn commitment_hand_value() {
        let (s, _) = two_joint();
        let cfg = TokenizerConfig {
            commitment_weight: 0.5,
            ..tiny_config(BodyPartition::whole(2))
        };
        let clip = MotionClip::rest(2, 4, 0.0, 30.0);
        let l = tokenizer_loss(
            &clip,
            &clip,
            &[vec![Tensor::from_rows(&[&[1.0, 0.0]])]],
            &[vec![Tensor::from_rows(&[&[0.0, 0.0]])]],
            &s,
            &cfg,
        )
        .unwrap();
        assert_eq!(l.commitment, 1.0);
        assert_eq!(l.total, 0.5);

        let zero = tokenizer_loss(&clip, &clip, &[], &[], &s, &cfg).unwrap();
        assert_eq!(zero.total, 0.0);
    }

    #[test]
    fn graph_loss_matches_value_function() {
        let mut rng = crate::seeded(5);
        let (s, parts) = two_joint();
        let tok = Tokenizer::new(tiny_config(parts), 2, &mut rng).unwrap();
        let clip = random_clip(2, 8, &mut rng);
        let (l, _, lat) = tok.loss_and_grads(&s, &[clip.clone()], true).unwrap();
        let residuals: Vec<Vec<Tensor>> = lat.iter().map(|b| b.rvq.as_ref().unwrap().residuals.clone()).collect();
        let entries: Vec<Vec<Tensor>> = lat.iter().map(|b| b.rvq.as_ref().unwrap().layer_entries.clone()).collect();
        let hat = tok.reconstruct(&clip).unwrap();
        let v = tokenizer_loss(&clip, &hat, &residuals, &entries, &s, &tok.config).unwrap();
        assert!((l.total - v.total).abs() < 1e-10, "{l:?} vs {v:?}");
        assert!((l.commitment - v.commitment).abs() < 1e-10);
    }

    fn fd_check(tok: &Tokenizer, s: &Skeleton, clip: &MotionClip, quantize: bool, prefix: &str) {
        let (_, grads, _) = tok.loss_and_grads(s, &[clip.clone()], quantize).unwrap();
        let h = 1e-5;
        let mut checked = 0;
        for id in tok.store.ids() {
            if !tok.store.name(id).contains(prefix) {
                continue;
            }
            let analytic = grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(1, 1));
            let n = tok.store.get(id).len();
            for i in (0..n).step_by((n / 3).max(1)) {
                let eval = |d: f64| {
                    let mut t = tok.clone();
                    t.store.get_mut(id).data_mut()[i] += d;
                    t.loss_and_grads(s, &[clip.clone()], quantize).unwrap().0.total
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.data().get(i).copied().unwrap_or(0.0);
                let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-4);
                assert!(rel < 1e-3, "{} [{i}]: fd {fd} analytic {a}", tok.store.name(id));
                checked += 1;
            }
        }
        assert!(checked > 10);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = crate::seeded(6);
        let (s, parts) = two_joint();
        let tok = Tokenizer::new(tiny_config(parts), 2, &mut rng).unwrap();
        let clip = random_clip(2, 8, &mut rng);
        fd_check(&tok, &s, &clip, false, "encoder");
        fd_check(&tok, &s, &clip, false, "in_proj");
        fd_check(&tok, &s, &clip, true, "decoder");
        fd_check(&tok, &s, &clip, true, "out_proj");
    }

    #[test]
    fn ema_training_keeps_codebooks_finite_and_reserved_zero() {
        let mut rng = crate::seeded(7);
        let (s, parts) = two_joint();
        let mut tok = Tokenizer::new(tiny_config(parts), 2, &mut rng).unwrap();
        let clips: Vec<MotionClip> = (0..4).map(|_| random_clip(2, 8, &mut rng)).collect();
        let mut tr = TokenizerTrainer::new(&tok);
        for _ in 0..5 {
            tr.step(&mut tok, &s, &clips, &mut rng).unwrap();
            tok.codebooks.validate().unwrap();
        }
        tr.end_epoch(&mut tok, &mut rng);
        for p in 0..tok.num_parts() {
            assert!(tok.codebooks.table(1, p).row(0).iter().all(|&v| v == 0.0));
        }
    }

    proptest! {
        #[test]
        fn residual_norm_never_increases(seed in 0u64..500) {
            let mut rng = crate::seeded(seed);
            let mut tables: Vec<Tensor> = (0..3).map(|_| Tensor::randn(6, 4, 1.0, &mut rng)).collect();
            for t in tables.iter_mut().skip(1) {
                t.row_mut(0).iter_mut().for_each(|v| *v = 0.0);
            }
            let z = Tensor::randn(5, 4, 1.5, &mut rng);
            let refs: Vec<&Tensor> = tables.iter().collect();
            let o = rvq_quantize(&z, &refs).unwrap();
            for t in 0..5 {
                let last = o.residuals[2].zip_map(&o.layer_entries[2], |a, b| a - b);
                let norms: Vec<f64> = o.residuals.iter().skip(1).chain([&last])
                    .map(|r| r.row(t).iter().map(|v| v * v).sum::<f64>())
                    .collect();
                for w in norms.windows(2) {
                    prop_assert!(w[1] <= w[0] + 1e-12);
                }
            }
        }

        #[test]
        fn token_grid_bounds_are_enforced(k in 2usize..20, v in 0u16..40) {
            let g = TokenGrid::new(1, 1, 1, k, vec![v]);
            prop_assert_eq!(g.is_ok(), (v as usize) < k);
        }
    }
}
