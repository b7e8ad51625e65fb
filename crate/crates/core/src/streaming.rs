//! Chunked streaming inference: codec encode, one generator window step,
//! causal decode and the hand guard, with per-stage latency stamps.
//!
//! Time comes from a [`Clock`] so the engine stays platform-free; the std
//! crate plugs in a wall clock, tests use [`ManualClock`].

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::audio::{AudioTokens, CodecState, ToyCodec, HOP};
use crate::error::{Error, Result};
use crate::generator::{GenerationSession, Generator};
use crate::kinematics::{
    add, cross, dot3, forward_kinematics_frame, mat_mul, matrix_to_rot6d, norm3, scale, sub, transpose, Mat3, Skeleton, Vec3,
    ROOT_CHANNELS,
};
use crate::synthetic::{FRAMES_PER_CHUNK, MOTION_FPS};
use crate::tensor::Tensor;
use crate::tokenizer::{DecoderState, TokenGrid, Tokenizer};

pub const STAGES: [&str; 4] = ["audio_encode", "motion_synthesis", "motion_decode", "ik_post"];
/// Real-time budget per chunk.
pub const BUDGET_MS: f64 = 266.0;
pub const SYNC_BUFFER_MS: f64 = 100.0;
pub const CHUNK_SECONDS: f64 = FRAMES_PER_CHUNK as f64 / MOTION_FPS;
pub const CHUNK_MS: f64 = 1000.0 * CHUNK_SECONDS;
/// Codec samples per chunk.
pub const CHUNK_SAMPLES: usize = (crate::audio::SAMPLE_RATE as usize * FRAMES_PER_CHUNK) / MOTION_FPS as usize;

pub trait Clock {
    fn now_ms(&mut self) -> f64;
}

/// A clock that only moves when told to (or by `tick` per reading).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ManualClock {
    pub now: f64,
    pub tick: f64,
}

impl Clock for ManualClock {
    fn now_ms(&mut self) -> f64 {
        let t = self.now;
        self.now += self.tick;
        t
    }
}

/// Whole chunks in `seconds` of audio.
pub fn chunks_for_seconds(seconds: f64) -> usize {
    (seconds / CHUNK_SECONDS + 1e-9).floor().max(0.0) as usize
}

pub fn frames_for_seconds(seconds: f64) -> usize {
    chunks_for_seconds(seconds) * FRAMES_PER_CHUNK
}

// ---------------------------------------------------------------------------
// Latency

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub stage: String,
    pub mean_ms: f64,
    pub std_ms: f64,
}

use alloc::string::String;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub steps: usize,
    pub stages: Vec<StageStats>,
    /// Sum of stage means.
    pub total_ms: f64,
    /// Standard deviation of the per-step total.
    pub total_std_ms: f64,
    /// Total mean at or above the budget.
    pub violation: bool,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = if xs.len() > 1 {
        xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, v.sqrt())
}

impl LatencyReport {
    /// Aggregates per-step stage stamps (ms); needs at least two steps.
    pub fn from_stamps(stamps: &[[f64; 4]]) -> Result<Self> {
        if stamps.len() < 2 {
            return Err(Error::TooShort {
                needed: 2,
                got: stamps.len(),
            });
        }
        if stamps.iter().flatten().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::numerical("latency stamps"));
        }
        let stages: Vec<StageStats> = STAGES
            .iter()
            .enumerate()
            .map(|(k, name)| {
                let col: Vec<f64> = stamps.iter().map(|s| s[k]).collect();
                let (mean_ms, std_ms) = mean_std(&col);
                StageStats {
                    stage: String::from(*name),
                    mean_ms,
                    std_ms,
                }
            })
            .collect();
        let total_ms = stages.iter().map(|s| s.mean_ms).sum();
        let totals: Vec<f64> = stamps.iter().map(|s| s.iter().sum()).collect();
        Ok(Self {
            steps: stamps.len(),
            stages,
            total_ms,
            total_std_ms: mean_std(&totals).1,
            violation: total_ms >= BUDGET_MS,
        })
    }
}

/// `(step, stage, ms)` rows, steps counted from 1.
pub fn latency_rows(stamps: &[[f64; 4]]) -> Vec<(usize, &'static str, f64)> {
    stamps
        .iter()
        .enumerate()
        .flat_map(|(i, s)| STAGES.iter().zip(s).map(move |(name, ms)| (i + 1, *name, *ms)))
        .collect()
}

// ---------------------------------------------------------------------------
// Sync buffer

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncStats {
    pub emit_ms: Vec<f64>,
    pub underruns: usize,
}

/// Chunk `k` plays at `arrival[0] + buffer + k · chunk`; a chunk arriving
/// after its slot plays on arrival and counts as an underrun.
pub fn sync_schedule(arrivals_ms: &[f64], buffer_ms: f64, chunk_ms: f64) -> SyncStats {
    let Some(&start) = arrivals_ms.first() else {
        return SyncStats {
            emit_ms: Vec::new(),
            underruns: 0,
        };
    };
    let buffer = buffer_ms.max(0.0);
    let mut emit = Vec::with_capacity(arrivals_ms.len());
    let mut underruns = 0;
    for (k, &a) in arrivals_ms.iter().enumerate() {
        let slot = start + buffer + k as f64 * chunk_ms;
        if a > slot {
            underruns += 1;
            emit.push(a);
        } else {
            emit.push(slot);
        }
    }
    SyncStats { emit_ms: emit, underruns }
}

// ---------------------------------------------------------------------------
// Hand guard

/// A capsule-like region around the spine: radius interpolated linearly
/// between hip, chest and head along the hip-to-head axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CylinderGuard {
    pub hip: usize,
    pub chest: usize,
    pub head: usize,
    /// `(shoulder, hand)` pairs; the shoulder's rotation is adjusted.
    pub arms: Vec<(usize, usize)>,
    /// Radii at hip, chest and head (meters).
    pub radii: [f64; 3],
    /// Swing iterations before the straight-out fallback.
    pub iterations: usize,
}

/// Per-stream guard memory: last radial direction per arm.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GuardState {
    pub prev_dirs: Vec<Option<Vec3>>,
}

/// Minimal rotation taking direction `a` to direction `b`.
pub fn swing(a: Vec3, b: Vec3) -> Mat3 {
    let na = norm3(a);
    let nb = norm3(b);
    if na < 1e-12 || nb < 1e-12 {
        return crate::kinematics::IDENTITY;
    }
    let a = scale(a, 1.0 / na);
    let b = scale(b, 1.0 / nb);
    let axis = cross(a, b);
    let s = norm3(axis);
    let c = dot3(a, b).clamp(-1.0, 1.0);
    if s < 1e-12 {
        if c > 0.0 {
            return crate::kinematics::IDENTITY;
        }
        // Opposite: half turn about any perpendicular axis.
        let p = if a[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
        let axis = cross(a, p);
        return crate::kinematics::axis_angle(scale(axis, 1.0 / norm3(axis)), core::f64::consts::PI);
    }
    crate::kinematics::axis_angle(scale(axis, 1.0 / s), s.atan2(c))
}

/// Where a point sits relative to the guard.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuardProbe {
    /// Point on the axis at the same height.
    pub foot: Vec3,
    /// Component of the point perpendicular to the axis.
    pub radial: Vec3,
    pub radius: f64,
    /// Whether the point lies between the hip and head planes.
    pub within: bool,
}

impl GuardProbe {
    pub fn distance(&self) -> f64 {
        norm3(self.radial)
    }

    pub fn inside(&self) -> bool {
        self.within && self.distance() < self.radius
    }
}

impl CylinderGuard {
    pub fn humanoid(skeleton: &Skeleton) -> Result<Self> {
        let j = |n: &str| skeleton.joint(n).ok_or_else(|| Error::config(alloc::format!("skeleton lacks joint {n}")));
        Ok(Self {
            hip: j("pelvis")?,
            chest: j("chest")?,
            head: j("head")?,
            arms: vec![(j("l_shoulder")?, j("l_hand")?), (j("r_shoulder")?, j("r_hand")?)],
            radii: [0.14, 0.15, 0.10],
            iterations: 8,
        })
    }

    pub fn validate(&self, skeleton: &Skeleton) -> Result<()> {
        let n = skeleton.num_joints();
        if self.radii.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return Err(Error::config("guard radii must be positive"));
        }
        let joints = [self.hip, self.chest, self.head].into_iter().chain(self.arms.iter().flat_map(|&(s, h)| [s, h]));
        if joints.into_iter().any(|i| i >= n) {
            return Err(Error::config("guard joint out of range"));
        }
        Ok(())
    }

    pub fn state(&self) -> GuardState {
        GuardState {
            prev_dirs: vec![None; self.arms.len()],
        }
    }

    pub fn probe(&self, pos: &[Vec3], p: Vec3) -> GuardProbe {
        let hip = pos[self.hip];
        let axis = sub(pos[self.head], hip);
        let len = norm3(axis).max(1e-12);
        let u = scale(axis, 1.0 / len);
        let s = dot3(sub(p, hip), u) / len;
        let chest_s = (dot3(sub(pos[self.chest], hip), u) / len).clamp(1e-6, 1.0 - 1e-6);
        let [r0, r1, r2] = self.radii;
        let sc = s.clamp(0.0, 1.0);
        let radius = if sc <= chest_s {
            r0 + (r1 - r0) * sc / chest_s
        } else {
            r1 + (r2 - r1) * (sc - chest_s) / (1.0 - chest_s)
        };
        let foot = add(hip, scale(u, s * len));
        GuardProbe {
            foot,
            radial: sub(p, foot),
            radius,
            within: (0.0..=1.0).contains(&s),
        }
    }

    /// Smallest `distance - radius` over guarded hands inside the axial span
    /// (positive when every hand is clear).
    pub fn clearance(&self, skeleton: &Skeleton, row: &[f64]) -> Result<f64> {
        let (_, pos) = forward_kinematics_frame(skeleton, row)?;
        Ok(self
            .arms
            .iter()
            .map(|&(_, h)| self.probe(&pos, pos[h]))
            .filter(|p| p.within)
            .map(|p| p.distance() - p.radius)
            .fold(f64::INFINITY, f64::min))
    }

    /// Pushes hands out of the guard by swinging their shoulders; frames
    /// with every hand outside come back unchanged.
    pub fn apply(&self, skeleton: &Skeleton, row: &[f64], state: &mut GuardState) -> Result<Vec<f64>> {
        if state.prev_dirs.len() != self.arms.len() {
            state.prev_dirs = vec![None; self.arms.len()];
        }
        let mut out = row.to_vec();
        for (arm, &(shoulder, hand)) in self.arms.iter().enumerate() {
            let (_, pos) = forward_kinematics_frame(skeleton, &out)?;
            let first = self.probe(&pos, pos[hand]);
            if !first.inside() {
                if first.within && first.distance() > 1e-9 {
                    state.prev_dirs[arm] = Some(scale(first.radial, 1.0 / first.distance()));
                }
                continue;
            }
            let mut done = false;
            for _ in 0..self.iterations.max(1) {
                let (global, pos) = forward_kinematics_frame(skeleton, &out)?;
                let pr = self.probe(&pos, pos[hand]);
                if !pr.inside() {
                    done = true;
                    break;
                }
                let dir = self.radial_dir(&pos, &pr, state.prev_dirs[arm]);
                state.prev_dirs[arm] = Some(dir);
                let t = reach_along(pr.foot, dir, pos[shoulder], norm3(sub(pos[hand], pos[shoulder])), pr.radius * (1.0 + 1e-9) + 1e-9);
                let target = add(pr.foot, scale(dir, t));
                let r = swing(sub(pos[hand], pos[shoulder]), sub(target, pos[shoulder]));
                self.rotate_joint(skeleton, &mut out, &global, shoulder, &r);
            }
            if !done {
                let (global, pos) = forward_kinematics_frame(skeleton, &out)?;
                let pr = self.probe(&pos, pos[hand]);
                if pr.inside() {
                    // Point the arm straight away from the axis.
                    let sp = self.probe(&pos, pos[shoulder]);
                    let dir = if sp.distance() > 1e-9 {
                        scale(sp.radial, 1.0 / sp.distance())
                    } else {
                        self.radial_dir(&pos, &sp, state.prev_dirs[arm])
                    };
                    let r = swing(sub(pos[hand], pos[shoulder]), dir);
                    self.rotate_joint(skeleton, &mut out, &global, shoulder, &r);
                }
            }
        }
        Ok(out)
    }

    /// Outward direction for a probe; on the axis itself, the previous
    /// frame's direction, else +x made perpendicular to the axis.
    fn radial_dir(&self, pos: &[Vec3], pr: &GuardProbe, prev: Option<Vec3>) -> Vec3 {
        let d = pr.distance();
        if d > 1e-9 {
            return scale(pr.radial, 1.0 / d);
        }
        let axis = sub(pos[self.head], pos[self.hip]);
        let u = scale(axis, 1.0 / norm3(axis).max(1e-12));
        for cand in [prev, Some([1.0, 0.0, 0.0]), Some([0.0, 0.0, 1.0])].into_iter().flatten() {
            let perp = sub(cand, scale(u, dot3(cand, u)));
            let n = norm3(perp);
            if n > 1e-6 {
                return scale(perp, 1.0 / n);
            }
        }
        [1.0, 0.0, 0.0]
    }

    /// Pre-multiplies joint `j`'s global rotation by `r` (world frame).
    fn rotate_joint(&self, skeleton: &Skeleton, row: &mut [f64], global: &[Mat3], j: usize, r: &Mat3) {
        let new_global = mat_mul(r, &global[j]);
        let local = match skeleton.parents[j] {
            Some(p) => mat_mul(&transpose(&global[p]), &new_global),
            None => new_global,
        };
        let s = ROOT_CHANNELS + 6 * j;
        row[s..s + 6].copy_from_slice(&matrix_to_rot6d(&local));
    }
}

/// Smallest `t >= t_min` with `|foot + t dir - shoulder| = reach`, so a
/// rigid swing lands the hand exactly there; `t_min` when unreachable.
fn reach_along(foot: Vec3, dir: Vec3, shoulder: Vec3, reach: f64, t_min: f64) -> f64 {
    let w = sub(foot, shoulder);
    let b = dot3(w, dir);
    let disc = b * b - (dot3(w, w) - reach * reach);
    if disc < 0.0 {
        return t_min;
    }
    let root = disc.sqrt();
    [-b - root, -b + root].into_iter().filter(|t| *t >= t_min).fold(t_min, |best, t| if best == t_min { t } else { best.min(t) })
}

/// Largest per-joint rotation angle (radians) between two frames.
pub fn max_rotation_delta(skeleton: &Skeleton, a: &[f64], b: &[f64]) -> Result<f64> {
    let (ga, _) = forward_kinematics_frame(skeleton, a)?;
    let (gb, _) = forward_kinematics_frame(skeleton, b)?;
    Ok(ga
        .iter()
        .zip(&gb)
        .map(|(x, y)| {
            let m = mat_mul(&transpose(x), y);
            (((m[0][0] + m[1][1] + m[2][2]) - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
        })
        .fold(0.0, f64::max))
}

// ---------------------------------------------------------------------------
// Engine

#[derive(Debug, Clone, PartialEq)]
pub struct StreamChunk {
    pub index: usize,
    pub audio: AudioTokens,
    pub tokens: TokenGrid,
    /// `8 x frame_dim` guarded frames.
    pub frames: Tensor,
    /// Milliseconds per stage, in [`STAGES`] order.
    pub stamps: [f64; 4],
    /// Largest joint rotation (radians) from the previous chunk's last frame.
    pub boundary_delta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StreamConfig {
    pub temperature: f64,
    pub top_k: usize,
    pub seed: u64,
    pub buffer_ms: f64,
    /// Bound on `boundary_delta` used by continuity checks (radians).
    pub max_boundary_delta: f64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            top_k: 0,
            seed: 0,
            buffer_ms: SYNC_BUFFER_MS,
            max_boundary_delta: 1.0,
        }
    }
}

pub struct StreamEngine {
    pub generator: Generator,
    pub tokenizer: Tokenizer,
    pub skeleton: Skeleton,
    pub guard: CylinderGuard,
    pub config: StreamConfig,
    codec: ToyCodec,
    codec_state: CodecState,
    session: GenerationSession,
    decoder: DecoderState,
    guard_state: GuardState,
    last_frame: Option<Vec<f64>>,
    next_index: usize,
    warmed: bool,
}

impl StreamEngine {
    pub fn new(generator: Generator, tokenizer: Tokenizer, skeleton: Skeleton, guard: CylinderGuard, config: StreamConfig) -> Result<Self> {
        let g = &generator.config;
        let t = &tokenizer.config;
        if g.motion_layers != t.rvq_depth || g.parts != tokenizer.num_parts() || g.codebook_size != t.codebook_size {
            return Err(Error::config("generator and tokenizer disagree on the token grid"));
        }
        if g.steps_per_chunk * t.downsample_ratio != FRAMES_PER_CHUNK {
            return Err(Error::config("a chunk must decode to 8 frames"));
        }
        if g.audio_layers != ToyCodec::LAYERS || g.audio_size != ToyCodec::CODEBOOK_SIZE || g.audio_frames_per_chunk * HOP != CHUNK_SAMPLES {
            return Err(Error::config("generator audio layout must match the codec"));
        }
        if tokenizer.frame_dim() != skeleton.frame_dim() {
            return Err(Error::config("tokenizer frame width must match the skeleton"));
        }
        guard.validate(&skeleton)?;
        let session = generator.session(None, config.temperature, config.top_k, config.seed);
        let decoder = tokenizer.decoder_state();
        let guard_state = guard.state();
        Ok(Self {
            generator,
            tokenizer,
            skeleton,
            guard,
            config,
            codec: ToyCodec::default(),
            codec_state: CodecState::default(),
            session,
            decoder,
            guard_state,
            last_frame: None,
            next_index: 0,
            warmed: false,
        })
    }

    pub fn is_warm(&self) -> bool {
        self.warmed
    }

    pub fn chunks_emitted(&self) -> usize {
        self.next_index
    }

    fn reset(&mut self) {
        let c = &self.config;
        self.session = self.generator.session(None, c.temperature, c.top_k, c.seed);
        self.decoder = self.tokenizer.decoder_state();
        self.codec_state = CodecState::default();
        self.guard_state = self.guard.state();
        self.last_frame = None;
        self.next_index = 0;
    }

    /// Runs one discarded step on silence, then resets stream state.
    pub fn warm_up(&mut self, clock: &mut dyn Clock) -> Result<()> {
        self.warmed = true;
        let silent = vec![0.0f32; CHUNK_SAMPLES];
        let r = self.step(&silent, clock);
        self.reset();
        r.map(|_| ())
    }

    /// One chunk of raw samples (24 kHz) through the whole pipeline.
    pub fn step(&mut self, samples: &[f32], clock: &mut dyn Clock) -> Result<StreamChunk> {
        if !self.warmed {
            return Err(Error::NotInitialized);
        }
        if samples.len() != CHUNK_SAMPLES {
            return Err(Error::Alignment(alloc::format!("a chunk holds {CHUNK_SAMPLES} samples, got {}", samples.len())).in_stage(STAGES[0]));
        }
        let t0 = clock.now_ms();
        let audio = self.codec.encode_stream(&mut self.codec_state, samples);
        let t1 = clock.now_ms();
        self.finish(audio, [t0, t1], clock)
    }

    /// One chunk of codec tokens; the encode stage is stamped as zero.
    pub fn step_tokens(&mut self, audio: AudioTokens, clock: &mut dyn Clock) -> Result<StreamChunk> {
        if !self.warmed {
            return Err(Error::NotInitialized);
        }
        let t = clock.now_ms();
        self.finish(audio, [t, t], clock)
    }

    fn finish(&mut self, audio: AudioTokens, enc: [f64; 2], clock: &mut dyn Clock) -> Result<StreamChunk> {
        let tokens = self.generator.generate_window(&mut self.session, &audio).map_err(|e| e.in_stage(STAGES[1]))?;
        let t2 = clock.now_ms();
        let latents = self.tokenizer.dequantize(&tokens).map_err(|e| e.in_stage(STAGES[2]))?;
        let raw = self.tokenizer.decode_stream(&mut self.decoder, &latents).map_err(|e| e.in_stage(STAGES[2]))?;
        let t3 = clock.now_ms();
        let mut frames = Tensor::zeros(raw.rows(), raw.cols());
        for r in 0..raw.rows() {
            let fixed = self.guard.apply(&self.skeleton, raw.row(r), &mut self.guard_state).map_err(|e| e.in_stage(STAGES[3]))?;
            frames.row_mut(r).copy_from_slice(&fixed);
        }
        let t4 = clock.now_ms();
        if frames.rows() != FRAMES_PER_CHUNK {
            return Err(Error::Alignment(alloc::format!("decoded {} frames", frames.rows())).in_stage(STAGES[2]));
        }
        let boundary_delta = match &self.last_frame {
            Some(prev) => max_rotation_delta(&self.skeleton, prev, frames.row(0))?,
            None => 0.0,
        };
        self.last_frame = Some(frames.row(frames.rows() - 1).to_vec());
        let index = self.next_index;
        self.next_index += 1;
        let stamps = [enc[1] - enc[0], t2 - enc[1], t3 - t2, t4 - t3].map(|v: f64| v.max(0.0));
        Ok(StreamChunk {
            index,
            audio,
            tokens,
            frames,
            stamps,
            boundary_delta,
        })
    }
}

/// Warms up, then runs `steps` chunks of `samples` (cycled) and aggregates.
pub fn latency_profile(engine: &mut StreamEngine, samples: &[f32], steps: usize, clock: &mut dyn Clock) -> Result<(LatencyReport, Vec<[f64; 4]>)> {
    if steps < 2 {
        return Err(Error::TooShort { needed: 2, got: steps });
    }
    let chunks = samples.len() / CHUNK_SAMPLES;
    if chunks == 0 {
        return Err(Error::TooShort {
            needed: CHUNK_SAMPLES,
            got: samples.len(),
        });
    }
    if !engine.is_warm() {
        engine.warm_up(clock)?;
    }
    let mut stamps = Vec::with_capacity(steps);
    for k in 0..steps {
        let c = k % chunks;
        let chunk = engine.step(&samples[c * CHUNK_SAMPLES..(c + 1) * CHUNK_SAMPLES], clock)?;
        stamps.push(chunk.stamps);
    }
    Ok((LatencyReport::from_stamps(&stamps)?, stamps))
}
