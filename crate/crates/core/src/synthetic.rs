//! Paired synthetic audio and motion for three domains.
//!
//! Idle sway goes with silence, beat-less arm strokes at syllable onsets with
//! speech, and beat-locked whole-body oscillation with music. Each clip also
//! carries continuous factors (pitch, energy, rate) that shape both the audio
//! and the motion, so paired items can be told apart at instance level.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::audio::{self, AudioClass, AudioParams, AudioTokens, ToyCodec};
use crate::error::{Error, Result};
use crate::kinematics::{axis_angle, mat_mul, matrix_to_rot6d, Mat3, MotionClip, Skeleton, IDENTITY, ROOT_CHANNELS};
use crate::tensor::Tensor;
use crate::Rng;

/// Motion frames per streaming chunk.
pub const FRAMES_PER_CHUNK: usize = 8;
pub const MOTION_FPS: f64 = 30.0;
/// Audio frames per streaming chunk (75 Hz over 8/30 s).
pub const AUDIO_FRAMES_PER_CHUNK: usize = 20;
pub const STANDING_HEIGHT: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticDatasetSpec {
    pub clips_per_domain: usize,
    /// Rounded down to whole 8-frame chunks.
    pub seconds: f64,
    pub seed: u64,
    pub domains: Vec<AudioClass>,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        Self {
            clips_per_domain: 16,
            seconds: 8.0,
            seed: 0,
            domains: AudioClass::ALL.to_vec(),
        }
    }
}

impl SyntheticDatasetSpec {
    pub fn chunks(&self) -> usize {
        (self.seconds * MOTION_FPS / FRAMES_PER_CHUNK as f64).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.seconds.is_finite() && self.seconds >= 0.0) {
            return Err(Error::config("clip seconds must be nonnegative"));
        }
        if self.clips_per_domain > 0 && self.chunks() == 0 {
            return Err(Error::config("clips must span at least one 8-frame chunk"));
        }
        Ok(())
    }
}

/// One paired example. The domain label is metadata only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticClip {
    pub id: usize,
    pub params: AudioParams,
    /// Beat (music) or onset (speech) times in seconds.
    pub events: Vec<f64>,
    pub motion: MotionClip,
    pub audio: AudioTokens,
}

/// Deterministic per-clip RNG.
fn clip_rng(seed: u64, id: usize) -> Rng {
    crate::seeded(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (id as u64).wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03))
}

pub fn generate_dataset(skeleton: &Skeleton, spec: &SyntheticDatasetSpec) -> Result<Vec<SyntheticClip>> {
    spec.validate()?;
    let chunks = spec.chunks();
    let mut out = Vec::with_capacity(spec.clips_per_domain * spec.domains.len());
    for _ in 0..spec.clips_per_domain {
        for &class in &spec.domains {
            let id = out.len();
            let mut rng = clip_rng(spec.seed, id);
            let params = AudioParams::random(class, &mut rng);
            out.push(generate_clip(skeleton, id, params, chunks, &mut rng)?);
        }
    }
    Ok(out)
}

/// A clip of `chunks` 8-frame chunks with the given factors.
pub fn generate_clip(skeleton: &Skeleton, id: usize, params: AudioParams, chunks: usize, rng: &mut Rng) -> Result<SyntheticClip> {
    let frames = chunks * FRAMES_PER_CHUNK;
    let seconds = frames as f64 / MOTION_FPS;
    let events = audio::event_times(&params, seconds, rng);
    let wave = audio::synthesize(&params, &events, seconds, rng);
    let mut tokens = ToyCodec::default().encode(&wave);
    tokens.ids.truncate(chunks * AUDIO_FRAMES_PER_CHUNK * ToyCodec::LAYERS);
    let motion = synthesize_motion(skeleton, &params, &events, frames, rng)?;
    Ok(SyntheticClip {
        id,
        params,
        events,
        motion,
        audio: tokens,
    })
}

/// Alternating ease-in stroke between consecutive beats: speed grows through
/// each interval and drops to zero on the beat.
fn beat_wave(t: f64, beats: &[f64], period: f64) -> f64 {
    if beats.is_empty() {
        return 0.0;
    }
    let k = beats.partition_point(|&b| b <= t);
    let (start, end, sign) = if k == 0 {
        (beats[0] - period, beats[0], -1.0)
    } else if k < beats.len() {
        (beats[k - 1], beats[k], if k % 2 == 0 { -1.0 } else { 1.0 })
    } else {
        let last = beats[beats.len() - 1];
        (last, last + period, if k % 2 == 0 { -1.0 } else { 1.0 })
    };
    let phi = ((t - start) / (end - start)).clamp(0.0, 1.0);
    sign * (2.0 * phi * phi * phi - 1.0)
}

/// Sum of Gaussian bumps centered on each onset: apexes (zero velocity) on
/// the onsets.
fn stroke_wave(t: f64, onsets: &[f64], width: f64) -> f64 {
    onsets
        .iter()
        .filter(|&&o| (t - o).abs() < 4.0 * width)
        .map(|&o| (-((t - o) / width).powi(2)).exp())
        .sum::<f64>()
        .min(1.2)
}

const X: [f64; 3] = [1.0, 0.0, 0.0];
const Y: [f64; 3] = [0.0, 1.0, 0.0];
const Z: [f64; 3] = [0.0, 0.0, 1.0];

struct Pose {
    rot: Vec<Mat3>,
    height: f64,
}

impl Pose {
    fn rotate(&mut self, joint: Option<usize>, axis: [f64; 3], angle: f64) {
        if let Some(j) = joint {
            self.rot[j] = mat_mul(&self.rot[j], &axis_angle(axis, angle));
        }
    }
}

/// Motion for `params` on the humanoid skeleton.
pub fn synthesize_motion(skeleton: &Skeleton, params: &AudioParams, events: &[f64], frames: usize, rng: &mut Rng) -> Result<MotionClip> {
    let j = |n: &str| skeleton.joint(n);
    let (spine, chest, neck, head) = (j("spine"), j("chest"), j("neck"), j("head"));
    let (ls, le, rs, re) = (j("l_shoulder"), j("l_elbow"), j("r_shoulder"), j("r_elbow"));
    let (lh, lk, rh, rk) = (j("l_hip"), j("l_knee"), j("r_hip"), j("r_knee"));
    if spine.is_none() || ls.is_none() || rs.is_none() {
        return Err(Error::config("synthetic motion needs the humanoid joint names"));
    }
    let nj = skeleton.num_joints();
    let scale = 0.5 + params.energy;
    let lean = (params.pitch - 0.5) * 0.5;
    let sway_f = rng.gen_range(0.15..0.35);
    let sway_phase = rng.gen_range(0.0..2.0 * PI);
    let breath_f = rng.gen_range(0.2..0.35);
    let period = if params.rate > 0.0 { 1.0 / params.rate } else { 1.0 };
    let lead_left = rng.gen_bool(0.5);

    let mut data = Tensor::zeros(frames, ROOT_CHANNELS + 6 * nj);
    for f in 0..frames {
        let t = f as f64 / MOTION_FPS;
        let mut pose = Pose {
            rot: vec![IDENTITY; nj],
            height: STANDING_HEIGHT + 0.004 * (2.0 * PI * breath_f * t).sin(),
        };
        // Shared idle layer, scaled by the pitch-driven lean.
        let sway = (2.0 * PI * sway_f * t + sway_phase).sin();
        pose.rotate(spine, Z, lean + 0.04 * sway);
        pose.rotate(chest, X, 0.02 * (2.0 * PI * breath_f * t).sin());
        pose.rotate(head, Z, -0.5 * lean);
        pose.rotate(ls, Z, 0.05 + 0.02 * sway);
        pose.rotate(rs, Z, -0.05 + 0.02 * sway);

        match params.class {
            AudioClass::Silence => {}
            AudioClass::Speech => {
                let b = stroke_wave(t, events, 0.09) * scale;
                let (main, other) = if lead_left { (ls, rs) } else { (rs, ls) };
                let side = if lead_left { 1.0 } else { -1.0 };
                pose.rotate(main, X, -0.7 * b);
                pose.rotate(main, Z, side * 0.25 * b);
                pose.rotate(if lead_left { le } else { re }, X, -0.9 * b);
                pose.rotate(other, X, -0.2 * b);
                pose.rotate(neck, X, 0.12 * b);
            }
            AudioClass::Music => {
                let u = beat_wave(t, events, period) * scale;
                let bend = 0.5 * (u + scale);
                pose.height -= 0.05 * bend;
                pose.rotate(lh, X, -0.2 * bend);
                pose.rotate(rh, X, -0.2 * bend);
                pose.rotate(lk, X, 0.4 * bend);
                pose.rotate(rk, X, 0.4 * bend);
                pose.rotate(spine, Z, 0.15 * u);
                pose.rotate(chest, Y, 0.2 * u);
                pose.rotate(ls, X, -0.5 * u);
                pose.rotate(rs, X, 0.5 * u);
                pose.rotate(le, X, -0.3 * (1.0 + u));
                pose.rotate(re, X, -0.3 * (1.0 - u));
                pose.rotate(head, X, 0.1 * u);
            }
        }
        let row = data.row_mut(f);
        row[2] = pose.height;
        for (jt, r) in pose.rot.iter().enumerate() {
            row[ROOT_CHANNELS + 6 * jt..ROOT_CHANNELS + 6 * jt + 6].copy_from_slice(&matrix_to_rot6d(r));
        }
    }
    MotionClip::new(MOTION_FPS, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_clips_is_empty() {
        let spec = SyntheticDatasetSpec {
            clips_per_domain: 0,
            ..Default::default()
        };
        assert!(generate_dataset(&Skeleton::humanoid(), &spec).unwrap().is_empty());
    }

    #[test]
    fn dataset_is_deterministic_and_aligned() {
        let s = Skeleton::humanoid();
        let spec = SyntheticDatasetSpec {
            clips_per_domain: 2,
            seconds: 2.2,
            ..Default::default()
        };
        let a = generate_dataset(&s, &spec).unwrap();
        let b = generate_dataset(&s, &spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 6);
        for c in &a {
            assert_eq!(c.motion.len(), 64);
            assert_eq!(c.audio.frames(), 160);
            assert_eq!(c.motion.len() as f64 / 30.0, c.audio.frames() as f64 / 75.0);
        }
    }

    #[test]
    fn beat_wave_stops_on_each_beat() {
        let beats = [0.5, 1.0, 1.5];
        let v = |t: f64| (beat_wave(t + 1e-4, &beats, 0.5) - beat_wave(t, &beats, 0.5)).abs() / 1e-4;
        assert!(v(0.999) > 5.0);
        assert!(v(1.0001) < 0.1);
    }

    #[test]
    fn ground_truth_hits_its_events() {
        use crate::kinematics::forward_kinematics;
        use crate::metrics::{ba_dance, ba_gesture_from_positions, BeatSet, DEFAULT_SIGMA};
        let s = Skeleton::humanoid();
        let spec = SyntheticDatasetSpec {
            clips_per_domain: 4,
            seconds: 8.0,
            seed: 3,
            ..Default::default()
        };
        let u: Vec<usize> = s.upper_body_joints.clone();
        for c in generate_dataset(&s, &spec).unwrap() {
            if c.events.is_empty() {
                continue;
            }
            let pos = forward_kinematics(&s, &c.motion).unwrap();
            let audio = BeatSet::audio(c.events.clone()).unwrap();
            let d = ba_dance(&audio, &pos, MOTION_FPS, DEFAULT_SIGMA).unwrap();
            let g = ba_gesture_from_positions(&audio, &pos, &u, MOTION_FPS, DEFAULT_SIGMA).unwrap();
            match c.params.class {
                AudioClass::Music => assert!(d >= 0.9, "{d}"),
                AudioClass::Speech => assert!(g >= 0.5, "{g}"),
                AudioClass::Silence => {}
            }
        }
    }
}
