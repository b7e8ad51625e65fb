//! Synthetic audio and a toy codec producing two token layers at 75 Hz.
//!
//! Waveforms come in three classes: near-silence, "speech" (bursts of a
//! voiced tone at irregular syllable onsets) and "music" (a sustained tone with
//! percussive hits on a steady beat). The codec frames audio in hops of 320
//! samples at 24 kHz and emits, per frame, a coarse token (log energy x pitch
//! band) and a fine token (energy change x pitch sub-band).

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Rng;

pub const SAMPLE_RATE: u32 = 24_000;
pub const FRAME_RATE: f64 = 75.0;
/// Samples per codec frame.
pub const HOP: usize = 320;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AudioClass {
    Silence,
    Speech,
    Music,
}

impl AudioClass {
    pub const ALL: [AudioClass; 3] = [AudioClass::Silence, AudioClass::Speech, AudioClass::Music];

    pub fn name(self) -> &'static str {
        match self {
            AudioClass::Silence => "silence",
            AudioClass::Speech => "speech",
            AudioClass::Music => "music",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }
}

/// Per-clip factors shared by the audio and the paired motion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AudioParams {
    pub class: AudioClass,
    /// 0..1, mapped to 100..300 Hz.
    pub pitch: f64,
    /// 0..1, mapped to amplitude.
    pub energy: f64,
    /// Beats (music) or syllables (speech) per second.
    pub rate: f64,
}

impl AudioParams {
    pub fn random(class: AudioClass, rng: &mut Rng) -> Self {
        let rate = match class {
            AudioClass::Music => rng.gen_range(1.4..2.4),
            AudioClass::Speech => rng.gen_range(2.0..4.0),
            AudioClass::Silence => 0.0,
        };
        Self {
            class,
            pitch: rng.gen_range(0.0..1.0),
            energy: rng.gen_range(0.0..1.0),
            rate,
        }
    }

    pub fn frequency(&self) -> f64 {
        100.0 * 3f64.powf(self.pitch)
    }

    pub fn amplitude(&self) -> f64 {
        0.1 + 0.6 * self.energy
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Waveform {
    pub sample_rate: u32,
    pub samples: Vec<f32>,
}

impl Waveform {
    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Event times (seconds) of a clip: music beats or speech onsets.
pub fn event_times(params: &AudioParams, seconds: f64, rng: &mut Rng) -> Vec<f64> {
    match params.class {
        AudioClass::Silence => Vec::new(),
        AudioClass::Music => {
            let period = 1.0 / params.rate;
            let mut t = rng.gen_range(0.0..period);
            let mut out = Vec::new();
            while t < seconds {
                out.push(t);
                t += period;
            }
            out
        }
        AudioClass::Speech => {
            let mean = 1.0 / params.rate;
            let mut t = rng.gen_range(0.05..0.3);
            let mut out = Vec::new();
            while t < seconds {
                out.push(t);
                t += mean * rng.gen_range(0.6..1.4);
            }
            out
        }
    }
}

/// Renders a waveform for `params` with the given event times.
pub fn synthesize(params: &AudioParams, events: &[f64], seconds: f64, rng: &mut Rng) -> Waveform {
    let sr = SAMPLE_RATE as f64;
    let n = (seconds * sr).round() as usize;
    let mut s = vec![0.0f64; n];
    for v in s.iter_mut() {
        *v = rng.gen_range(-5e-4..5e-4);
    }
    let f = params.frequency();
    let amp = params.amplitude();
    match params.class {
        AudioClass::Silence => {}
        AudioClass::Speech => {
            for &e in events {
                let dur = rng.gen_range(0.10..0.18);
                let pitch = f * rng.gen_range(0.95..1.05);
                let start = (e * sr) as usize;
                let len = (dur * sr) as usize;
                for i in 0..len.min(n.saturating_sub(start)) {
                    let t = i as f64 / sr;
                    let env = (PI * t / dur).sin();
                    s[start + i] += amp * env * ((2.0 * PI * pitch * t).sin() + 0.3 * (4.0 * PI * pitch * t).sin());
                }
            }
        }
        AudioClass::Music => {
            for (i, v) in s.iter_mut().enumerate() {
                let t = i as f64 / sr;
                *v += 0.35 * amp * (2.0 * PI * f * t).sin();
            }
            for &e in events {
                let start = (e * sr) as usize;
                let len = (0.06 * sr) as usize;
                for i in 0..len.min(n.saturating_sub(start)) {
                    let t = i as f64 / sr;
                    let env = (-t / 0.015).exp();
                    s[start + i] += amp * env * rng.gen_range(-1.0..1.0);
                }
            }
        }
    }
    Waveform {
        sample_rate: SAMPLE_RATE,
        samples: s.into_iter().map(|v| v.clamp(-1.0, 1.0) as f32).collect(),
    }
}

/// Token ids, frame-major: `ids[frame * layers + layer]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AudioTokens {
    pub layers: usize,
    pub codebook_size: usize,
    pub ids: Vec<u16>,
}

impl AudioTokens {
    pub fn empty(layers: usize, codebook_size: usize) -> Self {
        Self {
            layers,
            codebook_size,
            ids: Vec::new(),
        }
    }

    pub fn frames(&self) -> usize {
        self.ids.len() / self.layers.max(1)
    }

    pub fn get(&self, frame: usize, layer: usize) -> u16 {
        self.ids[frame * self.layers + layer]
    }

    pub fn slice_frames(&self, start: usize, len: usize) -> AudioTokens {
        AudioTokens {
            layers: self.layers,
            codebook_size: self.codebook_size,
            ids: self.ids[start * self.layers..(start + len) * self.layers].to_vec(),
        }
    }

    pub fn append(&mut self, other: &AudioTokens) {
        assert_eq!(self.layers, other.layers, "audio layer count");
        self.ids.extend_from_slice(&other.ids);
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.ids.len() % self.layers != 0 {
            return Err(Error::dim("audio token count is not a multiple of the layer count"));
        }
        if let Some(&bad) = self.ids.iter().find(|&&i| i as usize >= self.codebook_size) {
            return Err(Error::Token {
                index: bad as usize,
                size: self.codebook_size,
            });
        }
        Ok(())
    }
}

/// Coarse bins per axis (energy x pitch band), 8 x 8 = 64 tokens per layer.
const BINS: usize = 8;
const MIN_DB: f64 = -60.0;

/// Frame-synchronous toy codec.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyCodec {
    pub hop: usize,
}

impl Default for ToyCodec {
    fn default() -> Self {
        Self { hop: HOP }
    }
}

/// Carried codec state: leftover samples and the previous frame's energy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecState {
    pending: Vec<f32>,
    prev_db: f64,
}

impl Default for CodecState {
    fn default() -> Self {
        Self {
            pending: Vec::new(),
            prev_db: MIN_DB,
        }
    }
}

impl ToyCodec {
    pub const LAYERS: usize = 2;
    pub const CODEBOOK_SIZE: usize = BINS * BINS;

    pub fn frame_rate(&self) -> f64 {
        SAMPLE_RATE as f64 / self.hop as f64
    }

    fn frame_tokens(&self, frame: &[f32], prev_db: &mut f64) -> [u16; 2] {
        let n = frame.len() as f64;
        let rms = (frame.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>() / n).sqrt();
        let db = 20.0 * (rms + 1e-6).log10();
        let e_bin = (((db - MIN_DB) / -MIN_DB) * BINS as f64).floor().clamp(0.0, (BINS - 1) as f64) as usize;
        let crossings = frame
            .windows(2)
            .filter(|w| (w[0] >= 0.0) != (w[1] >= 0.0))
            .count();
        let freq = crossings as f64 * SAMPLE_RATE as f64 / (2.0 * n);
        // Pitch bands on a log scale over 75..600 Hz.
        let band = (freq.max(1.0) / 75.0).log2() / 3.0 * BINS as f64;
        let p_bin = band.floor().clamp(0.0, (BINS - 1) as f64) as usize;
        let fine = ((band - band.floor()) * BINS as f64).floor().clamp(0.0, (BINS - 1) as f64) as usize;
        let delta = db - *prev_db;
        let d_bin = ((delta + 12.0) / 24.0 * BINS as f64).floor().clamp(0.0, (BINS - 1) as f64) as usize;
        *prev_db = db;
        [(e_bin * BINS + p_bin) as u16, (d_bin * BINS + fine) as u16]
    }

    /// Tokens for as many whole frames as the carried plus new samples allow.
    pub fn encode_stream(&self, state: &mut CodecState, samples: &[f32]) -> AudioTokens {
        state.pending.extend_from_slice(samples);
        let frames = state.pending.len() / self.hop;
        let mut ids = Vec::with_capacity(frames * Self::LAYERS);
        for f in 0..frames {
            let t = self.frame_tokens(&state.pending[f * self.hop..(f + 1) * self.hop], &mut state.prev_db);
            ids.extend_from_slice(&t);
        }
        state.pending.drain(0..frames * self.hop);
        AudioTokens {
            layers: Self::LAYERS,
            codebook_size: Self::CODEBOOK_SIZE,
            ids,
        }
    }

    pub fn encode(&self, wave: &Waveform) -> AudioTokens {
        self.encode_stream(&mut CodecState::default(), &wave.samples)
    }

    /// Energy bin of a coarse token.
    pub fn energy_bin(token: u16) -> usize {
        token as usize / BINS
    }
}

/// Tokens of pure silence for `frames` frames.
pub fn silence_tokens(frames: usize) -> AudioTokens {
    let mut rng = crate::seeded(0);
    let params = AudioParams {
        class: AudioClass::Silence,
        pitch: 0.0,
        energy: 0.0,
        rate: 0.0,
    };
    let wave = synthesize(&params, &[], frames as f64 / FRAME_RATE, &mut rng);
    let mut t = ToyCodec::default().encode(&wave);
    t.ids.resize(frames * ToyCodec::LAYERS, 0);
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rates_and_counts() {
        let codec = ToyCodec::default();
        assert_eq!(codec.frame_rate(), 75.0);
        let mut rng = crate::seeded(0);
        let p = AudioParams::random(AudioClass::Music, &mut rng);
        let ev = event_times(&p, 4.0, &mut rng);
        let w = synthesize(&p, &ev, 4.0, &mut rng);
        let t = codec.encode(&w);
        assert_eq!(t.frames(), 300);
        assert_eq!(t.ids.len(), 600);
        t.validate().unwrap();
    }

    #[test]
    fn streaming_codec_matches_offline() {
        let codec = ToyCodec::default();
        let mut rng = crate::seeded(1);
        let p = AudioParams::random(AudioClass::Speech, &mut rng);
        let ev = event_times(&p, 2.0, &mut rng);
        let w = synthesize(&p, &ev, 2.0, &mut rng);
        let offline = codec.encode(&w);
        let mut st = CodecState::default();
        let mut online = AudioTokens::empty(2, 64);
        for chunk in w.samples.chunks(1000) {
            online.append(&codec.encode_stream(&mut st, chunk));
        }
        assert_eq!(online, offline);
    }

    #[test]
    fn classes_differ_in_energy() {
        let codec = ToyCodec::default();
        let mut rng = crate::seeded(2);
        let mean_energy = |class| {
            let mut r = crate::seeded(9);
            let p = AudioParams {
                energy: 0.5,
                ..AudioParams::random(class, &mut r)
            };
            let ev = event_times(&p, 3.0, &mut r);
            let t = codec.encode(&synthesize(&p, &ev, 3.0, &mut r));
            (0..t.frames()).map(|f| ToyCodec::energy_bin(t.get(f, 0)) as f64).sum::<f64>() / t.frames() as f64
        };
        let _ = &mut rng;
        let (s, sp, m) = (mean_energy(AudioClass::Silence), mean_energy(AudioClass::Speech), mean_energy(AudioClass::Music));
        assert!(s < 0.5, "{s}");
        assert!(sp > s + 1.0 && m > s + 1.0, "{s} {sp} {m}");
    }
}
