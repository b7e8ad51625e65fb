//! Two-domain conditional-collapse benchmark.
//!
//! Each training clip is a single domain: a symbolic condition stream that
//! leans toward the domain's half of the audio codebook, paired with motion
//! tokens from that domain's half of every motion codebook.
//! Within a domain the next motion id follows from the previous one (a fixed
//! stride cycle per layer and part, with a little in-domain noise), so history
//! alone predicts the motion and the audio is redundant during training.
//!
//! The probe primes a session with motion history from one domain under
//! audio of the other, then asks which half the next generated chunk falls
//! in. A model that ignores its condition keeps continuing the history.

use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::audio::AudioTokens;
use crate::corruption::CorruptionMode;
use crate::error::{Error, Result};
use crate::generator::{sample_training_windows, Generator, GeneratorConfig, GeneratorTrainer};
use crate::tokenizer::TokenGrid;
use crate::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CollapseBenchmark {
    pub generator: GeneratorConfig,
    pub clips_per_domain: usize,
    pub chunks_per_clip: usize,
    pub train_steps: usize,
    pub batch: usize,
    pub corruption: CorruptionMode,
    pub rate: f64,
    /// In-domain noise on motion ids.
    pub noise: f64,
    /// Probability that a condition id carries its domain.
    pub cue: f64,
    pub probes: usize,
    pub probe_chunks: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for CollapseBenchmark {
    fn default() -> Self {
        Self {
            generator: GeneratorConfig {
                window_chunks: 3,
                motion_layers: 2,
                parts: 3,
                codebook_size: 16,
                layers: 2,
                heads: 4,
                width: 32,
                lr: 1e-2,
                ..Default::default()
            },
            clips_per_domain: 24,
            chunks_per_clip: 6,
            train_steps: 300,
            batch: 8,
            corruption: CorruptionMode::Hierarchical,
            rate: 0.0,
            noise: 0.05,
            cue: 0.5,
            probes: 24,
            probe_chunks: 1,
            temperature: 0.7,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    pub rate: f64,
    /// Fraction of generated ids whose domain matches the new audio after a
    /// domain switch.
    pub switch_accuracy: f64,
    /// Same with history and audio from one domain.
    pub matched_accuracy: f64,
    pub final_loss: f64,
}

/// Condition stream for domain `d`: each audio id falls in the domain's half
/// of the audio codebook with probability `cue`, else anywhere.
pub fn domain_audio(cfg: &GeneratorConfig, domain: usize, chunks: usize, cue: f64, rng: &mut Rng) -> AudioTokens {
    let k = cfg.audio_size;
    let half = k / 2;
    let mut t = AudioTokens::empty(cfg.audio_layers, k);
    t.ids = (0..chunks * cfg.audio_frames_per_chunk * cfg.audio_layers)
        .map(|_| {
            if rng.gen_bool(cue) {
                (domain * half + rng.gen_range(0..half)) as u16
            } else {
                rng.gen_range(0..k) as u16
            }
        })
        .collect();
    t
}

/// Domain `d` motion: ids in `[d K/2, (d+1) K/2)`. Along the flattened
/// stream (step, layer, part) each value is the previous one plus `1 + 2d`,
/// with in-domain noise, so the last token predicts the next.
pub fn domain_motion(cfg: &GeneratorConfig, domain: usize, steps: usize, noise: f64, rng: &mut Rng) -> TokenGrid {
    let half = cfg.codebook_size / 2;
    let stride = 1 + 2 * domain;
    let mut g = TokenGrid::zeros(steps, cfg.motion_layers, cfg.parts, cfg.codebook_size);
    let mut v = rng.gen_range(0..half);
    for i in 0..g.indices.len() {
        v = if rng.gen_bool(noise) { rng.gen_range(0..half) } else { (v + stride) % half };
        g.indices[i] = (domain * half + v) as u16;
    }
    g
}

pub fn domain_of(cfg: &GeneratorConfig, id: u16) -> usize {
    usize::from(id as usize >= cfg.codebook_size / 2)
}

fn segment(b: &CollapseBenchmark, domain: usize, chunks: usize, rng: &mut Rng) -> (AudioTokens, TokenGrid) {
    let g = &b.generator;
    let a = domain_audio(g, domain, chunks, b.cue, rng);
    let m = domain_motion(g, domain, chunks * g.steps_per_chunk, b.noise, rng);
    (a, m)
}

pub fn train(b: &CollapseBenchmark, rng: &mut Rng) -> Result<(Generator, f64)> {
    let cfg = &b.generator;
    if cfg.codebook_size < 2 || cfg.codebook_size % 2 != 0 {
        return Err(Error::config("benchmark needs an even codebook"));
    }
    let clips = (0..b.clips_per_domain)
        .flat_map(|_| [0, 1])
        .map(|d| segment(b, d, b.chunks_per_clip, rng))
        .collect::<Vec<_>>();
    let mut gen = Generator::new(cfg.clone(), rng)?;
    let corruption = (b.rate > 0.0).then_some((b.corruption, b.rate));
    let mut trainer = GeneratorTrainer::new(&gen, corruption);
    let mut last = f64::NAN;
    for step in 0..b.train_steps {
        trainer.adam.config.lr = cfg.lr * (1.0 - 0.9 * step as f64 / b.train_steps as f64);
        let windows = sample_training_windows(cfg, &clips, b.batch, 0.0, rng)?;
        last = trainer.step(&mut gen, &windows, rng)?.total;
    }
    Ok((gen, last))
}

/// Fraction of ids generated after `history_domain` motion history that
/// belong to `audio_domain`; the whole window's audio is `audio_domain`.
pub fn probe(b: &CollapseBenchmark, gen: &Generator, history_domain: usize, audio_domain: usize, rng: &mut Rng) -> Result<f64> {
    let cfg = &b.generator;
    let hist_chunks = cfg.window_chunks - 1;
    let hm = domain_motion(cfg, history_domain, hist_chunks * cfg.steps_per_chunk, b.noise, rng);
    let ha = domain_audio(cfg, audio_domain, hist_chunks, b.cue, rng);
    let audio = domain_audio(cfg, audio_domain, b.probe_chunks, b.cue, rng);
    let mut session = gen.session(None, b.temperature, 0, rng.gen());
    session.prime(cfg, &ha, &hm)?;
    let out = gen.generate(&mut session, &audio)?;
    let hits = out.indices.iter().filter(|&&id| domain_of(cfg, id) == audio_domain).count();
    Ok(hits as f64 / out.indices.len().max(1) as f64)
}

pub fn run(b: &CollapseBenchmark) -> Result<CollapseReport> {
    let mut rng = crate::seeded(b.seed);
    let (gen, final_loss) = train(b, &mut rng)?;
    let mut switch = 0.0;
    let mut matched = 0.0;
    for i in 0..b.probes {
        let d = i % 2;
        switch += probe(b, &gen, d, 1 - d, &mut rng)?;
        matched += probe(b, &gen, d, d, &mut rng)?;
    }
    let n = b.probes.max(1) as f64;
    Ok(CollapseReport {
        rate: b.rate,
        switch_accuracy: switch / n,
        matched_accuracy: matched / n,
        final_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn domains_use_disjoint_halves() {
        let cfg = CollapseBenchmark::default().generator;
        let mut rng = crate::seeded(0);
        for d in 0..2 {
            let g = domain_motion(&cfg, d, 12, 0.1, &mut rng);
            assert!(g.indices.iter().all(|&id| domain_of(&cfg, id) == d));
        }
    }

    #[test]
    fn short_run_is_finite() {
        let b = CollapseBenchmark {
            train_steps: 3,
            clips_per_domain: 2,
            probes: 2,
            ..Default::default()
        };
        let r = run(&b).unwrap();
        assert!(r.final_loss.is_finite());
        assert!((0.0..=1.0).contains(&r.switch_accuracy));
    }
}
