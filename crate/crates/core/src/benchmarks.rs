//! End-to-end reward-model benchmarks on synthetic data: quality ordering
//! under corruption, and audio-motion retrieval.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::audio::AudioClass;
use crate::corruption::{nested_corruptions, CorruptionMode};
use crate::error::{Error, Result};
use crate::kinematics::{mirror_clip, MotionClip, Skeleton};
use crate::rewards::{
    retrieval_eval, AlignPair, Aligner, AlignerConfig, AlignerTrainer, QualityConfig, QualityLabel, QualityModel, QualityScoreTable,
    QualityTrainer, RetrievalReport,
};
use crate::synthetic::{generate_dataset, SyntheticClip, SyntheticDatasetSpec, FRAMES_PER_CHUNK, MOTION_FPS};
use crate::tokenizer::{sample_windows, Tokenizer, TokenizerConfig, TokenizerTrainer};
use crate::Rng;

/// Trains a tokenizer briefly on synthetic clips.
pub fn train_tokenizer(
    skeleton: &Skeleton,
    config: &TokenizerConfig,
    clips: &[MotionClip],
    steps: usize,
    batch: usize,
    window: usize,
    rng: &mut Rng,
) -> Result<Tokenizer> {
    let mut tok = Tokenizer::new(config.clone(), skeleton.num_joints(), rng)?;
    let mut trainer = TokenizerTrainer::new(&tok);
    for step in 0..steps {
        let b = sample_windows(clips, window, batch, rng);
        if b.is_empty() {
            return Err(Error::TooShort { needed: window, got: 0 });
        }
        trainer.step(&mut tok, skeleton, &b, rng)?;
        if (step + 1) % 50 == 0 {
            trainer.end_epoch(&mut tok, rng);
        }
    }
    Ok(tok)
}

// ---------------------------------------------------------------------------
// Quality ordering

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QualityBenchmark {
    pub tokenizer: TokenizerConfig,
    pub tokenizer_steps: usize,
    pub quality: QualityConfig,
    pub table: QualityScoreTable,
    pub train_clips_per_domain: usize,
    pub test_clips_per_domain: usize,
    pub rates: Vec<f64>,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for QualityBenchmark {
    fn default() -> Self {
        Self {
            tokenizer: TokenizerConfig::default(),
            tokenizer_steps: 150,
            quality: QualityConfig::default(),
            table: QualityScoreTable::default(),
            train_clips_per_domain: 8,
            test_clips_per_domain: 4,
            rates: (1..=10).map(|i| i as f64 / 10.0).collect(),
            steps: 300,
            batch: 16,
            seed: 0,
        }
    }
}

/// One clip's clean, reconstructed and corrupted versions.
#[derive(Debug, Clone)]
pub struct QualityFamily {
    pub ground_truth: MotionClip,
    pub reconstruction: MotionClip,
    /// Per rate: (hierarchical, uniform).
    pub corrupted: Vec<(MotionClip, MotionClip)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityBenchReport {
    /// Held-out (GT, hierarchical ρ, uniform ρ) triples scored in that order.
    pub triple_accuracy: f64,
    /// Held-out same-mode pairs ρ_i < ρ_j scored higher at ρ_i.
    pub monotone_fraction: f64,
    pub triples: usize,
    pub pairs: usize,
    pub final_loss: f64,
    /// Mean held-out score per rate: (hierarchical, uniform).
    pub mean_scores: Vec<(f64, f64, f64)>,
    pub mean_ground_truth: f64,
}

impl QualityBenchmark {
    fn clips(&self, per_domain: usize, seed: u64, skeleton: &Skeleton) -> Result<Vec<MotionClip>> {
        let spec = SyntheticDatasetSpec {
            clips_per_domain: per_domain,
            seconds: self.quality.window as f64 / MOTION_FPS,
            seed,
            domains: AudioClass::ALL.to_vec(),
        };
        Ok(generate_dataset(skeleton, &spec)?.into_iter().map(|c| c.motion).collect())
    }

    pub fn family(&self, tok: &Tokenizer, clip: &MotionClip, rng: &mut Rng) -> Result<QualityFamily> {
        let grid = tok.tokenize(clip)?;
        let reconstruction = tok.decode(&grid, clip.fps)?;
        // Shared randomness across rates: each mode's copies are nested.
        let hs = nested_corruptions(&grid, CorruptionMode::Hierarchical, &self.rates, rng);
        let us = nested_corruptions(&grid, CorruptionMode::Uniform, &self.rates, rng);
        let mut corrupted = Vec::with_capacity(self.rates.len());
        for (h, u) in hs.iter().zip(&us) {
            corrupted.push((tok.decode(h, clip.fps)?, tok.decode(u, clip.fps)?));
        }
        Ok(QualityFamily {
            ground_truth: clip.clone(),
            reconstruction,
            corrupted,
        })
    }

    fn examples(&self, families: &[QualityFamily]) -> Result<Vec<(MotionClip, f64)>> {
        let mut out = Vec::new();
        for f in families {
            out.push((f.ground_truth.clone(), self.table.score(QualityLabel::GroundTruth)?));
            out.push((f.reconstruction.clone(), self.table.score(QualityLabel::Reconstruction)?));
            for (&rate, (h, u)) in self.rates.iter().zip(&f.corrupted) {
                let hl = QualityLabel::Corrupted {
                    mode: CorruptionMode::Hierarchical,
                    rate,
                };
                let ul = QualityLabel::Corrupted {
                    mode: CorruptionMode::Uniform,
                    rate,
                };
                out.push((h.clone(), self.table.score(hl)?));
                out.push((u.clone(), self.table.score(ul)?));
            }
        }
        Ok(out)
    }

    /// Tokenizer, training families, and held-out families.
    pub fn prepare(&self, skeleton: &Skeleton) -> Result<(Tokenizer, Vec<QualityFamily>, Vec<QualityFamily>)> {
        self.table.validate()?;
        let mut rng = crate::seeded(self.seed);
        let train = self.clips(self.train_clips_per_domain, self.seed.wrapping_mul(2) + 1, skeleton)?;
        let test = self.clips(self.test_clips_per_domain, self.seed.wrapping_mul(2) + 2, skeleton)?;
        let window = 4 * self.tokenizer.downsample_ratio * 4;
        let tok = train_tokenizer(skeleton, &self.tokenizer, &train, self.tokenizer_steps, 8, window, &mut rng)?;
        let fam = |clips: &[MotionClip], rng: &mut Rng| clips.iter().map(|c| self.family(&tok, c, rng)).collect::<Result<Vec<_>>>();
        let train_f = fam(&train, &mut rng)?;
        let test_f = fam(&test, &mut rng)?;
        Ok((tok, train_f, test_f))
    }

    pub fn train(&self, skeleton: &Skeleton, families: &[QualityFamily], rng: &mut Rng) -> Result<(QualityModel, f64)> {
        let mut model = QualityModel::new(self.quality.clone(), skeleton.frame_dim(), rng)?;
        let mut trainer = QualityTrainer::new(&model);
        let examples = self.examples(families)?;
        let mut order: Vec<usize> = (0..examples.len()).collect();
        let mut last = f64::NAN;
        let mut cursor = order.len();
        for _ in 0..self.steps {
            let mut idx = Vec::with_capacity(self.batch);
            while idx.len() < self.batch {
                if cursor >= order.len() {
                    order.shuffle(rng);
                    cursor = 0;
                }
                idx.push(order[cursor]);
                cursor += 1;
            }
            let clips: Vec<&MotionClip> = idx.iter().map(|&i| &examples[i].0).collect();
            let targets: Vec<f64> = idx.iter().map(|&i| examples[i].1).collect();
            last = trainer.step(&mut model, &clips, &targets)?;
        }
        Ok((model, last))
    }

    pub fn evaluate(&self, model: &QualityModel, families: &[QualityFamily]) -> Result<QualityBenchReport> {
        let (mut ordered, mut triples, mut mono, mut pairs) = (0usize, 0usize, 0usize, 0usize);
        let mut sums = vec![(0.0, 0.0); self.rates.len()];
        let mut gt_sum = 0.0;
        for f in families {
            let gt = model.score(&f.ground_truth)?;
            gt_sum += gt;
            let mut hs = Vec::with_capacity(self.rates.len());
            let mut us = Vec::with_capacity(self.rates.len());
            for (k, (h, u)) in f.corrupted.iter().enumerate() {
                let (sh, su) = (model.score(h)?, model.score(u)?);
                sums[k].0 += sh;
                sums[k].1 += su;
                triples += 1;
                if gt > sh && sh > su {
                    ordered += 1;
                }
                hs.push(sh);
                us.push(su);
            }
            for s in [&hs, &us] {
                for i in 0..s.len() {
                    for j in i + 1..s.len() {
                        pairs += 1;
                        if s[i] > s[j] {
                            mono += 1;
                        }
                    }
                }
            }
        }
        let n = families.len().max(1) as f64;
        Ok(QualityBenchReport {
            triple_accuracy: ordered as f64 / triples.max(1) as f64,
            monotone_fraction: mono as f64 / pairs.max(1) as f64,
            triples,
            pairs,
            final_loss: f64::NAN,
            mean_scores: self.rates.iter().zip(&sums).map(|(&r, &(h, u))| (r, h / n, u / n)).collect(),
            mean_ground_truth: gt_sum / n,
        })
    }

    pub fn run(&self, skeleton: &Skeleton) -> Result<(QualityModel, QualityBenchReport)> {
        let (_, train, test) = self.prepare(skeleton)?;
        let mut rng = crate::seeded(self.seed ^ 0x5157);
        let (model, loss) = self.train(skeleton, &train, &mut rng)?;
        let mut report = self.evaluate(&model, &test)?;
        report.final_loss = loss;
        Ok((model, report))
    }
}

// ---------------------------------------------------------------------------
// Retrieval

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalBenchmark {
    pub aligner: AlignerConfig,
    /// Window length in 8-frame chunks.
    pub window_chunks: usize,
    pub train_clips_per_domain: usize,
    /// Held-out gallery size.
    pub gallery: usize,
    pub steps: usize,
    pub batch: usize,
    /// Also train on mirrored motion as an extra positive.
    pub mirror: bool,
    pub seed: u64,
}

impl Default for RetrievalBenchmark {
    fn default() -> Self {
        Self {
            aligner: AlignerConfig::default(),
            window_chunks: 4,
            train_clips_per_domain: 128,
            gallery: 256,
            steps: 800,
            batch: 32,
            mirror: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalBenchReport {
    pub report: RetrievalReport,
    pub gallery: usize,
    pub chance_r1: f64,
    pub final_loss: f64,
}

impl RetrievalBenchmark {
    fn dataset(&self, per_domain: usize, seed: u64, skeleton: &Skeleton) -> Result<Vec<SyntheticClip>> {
        let spec = SyntheticDatasetSpec {
            clips_per_domain: per_domain,
            seconds: (self.window_chunks * FRAMES_PER_CHUNK) as f64 / MOTION_FPS,
            seed,
            domains: AudioClass::ALL.to_vec(),
        };
        generate_dataset(skeleton, &spec)
    }

    fn pair(&self, c: &SyntheticClip) -> AlignPair {
        AlignPair {
            audio: c.audio.clone(),
            motion: c.motion.clone(),
            key: c.id,
        }
    }

    pub fn train(&self, skeleton: &Skeleton, rng: &mut Rng) -> Result<(Aligner, f64)> {
        let train = self.dataset(self.train_clips_per_domain, self.seed.wrapping_mul(2) + 1, skeleton)?;
        let first = train.first().ok_or(Error::TooShort { needed: 1, got: 0 })?;
        let mut model = Aligner::new(self.aligner.clone(), skeleton.frame_dim(), first.audio.layers, first.audio.codebook_size, rng)?;
        let mut trainer = AlignerTrainer::new(&model);
        let mut last = f64::NAN;
        let mut order: Vec<usize> = (0..train.len()).collect();
        for _ in 0..self.steps {
            let mut batch = Vec::with_capacity(2 * self.batch);
            let (picked, _) = order.partial_shuffle(rng, self.batch);
            for &i in picked.iter() {
                let p = self.pair(&train[i]);
                if self.mirror && rng.gen_bool(0.5) {
                    batch.push(AlignPair {
                        motion: mirror_clip(skeleton, &p.motion),
                        ..p.clone()
                    });
                }
                batch.push(p);
            }
            last = trainer.step(&mut model, &batch)?;
        }
        Ok((model, last))
    }

    pub fn evaluate(&self, model: &Aligner, skeleton: &Skeleton) -> Result<RetrievalBenchReport> {
        let per_domain = self.gallery.div_ceil(AudioClass::ALL.len());
        let mut test = self.dataset(per_domain, self.seed.wrapping_mul(2) + 2, skeleton)?;
        test.truncate(self.gallery);
        let audio: Vec<_> = test.iter().map(|c| &c.audio).collect();
        let motion: Vec<_> = test.iter().map(|c| &c.motion).collect();
        let a = model.embed_audio(&audio)?;
        let m = model.embed_motion(&motion)?;
        let pairing: Vec<usize> = (0..test.len()).collect();
        Ok(RetrievalBenchReport {
            report: retrieval_eval(&a, &m, &pairing)?,
            gallery: test.len(),
            chance_r1: 100.0 / test.len() as f64,
            final_loss: f64::NAN,
        })
    }

    pub fn run(&self, skeleton: &Skeleton) -> Result<(Aligner, RetrievalBenchReport)> {
        let mut rng = crate::seeded(self.seed);
        let (model, loss) = self.train(skeleton, &mut rng)?;
        let mut r = self.evaluate(&model, skeleton)?;
        r.final_loss = loss;
        Ok((model, r))
    }
}
