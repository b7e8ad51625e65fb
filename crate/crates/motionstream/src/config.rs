//! Run configuration: one TOML tree, a schema version, and environment
//! overrides of the form `MOTIONSTREAM_<SECTION>__<KEY>=<value>`.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use motionstream_core::benchmarks::{QualityBenchmark, RetrievalBenchmark};
use motionstream_core::collapse::CollapseBenchmark;
use motionstream_core::corruption::CorruptionMode;
use motionstream_core::crossroad::{CrossroadTraining, CrossroadWorld};
use motionstream_core::generator::GeneratorConfig;
use motionstream_core::metrics::DEFAULT_SIGMA;
use motionstream_core::rewards::{AlignerConfig, QualityConfig, QualityScoreTable};
use motionstream_core::rl::{AlignConfig, RewardWeights};
use motionstream_core::streaming::StreamConfig;
use motionstream_core::synthetic::SyntheticDatasetSpec;
use motionstream_core::tokenizer::TokenizerConfig;
use serde::{Deserialize, Serialize};

/// Major.minor; a file with a larger major is refused.
pub const SCHEMA_VERSION: &str = "1.0";
pub const ENV_PREFIX: &str = "MOTIONSTREAM_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub schema_version: String,
    pub seed: u64,
    pub single_thread: bool,
    pub data: SyntheticDatasetSpec,
    pub tokenizer: TokenizerSection,
    pub generator: GeneratorSection,
    pub rewards: RewardSection,
    pub rl: RlSection,
    pub metrics: MetricSection,
    pub streaming: StreamingSection,
    pub experiments: ExperimentSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION.to_string(),
            seed: 0,
            single_thread: false,
            data: SyntheticDatasetSpec::default(),
            tokenizer: TokenizerSection::default(),
            generator: GeneratorSection::default(),
            rewards: RewardSection::default(),
            rl: RlSection::default(),
            metrics: MetricSection::default(),
            streaming: StreamingSection::default(),
            experiments: ExperimentSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerSection {
    pub steps: usize,
    pub batch: usize,
    /// Training window in frames.
    pub window: usize,
    pub model: TokenizerConfig,
}

impl Default for TokenizerSection {
    fn default() -> Self {
        Self {
            steps: 200,
            batch: 8,
            window: 64,
            model: TokenizerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorSection {
    pub steps: usize,
    pub batch: usize,
    pub exemplar_prob: f64,
    pub corruption: CorruptionMode,
    pub corruption_rate: f64,
    pub temperature: f64,
    pub top_k: usize,
    pub model: GeneratorConfig,
}

impl Default for GeneratorSection {
    fn default() -> Self {
        Self {
            steps: 200,
            batch: 8,
            exemplar_prob: 0.3,
            corruption: CorruptionMode::Hierarchical,
            corruption_rate: 0.5,
            temperature: 1.0,
            top_k: 0,
            model: GeneratorConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardSection {
    pub quality_steps: usize,
    pub aligner_steps: usize,
    pub batch: usize,
    pub weights: RewardWeights,
    pub quality: QualityConfig,
    pub aligner: AlignerConfig,
    pub table: QualityScoreTable,
}

impl Default for RewardSection {
    fn default() -> Self {
        Self {
            quality_steps: 300,
            aligner_steps: 300,
            batch: 16,
            weights: RewardWeights::default(),
            quality: QualityConfig::default(),
            aligner: AlignerConfig::default(),
            table: QualityScoreTable::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RlSection {
    pub steps: usize,
    /// Prompts (audio windows) per step.
    pub prompts: usize,
    pub align: AlignConfig,
}

impl Default for RlSection {
    fn default() -> Self {
        Self {
            steps: 5,
            prompts: 2,
            align: AlignConfig {
                group_size: 4,
                ..AlignConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricSection {
    /// Beat kernel width (seconds).
    pub sigma: f64,
}

impl Default for MetricSection {
    fn default() -> Self {
        Self { sigma: DEFAULT_SIGMA }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StreamingSection {
    pub profile_steps: usize,
    /// Guard radii at hip, chest and head (meters).
    pub guard_radii: [f64; 3],
    pub stream: StreamConfig,
}

impl Default for StreamingSection {
    fn default() -> Self {
        Self {
            profile_steps: 20,
            guard_radii: [0.14, 0.15, 0.10],
            stream: StreamConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSection {
    pub seeds: usize,
    /// Context corruption rates compared by the crossroad study.
    pub crossroad_rates: Vec<f64>,
    pub tokenizer_depths: Vec<usize>,
    pub crossroad_world: CrossroadWorld,
    pub crossroad_training: CrossroadTraining,
    pub collapse: CollapseBenchmark,
    pub quality: QualityBenchmark,
    pub retrieval: RetrievalBenchmark,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            seeds: 5,
            crossroad_rates: vec![0.0, 0.5],
            tokenizer_depths: vec![1, 2, 3],
            crossroad_world: CrossroadWorld::default(),
            crossroad_training: CrossroadTraining::default(),
            collapse: CollapseBenchmark::default(),
            quality: QualityBenchmark::default(),
            retrieval: RetrievalBenchmark::default(),
        }
    }
}

fn parse_version(v: &str) -> Result<(u32, u32)> {
    let (a, b) = v.split_once('.').unwrap_or((v, "0"));
    Ok((a.trim().parse().with_context(|| format!("bad schema_version {v:?}"))?, b.trim().parse().with_context(|| format!("bad schema_version {v:?}"))?))
}

impl RunConfig {
    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Parses a config, refusing a newer major schema.
    pub fn from_toml(text: &str) -> Result<Self> {
        let value: toml::Table = toml::from_str(text).context("config is not valid TOML")?;
        Self::from_table(value)
    }

    fn from_table(value: toml::Table) -> Result<Self> {
        let version = value.get("schema_version").and_then(|v| v.as_str()).unwrap_or(SCHEMA_VERSION);
        let (major, _) = parse_version(version)?;
        let (supported, _) = parse_version(SCHEMA_VERSION)?;
        if major > supported {
            bail!("config schema {version} is newer than supported {SCHEMA_VERSION}; upgrade the tool");
        }
        let cfg: RunConfig = toml::Value::Table(value).try_into().context("config does not match the schema")?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).with_context(|| format!("writing {}", path.display()))
    }

    /// Applies `MOTIONSTREAM_<A>__<B>=value` pairs (case-insensitive keys;
    /// values parsed as TOML, else taken as strings).
    pub fn with_overrides<I, K, V>(&self, vars: I) -> Result<Self>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let mut table: toml::Table = toml::Value::try_from(self)?.as_table().cloned().ok_or_else(|| anyhow!("config is not a table"))?;
        let mut any = false;
        for (k, v) in vars {
            let Some(path) = k.as_ref().strip_prefix(ENV_PREFIX) else { continue };
            let keys: Vec<String> = path.split("__").map(|s| s.to_ascii_lowercase()).collect();
            if keys.iter().any(|k| k.is_empty()) {
                bail!("malformed override {}", k.as_ref());
            }
            set_path(&mut table, &keys, parse_scalar(v.as_ref())).with_context(|| format!("override {}", k.as_ref()))?;
            any = true;
        }
        if !any {
            return Ok(self.clone());
        }
        Self::from_table(table)
    }

    pub fn with_env(&self) -> Result<Self> {
        self.with_overrides(std::env::vars())
    }
}

fn parse_scalar(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(table: &mut toml::Table, keys: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = keys.split_last().ok_or_else(|| anyhow!("empty key"))?;
    let mut cur = table;
    for k in parents {
        cur = cur
            .get_mut(k)
            .and_then(|v| v.as_table_mut())
            .ok_or_else(|| anyhow!("unknown config section `{k}`"))?;
    }
    if !cur.contains_key(last) {
        bail!("unknown config key `{last}`");
    }
    cur.insert(last.clone(), value);
    Ok(())
}
