//! Save/load of trained models through the checkpoint container. Models are
//! rebuilt from their stored config, then parameters are copied in by name.

use std::path::Path;

use motionstream_core::generator::{Generator, GeneratorConfig};
use motionstream_core::rewards::{Aligner, AlignerConfig, QualityConfig, QualityModel};
use motionstream_core::tokenizer::{Tokenizer, TokenizerConfig};
use serde_json::json;

use crate::formats::{read_checkpoint, write_checkpoint, Checkpoint, FormatError, Result};

pub const KIND_TOKENIZER: &str = "tokenizer";
pub const KIND_GENERATOR: &str = "generator";
pub const KIND_QUALITY: &str = "quality";
pub const KIND_ALIGNER: &str = "aligner";

fn bad(msg: String) -> FormatError {
    FormatError::Malformed(msg)
}

pub fn tokenizer_checkpoint(tok: &Tokenizer) -> Checkpoint {
    let mut c = Checkpoint::new(KIND_TOKENIZER, json!({ "config": tok.config, "num_joints": tok.num_joints }));
    c.push_store("", &tok.store);
    for (i, t) in tok.codebooks.tables.iter().enumerate() {
        c.tensors.push((format!("codebook.{i}"), t.clone()));
    }
    c
}

pub fn tokenizer_from(c: &Checkpoint) -> Result<Tokenizer> {
    c.expect_kind(KIND_TOKENIZER)?;
    let config: TokenizerConfig = c.meta_field("config")?;
    let joints: usize = c.meta_field("num_joints")?;
    let mut tok = Tokenizer::new(config, joints, &mut motionstream_core::seeded(0))?;
    c.load_store("", &mut tok.store)?;
    for i in 0..tok.codebooks.tables.len() {
        let t = c.tensor(&format!("codebook.{i}"))?;
        if t.shape() != tok.codebooks.tables[i].shape() {
            return Err(bad(format!("codebook {i} shape mismatch")));
        }
        tok.codebooks.tables[i] = t.clone();
    }
    Ok(tok)
}

pub fn generator_checkpoint(gen: &Generator) -> Checkpoint {
    let mut c = Checkpoint::new(KIND_GENERATOR, json!({ "config": gen.config }));
    c.push_store("", &gen.store);
    c
}

pub fn generator_from(c: &Checkpoint) -> Result<Generator> {
    c.expect_kind(KIND_GENERATOR)?;
    let config: GeneratorConfig = c.meta_field("config")?;
    let mut gen = Generator::new(config, &mut motionstream_core::seeded(0))?;
    c.load_store("", &mut gen.store)?;
    Ok(gen)
}

pub fn quality_checkpoint(m: &QualityModel) -> Checkpoint {
    let mut c = Checkpoint::new(KIND_QUALITY, json!({ "config": m.config, "frame_dim": m.frame_dim }));
    c.push_store("", &m.store);
    c
}

pub fn quality_from(c: &Checkpoint) -> Result<QualityModel> {
    c.expect_kind(KIND_QUALITY)?;
    let config: QualityConfig = c.meta_field("config")?;
    let mut m = QualityModel::new(config, c.meta_field("frame_dim")?, &mut motionstream_core::seeded(0))?;
    c.load_store("", &mut m.store)?;
    Ok(m)
}

pub fn aligner_checkpoint(m: &Aligner) -> Checkpoint {
    let mut c = Checkpoint::new(
        KIND_ALIGNER,
        json!({ "config": m.config, "frame_dim": m.frame_dim, "audio_layers": m.audio_layers, "audio_size": m.audio_size }),
    );
    c.push_store("", &m.store);
    c
}

pub fn aligner_from(c: &Checkpoint) -> Result<Aligner> {
    c.expect_kind(KIND_ALIGNER)?;
    let config: AlignerConfig = c.meta_field("config")?;
    let mut m = Aligner::new(
        config,
        c.meta_field("frame_dim")?,
        c.meta_field("audio_layers")?,
        c.meta_field("audio_size")?,
        &mut motionstream_core::seeded(0),
    )?;
    c.load_store("", &mut m.store)?;
    Ok(m)
}

pub fn save_tokenizer(path: &Path, tok: &Tokenizer) -> Result<()> {
    write_checkpoint(path, &tokenizer_checkpoint(tok))
}

pub fn load_tokenizer(path: &Path) -> Result<Tokenizer> {
    tokenizer_from(&read_checkpoint(path)?)
}

pub fn save_generator(path: &Path, gen: &Generator) -> Result<()> {
    write_checkpoint(path, &generator_checkpoint(gen))
}

pub fn load_generator(path: &Path) -> Result<Generator> {
    generator_from(&read_checkpoint(path)?)
}

pub fn save_quality(path: &Path, m: &QualityModel) -> Result<()> {
    write_checkpoint(path, &quality_checkpoint(m))
}

pub fn load_quality(path: &Path) -> Result<QualityModel> {
    quality_from(&read_checkpoint(path)?)
}

pub fn save_aligner(path: &Path, m: &Aligner) -> Result<()> {
    write_checkpoint(path, &aligner_checkpoint(m))
}

pub fn load_aligner(path: &Path) -> Result<Aligner> {
    aligner_from(&read_checkpoint(path)?)
}
