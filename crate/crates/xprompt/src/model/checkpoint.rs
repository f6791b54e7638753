//! Checkpoint container: one directory holding a JSON manifest, a raw
//! little-endian float32 parameter blob, and the POS vocabulary file.
//!
//! The blob is the interchange format: loading widens the f32 values and
//! saving a loaded model reproduces the files byte for byte. The manifest
//! is written last, so a readable manifest implies complete blobs.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayD};
use serde::{Deserialize, Serialize};

use super::{AspectHead, AteModel, CharVocab, Encoder, EncoderConfig, PromptUsage, SyntaxHead};
use crate::corpus::atomic_write;
use crate::error::{Error, Result};
use crate::prompts::{PromptBank, PromptCandidate};
use crate::syntax::PosVocabulary;
use crate::training::TrainConfig;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";
pub const POS_VOCAB_FILE: &str = "pos_vocab.txt";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the blob, in f32 elements.
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    encoder: EncoderConfig,
    char_vocab: String,
    prompt_usage: PromptUsage,
    prompt_provenance: Vec<PromptCandidate>,
    /// Configuration the model was trained with, when it came out of the
    /// training loop.
    train_config: Option<TrainConfig>,
    pos_vocab_file: String,
    params_file: String,
    arrays: Vec<ArrayEntry>,
}

/// Write the model (and optionally its training config) to `dir`.
pub fn save(model: &AteModel, train_config: Option<&TrainConfig>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut arrays = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    let mut offset = 0usize;
    let mut non_finite: Option<String> = None;
    let mut clone = model.clone();
    clone.visit_params_mut(&mut |name, view| {
        if !view.iter().all(|v| v.is_finite()) && non_finite.is_none() {
            non_finite = Some(name.clone());
        }
        arrays.push(ArrayEntry {
            name,
            shape: view.shape().to_vec(),
            offset,
        });
        for &value in view.iter() {
            blob.extend_from_slice(&(value as f32).to_le_bytes());
        }
        offset += view.len();
    });
    if let Some(name) = non_finite {
        return Err(Error::Checkpoint(format!(
            "refusing to save non-finite parameters in {name}"
        )));
    }

    atomic_write(&dir.join(PARAMS_FILE), &blob)?;
    model.pos_vocab.save(&dir.join(POS_VOCAB_FILE))?;
    let manifest = Manifest {
        format_version: 1,
        encoder: model.encoder.config,
        char_vocab: model.char_vocab.chars().to_string(),
        prompt_usage: model.prompt_usage,
        prompt_provenance: model.bank.provenance.clone(),
        train_config: train_config.cloned(),
        pos_vocab_file: POS_VOCAB_FILE.to_string(),
        params_file: PARAMS_FILE.to_string(),
        arrays,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    atomic_write(&dir.join(MANIFEST_FILE), text.as_bytes())
}

/// Load a model back, exactly as the f32 blob stored it.
pub fn load(dir: &Path) -> Result<(AteModel, Option<TrainConfig>)> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format_version != 1 {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format version {}",
            manifest.format_version
        )));
    }
    manifest.encoder.validate()?;

    let params_path = dir.join(&manifest.params_file);
    let blob = fs::read(&params_path).map_err(|e| Error::io(&params_path, e))?;
    if blob.len() % 4 != 0 {
        return Err(Error::Checkpoint(format!(
            "parameter blob length {} is not a multiple of 4",
            blob.len()
        )));
    }
    let values: Vec<f64> = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();

    let read_array = |name: &str| -> Result<ArrayD<f64>> {
        let entry = manifest
            .arrays
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing array {name}")))?;
        let len: usize = entry.shape.iter().product();
        let end = entry.offset + len;
        if end > values.len() {
            return Err(Error::Checkpoint(format!(
                "array {name} extends past the blob ({} > {})",
                end,
                values.len()
            )));
        }
        ArrayD::from_shape_vec(entry.shape.clone(), values[entry.offset..end].to_vec())
            .map_err(|e| Error::Checkpoint(format!("array {name}: {e}")))
    };

    let as2 = |a: ArrayD<f64>, name: &str| -> Result<Array2<f64>> {
        a.into_dimensionality()
            .map_err(|_| Error::Checkpoint(format!("array {name} is not 2-d")))
    };
    let as1 = |a: ArrayD<f64>, name: &str| -> Result<Array1<f64>> {
        a.into_dimensionality()
            .map_err(|_| Error::Checkpoint(format!("array {name} is not 1-d")))
    };

    let char_vocab = CharVocab::from_chars(manifest.char_vocab.clone());
    let pos_vocab = PosVocabulary::load(&dir.join(&manifest.pos_vocab_file))?;

    // skeleton with the right shapes, then overwrite every tensor
    let mut encoder = Encoder::init(manifest.encoder, char_vocab.size(), 0)?;
    let embedding = as2(read_array("encoder.embedding")?, "encoder.embedding")?;
    if embedding.nrows() != char_vocab.size() || embedding.ncols() != manifest.encoder.hidden_width
    {
        return Err(Error::Checkpoint(format!(
            "embedding shape {:?} disagrees with vocabulary {} and width {}",
            embedding.dim(),
            char_vocab.size(),
            manifest.encoder.hidden_width
        )));
    }
    encoder.embedding = embedding;
    for i in 0..manifest.encoder.num_layers {
        let name = |s: &str| format!("encoder.layers.{i}.{s}");
        let layer = &mut encoder.layers[i];
        layer.ln1_gain = as1(read_array(&name("ln1.gain"))?, "ln1.gain")?;
        layer.ln1_bias = as1(read_array(&name("ln1.bias"))?, "ln1.bias")?;
        layer.wq = as2(read_array(&name("attn.wq"))?, "attn.wq")?;
        layer.wk = as2(read_array(&name("attn.wk"))?, "attn.wk")?;
        layer.wv = as2(read_array(&name("attn.wv"))?, "attn.wv")?;
        layer.wo = as2(read_array(&name("attn.wo"))?, "attn.wo")?;
        layer.ln2_gain = as1(read_array(&name("ln2.gain"))?, "ln2.gain")?;
        layer.ln2_bias = as1(read_array(&name("ln2.bias"))?, "ln2.bias")?;
        layer.w1 = as2(read_array(&name("ffn.w1"))?, "ffn.w1")?;
        layer.b1 = as1(read_array(&name("ffn.b1"))?, "ffn.b1")?;
        layer.w2 = as2(read_array(&name("ffn.w2"))?, "ffn.w2")?;
        layer.b2 = as1(read_array(&name("ffn.b2"))?, "ffn.b2")?;
    }
    encoder.final_gain = as1(read_array("encoder.final_ln.gain")?, "final_ln.gain")?;
    encoder.final_bias = as1(read_array("encoder.final_ln.bias")?, "final_ln.bias")?;

    let bank = PromptBank {
        vectors: as2(read_array("prompt_bank.vectors")?, "prompt_bank.vectors")?,
        provenance: manifest.prompt_provenance.clone(),
    };
    bank.check()?;
    let aspect_head = AspectHead {
        weight: as2(read_array("aspect_head.weight")?, "aspect_head.weight")?,
        bias: as1(read_array("aspect_head.bias")?, "aspect_head.bias")?,
    };
    let syntax_head = SyntaxHead {
        weight: as2(read_array("syntax_head.weight")?, "syntax_head.weight")?,
        bias: as1(read_array("syntax_head.bias")?, "syntax_head.bias")?,
    };
    if syntax_head.classes() != pos_vocab.size() {
        return Err(Error::Checkpoint(format!(
            "syntax head has {} classes but the POS vocabulary holds {}",
            syntax_head.classes(),
            pos_vocab.size()
        )));
    }

    Ok((
        AteModel {
            encoder,
            char_vocab,
            pos_vocab,
            bank,
            prompt_usage: manifest.prompt_usage,
            aspect_head,
            syntax_head,
        },
        manifest.train_config,
    ))
}

/// Concatenated checkpoint bytes (manifest + blob), for fingerprinting.
pub fn digest_bytes(dir: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    for file in [MANIFEST_FILE, PARAMS_FILE, POS_VOCAB_FILE] {
        let path = dir.join(file);
        bytes.extend(fs::read(&path).map_err(|e| Error::io(&path, e))?);
    }
    Ok(bytes)
}
