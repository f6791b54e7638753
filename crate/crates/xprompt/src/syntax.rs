//! POS tagging, the POS vocabulary, and masked-POS plans.
//!
//! A quarter of the POS stream is replaced by a reserved mask symbol before
//! encoding; the syntax head is trained to recover the original tags at
//! exactly those positions. Masking replaces a fixed `ceil(rate * n)`
//! positions per sentence, sampled uniformly without replacement from a
//! seeded stream, so every sentence contributes the same relative amount of
//! recovery signal and tests can assert exact counts.

use std::collections::{BTreeSet, HashMap};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use serde::{Deserialize, Serialize};

use crate::corpus::DomainCorpus;
use crate::error::{Error, Result};
use crate::rng::stream_rng;

/// Reserved symbol standing in for a masked POS tag.
pub const MASK_TAG: &str = "[MASK]";

/// The closed set of POS tags seen during vocabulary build, with the mask
/// symbol reserved at id 0. `size()` is the syntax head's class count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PosVocabulary {
    tags: Vec<String>,
    index: HashMap<String, usize>,
}

impl PosVocabulary {
    pub fn new() -> Self {
        let mut vocab = PosVocabulary {
            tags: vec![MASK_TAG.to_string()],
            index: HashMap::new(),
        };
        vocab.rebuild_index();
        vocab
    }

    /// Collect every tag of every split of the given corpora, sorted, after
    /// the reserved mask id.
    pub fn from_corpora<'a>(corpora: impl IntoIterator<Item = &'a DomainCorpus>) -> Self {
        let mut seen = BTreeSet::new();
        for corpus in corpora {
            for sentence in corpus.train.iter().chain(&corpus.test) {
                for tag in &sentence.pos_tags {
                    seen.insert(tag.clone());
                }
            }
        }
        let mut vocab = PosVocabulary::new();
        for tag in seen {
            vocab.add(&tag);
        }
        vocab
    }

    fn rebuild_index(&mut self) {
        self.index = self
            .tags
            .iter()
            .enumerate()
            .map(|(id, tag)| (tag.clone(), id))
            .collect();
    }

    /// Register a tag, returning its id. Adding [`MASK_TAG`] is rejected.
    pub fn add(&mut self, tag: &str) -> usize {
        debug_assert!(tag != MASK_TAG || self.index.contains_key(MASK_TAG));
        if let Some(&id) = self.index.get(tag) {
            return id;
        }
        self.tags.push(tag.to_string());
        let id = self.tags.len() - 1;
        self.index.insert(tag.to_string(), id);
        id
    }

    pub fn id(&self, tag: &str) -> Option<usize> {
        self.index.get(tag).copied()
    }

    pub fn tag(&self, id: usize) -> Option<&str> {
        self.tags.get(id).map(|s| s.as_str())
    }

    pub fn mask_id(&self) -> usize {
        0
    }

    /// Total tag count including the mask symbol.
    pub fn size(&self) -> usize {
        self.tags.len()
    }

    pub fn tags(&self) -> &[String] {
        &self.tags
    }

    /// Newline-separated tag list; line number = id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tags.join("\n");
        text.push('\n');
        crate::corpus::atomic_write(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tags: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        if tags.first().map(|t| t.as_str()) != Some(MASK_TAG) {
            return Err(Error::Validation(format!(
                "{}: first vocabulary entry must be {MASK_TAG}",
                path.display()
            )));
        }
        let mut vocab = PosVocabulary { tags, index: HashMap::new() };
        vocab.rebuild_index();
        Ok(vocab)
    }
}

impl Default for PosVocabulary {
    fn default() -> Self {
        Self::new()
    }
}

/// Which positions of one sentence are masked.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub masked_positions: BTreeSet<usize>,
    /// Per-token 0/1 filter; 1 iff the position is masked.
    pub indicator: Vec<u8>,
    pub seed: u64,
}

impl MaskPlan {
    pub fn masked_count(&self) -> usize {
        self.masked_positions.len()
    }
}

/// Replace `ceil(rate * n)` POS tags by [`MASK_TAG`].
///
/// Positions are drawn uniformly without replacement from the seeded
/// stream. Pure: the input list is untouched and repeated calls are
/// bit-identical.
pub fn apply_pos_mask(pos_tags: &[String], rate: f64, seed: u64) -> Result<(Vec<String>, MaskPlan)> {
    if pos_tags.is_empty() {
        return Err(Error::Validation("cannot mask an empty tag list".into()));
    }
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Config(format!("mask rate {rate} outside [0, 1]")));
    }
    let n = pos_tags.len();
    let count = (rate * n as f64).ceil() as usize;
    let count = count.min(n);

    // partial Fisher-Yates: first `count` slots of a shuffled index list
    let mut rng = stream_rng(seed, "mask", 0);
    let mut indices: Vec<usize> = (0..n).collect();
    for i in 0..count {
        let j = i + (rand::Rng::gen_range(&mut rng, 0..(n - i) as u64) as usize);
        indices.swap(i, j);
    }
    let masked_positions: BTreeSet<usize> = indices[..count].iter().copied().collect();

    let mut masked = pos_tags.to_vec();
    let mut indicator = vec![0u8; n];
    for &pos in &masked_positions {
        masked[pos] = MASK_TAG.to_string();
        indicator[pos] = 1;
    }
    Ok((
        masked,
        MaskPlan {
            masked_positions,
            indicator,
            seed,
        },
    ))
}

/// Anything that maps a token list to an equally long POS tag list.
pub trait PosProvider {
    fn tag(&self, tokens: &[String]) -> Result<Vec<String>>;
}

/// Deterministic lexicon tagger for desk-scale pipelines and tests.
///
/// Looks tokens up case-insensitively, then falls back to a couple of
/// suffix rules, then to `NN`.
pub struct DictionaryTagger {
    lexicon: HashMap<String, String>,
}

impl DictionaryTagger {
    pub fn new(entries: impl IntoIterator<Item = (String, String)>) -> Self {
        DictionaryTagger {
            lexicon: entries
                .into_iter()
                .map(|(w, t)| (w.to_lowercase(), t))
                .collect(),
        }
    }

    /// Lexicon harvested from a corpus' own POS columns (majority tag wins,
    /// ties broken lexicographically).
    pub fn from_corpora<'a>(corpora: impl IntoIterator<Item = &'a DomainCorpus>) -> Self {
        let mut counts: HashMap<String, HashMap<String, usize>> = HashMap::new();
        for corpus in corpora {
            for sentence in corpus.train.iter().chain(&corpus.test) {
                for (token, tag) in sentence.tokens.iter().zip(&sentence.pos_tags) {
                    *counts
                        .entry(token.to_lowercase())
                        .or_default()
                        .entry(tag.clone())
                        .or_default() += 1;
                }
            }
        }
        let lexicon = counts
            .into_iter()
            .map(|(word, tags)| {
                let mut best: Vec<(String, usize)> = tags.into_iter().collect();
                best.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
                (word, best[0].0.clone())
            })
            .collect();
        DictionaryTagger { lexicon }
    }
}

impl PosProvider for DictionaryTagger {
    fn tag(&self, tokens: &[String]) -> Result<Vec<String>> {
        Ok(tokens
            .iter()
            .map(|token| {
                if let Some(tag) = self.lexicon.get(&token.to_lowercase()) {
                    return tag.clone();
                }
                let lower = token.to_lowercase();
                if lower.ends_with("ly") {
                    "RB".to_string()
                } else if lower.ends_with('s') && lower.len() > 3 {
                    "VBZ".to_string()
                } else if token.chars().all(|c| c.is_ascii_digit()) {
                    "CD".to_string()
                } else {
                    "NN".to_string()
                }
            })
            .collect())
    }
}

/// Adapter for an external tagger process.
///
/// The program receives one token per line on stdin and must answer with
/// one tag per line on stdout, same order, same count.
pub struct CommandTagger {
    pub program: PathBuf,
    pub args: Vec<String>,
}

impl PosProvider for CommandTagger {
    fn tag(&self, tokens: &[String]) -> Result<Vec<String>> {
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Provider(format!("{}: {e}", self.program.display())))?;
        {
            let stdin = child
                .stdin
                .as_mut()
                .ok_or_else(|| Error::Provider("no stdin handle".into()))?;
            for token in tokens {
                writeln!(stdin, "{token}")
                    .map_err(|e| Error::Provider(format!("writing tokens: {e}")))?;
            }
        }
        let output = child
            .wait_with_output()
            .map_err(|e| Error::Provider(format!("waiting for tagger: {e}")))?;
        if !output.status.success() {
            return Err(Error::Provider(format!(
                "tagger exited with {}: {}",
                output.status,
                String::from_utf8_lossy(&output.stderr).trim()
            )));
        }
        let tags: Vec<String> = String::from_utf8_lossy(&output.stdout)
            .lines()
            .map(|l| l.trim().to_string())
            .filter(|l| !l.is_empty())
            .collect();
        Ok(tags)
    }
}

/// Tag a sentence through a provider and register new tags in the
/// vocabulary. The provider must return one tag per token and must never
/// emit the reserved mask symbol.
pub fn tag_pos(
    tokens: &[String],
    provider: &dyn PosProvider,
    vocab: &mut PosVocabulary,
) -> Result<Vec<String>> {
    if tokens.is_empty() {
        return Err(Error::Validation("cannot tag an empty sentence".into()));
    }
    let tags = provider.tag(tokens)?;
    if tags.len() != tokens.len() {
        return Err(Error::Provider(format!(
            "provider returned {} tags for {} tokens",
            tags.len(),
            tokens.len()
        )));
    }
    for tag in &tags {
        if tag == MASK_TAG {
            return Err(Error::Provider(format!(
                "provider emitted reserved symbol {MASK_TAG}"
            )));
        }
        vocab.add(tag);
    }
    Ok(tags)
}
