//! Deterministic synthetic corpora for desk-scale training and tests.
//!
//! A [`SyntheticSpec`] names word pools (each tied to one POS tag) and
//! templates (sequences of slots drawing from those pools). Aspect slots
//! yield a `B I*` run; everything else is `O`. Generation is a pure
//! function of the seed.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{BioLabel, DomainCorpus, TaggedSentence};
use crate::error::{Error, Result};
use crate::rng::stream_rng;

/// A named pool of words sharing one POS tag.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordPool {
    pub name: String,
    pub pos: String,
    pub words: Vec<String>,
}

/// One slot of a template: which pool to draw from, how many tokens, and
/// whether the tokens form an aspect span.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotSpec {
    pub pool: String,
    #[serde(default)]
    pub aspect: bool,
    #[serde(default = "one")]
    pub min_tokens: usize,
    #[serde(default = "one")]
    pub max_tokens: usize,
}

fn one() -> usize {
    1
}

impl SlotSpec {
    pub fn word(pool: &str) -> Self {
        SlotSpec {
            pool: pool.to_string(),
            aspect: false,
            min_tokens: 1,
            max_tokens: 1,
        }
    }

    pub fn aspect(pool: &str, min_tokens: usize, max_tokens: usize) -> Self {
        SlotSpec {
            pool: pool.to_string(),
            aspect: true,
            min_tokens,
            max_tokens,
        }
    }
}

pub type Template = Vec<SlotSpec>;

/// Everything needed to generate one synthetic domain corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub domain_name: String,
    pub sentences: usize,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    pub pools: Vec<WordPool>,
    pub templates: Vec<Template>,
    /// Strip gold BIO from the train split (target-domain shape).
    #[serde(default)]
    pub unlabelled_train: bool,
}

fn default_train_fraction() -> f64 {
    0.7
}

/// Generate a corpus from a spec, deterministic under the seed.
pub fn generate_synthetic_corpus(seed: u64, spec: &SyntheticSpec) -> Result<DomainCorpus> {
    if spec.sentences == 0 {
        return Err(Error::Config("sentence count must be positive".into()));
    }
    if spec.templates.is_empty() {
        return Err(Error::Config("at least one template is required".into()));
    }
    if !(0.0..=1.0).contains(&spec.train_fraction) {
        return Err(Error::Config("train_fraction must lie in [0, 1]".into()));
    }
    let pools: BTreeMap<&str, &WordPool> =
        spec.pools.iter().map(|p| (p.name.as_str(), p)).collect();
    for pool in &spec.pools {
        if pool.words.is_empty() {
            return Err(Error::Config(format!("pool {:?} has no words", pool.name)));
        }
    }
    for template in &spec.templates {
        for slot in template {
            let pool = pools.get(slot.pool.as_str()).ok_or_else(|| {
                Error::Config(format!("template references unknown pool {:?}", slot.pool))
            })?;
            if slot.min_tokens == 0 || slot.min_tokens > slot.max_tokens {
                return Err(Error::Config(format!(
                    "slot on pool {:?} has invalid token range {}..={}",
                    slot.pool, slot.min_tokens, slot.max_tokens
                )));
            }
            let _ = pool;
        }
    }

    let mut rng = stream_rng(seed, "synthetic", 0);
    let mut sentences = Vec::with_capacity(spec.sentences);
    for index in 0..spec.sentences {
        let template = &spec.templates[rng.gen_range(0..spec.templates.len())];
        let mut tokens = Vec::new();
        let mut pos_tags = Vec::new();
        let mut labels = Vec::new();
        for slot in template {
            let pool = pools[slot.pool.as_str()];
            let count = rng.gen_range(slot.min_tokens..=slot.max_tokens);
            let picks: Vec<&String> = if pool.words.len() >= count {
                pool.words.choose_multiple(&mut rng, count).collect()
            } else {
                (0..count)
                    .map(|_| &pool.words[rng.gen_range(0..pool.words.len())])
                    .collect()
            };
            for (offset, word) in picks.into_iter().enumerate() {
                tokens.push(word.clone());
                pos_tags.push(pool.pos.clone());
                labels.push(if slot.aspect {
                    if offset == 0 {
                        BioLabel::B
                    } else {
                        BioLabel::I
                    }
                } else {
                    BioLabel::O
                });
            }
        }
        sentences.push(TaggedSentence::new(
            format!("{}:{index}", spec.domain_name),
            tokens,
            pos_tags,
            Some(labels),
        )?);
    }

    let train_count = (spec.train_fraction * spec.sentences as f64).round() as usize;
    let train_count = train_count.min(spec.sentences);
    let mut train: Vec<TaggedSentence> = sentences[..train_count].to_vec();
    let test = sentences[train_count..].to_vec();
    if spec.unlabelled_train {
        for sentence in &mut train {
            sentence.bio_labels = None;
        }
    }
    DomainCorpus::new(spec.domain_name.clone(), train, test)
}

fn pool(name: &str, pos: &str, words: &[&str]) -> WordPool {
    WordPool {
        name: name.to_string(),
        pos: pos.to_string(),
        words: words.iter().map(|w| w.to_string()).collect(),
    }
}

/// Shared template set: aspect NN runs sit directly before a VBZ verb,
/// non-aspect NNs sit sentence-final after an adjective. The POS patterns
/// are identical across the two builtin domains while the vocabulary is
/// disjoint (function words aside).
fn review_templates() -> Vec<Template> {
    vec![
        vec![
            SlotSpec::word("det"),
            SlotSpec::aspect("aspect", 1, 2),
            SlotSpec::word("verb"),
            SlotSpec::word("adv"),
            SlotSpec::word("adj"),
        ],
        vec![
            SlotSpec::word("det"),
            SlotSpec::aspect("aspect", 1, 2),
            SlotSpec::word("verb"),
            SlotSpec::word("adj"),
        ],
        vec![
            SlotSpec::aspect("aspect", 1, 1),
            SlotSpec::word("verb"),
            SlotSpec::word("adv"),
            SlotSpec::word("adj"),
        ],
        vec![
            SlotSpec::word("det"),
            SlotSpec::word("adj"),
            SlotSpec::word("noun_other"),
        ],
        vec![
            SlotSpec::word("pron"),
            SlotSpec::word("verb"),
            SlotSpec::word("det"),
            SlotSpec::word("adj"),
            SlotSpec::word("noun_other"),
        ],
        vec![
            SlotSpec::word("det"),
            SlotSpec::aspect("aspect", 1, 2),
            SlotSpec::word("verb"),
            SlotSpec::word("det"),
            SlotSpec::word("adj"),
            SlotSpec::word("noun_other"),
        ],
    ]
}

/// Builtin device-review domain (source-domain shape).
pub fn device_reviews_spec(domain_name: &str, sentences: usize) -> SyntheticSpec {
    SyntheticSpec {
        domain_name: domain_name.to_string(),
        sentences,
        train_fraction: 0.7,
        pools: vec![
            pool(
                "aspect",
                "NN",
                &[
                    "battery", "screen", "keyboard", "trackpad", "speaker", "charger", "fan",
                    "webcam", "hinge", "processor",
                ],
            ),
            pool("noun_other", "NN", &["week", "month", "morning", "store"]),
            pool(
                "verb",
                "VBZ",
                &["lasts", "glows", "clicks", "runs", "boots", "spins", "charges", "works"],
            ),
            pool(
                "adj",
                "JJ",
                &["solid", "sturdy", "quick", "quiet", "bright", "sharp", "slow", "loud"],
            ),
            pool("adv", "RB", &["really", "very", "quite", "surprisingly"]),
            pool("det", "DT", &["the", "this", "that"]),
            pool("pron", "PRP", &["it", "everything"]),
        ],
        templates: review_templates(),
        unlabelled_train: false,
    }
}

/// Builtin restaurant-review domain (target-domain shape): same POS
/// patterns, disjoint content vocabulary.
pub fn restaurant_reviews_spec(domain_name: &str, sentences: usize) -> SyntheticSpec {
    SyntheticSpec {
        domain_name: domain_name.to_string(),
        sentences,
        train_fraction: 0.7,
        pools: vec![
            pool(
                "aspect",
                "NN",
                &[
                    "pasta", "soup", "steak", "dessert", "waiter", "menu", "wine", "bread",
                    "salad", "chef",
                ],
            ),
            pool("noun_other", "NN", &["evening", "weekend", "visit", "street"]),
            pool(
                "verb",
                "VBZ",
                &["tastes", "smells", "arrives", "seems", "pairs", "fills", "melts", "shines"],
            ),
            pool(
                "adj",
                "JJ",
                &["fresh", "warm", "crispy", "bland", "rich", "tender", "salty", "sweet"],
            ),
            pool("adv", "RB", &["truly", "fairly", "rather", "notably"]),
            pool("det", "DT", &["the", "this", "that"]),
            pool("pron", "PRP", &["it", "everything"]),
        ],
        templates: review_templates(),
        unlabelled_train: false,
    }
}
