//! Transferable soft prompts: pivot extraction, MI scoring, distance
//! ranking, and the learnable prompt bank.
//!
//! Candidates are tokens frequent in every source domain. Each candidate
//! gets a mutual-information score between "sentence contains the token"
//! and "sentence contains an aspect span" (pooled over all source train
//! sentences), then candidates are ranked by mean Euclidean distance
//! between their static embedding and the embeddings of the gold aspect
//! tokens. The top `m` initialize the bank; the vectors train from there.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::corpus::DomainCorpus;
use crate::error::{Error, Result};

/// A pivot token with its selection statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptCandidate {
    pub token: String,
    /// Mutual information in bits between token presence and aspect
    /// presence, over source train sentences.
    pub mi_score: f64,
    /// Token occurrence count per source domain.
    pub domain_counts: BTreeMap<String, usize>,
    /// Mean Euclidean distance to the aspect-token embeddings; filled by
    /// [`rank_candidates`].
    pub mean_aspect_distance: f64,
}

/// The learnable prompt vectors plus where they came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBank {
    /// `m x d`, row i initialized from `provenance[i]`.
    pub vectors: Array2<f64>,
    pub provenance: Vec<PromptCandidate>,
}

impl PromptBank {
    pub fn m(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn width(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn check(&self) -> Result<()> {
        if self.m() == 0 {
            return Err(Error::Validation("prompt bank must hold at least one vector".into()));
        }
        if self.provenance.len() != self.m() {
            return Err(Error::Validation(format!(
                "prompt bank has {} vectors but {} provenance entries",
                self.m(),
                self.provenance.len()
            )));
        }
        if !self.vectors.iter().all(|v| v.is_finite()) {
            return Err(Error::Validation("prompt bank contains non-finite values".into()));
        }
        Ok(())
    }
}

/// Binary mutual information from a 2x2 contingency table, in bits.
///
/// `n11`: both events, `n10`: X only, `n01`: Y only, `n00`: neither.
/// Zero-count cells contribute zero (the 0 log 0 := 0 convention).
pub fn mutual_information(n11: u64, n10: u64, n01: u64, n00: u64) -> Result<f64> {
    let total = n11 + n10 + n01 + n00;
    if total == 0 {
        return Err(Error::Validation(
            "mutual information needs a nonzero total count".into(),
        ));
    }
    let n = total as f64;
    let cell = |nxy: u64, nx: u64, ny: u64| -> f64 {
        if nxy == 0 {
            return 0.0;
        }
        let pxy = nxy as f64 / n;
        let px = nx as f64 / n;
        let py = ny as f64 / n;
        pxy * (pxy / (px * py)).log2()
    };
    let x1 = n11 + n10;
    let x0 = n01 + n00;
    let y1 = n11 + n01;
    let y0 = n10 + n00;
    let mi = cell(n11, x1, y1) + cell(n10, x1, y0) + cell(n01, x0, y1) + cell(n00, x0, y0);
    // clamp the tiny negative residue floating-point summation can leave
    Ok(mi.max(0.0))
}

/// Tokens occurring at least `min_count` times in every source corpus,
/// MI-scored against aspect presence.
pub fn extract_pivot_candidates(
    corpora: &[&DomainCorpus],
    min_count: usize,
) -> Result<Vec<PromptCandidate>> {
    if corpora.is_empty() {
        return Err(Error::Validation("at least one source corpus is required".into()));
    }
    if min_count == 0 {
        return Err(Error::Config("min_count must be at least 1".into()));
    }
    for corpus in corpora {
        if !corpus.labelled {
            return Err(Error::Validation(format!(
                "source corpus {} is unlabelled; MI needs aspect labels",
                corpus.domain_name
            )));
        }
    }

    // per-domain raw occurrence counts
    let mut per_domain: Vec<HashMap<&str, usize>> = Vec::with_capacity(corpora.len());
    for corpus in corpora {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for sentence in &corpus.train {
            for token in &sentence.tokens {
                *counts.entry(token.as_str()).or_default() += 1;
            }
        }
        per_domain.push(counts);
    }

    // sentence-level contingency counts pooled over all source domains
    let mut total_sentences = 0u64;
    let mut aspect_sentences = 0u64;
    let mut with_token: HashMap<&str, u64> = HashMap::new();
    let mut with_token_and_aspect: HashMap<&str, u64> = HashMap::new();
    for corpus in corpora {
        for sentence in &corpus.train {
            total_sentences += 1;
            let has_aspect = sentence
                .bio_labels
                .as_ref()
                .map(|l| l.iter().any(|&b| b != crate::corpus::BioLabel::O))
                .unwrap_or(false);
            if has_aspect {
                aspect_sentences += 1;
            }
            let distinct: BTreeSet<&str> = sentence.tokens.iter().map(|t| t.as_str()).collect();
            for token in distinct {
                *with_token.entry(token).or_default() += 1;
                if has_aspect {
                    *with_token_and_aspect.entry(token).or_default() += 1;
                }
            }
        }
    }

    let mut survivors: Vec<&str> = per_domain[0]
        .iter()
        .filter(|(_, &c)| c >= min_count)
        .map(|(&t, _)| t)
        .collect();
    survivors.retain(|token| {
        per_domain
            .iter()
            .all(|counts| counts.get(token).copied().unwrap_or(0) >= min_count)
    });
    survivors.sort_unstable();

    let mut candidates = Vec::with_capacity(survivors.len());
    for token in survivors {
        let n_t = with_token.get(token).copied().unwrap_or(0);
        let n_ta = with_token_and_aspect.get(token).copied().unwrap_or(0);
        let n11 = n_ta;
        let n10 = n_t - n_ta;
        let n01 = aspect_sentences - n_ta;
        let n00 = total_sentences - n_t - n01;
        let mi_score = mutual_information(n11, n10, n01, n00)?;
        let domain_counts = corpora
            .iter()
            .zip(&per_domain)
            .map(|(corpus, counts)| {
                (
                    corpus.domain_name.clone(),
                    counts.get(token).copied().unwrap_or(0),
                )
            })
            .collect();
        candidates.push(PromptCandidate {
            token: token.to_string(),
            mi_score,
            domain_counts,
            mean_aspect_distance: f64::NAN,
        });
    }
    Ok(candidates)
}

/// Static (context-free) token embeddings.
pub trait TokenEmbedder {
    fn width(&self) -> usize;
    fn embed(&self, token: &str) -> Array1<f64>;
}

/// Every token of every gold aspect span in the given corpora, deduplicated
/// and sorted. Multi-word aspects contribute each constituent token.
pub fn collect_aspect_tokens(corpora: &[&DomainCorpus]) -> Vec<String> {
    let mut tokens = BTreeSet::new();
    for corpus in corpora {
        for sentence in &corpus.train {
            if let Ok(Some(spans)) = sentence.aspect_spans() {
                for span in spans {
                    for index in span.start..=span.end {
                        tokens.insert(sentence.tokens[index].clone());
                    }
                }
            }
        }
    }
    tokens.into_iter().collect()
}

/// Fill `mean_aspect_distance` and sort ascending by it, ties broken by
/// descending MI then token. The result is a total order independent of
/// input order.
pub fn rank_candidates(
    mut candidates: Vec<PromptCandidate>,
    embedder: &dyn TokenEmbedder,
    aspect_tokens: &[String],
) -> Result<Vec<PromptCandidate>> {
    if candidates.is_empty() {
        return Err(Error::Validation("no prompt candidates to rank".into()));
    }
    if aspect_tokens.is_empty() {
        return Err(Error::Validation(
            "no aspect tokens collected; distance ranking needs gold spans".into(),
        ));
    }
    let aspect_embeddings: Vec<Array1<f64>> =
        aspect_tokens.iter().map(|t| embedder.embed(t)).collect();
    for candidate in &mut candidates {
        let embedding = embedder.embed(&candidate.token);
        let mut total = 0.0;
        for aspect in &aspect_embeddings {
            let diff = &embedding - aspect;
            total += diff.dot(&diff).sqrt();
        }
        candidate.mean_aspect_distance = total / aspect_embeddings.len() as f64;
    }
    candidates.sort_by(|a, b| {
        a.mean_aspect_distance
            .total_cmp(&b.mean_aspect_distance)
            .then(b.mi_score.total_cmp(&a.mi_score))
            .then(a.token.cmp(&b.token))
    });
    Ok(candidates)
}

/// Initialize the bank from the embeddings of the top `m` ranked
/// candidates.
pub fn build_prompt_bank(
    ranked: &[PromptCandidate],
    m: usize,
    embedder: &dyn TokenEmbedder,
) -> Result<PromptBank> {
    if m == 0 {
        return Err(Error::Config("prompt length m must be at least 1".into()));
    }
    if ranked.len() < m {
        return Err(Error::Validation(format!(
            "only {} prompt candidates for m={m}; lower min_count to admit more pivots",
            ranked.len()
        )));
    }
    let d = embedder.width();
    let mut vectors = Array2::zeros((m, d));
    for (row, candidate) in ranked.iter().take(m).enumerate() {
        let embedding = embedder.embed(&candidate.token);
        if embedding.len() != d {
            return Err(Error::Shape(format!(
                "embedder returned width {} but reports {d}",
                embedding.len()
            )));
        }
        vectors.row_mut(row).assign(&embedding);
    }
    let bank = PromptBank {
        vectors,
        provenance: ranked[..m].to_vec(),
    };
    bank.check()?;
    Ok(bank)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{BioLabel, TaggedSentence};

    /// Frozen golden constant, computed beforehand by extended-precision
    /// summation of the four p*log2 terms for the table (8,2,3,7).
    const MI_8_2_3_7_BITS: f64 = 0.19116495692878081;

    fn sentence(id: &str, tokens: &[&str], bio: &str) -> TaggedSentence {
        let labels: Vec<BioLabel> = bio
            .chars()
            .map(|c| c.to_string().parse().unwrap())
            .collect();
        TaggedSentence::new(
            id,
            tokens.iter().map(|t| t.to_string()).collect(),
            tokens.iter().map(|_| "NN".to_string()).collect(),
            Some(labels),
        )
        .unwrap()
    }

    fn corpus(name: &str, sentences: Vec<TaggedSentence>) -> DomainCorpus {
        DomainCorpus::new(name, sentences, Vec::new()).unwrap()
    }

    #[test]
    fn mi_independence_is_zero() {
        assert_eq!(mutual_information(5, 5, 5, 5).unwrap(), 0.0);
    }

    #[test]
    fn mi_perfect_dependence_is_one_bit() {
        assert_eq!(mutual_information(5, 0, 0, 5).unwrap(), 1.0);
    }

    #[test]
    fn mi_matches_frozen_golden_value() {
        let mi = mutual_information(8, 2, 3, 7).unwrap();
        assert!((mi - MI_8_2_3_7_BITS).abs() < 1e-15, "got {mi}");
    }

    #[test]
    fn mi_zero_total_is_an_error() {
        assert!(mutual_information(0, 0, 0, 0).is_err());
    }

    #[test]
    fn mi_is_symmetric_in_variable_roles() {
        for (a, b, c, d) in [(8, 2, 3, 7), (1, 9, 4, 6), (0, 3, 5, 2)] {
            let lhs = mutual_information(a, b, c, d).unwrap();
            let rhs = mutual_information(a, c, b, d).unwrap();
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn pivot_requires_presence_in_every_domain() {
        let a = corpus(
            "A",
            (0..10)
                .map(|i| sentence(&format!("A:{i}"), &["food", "here"], "BO"))
                .collect(),
        );
        let b = corpus(
            "B",
            (0..10)
                .map(|i| sentence(&format!("B:{i}"), &["food", "there"], "BO"))
                .collect(),
        );
        let candidates = extract_pivot_candidates(&[&a, &b], 5).unwrap();
        let tokens: Vec<&str> = candidates.iter().map(|c| c.token.as_str()).collect();
        assert!(tokens.contains(&"food"));
        assert!(!tokens.contains(&"here"), "present in A only");
        assert!(!tokens.contains(&"there"), "present in B only");
    }

    #[test]
    fn min_count_above_all_counts_gives_empty_list() {
        let a = corpus("A", vec![sentence("A:0", &["food"], "B")]);
        let candidates = extract_pivot_candidates(&[&a], 100).unwrap();
        assert!(candidates.is_empty());
    }

    #[test]
    fn unlabelled_corpus_is_rejected() {
        let mut s = sentence("A:0", &["food"], "B");
        s.bio_labels = None;
        let unlabelled = corpus("A", vec![s]);
        assert!(extract_pivot_candidates(&[&unlabelled], 1).is_err());
    }

    struct ToyEmbedder(BTreeMap<String, Vec<f64>>);
    impl ToyEmbedder {
        fn new(entries: &[(&str, &[f64])]) -> Self {
            ToyEmbedder(
                entries
                    .iter()
                    .map(|(t, v)| (t.to_string(), v.to_vec()))
                    .collect(),
            )
        }
    }
    impl TokenEmbedder for ToyEmbedder {
        fn width(&self) -> usize {
            2
        }
        fn embed(&self, token: &str) -> Array1<f64> {
            Array1::from_vec(self.0.get(token).cloned().unwrap_or_else(|| vec![9.0, 9.0]))
        }
    }

    fn candidate(token: &str, mi: f64) -> PromptCandidate {
        PromptCandidate {
            token: token.to_string(),
            mi_score: mi,
            domain_counts: BTreeMap::new(),
            mean_aspect_distance: f64::NAN,
        }
    }

    #[test]
    fn identical_token_ranks_first_with_zero_distance() {
        let embedder = ToyEmbedder::new(&[("food", &[1.0, 0.0]), ("far", &[5.0, 5.0])]);
        let ranked = rank_candidates(
            vec![candidate("far", 0.9), candidate("food", 0.1)],
            &embedder,
            &["food".to_string()],
        )
        .unwrap();
        assert_eq!(ranked[0].token, "food");
        assert_eq!(ranked[0].mean_aspect_distance, 0.0);
    }

    #[test]
    fn ranking_is_independent_of_input_order() {
        let embedder = ToyEmbedder::new(&[
            ("a", &[0.0, 0.0]),
            ("b", &[1.0, 0.0]),
            ("c", &[0.0, 2.0]),
            ("x", &[0.5, 0.5]),
        ]);
        let aspects = vec!["x".to_string()];
        let forward = rank_candidates(
            vec![candidate("a", 0.1), candidate("b", 0.2), candidate("c", 0.3)],
            &embedder,
            &aspects,
        )
        .unwrap();
        let backward = rank_candidates(
            vec![candidate("c", 0.3), candidate("b", 0.2), candidate("a", 0.1)],
            &embedder,
            &aspects,
        )
        .unwrap();
        let f: Vec<&str> = forward.iter().map(|c| c.token.as_str()).collect();
        let b: Vec<&str> = backward.iter().map(|c| c.token.as_str()).collect();
        assert_eq!(f, b);
    }

    #[test]
    fn ranking_matches_brute_force_distance_matrix() {
        // 5 candidates vs 3 aspect tokens with a fixed toy embedder; the
        // oracle recomputes every pairwise distance long-form.
        let entries: Vec<(&str, &[f64])> = vec![
            ("c0", &[0.0, 0.0]),
            ("c1", &[1.0, 1.0]),
            ("c2", &[-2.0, 0.5]),
            ("c3", &[3.0, -1.0]),
            ("c4", &[0.25, 0.25]),
            ("a0", &[0.5, 0.0]),
            ("a1", &[0.0, 0.5]),
            ("a2", &[1.0, 0.0]),
        ];
        let embedder = ToyEmbedder::new(&entries);
        let aspects: Vec<String> = ["a0", "a1", "a2"].iter().map(|s| s.to_string()).collect();
        let names = ["c0", "c1", "c2", "c3", "c4"];
        let candidates: Vec<PromptCandidate> =
            names.iter().map(|n| candidate(n, 0.5)).collect();

        let lookup: BTreeMap<&str, &[f64]> = entries.iter().map(|(t, v)| (*t, *v)).collect();
        let mut oracle: Vec<(f64, &str)> = names
            .iter()
            .map(|&name| {
                let cv = lookup[name];
                let mean: f64 = aspects
                    .iter()
                    .map(|a| {
                        let av = lookup[a.as_str()];
                        ((cv[0] - av[0]).powi(2) + (cv[1] - av[1]).powi(2)).sqrt()
                    })
                    .sum::<f64>()
                    / aspects.len() as f64;
                (mean, name)
            })
            .collect();
        oracle.sort_by(|x, y| x.0.total_cmp(&y.0));
        let expected: Vec<&str> = oracle.iter().map(|(_, n)| *n).collect();

        let ranked = rank_candidates(candidates, &embedder, &aspects).unwrap();
        let got: Vec<&str> = ranked.iter().map(|c| c.token.as_str()).collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn empty_aspect_set_is_an_error() {
        let embedder = ToyEmbedder::new(&[]);
        assert!(rank_candidates(vec![candidate("a", 0.1)], &embedder, &[]).is_err());
    }

    #[test]
    fn bank_vectors_equal_embeddings_before_training() {
        let embedder = ToyEmbedder::new(&[("a", &[1.0, 2.0]), ("b", &[3.0, 4.0])]);
        let mut ranked = vec![candidate("a", 0.2), candidate("b", 0.1)];
        ranked[0].mean_aspect_distance = 0.0;
        ranked[1].mean_aspect_distance = 1.0;
        let bank = build_prompt_bank(&ranked, 2, &embedder).unwrap();
        assert_eq!(bank.m(), 2);
        assert_eq!(bank.width(), 2);
        assert_eq!(bank.vectors.row(0).to_vec(), vec![1.0, 2.0]);
        assert_eq!(bank.vectors.row(1).to_vec(), vec![3.0, 4.0]);
        assert_eq!(bank.provenance[0].token, "a");
    }

    #[test]
    fn single_vector_bank_is_allowed() {
        let embedder = ToyEmbedder::new(&[("a", &[1.0, 2.0])]);
        let bank = build_prompt_bank(&[candidate("a", 0.2)], 1, &embedder).unwrap();
        assert_eq!(bank.m(), 1);
    }

    #[test]
    fn too_few_candidates_is_an_error_advising_min_count() {
        let embedder = ToyEmbedder::new(&[]);
        let ranked: Vec<PromptCandidate> = (0..4).map(|i| candidate(&format!("c{i}"), 0.1)).collect();
        let err = build_prompt_bank(&ranked, 5, &embedder).unwrap_err();
        assert!(err.to_string().contains("min_count"));
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn mi_is_invariant_under_count_scaling(
                n11 in 0u64..50, n10 in 0u64..50, n01 in 0u64..50, n00 in 0u64..50,
                k in 1u64..20,
            ) {
                prop_assume!(n11 + n10 + n01 + n00 > 0);
                let base = mutual_information(n11, n10, n01, n00).unwrap();
                let scaled = mutual_information(k * n11, k * n10, k * n01, k * n00).unwrap();
                prop_assert!((base - scaled).abs() < 1e-12);
            }

            #[test]
            fn mi_symmetry_under_variable_swap(
                n11 in 0u64..50, n10 in 0u64..50, n01 in 0u64..50, n00 in 0u64..50,
            ) {
                prop_assume!(n11 + n10 + n01 + n00 > 0);
                let lhs = mutual_information(n11, n10, n01, n00).unwrap();
                let rhs = mutual_information(n11, n01, n10, n00).unwrap();
                prop_assert!((lhs - rhs).abs() < 1e-12);
            }

            #[test]
            fn ranking_order_is_permutation_invariant(
                distances in proptest::collection::vec((0u32..100, 0u32..100), 2..8),
                rotate in 0usize..8,
            ) {
                // embed each candidate at (x, y); rank against one aspect at
                // the origin under two different input orders
                let entries: Vec<(String, Vec<f64>)> = distances
                    .iter()
                    .enumerate()
                    .map(|(i, &(x, y))| {
                        (format!("c{i}"), vec![x as f64 / 10.0, y as f64 / 10.0])
                    })
                    .collect();
                struct MapEmbedder(std::collections::BTreeMap<String, Vec<f64>>);
                impl TokenEmbedder for MapEmbedder {
                    fn width(&self) -> usize { 2 }
                    fn embed(&self, token: &str) -> ndarray::Array1<f64> {
                        ndarray::Array1::from_vec(
                            self.0.get(token).cloned().unwrap_or_else(|| vec![0.0, 0.0]),
                        )
                    }
                }
                let embedder = MapEmbedder(entries.iter().cloned().collect());
                let aspects = vec!["origin".to_string()];
                let forward: Vec<PromptCandidate> = entries
                    .iter()
                    .map(|(t, _)| candidate(t, 0.5))
                    .collect();
                let mut rotated = forward.clone();
                let shift = rotate % forward.len();
                rotated.rotate_left(shift);

                let a = rank_candidates(forward, &embedder, &aspects).unwrap();
                let b = rank_candidates(rotated, &embedder, &aspects).unwrap();
                let ta: Vec<&str> = a.iter().map(|c| c.token.as_str()).collect();
                let tb: Vec<&str> = b.iter().map(|c| c.token.as_str()).collect();
                prop_assert_eq!(ta, tb);
            }
        }
    }
}
