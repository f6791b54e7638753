//! Span-level scoring and the cross-domain experiment matrix.
//!
//! The metric is exact-match micro-averaged span F1: a predicted span
//! counts iff an identical (start, end) span exists in the gold set of the
//! same sentence. Experiments train once per transfer pair (and
//! repetition), evaluate on the target test split, and emit CSV/JSON
//! reports; ablations rerun each pair under the four component settings
//! with identical seeds.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{load_corpus, spans_from_bio, AspectSpan, DomainCorpus};
use crate::error::{Error, Result};
use crate::model::checkpoint;
use crate::rng::child_seed;
use crate::training::{predict_labels, train, Ablation, TrainConfig, TrainOutcome};

/// Exact-match span precision / recall / F1 over aligned sentence lists.
pub fn span_prf(
    predicted: &[BTreeSet<AspectSpan>],
    gold: &[BTreeSet<AspectSpan>],
) -> Result<(f64, f64, f64)> {
    if predicted.len() != gold.len() {
        return Err(Error::Shape(format!(
            "{} predicted sentences vs {} gold sentences",
            predicted.len(),
            gold.len()
        )));
    }
    let mut matches = 0usize;
    let mut predicted_total = 0usize;
    let mut gold_total = 0usize;
    for (p, g) in predicted.iter().zip(gold) {
        matches += p.intersection(g).count();
        predicted_total += p.len();
        gold_total += g.len();
    }
    let precision = if predicted_total > 0 {
        matches as f64 / predicted_total as f64
    } else {
        0.0
    };
    let recall = if gold_total > 0 {
        matches as f64 / gold_total as f64
    } else {
        0.0
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok((precision, recall, f1))
}

/// Per-sentence predicted vs gold spans, for error analysis.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SentenceEval {
    pub sentence_id: String,
    pub predicted: Vec<AspectSpan>,
    pub gold: Vec<AspectSpan>,
}

/// One (sources -> target) evaluation result.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub source_domains: Vec<String>,
    pub target_domain: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Sample standard deviation over repetitions; absent for a single run.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f1_std: Option<f64>,
    pub repetitions: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_sentence: Option<Vec<SentenceEval>>,
    pub config_fingerprint: String,
}

/// One transfer direction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferPair {
    pub sources: Vec<String>,
    pub target: String,
}

impl TransferPair {
    pub fn label(&self) -> String {
        format!("{}->{}", self.sources.join("+"), self.target)
    }
}

/// A full experiment: pairs, shared config, repetition count.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub pairs: Vec<TransferPair>,
    pub config: TrainConfig,
    pub repetitions: usize,
    #[serde(default)]
    pub per_sentence: bool,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(Error::Validation("experiment needs at least one transfer pair".into()));
        }
        if self.repetitions == 0 {
            return Err(Error::Validation("repetitions must be ≥ 1".into()));
        }
        for pair in &self.pairs {
            if pair.sources.is_empty() {
                return Err(Error::Validation(format!(
                    "pair {}: no source domains",
                    pair.label()
                )));
            }
            if pair.sources.iter().any(|s| s == &pair.target) {
                return Err(Error::Validation(format!(
                    "pair {}: source and target must differ",
                    pair.label()
                )));
            }
        }
        self.config.validate()
    }
}

/// Named corpora available to experiments.
#[derive(Debug, Default)]
pub struct CorpusRegistry {
    map: BTreeMap<String, DomainCorpus>,
}

impl CorpusRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, corpus: DomainCorpus) {
        self.map.insert(corpus.domain_name.clone(), corpus);
    }

    pub fn get(&self, name: &str) -> Result<&DomainCorpus> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Validation(format!("unknown domain {name:?} in registry")))
    }

    pub fn names(&self) -> Vec<&str> {
        self.map.keys().map(|k| k.as_str()).collect()
    }

    /// Load every `<domain>.tsv` file of a directory.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let mut registry = CorpusRegistry::new();
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut paths: Vec<_> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().map(|x| x == "tsv").unwrap_or(false))
            .collect();
        paths.sort();
        for path in paths {
            let name = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::Validation(format!("bad corpus filename {path:?}")))?
                .to_string();
            registry.insert(load_corpus(&path, &name)?);
        }
        Ok(registry)
    }
}

fn fingerprint(config: &TrainConfig, param_bytes: &[Vec<u8>]) -> Result<String> {
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_string(config)?.as_bytes());
    for bytes in param_bytes {
        hasher.update(bytes);
    }
    Ok(format!("{:x}", hasher.finalize()))
}

fn model_param_bytes(model: &crate::model::AteModel) -> Vec<u8> {
    let mut bytes = Vec::new();
    for (_, tensor) in model.param_snapshot() {
        for &value in tensor.iter() {
            bytes.extend_from_slice(&(value as f32).to_le_bytes());
        }
    }
    bytes
}

fn evaluate_outcome(
    outcome: &TrainOutcome,
    target: &DomainCorpus,
    config: &TrainConfig,
    collect_detail: bool,
) -> Result<(f64, f64, f64, Vec<SentenceEval>)> {
    let mut predicted_sets = Vec::with_capacity(target.test.len());
    let mut gold_sets = Vec::with_capacity(target.test.len());
    let mut detail = Vec::new();
    for sentence in &target.test {
        let gold_labels = sentence.bio_labels.as_ref().ok_or_else(|| {
            Error::Validation(format!(
                "target test sentence {} is unlabelled; evaluation needs gold spans",
                sentence.sentence_id
            ))
        })?;
        let gold = spans_from_bio(gold_labels)?;
        let predicted_labels = predict_labels(&outcome.model, sentence, config)?;
        let predicted = spans_from_bio(&predicted_labels)?;
        if collect_detail {
            detail.push(SentenceEval {
                sentence_id: sentence.sentence_id.clone(),
                predicted: predicted.iter().copied().collect(),
                gold: gold.iter().copied().collect(),
            });
        }
        predicted_sets.push(predicted);
        gold_sets.push(gold);
    }
    let (precision, recall, f1) = span_prf(&predicted_sets, &gold_sets)?;
    Ok((precision, recall, f1, detail))
}

/// Train and evaluate one transfer pair under one config, averaging over
/// repetitions (seed varies per repetition through the derived stream).
pub fn run_pair(
    pair: &TransferPair,
    config: &TrainConfig,
    repetitions: usize,
    registry: &CorpusRegistry,
    collect_detail: bool,
) -> Result<EvalReport> {
    let target = registry.get(&pair.target)?;
    let sources: Vec<&DomainCorpus> = pair
        .sources
        .iter()
        .map(|name| registry.get(name))
        .collect::<Result<_>>()?;

    let mut precisions = Vec::with_capacity(repetitions);
    let mut recalls = Vec::with_capacity(repetitions);
    let mut f1s = Vec::with_capacity(repetitions);
    let mut detail = None;
    let mut param_bytes = Vec::with_capacity(repetitions);
    for repetition in 0..repetitions {
        let mut rep_config = config.clone();
        if repetitions > 1 {
            rep_config.seed = child_seed(config.seed, "repetition", repetition as u64);
        }
        let outcome = train(&rep_config, &sources, Some(target), None, None)?;
        let (precision, recall, f1, rep_detail) =
            evaluate_outcome(&outcome, target, &rep_config, collect_detail)?;
        precisions.push(precision);
        recalls.push(recall);
        f1s.push(f1);
        if collect_detail {
            detail = Some(rep_detail);
        }
        param_bytes.push(model_param_bytes(&outcome.model));
    }

    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let f1_mean = mean(&f1s);
    let f1_std = if repetitions > 1 {
        let var = f1s.iter().map(|x| (x - f1_mean).powi(2)).sum::<f64>() / (f1s.len() - 1) as f64;
        Some(var.sqrt())
    } else {
        None
    };
    Ok(EvalReport {
        source_domains: pair.sources.clone(),
        target_domain: pair.target.clone(),
        precision: mean(&precisions),
        recall: mean(&recalls),
        f1: f1_mean,
        f1_std,
        repetitions,
        per_sentence: detail,
        config_fingerprint: fingerprint(config, &param_bytes)?,
    })
}

/// Run every pair of the experiment. Validates the whole spec (including
/// corpus presence) before any training starts.
pub fn run_experiment(spec: &ExperimentSpec, registry: &CorpusRegistry) -> Result<Vec<EvalReport>> {
    spec.validate()?;
    for pair in &spec.pairs {
        for name in pair.sources.iter().chain([&pair.target]) {
            registry.get(name)?;
        }
        let target = registry.get(&pair.target)?;
        if target.test.iter().any(|s| s.bio_labels.is_none()) {
            return Err(Error::Validation(format!(
                "target {} test split is unlabelled",
                pair.target
            )));
        }
    }
    spec.pairs
        .iter()
        .map(|pair| run_pair(pair, &spec.config, spec.repetitions, registry, spec.per_sentence))
        .collect()
}

/// One ablation table row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub pair: String,
    pub ablation: String,
    pub report: EvalReport,
}

/// Table-5 row order.
pub const ABLATION_ROWS: [Ablation; 4] = [
    Ablation::NoSyntax,
    Ablation::NoPrompts,
    Ablation::BackboneOnly,
    Ablation::Full,
];

/// The four-row ablation table per transfer pair, identical seeds across
/// rows. Rows without the syntax task record beta = 0 in their config.
pub fn ablate(spec: &ExperimentSpec, registry: &CorpusRegistry) -> Result<Vec<AblationRow>> {
    spec.validate()?;
    let mut rows = Vec::new();
    for pair in &spec.pairs {
        for ablation in ABLATION_ROWS {
            let mut config = spec.config.clone();
            config.ablation = ablation;
            if !ablation.syntax_loss_enabled() {
                config.beta = 0.0;
            }
            if config.alpha == 0.0 && config.beta == 0.0 {
                config.alpha = spec.config.alpha.max(1.0);
            }
            let report = run_pair(pair, &config, spec.repetitions, registry, spec.per_sentence)?;
            rows.push(AblationRow {
                pair: pair.label(),
                ablation: ablation.label().to_string(),
                report,
            });
        }
    }
    Ok(rows)
}

/// One point of the prompt-length sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepPoint {
    pub length: usize,
    pub f1: f64,
    pub seed: u64,
}

/// Train once per prompt length, identical seeds otherwise. Duplicate
/// lengths are removed; the second return says whether any were dropped.
pub fn sweep_prompt_length(
    spec: &ExperimentSpec,
    registry: &CorpusRegistry,
    lengths: &[usize],
) -> Result<(Vec<SweepPoint>, bool)> {
    spec.validate()?;
    if lengths.is_empty() {
        return Err(Error::Validation("sweep needs at least one prompt length".into()));
    }
    if lengths.contains(&0) {
        return Err(Error::Validation("prompt lengths must be ≥ 1".into()));
    }
    let pair = spec.pairs.first().expect("validated nonempty");
    let mut unique: Vec<usize> = Vec::new();
    for &length in lengths {
        if !unique.contains(&length) {
            unique.push(length);
        }
    }
    let deduplicated = unique.len() != lengths.len();
    let mut points = Vec::with_capacity(unique.len());
    for length in unique {
        let mut config = spec.config.clone();
        config.m = length;
        let report = run_pair(pair, &config, spec.repetitions, registry, false)?;
        points.push(SweepPoint {
            length,
            f1: report.f1,
            seed: config.seed,
        });
    }
    Ok((points, deduplicated))
}

/// CSV rendering of evaluation reports (one row per pair).
pub fn reports_to_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from("sources,target,precision,recall,f1,f1_std,repetitions\n");
    for report in reports {
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6},{},{}",
            report.source_domains.join("+"),
            report.target_domain,
            report.precision,
            report.recall,
            report.f1,
            report
                .f1_std
                .map(|s| format!("{s:.6}"))
                .unwrap_or_default(),
            report.repetitions
        );
    }
    out
}

/// CSV rendering of the ablation table (one row per pair x setting).
pub fn ablation_to_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("pair,ablation,precision,recall,f1,f1_std,repetitions\n");
    for row in rows {
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6},{},{}",
            row.pair,
            row.ablation,
            row.report.precision,
            row.report.recall,
            row.report.f1,
            row.report
                .f1_std
                .map(|s| format!("{s:.6}"))
                .unwrap_or_default(),
            row.report.repetitions
        );
    }
    out
}

/// CSV rendering of the sweep curve.
pub fn sweep_to_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from("length,f1,seed\n");
    for point in points {
        let _ = writeln!(out, "{},{:.6},{}", point.length, point.f1, point.seed);
    }
    out
}

/// Evaluate a saved checkpoint on a target corpus.
pub fn evaluate_checkpoint(
    checkpoint_dir: &Path,
    target: &DomainCorpus,
    collect_detail: bool,
) -> Result<EvalReport> {
    let (model, train_config) = checkpoint::load(checkpoint_dir)?;
    let config = train_config.unwrap_or_default();
    let outcome = TrainOutcome {
        header: crate::training::LogHeader {
            config: config.clone(),
            source_domains: Vec::new(),
            target_domain: Some(target.domain_name.clone()),
            math_mode: "single-threaded".to_string(),
            prompt_tokens: Vec::new(),
            char_vocab_size: model.char_vocab.size(),
            pos_vocab_size: model.pos_vocab.size(),
            train_sentences: 0,
        },
        epochs: Vec::new(),
        model,
    };
    let (precision, recall, f1, detail) =
        evaluate_outcome(&outcome, target, &config, collect_detail)?;
    let digest = checkpoint::digest_bytes(checkpoint_dir)?;
    Ok(EvalReport {
        source_domains: Vec::new(),
        target_domain: target.domain_name.clone(),
        precision,
        recall,
        f1,
        f1_std: None,
        repetitions: 1,
        per_sentence: collect_detail.then_some(detail),
        config_fingerprint: fingerprint(&config, &[digest])?,
    })
}
