//! Joint objective: aspect cross-entropy plus masked-POS cross-entropy,
//! weighted by alpha and beta, optimized with Adam.
//!
//! The loss operations here are the pure sums over tokens (respectively
//! masked tokens). The training loop divides by token counts per batch so
//! alpha and beta stay scale-free across batch sizes; `sum_reduction`
//! switches that off.

mod adam;
mod trainer;

pub use adam::Adam;
pub use trainer::{
    build_model, predict_labels, sentence_gradients, sentence_joint_loss, train, EpochLog,
    LogHeader, SentenceTerms, TrainOutcome,
};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::corpus::BioLabel;
use crate::error::{Error, Result};
use crate::model::{EncoderConfig, StreamSwitches};
use crate::syntax::MaskPlan;

/// Ablation switch: which components stay on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[clap(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    /// Drop the masked-POS auxiliary task (keeps the POS input stream).
    NoSyntax,
    /// Drop the soft prompts (no prefix, zero prompt summary).
    NoPrompts,
    /// Word stream only.
    BackboneOnly,
}

impl Ablation {
    pub fn switches(self) -> StreamSwitches {
        match self {
            Ablation::Full | Ablation::NoSyntax => StreamSwitches {
                use_prompts: true,
                use_pos: true,
            },
            Ablation::NoPrompts => StreamSwitches {
                use_prompts: false,
                use_pos: true,
            },
            Ablation::BackboneOnly => StreamSwitches {
                use_prompts: false,
                use_pos: false,
            },
        }
    }

    /// Whether the masked-POS recovery loss is part of the objective.
    pub fn syntax_loss_enabled(self) -> bool {
        matches!(self, Ablation::Full | Ablation::NoPrompts)
    }

    pub fn label(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoSyntax => "no_syntax",
            Ablation::NoPrompts => "no_prompts",
            Ablation::BackboneOnly => "backbone_only",
        }
    }
}

/// Every knob of one training run. Serializes flat, so a config file is a
/// plain JSON object mirroring these fields; missing fields take defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub mask_rate: f64,
    pub m: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub freeze_backbone: bool,
    pub ablation: Ablation,
    pub min_count: usize,
    pub sum_reduction: bool,
    pub mask_at_inference: bool,
    pub target_syntax: bool,
    pub per_input_prompts: bool,
    #[serde(flatten)]
    pub encoder: EncoderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 1.0,
            beta: 0.5,
            mask_rate: 0.25,
            m: 3,
            learning_rate: 2e-3,
            epochs: 20,
            batch_size: 16,
            seed: 42,
            freeze_backbone: true,
            ablation: Ablation::Full,
            min_count: 5,
            sum_reduction: false,
            mask_at_inference: false,
            target_syntax: false,
            per_input_prompts: false,
            encoder: EncoderConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || !self.alpha.is_finite() {
            return Err(Error::Config("alpha must be ≥ 0".into()));
        }
        if self.beta < 0.0 || !self.beta.is_finite() {
            return Err(Error::Config("beta must be ≥ 0".into()));
        }
        if self.alpha == 0.0 && self.beta == 0.0 {
            return Err(Error::Config("alpha and beta must not both be 0".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_rate) {
            return Err(Error::Config("mask-rate must lie in [0, 1]".into()));
        }
        if self.m == 0 {
            return Err(Error::Config("m must be ≥ 1".into()));
        }
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch-size must be positive".into()));
        }
        if self.min_count == 0 {
            return Err(Error::Config("min-count must be ≥ 1".into()));
        }
        self.encoder.validate()
    }

    /// Beta as the objective sees it: zero when the ablation removed the
    /// syntax task.
    pub fn effective_beta(&self) -> f64 {
        if self.ablation.syntax_loss_enabled() {
            self.beta
        } else {
            0.0
        }
    }
}

/// The two loss terms and their weighted sum for one unit of work.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub prompt_loss: f64,
    pub syntax_loss: f64,
    pub total: f64,
    pub masked_token_count: usize,
}

/// Aspect cross-entropy: sum over tokens of `-ln p(gold)`.
pub fn prompt_loss(predictions: &Array2<f64>, gold: &[BioLabel]) -> Result<f64> {
    if predictions.nrows() != gold.len() {
        return Err(Error::Shape(format!(
            "{} prediction rows vs {} gold labels",
            predictions.nrows(),
            gold.len()
        )));
    }
    if predictions.ncols() != 3 {
        return Err(Error::Shape(format!(
            "aspect predictions must have 3 columns, found {}",
            predictions.ncols()
        )));
    }
    let mut total = 0.0;
    for (row, label) in predictions.rows().into_iter().zip(gold) {
        total -= row[label.class_index()].ln();
    }
    Ok(total)
}

/// Masked-POS cross-entropy: sum over tokens of `I(i) * -ln p(gold)`.
/// Unmasked positions contribute exactly zero.
pub fn syntax_loss(predictions: &Array2<f64>, gold_pos: &[usize], plan: &MaskPlan) -> Result<f64> {
    if predictions.nrows() != plan.indicator.len() {
        return Err(Error::Shape(format!(
            "{} prediction rows vs indicator length {}",
            predictions.nrows(),
            plan.indicator.len()
        )));
    }
    if gold_pos.len() != predictions.nrows() {
        return Err(Error::Shape(format!(
            "{} prediction rows vs {} gold tags",
            predictions.nrows(),
            gold_pos.len()
        )));
    }
    let mut total = 0.0;
    for ((row, &gold), &flag) in predictions.rows().into_iter().zip(gold_pos).zip(&plan.indicator) {
        if flag == 0 {
            continue;
        }
        let p = row.get(gold).ok_or_else(|| {
            Error::Shape(format!(
                "gold tag id {gold} outside {} classes",
                predictions.ncols()
            ))
        })?;
        total -= p.ln();
    }
    Ok(total)
}

/// `total = alpha * lp + beta * ls`, exactly. The caller fills
/// `masked_token_count`.
pub fn joint_loss(lp: f64, ls: f64, alpha: f64, beta: f64) -> Result<LossBreakdown> {
    if lp < 0.0 || ls < 0.0 {
        return Err(Error::Validation(format!(
            "loss terms must be nonnegative (got {lp}, {ls})"
        )));
    }
    if alpha < 0.0 || beta < 0.0 {
        return Err(Error::Validation(format!(
            "loss weights must be nonnegative (got {alpha}, {beta})"
        )));
    }
    Ok(LossBreakdown {
        prompt_loss: lp,
        syntax_loss: ls,
        total: alpha * lp + beta * ls,
        masked_token_count: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use std::collections::BTreeSet;

    fn plan(indicator: &[u8]) -> MaskPlan {
        MaskPlan {
            masked_positions: indicator
                .iter()
                .enumerate()
                .filter(|(_, &f)| f == 1)
                .map(|(i, _)| i)
                .collect::<BTreeSet<_>>(),
            indicator: indicator.to_vec(),
            seed: 0,
        }
    }

    #[test]
    fn perfect_predictions_have_zero_prompt_loss() {
        let predictions = array![[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        let gold = vec![BioLabel::B, BioLabel::O];
        assert_eq!(prompt_loss(&predictions, &gold).unwrap(), 0.0);
    }

    #[test]
    fn uniform_predictions_give_n_ln_3() {
        let third = 1.0 / 3.0;
        let predictions = array![
            [third, third, third],
            [third, third, third],
            [third, third, third]
        ];
        let gold = vec![BioLabel::B, BioLabel::I, BioLabel::O];
        let lp = prompt_loss(&predictions, &gold).unwrap();
        assert!((lp - 3.0 * 3.0f64.ln()).abs() < 1e-9, "{lp}");
    }

    #[test]
    fn prompt_loss_matches_independent_oracle() {
        // seeded pseudo-predictions; oracle sums -ln p long-form with Kahan
        // compensation, walking the data in reverse order.
        let raw = array![
            [0.7, 0.2, 0.1],
            [0.05, 0.85, 0.10],
            [0.3, 0.3, 0.4],
            [0.25, 0.25, 0.5]
        ];
        let gold = vec![BioLabel::B, BioLabel::I, BioLabel::O, BioLabel::B];
        let got = prompt_loss(&raw, &gold).unwrap();

        let mut oracle = 0.0f64;
        let mut comp = 0.0f64;
        for i in (0..gold.len()).rev() {
            let term = -(raw[[i, gold[i].class_index()]]).ln();
            let y = term - comp;
            let t = oracle + y;
            comp = (t - oracle) - y;
            oracle = t;
        }
        assert!((got - oracle).abs() < 1e-12);
    }

    #[test]
    fn prompt_loss_length_mismatch_is_an_error() {
        let predictions = array![[1.0, 0.0, 0.0]];
        assert!(prompt_loss(&predictions, &[BioLabel::B, BioLabel::O]).is_err());
    }

    #[test]
    fn all_zero_indicator_gives_zero_syntax_loss() {
        let predictions = array![[0.01, 0.99], [0.5, 0.5], [0.9, 0.1]];
        let gold = vec![0, 1, 0];
        let ls = syntax_loss(&predictions, &gold, &plan(&[0, 0, 0])).unwrap();
        assert_eq!(ls, 0.0);
    }

    #[test]
    fn correct_one_hot_on_masked_token_gives_zero() {
        let predictions = array![[1.0, 0.0], [0.5, 0.5]];
        let gold = vec![0, 1];
        let ls = syntax_loss(&predictions, &gold, &plan(&[1, 0])).unwrap();
        assert_eq!(ls, 0.0);
    }

    #[test]
    fn syntax_loss_matches_manual_two_term_sum() {
        let predictions = array![
            [0.6, 0.4],
            [0.3, 0.7],
            [0.2, 0.8],
            [0.5, 0.5],
            [0.9, 0.1]
        ];
        let gold = vec![0, 1, 0, 1, 0];
        let ls = syntax_loss(&predictions, &gold, &plan(&[0, 1, 0, 0, 1])).unwrap();
        let expected = -(0.7f64.ln()) - (0.9f64.ln());
        assert!((ls - expected).abs() < 1e-12);
    }

    #[test]
    fn syntax_loss_indicator_mismatch_is_an_error() {
        let predictions = array![[0.5, 0.5]];
        assert!(syntax_loss(&predictions, &[0], &plan(&[1, 0])).is_err());
    }

    #[test]
    fn joint_loss_weights_compose() {
        let b = joint_loss(2.0, 4.0, 0.5, 0.5).unwrap();
        assert_eq!(b.total, 3.0);
        let b = joint_loss(1.25, 7.0, 1.0, 0.0).unwrap();
        assert_eq!(b.total, 1.25);
        assert_eq!(b.total, b.prompt_loss);
    }

    #[test]
    fn joint_loss_rejects_negative_terms() {
        assert!(joint_loss(-1.0, 0.0, 1.0, 1.0).is_err());
        assert!(joint_loss(0.0, 0.0, -1.0, 1.0).is_err());
    }

    #[test]
    fn joint_loss_identity_on_seeded_tuples() {
        let mut rng = crate::rng::stream_rng(77, "joint-loss-test", 0);
        for _ in 0..1000 {
            let lp = rand::Rng::gen_range(&mut rng, 0.0..10.0);
            let ls = rand::Rng::gen_range(&mut rng, 0.0..10.0);
            let alpha = rand::Rng::gen_range(&mut rng, 0.0..3.0);
            let beta = rand::Rng::gen_range(&mut rng, 0.0..3.0);
            let b = joint_loss(lp, ls, alpha, beta).unwrap();
            assert_eq!(b.total, alpha * lp + beta * ls);
        }
    }

    #[test]
    fn config_validation_messages() {
        let mut config = TrainConfig {
            alpha: -1.0,
            ..TrainConfig::default()
        };
        assert_eq!(
            config.validate().unwrap_err().to_string(),
            "invalid configuration: alpha must be ≥ 0"
        );
        config.alpha = 0.0;
        config.beta = 0.0;
        assert!(config.validate().is_err());
        config = TrainConfig {
            mask_rate: 1.5,
            ..TrainConfig::default()
        };
        assert!(config.validate().is_err());
    }

    #[test]
    fn config_json_is_flat_and_defaulted() {
        let config: TrainConfig = serde_json::from_str(r#"{"alpha": 0.25}"#).unwrap();
        assert_eq!(config.alpha, 0.25);
        assert_eq!(config.beta, 0.5);
        assert_eq!(config.epochs, 20);
        let text = serde_json::to_string(&TrainConfig::default()).unwrap();
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert!(value.get("hidden_width").is_some(), "encoder fields flattened");
        assert_eq!(value["learning_rate"], 2e-3);
    }
}
