//! The three-stream model: word states, POS states and a prompt summary,
//! fused per token and fed to the aspect and syntax heads.
//!
//! Both heads are per-token linear + softmax classifiers over the fused
//! width `3d`: columns `[0, d)` hold the word state, `[d, 2d)` the POS
//! state, `[2d, 3d)` the prompt summary shared by all tokens of the
//! sentence. Ablations zero a stream rather than slicing it out, so head
//! shapes stay comparable across settings.

pub mod checkpoint;
mod encoder;
mod nn;

pub use encoder::{BackboneEmbedder, CharVocab, Encoder, EncoderConfig, LayerParams, SequenceInput};
pub use nn::{softmax_rows, GradStore};

use ndarray::{s, Array1, Array2, ArrayViewMutD, Axis};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::corpus::TaggedSentence;
use crate::error::{Error, Result};
use crate::prompts::PromptBank;
use crate::rng::stream_rng;
use crate::syntax::{PosVocabulary, MASK_TAG};

/// Which of the three streams feed the heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamSwitches {
    pub use_prompts: bool,
    pub use_pos: bool,
}

impl StreamSwitches {
    pub fn full() -> Self {
        StreamSwitches {
            use_prompts: true,
            use_pos: true,
        }
    }
}

/// Per-token fused representations for one sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardFeatures {
    /// `n x d`: first-subword encoder state per word.
    pub word_states: Array2<f64>,
    /// `n x d`: first-subword encoder state per (possibly masked) POS tag.
    pub pos_states: Array2<f64>,
    /// `d`: mean of the prompt-position output states of the word pass.
    pub prompt_summary: Array1<f64>,
    /// `n x 3d`: `[word ; pos ; prompt]` per token.
    pub fused: Array2<f64>,
}

impl ForwardFeatures {
    fn assemble(
        word_states: Array2<f64>,
        pos_states: Array2<f64>,
        prompt_summary: Array1<f64>,
    ) -> Result<Self> {
        let n = word_states.nrows();
        let d = word_states.ncols();
        if pos_states.dim() != (n, d) || prompt_summary.len() != d {
            return Err(Error::Shape(format!(
                "stream shapes disagree: word {:?}, pos {:?}, prompt {}",
                word_states.dim(),
                pos_states.dim(),
                prompt_summary.len()
            )));
        }
        let mut fused = Array2::zeros((n, 3 * d));
        fused.slice_mut(s![.., 0..d]).assign(&word_states);
        fused.slice_mut(s![.., d..2 * d]).assign(&pos_states);
        for mut row in fused.slice_mut(s![.., 2 * d..3 * d]).rows_mut() {
            row.assign(&prompt_summary);
        }
        Ok(ForwardFeatures {
            word_states,
            pos_states,
            prompt_summary,
            fused,
        })
    }

    pub fn token_count(&self) -> usize {
        self.word_states.nrows()
    }

    pub fn width(&self) -> usize {
        self.word_states.ncols()
    }
}

/// Linear + softmax head over the fused width, 3 classes (B, I, O).
#[derive(Debug, Clone, PartialEq)]
pub struct AspectHead {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Linear + softmax head over the fused width, one class per POS tag.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntaxHead {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

fn head_init(rng: &mut ChaCha8Rng, input_width: usize, classes: usize) -> Array2<f64> {
    let std = (2.0 / (input_width + classes) as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid normal");
    Array2::from_shape_fn((input_width, classes), |_| dist.sample(rng))
}

impl AspectHead {
    pub fn init(input_width: usize, seed: u64) -> Self {
        let mut rng = stream_rng(seed, "aspect_head", 0);
        AspectHead {
            weight: head_init(&mut rng, input_width, 3),
            bias: Array1::zeros(3),
        }
    }

    pub fn logits(&self, fused: &Array2<f64>) -> Result<Array2<f64>> {
        nn::linear(fused, &self.weight, &self.bias)
    }
}

impl SyntaxHead {
    pub fn init(input_width: usize, classes: usize, seed: u64) -> Self {
        let mut rng = stream_rng(seed, "syntax_head", 0);
        SyntaxHead {
            weight: head_init(&mut rng, input_width, classes),
            bias: Array1::zeros(classes),
        }
    }

    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    pub fn logits(&self, fused: &Array2<f64>) -> Result<Array2<f64>> {
        nn::linear(fused, &self.weight, &self.bias)
    }
}

/// Per-token aspect distributions over {B, I, O}; row i depends only on
/// `fused[i]`.
pub fn classify_aspect(features: &ForwardFeatures, head: &AspectHead) -> Result<Array2<f64>> {
    Ok(softmax_rows(&head.logits(&features.fused)?))
}

/// Per-token POS distributions over the tag vocabulary.
pub fn classify_pos(features: &ForwardFeatures, head: &SyntaxHead) -> Result<Array2<f64>> {
    Ok(softmax_rows(&head.logits(&features.fused)?))
}

/// How prompts are attached to inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PromptUsage {
    /// Prompt vectors prepended per input.
    pub m: usize,
    /// Select the m nearest bank rows per input instead of the shared
    /// global bank (off by default).
    pub per_input: bool,
}

/// The complete trainable pipeline: backbone, prompt bank, both heads,
/// plus the vocabularies they were built with.
#[derive(Debug, Clone, PartialEq)]
pub struct AteModel {
    pub encoder: Encoder,
    pub char_vocab: CharVocab,
    pub pos_vocab: PosVocabulary,
    pub bank: PromptBank,
    pub prompt_usage: PromptUsage,
    pub aspect_head: AspectHead,
    pub syntax_head: SyntaxHead,
}

/// One encoded sentence with everything the reverse pass needs.
pub struct EncodePass {
    pub features: ForwardFeatures,
    pub switches: StreamSwitches,
    /// Bank rows used as the prefix, in prefix order.
    pub selected_prompts: Vec<usize>,
    word_input: SequenceInput,
    word_cache: encoder::ForwardCache,
    word_first: Vec<usize>,
    pos_input: Option<SequenceInput>,
    pos_cache: Option<encoder::ForwardCache>,
    pos_first: Vec<usize>,
}

impl AteModel {
    pub fn width(&self) -> usize {
        self.encoder.width()
    }

    pub fn fused_width(&self) -> usize {
        3 * self.encoder.width()
    }

    /// Per-input prompt selection: the `m` bank rows nearest to the mean
    /// static embedding of the sentence tokens (Euclidean, ties by row).
    pub fn select_prompt_rows(&self, tokens: &[String]) -> Vec<usize> {
        let m = self.prompt_usage.m.min(self.bank.m());
        if !self.prompt_usage.per_input || self.bank.m() == m {
            return (0..m).collect();
        }
        let mut mean = Array1::zeros(self.width());
        for token in tokens {
            mean += &self.encoder.static_text_embedding(&self.char_vocab, token);
        }
        mean /= tokens.len().max(1) as f64;
        let mut scored: Vec<(f64, usize)> = (0..self.bank.m())
            .map(|row| {
                let diff = &self.bank.vectors.row(row).to_owned() - &mean;
                (diff.dot(&diff).sqrt(), row)
            })
            .collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut rows: Vec<usize> = scored[..m].iter().map(|&(_, row)| row).collect();
        rows.sort_unstable();
        rows
    }

    /// Encode one sentence (word pass with prompts prepended, POS pass over
    /// the masked tag strings) keeping the caches for a backward pass.
    pub fn encode_cached(
        &self,
        tokens: &[String],
        masked_pos: &[String],
        switches: StreamSwitches,
        sentence_id: &str,
    ) -> Result<EncodePass> {
        if tokens.is_empty() {
            return Err(Error::Validation(format!(
                "sentence {sentence_id}: no tokens to encode"
            )));
        }
        if masked_pos.len() != tokens.len() {
            return Err(Error::Shape(format!(
                "sentence {sentence_id}: {} tokens vs {} POS tags",
                tokens.len(),
                masked_pos.len()
            )));
        }
        let d = self.width();
        if switches.use_prompts && self.bank.width() != d {
            return Err(Error::Shape(format!(
                "prompt bank width {} vs encoder width {d}",
                self.bank.width()
            )));
        }

        // word pass
        let selected_prompts = if switches.use_prompts {
            self.select_prompt_rows(tokens)
        } else {
            Vec::new()
        };
        let prefix_rows = selected_prompts.len();
        let prefix = if prefix_rows > 0 {
            let mut prefix = Array2::zeros((prefix_rows, d));
            for (slot, &row) in selected_prompts.iter().enumerate() {
                prefix.row_mut(slot).assign(&self.bank.vectors.row(row));
            }
            Some(prefix)
        } else {
            None
        };
        let mut word_first = Vec::with_capacity(tokens.len());
        let mut piece_ids = Vec::new();
        for token in tokens {
            word_first.push(prefix_rows + piece_ids.len());
            piece_ids.extend(self.char_vocab.encode(token));
        }
        let needed = prefix_rows + piece_ids.len();
        if needed > self.encoder.config.max_length {
            return Err(Error::SequenceTooLong {
                sentence_id: sentence_id.to_string(),
                needed,
                max_length: self.encoder.config.max_length,
            });
        }
        let word_input = SequenceInput { prefix, piece_ids };
        let (word_out, word_cache) = self.encoder.forward(&word_input)?;
        let mut word_states = Array2::zeros((tokens.len(), d));
        for (row, &first) in word_first.iter().enumerate() {
            word_states.row_mut(row).assign(&word_out.row(first));
        }
        let prompt_summary = if prefix_rows > 0 {
            word_out
                .slice(s![..prefix_rows, ..])
                .mean_axis(Axis(0))
                .expect("nonempty prefix")
        } else {
            Array1::zeros(d)
        };

        // POS pass
        let (pos_states, pos_input, pos_cache, pos_first) = if switches.use_pos {
            let mut pos_first = Vec::with_capacity(masked_pos.len());
            let mut pieces = Vec::new();
            for tag in masked_pos {
                pos_first.push(pieces.len());
                if tag == MASK_TAG {
                    pieces.push(CharVocab::SENTINEL);
                } else {
                    pieces.extend(self.char_vocab.encode(tag));
                }
            }
            if pieces.len() > self.encoder.config.max_length {
                return Err(Error::SequenceTooLong {
                    sentence_id: sentence_id.to_string(),
                    needed: pieces.len(),
                    max_length: self.encoder.config.max_length,
                });
            }
            let pos_input = SequenceInput::pieces(pieces);
            let (pos_out, pos_cache) = self.encoder.forward(&pos_input)?;
            let mut pos_states = Array2::zeros((masked_pos.len(), d));
            for (row, &first) in pos_first.iter().enumerate() {
                pos_states.row_mut(row).assign(&pos_out.row(first));
            }
            (pos_states, Some(pos_input), Some(pos_cache), pos_first)
        } else {
            (
                Array2::zeros((tokens.len(), d)),
                None,
                None,
                Vec::new(),
            )
        };

        let features = ForwardFeatures::assemble(word_states, pos_states, prompt_summary)?;
        Ok(EncodePass {
            features,
            switches,
            selected_prompts,
            word_input,
            word_cache,
            word_first,
            pos_input,
            pos_cache,
            pos_first,
        })
    }

    /// Reverse pass from a gradient on the fused matrix back through both
    /// encoder passes, accumulating parameter and prompt-bank gradients.
    pub fn backward_encode(
        &self,
        pass: &EncodePass,
        grad_fused: &Array2<f64>,
        grads: &mut GradStore,
    ) {
        let d = self.width();
        let n = pass.features.token_count();
        debug_assert_eq!(grad_fused.dim(), (n, 3 * d));
        let grad_word = grad_fused.slice(s![.., 0..d]);
        let grad_pos = grad_fused.slice(s![.., d..2 * d]);
        let grad_summary = grad_fused.slice(s![.., 2 * d..3 * d]).sum_axis(Axis(0));

        // word pass: word-state rows, plus the prompt summary mean-pool.
        let total = pass.word_input.len();
        let mut grad_states = Array2::zeros((total, d));
        for (row, &first) in pass.word_first.iter().enumerate() {
            let mut slot = grad_states.row_mut(first);
            slot += &grad_word.row(row);
        }
        let prefix_rows = pass.selected_prompts.len();
        if prefix_rows > 0 {
            let share = &grad_summary / prefix_rows as f64;
            for row in 0..prefix_rows {
                let mut slot = grad_states.row_mut(row);
                slot += &share;
            }
        }
        let prefix_grad = self
            .encoder
            .backward(&pass.word_input, &pass.word_cache, &grad_states, grads);
        if let Some(prefix_grad) = prefix_grad {
            let mut bank_grad = Array2::zeros(self.bank.vectors.raw_dim());
            for (slot, &row) in pass.selected_prompts.iter().enumerate() {
                let mut target = bank_grad.row_mut(row);
                target += &prefix_grad.row(slot);
            }
            grads.add2("prompt_bank.vectors", bank_grad);
        }

        // POS pass
        if let (Some(pos_input), Some(pos_cache)) = (&pass.pos_input, &pass.pos_cache) {
            let mut grad_states = Array2::zeros((pos_input.len(), d));
            for (row, &first) in pass.pos_first.iter().enumerate() {
                let mut slot = grad_states.row_mut(first);
                slot += &grad_pos.row(row);
            }
            self.encoder
                .backward(pos_input, pos_cache, &grad_states, grads);
        }
    }

    /// Visit every trainable tensor in a fixed order (encoder first, then
    /// prompt bank, then heads).
    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, ArrayViewMutD<f64>)) {
        self.encoder.visit_params_mut(f);
        f(
            "prompt_bank.vectors".to_string(),
            self.bank.vectors.view_mut().into_dyn(),
        );
        f(
            "aspect_head.weight".to_string(),
            self.aspect_head.weight.view_mut().into_dyn(),
        );
        f(
            "aspect_head.bias".to_string(),
            self.aspect_head.bias.view_mut().into_dyn(),
        );
        f(
            "syntax_head.weight".to_string(),
            self.syntax_head.weight.view_mut().into_dyn(),
        );
        f(
            "syntax_head.bias".to_string(),
            self.syntax_head.bias.view_mut().into_dyn(),
        );
    }

    /// Snapshot of every parameter, in visit order.
    pub fn param_snapshot(&self) -> Vec<(String, ndarray::ArrayD<f64>)> {
        let mut snapshot = Vec::new();
        let mut clone = self.clone();
        clone.visit_params_mut(&mut |name, view| {
            snapshot.push((name, view.to_owned()));
        });
        snapshot
    }
}

/// Encode one tagged sentence with all streams on; the spec-level
/// operation view of [`AteModel::encode_cached`].
pub fn encode_inputs(
    model: &AteModel,
    sentence: &TaggedSentence,
    masked_pos: &[String],
) -> Result<ForwardFeatures> {
    let pass = model.encode_cached(
        &sentence.tokens,
        masked_pos,
        StreamSwitches::full(),
        &sentence.sentence_id,
    )?;
    Ok(pass.features)
}
