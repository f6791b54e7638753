//! The tiny self-attention encoder and its character-level vocabulary.
//!
//! Words and POS tag strings render into character pieces; the first
//! piece's final hidden state stands for the word or tag. Prompt vectors
//! enter the word pass directly as input embeddings ahead of the pieces,
//! so attention can condition every state on them and the prompt rows get
//! input gradients. Architecture: embeddings + sinusoidal positions, then
//! pre-norm blocks (LN, multi-head attention, residual, LN, ReLU MLP,
//! residual), then a final layer norm.

use std::collections::HashMap;

use ndarray::{s, Array1, Array2, ArrayViewMutD};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::nn::{
    layer_norm, layer_norm_backward, linear, linear_backward, positional_encoding, relu,
    relu_backward, softmax_rows, softmax_rows_backward, GradStore, LayerNormCache,
};
use crate::error::{Error, Result};
use crate::rng::stream_rng;

/// Character-level piece vocabulary. Id 0 is the unknown piece, id 1 the
/// sentinel piece standing in for a masked POS tag.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharVocab {
    chars: String,
    #[serde(skip)]
    index: HashMap<char, usize>,
}

impl CharVocab {
    pub const UNK: usize = 0;
    pub const SENTINEL: usize = 1;
    const RESERVED: usize = 2;

    /// Collect the characters of every given text, sorted.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut seen: Vec<char> = texts
            .into_iter()
            .flat_map(|t| t.chars())
            .collect::<std::collections::BTreeSet<char>>()
            .into_iter()
            .collect();
        seen.dedup();
        let mut vocab = CharVocab {
            chars: seen.into_iter().collect(),
            index: HashMap::new(),
        };
        vocab.rebuild_index();
        vocab
    }

    pub fn from_chars(chars: String) -> Self {
        let mut vocab = CharVocab {
            chars,
            index: HashMap::new(),
        };
        vocab.rebuild_index();
        vocab
    }

    fn rebuild_index(&mut self) {
        self.index = self
            .chars
            .chars()
            .enumerate()
            .map(|(i, c)| (c, i + Self::RESERVED))
            .collect();
    }

    pub fn chars(&self) -> &str {
        &self.chars
    }

    /// Piece count including the two reserved ids.
    pub fn size(&self) -> usize {
        self.chars.chars().count() + Self::RESERVED
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.chars()
            .map(|c| self.index.get(&c).copied().unwrap_or(Self::UNK))
            .collect()
    }
}

/// Backbone shape and limits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub hidden_width: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub max_length: usize,
    /// False selects the seeded tiny encoder; true loads weights from a
    /// backbone checkpoint instead of initializing.
    pub pretrained: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            hidden_width: 16,
            num_layers: 2,
            num_heads: 2,
            max_length: 512,
            pretrained: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_width == 0 || self.num_layers == 0 || self.num_heads == 0 {
            return Err(Error::Config(
                "encoder width, layers and heads must be positive".into(),
            ));
        }
        if self.hidden_width % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden width {} not divisible by {} heads",
                self.hidden_width, self.num_heads
            )));
        }
        if self.max_length == 0 {
            return Err(Error::Config("max_length must be positive".into()));
        }
        Ok(())
    }

    pub fn ff_width(&self) -> usize {
        4 * self.hidden_width
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: Array1<f64>,
    pub ln1_bias: Array1<f64>,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub ln2_gain: Array1<f64>,
    pub ln2_bias: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// One input sequence: optional injected embeddings (prompt vectors) ahead
/// of the piece ids.
#[derive(Debug, Clone)]
pub struct SequenceInput {
    pub prefix: Option<Array2<f64>>,
    pub piece_ids: Vec<usize>,
}

impl SequenceInput {
    pub fn pieces(piece_ids: Vec<usize>) -> Self {
        SequenceInput {
            prefix: None,
            piece_ids,
        }
    }

    pub fn len(&self) -> usize {
        self.prefix.as_ref().map_or(0, |p| p.nrows()) + self.piece_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

struct LayerCache {
    x: Array2<f64>,
    ln1: LayerNormCache,
    a: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Vec<Array2<f64>>, // per-head softmax outputs
    context: Array2<f64>,
    ln2: LayerNormCache,
    b: Array2<f64>,
    z: Array2<f64>, // pre-activation of the MLP
    hidden: Array2<f64>,
}

/// Everything the backward pass needs from one forward run.
pub struct ForwardCache {
    layers: Vec<LayerCache>,
    final_ln: LayerNormCache,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub embedding: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub final_gain: Array1<f64>,
    pub final_bias: Array1<f64>,
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("valid normal");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

impl Encoder {
    /// Seeded random initialization (the `pretrained = false` path).
    pub fn init(config: EncoderConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_width;
        let ff = config.ff_width();
        let mut rng = stream_rng(seed, "init", 0);
        let embedding = normal_matrix(&mut rng, vocab_size, d, 0.5);
        let xavier = |fan_in: usize, fan_out: usize| (2.0 / (fan_in + fan_out) as f64).sqrt();
        let layers = (0..config.num_layers)
            .map(|_| LayerParams {
                ln1_gain: Array1::ones(d),
                ln1_bias: Array1::zeros(d),
                wq: normal_matrix(&mut rng, d, d, xavier(d, d)),
                wk: normal_matrix(&mut rng, d, d, xavier(d, d)),
                wv: normal_matrix(&mut rng, d, d, xavier(d, d)),
                wo: normal_matrix(&mut rng, d, d, xavier(d, d)),
                ln2_gain: Array1::ones(d),
                ln2_bias: Array1::zeros(d),
                w1: normal_matrix(&mut rng, d, ff, xavier(d, ff)),
                b1: Array1::zeros(ff),
                w2: normal_matrix(&mut rng, ff, d, xavier(ff, d)),
                b2: Array1::zeros(d),
            })
            .collect();
        Ok(Encoder {
            config,
            embedding,
            layers,
            final_gain: Array1::ones(d),
            final_bias: Array1::zeros(d),
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.nrows()
    }

    pub fn width(&self) -> usize {
        self.config.hidden_width
    }

    /// Full forward pass; returns the final hidden states (`T x d`) and the
    /// cache for [`Self::backward`].
    pub fn forward(&self, input: &SequenceInput) -> Result<(Array2<f64>, ForwardCache)> {
        let d = self.config.hidden_width;
        let prefix_rows = input.prefix.as_ref().map_or(0, |p| p.nrows());
        let total = prefix_rows + input.piece_ids.len();
        if total == 0 {
            return Err(Error::Shape("empty encoder input".into()));
        }
        if let Some(prefix) = &input.prefix {
            if prefix.ncols() != d {
                return Err(Error::Shape(format!(
                    "prefix width {} vs encoder width {d}",
                    prefix.ncols()
                )));
            }
        }
        for &id in &input.piece_ids {
            if id >= self.vocab_size() {
                return Err(Error::Shape(format!(
                    "piece id {id} outside vocabulary of {}",
                    self.vocab_size()
                )));
            }
        }

        let mut rows = Array2::zeros((total, d));
        if let Some(prefix) = &input.prefix {
            rows.slice_mut(s![..prefix_rows, ..]).assign(prefix);
        }
        for (offset, &id) in input.piece_ids.iter().enumerate() {
            rows.row_mut(prefix_rows + offset)
                .assign(&self.embedding.row(id));
        }
        rows += &positional_encoding(total, d);

        let mut x = rows;
        let mut layer_caches = Vec::with_capacity(self.layers.len());
        for params in &self.layers {
            let (x_next, cache) = self.layer_forward(params, x)?;
            x = x_next;
            layer_caches.push(cache);
        }
        let (out, final_ln) = layer_norm(&x, &self.final_gain, &self.final_bias);
        Ok((
            out,
            ForwardCache {
                layers: layer_caches,
                final_ln,
            },
        ))
    }

    fn layer_forward(&self, params: &LayerParams, x: Array2<f64>) -> Result<(Array2<f64>, LayerCache)> {
        let heads = self.config.num_heads;
        let d = self.config.hidden_width;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let (a, ln1) = layer_norm(&x, &params.ln1_gain, &params.ln1_bias);
        let q = a.dot(&params.wq);
        let k = a.dot(&params.wk);
        let v = a.dot(&params.wv);

        let t = x.nrows();
        let mut context = Array2::zeros((t, d));
        let mut attn = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let qh = q.slice(cols);
            let kh = k.slice(cols);
            let vh = v.slice(cols);
            let scores = qh.dot(&kh.t()) * scale;
            let p = softmax_rows(&scores);
            let ch = p.dot(&vh);
            context.slice_mut(cols).assign(&ch);
            attn.push(p);
        }
        let attn_out = context.dot(&params.wo);
        let h_state = &x + &attn_out;

        let (b, ln2) = layer_norm(&h_state, &params.ln2_gain, &params.ln2_bias);
        let z = linear(&b, &params.w1, &params.b1)?;
        let hidden = relu(&z);
        let ffn_out = linear(&hidden, &params.w2, &params.b2)?;
        let y = &h_state + &ffn_out;

        Ok((
            y,
            LayerCache {
                x,
                ln1,
                a,
                q,
                k,
                v,
                attn,
                context,
                ln2,
                b,
                z,
                hidden,
            },
        ))
    }

    /// Reverse pass. Accumulates parameter gradients into `grads` under
    /// `encoder.*` names, scatter-adds embedding gradients for the piece
    /// ids, and returns the gradient w.r.t. the injected prefix rows (when
    /// a prefix was present).
    pub fn backward(
        &self,
        input: &SequenceInput,
        cache: &ForwardCache,
        grad_out: &Array2<f64>,
        grads: &mut GradStore,
    ) -> Option<Array2<f64>> {
        let (mut dx, dgain, dbias) =
            layer_norm_backward(&cache.final_ln, &self.final_gain, grad_out);
        grads.add1("encoder.final_ln.gain", dgain);
        grads.add1("encoder.final_ln.bias", dbias);

        for (index, (params, layer_cache)) in self
            .layers
            .iter()
            .zip(&cache.layers)
            .enumerate()
            .rev()
        {
            dx = self.layer_backward(index, params, layer_cache, dx, grads);
        }

        // input rows: scatter into the embedding table; slice off prefix grads
        let prefix_rows = input.prefix.as_ref().map_or(0, |p| p.nrows());
        let mut grad_embedding = Array2::zeros(self.embedding.raw_dim());
        for (offset, &id) in input.piece_ids.iter().enumerate() {
            let mut row = grad_embedding.row_mut(id);
            row += &dx.row(prefix_rows + offset);
        }
        grads.add2("encoder.embedding", grad_embedding);
        if prefix_rows > 0 {
            Some(dx.slice(s![..prefix_rows, ..]).to_owned())
        } else {
            None
        }
    }

    fn layer_backward(
        &self,
        index: usize,
        params: &LayerParams,
        cache: &LayerCache,
        dy: Array2<f64>,
        grads: &mut GradStore,
    ) -> Array2<f64> {
        let heads = self.config.num_heads;
        let d = self.config.hidden_width;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let name = |suffix: &str| format!("encoder.layers.{index}.{suffix}");

        // y = h + ffn(ln2(h))
        let dffn_out = dy.clone();
        let (dhidden, dw2, db2) = linear_backward(&cache.hidden, &params.w2, &dffn_out);
        grads.add2(&name("ffn.w2"), dw2);
        grads.add1(&name("ffn.b2"), db2);
        let dz = relu_backward(&cache.z, &dhidden);
        let (db_state, dw1, db1) = linear_backward(&cache.b, &params.w1, &dz);
        grads.add2(&name("ffn.w1"), dw1);
        grads.add1(&name("ffn.b1"), db1);
        let (dh_from_ln2, dgain2, dbias2) =
            layer_norm_backward(&cache.ln2, &params.ln2_gain, &db_state);
        grads.add1(&name("ln2.gain"), dgain2);
        grads.add1(&name("ln2.bias"), dbias2);
        let dh_total = &dy + &dh_from_ln2;

        // h = x + attn(ln1(x)) W_o
        let dattn_out = &dh_total;
        let dcontext = dattn_out.dot(&params.wo.t());
        grads.add2(&name("attn.wo"), cache.context.t().dot(dattn_out));

        let t = cache.x.nrows();
        let mut dq = Array2::zeros((t, d));
        let mut dk = Array2::zeros((t, d));
        let mut dv = Array2::zeros((t, d));
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let p = &cache.attn[h];
            let vh = cache.v.slice(cols);
            let qh = cache.q.slice(cols);
            let kh = cache.k.slice(cols);
            let dch = dcontext.slice(cols);
            let dp = dch.dot(&vh.t());
            let dvh = p.t().dot(&dch);
            let ds = softmax_rows_backward(p, &dp);
            let dqh = ds.dot(&kh) * scale;
            let dkh = ds.t().dot(&qh) * scale;
            dq.slice_mut(cols).assign(&dqh);
            dk.slice_mut(cols).assign(&dkh);
            dv.slice_mut(cols).assign(&dvh);
        }
        let da = dq.dot(&params.wq.t()) + dk.dot(&params.wk.t()) + dv.dot(&params.wv.t());
        grads.add2(&name("attn.wq"), cache.a.t().dot(&dq));
        grads.add2(&name("attn.wk"), cache.a.t().dot(&dk));
        grads.add2(&name("attn.wv"), cache.a.t().dot(&dv));
        let (dx_from_ln1, dgain1, dbias1) = layer_norm_backward(&cache.ln1, &params.ln1_gain, &da);
        grads.add1(&name("ln1.gain"), dgain1);
        grads.add1(&name("ln1.bias"), dbias1);
        dh_total + dx_from_ln1
    }

    /// Visit every parameter tensor in a fixed, stable order.
    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, ArrayViewMutD<f64>)) {
        f("encoder.embedding".to_string(), self.embedding.view_mut().into_dyn());
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let name = |s: &str| format!("encoder.layers.{i}.{s}");
            f(name("ln1.gain"), layer.ln1_gain.view_mut().into_dyn());
            f(name("ln1.bias"), layer.ln1_bias.view_mut().into_dyn());
            f(name("attn.wq"), layer.wq.view_mut().into_dyn());
            f(name("attn.wk"), layer.wk.view_mut().into_dyn());
            f(name("attn.wv"), layer.wv.view_mut().into_dyn());
            f(name("attn.wo"), layer.wo.view_mut().into_dyn());
            f(name("ln2.gain"), layer.ln2_gain.view_mut().into_dyn());
            f(name("ln2.bias"), layer.ln2_bias.view_mut().into_dyn());
            f(name("ffn.w1"), layer.w1.view_mut().into_dyn());
            f(name("ffn.b1"), layer.b1.view_mut().into_dyn());
            f(name("ffn.w2"), layer.w2.view_mut().into_dyn());
            f(name("ffn.b2"), layer.b2.view_mut().into_dyn());
        }
        f(
            "encoder.final_ln.gain".to_string(),
            self.final_gain.view_mut().into_dyn(),
        );
        f(
            "encoder.final_ln.bias".to_string(),
            self.final_bias.view_mut().into_dyn(),
        );
    }

    /// Static (context-free) embedding of a text: mean over its pieces'
    /// embedding rows. Used to embed prompt candidate tokens.
    pub fn static_text_embedding(&self, vocab: &CharVocab, text: &str) -> Array1<f64> {
        let ids = vocab.encode(text);
        if ids.is_empty() {
            return Array1::zeros(self.width());
        }
        let mut sum = Array1::zeros(self.width());
        for id in &ids {
            sum += &self.embedding.row(*id);
        }
        sum / ids.len() as f64
    }
}

/// [`crate::prompts::TokenEmbedder`] backed by the encoder's static
/// embedding table.
pub struct BackboneEmbedder<'a> {
    pub encoder: &'a Encoder,
    pub vocab: &'a CharVocab,
}

impl crate::prompts::TokenEmbedder for BackboneEmbedder<'_> {
    fn width(&self) -> usize {
        self.encoder.width()
    }

    fn embed(&self, token: &str) -> Array1<f64> {
        self.encoder.static_text_embedding(self.vocab, token)
    }
}
