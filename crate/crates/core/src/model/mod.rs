//! Hybrid CTC/attention recognizer with optional cross-modal attention to an
//! audio unit bank.
//!
//! Pipeline: video features → input projection + positional encoding →
//! encoder blocks → (cross-attention to the unit bank, residual) → layer norm
//! → {CTC head, attention decoder}.

mod checkpoint;
pub mod ctc;
mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{align_loss, cross_modal_attention, positional_encoding, AlignTarget, AttentionMap};
use crate::error::{Error, Result};
use crate::quantizer::AudioUnitBank;
use crate::tensor::{Graph, ParamId, ParamSet, Tensor, Var};

pub use checkpoint::{Checkpoint, CheckpointHeader, CHECKPOINT_VERSION};
pub use ctc::{collapse, ctc_brute_force, ctc_forward_backward, ctc_loss, greedy_ctc_decode, min_frames};
use layers::{DecoderBlock, EncoderBlock, Linear, Norm};

/// CTC blank.
pub const BLANK: usize = 0;
/// Shared start-of-sequence / end-of-sequence token for the decoder.
pub const SOS_EOS: usize = 1;
/// First transcript symbol id.
pub const FIRST_SYMBOL: usize = 2;

const SYMBOL_CHARS: &[u8] = b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";

/// Largest number of distinct transcript symbols that can be rendered as text.
pub const MAX_SYMBOLS: usize = SYMBOL_CHARS.len();

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub tokens: Vec<usize>,
    pub text: String,
}

impl Transcript {
    /// Renders each symbol as one character, space separated.
    pub fn from_tokens(tokens: Vec<usize>) -> Self {
        let text = tokens.iter().map(|&t| symbol_char(t)).collect::<Vec<_>>().join(" ");
        Self { tokens, text }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

fn symbol_char(token: usize) -> String {
    match token.checked_sub(FIRST_SYMBOL).and_then(|i| SYMBOL_CHARS.get(i)) {
        Some(&c) => (c as char).to_string(),
        None => format!("<{token}>"),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub ff_width: usize,
    /// Video feature width; 0 means "take it from the corpus".
    pub d_video: usize,
    /// Output vocabulary including blank and start/end; 0 means "take it from the corpus".
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 2,
            ff_width: 64,
            d_video: 0,
            vocab_size: 0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.d_model % 2 != 0 {
            return bad(format!("d_model must be positive and even, got {}", self.d_model));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model {} not divisible by {} heads", self.d_model, self.heads));
        }
        if self.ff_width == 0 || self.d_video == 0 {
            return bad("ff_width and d_video must be positive".into());
        }
        if self.vocab_size < FIRST_SYMBOL + 1 {
            return bad(format!("vocabulary needs blank, start/end and a symbol; got {}", self.vocab_size));
        }
        Ok(())
    }
}

/// Weights of the CTC, attention-decoder and alignment terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::LRS2
    }
}

impl LossWeights {
    /// Weights used for the English lip-reading benchmark.
    pub const LRS2: Self = Self {
        alpha: 0.08,
        beta: 0.9,
        gamma: 6.5,
    };
    /// Weights used for the Mandarin single-speaker benchmark.
    pub const CNVSRC: Self = Self {
        alpha: 0.085,
        beta: 0.9,
        gamma: 3.5,
    };

    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.gamma];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        if all.iter().all(|&w| w == 0.0) {
            return Err(Error::Config("loss weights must not all be zero".into()));
        }
        Ok(())
    }

    /// `alpha·ctc + beta·att + gamma·align` on plain numbers; zero-weighted
    /// terms are skipped so an undefined term cannot poison the total.
    pub fn combine(&self, ctc: f64, att: f64, align: f64) -> f64 {
        [(self.alpha, ctc), (self.beta, att), (self.gamma, align)]
            .iter()
            .filter(|(w, _)| *w != 0.0)
            .map(|(w, l)| w * l)
            .sum()
    }
}

/// `alpha·L_ctc + beta·L_att + gamma·L_align` on the tape. Terms with zero
/// weight are left out of the graph entirely.
pub fn hybrid_loss(g: &mut Graph, ctc: Var, att: Var, align: Option<Var>, w: &LossWeights) -> Result<Var> {
    let mut terms = Vec::new();
    for (weight, term) in [(w.alpha, Some(ctc)), (w.beta, Some(att)), (w.gamma, align)] {
        if weight == 0.0 {
            continue;
        }
        let term = term.ok_or_else(|| Error::InvalidArgument("alignment weight is non-zero but no alignment loss".into()))?;
        terms.push(g.scale(term, weight)?);
    }
    let mut total = *terms.first().ok_or_else(|| Error::Config("all loss weights are zero".into()))?;
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(total)
}

/// Loss nodes for one utterance.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub ctc: Var,
    pub att: Var,
    pub align: Option<Var>,
    pub total: Var,
}

/// Intermediate nodes of a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub encoder: Var,
    pub attention: Option<AttentionMap>,
    /// Normalized features consumed by both heads.
    pub features: Var,
    pub ctc_log_probs: Var,
}

#[derive(Clone, Debug)]
struct BankParams {
    query_norm: Norm,
    key: ParamId,
    value: ParamId,
    centroids: Tensor,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamSet,
    input: Linear,
    encoder: Vec<EncoderBlock>,
    bank: Option<BankParams>,
    feature_norm: Norm,
    ctc_head: Linear,
    embed: ParamId,
    decoder: Vec<DecoderBlock>,
    decoder_norm: Norm,
    output: Linear,
}

impl Model {
    /// Builds a freshly initialized model. With a bank, its embeddings become
    /// trainable parameters and cross-attention is enabled.
    pub fn new(config: ModelConfig, bank: Option<&AudioUnitBank>) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let input = Linear::new(&mut params, "enc.input", config.d_video, d, true, &mut rng);
        let encoder = (0..config.encoder_layers)
            .map(|l| EncoderBlock::new(&mut params, &format!("enc.{l}"), d, config.heads, config.ff_width, &mut rng))
            .collect();
        let bank = match bank {
            Some(b) => {
                if b.d_model() != d {
                    return Err(Error::Config(format!(
                        "unit bank embeddings have width {}, model has d_model {d}",
                        b.d_model()
                    )));
                }
                Some(BankParams {
                    query_norm: Norm::new(&mut params, "bank.query.ln", d),
                    key: params.add("bank.key", b.key_embed.clone()),
                    value: params.add("bank.value", b.value_embed.clone()),
                    centroids: b.centroids.clone(),
                })
            }
            None => None,
        };
        let feature_norm = Norm::new(&mut params, "features.ln", d);
        let ctc_head = Linear::new(&mut params, "ctc.out", d, config.vocab_size, true, &mut rng);
        let embed = params.add("dec.embed", Tensor::randn(&[config.vocab_size, d], 1.0, &mut rng));
        let decoder = (0..config.decoder_layers)
            .map(|l| DecoderBlock::new(&mut params, &format!("dec.{l}"), d, config.heads, config.ff_width, &mut rng))
            .collect();
        let decoder_norm = Norm::new(&mut params, "dec.ln", d);
        let output = Linear::new(&mut params, "dec.out", d, config.vocab_size, true, &mut rng);
        Ok(Self {
            config,
            params,
            input,
            encoder,
            bank,
            feature_norm,
            ctc_head,
            embed,
            decoder,
            decoder_norm,
            output,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn has_cross_attention(&self) -> bool {
        self.bank.is_some()
    }

    /// Current state of the unit bank, including trained embeddings.
    pub fn bank(&self) -> Option<AudioUnitBank> {
        self.bank.as_ref().map(|b| AudioUnitBank {
            centroids: b.centroids.clone(),
            key_embed: self.params.get(b.key).clone(),
            value_embed: self.params.get(b.value).clone(),
            seed: 0,
        })
    }

    pub fn num_units(&self) -> Option<usize> {
        self.bank.as_ref().map(|b| b.centroids.rows())
    }

    /// Zeroes the decoder's output projection so it predicts a uniform
    /// distribution (used to probe the loss bound).
    pub fn zero_decoder_output(&mut self) {
        let w = self.output.weight();
        *self.params.get_mut(w) = Tensor::zeros(self.params.get(w).shape());
        if let Some(b) = self.output.bias() {
            *self.params.get_mut(b) = Tensor::zeros(self.params.get(b).shape());
        }
    }

    fn check_video(&self, video: &Tensor) -> Result<()> {
        if video.rank() != 2 || video.cols() != self.config.d_video {
            return Err(Error::InvalidArgument(format!(
                "video features must be T×{}, got {:?}",
                self.config.d_video,
                video.shape()
            )));
        }
        Ok(())
    }

    /// Input projection, positional encoding, then the encoder blocks.
    pub fn encoder_forward(&self, g: &mut Graph, vars: &[Var], video: &Tensor) -> Result<Var> {
        self.check_video(video)?;
        let x = g.constant(video.clone());
        let x = self.input.forward(g, vars, x)?;
        let pe = g.constant(positional_encoding(video.rows(), self.config.d_model)?);
        let mut x = g.add(x, pe)?;
        for block in &self.encoder {
            x = block.forward(g, vars, x)?;
        }
        Ok(x)
    }

    pub fn encode(&self, g: &mut Graph, vars: &[Var], video: &Tensor) -> Result<Encoded> {
        let encoder = self.encoder_forward(g, vars, video)?;
        let (attention, fused) = match &self.bank {
            Some(b) => {
                let query = b.query_norm.forward(g, vars, encoder)?;
                let map = cross_modal_attention(g, query, vars[b.key.0], vars[b.value.0])?;
                (Some(map), map.output)
            }
            None => (None, encoder),
        };
        let features = self.feature_norm.forward(g, vars, fused)?;
        let logits = self.ctc_head.forward(g, vars, features)?;
        let ctc_log_probs = g.log_softmax(logits, 1)?;
        Ok(Encoded {
            encoder,
            attention,
            features,
            ctc_log_probs,
        })
    }

    /// Decoder log-probabilities (`L×V`) for the given input prefix.
    fn decoder_log_probs(&self, g: &mut Graph, vars: &[Var], memory: Var, inputs: &[usize]) -> Result<Var> {
        let x = g.rows(vars[self.embed.0], inputs)?;
        let pe = g.constant(positional_encoding(inputs.len(), self.config.d_model)?);
        let mut x = g.add(x, pe)?;
        for block in &self.decoder {
            x = block.forward(g, vars, x, memory)?;
        }
        let x = self.decoder_norm.forward(g, vars, x)?;
        let logits = self.output.forward(g, vars, x)?;
        Ok(g.log_softmax(logits, 1)?)
    }

    fn check_target(&self, target: &Transcript) -> Result<()> {
        if target.is_empty() {
            return Err(Error::InvalidArgument("transcript must not be empty".into()));
        }
        if let Some(&t) = target.tokens.iter().find(|&&t| t < FIRST_SYMBOL || t >= self.config.vocab_size) {
            return Err(Error::InvalidArgument(format!(
                "token {t} is not a transcript symbol for vocabulary size {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Teacher-forced decoder loss: mean negative log-likelihood of
    /// `(target…, end)` given `(start, target…)`.
    pub fn attention_decoder_loss(&self, g: &mut Graph, vars: &[Var], memory: Var, target: &Transcript) -> Result<Var> {
        self.check_target(target)?;
        let mut inputs = Vec::with_capacity(target.len() + 1);
        inputs.push(SOS_EOS);
        inputs.extend_from_slice(&target.tokens);
        let log_probs = self.decoder_log_probs(g, vars, memory, &inputs)?;
        let v = self.config.vocab_size;
        let picks: Vec<usize> = target
            .tokens
            .iter()
            .chain(std::iter::once(&SOS_EOS))
            .enumerate()
            .map(|(i, &y)| i * v + y)
            .collect();
        let picked = g.pick(log_probs, &picks)?;
        let mean = g.mean(picked)?;
        Ok(g.scale(mean, -1.0)?)
    }

    /// All loss terms for one utterance. The alignment term is computed
    /// whenever the model has a bank and targets are given, even if its
    /// weight is zero, so it can be monitored.
    pub fn losses(
        &self,
        g: &mut Graph,
        vars: &[Var],
        video: &Tensor,
        target: &Transcript,
        align_targets: Option<&AlignTarget>,
        weights: &LossWeights,
    ) -> Result<LossTerms> {
        self.check_target(target)?;
        let enc = self.encode(g, vars, video)?;
        let ctc = ctc_loss(g, enc.ctc_log_probs, &target.tokens, BLANK)?;
        let att = self.attention_decoder_loss(g, vars, enc.features, target)?;
        let align = match (enc.attention, align_targets) {
            (Some(map), Some(t)) => Some(align_loss(g, map.scores, t)?),
            _ => None,
        };
        let total = hybrid_loss(g, ctc, att, align, weights)?;
        Ok(LossTerms { ctc, att, align, total })
    }

    /// Greedy CTC transcript.
    pub fn decode_ctc(&self, video: &Tensor) -> Result<Transcript> {
        let mut g = Graph::new();
        let vars = self.params.bind_frozen(&mut g);
        let enc = self.encode(&mut g, &vars, video)?;
        Ok(Transcript::from_tokens(greedy_ctc_decode(g.value(enc.ctc_log_probs), BLANK)))
    }

    /// Greedy autoregressive transcript, stopping at the end token or after
    /// `max_len` symbols.
    pub fn decode_attention(&self, video: &Tensor, max_len: usize) -> Result<Transcript> {
        if max_len == 0 {
            return Err(Error::InvalidArgument("max_len must be at least 1".into()));
        }
        let mut g = Graph::new();
        let vars = self.params.bind_frozen(&mut g);
        let enc = self.encode(&mut g, &vars, video)?;
        let mut inputs = vec![SOS_EOS];
        let mut out = Vec::new();
        while out.len() < max_len {
            let lp = self.decoder_log_probs(&mut g, &vars, enc.features, &inputs)?;
            let row = g.value(lp).row(inputs.len() - 1);
            // Blank is a CTC-only symbol; never emit it here.
            let next = (1..row.len()).fold(SOS_EOS, |best, k| if row[k] > row[best] { k } else { best });
            if next == SOS_EOS {
                break;
            }
            out.push(next);
            inputs.push(next);
        }
        Ok(Transcript::from_tokens(out))
    }

    /// Attention scores over the unit bank (`T×K`), if the model has one.
    pub fn attention_scores(&self, video: &Tensor) -> Result<Option<Tensor>> {
        let mut g = Graph::new();
        let vars = self.params.bind_frozen(&mut g);
        let enc = self.encode(&mut g, &vars, video)?;
        Ok(enc.attention.map(|m| g.value(m.scores).clone()))
    }

    pub(crate) fn centroids(&self) -> Option<&Tensor> {
        self.bank.as_ref().map(|b| &b.centroids)
    }
}
