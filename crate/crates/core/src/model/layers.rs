//! Parameterized building blocks. Each block records the [`ParamId`]s it owns;
//! forward passes index the per-graph bindings with them.

use rand::Rng;

use crate::tensor::{Graph, ParamId, ParamSet, Result, Tensor, Var};

fn v(vars: &[Var], id: ParamId) -> Var {
    vars[id.0]
}

#[derive(Clone, Debug)]
pub(crate) struct Linear {
    w: ParamId,
    b: Option<ParamId>,
}

impl Linear {
    pub(crate) fn new<R: Rng>(
        params: &mut ParamSet,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let std = (1.0 / fan_in as f64).sqrt();
        let w = params.add(format!("{name}.w"), Tensor::randn(&[fan_in, fan_out], std, rng));
        let b = bias.then(|| params.add(format!("{name}.b"), Tensor::zeros(&[fan_out])));
        Self { w, b }
    }

    pub(crate) fn weight(&self) -> ParamId {
        self.w
    }

    pub(crate) fn bias(&self) -> Option<ParamId> {
        self.b
    }

    pub(crate) fn forward(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var> {
        let y = g.matmul(x, v(vars, self.w))?;
        match self.b {
            Some(b) => g.add_row(y, v(vars, b)),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    pub(crate) fn new(params: &mut ParamSet, name: &str, d: usize) -> Self {
        Self {
            gain: params.add(format!("{name}.g"), Tensor::full(&[d], 1.0)),
            bias: params.add(format!("{name}.b"), Tensor::zeros(&[d])),
        }
    }

    pub(crate) fn forward(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var> {
        g.layer_norm(x, v(vars, self.gain), v(vars, self.bias))
    }
}

/// Multi-head scaled dot-product attention with separate query and memory
/// inputs (self-attention passes the same node twice).
#[derive(Clone, Debug)]
pub(crate) struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl Attention {
    pub(crate) fn new<R: Rng>(params: &mut ParamSet, name: &str, d: usize, heads: usize, rng: &mut R) -> Self {
        assert!(heads > 0 && d % heads == 0, "d_model {d} not divisible by {heads} heads");
        Self {
            q: Linear::new(params, &format!("{name}.q"), d, d, false, rng),
            k: Linear::new(params, &format!("{name}.k"), d, d, false, rng),
            v: Linear::new(params, &format!("{name}.v"), d, d, false, rng),
            o: Linear::new(params, &format!("{name}.o"), d, d, true, rng),
            heads,
        }
    }

    pub(crate) fn forward(&self, g: &mut Graph, vars: &[Var], query: Var, memory: Var, causal: bool) -> Result<Var> {
        let q = self.q.forward(g, vars, query)?;
        let k = self.k.forward(g, vars, memory)?;
        let val = self.v.forward(g, vars, memory)?;
        let (tq, d) = (g.shape(q)[0], g.shape(q)[1]);
        let tk = g.shape(k)[0];
        let dh = d / self.heads;
        let mask = causal.then(|| {
            let mut m = Tensor::zeros(&[tq, tk]);
            for i in 0..tq {
                for j in i + 1..tk {
                    m.data_mut()[i * tk + j] = f64::NEG_INFINITY;
                }
            }
            g.constant(m)
        });
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, val)
            } else {
                (g.slice(q, 1, lo, hi)?, g.slice(k, 1, lo, hi)?, g.slice(val, 1, lo, hi)?)
            };
            let kt = g.transpose(kh)?;
            let logits = g.matmul(qh, kt)?;
            let mut logits = g.scale(logits, 1.0 / (dh as f64).sqrt())?;
            if let Some(mask) = mask {
                logits = g.add(logits, mask)?;
            }
            let weights = g.softmax(logits, 1)?;
            outs.push(g.matmul(weights, vh)?);
        }
        let joined = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 1)? };
        self.o.forward(g, vars, joined)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub(crate) fn new<R: Rng>(params: &mut ParamSet, name: &str, d: usize, width: usize, rng: &mut R) -> Self {
        Self {
            up: Linear::new(params, &format!("{name}.up"), d, width, true, rng),
            down: Linear::new(params, &format!("{name}.down"), width, d, true, rng),
        }
    }

    pub(crate) fn forward(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var> {
        let h = self.up.forward(g, vars, x)?;
        let h = g.gelu(h)?;
        self.down.forward(g, vars, h)
    }
}

/// Pre-norm self-attention and feed-forward, each with a residual.
#[derive(Clone, Debug)]
pub(crate) struct EncoderBlock {
    norm_attn: Norm,
    attn: Attention,
    norm_ff: Norm,
    ff: FeedForward,
}

impl EncoderBlock {
    pub(crate) fn new<R: Rng>(params: &mut ParamSet, name: &str, d: usize, heads: usize, ff: usize, rng: &mut R) -> Self {
        Self {
            norm_attn: Norm::new(params, &format!("{name}.ln_attn"), d),
            attn: Attention::new(params, &format!("{name}.attn"), d, heads, rng),
            norm_ff: Norm::new(params, &format!("{name}.ln_ff"), d),
            ff: FeedForward::new(params, &format!("{name}.ff"), d, ff, rng),
        }
    }

    pub(crate) fn forward(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var> {
        let h = self.norm_attn.forward(g, vars, x)?;
        let h = self.attn.forward(g, vars, h, h, false)?;
        let x = g.add(x, h)?;
        let h = self.norm_ff.forward(g, vars, x)?;
        let h = self.ff.forward(g, vars, h)?;
        g.add(x, h)
    }
}

/// Pre-norm masked self-attention, cross-attention to the encoder memory,
/// and feed-forward.
#[derive(Clone, Debug)]
pub(crate) struct DecoderBlock {
    norm_self: Norm,
    self_attn: Attention,
    norm_cross: Norm,
    cross_attn: Attention,
    norm_ff: Norm,
    ff: FeedForward,
}

impl DecoderBlock {
    pub(crate) fn new<R: Rng>(params: &mut ParamSet, name: &str, d: usize, heads: usize, ff: usize, rng: &mut R) -> Self {
        Self {
            norm_self: Norm::new(params, &format!("{name}.ln_self"), d),
            self_attn: Attention::new(params, &format!("{name}.self_attn"), d, heads, rng),
            norm_cross: Norm::new(params, &format!("{name}.ln_cross"), d),
            cross_attn: Attention::new(params, &format!("{name}.cross_attn"), d, heads, rng),
            norm_ff: Norm::new(params, &format!("{name}.ln_ff"), d),
            ff: FeedForward::new(params, &format!("{name}.ff"), d, ff, rng),
        }
    }

    pub(crate) fn forward(&self, g: &mut Graph, vars: &[Var], x: Var, memory: Var) -> Result<Var> {
        let h = self.norm_self.forward(g, vars, x)?;
        let h = self.self_attn.forward(g, vars, h, h, true)?;
        let x = g.add(x, h)?;
        let h = self.norm_cross.forward(g, vars, x)?;
        let h = self.cross_attn.forward(g, vars, h, memory, false)?;
        let x = g.add(x, h)?;
        let h = self.norm_ff.forward(g, vars, x)?;
        let h = self.ff.forward(g, vars, h)?;
        g.add(x, h)
    }
}
