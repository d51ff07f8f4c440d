//! Global and local audio-visual alignment.
//!
//! Global alignment is single-head cross-attention from video frames (queries)
//! to the audio unit bank (keys and values). Local alignment supervises that
//! attention: video frame `i` (1-indexed) corresponds to audio frames
//! `2i-2, 2i-1, 2i` of a `2T-1` frame audio sequence, and the loss is the
//! negative log attention score on the units of those frames, averaged over
//! frames.
//!
//! Position `2i-2` does not exist for `i = 1` and `2i` does not exist past the
//! end, so positions are clamped into `1..=2T-1`.

use std::io::Write;

use crate::error::{Error, Result};
use crate::quantizer::UnitSequence;
use crate::tensor::{Graph, Tensor, Var};

/// Fixed sinusoidal table: `PE[t, 2j] = sin(t / 10000^(2j/d))`,
/// `PE[t, 2j+1] = cos(t / 10000^(2j/d))`.
pub fn positional_encoding(t: usize, d_model: usize) -> Result<Tensor> {
    if d_model == 0 || d_model % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "positional encoding needs an even, positive d_model, got {d_model}"
        )));
    }
    if t == 0 {
        return Err(Error::InvalidArgument("positional encoding needs T >= 1".into()));
    }
    let mut data = vec![0.0; t * d_model];
    for pos in 0..t {
        for j in 0..d_model / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * j as f64 / d_model as f64);
            data[pos * d_model + 2 * j] = angle.sin();
            data[pos * d_model + 2 * j + 1] = angle.cos();
        }
    }
    Ok(Tensor::matrix(t, d_model, data)?)
}

/// Output of [`cross_modal_attention`].
#[derive(Clone, Copy, Debug)]
pub struct AttentionMap {
    /// `T×K` row-stochastic attention over units.
    pub scores: Var,
    /// `T×d_model` attention-weighted value embeddings.
    pub context: Var,
    /// Video features plus context (residual).
    pub output: Var,
}

/// Scaled dot-product attention from `video` (`T×d`, positional encoding
/// already added) to the unit bank embeddings `keys` and `values` (`K×d`).
pub fn cross_modal_attention(g: &mut Graph, video: Var, keys: Var, values: Var) -> Result<AttentionMap> {
    let d = g.shape(video)[1];
    for (what, v) in [("key", keys), ("value", values)] {
        if g.shape(v).len() != 2 || g.shape(v)[1] != d {
            return Err(Error::InvalidArgument(format!(
                "unit {what} embeddings have shape {:?}, video features have width {d}",
                g.shape(v)
            )));
        }
    }
    let kt = g.transpose(keys)?;
    let logits = g.matmul(video, kt)?;
    let logits = g.scale(logits, 1.0 / (d as f64).sqrt())?;
    let scores = g.softmax(logits, 1)?;
    let context = g.matmul(scores, values)?;
    let output = g.add(video, context)?;
    Ok(AttentionMap {
        scores,
        context,
        output,
    })
}

/// 0-indexed audio positions backing video frame `i` (0-indexed) of a
/// `t`-frame clip, after clamping.
pub fn target_positions(t: usize, i: usize) -> [usize; 3] {
    assert!(i < t);
    let last = 2 * t - 1;
    let one_based = i + 1;
    // 1-indexed positions 2i-2, 2i-1, 2i clamped into [1, 2T-1], then shifted to 0-based.
    [2 * one_based - 2, 2 * one_based - 1, 2 * one_based].map(|p| p.clamp(1, last) - 1)
}

/// Per-video-frame target units `(u_f, u_s, u_t)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AlignTarget {
    triples: Vec<[usize; 3]>,
}

impl AlignTarget {
    pub fn new(triples: Vec<[usize; 3]>) -> Self {
        Self { triples }
    }

    pub fn triples(&self) -> &[[usize; 3]] {
        &self.triples
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    /// Whether `unit` is one of frame `i`'s targets.
    pub fn is_target(&self, i: usize, unit: usize) -> bool {
        self.triples[i].contains(&unit)
    }
}

pub fn align_targets(t: usize, units: &UnitSequence) -> Result<AlignTarget> {
    if t == 0 || units.len() != 2 * t - 1 {
        return Err(Error::LengthMismatch {
            what: "audio unit sequence (must be 2T-1 for T video frames)",
            expected: (2 * t).saturating_sub(1),
            actual: units.len(),
        });
    }
    let ids = units.ids();
    Ok(AlignTarget::new(
        (0..t).map(|i| target_positions(t, i).map(|p| ids[p])).collect(),
    ))
}

/// Mean over frames of `-ln p[u_f] - ln p[u_s] - ln p[u_t]`, with repeated
/// units counted once per occurrence. A zero score on a target gives `+inf`.
pub fn align_loss(g: &mut Graph, scores: Var, targets: &AlignTarget) -> Result<Var> {
    let shape = g.shape(scores).to_vec();
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(Error::LengthMismatch {
            what: "attention map rows vs alignment targets",
            expected: targets.len(),
            actual: shape.first().copied().unwrap_or(0),
        });
    }
    let k = shape[1];
    let mut picks = Vec::with_capacity(3 * targets.len());
    for (i, triple) in targets.triples().iter().enumerate() {
        for &u in triple {
            if u >= k {
                return Err(Error::InvalidArgument(format!(
                    "target unit {u} at frame {i} outside bank of {k} units"
                )));
            }
            picks.push(i * k + u);
        }
    }
    let p = g.pick(scores, &picks)?;
    let logs = g.ln(p)?;
    let total = g.sum(logs)?;
    Ok(g.scale(total, -1.0 / targets.len() as f64)?)
}

/// Average over frames of the attention mass on each frame's distinct
/// target units.
pub fn mean_target_mass(scores: &Tensor, targets: &AlignTarget) -> f64 {
    let t = targets.len();
    let total: f64 = (0..t)
        .map(|i| {
            let row = scores.row(i);
            (0..row.len()).filter(|&u| targets.is_target(i, u)).map(|u| row[u]).sum::<f64>()
        })
        .sum();
    total / t as f64
}

/// CSV with header `frame,unit,score,is_target`, one row per (frame, unit).
pub fn write_alignment_csv<W: Write>(out: W, scores: &Tensor, targets: &AlignTarget) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["frame", "unit", "score", "is_target"])?;
    for i in 0..scores.rows() {
        for (u, s) in scores.row(i).iter().enumerate() {
            let flag = u8::from(targets.is_target(i, u));
            w.write_record([i.to_string(), u.to_string(), s.to_string(), flag.to_string()])?;
        }
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
