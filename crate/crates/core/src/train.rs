//! Run configuration, the training loop and loss-curve records.
//!
//! Three system variants are supported:
//!
//! * `S1`: recognizer only, no unit bank, no alignment term.
//! * `S2`: adds cross-attention to the unit bank, still no alignment term
//!   (the alignment loss is logged but not optimized).
//! * `S3`: S2 plus the alignment term.

use std::fmt;
use std::io::Write;
use std::path::PathBuf;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::{align_targets, AlignTarget};
use crate::data::{filter_by_duration, Utterance};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, CheckpointHeader, LossWeights, Model, ModelConfig, Transcript};
use crate::quantizer::{assign, AudioUnitBank};
use crate::tensor::{clip_grad_norm, Adam, AdamConfig, Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    S1,
    S2,
    S3,
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "s1" => Ok(Self::S1),
            "s2" => Ok(Self::S2),
            "s3" => Ok(Self::S3),
            _ => Err(Error::Config(format!("unknown variant {s:?}, expected s1, s2 or s3"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::S1 => "s1",
            Self::S2 => "s2",
            Self::S3 => "s3",
        })
    }
}

impl Variant {
    pub fn uses_bank(self) -> bool {
        !matches!(self, Self::S1)
    }

    /// Checks the variant's requirements on the bank and alignment weight.
    pub fn check(self, has_bank: bool, gamma: f64) -> Result<()> {
        let problem = match self {
            Self::S1 if has_bank => Some("s1 must not be given a unit bank"),
            Self::S1 if gamma != 0.0 => Some("s1 has no alignment term; gamma must be 0"),
            Self::S2 | Self::S3 if !has_bank => Some("s2 and s3 need a unit bank"),
            Self::S2 if gamma != 0.0 => Some("s2 does not optimize the alignment loss; gamma must be 0"),
            Self::S3 if gamma <= 0.0 => Some("s3 needs a positive alignment weight gamma"),
            _ => None,
        };
        match problem {
            Some(p) => Err(Error::Config(p.into())),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunPaths {
    pub corpus: PathBuf,
    pub bank: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for RunPaths {
    fn default() -> Self {
        Self {
            corpus: "corpus".into(),
            bank: None,
            out: "run".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub variant: Variant,
    /// Epochs over the full training set.
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_norm: f64,
    /// Optional first stage restricted to clips shorter than this.
    pub curriculum_max_seconds: Option<f64>,
    pub curriculum_epochs: usize,
    pub valid_fraction: f64,
    /// Seeds model initialization and batch order.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::S3,
            epochs: 40,
            batch_size: 8,
            lr: 1e-3,
            clip_norm: 5.0,
            curriculum_max_seconds: None,
            curriculum_epochs: 1,
            valid_fraction: 0.2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub paths: RunPaths,
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Sets the variant and zeroes the alignment weight for S1 and S2.
    pub fn set_variant(&mut self, variant: Variant) {
        self.train.variant = variant;
        if variant != Variant::S3 {
            self.weights.gamma = 0.0;
        }
    }

    /// Checks every variant and range constraint that does not depend on data.
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.train.variant.check(self.paths.bank.is_some(), self.weights.gamma)?;
        let t = &self.train;
        if t.epochs == 0 || t.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(t.lr > 0.0 && t.clip_norm > 0.0) {
            return Err(Error::Config("lr and clip_norm must be positive".into()));
        }
        if !(0.0..1.0).contains(&t.valid_fraction) {
            return Err(Error::Config("valid_fraction must be in [0, 1)".into()));
        }
        if let Some(s) = t.curriculum_max_seconds {
            if s.is_nan() || s <= 0.0 {
                return Err(Error::Config("curriculum_max_seconds must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
}

/// One loss-curve record. `l_align` is NaN when the model has no unit bank.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub split: Split,
    pub l_ctc: f64,
    pub l_att: f64,
    pub l_align: f64,
    pub l_total: f64,
}

/// CSV sink writing the header `step,split,l_ctc,l_att,l_align,l_total`,
/// flushing after every row.
pub struct MetricsWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(out: W) -> Self {
        Self {
            inner: csv::Writer::from_writer(out),
        }
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        self.inner.serialize(row)?;
        self.inner.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

pub fn read_metrics<R: std::io::Read>(input: R) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_reader(input);
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// An utterance ready for training: features, transcript and alignment targets.
#[derive(Clone, Debug)]
pub struct Example {
    pub id: String,
    pub video: Tensor,
    pub transcript: Transcript,
    pub targets: Option<AlignTarget>,
}

/// Quantizes each utterance's audio against `centroids` and derives its
/// per-frame alignment targets.
pub fn prepare_examples(utts: &[&Utterance], centroids: Option<&Tensor>) -> Result<Vec<Example>> {
    utts.par_iter()
        .map(|u| {
            let targets = match centroids {
                Some(c) => Some(align_targets(u.frames(), &assign(&u.audio, c)?)?),
                None => None,
            };
            Ok(Example {
                id: u.id.clone(),
                video: u.video.clone(),
                transcript: u.transcript.clone(),
                targets,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default)]
struct LossValues {
    ctc: f64,
    att: f64,
    align: f64,
    total: f64,
}

impl LossValues {
    fn mean(items: &[LossValues]) -> Self {
        let n = items.len() as f64;
        let sum = |f: fn(&LossValues) -> f64| items.iter().map(f).sum::<f64>() / n;
        Self {
            ctc: sum(|l| l.ctc),
            att: sum(|l| l.att),
            align: sum(|l| l.align),
            total: sum(|l| l.total),
        }
    }

    fn row(&self, step: u64, split: Split) -> MetricsRow {
        MetricsRow {
            step,
            split,
            l_ctc: self.ctc,
            l_att: self.att,
            l_align: self.align,
            l_total: self.total,
        }
    }

    fn is_finite(&self) -> bool {
        self.ctc.is_finite() && self.att.is_finite() && self.total.is_finite()
    }
}

fn forward_values(model: &Model, ex: &Example, weights: &LossWeights, with_grad: bool) -> Result<(LossValues, Vec<Tensor>)> {
    let mut g = Graph::new();
    let vars = if with_grad {
        model.params().bind(&mut g)
    } else {
        model.params().bind_frozen(&mut g)
    };
    let terms = model.losses(&mut g, &vars, &ex.video, &ex.transcript, ex.targets.as_ref(), weights)?;
    let values = LossValues {
        ctc: g.value(terms.ctc).item(),
        att: g.value(terms.att).item(),
        align: terms.align.map_or(f64::NAN, |a| g.value(a).item()),
        total: g.value(terms.total).item(),
    };
    if !with_grad || !values.total.is_finite() {
        return Ok((values, Vec::new()));
    }
    g.backward(terms.total)?;
    Ok((values, model.params().gradients(&g, &vars)))
}

/// Mean losses over `examples` without updating anything.
pub fn evaluate_losses(model: &Model, examples: &[Example], weights: &LossWeights) -> Result<MetricsRow> {
    let values: Vec<LossValues> = examples
        .par_iter()
        .map(|ex| forward_values(model, ex, weights, false).map(|v| v.0))
        .collect::<Result<_>>()?;
    Ok(LossValues::mean(&values).row(0, Split::Valid))
}

/// Mutable state of a run: the model, optimizer and step counter.
pub struct Trainer {
    pub model: Model,
    pub weights: LossWeights,
    pub variant: Variant,
    optimizer: Adam,
    clip_norm: f64,
    step: u64,
}

impl Trainer {
    pub fn new(model: Model, weights: LossWeights, variant: Variant, adam: AdamConfig, clip_norm: f64) -> Result<Self> {
        weights.validate()?;
        variant.check(model.has_cross_attention(), weights.gamma)?;
        let optimizer = Adam::new(adam, model.params().tensors());
        Ok(Self {
            model,
            weights,
            variant,
            optimizer,
            clip_norm,
            step: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One optimizer update on the mean loss of `batch`. Per-utterance
    /// forward/backward passes run in parallel; gradients are summed in
    /// batch order.
    pub fn train_step(&mut self, batch: &[&Example]) -> Result<MetricsRow> {
        let results: Vec<(LossValues, Vec<Tensor>)> = batch
            .par_iter()
            .map(|ex| forward_values(&self.model, ex, &self.weights, true))
            .collect::<Result<_>>()?;
        let step = self.step + 1;
        for (v, _) in &results {
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    l_ctc: v.ctc,
                    l_att: v.att,
                    l_align: v.align,
                    l_total: v.total,
                });
            }
        }
        let scale = 1.0 / batch.len() as f64;
        let mut grads: Vec<Tensor> = results[0].1.clone();
        for (_, g) in &results[1..] {
            for (acc, gi) in grads.iter_mut().zip(g) {
                for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                    *a += b;
                }
            }
        }
        for g in &mut grads {
            g.data_mut().iter_mut().for_each(|x| *x *= scale);
        }
        clip_grad_norm(&mut grads, self.clip_norm);
        self.optimizer.step(self.model.params_mut().tensors_mut(), &grads)?;
        self.step = step;
        let values: Vec<LossValues> = results.into_iter().map(|r| r.0).collect();
        Ok(LossValues::mean(&values).row(step, Split::Train))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            header: CheckpointHeader {
                variant: self.variant,
                config: self.model.config().clone(),
                weights: self.weights,
                step: self.step,
            },
            model: self.model.clone(),
        }
    }
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub rows: Vec<MetricsRow>,
    /// Number of training steps taken in each epoch, in order (curriculum epochs first).
    pub steps_per_epoch: Vec<usize>,
}

/// Full training run: an optional curriculum stage on short clips, then
/// `epochs` passes over the whole training set. After every step a train row
/// is emitted and after every epoch a valid row (when `valid` is non-empty).
pub fn train(
    cfg: &RunConfig,
    train_set: &[Utterance],
    valid_set: &[Utterance],
    bank: Option<&AudioUnitBank>,
    on_row: &mut dyn FnMut(&MetricsRow) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.weights.validate()?;
    cfg.train.variant.check(bank.is_some(), cfg.weights.gamma)?;
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let tc = &cfg.train;
    let mut model_cfg = cfg.model.clone();
    model_cfg.seed = tc.seed;
    let d_video = train_set[0].video.cols();
    if model_cfg.d_video == 0 {
        model_cfg.d_video = d_video;
    }
    if model_cfg.vocab_size == 0 {
        let max_token = train_set
            .iter()
            .chain(valid_set)
            .flat_map(|u| u.transcript.tokens.iter().copied())
            .max()
            .unwrap_or(0);
        model_cfg.vocab_size = max_token + 1;
    }
    let model = Model::new(model_cfg, bank)?;
    let mut trainer = Trainer::new(
        model,
        cfg.weights,
        tc.variant,
        AdamConfig {
            lr: tc.lr,
            ..Default::default()
        },
        tc.clip_norm,
    )?;

    let centroids = bank.map(|b| &b.centroids);
    let all: Vec<&Utterance> = train_set.iter().collect();
    let full = prepare_examples(&all, centroids)?;
    let valid = prepare_examples(&valid_set.iter().collect::<Vec<_>>(), centroids)?;

    let mut stages: Vec<(Vec<&Example>, usize)> = Vec::new();
    if let Some(max_s) = tc.curriculum_max_seconds {
        let short_ids: std::collections::HashSet<&str> =
            filter_by_duration(train_set, max_s).iter().map(|u| u.id.as_str()).collect();
        let short: Vec<&Example> = full.iter().filter(|e| short_ids.contains(e.id.as_str())).collect();
        if !short.is_empty() && tc.curriculum_epochs > 0 {
            stages.push((short, tc.curriculum_epochs));
        }
    }
    stages.push((full.iter().collect(), tc.epochs));

    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed.wrapping_add(0x5eed));
    let mut rows = Vec::new();
    let mut steps_per_epoch = Vec::new();
    for (mut pool, epochs) in stages {
        for _ in 0..epochs {
            pool.shuffle(&mut rng);
            let mut steps = 0;
            for batch in pool.chunks(tc.batch_size) {
                let row = trainer.train_step(batch)?;
                on_row(&row)?;
                rows.push(row);
                steps += 1;
            }
            steps_per_epoch.push(steps);
            if !valid.is_empty() {
                let mut row = evaluate_losses(&trainer.model, &valid, &trainer.weights)?;
                row.step = trainer.step_count();
                on_row(&row)?;
                rows.push(row);
            }
        }
    }
    Ok(TrainOutcome {
        checkpoint: trainer.checkpoint(),
        rows,
        steps_per_epoch,
    })
}

/// Per-epoch means of the train-split rows of a run.
pub fn epoch_means(rows: &[MetricsRow], steps_per_epoch: &[usize], field: fn(&MetricsRow) -> f64) -> Vec<f64> {
    let train: Vec<&MetricsRow> = rows.iter().filter(|r| r.split == Split::Train).collect();
    let mut out = Vec::with_capacity(steps_per_epoch.len());
    let mut start = 0;
    for &n in steps_per_epoch {
        let chunk = &train[start..start + n];
        out.push(chunk.iter().map(|r| field(r)).sum::<f64>() / n as f64);
        start += n;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_corpus, GeneratorConfig};
    use crate::quantizer::{init_unit_bank, kmeans_fit};

    #[test]
    fn variant_rules() {
        assert!(Variant::S1.check(false, 0.0).is_ok());
        assert!(Variant::S1.check(true, 0.0).is_err());
        assert!(Variant::S1.check(false, 1.0).is_err());
        assert!(Variant::S2.check(true, 0.0).is_ok());
        assert!(Variant::S2.check(false, 0.0).is_err());
        assert!(Variant::S2.check(true, 6.5).is_err());
        assert!(Variant::S3.check(true, 6.5).is_ok());
        assert!(Variant::S3.check(true, 0.0).is_err());
        assert_eq!("S2".parse::<Variant>().unwrap(), Variant::S2);
        assert!("s4".parse::<Variant>().is_err());
    }

    #[test]
    fn run_config_validation() {
        let mut cfg = RunConfig::default();
        cfg.paths.bank = Some("bank.bin".into());
        assert!(cfg.validate().is_ok());
        cfg.set_variant(Variant::S2);
        assert_eq!(cfg.weights.gamma, 0.0);
        assert!(cfg.validate().is_ok());
        cfg.set_variant(Variant::S1);
        assert!(cfg.validate().is_err());
        cfg.paths.bank = None;
        assert!(cfg.validate().is_ok());
        cfg.train.batch_size = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn metrics_round_trip_including_nan() {
        let rows = vec![
            MetricsRow { step: 1, split: Split::Train, l_ctc: 1.25, l_att: 0.1 + 0.2, l_align: f64::NAN, l_total: 3.0 },
            MetricsRow { step: 1, split: Split::Valid, l_ctc: 1e-300, l_att: 2.0, l_align: 7.5, l_total: 9.0 },
        ];
        let mut buf = Vec::new();
        {
            let mut w = MetricsWriter::new(&mut buf);
            for r in &rows {
                w.write(r).unwrap();
            }
        }
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("step,split,l_ctc,l_att,l_align,l_total\n"));
        let back = read_metrics(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        assert!(back[0].l_align.is_nan());
        assert_eq!(back[0].l_att, rows[0].l_att);
        assert_eq!(back[1], rows[1]);
    }

    fn tiny_run(variant: Variant, epochs: usize) -> (RunConfig, Vec<Utterance>, Option<AudioUnitBank>) {
        let gen = GeneratorConfig {
            n_utterances: 12,
            min_frames: 4,
            max_frames: 8,
            latent_units: 4,
            symbols: 4,
            ..Default::default()
        };
        let utts = generate_corpus(&gen).unwrap();
        let mut cfg = RunConfig::default();
        cfg.model = ModelConfig {
            d_model: 8,
            encoder_layers: 1,
            decoder_layers: 1,
            heads: 2,
            ff_width: 8,
            ..Default::default()
        };
        cfg.train.epochs = epochs;
        cfg.train.batch_size = 4;
        cfg.set_variant(variant);
        let bank = variant.uses_bank().then(|| {
            let frames: Vec<f64> = utts.iter().flat_map(|u| u.audio.data().to_vec()).collect();
            let frames = Tensor::matrix(frames.len() / gen.d_audio, gen.d_audio, frames).unwrap();
            let fit = kmeans_fit(&frames, 4, 20, 0).unwrap();
            init_unit_bank(&fit.centroids, 8, 0).unwrap()
        });
        (cfg, utts, bank)
    }

    #[test]
    fn runs_are_deterministic_and_rows_ordered() {
        let (cfg, utts, bank) = tiny_run(Variant::S3, 2);
        let (tr, va) = crate::data::split_corpus(&utts, 0.25);
        let a = train(&cfg, tr, va, bank.as_ref(), &mut |_| Ok(())).unwrap();
        let b = train(&cfg, tr, va, bank.as_ref(), &mut |_| Ok(())).unwrap();
        assert_eq!(a.rows, b.rows);
        assert_eq!(a.steps_per_epoch, vec![3, 3]);
        let train_steps: Vec<u64> = a.rows.iter().filter(|r| r.split == Split::Train).map(|r| r.step).collect();
        assert_eq!(train_steps, (1..=6).collect::<Vec<_>>());
        let valid_steps: Vec<u64> = a.rows.iter().filter(|r| r.split == Split::Valid).map(|r| r.step).collect();
        assert_eq!(valid_steps, vec![3, 6]);
        assert!(a.rows.iter().all(|r| r.l_align.is_finite()));
    }

    #[test]
    fn s1_logs_nan_alignment_and_rejects_bank() {
        let (cfg, utts, _) = tiny_run(Variant::S1, 1);
        let out = train(&cfg, &utts, &[], None, &mut |_| Ok(())).unwrap();
        assert!(out.rows.iter().all(|r| r.l_align.is_nan() && r.l_total.is_finite()));
        let (_, _, bank) = tiny_run(Variant::S2, 1);
        assert!(train(&cfg, &utts, &[], bank.as_ref(), &mut |_| Ok(())).is_err());
    }

    #[test]
    fn curriculum_stage_runs_first_on_short_clips() {
        let (mut cfg, utts, bank) = tiny_run(Variant::S2, 1);
        let short = utts.iter().filter(|u| u.frames() < 6).count();
        cfg.train.curriculum_max_seconds = Some(6.0 / crate::data::FRAME_RATE);
        cfg.train.curriculum_epochs = 1;
        let out = train(&cfg, &utts, &[], bank.as_ref(), &mut |_| Ok(())).unwrap();
        assert_eq!(out.steps_per_epoch, vec![short.div_ceil(4), 3]);
    }

    #[test]
    fn epoch_means_group_train_rows() {
        let mk = |step, split, v| MetricsRow { step, split, l_ctc: v, l_att: v, l_align: v, l_total: v };
        let rows = vec![mk(1, Split::Train, 1.0), mk(2, Split::Train, 3.0), mk(2, Split::Valid, 100.0), mk(3, Split::Train, 5.0)];
        assert_eq!(epoch_means(&rows, &[2, 1], |r| r.l_align), vec![2.0, 5.0]);
    }
}
