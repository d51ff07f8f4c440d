//! Oracles and fixtures shared by the integration tests and the acceptance
//! harness. Everything here is computed independently of the code under test
//! wherever that is possible.
#![allow(dead_code)]

use avalign::alignment::{align_loss, align_targets, cross_modal_attention, AlignTarget};
use avalign::model::{ctc_brute_force, ctc_loss, LossWeights, Model, ModelConfig, Transcript, BLANK};
use avalign::quantizer::{init_unit_bank, UnitSequence};
use avalign::tensor::{grad_check_many, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type TResult<T> = avalign::tensor::Result<T>;
pub type Objective = Box<dyn Fn(&mut Graph, &[Var]) -> TResult<Var>>;

pub const GRAD_EPS: f64 = 1e-6;

/// Contracts `y` with a fixed pseudo-random weight tensor so every output
/// coordinate contributes to the scalar being checked.
pub fn contract(g: &mut Graph, y: Var) -> TResult<Var> {
    let shape = g.shape(y).to_vec();
    let w = Tensor::randn(&shape, 1.0, &mut ChaCha8Rng::seed_from_u64(0xC0FFEE));
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    /// Inputs are drawn from [0.5, 2.5) instead of N(0, 1).
    pub positive: bool,
    pub f: Objective,
}

impl OpCase {
    fn new(name: &'static str, shapes: &[&[usize]], f: impl Fn(&mut Graph, &[Var]) -> TResult<Var> + 'static) -> Self {
        Self {
            name,
            shapes: shapes.iter().map(|s| s.to_vec()).collect(),
            positive: false,
            f: Box::new(f),
        }
    }

    fn positive(mut self) -> Self {
        self.positive = true;
        self
    }

    pub fn point(&self, seed: u64) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.shapes
            .iter()
            .map(|s| {
                if self.positive {
                    let n = s.iter().product();
                    Tensor::new(s.clone(), (0..n).map(|_| rng.random_range(0.5..2.5)).collect()).unwrap()
                } else {
                    Tensor::randn(s, 1.0, &mut rng)
                }
            })
            .collect()
    }

    /// Worst relative error over `seeds`.
    pub fn check(&self, seeds: std::ops::Range<u64>) -> f64 {
        seeds
            .map(|s| grad_check_many(&self.f, &self.point(s), GRAD_EPS).unwrap())
            .fold(0.0, f64::max)
    }
}

fn align_fixture() -> AlignTarget {
    AlignTarget::new(vec![[0, 0, 1], [1, 2, 2], [3, 3, 3], [4, 0, 2]])
}

/// Every differentiable graph operation, each wrapped into a scalar objective.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase::new("add", &[&[3, 4], &[3, 4]], |g, v| {
            let y = g.add(v[0], v[1])?;
            contract(g, y)
        }),
        OpCase::new("sub", &[&[3, 4], &[3, 4]], |g, v| {
            let y = g.sub(v[0], v[1])?;
            contract(g, y)
        }),
        OpCase::new("mul", &[&[3, 4], &[3, 4]], |g, v| {
            let y = g.mul(v[0], v[1])?;
            contract(g, y)
        }),
        OpCase::new("add_row", &[&[3, 4], &[4]], |g, v| {
            let y = g.add_row(v[0], v[1])?;
            contract(g, y)
        }),
        OpCase::new("scale", &[&[5]], |g, v| {
            let y = g.scale(v[0], -1.7)?;
            contract(g, y)
        }),
        OpCase::new("matmul", &[&[3, 4], &[4, 2]], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            contract(g, y)
        }),
        OpCase::new("transpose", &[&[3, 4]], |g, v| {
            let y = g.transpose(v[0])?;
            contract(g, y)
        }),
        OpCase::new("concat_rows", &[&[2, 3], &[1, 3]], |g, v| {
            let y = g.concat(&[v[0], v[1], v[0]], 0)?;
            contract(g, y)
        }),
        OpCase::new("concat_cols", &[&[2, 3], &[2, 2]], |g, v| {
            let y = g.concat(&[v[0], v[1]], 1)?;
            contract(g, y)
        }),
        OpCase::new("slice", &[&[4, 5]], |g, v| {
            let a = g.slice(v[0], 1, 1, 4)?;
            let y = g.slice(a, 0, 2, 4)?;
            contract(g, y)
        }),
        OpCase::new("rows", &[&[4, 3]], |g, v| {
            let y = g.rows(v[0], &[2, 0, 2, 3])?;
            contract(g, y)
        }),
        OpCase::new("pick", &[&[3, 3]], |g, v| {
            let y = g.pick(v[0], &[0, 4, 4, 8, 2])?;
            contract(g, y)
        }),
        OpCase::new("softmax_rows", &[&[3, 5]], |g, v| {
            let y = g.softmax(v[0], 1)?;
            contract(g, y)
        }),
        OpCase::new("softmax_cols", &[&[3, 5]], |g, v| {
            let y = g.softmax(v[0], 0)?;
            contract(g, y)
        }),
        OpCase::new("log_softmax", &[&[3, 5]], |g, v| {
            let y = g.log_softmax(v[0], 1)?;
            contract(g, y)
        }),
        OpCase::new("layer_norm", &[&[3, 6], &[6], &[6]], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2])?;
            contract(g, y)
        }),
        OpCase::new("gelu", &[&[12]], |g, v| {
            let y = g.gelu(v[0])?;
            contract(g, y)
        }),
        OpCase::new("ln", &[&[6]], |g, v| {
            let y = g.ln(v[0])?;
            contract(g, y)
        })
        .positive(),
        OpCase::new("sum", &[&[2, 3]], |g, v| g.sum(v[0])),
        OpCase::new("mean", &[&[2, 3]], |g, v| {
            let y = g.mul(v[0], v[0])?;
            g.mean(y)
        }),
        OpCase::new("ctc_loss", &[&[6, 4]], |g, v| {
            let lp = g.log_softmax(v[0], 1)?;
            Ok(ctc_loss(g, lp, &[1, 2, 2], BLANK).expect("feasible target"))
        }),
        OpCase::new("ctc_loss_raw_scores", &[&[5, 3]], |g, v| {
            Ok(ctc_loss(g, v[0], &[2, 1], BLANK).expect("feasible target"))
        }),
        OpCase::new("align_loss", &[&[4, 5]], |g, v| {
            let p = g.softmax(v[0], 1)?;
            Ok(align_loss(g, p, &align_fixture()).expect("valid targets"))
        }),
        OpCase::new("cross_modal_attention", &[&[3, 4], &[5, 4], &[5, 4]], |g, v| {
            let map = cross_modal_attention(g, v[0], v[1], v[2]).expect("matching widths");
            let out = contract(g, map.output)?;
            let s = contract(g, map.scores)?;
            g.add(out, s)
        }),
    ]
}

/// A tiny S3 model with a fixed utterance, used for whole-objective checks.
pub struct TinyS3 {
    pub model: Model,
    pub video: Tensor,
    pub transcript: Transcript,
    pub targets: AlignTarget,
    pub weights: LossWeights,
}

pub fn tiny_s3(seed: u64) -> TinyS3 {
    let (d_model, k, t, d_video, d_audio) = (16, 8, 6, 4, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centroids = Tensor::randn(&[k, d_audio], 1.0, &mut rng);
    // Larger embeddings than the default so the attention map is far from
    // uniform and every term has a sizeable gradient.
    let mut bank = init_unit_bank(&centroids, d_model, seed).unwrap();
    bank.key_embed = Tensor::randn(&[k, d_model], 1.0, &mut rng);
    bank.value_embed = Tensor::randn(&[k, d_model], 1.0, &mut rng);
    let config = ModelConfig {
        d_model,
        encoder_layers: 1,
        decoder_layers: 1,
        heads: 2,
        ff_width: 32,
        d_video,
        vocab_size: 6,
        seed,
    };
    let model = Model::new(config, Some(&bank)).unwrap();
    let video = Tensor::randn(&[t, d_video], 1.0, &mut rng);
    let units = UnitSequence::new((0..2 * t - 1).map(|_| rng.random_range(0..k)).collect());
    TinyS3 {
        model,
        video,
        transcript: Transcript::from_tokens(vec![2, 4, 4, 3]),
        targets: align_targets(t, &units).unwrap(),
        weights: LossWeights::LRS2,
    }
}

/// Worst relative gradient error of the full hybrid objective over every
/// model parameter.
pub fn hybrid_grad_check(fixture: &TinyS3) -> f64 {
    let f = |g: &mut Graph, vars: &[Var]| -> TResult<Var> {
        let terms = fixture
            .model
            .losses(g, vars, &fixture.video, &fixture.transcript, Some(&fixture.targets), &fixture.weights)
            .expect("valid utterance");
        assert!(terms.align.is_some());
        Ok(terms.total)
    };
    grad_check_many(f, fixture.model.params().tensors(), GRAD_EPS).unwrap()
}

/// Random row-normalized log-probability table.
pub fn random_log_probs(t: usize, v: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut data = Vec::with_capacity(t * v);
    for _ in 0..t {
        let w: Vec<f64> = (0..v).map(|_| rng.random_range(0.05..1.0)).collect();
        let z: f64 = w.iter().sum();
        data.extend(w.iter().map(|x| (x / z).ln()));
    }
    Tensor::matrix(t, v, data).unwrap()
}

/// Every label sequence of length `0..=max_len` over symbols `1..v`.
pub fn all_targets(v: usize, max_len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for prefix in &frontier {
            for s in 1..v {
                let mut p: Vec<usize> = prefix.clone();
                p.push(s);
                next.push(p);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

pub struct CtcGridReport {
    pub comparisons: usize,
    pub infeasible: usize,
    pub max_abs_diff: f64,
}

/// Compares the forward-algorithm loss against path enumeration over
/// T in 1..=5, V in 1..=3, targets of length ≤ 3, `tables` random tables each.
pub fn ctc_grid(tables: u64) -> CtcGridReport {
    let mut report = CtcGridReport {
        comparisons: 0,
        infeasible: 0,
        max_abs_diff: 0.0,
    };
    for t in 1..=5 {
        for v in 1..=3 {
            for seed in 0..tables {
                let mut rng = ChaCha8Rng::seed_from_u64(seed * 1000 + (t * 10 + v) as u64);
                let lp = random_log_probs(t, v, &mut rng);
                for target in all_targets(v, 3) {
                    let mut g = Graph::new();
                    let x = g.constant(lp.clone());
                    let loss = ctc_loss(&mut g, x, &target, BLANK).unwrap();
                    let fast = g.value(loss).item();
                    let slow = ctc_brute_force(&lp, &target, BLANK).unwrap();
                    report.comparisons += 1;
                    if slow.is_infinite() || fast.is_infinite() {
                        report.infeasible += 1;
                        if fast != slow {
                            report.max_abs_diff = f64::INFINITY;
                        }
                    } else {
                        report.max_abs_diff = report.max_abs_diff.max((fast - slow).abs());
                    }
                }
            }
        }
    }
    report
}

/// Row softmax computed directly, independent of the graph.
pub fn softmax_rows(logits: &[Vec<f64>]) -> Vec<Vec<f64>> {
    logits
        .iter()
        .map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            e.iter().map(|x| x / z).collect()
        })
        .collect()
}

/// Cross-entropy against a multiplicity-counting indicator vector, averaged
/// over frames.
pub fn indicator_align_loss(scores: &[Vec<f64>], triples: &[[usize; 3]]) -> f64 {
    let k = scores[0].len();
    let total: f64 = scores
        .iter()
        .zip(triples)
        .map(|(p, tr)| {
            let mut indicator = vec![0.0; k];
            for &u in tr {
                indicator[u] += 1.0;
            }
            (0..k).map(|j| if indicator[j] > 0.0 { -indicator[j] * p[j].ln() } else { 0.0 }).sum::<f64>()
        })
        .sum();
    total / scores.len() as f64
}

pub fn graph_align_loss(scores: &[Vec<f64>], triples: &[[usize; 3]]) -> f64 {
    let mut g = Graph::new();
    let p = g.constant(Tensor::from_rows(scores).unwrap());
    let loss = align_loss(&mut g, p, &AlignTarget::new(triples.to_vec())).unwrap();
    g.value(loss).item()
}

/// Lowest value the per-frame alignment loss can take for a triple: the
/// attention row matching the triple's empirical unit frequencies.
pub fn align_frame_floor(triple: &[usize; 3]) -> f64 {
    let mut counts: Vec<(usize, f64)> = Vec::new();
    for &u in triple {
        match counts.iter_mut().find(|(v, _)| *v == u) {
            Some((_, c)) => *c += 1.0,
            None => counts.push((u, 1.0)),
        }
    }
    counts.iter().map(|&(_, c)| -c * (c / 3.0).ln()).sum()
}

pub fn align_floor(targets: &AlignTarget) -> f64 {
    targets.triples().iter().map(align_frame_floor).sum::<f64>() / targets.len() as f64
}

/// 1-indexed audio positions for video frame `i` (1-indexed) of `t`, clamped.
pub fn clamped_positions(t: usize, i: usize) -> [usize; 3] {
    let clamp = |p: isize| p.clamp(1, (2 * t - 1) as isize) as usize;
    let i = i as isize;
    [clamp(2 * i - 2), clamp(2 * i - 1), clamp(2 * i)]
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}
