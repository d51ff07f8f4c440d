//! Audio unit bank: K-means quantization of audio features and the trainable
//! key/value embeddings attached to each unit.
//!
//! Features are clustered as given; no per-frame normalization is applied
//! before fitting.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::binio;
use crate::error::{Error, IoContext, Result};
use crate::tensor::Tensor;

/// Result of [`kmeans_fit`].
#[derive(Clone, Debug)]
pub struct KMeansFit {
    pub centroids: Tensor,
    /// Total squared distance after each assignment pass. The last entry is
    /// the distortion of `centroids`.
    pub distortion_history: Vec<f64>,
    pub converged: bool,
}

impl KMeansFit {
    pub fn distortion(&self) -> f64 {
        *self.distortion_history.last().expect("at least one pass")
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid by squared Euclidean distance, lowest index on ties.
fn nearest(point: &[f64], centroids: &Tensor) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for j in 0..centroids.rows() {
        let d = sq_dist(point, centroids.row(j));
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn assign_all(features: &Tensor, centroids: &Tensor) -> Vec<(usize, f64)> {
    let d = features.cols();
    features
        .data()
        .par_chunks(d)
        .map(|p| nearest(p, centroids))
        .collect()
}

fn check_matrix(what: &str, t: &Tensor) -> Result<()> {
    if t.rank() != 2 {
        return Err(Error::InvalidArgument(format!(
            "{what} must be a matrix, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

fn kmeans_plus_plus(features: &Tensor, k: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let n = features.rows();
    let d = features.cols();
    let mut chosen = Vec::with_capacity(k);
    chosen.push(rng.random_range(0..n));
    let mut d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(features.row(i), features.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc > u {
                    pick = Some(i);
                    break;
                }
            }
            // Rounding can leave `acc` just below `u`; fall back to the last
            // point with positive weight.
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).expect("total > 0"))
        } else {
            rng.random_range(0..n)
        };
        chosen.push(next);
        for (i, slot) in d2.iter_mut().enumerate() {
            *slot = slot.min(sq_dist(features.row(i), features.row(next)));
        }
    }
    let mut data = Vec::with_capacity(k * d);
    for &i in &chosen {
        data.extend_from_slice(features.row(i));
    }
    Tensor::from_parts(vec![k, d], data)
}

/// Lloyd's algorithm with seeded k-means++ initialization.
///
/// Empty clusters are re-seeded to the point farthest from its centroid.
pub fn kmeans_fit(features: &Tensor, k: usize, max_iters: usize, seed: u64) -> Result<KMeansFit> {
    check_matrix("features", features)?;
    if k == 0 || max_iters == 0 {
        return Err(Error::InvalidArgument("K and max_iters must be at least 1".into()));
    }
    let n = features.rows();
    if n < k {
        return Err(Error::TooFewPoints { points: n, k });
    }
    let d = features.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_plus_plus(features, k, &mut rng);
    let mut history = Vec::new();
    let mut previous: Option<Vec<usize>> = None;
    let mut converged = false;

    for _ in 0..max_iters {
        let assigned = assign_all(features, &centroids);
        history.push(assigned.iter().map(|a| a.1).sum());
        let labels: Vec<usize> = assigned.iter().map(|a| a.0).collect();
        if previous.as_ref() == Some(&labels) {
            converged = true;
            break;
        }

        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (i, &c) in labels.iter().enumerate() {
            counts[c] += 1;
            for (s, x) in sums[c * d..(c + 1) * d].iter_mut().zip(features.row(i)) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, s) in centroids.row_mut(c).iter_mut().zip(&sums[c * d..(c + 1) * d]) {
                    *dst = s * inv;
                }
            }
        }
        if counts.contains(&0) {
            let mut dist: Vec<f64> = labels
                .iter()
                .enumerate()
                .map(|(i, &c)| sq_dist(features.row(i), centroids.row(c)))
                .collect();
            for c in (0..k).filter(|&c| counts[c] == 0) {
                let far = dist
                    .iter()
                    .enumerate()
                    .fold(0, |best, (i, &v)| if v > dist[best] { i } else { best });
                centroids.row_mut(c).copy_from_slice(features.row(far));
                dist[far] = 0.0;
            }
        }
        previous = Some(labels);
    }
    if !converged {
        history.push(assign_all(features, &centroids).iter().map(|a| a.1).sum());
    }
    Ok(KMeansFit {
        centroids,
        distortion_history: history,
        converged,
    })
}

/// Per-frame unit ids of an audio feature sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnitSequence {
    ids: Vec<usize>,
}

impl UnitSequence {
    pub fn new(ids: Vec<usize>) -> Self {
        Self { ids }
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// CSV with header `frame_index,unit_id`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["frame_index", "unit_id"])?;
        for (i, id) in self.ids.iter().enumerate() {
            w.write_record([i.to_string(), id.to_string()])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Maps each feature row to its nearest centroid (lowest index on ties).
pub fn assign(features: &Tensor, centroids: &Tensor) -> Result<UnitSequence> {
    check_matrix("features", features)?;
    check_matrix("centroids", centroids)?;
    if features.cols() != centroids.cols() {
        return Err(Error::LengthMismatch {
            what: "feature dimension vs centroid dimension",
            expected: centroids.cols(),
            actual: features.cols(),
        });
    }
    Ok(UnitSequence::new(
        assign_all(features, centroids).into_iter().map(|a| a.0).collect(),
    ))
}

/// K audio-space centroids plus their trainable key/value embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioUnitBank {
    pub centroids: Tensor,
    pub key_embed: Tensor,
    pub value_embed: Tensor,
    pub seed: u64,
}

const BANK_MAGIC: &[u8; 8] = b"AVUBANK1";

impl AudioUnitBank {
    pub fn num_units(&self) -> usize {
        self.centroids.rows()
    }

    pub fn d_audio(&self) -> usize {
        self.centroids.cols()
    }

    pub fn d_model(&self) -> usize {
        self.key_embed.cols()
    }

    /// Writes the bank as `AVUBANK1`, then K, d_a, d_model and seed as u64,
    /// then the centroid, key and value matrices as row-major f64, all
    /// little-endian.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).at(path)?;
        let mut w = BufWriter::new(file);
        (|| {
            w.write_all(BANK_MAGIC)?;
            for v in [self.num_units(), self.d_audio(), self.d_model()] {
                binio::write_u64(&mut w, v as u64)?;
            }
            binio::write_u64(&mut w, self.seed)?;
            binio::write_f64s(&mut w, self.centroids.data())?;
            binio::write_f64s(&mut w, self.key_embed.data())?;
            binio::write_f64s(&mut w, self.value_embed.data())?;
            w.flush()
        })()
        .at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).at(path)?;
        let mut r = BufReader::new(file);
        let bad = |detail: &str| Error::Format {
            path: path.to_path_buf(),
            detail: detail.to_string(),
        };
        if &binio::read_magic(&mut r).at(path)? != BANK_MAGIC {
            return Err(bad("not an audio unit bank file"));
        }
        let mut dims = [0usize; 3];
        for d in &mut dims {
            *d = binio::read_u64(&mut r).at(path)? as usize;
        }
        let [k, d_a, d_model] = dims;
        if k == 0 || d_a == 0 || d_model == 0 {
            return Err(bad("zero dimension in header"));
        }
        let seed = binio::read_u64(&mut r).at(path)?;
        let mut read = |rows, cols| -> Result<Tensor> {
            let data = binio::read_f64s(&mut r, rows * cols).map_err(|_| bad("truncated matrix data"))?;
            Ok(Tensor::matrix(rows, cols, data)?)
        };
        Ok(Self {
            centroids: read(k, d_a)?,
            key_embed: read(k, d_model)?,
            value_embed: read(k, d_model)?,
            seed,
        })
    }
}

/// Embeddings start as the centroids pushed through a seeded Gaussian
/// projection from audio space to model space. Projection entries have
/// variance 1/(d_a·d_model), so a unit-scale centroid maps to a row of
/// roughly unit norm and the initial attention over the bank is close to
/// uniform.
pub fn init_unit_bank(centroids: &Tensor, d_model: usize, seed: u64) -> Result<AudioUnitBank> {
    check_matrix("centroids", centroids)?;
    if d_model == 0 {
        return Err(Error::InvalidArgument("d_model must be at least 1".into()));
    }
    let d_a = centroids.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let projection = Tensor::randn(&[d_a, d_model], (1.0 / (d_a * d_model) as f64).sqrt(), &mut rng);
    let mut bank = init_unit_bank_with_projection(centroids, &projection)?;
    bank.seed = seed;
    Ok(bank)
}

/// [`init_unit_bank`] with an explicit `d_a × d_model` projection.
pub fn init_unit_bank_with_projection(centroids: &Tensor, projection: &Tensor) -> Result<AudioUnitBank> {
    let embed = centroids.matmul(projection)?;
    Ok(AudioUnitBank {
        centroids: centroids.clone(),
        key_embed: embed.clone(),
        value_embed: embed,
        seed: 0,
    })
}
