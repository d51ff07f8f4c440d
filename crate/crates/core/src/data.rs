//! Synthetic paired audio/video corpus, manifest I/O and curriculum filtering.
//!
//! Each utterance is driven by a latent unit sequence of length `2T-1` drawn
//! from a sticky Markov chain. Audio frame `j` is the centroid of latent unit
//! `j` plus noise. Video frame `i` is a fixed random linear map of the mean
//! centroid over the same three (clamped) audio positions the alignment loss
//! uses, plus noise, so the audio units are genuinely informative about the
//! video. The transcript is the latent sequence mapped to symbols with
//! repeats collapsed.
//!
//! # On-disk layout
//!
//! A corpus directory holds `manifest.jsonl` (one JSON record per line:
//! `id`, `frames`, `d_video`, `d_audio`, `tokens`, `text`, `video`, `audio`,
//! optional `latent`), `corpus.json` (vocabulary size and generator
//! settings), and the feature files the records point to. Feature files are
//! a 16-byte header (`AVFEAT01`, rows as u32, cols as u32) followed by
//! row-major f64 values, all little-endian.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::target_positions;
use crate::binio;
use crate::error::{Error, IoContext, Result};
use crate::model::{collapse, Transcript, FIRST_SYMBOL, MAX_SYMBOLS};
use crate::tensor::Tensor;

/// Video frames per second used for durations.
pub const FRAME_RATE: f64 = 25.0;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const CORPUS_INFO_FILE: &str = "corpus.json";
const FEATURE_MAGIC: &[u8; 8] = b"AVFEAT01";

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// `T×d_v`.
    pub video: Tensor,
    /// `(2T-1)×d_a`.
    pub audio: Tensor,
    pub transcript: Transcript,
    /// Generating unit per audio frame, when known.
    pub latent: Option<Vec<usize>>,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.video.rows()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.frames() as f64 / FRAME_RATE
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub n_utterances: usize,
    /// Number of latent units driving the audio.
    pub latent_units: usize,
    pub d_audio: usize,
    pub d_video: usize,
    pub noise_audio: f64,
    pub noise_video: f64,
    /// Probability that the latent unit repeats from one audio frame to the next.
    pub self_transition: f64,
    pub min_frames: usize,
    pub max_frames: usize,
    /// Number of transcript symbols.
    pub symbols: usize,
    /// Latent unit → symbol index; defaults to `unit % symbols`.
    pub token_map: Option<Vec<usize>>,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_utterances: 1000,
            latent_units: 12,
            d_audio: 12,
            d_video: 16,
            noise_audio: 0.3,
            noise_video: 1.0,
            self_transition: 0.8,
            min_frames: 8,
            max_frames: 24,
            symbols: 12,
            token_map: None,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn vocab_size(&self) -> usize {
        self.symbols + FIRST_SYMBOL
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.latent_units == 0 || self.d_audio == 0 || self.d_video == 0 {
            return bad("latent_units, d_audio and d_video must be positive".into());
        }
        if !(self.noise_audio >= 0.0 && self.noise_video >= 0.0) {
            return bad("noise levels must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.self_transition) {
            return bad(format!("self_transition {} outside [0, 1]", self.self_transition));
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return bad(format!("bad frame bounds {}..={}", self.min_frames, self.max_frames));
        }
        if self.symbols == 0 || self.symbols > MAX_SYMBOLS {
            return bad(format!("symbols must be in 1..={MAX_SYMBOLS}"));
        }
        if let Some(map) = &self.token_map {
            if map.len() != self.latent_units || map.iter().any(|&s| s >= self.symbols) {
                return bad("token_map needs one symbol index below `symbols` per latent unit".into());
            }
        }
        Ok(())
    }

    fn symbol_of(&self, unit: usize) -> usize {
        let idx = match &self.token_map {
            Some(map) => map[unit],
            None => unit % self.symbols,
        };
        idx + FIRST_SYMBOL
    }
}

/// The fixed random quantities shared by every utterance of a corpus.
struct World {
    centroids: Tensor,
    video_map: Tensor,
}

fn sample_latent(cfg: &GeneratorConfig, len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let k = cfg.latent_units;
    let mut seq = Vec::with_capacity(len);
    seq.push(rng.random_range(0..k));
    for _ in 1..len {
        let prev = *seq.last().expect("non-empty");
        let stay = k == 1 || rng.random::<f64>() < cfg.self_transition;
        let next = if stay {
            prev
        } else {
            // Uniform over the other units.
            let r = rng.random_range(0..k - 1);
            if r >= prev {
                r + 1
            } else {
                r
            }
        };
        seq.push(next);
    }
    seq
}

fn noisy(base: &[f64], sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if sigma == 0.0 {
        return base.to_vec();
    }
    let noise = Tensor::randn(&[base.len()], sigma, rng);
    base.iter().zip(noise.data()).map(|(b, n)| b + n).collect()
}

/// Resampling attempts for a latent sequence whose transcript does not fit
/// in `T` frames under CTC.
const FEASIBILITY_RETRIES: usize = 64;

/// Generates `cfg.n_utterances` utterances. Deterministic given `cfg.seed`.
pub fn generate_corpus(cfg: &GeneratorConfig) -> Result<Vec<Utterance>> {
    cfg.validate()?;
    if cfg.n_utterances == 0 {
        return Err(Error::Config("n_utterances must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let world = World {
        centroids: Tensor::randn(&[cfg.latent_units, cfg.d_audio], 1.0, &mut rng),
        video_map: Tensor::randn(&[cfg.d_audio, cfg.d_video], (1.0 / cfg.d_audio as f64).sqrt(), &mut rng),
    };
    (0..cfg.n_utterances)
        .map(|n| generate_utterance(cfg, &world, format!("utt{n:05}"), &mut rng))
        .collect()
}

fn generate_utterance(cfg: &GeneratorConfig, world: &World, id: String, rng: &mut ChaCha8Rng) -> Result<Utterance> {
    let t = rng.random_range(cfg.min_frames..=cfg.max_frames);
    let audio_len = 2 * t - 1;
    let mut latent = sample_latent(cfg, audio_len, rng);
    let mut tokens = collapse(&latent.iter().map(|&u| cfg.symbol_of(u)).collect::<Vec<_>>(), 0);
    for _ in 0..FEASIBILITY_RETRIES {
        if tokens.len() <= t {
            break;
        }
        latent = sample_latent(cfg, audio_len, rng);
        tokens = collapse(&latent.iter().map(|&u| cfg.symbol_of(u)).collect::<Vec<_>>(), 0);
    }

    let mut audio = Vec::with_capacity(audio_len * cfg.d_audio);
    for &u in &latent {
        audio.extend(noisy(world.centroids.row(u), cfg.noise_audio, rng));
    }
    let mut video = Vec::with_capacity(t * cfg.d_video);
    for i in 0..t {
        let mut mean = vec![0.0; cfg.d_audio];
        for p in target_positions(t, i) {
            for (m, c) in mean.iter_mut().zip(world.centroids.row(latent[p])) {
                *m += c / 3.0;
            }
        }
        let clean = Tensor::matrix(1, cfg.d_audio, mean)?.matmul(&world.video_map)?;
        video.extend(noisy(clean.data(), cfg.noise_video, rng));
    }
    Ok(Utterance {
        id,
        video: Tensor::matrix(t, cfg.d_video, video)?,
        audio: Tensor::matrix(audio_len, cfg.d_audio, audio)?,
        transcript: Transcript::from_tokens(tokens),
        latent: Some(latent),
    })
}

/// Keeps utterances strictly shorter than `max_seconds`, in order.
pub fn filter_by_duration(utts: &[Utterance], max_seconds: f64) -> Vec<&Utterance> {
    utts.iter().filter(|u| u.duration_seconds() < max_seconds).collect()
}

/// Holds out the last `ceil(n·valid_fraction)` utterances.
pub fn split_corpus(utts: &[Utterance], valid_fraction: f64) -> (&[Utterance], &[Utterance]) {
    let n_valid = ((utts.len() as f64) * valid_fraction.clamp(0.0, 1.0)).ceil() as usize;
    utts.split_at(utts.len() - n_valid.min(utts.len()))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestRecord {
    id: String,
    frames: usize,
    d_video: usize,
    d_audio: usize,
    tokens: Vec<usize>,
    text: String,
    video: PathBuf,
    audio: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    latent: Option<Vec<usize>>,
}

fn write_features(path: &Path, t: &Tensor) -> Result<()> {
    let file = File::create(path).at(path)?;
    let mut w = BufWriter::new(file);
    (|| {
        w.write_all(FEATURE_MAGIC)?;
        binio::write_u32(&mut w, t.rows() as u32)?;
        binio::write_u32(&mut w, t.cols() as u32)?;
        binio::write_f64s(&mut w, t.data())?;
        w.flush()
    })()
    .at(path)
}

/// Reads a feature file written by [`save_manifest`].
pub fn read_features(path: &Path) -> Result<Tensor> {
    let file = File::open(path).at(path)?;
    let mut r = BufReader::new(file);
    let bad = |detail: &str| Error::Format {
        path: path.to_path_buf(),
        detail: detail.into(),
    };
    let magic = binio::read_magic(&mut r).map_err(|_| bad("missing feature header"))?;
    if &magic != FEATURE_MAGIC {
        return Err(bad("not a feature file"));
    }
    let rows = binio::read_u32(&mut r).map_err(|_| bad("truncated header"))? as usize;
    let cols = binio::read_u32(&mut r).map_err(|_| bad("truncated header"))? as usize;
    let data = binio::read_f64s(&mut r, rows * cols).map_err(|_| bad("truncated feature data"))?;
    Tensor::matrix(rows, cols, data).map_err(|e| bad(&e.to_string()))
}

/// Writes `manifest.jsonl` and one video and one audio feature file per
/// utterance under `dir/feats/`.
pub fn save_manifest(utts: &[Utterance], dir: &Path) -> Result<()> {
    let feats = dir.join("feats");
    fs::create_dir_all(&feats).at(&feats)?;
    let manifest = dir.join(MANIFEST_FILE);
    let mut w = BufWriter::new(File::create(&manifest).at(&manifest)?);
    for u in utts {
        let video = PathBuf::from("feats").join(format!("{}.video.bin", u.id));
        let audio = PathBuf::from("feats").join(format!("{}.audio.bin", u.id));
        write_features(&dir.join(&video), &u.video)?;
        write_features(&dir.join(&audio), &u.audio)?;
        let record = ManifestRecord {
            id: u.id.clone(),
            frames: u.frames(),
            d_video: u.video.cols(),
            d_audio: u.audio.cols(),
            tokens: u.transcript.tokens.clone(),
            text: u.transcript.text.clone(),
            video,
            audio,
            latent: u.latent.clone(),
        };
        let line = serde_json::to_string(&record).expect("record serializes");
        writeln!(w, "{line}").at(&manifest)?;
    }
    w.flush().at(&manifest)
}

/// Loads every utterance listed in `dir/manifest.jsonl`. Line numbers in
/// errors are 1-based.
pub fn load_manifest(dir: &Path) -> Result<Vec<Utterance>> {
    let manifest = dir.join(MANIFEST_FILE);
    let reader = BufReader::new(File::open(&manifest).at(&manifest)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.at(&manifest)?;
        if line.trim().is_empty() {
            continue;
        }
        let invalid = |detail: String| Error::Manifest {
            path: manifest.clone(),
            line: n + 1,
            detail,
        };
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| invalid(e.to_string()))?;
        let video = read_features(&dir.join(&rec.video))?;
        let audio = read_features(&dir.join(&rec.audio))?;
        if video.rows() != rec.frames || video.cols() != rec.d_video {
            return Err(invalid(format!("video features are {:?}, record says {}×{}", video.shape(), rec.frames, rec.d_video)));
        }
        if audio.rows() != 2 * rec.frames - 1 || audio.cols() != rec.d_audio {
            return Err(invalid(format!(
                "audio features are {:?}, expected {}×{}",
                audio.shape(),
                2 * rec.frames - 1,
                rec.d_audio
            )));
        }
        if rec.tokens.is_empty() {
            return Err(invalid("empty transcript".into()));
        }
        out.push(Utterance {
            id: rec.id,
            video,
            audio,
            transcript: Transcript {
                tokens: rec.tokens,
                text: rec.text,
            },
            latent: rec.latent,
        });
    }
    Ok(out)
}

/// Corpus-level metadata stored next to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusInfo {
    pub vocab_size: usize,
    pub d_video: usize,
    pub d_audio: usize,
    pub generator: Option<GeneratorConfig>,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub info: CorpusInfo,
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn generate(cfg: &GeneratorConfig) -> Result<Self> {
        Ok(Self {
            info: CorpusInfo {
                vocab_size: cfg.vocab_size(),
                d_video: cfg.d_video,
                d_audio: cfg.d_audio,
                generator: Some(cfg.clone()),
            },
            utterances: generate_corpus(cfg)?,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_manifest(&self.utterances, dir)?;
        let path = dir.join(CORPUS_INFO_FILE);
        let text = serde_json::to_string_pretty(&self.info).expect("info serializes");
        fs::write(&path, text).at(&path)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(CORPUS_INFO_FILE);
        let text = fs::read_to_string(&path).at(&path)?;
        let info: CorpusInfo = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.clone(),
            detail: e.to_string(),
        })?;
        Ok(Self {
            info,
            utterances: load_manifest(dir)?,
        })
    }

    /// All audio frames stacked into one matrix.
    pub fn audio_frames(&self) -> Result<Tensor> {
        let d = self.info.d_audio;
        let data: Vec<f64> = self.utterances.iter().flat_map(|u| u.audio.data().iter().copied()).collect();
        let rows = data.len() / d;
        Ok(Tensor::matrix(rows, d, data)?)
    }

    pub fn stats(&self) -> CorpusStats {
        let frames: Vec<usize> = self.utterances.iter().map(Utterance::frames).collect();
        CorpusStats {
            utterances: frames.len(),
            video_frames: frames.iter().sum(),
            audio_frames: frames.iter().map(|t| 2 * t - 1).sum(),
            min_frames: frames.iter().copied().min().unwrap_or(0),
            max_frames: frames.iter().copied().max().unwrap_or(0),
            tokens: self.utterances.iter().map(|u| u.transcript.len()).sum(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusStats {
    pub utterances: usize,
    pub video_frames: usize,
    pub audio_frames: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub tokens: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::{assign, kmeans_fit};

    fn small(seed: u64) -> GeneratorConfig {
        GeneratorConfig {
            n_utterances: 40,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn audio_length_and_transcript_invariants() {
        let corpus = generate_corpus(&small(1)).unwrap();
        for u in &corpus {
            assert_eq!(u.audio.rows(), 2 * u.frames() - 1);
            assert!(!u.transcript.is_empty());
            assert!(u.transcript.len() <= u.latent.as_ref().unwrap().len());
            assert!(u.transcript.tokens.iter().all(|&t| t >= FIRST_SYMBOL));
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        assert_eq!(generate_corpus(&small(5)).unwrap(), generate_corpus(&small(5)).unwrap());
        assert_ne!(generate_corpus(&small(5)).unwrap(), generate_corpus(&small(6)).unwrap());
    }

    #[test]
    fn sticky_chain_limit_gives_single_token() {
        let cfg = GeneratorConfig {
            self_transition: 1.0,
            ..small(2)
        };
        for u in generate_corpus(&cfg).unwrap() {
            assert_eq!(u.transcript.len(), 1);
        }
    }

    #[test]
    fn noiseless_audio_is_recovered_by_kmeans() {
        let cfg = GeneratorConfig {
            noise_audio: 0.0,
            noise_video: 0.0,
            ..small(3)
        };
        let corpus = Corpus::generate(&cfg).unwrap();
        let frames = corpus.audio_frames().unwrap();
        let fit = kmeans_fit(&frames, cfg.latent_units, 100, 0).unwrap();
        assert!(fit.distortion() <= 1e-9);

        // Labels match the latent sequence up to a consistent relabeling.
        let mut mapping = vec![None; cfg.latent_units];
        for u in &corpus.utterances {
            let ids = assign(&u.audio, &fit.centroids).unwrap();
            for (&latent, &id) in u.latent.as_ref().unwrap().iter().zip(ids.ids()) {
                assert_eq!(*mapping[latent].get_or_insert(id), id);
            }
        }
    }

    #[test]
    fn curriculum_filter_at_four_seconds() {
        let mut base = generate_corpus(&small(4)).unwrap().remove(0);
        let mut utts = Vec::new();
        for t in [1, 50, 99, 100, 101, 150] {
            base.video = Tensor::zeros(&[t, 2]);
            utts.push(base.clone());
        }
        let kept: Vec<usize> = filter_by_duration(&utts, 4.0).iter().map(|u| u.frames()).collect();
        assert_eq!(kept, vec![1, 50, 99]);
        assert_eq!(filter_by_duration(&utts, f64::INFINITY).len(), utts.len());
        assert!(filter_by_duration(&[], 4.0).is_empty());
    }

    #[test]
    fn manifest_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = Corpus::generate(&GeneratorConfig {
            n_utterances: 3,
            ..Default::default()
        })
        .unwrap();
        corpus.save(dir.path()).unwrap();
        let back = Corpus::load(dir.path()).unwrap();
        assert_eq!(back.info, corpus.info);
        assert_eq!(back.utterances, corpus.utterances);
    }

    #[test]
    fn missing_feature_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let utts = generate_corpus(&GeneratorConfig {
            n_utterances: 2,
            ..Default::default()
        })
        .unwrap();
        save_manifest(&utts, dir.path()).unwrap();
        let victim = dir.path().join("feats/utt00001.audio.bin");
        fs::remove_file(&victim).unwrap();
        let err = load_manifest(dir.path()).unwrap_err().to_string();
        assert!(err.contains("utt00001.audio.bin"), "{err}");
    }

    #[test]
    fn first_invalid_line_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let utts = generate_corpus(&GeneratorConfig {
            n_utterances: 3,
            ..Default::default()
        })
        .unwrap();
        save_manifest(&utts, dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines[1] = "{\"id\": 3}";
        lines[2] = "not json";
        fs::write(&path, lines.join("\n")).unwrap();
        match load_manifest(dir.path()).unwrap_err() {
            Error::Manifest { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn split_holds_out_tail() {
        let utts = generate_corpus(&small(0)).unwrap();
        let (train, valid) = split_corpus(&utts, 0.2);
        assert_eq!((train.len(), valid.len()), (32, 8));
        assert_eq!(valid[0].id, "utt00032");
    }
}
