use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use anyhow::{anyhow, Context};
use avalign::alignment::{align_targets, mean_target_mass, write_alignment_csv};
use avalign::data::{split_corpus, Corpus, Utterance};
use avalign::model::Checkpoint;
use avalign::quantizer::{assign, init_unit_bank, kmeans_fit, AudioUnitBank};
use avalign::scoring::evaluate;
use avalign::train::{train, MetricsWriter, Split, Variant};

use crate::config::{self, Config, EvalSplit, Overrides};
use crate::{Command, Common, Failure};

type Result<T> = std::result::Result<T, Failure>;

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn runtime(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

pub fn run(command: Command, common: Common, overrides: &Overrides) -> Result<()> {
    let loaded = config::load(common.config.as_deref(), overrides).map_err(usage)?;
    let mut cfg = loaded.config;
    if let Some(seed) = common.seed {
        cfg.generate.seed = seed;
        cfg.quantize.seed = seed;
        cfg.train.seed = seed;
    }
    let variant = common.variant.unwrap_or(cfg.train.variant);
    config::apply_variant(&mut cfg, variant, loaded.explicit_gamma).map_err(usage)?;
    let out = common.out;
    match command {
        Command::Generate => {
            if let Some(o) = out {
                cfg.paths.corpus = o;
            }
            generate(&cfg)
        }
        Command::Quantize => {
            if let Some(o) = out {
                cfg.paths.bank = Some(o.join("bank.bin"));
            }
            quantize(&cfg)
        }
        Command::Train => {
            if let Some(o) = out {
                cfg.paths.out = o;
            }
            run_training(&cfg)
        }
        Command::Eval => {
            let ckpt = cfg.checkpoint_path();
            let dir = out.unwrap_or_else(|| cfg.paths.out.clone());
            eval(&cfg, &ckpt, &dir)
        }
        Command::InspectAlignment { utterance } => {
            let ckpt = cfg.checkpoint_path();
            let dir = out.unwrap_or_else(|| cfg.paths.out.clone());
            let id = utterance.or_else(|| cfg.inspect.utterance.clone());
            inspect(&cfg, &ckpt, &dir, id.as_deref())
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(runtime)
}

fn create_file(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .with_context(|| format!("creating {}", path.display()))
        .map_err(runtime)
}

fn load_corpus(cfg: &Config) -> Result<Corpus> {
    Corpus::load(&cfg.paths.corpus)
        .with_context(|| format!("loading corpus from {}", cfg.paths.corpus.display()))
        .map_err(runtime)
}

fn generate(cfg: &Config) -> Result<()> {
    cfg.generate.validate()?;
    let corpus = Corpus::generate(&cfg.generate)?;
    create_dir(&cfg.paths.corpus)?;
    corpus.save(&cfg.paths.corpus)?;
    let s = corpus.stats();
    println!(
        "wrote {} utterances to {} ({} video frames, {} audio frames, {}..{} frames each, {} tokens, vocabulary {})",
        s.utterances,
        cfg.paths.corpus.display(),
        s.video_frames,
        s.audio_frames,
        s.min_frames,
        s.max_frames,
        s.tokens,
        corpus.info.vocab_size,
    );
    Ok(())
}

fn quantize(cfg: &Config) -> Result<()> {
    let q = &cfg.quantize;
    if q.k == 0 {
        return Err(usage(anyhow!("quantize.k must be at least 1")));
    }
    let bank_path = cfg
        .paths
        .bank
        .clone()
        .unwrap_or_else(|| "bank.bin".into());
    let corpus = load_corpus(cfg)?;
    let frames = corpus.audio_frames()?;
    let fit = kmeans_fit(&frames, q.k, q.max_iters, q.seed).map_err(|e| match e {
        avalign::Error::TooFewPoints { .. } => runtime(anyhow!(
            "{e}; the corpus has too few audio frames for this many units, lower quantize.k"
        )),
        e => e.into(),
    })?;
    let bank = init_unit_bank(&fit.centroids, cfg.model.d_model, q.seed)?;
    if let Some(dir) = bank_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    bank.save(&bank_path)?;
    println!(
        "k-means: K={} over {} frames, {} passes{}, distortion {:.6}",
        q.k,
        frames.rows(),
        fit.distortion_history.len(),
        if fit.converged { " (converged)" } else { "" },
        fit.distortion(),
    );
    println!("wrote unit bank to {}", bank_path.display());
    Ok(())
}

fn run_training(cfg: &Config) -> Result<()> {
    let mut run = cfg.run_config();
    run.validate()?;
    let corpus = load_corpus(cfg)?;
    for (name, set, want) in [
        ("d_video", &mut run.model.d_video, corpus.info.d_video),
        ("vocab_size", &mut run.model.vocab_size, corpus.info.vocab_size),
    ] {
        if *set == 0 {
            *set = want;
        } else if *set != want {
            return Err(usage(anyhow!("model.{name} is {} but the corpus has {want}", *set)));
        }
    }
    let bank = match &run.paths.bank {
        Some(p) => Some(
            AudioUnitBank::load(p)
                .with_context(|| format!("loading unit bank {}", p.display()))
                .map_err(runtime)?,
        ),
        None => None,
    };
    if let Some(b) = &bank {
        if b.d_audio() != corpus.info.d_audio {
            return Err(runtime(anyhow!(
                "unit bank has d_audio {} but the corpus has {}",
                b.d_audio(),
                corpus.info.d_audio
            )));
        }
    }
    let (train_set, valid_set) = split_corpus(&corpus.utterances, run.train.valid_fraction);
    create_dir(&run.paths.out)?;
    let resolved = toml::to_string(cfg).expect("config serializes");
    fs::write(run.paths.out.join("config.toml"), resolved)
        .context("writing resolved config")
        .map_err(runtime)?;
    let metrics_path = run.paths.out.join("metrics.csv");
    let mut metrics = MetricsWriter::new(create_file(&metrics_path)?);
    println!(
        "training {} on {} utterances ({} held out) for {} epochs",
        run.train.variant,
        train_set.len(),
        valid_set.len(),
        run.train.epochs
    );
    let mut on_row = |row: &avalign::train::MetricsRow| {
        if row.split == Split::Valid {
            println!(
                "step {:>6} valid ctc {:.4} att {:.4} align {:.4} total {:.4}",
                row.step, row.l_ctc, row.l_att, row.l_align, row.l_total
            );
        }
        metrics.write(row)
    };
    let outcome = train(&run, train_set, valid_set, bank.as_ref(), &mut on_row)?;
    let ckpt_path = run.paths.out.join("model.ckpt");
    outcome.checkpoint.save(&ckpt_path)?;
    if let Some(last) = outcome.rows.iter().rev().find(|r| r.split == Split::Train) {
        println!(
            "step {:>6} train ctc {:.4} att {:.4} align {:.4} total {:.4}",
            last.step, last.l_ctc, last.l_att, last.l_align, last.l_total
        );
    }
    println!("wrote {} and {}", metrics_path.display(), ckpt_path.display());
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))
        .map_err(runtime)
}

fn check_compatible(ckpt: &Checkpoint, corpus: &Corpus) -> Result<()> {
    let mc = &ckpt.header.config;
    if mc.vocab_size != corpus.info.vocab_size {
        return Err(avalign::Error::VocabularyMismatch {
            checkpoint: mc.vocab_size,
            corpus: corpus.info.vocab_size,
        }
        .into());
    }
    if mc.d_video != corpus.info.d_video {
        return Err(runtime(anyhow!(
            "checkpoint expects {}-dimensional video features, corpus has {}",
            mc.d_video,
            corpus.info.d_video
        )));
    }
    Ok(())
}

fn select<'a>(cfg: &Config, utts: &'a [Utterance], split: EvalSplit) -> &'a [Utterance] {
    let (train_set, valid_set) = split_corpus(utts, cfg.train.valid_fraction);
    match split {
        EvalSplit::Train => train_set,
        EvalSplit::Valid => valid_set,
        EvalSplit::All => utts,
    }
}

fn eval(cfg: &Config, ckpt_path: &Path, dir: &Path) -> Result<()> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let corpus = load_corpus(cfg)?;
    check_compatible(&ckpt, &corpus)?;
    let utts = select(cfg, &corpus.utterances, cfg.eval.split);
    if utts.is_empty() {
        return Err(usage(anyhow!("the selected split is empty")));
    }
    let report = evaluate(&ckpt.model, utts, cfg.eval.decode)?;
    create_dir(dir)?;
    let name = format!(
        "eval_{}_{}.csv",
        serde_name(&cfg.eval.split),
        serde_name(&cfg.eval.decode)
    );
    let path = dir.join(name);
    report.write_csv(create_file(&path)?)?;
    println!(
        "{} utterances, WER {:.2}%, CER {:.2}%",
        report.utterances.len(),
        100.0 * report.wer(),
        100.0 * report.cer()
    );
    println!("wrote {}", path.display());
    Ok(())
}

fn serde_name<T: serde::Serialize>(v: &T) -> String {
    toml::Value::try_from(v)
        .ok()
        .and_then(|v| v.as_str().map(String::from))
        .unwrap_or_default()
}

fn inspect(cfg: &Config, ckpt_path: &Path, dir: &Path, id: Option<&str>) -> Result<()> {
    let ckpt = load_checkpoint(ckpt_path)?;
    if ckpt.header.variant == Variant::S1 {
        return Err(usage(anyhow!(
            "{} is an s1 checkpoint; s1 models have no unit bank, so there is no alignment to inspect",
            ckpt_path.display()
        )));
    }
    let corpus = load_corpus(cfg)?;
    check_compatible(&ckpt, &corpus)?;
    let utt = match id {
        Some(id) => corpus
            .utterances
            .iter()
            .find(|u| u.id == id)
            .ok_or_else(|| usage(anyhow!("no utterance with id {id:?} in {}", cfg.paths.corpus.display())))?,
        None => select(cfg, &corpus.utterances, EvalSplit::Valid)
            .first()
            .or(corpus.utterances.first())
            .ok_or_else(|| runtime(anyhow!("corpus is empty")))?,
    };
    let bank = ckpt.model.bank().ok_or_else(|| runtime(anyhow!("checkpoint has no unit bank")))?;
    let scores = ckpt
        .model
        .attention_scores(&utt.video)?
        .ok_or_else(|| runtime(anyhow!("checkpoint has no cross-modal attention")))?;
    let units = assign(&utt.audio, &bank.centroids)?;
    let targets = align_targets(utt.frames(), &units)?;
    create_dir(dir)?;
    let path = dir.join(format!("alignment_{}.csv", utt.id));
    write_alignment_csv(create_file(&path)?, &scores, &targets)?;
    let k = bank.num_units();
    println!(
        "{}: {} frames, mean attention mass on target units {:.4} (uniform attention gives at most {:.4})",
        utt.id,
        utt.frames(),
        mean_target_mass(&scores, &targets),
        (3.0 / k as f64).min(1.0),
    );
    println!("wrote {}", path.display());
    Ok(())
}
