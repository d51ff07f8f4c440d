//! Trains S1, S2 and S3 on the default synthetic corpus and prints per-epoch
//! alignment loss and held-out CER for each.
//!
//! Knobs come from the environment. Training: SEED, EPOCHS, BATCH, LR,
//! DMODEL, GAMMA, ALPHA, ONLY (e.g. `s1s3`). Bank: UNITS. Corpus:
//! CORPUS_SEED, UTTS, LATENT, SYMBOLS, MAXF, SELF_T, NOISE_AUDIO, NOISE_VIDEO.

use std::time::Instant;

use avalign::data::{split_corpus, Corpus, GeneratorConfig};
use avalign::quantizer::{init_unit_bank, kmeans_fit};
use avalign::scoring::{evaluate, DecodeMode};
use avalign::train::{epoch_means, train, RunConfig, Variant};

fn env<T: std::str::FromStr>(key: &str, default: T) -> T {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() -> avalign::Result<()> {
    let seed: u64 = env("SEED", 0);
    let mut gen = GeneratorConfig {
        seed: env("CORPUS_SEED", 0),
        ..Default::default()
    };
    gen.noise_video = env("NOISE_VIDEO", gen.noise_video);
    gen.n_utterances = env("UTTS", gen.n_utterances);
    gen.latent_units = env("LATENT", gen.latent_units);
    gen.symbols = env("SYMBOLS", gen.symbols);
    gen.max_frames = env("MAXF", gen.max_frames);
    gen.self_transition = env("SELF_T", gen.self_transition);
    gen.noise_audio = env("NOISE_AUDIO", gen.noise_audio);
    let corpus = Corpus::generate(&gen)?;
    let (train_set, valid_set) = split_corpus(&corpus.utterances, 0.2);

    let mut cfg = RunConfig::default();
    cfg.train.seed = seed;
    cfg.train.epochs = env("EPOCHS", cfg.train.epochs);
    cfg.train.batch_size = env("BATCH", cfg.train.batch_size);
    cfg.train.lr = env("LR", cfg.train.lr);
    cfg.model.d_model = env("DMODEL", cfg.model.d_model);
    let only: String = env("ONLY", "s1s2s3".to_string());
    let units: usize = env("UNITS", gen.latent_units);
    let fit = kmeans_fit(&corpus.audio_frames()?, units, 100, 0)?;
    let bank = init_unit_bank(&fit.centroids, cfg.model.d_model, 0)?;

    for variant in [Variant::S1, Variant::S2, Variant::S3] {
        if !only.contains(&variant.to_string()) {
            continue;
        }
        let start = Instant::now();
        let mut run = cfg.clone();
        run.weights.alpha = env("ALPHA", run.weights.alpha);
        run.set_variant(variant);
        if variant == Variant::S3 {
            run.weights.gamma = env("GAMMA", RunConfig::default().weights.gamma);
        }
        let b = variant.uses_bank().then_some(&bank);
        let out = train(&run, train_set, valid_set, b, &mut |_| Ok(()))?;
        let align = epoch_means(&out.rows, &out.steps_per_epoch, |r| r.l_align);
        let report = evaluate(&out.checkpoint.model, valid_set, DecodeMode::Ctc)?;
        let att = evaluate(&out.checkpoint.model, valid_set, DecodeMode::Attention)?;
        let vctc: Vec<f64> = out
            .rows
            .iter()
            .filter(|r| r.split == avalign::train::Split::Valid)
            .map(|r| (r.l_ctc * 100.0).round() / 100.0)
            .collect();
        println!(
            "{variant} {:.1}s cer={:.4} att_cer={:.4} align={:?}\n   vctc={:?}",
            start.elapsed().as_secs_f64(),
            report.cer(),
            att.cer(),
            align.iter().map(|x| (x * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            vctc,
        );
    }
    Ok(())
}
