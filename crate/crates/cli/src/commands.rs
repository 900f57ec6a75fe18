use std::collections::HashSet;
use std::fs;
use std::io::{self, BufRead, Write};
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use ccead_core::codec::{window_sentences, CharVocab, UnknownChars, WordVocab};
use ccead_core::infer::{correct_once, CorrectionRequest, Corrector};
use ccead_core::metrics::{corpus_cer, EvalReport, UniformContext};
use ccead_core::model::Model;
use ccead_core::noise::{
    build_opentypo, gen_synthetic, inject_noise, parse_typo_pairs, KeyboardLayout, NoiseModel,
    OpenTypoOptions,
};
use ccead_core::train::{
    encode_pairs, train, Checkpoint, EpochMetrics, RunConfig, TrainError, METRIC_LOG_HEADER,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::args::*;
use crate::{server, CliError, Result};

const TOP_WORDS: &str = include_str!("../../core/data/top_words.txt");

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| CliError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn lines(text: &str) -> Vec<String> {
    text.lines().map(str::to_string).collect()
}

fn joined(lines: &[String]) -> String {
    lines.iter().map(|l| format!("{l}\n")).collect()
}

fn split_fractions(v: &[f64]) -> Result<[f64; 3]> {
    match v {
        [a, b, c] if (a + b + c - 1.0).abs() < 1e-9 && v.iter().all(|f| *f >= 0.0) => {
            Ok([*a, *b, *c])
        }
        _ => Err(CliError::Usage(format!(
            "split fractions {v:?} must be three nonnegative numbers summing to 1"
        ))),
    }
}

pub fn load_model(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(Checkpoint::from_bytes(&bytes)?.model)
}

/// Runs one subcommand, writing results to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::BuildNoise(a) => build_noise(a, out),
        Command::Inject(a) => inject(a, out),
        Command::GenSynthetic(a) => synthetic(a, out),
        Command::BuildVocab(a) => build_vocab(a, out),
        Command::Train(a) => train_cmd(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Correct(a) => correct(a, out),
        Command::Serve(a) => serve(a),
        Command::ExportEmbeddings(a) => export(a, out),
    }
}

fn build_noise(a: BuildNoiseArgs, out: &mut dyn Write) -> Result<()> {
    let typos = parse_typo_pairs(&read(&a.typos)?)?;
    let corpus = lines(&read(&a.corpus)?);
    let lexicon = match &a.lexicon {
        Some(p) => Some(
            read(p)?
                .split_whitespace()
                .map(str::to_lowercase)
                .collect::<HashSet<_>>(),
        ),
        None => None,
    };
    let opts = OpenTypoOptions {
        mode: a.mode.into(),
        rate: a.rate.unwrap_or(match a.mode {
            Mode::Dict => 1.0,
            Mode::Sampled => 0.1,
        }),
        seed: a.seed,
        split: split_fractions(&a.split)?,
        lexicon,
    };
    let built = build_opentypo(&corpus, &typos, &opts)?;
    built.write_to(&a.out).map_err(|source| CliError::Io {
        path: a.out.clone(),
        source,
    })?;
    let cer = corpus_cer(
        built
            .noisy
            .iter()
            .map(String::as_str)
            .zip(built.clean.iter().map(String::as_str)),
    );
    writeln!(
        out,
        "lines\t{}\naccepted_pairs\t{}\nrejected_pairs\t{}\ncorpus_cer\t{cer:.4}",
        built.clean.len(),
        typos.len() - built.rejects.len(),
        built.rejects.len()
    )?;
    Ok(())
}

fn inject(a: InjectArgs, out: &mut dyn Write) -> Result<()> {
    let model = NoiseModel::from_text(&read(&a.noise_model)?)?;
    let text = read(&a.corpus)?;
    // Line terminators are carried over untouched.
    let mut bodies = Vec::new();
    let mut ends = Vec::new();
    for chunk in text.split_inclusive('\n') {
        let body = chunk.trim_end_matches(['\n', '\r']);
        ends.push(&chunk[body.len()..]);
        bodies.push(body);
    }
    let noisy = inject_noise(&bodies, &model, a.mode.into(), a.rate, a.seed)?;
    let result: String = noisy
        .lines
        .iter()
        .zip(ends)
        .map(|(l, e)| format!("{l}{e}"))
        .collect();
    match &a.out {
        Some(p) => write(p, &result),
        None => Ok(out.write_all(result.as_bytes())?),
    }
}

fn synthetic(a: GenSyntheticArgs, out: &mut dyn Write) -> Result<()> {
    let words: Vec<String> = match &a.words {
        Some(p) => read(p)?.split_whitespace().map(str::to_lowercase).collect(),
        None => TOP_WORDS.split_whitespace().map(str::to_string).collect(),
    };
    let mut pairs = gen_synthetic(
        &words,
        &KeyboardLayout::qwerty(),
        a.sigma,
        a.variants,
        a.seed,
    )?;
    pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(a.seed.wrapping_add(1)));
    let [tr, dv, _] = split_fractions(&a.split)?;
    let n = pairs.len();
    let train_end = (tr * n as f64).floor() as usize;
    let dev_end = (train_end + (dv * n as f64).floor() as usize).min(n);
    for (name, part) in [
        ("train", &pairs[..train_end]),
        ("dev", &pairs[train_end..dev_end]),
        ("test", &pairs[dev_end..]),
    ] {
        let noisy: String = part.iter().map(|p| format!("{}\n", p.noisy)).collect();
        let clean: String = part.iter().map(|p| format!("{}\n", p.clean)).collect();
        write(&a.out.join(format!("{name}_noisy.txt")), &noisy)?;
        write(&a.out.join(format!("{name}_clean.txt")), &clean)?;
    }
    write(&a.out.join("words.txt"), &joined(&words))?;
    let changed = pairs.iter().filter(|p| p.noisy != p.clean).count();
    writeln!(
        out,
        "pairs\t{n}\ntrain\t{train_end}\ndev\t{}\ntest\t{}\nchanged\t{changed}",
        dev_end - train_end,
        n - dev_end
    )?;
    Ok(())
}

fn build_vocab(a: BuildVocabArgs, out: &mut dyn Write) -> Result<()> {
    let text = read(&a.corpus)?;
    let vocab = WordVocab::build(text.lines(), a.vocab_size)?;
    write(&a.out, &vocab.to_text())?;
    writeln!(out, "vocabulary\t{}", vocab.len())?;
    Ok(())
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn train_cmd(a: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let mut run = RunConfig::parse(&read(&a.config)?)?;
    for (i, kv) in a.overrides.iter().enumerate() {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        run.set(i + 1, k.trim(), v.trim())?;
    }
    if let Some(seed) = a.seed {
        run.train.seed = seed;
    }
    if let Some(w) = a.window {
        run.model.word_window = w;
    }
    let base = a.config.parent().unwrap_or(Path::new(".")).to_path_buf();
    let path = |key: &str| run.path(key).map(|p| resolve(&base, p));
    let need =
        |key: &str| path(key).ok_or_else(|| CliError::Usage(format!("config needs `{key}`")));
    let checkpoint = match &a.checkpoint {
        Some(p) => p.clone(),
        None => need("checkpoint")?,
    };

    let train_clean = lines(&read(&need("train_clean")?)?);
    let train_noisy = lines(&read(&need("train_noisy")?)?);
    let train_pairs = window_sentences(&train_noisy, &train_clean, run.model.word_window)?;
    let dev_pairs = match (path("dev_noisy"), path("dev_clean")) {
        (Some(n), Some(c)) => {
            window_sentences(lines(&read(&n)?), lines(&read(&c)?), run.model.word_window)?
        }
        _ => Vec::new(),
    };

    let metric_log = path("metric_log");
    let vocab = match path("vocab") {
        Some(p) if p.exists() => WordVocab::from_text(&read(&p)?)?,
        other => {
            let v = WordVocab::build(
                train_pairs.iter().map(|p| p.clean.as_str()),
                run.model.word_vocab,
            )?;
            if let Some(p) = other {
                write(&p, &v.to_text())?;
            }
            v
        }
    };
    if vocab.len() != run.model.word_vocab {
        log::info!("word_vocab set to the vocabulary size {}", vocab.len());
        run.model.word_vocab = vocab.len();
    }
    run.validate()?;

    let model = Model::new(run.model.clone(), vocab.clone(), run.train.seed)?;
    let train_set = encode_pairs(&train_pairs, &vocab, &run.model)?;
    let dev_set = encode_pairs(&dev_pairs, &vocab, &run.model)?;
    log::info!(
        "{} training windows, {} dev windows, {} parameters",
        train_set.len(),
        dev_set.len(),
        model.params.num_parameters()
    );

    if let Some(p) = &metric_log {
        write(p, &format!("{METRIC_LOG_HEADER}\n"))?;
    }
    let last_path = checkpoint.with_extension("last");
    let mut history: Vec<EpochMetrics> = Vec::new();
    let mut best_acc: Option<f64> = None;
    let mut io_error: Option<CliError> = None;
    let outcome = train(model, &train_set, &dev_set, &run.train, |m, model, adam| {
        history.push(*m);
        let ck = Checkpoint::new(
            run.clone(),
            model.clone(),
            Some(adam.clone()),
            m.epoch,
            history.clone(),
        );
        let improved = match best_acc {
            None => true,
            Some(acc) => dev_set.is_empty() || m.dev_word_acc > acc,
        };
        let mut result = ck.save(&last_path).map_err(CliError::from);
        if improved {
            best_acc = Some(m.dev_word_acc);
            result = result.and_then(|_| ck.save(&checkpoint).map_err(CliError::from));
        }
        if let Some(p) = &metric_log {
            result = result.and_then(|_| {
                fs::OpenOptions::new()
                    .append(true)
                    .open(p)
                    .and_then(|mut f| writeln!(f, "{}", m.to_tsv()))
                    .map_err(|source| CliError::Io {
                        path: p.clone(),
                        source,
                    })
            });
        }
        match result {
            Ok(()) => ControlFlow::Continue(()),
            Err(e) => {
                io_error = Some(e);
                ControlFlow::Break(())
            }
        }
    });
    if let Some(e) = io_error {
        return Err(e);
    }
    match outcome {
        Ok(o) => {
            writeln!(out, "{}", EpochMetrics::log_text(&o.history).trim_end())?;
            writeln!(
                out,
                "best_epoch\t{}\ncheckpoint\t{}",
                o.best_epoch,
                checkpoint.display()
            )?;
            Ok(())
        }
        Err(TrainError::Diverged {
            epoch,
            reason,
            last_good,
        }) => {
            last_good.save(&last_path)?;
            Err(CliError::Diverged {
                epoch,
                reason,
                saved: last_path,
            })
        }
        Err(e) => Err(e.into()),
    }
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> Result<()> {
    let noisy = lines(&read(&a.noisy)?);
    let clean = lines(&read(&a.clean)?);
    let (inputs, truths, predictions) = if a.identity {
        let (inputs, truths) = match a.window {
            Some(w) => {
                let pairs = window_sentences(&noisy, &clean, w)?;
                pairs.into_iter().map(|p| (p.noisy, p.clean)).unzip()
            }
            None => {
                if noisy.len() != clean.len() {
                    return Err(CliError::Usage(format!(
                        "{} noisy lines vs {} clean lines",
                        noisy.len(),
                        clean.len()
                    )));
                }
                (noisy, clean)
            }
        };
        let predictions = inputs.clone();
        (inputs, truths, predictions)
    } else {
        let path = a.checkpoint.as_ref().expect("clap requires a checkpoint");
        let model = load_model(path)?;
        let window = a.window.unwrap_or(model.config.word_window);
        let pairs = window_sentences(&noisy, &clean, window)?;
        let chars = CharVocab::new(UnknownChars::Skip);
        let mut predictions = Vec::with_capacity(pairs.len());
        for p in &pairs {
            let req = CorrectionRequest {
                text: p.noisy.clone(),
                max_completions: 0,
            };
            predictions.push(correct_once(&model, &chars, &req)?.corrected);
        }
        let (inputs, truths) = pairs.into_iter().map(|p| (p.noisy, p.clean)).unzip();
        (inputs, truths, predictions)
    };
    let context = a.context_labels.map(|labels| UniformContext { labels });
    let report = EvalReport::compute(
        &predictions,
        &inputs,
        &truths,
        context
            .as_ref()
            .map(|c| c as &dyn ccead_core::metrics::ContextModel),
    )?;
    write!(out, "{}", report.summary_tsv())?;
    if let Some(p) = &a.positions {
        write(p, &report.positions.to_tsv())?;
    }
    Ok(())
}

fn correct(a: CorrectArgs, out: &mut dyn Write) -> Result<()> {
    let corrector = Corrector::new(load_model(&a.checkpoint.checkpoint)?);
    let texts: Vec<String> = match a.text {
        Some(t) => vec![t],
        None => io::stdin().lock().lines().collect::<io::Result<_>>()?,
    };
    for text in texts {
        let resp = corrector.correct(&CorrectionRequest {
            text,
            max_completions: a.max_completions,
        })?;
        if a.json {
            writeln!(out, "{}", serde_json::to_string(&resp)?)?;
        } else if resp.completions.is_empty() {
            writeln!(out, "{}", resp.corrected)?;
        } else {
            writeln!(out, "{}\t{}", resp.corrected, resp.completions.join(" "))?;
        }
    }
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let bytes = fs::read(&a.checkpoint.checkpoint).map_err(|source| CliError::Io {
        path: a.checkpoint.checkpoint.clone(),
        source,
    })?;
    let state = server::AppState::from_checkpoint_bytes(
        &bytes,
        std::time::Duration::from_millis(a.timeout_ms),
    )?;
    let addr = format!("{}:{}", a.host, a.port);
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?;
    rt.block_on(server::serve(state, &addr))?;
    Ok(())
}

fn export(a: ExportArgs, out: &mut dyn Write) -> Result<()> {
    let model = load_model(&a.checkpoint.checkpoint)?;
    let table = model.export_embeddings(!a.chars);
    match &a.out {
        Some(p) => write(p, &table),
        None => Ok(out.write_all(table.as_bytes())?),
    }
}
