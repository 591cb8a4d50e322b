use std::collections::BTreeMap;
use std::io::IsTerminal;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use normbridge_core::backends::Task;
use normbridge_core::config::AppConfig;
use normbridge_core::engine::{DiscardTranscript, Engine, FileTranscript, TranscriptSink};
use normbridge_core::ensemble::synthetic::{self, SyntheticSet};
use normbridge_core::ensemble::{self, argmax, TrainConfig};
use normbridge_core::eval::{self, BleuOptions, Report};
use normbridge_core::middleware::server::{self, ServerOptions};
use normbridge_core::middleware::{Gateway, Hub};
use normbridge_core::replay::{replay_blocking, ScriptedDialogue};
use serde_json::json;
use tokio::net::TcpListener;

#[derive(Parser)]
#[command(
    name = "normbridge",
    version,
    about = "Norm-aware mediation for bilingual dialogue"
)]
struct Cli {
    /// Service configuration (JSON).
    #[arg(long, global = true, env = "NB_CONFIG")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the WebSocket service.
    Serve {
        /// Overrides the configured listen address.
        #[arg(long, env = "NB_LISTEN")]
        listen: Option<String>,
    },
    /// Drive a scripted dialogue through a headless session.
    Replay {
        #[arg(long)]
        script: PathBuf,
        /// Directory for transitions.tsv and turns.jsonl.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the seed of every backend's fault injection.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        json: bool,
        #[arg(long)]
        percent: bool,
    },
    /// Compute metrics from prediction, transcript, generation or rating files.
    Eval {
        /// `id<TAB>pred<TAB>gold` class labels.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// A transitions.tsv written by serve or replay.
        #[arg(long)]
        transcript: Option<PathBuf>,
        /// `id<TAB>candidate<TAB>reference` texts for BLEU and ROUGE-L.
        #[arg(long)]
        generations: Option<PathBuf>,
        /// `id<TAB>rater_a<TAB>rater_b` labels for Cohen's kappa.
        #[arg(long)]
        ratings: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        bleu_order: usize,
        /// Add-one smoothing for BLEU precisions of order 2 and up.
        #[arg(long)]
        smoothing: bool,
        #[arg(long)]
        json: bool,
        #[arg(long)]
        percent: bool,
    },
    /// Fit the stacking combiner on base-model outputs.
    TrainStacker {
        /// One stacked feature vector (one-hot then distribution) per line.
        #[arg(long)]
        features: PathBuf,
        /// One gold class index per line.
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Hold out the last N rows and report micro-F1 on them.
        #[arg(long, default_value_t = 0)]
        holdout: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.1)]
        lr: f64,
        #[arg(long, default_value_t = 1e-3)]
        l2: f64,
        #[arg(long, default_value_t = 500)]
        epochs: usize,
        #[arg(long)]
        json: bool,
    },
    /// Write a seeded synthetic stacking dataset.
    Synth {
        #[arg(long, value_enum, default_value_t = SynthKind::Complementary)]
        kind: SynthKind,
        #[arg(long, default_value_t = 8)]
        classes: usize,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        labels: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    Complementary,
    APerfect,
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

type Outcome = Result<(), Failure>;

trait Classify<T> {
    fn usage(self) -> Result<T, Failure>;
    fn runtime(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn usage(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Usage(e.into()))
    }

    fn runtime(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let default_level = match cli.command {
        Command::Serve { .. } => "info",
        _ => "warn",
    };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default_level)),
        )
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .init();
    let result = match cli.command {
        Command::Serve { listen } => serve(cli.config.as_deref(), listen),
        Command::Replay {
            script,
            out,
            seed,
            json,
            percent,
        } => replay(
            cli.config.as_deref(),
            &script,
            out.as_deref(),
            seed,
            json,
            percent,
        ),
        Command::Eval {
            predictions,
            transcript,
            generations,
            ratings,
            bleu_order,
            smoothing,
            json,
            percent,
        } => evaluate(
            EvalInputs {
                predictions,
                transcript,
                generations,
                ratings,
            },
            BleuOptions {
                max_n: bleu_order,
                smoothing,
            },
            json,
            percent,
        ),
        Command::TrainStacker {
            features,
            labels,
            out,
            holdout,
            seed,
            lr,
            l2,
            epochs,
            json,
        } => train(
            &features,
            &labels,
            &out,
            holdout,
            TrainConfig {
                learning_rate: lr,
                l2,
                epochs,
                seed,
            },
            json,
        ),
        Command::Synth {
            kind,
            classes,
            n,
            seed,
            features,
            labels,
        } => synth(kind, classes, n, seed, &features, &labels),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<AppConfig, Failure> {
    let path = path
        .ok_or_else(|| anyhow!("no configuration given (--config or NB_CONFIG)"))
        .usage()?;
    AppConfig::load(path).usage()
}

fn read(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .usage()
}

fn serve(config: Option<&Path>, listen: Option<String>) -> Outcome {
    let mut config = load_config(config)?;
    if let Some(l) = listen {
        config.listen = l;
    }
    let backends = Arc::new(config.build_backends(None).usage()?);
    let runtime = tokio::runtime::Runtime::new().runtime()?;
    runtime.block_on(async move {
        let listener = TcpListener::bind(&config.listen)
            .await
            .with_context(|| format!("binding {}", config.listen))
            .usage()?;
        let addr = listener.local_addr().runtime()?;
        let sink: Arc<dyn TranscriptSink> = match &config.transcript_dir {
            Some(dir) => {
                let dir = config.resolve(dir);
                Arc::new(
                    FileTranscript::create(&dir)
                        .with_context(|| format!("opening transcript directory {}", dir.display()))
                        .usage()?,
                )
            }
            None => Arc::new(DiscardTranscript),
        };
        let hub = Arc::new(Hub::new(config.offline_buffer));
        let engine = Engine::new(backends, config.engine_config(), hub.clone(), sink);
        let gateway = Gateway::new(hub.clone(), engine.clone());
        let options = ServerOptions {
            static_dir: config.static_dir.as_ref().map(|d| config.resolve(d)),
            ..ServerOptions::default()
        };
        let router = server::router(gateway, options);
        tracing::info!(%addr, "ready");
        let closing = hub.clone();
        server::serve(listener, router, async move {
            shutdown_signal().await;
            tracing::info!("shutting down");
            closing.close_all();
        })
        .await
        .runtime()?;
        engine
            .shutdown()
            .await
            .context("flushing transcripts")
            .runtime()?;
        Ok(())
    })
}

async fn shutdown_signal() {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        match signal(SignalKind::terminate()) {
            Ok(mut term) => {
                tokio::select! {
                    _ = tokio::signal::ctrl_c() => {}
                    _ = term.recv() => {}
                }
            }
            Err(_) => {
                let _ = tokio::signal::ctrl_c().await;
            }
        }
    }
    #[cfg(not(unix))]
    {
        let _ = tokio::signal::ctrl_c().await;
    }
}

fn replay(
    config: Option<&Path>,
    script: &Path,
    out: Option<&Path>,
    seed: Option<u64>,
    json: bool,
    percent: bool,
) -> Outcome {
    let mut config = load_config(config)?;
    if let Some(seed) = seed {
        for task in Task::ALL {
            let spec = config.backends.spec_mut(task);
            spec.primary.seed = seed;
            if let Some(b) = spec.backup.as_mut() {
                b.seed = seed;
            }
        }
    }
    let script = ScriptedDialogue::parse(&read(script)?)
        .with_context(|| script.display().to_string())
        .usage()?;
    let outcome = replay_blocking(&config, &script).runtime()?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)
            .and_then(|_| std::fs::write(dir.join("transitions.tsv"), &outcome.transcript))
            .and_then(|_| std::fs::write(dir.join("turns.jsonl"), &outcome.turns))
            .with_context(|| format!("writing transcript to {}", dir.display()))
            .runtime()?;
    }
    let mut report = Report {
        choices: Some(outcome.choices),
        ..Report::default()
    };
    report.set_latency(&outcome.latency);
    let usage: BTreeMap<String, serde_json::Value> = outcome
        .backend_usage
        .iter()
        .map(|(t, (calls, backup))| (t.to_string(), json!({"calls": calls, "backup": backup})))
        .collect();
    if json {
        println!(
            "{}",
            json!({
                "turns": outcome.history.len(),
                "choices": report.choices,
                "latency_ms": report.latency_ms,
                "backends": usage,
            })
        );
    } else {
        println!("{:<18}  {:>10}", "turns", outcome.history.len());
        print!("{}", report.to_table(percent));
        for (task, (calls, backup)) in &outcome.backend_usage {
            if *backup > 0 {
                println!("backup[{task}]  {backup}/{calls}");
            }
        }
    }
    Ok(())
}

struct EvalInputs {
    predictions: Option<PathBuf>,
    transcript: Option<PathBuf>,
    generations: Option<PathBuf>,
    ratings: Option<PathBuf>,
}

fn evaluate(inputs: EvalInputs, bleu: BleuOptions, json: bool, percent: bool) -> Outcome {
    let EvalInputs {
        predictions,
        transcript,
        generations,
        ratings,
    } = inputs;
    if predictions.is_none() && transcript.is_none() && generations.is_none() && ratings.is_none() {
        return Err(Failure::Usage(anyhow!(
            "nothing to evaluate; pass --predictions, --transcript, --generations or --ratings"
        )));
    }
    let with_path = |path: &Path| {
        let p = path.display().to_string();
        move |e: eval::EvalError| anyhow!("{p}: {e}")
    };
    let mut report = Report::default();
    if let Some(path) = &predictions {
        let rows = eval::parse_predictions(&read(path)?)
            .map_err(with_path(path))
            .usage()?;
        report.classification = Some(
            eval::evaluate_predictions(&rows)
                .map_err(with_path(path))
                .usage()?,
        );
    }
    if let Some(path) = &transcript {
        let records = eval::parse_transition_log(&read(path)?)
            .map_err(with_path(path))
            .usage()?;
        let (choices, latencies) = eval::summarize_transitions(&records);
        report.choices = Some(choices);
        report.set_latency(&eval::latency_means(&latencies));
    }
    if let Some(path) = &generations {
        let pairs = eval::parse_generations(&read(path)?)
            .map_err(with_path(path))
            .usage()?;
        let (cands, refs): (Vec<Vec<String>>, Vec<Vec<String>>) = pairs
            .iter()
            .map(|(c, r)| (eval::tokenize(c), eval::tokenize(r)))
            .unzip();
        report.bleu = Some(
            eval::bleu_with(&cands, &refs, bleu)
                .map_err(with_path(path))
                .usage()?,
        );
        let mut total = 0.0;
        for (c, r) in cands.iter().zip(&refs) {
            total += eval::rouge_l_f1(c, r).map_err(with_path(path)).usage()?;
        }
        report.rouge_l_f1 = Some(total / cands.len() as f64);
    }
    if let Some(path) = &ratings {
        let (a, b) = eval::parse_ratings(&read(path)?)
            .map_err(with_path(path))
            .usage()?;
        report.kappa = Some(
            eval::cohens_kappa(&a, &b)
                .map_err(with_path(path))
                .usage()?,
        );
    }
    if json {
        println!("{}", serde_json::to_string(&report).runtime()?);
    } else {
        print!("{}", report.to_table(percent));
    }
    Ok(())
}

fn train(
    features: &Path,
    labels: &Path,
    out: &Path,
    holdout: usize,
    config: TrainConfig,
    json: bool,
) -> Outcome {
    let x = ensemble::parse_feature_rows(&read(features)?)
        .with_context(|| features.display().to_string())
        .usage()?;
    let y = ensemble::parse_label_rows(&read(labels)?)
        .with_context(|| labels.display().to_string())
        .usage()?;
    if x.len() != y.len() {
        return Err(Failure::Usage(anyhow!(
            "{} feature rows but {} labels",
            x.len(),
            y.len()
        )));
    }
    if holdout >= x.len() {
        return Err(Failure::Usage(anyhow!(
            "holdout of {holdout} leaves no training rows out of {}",
            x.len()
        )));
    }
    let cut = x.len() - holdout;
    let trained = ensemble::train_stacker(&x[..cut], &y[..cut], &config).usage()?;
    std::fs::write(out, trained.model.to_text())
        .with_context(|| format!("writing {}", out.display()))
        .runtime()?;
    let mut summary = json!({
        "train_rows": cut,
        "degenerate": trained.degenerate,
        "final_loss": trained.losses.last(),
    });
    if holdout > 0 {
        let k = trained.model.classes();
        let gold = &y[cut..];
        let mut stacked = Vec::with_capacity(holdout);
        let mut base_a = Vec::with_capacity(holdout);
        let mut base_b = Vec::with_capacity(holdout);
        for f in &x[cut..] {
            stacked.push(trained.model.predict(f).runtime()?.0);
            base_a.push(argmax(&f.values()[..k]));
            base_b.push(argmax(&f.values()[k..]));
        }
        let f1 = |preds: &[usize]| eval::micro_prf(preds, gold, k).map(|r| r.f1_micro);
        summary["holdout_rows"] = json!(holdout);
        summary["f1_stacked"] = json!(f1(&stacked).usage()?);
        summary["f1_discrete"] = json!(f1(&base_a).usage()?);
        summary["f1_probabilistic"] = json!(f1(&base_b).usage()?);
    }
    if json {
        println!("{summary}");
    } else {
        let obj = summary.as_object().expect("object");
        for (key, value) in obj {
            println!("{key:<18}  {value}");
        }
    }
    Ok(())
}

fn synth(
    kind: SynthKind,
    classes: usize,
    n: usize,
    seed: u64,
    features: &Path,
    labels: &Path,
) -> Outcome {
    if classes < 8 && matches!(kind, SynthKind::Complementary) {
        return Err(Failure::Usage(anyhow!(
            "the complementary set needs at least 8 classes"
        )));
    }
    if classes < 2 {
        return Err(Failure::Usage(anyhow!("need at least 2 classes")));
    }
    let set: SyntheticSet = match kind {
        SynthKind::Complementary => synthetic::complementary(classes, n, seed),
        SynthKind::APerfect => synthetic::a_perfect(classes, n, seed),
    };
    let rows: String = set
        .features
        .iter()
        .map(|f| {
            let line: Vec<String> = f.values().iter().map(|v| format!("{v:?}")).collect();
            line.join(" ") + "\n"
        })
        .collect();
    let gold: String = set.labels.iter().map(|y| format!("{y}\n")).collect();
    std::fs::write(features, rows)
        .and_then(|_| std::fs::write(labels, gold))
        .context("writing synthetic set")
        .runtime()?;
    Ok(())
}
