use std::path::PathBuf;
use std::process::ExitCode;

use clap::builder::PossibleValuesParser;
use clap::{Args, Parser, Subcommand, ValueEnum};

use nnlp::commands::classifier::{train_classifier, EncoderKind};
use nnlp::commands::embeddings::train_embeddings;
use nnlp::commands::lm::train_lm;
use nnlp::commands::tagger::{train_tagger, TaggerMode};
use nnlp::commands::{Outcome, RunConfig};
use nnlp::data::{read_labeled, read_plain, read_tagged, LabeledSentence, TaggedSentence};
use nnlp::gradcheck::{self, Scope};
use nnlp::recurrent::RnnVariant;
use nnlp::synthetic;
use nnlp::Result;

#[derive(Parser)]
#[command(name = "nnlp", version, about = "Neural network NLP demos on a define-by-run autodiff core")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compare backward gradients with central differences.
    Gradcheck {
        #[arg(long, default_value = "all", value_parser = PossibleValuesParser::new(Scope::NAMES))]
        scope: String,
    },
    /// Train a part-of-speech style tagger on `token<TAB>tag` lines.
    TrainTagger {
        #[arg(long, value_enum, default_value_t = Mode::Window)]
        mode: Mode,
        #[command(flatten)]
        common: Common,
    },
    /// Train a recurrent language model on plain text and report perplexity.
    TrainLm {
        #[command(flatten)]
        common: Common,
    },
    /// Train a sentence classifier on `label<TAB>sentence` lines.
    TrainClassifier {
        #[arg(long, value_enum, default_value_t = Encoder::Cbow)]
        encoder: Encoder,
        /// Train one head per `|`-separated label.
        #[arg(long)]
        multitask: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Train word embeddings with a window-ranking objective.
    TrainEmbeddings {
        /// Contexts as offset-tagged tokens such as `the:+2`.
        #[arg(long)]
        positional: bool,
        /// Print the nearest neighbors of this word (repeatable).
        #[arg(long)]
        query: Vec<String>,
        #[arg(long, default_value_t = 5)]
        neighbors: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Write a built-in synthetic corpus as `train.txt` and `dev.txt`.
    Generate {
        #[arg(long, value_enum)]
        corpus: Corpus,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Window,
    Memm,
    Crf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Encoder {
    Cbow,
    Conv,
    Rnn,
    Birnn,
    Recnn,
}

#[derive(Clone, Copy, ValueEnum)]
enum Variant {
    Srnn,
    Lstm,
    Gru,
    Scrn,
}

#[derive(Clone, Copy, ValueEnum)]
enum Corpus {
    /// 5-tag tagging corpus.
    Tagged,
    /// "not good" / "not bad" sentiment templates.
    Negation,
    /// Recall the token 10 steps back.
    Recall,
    /// Cyclic language-model text.
    Periodic,
    /// Two disjoint topics for embeddings.
    Topics,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long)]
    model_out: Option<PathBuf>,
    /// Tab-separated `epoch split metric value` rows, rewritten every epoch.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    /// Decay `lambda` of `lr / (1 + lr * lambda * t)`; 0 keeps the rate fixed.
    #[arg(long, default_value_t = 0.0)]
    lr_lambda: f64,
    /// Global gradient-norm threshold; 0 disables clipping.
    #[arg(long, default_value_t = 5.0)]
    clip: f64,
    #[arg(long, default_value_t = 0.0)]
    l2: f64,
    #[arg(long, default_value_t = 1)]
    minibatch: usize,
    #[arg(long, default_value_t = 0.0)]
    dropout: f64,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 32)]
    hidden: usize,
    #[arg(long, default_value_t = 2)]
    window: usize,
    #[arg(long, value_enum, default_value_t = Variant::Lstm)]
    variant: Variant,
    #[arg(long, default_value_t = 1)]
    min_count: usize,
    #[arg(long)]
    lowercase: bool,
    /// Print the loss after every epoch.
    #[arg(short, long)]
    verbose: bool,
}

impl Common {
    fn config(&self) -> std::result::Result<RunConfig, Failure> {
        let cfg = RunConfig {
            train: Some(self.train.clone()),
            dev: self.dev.clone(),
            model_out: self.model_out.clone(),
            metrics: self.metrics.clone(),
            seed: self.seed,
            epochs: self.epochs,
            lr: self.lr,
            lr_lambda: self.lr_lambda,
            clip: (self.clip > 0.0).then_some(self.clip),
            l2: self.l2,
            minibatch: self.minibatch,
            dropout: self.dropout,
            dim: self.dim,
            hidden: self.hidden,
            window: self.window,
            variant: match self.variant {
                Variant::Srnn => RnnVariant::Srnn,
                Variant::Lstm => RnnVariant::Lstm,
                Variant::Gru => RnnVariant::Gru,
                Variant::Scrn => RnnVariant::Scrn,
            },
            positional: false,
            min_count: self.min_count,
            lowercase: self.lowercase,
            verbose: self.verbose,
        };
        cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
        Ok(cfg)
    }
}

enum Failure {
    /// Inconsistent flags; exit code 2.
    Usage(String),
    /// Data, format or numeric failure; exit code 1.
    Run(nnlp::Error),
}

impl From<nnlp::Error> for Failure {
    fn from(e: nnlp::Error) -> Self {
        Failure::Run(e)
    }
}

fn report<M>(out: &Outcome<M>) {
    if let Some(d) = out.dev_loss {
        println!("dev_loss\t{d}");
    }
    for (k, v) in &out.summary {
        println!("{k}\t{v}");
    }
}

fn run(cli: Cli) -> std::result::Result<bool, Failure> {
    match cli.command {
        Command::Gradcheck { scope } => {
            let scope: Scope = scope.parse()?;
            let results = gradcheck::run_each(scope, |r| println!("{r}"))?;
            let failed: Vec<String> = results
                .iter()
                .filter(|r| !r.passed())
                .map(|r| format!("{}/{}", r.scope, r.name))
                .collect();
            if failed.is_empty() {
                println!("{} cases passed", results.len());
                Ok(true)
            } else {
                eprintln!("failed: {}", failed.join(", "));
                Ok(false)
            }
        }
        Command::TrainTagger { mode, common } => {
            let cfg = common.config()?;
            let train = read_tagged(&common.train)?;
            let dev: Vec<TaggedSentence> = common.dev.as_ref().map(read_tagged).transpose()?.unwrap_or_default();
            let mode = match mode {
                Mode::Window => TaggerMode::Window,
                Mode::Memm => TaggerMode::Memm,
                Mode::Crf => TaggerMode::Crf,
            };
            report(&train_tagger(&cfg, mode, &train, &dev)?);
            Ok(true)
        }
        Command::TrainLm { common } => {
            let cfg = common.config()?;
            let train = read_plain(&common.train, cfg.lowercase)?;
            let dev = common.dev.as_ref().map(|p| read_plain(p, cfg.lowercase)).transpose()?.unwrap_or_default();
            report(&train_lm(&cfg, &train, &dev)?);
            Ok(true)
        }
        Command::TrainClassifier {
            encoder,
            multitask,
            common,
        } => {
            let cfg = common.config()?;
            let train = read_labeled(&common.train, cfg.lowercase)?;
            let dev: Vec<LabeledSentence> = common
                .dev
                .as_ref()
                .map(|p| read_labeled(p, cfg.lowercase))
                .transpose()?
                .unwrap_or_default();
            let kind = match encoder {
                Encoder::Cbow => EncoderKind::Cbow,
                Encoder::Conv => EncoderKind::Conv,
                Encoder::Rnn => EncoderKind::Rnn,
                Encoder::Birnn => EncoderKind::BiRnn,
                Encoder::Recnn => EncoderKind::RecNn,
            };
            report(&train_classifier(&cfg, kind, multitask, &train, &dev)?);
            Ok(true)
        }
        Command::TrainEmbeddings {
            positional,
            query,
            neighbors,
            common,
        } => {
            let mut cfg = common.config()?;
            cfg.positional = positional;
            let train = read_plain(&common.train, cfg.lowercase)?;
            let dev = common.dev.as_ref().map(|p| read_plain(p, cfg.lowercase)).transpose()?.unwrap_or_default();
            let out = train_embeddings(&cfg, &train, &dev)?;
            report(&out);
            for q in &query {
                let near = out.model.nearest(&out.store, q, neighbors)?;
                let line: Vec<String> = near.iter().map(|(w, c)| format!("{w}:{c:.4}")).collect();
                println!("{q}\t{}", line.join(" "));
            }
            Ok(true)
        }
        Command::Generate { corpus, out, seed } => {
            generate(corpus, &out, seed)?;
            Ok(true)
        }
    }
}

fn generate(corpus: Corpus, dir: &std::path::Path, seed: u64) -> Result<()> {
    let io = |p: &std::path::Path, e| nnlp::Error::Io {
        path: p.to_path_buf(),
        source: e,
    };
    std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let plain = |s: &[Vec<String>]| s.iter().map(|w| w.join(" ") + "\n").collect::<String>();
    let labeled = |s: &[LabeledSentence]| {
        s.iter()
            .map(|ex| format!("{}\t{}\n", ex.labels.join("|"), ex.words.join(" ")))
            .collect::<String>()
    };
    let tagged = |s: &[TaggedSentence]| {
        s.iter()
            .map(|ts| {
                let mut block: String = ts.words.iter().zip(&ts.tags).map(|(w, t)| format!("{w}\t{t}\n")).collect();
                block.push('\n');
                block
            })
            .collect::<String>()
    };
    let (train, dev) = match corpus {
        Corpus::Tagged => (tagged(&synthetic::tagged(500, seed)), tagged(&synthetic::tagged(100, seed + 1))),
        Corpus::Negation => (
            labeled(&synthetic::negation_templates(200, seed)),
            labeled(&synthetic::negation_templates(200, seed + 1)),
        ),
        Corpus::Recall => {
            let all = synthetic::recall(2000, 10, seed);
            (labeled(&all[..1600]), labeled(&all[1600..]))
        }
        Corpus::Periodic => (
            plain(&synthetic::periodic(300, 5, 6, 14, seed)),
            plain(&synthetic::periodic(60, 5, 6, 14, seed + 1)),
        ),
        Corpus::Topics => (
            plain(&synthetic::two_topics(200, 8, 8, seed)),
            plain(&synthetic::two_topics(40, 8, 8, seed + 1)),
        ),
    };
    for (name, text) in [("train.txt", train), ("dev.txt", dev)] {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(|e| io(&p, e))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
