//! Command-line interface.

pub mod config;

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Arg, ArgAction, CommandFactory, FromArgMatches, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::checkpoint::{write_atomic, Checkpoint, Header, ModelConfig, SummarizerMeta};
use crate::corpus::{
    build_vocabs, corpus_stats, default_stopwords, encode, load_stopwords, parse_stopwords, read_jsonl, to_jsonl,
    tokenize, BowVocabulary, DocumentRecord, EncodedExample, Vocabulary,
};
use crate::eval::{cv_coherence, evaluate_run, SummaryRecord};
use crate::ntm::{Ntm, TopicWords};
use crate::numerics::ParamStore;
use crate::summarizer::GateMode;
use crate::synth::{summary_pairs, topic_corpus, TopicCorpusConfig};
use crate::training::{
    beam_for, decode_all, pretrain_ntm, train_joint, EvalSet, JointModel, MetricsLog, TopicPath,
};
use crate::{Error, Result};

use config::{RunConfig, FIELDS, SEED_ENV};

#[derive(Debug, Parser)]
#[command(
    name = "topicflow",
    version,
    about = "Flow-based neural topic model jointly trained with a topic-gated transformer summarizer",
    after_help = "Every subcommand accepts --config FILE (TOML, or JSON by extension) and one flag per config field. \
                  Flags override the file, which overrides the defaults."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the token and BoW vocabularies from a training file
    BuildVocab {
        /// Training records [default: <data-dir>/train.jsonl]
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory [default: <out-dir>]
        #[arg(long)]
        vocab_dir: Option<PathBuf>,
    },
    /// Pretrain the topic model on the training documents
    PretrainNtm {
        /// Training records [default: <data-dir>/train.jsonl]
        #[arg(long)]
        data: Option<PathBuf>,
        /// Directory holding vocab.tsv and bow_vocab.tsv [default: <out-dir>]
        #[arg(long)]
        vocab_dir: Option<PathBuf>,
        /// Checkpoint to write [default: <out-dir>/ntm.ckpt]
        #[arg(long)]
        out: Option<PathBuf>,
        /// Metrics CSV [default: <out-dir>/pretrain_metrics.csv]
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Jointly train the summarizer and the topic model
    Train {
        /// [default: <data-dir>/train.jsonl]
        #[arg(long)]
        train: Option<PathBuf>,
        /// [default: <data-dir>/valid.jsonl]
        #[arg(long)]
        valid: Option<PathBuf>,
        /// [default: <data-dir>/test.jsonl; skipped when absent]
        #[arg(long)]
        test: Option<PathBuf>,
        /// Pretrained topic model [default: <out-dir>/ntm.ckpt when present]
        #[arg(long)]
        ntm: Option<PathBuf>,
        /// Vocabulary directory when no topic-model checkpoint is used [default: <out-dir>]
        #[arg(long)]
        vocab_dir: Option<PathBuf>,
        /// Checkpoint to write [default: <out-dir>/model.ckpt]
        #[arg(long)]
        out: Option<PathBuf>,
        /// Metrics CSV [default: <out-dir>/metrics.csv]
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// JSON report [default: <out-dir>/report.json]
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Summarize documents with a trained checkpoint
    Summarize {
        /// [default: <out-dir>/model.ckpt]
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Records to summarize [default: <data-dir>/test.jsonl]
        #[arg(long)]
        data: Option<PathBuf>,
        /// JSONL output [default: <out-dir>/summaries.jsonl]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score summaries against references with ROUGE-1/2/L
    Eval {
        /// [default: <out-dir>/summaries.jsonl]
        #[arg(long)]
        outputs: Option<PathBuf>,
        /// [default: <data-dir>/test.jsonl]
        #[arg(long)]
        refs: Option<PathBuf>,
        /// Write the JSON report here
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write per-example scores here
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Dump the top words of every topic
    Topics {
        /// [default: <out-dir>/ntm.ckpt]
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Words per topic [default: eval.top_words]
        #[arg(long)]
        k: Option<usize>,
        /// Reference documents for C_V coherence
        #[arg(long)]
        coherence_data: Option<PathBuf>,
        /// Write the JSON here instead of standard output
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Record count and mean document/summary lengths
    Stats {
        /// [default: <data-dir>/train.jsonl]
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Pretrain topic models over a grid of topic counts and flow lengths on a synthetic corpus
    Sweep {
        #[arg(long, value_delimiter = ',', default_value = "1,4,16")]
        flows: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "5,10")]
        topic_counts: Vec<usize>,
        /// Documents in the synthetic corpus
        #[arg(long, default_value_t = 1000)]
        documents: usize,
        /// Topics used to generate the synthetic corpus
        #[arg(long, default_value_t = 5)]
        true_topics: usize,
        /// JSON grid [default: <out-dir>/sweep.json]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic document-summary corpus to <data-dir>, split 80/10/10
    Synth {
        #[arg(long, default_value_t = 200)]
        pairs: usize,
    },
}

fn command() -> clap::Command {
    let mut cmd = Cli::command();
    let names: Vec<String> = cmd.get_subcommands().map(|s| s.get_name().to_string()).collect();
    for name in names {
        cmd = cmd.mut_subcommand(name, |mut sc| {
            sc = sc.arg(
                Arg::new("config")
                    .long("config")
                    .value_name("FILE")
                    .value_parser(clap::value_parser!(PathBuf))
                    .help("TOML or JSON config file with per-module sections")
                    .help_heading("Config"),
            );
            for f in FIELDS {
                let mut arg = Arg::new(f.flag)
                    .long(f.flag)
                    .value_name("VALUE")
                    .value_parser(clap::value_parser!(String))
                    .action(ArgAction::Set)
                    .help(format!("{} [{}.{}, default: {}]", f.help, f.section, f.key, config::default_text(f)))
                    .help_heading("Config");
                if matches!(config::defaults()[f.section][f.key], serde_json::Value::Bool(_)) {
                    arg = arg.num_args(0..=1).default_missing_value("true");
                }
                sc = sc.arg(arg);
            }
            sc
        });
    }
    cmd
}

/// Runs the CLI and returns the process exit code: 0 on success, 1 on a
/// usage or configuration error, 2 on a runtime failure.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 1;
        }
    };
    let (_, sub) = matches.subcommand().expect("subcommand is required");
    let mut flags = Vec::new();
    for f in FIELDS {
        if let Some(raw) = sub.get_one::<String>(f.flag) {
            match config::flag_value(f, raw) {
                Ok(v) => flags.push((f, v)),
                Err(msg) => {
                    eprintln!("error: {msg}");
                    return 1;
                }
            }
        }
    }
    let file = match sub.get_one::<PathBuf>("config").map(|p| config::read_file(p)).transpose() {
        Ok(f) => f,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    let env_seed = std::env::var(SEED_ENV).ok();
    let config = match config::resolve(file, &flags, env_seed.as_deref()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    match execute(cli.command, &config) {
        Ok(()) => 0,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable value");
    s.push('\n');
    s
}

struct Paths<'a>(&'a RunConfig);

impl Paths<'_> {
    fn data(&self, name: &str) -> PathBuf {
        Path::new(&self.0.paths.data_dir).join(name)
    }

    fn out(&self, name: &str) -> PathBuf {
        Path::new(&self.0.paths.out_dir).join(name)
    }
}

fn stopwords_for(config: &RunConfig) -> Result<BTreeSet<String>> {
    if config.corpus.stopwords.is_empty() {
        Ok(default_stopwords())
    } else {
        load_stopwords(Path::new(&config.corpus.stopwords))
    }
}

struct Vocabs {
    vocab: Vocabulary,
    bow: BowVocabulary,
    stopwords: BTreeSet<String>,
}

fn read_vocabs(dir: &Path) -> Result<Vocabs> {
    let read = |name: &str| {
        let p = dir.join(name);
        std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
    };
    let stopwords = parse_stopwords(&read("stopwords.txt")?);
    Ok(Vocabs {
        vocab: Vocabulary::from_tsv(&read("vocab.tsv")?)?,
        bow: BowVocabulary::from_tsv(&read("bow_vocab.tsv")?, stopwords.clone())?,
        stopwords,
    })
}

fn vocabs_from_header(header: &Header) -> Result<Vocabs> {
    let stopwords: BTreeSet<String> = header.stopwords.iter().cloned().collect();
    let vocab = header
        .vocab
        .as_deref()
        .ok_or_else(|| Error::Checkpoint("checkpoint carries no token vocabulary".into()))?;
    Ok(Vocabs {
        vocab: Vocabulary::from_tsv(vocab)?,
        bow: BowVocabulary::from_tsv(&header.bow_vocab, stopwords.clone())?,
        stopwords,
    })
}

fn header_for(vocabs: &Vocabs, config: ModelConfig, step: u64) -> Header {
    Header {
        format_version: crate::checkpoint::FORMAT_VERSION,
        config,
        vocab: Some(vocabs.vocab.to_tsv()),
        bow_vocab: vocabs.bow.to_tsv(),
        stopwords: vocabs.stopwords.iter().cloned().collect(),
        step,
        tensors: Vec::new(),
    }
}

fn encode_all(records: &[DocumentRecord], v: &Vocabs, n_max: usize, m_max: usize) -> Vec<EncodedExample> {
    records.iter().map(|r| encode(r, &v.vocab, &v.bow, n_max, m_max)).collect()
}

fn references(records: &[DocumentRecord]) -> Vec<String> {
    records.iter().map(|r| r.summary.clone()).collect()
}

fn execute(command: Command, config: &RunConfig) -> Result<()> {
    let paths = Paths(config);
    let seed = config.training.seed;
    match command {
        Command::BuildVocab { data, vocab_dir } => {
            let data = data.unwrap_or_else(|| paths.data("train.jsonl"));
            let dir = vocab_dir.unwrap_or_else(|| paths.out(""));
            let records = read_jsonl(&data)?;
            let stopwords = stopwords_for(config)?;
            let cap = (config.corpus.bow_max_size > 0).then_some(config.corpus.bow_max_size);
            let (vocab, bow) = build_vocabs(&records, config.corpus.min_count, &stopwords, cap)?;
            write_text(&dir.join("vocab.tsv"), &vocab.to_tsv())?;
            write_text(&dir.join("bow_vocab.tsv"), &bow.to_tsv())?;
            let list: String = stopwords.iter().map(|s| format!("{s}\n")).collect();
            write_text(&dir.join("stopwords.txt"), &list)?;
            println!(
                "{}",
                json!({"records": records.len(), "vocab_size": vocab.len(), "bow_vocab_size": bow.len()})
            );
        }
        Command::PretrainNtm {
            data,
            vocab_dir,
            out,
            metrics,
        } => {
            let records = read_jsonl(&data.unwrap_or_else(|| paths.data("train.jsonl")))?;
            let vocabs = read_vocabs(&vocab_dir.unwrap_or_else(|| paths.out("")))?;
            let examples = encode_all(&records, &vocabs, config.corpus.n_max, config.corpus.m_max);
            let ntm_config = config.ntm.config(vocabs.bow.len());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let ntm = Ntm::new(ntm_config, &mut store, &mut rng)?;
            let mut log = MetricsLog::default();
            let result = pretrain_ntm(&ntm, &mut store, &examples, &config.training, &mut rng, &mut log);
            let steps = log.rows.last().map_or(0, |r| r.step as u64);
            let ckpt = Checkpoint::new(
                header_for(
                    &vocabs,
                    ModelConfig {
                        ntm: ntm_config,
                        summarizer: None,
                    },
                    steps,
                ),
                store,
            );
            ckpt.save(&out.unwrap_or_else(|| paths.out("ntm.ckpt")))?;
            write_text(&metrics.unwrap_or_else(|| paths.out("pretrain_metrics.csv")), &log.to_csv())?;
            let curve = result?;
            println!(
                "{}",
                json!({"epochs": curve.len(), "first_loss": curve.first(), "final_loss": curve.last()})
            );
        }
        Command::Train {
            train,
            valid,
            test,
            ntm,
            vocab_dir,
            out,
            metrics,
            report,
        } => train_command(
            config,
            TrainPaths {
                train: train.unwrap_or_else(|| paths.data("train.jsonl")),
                valid: valid.unwrap_or_else(|| paths.data("valid.jsonl")),
                test: test.or_else(|| Some(paths.data("test.jsonl")).filter(|p| p.exists())),
                ntm: ntm.or_else(|| Some(paths.out("ntm.ckpt")).filter(|p| p.exists())),
                vocab_dir: vocab_dir.unwrap_or_else(|| paths.out("")),
                out: out.unwrap_or_else(|| paths.out("model.ckpt")),
                metrics: metrics.unwrap_or_else(|| paths.out("metrics.csv")),
                report: report.unwrap_or_else(|| paths.out("report.json")),
            },
        )?,
        Command::Summarize { checkpoint, data, out } => {
            let ckpt = Checkpoint::load(&checkpoint.unwrap_or_else(|| paths.out("model.ckpt")))?;
            let meta = ckpt
                .header
                .config
                .summarizer
                .clone()
                .ok_or_else(|| Error::Checkpoint("checkpoint holds no summarizer; run train first".into()))?;
            let vocabs = vocabs_from_header(&ckpt.header)?;
            let path = match (meta.topic_path, meta.forced_gate) {
                (false, _) => TopicPath::Off,
                (true, Some(v)) => TopicPath::Gated(GateMode::Forced(v)),
                (true, None) => TopicPath::Gated(GateMode::Learned),
            };
            let model = JointModel::from_store(
                ckpt.header.config.ntm,
                meta.transformer.clone(),
                meta.vocab_size,
                path,
                &ckpt.store,
            )?;
            let records = read_jsonl(&data.unwrap_or_else(|| paths.data("test.jsonl")))?;
            let examples = encode_all(&records, &vocabs, meta.n_max, meta.m_max);
            let beam = beam_for(meta.m_max, config.eval.beam, config.eval.length_penalty);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let decoded = decode_all(
                &model,
                &ckpt.store,
                &examples,
                &vocabs.vocab,
                &beam,
                config.eval.theta_mode,
                &mut rng,
            )?;
            let rows: Vec<SummaryRecord> = records
                .iter()
                .zip(decoded)
                .map(|(r, (text, h))| SummaryRecord {
                    id: r.id.clone(),
                    summary: text,
                    score: Some(h.score),
                })
                .collect();
            let out = out.unwrap_or_else(|| paths.out("summaries.jsonl"));
            write_text(&out, &to_jsonl(&rows))?;
            println!("{}", json!({"summaries": rows.len(), "out": out.display().to_string()}));
        }
        Command::Eval {
            outputs,
            refs,
            out,
            csv,
        } => {
            let outputs = read_summaries(&outputs.unwrap_or_else(|| paths.out("summaries.jsonl")))?;
            let refs = read_summaries(&refs.unwrap_or_else(|| paths.data("test.jsonl")))?;
            let run = evaluate_run(&outputs, &refs)?;
            if let Some(p) = out {
                write_text(&p, &to_json(&run.report))?;
            }
            if let Some(p) = csv {
                write_text(&p, &run.to_csv())?;
            }
            println!("{}", run.report.table());
            println!("{}", serde_json::to_string(&run.report).expect("serializable"));
        }
        Command::Topics {
            checkpoint,
            k,
            coherence_data,
            out,
        } => {
            let ckpt = Checkpoint::load(&checkpoint.unwrap_or_else(|| paths.out("ntm.ckpt")))?;
            let stopwords: BTreeSet<String> = ckpt.header.stopwords.iter().cloned().collect();
            let bow = BowVocabulary::from_tsv(&ckpt.header.bow_vocab, stopwords)?;
            let ntm = Ntm::from_store(ckpt.header.config.ntm, &ckpt.store)?;
            let k = k.unwrap_or(config.eval.top_words);
            let topics = ntm.top_words(&ckpt.store, &bow, k)?;
            let coherence = match coherence_data {
                Some(p) => {
                    let docs: Vec<Vec<String>> = read_jsonl(&p)?.iter().map(|r| tokenize(&r.document)).collect();
                    let words: Vec<Vec<String>> = topics.iter().map(|t| t.top_words.clone()).collect();
                    Some(cv_coherence(&words, &docs, config.eval.window)?)
                }
                None => None,
            };
            let dump = TopicDump {
                k,
                topics,
                cv: coherence.as_ref().map(|c| c.per_topic.clone()),
                mean_cv: coherence.map(|c| c.mean),
            };
            match out {
                Some(p) => write_text(&p, &to_json(&dump))?,
                None => print!("{}", to_json(&dump)),
            }
        }
        Command::Stats { data } => {
            let records = read_jsonl(&data.unwrap_or_else(|| paths.data("train.jsonl")))?;
            let s = corpus_stats(&records);
            println!(
                "{}",
                json!({"count": s.count, "mean_document_len": s.mean_document_len, "mean_summary_len": s.mean_summary_len})
            );
        }
        Command::Sweep {
            flows,
            topic_counts,
            documents,
            true_topics,
            out,
        } => {
            let grid = sweep(config, &flows, &topic_counts, documents, true_topics)?;
            write_text(&out.unwrap_or_else(|| paths.out("sweep.json")), &to_json(&grid))?;
            print!("{}", grid.markdown());
        }
        Command::Synth { pairs } => {
            if pairs < 10 {
                return Err(Error::Config("synth needs at least 10 pairs".into()));
            }
            let dir = paths.data("");
            let records = summary_pairs(pairs, &mut ChaCha8Rng::seed_from_u64(seed))?;
            let (n_train, n_valid) = (pairs * 8 / 10, pairs / 10);
            write_text(&dir.join("train.jsonl"), &to_jsonl(&records[..n_train]))?;
            write_text(&dir.join("valid.jsonl"), &to_jsonl(&records[n_train..n_train + n_valid]))?;
            write_text(&dir.join("test.jsonl"), &to_jsonl(&records[n_train + n_valid..]))?;
            println!(
                "{}",
                json!({"train": n_train, "valid": n_valid, "test": pairs - n_train - n_valid})
            );
        }
    }
    Ok(())
}

fn read_summaries(path: &Path) -> Result<Vec<SummaryRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| Error::Json {
                context: format!("{}:{}", path.display(), n + 1),
                source: e,
            })
        })
        .collect()
}

#[derive(Debug, Serialize)]
struct TopicDump {
    k: usize,
    topics: Vec<TopicWords>,
    #[serde(skip_serializing_if = "Option::is_none")]
    cv: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mean_cv: Option<f64>,
}

struct TrainPaths {
    train: PathBuf,
    valid: PathBuf,
    test: Option<PathBuf>,
    ntm: Option<PathBuf>,
    vocab_dir: PathBuf,
    out: PathBuf,
    metrics: PathBuf,
    report: PathBuf,
}

fn train_command(config: &RunConfig, p: TrainPaths) -> Result<()> {
    let pretrained = p.ntm.as_deref().map(Checkpoint::load).transpose()?;
    let vocabs = match &pretrained {
        Some(c) if c.header.vocab.is_some() => vocabs_from_header(&c.header)?,
        _ => read_vocabs(&p.vocab_dir)?,
    };
    let (n_max, m_max) = (config.corpus.n_max, config.corpus.m_max);
    let load = |path: &Path| -> Result<(Vec<EncodedExample>, Vec<String>)> {
        let records = read_jsonl(path)?;
        Ok((encode_all(&records, &vocabs, n_max, m_max), references(&records)))
    };
    let (train, _) = load(&p.train)?;
    let (valid, valid_refs) = load(&p.valid)?;
    let (test, test_refs) = match &p.test {
        Some(t) => load(t)?,
        None => (Vec::new(), Vec::new()),
    };
    let ntm_config = match &pretrained {
        Some(c) => c.header.config.ntm,
        None => config.ntm.config(vocabs.bow.len()),
    };
    if ntm_config.vocab_size != vocabs.bow.len() {
        return Err(Error::Checkpoint(format!(
            "topic model expects {} BoW words but the vocabulary has {}",
            ntm_config.vocab_size,
            vocabs.bow.len()
        )));
    }
    let topic_path = config.model.topic_path()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.training.seed);
    let mut store = ParamStore::new();
    let model = JointModel::new(
        ntm_config,
        config.summarizer.clone(),
        vocabs.vocab.len(),
        topic_path,
        &mut store,
        &mut rng,
    )?;
    if let Some(c) = &pretrained {
        crate::checkpoint::copy_matching(&c.store, &mut store)?;
    }
    let mut log = MetricsLog::default();
    let beam = beam_for(m_max, config.eval.beam, config.eval.length_penalty);
    let result = train_joint(
        &model,
        &mut store,
        &train,
        &EvalSet {
            examples: &valid,
            references: &valid_refs,
        },
        &EvalSet {
            examples: &test,
            references: &test_refs,
        },
        &vocabs.vocab,
        &config.training,
        &beam,
        &mut rng,
        &mut log,
    );
    write_text(&p.metrics, &log.to_csv())?;
    let report = result?;
    let best_step = report
        .retained
        .iter()
        .min_by(|a, b| a.valid_loss.total_cmp(&b.valid_loss))
        .map_or(0, |r| r.step as u64);
    let meta = SummarizerMeta {
        transformer: config.summarizer.clone(),
        vocab_size: vocabs.vocab.len(),
        topic_path: topic_path.is_on(),
        forced_gate: match topic_path {
            TopicPath::Gated(GateMode::Forced(v)) => Some(v),
            _ => None,
        },
        n_max,
        m_max,
    };
    let header = header_for(
        &vocabs,
        ModelConfig {
            ntm: ntm_config,
            summarizer: Some(meta),
        },
        best_step,
    );
    Checkpoint::new(header, store).save(&p.out)?;
    let retained: Vec<_> = report
        .retained
        .iter()
        .map(|r| {
            json!({"step": r.step, "valid_loss": r.valid_loss, "test_loss": r.test_loss,
                   "test_rouge": {"rouge1": r.test_rouge.0, "rouge2": r.test_rouge.1, "rougeL": r.test_rouge.2}})
        })
        .collect();
    let summary = json!({
        "lambda_ntm": config.training.lambda_ntm,
        "pretrained_ntm": p.ntm.as_ref().map(|x| x.display().to_string()),
        "steps": config.training.max_steps,
        "evaluations": report.evals,
        "retained": retained,
        "mean_test_rouge": report.mean_test_rouge,
        "best_test_rouge": report.best_test_rouge,
        "mean_test_loss": report.mean_test_loss,
        "config": config,
    });
    write_text(&p.report, &to_json(&summary))?;
    println!(
        "mean test ROUGE-1/2/L over {} checkpoints: {}",
        report.retained.len(),
        report.mean_test_rouge.table()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct SweepCell {
    topics: usize,
    flow_length: usize,
    final_loss: f64,
    cv: f64,
}

#[derive(Debug, Serialize)]
struct SweepGrid {
    documents: usize,
    true_topics: usize,
    epochs: usize,
    flows: Vec<usize>,
    topic_counts: Vec<usize>,
    cells: Vec<SweepCell>,
}

impl SweepGrid {
    fn markdown(&self) -> String {
        let mut s = String::from("| topics \\ flow length |");
        for k in &self.flows {
            let _ = write!(s, " {k} |");
        }
        s.push_str("\n|---|");
        s.push_str(&"---|".repeat(self.flows.len()));
        s.push('\n');
        for &t in &self.topic_counts {
            let _ = write!(s, "| {t} |");
            for &k in &self.flows {
                if let Some(c) = self.cells.iter().find(|c| c.topics == t && c.flow_length == k) {
                    let _ = write!(s, " C_V {:.3}, loss {:.2} |", c.cv, c.final_loss);
                }
            }
            s.push('\n');
        }
        s
    }
}

fn sweep(config: &RunConfig, flows: &[usize], topics: &[usize], documents: usize, true_topics: usize) -> Result<SweepGrid> {
    if flows.is_empty() || topics.is_empty() || topics.contains(&0) {
        return Err(Error::Config("sweep needs non-empty --flows and positive --topic-counts".into()));
    }
    let seed = config.training.seed;
    let corpus = topic_corpus(
        &TopicCorpusConfig {
            topics: true_topics,
            documents,
            ..TopicCorpusConfig::default()
        },
        &mut ChaCha8Rng::seed_from_u64(seed),
    )?;
    let examples = corpus.examples();
    let docs = corpus.documents();
    let bow = corpus.bow_vocab()?;
    let top = config.eval.top_words.min(bow.len());
    let mut cells = Vec::new();
    for &t in topics {
        for &k in flows {
            let mut section = config.ntm.clone();
            section.topics = t;
            section.flow_length = k;
            section.latent_dim = 0;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let ntm = Ntm::new(section.config(bow.len()), &mut store, &mut rng)?;
            let curve = pretrain_ntm(&ntm, &mut store, &examples, &config.training, &mut rng, &mut MetricsLog::default())?;
            let words: Vec<Vec<String>> = ntm
                .top_words(&store, &bow, top)?
                .into_iter()
                .map(|w| w.top_words)
                .collect();
            let cv = cv_coherence(&words, &docs, config.eval.window)?;
            eprintln!("topics {t} flow {k}: loss {:.3} C_V {:.4}", curve.last().copied().unwrap_or(f64::NAN), cv.mean);
            cells.push(SweepCell {
                topics: t,
                flow_length: k,
                final_loss: curve.last().copied().unwrap_or(f64::NAN),
                cv: cv.mean,
            });
        }
    }
    Ok(SweepGrid {
        documents,
        true_topics,
        epochs: config.training.pretrain_epochs,
        flows: flows.to_vec(),
        topic_counts: topics.to_vec(),
        cells,
    })
}
