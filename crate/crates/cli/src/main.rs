//! `kblstm` — command-line front end for the knowledge-aware sequence
//! tagging toolkit.
//!
//! Every subcommand follows the same conventions: logs go to standard
//! error, machine-readable results go to standard output, and settings
//! resolve as command-line flags over config-file values over built-in
//! defaults. Training subcommands accept `--config FILE` pointing at a
//! flat UTF-8 file of `key = value` lines whose keys mirror the flag
//! names (underscores instead of dashes). The `KBLSTM_SEED` environment
//! variable supplies the seed when neither a flag nor the file does.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/validation error,
//! 3 numerical-gate failure.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use kblstm::audit;
use kblstm::error::Error;
use kblstm::kbembed::{
    self, eval_link_prediction, load_kb_model, read_triples_file, save_kb_model, train_kb,
    EvalMode, KbTrainConfig, KbVocab, TripleStore,
};
use kblstm::knowattn::{parse_lexicon, write_lexicon, ConceptLexicon};
use kblstm::pipeline::{
    self, dump_attention, evaluate_spans, format_metrics, gold_entity_spans, gold_token_spans,
    load_model, read_corpus_file, save_model, tag_chunks, tag_entities, tag_events, write_corpus,
    Arch, BoundarySource, Objective, RawSentence, RawToken, Scores, Span, SpanPrediction,
    TaggerConfig, TaskKind,
};
use kblstm::synth::{gen_disambiguation, write_answer_key, SynthSpec};
use kblstm::validate::{validate_files, FileSet};

const SEED_ENV: &str = "KBLSTM_SEED";

// --------------------------------------------------------------------
// Failure classes and exit codes
// --------------------------------------------------------------------

/// A failed run, classified so scripts can branch on the exit code.
#[derive(Debug)]
enum Failure {
    /// Bad flags, bad config keys, out-of-range values — exit 1.
    Usage(String),
    /// Unreadable or malformed data, failed validation — exit 2.
    Data(String),
    /// The gradient audit exceeded its error gate — exit 3.
    Gate(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Gate(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Gate(m) => m,
        }
    }
}

/// Library errors reaching the top level concern the data being
/// processed; anything caught earlier is classified at the catch site.
impl From<Error> for Failure {
    fn from(e: Error) -> Failure {
        Failure::Data(e.to_string())
    }
}

fn usage(e: impl Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn data(e: impl Display) -> Failure {
    Failure::Data(e.to_string())
}

type CmdResult<T> = Result<T, Failure>;

// --------------------------------------------------------------------
// Config-file resolution: flags > file > defaults
// --------------------------------------------------------------------

/// Key/value pairs from a `--config` file. Commands `take` the keys they
/// understand; whatever remains when `finish` runs is a usage error, so
/// misspelled keys never pass silently.
#[derive(Debug, Default)]
struct FileConfig {
    source: String,
    values: BTreeMap<String, String>,
}

impl FileConfig {
    fn load(path: Option<&Path>) -> CmdResult<FileConfig> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config file {}: {e}", path.display())))?;
        let mut values = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(usage(format!(
                    "{}:{}: expected `key = value`, got {line:?}",
                    path.display(),
                    lineno + 1
                )));
            };
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(usage(format!(
                    "{}:{}: empty key",
                    path.display(),
                    lineno + 1
                )));
            }
            if values.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(usage(format!(
                    "{}:{}: duplicate key {key:?}",
                    path.display(),
                    lineno + 1
                )));
            }
        }
        Ok(FileConfig {
            source: path.display().to_string(),
            values,
        })
    }

    fn take<T: FromStr>(&mut self, key: &str) -> CmdResult<Option<T>>
    where
        T::Err: Display,
    {
        match self.values.remove(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| usage(format!("{}: key {key}: {e} (value {v:?})", self.source))),
        }
    }

    fn take_path(&mut self, key: &str) -> Option<PathBuf> {
        self.values.remove(key).map(PathBuf::from)
    }

    fn take_string(&mut self, key: &str) -> Option<String> {
        self.values.remove(key)
    }

    fn finish(self) -> CmdResult<()> {
        if let Some(key) = self.values.keys().next() {
            return Err(usage(format!(
                "{}: unknown key {key:?} for this command",
                self.source
            )));
        }
        Ok(())
    }
}

/// Flag beats file beats default.
fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

/// Flag or file; there is no default for required settings.
fn require<T>(what: &str, flag: Option<T>, file: Option<T>) -> CmdResult<T> {
    flag.or(file)
        .ok_or_else(|| usage(format!("missing required {what}")))
}

/// Seed resolution adds one layer below the config file: the
/// `KBLSTM_SEED` environment variable, then 0.
fn resolve_seed(flag: Option<u64>, file: Option<u64>) -> CmdResult<u64> {
    if let Some(seed) = flag.or(file) {
        return Ok(seed);
    }
    match std::env::var(SEED_ENV) {
        Ok(raw) => raw
            .trim()
            .parse()
            .map_err(|_| usage(format!("{SEED_ENV}={raw:?} is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

fn parse_objective(name: &str) -> CmdResult<Objective> {
    match name {
        "crf" => Ok(Objective::Crf),
        "softmax" => Ok(Objective::Softmax),
        other => Err(usage(format!(
            "objective {other:?} is not one of: crf, softmax"
        ))),
    }
}

fn parse_arch(name: &str) -> CmdResult<Arch> {
    match name {
        "plain" => Ok(Arch::Plain),
        "fea" => Ok(Arch::Fea),
        "kb" => Ok(Arch::Kb),
        other => Err(usage(format!(
            "arch {other:?} is not one of: plain, fea, kb"
        ))),
    }
}

// --------------------------------------------------------------------
// Argument structs
// --------------------------------------------------------------------

#[derive(Parser, Debug)]
#[command(
    name = "kblstm",
    version,
    about = "Knowledge-aware BiLSTM sequence tagging: KB embeddings, \
             entity extraction, event triggers",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Train bilinear knowledge-graph embeddings from triple files
    KbTrain(KbTrainArgs),
    /// Rank link-prediction candidates with a trained embedding model
    KbEval(KbEvalArgs),
    /// Train the stage-1 mention chunker (untyped ENT spans)
    ChunkerTrain(ChunkerTrainArgs),
    /// Train the stage-2 mention typer over chunk units
    TyperTrain(TyperTrainArgs),
    /// Train the token-level event-trigger tagger
    EventTrain(EventTrainArgs),
    /// Tag sentences with trained models, writing a corpus to stdout
    Tag(TagArgs),
    /// Score predicted corpora against a gold corpus
    Eval(EvalArgs),
    /// Generate the synthetic disambiguation benchmark
    SynthGen(SynthGenArgs),
    /// Run every module's gradient-check suite
    GradAudit(GradAuditArgs),
    /// Dump attention and sentinel weights for tagged sentences
    AttnDump(AttnDumpArgs),
    /// Check corpus/triple/lexicon/embedding files for violations
    Validate(ValidateArgs),
}

/// Hyperparameters shared by the three tagger-training subcommands.
/// Every flag may instead come from the `--config` file under the same
/// name; explicit flags win.
#[derive(Args, Debug)]
struct TrainHypers {
    /// Flat `key = value` config file; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    /// LSTM hidden units per direction
    #[arg(long)]
    hidden: Option<usize>,
    /// Word-embedding dimension
    #[arg(long)]
    word_dim: Option<usize>,
    /// Input dropout rate in [0, 1)
    #[arg(long)]
    dropout: Option<f64>,
    /// SGD learning rate (> 0)
    #[arg(long)]
    lr: Option<f64>,
    /// Maximum training epochs
    #[arg(long)]
    epochs: Option<usize>,
    /// Early-stopping patience in epochs
    #[arg(long)]
    patience: Option<usize>,
    /// Global gradient-norm clip
    #[arg(long)]
    clip: Option<f64>,
    /// Rate of replacing training words with the unknown token
    #[arg(long)]
    unk_rate: Option<f64>,
    /// Inference objective: crf or softmax
    #[arg(long)]
    objective: Option<String>,
    /// Random seed (default: $KBLSTM_SEED, then 0)
    #[arg(long)]
    seed: Option<u64>,
}

impl TrainHypers {
    /// Resolve into a validated training config, consuming the hyper
    /// keys from `fc`.
    fn resolve(&self, task: TaskKind, arch: Arch, project: bool, fc: &mut FileConfig) -> CmdResult<TaggerConfig> {
        let base = TaggerConfig::new(task);
        let objective = match self.objective.clone().or_else(|| fc.take_string("objective")) {
            Some(name) => parse_objective(&name)?,
            None => base.objective,
        };
        let config = TaggerConfig {
            task,
            arch,
            objective,
            hidden: pick(self.hidden, fc.take("hidden")?, base.hidden),
            word_dim: pick(self.word_dim, fc.take("word_dim")?, base.word_dim),
            dropout: pick(self.dropout, fc.take("dropout")?, base.dropout),
            lr: pick(self.lr, fc.take("lr")?, base.lr),
            epochs: pick(self.epochs, fc.take("epochs")?, base.epochs),
            patience: pick(self.patience, fc.take("patience")?, base.patience),
            clip: pick(self.clip, fc.take("clip")?, base.clip),
            unk_rate: pick(self.unk_rate, fc.take("unk_rate")?, base.unk_rate),
            project,
            seed: resolve_seed(self.seed, fc.take("seed")?)?,
        };
        config.validate().map_err(usage)?;
        Ok(config)
    }
}

#[derive(Args, Debug)]
struct KbTrainArgs {
    /// Training triple TSV (repeatable): e1 <TAB> rel <TAB> e2 [<TAB> conf]
    #[arg(long)]
    triples: Vec<PathBuf>,
    /// Where to write the trained model
    #[arg(long)]
    model_out: Option<PathBuf>,
    /// Flat `key = value` config file; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    /// Embedding dimension (even when entities have multi-word names)
    #[arg(long)]
    dim: Option<usize>,
    /// SGD learning rate
    #[arg(long)]
    lr: Option<f64>,
    /// Minibatch size
    #[arg(long)]
    batch_size: Option<usize>,
    /// Negative samples per positive triple
    #[arg(long)]
    negatives: Option<usize>,
    /// Training epochs
    #[arg(long)]
    epochs: Option<usize>,
    /// Random seed (default: $KBLSTM_SEED, then 0)
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct KbEvalArgs {
    /// Trained embedding model
    #[arg(long)]
    model: PathBuf,
    /// Test triples to rank
    #[arg(long)]
    test: PathBuf,
    /// Triples defining the candidate space and known-fact filter
    /// (default: the test file itself)
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Report top-K accuracy
    #[arg(long, default_value_t = 10)]
    top_k: usize,
    /// Candidate pool: object (all entities) or category (observed
    /// objects of the relation)
    #[arg(long, default_value = "object")]
    mode: String,
}

#[derive(Args, Debug)]
struct ChunkerTrainArgs {
    /// Training corpus (typed BIO tags, collapsed to ENT internally)
    #[arg(long)]
    train: Option<PathBuf>,
    /// Development corpus for early stopping
    #[arg(long)]
    dev: Option<PathBuf>,
    /// Where to write the trained model
    #[arg(long)]
    model_out: Option<PathBuf>,
    #[command(flatten)]
    hypers: TrainHypers,
}

#[derive(Args, Debug)]
struct TyperTrainArgs {
    /// Training corpus with typed BIO tags
    #[arg(long)]
    train: Option<PathBuf>,
    /// Development corpus for early stopping
    #[arg(long)]
    dev: Option<PathBuf>,
    /// Where to write the trained model
    #[arg(long)]
    model_out: Option<PathBuf>,
    /// Architecture: plain, fea (concept indicators), kb (attention)
    #[arg(long)]
    arch: Option<String>,
    /// Surface-to-concepts lexicon TSV (required for fea/kb)
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// Trained embedding model supplying concept vectors (required for kb)
    #[arg(long)]
    kb_model: Option<PathBuf>,
    /// Learn a projection of concept vectors (true) or require their
    /// dimension to match the BiLSTM state (false)
    #[arg(long)]
    projection: Option<bool>,
    #[command(flatten)]
    hypers: TrainHypers,
}

#[derive(Args, Debug)]
struct EventTrainArgs {
    /// Training corpus with per-token event-type tags
    #[arg(long)]
    train: Option<PathBuf>,
    /// Development corpus for early stopping
    #[arg(long)]
    dev: Option<PathBuf>,
    /// Where to write the trained model
    #[arg(long)]
    model_out: Option<PathBuf>,
    /// Architecture: plain, fea (concept indicators), kb (attention)
    #[arg(long)]
    arch: Option<String>,
    /// Surface-to-concepts lexicon TSV (required for fea/kb)
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// Trained embedding model supplying concept vectors (required for kb)
    #[arg(long)]
    kb_model: Option<PathBuf>,
    /// Learn a projection of concept vectors (true) or require their
    /// dimension to match the BiLSTM state (false)
    #[arg(long)]
    projection: Option<bool>,
    #[command(flatten)]
    hypers: TrainHypers,
}

#[derive(Args, Debug)]
struct TagArgs {
    /// Trained tagger model (chunker, typer, or event tagger)
    #[arg(long)]
    model: PathBuf,
    /// Stage-1 chunker supplying mention boundaries to a typer model
    /// (default: boundaries from the input's own tags)
    #[arg(long)]
    chunker: Option<PathBuf>,
    /// Input sentences: one token per line, tag and head columns optional
    #[arg(long)]
    input: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Gold-standard corpus
    #[arg(long)]
    gold: PathBuf,
    /// Predicted corpus (repeatable; each is scored as one run)
    #[arg(long, required = true)]
    pred: Vec<PathBuf>,
    /// Span extraction mode: typing, event, or chunking
    #[arg(long, default_value = "typing")]
    task: String,
    /// Comma-separated seed labels for the run lines (default 0,1,...)
    #[arg(long)]
    seeds: Option<String>,
}

#[derive(Args, Debug)]
struct SynthGenArgs {
    /// Directory for train/dev/test/triples/lexicon/answer-key files
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Flat `key = value` config file; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    /// Total surface vocabulary size
    #[arg(long)]
    vocab: Option<usize>,
    /// Number of concept categories (even, >= 2)
    #[arg(long)]
    categories: Option<usize>,
    /// Number of ambiguous mention surfaces
    #[arg(long)]
    ambiguous: Option<usize>,
    /// Sentences in the training split
    #[arg(long)]
    train_sentences: Option<usize>,
    /// Sentences in the development split
    #[arg(long)]
    dev_sentences: Option<usize>,
    /// Sentences in the test split
    #[arg(long)]
    test_sentences: Option<usize>,
    /// Fraction of mentions drawn from ambiguous surfaces, in (0, 1]
    #[arg(long)]
    ambiguity_rate: Option<f64>,
    /// Random seed (default: $KBLSTM_SEED, then 0)
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct GradAuditArgs {
    /// Double one suite's analytic gradients to prove the audit can
    /// fail: rnn, knowattn, crf, or kbembed
    #[arg(long)]
    corrupt: Option<String>,
}

#[derive(Args, Debug)]
struct AttnDumpArgs {
    /// Trained knowledge-augmented tagger
    #[arg(long)]
    model: PathBuf,
    /// Input sentences (typing models read gold boundaries from tags)
    #[arg(long)]
    input: PathBuf,
}

#[derive(Args, Debug)]
struct ValidateArgs {
    /// BIO corpus file to check (repeatable)
    #[arg(long)]
    corpus: Vec<PathBuf>,
    /// Triple TSV to check (repeatable)
    #[arg(long)]
    triples: Vec<PathBuf>,
    /// Lexicon TSV to check (repeatable)
    #[arg(long)]
    lexicon: Vec<PathBuf>,
    /// Embedding text file to check (repeatable)
    #[arg(long)]
    embeddings: Vec<PathBuf>,
}

// --------------------------------------------------------------------
// Shared helpers
// --------------------------------------------------------------------

/// Lenient sentence reader for tagging input: 1-3 tab-separated fields
/// per token; missing tags default to `O`, a third field of `1` marks
/// the mention head.
fn read_input_sentences(path: &Path) -> CmdResult<Vec<RawSentence>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| data(format!("cannot read {}: {e}", path.display())))?;
    let mut sentences = Vec::new();
    let mut tokens: Vec<RawToken> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.is_empty() {
            if !tokens.is_empty() {
                sentences.push(RawSentence {
                    tokens: std::mem::take(&mut tokens),
                });
            }
            continue;
        }
        if line.starts_with('#') || line.starts_with("-DOCSTART-") {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() > 3 || fields[0].is_empty() {
            return Err(data(format!(
                "{}:{}: expected 1-3 tab-separated fields with a non-empty surface",
                path.display(),
                lineno + 1
            )));
        }
        tokens.push(RawToken {
            surface: fields[0].to_string(),
            tag: fields
                .get(1)
                .copied()
                .filter(|t| !t.is_empty())
                .unwrap_or("O")
                .to_string(),
            head: fields.get(2) == Some(&"1"),
        });
    }
    if !tokens.is_empty() {
        sentences.push(RawSentence { tokens });
    }
    Ok(sentences)
}

fn read_corpus_checked(path: &Path) -> CmdResult<Vec<RawSentence>> {
    read_corpus_file(path).map_err(data)
}

/// Overwrite every tag with the predictions. Event spans write the bare
/// type on each token; everything else writes BIO tags.
fn apply_spans(sentences: &[RawSentence], spans: &[SpanPrediction], event: bool) -> Vec<RawSentence> {
    let mut out = sentences.to_vec();
    for sent in &mut out {
        for tok in &mut sent.tokens {
            tok.tag = "O".to_string();
        }
    }
    for p in spans {
        let s = &p.span;
        let toks = &mut out[s.sentence].tokens;
        if event {
            for t in toks.iter_mut().take(s.end + 1).skip(s.start) {
                t.tag = s.label.clone();
            }
        } else {
            toks[s.start].tag = format!("B-{}", s.label);
            for t in toks.iter_mut().take(s.end + 1).skip(s.start + 1) {
                t.tag = format!("I-{}", s.label);
            }
        }
    }
    out
}

/// Concept lexicon with vectors from a trained embedding model, or
/// 1-dimensional placeholders when indicators are all the tagger needs.
fn load_concept_lexicon(path: &Path, kb_model: Option<&Path>) -> CmdResult<ConceptLexicon> {
    let file = std::fs::File::open(path)
        .map_err(|e| data(format!("cannot read {}: {e}", path.display())))?;
    let entries = parse_lexicon(BufReader::new(file), &path.display().to_string())?;
    let mut names: Vec<String> = Vec::new();
    let mut seen = BTreeSet::new();
    for (_, concepts) in &entries {
        for c in concepts {
            if seen.insert(c.clone()) {
                names.push(c.clone());
            }
        }
    }
    let concepts: Vec<(String, Vec<f64>)> = match kb_model {
        Some(model_path) => {
            let model = load_kb_model(model_path)?;
            names
                .iter()
                .map(|name| {
                    let id = model.vocab().entity_id(name).map_err(|_| {
                        data(format!(
                            "lexicon concept {name:?} is not an entity in {}",
                            model_path.display()
                        ))
                    })?;
                    let vector = model.entity_vector(id)?;
                    Ok((name.clone(), vector.as_slice().to_vec()))
                })
                .collect::<CmdResult<_>>()?
        }
        None => names.iter().map(|n| (n.clone(), vec![0.0])).collect(),
    };
    ConceptLexicon::new(concepts, &entries).map_err(data)
}

fn create_file(path: &Path) -> CmdResult<BufWriter<std::fs::File>> {
    std::fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| data(format!("cannot create {}: {e}", path.display())))
}

/// Shared body of typer-train and event-train: lexicon policy by
/// architecture, then train and save.
struct KnowledgeTrainPlan {
    train: PathBuf,
    dev: PathBuf,
    model_out: PathBuf,
    arch: Arch,
    lexicon: Option<PathBuf>,
    kb_model: Option<PathBuf>,
    config: TaggerConfig,
}

fn resolve_knowledge_plan(
    task: TaskKind,
    train: Option<PathBuf>,
    dev: Option<PathBuf>,
    model_out: Option<PathBuf>,
    arch: Option<String>,
    lexicon: Option<PathBuf>,
    kb_model: Option<PathBuf>,
    projection: Option<bool>,
    hypers: &TrainHypers,
) -> CmdResult<KnowledgeTrainPlan> {
    let mut fc = FileConfig::load(hypers.config.as_deref())?;
    let arch = match arch.or_else(|| fc.take_string("arch")) {
        Some(name) => parse_arch(&name)?,
        None => Arch::Plain,
    };
    let lexicon = lexicon.or_else(|| fc.take_path("lexicon"));
    let kb_model = kb_model.or_else(|| fc.take_path("kb_model"));
    let project = pick(projection, fc.take("projection")?, true);
    match arch {
        Arch::Plain => {
            if lexicon.is_some() || kb_model.is_some() {
                return Err(usage(
                    "--lexicon and --kb-model are only used by --arch fea or kb",
                ));
            }
        }
        Arch::Fea => {
            if lexicon.is_none() {
                return Err(usage("--arch fea needs --lexicon"));
            }
        }
        Arch::Kb => {
            if lexicon.is_none() || kb_model.is_none() {
                return Err(usage("--arch kb needs --lexicon and --kb-model"));
            }
        }
    }
    let plan = KnowledgeTrainPlan {
        train: require("--train corpus", train, fc.take_path("train"))?,
        dev: require("--dev corpus", dev, fc.take_path("dev"))?,
        model_out: require("--model-out path", model_out, fc.take_path("model_out"))?,
        arch,
        lexicon,
        kb_model,
        config: hypers.resolve(task, arch, project, &mut fc)?,
    };
    fc.finish()?;
    Ok(plan)
}

fn report_training(name: &str, log: &pipeline::TrainLog) {
    log::info!(
        "{name}: best dev F1 {:.4} at epoch {} of {}",
        log.best_dev_f1,
        log.best_epoch,
        log.history.len()
    );
    println!("best_epoch\t{}", log.best_epoch);
    println!("best_dev_f1\t{:.4}", log.best_dev_f1);
}

// --------------------------------------------------------------------
// Subcommand runners
// --------------------------------------------------------------------

fn run_kb_train(args: KbTrainArgs) -> CmdResult<()> {
    let mut fc = FileConfig::load(args.config.as_deref())?;
    let mut triple_paths = args.triples;
    if triple_paths.is_empty() {
        triple_paths.extend(fc.take_path("triples"));
    }
    if triple_paths.is_empty() {
        return Err(usage("missing required --triples file"));
    }
    let model_out = require("--model-out path", args.model_out, fc.take_path("model_out"))?;
    let base = KbTrainConfig::default();
    let config = KbTrainConfig {
        dim: pick(args.dim, fc.take("dim")?, base.dim),
        lr: pick(args.lr, fc.take("lr")?, base.lr),
        batch_size: pick(args.batch_size, fc.take("batch_size")?, base.batch_size),
        negatives: pick(args.negatives, fc.take("negatives")?, base.negatives),
        epochs: pick(args.epochs, fc.take("epochs")?, base.epochs),
        seed: resolve_seed(args.seed, fc.take("seed")?)?,
    };
    fc.finish()?;
    if config.dim == 0 || config.lr <= 0.0 || config.batch_size == 0 || config.epochs == 0 {
        return Err(usage(format!(
            "dim, lr, batch_size, and epochs must be positive, got {config:?}"
        )));
    }
    log::info!("resolved config: {config:?}");

    let mut raw = Vec::new();
    for path in &triple_paths {
        raw.extend(read_triples_file(path)?);
    }
    log::info!("read {} triples from {} file(s)", raw.len(), triple_paths.len());
    let vocab = KbVocab::build(&[&raw]);
    let store = TripleStore::from_raw(&vocab, &raw)?;
    let (model, losses) = train_kb(vocab, &store, &config)?;
    for (epoch, loss) in losses.iter().enumerate() {
        log::debug!("epoch {epoch}: mean ranking loss {loss:.6}");
    }
    save_kb_model(&model, &model_out)?;
    log::info!("wrote model to {}", model_out.display());
    println!(
        "entities\t{}",
        model.vocab().entity_names().len()
    );
    println!("final_loss\t{:.6e}", losses.last().copied().unwrap_or(0.0));
    Ok(())
}

fn run_kb_eval(args: KbEvalArgs) -> CmdResult<()> {
    let mode = match args.mode.as_str() {
        "object" => EvalMode::Object,
        "category" => EvalMode::Category,
        other => {
            return Err(usage(format!(
                "mode {other:?} is not one of: object, category"
            )))
        }
    };
    if args.top_k == 0 {
        return Err(usage("--top-k must be >= 1"));
    }
    let model = load_kb_model(&args.model)?;
    let test_raw = read_triples_file(&args.test)?;
    let test = TripleStore::from_raw(model.vocab(), &test_raw)?;
    let reference = match &args.reference {
        Some(path) => {
            let raw = read_triples_file(path)?;
            TripleStore::from_raw(model.vocab(), &raw)?
        }
        None => TripleStore::from_raw(model.vocab(), &test_raw)?,
    };
    let accuracy = eval_link_prediction(&model, test.triples(), args.top_k, mode, &reference)?;
    log::info!(
        "ranked {} test triples against {} entities",
        test.triples().len(),
        model.vocab().entity_names().len()
    );
    println!("top{}\t{:.4}", args.top_k, accuracy);
    Ok(())
}

fn run_chunker_train(args: ChunkerTrainArgs) -> CmdResult<()> {
    let mut fc = FileConfig::load(args.hypers.config.as_deref())?;
    let train_path = require("--train corpus", args.train, fc.take_path("train"))?;
    let dev_path = require("--dev corpus", args.dev, fc.take_path("dev"))?;
    let model_out = require("--model-out path", args.model_out, fc.take_path("model_out"))?;
    let config = args.hypers.resolve(TaskKind::Chunking, Arch::Plain, true, &mut fc)?;
    fc.finish()?;
    log::info!("resolved config: {config:?}");

    let train = read_corpus_checked(&train_path)?;
    let dev = read_corpus_checked(&dev_path)?;
    let (model, log) = pipeline::train_stage1_chunker(&train, &dev, config)?;
    save_model(&model, &model_out)?;
    log::info!("wrote model to {}", model_out.display());
    report_training("chunker", &log);
    Ok(())
}

fn run_typer_train(args: TyperTrainArgs) -> CmdResult<()> {
    let plan = resolve_knowledge_plan(
        TaskKind::Typing,
        args.train,
        args.dev,
        args.model_out,
        args.arch,
        args.lexicon,
        args.kb_model,
        args.projection,
        &args.hypers,
    )?;
    log::info!("resolved config: {:?}", plan.config);
    let train = read_corpus_checked(&plan.train)?;
    let dev = read_corpus_checked(&plan.dev)?;
    let lexicon = match &plan.lexicon {
        Some(path) => Some(load_concept_lexicon(path, plan.kb_model.as_deref())?),
        None => None,
    };
    let (model, log) =
        pipeline::train_stage2_typer(&train, &dev, lexicon, BoundarySource::Gold, plan.config)?;
    save_model(&model, &plan.model_out)?;
    log::info!("wrote {:?} typer to {}", plan.arch, plan.model_out.display());
    report_training("typer", &log);
    Ok(())
}

fn run_event_train(args: EventTrainArgs) -> CmdResult<()> {
    let plan = resolve_knowledge_plan(
        TaskKind::Event,
        args.train,
        args.dev,
        args.model_out,
        args.arch,
        args.lexicon,
        args.kb_model,
        args.projection,
        &args.hypers,
    )?;
    log::info!("resolved config: {:?}", plan.config);
    let train = read_corpus_checked(&plan.train)?;
    let dev = read_corpus_checked(&plan.dev)?;
    let lexicon = match &plan.lexicon {
        Some(path) => Some(load_concept_lexicon(path, plan.kb_model.as_deref())?),
        None => None,
    };
    let (model, log) = pipeline::train_event_tagger(&train, &dev, lexicon, plan.config)?;
    save_model(&model, &plan.model_out)?;
    log::info!("wrote {:?} event tagger to {}", plan.arch, plan.model_out.display());
    report_training("event tagger", &log);
    Ok(())
}

fn run_tag(args: TagArgs) -> CmdResult<()> {
    let model = load_model(&args.model)?;
    let sentences = read_input_sentences(&args.input)?;
    let (spans, event) = match model.config.task {
        TaskKind::Chunking => {
            if args.chunker.is_some() {
                return Err(usage("--chunker only applies when --model is a typer"));
            }
            (tag_chunks(&model, &sentences)?, false)
        }
        TaskKind::Typing => {
            let chunker = match &args.chunker {
                Some(path) => Some(load_model(path)?),
                None => None,
            };
            (tag_entities(chunker.as_ref(), &model, &sentences)?, false)
        }
        TaskKind::Event => {
            if args.chunker.is_some() {
                return Err(usage("--chunker only applies when --model is a typer"));
            }
            (tag_events(&model, &sentences)?, true)
        }
    };
    log::info!("tagged {} sentences, {} spans", sentences.len(), spans.len());
    let tagged = apply_spans(&sentences, &spans, event);
    let stdout = std::io::stdout();
    write_corpus(&tagged, stdout.lock())?;
    Ok(())
}

fn eval_spans_for(task: &str, sentences: &[RawSentence]) -> CmdResult<Vec<Span>> {
    match task {
        "typing" => Ok(gold_entity_spans(sentences)?),
        "event" => Ok(gold_token_spans(sentences)),
        "chunking" => {
            let mut spans = gold_entity_spans(sentences)?;
            for s in &mut spans {
                s.label = "ENT".to_string();
            }
            Ok(spans)
        }
        other => Err(usage(format!(
            "task {other:?} is not one of: typing, event, chunking"
        ))),
    }
}

fn run_eval(args: EvalArgs) -> CmdResult<()> {
    let seeds: Vec<u64> = match &args.seeds {
        Some(list) => list
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| usage(format!("seed {s:?} is not an unsigned integer")))
            })
            .collect::<CmdResult<_>>()?,
        None => (0..args.pred.len() as u64).collect(),
    };
    if seeds.len() != args.pred.len() {
        return Err(usage(format!(
            "{} seeds for {} prediction files",
            seeds.len(),
            args.pred.len()
        )));
    }
    let gold_sents = read_corpus_checked(&args.gold)?;
    let gold = eval_spans_for(&args.task, &gold_sents)?;
    let mut runs: Vec<(u64, Scores)> = Vec::new();
    for (path, &seed) in args.pred.iter().zip(&seeds) {
        let pred_sents = read_corpus_checked(path)?;
        if pred_sents.len() != gold_sents.len() {
            return Err(data(format!(
                "{} has {} sentences, gold has {}",
                path.display(),
                pred_sents.len(),
                gold_sents.len()
            )));
        }
        let pred = eval_spans_for(&args.task, &pred_sents)?;
        let scores = evaluate_spans(&gold, &pred, gold_sents.len())?;
        runs.push((seed, scores));
    }
    print!("{}", format_metrics(&runs));
    Ok(())
}

fn run_synth_gen(args: SynthGenArgs) -> CmdResult<()> {
    let mut fc = FileConfig::load(args.config.as_deref())?;
    let out_dir = require("--out-dir path", args.out_dir, fc.take_path("out_dir"))?;
    let base = SynthSpec::default();
    let spec = SynthSpec {
        vocab: pick(args.vocab, fc.take("vocab")?, base.vocab),
        categories: pick(args.categories, fc.take("categories")?, base.categories),
        ambiguous: pick(args.ambiguous, fc.take("ambiguous")?, base.ambiguous),
        train_sentences: pick(
            args.train_sentences,
            fc.take("train_sentences")?,
            base.train_sentences,
        ),
        dev_sentences: pick(args.dev_sentences, fc.take("dev_sentences")?, base.dev_sentences),
        test_sentences: pick(
            args.test_sentences,
            fc.take("test_sentences")?,
            base.test_sentences,
        ),
        ambiguity_rate: pick(
            args.ambiguity_rate,
            fc.take("ambiguity_rate")?,
            base.ambiguity_rate,
        ),
        seed: resolve_seed(args.seed, fc.take("seed")?)?,
    };
    fc.finish()?;
    spec.validate().map_err(usage)?;
    log::info!("resolved spec: {spec:?}");

    let corpus = gen_disambiguation(&spec)?;
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| data(format!("cannot create {}: {e}", out_dir.display())))?;
    let splits = [
        ("train.tsv", &corpus.train),
        ("dev.tsv", &corpus.dev),
        ("test.tsv", &corpus.test),
    ];
    for (name, sentences) in splits {
        let mut w = create_file(&out_dir.join(name))?;
        write_corpus(sentences, &mut w)?;
        w.flush().map_err(data)?;
    }
    let mut w = create_file(&out_dir.join("triples.tsv"))?;
    kbembed::write_triples(&corpus.triples, &mut w)?;
    w.flush().map_err(data)?;
    let mut w = create_file(&out_dir.join("lexicon.tsv"))?;
    write_lexicon(&corpus.lexicon, &mut w)?;
    w.flush().map_err(data)?;
    let mut w = create_file(&out_dir.join("answer_key.tsv"))?;
    write_answer_key(&corpus.key, &mut w)?;
    w.flush().map_err(data)?;
    log::info!(
        "wrote {} train / {} dev / {} test sentences, {} triples, {} held-out surfaces to {}",
        corpus.train.len(),
        corpus.dev.len(),
        corpus.test.len(),
        corpus.triples.len(),
        corpus.held_out_surfaces.len(),
        out_dir.display()
    );
    println!("ceiling\t{}", corpus.key.ceiling);
    Ok(())
}

fn run_grad_audit(args: GradAuditArgs) -> CmdResult<()> {
    let report = audit::run_audit(args.corrupt.as_deref()).map_err(|e| match e {
        Error::Input(m) => usage(m),
        other => data(other),
    })?;
    print!("{}", report.lines());
    if !report.passed() {
        return Err(Failure::Gate(format!(
            "gradient audit exceeded the {:.0e} gate",
            audit::AUDIT_GATE
        )));
    }
    Ok(())
}

fn run_attn_dump(args: AttnDumpArgs) -> CmdResult<()> {
    let model = load_model(&args.model)?;
    let sentences = read_input_sentences(&args.input)?;
    let dumps = dump_attention(&model, &sentences)?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for (sid, records) in dumps.iter().enumerate() {
        for r in records {
            let sentinel = r
                .sentinel
                .map_or("-".to_string(), |b| format!("{b:.6}"));
            let concepts = if r.concepts.is_empty() {
                "-".to_string()
            } else {
                r.concepts
                    .iter()
                    .map(|(name, w)| format!("{name}:{w:.6}"))
                    .collect::<Vec<_>>()
                    .join(",")
            };
            writeln!(out, "{sid}\t{}\t{}\t{sentinel}\t{concepts}", r.position, r.surface)
                .map_err(data)?;
        }
    }
    Ok(())
}

fn run_validate(args: ValidateArgs) -> CmdResult<()> {
    let set = FileSet {
        corpora: args.corpus,
        triples: args.triples,
        lexicons: args.lexicon,
        embeddings: args.embeddings,
    };
    if set.corpora.is_empty()
        && set.triples.is_empty()
        && set.lexicons.is_empty()
        && set.embeddings.is_empty()
    {
        return Err(usage(
            "nothing to validate; pass --corpus, --triples, --lexicon, or --embeddings",
        ));
    }
    let violations = validate_files(&set);
    for v in &violations {
        println!("{v}");
    }
    if !violations.is_empty() {
        return Err(data(format!("{} violation(s)", violations.len())));
    }
    log::info!("all files clean");
    Ok(())
}

// --------------------------------------------------------------------
// Entry point
// --------------------------------------------------------------------

fn run(cli: Cli) -> CmdResult<()> {
    match cli.cmd {
        Cmd::KbTrain(args) => run_kb_train(args),
        Cmd::KbEval(args) => run_kb_eval(args),
        Cmd::ChunkerTrain(args) => run_chunker_train(args),
        Cmd::TyperTrain(args) => run_typer_train(args),
        Cmd::EventTrain(args) => run_event_train(args),
        Cmd::Tag(args) => run_tag(args),
        Cmd::Eval(args) => run_eval(args),
        Cmd::SynthGen(args) => run_synth_gen(args),
        Cmd::GradAudit(args) => run_grad_audit(args),
        Cmd::AttnDump(args) => run_attn_dump(args),
        Cmd::Validate(args) => run_validate(args),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {}", failure.message());
            ExitCode::from(failure.code())
        }
    }
}

// --------------------------------------------------------------------
