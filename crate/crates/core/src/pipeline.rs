//! End-to-end sequence labeling: corpus handling, BiLSTM taggers with
//! optional knowledge attention, the two-stage entity pipeline, event
//! trigger tagging, training with early stopping, span evaluation, and
//! the rank-sum significance test.
//!
//! Three architectures share one code path: a plain BiLSTM over input
//! vectors, a feature baseline that appends binary concept indicators to
//! the hidden state, and the knowledge-attention model that replaces the
//! hidden state with the knowledge-aware state. Each pairs with either a
//! per-position softmax head or a linear-chain CRF.
//!
//! Entity extraction runs in two stages: a token-level BiLSTM-CRF first
//! finds untyped mention chunks with BIO tags, then a chunk-level tagger
//! assigns types (including O) to a sequence of chunks, where each chunk
//! is one BiLSTM input composed from its tokens.

use std::collections::BTreeMap;
use std::io::{BufRead, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::crf::{
    crf_nll_grad, marginals, softmax_decode, softmax_nll, viterbi, viterbi_bio, BioRole,
    BioTagSet, TagSet, TransitionTable,
};
use crate::error::{Error, Result};
use crate::knowattn::{
    knowledge_backward, knowledge_forward, AttentionRecord, AttnParams, CandidateSet,
    ConceptLexicon, KnowledgeStep,
};
use crate::numerics::linalg::{softmax_slice, Matrix, Vector};
use crate::numerics::optim::Optimizer;
use crate::numerics::params::{clip_global_norm, Params};
use crate::numerics::rng::{glorot_matrix, substream, uniform_matrix};
use crate::rnn::{bilstm_encode, BiStates, LstmParams};

/// Word id 0 is the learned unknown-word vector.
pub const UNK_ID: u32 = 0;

/// Dimension of the capitalization-class embedding.
pub const CAP_DIM: usize = 5;

// ---------------------------------------------------------------------------
// Tokens, capitalization, corpus format
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CapClass {
    AllLower,
    AllUpper,
    InitialUpper,
    Mixed,
    NonAlpha,
}

impl CapClass {
    pub const COUNT: usize = 5;

    /// Classify a surface by its letter casing. Surfaces without any
    /// alphabetic character are their own class.
    pub fn of(surface: &str) -> CapClass {
        let letters: Vec<char> = surface.chars().filter(|c| c.is_alphabetic()).collect();
        if letters.is_empty() {
            return CapClass::NonAlpha;
        }
        let all_lower = letters.iter().all(|c| c.is_lowercase());
        let all_upper = letters.iter().all(|c| c.is_uppercase());
        if all_lower {
            return CapClass::AllLower;
        }
        if all_upper {
            return CapClass::AllUpper;
        }
        // First alphabetic char upper, every later one lower.
        if letters[0].is_uppercase() && letters[1..].iter().all(|c| c.is_lowercase()) {
            return CapClass::InitialUpper;
        }
        CapClass::Mixed
    }

    pub fn index(self) -> usize {
        match self {
            CapClass::AllLower => 0,
            CapClass::AllUpper => 1,
            CapClass::InitialUpper => 2,
            CapClass::Mixed => 3,
            CapClass::NonAlpha => 4,
        }
    }
}

/// One corpus token: `surface<TAB>tag[<TAB>head_flag]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawToken {
    pub surface: String,
    pub tag: String,
    pub head: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RawSentence {
    pub tokens: Vec<RawToken>,
}

/// Read the one-token-per-line corpus format: blank lines separate
/// sentences, `-DOCSTART-` lines separate documents (skipped), `#` at the
/// start of a line is a comment. The optional third column flags the
/// gold head token of its mention.
pub fn read_corpus(reader: impl BufRead, file: &str) -> Result<Vec<RawSentence>> {
    let mut sentences = Vec::new();
    let mut current = RawSentence::default();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.is_empty() {
            if !current.tokens.is_empty() {
                sentences.push(std::mem::take(&mut current));
            }
            continue;
        }
        if trimmed.starts_with('#') {
            continue;
        }
        let mut fields = trimmed.split('\t');
        let surface = fields.next().unwrap_or("");
        if surface.starts_with("-DOCSTART-") {
            if !current.tokens.is_empty() {
                sentences.push(std::mem::take(&mut current));
            }
            continue;
        }
        let data_err = |reason: String| Error::Data {
            file: file.to_string(),
            line: lineno + 1,
            reason,
        };
        if surface.is_empty() {
            return Err(data_err("empty surface".into()));
        }
        let tag = fields
            .next()
            .ok_or_else(|| data_err("expected `surface<TAB>tag`".into()))?;
        if tag.is_empty() {
            return Err(data_err("empty tag".into()));
        }
        let head = match fields.next() {
            None | Some("") | Some("0") => false,
            Some("1") => true,
            Some(other) => return Err(data_err(format!("head flag {other:?} is not 0/1"))),
        };
        if fields.next().is_some() {
            return Err(data_err("more than three columns".into()));
        }
        current.tokens.push(RawToken {
            surface: surface.to_string(),
            tag: tag.to_string(),
            head,
        });
    }
    if !current.tokens.is_empty() {
        sentences.push(current);
    }
    Ok(sentences)
}

pub fn read_corpus_file(path: &Path) -> Result<Vec<RawSentence>> {
    let file = std::fs::File::open(path)?;
    read_corpus(std::io::BufReader::new(file), &path.display().to_string())
}

/// Write the corpus format read by [`read_corpus`]. The head-flag column
/// appears only on flagged tokens.
pub fn write_corpus(sentences: &[RawSentence], mut w: impl Write) -> Result<()> {
    for (i, sent) in sentences.iter().enumerate() {
        if i > 0 {
            writeln!(w)?;
        }
        for t in &sent.tokens {
            if t.head {
                writeln!(w, "{}\t{}\t1", t.surface, t.tag)?;
            } else {
                writeln!(w, "{}\t{}", t.surface, t.tag)?;
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

/// Word-form vocabulary. Forms are case-folded; id 0 is the unknown word.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordVocab {
    names: Vec<String>,
    index: BTreeMap<String, u32>,
}

impl WordVocab {
    /// First-seen order over the training corpus, after the reserved
    /// unknown-word slot.
    pub fn build<'a>(sentences: impl IntoIterator<Item = &'a RawSentence>) -> WordVocab {
        let mut v = WordVocab {
            names: vec!["<unk>".to_string()],
            index: BTreeMap::new(),
        };
        v.index.insert("<unk>".to_string(), UNK_ID);
        for sent in sentences {
            for tok in &sent.tokens {
                let form = tok.surface.to_lowercase();
                if !v.index.contains_key(&form) {
                    let id = v.names.len() as u32;
                    v.index.insert(form.clone(), id);
                    v.names.push(form);
                }
            }
        }
        v
    }

    pub fn from_names(names: Vec<String>) -> Result<WordVocab> {
        if names.first().map(String::as_str) != Some("<unk>") {
            return Err(Error::Config("word vocabulary must start with <unk>".into()));
        }
        let mut index = BTreeMap::new();
        for (i, n) in names.iter().enumerate() {
            if index.insert(n.clone(), i as u32).is_some() {
                return Err(Error::Config(format!("duplicate word form {n:?}")));
            }
        }
        Ok(WordVocab { names, index })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Case-folded lookup; absent forms map to the unknown id.
    pub fn id(&self, surface: &str) -> u32 {
        self.index
            .get(&surface.to_lowercase())
            .copied()
            .unwrap_or(UNK_ID)
    }
}

// ---------------------------------------------------------------------------
// Configurations
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    /// BiLSTM only.
    Plain,
    /// BiLSTM plus binary concept-indicator features on the state.
    Fea,
    /// BiLSTM plus the attention/sentinel knowledge module.
    Kb,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Softmax,
    Crf,
}

/// What the tag sequence means, which fixes the sequence unit and how
/// decoded tags become spans.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    /// Token-level BIO mention detection (stage 1).
    Chunking,
    /// Chunk-level type assignment (stage 2).
    Typing,
    /// Token-level event-trigger typing.
    Event,
}

impl TaskKind {
    pub fn chunk_units(self) -> bool {
        matches!(self, TaskKind::Typing)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaggerConfig {
    pub task: TaskKind,
    pub arch: Arch,
    pub objective: Objective,
    pub hidden: usize,
    pub word_dim: usize,
    pub dropout: f64,
    pub lr: f64,
    pub epochs: usize,
    pub patience: usize,
    pub clip: f64,
    pub unk_rate: f64,
    pub project: bool,
    pub seed: u64,
}

impl TaggerConfig {
    pub fn new(task: TaskKind) -> TaggerConfig {
        TaggerConfig {
            task,
            arch: Arch::Plain,
            objective: Objective::Crf,
            hidden: 100,
            word_dim: 300,
            dropout: 0.5,
            lr: 1e-3,
            epochs: 30,
            patience: 3,
            clip: 5.0,
            unk_rate: 0.01,
            project: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.word_dim == 0 {
            return Err(Error::Config("hidden and word dims must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config(format!("learning rate {} must be > 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.unk_rate) {
            return Err(Error::Config(format!(
                "unknown-word rate {} outside [0, 1)",
                self.unk_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        Ok(())
    }

    fn token_input_dim(&self) -> usize {
        self.word_dim + CAP_DIM
    }

    fn unit_input_dim(&self) -> usize {
        if self.task.chunk_units() {
            2 * self.token_input_dim()
        } else {
            self.token_input_dim()
        }
    }
}

// ---------------------------------------------------------------------------
// Examples: encoded sentences / chunk sequences
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct EncToken {
    pub surface: String,
    pub word: u32,
    pub cap: usize,
}

/// A chunk over token indices; `head` is a token index within the span.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkRef {
    pub start: usize,
    pub end: usize,
    pub head: usize,
}

#[derive(Debug, Clone)]
pub enum UnitRef {
    Token(usize),
    Chunk(ChunkRef),
}

/// One training/inference instance: token-level inputs plus the unit
/// sequence the BiLSTM actually runs over (tokens, or chunks).
#[derive(Debug, Clone)]
pub struct Example {
    pub tokens: Vec<EncToken>,
    pub units: Vec<UnitRef>,
    /// Per-unit gold tag ids; empty for unlabeled inference input.
    pub golds: Vec<usize>,
    /// Per-unit candidate concepts (empty sets without a lexicon).
    pub cands: Vec<CandidateSet>,
    /// Per-unit display surfaces (chunk surfaces join their tokens).
    pub surfaces: Vec<String>,
}

fn encode_tokens(raw: &RawSentence, vocab: &WordVocab) -> Vec<EncToken> {
    raw.tokens
        .iter()
        .map(|t| EncToken {
            surface: t.surface.clone(),
            word: vocab.id(&t.surface),
            cap: CapClass::of(&t.surface).index(),
        })
        .collect()
}

/// Parse a BIO tag string into its role.
pub fn parse_bio_role(tag: &str) -> Result<BioRole> {
    if tag == "O" {
        return Ok(BioRole::Outside);
    }
    if let Some(t) = tag.strip_prefix("B-") {
        if !t.is_empty() {
            return Ok(BioRole::Begin(t.to_string()));
        }
    }
    if let Some(t) = tag.strip_prefix("I-") {
        if !t.is_empty() {
            return Ok(BioRole::Inside(t.to_string()));
        }
    }
    Err(Error::Input(format!("tag {tag:?} is not BIO")))
}

/// Collapse a typed BIO tag to the untyped boundary alphabet
/// (`B-ENT`/`I-ENT`/`O`) used by the stage-1 chunker.
pub fn collapse_bio_tag(tag: &str) -> Result<&'static str> {
    Ok(match parse_bio_role(tag)? {
        BioRole::Outside => "O",
        BioRole::Begin(_) => "B-ENT",
        BioRole::Inside(_) => "I-ENT",
    })
}

/// Segment BIO roles into chunks covering the whole sentence: every
/// mention is one chunk (`Some(type)`), and every maximal run of O
/// tokens is one chunk (`None`). An inside tag without a matching begin
/// opens a new mention (lenient reading). Heads come from the gold head
/// flags when present within a span, else the last token.
pub fn chunks_from_roles(roles: &[BioRole], head_flags: &[bool]) -> Vec<(ChunkRef, Option<String>)> {
    let mut out: Vec<(usize, usize, Option<String>)> = Vec::new();
    for (i, role) in roles.iter().enumerate() {
        match role {
            BioRole::Outside => match out.last_mut() {
                Some((_, end, None)) if *end + 1 == i => *end = i,
                _ => out.push((i, i, None)),
            },
            BioRole::Begin(t) => out.push((i, i, Some(t.clone()))),
            BioRole::Inside(t) => match out.last_mut() {
                Some((_, end, Some(prev))) if *end + 1 == i && prev == t => *end = i,
                _ => out.push((i, i, Some(t.clone()))),
            },
        }
    }
    out.into_iter()
        .map(|(start, end, label)| {
            let head = (start..=end).rev().find(|&i| head_flags[i]).unwrap_or(end);
            (ChunkRef { start, end, head }, label)
        })
        .collect()
}

/// `[mean of the chunk's token vectors ; head token vector]`.
pub fn compose_chunk(token_vecs: &[Vector], head_local: usize) -> Result<Vector> {
    if token_vecs.is_empty() {
        return Err(Error::Input("empty chunk".into()));
    }
    if head_local >= token_vecs.len() {
        return Err(Error::Input(format!(
            "chunk head {head_local} outside {} tokens",
            token_vecs.len()
        )));
    }
    let mut mean = Vector::zeros(token_vecs[0].dim());
    for v in token_vecs {
        mean.add_assign(v);
    }
    mean.scale(1.0 / token_vecs.len() as f64);
    Ok(mean.concat(&token_vecs[head_local]))
}

/// Candidates for a chunk: the full (space-joined) surface first, the
/// head word as fallback.
fn chunk_candidates(lex: &ConceptLexicon, tokens: &[EncToken], chunk: &ChunkRef) -> CandidateSet {
    let phrase = tokens[chunk.start..=chunk.end]
        .iter()
        .map(|t| t.surface.as_str())
        .collect::<Vec<_>>()
        .join(" ");
    let c = lex.retrieve(&phrase);
    if !c.is_empty() {
        return c;
    }
    lex.retrieve(&tokens[chunk.head].surface)
}

fn unit_surface(tokens: &[EncToken], unit: &UnitRef) -> String {
    match unit {
        UnitRef::Token(i) => tokens[*i].surface.clone(),
        UnitRef::Chunk(c) => tokens[c.start..=c.end]
            .iter()
            .map(|t| t.surface.as_str())
            .collect::<Vec<_>>()
            .join(" "),
    }
}

fn fill_unit_metadata(
    tokens: &[EncToken],
    units: &[UnitRef],
    lexicon: Option<&ConceptLexicon>,
) -> (Vec<CandidateSet>, Vec<String>) {
    let surfaces: Vec<String> = units.iter().map(|u| unit_surface(tokens, u)).collect();
    let cands = units
        .iter()
        .map(|u| match (lexicon, u) {
            (None, _) => CandidateSet::default(),
            (Some(lex), UnitRef::Token(i)) => lex.retrieve(&tokens[*i].surface),
            (Some(lex), UnitRef::Chunk(c)) => chunk_candidates(lex, tokens, c),
        })
        .collect();
    (cands, surfaces)
}

/// Token-level example whose golds come straight from the tag column
/// (used by the event tagger, and by the chunker after collapsing).
fn token_example(
    raw: &RawSentence,
    vocab: &WordVocab,
    tags: &TagSet,
    lexicon: Option<&ConceptLexicon>,
    map_tag: impl Fn(&str) -> Result<String>,
    with_gold: bool,
) -> Result<Example> {
    let tokens = encode_tokens(raw, vocab);
    let units: Vec<UnitRef> = (0..tokens.len()).map(UnitRef::Token).collect();
    let golds = if with_gold {
        raw.tokens
            .iter()
            .map(|t| tags.id(&map_tag(&t.tag)?))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let (cands, surfaces) = fill_unit_metadata(&tokens, &units, lexicon);
    Ok(Example { tokens, units, golds, cands, surfaces })
}

/// Chunk-level example over the given chunk segmentation. Gold labels,
/// when requested, are mention types (`O` for non-mention chunks).
fn chunk_example(
    raw: &RawSentence,
    chunks: &[(ChunkRef, Option<String>)],
    vocab: &WordVocab,
    tags: &TagSet,
    lexicon: Option<&ConceptLexicon>,
    with_gold: bool,
) -> Result<Example> {
    let tokens = encode_tokens(raw, vocab);
    let units: Vec<UnitRef> = chunks.iter().map(|(c, _)| UnitRef::Chunk(*c)).collect();
    let golds = if with_gold {
        chunks
            .iter()
            .map(|(_, label)| tags.id(label.as_deref().unwrap_or("O")))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let (cands, surfaces) = fill_unit_metadata(&tokens, &units, lexicon);
    Ok(Example { tokens, units, golds, cands, surfaces })
}

fn gold_chunks(raw: &RawSentence) -> Result<Vec<(ChunkRef, Option<String>)>> {
    let roles = raw
        .tokens
        .iter()
        .map(|t| parse_bio_role(&t.tag))
        .collect::<Result<Vec<_>>>()?;
    let heads: Vec<bool> = raw.tokens.iter().map(|t| t.head).collect();
    Ok(chunks_from_roles(&roles, &heads))
}

// ---------------------------------------------------------------------------
// Spans and evaluation
// ---------------------------------------------------------------------------

/// A typed token span within a corpus; `end` is inclusive.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Span {
    pub sentence: usize,
    pub start: usize,
    pub end: usize,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpanPrediction {
    pub span: Span,
    pub score: f64,
}

/// Typed mention spans of a gold BIO corpus.
pub fn gold_entity_spans(sentences: &[RawSentence]) -> Result<Vec<Span>> {
    let mut spans = Vec::new();
    for (sid, sent) in sentences.iter().enumerate() {
        for (chunk, label) in gold_chunks(sent)? {
            if let Some(label) = label {
                spans.push(Span { sentence: sid, start: chunk.start, end: chunk.end, label });
            }
        }
    }
    Ok(spans)
}

/// Single-token spans for every non-O token tag (event triggers).
pub fn gold_token_spans(sentences: &[RawSentence]) -> Vec<Span> {
    let mut spans = Vec::new();
    for (sid, sent) in sentences.iter().enumerate() {
        for (i, tok) in sent.tokens.iter().enumerate() {
            if tok.tag != "O" {
                spans.push(Span {
                    sentence: sid,
                    start: i,
                    end: i,
                    label: tok.tag.clone(),
                });
            }
        }
    }
    spans
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Exact-match span scoring: a prediction counts when its (sentence,
/// start, end, label) quadruple appears in the gold set. Empty
/// denominators score 0 and are logged.
pub fn evaluate_spans(gold: &[Span], predicted: &[Span], num_sentences: usize) -> Result<Scores> {
    for s in gold.iter().chain(predicted) {
        if s.sentence >= num_sentences || s.start > s.end {
            return Err(Error::Input(format!(
                "span {}..{} in sentence {} outside corpus of {} sentences",
                s.start, s.end, s.sentence, num_sentences
            )));
        }
    }
    let gold_set: std::collections::BTreeSet<&Span> = gold.iter().collect();
    let pred_set: std::collections::BTreeSet<&Span> = predicted.iter().collect();
    let correct = pred_set.iter().filter(|s| gold_set.contains(*s)).count() as f64;
    let precision = if pred_set.is_empty() {
        log::warn!("no predicted spans; precision reported as 0");
        0.0
    } else {
        correct / pred_set.len() as f64
    };
    let recall = if gold_set.is_empty() {
        log::warn!("no gold spans; recall reported as 0");
        0.0
    } else {
        correct / gold_set.len() as f64
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(Scores { precision, recall, f1 })
}

/// Per-run metric lines `seed<TAB>P<TAB>R<TAB>F1` plus a mean ± stddev
/// summary (sample standard deviation).
pub fn format_metrics(runs: &[(u64, Scores)]) -> String {
    let mut out = String::new();
    for (seed, s) in runs {
        out.push_str(&format!(
            "{seed}\t{:.4}\t{:.4}\t{:.4}\n",
            s.precision, s.recall, s.f1
        ));
    }
    let stats = |f: fn(&Scores) -> f64| -> (f64, f64) {
        let n = runs.len() as f64;
        if runs.is_empty() {
            return (0.0, 0.0);
        }
        let mean = runs.iter().map(|(_, s)| f(s)).sum::<f64>() / n;
        let var = if runs.len() > 1 {
            runs.iter().map(|(_, s)| (f(s) - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        (mean, var.sqrt())
    };
    let (pm, ps) = stats(|s| s.precision);
    let (rm, rs) = stats(|s| s.recall);
    let (fm, fs) = stats(|s| s.f1);
    out.push_str(&format!(
        "summary\t{pm:.4} ± {ps:.4}\t{rm:.4} ± {rs:.4}\t{fm:.4} ± {fs:.4}\n"
    ));
    out
}

// ---------------------------------------------------------------------------
// Rank-sum significance test
// ---------------------------------------------------------------------------

/// Complementary error function (rational approximation, absolute error
/// below 1.3e-7 — far finer than any significance threshold in use).
fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let ans = t
        * (-z * z - 1.26551223
            + t * (1.00002368
                + t * (0.37409196
                    + t * (0.09678418
                        + t * (-0.18628806
                            + t * (0.27886807
                                + t * (-1.13520398
                                    + t * (1.48851587
                                        + t * (-0.82215223 + t * 0.17087277)))))))))
        .exp();
    if x >= 0.0 {
        ans
    } else {
        2.0 - ans
    }
}

/// Mann-Whitney U of sample `a` via midranks, with the normal-
/// approximation moments (tie-corrected variance).
pub fn rank_sum_u(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let n1 = a.len() as f64;
    let n2 = b.len() as f64;
    let n = n1 + n2;
    let mut pooled: Vec<(f64, bool)> = a
        .iter()
        .map(|&v| (v, true))
        .chain(b.iter().map(|&v| (v, false)))
        .collect();
    pooled.sort_by(|x, y| x.0.partial_cmp(&y.0).expect("non-finite sample"));
    let mut rank_sum_a = 0.0;
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j < pooled.len() && pooled[j].0 == pooled[i].0 {
            j += 1;
        }
        // Ranks are 1-based; every member of a tie group gets the mean rank.
        let midrank = (i + 1 + j) as f64 / 2.0;
        let t = (j - i) as f64;
        tie_term += t * t * t - t;
        for p in &pooled[i..j] {
            if p.1 {
                rank_sum_a += midrank;
            }
        }
        i = j;
    }
    let u = rank_sum_a - n1 * (n1 + 1.0) / 2.0;
    let mu = n1 * n2 / 2.0;
    let sigma2 = n1 * n2 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    (u, mu, sigma2.max(0.0).sqrt())
}

/// Two-sided Wilcoxon rank-sum (Mann-Whitney) test under the normal
/// approximation with tie correction and continuity correction. Fully
/// tied samples give p = 1.
pub fn wilcoxon_rank_sum(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() < 3 || b.len() < 3 {
        return Err(Error::Input(format!(
            "rank-sum test needs at least 3 samples per side, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if !a.iter().chain(b).all(|v| v.is_finite()) {
        return Err(Error::Input("rank-sum test: non-finite sample".into()));
    }
    let (u, mu, sigma) = rank_sum_u(a, b);
    if sigma == 0.0 {
        return Ok(1.0);
    }
    let z = ((u - mu).abs() - 0.5).max(0.0) / sigma;
    Ok(erfc(z / std::f64::consts::SQRT_2).min(1.0))
}

// ---------------------------------------------------------------------------
// The tagger model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TaggerModel {
    pub config: TaggerConfig,
    pub words: WordVocab,
    pub tags: TagSet,
    pub lexicon: Option<ConceptLexicon>,
    pub word_emb: Matrix,
    pub cap_emb: Matrix,
    pub lstm_fwd: LstmParams,
    pub lstm_bwd: LstmParams,
    pub attn: Option<AttnParams>,
    pub head_w: Matrix,
    pub trans: Option<TransitionTable>,
}

impl TaggerModel {
    /// Initialize a model. Pretrained word vectors, when given, overlay
    /// the random rows for matching (case-folded) forms and are
    /// fine-tuned like everything else. Each tensor draws from its own
    /// seeded stream, so optional components never shift the others.
    pub fn init(
        config: TaggerConfig,
        words: WordVocab,
        tags: TagSet,
        lexicon: Option<ConceptLexicon>,
        pretrained: Option<&[(String, Vec<f64>)]>,
    ) -> Result<TaggerModel> {
        config.validate()?;
        if matches!(config.arch, Arch::Fea | Arch::Kb) && lexicon.is_none() {
            return Err(Error::Config(
                "concept-feature and knowledge architectures need a lexicon".into(),
            ));
        }
        let seed = config.seed;
        let mut word_emb = uniform_matrix(
            &mut substream(seed, "init:word_emb"),
            words.len(),
            config.word_dim,
            -0.1,
            0.1,
        );
        if let Some(rows) = pretrained {
            let mut loaded = 0usize;
            for (form, values) in rows {
                if values.len() != config.word_dim {
                    return Err(Error::Dimension(format!(
                        "pretrained vector for {form:?} has dim {}, expected {}",
                        values.len(),
                        config.word_dim
                    )));
                }
                let id = words.id(form);
                if id != UNK_ID || form == "<unk>" {
                    word_emb.row_mut(id as usize).copy_from_slice(values);
                    loaded += 1;
                }
            }
            log::info!("loaded {loaded} pretrained word vectors");
        }
        let cap_emb = uniform_matrix(
            &mut substream(seed, "init:cap_emb"),
            CapClass::COUNT,
            CAP_DIM,
            -0.1,
            0.1,
        );
        let d_unit = config.unit_input_dim();
        let lstm_fwd = LstmParams::init(
            config.hidden,
            d_unit,
            true,
            &mut substream(seed, "init:lstm_fwd"),
        );
        let lstm_bwd = LstmParams::init(
            config.hidden,
            d_unit,
            true,
            &mut substream(seed, "init:lstm_bwd"),
        );
        let attn = match config.arch {
            Arch::Kb => Some(AttnParams::init(
                config.hidden,
                d_unit,
                lexicon.as_ref().expect("checked above").dim(),
                config.project,
                &mut substream(seed, "init:attn"),
            )?),
            _ => None,
        };
        let state_dim = match config.arch {
            Arch::Fea => 2 * config.hidden + lexicon.as_ref().expect("checked above").num_concepts(),
            _ => 2 * config.hidden,
        };
        let head_w = glorot_matrix(&mut substream(seed, "init:head"), tags.len(), state_dim);
        let trans = match config.objective {
            Objective::Crf => Some(TransitionTable::new(tags.len())),
            Objective::Softmax => None,
        };
        Ok(TaggerModel {
            config,
            words,
            tags,
            lexicon,
            word_emb,
            cap_emb,
            lstm_fwd,
            lstm_bwd,
            attn,
            head_w,
            trans,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.head_w.cols()
    }

    fn bio(&self) -> Result<BioTagSet> {
        BioTagSet::from_tagset(&self.tags)
    }

    fn token_vec(&self, word: u32, cap: usize) -> Vector {
        let mut v = Vec::with_capacity(self.config.token_input_dim());
        v.extend_from_slice(self.word_emb.row(word as usize));
        v.extend_from_slice(self.cap_emb.row(cap));
        Vector::from_vec(v)
    }

    /// Per-unit BiLSTM input vectors for a sentence, given the
    /// (possibly unknown-substituted) word ids.
    fn unit_inputs(&self, ex: &Example, word_ids: &[u32]) -> Result<Vec<Vector>> {
        let xs_tok: Vec<Vector> = ex
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| self.token_vec(word_ids[i], t.cap))
            .collect();
        ex.units
            .iter()
            .map(|u| match u {
                UnitRef::Token(i) => Ok(xs_tok[*i].clone()),
                UnitRef::Chunk(c) => {
                    compose_chunk(&xs_tok[c.start..=c.end], c.head - c.start)
                }
            })
            .collect()
    }

    /// Forward pass over one example. `dropout` supplies the rng and
    /// rate during training; inference passes `None` and is fully
    /// deterministic.
    fn forward(
        &self,
        ex: &Example,
        word_ids: &[u32],
        dropout: Option<(&mut ChaCha8Rng, f64)>,
    ) -> Result<Pass> {
        if ex.units.is_empty() {
            return Err(Error::Input("empty sentence".into()));
        }
        if word_ids.len() != ex.tokens.len() {
            return Err(Error::Dimension(format!(
                "{} word ids for {} tokens",
                word_ids.len(),
                ex.tokens.len()
            )));
        }
        let mut xs_unit = self.unit_inputs(ex, word_ids)?;
        let masks = match dropout {
            Some((rng, rate)) if rate > 0.0 => {
                let keep = 1.0 - rate;
                let masks: Vec<Vector> = xs_unit
                    .iter()
                    .map(|x| {
                        Vector::from_vec(
                            (0..x.dim())
                                .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { 1.0 / keep })
                                .collect(),
                        )
                    })
                    .collect();
                for (x, m) in xs_unit.iter_mut().zip(&masks) {
                    *x = x.hadamard(m);
                }
                Some(masks)
            }
            _ => None,
        };
        let bi = bilstm_encode(&xs_unit, &self.lstm_fwd, &self.lstm_bwd)?;
        let t_len = ex.units.len();
        let mut ksteps = None;
        let mut states = Vec::with_capacity(t_len);
        match self.config.arch {
            Arch::Plain => {
                for t in 0..t_len {
                    states.push(bi.h_cat(t));
                }
            }
            Arch::Fea => {
                let n_c = self.lexicon.as_ref().map_or(0, ConceptLexicon::num_concepts);
                for t in 0..t_len {
                    let mut ind = vec![0.0; n_c];
                    for &c in &ex.cands[t].ids {
                        ind[c] = 1.0;
                    }
                    states.push(bi.h_cat(t).concat(&Vector::from_vec(ind)));
                }
            }
            Arch::Kb => {
                let attn = self.attn.as_ref().expect("knowledge arch has attention params");
                let mut steps = Vec::with_capacity(t_len);
                for t in 0..t_len {
                    let step = knowledge_forward(
                        attn,
                        &bi.h_cat(t),
                        &bi.h_prev_cat(t),
                        &xs_unit[t],
                        &bi.c_cat(t),
                        &ex.cands[t],
                    )?;
                    states.push(step.h_hat.clone());
                    steps.push(step);
                }
                ksteps = Some(steps);
            }
        }
        let emissions: Vec<Vector> = states.iter().map(|z| self.head_w.matvec(z)).collect();
        Ok(Pass { xs_unit, masks, bi, ksteps, states, emissions })
    }

    /// Loss and emission/transition gradients under the configured
    /// objective.
    fn loss_grads(
        &self,
        pass: &Pass,
        golds: &[usize],
    ) -> Result<(f64, Vec<Vector>, Option<TransitionTable>)> {
        match self.config.objective {
            Objective::Softmax => {
                let (loss, d_em) = softmax_nll(&pass.emissions, golds)?;
                Ok((loss, d_em, None))
            }
            Objective::Crf => {
                let trans = self.trans.as_ref().expect("CRF objective has transitions");
                let (loss, d_em, d_trans) = crf_nll_grad(&pass.emissions, trans, golds)?;
                Ok((loss, d_em, Some(d_trans)))
            }
        }
    }

    /// Backpropagate emission (and transition) gradients into `grads`.
    fn backward(
        &self,
        ex: &Example,
        word_ids: &[u32],
        pass: &Pass,
        d_emissions: &[Vector],
        d_trans: Option<TransitionTable>,
        grads: &mut TaggerGrads,
    ) -> Result<()> {
        let t_len = ex.units.len();
        let two_h = 2 * self.config.hidden;
        let d_unit = self.config.unit_input_dim();
        let mut dh_cat = vec![Vector::zeros(two_h); t_len];
        let mut dc_cat = vec![Vector::zeros(two_h); t_len];
        let mut dx_unit = vec![Vector::zeros(d_unit); t_len];

        if let Some(dt) = d_trans {
            grads
                .trans
                .as_mut()
                .expect("gradient layout mirrors the model")
                .accumulate(&dt, 1.0);
        }

        for t in 0..t_len {
            let dp = &d_emissions[t];
            grads.head_w.add_outer(dp, &pass.states[t], 1.0);
            let dz = self.head_w.matvec_t(dp);
            match self.config.arch {
                Arch::Plain => dh_cat[t].add_assign(&dz),
                Arch::Fea => {
                    let (dh, _ind) = dz.split_at(two_h);
                    dh_cat[t].add_assign(&dh);
                }
                Arch::Kb => {
                    let attn = self.attn.as_ref().expect("knowledge arch");
                    let steps = pass.ksteps.as_ref().expect("knowledge pass");
                    let ig = knowledge_backward(
                        attn,
                        &pass.bi.h_cat(t),
                        &pass.bi.h_prev_cat(t),
                        &pass.xs_unit[t],
                        &pass.bi.c_cat(t),
                        &ex.cands[t],
                        &steps[t],
                        &dz,
                        grads.attn.as_mut().expect("gradient layout mirrors the model"),
                    );
                    dh_cat[t].add_assign(&ig.d_h);
                    dc_cat[t].add_assign(&ig.d_c_cat);
                    dx_unit[t].add_assign(&ig.d_x);
                    // h_prev concatenates forward t-1 and backward t+1.
                    let (dhp_f, dhp_b) = ig.d_h_prev_cat.split_at(self.config.hidden);
                    if t > 0 {
                        for j in 0..self.config.hidden {
                            dh_cat[t - 1][j] += dhp_f[j];
                        }
                    }
                    if t + 1 < t_len {
                        for j in 0..self.config.hidden {
                            dh_cat[t + 1][self.config.hidden + j] += dhp_b[j];
                        }
                    }
                }
            }
        }

        let h = self.config.hidden;
        let split = |v: &[Vector]| -> (Vec<Vector>, Vec<Vector>) {
            v.iter().map(|x| x.split_at(h)).unzip()
        };
        let (dh_f, dh_b) = split(&dh_cat);
        let (dc_f, dc_b) = split(&dc_cat);
        let (g_f, dx_f) = self.lstm_fwd.encode_backward(&pass.xs_unit, &pass.bi.fwd, &dh_f, &dc_f)?;
        let (g_b, dx_b) = self.lstm_bwd.encode_backward(&pass.xs_unit, &pass.bi.bwd, &dh_b, &dc_b)?;
        grads.lstm_fwd.accumulate(&g_f, 1.0);
        grads.lstm_bwd.accumulate(&g_b, 1.0);
        for t in 0..t_len {
            dx_unit[t].add_assign(&dx_f[t]);
            dx_unit[t].add_assign(&dx_b[t]);
            if let Some(masks) = &pass.masks {
                dx_unit[t] = dx_unit[t].hadamard(&masks[t]);
            }
        }

        // Units back to tokens, tokens into the embedding tables.
        let d_tok = self.config.token_input_dim();
        let mut dx_tok = vec![Vector::zeros(d_tok); ex.tokens.len()];
        for (t, unit) in ex.units.iter().enumerate() {
            match unit {
                UnitRef::Token(i) => dx_tok[*i].add_assign(&dx_unit[t]),
                UnitRef::Chunk(c) => {
                    let (d_mean, d_head) = dx_unit[t].split_at(d_tok);
                    let n = (c.end - c.start + 1) as f64;
                    for i in c.start..=c.end {
                        dx_tok[i].add_scaled(&d_mean, 1.0 / n);
                    }
                    dx_tok[c.head].add_assign(&d_head);
                }
            }
        }
        for (i, tok) in ex.tokens.iter().enumerate() {
            let (dw, dcap) = dx_tok[i].split_at(self.config.word_dim);
            let wrow = grads.word_emb.row_mut(word_ids[i] as usize);
            for (a, b) in wrow.iter_mut().zip(dw.as_slice()) {
                *a += b;
            }
            let crow = grads.cap_emb.row_mut(tok.cap);
            for (a, b) in crow.iter_mut().zip(dcap.as_slice()) {
                *a += b;
            }
        }
        Ok(())
    }

    /// Decode one example to per-unit tag ids. BIO tasks decode under
    /// the validity mask; plain tasks take the best path (CRF) or the
    /// per-unit argmax (softmax).
    pub fn decode(&self, ex: &Example) -> Result<Vec<usize>> {
        let word_ids: Vec<u32> = ex.tokens.iter().map(|t| t.word).collect();
        let pass = self.forward(ex, &word_ids, None)?;
        self.decode_pass(&pass)
    }

    fn decode_pass(&self, pass: &Pass) -> Result<Vec<usize>> {
        match (self.config.objective, self.config.task) {
            (Objective::Crf, TaskKind::Chunking) => {
                let trans = self.trans.as_ref().expect("CRF objective");
                Ok(viterbi_bio(&pass.emissions, trans, &self.bio()?)?.1)
            }
            (Objective::Crf, _) => {
                let trans = self.trans.as_ref().expect("CRF objective");
                Ok(viterbi(&pass.emissions, trans)?.1)
            }
            (Objective::Softmax, TaskKind::Chunking) => {
                // Constrained argmax: zero transitions plus the BIO mask.
                let zeros = TransitionTable::new(self.tags.len());
                Ok(viterbi_bio(&pass.emissions, &zeros, &self.bio()?)?.1)
            }
            (Objective::Softmax, _) => Ok(softmax_decode(&pass.emissions)),
        }
    }

    /// Per-unit probability of each decoded tag: the softmax probability
    /// or the CRF unary marginal.
    fn tag_probabilities(&self, pass: &Pass, tags: &[usize]) -> Result<Vec<f64>> {
        match self.config.objective {
            Objective::Softmax => pass
                .emissions
                .iter()
                .zip(tags)
                .map(|(em, &y)| Ok(softmax_slice(em.as_slice())?[y]))
                .collect(),
            Objective::Crf => {
                let trans = self.trans.as_ref().expect("CRF objective");
                let margs = marginals(&pass.emissions, trans)?;
                Ok(margs.iter().zip(tags).map(|(m, &y)| m[y]).collect())
            }
        }
    }

    /// Decode an example into typed span predictions. Also returns the
    /// raw per-unit tag ids.
    pub fn predict_spans(
        &self,
        ex: &Example,
        sentence: usize,
    ) -> Result<(Vec<SpanPrediction>, Vec<usize>)> {
        let word_ids: Vec<u32> = ex.tokens.iter().map(|t| t.word).collect();
        let pass = self.forward(ex, &word_ids, None)?;
        let tags = self.decode_pass(&pass)?;
        let probs = self.tag_probabilities(&pass, &tags)?;
        let mut spans = Vec::new();
        match self.config.task {
            TaskKind::Chunking => {
                // spans() ends are exclusive; Span ends are inclusive.
                for (start, end_excl, label) in self.bio()?.spans(&tags) {
                    let score =
                        probs[start..end_excl].iter().sum::<f64>() / (end_excl - start) as f64;
                    spans.push(SpanPrediction {
                        span: Span { sentence, start, end: end_excl - 1, label },
                        score,
                    });
                }
            }
            TaskKind::Typing => {
                let o = self.tags.id("O")?;
                for (t, unit) in ex.units.iter().enumerate() {
                    let UnitRef::Chunk(c) = unit else {
                        return Err(Error::State("typing task over token units".into()));
                    };
                    if tags[t] != o {
                        spans.push(SpanPrediction {
                            span: Span {
                                sentence,
                                start: c.start,
                                end: c.end,
                                label: self.tags.name(tags[t]).to_string(),
                            },
                            score: probs[t],
                        });
                    }
                }
            }
            TaskKind::Event => {
                let o = self.tags.id("O")?;
                for (t, &y) in tags.iter().enumerate() {
                    if y != o {
                        spans.push(SpanPrediction {
                            span: Span {
                                sentence,
                                start: t,
                                end: t,
                                label: self.tags.name(y).to_string(),
                            },
                            score: probs[t],
                        });
                    }
                }
            }
        }
        Ok((spans, tags))
    }

    /// Attention records for every unit of one example (knowledge
    /// architecture only).
    pub fn attention_records(&self, ex: &Example) -> Result<Vec<AttentionRecord>> {
        if self.config.arch != Arch::Kb {
            return Err(Error::Config(
                "attention dump requires the knowledge architecture".into(),
            ));
        }
        let lex = self.lexicon.as_ref().expect("knowledge arch has a lexicon");
        let word_ids: Vec<u32> = ex.tokens.iter().map(|t| t.word).collect();
        let pass = self.forward(ex, &word_ids, None)?;
        let steps = pass.ksteps.as_ref().expect("knowledge pass");
        let mut records = Vec::with_capacity(ex.units.len());
        for (t, step) in steps.iter().enumerate() {
            let record = match &step.detail {
                None => AttentionRecord {
                    position: t,
                    surface: ex.surfaces[t].clone(),
                    concepts: Vec::new(),
                    sentinel: None,
                },
                Some(d) => AttentionRecord {
                    position: t,
                    surface: ex.surfaces[t].clone(),
                    concepts: ex.cands[t]
                        .ids
                        .iter()
                        .zip(&d.alpha)
                        .map(|(&c, &a)| (lex.concept_name(c).to_string(), a))
                        .collect(),
                    sentinel: Some(d.beta),
                },
            };
            record.verify()?;
            records.push(record);
        }
        Ok(records)
    }
}

struct Pass {
    xs_unit: Vec<Vector>,
    masks: Option<Vec<Vector>>,
    bi: BiStates,
    ksteps: Option<Vec<KnowledgeStep>>,
    states: Vec<Vector>,
    emissions: Vec<Vector>,
}

/// Gradient accumulator mirroring [`TaggerModel`]'s parameter layout.
#[derive(Debug, Clone)]
pub struct TaggerGrads {
    word_emb: Matrix,
    cap_emb: Matrix,
    lstm_fwd: LstmParams,
    lstm_bwd: LstmParams,
    attn: Option<AttnParams>,
    head_w: Matrix,
    trans: Option<TransitionTable>,
}

impl TaggerGrads {
    pub fn zeros_like(model: &TaggerModel) -> TaggerGrads {
        TaggerGrads {
            word_emb: Matrix::zeros(model.word_emb.rows(), model.word_emb.cols()),
            cap_emb: Matrix::zeros(model.cap_emb.rows(), model.cap_emb.cols()),
            lstm_fwd: model.lstm_fwd.zeros_like(),
            lstm_bwd: model.lstm_bwd.zeros_like(),
            attn: model.attn.as_ref().map(AttnParams::zeros_like),
            head_w: Matrix::zeros(model.head_w.rows(), model.head_w.cols()),
            trans: model.trans.as_ref().map(TransitionTable::zeros_like),
        }
    }
}

impl Params for TaggerModel {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a [f64])) {
        self.word_emb.visit(f);
        self.cap_emb.visit(f);
        self.lstm_fwd.visit(f);
        self.lstm_bwd.visit(f);
        if let Some(a) = &self.attn {
            a.visit(f);
        }
        self.head_w.visit(f);
        if let Some(t) = &self.trans {
            t.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.word_emb.visit_mut(f);
        self.cap_emb.visit_mut(f);
        self.lstm_fwd.visit_mut(f);
        self.lstm_bwd.visit_mut(f);
        if let Some(a) = &mut self.attn {
            a.visit_mut(f);
        }
        self.head_w.visit_mut(f);
        if let Some(t) = &mut self.trans {
            t.visit_mut(f);
        }
    }
}

impl Params for TaggerGrads {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a [f64])) {
        self.word_emb.visit(f);
        self.cap_emb.visit(f);
        self.lstm_fwd.visit(f);
        self.lstm_bwd.visit(f);
        if let Some(a) = &self.attn {
            a.visit(f);
        }
        self.head_w.visit(f);
        if let Some(t) = &self.trans {
            t.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.word_emb.visit_mut(f);
        self.cap_emb.visit_mut(f);
        self.lstm_fwd.visit_mut(f);
        self.lstm_bwd.visit_mut(f);
        if let Some(a) = &mut self.attn {
            a.visit_mut(f);
        }
        self.head_w.visit_mut(f);
        if let Some(t) = &mut self.trans {
            t.visit_mut(f);
        }
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub dev_f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_dev_f1: f64,
}

fn shuffle_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}

fn unked_word_ids(ex: &Example, rng: &mut ChaCha8Rng, rate: f64) -> Vec<u32> {
    ex.tokens
        .iter()
        .map(|t| {
            if rate > 0.0 && rng.gen::<f64>() < rate {
                UNK_ID
            } else {
                t.word
            }
        })
        .collect()
}

/// Span predictions for a whole list of examples (sentence id = index).
pub fn predict_corpus_spans(model: &TaggerModel, examples: &[Example]) -> Result<Vec<Span>> {
    let mut spans = Vec::new();
    for (sid, ex) in examples.iter().enumerate() {
        let (preds, _) = model.predict_spans(ex, sid)?;
        spans.extend(preds.into_iter().map(|p| p.span));
    }
    Ok(spans)
}

/// One-example-at-a-time training with gradient clipping, adaptive
/// moment updates, per-epoch reshuffling, and early stopping on dev span
/// F1 (patience in epochs, best snapshot restored). With an empty dev
/// set the loop runs all epochs and keeps the final model.
pub fn train_tagger(
    model: &mut TaggerModel,
    train: &[Example],
    dev: &[Example],
    dev_gold: &[Span],
) -> Result<TrainLog> {
    if train.is_empty() {
        return Err(Error::Input("empty training corpus".into()));
    }
    let cfg = model.config.clone();
    let mut opt = Optimizer::adam(cfg.lr, 0.9, 0.999, 1e-8);
    let mut log_out = TrainLog { history: Vec::new(), best_epoch: 0, best_dev_f1: f64::NEG_INFINITY };
    let mut best_snapshot: Option<TaggerModel> = None;
    let mut patience_left = cfg.patience;
    for epoch in 0..cfg.epochs {
        let order = shuffle_indices(
            train.len(),
            &mut substream(cfg.seed, &format!("shuffle:{epoch}")),
        );
        let mut unk_rng = substream(cfg.seed, &format!("unk:{epoch}"));
        let mut drop_rng = substream(cfg.seed, &format!("dropout:{epoch}"));
        let mut total_loss = 0.0;
        for &i in &order {
            let ex = &train[i];
            let word_ids = unked_word_ids(ex, &mut unk_rng, cfg.unk_rate);
            let pass = model.forward(ex, &word_ids, Some((&mut drop_rng, cfg.dropout)))?;
            let (loss, d_em, d_trans) = model.loss_grads(&pass, &ex.golds)?;
            let mut grads = TaggerGrads::zeros_like(model);
            model.backward(ex, &word_ids, &pass, &d_em, d_trans, &mut grads)?;
            clip_global_norm(&mut grads, cfg.clip);
            opt.step(model, &grads)?;
            total_loss += loss;
        }
        let mean_loss = total_loss / train.len() as f64;
        let dev_f1 = if dev.is_empty() {
            0.0
        } else {
            let spans = predict_corpus_spans(model, dev)?;
            evaluate_spans(dev_gold, &spans, dev.len())?.f1
        };
        log::info!("epoch {epoch}: mean loss {mean_loss:.6}, dev F1 {dev_f1:.4}");
        log_out.history.push(EpochStats { epoch, mean_loss, dev_f1 });
        if !dev.is_empty() {
            if dev_f1 > log_out.best_dev_f1 {
                log_out.best_dev_f1 = dev_f1;
                log_out.best_epoch = epoch;
                best_snapshot = Some(model.clone());
                patience_left = cfg.patience;
                if dev_f1 >= 1.0 {
                    break;
                }
            } else {
                if patience_left == 0 {
                    break;
                }
                patience_left -= 1;
            }
        }
    }
    if let Some(best) = best_snapshot {
        *model = best;
    } else {
        log_out.best_epoch = log_out.history.len().saturating_sub(1);
        log_out.best_dev_f1 = log_out.history.last().map_or(0.0, |e| e.dev_f1);
    }
    Ok(log_out)
}

/// Stage 1: token-level BIO mention detection over the collapsed
/// (untyped) boundary alphabet. Always a plain BiLSTM — knowledge
/// attaches in stage 2.
pub fn train_stage1_chunker(
    train: &[RawSentence],
    dev: &[RawSentence],
    mut config: TaggerConfig,
) -> Result<(TaggerModel, TrainLog)> {
    if train.is_empty() {
        return Err(Error::Input("empty training corpus".into()));
    }
    config.task = TaskKind::Chunking;
    config.arch = Arch::Plain;
    let vocab = WordVocab::build(train);
    let tags = TagSet::from_names(["O", "B-ENT", "I-ENT"])?;
    let to_examples = |sents: &[RawSentence]| -> Result<Vec<Example>> {
        sents
            .iter()
            .map(|s| {
                token_example(s, &vocab, &tags, None, |t| Ok(collapse_bio_tag(t)?.to_string()), true)
            })
            .collect()
    };
    let train_ex = to_examples(train)?;
    let dev_ex = to_examples(dev)?;
    let dev_gold: Vec<Span> = gold_entity_spans(dev)?
        .into_iter()
        .map(|mut s| {
            s.label = "ENT".to_string();
            s
        })
        .collect();
    let mut model = TaggerModel::init(config, vocab, tags, None, None)?;
    let log = train_tagger(&mut model, &train_ex, &dev_ex, &dev_gold)?;
    Ok((model, log))
}

/// Where stage 2 gets its chunk boundaries.
pub enum BoundarySource<'a> {
    /// Gold mention boundaries from the BIO tags.
    Gold,
    /// Boundaries decoded by a trained stage-1 model; gold types are
    /// projected onto exactly matching spans (others train as O).
    Chunker(&'a TaggerModel),
}

fn typer_tagset(train: &[RawSentence]) -> Result<TagSet> {
    let mut names = vec!["O".to_string()];
    for sent in train {
        for tok in &sent.tokens {
            match parse_bio_role(&tok.tag)? {
                BioRole::Begin(t) | BioRole::Inside(t) => {
                    if !names.contains(&t) {
                        names.push(t);
                    }
                }
                BioRole::Outside => {}
            }
        }
    }
    TagSet::from_names(names)
}

fn boundary_chunks(
    raw: &RawSentence,
    source: &BoundarySource,
    vocab: &WordVocab,
) -> Result<Vec<(ChunkRef, Option<String>)>> {
    match source {
        BoundarySource::Gold => gold_chunks(raw),
        BoundarySource::Chunker(chunker) => {
            let ex = token_example(raw, &chunker.words, &chunker.tags, None, |t| Ok(t.to_string()), false)?;
            let tags = chunker.decode(&ex)?;
            let roles: Vec<BioRole> = tags
                .iter()
                .map(|&t| parse_bio_role(chunker.tags.name(t)))
                .collect::<Result<Vec<_>>>()?;
            let heads: Vec<bool> = raw.tokens.iter().map(|t| t.head).collect();
            let mut chunks = chunks_from_roles(&roles, &heads);
            // Project gold types onto exactly matching predicted spans.
            let gold: BTreeMap<(usize, usize), String> = gold_chunks(raw)?
                .into_iter()
                .filter_map(|(c, l)| l.map(|l| ((c.start, c.end), l)))
                .collect();
            for (c, label) in &mut chunks {
                *label = if label.is_some() {
                    gold.get(&(c.start, c.end)).cloned()
                } else {
                    None
                };
            }
            let _ = vocab;
            Ok(chunks)
        }
    }
}

/// Stage 2: chunk-sequence typing with any architecture/objective
/// combination. Dev F1 is measured against the true typed mention
/// spans, so boundary errors in a supplied chunker count against it.
pub fn train_stage2_typer(
    train: &[RawSentence],
    dev: &[RawSentence],
    lexicon: Option<ConceptLexicon>,
    boundaries: BoundarySource,
    mut config: TaggerConfig,
) -> Result<(TaggerModel, TrainLog)> {
    if train.is_empty() {
        return Err(Error::Input("empty training corpus".into()));
    }
    config.task = TaskKind::Typing;
    let vocab = WordVocab::build(train);
    let tags = typer_tagset(train)?;
    let mut model = TaggerModel::init(config, vocab, tags, lexicon, None)?;
    let to_examples = |sents: &[RawSentence], model: &TaggerModel| -> Result<Vec<Example>> {
        sents
            .iter()
            .map(|s| {
                let chunks = boundary_chunks(s, &boundaries, &model.words)?;
                chunk_example(s, &chunks, &model.words, &model.tags, model.lexicon.as_ref(), true)
            })
            .collect()
    };
    let train_ex = to_examples(train, &model)?;
    let dev_ex = to_examples(dev, &model)?;
    let dev_gold = gold_entity_spans(dev)?;
    let log = train_tagger(&mut model, &train_ex, &dev_ex, &dev_gold)?;
    Ok((model, log))
}

fn event_tagset(train: &[RawSentence]) -> Result<TagSet> {
    let mut names = vec!["O".to_string()];
    for sent in train {
        for tok in &sent.tokens {
            if !names.contains(&tok.tag) {
                names.push(tok.tag.clone());
            }
        }
    }
    TagSet::from_names(names)
}

/// Token-level event-trigger typing with any architecture/objective.
pub fn train_event_tagger(
    train: &[RawSentence],
    dev: &[RawSentence],
    lexicon: Option<ConceptLexicon>,
    mut config: TaggerConfig,
) -> Result<(TaggerModel, TrainLog)> {
    if train.is_empty() {
        return Err(Error::Input("empty training corpus".into()));
    }
    config.task = TaskKind::Event;
    let vocab = WordVocab::build(train);
    let tags = event_tagset(train)?;
    let mut model = TaggerModel::init(config, vocab, tags, lexicon, None)?;
    let to_examples = |sents: &[RawSentence], model: &TaggerModel| -> Result<Vec<Example>> {
        sents
            .iter()
            .map(|s| {
                token_example(
                    s,
                    &model.words,
                    &model.tags,
                    model.lexicon.as_ref(),
                    |t| Ok(t.to_string()),
                    true,
                )
            })
            .collect()
    };
    let train_ex = to_examples(train, &model)?;
    let dev_ex = to_examples(dev, &model)?;
    let dev_gold = gold_token_spans(dev);
    let log = train_tagger(&mut model, &train_ex, &dev_ex, &dev_gold)?;
    Ok((model, log))
}

// ---------------------------------------------------------------------------
// Inference entry points
// ---------------------------------------------------------------------------

/// Two-stage entity tagging: chunk boundaries from the stage-1 model
/// (or gold BIO tags when no chunker is given), then stage-2 typing;
/// O-typed chunks are dropped.
pub fn tag_entities(
    chunker: Option<&TaggerModel>,
    typer: &TaggerModel,
    sentences: &[RawSentence],
) -> Result<Vec<SpanPrediction>> {
    if typer.config.task != TaskKind::Typing {
        return Err(Error::Config("stage-2 model does not type chunks".into()));
    }
    let source = match chunker {
        Some(m) => {
            if m.config.task != TaskKind::Chunking {
                return Err(Error::Config("stage-1 model is not a chunker".into()));
            }
            BoundarySource::Chunker(m)
        }
        None => BoundarySource::Gold,
    };
    let mut out = Vec::new();
    for (sid, sent) in sentences.iter().enumerate() {
        if sent.tokens.is_empty() {
            continue;
        }
        let chunks = boundary_chunks(sent, &source, &typer.words)?;
        let ex = chunk_example(sent, &chunks, &typer.words, &typer.tags, typer.lexicon.as_ref(), false)?;
        let (spans, _) = typer.predict_spans(&ex, sid)?;
        out.extend(spans);
    }
    Ok(out)
}

/// Token-level event tagging over raw sentences.
pub fn tag_events(model: &TaggerModel, sentences: &[RawSentence]) -> Result<Vec<SpanPrediction>> {
    if model.config.task != TaskKind::Event {
        return Err(Error::Config("model does not tag event triggers".into()));
    }
    let mut out = Vec::new();
    for (sid, sent) in sentences.iter().enumerate() {
        if sent.tokens.is_empty() {
            continue;
        }
        let ex = token_example(
            sent,
            &model.words,
            &model.tags,
            model.lexicon.as_ref(),
            |t| Ok(t.to_string()),
            false,
        )?;
        let (spans, _) = model.predict_spans(&ex, sid)?;
        out.extend(spans);
    }
    Ok(out)
}

/// Untyped mention spans from a stage-1 chunker alone.
pub fn tag_chunks(model: &TaggerModel, sentences: &[RawSentence]) -> Result<Vec<SpanPrediction>> {
    if model.config.task != TaskKind::Chunking {
        return Err(Error::Config("model does not chunk mentions".into()));
    }
    let mut out = Vec::new();
    for (sid, sent) in sentences.iter().enumerate() {
        if sent.tokens.is_empty() {
            continue;
        }
        let ex = token_example(
            sent,
            &model.words,
            &model.tags,
            None,
            |t| Ok(t.to_string()),
            false,
        )?;
        let (spans, _) = model.predict_spans(&ex, sid)?;
        out.extend(spans);
    }
    Ok(out)
}

/// Attention records per sentence for a trained knowledge model. Typing
/// models read gold boundaries from the input; token models run as-is.
pub fn dump_attention(
    model: &TaggerModel,
    sentences: &[RawSentence],
) -> Result<Vec<Vec<AttentionRecord>>> {
    let mut out = Vec::new();
    for sent in sentences {
        if sent.tokens.is_empty() {
            out.push(Vec::new());
            continue;
        }
        let ex = match model.config.task {
            TaskKind::Typing => {
                let chunks = gold_chunks(sent)?;
                chunk_example(sent, &chunks, &model.words, &model.tags, model.lexicon.as_ref(), false)?
            }
            _ => token_example(
                sent,
                &model.words,
                &model.tags,
                model.lexicon.as_ref(),
                |t| Ok(t.to_string()),
                false,
            )?,
        };
        out.push(model.attention_records(&ex)?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Model serialization
// ---------------------------------------------------------------------------

use crate::container::{self, RawTensor, LIST_SEP, RECORD_SEP};

fn config_block(model: &TaggerModel) -> Vec<(String, String)> {
    let c = &model.config;
    let mut kv: Vec<(String, String)> = vec![
        (
            "task".into(),
            match c.task {
                TaskKind::Chunking => "chunker",
                TaskKind::Typing => "typer",
                TaskKind::Event => "event",
            }
            .into(),
        ),
        (
            "arch".into(),
            match c.arch {
                Arch::Plain => "plain",
                Arch::Fea => "fea",
                Arch::Kb => "kb",
            }
            .into(),
        ),
        (
            "objective".into(),
            match c.objective {
                Objective::Softmax => "softmax",
                Objective::Crf => "crf",
            }
            .into(),
        ),
        ("hidden".into(), c.hidden.to_string()),
        ("word_dim".into(), c.word_dim.to_string()),
        ("dropout".into(), format!("{:.17e}", c.dropout)),
        ("lr".into(), format!("{:.17e}", c.lr)),
        ("epochs".into(), c.epochs.to_string()),
        ("patience".into(), c.patience.to_string()),
        ("clip".into(), format!("{:.17e}", c.clip)),
        ("unk_rate".into(), format!("{:.17e}", c.unk_rate)),
        ("project".into(), c.project.to_string()),
        ("seed".into(), c.seed.to_string()),
        ("words".into(), model.words.names().join(&LIST_SEP.to_string())),
        ("tags".into(), model.tags.names().join(&LIST_SEP.to_string())),
    ];
    if let Some(lex) = &model.lexicon {
        let concepts: Vec<&str> = (0..lex.num_concepts()).map(|i| lex.concept_name(i)).collect();
        kv.push(("concepts".into(), concepts.join(&LIST_SEP.to_string())));
        let entries: Vec<String> = lex
            .entries()
            .map(|(s, ids)| {
                let names: Vec<&str> = ids.iter().map(|&i| lex.concept_name(i)).collect();
                format!("{s}{LIST_SEP}{}", names.join(","))
            })
            .collect();
        kv.push(("lexicon".into(), entries.join(&RECORD_SEP.to_string())));
    }
    kv
}

fn lstm_tensors<'a>(prefix: &str, p: &'a LstmParams) -> Vec<(String, Vec<u32>, &'a [f64])> {
    let m = |name: &str, mat: &'a Matrix| {
        (
            format!("{prefix}.{name}"),
            vec![mat.rows() as u32, mat.cols() as u32],
            mat.data(),
        )
    };
    let v = |name: &str, vec: &'a Vector| {
        (format!("{prefix}.{name}"), vec![vec.dim() as u32], vec.as_slice())
    };
    vec![
        m("w_i", &p.w_i),
        m("u_i", &p.u_i),
        v("b_i", &p.b_i),
        m("w_f", &p.w_f),
        m("u_f", &p.u_f),
        v("b_f", &p.b_f),
        m("w_o", &p.w_o),
        m("u_o", &p.u_o),
        v("b_o", &p.b_o),
        m("w_c", &p.w_c),
        m("u_c", &p.u_c),
        v("b_c", &p.b_c),
    ]
}

/// Write the single-file binary model container.
pub fn write_model(model: &TaggerModel, w: impl Write) -> Result<()> {
    let mat = |name: &str, m: &Matrix| -> (String, Vec<u32>, Vec<f64>) {
        (name.to_string(), vec![m.rows() as u32, m.cols() as u32], m.data().to_vec())
    };
    let mut tensors: Vec<(String, Vec<u32>, Vec<f64>)> = vec![
        mat("word_emb", &model.word_emb),
        mat("cap_emb", &model.cap_emb),
    ];
    for (n, d, v) in lstm_tensors("lstm_fwd", &model.lstm_fwd) {
        tensors.push((n, d, v.to_vec()));
    }
    for (n, d, v) in lstm_tensors("lstm_bwd", &model.lstm_bwd) {
        tensors.push((n, d, v.to_vec()));
    }
    if let Some(a) = &model.attn {
        tensors.push(mat("attn.w_v", &a.w_v));
        tensors.push(mat("attn.w_s", &a.w_s));
        tensors.push(mat("attn.w_b_fwd", &a.w_b_fwd));
        tensors.push(mat("attn.u_b_fwd", &a.u_b_fwd));
        tensors.push(mat("attn.w_b_bwd", &a.w_b_bwd));
        tensors.push(mat("attn.u_b_bwd", &a.u_b_bwd));
        tensors.push(mat("attn.w_p", &a.w_p));
    }
    tensors.push(mat("head_w", &model.head_w));
    if let Some(t) = &model.trans {
        let n = t.num_tags() + 2;
        let mut flat = Vec::with_capacity(n * n);
        t.visit(&mut |s| flat.extend_from_slice(s));
        tensors.push(("trans".to_string(), vec![n as u32, n as u32], flat));
    }
    if let Some(lex) = &model.lexicon {
        let mut flat = Vec::with_capacity(lex.num_concepts() * lex.dim());
        for i in 0..lex.num_concepts() {
            flat.extend_from_slice(lex.embedding(i).as_slice());
        }
        tensors.push((
            "concept_emb".to_string(),
            vec![lex.num_concepts() as u32, lex.dim() as u32],
            flat,
        ));
    }

    container::write_container(w, "tagger", &config_block(model), &tensors)
}

pub fn save_model(model: &TaggerModel, path: &Path) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_model(model, &mut file)?;
    file.flush()?;
    Ok(())
}

use crate::container::{take_matrix, take_vector};

fn take_lstm(
    tensors: &mut BTreeMap<String, RawTensor>,
    prefix: &str,
    hidden: usize,
    input: usize,
) -> Result<LstmParams> {
    let mut p = LstmParams::zeros(hidden, input, true);
    p.w_i = take_matrix(tensors, &format!("{prefix}.w_i"), hidden, hidden)?;
    p.u_i = take_matrix(tensors, &format!("{prefix}.u_i"), hidden, input)?;
    p.b_i = take_vector(tensors, &format!("{prefix}.b_i"), hidden)?;
    p.w_f = take_matrix(tensors, &format!("{prefix}.w_f"), hidden, hidden)?;
    p.u_f = take_matrix(tensors, &format!("{prefix}.u_f"), hidden, input)?;
    p.b_f = take_vector(tensors, &format!("{prefix}.b_f"), hidden)?;
    p.w_o = take_matrix(tensors, &format!("{prefix}.w_o"), hidden, hidden)?;
    p.u_o = take_matrix(tensors, &format!("{prefix}.u_o"), hidden, input)?;
    p.b_o = take_vector(tensors, &format!("{prefix}.b_o"), hidden)?;
    p.w_c = take_matrix(tensors, &format!("{prefix}.w_c"), hidden, hidden)?;
    p.u_c = take_matrix(tensors, &format!("{prefix}.u_c"), hidden, input)?;
    p.b_c = take_vector(tensors, &format!("{prefix}.b_c"), hidden)?;
    Ok(p)
}

/// Read a model container written by [`write_model`].
pub fn read_model(r: impl Read) -> Result<TaggerModel> {
    let (kv, mut tensors) = container::read_container(r, "tagger")?;
    let get = |k: &str| -> Result<&String> {
        kv.get(k).ok_or_else(|| Error::Config(format!("model config lacks {k:?}")))
    };
    let parse_num = |k: &str| -> Result<f64> {
        get(k)?
            .parse::<f64>()
            .map_err(|e| Error::Config(format!("model config {k}: {e}")))
    };
    let task = match get("task")?.as_str() {
        "chunker" => TaskKind::Chunking,
        "typer" => TaskKind::Typing,
        "event" => TaskKind::Event,
        other => return Err(Error::Config(format!("unknown task {other:?}"))),
    };
    let arch = match get("arch")?.as_str() {
        "plain" => Arch::Plain,
        "fea" => Arch::Fea,
        "kb" => Arch::Kb,
        other => return Err(Error::Config(format!("unknown arch {other:?}"))),
    };
    let objective = match get("objective")?.as_str() {
        "softmax" => Objective::Softmax,
        "crf" => Objective::Crf,
        other => return Err(Error::Config(format!("unknown objective {other:?}"))),
    };
    let config = TaggerConfig {
        task,
        arch,
        objective,
        hidden: parse_num("hidden")? as usize,
        word_dim: parse_num("word_dim")? as usize,
        dropout: parse_num("dropout")?,
        lr: parse_num("lr")?,
        epochs: parse_num("epochs")? as usize,
        patience: parse_num("patience")? as usize,
        clip: parse_num("clip")?,
        unk_rate: parse_num("unk_rate")?,
        project: get("project")? == "true",
        seed: parse_num("seed")? as u64,
    };
    config.validate()?;
    let words = WordVocab::from_names(
        get("words")?.split(LIST_SEP).map(String::from).collect(),
    )?;
    let tags = TagSet::from_names(get("tags")?.split(LIST_SEP).map(String::from))?;

    let lexicon = match kv.get("concepts") {
        None => None,
        Some(concept_names) => {
            let names: Vec<&str> = concept_names.split(LIST_SEP).collect();
            let emb = tensors
                .remove("concept_emb")
                .ok_or_else(|| Error::Config("model file lacks tensor \"concept_emb\"".into()))?;
            if emb.dims.len() != 2 || emb.dims[0] != names.len() {
                return Err(Error::Dimension(format!(
                    "concept embeddings {:?} do not match {} concepts",
                    emb.dims,
                    names.len()
                )));
            }
            let d_k = emb.dims[1];
            let concepts: Vec<(String, Vec<f64>)> = names
                .iter()
                .enumerate()
                .map(|(i, n)| (n.to_string(), emb.values[i * d_k..(i + 1) * d_k].to_vec()))
                .collect();
            let mut entries = Vec::new();
            if let Some(lex_text) = kv.get("lexicon") {
                for record in lex_text.split(RECORD_SEP).filter(|s| !s.is_empty()) {
                    let (surface, concepts) = record.split_once(LIST_SEP).ok_or_else(|| {
                        Error::Config(format!("bad lexicon record {record:?}"))
                    })?;
                    entries.push((
                        surface.to_string(),
                        concepts.split(',').map(String::from).collect(),
                    ));
                }
            }
            Some(ConceptLexicon::new(concepts, &entries)?)
        }
    };

    let d_unit = config.unit_input_dim();
    let word_emb = take_matrix(&mut tensors, "word_emb", words.len(), config.word_dim)?;
    let cap_emb = take_matrix(&mut tensors, "cap_emb", CapClass::COUNT, CAP_DIM)?;
    let lstm_fwd = take_lstm(&mut tensors, "lstm_fwd", config.hidden, d_unit)?;
    let lstm_bwd = take_lstm(&mut tensors, "lstm_bwd", config.hidden, d_unit)?;
    let attn = match arch {
        Arch::Kb => {
            let lex = lexicon
                .as_ref()
                .ok_or_else(|| Error::Config("knowledge model without concepts".into()))?;
            let d_k = lex.dim();
            let two_h = 2 * config.hidden;
            let mut a = AttnParams::zeros(config.hidden, d_unit, d_k, config.project)?;
            a.w_v = take_matrix(&mut tensors, "attn.w_v", d_k, two_h)?;
            a.w_s = take_matrix(&mut tensors, "attn.w_s", two_h, two_h)?;
            a.w_b_fwd = take_matrix(&mut tensors, "attn.w_b_fwd", config.hidden, config.hidden)?;
            a.u_b_fwd = take_matrix(&mut tensors, "attn.u_b_fwd", config.hidden, d_unit)?;
            a.w_b_bwd = take_matrix(&mut tensors, "attn.w_b_bwd", config.hidden, config.hidden)?;
            a.u_b_bwd = take_matrix(&mut tensors, "attn.u_b_bwd", config.hidden, d_unit)?;
            a.w_p = take_matrix(&mut tensors, "attn.w_p", two_h, d_k)?;
            Some(a)
        }
        _ => None,
    };
    let state_dim = match arch {
        Arch::Fea => {
            2 * config.hidden
                + lexicon
                    .as_ref()
                    .ok_or_else(|| Error::Config("feature model without concepts".into()))?
                    .num_concepts()
        }
        _ => 2 * config.hidden,
    };
    let head_w = take_matrix(&mut tensors, "head_w", tags.len(), state_dim)?;
    let trans = match objective {
        Objective::Crf => {
            let n = tags.len() + 2;
            let raw = take_matrix(&mut tensors, "trans", n, n)?;
            let mut t = TransitionTable::new(tags.len());
            t.assign_flat(raw.data())?;
            Some(t)
        }
        Objective::Softmax => None,
    };
    if let Some(name) = tensors.keys().next() {
        return Err(Error::Config(format!("unexpected tensor {name:?} in model file")));
    }
    Ok(TaggerModel {
        config,
        words,
        tags,
        lexicon,
        word_emb,
        cap_emb,
        lstm_fwd,
        lstm_bwd,
        attn,
        head_w,
        trans,
    })
}

pub fn load_model(path: &Path) -> Result<TaggerModel> {
    let file = std::fs::File::open(path)?;
    read_model(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::grad_check;
    use crate::numerics::rng::seeded;

    fn sent(rows: &[(&str, &str)]) -> RawSentence {
        RawSentence {
            tokens: rows
                .iter()
                .map(|(s, t)| RawToken { surface: s.to_string(), tag: t.to_string(), head: false })
                .collect(),
        }
    }

    fn tiny_config(task: TaskKind) -> TaggerConfig {
        let mut c = TaggerConfig::new(task);
        c.hidden = 6;
        c.word_dim = 8;
        c.epochs = 60;
        // Memorization stalls for a few epochs before the loss drops, so
        // patience must outlast the stall.
        c.patience = 60;
        c.lr = 0.02;
        c.dropout = 0.1;
        c.unk_rate = 0.0;
        c
    }

    use crate::synth::memorization_corpus;

    fn tiny_lexicon() -> ConceptLexicon {
        let concepts = vec![
            ("person".to_string(), vec![1.0, 0.0, 0.0, 0.2]),
            ("city".to_string(), vec![0.0, 1.0, 0.0, -0.3]),
            ("county".to_string(), vec![0.0, 0.0, 1.0, 0.1]),
        ];
        let entries = vec![
            ("clinton".to_string(), vec!["person".into(), "city".into(), "county".into()]),
            ("paris".to_string(), vec!["city".into(), "person".into()]),
        ];
        ConceptLexicon::new(concepts, &entries).unwrap()
    }

    #[test]
    fn capitalization_classes() {
        assert_eq!(CapClass::of("clinton"), CapClass::AllLower);
        assert_eq!(CapClass::of("Clinton"), CapClass::InitialUpper);
        assert_eq!(CapClass::of("McDonald"), CapClass::Mixed);
        assert_eq!(CapClass::of("NASA"), CapClass::AllUpper);
        assert_eq!(CapClass::of("iPhone"), CapClass::Mixed);
        assert_eq!(CapClass::of("123"), CapClass::NonAlpha);
        assert_eq!(CapClass::of("--"), CapClass::NonAlpha);
        assert_eq!(CapClass::of("U.S."), CapClass::AllUpper);
    }

    #[test]
    fn corpus_reader_handles_docstart_blank_lines_and_heads() {
        let text = "-DOCSTART-\tO\n\nanna\tB-PER\nvisited\tO\n\nparis\tB-LOC\t1\n\n\n";
        let sents = read_corpus(text.as_bytes(), "c.tsv").unwrap();
        assert_eq!(sents.len(), 2);
        assert_eq!(sents[0].tokens.len(), 2);
        assert!(!sents[0].tokens[0].head);
        assert!(sents[1].tokens[0].head);

        assert!(read_corpus("word\n".as_bytes(), "c.tsv").is_err());
        assert!(read_corpus("word\ttag\t2\n".as_bytes(), "c.tsv").is_err());
        let err = read_corpus("a\tO\nb\n".as_bytes(), "c.tsv").unwrap_err();
        assert!(err.to_string().contains("c.tsv:2"), "{err}");
    }

    #[test]
    fn collapse_maps_types_away() {
        assert_eq!(collapse_bio_tag("B-PER").unwrap(), "B-ENT");
        assert_eq!(collapse_bio_tag("I-GPE").unwrap(), "I-ENT");
        assert_eq!(collapse_bio_tag("O").unwrap(), "O");
        assert!(collapse_bio_tag("VERB").is_err());
    }

    #[test]
    fn chunking_covers_sentence_and_respects_head_flags() {
        let roles = [
            parse_bio_role("O").unwrap(),
            parse_bio_role("B-PER").unwrap(),
            parse_bio_role("I-PER").unwrap(),
            parse_bio_role("O").unwrap(),
            parse_bio_role("O").unwrap(),
            parse_bio_role("B-LOC").unwrap(),
        ];
        let heads = [false, true, false, false, false, false];
        let chunks = chunks_from_roles(&roles, &heads);
        assert_eq!(chunks.len(), 4);
        assert_eq!(chunks[0].0, ChunkRef { start: 0, end: 0, head: 0 });
        assert_eq!(chunks[0].1, None);
        // Flagged head wins over the last-token default.
        assert_eq!(chunks[1].0, ChunkRef { start: 1, end: 2, head: 1 });
        assert_eq!(chunks[1].1.as_deref(), Some("PER"));
        assert_eq!(chunks[2].0, ChunkRef { start: 3, end: 4, head: 4 });
        assert_eq!(chunks[3].0, ChunkRef { start: 5, end: 5, head: 5 });

        // Orphan inside tag opens a mention.
        let roles = [parse_bio_role("O").unwrap(), parse_bio_role("I-LOC").unwrap()];
        let chunks = chunks_from_roles(&roles, &[false, false]);
        assert_eq!(chunks[1].1.as_deref(), Some("LOC"));
    }

    #[test]
    fn chunk_composition_is_mean_plus_head() {
        let u = Vector::from_vec(vec![2.0, 0.0]);
        let v = Vector::from_vec(vec![0.0, 4.0]);
        let single = compose_chunk(std::slice::from_ref(&u), 0).unwrap();
        assert_eq!(single.as_slice(), &[2.0, 0.0, 2.0, 0.0]);
        let pair = compose_chunk(&[u.clone(), v.clone()], 1).unwrap();
        assert_eq!(pair.as_slice(), &[1.0, 2.0, 0.0, 4.0]);
        assert!(compose_chunk(&[], 0).is_err());
        assert!(compose_chunk(&[u], 1).is_err());
    }

    #[test]
    fn span_scoring_matches_hand_counts() {
        let g = |sid: usize, a: usize, b: usize, l: &str| Span {
            sentence: sid,
            start: a,
            end: b,
            label: l.to_string(),
        };
        let gold = vec![g(0, 0, 1, "PER"), g(0, 3, 3, "LOC"), g(1, 0, 0, "PER")];
        let pred = vec![g(0, 0, 1, "PER"), g(1, 0, 0, "LOC")];
        let s = evaluate_spans(&gold, &pred, 2).unwrap();
        assert!((s.precision - 0.5).abs() < 1e-12);
        assert!((s.recall - 1.0 / 3.0).abs() < 1e-12);
        assert!((s.f1 - 0.4).abs() < 1e-12);

        let perfect = evaluate_spans(&gold, &gold.clone(), 2).unwrap();
        assert_eq!(perfect.f1, 1.0);

        let none = evaluate_spans(&gold, &[], 2).unwrap();
        assert_eq!((none.precision, none.recall, none.f1), (0.0, 0.0, 0.0));

        assert!(evaluate_spans(&gold, &[g(5, 0, 0, "X")], 2).is_err());
    }

    #[test]
    fn metrics_format_has_per_run_and_summary_lines() {
        let runs = vec![
            (7u64, Scores { precision: 1.0, recall: 0.5, f1: 2.0 / 3.0 }),
            (8u64, Scores { precision: 0.5, recall: 0.5, f1: 0.5 }),
        ];
        let text = format_metrics(&runs);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "7\t1.0000\t0.5000\t0.6667");
        assert!(lines[2].starts_with("summary\t0.7500 ± "));
    }

    #[test]
    fn erfc_matches_reference_values() {
        // Reference values from standard tables.
        assert!((erfc(0.0) - 1.0).abs() < 1e-7);
        assert!((erfc(1.0) - 0.157_299_207_050_285_13).abs() < 1.3e-7);
        assert!((erfc(2.0) - 0.004_677_734_981_063_127).abs() < 1.3e-7);
        assert!((erfc(-1.0) - (2.0 - 0.157_299_207_050_285_13)).abs() < 1.3e-7);
    }

    #[test]
    fn rank_sum_basics() {
        assert!(wilcoxon_rank_sum(&[1.0, 2.0], &[1.0, 2.0, 3.0]).is_err());

        let same = [0.5, 0.5, 0.5, 0.5];
        assert_eq!(wilcoxon_rank_sum(&same, &same).unwrap(), 1.0);

        let a: Vec<f64> = (1..=10).map(f64::from).collect();
        let b: Vec<f64> = (11..=20).map(f64::from).collect();
        let p = wilcoxon_rank_sum(&a, &b).unwrap();
        assert!(p < 0.001, "p = {p}");
        // Symmetric in its arguments.
        let q = wilcoxon_rank_sum(&b, &a).unwrap();
        assert!((p - q).abs() < 1e-12);
    }

    #[test]
    fn u_statistic_matches_pair_counting() {
        let mut rng = seeded(77);
        for _ in 0..50 {
            let a: Vec<f64> = (0..10).map(|_| (rng.gen::<f64>() * 8.0).round() / 4.0).collect();
            let b: Vec<f64> = (0..10).map(|_| (rng.gen::<f64>() * 8.0).round() / 4.0).collect();
            let (u, _, _) = rank_sum_u(&a, &b);
            let mut brute = 0.0;
            for x in &a {
                for y in &b {
                    if x > y {
                        brute += 1.0;
                    } else if x == y {
                        brute += 0.5;
                    }
                }
            }
            assert!((u - brute).abs() < 1e-9, "u={u} brute={brute}");
        }
    }

    #[test]
    fn fea_indicators_set_exactly_the_candidate_bits() {
        let lex = tiny_lexicon();
        let mut config = tiny_config(TaskKind::Event);
        config.arch = Arch::Fea;
        config.objective = Objective::Softmax;
        let corpus = vec![sent(&[("clinton", "PER"), ("spoke", "O")])];
        let vocab = WordVocab::build(&corpus);
        let tags = event_tagset(&corpus).unwrap();
        let model = TaggerModel::init(config, vocab, tags, Some(lex), None).unwrap();
        assert_eq!(model.state_dim(), 2 * model.config.hidden + 3);
        let ex = token_example(
            &corpus[0],
            &model.words,
            &model.tags,
            model.lexicon.as_ref(),
            |t| Ok(t.to_string()),
            true,
        )
        .unwrap();
        let word_ids: Vec<u32> = ex.tokens.iter().map(|t| t.word).collect();
        let pass = model.forward(&ex, &word_ids, None).unwrap();
        let two_h = 2 * model.config.hidden;
        // "clinton" lists person, city, county in order: all three bits.
        assert_eq!(pass.states[0].as_slice()[two_h..], [1.0, 1.0, 1.0]);
        // "spoke" has no candidates.
        assert_eq!(pass.states[1].as_slice()[two_h..], [0.0, 0.0, 0.0]);
    }

    /// End-to-end gradient check through embeddings, BiLSTM, knowledge
    /// attention, and the CRF loss, for every architecture.
    #[test]
    fn tagger_loss_gradients_match_finite_differences() {
        let corpus = vec![sent(&[("clinton", "B-PER"), ("visited", "O"), ("paris", "B-LOC")])];
        for (arch, objective) in [
            (Arch::Plain, Objective::Softmax),
            (Arch::Fea, Objective::Crf),
            (Arch::Kb, Objective::Crf),
            (Arch::Kb, Objective::Softmax),
        ] {
            let mut config = tiny_config(TaskKind::Typing);
            config.hidden = 3;
            config.word_dim = 4;
            config.arch = arch;
            config.objective = objective;
            config.dropout = 0.0;
            let vocab = WordVocab::build(&corpus);
            let tags = typer_tagset(&corpus).unwrap();
            let lexicon = match arch {
                Arch::Plain => None,
                _ => Some(tiny_lexicon()),
            };
            let mut model = TaggerModel::init(config, vocab, tags, lexicon, None).unwrap();
            let ex = chunk_example(
                &corpus[0],
                &gold_chunks(&corpus[0]).unwrap(),
                &model.words,
                &model.tags,
                model.lexicon.as_ref(),
                true,
            )
            .unwrap();
            let word_ids: Vec<u32> = ex.tokens.iter().map(|t| t.word).collect();

            let pass = model.forward(&ex, &word_ids, None).unwrap();
            let (_, d_em, d_trans) = model.loss_grads(&pass, &ex.golds).unwrap();
            let mut grads = TaggerGrads::zeros_like(&model);
            model.backward(&ex, &word_ids, &pass, &d_em, d_trans, &mut grads).unwrap();

            let theta = model.to_flat();
            let analytic = grads.to_flat();
            let golds = ex.golds.clone();
            let worst = grad_check(
                |flat| {
                    model.assign_flat(flat)?;
                    let pass = model.forward(&ex, &word_ids, None)?;
                    Ok(model.loss_grads(&pass, &golds)?.0)
                },
                &theta,
                &analytic,
                1e-4,
            )
            .unwrap();
            // Composite check over the full parameter vector; the finite-
            // difference noise floor sits higher than for single modules.
            assert!(worst < 1e-4, "{arch:?}/{objective:?}: worst {worst}");
        }
    }

    #[test]
    fn chunker_memorizes_ten_sentences() {
        let corpus = memorization_corpus();
        let config = tiny_config(TaskKind::Chunking);
        let (model, log) = train_stage1_chunker(&corpus, &corpus, config).unwrap();
        assert!(
            log.best_dev_f1 == 1.0,
            "chunker failed to memorize: best F1 {}",
            log.best_dev_f1
        );
        // Round trip: decoded spans match collapsed gold spans.
        let examples: Vec<Example> = corpus
            .iter()
            .map(|s| {
                token_example(s, &model.words, &model.tags, None, |t| {
                    Ok(collapse_bio_tag(t)?.to_string())
                }, true)
                .unwrap()
            })
            .collect();
        let spans = predict_corpus_spans(&model, &examples).unwrap();
        let gold: Vec<Span> = gold_entity_spans(&corpus)
            .unwrap()
            .into_iter()
            .map(|mut s| {
                s.label = "ENT".into();
                s
            })
            .collect();
        assert_eq!(evaluate_spans(&gold, &spans, corpus.len()).unwrap().f1, 1.0);
    }

    #[test]
    fn two_stage_pipeline_memorizes_end_to_end() {
        let corpus = memorization_corpus();
        let (chunker, _) =
            train_stage1_chunker(&corpus, &corpus, tiny_config(TaskKind::Chunking)).unwrap();
        let mut typer_config = tiny_config(TaskKind::Typing);
        typer_config.objective = Objective::Softmax;
        let (typer, _) =
            train_stage2_typer(&corpus, &corpus, None, BoundarySource::Gold, typer_config).unwrap();

        let preds = tag_entities(Some(&chunker), &typer, &corpus).unwrap();
        let spans: Vec<Span> = preds.iter().map(|p| p.span.clone()).collect();
        let gold = gold_entity_spans(&corpus).unwrap();
        let scores = evaluate_spans(&gold, &spans, corpus.len()).unwrap();
        assert_eq!(scores.f1, 1.0, "two-stage F1 {:?}", scores);

        // Gold-boundary mode skips the chunker and also reproduces gold.
        let preds = tag_entities(None, &typer, &corpus).unwrap();
        let spans: Vec<Span> = preds.iter().map(|p| p.span.clone()).collect();
        assert_eq!(evaluate_spans(&gold, &spans, corpus.len()).unwrap().f1, 1.0);
    }

    #[test]
    fn event_tagger_memorizes_and_is_deterministic() {
        let corpus = vec![
            sent(&[("troops", "O"), ("attacked", "Conflict"), ("yesterday", "O")]),
            sent(&[("she", "O"), ("married", "Life"), ("him", "O")]),
            sent(&[("they", "O"), ("met", "Contact"), ("today", "O")]),
            sent(&[("markets", "O"), ("fell", "O"), ("again", "O")]),
        ];
        let mut config = tiny_config(TaskKind::Event);
        config.objective = Objective::Softmax;
        let (model, log1) =
            train_event_tagger(&corpus, &corpus, None, config.clone()).unwrap();
        assert_eq!(log1.best_dev_f1, 1.0, "event tagger failed to memorize");
        let preds = tag_events(&model, &corpus).unwrap();
        let spans: Vec<Span> = preds.iter().map(|p| p.span.clone()).collect();
        let gold = gold_token_spans(&corpus);
        assert_eq!(evaluate_spans(&gold, &spans, corpus.len()).unwrap().f1, 1.0);

        // Same seed, same trajectory.
        let (_, log2) = train_event_tagger(&corpus, &corpus, None, config).unwrap();
        assert_eq!(log1.history, log2.history);
    }

    #[test]
    fn all_o_corpus_scores_zero_with_warning_not_panic() {
        let corpus = vec![
            sent(&[("nothing", "O"), ("happened", "O")]),
            sent(&[("again", "O")]),
        ];
        let mut config = tiny_config(TaskKind::Event);
        config.objective = Objective::Softmax;
        config.epochs = 2;
        let (model, log) = train_event_tagger(&corpus, &corpus, None, config).unwrap();
        assert_eq!(log.history.last().unwrap().dev_f1, 0.0);
        let preds = tag_events(&model, &corpus).unwrap();
        assert!(preds.is_empty());
    }

    #[test]
    fn dropout_changes_the_trajectory_but_inference_never_does() {
        let corpus = memorization_corpus();
        let mut c1 = tiny_config(TaskKind::Chunking);
        c1.epochs = 3;
        c1.dropout = 0.0;
        let mut c2 = c1.clone();
        c2.dropout = 0.5;
        let (m1, log1) = train_stage1_chunker(&corpus, &corpus, c1).unwrap();
        let (_, log2) = train_stage1_chunker(&corpus, &corpus, c2).unwrap();
        assert_ne!(
            log1.history[0].mean_loss, log2.history[0].mean_loss,
            "dropout made no difference"
        );

        // Inference is dropout-free and repeatable.
        let ex = token_example(&corpus[0], &m1.words, &m1.tags, None, |t| {
            Ok(collapse_bio_tag(t)?.to_string())
        }, true)
        .unwrap();
        assert_eq!(m1.decode(&ex).unwrap(), m1.decode(&ex).unwrap());
    }

    #[test]
    fn knowledge_arch_with_surface_free_lexicon_matches_plain_exactly() {
        let corpus = memorization_corpus();
        // Concepts exist, but no surface maps to them: every candidate
        // set is empty and the knowledge path must be a no-op.
        let lex = ConceptLexicon::new(
            vec![("person".to_string(), vec![0.4, -0.2]), ("city".to_string(), vec![0.1, 0.9])],
            &[],
        )
        .unwrap();
        let mut kb_config = tiny_config(TaskKind::Typing);
        kb_config.arch = Arch::Kb;
        kb_config.epochs = 3;
        let mut plain_config = kb_config.clone();
        plain_config.arch = Arch::Plain;
        let (_, kb_log) =
            train_stage2_typer(&corpus, &corpus, Some(lex), BoundarySource::Gold, kb_config)
                .unwrap();
        let (_, plain_log) =
            train_stage2_typer(&corpus, &corpus, None, BoundarySource::Gold, plain_config)
                .unwrap();
        for (a, b) in kb_log.history.iter().zip(&plain_log.history) {
            assert_eq!(a.mean_loss.to_bits(), b.mean_loss.to_bits());
            assert_eq!(a.dev_f1.to_bits(), b.dev_f1.to_bits());
        }
    }

    #[test]
    fn first_step_reduces_the_loss_on_random_inits() {
        let corpus = vec![sent(&[("anna", "B-PER"), ("visited", "O"), ("paris", "B-LOC")])];
        for seed in 0..20 {
            let mut config = tiny_config(TaskKind::Chunking);
            config.seed = seed;
            config.lr = 1e-3;
            config.dropout = 0.0;
            config.unk_rate = 0.0;
            let vocab = WordVocab::build(&corpus);
            let tags = TagSet::from_names(["O", "B-ENT", "I-ENT"]).unwrap();
            let mut model = TaggerModel::init(config, vocab, tags, None, None).unwrap();
            let ex = token_example(&corpus[0], &model.words, &model.tags, None, |t| {
                Ok(collapse_bio_tag(t)?.to_string())
            }, true)
            .unwrap();
            let word_ids: Vec<u32> = ex.tokens.iter().map(|t| t.word).collect();
            let loss_of = |m: &TaggerModel| -> f64 {
                let pass = m.forward(&ex, &word_ids, None).unwrap();
                m.loss_grads(&pass, &ex.golds).unwrap().0
            };
            let before = loss_of(&model);
            let pass = model.forward(&ex, &word_ids, None).unwrap();
            let (_, d_em, d_trans) = model.loss_grads(&pass, &ex.golds).unwrap();
            let mut grads = TaggerGrads::zeros_like(&model);
            model.backward(&ex, &word_ids, &pass, &d_em, d_trans, &mut grads).unwrap();
            let mut opt = Optimizer::adam(1e-3, 0.9, 0.999, 1e-8);
            opt.step(&mut model, &grads).unwrap();
            let after = loss_of(&model);
            assert!(after < before, "seed {seed}: {before} -> {after}");
        }
    }

    #[test]
    fn model_file_round_trips_bit_exactly() {
        let corpus = memorization_corpus();
        let lex = tiny_lexicon();
        let mut config = tiny_config(TaskKind::Typing);
        config.arch = Arch::Kb;
        config.epochs = 2;
        let (model, _) =
            train_stage2_typer(&corpus, &corpus, Some(lex), BoundarySource::Gold, config).unwrap();

        let mut bytes1 = Vec::new();
        write_model(&model, &mut bytes1).unwrap();
        let mut bytes_again = Vec::new();
        write_model(&model, &mut bytes_again).unwrap();
        assert_eq!(bytes1, bytes_again, "serialization is not deterministic");

        let loaded = read_model(bytes1.as_slice()).unwrap();
        let mut bytes2 = Vec::new();
        write_model(&loaded, &mut bytes2).unwrap();
        assert_eq!(bytes1, bytes2, "round trip changed the file");

        // Predictions survive the round trip.
        let preds_a = tag_entities(None, &model, &corpus).unwrap();
        let preds_b = tag_entities(None, &loaded, &corpus).unwrap();
        assert_eq!(preds_a, preds_b);

        // Corrupt magic is rejected.
        let mut bad = bytes1.clone();
        bad[0] = b'X';
        assert!(read_model(bad.as_slice()).is_err());
    }

    #[test]
    fn attention_dump_reports_candidates_and_sentinel() {
        let corpus = vec![
            sent(&[("clinton", "B-PER"), ("visited", "O"), ("paris", "B-LOC")]),
            sent(&[("nobody", "O"), ("knows", "O")]),
        ];
        let mut config = tiny_config(TaskKind::Typing);
        config.arch = Arch::Kb;
        config.epochs = 2;
        let (model, _) = train_stage2_typer(
            &corpus,
            &corpus,
            Some(tiny_lexicon()),
            BoundarySource::Gold,
            config,
        )
        .unwrap();
        let dumps = dump_attention(&model, &corpus).unwrap();
        assert_eq!(dumps.len(), 2);
        // Sentence 0 chunks: [clinton][visited][paris]; clinton has 3
        // candidate concepts, visited none, paris two.
        let rec = &dumps[0][0];
        assert_eq!(rec.surface, "clinton");
        assert_eq!(rec.concepts.len(), 3);
        assert!(rec.sentinel.is_some());
        assert!(dumps[0][1].concepts.is_empty());
        assert!(dumps[0][1].sentinel.is_none());
        let line = rec.to_line();
        assert!(line.starts_with("0\tclinton\tperson:"), "{line}");
        // A plain model refuses to dump.
        let (plain, _) = train_stage2_typer(
            &corpus,
            &corpus,
            None,
            BoundarySource::Gold,
            {
                let mut c = tiny_config(TaskKind::Typing);
                c.epochs = 1;
                c
            },
        )
        .unwrap();
        assert!(dump_attention(&plain, &corpus).is_err());
    }
}
