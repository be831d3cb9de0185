//! Synthetic data generators: a planted-ambiguity disambiguation corpus
//! whose knowledge-blind accuracy ceiling is computable exactly, a
//! block-structured knowledge base with recoverable category structure,
//! and small fixtures for unit tests.
//!
//! The disambiguation corpus plants the signal the knowledge module is
//! supposed to exploit. Mention surfaces carry one sense per concept
//! group; a cue word in the sentence frame reveals the group, and the
//! gold type is the surface's sense within that group. Surfaces split
//! into a training pool and a held-out pool that only appears in
//! dev/test. A tagger without the concept lexicon sees a held-out
//! mention as an unknown word: the cue narrows the answer to one group,
//! but nothing observable selects a category inside it, so its best
//! expected accuracy on an ambiguous held-out mention is 1/(group
//! size). The lexicon resolves the same mention exactly — it lists the
//! surface's senses, and only one lies in the cued group.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kbembed::RawTriple;
use crate::knowattn::ConceptLexicon;
use crate::pipeline::{RawSentence, RawToken, Span};
use crate::numerics::rng::substream;

// ---------------------------------------------------------------------------
// Specs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    /// Total distinct surfaces: mentions, cue words, and fillers.
    pub vocab: usize,
    /// Concept categories; must be even (they split into two groups).
    pub categories: usize,
    /// Mention surfaces with one sense in each group.
    pub ambiguous: usize,
    pub train_sentences: usize,
    pub dev_sentences: usize,
    pub test_sentences: usize,
    /// Probability that a sentence's mention slot draws an ambiguous
    /// surface.
    pub ambiguity_rate: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> SynthSpec {
        SynthSpec {
            vocab: 200,
            categories: 8,
            ambiguous: 40,
            train_sentences: 2000,
            dev_sentences: 500,
            test_sentences: 500,
            ambiguity_rate: 0.5,
            seed: 0,
        }
    }
}

impl SynthSpec {
    fn unambiguous(&self) -> usize {
        // Keep unambiguous coverage of every category even when the
        // ambiguous pool is tiny or empty.
        self.ambiguous.max(2 * self.categories)
    }

    const CUES_PER_GROUP: usize = 3;

    pub fn validate(&self) -> Result<()> {
        if self.categories < 2 || self.categories % 2 != 0 {
            return Err(Error::Input(format!(
                "need an even number of categories >= 2, got {}",
                self.categories
            )));
        }
        if self.train_sentences == 0 || self.dev_sentences == 0 || self.test_sentences == 0 {
            return Err(Error::Input("every split needs at least one sentence".into()));
        }
        if !(0.0..=1.0).contains(&self.ambiguity_rate) || self.ambiguity_rate <= 0.0 {
            return Err(Error::Input(format!(
                "ambiguity rate {} outside (0, 1]",
                self.ambiguity_rate
            )));
        }
        let needed = self.ambiguous + self.unambiguous() + 2 * Self::CUES_PER_GROUP + 8;
        if self.vocab < needed {
            return Err(Error::Input(format!(
                "vocab {} cannot host {} ambiguous surfaces ({} surfaces needed)",
                self.vocab, self.ambiguous, needed
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Answer key
// ---------------------------------------------------------------------------

/// One gold mention of the test split.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyMention {
    pub sentence: usize,
    pub start: usize,
    pub end: usize,
    pub category: String,
    pub surface: String,
    pub ambiguous: bool,
    /// Whether the surface occurs in the training split.
    pub known: bool,
}

/// Gold mentions of the test split plus the knowledge-blind ceiling.
#[derive(Debug, Clone, PartialEq)]
pub struct AnswerKey {
    /// Exact accuracy bound on ambiguous test mentions for any
    /// predictor without lexicon access whose word knowledge comes
    /// from the training split: computed by grouping the mentions by
    /// everything such a predictor can observe and awarding each group
    /// its modal category (see [`kb_blind_ceiling`]).
    pub ceiling: f64,
    pub group_size: usize,
    pub known_ambiguous: usize,
    pub held_ambiguous: usize,
    pub mentions: Vec<KeyMention>,
}

/// The knowledge-blind accuracy ceiling, computed exhaustively. A
/// predictor without the lexicon sees a test sentence with every word
/// that never occurs in training reduced to an unknown token (plus the
/// mention span), so its prediction is some function of that masked
/// view. Grouping the ambiguous test mentions by masked view and
/// awarding each group its most frequent category is therefore an
/// upper bound no such predictor can exceed on this test set — known
/// ambiguous surfaces stay visible and their cue context determines
/// the sense (the group is pure), while held-out surfaces collapse to
/// indistinguishable views whose realized senses disagree.
fn kb_blind_ceiling(test: &[RawSentence], mentions: &[KeyMention], train: &[RawSentence]) -> f64 {
    let train_vocab: BTreeSet<&str> = train
        .iter()
        .flat_map(|s| s.tokens.iter())
        .map(|t| t.surface.as_str())
        .collect();
    let mut classes: BTreeMap<(Vec<&str>, usize, usize), BTreeMap<&str, usize>> = BTreeMap::new();
    let mut total = 0usize;
    for m in mentions.iter().filter(|m| m.ambiguous) {
        let masked: Vec<&str> = test[m.sentence]
            .tokens
            .iter()
            .map(|t| {
                if train_vocab.contains(t.surface.as_str()) {
                    t.surface.as_str()
                } else {
                    "<unseen>"
                }
            })
            .collect();
        *classes
            .entry((masked, m.start, m.end))
            .or_default()
            .entry(m.category.as_str())
            .or_insert(0) += 1;
        total += 1;
    }
    if total == 0 {
        return 1.0;
    }
    let attainable: usize = classes
        .values()
        .map(|counts| counts.values().copied().max().unwrap_or(0))
        .sum();
    attainable as f64 / total as f64
}

impl AnswerKey {
    fn from_mentions(mentions: Vec<KeyMention>, group_size: usize, ceiling: f64) -> AnswerKey {
        let known = mentions.iter().filter(|m| m.ambiguous && m.known).count();
        let held = mentions.iter().filter(|m| m.ambiguous && !m.known).count();
        AnswerKey { ceiling, group_size, known_ambiguous: known, held_ambiguous: held, mentions }
    }

    /// Gold spans of every test mention (for span F1).
    pub fn gold_spans(&self) -> Vec<Span> {
        self.mentions
            .iter()
            .map(|m| Span {
                sentence: m.sentence,
                start: m.start,
                end: m.end,
                label: m.category.clone(),
            })
            .collect()
    }

    /// Fraction of ambiguous test mentions that `predicted` types
    /// correctly (exact span and label match). 1.0 when none exist.
    pub fn ambiguous_accuracy(&self, predicted: &[Span]) -> f64 {
        let set: BTreeSet<&Span> = predicted.iter().collect();
        let amb: Vec<&KeyMention> = self.mentions.iter().filter(|m| m.ambiguous).collect();
        if amb.is_empty() {
            return 1.0;
        }
        let correct = amb
            .iter()
            .filter(|m| {
                set.contains(&Span {
                    sentence: m.sentence,
                    start: m.start,
                    end: m.end,
                    label: m.category.clone(),
                })
            })
            .count();
        correct as f64 / amb.len() as f64
    }
}

/// Write the answer key: `#`-prefixed header pairs, then one mention per
/// line.
pub fn write_answer_key(key: &AnswerKey, mut w: impl std::io::Write) -> Result<()> {
    writeln!(w, "# ceiling\t{}", key.ceiling)?;
    writeln!(w, "# group_size\t{}", key.group_size)?;
    writeln!(w, "# known_ambiguous\t{}", key.known_ambiguous)?;
    writeln!(w, "# held_ambiguous\t{}", key.held_ambiguous)?;
    for m in &key.mentions {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            m.sentence,
            m.start,
            m.end,
            m.category,
            m.surface,
            u8::from(m.ambiguous),
            u8::from(m.known)
        )?;
    }
    Ok(())
}

pub fn read_answer_key(reader: impl std::io::BufRead, file: &str) -> Result<AnswerKey> {
    let mut ceiling = None;
    let mut group_size = None;
    let mut known_ambiguous = None;
    let mut held_ambiguous = None;
    let mut mentions = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.is_empty() {
            continue;
        }
        let data_err = |reason: String| Error::Data {
            file: file.to_string(),
            line: lineno + 1,
            reason,
        };
        if let Some(rest) = trimmed.strip_prefix("# ") {
            let (k, v) = rest
                .split_once('\t')
                .ok_or_else(|| data_err("bad header line".into()))?;
            match k {
                "ceiling" => ceiling = Some(v.parse().map_err(|e| data_err(format!("{e}")))?),
                "group_size" => {
                    group_size = Some(v.parse().map_err(|e| data_err(format!("{e}")))?)
                }
                "known_ambiguous" => {
                    known_ambiguous = Some(v.parse().map_err(|e| data_err(format!("{e}")))?)
                }
                "held_ambiguous" => {
                    held_ambiguous = Some(v.parse().map_err(|e| data_err(format!("{e}")))?)
                }
                other => return Err(data_err(format!("unknown header key {other:?}"))),
            }
            continue;
        }
        let f: Vec<&str> = trimmed.split('\t').collect();
        if f.len() != 7 {
            return Err(data_err(format!("expected 7 fields, got {}", f.len())));
        }
        let flag = |s: &str| -> Result<bool> {
            match s {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(data_err(format!("bad flag {other:?}"))),
            }
        };
        mentions.push(KeyMention {
            sentence: f[0].parse().map_err(|e| data_err(format!("{e}")))?,
            start: f[1].parse().map_err(|e| data_err(format!("{e}")))?,
            end: f[2].parse().map_err(|e| data_err(format!("{e}")))?,
            category: f[3].to_string(),
            surface: f[4].to_string(),
            ambiguous: flag(f[5])?,
            known: flag(f[6])?,
        });
    }
    let missing = |k: &str| Error::Data {
        file: file.to_string(),
        line: 0,
        reason: format!("missing header {k:?}"),
    };
    Ok(AnswerKey {
        ceiling: ceiling.ok_or_else(|| missing("ceiling"))?,
        group_size: group_size.ok_or_else(|| missing("group_size"))?,
        known_ambiguous: known_ambiguous.ok_or_else(|| missing("known_ambiguous"))?,
        held_ambiguous: held_ambiguous.ok_or_else(|| missing("held_ambiguous"))?,
        mentions,
    })
}

// ---------------------------------------------------------------------------
// Disambiguation corpus
// ---------------------------------------------------------------------------

/// Everything one generator run produces.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub train: Vec<RawSentence>,
    pub dev: Vec<RawSentence>,
    pub test: Vec<RawSentence>,
    /// `surface is_a category` facts plus `category within group` links.
    pub triples: Vec<RawTriple>,
    /// Surface to concept (category) names, covering every mention
    /// surface including held-out ones.
    pub lexicon: Vec<(String, Vec<String>)>,
    pub key: AnswerKey,
    /// Mention surfaces that never occur in the training split.
    pub held_out_surfaces: Vec<String>,
}

/// Category names: concrete nouns for the default 8, generic otherwise.
fn category_names(n: usize) -> Vec<String> {
    const NOUNS: [&str; 8] = [
        "person", "place", "group", "work", "event", "substance", "device", "creature",
    ];
    if n == 8 {
        NOUNS.iter().map(|s| s.to_string()).collect()
    } else {
        (0..n).map(|i| format!("cat{i}")).collect()
    }
}

const SYLLABLES: [&str; 20] = [
    "ba", "re", "mi", "to", "ka", "lu", "son", "ver", "dal", "nor", "pel", "tis", "gor", "fen",
    "ria", "mul", "hav", "ost", "que", "zim",
];

fn pseudo_word(rng: &mut ChaCha8Rng, taken: &mut BTreeSet<String>, capitalize: bool) -> String {
    loop {
        let syllables = 2 + rng.gen_range(0..2);
        let mut w: String = (0..syllables)
            .map(|_| SYLLABLES[rng.gen_range(0..SYLLABLES.len())])
            .collect();
        if capitalize {
            let mut chars = w.chars();
            let first = chars.next().expect("nonempty").to_uppercase().to_string();
            w = first + chars.as_str();
        }
        if taken.insert(w.to_lowercase()) {
            return w;
        }
    }
}

/// A mention surface: one or two tokens.
#[derive(Debug, Clone)]
struct MentionSurface {
    tokens: Vec<String>,
    /// Sense per group for ambiguous surfaces; one entry otherwise.
    senses: Vec<usize>,
    ambiguous: bool,
    known: bool,
}

impl MentionSurface {
    fn surface(&self) -> String {
        self.tokens.join(" ")
    }

    fn sense_in_group(&self, group: usize, half: usize) -> Option<usize> {
        self.senses
            .iter()
            .copied()
            .find(|&s| s / half == group)
    }
}

/// One sentence frame: fixed words, one mention slot, optional random
/// filler slots. The cue word inside the fixed words identifies the
/// group.
#[derive(Debug, Clone)]
enum Slot {
    Word(String),
    Mention,
}

/// Frames are fully deterministic apart from the mention: any
/// sentence-level randomness visible to a knowledge-blind predictor
/// would fragment the ceiling's indistinguishability classes and
/// inflate the bound toward 1.
fn build_frames(cues: &[String], fixed_fillers: &[String]) -> Vec<Vec<Slot>> {
    let w = |s: &String| Slot::Word(s.clone());
    vec![
        vec![w(&cues[0]), w(&fixed_fillers[1]), Slot::Mention, w(&fixed_fillers[0])],
        vec![w(&fixed_fillers[1]), Slot::Mention, w(&cues[1])],
        vec![Slot::Mention, w(&fixed_fillers[2]), w(&cues[2]), w(&fixed_fillers[4])],
        vec![w(&fixed_fillers[5]), w(&cues[0]), w(&fixed_fillers[3]), Slot::Mention, w(&fixed_fillers[4])],
        vec![w(&fixed_fillers[5]), w(&cues[1]), Slot::Mention],
    ]
}

struct SplitOutput {
    sentences: Vec<RawSentence>,
    mentions: Vec<KeyMention>,
}

/// Generate the disambiguation corpus, its knowledge files, and the
/// answer key. Deterministic for a fixed spec.
pub fn gen_disambiguation(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let half = spec.categories / 2;
    let cats = category_names(spec.categories);
    let groups = ["group_a".to_string(), "group_b".to_string()];

    // --- Surfaces -----------------------------------------------------
    let mut rng = substream(spec.seed, "surfaces");
    let mut taken: BTreeSet<String> = cats.iter().map(|c| c.to_lowercase()).collect();
    taken.insert("o".to_string());
    let mut cues: Vec<Vec<String>> = Vec::new();
    for _ in 0..2 {
        cues.push(
            (0..SynthSpec::CUES_PER_GROUP)
                .map(|_| pseudo_word(&mut rng, &mut taken, false))
                .collect(),
        );
    }
    let n_unamb = spec.unambiguous();
    let n_fillers = spec.vocab - spec.ambiguous - n_unamb - 2 * SynthSpec::CUES_PER_GROUP;
    let fillers: Vec<String> = (0..n_fillers)
        .map(|_| pseudo_word(&mut rng, &mut taken, false))
        .collect();

    let mention_tokens = |rng: &mut ChaCha8Rng, taken: &mut BTreeSet<String>, i: usize| {
        // Every fifth mention is a two-token phrase.
        if i % 5 == 4 {
            vec![pseudo_word(rng, taken, true), pseudo_word(rng, taken, true)]
        } else {
            vec![pseudo_word(rng, taken, true)]
        }
    };

    let mut sense_rng = substream(spec.seed, "senses");
    let mut mentions: Vec<MentionSurface> = Vec::new();
    for i in 0..spec.ambiguous {
        let tokens = mention_tokens(&mut rng, &mut taken, i);
        let g1 = sense_rng.gen_range(0..half);
        let g2 = half + sense_rng.gen_range(0..half);
        mentions.push(MentionSurface {
            tokens,
            senses: vec![g1, g2],
            ambiguous: true,
            known: i % 2 == 0,
        });
    }
    for i in 0..n_unamb {
        let tokens = mention_tokens(&mut rng, &mut taken, i);
        mentions.push(MentionSurface {
            tokens,
            senses: vec![i % spec.categories],
            ambiguous: false,
            known: i % 4 != 3,
        });
    }

    // --- Knowledge files ----------------------------------------------
    let mut triples = Vec::new();
    let mut lexicon = Vec::new();
    for m in &mentions {
        let concepts: Vec<String> = m.senses.iter().map(|&s| cats[s].clone()).collect();
        for c in &concepts {
            triples.push(RawTriple { e1: m.surface(), r: "is_a".to_string(), e2: c.clone() });
        }
        lexicon.push((m.surface(), concepts));
    }
    for (s, cat) in cats.iter().enumerate() {
        triples.push(RawTriple {
            e1: cat.clone(),
            r: "within".to_string(),
            e2: groups[s / half].clone(),
        });
    }

    // --- Sentence frames ------------------------------------------------
    let mut frame_rng = substream(spec.seed, "frames");
    let frames: Vec<Vec<Vec<Slot>>> = (0..2)
        .map(|g| {
            let fixed: Vec<String> = (0..6)
                .map(|_| fillers[frame_rng.gen_range(0..fillers.len())].clone())
                .collect();
            build_frames(&cues[g], &fixed)
        })
        .collect();

    // --- Sentences ------------------------------------------------------
    let gen_split = |label: &str, count: usize, train_only: bool| -> Result<SplitOutput> {
        let mut rng = substream(spec.seed, label);
        let mut sentences = Vec::with_capacity(count);
        let mut key_mentions = Vec::new();
        for sid in 0..count {
            let group = rng.gen_range(0..2usize);
            let frame = &frames[group][rng.gen_range(0..frames[group].len())];
            let want_ambiguous = spec.ambiguous > 0 && rng.gen::<f64>() < spec.ambiguity_rate;
            let pool: Vec<usize> = mentions
                .iter()
                .enumerate()
                .filter(|(_, m)| {
                    m.ambiguous == want_ambiguous
                        && (!train_only || m.known)
                        && m.sense_in_group(group, half).is_some()
                })
                .map(|(i, _)| i)
                .collect();
            let pool = if pool.is_empty() {
                // No unambiguous surface covers this group (tiny specs):
                // fall back to the other kind.
                mentions
                    .iter()
                    .enumerate()
                    .filter(|(_, m)| {
                        (!train_only || m.known) && m.sense_in_group(group, half).is_some()
                    })
                    .map(|(i, _)| i)
                    .collect()
            } else {
                pool
            };
            if pool.is_empty() {
                return Err(Error::Input(
                    "no mention surface available for a sampled group".into(),
                ));
            }
            let m = &mentions[pool[rng.gen_range(0..pool.len())]];
            let sense = m.sense_in_group(group, half).expect("pool filtered by group");
            let cat = &cats[sense];

            let mut tokens = Vec::new();
            let mut span = (0usize, 0usize);
            for slot in frame {
                match slot {
                    Slot::Word(wd) => tokens.push(RawToken {
                        surface: wd.clone(),
                        tag: "O".to_string(),
                        head: false,
                    }),
                    Slot::Mention => {
                        span.0 = tokens.len();
                        for (k, t) in m.tokens.iter().enumerate() {
                            let tag = if k == 0 {
                                format!("B-{cat}")
                            } else {
                                format!("I-{cat}")
                            };
                            tokens.push(RawToken { surface: t.clone(), tag, head: false });
                        }
                        span.1 = tokens.len() - 1;
                    }
                }
            }
            key_mentions.push(KeyMention {
                sentence: sid,
                start: span.0,
                end: span.1,
                category: cat.clone(),
                surface: m.surface(),
                ambiguous: m.ambiguous,
                known: m.known,
            });
            sentences.push(RawSentence { tokens });
        }
        Ok(SplitOutput { sentences, mentions: key_mentions })
    };

    let train = gen_split("train", spec.train_sentences, true)?;
    let dev = gen_split("dev", spec.dev_sentences, false)?;
    let test = gen_split("test", spec.test_sentences, false)?;

    let ceiling = kb_blind_ceiling(&test.sentences, &test.mentions, &train.sentences);
    let key = AnswerKey::from_mentions(test.mentions, half, ceiling);
    let held_out_surfaces = mentions
        .iter()
        .filter(|m| !m.known)
        .map(MentionSurface::surface)
        .collect();
    Ok(SynthCorpus {
        train: train.sentences,
        dev: dev.sentences,
        test: test.sentences,
        triples,
        lexicon,
        key,
        held_out_surfaces,
    })
}

// ---------------------------------------------------------------------------
// Block-structured KB with recoverable categories
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct KbRecoverySpec {
    pub entities: usize,
    pub categories: usize,
    /// Fraction of `is_a` facts moved to the held-out set.
    pub holdout_rate: f64,
    pub seed: u64,
}

impl Default for KbRecoverySpec {
    fn default() -> KbRecoverySpec {
        KbRecoverySpec { entities: 100, categories: 8, holdout_rate: 0.15, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct KbRecovery {
    pub train: Vec<RawTriple>,
    /// Held-out `is_a` facts; recovery is measured as top-1 category
    /// ranking accuracy on these.
    pub held_out: Vec<RawTriple>,
    pub category_names: Vec<String>,
}

/// Entities in latent categories, each linked to its category by `is_a`
/// and to two other categories by category-determined relations, so the
/// held-out `is_a` facts are recoverable from the block structure alone.
pub fn gen_kb_recovery(spec: &KbRecoverySpec) -> Result<KbRecovery> {
    if spec.categories == 0 || spec.entities < spec.categories {
        return Err(Error::Input(format!(
            "need at least one entity per category, got {} entities for {} categories",
            spec.entities, spec.categories
        )));
    }
    if !(0.0..1.0).contains(&spec.holdout_rate) {
        return Err(Error::Input(format!(
            "holdout rate {} outside [0, 1)",
            spec.holdout_rate
        )));
    }
    let n_c = spec.categories;
    let category_names: Vec<String> = (0..n_c).map(|c| format!("k{c}")).collect();
    let mut is_a = Vec::with_capacity(spec.entities);
    let mut train = Vec::new();
    for i in 0..spec.entities {
        let c = i % n_c;
        let e = format!("e{i}");
        is_a.push(RawTriple {
            e1: e.clone(),
            r: "is_a".to_string(),
            e2: category_names[c].clone(),
        });
        train.push(RawTriple {
            e1: e.clone(),
            r: "rel_a".to_string(),
            e2: category_names[(c + 1) % n_c].clone(),
        });
        train.push(RawTriple {
            e1: e,
            r: "rel_b".to_string(),
            e2: category_names[(c + 3) % n_c].clone(),
        });
    }

    // Hold out ~rate of the is_a facts, never emptying a category.
    let mut rng = substream(spec.seed, "holdout");
    let mut held_out = Vec::new();
    let mut per_cat_left = vec![0usize; n_c];
    for (i, _) in is_a.iter().enumerate() {
        per_cat_left[i % n_c] += 1;
    }
    for (i, t) in is_a.into_iter().enumerate() {
        let c = i % n_c;
        if per_cat_left[c] > 1 && rng.gen::<f64>() < spec.holdout_rate {
            per_cat_left[c] -= 1;
            held_out.push(t);
        } else {
            train.push(t);
        }
    }
    if held_out.is_empty() {
        return Err(Error::Input(
            "holdout rate too low: no is_a facts were held out".into(),
        ));
    }
    Ok(KbRecovery { train, held_out, category_names })
}

// ---------------------------------------------------------------------------
// Fixtures
// ---------------------------------------------------------------------------

/// Ten fixed sentences with single- and two-token PER/LOC mentions; the
/// standard memorization target for pipeline integrity checks.
pub fn memorization_corpus() -> Vec<RawSentence> {
    let sent = |rows: &[(&str, &str)]| RawSentence {
        tokens: rows
            .iter()
            .map(|(s, t)| RawToken { surface: s.to_string(), tag: t.to_string(), head: false })
            .collect(),
    };
    vec![
        sent(&[("anna", "B-PER"), ("visited", "O"), ("paris", "B-LOC")]),
        sent(&[("omar", "B-PER"), ("left", "O"), ("cairo", "B-LOC"), ("early", "O")]),
        sent(&[("the", "O"), ("city", "O"), ("of", "O"), ("lima", "B-LOC")]),
        sent(&[("maria", "B-PER"), ("garcia", "I-PER"), ("sings", "O")]),
        sent(&[("trains", "O"), ("reach", "O"), ("osaka", "B-LOC"), ("daily", "O")]),
        sent(&[("ivan", "B-PER"), ("meets", "O"), ("noor", "B-PER")]),
        sent(&[("snow", "O"), ("covers", "O"), ("oslo", "B-LOC")]),
        sent(&[("kenji", "B-PER"), ("writes", "O"), ("letters", "O")]),
        sent(&[("roads", "O"), ("to", "O"), ("quito", "B-LOC"), ("wind", "O")]),
        sent(&[("lena", "B-PER"), ("paints", "O"), ("murals", "O")]),
    ]
}

/// The classic ambiguous-surface fixture: "clinton" resolves to a
/// person, a city, or a county; "new york" to a city.
pub fn clinton_lexicon() -> ConceptLexicon {
    let concepts = vec![
        ("person".to_string(), vec![1.0, 0.0, 0.0, 0.2]),
        ("city".to_string(), vec![0.0, 1.0, 0.0, -0.3]),
        ("county".to_string(), vec![0.0, 0.0, 1.0, 0.1]),
    ];
    let entries = vec![
        (
            "clinton".to_string(),
            vec!["person".to_string(), "city".to_string(), "county".to_string()],
        ),
        ("new york".to_string(), vec!["city".to_string()]),
    ];
    ConceptLexicon::new(concepts, &entries).expect("fixture lexicon is well formed")
}
