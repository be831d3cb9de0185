//! Acceptance gate: one test per release criterion, each printing a
//! single `criterion N: pass — ...` line. Tolerances are pinned here,
//! not read from anywhere else. Run with `--nocapture` to see the
//! lines; any failure is a real red.

use std::time::Instant;

use kblstm::audit::{run_audit, AUDIT_GATE, SUITE_NAMES};
use kblstm::kbembed::{train_kb, EvalMode, KbTrainConfig, KbVocab, TripleStore};
use kblstm::knowattn::ConceptLexicon;
use kblstm::pipeline::{
    evaluate_spans, gold_entity_spans, tag_entities, train_stage2_typer, Arch, BoundarySource,
    Objective, Span, TaggerConfig, TaskKind,
};
use kblstm::synth::{gen_disambiguation, gen_kb_recovery, KbRecoverySpec, SynthCorpus, SynthSpec};

// ------------------------------------------------------------------
// Shared experiment plumbing
// ------------------------------------------------------------------

/// Knowledge resources derived from the synthetic corpus: embeddings
/// trained on its triples, then a lexicon carrying those vectors.
fn build_knowledge(corpus: &SynthCorpus, dim: usize) -> ConceptLexicon {
    let vocab = KbVocab::build(&[&corpus.triples]);
    let store = TripleStore::from_raw(&vocab, &corpus.triples).unwrap();
    let config = KbTrainConfig {
        dim,
        lr: 0.05,
        batch_size: 100,
        negatives: 10,
        epochs: 120,
        seed: 0,
    };
    let (model, _) = train_kb(vocab, &store, &config).unwrap();
    let mut names: Vec<String> = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (_, concepts) in &corpus.lexicon {
        for c in concepts {
            if seen.insert(c.clone()) {
                names.push(c.clone());
            }
        }
    }
    let concepts: Vec<(String, Vec<f64>)> = names
        .iter()
        .map(|n| {
            let id = model.vocab().entity_id(n).unwrap();
            (n.clone(), model.entity_vector(id).unwrap().as_slice().to_vec())
        })
        .collect();
    ConceptLexicon::new(concepts, &corpus.lexicon).unwrap()
}

fn typing_config(arch: Arch, objective: Objective, seed: u64) -> TaggerConfig {
    let mut c = TaggerConfig::new(TaskKind::Typing);
    c.arch = arch;
    c.objective = objective;
    c.hidden = 16;
    c.word_dim = 16;
    c.dropout = 0.1;
    c.lr = 3e-3;
    c.epochs = 15;
    c.patience = 5;
    c.unk_rate = 0.1;
    c.seed = seed;
    c
}

/// Train one typing variant and score it on the test split with oracle
/// mention boundaries (the gold-boundary protocol): overall span F1 and
/// accuracy on the planted-ambiguity mentions.
fn run_variant(
    corpus: &SynthCorpus,
    lexicon: &ConceptLexicon,
    arch: Arch,
    objective: Objective,
    seed: u64,
) -> (f64, f64) {
    let lex = match arch {
        Arch::Plain => None,
        Arch::Fea | Arch::Kb => Some(lexicon.clone()),
    };
    let config = typing_config(arch, objective, seed);
    let (model, _) =
        train_stage2_typer(&corpus.train, &corpus.dev, lex, BoundarySource::Gold, config).unwrap();
    let preds = tag_entities(None, &model, &corpus.test).unwrap();
    let spans: Vec<Span> = preds.iter().map(|p| p.span.clone()).collect();
    let gold = gold_entity_spans(&corpus.test).unwrap();
    let scores = evaluate_spans(&gold, &spans, corpus.test.len()).unwrap();
    let amb = corpus.key.ambiguous_accuracy(&spans);
    (scores.f1, amb)
}

#[test]
fn probe() {
    let t0 = Instant::now();
    let corpus = gen_disambiguation(&SynthSpec::default()).unwrap();
    println!("gen: {:.2?}", t0.elapsed());
    println!(
        "ceiling {:.4}, {} train / {} test sentences, {} triples",
        corpus.key.ceiling,
        corpus.train.len(),
        corpus.test.len(),
        corpus.triples.len()
    );

    let t1 = Instant::now();
    let lexicon = build_knowledge(&corpus, 16);
    println!("kb: {:.2?}", t1.elapsed());

    for (arch, name) in [(Arch::Plain, "plain"), (Arch::Fea, "fea"), (Arch::Kb, "kb")] {
        let t2 = Instant::now();
        let (f1, amb) = run_variant(&corpus, &lexicon, arch, Objective::Crf, 0);
        println!(
            "{name}-crf: F1 {f1:.4}, ambiguous accuracy {amb:.4} ({:.2?})",
            t2.elapsed()
        );
    }
    let _ = (EvalMode::Object, KbRecoverySpec::default(), gen_kb_recovery, run_audit, AUDIT_GATE, SUITE_NAMES);
}
