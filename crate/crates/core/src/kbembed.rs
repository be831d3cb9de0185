//! Bilinear knowledge-graph embeddings over triple files.
//!
//! A triple `(e1, r, e2)` is scored as `S = v_e1^T M_r v_e2` with one
//! vector per entity and one `d_k x d_k` matrix per relation. Training
//! minimizes a max-margin ranking objective: for each observed triple and
//! each of `k` corrupted-object negatives, `max(0, 1 - S_pos + S_neg)`,
//! optimized with mini-batch AdaGrad.
//!
//! Multi-word entities carry no free vector; they are composed as the mean
//! of their constituent word vectors concatenated with the head (final)
//! word vector, and the word vectors themselves are trained. Entity
//! embeddings export to a plain text format the tagger's concept lexicon
//! reads back.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::linalg::{Matrix, Vector};
use crate::numerics::optim::adagrad_update;
use crate::numerics::params::Params;
use crate::numerics::rng::{seeded, uniform_matrix, uniform_vector};

/// Rows with an explicit confidence below this are dropped at load time.
pub const CONFIDENCE_FLOOR: f64 = 0.9;

/// One knowledge-base triple, ids resolved against a [`KbVocab`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Triple {
    pub e1: u32,
    pub r: u32,
    pub e2: u32,
}

/// A triple as read from disk, before interning.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTriple {
    pub e1: String,
    pub r: String,
    pub e2: String,
}

/// Entity and relation name tables, ids assigned in first-seen order.
#[derive(Debug, Clone, Default)]
pub struct KbVocab {
    entities: Vec<String>,
    entity_index: BTreeMap<String, u32>,
    relations: Vec<String>,
    relation_index: BTreeMap<String, u32>,
}

impl KbVocab {
    /// Build from one or more raw triple sets; ids follow first appearance
    /// across the sets in the order given (subject, then relation, then
    /// object within each row).
    pub fn build(sets: &[&[RawTriple]]) -> KbVocab {
        let mut v = KbVocab::default();
        for set in sets {
            for t in *set {
                v.intern_entity(&t.e1);
                v.intern_relation(&t.r);
                v.intern_entity(&t.e2);
            }
        }
        v
    }

    fn intern_entity(&mut self, name: &str) -> u32 {
        if let Some(&id) = self.entity_index.get(name) {
            return id;
        }
        let id = self.entities.len() as u32;
        self.entities.push(name.to_string());
        self.entity_index.insert(name.to_string(), id);
        id
    }

    fn intern_relation(&mut self, name: &str) -> u32 {
        if let Some(&id) = self.relation_index.get(name) {
            return id;
        }
        let id = self.relations.len() as u32;
        self.relations.push(name.to_string());
        self.relation_index.insert(name.to_string(), id);
        id
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn entity_id(&self, name: &str) -> Result<u32> {
        self.entity_index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Vocab(format!("entity {name:?}")))
    }

    pub fn relation_id(&self, name: &str) -> Result<u32> {
        self.relation_index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Vocab(format!("relation {name:?}")))
    }

    pub fn entity_name(&self, id: u32) -> &str {
        &self.entities[id as usize]
    }

    pub fn relation_name(&self, id: u32) -> &str {
        &self.relations[id as usize]
    }

    pub fn entity_names(&self) -> &[String] {
        &self.entities
    }

    pub fn relation_names(&self) -> &[String] {
        &self.relations
    }

    /// Rebuild a vocabulary from its name tables (the model-file path).
    pub fn from_names(entities: Vec<String>, relations: Vec<String>) -> Result<KbVocab> {
        let mut v = KbVocab::default();
        for name in entities {
            if v.entity_index.contains_key(&name) {
                return Err(Error::Vocab(format!("duplicate entity {name:?}")));
            }
            v.intern_entity(&name);
        }
        for name in relations {
            if v.relation_index.contains_key(&name) {
                return Err(Error::Vocab(format!("duplicate relation {name:?}")));
            }
            v.intern_relation(&name);
        }
        Ok(v)
    }
}

/// An immutable set of resolved triples with the lookup structures
/// training and evaluation need.
#[derive(Debug, Clone, Default)]
pub struct TripleStore {
    triples: Vec<Triple>,
    set: BTreeSet<(u32, u32, u32)>,
    /// (e1, r) -> sorted observed objects.
    objects: BTreeMap<(u32, u32), Vec<u32>>,
    /// r -> sorted set of every entity observed as an object of r.
    rel_objects: BTreeMap<u32, Vec<u32>>,
}

impl TripleStore {
    pub fn new(triples: Vec<Triple>) -> Result<TripleStore> {
        let mut store = TripleStore::default();
        for t in &triples {
            if !store.set.insert((t.e1, t.r, t.e2)) {
                return Err(Error::Input(format!(
                    "duplicate triple ({}, {}, {})",
                    t.e1, t.r, t.e2
                )));
            }
            store.objects.entry((t.e1, t.r)).or_default().push(t.e2);
            store.rel_objects.entry(t.r).or_default().push(t.e2);
        }
        for v in store.objects.values_mut() {
            v.sort_unstable();
        }
        for v in store.rel_objects.values_mut() {
            v.sort_unstable();
            v.dedup();
        }
        store.triples = triples;
        Ok(store)
    }

    pub fn from_raw(vocab: &KbVocab, raw: &[RawTriple]) -> Result<TripleStore> {
        let triples = raw
            .iter()
            .map(|t| {
                Ok(Triple {
                    e1: vocab.entity_id(&t.e1)?,
                    r: vocab.relation_id(&t.r)?,
                    e2: vocab.entity_id(&t.e2)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        TripleStore::new(triples)
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn contains(&self, t: &Triple) -> bool {
        self.set.contains(&(t.e1, t.r, t.e2))
    }

    /// Sorted objects observed with this subject and relation.
    pub fn objects_for(&self, e1: u32, r: u32) -> &[u32] {
        self.objects.get(&(e1, r)).map_or(&[], |v| v.as_slice())
    }

    /// Sorted, de-duplicated entities observed as objects of this relation
    /// anywhere in the store.
    pub fn objects_of_relation(&self, r: u32) -> &[u32] {
        self.rel_objects.get(&r).map_or(&[], |v| v.as_slice())
    }
}

/// A multi-word entity: constituent word ids plus the head word.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhraseEntity {
    pub words: Vec<u32>,
    pub head: u32,
}

/// `[mean of constituent vectors ; head word vector]`, dimension `2 d_w`.
pub fn compose_phrase(phrase: &PhraseEntity, word_vectors: &[Vector]) -> Result<Vector> {
    if phrase.words.is_empty() {
        return Err(Error::Input("phrase entity with no words".into()));
    }
    let d_w = word_vectors[phrase.words[0] as usize].dim();
    let mut mean = Vector::zeros(d_w);
    for &w in &phrase.words {
        mean.add_assign(&word_vectors[w as usize]);
    }
    mean.scale(1.0 / phrase.words.len() as f64);
    Ok(mean.concat(&word_vectors[phrase.head as usize]))
}

/// Sparse gradients from one or more ranking-loss evaluations.
#[derive(Debug, Clone, Default)]
pub struct KbGrads {
    /// Free-entity id -> d_k gradient.
    pub ents: BTreeMap<u32, Vector>,
    /// Word id -> d_w gradient (multi-word entities route here).
    pub words: BTreeMap<u32, Vector>,
    /// Relation id -> d_k x d_k gradient.
    pub rels: BTreeMap<u32, Matrix>,
}

impl KbGrads {
    pub fn is_empty(&self) -> bool {
        self.ents.is_empty() && self.words.is_empty() && self.rels.is_empty()
    }

    /// Dense layout matching [`KbModel`]'s `Params` visitation order.
    pub fn to_flat(&self, model: &KbModel) -> Vec<f64> {
        let mut out = Vec::with_capacity(model.param_count());
        for (id, form) in model.forms.iter().enumerate() {
            if form.is_none() {
                match self.ents.get(&(id as u32)) {
                    Some(g) => out.extend_from_slice(g.as_slice()),
                    None => out.extend(std::iter::repeat(0.0).take(model.dim)),
                }
            }
        }
        let d_w = model.dim / 2;
        for id in 0..model.word_vecs.len() {
            match self.words.get(&(id as u32)) {
                Some(g) => out.extend_from_slice(g.as_slice()),
                None => out.extend(std::iter::repeat(0.0).take(d_w)),
            }
        }
        for id in 0..model.rel_mats.len() {
            match self.rels.get(&(id as u32)) {
                Some(g) => out.extend_from_slice(g.data()),
                None => out.extend(std::iter::repeat(0.0).take(model.dim * model.dim)),
            }
        }
        out
    }
}

/// Entity vectors, word vectors for phrase composition, and relation
/// matrices.
#[derive(Debug, Clone)]
pub struct KbModel {
    vocab: KbVocab,
    dim: usize,
    /// `Some(phrase)` for composed entities, `None` for free ones.
    forms: Vec<Option<PhraseEntity>>,
    /// Free-entity vectors; phrase slots hold an empty placeholder.
    ent_vecs: Vec<Vector>,
    word_names: Vec<String>,
    word_vecs: Vec<Vector>,
    rel_mats: Vec<Matrix>,
}

impl KbModel {
    /// Initialize a model over the vocabulary: free entity vectors uniform
    /// in (-0.1, 0.1); relation matrices identity plus uniform (-0.01,
    /// 0.01) noise; word vectors (for multi-word entities) uniform in
    /// (-0.1, 0.1) with `d_w = d_k / 2`.
    pub fn init(vocab: KbVocab, dim: usize, rng: &mut impl Rng) -> Result<KbModel> {
        if dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        let mut forms = Vec::with_capacity(vocab.num_entities());
        let mut word_names: Vec<String> = Vec::new();
        let mut word_index: BTreeMap<String, u32> = BTreeMap::new();
        let mut any_phrase = false;
        for name in vocab.entity_names() {
            if name.split_whitespace().nth(1).is_some() {
                any_phrase = true;
                let words: Vec<u32> = name
                    .split_whitespace()
                    .map(|w| {
                        *word_index.entry(w.to_string()).or_insert_with(|| {
                            word_names.push(w.to_string());
                            (word_names.len() - 1) as u32
                        })
                    })
                    .collect();
                let head = *words.last().expect("non-empty phrase");
                forms.push(Some(PhraseEntity { words, head }));
            } else {
                forms.push(None);
            }
        }
        if any_phrase && dim % 2 != 0 {
            return Err(Error::Config(format!(
                "multi-word entities need an even embedding dimension, got {dim}"
            )));
        }
        let d_w = dim / 2;
        let mut ent_vecs = Vec::with_capacity(forms.len());
        for form in &forms {
            if form.is_none() {
                ent_vecs.push(uniform_vector(rng, dim, -0.1, 0.1));
            } else {
                ent_vecs.push(Vector::zeros(0));
            }
        }
        let word_vecs: Vec<Vector> = (0..word_names.len())
            .map(|_| uniform_vector(rng, d_w, -0.1, 0.1))
            .collect();
        let mut rel_mats = Vec::with_capacity(vocab.num_relations());
        for _ in 0..vocab.num_relations() {
            let mut m = uniform_matrix(rng, dim, dim, -0.01, 0.01);
            for i in 0..dim {
                m.add_at(i, i, 1.0);
            }
            rel_mats.push(m);
        }
        Ok(KbModel {
            vocab,
            dim,
            forms,
            ent_vecs,
            word_names,
            word_vecs,
            rel_mats,
        })
    }

    pub fn vocab(&self) -> &KbVocab {
        &self.vocab
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Names of the phrase-composition word vectors, indexed like the
    /// word ids inside [`PhraseEntity`].
    pub fn word_names(&self) -> &[String] {
        &self.word_names
    }

    fn check_entity(&self, id: u32) -> Result<()> {
        if (id as usize) < self.forms.len() {
            Ok(())
        } else {
            Err(Error::Vocab(format!("entity id {id}")))
        }
    }

    fn check_relation(&self, id: u32) -> Result<()> {
        if (id as usize) < self.rel_mats.len() {
            Ok(())
        } else {
            Err(Error::Vocab(format!("relation id {id}")))
        }
    }

    /// The d_k vector for any entity: stored for free entities, composed
    /// from word vectors for phrases.
    pub fn entity_vector(&self, id: u32) -> Result<Vector> {
        self.check_entity(id)?;
        match &self.forms[id as usize] {
            None => Ok(self.ent_vecs[id as usize].clone()),
            Some(p) => compose_phrase(p, &self.word_vecs),
        }
    }

    pub fn relation_matrix(&self, id: u32) -> Result<&Matrix> {
        self.check_relation(id)?;
        Ok(&self.rel_mats[id as usize])
    }

    /// `S = v_e1^T M_r v_e2`.
    pub fn score_triple(&self, t: &Triple) -> Result<f64> {
        let v1 = self.entity_vector(t.e1)?;
        let v2 = self.entity_vector(t.e2)?;
        let m = self.relation_matrix(t.r)?;
        Ok(v1.dot(&m.matvec(&v2)))
    }

    /// Route a d_k entity gradient to its storage: the free vector, or the
    /// constituent word vectors (mean split over the first half, head word
    /// additionally receiving the second half).
    fn route_entity_grad(&self, id: u32, grad: &Vector, out: &mut KbGrads) {
        match &self.forms[id as usize] {
            None => {
                out.ents
                    .entry(id)
                    .or_insert_with(|| Vector::zeros(self.dim))
                    .add_assign(grad);
            }
            Some(p) => {
                let d_w = self.dim / 2;
                let n = p.words.len() as f64;
                let (first, second) = grad.split_at(d_w);
                for &w in &p.words {
                    out.words
                        .entry(w)
                        .or_insert_with(|| Vector::zeros(d_w))
                        .add_scaled(&first, 1.0 / n);
                }
                out.words
                    .entry(p.head)
                    .or_insert_with(|| Vector::zeros(d_w))
                    .add_assign(&second);
            }
        }
    }

    /// Max-margin ranking loss `sum_neg max(0, 1 - S_pos + S_neg)` and its
    /// sparse gradients. Gradients flow only through active hinges.
    pub fn ranking_loss_and_grads(
        &self,
        positive: &Triple,
        negatives: &[Triple],
    ) -> Result<(f64, KbGrads)> {
        if negatives.is_empty() {
            return Err(Error::Input("ranking loss needs at least one negative".into()));
        }
        let mut grads = KbGrads::default();
        let v1 = self.entity_vector(positive.e1)?;
        let v2 = self.entity_vector(positive.e2)?;
        let m = self.relation_matrix(positive.r)?;
        let s_pos = v1.dot(&m.matvec(&v2));

        let mut loss = 0.0;
        let mut active = 0usize;
        // Accumulated d(loss)/dM_r and d(loss)/dv_e1 across active hinges.
        let mut d_m = Matrix::zeros(self.dim, self.dim);
        let mut d_v1 = Vector::zeros(self.dim);
        for neg in negatives {
            if neg.e1 != positive.e1 || neg.r != positive.r {
                return Err(Error::Input(
                    "negative triples must share the positive's subject and relation".into(),
                ));
            }
            let v2n = self.entity_vector(neg.e2)?;
            let s_neg = v1.dot(&m.matvec(&v2n));
            let margin = 1.0 - s_pos + s_neg;
            if margin > 0.0 {
                loss += margin;
                active += 1;
                // dS_neg = +1: subject, relation, and negative object move.
                d_v1.add_assign(&m.matvec(&v2n));
                d_m.add_outer(&v1, &v2n, 1.0);
                let d_v2n = m.matvec_t(&v1);
                self.route_entity_grad(neg.e2, &d_v2n, &mut grads);
            }
        }
        if active > 0 {
            // dS_pos = -1 per active hinge.
            let a = active as f64;
            d_v1.add_scaled(&m.matvec(&v2), -a);
            d_m.add_outer(&v1, &v2, -a);
            let mut d_v2 = m.matvec_t(&v1);
            d_v2.scale(-a);
            self.route_entity_grad(positive.e2, &d_v2, &mut grads);
            self.route_entity_grad(positive.e1, &d_v1, &mut grads);
            grads
                .rels
                .entry(positive.r)
                .or_insert_with(|| Matrix::zeros(self.dim, self.dim))
                .add_assign(&d_m);
        }
        Ok((loss, grads))
    }
}

/// `Params` order: free entity vectors by ascending id, then word vectors
/// by ascending id, then relation matrices by ascending id.
impl Params for KbModel {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a [f64])) {
        for (form, v) in self.forms.iter().zip(&self.ent_vecs) {
            if form.is_none() {
                v.visit(f);
            }
        }
        for v in &self.word_vecs {
            v.visit(f);
        }
        for m in &self.rel_mats {
            m.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        for (form, v) in self.forms.iter().zip(self.ent_vecs.iter_mut()) {
            if form.is_none() {
                v.visit_mut(f);
            }
        }
        for v in self.word_vecs.iter_mut() {
            v.visit_mut(f);
        }
        for m in self.rel_mats.iter_mut() {
            m.visit_mut(f);
        }
    }
}

/// Corrupted-object negatives for one positive triple: `k` entities `e2'`
/// with `e2' != e2` and `(e1, r, e2')` unobserved, uniform without
/// replacement when enough candidates exist, with replacement otherwise.
pub fn sample_negatives(
    positive: &Triple,
    k: usize,
    num_entities: u32,
    observed: &TripleStore,
    rng: &mut impl Rng,
) -> Result<Vec<Triple>> {
    if k == 0 {
        return Ok(Vec::new());
    }
    let obs = observed.objects_for(positive.e1, positive.r);
    let blocked = |e: u32| e == positive.e2 || obs.binary_search(&e).is_ok();
    let blocked_count = {
        let mut n = obs.len();
        if obs.binary_search(&positive.e2).is_err() {
            n += 1;
        }
        n as u32
    };
    let valid_count = num_entities.saturating_sub(blocked_count);
    if valid_count == 0 {
        return Err(Error::Sampling(format!(
            "no valid negative object for subject {} relation {}",
            positive.e1, positive.r
        )));
    }
    let make = |e2: u32| Triple { e1: positive.e1, r: positive.r, e2 };
    let mut out = Vec::with_capacity(k);
    if (valid_count as usize) >= k && valid_count as usize >= 2 * k {
        // Plenty of room: rejection-sample distinct objects.
        let dist = Uniform::new(0, num_entities);
        let mut chosen = BTreeSet::new();
        while out.len() < k {
            let e = dist.sample(rng);
            if blocked(e) || !chosen.insert(e) {
                continue;
            }
            out.push(make(e));
        }
    } else {
        let valid: Vec<u32> = (0..num_entities).filter(|&e| !blocked(e)).collect();
        if valid.len() >= k {
            let picks = rand::seq::index::sample(rng, valid.len(), k);
            out.extend(picks.iter().map(|i| make(valid[i])));
        } else {
            let dist = Uniform::new(0, valid.len());
            out.extend((0..k).map(|_| make(valid[dist.sample(rng)])));
        }
    }
    Ok(out)
}

/// Training settings. The learning rate, batch size, and negative count
/// default to 0.05, 100, and 10.
#[derive(Debug, Clone)]
pub struct KbTrainConfig {
    pub dim: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for KbTrainConfig {
    fn default() -> Self {
        KbTrainConfig {
            dim: 100,
            lr: 0.05,
            batch_size: 100,
            negatives: 10,
            epochs: 20,
            seed: 0,
        }
    }
}

/// AdaGrad accumulators parallel to the model's trainable rows.
struct KbAccum {
    ents: Vec<Vector>,
    words: Vec<Vector>,
    rels: Vec<Matrix>,
}

impl KbAccum {
    fn zeros(model: &KbModel) -> KbAccum {
        KbAccum {
            ents: model.ent_vecs.iter().map(|v| Vector::zeros(v.dim())).collect(),
            words: model.word_vecs.iter().map(|v| Vector::zeros(v.dim())).collect(),
            rels: model.rel_mats.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect(),
        }
    }
}

fn apply_sparse_adagrad(model: &mut KbModel, accum: &mut KbAccum, grads: &KbGrads, lr: f64) {
    const EPS: f64 = 1e-8;
    for (&id, g) in &grads.ents {
        adagrad_update(
            model.ent_vecs[id as usize].as_mut_slice(),
            g.as_slice(),
            accum.ents[id as usize].as_mut_slice(),
            lr,
            EPS,
        );
    }
    for (&id, g) in &grads.words {
        adagrad_update(
            model.word_vecs[id as usize].as_mut_slice(),
            g.as_slice(),
            accum.words[id as usize].as_mut_slice(),
            lr,
            EPS,
        );
    }
    for (&id, g) in &grads.rels {
        adagrad_update(
            model.rel_mats[id as usize].data_mut(),
            g.data(),
            accum.rels[id as usize].data_mut(),
            lr,
            EPS,
        );
    }
}

fn merge_grads(total: &mut KbGrads, part: KbGrads) {
    for (id, g) in part.ents {
        match total.ents.get_mut(&id) {
            Some(t) => t.add_assign(&g),
            None => {
                total.ents.insert(id, g);
            }
        }
    }
    for (id, g) in part.words {
        match total.words.get_mut(&id) {
            Some(t) => t.add_assign(&g),
            None => {
                total.words.insert(id, g);
            }
        }
    }
    for (id, g) in part.rels {
        match total.rels.get_mut(&id) {
            Some(t) => t.add_assign(&g),
            None => {
                total.rels.insert(id, g);
            }
        }
    }
}

/// Train a bilinear model. Returns the model and the mean per-triple loss
/// of each epoch. Deterministic for a fixed config.
pub fn train_kb(
    vocab: KbVocab,
    train: &TripleStore,
    config: &KbTrainConfig,
) -> Result<(KbModel, Vec<f64>)> {
    if train.is_empty() {
        return Err(Error::Input("no training triples".into()));
    }
    if config.batch_size == 0 || config.negatives == 0 {
        return Err(Error::Config(
            "batch size and negative count must be positive".into(),
        ));
    }
    let mut rng = seeded(config.seed);
    let mut model = KbModel::init(vocab, config.dim, &mut rng)?;
    let mut accum = KbAccum::zeros(&model);
    let num_entities = model.vocab.num_entities() as u32;

    let mut history = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..config.epochs {
        // Fisher-Yates reshuffle each epoch from the same stream.
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut batch_grads = KbGrads::default();
            for &idx in batch {
                let pos = &train.triples()[idx];
                let negs =
                    sample_negatives(pos, config.negatives, num_entities, train, &mut rng)?;
                let (loss, grads) = model.ranking_loss_and_grads(pos, &negs)?;
                epoch_loss += loss;
                merge_grads(&mut batch_grads, grads);
            }
            apply_sparse_adagrad(&mut model, &mut accum, &batch_grads, config.lr);
        }
        let mean = epoch_loss / train.len() as f64;
        log::info!("kb epoch {}: mean ranking loss {:.6}", epoch + 1, mean);
        history.push(mean);
    }
    Ok((model, history))
}

/// Candidate pools for link-prediction ranking.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    /// Rank the full entity vocabulary.
    Object,
    /// Rank only entities observed as objects of the test relation in the
    /// reference store (the concept-category subset).
    Category,
}

/// Fraction of test triples whose gold object ranks in the top `k` among
/// the mode's candidates, scores descending, ties broken by ascending id.
pub fn eval_link_prediction(
    model: &KbModel,
    test: &[Triple],
    k: usize,
    mode: EvalMode,
    reference: &TripleStore,
) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Input("no test triples".into()));
    }
    // Compose every entity vector once.
    let all_vecs: Vec<Vector> = (0..model.vocab.num_entities() as u32)
        .map(|id| model.entity_vector(id))
        .collect::<Result<Vec<_>>>()?;
    let all_ids: Vec<u32> = (0..model.vocab.num_entities() as u32).collect();

    let mut hits = 0usize;
    for t in test {
        model.check_entity(t.e1)?;
        model.check_entity(t.e2)?;
        let m = model.relation_matrix(t.r)?;
        let candidates: &[u32] = match mode {
            EvalMode::Object => &all_ids,
            EvalMode::Category => reference.objects_of_relation(t.r),
        };
        if candidates.binary_search(&t.e2).is_err() {
            log::warn!(
                "gold object {} absent from candidate pool for relation {}; counted as a miss",
                model.vocab.entity_name(t.e2),
                model.vocab.relation_name(t.r)
            );
            continue;
        }
        // u = v_e1^T M_r, then each candidate scores u . v_c.
        let u = m.matvec_t(&all_vecs[t.e1 as usize]);
        let gold_score = u.dot(&all_vecs[t.e2 as usize]);
        let mut rank = 1usize;
        for &c in candidates {
            if c == t.e2 {
                continue;
            }
            let s = u.dot(&all_vecs[c as usize]);
            if s > gold_score || (s == gold_score && c < t.e2) {
                rank += 1;
                if rank > k {
                    break;
                }
            }
        }
        if rank <= k {
            hits += 1;
        }
    }
    Ok(hits as f64 / test.len() as f64)
}

/// Read a triple TSV: `e1<TAB>relation<TAB>e2[<TAB>confidence]`, `#`
/// comments and blank lines ignored, confidenced rows below
/// [`CONFIDENCE_FLOOR`] dropped.
pub fn read_triples(reader: impl BufRead, file: &str) -> Result<Vec<RawTriple>> {
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split('\t').collect();
        let data_err = |reason: String| Error::Data {
            file: file.to_string(),
            line: lineno + 1,
            reason,
        };
        if fields.len() != 3 && fields.len() != 4 {
            return Err(data_err(format!(
                "expected 3 or 4 tab-separated fields, got {}",
                fields.len()
            )));
        }
        if fields[..3].iter().any(|f| f.is_empty()) {
            return Err(data_err("empty entity or relation field".into()));
        }
        if fields.len() == 4 {
            let conf: f64 = fields[3]
                .parse()
                .map_err(|_| data_err(format!("bad confidence value {:?}", fields[3])))?;
            if conf < CONFIDENCE_FLOOR {
                continue;
            }
        }
        out.push(RawTriple {
            e1: fields[0].to_string(),
            r: fields[1].to_string(),
            e2: fields[2].to_string(),
        });
    }
    Ok(out)
}

pub fn read_triples_file(path: &Path) -> Result<Vec<RawTriple>> {
    let f = std::fs::File::open(path)?;
    read_triples(std::io::BufReader::new(f), &path.display().to_string())
}

/// Write the triple TSV read by [`read_triples`].
pub fn write_triples(triples: &[RawTriple], mut w: impl Write) -> Result<()> {
    for t in triples {
        writeln!(w, "{}\t{}\t{}", t.e1, t.r, t.e2)?;
    }
    Ok(())
}

/// Write embeddings as text: header `<count> <dim>`, then one
/// `<id> <v1> ... <vd>` row per entry, values with 17 significant digits
/// so the round trip is bit-exact.
pub fn write_embedding_text(entries: &[(String, Vec<f64>)], mut w: impl Write) -> Result<()> {
    let dim = entries.first().map_or(0, |(_, v)| v.len());
    writeln!(w, "{} {}", entries.len(), dim)?;
    for (name, values) in entries {
        if values.len() != dim {
            return Err(Error::Dimension(format!(
                "embedding {name:?} has dim {}, expected {dim}",
                values.len()
            )));
        }
        write!(w, "{name}")?;
        for v in values {
            write!(w, " {v:.16e}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Parse the text embedding format. Ids may contain spaces: the final
/// `dim` whitespace-separated tokens of each row are the values and
/// everything before them is the id.
pub fn read_embedding_text(reader: impl BufRead, file: &str) -> Result<Vec<(String, Vec<f64>)>> {
    let mut lines = reader.lines();
    let data_err = |line: usize, reason: String| Error::Data {
        file: file.to_string(),
        line,
        reason,
    };
    let header = lines
        .next()
        .ok_or_else(|| data_err(1, "empty embedding file".into()))??;
    let mut parts = header.split_whitespace();
    let count: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| data_err(1, format!("bad header {header:?}")))?;
    let dim: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| data_err(1, format!("bad header {header:?}")))?;
    if dim == 0 {
        return Err(data_err(1, "zero embedding dimension".into()));
    }
    let mut out = Vec::with_capacity(count);
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() < dim + 1 {
            return Err(data_err(
                i + 2,
                format!("row has {} tokens, need at least {}", tokens.len(), dim + 1),
            ));
        }
        let id_tokens = &tokens[..tokens.len() - dim];
        let values = tokens[tokens.len() - dim..]
            .iter()
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| data_err(i + 2, format!("bad value {s:?}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        out.push((id_tokens.join(" "), values));
    }
    if out.len() != count {
        return Err(data_err(
            out.len() + 1,
            format!("header promises {count} rows, found {}", out.len()),
        ));
    }
    Ok(out)
}

pub fn read_embedding_file(path: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    let f = std::fs::File::open(path)?;
    read_embedding_text(std::io::BufReader::new(f), &path.display().to_string())
}

// ---------------------------------------------------------------------------
// Model serialization
// ---------------------------------------------------------------------------

use crate::container::{self, LIST_SEP};

/// Write the model to the binary container. Everything except the
/// parameter values — the phrase table, word ids, placeholder slots — is
/// re-derived from the entity names on load, so the file holds the name
/// tables, the dimension, and one flat parameter tensor.
pub fn write_kb_model(model: &KbModel, w: impl std::io::Write) -> Result<()> {
    for name in model.vocab.entity_names().iter().chain(model.vocab.relation_names()) {
        if name.contains(LIST_SEP) || name.contains('\t') || name.contains('\n') {
            return Err(Error::Config(format!(
                "name {name:?} contains a separator and cannot be serialized"
            )));
        }
    }
    let kv = vec![
        ("dim".to_string(), model.dim.to_string()),
        (
            "entities".to_string(),
            model.vocab.entity_names().join(&LIST_SEP.to_string()),
        ),
        (
            "relations".to_string(),
            model.vocab.relation_names().join(&LIST_SEP.to_string()),
        ),
    ];
    let flat = model.to_flat();
    let tensors = vec![("params".to_string(), vec![flat.len() as u32], flat)];
    container::write_container(w, "kb", &kv, &tensors)
}

pub fn save_kb_model(model: &KbModel, path: &Path) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_kb_model(model, &mut file)?;
    file.flush()?;
    Ok(())
}

/// Read a model container written by [`write_kb_model`].
pub fn read_kb_model(r: impl std::io::Read) -> Result<KbModel> {
    let (kv, mut tensors) = container::read_container(r, "kb")?;
    let get = |k: &str| -> Result<&String> {
        kv.get(k).ok_or_else(|| Error::Config(format!("model config lacks {k:?}")))
    };
    let dim: usize = get("dim")?
        .parse()
        .map_err(|e| Error::Config(format!("model config dim: {e}")))?;
    let list = |v: &str| -> Vec<String> {
        if v.is_empty() {
            Vec::new()
        } else {
            v.split(LIST_SEP).map(String::from).collect()
        }
    };
    let vocab = KbVocab::from_names(list(get("entities")?), list(get("relations")?))?;

    // Rebuild the derived structure, then overwrite every parameter.
    let mut model = KbModel::init(vocab, dim, &mut seeded(0))?;
    let t = tensors
        .remove("params")
        .ok_or_else(|| Error::Config("model file lacks tensor \"params\"".into()))?;
    if t.dims != [model.param_count()] {
        return Err(Error::Dimension(format!(
            "parameter tensor has dims {:?}, expected [{}]",
            t.dims,
            model.param_count()
        )));
    }
    model.assign_flat(&t.values)?;
    if let Some(name) = tensors.keys().next() {
        return Err(Error::Config(format!("unexpected tensor {name:?} in model file")));
    }
    Ok(model)
}

pub fn load_kb_model(path: &Path) -> Result<KbModel> {
    let f = std::fs::File::open(path)?;
    read_kb_model(std::io::BufReader::new(f))
}

impl KbModel {
    /// All entity embeddings, composed where necessary, paired with names.
    pub fn export_embeddings(&self) -> Result<Vec<(String, Vec<f64>)>> {
        (0..self.vocab.num_entities() as u32)
            .map(|id| {
                Ok((
                    self.vocab.entity_name(id).to_string(),
                    self.entity_vector(id)?.as_slice().to_vec(),
                ))
            })
            .collect()
    }
}
