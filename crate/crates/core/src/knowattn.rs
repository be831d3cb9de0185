//! Candidate-concept retrieval, attention with a knowledge sentinel, and
//! fusion into knowledge-aware state vectors.
//!
//! For a position with BiLSTM state `h` (dim 2H) and candidate concept
//! vectors `v_1..v_L` (dim d_k):
//!
//! ```text
//! score_i = v_i^T W_v h                      candidate attention scores
//! b       = sigma(W_b h_prev + U_b x)        sentinel gate (per direction)
//! s       = b * tanh(c)                      knowledge sentinel
//! score_s = s^T W_s h                        sentinel score
//! (alpha, beta) = softmax over the L+1 scores, so sum(alpha) + beta = 1
//! m       = sum_i alpha_i (W_p v_i) + beta s
//! h_hat   = h + m
//! ```
//!
//! The sentinel lets the model put mass on "the knowledge base has nothing
//! useful here". With no candidates at all, `m` is exactly zero and
//! `h_hat` is bitwise equal to `h`. The gate runs per direction — each
//! half of `b` sees its own direction's previous hidden state and cell —
//! and the halves are concatenated to match the 2H state. `W_p` bridges
//! d_k to 2H; with `project` disabled (requires d_k = 2H) it is pinned to
//! the identity and excluded from training, recovering the plain mixture.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::kbembed::read_embedding_file;
use crate::numerics::linalg::{sigmoid, softmax_slice, Matrix, Vector};
use crate::numerics::params::Params;
use crate::numerics::rng::glorot_matrix;

/// Most candidates a position may carry (lexicon order, excess dropped).
pub const MAX_CANDIDATES: usize = 32;

/// Case-folded surface -> concept candidates, plus the frozen concept
/// embedding table.
#[derive(Debug, Clone)]
pub struct ConceptLexicon {
    concept_names: Vec<String>,
    concept_index: BTreeMap<String, usize>,
    embeddings: Vec<Vector>,
    by_surface: BTreeMap<String, Vec<usize>>,
    dim: usize,
}

impl ConceptLexicon {
    /// Build from concept embeddings and `(surface, concept names)` rows.
    /// Every concept a surface lists must have an embedding; per-surface
    /// lists are de-duplicated preserving first occurrence.
    pub fn new(
        concepts: Vec<(String, Vec<f64>)>,
        entries: &[(String, Vec<String>)],
    ) -> Result<ConceptLexicon> {
        if concepts.is_empty() {
            return Err(Error::Config("concept lexicon with no concepts".into()));
        }
        let dim = concepts[0].1.len();
        if dim == 0 {
            return Err(Error::Config("zero-dimensional concept embeddings".into()));
        }
        let mut concept_names = Vec::with_capacity(concepts.len());
        let mut concept_index = BTreeMap::new();
        let mut embeddings = Vec::with_capacity(concepts.len());
        for (name, values) in concepts {
            if values.len() != dim {
                return Err(Error::Dimension(format!(
                    "concept {name:?} has dim {}, expected {dim}",
                    values.len()
                )));
            }
            if concept_index.insert(name.clone(), concept_names.len()).is_some() {
                return Err(Error::Config(format!("duplicate concept {name:?}")));
            }
            concept_names.push(name);
            embeddings.push(Vector::from_vec(values));
        }
        let mut by_surface: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (surface, names) in entries {
            let key = surface.to_lowercase();
            let list = by_surface.entry(key).or_default();
            for n in names {
                let id = *concept_index
                    .get(n)
                    .ok_or_else(|| Error::Vocab(format!("concept {n:?} (for surface {surface:?})")))?;
                if !list.contains(&id) {
                    list.push(id);
                }
            }
        }
        Ok(ConceptLexicon {
            concept_names,
            concept_index,
            embeddings,
            by_surface,
            dim,
        })
    }

    /// Load a lexicon TSV (`surface<TAB>concept[,concept...]`, `#`
    /// comments) against an embedding text file.
    pub fn load(lexicon_path: &Path, embeddings_path: &Path) -> Result<ConceptLexicon> {
        let concepts = read_embedding_file(embeddings_path)?;
        let file = std::fs::File::open(lexicon_path)?;
        let entries = parse_lexicon(
            std::io::BufReader::new(file),
            &lexicon_path.display().to_string(),
        )?;
        ConceptLexicon::new(concepts, &entries)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_concepts(&self) -> usize {
        self.concept_names.len()
    }

    pub fn concept_name(&self, id: usize) -> &str {
        &self.concept_names[id]
    }

    pub fn concept_id(&self, name: &str) -> Result<usize> {
        self.concept_index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Vocab(format!("concept {name:?}")))
    }

    pub fn embedding(&self, id: usize) -> &Vector {
        &self.embeddings[id]
    }

    /// All `(surface, concepts)` pairs, case-folded, in sorted order.
    pub fn entries(&self) -> impl Iterator<Item = (&str, &[usize])> {
        self.by_surface.iter().map(|(s, ids)| (s.as_str(), ids.as_slice()))
    }

    /// Exact case-folded lookup; a miss is an empty candidate set.
    pub fn retrieve(&self, surface: &str) -> CandidateSet {
        let key = surface.to_lowercase();
        match self.by_surface.get(&key) {
            None => CandidateSet::default(),
            Some(ids) => {
                let take = ids.len().min(MAX_CANDIDATES);
                CandidateSet {
                    ids: ids[..take].to_vec(),
                    vectors: ids[..take].iter().map(|&i| self.embeddings[i].clone()).collect(),
                }
            }
        }
    }
}

/// Parse lexicon rows without resolving concept names.
pub fn parse_lexicon(reader: impl BufRead, file: &str) -> Result<Vec<(String, Vec<String>)>> {
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let data_err = |reason: String| Error::Data {
            file: file.to_string(),
            line: lineno + 1,
            reason,
        };
        let (surface, concepts) = trimmed
            .split_once('\t')
            .ok_or_else(|| data_err("expected `surface<TAB>concepts`".into()))?;
        if surface.is_empty() {
            return Err(data_err("empty surface".into()));
        }
        let names: Vec<String> = concepts
            .split(',')
            .map(|c| c.trim().to_string())
            .filter(|c| !c.is_empty())
            .collect();
        if names.is_empty() {
            return Err(data_err(format!("surface {surface:?} lists no concepts")));
        }
        out.push((surface.to_string(), names));
    }
    Ok(out)
}

/// Write the lexicon TSV read by [`parse_lexicon`].
pub fn write_lexicon(entries: &[(String, Vec<String>)], mut w: impl Write) -> Result<()> {
    for (surface, concepts) in entries {
        writeln!(w, "{surface}\t{}", concepts.join(","))?;
    }
    Ok(())
}

/// The candidate concepts of one position: ids and embedding vectors in
/// lexicon order. Possibly empty.
#[derive(Debug, Clone, Default)]
pub struct CandidateSet {
    pub ids: Vec<usize>,
    pub vectors: Vec<Vector>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Attention, sentinel-gate, and projection weights.
///
/// `Params` visitation order: `w_v`, `w_s`, `w_b_fwd`, `u_b_fwd`,
/// `w_b_bwd`, `u_b_bwd`, then `w_p` only when `project` is set.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnParams {
    hidden: usize,
    input: usize,
    concept_dim: usize,
    project: bool,
    /// d_k x 2H candidate scorer.
    pub w_v: Matrix,
    /// 2H x 2H sentinel scorer.
    pub w_s: Matrix,
    /// H x H and H x D sentinel gate, forward direction.
    pub w_b_fwd: Matrix,
    pub u_b_fwd: Matrix,
    /// H x H and H x D sentinel gate, backward direction.
    pub w_b_bwd: Matrix,
    pub u_b_bwd: Matrix,
    /// 2H x d_k concept projection into the state space.
    pub w_p: Matrix,
}

impl AttnParams {
    /// `hidden` is H per direction; states are 2H.
    pub fn zeros(hidden: usize, input: usize, concept_dim: usize, project: bool) -> Result<Self> {
        if !project && concept_dim != 2 * hidden {
            return Err(Error::Config(format!(
                "projection disabled but concept dim {} != state dim {}",
                concept_dim,
                2 * hidden
            )));
        }
        let two_h = 2 * hidden;
        let mut w_p = Matrix::zeros(two_h, concept_dim);
        for i in 0..two_h.min(concept_dim) {
            w_p.set(i, i, 1.0);
        }
        Ok(AttnParams {
            hidden,
            input,
            concept_dim,
            project,
            w_v: Matrix::zeros(concept_dim, two_h),
            w_s: Matrix::zeros(two_h, two_h),
            w_b_fwd: Matrix::zeros(hidden, hidden),
            u_b_fwd: Matrix::zeros(hidden, input),
            w_b_bwd: Matrix::zeros(hidden, hidden),
            u_b_bwd: Matrix::zeros(hidden, input),
            w_p,
        })
    }

    /// Glorot scorers and gates; `w_p` starts as an identity block so the
    /// projection is initially a (truncated) copy.
    pub fn init(
        hidden: usize,
        input: usize,
        concept_dim: usize,
        project: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut p = AttnParams::zeros(hidden, input, concept_dim, project)?;
        let two_h = 2 * hidden;
        p.w_v = glorot_matrix(rng, concept_dim, two_h);
        p.w_s = glorot_matrix(rng, two_h, two_h);
        p.w_b_fwd = glorot_matrix(rng, hidden, hidden);
        p.u_b_fwd = glorot_matrix(rng, hidden, input);
        p.w_b_bwd = glorot_matrix(rng, hidden, hidden);
        p.u_b_bwd = glorot_matrix(rng, hidden, input);
        Ok(p)
    }

    /// Same shapes, every tensor zero — including `w_p`, which `zeros`
    /// seeds with an identity block. Use this for gradient accumulators.
    pub fn zeros_like(&self) -> Self {
        let mut g = AttnParams::zeros(self.hidden, self.input, self.concept_dim, self.project)
            .expect("shape already validated");
        g.w_p = Matrix::zeros(2 * self.hidden, self.concept_dim);
        g
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn input(&self) -> usize {
        self.input
    }

    pub fn concept_dim(&self) -> usize {
        self.concept_dim
    }

    pub fn project(&self) -> bool {
        self.project
    }
}

impl Params for AttnParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a [f64])) {
        self.w_v.visit(f);
        self.w_s.visit(f);
        self.w_b_fwd.visit(f);
        self.u_b_fwd.visit(f);
        self.w_b_bwd.visit(f);
        self.u_b_bwd.visit(f);
        if self.project {
            self.w_p.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.w_v.visit_mut(f);
        self.w_s.visit_mut(f);
        self.w_b_fwd.visit_mut(f);
        self.u_b_fwd.visit_mut(f);
        self.w_b_bwd.visit_mut(f);
        self.u_b_bwd.visit_mut(f);
        if self.project {
            self.w_p.visit_mut(f);
        }
    }
}

/// Sentinel gate output and the sentinel vector, both 2H.
#[derive(Debug, Clone)]
pub struct SentinelStep {
    pub s: Vector,
    pub b: Vector,
}

/// `b = sigma(W_b h_prev + U_b x)` and `s = b * tanh(c)`, computed per
/// direction over the concatenated inputs.
///
/// `h_prev_cat` concatenates each direction's predecessor hidden state
/// (forward: position t-1, backward: position t+1, zeros at boundaries);
/// `c_cat` concatenates the two directions' cell states at t.
pub fn sentinel(
    p: &AttnParams,
    h_prev_cat: &Vector,
    x: &Vector,
    c_cat: &Vector,
) -> Result<SentinelStep> {
    let two_h = 2 * p.hidden;
    if h_prev_cat.dim() != two_h || c_cat.dim() != two_h {
        return Err(Error::Dimension(format!(
            "sentinel: state dims {}/{}, expected {}",
            h_prev_cat.dim(),
            c_cat.dim(),
            two_h
        )));
    }
    if x.dim() != p.input {
        return Err(Error::Dimension(format!(
            "sentinel: input dim {}, expected {}",
            x.dim(),
            p.input
        )));
    }
    let (hp_f, hp_b) = h_prev_cat.split_at(p.hidden);
    let (c_f, c_b) = c_cat.split_at(p.hidden);
    let half = |w_b: &Matrix, u_b: &Matrix, hp: &Vector, c: &Vector| {
        let mut a = w_b.matvec(hp);
        a.add_assign(&u_b.matvec(x));
        let b = a.map(sigmoid);
        let s = b.hadamard(&c.map(f64::tanh));
        (s, b)
    };
    let (s_f, b_f) = half(&p.w_b_fwd, &p.u_b_fwd, &hp_f, &c_f);
    let (s_b, b_b) = half(&p.w_b_bwd, &p.u_b_bwd, &hp_b, &c_b);
    Ok(SentinelStep { s: s_f.concat(&s_b), b: b_f.concat(&b_b) })
}

/// Joint softmax over candidate scores plus the sentinel score. Returns
/// per-candidate weights and the sentinel weight; together they sum to 1.
pub fn attention_weights(candidate_scores: &[f64], sentinel_score: f64) -> Result<(Vec<f64>, f64)> {
    let mut joint = Vec::with_capacity(candidate_scores.len() + 1);
    joint.extend_from_slice(candidate_scores);
    joint.push(sentinel_score);
    let mut w = softmax_slice(&joint)?;
    let beta = w.pop().expect("sentinel weight");
    Ok((w, beta))
}

/// Attention, mixture, and fusion results for one position, with the
/// intermediates the backward pass needs. `detail` is absent when the
/// position had no candidates.
#[derive(Debug, Clone)]
pub struct KnowledgeStep {
    pub h_hat: Vector,
    pub detail: Option<ActiveKnowledge>,
}

#[derive(Debug, Clone)]
pub struct ActiveKnowledge {
    pub alpha: Vec<f64>,
    pub beta: f64,
    pub m: Vector,
    pub sentinel: SentinelStep,
    /// Attention-weighted candidate mean, pre-projection (d_k).
    vbar: Vector,
    /// `W_s h`, cached for the backward pass (2H).
    z: Vector,
}

/// Mixture for one position given its state and sentinel: attention
/// weights over candidates plus sentinel, then
/// `m = sum_i alpha_i (W_p v_i) + beta s`.
pub fn knowledge_state(
    p: &AttnParams,
    h: &Vector,
    sent: &SentinelStep,
    cands: &CandidateSet,
) -> Result<(Vector, Vec<f64>, f64, Vector, Vector)> {
    let two_h = 2 * p.hidden;
    if h.dim() != two_h {
        return Err(Error::Dimension(format!(
            "knowledge state: h dim {}, expected {two_h}",
            h.dim()
        )));
    }
    let w_v_h = p.w_v.matvec(h);
    let mut scores = Vec::with_capacity(cands.len());
    for v in &cands.vectors {
        if v.dim() != p.concept_dim {
            return Err(Error::Dimension(format!(
                "candidate dim {}, expected {}",
                v.dim(),
                p.concept_dim
            )));
        }
        scores.push(v.dot(&w_v_h));
    }
    let z = p.w_s.matvec(h);
    let s_score = sent.s.dot(&z);
    let (alpha, beta) = attention_weights(&scores, s_score)?;
    let mut vbar = Vector::zeros(p.concept_dim);
    for (a, v) in alpha.iter().zip(&cands.vectors) {
        vbar.add_scaled(v, *a);
    }
    let mut m = p.w_p.matvec(&vbar);
    m.add_scaled(&sent.s, beta);
    Ok((m, alpha, beta, vbar, z))
}

/// `h_hat = h + m`.
pub fn fuse(h: &Vector, m: &Vector) -> Result<Vector> {
    h.add(m)
}

/// The full knowledge path for one position. With no candidates the
/// sentinel is never computed and `h_hat` is a bitwise copy of `h`.
pub fn knowledge_forward(
    p: &AttnParams,
    h: &Vector,
    h_prev_cat: &Vector,
    x: &Vector,
    c_cat: &Vector,
    cands: &CandidateSet,
) -> Result<KnowledgeStep> {
    if cands.is_empty() {
        return Ok(KnowledgeStep { h_hat: h.clone(), detail: None });
    }
    let sent = sentinel(p, h_prev_cat, x, c_cat)?;
    let (m, alpha, beta, vbar, z) = knowledge_state(p, h, &sent, cands)?;
    let h_hat = fuse(h, &m)?;
    Ok(KnowledgeStep {
        h_hat,
        detail: Some(ActiveKnowledge { alpha, beta, m, sentinel: sent, vbar, z }),
    })
}

/// Derivatives [`knowledge_backward`] returns, with respect to the inputs
/// of [`knowledge_forward`].
#[derive(Debug, Clone)]
pub struct KnowledgeInputGrads {
    pub d_h: Vector,
    pub d_c_cat: Vector,
    pub d_h_prev_cat: Vector,
    pub d_x: Vector,
}

/// Reverse-mode pass through attention, sentinel, and fusion. `d_h_hat`
/// is the incoming derivative; weight derivatives accumulate into
/// `grads`. Concept vectors are frozen, so no gradient is produced for
/// them.
pub fn knowledge_backward(
    p: &AttnParams,
    h: &Vector,
    h_prev_cat: &Vector,
    x: &Vector,
    c_cat: &Vector,
    cands: &CandidateSet,
    step: &KnowledgeStep,
    d_h_hat: &Vector,
    grads: &mut AttnParams,
) -> KnowledgeInputGrads {
    let two_h = 2 * p.hidden;
    let mut out = KnowledgeInputGrads {
        d_h: d_h_hat.clone(),
        d_c_cat: Vector::zeros(two_h),
        d_h_prev_cat: Vector::zeros(two_h),
        d_x: Vector::zeros(p.input),
    };
    let Some(detail) = &step.detail else {
        return out;
    };
    let dm = d_h_hat;
    let sent = &detail.sentinel;

    // m = W_p vbar + beta s.
    let d_beta = dm.dot(&sent.s);
    let mut d_s = sent.s.map(|_| 0.0);
    d_s.add_scaled(dm, detail.beta);
    let d_vbar = p.w_p.matvec_t(dm);
    grads.w_p.add_outer(dm, &detail.vbar, 1.0);

    // vbar = sum alpha_i v_i.
    let d_alpha: Vec<f64> = cands.vectors.iter().map(|v| d_vbar.dot(v)).collect();

    // Joint softmax backward: du_j = w_j (dw_j - sum_k dw_k w_k).
    let dot: f64 = d_alpha
        .iter()
        .zip(&detail.alpha)
        .map(|(d, w)| d * w)
        .sum::<f64>()
        + d_beta * detail.beta;
    let du: Vec<f64> = d_alpha
        .iter()
        .zip(&detail.alpha)
        .map(|(d, w)| w * (d - dot))
        .collect();
    let du_s = detail.beta * (d_beta - dot);

    // score_i = v_i . (W_v h): fold the du_i into one d_k vector.
    let mut q = Vector::zeros(p.concept_dim);
    for (d, v) in du.iter().zip(&cands.vectors) {
        q.add_scaled(v, *d);
    }
    grads.w_v.add_outer(&q, h, 1.0);
    out.d_h.add_assign(&p.w_v.matvec_t(&q));

    // score_s = s . (W_s h).
    grads.w_s.add_outer(&sent.s, h, du_s);
    let mut w_s_t_s = p.w_s.matvec_t(&sent.s);
    w_s_t_s.scale(du_s);
    out.d_h.add_assign(&w_s_t_s);
    d_s.add_scaled(&detail.z, du_s);

    // Sentinel backward, per direction.
    let hdim = p.hidden;
    let (ds_f, ds_b) = d_s.split_at(hdim);
    let (c_f, c_b) = c_cat.split_at(hdim);
    let (b_f, b_b) = sent.b.split_at(hdim);
    let (hp_f, hp_b) = h_prev_cat.split_at(hdim);
    let halves = [
        (&ds_f, &c_f, &b_f, &hp_f, 0usize),
        (&ds_b, &c_b, &b_b, &hp_b, hdim),
    ];
    for (ds_half, c_half, b_half, hp_half, offset) in halves {
        let mut da = Vector::zeros(hdim);
        for j in 0..hdim {
            let tc = c_half[j].tanh();
            let db = ds_half[j] * tc;
            out.d_c_cat[offset + j] += ds_half[j] * b_half[j] * (1.0 - tc * tc);
            da[j] = db * b_half[j] * (1.0 - b_half[j]);
        }
        let (w_b, u_b) = if offset == 0 {
            (&p.w_b_fwd, &p.u_b_fwd)
        } else {
            (&p.w_b_bwd, &p.u_b_bwd)
        };
        let (gw, gu) = if offset == 0 {
            (&mut grads.w_b_fwd, &mut grads.u_b_fwd)
        } else {
            (&mut grads.w_b_bwd, &mut grads.u_b_bwd)
        };
        gw.add_outer(&da, hp_half, 1.0);
        gu.add_outer(&da, x, 1.0);
        let dhp = w_b.matvec_t(&da);
        for j in 0..hdim {
            out.d_h_prev_cat[offset + j] += dhp[j];
        }
        out.d_x.add_assign(&u_b.matvec_t(&da));
    }
    out
}

/// One line of an attention dump:
/// `position<TAB>surface<TAB>concept:weight;...<TAB>sentinel:weight`.
/// Positions without candidates leave the last two fields empty.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub position: usize,
    pub surface: String,
    pub concepts: Vec<(String, f64)>,
    pub sentinel: Option<f64>,
}

impl AttentionRecord {
    /// Weights must lie on the simplex whenever candidates exist.
    pub fn verify(&self) -> Result<()> {
        match self.sentinel {
            None => {
                if !self.concepts.is_empty() {
                    return Err(Error::Numeric(format!(
                        "position {}: concepts present but sentinel weight missing",
                        self.position
                    )));
                }
                Ok(())
            }
            Some(beta) => {
                let total: f64 = self.concepts.iter().map(|(_, w)| w).sum::<f64>() + beta;
                if (total - 1.0).abs() > 1e-10 || beta < 0.0 {
                    return Err(Error::Numeric(format!(
                        "position {}: attention weights sum to {total}",
                        self.position
                    )));
                }
                Ok(())
            }
        }
    }

    pub fn to_line(&self) -> String {
        let concepts = self
            .concepts
            .iter()
            .map(|(name, w)| format!("{name}:{w:.6}"))
            .collect::<Vec<_>>()
            .join(";");
        let sentinel = match self.sentinel {
            Some(b) => format!("sentinel:{b:.6}"),
            None => String::new(),
        };
        format!("{}\t{}\t{}\t{}", self.position, self.surface, concepts, sentinel)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::grad_check;
    use crate::numerics::rng::{seeded, uniform_vector};

    fn fixture_lexicon() -> ConceptLexicon {
        let concepts = vec![
            ("person".to_string(), vec![1.0, 0.0, 0.0]),
            ("city".to_string(), vec![0.0, 1.0, 0.0]),
            ("county".to_string(), vec![0.0, 0.0, 1.0]),
            ("state".to_string(), vec![0.5, 0.5, 0.0]),
        ];
        let entries = vec![
            ("clinton".to_string(), vec!["person".into(), "city".into(), "county".into()]),
            ("new york".to_string(), vec!["city".into(), "state".into()]),
            ("new".to_string(), vec!["person".into()]),
            ("york".to_string(), vec!["city".into()]),
        ];
        ConceptLexicon::new(concepts, &entries).unwrap()
    }

    fn random_setup(
        seed: u64,
        hidden: usize,
        input: usize,
        d_k: usize,
        n_cands: usize,
    ) -> (AttnParams, Vector, Vector, Vector, Vector, CandidateSet) {
        let mut rng = seeded(seed);
        let p = AttnParams::init(hidden, input, d_k, true, &mut rng).unwrap();
        let two_h = 2 * hidden;
        let h = uniform_vector(&mut rng, two_h, -1.0, 1.0);
        let h_prev = uniform_vector(&mut rng, two_h, -1.0, 1.0);
        let x = uniform_vector(&mut rng, input, -1.0, 1.0);
        let c = uniform_vector(&mut rng, two_h, -1.0, 1.0);
        let cands = CandidateSet {
            ids: (0..n_cands).collect(),
            vectors: (0..n_cands).map(|_| uniform_vector(&mut rng, d_k, -1.0, 1.0)).collect(),
        };
        (p, h, h_prev, x, c, cands)
    }

    #[test]
    fn unknown_surface_retrieves_nothing() {
        let lex = fixture_lexicon();
        assert!(lex.retrieve("zzxq").is_empty());
    }

    #[test]
    fn clinton_fixture_retrieves_three_concepts_in_order() {
        let lex = fixture_lexicon();
        let c = lex.retrieve("clinton");
        let names: Vec<&str> = c.ids.iter().map(|&i| lex.concept_name(i)).collect();
        assert_eq!(names, vec!["person", "city", "county"]);
        // Case-folded lookup.
        let upper = lex.retrieve("Clinton");
        assert_eq!(upper.ids, c.ids);
    }

    #[test]
    fn phrase_lookup_uses_the_full_key_not_word_union() {
        let lex = fixture_lexicon();
        let c = lex.retrieve("New York");
        let names: Vec<&str> = c.ids.iter().map(|&i| lex.concept_name(i)).collect();
        assert_eq!(names, vec!["city", "state"]);
    }

    #[test]
    fn candidate_cap_truncates_in_lexicon_order() {
        let concepts: Vec<(String, Vec<f64>)> =
            (0..40).map(|i| (format!("c{i}"), vec![i as f64])).collect();
        let entries = vec![(
            "widely_listed".to_string(),
            (0..40).map(|i| format!("c{i}")).collect::<Vec<_>>(),
        )];
        let lex = ConceptLexicon::new(concepts, &entries).unwrap();
        let c = lex.retrieve("widely_listed");
        assert_eq!(c.len(), MAX_CANDIDATES);
        assert_eq!(c.ids[0], 0);
        assert_eq!(c.ids[MAX_CANDIDATES - 1], MAX_CANDIDATES - 1);
    }

    #[test]
    fn lexicon_rejects_unknown_concepts_and_dedups() {
        let concepts = vec![("person".to_string(), vec![1.0])];
        let bad = vec![("x".to_string(), vec!["ghost".to_string()])];
        assert!(ConceptLexicon::new(concepts.clone(), &bad).is_err());

        let dup = vec![(
            "x".to_string(),
            vec!["person".to_string(), "person".to_string()],
        )];
        let lex = ConceptLexicon::new(concepts, &dup).unwrap();
        assert_eq!(lex.retrieve("x").len(), 1);
    }

    #[test]
    fn lexicon_file_parses_comments_and_multi_concepts() {
        let text = "# surfaces\nclinton\tperson,city , county\nnew york\tcity\n";
        let rows = parse_lexicon(text.as_bytes(), "lex.tsv").unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].1, vec!["person", "city", "county"]);
        let bad = "noconcepts\t\n";
        assert!(parse_lexicon(bad.as_bytes(), "lex.tsv").is_err());
    }

    #[test]
    fn zero_cell_gives_zero_sentinel() {
        let (p, _, h_prev, x, _, _) = random_setup(40, 3, 2, 4, 2);
        let c = Vector::zeros(6);
        let st = sentinel(&p, &h_prev, &x, &c).unwrap();
        assert_eq!(st.s.as_slice(), &[0.0; 6]);
    }

    #[test]
    fn zero_gate_weights_give_half_gate() {
        let p = AttnParams::zeros(2, 3, 4, true).unwrap();
        let h_prev = Vector::from_vec(vec![0.3, -0.2, 0.9, 0.1]);
        let x = Vector::from_vec(vec![1.0, -1.0, 0.5]);
        let c = Vector::from_vec(vec![0.5, -0.7, 0.2, 1.5]);
        let st = sentinel(&p, &h_prev, &x, &c).unwrap();
        for j in 0..4 {
            assert_eq!(st.b[j], 0.5);
            assert!((st.s[j] - 0.5 * c[j].tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_candidates_pass_state_through_bitwise() {
        let (p, h, h_prev, x, c, _) = random_setup(41, 3, 2, 4, 0);
        let step = knowledge_forward(&p, &h, &h_prev, &x, &c, &CandidateSet::default()).unwrap();
        assert!(step.detail.is_none());
        for j in 0..h.dim() {
            assert_eq!(step.h_hat[j].to_bits(), h[j].to_bits());
        }
    }

    #[test]
    fn tied_single_candidate_splits_mass_evenly() {
        // Zero scorers make both scores 0: a two-way softmax tie.
        let mut p = AttnParams::zeros(2, 2, 4, true).unwrap();
        let mut rng = seeded(42);
        p.w_b_fwd = glorot_matrix(&mut rng, 2, 2);
        p.u_b_fwd = glorot_matrix(&mut rng, 2, 2);
        p.w_b_bwd = glorot_matrix(&mut rng, 2, 2);
        p.u_b_bwd = glorot_matrix(&mut rng, 2, 2);
        let h = uniform_vector(&mut rng, 4, -1.0, 1.0);
        let h_prev = uniform_vector(&mut rng, 4, -1.0, 1.0);
        let x = uniform_vector(&mut rng, 2, -1.0, 1.0);
        let c = uniform_vector(&mut rng, 4, -1.0, 1.0);
        let v = uniform_vector(&mut rng, 4, -1.0, 1.0);
        let cands = CandidateSet { ids: vec![0], vectors: vec![v.clone()] };
        let step = knowledge_forward(&p, &h, &h_prev, &x, &c, &cands).unwrap();
        let detail = step.detail.unwrap();
        assert!((detail.alpha[0] - 0.5).abs() < 1e-12);
        assert!((detail.beta - 0.5).abs() < 1e-12);
        // m = 0.5 (W_p v) + 0.5 s.
        let mut expect = p.w_p.matvec(&v);
        expect.scale(0.5);
        expect.add_scaled(&detail.sentinel.s, 0.5);
        for j in 0..4 {
            assert!((detail.m[j] - expect[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn weights_lie_on_the_simplex_for_random_parameterizations() {
        for seed in 0..1000 {
            let l = (seed % 4) as usize + 1;
            let (p, h, h_prev, x, c, cands) = random_setup(seed, 2, 2, 3, l);
            let step = knowledge_forward(&p, &h, &h_prev, &x, &c, &cands).unwrap();
            let detail = step.detail.unwrap();
            let total: f64 = detail.alpha.iter().sum::<f64>() + detail.beta;
            assert!((total - 1.0).abs() < 1e-12, "seed {seed}: sum {total}");
            assert!(detail.beta > 0.0);
            assert!(detail.alpha.iter().all(|&a| a > 0.0));
        }
    }

    #[test]
    fn attention_weights_are_shift_invariant() {
        let scores = [0.4, -1.2, 2.0];
        let (a1, b1) = attention_weights(&scores, 0.7).unwrap();
        let shifted: Vec<f64> = scores.iter().map(|s| s + 55.5).collect();
        let (a2, b2) = attention_weights(&shifted, 0.7 + 55.5).unwrap();
        for (x, y) in a1.iter().zip(&a2) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((b1 - b2).abs() < 1e-12);
    }

    #[test]
    fn permuting_candidates_permutes_alpha_and_preserves_m() {
        let (p, h, h_prev, x, c, cands) = random_setup(43, 3, 2, 5, 4);
        let step = knowledge_forward(&p, &h, &h_prev, &x, &c, &cands).unwrap();
        let d1 = step.detail.unwrap();
        let perm = [2usize, 0, 3, 1];
        let permuted = CandidateSet {
            ids: perm.iter().map(|&i| cands.ids[i]).collect(),
            vectors: perm.iter().map(|&i| cands.vectors[i].clone()).collect(),
        };
        let step2 = knowledge_forward(&p, &h, &h_prev, &x, &c, &permuted).unwrap();
        let d2 = step2.detail.unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert!((d2.alpha[k] - d1.alpha[i]).abs() < 1e-12);
        }
        assert!((d2.beta - d1.beta).abs() < 1e-12);
        for j in 0..d1.m.dim() {
            assert!((d2.m[j] - d1.m[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn fuse_cases() {
        let h = Vector::from_vec(vec![1.0, 2.0]);
        let m = Vector::from_vec(vec![3.0, 4.0]);
        assert_eq!(fuse(&h, &m).unwrap().as_slice(), &[4.0, 6.0]);
        assert_eq!(fuse(&h, &Vector::zeros(2)).unwrap().as_slice(), h.as_slice());
        assert_eq!(fuse(&Vector::zeros(2), &m).unwrap().as_slice(), m.as_slice());
        assert!(fuse(&h, &Vector::zeros(3)).is_err());
    }

    /// Flatten all inputs of the knowledge path into one parameter vector
    /// and check every gradient the backward pass produces.
    fn full_path_gradcheck(seed: u64, hidden: usize, d_k: usize, n_cands: usize) -> f64 {
        let input = 3;
        let (p, h, h_prev, x, c, cands) = random_setup(seed, hidden, input, d_k, n_cands);
        let mut rng = seeded(seed ^ 0xabcd);
        let probe = uniform_vector(&mut rng, 2 * hidden, -1.0, 1.0);

        let loss = |p: &AttnParams, h: &Vector, hp: &Vector, x: &Vector, c: &Vector| -> Result<f64> {
            let step = knowledge_forward(p, h, hp, x, c, &cands)?;
            Ok(probe.dot(&step.h_hat))
        };

        // Analytic gradients.
        let step = knowledge_forward(&p, &h, &h_prev, &x, &c, &cands).unwrap();
        let mut param_grads = p.zeros_like();
        let input_grads =
            knowledge_backward(&p, &h, &h_prev, &x, &c, &cands, &step, &probe, &mut param_grads);

        // Pack params + h + h_prev + x + c as one theta.
        let mut theta = p.to_flat();
        theta.extend_from_slice(h.as_slice());
        theta.extend_from_slice(h_prev.as_slice());
        theta.extend_from_slice(x.as_slice());
        theta.extend_from_slice(c.as_slice());
        let mut analytic = param_grads.to_flat();
        analytic.extend_from_slice(input_grads.d_h.as_slice());
        analytic.extend_from_slice(input_grads.d_h_prev_cat.as_slice());
        analytic.extend_from_slice(input_grads.d_x.as_slice());
        analytic.extend_from_slice(input_grads.d_c_cat.as_slice());

        let n_p = p.param_count();
        let two_h = 2 * hidden;
        let mut probe_p = p.clone();
        grad_check(
            |flat| {
                probe_p.assign_flat(&flat[..n_p])?;
                let mut pos = n_p;
                let h2 = Vector::from_slice(&flat[pos..pos + two_h]);
                pos += two_h;
                let hp2 = Vector::from_slice(&flat[pos..pos + two_h]);
                pos += two_h;
                let x2 = Vector::from_slice(&flat[pos..pos + input]);
                pos += input;
                let c2 = Vector::from_slice(&flat[pos..pos + two_h]);
                loss(&probe_p, &h2, &hp2, &x2, &c2)
            },
            &theta,
            &analytic,
            1e-4,
        )
        .unwrap()
    }

    #[test]
    fn full_path_gradients_match_finite_differences() {
        for (seed, hidden, d_k, l) in
            [(50, 2, 3, 0), (51, 2, 5, 1), (52, 3, 4, 4), (53, 3, 6, 4), (54, 2, 4, 2)]
        {
            let worst = full_path_gradcheck(seed, hidden, d_k, l);
            assert!(worst < 1e-5, "H={hidden} d_k={d_k} L={l}: worst {worst}");
        }
    }

    #[test]
    fn no_projection_requires_matching_dims_and_freezes_w_p() {
        assert!(AttnParams::zeros(2, 2, 3, false).is_err());
        let p = AttnParams::zeros(2, 2, 4, false).unwrap();
        let with = AttnParams::zeros(2, 2, 4, true).unwrap();
        assert_eq!(with.param_count() - p.param_count(), 4 * 4);
        // Frozen projection is the identity.
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(p.w_p.get(i, j), if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn attention_records_format_and_verify() {
        let rec = AttentionRecord {
            position: 3,
            surface: "clinton".into(),
            concepts: vec![("person".into(), 0.5), ("city".into(), 0.25)],
            sentinel: Some(0.25),
        };
        rec.verify().unwrap();
        assert_eq!(
            rec.to_line(),
            "3\tclinton\tperson:0.500000;city:0.250000\tsentinel:0.250000"
        );

        let empty = AttentionRecord {
            position: 0,
            surface: "the".into(),
            concepts: vec![],
            sentinel: None,
        };
        empty.verify().unwrap();
        assert_eq!(empty.to_line(), "0\tthe\t\t");

        let broken = AttentionRecord {
            position: 1,
            surface: "x".into(),
            concepts: vec![("a".into(), 0.9)],
            sentinel: Some(0.3),
        };
        assert!(broken.verify().is_err());
    }
}
