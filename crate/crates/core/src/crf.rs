//! Tag inventories, per-token softmax, and linear-chain CRF inference.
//!
//! A tagging of `x_1..x_T` is scored as the sum of per-position unary
//! scores plus transition scores over consecutive tags, with two virtual
//! tags bracketing the sequence:
//!
//! ```text
//! g(x, y) = sum_t P[t][y_t]  +  sum_{t=0..T} A[y_t][y_{t+1}]
//! ```
//!
//! where `y_0` is the virtual START tag and `y_{T+1}` the virtual STOP tag.
//! The CRF normalizes `exp g` over all tag sequences; the forward-backward
//! recurrences, marginals, and Viterbi decoding below all work in log space.
//! Brute-force reference implementations live in [`oracle`] so every closed
//! form can be checked against exhaustive enumeration on small instances.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::linalg::{logsumexp, softmax_slice, Matrix, Vector};
use crate::numerics::params::Params;

/// Score assigned to transitions that must never be taken. Large enough to
/// lose every comparison, small enough to keep `exp` arithmetic finite.
pub const FORBIDDEN: f64 = -1.0e4;

/// A fixed inventory of output tags.
#[derive(Debug, Clone, PartialEq)]
pub struct TagSet {
    names: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl TagSet {
    pub fn from_names<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(Error::Config("tag set is empty".into()));
        }
        let mut index = BTreeMap::new();
        for (i, n) in names.iter().enumerate() {
            if index.insert(n.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate tag name {n:?}")));
            }
        }
        Ok(TagSet { names, index })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Vocab(format!("tag {name:?}")))
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// The role a tag plays in begin/inside/outside span encoding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BioRole {
    Outside,
    Begin(String),
    Inside(String),
}

/// A [`TagSet`] whose every name parses as `O`, `B-<type>`, or `I-<type>`.
#[derive(Debug, Clone)]
pub struct BioTagSet {
    roles: Vec<BioRole>,
}

impl BioTagSet {
    pub fn from_tagset(tags: &TagSet) -> Result<Self> {
        let mut roles = Vec::with_capacity(tags.len());
        for name in tags.names() {
            let role = if name == "O" {
                BioRole::Outside
            } else if let Some(ty) = name.strip_prefix("B-") {
                BioRole::Begin(ty.to_string())
            } else if let Some(ty) = name.strip_prefix("I-") {
                BioRole::Inside(ty.to_string())
            } else {
                return Err(Error::Config(format!(
                    "tag {name:?} is not O, B-<type>, or I-<type>"
                )));
            };
            roles.push(role);
        }
        Ok(BioTagSet { roles })
    }

    pub fn role(&self, id: usize) -> &BioRole {
        &self.roles[id]
    }

    /// May a sequence begin with this tag?
    pub fn valid_start(&self, tag: usize) -> bool {
        !matches!(self.roles[tag], BioRole::Inside(_))
    }

    /// May `next` directly follow `prev`? Only `I-x` is constrained: it must
    /// continue a `B-x` or `I-x` of the same type.
    pub fn valid_transition(&self, prev: usize, next: usize) -> bool {
        match &self.roles[next] {
            BioRole::Inside(ty) => match &self.roles[prev] {
                BioRole::Begin(p) | BioRole::Inside(p) => p == ty,
                BioRole::Outside => false,
            },
            _ => true,
        }
    }

    /// Extract `(start, end_exclusive, type)` spans from a tag sequence.
    /// An `I-x` with no compatible open span is read as starting a new span,
    /// so ill-formed sequences still yield a deterministic reading.
    pub fn spans(&self, tags: &[usize]) -> Vec<(usize, usize, String)> {
        let mut out = Vec::new();
        let mut open: Option<(usize, String)> = None;
        for (t, &tag) in tags.iter().enumerate() {
            let close_open = |open: &mut Option<(usize, String)>, end: usize, out: &mut Vec<_>| {
                if let Some((start, ty)) = open.take() {
                    out.push((start, end, ty));
                }
            };
            match &self.roles[tag] {
                BioRole::Outside => close_open(&mut open, t, &mut out),
                BioRole::Begin(ty) => {
                    close_open(&mut open, t, &mut out);
                    open = Some((t, ty.clone()));
                }
                BioRole::Inside(ty) => match &open {
                    Some((_, cur)) if cur == ty => {}
                    _ => {
                        close_open(&mut open, t, &mut out);
                        open = Some((t, ty.clone()));
                    }
                },
            }
        }
        if let Some((start, ty)) = open {
            out.push((start, tags.len(), ty));
        }
        out
    }
}

/// Transition scores over `L` real tags plus virtual START and STOP rows.
///
/// Entry `(from, to)` scores taking `to` directly after `from`. Transitions
/// into START, out of STOP, and START directly to STOP are structurally
/// impossible; those cells are pinned at [`FORBIDDEN`] and no recurrence in
/// this module ever reads or differentiates them, so their gradient is
/// identically zero and optimizers leave them untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionTable {
    num_tags: usize,
    table: Matrix,
}

impl TransitionTable {
    pub fn new(num_tags: usize) -> Self {
        let size = num_tags + 2;
        let mut table = Matrix::zeros(size, size);
        let start = num_tags;
        let stop = num_tags + 1;
        for i in 0..size {
            table.set(i, start, FORBIDDEN);
            table.set(stop, i, FORBIDDEN);
        }
        table.set(start, stop, FORBIDDEN);
        TransitionTable { num_tags, table }
    }

    pub fn num_tags(&self) -> usize {
        self.num_tags
    }

    pub fn start_id(&self) -> usize {
        self.num_tags
    }

    pub fn stop_id(&self) -> usize {
        self.num_tags + 1
    }

    #[inline]
    pub fn get(&self, from: usize, to: usize) -> f64 {
        self.table.get(from, to)
    }

    #[inline]
    pub fn set(&mut self, from: usize, to: usize, v: f64) {
        self.table.set(from, to, v);
    }

    #[inline]
    pub fn add_at(&mut self, from: usize, to: usize, v: f64) {
        self.table.add_at(from, to, v);
    }

    /// A same-shape table of zeros (forbidden cells included) for gradients.
    pub fn zeros_like(&self) -> TransitionTable {
        TransitionTable {
            num_tags: self.num_tags,
            table: Matrix::zeros(self.num_tags + 2, self.num_tags + 2),
        }
    }

    /// Copy with every transition that violates begin/inside/outside
    /// structure pinned to [`FORBIDDEN`]. Training never calls this; it is
    /// a decode-time mask.
    pub fn masked_for_bio(&self, bio: &BioTagSet) -> TransitionTable {
        let mut out = self.clone();
        let start = self.start_id();
        for next in 0..self.num_tags {
            if !bio.valid_start(next) {
                out.set(start, next, FORBIDDEN);
            }
            for prev in 0..self.num_tags {
                if !bio.valid_transition(prev, next) {
                    out.set(prev, next, FORBIDDEN);
                }
            }
        }
        out
    }
}

impl Params for TransitionTable {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a [f64])) {
        self.table.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.table.visit_mut(f);
    }
}

fn check_instance(unary: &[Vector], trans: &TransitionTable) -> Result<()> {
    if unary.is_empty() {
        return Err(Error::Input("empty tag sequence".into()));
    }
    for (t, p) in unary.iter().enumerate() {
        if p.dim() != trans.num_tags() {
            return Err(Error::Dimension(format!(
                "position {} has {} scores for {} tags",
                t,
                p.dim(),
                trans.num_tags()
            )));
        }
    }
    Ok(())
}

fn check_tags(unary: &[Vector], trans: &TransitionTable, tags: &[usize]) -> Result<()> {
    if tags.len() != unary.len() {
        return Err(Error::Dimension(format!(
            "{} positions but {} tags",
            unary.len(),
            tags.len()
        )));
    }
    for &y in tags {
        if y >= trans.num_tags() {
            return Err(Error::Input(format!(
                "tag id {} out of range for {} tags",
                y,
                trans.num_tags()
            )));
        }
    }
    Ok(())
}

/// The path score `g(x, y)` of one complete tagging.
pub fn sequence_score(unary: &[Vector], trans: &TransitionTable, tags: &[usize]) -> Result<f64> {
    check_instance(unary, trans)?;
    check_tags(unary, trans, tags)?;
    let mut score = trans.get(trans.start_id(), tags[0]);
    for (t, &y) in tags.iter().enumerate() {
        score += unary[t][y];
        if t + 1 < tags.len() {
            score += trans.get(y, tags[t + 1]);
        }
    }
    score += trans.get(tags[tags.len() - 1], trans.stop_id());
    Ok(score)
}

/// Forward messages: `alpha[t][j]` is the log-sum of scores of all prefixes
/// ending in tag `j` at position `t` (unary at `t` included).
fn forward_messages(unary: &[Vector], trans: &TransitionTable) -> Vec<Vector> {
    let t_len = unary.len();
    let l = trans.num_tags();
    let start = trans.start_id();
    let mut alpha = Vec::with_capacity(t_len);
    let mut first = Vector::zeros(l);
    for j in 0..l {
        first[j] = trans.get(start, j) + unary[0][j];
    }
    alpha.push(first);
    let mut scratch = vec![0.0f64; l];
    for t in 1..t_len {
        let mut next = Vector::zeros(l);
        for j in 0..l {
            for i in 0..l {
                scratch[i] = alpha[t - 1][i] + trans.get(i, j);
            }
            next[j] = logsumexp(&scratch).expect("non-empty") + unary[t][j];
        }
        alpha.push(next);
    }
    alpha
}

/// Backward messages: `beta[t][i]` is the log-sum of scores of all suffixes
/// that start right after position `t` given tag `i` there (the STOP
/// transition included, the unary at `t` excluded).
fn backward_messages(unary: &[Vector], trans: &TransitionTable) -> Vec<Vector> {
    let t_len = unary.len();
    let l = trans.num_tags();
    let stop = trans.stop_id();
    let mut beta = vec![Vector::zeros(l); t_len];
    for i in 0..l {
        beta[t_len - 1][i] = trans.get(i, stop);
    }
    let mut scratch = vec![0.0f64; l];
    for t in (0..t_len - 1).rev() {
        for i in 0..l {
            for j in 0..l {
                scratch[j] = trans.get(i, j) + unary[t + 1][j] + beta[t + 1][j];
            }
            beta[t][i] = logsumexp(&scratch).expect("non-empty");
        }
    }
    beta
}

/// `log Z`: the log-sum of `exp g` over every complete tagging.
pub fn log_partition(unary: &[Vector], trans: &TransitionTable) -> Result<f64> {
    check_instance(unary, trans)?;
    let alpha = forward_messages(unary, trans);
    let last = alpha.last().expect("non-empty");
    let stop = trans.stop_id();
    let final_scores: Vec<f64> = (0..trans.num_tags())
        .map(|j| last[j] + trans.get(j, stop))
        .collect();
    logsumexp(&final_scores)
}

/// Per-position tag marginals `p(y_t = j | x)`; each row sums to one.
pub fn marginals(unary: &[Vector], trans: &TransitionTable) -> Result<Vec<Vector>> {
    check_instance(unary, trans)?;
    let alpha = forward_messages(unary, trans);
    let beta = backward_messages(unary, trans);
    let log_z = {
        let last = alpha.last().expect("non-empty");
        let stop = trans.stop_id();
        let final_scores: Vec<f64> = (0..trans.num_tags())
            .map(|j| last[j] + trans.get(j, stop))
            .collect();
        logsumexp(&final_scores)?
    };
    let mut out = Vec::with_capacity(unary.len());
    for t in 0..unary.len() {
        let mut row = Vector::zeros(trans.num_tags());
        for j in 0..trans.num_tags() {
            row[j] = (alpha[t][j] + beta[t][j] - log_z).exp();
        }
        out.push(row);
    }
    Ok(out)
}

/// Negative log-likelihood of the gold tagging: `log Z - g(x, gold)`.
pub fn crf_nll(unary: &[Vector], trans: &TransitionTable, gold: &[usize]) -> Result<f64> {
    Ok(log_partition(unary, trans)? - sequence_score(unary, trans, gold)?)
}

/// NLL plus its gradients with respect to the unary scores and the
/// transition table: marginal probabilities minus gold indicators. Cells of
/// the table never visited by any tagging keep gradient zero.
pub fn crf_nll_grad(
    unary: &[Vector],
    trans: &TransitionTable,
    gold: &[usize],
) -> Result<(f64, Vec<Vector>, TransitionTable)> {
    check_instance(unary, trans)?;
    check_tags(unary, trans, gold)?;
    let t_len = unary.len();
    let l = trans.num_tags();
    let (start, stop) = (trans.start_id(), trans.stop_id());

    let alpha = forward_messages(unary, trans);
    let beta = backward_messages(unary, trans);
    let log_z = {
        let last = &alpha[t_len - 1];
        let final_scores: Vec<f64> = (0..l).map(|j| last[j] + trans.get(j, stop)).collect();
        logsumexp(&final_scores)?
    };
    let loss = log_z - sequence_score(unary, trans, gold)?;

    let mut d_unary = vec![Vector::zeros(l); t_len];
    for t in 0..t_len {
        for j in 0..l {
            let mu = (alpha[t][j] + beta[t][j] - log_z).exp();
            d_unary[t][j] = mu - if gold[t] == j { 1.0 } else { 0.0 };
        }
    }

    let mut d_trans = trans.zeros_like();
    // Boundary transitions: their pairwise marginals collapse to the
    // per-position marginals at the first and last positions.
    for j in 0..l {
        let mu_first = (alpha[0][j] + beta[0][j] - log_z).exp();
        d_trans.add_at(start, j, mu_first - if gold[0] == j { 1.0 } else { 0.0 });
        let mu_last = (alpha[t_len - 1][j] + beta[t_len - 1][j] - log_z).exp();
        d_trans.add_at(j, stop, mu_last - if gold[t_len - 1] == j { 1.0 } else { 0.0 });
    }
    // Interior transitions.
    for t in 0..t_len - 1 {
        for i in 0..l {
            for j in 0..l {
                let pair =
                    (alpha[t][i] + trans.get(i, j) + unary[t + 1][j] + beta[t + 1][j] - log_z)
                        .exp();
                let ind = if gold[t] == i && gold[t + 1] == j { 1.0 } else { 0.0 };
                d_trans.add_at(i, j, pair - ind);
            }
        }
    }
    Ok((loss, d_unary, d_trans))
}

/// Highest-scoring tagging and its score. Ties resolve toward the smallest
/// tag index, both at the final position and at every backpointer, which
/// selects the optimal sequence that is lexicographically smallest when the
/// tags are compared from the last position backward.
pub fn viterbi(unary: &[Vector], trans: &TransitionTable) -> Result<(f64, Vec<usize>)> {
    check_instance(unary, trans)?;
    let t_len = unary.len();
    let l = trans.num_tags();
    let (start, stop) = (trans.start_id(), trans.stop_id());

    let mut delta = vec![Vector::zeros(l); t_len];
    let mut back = vec![vec![0usize; l]; t_len];
    for j in 0..l {
        delta[0][j] = trans.get(start, j) + unary[0][j];
    }
    for t in 1..t_len {
        for j in 0..l {
            let mut best_i = 0usize;
            let mut best = delta[t - 1][0] + trans.get(0, j);
            for i in 1..l {
                let cand = delta[t - 1][i] + trans.get(i, j);
                if cand > best {
                    best = cand;
                    best_i = i;
                }
            }
            delta[t][j] = best + unary[t][j];
            back[t][j] = best_i;
        }
    }
    let mut best_j = 0usize;
    let mut best = delta[t_len - 1][0] + trans.get(0, stop);
    for j in 1..l {
        let cand = delta[t_len - 1][j] + trans.get(j, stop);
        if cand > best {
            best = cand;
            best_j = j;
        }
    }
    let mut tags = vec![0usize; t_len];
    tags[t_len - 1] = best_j;
    for t in (1..t_len).rev() {
        tags[t - 1] = back[t][tags[t]];
    }
    Ok((best, tags))
}

/// Viterbi over a transition table masked so the decoded sequence always
/// has valid begin/inside/outside structure.
pub fn viterbi_bio(
    unary: &[Vector],
    trans: &TransitionTable,
    bio: &BioTagSet,
) -> Result<(f64, Vec<usize>)> {
    let masked = trans.masked_for_bio(bio);
    viterbi(unary, &masked)
}

/// Summed per-token cross-entropy: `-sum_t log softmax(scores[t])[gold[t]]`,
/// with the gradient `softmax(scores[t]) - onehot(gold[t])` at each position.
pub fn softmax_nll(scores: &[Vector], gold: &[usize]) -> Result<(f64, Vec<Vector>)> {
    if scores.is_empty() {
        return Err(Error::Input("empty tag sequence".into()));
    }
    if gold.len() != scores.len() {
        return Err(Error::Dimension(format!(
            "{} positions but {} tags",
            scores.len(),
            gold.len()
        )));
    }
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(scores.len());
    for (t, row) in scores.iter().enumerate() {
        if gold[t] >= row.dim() {
            return Err(Error::Input(format!(
                "tag id {} out of range for {} tags",
                gold[t],
                row.dim()
            )));
        }
        let p = softmax_slice(row.as_slice())?;
        loss -= p[gold[t]].ln();
        let mut g = Vector::from_vec(p);
        g[gold[t]] -= 1.0;
        grads.push(g);
    }
    Ok((loss, grads))
}

/// Per-position argmax with ties resolved toward the smallest tag index.
pub fn softmax_decode(scores: &[Vector]) -> Vec<usize> {
    scores
        .iter()
        .map(|row| {
            let mut best = 0usize;
            for j in 1..row.dim() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Exhaustive reference implementations over all `L^T` taggings. Quadratic
/// blowup confines them to tiny instances; they exist to certify the
/// dynamic programs above, not to be fast.
pub mod oracle {
    use super::*;

    fn for_each_sequence(t_len: usize, l: usize, mut f: impl FnMut(&[usize])) {
        let mut tags = vec![0usize; t_len];
        loop {
            f(&tags);
            let mut pos = t_len;
            loop {
                if pos == 0 {
                    return;
                }
                pos -= 1;
                tags[pos] += 1;
                if tags[pos] < l {
                    break;
                }
                tags[pos] = 0;
            }
        }
    }

    /// `log Z` by summing `exp g` over every tagging.
    pub fn enumerate_log_partition(unary: &[Vector], trans: &TransitionTable) -> Result<f64> {
        super::check_instance(unary, trans)?;
        let mut scores = Vec::new();
        for_each_sequence(unary.len(), trans.num_tags(), |tags| {
            scores.push(sequence_score(unary, trans, tags).expect("valid tags"));
        });
        logsumexp(&scores)
    }

    /// Best score and the tagging the tie rule in [`super::viterbi`]
    /// selects: among all optimal sequences, the one whose reversed tag
    /// list is lexicographically smallest.
    pub fn enumerate_best(unary: &[Vector], trans: &TransitionTable) -> Result<(f64, Vec<usize>)> {
        super::check_instance(unary, trans)?;
        let mut best_score = f64::NEG_INFINITY;
        let mut best_tags: Option<Vec<usize>> = None;
        for_each_sequence(unary.len(), trans.num_tags(), |tags| {
            let s = sequence_score(unary, trans, tags).expect("valid tags");
            let better = match &best_tags {
                None => true,
                Some(cur) => {
                    s > best_score
                        || (s == best_score
                            && tags.iter().rev().lt(cur.iter().rev()))
                }
            };
            if better {
                best_score = s;
                best_tags = Some(tags.to_vec());
            }
        });
        Ok((best_score, best_tags.expect("at least one sequence")))
    }

    /// Per-position marginals by direct summation.
    pub fn enumerate_marginals(unary: &[Vector], trans: &TransitionTable) -> Result<Vec<Vector>> {
        super::check_instance(unary, trans)?;
        let log_z = enumerate_log_partition(unary, trans)?;
        let l = trans.num_tags();
        let mut out = vec![Vector::zeros(l); unary.len()];
        for_each_sequence(unary.len(), l, |tags| {
            let w = (sequence_score(unary, trans, tags).expect("valid tags") - log_z).exp();
            for (t, &y) in tags.iter().enumerate() {
                out[t][y] += w;
            }
        });
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::grad_check;
    use crate::numerics::rng::{seeded, uniform_vector};
    use proptest::prelude::*;
    use rand::Rng;

    fn toy_tags() -> TagSet {
        TagSet::from_names(["O", "B-PER", "I-PER", "B-LOC", "I-LOC"]).unwrap()
    }

    fn random_instance(
        rng: &mut impl Rng,
        t_len: usize,
        l: usize,
    ) -> (Vec<Vector>, TransitionTable) {
        let unary: Vec<Vector> = (0..t_len).map(|_| uniform_vector(rng, l, -2.0, 2.0)).collect();
        let mut trans = TransitionTable::new(l);
        let start = trans.start_id();
        let stop = trans.stop_id();
        for j in 0..l {
            trans.set(start, j, rng.gen_range(-1.0..1.0));
            trans.set(j, stop, rng.gen_range(-1.0..1.0));
            for i in 0..l {
                trans.set(i, j, rng.gen_range(-1.0..1.0));
            }
        }
        (unary, trans)
    }

    #[test]
    fn tagset_rejects_duplicates_and_empty() {
        assert!(TagSet::from_names(["O", "O"]).is_err());
        assert!(TagSet::from_names(Vec::<String>::new()).is_err());
    }

    #[test]
    fn sequence_score_by_hand() {
        // Two positions, two tags, all transitions set to distinct values.
        let unary = vec![
            Vector::from_vec(vec![1.0, 2.0]),
            Vector::from_vec(vec![0.5, -0.5]),
        ];
        let mut trans = TransitionTable::new(2);
        let (start, stop) = (trans.start_id(), trans.stop_id());
        trans.set(start, 0, 0.1);
        trans.set(start, 1, 0.2);
        trans.set(0, 1, 0.3);
        trans.set(1, 0, 0.4);
        trans.set(0, stop, 0.5);
        trans.set(1, stop, 0.6);
        // y = (1, 0): start->1 (0.2) + P0[1] (2.0) + 1->0 (0.4) + P1[0] (0.5)
        //           + 0->stop (0.5) = 3.6
        let s = sequence_score(&unary, &trans, &[1, 0]).unwrap();
        assert!((s - 3.6).abs() < 1e-12);
    }

    #[test]
    fn single_position_crf_reduces_to_softmax() {
        // With zero boundary transitions the CRF over one position is a
        // plain softmax over the unary scores.
        let unary = vec![Vector::from_vec(vec![0.7, -1.1, 0.2])];
        let trans = TransitionTable::new(3);
        let (loss_crf, _, _) = crf_nll_grad(&unary, &trans, &[2]).unwrap();
        let (loss_soft, _) = softmax_nll(&unary, &[2]).unwrap();
        assert!((loss_crf - loss_soft).abs() < 1e-12);
        let mu = marginals(&unary, &trans).unwrap();
        let p = softmax_slice(unary[0].as_slice()).unwrap();
        for j in 0..3 {
            assert!((mu[0][j] - p[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_scores_give_log_l_per_token() {
        let l = 4;
        let unary = vec![Vector::zeros(l); 3];
        let (loss, grads) = softmax_nll(&unary, &[0, 1, 2]).unwrap();
        assert!((loss - 3.0 * (l as f64).ln()).abs() < 1e-12);
        // Gradient at the gold tag is 1/L - 1, elsewhere 1/L.
        for (t, g) in grads.iter().enumerate() {
            for j in 0..l {
                let expect = 1.0 / l as f64 - if j == t { 1.0 } else { 0.0 };
                assert!((g[j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn partition_matches_enumeration() {
        let mut rng = seeded(11);
        for _ in 0..25 {
            let t_len = rng.gen_range(1..=5);
            let l = rng.gen_range(1..=4);
            let (unary, trans) = random_instance(&mut rng, t_len, l);
            let fast = log_partition(&unary, &trans).unwrap();
            let slow = oracle::enumerate_log_partition(&unary, &trans).unwrap();
            assert!((fast - slow).abs() < 1e-10, "T={t_len} L={l}: {fast} vs {slow}");
        }
    }

    #[test]
    fn marginals_match_enumeration_and_sum_to_one() {
        let mut rng = seeded(12);
        for _ in 0..25 {
            let t_len = rng.gen_range(1..=5);
            let l = rng.gen_range(2..=4);
            let (unary, trans) = random_instance(&mut rng, t_len, l);
            let fast = marginals(&unary, &trans).unwrap();
            let slow = oracle::enumerate_marginals(&unary, &trans).unwrap();
            for t in 0..t_len {
                let sum: f64 = (0..l).map(|j| fast[t][j]).sum();
                assert!((sum - 1.0).abs() < 1e-10);
                for j in 0..l {
                    assert!((fast[t][j] - slow[t][j]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn viterbi_matches_enumeration() {
        let mut rng = seeded(13);
        for _ in 0..25 {
            let t_len = rng.gen_range(1..=5);
            let l = rng.gen_range(1..=4);
            let (unary, trans) = random_instance(&mut rng, t_len, l);
            let (fast_score, fast_tags) = viterbi(&unary, &trans).unwrap();
            let (slow_score, slow_tags) = oracle::enumerate_best(&unary, &trans).unwrap();
            assert!((fast_score - slow_score).abs() < 1e-10);
            assert_eq!(fast_tags, slow_tags);
        }
    }

    #[test]
    fn viterbi_tie_breaks_toward_smallest_tag() {
        // Everything scores zero, so every sequence ties; the decode must
        // pick tag 0 everywhere.
        let unary = vec![Vector::zeros(3); 4];
        let trans = TransitionTable::new(3);
        let (score, tags) = viterbi(&unary, &trans).unwrap();
        assert_eq!(score, 0.0);
        assert_eq!(tags, vec![0, 0, 0, 0]);
        let (_, slow_tags) = oracle::enumerate_best(&unary, &trans).unwrap();
        assert_eq!(slow_tags, tags);
    }

    #[test]
    fn viterbi_ties_agree_with_oracle_on_integer_scores() {
        // Integer-valued scores produce exact ties; the dynamic program and
        // the enumeration must still pick the same sequence.
        let mut rng = seeded(14);
        for _ in 0..50 {
            let t_len = rng.gen_range(1..=4);
            let l = rng.gen_range(2..=3);
            let unary: Vec<Vector> = (0..t_len)
                .map(|_| {
                    Vector::from_vec((0..l).map(|_| rng.gen_range(0..2) as f64).collect())
                })
                .collect();
            let mut trans = TransitionTable::new(l);
            for i in 0..l {
                trans.set(trans.start_id(), i, rng.gen_range(0..2) as f64);
                trans.set(i, trans.stop_id(), rng.gen_range(0..2) as f64);
                for j in 0..l {
                    trans.set(i, j, rng.gen_range(0..2) as f64);
                }
            }
            let (fast_score, fast_tags) = viterbi(&unary, &trans).unwrap();
            let (slow_score, slow_tags) = oracle::enumerate_best(&unary, &trans).unwrap();
            assert_eq!(fast_score, slow_score);
            assert_eq!(fast_tags, slow_tags, "tie rule drifted from oracle");
        }
    }

    #[test]
    fn crf_gradients_pass_finite_differences() {
        let mut rng = seeded(15);
        let (unary, trans) = random_instance(&mut rng, 4, 3);
        let gold = vec![0usize, 2, 1, 1];

        // Check unary gradients.
        let theta: Vec<f64> = unary.iter().flat_map(|v| v.as_slice().to_vec()).collect();
        let (_, d_unary, d_trans) = crf_nll_grad(&unary, &trans, &gold).unwrap();
        let analytic: Vec<f64> = d_unary.iter().flat_map(|v| v.as_slice().to_vec()).collect();
        let l = trans.num_tags();
        let worst = grad_check(
            |flat| {
                let u: Vec<Vector> = flat.chunks(l).map(Vector::from_slice).collect();
                crf_nll(&u, &trans, &gold)
            },
            &theta,
            &analytic,
            1e-5,
        )
        .unwrap();
        assert!(worst < 1e-6, "unary worst rel err {worst}");

        // Check transition gradients over the full table; forbidden cells
        // have zero analytic gradient and zero numeric response.
        let theta_t = trans.to_flat();
        let analytic_t = d_trans.to_flat();
        let worst_t = grad_check(
            |flat| {
                let mut tr = trans.clone();
                tr.assign_flat(flat)?;
                crf_nll(&unary, &tr, &gold)
            },
            &theta_t,
            &analytic_t,
            1e-5,
        )
        .unwrap();
        assert!(worst_t < 1e-6, "transition worst rel err {worst_t}");
    }

    #[test]
    fn bio_mask_forbids_inside_without_begin() {
        let tags = toy_tags();
        let bio = BioTagSet::from_tagset(&tags).unwrap();
        let trans = TransitionTable::new(tags.len());
        let masked = trans.masked_for_bio(&bio);
        let (o, b_per, i_per, b_loc, i_loc) = (0, 1, 2, 3, 4);
        assert_eq!(masked.get(masked.start_id(), i_per), FORBIDDEN);
        assert_eq!(masked.get(o, i_per), FORBIDDEN);
        assert_eq!(masked.get(b_loc, i_per), FORBIDDEN);
        assert_eq!(masked.get(i_loc, i_per), FORBIDDEN);
        assert_eq!(masked.get(b_per, i_per), 0.0);
        assert_eq!(masked.get(i_per, i_per), 0.0);
        assert_eq!(masked.get(b_per, i_loc), FORBIDDEN);
        // Unconstrained cells untouched.
        assert_eq!(masked.get(o, b_per), 0.0);
        assert_eq!(masked.get(i_per, o), 0.0);
    }

    #[test]
    fn constrained_decode_never_emits_invalid_structure() {
        let tags = toy_tags();
        let bio = BioTagSet::from_tagset(&tags).unwrap();
        let trans = TransitionTable::new(tags.len());
        // Unary scores scream I-PER at every position.
        let mut row = Vector::zeros(tags.len());
        row[2] = 10.0;
        let unary = vec![row; 3];
        let (_, decoded) = viterbi_bio(&unary, &trans, &bio).unwrap();
        assert!(bio.valid_start(decoded[0]));
        for w in decoded.windows(2) {
            assert!(bio.valid_transition(w[0], w[1]));
        }
        // The best legal reading opens with B-PER then continues I-PER.
        assert_eq!(decoded, vec![1, 2, 2]);
    }

    #[test]
    fn spans_read_well_formed_and_ill_formed_sequences() {
        let tags = toy_tags();
        let bio = BioTagSet::from_tagset(&tags).unwrap();
        let (o, b_per, i_per, b_loc, i_loc) = (0, 1, 2, 3, 4);
        assert_eq!(
            bio.spans(&[o, b_per, i_per, o, b_loc]),
            vec![(1, 3, "PER".to_string()), (4, 5, "LOC".to_string())]
        );
        // Orphan I-LOC opens its own span; type switch closes the previous.
        assert_eq!(
            bio.spans(&[i_loc, i_per, i_per]),
            vec![(0, 1, "LOC".to_string()), (1, 3, "PER".to_string())]
        );
        assert_eq!(
            bio.spans(&[b_per, b_per]),
            vec![(0, 1, "PER".to_string()), (1, 2, "PER".to_string())]
        );
    }

    #[test]
    fn non_bio_tagset_is_rejected() {
        let tags = TagSet::from_names(["O", "PERSON"]).unwrap();
        assert!(BioTagSet::from_tagset(&tags).is_err());
    }

    #[test]
    fn empty_and_mismatched_inputs_error() {
        let trans = TransitionTable::new(2);
        assert!(log_partition(&[], &trans).is_err());
        let unary = vec![Vector::zeros(2)];
        assert!(sequence_score(&unary, &trans, &[0, 1]).is_err());
        assert!(sequence_score(&unary, &trans, &[5]).is_err());
        let bad = vec![Vector::zeros(3)];
        assert!(log_partition(&bad, &trans).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn partition_dominates_best_path(seed in 0u64..10_000) {
            let mut rng = seeded(seed);
            let t_len = rng.gen_range(1..=5);
            let l = rng.gen_range(1..=4);
            let (unary, trans) = random_instance(&mut rng, t_len, l);
            let z = log_partition(&unary, &trans).unwrap();
            let (best, _) = viterbi(&unary, &trans).unwrap();
            prop_assert!(z >= best - 1e-12);
            // And is at most best + T log L (union bound over sequences).
            let bound = best + (t_len as f64) * (l as f64).ln() + 1e-9;
            prop_assert!(z <= bound);
        }

        #[test]
        fn marginal_rows_are_distributions(seed in 0u64..10_000) {
            let mut rng = seeded(seed);
            let t_len = rng.gen_range(1..=5);
            let l = rng.gen_range(1..=4);
            let (unary, trans) = random_instance(&mut rng, t_len, l);
            let mu = marginals(&unary, &trans).unwrap();
            for row in &mu {
                let mut sum = 0.0;
                for j in 0..l {
                    prop_assert!(row[j] >= 0.0);
                    sum += row[j];
                }
                prop_assert!((sum - 1.0).abs() < 1e-10);
            }
        }

        #[test]
        fn nll_is_nonnegative(seed in 0u64..10_000) {
            let mut rng = seeded(seed);
            let t_len = rng.gen_range(1..=5);
            let l = rng.gen_range(1..=4);
            let (unary, trans) = random_instance(&mut rng, t_len, l);
            let gold: Vec<usize> = (0..t_len).map(|_| rng.gen_range(0..l)).collect();
            let nll = crf_nll(&unary, &trans, &gold).unwrap();
            prop_assert!(nll >= -1e-12);
        }
    }
}
