//! The repository's numerical gate: finite-difference audits of every
//! analytic gradient, grouped into one suite per module. Each suite runs
//! seeded random instances through [`grad_check`] (central differences,
//! step [`AUDIT_EPS`]) and reports the worst relative error; the audit
//! passes when every suite stays under [`AUDIT_GATE`].
//!
//! A `corrupt` target doubles that suite's analytic gradients before
//! comparison, which drives its relative error to ~0.5 — a sanity check
//! that the checker actually checks.

use crate::crf::{crf_nll_grad, softmax_nll, TransitionTable};
use crate::error::{Error, Result};
use crate::kbembed::{KbModel, KbVocab, RawTriple, Triple};
use crate::knowattn::{knowledge_backward, knowledge_forward, AttnParams, CandidateSet};
use crate::numerics::gradcheck::grad_check;
use crate::numerics::linalg::Vector;
use crate::numerics::params::Params;
use crate::numerics::rng::{seeded, uniform_vector};
use crate::rnn::LstmParams;

use rand::Rng;

/// Central-difference step width used by every audit suite.
pub const AUDIT_EPS: f64 = 1e-5;

/// A suite fails when its worst relative error reaches this.
pub const AUDIT_GATE: f64 = 1e-4;

/// Every registered suite, in report order.
pub const SUITE_NAMES: [&str; 4] = ["rnn", "knowattn", "crf", "kbembed"];

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub name: &'static str,
    /// Random instances checked (each instance audits every coordinate).
    pub cases: usize,
    /// Worst relative error across all instances and coordinates.
    pub worst: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.worst < AUDIT_GATE
    }
}

#[derive(Debug, Clone)]
pub struct AuditReport {
    pub suites: Vec<SuiteReport>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(SuiteReport::passed)
    }

    /// One line per suite: name, instance count, worst error, verdict.
    pub fn lines(&self) -> String {
        let mut out = String::new();
        for s in &self.suites {
            out.push_str(&format!(
                "{}\tcases {}\tworst {:.3e}\t{}\n",
                s.name,
                s.cases,
                s.worst,
                if s.passed() { "ok" } else { "FAIL" }
            ));
        }
        out
    }
}

/// Double the analytic gradient: every nonzero coordinate then disagrees
/// with the numeric one by a relative error of 1/2.
fn maybe_corrupt(analytic: &mut [f64], corrupt: bool) {
    if corrupt {
        for v in analytic.iter_mut() {
            *v *= 2.0;
        }
    }
}

// ---------------------------------------------------------------------------
// rnn: lstm_step (T = 1) and lstm_encode, parameters and inputs
// ---------------------------------------------------------------------------

fn rnn_param_case(
    t_len: usize,
    d: usize,
    h: usize,
    reverse: bool,
    use_bias: bool,
    seed: u64,
    corrupt: bool,
) -> Result<f64> {
    let mut rng = seeded(seed);
    let p = LstmParams::init(h, d, use_bias, &mut rng);
    let xs: Vec<Vector> = (0..t_len).map(|_| uniform_vector(&mut rng, d, -1.0, 1.0)).collect();
    let wh: Vec<Vector> = (0..t_len).map(|_| uniform_vector(&mut rng, h, -1.0, 1.0)).collect();
    let wc: Vec<Vector> = (0..t_len).map(|_| uniform_vector(&mut rng, h, -1.0, 1.0)).collect();
    let probe_loss = |states: &crate::rnn::LstmStates| {
        let mut loss = 0.0;
        for t in 0..states.len() {
            loss += wh[t].dot(states.h(t)) + wc[t].dot(states.c(t));
        }
        loss
    };

    let states = p.encode(&xs, reverse)?;
    let (grads, dxs) = p.encode_backward(&xs, &states, &wh, &wc)?;

    // Parameters and inputs audited as one flat vector.
    let mut theta = p.to_flat();
    for x in &xs {
        theta.extend_from_slice(x.as_slice());
    }
    let mut analytic = grads.to_flat();
    for dx in &dxs {
        analytic.extend_from_slice(dx.as_slice());
    }
    maybe_corrupt(&mut analytic, corrupt);

    let n_p = p.param_count();
    let mut probe = p.clone();
    grad_check(
        |flat| {
            probe.assign_flat(&flat[..n_p])?;
            let xs2: Vec<Vector> = flat[n_p..].chunks(d).map(Vector::from_slice).collect();
            Ok(probe_loss(&probe.encode(&xs2, reverse)?))
        },
        &theta,
        &analytic,
        AUDIT_EPS,
    )
}

fn suite_rnn(corrupt: bool) -> Result<SuiteReport> {
    let shapes = [
        // One single-step case, then longer sequences both ways, with
        // and without gate biases.
        (1usize, 3usize, 3usize, false, true, 130u64),
        (3, 2, 3, false, true, 131),
        (5, 3, 2, false, true, 132),
        (5, 2, 5, true, true, 133),
        (7, 5, 3, true, true, 134),
        (4, 3, 4, false, false, 135),
    ];
    let mut worst = 0.0f64;
    for (t_len, d, h, reverse, use_bias, seed) in shapes {
        worst = worst.max(rnn_param_case(t_len, d, h, reverse, use_bias, seed, corrupt)?);
    }
    Ok(SuiteReport { name: "rnn", cases: shapes.len(), worst })
}

// ---------------------------------------------------------------------------
// knowattn: attention + sentinel + fusion, parameters and inputs
// ---------------------------------------------------------------------------

fn knowattn_case(
    seed: u64,
    hidden: usize,
    input: usize,
    d_k: usize,
    n_cands: usize,
    project: bool,
    corrupt: bool,
) -> Result<f64> {
    let mut rng = seeded(seed);
    let p = AttnParams::init(hidden, input, d_k, project, &mut rng)?;
    let two_h = 2 * hidden;
    let h = uniform_vector(&mut rng, two_h, -1.0, 1.0);
    let h_prev = uniform_vector(&mut rng, two_h, -1.0, 1.0);
    let x = uniform_vector(&mut rng, input, -1.0, 1.0);
    let c = uniform_vector(&mut rng, two_h, -1.0, 1.0);
    let cands = CandidateSet {
        ids: (0..n_cands).collect(),
        vectors: (0..n_cands).map(|_| uniform_vector(&mut rng, d_k, -1.0, 1.0)).collect(),
    };
    let probe = uniform_vector(&mut rng, two_h, -1.0, 1.0);

    let step = knowledge_forward(&p, &h, &h_prev, &x, &c, &cands)?;
    let mut param_grads = p.zeros_like();
    let input_grads =
        knowledge_backward(&p, &h, &h_prev, &x, &c, &cands, &step, &probe, &mut param_grads);

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
    maybe_corrupt(&mut analytic, corrupt);

    let n_p = p.param_count();
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
            let s = knowledge_forward(&probe_p, &h2, &hp2, &x2, &c2, &cands)?;
            Ok(probe.dot(&s.h_hat))
        },
        &theta,
        &analytic,
        AUDIT_EPS,
    )
}

fn suite_knowattn(corrupt: bool) -> Result<SuiteReport> {
    let shapes = [
        // (seed, hidden, input, d_k, candidates, project); one case per
        // candidate-count regime plus a projection-free cell.
        (140u64, 2usize, 3usize, 3usize, 1usize, true),
        (141, 2, 3, 5, 2, true),
        (142, 3, 2, 4, 4, true),
        (143, 3, 3, 6, 3, true),
        (144, 2, 3, 4, 2, false),
    ];
    let mut worst = 0.0f64;
    for (seed, hidden, input, d_k, l, project) in shapes {
        let d_k = if project { d_k } else { 2 * hidden };
        worst = worst.max(knowattn_case(seed, hidden, input, d_k, l, project, corrupt)?);
    }
    Ok(SuiteReport { name: "knowattn", cases: shapes.len(), worst })
}

// ---------------------------------------------------------------------------
// crf: softmax_nll and crf_nll_grad, scores and transition table
// ---------------------------------------------------------------------------

fn softmax_case(t_len: usize, l: usize, seed: u64, corrupt: bool) -> Result<f64> {
    let mut rng = seeded(seed);
    let scores: Vec<Vector> = (0..t_len).map(|_| uniform_vector(&mut rng, l, -2.0, 2.0)).collect();
    let gold: Vec<usize> = (0..t_len).map(|_| rng.gen_range(0..l)).collect();

    let (_, grads) = softmax_nll(&scores, &gold)?;
    let theta: Vec<f64> = scores.iter().flat_map(|v| v.as_slice().to_vec()).collect();
    let mut analytic: Vec<f64> = grads.iter().flat_map(|v| v.as_slice().to_vec()).collect();
    maybe_corrupt(&mut analytic, corrupt);

    grad_check(
        |flat| {
            let s2: Vec<Vector> = flat.chunks(l).map(Vector::from_slice).collect();
            Ok(softmax_nll(&s2, &gold)?.0)
        },
        &theta,
        &analytic,
        AUDIT_EPS,
    )
}

fn crf_case(t_len: usize, l: usize, seed: u64, corrupt: bool) -> Result<f64> {
    let mut rng = seeded(seed);
    let unary: Vec<Vector> = (0..t_len).map(|_| uniform_vector(&mut rng, l, -1.0, 1.0)).collect();
    let mut trans = TransitionTable::new(l);
    let side = l + 2;
    for from in 0..side {
        for to in 0..side {
            trans.set(from, to, rng.gen_range(-1.0..1.0));
        }
    }
    let gold: Vec<usize> = (0..t_len).map(|_| rng.gen_range(0..l)).collect();

    let (_, d_unary, d_trans) = crf_nll_grad(&unary, &trans, &gold)?;
    let mut theta: Vec<f64> = unary.iter().flat_map(|v| v.as_slice().to_vec()).collect();
    theta.extend_from_slice(&trans.to_flat());
    let mut analytic: Vec<f64> = d_unary.iter().flat_map(|v| v.as_slice().to_vec()).collect();
    analytic.extend_from_slice(&d_trans.to_flat());
    maybe_corrupt(&mut analytic, corrupt);

    let n_u = t_len * l;
    let mut probe_t = trans.zeros_like();
    grad_check(
        |flat| {
            let u2: Vec<Vector> = flat[..n_u].chunks(l).map(Vector::from_slice).collect();
            probe_t.assign_flat(&flat[n_u..])?;
            Ok(crf_nll_grad(&u2, &probe_t, &gold)?.0)
        },
        &theta,
        &analytic,
        AUDIT_EPS,
    )
}

fn suite_crf(corrupt: bool) -> Result<SuiteReport> {
    let mut worst = 0.0f64;
    let softmax_shapes = [(1usize, 2usize, 150u64), (4, 3, 151), (6, 5, 152)];
    for (t_len, l, seed) in softmax_shapes {
        worst = worst.max(softmax_case(t_len, l, seed, corrupt)?);
    }
    let crf_shapes = [(1usize, 2usize, 153u64), (4, 3, 154), (7, 5, 155)];
    for (t_len, l, seed) in crf_shapes {
        worst = worst.max(crf_case(t_len, l, seed, corrupt)?);
    }
    Ok(SuiteReport {
        name: "crf",
        cases: softmax_shapes.len() + crf_shapes.len(),
        worst,
    })
}

// ---------------------------------------------------------------------------
// kbembed: max-margin ranking loss over bilinear triple scores
// ---------------------------------------------------------------------------

fn kbembed_case(seed: u64, dim: usize, n_negs: usize, corrupt: bool) -> Result<f64> {
    let raw = |e1: &str, r: &str, e2: &str| RawTriple {
        e1: e1.to_string(),
        r: r.to_string(),
        e2: e2.to_string(),
    };
    // A phrase entity ("new york") exercises the word-composition path.
    let rows = vec![
        raw("alpha", "is_a", "cat0"),
        raw("beta", "is_a", "cat1"),
        raw("new york", "is_a", "cat0"),
        raw("gamma", "linked_to", "cat1"),
        raw("delta", "is_a", "cat2"),
    ];
    let vocab = KbVocab::build(&[&rows]);
    let subject = vocab.entity_id("new york")?;
    let is_a = vocab.relation_id("is_a")?;
    let pos = Triple { e1: subject, r: is_a, e2: vocab.entity_id("cat1")? };
    let objects = [
        vocab.entity_id("cat0")?,
        vocab.entity_id("gamma")?,
        vocab.entity_id("cat2")?,
        vocab.entity_id("alpha")?,
    ];
    let negs: Vec<Triple> = (0..n_negs)
        .map(|k| Triple { e1: subject, r: is_a, e2: objects[k % objects.len()] })
        .collect();

    let mut rng = seeded(seed);
    let model = KbModel::init(vocab, dim, &mut rng)?;

    let (_, grads) = model.ranking_loss_and_grads(&pos, &negs)?;
    let theta = model.to_flat();
    let mut analytic = grads.to_flat(&model);
    maybe_corrupt(&mut analytic, corrupt);

    let mut probe = model.clone();
    grad_check(
        |flat| {
            probe.assign_flat(flat)?;
            Ok(probe.ranking_loss_and_grads(&pos, &negs)?.0)
        },
        &theta,
        &analytic,
        AUDIT_EPS,
    )
}

fn suite_kbembed(corrupt: bool) -> Result<SuiteReport> {
    // Phrase entities compose from word vectors, which requires an even
    // embedding dimension.
    let shapes = [(160u64, 4usize, 2usize), (161, 6, 3), (162, 2, 1)];
    let mut worst = 0.0f64;
    for (seed, dim, negs) in shapes {
        worst = worst.max(kbembed_case(seed, dim, negs, corrupt)?);
    }
    Ok(SuiteReport { name: "kbembed", cases: shapes.len(), worst })
}

// ---------------------------------------------------------------------------
// Driver
// ---------------------------------------------------------------------------

/// Run all four suites. `corrupt` names one suite whose analytic
/// gradients are doubled first (a checker sanity mode); it must be one
/// of [`SUITE_NAMES`].
pub fn run_audit(corrupt: Option<&str>) -> Result<AuditReport> {
    if let Some(target) = corrupt {
        if !SUITE_NAMES.contains(&target) {
            return Err(Error::Input(format!(
                "unknown corrupt target {target:?}; expected one of {SUITE_NAMES:?}"
            )));
        }
    }
    let hit = |name: &str| corrupt == Some(name);
    Ok(AuditReport {
        suites: vec![
            suite_rnn(hit("rnn"))?,
            suite_knowattn(hit("knowattn"))?,
            suite_crf(hit("crf"))?,
            suite_kbembed(hit("kbembed"))?,
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_audit_passes_every_suite() {
        let report = run_audit(None).unwrap();
        let names: Vec<&str> = report.suites.iter().map(|s| s.name).collect();
        assert_eq!(names, SUITE_NAMES, "registry must list exactly the four suites");
        for s in &report.suites {
            assert!(s.passed(), "{} worst {:.3e} breaches the gate", s.name, s.worst);
            assert!(s.cases > 0);
        }
        assert!(report.passed());
    }

    #[test]
    fn corrupting_each_suite_flags_only_that_suite() {
        for target in SUITE_NAMES {
            let report = run_audit(Some(target)).unwrap();
            assert!(!report.passed());
            for s in &report.suites {
                if s.name == target {
                    // Doubled analytic gradients sit at relative error 1/2.
                    assert!(
                        (s.worst - 0.5).abs() < 0.1,
                        "{target} corrupted but worst is {:.3}",
                        s.worst
                    );
                } else {
                    assert!(s.passed(), "{} flagged while corrupting {target}", s.name);
                }
            }
        }
    }

    #[test]
    fn unknown_corrupt_target_is_rejected() {
        let err = run_audit(Some("tagger")).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn report_prints_one_line_per_suite() {
        let report = run_audit(None).unwrap();
        let text = report.lines();
        assert_eq!(text.trim_end().lines().count(), SUITE_NAMES.len());
        for name in SUITE_NAMES {
            assert!(text.contains(name));
        }
        assert!(text.contains("ok"));
    }
}
