//! LSTM cells, unidirectional encoding, and bidirectional concatenation,
//! with hand-derived backward passes.
//!
//! One step computes
//!
//! ```text
//! i = sigma(W_i h_prev + U_i x + b_i)        input gate
//! f = sigma(W_f h_prev + U_f x + b_f)        forget gate
//! o = sigma(W_o h_prev + U_o x + b_o)        output gate
//! g = tanh (W_c h_prev + U_c x + b_c)        candidate cell
//! c = f * c_prev + i * g
//! h = o * tanh(c)
//! ```
//!
//! The bias vectors are an addition on top of the bias-free update
//! equations; constructing parameters with `use_bias = false` pins them at
//! zero and removes them from the trainable set, recovering the literal
//! equations. A bidirectional encoder runs one cell left-to-right and an
//! independent cell right-to-left and concatenates the per-position states.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::linalg::{sigmoid, Matrix, Vector};
use crate::numerics::params::Params;
use crate::numerics::rng::glorot_matrix;

/// All weights of one LSTM direction.
///
/// `Params` visitation order: for each gate in the fixed order
/// (input, forget, output, candidate): recurrent matrix `W`, input matrix
/// `U`, then bias `b` (bias only when `use_bias` is set).
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    hidden: usize,
    input: usize,
    use_bias: bool,
    pub w_i: Matrix,
    pub u_i: Matrix,
    pub b_i: Vector,
    pub w_f: Matrix,
    pub u_f: Matrix,
    pub b_f: Vector,
    pub w_o: Matrix,
    pub u_o: Matrix,
    pub b_o: Vector,
    pub w_c: Matrix,
    pub u_c: Matrix,
    pub b_c: Vector,
}

impl LstmParams {
    pub fn zeros(hidden: usize, input: usize, use_bias: bool) -> Self {
        LstmParams {
            hidden,
            input,
            use_bias,
            w_i: Matrix::zeros(hidden, hidden),
            u_i: Matrix::zeros(hidden, input),
            b_i: Vector::zeros(hidden),
            w_f: Matrix::zeros(hidden, hidden),
            u_f: Matrix::zeros(hidden, input),
            b_f: Vector::zeros(hidden),
            w_o: Matrix::zeros(hidden, hidden),
            u_o: Matrix::zeros(hidden, input),
            b_o: Vector::zeros(hidden),
            w_c: Matrix::zeros(hidden, hidden),
            u_c: Matrix::zeros(hidden, input),
            b_c: Vector::zeros(hidden),
        }
    }

    /// Glorot-uniform matrices; biases zero except the forget-gate bias,
    /// which starts at 1.0 so early training does not erase the cell state.
    pub fn init(hidden: usize, input: usize, use_bias: bool, rng: &mut impl Rng) -> Self {
        let mut p = LstmParams::zeros(hidden, input, use_bias);
        for w in [&mut p.w_i, &mut p.w_f, &mut p.w_o, &mut p.w_c] {
            *w = glorot_matrix(rng, hidden, hidden);
        }
        for u in [&mut p.u_i, &mut p.u_f, &mut p.u_o, &mut p.u_c] {
            *u = glorot_matrix(rng, hidden, input);
        }
        if use_bias {
            for j in 0..hidden {
                p.b_f[j] = 1.0;
            }
        }
        p
    }

    pub fn zeros_like(&self) -> Self {
        LstmParams::zeros(self.hidden, self.input, self.use_bias)
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn input(&self) -> usize {
        self.input
    }

    pub fn use_bias(&self) -> bool {
        self.use_bias
    }

    fn gate_preacts(&self, x: &Vector, h_prev: &Vector) -> [Vector; 4] {
        let mut a = [
            self.w_i.matvec(h_prev),
            self.w_f.matvec(h_prev),
            self.w_o.matvec(h_prev),
            self.w_c.matvec(h_prev),
        ];
        let us = [&self.u_i, &self.u_f, &self.u_o, &self.u_c];
        let bs = [&self.b_i, &self.b_f, &self.b_o, &self.b_c];
        for k in 0..4 {
            a[k].add_assign(&us[k].matvec(x));
            if self.use_bias {
                a[k].add_assign(bs[k]);
            }
        }
        a
    }

    /// One time step. Returns the new state with every intermediate value
    /// the backward pass needs.
    pub fn step(&self, x: &Vector, h_prev: &Vector, c_prev: &Vector) -> Result<StepState> {
        if x.dim() != self.input {
            return Err(Error::Dimension(format!(
                "lstm step: input dim {} but cell expects {}",
                x.dim(),
                self.input
            )));
        }
        if h_prev.dim() != self.hidden || c_prev.dim() != self.hidden {
            return Err(Error::Dimension(format!(
                "lstm step: state dims {}/{} but cell expects {}",
                h_prev.dim(),
                c_prev.dim(),
                self.hidden
            )));
        }
        let [a_i, a_f, a_o, a_c] = self.gate_preacts(x, h_prev);
        let i = a_i.map(sigmoid);
        let f = a_f.map(sigmoid);
        let o = a_o.map(sigmoid);
        let g = a_c.map(f64::tanh);
        let mut c = f.hadamard(c_prev);
        c.add_assign(&i.hadamard(&g));
        let tanh_c = c.map(f64::tanh);
        let h = o.hadamard(&tanh_c);
        Ok(StepState { h, c, i, f, o, g, tanh_c })
    }

    /// Reverse-mode derivatives of one step.
    ///
    /// `dh`/`dc` are the incoming derivatives with respect to `h_t` and
    /// `c_t` (already summed over every consumer). Returns derivatives with
    /// respect to the previous state and the input, and accumulates weight
    /// derivatives into `grads`.
    #[allow(clippy::too_many_arguments)]
    pub fn step_backward(
        &self,
        x: &Vector,
        h_prev: &Vector,
        c_prev: &Vector,
        st: &StepState,
        dh: &Vector,
        dc_in: &Vector,
        grads: &mut LstmParams,
    ) -> (Vector, Vector, Vector) {
        let hdim = self.hidden;
        // h = o * tanh(c)
        let d_o = dh.hadamard(&st.tanh_c);
        let mut dc = dc_in.clone();
        for j in 0..hdim {
            dc[j] += dh[j] * st.o[j] * (1.0 - st.tanh_c[j] * st.tanh_c[j]);
        }
        // c = f * c_prev + i * g
        let d_i = dc.hadamard(&st.g);
        let d_g = dc.hadamard(&st.i);
        let d_f = dc.hadamard(c_prev);
        let dc_prev = dc.hadamard(&st.f);
        // Pre-activation derivatives through the gate nonlinearities.
        let mut da_i = Vector::zeros(hdim);
        let mut da_f = Vector::zeros(hdim);
        let mut da_o = Vector::zeros(hdim);
        let mut da_g = Vector::zeros(hdim);
        for j in 0..hdim {
            da_i[j] = d_i[j] * st.i[j] * (1.0 - st.i[j]);
            da_f[j] = d_f[j] * st.f[j] * (1.0 - st.f[j]);
            da_o[j] = d_o[j] * st.o[j] * (1.0 - st.o[j]);
            da_g[j] = d_g[j] * (1.0 - st.g[j] * st.g[j]);
        }
        let mut dh_prev = Vector::zeros(hdim);
        let mut dx = Vector::zeros(self.input);
        let gates = [
            (&da_i, &self.w_i, &self.u_i),
            (&da_f, &self.w_f, &self.u_f),
            (&da_o, &self.w_o, &self.u_o),
            (&da_g, &self.w_c, &self.u_c),
        ];
        for (da, w, u) in gates {
            dh_prev.add_assign(&w.matvec_t(da));
            dx.add_assign(&u.matvec_t(da));
        }
        let grad_refs = [
            (&da_i, &mut grads.w_i, &mut grads.u_i, &mut grads.b_i),
            (&da_f, &mut grads.w_f, &mut grads.u_f, &mut grads.b_f),
            (&da_o, &mut grads.w_o, &mut grads.u_o, &mut grads.b_o),
            (&da_g, &mut grads.w_c, &mut grads.u_c, &mut grads.b_c),
        ];
        for (da, gw, gu, gb) in grad_refs {
            gw.add_outer(da, h_prev, 1.0);
            gu.add_outer(da, x, 1.0);
            if self.use_bias {
                gb.add_assign(da);
            }
        }
        (dh_prev, dc_prev, dx)
    }

    /// Encode a sequence from zero initial state. With `reverse` set the
    /// sequence is processed right to left; either way, the returned states
    /// are aligned to the original positions.
    pub fn encode(&self, xs: &[Vector], reverse: bool) -> Result<LstmStates> {
        if xs.is_empty() {
            return Err(Error::Input("cannot encode an empty sequence".into()));
        }
        let t_len = xs.len();
        let mut steps: Vec<Option<StepState>> = (0..t_len).map(|_| None).collect();
        let mut h = Vector::zeros(self.hidden);
        let mut c = Vector::zeros(self.hidden);
        let order: Vec<usize> = if reverse {
            (0..t_len).rev().collect()
        } else {
            (0..t_len).collect()
        };
        for &t in &order {
            let st = self.step(&xs[t], &h, &c)?;
            h = st.h.clone();
            c = st.c.clone();
            steps[t] = Some(st);
        }
        Ok(LstmStates {
            steps: steps.into_iter().map(|s| s.expect("filled")).collect(),
            reverse,
        })
    }

    /// Backpropagate through a full encoding.
    ///
    /// `dh_ext[t]` / `dc_ext[t]` are the derivatives flowing into `h_t` and
    /// `c_t` from outside the recurrence (e.g. from a tagging head).
    /// Returns parameter gradients and the derivative w.r.t. each input.
    pub fn encode_backward(
        &self,
        xs: &[Vector],
        states: &LstmStates,
        dh_ext: &[Vector],
        dc_ext: &[Vector],
    ) -> Result<(LstmParams, Vec<Vector>)> {
        let t_len = xs.len();
        if states.len() != t_len || dh_ext.len() != t_len || dc_ext.len() != t_len {
            return Err(Error::Dimension(format!(
                "encode_backward: lengths xs={} states={} dh={} dc={}",
                t_len,
                states.len(),
                dh_ext.len(),
                dc_ext.len()
            )));
        }
        let mut grads = self.zeros_like();
        let mut dxs = vec![Vector::zeros(self.input); t_len];
        let zero = Vector::zeros(self.hidden);
        let mut carry_h = Vector::zeros(self.hidden);
        let mut carry_c = Vector::zeros(self.hidden);
        // Visit positions opposite to processing order; the carry flows to
        // each step's predecessor in processing order.
        let order: Vec<usize> = if states.reverse {
            (0..t_len).collect()
        } else {
            (0..t_len).rev().collect()
        };
        for &t in &order {
            let (h_prev, c_prev) = match states.prev_index(t) {
                Some(p) => (&states.steps[p].h, &states.steps[p].c),
                None => (&zero, &zero),
            };
            let mut dh = dh_ext[t].clone();
            dh.add_assign(&carry_h);
            let mut dc = dc_ext[t].clone();
            dc.add_assign(&carry_c);
            let (dh_prev, dc_prev, dx) =
                self.step_backward(&xs[t], h_prev, c_prev, &states.steps[t], &dh, &dc, &mut grads);
            carry_h = dh_prev;
            carry_c = dc_prev;
            dxs[t] = dx;
        }
        Ok((grads, dxs))
    }
}

impl Params for LstmParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a [f64])) {
        let gates = [
            (&self.w_i, &self.u_i, &self.b_i),
            (&self.w_f, &self.u_f, &self.b_f),
            (&self.w_o, &self.u_o, &self.b_o),
            (&self.w_c, &self.u_c, &self.b_c),
        ];
        for (w, u, b) in gates {
            w.visit(f);
            u.visit(f);
            if self.use_bias {
                b.visit(f);
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        let use_bias = self.use_bias;
        let gates = [
            (&mut self.w_i, &mut self.u_i, &mut self.b_i),
            (&mut self.w_f, &mut self.u_f, &mut self.b_f),
            (&mut self.w_o, &mut self.u_o, &mut self.b_o),
            (&mut self.w_c, &mut self.u_c, &mut self.b_c),
        ];
        for (w, u, b) in gates {
            w.visit_mut(f);
            u.visit_mut(f);
            if use_bias {
                b.visit_mut(f);
            }
        }
    }
}

/// Everything one step produces, cached for the backward pass.
#[derive(Debug, Clone)]
pub struct StepState {
    pub h: Vector,
    pub c: Vector,
    pub i: Vector,
    pub f: Vector,
    pub o: Vector,
    /// Candidate cell value tanh(a_c).
    pub g: Vector,
    pub tanh_c: Vector,
}

/// States of one direction, indexed by original sentence position.
#[derive(Debug, Clone)]
pub struct LstmStates {
    steps: Vec<StepState>,
    reverse: bool,
}

impl LstmStates {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn step(&self, t: usize) -> &StepState {
        &self.steps[t]
    }

    pub fn h(&self, t: usize) -> &Vector {
        &self.steps[t].h
    }

    pub fn c(&self, t: usize) -> &Vector {
        &self.steps[t].c
    }

    pub fn reverse(&self) -> bool {
        self.reverse
    }

    /// Original-position index of this step's predecessor in processing
    /// order, if any.
    pub fn prev_index(&self, t: usize) -> Option<usize> {
        if self.reverse {
            if t + 1 < self.steps.len() {
                Some(t + 1)
            } else {
                None
            }
        } else {
            t.checked_sub(1)
        }
    }

    /// The predecessor's hidden state, zero at the sequence boundary.
    pub fn h_prev(&self, t: usize) -> Vector {
        match self.prev_index(t) {
            Some(p) => self.steps[p].h.clone(),
            None => Vector::zeros(self.steps[t].h.dim()),
        }
    }
}

/// Forward and backward encodings of one sentence.
#[derive(Debug, Clone)]
pub struct BiStates {
    pub fwd: LstmStates,
    pub bwd: LstmStates,
}

impl BiStates {
    pub fn len(&self) -> usize {
        self.fwd.len()
    }

    /// `[forward h_t ; backward h_t]`, dimension 2H.
    pub fn h_cat(&self, t: usize) -> Vector {
        self.fwd.h(t).concat(self.bwd.h(t))
    }

    /// `[forward c_t ; backward c_t]`, dimension 2H.
    pub fn c_cat(&self, t: usize) -> Vector {
        self.fwd.c(t).concat(self.bwd.c(t))
    }

    /// Concatenation of each direction's predecessor hidden state: the
    /// position before `t` for the forward cell, after `t` for the
    /// backward cell, zeros at the boundaries.
    pub fn h_prev_cat(&self, t: usize) -> Vector {
        self.fwd.h_prev(t).concat(&self.bwd.h_prev(t))
    }
}

/// Run both directions and pair up their states.
pub fn bilstm_encode(xs: &[Vector], p_fwd: &LstmParams, p_bwd: &LstmParams) -> Result<BiStates> {
    if p_fwd.hidden() != p_bwd.hidden() || p_fwd.input() != p_bwd.input() {
        return Err(Error::Dimension(format!(
            "bilstm: forward cell is {}x{}, backward {}x{}",
            p_fwd.hidden(),
            p_fwd.input(),
            p_bwd.hidden(),
            p_bwd.input()
        )));
    }
    Ok(BiStates {
        fwd: p_fwd.encode(xs, false)?,
        bwd: p_bwd.encode(xs, true)?,
    })
}
