//! A visitor trait over the flat f64 storage of parameter structs.
//!
//! Optimizers, gradient clipping, serialization, and finite-difference
//! checks all need "every trainable scalar, in a stable order". Any struct
//! implementing [`Params`] exposes that order once, via `visit`/`visit_mut`,
//! and the helpers here build on it.

use crate::error::{Error, Result};
use crate::numerics::linalg::{Matrix, Vector};

pub trait Params {
    /// Visit each parameter block as a slice, in a stable, documented order.
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a [f64]));

    /// Visit each parameter block mutably, in the same order as `visit`.
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64]));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |s| n += s.len());
        n
    }

    /// Concatenate every block into one flat vector (the `visit` order).
    fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit(&mut |s| out.extend_from_slice(s));
        out
    }

    /// Overwrite every block from a flat vector produced by `to_flat`.
    fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Dimension(format!(
                "flat parameter vector has {} values, expected {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut pos = 0;
        self.visit_mut(&mut |s| {
            s.copy_from_slice(&flat[pos..pos + s.len()]);
            pos += s.len();
        });
        Ok(())
    }

    fn zero(&mut self) {
        self.visit_mut(&mut |s| s.fill(0.0));
    }

    fn scale_all(&mut self, factor: f64) {
        self.visit_mut(&mut |s| {
            for v in s {
                *v *= factor;
            }
        });
    }

    /// `self += scale * other`, blockwise. Panics on mismatched layouts.
    fn accumulate(&mut self, other: &dyn Params, scale: f64) {
        let mut blocks: Vec<&[f64]> = Vec::new();
        other.visit(&mut |s| blocks.push(s));
        let mut i = 0;
        self.visit_mut(&mut |s| {
            let src = blocks[i];
            assert_eq!(s.len(), src.len(), "accumulate: block {} length mismatch", i);
            for (a, b) in s.iter_mut().zip(src) {
                *a += scale * b;
            }
            i += 1;
        });
        assert_eq!(i, blocks.len(), "accumulate: block count mismatch");
    }

    fn l2_norm(&self) -> f64 {
        let mut ss = 0.0;
        self.visit(&mut |s| {
            for v in s {
                ss += v * v;
            }
        });
        ss.sqrt()
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |s| {
            if !s.iter().all(|v| v.is_finite()) {
                ok = false;
            }
        });
        ok
    }
}

impl Params for Matrix {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a [f64])) {
        f(self.data());
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(self.data_mut());
    }
}

impl Params for Vector {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a [f64])) {
        f(self.as_slice());
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(self.as_mut_slice());
    }
}

/// Rescale gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm observed before clipping.
pub fn clip_global_norm(grads: &mut dyn Params, max_norm: f64) -> f64 {
    let norm = grads.l2_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale_all(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Pair {
        m: Matrix,
        v: Vector,
    }

    impl Params for Pair {
        fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a [f64])) {
            self.m.visit(f);
            self.v.visit(f);
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
            self.m.visit_mut(f);
            self.v.visit_mut(f);
        }
    }

    fn sample() -> Pair {
        Pair {
            m: Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap(),
            v: Vector::from_vec(vec![-1.0, 0.5, 2.0]),
        }
    }

    #[test]
    fn flat_round_trip() {
        let p = sample();
        let flat = p.to_flat();
        assert_eq!(flat, vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 2.0]);
        let mut q = Pair {
            m: Matrix::zeros(2, 2),
            v: Vector::zeros(3),
        };
        q.assign_flat(&flat).unwrap();
        assert_eq!(q.to_flat(), flat);
    }

    #[test]
    fn assign_flat_rejects_wrong_length() {
        let mut p = sample();
        assert!(p.assign_flat(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn clip_shrinks_only_above_threshold() {
        let mut p = sample();
        let before = p.l2_norm();
        let seen = clip_global_norm(&mut p, 1.0);
        assert!((seen - before).abs() < 1e-12);
        assert!((p.l2_norm() - 1.0).abs() < 1e-12);

        let mut q = sample();
        clip_global_norm(&mut q, 1e9);
        assert_eq!(q.to_flat(), sample().to_flat());
    }

    #[test]
    fn accumulate_adds_scaled_blocks() {
        let mut p = sample();
        let g = sample();
        p.accumulate(&g, 2.0);
        assert_eq!(p.to_flat(), vec![3.0, 6.0, 9.0, 12.0, -3.0, 1.5, 6.0]);
    }
}
