//! Dense `f64` tensors and a tape-based reverse-mode graph.
//!
//! A [`Tensor`] is an immutable value. Differentiation happens on a [`Graph`]:
//! leaves are registered with or without `requires_grad`, every op appends a
//! node, and [`Graph::backward`] fills gradients for the nodes that need them.
//! Any op that would store a NaN or infinity fails with
//! [`Error::NonFinite`](crate::Error::NonFinite).

mod graph;
pub(crate) mod kernels;
mod tensor;

pub use graph::{AttnGeom, Graph, Var};
pub use tensor::Tensor;

use crate::error::Result;

/// Matrix product of two rank-2 tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let out = g.matmul(va, vb)?;
    Ok(g.value(out).clone())
}

/// Softmax of `x` along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let out = g.softmax(v, axis)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
pub(crate) mod fd {
    //! Central finite-difference oracle shared by the gradient tests.
    use super::*;

    /// Compares analytic gradients of `f` with central differences at `inputs`.
    /// Returns the worst relative error over all input coordinates.
    pub fn max_rel_error<F>(inputs: &[Tensor], f: F) -> f64
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let loss = f(&mut g, &vars).unwrap();
        g.backward(loss).unwrap();
        let analytic: Vec<Tensor> = vars.iter().map(|v| g.grad(*v).unwrap()).collect();

        let eval = |ts: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
            let loss = f(&mut g, &vars).unwrap();
            g.value(loss).item()
        };
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (ti, t) in inputs.iter().enumerate() {
            for idx in 0..t.numel() {
                let mut plus = inputs.to_vec();
                plus[ti].data_mut()[idx] += h;
                let mut minus = inputs.to_vec();
                minus[ti].data_mut()[idx] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic[ti].data()[idx];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
                worst = worst.max(err);
            }
        }
        worst
    }
}
