//! Differentiable numeric core: tensors, the tape, operations, a
//! finite-difference gradient checker and the `SNRT` tensor file format.

pub mod gradcheck;
pub mod graph;
pub mod ops;
pub mod scalar;
pub mod snrt;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Gradients, Graph, ParamId, ParamStore, Parameter, Var};
pub use ops::BatchStats;
pub use scalar::{cosine_distance, guarded_cosine_distance, sigmoid, softplus};
pub use tensor::Tensor;

/// Variance epsilon used by every normalization layer.
pub const NORM_EPS: f64 = 1e-5;

/// Value-level instance normalization (no graph).
pub fn instance_norm(f: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> crate::Result<Tensor> {
    let mut g = Graph::new();
    let (x, ga, be) = (
        g.constant(f.clone()),
        g.constant(gamma.clone()),
        g.constant(beta.clone()),
    );
    let y = g.instance_norm(x, ga, be, eps)?;
    Ok(g.value(y).clone())
}

/// Value-level spatial mean pooling, `[n, c, h, w] -> [n, c]`.
pub fn global_avg_pool(f: &Tensor) -> crate::Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(f.clone());
    let y = g.global_avg_pool(x)?;
    Ok(g.value(y).clone())
}
