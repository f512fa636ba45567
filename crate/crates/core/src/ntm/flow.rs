//! Planar flow layers `f(z) = z + û tanh(wᵀz + b)`.
//!
//! `û = u + (m(uᵀw) - uᵀw) w / ‖w‖²` with `m(a) = a` for `a >= 0` and
//! `m(a) = exp(a) - 1` below zero. Then `ûᵀw = m(uᵀw) > -1`, which keeps the
//! layer invertible, and `û == u` exactly whenever `uᵀw >= 0` (in particular
//! `u = 0` yields the identity map).

use rand::Rng;

use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::{Error, Result};

/// Smallest admissible `|1 + ûᵀw tanh'(·)|` before the layer is declared
/// degenerate.
pub const MIN_JACOBIAN: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanarFlowLayer {
    /// `[1, d]`
    pub u: ParamId,
    /// `[1, d]`
    pub w: ParamId,
    /// `[1, 1]`
    pub b: ParamId,
}

impl PlanarFlowLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let std = 0.1;
        Self {
            u: store.add_normal(format!("{prefix}.u"), &[1, dim], std, rng),
            w: store.add_normal(format!("{prefix}.w"), &[1, dim], std, rng),
            b: store.add_zeros(format!("{prefix}.b"), &[1, 1]),
        }
    }

    pub(crate) fn lookup(store: &ParamStore, prefix: &str) -> Result<Self> {
        let get = |n: &str| {
            store
                .find(&format!("{prefix}.{n}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {prefix}.{n}")))
        };
        Ok(Self {
            u: get("u")?,
            w: get("w")?,
            b: get("b")?,
        })
    }

    /// Effective `û` on the tape, `[1, d]`.
    pub fn u_hat(&self, g: &mut Graph, store: &ParamStore) -> Result<(Var, Var)> {
        let u = g.param(store, self.u)?;
        let w = g.param(store, self.w)?;
        if store.value(self.w).sum_squares() == 0.0 {
            return Ok((u, w));
        }
        let wt = g.transpose(w)?;
        let uw = g.matmul(u, wt)?;
        let m = g.elu(uw)?;
        let shift = g.sub(m, uw)?;
        let ww = g.matmul(w, wt)?;
        let coef = g.div(shift, ww)?;
        let corr = g.matmul(coef, w)?;
        let u_hat = g.add(u, corr)?;
        Ok((u_hat, w))
    }

    /// One layer over a `[B, d]` batch. Returns `(z', log|det J|)` with the
    /// log-determinant shaped `[B, 1]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, z: Var) -> Result<(Var, Var)> {
        let (u_hat, w) = self.u_hat(g, store)?;
        let b = g.param(store, self.b)?;
        let wt = g.transpose(w)?;
        let lin = g.matmul(z, wt)?;
        let lin = g.add_row(lin, b)?;
        let h = g.tanh(lin)?;
        let shift = g.matmul(h, u_hat)?;
        let z_next = g.add(z, shift)?;

        let uw = g.matmul(u_hat, wt)?;
        let h2 = g.mul(h, h)?;
        let dh = g.one_minus(h2)?;
        let prod = g.matmul(dh, uw)?;
        let jac = g.affine(prod, 1.0, 1.0)?;
        let jac = g.abs(jac)?;
        if let Some(&v) = g.value(jac).data().iter().find(|&&v| v < MIN_JACOBIAN) {
            return Err(Error::Model(format!(
                "degenerate planar-flow Jacobian |1 + ûᵀw·tanh'| = {v:e}"
            )));
        }
        let log_det = g.log(jac)?;
        Ok((z_next, log_det))
    }
}

/// Applies `f_K ∘ … ∘ f_1` to `z0: [B, d]`, returning `(z_K, Σ log|det|)`.
pub fn apply_flow(
    g: &mut Graph,
    store: &ParamStore,
    layers: &[PlanarFlowLayer],
    z0: Var,
) -> Result<(Var, Var)> {
    let batch = g.shape(z0)[0];
    let mut sum_log_det = g.constant(Tensor::zeros(&[batch, 1]))?;
    let mut z = z0;
    for layer in layers {
        let (next, log_det) = layer.forward(g, store, z)?;
        sum_log_det = g.add(sum_log_det, log_det)?;
        z = next;
    }
    Ok((z, sum_log_det))
}
