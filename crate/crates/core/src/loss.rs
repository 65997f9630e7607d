//! Joint training objective: symmetric InfoNCE between the two views plus
//! cross-entropy location classification, summed with unit weights.

use crate::error::{Error, Result};
use crate::tape::{Graph, Var};
use crate::tensor::Scalar;

/// Loss report for one batch. `total` is always the plain sum of the two
/// components.
#[derive(Debug, Clone, Copy)]
pub struct LossValue {
    pub total: f64,
    pub infonce: f64,
    pub ce: f64,
    pub temperature: f64,
}

pub const DEFAULT_TEMPERATURE: f64 = 0.1;

fn check_unit_rows<T: Scalar>(g: &Graph<T>, v: Var, what: &str) -> Result<()> {
    let t = g.value(v);
    let s = t.shape();
    let (rows, d) = (s[0], s[1]);
    for r in 0..rows {
        let row = &t.values()[r * d..(r + 1) * d];
        let norm: f64 = row.iter().map(|&x| x.to_f64() * x.to_f64()).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-4 {
            return Err(Error::Domain(format!(
                "{} row {} has norm {}, expected unit length",
                what, r, norm
            )));
        }
    }
    Ok(())
}

/// Symmetric contrastive loss over row-aligned descriptor batches
/// `u, v: [B, d]` whose rows are unit length. Row `i` of each view is the
/// positive for row `i` of the other; all other rows are negatives.
///
/// Computed as the mean of the two directional terms: cross-entropy with
/// diagonal targets over rows of `(U V^T)/tau` and of its transpose.
pub fn infonce<T: Scalar>(g: &mut Graph<T>, u: Var, v: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Domain(format!("temperature {} must be positive", tau)));
    }
    let su = g.value(u).shape().to_vec();
    let sv = g.value(v).shape().to_vec();
    if su.len() != 2 || su != sv || su[0] == 0 {
        return Err(Error::Dimension(format!(
            "descriptor batches must share a [B,d] shape, got {:?} and {:?}",
            su, sv
        )));
    }
    check_unit_rows(g, u, "view-1 batch")?;
    check_unit_rows(g, v, "view-2 batch")?;
    let b = su[0];
    let targets: Vec<usize> = (0..b).collect();

    let vt = g.transpose(v)?;
    let sim = g.matmul(u, vt)?;
    let sim = g.scale(sim, 1.0 / tau);
    let fwd = g.cross_entropy_rows(sim, &targets)?;
    let sim_t = g.transpose(sim)?;
    let bwd = g.cross_entropy_rows(sim_t, &targets)?;
    let both = g.add(fwd, bwd)?;
    Ok(g.scale(both, 0.5))
}

/// Mean cross-entropy of location logits `[B, K]` against integer labels.
pub fn cross_entropy<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    g.cross_entropy_rows(logits, labels)
}

/// Unit-weighted joint objective. Returns the scalar tape node for
/// backward plus a value-level report of the components.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    u: Var,
    v: Var,
    logits: Var,
    labels: &[usize],
    tau: f64,
) -> Result<(Var, LossValue)> {
    let nce = infonce(g, u, v, tau)?;
    let ce = cross_entropy(g, logits, labels)?;
    let total = g.add(nce, ce)?;
    let value = LossValue {
        total: g.value(total).item().to_f64(),
        infonce: g.value(nce).item().to_f64(),
        ce: g.value(ce).item().to_f64(),
        temperature: tau,
    };
    Ok((total, value))
}
