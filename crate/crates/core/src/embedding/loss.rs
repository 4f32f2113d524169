//! Contrastive losses over the projection head, with analytic gradients.
//!
//! Both losses differentiate cosine(W·a, W·b) with respect to W. For one
//! similarity c = cos(u, v) with u = W·x, v = W·y:
//!
//!   dc/du = v/(|u||v|) − c·u/|u|²,   dc/dW = (dc/du)·xᵀ + (dc/dv)·yᵀ
//!
//! The batch loss gradient collects those rank-one terms per view, in view
//! order, so results are bit-identical under any parallelism.

use ndarray::{Array1, Array2};

use super::{cosine_arrays, EmbeddingVector, ProjectionHead};
use crate::error::{Error, Result};
use crate::exec;

/// Softmax-over-views contrastive loss for a batch of positive pairs.
///
/// The batch is unrolled into 2B views with anchors and positives
/// interleaved; each view's positive is its pair partner and the denominator
/// runs over every other view. Returns the mean negative log ratio and the
/// gradient with respect to the projection weights.
pub fn infonce_loss(
    head: &ProjectionHead,
    pairs: &[(EmbeddingVector, EmbeddingVector)],
) -> Result<(f64, Array2<f64>)> {
    let b = pairs.len();
    if b < 2 {
        return Err(Error::BatchTooSmall { got: b, min: 2 });
    }
    let views: Vec<&Array1<f64>> = pairs
        .iter()
        .flat_map(|(a, p)| [a.values(), p.values()])
        .collect();
    infonce_core(&head.w, head.tau(), &views)
}

pub(crate) fn infonce_core(
    w: &Array2<f64>,
    tau: f64,
    views: &[&Array1<f64>],
) -> Result<(f64, Array2<f64>)> {
    let n = views.len();
    let d = w.nrows();
    for v in views {
        if v.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: v.len(),
            });
        }
    }

    let projected: Vec<Array1<f64>> = exec::map_ordered(views, |x| w.dot(*x));
    let norms: Vec<f64> = projected.iter().map(|u| u.dot(u).sqrt()).collect();
    if norms.contains(&0.0) {
        return Err(Error::ZeroVector);
    }

    let mut cos = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for k in (i + 1)..n {
            let c = (projected[i].dot(&projected[k]) / (norms[i] * norms[k])).clamp(-1.0, 1.0);
            cos[i][k] = c;
            cos[k][i] = c;
        }
    }

    // Per-view softmax over all other views, and the mean −log ratio.
    let mut q = vec![vec![0.0f64; n]; n];
    let mut loss = 0.0;
    for i in 0..n {
        let partner = i ^ 1;
        let mut max_logit = f64::NEG_INFINITY;
        for (k, row) in cos[i].iter().enumerate() {
            if k != i {
                max_logit = max_logit.max(row / tau);
            }
        }
        let mut denom = 0.0;
        for (k, row) in cos[i].iter().enumerate() {
            if k != i {
                let e = ((row / tau) - max_logit).exp();
                q[i][k] = e;
                denom += e;
            }
        }
        for q_ik in q[i].iter_mut() {
            *q_ik /= denom;
        }
        loss += -(cos[i][partner] / tau) + max_logit + denom.ln();
    }
    loss /= n as f64;

    // dLoss/dc_{ik} for the symmetric similarity, merged over both rows.
    let scale = 1.0 / (n as f64 * tau);
    let t: Vec<Array1<f64>> = exec::map_indexed(n, |i| {
        let mut ti = Array1::<f64>::zeros(d);
        let mut self_coef = 0.0;
        for k in 0..n {
            if k == i {
                continue;
            }
            let indicator = if k == (i ^ 1) { 2.0 } else { 0.0 };
            let weight = (q[i][k] + q[k][i] - indicator) * scale;
            ti.scaled_add(weight / (norms[i] * norms[k]), &projected[k]);
            self_coef -= weight * cos[i][k] / (norms[i] * norms[i]);
        }
        ti.scaled_add(self_coef, &projected[i]);
        ti
    });

    // grad = Σ_i t_i · x_iᵀ, assembled row by row.
    let rows: Vec<Array1<f64>> = exec::map_indexed(d, |r| {
        let mut row = Array1::<f64>::zeros(d);
        for (i, x) in views.iter().enumerate() {
            row.scaled_add(t[i][r], x);
        }
        row
    });
    let mut grad = Array2::<f64>::zeros((d, d));
    for (r, row) in rows.into_iter().enumerate() {
        grad.row_mut(r).assign(&row);
    }
    Ok((loss, grad))
}

/// Adds `coef` times d cos(Wx, Wy)/dW to `grad`, given the projected vectors
/// and their norms.
#[allow(clippy::too_many_arguments)]
fn add_cosine_grad(
    grad: &mut Array2<f64>,
    coef: f64,
    u: &Array1<f64>,
    v: &Array1<f64>,
    nu: f64,
    nv: f64,
    c: f64,
    x: &Array1<f64>,
    y: &Array1<f64>,
) {
    let d = grad.nrows();
    for r in 0..d {
        let du_r = v[r] / (nu * nv) - c * u[r] / (nu * nu);
        let dv_r = u[r] / (nu * nv) - c * v[r] / (nv * nv);
        let mut row = grad.row_mut(r);
        row.scaled_add(coef * du_r, x);
        row.scaled_add(coef * dv_r, y);
    }
}

/// Hinge loss max(0, margin − sim(a,p) + sim(a,n)) under the projected
/// cosine, with its gradient (zero in the inactive region).
pub fn triplet_loss(
    head: &ProjectionHead,
    anchor: &EmbeddingVector,
    positive: &EmbeddingVector,
    negative: &EmbeddingVector,
    margin: f64,
) -> Result<(f64, Array2<f64>)> {
    if margin.is_nan() || margin <= 0.0 {
        return Err(Error::Validation(format!(
            "triplet margin must be positive, got {margin}"
        )));
    }
    triplet_core(
        &head.w,
        anchor.values(),
        positive.values(),
        negative.values(),
        margin,
    )
}

pub(crate) fn triplet_core(
    w: &Array2<f64>,
    anchor: &Array1<f64>,
    positive: &Array1<f64>,
    negative: &Array1<f64>,
    margin: f64,
) -> Result<(f64, Array2<f64>)> {
    let d = w.nrows();
    let ua = w.dot(anchor);
    let up = w.dot(positive);
    let un = w.dot(negative);
    let na = ua.dot(&ua).sqrt();
    let np = up.dot(&up).sqrt();
    let nn = un.dot(&un).sqrt();
    if na == 0.0 || np == 0.0 || nn == 0.0 {
        return Err(Error::ZeroVector);
    }
    let c_ap = cosine_arrays(&ua, &up)?;
    let c_an = cosine_arrays(&ua, &un)?;
    let raw = margin - c_ap + c_an;
    let mut grad = Array2::<f64>::zeros((d, d));
    if raw <= 0.0 {
        return Ok((0.0, grad));
    }
    add_cosine_grad(&mut grad, -1.0, &ua, &up, na, np, c_ap, anchor, positive);
    add_cosine_grad(&mut grad, 1.0, &ua, &un, na, nn, c_an, anchor, negative);
    Ok((raw, grad))
}
