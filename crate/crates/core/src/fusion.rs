//! Contrastive fusion of per-view POI representations.
//!
//! The view-shared representation is the elementwise mean across views,
//! pulled toward every view by an InfoNCE loss with a cosine critic.
//! Subtracting the shared part leaves view-specific residuals, pushed
//! toward pairwise orthogonality by a squared-dot penalty. An attention
//! module mixes the shared and specific parts per POI, and the result is
//! injected additively into the ID embeddings that feed the sequence
//! encoder.

use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::optim::derive_rng;
use crate::tape::{Tape, Var};
use crate::tensor::Matrix;

/// Ceiling on per-anchor negatives under the sampled policy.
pub const NEGATIVE_SAMPLE_CAP: usize = 512;

/// How the contrastive loss picks its negative POIs for each anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NegativePolicy {
    /// Every other POI is a negative. Exact, quadratic in N.
    Full,
    /// A seeded subsample of at most `cap` other POIs per anchor. Equals
    /// `Full` whenever `cap >= N - 1`.
    Sampled { seed: u64, cap: usize },
}

/// The shared and specific decomposition plus the fused result for one
/// forward pass. With a single view no decomposition exists and `fused`
/// aliases that view's representation.
pub struct FusionOutput {
    pub shared: Option<Var>,
    pub specific: Vec<Var>,
    pub fused: Var,
}

/// Elementwise mean over at least two equally shaped view matrices.
pub fn shared_representation(tape: &mut Tape, per_view: &[Var]) -> Result<Var> {
    if per_view.len() < 2 {
        return Err(Error::ViewCountTooSmall {
            got: per_view.len(),
        });
    }
    let mut acc = per_view[0];
    for &v in &per_view[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(tape.scale(acc, 1.0 / per_view.len() as f64))
}

/// Exact residuals: specific[v] = per_view[v] - shared.
pub fn specific_representations(tape: &mut Tape, per_view: &[Var], shared: Var) -> Result<Vec<Var>> {
    per_view.iter().map(|&v| tape.sub(v, shared)).collect()
}

/// The 0/1 negative-selection matrix: row i marks which other POIs serve
/// as negatives for anchor i. The diagonal is always zero.
fn negative_mask(n: usize, policy: NegativePolicy) -> Matrix {
    match policy {
        NegativePolicy::Sampled { seed, cap } if cap < n.saturating_sub(1) => {
            let mut mask = Matrix::zeros((n, n));
            for i in 0..n {
                let mut rng = derive_rng(seed, "shared-negatives", i as u64, 0);
                // Sample from the n-1 indices that skip i.
                for idx in sample(&mut rng, n - 1, cap) {
                    let j = if idx >= i { idx + 1 } else { idx };
                    mask[(i, j)] = 1.0;
                }
            }
            mask
        }
        _ => {
            let mut mask = Matrix::ones((n, n)) - Matrix::eye(n);
            mask.mapv_inplace(|v| if v > 0.5 { 1.0 } else { 0.0 });
            mask
        }
    }
}

/// InfoNCE agreement loss between each view and the shared representation.
///
/// For anchor i in view v the positive is (p_i^v, shared_i); negatives are
/// the selected other POIs j, contributing both the cross pair
/// (p_i^v, shared_j) and the same-view pair (p_i^v, p_j^v). The critic is
/// cosine similarity at temperature `tau2`, and the result averages over
/// anchors and views with a leading minus sign.
pub fn shared_loss(
    tape: &mut Tape,
    per_view: &[Var],
    shared: Var,
    tau2: f64,
    policy: NegativePolicy,
) -> Result<Var> {
    let n = tape.value(shared).nrows();
    let mask = tape.leaf(negative_mask(n, policy));
    let cn = tape.l2_normalize_rows(shared)?;

    let mut acc: Option<Var> = None;
    for &view in per_view {
        let pn = tape.l2_normalize_rows(view)?;
        let cross = tape.matmul_nt(pn, cn)?;
        let cross = tape.scale(cross, 1.0 / tau2);
        let same = tape.matmul_nt(pn, pn)?;
        let same = tape.scale(same, 1.0 / tau2);

        let pos = tape.diag_col(cross)?;
        let e_cross = tape.exp(cross);
        let e_same = tape.exp(same);
        let masked_cross = tape.mul(e_cross, mask)?;
        let masked_same = tape.mul(e_same, mask)?;
        let neg_cross = tape.row_sums(masked_cross);
        let neg_same = tape.row_sums(masked_same);
        let e_pos = tape.exp(pos);
        let denom = tape.add(e_pos, neg_cross)?;
        let denom = tape.add(denom, neg_same)?;
        let log_denom = tape.log(denom);
        let agreement = tape.sub(pos, log_denom)?;
        let total = tape.sum_all(agreement);
        acc = Some(match acc {
            Some(a) => tape.add(a, total)?,
            None => total,
        });
    }
    let acc = acc.ok_or(Error::ViewCountTooSmall { got: 0 })?;
    Ok(tape.scale(acc, -1.0 / (n as f64 * per_view.len() as f64)))
}

/// Orthogonality penalty on view-specific residuals: the squared dot
/// product of every ordered pair of distinct views, per POI, averaged
/// over POIs.
pub fn orthogonality_loss(tape: &mut Tape, specific: &[Var]) -> Result<Var> {
    if specific.len() < 2 {
        return Err(Error::ViewCountTooSmall {
            got: specific.len(),
        });
    }
    let n = tape.value(specific[0]).nrows();
    let mut acc: Option<Var> = None;
    for (v, &a) in specific.iter().enumerate() {
        for (u, &b) in specific.iter().enumerate() {
            if v == u {
                continue;
            }
            let prod = tape.mul(a, b)?;
            let dots = tape.row_sums(prod);
            let sq = tape.mul(dots, dots)?;
            let total = tape.sum_all(sq);
            acc = Some(match acc {
                Some(s) => tape.add(s, total)?,
                None => total,
            });
        }
    }
    Ok(tape.scale(acc.expect("at least two views"), 1.0 / n as f64))
}

/// Attention mixture of the shared part and every specific part: per POI,
/// logits are a2-dot-part, weights their softmax, and the fused row the
/// weighted sum. `a2` is a 1 x d3 row.
pub fn attentive_fuse(tape: &mut Tape, shared: Var, specific: &[Var], a2: Var) -> Result<Var> {
    let parts: Vec<Var> = std::iter::once(shared)
        .chain(specific.iter().copied())
        .collect();
    let mut logits: Option<Var> = None;
    for &part in &parts {
        let l = tape.matmul_nt(part, a2)?;
        logits = Some(match logits {
            Some(prev) => tape.concat_cols(prev, l)?,
            None => l,
        });
    }
    let weights = tape.softmax_rows(logits.expect("at least the shared part"));
    let mut fused: Option<Var> = None;
    for (p, &part) in parts.iter().enumerate() {
        let w = tape.slice_cols(weights, p, p + 1)?;
        let contrib = tape.mul_col(part, w)?;
        fused = Some(match fused {
            Some(f) => tape.add(f, contrib)?,
            None => contrib,
        });
    }
    Ok(fused.expect("at least the shared part"))
}

/// Full fusion pipeline over per-view representations. Two or more views
/// run the shared/specific decomposition and attention mixture; a single
/// view bypasses fusion and is returned as-is.
pub fn fuse(tape: &mut Tape, per_view: &[Var], a2: Var) -> Result<FusionOutput> {
    match per_view {
        [] => Err(Error::ViewCountTooSmall { got: 0 }),
        [only] => Ok(FusionOutput {
            shared: None,
            specific: Vec::new(),
            fused: *only,
        }),
        _ => {
            let shared = shared_representation(tape, per_view)?;
            let specific = specific_representations(tape, per_view, shared)?;
            let fused = attentive_fuse(tape, shared, &specific, a2)?;
            Ok(FusionOutput {
                shared: Some(shared),
                specific,
                fused,
            })
        }
    }
}

/// Adds the projected fused representation to the ID embeddings:
/// enriched = E_id + fused * W_inj^T, with W_inj of shape d2 x d3.
pub fn enrich_embedding(tape: &mut Tape, e_id: Var, fused: Var, w_inj: Var) -> Result<Var> {
    let injected = tape.matmul_nt(fused, w_inj)?;
    tape.add(e_id, injected)
}
