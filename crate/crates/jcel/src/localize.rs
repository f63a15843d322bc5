//! Anchor matching, position estimation, and the geometry-consistent channel
//! rebuild.
//!
//! Every (user, element) pair carries one absolute delay
//! `tau = |p_user - p_anchor| / c + tau_guided`, so each radiating element
//! acts as a ranging anchor. Extracted delays arrive unordered within a
//! waveguide and are matched to anchors by a minimal-cost assignment; the
//! matched set is then fused across waveguides with iteratively re-linearized
//! weighted least squares. The rebuilt channel replaces per-path delays with
//! the geometry-consistent ones and carries a delta-method variance so the
//! downstream combine step knows how much to trust the feedback.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2, Vector3};
use num_complex::Complex64;

use crate::error::{JcelError, Result};
use crate::omp_delay::DelayEstimate;
use crate::scene::{freq_channel, OfdmParams, PaAnchor, PathParams, Region};
use crate::waveform::{stack_channel, Dims};
use crate::SPEED_OF_LIGHT;

// ---------------------------------------------------------------------------
// Assignment

/// Minimal-cost assignment of a square cost matrix in O(n^3) time.
///
/// Shortest-augmenting-path form with row and column potentials; returns
/// `perm` with `perm[row] = col`. Deterministic: on cost ties the lowest
/// column index wins through the strict comparisons below.
pub fn hungarian(cost: &DMatrix<f64>) -> Result<Vec<usize>> {
    let n = cost.nrows();
    if n == 0 || cost.ncols() != n {
        return Err(JcelError::ShapeMismatch(format!(
            "assignment needs a nonempty square matrix, got {}x{}",
            n,
            cost.ncols()
        )));
    }
    // Index 0 is a virtual column; real rows/columns are 1-based here.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut matched = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        matched[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched[j0] = matched[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0usize; n];
    for j in 1..=n {
        perm[matched[j] - 1] = j - 1;
    }
    Ok(perm)
}

/// Matches extracted delays (rows) to predicted anchor delays (columns).
///
/// The per-pair cost `ln(1 + (tau_hat - tau_pred)^2 / delta)` with
/// `delta = (T/10)^2` saturates for gross outliers so a single bad extraction
/// cannot scramble the rest of the assignment. Returns `slot -> element`.
pub fn match_delays(
    estimates: &[DelayEstimate],
    predicted: &[f64],
    sample_period: f64,
) -> Result<Vec<usize>> {
    if estimates.len() != predicted.len() {
        return Err(JcelError::ShapeMismatch(format!(
            "{} delay estimates vs {} anchors",
            estimates.len(),
            predicted.len()
        )));
    }
    let delta = (sample_period / 10.0).powi(2);
    let cost = DMatrix::from_fn(estimates.len(), predicted.len(), |t, n| {
        let diff = estimates[t].delay - predicted[n];
        (1.0 + diff * diff / delta).ln()
    });
    hungarian(&cost)
}

// ---------------------------------------------------------------------------
// Position fusion

/// First-order model of one anchor's delay around a linearization point:
/// `tau(x, y) ~ a x + b y + offset`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DelayLinearization {
    pub a: f64,
    pub b: f64,
    pub offset: f64,
}

/// Predicted absolute delay from ground position (x, y) to an anchor.
pub fn predict_delay(anchor_pos: Vector3<f64>, guided_delay: f64, x: f64, y: f64) -> f64 {
    (Vector3::new(x, y, 0.0) - anchor_pos).norm() / SPEED_OF_LIGHT + guided_delay
}

/// Linearizes the delay map of one anchor at (x0, y0).
///
/// The gradient is the unit direction from anchor to user divided by c,
/// restricted to the ground plane; anchors directly above the point give a
/// zero gradient, which is fine as long as other anchors break the tie.
pub fn linearize_delay(
    anchor_pos: Vector3<f64>,
    guided_delay: f64,
    x0: f64,
    y0: f64,
) -> Result<DelayLinearization> {
    let d = (Vector3::new(x0, y0, 0.0) - anchor_pos).norm();
    if d < 1e-12 {
        return Err(JcelError::DegenerateGeometry(format!(
            "linearization point coincides with anchor at {anchor_pos:?}"
        )));
    }
    let a = (x0 - anchor_pos.x) / (SPEED_OF_LIGHT * d);
    let b = (y0 - anchor_pos.y) / (SPEED_OF_LIGHT * d);
    let tau0 = d / SPEED_OF_LIGHT + guided_delay;
    Ok(DelayLinearization { a, b, offset: tau0 - a * x0 - b * y0 })
}

/// Weighted least-squares position from linearized delay measurements.
#[derive(Debug, Clone, Copy)]
pub struct PositionFusion {
    pub x: f64,
    pub y: f64,
    /// Information matrix `sum_i w_i g_i g_i^T`; its inverse is the position
    /// covariance when the weights are inverse delay variances.
    pub info: Matrix2<f64>,
}

/// Solves `min sum_i w_i (tau_i - a_i x - b_i y - offset_i)^2` in closed form.
pub fn fuse_position(
    lins: &[DelayLinearization],
    measured: &[f64],
    weights: &[f64],
) -> Result<PositionFusion> {
    if lins.len() != measured.len() || lins.len() != weights.len() {
        return Err(JcelError::ShapeMismatch(format!(
            "{} linearizations, {} measurements, {} weights",
            lins.len(),
            measured.len(),
            weights.len()
        )));
    }
    let mut info = Matrix2::zeros();
    let mut rhs = Vector2::zeros();
    for ((lin, &tau), &w) in lins.iter().zip(measured).zip(weights) {
        let g = Vector2::new(lin.a, lin.b);
        info += w * g * g.transpose();
        rhs += w * (tau - lin.offset) * g;
    }
    let det = info.determinant();
    if !(det.abs() > 1e-12 * info.norm_squared()) {
        return Err(JcelError::RankDeficientGeometry(format!(
            "anchor geometry does not pin down both coordinates (det {det:.3e})"
        )));
    }
    let sol = info.try_inverse().expect("det checked above") * rhs;
    Ok(PositionFusion { x: sol.x, y: sol.y, info })
}

/// Inverse-variance weights for matched delays; falls back to a single shared
/// weight (the reciprocal of the mean variance) whenever any estimate only
/// carries the heuristic residual proxy.
pub fn delay_weights(estimates: &[DelayEstimate]) -> Vec<f64> {
    let floored = |v: f64| v.max(1e-30);
    if estimates.iter().any(|e| e.heuristic_var) {
        let mean =
            estimates.iter().map(|e| floored(e.delay_var)).sum::<f64>() / estimates.len() as f64;
        vec![1.0 / mean; estimates.len()]
    } else {
        estimates.iter().map(|e| 1.0 / floored(e.delay_var)).collect()
    }
}

// ---------------------------------------------------------------------------
// Newton refinement

/// Controls for the iterative position solver.
#[derive(Debug, Clone, Copy)]
pub struct NewtonOptions {
    /// Stop once the update step is shorter than this, metres.
    pub tol: f64,
    pub max_iters: usize,
    /// Iterates further than `divergence_factor * extent` outside the region
    /// abort the refinement.
    pub divergence_factor: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions { tol: 1e-4, max_iters: 50, divergence_factor: 10.0 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PositionEstimate {
    pub x: f64,
    pub y: f64,
    pub info: Matrix2<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Set when the divergence guard fired; the estimate then reverts to the
    /// accepted iterate with the smallest weighted residual.
    pub diverged: bool,
}

/// Full per-user localization: match slots to anchors at the initial point,
/// then refine the position by re-linearized weighted least squares.
///
/// `estimates[m]` holds the extracted delays of waveguide m (one per
/// element, order arbitrary) and `anchors` is the flat anchor table. The
/// returned assignment maps `[m][slot] -> element`.
pub fn localize_newton(
    estimates: &[Vec<DelayEstimate>],
    anchors: &[(PaAnchor, f64)],
    region: &Region,
    sample_period: f64,
    init: Option<(f64, f64)>,
    opts: &NewtonOptions,
) -> Result<(PositionEstimate, Vec<Vec<usize>>)> {
    let num_wg = estimates.len();
    let (x0, y0) = init.unwrap_or_else(|| region.centroid());

    let mut grouped: Vec<Vec<&(PaAnchor, f64)>> = Vec::with_capacity(num_wg);
    for m in 0..num_wg {
        let wg_anchors: Vec<&(PaAnchor, f64)> =
            anchors.iter().filter(|(a, _)| a.waveguide == m).collect();
        if wg_anchors.is_empty() || estimates[m].len() != wg_anchors.len() {
            return Err(JcelError::ShapeMismatch(format!(
                "waveguide {m}: {} delay slots vs {} anchors",
                estimates[m].len(),
                wg_anchors.len()
            )));
        }
        grouped.push(wg_anchors);
    }

    // Matching depends on the position and the position on the matching, so
    // the assignment is refreshed after every solve; convergence requires a
    // small step AND a stable assignment. A far-off start can lock in a wrong
    // pairing otherwise (nothing pathological: from a point a few metres off,
    // a scrambled pairing can genuinely cost less).
    let match_all = |x: f64, y: f64| -> Result<Vec<Vec<usize>>> {
        grouped
            .iter()
            .enumerate()
            .map(|(m, wg_anchors)| {
                let predicted: Vec<f64> = wg_anchors
                    .iter()
                    .map(|(a, g)| predict_delay(a.position, *g, x, y))
                    .collect();
                match_delays(&estimates[m], &predicted, sample_period)
            })
            .collect()
    };
    let flat_estimates: Vec<DelayEstimate> = estimates.iter().flatten().copied().collect();
    let weights = delay_weights(&flat_estimates);
    let build_matched = |assignment: &[Vec<usize>]| -> Vec<(Vector3<f64>, f64, f64)> {
        let mut out = Vec::with_capacity(flat_estimates.len());
        for (m, perm) in assignment.iter().enumerate() {
            for (slot, &elem) in perm.iter().enumerate() {
                let (anchor, guided) = grouped[m][elem];
                out.push((anchor.position, *guided, estimates[m][slot].delay));
            }
        }
        out
    };

    let outside_by = |x: f64, y: f64| -> f64 {
        let dx = (region.x_min - x).max(0.0).max(x - region.x_max);
        let dy = (region.y_min - y).max(0.0).max(y - region.y_max);
        dx.hypot(dy)
    };
    let residual_at = |matched: &[(Vector3<f64>, f64, f64)], x: f64, y: f64| -> f64 {
        matched
            .iter()
            .zip(&weights)
            .map(|((pos, guided, tau), w)| {
                let r = tau - predict_delay(*pos, *guided, x, y);
                w * r * r
            })
            .sum()
    };

    let mut assignment = match_all(x0, y0)?;
    let (mut x, mut y) = (x0, y0);
    let mut best = (residual_at(&build_matched(&assignment), x, y), x, y);
    let mut info = Matrix2::zeros();
    let mut converged = false;
    let mut diverged = false;
    let mut iterations = 0;
    for _ in 0..opts.max_iters {
        iterations += 1;
        let matched = build_matched(&assignment);
        let lins = matched
            .iter()
            .map(|(pos, guided, _)| linearize_delay(*pos, *guided, x, y))
            .collect::<Result<Vec<_>>>()?;
        let measured: Vec<f64> = matched.iter().map(|(_, _, tau)| *tau).collect();
        let fused = fuse_position(&lins, &measured, &weights)?;
        info = fused.info;
        if outside_by(fused.x, fused.y) > opts.divergence_factor * region.extent() {
            diverged = true;
            x = best.1;
            y = best.2;
            break;
        }
        let step = ((fused.x - x).powi(2) + (fused.y - y).powi(2)).sqrt();
        x = fused.x;
        y = fused.y;
        let res = residual_at(&matched, x, y);
        if res < best.0 {
            best = (res, x, y);
        }
        let next_assignment = match_all(x, y)?;
        let stable = next_assignment == assignment;
        assignment = next_assignment;
        if step < opts.tol && stable {
            converged = true;
            break;
        }
    }

    Ok((PositionEstimate { x, y, info, iterations, converged, diverged }, assignment))
}

// ---------------------------------------------------------------------------
// Channel rebuild

/// Everything the rebuild needs for one user: element-aligned gains and the
/// position with its covariance.
#[derive(Debug, Clone)]
pub struct UserRebuild {
    /// `gains[m][n]` is the complex gain for element n of waveguide m.
    pub gains: Vec<Vec<Complex64>>,
    /// Complex gain variances, same shape.
    pub gain_vars: Vec<Vec<f64>>,
    pub x: f64,
    pub y: f64,
    /// Position covariance; pass zeros to treat the position as exact.
    pub pos_cov: Matrix2<f64>,
}

/// Rebuilds the stacked channel from gains and positions, with a delta-method
/// variance.
///
/// Delays are re-derived from the estimated positions through the anchor
/// geometry, which is what injects the localization gain back into the
/// channel estimate. The returned scalar is
/// `tr(J Sigma J^T) / (2 M K L)` where J is the Jacobian of the stacked
/// channel with respect to all gains and positions at the estimate and Sigma
/// is block diagonal (independent gains, per-user position covariance).
pub fn delta_method_channel(
    users: &[UserRebuild],
    anchors: &[(PaAnchor, f64)],
    ofdm: &OfdmParams,
    dims: &Dims,
) -> Result<(DVector<f64>, f64)> {
    if users.len() != dims.users {
        return Err(JcelError::ShapeMismatch(format!(
            "{} user rebuilds vs {} users",
            users.len(),
            dims.users
        )));
    }
    let l_count = dims.subcarriers;
    let span = ofdm.symbol_span();
    let mut paths: Vec<PathParams> = Vec::new();
    let mut trace = 0.0f64;

    for (k, user) in users.iter().enumerate() {
        // Per-user position columns of the Jacobian, complex rows (m, l).
        let mut col_x: Vec<Complex64> = vec![Complex64::default(); dims.waveguides * l_count];
        let mut col_y: Vec<Complex64> = vec![Complex64::default(); dims.waveguides * l_count];
        for (anchor, guided) in anchors {
            let (m, n) = (anchor.waveguide, anchor.element);
            let gain = user.gains[m][n];
            let gain_var = user.gain_vars[m][n];
            let diff = Vector3::new(user.x, user.y, 0.0) - anchor.position;
            let d = diff.norm();
            if d < 1e-12 {
                return Err(JcelError::DegenerateGeometry(format!(
                    "user {k} sits on anchor ({m}, {n})"
                )));
            }
            let delay = d / SPEED_OF_LIGHT + guided;
            paths.push(PathParams { user: k, waveguide: m, element: n, gain, delay });

            // d h / d Re z and d h / d Im z columns both have squared norm L.
            trace += gain_var * l_count as f64;

            let (dtau_dx, dtau_dy) = (diff.x / (SPEED_OF_LIGHT * d), diff.y / (SPEED_OF_LIGHT * d));
            for l in 0..l_count {
                let omega = -2.0 * std::f64::consts::PI * l as f64 / span;
                let e = Complex64::from_polar(1.0, omega * delay);
                let dh_dtau = gain * e * Complex64::new(0.0, omega);
                col_x[m * l_count + l] += dh_dtau * dtau_dx;
                col_y[m * l_count + l] += dh_dtau * dtau_dy;
            }
        }
        let bxx: f64 = col_x.iter().map(|c| c.norm_sqr()).sum();
        let byy: f64 = col_y.iter().map(|c| c.norm_sqr()).sum();
        let bxy: f64 = col_x.iter().zip(&col_y).map(|(u, v)| (u.conj() * v).re).sum();
        trace += user.pos_cov[(0, 0)] * bxx
            + 2.0 * user.pos_cov[(0, 1)] * bxy
            + user.pos_cov[(1, 1)] * byy;
    }

    let blocks: Vec<DMatrix<Complex64>> = (0..l_count)
        .map(|l| freq_channel(&paths, dims.waveguides, dims.users, l, ofdm))
        .collect();
    Ok((stack_channel(&blocks, dims), trace / dims.channel_len() as f64))
}

/// Channel rebuild straight from extracted (gain, delay) pairs, for runs with
/// the localization stage disabled.
///
/// `paths[(k, m)]` lists the extracted paths of that pair; element indices
/// are irrelevant to the synthesis. The variance follows the same
/// delta-method recipe but with per-path delay variances in place of the
/// position covariance.
pub fn rebuild_from_delays(
    paths: &[((usize, usize), Vec<DelayEstimate>)],
    ofdm: &OfdmParams,
    dims: &Dims,
) -> Result<(DVector<f64>, f64)> {
    let l_count = dims.subcarriers;
    let span = ofdm.symbol_span();
    let mut flat: Vec<PathParams> = Vec::new();
    let mut trace = 0.0f64;
    for ((k, m), list) in paths {
        if *k >= dims.users || *m >= dims.waveguides {
            return Err(JcelError::ShapeMismatch(format!(
                "pair ({k}, {m}) outside {} users x {} waveguides",
                dims.users, dims.waveguides
            )));
        }
        for (slot, e) in list.iter().enumerate() {
            flat.push(PathParams {
                user: *k,
                waveguide: *m,
                element: slot,
                gain: e.gain,
                delay: e.delay,
            });
            trace += e.gain_var * l_count as f64;
            let col_tau_sq: f64 = (0..l_count)
                .map(|l| {
                    let omega = 2.0 * std::f64::consts::PI * l as f64 / span;
                    e.gain.norm_sqr() * omega * omega
                })
                .sum();
            trace += e.delay_var * col_tau_sq;
        }
    }
    let blocks: Vec<DMatrix<Complex64>> = (0..l_count)
        .map(|l| freq_channel(&flat, dims.waveguides, dims.users, l, ofdm))
        .collect();
    Ok((stack_channel(&blocks, dims), trace / dims.channel_len() as f64))
}

// ---------------------------------------------------------------------------
