//! Expectation-propagation outer loop: linear Gaussian module, extrinsic
//! message exchange with the geometry-aware denoiser, and damping.
//!
//! The stacked real system is `y = M h + n` with isotropic Gaussian messages
//! `N(h; mean, var I)`. One outer iteration runs
//!
//! ```text
//!   prior ─► ep_linear ─► extrinsic ─► extraction/localization/rebuild
//!     ▲                                         │ (denoised message)
//!     └──────────── ep_combine ◄────────────────┘
//! ```
//!
//! The linear module never forms the full `2MKL x 2MKL` system: the Gram of
//! the stacked pilot operator is `I_L (x) (G (x) I_M)` with `G = conj(X) X^T`,
//! so one `K x K` Cholesky factorization serves every subcarrier and
//! waveguide row. All message divisions share one clamping policy: a
//! nonpositive precision difference floors the variance and flags the event.

use nalgebra::{DMatrix, DVector, Matrix2};
use num_complex::Complex64;

use crate::error::{JcelError, Result};
use crate::localize::{
    delta_method_channel, localize_newton, predict_delay, rebuild_from_delays, NewtonOptions,
    PositionEstimate, UserRebuild,
};
use crate::omp_delay::{build_dictionary, omp_extract, DelayEstimate};
use crate::bpvi_delay::{bpvi_extract, BpviOptions};
use crate::scene::{OfdmParams, PaAnchor, Region, Scene};
use crate::waveform::{stack_real, unstack_channel, unstack_channel_tensor, RealStack};
use crate::{VAR_CAP, VAR_FLOOR};

// ---------------------------------------------------------------------------
// Messages
// ---------------------------------------------------------------------------

/// Isotropic Gaussian message over the stacked real channel vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussMsg {
    pub mean: DVector<f64>,
    /// Per-coordinate variance, positive after clamping.
    pub var: f64,
}

/// Divides two Gaussian messages (`num / den` in density terms).
///
/// Returns the quotient and whether the variance had to be clamped: the
/// precision difference `1/num.var - 1/den.var` can be nonpositive when the
/// numerator carries no extra information, in which case the variance floors
/// and the event is reported rather than treated as fatal.
pub fn gaussian_divide(num: &GaussMsg, den: &GaussMsg) -> (GaussMsg, bool) {
    let precision = 1.0 / num.var - 1.0 / den.var;
    // When clamping raises the variance, the mean keeps the exact division
    // value (clamped-variance times raw information mean would amplify it);
    // when clamping lowers it, the information-weighted mean shrinks along.
    let (var, mean_scale, clamped) = if precision > 0.0 {
        let v = 1.0 / precision;
        if (VAR_FLOOR..=VAR_CAP).contains(&v) {
            (v, v, false)
        } else {
            let clamp = v.clamp(VAR_FLOOR, VAR_CAP);
            (clamp, clamp.min(v), true)
        }
    } else {
        (VAR_FLOOR, VAR_FLOOR, true)
    };
    let mean = (&num.mean / num.var - &den.mean / den.var) * mean_scale;
    (GaussMsg { mean, var }, clamped)
}

/// Starting message: zero mean, unit variance.
pub fn ep_init(dims: &crate::waveform::Dims) -> GaussMsg {
    GaussMsg { mean: DVector::zeros(dims.channel_len()), var: 1.0 }
}

/// What the linear module returns: the posterior under the stacked linear
/// model and the extrinsic message toward the denoiser.
#[derive(Debug, Clone)]
pub struct EpLinearOut {
    pub posterior: GaussMsg,
    pub extrinsic: GaussMsg,
    /// The extrinsic variance was clamped (prior at least as tight as the
    /// posterior, which only happens with degenerate pilots).
    pub clamped: bool,
}

/// Linear Gaussian module.
///
/// Posterior covariance `(a M^T M + b I)^{-1}` and mean `Sigma (a M^T y +
/// b prior.mean)` with `a` the real-noise precision and `b` the prior
/// precision, computed through the block structure: per subcarrier and
/// waveguide row the complex system is `C = a G + b I_K`, one Cholesky for
/// the whole call. The scalar posterior variance is the trace average over
/// the full real dimension `2MKL`.
pub fn ep_linear(prior: &GaussMsg, stack: &RealStack) -> Result<EpLinearOut> {
    if !(prior.var > 0.0) {
        return Err(JcelError::Parameter(format!("prior variance {} must be > 0", prior.var)));
    }
    let dims = stack.operator.dims;
    if prior.mean.len() != dims.channel_len() {
        return Err(JcelError::ShapeMismatch(format!(
            "prior mean length {} vs stacked channel length {}",
            prior.mean.len(),
            dims.channel_len()
        )));
    }
    // The physical noise precision must not be floored like a division
    // result: realistic noise powers sit far below var_floor, and flooring
    // here silently halves (or worse) the precision, which miscalibrates
    // every variance downstream of this module. The epsilon below only keeps
    // the exact-zero (noiseless) limit finite.
    if stack.noise_var_real < 0.0 {
        return Err(JcelError::Parameter(format!(
            "real noise variance {} must be >= 0",
            stack.noise_var_real
        )));
    }
    let a = 1.0 / stack.noise_var_real.max(1e-100);
    let b = 1.0 / prior.var;
    let k = dims.users;

    let c = stack.operator.gram() * Complex64::from(a)
        + DMatrix::<Complex64>::identity(k, k) * Complex64::from(b);
    let chol = c
        .cholesky()
        .ok_or_else(|| JcelError::Linalg("posterior precision not positive definite".into()))?;
    let c_inv = chol.inverse();
    let sigma_q = c_inv.diagonal().iter().map(|d| d.re).sum::<f64>() / k as f64;

    // rhs = a M^T y + b prior.mean, then one K x K solve per (l, m) row:
    // the complex row solve is mu_row = C^{-1} rhs_row, i.e. per subcarrier
    // MU[l] = RHS[l] * transpose(C^{-1}) (C is Hermitian).
    let rhs_real = stack.operator.adjoint(&stack.y) * a + &prior.mean * b;
    let rhs_blocks = unstack_channel_tensor(&rhs_real, &dims);
    let c_inv_t = c_inv.transpose();
    let mu_blocks: Vec<DMatrix<Complex64>> = rhs_blocks.iter().map(|r| r * &c_inv_t).collect();
    let mu = crate::waveform::stack_channel(&mu_blocks, &dims);

    let posterior = GaussMsg { mean: mu, var: sigma_q };
    let (extrinsic, clamped) = gaussian_divide(&posterior, prior);
    Ok(EpLinearOut { posterior, extrinsic, clamped })
}

/// Convex blend of two messages, `gamma` toward the new one.
pub fn ep_damp(new: &GaussMsg, old: &GaussMsg, gamma: f64) -> Result<GaussMsg> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(JcelError::Parameter(format!("damping factor {gamma} outside (0, 1]")));
    }
    if new.mean.len() != old.mean.len() {
        return Err(JcelError::ShapeMismatch("damped messages differ in length".into()));
    }
    Ok(GaussMsg {
        mean: &new.mean * gamma + &old.mean * (1.0 - gamma),
        var: gamma * new.var + (1.0 - gamma) * old.var,
    })
}

/// Divides the denoised message by the extrinsic input to form the next
/// prior. Flags (and floors) the division when the denoiser added no
/// information.
pub fn ep_combine(denoised: &GaussMsg, extrinsic_in: &GaussMsg) -> (GaussMsg, bool) {
    gaussian_divide(denoised, extrinsic_in)
}

// ---------------------------------------------------------------------------
// Full JCEL run
// ---------------------------------------------------------------------------

/// What the receiver knows a priori: anchor geometry with guided delays, the
/// user prior region, and the numerology. No user positions.
#[derive(Debug, Clone)]
pub struct ScenePrior {
    pub anchors: Vec<(PaAnchor, f64)>,
    pub region: Region,
    pub ofdm: OfdmParams,
}

impl ScenePrior {
    pub fn from_scene(scene: &Scene) -> Self {
        ScenePrior {
            anchors: scene.anchor_table(),
            region: scene.region,
            ofdm: scene.ofdm,
        }
    }
}

/// Which delay extractor the denoiser uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Extractor {
    Omp,
    Bpvi,
}

impl std::str::FromStr for Extractor {
    type Err = JcelError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "omp" => Ok(Extractor::Omp),
            "bpvi" => Ok(Extractor::Bpvi),
            other => Err(JcelError::Config(format!("unknown extractor '{other}'"))),
        }
    }
}

/// Knobs for [`jcel_run`].
#[derive(Debug, Clone)]
pub struct JcelOptions {
    pub extractor: Extractor,
    /// Fuse delays into positions and rebuild through geometry; off rebuilds
    /// straight from the extracted delays.
    pub localize: bool,
    pub max_outer: usize,
    /// Early stop on relative change of the posterior mean.
    pub tol_outer: f64,
    pub damping: f64,
    /// Dictionary size for the matching-pursuit extractor.
    pub omp_grid: usize,
    pub newton: NewtonOptions,
    /// Ground-truth stacked channel; enables the NMSE column of the trace.
    pub truth: Option<DVector<f64>>,
}

impl Default for JcelOptions {
    fn default() -> Self {
        JcelOptions {
            extractor: Extractor::Bpvi,
            localize: true,
            max_outer: 20,
            tol_outer: 1e-5,
            damping: 0.1,
            omp_grid: 1000,
            newton: NewtonOptions::default(),
            truth: None,
        }
    }
}

/// One row of the per-iteration trace.
#[derive(Debug, Clone, Copy)]
pub struct TraceRow {
    pub iteration: usize,
    /// Channel NMSE of the posterior mean against the supplied truth, dB.
    pub nmse_db: Option<f64>,
    pub mean_extrinsic_var: f64,
    /// Clamp/fallback events inside this iteration.
    pub clamps: usize,
}

/// Event counters for one run.
#[derive(Debug, Clone, Copy, Default)]
pub struct JcelFlags {
    pub extrinsic_clamps: usize,
    pub combine_clamps: usize,
    pub extractor_failures: usize,
    pub localize_failures: usize,
    /// Inner extractions that hit their sweep cap.
    pub unconverged_extractions: usize,
}

impl JcelFlags {
    pub fn total_clamps(&self) -> usize {
        self.extrinsic_clamps + self.combine_clamps
    }
}

/// Joint estimate: channel, per-pair paths, per-user positions, and the
/// iteration trace.
#[derive(Debug, Clone)]
pub struct JcelResult {
    /// Final channel estimate, one M x K matrix per subcarrier.
    pub channel: Vec<DMatrix<Complex64>>,
    /// The same estimate in stacked real form.
    pub channel_stacked: DVector<f64>,
    /// `paths[k][m]` lists the extracted paths of pair (k, m), slot order.
    pub paths: Vec<Vec<Vec<DelayEstimate>>>,
    /// Per-user position estimates; `None` when localization is off or the
    /// user never localized.
    pub positions: Vec<Option<PositionEstimate>>,
    /// Per-user element-resolved gains and position, from the last successful
    /// localization of each user; `None` under the same conditions as
    /// `positions`.
    pub rebuilds: Vec<Option<UserRebuild>>,
    pub trace: Vec<TraceRow>,
    pub iterations: usize,
    pub converged: bool,
    pub flags: JcelFlags,
}

/// Normalized mean squared error in dB, floored at the -300 dB sentinel.
pub fn nmse_db(estimate: &DVector<f64>, truth: &DVector<f64>) -> f64 {
    let denom = truth.norm_squared();
    if denom == 0.0 {
        return 0.0;
    }
    let ratio = ((estimate - truth).norm_squared() / denom).max(1e-30);
    10.0 * ratio.log10()
}

/// Builds the per-user rebuild input from slot-ordered estimates and the
/// slot-to-element assignment.
fn user_rebuild(
    pair_paths: &[Vec<DelayEstimate>],
    assignment: &[Vec<usize>],
    est: &PositionEstimate,
    elements_per_wg: &[usize],
) -> UserRebuild {
    let mut gains: Vec<Vec<Complex64>> =
        elements_per_wg.iter().map(|&n| vec![Complex64::default(); n]).collect();
    let mut gain_vars: Vec<Vec<f64>> = elements_per_wg.iter().map(|&n| vec![0.0; n]).collect();
    for (m, slots) in assignment.iter().enumerate() {
        for (slot, &element) in slots.iter().enumerate() {
            gains[m][element] = pair_paths[m][slot].gain;
            gain_vars[m][element] = pair_paths[m][slot].gain_var;
        }
    }
    let pos_cov = est.info.try_inverse().unwrap_or_else(Matrix2::zeros);
    UserRebuild { gains, gain_vars, x: est.x, y: est.y, pos_cov }
}

/// Least-squares gain refit of one (user, waveguide) pair at the delays the
/// fused position implies.
///
/// The per-pair extraction estimates gains jointly with its own delays, and
/// on closely spaced paths those two errors are strongly anticorrelated:
/// they cancel in the fitted profile but not term by term. Reusing such
/// gains at the geometry-implied delays exposes the cancelled error, so the
/// rebuilt channel would come out worse than the extraction input. Re-solving
/// the gains at the final delays keeps the rebuild consistent: its error is
/// the projection of the input noise onto the geometry-constrained model
/// plus the (separately accounted) position uncertainty. Returns per-element
/// gains and conditional LS variances, or nothing when the geometry makes
/// the tone system singular.
fn refit_pair_gains(
    profile: &DVector<Complex64>,
    var_c: f64,
    anchors: &[(PaAnchor, f64)],
    waveguide: usize,
    x: f64,
    y: f64,
    span: f64,
) -> Option<(Vec<(usize, Complex64)>, Vec<(usize, f64)>)> {
    let pairs: Vec<(usize, f64)> = anchors
        .iter()
        .filter(|(a, _)| a.waveguide == waveguide)
        .map(|(a, guided)| (a.element, predict_delay(a.position, *guided, x, y)))
        .collect();
    let n = pairs.len();
    if n == 0 {
        return None;
    }
    let l = profile.len();
    let s = DMatrix::<Complex64>::from_fn(l, n, |i, j| {
        let theta = -2.0 * std::f64::consts::PI * pairs[j].1 / span;
        Complex64::from_polar(1.0, theta * i as f64)
    });
    let gram = s.adjoint() * &s;
    let gram_inv = gram.clone().try_inverse()?;
    let z = gram.lu().solve(&(s.adjoint() * profile))?;
    let gains = pairs.iter().zip(z.iter()).map(|(&(e, _), &g)| (e, g)).collect();
    let vars = pairs
        .iter()
        .enumerate()
        .map(|(j, &(e, _))| (e, (var_c * gram_inv[(j, j)].re).max(VAR_FLOOR)))
        .collect();
    Some((gains, vars))
}

/// Runs the full joint estimation loop on one observation.
///
/// Per iteration: linear module, damped extrinsic, per-pair delay extraction,
/// optional localization, channel rebuild, message combine. Extractor or
/// localizer failures fall back to the previous iteration's result for that
/// pair/user (or leave the prior untouched when there is nothing to fall
/// back to); the run itself never aborts once the shapes have validated.
pub fn jcel_run(
    obs: &crate::waveform::FreqObservation,
    scene_prior: &ScenePrior,
    options: &JcelOptions,
) -> Result<JcelResult> {
    let dims = obs.dims;
    let (num_wg, num_users) = (dims.waveguides, dims.users);
    if scene_prior.ofdm.num_subcarriers != dims.subcarriers {
        return Err(JcelError::ShapeMismatch(format!(
            "prior numerology has {} subcarriers, observation has {}",
            scene_prior.ofdm.num_subcarriers, dims.subcarriers
        )));
    }
    let mut elements_per_wg = vec![0usize; num_wg];
    for (anchor, _) in &scene_prior.anchors {
        if anchor.waveguide >= num_wg {
            return Err(JcelError::ShapeMismatch(format!(
                "anchor on waveguide {} but observation has {}",
                anchor.waveguide, num_wg
            )));
        }
        elements_per_wg[anchor.waveguide] += 1;
    }
    if elements_per_wg.iter().any(|&n| n == 0) {
        return Err(JcelError::ShapeMismatch("a waveguide has no anchors".into()));
    }

    let stack = stack_real(obs);
    let period = scene_prior.ofdm.sample_period();
    let dict = match options.extractor {
        Extractor::Omp => Some(build_dictionary(
            dims.subcarriers,
            scene_prior.ofdm.cp_len,
            options.omp_grid,
            period,
        )?),
        Extractor::Bpvi => None,
    };
    let bpvi_opts = BpviOptions::new(scene_prior.ofdm.cp_len, period);

    let mut prior = ep_init(&dims);
    let mut prev_ext: Option<GaussMsg> = None;
    let mut flags = JcelFlags::default();
    let mut trace = Vec::new();
    let mut positions: Vec<Option<PositionEstimate>> = vec![None; num_users];
    let mut last_paths: Vec<Vec<Option<Vec<DelayEstimate>>>> =
        vec![vec![None; num_wg]; num_users];
    let mut last_rebuilds: Vec<Option<UserRebuild>> = vec![None; num_users];
    let mut h_prev: Option<DVector<f64>> = None;
    let mut channel_stacked = prior.mean.clone();
    let mut converged = false;
    let mut iterations = 0;

    for it in 1..=options.max_outer.max(1) {
        iterations = it;
        let mut iter_clamps = 0usize;

        let lin = ep_linear(&prior, &stack)?;
        flags.extrinsic_clamps += lin.clamped as usize;
        iter_clamps += lin.clamped as usize;
        let ext = match &prev_ext {
            None => lin.extrinsic.clone(),
            Some(previous) => ep_damp(&lin.extrinsic, previous, options.damping)?,
        };
        prev_ext = Some(ext.clone());

        // Per-pair delay extraction off the extrinsic message.
        let mut pair_paths: Vec<Vec<Vec<DelayEstimate>>> =
            vec![vec![Vec::new(); num_wg]; num_users];
        let mut pair_profiles: Vec<Vec<DVector<Complex64>>> =
            vec![vec![DVector::zeros(0); num_wg]; num_users];
        let mut extraction_complete = true;
        for k in 0..num_users {
            for m in 0..num_wg {
                let (profile, var_c) = unstack_channel(&ext.mean, &dims, k, m, ext.var)?;
                pair_profiles[k][m] = profile.clone();
                let extracted: Result<Vec<DelayEstimate>> = match options.extractor {
                    Extractor::Omp => {
                        omp_extract(&profile, dict.as_ref().unwrap(), elements_per_wg[m], false)
                            .map(|r| r.estimates)
                    }
                    Extractor::Bpvi => {
                        bpvi_extract(&profile, var_c, elements_per_wg[m], &bpvi_opts)
                            .map(|out| {
                                flags.unconverged_extractions += out.flags.unconverged as usize;
                                iter_clamps += out.flags.variance_clamps;
                                out.estimates
                            })
                    }
                };
                match extracted {
                    Ok(list) => {
                        last_paths[k][m] = Some(list.clone());
                        pair_paths[k][m] = list;
                    }
                    Err(_) => {
                        flags.extractor_failures += 1;
                        match &last_paths[k][m] {
                            Some(previous) => pair_paths[k][m] = previous.clone(),
                            None => extraction_complete = false,
                        }
                    }
                }
            }
        }

        // Denoise: geometry-fused rebuild, or plain resynthesis of the
        // extracted paths when localization is off.
        let denoised: Option<(DVector<f64>, f64)> = if !extraction_complete {
            None
        } else if options.localize {
            let mut rebuilds: Vec<Option<UserRebuild>> = vec![None; num_users];
            for k in 0..num_users {
                let init = positions[k].as_ref().map(|p| (p.x, p.y));
                match localize_newton(
                    &pair_paths[k],
                    &scene_prior.anchors,
                    &scene_prior.region,
                    period,
                    init,
                    &options.newton,
                ) {
                    Ok((est, assignment)) => {
                        let mut rebuild =
                            user_rebuild(&pair_paths[k], &assignment, &est, &elements_per_wg);
                        // Swap in geometry-consistent gains wherever the
                        // refit is well posed; the assignment-based gains
                        // stay as the fallback for degenerate pairs.
                        for m in 0..num_wg {
                            if let Some((gains, vars)) = refit_pair_gains(
                                &pair_profiles[k][m],
                                2.0 * ext.var,
                                &scene_prior.anchors,
                                m,
                                est.x,
                                est.y,
                                scene_prior.ofdm.symbol_span(),
                            ) {
                                for (e, g) in gains {
                                    rebuild.gains[m][e] = g;
                                }
                                for (e, v) in vars {
                                    rebuild.gain_vars[m][e] = v;
                                }
                            }
                        }
                        positions[k] = Some(est);
                        last_rebuilds[k] = Some(rebuild.clone());
                        rebuilds[k] = Some(rebuild);
                    }
                    Err(_) => {
                        flags.localize_failures += 1;
                        rebuilds[k] = last_rebuilds[k].clone();
                    }
                }
            }
            if rebuilds.iter().all(Option::is_some) {
                let users: Vec<UserRebuild> = rebuilds.into_iter().map(Option::unwrap).collect();
                match delta_method_channel(&users, &scene_prior.anchors, &scene_prior.ofdm, &dims) {
                    Ok(pair) => Some(pair),
                    Err(_) => {
                        flags.localize_failures += 1;
                        None
                    }
                }
            } else {
                None
            }
        } else {
            let flat: Vec<((usize, usize), Vec<DelayEstimate>)> = (0..num_users)
                .flat_map(|k| (0..num_wg).map(move |m| (k, m)))
                .map(|(k, m)| ((k, m), pair_paths[k][m].clone()))
                .collect();
            match rebuild_from_delays(&flat, &scene_prior.ofdm, &dims) {
                Ok(pair) => Some(pair),
                Err(_) => {
                    flags.extractor_failures += 1;
                    None
                }
            }
        };

        // Combine, or keep the previous prior when this iteration produced
        // nothing usable.
        let mut applied = false;
        if let Some((den_mean, den_var)) = denoised {
            let den_msg = GaussMsg { mean: den_mean, var: den_var.max(VAR_FLOOR) };
            let (combined, clamped) = ep_combine(&den_msg, &ext);
            if clamped {
                flags.combine_clamps += 1;
                iter_clamps += 1;
            } else {
                prior = combined;
                applied = true;
            }
        }

        let mu = lin.posterior.mean;
        let rel_change = match &h_prev {
            Some(previous) if previous.norm() > 0.0 => (&mu - previous).norm() / previous.norm(),
            _ => f64::INFINITY,
        };
        trace.push(TraceRow {
            iteration: it,
            nmse_db: options.truth.as_ref().map(|t| nmse_db(&mu, t)),
            mean_extrinsic_var: ext.var,
            clamps: iter_clamps,
        });
        h_prev = Some(mu.clone());
        channel_stacked = mu;
        if rel_change < options.tol_outer {
            converged = applied;
            break;
        }
    }

    let paths: Vec<Vec<Vec<DelayEstimate>>> = last_paths
        .into_iter()
        .map(|row| row.into_iter().map(|p| p.unwrap_or_default()).collect())
        .collect();
    Ok(JcelResult {
        channel: unstack_channel_tensor(&channel_stacked, &dims),
        channel_stacked,
        paths,
        positions,
        rebuilds: last_rebuilds,
        trace,
        iterations,
        converged,
        flags,
    })
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{User, Waveguide};
    use crate::waveform::{pilot_matrix, simulate_rx, stack_channel, Dims, StackedPilotOp};
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vec(n: usize, rng: &mut impl Rng) -> DVector<f64> {
        DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn gaussian_divide_matches_scalar_algebra() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let num = GaussMsg { mean: random_vec(6, &mut rng), var: rng.gen_range(0.05..1.0) };
            let den =
                GaussMsg { mean: random_vec(6, &mut rng), var: num.var + rng.gen_range(0.01..2.0) };
            let (q, clamped) = gaussian_divide(&num, &den);
            assert!(!clamped);
            // Multiplying back must recover the numerator.
            assert!((1.0 / q.var + 1.0 / den.var - 1.0 / num.var).abs() < 1e-9);
            let back = (&q.mean / q.var + &den.mean / den.var) * num.var;
            assert!((back - &num.mean).norm() < 1e-9);
        }
        // No information: clamped to the floor.
        let m = GaussMsg { mean: DVector::zeros(3), var: 1.0 };
        let (q, clamped) = gaussian_divide(&m, &m);
        assert!(clamped);
        assert_eq!(q.var, VAR_FLOOR);
    }

    #[test]
    fn init_message_is_standard_normal_of_the_right_length() {
        let dims = Dims { waveguides: 2, users: 3, frames: 4, subcarriers: 5 };
        let msg = ep_init(&dims);
        assert_eq!(msg.mean.len(), 2 * 2 * 3 * 5);
        assert_eq!(msg.var, 1.0);
        assert!(msg.mean.iter().all(|&v| v == 0.0));
        assert_eq!(ep_init(&dims), ep_init(&dims));
    }

    #[test]
    fn linear_module_identity_operator_halves_the_observation() {
        // K = P = 1 with unit pilot makes the stacked operator the identity.
        let dims = Dims { waveguides: 2, users: 1, frames: 1, subcarriers: 3 };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = random_vec(dims.obs_len(), &mut rng);
        let stack = RealStack {
            y: y.clone(),
            operator: StackedPilotOp {
                pilots: DMatrix::from_element(1, 1, Complex64::new(1.0, 0.0)),
                dims,
            },
            noise_var_real: 1.0,
        };
        let prior = ep_init(&dims);
        let out = ep_linear(&prior, &stack).unwrap();
        assert!((&out.posterior.mean - &y / 2.0).norm() < 1e-12);
        assert!((out.posterior.var - 0.5).abs() < 1e-12);
        // Extrinsic strips the prior: pure likelihood, i.e. the observation.
        assert!(!out.clamped);
        assert!((out.extrinsic.var - 1.0).abs() < 1e-12);
        assert!((&out.extrinsic.mean - &y).norm() < 1e-12);
    }

    #[test]
    fn linear_module_noiseless_limit_recovers_the_exact_solution() {
        let dims = Dims { waveguides: 1, users: 2, frames: 2, subcarriers: 2 };
        let pilots = DMatrix::from_row_slice(
            2,
            2,
            &[
                Complex64::new(1.0, 0.3),
                Complex64::new(1.0, -0.2),
                Complex64::new(0.4, -1.0),
                Complex64::new(-0.9, 0.1),
            ],
        );
        let op = StackedPilotOp { pilots, dims };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = random_vec(dims.channel_len(), &mut rng);
        let stack = RealStack { y: op.apply(&h), operator: op, noise_var_real: 0.0 };
        let out = ep_linear(&ep_init(&dims), &stack).unwrap();
        assert!((&out.posterior.mean - &h).norm() < 1e-6 * h.norm());
    }

    #[test]
    fn linear_module_matches_dense_solve() {
        let dims = Dims { waveguides: 1, users: 2, frames: 3, subcarriers: 2 };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pilots = DMatrix::from_fn(2, 3, |_, _| {
            Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        });
        let op = StackedPilotOp { pilots, dims };
        let y = random_vec(dims.obs_len(), &mut rng);
        let prior = GaussMsg { mean: random_vec(dims.channel_len(), &mut rng), var: 0.7 };
        let noise_var_real = 0.3;
        let stack = RealStack { y: y.clone(), operator: op.clone(), noise_var_real };

        let out = ep_linear(&prior, &stack).unwrap();

        let dense = op.to_dense();
        let n = dims.channel_len();
        let a = 1.0 / noise_var_real;
        let b = 1.0 / prior.var;
        let sigma = (dense.transpose() * &dense * a + DMatrix::<f64>::identity(n, n) * b)
            .try_inverse()
            .unwrap();
        let mu = &sigma * (dense.transpose() * &y * a + &prior.mean * b);
        let sigma_q = sigma.trace() / n as f64;

        assert!((&out.posterior.mean - &mu).norm() < 1e-10);
        assert!((out.posterior.var - sigma_q).abs() < 1e-10);
        // Extrinsic consistency with the division oracle.
        let (want_ext, clamped) = gaussian_divide(&out.posterior, &prior);
        assert!(!clamped);
        assert!((&out.extrinsic.mean - &want_ext.mean).norm() < 1e-12);
        // Posterior is never less certain than the prior.
        assert!(out.posterior.var <= prior.var + 1e-15);
    }

    #[test]
    fn block_solve_equals_dense_solve_across_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for (m, k, p, l) in [(1, 1, 1, 1), (2, 2, 2, 2), (1, 3, 4, 2), (2, 2, 3, 4), (4, 2, 2, 2)]
        {
            let dims = Dims { waveguides: m, users: k, frames: p, subcarriers: l };
            assert!(dims.channel_len() <= 64);
            let pilots = DMatrix::from_fn(k, p, |_, _| {
                Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
            });
            let op = StackedPilotOp { pilots, dims };
            let y = random_vec(dims.obs_len(), &mut rng);
            let prior = GaussMsg { mean: random_vec(dims.channel_len(), &mut rng), var: 1.3 };
            let stack = RealStack { y: y.clone(), operator: op.clone(), noise_var_real: 0.2 };
            let out = ep_linear(&prior, &stack).unwrap();

            let dense = op.to_dense();
            let n = dims.channel_len();
            let sigma = (dense.transpose() * &dense * 5.0
                + DMatrix::<f64>::identity(n, n) * (1.0 / 1.3))
                .try_inverse()
                .unwrap();
            let mu = &sigma * (dense.transpose() * &y * 5.0 + &prior.mean * (1.0 / 1.3));
            assert!(
                (&out.posterior.mean - &mu).norm() < 1e-10 * mu.norm().max(1.0),
                "dense mismatch at ({m},{k},{p},{l})"
            );
            assert!((out.posterior.var - sigma.trace() / n as f64).abs() < 1e-10);
        }
    }

    #[test]
    fn extrinsic_ignores_the_prior_mean_when_the_prior_is_diffuse() {
        let dims = Dims { waveguides: 1, users: 2, frames: 3, subcarriers: 2 };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pilots = DMatrix::from_fn(2, 3, |_, _| {
            Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        });
        let op = StackedPilotOp { pilots, dims };
        let y = random_vec(dims.obs_len(), &mut rng);
        let stack = RealStack { y, operator: op, noise_var_real: 0.1 };
        let diffuse = 1e12;
        let zero_prior = GaussMsg { mean: DVector::zeros(dims.channel_len()), var: diffuse };
        let shifted_prior =
            GaussMsg { mean: random_vec(dims.channel_len(), &mut rng) * 5.0, var: diffuse };
        let a = ep_linear(&zero_prior, &stack).unwrap().extrinsic;
        let b = ep_linear(&shifted_prior, &stack).unwrap().extrinsic;
        assert!((&a.mean - &b.mean).norm() < 1e-6 * a.mean.norm());
    }

    #[test]
    fn damping_blends_and_validates() {
        let a = GaussMsg { mean: DVector::from_element(3, 0.0), var: 1.0 };
        let b = GaussMsg { mean: DVector::from_element(3, 2.0), var: 3.0 };
        let half = ep_damp(&b, &a, 0.5).unwrap();
        assert!((half.mean[0] - 1.0).abs() < 1e-15);
        assert!((half.var - 2.0).abs() < 1e-15);
        assert_eq!(ep_damp(&b, &a, 1.0).unwrap(), b);
        let same = ep_damp(&a, &a, 0.1).unwrap();
        assert_eq!(same, a);
        assert!(ep_damp(&a, &b, 0.0).is_err());
        assert!(ep_damp(&a, &b, 1.5).is_err());
    }

    #[test]
    fn combine_follows_two_gaussian_division_algebra() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ext = GaussMsg { mean: random_vec(4, &mut rng), var: 0.9 };
        let den = GaussMsg { mean: random_vec(4, &mut rng), var: 0.9 / 2.0 };
        let (next, clamped) = ep_combine(&den, &ext);
        assert!(!clamped);
        // sigma_out = sigma_in / sqrt(2) leaves exactly sigma_in^2.
        assert!((next.var - 0.9).abs() < 1e-12);
        let want = (&den.mean * 2.0 - &ext.mean) * 0.9 / 0.9;
        assert!((&next.mean - &want).norm() < 1e-12);

        // Special case from the same algebra: zero extrinsic mean doubles
        // the denoised mean.
        let ext0 = GaussMsg { mean: DVector::zeros(4), var: 0.9 };
        let (n0, _) = ep_combine(&den, &ext0);
        assert!((&n0.mean - &den.mean * 2.0).norm() < 1e-12);

        // Identity pass-through denoiser carries no information.
        let (_, clamped) = ep_combine(&ext, &ext);
        assert!(clamped);
    }

    #[test]
    fn damped_message_chain_stays_bounded() {
        // Random denoiser outputs of bounded norm must not excite the damped
        // loop beyond a small multiple of the plain least-squares solution.
        let dims = Dims { waveguides: 1, users: 2, frames: 3, subcarriers: 2 };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pilots = DMatrix::from_fn(2, 3, |_, _| {
            Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        });
        let op = StackedPilotOp { pilots, dims };
        let h = random_vec(dims.channel_len(), &mut rng);
        let stack = RealStack { y: op.apply(&h), operator: op.clone(), noise_var_real: 0.05 };

        let dense = op.to_dense();
        let ls = (dense.transpose() * &dense)
            .try_inverse()
            .unwrap()
            * (dense.transpose() * &stack.y);
        let bound = 10.0 * ls.norm();

        let mut prior = ep_init(&dims);
        let mut prev_ext: Option<GaussMsg> = None;
        for _ in 0..30 {
            let out = ep_linear(&prior, &stack).unwrap();
            let ext = match &prev_ext {
                None => out.extrinsic.clone(),
                Some(p) => ep_damp(&out.extrinsic, p, 0.1).unwrap(),
            };
            assert!(ext.mean.norm() <= bound, "extrinsic blew past the LS scale");
            assert!(out.posterior.mean.norm() <= bound);
            prev_ext = Some(ext.clone());
            // Denoiser stand-in: jitter around the LS solution.
            let den = GaussMsg {
                mean: &ls + random_vec(dims.channel_len(), &mut rng) * 0.05,
                var: rng.gen_range(0.01..0.5),
            };
            let (combined, clamped) = ep_combine(&den, &ext);
            if !clamped {
                prior = combined;
            }
        }
    }

    // -- full-loop tests ----------------------------------------------------

    /// Single waveguide, one element at the origin plane, one user placed so
    /// the composite delay lands exactly on the matching-pursuit grid.
    fn on_grid_scene() -> Scene {
        let ofdm = OfdmParams {
            carrier_freq: 28e9,
            bandwidth: 100e6,
            num_subcarriers: 32,
            cp_len: 16,
        };
        // Grid step is cp_span / 1000 = 0.16 ns; bin 80 puts the composite
        // delay at 12.8 ns. A single-element guide has zero guided travel.
        let delay = 80.0 * ofdm.cp_span() / 1000.0;
        let dist = crate::SPEED_OF_LIGHT * delay;
        Scene {
            waveguides: vec![Waveguide::with_default_sink(
                vec![Vector3::new(0.0, 0.0, 0.0)],
                1.4,
                0.0,
            )],
            users: vec![User { position: Vector3::new(dist, 0.0, 0.0), tx_power: 1.0 }],
            ofdm,
            region: Region { x_min: -5.0, x_max: 5.0, y_min: -5.0, y_max: 5.0 },
            guided_delay_model: Default::default(),
            guided_phase: false,
        }
    }

    #[test]
    fn noiseless_on_grid_run_reaches_machine_level_nmse_fast() {
        let scene = on_grid_scene();
        let channel = scene.channel_tensor().unwrap();
        let pilots = pilot_matrix(1, 2, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let obs = simulate_rx(&channel, &pilots, 0.0, &mut rng).unwrap();
        let truth = stack_channel(&channel, &obs.dims);

        let options = JcelOptions {
            extractor: Extractor::Omp,
            localize: false,
            truth: Some(truth.clone()),
            ..JcelOptions::default()
        };
        let prior = ScenePrior::from_scene(&scene);
        let result = jcel_run(&obs, &prior, &options).unwrap();

        let early = result.trace.iter().take(2).filter_map(|r| r.nmse_db).fold(0.0, f64::min);
        assert!(early < -100.0, "NMSE after two iterations: {early} dB");

        // Fixed-point consistency: the estimate reproduces the observation.
        let stack = stack_real(&obs);
        let replay = stack.operator.apply(&result.channel_stacked);
        assert!((replay - &stack.y).norm() / stack.y.norm() < 1e-6);
    }

    /// Two-waveguide scene small enough for fast loop tests.
    fn small_joint_scene() -> Scene {
        let ofdm = OfdmParams {
            carrier_freq: 28e9,
            bandwidth: 100e6,
            num_subcarriers: 32,
            cp_len: 16,
        };
        let z = 3.0;
        Scene {
            waveguides: vec![
                Waveguide {
                    sink: Vector3::new(-10.0, -10.0, z),
                    elements: vec![
                        Vector3::new(-10.0, -5.0, z),
                        Vector3::new(-10.0, 0.0, z),
                        Vector3::new(-10.0, 5.0, z),
                    ],
                    refractive_index: 1.4,
                    loss_constant: 0.0,
                },
                Waveguide {
                    sink: Vector3::new(-10.0, 10.0, z),
                    elements: vec![
                        Vector3::new(-5.0, 10.0, z),
                        Vector3::new(0.0, 10.0, z),
                        Vector3::new(5.0, 10.0, z),
                    ],
                    refractive_index: 1.4,
                    loss_constant: 0.0,
                },
            ],
            users: vec![
                User { position: Vector3::new(2.85, 1.0, 0.0), tx_power: 1.0 },
                User { position: Vector3::new(-2.0, 2.3, 0.0), tx_power: 1.0 },
            ],
            ofdm,
            region: Region { x_min: -5.0, x_max: 5.0, y_min: -5.0, y_max: 5.0 },
            guided_delay_model: Default::default(),
            guided_phase: false,
        }
    }

    #[test]
    fn both_extractors_return_complete_results_on_the_same_observation() {
        let scene = small_joint_scene();
        let channel = scene.channel_tensor().unwrap();
        let pilots = pilot_matrix(2, 4, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        // Channel entries are ~1e-4, so this keeps the SNR comfortably high.
        let obs = simulate_rx(&channel, &pilots, 1e-12, &mut rng).unwrap();
        let truth = stack_channel(&channel, &obs.dims);
        let prior = ScenePrior::from_scene(&scene);

        for extractor in [Extractor::Omp, Extractor::Bpvi] {
            let options = JcelOptions {
                extractor,
                localize: false,
                truth: Some(truth.clone()),
                ..JcelOptions::default()
            };
            let result = jcel_run(&obs, &prior, &options).unwrap();
            assert_eq!(result.channel.len(), 32);
            assert_eq!(result.paths.len(), 2);
            assert!(result.paths.iter().flatten().all(|p| !p.is_empty()));
            assert!(!result.trace.is_empty());
            assert!(result.iterations <= 20);
            assert!(result.channel_stacked.iter().all(|v| v.is_finite()));
            let last = result.trace.last().unwrap().nmse_db.unwrap();
            assert!(last < -10.0, "{extractor:?} finished at {last} dB");
        }
    }

    #[test]
    fn localized_run_places_users_inside_the_region() {
        let scene = small_joint_scene();
        let channel = scene.channel_tensor().unwrap();
        let pilots = pilot_matrix(2, 4, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let obs = simulate_rx(&channel, &pilots, 1e-13, &mut rng).unwrap();
        let truth = stack_channel(&channel, &obs.dims);
        let prior = ScenePrior::from_scene(&scene);
        let options = JcelOptions {
            extractor: Extractor::Bpvi,
            localize: true,
            truth: Some(truth.clone()),
            ..JcelOptions::default()
        };
        let result = jcel_run(&obs, &prior, &options).unwrap();
        for (k, pos) in result.positions.iter().enumerate() {
            let pos = pos.as_ref().unwrap_or_else(|| panic!("user {k} never localized"));
            assert!(pos.x.is_finite() && pos.y.is_finite());
            assert!(
                scene.region.contains(pos.x, pos.y),
                "user {k} at ({}, {})",
                pos.x,
                pos.y
            );
        }
        let truth_positions = [(2.85, 1.0), (-2.0, 2.3)];
        for (pos, (tx, ty)) in result.positions.iter().zip(truth_positions) {
            let p = pos.as_ref().unwrap();
            let err = ((p.x - tx).powi(2) + (p.y - ty).powi(2)).sqrt();
            assert!(err < 0.5, "position error {err} m");
        }
    }

    // Scratch diagnostic: per-user position error budget of the fusion stage
    // on the canned scene, comparing the full-covariance bound against the
    // diagonal-weight fusion actually used. Run with --ignored --nocapture.
    #[test]
    #[ignore]
    fn fusion_probe() {
        use crate::crlb::crlb_bounds;
        use crate::harness::{dbm_to_watts, scheme_scene};
        use crate::localize::linearize_delay;
        use nalgebra::Matrix2;

        let ofdm = OfdmParams {
            carrier_freq: 28e9,
            bandwidth: 100e6,
            num_subcarriers: 32,
            cp_len: 16,
        };
        let tx_power = dbm_to_watts(8.0);
        let noise_var = 1e-12;
        let scene = scheme_scene(1, ofdm, tx_power, 0.0).unwrap();
        let dims = Dims {
            waveguides: scene.waveguides.len(),
            users: scene.num_users(),
            frames: 8,
            subcarriers: ofdm.num_subcarriers,
        };
        let pilots = pilot_matrix(dims.users, dims.frames, tx_power).unwrap();
        let report = crlb_bounds(&scene, &pilots, noise_var).unwrap();
        {
            // Spectrum of the full information matrix and the effect of the
            // pseudoinverse truncation on the position blocks.
            let svd = report.fim.clone().svd(false, false);
            let s_max = svd.singular_values.max();
            let s_min = svd.singular_values.min();
            let tol = s_max * 1e-10;
            let cut = svd.singular_values.iter().filter(|&&s| s <= tol).count();
            println!(
                "fim spectrum: s_max {s_max:.3e} s_min {s_min:.3e} tol {tol:.3e} truncated {cut}/{} rank_deficient {}",
                svd.singular_values.len(),
                report.rank_deficient
            );
            if let Some(exact) = report.fim.clone().try_inverse() {
                let layout = crate::crlb::FimLayout::new(&scene);
                for k in 0..scene.num_users() {
                    let (ix, iy) = (layout.pos_x(k), layout.pos_y(k));
                    let tr = exact[(ix, ix)] + exact[(iy, iy)];
                    println!(
                        "u{k}: exact-inverse pos rms {:.4} m vs truncated {:.4} m",
                        tr.sqrt(),
                        report.position_cov[k].trace().sqrt()
                    );
                }
            } else {
                println!("exact inverse failed (singular to LU)");
            }
        }
        let anchors = scene.anchor_table();
        let paths = scene.composite_paths().unwrap();
        let span = ofdm.symbol_span();
        // Extraction-stage complex noise on the it-1 extrinsic profile.
        let var_c = 2.0 * 1.14e-11;

        for (k, user) in scene.users.iter().enumerate() {
            // Joint single-pair FIM over (theta_1..n, Re z, Im z) at truth.
            let mut pk: Vec<&crate::scene::PathParams> =
                paths.iter().filter(|p| p.user == k).collect();
            pk.sort_by_key(|p| p.element);
            let n = pk.len();
            let l = dims.subcarriers;
            let mut jac = DMatrix::<Complex64>::zeros(l, 3 * n);
            for (j, p) in pk.iter().enumerate() {
                let theta = -2.0 * std::f64::consts::PI * p.delay / span;
                for i in 0..l {
                    let e = Complex64::from_polar(1.0, theta * i as f64);
                    jac[(i, j)] = p.gain * Complex64::new(0.0, i as f64) * e;
                    jac[(i, n + j)] = e;
                    jac[(i, 2 * n + j)] = Complex64::new(0.0, 1.0) * e;
                }
            }
            let fim = (jac.adjoint() * &jac).map(|c| 2.0 * c.re / var_c);
            let cov = fim.clone().try_inverse().expect("joint FIM invertible");
            // Marginal covariance of the delay estimates, seconds^2.
            let scale = span / (2.0 * std::f64::consts::PI);
            let sigma_tau = DMatrix::<f64>::from_fn(n, n, |a, b| cov[(a, b)] * scale * scale);

            // Geometry rows.
            let mut g = DMatrix::<f64>::zeros(n, 2);
            for (j, p) in pk.iter().enumerate() {
                let (anchor, guided) = anchors
                    .iter()
                    .find(|(a, _)| a.waveguide == p.waveguide && a.element == p.element)
                    .unwrap();
                let lin =
                    linearize_delay(anchor.position, *guided, user.position.x, user.position.y)
                        .unwrap();
                g[(j, 0)] = lin.a;
                g[(j, 1)] = lin.b;
            }

            // Efficient fusion: (G^T Sigma^-1 G)^-1.
            let si = sigma_tau.clone().try_inverse().unwrap();
            let eff = (g.transpose() * &si * &g).try_inverse().unwrap();
            // Diagonal-weight fusion sandwich: A^-1 (G^T W Sigma W G) A^-T,
            // A = G^T W G, W = diag(1/sigma_jj).
            let w = DMatrix::<f64>::from_fn(n, n, |a, b| {
                if a == b { 1.0 / sigma_tau[(a, a)] } else { 0.0 }
            });
            let a_mat: Matrix2<f64> = (g.transpose() * &w * &g)
                .fixed_view::<2, 2>(0, 0)
                .into_owned()
                .try_inverse()
                .unwrap();
            let meat = g.transpose() * &w * &sigma_tau * &w * &g;
            let sand = a_mat * meat.fixed_view::<2, 2>(0, 0).into_owned() * a_mat.transpose();

            // Same single-pair information reparameterized straight to
            // (x, y, gains): by the Schur identity this must equal the
            // efficient delay-chain bound.
            let mut t = DMatrix::<f64>::zeros(3 * n, 2 + 2 * n);
            let scale_inv = -2.0 * std::f64::consts::PI / span;
            for j in 0..n {
                t[(j, 0)] = g[(j, 0)] * scale_inv;
                t[(j, 1)] = g[(j, 1)] * scale_inv;
                t[(n + j, 2 + 2 * j)] = 1.0;
                t[(2 * n + j, 2 + 2 * j + 1)] = 1.0;
            }
            let fim_pos = t.transpose() * &fim * &t;
            let direct = fim_pos
                .try_inverse()
                .unwrap()
                .fixed_view::<2, 2>(0, 0)
                .into_owned();

            println!(
                "u{k}: crlb rms {:.4} m | reparam direct {:.4} m | efficient fuse {:.4} m | diagonal fuse {:.4} m | tau rms {:?} ns | corr12 {:.3}",
                report.position_cov[k].trace().sqrt(),
                direct.trace().sqrt(),
                eff.trace().sqrt(),
                sand.trace().sqrt(),
                (0..n)
                    .map(|j| (sigma_tau[(j, j)].sqrt() * 1e9 * 1000.0).round() / 1000.0)
                    .collect::<Vec<_>>(),
                sigma_tau[(0, 1)] / (sigma_tau[(0, 0)] * sigma_tau[(1, 1)]).sqrt(),
            );
        }
    }

    // Scratch diagnostic: per-iteration claim/actual calibration of every
    // message on a canned scene. Run with --ignored --nocapture.
    #[test]
    #[ignore]
    fn drift_probe() {
        use crate::harness::{dbm_to_watts, scheme_scene};
        use crate::localize::localize_newton;
        use crate::bpvi_delay::BpviOptions;

        let ofdm = OfdmParams {
            carrier_freq: 28e9,
            bandwidth: 100e6,
            num_subcarriers: 32,
            cp_len: 16,
        };
        let tx_power = dbm_to_watts(8.0);
        let noise_var = 1e-12;
        let scene = scheme_scene(1, ofdm, tx_power, 0.0).unwrap();
        let channel = scene.channel_tensor().unwrap();
        let dims = Dims {
            waveguides: scene.waveguides.len(),
            users: scene.num_users(),
            frames: 8,
            subcarriers: ofdm.num_subcarriers,
        };
        let pilots = pilot_matrix(dims.users, dims.frames, tx_power).unwrap();
        let truth = stack_channel(&channel, &dims);
        let n = truth.len() as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let obs = simulate_rx(&channel, &pilots, noise_var, &mut rng).unwrap();
        let prior_info = ScenePrior::from_scene(&scene);
        let stack = stack_real(&obs);
        let period = prior_info.ofdm.sample_period();
        let bpvi_opts = BpviOptions::new(prior_info.ofdm.cp_len, period);
        let elements_per_wg: Vec<usize> =
            scene.waveguides.iter().map(|w| w.elements.len()).collect();
        let opts = JcelOptions::default();

        let mse = |v: &DVector<f64>| (v - &truth).norm_squared() / n;
        let mut prior = ep_init(&dims);
        let mut prev_ext: Option<GaussMsg> = None;
        let mut positions: Vec<Option<PositionEstimate>> = vec![None; dims.users];
        println!(
            "{:>3} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9} {:>8} {:>8} {:>8}",
            "it", "post_c", "post_a", "ext_c", "ext_a", "den_c", "den_a", "pri_c", "pri_a",
            "pos0", "pos1", "pos2"
        );
        for it in 1..=20 {
            let lin = ep_linear(&prior, &stack).unwrap();
            let ext = match &prev_ext {
                None => lin.extrinsic.clone(),
                Some(p) => ep_damp(&lin.extrinsic, p, opts.damping).unwrap(),
            };
            prev_ext = Some(ext.clone());

            let mut pair_paths = vec![vec![Vec::new(); dims.waveguides]; dims.users];
            let mut pair_profiles = vec![vec![DVector::zeros(0); dims.waveguides]; dims.users];
            for k in 0..dims.users {
                for m in 0..dims.waveguides {
                    let (profile, var_c) =
                        unstack_channel(&ext.mean, &dims, k, m, ext.var).unwrap();
                    pair_paths[k][m] =
                        bpvi_extract(&profile, var_c, elements_per_wg[m], &bpvi_opts)
                            .unwrap()
                            .estimates;
                    pair_profiles[k][m] = profile;
                }
            }
            let mut rebuilds = Vec::new();
            let mut pos_errs = Vec::new();
            for k in 0..dims.users {
                let init = positions[k].as_ref().map(|p| (p.x, p.y));
                let (est, assignment) = localize_newton(
                    &pair_paths[k],
                    &prior_info.anchors,
                    &prior_info.region,
                    period,
                    init,
                    &opts.newton,
                )
                .unwrap();
                let u = &scene.users[k].position;
                pos_errs.push(((est.x - u.x).powi(2) + (est.y - u.y).powi(2)).sqrt());
                let mut rebuild =
                    user_rebuild(&pair_paths[k], &assignment, &est, &elements_per_wg);
                for m in 0..dims.waveguides {
                    if let Some((gains, vars)) = refit_pair_gains(
                        &pair_profiles[k][m],
                        2.0 * ext.var,
                        &prior_info.anchors,
                        m,
                        est.x,
                        est.y,
                        prior_info.ofdm.symbol_span(),
                    ) {
                        for (e, g) in gains {
                            rebuild.gains[m][e] = g;
                        }
                        for (e, v) in vars {
                            rebuild.gain_vars[m][e] = v;
                        }
                    }
                }
                rebuilds.push(rebuild);
                positions[k] = Some(est);
            }
            let (den_mean, den_var) =
                delta_method_channel(&rebuilds, &prior_info.anchors, &prior_info.ofdm, &dims)
                    .unwrap();

            // Attribution: rebuild once with truth positions, once with truth
            // gains, once with both, to split the mean error.
            let paths = scene.composite_paths().unwrap();
            let mut truth_gains: Vec<Vec<Vec<Complex64>>> = (0..dims.users)
                .map(|_| elements_per_wg.iter().map(|&n| vec![Complex64::default(); n]).collect())
                .collect();
            for p in &paths {
                truth_gains[p.user][p.waveguide][p.element] = p.gain;
            }
            let mut tp = rebuilds.clone();
            let mut tg = rebuilds.clone();
            let mut tb = rebuilds.clone();
            for k in 0..dims.users {
                tp[k].x = scene.users[k].position.x;
                tp[k].y = scene.users[k].position.y;
                tg[k].gains = truth_gains[k].clone();
                tb[k].x = scene.users[k].position.x;
                tb[k].y = scene.users[k].position.y;
                tb[k].gains = truth_gains[k].clone();
            }
            let den_tp =
                delta_method_channel(&tp, &prior_info.anchors, &prior_info.ofdm, &dims).unwrap().0;
            let den_tg =
                delta_method_channel(&tg, &prior_info.anchors, &prior_info.ofdm, &dims).unwrap().0;
            let den_tb =
                delta_method_channel(&tb, &prior_info.anchors, &prior_info.ofdm, &dims).unwrap().0;
            if it <= 3 {
                println!(
                    "    attribution: full {:.2e}  true-pos {:.2e}  true-gain {:.2e}  both {:.2e}",
                    mse(&den_mean),
                    mse(&den_tp),
                    mse(&den_tg),
                    mse(&den_tb),
                );
                for k in 0..dims.users {
                    let claimed = rebuilds[k].pos_cov.trace().sqrt();
                    let gv: f64 = rebuilds[k].gain_vars.iter().flatten().sum::<f64>()
                        / rebuilds[k].gain_vars.iter().flatten().count() as f64;
                    let ge: f64 = rebuilds[k]
                        .gains
                        .iter()
                        .zip(&truth_gains[k])
                        .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()))
                        .sum::<f64>()
                        / rebuilds[k].gains.iter().flatten().count() as f64;
                    println!(
                        "    u{k}: pos claim {claimed:.4} act {:.4} | gain var claim {gv:.3e} act {ge:.3e}",
                        pos_errs[k]
                    );
                }
            }
            let den_msg = GaussMsg { mean: den_mean, var: den_var.max(VAR_FLOOR) };
            let (combined, clamped) = ep_combine(&den_msg, &ext);
            let (pri_c, pri_a, mark) = if clamped {
                (f64::NAN, f64::NAN, "CLAMP")
            } else {
                let a = mse(&combined.mean);
                let c = combined.var;
                prior = combined;
                (c, a, "")
            };
            println!(
                "{it:>3} {:>9.2e} {:>9.2e} {:>9.2e} {:>9.2e} {:>9.2e} {:>9.2e} {:>9.2e} {:>9.2e} {:>8.4} {:>8.4} {:>8.4} {mark}",
                lin.posterior.var,
                mse(&lin.posterior.mean),
                ext.var,
                mse(&ext.mean),
                den_msg.var,
                mse(&den_msg.mean),
                pri_c,
                pri_a,
                pos_errs[0],
                pos_errs[1],
                pos_errs[2],
            );
        }
    }
}
