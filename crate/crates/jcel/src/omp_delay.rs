//! Grid-dictionary delay extraction by orthogonal matching pursuit.
//!
//! The per-pair subcarrier profile is a superposition of complex sinusoids
//! `z_n * exp(-j 2 pi tau_n l / (L T))`. This extractor quantizes the delay
//! axis into `N_d` points spanning the cyclic prefix, greedily picks the best
//! correlated atom, and re-solves the least-squares gains on the grown support
//! after every pick. Its resolution is capped by the grid step
//! `L_CP * T / N_d`, which is what eventually floors the channel error at high
//! transmit power.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{JcelError, Result};

/// One extracted path: delay, gain, and (possibly heuristic) variances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DelayEstimate {
    /// Delay in seconds, always inside [0, L_CP * T].
    pub delay: f64,
    /// Complex path gain.
    pub gain: Complex64,
    /// Variance of the complex gain (per complex entry).
    pub gain_var: f64,
    /// Variance of the delay, s^2.
    pub delay_var: f64,
    /// Set when the variances come from a residual-power proxy instead of a
    /// posterior; weighted consumers fall back to equal weights in that case.
    pub heuristic_var: bool,
}

/// Sampled delay grid over the cyclic prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayDictionary {
    /// L x N_d atom matrix, [A]_{l,j} = exp(-j 2 pi cp_len * j * l / (L N_d)).
    pub atoms: DMatrix<Complex64>,
    /// Grid delay of each atom, seconds.
    pub delays: Vec<f64>,
    pub subcarriers: usize,
    pub cp_len: usize,
    pub sample_period: f64,
}

impl DelayDictionary {
    /// A grid coarser than the number of subcarriers loses information;
    /// callers may want to warn but it is not an error.
    pub fn is_undersampled(&self) -> bool {
        self.delays.len() < self.subcarriers
    }
}

/// Builds the delay dictionary: `grid_size` atoms with delays
/// `j * cp_len * T / grid_size` for j = 0..grid_size.
pub fn build_dictionary(
    subcarriers: usize,
    cp_len: usize,
    grid_size: usize,
    sample_period: f64,
) -> Result<DelayDictionary> {
    if subcarriers == 0 || cp_len == 0 || grid_size == 0 {
        return Err(JcelError::Parameter("dictionary needs positive L, L_CP, N_d".into()));
    }
    let atoms = DMatrix::from_fn(subcarriers, grid_size, |l, j| {
        let phase = -2.0 * std::f64::consts::PI * (cp_len * j * l) as f64
            / (subcarriers * grid_size) as f64;
        Complex64::from_polar(1.0, phase)
    });
    let delays = (0..grid_size)
        .map(|j| j as f64 * cp_len as f64 * sample_period / grid_size as f64)
        .collect();
    Ok(DelayDictionary { atoms, delays, subcarriers, cp_len, sample_period })
}

/// Result of one matching-pursuit run.
#[derive(Debug, Clone)]
pub struct OmpResult {
    /// Extracted paths in selection order (decreasing residual correlation).
    pub estimates: Vec<DelayEstimate>,
    /// Selected grid indices, same order.
    pub selected: Vec<usize>,
    /// Final residual power ||profile - A_S z||^2.
    pub residual_power: f64,
    /// Gains re-solved after each round, kept only on request.
    pub per_round_gains: Option<Vec<Vec<Complex64>>>,
    /// A rank-deficient support forced an early stop.
    pub rank_dropped: bool,
}

/// Extracts up to `n_paths` delays from a subcarrier profile.
///
/// Each round correlates the residual against all unselected atoms (ties go
/// to the lowest index), then re-solves the gains on the whole support by
/// least squares; the reported gains are the final-support solve. Set
/// `keep_rounds` to also retain the per-round intermediate gains.
///
/// The variances attached to the output are a proxy built from the leftover
/// residual power (`residual / (L * n_paths)` for gains, the single-tone
/// delay bound at that level for delays) and are flagged as heuristic.
pub fn omp_extract(
    profile: &DVector<Complex64>,
    dict: &DelayDictionary,
    n_paths: usize,
    keep_rounds: bool,
) -> Result<OmpResult> {
    let l = dict.subcarriers;
    if profile.len() != l {
        return Err(JcelError::ShapeMismatch(format!(
            "profile has {} entries, dictionary expects {l}",
            profile.len()
        )));
    }
    let n_grid = dict.delays.len();
    if n_paths == 0 || n_paths > n_grid {
        return Err(JcelError::Parameter(format!(
            "path count {n_paths} must lie in 1..={n_grid}"
        )));
    }

    let mut selected: Vec<usize> = Vec::with_capacity(n_paths);
    let mut gains: Vec<Complex64> = Vec::new();
    let mut residual = profile.clone();
    let mut rounds = keep_rounds.then(Vec::new);
    let mut rank_dropped = false;

    for _ in 0..n_paths {
        // Correlation sweep; strict > keeps the lowest index on ties.
        let mut best = (usize::MAX, f64::NEG_INFINITY);
        for j in 0..n_grid {
            if selected.contains(&j) {
                continue;
            }
            let c: Complex64 =
                (0..l).map(|row| dict.atoms[(row, j)].conj() * residual[row]).sum();
            if c.norm_sqr() > best.1 {
                best = (j, c.norm_sqr());
            }
        }
        selected.push(best.0);

        // Least squares on the whole support via the normal equations.
        let t = selected.len();
        let mut gram = DMatrix::<Complex64>::zeros(t, t);
        let mut rhs = DVector::<Complex64>::zeros(t);
        for (a, &ja) in selected.iter().enumerate() {
            for (b, &jb) in selected.iter().enumerate() {
                gram[(a, b)] =
                    (0..l).map(|row| dict.atoms[(row, ja)].conj() * dict.atoms[(row, jb)]).sum();
            }
            rhs[a] = (0..l).map(|row| dict.atoms[(row, ja)].conj() * profile[row]).sum();
        }
        // A support is rank deficient when the factorization fails outright or
        // the pivot ratio collapses (rounding can leave a ~1e-15 pivot where an
        // exact computation would hit zero). Drop the newest atom and stop.
        let solved = gram.clone().cholesky().and_then(|chol| {
            let lmat = chol.l();
            let pivots: Vec<f64> = (0..t).map(|i| lmat[(i, i)].re).collect();
            let dmax = pivots.iter().copied().fold(0.0, f64::max);
            let dmin = pivots.iter().copied().fold(f64::INFINITY, f64::min);
            (dmin > dmax * 1e-7).then(|| chol.solve(&rhs))
        });
        match solved {
            Some(z) => gains = z.iter().copied().collect(),
            None => {
                selected.pop();
                rank_dropped = true;
                break;
            }
        }
        residual = profile.clone();
        for (a, &ja) in selected.iter().enumerate() {
            for row in 0..l {
                residual[row] -= gains[a] * dict.atoms[(row, ja)];
            }
        }
        if let Some(r) = rounds.as_mut() {
            r.push(gains.clone());
        }
    }

    let residual_power = residual.norm_squared();
    let gain_var = residual_power / (l * n_paths) as f64;
    let estimates = selected
        .iter()
        .zip(&gains)
        .map(|(&j, &z)| {
            let snr = z.norm_sqr().max(1e-300) / gain_var.max(1e-300);
            DelayEstimate {
                delay: dict.delays[j],
                gain: z,
                gain_var,
                delay_var: if residual_power == 0.0 {
                    0.0
                } else {
                    single_tone_delay_crlb(l, dict.sample_period, snr)
                },
                heuristic_var: true,
            }
        })
        .collect();

    Ok(OmpResult { estimates, selected, residual_power, per_round_gains: rounds, rank_dropped })
}

/// Delay variance bound for one complex sinusoid in white noise with unknown
/// amplitude and phase: `3 (L T)^2 / (2 pi^2 snr L (L^2 - 1))`.
pub fn single_tone_delay_crlb(subcarriers: usize, sample_period: f64, snr: f64) -> f64 {
    let l = subcarriers as f64;
    let span = l * sample_period;
    3.0 * span * span / (2.0 * std::f64::consts::PI.powi(2) * snr * l * (l * l - 1.0))
}

// ---------------------------------------------------------------------------
