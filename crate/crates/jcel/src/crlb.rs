//! Fisher information and estimation bounds for the joint parameter vector.
//!
//! The unknowns are, per user, the ground-plane position (x, y) and one free
//! complex gain per anchor; the channel depends on the position only through
//! the path delays. For observations `Y[l] = H[l] X + N[l]` with i.i.d.
//! CN(0, sigma^2) noise the information matrix is
//!
//! ```text
//! I(zeta) = (2 / sigma^2) sum_l Re[ J_l^H (conj(X) X^T kron I_M) J_l ]
//! ```
//!
//! where `J_l` is the Jacobian of `vec(H[l])` with respect to the real
//! parameters. The pilot factor is the same Gram matrix the linear estimation
//! stage uses; it is Hermitian positive semidefinite, which keeps the whole
//! information matrix symmetric. Bounds come from the (pseudo)inverse, so
//! unobservable directions are reported as zero variance together with a rank
//! flag rather than as an error.

use nalgebra::{DMatrix, DVector, Matrix2, Vector3};
use num_complex::Complex64;

use crate::error::{JcelError, Result};
use crate::scene::Scene;
use crate::SPEED_OF_LIGHT;

/// Index bookkeeping for the parameter vector: user-major, each user holding
/// `[x, y, Re z_0, Im z_0, Re z_1, Im z_1, ...]` with gains in flat anchor
/// order (waveguide-major, element within).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FimLayout {
    pub users: usize,
    pub anchors: usize,
}

impl FimLayout {
    pub fn new(scene: &Scene) -> Self {
        FimLayout { users: scene.num_users(), anchors: scene.num_elements() }
    }

    pub fn per_user(&self) -> usize {
        2 + 2 * self.anchors
    }

    pub fn dim(&self) -> usize {
        self.users * self.per_user()
    }

    pub fn pos_x(&self, k: usize) -> usize {
        k * self.per_user()
    }

    pub fn pos_y(&self, k: usize) -> usize {
        self.pos_x(k) + 1
    }

    /// Column of Re(z) for user k and flat anchor index j.
    pub fn gain_re(&self, k: usize, j: usize) -> usize {
        self.pos_x(k) + 2 + 2 * j
    }

    pub fn gain_im(&self, k: usize, j: usize) -> usize {
        self.gain_re(k, j) + 1
    }
}

/// Jacobian of `vec(H[l])` (column-major, row index k*M + m) with respect to
/// the parameter vector, evaluated at the scene truth.
///
/// Gains enter linearly; positions enter through the delays only, so each
/// position column sums `z * d(exp)/d(tau) * d(tau)/d(x or y)` over the
/// anchors that user sees.
pub fn jacobian_h(scene: &Scene, l: usize) -> Result<DMatrix<Complex64>> {
    let layout = FimLayout::new(scene);
    let anchors = scene.anchor_table();
    let paths = scene.composite_paths()?;
    let m_cnt = scene.num_waveguides();
    let omega = -2.0 * std::f64::consts::PI * l as f64 / scene.ofdm.symbol_span();

    // Flat anchor index for each (waveguide, element).
    let mut wg_offset = vec![0usize; m_cnt];
    for (j, (a, _)) in anchors.iter().enumerate() {
        if a.element == 0 {
            wg_offset[a.waveguide] = j;
        }
    }

    let mut jac = DMatrix::<Complex64>::zeros(m_cnt * scene.num_users(), layout.dim());
    for path in &paths {
        let j = wg_offset[path.waveguide] + path.element;
        let row = path.user * m_cnt + path.waveguide;
        let e = Complex64::from_polar(1.0, omega * path.delay);
        jac[(row, layout.gain_re(path.user, j))] = e;
        jac[(row, layout.gain_im(path.user, j))] = Complex64::i() * e;

        let diff: Vector3<f64> = scene.users[path.user].position - anchors[j].0.position;
        let d = diff.norm();
        if d < 1e-12 {
            return Err(JcelError::DegenerateGeometry(format!(
                "user {} sits on anchor {}",
                path.user, j
            )));
        }
        let dh_dtau = path.gain * e * Complex64::new(0.0, omega);
        jac[(row, layout.pos_x(path.user))] += dh_dtau * (diff.x / (SPEED_OF_LIGHT * d));
        jac[(row, layout.pos_y(path.user))] += dh_dtau * (diff.y / (SPEED_OF_LIGHT * d));
    }
    Ok(jac)
}

/// Fisher information matrix for the full parameter vector.
pub fn fim(scene: &Scene, pilots: &DMatrix<Complex64>, noise_var: f64) -> Result<DMatrix<f64>> {
    if pilots.nrows() != scene.num_users() {
        return Err(JcelError::ShapeMismatch(format!(
            "pilot matrix has {} rows for {} users",
            pilots.nrows(),
            scene.num_users()
        )));
    }
    if noise_var <= 0.0 {
        return Err(JcelError::Parameter("noise variance must be positive".into()));
    }
    let m_cnt = scene.num_waveguides();
    let k_cnt = scene.num_users();
    let gram = pilots.conjugate() * pilots.transpose();
    let weight = DMatrix::<Complex64>::from_fn(m_cnt * k_cnt, m_cnt * k_cnt, |r, c| {
        if r % m_cnt == c % m_cnt {
            gram[(r / m_cnt, c / m_cnt)]
        } else {
            Complex64::default()
        }
    });

    let layout = FimLayout::new(scene);
    let mut acc = DMatrix::<Complex64>::zeros(layout.dim(), layout.dim());
    for l in 0..scene.ofdm.num_subcarriers {
        let jac = jacobian_h(scene, l)?;
        acc += jac.adjoint() * &weight * jac;
    }
    Ok(acc.map(|c| 2.0 * c.re / noise_var))
}

/// Bounds derived from the information matrix.
#[derive(Debug, Clone)]
pub struct CrlbReport {
    pub fim: DMatrix<f64>,
    /// Full covariance bound, a pseudoinverse when the information matrix is
    /// rank deficient.
    pub covariance: DMatrix<f64>,
    pub rank_deficient: bool,
    /// Per-user 2x2 position covariance blocks. Zero entries mean the
    /// corresponding direction is unobservable, not perfectly known.
    pub position_cov: Vec<Matrix2<f64>>,
    /// Bound on `E || h_hat - h ||^2` over the real-stacked channel vector,
    /// for estimators that go through the full parameter vector.
    pub channel_mse: f64,
}

/// Computes the Fisher information and inverts it into bounds.
pub fn crlb_bounds(
    scene: &Scene,
    pilots: &DMatrix<Complex64>,
    noise_var: f64,
) -> Result<CrlbReport> {
    let info = fim(scene, pilots, noise_var)?;
    let layout = FimLayout::new(scene);

    // The raw information matrix mixes units: gain coordinates carry many
    // orders of magnitude more information than position coordinates, so a
    // relative singular-value tolerance on the raw matrix mistakes that scale
    // split for rank deficiency and silently zeroes genuine position
    // uncertainty. Balance the diagonal to unit scale first; the tolerance
    // then measures structural (geometric) degeneracy only. Coordinates with
    // exactly no information keep their zero rows and are still truncated.
    let dim = info.nrows();
    let mut bal = DVector::<f64>::from_element(dim, 1.0);
    for j in 0..dim {
        if info[(j, j)] > 0.0 {
            bal[j] = 1.0 / info[(j, j)].sqrt();
        }
    }
    let balanced = DMatrix::from_fn(dim, dim, |r, c| info[(r, c)] * bal[r] * bal[c]);
    let svd = balanced.svd(true, true);
    let s_max = svd.singular_values.max();
    let tol = s_max * 1e-10;
    let rank_deficient = svd.singular_values.iter().any(|&s| s <= tol);
    let covariance = svd
        .pseudo_inverse(tol.max(f64::MIN_POSITIVE))
        .map_err(|e| JcelError::Linalg(format!("information matrix pseudoinverse: {e}")))?;
    let covariance = DMatrix::from_fn(dim, dim, |r, c| covariance[(r, c)] * bal[r] * bal[c]);

    let position_cov = (0..layout.users)
        .map(|k| {
            let (ix, iy) = (layout.pos_x(k), layout.pos_y(k));
            Matrix2::new(
                covariance[(ix, ix)],
                covariance[(ix, iy)],
                covariance[(iy, ix)],
                covariance[(iy, iy)],
            )
        })
        .collect();

    // Channel reconstruction bound: tr(C * B) with B the Gram of the stacked
    // channel Jacobian (no pilot weighting here, the channel itself is the
    // quantity being reconstructed).
    let mut gram_b = DMatrix::<f64>::zeros(layout.dim(), layout.dim());
    for l in 0..scene.ofdm.num_subcarriers {
        let jac = jacobian_h(scene, l)?;
        gram_b += (jac.adjoint() * jac).map(|c| c.re);
    }
    let channel_mse = (&covariance * gram_b).trace();

    Ok(CrlbReport { fim: info, covariance, rank_deficient, position_cov, channel_mse })
}

/// Propagates a position covariance into a delay variance bound for one
/// anchor: `g^T C g` with `g` the delay gradient at the user position.
pub fn delay_variance_bound(
    pos_cov: &Matrix2<f64>,
    anchor_pos: Vector3<f64>,
    x: f64,
    y: f64,
) -> Result<f64> {
    let lin = crate::localize::linearize_delay(anchor_pos, 0.0, x, y)?;
    let g = nalgebra::Vector2::new(lin.a, lin.b);
    Ok((g.transpose() * pos_cov * g)[(0, 0)])
}

// ---------------------------------------------------------------------------
