//! Scene geometry and frequency-domain channel synthesis.
//!
//! A scene is a set of waveguides, each carrying an ordered line of pinching
//! antennas (PAs) at a common height, plus ground-plane users. Every
//! (user, waveguide, PA) triple contributes one propagation path: a free-space
//! leg from the user to the PA and a guided leg from the PA to the waveguide
//! sink. With a cyclic prefix long enough to cover the composite delays, the
//! subcarrier-domain channel for user k on waveguide m is a superposition of
//! complex sinusoids, one per PA:
//!
//! ```text
//!   H[l]_{m,k} = sum_n z_{k,m,n} * exp(-j 2 pi tau_{k,m,n} l / (L T))
//! ```
//!
//! where T is the sample period and l = 0..L-1 indexes subcarriers.

use nalgebra::{DMatrix, Vector3};
use num_complex::Complex64;

use crate::error::{JcelError, Result};
use crate::SPEED_OF_LIGHT;

/// How the guided leg converts in-waveguide distance to delay.
///
/// The baseline model divides the distance by both the refractive index and
/// the vacuum speed of light; the alternative scales the distance by the
/// index, which is what a slowed guided wave would produce. The baseline is
/// the default so that results line up with the reference simulations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GuidedDelayModel {
    /// tau = d / (n_d * c)
    #[default]
    Nominal,
    /// tau = n_d * d / c
    Physical,
}

/// One pinching antenna, addressed by (waveguide, element) and its location.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PaAnchor {
    pub waveguide: usize,
    pub element: usize,
    pub position: Vector3<f64>,
}

/// A waveguide: a sink (where the RF chain taps the guide) plus an ordered
/// line of pinching antennas, all at the same height.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveguide {
    pub sink: Vector3<f64>,
    pub elements: Vec<Vector3<f64>>,
    /// Refractive index of the guide dielectric.
    pub refractive_index: f64,
    /// Amplitude loss constant per meter of guided travel; 0 disables loss.
    pub loss_constant: f64,
}

impl Waveguide {
    /// Builds a waveguide with the default sink placement: the point 5 m
    /// beyond the first PA, away from the rest of the line. A single-element
    /// guide puts the sink at the element itself (zero guided travel).
    pub fn with_default_sink(
        elements: Vec<Vector3<f64>>,
        refractive_index: f64,
        loss_constant: f64,
    ) -> Self {
        let sink = default_sink(&elements);
        Waveguide { sink, elements, refractive_index, loss_constant }
    }

    /// In-guide distance from the sink to element n.
    pub fn guided_distance(&self, n: usize) -> f64 {
        (self.elements[n] - self.sink).norm()
    }

    /// Guided propagation delay from the sink to element n.
    pub fn guided_delay(&self, n: usize, model: GuidedDelayModel) -> f64 {
        let d = self.guided_distance(n);
        match model {
            GuidedDelayModel::Nominal => d / (self.refractive_index * SPEED_OF_LIGHT),
            GuidedDelayModel::Physical => self.refractive_index * d / SPEED_OF_LIGHT,
        }
    }
}

/// Default sink placement: extend the PA line 5 m beyond the first element.
pub fn default_sink(elements: &[Vector3<f64>]) -> Vector3<f64> {
    match elements {
        [] => Vector3::zeros(),
        [only] => *only,
        [first, .., last] => {
            let axis = (last - first).normalize();
            first - 5.0 * axis
        }
    }
}

/// An uplink user on the ground plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct User {
    pub position: Vector3<f64>,
    /// Per-symbol transmit power, watts.
    pub tx_power: f64,
}

/// OFDM numerology shared by synthesis and estimation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OfdmParams {
    /// Carrier frequency, Hz.
    pub carrier_freq: f64,
    /// Sampling bandwidth, Hz.
    pub bandwidth: f64,
    /// Number of subcarriers L.
    pub num_subcarriers: usize,
    /// Cyclic prefix length in samples.
    pub cp_len: usize,
}

impl OfdmParams {
    /// Sample period T = 1/B, seconds.
    pub fn sample_period(&self) -> f64 {
        1.0 / self.bandwidth
    }

    /// Cyclic prefix span in seconds; composite delays must stay below this.
    pub fn cp_span(&self) -> f64 {
        self.cp_len as f64 * self.sample_period()
    }

    /// OFDM symbol core duration L*T, seconds.
    pub fn symbol_span(&self) -> f64 {
        self.num_subcarriers as f64 * self.sample_period()
    }
}

/// Rectangular prior region for user positions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Region {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Region {
    pub fn centroid(&self) -> (f64, f64) {
        (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    /// Largest side length; used as the scale for divergence guards.
    pub fn extent(&self) -> f64 {
        (self.x_max - self.x_min).max(self.y_max - self.y_min)
    }
}

/// One propagation path: composite gain and delay for a (user, waveguide,
/// element) triple.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathParams {
    pub user: usize,
    pub waveguide: usize,
    pub element: usize,
    pub gain: Complex64,
    pub delay: f64,
}

/// Full synthesis scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub waveguides: Vec<Waveguide>,
    pub users: Vec<User>,
    pub ofdm: OfdmParams,
    pub region: Region,
    pub guided_delay_model: GuidedDelayModel,
    /// When set, the guided leg carries the phase of a wave slowed by the
    /// dielectric; off by default (gain phase comes from the free-space leg).
    pub guided_phase: bool,
}

// ---------------------------------------------------------------------------
// Path synthesis
// ---------------------------------------------------------------------------

/// Free-space leg from a user position to a PA position.
///
/// Returns (gain, delay): the gain has magnitude `sqrt(eta) / dist` with
/// `eta = c^2 / (16 pi^2 f_c^2)` and phase `+2 pi f_c dist / c`; the delay is
/// `dist / c`. Errors if the two points coincide.
pub fn free_space_path(
    user: Vector3<f64>,
    pa: Vector3<f64>,
    carrier_freq: f64,
) -> Result<(Complex64, f64)> {
    let dist = (user - pa).norm();
    if dist <= 0.0 {
        return Err(JcelError::DegenerateGeometry(format!(
            "user and PA coincide at ({:.3}, {:.3}, {:.3})",
            user.x, user.y, user.z
        )));
    }
    let eta = SPEED_OF_LIGHT * SPEED_OF_LIGHT
        / (16.0 * std::f64::consts::PI.powi(2) * carrier_freq * carrier_freq);
    let phase = 2.0 * std::f64::consts::PI * carrier_freq * dist / SPEED_OF_LIGHT;
    let gain = Complex64::from_polar(eta.sqrt() / dist, phase.rem_euclid(2.0 * std::f64::consts::PI));
    Ok((gain, dist / SPEED_OF_LIGHT))
}

/// Guided leg from the waveguide sink to element n.
///
/// Returns (gain, delay): the gain magnitude is `sqrt(exp(-k_loss * d))` and
/// its phase is zero unless `guided_phase` adds the slowed-wave phase
/// `-2 pi n_d f_c d / c`.
pub fn inwaveguide_path(
    wg: &Waveguide,
    n: usize,
    model: GuidedDelayModel,
    guided_phase: bool,
    carrier_freq: f64,
) -> (Complex64, f64) {
    let d = wg.guided_distance(n);
    let mag = (-wg.loss_constant * d).exp().sqrt();
    let phase = if guided_phase {
        -2.0 * std::f64::consts::PI * wg.refractive_index * carrier_freq * d / SPEED_OF_LIGHT
    } else {
        0.0
    };
    (Complex64::from_polar(mag, phase), wg.guided_delay(n, model))
}

impl Scene {
    pub fn num_waveguides(&self) -> usize {
        self.waveguides.len()
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    /// Total number of PAs across all waveguides.
    pub fn num_elements(&self) -> usize {
        self.waveguides.iter().map(|w| w.elements.len()).sum()
    }

    /// Structural checks: nonempty guides, common PA height and collinearity
    /// per guide, users on the ground plane inside the region.
    pub fn validate(&self) -> Result<()> {
        if self.waveguides.is_empty() || self.users.is_empty() {
            return Err(JcelError::Parameter("scene needs at least one waveguide and one user".into()));
        }
        for (m, wg) in self.waveguides.iter().enumerate() {
            if wg.elements.is_empty() {
                return Err(JcelError::Parameter(format!("waveguide {m} has no elements")));
            }
            if !(wg.refractive_index >= 1.0) {
                return Err(JcelError::Parameter(format!(
                    "waveguide {m}: refractive index {} must be >= 1",
                    wg.refractive_index
                )));
            }
            if wg.loss_constant < 0.0 {
                return Err(JcelError::Parameter(format!("waveguide {m}: negative loss constant")));
            }
            let z0 = wg.elements[0].z;
            for (n, e) in wg.elements.iter().enumerate() {
                if (e.z - z0).abs() > 1e-9 {
                    return Err(JcelError::DegenerateGeometry(format!(
                        "waveguide {m} element {n} leaves the guide height {z0}"
                    )));
                }
            }
            if wg.elements.len() >= 2 {
                let axis = (wg.elements[wg.elements.len() - 1] - wg.elements[0]).normalize();
                for (n, e) in wg.elements.iter().enumerate() {
                    let off = e - wg.elements[0];
                    let perp = (off - axis * off.dot(&axis)).norm();
                    if perp > 1e-9 {
                        return Err(JcelError::DegenerateGeometry(format!(
                            "waveguide {m} element {n} is {perp:.2e} m off the guide axis"
                        )));
                    }
                }
                let off = wg.sink - wg.elements[0];
                if (off - axis * off.dot(&axis)).norm() > 1e-9 {
                    return Err(JcelError::DegenerateGeometry(format!(
                        "waveguide {m} sink is off the guide axis"
                    )));
                }
            }
        }
        for (k, u) in self.users.iter().enumerate() {
            if u.position.z.abs() > 1e-9 {
                return Err(JcelError::Parameter(format!("user {k} is off the ground plane")));
            }
            if !self.region.contains(u.position.x, u.position.y) {
                return Err(JcelError::Parameter(format!("user {k} lies outside the prior region")));
            }
            if u.tx_power <= 0.0 {
                return Err(JcelError::Parameter(format!("user {k} has nonpositive power")));
            }
        }
        Ok(())
    }

    /// Composite gain/delay for every (user, waveguide, element) triple,
    /// ordered by (user, waveguide, element).
    ///
    /// Errors if any composite delay exceeds the cyclic prefix span.
    pub fn composite_paths(&self) -> Result<Vec<PathParams>> {
        let cp = self.ofdm.cp_span();
        let mut out = Vec::with_capacity(self.num_users() * self.num_elements());
        for (k, user) in self.users.iter().enumerate() {
            for (m, wg) in self.waveguides.iter().enumerate() {
                for n in 0..wg.elements.len() {
                    let (gain_o, tau_o) =
                        free_space_path(user.position, wg.elements[n], self.ofdm.carrier_freq)?;
                    let (gain_i, tau_i) = inwaveguide_path(
                        wg,
                        n,
                        self.guided_delay_model,
                        self.guided_phase,
                        self.ofdm.carrier_freq,
                    );
                    let delay = tau_o + tau_i;
                    if delay > cp {
                        return Err(JcelError::CyclicPrefixViolation {
                            delay_s: delay,
                            cp_s: cp,
                            user: k,
                            waveguide: m,
                            element: n,
                        });
                    }
                    out.push(PathParams { user: k, waveguide: m, element: n, gain: gain_i * gain_o, delay });
                }
            }
        }
        Ok(out)
    }

    /// All L subcarrier channel matrices (each M x K).
    pub fn channel_tensor(&self) -> Result<Vec<DMatrix<Complex64>>> {
        let paths = self.composite_paths()?;
        Ok((0..self.ofdm.num_subcarriers)
            .map(|l| freq_channel(&paths, self.num_waveguides(), self.num_users(), l, &self.ofdm))
            .collect())
    }

    /// Flat anchor list ordered by (waveguide, element), with guided delays.
    pub fn anchor_table(&self) -> Vec<(PaAnchor, f64)> {
        let mut out = Vec::new();
        for (m, wg) in self.waveguides.iter().enumerate() {
            for n in 0..wg.elements.len() {
                out.push((
                    PaAnchor { waveguide: m, element: n, position: wg.elements[n] },
                    wg.guided_delay(n, self.guided_delay_model),
                ));
            }
        }
        out
    }
}

/// Subcarrier-l channel matrix (M x K) from a path list.
///
/// Delays may exceed the cyclic prefix here (the synthesis wraps modulo the
/// symbol span); the CP check lives in [`Scene::composite_paths`].
pub fn freq_channel(
    paths: &[PathParams],
    num_waveguides: usize,
    num_users: usize,
    l: usize,
    ofdm: &OfdmParams,
) -> DMatrix<Complex64> {
    let mut h = DMatrix::<Complex64>::zeros(num_waveguides, num_users);
    let span = ofdm.symbol_span();
    for p in paths {
        let phase = -2.0 * std::f64::consts::PI * p.delay * l as f64 / span;
        h[(p.waveguide, p.user)] += p.gain * Complex64::from_polar(1.0, phase);
    }
    h
}

// ---------------------------------------------------------------------------
