//! Joint channel estimation and localization for pinching-antenna OFDM uplinks.
//!
//! A pinching-antenna receiver observes each uplink user through several
//! radiating points spliced along dielectric waveguides. With a cyclic prefix,
//! every antenna/user pair sees a small bundle of superimposed complex
//! sinusoids in the frequency domain, one per radiating point, whose delays are
//! tied to the user position through known anchor geometry. This crate
//! estimates the wideband channel and the user positions jointly by iterating
//! between a linear Gaussian estimator and a geometry-aware denoiser:
//!
//! ```text
//!   pilots ─► [ep] linear module ─► per-(user,waveguide) delay extraction
//!                 ▲                     (omp_delay | bpvi_delay)
//!                 │                               │
//!          delta-method rebuild ◄── [localize] fuse delays into positions
//! ```
//!
//! Modules follow the processing chain:
//!
//! * [`scene`]: geometry, path gains/delays, frequency-domain channel synthesis
//! * [`waveform`]: Zadoff-Chu pilots, received pilot blocks, real-valued stacking
//! * [`ep`]: expectation-propagation outer loop (linear module, damping, combine)
//! * [`vonmises`]: von Mises/Bessel numerics shared by the gridless extractor
//! * [`omp_delay`]: grid dictionary + orthogonal matching pursuit extractor
//! * [`bpvi_delay`]: gridless variational extractor with von Mises phase posteriors
//! * [`localize`]: delay-anchor matching, weighted fusion, Newton refinement
//! * [`crlb`]: Fisher information and Cramer-Rao bounds for gains and positions
//! * [`harness`]: Monte-Carlo schemes, baselines, sweeps, CSV emission

pub mod bpvi_delay;
pub mod crlb;
pub mod ep;
pub mod error;
pub mod harness;
pub mod localize;
pub mod omp_delay;
pub mod scene;
pub mod vonmises;
pub mod waveform;

pub use error::JcelError;

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Smallest variance a Gaussian-division step may report.
///
/// Negative or vanishing variances from message subtraction are clamped here
/// and the event is flagged; see [`ep::gaussian_divide`].
pub const VAR_FLOOR: f64 = 1e-12;

/// Largest variance a Gaussian-division step may report.
pub const VAR_CAP: f64 = 1e8;

/// Largest von Mises concentration tracked before saturation.
pub const KAPPA_CAP: f64 = 1e8;
