//! Experiment harness: canned scene configurations, Monte-Carlo sweep
//! orchestration, NMSE metrics with their information-bound companions, and
//! deterministic CSV persistence.
//!
//! A run is described by an [`ExperimentConfig`]: a scene (one of the four
//! canned schemes or an explicit geometry), an extractor, a baseline mode,
//! and a sweep over one variable (transmit power, subcarrier count, frame
//! count, or waveguide attenuation). Every sweep point runs `trials`
//! independent noise realizations, seeded so that the same `(config, seed)`
//! pair reproduces byte-identical outputs regardless of the worker-pool
//! schedule, and aggregates squared-error ratios in the linear domain before
//! the final dB conversion.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{DVector, Vector3};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crlb::{crlb_bounds, FimLayout};
use crate::ep::{jcel_run, Extractor, JcelOptions, ScenePrior};
use crate::error::{JcelError, Result};
use crate::scene::{GuidedDelayModel, OfdmParams, Region, Scene, User, Waveguide};
use crate::waveform::{pilot_matrix, simulate_rx, stack_channel, Dims};

// ---------------------------------------------------------------------------
// Configuration

/// Which reception model the experiment runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// Pinching-antenna reception: every waveguide superimposes the delays of
    /// all its elements at one sink.
    #[default]
    Pass,
    /// Cooperative multi-receiver reference: each element becomes its own
    /// single-element waveguide with the sink at the element, so exactly one
    /// delay arrives per output and nothing superimposes.
    MultiBs,
}

impl FromStr for Baseline {
    type Err = JcelError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pass" => Ok(Baseline::Pass),
            "multi_bs" => Ok(Baseline::MultiBs),
            other => Err(JcelError::Config(format!("unknown baseline '{other}'"))),
        }
    }
}

/// The quantity a sweep varies; everything else stays at the config value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepVariable {
    TxPowerDbm,
    NumSubcarriers,
    NumFrames,
    KLoss,
}

impl FromStr for SweepVariable {
    type Err = JcelError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tx_power_dbm" => Ok(SweepVariable::TxPowerDbm),
            "num_subcarriers" => Ok(SweepVariable::NumSubcarriers),
            "num_frames" => Ok(SweepVariable::NumFrames),
            "k_loss" => Ok(SweepVariable::KLoss),
            other => Err(JcelError::Config(format!("unknown sweep variable '{other}'"))),
        }
    }
}

/// One sweep axis with its value list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub variable: SweepVariable,
    pub values: Vec<f64>,
}

impl SweepConfig {
    /// Parses the CLI form `variable=v1,v2,...`.
    pub fn parse(text: &str) -> Result<Self> {
        let (name, list) = text
            .split_once('=')
            .ok_or_else(|| JcelError::Config(format!("sweep '{text}' is not 'variable=v1,v2,...'")))?;
        let variable = name.trim().parse()?;
        let values = list
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|e| JcelError::Config(format!("sweep value '{v}': {e}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(SweepConfig { variable, values })
    }
}

/// Explicit geometry for experiments that are not one of the canned schemes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub waveguides: Vec<WaveguideConfig>,
    /// User positions; localization treats users as living on the z = 0
    /// plane, so nonzero heights only make sense for channel-only studies.
    pub users: Vec<[f64; 3]>,
    /// Search region as `[x_min, x_max, y_min, y_max]`.
    pub region: [f64; 4],
    #[serde(default = "default_refractive_index")]
    pub refractive_index: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaveguideConfig {
    pub sink: [f64; 3],
    pub elements: Vec<[f64; 3]>,
}

fn default_refractive_index() -> f64 {
    1.4
}

fn default_trials() -> usize {
    50
}

fn default_power_dbm() -> f64 {
    8.0
}

fn default_frames() -> usize {
    8
}

fn default_subcarriers() -> usize {
    32
}

fn default_cp_len() -> usize {
    16
}

fn default_carrier_freq() -> f64 {
    28e9
}

fn default_bandwidth() -> f64 {
    100e6
}

fn default_noise_var() -> f64 {
    1e-12
}

/// Full description of one experiment; serializable so a manifest can
/// reproduce the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Canned scheme id (1-4); mutually exclusive with `scene`.
    #[serde(default)]
    pub scheme: Option<u8>,
    #[serde(default)]
    pub scene: Option<SceneConfig>,
    #[serde(default = "default_extractor")]
    pub extractor: Extractor,
    #[serde(default)]
    pub baseline: Baseline,
    pub sweep: SweepConfig,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    /// Transmit power used whenever the sweep varies something else, dBm.
    #[serde(default = "default_power_dbm")]
    pub tx_power_dbm: f64,
    #[serde(default = "default_frames")]
    pub num_frames: usize,
    #[serde(default = "default_subcarriers")]
    pub num_subcarriers: usize,
    #[serde(default = "default_cp_len")]
    pub cp_len: usize,
    #[serde(default = "default_carrier_freq")]
    pub carrier_freq: f64,
    #[serde(default = "default_bandwidth")]
    pub bandwidth: f64,
    /// Waveguide amplitude attenuation constant, 1/m; 0 disables loss.
    #[serde(default)]
    pub k_loss: f64,
    /// Receiver noise power per subcarrier, watts.
    #[serde(default = "default_noise_var")]
    pub noise_var: f64,
    /// Output directory; `None` keeps results in memory only.
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn default_extractor() -> Extractor {
    Extractor::Bpvi
}

impl ExperimentConfig {
    /// Canned defaults for one of the four schemes: schemes 1, 2, and 4 sweep
    /// transmit power on a 0-16 dBm grid, scheme 3 holds 8 dBm and sweeps the
    /// subcarrier count.
    pub fn scheme_default(id: u8) -> Result<Self> {
        if !(1..=4).contains(&id) {
            return Err(JcelError::Config(format!("scheme must be 1-4, got {id}")));
        }
        let sweep = if id == 3 {
            SweepConfig {
                variable: SweepVariable::NumSubcarriers,
                values: vec![16.0, 32.0, 64.0],
            }
        } else {
            SweepConfig {
                variable: SweepVariable::TxPowerDbm,
                values: (0..=8).map(|i| 2.0 * i as f64).collect(),
            }
        };
        Ok(ExperimentConfig {
            scheme: Some(id),
            scene: None,
            extractor: default_extractor(),
            baseline: Baseline::Pass,
            sweep,
            trials: default_trials(),
            seed: 1,
            tx_power_dbm: default_power_dbm(),
            num_frames: default_frames(),
            num_subcarriers: default_subcarriers(),
            cp_len: default_cp_len(),
            carrier_freq: default_carrier_freq(),
            bandwidth: default_bandwidth(),
            k_loss: 0.0,
            noise_var: default_noise_var(),
            out: None,
        })
    }

    /// Reads a TOML config file.
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| JcelError::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| JcelError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(JcelError::Config("trials must be at least 1".into()));
        }
        if self.sweep.values.is_empty() {
            return Err(JcelError::Config("sweep value list is empty".into()));
        }
        match (self.scheme, &self.scene) {
            (Some(id), None) if (1..=4).contains(&id) => {}
            (Some(id), None) => {
                return Err(JcelError::Config(format!("scheme must be 1-4, got {id}")));
            }
            (None, Some(_)) => {}
            (Some(_), Some(_)) => {
                return Err(JcelError::Config("give either a scheme or a scene, not both".into()));
            }
            (None, None) => {
                return Err(JcelError::Config("config needs a scheme or an explicit scene".into()));
            }
        }
        if self.noise_var <= 0.0 {
            return Err(JcelError::Config(format!(
                "noise variance must be positive, got {}",
                self.noise_var
            )));
        }
        if self.k_loss < 0.0 {
            return Err(JcelError::Config(format!("k_loss must be nonnegative, got {}", self.k_loss)));
        }
        Ok(())
    }

    /// Materializes the scene and per-point knobs for one sweep value.
    fn resolve(&self, value: f64) -> Result<ResolvedPoint> {
        let power_dbm = match self.sweep.variable {
            SweepVariable::TxPowerDbm => value,
            _ => self.tx_power_dbm,
        };
        let subcarriers = match self.sweep.variable {
            SweepVariable::NumSubcarriers => positive_count(value, "num_subcarriers")?,
            _ => self.num_subcarriers,
        };
        let frames = match self.sweep.variable {
            SweepVariable::NumFrames => positive_count(value, "num_frames")?,
            _ => self.num_frames,
        };
        let k_loss = match self.sweep.variable {
            SweepVariable::KLoss => value,
            _ => self.k_loss,
        };
        let tx_power = dbm_to_watts(power_dbm);
        let ofdm = OfdmParams {
            carrier_freq: self.carrier_freq,
            bandwidth: self.bandwidth,
            num_subcarriers: subcarriers,
            cp_len: self.cp_len,
        };
        let mut scene = match (self.scheme, &self.scene) {
            (Some(id), None) => scheme_scene(id, ofdm, tx_power, k_loss)?,
            (None, Some(sc)) => sc.build(ofdm, tx_power, k_loss)?,
            _ => return Err(JcelError::Config("config needs a scheme or an explicit scene".into())),
        };
        if self.baseline == Baseline::MultiBs {
            scene = multi_bs_scene(&scene);
        }
        Ok(ResolvedPoint { scene, frames, tx_power, noise_var: self.noise_var })
    }
}

struct ResolvedPoint {
    scene: Scene,
    frames: usize,
    tx_power: f64,
    noise_var: f64,
}

fn positive_count(value: f64, what: &str) -> Result<usize> {
    let rounded = value.round();
    if rounded < 1.0 || (value - rounded).abs() > 1e-9 {
        return Err(JcelError::Config(format!("{what} sweep value {value} is not a positive integer")));
    }
    Ok(rounded as usize)
}

/// dBm to watts.
pub fn dbm_to_watts(dbm: f64) -> f64 {
    1e-3 * 10f64.powf(dbm / 10.0)
}

impl SceneConfig {
    fn build(&self, ofdm: OfdmParams, tx_power: f64, k_loss: f64) -> Result<Scene> {
        if self.waveguides.is_empty() || self.users.is_empty() {
            return Err(JcelError::Config("scene needs at least one waveguide and one user".into()));
        }
        let [x_min, x_max, y_min, y_max] = self.region;
        let scene = Scene {
            waveguides: self
                .waveguides
                .iter()
                .map(|w| Waveguide {
                    sink: Vector3::from(w.sink),
                    elements: w.elements.iter().map(|&e| Vector3::from(e)).collect(),
                    refractive_index: self.refractive_index,
                    loss_constant: k_loss,
                })
                .collect(),
            users: self
                .users
                .iter()
                .map(|&p| User { position: Vector3::from(p), tx_power })
                .collect(),
            ofdm,
            region: Region { x_min, x_max, y_min, y_max },
            guided_delay_model: GuidedDelayModel::Nominal,
            guided_phase: false,
        };
        Ok(scene)
    }
}

// ---------------------------------------------------------------------------
// Canned scenes and baselines

/// Desk-reference geometry: two waveguides along opposite walls, three
/// elements each, four users on the floor between them.
fn table_waveguide(which: usize, k_loss: f64) -> Waveguide {
    match which {
        0 => Waveguide {
            sink: Vector3::new(-10.0, -10.0, 3.0),
            elements: vec![
                Vector3::new(-10.0, -5.0, 3.0),
                Vector3::new(-10.0, 0.0, 3.0),
                Vector3::new(-10.0, 5.0, 3.0),
            ],
            refractive_index: 1.4,
            loss_constant: k_loss,
        },
        _ => Waveguide {
            sink: Vector3::new(-10.0, 10.0, 3.0),
            elements: vec![
                Vector3::new(-5.0, 10.0, 3.0),
                Vector3::new(0.0, 10.0, 3.0),
                Vector3::new(5.0, 10.0, 3.0),
            ],
            refractive_index: 1.4,
            loss_constant: k_loss,
        },
    }
}

fn table_users(tx_power: f64) -> Vec<User> {
    [
        Vector3::new(2.85, 1.0, 0.0),
        Vector3::new(3.0, -0.8, 0.0),
        Vector3::new(-2.0, 2.3, 0.0),
        Vector3::new(1.5, -3.0, 0.0),
    ]
    .into_iter()
    .map(|position| User { position, tx_power })
    .collect()
}

/// Builds one of the four canned measurement configurations on the reference
/// geometry: scheme 1 is waveguide 1 with users 1-3, scheme 2 both waveguides
/// with all four users, scheme 3 both waveguides with users 1-3, scheme 4
/// waveguide 1 with all four users.
pub fn scheme_scene(id: u8, ofdm: OfdmParams, tx_power: f64, k_loss: f64) -> Result<Scene> {
    let (num_wg, num_users) = match id {
        1 => (1, 3),
        2 => (2, 4),
        3 => (2, 3),
        4 => (1, 4),
        other => return Err(JcelError::Config(format!("scheme must be 1-4, got {other}"))),
    };
    let waveguides = (0..num_wg).map(|m| table_waveguide(m, k_loss)).collect();
    let mut users = table_users(tx_power);
    users.truncate(num_users);
    Ok(Scene {
        waveguides,
        users,
        ofdm,
        region: Region { x_min: -5.0, x_max: 5.0, y_min: -5.0, y_max: 5.0 },
        guided_delay_model: GuidedDelayModel::Nominal,
        guided_phase: false,
    })
}

/// Degenerates a pinching-antenna scene into the cooperative multi-receiver
/// reference: every element becomes its own waveguide whose sink sits at the
/// element, so each output carries exactly one delay and the element
/// coordinates stay identical to the original scene.
pub fn multi_bs_scene(scene: &Scene) -> Scene {
    let waveguides = scene
        .waveguides
        .iter()
        .flat_map(|wg| {
            wg.elements.iter().map(|&e| Waveguide {
                sink: e,
                elements: vec![e],
                refractive_index: wg.refractive_index,
                loss_constant: wg.loss_constant,
            })
        })
        .collect();
    Scene { waveguides, ..scene.clone() }
}

// ---------------------------------------------------------------------------
// Metrics

/// Normalized mean-square error in dB with the exact-recovery sentinel.
///
/// Ratios below 1e-30 report as the -300 dB floor so CSV consumers never see
/// minus infinity.
pub fn nmse(estimate: &DVector<f64>, truth: &DVector<f64>) -> Result<f64> {
    if estimate.len() != truth.len() {
        return Err(JcelError::ShapeMismatch(format!(
            "estimate has {} entries, truth has {}",
            estimate.len(),
            truth.len()
        )));
    }
    let denom = truth.norm_squared();
    if denom <= 0.0 {
        return Err(JcelError::Parameter("NMSE is undefined for a zero truth vector".into()));
    }
    Ok(ratio_to_db((estimate - truth).norm_squared() / denom))
}

/// Linear squared-error ratio to dB, with the -300 dB exact-recovery floor.
pub fn ratio_to_db(ratio: f64) -> f64 {
    if !ratio.is_finite() {
        return f64::NAN;
    }
    10.0 * ratio.max(1e-30).log10()
}

/// Aggregated metrics for one sweep point, with the bound companions computed
/// from the same scene.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub sweep_value: f64,
    pub nmse_h_db: f64,
    pub nmse_z_db: f64,
    pub nmse_pos_db: f64,
    pub crlb_h_db: f64,
    pub crlb_z_db: f64,
    pub crlb_pos_db: f64,
    pub mean_iterations: f64,
    pub mean_clamps: f64,
    pub failed_trials: usize,
}

struct TrialMetrics {
    ratio_h: f64,
    ratio_z: f64,
    ratio_pos: f64,
    iterations: usize,
    clamps: usize,
}

/// Derives one independent, schedule-invariant noise stream per trial.
fn trial_rng(seed: u64, point: u64, trial: u64) -> ChaCha12Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&point.to_le_bytes());
    key[16..24].copy_from_slice(&trial.to_le_bytes());
    key[24..32].copy_from_slice(b"mc-noise");
    ChaCha12Rng::from_seed(key)
}

fn run_trial(
    config: &ExperimentConfig,
    point_idx: usize,
    trial: usize,
    scene: &Scene,
    channel: &[nalgebra::DMatrix<Complex64>],
    pilots: &nalgebra::DMatrix<Complex64>,
    truth_h: &DVector<f64>,
    truth_gains: &[Vec<Vec<Complex64>>],
    noise_var: f64,
) -> Result<TrialMetrics> {
    let mut rng = trial_rng(config.seed, point_idx as u64, trial as u64);
    let obs = simulate_rx(channel, pilots, noise_var, &mut rng)?;
    let prior = ScenePrior::from_scene(scene);
    let options = JcelOptions {
        extractor: config.extractor,
        localize: true,
        truth: Some(truth_h.clone()),
        ..JcelOptions::default()
    };
    let run = jcel_run(&obs, &prior, &options)?;

    let ratio_h = (&run.channel_stacked - truth_h).norm_squared() / truth_h.norm_squared();

    let mut z_err = 0.0;
    let mut z_norm = 0.0;
    let mut pos_err = 0.0;
    let mut pos_norm = 0.0;
    for (k, user) in scene.users.iter().enumerate() {
        let rebuild = run.rebuilds[k]
            .as_ref()
            .ok_or_else(|| JcelError::Parameter(format!("user {k} never localized")))?;
        for (m, row) in truth_gains[k].iter().enumerate() {
            for (n, &z) in row.iter().enumerate() {
                z_err += (rebuild.gains[m][n] - z).norm_sqr();
                z_norm += z.norm_sqr();
            }
        }
        let est = run.positions[k]
            .as_ref()
            .ok_or_else(|| JcelError::Parameter(format!("user {k} never localized")))?;
        pos_err += (est.x - user.position.x).powi(2) + (est.y - user.position.y).powi(2);
        pos_norm += user.position.x.powi(2) + user.position.y.powi(2);
    }

    Ok(TrialMetrics {
        ratio_h,
        ratio_z: z_err / z_norm,
        ratio_pos: pos_err / pos_norm,
        iterations: run.iterations,
        clamps: run.flags.total_clamps(),
    })
}

fn run_point(config: &ExperimentConfig, point_idx: usize, value: f64) -> Result<MetricRow> {
    let rp = config.resolve(value)?;
    let scene = rp.scene;
    let channel = scene.channel_tensor()?;
    let dims = Dims {
        waveguides: scene.waveguides.len(),
        users: scene.num_users(),
        frames: rp.frames,
        subcarriers: scene.ofdm.num_subcarriers,
    };
    let pilots = pilot_matrix(dims.users, dims.frames, rp.tx_power)?;
    let truth_h = stack_channel(&channel, &dims);

    // Element-resolved truth gains in (user, waveguide, element) layout.
    let paths = scene.composite_paths()?;
    let mut truth_gains: Vec<Vec<Vec<Complex64>>> = scene
        .users
        .iter()
        .map(|_| scene.waveguides.iter().map(|w| vec![Complex64::default(); w.elements.len()]).collect())
        .collect();
    for p in &paths {
        truth_gains[p.user][p.waveguide][p.element] = p.gain;
    }
    let z_norm_sq: f64 = paths.iter().map(|p| p.gain.norm_sqr()).sum();
    let pos_norm_sq: f64 =
        scene.users.iter().map(|u| u.position.x.powi(2) + u.position.y.powi(2)).sum();

    let report = crlb_bounds(&scene, &pilots, rp.noise_var)?;
    let layout = FimLayout::new(&scene);
    let crlb_pos: f64 = report.position_cov.iter().map(|c| c.trace()).sum::<f64>() / pos_norm_sq;
    let crlb_h = report.channel_mse / truth_h.norm_squared();
    let mut z_bound = 0.0;
    for k in 0..layout.users {
        for j in 0..layout.anchors {
            let (re, im) = (layout.gain_re(k, j), layout.gain_im(k, j));
            z_bound += report.covariance[(re, re)] + report.covariance[(im, im)];
        }
    }
    let crlb_z = z_bound / z_norm_sq;

    let outcomes: Vec<Result<TrialMetrics>> = (0..config.trials)
        .into_par_iter()
        .map(|t| {
            run_trial(config, point_idx, t, &scene, &channel, &pilots, &truth_h, &truth_gains, rp.noise_var)
        })
        .collect();
    let ok: Vec<&TrialMetrics> = outcomes.iter().filter_map(|r| r.as_ref().ok()).collect();
    let failed_trials = config.trials - ok.len();
    let mean = |f: &dyn Fn(&TrialMetrics) -> f64| -> f64 {
        if ok.is_empty() {
            f64::NAN
        } else {
            ok.iter().map(|m| f(m)).sum::<f64>() / ok.len() as f64
        }
    };

    Ok(MetricRow {
        sweep_value: value,
        nmse_h_db: ratio_to_db(mean(&|m| m.ratio_h)),
        nmse_z_db: ratio_to_db(mean(&|m| m.ratio_z)),
        nmse_pos_db: ratio_to_db(mean(&|m| m.ratio_pos)),
        crlb_h_db: ratio_to_db(crlb_h),
        crlb_z_db: ratio_to_db(crlb_z),
        crlb_pos_db: ratio_to_db(crlb_pos),
        mean_iterations: mean(&|m| m.iterations as f64),
        mean_clamps: mean(&|m| m.clamps as f64),
        failed_trials,
    })
}

/// Runs the full sweep described by the config; per-trial failures are
/// counted in their row and skipped, per-point setup failures abort.
pub fn run_scheme(config: &ExperimentConfig) -> Result<Vec<MetricRow>> {
    config.validate()?;
    config
        .sweep
        .values
        .iter()
        .enumerate()
        .map(|(i, &v)| run_point(config, i, v))
        .collect()
}

/// Canned attenuation study: scheme-1 geometry swept over the three
/// reference attenuation constants (unless the config already carries an
/// explicit attenuation sweep).
pub fn loss_sweep(config: &ExperimentConfig) -> Result<Vec<MetricRow>> {
    if config.scheme != Some(1) {
        return Err(JcelError::Config("the attenuation sweep is defined on scheme 1".into()));
    }
    let mut c = config.clone();
    if c.sweep.variable != SweepVariable::KLoss {
        c.sweep = SweepConfig { variable: SweepVariable::KLoss, values: vec![0.01, 0.05, 0.1] };
    }
    run_scheme(&c)
}

/// Bound curve for one sweep, no simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct CrlbPoint {
    pub sweep_value: f64,
    pub crlb_h_db: f64,
    pub crlb_z_db: f64,
    pub crlb_pos_db: f64,
}

/// Computes only the bound companions over the sweep.
pub fn crlb_curve(config: &ExperimentConfig) -> Result<Vec<CrlbPoint>> {
    config.validate()?;
    config
        .sweep
        .values
        .iter()
        .map(|&value| {
            let rp = config.resolve(value)?;
            let scene = rp.scene;
            let dims_users = scene.num_users();
            let pilots = pilot_matrix(dims_users, rp.frames, rp.tx_power)?;
            let channel = scene.channel_tensor()?;
            let dims = Dims {
                waveguides: scene.waveguides.len(),
                users: dims_users,
                frames: rp.frames,
                subcarriers: scene.ofdm.num_subcarriers,
            };
            let truth_h = stack_channel(&channel, &dims);
            let paths = scene.composite_paths()?;
            let z_norm_sq: f64 = paths.iter().map(|p| p.gain.norm_sqr()).sum();
            let pos_norm_sq: f64 =
                scene.users.iter().map(|u| u.position.x.powi(2) + u.position.y.powi(2)).sum();
            let report = crlb_bounds(&scene, &pilots, rp.noise_var)?;
            let layout = FimLayout::new(&scene);
            let mut z_bound = 0.0;
            for k in 0..layout.users {
                for j in 0..layout.anchors {
                    let (re, im) = (layout.gain_re(k, j), layout.gain_im(k, j));
                    z_bound += report.covariance[(re, re)] + report.covariance[(im, im)];
                }
            }
            Ok(CrlbPoint {
                sweep_value: value,
                crlb_h_db: ratio_to_db(report.channel_mse / truth_h.norm_squared()),
                crlb_z_db: ratio_to_db(z_bound / z_norm_sq),
                crlb_pos_db: ratio_to_db(
                    report.position_cov.iter().map(|c| c.trace()).sum::<f64>() / pos_norm_sq,
                ),
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Persistence

/// Column schema of the per-metric CSV files.
pub const METRIC_HEADER: &str = "sweep_value,nmse_db,crlb_db";
/// Column schema of the long-format CSV.
pub const LONG_HEADER: &str = "sweep_value,metric,value";
/// Column schema of the bound-only CSV.
pub const CRLB_HEADER: &str = "sweep_value,crlb_h_db,crlb_z_db,crlb_pos_db";

#[derive(Serialize)]
struct Manifest<'a> {
    version: &'static str,
    config: &'a ExperimentConfig,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)
        .map_err(|e| JcelError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

/// Writes one CSV per metric, a long-format CSV for plotting, and a manifest
/// that reproduces the run. Returns the created paths.
pub fn emit_results(
    rows: &[MetricRow],
    dir: &Path,
    config: &ExperimentConfig,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)
        .map_err(|e| JcelError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", dir.display()))))?;
    let mut created = Vec::new();

    let metrics: [(&str, &dyn Fn(&MetricRow) -> (f64, f64)); 3] = [
        ("nmse_h.csv", &|r| (r.nmse_h_db, r.crlb_h_db)),
        ("nmse_z.csv", &|r| (r.nmse_z_db, r.crlb_z_db)),
        ("nmse_position.csv", &|r| (r.nmse_pos_db, r.crlb_pos_db)),
    ];
    for (name, project) in metrics {
        let mut text = String::from(METRIC_HEADER);
        text.push('\n');
        for row in rows {
            let (value, bound) = project(row);
            text.push_str(&format!("{},{},{}\n", row.sweep_value, value, bound));
        }
        let path = dir.join(name);
        write_text(&path, &text)?;
        created.push(path);
    }

    let mut long = String::from(LONG_HEADER);
    long.push('\n');
    for row in rows {
        let fields: [(&str, f64); 9] = [
            ("nmse_h_db", row.nmse_h_db),
            ("nmse_z_db", row.nmse_z_db),
            ("nmse_pos_db", row.nmse_pos_db),
            ("crlb_h_db", row.crlb_h_db),
            ("crlb_z_db", row.crlb_z_db),
            ("crlb_pos_db", row.crlb_pos_db),
            ("mean_iterations", row.mean_iterations),
            ("mean_clamps", row.mean_clamps),
            ("failed_trials", row.failed_trials as f64),
        ];
        for (metric, value) in fields {
            long.push_str(&format!("{},{},{}\n", row.sweep_value, metric, value));
        }
    }
    let long_path = dir.join("metrics_long.csv");
    write_text(&long_path, &long)?;
    created.push(long_path);

    let manifest = Manifest { version: env!("CARGO_PKG_VERSION"), config };
    let manifest_text = toml::to_string_pretty(&manifest)
        .map_err(|e| JcelError::Config(format!("manifest serialization: {e}")))?;
    let manifest_path = dir.join("manifest.toml");
    write_text(&manifest_path, &manifest_text)?;
    created.push(manifest_path);

    Ok(created)
}

/// Writes the bound-only curve.
pub fn emit_crlb(points: &[CrlbPoint], dir: &Path, config: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)
        .map_err(|e| JcelError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", dir.display()))))?;
    let mut text = String::from(CRLB_HEADER);
    text.push('\n');
    for p in points {
        text.push_str(&format!("{},{},{},{}\n", p.sweep_value, p.crlb_h_db, p.crlb_z_db, p.crlb_pos_db));
    }
    let path = dir.join("crlb.csv");
    write_text(&path, &text)?;
    let manifest = Manifest { version: env!("CARGO_PKG_VERSION"), config };
    let manifest_text = toml::to_string_pretty(&manifest)
        .map_err(|e| JcelError::Config(format!("manifest serialization: {e}")))?;
    let manifest_path = dir.join("manifest.toml");
    write_text(&manifest_path, &manifest_text)?;
    Ok(vec![path, manifest_path])
}

// ---------------------------------------------------------------------------
// Self checks

/// One invariant check: name, outcome, and a short diagnostic.
#[derive(Debug, Clone)]
pub struct SelfCheck {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

fn check(name: &'static str, worst: f64, tol: f64) -> SelfCheck {
    SelfCheck {
        name,
        pass: worst.is_finite() && worst <= tol,
        detail: format!("worst {worst:.3e}, tolerance {tol:.0e}"),
    }
}

fn shift_dft_identity() -> SelfCheck {
    use rand::Rng;
    let n = 64usize;
    let shift = 5usize;
    let mut rng = ChaCha12Rng::seed_from_u64(101);
    let x: Vec<Complex64> =
        (0..n).map(|_| Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)).collect();
    let shifted: Vec<Complex64> = (0..n).map(|i| x[(i + shift) % n]).collect();

    let mut planner = rustfft::FftPlanner::new();
    let fft = planner.plan_fft_forward(n);
    let mut fx = x.clone();
    let mut fy = shifted;
    fft.process(&mut fx);
    fft.process(&mut fy);

    let mut worst = 0.0f64;
    for (k, (&xk, &yk)) in fx.iter().zip(fy.iter()).enumerate() {
        let ramp = Complex64::from_polar(
            1.0,
            2.0 * std::f64::consts::PI * (shift * k) as f64 / n as f64,
        );
        worst = worst.max((yk - xk * ramp).norm());
    }
    let scale = fx.iter().map(|c| c.norm()).fold(0.0, f64::max);
    check("circular shift / DFT phase-ramp identity", worst / scale, 1e-12)
}

fn bessel_round_trip() -> SelfCheck {
    use crate::vonmises::{bessel_ratio, bessel_ratio_inv};
    let mut worst = 0.0f64;
    for i in 0..=48 {
        let kappa = 10f64.powf(-2.0 + 7.0 * i as f64 / 48.0);
        match bessel_ratio_inv(bessel_ratio(kappa)) {
            Ok(back) => worst = worst.max((back - kappa).abs() / kappa),
            Err(_) => worst = f64::INFINITY,
        }
    }
    check("Bessel ratio round trip", worst, 1e-8)
}

fn hungarian_vs_brute_force() -> SelfCheck {
    use crate::localize::hungarian;
    use rand::Rng;

    fn brute(cost: &nalgebra::DMatrix<f64>) -> f64 {
        fn recurse(cost: &nalgebra::DMatrix<f64>, row: usize, used: &mut [bool], acc: f64, best: &mut f64) {
            if row == cost.nrows() {
                *best = best.min(acc);
                return;
            }
            for col in 0..cost.ncols() {
                if !used[col] {
                    used[col] = true;
                    recurse(cost, row + 1, used, acc + cost[(row, col)], best);
                    used[col] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        recurse(cost, 0, &mut vec![false; cost.ncols()], 0.0, &mut best);
        best
    }

    let mut rng = ChaCha12Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    for _ in 0..25 {
        let cost = nalgebra::DMatrix::from_fn(5, 5, |_, _| rng.gen::<f64>());
        let Ok(assign) = hungarian(&cost) else {
            return SelfCheck {
                name: "assignment vs exhaustive search",
                pass: false,
                detail: "solver failed on a finite cost matrix".into(),
            };
        };
        let total: f64 = assign.iter().enumerate().map(|(r, &c)| cost[(r, c)]).sum();
        worst = worst.max((total - brute(&cost)).abs());
    }
    check("assignment vs exhaustive search", worst, 1e-9)
}

fn fusion_vs_grid() -> SelfCheck {
    use crate::localize::{fuse_position, linearize_delay, predict_delay};

    let ofdm = OfdmParams {
        carrier_freq: default_carrier_freq(),
        bandwidth: default_bandwidth(),
        num_subcarriers: 32,
        cp_len: 16,
    };
    let Ok(scene) = scheme_scene(2, ofdm, 1.0, 0.0) else {
        return SelfCheck { name: "position fusion vs grid search", pass: false, detail: "scene build failed".into() };
    };
    let anchors = scene.anchor_table();
    let (truth_x, truth_y) = (2.85, 1.0);
    let (lin_x, lin_y) = (1.0, 1.0);

    let mut lins = Vec::new();
    let mut measured = Vec::new();
    for (anchor, guided) in &anchors {
        match linearize_delay(anchor.position, *guided, lin_x, lin_y) {
            Ok(lin) => lins.push(lin),
            Err(e) => {
                return SelfCheck {
                    name: "position fusion vs grid search",
                    pass: false,
                    detail: format!("linearization failed: {e}"),
                };
            }
        }
        measured.push(predict_delay(anchor.position, *guided, truth_x, truth_y));
    }
    let weights = vec![1.0; lins.len()];
    let fused = match fuse_position(&lins, &measured, &weights) {
        Ok(f) => f,
        Err(e) => {
            return SelfCheck {
                name: "position fusion vs grid search",
                pass: false,
                detail: format!("fusion failed: {e}"),
            };
        }
    };

    // Brute-force argmin of the same weighted quadratic on a 1 cm grid.
    let step = 0.01;
    let mut best = (f64::INFINITY, 0.0, 0.0);
    let steps = ((scene.region.x_max - scene.region.x_min) / step).round() as usize;
    for ix in 0..=steps {
        let x = scene.region.x_min + ix as f64 * step;
        for iy in 0..=steps {
            let y = scene.region.y_min + iy as f64 * step;
            let cost: f64 = lins
                .iter()
                .zip(&measured)
                .map(|(lin, &tau)| (tau - lin.a * x - lin.b * y - lin.offset).powi(2))
                .sum();
            if cost < best.0 {
                best = (cost, x, y);
            }
        }
    }
    let err = ((fused.x - best.1).powi(2) + (fused.y - best.2).powi(2)).sqrt();
    check("position fusion vs grid search", err, 1.1 * step)
}

fn block_vs_dense() -> SelfCheck {
    use crate::ep::{ep_linear, GaussMsg};
    use crate::waveform::StackedPilotOp;
    use rand::Rng;

    let dims = Dims { waveguides: 2, users: 2, frames: 3, subcarriers: 2 };
    let mut rng = ChaCha12Rng::seed_from_u64(303);
    let mut draw = |_: usize| Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5);
    let pilots = nalgebra::DMatrix::from_fn(dims.users, dims.frames, |_, _| draw(0));
    let op = StackedPilotOp { pilots, dims };
    let mut rng2 = ChaCha12Rng::seed_from_u64(304);
    let y = DVector::from_fn(dims.obs_len(), |_, _| rng2.gen::<f64>() - 0.5);
    let prior_mean = DVector::from_fn(dims.channel_len(), |_, _| rng2.gen::<f64>() - 0.5);
    let noise_var_real = 0.2;
    let prior = GaussMsg { mean: prior_mean.clone(), var: 1.3 };

    let stack = crate::waveform::RealStack { y: y.clone(), operator: op.clone(), noise_var_real };
    let out = match ep_linear(&prior, &stack) {
        Ok(o) => o,
        Err(e) => {
            return SelfCheck {
                name: "block linear solve vs dense solve",
                pass: false,
                detail: format!("solver failed: {e}"),
            };
        }
    };

    let dense = op.to_dense();
    let a = 1.0 / noise_var_real;
    let b = 1.0 / prior.var;
    let normal = a * dense.transpose() * &dense
        + nalgebra::DMatrix::identity(dims.channel_len(), dims.channel_len()) * b;
    let rhs = a * dense.transpose() * &y + b * &prior_mean;
    let Some(solved) = normal.lu().solve(&rhs) else {
        return SelfCheck {
            name: "block linear solve vs dense solve",
            pass: false,
            detail: "dense normal equations are singular".into(),
        };
    };
    let worst = (out.posterior.mean - solved).abs().max();
    check("block linear solve vs dense solve", worst, 1e-10)
}

fn delta_method_vs_fd() -> SelfCheck {
    use crate::localize::{delta_method_channel, UserRebuild};

    let ofdm = OfdmParams {
        carrier_freq: default_carrier_freq(),
        bandwidth: default_bandwidth(),
        num_subcarriers: 32,
        cp_len: 16,
    };
    let Ok(mut scene) = scheme_scene(2, ofdm, 1.0, 0.0) else {
        return SelfCheck { name: "delta-method variance vs finite differences", pass: false, detail: "scene build failed".into() };
    };
    scene.users.truncate(1);
    let anchors = scene.anchor_table();
    let dims = Dims { waveguides: 2, users: 1, frames: 1, subcarriers: 32 };
    let Ok(paths) = scene.composite_paths() else {
        return SelfCheck { name: "delta-method variance vs finite differences", pass: false, detail: "path build failed".into() };
    };
    let mut gains: Vec<Vec<Complex64>> =
        scene.waveguides.iter().map(|w| vec![Complex64::default(); w.elements.len()]).collect();
    for p in &paths {
        gains[p.waveguide][p.element] = p.gain;
    }
    let gain_vars: Vec<Vec<f64>> = gains.iter().map(|r| vec![0.0; r.len()]).collect();
    let (x0, y0) = (scene.users[0].position.x, scene.users[0].position.y);

    let rebuild_at = |x: f64, y: f64, spread: f64| -> Result<(DVector<f64>, f64)> {
        let user = UserRebuild {
            gains: gains.clone(),
            gain_vars: gain_vars.clone(),
            x,
            y,
            pos_cov: nalgebra::Matrix2::from_diagonal_element(spread),
        };
        delta_method_channel(&[user], &anchors, &scene.ofdm, &dims)
    };

    let spread = 1e-6; // 1 mm standard deviation squared
    let (h0, var_delta) = match rebuild_at(x0, y0, spread) {
        Ok(v) => v,
        Err(e) => {
            return SelfCheck {
                name: "delta-method variance vs finite differences",
                pass: false,
                detail: format!("rebuild failed: {e}"),
            };
        }
    };
    let delta = 1e-5;
    let fd = |a: Result<(DVector<f64>, f64)>, b: Result<(DVector<f64>, f64)>| -> Option<DVector<f64>> {
        match (a, b) {
            (Ok((hp, _)), Ok((hm, _))) => Some((hp - hm) / (2.0 * delta)),
            _ => None,
        }
    };
    let (Some(dh_dx), Some(dh_dy)) = (
        fd(rebuild_at(x0 + delta, y0, 0.0), rebuild_at(x0 - delta, y0, 0.0)),
        fd(rebuild_at(x0, y0 + delta, 0.0), rebuild_at(x0, y0 - delta, 0.0)),
    ) else {
        return SelfCheck {
            name: "delta-method variance vs finite differences",
            pass: false,
            detail: "finite-difference rebuild failed".into(),
        };
    };
    let var_fd = spread * (dh_dx.norm_squared() + dh_dy.norm_squared()) / h0.len() as f64;
    let rel = (var_delta - var_fd).abs() / var_fd;
    check("delta-method variance vs finite differences", rel, 1e-4)
}

/// Runs the fast invariant suite; every check must pass for a healthy build.
pub fn selftest_report() -> Vec<SelfCheck> {
    vec![
        shift_dft_identity(),
        bessel_round_trip(),
        hungarian_vs_brute_force(),
        fusion_vs_grid(),
        block_vs_dense(),
        delta_method_vs_fd(),
    ]
}

// ---------------------------------------------------------------------------
