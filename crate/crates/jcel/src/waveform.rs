//! Pilot generation, received pilot blocks, and real-valued stacking.
//!
//! Users transmit constant Zadoff-Chu pilots per frame; the receiver collects
//! `Y[l] = H[l] X + N[l]` per subcarrier and works with the real-valued
//! stacked system
//!
//! ```text
//!   y = M h + n,   M = realstack(I_L kron (X^T kron I_M))
//! ```
//!
//! where `realstack(C)` maps a complex matrix to `[[Re C, -Im C], [Im C, Re C]]`
//! and vectors to `[Re; Im]`. The operator is never materialized: its Gram is
//! `I_L kron (conj(X) X^T kron I_M)`, so everything reduces to per-subcarrier
//! products with the K x K pilot Gram.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use std::io::{Read, Write};

use crate::error::{JcelError, Result};

/// Problem dimensions: M waveguides, K users, P frames, L subcarriers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub waveguides: usize,
    pub users: usize,
    pub frames: usize,
    pub subcarriers: usize,
}

impl Dims {
    /// Real length of the stacked channel vector (2 M K L).
    pub fn channel_len(&self) -> usize {
        2 * self.waveguides * self.users * self.subcarriers
    }

    /// Real length of the stacked observation vector (2 M P L).
    pub fn obs_len(&self) -> usize {
        2 * self.waveguides * self.frames * self.subcarriers
    }

    /// Complex index of channel entry (m, k, l) in Vec([H[0], .., H[L-1]]).
    #[inline]
    pub fn channel_index(&self, m: usize, k: usize, l: usize) -> usize {
        l * self.waveguides * self.users + k * self.waveguides + m
    }

    /// Complex index of observation entry (m, p, l) in Vec([Y[0], .., Y[L-1]]).
    #[inline]
    pub fn obs_index(&self, m: usize, p: usize, l: usize) -> usize {
        l * self.waveguides * self.frames + p * self.waveguides + m
    }
}

// ---------------------------------------------------------------------------
// Pilots
// ---------------------------------------------------------------------------

/// Raw Zadoff-Chu entry formula, no root validation.
fn zc_entry(root: u64, n: u64, len: u64) -> Complex64 {
    // n(n+1) is even, so the half-integer exponent never aliases.
    let phase = -(std::f64::consts::PI) * (root as f64) * (n as f64) * (n as f64 + 1.0) / len as f64;
    Complex64::from_polar(1.0, phase)
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 { a } else { gcd(b, a % b) }
}

/// Zadoff-Chu sequence of odd length with entry `exp(-j pi u n(n+1) / N)`.
pub fn zc_sequence(root: u64, len: u64) -> Result<Vec<Complex64>> {
    if len % 2 == 0 || len == 0 {
        return Err(JcelError::Parameter(format!("ZC length must be odd and positive, got {len}")));
    }
    if root == 0 || root >= len || gcd(root, len) != 1 {
        return Err(JcelError::Parameter(format!(
            "ZC root {root} must satisfy 1 <= u < {len} and gcd(u, {len}) = 1"
        )));
    }
    Ok((0..len).map(|n| zc_entry(root, n, len)).collect())
}

/// Length of the base pilot alphabet.
pub const ZC_BASE_LEN: usize = 31;

/// K x P pilot matrix cut from the 31 x 31 Zadoff-Chu base at a row/column
/// offset, scaled so every entry has modulus `sqrt(tx_power)`.
///
/// Row u of the base (1-based) is the length-31 sequence with root u; the
/// last root, 31, degenerates to the all-ones row and is included so the base
/// stays square.
pub fn pilot_matrix_with_offset(
    users: usize,
    frames: usize,
    tx_power: f64,
    row_offset: usize,
    col_offset: usize,
) -> Result<DMatrix<Complex64>> {
    if users == 0 || frames == 0 || users + row_offset > ZC_BASE_LEN || frames + col_offset > ZC_BASE_LEN
    {
        return Err(JcelError::Parameter(format!(
            "pilot block {users}x{frames} at offset ({row_offset}, {col_offset}) exceeds the {ZC_BASE_LEN}x{ZC_BASE_LEN} base"
        )));
    }
    if tx_power <= 0.0 {
        return Err(JcelError::Parameter(format!("tx power must be positive, got {tx_power}")));
    }
    let amp = tx_power.sqrt();
    Ok(DMatrix::from_fn(users, frames, |k, p| {
        amp * zc_entry((k + row_offset + 1) as u64, (p + col_offset) as u64, ZC_BASE_LEN as u64)
    }))
}

/// Top-left pilot block (offset (0, 0)); the common case.
pub fn pilot_matrix(users: usize, frames: usize, tx_power: f64) -> Result<DMatrix<Complex64>> {
    pilot_matrix_with_offset(users, frames, tx_power, 0, 0)
}

// ---------------------------------------------------------------------------
// Received pilot blocks
// ---------------------------------------------------------------------------

/// Received pilot blocks: one M x P matrix per subcarrier.
#[derive(Debug, Clone, PartialEq)]
pub struct FreqObservation {
    pub blocks: Vec<DMatrix<Complex64>>,
    pub pilots: DMatrix<Complex64>,
    pub noise_var: f64,
    pub dims: Dims,
}

/// Simulates `Y[l] = H[l] X + N[l]` with i.i.d. circular complex noise of
/// variance `noise_var` per complex entry.
pub fn simulate_rx<R: Rng>(
    channel: &[DMatrix<Complex64>],
    pilots: &DMatrix<Complex64>,
    noise_var: f64,
    rng: &mut R,
) -> Result<FreqObservation> {
    if channel.is_empty() {
        return Err(JcelError::ShapeMismatch("empty channel tensor".into()));
    }
    if noise_var < 0.0 {
        return Err(JcelError::Parameter(format!("noise variance {noise_var} must be >= 0")));
    }
    let (m, k) = (channel[0].nrows(), channel[0].ncols());
    if pilots.nrows() != k {
        return Err(JcelError::ShapeMismatch(format!(
            "channel has {k} users but pilot matrix has {} rows",
            pilots.nrows()
        )));
    }
    let p = pilots.ncols();
    let dims = Dims { waveguides: m, users: k, frames: p, subcarriers: channel.len() };
    let std = (noise_var / 2.0).sqrt();
    let blocks = channel
        .iter()
        .map(|h| {
            if h.nrows() != m || h.ncols() != k {
                return Err(JcelError::ShapeMismatch("ragged channel tensor".into()));
            }
            let mut y = h * pilots;
            if noise_var > 0.0 {
                for v in y.iter_mut() {
                    let re: f64 = rng.sample(StandardNormal);
                    let im: f64 = rng.sample(StandardNormal);
                    *v += Complex64::new(std * re, std * im);
                }
            }
            Ok(y)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FreqObservation { blocks, pilots: pilots.clone(), noise_var, dims })
}

impl FreqObservation {
    /// Writes the tensor with a small self-describing header.
    pub fn write_binary<W: Write>(&self, mut w: W, seed: u64) -> Result<()> {
        w.write_all(b"JCLOBS1\0")?;
        for v in [
            self.dims.waveguides as u64,
            self.dims.users as u64,
            self.dims.frames as u64,
            self.dims.subcarriers as u64,
            seed,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.noise_var.to_le_bytes())?;
        for x in self.pilots.iter() {
            w.write_all(&x.re.to_le_bytes())?;
            w.write_all(&x.im.to_le_bytes())?;
        }
        for b in &self.blocks {
            for x in b.iter() {
                w.write_all(&x.re.to_le_bytes())?;
                w.write_all(&x.im.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Reads a tensor written by [`write_binary`](Self::write_binary);
    /// returns the observation and the recorded seed.
    pub fn read_binary<R: Read>(mut r: R) -> Result<(Self, u64)> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != b"JCLOBS1\0" {
            return Err(JcelError::Config("not an observation tensor file".into()));
        }
        let mut u = [0u8; 8];
        let mut next_u64 = |r: &mut R| -> Result<u64> {
            r.read_exact(&mut u)?;
            Ok(u64::from_le_bytes(u))
        };
        let m = next_u64(&mut r)? as usize;
        let k = next_u64(&mut r)? as usize;
        let p = next_u64(&mut r)? as usize;
        let l = next_u64(&mut r)? as usize;
        let seed = next_u64(&mut r)?;
        let mut f = [0u8; 8];
        let mut next_f64 = |r: &mut R| -> Result<f64> {
            r.read_exact(&mut f)?;
            Ok(f64::from_le_bytes(f))
        };
        let noise_var = next_f64(&mut r)?;
        let mut pilots = DMatrix::<Complex64>::zeros(k, p);
        for j in 0..p {
            for i in 0..k {
                let re = next_f64(&mut r)?;
                let im = next_f64(&mut r)?;
                pilots[(i, j)] = Complex64::new(re, im);
            }
        }
        let mut blocks = Vec::with_capacity(l);
        for _ in 0..l {
            let mut b = DMatrix::<Complex64>::zeros(m, p);
            for j in 0..p {
                for i in 0..m {
                    let re = next_f64(&mut r)?;
                    let im = next_f64(&mut r)?;
                    b[(i, j)] = Complex64::new(re, im);
                }
            }
            blocks.push(b);
        }
        let dims = Dims { waveguides: m, users: k, frames: p, subcarriers: l };
        Ok((FreqObservation { blocks, pilots, noise_var, dims }, seed))
    }
}

// ---------------------------------------------------------------------------
// Real-valued stacking
// ---------------------------------------------------------------------------

/// The block-structured measurement operator, kept in factored form.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedPilotOp {
    pub pilots: DMatrix<Complex64>,
    pub dims: Dims,
}

impl StackedPilotOp {
    /// K x K pilot Gram `conj(X) X^T`; Hermitian positive semidefinite, and
    /// the only matrix the EP linear module ever factorizes.
    pub fn gram(&self) -> DMatrix<Complex64> {
        self.pilots.conjugate() * self.pilots.transpose()
    }

    /// Applies the operator: stacked channel (2MKL) to stacked observation
    /// (2MPL). Equivalent to `Y[l] = H[l] X` per subcarrier.
    pub fn apply(&self, h_real: &DVector<f64>) -> DVector<f64> {
        assert_eq!(h_real.len(), self.dims.channel_len(), "stacked channel length");
        let h = unstack_channel_tensor(h_real, &self.dims);
        let blocks: Vec<DMatrix<Complex64>> = h.iter().map(|hl| hl * &self.pilots).collect();
        stack_obs(&blocks, &self.dims)
    }

    /// Applies the adjoint: stacked observation to stacked channel domain.
    /// Equivalent to `Z[l] = Y[l] X^H` per subcarrier.
    pub fn adjoint(&self, y_real: &DVector<f64>) -> DVector<f64> {
        assert_eq!(y_real.len(), self.dims.obs_len(), "stacked observation length");
        let y = unstack_obs_tensor(y_real, &self.dims);
        let xh = self.pilots.adjoint();
        let blocks: Vec<DMatrix<Complex64>> = y.iter().map(|yl| yl * &xh).collect();
        stack_channel(&blocks, &self.dims)
    }

    /// Dense real operator, for small-problem cross-checks only.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.dims.channel_len();
        let rows = self.dims.obs_len();
        let mut dense = DMatrix::<f64>::zeros(rows, n);
        let mut e = DVector::<f64>::zeros(n);
        for j in 0..n {
            e[j] = 1.0;
            dense.set_column(j, &self.apply(&e));
            e[j] = 0.0;
        }
        dense
    }
}

/// Real-valued stacked system: observation vector, factored operator, and the
/// per-real-coordinate noise variance sigma_n^2 / 2.
#[derive(Debug, Clone, PartialEq)]
pub struct RealStack {
    pub y: DVector<f64>,
    pub operator: StackedPilotOp,
    pub noise_var_real: f64,
}

/// Stacks an observation into the real-valued form.
pub fn stack_real(obs: &FreqObservation) -> RealStack {
    RealStack {
        y: stack_obs(&obs.blocks, &obs.dims),
        operator: StackedPilotOp { pilots: obs.pilots.clone(), dims: obs.dims },
        noise_var_real: obs.noise_var / 2.0,
    }
}

fn stack_complex(values: impl Iterator<Item = Complex64>, complex_len: usize) -> DVector<f64> {
    let mut out = DVector::<f64>::zeros(2 * complex_len);
    for (i, v) in values.enumerate() {
        out[i] = v.re;
        out[i + complex_len] = v.im;
    }
    out
}

/// Stacks channel matrices into [Re(vec); Im(vec)], column-major per block.
pub fn stack_channel(blocks: &[DMatrix<Complex64>], dims: &Dims) -> DVector<f64> {
    let n = dims.channel_len() / 2;
    stack_complex(blocks.iter().flat_map(|b| b.iter().copied()), n)
}

/// Stacks observation matrices into [Re(vec); Im(vec)], column-major per block.
pub fn stack_obs(blocks: &[DMatrix<Complex64>], dims: &Dims) -> DVector<f64> {
    let n = dims.obs_len() / 2;
    stack_complex(blocks.iter().flat_map(|b| b.iter().copied()), n)
}

/// Rebuilds the per-subcarrier channel matrices from a stacked vector.
pub fn unstack_channel_tensor(h_real: &DVector<f64>, dims: &Dims) -> Vec<DMatrix<Complex64>> {
    let half = dims.channel_len() / 2;
    (0..dims.subcarriers)
        .map(|l| {
            DMatrix::from_fn(dims.waveguides, dims.users, |m, k| {
                let v = dims.channel_index(m, k, l);
                Complex64::new(h_real[v], h_real[v + half])
            })
        })
        .collect()
}

fn unstack_obs_tensor(y_real: &DVector<f64>, dims: &Dims) -> Vec<DMatrix<Complex64>> {
    let half = dims.obs_len() / 2;
    (0..dims.subcarriers)
        .map(|l| {
            DMatrix::from_fn(dims.waveguides, dims.frames, |m, p| {
                let v = dims.obs_index(m, p, l);
                Complex64::new(y_real[v], y_real[v + half])
            })
        })
        .collect()
}

/// Extracts the length-L subcarrier profile of pair (k, m) from a stacked
/// channel vector, together with the complex variance `2 * var_real` that a
/// per-real-coordinate variance implies for the complex entries.
pub fn unstack_channel(
    h_real: &DVector<f64>,
    dims: &Dims,
    k: usize,
    m: usize,
    var_real: f64,
) -> Result<(DVector<Complex64>, f64)> {
    if k >= dims.users || m >= dims.waveguides {
        return Err(JcelError::Parameter(format!(
            "pair (k={k}, m={m}) out of range for {}x{}",
            dims.users, dims.waveguides
        )));
    }
    let half = dims.channel_len() / 2;
    let profile = DVector::from_fn(dims.subcarriers, |l, _| {
        let v = dims.channel_index(m, k, l);
        Complex64::new(h_real[v], h_real[v + half])
    });
    Ok((profile, 2.0 * var_real))
}

/// Writes the per-pair profile back into a stacked channel vector.
pub fn restack_channel(
    h_real: &mut DVector<f64>,
    dims: &Dims,
    k: usize,
    m: usize,
    profile: &DVector<Complex64>,
) {
    let half = dims.channel_len() / 2;
    for l in 0..dims.subcarriers {
        let v = dims.channel_index(m, k, l);
        h_real[v] = profile[l].re;
        h_real[v + half] = profile[l].im;
    }
}

// ---------------------------------------------------------------------------
