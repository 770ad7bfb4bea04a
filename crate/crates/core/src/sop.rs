//! Second-order pooling: covariance of spatial features, trace (or Frobenius)
//! pre-normalization, coupled Newton-Schulz square root, magnitude
//! compensation and upper-triangular vectorization. Every step is recorded on
//! the tape, so the backward pass is autodiff through the unrolled iteration.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Tolerance for symmetry checks on Newton-Schulz inputs and outputs.
pub const SYMMETRY_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PreNorm {
    #[default]
    Trace,
    Frobenius,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SopConfig {
    /// Newton-Schulz steps `N`.
    pub iterations: usize,
    pub pre_norm: PreNorm,
    /// Matrix power. Only the square root (0.5) is supported.
    pub alpha: f64,
    /// Below this trace (or norm) the covariance counts as degenerate.
    pub degenerate_eps: f64,
}

impl Default for SopConfig {
    fn default() -> Self {
        SopConfig {
            iterations: 5,
            pre_norm: PreNorm::Trace,
            alpha: 0.5,
            degenerate_eps: 1e-10,
        }
    }
}

impl SopConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha != 0.5 {
            return Err(Error::config(format!(
                "alpha must be 0.5 (matrix square root), got {}",
                self.alpha
            )));
        }
        if self.iterations == 0 {
            return Err(Error::config("Newton-Schulz iterations must be positive"));
        }
        if !(self.degenerate_eps >= 0.0) {
            return Err(Error::config("degenerate_eps must be non-negative"));
        }
        Ok(())
    }
}

/// Output `d` channels over a `w×h` grid, stored as an `n×d` matrix with
/// `n = w·h` rows in row-major spatial order.
#[derive(Debug, Clone, Copy)]
pub struct FeatureMap {
    pub x: Var,
    pub w: usize,
    pub h: usize,
    pub d: usize,
}

impl FeatureMap {
    /// Reshapes a `d×h×w` channel-first tensor into the `n×d` feature matrix.
    pub fn from_channels(tape: &mut Tape, chw: Var) -> Result<Self> {
        let shape = tape.value(chw).shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::contract(
                "FeatureMap",
                format!("expected a d×h×w tensor, got {shape:?}"),
            ));
        }
        let (d, h, w) = (shape[0], shape[1], shape[2]);
        let flat = tape.reshape(chw, &[d, h * w])?;
        let x = tape.transpose(flat)?;
        Ok(FeatureMap { x, w, h, d })
    }

    /// Wraps an existing `n×d` matrix (treated as a single-row grid of width `n`).
    pub fn from_matrix(tape: &Tape, x: Var) -> Result<Self> {
        let shape = tape.value(x).shape();
        if shape.len() != 2 {
            return Err(Error::contract("FeatureMap", "expected an n×d matrix"));
        }
        Ok(FeatureMap {
            x,
            w: shape[0],
            h: 1,
            d: shape[1],
        })
    }

    pub fn n(&self) -> usize {
        self.w * self.h
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CovarianceBundle {
    /// `d×d` covariance `Σ = (1/n)·X_cᵀX_c` with per-channel means removed.
    pub sigma: Var,
    pub trace_sigma: f64,
}

/// Coupled iteration state: `y → A^{1/2}`, `z → A^{-1/2}`.
#[derive(Debug, Clone, Copy)]
pub struct NsState {
    pub y: Var,
    pub z: Var,
    pub k: usize,
    pub n: usize,
}

/// Second-order feature vector of length `m = d(d+1)/2`.
#[derive(Debug, Clone, Copy)]
pub struct SopVector {
    pub v: Var,
    pub d: usize,
}

impl SopVector {
    pub fn m(&self) -> usize {
        sop_dim(self.d)
    }
}

/// `m = d(d+1)/2`.
pub const fn sop_dim(d: usize) -> usize {
    d * (d + 1) / 2
}

pub fn covariance(tape: &mut Tape, fm: &FeatureMap) -> Result<CovarianceBundle> {
    if fm.d < 2 {
        return Err(Error::config(format!("covariance needs d >= 2, got {}", fm.d)));
    }
    if fm.n() == 0 {
        return Err(Error::contract("covariance", "empty feature map"));
    }
    let centered = tape.center_columns(fm.x)?;
    let ct = tape.transpose(centered)?;
    let gram = tape.matmul(ct, centered)?;
    let sigma = tape.scale(gram, 1.0 / fm.n() as f64)?;
    let s = tape.value(sigma);
    let trace_sigma = (0..fm.d).map(|i| s.at(i, i)).sum();
    Ok(CovarianceBundle { sigma, trace_sigma })
}

/// Returns `(A, scale)` with `A = Σ / scale`, `scale = tr Σ` or `‖Σ‖_F`.
pub fn pre_normalize(tape: &mut Tape, sigma: Var, mode: PreNorm, eps: f64) -> Result<(Var, Var)> {
    let scale = match mode {
        PreNorm::Trace => tape.trace(sigma)?,
        PreNorm::Frobenius => tape.frobenius_norm(sigma)?,
    };
    let s = tape.value(scale).item();
    if !(s > eps) {
        return Err(Error::DegenerateCovariance { sample: None, norm: s });
    }
    let inv = tape.recip(scale)?;
    let a = tape.mul_scalar(sigma, inv)?;
    Ok((a, scale))
}

/// Runs exactly `n` coupled Newton-Schulz steps from `Y₀ = A`, `Z₀ = I`.
pub fn newton_schulz(tape: &mut Tape, a: Var, n: usize) -> Result<NsState> {
    let ta = tape.value(a);
    if !ta.is_matrix() || ta.rows() != ta.cols() {
        return Err(Error::contract("newton_schulz", "input must be square"));
    }
    let asym = ta.asymmetry();
    if asym > SYMMETRY_TOL {
        return Err(Error::contract(
            "newton_schulz",
            format!("input asymmetric by {asym:e}"),
        ));
    }
    let d = ta.rows();
    let z = tape.constant(Tensor::identity(d));
    let mut state = NsState { y: a, z, k: 0, n };
    for _ in 0..n {
        state = ns_step(tape, state)?;
    }
    Ok(state)
}

fn ns_step(tape: &mut Tape, s: NsState) -> Result<NsState> {
    // T = ½(3I − Z·Y)
    let zy = tape.matmul(s.z, s.y)?;
    let half = tape.scale(zy, -0.5)?;
    let t = tape.add_identity(half, 1.5)?;
    let y = tape.matmul(s.y, t)?;
    let z = tape.matmul(t, s.z)?;
    Ok(NsState {
        y,
        z,
        k: s.k + 1,
        n: s.n,
    })
}

/// Newton-Schulz iterates `Y_1..Y_n` as plain values.
pub fn newton_schulz_trajectory(a: &Tensor, n: usize) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let av = tape.constant(a.clone());
    let mut state = newton_schulz(&mut tape, av, 0)?;
    state.n = n;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        state = ns_step(&mut tape, state)?;
        out.push(tape.value(state.y).clone());
    }
    Ok(out)
}

/// `Z = √scale · Y_N`.
pub fn post_compensate(tape: &mut Tape, y: Var, scale: Var) -> Result<Var> {
    let s = tape.value(scale).item();
    if !(s > 0.0) {
        return Err(Error::contract(
            "post_compensate",
            format!("scale must be positive, got {s}"),
        ));
    }
    let root = tape.sqrt(scale)?;
    tape.mul_scalar(y, root)
}

pub fn upper_tri_vec(tape: &mut Tape, z: Var) -> Result<SopVector> {
    let d = tape.value(z).rows();
    let v = tape.upper_tri_vec(z)?;
    Ok(SopVector { v, d })
}

/// Rebuilds the symmetric `d×d` matrix whose upper triangle is `v`.
pub fn symmetric_from_upper(v: &[f64], d: usize) -> Result<Tensor> {
    if v.len() != sop_dim(d) {
        return Err(Error::Dimension {
            op: "symmetric_from_upper",
            lhs: alloc::vec![sop_dim(d)],
            rhs: alloc::vec![v.len()],
        });
    }
    let mut m = Tensor::zeros(&[d, d]);
    let mut idx = 0;
    for i in 0..d {
        for j in i..d {
            m.data_mut()[i * d + j] = v[idx];
            m.data_mut()[j * d + i] = v[idx];
            idx += 1;
        }
    }
    Ok(m)
}

/// The full pooling pipeline for one feature map.
pub fn sop_forward(tape: &mut Tape, fm: &FeatureMap, cfg: &SopConfig) -> Result<SopVector> {
    cfg.validate()?;
    let cov = covariance(tape, fm)?;
    let (a, scale) = pre_normalize(tape, cov.sigma, cfg.pre_norm, cfg.degenerate_eps)?;
    let ns = newton_schulz(tape, a, cfg.iterations)?;
    let z = post_compensate(tape, ns.y, scale)?;
    upper_tri_vec(tape, z)
}

/// Value-level convenience: pooled vector of an `n×d` matrix.
pub fn sop_vector(x: &Tensor, cfg: &SopConfig) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let fm = FeatureMap::from_matrix(&tape, xv)?;
    let v = sop_forward(&mut tape, &fm, cfg)?;
    Ok(tape.value(v.v).clone())
}

/// Value-level compensated square root `Z` of the covariance of `x`.
pub fn sop_matrix(x: &Tensor, cfg: &SopConfig) -> Result<Tensor> {
    let v = sop_vector(x, cfg)?;
    symmetric_from_upper(v.data(), x.cols())
}

/// Value-level approximate square root of an SPD matrix through the same
/// pre-normalize / iterate / compensate path used on covariances.
pub fn approx_sqrt(sigma: &Tensor, cfg: &SopConfig) -> Result<Tensor> {
    cfg.validate()?;
    let mut tape = Tape::new();
    let s = tape.constant(sigma.clone());
    let (a, scale) = pre_normalize(&mut tape, s, cfg.pre_norm, cfg.degenerate_eps)?;
    let ns = newton_schulz(&mut tape, a, cfg.iterations)?;
    let z = post_compensate(&mut tape, ns.y, scale)?;
    Ok(tape.value(z).clone())
}
