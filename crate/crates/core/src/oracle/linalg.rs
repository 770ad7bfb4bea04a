use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub const MAX_SWEEPS: usize = 100;
/// Off-diagonal stopping threshold relative to `‖S‖_F`.
pub const OFF_DIAG_TOL: f64 = 1e-12;
pub const PSD_CLAMP: f64 = 1e-10;
pub const NEGATIVE_EIG_TOL: f64 = 1e-6;

/// Symmetric eigendecomposition `S = U diag(λ) Uᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct EigResult {
    pub d: usize,
    /// Descending.
    pub eigenvalues: Vec<f64>,
    /// Row-major `d×d`; column `k` is the eigenvector of `eigenvalues[k]`.
    pub eigenvectors: Vec<f64>,
}

impl EigResult {
    /// `U f(Λ) Uᵀ`.
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> Vec<f64> {
        let d = self.d;
        let u = &self.eigenvectors;
        let fl: Vec<f64> = self.eigenvalues.iter().map(|&l| f(l)).collect();
        let mut out = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                let mut acc = 0.0;
                for k in 0..d {
                    acc += u[i * d + k] * fl[k] * u[j * d + k];
                }
                out[i * d + j] = acc;
            }
        }
        out
    }

    pub fn reconstruct(&self) -> Vec<f64> {
        self.reconstruct_with(|l| l)
    }
}

pub fn frobenius(a: &[f64]) -> f64 {
    libm::sqrt(a.iter().map(|v| v * v).sum())
}

pub fn mat_mul(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            out[i * d + j] = (0..d).map(|k| a[i * d + k] * b[k * d + j]).sum();
        }
    }
    out
}

pub fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    libm::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

fn max_off_diag(a: &[f64], d: usize) -> f64 {
    let mut m = 0.0_f64;
    for i in 0..d {
        for j in (i + 1)..d {
            m = m.max(a[i * d + j].abs());
        }
    }
    m
}

/// Cyclic Jacobi rotations over all `(p, q)` pairs until the largest
/// off-diagonal entry falls below `1e-12·‖S‖_F`.
pub fn jacobi_eigh(s: &[f64], d: usize) -> Result<EigResult> {
    if s.len() != d * d {
        return Err(Error::Dimension {
            op: "jacobi_eigh",
            lhs: vec![d, d],
            rhs: vec![s.len()],
        });
    }
    for i in 0..d {
        for j in (i + 1)..d {
            let gap = (s[i * d + j] - s[j * d + i]).abs();
            if gap > 1e-8 {
                return Err(Error::contract("jacobi_eigh", format!("input asymmetric by {gap:e}")));
            }
        }
    }
    let mut a = s.to_vec();
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    let tol = OFF_DIAG_TOL * frobenius(s);
    let mut converged = max_off_diag(&a, d) <= tol;
    let mut sweeps = 0;
    while !converged && sweeps < MAX_SWEEPS {
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = a[p * d + q];
                if apq == 0.0 {
                    continue;
                }
                let tau = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + libm::sqrt(1.0 + tau * tau))
                } else {
                    -1.0 / (-tau + libm::sqrt(1.0 + tau * tau))
                };
                let c = 1.0 / libm::sqrt(1.0 + t * t);
                let sn = t * c;
                // A ← Jᵀ A J on rows/cols p, q
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - sn * akq;
                    a[k * d + q] = sn * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - sn * aqk;
                    a[q * d + k] = sn * apk + c * aqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - sn * vkq;
                    v[k * d + q] = sn * vkp + c * vkq;
                }
            }
        }
        sweeps += 1;
        converged = max_off_diag(&a, d) <= tol;
    }
    if !converged {
        return Err(Error::NoConvergence {
            op: "jacobi_eigh",
            sweeps,
        });
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| a[j * d + j].total_cmp(&a[i * d + i]));
    let eigenvalues = order.iter().map(|&i| a[i * d + i]).collect();
    let mut eigenvectors = vec![0.0; d * d];
    for (col, &src) in order.iter().enumerate() {
        for k in 0..d {
            eigenvectors[k * d + col] = v[k * d + src];
        }
    }
    Ok(EigResult {
        d,
        eigenvalues,
        eigenvectors,
    })
}

/// Principal square root `U diag(√λ) Uᵀ` of a PSD matrix.
pub fn matrix_sqrt_exact(s: &[f64], d: usize) -> Result<Vec<f64>> {
    let eig = jacobi_eigh(s, d)?;
    let scale = eig.eigenvalues.first().copied().unwrap_or(0.0).abs().max(1.0);
    if let Some(&worst) = eig.eigenvalues.last() {
        if worst < -NEGATIVE_EIG_TOL * scale {
            return Err(Error::NotPsd { eigenvalue: worst });
        }
    }
    Ok(eig.reconstruct_with(|l| libm::sqrt(l.max(0.0))))
}

/// Random covariance-like SPD matrix `BBᵀ/k + floor·I` with `B` a `d×k`
/// standard normal draw and `k = 8d`, the sample-to-channel ratio of the
/// default pooling layer.
pub fn random_spd(d: usize, seed: u64, floor: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x0a);
    let k = 8 * d;
    let b: Vec<f64> = (0..d * k).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut s = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let dot: f64 = (0..k).map(|t| b[i * k + t] * b[j * k + t]).sum();
            s[i * d + j] = dot / k as f64;
        }
        s[i * d + i] += floor;
    }
    // exact symmetry
    for i in 0..d {
        for j in (i + 1)..d {
            s[j * d + i] = s[i * d + j];
        }
    }
    s
}
