//! Transverse-field Ising model: `H = -sum <ij> sz_i sz_j - h sum_i sx_i`.
//!
//! Gates are imaginary-time propagators for a step `delta`. Two-site gates
//! are stored as `g[k1, k2, b1, b2]`, i.e. a `(k1 k2) x (b1 b2)` matrix with
//! ket indices first.

use crate::error::{Error, Result};
use crate::tensor::linalg::{self, DEFAULT_CUTOFF};
use crate::tensor::{Tensor, C64};

/// Physical dimension of a spin-1/2 site.
pub const PHYS_DIM: usize = 2;

#[derive(Copy, Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Lattice {
    Chain,
    Square,
}

#[derive(Copy, Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct IsingParams {
    pub h: f64,
    pub delta: f64,
    pub lattice: Lattice,
}

impl IsingParams {
    pub fn new(h: f64, delta: f64, lattice: Lattice) -> Result<Self> {
        let p = Self { h, delta, lattice };
        p.validate()?;
        Ok(p)
    }

    pub fn chain(h: f64, delta: f64) -> Result<Self> {
        Self::new(h, delta, Lattice::Chain)
    }

    pub fn square(h: f64, delta: f64) -> Result<Self> {
        Self::new(h, delta, Lattice::Square)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.h.is_finite() || self.h < 0.0 {
            return Err(Error::config("h", format!("must be finite and >= 0, got {}", self.h)));
        }
        // delta = 0 is allowed for identity-gate checks
        if !self.delta.is_finite() || self.delta < 0.0 {
            return Err(Error::config(
                "delta",
                format!("must be finite and > 0, got {}", self.delta),
            ));
        }
        Ok(())
    }
}

pub fn sigma_x() -> Tensor {
    Tensor::from_real(&[2, 2], &[0.0, 1.0, 1.0, 0.0]).unwrap()
}

pub fn sigma_z() -> Tensor {
    Tensor::from_real(&[2, 2], &[1.0, 0.0, 0.0, -1.0]).unwrap()
}

/// Kronecker product of two matrices.
pub fn kron(a: &Tensor, b: &Tensor) -> Tensor {
    let (ar, ac, br, bc) = (a.rows(), a.cols(), b.rows(), b.cols());
    Tensor::from_fn(&[ar * br, ac * bc], |i| {
        a.get(&[i[0] / br, i[1] / bc]) * b.get(&[i[0] % br, i[1] % bc])
    })
}

#[derive(Clone, Debug)]
pub struct TwoSiteGate {
    /// `g[k1, k2, b1, b2]`.
    pub tensor: Tensor,
    /// Operator-Schmidt rank.
    pub kappa: usize,
}

impl TwoSiteGate {
    pub fn matrix(&self) -> Tensor {
        let d = self.tensor.dim(0);
        self.tensor.reshape(&[d * d, d * d]).unwrap()
    }
}

/// `exp(delta sz sz)`, the propagator of one bond.
pub fn interaction_gate(params: &IsingParams) -> TwoSiteGate {
    let zz = kron(&sigma_z(), &sigma_z());
    let m = &Tensor::eye(4).scale_real(params.delta.cosh()) + &zz.scale_real(params.delta.sinh());
    let tensor = m.into_shape(&[2, 2, 2, 2]).unwrap();
    let kappa = operator_schmidt_rank(&tensor);
    TwoSiteGate { tensor, kappa }
}

/// `exp(h delta sx / 2)`.
pub fn field_half_gate(params: &IsingParams) -> Tensor {
    let t = params.h * params.delta / 2.0;
    &Tensor::eye(2).scale_real(t.cosh()) + &sigma_x().scale_real(t.sinh())
}

fn schmidt_matrix(gate: &Tensor) -> Tensor {
    let d = gate.dim(0);
    // (k1, b1) x (k2, b2)
    gate.permute(&[0, 2, 1, 3]).into_shape(&[d * d, d * d]).unwrap()
}

fn operator_schmidt_rank(gate: &Tensor) -> usize {
    linalg::svd(&schmidt_matrix(gate), None, DEFAULT_CUTOFF)
        .map(|r| r.rank())
        .unwrap_or(gate.dim(0) * gate.dim(0))
}

/// Splits a two-site gate as `g[k1,k2,b1,b2] = sum_a L[a,k1,b1] R[a,k2,b2]`
/// with the singular weights shared as square roots by both factors.
pub fn operator_schmidt_split(gate: &TwoSiteGate) -> Result<(Tensor, Tensor)> {
    let d = gate.tensor.dim(0);
    let dec = linalg::svd(&schmidt_matrix(&gate.tensor), None, DEFAULT_CUTOFF)?;
    let k = dec.rank();
    let root: Vec<f64> = dec.s.iter().map(|s| s.sqrt()).collect();
    let left = dec.u.scale_axis(1, &root).transpose().into_shape(&[k, d, d])?;
    let right = dec.vdag.scale_axis(0, &root).into_shape(&[k, d, d])?;
    Ok((left, right))
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn adaptive_simpson(
    f: &impl Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: usize,
) -> Result<f64> {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    let diff = left + right - whole;
    if diff.abs() <= 15.0 * tol {
        return Ok(left + right + diff / 15.0);
    }
    if depth == 0 {
        return Err(Error::Numeric(format!(
            "quadrature did not converge on [{a}, {b}] (error estimate {:e})",
            diff.abs() / 15.0
        )));
    }
    Ok(adaptive_simpson(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)?
        + adaptive_simpson(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)?)
}

/// Ground-state energy per link of the infinite chain from the exact
/// fermionic dispersion `eps(k) = 2 sqrt(1 + h^2 - 2 h cos k)`.
pub fn exact_energy_1d(h: f64) -> Result<f64> {
    if !h.is_finite() || h < 0.0 {
        return Err(Error::config("h", "must be finite and >= 0"));
    }
    let f = |k: f64| (1.0 + h * h - 2.0 * h * k.cos()).max(0.0).sqrt();
    let (a, b) = (0.0, std::f64::consts::PI);
    let (fa, fm, fb) = (f(a), f(0.5 * (a + b)), f(b));
    let whole = simpson(a, b, fa, fm, fb);
    let integral = adaptive_simpson(&f, a, b, fa, fm, fb, whole, 1e-12, 50)?;
    Ok(-integral / std::f64::consts::PI)
}

pub const MAX_EXACT_SITES: usize = 14;

fn ring_apply(n: usize, h: f64, v: &[f64], out: &mut [f64]) {
    for (s, o) in out.iter_mut().enumerate() {
        let mut diag = 0.0;
        for i in 0..n {
            let j = (i + 1) % n;
            let zi = if s >> i & 1 == 0 { 1.0 } else { -1.0 };
            let zj = if s >> j & 1 == 0 { 1.0 } else { -1.0 };
            diag -= zi * zj;
        }
        let mut acc = diag * v[s];
        for i in 0..n {
            acc -= h * v[s ^ (1 << i)];
        }
        *o = acc;
    }
}

/// Exact ground-state energy per link of the periodic `n`-site chain.
///
/// The ring has `n` bonds `(i, i+1 mod n)`; for `n = 2` the two bonds join
/// the same pair of sites.
pub fn exact_diag_small(h: f64, n_sites: usize) -> Result<f64> {
    if n_sites < 2 || n_sites > MAX_EXACT_SITES {
        return Err(Error::Resource(format!(
            "exact diagonalization supports 2..={MAX_EXACT_SITES} sites, got {n_sites}"
        )));
    }
    let dim = 1usize << n_sites;
    // Lanczos with full reorthogonalization on the real symmetric H.
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut alpha = Vec::new();
    let mut beta: Vec<f64> = Vec::new();
    let mut v: Vec<f64> = (0..dim).map(|s| 1.0 + 0.1 * ((s * 7919) % 13) as f64).collect();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= nv);
    let mut w = vec![0.0; dim];
    let mut last = f64::INFINITY;
    let max_k = dim.min(300);
    for k in 0..max_k {
        ring_apply(n_sites, h, &v, &mut w);
        let a: f64 = w.iter().zip(&v).map(|(x, y)| x * y).sum();
        alpha.push(a);
        basis.push(v.clone());
        for _ in 0..2 {
            for b in &basis {
                let c: f64 = w.iter().zip(b).map(|(x, y)| x * y).sum();
                w.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
            }
        }
        let tri = nalgebra::DMatrix::<f64>::from_fn(k + 1, k + 1, |i, j| {
            if i == j {
                alpha[i]
            } else if i + 1 == j {
                beta[i]
            } else if j + 1 == i {
                beta[j]
            } else {
                0.0
            }
        });
        let e0 = tri.symmetric_eigenvalues().iter().cloned().fold(f64::INFINITY, f64::min);
        let bnext = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (e0 - last).abs() < 1e-13 * e0.abs().max(1.0) || bnext < 1e-12 || k + 1 == max_k {
            return Ok(e0 / n_sites as f64);
        }
        last = e0;
        beta.push(bnext);
        v = w.iter().map(|x| x / bnext).collect();
    }
    unreachable!("loop returns at max_k")
}

/// Dense Hamiltonian of the periodic chain, for small oracles in tests.
pub fn ring_hamiltonian(h: f64, n_sites: usize) -> Tensor {
    let dim = 1usize << n_sites;
    let mut m = Tensor::zeros(&[dim, dim]);
    let mut e = vec![0.0; dim];
    let mut col = vec![0.0; dim];
    for j in 0..dim {
        e.iter_mut().for_each(|x| *x = 0.0);
        e[j] = 1.0;
        ring_apply(n_sites, h, &e, &mut col);
        for (i, &x) in col.iter().enumerate() {
            if x != 0.0 {
                m.set(&[i, j], C64::new(x, 0.0));
            }
        }
    }
    m
}

/// `exp(t m)` for Hermitian `m`.
pub fn expm_hermitian(m: &Tensor, t: f64) -> Result<Tensor> {
    let (vals, v) = linalg::eigh(m)?;
    let ev: Vec<f64> = vals.iter().map(|x| (t * x).exp()).collect();
    v.scale_axis(1, &ev).matmul(&v.dagger())
}
