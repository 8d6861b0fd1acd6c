//! Matrix decompositions on rank-2 [`Tensor`]s.
//!
//! Singular and eigen-vectors follow one phase convention: in every vector
//! the entry of largest magnitude is real and positive, ties resolved by the
//! lowest index. Equal singular values and eigenvalues keep the order in
//! which the underlying solver produced them (stable sort).

use nalgebra::{DMatrix, DVector, Schur, SymmetricEigen, SVD};

use super::{ Tensor, C64, ONE, ZERO};
use crate::error::{Error, Result};

/// Default relative cutoff for pseudo-inverses and for discarding tiny
/// Schmidt weights.
pub const DEFAULT_CUTOFF: f64 = 1e-12;

const SOLVER_MAX_ITER: usize = 100_000;

#[derive(Clone, Debug)]
pub struct SvdResult {
    pub u: Tensor,
    pub s: Vec<f64>,
    pub vdag: Tensor,
    /// Discarded squared weight over total squared weight.
    pub truncation_weight: f64,
}

impl SvdResult {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    pub fn reconstruct(&self) -> Tensor {
        let us = self.u.scale_axis(1, &self.s);
        us.matmul(&self.vdag).expect("svd factors are compatible")
    }
}

pub(crate) fn to_na(m: &Tensor) -> DMatrix<C64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.data())
}

#[cfg(test)]
pub(crate) fn from_na(m: &DMatrix<C64>) -> Tensor {
    let (r, c) = m.shape();
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            data.push(m[(i, j)]);
        }
    }
    Tensor::new(vec![r, c], data).expect("shape matches")
}

fn require_matrix(m: &Tensor, what: &str) -> Result<()> {
    if m.rank() != 2 {
        return Err(Error::dim(format!("{what} needs a matrix, got shape {:?}", m.shape())));
    }
    if !m.is_finite() {
        return Err(Error::Numeric(format!("{what}: non-finite input")));
    }
    Ok(())
}

fn argmax_abs(values: impl Iterator<Item = C64>) -> (usize, C64) {
    let mut best = (0, ZERO);
    let mut best_abs = -1.0;
    for (k, z) in values.enumerate() {
        let a = z.norm();
        if a > best_abs * (1.0 + 1e-12) {
            best_abs = a;
            best = (k, z);
        }
    }
    best
}

/// Singular value decomposition with optional truncation.
///
/// At most `max_keep` values are kept (all if `None`), and values below
/// `cutoff * s[0]` are dropped. At least one value is always kept.
pub fn svd(m: &Tensor, max_keep: Option<usize>, cutoff: f64) -> Result<SvdResult> {
    require_matrix(m, "svd")?;
    let (rows, cols) = (m.rows(), m.cols());
    let dec = SVD::try_new(to_na(m), true, true, 5.0 * f64::EPSILON, SOLVER_MAX_ITER).ok_or_else(|| {
        Error::Numeric(format!(
            "svd of {rows}x{cols} matrix did not converge (max |m| = {:e})",
            m.max_abs()
        ))
    })?;
    let u = dec.u.expect("requested u");
    let v_t = dec.v_t.expect("requested v");
    let sv = dec.singular_values;

    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&a, &b| sv[b].partial_cmp(&sv[a]).unwrap_or(std::cmp::Ordering::Equal));

    let total: f64 = sv.iter().map(|s| s * s).sum();
    let s0 = sv[order[0]];
    let mut keep = order
        .iter()
        .take_while(|&&k| sv[k] > cutoff * s0)
        .count()
        .max(1);
    if let Some(mk) = max_keep {
        keep = keep.min(mk.max(1));
    }
    let kept_sq: f64 = order[..keep].iter().map(|&k| sv[k] * sv[k]).sum();
    let truncation_weight = if total > 0.0 {
        ((total - kept_sq) / total).clamp(0.0, 1.0)
    } else {
        0.0
    };

    let mut ut = Tensor::zeros(&[rows, keep]);
    let mut vt = Tensor::zeros(&[keep, cols]);
    let mut s = Vec::with_capacity(keep);
    for (j, &k) in order[..keep].iter().enumerate() {
        let (_, zmax) = argmax_abs((0..rows).map(|i| u[(i, k)]));
        let phase = if zmax.norm() > 0.0 {
            zmax.conj() / zmax.norm()
        } else {
            ONE
        };
        for i in 0..rows {
            ut.set(&[i, j], u[(i, k)] * phase);
        }
        let cphase = phase.conj();
        for i in 0..cols {
            vt.set(&[j, i], v_t[(k, i)] * cphase);
        }
        s.push(sv[k]);
    }
    Ok(SvdResult {
        u: ut,
        s,
        vdag: vt,
        truncation_weight,
    })
}

/// Eigen-decomposition of a Hermitian matrix: eigenvalues in descending
/// order and the matching eigenvectors as columns.
pub fn eigh(m: &Tensor) -> Result<(Vec<f64>, Tensor)> {
    require_matrix(m, "eigh")?;
    let n = m.rows();
    if m.cols() != n {
        return Err(Error::dim(format!("eigh needs a square matrix, got {:?}", m.shape())));
    }
    let scale = m.max_abs().max(1.0);
    let defect = m.hermiticity_defect();
    if defect > 1e-10 * scale {
        return Err(Error::ContractViolation(format!(
            "eigh input is not Hermitian (defect {defect:e})"
        )));
    }
    let h = m.hermitian_part();
    let dec = SymmetricEigen::try_new(to_na(&h), f64::EPSILON, SOLVER_MAX_ITER)
        .ok_or_else(|| Error::Numeric(format!("eigh of {n}x{n} matrix did not converge")))?;

    let mut order: Vec<usize> = (0..n).collect();
    let ev = &dec.eigenvalues;
    order.sort_by(|&a, &b| ev[b].partial_cmp(&ev[a]).unwrap_or(std::cmp::Ordering::Equal));

    let mut vecs = Tensor::zeros(&[n, n]);
    let mut vals = Vec::with_capacity(n);
    for (j, &k) in order.iter().enumerate() {
        let (_, zmax) = argmax_abs((0..n).map(|i| dec.eigenvectors[(i, k)]));
        let phase = if zmax.norm() > 0.0 {
            zmax.conj() / zmax.norm()
        } else {
            ONE
        };
        for i in 0..n {
            vecs.set(&[i, j], dec.eigenvectors[(i, k)] * phase);
        }
        vals.push(ev[k]);
    }
    Ok((vals, vecs))
}

/// Moore-Penrose pseudo-inverse; singular values below `cutoff * s[0]`
/// are treated as zero.
pub fn pinv(m: &Tensor, cutoff: f64) -> Result<Tensor> {
    let dec = svd(m, None, 0.0)?;
    let s0 = dec.s[0];
    let inv: Vec<f64> = dec
        .s
        .iter()
        .map(|&s| if s > cutoff * s0 && s > 0.0 { 1.0 / s } else { 0.0 })
        .collect();
    // V diag(1/s) U^†
    let v = dec.vdag.dagger().scale_axis(1, &inv);
    v.matmul(&dec.u.dagger())
}

/// Unitary factor `W` of the polar decomposition `m = W P`.
pub fn polar_unitary(m: &Tensor) -> Result<Tensor> {
    let dec = svd(m, None, 0.0)?;
    if dec.rank() != m.rows().min(m.cols()) {
        return Err(Error::Numeric("polar decomposition lost rank".into()));
    }
    dec.u.matmul(&dec.vdag)
}

/// Dominant eigenpair of a linear map found by [`dominant_eigenpair`].
#[derive(Clone, Debug)]
pub struct DominantEig {
    pub value: C64,
    pub vector: Tensor,
    /// Second-largest Ritz value in magnitude, when the Krylov space had one.
    pub subdominant: Option<C64>,
    pub applications: usize,
    pub residual: f64,
}

const KRYLOV_DIM: usize = 20;

fn ritz_eigen(h: &DMatrix<C64>) -> Result<Vec<C64>> {
    let k = h.nrows();
    if k == 1 {
        return Ok(vec![h[(0, 0)]]);
    }
    let schur = Schur::try_new(h.clone(), f64::EPSILON, SOLVER_MAX_ITER)
        .ok_or_else(|| Error::Numeric("Hessenberg Schur decomposition failed".into()))?;
    let (_, t) = schur.unpack();
    let mut vals: Vec<C64> = (0..k).map(|i| t[(i, i)]).collect();
    // Any 2x2 block left on the diagonal is resolved explicitly.
    let mut i = 0;
    while i + 1 < k {
        if t[(i + 1, i)].norm() > 1e-12 * (t[(i, i)].norm() + t[(i + 1, i + 1)].norm()) {
            let (a, b, c, d) = (t[(i, i)], t[(i, i + 1)], t[(i + 1, i)], t[(i + 1, i + 1)]);
            let tr = a + d;
            let disc = ((a - d) * (a - d) + 4.0 * b * c).sqrt();
            vals[i] = (tr + disc) * 0.5;
            vals[i + 1] = (tr - disc) * 0.5;
            i += 2;
        } else {
            i += 1;
        }
    }
    Ok(vals)
}

fn hessenberg_eigvec(h: &DMatrix<C64>, theta: C64) -> DVector<C64> {
    let k = h.nrows();
    let shift = theta + C64::new(1e-13, 1e-13) * theta.norm().max(1e-300);
    let mut a = h.clone();
    for i in 0..k {
        a[(i, i)] -= shift;
    }
    let lu = a.lu();
    let mut y = DVector::from_element(k, ONE);
    for _ in 0..3 {
        match lu.solve(&y) {
            Some(z) if z.iter().all(|c| c.re.is_finite() && c.im.is_finite()) => {
                let n = z.norm();
                y = z / C64::new(n, 0.0);
            }
            _ => break,
        }
    }
    y
}

fn flat_norm(v: &[C64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// `sum conj(a_i) b_i`, with split accumulators so the loop vectorizes.
fn flat_inner(a: &[C64], b: &[C64]) -> C64 {
    let mut acc = [0.0f64; 8];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for t in 0..4 {
            acc[t] += x[t].re * y[t].re + x[t].im * y[t].im;
            acc[4 + t] += x[t].re * y[t].im - x[t].im * y[t].re;
        }
    }
    let mut z = C64::new(acc[..4].iter().sum(), acc[4..].iter().sum());
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        z += x.conj() * y;
    }
    z
}

/// `y += alpha x`.
fn flat_axpy(alpha: C64, x: &[C64], y: &mut [C64]) {
    for (yk, xk) in y.iter_mut().zip(x) {
        *yk += alpha * xk;
    }
}

/// Eigenvalue of largest magnitude of a shape-preserving linear map and
/// its eigenvector, by restarted Arnoldi iteration.
///
/// `max_iter` bounds the number of applications of the map. On success
/// `|apply(v) - value v| <= tol |value|`, `v` has unit norm and its
/// largest-magnitude entry is real positive.
pub fn dominant_eigenpair<F>(mut apply: F, v0: &Tensor, tol: f64, max_iter: usize) -> Result<DominantEig>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    let shape = v0.shape().to_vec();
    let n = v0.len();
    let n0 = v0.norm();
    if n0 == 0.0 || !n0.is_finite() {
        return Err(Error::Numeric("dominant_eigenpair needs a nonzero start vector".into()));
    }
    let mut x: Vec<C64> = v0.data().iter().map(|z| z / n0).collect();
    let mut applications = 0usize;
    let m = KRYLOV_DIM.min(n);

    let wrap = |data: Vec<C64>| Tensor::new(shape.clone(), data).expect("shape preserved");

    loop {
        // Basis vectors are the rows of a row-major `k x n` matrix.
        let mut basis: Vec<C64> = x.clone();
        let mut h = DMatrix::<C64>::zeros(m + 1, m);
        let mut k_used = m;
        for j in 0..m {
            let w_t = apply(&wrap(basis[j * n..(j + 1) * n].to_vec()))?;
            applications += 1;
            if w_t.shape() != shape.as_slice() {
                return Err(Error::dim("map changed the vector shape"));
            }
            let mut w = w_t.into_data();
            // Classical Gram-Schmidt, repeated when cancellation is severe.
            let w_norm = flat_norm(&w);
            for pass in 0..2 {
                if pass == 1 && flat_norm(&w) > 0.7 * w_norm {
                    break;
                }
                let c: Vec<C64> = basis.chunks(n).map(|b| flat_inner(b, &w)).collect();
                for (b, ci) in basis.chunks(n).zip(&c) {
                    flat_axpy(-*ci, b, &mut w);
                }
                for (i, ci) in c.iter().enumerate() {
                    h[(i, j)] += ci;
                }
            }
            let beta = flat_norm(&w);
            h[(j + 1, j)] = C64::new(beta, 0.0);
            let col_scale: f64 = (0..=j).map(|i| h[(i, j)].norm()).fold(beta, f64::max);
            if beta <= 1e-13 * col_scale.max(1e-300) || !beta.is_finite() {
                k_used = j + 1;
                break;
            }
            if j + 1 < m {
                basis.extend(w.iter().map(|z| z / beta));
            }
            if applications >= max_iter {
                k_used = j + 1;
                break;
            }
        }

        let hk = h.view((0, 0), (k_used, k_used)).into_owned();
        let ritz = ritz_eigen(&hk)?;
        let mut idx: Vec<usize> = (0..ritz.len()).collect();
        idx.sort_by(|&a, &b| {
            ritz[b]
                .norm()
                .partial_cmp(&ritz[a].norm())
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let theta = ritz[idx[0]];
        let subdominant = idx.get(1).map(|&i| ritz[i]);
        let y = hessenberg_eigvec(&hk, theta);

        let mut xn = vec![ZERO; n];
        for (i, b) in basis.chunks(n).take(k_used).enumerate() {
            for (xk, bk) in xn.iter_mut().zip(b) {
                *xk += y[i] * bk;
            }
        }
        let nn = flat_norm(&xn);
        if nn == 0.0 || !nn.is_finite() {
            return Err(Error::Numeric("Arnoldi produced a null Ritz vector".into()));
        }
        for z in xn.iter_mut() {
            *z /= nn;
        }

        // True residual of the Ritz pair.
        let ax = apply(&wrap(xn.clone()))?.into_data();
        applications += 1;
        let res: f64 = ax
            .iter()
            .zip(&xn)
            .map(|(a, v)| (a - theta * v).norm_sqr())
            .sum::<f64>()
            .sqrt();
        let last_residual = res / theta.norm().max(1e-300);
        if res <= tol * theta.norm() || theta.norm() == 0.0 {
            let mut vector = wrap(xn);
            vector.fix_phase();
            return Ok(DominantEig {
                value: theta,
                vector,
                subdominant,
                applications,
                residual: last_residual,
            });
        }
        if applications >= max_iter {
            return Err(Error::Convergence {
                what: "dominant eigenpair".into(),
                iterations: applications,
                last_change: last_residual,
            });
        }
        // Restart from the Ritz vector nudged by its image, which keeps
        // the iteration moving when the Krylov space is exhausted.
        x = xn
            .iter()
            .zip(&ax)
            .map(|(v, a)| v + a / theta * 1e-3)
            .collect();
        let nx = flat_norm(&x);
        for z in x.iter_mut() {
            *z /= nx;
        }
    }
}

/// Dense dominant eigenpair of a square matrix via its map.
pub fn dominant_eigenpair_matrix(m: &Tensor, tol: f64, max_iter: usize) -> Result<DominantEig> {
    let n = m.rows();
    let v0 = Tensor::from_fn(&[n], |i| C64::new(1.0 + 0.01 * i[0] as f64, 0.0));
    dominant_eigenpair(
        |v| {
            let col = v.reshape(&[n, 1])?;
            m.matmul(&col)?.into_shape(&[n])
        },
        &v0,
        tol,
        max_iter,
    )
}
