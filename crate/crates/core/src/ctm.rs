//! Corner transfer matrix environment of a one-site iPEPS.
//!
//! Environment tensors follow a clockwise convention. Corners `C[a, b]` and
//! edges `T[a, b, m]` join their counter-clockwise neighbour through `a`,
//! their clockwise neighbour through `b`, and edges reach the site through
//! `m`. Going clockwise from the top left: `C1 T1 C2 T2 C3 T3 C4 T4`. With
//! this convention a quarter turn of the lattice is a relabelling, so only
//! the left move is written out.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ipeps::{DOWN, LEFT, RIGHT, UP};
use crate::tensor::linalg;
use crate::tensor::{contract, Tensor, C64, ONE};

/// Singular values of the two-half product below this fraction of the
/// largest are dropped.
const PROJECTOR_CUTOFF: f64 = 1e-10;

/// Ket and bra layers contracted over the physical index, with composite
/// axes `(l l'), (r r'), (d d'), (u u')`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DoubleTensor {
    pub a: Tensor,
}

/// `a = sum conj(θ[.., s']) O[s', s] θ[.., s]`, with `O = I` when absent.
fn double_layer(theta: &Tensor, op: Option<&Tensor>) -> Result<DoubleTensor> {
    if theta.rank() != 5 {
        return Err(Error::dim(format!("site tensor must have rank 5, got {:?}", theta.shape())));
    }
    let ket = match op {
        Some(o) => theta.apply_matrix(4, o)?,
        None => theta.clone(),
    };
    let s = theta.shape();
    let a = contract(&ket, &theta.conj(), &[(4, 4)])?
        .permute(&[0, 4, 1, 5, 2, 6, 3, 7])
        .into_shape(&[s[0] * s[0], s[1] * s[1], s[2] * s[2], s[3] * s[3]])?;
    Ok(DoubleTensor { a })
}

/// Double tensor of a site tensor `θ[l, r, d, u, s]`.
pub fn build_double(theta: &Tensor) -> Result<DoubleTensor> {
    double_layer(theta, None)
}

/// Double tensor with the one-site operator `op` between the layers.
pub fn build_double_op(theta: &Tensor, op: &Tensor) -> Result<DoubleTensor> {
    double_layer(theta, Some(op))
}

impl DoubleTensor {
    /// The double tensor of the lattice turned a quarter counter-clockwise:
    /// the old up leg becomes the new left leg.
    pub fn rotated(&self) -> DoubleTensor {
        DoubleTensor {
            a: self.a.permute(&[UP, DOWN, LEFT, RIGHT]),
        }
    }

    /// Largest deviation from the ket/bra exchange symmetry.
    pub fn hermiticity_defect(&self) -> f64 {
        let s = self.a.shape();
        let dims: Vec<usize> = s.iter().map(|&n| (n as f64).sqrt().round() as usize).collect();
        let split = self
            .a
            .reshape(&[dims[0], dims[0], dims[1], dims[1], dims[2], dims[2], dims[3], dims[3]])
            .unwrap();
        let swapped = split.permute(&[1, 0, 3, 2, 5, 4, 7, 6]).conj();
        split.max_diff(&swapped)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CtmEnvironment {
    /// `C1 C2 C3 C4`, clockwise from the top left.
    pub c: [Tensor; 4],
    /// `T1 T2 T3 T4`: top, right, bottom, left.
    pub t: [Tensor; 4],
    pub chi_env: usize,
    pub sweeps: usize,
    /// Normalized singular values of the four corners after the last sweep.
    pub spectra: Vec<Vec<f64>>,
}

/// Sums over ket/bra diagonal pairs of one composite axis.
fn trace_pairs(t: &Tensor, axis: usize) -> Result<Tensor> {
    let n = t.dim(axis);
    let d = (n as f64).sqrt().round() as usize;
    let mut w = Tensor::zeros(&[n]);
    for i in 0..d {
        w.set(&[i * d + i], ONE);
    }
    contract(t, &w, &[(axis, 0)])
}

impl CtmEnvironment {
    /// Boundary of identity pairs: every outward leg is traced.
    pub fn initial(a: &DoubleTensor, chi_env: usize) -> Result<Self> {
        let a = &a.a;
        // C1 keeps (d, r), T1 keeps (l, r, d), and so on clockwise.
        let c1 = trace_pairs(&trace_pairs(a, UP)?, LEFT)?; // [r, d]
        let c2 = trace_pairs(&trace_pairs(a, UP)?, RIGHT)?; // [l, d]
        let c3 = trace_pairs(&trace_pairs(a, DOWN)?, RIGHT)?; // [l, u]
        let c4 = trace_pairs(&trace_pairs(a, DOWN)?, LEFT)?; // [r, u]
        let t1 = trace_pairs(a, UP)?; // [l, r, d]
        let t2 = trace_pairs(a, RIGHT)?; // [l, d, u]
        let t3 = trace_pairs(a, DOWN)?; // [l, r, u]
        let t4 = trace_pairs(a, LEFT)?; // [r, d, u]
        let c = [
            c1.permute(&[1, 0]),    // [a: down, b: right]
            c2,                      // [a: left, b: down]
            c3.permute(&[1, 0]),    // [a: up, b: left]
            c4,                      // [a: right, b: up]
        ];
        let t = [
            t1,                      // [a: left, b: right, m: down]
            t2.permute(&[2, 1, 0]), // [a: up, b: down, m: left]
            t3.permute(&[1, 0, 2]), // [a: right, b: left, m: up]
            t4.permute(&[1, 2, 0]), // [a: down, b: up, m: right]
        ];
        let mut env = Self {
            c,
            t,
            chi_env,
            sweeps: 0,
            spectra: Vec::new(),
        };
        env.normalize();
        Ok(env)
    }

    /// The environment of the lattice turned a quarter counter-clockwise.
    pub fn rotated(&self) -> CtmEnvironment {
        let [c1, c2, c3, c4] = self.c.clone();
        let [t1, t2, t3, t4] = self.t.clone();
        CtmEnvironment {
            c: [c2, c3, c4, c1],
            t: [t2, t3, t4, t1],
            chi_env: self.chi_env,
            sweeps: self.sweeps,
            spectra: self.spectra.clone(),
        }
    }

    fn rotated_back(&self) -> CtmEnvironment {
        self.rotated().rotated().rotated()
    }

    fn normalize(&mut self) {
        for m in self.c.iter_mut().chain(self.t.iter_mut()) {
            let n = m.norm();
            if n > 0.0 {
                m.scale_in_place(1.0 / n);
            }
        }
    }

    /// Whether the edges can absorb `a`.
    fn matches(&self, a: &DoubleTensor) -> bool {
        self.t[0].dim(2) == a.a.dim(UP)
            && self.t[1].dim(2) == a.a.dim(RIGHT)
            && self.t[2].dim(2) == a.a.dim(DOWN)
            && self.t[3].dim(2) == a.a.dim(LEFT)
    }

    fn corner_spectra(&self) -> Result<Vec<Vec<f64>>> {
        self.c
            .iter()
            .map(|c| {
                let mut s = linalg::svd(c, None, 0.0)?.s;
                let n: f64 = s.iter().map(|x| x * x).sum::<f64>().sqrt();
                s.iter_mut().for_each(|x| *x /= n);
                Ok(s)
            })
            .collect()
    }
}

/// `P1[c, k]`, `P2[k, c]` with `upper P1 P2 lower` the best rank-`keep`
/// approximation of `upper lower`.
fn oblique_projectors(upper: &Tensor, lower: &Tensor, keep: usize) -> Result<(Tensor, Tensor)> {
    let dec = linalg::svd(&upper.matmul(lower)?, Some(keep), PROJECTOR_CUTOFF)?;
    let inv: Vec<f64> = dec.s.iter().map(|s| 1.0 / s.sqrt()).collect();
    let p1 = lower.matmul(&dec.vdag.dagger())?.scale_axis(1, &inv);
    let p2 = dec.u.dagger().matmul(upper)?.scale_axis(0, &inv);
    Ok((p1, p2))
}

/// Absorbs one column of `a` into the left boundary.
fn left_move(env: &mut CtmEnvironment, a: &Tensor) -> Result<()> {
    let [c1, _, _, c4] = &env.c;
    let [t1, _, t3, t4] = &env.t;
    let (chi_up, chi_dn) = (c1.dim(0), c4.dim(1));
    let (du, dd, dr) = (a.dim(UP), a.dim(DOWN), a.dim(RIGHT));
    // C1 T1 -> [(C1.a, T1.m), T1.b]
    let c1t = contract(c1, t1, &[(1, 0)])?.permute(&[0, 2, 1]);
    let nb = c1t.dim(2);
    let c1t = c1t.into_shape(&[chi_up * du, nb])?;
    // T3 C4 -> [T3.a, (C4.b, T3.m)]
    let c4t = contract(t3, c4, &[(1, 0)])?.permute(&[0, 2, 1]);
    let na = c4t.dim(0);
    let c4t = c4t.into_shape(&[na, chi_dn * dd])?;
    // T4 a -> [(T4.a, a.d), (T4.b, a.u), a.r]
    let t4a = contract(t4, a, &[(2, LEFT)])?; // [T4.a, T4.b, r, d, u]
    let t4a = t4a.permute(&[0, 3, 1, 4, 2]).into_shape(&[chi_dn * dd, chi_up * du, dr])?;

    // Enlarged corners C1 T1 T4 a and C4 T3 T4 a; the cut through the
    // left column is projected onto their dominant spaces.
    let e1 = contract(&contract(c1, t1, &[(1, 0)])?, t4, &[(0, 1)])?; // [T1.b, T1.m, T4.a, T4.m]
    let e1 = contract(&e1, a, &[(1, UP), (3, LEFT)])?.permute(&[1, 3, 0, 2]); // [T4.a, d, T1.b, r]
    let e1 = e1.into_shape(&[chi_dn * dd, nb * dr])?;
    let e4 = contract(&contract(t3, c4, &[(1, 0)])?, t4, &[(2, 0)])?; // [T3.a, T3.m, T4.b, T4.m]
    let e4 = contract(&e4, a, &[(1, DOWN), (3, LEFT)])?.permute(&[0, 2, 1, 3]); // [T3.a, r, T4.b, u]
    let e4 = e4.into_shape(&[na * dr, chi_up * du])?;
    // T4 chains with itself, so both cuts share one projector pair,
    // built from the two halves of a two-row column.
    let upper = e1.transpose().normalized(); // [x, c]
    let lower = e4.transpose().normalized(); // [c, y]
    let (p1, p2) = oblique_projectors(&upper, &lower, env.chi_env)?;
    let new_c1 = p1.transpose().matmul(&c1t)?;
    let new_c4 = c4t.matmul(&p2.transpose())?;
    let new_t4 = contract(&p1, &t4a, &[(0, 0)])?; // [k1, (T4.b, a.u), r]
    let new_t4 = contract(&new_t4, &p2, &[(1, 1)])?.permute(&[0, 2, 1]); // [k1, k2, r]
    env.c[0] = new_c1;
    env.c[3] = new_c4;
    env.t[3] = new_t4;
    for i in [0, 3] {
        let n = env.c[i].norm();
        env.c[i].scale_in_place(1.0 / n);
    }
    let n = env.t[3].norm();
    env.t[3].scale_in_place(1.0 / n);
    if !env.c[0].is_finite() || !env.t[3].is_finite() || !env.c[3].is_finite() {
        return Err(Error::Numeric("CTM move produced non-finite tensors".into()));
    }
    Ok(())
}

/// One sweep: left, top, right and bottom moves.
pub fn sweep(env: &CtmEnvironment, a: &DoubleTensor) -> Result<CtmEnvironment> {
    let mut e = env.clone();
    let mut x = a.clone();
    for _ in 0..4 {
        left_move(&mut e, &x.a)?;
        // Turning clockwise brings the next boundary to the left.
        e = e.rotated_back();
        x = DoubleTensor {
            a: x.a.permute(&[DOWN, UP, RIGHT, LEFT]),
        };
    }
    Ok(e)
}

fn spectra_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let n = x.len().max(y.len());
            (0..n)
                .map(|i| {
                    let d = x.get(i).copied().unwrap_or(0.0) - y.get(i).copied().unwrap_or(0.0);
                    d * d
                })
                .sum::<f64>()
                .sqrt()
        })
        .fold(0.0, f64::max)
}

/// Iterates directional moves until the corner spectra change less than
/// `tol` between sweeps.
pub fn converge_ctm(
    a: &DoubleTensor,
    chi_env: usize,
    tol: f64,
    max_sweeps: usize,
    warm_start: Option<&CtmEnvironment>,
) -> Result<CtmEnvironment> {
    if chi_env == 0 {
        return Err(Error::config("chi_env", "must be positive"));
    }
    let mut env = match warm_start {
        Some(w) if w.matches(a) => {
            let mut e = w.clone();
            e.chi_env = chi_env;
            e
        }
        _ => CtmEnvironment::initial(a, chi_env)?,
    };
    let mut spectra = env.corner_spectra()?;
    let mut change = f64::INFINITY;
    for n in 1..=max_sweeps {
        env = sweep(&env, a)?;
        let next = env.corner_spectra()?;
        change = spectra_distance(&next, &spectra);
        log::trace!("CTM sweep {n}: spectrum change {change:e}");
        spectra = next;
        if change < tol {
            env.sweeps = n;
            env.spectra = spectra;
            normalize_closed(&mut env, a)?;
            return Ok(env);
        }
    }
    Err(Error::Convergence {
        what: format!("CTM environment (chi_env = {chi_env}, spectra {:?})", spectra.first()),
        iterations: max_sweeps,
        last_change: change,
    })
}

/// Rescales `C1` so the closed one-site network equals one.
fn normalize_closed(env: &mut CtmEnvironment, a: &DoubleTensor) -> Result<()> {
    let z = close_one_site(env, &a.a)?;
    if z.norm() == 0.0 || !z.re.is_finite() {
        return Err(Error::Numeric("CTM network contracts to zero".into()));
    }
    env.c[0] = env.c[0].scale(ONE / z);
    Ok(())
}

/// `E_L[t, m, b]`: `C1 T4 C4`.
fn left_block(env: &CtmEnvironment) -> Result<Tensor> {
    let x = contract(&env.c[0], &env.t[3], &[(0, 1)])?; // [C1.b, T4.a, m]
    contract(&x, &env.c[3], &[(1, 1)]) // [t, m, b]
}

/// `E_R[t, m, b]`: `C2 T2 C3`.
fn right_block(env: &CtmEnvironment) -> Result<Tensor> {
    let x = contract(&env.c[1], &env.t[1], &[(1, 0)])?; // [t, T2.b, m]
    contract(&x, &env.c[2], &[(1, 0)]) // [t, m, b]
}

/// Absorbs `T1 x T3` into a left block `[t, m, b]`.
fn absorb_column(block: &Tensor, env: &CtmEnvironment, x: &Tensor) -> Result<Tensor> {
    let y = contract(block, &env.t[0], &[(0, 0)])?; // [m, b, t', mu]
    let y = contract(&y, x, &[(0, LEFT), (3, UP)])?; // [b, t', r, md]
    contract(&y, &env.t[2], &[(0, 1), (3, 2)]) // [t', r, b']
}

fn close(left: &Tensor, right: &Tensor) -> Result<C64> {
    Ok(contract(left, right, &[(0, 0), (1, 1), (2, 2)])?.data()[0])
}

fn close_one_site(env: &CtmEnvironment, x: &Tensor) -> Result<C64> {
    close(&absorb_column(&left_block(env)?, env, x)?, &right_block(env)?)
}

/// Value of the closed one-site network, one after [`converge_ctm`].
pub fn closed_value(env: &CtmEnvironment, a: &DoubleTensor) -> Result<C64> {
    close_one_site(env, &a.a)
}

/// `<x>` of a one-site double tensor relative to the plain one.
pub fn one_site_value(env: &CtmEnvironment, a: &DoubleTensor, x: &DoubleTensor) -> Result<f64> {
    let n = close_one_site(env, &a.a)?;
    Ok((close_one_site(env, &x.a)? / n).re)
}

/// Two horizontally adjacent double tensors `x` (left) and `y` (right)
/// relative to the plain network.
pub fn two_site_value(env: &CtmEnvironment, a: &DoubleTensor, x: &DoubleTensor, y: &DoubleTensor) -> Result<f64> {
    let l = left_block(env)?;
    let r = right_block(env)?;
    let n = close(&absorb_column(&absorb_column(&l, env, &a.a)?, env, &a.a)?, &r)?;
    let v = close(&absorb_column(&absorb_column(&l, env, &x.a)?, env, &y.a)?, &r)?;
    Ok((v / n).re)
}

/// Which link of the site the environment surrounds.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Link {
    R,
    D,
    L,
    U,
}

/// The six tensors around a link, in the frame where the link is
/// horizontal: `[C1 T4 C4, T1, T1, C2 T2 C3, T3, T3]`, the first column
/// block on the left of the left site and the fourth on the right of the
/// right site.
#[derive(Clone, Debug)]
pub struct LinkEnvironment {
    pub link: Link,
    pub e: [Tensor; 6],
}

/// Environment of one link. Vertical links are expressed in the frame
/// turned a quarter counter-clockwise, where the upper site is on the left.
pub fn link_environment(env: &CtmEnvironment, link: Link) -> Result<LinkEnvironment> {
    let frame = match link {
        Link::R | Link::L => env.clone(),
        Link::D | Link::U => env.rotated(),
    };
    Ok(LinkEnvironment {
        link,
        e: [
            left_block(&frame)?,
            frame.t[0].clone(),
            frame.t[0].clone(),
            right_block(&frame)?,
            frame.t[2].clone(),
            frame.t[2].clone(),
        ],
    })
}

impl LinkEnvironment {
    fn frame_env(&self, i: usize, j: usize) -> CtmEnvironment {
        // Only the edges are read by `absorb_column`.
        CtmEnvironment {
            c: [Tensor::eye(1), Tensor::eye(1), Tensor::eye(1), Tensor::eye(1)],
            t: [self.e[i].clone(), Tensor::eye(1), self.e[j].clone(), Tensor::eye(1)],
            chi_env: 0,
            sweeps: 0,
            spectra: Vec::new(),
        }
    }

    /// Closed network with left and right double tensors `x`, `y` given in
    /// the link frame.
    pub fn close(&self, x: &Tensor, y: &Tensor) -> Result<C64> {
        let l = absorb_column(&self.e[0], &self.frame_env(1, 5), x)?;
        let l = absorb_column(&l, &self.frame_env(2, 4), y)?;
        close(&l, &self.e[3])
    }

    /// Gram matrix of the link: `x` and `y` keep the link legs open as
    /// ket/bra pairs, and the result is `M[(x_k, x_b), (z_k, z_b)]` over the
    /// right leg of `x` and the left leg of `y`.
    pub fn gram(&self, x: &Tensor, y: &Tensor) -> Result<Tensor> {
        let l = absorb_column(&self.e[0], &self.frame_env(1, 5), x)?; // [t, r, b]
        // Mirror of `absorb_column` from the right.
        let r = contract(&self.e[3], &self.e[2], &[(0, 1)])?; // [m, b, t, mu]
        let r = contract(&r, y, &[(0, RIGHT), (3, UP)])?; // [b, t, l, md]
        let r = contract(&r, &self.e[4], &[(0, 0), (3, 2)])?; // [t, l, b]
        contract(&l, &r, &[(0, 0), (2, 2)])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ipeps::IPeps;
    use crate::models::{sigma_x, sigma_z};
    use crate::tensor::ZERO;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Ising site with a small random admixture that breaks the lattice
    /// symmetries.
    fn random_site(d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Tensor::random(&[d, d, d, d, 2], &mut rng).scale_real(0.05);
        (&ising_site(0.35) + &noise).normalized()
    }

    /// Reflection-symmetric site: symmetrized over l<->r and d<->u, and
    /// over the exchange of the two axes.
    fn symmetric_site(d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = Tensor::random_real(&[d, d, d, d, 2], &mut rng);
        let mut s = t.clone();
        for p in [[1, 0, 2, 3, 4], [0, 1, 3, 2, 4], [1, 0, 3, 2, 4]] {
            s = &s + &t.permute(&p);
        }
        let s2 = s.permute(&[2, 3, 0, 1, 4]);
        (&s + &s2).normalized()
    }

    /// `ψ(s) = Π exp(β/2 s_i s_j)`: its norm is the classical Ising
    /// partition function at inverse temperature `β`.
    fn ising_site(beta: f64) -> Tensor {
        let (a, b) = ((beta / 2.0).exp(), (-beta / 2.0).exp());
        // Q Q = [[a, b], [b, a]] with Q symmetric.
        let (p, m) = ((a + b).sqrt(), (a - b).sqrt());
        let q = [[(p + m) / 2.0, (p - m) / 2.0], [(p - m) / 2.0, (p + m) / 2.0]];
        let spin = [1usize, 0];
        Tensor::from_fn(&[2, 2, 2, 2, 2], |i| {
            let s = spin[i[4]];
            C64::new(q[s][i[0]] * q[s][i[1]] * q[s][i[2]] * q[s][i[3]], 0.0)
        })
    }

    /// Nearest-neighbour correlation of the square-lattice Ising model.
    fn onsager_nn(beta: f64) -> f64 {
        let t = (2.0 * beta).tanh();
        let k = 2.0 * (2.0 * beta).sinh() / (2.0 * beta).cosh().powi(2);
        let (mut x, mut y) = (1.0f64, (1.0 - k * k).sqrt());
        for _ in 0..60 {
            (x, y) = ((x + y) / 2.0, (x * y).sqrt());
        }
        let kk = std::f64::consts::PI / (2.0 * x);
        let u = -(1.0 / t) * (1.0 + 2.0 / std::f64::consts::PI * (2.0 * t * t - 1.0) * kk);
        -u / 2.0
    }

    #[test]
    fn ising_partition_function_correlation() {
        for beta in [0.3, 0.4, 0.5] {
            let theta = ising_site(beta);
            let a = build_double(&theta).unwrap();
            let z = build_double_op(&theta, &sigma_z()).unwrap();
            let env = converge_ctm(&a, 24, 1e-10, 500, None).unwrap();
            let h = two_site_value(&env, &a, &z, &z).unwrap();
            let v = two_site_value(&env.rotated(), &a.rotated(), &z.rotated(), &z.rotated()).unwrap();
            let exact = onsager_nn(beta);
            assert!((h - exact).abs() < 1e-5, "beta={beta} {h} {exact} sweeps={}", env.sweeps);
            assert!((v - exact).abs() < 1e-5, "beta={beta} {v} {exact}");
        }
    }

    #[test]
    fn product_state_double_is_scalar() {
        let s = IPeps::product(&[ONE, ZERO]);
        let a = build_double(&s.site_tensor()).unwrap();
        assert_eq!(a.a.shape(), &[1, 1, 1, 1]);
        assert!((a.a.data()[0] - ONE).norm() < 1e-15);
    }

    #[test]
    fn double_tensor_is_hermitian() {
        let a = build_double(&random_site(2, 1)).unwrap();
        assert!(a.hermiticity_defect() < 1e-12);
    }

    #[test]
    fn product_state_environment() {
        let s = IPeps::product(&[C64::new(0.6, 0.0), C64::new(0.8, 0.0)]);
        let a = build_double(&s.site_tensor()).unwrap();
        let env = converge_ctm(&a, 4, 1e-12, 10, None).unwrap();
        assert!(env.sweeps <= 2);
        assert!(env.c.iter().all(|c| c.shape() == [1, 1]));
        assert!((close_one_site(&env, &a.a).unwrap() - ONE).norm() < 1e-12);
        let z = build_double_op(&s.site_tensor(), &sigma_z()).unwrap();
        let x = build_double_op(&s.site_tensor(), &sigma_x()).unwrap();
        assert!((one_site_value(&env, &a, &z).unwrap() - (0.36 - 0.64)).abs() < 1e-12);
        assert!((one_site_value(&env, &a, &x).unwrap() - 0.96).abs() < 1e-12);
        let zz = two_site_value(&env, &a, &z, &z).unwrap();
        assert!((zz - 0.28 * 0.28).abs() < 1e-12);
    }

    #[test]
    fn warm_start_on_converged_environment_is_quick() {
        let a = build_double(&random_site(2, 2)).unwrap();
        let env = converge_ctm(&a, 12, 1e-10, 500, None).unwrap();
        let again = converge_ctm(&a, 12, 1e-10, 500, Some(&env)).unwrap();
        assert!(again.sweeps <= 2, "{}", again.sweeps);
    }

    #[test]
    fn larger_environment_changes_observable_little() {
        let theta = random_site(2, 3);
        let a = build_double(&theta).unwrap();
        let z = build_double_op(&theta, &sigma_z()).unwrap();
        let e1 = converge_ctm(&a, 16, 1e-11, 500, None).unwrap();
        let e2 = converge_ctm(&a, 26, 1e-11, 500, None).unwrap();
        let m1 = one_site_value(&e1, &a, &z).unwrap();
        let m2 = one_site_value(&e2, &a, &z).unwrap();
        assert!((m1 - m2).abs() < 1e-5, "{m1} {m2}");
    }

    #[test]
    fn rotation_relabels_consistently() {
        // The one-site value must not depend on the frame.
        let theta = random_site(2, 4);
        let a = build_double(&theta).unwrap();
        let z = build_double_op(&theta, &sigma_z()).unwrap();
        let env = converge_ctm(&a, 12, 1e-11, 500, None).unwrap();
        let m = one_site_value(&env, &a, &z).unwrap();
        let mr = one_site_value(&env.rotated(), &a.rotated(), &z.rotated()).unwrap();
        assert!((m - mr).abs() < 1e-10, "{m} {mr}");
    }

    #[test]
    fn link_environment_closes_to_ctm_norm() {
        let theta = random_site(2, 5);
        let a = build_double(&theta).unwrap();
        let env = converge_ctm(&a, 12, 1e-11, 500, None).unwrap();
        for link in [Link::R, Link::D] {
            let le = link_environment(&env, link).unwrap();
            let x = if link == Link::R { a.clone() } else { a.rotated() };
            let v = le.close(&x.a, &x.a).unwrap();
            let frame = if link == Link::R { env.clone() } else { env.rotated() };
            let l = left_block(&frame).unwrap();
            let r = right_block(&frame).unwrap();
            let n = close(
                &absorb_column(&absorb_column(&l, &frame, &x.a).unwrap(), &frame, &x.a).unwrap(),
                &r,
            )
            .unwrap();
            assert!((v - n).norm() < 1e-6 * n.norm());
        }
    }

    #[test]
    fn link_gram_is_positive() {
        let theta = random_site(2, 6);
        let a = build_double(&theta).unwrap();
        let env = converge_ctm(&a, 12, 1e-11, 500, None).unwrap();
        let le = link_environment(&env, Link::R).unwrap();
        let m = le.gram(&a.a, &a.a).unwrap(); // [(x x'), (z z')]
        // As a form on the bond matrix B[x, z]: rows (x, z), cols (x', z').
        let g = m
            .into_shape(&[2, 2, 2, 2])
            .unwrap()
            .permute(&[0, 2, 1, 3])
            .into_shape(&[4, 4])
            .unwrap();
        let scale = g.max_abs();
        let (vals, _) = linalg::eigh(&g.hermitian_part()).unwrap();
        assert!(*vals.last().unwrap() >= -1e-8 * scale, "{vals:?}");
        assert!(g.hermiticity_defect() < 1e-6 * scale);
    }

    #[test]
    fn mirrored_links_agree_for_symmetric_state() {
        let theta = symmetric_site(2, 7);
        let a = build_double(&theta).unwrap();
        let z = build_double_op(&theta, &sigma_z()).unwrap();
        let env = converge_ctm(&a, 12, 1e-11, 500, None).unwrap();
        let h = two_site_value(&env, &a, &z, &z).unwrap();
        let v = two_site_value(&env.rotated(), &a.rotated(), &z.rotated(), &z.rotated()).unwrap();
        assert!((h - v).abs() < 1e-8, "{h} {v}");
        let le_r = link_environment(&env, Link::R).unwrap();
        let le_l = link_environment(&env, Link::L).unwrap();
        let gr = le_r.gram(&a.a, &a.a).unwrap();
        let gl = le_l.gram(&a.a, &a.a).unwrap();
        assert!(gr.max_diff(&gl) < 1e-8 * gr.max_abs());
    }
}
