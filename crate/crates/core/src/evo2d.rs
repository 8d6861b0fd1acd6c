//! Imaginary-time evolution of an iPEPS with environment recycling.
//!
//! Bond maps follow [`BondMaps`]: `Q` acts on the l and d legs, `P` on the
//! r and u legs, so a link carries `B = P Q` between its two sites.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::ctm::{
    build_double, build_double_op, converge_ctm, link_environment, one_site_value, two_site_value, CtmEnvironment,
    DoubleTensor, Link,
};
use crate::error::{Error, Result};
use crate::evo1d::WarmUp;
use crate::imps::{lambda_change, CanonOptions};
use crate::ipeps::{
    canonical_maps_2d, gauge_fix_ipeps, sqrt_vec, simple_update_step, BondMaps, IPeps, Truncation2d, DOWN, LEFT,
    RIGHT, UP,
};
use crate::models::{field_half_gate, interaction_gate, operator_schmidt_split, sigma_x, sigma_z, IsingParams};
use crate::tensor::linalg;
use crate::tensor::{contract, Tensor, C64};

/// One-site PEPO `g[a_l, a_r, a_d, a_u, ket, bra]`.
#[derive(Clone, Debug)]
pub struct GatePepo {
    pub g: Tensor,
    pub kappa: usize,
}

/// `g = g_F R_l L_r R_d L_u g_F`: the site is the right end of the bond to
/// its left and the lower end of the bond above it.
pub fn build_pepo(params: &IsingParams) -> Result<GatePepo> {
    let (l, r) = operator_schmidt_split(&interaction_gate(params))?;
    let k = l.dim(0);
    let f = field_half_gate(params);
    let t = contract(&f, &r, &[(1, 1)])?; // [k, a_l, y]
    let t = contract(&t, &l, &[(2, 1)])?; // [k, a_l, a_r, z]
    let t = contract(&t, &r, &[(3, 1)])?; // [k, a_l, a_r, a_d, w]
    let t = contract(&t, &l, &[(4, 1)])?; // [k, a_l, a_r, a_d, a_u, v]
    let g = contract(&t, &f, &[(5, 0)])?.permute(&[1, 2, 3, 4, 0, 5]);
    Ok(GatePepo { g, kappa: k })
}

/// `Θ[(a_l,l), (a_r,r), (a_d,d), (a_u,u), k] = sum_s g[.., k, s] A[l,r,d,u,s]`.
pub fn apply_pepo(g: &GatePepo, a: &Tensor) -> Result<Tensor> {
    let k = g.kappa;
    let (dh, dv, d) = (a.dim(0), a.dim(2), a.dim(4));
    contract(&g.g, a, &[(5, 4)])?
        .permute(&[0, 5, 1, 6, 2, 7, 3, 8, 4])
        .into_shape(&[k * dh, k * dh, k * dv, k * dv, d])
}

/// Link maps `ζ = (P_r, Q_r, P_d, Q_d, P_l, Q_l, P_u, Q_u)`.
#[derive(Clone, Debug)]
pub struct TruncationSet {
    pub p_r: Tensor,
    pub q_r: Tensor,
    pub p_d: Tensor,
    pub q_d: Tensor,
    pub p_l: Tensor,
    pub q_l: Tensor,
    pub p_u: Tensor,
    pub q_u: Tensor,
    /// Summed relative link costs after each sweep.
    pub cost_history: Vec<f64>,
    /// Positive weights for the truncated bonds, used as the starting gauge
    /// when `Ã` is canonicalized.
    pub weights_h: Vec<f64>,
    pub weights_v: Vec<f64>,
}

impl TruncationSet {
    pub fn from_maps(m: &BondMaps, weights_h: Vec<f64>, weights_v: Vec<f64>) -> Self {
        Self {
            p_r: m.p_h.clone(),
            q_r: m.q_h.clone(),
            p_d: m.p_v.clone(),
            q_d: m.q_v.clone(),
            p_l: m.p_h.clone(),
            q_l: m.q_h.clone(),
            p_u: m.p_v.clone(),
            q_u: m.q_v.clone(),
            cost_history: Vec::new(),
            weights_h,
            weights_v,
        }
    }

    /// `P_h = (P_r + P_l)/2` and likewise for the other three maps.
    pub fn averaged(&self) -> BondMaps {
        let avg = |a: &Tensor, b: &Tensor| (a + b).scale_real(0.5);
        BondMaps {
            q_h: avg(&self.q_r, &self.q_l),
            p_h: avg(&self.p_r, &self.p_l),
            q_v: avg(&self.q_d, &self.q_u),
            p_v: avg(&self.p_d, &self.p_u),
        }
    }

    pub fn cost_final(&self) -> f64 {
        self.cost_history.last().copied().unwrap_or(0.0)
    }
}

/// Simple-update truncation of `gA`, the starting point of the full update.
pub fn su_guess(state: &IPeps, g: &GatePepo, d_max: usize, opts: &CanonOptions) -> Result<TruncationSet> {
    let su = simple_update_step(state, g, d_max, opts)?;
    Ok(TruncationSet::from_maps(
        &su.maps,
        su.state.lambda_h.clone(),
        su.state.lambda_v.clone(),
    ))
}

#[derive(Clone, Debug)]
pub struct FuOptions {
    pub chi_env: usize,
    pub ctm_tol: f64,
    pub ctm_max_sweeps: usize,
    /// Link sweeps stop when the cost changes by less than this fraction.
    pub cost_tol: f64,
    pub max_sweeps: usize,
    pub canon: CanonOptions,
}

impl FuOptions {
    pub fn new(chi_env: usize) -> Self {
        Self {
            chi_env,
            ctm_tol: 1e-10,
            ctm_max_sweeps: 500,
            cost_tol: 1e-8,
            max_sweeps: 50,
            canon: CanonOptions {
                tol: 1e-12,
                max_iter: 5000,
                ..Default::default()
            },
        }
    }
}

/// `Θ` with the maps applied to every leg except `open`.
fn open_site(theta: &Tensor, m: &BondMaps, open: usize) -> Result<Tensor> {
    let mut t = theta.clone();
    if open != LEFT {
        t = t.apply_matrix(LEFT, &m.q_h)?;
    }
    if open != RIGHT {
        t = t.apply_matrix(RIGHT, &m.p_h.transpose())?;
    }
    if open != DOWN {
        t = t.apply_matrix(DOWN, &m.q_v)?;
    }
    if open != UP {
        t = t.apply_matrix(UP, &m.p_v.transpose())?;
    }
    Ok(t)
}

/// Quadratic cost `f(B) = <B - I, M (B - I)>` of one link with `B = P Q`,
/// relative to `<I, M I>`.
struct LinkProblem {
    /// `M[x, x', z, z']`: ket and bra indices of the two ends of the link.
    m: Tensor,
    /// `sum_x M[x, x', x, z']`.
    t: Tensor,
    norm: f64,
}

impl LinkProblem {
    fn new(gram: Tensor) -> Result<Self> {
        let n = (gram.dim(0) as f64).sqrt().round() as usize;
        let m = gram.into_shape(&[n, n, n, n])?;
        let t = Tensor::from_fn(&[n, n], |i| (0..n).map(|x| m.get(&[x, i[0], x, i[1]])).sum());
        let norm = t.trace().re;
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::Numeric(format!("link environment has norm {norm:e}")));
        }
        Ok(Self { m, t, norm })
    }

    fn cost(&self, p: &Tensor, q: &Tensor) -> Result<f64> {
        let e = &p.matmul(q)? - &Tensor::eye(p.rows());
        let w = contract(&self.m, &e, &[(0, 0), (2, 1)])?; // [x', z']
        Ok(w.inner(&e).re.max(0.0) / self.norm)
    }

    /// Minimizes over `P` with `Q` fixed.
    fn solve_p(&self, q: &Tensor) -> Result<Tensor> {
        let (n, k) = (q.cols(), q.rows());
        let nq = contract(&contract(&self.m, q, &[(2, 1)])?, &q.conj(), &[(2, 1)])?; // [x, x', y, y']
        let r = nq.permute(&[1, 3, 0, 2]).into_shape(&[n * k, n * k])?;
        let s = self.t.matmul(&q.conj().transpose())?.into_shape(&[n * k, 1])?; // [(x', y')]
        regularized_solve(&r, &s)?.into_shape(&[n, k])
    }

    /// Minimizes over `Q` with `P` fixed.
    fn solve_q(&self, p: &Tensor) -> Result<Tensor> {
        let (n, k) = (p.rows(), p.cols());
        let np = contract(&contract(&self.m, p, &[(0, 0)])?, &p.conj(), &[(0, 0)])?; // [z, z', y, y']
        let r = np.permute(&[3, 1, 2, 0]).into_shape(&[k * n, k * n])?;
        let s = p.dagger().matmul(&self.t)?.into_shape(&[k * n, 1])?; // [(y', z')]
        regularized_solve(&r, &s)?.into_shape(&[k, n])
    }
}

/// `R x = S` with `R` Hermitian-symmetrized and a `1e-12 tr(R)/dim` ridge.
fn regularized_solve(r: &Tensor, s: &Tensor) -> Result<Tensor> {
    let dim = r.rows();
    let mut h = r.hermitian_part();
    let ridge = 1e-12 * h.trace().re.abs() / dim as f64;
    for i in 0..dim {
        let v = h.get(&[i, i]) + C64::new(ridge, 0.0);
        h.set(&[i, i], v);
    }
    let dec = linalg::svd(&h, None, 0.0)?;
    let cond = dec.s[0] / dec.s.last().copied().unwrap_or(0.0);
    if !(cond < 1e12) {
        log::debug!("full-update normal matrix is ill-conditioned (condition {cond:e}); pseudo-inverse used");
    }
    linalg::pinv(&h, 1e-15)?.matmul(s)
}

/// Output of [`full_update_step`].
#[derive(Clone, Debug)]
pub struct FullUpdate {
    /// New canonical state and the maps `Θ -> Ã -> Ã₁`.
    pub trunc: Truncation2d,
    pub set: TruncationSet,
    /// Environment of the pre-truncated `Θ`.
    pub env: CtmEnvironment,
}

/// One-site full update: the link maps minimize the distance to `gA` in
/// the CTM environment of the simple-update truncation.
pub fn full_update_step(
    state: &IPeps,
    g: &GatePepo,
    opts: &FuOptions,
    warm_env: Option<&CtmEnvironment>,
    su_guess: &TruncationSet,
) -> Result<FullUpdate> {
    let theta = apply_pepo(g, &state.site_tensor())?;
    let su = su_guess.averaged();
    let pre = build_double(&su.apply(&theta)?)?;
    let env = converge_ctm(&pre, opts.chi_env, opts.ctm_tol, opts.ctm_max_sweeps, warm_env)?;

    let horizontal = LinkProblem::new(link_environment(&env, Link::R)?.gram(
        &build_double(&open_site(&theta, &su, RIGHT)?)?.a,
        &build_double(&open_site(&theta, &su, LEFT)?)?.a,
    )?)?;
    // In the turned frame the upper site sits on the left.
    let upper = build_double(&open_site(&theta, &su, DOWN)?)?.rotated();
    let lower = build_double(&open_site(&theta, &su, UP)?)?.rotated();
    let vertical = LinkProblem::new(
        link_environment(&env, Link::D)?
            .gram(&upper.a, &lower.a)?
            .transpose(),
    )?;

    let mut set = su_guess.clone();
    set.cost_history.clear();
    let total = |s: &TruncationSet| -> Result<f64> {
        Ok(horizontal.cost(&s.p_r, &s.q_r)?
            + vertical.cost(&s.p_d, &s.q_d)?
            + horizontal.cost(&s.p_l, &s.q_l)?
            + vertical.cost(&s.p_u, &s.q_u)?)
    };
    let mut cost = total(&set)?;
    set.cost_history.push(cost);
    for _ in 0..opts.max_sweeps {
        for (problem, p, q) in [
            (&horizontal, &mut set.p_r, &mut set.q_r),
            (&vertical, &mut set.p_d, &mut set.q_d),
            (&horizontal, &mut set.p_l, &mut set.q_l),
            (&vertical, &mut set.p_u, &mut set.q_u),
        ] {
            // The ridge can cost more than it gains on singular problems.
            let mut c = problem.cost(p, q)?;
            let np = problem.solve_p(q)?;
            let cp = problem.cost(&np, q)?;
            if cp <= c {
                *p = np;
                c = cp;
            }
            let nq = problem.solve_q(p)?;
            if problem.cost(p, &nq)? <= c {
                *q = nq;
            }
        }
        let next = total(&set)?;
        if next > cost + 1e-10 {
            return Err(Error::ContractViolation(format!(
                "full-update cost increased from {cost:e} to {next:e}"
            )));
        }
        set.cost_history.push(next);
        let done = (cost - next).abs() <= opts.cost_tol * cost.max(f64::MIN_POSITIVE);
        cost = next;
        if done {
            break;
        }
    }

    let maps = set.averaged();
    let a_tilde = maps.apply(&theta)?;
    let (canon, new_state) = canonical_maps_2d(&a_tilde, &set.weights_h, &set.weights_v, &opts.canon)?;
    Ok(FullUpdate {
        trunc: Truncation2d {
            state: new_state,
            maps,
            a_tilde,
            canon,
            truncation_weight: cost,
        },
        set,
        env,
    })
}

pub const RECYCLE_FIDELITY_2D: f64 = 1.0 - 1e-3;

/// Renormalized gate `G = U_h† U_v† Q_hc Q_h Q_vc Q_v g P_h P_hc P_v P_vc U_h U_v`
/// in factored form: `maps` hold `U† Q_c Q` on l/d and `P P_c U` on r/u.
#[derive(Clone, Debug)]
pub struct RenormGate2D {
    pub maps: BondMaps,
    pub pepo: GatePepo,
    pub lambda_h0: Vec<f64>,
    pub lambda_v0: Vec<f64>,
    pub step: usize,
    pub fidelity: f64,
    pub truncation_weight: f64,
    /// Gauge unitaries, reused to start the next gauge fix.
    pub u_h: Tensor,
    pub u_v: Tensor,
}

impl RenormGate2D {
    pub fn apply(&self, a: &Tensor) -> Result<Tensor> {
        self.maps.apply(&apply_pepo(&self.pepo, a)?)
    }
}

/// Result of [`build_renorm_gate_2d`]: the gate, or the reason it was
/// refused, and the full update it came from.
#[derive(Debug)]
pub struct GateBuild2d {
    pub gate: std::result::Result<RenormGate2D, Error>,
    pub update: FullUpdate,
}

#[allow(clippy::too_many_arguments)]
pub fn build_renorm_gate_2d(
    a0: &IPeps,
    g: &GatePepo,
    d_max: usize,
    opts: &FuOptions,
    warm_env: Option<&CtmEnvironment>,
    warm_gauge: Option<(&Tensor, &Tensor)>,
    step_index: usize,
) -> Result<GateBuild2d> {
    let guess = su_guess(a0, g, d_max, &opts.canon)?;
    let update = full_update_step(a0, g, opts, warm_env, &guess)?;
    let gate = gate_from_update(a0, g, &update, warm_gauge, step_index);
    Ok(GateBuild2d { gate, update })
}

fn gate_from_update(
    a0: &IPeps,
    g: &GatePepo,
    update: &FullUpdate,
    warm_gauge: Option<(&Tensor, &Tensor)>,
    step_index: usize,
) -> Result<RenormGate2D> {
    let refuse = |fidelity| Error::RecycleUnsafe {
        fidelity,
        threshold: RECYCLE_FIDELITY_2D,
    };
    if update.trunc.state.bond_dims() != a0.bond_dims() {
        return Err(refuse(0.0));
    }
    let a = a0.site_tensor();
    let a1 = update.trunc.state.site_tensor();
    let mut fix = gauge_fix_ipeps(&a, &a1, 1e-12, 400, warm_gauge)?;
    if fix.fidelity < RECYCLE_FIDELITY_2D && warm_gauge.is_some() {
        let cold = gauge_fix_ipeps(&a, &a1, 1e-12, 400, None)?;
        if cold.fidelity > fix.fidelity {
            fix = cold;
        }
    }
    if fix.fidelity < RECYCLE_FIDELITY_2D {
        return Err(refuse(fix.fidelity));
    }
    let m = update.trunc.maps.then(&update.trunc.canon)?;
    let maps = BondMaps {
        q_h: fix.u_h.dagger().matmul(&m.q_h)?,
        p_h: m.p_h.matmul(&fix.u_h)?,
        q_v: fix.u_v.dagger().matmul(&m.q_v)?,
        p_v: m.p_v.matmul(&fix.u_v)?,
    };
    Ok(RenormGate2D {
        maps,
        pepo: g.clone(),
        lambda_h0: a0.lambda_h.clone(),
        lambda_v0: a0.lambda_v.clone(),
        step: step_index,
        fidelity: fix.fidelity,
        truncation_weight: update.trunc.truncation_weight,
        u_h: fix.u_h,
        u_v: fix.u_v,
    })
}

/// Scales `a` to `||λλλλΓ|| = 1` for the weights of `gate`.
fn normalize_site_2d(a: Tensor, gate: &RenormGate2D) -> Result<Tensor> {
    let rh = sqrt_vec(&gate.lambda_h0);
    let rv = sqrt_vec(&gate.lambda_v0);
    let n = a
        .scale_axis(LEFT, &rh)
        .scale_axis(RIGHT, &rh)
        .scale_axis(DOWN, &rv)
        .scale_axis(UP, &rv)
        .norm();
    if !(n > 1e-150) || !n.is_finite() {
        return Err(Error::Numeric(format!("state norm collapsed ({n:e})")));
    }
    Ok(a.scale_real(1.0 / n))
}

/// Applies `G` `n_re` times to the site tensor of `a0`, normalizing after
/// each application, and returns every intermediate site tensor.
pub fn recycle_sites_2d(a0: &IPeps, gate: &RenormGate2D, n_re: usize) -> Result<Vec<Tensor>> {
    let mut a = a0.site_tensor();
    let mut out = Vec::with_capacity(n_re);
    for _ in 0..n_re {
        a = normalize_site_2d(gate.apply(&a)?, gate)?;
        out.push(a.clone());
    }
    Ok(out)
}

/// Largest change of the bond weights beyond which recycling is unstable.
const MAX_LAMBDA_DRIFT: f64 = 0.1;

fn recycled_state(a: &Tensor, gate: &RenormGate2D, opts: &CanonOptions) -> Result<IPeps> {
    let (_, s) = canonical_maps_2d(a, &gate.lambda_h0, &gate.lambda_v0, opts).map_err(|e| match e {
        Error::Convergence { last_change, .. } => Error::Instability(format!(
            "recycled state does not canonicalize (last change {last_change:e})"
        )),
        other => other,
    })?;
    if s.bond_dims() == (gate.lambda_h0.len(), gate.lambda_v0.len()) {
        let drift = lambda_change(&s.lambda_h, &gate.lambda_h0).max(lambda_change(&s.lambda_v, &gate.lambda_v0));
        if drift > MAX_LAMBDA_DRIFT {
            return Err(Error::Instability(format!("bond weights drifted by {drift:.3e}")));
        }
    }
    Ok(s)
}

/// `n_re` applications of `G` followed by canonicalization.
pub fn recycle_evolve_2d(a0: &IPeps, gate: &RenormGate2D, n_re: usize, opts: &CanonOptions) -> Result<IPeps> {
    let sites = recycle_sites_2d(a0, gate, n_re.max(1))?;
    recycled_state(sites.last().unwrap(), gate, opts)
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observables2d {
    /// Energy per link, half the energy per site.
    pub energy: f64,
    pub mz: f64,
    pub mx: f64,
    pub zz_h: f64,
    pub zz_v: f64,
}

fn energy_per_link(zz_h: f64, zz_v: f64, mx: f64, h: f64) -> f64 {
    (-zz_h - zz_v - h * mx) / 2.0
}

/// Expectation values in the CTM environment `env` of the state's double
/// tensor.
pub fn observables_2d(state: &IPeps, env: &CtmEnvironment, h: f64) -> Result<Observables2d> {
    let a = state.site_tensor();
    let da = build_double(&a)?;
    let closed = env_norm(env, &da)?;
    if (closed - 1.0).abs() > 1e-4 {
        return Err(Error::ContractViolation(format!(
            "environment does not belong to the state (closed network {closed:e})"
        )));
    }
    let z = build_double_op(&a, &sigma_z())?;
    let x = build_double_op(&a, &sigma_x())?;
    let mz = one_site_value(env, &da, &z)?;
    let mx = one_site_value(env, &da, &x)?;
    let zz_h = two_site_value(env, &da, &z, &z)?;
    let zz_v = two_site_value(&env.rotated(), &da.rotated(), &z.rotated(), &z.rotated())?;
    Ok(Observables2d {
        energy: energy_per_link(zz_h, zz_v, mx, h),
        mz,
        mx,
        zz_h,
        zz_v,
    })
}

fn env_norm(env: &CtmEnvironment, a: &DoubleTensor) -> Result<f64> {
    crate::ctm::closed_value(env, a).map(|z| z.re)
}

/// Observables with the bond weights as the only environment: exact on
/// tree-like networks, an estimate on the square lattice.
pub fn observables_weighted_2d(state: &IPeps, h: f64) -> Result<Observables2d> {
    let (lh, lv) = (&state.lambda_h, &state.lambda_v);
    let outer = state.gamma.scale_axis(DOWN, lv).scale_axis(UP, lv);
    let one = outer.scale_axis(LEFT, lh).scale_axis(RIGHT, lh);
    let rho1 = contract(&one, &one.conj(), &[(0, 0), (1, 1), (2, 2), (3, 3)])?; // [s, s']
    let n1 = rho1.trace().re;
    let ex1 = |op: &Tensor| -> Result<f64> { Ok(contract(&rho1, op, &[(0, 1), (1, 0)])?.data()[0].re / n1) };
    let mz = ex1(&sigma_z())?;
    let mx = ex1(&sigma_x())?;
    let zz = |left: &Tensor, right: &Tensor, link_out: usize, link_in: usize| -> Result<f64> {
        let pair = contract(left, right, &[(link_out, link_in)])?; // [.. s1, .. s2]
        let r = pair.rank();
        let (s1, s2) = (3, r - 1);
        let others: Vec<(usize, usize)> = (0..r).filter(|&k| k != s1 && k != s2).map(|k| (k, k)).collect();
        let rho = contract(&pair, &pair.conj(), &others)?; // [s1, s2, s1', s2']
        let zz = Tensor::from_fn(&[2, 2, 2, 2], |i| {
            let v = if i[0] == i[2] && i[1] == i[3] { 1.0 - 2.0 * (i[0] ^ i[1]) as f64 } else { 0.0 };
            C64::new(v, 0.0)
        });
        let norm: C64 = (0..2).flat_map(|a| (0..2).map(move |b| (a, b))).map(|(a, b)| rho.get(&[a, b, a, b])).sum();
        Ok(contract(&rho, &zz, &[(0, 2), (1, 3), (2, 0), (3, 1)])?.data()[0].re / norm.re)
    };
    // The shared link weight sits once between the two sites.
    let left_h = outer.scale_axis(LEFT, lh).scale_axis(RIGHT, lh);
    let right_h = outer.scale_axis(RIGHT, lh);
    let zz_h = zz(&left_h, &right_h, RIGHT, LEFT)?;
    let base_v = state.gamma.scale_axis(LEFT, lh).scale_axis(RIGHT, lh);
    let lower = base_v.scale_axis(DOWN, lv).scale_axis(UP, lv);
    let upper = base_v.scale_axis(UP, lv);
    let zz_v = zz(&lower, &upper, UP, DOWN)?;
    Ok(Observables2d {
        energy: energy_per_link(zz_h, zz_v, mx, h),
        mz,
        mx,
        zz_h,
        zz_v,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord2d {
    pub step: usize,
    pub i_re: usize,
    pub n_re: usize,
    pub energy: f64,
    pub mz: f64,
    pub truncation_weight: f64,
    pub cost_final: f64,
    pub ctm_sweeps: usize,
    /// Whether the observables come from a CTM environment rather than the
    /// bond weights.
    pub ctm_observables: bool,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct EvolutionLog2d {
    pub records: Vec<StepRecord2d>,
    pub events: Vec<String>,
}

impl EvolutionLog2d {
    pub fn last(&self) -> Option<&StepRecord2d> {
        self.records.last()
    }
}

#[derive(Clone, Debug)]
pub struct Evo2dConfig {
    pub params: IsingParams,
    pub d: usize,
    pub n_re: usize,
    pub total_steps: usize,
    pub warm_up: WarmUp,
    pub max_environments: Option<usize>,
    pub fu: FuOptions,
    pub max_truncation: f64,
    pub update: UpdateKind,
    /// Environment to warm-start the first CTM runs, e.g. from a checkpoint.
    pub warm_env: Option<CtmEnvironment>,
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateKind {
    #[default]
    Full,
    /// Simple update only, with CTM observables at the end.
    Simple,
}

impl Evo2dConfig {
    pub fn new(params: IsingParams, d: usize, chi_env: usize, n_re: usize, total_steps: usize) -> Self {
        Self {
            params,
            d,
            n_re,
            total_steps,
            warm_up: WarmUp::default(),
            max_environments: None,
            fu: FuOptions::new(chi_env),
            max_truncation: 1e-2,
            update: UpdateKind::Full,
            warm_env: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if self.d == 0 {
            return Err(Error::config("bond_d", "must be >= 1"));
        }
        if self.fu.chi_env == 0 {
            return Err(Error::config("chi_env", "must be >= 1"));
        }
        if self.n_re == 0 {
            return Err(Error::config("n_re", "must be >= 1"));
        }
        if self.params.delta <= 0.0 {
            return Err(Error::config("delta", "must be > 0"));
        }
        Ok(())
    }
}

/// z-polarized product state tilted by `1e-3` towards down.
pub fn initial_state_2d() -> IPeps {
    IPeps::product(&[C64::new(1.0, 0.0), C64::new(1e-3, 0.0)])
}

#[derive(Clone, Debug)]
pub struct Evolution2d {
    pub state: IPeps,
    pub log: EvolutionLog2d,
    pub observables: Observables2d,
    /// CTM environment of the final state.
    pub env: CtmEnvironment,
}

struct Driver2d<'a> {
    cfg: &'a Evo2dConfig,
    log: EvolutionLog2d,
    start: Instant,
    step: usize,
    i_re: usize,
    /// Environment of the pre-truncated `Θ`, reused by the next update.
    fu_env: Option<CtmEnvironment>,
    /// Environment of the current state, for observables.
    obs_env: Option<CtmEnvironment>,
}

impl Driver2d<'_> {
    fn observe(&mut self, state: &IPeps) -> Result<(Observables2d, usize)> {
        let a = build_double(&state.site_tensor())?;
        let f = &self.cfg.fu;
        let env = converge_ctm(&a, f.chi_env, f.ctm_tol, f.ctm_max_sweeps, self.obs_env.as_ref())?;
        let obs = observables_2d(state, &env, self.cfg.params.h)?;
        let sweeps = env.sweeps;
        self.obs_env = Some(env);
        Ok((obs, sweeps))
    }

    fn record(&mut self, obs: &Observables2d, n_re: usize, tw: f64, cost: f64, sweeps: usize, ctm: bool) {
        self.step += 1;
        if tw > self.cfg.max_truncation {
            log::warn!("truncation cost {tw:e} exceeds {:e}", self.cfg.max_truncation);
        }
        self.log.records.push(StepRecord2d {
            step: self.step,
            i_re: self.i_re,
            n_re,
            energy: obs.energy,
            mz: obs.mz,
            truncation_weight: tw,
            cost_final: cost,
            ctm_sweeps: sweeps,
            ctm_observables: ctm,
            wall_seconds: self.start.elapsed().as_secs_f64(),
        });
    }

    fn budget_left(&self) -> bool {
        self.step < self.cfg.total_steps && self.cfg.max_environments.is_none_or(|m| self.i_re < m)
    }

    fn event(&mut self, msg: String) {
        log::info!("{msg}");
        self.log.events.push(msg);
    }
}

/// Runs the 2D recycling driver from `initial` (or the tilted polarized
/// state).
pub fn evolve_2d(cfg: &Evo2dConfig, initial: Option<IPeps>) -> Result<Evolution2d> {
    cfg.validate()?;
    let pepo = build_pepo(&cfg.params)?;
    let mut state = initial.unwrap_or_else(initial_state_2d);
    let mut drv = Driver2d {
        cfg,
        log: EvolutionLog2d::default(),
        start: Instant::now(),
        step: 0,
        i_re: 0,
        fu_env: cfg.warm_env.clone(),
        obs_env: cfg.warm_env.clone(),
    };
    if cfg.update == UpdateKind::Simple {
        return evolve_simple(drv, &pepo, state);
    }
    let mut n_re = cfg.n_re;
    let mut warm = !matches!(cfg.warm_up, WarmUp::None | WarmUp::Steps(0));
    let mut prev_energy = f64::NAN;
    let mut gauge: Option<(Tensor, Tensor)> = None;

    while drv.budget_left() {
        if warm || n_re == 1 {
            let guess = su_guess(&state, &pepo, cfg.d, &cfg.fu.canon)?;
            let fu = full_update_step(&state, &pepo, &cfg.fu, drv.fu_env.as_ref(), &guess)?;
            drv.i_re += 1;
            let fu_sweeps = fu.env.sweeps;
            drv.fu_env = Some(fu.env);
            state = fu.trunc.state;
            let (obs, sweeps) = drv.observe(&state)?;
            let cost = fu.set.cost_final();
            drv.record(&obs, if warm { 1 } else { n_re }, cost, cost, fu_sweeps + sweeps, true);
            if warm {
                warm = match cfg.warm_up {
                    WarmUp::UntilEnergyChange(tol) => !((obs.energy - prev_energy).abs() < tol),
                    WarmUp::Steps(n) => drv.step < n,
                    WarmUp::None => false,
                };
                if !warm {
                    drv.event(format!("warm-up finished at step {}", drv.step));
                }
            }
            prev_energy = obs.energy;
            continue;
        }

        let warm_gauge = gauge.as_ref().map(|(h, v)| (h, v));
        let build = build_renorm_gate_2d(
            &state,
            &pepo,
            cfg.d,
            &cfg.fu,
            drv.fu_env.as_ref(),
            warm_gauge,
            drv.step,
        )?;
        drv.i_re += 1;
        let fu_sweeps = build.update.env.sweeps;
        let cost = build.update.set.cost_final();
        drv.fu_env = Some(build.update.env.clone());
        let gate = match build.gate {
            Ok(gate) => gate,
            Err(Error::RecycleUnsafe { fidelity, .. }) => {
                drv.event(format!(
                    "step {}: gate refused (fidelity {fidelity:.3e}), full update taken",
                    drv.step + 1
                ));
                state = build.update.trunc.state;
                let (obs, sweeps) = drv.observe(&state)?;
                drv.record(&obs, n_re, cost, cost, fu_sweeps + sweeps, true);
                continue;
            }
            Err(e) => return Err(e),
        };
        gauge = Some((gate.u_h.clone(), gate.u_v.clone()));
        let reps = n_re.min(cfg.total_steps - drv.step);
        let recycled = recycle_sites_2d(&state, &gate, reps)
            .and_then(|sites| recycled_state(sites.last().unwrap(), &gate, &cfg.fu.canon).map(|s| (sites, s)));
        let (sites, next) = match recycled {
            Ok(r) => r,
            Err(Error::Numeric(msg)) | Err(Error::Instability(msg)) => {
                n_re = (n_re / 2).max(1);
                drv.event(format!("step {}: {msg}; n_re halved to {n_re}", drv.step + 1));
                state = build.update.trunc.state;
                let (obs, sweeps) = drv.observe(&state)?;
                drv.record(&obs, n_re, cost, cost, fu_sweeps + sweeps, true);
                continue;
            }
            Err(e) => return Err(e),
        };
        for a in &sites[..sites.len() - 1] {
            let est = IPeps::from_site_tensor(a, &gate.lambda_h0, &gate.lambda_v0)?;
            let obs = observables_weighted_2d(&est, cfg.params.h)?;
            drv.record(&obs, n_re, gate.truncation_weight, cost, 0, false);
        }
        if next.bond_dims() != state.bond_dims() {
            n_re = (n_re / 2).max(1);
            drv.event(format!(
                "step {}: bonds changed to {:?}, n_re halved to {n_re}",
                drv.step + 1,
                next.bond_dims()
            ));
        }
        state = next;
        let (obs, sweeps) = drv.observe(&state)?;
        drv.record(&obs, n_re, gate.truncation_weight, cost, fu_sweeps + sweeps, true);
    }
    let (observables, _) = drv.observe(&state)?;
    let env = drv.obs_env.take().expect("observed");
    Ok(Evolution2d {
        state,
        log: drv.log,
        observables,
        env,
    })
}

fn evolve_simple(mut drv: Driver2d<'_>, pepo: &GatePepo, mut state: IPeps) -> Result<Evolution2d> {
    let cfg = drv.cfg;
    while drv.budget_left() {
        let su = simple_update_step(&state, pepo, cfg.d, &cfg.fu.canon)?;
        state = su.state;
        let tw = su.truncation_weight;
        if drv.step + 1 == cfg.total_steps {
            let (obs, sweeps) = drv.observe(&state)?;
            drv.record(&obs, 1, tw, 0.0, sweeps, true);
        } else {
            let obs = observables_weighted_2d(&state, cfg.params.h)?;
            drv.record(&obs, 1, tw, 0.0, 0, false);
        }
    }
    let (observables, _) = drv.observe(&state)?;
    let env = drv.obs_env.take().expect("observed");
    Ok(Evolution2d {
        state,
        log: drv.log,
        observables,
        env,
    })
}
