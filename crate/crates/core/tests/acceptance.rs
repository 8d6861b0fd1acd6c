//! Acceptance criteria, one test each. Every test prints a single
//! `PASS`/`FAIL` line before asserting.
//!
//! Tests share one lock so that wall-clock measurements never overlap.

use std::io::Write;
use std::sync::{Mutex, MutexGuard};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use recycle_tn::ctm::{build_double, sweep, CtmEnvironment};
use recycle_tn::evo1d::{build_mpo, evolve_1d, Evo1dConfig, WarmUp};
use recycle_tn::evo2d::{
    build_pepo, evolve_2d, full_update_step, su_guess, Evo2dConfig, FuOptions, UpdateKind,
};
use recycle_tn::imps::{canonicalize_imps, check_canonical, gauge_fix_direct, IMps};
use recycle_tn::ipeps::{
    canonicalize_ipeps, check_canonical_2d, gauge_fix_ipeps, gauge_transform_2d, simple_update_step, IPeps,
};
use recycle_tn::models::{exact_energy_1d, expm_hermitian, kron, ring_hamiltonian, sigma_x, sigma_z, IsingParams};
use recycle_tn::tensor::linalg;
use recycle_tn::{Tensor, C64};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

/// Writes straight to stderr so the line shows even when output is captured.
fn report(id: u32, ok: bool, detail: String) {
    let verdict = if ok { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr().lock(), "{verdict} criterion {id}: {detail}");
}

const E_EXACT_1D: f64 = -1.306856;
const E0_2D: f64 = -1.619581;
const MZ0_2D: f64 = 0.240717;
const E1_2D: f64 = -1.601426;

fn run_1d(h: f64, delta: f64, chi: usize, n_re: usize, steps: usize) -> recycle_tn::evo1d::Evolution1d {
    let cfg = Evo1dConfig::new(IsingParams::chain(h, delta).unwrap(), chi, n_re, steps);
    evolve_1d(&cfg, None).unwrap()
}

#[test]
fn criterion_1_and_2_chain_energy_and_magnetization() {
    let _g = serial();
    let t = Instant::now();
    let ev = run_1d(1.05, 0.05, 16, 1, 2000);
    let secs = t.elapsed().as_secs_f64();
    let e = ev.observables.energy;
    let mz = ev.observables.mz;
    let ok1 = (e - E_EXACT_1D).abs() <= 1e-4 && secs < 60.0;
    let ok2 = mz.abs() <= 1e-3;
    report(1, ok1, format!("E = {e:.7}, |E - E_exact| = {:.2e} (tol 1e-4), {secs:.1} s (limit 60 s)", (e - E_EXACT_1D).abs()));
    report(2, ok2, format!("|mz| = {:.2e} (tol 1e-3)", mz.abs()));
    assert!(ok1 && ok2);
}

#[test]
fn criterion_3_recycling_beats_plain_updates_at_fixed_budget() {
    let _g = serial();
    let exact = exact_energy_1d(1.05).unwrap();
    let err = |n_re: usize| {
        let mut cfg = Evo1dConfig::new(IsingParams::chain(1.05, 0.05).unwrap(), 16, n_re, 1_000_000);
        cfg.warm_up = WarmUp::None;
        cfg.max_environments = Some(50);
        let ev = evolve_1d(&cfg, None).unwrap();
        assert_eq!(ev.log.i_re(), 50);
        ((ev.observables.energy - exact) / exact).abs()
    };
    let t = Instant::now();
    let (e1, e10) = (err(1), err(10));
    let secs = t.elapsed().as_secs_f64();
    let ok = e10 < e1 && secs < 120.0;
    report(3, ok, format!("relative error N_Re=1: {e1:.3e}, N_Re=10: {e10:.3e}, {secs:.1} s"));
    assert!(ok);
}

#[test]
fn criterion_4_trotter_error_is_second_order() {
    let _g = serial();
    let exact = exact_energy_1d(1.05).unwrap();
    let deltas = [0.1, 0.05, 0.025];
    let t = Instant::now();
    let errs: Vec<f64> = deltas
        .iter()
        .map(|&d| {
            let steps = (100.0 / d) as usize;
            (run_1d(1.05, d, 16, 1, steps).observables.energy - exact).abs()
        })
        .collect();
    let secs = t.elapsed().as_secs_f64();
    let x: Vec<f64> = deltas.iter().map(|d| d.ln()).collect();
    let y: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
    let slope = fit_slope(&x, &y);
    let ok = (slope - 2.0).abs() <= 0.3 && secs < 300.0;
    report(4, ok, format!("errors [{}] at delta {deltas:?}, slope {slope:.3} (2.0 +- 0.3), {secs:.1} s", sci(&errs)));
    assert!(ok);
}

fn sci(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3e}")).collect::<Vec<_>>().join(", ")
}

fn fit_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

#[test]
fn criterion_5_square_lattice_benchmark() {
    let _g = serial();
    let t = Instant::now();
    let mut cfg = Evo2dConfig::new(IsingParams::square(3.05, 0.005).unwrap(), 2, 20, 10, 3000);
    cfg.warm_up = WarmUp::Steps(20);
    let ev = evolve_2d(&cfg, None).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let (e, mz) = (ev.observables.energy, ev.observables.mz);
    let ok_e = (e - E0_2D).abs() <= 2e-2;
    let ok_mz = (mz - MZ0_2D).abs() <= 5e-2;
    report(
        5,
        ok_e && ok_mz,
        format!(
            "D=2: E = {e:.6} (|dE| = {:.2e}, tol 2e-2), mz = {mz:.5} (|dmz| = {:.2e}, tol 5e-2), {secs:.0} s",
            (e - E0_2D).abs(),
            (mz - MZ0_2D).abs()
        ),
    );
    assert!(ok_e && ok_mz);
}

#[test]
fn criterion_6_recycling_wall_time() {
    let _g = serial();
    let mut times = Vec::new();
    let mut energies = Vec::new();
    for n_re in [1, 2, 5, 10] {
        let mut cfg = Evo2dConfig::new(IsingParams::square(3.01, 0.01).unwrap(), 2, 20, n_re, 1205);
        cfg.warm_up = WarmUp::None;
        let ev = evolve_2d(&cfg, None).unwrap();
        times.push(ev.log.last().unwrap().wall_seconds);
        energies.push(ev.observables.energy);
    }
    let e = energies[0];
    let ok_e = (e - E1_2D).abs() <= 2e-3;
    let decreasing = times.windows(2).all(|w| w[1] < w[0]);
    let ok_ratio = times[3] <= 0.5 * times[0];
    report(
        6,
        ok_e && decreasing && ok_ratio,
        format!(
            "E(N_Re=1) = {e:.6} (|dE| = {:.2e}, tol 2e-3), energies {energies:.6?}, wall times {times:.1?} s for N_Re 1,2,5,10",
            (e - E1_2D).abs()
        ),
    );
    assert!(ok_e && decreasing && ok_ratio);
}

#[test]
fn criterion_7_full_update_beats_simple_update() {
    let _g = serial();
    let mut lines = Vec::new();
    let mut ok = true;
    for h in [3.0, 3.1] {
        let mut energies = [0.0; 2];
        for (i, update) in [UpdateKind::Full, UpdateKind::Simple].into_iter().enumerate() {
            let mut cfg = Evo2dConfig::new(IsingParams::square(h, 0.05).unwrap(), 2, 20, 10, 1000);
            cfg.update = update;
            cfg.warm_up = WarmUp::Steps(20);
            energies[i] = evolve_2d(&cfg, None).unwrap().observables.energy;
        }
        ok &= energies[0] <= energies[1];
        lines.push(format!(
            "h={h}: E_FU = {:.6}, E_SU = {:.6}, margin {:.2e}",
            energies[0],
            energies[1],
            energies[1] - energies[0]
        ));
    }
    report(7, ok, lines.join("; "));
    assert!(ok);
}

fn random_unitary(n: usize, rng: &mut ChaCha8Rng) -> Tensor {
    linalg::polar_unitary(&Tensor::random(&[n, n], rng)).unwrap()
}

/// `U A U†` on the bond legs of an iMPS site tensor.
fn gauge_1d(a: &Tensor, u: &Tensor) -> Tensor {
    a.apply_matrix(0, u).unwrap().apply_matrix(1, &u.conj()).unwrap()
}

/// Trace of the MPO around a ring of `n` sites.
fn mpo_ring(g: &Tensor, k: usize, n: usize) -> Tensor {
    let mut acc = g.clone();
    let mut dim = 2;
    for _ in 1..n {
        let t = recycle_tn::tensor::contract(&acc, g, &[(1, 0)]).unwrap();
        acc = t.permute(&[0, 3, 1, 4, 2, 5]).into_shape(&[k, k, dim * 2, dim * 2]).unwrap();
        dim *= 2;
    }
    Tensor::from_fn(&[dim, dim], |i| (0..k).map(|a| acc.get(&[a, a, i[0], i[1]])).sum())
}

fn site_op(op: &Tensor, site: usize, n: usize) -> Tensor {
    let id = Tensor::eye(2);
    let mut m = Tensor::eye(1);
    for j in 0..n {
        m = kron(&m, if j == site { op } else { &id });
    }
    m
}

/// PEPO network on the 2x2 torus and the dense split exponential.
fn torus_pair(h: f64, delta: f64) -> (Tensor, Tensor) {
    let g = build_pepo(&IsingParams::square(h, delta).unwrap()).unwrap();
    let k = g.kappa;
    let mut net = Tensor::zeros(&[16, 16]);
    for cfg in 0..k.pow(8) {
        let b: Vec<usize> = (0..8).map(|i| (cfg / k.pow(i)) % k).collect();
        let mut m = Tensor::eye(1);
        for site in 0..4 {
            let (x, y) = (site % 2, site / 2);
            let (l, r) = if x == 0 { (b[2 * y + 1], b[2 * y]) } else { (b[2 * y], b[2 * y + 1]) };
            let (d, u) = if y == 0 { (b[4 + 2 * x + 1], b[4 + 2 * x]) } else { (b[4 + 2 * x], b[4 + 2 * x + 1]) };
            m = kron(&m, &Tensor::from_fn(&[2, 2], |i| g.g.get(&[l, r, d, u, i[0], i[1]])));
        }
        net = &net + &m;
    }
    // Kronecker order puts site 0 first; each torus link appears twice.
    let links = [(0, 1), (1, 0), (2, 3), (3, 2), (0, 2), (2, 0), (1, 3), (3, 1)];
    let mut zz = Tensor::zeros(&[16, 16]);
    for &(i, j) in &links {
        zz = &zz + &site_op(&sigma_z(), i, 4).matmul(&site_op(&sigma_z(), j, 4)).unwrap();
    }
    let mut x = Tensor::zeros(&[16, 16]);
    for i in 0..4 {
        x = &x + &site_op(&sigma_x(), i, 4);
    }
    let f = expm_hermitian(&x, h * delta / 2.0).unwrap();
    let z = expm_hermitian(&zz, delta).unwrap();
    (net, f.matmul(&z).unwrap().matmul(&f).unwrap())
}

fn perturbed_entangled(h: f64, rng: &mut ChaCha8Rng) -> IPeps {
    let g = build_pepo(&IsingParams::square(h, 0.1).unwrap()).unwrap();
    let canon = FuOptions::new(8).canon;
    let mut s = IPeps::product(&[C64::new(0.9, 0.0), C64::new(0.3, 0.0)]);
    for _ in 0..4 {
        s = simple_update_step(&s, &g, 2, &canon).unwrap().state;
    }
    let noise = IPeps::random(2, 2, rng);
    let gamma = &s.gamma + &noise.gamma.scale_real(0.05);
    canonicalize_ipeps(&IPeps::new(gamma, s.lambda_h.clone(), s.lambda_v.clone()).unwrap(), 1e-12, 5000).unwrap()
}

#[test]
fn criterion_8_property_suites() {
    let _g = serial();
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);

    let mut worst_1d: f64 = 0.0;
    for _ in 0..100 {
        let chi = rng.random_range(1..=8);
        let s = canonicalize_imps(&IMps::random(chi, 2, &mut rng), 1e-12, 500).unwrap();
        worst_1d = worst_1d.max(check_canonical(&s));
    }

    let mut worst_2d: f64 = 0.0;
    for _ in 0..30 {
        let d = rng.random_range(1..=3);
        let s = canonicalize_ipeps(&IPeps::random(d, 2, &mut rng), 1e-12, 5000).unwrap();
        worst_2d = check_canonical_2d(&s).iter().fold(worst_2d, |m, &v| m.max(v));
    }

    let mut fid_1d: f64 = 1.0;
    for _ in 0..50 {
        let chi = rng.random_range(2..=6);
        let a = canonicalize_imps(&IMps::random(chi, 2, &mut rng), 1e-12, 500).unwrap().site_tensor();
        let b = gauge_1d(&a, &random_unitary(chi, &mut rng));
        fid_1d = fid_1d.min(gauge_fix_direct(&a, &b).unwrap().fidelity);
    }

    let mut fid_2d: f64 = 1.0;
    for _ in 0..20 {
        let d = rng.random_range(2..=3);
        let a = canonicalize_ipeps(&IPeps::random(d, 2, &mut rng), 1e-12, 5000).unwrap().site_tensor();
        let b = gauge_transform_2d(&a, &random_unitary(d, &mut rng), &random_unitary(d, &mut rng)).unwrap();
        fid_2d = fid_2d.min(gauge_fix_ipeps(&a, &b, 1e-14, 500, None).unwrap().fidelity);
    }

    let mut monotone = true;
    for _ in 0..20 {
        let h = rng.random_range(2.5..3.5);
        let s = perturbed_entangled(h, &mut rng);
        let g = build_pepo(&IsingParams::square(h, 0.05).unwrap()).unwrap();
        let opts = FuOptions::new(12);
        let guess = su_guess(&s, &g, 2, &opts.canon).unwrap();
        let c = full_update_step(&s, &g, &opts, None, &guess).unwrap().set.cost_history;
        monotone &= c.windows(2).all(|w| w[1] <= w[0] + 1e-10 * w[0].abs().max(1e-300));
    }

    let mut mpo_err: f64 = 0.0;
    for &(h, delta) in &[(1.05, 0.1), (0.5, 0.05), (2.0, 0.025)] {
        let g = build_mpo(&IsingParams::chain(h, delta).unwrap()).unwrap();
        let ring = mpo_ring(&g.g, g.kappa, 4);
        let field = &ring_hamiltonian(h, 4) - &ring_hamiltonian(0.0, 4);
        let ef = expm_hermitian(&field, -delta / 2.0).unwrap();
        let ei = expm_hermitian(&ring_hamiltonian(0.0, 4), -delta).unwrap();
        mpo_err = mpo_err.max(ring.max_diff(&ef.matmul(&ei).unwrap().matmul(&ef).unwrap()));
    }
    let mut pepo_err: f64 = 0.0;
    for &(h, delta) in &[(3.05, 0.01), (1.0, 0.1), (3.01, 0.05)] {
        let (net, dense) = torus_pair(h, delta);
        pepo_err = pepo_err.max(net.max_diff(&dense));
    }
    let secs = t.elapsed().as_secs_f64();

    let ok = worst_1d <= 1e-8
        && worst_2d <= 1e-6
        && fid_1d >= 1.0 - 1e-8
        && fid_2d >= 1.0 - 1e-8
        && monotone
        && mpo_err <= 1e-10
        && pepo_err <= 1e-10
        && secs < 300.0;
    report(
        8,
        ok,
        format!(
            "canonical residual 1D {worst_1d:.1e} (1e-8), 2D {worst_2d:.1e} (1e-6); gauge fidelity 1D {:.1e}, 2D {:.1e} below one (1e-8); FU cost monotone {monotone}; MPO {mpo_err:.1e}, PEPO {pepo_err:.1e} (1e-10); {secs:.0} s",
            1.0 - fid_1d,
            1.0 - fid_2d
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_9_ctm_sweep_cost_is_cubic() {
    let _g = serial();
    // A generic state, so that the corner spectra fill every chi_env.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let s = canonicalize_ipeps(&IPeps::random(2, 2, &mut rng), 1e-12, 5000).unwrap();
    let a = build_double(&s.site_tensor()).unwrap();
    let chis = [10usize, 20, 40];
    let mut per_sweep = Vec::new();
    let mut dims = Vec::new();
    for &chi in &chis {
        let mut env = CtmEnvironment::initial(&a, chi).unwrap();
        for _ in 0..10 {
            env = sweep(&env, &a).unwrap();
        }
        dims.push(env.c[0].dim(0));
        let reps = 5;
        let mut best = f64::INFINITY;
        for _ in 0..3 {
            let t = Instant::now();
            for _ in 0..reps {
                env = sweep(&env, &a).unwrap();
            }
            best = best.min(t.elapsed().as_secs_f64() / reps as f64);
        }
        per_sweep.push(best);
    }
    // t = c chi^3 with c the geometric mean of t / chi^3
    let c = (chis.iter().zip(&per_sweep).map(|(&x, t)| (t / (x as f64).powi(3)).ln()).sum::<f64>() / 3.0).exp();
    let ratios: Vec<f64> = chis.iter().zip(&per_sweep).map(|(&x, t)| t / (c * (x as f64).powi(3))).collect();
    let ok = ratios.iter().all(|r| (0.5..=2.0).contains(r));
    let x: Vec<f64> = chis.iter().map(|&x| (x as f64).ln()).collect();
    let y: Vec<f64> = per_sweep.iter().map(|t| t.ln()).collect();
    report(
        9,
        ok,
        format!(
            "per-sweep [{}] s at chi_env {chis:?} (corner dims {dims:?}), ratio to c chi^3 {ratios:.2?} (within 0.5..2), log-log slope {:.2}",
            sci(&per_sweep),
            fit_slope(&x, &y)
        ),
    );
    assert!(ok);
}
