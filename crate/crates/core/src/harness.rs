//! Batch front-end: run configuration, single runs, parameter sweeps and
//! their CSV/JSON artifacts.
//!
//! Configuration files are flat `key = value` text; `#` starts a comment.
//! List-valued keys (`h`, `n_re`, `update`) take comma-separated values or
//! an inclusive `start:stop:step` range.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ctm::CtmEnvironment;
use crate::error::{Error, Result};
use crate::evo1d::{evolve_1d, Evo1dConfig, EvolutionLog, WarmUp};
use crate::evo2d::{evolve_2d, Evo2dConfig, EvolutionLog2d, UpdateKind};
use crate::imps::IMps;
use crate::ipeps::IPeps;
use crate::models::IsingParams;

pub const LOG_HEADER_1D: [&str; 7] = ["step", "i_re", "n_re", "energy", "mz", "truncation_weight", "wall_seconds"];
pub const LOG_HEADER_2D: [&str; 9] = [
    "step",
    "i_re",
    "n_re",
    "energy",
    "mz",
    "truncation_weight",
    "wall_seconds",
    "ctm_sweeps",
    "cost_final",
];
pub const SWEEP_HEADER: [&str; 11] = [
    "h",
    "n_re",
    "update",
    "status",
    "energy",
    "mz",
    "truncation_weight",
    "wall_seconds",
    "steps",
    "i_re",
    "error",
];

/// JSON schema of the run summary.
pub const SUMMARY_SCHEMA: &str = include_str!("../schema/summary.schema.json");

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Model {
    Ising1d,
    Ising2d,
}

impl FromStr for Model {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "ising1d" => Ok(Model::Ising1d),
            "ising2d" => Ok(Model::Ising2d),
            other => Err(Error::config("model", format!("expected ising1d or ising2d, got `{other}`"))),
        }
    }
}

impl fmt::Display for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Model::Ising1d => "ising1d",
            Model::Ising2d => "ising2d",
        })
    }
}

fn update_name(u: UpdateKind) -> &'static str {
    match u {
        UpdateKind::Full => "fu",
        UpdateKind::Simple => "su",
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: Option<Model>,
    pub h: Vec<f64>,
    pub delta: f64,
    pub chi: usize,
    pub bond_d: usize,
    pub chi_env: usize,
    pub n_re: Vec<usize>,
    pub steps: Option<usize>,
    pub time: Option<f64>,
    pub warm_up: WarmUp,
    /// Recorded for provenance; the drivers themselves are deterministic.
    pub seed: u64,
    pub update: Vec<UpdateKind>,
    pub threads: usize,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub resume: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: None,
            h: Vec::new(),
            delta: 0.05,
            chi: 16,
            bond_d: 2,
            chi_env: 20,
            n_re: vec![1],
            steps: None,
            time: None,
            warm_up: WarmUp::default(),
            seed: 0,
            update: vec![UpdateKind::Full],
            threads: 1,
            out: None,
            checkpoint: None,
            resume: None,
        }
    }
}

fn parse_num<T: FromStr>(field: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::config(field, format!("cannot parse `{}`", v.trim())))
}

fn parse_list<T: FromStr>(field: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(field, s))
        .collect()
}

fn parse_reals(field: &str, v: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = v.split(':').collect();
    if parts.len() == 1 {
        return parse_list(field, v);
    }
    if parts.len() != 3 {
        return Err(Error::config(field, "range must be start:stop:step"));
    }
    let start: f64 = parse_num(field, parts[0])?;
    let stop: f64 = parse_num(field, parts[1])?;
    let step: f64 = parse_num(field, parts[2])?;
    if !(step > 0.0) || stop < start {
        return Err(Error::config(field, "range needs step > 0 and stop >= start"));
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    // round to the step's decimal grid so that 2.5:3.5:0.1 gives 2.6, not 2.6000000000000001
    let scale = 1e12;
    Ok((0..=n).map(|i| ((start + i as f64 * step) * scale).round() / scale).collect())
}

fn parse_warm_up(v: &str) -> Result<WarmUp> {
    let v = v.trim();
    if v == "none" {
        return Ok(WarmUp::None);
    }
    match v.split_once(':') {
        Some(("steps", n)) => Ok(WarmUp::Steps(parse_num("warm_up", n)?)),
        Some(("energy", tol)) => Ok(WarmUp::UntilEnergyChange(parse_num("warm_up", tol)?)),
        _ => Err(Error::config("warm_up", "expected none, steps:N or energy:TOL")),
    }
}

fn parse_updates(v: &str) -> Result<Vec<UpdateKind>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| match s {
            "fu" | "full" => Ok(UpdateKind::Full),
            "su" | "simple" => Ok(UpdateKind::Simple),
            other => Err(Error::config("update", format!("expected fu or su, got `{other}`"))),
        })
        .collect()
}

fn non_empty_path(field: &str, v: &str) -> Result<Option<PathBuf>> {
    let v = v.trim();
    if v.is_empty() {
        return Err(Error::config(field, "empty path"));
    }
    Ok(Some(PathBuf::from(v)))
}

impl RunConfig {
    /// Sets one key; `-` and `_` are interchangeable in key names.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        match key.as_str() {
            "model" => self.model = Some(value.parse()?),
            "h" => self.h = parse_reals("h", value)?,
            "delta" => self.delta = parse_num("delta", value)?,
            "chi" => self.chi = parse_num("chi", value)?,
            "bond_d" | "d" => self.bond_d = parse_num("bond_d", value)?,
            "chi_env" => self.chi_env = parse_num("chi_env", value)?,
            "n_re" => self.n_re = parse_list("n_re", value)?,
            "steps" => self.steps = Some(parse_num("steps", value)?),
            "time" => self.time = Some(parse_num("time", value)?),
            "warm_up" => self.warm_up = parse_warm_up(value)?,
            "seed" => self.seed = parse_num("seed", value)?,
            "update" => self.update = parse_updates(value)?,
            "threads" => self.threads = parse_num("threads", value)?,
            "out" => self.out = non_empty_path("out", value)?,
            "checkpoint" => self.checkpoint = non_empty_path("checkpoint", value)?,
            "resume" => self.resume = non_empty_path("resume", value)?,
            other => return Err(Error::config(other, "unknown key")),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config("line", format!("{}: expected key = value", no + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(&fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    pub fn model(&self) -> Result<Model> {
        self.model.ok_or_else(|| Error::config("model", "required"))
    }

    /// Number of time steps, from `steps` or from `time / delta`.
    pub fn total_steps(&self) -> Result<usize> {
        match (self.steps, self.time) {
            (Some(_), Some(_)) => Err(Error::config("time", "give either steps or time, not both")),
            (Some(n), None) => Ok(n),
            (None, Some(t)) => {
                if !(t > 0.0) || !t.is_finite() {
                    return Err(Error::config("time", "must be > 0"));
                }
                let n = (t / self.delta).round();
                if (n * self.delta - t).abs() > 1e-9 * t {
                    return Err(Error::config("time", format!("{t} is not a multiple of delta {}", self.delta)));
                }
                Ok(n as usize)
            }
            (None, None) => Err(Error::config("steps", "either steps or time is required")),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let model = self.model()?;
        if !(self.delta > 0.0) || !self.delta.is_finite() {
            return Err(Error::config("delta", "must be > 0"));
        }
        if let Some(h) = self.h.iter().find(|h| !(**h >= 0.0) || !h.is_finite()) {
            return Err(Error::config("h", format!("must be finite and >= 0, got {h}")));
        }
        if self.n_re.contains(&0) {
            return Err(Error::config("n_re", "must be >= 1"));
        }
        if self.n_re.is_empty() {
            return Err(Error::config("n_re", "at least one value required"));
        }
        if self.update.is_empty() {
            return Err(Error::config("update", "at least one value required"));
        }
        if self.threads == 0 {
            return Err(Error::config("threads", "must be >= 1"));
        }
        match model {
            Model::Ising1d => {
                if self.chi == 0 {
                    return Err(Error::config("chi", "must be >= 1"));
                }
                if self.update != [UpdateKind::Full] {
                    return Err(Error::config("update", "only available for ising2d"));
                }
            }
            Model::Ising2d => {
                if self.bond_d == 0 {
                    return Err(Error::config("bond_d", "must be >= 1"));
                }
                if self.chi_env == 0 {
                    return Err(Error::config("chi_env", "must be >= 1"));
                }
            }
        }
        if let WarmUp::UntilEnergyChange(tol) = self.warm_up {
            if !(tol > 0.0) {
                return Err(Error::config("warm_up", "energy tolerance must be > 0"));
            }
        }
        self.total_steps()?;
        Ok(())
    }

    /// Every `(h, n_re, update)` combination, in key order.
    pub fn points(&self) -> Vec<Point> {
        let mut pts = Vec::new();
        for &h in &self.h {
            for &n_re in &self.n_re {
                for &update in &self.update {
                    pts.push(Point { h, n_re, update });
                }
            }
        }
        pts.sort_by(|a, b| a.key().partial_cmp(&b.key()).unwrap());
        pts.dedup();
        pts
    }

    fn for_point(&self, p: Point) -> RunConfig {
        RunConfig {
            h: vec![p.h],
            n_re: vec![p.n_re],
            update: vec![p.update],
            ..self.clone()
        }
    }
}

/// One swept parameter combination.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct Point {
    pub h: f64,
    pub n_re: usize,
    pub update: UpdateKind,
}

impl Point {
    fn key(&self) -> (f64, usize, u8) {
        (self.h, self.n_re, self.update as u8)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub model: Model,
    pub h: f64,
    pub n_re: usize,
    pub update: UpdateKind,
    pub steps: usize,
    pub i_re: usize,
    pub energy: f64,
    pub mz: f64,
    pub truncation_weight: f64,
    pub wall_seconds: f64,
    pub events: Vec<String>,
    pub config: RunConfig,
}

#[derive(Clone, Debug)]
pub enum RunLog {
    Chain(EvolutionLog),
    Square(EvolutionLog2d),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum CheckpointState {
    Ising1d { state: IMps },
    Ising2d { state: IPeps, env: Option<CtmEnvironment> },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub h: f64,
    pub delta: f64,
    pub steps: usize,
    pub state: CheckpointState,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, serde_json::to_vec(self)?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub summary: Summary,
    pub log: RunLog,
    pub checkpoint: Checkpoint,
}

/// Runs the single point of `cfg` in memory.
pub fn execute(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let pts = cfg.points();
    if pts.len() != 1 {
        return Err(Error::config("h", format!("run needs exactly one point, got {}", pts.len())));
    }
    let p = pts[0];
    let resume = cfg.resume.as_deref().map(Checkpoint::load).transpose()?;
    if let Some(ck) = &resume {
        if (ck.h - p.h).abs() > 0.0 {
            log::warn!("resuming from a state evolved at h = {}", ck.h);
        }
    }
    let steps = cfg.total_steps()?;
    let model = cfg.model()?;
    let (summary_parts, log, state) = match model {
        Model::Ising1d => {
            let initial = match resume.map(|c| c.state) {
                None => None,
                Some(CheckpointState::Ising1d { state }) => Some(state),
                Some(_) => return Err(Error::config("resume", "checkpoint holds a 2D state")),
            };
            let mut ec = Evo1dConfig::new(IsingParams::chain(p.h, cfg.delta)?, cfg.chi, p.n_re, steps);
            ec.warm_up = cfg.warm_up;
            let ev = evolve_1d(&ec, initial)?;
            let last = ev.log.last().cloned();
            let parts = (
                ev.log.i_re(),
                ev.observables.energy,
                ev.observables.mz,
                last.as_ref().map_or(0.0, |r| r.truncation_weight),
                last.as_ref().map_or(0.0, |r| r.wall_seconds),
                ev.log.events.clone(),
            );
            (parts, RunLog::Chain(ev.log), CheckpointState::Ising1d { state: ev.state })
        }
        Model::Ising2d => {
            let (initial, env) = match resume.map(|c| c.state) {
                None => (None, None),
                Some(CheckpointState::Ising2d { state, env }) => (Some(state), env),
                Some(_) => return Err(Error::config("resume", "checkpoint holds a 1D state")),
            };
            let mut ec = Evo2dConfig::new(IsingParams::square(p.h, cfg.delta)?, cfg.bond_d, cfg.chi_env, p.n_re, steps);
            ec.warm_up = cfg.warm_up;
            ec.update = p.update;
            ec.warm_env = env;
            let ev = evolve_2d(&ec, initial)?;
            let last = ev.log.last().cloned();
            let parts = (
                last.as_ref().map_or(0, |r| r.i_re),
                ev.observables.energy,
                ev.observables.mz,
                last.as_ref().map_or(0.0, |r| r.truncation_weight),
                last.as_ref().map_or(0.0, |r| r.wall_seconds),
                ev.log.events.clone(),
            );
            (
                parts,
                RunLog::Square(ev.log),
                CheckpointState::Ising2d {
                    state: ev.state,
                    env: Some(ev.env),
                },
            )
        }
    };
    let (i_re, energy, mz, truncation_weight, wall_seconds, events) = summary_parts;
    let summary = Summary {
        model,
        h: p.h,
        n_re: p.n_re,
        update: p.update,
        steps,
        i_re,
        energy,
        mz,
        truncation_weight,
        wall_seconds,
        events,
        config: cfg.for_point(p),
    };
    Ok(RunOutcome {
        summary,
        log,
        checkpoint: Checkpoint {
            h: p.h,
            delta: cfg.delta,
            steps,
            state,
        },
    })
}

/// Shortest round-trip text, in scientific notation for small or large
/// magnitudes.
fn num(x: f64) -> String {
    let a = x.abs();
    if a == 0.0 || (1e-4..1e15).contains(&a) {
        x.to_string()
    } else {
        format!("{x:e}")
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Writes the per-step log; `wall_seconds` is the only non-reproducible
/// column.
pub fn write_log<W: Write>(log: &RunLog, w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    match log {
        RunLog::Chain(l) => {
            wr.write_record(LOG_HEADER_1D).map_err(csv_err)?;
            for r in &l.records {
                wr.write_record([
                    r.step.to_string(),
                    r.i_re.to_string(),
                    r.n_re.to_string(),
                    num(r.energy),
                    num(r.mz),
                    num(r.truncation_weight),
                    num(r.wall_seconds),
                ])
                .map_err(csv_err)?;
            }
        }
        RunLog::Square(l) => {
            wr.write_record(LOG_HEADER_2D).map_err(csv_err)?;
            for r in &l.records {
                wr.write_record([
                    r.step.to_string(),
                    r.i_re.to_string(),
                    r.n_re.to_string(),
                    num(r.energy),
                    num(r.mz),
                    num(r.truncation_weight),
                    num(r.wall_seconds),
                    r.ctm_sweeps.to_string(),
                    num(r.cost_final),
                ])
                .map_err(csv_err)?;
            }
        }
    }
    wr.flush()?;
    Ok(())
}

fn point_stem(p: &Point) -> String {
    format!("h{}_nre{}_{}", p.h, p.n_re, update_name(p.update))
}

/// Runs one point and writes `log.csv`, `summary.json` and the checkpoint.
pub fn run(cfg: &RunConfig) -> Result<Summary> {
    let out = execute(cfg)?;
    if let Some(dir) = &cfg.out {
        fs::create_dir_all(dir)?;
        write_log(&out.log, fs::File::create(dir.join("log.csv"))?)?;
        fs::write(dir.join("summary.json"), serde_json::to_vec_pretty(&out.summary)?)?;
    }
    if let Some(path) = &cfg.checkpoint {
        out.checkpoint.save(path)?;
    }
    Ok(out.summary)
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub point: Point,
    pub outcome: std::result::Result<Summary, String>,
}

/// `a + b exp(-c n)` least-squares fit of timings.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpFit {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub rms: f64,
}

fn linear_fit(x: &[f64], y: &[f64], c: f64) -> (f64, f64, f64) {
    let e: Vec<f64> = x.iter().map(|&n| (-c * n).exp()).collect();
    let k = x.len() as f64;
    let se: f64 = e.iter().sum();
    let see: f64 = e.iter().map(|v| v * v).sum();
    let sy: f64 = y.iter().sum();
    let sey: f64 = e.iter().zip(y).map(|(a, b)| a * b).sum();
    let det = k * see - se * se;
    let (a, b) = if det.abs() < 1e-300 {
        (sy / k, 0.0)
    } else {
        ((see * sy - se * sey) / det, (k * sey - se * sy) / det)
    };
    let sse = e.iter().zip(y).map(|(ev, yv)| (a + b * ev - yv).powi(2)).sum();
    (a, b, sse)
}

/// Fits `y ≈ a + b exp(-c x)` with `c > 0`; needs three points.
pub fn fit_exp_decay(x: &[f64], y: &[f64]) -> Option<ExpFit> {
    if x.len() != y.len() || x.len() < 3 {
        return None;
    }
    let sse = |lc: f64| linear_fit(x, y, lc.exp()).2;
    let (lo, hi) = (-8.0_f64, 4.0_f64);
    let grid = 600;
    let best = (0..=grid)
        .map(|i| lo + (hi - lo) * i as f64 / grid as f64)
        .min_by(|a, b| sse(*a).partial_cmp(&sse(*b)).unwrap())?;
    let step = (hi - lo) / grid as f64;
    let (mut a, mut b) = (best - step, best + step);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..100 {
        let m1 = b - g * (b - a);
        let m2 = a + g * (b - a);
        if sse(m1) < sse(m2) {
            b = m2;
        } else {
            a = m1;
        }
    }
    let c = ((a + b) / 2.0).exp();
    let (fa, fb, s) = linear_fit(x, y, c);
    Some(ExpFit {
        a: fa,
        b: fb,
        c,
        rms: (s / x.len() as f64).sqrt(),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct TimingFit {
    pub h: f64,
    pub update: UpdateKind,
    pub n_re: Vec<usize>,
    pub wall_seconds: Vec<f64>,
    pub fit: Option<ExpFit>,
}

#[derive(Clone, Debug, Default)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(SWEEP_HEADER).map_err(csv_err)?;
        for row in &self.rows {
            let p = &row.point;
            let rec = match &row.outcome {
                Ok(s) => [
                    p.h.to_string(),
                    p.n_re.to_string(),
                    update_name(p.update).to_string(),
                    "ok".to_string(),
                    num(s.energy),
                    num(s.mz),
                    num(s.truncation_weight),
                    num(s.wall_seconds),
                    s.steps.to_string(),
                    s.i_re.to_string(),
                    String::new(),
                ],
                Err(e) => [
                    p.h.to_string(),
                    p.n_re.to_string(),
                    update_name(p.update).to_string(),
                    "error".to_string(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    e.clone(),
                ],
            };
            wr.write_record(rec).map_err(csv_err)?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Wall time against `n_re` for each `(h, update)` group with at least
    /// three successful points.
    pub fn timing_fits(&self) -> Vec<TimingFit> {
        let mut groups: BTreeMap<(u64, u8), Vec<(usize, f64)>> = BTreeMap::new();
        for row in &self.rows {
            if let Ok(s) = &row.outcome {
                groups
                    .entry((row.point.h.to_bits(), row.point.update as u8))
                    .or_default()
                    .push((row.point.n_re, s.wall_seconds));
            }
        }
        groups
            .into_iter()
            .filter(|(_, v)| v.len() >= 3)
            .map(|((hb, u), v)| {
                let x: Vec<f64> = v.iter().map(|p| p.0 as f64).collect();
                let y: Vec<f64> = v.iter().map(|p| p.1).collect();
                TimingFit {
                    h: f64::from_bits(hb),
                    update: if u == UpdateKind::Full as u8 {
                        UpdateKind::Full
                    } else {
                        UpdateKind::Simple
                    },
                    n_re: v.iter().map(|p| p.0).collect(),
                    wall_seconds: y.clone(),
                    fit: fit_exp_decay(&x, &y),
                }
            })
            .collect()
    }

    /// `h, n_re, energy_su, energy_fu, mz_su, mz_fu` for points run with both
    /// updates.
    pub fn write_update_comparison<W: Write>(&self, w: W) -> Result<usize> {
        let mut by_key: BTreeMap<(u64, usize), [Option<&Summary>; 2]> = BTreeMap::new();
        for row in &self.rows {
            if let Ok(s) = &row.outcome {
                let slot = match row.point.update {
                    UpdateKind::Simple => 0,
                    UpdateKind::Full => 1,
                };
                by_key.entry((row.point.h.to_bits(), row.point.n_re)).or_default()[slot] = Some(s);
            }
        }
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["h", "n_re", "energy_su", "energy_fu", "mz_su", "mz_fu"])
            .map_err(csv_err)?;
        let mut n = 0;
        for ((hb, n_re), [su, fu]) in by_key {
            if let (Some(su), Some(fu)) = (su, fu) {
                wr.write_record([
                    f64::from_bits(hb).to_string(),
                    n_re.to_string(),
                    num(su.energy),
                    num(fu.energy),
                    num(su.mz),
                    num(fu.mz),
                ])
                .map_err(csv_err)?;
                n += 1;
            }
        }
        wr.flush()?;
        Ok(n)
    }
}

/// Runs every point of `cfg` on a pool of `cfg.threads` workers. Failed
/// points are kept as error rows.
pub fn sweep_table(cfg: &RunConfig) -> Result<SweepTable> {
    cfg.validate()?;
    if cfg.checkpoint.is_some() || cfg.resume.is_some() {
        return Err(Error::config("checkpoint", "checkpoints are only supported by run"));
    }
    let pts = cfg.points();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::Resource(e.to_string()))?;
    let results: Vec<(Point, Result<RunOutcome>)> = pool.install(|| {
        pts.par_iter()
            .map(|&p| {
                let mut pc = cfg.for_point(p);
                pc.out = None;
                (p, execute(&pc))
            })
            .collect()
    });
    let mut rows = Vec::with_capacity(results.len());
    for (point, res) in results {
        let outcome = match res {
            Ok(out) => {
                if let Some(dir) = &cfg.out {
                    fs::create_dir_all(dir)?;
                    let f = fs::File::create(dir.join(format!("log_{}.csv", point_stem(&point))))?;
                    write_log(&out.log, f)?;
                }
                Ok(out.summary)
            }
            Err(e) => {
                log::warn!("point {point:?} failed: {e}");
                Err(e.to_string())
            }
        };
        rows.push(SweepRow { point, outcome });
    }
    Ok(SweepTable { rows })
}

/// [`sweep_table`] plus its artifacts: `sweep.csv`, and when applicable
/// `timing_fit.json` and `fu_su.csv`.
pub fn sweep(cfg: &RunConfig) -> Result<SweepTable> {
    let table = sweep_table(cfg)?;
    if let Some(dir) = &cfg.out {
        fs::create_dir_all(dir)?;
        table.write_csv(fs::File::create(dir.join("sweep.csv"))?)?;
        let fits = table.timing_fits();
        if !fits.is_empty() {
            fs::write(dir.join("timing_fit.json"), serde_json::to_vec_pretty(&fits)?)?;
        }
        if cfg.update.len() > 1 {
            table.write_update_comparison(fs::File::create(dir.join("fu_su.csv"))?)?;
        }
    }
    Ok(table)
}
