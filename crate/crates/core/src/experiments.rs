//! Singular-limit sweeps: error norms between relaxed and limit solutions,
//! log-log rate fits, discretization floors and CSV reports.
//!
//! Everything here runs in `f64`.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::diagnostics::{
    dissipation, energy_identity_residual, initial_layer, lyapunov, manifold_distance, manifold_residuals,
    signal_residual, EnergyRecord, ManifoldKind,
};
use crate::dynamics::{simulate, ModelParams, Regime, SnapshotRecorder, State};
use crate::error::{Error, Result};
use crate::grid::{integrate, Field, Grid, GridKind};
use crate::initial::Profile;

type F = Field<f64>;
type S = State<f64>;

/// Points beneath this multiple of the discretization floor are kept out of
/// rate fits.
pub const FLOOR_FACTOR: f64 = 3.0;

/// Fewest points a rate fit accepts.
pub const MIN_FIT_POINTS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GridSpec {
    Interval {
        length: f64,
        nodes: usize,
    },
    Rectangle {
        lx: f64,
        ly: f64,
        nx: usize,
        ny: usize,
    },
    RadialBall {
        dimension: usize,
        radius: f64,
        nodes: usize,
    },
}

impl GridSpec {
    pub fn build(&self) -> Result<Arc<Grid<f64>>> {
        match *self {
            GridSpec::Interval { length, nodes } => Grid::interval(length, nodes),
            GridSpec::Rectangle { lx, ly, nx, ny } => Grid::rectangle(lx, ly, nx, ny),
            GridSpec::RadialBall {
                dimension,
                radius,
                nodes,
            } => Grid::radial_ball(dimension, radius, nodes),
        }
    }

    /// Spatial dimension of the domain the grid represents.
    pub fn dimension(&self) -> usize {
        match *self {
            GridSpec::Interval { .. } => 1,
            GridSpec::Rectangle { .. } => 2,
            GridSpec::RadialBall { dimension, .. } => dimension,
        }
    }
}

/// Which limit is approached and along which parameter points.
#[derive(Debug, Clone, PartialEq)]
pub enum SweepKind {
    /// `ε → 0` at fixed `τ`; abscissa `ε`.
    Pes { tau: f64, eps: Vec<f64> },
    /// `(ε, τ) → 0`; abscissa `|κ| = ε + τ`.
    Ids { kappas: Vec<(f64, f64)> },
}

impl SweepKind {
    /// `(ε, τ)` of every sweep point, in configuration order.
    pub fn points(&self) -> Vec<(f64, f64)> {
        match self {
            SweepKind::Pes { tau, eps } => eps.iter().map(|&e| (e, *tau)).collect(),
            SweepKind::Ids { kappas } => kappas.clone(),
        }
    }

    pub fn abscissa(&self, eps: f64, tau: f64) -> f64 {
        match self {
            SweepKind::Pes { .. } => eps,
            SweepKind::Ids { .. } => eps + tau,
        }
    }

    pub fn limit_regime(&self) -> Regime<f64> {
        match *self {
            SweepKind::Pes { tau, .. } => Regime::PesLimit { tau },
            SweepKind::Ids { .. } => Regime::IdsLimit,
        }
    }

    pub fn manifold(&self) -> ManifoldKind<f64> {
        match *self {
            SweepKind::Pes { tau, .. } => ManifoldKind::Pes { tau },
            SweepKind::Ids { .. } => ManifoldKind::Ids,
        }
    }
}

/// How the relaxed runs choose `(c₀, w₀)` given `n₀`.
#[derive(Debug, Clone, PartialEq)]
pub enum DataFamily {
    /// The signals the limit induces from `n₀`: distance zero.
    WellPrepared,
    /// Explicit signals, generally at distance `O(1)` from the manifold.
    IllPrepared { c0: Profile<f64>, w0: Profile<f64> },
    /// Limit signals plus `amplitude·x·cos(πx/L)`, with `x` the point's
    /// abscissa, so the distance shrinks like the abscissa.
    EpsPrepared { amplitude: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub kind: SweepKind,
    pub grid: GridSpec,
    pub t_end: f64,
    pub dt: f64,
    pub n0: Profile<f64>,
    pub data: DataFamily,
}

impl SweepConfig {
    /// Interval `L = 1` with 256 nodes, `T = 0.5`, `dt = 1e-3`, `τ = 1` and a
    /// gaussian of mass 0.5.
    pub fn desk_pes(eps: Vec<f64>, data: DataFamily) -> Self {
        SweepConfig {
            kind: SweepKind::Pes { tau: 1.0, eps },
            grid: GridSpec::Interval {
                length: 1.0,
                nodes: 256,
            },
            t_end: 0.5,
            dt: 1e-3,
            n0: Profile::gaussian(0.3, 0.1, 0.5),
            data,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let points = self.kind.points();
        if points.len() < MIN_FIT_POINTS {
            return Err(Error::InsufficientPoints(format!(
                "{} sweep points configured, at least {MIN_FIT_POINTS} required",
                points.len()
            )));
        }
        for &(eps, tau) in &points {
            if !(eps > 0.0 && tau > 0.0 && eps.is_finite() && tau.is_finite()) {
                return Err(Error::param("eps", "sweep parameters must be finite and positive"));
            }
        }
        if let SweepKind::Pes { tau, .. } = self.kind {
            if !(tau > 0.0 && tau.is_finite()) {
                return Err(Error::param("tau", "must be finite and positive"));
            }
        }
        let xs: Vec<f64> = points.iter().map(|&(e, t)| self.kind.abscissa(e, t)).collect();
        if xs.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::param("eps", "sweep points must be strictly decreasing"));
        }
        if !(self.dt > 0.0 && self.t_end > 0.0) {
            return Err(Error::param("dt", "dt and t_end must be positive"));
        }
        let ratio = self.t_end / self.dt;
        if (ratio - ratio.round()).abs() > 1e-9 * ratio.max(1.0) {
            return Err(Error::param("dt", format!("t_end/dt = {ratio} is not an integer")));
        }
        if let DataFamily::EpsPrepared { amplitude } = self.data {
            if !amplitude.is_finite() {
                return Err(Error::param("amplitude", "must be finite"));
            }
        }
        self.n0.validate()?;
        if let DataFamily::IllPrepared { c0, w0 } = &self.data {
            c0.validate()?;
            w0.validate()?;
        }
        Ok(())
    }

    fn model(&self, regime: Regime<f64>) -> ModelParams<f64> {
        ModelParams::new(regime, self.dt, self.t_end)
    }
}

/// Error and residual norms a sweep records per point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Metric {
    ErrNLinfL2,
    ErrNL2H1,
    ErrCLinfH1,
    ErrCL2H1,
    ErrWLinfL2,
    ErrWL2H1,
    /// `‖Δc - c + w‖_{L²((0,T);H¹)}`
    ResManifoldL2H1,
    /// Second manifold residual in `L²(Ω×(0,T))`: `τΔw - w + n` for PES,
    /// `-w + n` for IDS.
    ResWL2,
}

impl Metric {
    pub const ALL: [Metric; 8] = [
        Metric::ErrNLinfL2,
        Metric::ErrNL2H1,
        Metric::ErrCLinfH1,
        Metric::ErrCL2H1,
        Metric::ErrWLinfL2,
        Metric::ErrWL2H1,
        Metric::ResManifoldL2H1,
        Metric::ResWL2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::ErrNLinfL2 => "err_n_LinfL2",
            Metric::ErrNL2H1 => "err_n_L2H1",
            Metric::ErrCLinfH1 => "err_c_LinfH1",
            Metric::ErrCL2H1 => "err_c_L2H1",
            Metric::ErrWLinfL2 => "err_w_LinfL2",
            Metric::ErrWL2H1 => "err_w_L2H1",
            Metric::ResManifoldL2H1 => "res_manifold_L2H1",
            Metric::ResWL2 => "res_w_L2",
        }
    }

    /// Whether the metric compares against the limit solution rather than
    /// measuring a residual of the relaxed run alone.
    pub fn is_error(self) -> bool {
        !matches!(self, Metric::ResManifoldL2H1 | Metric::ResWL2)
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::MalformedReport(format!("unknown metric `{s}`")))
    }
}

/// Least-squares line through `(log x, log e)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    /// Standard error of the slope.
    pub stderr: f64,
    pub points: usize,
}

pub fn fit_rate(xs: &[f64], es: &[f64]) -> Result<RateFit> {
    if xs.len() != es.len() {
        return Err(Error::LengthMismatch {
            expected: xs.len(),
            found: es.len(),
        });
    }
    if xs.len() < MIN_FIT_POINTS {
        return Err(Error::InsufficientPoints(format!(
            "{} points, at least {MIN_FIT_POINTS} required",
            xs.len()
        )));
    }
    if xs.iter().chain(es).any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::param("xs", "rate fits need finite positive data"));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let le: Vec<f64> = es.iter().map(|e| e.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let me = le.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx <= f64::EPSILON * n * (1.0 + mx * mx) {
        return Err(Error::param("xs", "abscissae are degenerate"));
    }
    let sxe: f64 = lx.iter().zip(&le).map(|(x, e)| (x - mx) * (e - me)).sum();
    let slope = sxe / sxx;
    let intercept = me - slope * mx;
    let ssr: f64 = lx
        .iter()
        .zip(&le)
        .map(|(x, e)| (e - intercept - slope * x).powi(2))
        .sum();
    Ok(RateFit {
        slope,
        intercept,
        stderr: (ssr / (n - 2.0) / sxx).sqrt(),
        points: lx.len(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum FitOutcome {
    Fitted(RateFit),
    Rejected { reason: String, points: usize },
}

impl FitOutcome {
    pub fn fit(&self) -> Option<&RateFit> {
        match self {
            FitOutcome::Fitted(f) => Some(f),
            FitOutcome::Rejected { .. } => None,
        }
    }

    pub fn points(&self) -> usize {
        match self {
            FitOutcome::Fitted(f) => f.points,
            FitOutcome::Rejected { points, .. } => *points,
        }
    }
}

/// Conditions a report carries alongside its numbers.
#[derive(Debug, Clone, PartialEq)]
pub enum Flag {
    /// The `w` error at the smallest abscissa is at least half the one at the
    /// largest: it does not vanish with the relaxation parameter.
    WPlateau { ratio: f64 },
    /// Initial mass at or above the critical mass of this geometry.
    MassAboveThreshold { mass: f64, threshold: f64 },
    /// Some sweep points failed and were left out.
    Failures { count: usize },
}

impl fmt::Display for Flag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Flag::WPlateau { ratio } => write!(f, "w_plateau (smallest/largest w error = {ratio:.3})"),
            Flag::MassAboveThreshold { mass, threshold } => {
                write!(f, "mass_above_threshold (M = {mass:.6}, threshold {threshold:.6})")
            }
            Flag::Failures { count } => write!(f, "failed_points ({count})"),
        }
    }
}

/// One relaxed run of a sweep.
#[derive(Debug, Clone)]
pub struct RatePoint {
    pub eps: f64,
    pub tau: f64,
    pub abscissa: f64,
    pub values: BTreeMap<Metric, f64>,
    /// Plain distance of the initial data from the critical manifold.
    pub dist: f64,
    pub layer_c: f64,
    pub layer_w: f64,
    pub runtime: Duration,
    pub failure: Option<String>,
}

#[derive(Debug, Clone)]
pub struct RateReport {
    pub kind: SweepKind,
    pub mass: f64,
    pub points: Vec<RatePoint>,
    /// Per-metric discretization floor.
    pub floors: BTreeMap<Metric, f64>,
    /// Refinement change of the limit solution alone; see [`Floors`].
    pub limit_floors: BTreeMap<Metric, f64>,
    pub fits: BTreeMap<Metric, FitOutcome>,
    pub flags: Vec<Flag>,
}

impl RateReport {
    pub fn abscissae(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.abscissa).collect()
    }

    /// Values of `metric` in sweep order; `NaN` marks failed points.
    pub fn series(&self, metric: Metric) -> Vec<f64> {
        self.points
            .iter()
            .map(|p| p.values.get(&metric).copied().unwrap_or(f64::NAN))
            .collect()
    }

    pub fn slope(&self, metric: Metric) -> Option<f64> {
        self.fits.get(&metric).and_then(|f| f.fit()).map(|f| f.slope)
    }

    pub fn has_flag(&self, pred: impl Fn(&Flag) -> bool) -> bool {
        self.flags.iter().any(pred)
    }

    /// Whether `value` of `metric` enters the fit.
    pub fn in_fit_window(&self, metric: Metric, value: f64) -> bool {
        value > 0.0
            && value.is_finite()
            && self
                .floors
                .get(&metric)
                .is_none_or(|floor| value >= FLOOR_FACTOR * floor)
    }

    /// Errors unless every metric was fitted.
    pub fn require_fits(&self) -> Result<()> {
        match self.fits.iter().find(|(_, f)| f.fit().is_none()) {
            Some((m, FitOutcome::Rejected { reason, .. })) => Err(Error::InsufficientPoints(format!("{m}: {reason}"))),
            _ => Ok(()),
        }
    }
}

/// Initial state of the relaxed run at `(eps, tau)` on `grid`.
fn relaxed_initial(cfg: &SweepConfig, grid: &Arc<Grid<f64>>, n0: &F, abscissa: f64) -> Result<S> {
    let (c0, w0) = match &cfg.data {
        DataFamily::WellPrepared => {
            let layer = initial_layer(n0, n0, n0, cfg.kind.manifold())?;
            (layer.c_limit0, layer.w_limit0)
        }
        DataFamily::IllPrepared { c0, w0 } => (c0.sample(grid)?, w0.sample(grid)?),
        DataFamily::EpsPrepared { amplitude } => {
            let layer = initial_layer(n0, n0, n0, cfg.kind.manifold())?;
            let shape = first_mode(grid)?;
            let delta = amplitude * abscissa;
            (layer.c_limit0.axpy(delta, &shape)?, layer.w_limit0.axpy(delta, &shape)?)
        }
    };
    State::new(0.0, n0.clone(), c0, w0)
}

fn first_mode(grid: &Arc<Grid<f64>>) -> Result<F> {
    let length = match grid.kind() {
        GridKind::Interval { length } => length,
        GridKind::Rectangle { lx, .. } => lx,
        GridKind::RadialBall { radius, .. } => radius,
    };
    Field::from_fn(grid.clone(), |p| (std::f64::consts::PI * p[0] / length).cos())
}

fn limit_trajectory(cfg: &SweepConfig, init: &S) -> Result<Vec<S>> {
    let mut rec = SnapshotRecorder::default();
    simulate(&cfg.model(cfg.kind.limit_regime()), init, 1, &mut [&mut rec])?;
    Ok(rec.states)
}

/// Sup-in-time and left-endpoint `L²`-in-time accumulation.
#[derive(Debug, Clone)]
struct TimeNorms {
    dt: f64,
    last: usize,
    sup: BTreeMap<Metric, f64>,
    sq: BTreeMap<Metric, f64>,
}

impl TimeNorms {
    fn new(dt: f64, last: usize) -> Self {
        TimeNorms {
            dt,
            last,
            sup: BTreeMap::new(),
            sq: BTreeMap::new(),
        }
    }

    fn sup(&mut self, m: Metric, v: f64) {
        let e = self.sup.entry(m).or_insert(0.0);
        *e = e.max(v);
    }

    fn l2(&mut self, m: Metric, step: usize, v: f64) {
        let e = self.sq.entry(m).or_insert(0.0);
        if step < self.last {
            *e += self.dt * v * v;
        }
    }

    fn finish(self) -> BTreeMap<Metric, f64> {
        let mut out = self.sup;
        out.extend(self.sq.into_iter().map(|(m, v)| (m, v.sqrt())));
        out
    }
}

fn h1(f: &F) -> Result<f64> {
    f.norm_sobolev(1, 2.0)
}

/// Adds the error norms of `state` against `reference` at `step`.
fn accumulate_errors(acc: &mut TimeNorms, step: usize, state: &S, reference: &S) -> Result<()> {
    let dn = &state.n - &reference.n;
    let dc = &state.c - &reference.c;
    let dw = &state.w - &reference.w;
    acc.sup(Metric::ErrNLinfL2, dn.norm_l2());
    acc.l2(Metric::ErrNL2H1, step, h1(&dn)?);
    let dc_h1 = h1(&dc)?;
    acc.sup(Metric::ErrCLinfH1, dc_h1);
    acc.l2(Metric::ErrCL2H1, step, dc_h1);
    acc.sup(Metric::ErrWLinfL2, dw.norm_l2());
    acc.l2(Metric::ErrWL2H1, step, h1(&dw)?);
    Ok(())
}

/// Accumulates every metric of one relaxed trajectory against `reference`.
///
/// Residuals use the density that produced the signals of each state (the
/// previous one), which is what the implicit signal updates balance.
struct SweepProbe<'a> {
    kind: ManifoldKind<f64>,
    reference: &'a [S],
    acc: TimeNorms,
    previous_n: Option<F>,
    error: Option<Error>,
}

impl SweepProbe<'_> {
    fn observe(&mut self, k: usize, s: &S) {
        if self.error.is_some() {
            return;
        }
        let r = (|| -> Result<()> {
            accumulate_errors(&mut self.acc, k, s, &self.reference[k])?;
            let lagged = State {
                t: s.t,
                n: self.previous_n.take().unwrap_or_else(|| s.n.clone()),
                c: s.c.clone(),
                w: s.w.clone(),
            };
            let (first, second) = manifold_residuals(&lagged, self.kind)?;
            self.acc.l2(Metric::ResManifoldL2H1, k, h1(&first)?);
            self.acc.l2(Metric::ResWL2, k, second.norm_l2());
            self.previous_n = Some(s.n.clone());
            Ok(())
        })();
        if let Err(e) = r {
            self.error = Some(e);
        }
    }
}

fn run_point(cfg: &SweepConfig, grid: &Arc<Grid<f64>>, n0: &F, reference: &[S], eps: f64, tau: f64) -> RatePoint {
    let started = Instant::now();
    let abscissa = cfg.kind.abscissa(eps, tau);
    let mut point = RatePoint {
        eps,
        tau,
        abscissa,
        values: BTreeMap::new(),
        dist: f64::NAN,
        layer_c: f64::NAN,
        layer_w: f64::NAN,
        runtime: Duration::ZERO,
        failure: None,
    };
    let outcome = (|| -> Result<BTreeMap<Metric, f64>> {
        let init = relaxed_initial(cfg, grid, n0, abscissa)?;
        let kind = cfg.kind.manifold();
        point.dist = manifold_distance(&init.n, &init.c, &init.w, kind, 0, 0, 2.0)?;
        let layer = initial_layer(&init.n, &init.c, &init.w, kind)?;
        point.layer_c = layer.layer_c;
        point.layer_w = layer.layer_w;

        let params = cfg.model(Regime::Full { eps, tau });
        let mut probe = SweepProbe {
            kind,
            reference,
            acc: TimeNorms::new(cfg.dt, params.steps()),
            previous_n: None,
            error: None,
        };
        let mut observe = |k: usize, s: &S| probe.observe(k, s);
        simulate(&params, &init, 1, &mut [&mut observe])?;
        match probe.error {
            Some(e) => Err(e),
            None => Ok(probe.acc.finish()),
        }
    })();
    match outcome {
        Ok(values) => point.values = values,
        Err(e) => point.failure = Some(e.to_string()),
    }
    point.runtime = started.elapsed();
    point
}

/// Relaxed-minus-limit states along a run at `(eps, tau)` on `grid`, plus the
/// limit trajectory itself.
fn error_trajectory(cfg: &SweepConfig, grid: &Arc<Grid<f64>>, eps: f64, tau: f64) -> Result<(Vec<S>, Vec<S>)> {
    let n0 = cfg.n0.sample(grid)?;
    let reference = limit_trajectory(cfg, &State::new(0.0, n0.clone(), n0.clone(), n0.clone())?)?;
    let init = relaxed_initial(cfg, grid, &n0, cfg.kind.abscissa(eps, tau))?;
    let mut rec = SnapshotRecorder::default();
    simulate(&cfg.model(Regime::Full { eps, tau }), &init, 1, &mut [&mut rec])?;
    let errors = rec
        .states
        .iter()
        .zip(&reference)
        .map(|(s, r)| State {
            t: s.t,
            n: &s.n - &r.n,
            c: &s.c - &r.c,
            w: &s.w - &r.w,
        })
        .collect();
    Ok((errors, reference))
}

/// Discretization floors of every metric.
///
/// The sweep point with the smallest abscissa is rerun together with its
/// limit at `(h/2, dt/2)`. A metric's floor is the larger of
///
/// * the change of the metric's value under the refinement, which also picks
///   up the time quadrature of an unresolved initial layer, and
/// * for error metrics, the metric applied to the change of the error field
///   `(n_ε - n, c_ε - c, w_ε - w)`, sampled at the coarse nodes and times.
///
/// Either way it is the part of a measured value that belongs to the mesh and
/// step rather than to `ε`.
pub fn discretization_floors(cfg: &SweepConfig) -> Result<Floors> {
    cfg.validate()?;
    let &(eps, tau) = cfg
        .kind
        .points()
        .iter()
        .min_by(|a, b| cfg.kind.abscissa(a.0, a.1).total_cmp(&cfg.kind.abscissa(b.0, b.1)))
        .expect("validated sweep has points");
    let coarse_grid = cfg.grid.build()?;
    let fine_grid = coarse_grid.refined()?;
    let fine_cfg = SweepConfig {
        dt: cfg.dt / 2.0,
        ..cfg.clone()
    };
    let (coarse, coarse_ref) = error_trajectory(cfg, &coarse_grid, eps, tau)?;
    let (fine, fine_ref) = error_trajectory(&fine_cfg, &fine_grid, eps, tau)?;
    let restrict = |f: &F| -> F {
        let values = (0..coarse_grid.len())
            .map(|i| f.values()[coarse_grid.refined_index(i)])
            .collect();
        Field::new(coarse_grid.clone(), values).expect("restriction of a finite field")
    };
    let restrict_state = |s: &S| State {
        t: s.t,
        n: restrict(&s.n),
        c: restrict(&s.c),
        w: restrict(&s.w),
    };
    let last = coarse.len() - 1;
    let mut errors = TimeNorms::new(cfg.dt, last);
    let mut limit = TimeNorms::new(cfg.dt, last);
    for k in 0..=last {
        accumulate_errors(&mut errors, k, &restrict_state(&fine[2 * k]), &coarse[k])?;
        accumulate_errors(&mut limit, k, &restrict_state(&fine_ref[2 * k]), &coarse_ref[k])?;
    }

    let values = |cfg: &SweepConfig, grid: &Arc<Grid<f64>>, reference: &[S]| -> Result<BTreeMap<Metric, f64>> {
        let point = run_point(cfg, grid, &reference[0].n, reference, eps, tau);
        match point.failure {
            Some(reason) => Err(Error::RunFailed {
                time: f64::NAN,
                source: Box::new(Error::param("floor", reason)),
            }),
            None => Ok(point.values),
        }
    };
    let coarse_values = values(cfg, &coarse_grid, &coarse_ref)?;
    let fine_values = values(&fine_cfg, &fine_grid, &fine_ref)?;
    let field = errors.finish();
    let floors = Metric::ALL
        .into_iter()
        .map(|m| {
            let change = (coarse_values[&m] - fine_values[&m]).abs();
            (m, field.get(&m).map_or(change, |f| f.max(change)))
        })
        .collect();
    Ok(Floors {
        errors: floors,
        limit: limit.finish(),
    })
}

/// Output of [`discretization_floors`].
#[derive(Debug, Clone, PartialEq)]
pub struct Floors {
    /// Per-metric floor; the fit window is cut at [`FLOOR_FACTOR`] times
    /// these.
    pub errors: BTreeMap<Metric, f64>,
    /// Refinement change of the limit solution alone, in the same norms. Much
    /// larger than `errors` since the two solves of a sweep point share their
    /// mesh error; reported only.
    pub limit: BTreeMap<Metric, f64>,
}

/// The floor of the primary metric, `‖n_ε - n‖_{L^∞((0,T);L²)}`.
pub fn discretization_floor(cfg: &SweepConfig) -> Result<f64> {
    Ok(discretization_floors(cfg)?.errors[&Metric::ErrNLinfL2])
}

fn mass_threshold(cfg: &SweepConfig) -> Option<f64> {
    let pi = std::f64::consts::PI;
    match (&cfg.kind, cfg.grid.dimension()) {
        (SweepKind::Ids { .. }, 2) => Some(4.0 * pi),
        (SweepKind::Pes { tau, .. }, 4) if matches!(cfg.grid, GridSpec::RadialBall { .. }) => {
            Some(64.0 * tau * pi * pi)
        }
        _ => None,
    }
}

fn run_sweep(cfg: &SweepConfig) -> Result<RateReport> {
    cfg.validate()?;
    let grid = cfg.grid.build()?;
    let n0 = cfg.n0.sample(&grid)?;
    let mass = integrate(&n0)?;
    let reference = limit_trajectory(cfg, &State::new(0.0, n0.clone(), n0.clone(), n0.clone())?)?;
    let Floors {
        errors: floors,
        limit: limit_floors,
    } = discretization_floors(cfg)?;
    let points: Vec<RatePoint> = cfg
        .kind
        .points()
        .par_iter()
        .map(|&(eps, tau)| run_point(cfg, &grid, &n0, &reference, eps, tau))
        .collect();

    let mut report = RateReport {
        kind: cfg.kind.clone(),
        mass,
        points,
        floors,
        limit_floors,
        fits: BTreeMap::new(),
        flags: Vec::new(),
    };
    for metric in Metric::ALL {
        let (xs, es): (Vec<f64>, Vec<f64>) = report
            .points
            .iter()
            .filter(|p| p.failure.is_none())
            .filter_map(|p| p.values.get(&metric).map(|&v| (p.abscissa, v)))
            .filter(|&(_, v)| report.in_fit_window(metric, v))
            .unzip();
        let outcome = match fit_rate(&xs, &es) {
            Ok(fit) => FitOutcome::Fitted(fit),
            Err(e) => FitOutcome::Rejected {
                reason: e.to_string(),
                points: xs.len(),
            },
        };
        report.fits.insert(metric, outcome);
    }

    let ok: Vec<&RatePoint> = report.points.iter().filter(|p| p.failure.is_none()).collect();
    if let (Some(first), Some(last)) = (ok.first(), ok.last()) {
        let (a, b) = (first.values[&Metric::ErrWLinfL2], last.values[&Metric::ErrWLinfL2]);
        if ok.len() > 1 && a > 0.0 && b >= 0.5 * a {
            report.flags.push(Flag::WPlateau { ratio: b / a });
        }
    }
    if let Some(threshold) = mass_threshold(cfg) {
        if mass >= threshold {
            report.flags.push(Flag::MassAboveThreshold { mass, threshold });
        }
    }
    let failed = report.points.len() - ok.len();
    if failed > 0 {
        report.flags.push(Flag::Failures { count: failed });
    }
    Ok(report)
}

/// Relaxed solutions at every `ε` against the parabolic-elliptic limit.
pub fn run_pes_sweep(cfg: &SweepConfig) -> Result<RateReport> {
    if !matches!(cfg.kind, SweepKind::Pes { .. }) {
        return Err(Error::param("kind", "expected a PES sweep"));
    }
    run_sweep(cfg)
}

/// Relaxed solutions at every `κ = (ε, τ)` against the Keller-Segel limit.
pub fn run_ids_sweep(cfg: &SweepConfig) -> Result<RateReport> {
    if !matches!(cfg.kind, SweepKind::Ids { .. }) {
        return Err(Error::param("kind", "expected an IDS sweep"));
    }
    if cfg.grid.dimension() > 2 {
        return Err(Error::param("grid", "IDS sweeps are limited to one and two dimensions"));
    }
    run_sweep(cfg)
}

pub const CSV_HEADER: &str = "abscissa,metric,value,slope_group";

/// `slope_group` of a row: whether the value entered its metric's fit.
pub const GROUP_FIT: &str = "fit";
pub const GROUP_EXCLUDED: &str = "excluded";

/// Writes the rows of `metrics` sorted by abscissa descending, then the slope
/// block. Failed points have no rows.
pub fn write_csv<W: Write>(report: &RateReport, metrics: &[Metric], mut out: W) -> Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    let mut points: Vec<&RatePoint> = report.points.iter().filter(|p| p.failure.is_none()).collect();
    points.sort_by(|a, b| b.abscissa.total_cmp(&a.abscissa));
    for p in points {
        for &m in metrics {
            if let Some(&v) = p.values.get(&m) {
                let group = if report.in_fit_window(m, v) {
                    GROUP_FIT
                } else {
                    GROUP_EXCLUDED
                };
                writeln!(out, "{:.16e},{},{:.16e},{}", p.abscissa, m, v, group)?;
            }
        }
    }
    if !metrics.is_empty() {
        writeln!(out, "# slopes:")?;
        writeln!(out, "# metric,slope,stderr,npoints")?;
        for &m in metrics {
            let (slope, stderr) = report
                .fits
                .get(&m)
                .and_then(|f| f.fit())
                .map_or((f64::NAN, f64::NAN), |f| (f.slope, f.stderr));
            let n = report.fits.get(&m).map_or(0, |f| f.points());
            writeln!(out, "# {m},{slope:.16e},{stderr:.16e},{n}")?;
        }
    }
    Ok(())
}

pub fn emit_csv(report: &RateReport, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_csv(report, &Metric::ALL, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub abscissa: f64,
    pub metric: Metric,
    pub value: f64,
    pub slope_group: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsvSlope {
    pub metric: Metric,
    pub slope: f64,
    pub stderr: f64,
    pub points: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParsedReport {
    pub rows: Vec<CsvRow>,
    pub slopes: Vec<CsvSlope>,
}

fn parse_f64(s: &str, line: usize) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| Error::MalformedReport(format!("line {line}: `{s}` is not a number")))
}

/// Parses the format written by [`write_csv`].
pub fn read_csv<R: Read>(input: R) -> Result<ParsedReport> {
    let mut lines = BufReader::new(input).lines();
    match lines.next().transpose()? {
        Some(h) if h == CSV_HEADER => {}
        Some(h) => return Err(Error::MalformedReport(format!("unexpected header `{h}`"))),
        None => return Err(Error::MalformedReport("empty file".into())),
    }
    let mut parsed = ParsedReport::default();
    let mut in_slopes = false;
    for (i, line) in lines.enumerate() {
        let line = line?;
        let lineno = i + 2;
        if line == "# slopes:" {
            in_slopes = true;
            continue;
        }
        if in_slopes {
            let body = line
                .strip_prefix("# ")
                .ok_or_else(|| Error::MalformedReport(format!("line {lineno}: expected a slope comment")))?;
            if body == "metric,slope,stderr,npoints" {
                continue;
            }
            let f: Vec<&str> = body.split(',').collect();
            if f.len() != 4 {
                return Err(Error::MalformedReport(format!(
                    "line {lineno}: expected 4 slope fields"
                )));
            }
            parsed.slopes.push(CsvSlope {
                metric: f[0].parse()?,
                slope: parse_f64(f[1], lineno)?,
                stderr: parse_f64(f[2], lineno)?,
                points: f[3]
                    .parse()
                    .map_err(|_| Error::MalformedReport(format!("line {lineno}: bad point count")))?,
            });
        } else {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(Error::MalformedReport(format!("line {lineno}: expected 4 fields")));
            }
            parsed.rows.push(CsvRow {
                abscissa: parse_f64(f[0], lineno)?,
                metric: f[1].parse()?,
                value: parse_f64(f[2], lineno)?,
                slope_group: f[3].to_string(),
            });
        }
    }
    Ok(parsed)
}

/// Identity defects of one trajectory and of its `dt/2` rerun.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyCheck {
    pub coarse: f64,
    pub fine: f64,
}

impl EnergyCheck {
    /// `coarse / fine`; two vanishing defects count as a perfect `2`.
    pub fn ratio(&self) -> f64 {
        if self.coarse == 0.0 && self.fine == 0.0 {
            2.0
        } else {
            self.coarse / self.fine
        }
    }

    /// Both defects at round-off level, as for steady states.
    pub fn at_roundoff(&self) -> bool {
        self.coarse <= 1e-13 && self.fine <= 1e-13
    }

    pub fn passes(&self) -> bool {
        self.at_roundoff() || (1.5..=3.0).contains(&self.ratio())
    }
}

/// Time-averaged energy identity defect of the relaxed system at `dt` and
/// `dt/2` from the same initial state.
pub fn energy_check(init: &S, eps: f64, tau: f64, dt: f64, t_end: f64) -> Result<EnergyCheck> {
    let run = |dt: f64| -> Result<f64> {
        let mut rec = SnapshotRecorder::default();
        simulate(
            &ModelParams::new(Regime::Full { eps, tau }, dt, t_end),
            init,
            1,
            &mut [&mut rec],
        )?;
        energy_identity_residual(&rec.states, eps, tau)
    };
    Ok(EnergyCheck {
        coarse: run(dt)?,
        fine: run(dt / 2.0)?,
    })
}

/// `(t, E, D)` of a relaxed-system state.
pub fn energy_record(s: &S, eps: f64, tau: f64) -> Result<EnergyRecord<f64>> {
    Ok(EnergyRecord {
        t: s.t,
        energy: lyapunov(s, tau)?,
        dissipation: dissipation(s, eps, tau)?,
    })
}

/// `‖Δc - c + w‖₂` of a state, the fast-signal residual.
pub fn signal_defect(s: &S) -> Result<f64> {
    Ok(signal_residual(s)?.norm_l2())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fit_recovers_exact_powers() {
        let xs = [1e-1, 3e-2, 1e-2, 3e-3, 1e-3];
        let fit = fit_rate(&xs, &xs).unwrap();
        assert!((fit.slope - 1.0).abs() < 1e-12 && fit.stderr < 1e-12);
        let es: Vec<f64> = xs.iter().map(|x| x.sqrt()).collect();
        assert!((fit_rate(&xs, &es).unwrap().slope - 0.5).abs() < 1e-12);
    }

    #[test]
    fn fit_recovers_noisy_power() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let xs: Vec<f64> = (0..8).map(|i| 10f64.powf(-1.0 - 0.3 * i as f64)).collect();
        let es: Vec<f64> = xs
            .iter()
            .map(|x| 3.0 * x.powf(1.7) * (1.0 + rng.gen_range(-1e-3..1e-3)))
            .collect();
        let fit = fit_rate(&xs, &es).unwrap();
        assert!((fit.slope - 1.7).abs() < 0.01, "{fit:?}");
        assert!((fit.intercept - 3f64.ln()).abs() < 0.05);
    }

    #[test]
    fn fit_rejects_bad_input() {
        assert!(matches!(
            fit_rate(&[1.0, 0.5, 0.2], &[1.0, 0.5, 0.2]),
            Err(Error::InsufficientPoints(_))
        ));
        assert!(fit_rate(&[1.0, 0.5, 0.2, 0.0], &[1.0; 4]).is_err());
        assert!(fit_rate(&[1.0, 0.5, 0.2, 0.1], &[1.0, -1.0, 1.0, 1.0]).is_err());
        assert!(fit_rate(&[0.5; 4], &[1.0, 2.0, 3.0, 4.0]).is_err());
    }

    #[test]
    fn metric_names_round_trip() {
        for m in Metric::ALL {
            assert_eq!(m.name().parse::<Metric>().unwrap(), m);
        }
        assert!("err_q".parse::<Metric>().is_err());
    }

    fn small(kind: SweepKind, data: DataFamily) -> SweepConfig {
        SweepConfig {
            kind,
            grid: GridSpec::Interval { length: 1.0, nodes: 33 },
            t_end: 0.05,
            dt: 5e-3,
            n0: Profile::gaussian(0.4, 0.15, 0.5),
            data,
        }
    }

    #[test]
    fn config_validation() {
        let ok = small(
            SweepKind::Pes {
                tau: 1.0,
                eps: vec![0.1, 0.05, 0.02, 0.01],
            },
            DataFamily::WellPrepared,
        );
        assert!(ok.validate().is_ok());
        let mut three = ok.clone();
        three.kind = SweepKind::Pes {
            tau: 1.0,
            eps: vec![0.1, 0.05, 0.02],
        };
        assert!(matches!(three.validate(), Err(Error::InsufficientPoints(_))));
        let mut unordered = ok.clone();
        unordered.kind = SweepKind::Pes {
            tau: 1.0,
            eps: vec![0.1, 0.05, 0.06, 0.01],
        };
        assert!(unordered.validate().is_err());
        let mut ragged = ok.clone();
        ragged.dt = 0.003;
        assert!(ragged.validate().is_err());
        assert!(run_ids_sweep(&ok).is_err());
    }

    #[test]
    fn constant_state_has_zero_floor_and_errors() {
        let mut cfg = small(
            SweepKind::Pes {
                tau: 1.0,
                eps: vec![0.1, 0.05, 0.02, 0.01],
            },
            DataFamily::WellPrepared,
        );
        cfg.n0 = Profile::Constant(0.7);
        assert!(discretization_floor(&cfg).unwrap() < 1e-12);
        let report = run_pes_sweep(&cfg).unwrap();
        for p in &report.points {
            assert!(p.values.values().all(|v| *v < 1e-10), "{p:?}");
        }
        assert!(report.require_fits().is_err());
    }

    #[test]
    fn floor_shrinks_under_refinement() {
        let cfg = small(
            SweepKind::Pes {
                tau: 1.0,
                eps: vec![0.1, 0.05, 0.02, 0.01],
            },
            DataFamily::WellPrepared,
        );
        let finer = SweepConfig {
            grid: GridSpec::Interval { length: 1.0, nodes: 65 },
            dt: cfg.dt / 2.0,
            ..cfg.clone()
        };
        let a = discretization_floor(&cfg).unwrap();
        let b = discretization_floor(&finer).unwrap();
        assert!(a > 0.0 && a / b >= 1.5, "{a} {b}");
    }

    #[test]
    fn sweep_is_deterministic_and_ordered() {
        let cfg = small(
            SweepKind::Ids {
                kappas: vec![(0.1, 0.1), (0.05, 0.05), (0.02, 0.02), (0.01, 0.01)],
            },
            DataFamily::WellPrepared,
        );
        let a = run_ids_sweep(&cfg).unwrap();
        let b = run_ids_sweep(&cfg).unwrap();
        assert_eq!(a.abscissae(), vec![0.2, 0.1, 0.04, 0.02]);
        for m in Metric::ALL {
            assert_eq!(a.series(m), b.series(m));
            assert_eq!(a.series(m).len(), 4);
        }
        let mut x = Vec::new();
        let mut y = Vec::new();
        write_csv(&a, &Metric::ALL, &mut x).unwrap();
        write_csv(&b, &Metric::ALL, &mut y).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn header_only_for_no_metrics() {
        let cfg = small(
            SweepKind::Pes {
                tau: 1.0,
                eps: vec![0.1, 0.05, 0.02, 0.01],
            },
            DataFamily::WellPrepared,
        );
        let report = run_pes_sweep(&cfg).unwrap();
        let mut buf = Vec::new();
        write_csv(&report, &[], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), format!("{CSV_HEADER}\n"));
    }

    #[test]
    fn energy_check_of_constant_state_passes() {
        let g = Grid::interval(1.0, 17).unwrap();
        let check = energy_check(&State::homogeneous(g, 1.0), 0.1, 1.0, 1e-2, 0.1).unwrap();
        assert!(check.coarse < 1e-13 && check.fine < 1e-13);
        assert!(check.passes());
    }
}
