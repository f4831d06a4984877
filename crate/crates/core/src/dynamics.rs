//! Time integration of the relaxed system and its two singular limits.
//!
//! One step updates the signals first and the density last:
//!
//! 1. `w' = (-(τ dt/(ε+dt)) Δ + I)^{-1} (ε w + dt n)/(ε+dt)`
//! 2. `c' = (-(dt/(ε+dt)) Δ + I)^{-1} (ε c + dt w')/(ε+dt)`
//! 3. `n' = (-dt Δ + I)^{-1} (n - dt ∇·(n ∇c'))`
//!
//! As `ε → 0` the first two lines become the elliptic solves of the
//! parabolic-elliptic-elliptic limit, and with `τ → 0` as well `w' = n`.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::{Field, Grid};
use crate::operators::{chemotaxis_divergence, EllipticOperator};
use crate::scalar::{lit, positivity_tolerance, to_f64, Real};

/// Phase point `(n, c, w)` at time `t`.
#[derive(Debug, Clone)]
pub struct State<T> {
    pub t: T,
    pub n: Field<T>,
    pub c: Field<T>,
    pub w: Field<T>,
}

impl<T: Real> State<T> {
    /// Checks grid agreement, finiteness and positivity of `n` up to round-off.
    pub fn new(t: T, n: Field<T>, c: Field<T>, w: Field<T>) -> Result<Self> {
        n.ensure_same_grid(&c)?;
        n.ensure_same_grid(&w)?;
        for f in [&n, &c, &w] {
            f.check_finite()?;
        }
        check_density(&n)?;
        Ok(State { t, n, c, w })
    }

    /// Spatially homogeneous state `n = c = w = m`.
    pub fn homogeneous(grid: Arc<Grid<T>>, m: T) -> Self {
        let f = Field::constant(grid, m);
        State {
            t: T::zero(),
            n: f.clone(),
            c: f.clone(),
            w: f,
        }
    }

    pub fn grid(&self) -> &Arc<Grid<T>> {
        self.n.grid()
    }

    /// Componentwise midpoint of two states.
    pub fn midpoint(&self, other: &State<T>) -> Result<State<T>> {
        let half = lit::<T>(0.5);
        Ok(State {
            t: half * (self.t + other.t),
            n: self.n.zip_map(&other.n, |a, b| half * (a + b))?,
            c: self.c.zip_map(&other.c, |a, b| half * (a + b))?,
            w: self.w.zip_map(&other.w, |a, b| half * (a + b))?,
        })
    }
}

fn check_density<T: Real>(n: &Field<T>) -> Result<()> {
    match n.negative_below(positivity_tolerance()) {
        Some((index, value)) => Err(Error::NegativeDensity {
            index,
            value: to_f64(value),
        }),
        None => Ok(()),
    }
}

/// Which system is integrated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Regime<T> {
    /// Parabolic-parabolic-parabolic system with relaxation `ε` and signal
    /// diffusivity `τ`.
    Full { eps: T, tau: T },
    /// Limit `ε → 0` at fixed `τ`.
    PesLimit { tau: T },
    /// Joint limit `(ε, τ) → (0, 0)`: the Keller-Segel system.
    IdsLimit,
}

impl<T: Real> Regime<T> {
    fn validate(&self) -> Result<()> {
        let positive = |name: &'static str, v: T| {
            if v > T::zero() && v.is_finite() {
                Ok(())
            } else {
                Err(Error::param(name, format!("must be positive, got {}", to_f64(v))))
            }
        };
        match *self {
            Regime::Full { eps, tau } => {
                positive("eps", eps)?;
                positive("tau", tau)
            }
            Regime::PesLimit { tau } => positive("tau", tau),
            Regime::IdsLimit => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelParams<T> {
    pub regime: Regime<T>,
    pub dt: T,
    pub t_end: T,
    /// Diagnostic switch: when `false` the chemotactic flux is dropped and `n`
    /// solves the heat equation.
    pub chemotaxis: bool,
}

/// Largest accepted number of steps per run.
pub const MAX_STEPS: usize = 10_000_000;

impl<T: Real> ModelParams<T> {
    pub fn new(regime: Regime<T>, dt: T, t_end: T) -> Self {
        ModelParams {
            regime,
            dt,
            t_end,
            chemotaxis: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.regime.validate()?;
        if !(self.dt > T::zero()) || !self.dt.is_finite() {
            return Err(Error::param("dt", "must be positive"));
        }
        if !(self.t_end > T::zero()) || !self.t_end.is_finite() {
            return Err(Error::param("t_end", "must be positive"));
        }
        let steps = to_f64(self.t_end) / to_f64(self.dt);
        if steps > MAX_STEPS as f64 {
            return Err(Error::param(
                "dt",
                format!("t_end/dt = {steps:.3e} exceeds the {MAX_STEPS} step guard"),
            ));
        }
        Ok(())
    }

    /// `⌈t_end/dt⌉`, treating ratios within round-off of an integer as exact.
    pub fn steps(&self) -> usize {
        let ratio = to_f64(self.t_end) / to_f64(self.dt);
        let nearest = ratio.round();
        if (ratio - nearest).abs() <= 1e-9 * nearest.max(1.0) {
            nearest as usize
        } else {
            ratio.ceil() as usize
        }
    }
}

/// Steps one regime at a fixed `dt`, reusing the assembled operators.
#[derive(Debug, Clone)]
pub struct Stepper<T> {
    regime: Regime<T>,
    dt: T,
    chemotaxis: bool,
    w_op: Option<EllipticOperator<T>>,
    c_op: EllipticOperator<T>,
    n_op: EllipticOperator<T>,
}

impl<T: Real> Stepper<T> {
    pub fn new(grid: Arc<Grid<T>>, regime: Regime<T>, dt: T) -> Result<Self> {
        regime.validate()?;
        if !(dt > T::zero()) || !dt.is_finite() {
            return Err(Error::param("dt", "must be positive"));
        }
        let (w_op, c_op) = match regime {
            Regime::Full { eps, tau } => {
                let relax = dt / (eps + dt);
                (
                    Some(EllipticOperator::new(grid.clone(), tau * relax)?),
                    EllipticOperator::new(grid.clone(), relax)?,
                )
            }
            Regime::PesLimit { tau } => (
                Some(EllipticOperator::new(grid.clone(), tau)?),
                EllipticOperator::new(grid.clone(), T::one())?,
            ),
            Regime::IdsLimit => (None, EllipticOperator::new(grid.clone(), T::one())?),
        };
        Ok(Stepper {
            regime,
            dt,
            chemotaxis: true,
            w_op,
            c_op,
            n_op: EllipticOperator::new(grid, dt)?,
        })
    }

    pub fn with_chemotaxis(mut self, on: bool) -> Self {
        self.chemotaxis = on;
        self
    }

    pub fn regime(&self) -> Regime<T> {
        self.regime
    }

    pub fn dt(&self) -> T {
        self.dt
    }

    /// The signals `(c', w')` this regime attaches to density `n` and previous
    /// signals `(c, w)`.
    pub fn signals(&self, n: &Field<T>, c: &Field<T>, w: &Field<T>) -> Result<(Field<T>, Field<T>)> {
        match self.regime {
            Regime::Full { eps, .. } => {
                let inv = (eps + self.dt).recip();
                let w_rhs = w.zip_map(n, |wv, nv| (eps * wv + self.dt * nv) * inv)?;
                let w_new = self.w_op.as_ref().expect("full regime").solve(&w_rhs)?;
                let c_rhs = c.zip_map(&w_new, |cv, wv| (eps * cv + self.dt * wv) * inv)?;
                let c_new = self.c_op.solve(&c_rhs)?;
                Ok((c_new, w_new))
            }
            Regime::PesLimit { .. } => {
                let w_new = self.w_op.as_ref().expect("pes regime").solve(n)?;
                let c_new = self.c_op.solve(&w_new)?;
                Ok((c_new, w_new))
            }
            Regime::IdsLimit => Ok((self.c_op.solve(n)?, n.clone())),
        }
    }

    pub fn step(&self, s: &State<T>) -> Result<State<T>> {
        let (c, w) = self.signals(&s.n, &s.c, &s.w)?;
        let rhs = if self.chemotaxis {
            s.n.axpy(-self.dt, &chemotaxis_divergence(&s.n, &c)?)?
        } else {
            s.n.clone()
        };
        let n = self.n_op.solve(&rhs)?;
        check_density(&n)?;
        Ok(State {
            t: s.t + self.dt,
            n,
            c,
            w,
        })
    }

    /// Replaces the signals of an initial state by the ones the limit regimes
    /// induce at `t = 0`; the full regime keeps the given data.
    pub fn prepare_initial(&self, s: &State<T>) -> Result<State<T>> {
        match self.regime {
            Regime::Full { .. } => Ok(s.clone()),
            _ => {
                let (c, w) = self.signals(&s.n, &s.c, &s.w)?;
                State::new(s.t, s.n.clone(), c, w)
            }
        }
    }
}

pub fn step_full<T: Real>(s: &State<T>, eps: T, tau: T, dt: T) -> Result<State<T>> {
    Stepper::new(s.grid().clone(), Regime::Full { eps, tau }, dt)?.step(s)
}

pub fn step_pes<T: Real>(s: &State<T>, tau: T, dt: T) -> Result<State<T>> {
    Stepper::new(s.grid().clone(), Regime::PesLimit { tau }, dt)?.step(s)
}

pub fn step_ids<T: Real>(s: &State<T>, dt: T) -> Result<State<T>> {
    Stepper::new(s.grid().clone(), Regime::IdsLimit, dt)?.step(s)
}

/// Probe invoked on recorded states during [`simulate`].
pub trait Observer<T> {
    fn observe(&mut self, step: usize, state: &State<T>);
}

impl<T, F: FnMut(usize, &State<T>)> Observer<T> for F {
    fn observe(&mut self, step: usize, state: &State<T>) {
        self(step, state)
    }
}

/// Keeps every observed state.
#[derive(Debug, Default, Clone)]
pub struct SnapshotRecorder<T> {
    pub states: Vec<State<T>>,
}

impl<T: Clone> Observer<T> for SnapshotRecorder<T> {
    fn observe(&mut self, _step: usize, state: &State<T>) {
        self.states.push(state.clone());
    }
}

#[derive(Debug, Clone)]
pub struct Trajectory<T> {
    pub final_state: State<T>,
    pub steps: usize,
    /// Number of observation points (each observer saw this many states).
    pub samples: usize,
}

/// Integrates `params.regime` from `init` to `t_end`.
///
/// Observers see the initial state (after limit regimes have projected its
/// signals), every `stride`-th state, and the final state.
pub fn simulate<T: Real>(
    params: &ModelParams<T>,
    init: &State<T>,
    stride: usize,
    observers: &mut [&mut dyn Observer<T>],
) -> Result<Trajectory<T>> {
    params.validate()?;
    if stride == 0 {
        return Err(Error::param("stride", "must be at least 1"));
    }
    let fail = |time: T, e: Error| Error::RunFailed {
        time: to_f64(time),
        source: Box::new(e),
    };
    let stepper = Stepper::new(init.grid().clone(), params.regime, params.dt)
        .map_err(|e| fail(init.t, e))?
        .with_chemotaxis(params.chemotaxis);
    let mut state = State::new(init.t, init.n.clone(), init.c.clone(), init.w.clone())
        .and_then(|s| stepper.prepare_initial(&s))
        .map_err(|e| fail(init.t, e))?;
    let steps = params.steps();
    let mut samples = 0;
    let mut notify = |k: usize, s: &State<T>, observers: &mut [&mut dyn Observer<T>]| {
        for o in observers.iter_mut() {
            o.observe(k, s);
        }
        samples += 1;
    };
    notify(0, &state, observers);
    for k in 1..=steps {
        let mut next = stepper.step(&state).map_err(|e| fail(state.t, e))?;
        next.t = init.t + params.dt * lit::<T>(k as f64);
        state = next;
        if k % stride == 0 || k == steps {
            notify(k, &state, observers);
        }
    }
    Ok(Trajectory {
        final_state: state,
        steps,
        samples,
    })
}
