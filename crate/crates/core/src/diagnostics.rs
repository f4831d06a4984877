//! Structure-aware measurements on states: mass, the multiple time scale
//! Lyapunov functional and its dissipation, critical-manifold residuals and
//! distances, and the initial layer of the limit systems.
//!
//! Gradient terms of `E` and `D` are face sums `Σ_f κ_f (jump)²`, which is the
//! quadrature under which the discrete Laplacian satisfies summation by parts.

use crate::dynamics::State;
use crate::error::{Error, Result};
use crate::grid::{norm_sobolev, Field};
use crate::operators::{elliptic_solve, laplacian, resolvent_by_semigroup};
use crate::scalar::{lit, positivity_tolerance, to_f64, Real};

/// Which critical manifold residuals refer to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ManifoldKind<T> {
    /// `Δc - c + w = 0`, `τΔw - w + n = 0`.
    Pes { tau: T },
    /// `Δc - c + w = 0`, `-w + n = 0`.
    Ids,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyRecord<T> {
    pub t: T,
    pub energy: T,
    pub dissipation: T,
}

pub fn mass<T: Real>(s: &State<T>) -> Result<T> {
    s.n.integrate()
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

/// `Σ_f κ_f (g_hi - g_lo)²`, the discrete `∫|∇g|²`.
fn face_energy<T: Real>(g: &Field<T>) -> T {
    let v = g.values();
    g.grid()
        .faces()
        .iter()
        .map(|f| {
            let d = v[f.hi] - v[f.lo];
            f.conductance * d * d
        })
        .sum()
}

fn weighted<T: Real>(f: &Field<T>, integrand: impl Fn(usize) -> T) -> T {
    f.grid()
        .volumes()
        .iter()
        .enumerate()
        .map(|(i, &v)| v * integrand(i))
        .sum()
}

/// `Δc - c + w`.
pub fn signal_residual<T: Real>(s: &State<T>) -> Result<Field<T>> {
    let lap = laplacian(&s.c)?;
    let (c, w) = (s.c.values(), s.w.values());
    let values = lap.values().iter().enumerate().map(|(i, &l)| l - c[i] + w[i]).collect();
    Field::new(s.c.grid().clone(), values)
}

/// `n log n` with the convention `0 log 0 = 0`.
#[inline]
fn entropy_density<T: Real>(n: T) -> T {
    if n > T::zero() {
        n * n.ln()
    } else {
        T::zero()
    }
}

/// `E = ∫ n(log n - c) + ½|Δc - c + w|² + (τ/2)|Δc|² + ((1+τ)/2)|∇c|² + ½c²`.
pub fn lyapunov<T: Real>(s: &State<T>, tau: T) -> Result<T> {
    check_density(&s.n)?;
    let lap = laplacian(&s.c)?;
    let (n, c, w, l) = (s.n.values(), s.c.values(), s.w.values(), lap.values());
    let half = lit::<T>(0.5);
    let pointwise = weighted(&s.n, |i| {
        let r = l[i] - c[i] + w[i];
        entropy_density(n[i]) - n[i] * c[i] + half * r * r + half * tau * l[i] * l[i] + half * c[i] * c[i]
    });
    Ok(pointwise + half * (T::one() + tau) * face_energy(&s.c))
}

/// `D = ∫ n|∇(log n - c)|² + ((1+τ)/ε)|∇(Δc - c + w)|² + (2/ε)|Δc - c + w|²`.
///
/// The first integrand is evaluated per face as `(δn/√n_f - √n_f δc)²` with the
/// arithmetic mean `√n_f` of the two nodal square roots.
pub fn dissipation<T: Real>(s: &State<T>, eps: T, tau: T) -> Result<T> {
    if !(eps > T::zero()) {
        return Err(Error::param("eps", format!("must be positive, got {}", to_f64(eps))));
    }
    check_density(&s.n)?;
    let n = s.n.values();
    let c = s.c.values();
    let half = lit::<T>(0.5);
    let chemical: T =
        s.n.grid()
            .faces()
            .iter()
            .map(|f| {
                let root = half * (n[f.lo].max(T::zero()).sqrt() + n[f.hi].max(T::zero()).sqrt());
                if root > T::zero() {
                    let flux = (n[f.hi] - n[f.lo]) / root - root * (c[f.hi] - c[f.lo]);
                    f.conductance * flux * flux
                } else {
                    T::zero()
                }
            })
            .sum();
    let r = signal_residual(s)?;
    let rv = r.values();
    let two = lit::<T>(2.0);
    Ok(chemical + (T::one() + tau) / eps * face_energy(&r) + two / eps * weighted(&r, |i| rv[i] * rv[i]))
}

/// Residuals of the two fast equations: `(Δc - c + w, τΔw - w + n)` for PES,
/// `(Δc - c + w, -w + n)` for IDS.
pub fn manifold_residuals<T: Real>(s: &State<T>, kind: ManifoldKind<T>) -> Result<(Field<T>, Field<T>)> {
    let first = signal_residual(s)?;
    let second = match kind {
        ManifoldKind::Pes { tau } => {
            let lap = laplacian(&s.w)?;
            let (w, n) = (s.w.values(), s.n.values());
            let values = lap
                .values()
                .iter()
                .enumerate()
                .map(|(i, &l)| tau * l - w[i] + n[i])
                .collect();
            Field::new(s.w.grid().clone(), values)?
        }
        ManifoldKind::Ids => s.n.axpy(-T::one(), &s.w)?,
    };
    Ok((first, second))
}

/// `sqrt(‖-Δc₀ + c₀ - w₀‖²_{W^{k,p}} + ‖second residual‖²_{W^{l,p}})`, the
/// distance of initial data from the critical manifold.
pub fn manifold_distance<T: Real>(
    n0: &Field<T>,
    c0: &Field<T>,
    w0: &Field<T>,
    kind: ManifoldKind<T>,
    k: usize,
    l: usize,
    p: T,
) -> Result<T> {
    for order in [k, l] {
        if order > 2 {
            return Err(Error::UnsupportedOrder(order));
        }
    }
    let s = State {
        t: T::zero(),
        n: n0.clone(),
        c: c0.clone(),
        w: w0.clone(),
    };
    let (first, second) = manifold_residuals(&s, kind)?;
    // norms are sign-invariant, so the residuals need no negation
    let a = norm_sobolev(&first, k, p)?;
    let b = norm_sobolev(&second, l, p)?;
    Ok((a * a + b * b).sqrt())
}

/// Signals the limit system forces at `t = 0` and the size of the jump from
/// the given data.
#[derive(Debug, Clone)]
pub struct InitialLayer<T> {
    pub c_limit0: Field<T>,
    pub w_limit0: Field<T>,
    /// `‖c₀ - c(0)‖₂`
    pub layer_c: T,
    /// `‖w₀ - w(0)‖₂`
    pub layer_w: T,
}

/// `w(0) = (-τΔ + I)^{-1} n₀` (`w(0) = n₀` for IDS), `c(0) = (-Δ + I)^{-1} w(0)`.
pub fn initial_layer<T: Real>(
    n0: &Field<T>,
    c0: &Field<T>,
    w0: &Field<T>,
    kind: ManifoldKind<T>,
) -> Result<InitialLayer<T>> {
    n0.ensure_same_grid(c0)?;
    n0.ensure_same_grid(w0)?;
    let w_limit0 = match kind {
        ManifoldKind::Pes { tau } => elliptic_solve(tau, n0)?,
        ManifoldKind::Ids => n0.clone(),
    };
    let c_limit0 = elliptic_solve(T::one(), &w_limit0)?;
    let layer_c = (c0 - &c_limit0).norm_l2();
    let layer_w = (w0 - &w_limit0).norm_l2();
    Ok(InitialLayer {
        c_limit0,
        w_limit0,
        layer_c,
        layer_w,
    })
}

/// `∫₀^∞ e^{s(Δ - I)} [-Δc₀ + c₀ - w₀] ds` by semigroup quadrature with step
/// `delta` up to `horizon`. Equals `c₀ - (-Δ + I)^{-1} w₀`, i.e. the
/// signal layer whenever `w₀` already matches the limit's `w(0)`.
pub fn signal_layer_by_semigroup<T: Real>(c0: &Field<T>, w0: &Field<T>, delta: T, horizon: T) -> Result<Field<T>> {
    let lap = laplacian(c0)?;
    let defect = c0.zip_map(&lap, |c, l| c - l)?.axpy(-T::one(), w0)?;
    resolvent_by_semigroup(&defect, T::one(), delta, horizon)
}

/// Time-averaged defect `|(E^{k+1} - E^k)/dt + D^{k+½}|` of the discrete
/// energy identity along consecutive states, with `D` evaluated at the
/// midpoint state.
pub fn energy_identity_residual<T: Real>(states: &[State<T>], eps: T, tau: T) -> Result<T> {
    if states.len() < 2 {
        return Err(Error::param("states", "need at least two states"));
    }
    let energies = states.iter().map(|s| lyapunov(s, tau)).collect::<Result<Vec<_>>>()?;
    let mut total = T::zero();
    for (k, pair) in states.windows(2).enumerate() {
        let dt = pair[1].t - pair[0].t;
        let mid = pair[0].midpoint(&pair[1])?;
        let d = dissipation(&mid, eps, tau)?;
        total = total + ((energies[k + 1] - energies[k]) / dt + d).abs();
    }
    Ok(total / lit::<T>((states.len() - 1) as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{simulate, step_full, step_pes, ModelParams, Regime, SnapshotRecorder};
    use crate::grid::Grid;
    use std::f64::consts::PI;
    use std::sync::Arc;

    fn smooth_state(g: Arc<Grid<f64>>) -> State<f64> {
        let n = Field::from_fn(g.clone(), |p: [f64; 2]| 0.3 + (-(p[0] - 0.4).powi(2) / 0.03).exp()).unwrap();
        let c = Field::from_fn(g.clone(), |p: [f64; 2]| 0.5 + 0.2 * (PI * p[0]).cos()).unwrap();
        let w = Field::from_fn(g, |p: [f64; 2]| 0.6 + 0.1 * (2.0 * PI * p[0]).cos()).unwrap();
        State::new(0.0, n, c, w).unwrap()
    }

    #[test]
    fn mass_examples() {
        let g = Grid::interval(1.0, 51).unwrap();
        let s = State::homogeneous(g.clone(), 1.0);
        assert!((mass(&s).unwrap() - 1.0f64).abs() < 1e-14);
        let s = smooth_state(g);
        let mut tripled = s.clone();
        tripled.n = s.n.scale(3.0);
        assert!((mass(&tripled).unwrap() - 3.0 * mass(&s).unwrap()).abs() < 1e-14);

        let m0 = mass(&s).unwrap();
        let mut state = s;
        for _ in 0..100 {
            state = step_full(&state, 0.1, 1.0, 1e-3).unwrap();
        }
        assert!((mass(&state).unwrap() - m0).abs() <= 1e-10 * m0);
    }

    #[test]
    fn lyapunov_closed_forms() {
        let g = Grid::interval(2.0, 41).unwrap();
        let m = 1.7f64;
        let s = State::new(
            0.0,
            Field::constant(g.clone(), m),
            Field::zeros(g.clone()),
            Field::zeros(g.clone()),
        )
        .unwrap();
        let total = m * 2.0;
        assert!((lyapunov(&s, 0.8).unwrap() - total * m.ln()).abs() < 1e-12);

        let k = 0.9f64;
        let s = State::new(
            0.0,
            Field::zeros(g.clone()),
            Field::constant(g.clone(), k),
            Field::constant(g, k),
        )
        .unwrap();
        assert!((lyapunov(&s, 0.8).unwrap() - 0.5 * k * k * 2.0).abs() < 1e-12);
    }

    /// Independent evaluation of `E` from nodal loops and the central
    /// gradient-free face sums written out by hand.
    fn lyapunov_by_terms(s: &State<f64>, tau: f64) -> f64 {
        let g = s.grid();
        let vol = g.volumes();
        let (n, c, w) = (s.n.values(), s.c.values(), s.w.values());
        let h = g.axes()[0].spacing;
        let len = n.len();
        let lap: Vec<f64> = (0..len)
            .map(|i| {
                let left = if i == 0 { c[1] } else { c[i - 1] };
                let right = if i + 1 == len { c[len - 2] } else { c[i + 1] };
                (left - 2.0 * c[i] + right) / (h * h)
            })
            .collect();
        let mut entropy = 0.0;
        let mut coupling = 0.0;
        let mut residual = 0.0;
        let mut curvature = 0.0;
        let mut level = 0.0;
        for i in 0..len {
            entropy += vol[i] * if n[i] > 0.0 { n[i] * n[i].ln() } else { 0.0 };
            coupling -= vol[i] * n[i] * c[i];
            residual += 0.5 * vol[i] * (lap[i] - c[i] + w[i]).powi(2);
            curvature += 0.5 * tau * vol[i] * lap[i] * lap[i];
            level += 0.5 * vol[i] * c[i] * c[i];
        }
        let mut slope = 0.0;
        for i in 0..len - 1 {
            slope += h * ((c[i + 1] - c[i]) / h).powi(2);
        }
        entropy + coupling + residual + curvature + 0.5 * (1.0 + tau) * slope + level
    }

    #[test]
    fn lyapunov_double_entry() {
        let s = smooth_state(Grid::interval(1.0, 97).unwrap());
        let a = lyapunov(&s, 0.6).unwrap();
        let b = lyapunov_by_terms(&s, 0.6);
        assert!((a - b).abs() < 1e-12 * a.abs().max(1.0), "{a} vs {b}");
    }

    #[test]
    fn dissipation_vanishes_at_equilibria() {
        let g = Grid::<f64>::interval(1.0, 41).unwrap();
        let s = State::homogeneous(g.clone(), 0.7);
        assert!(dissipation(&s, 0.1, 1.0).unwrap().abs() < 1e-20_f64);

        let c = Field::constant(g.clone(), 0.4);
        let s = State::new(0.0, c.map(f64::exp), c.clone(), c).unwrap();
        assert!(dissipation(&s, 0.01, 2.0).unwrap().abs() < 1e-20);
        assert!(matches!(
            dissipation(&s, 0.0, 1.0),
            Err(Error::InvalidParameter { name: "eps", .. })
        ));
    }

    #[test]
    fn dissipation_is_nonnegative_and_handles_vacuum() {
        let g = Grid::interval(1.0, 41).unwrap();
        let mut s = smooth_state(g.clone());
        assert!(dissipation(&s, 0.1, 1.0).unwrap() > 0.0);
        s.n = Field::from_fn(g, |p: [f64; 2]| if p[0] < 0.5 { 0.0 } else { 1.0 }).unwrap();
        let d = dissipation(&s, 0.1, 1.0).unwrap();
        assert!(d.is_finite() && d >= 0.0);
    }

    #[test]
    fn residuals_on_pes_state_vanish() {
        let s = smooth_state(Grid::interval(1.0, 65).unwrap());
        let next = step_pes(&s, 0.8, 1e-3).unwrap();
        // the signals of a limit step are slaved to the density they were computed from
        let slaved = State::new(next.t, s.n.clone(), next.c.clone(), next.w.clone()).unwrap();
        let (a, b) = manifold_residuals(&slaved, ManifoldKind::Pes { tau: 0.8 }).unwrap();
        assert!(a.norm_l2() < 1e-9 && b.norm_l2() < 1e-9);

        let hom = State::homogeneous(s.grid().clone(), 2.0);
        for kind in [ManifoldKind::Pes { tau: 0.3 }, ManifoldKind::Ids] {
            let (a, b) = manifold_residuals(&hom, kind).unwrap();
            assert!(a.max_abs() < 1e-12 && b.max_abs() < 1e-12);
        }
    }

    #[test]
    fn distance_examples() {
        let g = Grid::interval(1.0, 81).unwrap();
        let s = smooth_state(g.clone());
        let tau = 0.5;
        let kind = ManifoldKind::Pes { tau };
        let layer = initial_layer(&s.n, &s.c, &s.w, kind).unwrap();
        let d = manifold_distance(&s.n, &layer.c_limit0, &layer.w_limit0, kind, 0, 0, 2.0).unwrap();
        assert!(d < 1e-9);

        let m = Field::constant(g.clone(), 0.3);
        for kind in [kind, ManifoldKind::Ids] {
            for (k, l, p) in [(0, 0, 2.0), (1, 2, 1.0), (2, 1, f64::INFINITY)] {
                assert!(manifold_distance(&m, &m, &m, kind, k, l, p).unwrap() < 1e-12);
            }
        }
        assert!(manifold_distance(&m, &m, &m, kind, 3, 0, 2.0).is_err());

        // the first residual is affine in c₀, so its norm scales linearly in δ
        let phi = Field::from_fn(g, |p: [f64; 2]| (PI * p[0]).cos()).unwrap();
        let on_c = &layer.c_limit0;
        let direct = |delta: f64| {
            let c = on_c.axpy(delta, &phi).unwrap();
            let (r, _) =
                manifold_residuals(&State::new(0.0, s.n.clone(), c, layer.w_limit0.clone()).unwrap(), kind).unwrap();
            r.norm_l2()
        };
        for delta in [1e-2, 1e-3] {
            let c = on_c.axpy(delta, &phi).unwrap();
            let d = manifold_distance(&s.n, &c, &layer.w_limit0, kind, 0, 0, 2.0).unwrap();
            assert!((d - direct(delta)).abs() < 1e-9);
        }
        assert!((direct(1e-2) / direct(1e-3) - 10.0).abs() < 1e-5);
    }

    #[test]
    fn layer_examples() {
        let g = Grid::interval(1.0, 81).unwrap();
        let m = Field::constant(g.clone(), 1.3);
        for kind in [ManifoldKind::Pes { tau: 2.0 }, ManifoldKind::Ids] {
            let layer = initial_layer(&m, &m, &m, kind).unwrap();
            assert!(layer.layer_c < 1e-10 && layer.layer_w < 1e-10);
            assert!((&layer.c_limit0 - &m).max_abs() < 1e-10);
        }
        let s = smooth_state(g);
        let kind = ManifoldKind::Pes { tau: 1.0 };
        let on = initial_layer(&s.n, &s.c, &s.w, kind).unwrap();
        let again = initial_layer(&s.n, &on.c_limit0, &on.w_limit0, kind).unwrap();
        assert!(again.layer_c < 1e-10 && again.layer_w < 1e-10);
        assert!(on.layer_c > 1e-3);
    }

    #[test]
    fn semigroup_route_matches_direct_layer() {
        let g = Grid::interval(1.0, 65).unwrap();
        let s = smooth_state(g);
        let kind = ManifoldKind::Pes { tau: 1.0 };
        let limit = initial_layer(&s.n, &s.c, &s.w, kind).unwrap();
        // w₀ on the limit, c₀ off it: the semigroup formula gives c₀ - c(0)
        let quad = signal_layer_by_semigroup(&s.c, &limit.w_limit0, 1e-2, 40.0).unwrap();
        let direct = &s.c - &limit.c_limit0;
        assert!((&quad - &direct).max_abs() < 1e-4);
        // for general w₀ it gives c₀ - (-Δ + I)^{-1} w₀
        let quad = signal_layer_by_semigroup(&s.c, &s.w, 1e-2, 40.0).unwrap();
        let direct = &s.c - &elliptic_solve(1.0, &s.w).unwrap();
        assert!((&quad - &direct).max_abs() < 1e-4);
    }

    #[test]
    fn energy_decays_along_full_run() {
        let g = Grid::interval(1.0, 65).unwrap();
        let s = smooth_state(g);
        let params = ModelParams::new(Regime::Full { eps: 0.5, tau: 1.0 }, 1e-3, 0.05);
        let mut rec = SnapshotRecorder::default();
        simulate(&params, &s, 1, &mut [&mut rec]).unwrap();
        let e: Vec<f64> = rec.states.iter().map(|s| lyapunov(s, 1.0).unwrap()).collect();
        let slack = 10.0 * 1e-3 * e[0].abs().max(1.0);
        assert!(e.windows(2).all(|w| w[1] <= w[0] + slack));
        assert!(e.last().unwrap() < &e[0]);
    }

    #[test]
    fn energy_identity_refines_with_dt() {
        let g = Grid::interval(1.0, 65).unwrap();
        let s = smooth_state(g);
        let run = |dt: f64| {
            let params = ModelParams::new(Regime::Full { eps: 1.0, tau: 1.0 }, dt, 0.1);
            let mut rec = SnapshotRecorder::default();
            simulate(&params, &s, 1, &mut [&mut rec]).unwrap();
            energy_identity_residual(&rec.states, 1.0, 1.0).unwrap()
        };
        let ratio = run(2e-3) / run(1e-3);
        assert!((1.5..=3.0).contains(&ratio), "ratio {ratio}");
    }
}
