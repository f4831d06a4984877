//! Named initial-data presets, sampled on any grid.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{integrate, Field, Grid, GridKind};
use crate::scalar::{lit, Real};

/// A grid-independent description of a nonnegative field.
///
/// Positions are `[x, y]` on rectangles and `[r, 0]` on intervals and radial
/// balls; the second coordinate of a center is ignored on one-dimensional
/// grids.
#[derive(Debug, Clone, PartialEq)]
pub enum Profile<T> {
    Constant(T),
    /// `exp(-|x - center|² / width²)`, scaled so its discrete mass is `mass`.
    Gaussian {
        center: [T; 2],
        width: T,
        mass: T,
    },
    /// Two equal-width gaussians sharing `mass` equally.
    TwoBump {
        centers: [[T; 2]; 2],
        width: T,
        mass: T,
    },
    /// `mean + amplitude·Σ a_k cos(kπx/L)` over `1 ≤ k ≤ modes` with
    /// coefficients drawn uniformly from `[-1, 1]` by a seeded generator and
    /// normalised so that `Σ|a_k| = 1`. Nonnegative whenever
    /// `amplitude ≤ mean`.
    RandomCosine {
        mean: T,
        amplitude: T,
        modes: usize,
        seed: u64,
    },
}

impl<T: Real> Profile<T> {
    pub fn gaussian(center: T, width: T, mass: T) -> Self {
        Profile::Gaussian {
            center: [center, T::zero()],
            width,
            mass,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |name: &'static str, v: T, strict: bool| {
            let ok = v.is_finite() && if strict { v > T::zero() } else { v >= T::zero() };
            if ok {
                Ok(())
            } else {
                Err(Error::param(name, "must be finite and positive"))
            }
        };
        match *self {
            Profile::Constant(v) => check("value", v, false),
            Profile::Gaussian { width, mass, .. } | Profile::TwoBump { width, mass, .. } => {
                check("width", width, true)?;
                check("mass", mass, false)
            }
            Profile::RandomCosine {
                mean, amplitude, modes, ..
            } => {
                check("mean", mean, false)?;
                check("amplitude", amplitude, false)?;
                if modes == 0 {
                    return Err(Error::param("modes", "must be at least 1"));
                }
                Ok(())
            }
        }
    }

    pub fn sample(&self, grid: &Arc<Grid<T>>) -> Result<Field<T>> {
        self.validate()?;
        match *self {
            Profile::Constant(v) => Ok(Field::constant(grid.clone(), v)),
            Profile::Gaussian { center, width, mass } => bumps(grid, &[center], width, mass),
            Profile::TwoBump { centers, width, mass } => bumps(grid, &centers, width, mass),
            Profile::RandomCosine {
                mean,
                amplitude,
                modes,
                seed,
            } => {
                let shape = random_cosine(grid, modes, seed)?;
                Ok(shape.map(|v| mean + amplitude * v))
            }
        }
    }
}

fn bumps<T: Real>(grid: &Arc<Grid<T>>, centers: &[[T; 2]], width: T, mass: T) -> Result<Field<T>> {
    let planar = matches!(grid.kind(), GridKind::Rectangle { .. });
    let shape = Field::from_fn(grid.clone(), |p| {
        centers
            .iter()
            .map(|c| {
                let dy = if planar { p[1] - c[1] } else { T::zero() };
                let d2 = (p[0] - c[0]).powi(2) + dy * dy;
                (-d2 / (width * width)).exp()
            })
            .fold(T::zero(), |a, b| a + b)
    })?;
    let total = integrate(&shape)?;
    if !(total > T::zero()) {
        return Err(Error::param("width", "bump has no mass on this grid"));
    }
    Ok(shape.scale(mass / total))
}

/// A smooth shape `Σ a_k cos(kπx/L)` with `Σ|a_k| = 1`,
/// reproducible from `seed`. Along the first axis only.
pub fn random_cosine<T: Real>(grid: &Arc<Grid<T>>, modes: usize, seed: u64) -> Result<Field<T>> {
    if modes == 0 {
        return Err(Error::param("modes", "must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coeffs: Vec<f64> = (0..modes).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    let norm: f64 = coeffs.iter().map(|a| a.abs()).sum();
    if norm > 0.0 {
        coeffs.iter_mut().for_each(|a| *a /= norm);
    }
    let length = match grid.kind() {
        GridKind::Interval { length } => length,
        GridKind::Rectangle { lx, .. } => lx,
        GridKind::RadialBall { radius, .. } => radius,
    };
    Field::from_fn(grid.clone(), |p| {
        coeffs.iter().enumerate().fold(T::zero(), |acc, (k, &a)| {
            let arg = lit::<T>((k + 1) as f64) * T::PI() * p[0] / length;
            acc + lit::<T>(a) * arg.cos()
        })
    })
}
