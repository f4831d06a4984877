//! Cell-vertex grids with Neumann boundaries, nodal fields, quadrature and
//! discrete Lebesgue/Sobolev norms.
//!
//! Every grid is described by the same finite-volume data: a control volume per
//! node and a list of faces joining neighbouring nodes. On an interval the
//! control volumes are the trapezoidal weights; on a rectangle they are tensor
//! products of those; on a radially symmetric ball the node `r_i` owns the
//! shell `[r_{i-1/2}, r_{i+1/2}]` weighted by `|S^{N-1}| r^{N-1}`. The operators
//! module builds its stencils from the same faces, so summation by parts holds
//! exactly.

use std::ops::{Add, Mul, Sub};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::operators;
use crate::scalar::{lit, to_f64, Real};

/// Geometry of the computational domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GridKind<T> {
    Interval {
        length: T,
    },
    Rectangle {
        lx: T,
        ly: T,
    },
    /// Radially symmetric functions on the `dimension`-ball of the given radius,
    /// stored along the radial coordinate.
    RadialBall {
        dimension: usize,
        radius: T,
    },
}

/// One coordinate axis of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Axis<T> {
    pub nodes: usize,
    pub spacing: T,
    coords: Vec<T>,
}

impl<T: Real> Axis<T> {
    fn new(length: T, nodes: usize) -> Result<Self> {
        if nodes < 3 {
            return Err(Error::InvalidGrid(format!(
                "need at least 3 nodes per axis, got {nodes}"
            )));
        }
        if !(length > T::zero()) || !length.is_finite() {
            return Err(Error::InvalidGrid(format!(
                "axis length must be positive, got {length}"
            )));
        }
        let spacing = length / lit::<T>((nodes - 1) as f64);
        let coords = (0..nodes).map(|i| lit::<T>(i as f64) * spacing).collect();
        Ok(Axis { nodes, spacing, coords })
    }

    pub fn coords(&self) -> &[T] {
        &self.coords
    }

    /// Trapezoidal weights: `h` in the interior, `h/2` at both ends.
    fn trapezoid_weights(&self) -> Vec<T> {
        let half = self.spacing * lit(0.5);
        (0..self.nodes)
            .map(|i| {
                if i == 0 || i + 1 == self.nodes {
                    half
                } else {
                    self.spacing
                }
            })
            .collect()
    }
}

/// A face between two neighbouring nodes `lo < hi` along `axis`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Face<T> {
    pub lo: usize,
    pub hi: usize,
    pub axis: usize,
    /// Face measure (length in 2D, `|S^{N-1}| r^{N-1}` for radial shells, 1 on
    /// an interval).
    pub area: T,
    /// `area / spacing`: the weight of the two-point flux across the face.
    pub conductance: T,
}

/// Discretized domain with Neumann boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    kind: GridKind<T>,
    axes: Vec<Axis<T>>,
    volumes: Vec<T>,
    faces: Vec<Face<T>>,
}

/// Measure of the unit sphere `S^{N-1}` in `R^N`.
pub fn unit_sphere_measure<T: Real>(dimension: usize) -> T {
    let pi = T::PI();
    match dimension {
        1 => lit(2.0),
        2 => pi + pi,
        3 => lit::<T>(4.0) * pi,
        4 => lit::<T>(2.0) * pi * pi,
        _ => T::nan(),
    }
}

impl<T: Real> Grid<T> {
    pub fn interval(length: T, nodes: usize) -> Result<Arc<Self>> {
        let axis = Axis::new(length, nodes)?;
        let volumes = axis.trapezoid_weights();
        let conductance = T::one() / axis.spacing;
        let faces = (0..nodes - 1)
            .map(|i| Face {
                lo: i,
                hi: i + 1,
                axis: 0,
                area: T::one(),
                conductance,
            })
            .collect();
        Ok(Arc::new(Grid {
            kind: GridKind::Interval { length },
            axes: vec![axis],
            volumes,
            faces,
        }))
    }

    pub fn rectangle(lx: T, ly: T, nx: usize, ny: usize) -> Result<Arc<Self>> {
        let ax = Axis::new(lx, nx)?;
        let ay = Axis::new(ly, ny)?;
        let wx = ax.trapezoid_weights();
        let wy = ay.trapezoid_weights();
        let mut volumes = Vec::with_capacity(nx * ny);
        for &vy in &wy {
            for &vx in &wx {
                volumes.push(vx * vy);
            }
        }
        let mut faces = Vec::with_capacity(2 * nx * ny);
        for (j, &area) in wy.iter().enumerate() {
            for i in 0..nx - 1 {
                faces.push(Face {
                    lo: j * nx + i,
                    hi: j * nx + i + 1,
                    axis: 0,
                    area,
                    conductance: area / ax.spacing,
                });
            }
        }
        for j in 0..ny - 1 {
            for (i, &area) in wx.iter().enumerate() {
                faces.push(Face {
                    lo: j * nx + i,
                    hi: (j + 1) * nx + i,
                    axis: 1,
                    area,
                    conductance: area / ay.spacing,
                });
            }
        }
        Ok(Arc::new(Grid {
            kind: GridKind::Rectangle { lx, ly },
            axes: vec![ax, ay],
            volumes,
            faces,
        }))
    }

    pub fn radial_ball(dimension: usize, radius: T, nodes: usize) -> Result<Arc<Self>> {
        if !(2..=4).contains(&dimension) {
            return Err(Error::InvalidGrid(format!(
                "radial ball dimension must be 2, 3 or 4, got {dimension}"
            )));
        }
        let axis = Axis::new(radius, nodes)?;
        let h = axis.spacing;
        let sphere = unit_sphere_measure::<T>(dimension);
        let n = lit::<T>(dimension as f64);
        let power = |r: T| r.powi(dimension as i32);
        let half = lit::<T>(0.5);
        let volumes = (0..nodes)
            .map(|i| {
                let r = axis.coords[i];
                let inner = if i == 0 { T::zero() } else { r - half * h };
                let outer = if i + 1 == nodes { radius } else { r + half * h };
                sphere * (power(outer) - power(inner)) / n
            })
            .collect();
        let faces = (0..nodes - 1)
            .map(|i| {
                let rf = axis.coords[i] + half * h;
                let area = sphere * rf.powi(dimension as i32 - 1);
                Face {
                    lo: i,
                    hi: i + 1,
                    axis: 0,
                    area,
                    conductance: area / h,
                }
            })
            .collect();
        Ok(Arc::new(Grid {
            kind: GridKind::RadialBall { dimension, radius },
            axes: vec![axis],
            volumes,
            faces,
        }))
    }

    pub fn kind(&self) -> GridKind<T> {
        self.kind
    }

    pub fn axes(&self) -> &[Axis<T>] {
        &self.axes
    }

    pub fn len(&self) -> usize {
        self.volumes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.volumes.is_empty()
    }

    /// Smallest mesh width over all axes.
    pub fn min_spacing(&self) -> T {
        self.axes.iter().map(|a| a.spacing).fold(T::infinity(), T::min)
    }

    /// Quadrature weight (control volume) of every node.
    pub fn volumes(&self) -> &[T] {
        &self.volumes
    }

    /// Total measure of the domain.
    pub fn measure(&self) -> T {
        self.volumes.iter().copied().sum()
    }

    pub(crate) fn faces(&self) -> &[Face<T>] {
        &self.faces
    }

    /// Spatial dimension of the physical domain.
    pub fn dimension(&self) -> usize {
        match self.kind {
            GridKind::Interval { .. } => 1,
            GridKind::Rectangle { .. } => 2,
            GridKind::RadialBall { dimension, .. } => dimension,
        }
    }

    /// `true` for interval and radial grids, whose nodes form a single chain.
    pub fn is_one_dimensional(&self) -> bool {
        self.axes.len() == 1
    }

    /// Coordinates of a node: `[x, 0]` (or `[r, 0]`) on 1D grids, `[x, y]` on
    /// rectangles.
    pub fn position(&self, index: usize) -> [T; 2] {
        match self.axes.as_slice() {
            [ax] => [ax.coords[index], T::zero()],
            [ax, ay] => [ax.coords[index % ax.nodes], ay.coords[index / ax.nodes]],
            _ => unreachable!("grids have one or two axes"),
        }
    }

    /// A grid of the same kind with every mesh width halved.
    pub fn refined(&self) -> Result<Arc<Self>> {
        let twice = |a: &Axis<T>| 2 * a.nodes - 1;
        match self.kind {
            GridKind::Interval { length } => Grid::interval(length, twice(&self.axes[0])),
            GridKind::Rectangle { lx, ly } => Grid::rectangle(lx, ly, twice(&self.axes[0]), twice(&self.axes[1])),
            GridKind::RadialBall { dimension, radius } => Grid::radial_ball(dimension, radius, twice(&self.axes[0])),
        }
    }

    /// Index on the refined grid of the coarse node `index` (coarse nodes
    /// coincide with every second refined node).
    pub fn refined_index(&self, index: usize) -> usize {
        match self.axes.as_slice() {
            [_] => 2 * index,
            [ax, _] => {
                let fine_nx = 2 * ax.nodes - 1;
                (2 * (index / ax.nodes)) * fine_nx + 2 * (index % ax.nodes)
            }
            _ => unreachable!("grids have one or two axes"),
        }
    }
}

pub(crate) fn same_grid<T: PartialEq>(a: &Arc<Grid<T>>, b: &Arc<Grid<T>>) -> bool {
    Arc::ptr_eq(a, b) || **a == **b
}

/// Scalar function sampled on the nodes of a grid.
#[derive(Debug, Clone)]
pub struct Field<T> {
    grid: Arc<Grid<T>>,
    values: Vec<T>,
}

impl<T: Real> Field<T> {
    /// Validates length and finiteness.
    pub fn new(grid: Arc<Grid<T>>, values: Vec<T>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::LengthMismatch {
                expected: grid.len(),
                found: values.len(),
            });
        }
        let field = Field { grid, values };
        field.check_finite()?;
        Ok(field)
    }

    pub(crate) fn from_raw(grid: Arc<Grid<T>>, values: Vec<T>) -> Self {
        debug_assert_eq!(values.len(), grid.len());
        Field { grid, values }
    }

    pub fn zeros(grid: Arc<Grid<T>>) -> Self {
        Self::constant(grid, T::zero())
    }

    pub fn constant(grid: Arc<Grid<T>>, value: T) -> Self {
        let values = vec![value; grid.len()];
        Field { grid, values }
    }

    /// Samples `f` at every node position (see [`Grid::position`]).
    pub fn from_fn(grid: Arc<Grid<T>>, f: impl Fn([T; 2]) -> T) -> Result<Self> {
        let values = (0..grid.len()).map(|i| f(grid.position(i))).collect();
        Self::new(grid, values)
    }

    pub fn grid(&self) -> &Arc<Grid<T>> {
        &self.grid
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(Error::NonFinite { index }),
            None => Ok(()),
        }
    }

    pub fn same_grid(&self, other: &Field<T>) -> bool {
        same_grid(&self.grid, &other.grid)
    }

    pub(crate) fn ensure_same_grid(&self, other: &Field<T>) -> Result<()> {
        if self.same_grid(other) {
            Ok(())
        } else {
            Err(Error::GridMismatch)
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Field::from_raw(self.grid.clone(), self.values.iter().map(|&v| f(v)).collect())
    }

    /// Pointwise combination of two fields on the same grid.
    pub fn zip_map(&self, other: &Field<T>, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.ensure_same_grid(other)?;
        let values = self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect();
        Ok(Field::from_raw(self.grid.clone(), values))
    }

    /// `self + alpha * other`.
    pub fn axpy(&self, alpha: T, other: &Field<T>) -> Result<Self> {
        self.zip_map(other, |a, b| a + alpha * b)
    }

    pub fn scale(&self, alpha: T) -> Self {
        self.map(|v| alpha * v)
    }

    pub fn min(&self) -> T {
        self.values.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn max(&self) -> T {
        self.values.iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn max_abs(&self) -> T {
        self.values.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    /// Index and value of the most negative entry, if any entry is below `-tol`.
    pub(crate) fn negative_below(&self, tol: T) -> Option<(usize, T)> {
        self.values
            .iter()
            .copied()
            .enumerate()
            .filter(|(_, v)| *v < -tol)
            .min_by(|a, b| a.1.partial_cmp(&b.1).expect("finite"))
    }

    pub fn integrate(&self) -> Result<T> {
        integrate(self)
    }

    pub fn norm_lp(&self, p: T) -> Result<T> {
        norm_lp(self, p)
    }

    pub fn norm_l2(&self) -> T {
        l2_squared(self).sqrt()
    }

    pub fn norm_sobolev(&self, k: usize, p: T) -> Result<T> {
        norm_sobolev(self, k, p)
    }
}

macro_rules! binary_op {
    ($trait:ident, $method:ident, $op:tt) => {
        impl<'a, T: Real> $trait<&'a Field<T>> for &'a Field<T> {
            type Output = Field<T>;

            fn $method(self, rhs: &'a Field<T>) -> Field<T> {
                self.zip_map(rhs, |a, b| a $op b)
                    .expect("arithmetic on fields from different grids")
            }
        }
    };
}

binary_op!(Add, add, +);
binary_op!(Sub, sub, -);

impl<T: Real> Mul<T> for &Field<T> {
    type Output = Field<T>;

    fn mul(self, rhs: T) -> Field<T> {
        self.scale(rhs)
    }
}

/// Quadrature of `f` with the grid's control-volume weights (trapezoidal on
/// intervals and rectangles, shell volumes on radial balls).
pub fn integrate<T: Real>(f: &Field<T>) -> Result<T> {
    f.check_finite()?;
    Ok(weighted_sum(f))
}

fn weighted_sum<T: Real>(f: &Field<T>) -> T {
    f.grid.volumes.iter().zip(&f.values).map(|(&v, &x)| v * x).sum()
}

fn l2_squared<T: Real>(f: &Field<T>) -> T {
    f.grid.volumes.iter().zip(&f.values).map(|(&v, &x)| v * x * x).sum()
}

fn check_exponent<T: Real>(p: T) -> Result<()> {
    if p.is_nan() || p < T::one() {
        return Err(Error::param("p", format!("need p >= 1 or p = inf, got {}", to_f64(p))));
    }
    Ok(())
}

/// Discrete `L^p` norm; `p = T::infinity()` gives the max norm.
pub fn norm_lp<T: Real>(f: &Field<T>, p: T) -> Result<T> {
    check_exponent(p)?;
    f.check_finite()?;
    if p.is_infinite() {
        return Ok(f.max_abs());
    }
    if p == lit(2.0) {
        return Ok(l2_squared(f).sqrt());
    }
    if p == T::one() {
        return Ok(weighted_sum(&f.map(T::abs)));
    }
    let sum = weighted_sum(&f.map(|v| v.abs().powf(p)));
    Ok(sum.powf(p.recip()))
}

/// Discrete `W^{k,p}` norm built from the derivative magnitudes of
/// [`operators::derivative_magnitude`].
pub fn norm_sobolev<T: Real>(f: &Field<T>, k: usize, p: T) -> Result<T> {
    if k > 2 {
        return Err(Error::UnsupportedOrder(k));
    }
    check_exponent(p)?;
    let mut norms = Vec::with_capacity(k + 1);
    for order in 0..=k {
        let d = if order == 0 {
            f.clone()
        } else {
            operators::derivative_magnitude(f, order)?
        };
        norms.push(norm_lp(&d, p)?);
    }
    if p.is_infinite() {
        return Ok(norms.into_iter().fold(T::zero(), T::max));
    }
    let total: T = norms.into_iter().map(|v| v.powf(p)).sum();
    Ok(total.powf(p.recip()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    #[test]
    fn constant_quadrature_is_exact() {
        let g = Grid::interval(1.0, 101).unwrap();
        let one = Field::constant(g, 1.0);
        assert_relative_eq!(integrate(&one).unwrap(), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn unit_four_ball_volume() {
        let g = Grid::<f64>::radial_ball(4, 1.0, 129).unwrap();
        let v = integrate(&Field::constant(g.clone(), 1.0)).unwrap();
        assert_relative_eq!(v, PI * PI / 2.0, epsilon = g.axes()[0].spacing.powi(2));
    }

    #[test]
    fn radial_disc_moment() {
        // 2π ∫ r·r dr = 2π/3
        for nodes in [65usize, 129, 257] {
            let g = Grid::radial_ball(2, 1.0, nodes).unwrap();
            let h = g.axes()[0].spacing;
            let f = Field::from_fn(g, |p: [f64; 2]| p[0]).unwrap();
            let err = (integrate(&f).unwrap() - 2.0 * PI / 3.0).abs();
            assert!(err < 2.0 * h * h, "nodes {nodes}: err {err}");
        }
    }

    #[test]
    fn lp_norms_of_simple_fields() {
        let g = Grid::interval(1.0, 101).unwrap();
        assert_relative_eq!(
            norm_lp(&Field::constant(g.clone(), 2.0), 2.0).unwrap(),
            2.0,
            epsilon = 1e-14
        );
        let zero = Field::zeros(g.clone());
        for p in [1.0, 1.5, 2.0, 7.0, f64::INFINITY] {
            assert_eq!(norm_lp(&zero, p).unwrap(), 0.0);
        }
        for nodes in [101usize, 201] {
            let g = Grid::interval(1.0, nodes).unwrap();
            let h = g.axes()[0].spacing;
            let x = Field::from_fn(g, |p: [f64; 2]| p[0]).unwrap();
            let err = (norm_lp(&x, 2.0).unwrap() - (1.0f64 / 3.0).sqrt()).abs();
            assert!(err < h * h, "err {err}");
        }
    }

    #[test]
    fn rejects_sub_unit_exponent() {
        let g = Grid::interval(1.0, 11).unwrap();
        let f = Field::constant(g, 1.0);
        assert!(matches!(
            norm_lp(&f, 0.5),
            Err(Error::InvalidParameter { name: "p", .. })
        ));
        assert!(norm_lp(&f, f64::NAN).is_err());
    }

    #[test]
    fn sobolev_norms() {
        let g = Grid::interval(1.0, 201).unwrap();
        let c = Field::constant(g.clone(), 3.0);
        assert_relative_eq!(norm_sobolev(&c, 1, 2.0).unwrap(), 3.0, epsilon = 1e-12);
        let zero = Field::zeros(g.clone());
        for k in 0..=2 {
            for p in [1.0, 2.0, f64::INFINITY] {
                assert_eq!(norm_sobolev(&zero, k, p).unwrap(), 0.0);
            }
        }
        assert!(matches!(norm_sobolev(&c, 3, 2.0), Err(Error::UnsupportedOrder(3))));

        let expected = (0.5 + PI * PI / 2.0).sqrt();
        let mut errors = Vec::new();
        for nodes in [101usize, 201, 401] {
            let g = Grid::interval(1.0, nodes).unwrap();
            let f = Field::from_fn(g, |p: [f64; 2]| (PI * p[0]).cos()).unwrap();
            errors.push((norm_sobolev(&f, 1, 2.0).unwrap() - expected).abs());
        }
        // O(h) or better
        assert!(
            errors[0] < 0.05 && errors[1] < errors[0] && errors[2] < errors[1],
            "{errors:?}"
        );
    }

    #[test]
    fn quadrature_is_second_order() {
        let exact = 2.0 / PI; // ∫_0^1 sin(πx) dx
        let err = |nodes| {
            let g = Grid::interval(1.0, nodes).unwrap();
            let f = Field::from_fn(g, |p: [f64; 2]| (PI * p[0]).sin()).unwrap();
            (integrate(&f).unwrap() - exact).abs()
        };
        let ratio = err(33) / err(65);
        assert!((3.5..=4.5).contains(&ratio), "ratio {ratio}");

        let exact = PI * (1.0 - (-1.0f64).exp()); // 2π ∫ r e^{-r²} dr over the unit disc
        let err = |nodes| {
            let g = Grid::radial_ball(2, 1.0, nodes).unwrap();
            let f = Field::from_fn(g, |p: [f64; 2]| (-p[0] * p[0]).exp()).unwrap();
            (integrate(&f).unwrap() - exact).abs()
        };
        let ratio = err(33) / err(65);
        assert!((3.5..=4.5).contains(&ratio), "radial ratio {ratio}");
    }

    #[test]
    fn rectangle_measure_and_layout() {
        let g = Grid::rectangle(2.0, 0.5, 5, 3).unwrap();
        assert_relative_eq!(g.measure(), 1.0, epsilon = 1e-14);
        assert_eq!(g.position(7), [1.0, 0.25]);
        let fine = g.refined().unwrap();
        assert_eq!(fine.position(g.refined_index(7)), g.position(7));
    }

    #[test]
    fn field_validation() {
        let g = Grid::interval(1.0, 5).unwrap();
        assert!(matches!(
            Field::new(g.clone(), vec![0.0; 4]),
            Err(Error::LengthMismatch { expected: 5, found: 4 })
        ));
        assert!(matches!(
            Field::new(g.clone(), vec![0.0, 1.0, f64::NAN, 0.0, 0.0]),
            Err(Error::NonFinite { index: 2 })
        ));
        assert!(Grid::<f64>::interval(1.0, 2).is_err());
        assert!(Grid::<f64>::radial_ball(5, 1.0, 10).is_err());
    }

    #[test]
    fn works_in_single_precision() {
        let g = Grid::<f32>::radial_ball(3, 1.0, 65).unwrap();
        let v = integrate(&Field::constant(g, 1.0f32)).unwrap();
        assert!((v - 4.0 / 3.0 * std::f32::consts::PI).abs() < 1e-4);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn pair(n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
            (
                proptest::collection::vec(-10.0f64..10.0, n),
                proptest::collection::vec(-10.0f64..10.0, n),
            )
        }

        proptest! {
            #[test]
            fn integrate_is_linear((a, b) in pair(17), alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
                let g = Grid::radial_ball(3, 1.5, 17).unwrap();
                let f = Field::new(g.clone(), a).unwrap();
                let h = Field::new(g, b).unwrap();
                let combo = &f.scale(alpha) + &h.scale(beta);
                let lhs = integrate(&combo).unwrap();
                let rhs = alpha * integrate(&f).unwrap() + beta * integrate(&h).unwrap();
                prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
            }

            #[test]
            fn triangle_inequality((a, b) in pair(23), p in 1.0f64..6.0) {
                let g = Grid::interval(2.0, 23).unwrap();
                let f = Field::new(g.clone(), a).unwrap();
                let h = Field::new(g, b).unwrap();
                let sum = norm_lp(&(&f + &h), p).unwrap();
                prop_assert!(sum <= norm_lp(&f, p).unwrap() + norm_lp(&h, p).unwrap() + 1e-12);
            }
        }
    }
}
