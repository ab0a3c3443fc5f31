//! Planar point grids and distance matrices.
//!
//! Coordinates are kilometres in a local planar projection. Longitude and
//! latitude must be projected before ingestion.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Points closer than this (km) are considered duplicates.
pub const DUPLICATE_TOL_KM: f64 = 1e-9;

/// An ordered, duplicate-free set of planar locations. The order defines the
/// row/column indexing of every matrix built from the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    id: String,
    point_ids: Vec<String>,
    points: Vec<[f64; 2]>,
}

impl Grid {
    /// Builds a grid; point ids default to the zero-based index.
    pub fn new(id: impl Into<String>, points: Vec<[f64; 2]>) -> Result<Self> {
        let ids = (0..points.len()).map(|i| i.to_string()).collect();
        Self::with_point_ids(id, ids, points)
    }

    pub fn with_point_ids(
        id: impl Into<String>,
        point_ids: Vec<String>,
        points: Vec<[f64; 2]>,
    ) -> Result<Self> {
        let id = id.into();
        if points.is_empty() {
            return Err(Error::InvalidArgument(format!("grid '{id}' is empty")));
        }
        if point_ids.len() != points.len() {
            return Err(Error::InvalidArgument(format!(
                "grid '{id}': {} ids for {} points",
                point_ids.len(),
                points.len()
            )));
        }
        if let Some(p) = points
            .iter()
            .find(|p| !(p[0].is_finite() && p[1].is_finite()))
        {
            return Err(Error::InvalidArgument(format!(
                "grid '{id}': non-finite coordinate {p:?}"
            )));
        }
        // Sort by x so the duplicate scan only compares near neighbours.
        let mut order: Vec<usize> = (0..points.len()).collect();
        order.sort_by(|&a, &b| points[a][0].total_cmp(&points[b][0]));
        for (w, &a) in order.iter().enumerate() {
            for &b in &order[w + 1..] {
                if points[b][0] - points[a][0] > DUPLICATE_TOL_KM {
                    break;
                }
                if dist(points[a], points[b]) <= DUPLICATE_TOL_KM {
                    return Err(Error::InvalidArgument(format!(
                        "grid '{id}': duplicate points '{}' and '{}' at {:?}",
                        point_ids[a], point_ids[b], points[a]
                    )));
                }
            }
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = point_ids.iter().find(|pid| !seen.insert(pid.as_str())) {
            return Err(Error::InvalidArgument(format!(
                "grid '{id}': duplicate point id '{dup}'"
            )));
        }
        Ok(Self {
            id,
            point_ids,
            points,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn point_ids(&self) -> &[String] {
        &self.point_ids
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn index_of(&self, point_id: &str) -> Option<usize> {
        self.point_ids.iter().position(|p| p == point_id)
    }

    pub fn centroid(&self) -> [f64; 2] {
        let n = self.points.len() as f64;
        let (sx, sy) = self
            .points
            .iter()
            .fold((0.0, 0.0), |(sx, sy), p| (sx + p[0], sy + p[1]));
        [sx / n, sy / n]
    }

    /// Same points, new grid label.
    pub fn relabeled(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    /// Concatenation of two grids, used when sampling jointly on both.
    pub fn union(&self, other: &Grid, id: impl Into<String>) -> Result<Grid> {
        let mut ids: Vec<String> = self
            .point_ids
            .iter()
            .map(|p| format!("{}:{}", self.id, p))
            .collect();
        ids.extend(
            other
                .point_ids
                .iter()
                .map(|p| format!("{}:{}", other.id, p)),
        );
        let mut pts = self.points.clone();
        pts.extend_from_slice(&other.points);
        Grid::with_point_ids(id, ids, pts)
    }
}

#[inline]
fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Regular lattice of `nx·ny` points, row-major: point `(i, j)` sits at
/// `origin + (i·spacing, j·spacing)` with `i` varying fastest.
pub fn make_regular_grid(origin: [f64; 2], spacing: f64, nx: usize, ny: usize) -> Result<Grid> {
    if !(spacing > 0.0) || !spacing.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "grid spacing must be positive, got {spacing}"
        )));
    }
    if nx == 0 || ny == 0 {
        return Err(Error::InvalidArgument(format!(
            "grid counts must be at least 1, got {nx}x{ny}"
        )));
    }
    let mut points = Vec::with_capacity(nx * ny);
    let mut ids = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            points.push([
                origin[0] + i as f64 * spacing,
                origin[1] + j as f64 * spacing,
            ]);
            ids.push(format!("p{:03}_{:03}", i, j));
        }
    }
    Grid::with_point_ids("regular", ids, points)
}

/// Rigid motion: rotate every point about the grid centroid by `rotation`
/// radians (counter-clockwise), then translate by `offset`.
pub fn transform_grid(g: &Grid, rotation: f64, offset: [f64; 2]) -> Grid {
    let c = g.centroid();
    let (s, co) = rotation.sin_cos();
    let points = g
        .points
        .iter()
        .map(|p| {
            let dx = p[0] - c[0];
            let dy = p[1] - c[1];
            [
                c[0] + co * dx - s * dy + offset[0],
                c[1] + s * dx + co * dy + offset[1],
            ]
        })
        .collect();
    Grid {
        id: g.id.clone(),
        point_ids: g.point_ids.clone(),
        points,
    }
}

/// Euclidean distances (km); rows index `a`, columns index `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    entries: DMatrix<f64>,
    same_grid: bool,
}

impl DistanceMatrix {
    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    /// True when built from a grid against itself (square, zero diagonal).
    pub fn is_self(&self) -> bool {
        self.same_grid
    }

    pub fn nrows(&self) -> usize {
        self.entries.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.entries.ncols()
    }

    pub fn min_nonzero(&self) -> Option<f64> {
        self.entries
            .iter()
            .copied()
            .filter(|d| *d > DUPLICATE_TOL_KM)
            .min_by(f64::total_cmp)
    }

    pub fn max(&self) -> f64 {
        self.entries.max()
    }
}

pub fn pairwise_distances(a: &Grid, b: &Grid) -> Result<DistanceMatrix> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument(
            "distance between empty grids".into(),
        ));
    }
    let entries = DMatrix::from_fn(a.len(), b.len(), |i, j| dist(a.points[i], b.points[j]));
    let same_grid = std::ptr::eq(a, b) || a.points == b.points;
    Ok(DistanceMatrix { entries, same_grid })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    #[test]
    fn regular_grid_examples() {
        let g = make_regular_grid([0.0, 0.0], 20.0, 2, 2).unwrap();
        assert_eq!(
            g.points(),
            &[[0.0, 0.0], [20.0, 0.0], [0.0, 20.0], [20.0, 20.0]]
        );
        let g = make_regular_grid([0.0, 0.0], 20.0, 1, 1).unwrap();
        assert_eq!(g.points(), &[[0.0, 0.0]]);
        let g = make_regular_grid([5.0, 5.0], 10.0, 3, 1).unwrap();
        assert_eq!(g.points(), &[[5.0, 5.0], [15.0, 5.0], [25.0, 5.0]]);
    }

    #[test]
    fn regular_grid_rejects_bad_arguments() {
        assert!(make_regular_grid([0.0, 0.0], 0.0, 2, 2).is_err());
        assert!(make_regular_grid([0.0, 0.0], -1.0, 2, 2).is_err());
        assert!(make_regular_grid([0.0, 0.0], 1.0, 0, 2).is_err());
        assert!(make_regular_grid([0.0, 0.0], 1.0, 2, 0).is_err());
    }

    #[test]
    fn duplicates_and_empty_rejected() {
        assert!(Grid::new("g", vec![]).is_err());
        assert!(Grid::new("g", vec![[1.0, 1.0], [1.0, 1.0 + 1e-12]]).is_err());
        assert!(Grid::new("g", vec![[1.0, 1.0], [1.0, 1.0 + 1e-6]]).is_ok());
    }

    #[test]
    fn transform_identity_and_translation() {
        let g = make_regular_grid([0.0, 0.0], 10.0, 3, 2).unwrap();
        assert_eq!(transform_grid(&g, 0.0, [0.0, 0.0]), g);
        let shifted = transform_grid(&g, 0.0, [3.0, 4.0]);
        for (p, q) in g.points().iter().zip(shifted.points()) {
            assert!((q[0] - p[0] - 3.0).abs() < 1e-12);
            assert!((q[1] - p[1] - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn two_quarter_turns_equal_half_turn() {
        let g = make_regular_grid([1.0, -2.0], 7.0, 4, 3).unwrap();
        let twice = transform_grid(
            &transform_grid(&g, PI / 2.0, [0.0, 0.0]),
            PI / 2.0,
            [0.0, 0.0],
        );
        // Point-by-point oracle: a half turn about the centroid is reflection through it.
        let c = g.centroid();
        for (p, q) in g.points().iter().zip(twice.points()) {
            assert!((q[0] - (2.0 * c[0] - p[0])).abs() < 1e-9);
            assert!((q[1] - (2.0 * c[1] - p[1])).abs() < 1e-9);
        }
        let once = transform_grid(&g, PI, [0.0, 0.0]);
        for (p, q) in once.points().iter().zip(twice.points()) {
            assert!(dist(*p, *q) < 1e-9);
        }
    }

    #[test]
    fn distance_examples() {
        let a = Grid::new("a", vec![[0.0, 0.0]]).unwrap();
        let b = Grid::new("b", vec![[3.0, 4.0]]).unwrap();
        assert_eq!(pairwise_distances(&a, &a).unwrap().entries()[(0, 0)], 0.0);
        assert_eq!(pairwise_distances(&a, &b).unwrap().entries()[(0, 0)], 5.0);
    }

    fn arb_grid(n: usize) -> impl Strategy<Value = Grid> {
        prop::collection::vec((-100.0..100.0f64, -100.0..100.0f64), n)
            .prop_filter_map("duplicates", |v| {
                Grid::new("r", v.into_iter().map(|(x, y)| [x, y]).collect()).ok()
            })
    }

    proptest! {
        #[test]
        fn distances_match_loop_oracle(a in arb_grid(6), b in arb_grid(4)) {
            let d = pairwise_distances(&a, &b).unwrap();
            for i in 0..6 {
                for j in 0..4 {
                    let (p, q) = (a.points()[i], b.points()[j]);
                    let oracle = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
                    prop_assert!((d.entries()[(i, j)] - oracle).abs() <= 1e-12);
                }
            }
        }

        #[test]
        fn self_distances_are_a_metric(a in arb_grid(7)) {
            let d = pairwise_distances(&a, &a).unwrap();
            let e = d.entries();
            prop_assert!(d.is_self());
            for i in 0..7 {
                prop_assert_eq!(e[(i, i)], 0.0);
                for j in 0..7 {
                    prop_assert!(e[(i, j)] >= 0.0);
                    prop_assert_eq!(e[(i, j)], e[(j, i)]);
                    for k in 0..7 {
                        prop_assert!(e[(i, k)] <= e[(i, j)] + e[(j, k)] + 1e-9);
                    }
                }
            }
        }

        #[test]
        fn rigid_motion_preserves_distances(
            a in arb_grid(8),
            rot in -PI..PI,
            ox in -50.0..50.0f64,
            oy in -50.0..50.0f64,
        ) {
            let moved = transform_grid(&a, rot, [ox, oy]);
            let d0 = pairwise_distances(&a, &a).unwrap();
            let d1 = pairwise_distances(&moved, &moved).unwrap();
            prop_assert_eq!(moved.len(), a.len());
            prop_assert!((d0.entries() - d1.entries()).abs().max() <= 1e-9);
        }
    }
}
