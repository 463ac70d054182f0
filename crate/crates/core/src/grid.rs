//! Dyadic grids over an axis-aligned data box.
//!
//! A grid is described by its dimension `m`, a half-extent exponent `ell`
//! (the grid spans `[-2^{ell-1}, 2^{ell-1})` per axis) and a mesh exponent
//! `jj` (mesh `2^{-jj}`). Points of the grid that fall inside the data box
//! form the finite support over which the smoothed dual is maximised.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Default cap on the number of enumerated grid points.
pub const DEFAULT_POINT_CAP: u64 = 100_000_000;

/// Closed axis-aligned box `[lo_k, hi_k]` per axis.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxRegion {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxRegion {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::InvalidArgument(
                "box bounds must be non-empty and of equal length".into(),
            ));
        }
        if lo.iter().chain(&hi).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("box bounds must be finite".into()));
        }
        if lo.iter().zip(&hi).any(|(l, h)| l > h) {
            return Err(Error::InvalidArgument("box has lo > hi on some axis".into()));
        }
        Ok(Self { lo, hi })
    }

    /// The cube `[lo, hi]^m`.
    pub fn cube(m: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![lo; m], vec![hi; m])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(v, (l, h))| *l <= *v && *v <= *h)
    }

    /// Clamps `x` into the box componentwise. Returns `true` if anything moved.
    pub fn clamp(&self, x: &mut [f64]) -> bool {
        let mut moved = false;
        for (v, (l, h)) in x.iter_mut().zip(self.lo.iter().zip(&self.hi)) {
            let c = v.clamp(*l, *h);
            moved |= c != *v;
            *v = c;
        }
        moved
    }

    /// Largest Euclidean norm over the box (attained at a corner).
    pub fn max_norm(&self) -> f64 {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(l, h)| (l * l).max(h * h))
            .sum::<f64>()
            .sqrt()
    }

    /// All `2^m` corners in lexicographic order of (lo, hi) choices.
    pub fn corners(&self) -> Vec<Vec<f64>> {
        let m = self.dim();
        (0..1usize << m)
            .map(|mask| {
                (0..m)
                    .map(|k| {
                        if mask >> (m - 1 - k) & 1 == 1 {
                            self.hi[k]
                        } else {
                            self.lo[k]
                        }
                    })
                    .collect()
            })
            .collect()
    }
}

/// A dyadic grid `2^{-jj} Z^m` restricted to `[-2^{ell-1}, 2^{ell-1})^m`,
/// together with the data box it must cover.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub m: usize,
    pub ell: u32,
    pub jj: u32,
    pub xi_box: BoxRegion,
}

impl GridSpec {
    pub fn new(ell: u32, jj: u32, xi_box: BoxRegion) -> Result<Self> {
        let m = xi_box.dim();
        if ell < 1 || jj < 1 {
            return Err(Error::InvalidArgument("ell and jj must be at least 1".into()));
        }
        // keeps 2^{jj} and 2^{ell-1} exact and grid coordinates integral in f64
        if ell + jj > 50 {
            return Err(Error::InvalidArgument("ell + jj must not exceed 50".into()));
        }
        let half = pow2(ell as i32 - 1);
        for k in 0..m {
            if xi_box.lo[k] < -half || xi_box.hi[k] >= half {
                return Err(Error::InvalidArgument(format!(
                    "axis {k}: box [{}, {}] not inside [-{half}, {half})",
                    xi_box.lo[k], xi_box.hi[k]
                )));
            }
        }
        Ok(Self { m, ell, jj, xi_box })
    }

    pub fn mesh(&self) -> f64 {
        pow2(-(self.jj as i32))
    }

    /// `2^{ell-1}`.
    pub fn half_extent(&self) -> f64 {
        pow2(self.ell as i32 - 1)
    }

    /// Size of the full grid, `2^{m(ell + jj)}`.
    pub fn full_count(&self) -> u128 {
        let e = self.m as u32 * (self.ell + self.jj);
        if e >= 128 {
            u128::MAX
        } else {
            1u128 << e
        }
    }

    /// `max_{x in box} |x|`.
    pub fn m_xi(&self) -> f64 {
        self.xi_box.max_norm()
    }

    /// Whether `x` lies in `[-2^{ell-1}, 2^{ell-1})^m`.
    pub fn in_grid_box(&self, x: &[f64]) -> bool {
        let half = self.half_extent();
        x.iter().all(|v| -half <= *v && *v < half)
    }

    /// Grid indices `k` (coordinate `k * mesh`) kept along one axis.
    fn axis_range(&self, axis: usize) -> (i64, i64) {
        let scale = pow2(self.jj as i32);
        let top = (self.half_extent() * scale) as i64 - 1;
        let lo = (self.xi_box.lo[axis] * scale).ceil() as i64;
        let hi = ((self.xi_box.hi[axis] * scale).floor() as i64).min(top);
        (lo, hi)
    }

    /// Number of grid points inside the box, without enumerating them.
    pub fn count_inside(&self) -> u128 {
        (0..self.m)
            .map(|k| {
                let (lo, hi) = self.axis_range(k);
                (hi - lo + 1).max(0) as u128
            })
            .try_fold(1u128, |acc, c| acc.checked_mul(c))
            .unwrap_or(u128::MAX)
    }
}

#[inline]
fn pow2(e: i32) -> f64 {
    2f64.powi(e)
}

/// Maps each coordinate to `floor(2^jj x_k) / 2^jj`.
pub fn snap(x: &[f64], jj: u32) -> Result<Vec<f64>> {
    let mut out = x.to_vec();
    snap_in_place(&mut out, jj)?;
    Ok(out)
}

/// In-place variant of [`snap`].
pub fn snap_in_place(x: &mut [f64], jj: u32) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("cannot snap non-finite point {x:?}")));
    }
    let scale = pow2(jj as i32);
    for v in x.iter_mut() {
        *v = (*v * scale).floor() / scale;
    }
    Ok(())
}

/// Enumerated grid points, stored row-major (`m` coordinates per point).
#[derive(Debug, Clone, PartialEq)]
pub struct GridPoints {
    m: usize,
    coords: Vec<f64>,
    run: usize,
}

impl GridPoints {
    pub fn from_flat(m: usize, coords: Vec<f64>) -> Result<Self> {
        if m == 0 || coords.len() % m != 0 {
            return Err(Error::InvalidArgument("flat coordinates not a multiple of m".into()));
        }
        Ok(Self { m, coords, run: 1 })
    }

    /// Points come in consecutive runs of this length that share every
    /// coordinate but the last.
    pub fn run_len(&self) -> usize {
        self.run
    }

    /// Flat coordinates of each run, `run_len * m` values per chunk.
    pub fn runs(&self) -> std::slice::ChunksExact<'_, f64> {
        self.coords.chunks_exact(self.run * self.m)
    }

    pub fn dim(&self) -> usize {
        self.m
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.m
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn point(&self, j: usize) -> &[f64] {
        &self.coords[j * self.m..(j + 1) * self.m]
    }

    pub fn iter(&self) -> std::slice::ChunksExact<'_, f64> {
        self.coords.chunks_exact(self.m)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.coords
    }
}

/// Lists the grid points inside the data box in lexicographic order.
pub fn enumerate_points(spec: &GridSpec) -> Result<GridPoints> {
    enumerate_points_with_cap(spec, DEFAULT_POINT_CAP)
}

/// [`enumerate_points`] with an explicit cap on the point count.
pub fn enumerate_points_with_cap(spec: &GridSpec, cap: u64) -> Result<GridPoints> {
    let count = spec.count_inside();
    if count > cap as u128 {
        return Err(Error::GridTooLarge { count, cap });
    }
    let m = spec.m;
    let mesh = spec.mesh();
    let ranges: Vec<(i64, i64)> = (0..m).map(|k| spec.axis_range(k)).collect();
    let n = count as usize;
    let mut coords = Vec::with_capacity(n * m);
    if n == 0 {
        return GridPoints::from_flat(m, coords);
    }
    let run = (ranges[m - 1].1 - ranges[m - 1].0 + 1) as usize;
    let mut idx: Vec<i64> = ranges.iter().map(|r| r.0).collect();
    loop {
        coords.extend(idx.iter().map(|&k| k as f64 * mesh));
        // odometer increment, last axis fastest
        let mut axis = m;
        loop {
            if axis == 0 {
                return Ok(GridPoints { m, coords, run });
            }
            axis -= 1;
            if idx[axis] < ranges[axis].1 {
                idx[axis] += 1;
                break;
            }
            idx[axis] = ranges[axis].0;
        }
    }
}

/// A probability measure with finitely many atoms on the dyadic grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    m: usize,
    points: Vec<f64>,
    masses: Vec<f64>,
}

impl DiscreteMeasure {
    /// Builds a measure from atoms and masses. Masses must be nonnegative and
    /// sum to one within `1e-12`.
    pub fn new(m: usize, points: Vec<f64>, masses: Vec<f64>) -> Result<Self> {
        if m == 0 || points.len() != masses.len() * m {
            return Err(Error::InvalidArgument("atom/mass length mismatch".into()));
        }
        if masses.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidArgument("masses must be finite and nonnegative".into()));
        }
        let total: f64 = masses.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("masses sum to {total}, not 1")));
        }
        Ok(Self { m, points, masses })
    }

    /// Unit mass at a single point.
    pub fn dirac(x: &[f64]) -> Self {
        Self {
            m: x.len(),
            points: x.to_vec(),
            masses: vec![1.0],
        }
    }

    pub fn dim(&self) -> usize {
        self.m
    }

    pub fn len(&self) -> usize {
        self.masses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masses.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.m..(i + 1) * self.m]
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn atoms(&self) -> impl Iterator<Item = (&[f64], f64)> {
        self.points.chunks_exact(self.m).zip(self.masses.iter().copied())
    }

    pub fn total_mass(&self) -> f64 {
        self.masses.iter().sum()
    }

    /// Expected value of `f` under the measure, summed in atom order.
    pub fn expect(&self, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
        self.atoms().map(|(x, w)| w * f(x)).sum()
    }
}

/// Aggregates equally weighted samples into the grid cells `Q_i`.
pub fn discretise_samples<'a, I>(samples: I, spec: &GridSpec) -> Result<DiscreteMeasure>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut cells: BTreeMap<Vec<i64>, u64> = BTreeMap::new();
    let mut n = 0u64;
    for (index, x) in samples.into_iter().enumerate() {
        let key = cell_key(x, index, spec)?;
        *cells.entry(key).or_insert(0) += 1;
        n += 1;
    }
    if n == 0 {
        return Err(Error::InvalidArgument("cannot discretise an empty sample".into()));
    }
    let nf = n as f64;
    build_measure(spec, cells.into_iter().map(|(k, c)| (k, c as f64 / nf)))
}

/// Aggregates a weighted point set into the grid cells `Q_i`.
pub fn discretise_weighted(
    points: &[Vec<f64>],
    masses: &[f64],
    spec: &GridSpec,
) -> Result<DiscreteMeasure> {
    if points.len() != masses.len() || points.is_empty() {
        return Err(Error::InvalidArgument("need equally many points and masses".into()));
    }
    let total: f64 = masses.iter().sum();
    if masses.iter().any(|w| !(*w >= 0.0)) || (total - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidArgument("input masses must be a probability vector".into()));
    }
    let mut cells: BTreeMap<Vec<i64>, f64> = BTreeMap::new();
    for (index, (x, w)) in points.iter().zip(masses).enumerate() {
        let key = cell_key(x, index, spec)?;
        *cells.entry(key).or_insert(0.0) += w;
    }
    build_measure(spec, cells.into_iter())
}

/// Re-discretises an existing discrete measure onto `spec`'s grid.
pub fn discretise_measure(measure: &DiscreteMeasure, spec: &GridSpec) -> Result<DiscreteMeasure> {
    let points: Vec<Vec<f64>> = measure.atoms().map(|(x, _)| x.to_vec()).collect();
    discretise_weighted(&points, measure.masses(), spec)
}

fn cell_key(x: &[f64], index: usize, spec: &GridSpec) -> Result<Vec<i64>> {
    if x.len() != spec.m || x.iter().any(|v| !v.is_finite()) || !spec.in_grid_box(x) {
        return Err(Error::OutsideGrid {
            index,
            point: x.to_vec(),
            half: spec.half_extent(),
        });
    }
    let scale = pow2(spec.jj as i32);
    Ok(x.iter().map(|v| (v * scale).floor() as i64).collect())
}

fn build_measure(
    spec: &GridSpec,
    cells: impl Iterator<Item = (Vec<i64>, f64)>,
) -> Result<DiscreteMeasure> {
    let mesh = spec.mesh();
    let mut points = Vec::new();
    let mut masses = Vec::new();
    for (key, w) in cells {
        points.extend(key.iter().map(|&k| k as f64 * mesh));
        masses.push(w);
    }
    // renormalise away accumulated rounding so the invariant holds exactly enough
    let total: f64 = masses.iter().sum();
    for w in masses.iter_mut() {
        *w /= total;
    }
    DiscreteMeasure::new(spec.m, points, masses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn line_spec(lo: f64, hi: f64, ell: u32, jj: u32) -> GridSpec {
        GridSpec::new(ell, jj, BoxRegion::cube(1, lo, hi).unwrap()).unwrap()
    }

    #[test]
    fn snap_examples() {
        assert_eq!(snap(&[0.75], 1).unwrap(), vec![0.5]);
        assert_eq!(snap(&[-0.25], 1).unwrap(), vec![-0.5]);
        assert_eq!(snap(&[1.5, -2.0, 0.0], 1).unwrap(), vec![1.5, -2.0, 0.0]);
        assert!(snap(&[f64::NAN], 1).is_err());
        assert!(snap(&[f64::INFINITY, 0.0], 3).is_err());
    }

    #[test]
    fn enumerate_small_line() {
        let spec = line_spec(-1.0, 0.5, 1, 1);
        let pts = enumerate_points(&spec).unwrap();
        assert_eq!(pts.as_flat(), &[-1.0, -0.5, 0.0, 0.5]);
        assert_eq!(pts.len(), 4);
    }

    #[test]
    fn enumerate_table_two_grid() {
        let spec = GridSpec::new(3, 1, BoxRegion::cube(4, -3.0, 3.0).unwrap()).unwrap();
        assert_eq!(spec.count_inside(), 28_561);
        let pts = enumerate_points(&spec).unwrap();
        assert_eq!(pts.len(), 13usize.pow(4));
        assert_eq!(pts.point(0), &[-3.0, -3.0, -3.0, -3.0]);
        assert_eq!(pts.point(pts.len() - 1), &[3.0, 3.0, 3.0, 3.0]);
    }

    #[test]
    fn full_grid_count_matches_power_of_two() {
        for (m, ell, jj) in [(1u32, 1u32, 1u32), (2, 2, 1), (2, 1, 3), (3, 2, 2)] {
            let half = 2f64.powi(ell as i32 - 1);
            let top = half - 2f64.powi(-(jj as i32));
            let spec =
                GridSpec::new(ell, jj, BoxRegion::cube(m as usize, -half, top).unwrap()).unwrap();
            let pts = enumerate_points(&spec).unwrap();
            assert_eq!(pts.len() as u128, spec.full_count());
            assert_eq!(spec.full_count(), 1u128 << (m * (ell + jj)));
        }
    }

    #[test]
    fn cap_is_enforced() {
        let spec = GridSpec::new(3, 1, BoxRegion::cube(4, -3.0, 3.0).unwrap()).unwrap();
        match enumerate_points_with_cap(&spec, 1000) {
            Err(Error::GridTooLarge { count, cap }) => {
                assert_eq!(count, 28_561);
                assert_eq!(cap, 1000);
            }
            other => panic!("expected cap error, got {other:?}"),
        }
    }

    #[test]
    fn spec_validation() {
        assert!(GridSpec::new(1, 1, BoxRegion::cube(1, -1.0, 1.0).unwrap()).is_err());
        assert!(GridSpec::new(0, 1, BoxRegion::cube(1, -0.5, 0.5).unwrap()).is_err());
        assert!(GridSpec::new(2, 0, BoxRegion::cube(1, -0.5, 0.5).unwrap()).is_err());
        assert!(BoxRegion::new(vec![1.0], vec![0.0]).is_err());
    }

    #[test]
    fn discretise_examples() {
        let spec = line_spec(-1.0, 0.5, 1, 1);
        let mu = discretise_samples([&[0.3][..]], &spec).unwrap();
        assert_eq!(mu.point(0), &[0.0]);
        assert_eq!(mu.masses(), &[1.0]);

        let mu = discretise_samples([&[0.3][..], &[0.4][..]], &spec).unwrap();
        assert_eq!(mu.len(), 1);
        assert_eq!(mu.masses(), &[1.0]);

        let mu = discretise_samples([&[0.3][..], &[0.6][..]], &spec).unwrap();
        assert_eq!(mu.len(), 2);
        assert_eq!(mu.point(0), &[0.0]);
        assert_eq!(mu.point(1), &[0.5]);
        assert_eq!(mu.masses(), &[0.5, 0.5]);
    }

    #[test]
    fn discretise_rejects_outside_samples() {
        let spec = line_spec(-1.0, 0.5, 1, 1);
        match discretise_samples([&[0.2][..], &[1.0][..]], &spec) {
            Err(Error::OutsideGrid { index, point, .. }) => {
                assert_eq!(index, 1);
                assert_eq!(point, vec![1.0]);
            }
            other => panic!("expected domain error, got {other:?}"),
        }
    }

    #[test]
    fn weighted_and_measure_routes_agree() {
        let spec = line_spec(-1.0, 0.5, 1, 2);
        let pts = vec![vec![0.1], vec![-0.9], vec![0.2]];
        let mu = discretise_weighted(&pts, &[0.5, 0.25, 0.25], &spec).unwrap();
        assert_eq!(mu.as_pairs(), vec![(vec![-1.0], 0.25), (vec![0.0], 0.75)]);
        let again = discretise_measure(&mu, &spec).unwrap();
        assert_eq!(again, mu);
    }

    impl DiscreteMeasure {
        fn as_pairs(&self) -> Vec<(Vec<f64>, f64)> {
            self.atoms().map(|(x, w)| (x.to_vec(), w)).collect()
        }
    }

    proptest! {
        #[test]
        fn snap_idempotent_and_close(
            xs in proptest::collection::vec(-100.0f64..100.0, 1..5),
            jj in 1u32..12,
        ) {
            let s = snap(&xs, jj).unwrap();
            prop_assert_eq!(snap(&s, jj).unwrap(), s.clone());
            let mesh = 2f64.powi(-(jj as i32));
            let mut sq = 0.0;
            for (a, b) in s.iter().zip(&xs) {
                prop_assert!(a <= b);
                prop_assert!(b - a < mesh);
                sq += (b - a) * (b - a);
            }
            prop_assert!(sq.sqrt() <= (xs.len() as f64).sqrt() * mesh);
        }

        #[test]
        fn discretise_order_invariant(
            mut xs in proptest::collection::vec((-2.0f64..1.99, -2.0f64..1.99), 1..40),
            seed in any::<u64>(),
        ) {
            let spec = GridSpec::new(2, 2, BoxRegion::cube(2, -2.0, 1.75).unwrap()).unwrap();
            let rows: Vec<Vec<f64>> = xs.iter().map(|(a, b)| vec![*a, *b]).collect();
            let mu = discretise_samples(rows.iter().map(|r| r.as_slice()), &spec).unwrap();
            prop_assert!((mu.total_mass() - 1.0).abs() < 1e-12);
            // deterministic shuffle
            let k = (seed as usize) % xs.len();
            xs.rotate_left(k);
            xs.reverse();
            let rows2: Vec<Vec<f64>> = xs.iter().map(|(a, b)| vec![*a, *b]).collect();
            let mu2 = discretise_samples(rows2.iter().map(|r| r.as_slice()), &spec).unwrap();
            prop_assert_eq!(mu, mu2);
        }

        #[test]
        fn enumeration_strictly_increasing(
            lo in -4.0f64..0.0, width in 0.0f64..3.9, jj in 1u32..3,
        ) {
            let hi = (lo + width).min(3.99);
            let spec = GridSpec::new(3, jj, BoxRegion::cube(2, lo, hi).unwrap()).unwrap();
            let pts = enumerate_points(&spec).unwrap();
            let rows: Vec<&[f64]> = pts.iter().collect();
            for w in rows.windows(2) {
                prop_assert!(w[0] < w[1]);
            }
            for r in rows {
                prop_assert!(spec.xi_box.contains(r));
            }
        }
    }
}
