//! Continuous control paths built from irregularly observed functions.
//!
//! An observed function is a list of `(time, value)` pairs on its own horizon
//! `[0, T]`. We normalize time to `[0, 1]`, interpolate the values, and attach
//! an explicit time channel so the resulting path can drive a CDE even over
//! flat data segments. Piecewise-linear interpolation is the default: its
//! increments make every downstream Riemann-Stieltjes sum exact, and its
//! 1-variation is just the sum of absolute knot-to-knot moves.

use crate::error::{FameError, Result};

/// One observed function: strictly increasing times in `[0, horizon]` with a
/// value per time.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FunctionSample {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub horizon: f64,
}

impl FunctionSample {
    pub fn new(times: Vec<f64>, values: Vec<f64>, horizon: f64) -> Result<Self> {
        if times.len() < 2 {
            return Err(FameError::DegenerateSample(times.len()));
        }
        if times.len() != values.len() {
            return Err(FameError::Dimension {
                context: "FunctionSample values",
                expected: times.len(),
                got: values.len(),
            });
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(FameError::Domain(format!("horizon must be positive, got {horizon}")));
        }
        if times[0] < 0.0 {
            return Err(FameError::Domain(format!("first time {} < 0", times[0])));
        }
        if *times.last().unwrap() > horizon {
            return Err(FameError::Domain(format!(
                "last time {} exceeds horizon {horizon}",
                times.last().unwrap()
            )));
        }
        for i in 1..times.len() {
            if !(times[i] > times[i - 1]) {
                return Err(FameError::TimeOrdering(i));
            }
        }
        if values.iter().any(|v| !v.is_finite()) || times.iter().any(|t| !t.is_finite()) {
            return Err(FameError::Domain("non-finite observation".into()));
        }
        Ok(Self { times, values, horizon })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Interpolation scheme for the data channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Scheme {
    Linear,
    NaturalCubic,
}

impl std::str::FromStr for Scheme {
    type Err = FameError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" | "piecewise-linear" => Ok(Scheme::Linear),
            "cubic" | "natural-cubic" => Ok(Scheme::NaturalCubic),
            other => Err(FameError::Config(format!("unknown scheme '{other}'"))),
        }
    }
}

/// A continuous, time-augmented interpolant of one observed function.
///
/// Knots live on the normalized domain `[0, 1]`. Evaluation returns
/// `(time, data)` where the time channel is the identity map on `[0, 1]` and
/// the data channel interpolates the observations (constant extension outside
/// the knot span). The path owns the number of observations it came from so
/// routing summaries can be recomputed.
#[derive(Clone, Debug)]
pub struct ControlPath {
    knots: Vec<f64>,
    data: Vec<f64>,
    scheme: Scheme,
    /// Second derivatives at the knots (natural cubic only).
    m2: Vec<f64>,
    horizon: f64,
}

/// Refinement level used when estimating the 1-variation of cubic paths.
pub const CUBIC_VAR_REFINEMENT: usize = 64;

impl ControlPath {
    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn data_values(&self) -> &[f64] {
        &self.data
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    /// Original (un-normalized) horizon, kept for reporting.
    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Number of channels including the explicit time channel.
    pub const CHANNELS: usize = 2;

    /// Data channel value at normalized time `t` (no domain check).
    fn data_at(&self, t: f64) -> f64 {
        let k = &self.knots;
        if t <= k[0] {
            return self.data[0];
        }
        if t >= *k.last().unwrap() {
            return *self.data.last().unwrap();
        }
        // Index of the segment containing t.
        let i = match k.binary_search_by(|x| x.partial_cmp(&t).unwrap()) {
            Ok(j) => return self.data[j],
            Err(j) => j - 1,
        };
        let h = k[i + 1] - k[i];
        let a = (t - k[i]) / h;
        match self.scheme {
            Scheme::Linear => self.data[i] + a * (self.data[i + 1] - self.data[i]),
            Scheme::NaturalCubic => {
                let (y0, y1) = (self.data[i], self.data[i + 1]);
                let (m0, m1) = (self.m2[i], self.m2[i + 1]);
                let b = 1.0 - a;
                b * y0
                    + a * y1
                    + h * h / 6.0 * ((b * b * b - b) * m0 + (a * a * a - a) * m1)
            }
        }
    }

    /// Reverse the path in time: `x'(t) = x(1 - t)`, knots mirrored, the time
    /// channel staying the identity map.
    pub fn reversed(&self) -> ControlPath {
        let mut knots: Vec<f64> = self.knots.iter().rev().map(|u| 1.0 - u).collect();
        // Guard against -0.0 at the endpoints.
        for u in knots.iter_mut() {
            if *u == 0.0 {
                *u = 0.0;
            }
        }
        let data: Vec<f64> = self.data.iter().rev().cloned().collect();
        let m2 = match self.scheme {
            Scheme::Linear => Vec::new(),
            Scheme::NaturalCubic => natural_cubic_m2(&knots, &data),
        };
        ControlPath { knots, data, scheme: self.scheme, m2, horizon: self.horizon }
    }
}

/// Solve the tridiagonal system for natural cubic second derivatives.
fn natural_cubic_m2(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut m = vec![0.0; n];
    if n < 3 {
        return m;
    }
    let mut sub = vec![0.0; n];
    let mut diag = vec![0.0; n];
    let mut sup = vec![0.0; n];
    let mut rhs = vec![0.0; n];
    diag[0] = 1.0;
    diag[n - 1] = 1.0;
    for i in 1..n - 1 {
        let h0 = x[i] - x[i - 1];
        let h1 = x[i + 1] - x[i];
        sub[i] = h0 / 6.0;
        diag[i] = (h0 + h1) / 3.0;
        sup[i] = h1 / 6.0;
        rhs[i] = (y[i + 1] - y[i]) / h1 - (y[i] - y[i - 1]) / h0;
    }
    // Thomas algorithm.
    for i in 1..n {
        let w = sub[i] / diag[i - 1];
        diag[i] -= w * sup[i - 1];
        rhs[i] -= w * rhs[i - 1];
    }
    m[n - 1] = rhs[n - 1] / diag[n - 1];
    for i in (0..n - 1).rev() {
        m[i] = (rhs[i] - sup[i] * m[i + 1]) / diag[i];
    }
    m
}

/// Build a time-augmented control path from an observed sample. Times are
/// normalized by the sample's horizon.
pub fn build_path(sample: &FunctionSample, scheme: Scheme) -> Result<ControlPath> {
    if sample.len() < 2 {
        return Err(FameError::DegenerateSample(sample.len()));
    }
    for i in 1..sample.times.len() {
        if !(sample.times[i] > sample.times[i - 1]) {
            return Err(FameError::TimeOrdering(i));
        }
    }
    let knots: Vec<f64> = sample.times.iter().map(|t| t / sample.horizon).collect();
    let data = sample.values.clone();
    let m2 = match scheme {
        Scheme::Linear => Vec::new(),
        Scheme::NaturalCubic => natural_cubic_m2(&knots, &data),
    };
    Ok(ControlPath { knots, data, scheme, m2, horizon: sample.horizon })
}

/// Evaluate the path at normalized time `t`, returning `[time, data]`.
pub fn eval_path(path: &ControlPath, t: f64) -> Result<[f64; 2]> {
    if !(0.0..=1.0).contains(&t) {
        return Err(FameError::Domain(format!("t = {t} outside [0, 1]")));
    }
    Ok([t, path.data_at(t)])
}

/// Ordered quadrature instants on `[0, 1]` including the endpoints and every
/// knot of the paths it was built for.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadratureGrid {
    points: Vec<f64>,
}

impl QuadratureGrid {
    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn contains(&self, t: f64) -> bool {
        self.points
            .binary_search_by(|x| x.partial_cmp(&t).unwrap())
            .is_ok()
    }

    /// Mirror the grid: `u -> 1 - u`, re-sorted.
    pub fn reversed(&self) -> QuadratureGrid {
        let mut points: Vec<f64> = self.points.iter().rev().map(|u| 1.0 - u).collect();
        if let Some(first) = points.first_mut() {
            if *first != 0.0 && first.abs() < 1e-300 {
                *first = 0.0;
            }
        }
        QuadratureGrid { points }
    }

    /// Trapezoid weights for integrating over `[0, 1]` on this grid.
    pub fn trapezoid_weights(&self) -> Vec<f64> {
        let p = &self.points;
        let n = p.len();
        let mut w = vec![0.0; n];
        for k in 0..n - 1 {
            let h = p[k + 1] - p[k];
            w[k] += 0.5 * h;
            w[k + 1] += 0.5 * h;
        }
        w
    }

    fn from_sorted(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(FameError::Quadrature(format!(
                "grid needs at least 2 points, got {}",
                points.len()
            )));
        }
        Ok(QuadratureGrid { points })
    }

    /// Build a grid from explicit instants. They must be strictly increasing
    /// with endpoints 0 and 1.
    pub fn from_points(points: Vec<f64>) -> Result<Self> {
        for i in 1..points.len() {
            if !(points[i] > points[i - 1]) {
                return Err(FameError::Quadrature(format!(
                    "grid points not strictly increasing at index {i}"
                )));
            }
        }
        if points.first() != Some(&0.0) || points.last() != Some(&1.0) {
            return Err(FameError::Quadrature("grid must span [0, 1]".into()));
        }
        Self::from_sorted(points)
    }
}

fn merge_sorted_unique(mut points: Vec<f64>) -> Vec<f64> {
    points.sort_by(|a, b| a.partial_cmp(b).unwrap());
    points.dedup();
    points
}

/// Union of `q` uniform points on `[0, 1]` with all knots of `path`.
pub fn make_grid(path: &ControlPath, q: usize) -> Result<QuadratureGrid> {
    make_grid_multi(&[path], q)
}

/// Shared grid for several channels: union of `q` uniform points with every
/// knot of every path. All per-channel trajectories are sampled on this grid
/// so cross attention and stacking line up pointwise.
pub fn make_grid_multi(paths: &[&ControlPath], q: usize) -> Result<QuadratureGrid> {
    if q < 2 {
        return Err(FameError::Config(format!("grid size q must be >= 2, got {q}")));
    }
    let mut points: Vec<f64> = (0..q).map(|k| k as f64 / (q - 1) as f64).collect();
    for p in paths {
        points.extend_from_slice(p.knots());
    }
    points.push(0.0);
    points.push(1.0);
    points.retain(|t| (0.0..=1.0).contains(t));
    QuadratureGrid::from_sorted(merge_sorted_unique(points))
}

// Convenience overload used when the caller owns the paths.
pub fn make_grid_multi_owned(paths: &[ControlPath], q: usize) -> Result<QuadratureGrid> {
    let refs: Vec<&ControlPath> = paths.iter().collect();
    make_grid_multi(&refs, q)
}

/// Per-interval increments `X(u_{k+1}) - X(u_k)` for both channels, exact for
/// the piecewise-linear scheme. Errors if the grid misses a knot.
pub fn increments(path: &ControlPath, grid: &QuadratureGrid) -> Result<Vec<[f64; 2]>> {
    for &k in path.knots() {
        if (0.0..=1.0).contains(&k) && !grid.contains(k) {
            return Err(FameError::GridMismatch { knot: k });
        }
    }
    let pts = grid.points();
    let mut out = Vec::with_capacity(pts.len() - 1);
    let mut prev = eval_path(path, pts[0])?;
    for &u in &pts[1..] {
        let cur = eval_path(path, u)?;
        out.push([cur[0] - prev[0], cur[1] - prev[1]]);
        prev = cur;
    }
    Ok(out)
}

/// 1-variation of the data channel. Exact for the linear scheme; for cubic
/// paths, computed over each knot interval refined `CUBIC_VAR_REFINEMENT`
/// times.
pub fn one_variation(path: &ControlPath) -> f64 {
    match path.scheme() {
        Scheme::Linear => path
            .data
            .windows(2)
            .map(|w| (w[1] - w[0]).abs())
            .sum(),
        Scheme::NaturalCubic => {
            let mut total = 0.0;
            for seg in path.knots.windows(2) {
                let (a, b) = (seg[0], seg[1]);
                let mut prev = path.data_at(a);
                for r in 1..=CUBIC_VAR_REFINEMENT {
                    let t = a + (b - a) * r as f64 / CUBIC_VAR_REFINEMENT as f64;
                    let v = path.data_at(t);
                    total += (v - prev).abs();
                    prev = v;
                }
            }
            total
        }
    }
}
