//! Local-linear kernel smoothers with the Epanechnikov kernel.
//!
//! Raw data are pooled into bins keyed by exact location: a bin keeps the
//! count and the sum of responses, which makes the weighted least-squares
//! fit identical to fitting every raw point while keeping dense designs
//! cheap.

use std::collections::HashMap;

use nalgebra::{Matrix3, Vector3};

/// `0.75 (1 − u²)` on `[−1, 1]`.
#[inline]
pub fn epanechnikov(u: f64) -> f64 {
    if u.abs() <= 1.0 {
        0.75 * (1.0 - u * u)
    } else {
        0.0
    }
}

/// Raised when the smoothing window at the evaluation point holds no data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmptyWindow;

#[derive(Debug, Clone, Copy)]
struct Bin1 {
    x: f64,
    sum: f64,
    count: f64,
}

/// Pooled one-dimensional scatter.
#[derive(Debug, Clone, Default)]
pub struct Scatter1d {
    bins: Vec<Bin1>,
}

impl Scatter1d {
    pub fn from_points(points: impl IntoIterator<Item = (f64, f64)>) -> Self {
        let mut map: HashMap<u64, Bin1> = HashMap::new();
        for (x, y) in points {
            let e = map.entry(x.to_bits()).or_insert(Bin1 {
                x,
                sum: 0.0,
                count: 0.0,
            });
            e.sum += y;
            e.count += 1.0;
        }
        let mut bins: Vec<Bin1> = map.into_values().collect();
        bins.sort_by(|a, b| a.x.total_cmp(&b.x));
        Self { bins }
    }

    pub fn distinct_locations(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }

    fn window(&self, x0: f64, h: f64) -> &[Bin1] {
        let lo = self.bins.partition_point(|b| b.x < x0 - h);
        let hi = self.bins.partition_point(|b| b.x <= x0 + h);
        &self.bins[lo..hi]
    }

    /// Local-linear estimate at `x0`. Falls back to the local mean when the
    /// window holds a single distinct location.
    pub fn local_linear(&self, x0: f64, h: f64) -> Result<f64, EmptyWindow> {
        let (mut s0, mut s1, mut s2, mut t0, mut t1) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for b in self.window(x0, h) {
            let d = (b.x - x0) / h;
            let k = epanechnikov(d);
            if k == 0.0 {
                continue;
            }
            let w = k * b.count;
            s0 += w;
            s1 += w * d;
            s2 += w * d * d;
            t0 += k * b.sum;
            t1 += k * b.sum * d;
        }
        if s0 <= 0.0 {
            return Err(EmptyWindow);
        }
        let det = s0 * s2 - s1 * s1;
        if det <= 1e-10 * s0 * s2.max(f64::MIN_POSITIVE) || det <= 0.0 {
            return Ok(t0 / s0);
        }
        Ok((s2 * t0 - s1 * t1) / det)
    }
}

#[derive(Debug, Clone, Copy)]
struct Bin2 {
    s: f64,
    t: f64,
    sum: f64,
    count: f64,
}

/// Pooled two-dimensional scatter for surface smoothing.
#[derive(Debug, Clone, Default)]
pub struct Scatter2d {
    bins: Vec<Bin2>,
}

impl Scatter2d {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_points(points: impl IntoIterator<Item = (f64, f64, f64)>) -> Self {
        let mut acc = Accumulator2d::default();
        for (s, t, y) in points {
            acc.push(s, t, y);
        }
        acc.finish()
    }

    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }

    /// Evaluates the local-linear surface on the tensor grid `rows × cols`,
    /// reporting the first empty window it meets.
    pub fn smooth_on_grid(&self, rows: &[f64], cols: &[f64], h_row: f64, h_col: f64) -> Result<Vec<f64>, (f64, f64)> {
        let mut out = vec![0.0; rows.len() * cols.len()];
        for (r, &s0) in rows.iter().enumerate() {
            let lo = self.bins.partition_point(|b| b.s < s0 - h_row);
            let hi = self.bins.partition_point(|b| b.s <= s0 + h_row);
            let strip = &self.bins[lo..hi];
            for (c, &t0) in cols.iter().enumerate() {
                out[r * cols.len() + c] = local_linear_2d(strip, s0, t0, h_row, h_col).map_err(|_| (s0, t0))?;
            }
        }
        Ok(out)
    }
}

fn local_linear_2d(bins: &[Bin2], s0: f64, t0: f64, hs: f64, ht: f64) -> Result<f64, EmptyWindow> {
    let mut xtx = Matrix3::<f64>::zeros();
    let mut xty = Vector3::<f64>::zeros();
    for b in bins {
        let v = (b.t - t0) / ht;
        if v.abs() > 1.0 {
            continue;
        }
        let u = (b.s - s0) / hs;
        let k = epanechnikov(u) * epanechnikov(v);
        if k == 0.0 {
            continue;
        }
        let w = k * b.count;
        let basis = Vector3::new(1.0, u, v);
        xtx += basis * basis.transpose() * w;
        xty += basis * (k * b.sum);
    }
    let s0w = xtx[(0, 0)];
    if s0w <= 0.0 {
        return Err(EmptyWindow);
    }
    let det = xtx.determinant();
    if det > 1e-10 * s0w.powi(3) {
        if let Some(chol) = xtx.cholesky() {
            return Ok(chol.solve(&xty)[0]);
        }
    }
    Ok(xty[0] / s0w)
}

/// Incremental builder for [`Scatter2d`].
#[derive(Debug, Default)]
pub struct Accumulator2d {
    map: HashMap<(u64, u64), Bin2>,
}

impl Accumulator2d {
    pub fn push(&mut self, s: f64, t: f64, y: f64) {
        let e = self.map.entry((s.to_bits(), t.to_bits())).or_insert(Bin2 {
            s,
            t,
            sum: 0.0,
            count: 0.0,
        });
        e.sum += y;
        e.count += 1.0;
    }

    pub fn finish(self) -> Scatter2d {
        let mut bins: Vec<Bin2> = self.map.into_values().collect();
        bins.sort_by(|a, b| a.s.total_cmp(&b.s).then(a.t.total_cmp(&b.t)));
        Scatter2d { bins }
    }
}
