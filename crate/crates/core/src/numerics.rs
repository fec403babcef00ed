//! Small numerical utilities shared across modules.

/// Error-free sum of two doubles: `a + b = s + e` exactly.
#[inline]
pub fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    let e = (a - (s - bb)) + (b - bb);
    (s, e)
}

/// Prefix sums carried as unevaluated `hi + lo` pairs, so window sums taken
/// as differences stay accurate to a few ulps of the window, not of the prefix.
#[derive(Debug, Clone)]
pub struct CompensatedPrefix {
    hi: Vec<f64>,
    lo: Vec<f64>,
}

impl CompensatedPrefix {
    pub fn new(values: &[f64]) -> Self {
        let mut hi = Vec::with_capacity(values.len() + 1);
        let mut lo = Vec::with_capacity(values.len() + 1);
        let (mut h, mut l) = (0.0, 0.0);
        hi.push(h);
        lo.push(l);
        for &v in values {
            let (s, e) = two_sum(h, v);
            h = s;
            l += e;
            let (s2, e2) = two_sum(h, l);
            h = s2;
            l = e2;
            hi.push(h);
            lo.push(l);
        }
        Self { hi, lo }
    }

    /// Sum of `values[a..b]`.
    #[inline]
    pub fn range(&self, a: usize, b: usize) -> f64 {
        (self.hi[b] - self.hi[a]) + (self.lo[b] - self.lo[a])
    }

    pub fn total(&self) -> f64 {
        let n = self.hi.len() - 1;
        self.range(0, n)
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    linear_slope(&lx, &ly)
}

/// Ordinary least-squares slope of `ys` on `xs`.
pub fn linear_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Empirical quantile of sorted data, interpolating linearly between order
/// statistics at position `p (n - 1)`.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}
