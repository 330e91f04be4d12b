/// Quantile by linear interpolation between order statistics (`(n-1) q` positions).
///
/// Infinite samples sort last and propagate only when they carry weight.
pub fn quantile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() || !(0.0..=1.0).contains(&q) {
        return None;
    }
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    let lo = v[i];
    if frac == 0.0 || i + 1 >= v.len() {
        return Some(lo);
    }
    let hi = v[i + 1];
    if lo == hi {
        return Some(lo);
    }
    Some(lo + (hi - lo) * frac)
}

pub fn median(values: &[f64]) -> Option<f64> {
    quantile(values, 0.5)
}

/// `(q1, median, q3)`.
pub fn quartiles(values: &[f64]) -> Option<(f64, f64, f64)> {
    Some((quantile(values, 0.25)?, quantile(values, 0.5)?, quantile(values, 0.75)?))
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 || points.iter().any(|&(x, y)| !(x > 0.0 && y > 0.0)) {
        return None;
    }
    let n = points.len() as f64;
    let (sx, sy) = points.iter().fold((0.0, 0.0), |(a, b), &(x, y)| (a + x.ln(), b + y.ln()));
    let (mx, my) = (sx / n, sy / n);
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for &(x, y) in points {
        let (dx, dy) = (x.ln() - mx, y.ln() - my);
        sxy += dx * dy;
        sxx += dx * dx;
    }
    (sxx > 0.0).then(|| sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn power_law_slope() {
        let pts: Vec<(f64, f64)> = [8.0, 16.0, 32.0].iter().map(|&n: &f64| (n, 0.3 * n.powf(2.5))).collect();
        assert!((loglog_slope(&pts).unwrap() - 2.5).abs() < 1e-12);
        assert_eq!(loglog_slope(&pts[..1]), None);
    }

    #[test]
    fn infinite_tail() {
        let v = [1.0, 2.0, f64::INFINITY];
        assert_eq!(median(&v), Some(2.0));
        assert_eq!(quantile(&v, 1.0), Some(f64::INFINITY));
        assert_eq!(quantile(&v, 0.75), Some(f64::INFINITY));
    }
}
