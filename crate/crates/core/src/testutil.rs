//! Helpers shared by unit tests.

/// Minimizer of a 1-D piecewise-quadratic `f` on `[lo, hi]`; never leaves the
/// interval, so penalties only need to be valid inside it.
///
/// Nested grids locate the minimum; a kinked minimum is then exact to
/// rounding. A smooth one is only resolved to about `√ε`, so the final step
/// fits a parabola through three close points and keeps its vertex when the
/// function agrees there.
pub(crate) fn argmin_1d(f: impl Fn(f64) -> f64, lo: f64, hi: f64) -> f64 {
    let (a, b) = (lo, hi);
    let (mut lo, mut hi, mut best) = (lo, hi, lo);
    for _ in 0..6 {
        let n = 2000;
        let step = (hi - lo) / n as f64;
        let mut best_val = f64::INFINITY;
        for i in 0..=n {
            let x = lo + step * i as f64;
            let v = f(x);
            if v < best_val {
                best_val = v;
                best = x;
            }
        }
        lo = (best - step).max(a);
        hi = (best + step).min(b);
    }
    let h = 1e-5;
    if best - h < a || best + h > b {
        return best;
    }
    let (fm, f0, fp) = (f(best - h), f(best), f(best + h));
    let curv = fp - 2.0 * f0 + fm;
    if curv > 0.0 {
        let v = best - h * (fp - fm) / (2.0 * curv);
        if (v - best).abs() < h && f(v) <= f0 + 1e-12 * (1.0 + f0.abs()) {
            return v;
        }
    }
    best
}
