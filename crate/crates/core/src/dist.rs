//! Sampling from truncated normal and truncated inverse-gamma laws, plus a
//! few scalar distribution helpers shared by the samplers and summaries.

use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use statrs::function::erf::{erfc, erfc_inv};
use statrs::function::gamma::{gamma_lr, gamma_ur};

/// Standard normal CDF.
#[inline]
pub fn norm_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Standard normal quantile.
pub fn norm_quantile(p: f64) -> f64 {
    -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p)
}

#[inline]
pub fn norm_logpdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * z * z - sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

/// Draw from `N(mean, sd²)` restricted to `[lo, hi]`.
///
/// Exact for every interval: plain rejection when the interval carries
/// appreciable mass, otherwise the exponential or uniform envelopes of
/// Robert (1995) on the standardized interval.
pub fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, mean: f64, sd: f64, lo: f64, hi: f64) -> f64 {
    debug_assert!(lo <= hi);
    if sd == 0.0 || lo == hi {
        return mean.clamp(lo, hi);
    }
    let a = (lo - mean) / sd;
    let b = (hi - mean) / sd;
    let z = if a >= 0.0 {
        std_tail(rng, a, b)
    } else if b <= 0.0 {
        -std_tail(rng, -b, -a)
    } else {
        std_straddle(rng, a, b)
    };
    (mean + sd * z).clamp(lo, hi)
}

/// Standard normal restricted to `[a, b]` with `a < 0 < b`.
fn std_straddle<R: Rng + ?Sized>(rng: &mut R, a: f64, b: f64) -> f64 {
    if b - a > 0.5 {
        loop {
            let z: f64 = rng.sample(StandardNormal);
            if z >= a && z <= b {
                return z;
            }
        }
    }
    // narrow interval around the mode: uniform envelope
    loop {
        let z = rng.random_range(a..=b);
        if rng.random::<f64>() <= (-0.5 * z * z).exp() {
            return z;
        }
    }
}

/// Standard normal restricted to `[a, b]` with `0 <= a`.
fn std_tail<R: Rng + ?Sized>(rng: &mut R, a: f64, b: f64) -> f64 {
    if a < 0.3 && b > a + 1.0 {
        loop {
            let z: f64 = rng.sample(StandardNormal);
            if z >= a && z <= b {
                return z;
            }
        }
    }
    let root = (a * a + 4.0).sqrt();
    let lambda = 0.5 * (a + root);
    // the uniform envelope wins for short intervals
    let uniform_ok = b - a < 2.0 * std::f64::consts::E.sqrt() / (a + root) * ((a * a - a * root) / 4.0).exp();
    if b.is_finite() && uniform_ok {
        loop {
            let z = rng.random_range(a..=b);
            if rng.random::<f64>() <= (0.5 * (a * a - z * z)).exp() {
                return z;
            }
        }
    }
    let exp = Exp::new(lambda).expect("positive rate");
    loop {
        let z = a + exp.sample(rng);
        if z > b {
            continue;
        }
        if rng.random::<f64>() <= (-0.5 * (z - lambda) * (z - lambda)).exp() {
            return z;
        }
    }
}

/// Draw `v ~ InvGamma(shape, scale)`, i.e. `1/v ~ Gamma(shape, rate = scale)`.
pub fn inv_gamma<R: Rng + ?Sized>(rng: &mut R, shape: f64, scale: f64) -> f64 {
    let g = rand_distr::Gamma::new(shape, 1.0 / scale).expect("positive shape and scale");
    1.0 / g.sample(rng)
}

/// Draw `v ~ InvGamma(shape, scale)` restricted to `[lo, hi]`, via the
/// inverse CDF of the precision `1/v ~ Gamma(shape, rate = scale)` on the
/// reflected interval `[1/hi, 1/lo]`.
pub fn truncated_inv_gamma<R: Rng + ?Sized>(rng: &mut R, shape: f64, scale: f64, lo: f64, hi: f64) -> f64 {
    debug_assert!(shape > 0.0 && lo > 0.0 && lo <= hi);
    if scale <= 0.0 {
        // the density (v)^{-shape-1} increases toward zero: the lower bound
        // carries the mass in the limit; sample the power law exactly
        let t = rng.random::<f64>();
        let (l, h) = (lo.powf(-shape), hi.powf(-shape));
        return (l + t * (h - l)).powf(-1.0 / shape).clamp(lo, hi);
    }
    let tau_lo = 1.0 / hi;
    let tau_hi = 1.0 / lo;
    let u: f64 = rng.random();
    let tau = truncated_gamma_icdf(shape, scale, tau_lo, tau_hi, u);
    (1.0 / tau).clamp(lo, hi)
}

/// Inverse CDF of `Gamma(shape, rate)` restricted to `[lo, hi]` at level `u`.
fn truncated_gamma_icdf(shape: f64, rate: f64, lo: f64, hi: f64, u: f64) -> f64 {
    let p_lo = gamma_lr(shape, rate * lo);
    let p_hi = if hi.is_finite() { gamma_lr(shape, rate * hi) } else { 1.0 };
    // use whichever tail function keeps precision for this window
    let upper = p_lo > 0.5;
    let (c_lo, c_hi) = if upper {
        (gamma_ur(shape, rate * lo), if hi.is_finite() { gamma_ur(shape, rate * hi) } else { 0.0 })
    } else {
        (p_lo, p_hi)
    };
    let width = (c_hi - c_lo).abs();
    if !(width > 1e-300) {
        return log_density_icdf(shape, rate, lo, hi, u);
    }
    let target = c_lo + u * (c_hi - c_lo);
    let cdf = |t: f64| if upper { gamma_ur(shape, rate * t) } else { gamma_lr(shape, rate * t) };
    let increasing = !upper;
    let mut a = lo;
    let mut b = if hi.is_finite() { hi } else { lo + 1e6 * (shape + 1.0) / rate };
    let geometric = a > 0.0 && b / a > 1e3;
    for _ in 0..200 {
        let mid = if geometric { (a * b).sqrt() } else { 0.5 * (a + b) };
        let below = if increasing { cdf(mid) < target } else { cdf(mid) > target };
        if below {
            a = mid;
        } else {
            b = mid;
        }
        if (b - a) <= 1e-15 * b.abs() {
            break;
        }
    }
    0.5 * (a + b)
}

/// Numerical inverse CDF from the log density on a fine grid; used only when
/// the window lies so deep in a tail that the incomplete gamma functions
/// underflow. Works in `u = log τ`, where the log density `a u - rate e^u`
/// is concave, on the sub-window holding all but `e^{-40}` of the peak.
fn log_density_icdf(shape: f64, rate: f64, lo: f64, hi: f64, u: f64) -> f64 {
    const N: usize = 4096;
    const DROP: f64 = 40.0;
    let ulo = lo.max(f64::MIN_POSITIVE).ln();
    let uhi = if hi.is_finite() { hi.ln() } else { ((shape + 1.0) / rate).ln() + 10.0 };
    let g = |v: f64| shape * v - rate * v.exp();
    let peak = (shape / rate).ln().clamp(ulo, uhi);
    let gmax = g(peak);
    // g is concave: bisect each side for the level gmax - DROP
    let edge = |mut inside: f64, mut outside: f64| {
        if g(outside) >= gmax - DROP {
            return outside;
        }
        for _ in 0..200 {
            let mid = 0.5 * (inside + outside);
            if g(mid) >= gmax - DROP {
                inside = mid;
            } else {
                outside = mid;
            }
        }
        outside
    };
    let (a, b) = (edge(peak, ulo), edge(peak, uhi));
    if !(b > a) {
        return peak.exp();
    }
    let pts: Vec<f64> = (0..=N).map(|i| a + (b - a) * i as f64 / N as f64).collect();
    let mut cum = vec![0.0; N + 1];
    for i in 1..=N {
        cum[i] = cum[i - 1] + 0.5 * ((g(pts[i - 1]) - gmax).exp() + (g(pts[i]) - gmax).exp());
    }
    let target = u * cum[N];
    let i = cum.partition_point(|&c| c < target).clamp(1, N);
    let frac = if cum[i] > cum[i - 1] { (target - cum[i - 1]) / (cum[i] - cum[i - 1]) } else { 0.5 };
    (pts[i - 1] + frac * (pts[i] - pts[i - 1])).exp().clamp(lo, hi)
}

/// Empirical quantile with linear interpolation between order statistics
/// (`h = (n - 1) q`). `values` is reordered.
pub fn quantile_in_place(values: &mut [f64], q: f64) -> f64 {
    let n = values.len();
    assert!(n > 0, "quantile of an empty sample");
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    let (_, &mut lo_val, rest) = values.select_nth_unstable_by(lo, f64::total_cmp);
    if frac == 0.0 || rest.is_empty() {
        return lo_val;
    }
    let hi_val = rest.iter().cloned().fold(f64::INFINITY, f64::min);
    lo_val + frac * (hi_val - lo_val)
}

/// Quantile of the Gaussian mixture `(1/T) Σ_t N(means_t, sds_t²)`, by
/// bisection on the mixture CDF. Components with zero scale act as point
/// masses.
pub fn mixture_quantile(means: &[f64], sds: &[f64], q: f64) -> f64 {
    let t = means.len() as f64;
    let cdf = |x: f64| {
        means
            .iter()
            .zip(sds)
            .map(|(&m, &s)| {
                if s > 0.0 {
                    norm_cdf((x - m) / s)
                } else if x >= m {
                    1.0
                } else {
                    0.0
                }
            })
            .sum::<f64>()
            / t
    };
    let z = norm_quantile(q.clamp(1e-12, 1.0 - 1e-12)).abs() + 1.0;
    let mut lo = means.iter().zip(sds).map(|(m, s)| m - z * s).fold(f64::INFINITY, f64::min) - 1e-12;
    let mut hi = means.iter().zip(sds).map(|(m, s)| m + z * s).fold(f64::NEG_INFINITY, f64::max) + 1e-12;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < q {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-14 * (1.0 + hi.abs()) {
            break;
        }
    }
    hi
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ks_stat(mut xs: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
        xs.sort_by(f64::total_cmp);
        let n = xs.len() as f64;
        xs.iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = cdf(x);
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max)
    }

    fn tn_cdf(x: f64, mean: f64, sd: f64, lo: f64, hi: f64) -> f64 {
        let a = norm_cdf((lo - mean) / sd);
        let b = norm_cdf((hi - mean) / sd);
        (norm_cdf((x - mean) / sd) - a) / (b - a)
    }

    #[test]
    fn truncated_normal_matches_cdf_in_several_regimes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cases = [
            (0.0, 1.0, -1.0, 2.0),
            (0.0, 1.0, 0.5, 0.6),
            (0.0, 1.0, 1.5, 4.0),
            (0.0, 1.0, -3.0, -2.5),
            (2.0, 0.5, -1.0, 1.0),
            (0.0, 10.0, -50.0, 50.0),
            (0.0, 1.0, -0.1, 0.1),
        ];
        for &(m, s, lo, hi) in &cases {
            let xs: Vec<f64> = (0..20000).map(|_| truncated_normal(&mut rng, m, s, lo, hi)).collect();
            assert!(xs.iter().all(|&x| x >= lo && x <= hi));
            let d = ks_stat(xs, |x| tn_cdf(x, m, s, lo, hi));
            assert!(d < 0.015, "case {:?}: KS = {d}", (m, s, lo, hi));
        }
    }

    #[test]
    fn far_tail_truncated_normal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let x = truncated_normal(&mut rng, 0.0, 1.0, 30.0, 31.0);
            assert!((30.0..=31.0).contains(&x));
        }
    }

    #[test]
    fn truncated_inverse_gamma_matches_cdf() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (a, b, lo, hi) = (3.0, 2.0, 0.3, 2.0);
        let xs: Vec<f64> = (0..20000).map(|_| truncated_inv_gamma(&mut rng, a, b, lo, hi)).collect();
        // P(V <= v) = Q(a, b/v)
        let cdf = |v: f64| {
            let f = |t: f64| gamma_ur(a, b / t);
            (f(v) - f(lo)) / (f(hi) - f(lo))
        };
        assert!(ks_stat(xs, cdf) < 0.015);
    }

    #[test]
    fn truncated_inverse_gamma_far_tail_stays_in_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            let v = truncated_inv_gamma(&mut rng, 500.0, 1e-6, 1e-6, 100.0);
            assert!((1e-6..=100.0).contains(&v));
            assert!(v < 1e-6 * 1.05, "{v}");
        }
        for _ in 0..200 {
            let v = truncated_inv_gamma(&mut rng, 2.0, 1e6, 1e-6, 10.0);
            assert!(v > 9.0 && v <= 10.0, "{v}");
        }
    }

    #[test]
    fn quantile_matches_sorted_definition() {
        let mut v = vec![3.0, 1.0, 4.0, 1.5, 9.0, 2.6];
        let mut s = v.clone();
        s.sort_by(f64::total_cmp);
        assert_eq!(quantile_in_place(&mut v, 0.0), 1.0);
        assert_eq!(quantile_in_place(&mut v, 1.0), 9.0);
        let q = quantile_in_place(&mut v, 0.5);
        assert_eq!(q, s[2] + 0.5 * (s[3] - s[2]));
    }

    #[test]
    fn normal_quantile_round_trip() {
        for &p in &[1e-8, 0.025, 0.5, 0.8, 0.975] {
            assert!((norm_cdf(norm_quantile(p)) - p).abs() < 1e-10 * p);
        }
        assert!((norm_quantile(0.975) - 1.959_963_984_540_054).abs() < 1e-12);
    }

    #[test]
    fn mixture_quantile_standard_normal() {
        let q = mixture_quantile(&[0.0; 5], &[1.0; 5], 0.975);
        assert!((q - 1.959_963_984_540_054).abs() < 1e-9);
    }
}
