//! Student-t distribution and the two-sample t-tests.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// `ln Gamma(x)` for `x > 0` (Lanczos approximation, ~1e-15 relative).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // Reflection keeps the series in its accurate range.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = LANCZOS[0];
    let t = x + LANCZOS_G + 0.5;
    for (i, &c) in LANCZOS.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for the incomplete beta (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn incomplete_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

fn check_df(df: f64) -> Result<()> {
    if df.is_finite() && df >= 1.0 {
        Ok(())
    } else {
        Err(Error::usage(format!("degrees of freedom must be at least 1, got {df}")))
    }
}

/// `P(|T| > |x|)` for Student-t with `df` degrees of freedom.
pub fn t_two_sided_p(x: f64, df: f64) -> Result<f64> {
    check_df(df)?;
    if x.is_nan() {
        return Err(Error::numeric("t_cdf", "statistic is NaN"));
    }
    if x.is_infinite() {
        return Ok(0.0);
    }
    Ok(incomplete_beta(df / (df + x * x), 0.5 * df, 0.5).clamp(0.0, 1.0))
}

/// Student-t CDF.
pub fn t_cdf(x: f64, df: f64) -> Result<f64> {
    let tail = 0.5 * t_two_sided_p(x, df)?;
    Ok(if x > 0.0 { 1.0 - tail } else { tail })
}

/// Outcome of a two-sample t-test.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub t_stat: f64,
    pub df: f64,
    pub p_value: f64,
    /// The sample spread was zero and the p-value came from the
    /// zero-variance convention (`p = 1` for a zero mean gap, else `p = 0`).
    pub degenerate: bool,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn constant(v: &[f64]) -> bool {
    v.iter().all(|&x| x == v[0])
}

/// `flat` means every observation behind `se` is identical, which is
/// checked exactly rather than through a rounded variance.
fn finish(gap: f64, se: f64, df: f64, flat: bool) -> Result<TestResult> {
    if flat || se == 0.0 {
        let (t_stat, p_value) = if gap == 0.0 {
            (0.0, 1.0)
        } else {
            (gap.signum() * f64::INFINITY, 0.0)
        };
        return Ok(TestResult {
            t_stat,
            df,
            p_value,
            degenerate: true,
        });
    }
    let t_stat = gap / se;
    Ok(TestResult {
        t_stat,
        df,
        p_value: t_two_sided_p(t_stat, df)?,
        degenerate: false,
    })
}

fn check_samples(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::usage("t-test needs at least two observations per sample"));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::numeric("t_test", "non-finite observation"));
    }
    Ok(())
}

/// Paired test on the differences `a - b`, `df = N - 1`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TestResult> {
    check_samples(a, b)?;
    if a.len() != b.len() {
        return Err(Error::usage(format!(
            "paired samples differ in length ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let m = mean(&d);
    let var = d.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    let flat = constant(&d);
    finish(if flat { d[0] } else { m }, (var / n).sqrt(), n - 1.0, flat)
}

/// Pooled-variance two-sample test, `df = N1 + N2 - 2`.
pub fn independent_t_test(a: &[f64], b: &[f64]) -> Result<TestResult> {
    check_samples(a, b)?;
    let (n1, n2) = (a.len() as f64, b.len() as f64);
    let (m1, m2) = (mean(a), mean(b));
    let ss = a.iter().map(|v| (v - m1).powi(2)).sum::<f64>() + b.iter().map(|v| (v - m2).powi(2)).sum::<f64>();
    let df = n1 + n2 - 2.0;
    let s2 = ss / df;
    let gap = if constant(a) && constant(b) { a[0] - b[0] } else { m1 - m2 };
    finish(gap, (s2 / n1 + s2 / n2).sqrt(), df, constant(a) && constant(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{RngStream, StreamId};
    use statrs::function::gamma::ln_gamma as oracle_ln_gamma;

    /// `0.5 + integral_0^x` of the t density, composite Simpson.
    fn cdf_by_integration(x: f64, df: f64) -> f64 {
        let norm = (oracle_ln_gamma((df + 1.0) / 2.0)
            - oracle_ln_gamma(df / 2.0)
            - 0.5 * (df * std::f64::consts::PI).ln())
        .exp();
        let f = |u: f64| norm * (1.0 + u * u / df).powf(-(df + 1.0) / 2.0);
        let n = 20_000;
        let h = x / n as f64;
        let mut s = f(0.0) + f(x);
        for i in 1..n {
            s += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        0.5 + s * h / 3.0
    }

    #[test]
    fn ln_gamma_matches_reference() {
        for x in [0.1, 0.5, 1.0, 2.5, 10.0, 100.5] {
            assert!((ln_gamma(x) - oracle_ln_gamma(x)).abs() < 1e-12, "{x}");
        }
    }

    #[test]
    fn cdf_matches_integration_oracle() {
        for df in [1.0, 2.0, 5.0, 19.0, 200.0] {
            for i in 0..=16 {
                let x = -4.0 + 0.5 * i as f64;
                let got = t_cdf(x, df).unwrap();
                assert!((got - cdf_by_integration(x, df)).abs() < 1e-6, "df {df} x {x}");
            }
        }
    }

    #[test]
    fn cdf_examples() {
        for df in [1.0, 3.0, 30.0] {
            assert_eq!(t_cdf(0.0, df).unwrap(), 0.5);
        }
        assert!((t_cdf(1.0, 1.0).unwrap() - 0.75).abs() < 1e-12);
        assert!((t_cdf(1.96, 200.0).unwrap() - 0.9744).abs() < 1e-3);
        for x in [-3.0, -0.2, 0.7, 2.5, 12.0] {
            let cauchy = 0.5 + f64::atan(x) / std::f64::consts::PI;
            assert!((t_cdf(x, 1.0).unwrap() - cauchy).abs() < 1e-10);
            let s = t_cdf(x, 7.0).unwrap() + t_cdf(-x, 7.0).unwrap();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(matches!(t_cdf(1.0, 0.5), Err(Error::Usage(_))));
    }

    #[test]
    fn paired_examples() {
        let a = [0.25, 0.5, 0.875, 0.125];
        let r = paired_t_test(&a, &a).unwrap();
        assert_eq!((r.t_stat, r.p_value), (0.0, 1.0));
        assert!(r.degenerate);
        let b = [0.125, 0.375, 0.75, 0.0];
        let r = paired_t_test(&a, &b).unwrap();
        assert_eq!(r.p_value, 0.0);
        assert!(r.degenerate);
        assert!(paired_t_test(&a, &b[..3]).is_err());
        assert!(paired_t_test(&a[..1], &b[..1]).is_err());
    }

    #[test]
    fn paired_statistic_at_five_percent() {
        let n = 20;
        let sd = (20.0f64 / 19.0).sqrt();
        let c = 2.093 * sd / (n as f64).sqrt();
        let a: Vec<f64> = (0..n).map(|i| c + if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let r = paired_t_test(&a, &vec![0.0; n]).unwrap();
        assert!((r.t_stat - 2.093).abs() < 1e-9);
        assert_eq!(r.df, 19.0);
        let oracle = 2.0 * (1.0 - cdf_by_integration(2.093, 19.0));
        assert!((r.p_value - oracle).abs() < 1e-6);
        assert!((r.p_value - 0.05).abs() < 2e-3);
    }

    #[test]
    fn independent_examples() {
        let c = [0.3; 5];
        let r = independent_t_test(&c, &c).unwrap();
        assert_eq!(r.p_value, 1.0);
        let a = [0.1, 0.4, 0.35, 0.8];
        let b = [0.5, 0.2, 0.9, 0.6, 0.7];
        let ab = independent_t_test(&a, &b).unwrap();
        let ba = independent_t_test(&b, &a).unwrap();
        assert_eq!(ab.t_stat, -ba.t_stat);
        assert_eq!(ab.p_value, ba.p_value);
        assert_eq!(ab.df, 7.0);
    }

    #[test]
    fn independent_null_gives_large_p_usually() {
        let mut rng = RngStream::new(3, StreamId::Custom(3));
        let mut big = 0;
        for _ in 0..200 {
            let a: Vec<f64> = rng.normals(30);
            let b: Vec<f64> = rng.normals(30);
            if independent_t_test(&a, &b).unwrap().p_value > 0.05 {
                big += 1;
            }
        }
        assert!(big > 170);
    }
}
