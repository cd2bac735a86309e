// The Student-t distribution behind the certainty test.

use ctxdrop::uncertainty::{paired_t_test, t_cdf, t_two_sided_p};
use ctxdrop::Result;

pub fn run_example() -> Result<()> {
    for df in [1.0, 5.0, 19.0, 200.0] {
        println!(
            "df {df:>5}: F(-2) = {:.6}  F(0) = {:.1}  two-sided p(|T| > 2.093) = {:.4}",
            t_cdf(-2.0, df)?,
            t_cdf(0.0, df)?,
            t_two_sided_p(2.093, df)?
        );
    }
    // With one degree of freedom the t distribution is Cauchy.
    let x: f64 = 1.7;
    println!("Cauchy check: {:.3e}", (t_cdf(x, 1.0)? - (0.5 + x.atan() / std::f64::consts::PI)).abs());

    let a = [0.70, 0.65, 0.72, 0.69, 0.74];
    let b = [0.20, 0.25, 0.18, 0.22, 0.19];
    let r = paired_t_test(&a, &b)?;
    println!("paired test: t = {:.3}, df = {}, p = {:.2e}", r.t_stat, r.df, r.p_value);

    // Identical columns have no spread; the verdict is flagged, not NaN.
    let r = paired_t_test(&[0.5; 4], &[0.5; 4])?;
    println!("no spread: p = {}, degenerate = {}", r.p_value, r.degenerate);
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example()
}
