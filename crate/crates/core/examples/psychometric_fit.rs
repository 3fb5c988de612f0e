//! Detection-threshold estimation: fit a cubic to simulated detection
//! counts, read off the 75% crossing and bootstrap a confidence interval.
//! Then fit a six-parameter logistic to a noisy curve.
//!
//! cargo run --example psychometric_fit

use foveated::calibration::psychometric::{bootstrap_ci, cubic_threshold, fit_cubic, simulate_records, threshold_at};
use foveated::calibration::{fit_logistic, LmConfig, LogisticParams};

fn main() -> foveated::Result<()> {
    let truth = |x: f64| 0.98 - 0.06 * x + 0.0012 * x * x;
    let levels: Vec<f64> = (1..=12).map(f64::from).collect();
    let recs = simulate_records(truth, &levels, 40, 14.0, 7);
    let fit = fit_cubic(&recs)?;
    println!("cubic {:?}, residual mse {:.2e}", fit.coefficients, fit.residual_mse);
    match threshold_at(&fit, 0.75) {
        Some(t) => println!("75% crossing at level {t:.3}"),
        None => println!("no 75% crossing inside the tested range"),
    }
    let ci = bootstrap_ci(&recs, cubic_threshold(0.75), 0.95, 500, 1)?;
    println!("95% CI [{:.3}, {:.3}] ({} failed resamples)", ci.lower, ci.upper, ci.failures);

    let lp = LogisticParams {
        a: 0.5,
        b: 0.9,
        c: 1.0,
        k: 0.98,
        q: 20.0,
        v: 1.0,
    };
    let t: Vec<f64> = (0..30).map(|i| i as f64 * 0.3).collect();
    let y: Vec<f64> = t.iter().enumerate().map(|(i, &x)| lp.eval(x) + if i % 2 == 0 { 0.01 } else { -0.01 }).collect();
    let f = fit_logistic(&t, &y, &LmConfig::default())?;
    println!("logistic fit {:?}, mse {:.2e}", f.params, f.mse);
    Ok(())
}
