//! Six-parameter generalized logistic and damped least-squares fitting.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `y(t) = a + (k − a) / (c + q·e^{−b·t})^{1/v}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub k: f64,
    pub q: f64,
    pub v: f64,
}

impl LogisticParams {
    /// The standard sigmoid `1/(1 + e^{−t})`.
    pub const STANDARD: LogisticParams = LogisticParams {
        a: 0.0,
        b: 1.0,
        c: 1.0,
        k: 1.0,
        q: 1.0,
        v: 1.0,
    };

    pub fn to_vec(&self) -> [f64; 6] {
        [self.a, self.b, self.c, self.k, self.q, self.v]
    }

    pub fn from_slice(p: &[f64]) -> Self {
        LogisticParams {
            a: p[0],
            b: p[1],
            c: p[2],
            k: p[3],
            q: p[4],
            v: p[5],
        }
    }

    /// `c + q·e^{−b·t}`; must stay positive.
    pub fn denominator_base(&self, t: f64) -> f64 {
        self.c + self.q * (-self.b * t).exp()
    }

    pub fn eval(&self, t: f64) -> f64 {
        self.a + (self.k - self.a) / self.denominator_base(t).powf(1.0 / self.v)
    }

    /// Whether the formula is defined on `[lo, hi]`.
    pub fn valid_on(&self, lo: f64, hi: f64) -> bool {
        self.v != 0.0
            && self.to_vec().iter().all(|p| p.is_finite())
            && self.denominator_base(lo) > 0.0
            && self.denominator_base(hi) > 0.0
    }

    /// Value and derivatives with respect to `(a, b, c, k, q, v)` and `t`.
    pub fn eval_with_grad(&self, t: f64) -> (f64, [f64; 6], f64) {
        let LogisticParams { a, b, c, k, q, v } = *self;
        let e = (-b * t).exp();
        let d = c + q * e;
        let p = d.powf(-1.0 / v);
        let y = a + (k - a) * p;
        let dy_dd = (k - a) * (-1.0 / v) * p / d;
        let grads = [
            1.0 - p,
            dy_dd * (-q * t * e),
            dy_dd,
            p,
            dy_dd * e,
            (k - a) * p * d.ln() / (v * v),
        ];
        (y, grads, dy_dd * (-q * b * e))
    }

    /// Smallest and largest asymptote.
    pub fn envelope(&self) -> (f64, f64) {
        (self.a.min(self.k), self.a.max(self.k))
    }
}

/// Result of a least-squares fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    pub params: LogisticParams,
    /// Mean squared prediction error on the fitted data.
    pub mse: f64,
    pub restarts: usize,
}

/// Settings of the damped least-squares solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub max_iters: usize,
    pub restarts: usize,
    pub seed: u64,
    pub initial_damping: f64,
    /// Stop when the relative decrease of the cost falls below this.
    pub tol: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            max_iters: 300,
            restarts: 32,
            seed: 0,
            initial_damping: 1e-3,
            tol: 1e-12,
        }
    }
}

/// Levenberg–Marquardt on `residuals(p) → (r, J)` where `J` is `n×m`.
/// `project` is applied after every trial step (bounds, constraints).
/// Returns the final parameters and cost `Σ r²`, or `None` if the start is
/// infeasible.
pub fn levenberg_marquardt(
    start: &[f64],
    residuals: impl Fn(&[f64]) -> Option<(Vec<f64>, DMatrix<f64>)>,
    project: impl Fn(&mut [f64]),
    cfg: &LmConfig,
) -> Option<(Vec<f64>, f64)> {
    let mut p = start.to_vec();
    project(&mut p);
    let (mut r, mut j) = residuals(&p)?;
    let mut cost: f64 = r.iter().map(|v| v * v).sum();
    if !cost.is_finite() {
        return None;
    }
    let mut lambda = cfg.initial_damping;
    for _ in 0..cfg.max_iters {
        let rv = DVector::from_column_slice(&r);
        let jtj = j.transpose() * &j;
        let g = j.transpose() * rv;
        let mut improved = false;
        for _ in 0..20 {
            let mut a = jtj.clone();
            for i in 0..a.nrows() {
                a[(i, i)] += lambda * (jtj[(i, i)].abs() + 1e-12);
            }
            let Some(step) = a.lu().solve(&(-&g)) else {
                lambda *= 10.0;
                continue;
            };
            let mut trial: Vec<f64> = p.iter().zip(step.iter()).map(|(x, s)| x + s).collect();
            project(&mut trial);
            if let Some((tr, tj)) = residuals(&trial) {
                let tc: f64 = tr.iter().map(|v| v * v).sum();
                if tc.is_finite() && tc < cost {
                    let rel = (cost - tc) / cost.max(f64::MIN_POSITIVE);
                    p = trial;
                    r = tr;
                    j = tj;
                    cost = tc;
                    lambda = (lambda * 0.3).max(1e-15);
                    improved = true;
                    if rel < cfg.tol {
                        return Some((p, cost));
                    }
                    break;
                }
            }
            lambda *= 10.0;
            if lambda > 1e16 {
                break;
            }
        }
        if !improved || cost == 0.0 {
            break;
        }
    }
    Some((p, cost))
}

fn logistic_residuals(t: &[f64], y: &[f64], p: &[f64]) -> Option<(Vec<f64>, DMatrix<f64>)> {
    let lp = LogisticParams::from_slice(p);
    let n = t.len();
    let mut r = Vec::with_capacity(n);
    let mut j = DMatrix::zeros(n, 6);
    for (i, (&ti, &yi)) in t.iter().zip(y).enumerate() {
        if !(lp.denominator_base(ti) > 0.0) || lp.v.abs() < 1e-9 {
            return None;
        }
        let (v, g, _) = lp.eval_with_grad(ti);
        if !v.is_finite() || g.iter().any(|x| !x.is_finite()) {
            return None;
        }
        r.push(v - yi);
        for (c, gv) in g.iter().enumerate() {
            j[(i, c)] = *gv;
        }
    }
    Some((r, j))
}

/// Random start informed by the data range.
pub(crate) fn random_start(t: &[f64], y: &[f64], rng: &mut impl Rng) -> [f64; 6] {
    let (tmin, tmax) = t.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let (ymin, ymax) = y.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = (tmax - tmin).max(1e-12);
    let yspan = (ymax - ymin).max(1e-3);
    // Increasing or decreasing trend from the extreme points.
    let corr = crate::calibration::pearson(t, y).unwrap_or(0.0);
    let (lo, hi) = if corr >= 0.0 { (ymin, ymax) } else { (ymax, ymin) };
    let b = 10f64.powf(rng.random_range(-0.5..1.5)) / span;
    let v = 10f64.powf(rng.random_range(-1.0..1.0));
    let mid = tmin + span * rng.random_range(0.2..0.8);
    [
        lo + rng.random_range(-0.1..0.1) * yspan,
        b,
        1.0,
        hi + rng.random_range(-0.1..0.1) * yspan,
        (b * mid).clamp(-50.0, 50.0).exp(),
        v,
    ]
}

/// Fit the six-parameter logistic to `(t, y)` by minimizing mean squared
/// error over `cfg.restarts` random starts; the best restart wins.
pub fn fit_logistic(t: &[f64], y: &[f64], cfg: &LmConfig) -> Result<LogisticFit> {
    if t.len() != y.len() {
        return Err(Error::shape(format!("{} scores vs {} probabilities", t.len(), y.len())));
    }
    if t.len() < 6 {
        return Err(Error::invalid(format!("need at least 6 points for 6 parameters, got {}", t.len())));
    }
    if t.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logistic fit input".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut tried = 0;
    let mut starts: Vec<[f64; 6]> = Vec::with_capacity(cfg.restarts);
    for _ in 0..cfg.restarts.max(1) {
        starts.push(random_start(t, y, &mut rng));
    }
    for s in starts {
        tried += 1;
        let Some((p, cost)) = levenberg_marquardt(&s, |p| logistic_residuals(t, y, p), |_| {}, cfg) else {
            continue;
        };
        if best.as_ref().is_none_or(|(_, c)| cost < *c) {
            best = Some((p, cost));
        }
    }
    match best {
        Some((p, cost)) => Ok(LogisticFit {
            params: LogisticParams::from_slice(&p),
            mse: cost / t.len() as f64,
            restarts: tried,
        }),
        None => Err(Error::Convergence(format!("all {tried} logistic restarts failed"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formula_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let p = LogisticParams {
                a: rng.random_range(-1.0..1.0),
                b: rng.random_range(-3.0..3.0),
                c: rng.random_range(0.1..2.0),
                k: rng.random_range(-1.0..2.0),
                q: rng.random_range(0.0..2.0),
                v: rng.random_range(0.2..3.0),
            };
            let t: f64 = rng.random_range(-2.0..2.0);
            let oracle = p.a + (p.k - p.a) * (-(p.c + p.q * (-p.b * t).exp()).ln() / p.v).exp();
            let got = p.eval(t);
            assert!((got - oracle).abs() <= 1e-12 * oracle.abs().max(1.0), "{got} vs {oracle}");
        }
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let p = LogisticParams {
            a: 0.1,
            b: 1.7,
            c: 0.8,
            k: 0.9,
            q: 1.3,
            v: 0.6,
        };
        let t = 0.4;
        let (_, g, gt) = p.eval_with_grad(t);
        let base = p.to_vec();
        for i in 0..6 {
            let h = 1e-6;
            let mut up = base;
            let mut dn = base;
            up[i] += h;
            dn[i] -= h;
            let fd = (LogisticParams::from_slice(&up).eval(t) - LogisticParams::from_slice(&dn).eval(t)) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-7, "param {i}: {fd} vs {}", g[i]);
        }
        let fd = (p.eval(t + 1e-6) - p.eval(t - 1e-6)) / 2e-6;
        assert!((fd - gt).abs() < 1e-7);
    }

    #[test]
    fn standard_sigmoid() {
        assert_eq!(LogisticParams::STANDARD.eval(0.0), 0.5);
        assert!((LogisticParams::STANDARD.eval(2.0) - 1.0 / (1.0 + (-2.0f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn recovers_known_curve() {
        let truth = LogisticParams {
            a: 0.0,
            b: 2.0,
            c: 1.0,
            k: 1.0,
            q: 1.0,
            v: 1.0,
        };
        let t: Vec<f64> = (0..40).map(|i| -3.0 + 6.0 * i as f64 / 39.0).collect();
        let y: Vec<f64> = t.iter().map(|&x| truth.eval(x)).collect();
        let fit = fit_logistic(&t, &y, &LmConfig::default()).unwrap();
        let grid: Vec<f64> = (0..200).map(|i| -3.0 + 6.0 * i as f64 / 199.0).collect();
        let curve_mse = grid.iter().map(|&x| (fit.params.eval(x) - truth.eval(x)).powi(2)).sum::<f64>() / 200.0;
        assert!(curve_mse < 1e-3, "{curve_mse}");
        assert!(fit.mse < 1e-8, "{}", fit.mse);
    }

    #[test]
    fn flat_data_gives_flat_curve() {
        let t: Vec<f64> = (0..12).map(|i| i as f64 * 0.3).collect();
        let y = vec![0.42; 12];
        let fit = fit_logistic(&t, &y, &LmConfig::default()).unwrap();
        for &x in &t {
            assert!((fit.params.eval(x) - 0.42).abs() < 1e-6);
        }
    }

    #[test]
    fn too_few_points_rejected() {
        assert!(fit_logistic(&[0.0; 5], &[0.5; 5], &LmConfig::default()).is_err());
    }
}
