//! Small dense regressions: OLS with ridge fallback and logistic regression.

use nalgebra::{DMatrix, DVector};

/// Ridge penalty used when a design is (numerically) singular.
pub const RIDGE_FALLBACK: f64 = 1e-6;

/// Eigenvalue ratio of `XᵀX` below which the design counts as singular.
const SINGULAR_RATIO: f64 = 1e-12;

/// Fitted linear model `β₀ + βᵀx`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearFit {
    /// Intercept first, then one slope per covariate.
    pub coef: Vec<f64>,
    /// True when the ridge fallback was used.
    pub ridge: bool,
}

impl LinearFit {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut v = self.coef[0];
        for (b, xi) in self.coef[1..].iter().zip(x) {
            v += b * xi;
        }
        v
    }
}

fn gram(rows: &[&[f64]], y: &[f64]) -> (DMatrix<f64>, DVector<f64>) {
    let p = rows.first().map_or(0, |r| r.len()) + 1;
    let mut xtx = DMatrix::<f64>::zeros(p, p);
    let mut xty = DVector::<f64>::zeros(p);
    let mut f = vec![0.0; p];
    for (i, r) in rows.iter().enumerate() {
        f[0] = 1.0;
        f[1..].copy_from_slice(r);
        for a in 0..p {
            xty[a] += f[a] * y[i];
            for b in 0..=a {
                xtx[(a, b)] += f[a] * f[b];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            xtx[(b, a)] = xtx[(a, b)];
        }
    }
    (xtx, xty)
}

fn is_singular(xtx: &DMatrix<f64>) -> bool {
    let eig = xtx.clone().symmetric_eigenvalues();
    let max = eig.iter().cloned().fold(0.0_f64, f64::max);
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    max <= 0.0 || min <= SINGULAR_RATIO * max
}

fn solve_spd(mut a: DMatrix<f64>, b: &DVector<f64>, ridge: bool) -> Option<DVector<f64>> {
    if ridge {
        for k in 0..a.nrows() {
            a[(k, k)] += RIDGE_FALLBACK;
        }
    }
    a.cholesky().map(|c| c.solve(b))
}

/// Ordinary least squares of `y` on `[1, x]`.
///
/// Falls back to ridge with penalty [`RIDGE_FALLBACK`] on every coefficient
/// when the Gram matrix is singular or there are fewer rows than parameters.
pub fn ols(rows: &[&[f64]], y: &[f64]) -> LinearFit {
    let (xtx, xty) = gram(rows, y);
    let p = xtx.nrows();
    let ridge = rows.len() < p || is_singular(&xtx);
    let coef = solve_spd(xtx.clone(), &xty, ridge)
        .or_else(|| solve_spd(xtx, &xty, true))
        .map(|v| v.iter().cloned().collect())
        .unwrap_or_else(|| vec![0.0; p]);
    LinearFit { coef, ridge }
}

/// Numerically stable logistic function.
pub fn logistic(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Logistic regression model for a binary response.
#[derive(Debug, Clone, PartialEq)]
pub enum LogitFit {
    Linear(LinearFit),
    /// All responses identical: the probability is that constant.
    Constant(f64),
}

impl LogitFit {
    pub fn prob(&self, x: &[f64]) -> f64 {
        match self {
            LogitFit::Linear(f) => logistic(f.predict(x)),
            LogitFit::Constant(p) => *p,
        }
    }

    pub fn ridge(&self) -> bool {
        matches!(self, LogitFit::Linear(f) if f.ridge)
    }
}

/// Logistic regression of a 0/1 response on `[1, x]` by Newton (IRLS).
///
/// A tiny ridge keeps the Hessian invertible under separation; iterations
/// stop once the largest coefficient change drops below 1e-10 or after 100
/// steps.
pub fn logit(rows: &[&[f64]], y: &[bool]) -> LogitFit {
    let ones = y.iter().filter(|&&v| v).count();
    if ones == 0 {
        return LogitFit::Constant(0.0);
    }
    if ones == y.len() {
        return LogitFit::Constant(1.0);
    }
    let p = rows[0].len() + 1;
    let yf: Vec<f64> = y.iter().map(|&v| f64::from(u8::from(v))).collect();
    let rate = ones as f64 / y.len() as f64;
    let mut beta = vec![0.0; p];
    beta[0] = (rate / (1.0 - rate)).ln();
    let mut ridge = false;
    let mut f = vec![0.0; p];
    for _ in 0..100 {
        let mut h = DMatrix::<f64>::zeros(p, p);
        let mut g = DVector::<f64>::zeros(p);
        for (r, &yi) in rows.iter().zip(&yf) {
            f[0] = 1.0;
            f[1..].copy_from_slice(r);
            let eta: f64 = f.iter().zip(&beta).map(|(a, b)| a * b).sum();
            let mu = logistic(eta);
            let wgt = mu * (1.0 - mu);
            for a in 0..p {
                g[a] += (yi - mu) * f[a];
                for b in 0..=a {
                    h[(a, b)] += wgt * f[a] * f[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                h[(b, a)] = h[(a, b)];
            }
            h[(a, a)] += 1e-8;
        }
        if is_singular(&h) {
            ridge = true;
        }
        let step = match solve_spd(h.clone(), &g, ridge).or_else(|| solve_spd(h, &g, true)) {
            Some(s) => s,
            None => break,
        };
        let mut change = 0.0_f64;
        for a in 0..p {
            let s = step[a].clamp(-10.0, 10.0);
            beta[a] += s;
            change = change.max(s.abs());
        }
        if change < 1e-10 {
            break;
        }
    }
    LogitFit::Linear(LinearFit { coef: beta, ridge })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ols_recovers_exact_line() {
        let xs: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let rows: Vec<&[f64]> = xs.iter().map(|v| v.as_slice()).collect();
        let y: Vec<f64> = xs.iter().map(|v| 1.5 - 2.0 * v[0] + 0.25 * v[1]).collect();
        let fit = ols(&rows, &y);
        assert!(!fit.ridge);
        for (a, b) in fit.coef.iter().zip([1.5, -2.0, 0.25]) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn ols_flags_collinear_design() {
        let xs: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 2.0 * i as f64]).collect();
        let rows: Vec<&[f64]> = xs.iter().map(|v| v.as_slice()).collect();
        let y: Vec<f64> = xs.iter().map(|v| v[0]).collect();
        let fit = ols(&rows, &y);
        assert!(fit.ridge);
        assert!(fit.coef.iter().all(|c| c.is_finite()));
        for (r, yi) in rows.iter().zip(&y) {
            assert!((fit.predict(r) - yi).abs() < 1e-4);
        }
    }

    #[test]
    fn logistic_is_symmetric_and_saturates_finitely() {
        assert_eq!(logistic(0.0), 0.5);
        assert!((logistic(3.0_f64.ln()) - 0.75).abs() < 1e-15);
        assert!(logistic(800.0) == 1.0 && logistic(-800.0) >= 0.0);
        assert!((logistic(2.3) + logistic(-2.3) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn logit_recovers_coefficients() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let xs: Vec<Vec<f64>> = (0..20000).map(|_| vec![rng.random_range(-2.0..2.0)]).collect();
        let y: Vec<bool> = xs
            .iter()
            .map(|x| rng.random::<f64>() < logistic(-0.5 + 1.2 * x[0]))
            .collect();
        let rows: Vec<&[f64]> = xs.iter().map(|v| v.as_slice()).collect();
        match logit(&rows, &y) {
            LogitFit::Linear(f) => {
                assert!((f.coef[0] + 0.5).abs() < 0.08, "{:?}", f.coef);
                assert!((f.coef[1] - 1.2).abs() < 0.08, "{:?}", f.coef);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn logit_constant_response() {
        let xs = [[0.0], [1.0]];
        let rows: Vec<&[f64]> = xs.iter().map(|v| v.as_slice()).collect();
        assert_eq!(logit(&rows, &[false, false]).prob(&[3.0]), 0.0);
        assert_eq!(logit(&rows, &[true, true]).prob(&[3.0]), 1.0);
    }
}
