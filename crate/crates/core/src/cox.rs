//! Multivariable Cox proportional hazards.
//!
//! Newton-Raphson on the Breslow partial log-likelihood, with step halving
//! whenever a full step would lower the likelihood. Inference is Wald-based:
//! `se = sqrt(diag(I^-1))`, `z = beta / se`, two-sided normal p-values and
//! hazard-ratio intervals `exp(beta +/- 1.96 se)`.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::concordance::cindex_slices;
use crate::{Error, Result};

pub const MAX_ITERATIONS: usize = 50;
pub const SCORE_TOLERANCE: f64 = 1e-8;
const MAX_HALVINGS: usize = 40;
const Z_95: f64 = 1.96;

/// Outcomes plus a row-major covariate matrix with named columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoxData {
    pub times: Vec<f64>,
    pub events: Vec<bool>,
    pub covariates: Vec<Vec<f64>>,
    pub names: Vec<String>,
}

impl CoxData {
    pub fn new(
        times: Vec<f64>,
        events: Vec<bool>,
        covariates: Vec<Vec<f64>>,
        names: Vec<String>,
    ) -> Result<Self> {
        let n = times.len();
        if events.len() != n || covariates.len() != n {
            return Err(Error::Shape(format!(
                "{n} times, {} events, {} covariate rows",
                events.len(),
                covariates.len()
            )));
        }
        if n == 0 {
            return Err(Error::Empty("Cox data"));
        }
        let p = names.len();
        if p == 0 {
            return Err(Error::Empty("covariate names"));
        }
        if let Some(row) = covariates.iter().position(|r| r.len() != p) {
            return Err(Error::Shape(format!(
                "row {row} has {} covariates, expected {p}",
                covariates[row].len()
            )));
        }
        if covariates.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("covariates must be finite".into()));
        }
        if times.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidArgument("times must be finite".into()));
        }
        Ok(Self {
            times,
            events,
            covariates,
            names,
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn num_covariates(&self) -> usize {
        self.names.len()
    }

    /// `X beta` for every row.
    pub fn linear_predictor(&self, beta: &[f64]) -> Vec<f64> {
        self.covariates
            .iter()
            .map(|row| row.iter().zip(beta).map(|(x, b)| x * b).sum())
            .collect()
    }
}

/// A fitted Cox model with Wald inference per covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoxFit {
    pub names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    pub std_errors: Vec<f64>,
    pub hazard_ratios: Vec<f64>,
    pub ci_lower: Vec<f64>,
    pub ci_upper: Vec<f64>,
    pub wald_z: Vec<f64>,
    pub p_values: Vec<f64>,
    pub log_likelihood: f64,
    /// Partial log-likelihood at the start and after every accepted step.
    pub log_likelihood_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

struct Evaluation {
    loglik: f64,
    score: Vec<f64>,
    information: Vec<Vec<f64>>,
}

/// Breslow partial log-likelihood, its gradient and the observed information.
fn evaluate(data: &CoxData, order: &[usize], beta: &[f64]) -> Evaluation {
    let p = beta.len();
    let eta = data.linear_predictor(beta);
    let shift = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);

    let mut s0 = 0.0;
    let mut s1 = vec![0.0; p];
    let mut s2 = vec![vec![0.0; p]; p];
    let mut loglik = 0.0;
    let mut score = vec![0.0; p];
    let mut info = vec![vec![0.0; p]; p];

    let n = order.len();
    let mut start = 0;
    while start < n {
        let t = data.times[order[start]];
        let end = order[start..]
            .iter()
            .position(|&i| data.times[i] != t)
            .map_or(n, |k| start + k);
        for &i in &order[start..end] {
            let w = (eta[i] - shift).exp();
            let x = &data.covariates[i];
            s0 += w;
            for a in 0..p {
                s1[a] += w * x[a];
                for b in 0..=a {
                    s2[a][b] += w * x[a] * x[b];
                }
            }
        }
        for &i in order[start..end].iter().filter(|&&i| data.events[i]) {
            let x = &data.covariates[i];
            loglik += eta[i] - shift - s0.ln();
            for a in 0..p {
                let mean_a = s1[a] / s0;
                score[a] += x[a] - mean_a;
                for b in 0..=a {
                    info[a][b] += s2[a][b] / s0 - mean_a * s1[b] / s0;
                }
            }
        }
        start = end;
    }
    for a in 0..p {
        for b in 0..a {
            info[b][a] = info[a][b];
        }
    }
    Evaluation {
        loglik,
        score,
        information: info,
    }
}

/// Lower-triangular Cholesky factor, or the first pivot that is not positive.
fn cholesky(m: &[Vec<f64>]) -> std::result::Result<Vec<Vec<f64>>, usize> {
    let p = m.len();
    let scale = (0..p).map(|i| m[i][i].abs()).fold(0.0, f64::max).max(1e-300);
    let mut l = vec![vec![0.0; p]; p];
    for j in 0..p {
        let mut d = m[j][j];
        for k in 0..j {
            d -= l[j][k] * l[j][k];
        }
        if d.is_nan() || d <= scale * 1e-12 {
            return Err(j);
        }
        let d = d.sqrt();
        l[j][j] = d;
        for i in j + 1..p {
            let mut s = m[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            l[i][j] = s / d;
        }
    }
    Ok(l)
}

fn cholesky_solve(l: &[Vec<f64>], rhs: &[f64]) -> Vec<f64> {
    let p = l.len();
    let mut y = vec![0.0; p];
    for i in 0..p {
        let s: f64 = (0..i).map(|k| l[i][k] * y[k]).sum();
        y[i] = (rhs[i] - s) / l[i][i];
    }
    let mut x = vec![0.0; p];
    for i in (0..p).rev() {
        let s: f64 = (i + 1..p).map(|k| l[k][i] * x[k]).sum();
        x[i] = (y[i] - s) / l[i][i];
    }
    x
}

fn cholesky_inverse(l: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let p = l.len();
    let mut inv = vec![vec![0.0; p]; p];
    for j in 0..p {
        let mut e = vec![0.0; p];
        e[j] = 1.0;
        let col = cholesky_solve(l, &e);
        for i in 0..p {
            inv[i][j] = col[i];
        }
    }
    // Symmetrize against rounding.
    for i in 0..p {
        for j in 0..i {
            let m = 0.5 * (inv[i][j] + inv[j][i]);
            inv[i][j] = m;
            inv[j][i] = m;
        }
    }
    inv
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Fits a Cox model by Newton-Raphson.
///
/// Stops when `max |score| < 1e-8` or after 50 iterations; in the latter case
/// `converged` is false and the last estimates are returned.
pub fn fit(data: &CoxData) -> Result<CoxFit> {
    if !data.events.iter().any(|&e| e) {
        return Err(Error::NoEvents);
    }
    let p = data.num_covariates();
    for j in 0..p {
        let first = data.covariates[0][j];
        if data.covariates.iter().all(|r| r[j] == first) {
            return Err(Error::Singular {
                covariate: data.names[j].clone(),
            });
        }
    }

    let mut order: Vec<usize> = (0..data.len()).collect();
    order.sort_by(|&a, &b| data.times[b].total_cmp(&data.times[a]));

    let singular = |j: usize| Error::Singular {
        covariate: data.names[j].clone(),
    };

    let mut beta = vec![0.0; p];
    let mut current = evaluate(data, &order, &beta);
    let mut history = vec![current.loglik];
    let mut iterations = 0;
    let mut converged = max_abs(&current.score) < SCORE_TOLERANCE;

    while !converged && iterations < MAX_ITERATIONS {
        iterations += 1;
        let l = cholesky(&current.information).map_err(singular)?;
        let step = cholesky_solve(&l, &current.score);

        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let trial: Vec<f64> = beta.iter().zip(&step).map(|(b, s)| b + scale * s).collect();
            let eval = evaluate(data, &order, &trial);
            if eval.loglik.is_finite() && eval.loglik >= current.loglik {
                accepted = Some((trial, eval));
                break;
            }
            scale *= 0.5;
        }
        let Some((next_beta, next)) = accepted else {
            // No ascent direction left at machine precision.
            break;
        };
        beta = next_beta;
        current = next;
        history.push(current.loglik);
        converged = max_abs(&current.score) < SCORE_TOLERANCE;
    }

    let l = cholesky(&current.information).map_err(singular)?;
    let covariance = cholesky_inverse(&l);
    let std_errors: Vec<f64> = (0..p).map(|j| covariance[j][j].sqrt()).collect();
    let normal = Normal::standard();
    let wald_z: Vec<f64> = beta.iter().zip(&std_errors).map(|(b, s)| b / s).collect();
    let p_values = wald_z
        .iter()
        .map(|z| (2.0 * normal.sf(z.abs())).min(1.0))
        .collect();

    Ok(CoxFit {
        names: data.names.clone(),
        hazard_ratios: beta.iter().map(|b| b.exp()).collect(),
        ci_lower: beta
            .iter()
            .zip(&std_errors)
            .map(|(b, s)| (b - Z_95 * s).exp())
            .collect(),
        ci_upper: beta
            .iter()
            .zip(&std_errors)
            .map(|(b, s)| (b + Z_95 * s).exp())
            .collect(),
        coefficients: beta,
        covariance,
        std_errors,
        wald_z,
        p_values,
        log_likelihood: current.loglik,
        log_likelihood_history: history,
        iterations,
        converged,
    })
}

/// Harrell's c-index of the fitted linear predictor.
pub fn joint_cindex(fit: &CoxFit, data: &CoxData) -> Result<f64> {
    if fit.coefficients.len() != data.num_covariates() {
        return Err(Error::Shape(format!(
            "fit has {} coefficients, data has {} covariates",
            fit.coefficients.len(),
            data.num_covariates()
        )));
    }
    let eta = data.linear_predictor(&fit.coefficients);
    cindex_slices(&data.times, &data.events, &eta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CoxData {
        // Hand-checkable data with one tie.
        CoxData::new(
            vec![1.0, 2.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            vec![true, true, false, true, false, true, true],
            vec![
                vec![1.0],
                vec![0.0],
                vec![1.0],
                vec![1.0],
                vec![0.0],
                vec![0.0],
                vec![0.0],
            ],
            vec!["x".into()],
        )
        .unwrap()
    }

    #[test]
    fn score_vanishes_at_optimum() {
        let d = small();
        let f = fit(&d).unwrap();
        assert!(f.converged);
        let order = {
            let mut o: Vec<usize> = (0..d.len()).collect();
            o.sort_by(|&a, &b| d.times[b].total_cmp(&d.times[a]));
            o
        };
        let e = evaluate(&d, &order, &f.coefficients);
        assert!(max_abs(&e.score) < 1e-8);
        // Finite-difference check of the score at a non-optimal point.
        let b = [0.3];
        let h = 1e-6;
        let up = evaluate(&d, &order, &[b[0] + h]).loglik;
        let dn = evaluate(&d, &order, &[b[0] - h]).loglik;
        let g = evaluate(&d, &order, &b).score[0];
        assert!(((up - dn) / (2.0 * h) - g).abs() < 1e-6);
    }

    #[test]
    fn breslow_loglik_by_hand() {
        // At beta = 0 each event contributes -log |risk set|.
        let d = small();
        let order: Vec<usize> = {
            let mut o: Vec<usize> = (0..d.len()).collect();
            o.sort_by(|&a, &b| d.times[b].total_cmp(&d.times[a]));
            o
        };
        let ll = evaluate(&d, &order, &[0.0]).loglik;
        let expected = -(7f64.ln() + 6f64.ln() + 4f64.ln() + 2f64.ln() + 1f64.ln());
        assert!((ll - expected).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let mut d = small();
        d.events = vec![false; 7];
        assert_eq!(fit(&d), Err(Error::NoEvents));

        let c = CoxData::new(
            vec![1.0, 2.0, 3.0],
            vec![true, true, false],
            vec![vec![1.0, 0.5], vec![2.0, 0.5], vec![0.0, 0.5]],
            vec!["a".into(), "dlrs".into()],
        )
        .unwrap();
        assert_eq!(
            fit(&c),
            Err(Error::Singular {
                covariate: "dlrs".into()
            })
        );

        let collinear = CoxData::new(
            vec![1.0, 2.0, 3.0, 4.0],
            vec![true, true, false, true],
            vec![vec![1.0, 2.0], vec![2.0, 4.0], vec![0.0, 0.0], vec![3.0, 6.0]],
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        assert_eq!(
            fit(&collinear),
            Err(Error::Singular {
                covariate: "b".into()
            })
        );
    }

    #[test]
    fn duplication_leaves_beta_unchanged() {
        let d = small();
        let f1 = fit(&d).unwrap();
        let mut d2 = d.clone();
        d2.times.extend(d.times.clone());
        d2.events.extend(d.events.clone());
        d2.covariates.extend(d.covariates.clone());
        let f2 = fit(&d2).unwrap();
        assert!((f1.coefficients[0] - f2.coefficients[0]).abs() < 1e-9);
    }

    #[test]
    fn separated_data_diverges_monotonically() {
        let d = CoxData::new(
            vec![1.0, 2.0, 3.0, 4.0],
            vec![true, true, true, true],
            vec![vec![4.0], vec![3.0], vec![2.0], vec![1.0]],
            vec!["x".into()],
        )
        .unwrap();
        let f = fit(&d).unwrap();
        assert!(f.coefficients[0] > 5.0);
        for w in f.log_likelihood_history.windows(2) {
            assert!(w[1] >= w[0]);
        }
    }

    #[test]
    fn ci_brackets_hr() {
        let f = fit(&small()).unwrap();
        assert!(f.ci_lower[0] <= f.hazard_ratios[0] && f.hazard_ratios[0] <= f.ci_upper[0]);
        assert!((0.0..=1.0).contains(&f.p_values[0]));
    }
}
