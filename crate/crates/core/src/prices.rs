//! Capacity prices for the penalized Gibbs equations.
//!
//! Every constrained solver in this crate has the same shape. For fixed
//! geometry, the relaxed decision variables follow a Gibbs law whose costs
//! are shifted by one price per constrained resource,
//!
//! ```text
//! lambda_j = beta' * theta * exp(theta * (usage_j - cap_j)),
//! ```
//!
//! and `usage` is itself a linear function of that Gibbs law. The penalized
//! free energy is strictly convex in the relaxed variables, so the prices
//! are the unique maximizer of the concave dual
//!
//! ```text
//! Phi(lambda) = -L(lambda) - sum_j lambda_j (cap_j + (ln(lambda_j / kappa) - 1) / theta),
//! ```
//!
//! with `L = sum_i rho_i ln Z_i(lambda)` and `kappa = beta' * theta`. Its
//! gradient is the self-consistency gap `usage - cap - ln(lambda / kappa) / theta`.
//! We run Newton in `eta = ln lambda`, with backtracking on `Phi`.

use nalgebra::{DMatrix, DVector};

use crate::anneal::{damped_fixed_point, FixedPointConfig, PenaltyConfig};
use crate::error::{Error, Result};

pub(crate) struct PricedEval {
    /// `sum_i rho_i ln Z_i(lambda)`.
    pub log_partition: f64,
    /// Usage of every priced resource, in price order.
    pub usage: Vec<f64>,
}

pub(crate) trait PricedModel {
    fn dim(&self) -> usize;

    fn evaluate(&self, prices: &[f64]) -> Result<PricedEval>;

    /// `d usage_j / d ln(lambda_k)`. Forward differences unless overridden.
    fn usage_log_jacobian(&self, prices: &[f64], at: &PricedEval) -> Result<DMatrix<f64>> {
        let m = self.dim();
        let mut jac = DMatrix::zeros(m, m);
        let h: f64 = 1e-6;
        let mut shifted = prices.to_vec();
        for k in 0..m {
            shifted[k] = prices[k] * h.exp();
            let up = self.evaluate(&shifted)?;
            for j in 0..m {
                jac[(j, k)] = (up.usage[j] - at.usage[j]) / h;
            }
            shifted[k] = prices[k];
        }
        Ok(jac)
    }
}

pub(crate) struct PriceSolution {
    pub prices: Vec<f64>,
    pub gap: f64,
    pub iterations: usize,
}

const GAP_TOL: f64 = 1e-14;
const MAX_NEWTON: usize = 100;
const MAX_LOG_STEP: f64 = 20.0;

struct Dual<'a> {
    caps: &'a [f64],
    ln_kappa: f64,
    theta: f64,
    clamp: f64,
}

impl Dual<'_> {
    fn prices(&self, eta: &[f64]) -> Vec<f64> {
        eta.iter().map(|e| e.exp()).collect()
    }

    fn clamp_eta(&self, e: f64) -> f64 {
        e.clamp(self.ln_kappa - self.clamp, self.ln_kappa + self.clamp)
    }

    fn gap(&self, eta: &[f64], usage: &[f64]) -> Vec<f64> {
        (0..eta.len())
            .map(|j| usage[j] - self.caps[j] - (eta[j] - self.ln_kappa) / self.theta)
            .collect()
    }

    fn objective(&self, eta: &[f64], eval: &PricedEval) -> f64 {
        let conj: f64 = (0..eta.len())
            .map(|j| {
                let lam = eta[j].exp();
                lam * (self.caps[j] + (eta[j] - self.ln_kappa - 1.0) / self.theta)
            })
            .sum();
        -eval.log_partition - conj
    }
}

fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, b| a.max(b.abs()))
}

/// Solves for the prices at penalty weight `beta_prime`.
///
/// `warm` seeds the iteration; otherwise the first guess is one plain
/// fixed-point step from zero prices.
pub(crate) fn solve_prices<M: PricedModel>(
    model: &M,
    caps: &[f64],
    beta_prime: f64,
    penalty: &PenaltyConfig,
    warm: Option<&[f64]>,
) -> Result<PriceSolution> {
    let m = model.dim();
    debug_assert_eq!(caps.len(), m);
    if m == 0 || beta_prime == 0.0 {
        return Ok(PriceSolution {
            prices: vec![0.0; m],
            gap: 0.0,
            iterations: 0,
        });
    }
    let dual = Dual {
        caps,
        ln_kappa: (beta_prime * penalty.theta).ln(),
        theta: penalty.theta,
        clamp: penalty.exponent_clamp,
    };

    let mut eta: Vec<f64> = match warm {
        Some(w) if w.len() == m && w.iter().all(|v| *v > 0.0 && v.is_finite()) => {
            w.iter().map(|v| dual.clamp_eta(v.ln())).collect()
        }
        _ => {
            let free = model.evaluate(&vec![0.0; m])?;
            (0..m)
                .map(|j| dual.clamp_eta(dual.ln_kappa + penalty.theta * (free.usage[j] - caps[j])))
                .collect()
        }
    };

    let mut eval = model.evaluate(&dual.prices(&eta))?;
    let mut gap = dual.gap(&eta, &eval.usage);
    let mut gap_norm = sup_norm(&gap);
    let mut phi = dual.objective(&eta, &eval);
    let mut iterations = 0;

    while gap_norm > GAP_TOL && iterations < MAX_NEWTON {
        iterations += 1;
        let lam = dual.prices(&eta);
        let mut jac = model.usage_log_jacobian(&lam, &eval)?;
        for j in 0..m {
            jac[(j, j)] -= 1.0 / penalty.theta;
        }
        let rhs = DVector::from_iterator(m, gap.iter().map(|g| -g));
        let step = match jac.clone().lu().solve(&rhs) {
            Some(s) if s.iter().all(|v| v.is_finite()) => s,
            // Diagonal fallback: the `-1/theta` term alone is always invertible.
            _ => DVector::from_iterator(m, gap.iter().map(|g| penalty.theta * g)),
        };
        let scale = (MAX_LOG_STEP / sup_norm(step.as_slice()).max(f64::MIN_POSITIVE)).min(1.0);
        let slope: f64 = (0..m).map(|j| lam[j] * gap[j] * step[j] * scale).sum();

        let mut t = scale;
        let mut accepted = false;
        for _ in 0..40 {
            let trial: Vec<f64> = (0..m)
                .map(|j| dual.clamp_eta(eta[j] + t * step[j]))
                .collect();
            let trial_eval = model.evaluate(&dual.prices(&trial))?;
            let trial_gap = dual.gap(&trial, &trial_eval.usage);
            let trial_norm = sup_norm(&trial_gap);
            let trial_phi = dual.objective(&trial, &trial_eval);
            let armijo = trial_phi >= phi + 1e-4 * (t / scale) * slope;
            // Close to the optimum `Phi` stops resolving progress; then a
            // smaller gap is enough as long as `Phi` does not get worse.
            let flat = trial_phi >= phi - 1e-13 * (1.0 + phi.abs()) && trial_norm < gap_norm;
            if trial_norm.is_finite() && (armijo || flat) {
                eta = trial;
                eval = trial_eval;
                gap = trial_gap;
                gap_norm = trial_norm;
                phi = trial_phi;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }

    if !gap_norm.is_finite() {
        return Err(Error::NoConvergence {
            iterations,
            residual: gap_norm,
        });
    }
    Ok(PriceSolution {
        prices: dual.prices(&eta),
        gap: gap_norm,
        iterations,
    })
}

/// Accepts the Newton solution when its self-consistency gap is within
/// `fp.tol`; otherwise tries damped iteration of `map` from `start`, and
/// keeps the Newton solution if that does not converge either.
///
/// Plain damped iteration is not used as a check on an accurate Newton
/// solution: at large `beta'` the map's gain `theta * lambda` far exceeds
/// one, and it amplifies rounding noise until it diverges. Newton itself
/// can stall near the hard limit, where usage is almost a step function of
/// the prices; its iterate is then still the best point available.
pub(crate) fn settle<F>(
    sol: &PriceSolution,
    start: Vec<f64>,
    map: F,
    fp: &FixedPointConfig,
) -> Result<(Vec<f64>, usize)>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if sol.gap <= fp.tol {
        return Ok((start, 0));
    }
    match damped_fixed_point(map, start.clone(), fp) {
        Err(Error::NoConvergence { iterations, .. }) => Ok((start, iterations)),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Two independent binary choices sharing one priced resource:
    /// each of two items picks resource A (cost a_i) or a free outside option.
    struct Toy {
        costs: Vec<f64>,
        rho: Vec<f64>,
    }

    impl PricedModel for Toy {
        fn dim(&self) -> usize {
            1
        }
        fn evaluate(&self, prices: &[f64]) -> Result<PricedEval> {
            let mut lp = 0.0;
            let mut usage = 0.0;
            for (c, r) in self.costs.iter().zip(&self.rho) {
                let a = -c - prices[0];
                let z = a.exp() + 1.0;
                lp += r * z.ln();
                usage += r * a.exp() / z;
            }
            Ok(PricedEval {
                log_partition: lp,
                usage: vec![usage],
            })
        }
    }

    #[test]
    fn prices_satisfy_self_consistency() {
        let toy = Toy {
            costs: vec![-3.0, -1.0],
            rho: vec![0.5, 0.5],
        };
        let pen = PenaltyConfig::default();
        for beta_p in [1e-2, 1.0, 1e3] {
            let sol = solve_prices(&toy, &[0.3], beta_p, &pen, None).unwrap();
            assert!(sol.gap <= 1e-12, "gap {} after {}", sol.gap, sol.iterations);
            let u = toy.evaluate(&sol.prices).unwrap().usage[0];
            let implied = beta_p * pen.theta * (pen.theta * (u - 0.3)).exp();
            assert!(
                (implied - sol.prices[0]).abs() <= 1e-10 * implied.max(1.0),
                "beta'={beta_p}: {implied} vs {}",
                sol.prices[0]
            );
        }
    }

    #[test]
    fn zero_weight_means_zero_prices() {
        let toy = Toy {
            costs: vec![0.0],
            rho: vec![1.0],
        };
        let sol = solve_prices(&toy, &[0.1], 0.0, &PenaltyConfig::default(), None).unwrap();
        assert_eq!(sol.prices, vec![0.0]);
    }
}
