//! Exhaustive reference solvers.
//!
//! Everything here is computed from the instance data alone, by literal
//! enumeration, so that the annealing solvers can be checked against it.
//! Search spaces are guarded; exceeding a guard yields [`Error::TooLarge`].

use std::cmp::Ordering;
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::anneal::PenaltyConfig;
use crate::error::{Error, Result};
use crate::flp::FlpInstance;
use crate::flpo::FlpoInstance;
use crate::geometry::Points;
use crate::lmdp::LmdpInstance;

pub const FLP_BOUND: f64 = 1e7;
pub const FLPO_BOUND: f64 = 1e6;
pub const LMDP_BOUND: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Witness {
    /// Facility index per node, with the cluster means as locations.
    Assignment {
        assignment: Vec<usize>,
        locations: Points,
    },
    /// Per package the `(vehicle, route position)` departures it rides, or
    /// `None` when it cannot reach its destination.
    Plan(Vec<Option<Vec<(usize, usize)>>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub optimum: f64,
    pub witness: Witness,
    /// Number of complete candidates examined.
    pub searched: u64,
    pub elapsed_secs: f64,
}

fn guard(size: f64, bound: f64) -> Result<()> {
    if size > bound {
        Err(Error::TooLarge { size, bound })
    } else {
        Ok(())
    }
}

/// Optimal hard assignment by enumerating all `M^N` assignments; each
/// cluster is served from its weighted mean. With `capacities_on`, only
/// assignments whose cluster weights stay within the capacities count.
pub fn oracle_flp(inst: &FlpInstance, capacities_on: bool) -> Result<OracleReport> {
    let start = Instant::now();
    let n = inst.nodes().len();
    let m = inst.facility_count();
    guard((m as f64).powi(n as i32), FLP_BOUND)?;
    let dim = inst.nodes().dim();
    let rho = inst.weights();
    let caps = if capacities_on {
        inst.capacities()
    } else {
        None
    };

    let mut assign = vec![0usize; n];
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut searched = 0u64;
    loop {
        searched += 1;
        let mut mass = vec![0.0; m];
        let mut sums = vec![0.0; m * dim];
        for i in 0..n {
            let j = assign[i];
            mass[j] += rho[i];
            for (k, x) in inst.nodes().row(i).iter().enumerate() {
                sums[j * dim + k] += rho[i] * x;
            }
        }
        let admissible = caps.is_none_or(|c| mass.iter().zip(c).all(|(u, c)| *u <= c + 1e-12));
        if admissible {
            let mut cost = 0.0;
            for i in 0..n {
                let j = assign[i];
                if mass[j] > 0.0 {
                    for (k, x) in inst.nodes().row(i).iter().enumerate() {
                        let y = sums[j * dim + k] / mass[j];
                        cost += rho[i] * (x - y) * (x - y);
                    }
                }
            }
            if best.as_ref().is_none_or(|(b, _)| cost < b - 1e-12) {
                best = Some((cost, assign.clone()));
            }
        }
        // Next assignment, last node fastest.
        let mut pos = n;
        let mut done = true;
        while pos > 0 {
            pos -= 1;
            assign[pos] += 1;
            if assign[pos] < m {
                done = false;
                break;
            }
            assign[pos] = 0;
        }
        if done {
            break;
        }
    }
    let (optimum, assignment) =
        best.ok_or_else(|| Error::Infeasible("no assignment satisfies the capacities".into()))?;
    let mut rows = vec![vec![0.0; dim]; m];
    let mut mass = vec![0.0; m];
    for (i, &j) in assignment.iter().enumerate() {
        mass[j] += rho[i];
        for (k, x) in inst.nodes().row(i).iter().enumerate() {
            rows[j][k] += rho[i] * x;
        }
    }
    for j in 0..m {
        if mass[j] > 0.0 {
            rows[j].iter_mut().for_each(|v| *v /= mass[j]);
        } else {
            rows[j] = inst.centroid();
        }
    }
    Ok(OracleReport {
        optimum,
        witness: Witness::Assignment {
            assignment,
            locations: Points::from_rows(&rows)?,
        },
        searched,
        elapsed_secs: start.elapsed().as_secs_f64(),
    })
}

/// Exact Gibbs distribution over all `(M+1)^M` paths of every node.
#[derive(Debug, Clone, PartialEq)]
pub struct FlpoPathReport {
    /// Every path, steps `0..M` being facilities and `M` the destination.
    pub paths: Vec<Vec<usize>>,
    /// `probabilities[i][g]`: probability of `paths[g]` for node `i`.
    pub probabilities: Vec<Vec<f64>>,
}

impl FlpoPathReport {
    /// Probability that node `i` takes step `s` first.
    pub fn first_step(&self, node: usize, s: usize) -> f64 {
        self.paths
            .iter()
            .zip(&self.probabilities[node])
            .filter(|(g, _)| g[0] == s)
            .map(|(_, p)| p)
            .sum()
    }

    /// `P(g_{t+1} = to | g_t = from)` for node `i` (`t` counted from 1),
    /// or `None` when node `i` never sits at `from` after `t` steps.
    pub fn conditional(&self, node: usize, t: usize, from: usize, to: usize) -> Option<f64> {
        let (mut num, mut den) = (0.0, 0.0);
        for (g, p) in self.paths.iter().zip(&self.probabilities[node]) {
            if g[t - 1] == from {
                den += p;
                if g[t] == to {
                    num += p;
                }
            }
        }
        (den > 0.0).then(|| num / den)
    }

    /// Weighted expected number of visits to each facility.
    pub fn usage(&self, weights: &[f64], facility_count: usize) -> Vec<f64> {
        let mut usage = vec![0.0; facility_count];
        for (probs, r) in self.probabilities.iter().zip(weights) {
            for (g, p) in self.paths.iter().zip(probs) {
                for &s in g {
                    if s < facility_count {
                        usage[s] += r * p;
                    }
                }
            }
        }
        usage
    }
}

/// All `M`-step paths over `k` steps, in lexicographic order.
pub fn all_paths(k: usize, len: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = vec![Vec::new()];
    for _ in 0..len {
        let mut next = Vec::with_capacity(out.len() * k);
        for p in &out {
            for s in 0..k {
                let mut q = p.clone();
                q.push(s);
                next.push(q);
            }
        }
        out = next;
    }
    out
}

/// Literal path sums for fixed facility locations: every path of node `i`
/// has weight
/// `exp(-beta * length(i, g) - sum_{steps into f_j} beta' theta e^{theta (C_j - w_j)})`,
/// normalized over all paths. `usage` supplies the `C_j`; it is ignored
/// (no prices) when the instance has no capacities or `beta_prime` is zero.
pub fn oracle_flpo_paths(
    inst: &FlpoInstance,
    locations: &Points,
    beta: f64,
    beta_prime: f64,
    penalty: &PenaltyConfig,
    usage: &[f64],
) -> Result<FlpoPathReport> {
    let m = inst.facility_count();
    guard(((m + 1) as f64).powi(m as i32), FLPO_BOUND)?;
    let z = inst.destination();
    let at = |s: usize| if s == m { z } else { locations.row(s) };
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let prices: Vec<f64> = match inst.capacities() {
        Some(w) if beta_prime > 0.0 => (0..m)
            .map(|j| {
                let e = (penalty.theta * (usage[j] - w[j]))
                    .clamp(-penalty.exponent_clamp, penalty.exponent_clamp);
                beta_prime * penalty.theta * e.exp()
            })
            .collect(),
        _ => vec![0.0; m],
    };
    let paths = all_paths(m + 1, m);
    let mut probabilities = Vec::with_capacity(inst.nodes().len());
    for x in inst.nodes().rows() {
        let logw: Vec<f64> = paths
            .iter()
            .map(|g| {
                let mut len = sq(x, at(g[0]));
                for t in 1..m {
                    len += sq(at(g[t - 1]), at(g[t]));
                }
                len += sq(at(g[m - 1]), z);
                let toll: f64 = g.iter().filter(|s| **s < m).map(|s| prices[*s]).sum();
                -beta * len - toll
            })
            .collect();
        let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logw.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = w.iter().sum();
        probabilities.push(w.into_iter().map(|v| v / total).collect());
    }
    Ok(FlpoPathReport {
        paths,
        probabilities,
    })
}

/// The location-system coefficients `(A, B, Xbar, C)` summed path by path:
/// `A_mm` counts visits to `f_m`, `B` counts facility-to-facility hops in
/// both directions, `Xbar_m` collects node coordinates of first hops into
/// `f_m` and `C_m` the destination coordinates of every hop between `f_m`
/// and the destination.
pub fn enumerate_flpo_matrices(
    inst: &FlpoInstance,
    paths: &[Vec<usize>],
    probabilities: &[Vec<f64>],
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let m = inst.facility_count();
    let d = inst.nodes().dim();
    let z = inst.destination();
    let mut a = DMatrix::zeros(m, m);
    let mut b = DMatrix::zeros(m, m);
    let mut xbar = DMatrix::zeros(m, d);
    let mut c = DMatrix::zeros(m, d);
    for (i, x) in inst.nodes().rows().enumerate() {
        let r = inst.weights()[i];
        for (g, p) in paths.iter().zip(&probabilities[i]) {
            let w = r * p;
            if w == 0.0 {
                continue;
            }
            for &s in g {
                if s < m {
                    a[(s, s)] += w;
                }
            }
            if g[0] < m {
                for k in 0..d {
                    xbar[(g[0], k)] += w * x[k];
                }
            }
            let mut hops: Vec<(usize, usize)> = g.windows(2).map(|h| (h[0], h[1])).collect();
            hops.push((g[g.len() - 1], m));
            for (u, v) in hops {
                match (u < m, v < m) {
                    (true, true) => {
                        b[(u, v)] += w;
                        b[(v, u)] += w;
                    }
                    (true, false) | (false, true) => {
                        let f = u.min(v);
                        for k in 0..d {
                            c[(f, k)] += w * z[k];
                        }
                    }
                    (false, false) => {}
                }
            }
        }
    }
    (a, b, xbar, c)
}

/// One package's ride sequence and arrival minute.
#[derive(Debug, Clone, PartialEq)]
struct Trip {
    rides: Vec<(usize, usize)>,
    minutes: f64,
}

/// Every itinerary of `package` allowed by the timetable: board any vehicle
/// at the origin, and after each ride either stop (at the destination) or
/// board any vehicle leaving the arrival depot no earlier than the arrival.
fn trips(inst: &LmdpInstance, package: usize, limit: usize) -> Result<Vec<Trip>> {
    let p = &inst.packages()[package];
    let mut out = Vec::new();
    // (depot, ready minute, rides so far)
    let mut stack: Vec<(usize, f64, Vec<(usize, usize)>)> = vec![(p.origin, 0.0, Vec::new())];
    while let Some((depot, ready, rides)) = stack.pop() {
        for (k, v) in inst.vehicles().iter().enumerate() {
            for r in 0..v.route.len() - 1 {
                if v.route[r] != depot || v.times[r] < ready {
                    continue;
                }
                let mut next = rides.clone();
                next.push((k, r));
                let (to, arrive) = (v.route[r + 1], v.times[r + 1]);
                if to == p.destination {
                    out.push(Trip {
                        rides: next.clone(),
                        minutes: arrive,
                    });
                    if out.len() > limit {
                        return Err(Error::TooLarge {
                            size: out.len() as f64,
                            bound: limit as f64,
                        });
                    }
                }
                stack.push((to, arrive, next));
            }
        }
    }
    Ok(out)
}

fn ride_key(inst: &LmdpInstance, ride: (usize, usize)) -> (usize, usize, usize) {
    (ride.0, inst.vehicles()[ride.0].route[ride.1], ride.1)
}

/// Minimum weighted total delivery time over every joint choice of
/// itineraries whose per-departure occupancy respects the vehicle
/// capacities. Packages with no itinerary at all are left out (witness
/// `None`). Among optimal plans, the lexicographically smallest is reported.
pub fn oracle_lmdp(inst: &LmdpInstance) -> Result<OracleReport> {
    let start = Instant::now();
    let r = inst.packages().len();
    let limit = LMDP_BOUND as usize;
    let mut options = Vec::with_capacity(r);
    let mut size = 1.0;
    for j in 0..r {
        let mut t = trips(inst, j, limit)?;
        t.sort_by(|a, b| {
            a.rides
                .iter()
                .map(|x| ride_key(inst, *x))
                .cmp(b.rides.iter().map(|x| ride_key(inst, *x)))
        });
        if !t.is_empty() {
            size *= t.len() as f64;
        }
        options.push(t);
    }
    guard(size, LMDP_BOUND)?;

    let rho = inst.weights();
    let live: Vec<usize> = (0..r).filter(|&j| !options[j].is_empty()).collect();
    let mut idx = vec![0usize; live.len()];
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut searched = 0u64;
    loop {
        searched += 1;
        let mut load: Vec<((usize, usize), f64)> = Vec::new();
        let mut cost = 0.0;
        for (slot, &j) in live.iter().enumerate() {
            let trip = &options[j][idx[slot]];
            cost += rho[j] * trip.minutes;
            for ride in &trip.rides {
                match load.iter_mut().find(|(k, _)| k == ride) {
                    Some((_, v)) => *v += rho[j],
                    None => load.push((*ride, rho[j])),
                }
            }
        }
        let fits = inst
            .capacity()
            .is_none_or(|w| load.iter().all(|((k, _), v)| *v <= w[*k] + 1e-9));
        if fits && best.as_ref().is_none_or(|(b, _)| cost < b - 1e-9) {
            best = Some((cost, idx.clone()));
        }
        // Advance the mixed-radix counter, last package fastest.
        let mut pos = live.len();
        let mut done = true;
        while pos > 0 {
            pos -= 1;
            idx[pos] += 1;
            if idx[pos] < options[live[pos]].len() {
                done = false;
                break;
            }
            idx[pos] = 0;
        }
        if done {
            break;
        }
    }
    let (optimum, choice) = best.ok_or_else(|| {
        Error::Infeasible("no combination of itineraries respects the vehicle capacities".into())
    })?;
    let mut plan = vec![None; r];
    for (slot, &j) in live.iter().enumerate() {
        plan[j] = Some(options[j][choice[slot]].rides.clone());
    }
    Ok(OracleReport {
        optimum,
        witness: Witness::Plan(plan),
        searched,
        elapsed_secs: start.elapsed().as_secs_f64(),
    })
}

/// Total order used for plan witnesses; exposed for tests.
pub fn compare_rides(inst: &LmdpInstance, a: &[(usize, usize)], b: &[(usize, usize)]) -> Ordering {
    a.iter()
        .map(|x| ride_key(inst, *x))
        .cmp(b.iter().map(|x| ride_key(inst, *x)))
}
