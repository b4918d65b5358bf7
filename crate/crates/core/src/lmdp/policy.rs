use std::collections::BTreeMap;

use super::plan::{
    itinerary_minutes, lexicographic, round_with_capacity, shortest_itinerary, Candidate,
    DeliveryPlan, Itinerary,
};
use super::{build_state_space, LmdpInstance, LmdpStateSpace, State};
use crate::anneal::{lse_or_neg_inf, AnnealSchedule, FixedPointConfig, PenaltyConfig};
use crate::error::{Error, Result};
use crate::flp::row_entropy;
use crate::prices::{settle, solve_prices, PricedEval, PricedModel};
use crate::trace::{SolverTrace, TraceRow};

/// Itineraries less likely than this under the final relaxed policy are not
/// considered when rounding.
const CANDIDATE_FLOOR: f64 = 1e-9;
const MAX_CANDIDATES: usize = 32;
const ENUMERATION_BUDGET: usize = 200_000;
const ROUNDING_BUDGET: usize = 2_000_000;

/// Stage-wise Gibbs transition laws, one set per destination depot.
///
/// `transition(package, t, s)[a]` is the probability that the package moves
/// along `space.arcs(s)[a]` at stage `t`.
#[derive(Debug, Clone)]
pub struct LmdpPolicy {
    horizon: usize,
    groups: Vec<Vec<Vec<Vec<f64>>>>,
    package_group: Vec<usize>,
    log_partition: Vec<f64>,
}

impl LmdpPolicy {
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn transition(&self, package: usize, stage: usize, state: usize) -> &[f64] {
        &self.groups[self.package_group[package]][stage][state]
    }

    /// `ln Z_0` of each package; `-inf` when it cannot reach its destination.
    pub fn log_partition(&self) -> &[f64] {
        &self.log_partition
    }

    pub fn is_deliverable(&self, package: usize) -> bool {
        self.log_partition[package].is_finite()
    }

    /// `mu_t(s)` of one package for `t = 0..=H`, starting from mass `mass`
    /// in its package state.
    pub fn marginals(&self, space: &LmdpStateSpace, package: usize, mass: f64) -> Vec<Vec<f64>> {
        let n = space.len();
        let mut mu = vec![0.0; n];
        if self.is_deliverable(package) {
            mu[package] = mass;
        }
        let mut out = vec![mu];
        for t in 0..self.horizon {
            let prev = out.last().unwrap();
            let mut next = vec![0.0; n];
            for s in 0..n {
                if prev[s] == 0.0 {
                    continue;
                }
                for (a, p) in space.arcs(s).iter().zip(self.transition(package, t, s)) {
                    next[a.to] += prev[s] * p;
                }
            }
            out.push(next);
        }
        out
    }
}

/// Gibbs policy for the step costs `beta * c(s, s') + lambda_{s'}`, where
/// `prices` holds one `lambda` per departure state (empty: no prices).
pub fn priced_policy(space: &LmdpStateSpace, beta: f64, prices: &[f64]) -> LmdpPolicy {
    let n = space.len();
    let h = space.horizon();
    let price = |s: usize| {
        space
            .departure_ordinal(s)
            .and_then(|q| prices.get(q).copied())
            .unwrap_or(0.0)
    };
    let mut group_of: BTreeMap<usize, usize> = BTreeMap::new();
    let mut groups = Vec::new();
    let mut log_partition = vec![f64::NEG_INFINITY; space.package_count()];
    let mut package_group = Vec::with_capacity(space.package_count());

    for (j, &dest) in space.destinations().iter().enumerate() {
        if let Some(&g) = group_of.get(&dest) {
            package_group.push(g);
            continue;
        }
        let mut logz = vec![f64::NEG_INFINITY; n];
        logz[space.terminal_index(dest)] = 0.0;
        let mut stages = vec![Vec::new(); h];
        let mut root = vec![f64::NEG_INFINITY; n];
        for t in (0..h).rev() {
            let mut next_logz = vec![f64::NEG_INFINITY; n];
            let mut rows = Vec::with_capacity(n);
            for s in 0..n {
                let mut w: Vec<f64> = space
                    .arcs(s)
                    .iter()
                    .map(|a| -beta * a.cost - price(a.to) + logz[a.to])
                    .collect();
                let lz = lse_or_neg_inf(w.iter().copied());
                for v in w.iter_mut() {
                    *v = if lz.is_finite() { (*v - lz).exp() } else { 0.0 };
                }
                next_logz[s] = lz;
                rows.push(w);
            }
            stages[t] = rows;
            logz = next_logz;
            if t == 0 {
                root = logz.clone();
            }
        }
        let g = groups.len();
        groups.push(stages);
        group_of.insert(dest, g);
        package_group.push(g);
        let _ = j;
        for (k, &d) in space.destinations().iter().enumerate() {
            if d == dest {
                log_partition[k] = root[k];
            }
        }
    }
    LmdpPolicy {
        horizon: h,
        groups,
        package_group,
        log_partition,
    }
}

/// Weighted occupancy of every departure state, summed over stages.
pub fn vehicle_usage(inst: &LmdpInstance, space: &LmdpStateSpace, policy: &LmdpPolicy) -> Vec<f64> {
    let mut occ = vec![0.0; space.departure_count()];
    for (j, r) in inst.weights().iter().enumerate() {
        let mu = policy.marginals(space, j, *r);
        for stage in &mu[1..] {
            for (q, o) in occ.iter_mut().enumerate() {
                *o += stage[space.package_count() + q];
            }
        }
    }
    occ
}

/// Expected weighted delivery minutes and path entropy.
fn distortion_entropy(
    inst: &LmdpInstance,
    space: &LmdpStateSpace,
    policy: &LmdpPolicy,
) -> (f64, f64) {
    let (mut d, mut h) = (0.0, 0.0);
    for (j, r) in inst.weights().iter().enumerate() {
        let mu = policy.marginals(space, j, *r);
        for t in 0..policy.horizon {
            for s in 0..space.len() {
                if mu[t][s] == 0.0 {
                    continue;
                }
                let row = policy.transition(j, t, s);
                let cost: f64 = space
                    .arcs(s)
                    .iter()
                    .zip(row)
                    .filter(|(_, p)| **p > 0.0)
                    .map(|(a, p)| a.cost * p)
                    .sum();
                d += mu[t][s] * cost;
                h += mu[t][s] * row_entropy(row);
            }
        }
    }
    (d, h)
}

struct LmdpPriced<'a> {
    inst: &'a LmdpInstance,
    space: &'a LmdpStateSpace,
    beta: f64,
}

impl PricedModel for LmdpPriced<'_> {
    fn dim(&self) -> usize {
        self.space.departure_count()
    }

    fn evaluate(&self, prices: &[f64]) -> Result<PricedEval> {
        let policy = priced_policy(self.space, self.beta, prices);
        let log_partition = policy
            .log_partition
            .iter()
            .zip(self.inst.weights())
            .filter(|(z, _)| z.is_finite())
            .map(|(z, r)| r * z)
            .sum();
        Ok(PricedEval {
            log_partition,
            usage: vehicle_usage(self.inst, self.space, &policy),
        })
    }
}

/// Relaxed policy whose penalized costs are evaluated at its own occupancy.
#[derive(Debug, Clone)]
pub struct ConstrainedLmdpPolicy {
    pub policy: LmdpPolicy,
    pub occupancy: Vec<f64>,
    pub prices: Vec<f64>,
    pub iterations: usize,
}

fn departure_caps(inst: &LmdpInstance, space: &LmdpStateSpace) -> Option<Vec<f64>> {
    inst.capacity()
        .map(|w| space.departures().iter().map(|d| w[d.vehicle]).collect())
}

fn departure_prices(
    occ: &[f64],
    caps: &[f64],
    beta_prime: f64,
    penalty: &PenaltyConfig,
) -> Vec<f64> {
    let slack: Vec<f64> = occ.iter().zip(caps).map(|(o, w)| o - w).collect();
    penalty
        .gradient(&slack)
        .into_iter()
        .map(|g| beta_prime * g)
        .collect()
}

/// Gibbs policy with the capacity penalty
/// `beta' theta exp(theta (C(s') - w))` added to every move into a departure
/// state `s'`, where `C` is the policy's own occupancy.
///
/// The prices are found by Newton's method on the concave dual. The
/// occupancy is a fixed point of
/// `C -> vehicle_usage(priced_policy(prices(C)))` to within `fp.tol`; should
/// Newton stall, [`crate::anneal::damped_fixed_point`] on that map takes over.
/// Without capacities, or with `beta_prime == 0`, this is the plain Gibbs
/// policy.
pub fn gibbs_policy(
    inst: &LmdpInstance,
    space: &LmdpStateSpace,
    beta: f64,
    beta_prime: f64,
    penalty: &PenaltyConfig,
    fp: &FixedPointConfig,
) -> Result<ConstrainedLmdpPolicy> {
    gibbs_policy_warm(inst, space, beta, beta_prime, penalty, fp, None)
}

fn gibbs_policy_warm(
    inst: &LmdpInstance,
    space: &LmdpStateSpace,
    beta: f64,
    beta_prime: f64,
    penalty: &PenaltyConfig,
    fp: &FixedPointConfig,
    warm: Option<&[f64]>,
) -> Result<ConstrainedLmdpPolicy> {
    let caps = match (departure_caps(inst, space), beta_prime > 0.0) {
        (Some(c), true) => c,
        _ => {
            let policy = priced_policy(space, beta, &[]);
            let occupancy = vehicle_usage(inst, space, &policy);
            return Ok(ConstrainedLmdpPolicy {
                policy,
                occupancy,
                prices: vec![0.0; space.departure_count()],
                iterations: 0,
            });
        }
    };
    let model = LmdpPriced { inst, space, beta };
    let sol = solve_prices(&model, &caps, beta_prime, penalty, warm)?;
    let start = vehicle_usage(inst, space, &priced_policy(space, beta, &sol.prices));
    let map = |occ: &[f64]| -> Result<Vec<f64>> {
        let prices = departure_prices(occ, &caps, beta_prime, penalty);
        Ok(vehicle_usage(
            inst,
            space,
            &priced_policy(space, beta, &prices),
        ))
    };
    let (occupancy, fp_iters) = settle(&sol, start, map, fp)?;
    let prices = departure_prices(&occupancy, &caps, beta_prime, penalty);
    Ok(ConstrainedLmdpPolicy {
        policy: priced_policy(space, beta, &prices),
        occupancy,
        prices: sol.prices,
        iterations: sol.iterations + fp_iters,
    })
}

/// `beta` from `1e-3` to `1` per minute at rate 1.5, `beta_prime` from
/// `1e-2` to `1e3` at rate 2.
pub fn default_schedule() -> AnnealSchedule {
    AnnealSchedule {
        beta_min: 1e-3,
        beta_max: 1.0,
        alpha: 1.5,
        ..AnnealSchedule::default()
    }
}

/// Itineraries of one package with probability at least `floor`, most
/// likely first.
fn likely_itineraries(
    space: &LmdpStateSpace,
    policy: &LmdpPolicy,
    package: usize,
    floor: f64,
) -> Vec<(Vec<usize>, f64)> {
    let mut out = Vec::new();
    let mut budget = ENUMERATION_BUDGET;
    let mut stack = vec![(package, 0usize, 1.0, Vec::new())];
    while let Some((s, t, p, deps)) = stack.pop() {
        if budget == 0 {
            break;
        }
        budget -= 1;
        if let State::Terminal(_) = space.state(s) {
            out.push((deps, p));
            continue;
        }
        if t == policy.horizon() {
            continue;
        }
        for (a, q) in space.arcs(s).iter().zip(policy.transition(package, t, s)) {
            let pq = p * q;
            if pq >= floor {
                let mut next = deps.clone();
                if space.departure_ordinal(a.to).is_some() {
                    next.push(a.to);
                }
                stack.push((a.to, t + 1, pq, next));
            }
        }
    }
    out.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then_with(|| lexicographic(space, &a.0, &b.0))
    });
    out
}

/// Anneals the relaxed delivery policy and rounds it to one itinerary per
/// package.
///
/// Rounding considers, per package, the itineraries that reach
/// non-negligible probability somewhere along the `beta_prime` ladder of the
/// final `beta` (plus the package's fastest itinerary)
/// and picks the cheapest joint choice that respects every vehicle capacity.
/// Among equally cheap joint choices the lexicographically smallest wins,
/// packages compared in index order. If no candidate combination fits, the
/// most likely itineraries are returned and the plan is marked infeasible.
pub fn anneal_lmdp(
    inst: &LmdpInstance,
    schedule: &AnnealSchedule,
    penalty: &PenaltyConfig,
    fp: &FixedPointConfig,
) -> Result<DeliveryPlan> {
    penalty.validate()?;
    fp.validate()?;
    let space = build_state_space(inst);
    let constrained = inst.capacity().is_some();
    let blocks = schedule.blocks(constrained)?;
    let mut trace = SolverTrace::default();
    let mut warm: Option<Vec<f64>> = None;
    let mut last: Option<ConstrainedLmdpPolicy> = None;
    // Best probability each itinerary reaches anywhere in the final beta block.
    let mut pool: Vec<BTreeMap<Vec<usize>, f64>> = vec![BTreeMap::new(); space.package_count()];

    for (block, (beta, betaps)) in blocks.iter().enumerate() {
        for &beta_prime in betaps {
            let cp = gibbs_policy_warm(
                inst,
                &space,
                *beta,
                beta_prime,
                penalty,
                fp,
                warm.as_deref(),
            )?;
            if beta_prime > 0.0 {
                warm = Some(cp.prices.clone());
            }
            let (d, h) = distortion_entropy(inst, &space, &cp.policy);
            let (pen, max_slack) = match departure_caps(inst, &space) {
                Some(caps) => {
                    let s: Vec<f64> = cp.occupancy.iter().zip(&caps).map(|(o, w)| o - w).collect();
                    (
                        Some(penalty.value(&s)),
                        Some(s.iter().copied().fold(f64::NEG_INFINITY, f64::max)),
                    )
                }
                None => (None, None),
            };
            trace.push(TraceRow {
                beta: *beta,
                beta_prime,
                free_energy: beta * d - h + beta_prime * pen.unwrap_or(0.0),
                distortion: d,
                penalty: pen,
                max_slack,
                structure: cp.occupancy.iter().copied().fold(0.0, f64::max),
                inner_iterations: cp.iterations,
            });
            if block + 1 == blocks.len() {
                for (j, seen) in pool.iter_mut().enumerate() {
                    for (deps, p) in likely_itineraries(&space, &cp.policy, j, CANDIDATE_FLOOR) {
                        let best = seen.entry(deps).or_insert(0.0);
                        *best = best.max(p);
                    }
                }
            }
            last = Some(cp);
        }
    }
    if last.is_none() {
        return Err(Error::InvalidParameter("empty annealing schedule".into()));
    }

    let mut candidates = Vec::with_capacity(space.package_count());
    let mut most_likely = Vec::with_capacity(space.package_count());
    for j in 0..space.package_count() {
        let Some(fastest) = shortest_itinerary(&space, j) else {
            candidates.push(Vec::new());
            most_likely.push(None);
            continue;
        };
        let mut ranked: Vec<(Vec<usize>, f64)> = std::mem::take(&mut pool[j]).into_iter().collect();
        ranked.sort_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then_with(|| lexicographic(&space, &a.0, &b.0))
        });
        let mut list: Vec<Vec<usize>> = ranked
            .into_iter()
            .take(MAX_CANDIDATES)
            .map(|(d, _)| d)
            .collect();
        most_likely.push(Some(
            list.first().cloned().unwrap_or_else(|| fastest.clone()),
        ));
        if !list.contains(&fastest) {
            list.push(fastest);
        }
        list.sort_by(|a, b| lexicographic(&space, a, b));
        candidates.push(
            list.into_iter()
                .map(|d| Candidate {
                    minutes: itinerary_minutes(&space, &d),
                    departures: d,
                })
                .collect::<Vec<_>>(),
        );
    }

    let chosen: Vec<Option<Vec<usize>>> =
        match round_with_capacity(inst, &space, &candidates, ROUNDING_BUDGET) {
            Some(choice) => choice
                .iter()
                .enumerate()
                .map(|(j, &c)| candidates[j].get(c).map(|c| c.departures.clone()))
                .collect(),
            None => most_likely,
        };
    let itineraries = chosen
        .into_iter()
        .enumerate()
        .map(|(j, d)| d.map(|d| Itinerary::from_departures(inst, &space, j, d)))
        .collect();
    let mut plan =
        DeliveryPlan::from_itineraries(inst, &space, itineraries, penalty.epsilon_feasible);
    plan.trace = trace;
    Ok(plan)
}
