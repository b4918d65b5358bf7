//! Facility location with path optimization.
//!
//! Every node sends its mass to a common destination `z` along a path of
//! exactly `M` steps, each step being one of the facilities or the
//! destination itself. Reaching the destination early is allowed: the
//! destination may be revisited at zero cost and may also be left again, so
//! the step set is `{f_0, ..., f_{M-1}, dest}` at every stage and the
//! destination is *not* absorbing. A path `g_1 .. g_M` from node `x` costs
//!
//! ```text
//! |x - y(g_1)|^2 + sum_t |y(g_t) - y(g_{t+1})|^2 + |y(g_M) - z|^2
//! ```
//!
//! with `y(dest) = z`. Capacities bound the expected number of visits
//! `C(f_j)` summed over all stages.
//!
//! Internally step `j < M` is facility `j` and step `M` is the destination
//! (see [`FlpoInstance::destination_step`]).

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::anneal::{lse_or_neg_inf, AnnealSchedule, FixedPointConfig, PenaltyConfig};
use crate::error::{Error, Result};
use crate::flp::{
    normalize_weights, row_entropy, DISTINCT_RADIUS, LOCATION_TOL, MAX_ALTERNATIONS, SPLIT_NOISE,
};
use crate::geometry::{largest_eigenvalue, sq_dist, Points, RowMatrix};
use crate::prices::{settle, solve_prices, PricedEval, PricedModel};
use crate::trace::{SolverTrace, TraceRow};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlpoInstance {
    nodes: Points,
    weights: Vec<f64>,
    facility_count: usize,
    destination: Vec<f64>,
    capacities: Option<Vec<f64>>,
}

impl FlpoInstance {
    pub fn new(
        nodes: Points,
        weights: Option<Vec<f64>>,
        facility_count: usize,
        destination: Vec<f64>,
        capacities: Option<Vec<f64>>,
    ) -> Result<Self> {
        if nodes.is_empty() || facility_count == 0 {
            return Err(Error::InvalidInstance(
                "need at least one node and one facility".into(),
            ));
        }
        if destination.len() != nodes.dim() || destination.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInstance(format!(
                "destination must be a finite point of dimension {}",
                nodes.dim()
            )));
        }
        let weights = normalize_weights(weights, nodes.len())?;
        if let Some(w) = &capacities {
            if w.len() != facility_count {
                return Err(Error::InvalidInstance(format!(
                    "expected {facility_count} capacities, got {}",
                    w.len()
                )));
            }
            if w.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::InvalidInstance("capacities must be positive".into()));
            }
        }
        Ok(Self {
            nodes,
            weights,
            facility_count,
            destination,
            capacities,
        })
    }

    pub fn nodes(&self) -> &Points {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn facility_count(&self) -> usize {
        self.facility_count
    }

    pub fn destination(&self) -> &[f64] {
        &self.destination
    }

    pub fn capacities(&self) -> Option<&[f64]> {
        self.capacities.as_deref()
    }

    /// Index of the destination among the steps: `facility_count`.
    pub fn destination_step(&self) -> usize {
        self.facility_count
    }

    pub fn without_capacities(&self) -> Self {
        Self {
            capacities: None,
            ..self.clone()
        }
    }

    pub fn centroid(&self) -> Vec<f64> {
        self.nodes.weighted_mean(&self.weights)
    }
}

/// Squared step lengths at fixed facility locations.
#[derive(Debug, Clone, PartialEq)]
pub struct StepCosts {
    /// `N x (M+1)`: node to first step.
    pub node: RowMatrix,
    /// `(M+1) x (M+1)`: step to step. Column `M` doubles as the cost of the
    /// closing hop to the destination.
    pub step: RowMatrix,
}

fn step_location<'a>(inst: &'a FlpoInstance, locations: &'a Points, s: usize) -> &'a [f64] {
    if s == inst.facility_count {
        &inst.destination
    } else {
        locations.row(s)
    }
}

pub fn step_cost(inst: &FlpoInstance, locations: &Points) -> StepCosts {
    let k = inst.facility_count + 1;
    let mut node = RowMatrix::zeros(inst.nodes.len(), k);
    for (i, x) in inst.nodes.rows().enumerate() {
        for s in 0..k {
            node.set(i, s, sq_dist(x, step_location(inst, locations, s)));
        }
    }
    let mut step = RowMatrix::zeros(k, k);
    for a in 0..k {
        for b in 0..k {
            step.set(
                a,
                b,
                sq_dist(
                    step_location(inst, locations, a),
                    step_location(inst, locations, b),
                ),
            );
        }
    }
    StepCosts { node, step }
}

/// Stage-wise transition laws of an `M`-step path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathPolicy {
    /// `N x (M+1)`: `p_0(g_1 | node)`.
    pub stage0: RowMatrix,
    /// `M - 1` matrices of size `(M+1) x (M+1)`: `p_t(g_{t+1} | g_t)`.
    pub stages: Vec<RowMatrix>,
}

impl PathPolicy {
    /// Number of steps per path.
    pub fn path_len(&self) -> usize {
        self.stages.len() + 1
    }

    pub fn max_row_defect(&self) -> f64 {
        self.stages
            .iter()
            .map(RowMatrix::max_row_defect)
            .fold(self.stage0.max_row_defect(), f64::max)
    }

    /// Deterministic policy that always moves to the most likely next step.
    /// Exact ties go to the destination when it is among the maxima, and
    /// to the lowest facility index otherwise.
    pub fn hardened(&self) -> Self {
        let harden = |m: &RowMatrix| {
            let mut out = RowMatrix::zeros(m.nrows(), m.ncols());
            for (r, row) in m.rows().enumerate() {
                out.set(r, hard_step(row), 1.0);
            }
            out
        };
        Self {
            stage0: harden(&self.stage0),
            stages: self.stages.iter().map(harden).collect(),
        }
    }

    /// The most likely step sequence of node `i` under [`Self::hardened`]'s rule.
    pub fn hard_route(&self, i: usize) -> Vec<usize> {
        let mut route = vec![hard_step(self.stage0.row(i))];
        for stage in &self.stages {
            let last = *route.last().unwrap();
            route.push(hard_step(stage.row(last)));
        }
        route
    }
}

fn hard_step(row: &[f64]) -> usize {
    let dest = row.len() - 1;
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if row[dest] == max {
        dest
    } else {
        row.iter().position(|v| *v == max).unwrap_or(0)
    }
}

/// Backward log partitions: `node[i] = ln Z_0(i)` and `stages[t-1][s] = ln Z_t(s)`
/// for `t = 1..=M`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogPartitions {
    pub node: Vec<f64>,
    pub stages: Vec<Vec<f64>>,
}

/// `lambda_j = beta' theta exp(theta (C_j - w_j))` for the facilities; the
/// destination is never priced.
pub fn step_prices(
    usage: &[f64],
    capacities: &[f64],
    beta_prime: f64,
    penalty: &PenaltyConfig,
) -> Vec<f64> {
    if beta_prime == 0.0 {
        return vec![0.0; usage.len()];
    }
    let slack: Vec<f64> = usage.iter().zip(capacities).map(|(c, w)| c - w).collect();
    penalty
        .gradient(&slack)
        .into_iter()
        .map(|g| beta_prime * g)
        .collect()
}

/// Gibbs path policy for the penalized step costs
/// `beta d_t(s, s') + lambda_{s'}` (the price is paid on entering a
/// facility), by backward recursion in the log domain:
///
/// ```text
/// ln Z_M(s)  = -beta |y(s) - z|^2
/// ln Z_t(s)  = lse_{s'} ( -beta d(s, s') - lambda_{s'} + ln Z_{t+1}(s') )
/// p_t(s'|s)  = exp( -beta d(s, s') - lambda_{s'} + ln Z_{t+1}(s') - ln Z_t(s) )
/// ```
///
/// `prices` has one entry per facility; an empty slice means no prices.
pub fn backward_policy(
    costs: &StepCosts,
    beta: f64,
    prices: &[f64],
) -> Result<(PathPolicy, LogPartitions)> {
    let k = costs.step.ncols();
    let m = k - 1;
    let price = |s: usize| {
        if s < m {
            prices.get(s).copied().unwrap_or(0.0)
        } else {
            0.0
        }
    };
    let mut next: Vec<f64> = (0..k).map(|s| -beta * costs.step.get(s, m)).collect();
    let mut log_stages = vec![next.clone()];
    let mut stages = Vec::with_capacity(m.saturating_sub(1));

    let fill = |row: &mut [f64], cost: &dyn Fn(usize) -> f64, next: &[f64]| -> Result<f64> {
        for (s2, v) in row.iter_mut().enumerate() {
            *v = -beta * cost(s2) - price(s2) + next[s2];
        }
        let lz = lse_or_neg_inf(row.iter().copied());
        if lz == f64::NEG_INFINITY || lz.is_nan() {
            return Err(Error::EmptySupport(
                "path policy row has no finite weight".into(),
            ));
        }
        for v in row.iter_mut() {
            *v = (*v - lz).exp();
        }
        Ok(lz)
    };

    for _ in 1..m {
        let mut p = RowMatrix::zeros(k, k);
        let mut lz = vec![0.0; k];
        for s in 0..k {
            lz[s] = fill(p.row_mut(s), &|s2| costs.step.get(s, s2), &next)?;
        }
        stages.push(p);
        log_stages.push(lz.clone());
        next = lz;
    }
    stages.reverse();
    log_stages.reverse();

    let n = costs.node.nrows();
    let mut stage0 = RowMatrix::zeros(n, k);
    let mut node = vec![0.0; n];
    for i in 0..n {
        node[i] = fill(stage0.row_mut(i), &|s2| costs.node.get(i, s2), &next)?;
    }
    Ok((
        PathPolicy { stage0, stages },
        LogPartitions {
            node,
            stages: log_stages,
        },
    ))
}

/// `p_0(g_1|i) p_1(g_2|g_1) ... p_{M-1}(g_M|g_{M-1})`.
pub fn path_probability(policy: &PathPolicy, node: usize, path: &[usize]) -> Result<f64> {
    if path.len() != policy.path_len() {
        return Err(Error::InvalidParameter(format!(
            "path has {} steps, expected {}",
            path.len(),
            policy.path_len()
        )));
    }
    let mut p = policy.stage0.get(node, path[0]);
    for (t, stage) in policy.stages.iter().enumerate() {
        p *= stage.get(path[t], path[t + 1]);
    }
    Ok(p)
}

/// `mu_t(s)`: rho-weighted probability of being at step `s` after `t` moves,
/// for `t = 1..=M` (index `t - 1`).
pub fn forward_marginals(inst: &FlpoInstance, policy: &PathPolicy) -> Vec<Vec<f64>> {
    let k = policy.stage0.ncols();
    let mut mu = vec![0.0; k];
    for (r, row) in inst.weights.iter().zip(policy.stage0.rows()) {
        for (m, p) in mu.iter_mut().zip(row) {
            *m += r * p;
        }
    }
    let mut out = vec![mu];
    for stage in &policy.stages {
        let prev = out.last().unwrap();
        let mut mu = vec![0.0; k];
        for (s, mass) in prev.iter().enumerate() {
            if *mass == 0.0 {
                continue;
            }
            for (m, p) in mu.iter_mut().zip(stage.row(s)) {
                *m += mass * p;
            }
        }
        out.push(mu);
    }
    out
}

/// `C(f_j) = sum_{t=1..M} mu_t(f_j)`: expected visits to each facility.
pub fn facility_usage_flpo(inst: &FlpoInstance, policy: &PathPolicy) -> Vec<f64> {
    usage_from_marginals(&forward_marginals(inst, policy), inst.facility_count)
}

fn usage_from_marginals(mu: &[Vec<f64>], m: usize) -> Vec<f64> {
    let mut usage = vec![0.0; m];
    for stage in mu {
        for (u, v) in usage.iter_mut().zip(stage) {
            *u += v;
        }
    }
    usage
}

/// Coefficients of the location stationarity system `(2A - B) Y = Xbar + C`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlpoMatrices {
    /// Diagonal: expected visits per facility.
    pub a: DMatrix<f64>,
    /// Symmetrized facility-to-facility transition masses.
    pub b: DMatrix<f64>,
    /// `M x d`: first-hop mass times node coordinates.
    pub xbar: DMatrix<f64>,
    /// `M x d`: destination-adjacent hop mass times `z`.
    pub c: DMatrix<f64>,
}

pub fn assemble_matrices(inst: &FlpoInstance, policy: &PathPolicy) -> FlpoMatrices {
    let m = inst.facility_count;
    let dim = inst.nodes.dim();
    let dest = m;
    let mu = forward_marginals(inst, policy);
    let mut a = DMatrix::zeros(m, m);
    let usage = usage_from_marginals(&mu, m);
    for j in 0..m {
        a[(j, j)] = usage[j];
    }

    let mut b = DMatrix::zeros(m, m);
    let mut dest_mass = vec![0.0; m];
    for (t, stage) in policy.stages.iter().enumerate() {
        for s in 0..=m {
            let mass = mu[t][s];
            if mass == 0.0 {
                continue;
            }
            for s2 in 0..=m {
                let e = mass * stage.get(s, s2);
                match (s == dest, s2 == dest) {
                    (false, false) => {
                        b[(s, s2)] += e;
                        b[(s2, s)] += e;
                    }
                    (false, true) => dest_mass[s] += e,
                    (true, false) => dest_mass[s2] += e,
                    (true, true) => {}
                }
            }
        }
    }
    for j in 0..m {
        dest_mass[j] += mu[m - 1][j];
    }

    let mut xbar = DMatrix::zeros(m, dim);
    for (i, x) in inst.nodes.rows().enumerate() {
        let r = inst.weights[i];
        for j in 0..m {
            let w = r * policy.stage0.get(i, j);
            for k in 0..dim {
                xbar[(j, k)] += w * x[k];
            }
        }
    }
    let mut c = DMatrix::zeros(m, dim);
    for j in 0..m {
        for k in 0..dim {
            c[(j, k)] = dest_mass[j] * inst.destination[k];
        }
    }
    FlpoMatrices { a, b, xbar, c }
}

/// Solves `(2A - B) Y = Xbar + C`, one coordinate at a time.
///
/// The system matrix is a weighted graph Laplacian plus the node and
/// destination edge masses on its diagonal, so it is positive semidefinite.
/// It is singular only when some facility carries no mass at all; then the
/// solve is regularized towards `previous` and the second return value is
/// `true`.
pub fn location_update(matrices: &FlpoMatrices, previous: &Points) -> Result<(Points, bool)> {
    let m = matrices.a.nrows();
    let dim = matrices.xbar.ncols();
    let mut k = &matrices.a * 2.0 - &matrices.b;
    let mut rhs = &matrices.xbar + &matrices.c;
    let max_diag = (0..m).map(|j| k[(j, j)]).fold(0.0, f64::max);
    let singular = (0..m).any(|j| k[(j, j)] <= 1e-12 * max_diag.max(f64::MIN_POSITIVE));
    if singular {
        let eps = 1e-10 * max_diag.max(1e-300);
        for j in 0..m {
            k[(j, j)] += eps;
            for d in 0..dim {
                rhs[(j, d)] += eps * previous.row(j)[d];
            }
        }
    }
    let sol = k
        .lu()
        .solve(&rhs)
        .filter(|s| s.iter().all(|v| v.is_finite()))
        .ok_or(Error::NoConvergence {
            iterations: 1,
            residual: f64::INFINITY,
        })?;
    let mut out = previous.clone();
    for j in 0..m {
        for d in 0..dim {
            out.row_mut(j)[d] = sol[(j, d)];
        }
    }
    Ok((out, singular))
}

/// Expected total squared path length.
pub fn distortion_flpo(inst: &FlpoInstance, policy: &PathPolicy, locations: &Points) -> f64 {
    let costs = step_cost(inst, locations);
    let m = inst.facility_count;
    let mu = forward_marginals(inst, policy);
    let mut d = 0.0;
    for (i, r) in inst.weights.iter().enumerate() {
        for s in 0..=m {
            d += r * policy.stage0.get(i, s) * costs.node.get(i, s);
        }
    }
    for (t, stage) in policy.stages.iter().enumerate() {
        for s in 0..=m {
            for s2 in 0..=m {
                d += mu[t][s] * stage.get(s, s2) * costs.step.get(s, s2);
            }
        }
    }
    for s in 0..=m {
        d += mu[m - 1][s] * costs.step.get(s, m);
    }
    d
}

/// Path entropy `-sum_i rho_i sum_g p(g|i) ln p(g|i)`, by the chain rule
/// over stages.
pub fn entropy_flpo(inst: &FlpoInstance, policy: &PathPolicy) -> f64 {
    let mu = forward_marginals(inst, policy);
    let mut h: f64 = inst
        .weights
        .iter()
        .zip(policy.stage0.rows())
        .map(|(r, row)| r * row_entropy(row))
        .sum();
    for (t, stage) in policy.stages.iter().enumerate() {
        for (s, row) in stage.rows().enumerate() {
            h += mu[t][s] * row_entropy(row);
        }
    }
    h
}

/// `beta D - H + beta' sum_j exp(theta (C_j - w_j))`; the penalty term is
/// dropped for instances without capacities.
pub fn free_energy_flpo(
    inst: &FlpoInstance,
    policy: &PathPolicy,
    locations: &Points,
    beta: f64,
    beta_prime: f64,
    penalty: &PenaltyConfig,
) -> f64 {
    let base = beta * distortion_flpo(inst, policy, locations) - entropy_flpo(inst, policy);
    match &inst.capacities {
        Some(w) => {
            let slack: Vec<f64> = facility_usage_flpo(inst, policy)
                .iter()
                .zip(w)
                .map(|(c, w)| c - w)
                .collect();
            base + beta_prime * penalty.value(&slack)
        }
        None => base,
    }
}

struct FlpoPriced<'a> {
    inst: &'a FlpoInstance,
    costs: &'a StepCosts,
    beta: f64,
}

impl PricedModel for FlpoPriced<'_> {
    fn dim(&self) -> usize {
        self.inst.facility_count
    }

    fn evaluate(&self, prices: &[f64]) -> Result<PricedEval> {
        let (policy, logz) = backward_policy(self.costs, self.beta, prices)?;
        let log_partition = self
            .inst
            .weights
            .iter()
            .zip(&logz.node)
            .map(|(r, z)| r * z)
            .sum();
        Ok(PricedEval {
            log_partition,
            usage: facility_usage_flpo(self.inst, &policy),
        })
    }
}

/// Self-consistent policy at fixed locations.
#[derive(Debug, Clone)]
pub struct ConstrainedPolicy {
    pub policy: PathPolicy,
    pub usage: Vec<f64>,
    pub prices: Vec<f64>,
    pub fixed_point_iterations: usize,
}

/// Policy whose penalized costs are evaluated at its own usage.
///
/// Without capacities (or with `beta_prime == 0`) this is the plain Gibbs
/// path policy. Otherwise the capacity prices are found by Newton's method
/// on the dual. The resulting usage is a fixed point of
/// `C -> usage(backward_policy(prices(C)))` to within `fp.tol`; should Newton
/// stall, [`crate::anneal::damped_fixed_point`] on that map takes over.
pub fn solve_policy(
    inst: &FlpoInstance,
    locations: &Points,
    beta: f64,
    beta_prime: f64,
    penalty: &PenaltyConfig,
    fp: &FixedPointConfig,
) -> Result<ConstrainedPolicy> {
    solve_policy_warm(inst, locations, beta, beta_prime, penalty, fp, None)
}

fn solve_policy_warm(
    inst: &FlpoInstance,
    locations: &Points,
    beta: f64,
    beta_prime: f64,
    penalty: &PenaltyConfig,
    fp: &FixedPointConfig,
    warm: Option<&[f64]>,
) -> Result<ConstrainedPolicy> {
    let costs = step_cost(inst, locations);
    let caps = match (&inst.capacities, beta_prime > 0.0) {
        (Some(w), true) => w,
        _ => {
            let (policy, _) = backward_policy(&costs, beta, &[])?;
            let usage = facility_usage_flpo(inst, &policy);
            let prices = vec![0.0; inst.facility_count];
            return Ok(ConstrainedPolicy {
                policy,
                usage,
                prices,
                fixed_point_iterations: 0,
            });
        }
    };
    let model = FlpoPriced {
        inst,
        costs: &costs,
        beta,
    };
    let sol = solve_prices(&model, caps, beta_prime, penalty, warm)?;
    let (policy, _) = backward_policy(&costs, beta, &sol.prices)?;
    let start = facility_usage_flpo(inst, &policy);
    let map = |usage: &[f64]| -> Result<Vec<f64>> {
        let prices = step_prices(usage, caps, beta_prime, penalty);
        let (p, _) = backward_policy(&costs, beta, &prices)?;
        Ok(facility_usage_flpo(inst, &p))
    };
    let (usage, fixed_point_iterations) = settle(&sol, start, map, fp)?;
    let prices = step_prices(&usage, caps, beta_prime, penalty);
    let (policy, _) = backward_policy(&costs, beta, &prices)?;
    Ok(ConstrainedPolicy {
        policy,
        usage,
        prices: sol.prices,
        fixed_point_iterations,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlpoSolution {
    pub locations: Points,
    /// Per node, the `M` steps of its hardened path; step `M` is the destination.
    pub routes: Vec<Vec<usize>>,
    pub cost: f64,
    pub usage: Vec<f64>,
    pub feasible: bool,
    #[serde(skip)]
    pub trace: SolverTrace,
    #[serde(skip)]
    pub relaxed: Option<(PathPolicy, Points)>,
    pub final_beta: f64,
    pub final_beta_prime: f64,
}

/// Ladders used when none are given; as for plain facility location, but
/// the critical `beta` estimate uses the nodes together with the
/// destination.
pub fn default_schedule(inst: &FlpoInstance) -> AnnealSchedule {
    let mut rows = inst.nodes.to_rows();
    rows.push(inst.destination.clone());
    let mut w: Vec<f64> = inst.weights.clone();
    w.push(1.0);
    let mut s = AnnealSchedule::default();
    if let Ok(pts) = Points::from_rows(&rows) {
        let lmax = largest_eigenvalue(&pts.covariance(&w));
        if lmax > 1e-300 {
            s.beta_min = (1e-3 / (2.0 * lmax)).min(s.beta_max / 10.0);
        }
    }
    s
}

/// Runs the nested annealing loops for path-based facility location and
/// hardens the final policy (see [`PathPolicy::hardened`]). The returned
/// locations are re-solved for the hard policy.
pub fn anneal_flpo(
    inst: &FlpoInstance,
    schedule: &AnnealSchedule,
    penalty: &PenaltyConfig,
    fp: &FixedPointConfig,
    seed: u64,
) -> Result<FlpoSolution> {
    penalty.validate()?;
    fp.validate()?;
    let constrained = inst.capacities.is_some();
    let blocks = schedule.blocks(constrained)?;
    let mut rows = inst.nodes.to_rows();
    rows.push(inst.destination.clone());
    let diameter = Points::from_rows(&rows)?.diameter();
    let m = inst.facility_count;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, SPLIT_NOISE * diameter).expect("positive noise scale");
    let mut locations = Points::repeat(&inst.centroid(), m);
    let mut trace = SolverTrace::default();
    let mut prices: Option<Vec<f64>> = None;
    let mut current: Option<ConstrainedPolicy> = None;
    let (mut last_beta, mut last_beta_prime) = (0.0, 0.0);

    for (block, (beta, betaps)) in blocks.iter().enumerate() {
        if block > 0 {
            for v in locations.as_mut_slice() {
                *v += noise.sample(&mut rng);
            }
        }
        for &beta_prime in betaps {
            let mut alternations = 0;
            loop {
                alternations += 1;
                let cp = solve_policy_warm(
                    inst,
                    &locations,
                    *beta,
                    beta_prime,
                    penalty,
                    fp,
                    prices.as_deref(),
                )?;
                if beta_prime > 0.0 {
                    prices = Some(cp.prices.clone());
                }
                let (next, regularized) =
                    location_update(&assemble_matrices(inst, &cp.policy), &locations)?;
                trace.degenerate_updates += usize::from(regularized);
                let moved = next
                    .as_slice()
                    .iter()
                    .zip(locations.as_slice())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                locations = next;
                current = Some(cp);
                if moved <= LOCATION_TOL * diameter || alternations >= MAX_ALTERNATIONS {
                    break;
                }
            }
            let cp = current.as_ref().expect("at least one alternation");
            let d = distortion_flpo(inst, &cp.policy, &locations);
            let h = entropy_flpo(inst, &cp.policy);
            let (pen, max_slack) = match &inst.capacities {
                Some(w) => {
                    let s: Vec<f64> = cp.usage.iter().zip(w).map(|(c, w)| c - w).collect();
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
                structure: locations.distinct_count(DISTINCT_RADIUS * diameter) as f64,
                inner_iterations: alternations,
            });
            last_beta = *beta;
            last_beta_prime = beta_prime;
        }
    }

    let relaxed_policy = current.expect("schedule has at least one step").policy;
    let hard = relaxed_policy.hardened();
    let (hard_locations, regularized) =
        location_update(&assemble_matrices(inst, &hard), &locations)?;
    trace.degenerate_updates += usize::from(regularized);
    let routes = (0..inst.nodes.len()).map(|i| hard.hard_route(i)).collect();
    let cost = distortion_flpo(inst, &hard, &hard_locations);
    let usage = facility_usage_flpo(inst, &hard);
    let feasible = inst.capacities.as_ref().is_none_or(|w| {
        usage
            .iter()
            .zip(w)
            .all(|(c, w)| *c <= w + penalty.epsilon_feasible)
    });
    Ok(FlpoSolution {
        locations: hard_locations,
        routes,
        cost,
        usage,
        feasible,
        trace,
        relaxed: Some((relaxed_policy, locations)),
        final_beta: last_beta,
        final_beta_prime: last_beta_prime,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn random_instance(
        rng: &mut ChaCha8Rng,
        n: usize,
        m: usize,
        caps: Option<Vec<f64>>,
    ) -> FlpoInstance {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| vec![rng.random::<f64>(), rng.random()])
            .collect();
        let w: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 0.1).collect();
        FlpoInstance::new(
            Points::from_rows(&rows).unwrap(),
            Some(w),
            m,
            vec![rng.random(), rng.random()],
            caps,
        )
        .unwrap()
    }

    fn random_points(rng: &mut ChaCha8Rng, m: usize) -> Points {
        Points::from_rows(
            &(0..m)
                .map(|_| vec![rng.random::<f64>(), rng.random()])
                .collect::<Vec<_>>(),
        )
        .unwrap()
    }

    fn enumerate_paths(k: usize, len: usize) -> Vec<Vec<usize>> {
        let mut out = vec![vec![]];
        for _ in 0..len {
            out = out
                .into_iter()
                .flat_map(|p| {
                    (0..k).map(move |s| {
                        let mut q = p.clone();
                        q.push(s);
                        q
                    })
                })
                .collect();
        }
        out
    }

    #[test]
    fn step_cost_examples() {
        let nodes = Points::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let inst = FlpoInstance::new(nodes, None, 2, vec![0.0, 0.0], None).unwrap();
        let y = Points::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
        let c = step_cost(&inst, &y);
        assert_eq!(c.step.get(0, 2), 0.0);
        assert_eq!(c.step.get(0, 1), 2.0);
        assert_eq!(c.step.get(2, 2), 0.0);
    }

    #[test]
    fn uniform_at_zero_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inst = random_instance(&mut rng, 3, 3, None);
        let y = random_points(&mut rng, 3);
        let (p, _) = backward_policy(&step_cost(&inst, &y), 0.0, &[]).unwrap();
        assert!(p.stage0.as_slice().iter().all(|v| (v - 0.25).abs() < 1e-15));
        assert!(p
            .stages
            .iter()
            .all(|s| s.as_slice().iter().all(|v| (v - 0.25).abs() < 1e-15)));
        assert_eq!(p.stages.len(), 2);
    }

    #[test]
    fn destination_holds_its_mass_at_large_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inst = random_instance(&mut rng, 2, 3, None);
        let y = random_points(&mut rng, 3);
        let (p, _) = backward_policy(&step_cost(&inst, &y), 1e6, &[]).unwrap();
        for stage in &p.stages {
            assert_eq!(stage.get(3, 3), 1.0);
        }
    }

    #[test]
    fn backward_matches_path_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inst = random_instance(&mut rng, 3, 2, None);
        let y = random_points(&mut rng, 2);
        let costs = step_cost(&inst, &y);
        let beta = 2.5;
        let prices = [0.3, 1.1];
        let (p, _) = backward_policy(&costs, beta, &prices).unwrap();
        let paths = enumerate_paths(3, 2);
        for i in 0..3 {
            let weight = |g: &[usize]| {
                let mut c =
                    beta * costs.node.get(i, g[0]) + if g[0] < 2 { prices[g[0]] } else { 0.0 };
                c += beta * costs.step.get(g[0], g[1]) + if g[1] < 2 { prices[g[1]] } else { 0.0 };
                c += beta * costs.step.get(g[1], 2);
                (-c).exp()
            };
            let z: f64 = paths.iter().map(|g| weight(g)).sum();
            let mut total = 0.0;
            for g in &paths {
                let exact = weight(g) / z;
                let got = path_probability(&p, i, g).unwrap();
                assert_relative_eq!(got, exact, epsilon = 1e-12);
                total += got;
            }
            assert_relative_eq!(total, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn usage_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let inst = random_instance(&mut rng, 3, 1, None);
        let y = random_points(&mut rng, 1);
        let (p, _) = backward_policy(&step_cost(&inst, &y), 1.0, &[]).unwrap();
        let c = facility_usage_flpo(&inst, &p);
        let direct: f64 = (0..3).map(|i| inst.weights()[i] * p.stage0.get(i, 0)).sum();
        assert_relative_eq!(c[0], direct, epsilon = 1e-15);

        // Every node goes f_0 -> dest -> dest.
        let inst = random_instance(&mut rng, 3, 3, None);
        let mut stage0 = RowMatrix::zeros(3, 4);
        (0..3).for_each(|i| stage0.set(i, 0, 1.0));
        let mut stage = RowMatrix::zeros(4, 4);
        (0..4).for_each(|s| stage.set(s, 3, 1.0));
        let p = PathPolicy {
            stage0,
            stages: vec![stage.clone(), stage],
        };
        let c = facility_usage_flpo(&inst, &p);
        assert_relative_eq!(c[0], 1.0, epsilon = 1e-15);
        assert_eq!(&c[1..], &[0.0, 0.0]);
    }

    #[test]
    fn single_facility_stationary_point() {
        // One node at 0, destination at 2, path node -> f -> dest: y = 1.
        let nodes = Points::from_rows(&[vec![0.0]]).unwrap();
        let inst = FlpoInstance::new(nodes, None, 1, vec![2.0], None).unwrap();
        let p = PathPolicy {
            stage0: RowMatrix::from_rows(&[vec![1.0, 0.0]]).unwrap(),
            stages: vec![],
        };
        let (y, reg) =
            location_update(&assemble_matrices(&inst, &p), &Points::repeat(&[0.0], 1)).unwrap();
        assert!(!reg);
        assert_relative_eq!(y.row(0)[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn location_update_is_stationary() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inst = random_instance(&mut rng, 4, 3, None);
        let y0 = random_points(&mut rng, 3);
        let (p, _) = backward_policy(&step_cost(&inst, &y0), 3.0, &[]).unwrap();
        let (y, _) = location_update(&assemble_matrices(&inst, &p), &y0).unwrap();
        let h = 1e-5;
        for k in 0..y.as_slice().len() {
            let mut up = y.clone();
            up.as_mut_slice()[k] += h;
            let mut dn = y.clone();
            dn.as_mut_slice()[k] -= h;
            let g = (distortion_flpo(&inst, &p, &up) - distortion_flpo(&inst, &p, &dn)) / (2.0 * h);
            assert!(g.abs() < 1e-8, "gradient {g}");
        }
    }

    #[test]
    fn zero_penalty_weight_matches_unconstrained() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let inst = random_instance(&mut rng, 4, 3, Some(vec![0.3, 0.3, 0.3]));
        let y = random_points(&mut rng, 3);
        let a = solve_policy(
            &inst,
            &y,
            4.0,
            0.0,
            &PenaltyConfig::default(),
            &FixedPointConfig::default(),
        )
        .unwrap();
        let (b, _) = backward_policy(&step_cost(&inst, &y), 4.0, &[]).unwrap();
        assert!(a.policy.stage0.max_abs_diff(&b.stage0) <= 1e-12);
    }

    #[test]
    fn constrained_policy_is_self_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let inst = random_instance(&mut rng, 5, 3, Some(vec![0.2, 0.5, 0.5]));
        let y = random_points(&mut rng, 3);
        let pen = PenaltyConfig::default();
        for bp in [0.01, 1.0, 100.0] {
            let cp = solve_policy(&inst, &y, 5.0, bp, &pen, &FixedPointConfig::default()).unwrap();
            let prices = step_prices(&cp.usage, inst.capacities().unwrap(), bp, &pen);
            let (p, _) = backward_policy(&step_cost(&inst, &y), 5.0, &prices).unwrap();
            let u = facility_usage_flpo(&inst, &p);
            for (a, b) in u.iter().zip(&cp.usage) {
                assert!((a - b).abs() <= 1e-8);
            }
        }
    }

    #[test]
    fn hard_route_prefers_destination_on_ties() {
        assert_eq!(hard_step(&[0.5, 0.0, 0.5]), 2);
        assert_eq!(hard_step(&[0.4, 0.4, 0.2]), 0);
    }
}
