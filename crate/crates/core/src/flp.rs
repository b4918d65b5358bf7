//! Facility location by deterministic annealing, with optional facility
//! capacities enforced through the exponential penalty.
//!
//! Facilities start at the weighted centroid of the nodes. For every `beta`
//! on the outer ladder, `beta_prime` walks the inner ladder; at each pair the
//! solver alternates the (penalized) Gibbs associations with the centroid
//! update until the locations stop moving.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::anneal::{softmax_in_place, AnnealSchedule, FixedPointConfig, PenaltyConfig};
use crate::error::{Error, Result};
use crate::geometry::{argmax_lowest, largest_eigenvalue, sq_dist, Points, RowMatrix};
use crate::prices::{settle, solve_prices, PricedEval, PricedModel};
use crate::trace::{SolverTrace, TraceRow};

/// Relative perturbation applied to every facility after each `beta` step.
pub const SPLIT_NOISE: f64 = 1e-4;
/// Facilities closer than this fraction of the data diameter count as one.
pub const DISTINCT_RADIUS: f64 = 1e-3;
/// Alternation stops once no facility moves more than this fraction of the diameter.
pub const LOCATION_TOL: f64 = 1e-7;
pub const MAX_ALTERNATIONS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlpInstance {
    nodes: Points,
    weights: Vec<f64>,
    facility_count: usize,
    capacities: Option<Vec<f64>>,
}

impl FlpInstance {
    /// Validates the instance and normalizes the weights (uniform when absent).
    pub fn new(
        nodes: Points,
        weights: Option<Vec<f64>>,
        facility_count: usize,
        capacities: Option<Vec<f64>>,
    ) -> Result<Self> {
        let n = nodes.len();
        if n == 0 || facility_count == 0 {
            return Err(Error::InvalidInstance(
                "need at least one node and one facility".into(),
            ));
        }
        if n < facility_count {
            return Err(Error::InvalidInstance(format!(
                "{n} nodes cannot support {facility_count} facilities"
            )));
        }
        let weights = normalize_weights(weights, n)?;
        if let Some(c) = &capacities {
            if c.len() != facility_count {
                return Err(Error::InvalidInstance(format!(
                    "expected {facility_count} capacities, got {}",
                    c.len()
                )));
            }
            if c.iter().any(|v| !(*v > 0.0 && *v <= 1.0)) {
                return Err(Error::InvalidInstance(
                    "capacities must lie in (0, 1]".into(),
                ));
            }
            let sum: f64 = c.iter().sum();
            if sum < 1.0 - 1e-12 {
                return Err(Error::InfeasibleCapacities { sum });
            }
        }
        Ok(Self {
            nodes,
            weights,
            facility_count,
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

    pub fn capacities(&self) -> Option<&[f64]> {
        self.capacities.as_deref()
    }

    /// The same nodes and weights without capacities.
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

pub(crate) fn normalize_weights(weights: Option<Vec<f64>>, n: usize) -> Result<Vec<f64>> {
    match weights {
        None => Ok(vec![1.0 / n as f64; n]),
        Some(w) => {
            if w.len() != n {
                return Err(Error::InvalidInstance(format!(
                    "expected {n} weights, got {}",
                    w.len()
                )));
            }
            if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::InvalidInstance("weights must be nonnegative".into()));
            }
            let total: f64 = w.iter().sum();
            if total <= 0.0 {
                return Err(Error::InvalidInstance("weights sum to zero".into()));
            }
            // Already-normalized weights are kept bit for bit so that files
            // round-trip exactly.
            if (total - 1.0).abs() <= 1e-12 {
                return Ok(w);
            }
            Ok(w.into_iter().map(|v| v / total).collect())
        }
    }
}

/// Facility locations and the row-stochastic node-to-facility associations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlpState {
    pub locations: Points,
    pub associations: RowMatrix,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlpSolution {
    pub locations: Points,
    pub assignment: Vec<usize>,
    pub cost: f64,
    pub usage: Vec<f64>,
    pub feasible: bool,
    #[serde(skip)]
    pub trace: SolverTrace,
    /// Relaxed state at the last `(beta, beta_prime)` pair, before hardening.
    #[serde(skip)]
    pub relaxed: Option<FlpState>,
    pub final_beta: f64,
    pub final_beta_prime: f64,
}

fn sq_distances(inst: &FlpInstance, locations: &Points) -> RowMatrix {
    let n = inst.nodes.len();
    let m = locations.len();
    let mut d = RowMatrix::zeros(n, m);
    for (i, x) in inst.nodes.rows().enumerate() {
        for (j, y) in locations.rows().enumerate() {
            d.set(i, j, sq_dist(x, y));
        }
    }
    d
}

/// `D = sum_i rho_i sum_j p(j|i) ||x_i - y_j||^2`.
pub fn distortion(inst: &FlpInstance, state: &FlpState) -> f64 {
    let d = sq_distances(inst, &state.locations);
    inst.weights
        .iter()
        .enumerate()
        .map(|(i, r)| {
            r * d
                .row(i)
                .iter()
                .zip(state.associations.row(i))
                .map(|(dij, p)| dij * p)
                .sum::<f64>()
        })
        .sum()
}

/// `H = -sum_i rho_i sum_j p(j|i) ln p(j|i)`, with `0 ln 0 = 0`.
pub fn entropy(inst: &FlpInstance, state: &FlpState) -> f64 {
    inst.weights
        .iter()
        .zip(state.associations.rows())
        .map(|(r, row)| r * row_entropy(row))
        .sum()
}

pub(crate) fn row_entropy(row: &[f64]) -> f64 {
    -row.iter()
        .filter(|p| **p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>()
}

/// `F = beta D - H`.
pub fn free_energy(inst: &FlpInstance, state: &FlpState, beta: f64) -> f64 {
    beta * distortion(inst, state) - entropy(inst, state)
}

/// `F + beta' sum_j exp(theta (p_j - c_j))`.
pub fn constrained_free_energy(
    inst: &FlpInstance,
    state: &FlpState,
    beta: f64,
    beta_prime: f64,
    penalty: &PenaltyConfig,
) -> Result<f64> {
    let slacks = slacks(inst, &state.associations)?;
    Ok(free_energy(inst, state, beta) + beta_prime * penalty.value(&slacks))
}

/// `p_j = sum_i rho_i p(j|i)`.
pub fn facility_usage(inst: &FlpInstance, associations: &RowMatrix) -> Vec<f64> {
    let mut usage = vec![0.0; associations.ncols()];
    for (r, row) in inst.weights.iter().zip(associations.rows()) {
        for (u, p) in usage.iter_mut().zip(row) {
            *u += r * p;
        }
    }
    usage
}

fn capacities_of(inst: &FlpInstance) -> Result<&[f64]> {
    inst.capacities()
        .ok_or_else(|| Error::InvalidInstance("instance has no capacities".into()))
}

fn slacks(inst: &FlpInstance, associations: &RowMatrix) -> Result<Vec<f64>> {
    let caps = capacities_of(inst)?;
    Ok(facility_usage(inst, associations)
        .iter()
        .zip(caps)
        .map(|(u, c)| u - c)
        .collect())
}

fn gibbs_with_prices(dist: &RowMatrix, beta: f64, prices: &[f64]) -> (RowMatrix, Vec<f64>) {
    let mut p = RowMatrix::zeros(dist.nrows(), dist.ncols());
    let mut log_z = Vec::with_capacity(dist.nrows());
    for i in 0..dist.nrows() {
        let row = p.row_mut(i);
        for (j, v) in row.iter_mut().enumerate() {
            *v = -beta * dist.get(i, j) - prices.get(j).copied().unwrap_or(0.0);
        }
        log_z.push(softmax_in_place(row));
    }
    (p, log_z)
}

/// `p(j|i) ∝ exp(-beta ||x_i - y_j||^2)`.
pub fn gibbs_unconstrained(inst: &FlpInstance, locations: &Points, beta: f64) -> RowMatrix {
    gibbs_with_prices(&sq_distances(inst, locations), beta, &[]).0
}

/// One application of the penalized Gibbs map:
/// `P -> rows ∝ exp(-beta d(x_i, y_j) - beta' theta e^{theta (p_j - c_j)})`
/// with `p = facility_usage(P)`.
pub fn constrained_gibbs_map(
    inst: &FlpInstance,
    locations: &Points,
    beta: f64,
    beta_prime: f64,
    penalty: &PenaltyConfig,
    associations: &RowMatrix,
) -> Result<RowMatrix> {
    let prices: Vec<f64> = penalty
        .gradient(&slacks(inst, associations)?)
        .into_iter()
        .map(|g| beta_prime * g)
        .collect();
    Ok(gibbs_with_prices(&sq_distances(inst, locations), beta, &prices).0)
}

/// `max |map(P) - P|` for [`constrained_gibbs_map`].
pub fn constrained_residual(
    inst: &FlpInstance,
    locations: &Points,
    beta: f64,
    beta_prime: f64,
    penalty: &PenaltyConfig,
    associations: &RowMatrix,
) -> Result<f64> {
    let mapped = constrained_gibbs_map(inst, locations, beta, beta_prime, penalty, associations)?;
    Ok(mapped.max_abs_diff(associations))
}

struct FlpPriced<'a> {
    dist: &'a RowMatrix,
    weights: &'a [f64],
    beta: f64,
}

impl PricedModel for FlpPriced<'_> {
    fn dim(&self) -> usize {
        self.dist.ncols()
    }

    fn evaluate(&self, prices: &[f64]) -> Result<PricedEval> {
        let (p, log_z) = gibbs_with_prices(self.dist, self.beta, prices);
        let mut usage = vec![0.0; self.dim()];
        let mut log_partition = 0.0;
        for (i, r) in self.weights.iter().enumerate() {
            log_partition += r * log_z[i];
            for (u, pij) in usage.iter_mut().zip(p.row(i)) {
                *u += r * pij;
            }
        }
        Ok(PricedEval {
            log_partition,
            usage,
        })
    }

    fn usage_log_jacobian(&self, prices: &[f64], _at: &PricedEval) -> Result<DMatrix<f64>> {
        let m = self.dim();
        let (p, _) = gibbs_with_prices(self.dist, self.beta, prices);
        let mut cov = DMatrix::zeros(m, m);
        for (i, r) in self.weights.iter().enumerate() {
            let row = p.row(i);
            for j in 0..m {
                cov[(j, j)] += r * row[j];
                for k in 0..m {
                    cov[(j, k)] -= r * row[j] * row[k];
                }
            }
        }
        for k in 0..m {
            for j in 0..m {
                cov[(j, k)] *= -prices[k];
            }
        }
        Ok(cov)
    }
}

/// Solution of the penalized Gibbs equations at fixed locations.
#[derive(Debug, Clone)]
pub struct ConstrainedGibbs {
    pub associations: RowMatrix,
    /// `beta' theta e^{theta (p_j - c_j)}` at the solution.
    pub prices: Vec<f64>,
    pub newton_iterations: usize,
    pub fixed_point_iterations: usize,
}

/// Solves the penalized Gibbs equations at fixed locations.
///
/// The returned associations are a fixed point of [`constrained_gibbs_map`]:
/// the capacity usage they imply reproduces their prices to within `fp.tol`.
/// If Newton's method on the prices stalls short of that, damped iteration
/// of the map takes over.
pub fn gibbs_constrained(
    inst: &FlpInstance,
    locations: &Points,
    beta: f64,
    beta_prime: f64,
    penalty: &PenaltyConfig,
    fp: &FixedPointConfig,
) -> Result<ConstrainedGibbs> {
    gibbs_constrained_warm(inst, locations, beta, beta_prime, penalty, fp, None)
}

pub(crate) fn gibbs_constrained_warm(
    inst: &FlpInstance,
    locations: &Points,
    beta: f64,
    beta_prime: f64,
    penalty: &PenaltyConfig,
    fp: &FixedPointConfig,
    warm: Option<&[f64]>,
) -> Result<ConstrainedGibbs> {
    let caps = capacities_of(inst)?;
    let dist = sq_distances(inst, locations);
    let model = FlpPriced {
        dist: &dist,
        weights: &inst.weights,
        beta,
    };
    let sol = solve_prices(&model, caps, beta_prime, penalty, warm)?;
    let (start, _) = gibbs_with_prices(&dist, beta, &sol.prices);
    let (n, m) = (start.nrows(), start.ncols());

    let map = |flat: &[f64]| -> Result<Vec<f64>> {
        let mut usage = vec![0.0; m];
        for (i, r) in inst.weights.iter().enumerate() {
            for j in 0..m {
                usage[j] += r * flat[i * m + j];
            }
        }
        let slack: Vec<f64> = usage.iter().zip(caps).map(|(u, c)| u - c).collect();
        let prices: Vec<f64> = penalty
            .gradient(&slack)
            .iter()
            .map(|g| beta_prime * g)
            .collect();
        Ok(gibbs_with_prices(&dist, beta, &prices)
            .0
            .as_slice()
            .to_vec())
    };
    let (flat, fixed_point_iterations) = settle(&sol, start.as_slice().to_vec(), map, fp)?;
    let mut associations = RowMatrix::zeros(n, m);
    associations.as_mut_slice().copy_from_slice(&flat);
    Ok(ConstrainedGibbs {
        associations,
        prices: sol.prices,
        newton_iterations: sol.iterations,
        fixed_point_iterations,
    })
}

/// `y_j = sum_i rho_i p(j|i) x_i / sum_i rho_i p(j|i)`. Facilities whose
/// column carries no mass keep their `previous` location; the returned
/// flags mark them.
pub fn centroid_update(
    inst: &FlpInstance,
    associations: &RowMatrix,
    previous: &Points,
) -> (Points, Vec<bool>) {
    let dim = inst.nodes.dim();
    let m = associations.ncols();
    let mut sums = vec![0.0; m * dim];
    let mut mass = vec![0.0; m];
    for (i, x) in inst.nodes.rows().enumerate() {
        let r = inst.weights[i];
        for j in 0..m {
            let w = r * associations.get(i, j);
            mass[j] += w;
            for k in 0..dim {
                sums[j * dim + k] += w * x[k];
            }
        }
    }
    let mut out = previous.clone();
    let mut held = vec![false; m];
    for j in 0..m {
        if mass[j] > 0.0 {
            for k in 0..dim {
                out.row_mut(j)[k] = sums[j * dim + k] / mass[j];
            }
        } else {
            held[j] = true;
        }
    }
    (out, held)
}

/// `1 / (2 lambda_max)` of the weighted covariance of `cluster` (node
/// indices, weighted by the instance weights). Infinite for a cluster with
/// no spread.
pub fn critical_beta(inst: &FlpInstance, cluster: &[usize]) -> Result<f64> {
    if cluster.is_empty() {
        return Err(Error::InvalidParameter("cluster must be nonempty".into()));
    }
    let rows: Vec<Vec<f64>> = cluster
        .iter()
        .map(|&i| inst.nodes.row(i).to_vec())
        .collect();
    let pts = Points::from_rows(&rows)?;
    let w: Vec<f64> = cluster.iter().map(|&i| inst.weights[i]).collect();
    if w.iter().sum::<f64>() <= 0.0 {
        return Ok(f64::INFINITY);
    }
    let lmax = largest_eigenvalue(&pts.covariance(&w));
    if lmax <= 1e-300 {
        Ok(f64::INFINITY)
    } else {
        Ok(1.0 / (2.0 * lmax))
    }
}

/// `argmax_j p(j|i)` per node (ties to the lowest index) and the resulting
/// hard cost `sum_i rho_i ||x_i - y_assign(i)||^2`.
pub fn harden(
    inst: &FlpInstance,
    associations: &RowMatrix,
    locations: &Points,
) -> (Vec<usize>, f64) {
    let assignment: Vec<usize> = associations.rows().map(argmax_lowest).collect();
    let cost = assignment_cost(inst, locations, &assignment);
    (assignment, cost)
}

pub fn assignment_cost(inst: &FlpInstance, locations: &Points, assignment: &[usize]) -> f64 {
    inst.nodes
        .rows()
        .zip(assignment)
        .zip(&inst.weights)
        .map(|((x, &j), r)| r * sq_dist(x, locations.row(j)))
        .sum()
}

/// Ladders used when none are given: `beta` from `1e-3` times the critical
/// value of the whole data set up to `1e3` at rate 1.1, `beta_prime` from
/// `1e-2` to `1e3` at rate 2.
pub fn default_schedule(inst: &FlpInstance) -> AnnealSchedule {
    let all: Vec<usize> = (0..inst.nodes.len()).collect();
    let bcr = critical_beta(inst, &all).unwrap_or(f64::INFINITY);
    let mut s = AnnealSchedule::default();
    if bcr.is_finite() {
        s.beta_min = (1e-3 * bcr).min(s.beta_max / 10.0);
    }
    s
}

fn one_hot(n: usize, m: usize, assignment: &[usize]) -> RowMatrix {
    let mut p = RowMatrix::zeros(n, m);
    for (i, &j) in assignment.iter().enumerate() {
        p.set(i, j, 1.0);
    }
    p
}

/// A hardened point of the annealing path.
struct HardCandidate {
    assignment: Vec<usize>,
    locations: Points,
    cost: f64,
    usage: Vec<f64>,
    max_slack: f64,
    feasible: bool,
}

impl HardCandidate {
    fn new(
        inst: &FlpInstance,
        associations: &RowMatrix,
        locations: &Points,
        penalty: &PenaltyConfig,
    ) -> Self {
        let (n, m) = (inst.nodes.len(), inst.facility_count);
        let (mut assignment, _) = harden(inst, associations, locations);
        let mut usage = hard_usage(inst, &assignment);
        if let Some(caps) = &inst.capacities {
            if max_slack(&usage, caps) > penalty.epsilon_feasible {
                let perm = capacity_matching(&usage, caps);
                for j in assignment.iter_mut() {
                    *j = perm[*j];
                }
                usage = hard_usage(inst, &assignment);
            }
        }
        if inst
            .capacities
            .as_ref()
            .is_none_or(|caps| max_slack(&usage, caps) <= penalty.epsilon_feasible)
        {
            relocate(inst, &mut assignment, penalty.epsilon_feasible);
            usage = hard_usage(inst, &assignment);
        }
        let (hard, _) = centroid_update(inst, &one_hot(n, m, &assignment), locations);
        let cost = assignment_cost(inst, &hard, &assignment);
        let slack = inst
            .capacities
            .as_ref()
            .map_or(f64::NEG_INFINITY, |caps| max_slack(&usage, caps));
        Self {
            assignment,
            locations: hard,
            cost,
            usage,
            max_slack: slack,
            feasible: slack <= penalty.epsilon_feasible,
        }
    }

    /// Feasible beats infeasible; then lower cost (feasible) or lower
    /// violation (infeasible). Ties keep the earlier candidate.
    fn better_than(&self, other: &Self) -> bool {
        match (self.feasible, other.feasible) {
            (true, false) => true,
            (false, true) => false,
            (true, true) => self.cost < other.cost,
            (false, false) => self.max_slack < other.max_slack,
        }
    }
}

/// Single-node relocations that lower the hard cost (clusters served from
/// their means) while keeping every usage within capacity plus `tol`,
/// repeated until none is left. Moving node `x` of weight `r` from cluster
/// `a` (mass `A`, mean `mu_a`) to `b` changes the cost by
/// `r B / (B + r) |x - mu_b|^2 - r A / (A - r) |x - mu_a|^2`.
fn relocate(inst: &FlpInstance, assignment: &mut [usize], tol: f64) {
    const MAX_PASSES: usize = 100;
    let (n, m, dim) = (inst.nodes.len(), inst.facility_count, inst.nodes.dim());
    let mut mass = vec![0.0; m];
    let mut sums = vec![0.0; m * dim];
    for (i, x) in inst.nodes.rows().enumerate() {
        let (j, r) = (assignment[i], inst.weights[i]);
        mass[j] += r;
        for k in 0..dim {
            sums[j * dim + k] += r * x[k];
        }
    }
    let gap_to_mean = |x: &[f64], j: usize, mass: &[f64], sums: &[f64]| -> f64 {
        (0..dim)
            .map(|k| {
                let d = x[k] - sums[j * dim + k] / mass[j];
                d * d
            })
            .sum()
    };
    for _ in 0..MAX_PASSES {
        let mut moved = false;
        for i in 0..n {
            let (a, r, x) = (assignment[i], inst.weights[i], inst.nodes.row(i));
            if mass[a] <= r * (1.0 + 1e-12) {
                continue;
            }
            let leave = r * mass[a] / (mass[a] - r) * gap_to_mean(x, a, &mass, &sums);
            let mut best: Option<(usize, f64)> = None;
            for b in (0..m).filter(|b| *b != a) {
                if let Some(caps) = &inst.capacities {
                    if mass[b] + r > caps[b] + tol {
                        continue;
                    }
                }
                let join = if mass[b] > 0.0 {
                    r * mass[b] / (mass[b] + r) * gap_to_mean(x, b, &mass, &sums)
                } else {
                    0.0
                };
                let delta = join - leave;
                if delta < -1e-12 * leave.max(1e-300) && best.is_none_or(|(_, d)| delta < d) {
                    best = Some((b, delta));
                }
            }
            if let Some((b, _)) = best {
                mass[a] -= r;
                mass[b] += r;
                for k in 0..dim {
                    sums[a * dim + k] -= r * x[k];
                    sums[b * dim + k] += r * x[k];
                }
                assignment[i] = b;
                moved = true;
            }
        }
        if !moved {
            break;
        }
    }
}

fn hard_usage(inst: &FlpInstance, assignment: &[usize]) -> Vec<f64> {
    let mut usage = vec![0.0; inst.facility_count];
    for (&j, r) in assignment.iter().zip(&inst.weights) {
        usage[j] += r;
    }
    usage
}

fn max_slack(usage: &[f64], caps: &[f64]) -> f64 {
    usage
        .iter()
        .zip(caps)
        .map(|(u, c)| u - c)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Relabels hard clusters so that the k-th heaviest cluster goes to the
/// facility with the k-th largest capacity. The cost does not depend on the
/// labels, and if any relabeling fits the capacities this one does.
fn capacity_matching(usage: &[f64], caps: &[f64]) -> Vec<usize> {
    let mut by_mass: Vec<usize> = (0..usage.len()).collect();
    by_mass.sort_by(|a, b| usage[*b].total_cmp(&usage[*a]));
    let mut by_cap: Vec<usize> = (0..caps.len()).collect();
    by_cap.sort_by(|a, b| caps[*b].total_cmp(&caps[*a]));
    let mut perm = vec![0; usage.len()];
    for (cluster, facility) in by_mass.into_iter().zip(by_cap) {
        perm[cluster] = facility;
    }
    perm
}

/// Runs the nested annealing loops and hardens the final associations.
///
/// Unconstrained instances (no capacities) skip the inner `beta_prime`
/// ladder. Every converged `(beta, beta_prime)` point is hardened (the
/// hardened locations are the centroids of the hard clusters); a hardened
/// point that breaks the capacities is relabeled by matching cluster masses
/// to capacities in sorted order. The cheapest feasible point seen wins, or
/// the least violating one if none is feasible.
pub fn anneal_flp(
    inst: &FlpInstance,
    schedule: &AnnealSchedule,
    penalty: &PenaltyConfig,
    fp: &FixedPointConfig,
    seed: u64,
) -> Result<FlpSolution> {
    penalty.validate()?;
    fp.validate()?;
    let constrained = inst.capacities.is_some();
    let blocks = schedule.blocks(constrained)?;
    let diameter = inst.nodes.diameter();
    let (n, m) = (inst.nodes.len(), inst.facility_count);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, SPLIT_NOISE * diameter).expect("positive noise scale");
    let mut locations = Points::repeat(&inst.centroid(), m);
    let mut associations = RowMatrix::filled(n, m, 1.0 / m as f64);
    let mut prices: Option<Vec<f64>> = None;
    let mut trace = SolverTrace::default();
    let (mut last_beta, mut last_beta_prime) = (0.0, 0.0);

    let mut best: Option<HardCandidate> = None;

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
                associations = if constrained {
                    let g = gibbs_constrained_warm(
                        inst,
                        &locations,
                        *beta,
                        beta_prime,
                        penalty,
                        fp,
                        prices.as_deref(),
                    )?;
                    if beta_prime > 0.0 {
                        prices = Some(g.prices);
                    }
                    g.associations
                } else {
                    gibbs_unconstrained(inst, &locations, *beta)
                };
                let (next, held) = centroid_update(inst, &associations, &locations);
                trace.degenerate_updates += held.iter().filter(|h| **h).count();
                let moved = next
                    .as_slice()
                    .iter()
                    .zip(locations.as_slice())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                locations = next;
                if moved <= LOCATION_TOL * diameter || alternations >= MAX_ALTERNATIONS {
                    break;
                }
            }
            let state = FlpState {
                locations: locations.clone(),
                associations: associations.clone(),
            };
            let d = distortion(inst, &state);
            let h = entropy(inst, &state);
            let (penalty_value, max_slack) = if constrained {
                let s = slacks(inst, &associations)?;
                let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (Some(penalty.value(&s)), Some(max))
            } else {
                (None, None)
            };
            trace.push(TraceRow {
                beta: *beta,
                beta_prime,
                free_energy: beta * d - h + beta_prime * penalty_value.unwrap_or(0.0),
                distortion: d,
                penalty: penalty_value,
                max_slack,
                structure: locations.distinct_count(DISTINCT_RADIUS * diameter) as f64,
                inner_iterations: alternations,
            });
            last_beta = *beta;
            last_beta_prime = beta_prime;
            let candidate = HardCandidate::new(inst, &associations, &locations, penalty);
            if best.as_ref().is_none_or(|b| candidate.better_than(b)) {
                best = Some(candidate);
            }
        }
    }

    let relaxed = FlpState {
        locations: locations.clone(),
        associations: associations.clone(),
    };
    let HardCandidate {
        assignment,
        locations: hard_locations,
        cost,
        usage,
        feasible,
        ..
    } = best.expect("the schedule has at least one point");
    Ok(FlpSolution {
        locations: hard_locations,
        assignment,
        cost,
        usage,
        feasible,
        trace,
        relaxed: Some(relaxed),
        final_beta: last_beta,
        final_beta_prime: last_beta_prime,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anneal::damped_fixed_point;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn line(xs: &[f64]) -> Points {
        Points::from_rows(&xs.iter().map(|x| vec![*x]).collect::<Vec<_>>()).unwrap()
    }

    fn random_instance(rng: &mut ChaCha8Rng, n: usize, m: usize) -> FlpInstance {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| vec![rng.random::<f64>(), rng.random()])
            .collect();
        let w: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 0.1).collect();
        FlpInstance::new(Points::from_rows(&rows).unwrap(), Some(w), m, None).unwrap()
    }

    fn random_assoc(rng: &mut ChaCha8Rng, n: usize, m: usize) -> RowMatrix {
        let mut p = RowMatrix::zeros(n, m);
        for i in 0..n {
            let row = p.row_mut(i);
            for v in row.iter_mut() {
                *v = rng.random::<f64>();
            }
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        p
    }

    #[test]
    fn instance_validation() {
        let pts = line(&[0.0, 1.0]);
        assert!(matches!(
            FlpInstance::new(pts.clone(), None, 3, None),
            Err(Error::InvalidInstance(_))
        ));
        assert!(matches!(
            FlpInstance::new(pts.clone(), None, 2, Some(vec![0.4, 0.5])),
            Err(Error::InfeasibleCapacities { .. })
        ));
        let inst = FlpInstance::new(pts, Some(vec![2.0, 6.0]), 1, None).unwrap();
        assert_eq!(inst.weights(), &[0.25, 0.75]);
    }

    #[test]
    fn distortion_examples() {
        let inst = FlpInstance::new(line(&[0.0]), None, 1, None).unwrap();
        let state = FlpState {
            locations: line(&[0.0]),
            associations: RowMatrix::filled(1, 1, 1.0),
        };
        assert_eq!(distortion(&inst, &state), 0.0);

        let inst = FlpInstance::new(line(&[0.0, 2.0]), None, 1, None).unwrap();
        let state = FlpState {
            locations: line(&[1.0]),
            associations: RowMatrix::filled(2, 1, 1.0),
        };
        assert_eq!(distortion(&inst, &state), 1.0);
        assert_relative_eq!(free_energy(&inst, &state, 1.0), 1.0);
    }

    #[test]
    fn distortion_matches_double_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inst = random_instance(&mut rng, 5, 2);
        let locations = Points::from_rows(&[vec![0.2, 0.3], vec![0.9, 0.1]]).unwrap();
        let p = random_assoc(&mut rng, 5, 2);
        let mut naive = 0.0;
        for i in 0..5 {
            for j in 0..2 {
                let x = inst.nodes().row(i);
                let y = locations.row(j);
                let d = (x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2);
                naive += inst.weights()[i] * p.get(i, j) * d;
            }
        }
        let state = FlpState {
            locations,
            associations: p,
        };
        assert_relative_eq!(distortion(&inst, &state), naive, epsilon = 1e-12);
    }

    #[test]
    fn entropy_examples() {
        let inst = FlpInstance::new(line(&[0.0, 1.0, 2.0]), None, 3, None).unwrap();
        let uniform = FlpState {
            locations: line(&[0.0, 1.0, 2.0]),
            associations: RowMatrix::filled(3, 3, 1.0 / 3.0),
        };
        assert_relative_eq!(entropy(&inst, &uniform), 3f64.ln(), epsilon = 1e-12);
        assert_relative_eq!(
            free_energy(&inst, &uniform, 0.0),
            -(3f64.ln()),
            epsilon = 1e-12
        );

        let hard = FlpState {
            locations: uniform.locations.clone(),
            associations: one_hot(3, 3, &[2, 0, 1]),
        };
        assert_eq!(entropy(&inst, &hard), 0.0);

        let single = FlpInstance::new(line(&[0.0, 1.0]), Some(vec![1.0, 0.0]), 2, None).unwrap();
        let state = FlpState {
            locations: line(&[0.0, 1.0]),
            associations: RowMatrix::from_rows(&[vec![0.75, 0.25], vec![0.5, 0.5]]).unwrap(),
        };
        let expected = -(0.75f64 * 0.75f64.ln() + 0.25 * 0.25f64.ln());
        assert_relative_eq!(entropy(&single, &state), expected, epsilon = 1e-15);
        assert_relative_eq!(expected, 0.5623, epsilon = 1e-4);
    }

    #[test]
    fn usage_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let inst = random_instance(&mut rng, 6, 3);
        let u = facility_usage(&inst, &RowMatrix::filled(6, 3, 1.0 / 3.0));
        for v in u {
            assert_relative_eq!(v, 1.0 / 3.0, epsilon = 1e-15);
        }
        let two = FlpInstance::new(line(&[0.0, 1.0]), None, 2, None).unwrap();
        assert_eq!(
            facility_usage(&two, &one_hot(2, 2, &[0, 1])),
            vec![0.5, 0.5]
        );

        let p = random_assoc(&mut rng, 6, 3);
        let u = facility_usage(&inst, &p);
        for j in 0..3 {
            let col: f64 = (0..6).map(|i| inst.weights()[i] * p.get(i, j)).sum();
            assert_relative_eq!(u[j], col, epsilon = 1e-14);
        }
        assert_relative_eq!(u.iter().sum::<f64>(), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn gibbs_unconstrained_examples() {
        let inst = FlpInstance::new(line(&[0.0, 3.0]), None, 2, None).unwrap();
        let p = gibbs_unconstrained(&inst, &line(&[0.0, 1.0]), 0.0);
        assert!(p.as_slice().iter().all(|v| *v == 0.5));

        let p = gibbs_unconstrained(&inst, &line(&[0.0, 1.0]), 1.0);
        let e = (-1f64).exp();
        assert_relative_eq!(p.get(0, 0), 1.0 / (1.0 + e), epsilon = 1e-15);
        assert_relative_eq!(p.get(0, 1), e / (1.0 + e), epsilon = 1e-15);
        assert_relative_eq!(p.get(0, 0), 0.7311, epsilon = 1e-4);

        let p = gibbs_unconstrained(&inst, &line(&[0.0, 1.0]), 1e6);
        assert_eq!(p.row(0), &[1.0, 0.0]);
        assert_eq!(p.row(1), &[0.0, 1.0]);
    }

    #[test]
    fn zero_penalty_weight_reduces_to_unconstrained() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let base = random_instance(&mut rng, 7, 3);
        let inst = FlpInstance::new(
            base.nodes().clone(),
            Some(base.weights().to_vec()),
            3,
            Some(vec![0.2, 0.5, 0.5]),
        )
        .unwrap();
        let y = Points::from_rows(&[vec![0.1, 0.1], vec![0.5, 0.9], vec![0.8, 0.2]]).unwrap();
        let a = gibbs_unconstrained(&inst, &y, 3.0);
        let b = gibbs_constrained(
            &inst,
            &y,
            3.0,
            0.0,
            &PenaltyConfig::default(),
            &FixedPointConfig::default(),
        )
        .unwrap();
        assert!(a.max_abs_diff(&b.associations) <= 1e-12);
    }

    #[test]
    fn constrained_gibbs_is_symmetric_on_mirrored_instance() {
        let inst =
            FlpInstance::new(line(&[-2.0, -1.0, 1.0, 2.0]), None, 2, Some(vec![0.5, 0.5])).unwrap();
        let y = line(&[-1.0, 1.0]);
        let g = gibbs_constrained(
            &inst,
            &y,
            2.0,
            10.0,
            &PenaltyConfig::default(),
            &FixedPointConfig::default(),
        )
        .unwrap();
        let u = facility_usage(&inst, &g.associations);
        assert_relative_eq!(u[0], u[1], epsilon = 1e-12);
    }

    #[test]
    fn constrained_gibbs_residual_on_small_instance() {
        let inst = FlpInstance::new(line(&[0.0, 1.0]), None, 2, Some(vec![0.4, 1.0])).unwrap();
        let y = line(&[0.1, 0.8]);
        let pen = PenaltyConfig::default();
        let fp = FixedPointConfig::default();
        for (beta, beta_prime) in [(1.0, 0.1), (10.0, 10.0), (1e3, 1e3)] {
            let g = gibbs_constrained(&inst, &y, beta, beta_prime, &pen, &fp).unwrap();
            let r =
                constrained_residual(&inst, &y, beta, beta_prime, &pen, &g.associations).unwrap();
            assert!(r <= 1e-8, "residual {r} at ({beta}, {beta_prime})");
            assert!(g.associations.max_row_defect() <= 1e-12);
        }
    }

    #[test]
    fn multi_start_damped_iteration_agrees() {
        // Gentle penalty so the plain damped map is contractive; every start
        // must land on the same point.
        let inst = FlpInstance::new(line(&[0.0, 1.0]), None, 2, Some(vec![0.4, 1.0])).unwrap();
        let y = line(&[0.2, 0.7]);
        let pen = PenaltyConfig::default();
        let fp = FixedPointConfig::default();
        let (beta, beta_prime) = (1.0, 0.01);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut ends = Vec::new();
        for _ in 0..5 {
            let init = random_assoc(&mut rng, 2, 2);
            let map = |flat: &[f64]| {
                let mut p = RowMatrix::zeros(2, 2);
                p.as_mut_slice().copy_from_slice(flat);
                Ok(
                    constrained_gibbs_map(&inst, &y, beta, beta_prime, &pen, &p)?
                        .as_slice()
                        .to_vec(),
                )
            };
            let (x, _) = damped_fixed_point(map, init.as_slice().to_vec(), &fp).unwrap();
            ends.push(x);
        }
        for a in &ends {
            for b in &ends {
                let d = a
                    .iter()
                    .zip(b)
                    .map(|(u, v)| (u - v).abs())
                    .fold(0.0, f64::max);
                assert!(d <= 10.0 * fp.tol);
            }
        }
        let newton = gibbs_constrained(&inst, &y, beta, beta_prime, &pen, &fp).unwrap();
        let d = newton
            .associations
            .as_slice()
            .iter()
            .zip(&ends[0])
            .map(|(u, v)| (u - v).abs())
            .fold(0.0, f64::max);
        assert!(d <= 10.0 * fp.tol);
    }

    #[test]
    fn centroid_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inst = random_instance(&mut rng, 6, 2);
        let prev = Points::repeat(&[9.0, 9.0], 2);
        let (y, held) = centroid_update(&inst, &RowMatrix::filled(6, 2, 0.5), &prev);
        let c = inst.centroid();
        for row in y.rows() {
            assert_relative_eq!(row[0], c[0], epsilon = 1e-12);
            assert_relative_eq!(row[1], c[1], epsilon = 1e-12);
        }
        assert_eq!(held, vec![false, false]);

        let (y, held) = centroid_update(&inst, &one_hot(6, 2, &[0, 0, 0, 0, 0, 0]), &prev);
        assert_eq!(held, vec![false, true]);
        assert_eq!(y.row(1), &[9.0, 9.0]);

        let p = random_assoc(&mut rng, 6, 2);
        let (y, _) = centroid_update(&inst, &p, &prev);
        for j in 0..2 {
            let mass: f64 = (0..6).map(|i| inst.weights()[i] * p.get(i, j)).sum();
            for k in 0..2 {
                let s: f64 = (0..6)
                    .map(|i| inst.weights()[i] * p.get(i, j) * inst.nodes().row(i)[k])
                    .sum();
                assert_relative_eq!(y.row(j)[k], s / mass, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn critical_beta_examples() {
        let inst = FlpInstance::new(line(&[-1.0, 1.0]), None, 2, None).unwrap();
        assert_relative_eq!(critical_beta(&inst, &[0, 1]).unwrap(), 0.5, epsilon = 1e-12);
        assert_eq!(critical_beta(&inst, &[0]).unwrap(), f64::INFINITY);
        assert!(critical_beta(&inst, &[]).is_err());
    }

    #[test]
    fn harden_examples() {
        let inst = FlpInstance::new(line(&[0.0, 1.0, 2.0]), None, 2, None).unwrap();
        let y = line(&[0.0, 2.0]);
        let (a, _) = harden(&inst, &one_hot(3, 2, &[1, 0, 1]), &y);
        assert_eq!(a, vec![1, 0, 1]);
        let (a, cost) = harden(&inst, &RowMatrix::filled(3, 2, 0.5), &y);
        assert_eq!(a, vec![0, 0, 0]);
        assert_relative_eq!(cost, (0.0 + 1.0 + 4.0) / 3.0);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_assoc(&mut rng, 3, 2);
        let (a, _) = harden(&inst, &p, &y);
        for i in 0..3 {
            let row = p.row(i);
            let best = if row[1] > row[0] { 1 } else { 0 };
            assert_eq!(a[i], best);
        }
    }

    #[test]
    fn single_facility_lands_on_centroid() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let inst = random_instance(&mut rng, 9, 1);
        let sched = AnnealSchedule {
            beta_min: 0.1,
            beta_max: 10.0,
            alpha: 2.0,
            ..AnnealSchedule::default()
        };
        let sol = anneal_flp(
            &inst,
            &sched,
            &PenaltyConfig::default(),
            &FixedPointConfig::default(),
            1,
        )
        .unwrap();
        let c = inst.centroid();
        assert_relative_eq!(sol.locations.row(0)[0], c[0], epsilon = 1e-12);
        let var: f64 = inst
            .nodes()
            .rows()
            .zip(inst.weights())
            .map(|(x, r)| r * sq_dist(x, &c))
            .sum();
        assert_relative_eq!(sol.cost, var, epsilon = 1e-12);
        assert!(sol.feasible);
    }

    #[test]
    fn annealing_is_deterministic_per_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let base = random_instance(&mut rng, 12, 3);
        let inst =
            FlpInstance::new(base.nodes().clone(), None, 3, Some(vec![0.3, 0.4, 0.5])).unwrap();
        let sched = AnnealSchedule {
            beta_min: 0.05,
            beta_max: 100.0,
            alpha: 1.5,
            betap_min: 0.01,
            betap_max: 100.0,
            alphap: 4.0,
            reset_betap: true,
        };
        let a = anneal_flp(
            &inst,
            &sched,
            &PenaltyConfig::default(),
            &FixedPointConfig::default(),
            42,
        )
        .unwrap();
        let b = anneal_flp(
            &inst,
            &sched,
            &PenaltyConfig::default(),
            &FixedPointConfig::default(),
            42,
        )
        .unwrap();
        assert_eq!(a.assignment, b.assignment);
        assert_eq!(a.locations, b.locations);
        assert_eq!(a.trace, b.trace);
        assert!(a.trace.is_monotone());
    }
}
