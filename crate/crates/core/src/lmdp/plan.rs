use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::{build_state_space, LmdpInstance, LmdpStateSpace, State};
use crate::trace::SolverTrace;

/// One ride: `vehicle` from `board_depot` to the next depot on its route.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Leg {
    pub vehicle: usize,
    pub board_depot: usize,
    pub board_minute: f64,
    pub alight_depot: usize,
    pub alight_minute: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Itinerary {
    pub package: usize,
    /// Departure states visited, as state indices of the state space.
    pub departures: Vec<usize>,
    pub legs: Vec<Leg>,
    /// Minute of arrival at the destination (the package is ready at 0).
    pub minutes: f64,
}

impl Itinerary {
    pub(crate) fn from_departures(
        inst: &LmdpInstance,
        space: &LmdpStateSpace,
        package: usize,
        departures: Vec<usize>,
    ) -> Self {
        let legs: Vec<Leg> = departures
            .iter()
            .map(|&s| {
                let d = space.departures()[space.departure_ordinal(s).expect("departure state")];
                let v = &inst.vehicles()[d.vehicle];
                Leg {
                    vehicle: d.vehicle,
                    board_depot: d.depot,
                    board_minute: d.minute,
                    alight_depot: v.route[d.position + 1],
                    alight_minute: v.times[d.position + 1],
                }
            })
            .collect();
        let minutes = legs.last().map_or(0.0, |l| l.alight_minute);
        Self {
            package,
            departures,
            legs,
            minutes,
        }
    }

    /// Human-readable form such as `B2 -(V3)-> B3 -(V3)-> B4`.
    pub fn describe(&self, inst: &LmdpInstance) -> String {
        let mut s = match self.legs.first() {
            Some(l) => inst.depots()[l.board_depot].clone(),
            None => return String::new(),
        };
        for l in &self.legs {
            s.push_str(&format!(
                " -({})-> {}",
                inst.vehicles()[l.vehicle].name,
                inst.depots()[l.alight_depot]
            ));
        }
        s
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeliveryPlan {
    /// Indexed by package; `None` marks an undeliverable package.
    pub itineraries: Vec<Option<Itinerary>>,
    /// Weighted fraction of packages in each departure state, in state-space order.
    pub occupancy: Vec<f64>,
    /// `sum_b rho_b * minutes_b` over delivered packages.
    pub total_cost: f64,
    /// Every occupancy within its vehicle capacity plus the tolerance.
    pub feasible: bool,
    #[serde(skip)]
    pub trace: SolverTrace,
}

impl DeliveryPlan {
    pub(crate) fn from_itineraries(
        inst: &LmdpInstance,
        space: &LmdpStateSpace,
        itineraries: Vec<Option<Itinerary>>,
        tolerance: f64,
    ) -> Self {
        let occupancy = occupancy_of(
            inst,
            space,
            itineraries
                .iter()
                .map(|i| i.as_ref().map(|i| &i.departures[..])),
        );
        let total_cost = itineraries
            .iter()
            .zip(inst.weights())
            .filter_map(|(i, r)| i.as_ref().map(|i| r * i.minutes))
            .sum();
        let feasible = within_capacity(inst, space, &occupancy, tolerance);
        Self {
            itineraries,
            occupancy,
            total_cost,
            feasible,
            trace: SolverTrace::default(),
        }
    }

    pub fn undeliverable(&self) -> Vec<usize> {
        (0..self.itineraries.len())
            .filter(|&j| self.itineraries[j].is_none())
            .collect()
    }

    pub fn max_occupancy(&self) -> f64 {
        self.occupancy.iter().copied().fold(0.0, f64::max)
    }
}

pub(crate) fn occupancy_of<'a>(
    inst: &LmdpInstance,
    space: &LmdpStateSpace,
    plans: impl Iterator<Item = Option<&'a [usize]>>,
) -> Vec<f64> {
    let mut occ = vec![0.0; space.departure_count()];
    for (plan, r) in plans.zip(inst.weights()) {
        for &s in plan.unwrap_or(&[]) {
            occ[space.departure_ordinal(s).expect("departure state")] += r;
        }
    }
    occ
}

pub(crate) fn within_capacity(
    inst: &LmdpInstance,
    space: &LmdpStateSpace,
    occupancy: &[f64],
    tolerance: f64,
) -> bool {
    match inst.capacity() {
        None => true,
        Some(w) => occupancy
            .iter()
            .zip(space.departures())
            .all(|(o, d)| *o <= w[d.vehicle] + tolerance),
    }
}

/// Minimum-time itinerary of every package by backward dynamic programming,
/// ignoring capacities. Among equally fast continuations the
/// lexicographically smallest next state wins (see
/// [`LmdpStateSpace::tie_key`]).
pub fn solve_unconstrained(inst: &LmdpInstance) -> DeliveryPlan {
    let space = build_state_space(inst);
    let itineraries = (0..inst.packages().len())
        .map(|j| {
            shortest_itinerary(&space, j)
                .map(|deps| Itinerary::from_departures(inst, &space, j, deps))
        })
        .collect();
    DeliveryPlan::from_itineraries(inst, &space, itineraries, 0.0)
}

const TIE_TOL: f64 = 1e-9;

pub(crate) fn shortest_itinerary(space: &LmdpStateSpace, package: usize) -> Option<Vec<usize>> {
    let n = space.len();
    let h = space.horizon();
    let goal = space.terminal_index(space.destinations()[package]);
    let mut values = vec![vec![f64::INFINITY; n]; h + 1];
    values[h][goal] = 0.0;
    for t in (0..h).rev() {
        for s in 0..n {
            values[t][s] = space
                .arcs(s)
                .iter()
                .map(|a| a.cost + values[t + 1][a.to])
                .fold(f64::INFINITY, f64::min);
        }
    }
    if !values[0][package].is_finite() {
        return None;
    }
    let mut deps = Vec::new();
    let mut s = package;
    for t in 0..h {
        let mut best: Option<(usize, f64)> = None;
        for a in space.arcs(s) {
            let v = a.cost + values[t + 1][a.to];
            if v.is_finite() && best.is_none_or(|(_, b)| v < b - TIE_TOL) {
                best = Some((a.to, v));
            }
        }
        let (next, _) = best?;
        if let State::Terminal(_) = space.state(next) {
            return Some(deps);
        }
        deps.push(next);
        s = next;
    }
    None
}

/// A candidate itinerary for capacity-aware rounding.
#[derive(Debug, Clone)]
pub(crate) struct Candidate {
    pub departures: Vec<usize>,
    pub minutes: f64,
}

pub(crate) fn itinerary_minutes(space: &LmdpStateSpace, deps: &[usize]) -> f64 {
    deps.last().map_or(0.0, |&s| {
        let d = space.departures()[space.departure_ordinal(s).unwrap()];
        // The arrival at the next route depot: the cheapest terminal arc.
        space
            .arcs(s)
            .iter()
            .filter(|a| matches!(space.state(a.to), State::Terminal(_)))
            .map(|a| d.minute + a.cost)
            .next()
            .unwrap_or(f64::INFINITY)
    })
}

pub(crate) fn lexicographic(space: &LmdpStateSpace, a: &[usize], b: &[usize]) -> Ordering {
    a.iter()
        .map(|s| space.tie_key(*s))
        .cmp(b.iter().map(|s| space.tie_key(*s)))
}

/// Lowest-cost joint choice of one candidate per package such that every
/// departure-state occupancy stays within its vehicle capacity. Packages
/// are decided in index order and candidates tried in lexicographic order;
/// only strictly cheaper plans replace the incumbent, so the lexicographically
/// smallest optimal plan is returned. `None` when no combination fits or the
/// node budget runs out before any plan is found.
pub(crate) fn round_with_capacity(
    inst: &LmdpInstance,
    space: &LmdpStateSpace,
    candidates: &[Vec<Candidate>],
    node_budget: usize,
) -> Option<Vec<usize>> {
    let caps: Vec<f64> = match inst.capacity() {
        Some(w) => space
            .departures()
            .iter()
            .map(|d| w[d.vehicle] + 1e-9)
            .collect(),
        None => vec![f64::INFINITY; space.departure_count()],
    };
    let weights = inst.weights();
    let rest_bound: Vec<f64> = {
        let mut acc = vec![0.0; candidates.len() + 1];
        for j in (0..candidates.len()).rev() {
            let min = candidates[j]
                .iter()
                .map(|c| c.minutes)
                .fold(f64::INFINITY, f64::min);
            acc[j] = acc[j + 1]
                + if min.is_finite() {
                    weights[j] * min
                } else {
                    0.0
                };
        }
        acc
    };

    struct Search<'a> {
        space: &'a LmdpStateSpace,
        candidates: &'a [Vec<Candidate>],
        weights: &'a [f64],
        caps: Vec<f64>,
        rest_bound: Vec<f64>,
        occ: Vec<f64>,
        choice: Vec<usize>,
        best: Option<(f64, Vec<usize>)>,
        budget: usize,
    }

    impl Search<'_> {
        fn go(&mut self, j: usize, cost: f64) {
            if self.budget == 0 {
                return;
            }
            self.budget -= 1;
            if let Some((b, _)) = &self.best {
                if cost + self.rest_bound[j] >= b - TIE_TOL {
                    return;
                }
            }
            if j == self.candidates.len() {
                self.best = Some((cost, self.choice.clone()));
                return;
            }
            if self.candidates[j].is_empty() {
                self.choice.push(usize::MAX);
                self.go(j + 1, cost);
                self.choice.pop();
                return;
            }
            for c in 0..self.candidates[j].len() {
                let cand = &self.candidates[j][c];
                let fits = cand.departures.iter().all(|&s| {
                    let q = self.space.departure_ordinal(s).unwrap();
                    self.occ[q] + self.weights[j] <= self.caps[q]
                });
                if !fits {
                    continue;
                }
                for &s in &cand.departures {
                    self.occ[self.space.departure_ordinal(s).unwrap()] += self.weights[j];
                }
                self.choice.push(c);
                self.go(j + 1, cost + self.weights[j] * cand.minutes);
                self.choice.pop();
                for &s in &self.candidates[j][c].departures {
                    self.occ[self.space.departure_ordinal(s).unwrap()] -= self.weights[j];
                }
            }
        }
    }

    let mut search = Search {
        space,
        candidates,
        weights,
        caps,
        rest_bound,
        occ: vec![0.0; space.departure_count()],
        choice: Vec::new(),
        best: None,
        budget: node_budget,
    };
    search.go(0, 0.0);
    search.best.map(|(_, c)| c)
}
