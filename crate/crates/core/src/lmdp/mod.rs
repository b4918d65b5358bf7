//! Last-mile delivery over a timetable of service vehicles.
//!
//! Packages ride scheduled vehicles from their origin depot to their
//! destination depot, possibly transferring between vehicles. The problem
//! is a finite-horizon deterministic MDP whose states are
//!
//! * one *package state* per package (where every itinerary starts),
//! * one *departure state* per (vehicle, route position): "aboard this
//!   vehicle as it leaves this depot",
//! * one *terminal* per depot (absorbing, zero cost).
//!
//! A vehicle's arrival minute at a route depot equals that depot's listed
//! minute: vehicles do not dwell, and the last listed minute of a route is
//! its final arrival. A package may board any vehicle leaving its origin,
//! may transfer at the depot it was just carried to onto any vehicle that
//! leaves no earlier than the arrival, and finishes by alighting at its
//! destination. Costs are elapsed minutes, so an itinerary's total cost is
//! the minute it reaches its destination.
//!
//! Vehicle capacities bound the weighted fraction of packages occupying each
//! of the vehicle's departure states.

mod plan;
mod policy;

pub use plan::{solve_unconstrained, DeliveryPlan, Itinerary, Leg};
pub use policy::{anneal_lmdp, default_schedule, gibbs_policy, vehicle_usage, LmdpPolicy};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flp::normalize_weights;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vehicle {
    pub name: String,
    /// Depot indices in visiting order.
    pub route: Vec<usize>,
    /// Departure minute at each route depot (arrival minute for the last).
    pub times: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Package {
    pub name: String,
    pub origin: usize,
    pub destination: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmdpInstance {
    depots: Vec<String>,
    vehicles: Vec<Vehicle>,
    packages: Vec<Package>,
    weights: Vec<f64>,
    capacity: Option<Vec<f64>>,
}

impl LmdpInstance {
    /// Validates the timetable and normalizes package weights (uniform when
    /// absent). `capacity` holds one fraction per vehicle.
    pub fn new(
        depots: Vec<String>,
        vehicles: Vec<Vehicle>,
        packages: Vec<Package>,
        weights: Option<Vec<f64>>,
        capacity: Option<Vec<f64>>,
    ) -> Result<Self> {
        let d = depots.len();
        if d == 0 || vehicles.is_empty() || packages.is_empty() {
            return Err(Error::InvalidInstance(
                "need at least one depot, vehicle and package".into(),
            ));
        }
        for v in &vehicles {
            if v.route.len() < 2 {
                return Err(Error::InvalidInstance(format!(
                    "vehicle {} needs a route of at least two depots",
                    v.name
                )));
            }
            if v.times.len() != v.route.len() {
                return Err(Error::InvalidInstance(format!(
                    "vehicle {} lists {} times for {} depots",
                    v.name,
                    v.times.len(),
                    v.route.len()
                )));
            }
            if let Some(bad) = v.route.iter().find(|b| **b >= d) {
                return Err(Error::InvalidInstance(format!(
                    "vehicle {} references unknown depot {bad}",
                    v.name
                )));
            }
            if v.times.iter().any(|t| !(t.is_finite() && *t >= 0.0))
                || v.times.windows(2).any(|w| w[1] <= w[0])
            {
                return Err(Error::InvalidInstance(format!(
                    "vehicle {} needs nonnegative, strictly increasing times",
                    v.name
                )));
            }
        }
        for p in &packages {
            if p.origin >= d || p.destination >= d {
                return Err(Error::InvalidInstance(format!(
                    "package {} references an unknown depot",
                    p.name
                )));
            }
            if p.origin == p.destination {
                return Err(Error::InvalidInstance(format!(
                    "package {} already sits at its destination",
                    p.name
                )));
            }
        }
        let weights = normalize_weights(weights, packages.len())?;
        if let Some(w) = &capacity {
            if w.len() != vehicles.len() {
                return Err(Error::InvalidInstance(format!(
                    "expected {} capacities, got {}",
                    vehicles.len(),
                    w.len()
                )));
            }
            if w.iter().any(|v| !(*v > 0.0 && *v <= 1.0)) {
                return Err(Error::InvalidInstance(
                    "capacities must lie in (0, 1]".into(),
                ));
            }
        }
        Ok(Self {
            depots,
            vehicles,
            packages,
            weights,
            capacity,
        })
    }

    pub fn depots(&self) -> &[String] {
        &self.depots
    }

    pub fn vehicles(&self) -> &[Vehicle] {
        &self.vehicles
    }

    pub fn packages(&self) -> &[Package] {
        &self.packages
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn capacity(&self) -> Option<&[f64]> {
        self.capacity.as_deref()
    }

    /// The same timetable with the given per-vehicle capacities.
    pub fn with_capacity(&self, capacity: Option<Vec<f64>>) -> Result<Self> {
        Self::new(
            self.depots.clone(),
            self.vehicles.clone(),
            self.packages.clone(),
            Some(self.weights.clone()),
            capacity,
        )
    }

    pub fn depot_index(&self, name: &str) -> Option<usize> {
        self.depots.iter().position(|d| d == name)
    }
}

/// A state of the delivery MDP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum State {
    Package(usize),
    Departure { vehicle: usize, position: usize },
    Terminal(usize),
}

/// A departure state: `vehicle` leaving `depot` (its route position
/// `position`) at `minute`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Departure {
    pub vehicle: usize,
    pub position: usize,
    pub depot: usize,
    pub minute: f64,
}

/// A package-independent move. Moves into terminals are listed for every
/// terminal reachable by timetable; only the package's own destination
/// terminal is admissible (see [`transition_cost`]).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Arc {
    pub to: usize,
    pub cost: f64,
}

/// The stage graph. States are numbered packages first, then departure
/// states (vehicle by vehicle, in route order), then one terminal per depot.
#[derive(Debug, Clone)]
pub struct LmdpStateSpace {
    package_count: usize,
    departures: Vec<Departure>,
    depot_count: usize,
    first_departure: Vec<usize>,
    arcs: Vec<Vec<Arc>>,
    destinations: Vec<usize>,
    horizon: usize,
}

impl LmdpStateSpace {
    pub fn len(&self) -> usize {
        self.package_count + self.departures.len() + self.depot_count
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn package_count(&self) -> usize {
        self.package_count
    }

    pub fn departure_count(&self) -> usize {
        self.departures.len()
    }

    pub fn terminal_count(&self) -> usize {
        self.depot_count
    }

    pub fn departures(&self) -> &[Departure] {
        &self.departures
    }

    /// Number of transitions every itinerary is padded to.
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Sets the horizon, which must lie in `[departures + 1, |S|]` so that
    /// every simple itinerary fits.
    pub fn set_horizon(&mut self, horizon: usize) -> Result<()> {
        if horizon < self.departures.len() + 1
            || horizon > self.len().max(self.departures.len() + 2)
        {
            return Err(Error::InvalidParameter(format!(
                "horizon {horizon} outside [{}, {}]",
                self.departures.len() + 1,
                self.len()
            )));
        }
        self.horizon = horizon;
        Ok(())
    }

    pub fn index(&self, state: State) -> usize {
        match state {
            State::Package(j) => j,
            State::Departure { vehicle, position } => {
                self.package_count + self.first_departure[vehicle] + position
            }
            State::Terminal(d) => self.package_count + self.departures.len() + d,
        }
    }

    pub fn state(&self, index: usize) -> State {
        let r = self.package_count;
        let k = self.departures.len();
        if index < r {
            State::Package(index)
        } else if index < r + k {
            let d = self.departures[index - r];
            State::Departure {
                vehicle: d.vehicle,
                position: d.position,
            }
        } else {
            State::Terminal(index - r - k)
        }
    }

    /// Ordinal of a departure state among all departure states.
    pub fn departure_ordinal(&self, index: usize) -> Option<usize> {
        let r = self.package_count;
        (index >= r && index < r + self.departures.len()).then(|| index - r)
    }

    pub fn terminal_index(&self, depot: usize) -> usize {
        self.package_count + self.departures.len() + depot
    }

    pub fn arcs(&self, index: usize) -> &[Arc] {
        &self.arcs[index]
    }

    /// Destination depot of each package.
    pub fn destinations(&self) -> &[usize] {
        &self.destinations
    }

    /// Sort key used for every deterministic tie-break: terminals first,
    /// then departure states by (vehicle, depot, route position).
    pub fn tie_key(&self, index: usize) -> (u8, usize, usize, usize) {
        match self.state(index) {
            State::Terminal(d) => (0, 0, d, 0),
            State::Departure { vehicle, position } => {
                let dep = self.departures[self.departure_ordinal(index).unwrap()];
                (1, vehicle, dep.depot, position)
            }
            State::Package(j) => (2, j, 0, 0),
        }
    }
}

/// Builds the stage graph of an instance, with the default horizon
/// `departures + 2`.
pub fn build_state_space(inst: &LmdpInstance) -> LmdpStateSpace {
    let r = inst.packages.len();
    let mut departures = Vec::new();
    let mut first_departure = Vec::with_capacity(inst.vehicles.len());
    for (k, v) in inst.vehicles.iter().enumerate() {
        first_departure.push(departures.len());
        for (pos, (&depot, &minute)) in v.route.iter().zip(&v.times).enumerate() {
            departures.push(Departure {
                vehicle: k,
                position: pos,
                depot,
                minute,
            });
        }
    }
    let kdep = departures.len();
    let dcount = inst.depots.len();
    let mut space = LmdpStateSpace {
        package_count: r,
        departures,
        depot_count: dcount,
        first_departure,
        arcs: Vec::new(),
        destinations: inst.packages.iter().map(|p| p.destination).collect(),
        horizon: kdep + 2,
    };

    let mut arcs = vec![Vec::new(); r + kdep + dcount];
    for (j, p) in inst.packages.iter().enumerate() {
        for (q, d) in space.departures.iter().enumerate() {
            if d.depot == p.origin {
                arcs[j].push(Arc {
                    to: r + q,
                    cost: d.minute,
                });
            }
        }
    }
    for (q, d) in space.departures.iter().enumerate() {
        let v = &inst.vehicles[d.vehicle];
        let Some((&next_depot, &arrival)) =
            v.route.get(d.position + 1).zip(v.times.get(d.position + 1))
        else {
            continue;
        };
        for (q2, d2) in space.departures.iter().enumerate() {
            if d2.depot == next_depot && d2.minute >= arrival {
                arcs[r + q].push(Arc {
                    to: r + q2,
                    cost: d2.minute - d.minute,
                });
            }
        }
        arcs[r + q].push(Arc {
            to: r + kdep + next_depot,
            cost: arrival - d.minute,
        });
    }
    for t in 0..dcount {
        arcs[r + kdep + t].push(Arc {
            to: r + kdep + t,
            cost: 0.0,
        });
    }
    for list in &mut arcs {
        list.sort_by_key(|a| space.tie_key(a.to));
    }
    space.arcs = arcs;
    space
}

/// Minutes spent moving package `package` from state `from` to state `to`,
/// or `+inf` when the move is not allowed.
pub fn transition_cost(space: &LmdpStateSpace, from: usize, to: usize, package: usize) -> f64 {
    if let State::Package(j) = space.state(from) {
        if j != package {
            return f64::INFINITY;
        }
    }
    if let State::Terminal(d) = space.state(to) {
        if d != space.destinations[package] {
            return f64::INFINITY;
        }
    }
    space.arcs[from]
        .iter()
        .find(|a| a.to == to)
        .map_or(f64::INFINITY, |a| a.cost)
}

#[cfg(test)]
pub(crate) use tests::four_depot_instance;
