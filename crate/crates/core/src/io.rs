//! JSON instance and solution files, CSV traces, and seeded instance
//! generation.
//!
//! Instance files carry a `"problem"` tag (`"flp"`, `"flpo"` or `"lmdp"`)
//! next to the fields of that problem; unknown fields are rejected.
//!
//! ```json
//! {"problem": "flp", "nodes": [[0, 0], [2, 0]], "facilities": 1}
//! ```

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::flp::{FlpInstance, FlpSolution};
use crate::flpo::{FlpoInstance, FlpoSolution};
use crate::geometry::Points;
use crate::lmdp::{build_state_space, DeliveryPlan, LmdpInstance, Package, Vehicle};
use crate::trace::SolverTrace;

#[derive(Debug, Clone, PartialEq)]
pub enum Instance {
    Flp(FlpInstance),
    Flpo(FlpoInstance),
    Lmdp(LmdpInstance),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProblemKind {
    Flp,
    Flpo,
    Lmdp,
}

impl Instance {
    pub fn kind(&self) -> ProblemKind {
        match self {
            Instance::Flp(_) => ProblemKind::Flp,
            Instance::Flpo(_) => ProblemKind::Flpo,
            Instance::Lmdp(_) => ProblemKind::Lmdp,
        }
    }
}

impl std::fmt::Display for ProblemKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ProblemKind::Flp => "flp",
            ProblemKind::Flpo => "flpo",
            ProblemKind::Lmdp => "lmdp",
        })
    }
}

/// On-disk form of an instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "problem", rename_all = "lowercase")]
pub enum InstanceFile {
    Flp(FlpFile),
    Flpo(FlpoFile),
    Lmdp(LmdpFile),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlpFile {
    pub nodes: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    pub facilities: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacities: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlpoFile {
    pub nodes: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    pub facilities: usize,
    pub destination: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacities: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmdpFile {
    pub depots: Vec<String>,
    pub vehicles: Vec<VehicleFile>,
    pub packages: Vec<PackageFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacity: Option<CapacityFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleFile {
    pub name: String,
    pub route: Vec<String>,
    /// Integer minutes.
    pub times: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PackageFile {
    pub name: String,
    pub origin: String,
    pub destination: String,
}

/// One capacity shared by every vehicle, or one per vehicle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CapacityFile {
    Uniform(f64),
    PerVehicle(Vec<f64>),
}

fn uniform_or(weights: &[f64]) -> Option<Vec<f64>> {
    let u = 1.0 / weights.len() as f64;
    (!weights.iter().all(|w| *w == u)).then(|| weights.to_vec())
}

impl InstanceFile {
    pub fn from_instance(inst: &Instance) -> Self {
        match inst {
            Instance::Flp(i) => InstanceFile::Flp(FlpFile {
                nodes: i.nodes().to_rows(),
                weights: uniform_or(i.weights()),
                facilities: i.facility_count(),
                capacities: i.capacities().map(<[f64]>::to_vec),
            }),
            Instance::Flpo(i) => InstanceFile::Flpo(FlpoFile {
                nodes: i.nodes().to_rows(),
                weights: uniform_or(i.weights()),
                facilities: i.facility_count(),
                destination: i.destination().to_vec(),
                capacities: i.capacities().map(<[f64]>::to_vec),
            }),
            Instance::Lmdp(i) => {
                let depot = |d: usize| i.depots()[d].clone();
                let capacity = i.capacity().map(|w| {
                    if w.iter().all(|v| *v == w[0]) {
                        CapacityFile::Uniform(w[0])
                    } else {
                        CapacityFile::PerVehicle(w.to_vec())
                    }
                });
                InstanceFile::Lmdp(LmdpFile {
                    depots: i.depots().to_vec(),
                    vehicles: i
                        .vehicles()
                        .iter()
                        .map(|v| VehicleFile {
                            name: v.name.clone(),
                            route: v.route.iter().map(|d| depot(*d)).collect(),
                            times: v.times.iter().map(|t| *t as u32).collect(),
                        })
                        .collect(),
                    packages: i
                        .packages()
                        .iter()
                        .map(|p| PackageFile {
                            name: p.name.clone(),
                            origin: depot(p.origin),
                            destination: depot(p.destination),
                        })
                        .collect(),
                    weights: uniform_or(i.weights()),
                    capacity,
                })
            }
        }
    }

    /// Validates the file contents; every problem found is listed.
    pub fn into_instance(self) -> Result<Instance> {
        let schema = |field: &str, e: Error| Error::Schema(vec![format!("{field}: {e}")]);
        match self {
            InstanceFile::Flp(f) => {
                let nodes = Points::from_rows(&f.nodes).map_err(|e| schema("nodes", e))?;
                FlpInstance::new(nodes, f.weights, f.facilities, f.capacities)
                    .map(Instance::Flp)
                    .map_err(|e| schema(field_of(&e), e))
            }
            InstanceFile::Flpo(f) => {
                let nodes = Points::from_rows(&f.nodes).map_err(|e| schema("nodes", e))?;
                FlpoInstance::new(nodes, f.weights, f.facilities, f.destination, f.capacities)
                    .map(Instance::Flpo)
                    .map_err(|e| schema(field_of(&e), e))
            }
            InstanceFile::Lmdp(f) => lmdp_from_file(f).map(Instance::Lmdp),
        }
    }
}

fn field_of(e: &Error) -> &'static str {
    match e {
        Error::InfeasibleCapacities { .. } => "capacities",
        Error::InvalidInstance(m) if m.contains("capacit") => "capacities",
        Error::InvalidInstance(m) if m.contains("weight") => "weights",
        Error::InvalidInstance(m) if m.contains("destination") => "destination",
        _ => "instance",
    }
}

fn lmdp_from_file(f: LmdpFile) -> Result<LmdpInstance> {
    let mut problems = Vec::new();
    let lookup = |name: &str, field: String, problems: &mut Vec<String>| -> usize {
        match f.depots.iter().position(|d| d == name) {
            Some(i) => i,
            None => {
                problems.push(format!("{field}: unknown depot \"{name}\""));
                0
            }
        }
    };
    for (i, d) in f.depots.iter().enumerate() {
        if f.depots[..i].contains(d) {
            problems.push(format!("depots[{i}]: duplicate depot \"{d}\""));
        }
    }
    let vehicles: Vec<Vehicle> = f
        .vehicles
        .iter()
        .enumerate()
        .map(|(k, v)| Vehicle {
            name: v.name.clone(),
            route: v
                .route
                .iter()
                .enumerate()
                .map(|(r, d)| lookup(d, format!("vehicles[{k}].route[{r}]"), &mut problems))
                .collect(),
            times: v.times.iter().map(|t| f64::from(*t)).collect(),
        })
        .collect();
    let packages: Vec<Package> = f
        .packages
        .iter()
        .enumerate()
        .map(|(j, p)| Package {
            name: p.name.clone(),
            origin: lookup(&p.origin, format!("packages[{j}].origin"), &mut problems),
            destination: lookup(
                &p.destination,
                format!("packages[{j}].destination"),
                &mut problems,
            ),
        })
        .collect();
    if !problems.is_empty() {
        return Err(Error::Schema(problems));
    }
    let capacity = f.capacity.map(|c| match c {
        CapacityFile::Uniform(w) => vec![w; vehicles.len()],
        CapacityFile::PerVehicle(w) => w,
    });
    LmdpInstance::new(f.depots, vehicles, packages, f.weights, capacity)
        .map_err(|e| Error::Schema(vec![format!("{}: {e}", field_of(&e))]))
}

/// Parses an instance document. Syntax errors carry line and column;
/// structural problems (unknown or missing fields, bad values) are schema
/// violations.
pub fn parse_instance(text: &str) -> Result<Instance> {
    let file: InstanceFile = serde_json::from_str(text).map_err(|e| {
        use serde_json::error::Category;
        match e.classify() {
            Category::Data => Error::Schema(vec![e.to_string()]),
            _ => Error::Parse {
                line: e.line(),
                column: e.column(),
                message: e.to_string(),
            },
        }
    })?;
    file.into_instance()
}

pub fn load_instance(path: impl AsRef<Path>) -> Result<Instance> {
    parse_instance(&std::fs::read_to_string(path)?)
}

pub fn instance_to_json(inst: &Instance) -> String {
    serde_json::to_string_pretty(&InstanceFile::from_instance(inst)).expect("instances serialize")
        + "\n"
}

pub fn save_instance(path: impl AsRef<Path>, inst: &Instance) -> Result<()> {
    std::fs::write(path, instance_to_json(inst))?;
    Ok(())
}

/// A solved instance, ready to be written.
#[derive(Debug, Clone, Copy)]
pub enum SolutionRef<'a> {
    Flp(&'a FlpSolution),
    Flpo(&'a FlpoInstance, &'a FlpoSolution),
    Lmdp(&'a LmdpInstance, &'a DeliveryPlan),
}

/// JSON document describing a solution. LMDP plans use depot, vehicle and
/// package names; FLPO routes name their steps `f<j>` or `dest`.
pub fn solution_json(sol: SolutionRef<'_>) -> Value {
    match sol {
        SolutionRef::Flp(s) => json!({
            "problem": "flp",
            "feasible": s.feasible,
            "cost": s.cost,
            "locations": s.locations.to_rows(),
            "assignment": s.assignment,
            "usage": s.usage,
        }),
        SolutionRef::Flpo(inst, s) => {
            let m = inst.facility_count();
            let label = |st: &usize| {
                if *st == m {
                    "dest".to_string()
                } else {
                    format!("f{st}")
                }
            };
            json!({
                "problem": "flpo",
                "feasible": s.feasible,
                "cost": s.cost,
                "locations": s.locations.to_rows(),
                "routes": s.routes.iter().map(|r| r.iter().map(label).collect::<Vec<_>>()).collect::<Vec<_>>(),
                "usage": s.usage,
            })
        }
        SolutionRef::Lmdp(inst, plan) => {
            let space = build_state_space(inst);
            let itineraries: Vec<Value> = plan
                .itineraries
                .iter()
                .flatten()
                .map(|it| {
                    json!({
                        "package": inst.packages()[it.package].name,
                        "route": it.describe(inst),
                        "minutes": it.minutes,
                        "legs": it.legs.iter().map(|l| json!({
                            "vehicle": inst.vehicles()[l.vehicle].name,
                            "board": inst.depots()[l.board_depot],
                            "board_minute": l.board_minute,
                            "alight": inst.depots()[l.alight_depot],
                            "alight_minute": l.alight_minute,
                        })).collect::<Vec<_>>(),
                    })
                })
                .collect();
            let occupancy: Vec<Value> = space
                .departures()
                .iter()
                .zip(&plan.occupancy)
                .filter(|(_, o)| **o > 0.0)
                .map(|(d, o)| {
                    json!({
                        "vehicle": inst.vehicles()[d.vehicle].name,
                        "depot": inst.depots()[d.depot],
                        "minute": d.minute,
                        "fraction": o,
                    })
                })
                .collect();
            json!({
                "problem": "lmdp",
                "feasible": plan.feasible,
                "total_cost": plan.total_cost,
                "itineraries": itineraries,
                "undeliverable": plan.undeliverable().iter().map(|j| &inst.packages()[*j].name).collect::<Vec<_>>(),
                "occupancy": occupancy,
            })
        }
    }
}

pub fn save_solution(path: impl AsRef<Path>, sol: SolutionRef<'_>) -> Result<()> {
    let text =
        serde_json::to_string_pretty(&solution_json(sol)).expect("solutions serialize") + "\n";
    std::fs::write(path, text)?;
    Ok(())
}

/// Writes the trace as CSV with the header [`crate::trace::TRACE_HEADER`].
pub fn emit_trace(path: impl AsRef<Path>, trace: &SolverTrace) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    trace.write_csv(&mut out)?;
    out.flush()?;
    Ok(())
}

/// Knobs for [`generate_instance`]. Fields that do not apply to the
/// requested problem are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerateParams {
    pub nodes: usize,
    pub facilities: usize,
    /// Nodes are uniform in `[0, width] x [0, height]`.
    pub width: f64,
    pub height: f64,
    pub capacities: Option<Vec<f64>>,
    /// FLPO destination; uniform in the box when absent.
    pub destination: Option<Vec<f64>>,
    pub depots: usize,
    pub vehicles: usize,
    pub packages: usize,
    /// Longest vehicle route (at least 2).
    pub max_route_len: usize,
    /// Capacity shared by every vehicle.
    pub vehicle_capacity: Option<f64>,
}

impl Default for GenerateParams {
    fn default() -> Self {
        Self {
            nodes: 400,
            facilities: 4,
            width: 4.0,
            height: 4.0,
            capacities: None,
            destination: None,
            depots: 4,
            vehicles: 3,
            packages: 3,
            max_route_len: 4,
            vehicle_capacity: None,
        }
    }
}

/// Seeded random instance. FLP and FLPO nodes are uniform in the box. LMDP
/// vehicles get random routes (no depot repeated back to back) with integer
/// minute gaps of 5 to 30, and every package is placed between two stops of
/// some route, so it can always be delivered.
pub fn generate_instance(
    kind: ProblemKind,
    seed: u64,
    params: &GenerateParams,
) -> Result<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pos = |v: f64, what: &str| {
        if v > 0.0 && v.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("{what} must be positive")))
        }
    };
    match kind {
        ProblemKind::Flp | ProblemKind::Flpo => {
            pos(params.width, "width")?;
            pos(params.height, "height")?;
            if params.nodes == 0 || params.facilities == 0 {
                return Err(Error::InvalidParameter(
                    "node and facility counts must be positive".into(),
                ));
            }
            let rows: Vec<Vec<f64>> = (0..params.nodes)
                .map(|_| {
                    vec![
                        rng.random::<f64>() * params.width,
                        rng.random::<f64>() * params.height,
                    ]
                })
                .collect();
            let nodes = Points::from_rows(&rows)?;
            if kind == ProblemKind::Flp {
                Ok(Instance::Flp(FlpInstance::new(
                    nodes,
                    None,
                    params.facilities,
                    params.capacities.clone(),
                )?))
            } else {
                let dest = match &params.destination {
                    Some(d) => d.clone(),
                    None => vec![
                        rng.random::<f64>() * params.width,
                        rng.random::<f64>() * params.height,
                    ],
                };
                Ok(Instance::Flpo(FlpoInstance::new(
                    nodes,
                    None,
                    params.facilities,
                    dest,
                    params.capacities.clone(),
                )?))
            }
        }
        ProblemKind::Lmdp => {
            if params.depots < 2
                || params.vehicles == 0
                || params.packages == 0
                || params.max_route_len < 2
            {
                return Err(Error::InvalidParameter(
                    "need two depots, one vehicle, one package and routes of length two".into(),
                ));
            }
            let depots: Vec<String> = (1..=params.depots).map(|i| format!("B{i}")).collect();
            let vehicles: Vec<Vehicle> = (0..params.vehicles)
                .map(|k| {
                    let len = rng.random_range(2..=params.max_route_len);
                    let mut route = vec![rng.random_range(0..params.depots)];
                    while route.len() < len {
                        let next = rng.random_range(0..params.depots - 1);
                        let last = *route.last().unwrap();
                        route.push(if next >= last { next + 1 } else { next });
                    }
                    let mut t = f64::from(rng.random_range(0..=30u32));
                    let times = route
                        .iter()
                        .enumerate()
                        .map(|(r, _)| {
                            if r > 0 {
                                t += f64::from(rng.random_range(5..=30u32));
                            }
                            t
                        })
                        .collect();
                    Vehicle {
                        name: format!("V{}", k + 1),
                        route,
                        times,
                    }
                })
                .collect();
            let packages: Vec<Package> = (0..params.packages)
                .map(|j| loop {
                    let v = &vehicles[rng.random_range(0..vehicles.len())];
                    let a = rng.random_range(0..v.route.len() - 1);
                    let b = rng.random_range(a + 1..v.route.len());
                    if v.route[a] != v.route[b] {
                        break Package {
                            name: format!("b{}", j + 1),
                            origin: v.route[a],
                            destination: v.route[b],
                        };
                    }
                })
                .collect();
            let capacity = params.vehicle_capacity.map(|w| vec![w; vehicles.len()]);
            Ok(Instance::Lmdp(LmdpInstance::new(
                depots, vehicles, packages, None, capacity,
            )?))
        }
    }
}
