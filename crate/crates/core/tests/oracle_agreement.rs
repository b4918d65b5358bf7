//! The annealed solvers against the brute-force references on instances
//! small enough to enumerate.

use capanneal::flp::{anneal_flp, assignment_cost, default_schedule};
use capanneal::lmdp::{anneal_lmdp, solve_unconstrained, LmdpInstance, Package, Vehicle};
use capanneal::oracles::{oracle_flp, oracle_lmdp, Witness};
use capanneal::{Error, FixedPointConfig, FlpInstance, PenaltyConfig, Points};

fn two_blobs() -> FlpInstance {
    let nodes = Points::from_rows(&[
        vec![0.0, 0.0],
        vec![0.3, 0.1],
        vec![0.1, 0.4],
        vec![5.0, 5.0],
        vec![5.2, 4.9],
        vec![4.8, 5.3],
    ])
    .unwrap();
    FlpInstance::new(nodes, None, 2, None).unwrap()
}

#[test]
fn oracle_witness_reproduces_its_optimum() {
    let inst = two_blobs();
    let report = oracle_flp(&inst, false).unwrap();
    let Witness::Assignment {
        assignment,
        locations,
    } = &report.witness
    else {
        panic!("facility oracle returned a plan");
    };
    assert_eq!(report.searched, 64);
    let cost = assignment_cost(&inst, locations, assignment);
    assert!((cost - report.optimum).abs() < 1e-12);
}

#[test]
fn annealing_finds_the_separated_clusters() {
    let inst = two_blobs();
    let sol = anneal_flp(
        &inst,
        &default_schedule(&inst),
        &PenaltyConfig::default(),
        &FixedPointConfig::default(),
        3,
    )
    .unwrap();
    let oracle = oracle_flp(&inst, false).unwrap();
    assert!((sol.cost - oracle.optimum).abs() <= 1e-9 * oracle.optimum.max(1.0));
    assert_eq!(sol.assignment[0], sol.assignment[2]);
    assert_ne!(sol.assignment[0], sol.assignment[3]);
}

#[test]
fn tight_capacities_split_a_blob() {
    let base = two_blobs();
    let inst = FlpInstance::new(base.nodes().clone(), None, 2, Some(vec![1.0 / 3.0, 1.0])).unwrap();
    let sol = anneal_flp(
        &inst,
        &default_schedule(&inst),
        &PenaltyConfig::default(),
        &FixedPointConfig::default(),
        0,
    )
    .unwrap();
    let oracle = oracle_flp(&inst, true).unwrap();
    assert!(sol.feasible);
    assert!(sol.usage[0] <= 1.0 / 3.0 + 0.01);
    assert!(sol.cost <= 1.01 * oracle.optimum);
}

fn corridor(capacity: Option<f64>, packages: usize) -> LmdpInstance {
    let depots = vec!["A".to_string(), "B".to_string(), "C".to_string()];
    let vehicles = vec![
        Vehicle {
            name: "express".into(),
            route: vec![0, 2],
            times: vec![0.0, 20.0],
        },
        Vehicle {
            name: "local".into(),
            route: vec![0, 1, 2],
            times: vec![5.0, 25.0, 45.0],
        },
    ];
    let packages = (0..packages)
        .map(|k| Package {
            name: format!("p{k}"),
            origin: 0,
            destination: 2,
        })
        .collect();
    LmdpInstance::new(
        depots,
        vehicles,
        packages,
        None,
        capacity.map(|c| vec![c, c]),
    )
    .unwrap()
}

#[test]
fn capacity_pushes_a_package_onto_the_slow_vehicle() {
    let free = corridor(None, 2);
    assert_eq!(solve_unconstrained(&free).total_cost, 20.0);

    let inst = corridor(Some(0.5), 2);
    let plan = anneal_lmdp(
        &inst,
        &capanneal::lmdp::default_schedule(),
        &PenaltyConfig::default(),
        &FixedPointConfig::default(),
    )
    .unwrap();
    let oracle = oracle_lmdp(&inst).unwrap();
    assert!(plan.feasible);
    assert_eq!(oracle.optimum, 32.5);
    assert!((plan.total_cost - oracle.optimum).abs() < 1e-9);
}

#[test]
fn overfull_timetable_is_reported_infeasible() {
    // Four packages, two vehicles, each vehicle takes a quarter.
    let inst = corridor(Some(0.25), 4);
    assert!(matches!(oracle_lmdp(&inst), Err(Error::Infeasible(_))));
    let plan = anneal_lmdp(
        &inst,
        &capanneal::lmdp::default_schedule(),
        &PenaltyConfig::default(),
        &FixedPointConfig::default(),
    )
    .unwrap();
    assert!(!plan.feasible);
    assert_eq!(plan.itineraries.iter().flatten().count(), 4);
}
