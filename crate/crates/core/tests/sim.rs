mod common;

use dmpc::config::{LeaderProfile, ScenarioConfig};
use dmpc::ocp::{NormKind, OcpError};
use dmpc::sim::{self, rmse_and_max, SimError};
use dmpc::topology::Generator;
use proptest::prelude::*;

fn equilibrium(generator: Generator, norm: NormKind) -> ScenarioConfig {
    let mut cfg = common::perturbed_scenario(generator, &[0.0; 5], 0.4, 30);
    cfg.norm = norm;
    cfg.duration = 10.0;
    cfg.spacing.per_vehicle = None;
    cfg
}

#[test]
fn equilibrium_is_invariant() {
    for (g, norm) in [
        (Generator::Pf, NormKind::L1),
        (Generator::Bd, NormKind::L2),
        (Generator::TwoPred, NormKind::Quadratic),
    ] {
        let s = equilibrium(g, norm).resolve().unwrap();
        let out = sim::run(&s).unwrap();
        let m = &out.metrics;
        for row in m.spacing_errors.iter().chain(&m.velocity_errors) {
            assert!(row.iter().all(|e| e.abs() <= 1e-6), "{g:?} {norm:?}: {row:?}");
        }
        assert!(out.history.inputs.iter().flatten().all(|u| u.abs() <= 1e-6));
    }
}

#[test]
fn identical_runs_give_identical_csv() {
    let mut cfg = common::perturbed_scenario(Generator::Bd, &[1.0, 0.5, -0.5], 0.3, 20);
    cfg.duration = 6.0;
    let s = cfg.resolve().unwrap();
    let (a, b) = (sim::run(&s).unwrap(), sim::run(&s).unwrap());
    assert_eq!(sim::trajectory_csv(&a.history), sim::trajectory_csv(&b.history));
    assert_eq!(
        sim::errors_csv(&a.history, &a.metrics),
        sim::errors_csv(&b.history, &b.metrics)
    );
    assert_eq!(sim::summary_csv(&a.metrics), sim::summary_csv(&b.metrics));
    assert_eq!(sim::lyapunov_csv(0.1, &a.lyapunov), sim::lyapunov_csv(0.1, &b.lyapunov));
}

#[test]
fn aggregates_recompute_from_emitted_csv() {
    let offsets = [1.0, 0.5, 0.0, -0.5, -1.0, -0.5, 0.0, 0.5, 1.0, 0.5];
    let mut cfg = common::perturbed_scenario(Generator::Pf, &offsets, 0.3, 20);
    cfg.duration = 8.0;
    let s = cfg.resolve().unwrap();
    let out = sim::run(&s).unwrap();
    let csv = sim::errors_csv(&out.history, &out.metrics);
    let rows: Vec<Vec<f64>> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), s.steps + 1);
    for v in &out.metrics.vehicles {
        let col = 1 + 2 * (v.vehicle - 1);
        let (rmse, max) = rmse_and_max(rows.iter().map(|r| r[col]));
        let (vrmse, vmax) = rmse_and_max(rows.iter().map(|r| r[col + 1]));
        assert!((rmse - v.spacing_rmse).abs() <= 1e-12);
        assert!((max - v.spacing_max_abs).abs() <= 1e-12);
        assert!((vrmse - v.velocity_rmse).abs() <= 1e-12);
        assert!((vmax - v.velocity_max_abs).abs() <= 1e-12);
    }
    // first row: the imposed offsets
    assert!((rows[0][3] - (offsets[0] - offsets[1])).abs() < 1e-12);

    let traj = sim::trajectory_csv(&out.history);
    let header = traj.lines().next().unwrap();
    assert!(header.starts_with("t,p0,v0,p1,v1,a1,u1,p2"));
    assert_eq!(traj.lines().count(), s.steps + 2);
}

#[test]
fn hand_built_series() {
    assert_eq!(rmse_and_max([1.0, -1.0, 1.0]), (1.0, 1.0));
    assert_eq!(rmse_and_max([0.0; 4]), (0.0, 0.0));
}

#[test]
fn large_perturbation_reports_vehicle_and_step() {
    let cfg = common::perturbed_scenario(Generator::Pf, &[0.0, 8.0, 0.0], 0.5, 20);
    let err = sim::run(&cfg.resolve().unwrap()).unwrap_err();
    match &err {
        SimError::Ocp(OcpError::Infeasible { vehicle, timestep, .. }) => assert_eq!((*vehicle, *timestep), (2, 0)),
        other => panic!("unexpected {other}"),
    }
    let text = err.to_string();
    assert!(text.contains("vehicle 2") && text.contains("timestep 0"), "{text}");
}

#[test]
fn soft_terminal_absorbs_the_same_perturbation() {
    let mut cfg = common::perturbed_scenario(Generator::Pf, &[0.0, 8.0, 0.0], 0.5, 20);
    cfg.soft_terminal = true;
    cfg.duration = 30.0;
    let out = sim::run(&cfg.resolve().unwrap()).unwrap();
    let last = out.metrics.spacing_errors.last().unwrap();
    assert!(last.iter().all(|e| e.abs() < 1e-3), "{last:?}");
}

#[test]
fn ramp_leader_keeps_inputs_in_bounds() {
    let mut cfg = common::perturbed_scenario(Generator::Pf, &[0.0; 4], 0.5, 30);
    cfg.leader = LeaderProfile {
        initial_position: 0.0,
        initial_velocity: 20.0,
        segments: vec![dmpc::config::Segment::Ramp {
            duration: 2.0,
            to: 22.0,
        }],
    };
    cfg.duration = 15.0;
    let s = cfg.resolve().unwrap();
    let out = sim::run(&s).unwrap();
    assert!(out.history.inputs.iter().flatten().all(|u| (-3.0..=3.0).contains(u)));
    // monitor starts only once the leader has been steady for N steps
    let first = out.lyapunov.monitored().next().unwrap().timestep;
    assert_eq!(first, 20 + 4);
    assert_eq!(out.lyapunov_violations(), 0);
}

fn offsets() -> impl Strategy<Value = Vec<f64>> {
    (-2.0f64..=2.0, prop::collection::vec(-1.0f64..=1.0, 4)).prop_map(|(first, steps)| {
        let mut v = vec![first];
        for s in steps {
            let next = (v[v.len() - 1] + s).clamp(-2.0, 2.0);
            v.push(next);
        }
        v
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 6, ..ProptestConfig::default() })]

    /// Terminal outputs reach the leader-relative target after N steps and
    /// the cost decreases at every monitored step.
    #[test]
    fn perturbed_platoon_converges(offsets in offsets()) {
        let mut cfg = common::perturbed_scenario(Generator::Pf, &offsets, 0.25, 20);
        cfg.duration = 10.0;
        let s = cfg.resolve().unwrap();
        let out = sim::run(&s).unwrap();
        let worst = out.history.terminal_errors.iter().skip(5).flatten().fold(0.0f64, |a, b| a.max(*b));
        prop_assert!(worst <= 1e-5, "terminal error {}", worst);
        prop_assert_eq!(out.lyapunov_violations(), 0);
        prop_assert!(out.weight_report.pass);
    }
}
