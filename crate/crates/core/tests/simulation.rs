use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use reachnav::dynamics::{AgentState, Limits, SwarmSystem};
use reachnav::epigraph::EpigraphProblem;
use reachnav::policy::Models;
use reachnav::safety::SafetyProblem;
use reachnav::sim::{
    compute_metrics, decide_agents, detect_collisions, generate_scenario, goals_csv, outcomes_from_logs, run_batch,
    trajectories_csv, BatchSpec, NeighbourStrategy, Outcome, ScenarioConfig,
};
use reachnav::train::init_model;

/// Untrained but well-formed models; enough to exercise the closed loop.
fn small_models(seed: u64) -> Models {
    let sys = SwarmSystem::new(Limits::default(), 0.1, 2, 0.2);
    let sp = SafetyProblem::default();
    let ep = EpigraphProblem::new(sys.clone(), 0.2).unwrap();
    let value = init_model(&ep, &[16, 16], 30.0, seed).unwrap();
    let safety = init_model(&sp, &[16, 16], 30.0, seed + 1).unwrap();
    Models::new(value, safety, sys, sp).unwrap()
}

fn short_config(n_agents: usize, strategy: NeighbourStrategy) -> ScenarioConfig {
    ScenarioConfig {
        n_agents,
        strategy,
        sim_time: 0.2,
        ..Default::default()
    }
}

#[test]
fn decisions_do_not_depend_on_processing_order() {
    let models = small_models(3);
    for strategy in [NeighbourStrategy::Value, NeighbourStrategy::Nearest, NeighbourStrategy::Random] {
        let cfg = short_config(6, strategy);
        let world = generate_scenario(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let forward: Vec<usize> = (0..6).collect();
        let shuffled = [3, 0, 5, 1, 4, 2];
        let a = decide_agents(&world, &models, &cfg, 11, 2, &forward).unwrap();
        let b = decide_agents(&world, &models, &cfg, 11, 2, &shuffled).unwrap();
        assert_eq!(a, b, "{strategy:?}");
    }
}

#[test]
fn batches_are_reproducible() {
    let models = small_models(1);
    let spec = BatchSpec {
        config: short_config(4, NeighbourStrategy::Value),
        seeds: vec![0, 7],
        scenarios_per_seed: 2,
    };
    let a = run_batch(&spec, &models).unwrap();
    let b = run_batch(&spec, &models).unwrap();
    assert_eq!(trajectories_csv(&a.results).unwrap(), trajectories_csv(&b.results).unwrap());
    assert_eq!(goals_csv(&a.results).unwrap(), goals_csv(&b.results).unwrap());
    assert_eq!(a.report.to_toml().unwrap(), b.report.to_toml().unwrap());
    assert_eq!(a.report.per_seed.len(), 2);
}

#[test]
fn metrics_can_be_recomputed_from_logs() {
    let models = small_models(2);
    let spec = BatchSpec {
        config: ScenarioConfig {
            // A tight arena so that some agents collide.
            limits: Limits {
                half_width: 0.6,
                ..Default::default()
            },
            r: 0.15,
            min_separation: 0.35,
            sim_time: 0.6,
            ..short_config(10, NeighbourStrategy::Random)
        },
        seeds: vec![1],
        scenarios_per_seed: 4,
    };
    let out = run_batch(&spec, &models).unwrap();
    let traj = trajectories_csv(&out.results).unwrap();
    let goals = goals_csv(&out.results).unwrap();
    let recomputed = outcomes_from_logs(&traj, &goals, spec.config.r, spec.config.dt).unwrap();
    let from_logs: Vec<Outcome> = recomputed.into_iter().map(|(_, o)| o).collect();
    let direct: Vec<Outcome> = out.results.iter().map(Outcome::from).collect();
    assert_eq!(from_logs.len(), direct.len());
    for (a, b) in from_logs.iter().zip(&direct) {
        assert_eq!(a.collided, b.collided);
        for (x, y) in a.costs.iter().zip(&b.costs) {
            assert!((x - y).abs() <= 1e-9, "{x} vs {y}");
        }
    }
    let m = compute_metrics(&from_logs).unwrap();
    let reported = out.report.overall.unwrap();
    assert!(reported.n_collided > 0 && reported.n_collided < reported.n_trajectories, "{reported:?}");
    assert_eq!(m.n_collided, reported.n_collided);
    assert_eq!(m.safety_rate, reported.safety_rate);
    assert_eq!(m.safe_scenario_rate, reported.safe_scenario_rate);
}

fn agent() -> impl Strategy<Value = AgentState> {
    (-1.0..1.0f64, -1.0..1.0f64).prop_map(|(x, y)| AgentState::new(x, y, 0.0, 0.0))
}

fn outcome() -> impl Strategy<Value = Outcome> {
    proptest::collection::vec((any::<bool>(), 0.0..5.0f64), 1..6).prop_map(|v| Outcome {
        collided: v.iter().map(|p| p.0).collect(),
        costs: v.iter().map(|p| p.1).collect(),
    })
}

proptest! {
    #[test]
    fn collision_flags_follow_agent_relabelling(
        snaps in proptest::collection::vec(proptest::collection::vec(agent(), 5), 1..4),
        rot in 0usize..5,
    ) {
        let flags = detect_collisions(&snaps, 0.3);
        let rotated: Vec<Vec<AgentState>> = snaps
            .iter()
            .map(|s| (0..5).map(|i| s[(i + rot) % 5]).collect())
            .collect();
        let rflags = detect_collisions(&rotated, 0.3);
        for i in 0..5 {
            prop_assert_eq!(rflags[i], flags[(i + rot) % 5]);
        }
    }

    #[test]
    fn metrics_ignore_scenario_order(outcomes in proptest::collection::vec(outcome(), 1..8), rot in 0usize..8) {
        let a = compute_metrics(&outcomes).unwrap();
        let mut shuffled = outcomes.clone();
        shuffled.rotate_left(rot % outcomes.len());
        shuffled.reverse();
        prop_assert_eq!(a, compute_metrics(&shuffled).unwrap());
    }
}
