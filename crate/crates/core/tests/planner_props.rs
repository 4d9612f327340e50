//! Property tests for the planner and the episode loop.

mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rearrange_core::environment::{generate_task, run_episode, AgentConfig, Difficulty, EpisodeLimits, Environment};
use rearrange_core::hypotheses::{MockConfig, MockGenerator};
use rearrange_core::planner::{dynamic_actions, initial_bounds, Planner, PlannerConfig};
use rearrange_core::pomdp::is_feasible;
use rearrange_core::{Kitchen, RewardConfig};

use common::*;

fn small_config(seed: u64, threads: usize) -> PlannerConfig {
    PlannerConfig {
        num_scenarios: 3,
        max_depth: 6,
        rollout_depth: 6,
        max_expansions: 60,
        seed,
        threads,
        ..Default::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn search_tightens_bounds_monotonically(seed in any::<u64>(), experiment in any::<bool>()) {
        let rewards = if experiment { RewardConfig::experiment() } else { RewardConfig::model_default() };
        let b = micro_pomdp(&mut ChaCha8Rng::seed_from_u64(seed));
        let planner = Planner::new(small_config(seed, 1), rewards).unwrap();
        let out = planner.plan(&b).unwrap();
        let trace = &out.stats.bound_trace;
        prop_assert!(!trace.is_empty());
        for w in trace.windows(2) {
            prop_assert!(w[1].0 > w[0].0);
            prop_assert!(w[1].1 >= w[0].1 - 1e-9, "lower fell: {:?}", w);
            prop_assert!(w[1].2 <= w[0].2 + 1e-9, "upper rose: {:?}", w);
            prop_assert!(w[1].2 - w[1].1 <= w[0].2 - w[0].1 + 1e-9);
        }
        prop_assert!(trace.iter().all(|(_, l, u)| l <= &(u + 1e-9)));
        prop_assert!(out.stats.root_lower <= out.stats.root_upper + 1e-9);

        // the root never does worse than its initial lower bound
        let mut optimum = Expectimax::new(&rewards);
        let v = optimum.value(&scenarios_of(&b), 6);
        prop_assert!(out.stats.root_lower <= v + 1e-6);
        // satisfied scenarios end the episode, so bounds cover live ones only
        let live: Vec<_> = scenarios_of(&b).into_iter().filter(|(_, s)| !s.is_goal_satisfied()).collect();
        let (lower, upper) = initial_bounds(&live, 6, 6, &rewards, 1.0);
        prop_assert!(lower <= v + 1e-6 && v <= upper + 1e-6, "{lower} {v} {upper}");

        // the chosen action is a feasible candidate in every particle
        prop_assert!(dynamic_actions(&b).unwrap().contains(&out.action));
        prop_assert!(b.particles().iter().all(|p| is_feasible(&p.state, &out.action)));
    }

    #[test]
    fn planning_is_deterministic(seed in any::<u64>(), threads in 2usize..5) {
        let rewards = RewardConfig::model_default();
        let b = micro_pomdp(&mut ChaCha8Rng::seed_from_u64(seed));
        let run = |threads| {
            let mut out = Planner::new(small_config(seed, threads), rewards).unwrap().plan(&b).unwrap();
            out.stats.wall_time = 0.0;
            out
        };
        let first = run(1);
        prop_assert_eq!(&first, &run(1));
        prop_assert_eq!(&first, &run(threads));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn episode_accounting(k in 0usize..5, seed in 0u64..100) {
        let task = generate_task(Kitchen::builtin_ids().nth(k).unwrap(), Difficulty::Easy, seed).unwrap();
        let gen = MockGenerator::new(task.mock_truth(), MockConfig::noisy(seed)).unwrap();
        let config = AgentConfig {
            planner: PlannerConfig { seed, threads: 1, num_scenarios: 10, max_depth: 10, ..Default::default() },
            ..Default::default()
        };
        let m = run_episode(&task, &config, &gen, &EpisodeLimits::for_task(&task)).unwrap();

        let total: f64 = m.per_step.iter().map(|s| s.reward).sum();
        prop_assert!((total - m.cumulative_reward).abs() < 1e-9);
        prop_assert_eq!(m.steps_taken, m.per_step.len());
        prop_assert!(m.steps_taken <= m.step_limit);
        prop_assert_eq!(m.success, m.per_step.last().is_some_and(|s| s.done));
        prop_assert!(m.per_step.iter().rev().skip(1).all(|s| !s.done));
        prop_assert_eq!(m.steps, if m.success { m.steps_taken } else { m.step_limit });

        // replaying the trace in a fresh environment gives the same rewards
        // and never reveals objects outside the task
        let mut env = Environment::new(task.clone(), config.rewards).unwrap();
        let objects: Vec<String> = task.placements.iter().map(|(_, o)| o.to_string()).collect();
        for s in &m.per_step {
            let (step, fb) = env.step(&s.action);
            prop_assert_eq!(step.reward, s.reward);
            prop_assert_eq!(step.feasible, s.feasible);
            prop_assert_eq!(fb.done, s.done);
            prop_assert!(env.graph().objects().all(|(o, _)| objects.iter().any(|x| x == o.as_str())));
            prop_assert!(env.graph().validate().is_ok());
        }
    }
}

