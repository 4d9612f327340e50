//! Property tests for the particle filter and the hypothesis tree.

mod common;

use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rearrange_core::belief::{eliminate, hybrid_update, predict, BeliefUpdateConfig, Particle, ParticleBelief};
use rearrange_core::environment::{generate_task, Difficulty};
use rearrange_core::hypotheses::{build_llm_belief, MockConfig, MockGenerator, QueryContext};
use rearrange_core::pomdp::{observe, transition};
use rearrange_core::{Kitchen, Observation, RewardConfig};

use common::*;

fn world_belief(world: &FilterWorld) -> ParticleBelief {
    ParticleBelief::normalized_from(
        world.hypotheses.iter().map(|(w, s)| Particle { state: s.clone(), weight: *w }).collect(),
    )
}

fn assert_well_formed(b: &ParticleBelief) -> Result<(), TestCaseError> {
    let total: f64 = b.particles().iter().map(|p| p.weight).sum();
    prop_assert!((total - 1.0).abs() < 1e-9, "total {total}");
    prop_assert!(b.particles().iter().all(|p| p.weight > 0.0));
    prop_assert!(b.particles().windows(2).all(|w| w[0].state != w[1].state));
    let mut states: Vec<_> = b.particles().iter().map(|p| &p.state).collect();
    states.sort();
    states.dedup();
    prop_assert_eq!(states.len(), b.len());
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn elimination_only_removes(seed in any::<u64>()) {
        let rewards = RewardConfig::model_default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let world = filter_world(&mut rng);
        let mut b = world_belief(&world);
        let mut truth = world.truth.clone();
        for a in random_trace(&world, 5, &mut rng, &rewards) {
            truth = transition(&truth, &a, &rewards).next_state;
            let predicted = predict(&b, &a, &rewards).unwrap();
            let z = observe(&truth);
            let elim = eliminate(&predicted, &z, false, &[]);
            prop_assert!(elim.belief.len() <= predicted.len());
            for p in elim.belief.particles() {
                let before = predicted.particles().iter().find(|q| q.state == p.state);
                prop_assert!(before.is_some_and(|q| q.weight == p.weight));
            }
            prop_assert!(elim.w_bf <= predicted.total_weight() + 1e-12);
            // the true state is never eliminated
            prop_assert!(elim.belief.particles().iter().any(|p| p.state == truth));
            b = elim.belief.normalized();
        }
    }

    #[test]
    fn hybrid_update_is_normalized_and_dup_free(seed in any::<u64>(), epsilon in 0.05f64..0.95, keep in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let world = filter_world(&mut rng);
        let full = world_belief(&world);
        let survivors: Vec<Particle> =
            full.particles().iter().filter(|_| rng.gen_bool(keep)).cloned().collect();
        prop_assume!(!survivors.is_empty());
        let w_bf: f64 = survivors.iter().map(|p| p.weight).sum();
        let b_bf = ParticleBelief::from_particles(survivors);
        let cfg = BeliefUpdateConfig { epsilon, duplicate_merge: true };
        // the supplement overlaps the survivors, so merging is exercised
        let llm = full.clone();
        let out = if cfg.needs_supplement(w_bf) {
            hybrid_update(&b_bf, w_bf, Some(&llm), &cfg).unwrap()
        } else {
            prop_assert!(hybrid_update(&b_bf, w_bf, Some(&llm), &cfg).is_err());
            hybrid_update(&b_bf, w_bf, None, &cfg).unwrap()
        };
        assert_well_formed(&out)?;
        prop_assert!(out.len() <= full.len());
    }

    #[test]
    fn mock_tree_gives_a_well_formed_belief(k in 0usize..5, d in 0usize..3, seed in 0u64..300, noisy in any::<bool>(), c1 in 1usize..5, c2 in 1usize..4) {
        let kitchen = Kitchen::builtin_ids().nth(k).unwrap();
        let task = generate_task(kitchen, Difficulty::ALL[d], seed).unwrap();
        let mock = if noisy { MockConfig::noisy(seed) } else { MockConfig::oracle(seed) };
        let z = Observation::new(&task.initial_graph().unwrap());
        let ctx = QueryContext::new(task.instruction.clone());
        let run = || {
            let gen = MockGenerator::new(task.mock_truth(), mock.clone()).unwrap();
            build_llm_belief(&z, &ctx, &gen, c1, c2).unwrap()
        };
        let first = run();
        // same seed, same tree and belief
        prop_assert_eq!(&first.tree, &run().tree);
        prop_assert_eq!(&first.belief, &run().belief);

        let shape = first.tree.shape();
        prop_assert!(shape.c1 <= c1 && shape.c2 <= c2);
        prop_assert!(first.belief.len() <= shape.c3);
        assert_well_formed(&first.belief)?;

        // every particle agrees with the observation and is consistent
        for p in first.belief.particles() {
            prop_assert!(p.state.graph.visible_matches(z.graph()));
            prop_assert!(p.state.graph.validate().is_ok());
        }

        // a goal's particles carry exactly its renormalized confidence
        let mut per_goal: BTreeMap<String, f64> = BTreeMap::new();
        for p in first.belief.particles() {
            *per_goal.entry(p.state.goal.to_string()).or_default() += p.weight;
        }
        let conf: f64 = first.tree.goal_candidates.iter().map(|c| c.confidence).sum();
        for c in &first.tree.goal_candidates {
            let mass = per_goal.get(&c.goal.to_string()).copied().unwrap_or(0.0);
            prop_assert!((mass - c.confidence / conf).abs() < 1e-9, "{} has {mass}", c.goal);
        }

        // particles of one goal are ordered as their location confidences
        for c in &first.tree.goal_candidates {
            let mut leaves: Vec<(f64, f64)> = first
                .belief
                .particles()
                .iter()
                .filter(|p| p.state.goal.same_pairs(&c.goal))
                .map(|p| {
                    let prior: f64 = c
                        .goal
                        .pairs()
                        .iter()
                        .filter_map(|pair| {
                            let list = first.tree.locations.get(&pair.object)?;
                            let area = p.state.graph.object_parent(pair.object.as_str())?;
                            list.iter().find(|l| &l.area == area).map(|l| l.confidence)
                        })
                        .product();
                    (prior, p.weight)
                })
                .collect();
            leaves.sort_by(|a, b| a.0.total_cmp(&b.0));
            prop_assert!(leaves.windows(2).all(|w| w[0].1 <= w[1].1 + 1e-12));
        }
    }
}
