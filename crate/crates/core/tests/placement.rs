mod common;

use std::collections::HashSet;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use serl_core::feedback::{build_anchors, place, step_blocks};
use serl_core::objective::serl_batch_loss_and_grad;
use serl_core::policy::{snapshot, PolicyParams};
use serl_core::{FeedbackSource, PlacementMode, TrainConfig};

fn sources() -> impl Strategy<Value = Vec<FeedbackSource>> {
    prop::sample::subsequence(FeedbackSource::ALL.to_vec(), 1..=5)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn unique_states_make_anchor_equal_step(seed: u64, srcs in sources(), cap in 8usize..96) {
        let mut r = rng(seed);
        let n = r.gen_range(2..6);
        let group = synthetic_group(&mut r, 40, n, "g");
        let step = place(PlacementMode::Step, &srcs, &group, cap);
        let anchor = place(PlacementMode::Anchor, &srcs, &group, cap);
        prop_assert_eq!(step.table(), anchor.table());
    }

    #[test]
    fn anchors_partition_the_group(seed: u64, srcs in sources()) {
        let cfg = TrainConfig { max_turns: Some(6), ..TrainConfig::default() };
        let mut r = rng(seed);
        let params = PolicyParams::random(keydoor().vocab().len(), 64, 1.0, &mut r);
        for group in env_groups(&params, &cfg, 1, seed) {
            let blocks = step_blocks(&srcs, &group, cfg.hindsight_cap);
            let anchors = build_anchors(&group, &blocks, cfg.hindsight_cap).unwrap();
            let mut seen = HashSet::new();
            for a in &anchors {
                prop_assert!(!a.members.is_empty());
                let (n0, t0) = a.members[0];
                let key = &group.trajectories[n0].steps[t0].state_key;
                for &(n, t) in &a.members {
                    prop_assert_eq!(&group.trajectories[n].steps[t].state_key, key);
                    prop_assert!(seen.insert((n, t)));
                }
                prop_assert!(a.aggregated_feedback.len() <= cfg.hindsight_cap);
            }
            let total: usize = group.trajectories.iter().map(|t| t.steps.len()).sum();
            prop_assert_eq!(seen.len(), total);
        }
    }

    #[test]
    fn current_trajectory_ignores_later_steps(seed: u64) {
        let mut r = rng(seed);
        let group = synthetic_group(&mut r, 40, 3, "g");
        let n = r.gen_range(0..3);
        let len = group.trajectories[n].steps.len();
        let t = r.gen_range(0..len);
        let mut altered = group.clone();
        for s in altered.trajectories[n].steps.iter_mut().skip(t + 1) {
            *s = synthetic_step(&mut r, 40, s.state_key.clone());
        }
        let src = [FeedbackSource::CurrentTrajectory];
        let a = place(PlacementMode::Step, &src, &group, 64);
        let b = place(PlacementMode::Step, &src, &altered, 64);
        prop_assert_eq!(a.phi(n, t).unwrap(), b.phi(n, t).unwrap());
    }
}

#[test]
fn unique_states_give_identical_gradients() {
    let mut r = rng(12);
    let v = 40;
    let cfg = TrainConfig {
        feature_dim: 128,
        ..TrainConfig::default()
    };
    let params = PolicyParams::random(v, 128, 0.4, &mut r);
    let teacher = snapshot(&PolicyParams::random(v, 128, 0.4, &mut r), 0);
    let groups: Vec<_> = (0..6).map(|i| synthetic_group(&mut r, v, 4, &format!("g{i}"))).collect();
    let plans = |mode| -> Vec<_> {
        groups
            .iter()
            .map(|g| place(mode, &FeedbackSource::ALL, g, cfg.hindsight_cap))
            .collect()
    };
    let (_, gs, _) = serl_batch_loss_and_grad(&groups, &plans(PlacementMode::Step), &params, &teacher, &cfg, 0).unwrap();
    let (_, ga, _) = serl_batch_loss_and_grad(&groups, &plans(PlacementMode::Anchor), &params, &teacher, &cfg, 0).unwrap();
    assert!(gs.max_abs_diff(&ga) <= 1e-12);
}

#[test]
fn shared_initial_state_shares_step_zero_hindsight() {
    let cfg = TrainConfig {
        max_turns: Some(6),
        ..TrainConfig::default()
    };
    let mut r = rng(7);
    let params = PolicyParams::random(keydoor().vocab().len(), 64, 1.0, &mut r);
    for group in env_groups(&params, &cfg, 3, 5) {
        let key = &group.trajectories[0].steps[0].state_key;
        assert!(group.trajectories.iter().all(|t| &t.steps[0].state_key == key));
        let plan = place(PlacementMode::Anchor, &[FeedbackSource::Immediate], &group, cfg.hindsight_cap);
        let first = plan.phi(0, 0).unwrap();
        for n in 1..group.len() {
            assert_eq!(plan.phi(n, 0).unwrap(), first);
        }
        plan.check_covers(&group).unwrap();
        assert_eq!(plan, place(PlacementMode::Anchor, &[FeedbackSource::Immediate], &group, cfg.hindsight_cap));
    }
}
