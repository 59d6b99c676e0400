use super::*;
use crate::envsim::{EnvKind, ResetMode, VecEnvConfig};
use crate::oracle::{gae_double_sum, UnitEnd as OracleEnd};
use crate::policy::{Architecture, PolicyNet, SampleMode};
use crate::rollout::{collect, RolloutSpec};
use proptest::prelude::*;

fn gp(gamma: f64, lambda: f64) -> GaeParams {
    GaeParams { gamma, lambda }
}

#[test]
fn gae_reward_to_go() {
    let (adv, ret) = compute_gae(
        &[0.0, 0.0, 1.0],
        &[0.0; 3],
        &[UnitEnd::Continue, UnitEnd::Continue, UnitEnd::Terminated],
        123.0,
        gp(1.0, 1.0),
    )
    .unwrap();
    assert_eq!(adv, vec![1.0, 1.0, 1.0]);
    assert_eq!(ret, adv);
}

#[test]
fn gae_all_zero() {
    let (adv, _) = compute_gae(
        &[0.0; 5],
        &[0.0; 5],
        &[UnitEnd::Continue; 5],
        0.0,
        gp(0.9, 0.8),
    )
    .unwrap();
    assert!(adv.iter().all(|&a| a == 0.0));
}

#[test]
fn gae_bootstrapped_pair() {
    // delta = 1 + 0.25 - 0.5 = 0.75 at both steps; A0 = 0.75 + 0.25 * 0.75.
    let (adv, ret) = compute_gae(
        &[1.0, 1.0],
        &[0.5, 0.5],
        &[UnitEnd::Continue; 2],
        0.5,
        gp(0.5, 0.5),
    )
    .unwrap();
    assert_eq!(adv, vec![0.9375, 0.75]);
    assert_eq!(ret, vec![1.4375, 1.25]);
}

#[test]
fn gae_truncation_and_termination() {
    let (t, _) = compute_gae(
        &[0.0],
        &[0.0],
        &[UnitEnd::Truncated(2.0)],
        9.0,
        gp(0.5, 1.0),
    )
    .unwrap();
    assert_eq!(t, vec![1.0]);
    let (d, _) = compute_gae(&[0.0], &[0.0], &[UnitEnd::Terminated], 9.0, gp(0.5, 1.0)).unwrap();
    assert_eq!(d, vec![0.0]);
    let (c, _) = compute_gae(&[0.0], &[0.0], &[UnitEnd::Continue], 9.0, gp(0.5, 1.0)).unwrap();
    assert_eq!(c, vec![4.5]);
}

#[test]
fn gae_length_mismatch() {
    assert!(matches!(
        compute_gae(
            &[0.0; 3],
            &[0.0; 2],
            &[UnitEnd::Continue; 3],
            0.0,
            gp(1.0, 1.0)
        ),
        Err(AdvError::LengthMismatch { .. })
    ));
}

#[test]
fn gae_params_range() {
    assert!(gp(1.0, 0.0).validate().is_ok());
    assert!(gp(1.1, 0.5).validate().is_err());
    assert!(gp(0.5, -0.1).validate().is_err());
}

fn arb_end() -> impl Strategy<Value = UnitEnd> {
    prop_oneof![
        6 => Just(UnitEnd::Continue),
        1 => Just(UnitEnd::Terminated),
        1 => (-2.0f64..2.0).prop_map(UnitEnd::Truncated),
    ]
}

fn to_oracle(e: UnitEnd) -> OracleEnd {
    match e {
        UnitEnd::Continue => OracleEnd::Continue,
        UnitEnd::Terminated => OracleEnd::Terminated,
        UnitEnd::Truncated(v) => OracleEnd::Truncated(v),
    }
}

proptest! {
    #[test]
    fn gae_matches_double_sum(
        data in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0, arb_end()), 1..13),
        boot in -1.0f64..1.0, gamma in 0.0f64..=1.0, lambda in 0.0f64..=1.0,
    ) {
        let r: Vec<f64> = data.iter().map(|d| d.0).collect();
        let v: Vec<f64> = data.iter().map(|d| d.1).collect();
        let e: Vec<UnitEnd> = data.iter().map(|d| d.2).collect();
        let (adv, _) = compute_gae(&r, &v, &e, boot, gp(gamma, lambda)).unwrap();
        let oe: Vec<OracleEnd> = e.iter().map(|&x| to_oracle(x)).collect();
        let want = gae_double_sum(&r, &v, &oe, boot, gamma, lambda);
        for (a, b) in adv.iter().zip(&want) {
            prop_assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn gae_is_linear_in_power_of_two_scaling(
        data in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0, arb_end()), 1..13),
        boot in -1.0f64..1.0, gamma in 0.0f64..=1.0, lambda in 0.0f64..=1.0, k in -4i32..5,
    ) {
        // Scaling by a power of two is exact in floating point.
        let c = 2f64.powi(k);
        let r: Vec<f64> = data.iter().map(|d| d.0).collect();
        let v: Vec<f64> = data.iter().map(|d| d.1).collect();
        let e: Vec<UnitEnd> = data.iter().map(|d| d.2).collect();
        let es: Vec<UnitEnd> = e.iter().map(|x| match x {
            UnitEnd::Truncated(b) => UnitEnd::Truncated(b * c),
            o => *o,
        }).collect();
        let (a, _) = compute_gae(&r, &v, &e, boot, gp(gamma, lambda)).unwrap();
        let rs: Vec<f64> = r.iter().map(|x| x * c).collect();
        let vs: Vec<f64> = v.iter().map(|x| x * c).collect();
        let (b, _) = compute_gae(&rs, &vs, &es, boot * c, gp(gamma, lambda)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert_eq!(x * c, *y);
        }
    }

    #[test]
    fn grpo_advantages_are_standardized(returns in proptest::collection::vec(-5.0f64..5.0, 2..9)) {
        let g = GroupBatch::from_returns(returns).unwrap();
        prop_assume!(grpo_group_advantage(&g, 0.0).is_ok());
        let a = grpo_group_advantage(&g, 0.0).unwrap();
        let spread = g.returns.iter().cloned().fold(f64::MIN, f64::max)
            - g.returns.iter().cloned().fold(f64::MAX, f64::min);
        prop_assume!(spread > 1e-6);
        let n = a.len() as f64;
        let mean = a.iter().sum::<f64>() / n;
        let std = (a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        prop_assert!(mean.abs() <= 1e-12);
        prop_assert!((std - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn filter_ignores_member_order(mut returns in proptest::collection::vec(0.0f64..1.0, 2..6), rot in 0usize..6) {
        let b = FilterBounds::default();
        let before = b.retains(&GroupBatch::from_returns(returns.clone()).unwrap());
        let k = rot % returns.len();
        returns.rotate_left(k);
        returns.reverse();
        prop_assert_eq!(before, b.retains(&GroupBatch::from_returns(returns).unwrap()));
    }
}

#[test]
fn grpo_examples() {
    let g = GroupBatch::from_returns(vec![1.0, 0.0]).unwrap();
    assert_eq!(grpo_group_advantage(&g, 0.0).unwrap(), vec![1.0, -1.0]);

    let flat = GroupBatch::from_returns(vec![1.0; 3]).unwrap();
    assert_eq!(
        grpo_group_advantage(&flat, 0.0),
        Err(AdvError::DegenerateGroup)
    );
    assert_eq!(grpo_group_advantage(&flat, 1e-8).unwrap(), vec![0.0; 3]);

    // mean 2, population std sqrt(1/2)
    let g = GroupBatch::from_returns(vec![3.0, 1.0, 2.0, 2.0]).unwrap();
    let a = grpo_group_advantage(&g, 0.0).unwrap();
    let want = [
        std::f64::consts::SQRT_2,
        -std::f64::consts::SQRT_2,
        0.0,
        0.0,
    ];
    for (x, y) in a.iter().zip(want) {
        assert!((x - y).abs() < 1e-15);
    }
    assert_eq!(
        GroupBatch::from_returns(vec![1.0]),
        Err(AdvError::GroupTooSmall(1))
    );
}

#[test]
fn filter_examples() {
    let b = FilterBounds::default();
    let all = GroupBatch::from_returns(vec![1.0; 4]).unwrap();
    let mixed = GroupBatch::from_returns(vec![1.0, 0.0, 1.0, 0.0]).unwrap();
    assert!(!b.retains(&all));
    assert!(b.retains(&mixed));
    let kept = success_rate_filter(vec![all.clone(), mixed.clone()], b);
    assert_eq!(kept, vec![mixed]);
    assert_eq!(filter_or_skip(vec![all], b), Err(AdvError::SkipUpdate));
    assert!(FilterBounds::new(1.0, 1.0).is_err());
}

#[test]
fn filter_over_all_binary_groups() {
    let b = FilterBounds::default();
    for g in 2..=4usize {
        for bits in 0u32..(1 << g) {
            let returns: Vec<f64> = (0..g).map(|i| ((bits >> i) & 1) as f64).collect();
            let uniform = bits == 0 || bits == (1 << g) - 1;
            assert_eq!(
                b.retains(&GroupBatch::from_returns(returns).unwrap()),
                !uniform
            );
        }
    }
}

fn scripted_slab(
    success_step: u32,
    chunk_len: usize,
    steps: usize,
    max_steps: u32,
) -> TrajectorySlab {
    let policy = PolicyNet::new(
        Architecture {
            obs_dim: 2,
            trunk_widths: vec![4],
            vocab_size: 3,
            chunk_len,
            tokens_per_action: 2,
            value_hidden: 4,
        },
        0,
    )
    .unwrap();
    collect(
        &policy,
        &RolloutSpec {
            env: EnvKind::Scripted {
                success_step,
                num_reset_states: 4,
            },
            env_cfg: VecEnvConfig {
                num_envs: 2,
                max_episode_steps: max_steps,
                auto_reset: false,
                ignore_terminations: false,
                use_fixed_reset_state_ids: false,
                seed: 0,
            },
            reset_ids: None,
            steps,
            reset_mode: ResetMode::Deferred,
            sample_seed: 0,
            sample_mode: SampleMode::Stochastic,
        },
    )
    .unwrap()
}

#[test]
fn mask_stops_after_first_success() {
    let slab = scripted_slab(3, 1, 10, 10);
    let mask = valid_action_mask(&slab);
    let mut want = vec![false; 10];
    want[..3].iter_mut().for_each(|m| *m = true);
    assert_eq!(mask[0], want);
}

#[test]
fn mask_keeps_failed_episode() {
    let slab = scripted_slab(50, 1, 10, 10);
    assert_eq!(valid_action_mask(&slab)[0], vec![true; 10]);
}

#[test]
fn mask_drops_frozen_slots() {
    // Success on slot 1 of the second chunk; the rest of that chunk is frozen.
    let slab = scripted_slab(6, 4, 3, 12);
    let m = &valid_action_mask(&slab)[0];
    assert_eq!(m[..6], [true; 6]);
    assert!(m[6..].iter().all(|&v| !v));
    assert!(!slab.envs[0][1].executed[2]);
}

#[test]
fn mask_after_success_without_termination() {
    let mut slab = scripted_slab(3, 1, 6, 6);
    // Pretend the episode kept running after success.
    for rec in slab.envs[0].iter_mut() {
        rec.executed[0] = true;
        rec.terminated[0] = false;
    }
    for (t, rec) in slab.envs[0].iter_mut().enumerate() {
        rec.episode_steps[0] = t as u32;
    }
    slab.finalize();
    assert_eq!(
        valid_action_mask(&slab)[0],
        vec![true, true, true, false, false, false]
    );
}

#[test]
fn length_weights() {
    let slab = scripted_slab(4, 1, 10, 10);
    let w = length_norm_weights(&slab, LengthNorm::LengthNormalized);
    assert_eq!(w[0][..4], [0.25; 4]);
    assert!(w[0][4..].iter().all(|&x| x == 0.0));
    let base = length_norm_weights(&slab, LengthNorm::Base);
    assert_eq!(base[0][..4], [0.1; 4]);
    assert!(base[0][4..].iter().all(|&x| x == 0.0));

    let fail = scripted_slab(50, 1, 8, 8);
    let w = length_norm_weights(&fail, LengthNorm::LengthNormalized);
    assert!((w[0].iter().sum::<f64>() - 1.0).abs() < 1e-15);
}

#[test]
fn chunk_units_sum_rewards() {
    let slab = scripted_slab(6, 4, 3, 12);
    let units = unit_sequences(&slab, Level::Chunk);
    assert_eq!(units[0].len(), 3);
    assert_eq!(units[0][1].reward, 1.0);
    assert_eq!(units[0][1].end, UnitEnd::Terminated);
    assert!(units[0][1].valid);
    assert!(!units[0][2].executed && !units[0][2].valid);
    let actions = unit_sequences(&slab, Level::Action);
    assert_eq!(actions[0].len(), 12);
    assert_eq!(actions[0][5].end, UnitEnd::Terminated);
    assert!(!actions[0][6].executed);

    let w = trajectory_weights(&units, LengthNorm::LengthNormalized);
    assert_eq!(w[0], vec![0.5, 0.5, 0.0]);
}

#[test]
fn unit_gae_skips_frozen_units() {
    let slab = scripted_slab(6, 4, 3, 12);
    let units = unit_sequences(&slab, Level::Chunk);
    let boot: Vec<f64> = slab.tail_bootstrap.iter().map(|b| b.scalar).collect();
    let out = gae_for_units(&units, &boot, gp(1.0, 1.0)).unwrap();
    // Zero-initialized value heads: advantages are reward-to-go.
    assert_eq!(out[0].0, vec![1.0, 1.0, 0.0]);
}

#[test]
fn groups_use_first_episodes() {
    let slab = scripted_slab(3, 1, 10, 10);
    let groups = collect_groups(&slab).unwrap();
    assert_eq!(groups.len(), 1);
    assert_eq!(groups[0].returns, vec![1.0, 1.0]);
    assert_eq!(groups[0].first_success, vec![Some(3), Some(3)]);
    assert_eq!(groups[0].lengths, vec![10, 10]);
}
