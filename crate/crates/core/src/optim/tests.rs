use super::*;
use crate::envsim::{EnvKind, ResetMode, ResetStateId, VecEnvConfig};
use crate::oracle::{central_difference, relative_error};
use crate::policy::{Architecture, SampleMode};
use crate::rollout::{collect, RolloutSpec};
use rand::Rng;

fn arch(c: usize) -> Architecture {
    Architecture {
        obs_dim: 4,
        trunk_widths: vec![6],
        vocab_size: 3,
        chunk_len: c,
        tokens_per_action: 2,
        value_hidden: 4,
    }
}

fn reach_slab(policy: &PolicyNet, fixed: bool, seed: u64) -> TrajectorySlab {
    let n = 4;
    collect(
        policy,
        &RolloutSpec {
            env: EnvKind::ToyReach {
                grid_size: 3,
                num_reset_states: 8,
                dense_reward: true,
            },
            env_cfg: VecEnvConfig {
                num_envs: n,
                max_episode_steps: 5,
                auto_reset: !fixed,
                ignore_terminations: false,
                use_fixed_reset_state_ids: fixed,
                seed,
            },
            reset_ids: fixed.then(|| {
                vec![
                    ResetStateId(1),
                    ResetStateId(1),
                    ResetStateId(2),
                    ResetStateId(2),
                ]
            }),
            steps: 4,
            reset_mode: ResetMode::Deferred,
            sample_seed: seed + 1,
            sample_mode: SampleMode::Stochastic,
        },
    )
    .unwrap()
}

fn perturbed(net: &PolicyNet, seed: u64, scale: f64) -> PolicyNet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = net.clone();
    for t in out.theta_mut() {
        *t += scale * rng.gen_range(-1.0..1.0);
    }
    out
}

fn open_bounds() -> FilterBounds {
    FilterBounds::new(-1e9, 1e9).unwrap()
}

fn params() -> PpoParams {
    PpoParams {
        entropy_coef: 0.01,
        ..PpoParams::default()
    }
}

/// Smallest distance of any ratio from a clipping kink.
fn kink_distance(net: &PolicyNet, batch: &RolloutBatch, eps: f64) -> f64 {
    let m = batch.tokens_per_action;
    let mut best = f64::INFINITY;
    for r in &batch.records {
        let new =
            &net.evaluate_logprobs(std::slice::from_ref(&r.obs), std::slice::from_ref(&r.chunk))[0];
        let a = aggregate_logprob(new, m, batch.spec.logprob_level);
        let b = aggregate_logprob(&r.old_token_logprobs, m, batch.spec.logprob_level);
        for (x, y) in a.iter().zip(&b) {
            let rho = ratio(*x, *y);
            best = best
                .min((rho - 1.0 - eps).abs())
                .min((rho - 1.0 + eps).abs());
        }
    }
    best
}

#[test]
fn ratio_examples() {
    assert_eq!(ratio(-1.3, -1.3), 1.0);
    assert!((ratio(2f64.ln(), 0.0) - 2.0).abs() < 1e-15);
}

#[test]
fn ratio_matches_probability_quotient() {
    let a = arch(1);
    let old = PolicyNet::randomized(a.clone(), 1, 0.7).unwrap();
    let new = perturbed(&old, 2, 0.2);
    let obs = Observation::new(vec![0.1, -0.2, 0.3, 0.4]);
    let chunk = ActionChunk::from_flat(&[2, 0], 2);
    let prob = |net: &PolicyNet| {
        let mut p = 1.0;
        let tokens = chunk.flat_tokens();
        for pos in 0..tokens.len() {
            let logits = net.forward_logits(&obs, &tokens[..pos]);
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            p *= logits[tokens[pos] as usize].exp() / z;
        }
        p
    };
    let lp = |net: &PolicyNet| {
        aggregate_logprob(
            &net.evaluate_logprobs(std::slice::from_ref(&obs), std::slice::from_ref(&chunk))[0],
            2,
            Level::Chunk,
        )[0]
    };
    let direct = prob(&new) / prob(&old);
    assert!((ratio(lp(&new), lp(&old)) - direct).abs() <= 1e-12 * direct);
}

fn single_record_batch(adv: f64, old_shift: f64, net: &PolicyNet) -> RolloutBatch {
    let obs = Observation::new(vec![0.0, 0.5, 0.2, 0.1]);
    let chunk = ActionChunk::from_flat(&[1, 1], 2);
    let lp =
        net.evaluate_logprobs(std::slice::from_ref(&obs), std::slice::from_ref(&chunk))[0].clone();
    RolloutBatch {
        spec: GranularitySpec::new(Level::Chunk, Level::Chunk),
        chunk_len: 1,
        tokens_per_action: 2,
        records: vec![BatchRecord {
            obs,
            chunk,
            old_token_logprobs: vec![lp[0] - old_shift, lp[1]],
            adv: vec![adv],
            returns: vec![0.0],
            valid: vec![true],
            traj: vec![None],
        }],
        trajectories: Vec::new(),
        n_groups: 0,
    }
}

#[test]
fn surrogate_examples() {
    let net = PolicyNet::randomized(arch(1), 3, 0.5).unwrap();
    let p = PpoParams {
        value_loss_coef: 0.0,
        ..PpoParams::default()
    };
    let (t, _) = ppo_loss(&net, &single_record_batch(0.8, 0.0, &net), &p).unwrap();
    assert_eq!(t.policy_loss, -0.8);
    assert_eq!(t.clip_frac, 0.0);
    let (t, g) = ppo_loss(&net, &single_record_batch(0.5, 2f64.ln(), &net), &p).unwrap();
    assert!((t.policy_loss + 1.2 * 0.5).abs() < 1e-12);
    assert_eq!(t.clip_frac, 1.0);
    assert!(g.iter().all(|&x| x == 0.0));
    // Negative advantage keeps the unclipped branch when the ratio grows.
    let (t, _) = ppo_loss(&net, &single_record_batch(-0.5, 2f64.ln(), &net), &p).unwrap();
    assert!((t.policy_loss - 1.0).abs() < 1e-12);
}

#[test]
fn ppo_gradient_matches_finite_differences() {
    let mut checked = 0;
    for seed in 0..12u64 {
        for (adv, lp) in [
            (Level::Chunk, Level::Token),
            (Level::Action, Level::Action),
            (Level::Chunk, Level::Chunk),
        ] {
            let old = PolicyNet::randomized(arch(2), seed, 0.5).unwrap();
            let slab = reach_slab(&old, false, seed);
            let batch = build_ppo_batch(&slab, GranularitySpec::new(adv, lp), GaeParams::default())
                .unwrap();
            let net = perturbed(&old, seed + 50, 0.05);
            if kink_distance(&net, &batch, 0.2) < 1e-3 {
                continue;
            }
            let p = params();
            let (_, g) = ppo_loss(&net, &batch, &p).unwrap();
            let fd = central_difference(net.theta(), 1e-5, |th| {
                let n = PolicyNet::from_parts(net.arch().clone(), th.to_vec()).unwrap();
                ppo_loss(&n, &batch, &p).unwrap().0.loss
            });
            let err = relative_error(&g, &fd);
            assert!(err <= 1e-4, "seed {seed}: {err}");
            checked += 1;
        }
    }
    assert!(checked >= 20);
}

#[test]
fn grpo_gradient_matches_finite_differences() {
    for seed in 0..6u64 {
        let old = PolicyNet::randomized(arch(2), seed, 0.5).unwrap();
        let slab = reach_slab(&old, true, seed);
        let spec = GranularitySpec::new(Level::Chunk, Level::Action);
        let batch = build_grpo_batch(&slab, spec, 1e-8, open_bounds(), true).unwrap();
        let net = perturbed(&old, seed + 70, 0.05);
        if kink_distance(&net, &batch, 0.2) < 1e-3 {
            continue;
        }
        for mode in [LengthNorm::Base, LengthNorm::LengthNormalized] {
            let (_, g) = grpo_loss(&net, &batch, mode, &params()).unwrap();
            let fd = central_difference(net.theta(), 1e-5, |th| {
                let n = PolicyNet::from_parts(net.arch().clone(), th.to_vec()).unwrap();
                grpo_loss(&n, &batch, mode, &params()).unwrap().0.loss
            });
            assert!(relative_error(&g, &fd) <= 1e-4);
        }
    }
}

#[test]
fn chunk_and_token_gradients_agree_bitwise() {
    for seed in 0..5u64 {
        let net = PolicyNet::randomized(arch(3), seed, 0.6).unwrap();
        let slab = reach_slab(&net, false, seed);
        let p = PpoParams {
            value_loss_coef: 0.0,
            ..PpoParams::default()
        };
        let chunk = build_ppo_batch(
            &slab,
            GranularitySpec::new(Level::Chunk, Level::Chunk),
            GaeParams::default(),
        )
        .unwrap();
        let token = build_ppo_batch(
            &slab,
            GranularitySpec::new(Level::Chunk, Level::Token),
            GaeParams::default(),
        )
        .unwrap();
        let (_, gc) = ppo_loss(&net, &chunk, &p).unwrap();
        let (_, gt) = ppo_loss(&net, &token, &p).unwrap();
        assert!(gc.iter().zip(&gt).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(gc.iter().any(|&x| x != 0.0));
    }
}

#[test]
fn rejects_mismatched_value_level() {
    let net = PolicyNet::new(arch(2), 0).unwrap();
    let slab = reach_slab(&net, false, 0);
    let spec = GranularitySpec::new(Level::Action, Level::Token).with_value_level(Level::Chunk);
    assert!(matches!(
        build_ppo_batch(&slab, spec, GaeParams::default()),
        Err(OptimError::Config(_))
    ));
    let bad = GranularitySpec::new(Level::Action, Level::Chunk);
    assert!(matches!(
        build_ppo_batch(&slab, bad, GaeParams::default()),
        Err(OptimError::Granularity(_))
    ));
}

#[test]
fn clip_inactive_matches_importance_weighting() {
    let old = PolicyNet::randomized(arch(2), 4, 0.5).unwrap();
    let slab = reach_slab(&old, false, 4);
    let batch = build_ppo_batch(
        &slab,
        GranularitySpec::new(Level::Action, Level::Token),
        GaeParams::default(),
    )
    .unwrap();
    let net = perturbed(&old, 9, 0.01);
    let p = PpoParams {
        clip_eps: 10.0,
        value_loss_coef: 0.0,
        ..PpoParams::default()
    };
    let (t, _) = ppo_loss(&net, &batch, &p).unwrap();
    let w = 1.0 / batch.valid_units() as f64;
    let mut want = 0.0;
    for r in &batch.records {
        let new =
            &net.evaluate_logprobs(std::slice::from_ref(&r.obs), std::slice::from_ref(&r.chunk))[0];
        for (u, (n, o)) in new.iter().zip(&r.old_token_logprobs).enumerate() {
            if r.valid[u / 2] {
                want -= w * ratio(*n, *o) * r.adv[u / 2];
            }
        }
    }
    assert!((t.policy_loss - want).abs() < 1e-12);
    assert_eq!(t.clip_frac, 0.0);
}

#[test]
fn masked_units_have_no_influence() {
    let net = PolicyNet::randomized(arch(2), 5, 0.5).unwrap();
    let slab = reach_slab(&net, false, 5);
    let batch = build_ppo_batch(
        &slab,
        GranularitySpec::new(Level::Action, Level::Token),
        GaeParams::default(),
    )
    .unwrap();
    let mut padded = batch.clone();
    let mut extra = batch.records[0].clone();
    extra.valid = vec![false; extra.valid.len()];
    extra.adv = vec![123.0; extra.adv.len()];
    padded.records.push(extra);
    let p = params();
    let (_, a) = ppo_loss(&net, &batch, &p).unwrap();
    let (_, b) = ppo_loss(&net, &padded, &p).unwrap();
    assert_eq!(a, b);

    let mut only_masked = batch.clone();
    only_masked.records.truncate(1);
    only_masked.records[0].valid = vec![false; 2];
    let (t, g) = ppo_loss(&net, &only_masked, &p).unwrap();
    assert_eq!(t.loss, 0.0);
    assert!(g.iter().all(|&x| x == 0.0));
}

fn hand_grpo(net: &PolicyNet, lens: &[usize], adv: &[f64], groups: usize) -> RolloutBatch {
    let obs = Observation::new(vec![0.3, 0.1, -0.2, 0.0]);
    let chunk = ActionChunk::from_flat(&[0, 1], 2);
    let lp =
        net.evaluate_logprobs(std::slice::from_ref(&obs), std::slice::from_ref(&chunk))[0].clone();
    let mut records = Vec::new();
    let mut trajectories = Vec::new();
    for (i, (&l, &a)) in lens.iter().zip(adv).enumerate() {
        trajectories.push(TrajInfo {
            span: l,
            valid: l,
            group_size: lens.len() / groups,
        });
        for _ in 0..l {
            records.push(BatchRecord {
                obs: obs.clone(),
                chunk: chunk.clone(),
                old_token_logprobs: lp.clone(),
                adv: vec![a],
                returns: vec![0.0],
                valid: vec![true],
                traj: vec![Some(i)],
            });
        }
    }
    RolloutBatch {
        spec: GranularitySpec::new(Level::Chunk, Level::Chunk),
        chunk_len: 1,
        tokens_per_action: 2,
        records,
        trajectories,
        n_groups: groups,
    }
}

#[test]
fn grpo_examples() {
    let net = PolicyNet::randomized(arch(1), 6, 0.5).unwrap();
    let p = PpoParams::default();
    let b = hand_grpo(&net, &[3, 3], &[1.0, -1.0], 1);
    let (t, _) = grpo_loss(&net, &b, LengthNorm::Base, &p).unwrap();
    assert!(t.loss.abs() < 1e-15);

    let b = hand_grpo(&net, &[2, 8], &[1.0, -1.0], 1);
    let w = b.weights(Objective::Grpo(LengthNorm::LengthNormalized));
    let first: f64 = w[..2].iter().map(|x| x[0]).sum();
    let second: f64 = w[2..].iter().map(|x| x[0]).sum();
    assert_eq!(first, 0.5);
    assert!((second - 0.5).abs() < 1e-15);
    let (t, _) = grpo_loss(&net, &b, LengthNorm::LengthNormalized, &p).unwrap();
    assert!(t.loss.abs() < 1e-15);

    // Two groups of two: (A, length) = (1, 2), (-1, 4), (0.5, 1), (-0.5, 3).
    let b = hand_grpo(&net, &[2, 4, 1, 3], &[1.0, -1.0, 0.5, -0.5], 2);
    let (t, _) = grpo_loss(&net, &b, LengthNorm::LengthNormalized, &p).unwrap();
    let mut want = 0.0;
    for (l, a) in [(2usize, 1.0f64), (4, -1.0), (1, 0.5), (3, -0.5)] {
        for _ in 0..l {
            want += a / (2.0 * 2.0 * l as f64);
        }
    }
    assert!((t.loss + want).abs() < 1e-15);
    let empty = RolloutBatch {
        n_groups: 0,
        ..b.clone()
    };
    assert!(matches!(
        grpo_loss(&net, &empty, LengthNorm::Base, &p),
        Err(OptimError::SkipUpdate)
    ));
}

#[test]
fn grpo_batch_uses_first_episodes() {
    let net = PolicyNet::randomized(arch(2), 7, 0.5).unwrap();
    let slab = reach_slab(&net, true, 7);
    let b = build_grpo_batch(
        &slab,
        GranularitySpec::new(Level::Action, Level::Token),
        1e-8,
        open_bounds(),
        true,
    )
    .unwrap();
    assert_eq!(b.n_groups, 2);
    assert_eq!(b.trajectories.len(), 4);
    for g in 0..2 {
        let a: Vec<f64> = b
            .records
            .iter()
            .filter(|r| r.traj[0].map(|t| t / 2) == Some(g))
            .map(|r| r.adv[0])
            .collect();
        assert!(!a.is_empty());
    }
    let w = b.weights(Objective::Grpo(LengthNorm::LengthNormalized));
    let total: f64 = w.iter().flatten().sum();
    assert!((total - 1.0).abs() < 1e-12);
    let strict = build_grpo_batch(
        &slab,
        GranularitySpec::new(Level::Action, Level::Token),
        1e-8,
        FilterBounds::new(1e8, 1e9).unwrap(),
        true,
    );
    assert!(matches!(strict, Err(OptimError::SkipUpdate)));
}

#[test]
fn zero_advantage_leaves_token_head_alone() {
    let mut net = PolicyNet::randomized(arch(2), 8, 0.5).unwrap();
    let slab = reach_slab(&net, false, 8);
    let mut batch = build_ppo_batch(
        &slab,
        GranularitySpec::new(Level::Action, Level::Token),
        GaeParams::default(),
    )
    .unwrap();
    for r in &mut batch.records {
        r.adv.iter_mut().for_each(|a| *a = 0.0);
    }
    let before = net.clone();
    let p = PpoParams {
        normalize_advantages: Some(false),
        ..PpoParams::default()
    };
    let mut opt = Adam::new(net.num_params(), p.learning_rate, p.max_grad_norm);
    update(&mut net, &mut opt, &batch, Objective::Ppo, &p, 0).unwrap();
    let head = net.param_groups().token_head;
    assert_eq!(net.theta()[head.clone()], before.theta()[head]);
    assert_ne!(net.theta(), before.theta());
}

#[test]
fn update_is_deterministic_and_overfits() {
    let run = || {
        let mut net = PolicyNet::randomized(arch(2), 9, 0.5).unwrap();
        let slab = reach_slab(&net, false, 9);
        let batch = build_ppo_batch(
            &slab,
            GranularitySpec::new(Level::Action, Level::Token),
            GaeParams::default(),
        )
        .unwrap();
        let p = PpoParams {
            epochs_per_batch: 30,
            minibatch_size: 4,
            clip_eps: 1e6,
            ..PpoParams::default()
        };
        let mut opt = Adam::new(net.num_params(), 1e-2, 1.0);
        let m = update(&mut net, &mut opt, &batch, Objective::Ppo, &p, 3).unwrap();
        (net, m)
    };
    let (a, ma) = run();
    let (b, mb) = run();
    assert_eq!(a.theta(), b.theta());
    assert_eq!(ma, mb);
    assert!(ma.last.loss < ma.first.loss);
}

#[test]
fn adam_clips_gradient_norm() {
    let mut opt = Adam::new(2, 0.1, 1.0);
    let mut th = vec![0.0, 0.0];
    let n = opt.step(&mut th, &[30.0, 40.0]);
    assert_eq!(n, 50.0);
    // First Adam step moves each coordinate by about lr regardless of scale.
    assert!((th[0] + 0.1).abs() < 1e-6 && (th[1] + 0.1).abs() < 1e-6);
}

#[test]
fn metrics_round_trip() {
    let rec = MetricRecord {
        epoch: 3,
        algo: "ppo".into(),
        loss: -0.25,
        success_rate: 0.5,
        ..Default::default()
    };
    let mut buf = Vec::new();
    write_metric(&mut buf, &rec).unwrap();
    write_metric(&mut buf, &rec).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert_eq!(read_metrics(&text).unwrap(), vec![rec.clone(), rec]);
}
