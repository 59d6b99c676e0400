use super::*;
use crate::granularity::{aggregate_logprob, Level};
use crate::oracle::{binomial_halfwidth, central_difference, relative_error};
use crate::types::TokenAction;

fn arch() -> Architecture {
    Architecture {
        obs_dim: 3,
        trunk_widths: vec![6, 5],
        vocab_size: 3,
        chunk_len: 2,
        tokens_per_action: 2,
        value_hidden: 4,
    }
}

fn obs(x: f64) -> Observation {
    Observation::new(vec![x, -0.5 * x, 0.25])
}

fn chunk(tokens: &[u32]) -> ActionChunk {
    ActionChunk::from_flat(tokens, 2)
}

#[test]
fn fresh_policy_is_uniform_with_zero_values() {
    let net = PolicyNet::new(arch(), 1).unwrap();
    let ls = log_softmax(&net.forward_logits(&obs(0.3), &[1, 2]));
    for l in ls {
        assert!((l - (1.0f64 / 3.0).ln()).abs() < 1e-15);
    }
    let v = net.value(&[obs(0.3)], ValueHeadKind::Scalar);
    assert_eq!(v, vec![vec![0.0]]);
    let v = net.value(&[obs(0.3)], ValueHeadKind::Vector);
    assert_eq!(v, vec![vec![0.0, 0.0]]);
}

#[test]
fn logits_are_deterministic_and_prefix_sensitive() {
    let net = PolicyNet::randomized(arch(), 2, 0.5).unwrap();
    let a = net.forward_logits(&obs(0.1), &[0, 1]);
    assert_eq!(a, net.forward_logits(&obs(0.1), &[0, 1]));
    let b = net.forward_logits(&obs(0.1), &[0, 2]);
    let diff: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
    assert!(diff > 1e-6, "prefix token had no effect");
}

#[test]
fn logsumexp_normalization() {
    let net = PolicyNet::randomized(arch(), 3, 1.0).unwrap();
    for prefix in [&[][..], &[2], &[2, 0, 1]] {
        let ls = log_softmax(&net.forward_logits(&obs(0.7), prefix));
        let total: f64 = ls.iter().map(|l| l.exp()).sum();
        assert!((total - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn greedy_sampling_picks_argmax() {
    let net = PolicyNet::randomized(arch(), 4, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (c, lp) = net.sample_chunk(&obs(0.2), &mut rng, SampleMode::Greedy);
    let tokens = c.flat_tokens();
    for pos in 0..tokens.len() {
        let logits = net.forward_logits(&obs(0.2), &tokens[..pos]);
        assert_eq!(tokens[pos] as usize, argmax(&logits));
        assert_eq!(lp[pos], log_softmax(&logits)[tokens[pos] as usize]);
    }
}

#[test]
fn sampled_logprobs_match_evaluation() {
    let net = PolicyNet::randomized(arch(), 5, 0.8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut all_obs = Vec::new();
    let mut chunks = Vec::new();
    let mut stored = Vec::new();
    for i in 0..6 {
        let o = obs(i as f64 * 0.1);
        let (c, lp) = net.sample_chunk(&o, &mut rng, SampleMode::Stochastic);
        let chunk_lp = aggregate_logprob(&lp, 2, Level::Chunk)[0];
        let direct = aggregate_logprob(
            &net.evaluate_logprobs(std::slice::from_ref(&o), std::slice::from_ref(&c))[0],
            2,
            Level::Chunk,
        )[0];
        assert_eq!(chunk_lp, direct);
        all_obs.push(o);
        chunks.push(c);
        stored.push(lp);
    }
    let batch = net.evaluate_logprobs(&all_obs, &chunks);
    assert_eq!(batch, stored);
    for (i, (o, c)) in all_obs.iter().zip(&chunks).enumerate() {
        assert_eq!(
            net.evaluate_logprobs(std::slice::from_ref(o), std::slice::from_ref(c))[0],
            batch[i]
        );
    }
    let mut moved = net.clone();
    moved.theta_mut()[net.param_groups().token_head.start] += 0.3;
    assert_ne!(moved.evaluate_logprobs(&all_obs, &chunks), stored);
}

#[test]
fn sampling_frequencies_match_softmax() {
    let net = PolicyNet::randomized(arch(), 6, 1.0).unwrap();
    let o = obs(0.4);
    let probs: Vec<f64> = log_softmax(&net.forward_logits(&o, &[]))
        .iter()
        .map(|l| l.exp())
        .collect();
    let n = 100_000;
    let mut counts = [0usize; 3];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..n {
        let (c, _) = net.sample_chunk(&o, &mut rng, SampleMode::Stochastic);
        counts[c.0[0].0[0] as usize] += 1;
    }
    for k in 0..3 {
        let freq = counts[k] as f64 / n as f64;
        assert!(
            (freq - probs[k]).abs() <= binomial_halfwidth(probs[k], n, 3.0),
            "token {k}: freq {freq} vs p {}",
            probs[k]
        );
    }
}

#[test]
fn head_mismatch_rejected() {
    let net = PolicyNet::new(arch(), 1).unwrap();
    assert!(matches!(
        net.value_for_level(&[obs(0.0)], ValueHeadKind::Scalar, Level::Action),
        Err(PolicyError::HeadMismatch { .. })
    ));
    assert_eq!(
        net.value_for_level(&[obs(0.0)], ValueHeadKind::Vector, Level::Action)
            .unwrap()[0]
            .len(),
        2
    );
}

#[test]
fn quadratic_probe_and_constant_loss() {
    let net = PolicyNet::randomized(arch(), 7, 0.3).unwrap();
    let (_, g) = net
        .grad(|tape| {
            let th = tape.theta().to_vec();
            tape.seed_theta(&th);
            0.5 * th.iter().map(|x| x * x).sum::<f64>()
        })
        .unwrap();
    assert_eq!(g, net.theta());
    let (v, g) = net
        .grad(|tape| {
            tape.eval(&obs(0.1), &chunk(&[0, 1, 2, 0]));
            3.0
        })
        .unwrap();
    assert_eq!(v, 3.0);
    assert!(g.iter().all(|&x| x == 0.0));
}

/// A loss touching every output family with fixed random weights.
fn probe_loss(
    net: &PolicyNet,
    coeffs: &[f64],
    data: &[(Observation, ActionChunk)],
) -> (f64, Vec<f64>) {
    net.grad(|tape| {
        let mut total = 0.0;
        for (k, (o, c)) in data.iter().enumerate() {
            let (h, e) = tape.eval(o, c);
            let seed = tape.seed_mut(h);
            for p in 0..e.token_logprobs.len() {
                let a = coeffs[(k * 7 + p) % coeffs.len()];
                let b = coeffs[(k * 5 + p + 3) % coeffs.len()];
                total += a * e.token_logprobs[p] + b * e.entropies[p];
                seed.d_logprob[p] += a;
                seed.d_entropy[p] += b;
            }
            total += 0.5 * (e.value_scalar - 1.0).powi(2);
            seed.d_value_scalar += e.value_scalar - 1.0;
            for (j, v) in e.value_vector.iter().enumerate() {
                total += 0.5 * (v - coeffs[j]).powi(2);
                seed.d_value_vector[j] += v - coeffs[j];
            }
        }
        total
    })
    .unwrap()
}

fn probe_value(net: &PolicyNet, coeffs: &[f64], data: &[(Observation, ActionChunk)]) -> f64 {
    let mut total = 0.0;
    for (k, (o, c)) in data.iter().enumerate() {
        let (_, e) = net.forward_chunk(o.features(), &c.flat_tokens());
        for p in 0..e.token_logprobs.len() {
            total += coeffs[(k * 7 + p) % coeffs.len()] * e.token_logprobs[p]
                + coeffs[(k * 5 + p + 3) % coeffs.len()] * e.entropies[p];
        }
        total += 0.5 * (e.value_scalar - 1.0).powi(2);
        for (j, v) in e.value_vector.iter().enumerate() {
            total += 0.5 * (v - coeffs[j]).powi(2);
        }
    }
    total
}

#[test]
fn gradient_matches_finite_differences() {
    for seed in 0..10u64 {
        let net = PolicyNet::randomized(arch(), seed, 0.6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let coeffs: Vec<f64> = (0..11).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let data: Vec<_> = (0..3)
            .map(|i| {
                let o = obs(rng.gen_range(-1.0..1.0) + i as f64);
                let (c, _) = net.sample_chunk(&o, &mut rng, SampleMode::Stochastic);
                (o, c)
            })
            .collect();
        let (_, g) = probe_loss(&net, &coeffs, &data);
        let fd = central_difference(net.theta(), 1e-5, |th| {
            let n = PolicyNet::from_parts(arch(), th.to_vec()).unwrap();
            probe_value(&n, &coeffs, &data)
        });
        let err = relative_error(&g, &fd);
        assert!(err <= 1e-4, "seed {seed}: relative error {err}");
    }
}

#[test]
fn value_and_token_heads_are_isolated() {
    let net = PolicyNet::randomized(arch(), 21, 0.5).unwrap();
    let groups = net.param_groups();
    let o = obs(0.5);
    let c = chunk(&[1, 0, 2, 2]);
    let (_, g_value) = net
        .grad(|tape| {
            let (h, e) = tape.eval(&o, &c);
            tape.seed_mut(h).d_value_scalar = 1.0;
            tape.seed_mut(h).d_value_vector = vec![1.0; 2];
            e.value_scalar
        })
        .unwrap();
    assert!(g_value[groups.token_head.clone()].iter().all(|&x| x == 0.0));
    let (_, g_policy) = net
        .grad(|tape| {
            let (h, e) = tape.eval(&o, &c);
            tape.seed_mut(h).d_logprob = vec![1.0; 4];
            e.token_logprobs.iter().sum()
        })
        .unwrap();
    assert!(g_policy[groups.scalar_value_head.clone()]
        .iter()
        .all(|&x| x == 0.0));
    assert!(g_policy[groups.vector_value_head.clone()]
        .iter()
        .all(|&x| x == 0.0));
    assert!(g_policy[groups.token_head].iter().any(|&x| x != 0.0));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let net = PolicyNet::randomized(arch(), 8, 1.0).unwrap();
    let mut buf = Vec::new();
    net.save(&mut buf).unwrap();
    assert_eq!(&buf[..4], b"CKRL");
    assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
    let back = PolicyNet::load(&buf[..]).unwrap();
    assert_eq!(back.arch(), net.arch());
    assert!(back
        .theta()
        .iter()
        .zip(net.theta())
        .all(|(a, b)| a.to_bits() == b.to_bits()));
    let mut corrupt = buf.clone();
    corrupt[0] = b'X';
    assert!(PolicyNet::load(&corrupt[..]).is_err());
    assert!(PolicyNet::load(&buf[..buf.len() - 3]).is_err());
}

#[test]
fn token_action_validity() {
    assert!(TokenAction(vec![0, 2]).is_valid(2, 3));
    assert!(!TokenAction(vec![0, 3]).is_valid(2, 3));
}
