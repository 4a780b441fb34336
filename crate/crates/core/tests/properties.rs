mod common;

use foldact::losses::clipped_surrogate;
use foldact::policy::{restricted_log_sum_exp, sample_restricted, Arch, Policy, ScoredResponse};
use foldact::rewards::{assign_summary_rewards, HALLUCINATION_PENALTY, RETENTION_REWARD};
use foldact::rollout::{response_supports, run_batch, RolloutConfig};
use foldact::selection::select_training_turns;
use foldact::trajectory::{TokenCategory, Trajectory};
use foldact::vocab::{Token, Vocab};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_policy(seed: u64) -> Policy {
    Policy::init(Arch { vocab_size: 24, d_model: 8, n_layers: 1, n_heads: 2, window: 96 }, 0.3, seed).unwrap()
}

fn rollouts(policy_seed: u64, task_seed: u64, fold: Option<usize>) -> (Vocab, Policy, RolloutConfig, Vec<Trajectory>) {
    let p = tiny_policy(policy_seed);
    let vocab = Vocab::new(24).unwrap();
    let cfg = RolloutConfig { fold_trigger_len: fold, max_turns: Some(6), ..Default::default() };
    let batch = run_batch(&p, &vocab, &common::grad_env(), &[task_seed, task_seed + 1], &cfg).into_trajectories().unwrap();
    (vocab, p, cfg, batch)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn surrogate_is_the_pessimistic_minimum(rho in 0.0f64..3.0, adv in -2.0f64..2.0, eps in 0.05f64..0.5) {
        let (v, d, clipped) = clipped_surrogate(rho, adv, eps);
        let oracle = (rho * adv).min(rho.clamp(1.0 - eps, 1.0 + eps) * adv);
        prop_assert_eq!(v, oracle);
        prop_assert_eq!(d, if clipped { 0.0 } else { adv });
    }

    #[test]
    fn clipping_is_inert_inside_the_trust_region(u in -0.999f64..0.999, adv in -2.0f64..2.0, eps in 0.05f64..0.5) {
        let rho = 1.0 + u * eps;
        let (v, d, clipped) = clipped_surrogate(rho, adv, eps);
        prop_assert!(!clipped);
        prop_assert_eq!(v, rho * adv);
        prop_assert_eq!(d, adv);
    }

    #[test]
    fn restricted_sampling_is_normalised_over_its_support(
        logits in prop::collection::vec(-8.0f64..8.0, 16),
        mask in prop::collection::vec(any::<bool>(), 16),
        seed in any::<u64>(),
    ) {
        let mut allowed: Vec<Token> = (0..16u16).filter(|&i| mask[i as usize]).map(Token).collect();
        if allowed.is_empty() {
            allowed.push(Token(3));
        }
        let lse = restricted_log_sum_exp(&logits, &allowed);
        let total: f64 = allowed.iter().map(|t| (logits[t.id()] - lse).exp()).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        let (tok, lp) = sample_restricted(&logits, &allowed, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!(allowed.contains(&tok));
        if allowed.len() == 1 {
            prop_assert_eq!(lp, 0.0);
        } else {
            prop_assert!((lp - (logits[tok.id()] - lse)).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn selection_is_sorted_nonempty_and_nested(task_seed in 0u64..1000, seed in any::<u64>(), lo in 0.0f64..0.95, hi in 0.0f64..0.95) {
        let (_, _, _, batch) = rollouts(1, task_seed, Some(24));
        let (lo, hi) = (lo.min(hi), lo.max(hi));
        for t in &batch {
            let n = t.len();
            let a = select_training_turns(t, lo, seed, false).unwrap();
            let b = select_training_turns(t, hi, seed, false).unwrap();
            prop_assert_eq!(select_training_turns(t, 0.0, seed, false).unwrap(), (0..n).collect::<Vec<_>>());
            for sel in [&a, &b] {
                prop_assert!(!sel.is_empty());
                prop_assert!(sel.windows(2).all(|w| w[0] < w[1]));
                prop_assert!(sel.iter().all(|&i| i < n));
            }
            // A larger drop rate keeps a subset, apart from the forced final turn.
            prop_assert!(b.iter().all(|i| a.contains(i) || (b == vec![n - 1])));
        }
    }

    #[test]
    fn rollouts_replay_under_the_decode_grammar(policy_seed in 0u64..50, task_seed in 0u64..1000, fold in prop::option::of(12usize..48)) {
        let (vocab, p, cfg, mut batch) = rollouts(policy_seed, task_seed, fold);
        for t in &mut batch {
            for turn in &t.turns {
                let ctx = &turn.visible_state.tokens;
                let sup = response_supports(&vocab, ctx, &turn.response, &cfg.support()).unwrap();
                for (tok, s) in turn.response.iter().zip(&sup) {
                    prop_assert!(s.contains(tok));
                }
                let lp = ScoredResponse::score_restricted(&p, ctx, &turn.response, sup).unwrap().logprobs;
                prop_assert_eq!(&lp, &turn.rollout_logprobs);
                prop_assert!(lp.iter().all(|&x| x <= 0.0 && x.is_finite()));
                let m = &turn.masks;
                prop_assert_eq!(m.count(TokenCategory::Summary) + m.count(TokenCategory::Action), turn.response.len());
                if fold.is_none() {
                    prop_assert!(!turn.summary_emitted);
                }
            }
            assign_summary_rewards(t).unwrap();
            for &r in &t.summary_rewards {
                prop_assert!(r == 0.0 || r == HALLUCINATION_PENALTY || r == RETENTION_REWARD);
            }
        }
    }
}
