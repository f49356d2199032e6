use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use trajmoe::grpo::*;
use trajmoe::model::{Checkpoint, LabelledScene, ModelConfig, Scorer, Stage};
use trajmoe::numerics::{grad_check, GradCheckConfig, NumericsError, Objective, ParamId, ParamStore, Tape, Tensor, Var};
use trajmoe::vocab::{build_vocabulary, sample_trajectories, KinematicParams};
use trajmoe::world::generate_dataset;

fn cfg() -> GrpoConfig {
    GrpoConfig::default()
}

/// Term-by-term re-implementation of the clipped surrogate.
fn brute_force_j(g: &GroupRollout, mu: f64, sigma: f64, c: &GrpoConfig) -> f64 {
    let logn = |x: f64, m: f64, s: f64| {
        let z = (x - m) / s;
        -(s.ln()) - 0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5 * z * z
    };
    let kl = 0.5
        * ((sigma * sigma).ln() - (g.sigma_ref * g.sigma_ref).ln()
            + (g.sigma_ref * g.sigma_ref + (mu - g.mu_ref).powi(2)) / (sigma * sigma)
            - 1.0);
    let mut total = 0.0;
    for (s, a) in g.samples.iter().zip(&g.advantages) {
        let ratio = (logn(*s, mu, sigma) - logn(*s, g.mu_old, g.sigma_old)).clamp(-LOG_RATIO_CLAMP, LOG_RATIO_CLAMP).exp();
        let clipped = ratio.max(1.0 - c.clip_eps).min(1.0 + c.clip_eps);
        total += (ratio * a).min(clipped * a) - c.beta * kl;
    }
    total / g.samples.len() as f64
}

fn random_rollout(rng: &mut ChaCha8Rng, n: usize, mode: AdvantageMode) -> GroupRollout {
    let mu_old = rng.random_range(-1.0..1.0);
    let sigma_old = rng.random_range(0.05..1.0);
    let samples = sample_group_with(mu_old, sigma_old, n, rng).unwrap();
    GroupRollout::from_samples(
        (mu_old, sigma_old),
        (rng.random_range(-1.0..1.0), rng.random_range(0.05..1.0)),
        samples,
        rng.random_range(0.0..1.0),
        mode,
    )
}

#[test]
fn formula_examples() {
    assert_eq!(gaussian_kl(0.0, 1.0, 1.0, 1.0, 0.01).unwrap(), 0.5);
    assert_eq!(gaussian_kl(0.3, 0.2, 0.3, 0.2, 0.01).unwrap(), 0.0);
    assert!((gaussian_log_prob(0.0, 0.0, 1.0, 0.01).unwrap() + 0.918_938_533_204_672_7).abs() < 1e-12);
    let a = gaussian_log_prob(0.0, 0.0, 1.0, 0.01).unwrap();
    let b = gaussian_log_prob(0.0, 0.0, 2.0, 0.01).unwrap();
    assert!((a - b - 2f64.ln()).abs() < 1e-12);
    assert_eq!(
        gaussian_log_prob(1.3, 0.5, 0.7, 0.01).unwrap(),
        gaussian_log_prob(-0.3, 0.5, 0.7, 0.01).unwrap()
    );
    assert!(matches!(gaussian_log_prob(0.0, 0.0, 0.001, 0.01), Err(GrpoError::SigmaTooSmall { .. })));
    assert!(gaussian_kl(0.0, 0.005, 0.0, 1.0, 0.01).is_err());

    let (r, norm) = group_rewards(&[-1.0, -3.0], 0.0);
    assert_eq!(r, vec![-1.0, -3.0]);
    assert!((norm[0] - 1.0).abs() < 1e-12 && (norm[1] + 1.0).abs() < 1e-12);
    let (r, norm) = group_rewards(&[0.4; 5], 0.4);
    assert_eq!(r, vec![0.0; 5]);
    assert_eq!(norm, vec![0.0; 5]);

    assert_eq!(advantages(&[1.0, -1.0], AdvantageMode::PerSample), vec![1.0, -1.0]);
    assert_eq!(advantages(&[1.0, -1.0], AdvantageMode::SuffixSum), vec![1.0, 0.0]);
    assert_eq!(advantages(&[0.0; 4], AdvantageMode::SuffixSum), vec![0.0; 4]);
    assert!(matches!("bogus".parse::<AdvantageMode>(), Err(GrpoError::UnknownMode(_))));
    assert_eq!("suffix_sum".parse::<AdvantageMode>().unwrap(), AdvantageMode::SuffixSum);

    assert_eq!(rl_loss(0.2, 0.1, 0.0), -0.2);
    assert!((rl_loss(0.2, 0.1, 1.0) + 0.1).abs() < 1e-15);
}

#[test]
fn sampling_statistics_and_determinism() {
    assert_eq!(sample_group(0.3, 0.0, 7, 1).unwrap(), vec![0.3; 7]);
    assert_eq!(sample_group(0.0, 1.0, 16, 5).unwrap(), sample_group(0.0, 1.0, 16, 5).unwrap());
    let s = sample_group(0.0, 1.0, 100_000, 9).unwrap();
    let n = s.len() as f64;
    let mean = s.iter().sum::<f64>() / n;
    let std = (s.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!(mean.abs() < 0.02 && (std - 1.0).abs() < 0.02);
    assert!(sample_group(0.0, -1.0, 3, 0).is_err());
}

#[test]
fn kl_matches_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..10_000 {
        let (a, b, c, d) = (
            rng.random_range(-3.0..3.0),
            rng.random_range(0.01..3.0),
            rng.random_range(-3.0..3.0),
            rng.random_range(0.01..3.0),
        );
        assert!(gaussian_kl(a, b, c, d, 0.01).unwrap() >= 0.0);
    }
    for _ in 0..20 {
        let (mt, st, mr, sr) = (
            rng.random_range(-1.0..1.0),
            rng.random_range(0.3..1.5),
            rng.random_range(-1.0..1.0),
            rng.random_range(0.3..1.5),
        );
        // The closed form is KL(ref ‖ θ): E_{x~ref}[log ref(x) − log θ(x)].
        let n = 100_000;
        let vals: Vec<f64> = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                let x = mr + sr * z;
                gaussian_log_prob(x, mr, sr, 0.01).unwrap() - gaussian_log_prob(x, mt, st, 0.01).unwrap()
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let se = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt() / (n as f64).sqrt();
        let kl = gaussian_kl(mt, st, mr, sr, 0.01).unwrap();
        assert!((kl - mean).abs() <= 3.0 * se + 1e-12, "kl {kl} mc {mean} se {se}");
    }
}

proptest! {
    #[test]
    fn normalised_rewards_have_zero_mean_unit_std(samples in proptest::collection::vec(-5.0f64..5.0, 2..40), target in -5.0f64..5.0) {
        let (r, norm) = group_rewards(&samples, target);
        let n = r.len() as f64;
        let mean = r.iter().sum::<f64>() / n;
        let std = (r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        if std > 1e-12 {
            let m = norm.iter().sum::<f64>() / n;
            let s = (norm.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt();
            prop_assert!(m.abs() < 1e-9 && (s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn objective_matches_brute_force(seed in 0u64..1000, suffix in any::<bool>(), dmu in -0.2f64..0.2, ds in 0.5f64..1.5) {
        let mode = if suffix { AdvantageMode::SuffixSum } else { AdvantageMode::PerSample };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_rollout(&mut rng, 16, mode);
        let (mu, sigma) = (g.mu_old + dmu, g.sigma_old * ds);
        let c = cfg();
        let (j, _) = grpo_objective(&g, mu, sigma, &c).unwrap();
        prop_assert!((j - brute_force_j(&g, mu, sigma, &c)).abs() < 1e-10);
        // the tape version agrees with the scalar one
        let mut tape = Tape::new();
        let m = tape.leaf(Tensor::vector(vec![mu]));
        let s = tape.leaf(Tensor::vector(vec![sigma]));
        let rec = record_objective(&mut tape, std::slice::from_ref(&g), m, s, &c).unwrap();
        prop_assert!((tape.scalar_value(rec.j).unwrap() - j).abs() < 1e-12);
    }

    #[test]
    fn shifting_samples_and_target_changes_nothing(seed in 0u64..1000, shift in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples: Vec<f64> = (0..16).map(|_| rng.random_range(-2.0..2.0)).collect();
        let target = rng.random_range(-2.0..2.0);
        // shifts that are exact in floating point keep r bit-identical
        let shift = (shift * 8.0).round() / 8.0;
        let moved: Vec<f64> = samples.iter().map(|s| s + shift).collect();
        let (r1, n1) = group_rewards(&samples, target);
        let (r2, n2) = group_rewards(&moved, target + shift);
        for (a, b) in r1.iter().zip(&r2) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in n1.iter().zip(&n2) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn shift_invariance_is_exact_for_representable_shifts() {
    let samples = [0.25, -0.5, 1.0, 0.75];
    let moved: Vec<f64> = samples.iter().map(|s| s + 2.0).collect();
    assert_eq!(group_rewards(&samples, 0.5), group_rewards(&moved, 2.5));
    let g1 = GroupRollout::from_samples((0.0, 0.5), (0.0, 0.5), samples.to_vec(), 0.5, AdvantageMode::PerSample);
    let g2 = GroupRollout::from_samples((2.0, 0.5), (2.0, 0.5), moved, 2.5, AdvantageMode::PerSample);
    assert_eq!(g1.advantages, g2.advantages);
    let j1 = grpo_objective(&g1, 0.125, 0.5, &cfg()).unwrap().0;
    let j2 = grpo_objective(&g2, 2.125, 0.5, &cfg()).unwrap().0;
    assert_eq!(j1, j2);
}

#[test]
fn initial_objective_equals_mean_advantage() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for mode in [AdvantageMode::PerSample, AdvantageMode::SuffixSum] {
        let mut g = random_rollout(&mut rng, 16, mode);
        g.mu_ref = g.mu_old;
        g.sigma_ref = g.sigma_old;
        let (j, d) = grpo_objective(&g, g.mu_old, g.sigma_old, &cfg()).unwrap();
        let mean = g.advantages.iter().sum::<f64>() / 16.0;
        assert!((j - mean).abs() < 1e-12);
        assert_eq!(d.kl, 0.0);
        assert_eq!(d.mean_ratio, 1.0);
        assert_eq!(d.clip_fraction, 0.0);
    }
}

/// Rollout whose `i`-th ratio under `N(mu, 1)` is exactly `ratios[i]` at
/// `mu = 0`, built by placing samples where the log-density gap matches.
fn manufactured(ratios: &[f64], adv: &[f64]) -> GroupRollout {
    // With σ = σ_old = 1 and μ = 0, log ratio at s is
    // −s²/2 + (s − μ_old)²/2 = −s·μ_old + μ_old²/2. Take μ_old = 1.
    let samples: Vec<f64> = ratios.iter().map(|r| 0.5 - r.ln()).collect();
    GroupRollout {
        mu_old: 1.0,
        sigma_old: 1.0,
        mu_ref: 0.0,
        sigma_ref: 1.0,
        samples,
        target: 0.0,
        rewards: vec![0.0; ratios.len()],
        normalized: adv.to_vec(),
        advantages: adv.to_vec(),
    }
}

#[test]
fn clipping_binds_with_zero_gradient() {
    let c = GrpoConfig { beta: 0.0, ..cfg() };
    let eps = c.clip_eps;
    for (ratio, adv) in [(1.0 + 2.0 * eps, 1.0), (1.0 - 2.0 * eps, -1.0)] {
        let g = manufactured(&[ratio], &[adv]);
        let (j, d) = grpo_objective(&g, 0.0, 1.0, &c).unwrap();
        let bound = if adv > 0.0 { 1.0 + eps } else { 1.0 - eps };
        assert!((j - bound * adv).abs() < 1e-12, "{j}");
        assert_eq!(d.clip_fraction, 1.0);
        let mut tape = Tape::new();
        let mu = tape.leaf(Tensor::vector(vec![0.0]));
        let sigma = tape.leaf(Tensor::vector(vec![1.0]));
        let rec = record_objective(&mut tape, &[g], mu, sigma, &c).unwrap();
        let grads = tape.backward(rec.j).unwrap();
        assert_eq!(grads.get_or_zeros(mu, &[1]).data()[0], 0.0);
    }
    // when the unclipped branch is the minimum the gradient flows
    let g = manufactured(&[1.0 + 2.0 * eps], &[-1.0]);
    let mut tape = Tape::new();
    let mu = tape.leaf(Tensor::vector(vec![0.0]));
    let sigma = tape.leaf(Tensor::vector(vec![1.0]));
    let rec = record_objective(&mut tape, &[g], mu, sigma, &c).unwrap();
    let grads = tape.backward(rec.j).unwrap();
    assert!(grads.get_or_zeros(mu, &[1]).data()[0] != 0.0);
}

struct HeadLoss {
    policy: ModelHeads,
    items: Vec<usize>,
    rollouts: Vec<GroupRollout>,
    config: GrpoConfig,
}

impl Objective for HeadLoss {
    fn record(&self, tape: &mut Tape, _: &ParamStore, vars: &[Var]) -> Result<Var, NumericsError> {
        let (mu, sigma) = self.policy.record(tape, vars, &self.items).expect("valid items");
        Ok(record_objective(tape, &self.rollouts, mu, sigma, &self.config).expect("valid rollouts").loss)
    }
}

fn small_setup() -> (Checkpoint, Vec<LabelledScene>) {
    let trajs = sample_trajectories(2, 300, &KinematicParams::default()).unwrap();
    let vocab = build_vocabulary(&trajs, 8, 20, 2, 0.5).unwrap();
    let cfg = ModelConfig {
        dim: 8,
        heads: 2,
        experts: 3,
        top_k: 2,
        expert_hidden: 6,
        ..ModelConfig::default()
    };
    let scorer = Scorer::init(&cfg, 4).unwrap();
    let scenes = LabelledScene::label_all(&generate_dataset(3, 6), &vocab).unwrap();
    (Checkpoint::new(Stage::Sup, 4, vocab, scorer).unwrap(), scenes)
}

#[test]
fn head_gradient_matches_finite_differences() {
    let (ck, scenes) = small_setup();
    let features = scenes.iter().map(|s| ck.scorer.fused_features(&s.input).unwrap()).collect();
    let targets = scenes.iter().map(|s| s.targets.clone()).collect();
    let policy = ModelHeads::new(features, targets, 5, 0.01).unwrap();
    let mut params = ModelHeads::params_from(&ck.scorer);
    let items = vec![0, 7, 33, 100, 150, 239];
    let (mu, sigma) = policy.evaluate(&params, &items).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let rollouts = items
        .iter()
        .enumerate()
        .map(|(r, &i)| {
            let s = sample_group_with(mu[r], sigma[r], 16, &mut rng).unwrap();
            GroupRollout::from_samples((mu[r], sigma[r]), (mu[r] - 0.05, sigma[r] * 1.2), s, policy.target(i), AdvantageMode::PerSample)
        })
        .collect();
    // move away from θ_old so ratios differ from 1 without clipping
    for v in params.get_mut(ParamId(0)).data_mut() {
        *v += 0.01;
    }
    let obj = HeadLoss {
        policy,
        items,
        rollouts,
        config: GrpoConfig { clip_eps: 0.9, ..cfg() },
    };
    let report = grad_check(&obj, &mut params, &GradCheckConfig::default()).unwrap();
    assert!(report.passed(), "{:?}", report.failures.first());
    assert!(report.checked > 0);
}

#[test]
fn finetune_touches_only_heads() {
    let (ck, scenes) = small_setup();
    let (same, logs) = finetune_checkpoint(&ck, &scenes, &GrpoConfig { iterations: 0, ..cfg() }).unwrap();
    assert!(logs.is_empty());
    assert!(same.scorer.params.bit_eq(&ck.scorer.params));
    assert_eq!(same.stage, Stage::Grpo);

    let (tuned, logs) = finetune_checkpoint(&ck, &scenes, &GrpoConfig { iterations: 20, ..cfg() }).unwrap();
    assert_eq!(logs.len(), 20);
    let heads = ck.scorer.head_ids();
    let mut changed = false;
    for (id, name, t) in ck.scorer.params.iter() {
        let after = tuned.scorer.params.get(id);
        if heads.contains(&id) {
            changed |= !after.bit_eq(t);
        } else {
            assert!(after.bit_eq(t), "{name} moved");
        }
    }
    assert!(changed);
    assert!(matches!(
        finetune_checkpoint(&tuned, &scenes, &cfg()),
        Err(GrpoError::Stage { .. })
    ));
    let mut csv = Vec::new();
    write_log_csv(&mut csv, &logs).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("iteration,loss,J,KL,clip_fraction,mean_abs_err\n"));
}

#[test]
fn toy_head_moves_towards_target() {
    let head = ScalarHead {
        target: 0.7,
        sigma_min: 0.01,
    };
    let mut params = head.params(0.0, 0.1);
    assert!((params.get(ParamId(1)).data()[0].exp().ln_1p() + 0.01 - 0.1).abs() < 1e-12);
    let logs = finetune(&head, &mut params, &cfg()).unwrap();
    assert_eq!(logs.len(), 200);
    let mu = params.get(ParamId(0)).data()[0];
    assert!((mu - 0.7).abs() < 0.7, "{mu}");
    let mut again = head.params(0.0, 0.1);
    finetune(&head, &mut again, &cfg()).unwrap();
    assert!(again.bit_eq(&params));
}

#[test]
fn invalid_configs_are_rejected() {
    for bad in [
        GrpoConfig { group_size: 1, ..cfg() },
        GrpoConfig { clip_eps: 1.0, ..cfg() },
        GrpoConfig { beta: -0.1, ..cfg() },
        GrpoConfig { lambda: -1.0, ..cfg() },
        GrpoConfig { lr: 0.0, ..cfg() },
    ] {
        assert!(matches!(bad.validate(), Err(GrpoError::Config(_))));
    }
}
