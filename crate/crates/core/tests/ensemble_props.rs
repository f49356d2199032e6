use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use trajmoe::ensemble::*;
use trajmoe::geometry::Vec2;
use trajmoe::model::{
    anchor_features, select_trajectory, Checkpoint, ModelConfig, Scorer, ScorerInput, Stage, SELECTION_WEIGHTS,
};
use trajmoe::vocab::{build_vocabulary, sample_trajectories, KinematicParams, Trajectory};
use trajmoe::world::{generate_dataset, oracle_scores};

fn random_trajectory(rng: &mut ChaCha8Rng, horizon: usize) -> Trajectory {
    let pts: Vec<Vec2> = (0..horizon)
        .map(|_| Vec2::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0)))
        .collect();
    Trajectory::from_xy(&pts)
}

fn same_xy(a: &Trajectory, b: &Trajectory) -> bool {
    a.poses().iter().zip(b.poses()).all(|(p, q)| p.x.to_bits() == q.x.to_bits() && p.y.to_bits() == q.y.to_bits())
}

#[test]
fn one_hot_weights_reproduce_member() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let m = rng.random_range(1..6);
        let trajs: Vec<_> = (0..m).map(|_| random_trajectory(&mut rng, 8)).collect();
        let pick = rng.random_range(0..m);
        let mut w = vec![0.0; m];
        w[pick] = rng.random_range(0.1..10.0);
        let out = weighted_average(&trajs, &w).unwrap();
        assert!(same_xy(&out, &trajs[pick]));
        assert_eq!(out, Trajectory::from_xy(&trajs[pick].positions()));
    }
}

#[test]
fn hand_computed_examples() {
    // two parallel lines one metre apart average to the midline
    let a = Trajectory::from_xy(&(1..=8).map(|i| Vec2::new(i as f64, 0.0)).collect::<Vec<_>>());
    let b = Trajectory::from_xy(&(1..=8).map(|i| Vec2::new(i as f64, 1.0)).collect::<Vec<_>>());
    let mid = weighted_average(&[a.clone(), b.clone()], &[1.0, 1.0]).unwrap();
    for (i, p) in mid.poses().iter().enumerate() {
        assert_eq!((p.x, p.y), ((i + 1) as f64, 0.5));
        // the first heading points away from the ego origin
        let heading = if i == 0 { 0.5f64.atan2(1.0) } else { 0.0 };
        assert!((p.heading - heading).abs() < 1e-15);
    }
    // (2, 1, 1) weights against a term-by-term evaluation
    let c = Trajectory::from_xy(&(1..=8).map(|i| Vec2::new(i as f64, 3.0)).collect::<Vec<_>>());
    let out = weighted_average(&[a, b, c], &[2.0, 1.0, 1.0]).unwrap();
    for p in out.poses() {
        assert!((p.y - (2.0 * 0.0 + 1.0 + 3.0) / 4.0).abs() < 1e-15);
    }
}

#[test]
fn scaling_weights_changes_nothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..300 {
        let m = rng.random_range(2..6);
        let trajs: Vec<_> = (0..m).map(|_| random_trajectory(&mut rng, 8)).collect();
        let w: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..5.0)).collect();
        let base = weighted_average(&trajs, &w).unwrap();
        for p in [-20, -3, 1, 7, 40] {
            let c = 2f64.powi(p);
            let scaled: Vec<f64> = w.iter().map(|x| x * c).collect();
            assert!(same_xy(&base, &weighted_average(&trajs, &scaled).unwrap()));
        }
        let c = rng.random_range(0.01..100.0);
        let scaled: Vec<f64> = w.iter().map(|x| x * c).collect();
        let out = weighted_average(&trajs, &scaled).unwrap();
        for (p, q) in base.poses().iter().zip(out.poses()) {
            worst = worst.max((p.x - q.x).abs()).max((p.y - q.y).abs());
        }
    }
    // general factors perturb the normalised weights by a few ulps only
    assert!(worst < 1e-12, "{worst}");
}

proptest! {
    #[test]
    fn output_stays_in_convex_hull(seed in 0u64..u64::MAX) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = rng.random_range(1..6);
        let trajs: Vec<_> = (0..m).map(|_| random_trajectory(&mut rng, 8)).collect();
        let w: Vec<f64> = (0..m).map(|i| if i == 0 { 1.0 } else { rng.random_range(0.0..3.0) }).collect();
        let out = weighted_average(&trajs, &w).unwrap();
        for (i, p) in out.poses().iter().enumerate() {
            let xs = trajs.iter().map(|t| t.poses()[i].x);
            let ys = trajs.iter().map(|t| t.poses()[i].y);
            prop_assert!(p.x >= xs.clone().fold(f64::INFINITY, f64::min) && p.x <= xs.fold(f64::NEG_INFINITY, f64::max));
            prop_assert!(p.y >= ys.clone().fold(f64::INFINITY, f64::min) && p.y <= ys.fold(f64::NEG_INFINITY, f64::max));
        }
    }
}

#[test]
fn convex_hull_on_a_thousand_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..1000 {
        let m = rng.random_range(1..8);
        let trajs: Vec<_> = (0..m).map(|_| random_trajectory(&mut rng, 8)).collect();
        let mut w: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..3.0)).collect();
        w[0] += 1e-3;
        let out = weighted_average(&trajs, &w).unwrap();
        for (i, p) in out.poses().iter().enumerate() {
            assert!(trajs.iter().any(|t| t.poses()[i].x <= p.x) && trajs.iter().any(|t| t.poses()[i].x >= p.x));
            assert!(trajs.iter().any(|t| t.poses()[i].y <= p.y) && trajs.iter().any(|t| t.poses()[i].y >= p.y));
        }
    }
}

#[test]
fn malformed_inputs_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let t = random_trajectory(&mut rng, 8);
    let short = random_trajectory(&mut rng, 4);
    assert!(matches!(weighted_average(&[], &[]), Err(EnsembleError::Empty)));
    assert!(matches!(weighted_average(std::slice::from_ref(&t), &[0.0]), Err(EnsembleError::ZeroWeights)));
    assert!(matches!(weighted_average(std::slice::from_ref(&t), &[-1.0]), Err(EnsembleError::BadWeight { .. })));
    assert!(matches!(weighted_average(std::slice::from_ref(&t), &[f64::NAN]), Err(EnsembleError::BadWeight { .. })));
    assert!(matches!(weighted_average(std::slice::from_ref(&t), &[1.0, 1.0]), Err(EnsembleError::CountMismatch { .. })));
    assert!(matches!(
        weighted_average(&[t, short], &[1.0, 1.0]),
        Err(EnsembleError::HorizonMismatch { index: 1, .. })
    ));
    assert!(EnsembleSpec::read(r#"{"members": [], "extra": 1}"#.as_bytes()).is_err());
    assert!(matches!(
        EnsembleSpec::read(r#"{"members": []}"#.as_bytes()).and_then(|s| s.validate()),
        Err(EnsembleError::Empty)
    ));
}

fn members(n: usize) -> Vec<Checkpoint> {
    let trajs = sample_trajectories(3, 600, &KinematicParams::default()).unwrap();
    let vocab = build_vocabulary(&trajs, 16, 20, 3, 0.5).unwrap();
    let cfg = ModelConfig {
        dim: 16,
        heads: 2,
        experts: 4,
        top_k: 2,
        expert_hidden: 16,
        ..ModelConfig::default()
    };
    (0..n)
        .map(|s| Checkpoint::new(Stage::Sup, s as u64, vocab.clone(), Scorer::init(&cfg, 100 + s as u64).unwrap()).unwrap())
        .collect()
}

#[test]
fn single_member_plan_is_its_selection() {
    let ck = members(1).remove(0);
    let ens = Ensemble::new(vec![ck.clone()], vec![2.5]).unwrap();
    for scenario in generate_dataset(6, 20) {
        let plan = ensemble_plan(&scenario, &ens).unwrap();
        let anchors = anchor_features(&ck.vocabulary);
        let out = ck.scorer.score(&ScorerInput::new(&scenario, &anchors).unwrap()).unwrap();
        let pick = select_trajectory(&out.mu, SELECTION_WEIGHTS);
        assert_eq!(plan.members[0].selected, pick);
        assert!(same_xy(&plan.trajectory, &ck.vocabulary.anchors[pick]));
    }
}

#[test]
fn identical_picks_pass_through() {
    let ck = members(1).remove(0);
    let ens = Ensemble::new(vec![ck.clone(), ck.clone(), ck], vec![1.0, 0.3, 2.0]).unwrap();
    for scenario in generate_dataset(7, 10) {
        let plan = ensemble_plan(&scenario, &ens).unwrap();
        let pick = plan.members[0].selected;
        assert!(plan.members.iter().all(|m| m.selected == pick));
        assert!(same_xy(&plan.trajectory, &ens.members[0].vocabulary.anchors[pick]));
    }
}

#[test]
fn spec_round_trips_and_loads_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let cks = members(2);
    for (i, ck) in cks.iter().enumerate() {
        ck.save(&dir.path().join(format!("m{i}.json"))).unwrap();
    }
    let spec = EnsembleSpec::uniform(["m0.json".into(), "m1.json".into()]);
    spec.save(&dir.path().join("ens.json")).unwrap();
    let back = EnsembleSpec::load(&dir.path().join("ens.json")).unwrap();
    assert_eq!(back, spec);
    let ens = Ensemble::load(&back, dir.path()).unwrap();
    for (a, b) in ens.members.iter().zip(&cks) {
        assert!(a.scorer.params.bit_eq(&b.scorer.params));
        assert_eq!(a.vocabulary, b.vocabulary);
    }
    let missing = EnsembleSpec::uniform(["m0.json".into(), "nope.json".into()]);
    assert!(matches!(Ensemble::load(&missing, dir.path()), Err(EnsembleError::Member { index: 1, .. })));
}

#[test]
fn ensemble_rarely_worse_than_every_member() {
    let ens = Ensemble::new(members(3), vec![1.0; 3]).unwrap();
    let scenes = generate_dataset(8, 200);
    let mut ok = 0;
    for scenario in &scenes {
        let plan = ensemble_plan(scenario, &ens).unwrap();
        let tf = scenario.ego_transform();
        let score = |t: &Trajectory| oracle_scores(&t.transformed(&tf), scenario).unwrap().aggregate;
        let worst = plan
            .members
            .iter()
            .map(|m| score(&ens.members[m.member].vocabulary.anchors[m.selected]))
            .fold(f64::INFINITY, f64::min);
        if score(&plan.trajectory) >= worst {
            ok += 1;
        }
    }
    assert!(ok >= 180, "{ok} of 200");
}
