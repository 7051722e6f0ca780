mod common;

use countgd::inference::{run, CountRequest, PromptMode, DEFAULT_SIGMA};
use countgd::model::CountingModel;
use countgd::nn::Session;
use countgd::tensor::{focal_positive, logit, Tensor};
use countgd::training::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn targets(points: &[(f64, f64)], m: usize) -> Targets {
    Targets {
        points: points.to_vec(),
        token_masks: vec![vec![true; m]; points.len()],
    }
}

fn quick_config(steps: usize) -> TrainConfig {
    TrainConfig {
        epochs: 10,
        max_steps: Some(steps),
        batch_size: 2,
        schedule: Schedule {
            lr: 1e-3,
            decay_every: 100,
            decay_factor: 0.1,
        },
        augment: AugmentConfig::flip_only(),
        seed: 17,
        ..TrainConfig::default()
    }
}

#[test]
fn focal_term_closed_form() {
    assert_eq!(focal_positive(1.0, 0.25, 2.0), 0.0);
    let expected = 0.25 * 0.25 * 2f64.ln();
    assert!((focal_positive(0.5, 0.25, 2.0) - expected).abs() < 1e-15);
    assert!((expected - 0.04332).abs() < 1e-5);
}

#[test]
fn default_weights() {
    let cfg = LossConfig::default();
    assert_eq!((cfg.lambda_loc, cfg.lambda_cls), (1.0, 5.0));
    assert_eq!((cfg.alpha, cfg.gamma), (0.25, 2.0));
}

#[test]
fn perfect_prediction_is_the_cheapest_match() {
    let t = targets(&[(0.2, 0.3), (0.7, 0.6)], 1);
    let sim = Tensor::new([3, 1], vec![1.0 - 1e-9, 0.4, 0.6]).unwrap();
    let centers = Tensor::new([3, 2], vec![0.2, 0.3, 0.5, 0.5, 0.9, 0.9]).unwrap();
    let cost = match_cost(&sim, &centers, &t, &LossConfig::default()).unwrap();
    assert!(cost.at(0, 0) < 1e-8);
    assert!(cost.at(0, 0) < cost.at(1, 0) && cost.at(0, 0) < cost.at(2, 0));
}

#[test]
fn doubling_lambda_loc_doubles_only_the_distance_term() {
    let t = targets(&[(0.2, 0.3), (0.7, 0.6)], 2);
    let sim = Tensor::new([3, 2], vec![0.9, 0.2, 0.4, 0.5, 0.1, 0.7]).unwrap();
    let centers = Tensor::new([3, 2], vec![0.1, 0.3, 0.5, 0.5, 0.9, 0.8]).unwrap();
    let base = LossConfig::default();
    let double = LossConfig {
        lambda_loc: 2.0 * base.lambda_loc,
        ..base
    };
    let c1 = match_cost(&sim, &centers, &t, &base).unwrap();
    let c2 = match_cost(&sim, &centers, &t, &double).unwrap();
    for i in 0..3 {
        for j in 0..2 {
            let l1 = (centers.at(i, 0) - t.points[j].0).abs() + (centers.at(i, 1) - t.points[j].1).abs();
            let best = sim.at(i, 0).max(sim.at(i, 1));
            let cls = base.lambda_cls * focal_positive(best, base.alpha, base.gamma);
            assert!((c1.at(i, j) - (l1 + cls)).abs() < 1e-12);
            assert!((c2.at(i, j) - (2.0 * l1 + cls)).abs() < 1e-12);
        }
    }
}

/// Set loss of a constant prediction against `t`, matched by `stage_loss`.
fn stage_total(logits: &Tensor, centers: &Tensor, t: &Targets, cfg: &LossConfig) -> (f64, LossParts, MatchResult) {
    let store = countgd::nn::ParamStore::new();
    let mut s = Session::inference(&store);
    let l = s.constant(logits.clone());
    let c = s.constant(centers.clone());
    let (v, parts, m) = stage_loss(&mut s, l, Some(c), None, t, cfg).unwrap();
    (s.value(v).item(), parts, m)
}

#[test]
fn no_targets_penalize_only_background() {
    let logits = Tensor::new([2, 1], vec![logit(0.3), logit(0.6)]).unwrap();
    let centers = Tensor::new([2, 2], vec![0.1, 0.1, 0.5, 0.5]).unwrap();
    let cfg = LossConfig::default();
    let (total, parts, m) = stage_total(&logits, &centers, &Targets::default(), &cfg);
    assert!(m.assignment.is_empty());
    assert_eq!(parts.loc, 0.0);
    // negatives: (1 - alpha) p^gamma (-ln(1 - p))
    let neg = |p: f64| (1.0 - cfg.alpha) * p * p * -(1.0 - p).ln();
    let expected = cfg.lambda_cls * (neg(0.3) + neg(0.6));
    assert!((total - expected).abs() < 1e-12, "{total} vs {expected}");
}

#[test]
fn one_optimizer_step_lowers_the_loss() {
    let mut model = common::tiny_model();
    let sample = common::tiny_sample(21);
    let ex = build_example(&model, &sample, PromptMode::Both, &[], true, None).unwrap();
    let cfg = LossConfig::default();
    let loss_of = |model: &CountingModel| {
        let mut s = Session::inference(model.params());
        let (v, _) = example_loss(model, &mut s, &ex, &cfg, true).unwrap();
        s.value(v).item()
    };
    let before = loss_of(&model);
    let grads = {
        let mut s = Session::training(model.params());
        let (v, _) = example_loss(&model, &mut s, &ex, &cfg, true).unwrap();
        s.tape.backward(v).unwrap();
        s.param_grads()
    };
    let mut opt = AdamW::new(model.params(), 0.0);
    opt.step(model.params_mut(), &grads, 1e-4).unwrap();
    let after = loss_of(&model);
    assert!(after < before, "{after} >= {before}");
}

#[test]
fn flip_mirrors_points_and_is_an_involution() {
    let s = common::tiny_sample(2);
    let w = s.image.width() as f64;
    let mut probe = s.clone();
    probe.classes[0].points[0] = (0.25 * w, 7.0);
    let once = flip(&probe);
    assert_eq!(once.classes[0].points[0], (0.75 * w, 7.0));
    let twice = flip(&once);
    assert_eq!(twice.image, probe.image);
    assert_eq!(twice.classes[0].points, probe.classes[0].points);
    assert_eq!(twice.classes[0].exemplars, probe.classes[0].exemplars);
}

#[test]
fn resizing_to_the_current_short_side_is_the_identity() {
    let image = countgd::encoders::ImageInput::filled(480, 960, [0.2, 0.4, 0.6]).unwrap();
    let (scale, out) = image.resize_shortest_side(480).unwrap();
    assert_eq!(scale, 1.0);
    assert_eq!((out.width(), out.height()), (960, 480));
}

#[test]
fn flip_probability_is_one_half() {
    let s = common::tiny_sample(4);
    let flipped = flip(&s);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = AugmentConfig::flip_only();
    let n = 10_000;
    let hits = (0..n)
        .filter(|_| augment(&s, &mut rng, &cfg).unwrap().classes[0].points == flipped.classes[0].points)
        .count();
    let rate = hits as f64 / n as f64;
    assert!((0.49..=0.51).contains(&rate), "{rate}");
}

#[test]
fn learning_rate_decays_tenfold_every_ten_epochs() {
    let s = Schedule::default();
    assert_eq!(s.lr_at(1), 1e-4);
    assert_eq!(s.lr_at(10), 1e-4);
    assert!((s.lr_at(11) - 1e-5).abs() < 1e-20);
    assert!((s.lr_at(21) - 1e-6).abs() < 1e-21);
}

#[test]
fn seeded_training_is_deterministic() {
    let samples: Vec<_> = (30..34).map(common::tiny_sample).collect();
    let cfg = quick_config(4);
    let mut a = common::tiny_model();
    let mut b = common::tiny_model();
    let ra = train(&mut a, &samples, &[], &cfg).unwrap();
    let rb = train(&mut b, &samples, &[], &cfg).unwrap();
    assert_eq!(ra.step_losses.len(), 4);
    assert_eq!(ra.step_losses, rb.step_losses);
    for id in a.params().ids() {
        assert_eq!(a.params().get(id), b.params().get(id), "{}", a.params().name(id));
    }
}

#[test]
fn checkpoints_round_trip() {
    let samples: Vec<_> = (40..42).map(common::tiny_sample).collect();
    let mut model = common::tiny_model();
    train(&mut model, &samples, &[], &quick_config(2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let meta = serde_json::json!({ "note": "round trip" });
    model.save(&path, meta.clone()).unwrap();
    let (back, meta_back) = CountingModel::load(&path).unwrap();
    assert_eq!(meta_back, meta);
    assert_eq!(back.config(), model.config());
    assert_eq!(back.vocab().words(), model.vocab().words());
    let req = CountRequest::for_sample(&samples[0], PromptMode::Both, DEFAULT_SIGMA);
    assert_eq!(
        run(&back, &samples[0].image, &req).unwrap(),
        run(&model, &samples[0].image, &req).unwrap()
    );
}

#[test]
fn tune_grid_has_45_distinct_settings() {
    let mut grid = tune_grid();
    assert_eq!(grid.len(), 45);
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    grid.dedup();
    assert_eq!(grid.len(), 45);
}

fn cost_problem() -> impl Strategy<Value = (Tensor, Tensor, Vec<(f64, f64)>)> {
    (2usize..6, 1usize..4).prop_flat_map(|(k, l)| {
        (
            proptest::collection::vec(0.01f64..0.99, k * 2),
            proptest::collection::vec(0.0f64..1.0, k * 2),
            proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), l.min(k)),
        )
            .prop_map(move |(p, c, t)| {
                (
                    Tensor::new([k, 2], p.iter().map(|&x| logit(x)).collect()).unwrap(),
                    Tensor::new([k, 2], c).unwrap(),
                    t,
                )
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loss_ignores_target_order((logits, centers, pts) in cost_problem(), seed in 0u64..1000) {
        use rand::seq::SliceRandom;
        let t = targets(&pts, 2);
        let mut order: Vec<usize> = (0..t.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let cfg = LossConfig::default();
        let (a, _, _) = stage_total(&logits, &centers, &t, &cfg);
        let (b, _, _) = stage_total(&logits, &centers, &t.permuted(&order), &cfg);
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn scaling_both_weights_keeps_the_matching((logits, centers, pts) in cost_problem(), f in 0.5f64..4.0) {
        let t = targets(&pts, 2);
        let cfg = LossConfig::default();
        let scaled = LossConfig { lambda_loc: f * cfg.lambda_loc, lambda_cls: f * cfg.lambda_cls, ..cfg };
        let (a, _, ma) = stage_total(&logits, &centers, &t, &cfg);
        let (b, _, mb) = stage_total(&logits, &centers, &t, &scaled);
        prop_assert!((b - f * a).abs() < 1e-9 * (1.0 + b.abs()));
        prop_assert!((mb.total - f * ma.total).abs() < 1e-9 * (1.0 + mb.total.abs()));
    }
}
