mod common;

use countgd::decoder::select_queries;
use countgd::encoders::{EncoderConfig, TextPrompt, Vocabulary};
use countgd::model::{CountingModel, ModelConfig, Prompt};
use countgd::nn::Session;
use countgd::tensor::{Tape, Tensor};
use countgd::training::{build_example, example_loss, LossConfig};
use countgd::inference::{prepare_image, PromptMode};
use proptest::prelude::*;

#[test]
fn token_count_over_three_strides() {
    let cfg = ModelConfig {
        encoder: EncoderConfig {
            stride: 4,
            ..common::tiny_config().encoder
        },
        ..common::tiny_config()
    };
    let model = CountingModel::new(cfg, common::shape_vocab()).unwrap();
    assert_eq!(model.num_image_tokens(128, 128), 32 * 32 + 16 * 16 + 8 * 8);
    assert_eq!(model.num_image_tokens(128, 128), 1344);
}

#[test]
fn separator_is_a_token() {
    let vocab = Vocabulary::new(["strawberry"]);
    let p = TextPrompt::parse("strawberry .", &vocab).unwrap();
    assert_eq!(p.len(), 2);
    assert_eq!(p.tokens[1], vocab.separator());
    assert!(TextPrompt::parse("", &vocab).unwrap().is_empty());
}

#[test]
fn similarity_is_k_by_prompt_tokens() {
    let mut model = common::tiny_model();
    model.set_image_side(48).unwrap();
    let s = common::tiny_sample(8);
    let (_, img) = prepare_image(&model, &s.image).unwrap();
    assert!(model.num_image_tokens(img.height(), img.width()) >= 100);
    let boxes: Vec<_> = s.primary().exemplars.iter().map(|b| b.scaled(1.5)).chain([s.primary().exemplars[0].scaled(1.5)]).collect();
    assert_eq!(boxes.len(), 3);
    let prompt = Prompt::new(model.parse_text(&s.class_text()).unwrap(), boxes);
    let mut sess = Session::inference(model.params());
    let f = model.forward_with_k(&mut sess, &img, &prompt, 100).unwrap();
    assert_eq!(f.output.similarity(&sess).shape(), [100, 5]);
}

#[test]
fn zeroed_score_head_gives_one_half_everywhere() {
    let mut model = common::tiny_model();
    for id in model.decoder().score_params() {
        let t = model.params_mut().get_mut(id);
        *t = Tensor::zeros(t.shape().to_vec());
    }
    let s = common::tiny_sample(9);
    let (_, img) = prepare_image(&model, &s.image).unwrap();
    let prompt = Prompt::new(model.parse_text(&s.class_text()).unwrap(), s.primary().exemplars.clone());
    let pred = model.predict(&img, &prompt, true).unwrap();
    assert!(pred.similarity.data().iter().all(|&v| v == 0.5));
}

#[test]
fn masked_token_pairs_get_no_attention() {
    let model = common::tiny_model();
    let s = common::tiny_sample(10);
    let (_, img) = prepare_image(&model, &s.image).unwrap();
    let text = model.parse_text(&format!("{} . {} .", s.classes[0].name, s.classes[1].name)).unwrap();
    let mut prompt = Prompt::new(text, s.primary().exemplars.clone());
    prompt.exemplar_classes = vec![0; prompt.boxes.len()];
    let mut sess = Session::inference(model.params());
    sess.record_attention();
    let f = model.forward(&mut sess, &img, &prompt).unwrap();
    let mask = f.tokens.additive_mask();
    let n = f.tokens.len();
    let blocked = mask.data().iter().filter(|v| v.is_infinite()).count();
    assert!(blocked > 0);
    let probes: Vec<_> = sess.take_probes().into_iter().filter(|p| p.label.contains("/token/")).collect();
    assert!(!probes.is_empty());
    for p in probes {
        assert_eq!(p.weights.shape(), [n, n]);
        for i in 0..n {
            for j in 0..n {
                if mask.at(i, j).is_infinite() {
                    assert_eq!(p.weights.at(i, j), 0.0, "{} ({i}, {j})", p.label);
                } else {
                    assert!(p.weights.at(i, j) > 0.0);
                }
            }
        }
    }
}

#[test]
fn exemplar_projection_receives_gradient() {
    let model = common::tiny_model();
    let s = common::tiny_sample(12);
    let ex = build_example(&model, &s, PromptMode::Exemplars, &[], false, None).unwrap();
    let mut sess = Session::training(model.params());
    let (loss, _) = example_loss(&model, &mut sess, &ex, &LossConfig::default(), true).unwrap();
    sess.tape.backward(loss).unwrap();
    let grads = sess.param_grads();
    let id = model.params().id("exemplar.fuse.weight").unwrap();
    let g = grads[model.params().ids().position(|x| x == id).unwrap()].as_ref().unwrap();
    assert!(g.data().iter().any(|&v| v != 0.0));
}

#[test]
fn reordering_class_groups_permutes_scores_only() {
    let model = common::tiny_model();
    let s = common::tiny_sample(13);
    let (_, img) = prepare_image(&model, &s.image).unwrap();
    let (a, b) = (&s.classes[0].name, &s.classes[1].name);
    let ab = model.predict(&img, &Prompt::new(model.parse_text(&format!("{a} . {b} .")).unwrap(), vec![]), true).unwrap();
    let ba = model.predict(&img, &Prompt::new(model.parse_text(&format!("{b} . {a} .")).unwrap(), vec![]), true).unwrap();
    // "a ." occupies columns 0..2 of the first and 2..4 of the second
    let perm = [2, 3, 0, 1];
    assert_eq!(ab.similarity.shape(), ba.similarity.shape());
    for q in 0..ab.similarity.rows() {
        for (j, &pj) in perm.iter().enumerate() {
            assert!((ab.similarity.at(q, j) - ba.similarity.at(q, pj)).abs() < 1e-9);
        }
    }
    for (x, y) in ab.centers.data().iter().zip(ba.centers.data()) {
        assert!((x - y).abs() < 1e-9);
    }
}

#[test]
fn identical_inputs_give_identical_outputs() {
    let model = common::tiny_model();
    let s = common::tiny_sample(14);
    let (_, img) = prepare_image(&model, &s.image).unwrap();
    let prompt = Prompt::new(model.parse_text(&s.class_text()).unwrap(), s.primary().exemplars.clone());
    let a = model.predict(&img, &prompt, true).unwrap();
    let b = model.predict(&img, &prompt, true).unwrap();
    assert_eq!(a.similarity, b.similarity);
    assert_eq!(a.centers, b.centers);
}

fn matrix(rows: std::ops::Range<usize>, cols: usize) -> impl Strategy<Value = Tensor> {
    rows.prop_flat_map(move |r| {
        proptest::collection::vec(-3.0f64..3.0, r * cols).prop_map(move |v| Tensor::new([r, cols], v).unwrap())
    })
}

proptest! {
    #[test]
    fn selection_ignores_prompt_order(image in matrix(4..20, 3), prompt in matrix(1..5, 3), k in 1usize..4, seed in 0u64..100) {
        use rand::{seq::SliceRandom, SeedableRng};
        let mut order: Vec<usize> = (0..prompt.rows()).collect();
        order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let shuffled = Tensor::new(
            [prompt.rows(), 3],
            order.iter().flat_map(|&i| prompt.row(i).to_vec()).collect(),
        ).unwrap();
        prop_assert_eq!(select_queries(&image, &prompt, k).unwrap(), select_queries(&image, &shuffled, k).unwrap());
    }

    #[test]
    fn full_budget_selects_every_token_once(image in matrix(1..30, 4), prompt in matrix(1..4, 4)) {
        let n = image.rows();
        let mut idx = select_queries(&image, &prompt, n).unwrap().indices;
        idx.sort_unstable();
        prop_assert_eq!(idx, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn softmax_rows_sum_to_one(
        x in matrix(1..6, 5),
        blocked in proptest::collection::vec(proptest::bool::weighted(0.3), 30),
    ) {
        let (r, c) = (x.rows(), x.cols());
        // keep the diagonal open so that no row is fully masked
        let mask = countgd::nn::additive_mask(r, c, |i, j| i % c == j || !blocked[i * c + j]);
        let mut tape = Tape::new();
        let v = tape.leaf(x, false);
        let y = tape.softmax(v, 1, Some(&mask)).unwrap();
        let y = tape.value(y);
        for i in 0..r {
            let sum: f64 = y.row(i).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            for j in 0..c {
                if mask.at(i, j).is_infinite() {
                    prop_assert_eq!(y.at(i, j), 0.0);
                }
            }
        }
    }
}
