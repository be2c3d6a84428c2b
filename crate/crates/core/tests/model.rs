use std::collections::BTreeMap;

use proptest::prelude::*;
use stvqa::config::GradcheckSettings;
use stvqa::model::{
    argmax, readable_count, Answer, Model, ModelConfig, Prediction, QaItem, Task, Variant, VideoFeatures,
};
use stvqa::nn::{Ctx, DualState};
use stvqa::pipeline::{gradcheck_config, gradcheck_fixture};
use stvqa::tensor::Tensor;

fn fixture() -> (Vec<QaItem>, BTreeMap<String, VideoFeatures>) {
    gradcheck_fixture(&GradcheckSettings::default(), 11).unwrap()
}

fn model(variant: Variant, items: &[QaItem]) -> Model {
    Model::new(gradcheck_config(&GradcheckSettings::default(), variant, items), 5).unwrap()
}

fn item_for(items: &[QaItem], task: Task) -> &QaItem {
    items.iter().find(|i| i.task == task).unwrap()
}

fn zero_param(m: &mut Model, name: &str) {
    let id = m.store().id(name).unwrap_or_else(|| panic!("no parameter {name}"));
    for v in m.params.store.get_mut(id).data_mut() {
        *v = 0.0;
    }
}

fn scaled_features(f: &VideoFeatures, k: f64) -> VideoFeatures {
    let scale = |ts: &[Tensor]| ts.iter().map(|t| t.map(|v| v * k + 0.5)).collect();
    VideoFeatures::from_grids(f.grid, scale(&f.frame_grid), scale(&f.clip_grid)).unwrap()
}

#[test]
fn text_variant_ignores_the_video() {
    let (items, feats) = fixture();
    let m = model(Variant::Text, &items);
    for it in &items {
        let f = &feats[&it.episode_id];
        assert_eq!(m.predict(it, f).unwrap(), m.predict(it, &scaled_features(f, -3.0)).unwrap());
    }
}

#[test]
fn video_variants_read_the_video() {
    let (items, feats) = fixture();
    let it = item_for(&items, Task::Transition);
    let f = &feats[&it.episode_id];
    for v in [Variant::Resnet, Variant::C3d, Variant::Concat, Variant::Temporal] {
        let m = model(v, &items);
        assert_ne!(m.predict(it, f).unwrap(), m.predict(it, &scaled_features(f, -3.0)).unwrap(), "{v}");
    }
}

#[test]
fn video_input_width_follows_the_variant() {
    let (items, _) = fixture();
    let mut c = gradcheck_config(&GradcheckSettings::default(), Variant::Concat, &items);
    c.frame_channels = 16;
    c.clip_channels = 8;
    assert_eq!(c.video_input_dim(), 24);
    c.variant = Variant::Resnet;
    assert_eq!(c.video_input_dim(), 16);
    c.variant = Variant::C3d;
    assert_eq!(c.video_input_dim(), 8);
    let m = Model::new(ModelConfig { variant: Variant::Concat, ..c }, 0).unwrap();
    let w = m.store().id("video_lstm.lower.w_input").unwrap();
    assert_eq!(m.store().get(w).shape()[0], 24);
}

#[test]
fn spatial_video_states_depend_on_the_question() {
    let (items, feats) = fixture();
    let it = item_for(&items, Task::Transition);
    let f = &feats[&it.episode_id];
    let m = model(Variant::Spatial, &items);
    let states = |q: &[String]| {
        let mut ctx = Ctx::inference(m.store());
        let enc = m.encode_video(&mut ctx, f, Some(q)).unwrap();
        let last = *enc.states.last().unwrap();
        ctx.graph.value(last).clone()
    };
    let other = item_for(&items, Task::Count).question.clone();
    assert!(states(&it.question).max_abs_diff(&states(&other)) > 1e-9);

    let plain = model(Variant::Concat, &items);
    let mut ctx = Ctx::inference(plain.store());
    assert!(plain.encode_video(&mut ctx, f, None).is_ok());
    let mut ctx = Ctx::inference(m.store());
    assert!(m.encode_video(&mut ctx, f, None).is_err());
}

#[test]
fn zero_score_weights_give_uniform_masks() {
    let (items, feats) = fixture();
    let it = item_for(&items, Task::Action);
    let f = &feats[&it.episode_id];
    let mut m = model(Variant::SpatialTemporal, &items);
    zero_param(&mut m, "spatial_att.score.weight");
    zero_param(&mut m, "temporal_att.score.weight");
    let (_, trace) = m.predict_traced(it, f).unwrap();
    let cells = (f.grid * f.grid) as f64;
    for mask in &trace.spatial {
        assert!(mask.iter().all(|&w| (w - 1.0 / cells).abs() < 1e-15));
    }
    let temporal = trace.temporal.unwrap();
    assert_eq!(temporal.len(), f.steps());
    assert!(temporal.iter().all(|&w| (w - 1.0 / f.steps() as f64).abs() < 1e-15));
}

#[test]
fn dominant_score_gives_a_one_hot_spatial_mask() {
    let (items, _) = fixture();
    let mut m = model(Variant::Spatial, &items);
    let att = m.params.spatial.clone().unwrap();
    let width = GradcheckSettings::default().attention_hidden;
    for id in [att.hidden.weight, att.hidden.bias.unwrap(), att.score.weight] {
        m.params.store.get_mut(id).data_mut().fill(0.0);
    }
    // Key channel 0 drives hidden unit 0, which dominates the score.
    m.params.store.get_mut(att.hidden.weight).data_mut()[att.query_dim * width] = 1.0;
    m.params.store.get_mut(att.score.weight).data_mut()[0] = 1e4;
    let mut cells = Tensor::zeros(&[4, att.key_dim]);
    cells.data_mut()[2 * att.key_dim] = 1.0;
    cells.data_mut()[2 * att.key_dim + 1] = 0.25;

    let mut ctx = Ctx::inference(m.store());
    let query = ctx.graph.constant(Tensor::zeros(&[1, att.query_dim]));
    let (attended, mask) = m.spatial_attend(&mut ctx, query, &cells).unwrap();
    let w = ctx.graph.value(mask).data().to_vec();
    assert!((w[2] - 1.0).abs() < 1e-12, "{w:?}");
    let row = ctx.graph.value(attended).data().to_vec();
    assert!((row[0] - 1.0).abs() < 1e-12 && (row[1] - 0.25).abs() < 1e-12);
}

#[test]
fn masks_are_distributions_on_random_inputs() {
    let (items, feats) = fixture();
    for seed in 0..4 {
        let m = Model::new(gradcheck_config(&GradcheckSettings::default(), Variant::SpatialTemporal, &items), seed)
            .unwrap();
        for it in &items {
            let (_, trace) = m.predict_traced(it, &feats[&it.episode_id]).unwrap();
            for mask in trace.spatial.iter().chain(trace.temporal.iter()) {
                assert!(mask.iter().all(|&w| w >= 0.0));
                assert!((mask.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn encode_text_shapes_and_answer_state() {
    let (items, _) = fixture();
    let m = model(Variant::Concat, &items);
    let q = &item_for(&items, Task::Action).question;
    let mut ctx = Ctx::inference(m.store());
    let zero = DualState::zeros(&mut ctx.graph, 8);
    let enc = m.encode_text(&mut ctx, q, None, zero).unwrap();
    assert_eq!(ctx.graph.shape(enc.question_state), &[1, 16]);
    assert!(enc.answer_state.is_none());
    let ans = vec!["smile".to_string()];
    let enc2 = m.encode_text(&mut ctx, q, Some(&ans), zero).unwrap();
    let a = enc2.answer_state.unwrap();
    assert_eq!(ctx.graph.shape(a), &[1, 16]);
    assert!(ctx.graph.value(a).max_abs_diff(ctx.graph.value(enc2.question_state)) > 0.0);
    assert!(m.encode_text(&mut ctx, &[], None, zero).is_err());
}

#[test]
fn zero_projection_leaves_the_query_unchanged() {
    let (items, feats) = fixture();
    let it = item_for(&items, Task::Transition);
    let mut m = model(Variant::Temporal, &items);
    zero_param(&mut m, "temporal_att.proj");
    let mut ctx = Ctx::inference(m.store());
    let video = m.encode_video(&mut ctx, &feats[&it.episode_id], None).unwrap();
    let q = ctx.graph.variable(Tensor::row(&(0..16).map(|i| i as f64 / 10.0).collect::<Vec<_>>()));
    let (fused, mask) = m.temporal_attend(&mut ctx, q, &video.states).unwrap();
    assert_eq!(ctx.graph.value(fused), ctx.graph.value(q));
    assert_eq!(ctx.graph.shape(mask), &[1, 4]);
}

#[test]
fn single_step_attention_is_the_identity_mask() {
    let (items, feats) = fixture();
    let it = item_for(&items, Task::Transition);
    let m = model(Variant::Temporal, &items);
    let one = feats[&it.episode_id].frame(2);
    let (_, trace) = m.predict_traced(it, &one).unwrap();
    assert_eq!(trace.temporal.unwrap(), vec![1.0]);
}

#[test]
fn decoders_are_affine() {
    let (items, _) = fixture();
    let m = model(Variant::Concat, &items);
    let mut ctx = Ctx::inference(m.store());
    let a = Tensor::row(&(0..16).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>());
    let b = Tensor::row(&(0..16).map(|i| (i as f64 * 0.11).cos()).collect::<Vec<_>>());
    let sum = a.zip_map(&b, |x, y| x + y);
    let zero = Tensor::zeros(&[1, 16]);
    let mut eval = |t: &Tensor, f: &dyn Fn(&Model, &mut Ctx<'_>, stvqa::graph::Var) -> stvqa::graph::Var| {
        let v = ctx.graph.constant(t.clone());
        let out = f(&m, &mut ctx, v);
        ctx.graph.value(out).data().to_vec()
    };
    let choice = |m: &Model, c: &mut Ctx<'_>, v| m.decode_choice(c, v).unwrap();
    let count = |m: &Model, c: &mut Ctx<'_>, v| m.decode_count(c, v).unwrap();
    // W_sᵀ(a + b) = W_sᵀa + W_sᵀb with no bias.
    let (sa, sb, ss, s0) = (eval(&a, &choice), eval(&b, &choice), eval(&sum, &choice), eval(&zero, &choice));
    assert!((ss[0] - sa[0] - sb[0]).abs() < 1e-12);
    assert_eq!(s0, vec![0.0]);
    // Affine with a bias: f(a + b) = f(a) + f(b) - f(0).
    let (ca, cb, cs, c0) = (eval(&a, &count), eval(&b, &count), eval(&sum, &count), eval(&zero, &count));
    assert!((cs[0] - ca[0] - cb[0] + c0[0]).abs() < 1e-12);
}

#[test]
fn zero_word_decoder_is_uniform_and_picks_the_first_word() {
    let (items, feats) = fixture();
    let it = item_for(&items, Task::FrameQa);
    let mut m = model(Variant::Temporal, &items);
    zero_param(&mut m, "word.weight");
    zero_param(&mut m, "word.bias");
    match m.predict(it, &feats[&it.episode_id]).unwrap() {
        Prediction::Word { distribution, index, word } => {
            assert_eq!(distribution.len(), 11);
            assert!(distribution.iter().all(|&p| (p - 1.0 / 11.0).abs() < 1e-15));
            assert_eq!(index, 0);
            assert_eq!(word, m.answers.word(0));
        }
        p => panic!("unexpected {p:?}"),
    }
}

#[test]
fn choice_items_score_every_candidate() {
    let (items, feats) = fixture();
    let it = item_for(&items, Task::Action);
    for v in Variant::ALL {
        let m = model(v, &items);
        match m.predict(it, &feats[&it.episode_id]).unwrap() {
            Prediction::Choice { scores, index } => {
                assert_eq!(scores.len(), 5);
                assert_eq!(index, argmax(&scores));
            }
            p => panic!("unexpected {p:?}"),
        }
    }
}

#[test]
fn count_readout_rounds_and_clamps() {
    assert_eq!(readable_count(-3.2), 0);
    assert_eq!(readable_count(2.49), 2);
    assert_eq!(readable_count(2.5), 3);
    assert_eq!(readable_count(14.0), 10);
    let p = Prediction::Count { value: 3.4 };
    assert!(p.is_correct(&Answer::Count { label: 3 }));
    assert!(!p.is_correct(&Answer::Count { label: 4 }));
    assert!(!p.is_correct(&Answer::Word { word: "red".into() }));
}

#[test]
fn argmax_breaks_ties_low() {
    assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
    assert_eq!(argmax(&[0.0; 5]), 0);
}

#[test]
fn prediction_is_deterministic_in_the_seed() {
    let (items, feats) = fixture();
    let c = gradcheck_config(&GradcheckSettings::default(), Variant::SpatialTemporal, &items);
    let a = Model::new(c.clone(), 9).unwrap();
    let b = Model::new(c.clone(), 9).unwrap();
    let other = Model::new(c, 10).unwrap();
    let it = item_for(&items, Task::Count);
    let f = &feats[&it.episode_id];
    assert_eq!(a.predict(it, f).unwrap(), b.predict(it, f).unwrap());
    assert_ne!(a.predict(it, f).unwrap(), other.predict(it, f).unwrap());
}

#[test]
fn uniform_spatial_attention_reduces_to_the_temporal_model() {
    let (items, feats) = fixture();
    let mut st = model(Variant::SpatialTemporal, &items);
    zero_param(&mut st, "spatial_att.score.weight");
    let mut tp = model(Variant::Temporal, &items);
    let copied = tp.params.store.copy_matching(st.store());
    assert_eq!(copied, tp.store().len());
    for it in &items {
        let f = &feats[&it.episode_id];
        let (a, b) = (st.predict(it, f).unwrap(), tp.predict(it, f).unwrap());
        let flat = |p: &Prediction| match p {
            Prediction::Count { value } => vec![*value],
            Prediction::Choice { scores, .. } => scores.clone(),
            Prediction::Word { distribution, .. } => distribution.clone(),
        };
        for (x, y) in flat(&a).iter().zip(flat(&b)) {
            assert!((x - y).abs() < 1e-12, "{}: {x} vs {y}", it.id);
        }
    }
}

#[test]
fn mismatched_features_are_rejected() {
    let (items, feats) = fixture();
    let it = item_for(&items, Task::Count);
    let f = &feats[&it.episode_id];
    let wide = VideoFeatures::from_grids(
        f.grid,
        f.frame_grid.iter().map(|_| Tensor::zeros(&[4, 5])).collect(),
        f.clip_grid.clone(),
    )
    .unwrap();
    assert!(model(Variant::Concat, &items).predict(it, &wide).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn argmax_ignores_positive_scaling(v in prop::collection::vec(-10.0f64..10.0, 1..8), k in 0.01f64..100.0) {
        let scaled: Vec<f64> = v.iter().map(|x| x * k).collect();
        prop_assert_eq!(argmax(&v), argmax(&scaled));
    }

    #[test]
    fn masks_normalize_for_any_seed(seed in 0u64..1000) {
        let (items, feats) = fixture();
        let m = Model::new(gradcheck_config(&GradcheckSettings::default(), Variant::SpatialTemporal, &items), seed).unwrap();
        let it = item_for(&items, Task::Transition);
        let (_, trace) = m.predict_traced(it, &feats[&it.episode_id]).unwrap();
        for mask in trace.spatial.iter().chain(trace.temporal.iter()) {
            prop_assert!(mask.iter().all(|&w| w >= 0.0));
            prop_assert!((mask.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
