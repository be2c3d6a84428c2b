use std::collections::BTreeSet;

use stvqa::model::{spatial_mean, Answer, Task};
use stvqa::qagen::{make_zero_count_items, HashEmbedding};
use stvqa::rng;
use stvqa::synth::{
    beat_content, build_dataset, derive_qa, generate_episode, lexicon_corpus, render_features, Act, AttributeKind,
    Codebook, DataConfig, Difficulty, EpisodeKind, QaHooks, RenderSpec, SyntheticEpisode, TaskCounts, Truth, ACTIONS,
};

fn counts(count: usize, action: usize, transition: usize, frameqa: usize) -> TaskCounts {
    TaskCounts { count, action, transition, frameqa }
}

fn episode(kind: EpisodeKind, seed: u64) -> SyntheticEpisode {
    generate_episode(kind, &Difficulty::default(), &RenderSpec::default(), &format!("ep{seed}"), seed).unwrap()
}

/// Pearson statistic of `observed` against equal expected counts.
fn chi_square(observed: &[usize]) -> f64 {
    let n: usize = observed.iter().sum();
    let expected = n as f64 / observed.len() as f64;
    observed.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum()
}

/// Reads the labels straight off the segments, without looking at `truth`.
fn read_latent(ep: &SyntheticEpisode) -> Truth {
    let mut truth = Truth { count: None, action: None, transition: None, color: None };
    match ep.kind {
        EpisodeKind::Repetition => {
            let mut count = 0;
            for seg in &ep.segments {
                if let Some(Act::Action(a)) = seg.act {
                    // Visible on even beats only.
                    count = seg.beats.div_ceil(2);
                    truth.action = Some(a);
                }
            }
            truth.count = Some(count as u8);
        }
        EpisodeKind::Transition | EpisodeKind::Frame => {
            let marked: Vec<_> = ep.segments.iter().filter(|s| s.marked).collect();
            assert_eq!(marked.len(), 1, "{}", ep.id);
            let seg = marked[0];
            for at in &seg.attributes {
                match (ep.kind, seg.act, at.kind) {
                    (EpisodeKind::Transition, Some(Act::State(prev)), AttributeKind::State(next)) => {
                        truth.transition = Some((prev, next))
                    }
                    (EpisodeKind::Frame, _, AttributeKind::Color(c)) if at.cell == ep.actor_cell => {
                        truth.color = Some(c)
                    }
                    _ => {}
                }
            }
        }
    }
    truth
}

#[test]
fn label_histogram_follows_the_configured_weights() {
    let weights = vec![1.0, 2.0, 3.0, 4.0, 1.0, 1.0, 2.0, 3.0, 1.0, 1.0, 1.0];
    let total: f64 = weights.iter().sum();
    let difficulty = Difficulty { steps: 24, count_weights: weights.clone(), force_count: None };
    let spec = RenderSpec::default();
    let n = 10_000;
    let mut hist = [0usize; 11];
    for i in 0..n {
        let ep = generate_episode(EpisodeKind::Repetition, &difficulty, &spec, "h", i).unwrap();
        hist[ep.truth.count.unwrap() as usize] += 1;
    }
    for (k, w) in weights.iter().enumerate() {
        let got = hist[k] as f64 / n as f64;
        assert!((got - w / total).abs() < 0.02, "label {k}: {got} vs {}", w / total);
    }
}

#[test]
fn a_latent_reader_reproduces_every_label() {
    for kind in [EpisodeKind::Repetition, EpisodeKind::Transition, EpisodeKind::Frame] {
        for seed in 0..300 {
            let ep = episode(kind, seed);
            let read = read_latent(&ep);
            if kind == EpisodeKind::Repetition && ep.truth.count == Some(0) {
                assert_eq!(read.count, Some(0));
            } else {
                assert_eq!(read, ep.truth, "{kind:?} seed {seed}");
            }
        }
    }
}

#[test]
fn repeat_counts_stay_in_range_with_one_repeating_segment() {
    for seed in 0..300 {
        let ep = episode(EpisodeKind::Repetition, seed);
        assert!(ep.truth.count.unwrap() <= 10);
        assert!(ep.segments.iter().filter(|s| matches!(s.act, Some(Act::Action(_)))).count() <= 1);
    }
}

#[test]
fn the_needle_step_shows_the_marked_beat() {
    for kind in [EpisodeKind::Transition, EpisodeKind::Frame] {
        for seed in 0..100 {
            let ep = episode(kind, seed);
            let t = ep.needle.unwrap();
            let beat = t * ep.stride / ep.frames_per_beat;
            let (segment, _) = ep.beat_index()[beat];
            assert!(ep.segments[segment].marked);
        }
    }
}

#[test]
fn changing_non_needle_beats_never_changes_the_answer() {
    let book = Codebook::new(&RenderSpec::default());
    for kind in [EpisodeKind::Transition, EpisodeKind::Frame] {
        for seed in 0..100 {
            let ep = episode(kind, seed);
            let mut mutated = ep.clone();
            let donor = episode(kind, seed + 10_000);
            for (s, seg) in mutated.segments.iter_mut().enumerate() {
                if !seg.marked {
                    // Take the unmarked content of another episode.
                    let d = &donor.segments[s];
                    seg.act = d.act;
                    seg.attributes = d.attributes.clone();
                }
            }
            mutated.truth = read_latent(&mutated);
            assert_eq!(mutated.truth, ep.truth, "{kind:?} seed {seed}");
            // The marked beat itself still renders identically.
            let (segment, offset) = ep.beat_index()[ep.needle.unwrap() * ep.stride / ep.frames_per_beat];
            assert_eq!(beat_content(&ep, &book, segment, offset), beat_content(&mutated, &book, segment, offset));
        }
    }
}

#[test]
fn first_clip_window_pads_with_the_first_frame() {
    let spec = RenderSpec { noise: 0.0, ..RenderSpec::default() };
    let book = Codebook::new(&spec);
    let ep = episode(EpisodeKind::Repetition, 21);
    let f = render_features(&ep, &spec).unwrap();
    let index = ep.beat_index();
    let motion_at = |frame: usize| {
        let (s, j) = index[frame / ep.frames_per_beat];
        beat_content(&ep, &book, s, j).1
    };
    // Window of 16 frames centred on frame 0: eight padded copies of frame 0,
    // then frames 0 to 7.
    let frames: Vec<usize> = std::iter::repeat_n(0, 8).chain(0..8).collect();
    let mut want = vec![0.0; motion_at(0).len()];
    for fr in frames {
        for (w, m) in want.iter_mut().zip(motion_at(fr)) {
            *w += m / 16.0;
        }
    }
    for (got, want) in f.clip_grid[0].data().iter().zip(&want) {
        assert!((got - want).abs() <= 1e-6 * want.abs().max(1.0), "{got} vs {want}");
    }
}

#[test]
fn pooled_views_are_exact_spatial_means() {
    let f = render_features(&episode(EpisodeKind::Frame, 4), &RenderSpec::default()).unwrap();
    for t in 0..f.steps() {
        assert_eq!(f.frame_pooled[t], spatial_mean(&f.frame_grid[t]));
        assert_eq!(f.clip_pooled[t], spatial_mean(&f.clip_grid[t]));
    }
}

#[test]
fn noiseless_render_is_the_mean_of_noisy_renders() {
    let sigma = 0.5;
    let n = 200;
    let ep = episode(EpisodeKind::Transition, 9);
    let clean = render_features(&ep, &RenderSpec { noise: 0.0, ..RenderSpec::default() }).unwrap();
    let mut sum: Vec<f64> = vec![0.0; clean.frame_grid.iter().map(|t| t.data().len()).sum()];
    for k in 0..n {
        let noisy = render_features(&ep, &RenderSpec { noise: sigma, noise_seed: k, ..RenderSpec::default() }).unwrap();
        for (s, v) in sum.iter_mut().zip(noisy.frame_grid.iter().flat_map(|t| t.data())) {
            *s += v;
        }
    }
    let clean: Vec<f64> = clean.frame_grid.iter().flat_map(|t| t.data().iter().copied()).collect();
    let se = sigma / (n as f64).sqrt();
    let dev: Vec<f64> = sum.iter().zip(&clean).map(|(s, c)| s / n as f64 - c).collect();
    let rms = (dev.iter().map(|d| d * d).sum::<f64>() / dev.len() as f64).sqrt();
    let mean = dev.iter().sum::<f64>() / dev.len() as f64;
    // Thousands of elements are checked at once, so single elements get a
    // family-wide 5 standard errors; the aggregate statistics get 3.
    assert!(dev.iter().all(|d| d.abs() < 5.0 * se), "max {}", dev.iter().fold(0.0f64, |m, d| m.max(d.abs())));
    assert!(mean.abs() < 3.0 * se / (dev.len() as f64).sqrt(), "mean {mean}");
    assert!((rms / se - 1.0).abs() < 0.1, "rms {rms} vs {se}");
}

#[test]
fn gold_position_is_uniform_over_the_five_slots() {
    let mut data = DataConfig::default();
    data.train = counts(0, 5000, 5000, 0);
    data.test = counts(0, 0, 0, 0);
    let ds = build_dataset(&data, 12).unwrap();
    let mut hist = [0usize; 5];
    for it in &ds.train.items {
        if let Answer::Choice { candidates, gold } = &it.answer {
            assert_eq!(candidates.len(), 5);
            hist[*gold] += 1;
        }
    }
    assert_eq!(hist.iter().sum::<usize>(), 10_000);
    // 4 degrees of freedom; 18.47 is the 0.001 upper quantile.
    assert!(chi_square(&hist) < 18.47, "{hist:?}");
}

#[test]
fn zero_count_pairing_is_uniform_over_questions() {
    let pool: Vec<Vec<String>> = (0..10).map(|i| vec![format!("q{i}")]).collect();
    let ids: Vec<String> = (0..10_000).map(|i| format!("e{i}")).collect();
    let items = make_zero_count_items(&pool, &ids, &mut rng::stream(4, "test/pairing")).unwrap();
    let mut hist = [0usize; 10];
    for it in &items {
        assert_eq!(it.answer, Answer::Count { label: 0 });
        hist[it.question[0][1..].parse::<usize>().unwrap()] += 1;
    }
    // 9 degrees of freedom; 27.88 is the 0.001 upper quantile.
    assert!(chi_square(&hist) < 27.88, "{hist:?}");
}

#[test]
fn zero_count_quota_is_exact() {
    let mut data = DataConfig::default();
    data.train = counts(1000, 0, 0, 0);
    data.test = counts(0, 0, 0, 0);
    data.difficulty.steps = 8;
    let ds = build_dataset(&data, 2).unwrap();
    assert_eq!(ds.train.items.len(), 1000);
    let zeros = ds.train.items.iter().filter(|it| it.answer == Answer::Count { label: 0 }).count();
    assert_eq!(zeros, 100);
}

#[test]
fn splits_are_disjoint_and_rebuilds_identical() {
    let mut data = DataConfig::default();
    data.train = counts(20, 20, 20, 20);
    data.test = counts(10, 10, 10, 10);
    let a = build_dataset(&data, 77).unwrap();
    let b = build_dataset(&data, 77).unwrap();
    assert_eq!(a, b);
    let train: BTreeSet<_> = a.train.episodes.keys().collect();
    assert!(a.test.episodes.keys().all(|k| !train.contains(k)));
    assert!(a.train.items.iter().chain(&a.test.items).all(|it| it.id.starts_with(&it.episode_id)));
    assert_ne!(a, build_dataset(&data, 78).unwrap());
}

#[test]
fn derived_items_follow_the_episode_structure() {
    let provider = HashEmbedding::new(50, 0);
    let corpus = lexicon_corpus();
    let hooks = QaHooks { provider: &provider, corpus: &corpus };
    let spec = RenderSpec::default();

    let ep = episode(EpisodeKind::Transition, 5);
    let items = derive_qa(&ep, &hooks).unwrap();
    assert_eq!(items.iter().filter(|it| it.task == Task::Transition).count(), 2);

    let zero = Difficulty { force_count: Some(0), ..Difficulty::default() };
    let ep = generate_episode(EpisodeKind::Repetition, &zero, &spec, "z", 5).unwrap();
    let items = derive_qa(&ep, &hooks).unwrap();
    assert_eq!(items.len(), 1);
    assert_eq!(items[0].answer, Answer::Count { label: 0 });

    let four = Difficulty { force_count: Some(4), ..Difficulty::default() };
    let ep = generate_episode(EpisodeKind::Repetition, &four, &spec, "f", 5).unwrap();
    let items = derive_qa(&ep, &hooks).unwrap();
    let action = items.iter().find(|it| it.task == Task::Action).unwrap();
    let (verb, object) = ACTIONS[ep.truth.action.unwrap()];
    let Answer::Choice { candidates, gold } = &action.answer else { panic!("action items are multiple choice") };
    assert_eq!(candidates[*gold].join(" "), [verb, object].join(" ").trim());
}

#[test]
fn identical_latent_tracks_render_identically_without_noise() {
    let spec = RenderSpec { noise: 0.0, ..RenderSpec::default() };
    let ep = episode(EpisodeKind::Frame, 30);
    let mut twin = ep.clone();
    twin.id = "twin".into();
    twin.seed = 999;
    assert_eq!(render_features(&ep, &spec).unwrap(), render_features(&twin, &spec).unwrap());
}
