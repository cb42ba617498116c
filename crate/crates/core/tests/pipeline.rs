mod common;

use std::collections::BTreeSet;

use kgdiv_core::compute::{Matrix, ParameterStore, Tape};
use kgdiv_core::data::{apply_k_core, split, InteractionGraph, RawInteractions, SplitRatios};
use kgdiv_core::del;
use kgdiv_core::eval;
use kgdiv_core::trainer::{
    self, forward, Checkpoint, ModelGraphs, Preset, StepSamples, TrainConfig, TrainTriple, Trainer,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn raw_strategy() -> impl Strategy<Value = RawInteractions> {
    (1usize..25, 1usize..30).prop_flat_map(|(users, items)| {
        prop::collection::vec(prop::collection::vec(0..items as u32, 0..20), users)
            .prop_map(move |lists| RawInteractions::from_lists(lists, items))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn k_core_matches_brute_force(raw in raw_strategy(), k in 1usize..8) {
        let kept: Vec<usize> = (0..raw.n_users()).filter(|&u| raw.user_items[u].len() >= k).collect();
        match apply_k_core(&raw, k) {
            Err(_) => prop_assert!(kept.is_empty()),
            Ok(f) => {
                prop_assert_eq!(f.n_users(), kept.len());
                let items: BTreeSet<u32> = kept.iter().flat_map(|&u| raw.user_items[u].iter().copied()).collect();
                prop_assert_eq!(f.n_items, items.len());
                for (dense, &u) in kept.iter().enumerate() {
                    let orig: Vec<u64> = f.user_items[dense].iter().map(|&i| f.item_ids[i as usize]).collect();
                    let expect: Vec<u64> = raw.user_items[u].iter().map(|&i| raw.item_ids[i as usize]).collect();
                    prop_assert_eq!(orig, expect);
                    prop_assert_eq!(f.user_ids[dense], raw.user_ids[u]);
                }
                let again = apply_k_core(&f, k).unwrap();
                prop_assert_eq!(again.user_items, f.user_items);
            }
        }
    }
}

#[test]
fn split_partitions_every_user_over_many_seeds() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let lists: Vec<Vec<u32>> = (0..12)
        .map(|_| {
            let n = rng.gen_range(1..40);
            rand::seq::index::sample(&mut rng, 60, n).into_iter().map(|i| i as u32).collect()
        })
        .collect();
    let raw = RawInteractions::from_lists(lists, 60);
    for seed in 0..1000 {
        let s = split(&raw, SplitRatios::default(), seed).unwrap();
        for u in 0..raw.n_users() {
            let n = raw.user_items[u].len();
            let held = n / 10;
            assert_eq!((s.valid[u].len(), s.test[u].len()), (held, held), "seed {seed} user {u}");
            assert_eq!(s.train[u].len(), n - 2 * held);
            let mut all: Vec<u32> = s.train[u].iter().chain(&s.valid[u]).chain(&s.test[u]).copied().collect();
            all.sort_unstable();
            assert_eq!(all, raw.user_items[u], "seed {seed} user {u}");
        }
    }
}

#[test]
fn training_beats_initialisation_on_planted_fixture() {
    let data = common::fixture_dataset();
    let config = TrainConfig {
        dim: 16,
        batch_size: 64,
        learning_rate: 0.01,
        max_epochs: 40,
        ..TrainConfig::default()
    };
    let init = Trainer::<f32>::new(config.clone(), &data.train, &data.kg).unwrap();
    let (u0, i0) = init.embeddings().unwrap();
    let before = eval::evaluate_embeddings(&u0, &i0, &data.train, &data.split.test, &data.kg, &[10]).unwrap();
    let out = trainer::train(&config, &data).unwrap();
    assert!(out.diverged.is_none());
    let after = trainer::evaluate(&out.checkpoint, &data, &data.split.test, &[10]).unwrap();
    let (b, a) = (before.mean[0].recall, after.mean[0].recall);
    assert!(a > b + 0.2, "recall@10 {b} → {a}");
}

#[test]
fn early_stopping_respects_patience() {
    let data = common::fixture_dataset();
    let config = TrainConfig {
        dim: 8,
        batch_size: 128,
        learning_rate: 1e-12,
        patience: 3,
        max_epochs: 50,
        ..TrainConfig::default()
    };
    let out = trainer::train(&config, &data).unwrap();
    assert!(out.stopped_early);
    assert_eq!(out.checkpoint.epoch, 1);
    assert_eq!(out.log.len(), 1 + config.patience);
}

#[test]
fn one_small_step_lowers_the_loss() {
    let data = common::fixture_dataset();
    for preset in [Preset::Mf, Preset::LightGcn, Preset::KgDiverse] {
        let mut config = TrainConfig::preset(preset);
        config.dim = 8;
        config.learning_rate = 1e-4;
        let mut t = Trainer::<f64>::new(config, &data.train, &data.kg).unwrap();
        let edges: Vec<(u32, u32)> = (0..data.n_users() as u32)
            .map(|u| (u, data.train.items_of(u as usize)[0]))
            .collect();
        let (batch, samples) = t.sample(&edges).unwrap();
        let before = t.step(&batch, &samples).unwrap();
        let after = t.loss_and_grads(&batch, &samples).unwrap();
        assert!(after.total < before.total, "{preset}: {} → {}", before.total, after.total);
    }
}

fn toy() -> (InteractionGraph, kgdiv_core::data::KnowledgeGraph, ParameterStore<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let lists = common::random_lists(&mut rng, 5, 8, 4);
    let train = InteractionGraph::from_lists(&lists, 8).unwrap();
    let kg = common::random_kg(&mut rng, 12, 8, 3, 40);
    let params = trainer::init_params(5, &kg, 4, &mut rng);
    (train, kg, params)
}

#[test]
fn no_cau_matches_zero_weights_and_zeroes_terms() {
    let (train, kg, params) = toy();
    let mut base = TrainConfig {
        dim: 4,
        ..TrainConfig::default()
    };
    base.lambda_align = 0.7;
    base.lambda_uniform = 0.3;
    let mut ablated = base.clone();
    ablated.ablations.no_cau = true;
    let mut zero = base.clone();
    zero.lambda_align = 0.0;
    zero.lambda_uniform = 0.0;

    let batch = [TrainTriple { user: 0, pos: train.items_of(0)[0], neg: (0..8).find(|&j| !train.contains(0, j)).unwrap() }];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let samples = StepSamples {
        pairs: kgdiv_core::cau::sample_overlap_pairs(&kg, &[0, 1, 2, 3, 4, 5, 6, 7], 8, &mut rng),
        uniform_items: (0..8).collect(),
    };
    let grads = |config: &TrainConfig| {
        let mut t = Trainer::with_params(config.clone(), &train, &kg, params.clone()).unwrap();
        let terms = t.loss_and_grads(&batch, &samples).unwrap();
        let g: Vec<Matrix<f64>> = t.params.ids().map(|id| t.params.grad(id).clone()).collect();
        (terms, g)
    };
    let (ta, ga) = grads(&ablated);
    let (tz, gz) = grads(&zero);
    let (tb, _) = grads(&base);
    assert_eq!((ta.align, ta.uniform), (0.0, 0.0));
    assert_eq!(ta.total, tz.total);
    assert_eq!(ga, gz);
    assert!(tb.total != ta.total);
}

#[test]
fn no_kg_uses_layer_zero_items_and_one_pooling_pass() {
    let (train, kg, params) = toy();
    let mut config = TrainConfig {
        dim: 4,
        lgc_layers: 0,
        ..TrainConfig::default()
    };
    config.ablations.no_kg = true;
    let ids = trainer::ParamIds::of(&params).unwrap();
    let graphs = ModelGraphs::new(&train, &kg).unwrap();
    let mut tape = Tape::new();
    let fwd = forward(&mut tape, &params, ids, &graphs, &config).unwrap();

    let e0 = params.value(ids.entities);
    let items0 = Matrix::from_rows(&(0..8).map(|i| e0.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
    assert_eq!(tape.value(fwd.items), &items0);
    for u in 0..5 {
        let temp = del::user_temp(train.items_of(u), &items0).unwrap();
        let rows = Matrix::from_rows(&train.items_of(u).iter().map(|&i| items0.row(i as usize).to_vec()).collect::<Vec<_>>()).unwrap();
        let w = del::diversity_weights(&temp, &rows).unwrap();
        let pooled = del::user_diverse(&w, &rows).unwrap();
        for c in 0..4 {
            let expect = params.value(ids.users).get(u, c) + pooled[c];
            assert!((tape.value(fwd.users).get(u, c) - expect).abs() < 1e-14);
        }
    }
}

#[test]
fn no_relation_encoding_equals_all_ones_relations() {
    let (train, kg, params) = toy();
    let ids = trainer::ParamIds::of(&params).unwrap();
    let graphs = ModelGraphs::new(&train, &kg).unwrap();
    let mut ablated = TrainConfig {
        dim: 4,
        ..TrainConfig::default()
    };
    ablated.ablations.no_relation_encoding = true;
    let full = TrainConfig {
        dim: 4,
        ..TrainConfig::default()
    };
    let mut ones = params.clone();
    ones.value_mut(ids.relations).fill(1.0);

    let mut t1 = Tape::new();
    let a = forward(&mut t1, &params, ids, &graphs, &ablated).unwrap();
    let mut t2 = Tape::new();
    let b = forward(&mut t2, &ones, ids, &graphs, &full).unwrap();
    assert_eq!(t1.value(a.users), t2.value(b.users));
    assert_eq!(t1.value(a.items), t2.value(b.items));
}

#[test]
fn checkpoint_round_trip_and_shape_guard() {
    let data = common::fixture_dataset();
    let config = TrainConfig {
        dim: 4,
        max_epochs: 2,
        batch_size: 128,
        ..TrainConfig::default()
    };
    let out = trainer::train(&config, &data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    out.checkpoint.save(dir.path()).unwrap();
    let back = Checkpoint::load(dir.path()).unwrap();
    assert_eq!(back.config, out.checkpoint.config);
    assert_eq!(back.epoch, out.checkpoint.epoch);
    assert_eq!(back.best_metric, out.checkpoint.best_metric);
    for id in back.params.ids() {
        assert_eq!(back.params.value(id), out.checkpoint.params.value(id));
    }

    let mut wrong = back.clone();
    wrong.counts.users += 1;
    assert!(trainer::evaluate(&wrong, &data, &data.split.test, &[20]).is_err());
    std::fs::write(dir.path().join("users.bin"), [0u8; 3]).unwrap();
    assert!(Checkpoint::load(dir.path()).is_err());
}

#[test]
fn divergence_keeps_last_good_checkpoint() {
    let data = common::fixture_dataset();
    let mut config = TrainConfig::preset(Preset::Mf);
    config.dim = 4;
    config.learning_rate = 1e30;
    config.patience = 100;
    config.max_epochs = 100;
    let out = trainer::train(&config, &data).unwrap();
    let (epoch, err) = out.diverged.expect("diverges");
    assert!(err.is_non_finite());
    assert!(out.checkpoint.epoch < epoch);
    assert!(out.checkpoint.params.ids().all(|id| out.checkpoint.params.value(id).is_finite()));
}
