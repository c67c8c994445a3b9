use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use normmatch::config::TrainConfig;
use normmatch::dataset::PreparedPair;
use normmatch::harness::prepare_records;
use normmatch::matching::accuracy;
use normmatch::model::Model;
use normmatch::synth::{generate_dataset, SyntheticPairSpec};
use normmatch::train::{evaluate, Trainer};

fn small_config() -> TrainConfig {
    TrainConfig {
        d_model: 16,
        heads: 2,
        gnn_input_dim: 8,
        c_last: 4,
        batch_size: 4,
        epochs: 2,
        ..TrainConfig::desk()
    }
}

fn pairs(cfg: &TrainConfig, n: usize, m: usize, seed: u64) -> Vec<PreparedPair> {
    let spec = SyntheticPairSpec {
        num_pairs: n,
        m_min: m,
        m_max: m,
        latent_dim: cfg.gnn_input_dim,
        signal_dims: cfg.gnn_input_dim.min(16),
        ..SyntheticPairSpec::default()
    };
    prepare_records(cfg, &generate_dataset(&spec, seed).unwrap(), None).unwrap()
}

#[test]
fn zero_learning_rate_leaves_parameters_and_metrics_unchanged() {
    let cfg = TrainConfig {
        base_lr: 0.0,
        ..small_config()
    };
    let (train, val) = (pairs(&cfg, 16, 5, 1), pairs(&cfg, 8, 5, 2));
    let model = Model::new(&cfg).unwrap();
    let mut t = Trainer::new(&model).unwrap();
    let before = t.store.clone();
    t.train(&train, &val, |_, _| Ok(())).unwrap();
    for ((n, a), (_, b)) in before.iter().zip(t.store.iter()) {
        assert_eq!(a.value, b.value, "{n} moved");
    }
    let h = &t.history;
    assert_eq!(h.len(), 2);
    assert_eq!(h[0].val_accuracy, h[1].val_accuracy);
    // Same terms, summed in each epoch's shuffled order.
    assert!((h[0].train_loss - h[1].train_loss).abs() <= 1e-12 * h[0].train_loss.abs());
}

#[test]
fn learning_rate_trace_follows_the_schedule() {
    let cfg = TrainConfig {
        epochs: 6,
        ..small_config()
    };
    let train = pairs(&cfg, 4, 4, 3);
    let model = Model::new(&cfg).unwrap();
    let mut t = Trainer::new(&model).unwrap();
    t.train(&train, &[], |_, _| Ok(())).unwrap();
    let lrs: Vec<f64> = t.history.iter().map(|e| e.lr).collect();
    let expect = [5e-4, 5e-4, 5e-5, 5e-5, 5e-5, 5e-6];
    for (got, want) in lrs.iter().zip(expect) {
        assert!((got - want).abs() <= 1e-15 * want, "{lrs:?}");
    }
    assert!(t.history.iter().all(|e| e.val_accuracy.is_nan()));
}

/// A uniformly random permutation scores `1/m` per pair in expectation; this
/// checks the evaluation path against that independent baseline.
#[test]
fn random_assignment_scores_one_in_m() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (n, m) = (4000, 8);
    let truth: Vec<usize> = (0..m).collect();
    let mean = (0..n)
        .map(|_| {
            let mut p = truth.clone();
            p.shuffle(&mut rng);
            accuracy(&p, &truth).unwrap()
        })
        .sum::<f64>()
        / n as f64;
    let se = (0.125f64 * 0.875 / (n * m) as f64).sqrt();
    assert!((mean - 0.125).abs() < 4.0 * se, "{mean}");
}

/// The untrained desk model sits above chance but under one in five: the
/// descriptors of corresponding keypoints are correlated and even random
/// weights map similar inputs to similar outputs.
#[test]
fn untrained_desk_model_on_eight_keypoints() {
    let cfg = TrainConfig::desk();
    let val = pairs(&cfg, 500, 8, 9);
    let model = Model::new(&cfg).unwrap();
    let store = model.init_params(0).unwrap();
    let acc = evaluate(&model, &store, &val).unwrap().mean_accuracy;
    assert!((0.125..0.20).contains(&acc), "{acc}");
}

#[test]
fn evaluation_table_is_consistent() {
    let cfg = small_config();
    let val = pairs(&cfg, 30, 6, 4);
    let model = Model::new(&cfg).unwrap();
    let store = model.init_params(1).unwrap();
    let r = evaluate(&model, &store, &val).unwrap();
    assert_eq!(r.pairs, 30);
    assert_eq!(r.classes.iter().map(|c| c.pairs).sum::<usize>(), 30);
    let mean = r.classes.iter().map(|c| c.accuracy).sum::<f64>() / r.classes.len() as f64;
    assert!((mean - r.mean_accuracy).abs() < 1e-15);
    let table = r.to_table();
    assert_eq!(table.lines().count(), r.classes.len() + 2);
    assert!(table.lines().last().unwrap().trim_start().starts_with("mean"));
    assert!(evaluate(&model, &store, &[]).is_err());
}

#[test]
fn perfect_predictor_on_identity_pairs_scores_full_marks() {
    let truth: Vec<usize> = (0..7).collect();
    assert_eq!(accuracy(&truth, &truth).unwrap(), 1.0);
}
