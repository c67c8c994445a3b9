//! Dataset assembly shared by the CLI and the end-to-end tests.

use std::path::Path;

use crate::config::TrainConfig;
use crate::dataset::{prepare_all, read_pairs, PairRecord, PreparedPair};
use crate::error::Result;
use crate::features::SyntheticBackbone;
use crate::synth::{generate_dataset, SyntheticPairSpec};

pub const DEFAULT_TRAIN_PAIRS: usize = 2000;
pub const DEFAULT_VAL_PAIRS: usize = 1000;

/// Seeds of the stand-in synthetic sets. They do not follow the model seed,
/// so runs with different initializations see the same data.
pub const TRAIN_DATA_SEED: u64 = 1;
pub const VAL_DATA_SEED: u64 = 2;

pub fn synthetic_backbone(cfg: &TrainConfig) -> Result<SyntheticBackbone> {
    SyntheticBackbone::new(
        cfg.backbone_grid,
        cfg.c_last,
        cfg.c_second(),
        cfg.backbone_sigma,
        cfg.backbone_noise,
    )
}

/// Pair records from `path`, or a default synthetic set of `n` pairs.
pub fn records_or_synthetic(path: Option<&Path>, n: usize, seed: u64) -> Result<Vec<PairRecord>> {
    match path {
        Some(p) => read_pairs(p),
        None => generate_dataset(
            &SyntheticPairSpec {
                num_pairs: n,
                ..SyntheticPairSpec::default()
            },
            seed,
        ),
    }
}

/// Runs the configured backbone over records read from `path`, resolving
/// relative feature paths against the file's directory.
pub fn prepare_records(cfg: &TrainConfig, recs: &[PairRecord], path: Option<&Path>) -> Result<Vec<PreparedPair>> {
    let bb = synthetic_backbone(cfg)?;
    let base = path.and_then(Path::parent);
    prepare_all(recs, &bb, cfg.gnn_input_dim, base)
}

/// Training and validation sets named by the config, with synthetic sets
/// of the default sizes standing in for missing paths.
pub fn load_datasets(cfg: &TrainConfig) -> Result<(Vec<PreparedPair>, Vec<PreparedPair>)> {
    let tp = cfg.train_pairs.as_deref();
    let vp = cfg.val_pairs.as_deref();
    let train = records_or_synthetic(tp, DEFAULT_TRAIN_PAIRS, TRAIN_DATA_SEED)?;
    let val = records_or_synthetic(vp, DEFAULT_VAL_PAIRS, VAL_DATA_SEED)?;
    Ok((prepare_records(cfg, &train, tp)?, prepare_records(cfg, &val, vp)?))
}
