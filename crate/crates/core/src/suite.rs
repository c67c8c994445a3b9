//! Randomized finite-difference checks over small instances of each trainable
//! module, shared by the `gradcheck` subcommand and the test suites.

use std::fmt;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::geometry::KeypointGraph;
use crate::gnn::Gnn;
use crate::gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
use crate::losses::{total_loss, InfoNceMode, LossInputs, LossParams, LossTerms};
use crate::params::ParameterStore;
use crate::tensor::Tensor;
use crate::transformer::{Decoder, DecoderConfig, FeatureSequence, SeqNodes};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradModule {
    Gnn,
    Transformer,
    Losses,
}

impl GradModule {
    pub const ALL: [GradModule; 3] = [GradModule::Gnn, GradModule::Transformer, GradModule::Losses];
}

impl fmt::Display for GradModule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GradModule::Gnn => "gnn",
            GradModule::Transformer => "transformer",
            GradModule::Losses => "losses",
        })
    }
}

impl FromStr for GradModule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gnn" => Ok(GradModule::Gnn),
            "transformer" => Ok(GradModule::Transformer),
            "losses" => Ok(GradModule::Losses),
            _ => Err(Error::config(format!(
                "unknown module `{s}` (expected gnn, transformer or losses)"
            ))),
        }
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let v = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::matrix(rows, cols, v).expect("shape matches data")
}

fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    random_matrix(rng, rows, cols).normalize_rows(crate::tensor::DEFAULT_EPS_GUARD)
}

/// Central differences against the tape's gradient of `forward`. Coordinates
/// whose discrepancy is below what the difference quotient can resolve at
/// this loss magnitude count as roundoff-limited.
fn check<F>(store: &mut ParameterStore, cfg: &GradCheckConfig, forward: F) -> GradCheckReport
where
    F: Fn(&mut Tape<'_>) -> crate::autodiff::NodeId,
{
    let eval = |s: &mut ParameterStore| {
        let (loss, grads) = {
            let mut t = Tape::new(s);
            let l = forward(&mut t);
            (t.scalar(l), t.backward(l))
        };
        s.accumulate(&grads, 1.0);
        loss
    };
    let base = {
        let mut t = Tape::new(store);
        let l = forward(&mut t);
        t.scalar(l)
    };
    let floor = roundoff_floor(base, cfg.eps).max(cfg.abs_floor);
    grad_check(eval, store, &GradCheckConfig { abs_floor: floor, ..cfg.clone() })
}

/// About `ulp(loss) / eps`: the smallest gradient error a central difference
/// at step `eps` can see.
pub fn roundoff_floor(loss: f64, eps: f64) -> f64 {
    16.0 * f64::EPSILON * loss.abs().max(1.0) / eps
}

/// Two spline layers on a random Delaunay graph; the input features are a
/// parameter too. Objective: `Σ out ⊙ R` for a fixed random `R`.
fn gnn_instance(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.random_range(3..=7);
    let (input, d) = (*[4usize, 8].choose(&mut rng).unwrap(), *[8usize, 16].choose(&mut rng).unwrap());
    let gnn = Gnn::new(input, d, 5);
    let mut store = ParameterStore::new();
    gnn.register(&mut store, &mut rng)?;
    store.insert("input", random_matrix(&mut rng, m, input), true)?;
    let target = random_matrix(&mut rng, m, d);
    let pts: Vec<[f64; 2]> = (0..m).map(|_| [rng.random(), rng.random()]).collect();
    let graph = KeypointGraph::build(&pts, true);
    Ok(check(&mut store, cfg, |t| {
        let x = t.param("input").expect("registered");
        let y = gnn.refine(t, x, &graph).expect("shapes agree");
        let r = t.constant(target.clone());
        let p = t.mul(y, r);
        t.sum(p)
    }))
}

/// Full decoder on random unit sequences. Objective: `Σ (F₁F₂ᵀ) ⊙ R`.
fn transformer_instance(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.random_range(3..=5);
    let d = *[8usize, 16].choose(&mut rng).unwrap();
    let layers = rng.random_range(1..=2);
    let dec = Decoder::new(DecoderConfig {
        d_model: d,
        heads: 2,
        layers,
        mlp_mult: 4,
    })?;
    let mut store = ParameterStore::new();
    dec.register(&mut store, &mut rng)?;
    let a = FeatureSequence::new(unit_rows(&mut rng, m, d), unit_rows(&mut rng, 1, d))?;
    let b = FeatureSequence::new(unit_rows(&mut rng, m, d), unit_rows(&mut rng, 1, d))?;
    let target = random_matrix(&mut rng, m, m);
    Ok(check(&mut store, cfg, |t| {
        let na = SeqNodes::constant(t, &a);
        let nb = SeqNodes::constant(t, &b);
        let out = dec.decode(t, na, nb).expect("shapes agree");
        let c = t.matmul_bt(out.f1.tokens, out.f2.tokens);
        let r = t.constant(target.clone());
        let p = t.mul(c, r);
        t.sum(p)
    }))
}

/// Total loss over normalized parameter tokens, with the temperature and
/// both InfoNCE modes exercised.
fn losses_instance(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.random_range(2..=6);
    let d = *[4usize, 8].choose(&mut rng).unwrap();
    let layers = rng.random_range(1..=3);
    let mode = if seed % 2 == 0 {
        InfoNceMode::Conventional
    } else {
        InfoNceMode::NegativesOnly
    };
    let mut store = ParameterStore::new();
    LossParams::register(&mut store)?;
    let mut names = Vec::new();
    for k in 0..=layers {
        for side in [1, 2] {
            let name = format!("input.{k}.{side}");
            store.insert(&name, random_matrix(&mut rng, m, d), true)?;
            names.push(name);
        }
    }
    let mut truth: Vec<usize> = (0..m).collect();
    truth.shuffle(&mut rng);
    let params = LossParams { p: 0.3, mode };
    Ok(check(&mut store, cfg, |t| {
        let nodes: Vec<_> = names
            .iter()
            .map(|n| {
                let x = t.param(n).expect("registered");
                t.normalize_rows(x)
            })
            .collect();
        let (s1, s2): (Vec<_>, Vec<_>) = nodes[2..].chunks(2).map(|c| (c[0], c[1])).unzip();
        let inputs = LossInputs {
            f1: nodes[0],
            f2: nodes[1],
            snapshots1: &s1,
            snapshots2: &s2,
            truth: &truth,
        };
        total_loss(t, &inputs, &params, LossTerms::default()).expect("valid inputs").0
    }))
}

/// One random instance of `module`, fully determined by `seed`.
pub fn gradient_instance(module: GradModule, seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    match module {
        GradModule::Gnn => gnn_instance(seed, cfg),
        GradModule::Transformer => transformer_instance(seed, cfg),
        GradModule::Losses => losses_instance(seed, cfg),
    }
}

/// `instances` consecutive seeds starting at `base_seed`.
pub fn gradient_suite(
    module: GradModule,
    instances: usize,
    base_seed: u64,
    cfg: &GradCheckConfig,
) -> Result<Vec<GradCheckReport>> {
    (0..instances as u64)
        .map(|i| gradient_instance(module, base_seed + i, cfg))
        .collect()
}
