//! The full matcher: GNN refinement, global tokens, the two-stream decoder,
//! training losses and Sinkhorn inference.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Tape};
use crate::config::TrainConfig;
use crate::dataset::PreparedPair;
use crate::error::Result;
use crate::features::{global_token, register_global_projection, GLOBAL_PROJ_PARAM};
use crate::gnn::Gnn;
use crate::losses::{total_loss, LossInputs, LossParams, LossReport};
use crate::matching::{affinity, decode_matching, sinkhorn_log, AffinityMatrix, Matching, TransportPlan};
use crate::params::{Gradients, ParameterStore};
use crate::tensor::Tensor;
use crate::transformer::{DecodeNodes, Decoder, SeqNodes};

/// Parameters trained at the reduced backbone learning rate.
pub const BACKBONE_PARAMS: &[&str] = &[GLOBAL_PROJ_PARAM];

#[derive(Clone, Debug)]
pub struct Model {
    pub config: TrainConfig,
    pub gnn: Gnn,
    pub decoder: Decoder,
    pub loss: LossParams,
}

/// Result of matching one pair.
#[derive(Clone, Debug)]
pub struct Inference {
    pub affinity: AffinityMatrix,
    pub plan: TransportPlan,
    pub matching: Matching,
    /// Cosine of each row with its chosen column.
    pub scores: Vec<f64>,
    pub tokens1: Tensor,
    pub tokens2: Tensor,
}

impl Model {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            gnn: Gnn::new(config.gnn_input_dim, config.d_model, config.kernel_size),
            decoder: Decoder::new(config.decoder())?,
            loss: LossParams {
                p: config.layer_loss_p,
                mode: config.infonce_mode,
            },
        })
    }

    /// Fresh parameters drawn from `seed`.
    pub fn init_params(&self, seed: u64) -> Result<ParameterStore> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        self.gnn.register(&mut store, &mut rng)?;
        register_global_projection(&mut store, self.config.gnn_input_dim, self.config.d_model, &mut rng)?;
        self.decoder.register(&mut store, &mut rng)?;
        LossParams::register(&mut store)?;
        Ok(store)
    }

    pub fn is_backbone_param(name: &str) -> bool {
        BACKBONE_PARAMS.contains(&name)
    }

    /// GNN on both graphs, global tokens, then the decoder.
    pub fn forward(&self, tape: &mut Tape<'_>, pair: &PreparedPair) -> Result<DecodeNodes> {
        let x1 = tape.constant(pair.x1.clone());
        let x2 = tape.constant(pair.x2.clone());
        let t1 = self.gnn.refine(tape, x1, &pair.graph1)?;
        let t2 = self.gnn.refine(tape, x2, &pair.graph2)?;
        let g1 = global_token(tape, &pair.pooled1)?;
        let g2 = global_token(tape, &pair.pooled2)?;
        self.decoder.decode(
            tape,
            SeqNodes { tokens: t1, global: g1 },
            SeqNodes { tokens: t2, global: g2 },
        )
    }

    pub fn loss(&self, tape: &mut Tape<'_>, pair: &PreparedPair) -> Result<(NodeId, LossReport)> {
        let out = self.forward(tape, pair)?;
        let inputs = LossInputs {
            f1: out.f1.tokens,
            f2: out.f2.tokens,
            snapshots1: &out.snapshots1,
            snapshots2: &out.snapshots2,
            truth: &pair.truth,
        };
        total_loss(tape, &inputs, &self.loss, self.config.loss_terms)
    }

    pub fn loss_and_grad(&self, store: &ParameterStore, pair: &PreparedPair) -> Result<(LossReport, Gradients)> {
        let mut tape = Tape::new(store);
        let (l, report) = self.loss(&mut tape, pair)?;
        Ok((report, tape.backward(l)))
    }

    pub fn infer(&self, store: &ParameterStore, pair: &PreparedPair) -> Result<Inference> {
        let mut tape = Tape::new(store);
        let out = self.forward(&mut tape, pair)?;
        let tokens1 = tape.value(out.f1.tokens).clone();
        let tokens2 = tape.value(out.f2.tokens).clone();
        let affinity = affinity(&tokens1, &tokens2)?;
        let plan = sinkhorn_log(&affinity, self.config.sinkhorn_temperature, self.config.sinkhorn_iters)?;
        let matching = decode_matching(&plan);
        let scores = matching
            .assignment
            .iter()
            .enumerate()
            .map(|(i, &j)| affinity.values.get(i, j))
            .collect();
        Ok(Inference {
            affinity,
            plan,
            matching,
            scores,
            tokens1,
            tokens2,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::prepare_pair;
    use crate::features::SyntheticBackbone;
    use crate::gradcheck::{grad_check, GradCheckConfig};
    use crate::synth::{generate_pair, PrototypeBank, SyntheticPairSpec};

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            d_model: 8,
            heads: 2,
            decoder_layers: 2,
            gnn_input_dim: 8,
            c_last: 4,
            ..TrainConfig::desk()
        }
    }

    fn tiny_pair(m: usize, seed: u64) -> PreparedPair {
        let spec = SyntheticPairSpec {
            m_min: m,
            m_max: m,
            latent_dim: 8,
            signal_dims: 8,
            ..SyntheticPairSpec::default()
        };
        let bank = PrototypeBank::new(&spec).unwrap();
        let rec = generate_pair(&spec, &bank, seed).unwrap();
        let bb = SyntheticBackbone::new(16, 4, 4, 0.05, 0.05).unwrap();
        prepare_pair(&rec, &bb, 8, None).unwrap()
    }

    #[test]
    fn full_loss_passes_gradient_check() {
        let cfg = tiny_config();
        let model = Model::new(&cfg).unwrap();
        let mut store = model.init_params(3).unwrap();
        // At its initial scale the projection is smaller than the step.
        for v in store.value_mut(GLOBAL_PROJ_PARAM).unwrap().data_mut() {
            *v *= 1e4;
        }
        let pair = tiny_pair(4, 11);
        let loss = model.loss_and_grad(&store, &pair).unwrap().0.total;
        // A central difference cannot resolve gradient errors below about
        // ulp(loss) / eps; such coordinates are counted, not failed.
        let cfg = GradCheckConfig::default();
        let floor = 16.0 * f64::EPSILON * loss.abs().max(1.0) / cfg.eps;
        let report = grad_check(
            |s| {
                let (r, g) = model.loss_and_grad(s, &pair).unwrap();
                s.accumulate(&g, 1.0);
                r.total
            },
            &mut store,
            &GradCheckConfig { abs_floor: floor, ..cfg },
        );
        assert!(report.passed(), "{report}");
        assert!(report.params.iter().any(|p| p.name == GLOBAL_PROJ_PARAM));
        // Most of these sit in the last cross-attention, whose logits are
        // nearly flat at initialization.
        assert!(report.roundoff_limited() * 10 <= report.coords_checked(), "{report}");
    }

    #[test]
    fn inference_shapes_and_single_keypoint() {
        let model = Model::new(&tiny_config()).unwrap();
        let store = model.init_params(0).unwrap();
        let inf = model.infer(&store, &tiny_pair(6, 2)).unwrap();
        assert_eq!(inf.matching.assignment.len(), 6);
        assert!(inf.plan.max_marginal_error < 1e-3);

        let one = tiny_pair(1, 5);
        let inf = model.infer(&store, &one).unwrap();
        assert_eq!(inf.matching.assignment, vec![0]);
        assert_eq!(inf.plan.values.data(), &[1.0]);
    }
}

