//! Two-stream normalized transformer decoder.
//!
//! Every sub-block produces a candidate update, projects it to the unit
//! sphere, and moves the current tokens toward it by a learned element-wise
//! step before projecting again:
//!
//! ```text
//! f_X = Norm(X(f))
//! f   = Norm(f + |α_X| ⊙ (f_X − f))
//! ```
//!
//! One decoder layer runs self-attention on each stream, cross-attention
//! 1←2 then 2←1 (the second direction sees the updated stream 1), global
//! token modulation, and the MLP block. Both streams share parameters.

use rand::Rng;

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_mult: usize,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.layers == 0 || self.mlp_mult == 0 {
            return Err(Error::config("decoder dimensions must be positive"));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::config(format!(
                "heads ({}) must divide d_model ({})",
                self.heads, self.d_model
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Keypoint tokens (`m × d`) and the global token (`1 × d`) of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub tokens: Tensor,
    pub global: Tensor,
}

impl FeatureSequence {
    pub fn new(tokens: Tensor, global: Tensor) -> Result<Self> {
        if global.rows() != 1 || global.cols() != tokens.cols() {
            return Err(Error::shape(format!(
                "global token {:?} does not match tokens {:?}",
                global.shape(),
                tokens.shape()
            )));
        }
        Ok(Self { tokens, global })
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SeqNodes {
    pub tokens: NodeId,
    pub global: NodeId,
}

impl SeqNodes {
    pub fn constant(tape: &mut Tape<'_>, seq: &FeatureSequence) -> Self {
        Self {
            tokens: tape.constant(seq.tokens.clone()),
            global: tape.constant(seq.global.clone()),
        }
    }

    pub fn values(&self, tape: &Tape<'_>) -> FeatureSequence {
        FeatureSequence {
            tokens: tape.value(self.tokens).clone(),
            global: tape.value(self.global).clone(),
        }
    }
}

/// Output of [`Decoder::decode`].
pub struct DecodeNodes {
    pub f1: SeqNodes,
    pub f2: SeqNodes,
    /// Keypoint tokens after each layer, per stream.
    pub snapshots1: Vec<NodeId>,
    pub snapshots2: Vec<NodeId>,
    /// Every sub-block output in execution order, labelled.
    pub boundaries: Vec<(String, SeqNodes)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Attn {
    SelfAttn,
    Cross,
}

impl Attn {
    fn prefix(self) -> &'static str {
        match self {
            Attn::SelfAttn => "self_attn",
            Attn::Cross => "cross_attn",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
}

impl Decoder {
    pub fn new(config: DecoderConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    fn name(layer: usize, item: &str) -> String {
        format!("decoder.{layer}.{item}")
    }

    pub fn alpha_names(layer: usize) -> [String; 3] {
        ["alpha_a", "alpha_c", "alpha_m"].map(|a| Self::name(layer, a))
    }

    pub fn register(&self, store: &mut ParameterStore, rng: &mut impl Rng) -> Result<()> {
        let d = self.config.d_model;
        let hidden = d * self.config.mlp_mult;
        let mut uniform = |rows: usize, cols: usize, fan_in: usize| {
            let b = 1.0 / (fan_in as f64).sqrt();
            Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-b..b)).collect())
        };
        let alpha0 = 1.0 / self.config.layers as f64;
        for l in 0..self.config.layers {
            for kind in [Attn::SelfAttn, Attn::Cross] {
                for w in ["q", "k", "v", "o"] {
                    let name = Self::name(l, &format!("{}.{w}", kind.prefix()));
                    store.insert(name, uniform(d, d, d)?, true)?;
                }
            }
            store.insert(Self::name(l, "mlp.w1"), uniform(d, hidden, d)?, true)?;
            store.insert(Self::name(l, "mlp.b1"), Tensor::zeros(&[1, hidden]), true)?;
            store.insert(Self::name(l, "mlp.w2"), uniform(hidden, d, hidden)?, true)?;
            store.insert(Self::name(l, "mlp.b2"), Tensor::zeros(&[1, d]), true)?;
            for a in Self::alpha_names(l) {
                store.insert(a, Tensor::filled(&[1, d], alpha0), true)?;
            }
        }
        Ok(())
    }

    fn attention(
        &self,
        tape: &mut Tape<'_>,
        layer: usize,
        kind: Attn,
        queries: NodeId,
        context: NodeId,
    ) -> Result<NodeId> {
        let p = |w: &str| Self::name(layer, &format!("{}.{w}", kind.prefix()));
        let wq = tape.param(&p("q"))?;
        let wk = tape.param(&p("k"))?;
        let wv = tape.param(&p("v"))?;
        let wo = tape.param(&p("o"))?;
        let q = tape.matmul(queries, wq);
        let k = tape.matmul(context, wk);
        let v = tape.matmul(context, wv);
        let hd = self.config.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let qh = tape.slice_cols(q, h * hd, hd);
            let kh = tape.slice_cols(k, h * hd, hd);
            let vh = tape.slice_cols(v, h * hd, hd);
            let scores = tape.matmul_bt(qh, kh);
            let scores = tape.scale(scores, scale);
            let weights = tape.softmax_rows(scores);
            heads.push(tape.matmul(weights, vh));
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)
        };
        Ok(tape.matmul(merged, wo))
    }

    /// `Norm(f + |α| ⊙ (Norm(candidate) − f))`.
    fn residual_step(tape: &mut Tape<'_>, f: NodeId, candidate: NodeId, alpha: &str) -> Result<NodeId> {
        let alpha = tape.param(alpha)?;
        let step = tape.abs(alpha);
        let target = tape.normalize_rows(candidate);
        let delta = tape.sub(target, f);
        let delta = tape.mul_row(delta, step);
        let moved = tape.add(f, delta);
        Ok(tape.normalize_rows(moved))
    }

    /// Self-attention over the keypoint tokens with the global token appended
    /// as one more sequence element. Only keypoint tokens are updated.
    pub fn norm_self_attn(&self, tape: &mut Tape<'_>, layer: usize, seq: SeqNodes) -> Result<SeqNodes> {
        let m = tape.value(seq.tokens).rows();
        let all = tape.concat_rows(&[seq.tokens, seq.global]);
        let attended = self.attention(tape, layer, Attn::SelfAttn, all, all)?;
        let attended = tape.slice_rows(attended, 0, m);
        let [alpha_a, _, _] = Self::alpha_names(layer);
        let tokens = Self::residual_step(tape, seq.tokens, attended, &alpha_a)?;
        Ok(SeqNodes { tokens, ..seq })
    }

    /// Keypoint tokens of `seq` attend to the keypoint tokens of `other`.
    pub fn norm_cross_attn(
        &self,
        tape: &mut Tape<'_>,
        layer: usize,
        seq: SeqNodes,
        other_tokens: NodeId,
    ) -> Result<SeqNodes> {
        let attended = self.attention(tape, layer, Attn::Cross, seq.tokens, other_tokens)?;
        let [_, alpha_c, _] = Self::alpha_names(layer);
        let tokens = Self::residual_step(tape, seq.tokens, attended, &alpha_c)?;
        Ok(SeqNodes { tokens, ..seq })
    }

    /// Row-wise MLP (`d → h·d`, SiLU, `h·d → d`) on keypoint and global tokens.
    pub fn norm_mlp(&self, tape: &mut Tape<'_>, layer: usize, seq: SeqNodes) -> Result<SeqNodes> {
        let m = tape.value(seq.tokens).rows();
        let w1 = tape.param(&Self::name(layer, "mlp.w1"))?;
        let b1 = tape.param(&Self::name(layer, "mlp.b1"))?;
        let w2 = tape.param(&Self::name(layer, "mlp.w2"))?;
        let b2 = tape.param(&Self::name(layer, "mlp.b2"))?;
        let all = tape.concat_rows(&[seq.tokens, seq.global]);
        let h = tape.matmul(all, w1);
        let h = tape.add_row(h, b1);
        let h = tape.silu(h);
        let y = tape.matmul(h, w2);
        let y = tape.add_row(y, b2);
        let [_, _, alpha_m] = Self::alpha_names(layer);
        let updated = Self::residual_step(tape, all, y, &alpha_m)?;
        Ok(SeqNodes {
            tokens: tape.slice_rows(updated, 0, m),
            global: tape.slice_rows(updated, m, 1),
        })
    }

    pub fn decode(&self, tape: &mut Tape<'_>, f1: SeqNodes, f2: SeqNodes) -> Result<DecodeNodes> {
        for s in [f1, f2] {
            let (t, g) = (tape.value(s.tokens), tape.value(s.global));
            if t.cols() != self.config.d_model || g.cols() != self.config.d_model || g.rows() != 1 {
                return Err(Error::shape(format!(
                    "decoder expects width {}, got tokens {:?} and global {:?}",
                    self.config.d_model,
                    t.shape(),
                    g.shape()
                )));
            }
        }
        let (mut f1, mut f2) = (f1, f2);
        let mut out = DecodeNodes {
            f1,
            f2,
            snapshots1: Vec::new(),
            snapshots2: Vec::new(),
            boundaries: Vec::new(),
        };
        for l in 0..self.config.layers {
            f1 = self.norm_self_attn(tape, l, f1)?;
            f2 = self.norm_self_attn(tape, l, f2)?;
            out.boundaries.push((format!("layer{l}.self_attn.1"), f1));
            out.boundaries.push((format!("layer{l}.self_attn.2"), f2));
            f1 = self.norm_cross_attn(tape, l, f1, f2.tokens)?;
            out.boundaries.push((format!("layer{l}.cross_attn.1"), f1));
            f2 = self.norm_cross_attn(tape, l, f2, f1.tokens)?;
            out.boundaries.push((format!("layer{l}.cross_attn.2"), f2));
            f1 = modulate_global(tape, f1);
            f2 = modulate_global(tape, f2);
            out.boundaries.push((format!("layer{l}.modulate.1"), f1));
            out.boundaries.push((format!("layer{l}.modulate.2"), f2));
            f1 = self.norm_mlp(tape, l, f1)?;
            f2 = self.norm_mlp(tape, l, f2)?;
            out.boundaries.push((format!("layer{l}.mlp.1"), f1));
            out.boundaries.push((format!("layer{l}.mlp.2"), f2));
            out.snapshots1.push(f1.tokens);
            out.snapshots2.push(f2.tokens);
        }
        out.f1 = f1;
        out.f2 = f2;
        Ok(out)
    }

    /// Runs [`Decoder::decode`] on plain values, returning the final sequences
    /// and per-layer keypoint token snapshots.
    pub fn decode_values(
        &self,
        store: &ParameterStore,
        f1: &FeatureSequence,
        f2: &FeatureSequence,
    ) -> Result<(FeatureSequence, FeatureSequence, Vec<Tensor>, Vec<Tensor>)> {
        let mut tape = Tape::new(store);
        let a = SeqNodes::constant(&mut tape, f1);
        let b = SeqNodes::constant(&mut tape, f2);
        let out = self.decode(&mut tape, a, b)?;
        let snaps = |v: &[NodeId]| v.iter().map(|&n| tape.value(n).clone()).collect::<Vec<_>>();
        Ok((
            out.f1.values(&tape),
            out.f2.values(&tape),
            snaps(&out.snapshots1),
            snaps(&out.snapshots2),
        ))
    }
}

/// Each keypoint token becomes `Norm(token ⊙ global)`.
pub fn modulate_global(tape: &mut Tape<'_>, seq: SeqNodes) -> SeqNodes {
    let modulated = tape.mul_row(seq.tokens, seq.global);
    SeqNodes {
        tokens: tape.normalize_rows(modulated),
        global: seq.global,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, GradCheckConfig};
    use crate::tensor::{l2_norm, l2_normalize, DEFAULT_EPS_GUARD};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_rows(rng: &mut ChaCha8Rng, m: usize, d: usize) -> Tensor {
        Tensor::matrix(m, d, (0..m * d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
            .normalize_rows(DEFAULT_EPS_GUARD)
    }

    fn seq(rng: &mut ChaCha8Rng, m: usize, d: usize) -> FeatureSequence {
        FeatureSequence::new(unit_rows(rng, m, d), unit_rows(rng, 1, d)).unwrap()
    }

    fn setup(d: usize, heads: usize, layers: usize, seed: u64) -> (Decoder, ParameterStore, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dec = Decoder::new(DecoderConfig {
            d_model: d,
            heads,
            layers,
            mlp_mult: 4,
        })
        .unwrap();
        let mut store = ParameterStore::new();
        dec.register(&mut store, &mut rng).unwrap();
        (dec, store, rng)
    }

    fn set_alphas(store: &mut ParameterStore, layers: usize, d: usize, v: f64) {
        for l in 0..layers {
            for a in Decoder::alpha_names(l) {
                store.set_value(&a, Tensor::filled(&[1, d], v)).unwrap();
            }
        }
    }

    #[test]
    fn heads_must_divide_width() {
        assert!(Decoder::new(DecoderConfig {
            d_model: 10,
            heads: 3,
            layers: 1,
            mlp_mult: 4
        })
        .is_err());
    }

    #[test]
    fn zero_step_self_attention_is_identity() {
        let (dec, mut store, mut rng) = setup(8, 1, 1, 1);
        set_alphas(&mut store, 1, 8, 0.0);
        let s = seq(&mut rng, 1, 8);
        let mut t = Tape::new(&store);
        let n = SeqNodes::constant(&mut t, &s);
        let out = dec.norm_self_attn(&mut t, 0, n).unwrap();
        assert!(t.value(out.tokens).max_abs_diff(&s.tokens) < 1e-15);
    }

    #[test]
    fn unit_step_self_attention_returns_normalized_attention() {
        // Single token whose global equals itself: attention is uniform over
        // two identical rows, so the attended value is the projection of f.
        let (dec, mut store, mut rng) = setup(8, 1, 1, 2);
        set_alphas(&mut store, 1, 8, 1.0);
        let tok = unit_rows(&mut rng, 1, 8);
        let s = FeatureSequence::new(tok.clone(), tok.clone()).unwrap();
        let mut t = Tape::new(&store);
        let n = SeqNodes::constant(&mut t, &s);
        let out = dec.norm_self_attn(&mut t, 0, n).unwrap();
        let wv = store.value("decoder.0.self_attn.v").unwrap();
        let wo = store.value("decoder.0.self_attn.o").unwrap();
        let expect = tok.matmul(wv).unwrap().matmul(wo).unwrap().normalize_rows(DEFAULT_EPS_GUARD);
        assert!(t.value(out.tokens).max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn full_shapes() {
        let (dec, store, mut rng) = setup(648, 12, 1, 3);
        assert_eq!(dec.config.head_dim(), 54);
        let s = seq(&mut rng, 23, 648);
        let mut t = Tape::new(&store);
        let n = SeqNodes::constant(&mut t, &s);
        let out = dec.norm_self_attn(&mut t, 0, n).unwrap();
        let v = t.value(out.tokens);
        assert_eq!(v.shape(), &[23, 648]);
        for i in 0..23 {
            assert!((l2_norm(v.row(i)) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn cross_attention_to_repeated_token_gives_identical_rows() {
        let (dec, mut store, mut rng) = setup(8, 2, 1, 4);
        set_alphas(&mut store, 1, 8, 1.0);
        let s = seq(&mut rng, 3, 8);
        let tok = unit_rows(&mut rng, 1, 8);
        let other = Tensor::from_rows(&[tok.row(0), tok.row(0), tok.row(0)]).unwrap();
        let mut t = Tape::new(&store);
        let n = SeqNodes::constant(&mut t, &s);
        let o = t.constant(other);
        let out = dec.norm_cross_attn(&mut t, 0, n, o).unwrap();
        let v = t.value(out.tokens);
        for i in 1..3 {
            for (a, b) in v.row(0).iter().zip(v.row(i)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cross_attention_zero_step_identity() {
        let (dec, mut store, mut rng) = setup(8, 2, 1, 5);
        set_alphas(&mut store, 1, 8, 0.0);
        let s = seq(&mut rng, 3, 8);
        let other = unit_rows(&mut rng, 3, 8);
        let mut t = Tape::new(&store);
        let n = SeqNodes::constant(&mut t, &s);
        let o = t.constant(other);
        let out = dec.norm_cross_attn(&mut t, 0, n, o).unwrap();
        assert!(t.value(out.tokens).max_abs_diff(&s.tokens) < 1e-15);
    }

    /// Multi-head attention written directly with per-entry loops.
    fn dense_attention(q_in: &Tensor, ctx: &Tensor, store: &ParameterStore, prefix: &str, heads: usize) -> Tensor {
        let w = |n: &str| store.value(&format!("{prefix}.{n}")).unwrap().clone();
        let (wq, wk, wv, wo) = (w("q"), w("k"), w("v"), w("o"));
        let d = wq.cols();
        let hd = d / heads;
        let proj = |x: &Tensor, m: &Tensor| {
            let mut out = Tensor::zeros(&[x.rows(), d]);
            for i in 0..x.rows() {
                for j in 0..d {
                    out.set(i, j, (0..d).map(|k| x.get(i, k) * m.get(k, j)).sum());
                }
            }
            out
        };
        let (q, k, v) = (proj(q_in, &wq), proj(ctx, &wk), proj(ctx, &wv));
        let mut merged = Tensor::zeros(&[q_in.rows(), d]);
        for h in 0..heads {
            for i in 0..q_in.rows() {
                let scores: Vec<f64> = (0..ctx.rows())
                    .map(|j| (0..hd).map(|c| q.get(i, h * hd + c) * k.get(j, h * hd + c)).sum::<f64>() / (hd as f64).sqrt())
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in 0..hd {
                    let val = (0..ctx.rows()).map(|j| e[j] / z * v.get(j, h * hd + c)).sum();
                    merged.set(i, h * hd + c, val);
                }
            }
        }
        proj(&merged, &wo)
    }

    #[test]
    fn cross_attention_matches_dense_oracle() {
        let (dec, mut store, mut rng) = setup(8, 2, 1, 6);
        // orthogonal value outputs: V = identity
        store.set_value("decoder.0.cross_attn.v", Tensor::identity(8)).unwrap();
        let alpha: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        store.set_value("decoder.0.alpha_c", Tensor::row_vector(alpha.clone()).unwrap()).unwrap();
        let s = seq(&mut rng, 2, 8);
        let mut other = Tensor::zeros(&[2, 8]);
        other.set(0, 0, 1.0);
        other.set(1, 5, 1.0);
        let mut t = Tape::new(&store);
        let n = SeqNodes::constant(&mut t, &s);
        let o = t.constant(other.clone());
        let out = dec.norm_cross_attn(&mut t, 0, n, o).unwrap();

        let att = dense_attention(&s.tokens, &other, &store, "decoder.0.cross_attn", 2);
        let mut expect = Tensor::zeros(&[2, 8]);
        for i in 0..2 {
            let fa = l2_normalize(att.row(i), DEFAULT_EPS_GUARD);
            let f = s.tokens.row(i);
            let moved: Vec<f64> = (0..8).map(|c| f[c] + alpha[c].abs() * (fa[c] - f[c])).collect();
            expect.row_mut(i).copy_from_slice(&l2_normalize(&moved, DEFAULT_EPS_GUARD));
        }
        assert!(t.value(out.tokens).max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn modulation_examples() {
        let store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = 8;
        let tokens = unit_rows(&mut rng, 3, d);
        let uniform = Tensor::filled(&[1, d], 1.0 / (d as f64).sqrt());
        let mut t = Tape::new(&store);
        let s = SeqNodes::constant(&mut t, &FeatureSequence::new(tokens.clone(), uniform).unwrap());
        let out = modulate_global(&mut t, s);
        assert!(t.value(out.tokens).max_abs_diff(&tokens) < 1e-15);

        // disjoint support → guarded zero
        let mut tok = Tensor::zeros(&[1, d]);
        tok.set(0, 0, 1.0);
        let mut glob = Tensor::zeros(&[1, d]);
        glob.set(0, 1, 1.0);
        let s = SeqNodes::constant(&mut t, &FeatureSequence::new(tok, glob).unwrap());
        let out = modulate_global(&mut t, s);
        assert!(t.value(out.tokens).data().iter().all(|v| *v == 0.0));

        // random: direct formula
        let glob = unit_rows(&mut rng, 1, d);
        let s = SeqNodes::constant(&mut t, &FeatureSequence::new(tokens.clone(), glob.clone()).unwrap());
        let out = modulate_global(&mut t, s);
        for i in 0..3 {
            let prod: Vec<f64> = (0..d).map(|c| tokens.get(i, c) * glob.get(0, c)).collect();
            let n = l2_norm(&prod);
            for c in 0..d {
                assert!((t.value(out.tokens).get(i, c) - prod[c] / n).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn mlp_examples() {
        let (dec, mut store, mut rng) = setup(8, 2, 1, 8);
        set_alphas(&mut store, 1, 8, 0.0);
        let s = seq(&mut rng, 4, 8);
        let mut t = Tape::new(&store);
        let n = SeqNodes::constant(&mut t, &s);
        let out = dec.norm_mlp(&mut t, 0, n).unwrap();
        assert!(t.value(out.tokens).max_abs_diff(&s.tokens) < 1e-15);
        assert!(t.value(out.global).max_abs_diff(&s.global) < 1e-15);
        drop(t);

        set_alphas(&mut store, 1, 8, 1.0);
        store.set_value("decoder.0.mlp.w1", Tensor::zeros(&[8, 32])).unwrap();
        store.set_value("decoder.0.mlp.w2", Tensor::zeros(&[32, 8])).unwrap();
        let b: Vec<f64> = (0..8).map(|i| i as f64 - 3.5).collect();
        store.set_value("decoder.0.mlp.b2", Tensor::row_vector(b.clone()).unwrap()).unwrap();
        let mut t = Tape::new(&store);
        let n = SeqNodes::constant(&mut t, &s);
        let out = dec.norm_mlp(&mut t, 0, n).unwrap();
        let nb = l2_normalize(&b, DEFAULT_EPS_GUARD);
        for i in 0..4 {
            for (a, e) in t.value(out.tokens).row(i).iter().zip(&nb) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn decode_snapshots_and_zero_step_identity() {
        let (dec, mut store, mut rng) = setup(8, 2, 4, 9);
        set_alphas(&mut store, 4, 8, 0.0);
        let uniform = Tensor::filled(&[1, 8], 1.0 / 8f64.sqrt());
        let a = FeatureSequence::new(unit_rows(&mut rng, 5, 8), uniform.clone()).unwrap();
        let b = FeatureSequence::new(unit_rows(&mut rng, 5, 8), uniform).unwrap();
        let (o1, o2, s1, s2) = dec.decode_values(&store, &a, &b).unwrap();
        assert_eq!(s1.len(), 4);
        assert_eq!(s2.len(), 4);
        assert!(o1.tokens.max_abs_diff(&a.tokens) < 1e-6);
        assert!(o2.tokens.max_abs_diff(&b.tokens) < 1e-6);
    }

    #[test]
    fn swapping_streams_swaps_outputs_when_cross_step_is_zero() {
        // With shared parameters the only asymmetry is the sequential
        // cross-attention order; freezing that block makes the swap exact.
        let (dec, mut store, mut rng) = setup(8, 2, 2, 10);
        for l in 0..2 {
            store.set_value(&Decoder::alpha_names(l)[1], Tensor::zeros(&[1, 8])).unwrap();
        }
        let a = seq(&mut rng, 4, 8);
        let b = seq(&mut rng, 4, 8);
        let (o1, o2, _, _) = dec.decode_values(&store, &a, &b).unwrap();
        let (p1, p2, _, _) = dec.decode_values(&store, &b, &a).unwrap();
        assert!(o1.tokens.max_abs_diff(&p2.tokens) < 1e-14);
        assert!(o2.tokens.max_abs_diff(&p1.tokens) < 1e-14);
        assert!(o1.global.max_abs_diff(&p2.global) < 1e-14);
    }

    #[test]
    fn sequential_cross_attention_breaks_swap_symmetry() {
        let (dec, store, mut rng) = setup(8, 2, 1, 10);
        let a = seq(&mut rng, 4, 8);
        let b = seq(&mut rng, 4, 8);
        let (o1, _, _, _) = dec.decode_values(&store, &a, &b).unwrap();
        let (_, p2, _, _) = dec.decode_values(&store, &b, &a).unwrap();
        assert!(o1.tokens.max_abs_diff(&p2.tokens) > 1e-6);
    }

    #[test]
    fn unit_norm_at_every_boundary() {
        let (dec, store, mut rng) = setup(16, 4, 2, 11);
        let a = seq(&mut rng, 6, 16);
        let b = seq(&mut rng, 6, 16);
        let mut t = Tape::new(&store);
        let na = SeqNodes::constant(&mut t, &a);
        let nb = SeqNodes::constant(&mut t, &b);
        let out = dec.decode(&mut t, na, nb).unwrap();
        assert_eq!(out.boundaries.len(), 16);
        for (label, s) in &out.boundaries {
            for node in [s.tokens, s.global] {
                let v = t.value(node);
                for i in 0..v.rows() {
                    assert!((l2_norm(v.row(i)) - 1.0).abs() < 1e-6, "{label}");
                }
            }
        }
    }

    #[test]
    fn permuting_one_stream_permutes_its_outputs_only() {
        let (dec, store, mut rng) = setup(8, 2, 2, 12);
        let a = seq(&mut rng, 5, 8);
        let b = seq(&mut rng, 5, 8);
        let perm = [2, 4, 0, 1, 3];
        let mut ap = a.clone();
        for i in 0..5 {
            ap.tokens.row_mut(perm[i]).copy_from_slice(a.tokens.row(i));
        }
        let (o1, o2, _, _) = dec.decode_values(&store, &a, &b).unwrap();
        let (p1, p2, _, _) = dec.decode_values(&store, &ap, &b).unwrap();
        for i in 0..5 {
            for (x, y) in o1.tokens.row(i).iter().zip(p1.tokens.row(perm[i])) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        assert!(o2.tokens.max_abs_diff(&p2.tokens) < 1e-12);
    }

    #[test]
    fn decoder_gradients_pass_finite_differences() {
        for (d, m, seed) in [(8, 3, 13), (16, 5, 14)] {
            let (dec, mut store, mut rng) = setup(d, 2, 2, seed);
            let a = seq(&mut rng, m, d);
            let b = seq(&mut rng, m, d);
            let target = Tensor::matrix(m, m, (0..m * m).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let report = grad_check(
                |s| {
                    let (loss, grads) = {
                        let mut t = Tape::new(s);
                        let na = SeqNodes::constant(&mut t, &a);
                        let nb = SeqNodes::constant(&mut t, &b);
                        let out = dec.decode(&mut t, na, nb).unwrap();
                        let c = t.matmul_bt(out.f1.tokens, out.f2.tokens);
                        let tg = t.constant(target.clone());
                        let p = t.mul(c, tg);
                        let l = t.sum(p);
                        let g = t.sum(out.f1.global);
                        let l = t.add(l, g);
                        (t.scalar(l), t.backward(l))
                    };
                    s.accumulate(&grads, 1.0);
                    loss
                },
                &mut store,
                &GradCheckConfig::default(),
            );
            assert!(report.passed(), "d={d} m={m}\n{report}");
        }
    }
}
