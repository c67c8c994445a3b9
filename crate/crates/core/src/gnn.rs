//! Spline graph convolution with degree-1 B-spline kernels and max aggregation.

use rand::Rng;

use crate::autodiff::{CustomOp, NodeId, Tape};
use crate::error::{Error, Result};
use crate::geometry::KeypointGraph;
use crate::params::ParameterStore;
use crate::tensor::Tensor;

/// Active basis functions at `u ∈ [0,1]²` as `(flat index, weight)` pairs.
///
/// Flat index is `i₀·K + i₁`. Zero-weight pairs are dropped, so a point on
/// a knot in both dimensions yields a single pair.
pub fn spline_basis(u: [f64; 2], kernel_size: usize) -> Result<Vec<(usize, f64)>> {
    if kernel_size < 2 {
        return Err(Error::config("spline kernel size must be at least 2"));
    }
    if u.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Contract(format!("pseudo-coordinate {u:?} outside [0,1]²")));
    }
    let per_dim = |v: f64| -> [(usize, f64); 2] {
        let s = v * (kernel_size - 1) as f64;
        let i = (s.floor() as usize).min(kernel_size - 2);
        let frac = s - i as f64;
        [(i, 1.0 - frac), (i + 1, frac)]
    };
    let (d0, d1) = (per_dim(u[0]), per_dim(u[1]));
    let mut out = Vec::with_capacity(4);
    for (i0, w0) in d0 {
        for (i1, w1) in d1 {
            let w = w0 * w1;
            if w > 0.0 {
                out.push((i0 * kernel_size + i1, w));
            }
        }
    }
    Ok(out)
}

/// Initial weight scale of kernels the self-loop does not touch, relative
/// to the self kernel. Nodes start out dominated by their own feature.
pub const NEIGHBOUR_INIT_SCALE: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct SplineConvLayer {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub kernel_size: usize,
}

impl SplineConvLayer {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize, kernel_size: usize) -> Self {
        Self {
            name: name.into(),
            in_dim,
            out_dim,
            kernel_size,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn num_kernels(&self) -> usize {
        self.kernel_size * self.kernel_size
    }

    pub fn register(&self, store: &mut ParameterStore, rng: &mut impl Rng) -> Result<()> {
        if self.kernel_size < 2 {
            return Err(Error::config("spline kernel size must be at least 2"));
        }
        let bound = 1.0 / (self.in_dim as f64).sqrt();
        let block = self.in_dim * self.out_dim;
        let own: Vec<usize> = spline_basis([0.5, 0.5], self.kernel_size)?
            .into_iter()
            .map(|(k, _)| k)
            .collect();
        let n = self.num_kernels() * block;
        let w = (0..n)
            .map(|i| {
                let scale = if own.contains(&(i / block)) { 1.0 } else { NEIGHBOUR_INIT_SCALE };
                scale * rng.random_range(-bound..bound)
            })
            .collect();
        store.insert(
            self.weight_name(),
            Tensor::new(vec![self.num_kernels(), self.in_dim, self.out_dim], w)?,
            true,
        )?;
        store.insert(self.bias_name(), Tensor::zeros(&[1, self.out_dim]), true)?;
        Ok(())
    }

    /// Aggregated messages plus bias, before any activation.
    pub fn forward(&self, tape: &mut Tape<'_>, x: NodeId, graph: &KeypointGraph) -> Result<NodeId> {
        let w = tape.param(&self.weight_name())?;
        let b = tape.param(&self.bias_name())?;
        let xv = tape.value(x);
        if xv.rows() != graph.num_nodes || xv.cols() != self.in_dim {
            return Err(Error::shape(format!(
                "{}: expected {}×{} features, got {:?}",
                self.name,
                graph.num_nodes,
                self.in_dim,
                xv.shape()
            )));
        }
        let (out, op) = spline_conv(
            xv,
            tape.value(w),
            tape.value(b),
            graph,
            self.kernel_size,
        )?;
        Ok(tape.custom(vec![x, w, b], out, Box::new(op)))
    }
}

struct SplineConvOp {
    /// `(src, kernel)` pairs whose products `x[src]·W[kernel]` are needed.
    products: Vec<(usize, usize)>,
    /// Per arc: `(product index, basis weight)`.
    arc_terms: Vec<Vec<(usize, f64)>>,
    /// Winning arc for every output entry, row-major `m × out`.
    argmax: Vec<usize>,
    in_dim: usize,
    out_dim: usize,
}

fn spline_conv(
    x: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    graph: &KeypointGraph,
    kernel_size: usize,
) -> Result<(Tensor, SplineConvOp)> {
    let (m, in_dim) = (x.rows(), x.cols());
    let out_dim = bias.cols();
    let k2 = kernel_size * kernel_size;
    debug_assert_eq!(weight.shape(), &[k2, in_dim, out_dim]);

    let incoming = graph.incoming();
    if let Some(v) = incoming.iter().position(Vec::is_empty) {
        return Err(Error::Contract(format!(
            "node {v} has no incoming arcs; max aggregation is undefined"
        )));
    }

    let mut product_of = vec![usize::MAX; m * k2];
    let mut products = Vec::new();
    let mut arc_terms = Vec::with_capacity(graph.arcs.len());
    for arc in &graph.arcs {
        let mut terms = Vec::with_capacity(4);
        for (kernel, w) in spline_basis(arc.pseudo, kernel_size)? {
            let slot = &mut product_of[arc.src * k2 + kernel];
            if *slot == usize::MAX {
                *slot = products.len();
                products.push((arc.src, kernel));
            }
            terms.push((*slot, w));
        }
        arc_terms.push(terms);
    }

    let wd = weight.data();
    let mut prod_vals = vec![0.0; products.len() * out_dim];
    for (p, &(src, kernel)) in products.iter().enumerate() {
        let out = &mut prod_vals[p * out_dim..(p + 1) * out_dim];
        let xr = x.row(src);
        let wk = &wd[kernel * in_dim * out_dim..(kernel + 1) * in_dim * out_dim];
        for (i, &xi) in xr.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for (o, wv) in out.iter_mut().zip(&wk[i * out_dim..(i + 1) * out_dim]) {
                *o += xi * wv;
            }
        }
    }
    let mut messages = vec![0.0; graph.arcs.len() * out_dim];
    for (a, terms) in arc_terms.iter().enumerate() {
        let msg = &mut messages[a * out_dim..(a + 1) * out_dim];
        for &(p, w) in terms {
            for (o, v) in msg.iter_mut().zip(&prod_vals[p * out_dim..(p + 1) * out_dim]) {
                *o += w * v;
            }
        }
    }

    let mut out = Tensor::zeros(&[m, out_dim]);
    let mut argmax = vec![0; m * out_dim];
    for (v, arcs) in incoming.iter().enumerate() {
        for o in 0..out_dim {
            let mut best = arcs[0];
            let mut bv = messages[best * out_dim + o];
            for &a in &arcs[1..] {
                let val = messages[a * out_dim + o];
                if val > bv {
                    best = a;
                    bv = val;
                }
            }
            argmax[v * out_dim + o] = best;
            out.set(v, o, bv + bias.data()[o]);
        }
    }
    Ok((
        out,
        SplineConvOp {
            products,
            arc_terms,
            argmax,
            in_dim,
            out_dim,
        },
    ))
}

impl CustomOp for SplineConvOp {
    fn name(&self) -> &'static str {
        "spline_conv"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (x, weight) = (inputs[0], inputs[1]);
        let (in_dim, out_dim) = (self.in_dim, self.out_dim);

        let mut gbias = Tensor::zeros(&[1, out_dim]);
        let mut g_msg = vec![0.0; self.arc_terms.len() * out_dim];
        for (idx, &a) in self.argmax.iter().enumerate() {
            let o = idx % out_dim;
            let g = grad.data()[idx];
            g_msg[a * out_dim + o] += g;
            gbias.data_mut()[o] += g;
        }
        let mut g_prod = vec![0.0; self.products.len() * out_dim];
        for (a, terms) in self.arc_terms.iter().enumerate() {
            let gm = &g_msg[a * out_dim..(a + 1) * out_dim];
            for &(p, w) in terms {
                for (t, g) in g_prod[p * out_dim..(p + 1) * out_dim].iter_mut().zip(gm) {
                    *t += w * g;
                }
            }
        }

        let wd = weight.data();
        let mut gx = Tensor::zeros(x.shape());
        let mut gw = Tensor::zeros(weight.shape());
        for (p, &(src, kernel)) in self.products.iter().enumerate() {
            let gp = &g_prod[p * out_dim..(p + 1) * out_dim];
            let xr = x.row(src);
            let base = kernel * in_dim * out_dim;
            let gw_k = &mut gw.data_mut()[base..base + in_dim * out_dim];
            for (i, &xi) in xr.iter().enumerate() {
                for (gwv, g) in gw_k[i * out_dim..(i + 1) * out_dim].iter_mut().zip(gp) {
                    *gwv += xi * g;
                }
            }
            let wk = &wd[base..base + in_dim * out_dim];
            let gx_row = gx.row_mut(src);
            for (i, gxi) in gx_row.iter_mut().enumerate() {
                *gxi += wk[i * out_dim..(i + 1) * out_dim]
                    .iter()
                    .zip(gp)
                    .map(|(w, g)| w * g)
                    .sum::<f64>();
            }
        }
        vec![Some(gx), Some(gw), Some(gbias)]
    }
}

/// Two spline convolutions: ReLU after the first, row normalization after the second.
#[derive(Clone, Debug)]
pub struct Gnn {
    pub conv1: SplineConvLayer,
    pub conv2: SplineConvLayer,
}

impl Gnn {
    pub fn new(input_dim: usize, d_model: usize, kernel_size: usize) -> Self {
        Self {
            conv1: SplineConvLayer::new("gnn.conv1", input_dim, d_model, kernel_size),
            conv2: SplineConvLayer::new("gnn.conv2", d_model, d_model, kernel_size),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.conv1.in_dim
    }

    pub fn register(&self, store: &mut ParameterStore, rng: &mut impl Rng) -> Result<()> {
        self.conv1.register(store, rng)?;
        self.conv2.register(store, rng)
    }

    pub fn refine(&self, tape: &mut Tape<'_>, x: NodeId, graph: &KeypointGraph) -> Result<NodeId> {
        let width = tape.value(x).cols();
        if width != self.input_dim() {
            return Err(Error::config(format!(
                "GNN expects input width {}, got {width}",
                self.input_dim()
            )));
        }
        let h = self.conv1.forward(tape, x, graph)?;
        let h = tape.relu(h);
        let h = self.conv2.forward(tape, h, graph)?;
        Ok(tape.normalize_rows(h))
    }
}
