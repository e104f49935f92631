//! Dense 2-D tensors on a reverse-mode differentiation tape, the AdamW
//! optimizer, parameter storage, gradient checking, and checkpoint io.
//!
//! The tape is generic over the scalar so the same graph code runs in f32
//! for training and in f64 shadow mode for gradient checking. Records are
//! appended in topological order; `backward` walks them once in reverse.
//! All reductions use a fixed order, so a given (seed, config) is
//! bit-reproducible.

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use indexmap::IndexMap;
use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Axis, ScalarOperand};
use num_traits::Float;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

pub trait Scalar:
    Float
    + ndarray::LinalgScalar
    + ScalarOperand
    + num_traits::FromPrimitive
    + std::ops::AddAssign
    + std::fmt::Debug
{
    fn c(x: f64) -> Self {
        Self::from(x).expect("finite constant converts")
    }
}
impl Scalar for f32 {}
impl Scalar for f64 {}

pub type NodeId = usize;

/// Half-open (start, end) row ranges; together they must tile 0..n_rows.
pub type Segments = Vec<(usize, usize)>;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: [{a0},{a1}] vs [{b0},{b1}]")]
    ShapeMismatch {
        op: &'static str,
        a0: usize,
        a1: usize,
        b0: usize,
        b1: usize,
    },
    #[error("segment {index} is empty")]
    EmptySegment { index: usize },
    #[error("non-finite gradient for parameter '{name}'")]
    NonFiniteGradient { name: String },
}

enum Op<F: Scalar> {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    AddBias {
        x: NodeId,
        b: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        c: F,
    },
    ConcatCols {
        xs: Vec<NodeId>,
        widths: Vec<usize>,
    },
    GatherRows {
        x: NodeId,
        ids: Vec<usize>,
    },
    ScatterRows {
        x: NodeId,
        ids: Vec<usize>,
    },
    LeakyRelu {
        x: NodeId,
        slope: F,
    },
    Relu {
        x: NodeId,
    },
    MeanRows {
        x: NodeId,
    },
    SegmentMean {
        x: NodeId,
        segments: Segments,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        x_hat: Array2<F>,
        inv_std: Array1<F>,
        training: bool,
    },
    Dropout {
        x: NodeId,
        mask: Array2<F>,
    },
    SegmentSoftmax {
        scores: NodeId,
        segments: Segments,
    },
    SegmentWeightedSum {
        alpha: NodeId,
        msgs: NodeId,
        segments: Segments,
        heads: usize,
    },
    HeadsDot {
        x: NodeId,
        a: NodeId,
        heads: usize,
    },
    MseLoss {
        pred: NodeId,
        target: NodeId,
    },
}

struct Node<F: Scalar> {
    value: Array2<F>,
    grad: Option<Array2<F>>,
    op: Op<F>,
    requires_grad: bool,
}

/// Batch statistics captured by a train-mode batch-norm record, handed back
/// so the caller can fold them into running statistics. `var` is the biased
/// estimate used for normalization; `n` lets the caller unbias it.
#[derive(Debug, Clone)]
pub struct BnBatchStats<F> {
    pub mean: Array1<F>,
    pub var: Array1<F>,
    pub n: usize,
}

pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
    params: IndexMap<String, NodeId>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: IndexMap::new(),
        }
    }

    fn push(&mut self, value: Array2<F>, op: Op<F>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    pub fn constant(&mut self, v: Array2<F>) -> NodeId {
        self.push(v, Op::Leaf, false)
    }

    pub fn leaf(&mut self, v: Array2<F>) -> NodeId {
        self.push(v, Op::Leaf, true)
    }

    /// Insert a named parameter as a leaf, memoized so repeated uses share
    /// one node and gradients accumulate across all of them.
    pub fn param(&mut self, store: &ParamStore<F>, name: &str) -> NodeId {
        if let Some(&id) = self.params.get(name) {
            return id;
        }
        let p = store.get(name);
        let id = self.push(p.clone(), Op::Leaf, store.is_trainable(name));
        self.params.insert(name.to_string(), id);
        id
    }

    pub fn value(&self, id: NodeId) -> &Array2<F> {
        &self.nodes[id].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Array2<F>> {
        self.nodes[id].grad.as_ref()
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id].value.dim()
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        assert_eq!(ac, br, "matmul inner dims {ac} vs {br}");
        let mut out = Array2::zeros((ar, bc));
        general_mat_mul(
            F::one(),
            &self.nodes[a].value,
            &self.nodes[b].value,
            F::zero(),
            &mut out,
        );
        let req = self.requires(a) || self.requires(b);
        self.push(out, Op::MatMul { a, b }, req)
    }

    /// x: [N, D] plus a [1, D] bias row broadcast over rows.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let (_, d) = self.shape(x);
        let (br, bd) = self.shape(b);
        assert_eq!((br, bd), (1, d), "bias must be [1,{d}]");
        let out = &self.nodes[x].value + &self.nodes[b].value;
        let req = self.requires(x) || self.requires(b);
        self.push(out, Op::AddBias { x, b }, req)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "add shapes differ");
        let out = &self.nodes[a].value + &self.nodes[b].value;
        let req = self.requires(a) || self.requires(b);
        self.push(out, Op::Add { a, b }, req)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "mul shapes differ");
        let out = &self.nodes[a].value * &self.nodes[b].value;
        let req = self.requires(a) || self.requires(b);
        self.push(out, Op::Mul { a, b }, req)
    }

    pub fn scale(&mut self, x: NodeId, c: F) -> NodeId {
        let out = self.nodes[x].value.mapv(|v| v * c);
        let req = self.requires(x);
        self.push(out, Op::Scale { x, c }, req)
    }

    pub fn concat_cols(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty());
        let rows = self.shape(xs[0]).0;
        let widths: Vec<usize> = xs
            .iter()
            .map(|&x| {
                assert_eq!(self.shape(x).0, rows, "concat_cols row counts differ");
                self.shape(x).1
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Array2::zeros((rows, total));
        let mut off = 0;
        for (&x, &w) in xs.iter().zip(&widths) {
            out.slice_mut(ndarray::s![.., off..off + w])
                .assign(&self.nodes[x].value);
            off += w;
        }
        let req = xs.iter().any(|&x| self.requires(x));
        self.push(
            out,
            Op::ConcatCols {
                xs: xs.to_vec(),
                widths,
            },
            req,
        )
    }

    /// Select rows by index, repetition allowed.
    pub fn gather_rows(&mut self, x: NodeId, ids: &[usize]) -> NodeId {
        let (n, d) = self.shape(x);
        let mut out = Array2::zeros((ids.len(), d));
        for (i, &id) in ids.iter().enumerate() {
            assert!(id < n, "gather_rows index {id} out of {n}");
            out.row_mut(i).assign(&self.nodes[x].value.row(id));
        }
        let req = self.requires(x);
        self.push(
            out,
            Op::GatherRows {
                x,
                ids: ids.to_vec(),
            },
            req,
        )
    }

    /// Place row i of x at output row ids[i]; untouched rows stay zero and
    /// duplicate destinations accumulate.
    pub fn scatter_rows(&mut self, x: NodeId, ids: &[usize], n_rows: usize) -> NodeId {
        let (xr, d) = self.shape(x);
        assert_eq!(xr, ids.len(), "scatter_rows needs one id per row");
        let mut out = Array2::zeros((n_rows, d));
        for (i, &id) in ids.iter().enumerate() {
            assert!(id < n_rows);
            let src = self.nodes[x].value.row(i).to_owned();
            let mut dst = out.row_mut(id);
            dst += &src;
        }
        let req = self.requires(x);
        self.push(
            out,
            Op::ScatterRows {
                x,
                ids: ids.to_vec(),
            },
            req,
        )
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: F) -> NodeId {
        let out = self.nodes[x]
            .value
            .mapv(|v| if v > F::zero() { v } else { v * slope });
        let req = self.requires(x);
        self.push(out, Op::LeakyRelu { x, slope }, req)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x].value.mapv(|v| v.max(F::zero()));
        let req = self.requires(x);
        self.push(out, Op::Relu { x }, req)
    }

    /// Mean over all rows, producing [1, D].
    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let (n, d) = self.shape(x);
        assert!(n > 0);
        let mean = self
            .nodes[x]
            .value
            .mean_axis(Axis(0))
            .unwrap()
            .into_shape_with_order((1, d))
            .unwrap();
        let req = self.requires(x);
        self.push(mean, Op::MeanRows { x }, req)
    }

    /// Per-segment row mean; an empty segment yields a zero row (used for
    /// samples with no associated set members).
    pub fn segment_mean(&mut self, x: NodeId, segments: &Segments) -> NodeId {
        let (n, d) = self.shape(x);
        validate_segments(segments, n, true).expect("segment_mean segments tile the rows");
        let mut out = Array2::zeros((segments.len(), d));
        for (s, &(lo, hi)) in segments.iter().enumerate() {
            if hi > lo {
                let inv = F::c(1.0 / (hi - lo) as f64);
                for r in lo..hi {
                    let row = self.nodes[x].value.row(r).to_owned();
                    let mut dst = out.row_mut(s);
                    dst.scaled_add(inv, &row);
                }
            }
        }
        let req = self.requires(x);
        self.push(
            out,
            Op::SegmentMean {
                x,
                segments: segments.clone(),
            },
            req,
        )
    }

    /// Train-mode batch norm over rows. Returns the node and the batch
    /// statistics (biased variance) for the caller's running-stat update.
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: F,
    ) -> (NodeId, BnBatchStats<F>) {
        let (n, d) = self.shape(x);
        assert!(n > 0);
        let xv = &self.nodes[x].value;
        let mean = xv.mean_axis(Axis(0)).unwrap();
        let mut var = Array1::<F>::zeros(d);
        for row in xv.rows() {
            for (j, &v) in row.iter().enumerate() {
                let c = v - mean[j];
                var[j] = var[j] + c * c;
            }
        }
        let inv_n = F::c(1.0 / n as f64);
        var.mapv_inplace(|v| v * inv_n);
        let inv_std = var.mapv(|v| F::one() / (v + eps).sqrt());
        self.bn_node(
            x,
            gamma,
            beta,
            &mean,
            &inv_std,
            true,
            Some(BnBatchStats {
                mean: mean.clone(),
                var,
                n,
            }),
        )
    }

    /// Eval-mode batch norm: a deterministic affine map using running stats.
    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &Array1<F>,
        running_var: &Array1<F>,
        eps: F,
    ) -> NodeId {
        let inv_std = running_var.mapv(|v| F::one() / (v + eps).sqrt());
        self.bn_node(x, gamma, beta, running_mean, &inv_std, false, None)
            .0
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_node(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &Array1<F>,
        inv_std: &Array1<F>,
        training: bool,
        stats: Option<BnBatchStats<F>>,
    ) -> (NodeId, BnBatchStats<F>) {
        let (_, d) = self.shape(x);
        assert_eq!(self.shape(gamma), (1, d));
        assert_eq!(self.shape(beta), (1, d));
        let mut x_hat = self.nodes[x].value.clone();
        for mut row in x_hat.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean[j]) * inv_std[j];
            }
        }
        let gv = &self.nodes[gamma].value;
        let bv = &self.nodes[beta].value;
        let mut out = x_hat.clone();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * gv[[0, j]] + bv[[0, j]];
            }
        }
        let req = self.requires(x) || self.requires(gamma) || self.requires(beta);
        let id = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std: inv_std.clone(),
                training,
            },
            req,
        );
        let stats = stats.unwrap_or(BnBatchStats {
            mean: mean.clone(),
            var: Array1::zeros(d),
            n: 0,
        });
        (id, stats)
    }

    /// Inverted dropout: kept entries are scaled by 1/(1-rate). Train mode
    /// only; eval-mode callers simply skip this op.
    pub fn dropout(&mut self, x: NodeId, rate: f64, rng: &mut ChaCha8Rng) -> NodeId {
        assert!((0.0..1.0).contains(&rate));
        if rate == 0.0 {
            return x;
        }
        let keep = F::c(1.0 / (1.0 - rate));
        let (n, d) = self.shape(x);
        let mask = Array2::from_shape_fn((n, d), |_| {
            if rng.random::<f64>() < rate {
                F::zero()
            } else {
                keep
            }
        });
        let out = &self.nodes[x].value * &mask;
        let req = self.requires(x);
        self.push(out, Op::Dropout { x, mask }, req)
    }

    /// Softmax within each contiguous row segment, per column, with
    /// max-subtraction for stability. Every row must belong to exactly one
    /// nonempty segment.
    pub fn segment_softmax(
        &mut self,
        scores: NodeId,
        segments: &Segments,
    ) -> Result<NodeId, TensorError> {
        let (e, h) = self.shape(scores);
        validate_segments(segments, e, false)?;
        let sv = &self.nodes[scores].value;
        let mut out = Array2::zeros((e, h));
        for &(lo, hi) in segments {
            for col in 0..h {
                let mut mx = sv[[lo, col]];
                for r in lo + 1..hi {
                    if sv[[r, col]] > mx {
                        mx = sv[[r, col]];
                    }
                }
                let mut denom = F::zero();
                for r in lo..hi {
                    let ex = (sv[[r, col]] - mx).exp();
                    out[[r, col]] = ex;
                    denom = denom + ex;
                }
                for r in lo..hi {
                    out[[r, col]] = out[[r, col]] / denom;
                }
            }
        }
        let req = self.requires(scores);
        Ok(self.push(
            out,
            Op::SegmentSoftmax {
                scores,
                segments: segments.clone(),
            },
            req,
        ))
    }

    /// Attention aggregation: out[s, h*dh+k] = Σ_{e in segment s}
    /// alpha[e,h] * msgs[e, h*dh+k]. One output row per segment.
    pub fn segment_weighted_sum(
        &mut self,
        alpha: NodeId,
        msgs: NodeId,
        segments: &Segments,
        heads: usize,
    ) -> NodeId {
        let (e, h) = self.shape(alpha);
        let (em, w) = self.shape(msgs);
        assert_eq!(e, em);
        assert_eq!(h, heads);
        assert_eq!(w % heads, 0, "message width must split across heads");
        validate_segments(segments, e, false).expect("weighted sum segments tile the rows");
        let dh = w / heads;
        let av = &self.nodes[alpha].value;
        let mv = &self.nodes[msgs].value;
        let mut out = Array2::zeros((segments.len(), w));
        for (s, &(lo, hi)) in segments.iter().enumerate() {
            for r in lo..hi {
                for head in 0..heads {
                    let a = av[[r, head]];
                    for k in 0..dh {
                        let c = head * dh + k;
                        out[[s, c]] = out[[s, c]] + a * mv[[r, c]];
                    }
                }
            }
        }
        let req = self.requires(alpha) || self.requires(msgs);
        self.push(
            out,
            Op::SegmentWeightedSum {
                alpha,
                msgs,
                segments: segments.clone(),
                heads,
            },
            req,
        )
    }

    /// Per-head dot with an attention vector: x is [E, H*Dh], a is
    /// [1, H*Dh]; scores[e,h] = Σ_k x[e, h*dh+k] * a[0, h*dh+k].
    pub fn heads_dot(&mut self, x: NodeId, a: NodeId, heads: usize) -> NodeId {
        let (e, w) = self.shape(x);
        assert_eq!(self.shape(a), (1, w));
        assert_eq!(w % heads, 0);
        let dh = w / heads;
        let xv = &self.nodes[x].value;
        let av = &self.nodes[a].value;
        let mut out = Array2::zeros((e, heads));
        for r in 0..e {
            for head in 0..heads {
                let mut acc = F::zero();
                for k in 0..dh {
                    let c = head * dh + k;
                    acc = acc + xv[[r, c]] * av[[0, c]];
                }
                out[[r, head]] = acc;
            }
        }
        let req = self.requires(x) || self.requires(a);
        self.push(out, Op::HeadsDot { x, a, heads }, req)
    }

    /// Mean over all entries of the squared difference, as a [1,1] scalar.
    pub fn mse_loss(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId, TensorError> {
        let (pr, pc) = self.shape(pred);
        let (tr, tc) = self.shape(target);
        if (pr, pc) != (tr, tc) {
            return Err(TensorError::ShapeMismatch {
                op: "mse_loss",
                a0: pr,
                a1: pc,
                b0: tr,
                b1: tc,
            });
        }
        let diff = &self.nodes[pred].value - &self.nodes[target].value;
        let n = F::c((pr * pc) as f64);
        let total = diff.iter().fold(F::zero(), |acc, &v| acc + v * v);
        let out = Array2::from_elem((1, 1), total / n);
        let req = self.requires(pred) || self.requires(target);
        Ok(self.push(out, Op::MseLoss { pred, target }, req))
    }

    /// Reverse sweep from a [1,1] output. Gradients land on every
    /// requires-grad node reachable from it.
    pub fn backward(&mut self, out: NodeId) {
        assert_eq!(self.shape(out), (1, 1), "backward needs a scalar output");
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[out].grad = Some(Array2::from_elem((1, 1), F::one()));
        for id in (0..=out).rev() {
            if !self.nodes[id].requires_grad || self.nodes[id].grad.is_none() {
                continue;
            }
            let g = self.nodes[id].grad.take().unwrap();
            self.step_backward(id, &g);
            self.nodes[id].grad = Some(g);
        }
    }

    fn acc(&mut self, id: NodeId, delta: Array2<F>) {
        if !self.nodes[id].requires_grad {
            return;
        }
        match &mut self.nodes[id].grad {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn step_backward(&mut self, id: NodeId, g: &Array2<F>) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (a, b) = (*a, *b);
                if self.requires(a) {
                    let mut da = Array2::zeros(self.shape(a));
                    general_mat_mul(F::one(), g, &self.nodes[b].value.t(), F::zero(), &mut da);
                    self.acc(a, da);
                }
                if self.requires(b) {
                    let mut db = Array2::zeros(self.shape(b));
                    general_mat_mul(F::one(), &self.nodes[a].value.t(), g, F::zero(), &mut db);
                    self.acc(b, db);
                }
            }
            Op::AddBias { x, b } => {
                let (x, b) = (*x, *b);
                if self.requires(x) {
                    self.acc(x, g.clone());
                }
                if self.requires(b) {
                    let (_, d) = self.shape(b);
                    let db = g
                        .sum_axis(Axis(0))
                        .into_shape_with_order((1, d))
                        .unwrap();
                    self.acc(b, db);
                }
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                if self.requires(a) {
                    self.acc(a, g.clone());
                }
                if self.requires(b) {
                    self.acc(b, g.clone());
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if self.requires(a) {
                    let da = g * &self.nodes[b].value;
                    self.acc(a, da);
                }
                if self.requires(b) {
                    let db = g * &self.nodes[a].value;
                    self.acc(b, db);
                }
            }
            Op::Scale { x, c } => {
                let (x, c) = (*x, *c);
                if self.requires(x) {
                    self.acc(x, g.mapv(|v| v * c));
                }
            }
            Op::ConcatCols { xs, widths } => {
                let xs = xs.clone();
                let widths = widths.clone();
                let mut off = 0;
                for (&x, &w) in xs.iter().zip(&widths) {
                    if self.requires(x) {
                        let dx = g.slice(ndarray::s![.., off..off + w]).to_owned();
                        self.acc(x, dx);
                    }
                    off += w;
                }
            }
            Op::GatherRows { x, ids } => {
                let x = *x;
                let ids = ids.clone();
                if self.requires(x) {
                    let mut dx = Array2::zeros(self.shape(x));
                    for (i, &id) in ids.iter().enumerate() {
                        let gi = g.row(i).to_owned();
                        let mut dst = dx.row_mut(id);
                        dst += &gi;
                    }
                    self.acc(x, dx);
                }
            }
            Op::ScatterRows { x, ids } => {
                let x = *x;
                let ids = ids.clone();
                if self.requires(x) {
                    let (n, d) = self.shape(x);
                    let mut dx = Array2::zeros((n, d));
                    for (i, &id) in ids.iter().enumerate() {
                        dx.row_mut(i).assign(&g.row(id));
                    }
                    self.acc(x, dx);
                }
            }
            Op::LeakyRelu { x, slope } => {
                let (x, slope) = (*x, *slope);
                if self.requires(x) {
                    let dx = ndarray::Zip::from(g)
                        .and(&self.nodes[x].value)
                        .map_collect(|&go, &v| if v > F::zero() { go } else { go * slope });
                    self.acc(x, dx);
                }
            }
            Op::Relu { x } => {
                let x = *x;
                if self.requires(x) {
                    let dx = ndarray::Zip::from(g)
                        .and(&self.nodes[x].value)
                        .map_collect(|&go, &v| if v > F::zero() { go } else { F::zero() });
                    self.acc(x, dx);
                }
            }
            Op::MeanRows { x } => {
                let x = *x;
                if self.requires(x) {
                    let (n, d) = self.shape(x);
                    let inv = F::c(1.0 / n as f64);
                    let mut dx = Array2::zeros((n, d));
                    for mut row in dx.rows_mut() {
                        for (j, v) in row.iter_mut().enumerate() {
                            *v = g[[0, j]] * inv;
                        }
                    }
                    self.acc(x, dx);
                }
            }
            Op::SegmentMean { x, segments } => {
                let x = *x;
                let segments = segments.clone();
                if self.requires(x) {
                    let mut dx = Array2::zeros(self.shape(x));
                    for (s, &(lo, hi)) in segments.iter().enumerate() {
                        if hi > lo {
                            let inv = F::c(1.0 / (hi - lo) as f64);
                            for r in lo..hi {
                                for j in 0..dx.ncols() {
                                    dx[[r, j]] = g[[s, j]] * inv;
                                }
                            }
                        }
                    }
                    self.acc(x, dx);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
                training,
            } => {
                let (x, gamma, beta, training) = (*x, *gamma, *beta, *training);
                let x_hat = x_hat.clone();
                let inv_std = inv_std.clone();
                let (n, d) = self.shape(x);
                if self.requires(gamma) {
                    let mut dgamma = Array2::zeros((1, d));
                    for r in 0..n {
                        for j in 0..d {
                            dgamma[[0, j]] = dgamma[[0, j]] + g[[r, j]] * x_hat[[r, j]];
                        }
                    }
                    self.acc(gamma, dgamma);
                }
                if self.requires(beta) {
                    let db = g
                        .sum_axis(Axis(0))
                        .into_shape_with_order((1, d))
                        .unwrap();
                    self.acc(beta, db);
                }
                if self.requires(x) {
                    let gv = self.nodes[gamma].value.clone();
                    let mut dx = Array2::zeros((n, d));
                    if training {
                        // batch stats depend on x, so the usual coupling
                        // terms apply
                        let inv_n = F::c(1.0 / n as f64);
                        let mut sum_g = Array1::<F>::zeros(d);
                        let mut sum_gx = Array1::<F>::zeros(d);
                        for r in 0..n {
                            for j in 0..d {
                                sum_g[j] += g[[r, j]];
                                sum_gx[j] += g[[r, j]] * x_hat[[r, j]];
                            }
                        }
                        for r in 0..n {
                            for j in 0..d {
                                let centered = g[[r, j]]
                                    - sum_g[j] * inv_n
                                    - x_hat[[r, j]] * sum_gx[j] * inv_n;
                                dx[[r, j]] = gv[[0, j]] * inv_std[j] * centered;
                            }
                        }
                    } else {
                        // running stats are constants: a plain affine map
                        for r in 0..n {
                            for j in 0..d {
                                dx[[r, j]] = g[[r, j]] * gv[[0, j]] * inv_std[j];
                            }
                        }
                    }
                    self.acc(x, dx);
                }
            }
            Op::Dropout { x, mask } => {
                let x = *x;
                if self.requires(x) {
                    let dx = g * mask;
                    self.acc(x, dx);
                }
            }
            Op::SegmentSoftmax { scores, segments } => {
                let scores = *scores;
                let segments = segments.clone();
                if self.requires(scores) {
                    let y = self.nodes[id].value.clone();
                    let (e, h) = y.dim();
                    let mut dx = Array2::zeros((e, h));
                    for &(lo, hi) in &segments {
                        for col in 0..h {
                            let mut dot = F::zero();
                            for r in lo..hi {
                                dot = dot + g[[r, col]] * y[[r, col]];
                            }
                            for r in lo..hi {
                                dx[[r, col]] = y[[r, col]] * (g[[r, col]] - dot);
                            }
                        }
                    }
                    self.acc(scores, dx);
                }
            }
            Op::SegmentWeightedSum {
                alpha,
                msgs,
                segments,
                heads,
            } => {
                let (alpha, msgs, heads) = (*alpha, *msgs, *heads);
                let segments = segments.clone();
                let (_, w) = self.shape(msgs);
                let dh = w / heads;
                if self.requires(alpha) {
                    let mv = self.nodes[msgs].value.clone();
                    let (e, _) = self.shape(alpha);
                    let mut da = Array2::zeros((e, heads));
                    for (s, &(lo, hi)) in segments.iter().enumerate() {
                        for r in lo..hi {
                            for head in 0..heads {
                                let mut acc = F::zero();
                                for k in 0..dh {
                                    let c = head * dh + k;
                                    acc = acc + g[[s, c]] * mv[[r, c]];
                                }
                                da[[r, head]] = acc;
                            }
                        }
                    }
                    self.acc(alpha, da);
                }
                if self.requires(msgs) {
                    let av = self.nodes[alpha].value.clone();
                    let (e, _) = self.shape(msgs);
                    let mut dm = Array2::zeros((e, w));
                    for (s, &(lo, hi)) in segments.iter().enumerate() {
                        for r in lo..hi {
                            for head in 0..heads {
                                let a = av[[r, head]];
                                for k in 0..dh {
                                    let c = head * dh + k;
                                    dm[[r, c]] = a * g[[s, c]];
                                }
                            }
                        }
                    }
                    self.acc(msgs, dm);
                }
            }
            Op::HeadsDot { x, a, heads } => {
                let (x, a, heads) = (*x, *a, *heads);
                let (e, w) = self.shape(x);
                let dh = w / heads;
                if self.requires(x) {
                    let av = self.nodes[a].value.clone();
                    let mut dx = Array2::zeros((e, w));
                    for r in 0..e {
                        for head in 0..heads {
                            for k in 0..dh {
                                let c = head * dh + k;
                                dx[[r, c]] = g[[r, head]] * av[[0, c]];
                            }
                        }
                    }
                    self.acc(x, dx);
                }
                if self.requires(a) {
                    let xv = self.nodes[x].value.clone();
                    let mut da = Array2::zeros((1, w));
                    for r in 0..e {
                        for head in 0..heads {
                            for k in 0..dh {
                                let c = head * dh + k;
                                da[[0, c]] = da[[0, c]] + g[[r, head]] * xv[[r, c]];
                            }
                        }
                    }
                    self.acc(a, da);
                }
            }
            Op::MseLoss { pred, target } => {
                let (pred, target) = (*pred, *target);
                let scale = g[[0, 0]];
                let (b, d) = self.shape(pred);
                let inv = F::c(2.0 / (b * d) as f64) * scale;
                let diff = &self.nodes[pred].value - &self.nodes[target].value;
                if self.requires(pred) {
                    self.acc(pred, diff.mapv(|v| v * inv));
                }
                if self.requires(target) {
                    self.acc(target, diff.mapv(|v| -v * inv));
                }
            }
        }
    }

    /// Gradients of all named parameters touched in this tape, in first-use
    /// order. Parameters never reached by backward get zero gradients.
    pub fn param_grads(&self) -> IndexMap<String, Array2<F>> {
        self.params
            .iter()
            .map(|(name, &id)| {
                let g = self.nodes[id]
                    .grad
                    .clone()
                    .unwrap_or_else(|| Array2::zeros(self.shape(id)));
                (name.clone(), g)
            })
            .collect()
    }
}

fn validate_segments(
    segments: &Segments,
    n_rows: usize,
    allow_empty: bool,
) -> Result<(), TensorError> {
    let mut expect = 0usize;
    for (i, &(lo, hi)) in segments.iter().enumerate() {
        if lo == hi && !allow_empty {
            return Err(TensorError::EmptySegment { index: i });
        }
        assert_eq!(lo, expect, "segments must be contiguous from row 0");
        assert!(hi >= lo);
        expect = hi;
    }
    assert_eq!(expect, n_rows, "segments must cover every row");
    Ok(())
}

#[derive(Debug, Clone)]
struct Param<F> {
    value: Array2<F>,
    trainable: bool,
}

/// Named parameters in insertion order. Ordering matters: optimizer state,
/// checkpoints, and gradient maps all follow it.
#[derive(Debug, Clone)]
pub struct ParamStore<F: Scalar> {
    params: IndexMap<String, Param<F>>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            params: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Array2<F>, trainable: bool) {
        assert!(
            self.params
                .insert(name.to_string(), Param { value, trainable })
                .is_none(),
            "duplicate parameter '{name}'"
        );
    }

    pub fn get(&self, name: &str) -> &Array2<F> {
        &self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
            .value
    }

    pub fn set(&mut self, name: &str, value: Array2<F>) {
        let p = self
            .params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"));
        assert_eq!(p.value.dim(), value.dim());
        p.value = value;
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.params[name].trainable
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) {
        self.params[name].trainable = trainable;
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<F>)> {
        self.params.iter().map(|(k, p)| (k.as_str(), &p.value))
    }

    pub fn n_values(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        let params = self
            .params
            .iter()
            .map(|(k, p)| {
                (
                    k.clone(),
                    Param {
                        value: p.value.mapv(|v| T::c(v.to_f64().unwrap())),
                        trainable: p.trainable,
                    },
                )
            })
            .collect();
        ParamStore { params }
    }
}

/// Glorot uniform in ±sqrt(6/(fan_in+fan_out)), deterministic in rng.
pub fn glorot_uniform<F: Scalar>(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<F> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| {
        F::c((rng.random::<f64>() * 2.0 - 1.0) * limit)
    })
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW with decoupled weight decay: decay is applied to the weights
/// before the (bias-corrected) Adam update, never to the moments.
pub struct AdamW<F: Scalar> {
    pub config: AdamWConfig,
    t: u64,
    m: IndexMap<String, Array2<F>>,
    v: IndexMap<String, Array2<F>>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            t: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn step(
        &mut self,
        store: &mut ParamStore<F>,
        grads: &IndexMap<String, Array2<F>>,
    ) -> Result<(), TensorError> {
        for (name, g) in grads {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::NonFiniteGradient { name: name.clone() });
            }
        }
        self.t += 1;
        let c = &self.config;
        let lr = F::c(c.lr);
        let b1 = F::c(c.beta1);
        let b2 = F::c(c.beta2);
        let eps = F::c(c.eps);
        let bc1 = F::c(1.0 - c.beta1.powi(self.t as i32));
        let bc2 = F::c(1.0 - c.beta2.powi(self.t as i32));
        let decay = F::c(1.0 - c.lr * c.weight_decay);
        for (name, g) in grads {
            if !store.is_trainable(name) {
                continue;
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.dim()));
            ndarray::Zip::from(&mut *m).and(g).for_each(|mi, &gi| {
                *mi = b1 * *mi + (F::one() - b1) * gi;
            });
            ndarray::Zip::from(&mut *v).and(g).for_each(|vi, &gi| {
                *vi = b2 * *vi + (F::one() - b2) * gi * gi;
            });
            let p = store.params.get_mut(name).expect("graded param exists");
            ndarray::Zip::from(&mut p.value)
                .and(&*m)
                .and(&*v)
                .for_each(|w, &mi, &vi| {
                    let decayed = *w * decay;
                    let m_hat = mi / bc1;
                    let v_hat = vi / bc2;
                    *w = decayed - lr * m_hat / (v_hat.sqrt() + eps);
                });
            debug_assert!(
                p.value.iter().all(|v| v.is_finite()),
                "non-finite parameter '{name}' after optimizer step"
            );
        }
        Ok(())
    }
}

/// Max over coordinates of |analytic - central difference| / max(1,
/// |analytic|) for a scalar-valued function of one tensor, in f64.
pub fn grad_check<Build>(mut build: Build, x: &Array2<f64>, h: f64) -> f64
where
    Build: FnMut(&mut Tape<f64>, NodeId) -> NodeId,
{
    let eval = |xv: &Array2<f64>, build: &mut Build| -> f64 {
        let mut tape = Tape::new();
        let xid = tape.leaf(xv.clone());
        let out = build(&mut tape, xid);
        assert_eq!(tape.shape(out), (1, 1), "grad_check needs a scalar output");
        tape.value(out)[[0, 0]]
    };
    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone());
    let out = build(&mut tape, xid);
    tape.backward(out);
    let analytic = tape
        .grad(xid)
        .cloned()
        .unwrap_or_else(|| Array2::zeros(x.dim()));

    let mut worst = 0.0f64;
    let mut xp = x.clone();
    for idx in ndarray::indices(x.dim()) {
        let orig = xp[idx];
        xp[idx] = orig + h;
        let fp = eval(&xp, &mut build);
        xp[idx] = orig - h;
        let fm = eval(&xp, &mut build);
        xp[idx] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic[idx];
        let err = (a - numeric).abs() / a.abs().max(1.0);
        if err > worst {
            worst = err;
        }
    }
    worst
}

/// Like grad_check, but over every trainable parameter of a store: analytic
/// parameter gradients from one backward pass versus central differences of
/// the rebuilt forward. The builder must be deterministic.
pub fn grad_check_params<Build>(mut build: Build, store: &ParamStore<f64>, h: f64) -> f64
where
    Build: FnMut(&mut Tape<f64>, &ParamStore<f64>) -> NodeId,
{
    let eval = |s: &ParamStore<f64>, build: &mut Build| -> f64 {
        let mut tape = Tape::new();
        let out = build(&mut tape, s);
        tape.value(out)[[0, 0]]
    };
    let mut tape = Tape::new();
    let out = build(&mut tape, store);
    assert_eq!(tape.shape(out), (1, 1));
    tape.backward(out);
    let grads = tape.param_grads();

    let mut worst = 0.0f64;
    let names: Vec<String> = store
        .names()
        .filter(|n| store.is_trainable(n))
        .map(|s| s.to_string())
        .collect();
    for name in names {
        let analytic = match grads.get(&name) {
            Some(g) => g.clone(),
            None => continue,
        };
        let base = store.get(&name).clone();
        let mut perturbed = store.clone();
        for idx in ndarray::indices(base.dim()) {
            let orig = base[idx];
            let mut v = base.clone();
            v[idx] = orig + h;
            perturbed.set(&name, v.clone());
            let fp = eval(&perturbed, &mut build);
            v[idx] = orig - h;
            perturbed.set(&name, v);
            let fm = eval(&perturbed, &mut build);
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[idx];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            if err > worst {
                worst = err;
            }
        }
        perturbed.set(&name, base);
    }
    worst
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not a checkpoint file (bad magic)")]
    BadMagic { path: String },
    #[error("{path}: unsupported checkpoint version {version}")]
    BadVersion { path: String, version: u32 },
    #[error("{path}: malformed checkpoint: {what}")]
    Malformed { path: String, what: String },
}

/// Write magic, version, a length-prefixed JSON config block, then each
/// parameter as (u32 name_len, name, u32 rows, u32 cols, f32 LE data).
pub fn save_checkpoint(
    path: &Path,
    config_json: &str,
    store: &ParamStore<f32>,
) -> Result<(), CheckpointError> {
    let display = path.display().to_string();
    let io = |source| CheckpointError::Io {
        path: display.clone(),
        source,
    };
    let file = std::fs::File::create(path).map_err(io)?;
    let mut w = BufWriter::new(file);
    w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
    w.write_u32::<LittleEndian>(CHECKPOINT_VERSION).map_err(io)?;
    w.write_u32::<LittleEndian>(config_json.len() as u32)
        .map_err(io)?;
    w.write_all(config_json.as_bytes()).map_err(io)?;
    for (name, value) in store.iter() {
        w.write_u32::<LittleEndian>(name.len() as u32).map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        w.write_u32::<LittleEndian>(value.nrows() as u32)
            .map_err(io)?;
        w.write_u32::<LittleEndian>(value.ncols() as u32)
            .map_err(io)?;
        for &v in value.iter() {
            w.write_f32::<LittleEndian>(v).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Read back (config_json, params). Every parameter loads as trainable;
/// the owning model re-marks its non-trainable entries by name.
pub fn load_checkpoint(path: &Path) -> Result<(String, ParamStore<f32>), CheckpointError> {
    let display = path.display().to_string();
    let io = |source| CheckpointError::Io {
        path: display.clone(),
        source,
    };
    let file = std::fs::File::open(path).map_err(io)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic { path: display });
    }
    let version = r.read_u32::<LittleEndian>().map_err(io)?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::BadVersion {
            path: display,
            version,
        });
    }
    let config_len = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    let mut config = vec![0u8; config_len];
    r.read_exact(&mut config).map_err(io)?;
    let config = String::from_utf8(config).map_err(|_| CheckpointError::Malformed {
        path: display.clone(),
        what: "config block is not UTF-8".into(),
    })?;
    let mut store = ParamStore::new();
    loop {
        let name_len = match r.read_u32::<LittleEndian>() {
            Ok(n) => n as usize,
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(io(e)),
        };
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(io)?;
        let name = String::from_utf8(name).map_err(|_| CheckpointError::Malformed {
            path: display.clone(),
            what: "parameter name is not UTF-8".into(),
        })?;
        let rows = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let cols = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let mut data = vec![0f32; rows * cols];
        for v in &mut data {
            *v = r.read_f32::<LittleEndian>().map_err(io)?;
        }
        let value = Array2::from_shape_vec((rows, cols), data).unwrap();
        store.insert(&name, value, true);
    }
    Ok((config, store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_array(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut r = rng(seed);
        Array2::from_shape_fn((rows, cols), |_| r.random::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn mse_examples() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(array![[1.0, 2.0]]);
        let same = t.constant(array![[1.0, 2.0]]);
        let l0 = t.mse_loss(a, same).unwrap();
        assert_eq!(t.value(l0)[[0, 0]], 0.0);

        let p = t.leaf(array![[1.0, 1.0]]);
        let q = t.constant(array![[0.0, 0.0]]);
        let l1 = t.mse_loss(p, q).unwrap();
        assert_eq!(t.value(l1)[[0, 0]], 1.0);

        let p = t.leaf(array![[1.0, 2.0]]);
        let q = t.constant(array![[0.0, 4.0]]);
        let l2 = t.mse_loss(p, q).unwrap();
        assert_eq!(t.value(l2)[[0, 0]], 2.5);

        let bad = t.constant(array![[0.0], [1.0]]);
        assert!(matches!(
            t.mse_loss(p, bad),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn segment_softmax_examples() {
        let mut t = Tape::<f64>::new();
        let one = t.leaf(array![[3.7]]);
        let y = t.segment_softmax(one, &vec![(0, 1)]).unwrap();
        assert_abs_diff_eq!(t.value(y)[[0, 0]], 1.0, epsilon = 1e-12);

        let pair = t.leaf(array![[0.0], [0.0]]);
        let y = t.segment_softmax(pair, &vec![(0, 2)]).unwrap();
        assert_abs_diff_eq!(t.value(y)[[0, 0]], 0.5, epsilon = 1e-12);

        let logs = t.leaf(array![[0.0], [3.0f64.ln()]]);
        let y = t.segment_softmax(logs, &vec![(0, 2)]).unwrap();
        assert_abs_diff_eq!(t.value(y)[[0, 0]], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(t.value(y)[[1, 0]], 0.75, epsilon = 1e-12);

        let x = t.leaf(array![[1.0], [2.0]]);
        assert!(matches!(
            t.segment_softmax(x, &vec![(0, 0), (0, 2)]),
            Err(TensorError::EmptySegment { index: 0 })
        ));
    }

    #[test]
    fn segment_softmax_sums_to_one_per_segment_and_head() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(rand_array(7, 3, 5));
        let segs = vec![(0, 2), (2, 5), (5, 7)];
        let y = t.segment_softmax(x, &segs).unwrap();
        for &(lo, hi) in &segs {
            for col in 0..3 {
                let s: f64 = (lo..hi).map(|r| t.value(y)[[r, col]]).sum();
                assert_abs_diff_eq!(s, 1.0, epsilon = 1e-6);
                assert!((lo..hi).all(|r| t.value(y)[[r, col]] > 0.0));
            }
        }
    }

    #[test]
    fn adamw_examples() {
        // zero grad, zero decay: unchanged
        let mut store = ParamStore::<f64>::new();
        store.insert("w", array![[1.0]], true);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        });
        let grads: IndexMap<String, Array2<f64>> =
            [("w".to_string(), array![[0.0]])].into_iter().collect();
        opt.step(&mut store, &grads).unwrap();
        assert_eq!(store.get("w")[[0, 0]], 1.0);

        // single step with g=0.5: update magnitude ~ lr
        let mut store = ParamStore::<f64>::new();
        store.insert("w", array![[1.0]], true);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        });
        let grads: IndexMap<String, Array2<f64>> =
            [("w".to_string(), array![[0.5]])].into_iter().collect();
        opt.step(&mut store, &grads).unwrap();
        assert_abs_diff_eq!(store.get("w")[[0, 0]], 0.999, epsilon = 1e-6);

        // pure decay
        let mut store = ParamStore::<f64>::new();
        store.insert("w", array![[2.0]], true);
        let mut opt = AdamW::new(AdamWConfig::default());
        let grads: IndexMap<String, Array2<f64>> =
            [("w".to_string(), array![[0.0]])].into_iter().collect();
        opt.step(&mut store, &grads).unwrap();
        assert_abs_diff_eq!(store.get("w")[[0, 0]], 2.0 * (1.0 - 0.001 * 0.01), epsilon = 1e-12);

        // lr = 0 is the identity
        let mut store = ParamStore::<f64>::new();
        store.insert("w", array![[3.0, -1.5]], true);
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.0,
            ..AdamWConfig::default()
        });
        let grads: IndexMap<String, Array2<f64>> = [("w".to_string(), array![[0.7, 0.2]])]
            .into_iter()
            .collect();
        opt.step(&mut store, &grads).unwrap();
        assert_eq!(store.get("w"), &array![[3.0, -1.5]]);

        // non-finite gradient is refused
        let grads: IndexMap<String, Array2<f64>> = [("w".to_string(), array![[f64::NAN, 0.0]])]
            .into_iter()
            .collect();
        assert!(matches!(
            opt.step(&mut store, &grads),
            Err(TensorError::NonFiniteGradient { .. })
        ));
    }

    #[test]
    fn quadratic_grad_check_is_tight() {
        let x = rand_array(3, 4, 11);
        let err = grad_check(
            |t, x| {
                let sq = t.mul(x, x);
                let zeros = t.constant(Array2::zeros((3, 4)));
                let half = t.mse_loss(sq, zeros).unwrap();
                // mse(x^2, 0) = mean(x^4); still a smooth polynomial
                half
            },
            &x,
            1e-4,
        );
        assert!(err < 1e-8, "quadratic check err = {err}");
    }

    #[test]
    fn primitive_grad_checks() {
        let h = 1e-4;
        let tol = 1e-3;

        // matmul then mse against a fixed target
        let x = rand_array(4, 3, 21);
        let w = rand_array(3, 5, 22);
        let target = rand_array(4, 5, 23);
        let err = grad_check(
            |t, xid| {
                let wid = t.constant(w.clone());
                let y = t.matmul(xid, wid);
                let tid = t.constant(target.clone());
                t.mse_loss(y, tid).unwrap()
            },
            &x,
            h,
        );
        assert!(err < tol, "matmul err {err}");

        // bias add
        let b = rand_array(1, 3, 31);
        let err = grad_check(
            |t, xid| {
                let bid = t.leaf(b.clone());
                let y = t.add_bias(xid, bid);
                let tid = t.constant(Array2::zeros((4, 3)));
                t.mse_loss(y, tid).unwrap()
            },
            &x,
            h,
        );
        assert!(err < tol, "add_bias err {err}");

        // elementwise add and mul
        let other = rand_array(4, 3, 32);
        let err = grad_check(
            |t, xid| {
                let o = t.constant(other.clone());
                let s = t.add(xid, o);
                let m = t.mul(s, xid);
                let tid = t.constant(Array2::zeros((4, 3)));
                t.mse_loss(m, tid).unwrap()
            },
            &x,
            h,
        );
        assert!(err < tol, "add/mul err {err}");

        // scale
        let err = grad_check(
            |t, xid| {
                let y = t.scale(xid, -2.5);
                let tid = t.constant(Array2::zeros((4, 3)));
                t.mse_loss(y, tid).unwrap()
            },
            &x,
            h,
        );
        assert!(err < tol, "scale err {err}");

        // concat_cols
        let err = grad_check(
            |t, xid| {
                let o = t.constant(other.clone());
                let c = t.concat_cols(&[xid, o, xid]);
                let tid = t.constant(Array2::zeros((4, 9)));
                t.mse_loss(c, tid).unwrap()
            },
            &x,
            h,
        );
        assert!(err < tol, "concat err {err}");

        // gather and scatter with duplicates
        let err = grad_check(
            |t, xid| {
                let g = t.gather_rows(xid, &[0, 2, 2, 3, 1]);
                let s = t.scatter_rows(g, &[1, 0, 0, 2, 5], 6);
                let tid = t.constant(Array2::zeros((6, 3)));
                t.mse_loss(s, tid).unwrap()
            },
            &x,
            h,
        );
        assert!(err < tol, "gather/scatter err {err}");

        // leaky relu and relu, inputs kept away from the kink
        let off = x.mapv(|v| v + if v >= 0.0 { 0.3 } else { -0.3 });
        let err = grad_check(
            |t, xid| {
                let l = t.leaky_relu(xid, 0.2);
                let r = t.relu(l);
                let tid = t.constant(Array2::ones((4, 3)));
                t.mse_loss(r, tid).unwrap()
            },
            &off,
            h,
        );
        assert!(err < tol, "leaky/relu err {err}");

        // mean_rows and segment_mean (one empty segment allowed)
        let err = grad_check(
            |t, xid| {
                let m = t.mean_rows(xid);
                let sm = t.segment_mean(xid, &vec![(0, 2), (2, 2), (2, 4)]);
                let c = t.concat_cols(&[m]);
                let tid = t.constant(Array2::zeros((1, 3)));
                let l1 = t.mse_loss(c, tid).unwrap();
                let tid2 = t.constant(Array2::zeros((3, 3)));
                let l2 = t.mse_loss(sm, tid2).unwrap();
                let both = t.add(l1, l2);
                both
            },
            &x,
            h,
        );
        assert!(err < tol, "mean err {err}");

        // heads_dot
        let xe = rand_array(5, 6, 41);
        let a = rand_array(1, 6, 42);
        let err = grad_check(
            |t, xid| {
                let aid = t.leaf(a.clone());
                let s = t.heads_dot(xid, aid, 2);
                let tid = t.constant(Array2::zeros((5, 2)));
                t.mse_loss(s, tid).unwrap()
            },
            &xe,
            h,
        );
        assert!(err < tol, "heads_dot err {err}");
    }

    #[test]
    fn segment_attention_grad_checks() {
        let h = 1e-4;
        let tol = 1e-3;
        // 5-edge toy: two destinations with 2 and 3 in-edges
        let segs = vec![(0usize, 2usize), (2, 5)];
        let scores = rand_array(5, 2, 51);
        let msgs = rand_array(5, 4, 52);

        let err = grad_check(
            |t, sid| {
                let alpha = t.segment_softmax(sid, &segs).unwrap();
                let m = t.constant(msgs.clone());
                let agg = t.segment_weighted_sum(alpha, m, &segs, 2);
                let tid = t.constant(Array2::zeros((2, 4)));
                t.mse_loss(agg, tid).unwrap()
            },
            &scores,
            h,
        );
        assert!(err < tol, "softmax/weighted-sum score-path err {err}");

        let err = grad_check(
            |t, mid| {
                let s = t.constant(scores.clone());
                let alpha = t.segment_softmax(s, &segs).unwrap();
                let agg = t.segment_weighted_sum(alpha, mid, &segs, 2);
                let tid = t.constant(Array2::zeros((2, 4)));
                t.mse_loss(agg, tid).unwrap()
            },
            &msgs,
            h,
        );
        assert!(err < tol, "weighted-sum message-path err {err}");
    }

    #[test]
    fn batch_norm_grad_checks_and_statistics() {
        let h = 1e-4;
        let tol = 1e-3;
        let x = rand_array(8, 3, 61).mapv(|v| v * 2.0 + 0.5);
        let gamma = rand_array(1, 3, 62).mapv(|v| v + 1.5);
        let beta = rand_array(1, 3, 63);

        let err = grad_check(
            |t, xid| {
                let g = t.leaf(gamma.clone());
                let b = t.leaf(beta.clone());
                let (y, _) = t.batch_norm_train(xid, g, b, 1e-5);
                let tid = t.constant(Array2::zeros((8, 3)));
                t.mse_loss(y, tid).unwrap()
            },
            &x,
            h,
        );
        assert!(err < tol, "batch_norm train err {err}");

        let rm = Array1::from_vec(vec![0.1, -0.2, 0.3]);
        let rv = Array1::from_vec(vec![1.5, 0.7, 2.0]);
        let err = grad_check(
            |t, xid| {
                let g = t.leaf(gamma.clone());
                let b = t.leaf(beta.clone());
                let y = t.batch_norm_eval(xid, g, b, &rm, &rv, 1e-5);
                let tid = t.constant(Array2::zeros((8, 3)));
                t.mse_loss(y, tid).unwrap()
            },
            &x,
            h,
        );
        assert!(err < tol, "batch_norm eval err {err}");

        // train mode normalizes each feature
        let mut t = Tape::<f64>::new();
        let xid = t.leaf(x.clone());
        let ones = t.constant(Array2::ones((1, 3)));
        let zeros = t.constant(Array2::zeros((1, 3)));
        let (y, stats) = t.batch_norm_train(xid, ones, zeros, 1e-5);
        let yv = t.value(y);
        for j in 0..3 {
            let mean: f64 = (0..8).map(|r| yv[[r, j]]).sum::<f64>() / 8.0;
            let var: f64 = (0..8).map(|r| (yv[[r, j]] - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-5, "column mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "column var {var}");
        }
        assert_eq!(stats.mean.len(), 3);
    }

    #[test]
    fn dropout_mask_scales_and_zero_rate_is_identity() {
        let x = rand_array(10, 4, 71);
        let mut t = Tape::<f64>::new();
        let xid = t.leaf(x.clone());
        let same = t.dropout(xid, 0.0, &mut rng(1));
        assert_eq!(same, xid);

        let y = t.dropout(xid, 0.5, &mut rng(2));
        let yv = t.value(y);
        for (yi, xi) in yv.iter().zip(x.iter()) {
            assert!(*yi == 0.0 || (*yi - xi * 2.0).abs() < 1e-12);
        }

        // gradients flow only through kept entries
        let err = grad_check(
            |t, xid| {
                let d = t.dropout(xid, 0.3, &mut rng(7));
                let tid = t.constant(Array2::zeros((10, 4)));
                t.mse_loss(d, tid).unwrap()
            },
            &x,
            1e-4,
        );
        assert!(err < 1e-3, "dropout err {err}");
    }

    #[test]
    fn shared_parameter_gradients_accumulate() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", array![[2.0]], true);
        let mut t = Tape::new();
        let w1 = t.param(&store, "w");
        let w2 = t.param(&store, "w");
        assert_eq!(w1, w2);
        let y = t.mul(w1, w2); // w^2
        let zero = t.constant(array![[0.0]]);
        let loss = t.mse_loss(y, zero).unwrap(); // w^4
        t.backward(loss);
        // d/dw w^4 = 4 w^3 = 32
        assert_abs_diff_eq!(t.param_grads()["w"][[0, 0]], 32.0, epsilon = 1e-9);
    }

    #[test]
    fn glorot_respects_bounds_and_is_seeded() {
        let a: Array2<f32> = glorot_uniform(20, 30, &mut rng(9));
        let b: Array2<f32> = glorot_uniform(20, 30, &mut rng(9));
        assert_eq!(a, b);
        let limit = (6.0f32 / 50.0).sqrt();
        assert!(a.iter().all(|v| v.abs() <= limit));
        assert!(a.iter().any(|v| v.abs() > limit * 0.5));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut store = ParamStore::<f32>::new();
        store.insert("enc.w", array![[1.0, 2.0], [3.0, 4.0]], true);
        store.insert("enc.b", array![[0.5, -0.5]], true);
        store.insert("bn.running_mean", array![[0.0, 0.1]], false);
        save_checkpoint(&path, "{\"kind\":\"test\"}", &store).unwrap();
        let (config, loaded) = load_checkpoint(&path).unwrap();
        assert_eq!(config, "{\"kind\":\"test\"}");
        let names: Vec<&str> = loaded.names().collect();
        assert_eq!(names, vec!["enc.w", "enc.b", "bn.running_mean"]);
        for (name, value) in store.iter() {
            assert_eq!(loaded.get(name), value);
        }
        assert!(matches!(
            load_checkpoint(&dir.path().join("missing.ckpt")),
            Err(CheckpointError::Io { .. })
        ));
        std::fs::write(dir.path().join("junk.ckpt"), b"NOPE").unwrap();
        assert!(matches!(
            load_checkpoint(&dir.path().join("junk.ckpt")),
            Err(CheckpointError::BadMagic { .. })
        ));
    }
}
