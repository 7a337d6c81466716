//! Residual tanh MLP with stochastic depth.
//!
//! The network is `embed -> num_blocks x residual block -> linear head`:
//!
//! ```text
//! h_0     = tanh(W_e x + b_e)
//! h_{l+1} = h_l + s_l * tanh(W_l h_l + b_l)
//! logits  = W_h h_L + b_h
//! ```
//!
//! In eval mode `s_l = 1`. In train mode each block of each example is kept
//! with probability `1 - p` and then scaled by `1 / (1 - p)`, or dropped
//! (`s_l = 0`). The keep/drop draw is a pure function of the mode seed, the
//! example id and the block index, so the same example gets the same mask no
//! matter which worker processes it.
//!
//! Gradients are computed per example and summed in fixed point (see
//! [`crate::exact`]); a batch gradient therefore equals the merged per-example
//! payloads exactly.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::exact::FixedVec;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_blocks: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub drop_prob: f64,
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.num_blocks == 0 || self.num_classes == 0
        {
            return Err(Error::InvalidConfig(format!(
                "network dimensions must be >= 1, got {self:?}"
            )));
        }
        if !(0.0..1.0).contains(&self.drop_prob) {
            return Err(Error::InvalidConfig(format!(
                "drop_prob must lie in [0, 1), got {}",
                self.drop_prob
            )));
        }
        Ok(())
    }

    pub fn shape(&self) -> NetworkShape {
        NetworkShape {
            input_dim: self.input_dim,
            hidden_dim: self.hidden_dim,
            num_blocks: self.num_blocks,
            num_classes: self.num_classes,
        }
    }

    pub fn param_count(&self) -> usize {
        self.shape().param_count()
    }

    pub fn layout(&self) -> Layout {
        Layout::for_network(self.shape())
    }
}

/// The dimensions that determine a parameter layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NetworkShape {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_blocks: usize,
    pub num_classes: usize,
}

impl NetworkShape {
    pub fn param_count(&self) -> usize {
        let h = self.hidden_dim;
        h * self.input_dim + h + self.num_blocks * (h * h + h) + self.num_classes * h + self.num_classes
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Named segments of a flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub shape: Option<NetworkShape>,
    pub segments: Vec<Segment>,
}

impl Layout {
    /// A single unnamed segment, for plain vectors.
    pub fn flat(len: usize) -> Self {
        Self {
            shape: None,
            segments: vec![Segment {
                name: "values".into(),
                offset: 0,
                rows: 1,
                cols: len,
            }],
        }
    }

    pub fn for_network(shape: NetworkShape) -> Self {
        let mut segments = Vec::with_capacity(4 + 2 * shape.num_blocks);
        let mut offset = 0;
        let mut push = |name: String, rows: usize, cols: usize| {
            segments.push(Segment {
                name,
                offset,
                rows,
                cols,
            });
            offset += rows * cols;
        };
        let h = shape.hidden_dim;
        push("embed.weight".into(), h, shape.input_dim);
        push("embed.bias".into(), 1, h);
        for l in 0..shape.num_blocks {
            push(format!("block{l}.weight"), h, h);
            push(format!("block{l}.bias"), 1, h);
        }
        push("head.weight".into(), shape.num_classes, h);
        push("head.bias".into(), 1, shape.num_classes);
        Self {
            shape: Some(shape),
            segments,
        }
    }

    pub fn len(&self) -> usize {
        self.segments.iter().map(Segment::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    /// Coordinate range of the classifier head (weight then bias).
    pub fn head_range(&self) -> Option<std::ops::Range<usize>> {
        let w = self.segment("head.weight")?;
        let b = self.segment("head.bias")?;
        Some(w.offset..b.offset + b.len())
    }
}

/// Flat model parameters with their layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    layout: Arc<Layout>,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn new(layout: Arc<Layout>, values: Vec<f64>) -> Result<Self> {
        if layout.len() != values.len() {
            return Err(Error::LayoutMismatch(format!(
                "layout expects {} values, got {}",
                layout.len(),
                values.len()
            )));
        }
        Ok(Self { layout, values })
    }

    /// A vector with a single flat segment.
    pub fn from_values(values: Vec<f64>) -> Self {
        Self {
            layout: Arc::new(Layout::flat(values.len())),
            values,
        }
    }

    pub fn zeros_like(other: &ParamVector) -> Self {
        Self {
            layout: other.layout.clone(),
            values: vec![0.0; other.values.len()],
        }
    }

    /// Same layout, new values. Panics if the length differs.
    pub fn with_values(&self, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), self.values.len(), "value count must match layout");
        Self {
            layout: self.layout.clone(),
            values,
        }
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        self.layout.segment(name).map(|s| &self.values[s.range()])
    }

    pub fn shape(&self) -> Result<NetworkShape> {
        self.layout
            .shape
            .ok_or_else(|| Error::LayoutMismatch("parameter vector has no network layout".into()))
    }

    pub fn check_same_layout(&self, other: &ParamVector) -> Result<()> {
        if self.layout != other.layout {
            return Err(Error::LayoutMismatch(format!(
                "{} values vs {} values with different segments",
                self.len(),
                other.len()
            )));
        }
        Ok(())
    }

    /// First non-finite coordinate, if any.
    pub fn first_non_finite(&self) -> Option<(usize, f64)> {
        self.values
            .iter()
            .copied()
            .enumerate()
            .find(|(_, v)| !v.is_finite())
    }

    /// Euclidean distance to another vector.
    pub fn distance(&self, other: &ParamVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// Bitwise digest of the values, for cheap trajectory comparisons.
    pub fn digest(&self) -> u64 {
        // FNV-1a over the raw bits
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in &self.values {
            for byte in v.to_bits().to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

/// Row-major matrix of reals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::DimensionMismatch(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::DimensionMismatch("ragged rows".into()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }
}

/// Network outputs: one row of class scores per example.
pub type Logits = Matrix;

/// Numerically stable softmax of one row.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `log(sum(exp(row)))`.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln()
}

/// Row-wise softmax of a logit matrix.
pub fn probabilities(logits: &Logits) -> Matrix {
    let mut out = Matrix::zeros(logits.rows, logits.cols);
    for i in 0..logits.rows {
        out.row_mut(i).copy_from_slice(&softmax(logits.row(i)));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum Mode {
    Eval,
    Train { drop_prob: f64, seed: u64 },
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Deterministic hash of a tuple of integers, used to derive sub-seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x6a09_e667_f3bc_c909, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Residual scale for block `block` of example `id`.
pub fn block_scale(mode: &Mode, id: u64, block: usize) -> f64 {
    match *mode {
        Mode::Eval => 1.0,
        Mode::Train { drop_prob: 0.0, .. } => 1.0,
        Mode::Train { drop_prob, seed } => {
            let bits = mix_seed(&[seed, id, block as u64]);
            let u = (bits >> 11) as f64 / (1u64 << 53) as f64;
            if u < drop_prob {
                0.0
            } else {
                1.0 / (1.0 - drop_prob)
            }
        }
    }
}

/// Parameter initialization.
///
/// Weights are Gaussian with variance `1 / fan_in`; biases start at zero.
/// With `zero_head` the classifier head is all zeros, as for a freshly added
/// head.
pub fn init_params(config: &NetworkConfig, seed: u64, zero_head: bool) -> Result<ParamVector> {
    config.validate()?;
    let layout = Arc::new(config.layout());
    let mut values = vec![0.0; layout.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for seg in &layout.segments {
        if seg.rows == 1 && seg.name.ends_with(".bias") {
            continue;
        }
        if zero_head && seg.name.starts_with("head.") {
            continue;
        }
        let std = (1.0 / seg.cols as f64).sqrt();
        for v in &mut values[seg.range()] {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = std * z;
        }
    }
    ParamVector::new(layout, values)
}

struct Offsets {
    embed_w: usize,
    embed_b: usize,
    blocks: Vec<(usize, usize)>,
    head_w: usize,
    head_b: usize,
}

impl Offsets {
    fn new(shape: &NetworkShape) -> Self {
        let h = shape.hidden_dim;
        let embed_w = 0;
        let embed_b = h * shape.input_dim;
        let mut off = embed_b + h;
        let mut blocks = Vec::with_capacity(shape.num_blocks);
        for _ in 0..shape.num_blocks {
            blocks.push((off, off + h * h));
            off += h * h + h;
        }
        Self {
            embed_w,
            embed_b,
            blocks,
            head_w: off,
            head_b: off + shape.num_classes * h,
        }
    }
}

/// `out = W x + b` with `W` stored row-major as `out.len() x x.len()`.
#[inline]
fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let n = x.len();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &w[i * n..(i + 1) * n];
        let mut acc = b[i];
        for (wij, xj) in row.iter().zip(x) {
            acc += wij * xj;
        }
        *o = acc;
    }
}

/// `out += W^T d`.
#[inline]
fn affine_transpose_acc(w: &[f64], d: &[f64], out: &mut [f64]) {
    let n = out.len();
    for (i, &di) in d.iter().enumerate() {
        if di == 0.0 {
            continue;
        }
        let row = &w[i * n..(i + 1) * n];
        for (o, wij) in out.iter_mut().zip(row) {
            *o += wij * di;
        }
    }
}

/// Activations of one example, kept for the backward pass.
struct Trace {
    /// Block inputs `h_0 .. h_{L-1}` followed by the final hidden state.
    hidden: Vec<Vec<f64>>,
    /// `tanh` outputs of each block.
    block_out: Vec<Vec<f64>>,
    scales: Vec<f64>,
    logits: Vec<f64>,
}

struct Net<'a> {
    shape: NetworkShape,
    p: &'a [f64],
    off: Offsets,
}

impl<'a> Net<'a> {
    fn new(params: &'a ParamVector) -> Result<Self> {
        let shape = params.shape()?;
        Ok(Self {
            shape,
            p: params.values(),
            off: Offsets::new(&shape),
        })
    }

    fn check_inputs(&self, inputs: &Matrix) -> Result<()> {
        if inputs.cols != self.shape.input_dim {
            return Err(Error::DimensionMismatch(format!(
                "network expects input_dim {}, got {}",
                self.shape.input_dim, inputs.cols
            )));
        }
        Ok(())
    }

    fn forward_example(&self, x: &[f64], mode: &Mode, id: u64) -> Trace {
        let h = self.shape.hidden_dim;
        let c = self.shape.num_classes;
        let d = self.shape.input_dim;
        let mut h0 = vec![0.0; h];
        affine(
            &self.p[self.off.embed_w..self.off.embed_w + h * d],
            &self.p[self.off.embed_b..self.off.embed_b + h],
            x,
            &mut h0,
        );
        h0.iter_mut().for_each(|v| *v = v.tanh());

        let mut hidden = Vec::with_capacity(self.shape.num_blocks + 1);
        let mut block_out = Vec::with_capacity(self.shape.num_blocks);
        let mut scales = Vec::with_capacity(self.shape.num_blocks);
        hidden.push(h0);
        for (l, &(wo, bo)) in self.off.blocks.iter().enumerate() {
            let s = block_scale(mode, id, l);
            let cur = hidden.last().expect("nonempty");
            let mut u = vec![0.0; h];
            let mut next = cur.clone();
            if s != 0.0 {
                affine(&self.p[wo..wo + h * h], &self.p[bo..bo + h], cur, &mut u);
                u.iter_mut().for_each(|v| *v = v.tanh());
                for (n, ui) in next.iter_mut().zip(&u) {
                    *n += s * ui;
                }
            }
            scales.push(s);
            block_out.push(u);
            hidden.push(next);
        }
        let mut logits = vec![0.0; c];
        affine(
            &self.p[self.off.head_w..self.off.head_w + c * h],
            &self.p[self.off.head_b..self.off.head_b + c],
            hidden.last().expect("nonempty"),
            &mut logits,
        );
        Trace {
            hidden,
            block_out,
            scales,
            logits,
        }
    }

    /// Adds `d loss / d params` for one example to `acc`.
    fn backward_example(
        &self,
        x: &[f64],
        trace: &Trace,
        dlogits: &[f64],
        acc: &mut FixedVec,
    ) -> Result<()> {
        let h = self.shape.hidden_dim;
        let c = self.shape.num_classes;
        let d = self.shape.input_dim;
        let last = trace.hidden.last().expect("nonempty");

        for (i, &g) in dlogits.iter().enumerate() {
            acc.add_scaled(self.off.head_w + i * h, g, last)?;
        }
        acc.add_slice(self.off.head_b, dlogits)?;
        let mut dh = vec![0.0; h];
        affine_transpose_acc(&self.p[self.off.head_w..self.off.head_w + c * h], dlogits, &mut dh);

        for l in (0..self.shape.num_blocks).rev() {
            let s = trace.scales[l];
            if s == 0.0 {
                continue;
            }
            let (wo, bo) = self.off.blocks[l];
            let u = &trace.block_out[l];
            let dz: Vec<f64> = dh
                .iter()
                .zip(u)
                .map(|(g, ui)| s * g * (1.0 - ui * ui))
                .collect();
            let h_in = &trace.hidden[l];
            for (i, &g) in dz.iter().enumerate() {
                acc.add_scaled(wo + i * h, g, h_in)?;
            }
            acc.add_slice(bo, &dz)?;
            affine_transpose_acc(&self.p[wo..wo + h * h], &dz, &mut dh);
        }

        let h0 = &trace.hidden[0];
        let da: Vec<f64> = dh
            .iter()
            .zip(h0)
            .map(|(g, hi)| g * (1.0 - hi * hi))
            .collect();
        for (i, &g) in da.iter().enumerate() {
            acc.add_scaled(self.off.embed_w + i * d, g, x)?;
        }
        acc.add_slice(self.off.embed_b, &da)?;
        Ok(())
    }
}

/// Logits for every row of `inputs`; in train mode row `i` uses example id `i`.
pub fn forward(params: &ParamVector, inputs: &Matrix, mode: Mode) -> Result<Logits> {
    let ids: Vec<u64> = (0..inputs.rows as u64).collect();
    forward_with_ids(params, inputs, &ids, mode)
}

/// Logits for every row of `inputs`, with explicit example ids for the
/// stochastic-depth masks.
pub fn forward_with_ids(
    params: &ParamVector,
    inputs: &Matrix,
    ids: &[u64],
    mode: Mode,
) -> Result<Logits> {
    let net = Net::new(params)?;
    net.check_inputs(inputs)?;
    if ids.len() != inputs.rows {
        return Err(Error::DimensionMismatch(format!(
            "{} ids for {} rows",
            ids.len(),
            inputs.rows
        )));
    }
    let c = net.shape.num_classes;
    let mut data = Vec::with_capacity(inputs.rows * c);
    for (i, &id) in ids.iter().enumerate() {
        data.extend(net.forward_example(inputs.row(i), &mode, id).logits);
    }
    Matrix::new(inputs.rows, c, data)
}

fn check_label(label: usize, num_classes: usize) -> Result<()> {
    if label >= num_classes {
        return Err(Error::LabelOutOfRange { label, num_classes });
    }
    Ok(())
}

/// Mean negative log-likelihood of the labels under the row softmax.
pub fn cross_entropy(logits: &Logits, labels: &[usize]) -> Result<f64> {
    if logits.rows != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} logit rows for {} labels",
            logits.rows,
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Empty("cross entropy of an empty batch".into()));
    }
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        check_label(y, logits.cols)?;
        let row = logits.row(i);
        total += log_sum_exp(row) - row[y];
    }
    Ok(total / labels.len() as f64)
}

/// A per-example loss on the logits.
pub trait ExampleObjective: Sync {
    /// Loss of example `row` given its logits; writes `d loss / d logits`.
    fn eval(&self, row: usize, logits: &[f64], dlogits: &mut [f64]) -> Result<f64>;
}

/// Softmax cross-entropy against hard labels.
pub struct CrossEntropy<'a>(pub &'a [usize]);

impl ExampleObjective for CrossEntropy<'_> {
    fn eval(&self, row: usize, logits: &[f64], dlogits: &mut [f64]) -> Result<f64> {
        let y = self.0[row];
        check_label(y, logits.len())?;
        let p = softmax(logits);
        dlogits.copy_from_slice(&p);
        dlogits[y] -= 1.0;
        Ok(log_sum_exp(logits) - logits[y])
    }
}

/// Unnormalized loss and gradient sums over a set of examples.
///
/// This is what a worker contributes to a gradient all-reduce: merging
/// payloads and then calling [`GradPayload::finish`] gives the mean over all
/// contributing examples, independent of how they were split.
#[derive(Clone, Debug, PartialEq)]
pub struct GradPayload {
    pub loss_sum: FixedVec,
    pub grad_sum: FixedVec,
    pub count: u64,
    layout: Arc<Layout>,
}

impl GradPayload {
    pub fn empty(layout: Arc<Layout>) -> Self {
        Self {
            loss_sum: FixedVec::zeros(1),
            grad_sum: FixedVec::zeros(layout.len()),
            count: 0,
            layout,
        }
    }

    pub fn merge(&mut self, other: &GradPayload) -> Result<()> {
        if self.layout != other.layout {
            return Err(Error::LayoutMismatch("gradient payloads differ in layout".into()));
        }
        self.loss_sum.merge(&other.loss_sum)?;
        self.grad_sum.merge(&other.grad_sum)?;
        self.count += other.count;
        if self.count > crate::exact::MAX_PAYLOAD_TERMS {
            return Err(Error::InvalidConfig(format!(
                "a reduction may cover at most {} examples",
                crate::exact::MAX_PAYLOAD_TERMS
            )));
        }
        Ok(())
    }

    /// Merges payloads in the given order.
    pub fn reduce<'a>(payloads: impl IntoIterator<Item = &'a GradPayload>) -> Result<GradPayload> {
        let mut it = payloads.into_iter();
        let mut acc = it
            .next()
            .ok_or_else(|| Error::Empty("reduce of no payloads".into()))?
            .clone();
        for p in it {
            acc.merge(p)?;
        }
        Ok(acc)
    }

    /// Mean loss and mean gradient.
    pub fn finish(&self) -> Result<(f64, ParamVector)> {
        if self.count == 0 {
            return Err(Error::Empty("no examples in gradient payload".into()));
        }
        let loss = self.loss_sum.mean(self.count)[0];
        let grad = ParamVector::new(self.layout.clone(), self.grad_sum.mean(self.count))?;
        Ok((loss, grad))
    }
}

/// Loss and gradient sums of `objective` over the rows of `inputs`.
pub fn grad_payload(
    params: &ParamVector,
    inputs: &Matrix,
    ids: &[u64],
    mode: Mode,
    objective: &dyn ExampleObjective,
) -> Result<GradPayload> {
    let net = Net::new(params)?;
    net.check_inputs(inputs)?;
    if ids.len() != inputs.rows {
        return Err(Error::DimensionMismatch(format!(
            "{} ids for {} rows",
            ids.len(),
            inputs.rows
        )));
    }
    let mut payload = GradPayload::empty(params.layout().clone());
    let mut dlogits = vec![0.0; net.shape.num_classes];
    for (i, &id) in ids.iter().enumerate() {
        let x = inputs.row(i);
        let trace = net.forward_example(x, &mode, id);
        let loss = objective.eval(i, &trace.logits, &mut dlogits)?;
        payload.loss_sum.add(0, loss)?;
        net.backward_example(x, &trace, &dlogits, &mut payload.grad_sum)?;
    }
    payload.count = ids.len() as u64;
    Ok(payload)
}

/// Mean cross-entropy over the batch and its exact reverse-mode gradient.
pub fn loss_and_grad(params: &ParamVector, batch: &Batch, mode: Mode) -> Result<(f64, ParamVector)> {
    if batch.is_empty() {
        return Err(Error::Empty("loss_and_grad needs a nonempty batch".into()));
    }
    grad_payload(
        params,
        &batch.inputs,
        &batch.ids,
        mode,
        &CrossEntropy(&batch.labels),
    )?
    .finish()
}

/// Central differences `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)` for
/// every coordinate.
pub fn central_differences(
    x: &[f64],
    eps: f64,
    mut f: impl FnMut(&[f64]) -> f64,
) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + eps;
            let plus = f(&probe);
            probe[i] = orig - eps;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

/// Central-difference gradient of the mean batch cross-entropy. In train mode
/// the mask is pinned by the mode seed and the batch ids.
pub fn finite_difference_gradient(
    params: &ParamVector,
    batch: &Batch,
    mode: Mode,
    eps: f64,
) -> Result<ParamVector> {
    if eps <= 0.0 {
        return Err(Error::InvalidConfig(format!("eps must be positive, got {eps}")));
    }
    // validate once so the closure can unwrap
    cross_entropy(
        &forward_with_ids(params, &batch.inputs, &batch.ids, mode)?,
        &batch.labels,
    )?;
    let values = central_differences(params.values(), eps, |v| {
        let p = params.with_values(v.to_vec());
        let logits = forward_with_ids(&p, &batch.inputs, &batch.ids, mode).expect("validated");
        cross_entropy(&logits, &batch.labels).expect("validated")
    });
    Ok(params.with_values(values))
}
