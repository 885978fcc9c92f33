//! Conditional feed-forward networks with hand-written differentiation.
//!
//! Every network in the crate (teacher, student, auxiliary) is the same shape:
//! an MLP over the data vector whose hidden layers receive an additive
//! conditioning vector. The conditioning vector is the sum of one learned
//! embedding per scalar input (sinusoidal features followed by a two-layer
//! SiLU MLP) and a row of a per-class embedding table. The table carries one
//! extra row, the null class, used for unconditional queries.
//!
//! Differentiation comes in two flavours:
//!
//! * reverse mode with respect to the flat parameter vector
//!   ([`Network::backprop`], [`grad_params`]), and
//! * forward mode with respect to the inputs ([`Network::jvp`]), used for
//!   derivatives in a scalar condition such as the jump duration.
//!
//! Stop-gradient is structural: anything computed outside a call to
//! [`Network::backprop`] is a constant as far as the parameter gradient is
//! concerned.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

pub const DEFAULT_MAX_FREQUENCY: f64 = 16.0;

/// Named scalar inputs a network can be conditioned on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalarName {
    /// Interpolation time.
    T,
    /// Jump duration of a flow map.
    Delta,
    /// Guidance strength.
    Gamma,
}

impl ScalarName {
    pub fn as_str(self) -> &'static str {
        match self {
            ScalarName::T => "t",
            ScalarName::Delta => "delta",
            ScalarName::Gamma => "gamma",
        }
    }
}

impl fmt::Display for ScalarName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Silu,
}

/// Class condition; `Null` selects the reserved unconditional row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Class(usize),
    Null,
}

impl Label {
    pub fn class(self) -> Option<usize> {
        match self {
            Label::Class(c) => Some(c),
            Label::Null => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    #[serde(default)]
    pub activation: Activation,
    pub scalar_conditions: Vec<ScalarName>,
    pub class_count: usize,
    pub embed_dim: usize,
    /// Number of sinusoid frequencies per scalar (features = 2 * frequencies).
    pub frequencies: usize,
    /// Highest frequency; the others are spaced geometrically down to 1.
    #[serde(default = "default_max_frequency")]
    pub max_frequency: f64,
}

fn default_max_frequency() -> f64 {
    DEFAULT_MAX_FREQUENCY
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(config_err!("network dimensions must be positive"));
        }
        if self.output_dim != self.input_dim {
            return Err(config_err!(
                "output_dim {} must equal the data dimension {}",
                self.output_dim,
                self.input_dim
            ));
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return Err(config_err!("hidden_dims must be non-empty and positive"));
        }
        if !(self.max_frequency >= 1.0 && self.max_frequency.is_finite()) {
            return Err(config_err!("max_frequency must be at least 1"));
        }
        if self.embed_dim == 0 || self.frequencies == 0 {
            return Err(config_err!("embed_dim and frequencies must be positive"));
        }
        let mut seen = self.scalar_conditions.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.scalar_conditions.len() {
            return Err(config_err!("duplicate scalar condition"));
        }
        Ok(())
    }

    /// Same spec with a different list of scalar conditions.
    pub fn with_conditions(&self, conditions: &[ScalarName]) -> NetworkSpec {
        NetworkSpec {
            scalar_conditions: conditions.to_vec(),
            ..self.clone()
        }
    }
}

/// One tensor inside the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Slot {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl Slot {
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

/// Deterministic map from named tensors to offsets in the flat vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    slots: Vec<Slot>,
    total: usize,
}

impl ParamLayout {
    fn build(spec: &NetworkSpec) -> ParamLayout {
        let mut slots = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, rows: usize, cols: usize| {
            slots.push(Slot {
                name,
                rows,
                cols,
                offset,
            });
            offset += rows * cols;
        };
        let e = spec.embed_dim;
        let feats = 2 * spec.frequencies;
        for cond in &spec.scalar_conditions {
            push(format!("embed.{cond}.fc1.weight"), e, feats);
            push(format!("embed.{cond}.fc1.bias"), 1, e);
            push(format!("embed.{cond}.fc2.weight"), e, e);
            push(format!("embed.{cond}.fc2.bias"), 1, e);
        }
        push("class.table".into(), spec.class_count + 1, e);
        let mut fan_in = spec.input_dim;
        for (l, &width) in spec.hidden_dims.iter().enumerate() {
            push(format!("layer{l}.weight"), width, fan_in);
            push(format!("layer{l}.bias"), 1, width);
            push(format!("layer{l}.cond"), width, e);
            fan_in = width;
        }
        push("out.weight".into(), spec.output_dim, fan_in);
        push("out.bias".into(), 1, spec.output_dim);
        ParamLayout {
            slots,
            total: offset,
        }
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn find(&self, name: &str) -> Option<&Slot> {
        self.slots.iter().find(|s| s.name == name)
    }

    fn index(&self, name: &str) -> usize {
        self.slots
            .iter()
            .position(|s| s.name == name)
            .expect("layout slot is always present")
    }
}

/// Flat trainable parameters of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    pub values: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        ParamVector {
            values: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Little-endian f64 encoding.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() % 8 != 0 {
            return Err(config_err!("parameter byte length {} is not a multiple of 8", bytes.len()));
        }
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Ok(ParamVector { values })
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Per-sample conditioning of a batch: scalar inputs and class labels.
#[derive(Clone, Debug, Default)]
pub struct Conditioning {
    pub labels: Vec<Label>,
    pub scalars: BTreeMap<ScalarName, Array1<f64>>,
}

impl Conditioning {
    pub fn new(labels: Vec<Label>) -> Self {
        Conditioning {
            labels,
            scalars: BTreeMap::new(),
        }
    }

    pub fn with(mut self, name: ScalarName, values: Array1<f64>) -> Self {
        self.scalars.insert(name, values);
        self
    }

    pub fn with_const(self, name: ScalarName, value: f64) -> Self {
        let n = self.labels.len();
        self.with(name, Array1::from_elem(n, value))
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn scalar(&self, name: ScalarName) -> Option<&Array1<f64>> {
        self.scalars.get(&name)
    }

    /// Rows `idx` of this conditioning, in the given order.
    pub fn select(&self, idx: &[usize]) -> Conditioning {
        Conditioning {
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            scalars: self
                .scalars
                .iter()
                .map(|(k, v)| (*k, idx.iter().map(|&i| v[i]).collect()))
                .collect(),
        }
    }
}

/// Input tangent for forward-mode differentiation.
#[derive(Clone, Debug, Default)]
pub struct Tangent {
    pub x: Option<Array2<f64>>,
    pub scalars: BTreeMap<ScalarName, Array1<f64>>,
}

impl Tangent {
    pub fn scalar(name: ScalarName, batch: usize) -> Self {
        let mut scalars = BTreeMap::new();
        scalars.insert(name, Array1::ones(batch));
        Tangent { x: None, scalars }
    }
}

/// A batch of outputs with their directional derivatives.
#[derive(Clone, Debug)]
pub struct DualBatch {
    pub primal: Array2<f64>,
    pub tangent: Array2<f64>,
}

#[derive(Clone, Copy, Debug)]
struct EmbedSlots {
    fc1_w: usize,
    fc1_b: usize,
    fc2_w: usize,
    fc2_b: usize,
}

#[derive(Clone, Copy, Debug)]
struct LayerSlots {
    weight: usize,
    bias: usize,
    cond: usize,
}

/// Cached activations of one forward pass, consumed by [`Network::backprop`].
pub struct Trace {
    embeds: Vec<EmbedTrace>,
    cond: Array2<f64>,
    /// `acts[0]` is the input, `acts[l + 1]` the output of hidden layer `l`.
    acts: Vec<Array2<f64>>,
    pres: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

struct EmbedTrace {
    feats: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
}

/// A network architecture bound to its parameter layout.
#[derive(Clone, Debug)]
pub struct Network {
    spec: NetworkSpec,
    layout: ParamLayout,
    freqs: Vec<f64>,
    embeds: Vec<EmbedSlots>,
    layers: Vec<LayerSlots>,
    class_table: usize,
    out_w: usize,
    out_b: usize,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

impl Network {
    pub fn new(spec: NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let layout = ParamLayout::build(&spec);
        let k = spec.frequencies;
        let freqs = (0..k)
            .map(|i| {
                let frac = if k == 1 { 0.0 } else { i as f64 / (k - 1) as f64 };
                (frac * spec.max_frequency.ln()).exp()
            })
            .collect();
        let embeds = spec
            .scalar_conditions
            .iter()
            .map(|c| EmbedSlots {
                fc1_w: layout.index(&format!("embed.{c}.fc1.weight")),
                fc1_b: layout.index(&format!("embed.{c}.fc1.bias")),
                fc2_w: layout.index(&format!("embed.{c}.fc2.weight")),
                fc2_b: layout.index(&format!("embed.{c}.fc2.bias")),
            })
            .collect();
        let layers = (0..spec.hidden_dims.len())
            .map(|l| LayerSlots {
                weight: layout.index(&format!("layer{l}.weight")),
                bias: layout.index(&format!("layer{l}.bias")),
                cond: layout.index(&format!("layer{l}.cond")),
            })
            .collect();
        Ok(Network {
            class_table: layout.index("class.table"),
            out_w: layout.index("out.weight"),
            out_b: layout.index("out.bias"),
            spec,
            layout,
            freqs,
            embeds,
            layers,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn param_count(&self) -> usize {
        self.layout.len()
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases, N(0, 1)
    /// class embeddings.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        let mut values = vec![0.0; self.layout.len()];
        for slot in self.layout.slots() {
            let dst = &mut values[slot.range()];
            if slot.name == "class.table" {
                for v in dst.iter_mut() {
                    *v = rng.sample::<f64, _>(rand_distr::StandardNormal);
                }
                continue;
            }
            // Biases share the fan-in of their weight matrix.
            let fan_in = if slot.name.ends_with(".bias") {
                let weight = slot.name.trim_end_matches(".bias").to_string() + ".weight";
                self.layout.find(&weight).map_or(1, |w| w.cols)
            } else {
                slot.cols
            };
            let bound = 1.0 / (fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound);
            for v in dst.iter_mut() {
                *v = dist.sample(rng);
            }
        }
        ParamVector { values }
    }

    /// Parameters for this network seeded from another network's trained
    /// weights: tensors with matching name and shape are copied, the rest are
    /// freshly initialized, and the output projection of every scalar
    /// embedding the source lacks is zeroed so the new inputs start inert.
    pub fn transplant<R: Rng + ?Sized>(
        &self,
        source: &Network,
        source_params: &ParamVector,
        rng: &mut R,
    ) -> Result<ParamVector> {
        if source_params.len() != source.param_count() {
            return Err(config_err!("source parameter vector does not match its layout"));
        }
        let mut params = self.init_params(rng);
        for slot in self.layout.slots() {
            match source.layout.find(&slot.name) {
                Some(src) if src.rows == slot.rows && src.cols == slot.cols => {
                    params.values[slot.range()].copy_from_slice(&source_params.values[src.range()]);
                }
                Some(_) => {
                    return Err(config_err!("shape mismatch for tensor {}", slot.name));
                }
                None => {}
            }
        }
        for cond in &self.spec.scalar_conditions {
            if !source.spec.scalar_conditions.contains(cond) {
                for part in ["weight", "bias"] {
                    let slot = self.layout.find(&format!("embed.{cond}.fc2.{part}")).expect("slot");
                    params.values[slot.range()].fill(0.0);
                }
            }
        }
        Ok(params)
    }

    fn view<'a>(&self, params: &'a [f64], slot: usize) -> ArrayView2<'a, f64> {
        let s = &self.layout.slots[slot];
        ArrayView2::from_shape((s.rows, s.cols), &params[s.range()]).expect("slot shape")
    }

    fn row<'a>(&self, params: &'a [f64], slot: usize) -> ArrayView1<'a, f64> {
        let s = &self.layout.slots[slot];
        ArrayView1::from(&params[s.range()])
    }

    fn view_mut<'a>(&self, grad: &'a mut [f64], slot: usize) -> ArrayViewMut2<'a, f64> {
        let s = &self.layout.slots[slot];
        ArrayViewMut2::from_shape((s.rows, s.cols), &mut grad[s.range()]).expect("slot shape")
    }

    fn row_mut<'a>(&self, grad: &'a mut [f64], slot: usize) -> ArrayViewMut1<'a, f64> {
        let s = &self.layout.slots[slot];
        ArrayViewMut1::from(&mut grad[s.range()])
    }

    fn check_inputs(&self, params: &ParamVector, x: &ArrayView2<f64>, cond: &Conditioning) -> Result<()> {
        if params.len() != self.layout.len() {
            return Err(config_err!(
                "parameter vector has {} entries, layout expects {}",
                params.len(),
                self.layout.len()
            ));
        }
        if x.ncols() != self.spec.input_dim {
            return Err(config_err!(
                "input has dimension {}, network expects {}",
                x.ncols(),
                self.spec.input_dim
            ));
        }
        if cond.len() != x.nrows() {
            return Err(config_err!(
                "{} labels for a batch of {}",
                cond.len(),
                x.nrows()
            ));
        }
        for name in cond.scalars.keys() {
            if !self.spec.scalar_conditions.contains(name) {
                return Err(config_err!("network has no scalar condition '{name}'"));
            }
        }
        for name in &self.spec.scalar_conditions {
            match cond.scalars.get(name) {
                None => return Err(config_err!("missing scalar condition '{name}'")),
                Some(v) if v.len() != x.nrows() => {
                    return Err(config_err!("scalar '{name}' has {} values for a batch of {}", v.len(), x.nrows()))
                }
                _ => {}
            }
        }
        for label in &cond.labels {
            if let Label::Class(c) = label {
                if *c >= self.spec.class_count {
                    return Err(config_err!("class {c} out of range for {} classes", self.spec.class_count));
                }
            }
        }
        Ok(())
    }

    fn table_row(&self, label: Label) -> usize {
        match label {
            Label::Class(c) => c,
            Label::Null => self.spec.class_count,
        }
    }

    fn features(&self, s: &Array1<f64>) -> Array2<f64> {
        let k = self.freqs.len();
        let mut feats = Array2::zeros((s.len(), 2 * k));
        for (b, mut row) in feats.outer_iter_mut().enumerate() {
            for (i, w) in self.freqs.iter().enumerate() {
                let (sin, cos) = (w * s[b]).sin_cos();
                row[i] = cos;
                row[k + i] = sin;
            }
        }
        feats
    }

    fn feature_tangent(&self, s: &Array1<f64>, ds: &Array1<f64>) -> Array2<f64> {
        let k = self.freqs.len();
        let mut out = Array2::zeros((s.len(), 2 * k));
        for (b, mut row) in out.outer_iter_mut().enumerate() {
            for (i, w) in self.freqs.iter().enumerate() {
                let (sin, cos) = (w * s[b]).sin_cos();
                row[i] = -w * sin * ds[b];
                row[k + i] = w * cos * ds[b];
            }
        }
        out
    }

    /// Forward pass keeping every intermediate needed for backprop.
    pub fn forward_trace(&self, params: &ParamVector, x: ArrayView2<f64>, cond: &Conditioning) -> Result<Trace> {
        self.check_inputs(params, &x, cond)?;
        let p = &params.values;
        let n = x.nrows();
        let mut cvec = Array2::zeros((n, self.spec.embed_dim));
        let table = self.view(p, self.class_table);
        for (b, label) in cond.labels.iter().enumerate() {
            cvec.row_mut(b).assign(&table.row(self.table_row(*label)));
        }
        let mut embeds = Vec::with_capacity(self.embeds.len());
        for (name, slots) in self.spec.scalar_conditions.iter().zip(&self.embeds) {
            let feats = self.features(&cond.scalars[name]);
            let mut pre = feats.dot(&self.view(p, slots.fc1_w).t());
            pre += &self.row(p, slots.fc1_b);
            let act = pre.mapv(silu);
            let mut e = act.dot(&self.view(p, slots.fc2_w).t());
            e += &self.row(p, slots.fc2_b);
            cvec += &e;
            embeds.push(EmbedTrace { feats, pre, act });
        }
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut pres = Vec::with_capacity(self.layers.len());
        acts.push(x.to_owned());
        for layer in &self.layers {
            let h = acts.last().expect("input present");
            let mut pre = h.dot(&self.view(p, layer.weight).t());
            general_mat_mul(1.0, &cvec, &self.view(p, layer.cond).t(), 1.0, &mut pre);
            pre += &self.row(p, layer.bias);
            acts.push(pre.mapv(silu));
            pres.push(pre);
        }
        let mut output = acts.last().expect("hidden").dot(&self.view(p, self.out_w).t());
        output += &self.row(p, self.out_b);
        Ok(Trace {
            embeds,
            cond: cvec,
            acts,
            pres,
            output,
        })
    }

    pub fn forward(&self, params: &ParamVector, x: ArrayView2<f64>, cond: &Conditioning) -> Result<Array2<f64>> {
        Ok(self.forward_trace(params, x, cond)?.output)
    }

    /// Accumulates `sum_b J_b^T cotangent_b` into `grad`, where `J_b` is the
    /// Jacobian of output row `b` with respect to the parameters.
    pub fn backprop(
        &self,
        params: &ParamVector,
        trace: &Trace,
        labels: &[Label],
        cotangent: ArrayView2<f64>,
        grad: &mut ParamVector,
    ) -> Result<()> {
        if cotangent.dim() != trace.output.dim() {
            return Err(config_err!(
                "cotangent shape {:?} does not match output {:?}",
                cotangent.dim(),
                trace.output.dim()
            ));
        }
        if grad.len() != self.layout.len() {
            return Err(config_err!("gradient buffer does not match layout"));
        }
        let p = &params.values;
        let g = &mut grad.values;

        let h_last = trace.acts.last().expect("hidden");
        general_mat_mul(1.0, &cotangent.t(), h_last, 1.0, &mut self.view_mut(g, self.out_w));
        self.row_mut(g, self.out_b).scaled_add(1.0, &cotangent.sum_axis(Axis(0)));
        let mut gh = cotangent.dot(&self.view(p, self.out_w));
        let mut gcond = Array2::<f64>::zeros(trace.cond.dim());

        for (l, layer) in self.layers.iter().enumerate().rev() {
            let mut gpre = gh;
            Zip::from(&mut gpre)
                .and(&trace.pres[l])
                .for_each(|gv, &pv| *gv *= silu_grad(pv));
            general_mat_mul(1.0, &gpre.t(), &trace.acts[l], 1.0, &mut self.view_mut(g, layer.weight));
            self.row_mut(g, layer.bias).scaled_add(1.0, &gpre.sum_axis(Axis(0)));
            general_mat_mul(1.0, &gpre.t(), &trace.cond, 1.0, &mut self.view_mut(g, layer.cond));
            general_mat_mul(1.0, &gpre, &self.view(p, layer.cond), 1.0, &mut gcond);
            gh = gpre.dot(&self.view(p, layer.weight));
        }

        {
            let mut table = self.view_mut(g, self.class_table);
            for (b, label) in labels.iter().enumerate() {
                let row = self.table_row(*label);
                table.row_mut(row).scaled_add(1.0, &gcond.row(b));
            }
        }
        for (slots, et) in self.embeds.iter().zip(&trace.embeds) {
            general_mat_mul(1.0, &gcond.t(), &et.act, 1.0, &mut self.view_mut(g, slots.fc2_w));
            self.row_mut(g, slots.fc2_b).scaled_add(1.0, &gcond.sum_axis(Axis(0)));
            let mut gpre = gcond.dot(&self.view(p, slots.fc2_w));
            Zip::from(&mut gpre)
                .and(&et.pre)
                .for_each(|gv, &pv| *gv *= silu_grad(pv));
            general_mat_mul(1.0, &gpre.t(), &et.feats, 1.0, &mut self.view_mut(g, slots.fc1_w));
            self.row_mut(g, slots.fc1_b).scaled_add(1.0, &gpre.sum_axis(Axis(0)));
        }
        Ok(())
    }

    /// Forward-mode derivative of the output along `tangent`.
    pub fn jvp(
        &self,
        params: &ParamVector,
        x: ArrayView2<f64>,
        cond: &Conditioning,
        tangent: &Tangent,
    ) -> Result<DualBatch> {
        self.check_inputs(params, &x, cond)?;
        for name in tangent.scalars.keys() {
            if !self.spec.scalar_conditions.contains(name) {
                return Err(config_err!("cannot differentiate with respect to undeclared scalar '{name}'"));
            }
        }
        if let Some(dx) = &tangent.x {
            if dx.dim() != x.dim() {
                return Err(config_err!("input tangent shape {:?} does not match {:?}", dx.dim(), x.dim()));
            }
        }
        let p = &params.values;
        let n = x.nrows();
        let e = self.spec.embed_dim;
        let mut cvec = Array2::zeros((n, e));
        let mut dcvec = Array2::zeros((n, e));
        let table = self.view(p, self.class_table);
        for (b, label) in cond.labels.iter().enumerate() {
            cvec.row_mut(b).assign(&table.row(self.table_row(*label)));
        }
        for (name, slots) in self.spec.scalar_conditions.iter().zip(&self.embeds) {
            let s = &cond.scalars[name];
            let feats = self.features(s);
            let w1 = self.view(p, slots.fc1_w);
            let w2 = self.view(p, slots.fc2_w);
            let mut pre = feats.dot(&w1.t());
            pre += &self.row(p, slots.fc1_b);
            let act = pre.mapv(silu);
            let mut emb = act.dot(&w2.t());
            emb += &self.row(p, slots.fc2_b);
            cvec += &emb;
            if let Some(ds) = tangent.scalars.get(name) {
                if ds.len() != n {
                    return Err(config_err!("tangent for '{name}' has wrong length"));
                }
                let dfeats = self.feature_tangent(s, ds);
                let mut dact = dfeats.dot(&w1.t());
                Zip::from(&mut dact).and(&pre).for_each(|d, &pv| *d *= silu_grad(pv));
                general_mat_mul(1.0, &dact, &w2.t(), 1.0, &mut dcvec);
            }
        }
        let mut h = x.to_owned();
        let mut dh = tangent.x.clone().unwrap_or_else(|| Array2::zeros(x.dim()));
        for layer in &self.layers {
            let w = self.view(p, layer.weight);
            let u = self.view(p, layer.cond);
            let mut pre = h.dot(&w.t());
            general_mat_mul(1.0, &cvec, &u.t(), 1.0, &mut pre);
            pre += &self.row(p, layer.bias);
            let mut dpre = dh.dot(&w.t());
            general_mat_mul(1.0, &dcvec, &u.t(), 1.0, &mut dpre);
            Zip::from(&mut dpre).and(&pre).for_each(|d, &pv| *d *= silu_grad(pv));
            h = pre.mapv(silu);
            dh = dpre;
        }
        let wo = self.view(p, self.out_w);
        let mut primal = h.dot(&wo.t());
        primal += &self.row(p, self.out_b);
        let tangent = dh.dot(&wo.t());
        Ok(DualBatch { primal, tangent })
    }

    /// Output and its derivative with respect to one scalar condition.
    pub fn jvp_scalar(
        &self,
        params: &ParamVector,
        x: ArrayView2<f64>,
        cond: &Conditioning,
        wrt: ScalarName,
    ) -> Result<DualBatch> {
        if !self.spec.scalar_conditions.contains(&wrt) {
            return Err(config_err!("network has no scalar condition '{wrt}'"));
        }
        self.jvp(params, x, cond, &Tangent::scalar(wrt, x.nrows()))
    }
}

/// A scalar loss on a batch of network outputs that supplies its own
/// gradient with respect to those outputs.
pub trait Objective {
    /// Returns the loss value and `dL/d outputs`.
    fn evaluate(&self, outputs: ArrayView2<f64>) -> Result<(f64, Array2<f64>)>;
}

impl<F> Objective for F
where
    F: Fn(ArrayView2<f64>) -> (f64, Array2<f64>),
{
    fn evaluate(&self, outputs: ArrayView2<f64>) -> Result<(f64, Array2<f64>)> {
        Ok(self(outputs))
    }
}

/// `mean_b ||y_b - target_b||^2` with the target held constant.
pub struct SquaredError<'a> {
    pub target: ArrayView2<'a, f64>,
}

impl Objective for SquaredError<'_> {
    fn evaluate(&self, outputs: ArrayView2<f64>) -> Result<(f64, Array2<f64>)> {
        if outputs.dim() != self.target.dim() {
            return Err(config_err!("target shape does not match outputs"));
        }
        let n = outputs.nrows().max(1) as f64;
        let diff = &outputs - &self.target;
        let value = diff.iter().map(|v| v * v).sum::<f64>() / n;
        Ok((value, diff * (2.0 / n)))
    }
}

/// `mean_b <y_b, direction_b>` with the direction held constant; the
/// pseudo-loss whose gradient is a stop-gradient residual pushed through the
/// network Jacobian.
pub struct InnerProduct<'a> {
    pub direction: ArrayView2<'a, f64>,
}

impl Objective for InnerProduct<'_> {
    fn evaluate(&self, outputs: ArrayView2<f64>) -> Result<(f64, Array2<f64>)> {
        if outputs.dim() != self.direction.dim() {
            return Err(config_err!("direction shape does not match outputs"));
        }
        let n = outputs.nrows().max(1) as f64;
        let value = Zip::from(&outputs)
            .and(&self.direction)
            .fold(0.0, |acc, &y, &d| acc + y * d)
            / n;
        Ok((value, self.direction.to_owned() / n))
    }
}

/// Loss value and parameter gradient of `objective(net(params, x, cond))`.
pub fn grad_params(
    net: &Network,
    params: &ParamVector,
    x: ArrayView2<f64>,
    cond: &Conditioning,
    objective: &dyn Objective,
) -> Result<(f64, ParamVector)> {
    let trace = net.forward_trace(params, x, cond)?;
    let (value, cotangent) = objective.evaluate(trace.output.view())?;
    let mut grad = ParamVector::zeros(params.len());
    net.backprop(params, &trace, &cond.labels, cotangent.view(), &mut grad)?;
    Ok((value, grad))
}
