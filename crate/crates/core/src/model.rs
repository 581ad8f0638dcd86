//! Desk-scale mixture-of-experts classifier.
//!
//! `x ─encoder→ h₀ ─[MoE block]×L→ h_L ─head→ logits`, where each block
//! computes `h ← h + Σ_{i∈top-k} g_i(h) · W₂ᵢ σ(W₁ᵢ h)` (the residual term
//! is optional). Gradients are computed by hand; the backward pass also
//! exposes `∂objective/∂b` for every routed expert output `b = W₂ a`, which
//! is what the curvature and predictive modules consume.
//!
//! Vectorization convention used throughout the crate: `W₂` is `d_out × d_in`
//! and is vectorized column-major, so `vec(g aᵀ) = a ⊗ g`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
    Silu,
    Identity,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

impl Activation {
    /// GELU uses the tanh approximation.
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Gelu => 0.5 * z * (1.0 + (GELU_C * (z + GELU_K * z * z * z)).tanh()),
            Activation::Silu => z / (1.0 + (-z).exp()),
            Activation::Identity => z,
        }
    }

    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let t = (GELU_C * (z + GELU_K * z * z * z)).tanh();
                0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * z * z)
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MoEConfig {
    pub num_layers: usize,
    pub num_experts: usize,
    pub top_k: usize,
    pub d_input: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub num_classes: usize,
    pub activation: Activation,
    pub residual: bool,
    pub seed: u64,
}

impl Default for MoEConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            num_experts: 8,
            top_k: 2,
            d_input: 4,
            d_model: 8,
            d_ff: 16,
            num_classes: 3,
            activation: Activation::Gelu,
            residual: true,
            seed: 0,
        }
    }
}

impl MoEConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("model.num_layers", self.num_layers),
            ("model.num_experts", self.num_experts),
            ("model.top_k", self.top_k),
            ("model.d_input", self.d_input),
            ("model.d_model", self.d_model),
            ("model.d_ff", self.d_ff),
            ("model.num_classes", self.num_classes),
        ];
        for (path, v) in counts {
            if v == 0 {
                return Err(Error::config(path, "must be >= 1"));
            }
        }
        if self.top_k > self.num_experts {
            return Err(Error::config("model.top_k", "must not exceed num_experts"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertParams {
    /// `d_ff × d_model`
    pub w1: Matrix,
    /// `d_model × d_ff`
    pub w2: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateParams {
    /// `num_experts × d_model`
    pub w_gate: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoELayer {
    pub gate: GateParams,
    pub experts: Vec<ExpertParams>,
}

/// Parameter groups, in the order [`MoEModel::visit_params`] yields them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Encoder,
    Gate,
    ExpertW1,
    ExpertW2,
    Head,
}

/// Stable name of one parameter tensor, e.g. `layers.2.experts.5.w2`.
pub fn tensor_name(group: ParamGroup, layer: usize, expert: usize) -> String {
    match group {
        ParamGroup::Encoder => "encoder".into(),
        ParamGroup::Head => "head".into(),
        ParamGroup::Gate => format!("layers.{layer}.gate"),
        ParamGroup::ExpertW1 => format!("layers.{layer}.experts.{expert}.w1"),
        ParamGroup::ExpertW2 => format!("layers.{layer}.experts.{expert}.w2"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoEModel {
    config: MoEConfig,
    encoder: Matrix,
    layers: Vec<MoELayer>,
    head: Matrix,
    #[serde(skip)]
    version: u64,
}

fn glorot(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let bound = scale * (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..=bound))
}

impl MoEModel {
    /// Seeded initialization: uniform `±√(6/(fan_in+fan_out))`, gates at 0.1×.
    pub fn init(config: MoEConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let c = &config;
        let encoder = glorot(c.d_model, c.d_input, 1.0, &mut rng);
        let layers = (0..c.num_layers)
            .map(|_| MoELayer {
                gate: GateParams {
                    w_gate: glorot(c.num_experts, c.d_model, 0.1, &mut rng),
                },
                experts: (0..c.num_experts)
                    .map(|_| ExpertParams {
                        w1: glorot(c.d_ff, c.d_model, 1.0, &mut rng),
                        w2: glorot(c.d_model, c.d_ff, 1.0, &mut rng),
                    })
                    .collect(),
            })
            .collect();
        let head = glorot(c.num_classes, c.d_model, 1.0, &mut rng);
        Ok(Self {
            config,
            encoder,
            layers,
            head,
            version: 0,
        })
    }

    /// All-zero parameters.
    pub fn zeros(config: MoEConfig) -> Result<Self> {
        let mut m = Self::init(config)?;
        m.visit_params_mut(|_, _, _, p| p.iter_mut().for_each(|v| *v = 0.0));
        m.version = 0;
        Ok(m)
    }

    /// Assembles a model from explicit tensors.
    pub fn from_parts(config: MoEConfig, encoder: Matrix, layers: Vec<MoELayer>, head: Matrix) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let check = |name: &'static str, m: &Matrix, shape: (usize, usize)| {
            if m.shape() != shape {
                Err(Error::Shape {
                    op: name,
                    expected: shape,
                    got: m.shape(),
                })
            } else {
                Ok(())
            }
        };
        check("encoder", &encoder, (c.d_model, c.d_input))?;
        check("head", &head, (c.num_classes, c.d_model))?;
        if layers.len() != c.num_layers {
            return Err(Error::Shape {
                op: "layers",
                expected: (c.num_layers, 1),
                got: (layers.len(), 1),
            });
        }
        for layer in &layers {
            check("gate", &layer.gate.w_gate, (c.num_experts, c.d_model))?;
            if layer.experts.len() != c.num_experts {
                return Err(Error::Shape {
                    op: "experts",
                    expected: (c.num_experts, 1),
                    got: (layer.experts.len(), 1),
                });
            }
            for e in &layer.experts {
                check("w1", &e.w1, (c.d_ff, c.d_model))?;
                check("w2", &e.w2, (c.d_model, c.d_ff))?;
            }
        }
        Ok(Self {
            config,
            encoder,
            layers,
            head,
            version: 0,
        })
    }

    pub fn config(&self) -> &MoEConfig {
        &self.config
    }

    /// Incremented on every mutable access; traces remember the version
    /// they were recorded at.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn encoder(&self) -> &Matrix {
        &self.encoder
    }

    pub fn head(&self) -> &Matrix {
        &self.head
    }

    pub fn layers(&self) -> &[MoELayer] {
        &self.layers
    }

    pub fn expert(&self, layer: usize, expert: usize) -> &ExpertParams {
        &self.layers[layer].experts[expert]
    }

    pub fn encoder_mut(&mut self) -> &mut Matrix {
        self.version += 1;
        &mut self.encoder
    }

    pub fn head_mut(&mut self) -> &mut Matrix {
        self.version += 1;
        &mut self.head
    }

    pub fn gate_mut(&mut self, layer: usize) -> &mut GateParams {
        self.version += 1;
        &mut self.layers[layer].gate
    }

    pub fn expert_mut(&mut self, layer: usize, expert: usize) -> &mut ExpertParams {
        self.version += 1;
        &mut self.layers[layer].experts[expert]
    }

    /// Visits every parameter tensor in canonical order:
    /// encoder, then per layer the gate and each expert's `w1`, `w2`, then head.
    pub fn visit_params(&self, mut f: impl FnMut(ParamGroup, usize, usize, &Matrix)) {
        f(ParamGroup::Encoder, 0, 0, &self.encoder);
        for (l, layer) in self.layers.iter().enumerate() {
            f(ParamGroup::Gate, l, 0, &layer.gate.w_gate);
            for (e, ex) in layer.experts.iter().enumerate() {
                f(ParamGroup::ExpertW1, l, e, &ex.w1);
                f(ParamGroup::ExpertW2, l, e, &ex.w2);
            }
        }
        f(ParamGroup::Head, 0, 0, &self.head);
    }

    pub fn visit_params_mut(&mut self, mut f: impl FnMut(ParamGroup, usize, usize, &mut [f64])) {
        self.version += 1;
        f(ParamGroup::Encoder, 0, 0, self.encoder.data_mut());
        for (l, layer) in self.layers.iter_mut().enumerate() {
            f(ParamGroup::Gate, l, 0, layer.gate.w_gate.data_mut());
            for (e, ex) in layer.experts.iter_mut().enumerate() {
                f(ParamGroup::ExpertW1, l, e, ex.w1.data_mut());
                f(ParamGroup::ExpertW2, l, e, ex.w2.data_mut());
            }
        }
        f(ParamGroup::Head, 0, 0, self.head.data_mut());
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params(|_, _, _, m| n += m.data().len());
        n
    }

    /// Content hash over configuration and parameters (hex, 32 chars).
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        self.visit_params(|_, _, _, m| {
            for v in m.data() {
                h.update(v.to_le_bytes());
            }
        });
        hex::encode(&h.finalize()[..16])
    }
}

/// Top-k routing decision for one input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    /// Length `num_experts`; zero outside the routed set.
    pub weights: Vec<f64>,
    /// Routed expert ids in descending score order (ties: lowest id first).
    pub routed: Vec<usize>,
}

/// Softmax over `scores`, keeping only the `k` largest entries and
/// renormalizing over them.
pub fn top_k_gate(scores: &[f64], k: usize) -> Gate {
    let k = k.min(scores.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let routed: Vec<usize> = order[..k].to_vec();
    let mut weights = vec![0.0; scores.len()];
    if k == 0 {
        return Gate { weights, routed };
    }
    let max = scores[routed[0]];
    let exps: Vec<f64> = routed.iter().map(|&i| (scores[i] - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    for (&i, e) in routed.iter().zip(&exps) {
        weights[i] = e / total;
    }
    Gate { weights, routed }
}

/// Gate scores `s_i = w_iᵀ x` followed by top-k renormalized softmax.
pub fn gate_scores(x: &[f64], gate: &GateParams, k: usize) -> Gate {
    top_k_gate(&gate.w_gate.matvec(x), k)
}

/// `(W₂ σ(W₁ x), σ(W₁ x))`.
pub fn expert_forward(x: &[f64], e: &ExpertParams, act: Activation) -> (Vec<f64>, Vec<f64>) {
    let z = e.w1.matvec(x);
    let a: Vec<f64> = z.iter().map(|&v| act.apply(v)).collect();
    let out = e.w2.matvec(&a);
    (out, a)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertTrace {
    pub expert: usize,
    pub weight: f64,
    pub pre_activation: Vec<f64>,
    /// Input to `W₂` (length `d_ff`).
    pub activation: Vec<f64>,
    /// `W₂ a` before gate weighting (length `d_model`).
    pub output: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub input: Vec<f64>,
    pub scores: Vec<f64>,
    pub gate: Gate,
    /// One entry per routed expert, in `gate.routed` order.
    pub experts: Vec<ExpertTrace>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub model_version: u64,
    pub input: Vec<f64>,
    pub layers: Vec<LayerTrace>,
    pub final_hidden: Vec<f64>,
    pub logits: Vec<f64>,
}

fn forward_traced(model: &MoEModel, x: &[f64]) -> ForwardTrace {
    let c = &model.config;
    let mut h = model.encoder.matvec(x);
    let mut layers = Vec::with_capacity(c.num_layers);
    for layer in &model.layers {
        let scores = layer.gate.w_gate.matvec(&h);
        let gate = top_k_gate(&scores, c.top_k);
        let mut next = if c.residual { h.clone() } else { vec![0.0; c.d_model] };
        let mut experts = Vec::with_capacity(gate.routed.len());
        for &i in &gate.routed {
            let params = &layer.experts[i];
            let z = params.w1.matvec(&h);
            let a: Vec<f64> = z.iter().map(|&v| c.activation.apply(v)).collect();
            let b = params.w2.matvec(&a);
            let w = gate.weights[i];
            for (n, bv) in next.iter_mut().zip(&b) {
                *n += w * bv;
            }
            experts.push(ExpertTrace {
                expert: i,
                weight: w,
                pre_activation: z,
                activation: a,
                output: b,
            });
        }
        layers.push(LayerTrace {
            input: h,
            scores,
            gate,
            experts,
        });
        h = next;
    }
    let logits = model.head.matvec(&h);
    ForwardTrace {
        model_version: model.version,
        input: x.to_vec(),
        layers,
        final_hidden: h,
        logits,
    }
}

/// Forward pass. The trace is returned only when `capture` is set; logits
/// are identical either way.
pub fn forward(model: &MoEModel, x: &[f64], capture: bool) -> Result<(Vec<f64>, Option<ForwardTrace>)> {
    if x.len() != model.config.d_input {
        return Err(Error::Shape {
            op: "forward",
            expected: (model.config.d_input, 1),
            got: (x.len(), 1),
        });
    }
    let trace = forward_traced(model, x);
    let logits = trace.logits.clone();
    Ok((logits, capture.then_some(trace)))
}

/// Logits only.
pub fn logits(model: &MoEModel, x: &[f64]) -> Result<Vec<f64>> {
    Ok(forward(model, x, false)?.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertGrad {
    pub w1: Matrix,
    pub w2: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub gate: Matrix,
    pub experts: Vec<ExpertGrad>,
}

/// `(expert id, ∂objective/∂b)` for each routed expert of one layer.
pub type ExpertOutputGrads = Vec<(usize, Vec<f64>)>;

/// Gradients for every parameter plus the per-expert output gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub encoder: Matrix,
    pub layers: Vec<LayerGrad>,
    pub head: Matrix,
    /// Per layer; empty for a zero-initialized set.
    pub expert_outputs: Vec<ExpertOutputGrads>,
}

impl GradientSet {
    pub fn zeros_like(model: &MoEModel) -> Self {
        let c = &model.config;
        Self {
            encoder: Matrix::zeros(c.d_model, c.d_input),
            layers: (0..c.num_layers)
                .map(|_| LayerGrad {
                    gate: Matrix::zeros(c.num_experts, c.d_model),
                    experts: (0..c.num_experts)
                        .map(|_| ExpertGrad {
                            w1: Matrix::zeros(c.d_ff, c.d_model),
                            w2: Matrix::zeros(c.d_model, c.d_ff),
                        })
                        .collect(),
                })
                .collect(),
            head: Matrix::zeros(c.num_classes, c.d_model),
            expert_outputs: Vec::new(),
        }
    }

    /// Same traversal order as [`MoEModel::visit_params`].
    pub fn visit(&self, mut f: impl FnMut(ParamGroup, usize, usize, &Matrix)) {
        f(ParamGroup::Encoder, 0, 0, &self.encoder);
        for (l, layer) in self.layers.iter().enumerate() {
            f(ParamGroup::Gate, l, 0, &layer.gate);
            for (e, ex) in layer.experts.iter().enumerate() {
                f(ParamGroup::ExpertW1, l, e, &ex.w1);
                f(ParamGroup::ExpertW2, l, e, &ex.w2);
            }
        }
        f(ParamGroup::Head, 0, 0, &self.head);
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(ParamGroup, usize, usize, &mut [f64])) {
        f(ParamGroup::Encoder, 0, 0, self.encoder.data_mut());
        for (l, layer) in self.layers.iter_mut().enumerate() {
            f(ParamGroup::Gate, l, 0, layer.gate.data_mut());
            for (e, ex) in layer.experts.iter_mut().enumerate() {
                f(ParamGroup::ExpertW1, l, e, ex.w1.data_mut());
                f(ParamGroup::ExpertW2, l, e, ex.w2.data_mut());
            }
        }
        f(ParamGroup::Head, 0, 0, self.head.data_mut());
    }

    /// `self += alpha · other` (parameter gradients only).
    pub fn axpy(&mut self, alpha: f64, other: &GradientSet) {
        let mut flat = Vec::new();
        other.visit(|_, _, _, m| flat.push(m.data().to_vec()));
        let mut it = flat.into_iter();
        self.visit_mut(|_, _, _, dst| {
            let src = it.next().expect("same structure");
            for (d, s) in dst.iter_mut().zip(src) {
                *d += alpha * s;
            }
        });
    }

    pub fn scale(&mut self, alpha: f64) {
        self.visit_mut(|_, _, _, d| d.iter_mut().for_each(|v| *v *= alpha));
    }

    pub fn sq_norm(&self) -> f64 {
        let mut s = 0.0;
        self.visit(|_, _, _, m| s += dot(m.data(), m.data()));
        s
    }
}

fn check_trace(model: &MoEModel, trace: &ForwardTrace, dlogits: &[f64]) -> Result<()> {
    if trace.model_version != model.version {
        return Err(Error::StaleTrace {
            trace: trace.model_version,
            model: model.version,
        });
    }
    if dlogits.len() != model.config.num_classes {
        return Err(Error::Shape {
            op: "backward",
            expected: (model.config.num_classes, 1),
            got: (dlogits.len(), 1),
        });
    }
    Ok(())
}

fn backward_impl(
    model: &MoEModel,
    trace: &ForwardTrace,
    dlogits: &[f64],
    mut grads: Option<&mut GradientSet>,
) -> Vec<ExpertOutputGrads> {
    let c = &model.config;
    if let Some(g) = grads.as_deref_mut() {
        g.head.add_outer(1.0, dlogits, &trace.final_hidden);
    }
    let mut dh = model.head.tmatvec(dlogits);
    let mut outputs: Vec<ExpertOutputGrads> = vec![Vec::new(); c.num_layers];
    for (l, (layer, lt)) in model.layers.iter().zip(&trace.layers).enumerate().rev() {
        let mut dh_in = if c.residual { dh.clone() } else { vec![0.0; c.d_model] };
        let mut dweights = Vec::with_capacity(lt.experts.len());
        let mut layer_out = Vec::with_capacity(lt.experts.len());
        for et in &lt.experts {
            let params = &layer.experts[et.expert];
            let db: Vec<f64> = dh.iter().map(|v| et.weight * v).collect();
            dweights.push(dot(&dh, &et.output));
            let da = params.w2.tmatvec(&db);
            let dz: Vec<f64> = da
                .iter()
                .zip(&et.pre_activation)
                .map(|(d, z)| d * c.activation.derivative(*z))
                .collect();
            if let Some(g) = grads.as_deref_mut() {
                let eg = &mut g.layers[l].experts[et.expert];
                eg.w2.add_outer(1.0, &db, &et.activation);
                eg.w1.add_outer(1.0, &dz, &lt.input);
            }
            for (d, v) in dh_in.iter_mut().zip(params.w1.tmatvec(&dz)) {
                *d += v;
            }
            layer_out.push((et.expert, db));
        }
        // Kept-softmax backward: ds_i = w_i (dw_i − Σ_j w_j dw_j).
        let mean: f64 = lt.experts.iter().zip(&dweights).map(|(et, dw)| et.weight * dw).sum();
        for (et, dw) in lt.experts.iter().zip(&dweights) {
            let ds = et.weight * (dw - mean);
            if ds == 0.0 {
                continue;
            }
            let row = layer.gate.w_gate.row(et.expert);
            for (d, w) in dh_in.iter_mut().zip(row) {
                *d += ds * w;
            }
            if let Some(g) = grads.as_deref_mut() {
                let gate = &mut g.layers[l].gate;
                for (j, x) in lt.input.iter().enumerate() {
                    let v = gate.get(et.expert, j) + ds * x;
                    gate.set(et.expert, j, v);
                }
            }
        }
        outputs[l] = layer_out;
        dh = dh_in;
    }
    if let Some(g) = grads {
        g.encoder.add_outer(1.0, &dh, &trace.input);
    }
    outputs
}

/// Reverse pass for an objective whose gradient w.r.t. the logits is
/// `dlogits`. Top-k selection is treated as piecewise constant; gradient
/// flows through the renormalized weights of the kept experts.
pub fn backward(model: &MoEModel, trace: &ForwardTrace, dlogits: &[f64]) -> Result<GradientSet> {
    check_trace(model, trace, dlogits)?;
    let mut g = GradientSet::zeros_like(model);
    g.expert_outputs = backward_impl(model, trace, dlogits, Some(&mut g));
    Ok(g)
}

/// Like [`backward`] but adds the parameter gradients into `acc`.
pub fn backward_into(model: &MoEModel, trace: &ForwardTrace, dlogits: &[f64], acc: &mut GradientSet) -> Result<()> {
    check_trace(model, trace, dlogits)?;
    backward_impl(model, trace, dlogits, Some(acc));
    Ok(())
}

/// Only the per-expert output gradients `∂objective/∂b`, skipping the
/// parameter gradients.
pub fn expert_output_grads(model: &MoEModel, trace: &ForwardTrace, dlogits: &[f64]) -> Result<Vec<ExpertOutputGrads>> {
    check_trace(model, trace, dlogits)?;
    Ok(backward_impl(model, trace, dlogits, None))
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v - lse).collect()
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
