//! Layers and the model assemblies: the attribute expert, the topology
//! expert, the projector, and the classifier shared by the reference GNN,
//! the student and the baselines.
//!
//! Models are plain parameter containers. A forward pass binds the
//! parameters onto a [`Tape`] (as trainable leaves or as constants) and
//! the layer functions consume the bound [`Var`]s in a fixed order.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{GraphView, ViewKind};
use crate::tensor::snapshot::{read_matrices, write_matrices};
use crate::tensor::{CsrMatrix, Matrix, Tape, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("{model} expects a {expected} view, got {got}")]
    WrongView {
        model: &'static str,
        expected: ViewKind,
        got: ViewKind,
    },
    #[error("input width {got} does not match model input width {expected}")]
    InputWidth { expected: usize, got: usize },
    #[error("unknown backbone {0:?} (expected gcn or gin)")]
    UnknownBackbone(String),
    #[error("checkpoint does not match the model: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Gcn,
    Gin,
}

impl BackboneKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BackboneKind::Gcn => "gcn",
            BackboneKind::Gin => "gin",
        }
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BackboneKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "gcn" => Ok(BackboneKind::Gcn),
            "gin" => Ok(BackboneKind::Gin),
            _ => Err(ModelError::UnknownBackbone(s.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
}

fn activate(tape: &mut Tape, x: Var, act: Activation) -> Result<Var, TensorError> {
    match act {
        Activation::Identity => Ok(x),
        Activation::Relu => tape.relu(x),
    }
}

// ---------------------------------------------------------------------------
// Layers

/// Affine map `x W + b`, `W` of shape `in x out`, `b` of shape `1 x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Linear {
    /// Glorot-uniform weights, zero bias.
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: Matrix::glorot_uniform(in_dim, out_dim, rng),
            bias: Matrix::zeros(1, out_dim),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            weight: Matrix::identity(dim),
            bias: Matrix::zeros(1, dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    fn forward(tape: &mut Tape, p: &[Var], x: Var) -> Result<Var, TensorError> {
        let xw = tape.matmul(x, p[0])?;
        tape.add_row_bias(xw, p[1])
    }
}

/// Stack of linear layers with ReLU between them and no activation after
/// the last one. An empty stack is the identity map.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [in, h1, ..., out]`.
    pub fn init(dims: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let layers = dims.windows(2).map(|w| Linear::init(w[0], w[1], rng)).collect();
        Self { layers }
    }

    pub fn out_dim(&self) -> Option<usize> {
        self.layers.last().map(Linear::out_dim)
    }

    fn forward(tape: &mut Tape, p: &[Var], mut x: Var) -> Result<Var, TensorError> {
        let count = p.len() / 2;
        for (l, chunk) in p.chunks(2).enumerate() {
            x = Linear::forward(tape, chunk, x)?;
            if l + 1 < count {
                x = tape.relu(x)?;
            }
        }
        Ok(x)
    }
}

/// `act(Â H W + b)`.
pub fn gcn_layer(
    tape: &mut Tape,
    norm_adj: &Arc<CsrMatrix>,
    h: Var,
    weight: Var,
    bias: Var,
    act: Activation,
) -> Result<Var, TensorError> {
    let agg = tape.spmm(norm_adj, h)?;
    let lin = Linear::forward(tape, &[weight, bias], agg)?;
    activate(tape, lin, act)
}

/// `mlp((1 + eps) H + A H)`; `mlp_params` are the bound parameters of an
/// [`Mlp`] (two per layer, none for the identity).
pub fn gin_layer(
    tape: &mut Tape,
    adj: &Arc<CsrMatrix>,
    h: Var,
    mlp_params: &[Var],
    eps: f64,
) -> Result<Var, TensorError> {
    let neigh = tape.spmm(adj, h)?;
    let own = if eps == 0.0 { h } else { tape.scale(h, 1.0 + eps)? };
    let sum = tape.add(own, neigh)?;
    Mlp::forward(tape, mlp_params, sum)
}

/// GIN's epsilon; fixed, not learned.
pub const GIN_EPS: f64 = 0.0;

// ---------------------------------------------------------------------------
// Inputs

/// Everything a forward pass needs from a graph view.
#[derive(Clone, Debug)]
pub struct ViewData {
    pub kind: ViewKind,
    pub features: Matrix,
    pub adjacency: Arc<CsrMatrix>,
    pub normalized: Arc<CsrMatrix>,
}

impl ViewData {
    pub fn from_view(view: &GraphView<'_>) -> Self {
        Self {
            kind: view.kind(),
            features: view.features(),
            adjacency: view.adjacency(),
            normalized: view.normalized_adjacency(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.features.rows()
    }

    pub fn width(&self) -> usize {
        self.features.cols()
    }
}

// ---------------------------------------------------------------------------
// Specs

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    Linear,
    GcnConv,
    /// A linear layer inside a GIN convolution's update MLP.
    GinMlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub role: String,
    pub hidden: usize,
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Adjacent layers have matching widths.
    pub fn dims_chain(&self) -> bool {
        self.layers.windows(2).all(|w| w[0].out_dim == w[1].in_dim)
    }
}

// ---------------------------------------------------------------------------
// Assemblies

/// The representation part of a classifier.
#[derive(Clone, Debug, PartialEq)]
pub enum Encoder {
    /// Attribute-only MLP.
    Mlp(Mlp),
    /// One GCN convolution (on the normalised adjacency).
    Gcn(Linear),
    /// One GIN convolution with its update MLP (on the raw adjacency).
    Gin(Mlp),
}

impl Encoder {
    fn layers(&self) -> Vec<&Linear> {
        match self {
            Encoder::Mlp(m) | Encoder::Gin(m) => m.layers.iter().collect(),
            Encoder::Gcn(l) => vec![l],
        }
    }

    fn layers_mut(&mut self) -> Vec<&mut Linear> {
        match self {
            Encoder::Mlp(m) | Encoder::Gin(m) => m.layers.iter_mut().collect(),
            Encoder::Gcn(l) => vec![l],
        }
    }

    fn in_dim(&self) -> usize {
        self.layers().first().map_or(0, |l| l.in_dim())
    }

    fn out_dim(&self) -> usize {
        self.layers().last().map_or(0, |l| l.out_dim())
    }

    fn forward(&self, tape: &mut Tape, p: &[Var], input: &ViewData, x: Var) -> Result<Var, TensorError> {
        match self {
            Encoder::Mlp(_) => Mlp::forward(tape, p, x),
            Encoder::Gcn(_) => gcn_layer(tape, &input.normalized, x, p[0], p[1], Activation::Identity),
            Encoder::Gin(_) => gin_layer(tape, &input.adjacency, x, p, GIN_EPS),
        }
    }

    fn layer_specs(&self) -> Vec<LayerSpec> {
        let n = self.layers().len();
        self.layers()
            .iter()
            .enumerate()
            .map(|(i, l)| LayerSpec {
                kind: match self {
                    Encoder::Mlp(_) => LayerKind::Linear,
                    Encoder::Gcn(_) => LayerKind::GcnConv,
                    Encoder::Gin(_) => LayerKind::GinMlp,
                },
                in_dim: l.in_dim(),
                out_dim: l.out_dim(),
                activation: if i + 1 < n { Activation::Relu } else { Activation::Identity },
            })
            .collect()
    }
}

/// Encoder followed by a one-logit linear head applied to `relu(rep)`.
/// The representation handed to the contrastive objective is the encoder
/// output itself.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub role: String,
    pub encoder: Encoder,
    pub head: Linear,
}

/// Outputs of a classifier forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ClassifierOutput {
    pub representation: Var,
    pub logits: Var,
}

impl Classifier {
    /// Backbone classifier (reference GNN, student, baselines). The same
    /// `seed` always produces the same initial parameters.
    pub fn backbone(role: &str, kind: BackboneKind, in_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = match kind {
            BackboneKind::Gcn => Encoder::Gcn(Linear::init(in_dim, hidden, &mut rng)),
            BackboneKind::Gin => Encoder::Gin(Mlp::init(&[in_dim, hidden, hidden], &mut rng)),
        };
        let head = Linear::init(hidden, 1, &mut rng);
        Self {
            role: role.to_string(),
            encoder,
            head,
        }
    }

    /// Attribute expert: a hidden layer (the representation) and a head.
    pub fn mlp_expert(in_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::Mlp(Mlp::init(&[in_dim, hidden], &mut rng));
        let head = Linear::init(hidden, 1, &mut rng);
        Self {
            role: "mlp-expert".into(),
            encoder,
            head,
        }
    }

    /// Topology expert: one GCN convolution and a head.
    pub fn gcn_expert(in_dim: usize, hidden: usize, seed: u64) -> Self {
        Self::backbone("gcn-expert", BackboneKind::Gcn, in_dim, hidden, seed)
    }

    pub fn in_dim(&self) -> usize {
        self.encoder.in_dim()
    }

    pub fn hidden(&self) -> usize {
        self.encoder.out_dim()
    }

    pub fn spec(&self) -> ModelSpec {
        let mut layers = self.encoder.layer_specs();
        layers.push(LayerSpec {
            kind: LayerKind::Linear,
            in_dim: self.head.in_dim(),
            out_dim: self.head.out_dim(),
            activation: Activation::Identity,
        });
        ModelSpec {
            role: self.role.clone(),
            hidden: self.hidden(),
            layers,
        }
    }

    /// Same architecture (ignoring the role name and parameter values).
    pub fn same_architecture(&self, other: &Self) -> bool {
        let (mut a, mut b) = (self.spec(), other.spec());
        a.role.clear();
        b.role.clear();
        a == b && std::mem::discriminant(&self.encoder) == std::mem::discriminant(&other.encoder)
    }

    /// Binds the input features and runs the forward pass on `tape`.
    pub fn forward(&self, tape: &mut Tape, params: &[Var], input: &ViewData) -> Result<ClassifierOutput, ModelError> {
        if input.width() != self.in_dim() {
            return Err(ModelError::InputWidth {
                expected: self.in_dim(),
                got: input.width(),
            });
        }
        let x = tape.constant(input.features.clone());
        let split = params.len() - 2;
        let representation = self.encoder.forward(tape, &params[..split], input, x)?;
        let hidden = tape.relu(representation)?;
        let logits = Linear::forward(tape, &params[split..], hidden)?;
        Ok(ClassifierOutput { representation, logits })
    }

    /// Forward without gradients: `(representation, probabilities)`.
    pub fn infer(&self, input: &ViewData) -> Result<(Matrix, Vec<f64>), ModelError> {
        let mut tape = Tape::new();
        let params = bind(&mut tape, self, false);
        let out = self.forward(&mut tape, &params, input)?;
        let probs = tape.value(out.logits).as_slice().iter().map(|&z| crate::tensor::sigmoid(z)).collect();
        Ok((tape.value(out.representation).clone(), probs))
    }

    fn check_view(&self, input: &ViewData, expected: ViewKind, model: &'static str) -> Result<(), ModelError> {
        if input.kind != expected {
            return Err(ModelError::WrongView {
                model,
                expected,
                got: input.kind,
            });
        }
        Ok(())
    }
}

/// Projector: an MLP fusing the concatenated expert representations.
#[derive(Clone, Debug, PartialEq)]
pub struct Projector {
    pub mlp: Mlp,
}

impl Projector {
    /// Three layers `in -> hidden -> hidden -> out`.
    pub fn init(in_dim: usize, hidden: usize, out_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            mlp: Mlp::init(&[in_dim, hidden, hidden, out_dim], &mut rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var, ModelError> {
        let want = self.mlp.layers.first().map_or(0, |l| l.in_dim());
        let got = tape.value(x).cols();
        if got != want {
            return Err(ModelError::InputWidth { expected: want, got });
        }
        Ok(Mlp::forward(tape, params, x)?)
    }

    pub fn spec(&self) -> ModelSpec {
        let n = self.mlp.layers.len();
        ModelSpec {
            role: "projector".into(),
            hidden: self.mlp.layers.first().map_or(0, |l| l.out_dim()),
            layers: self
                .mlp
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| LayerSpec {
                    kind: LayerKind::Linear,
                    in_dim: l.in_dim(),
                    out_dim: l.out_dim(),
                    activation: if i + 1 < n { Activation::Relu } else { Activation::Identity },
                })
                .collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// Parameters

/// Ordered access to a model's parameter matrices.
pub trait Parameters {
    fn params(&self) -> Vec<&Matrix>;
    fn params_mut(&mut self) -> Vec<&mut Matrix>;

    fn num_parameters(&self) -> usize {
        self.params().iter().map(|m| m.len()).sum()
    }

    /// Bit pattern of all parameters, for freeze checks.
    fn fingerprint(&self) -> Vec<u64> {
        self.params()
            .iter()
            .flat_map(|m| m.as_slice().iter().map(|v| v.to_bits()))
            .collect()
    }
}

fn linear_params(layers: Vec<&Linear>) -> Vec<&Matrix> {
    layers.into_iter().flat_map(|l| [&l.weight, &l.bias]).collect()
}

fn linear_params_mut(layers: Vec<&mut Linear>) -> Vec<&mut Matrix> {
    layers.into_iter().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
}

impl Parameters for Classifier {
    fn params(&self) -> Vec<&Matrix> {
        let mut layers = self.encoder.layers();
        layers.push(&self.head);
        linear_params(layers)
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut layers = self.encoder.layers_mut();
        layers.push(&mut self.head);
        linear_params_mut(layers)
    }
}

impl Parameters for Projector {
    fn params(&self) -> Vec<&Matrix> {
        linear_params(self.mlp.layers.iter().collect())
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        linear_params_mut(self.mlp.layers.iter_mut().collect())
    }
}

impl Parameters for Mlp {
    fn params(&self) -> Vec<&Matrix> {
        linear_params(self.layers.iter().collect())
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        linear_params_mut(self.layers.iter_mut().collect())
    }
}

/// Puts every parameter of `model` on `tape`, as trainable leaves or as
/// constants.
pub fn bind<M: Parameters + ?Sized>(tape: &mut Tape, model: &M, trainable: bool) -> Vec<Var> {
    model
        .params()
        .into_iter()
        .map(|m| tape.leaf(m.clone(), trainable))
        .collect()
}

// ---------------------------------------------------------------------------
// Teacher

/// Attribute-only representation `H_tm`.
pub fn forward_expert_m(expert: &Classifier, input: &ViewData) -> Result<Matrix, ModelError> {
    expert.check_view(input, ViewKind::NodesOnly, "attribute expert")?;
    Ok(expert.infer(input)?.0)
}

/// Topology-only representation `H_tg`.
pub fn forward_expert_g(expert: &Classifier, input: &ViewData) -> Result<Matrix, ModelError> {
    expert.check_view(input, ViewKind::TopologyOnly, "topology expert")?;
    Ok(expert.infer(input)?.0)
}

/// Frozen experts plus the projector.
#[derive(Clone, Debug, PartialEq)]
pub struct Teacher {
    pub mlp_expert: Classifier,
    pub gcn_expert: Classifier,
    pub projector: Projector,
}

impl Teacher {
    /// `H_tm ⊕ H_tg`.
    pub fn expert_features(&self, nodes: &ViewData, topology: &ViewData) -> Result<Matrix, ModelError> {
        let hm = forward_expert_m(&self.mlp_expert, nodes)?;
        let hg = forward_expert_g(&self.gcn_expert, topology)?;
        Ok(hm.concat_cols(&hg)?)
    }
}

/// Teacher representation `H = f_tp(H_tm ⊕ H_tg)`.
pub fn forward_teacher(teacher: &Teacher, nodes: &ViewData, topology: &ViewData) -> Result<Matrix, ModelError> {
    let concat = teacher.expert_features(nodes, topology)?;
    let mut tape = Tape::new();
    let params = bind(&mut tape, &teacher.projector, false);
    let x = tape.constant(concat);
    let h = teacher.projector.forward(&mut tape, &params, x)?;
    Ok(tape.value(h).clone())
}

/// Student forward on the full view.
pub fn forward_student(
    student: &Classifier,
    tape: &mut Tape,
    params: &[Var],
    input: &ViewData,
) -> Result<ClassifierOutput, ModelError> {
    student.check_view(input, ViewKind::Full, "student")?;
    student.forward(tape, params, input)
}

// ---------------------------------------------------------------------------
// Checkpoints

/// Writes the parameters of `model` as an ordered tensor snapshot.
pub fn save_parameters<M: Parameters + ?Sized, W: Write>(model: &M, w: &mut W) -> Result<(), ModelError> {
    write_matrices(w, &model.params())?;
    Ok(())
}

/// Loads a snapshot into `model`, checking count and shapes.
pub fn load_parameters<M: Parameters + ?Sized, R: Read>(model: &mut M, r: &mut R) -> Result<(), ModelError> {
    let loaded = read_matrices(r)?;
    let mut slots = model.params_mut();
    if loaded.len() != slots.len() {
        return Err(ModelError::Checkpoint(format!(
            "{} tensors in snapshot, model has {}",
            loaded.len(),
            slots.len()
        )));
    }
    for (i, (slot, m)) in slots.iter_mut().zip(&loaded).enumerate() {
        if slot.shape() != m.shape() {
            return Err(ModelError::Checkpoint(format!(
                "tensor {i}: snapshot {:?}, model {:?}",
                m.shape(),
                slot.shape()
            )));
        }
    }
    for (slot, m) in slots.into_iter().zip(loaded) {
        *slot = m;
    }
    Ok(())
}
