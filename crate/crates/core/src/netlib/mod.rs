//! Layers and model assembly: encoder → projector → classifier, with every
//! layer's output captured in an activation trace.

mod checkpoint;
mod layers;

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::collapse::EmbeddingSet;
use crate::datakit::{seed, Split};
use crate::diffcore::{Graph, Tensor, Var, NORMALIZE_EPS};
use crate::error::{Error, Result};
use crate::etf;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};
pub use layers::{
    batch_norm, default_groups, group_norm, weight_standardize, BatchNormState, Mode, BATCH_NORM_EPS, GROUP_NORM_EPS,
    WEIGHT_STANDARDIZE_EPS,
};

fn default_true() -> bool {
    true
}

fn default_momentum() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Affine {
        in_dim: usize,
        out_dim: usize,
        #[serde(default)]
        weight_standardized: bool,
        #[serde(default)]
        frozen: bool,
        #[serde(default = "default_true")]
        bias: bool,
    },
    Relu,
    BatchNorm {
        #[serde(default = "default_momentum")]
        momentum: f64,
    },
    GroupNorm {
        num_groups: usize,
    },
    L2Normalize,
}

impl LayerSpec {
    pub fn affine(in_dim: usize, out_dim: usize) -> Self {
        LayerSpec::Affine {
            in_dim,
            out_dim,
            weight_standardized: false,
            frozen: false,
            bias: true,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Affine { .. } => "affine",
            LayerSpec::Relu => "relu",
            LayerSpec::BatchNorm { .. } => "batch_norm",
            LayerSpec::GroupNorm { .. } => "group_norm",
            LayerSpec::L2Normalize => "l2_normalize",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectorMode {
    FixedEtf,
    Plastic,
    None,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierMode {
    #[default]
    Plastic,
    FixedEtf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    GnWs,
    Bn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectorDims {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub encoder: Vec<LayerSpec>,
    pub projector_mode: ProjectorMode,
    pub projector: ProjectorDims,
    /// Trailing L2 normalization of the projector output.
    #[serde(default = "default_true")]
    pub projector_l2: bool,
    pub num_classes: usize,
    #[serde(default)]
    pub classifier: ClassifierMode,
}

/// Where a layer sits in the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Encoder,
    Projector,
    Classifier,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedLayer {
    pub name: String,
    pub spec: LayerSpec,
    pub in_dim: usize,
    pub out_dim: usize,
    pub stage: Stage,
}

impl ModelSpec {
    /// MLP encoder of `depth` blocks `affine → norm → relu` of width `width`.
    pub fn mlp_encoder(input_dim: usize, width: usize, depth: usize, norm: NormKind) -> Vec<LayerSpec> {
        let mut layers = Vec::new();
        let mut d = input_dim;
        for _ in 0..depth {
            layers.push(LayerSpec::Affine {
                in_dim: d,
                out_dim: width,
                weight_standardized: norm == NormKind::GnWs,
                frozen: false,
                bias: true,
            });
            layers.push(match norm {
                NormKind::GnWs => LayerSpec::GroupNorm {
                    num_groups: default_groups(width),
                },
                NormKind::Bn => LayerSpec::BatchNorm { momentum: 0.1 },
            });
            layers.push(LayerSpec::Relu);
            d = width;
        }
        layers
    }

    fn encoder_out_dim(&self) -> Result<usize> {
        let mut d = self.input_dim;
        for l in &self.encoder {
            if let LayerSpec::Affine { in_dim, out_dim, .. } = l {
                if *in_dim != d {
                    return Err(Error::Spec(format!("affine expects input {in_dim} but receives {d}")));
                }
                d = *out_dim;
            }
        }
        Ok(d)
    }

    /// Full, validated layer list with names and dimensions.
    pub fn layers(&self) -> Result<Vec<ResolvedLayer>> {
        if self.input_dim == 0 || self.num_classes < 2 {
            return Err(Error::Spec("need input_dim > 0 and at least 2 classes".into()));
        }
        let mut out = Vec::new();
        let mut d = self.input_dim;
        let push = |out: &mut Vec<ResolvedLayer>, name: String, spec: LayerSpec, d: &mut usize, stage| -> Result<()> {
            let in_dim = *d;
            match &spec {
                LayerSpec::Affine {
                    in_dim: i, out_dim: o, ..
                } => {
                    if *i != in_dim || *o == 0 || *i == 0 {
                        return Err(Error::Spec(format!(
                            "{name}: affine {i}->{o} does not fit input width {in_dim}"
                        )));
                    }
                    *d = *o;
                }
                LayerSpec::GroupNorm { num_groups } => {
                    if *num_groups == 0 || !in_dim.is_multiple_of(*num_groups) {
                        return Err(Error::Spec(format!(
                            "{name}: width {in_dim} not divisible by {num_groups} groups"
                        )));
                    }
                }
                LayerSpec::BatchNorm { momentum } => {
                    if !(0.0..=1.0).contains(momentum) {
                        return Err(Error::Spec(format!("{name}: momentum must be in [0, 1]")));
                    }
                }
                LayerSpec::Relu | LayerSpec::L2Normalize => {}
            }
            out.push(ResolvedLayer {
                name,
                spec,
                in_dim,
                out_dim: *d,
                stage,
            });
            Ok(())
        };

        for (i, l) in self.encoder.iter().enumerate() {
            push(
                &mut out,
                format!("encoder.{i}.{}", l.kind()),
                l.clone(),
                &mut d,
                Stage::Encoder,
            )?;
        }
        if self.projector_mode != ProjectorMode::None {
            let p = self.projector;
            if p.input != d {
                return Err(Error::Spec(format!(
                    "encoder output {d} != projector input {}",
                    p.input
                )));
            }
            let frozen = self.projector_mode == ProjectorMode::FixedEtf;
            let mut proj = vec![
                LayerSpec::Affine {
                    in_dim: p.input,
                    out_dim: p.hidden,
                    weight_standardized: false,
                    frozen,
                    bias: false,
                },
                LayerSpec::Relu,
                LayerSpec::Affine {
                    in_dim: p.hidden,
                    out_dim: p.output,
                    weight_standardized: false,
                    frozen,
                    bias: false,
                },
            ];
            if self.projector_l2 {
                proj.push(LayerSpec::L2Normalize);
            }
            for (i, l) in proj.into_iter().enumerate() {
                let name = format!("projector.{i}.{}", l.kind());
                push(&mut out, name, l, &mut d, Stage::Projector)?;
            }
        }
        let classifier = LayerSpec::Affine {
            in_dim: d,
            out_dim: self.num_classes,
            weight_standardized: false,
            frozen: self.classifier == ClassifierMode::FixedEtf,
            bias: true,
        };
        push(&mut out, "classifier".into(), classifier, &mut d, Stage::Classifier)?;
        self.encoder_out_dim()?;
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    Trainable,
    Frozen,
    /// Non-gradient state such as batch-norm running statistics.
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedParam {
    pub name: String,
    pub tensor: Tensor,
    pub role: ParamRole,
}

/// All weights and state of a model, in a fixed order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Parameters {
    entries: Vec<NamedParam>,
    index: HashMap<String, usize>,
}

impl Parameters {
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor, role: ParamRole) {
        let name = name.into();
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(NamedParam { name, tensor, role });
    }

    pub fn entries(&self) -> &[NamedParam] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].tensor)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    /// Mutable access for in-place updates; names and roles must not change.
    pub(crate) fn entries_mut(&mut self) -> &mut [NamedParam] {
        &mut self.entries
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.entries[idx].tensor
    }

    /// Indices of parameters the optimizer may update.
    pub fn trainable(&self) -> Vec<usize> {
        (0..self.entries.len())
            .filter(|&i| self.entries[i].role == ParamRole::Trainable)
            .collect()
    }

    fn digest(&self, pred: impl Fn(&NamedParam) -> bool) -> String {
        let mut h = Sha256::new();
        for p in self.entries.iter().filter(|p| pred(p)) {
            h.update(p.name.as_bytes());
            for v in p.tensor.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// SHA-256 over the names and bytes of every frozen parameter.
    pub fn frozen_digest(&self) -> String {
        self.digest(|p| p.role == ParamRole::Frozen)
    }

    pub fn full_digest(&self) -> String {
        self.digest(|_| true)
    }
}

/// A model specification together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: Parameters,
    layers: Vec<ResolvedLayer>,
}

fn kaiming_uniform(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / cols as f64).sqrt();
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect(),
    )
}

/// Initializes parameters for `spec`. Trainable affines use Kaiming-uniform
/// weights from a per-layer sub-seed and zero biases; the fixed-ETF projector
/// and classifier take their weights from [`etf::etf_weight`].
pub fn build_model(spec: &ModelSpec, seed_value: u64) -> Result<Model> {
    let layers = spec.layers()?;
    let mut params = Parameters::default();
    for l in &layers {
        match &l.spec {
            LayerSpec::Affine {
                in_dim,
                out_dim,
                frozen,
                bias,
                ..
            } => {
                let etf_weight = match l.stage {
                    Stage::Projector => spec.projector_mode == ProjectorMode::FixedEtf,
                    Stage::Classifier => spec.classifier == ClassifierMode::FixedEtf,
                    Stage::Encoder => false,
                };
                let w = if etf_weight {
                    etf::etf_weight(*out_dim, *in_dim)?
                } else {
                    kaiming_uniform(
                        *out_dim,
                        *in_dim,
                        &mut seed::rng(seed_value, &format!("init/{}", l.name)),
                    )
                };
                let role = if *frozen {
                    ParamRole::Frozen
                } else {
                    ParamRole::Trainable
                };
                params.push(format!("{}.weight", l.name), w, role);
                if *bias {
                    params.push(
                        format!("{}.bias", l.name),
                        Tensor::zeros(vec![*out_dim]),
                        ParamRole::Trainable,
                    );
                }
            }
            LayerSpec::GroupNorm { .. } | LayerSpec::BatchNorm { .. } => {
                let d = l.in_dim;
                params.push(
                    format!("{}.gamma", l.name),
                    Tensor::full(vec![d], 1.0),
                    ParamRole::Trainable,
                );
                params.push(format!("{}.beta", l.name), Tensor::zeros(vec![d]), ParamRole::Trainable);
                if matches!(l.spec, LayerSpec::BatchNorm { .. }) {
                    params.push(
                        format!("{}.running_mean", l.name),
                        Tensor::zeros(vec![d]),
                        ParamRole::Buffer,
                    );
                    params.push(
                        format!("{}.running_var", l.name),
                        Tensor::full(vec![d], 1.0),
                        ParamRole::Buffer,
                    );
                }
            }
            LayerSpec::Relu | LayerSpec::L2Normalize => {}
        }
    }
    Ok(Model {
        spec: spec.clone(),
        params,
        layers,
    })
}

/// A recorded forward pass: the graph, one node per layer output, and the
/// graph leaves that hold trainable parameters.
pub struct ForwardPass {
    pub graph: Graph,
    pub outputs: Vec<(String, Var)>,
    /// `(parameter index, leaf)` for each trainable parameter.
    pub param_leaves: Vec<(usize, Var)>,
    encoder_out: usize,
    projector_out: Option<usize>,
}

impl ForwardPass {
    pub fn encoder_out(&self) -> Var {
        self.outputs[self.encoder_out].1
    }

    pub fn projector_out(&self) -> Option<Var> {
        self.projector_out.map(|i| self.outputs[i].1)
    }

    pub fn logits(&self) -> Var {
        self.outputs.last().expect("model has a classifier").1
    }

    pub fn trace(&self) -> ActivationTrace {
        ActivationTrace {
            entries: self
                .outputs
                .iter()
                .map(|(n, v)| (n.clone(), self.graph.value(*v).clone()))
                .collect(),
            encoder_out: self.encoder_out,
            projector_out: self.projector_out,
        }
    }
}

/// Captured layer outputs of one forward pass, in model order.
#[derive(Clone, Debug)]
pub struct ActivationTrace {
    pub entries: Vec<(String, Tensor)>,
    encoder_out: usize,
    projector_out: Option<usize>,
}

impl ActivationTrace {
    /// Looks up a layer by name. `encoder_out`, `projector_out` and `logits`
    /// are accepted as aliases.
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        let idx = match name {
            "encoder_out" => Some(self.encoder_out),
            "projector_out" => self.projector_out,
            "logits" => Some(self.entries.len() - 1),
            _ => self.entries.iter().position(|(n, _)| n == name),
        }?;
        Some(&self.entries[idx].1)
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn embedding(&self, name: &str, labels: &[usize], num_classes: usize, split: Split) -> Result<EmbeddingSet> {
        let t = self
            .get(name)
            .ok_or_else(|| Error::domain(format!("trace has no layer {name:?}")))?;
        EmbeddingSet::new(t.clone(), labels.to_vec(), num_classes, name, split)
    }
}

impl Model {
    pub fn layers(&self) -> &[ResolvedLayer] {
        &self.layers
    }

    pub fn from_parts(spec: ModelSpec, params: Parameters) -> Result<Self> {
        let layers = spec.layers()?;
        let reference = build_model(&spec, 0)?;
        for p in reference.params.entries() {
            let got = params
                .get(&p.name)
                .ok_or_else(|| Error::Format(format!("missing parameter {}", p.name)))?;
            if got.shape() != p.tensor.shape() {
                return Err(Error::Format(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    p.name,
                    got.shape(),
                    p.tensor.shape()
                )));
            }
        }
        Ok(Self { spec, params, layers })
    }

    /// Post-activation outputs used for layer sweeps: every encoder and
    /// projector relu plus `encoder_out` and `projector_out`.
    pub fn sweep_layers(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        let last_enc = self.layers.iter().rposition(|l| l.stage == Stage::Encoder);
        let last_proj = self.layers.iter().rposition(|l| l.stage == Stage::Projector);
        for (i, l) in self.layers.iter().enumerate() {
            let is_tap = matches!(l.spec, LayerSpec::Relu) && l.stage != Stage::Classifier;
            if is_tap || Some(i) == last_enc || Some(i) == last_proj {
                names.push(l.name.clone());
            }
        }
        names.dedup();
        names
    }

    /// Runs the network. Train mode updates batch-norm running statistics.
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<ForwardPass> {
        let (pass, updates) = self.run(x, mode)?;
        for (layer, mean, var) in updates {
            let momentum = match self.layers[layer].spec {
                LayerSpec::BatchNorm { momentum } => momentum,
                _ => unreachable!(),
            };
            let name = &self.layers[layer].name;
            let im = self.params.position(&format!("{name}.running_mean")).unwrap();
            let iv = self.params.position(&format!("{name}.running_var")).unwrap();
            let mut state = BatchNormState {
                running_mean: self.params.entries[im].tensor.data().to_vec(),
                running_var: self.params.entries[iv].tensor.data().to_vec(),
            };
            layers::update_running(&mut state, &mean, &var, momentum);
            self.params
                .tensor_mut(im)
                .data_mut()
                .copy_from_slice(&state.running_mean);
            self.params
                .tensor_mut(iv)
                .data_mut()
                .copy_from_slice(&state.running_var);
        }
        Ok(pass)
    }

    pub fn forward_eval(&self, x: &Tensor) -> Result<ForwardPass> {
        Ok(self.run(x, Mode::Eval)?.0)
    }

    /// Eval-mode trace over a whole dataset.
    pub fn trace(&self, x: &Tensor) -> Result<ActivationTrace> {
        Ok(self.forward_eval(x)?.trace())
    }

    #[allow(clippy::type_complexity)]
    fn run(&self, x: &Tensor, mode: Mode) -> Result<(ForwardPass, Vec<(usize, Vec<f64>, Vec<f64>)>)> {
        if x.shape().len() != 2 || x.cols() != self.spec.input_dim {
            return Err(Error::Shape {
                op: "forward",
                lhs: x.shape().to_vec(),
                rhs: vec![self.spec.input_dim],
            });
        }
        let mut g = Graph::new();
        let mut param_leaves = Vec::new();
        let leaf = |g: &mut Graph, name: String, leaves: &mut Vec<(usize, Var)>| -> Var {
            let idx = self.params.position(&name).expect("parameter exists for layer");
            let p = &self.params.entries[idx];
            if p.role == ParamRole::Trainable {
                let v = g.param(p.tensor.clone());
                leaves.push((idx, v));
                v
            } else {
                g.constant(p.tensor.clone())
            }
        };

        let mut h = g.constant(x.clone());
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut updates = Vec::new();
        for (li, l) in self.layers.iter().enumerate() {
            let named = |e: Error| match e {
                Error::NonFinite(_) => Error::NonFinite(l.name.clone()),
                other => other,
            };
            h = match &l.spec {
                LayerSpec::Affine {
                    weight_standardized,
                    bias,
                    ..
                } => {
                    let mut w = leaf(&mut g, format!("{}.weight", l.name), &mut param_leaves);
                    if *weight_standardized {
                        w = g.standardize_rows(w, WEIGHT_STANDARDIZE_EPS).map_err(named)?;
                    }
                    let wt = g.transpose(w)?;
                    let mut y = g.matmul(h, wt).map_err(named)?;
                    if *bias {
                        let b = leaf(&mut g, format!("{}.bias", l.name), &mut param_leaves);
                        y = g.add_row_vector(y, b).map_err(named)?;
                    }
                    y
                }
                LayerSpec::Relu => g.relu(h)?,
                LayerSpec::GroupNorm { num_groups } => {
                    let gamma = leaf(&mut g, format!("{}.gamma", l.name), &mut param_leaves);
                    let beta = leaf(&mut g, format!("{}.beta", l.name), &mut param_leaves);
                    layers::group_norm_graph(&mut g, h, *num_groups, gamma, beta, GROUP_NORM_EPS).map_err(named)?
                }
                LayerSpec::BatchNorm { .. } => {
                    let gamma = leaf(&mut g, format!("{}.gamma", l.name), &mut param_leaves);
                    let beta = leaf(&mut g, format!("{}.beta", l.name), &mut param_leaves);
                    let state = BatchNormState {
                        running_mean: self
                            .params
                            .get(&format!("{}.running_mean", l.name))
                            .unwrap()
                            .data()
                            .to_vec(),
                        running_var: self
                            .params
                            .get(&format!("{}.running_var", l.name))
                            .unwrap()
                            .data()
                            .to_vec(),
                    };
                    let (y, moments) = layers::batch_norm_graph(&mut g, h, &state, gamma, beta, mode, BATCH_NORM_EPS)
                        .map_err(named)?;
                    if let Some((m, v)) = moments {
                        updates.push((li, m, v));
                    }
                    y
                }
                LayerSpec::L2Normalize => g.row_l2_normalize(h, NORMALIZE_EPS).map_err(named)?,
            };
            outputs.push((l.name.clone(), h));
        }

        let encoder_out = self.layers.iter().rposition(|l| l.stage == Stage::Encoder).unwrap_or(0);
        let projector_out = self.layers.iter().rposition(|l| l.stage == Stage::Projector);
        Ok((
            ForwardPass {
                graph: g,
                outputs,
                param_leaves,
                encoder_out,
                projector_out,
            },
            updates,
        ))
    }
}
