//! Energy scores, FPR at a target TPR, linear probes, and the per-layer sweep.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::collapse::{self, ClassifierSnapshot, EmbeddingSet};
use crate::datakit::{format_sig, seed, split_indices, Dataset, Split};
use crate::diffcore::{self, Graph, Tensor};
use crate::error::{Error, Result};
use crate::netlib::Model;
use crate::objective;
use crate::runner::optim::{OptimConfig, Optimizer};

pub const SWEEP_HEADER: &str = "layer,ood_set,nc1,nc2,nc3,nc4,rankme,entropy,probe_err,fpr95,id_err";

/// Negative free energy `log Σₖ exp(fₖ)` per row; higher means more ID.
pub fn energy_score(logits: &Tensor) -> Vec<f64> {
    diffcore::log_sum_exp(logits)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSet {
    pub id_scores: Vec<f64>,
    pub ood_scores: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub threshold: f64,
    pub fpr: f64,
    pub n_id: usize,
    pub n_ood: usize,
}

/// Threshold at the `⌈tpr·N_id⌉`-th largest ID score; the FPR is the share
/// of OOD scores at or above it.
pub fn fpr_at_tpr(scores: &ScoreSet, tpr: f64) -> Result<DetectionReport> {
    let (n_id, n_ood) = (scores.id_scores.len(), scores.ood_scores.len());
    if n_id == 0 || n_ood == 0 {
        return Err(Error::domain("detection needs both ID and OOD scores"));
    }
    if !(tpr > 0.0 && tpr <= 1.0) {
        return Err(Error::domain(format!("tpr must be in (0, 1], got {tpr}")));
    }
    if scores
        .id_scores
        .iter()
        .chain(&scores.ood_scores)
        .any(|s| !s.is_finite())
    {
        return Err(Error::NonFinite("detection scores".into()));
    }
    let mut sorted = scores.id_scores.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    // the small slack keeps e.g. 0.95·20 from rounding up to 20
    let k = ((tpr * n_id as f64) - 1e-9).ceil().max(1.0) as usize;
    let threshold = sorted[k.min(n_id) - 1];
    let fp = scores.ood_scores.iter().filter(|&&s| s >= threshold).count();
    Ok(DetectionReport {
        threshold,
        fpr: fp as f64 / n_ood as f64,
        n_id,
        n_ood,
    })
}

/// Top-1 error of `logits` against `labels`; ties go to the lowest class.
pub fn top1_error(logits: &Tensor, labels: &[usize]) -> f64 {
    let k = logits.cols();
    let wrong = logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &l)| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best != l
        })
        .count();
    wrong as f64 / labels.len().max(1) as f64
}

/// Top-1 error of the model's final logits on held-out ID data.
pub fn id_error(model: &Model, id_test: &Dataset) -> Result<f64> {
    let logits = model.forward_eval(&id_test.features)?;
    Ok(top1_error(logits.graph.value(logits.logits()), &id_test.labels))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub label_smoothing: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            batch_size: 128,
            label_smoothing: 0.1,
        }
    }
}

/// Affine head `x Wᵀ + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearProbe {
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.weight.cols() {
            return Err(Error::Shape {
                op: "probe",
                lhs: x.shape().to_vec(),
                rhs: self.weight.shape().to_vec(),
            });
        }
        let (n, k) = (x.rows(), self.weight.rows());
        let mut out = diffcore::matmul(x, &self.weight.transposed())?.into_data();
        for row in out.chunks_mut(k) {
            row.iter_mut().zip(self.bias.data()).for_each(|(o, b)| *o += b);
        }
        Ok(Tensor::matrix(n, k, out))
    }

    pub fn snapshot(&self) -> Result<ClassifierSnapshot> {
        ClassifierSnapshot::new(self.weight.clone(), self.bias.data().to_vec())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub layer_name: String,
    pub top1_error: f64,
    /// Epoch (1-based; 0 for the untrained head) at which the best error occurred.
    pub best_epoch: usize,
    pub epochs: usize,
    pub num_classes: usize,
    pub dim: usize,
}

/// Trains a single affine layer with label-smoothed cross-entropy and AdamW.
/// Returns the best held-out error over epochs and the final head.
pub fn train_linear_probe(
    train: &EmbeddingSet,
    test: &EmbeddingSet,
    cfg: &ProbeConfig,
    seed_value: u64,
) -> Result<(ProbeReport, LinearProbe)> {
    if train.dim() != test.dim() {
        return Err(Error::Shape {
            op: "probe",
            lhs: vec![train.dim()],
            rhs: vec![test.dim()],
        });
    }
    if train.num_classes != test.num_classes {
        return Err(Error::domain(format!(
            "probe label spaces differ: {} vs {} classes",
            train.num_classes, test.num_classes
        )));
    }
    if train.is_empty() || test.is_empty() || cfg.batch_size == 0 {
        return Err(Error::domain(
            "probe needs nonempty train/test sets and a positive batch size",
        ));
    }
    let (k, d) = (train.num_classes, train.dim());
    let mut rng = seed::rng(seed_value, "probe-init");
    let bound = (6.0 / d as f64).sqrt();
    let mut probe = LinearProbe {
        weight: Tensor::matrix(k, d, (0..k * d).map(|_| rng.random_range(-bound..bound)).collect()),
        bias: Tensor::zeros(vec![k]),
    };
    let mut opt = Optimizer::new(OptimConfig::adamw(cfg.weight_decay));
    let eval = |p: &LinearProbe| -> Result<f64> { Ok(top1_error(&p.logits(&test.features)?, &test.labels)) };

    let mut best = (eval(&probe)?, 0);
    if cfg.epochs > 0 {
        best.0 = f64::INFINITY;
    }
    for epoch in 0..cfg.epochs {
        for batch in crate::datakit::batches(train.len(), cfg.batch_size, seed_value, epoch, false)? {
            let x = train.features.select_rows(&batch);
            let labels: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
            let mut g = Graph::new();
            let xv = g.constant(x);
            let w = g.param(probe.weight.clone());
            let b = g.param(probe.bias.clone());
            let wt = g.transpose(w)?;
            let z = g.matmul(xv, wt)?;
            let z = g.add_row_vector(z, b)?;
            let loss = objective::ce_label_smoothing(&mut g, z, &labels, cfg.label_smoothing)?;
            g.backward(loss)?;
            let (gw, gb) = (g.grad(w).unwrap().clone(), g.grad(b).unwrap().clone());
            opt.step(
                cfg.learning_rate,
                [(probe.weight.data_mut(), gw.data()), (probe.bias.data_mut(), gb.data())],
            )?;
        }
        let err = eval(&probe)?;
        if err < best.0 {
            best = (err, epoch + 1);
        }
    }
    Ok((
        ProbeReport {
            layer_name: train.layer_name.clone(),
            top1_error: best.0,
            best_epoch: best.1,
            epochs: cfg.epochs,
            num_classes: k,
            dim: d,
        },
        probe,
    ))
}

/// Which logits feed the energy score.
#[derive(Clone, Debug)]
pub enum Tap {
    /// The full network's classifier output.
    ProjectorLogits,
    /// An auxiliary affine head trained on frozen `encoder_out`.
    EncoderHead(LinearProbe),
    /// The trained classifier applied directly to `encoder_out`; needs the
    /// encoder width to equal the classifier input width.
    EncoderClassifier,
    /// A probe trained on ID data at one layer.
    LayerProbe { layer: String, probe: LinearProbe },
}

impl Tap {
    pub fn name(&self) -> String {
        match self {
            Tap::ProjectorLogits => "projector".into(),
            Tap::EncoderHead(_) => "encoder_head".into(),
            Tap::EncoderClassifier => "encoder_classifier".into(),
            Tap::LayerProbe { layer, .. } => format!("probe:{layer}"),
        }
    }
}

/// Logits of `x` at `tap`.
pub fn tap_logits(model: &Model, tap: &Tap, x: &Tensor) -> Result<Tensor> {
    let trace = model.trace(x)?;
    let layer = |name: &str| {
        trace
            .get(name)
            .cloned()
            .ok_or_else(|| Error::domain(format!("tap layer {name:?} not in the model")))
    };
    match tap {
        Tap::ProjectorLogits => layer("logits"),
        Tap::EncoderHead(head) => head.logits(&layer("encoder_out")?),
        Tap::EncoderClassifier => {
            let w = model.params.get("classifier.weight").expect("classifier weight");
            let b = model
                .params
                .get("classifier.bias")
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(vec![w.rows()]));
            LinearProbe {
                weight: w.clone(),
                bias: b,
            }
            .logits(&layer("encoder_out")?)
        }
        Tap::LayerProbe { layer: name, probe } => probe.logits(&layer(name)?),
    }
}

/// FPR95 of the energy score at `tap`, ID test data positive.
pub fn detection_error(model: &Model, id_test: &Dataset, ood: &Dataset, tap: &Tap) -> Result<DetectionReport> {
    if id_test.split == Split::Ood || ood.split != Split::Ood {
        return Err(Error::domain("detection expects ID data and an OOD-tagged set"));
    }
    let scores = ScoreSet {
        id_scores: energy_score(&tap_logits(model, tap, &id_test.features)?),
        ood_scores: energy_score(&tap_logits(model, tap, &ood.features)?),
    };
    fpr_at_tpr(&scores, 0.95)
}

/// Auxiliary encoder head: the probe recipe trained on ID-train `encoder_out`.
pub fn fit_encoder_head(
    model: &Model,
    id_train: &Dataset,
    id_test: &Dataset,
    cfg: &ProbeConfig,
    seed_value: u64,
) -> Result<(ProbeReport, LinearProbe)> {
    let tr = model.trace(&id_train.features)?.embedding(
        "encoder_out",
        &id_train.labels,
        id_train.num_classes,
        Split::IdTrain,
    )?;
    let te = model.trace(&id_test.features)?.embedding(
        "encoder_out",
        &id_test.labels,
        id_test.num_classes,
        Split::IdTest,
    )?;
    train_linear_probe(&tr, &te, cfg, seed::derive_seed(seed_value, "encoder-head"))
}

/// A named OOD dataset split into probe-train and probe-test halves.
#[derive(Clone, Debug)]
pub struct OodSet {
    pub name: String,
    pub all: Dataset,
    pub probe_train: Dataset,
    pub probe_test: Dataset,
}

impl OodSet {
    pub fn new(name: impl Into<String>, data: Dataset, seed_value: u64) -> Result<Self> {
        let name = name.into();
        if data.split != Split::Ood {
            return Err(Error::domain(format!("OOD set {name} is not tagged as OOD")));
        }
        let parts = split_indices(
            &data.labels,
            data.num_classes,
            &[0.5, 0.5],
            seed::derive_seed(seed_value, &format!("ood-split/{name}")),
        )?;
        Ok(Self {
            probe_train: data.subset(&parts[0]),
            probe_test: data.subset(&parts[1]),
            all: data,
            name,
        })
    }
}

/// OOD-probe error at `layer` for one OOD set.
pub fn ood_probe(model: &Model, layer: &str, ood: &OodSet, cfg: &ProbeConfig, seed_value: u64) -> Result<ProbeReport> {
    let k = ood.all.num_classes;
    let tr = model
        .trace(&ood.probe_train.features)?
        .embedding(layer, &ood.probe_train.labels, k, Split::Ood)?;
    let te = model
        .trace(&ood.probe_test.features)?
        .embedding(layer, &ood.probe_test.labels, k, Split::Ood)?;
    let s = seed::derive_seed(seed_value, &format!("probe/{layer}/{}", ood.name));
    Ok(train_linear_probe(&tr, &te, cfg, s)?.0)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub layer: String,
    pub ood_set: String,
    pub nc1: f64,
    pub nc2: f64,
    pub nc3: f64,
    pub nc4: f64,
    pub rankme: f64,
    pub entropy: f64,
    pub probe_err: f64,
    pub fpr95: f64,
    pub id_err: f64,
}

/// For each post-activation layer: collapse metrics on ID-test embeddings
/// (NC2–NC4 against a per-layer ID probe), the ID probe's energy-score FPR95
/// and ID error, and an OOD probe per OOD set. One row per (layer, OOD set).
pub fn layer_sweep(
    model: &Model,
    id_train: &Dataset,
    id_test: &Dataset,
    oods: &[OodSet],
    cfg: &ProbeConfig,
    seed_value: u64,
) -> Result<Vec<SweepRow>> {
    let layers = model.sweep_layers();
    if layers.len() < 2 || oods.is_empty() {
        return Err(Error::domain("layer sweep needs at least two layers and one OOD set"));
    }
    let k = id_train.num_classes;
    let tr_trace = model.trace(&id_train.features)?;
    let te_trace = model.trace(&id_test.features)?;
    let ood_traces: Vec<_> = oods
        .iter()
        .map(|o| model.trace(&o.all.features))
        .collect::<Result<_>>()?;
    let probe_traces: Vec<_> = oods
        .iter()
        .map(|o| {
            Ok((
                model.trace(&o.probe_train.features)?,
                model.trace(&o.probe_test.features)?,
            ))
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    for layer in &layers {
        let tr = tr_trace.embedding(layer, &id_train.labels, k, Split::IdTrain)?;
        let te = te_trace.embedding(layer, &id_test.labels, k, Split::IdTest)?;
        let (_, id_probe) = train_linear_probe(
            &tr,
            &te,
            cfg,
            seed::derive_seed(seed_value, &format!("id-probe/{layer}")),
        )?;
        let snap = id_probe.snapshot()?;
        let nc1 = collapse::nc1(&te)?;
        let nc2 = collapse::nc2(&snap)?;
        let nc3 = collapse::nc3(&snap, &te)?;
        let nc4 = collapse::nc4(&snap, &te)?;
        let rankme = collapse::rankme(&te.features, collapse::RANKME_EPSILON)?;
        let entropy = objective::knn_entropy_estimate(&te.features)?;
        let id_logits = id_probe.logits(&te.features)?;
        let id_err = top1_error(&id_logits, &id_test.labels);
        let id_scores = energy_score(&id_logits);

        for (oi, ood) in oods.iter().enumerate() {
            let feats = ood_traces[oi].get(layer).expect("layer in trace");
            let det = fpr_at_tpr(
                &ScoreSet {
                    id_scores: id_scores.clone(),
                    ood_scores: energy_score(&id_probe.logits(feats)?),
                },
                0.95,
            )?;
            let ko = ood.all.num_classes;
            let (ptr, pte) = &probe_traces[oi];
            let ptr = ptr.embedding(layer, &ood.probe_train.labels, ko, Split::Ood)?;
            let pte = pte.embedding(layer, &ood.probe_test.labels, ko, Split::Ood)?;
            let s = seed::derive_seed(seed_value, &format!("probe/{layer}/{}", ood.name));
            let probe = train_linear_probe(&ptr, &pte, cfg, s)?.0;
            rows.push(SweepRow {
                layer: layer.clone(),
                ood_set: ood.name.clone(),
                nc1,
                nc2,
                nc3,
                nc4,
                rankme,
                entropy,
                probe_err: probe.top1_error,
                fpr95: det.fpr,
                id_err,
            });
        }
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in rows {
        let nums = [
            r.nc1,
            r.nc2,
            r.nc3,
            r.nc4,
            r.rankme,
            r.entropy,
            r.probe_err,
            r.fpr95,
            r.id_err,
        ];
        out.push_str(&r.layer);
        out.push(',');
        out.push_str(&r.ood_set);
        for v in nums {
            out.push(',');
            out.push_str(&format_sig(v, 6));
        }
        out.push('\n');
    }
    out
}

/// Pearson correlations of NC1 with the min-max normalized FPR95 and probe
/// error, normalizing within each OOD set and pooling the pairs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SweepCorrelation {
    pub nc1_vs_fpr95: f64,
    pub nc1_vs_probe_err: f64,
}

pub fn sweep_correlation(rows: &[SweepRow]) -> Result<SweepCorrelation> {
    let mut groups: BTreeMap<&str, Vec<&SweepRow>> = BTreeMap::new();
    for r in rows {
        groups.entry(&r.ood_set).or_default().push(r);
    }
    let (mut nc1, mut fpr, mut perr) = (Vec::new(), Vec::new(), Vec::new());
    for g in groups.values() {
        nc1.extend(g.iter().map(|r| r.nc1));
        fpr.extend(collapse::minmax_normalize(&g.iter().map(|r| r.fpr95).collect::<Vec<_>>()).0);
        perr.extend(collapse::minmax_normalize(&g.iter().map(|r| r.probe_err).collect::<Vec<_>>()).0);
    }
    Ok(SweepCorrelation {
        nc1_vs_fpr95: collapse::pearson(&nc1, &fpr)?,
        nc1_vs_probe_err: collapse::pearson(&nc1, &perr)?,
    })
}
