//! Data preparation, post-training analyses, and report files.

use std::fs;
use std::path::Path;

use serde::Serialize;

use super::config::{DataConfig, FileSource, TrainConfig};
use super::train::{train, RunRecord};
use crate::collapse::{self, ClassifierSnapshot, NcReport};
use crate::datakit::{format_sig, gen_id_ood, load_csv, load_idx, seed, split, write_labeled_csv, Dataset, Split};
use crate::error::{Error, Result};
use crate::netlib::{save_checkpoint, Model};
use crate::oodeval::{self, LinearProbe, OodSet, ProbeReport, SweepRow, Tap};

/// ID train/test splits and named OOD sets.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub id_train: Dataset,
    pub id_test: Dataset,
    pub oods: Vec<OodSet>,
}

fn load_source(src: &FileSource) -> Result<Dataset> {
    match src {
        FileSource::Csv { path, has_header } => load_csv(path, *has_header),
        FileSource::Idx { images, labels } => load_idx(images, labels),
    }
}

pub fn prepare_data(cfg: &TrainConfig) -> Result<PreparedData> {
    let (id_train, id_test, oods) = match &cfg.data {
        DataConfig::Synthetic(s) => {
            let specs: Vec<_> = s.oods.iter().map(|o| (o.spec.clone(), o.n)).collect();
            let data = gen_id_ood(&s.id, s.n_id, &specs, seed::derive_seed(cfg.seed, "data"))?;
            let parts = split(&data.id, &s.id_split, seed::derive_seed(cfg.seed, "id-split"))?;
            let oods = s.oods.iter().map(|o| o.name.clone()).zip(data.oods).collect::<Vec<_>>();
            (parts[0].clone(), parts[1].clone(), oods)
        }
        DataConfig::Files(f) => {
            let train = load_source(&f.id_train)?;
            let test = load_source(&f.id_test)?;
            if train.label_map != test.label_map {
                return Err(Error::domain("ID train and test files have different label sets"));
            }
            let oods = f
                .oods
                .iter()
                .map(|o| Ok((o.name.clone(), load_source(&o.source)?.with_split(Split::Ood))))
                .collect::<Result<Vec<_>>>()?;
            (train, test, oods)
        }
    };
    let oods = oods
        .into_iter()
        .map(|(name, ds)| OodSet::new(name, ds, cfg.seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(PreparedData {
        id_train: id_train.with_split(Split::IdTrain),
        id_test: id_test.with_split(Split::IdTest),
        oods,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct DetectionRow {
    pub tap: String,
    pub ood_set: String,
    pub threshold: f64,
    pub fpr95: f64,
    pub n_id: usize,
    pub n_ood: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct ProbeRow {
    pub tap: String,
    pub ood_set: String,
    pub top1_error: f64,
    pub best_epoch: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct SummaryRow {
    pub metric: String,
    pub encoder: f64,
    pub projector: f64,
    pub delta_pct: f64,
}

/// A trained model with its data and the auxiliary encoder head.
pub struct Experiment {
    pub cfg: TrainConfig,
    pub data: PreparedData,
    pub model: Model,
    pub record: Option<RunRecord>,
    pub encoder_head: LinearProbe,
    pub encoder_head_report: ProbeReport,
}

impl Experiment {
    /// Prepares data and trains from scratch.
    pub fn train(cfg: &TrainConfig) -> Result<Self> {
        let data = prepare_data(cfg)?;
        let record = train(cfg, &data.id_train)?;
        let model = record.model.clone();
        Self::assemble(cfg, data, model, Some(record))
    }

    /// Prepares data and reuses an already trained model.
    pub fn with_model(cfg: &TrainConfig, model: Model) -> Result<Self> {
        let data = prepare_data(cfg)?;
        Self::assemble(cfg, data, model, None)
    }

    fn assemble(cfg: &TrainConfig, data: PreparedData, model: Model, record: Option<RunRecord>) -> Result<Self> {
        let (encoder_head_report, encoder_head) =
            oodeval::fit_encoder_head(&model, &data.id_train, &data.id_test, &cfg.probe, cfg.seed)?;
        Ok(Self {
            cfg: cfg.clone(),
            data,
            model,
            record,
            encoder_head,
            encoder_head_report,
        })
    }

    pub fn has_projector(&self) -> bool {
        self.model.layers().iter().any(|l| l.name.starts_with("projector"))
    }

    fn classifier(&self) -> Result<ClassifierSnapshot> {
        let w = self
            .model
            .params
            .get("classifier.weight")
            .expect("classifier weight")
            .clone();
        let b = self
            .model
            .params
            .get("classifier.bias")
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; w.rows()]);
        ClassifierSnapshot::new(w, b)
    }

    /// NC report for `encoder_out` (against the encoder head) and, when the
    /// model has a projector, `projector_out` (against the trained classifier).
    pub fn nc_reports(&self) -> Result<Vec<(String, NcReport)>> {
        let d = &self.data.id_test;
        let trace = self.model.trace(&d.features)?;
        let enc = trace.embedding("encoder_out", &d.labels, d.num_classes, Split::IdTest)?;
        let mut out = vec![(
            "encoder".to_string(),
            collapse::nc_report(&enc, Some(&self.encoder_head.snapshot()?))?,
        )];
        if self.has_projector() {
            let proj = trace.embedding("projector_out", &d.labels, d.num_classes, Split::IdTest)?;
            out.push((
                "projector".to_string(),
                collapse::nc_report(&proj, Some(&self.classifier()?))?,
            ));
        }
        Ok(out)
    }

    pub fn taps(&self) -> Vec<Tap> {
        let mut taps = vec![Tap::ProjectorLogits, Tap::EncoderHead(self.encoder_head.clone())];
        let enc_dim = self
            .model
            .layers()
            .iter()
            .rfind(|l| l.name.starts_with("encoder"))
            .map(|l| l.out_dim);
        let cls_dim = self.model.layers().last().map(|l| l.in_dim);
        if self.has_projector() && enc_dim == cls_dim {
            taps.push(Tap::EncoderClassifier);
        }
        taps
    }

    pub fn detection(&self) -> Result<Vec<DetectionRow>> {
        let mut rows = Vec::new();
        for tap in self.taps() {
            for o in &self.data.oods {
                let r = oodeval::detection_error(&self.model, &self.data.id_test, &o.all, &tap)?;
                rows.push(DetectionRow {
                    tap: tap.name(),
                    ood_set: o.name.clone(),
                    threshold: r.threshold,
                    fpr95: r.fpr,
                    n_id: r.n_id,
                    n_ood: r.n_ood,
                });
            }
        }
        Ok(rows)
    }

    /// OOD probes on `encoder_out` and, when present, `projector_out`.
    pub fn probes(&self) -> Result<Vec<ProbeRow>> {
        let mut taps = vec![("encoder", "encoder_out")];
        if self.has_projector() {
            taps.push(("projector", "projector_out"));
        }
        let mut rows = Vec::new();
        for (tap, layer) in taps {
            for o in &self.data.oods {
                let r = oodeval::ood_probe(&self.model, layer, o, &self.cfg.probe, self.cfg.seed)?;
                rows.push(ProbeRow {
                    tap: tap.into(),
                    ood_set: o.name.clone(),
                    top1_error: r.top1_error,
                    best_epoch: r.best_epoch,
                });
            }
        }
        Ok(rows)
    }

    pub fn sweep(&self) -> Result<Vec<SweepRow>> {
        oodeval::layer_sweep(
            &self.model,
            &self.data.id_train,
            &self.data.id_test,
            &self.data.oods,
            &self.cfg.probe,
            self.cfg.seed,
        )
    }

    pub fn id_errors(&self) -> Result<(f64, f64)> {
        let d = &self.data.id_test;
        let enc = oodeval::top1_error(
            &oodeval::tap_logits(&self.model, &Tap::EncoderHead(self.encoder_head.clone()), &d.features)?,
            &d.labels,
        );
        Ok((enc, oodeval::id_error(&self.model, d)?))
    }
}

/// Encoder-vs-projector comparison: NC1, detection error (FPR95 of the
/// encoder head vs the full network), OOD probe error and ID error, each
/// averaged over OOD sets, with the percentage change.
pub fn summarize(
    nc: &[(String, NcReport)],
    det: &[DetectionRow],
    probes: &[ProbeRow],
    id_err: (f64, f64),
) -> Result<Vec<SummaryRow>> {
    let mean = |vals: Vec<f64>| vals.iter().sum::<f64>() / vals.len().max(1) as f64;
    let pick_nc = |tap: &str| nc.iter().find(|(t, _)| t == tap).map(|(_, r)| r.nc1);
    let (Some(e_nc1), Some(p_nc1)) = (pick_nc("encoder"), pick_nc("projector")) else {
        return Ok(Vec::new());
    };
    let det_of = |tap: &str| mean(det.iter().filter(|r| r.tap == tap).map(|r| r.fpr95).collect());
    let probe_of = |tap: &str| mean(probes.iter().filter(|r| r.tap == tap).map(|r| r.top1_error).collect());
    let rows = [
        ("nc1", e_nc1, p_nc1),
        ("det_err", det_of("encoder_head"), det_of("projector")),
        ("gen_err", probe_of("encoder"), probe_of("projector")),
        ("id_err", id_err.0, id_err.1),
    ];
    rows.into_iter()
        .map(|(m, e, p)| {
            Ok(SummaryRow {
                metric: m.into(),
                encoder: e,
                projector: p,
                delta_pct: if e == 0.0 {
                    f64::NAN
                } else {
                    collapse::pct_change(e, p)?
                },
            })
        })
        .collect()
}

fn f(v: f64) -> String {
    format_sig(v, 6)
}

pub fn nc_csv(rows: &[(String, NcReport)]) -> String {
    let mut out = String::from("tap,nc1,nc2,nc3,nc4,rankme,entropy\n");
    for (tap, r) in rows {
        out.push_str(&format!(
            "{tap},{},{},{},{},{},{}\n",
            f(r.nc1),
            f(r.nc2),
            f(r.nc3),
            f(r.nc4),
            f(r.rankme),
            f(r.entropy_est)
        ));
    }
    out
}

pub fn detection_csv(rows: &[DetectionRow]) -> String {
    let mut out = String::from("tap,ood_set,threshold,fpr95,n_id,n_ood\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.tap,
            r.ood_set,
            f(r.threshold),
            f(r.fpr95),
            r.n_id,
            r.n_ood
        ));
    }
    out
}

pub fn probe_csv(rows: &[ProbeRow]) -> String {
    let mut out = String::from("tap,ood_set,top1_error,best_epoch\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.tap,
            r.ood_set,
            f(r.top1_error),
            r.best_epoch
        ));
    }
    out
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from("metric,encoder,projector,delta_pct\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.metric,
            f(r.encoder),
            f(r.projector),
            f(r.delta_pct)
        ));
    }
    out
}

pub(crate) fn write_file(dir: &Path, name: &str, text: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub(crate) fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Metadata written to `run.json`. Only `wall_clock_seconds` varies between
/// identical runs.
pub fn run_metadata(cfg: &TrainConfig, record: Option<&RunRecord>, extra: serde_json::Value) -> serde_json::Value {
    let mut meta = serde_json::json!({
        "config": cfg,
        "seed": cfg.seed,
        "generator": seed::GENERATOR_ID,
        "version": env!("CARGO_PKG_VERSION"),
    });
    if let Some(r) = record {
        meta["epochs"] = serde_json::to_value(&r.epochs).expect("logs serialize");
        meta["frozen_digest_before"] = r.frozen_digest_before.clone().into();
        meta["frozen_digest_after"] = r.frozen_digest_after.clone().into();
        meta["final_params_digest"] = r.model.params.full_digest().into();
        meta["wall_clock_seconds"] = r.wall_clock_seconds.into();
    }
    if let serde_json::Value::Object(m) = extra {
        for (k, v) in m {
            meta[k] = v;
        }
    }
    meta
}

/// Writes the checkpoint, loss log and `run.json` of a training run.
pub fn write_training(dir: &Path, cfg: &TrainConfig, record: &RunRecord) -> Result<()> {
    ensure_dir(dir)?;
    save_checkpoint(dir.join("checkpoint.ncc"), &record.model, cfg.seed)?;
    write_file(dir, "losses.csv", &record.losses_csv())?;
    let meta = run_metadata(cfg, Some(record), serde_json::json!({}));
    write_file(
        dir,
        "run.json",
        &(serde_json::to_string_pretty(&meta).expect("json") + "\n"),
    )
}

/// Everything `run_experiment` computed.
pub struct ExperimentReport {
    pub nc: Vec<(String, NcReport)>,
    pub detection: Vec<DetectionRow>,
    pub probes: Vec<ProbeRow>,
    pub sweep: Vec<SweepRow>,
    pub summary: Vec<SummaryRow>,
    pub id_err: (f64, f64),
}

impl ExperimentReport {
    pub fn nc1(&self, tap: &str) -> Option<f64> {
        self.nc.iter().find(|(t, _)| t == tap).map(|(_, r)| r.nc1)
    }

    pub fn rankme(&self, tap: &str) -> Option<f64> {
        self.nc.iter().find(|(t, _)| t == tap).map(|(_, r)| r.rankme)
    }

    pub fn summary_row(&self, metric: &str) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.metric == metric)
    }
}

/// Options controlling which analyses run.
#[derive(Clone, Copy, Debug)]
pub struct ExperimentOptions {
    pub sweep: bool,
}

impl Default for ExperimentOptions {
    fn default() -> Self {
        Self { sweep: true }
    }
}

/// Trains, evaluates, and (when `out_dir` is given) writes every report.
pub fn run_experiment(
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    opts: ExperimentOptions,
) -> Result<(Experiment, ExperimentReport)> {
    let exp = Experiment::train(cfg)?;
    let report = evaluate(&exp, opts)?;
    if let Some(dir) = out_dir {
        write_report(dir, &exp, &report)?;
    }
    Ok((exp, report))
}

pub fn evaluate(exp: &Experiment, opts: ExperimentOptions) -> Result<ExperimentReport> {
    let nc = exp.nc_reports()?;
    let detection = exp.detection()?;
    let probes = exp.probes()?;
    let sweep = if opts.sweep { exp.sweep()? } else { Vec::new() };
    let id_err = exp.id_errors()?;
    let summary = summarize(&nc, &detection, &probes, id_err)?;
    Ok(ExperimentReport {
        nc,
        detection,
        probes,
        sweep,
        summary,
        id_err,
    })
}

pub fn write_report(dir: &Path, exp: &Experiment, report: &ExperimentReport) -> Result<()> {
    ensure_dir(dir)?;
    if let Some(record) = &exp.record {
        write_training(dir, &exp.cfg, record)?;
    }
    write_file(dir, "nc_report.csv", &nc_csv(&report.nc))?;
    write_file(dir, "detection.csv", &detection_csv(&report.detection))?;
    write_file(dir, "probe.csv", &probe_csv(&report.probes))?;
    if !report.sweep.is_empty() {
        write_file(dir, "sweep.csv", &oodeval::sweep_csv(&report.sweep))?;
    }
    write_file(dir, "summary.csv", &summary_csv(&report.summary))
}

/// Writes `label,dim_0,...` rows of the activations at `tap` (a layer name
/// or `encoder_out`/`projector_out`/`logits`) with 9 significant digits.
pub fn export_embeddings(model: &Model, data: &Dataset, tap: &str, path: impl AsRef<Path>) -> Result<()> {
    let trace = model.trace(&data.features)?;
    let feats = trace
        .get(tap)
        .ok_or_else(|| Error::Usage(format!("unknown tap {tap:?}; layers are {:?}", trace.names())))?;
    write_labeled_csv(path, feats, &data.labels, data.label_map.as_deref(), 9)
}
