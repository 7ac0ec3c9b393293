use std::time::Instant;

use serde::Serialize;

use super::config::{Schedule, TrainConfig};
use super::optim::{lr_at, OptimConfig, Optimizer, OptimizerKind};
use crate::datakit::{batches, seed, Dataset, Split};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::netlib::{build_model, Mode, Model, ParamRole};
use crate::objective::total_loss;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Sample-weighted means over the epoch's batches.
    pub loss: f64,
    pub cls: f64,
    pub reg: f64,
    /// Learning rate of the epoch's first step.
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct RunRecord {
    pub epochs: Vec<EpochLog>,
    pub model: Model,
    pub seed: u64,
    pub frozen_digest_before: String,
    pub frozen_digest_after: String,
    pub wall_clock_seconds: f64,
}

impl RunRecord {
    pub fn losses_csv(&self) -> String {
        use crate::datakit::format_sig;
        let mut out = String::from("epoch,loss,cls,reg,lr\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.epoch,
                format_sig(e.loss, 9),
                format_sig(e.cls, 9),
                format_sig(e.reg, 9),
                format_sig(e.lr, 9)
            ));
        }
        out
    }
}

fn optim_config(cfg: &TrainConfig) -> OptimConfig {
    OptimConfig {
        kind: cfg.optimizer,
        weight_decay: cfg.weight_decay,
        momentum: if cfg.optimizer == OptimizerKind::Sgd {
            cfg.momentum
        } else {
            0.0
        },
        betas: cfg.betas,
        eps: cfg.eps,
    }
}

/// Minimizes the classification loss plus α times the entropy regularizer on
/// the ID training split.
pub fn train(cfg: &TrainConfig, id_train: &Dataset) -> Result<RunRecord> {
    cfg.validate()?;
    if id_train.split != Split::IdTrain {
        return Err(Error::domain(format!(
            "training data must be tagged id_train, got {}",
            id_train.split.as_str()
        )));
    }
    if id_train.num_classes != cfg.model.num_classes || id_train.dim() != cfg.model.input_dim {
        return Err(Error::Config(format!(
            "data has {} classes in {} dims but the model expects {} classes in {} dims",
            id_train.num_classes,
            id_train.dim(),
            cfg.model.num_classes,
            cfg.model.input_dim
        )));
    }
    let start = Instant::now();
    let mut model = build_model(&cfg.model, seed::derive_seed(cfg.seed, "init"))?;
    let digest_before = model.params.frozen_digest();
    let shuffle_seed = seed::derive_seed(cfg.seed, "shuffle");
    let needs_pairs = cfg.needs_pairs();
    let per_epoch = batches(id_train.len(), cfg.batch_size, shuffle_seed, 0, needs_pairs)?.len();
    let total_steps = per_epoch * cfg.epochs;
    let warmup_steps = per_epoch * cfg.warmup_epochs;
    let mut opt = Optimizer::new(optim_config(cfg));
    let mut step = 0;
    let mut logs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut sums = [0.0; 3];
        let mut first_lr = None;
        for (bi, batch) in batches(id_train.len(), cfg.batch_size, shuffle_seed, epoch, needs_pairs)?
            .into_iter()
            .enumerate()
        {
            let lr = match cfg.schedule {
                Schedule::CosineWarmup => lr_at(step, total_steps, warmup_steps, cfg.learning_rate),
                Schedule::Constant => cfg.learning_rate,
            };
            first_lr.get_or_insert(lr);
            let at = |e: Error| match e {
                Error::NonFinite(what) => Error::NonFinite(format!("{what} (epoch {epoch}, batch {bi})")),
                other => other,
            };
            let x = id_train.features.select_rows(&batch);
            let labels: Vec<usize> = batch.iter().map(|&i| id_train.labels[i]).collect();
            let mut pass = model.forward(&x, Mode::Train).map_err(at)?;
            let (logits, enc) = (pass.logits(), pass.encoder_out());
            let parts = total_loss(&mut pass.graph, logits, enc, &labels, &cfg.loss).map_err(at)?;
            let g = &pass.graph;
            let total = g.value(parts.total).item();
            if !total.is_finite() {
                return Err(Error::NonFinite(format!("loss (epoch {epoch}, batch {bi})")));
            }
            let w = batch.len() as f64;
            sums[0] += w * total;
            sums[1] += w * g.value(parts.cls).item();
            sums[2] += w * parts.reg.map_or(0.0, |r| g.value(r).item());
            pass.graph.backward(parts.total).map_err(at)?;

            let mut grads: Vec<Option<Tensor>> = vec![None; model.params.entries().len()];
            for &(idx, leaf) in &pass.param_leaves {
                grads[idx] = pass.graph.grad(leaf).cloned();
            }
            let zeros: Vec<Vec<f64>> = model
                .params
                .entries()
                .iter()
                .zip(&grads)
                .map(|(p, g)| {
                    if g.is_none() {
                        vec![0.0; p.tensor.numel()]
                    } else {
                        Vec::new()
                    }
                })
                .collect();
            let slots = model
                .params
                .entries_mut()
                .iter_mut()
                .zip(grads.iter().zip(&zeros))
                .filter(|(p, _)| p.role == ParamRole::Trainable)
                .map(|(p, (g, z))| (p.tensor.data_mut(), g.as_ref().map_or(&z[..], |t| t.data())));
            opt.step(lr, slots)?;
            step += 1;
        }
        let n = id_train.len() as f64;
        logs.push(EpochLog {
            epoch,
            loss: sums[0] / n,
            cls: sums[1] / n,
            reg: sums[2] / n,
            lr: first_lr.unwrap_or(0.0),
        });
    }

    Ok(RunRecord {
        epochs: logs,
        frozen_digest_after: model.params.frozen_digest(),
        frozen_digest_before: digest_before,
        model,
        seed: cfg.seed,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datakit::{gen_gaussian_mixture, BlobSpec};
    use crate::netlib::{ModelSpec, NormKind, ProjectorDims, ProjectorMode};

    fn tiny(epochs: usize) -> (TrainConfig, Dataset) {
        let spec = BlobSpec {
            num_classes: 3,
            dim: 6,
            radius: 4.0,
            sigma: 0.3,
            latent_dim: None,
            priors: None,
            warp: None,
        };
        let ds = gen_gaussian_mixture(&spec, 90, 3).unwrap();
        let cfg = TrainConfig {
            epochs,
            warmup_epochs: 0,
            batch_size: 30,
            learning_rate: 1e-2,
            model: ModelSpec {
                input_dim: 6,
                encoder: ModelSpec::mlp_encoder(6, 16, 2, NormKind::GnWs),
                projector_mode: ProjectorMode::FixedEtf,
                projector: ProjectorDims {
                    input: 16,
                    hidden: 32,
                    output: 16,
                },
                projector_l2: true,
                num_classes: 3,
                classifier: Default::default(),
            },
            ..TrainConfig::default()
        };
        (cfg, ds)
    }

    #[test]
    fn zero_epochs_returns_the_initial_model() {
        let (cfg, ds) = tiny(0);
        let r = train(&cfg, &ds).unwrap();
        let fresh = build_model(&cfg.model, seed::derive_seed(cfg.seed, "init")).unwrap();
        assert!(r.epochs.is_empty());
        assert_eq!(r.model.params.full_digest(), fresh.params.full_digest());
    }

    #[test]
    fn deterministic_and_frozen_weights_untouched() {
        let (cfg, ds) = tiny(3);
        let a = train(&cfg, &ds).unwrap();
        let b = train(&cfg, &ds).unwrap();
        assert_eq!(a.model.params.full_digest(), b.model.params.full_digest());
        assert_eq!(a.losses_csv(), b.losses_csv());
        assert_eq!(a.frozen_digest_before, a.frozen_digest_after);
    }

    #[test]
    fn separable_blobs_drive_the_loss_down() {
        let (mut cfg, ds) = tiny(30);
        cfg.loss.label_smoothing = 0.0;
        cfg.loss.reg_alpha = 0.0;
        cfg.weight_decay = 0.0;
        cfg.learning_rate = 3e-2;
        let r = train(&cfg, &ds).unwrap();
        let (first, last) = (r.epochs[0].cls, r.epochs.last().unwrap().cls);
        assert!(last * 10.0 < first, "{first} -> {last}");
    }

    #[test]
    fn rejects_mismatched_data() {
        let (cfg, ds) = tiny(1);
        assert!(matches!(
            train(&cfg, &ds.clone().with_split(Split::IdTest)),
            Err(Error::Domain(_))
        ));
        let mut bad = cfg.clone();
        bad.model.num_classes = 4;
        bad.model.input_dim = 6;
        assert!(train(&bad, &ds).is_err());
    }
}
