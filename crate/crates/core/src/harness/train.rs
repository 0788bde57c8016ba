//! Supervised training: average-loss phase with σ-freeze, CVaR fine-tuning
//! and the affordance-weight grid search.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baseline::record_actuation_labels;
use crate::expert::{derive_seed, Dataset, Demonstration};
use crate::harness::config::{AgentKind, ExperimentConfig};
use crate::harness::HarnessError;
use crate::losses::{
    cvar_batch_mask, cvar_estimate, gmm_nll_raw, min_batch_size, mse, sigma_freeze, GmmLayout, MultiTaskWeights,
};
use crate::network::{
    adam_step, clip_gradient_norm, AdamConfig, Checkpoint, EpochRecord, HeadKind, InputScaling, NetSpec, Network,
    Normalizer, Params, TrainingMeta,
};

/// Normalized arrays for one split.
#[derive(Debug, Clone, Default)]
pub struct Split {
    pub inputs: Vec<Vec<f64>>,
    /// Targets per head name, normalized.
    pub targets: BTreeMap<String, Vec<Vec<f64>>>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Raw (unnormalized) target of `head` for a record.
fn raw_target(head: &HeadKind, r: &Demonstration) -> Result<Vec<f64>, HarnessError> {
    Ok(match head {
        HeadKind::Gmm { .. } | HeadKind::Linear { .. } => r.trajectory.iter().flat_map(|p| [p[0], p[1]]).collect(),
        HeadKind::Affordance { .. } => r.affordance.to_vec(),
        HeadKind::Actuation => {
            let a = r
                .actuation
                .ok_or_else(|| HarnessError::Invalid("record lacks an actuation label".into()))?;
            vec![a.steer, a.accel]
        }
    })
}

/// Training inputs and targets for a network spec, normalized with the
/// input standardization and target normalizers of `fitted` (fitted on the
/// training split when `None`).
#[derive(Debug, Clone)]
pub struct Prepared {
    pub spec: NetSpec,
    pub scaling: InputScaling,
    pub k: usize,
    pub dt_label: f64,
    pub normalizers: BTreeMap<String, Normalizer>,
    pub train: Split,
    pub val: Split,
}

impl Prepared {
    pub fn new(
        dataset: &Dataset,
        spec: NetSpec,
        fitted: Option<(InputScaling, BTreeMap<String, Normalizer>)>,
    ) -> Result<Self, HarnessError> {
        let train_recs: Vec<&Demonstration> = dataset.train().collect();
        let val_recs: Vec<&Demonstration> = dataset.val().collect();
        if train_recs.is_empty() || val_recs.is_empty() {
            return Err(HarnessError::Invalid("dataset needs train and validation records".into()));
        }
        let (scaling, normalizers) = match fitted {
            Some(f) => f,
            None => {
                let mut scaling = dataset.input_scaling();
                let scaled: Vec<Vec<f64>> = train_recs.iter().map(|r| scaling.scaled(&r.observation)).collect();
                scaling.fit_standardization(&scaled)?;
                let mut n = BTreeMap::new();
                for head in &spec.heads {
                    let raw = train_recs.iter().map(|r| raw_target(head, r)).collect::<Result<Vec<_>, _>>()?;
                    n.insert(head.name().to_string(), Normalizer::fit(&raw)?);
                }
                (scaling, n)
            }
        };
        let split = |recs: &[&Demonstration]| -> Result<Split, HarnessError> {
            let mut s = Split { inputs: recs.iter().map(|r| scaling.features(&r.observation)).collect(), ..Default::default() };
            for head in &spec.heads {
                let norm = normalizers
                    .get(head.name())
                    .ok_or_else(|| HarnessError::Invalid(format!("no normalizer for {}", head.name())))?;
                let t = recs.iter().map(|r| Ok(norm.apply(&raw_target(head, r)?))).collect::<Result<Vec<_>, HarnessError>>()?;
                s.targets.insert(head.name().to_string(), t);
            }
            Ok(s)
        };
        Ok(Self {
            train: split(&train_recs)?,
            val: split(&val_recs)?,
            spec,
            scaling,
            k: dataset.header.k,
            dt_label: dataset.header.dt_label,
            normalizers,
        })
    }
}

/// Network spec for the configured agent.
pub fn net_spec(cfg: &ExperimentConfig, n_beams: usize) -> NetSpec {
    let dim = 2 * cfg.recording.k;
    let mut heads = vec![match cfg.model.agent {
        AgentKind::TrajectoryGmm => HeadKind::Gmm { modes: cfg.model.modes, dim },
        AgentKind::TrajectoryL2 => HeadKind::Linear { dim },
        AgentKind::BaselineActuation => HeadKind::Actuation,
    }];
    if cfg.model.affordance {
        heads.push(HeadKind::Affordance { dim: crate::expert::AffordanceVector::DIM });
    }
    NetSpec { input_dim: n_beams + 1, fusion_layers: cfg.model.fusion_layers.clone(), heads }
}

/// How per-sample losses in a batch are reduced to the training objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Reduction {
    Mean,
    /// Mean over the samples above the empirical α-quantile.
    Cvar(f64),
}

/// Per-sample losses of a batch: (total, trajectory-or-actuation part).
#[derive(Debug, Clone, Default)]
pub struct SampleLosses {
    pub total: Vec<f64>,
    pub policy: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub freeze_epochs: usize,
    pub weights: MultiTaskWeights,
}

impl Hyper {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        Self {
            adam: cfg.training.adam,
            batch_size: cfg.training.batch_size,
            clip_norm: cfg.training.clip_norm,
            freeze_epochs: cfg.training.freeze_epochs,
            weights: cfg.training.weights,
        }
    }
}

/// Epoch-by-epoch trainer. `epoch` counts completed epochs.
#[derive(Debug, Clone)]
pub struct Trainer<'a> {
    pub net: Network,
    pub params: Params,
    pub data: &'a Prepared,
    pub hyper: Hyper,
    pub seed: u64,
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
}

const EVAL_CHUNK: usize = 1024;

impl<'a> Trainer<'a> {
    pub fn new(data: &'a Prepared, hyper: Hyper, seed: u64) -> Result<Self, HarnessError> {
        let net = Network::new(data.spec.clone())?;
        let params = net.init_params(derive_seed(seed, &[0x696e_6974]));
        Ok(Self { net, params, data, hyper, seed, epoch: 0, history: Vec::new() })
    }

    pub fn from_checkpoint(ck: &Checkpoint, data: &'a Prepared, hyper: Hyper) -> Result<Self, HarnessError> {
        if ck.spec != data.spec {
            return Err(HarnessError::Invalid("checkpoint and data disagree on the network spec".into()));
        }
        Ok(Self {
            net: ck.network()?,
            params: ck.params.clone(),
            data,
            hyper,
            seed: ck.meta.seed,
            epoch: ck.meta.epoch,
            history: ck.meta.history.clone(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            self.data.spec.clone(),
            self.params.clone(),
            self.data.normalizers.clone(),
            TrainingMeta {
                seed: self.seed,
                epoch: self.epoch,
                k: self.data.k,
                dt_label: self.data.dt_label,
                input: self.data.scaling.clone(),
                weights: self.hyper.weights,
                history: self.history.clone(),
            },
        )
    }

    /// Losses of the samples `idx` of `split`, plus the gradient of the
    /// reduced objective when `reduction` is given.
    pub fn batch(
        &self,
        split: &Split,
        idx: &[usize],
        reduction: Option<Reduction>,
    ) -> Result<(SampleLosses, Option<Vec<f64>>), HarnessError> {
        let inputs: Vec<Vec<f64>> = idx.iter().map(|&i| split.inputs[i].clone()).collect();
        let cache = self.net.forward_batch(&self.params.values, &inputs)?;
        let b = idx.len();
        let w = self.hyper.weights;
        let mut losses = SampleLosses { total: vec![0.0; b], policy: vec![0.0; b] };
        let mut head_grads: Vec<DMatrix<f64>> =
            self.net.spec.heads.iter().map(|h| DMatrix::zeros(h.output_dim(), b)).collect();
        for (h, head) in self.net.spec.heads.iter().enumerate() {
            let targets = &split.targets[head.name()];
            let out = &cache.outputs[h];
            let mut g = vec![0.0; head.output_dim()];
            let weight = if matches!(head, HeadKind::Affordance { .. }) { w.w_aff } else { w.w_traj };
            for (j, &i) in idx.iter().enumerate() {
                let raw: Vec<f64> = out.column(j).iter().copied().collect();
                let l = match *head {
                    HeadKind::Gmm { modes, dim } => gmm_nll_raw(&raw, GmmLayout::new(modes, dim), &targets[i], &mut g),
                    _ => mse(&raw, &targets[i], &mut g),
                };
                if !matches!(head, HeadKind::Affordance { .. }) {
                    losses.policy[j] = l;
                }
                losses.total[j] += weight * l;
                head_grads[h].column_mut(j).copy_from_slice(&g);
            }
        }
        if let Some(bad) = losses.total.iter().position(|l| !l.is_finite()) {
            return Err(HarnessError::Diverged(format!("non-finite loss at sample {}", idx[bad])));
        }
        let Some(reduction) = reduction else {
            return Ok((losses, None));
        };
        let sample_weights: Vec<f64> = match reduction {
            Reduction::Mean => vec![1.0 / b as f64; b],
            Reduction::Cvar(alpha) => {
                let mask = cvar_batch_mask(&losses.total, alpha)?;
                let n = mask.iter().filter(|&&m| m).count() as f64;
                mask.iter().map(|&m| if m { 1.0 / n } else { 0.0 }).collect()
            }
        };
        let mut upstream = Vec::with_capacity(head_grads.len());
        for (h, head) in self.net.spec.heads.iter().enumerate() {
            let weight = if matches!(head, HeadKind::Affordance { .. }) { w.w_aff } else { w.w_traj };
            let mut g = std::mem::replace(&mut head_grads[h], DMatrix::zeros(0, 0));
            for (j, mut col) in g.column_iter_mut().enumerate() {
                col *= weight * sample_weights[j];
                if let HeadKind::Gmm { modes, dim } = *head {
                    sigma_freeze(col.as_mut_slice(), GmmLayout::new(modes, dim), self.epoch, self.hyper.freeze_epochs);
                }
            }
            upstream.push(if weight == 0.0 { None } else { Some(g) });
        }
        let grad = self.net.backward(&self.params.values, &cache, &upstream)?;
        Ok((losses, Some(grad)))
    }

    /// Per-sample losses over a whole split.
    pub fn evaluate(&self, split: &Split) -> Result<SampleLosses, HarnessError> {
        let mut all = SampleLosses::default();
        let idx: Vec<usize> = (0..split.len()).collect();
        for chunk in idx.chunks(EVAL_CHUNK) {
            let (l, _) = self.batch(split, chunk, None)?;
            all.total.extend(l.total);
            all.policy.extend(l.policy);
        }
        Ok(all)
    }

    fn record(&mut self, phase: &str, train_loss: f64) -> Result<EpochRecord, HarnessError> {
        let val = self.evaluate(&self.data.val)?;
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let rec = EpochRecord {
            phase: phase.to_string(),
            epoch: self.epoch,
            train_loss,
            val_loss: mean(&val.total),
            val_traj_loss: mean(&val.policy),
            val_cvar90: cvar_estimate(&val.total, 0.9)?,
        };
        self.history.push(rec.clone());
        Ok(rec)
    }

    /// Logs the losses of the current parameters without training.
    pub fn record_initial(&mut self) -> Result<EpochRecord, HarnessError> {
        let train = self.evaluate(&self.data.train)?;
        let mean = train.total.iter().sum::<f64>() / train.total.len() as f64;
        self.record("init", mean)
    }

    /// Batch order of an epoch; a function of (seed, epoch) only.
    pub fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.data.train.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[0x6570_6f63, epoch as u64])));
        idx
    }

    /// One pass over the training split.
    pub fn run_epoch(&mut self, reduction: Reduction, phase: &str) -> Result<EpochRecord, HarnessError> {
        let order = self.epoch_order(self.epoch);
        let min = match reduction {
            Reduction::Mean => 1,
            Reduction::Cvar(alpha) => min_batch_size(alpha),
        };
        let mut sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(self.hyper.batch_size) {
            if chunk.len() < min {
                continue;
            }
            let (losses, grad) = self.batch(&self.data.train, chunk, Some(reduction))?;
            let mut grad = grad.expect("gradient requested");
            let objective = match reduction {
                Reduction::Mean => losses.total.iter().sum::<f64>() / chunk.len() as f64,
                Reduction::Cvar(alpha) => cvar_estimate(&losses.total, alpha)?,
            };
            clip_gradient_norm(&mut grad, self.hyper.clip_norm);
            adam_step(&mut self.params, &grad, &self.hyper.adam);
            if !self.params.all_finite() {
                return Err(HarnessError::Diverged("parameters became non-finite".into()));
            }
            sum += objective;
            batches += 1;
        }
        self.epoch += 1;
        self.record(phase, sum / batches.max(1) as f64)
    }
}

/// Outcome of a training run; on divergence the last good checkpoint is kept.
#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub diverged: Option<String>,
}

fn run_phase(
    trainer: &mut Trainer<'_>,
    epochs: usize,
    reduction: Reduction,
    phase: &str,
) -> Result<Option<String>, HarnessError> {
    for _ in 0..epochs {
        let backup = (trainer.params.clone(), trainer.epoch, trainer.history.len());
        match trainer.run_epoch(reduction, phase) {
            Ok(_) => {}
            Err(HarnessError::Diverged(msg)) => {
                trainer.params = backup.0;
                trainer.epoch = backup.1;
                trainer.history.truncate(backup.2);
                return Ok(Some(format!("diverged in epoch {}: {msg}", backup.1)));
            }
            Err(e) => return Err(e),
        }
    }
    Ok(None)
}

/// Prepares data for the configured agent, attaching actuation labels when
/// the baseline needs them.
pub fn prepare(dataset: &Dataset, cfg: &ExperimentConfig) -> Result<Prepared, HarnessError> {
    let spec = net_spec(cfg, dataset.header.n_beams);
    if cfg.model.agent == AgentKind::BaselineActuation {
        let labeled = record_actuation_labels(dataset.clone()).map_err(|e| HarnessError::Invalid(e.to_string()))?;
        Prepared::new(&labeled, spec, None)
    } else {
        Prepared::new(dataset, spec, None)
    }
}

/// Average-loss training from scratch.
pub fn train(dataset: &Dataset, cfg: &ExperimentConfig) -> Result<TrainOutcome, HarnessError> {
    let data = prepare(dataset, cfg)?;
    train_prepared(&data, Hyper::from_config(cfg), cfg.training.epochs, cfg.seed)
}

pub fn train_prepared(data: &Prepared, hyper: Hyper, epochs: usize, seed: u64) -> Result<TrainOutcome, HarnessError> {
    let mut trainer = Trainer::new(data, hyper, seed)?;
    trainer.record_initial()?;
    let diverged = run_phase(&mut trainer, epochs, Reduction::Mean, "train")?;
    Ok(TrainOutcome { checkpoint: trainer.checkpoint(), diverged })
}

/// Data for an existing checkpoint, normalized with its stored normalizers.
pub fn prepare_for_checkpoint(ck: &Checkpoint, dataset: &Dataset) -> Result<Prepared, HarnessError> {
    if ck.spec.head_index("actuation").is_some() {
        let labeled = record_actuation_labels(dataset.clone()).map_err(|e| HarnessError::Invalid(e.to_string()))?;
        Prepared::new(&labeled, ck.spec.clone(), Some((ck.meta.input.clone(), ck.normalizers.clone())))
    } else {
        Prepared::new(dataset, ck.spec.clone(), Some((ck.meta.input.clone(), ck.normalizers.clone())))
    }
}

/// Per-sample training-objective losses of a checkpoint on (train, val).
pub fn checkpoint_losses(ck: &Checkpoint, data: &Prepared) -> Result<(SampleLosses, SampleLosses), HarnessError> {
    let hyper = Hyper { weights: ck.meta.weights, ..Hyper::from_config(&ExperimentConfig::default()) };
    let trainer = Trainer::from_checkpoint(ck, data, hyper)?;
    Ok((trainer.evaluate(&data.train)?, trainer.evaluate(&data.val)?))
}

/// CVaR fine-tuning of a trained checkpoint with the loss weights it was
/// trained with.
pub fn finetune_cvar(ck: &Checkpoint, dataset: &Dataset, cfg: &ExperimentConfig) -> Result<TrainOutcome, HarnessError> {
    let data = prepare_for_checkpoint(ck, dataset)?;
    let mut hyper = Hyper::from_config(cfg);
    hyper.adam.lr = cfg.finetune.lr;
    hyper.batch_size = cfg.finetune.batch_size;
    hyper.weights = ck.meta.weights;
    let min = min_batch_size(cfg.finetune.alpha);
    if hyper.batch_size < min {
        return Err(crate::losses::LossError::BatchTooSmall { batch: hyper.batch_size, alpha: cfg.finetune.alpha, min }.into());
    }
    let mut trainer = Trainer::from_checkpoint(ck, &data, hyper)?;
    let diverged = run_phase(&mut trainer, cfg.finetune.epochs, Reduction::Cvar(cfg.finetune.alpha), "finetune")?;
    Ok(TrainOutcome { checkpoint: trainer.checkpoint(), diverged })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub w_aff: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_traj_loss: f64,
}

/// Trains one model per affordance weight and picks the lowest validation
/// trajectory loss; ties go to the earlier grid entry.
pub fn grid_search_weights(
    dataset: &Dataset,
    cfg: &ExperimentConfig,
    grid: &[f64],
) -> Result<(f64, Vec<GridRow>), HarnessError> {
    if grid.is_empty() {
        return Err(HarnessError::Config("empty grid".into()));
    }
    let mut c = cfg.clone();
    c.model.affordance = true;
    let data = prepare(dataset, &c)?;
    grid_search_prepared(&data, Hyper::from_config(cfg), grid, cfg.grid.epochs, cfg.seed)
}

/// Grid search on already prepared data; `hyper.weights.w_aff` is replaced
/// by each grid entry.
pub fn grid_search_prepared(
    data: &Prepared,
    hyper: Hyper,
    grid: &[f64],
    epochs: usize,
    seed: u64,
) -> Result<(f64, Vec<GridRow>), HarnessError> {
    if grid.is_empty() {
        return Err(HarnessError::Config("empty grid".into()));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for &w_aff in grid {
        let mut hyper = hyper;
        hyper.weights.w_aff = w_aff;
        let out = train_prepared(data, hyper, epochs, seed)?;
        let last = out.checkpoint.meta.history.last().expect("history");
        rows.push(GridRow { w_aff, train_loss: last.train_loss, val_loss: last.val_loss, val_traj_loss: last.val_traj_loss });
    }
    let mut best = 0;
    for (i, r) in rows.iter().enumerate() {
        if r.val_traj_loss < rows[best].val_traj_loss {
            best = i;
        }
    }
    Ok((rows[best].w_aff, rows))
}
