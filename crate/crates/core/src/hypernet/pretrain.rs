use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{attach_generated, embed_with_dim, Hypernet};
use crate::adapters::{AdapterSet, Role};
use crate::backbone::{encode_pair, lm_loss_sum, Backbone};
use crate::error::{Error, Result};
use crate::numerics::{NodeId, Optimizer, OptimizerConfig, ParamSlot, Rng};
use crate::personalize::{train_adapters, TrainConfig};
use crate::synthbench::Example;
use crate::{Graph, Matrix, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PretrainMode {
    End2end,
    Reconstruction,
}

impl PretrainMode {
    pub fn name(self) -> &'static str {
        match self {
            PretrainMode::End2end => "end2end",
            PretrainMode::Reconstruction => "reconstruction",
        }
    }
}

impl FromStr for PretrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "end2end" => Ok(Self::End2end),
            "reconstruction" => Ok(Self::Reconstruction),
            other => Err(Error::Config(format!("unknown pretraining mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainTask {
    pub name: String,
    pub description: String,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub mode: PretrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Schedule for the per-task LoRAs fitted before reconstruction.
    pub oracle: TrainConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            mode: PretrainMode::End2end,
            epochs: 30,
            batch_size: 8,
            optimizer: OptimizerConfig::adamw(3e-4),
            oracle: TrainConfig {
                epochs: 5,
                batch_size: 8,
                optimizer: OptimizerConfig::adamw(1e-2),
                dropout: false,
            },
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    pub steps: usize,
    /// Mean training objective per epoch.
    pub epoch_losses: Vec<Real>,
    /// Per task: validation loss of the bare backbone.
    pub val_base: Vec<Real>,
    /// Per task: validation loss with the generated anchor.
    pub val_anchored: Vec<Real>,
}

fn check_tasks(tasks: &[PretrainTask]) -> Result<()> {
    if tasks.len() < 2 {
        return Err(Error::Config(format!(
            "pretraining needs at least 2 tasks, got {}",
            tasks.len()
        )));
    }
    for t in tasks {
        if t.train.is_empty() {
            return Err(Error::Data(format!("task {} has no training examples", t.name)));
        }
        if t.description.trim().is_empty() {
            return Err(Error::Data(format!("task {} has an empty description", t.name)));
        }
    }
    Ok(())
}

fn collect_grads(g: &Graph<'_>, grads: &mut crate::numerics::Gradients<Real>, leaves: &[NodeId]) -> Vec<Matrix> {
    leaves
        .iter()
        .map(|&id| {
            grads.take(id).unwrap_or_else(|| {
                let (r, c) = g.value(id).shape();
                Matrix::zeros(r, c)
            })
        })
        .collect()
}

fn step(h: &mut Hypernet, opt: &mut Optimizer<Real>, grads: &[Matrix]) -> Result<()> {
    let names: Vec<&'static str> = h.named_params().into_iter().map(|(n, _)| n).collect();
    let mut slots: Vec<ParamSlot<'_, Real>> = h
        .params_mut()
        .iter_mut()
        .zip(&names)
        .zip(grads)
        .map(|((value, key), grad)| ParamSlot {
            key,
            value,
            grad: Some(grad),
            trainable: true,
        })
        .collect();
    opt.step(&mut slots)?;
    Ok(())
}

/// Token-mean loss of one batch under freshly generated adapters, with the
/// gradient for every hypernet parameter.
pub(crate) fn end2end_gradients(
    model: &Backbone,
    h: &Hypernet,
    embedding: &[Real],
    batch: &[&Example],
) -> Result<(Real, Vec<Matrix>)> {
    let mut g = Graph::new();
    let (nodes, leaves) = h.build_graph(&mut g, embedding, true)?;
    let att = attach_generated(&nodes, 1.0);
    let mut total = None;
    let mut tokens = 0usize;
    for ex in batch {
        let seq = encode_pair(&ex.input, &ex.output)?;
        let logits = model.forward_graph(&mut g, &att, &seq.ids, None)?;
        let (s, n) = lm_loss_sum(&mut g, logits, &seq)?;
        tokens += n;
        total = Some(match total {
            None => s,
            Some(t) => g.add(t, s)?,
        });
    }
    let total = total.ok_or_else(|| Error::Data("empty batch".into()))?;
    let loss = g.scale(total, 1.0 / tokens as Real);
    let value = g.value(loss).get(0, 0);
    let mut grads = g.backward(loss)?;
    Ok((value, collect_grads(&g, &mut grads, &leaves)))
}

/// Mean squared error between generated factors and `target`, with
/// gradients.
pub(crate) fn reconstruction_gradients(
    h: &Hypernet,
    embedding: &[Real],
    target: &AdapterSet,
) -> Result<(Real, Vec<Matrix>)> {
    let mut g = Graph::new();
    let (nodes, leaves) = h.build_graph(&mut g, embedding, true)?;
    let mut total = None;
    let mut count = 0usize;
    for (&(layer, site), &(a, b)) in &nodes {
        let member = target
            .get(layer, site)
            .ok_or_else(|| Error::Data(format!("reconstruction target lacks {layer}.{site}")))?;
        for (node, role) in [(a, Role::A), (b, Role::B)] {
            let want = member.factor(role).expect("pairs always have A and B");
            count += want.len();
            let want = g.constant_ref(want);
            let diff = g.sub(node, want)?;
            let sq = g.mul(diff, diff)?;
            let s = g.sum(sq);
            total = Some(match total {
                None => s,
                Some(t) => g.add(t, s)?,
            });
        }
    }
    let total = total.ok_or_else(|| Error::Data("hypernet generated nothing".into()))?;
    let loss = g.scale(total, 1.0 / count as Real);
    let value = g.value(loss).get(0, 0);
    let mut grads = g.backward(loss)?;
    Ok((value, collect_grads(&g, &mut grads, &leaves)))
}

/// Regresses the hypernet onto fixed per-description targets; returns the
/// mean MSE of every epoch.
pub fn reconstruction_fit(
    h: &mut Hypernet,
    targets: &[(String, AdapterSet)],
    epochs: usize,
    optimizer: OptimizerConfig,
    rng: &Rng,
) -> Result<Vec<Real>> {
    if targets.is_empty() {
        return Err(Error::Config("no reconstruction targets".into()));
    }
    let embeddings: Vec<Vec<Real>> = targets
        .iter()
        .map(|(d, _)| embed_with_dim(d, h.config().d_task))
        .collect::<Result<_>>()?;
    let mut opt = Optimizer::new(optimizer);
    let mut curve = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..targets.len()).collect();
        rng.split_indexed("recon-epoch", epoch as u64).shuffle(&mut order);
        let mut sum = 0.0;
        for &i in &order {
            let (loss, grads) = reconstruction_gradients(h, &embeddings[i], &targets[i].1)?;
            sum += loss;
            step(h, &mut opt, &grads)?;
        }
        curve.push(sum / order.len() as Real);
    }
    Ok(curve)
}

/// Trains `h` on a family of tasks against a frozen backbone.
pub fn pretrain_hypernet(
    model: &Backbone,
    mut h: Hypernet,
    tasks: &[PretrainTask],
    cfg: &PretrainConfig,
    rng: &Rng,
) -> Result<(Hypernet, PretrainLog)> {
    check_tasks(tasks)?;
    if *model.config() != h.config().backbone {
        return Err(Error::Config("hypernet was built for another backbone".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut log = PretrainLog::default();
    match cfg.mode {
        PretrainMode::End2end => {
            let embeddings: Vec<Vec<Real>> = tasks
                .iter()
                .map(|t| embed_with_dim(&t.description, h.config().d_task))
                .collect::<Result<_>>()?;
            let mut opt = Optimizer::new(cfg.optimizer);
            for epoch in 0..cfg.epochs {
                let erng = rng.split_indexed("pretrain-epoch", epoch as u64);
                let mut batches: Vec<(usize, Vec<usize>)> = Vec::new();
                for (t, task) in tasks.iter().enumerate() {
                    let mut idx: Vec<usize> = (0..task.train.len()).collect();
                    erng.split_indexed("task", t as u64).shuffle(&mut idx);
                    batches.extend(idx.chunks(cfg.batch_size).map(|c| (t, c.to_vec())));
                }
                erng.split("batches").shuffle(&mut batches);
                let mut sum = 0.0;
                for (t, idx) in &batches {
                    let batch: Vec<&Example> = idx.iter().map(|&i| &tasks[*t].train[i]).collect();
                    let (loss, grads) = end2end_gradients(model, &h, &embeddings[*t], &batch)?;
                    sum += loss;
                    step(&mut h, &mut opt, &grads)?;
                    log.steps += 1;
                }
                log.epoch_losses.push(sum / batches.len().max(1) as Real);
            }
        }
        PretrainMode::Reconstruction => {
            let init = AdapterSet::fresh(model.config(), h.config().rank, &rng.split("oracle-init"))?;
            let mut targets = Vec::with_capacity(tasks.len());
            for (t, task) in tasks.iter().enumerate() {
                let mut set = init.clone();
                train_adapters(
                    model,
                    &mut set,
                    &task.train,
                    &cfg.oracle,
                    &rng.split_indexed("oracle", t as u64),
                )?;
                targets.push((task.description.clone(), set.to_anchor()));
            }
            log.epoch_losses = reconstruction_fit(&mut h, &targets, cfg.epochs, cfg.optimizer, &rng.split("recon"))?;
            log.steps = cfg.epochs * targets.len();
        }
    }
    for task in tasks {
        if task.val.is_empty() {
            continue;
        }
        let anchor = h.generate_anchor(&task.description, model.config())?;
        log.val_base.push(model.dataset_loss(None, &task.val)?);
        log.val_anchored.push(model.dataset_loss(Some(&anchor), &task.val)?);
    }
    Ok((h, log))
}
