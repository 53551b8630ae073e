use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterGrads, AdapterSet, Role};
use crate::backbone::{encode_pair, lm_loss_sum, Backbone};
use crate::error::{Error, Result};
use crate::numerics::{Optimizer, OptimizerConfig, Rng};
use crate::synthbench::Example;
use crate::{Graph, Real};

/// Schedule for one adapter training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Apply each adapter's dropout to its input during training.
    pub dropout: bool,
}

impl TrainConfig {
    pub fn steps_for(&self, n_examples: usize) -> usize {
        self.epochs * n_examples.div_ceil(self.batch_size.max(1))
    }
}

/// Per-step gradient norms, each averaged over layers of the per-layer
/// norm across adapted sites.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GradTrace {
    pub b: Vec<Option<Real>>,
    pub c: Vec<Option<Real>>,
}

impl GradTrace {
    pub fn len(&self) -> usize {
        self.b.len()
    }

    pub fn is_empty(&self) -> bool {
        self.b.is_empty()
    }

    pub fn mean_b(&self) -> Option<Real> {
        mean(self.b.iter().flatten().copied())
    }

    pub fn mean_c(&self) -> Option<Real> {
        mean(self.c.iter().flatten().copied())
    }
}

fn mean(it: impl Iterator<Item = Real>) -> Option<Real> {
    let (mut s, mut n) = (0.0, 0usize);
    for v in it {
        s += v;
        n += 1;
    }
    (n > 0).then(|| s / n as Real)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: usize,
    pub losses: Vec<Real>,
    pub trace: GradTrace,
}

fn layer_mean_norm(grads: &AdapterGrads, role: Role, n_layers: usize) -> Option<Real> {
    let mut per_layer = vec![None::<Real>; n_layers];
    for (&(layer, _, r), g) in grads {
        if r == role {
            let sq: Real = g.data().iter().map(|v| v * v).sum();
            *per_layer[layer].get_or_insert(0.0) += sq;
        }
    }
    mean(per_layer.into_iter().flatten().map(Real::sqrt))
}

/// Token-mean completion loss of one batch and its gradients with respect
/// to the set's trainable factors.
pub fn batch_gradients(
    model: &Backbone,
    set: &AdapterSet,
    batch: &[&Example],
    mut dropout_rng: Option<&mut Rng>,
) -> Result<(Real, AdapterGrads)> {
    let cfg = model.config();
    let mut g = Graph::new();
    let (att, leaves) = set.attach(&mut g, cfg, true)?;
    let mut sums = Vec::with_capacity(batch.len());
    let mut tokens = 0usize;
    for ex in batch {
        let seq = encode_pair(&ex.input, &ex.output)?;
        let logits = model.forward_graph(&mut g, &att, &seq.ids, dropout_rng.as_deref_mut())?;
        let (s, n) = lm_loss_sum(&mut g, logits, &seq)?;
        sums.push(s);
        tokens += n;
    }
    let mut total = sums[0];
    for &s in &sums[1..] {
        total = g.add(total, s)?;
    }
    let loss = g.scale(total, 1.0 / tokens as Real);
    let loss_value = g.value(loss).get(0, 0);
    let mut grads = g.backward(loss)?;
    let mut out = AdapterGrads::new();
    for leaf in leaves {
        if let Some(m) = grads.take(leaf.node) {
            out.insert((leaf.key.0, leaf.key.1, leaf.role), m);
        } else {
            let shape = g.value(leaf.node).shape();
            out.insert(
                (leaf.key.0, leaf.key.1, leaf.role),
                crate::Matrix::zeros(shape.0, shape.1),
            );
        }
    }
    Ok((loss_value, out))
}

/// Trains the masked factors of `set` on `data`. Example order within each
/// epoch comes from `rng.split_indexed("epoch", e)`.
pub fn train_adapters(
    model: &Backbone,
    set: &mut AdapterSet,
    data: &[Example],
    cfg: &TrainConfig,
    rng: &Rng,
) -> Result<(TrainLog, Optimizer<Real>)> {
    if data.is_empty() {
        return Err(Error::Data("no training examples".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let n_layers = model.config().n_layers;
    let mut opt = Optimizer::new(cfg.optimizer);
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        rng.split_indexed("epoch", epoch as u64).shuffle(&mut order);
        let mut drop_rng = rng.split_indexed("dropout", epoch as u64);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &data[i]).collect();
            let drop = cfg.dropout.then_some(&mut drop_rng);
            let (loss, grads) = batch_gradients(model, set, &batch, drop)?;
            log.trace.b.push(layer_mean_norm(&grads, Role::B, n_layers));
            log.trace.c.push(layer_mean_norm(&grads, Role::C, n_layers));
            log.losses.push(loss);
            set.apply_step(&mut opt, &grads)?;
            log.steps += 1;
        }
    }
    Ok((log, opt))
}
