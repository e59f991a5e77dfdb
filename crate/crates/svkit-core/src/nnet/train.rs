//! Seeded minibatch SGD for the embedding extractors at desk scale.

use alloc::vec::Vec;
use rand::RngExt;

use crate::features::FeatureMatrix;
use crate::nnet::arch::{self, ResNetConfig, BN_MOMENTUM};
use crate::nnet::graph::Graph;
use crate::nnet::loss::{am_softmax_loss, d_softmax_loss, DSoftmaxForm};
use crate::nnet::{LossParams, WeightStore};
use crate::rng;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    AmSoftmax,
    DSoftmax,
}

/// Schedule defaults: base learning rate held for two epochs then decayed
/// by 10x per epoch; margin warm-up on the first epoch; scale 30.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub lr_hold_epochs: usize,
    pub scale: f64,
    pub margin_first_epoch: f64,
    pub margin: f64,
    pub epsilon: f64,
    /// Frames per training chunk (200 = 2 s at a 10 ms hop).
    pub chunk_frames: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 4,
            batch_size: 8,
            learning_rate: 0.001,
            lr_decay: 0.1,
            lr_hold_epochs: 2,
            scale: 30.0,
            margin_first_epoch: 0.001,
            margin: 0.2,
            epsilon: 1.0,
            chunk_frames: 200,
        }
    }
}

impl TrainConfig {
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let steps = (epoch + 1).saturating_sub(self.lr_hold_epochs);
        self.learning_rate * crate::math::powi(self.lr_decay, steps as i32)
    }

    pub fn margin_at_epoch(&self, epoch: usize) -> f64 {
        if epoch == 0 {
            self.margin_first_epoch
        } else {
            self.margin
        }
    }
}

pub struct TrainOutcome {
    pub weights: WeightStore,
    pub epoch_losses: Vec<f64>,
}

/// Copy a fixed-length chunk starting at `start` (wrapping when the
/// utterance is shorter than the chunk) into the batch tensor.
fn fill_chunk(batch: &mut Tensor, slot: usize, feats: &FeatureMatrix, start: usize, chunk: usize) {
    let rows = feats.rows();
    let dims = feats.cols();
    for t in 0..chunk {
        let src = if rows >= chunk { start + t } else { (start + t) % rows };
        for f in 0..dims {
            *batch.at4_mut(slot, f, t, 0) = feats.at(src, f);
        }
    }
}

fn sgd_apply(store: &mut WeightStore, grads: &alloc::collections::BTreeMap<alloc::string::String, Tensor>, lr: f64) {
    for (name, g) in grads {
        let mut p = store.get(name).unwrap().clone();
        for (pv, &gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv -= lr * gv;
        }
        store.set(name, p);
    }
}

pub(crate) fn apply_bn_updates(store: &mut WeightStore, graph: &Graph) {
    for upd in &graph.bn_stats {
        let mut mean = store.get(&upd.mean_name).unwrap().clone();
        for (m, &b) in mean.data_mut().iter_mut().zip(upd.mean.iter()) {
            *m = BN_MOMENTUM * *m + (1.0 - BN_MOMENTUM) * b;
        }
        store.set(&upd.mean_name, mean);
        let mut var = store.get(&upd.var_name).unwrap().clone();
        for (v, &b) in var.data_mut().iter_mut().zip(upd.var.iter()) {
            *v = BN_MOMENTUM * *v + (1.0 - BN_MOMENTUM) * b;
        }
        store.set(&upd.var_name, var);
    }
}

pub(crate) fn shuffled_indices(n: usize, rng: &mut rng::Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Train an extractor on labelled utterances of features. Labels are
/// dense class ids starting at 0.
pub fn train_toy(
    dataset: &[(FeatureMatrix, usize)],
    cfg: &ResNetConfig,
    loss_kind: LossKind,
    tc: &TrainConfig,
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    let n_classes = dataset.iter().map(|(_, l)| l + 1).max().unwrap();
    if n_classes < 2 {
        return Err(Error::InvalidInput("need at least 2 speakers to train".into()));
    }
    for (feats, _) in dataset {
        if feats.cols() != cfg.input_dim {
            return Err(Error::ShapeMismatch(alloc::format!(
                "training features are {}-dim, extractor wants {}",
                feats.cols(),
                cfg.input_dim
            )));
        }
    }
    let mut store = arch::init_resnet(cfg, Some(n_classes), tc.seed);
    let mut rng = rng::from_seed(tc.seed.wrapping_add(1));
    let mut epoch_losses = Vec::with_capacity(tc.epochs);
    for epoch in 0..tc.epochs {
        let lr = tc.lr_at_epoch(epoch);
        let params = LossParams::new(tc.scale, tc.margin_at_epoch(epoch), tc.epsilon)?;
        let order = shuffled_indices(dataset.len(), &mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for batch_ids in order.chunks(tc.batch_size) {
            let n = batch_ids.len();
            let mut batch = Tensor::zeros(&[n, cfg.input_dim, tc.chunk_frames, 1]);
            let mut labels = Vec::with_capacity(n);
            for (slot, &ui) in batch_ids.iter().enumerate() {
                let (feats, label) = &dataset[ui];
                let start = if feats.rows() > tc.chunk_frames {
                    rng.random_range(0..=feats.rows() - tc.chunk_frames)
                } else {
                    0
                };
                fill_chunk(&mut batch, slot, feats, start, tc.chunk_frames);
                labels.push(*label);
            }
            let mut graph = Graph::new(true);
            let input = graph.leaf(batch);
            let (emb_node, _) = arch::resnet_forward(&mut graph, input, &store, cfg)?;
            let embeddings = graph.value(emb_node).clone();
            let head = store.get("head.w")?;
            // head rows are class vectors: [n_classes, embed]
            let (loss, d_emb, d_head) = match loss_kind {
                LossKind::AmSoftmax => am_softmax_loss(&embeddings, &labels, head, &params)?,
                LossKind::DSoftmax => {
                    d_softmax_loss(&embeddings, &labels, head, &params, DSoftmaxForm::Log)?
                }
            };
            if !loss.is_finite() {
                return Err(Error::Numeric(alloc::format!(
                    "training diverged at epoch {epoch} (non-finite loss)"
                )));
            }
            epoch_loss += loss;
            batches += 1;
            if lr == 0.0 {
                continue; // a null update leaves every parameter and statistic alone
            }
            let grads = graph.backward(&[(emb_node, d_emb)])?;
            let param_grads = graph.param_grads(&grads);
            sgd_apply(&mut store, &param_grads, lr);
            let mut head = store.get("head.w")?.clone();
            for (p, &g) in head.data_mut().iter_mut().zip(d_head.data()) {
                *p -= lr * g;
            }
            store.set("head.w", head);
            apply_bn_updates(&mut store, &graph);
        }
        epoch_losses.push(epoch_loss / batches.max(1) as f64);
    }
    Ok(TrainOutcome { weights: store, epoch_losses })
}
