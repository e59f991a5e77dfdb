//! Eager tape: every operation computes its value immediately and records
//! enough to replay gradients in reverse insertion order.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::nnet::ops::{self, Pad};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d { x: NodeId, w: NodeId, stride: usize, pad: Pad },
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId, eps: f64, mean: Vec<f64>, var: Vec<f64>, train: bool },
    Relu { x: NodeId },
    Sigmoid { x: NodeId },
    MaxPool2 { x: NodeId, argmax: Vec<usize> },
    Upsample2 { x: NodeId },
    PadReplicate { x: NodeId },
    Concat { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Dense { x: NodeId, w: NodeId, b: NodeId },
    Maxout { a: NodeId, b: NodeId },
    StatsPool { x: NodeId },
    MeanW { x: NodeId },
    GapHw { x: NodeId },
    ChannelScale { x: NodeId, e: NodeId },
    Reshape { x: NodeId },
}

struct Node {
    value: Tensor,
    op: Op,
    param: Option<String>,
}

/// Recorded batch statistics for one batch-norm application, keyed by the
/// running-stat parameter names to update after the step.
pub struct BnBatchStats {
    pub mean_name: String,
    pub var_name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub struct Graph {
    nodes: Vec<Node>,
    pub training: bool,
    pub bn_stats: Vec<BnBatchStats>,
}

impl Graph {
    pub fn new(training: bool) -> Self {
        Graph { nodes: Vec::new(), training, bn_stats: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        value.debug_check_finite("graph node");
        self.nodes.push(Node { value, op, param: None });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Leaf bound to a named parameter; its gradient is collected by
    /// `param_grads`.
    pub fn param(&mut self, name: &str, value: Tensor) -> NodeId {
        let id = self.push(value, Op::Leaf);
        self.nodes[id].param = Some(String::from(name));
        id
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: Pad) -> Result<NodeId> {
        let y = ops::conv2d_forward(self.value(x), self.value(w), stride, pad)?;
        Ok(self.push(y, Op::Conv2d { x, w, stride, pad }))
    }

    /// Batch norm over the last axis. In training mode the batch
    /// statistics are used and recorded under `stat_names`; otherwise
    /// `running` supplies the statistics.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
        running: (&[f64], &[f64]),
        stat_names: (&str, &str),
    ) -> Result<NodeId> {
        let (mean, var) = if self.training {
            let (m, v) = ops::bn_channel_stats(self.value(x));
            self.bn_stats.push(BnBatchStats {
                mean_name: String::from(stat_names.0),
                var_name: String::from(stat_names.1),
                mean: m.clone(),
                var: v.clone(),
            });
            (m, v)
        } else {
            (running.0.to_vec(), running.1.to_vec())
        };
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let c = *self.value(x).dims().last().unwrap();
        if g.len() != c || b.len() != c || mean.len() != c || var.len() != c {
            return Err(Error::ShapeMismatch(alloc::format!(
                "batch norm over {c} channels got gamma {}, beta {}, stats {}/{}",
                g.len(),
                b.len(),
                mean.len(),
                var.len()
            )));
        }
        let y = ops::bn_forward(self.value(x), &g, &b, &mean, &var, eps);
        let train = self.training;
        Ok(self.push(y, Op::BatchNorm { x, gamma, beta, eps, mean, var, train }))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let y = ops::relu_forward(self.value(x));
        self.push(y, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let y = ops::sigmoid_forward(self.value(x));
        self.push(y, Op::Sigmoid { x })
    }

    pub fn maxpool2(&mut self, x: NodeId) -> NodeId {
        let (y, argmax) = ops::maxpool2_forward(self.value(x));
        self.push(y, Op::MaxPool2 { x, argmax })
    }

    pub fn upsample2(&mut self, x: NodeId) -> NodeId {
        let y = ops::upsample2_forward(self.value(x));
        self.push(y, Op::Upsample2 { x })
    }

    pub fn pad_replicate(&mut self, x: NodeId, th: usize, tw: usize) -> NodeId {
        let (_, h, w, _) = self.value(x).dims4();
        if h == th && w == tw {
            return x;
        }
        let y = ops::pad_replicate_forward(self.value(x), th, tw);
        self.push(y, Op::PadReplicate { x })
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let y = ops::concat_forward(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Concat { a, b }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).dims() != self.value(b).dims() {
            return Err(Error::ShapeMismatch(alloc::format!(
                "add: {} vs {}",
                self.value(a).shape_string(),
                self.value(b).shape_string()
            )));
        }
        let mut y = self.value(a).clone();
        for (o, &v) in y.data_mut().iter_mut().zip(self.value(b).data()) {
            *o += v;
        }
        Ok(self.push(y, Op::Add { a, b }))
    }

    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let y = ops::dense_forward(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(y, Op::Dense { x, w, b }))
    }

    pub fn maxout(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let y = ops::maxout_forward(self.value(a), self.value(b));
        self.push(y, Op::Maxout { a, b })
    }

    pub fn stats_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let y = ops::stats_pool_forward(self.value(x))?;
        Ok(self.push(y, Op::StatsPool { x }))
    }

    pub fn mean_w(&mut self, x: NodeId) -> Result<NodeId> {
        let y = ops::mean_w_forward(self.value(x))?;
        Ok(self.push(y, Op::MeanW { x }))
    }

    pub fn gap_hw(&mut self, x: NodeId) -> NodeId {
        let y = ops::gap_hw_forward(self.value(x));
        self.push(y, Op::GapHw { x })
    }

    pub fn channel_scale(&mut self, x: NodeId, e: NodeId) -> NodeId {
        let y = ops::channel_scale_forward(self.value(x), self.value(e));
        self.push(y, Op::ChannelScale { x, e })
    }

    pub fn reshape(&mut self, x: NodeId, dims: &[usize]) -> Result<NodeId> {
        let y = self.value(x).reshape(dims)?;
        Ok(self.push(y, Op::Reshape { x }))
    }

    /// Reverse pass from `(node, upstream gradient)` seeds. Returns one
    /// gradient slot per node.
    pub fn backward(&self, seeds: &[(NodeId, Tensor)]) -> Result<Vec<Option<Tensor>>> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (id, g) in seeds {
            if g.dims() != self.nodes[*id].value.dims() {
                return Err(Error::ShapeMismatch("gradient seed shape differs from node".into()));
            }
            accumulate(&mut grads[*id], g);
        }
        for id in (0..self.nodes.len()).rev() {
            let Some(dy) = grads[id].clone() else { continue };
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::Conv2d { x, w, stride, pad } => {
                    let (dx, dw) = ops::conv2d_backward(
                        &self.nodes[*x].value,
                        &self.nodes[*w].value,
                        *stride,
                        *pad,
                        &dy,
                    );
                    accumulate(&mut grads[*x], &dx);
                    accumulate(&mut grads[*w], &dw);
                }
                Op::BatchNorm { x, gamma, beta, eps, mean, var, train } => {
                    let g = self.nodes[*gamma].value.data().to_vec();
                    let (dx, dgamma, dbeta) = if *train {
                        ops::bn_backward_train(&self.nodes[*x].value, &g, mean, var, *eps, &dy)
                    } else {
                        ops::bn_backward_eval(&self.nodes[*x].value, &g, mean, var, *eps, &dy)
                    };
                    accumulate(&mut grads[*x], &dx);
                    accumulate(&mut grads[*gamma], &Tensor::from_vec(&[dgamma.len()], dgamma)?);
                    accumulate(&mut grads[*beta], &Tensor::from_vec(&[dbeta.len()], dbeta)?);
                }
                Op::Relu { x } => {
                    let dx = ops::relu_backward(&self.nodes[*x].value, &dy);
                    accumulate(&mut grads[*x], &dx);
                }
                Op::Sigmoid { x } => {
                    let dx = ops::sigmoid_backward(&self.nodes[id].value, &dy);
                    accumulate(&mut grads[*x], &dx);
                }
                Op::MaxPool2 { x, argmax } => {
                    let dx = ops::maxpool2_backward(self.nodes[*x].value.dims(), argmax, &dy);
                    accumulate(&mut grads[*x], &dx);
                }
                Op::Upsample2 { x } => {
                    let dx = ops::upsample2_backward(self.nodes[*x].value.dims(), &dy);
                    accumulate(&mut grads[*x], &dx);
                }
                Op::PadReplicate { x } => {
                    let dx = ops::pad_replicate_backward(self.nodes[*x].value.dims(), &dy);
                    accumulate(&mut grads[*x], &dx);
                }
                Op::Concat { a, b } => {
                    let ca = *self.nodes[*a].value.dims().last().unwrap();
                    let cb = *self.nodes[*b].value.dims().last().unwrap();
                    let (da, db) = ops::concat_backward(ca, cb, &dy);
                    accumulate(&mut grads[*a], &da);
                    accumulate(&mut grads[*b], &db);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads[*a], &dy);
                    accumulate(&mut grads[*b], &dy);
                }
                Op::Dense { x, w, b } => {
                    let (dx, dw, db) =
                        ops::dense_backward(&self.nodes[*x].value, &self.nodes[*w].value, &dy);
                    accumulate(&mut grads[*x], &dx);
                    accumulate(&mut grads[*w], &dw);
                    accumulate(&mut grads[*b], &db);
                }
                Op::Maxout { a, b } => {
                    let (da, db) =
                        ops::maxout_backward(&self.nodes[*a].value, &self.nodes[*b].value, &dy);
                    accumulate(&mut grads[*a], &da);
                    accumulate(&mut grads[*b], &db);
                }
                Op::StatsPool { x } => {
                    let dx = ops::stats_pool_backward(&self.nodes[*x].value, &dy);
                    accumulate(&mut grads[*x], &dx);
                }
                Op::MeanW { x } => {
                    let dx = ops::mean_w_backward(self.nodes[*x].value.dims(), &dy);
                    accumulate(&mut grads[*x], &dx);
                }
                Op::GapHw { x } => {
                    let dx = ops::gap_hw_backward(self.nodes[*x].value.dims(), &dy);
                    accumulate(&mut grads[*x], &dx);
                }
                Op::ChannelScale { x, e } => {
                    let (dx, de) = ops::channel_scale_backward(
                        &self.nodes[*x].value,
                        &self.nodes[*e].value,
                        &dy,
                    );
                    accumulate(&mut grads[*x], &dx);
                    accumulate(&mut grads[*e], &de);
                }
                Op::Reshape { x } => {
                    let dx = dy.reshape(self.nodes[*x].value.dims())?;
                    accumulate(&mut grads[*x], &dx);
                }
            }
        }
        Ok(grads)
    }

    /// Gradients of named parameter leaves, keyed by name.
    pub fn param_grads(&self, grads: &[Option<Tensor>]) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if let (Some(name), Some(g)) = (&node.param, &grads[id]) {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: &Tensor) {
    match slot {
        Some(acc) => {
            for (a, &v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += v;
            }
        }
        None => *slot = Some(g.clone()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngExt;

    fn random_tensor(dims: &[usize], seed: u64) -> Tensor {
        let mut rng = crate::rng::from_seed(seed);
        let n: usize = dims.iter().product();
        Tensor::from_vec(dims, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central finite differences against the analytic gradient of
    /// sum(weights * output). `build` must construct the same graph from
    /// the given input tensors each time.
    pub(crate) fn fd_check(
        inputs: &[Tensor],
        build: &dyn Fn(&mut Graph, &[NodeId]) -> NodeId,
        training: bool,
        tol: f64,
    ) {
        let run = |tensors: &[Tensor]| -> (Graph, Vec<NodeId>, NodeId) {
            let mut g = Graph::new(training);
            let ids: Vec<NodeId> = tensors.iter().map(|t| g.leaf(t.clone())).collect();
            let out = build(&mut g, &ids);
            (g, ids, out)
        };
        let (graph, ids, out) = run(inputs);
        // deterministic pseudo-random seed so every output element matters
        let out_len = graph.value(out).len();
        let seed_weights: Vec<f64> =
            (0..out_len).map(|i| 0.3 + 0.7 * ((i * 2654435761) % 97) as f64 / 97.0).collect();
        let seed = Tensor::from_vec(graph.value(out).dims(), seed_weights.clone()).unwrap();
        let grads = graph.backward(&[(out, seed)]).unwrap();

        let objective = |tensors: &[Tensor]| -> f64 {
            let (g, _, o) = run(tensors);
            g.value(o).data().iter().zip(seed_weights.iter()).map(|(&y, &w)| y * w).sum()
        };

        let step = 1e-5;
        for (ti, input) in inputs.iter().enumerate() {
            let analytic = grads[ids[ti]].clone().unwrap_or_else(|| Tensor::zeros(input.dims()));
            for ei in 0..input.len() {
                let mut plus = inputs.to_vec();
                plus[ti].data_mut()[ei] += step;
                let mut minus = inputs.to_vec();
                minus[ti].data_mut()[ei] -= step;
                let num = (objective(&plus) - objective(&minus)) / (2.0 * step);
                let ana = analytic.data()[ei];
                let diff = (num - ana).abs();
                assert!(
                    diff <= tol * num.abs().max(ana.abs()) || diff <= 1e-7,
                    "input {ti} elem {ei}: numeric {num} vs analytic {ana}"
                );
            }
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let x = random_tensor(&[2, 4, 5, 2], 21);
        let w = random_tensor(&[3, 3, 2, 3], 22);
        fd_check(
            &[x, w],
            &|g, ids| g.conv2d(ids[0], ids[1], 1, Pad::Same).unwrap(),
            false,
            1e-4,
        );
    }

    #[test]
    fn conv_stride2_gradients() {
        let x = random_tensor(&[1, 5, 5, 2], 23);
        let w = random_tensor(&[3, 3, 2, 2], 24);
        fd_check(
            &[x, w],
            &|g, ids| g.conv2d(ids[0], ids[1], 2, Pad::Same).unwrap(),
            false,
            1e-4,
        );
    }

    #[test]
    fn bn_train_gradients() {
        let x = random_tensor(&[3, 2, 2, 2], 25);
        let gamma = random_tensor(&[2], 26);
        let beta = random_tensor(&[2], 27);
        fd_check(
            &[x, gamma, beta],
            &|g, ids| {
                g.batch_norm(ids[0], ids[1], ids[2], 1e-5, (&[0.0; 2], &[1.0; 2]), ("m", "v"))
                    .unwrap()
            },
            true,
            1e-4,
        );
    }

    #[test]
    fn bn_eval_gradients() {
        let x = random_tensor(&[2, 2, 2, 3], 28);
        let gamma = random_tensor(&[3], 29);
        let beta = random_tensor(&[3], 30);
        fd_check(
            &[x, gamma, beta],
            &|g, ids| {
                g.batch_norm(
                    ids[0],
                    ids[1],
                    ids[2],
                    1e-5,
                    (&[0.1, -0.2, 0.3], &[0.9, 1.1, 1.3]),
                    ("m", "v"),
                )
                .unwrap()
            },
            false,
            1e-4,
        );
    }

    #[test]
    fn pool_upsample_concat_gradients() {
        let x = random_tensor(&[1, 4, 6, 2], 31);
        fd_check(
            &[x],
            &|g, ids| {
                let p = g.maxpool2(ids[0]);
                let u = g.upsample2(p);
                let padded = g.pad_replicate(u, 4, 7);
                let cropped = g.pad_replicate(padded, 4, 7);
                let _ = cropped;
                padded
            },
            false,
            1e-4,
        );
    }

    #[test]
    fn stats_pool_gradients() {
        let x = random_tensor(&[2, 3, 6, 2], 32);
        fd_check(&[x], &|g, ids| g.stats_pool(ids[0]).unwrap(), false, 1e-4);
    }

    #[test]
    fn dense_maxout_gradients() {
        let x = random_tensor(&[3, 5], 33);
        let wa = random_tensor(&[5, 4], 34);
        let ba = random_tensor(&[4], 35);
        let wb = random_tensor(&[5, 4], 36);
        let bb = random_tensor(&[4], 37);
        fd_check(
            &[x, wa, ba, wb, bb],
            &|g, ids| {
                let a = g.dense(ids[0], ids[1], ids[2]).unwrap();
                let b = g.dense(ids[0], ids[3], ids[4]).unwrap();
                g.maxout(a, b)
            },
            false,
            1e-4,
        );
    }

    #[test]
    fn sigmoid_meanw_gradients() {
        let x = random_tensor(&[2, 4, 3, 1], 38);
        fd_check(
            &[x],
            &|g, ids| {
                let s = g.sigmoid(ids[0]);
                g.mean_w(s).unwrap()
            },
            false,
            1e-4,
        );
    }

    #[test]
    fn channel_scale_gap_gradients() {
        let x = random_tensor(&[2, 3, 3, 4], 39);
        fd_check(
            &[x],
            &|g, ids| {
                let e = g.gap_hw(ids[0]);
                let s = g.sigmoid(e);
                g.channel_scale(ids[0], s)
            },
            false,
            1e-4,
        );
    }

    #[test]
    fn concat_add_relu_gradients() {
        let a = random_tensor(&[1, 3, 3, 2], 40);
        let b = random_tensor(&[1, 3, 3, 2], 41);
        fd_check(
            &[a, b],
            &|g, ids| {
                let c = g.concat(ids[0], ids[1]).unwrap();
                let r = g.relu(c);
                g.add(r, c).unwrap()
            },
            false,
            1e-4,
        );
    }
}
