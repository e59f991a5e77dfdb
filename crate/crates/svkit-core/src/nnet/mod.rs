//! Tensor engine with analytic gradients, the ResNet embedding
//! extractors, and the margin-softmax training objectives.

pub mod arch;
pub mod graph;
pub mod loss;
pub mod ops;
pub mod train;

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::features::FeatureMatrix;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub use arch::{BlockVariant, ResNetConfig, StageTrace, UnetConfig};
pub use graph::Graph;
pub use loss::{am_softmax_loss, d_softmax_loss, DSoftmaxForm};
pub use ops::Pad;
pub use train::{train_toy, LossKind, TrainConfig};

/// Named collection of trained parameters plus architecture metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightStore {
    tensors: BTreeMap<String, Tensor>,
}

impl WeightStore {
    pub fn new() -> Self {
        WeightStore { tensors: BTreeMap::new() }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::InvalidInput(alloc::format!("missing parameter `{name}`")))
    }

    pub fn set(&mut self, name: &str, tensor: Tensor) {
        self.tensors.insert(String::from(name), tensor);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn resnet_config(&self) -> Result<ResNetConfig> {
        ResNetConfig::from_meta(self.get("meta.resnet")?)
    }

    pub fn unet_config(&self) -> Result<UnetConfig> {
        UnetConfig::from_meta(self.get("meta.unet")?)
    }
}

/// Fixed-dimensional speaker representation for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub utt_id: String,
    pub vector: Vec<f64>,
}

impl Embedding {
    pub fn new(utt_id: impl Into<String>, vector: Vec<f64>) -> Self {
        Embedding { utt_id: utt_id.into(), vector }
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn norm(&self) -> f64 {
        crate::math::sqrt(self.vector.iter().map(|&v| v * v).sum())
    }
}

/// Scale / margin / epsilon knobs of the margin-softmax objectives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParams {
    pub scale: f64,
    pub margin: f64,
    pub epsilon: f64,
}

impl LossParams {
    pub fn new(scale: f64, margin: f64, epsilon: f64) -> Result<Self> {
        if scale <= 0.0 {
            return Err(Error::InvalidInput("loss scale must be positive".into()));
        }
        if margin < 0.0 || epsilon < 0.0 {
            return Err(Error::InvalidInput("margin and epsilon must be non-negative".into()));
        }
        Ok(LossParams { scale, margin, epsilon })
    }
}

fn promote4(x: &Tensor) -> Result<(Tensor, bool)> {
    match x.ndim() {
        4 => Ok((x.clone(), false)),
        3 => {
            let mut dims = alloc::vec![1usize];
            dims.extend_from_slice(x.dims());
            Ok((x.reshape(&dims)?, true))
        }
        _ => Err(Error::ShapeMismatch("expected a 3-D [h,w,c] or 4-D [n,h,w,c] tensor".into())),
    }
}

fn demote4(y: Tensor, squeeze: bool) -> Tensor {
    if squeeze {
        let dims = y.dims()[1..].to_vec();
        y.reshape(&dims).unwrap()
    } else {
        y
    }
}

/// Strided cross-correlation; accepts `[h,w,ci]` or `[n,h,w,ci]` input.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: Pad) -> Result<Tensor> {
    let (x4, squeeze) = promote4(x)?;
    Ok(demote4(ops::conv2d_forward(&x4, w, stride, pad)?, squeeze))
}

/// Inference-mode batch normalization with explicit statistics.
pub fn batch_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mean: &Tensor,
    var: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    let c = *x.dims().last().unwrap();
    if gamma.len() != c || beta.len() != c || mean.len() != c || var.len() != c {
        return Err(Error::ShapeMismatch(alloc::format!(
            "batch norm over {c} channels got {}, {}, {}, {}",
            gamma.len(),
            beta.len(),
            mean.len(),
            var.len()
        )));
    }
    Ok(ops::bn_forward(x, gamma.data(), beta.data(), mean.data(), var.data(), eps))
}

/// Temporal statistics pooling `[f,t,c]` -> `[2f,c]` (means stacked over
/// population stds, variance floored before the root).
pub fn stats_pool(x: &Tensor) -> Result<Tensor> {
    let (x4, _) = promote4(x)?;
    if x4.dim(2) < 2 {
        return Err(Error::InvalidInput(alloc::format!(
            "statistics pooling needs at least 2 frames, got {}",
            x4.dim(2)
        )));
    }
    let y = ops::stats_pool_forward(&x4)?;
    let dims = y.dims()[1..].to_vec();
    y.reshape(&dims)
}

/// Squeeze-and-excitation channel gating: global average squeeze, a
/// bias-free two-layer bottleneck (`w1 [c, c/r]`, `w2 [c/r, c]`) with
/// sigmoid output scaling each channel of `x`.
pub fn se_excite(x: &Tensor, w1: &Tensor, w2: &Tensor, reduction: usize) -> Result<Tensor> {
    let (x4, squeeze_back) = promote4(x)?;
    let c = *x4.dims().last().unwrap();
    if c % reduction != 0 {
        return Err(Error::InvalidInput(alloc::format!(
            "{c} channels not divisible by reduction {reduction}"
        )));
    }
    let hidden = c / reduction;
    if w1.dims() != [c, hidden] || w2.dims() != [hidden, c] {
        return Err(Error::ShapeMismatch(alloc::format!(
            "excitation weights must be [{c},{hidden}] and [{hidden},{c}]"
        )));
    }
    let squeezed = ops::gap_hw_forward(&x4);
    let zero1 = Tensor::zeros(&[hidden]);
    let h = ops::relu_forward(&ops::dense_forward(&squeezed, w1, &zero1)?);
    let zero2 = Tensor::zeros(&[c]);
    let e = ops::sigmoid_forward(&ops::dense_forward(&h, w2, &zero2)?);
    Ok(demote4(ops::channel_scale_forward(&x4, &e), squeeze_back))
}

/// Parameters of one residual block keyed by the standard layer names
/// (`conv1.w`, `bn1.gamma`, ... plus `sc.w`/`scbn.*` when the shapes
/// change).
#[derive(Debug, Clone)]
pub struct BlockParams {
    pub tensors: WeightStore,
    pub variant: BlockVariant,
}

impl BlockParams {
    /// Seeded parameters for a block mapping `cin` to `cout` channels at
    /// the given stride.
    pub fn init(variant: BlockVariant, cin: usize, cout: usize, stride: usize, seed: u64) -> Self {
        let cfg = ResNetConfig {
            variant,
            input_dim: 1,
            initial_channels: cin,
            stage_channels: [cout; 4],
            stage_blocks: [1, 1, 1, 1],
            embed_dim: 1,
            se_reduction: 4,
            feature_kind: crate::features::FeatureKind::Mfb80,
        };
        let mut full = arch::init_resnet(&cfg, None, seed);
        let mut tensors = WeightStore::new();
        let names: Vec<String> =
            full.iter().map(|(n, _)| n.clone()).filter(|n| n.starts_with("s1.b0.")).collect();
        for name in &names {
            let t = full.remove(name).unwrap();
            tensors.set(name.trim_start_matches("s1.b0."), t);
        }
        if stride != 1 && !tensors.contains("sc.w") {
            // same-channel strided block still needs a projection shortcut
            let mut extra = Init::for_block(seed ^ 0x5c5c_5c5c);
            extra.conv(&mut tensors, "sc.w", 1, cin, cout);
            extra.bn(&mut tensors, "scbn", cout);
        }
        BlockParams { tensors, variant }
    }
}

// Seeded initializer usable outside `arch` for shortcut fill-in.
struct Init {
    rng: crate::rng::Rng,
}

impl Init {
    fn for_block(seed: u64) -> Self {
        Init { rng: crate::rng::from_seed(seed) }
    }

    fn conv(&mut self, store: &mut WeightStore, name: &str, k: usize, ci: usize, co: usize) {
        use rand_distr::Distribution;
        let std = crate::math::sqrt(2.0 / (k * k * ci) as f64);
        let normal = rand_distr::Normal::new(0.0, std).unwrap();
        let data: Vec<f64> = (0..k * k * ci * co).map(|_| normal.sample(&mut self.rng)).collect();
        store.set(name, Tensor::from_vec(&[k, k, ci, co], data).unwrap());
    }

    fn bn(&mut self, store: &mut WeightStore, prefix: &str, c: usize) {
        store.set(&alloc::format!("{prefix}.gamma"), Tensor::from_vec(&[c], alloc::vec![1.0; c]).unwrap());
        store.set(&alloc::format!("{prefix}.beta"), Tensor::zeros(&[c]));
        store.set(&alloc::format!("{prefix}.mean"), Tensor::zeros(&[c]));
        store.set(&alloc::format!("{prefix}.var"), Tensor::from_vec(&[c], alloc::vec![1.0; c]).unwrap());
    }
}

/// One residual block in inference mode: `relu(branch(x) + shortcut(x))`,
/// identity shortcut when shapes match.
pub fn resnet_block(x: &Tensor, params: &BlockParams, stride: usize) -> Result<Tensor> {
    let (x4, squeeze) = promote4(x)?;
    let mut store = WeightStore::new();
    for (name, t) in params.tensors.iter() {
        store.set(&alloc::format!("blk.{name}"), t.clone());
    }
    let mut g = Graph::new(false);
    let input = g.leaf(x4);
    let out = arch::residual_block_on_graph(&mut g, &store, input, "blk", params.variant, stride)?;
    Ok(demote4(g.value(out).clone(), squeeze))
}

/// Forward an utterance through the extractor and take the maxout output
/// of the embedding layer.
pub fn embed_forward(
    feats: &FeatureMatrix,
    store: &WeightStore,
    cfg: &ResNetConfig,
) -> Result<Embedding> {
    Ok(embed_forward_trace(feats, store, cfg)?.0)
}

/// As `embed_forward`, also reporting every stage's per-sample output
/// shape.
pub fn embed_forward_trace(
    feats: &FeatureMatrix,
    store: &WeightStore,
    cfg: &ResNetConfig,
) -> Result<(Embedding, StageTrace)> {
    if feats.cols() != cfg.input_dim {
        return Err(Error::ShapeMismatch(alloc::format!(
            "extractor expects {}-dim features, got {}",
            cfg.input_dim,
            feats.cols()
        )));
    }
    let t_frames = feats.rows();
    if t_frames < 8 {
        return Err(Error::InvalidInput(alloc::format!(
            "need at least 8 frames to embed, got {t_frames}"
        )));
    }
    let input = features_to_input(feats);
    let mut g = Graph::new(false);
    let x = g.leaf(input);
    let (emb, trace) = arch::resnet_forward(&mut g, x, store, cfg)?;
    let vector = g.value(emb).data().to_vec();
    Ok((Embedding::new("", vector), trace))
}

/// `[t, f]` feature rows to network input `[1, f, t, 1]`.
pub fn features_to_input(feats: &FeatureMatrix) -> Tensor {
    let (t, f) = (feats.rows(), feats.cols());
    let mut x = Tensor::zeros(&[1, f, t, 1]);
    for ti in 0..t {
        for fi in 0..f {
            *x.at4_mut(0, fi, ti, 0) = feats.at(ti, fi);
        }
    }
    x
}
