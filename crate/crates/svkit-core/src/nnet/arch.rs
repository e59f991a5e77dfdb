//! Network definitions: residual embedding extractors (basic and
//! SE-bottleneck variants) and the U-net speech detector, built on the
//! shared graph.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand_distr::{Distribution, Normal};

use crate::features::FeatureKind;
use crate::nnet::graph::{Graph, NodeId};
use crate::nnet::ops::Pad;
use crate::nnet::WeightStore;
use crate::rng;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Named per-stage output shapes of a forward pass.
pub type StageTrace = Vec<(String, Vec<usize>)>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockVariant {
    /// Two 3x3 convolutions.
    Basic,
    /// 1x1 / 3x3 / 1x1 bottleneck with squeeze-excitation scaling.
    BottleneckSe,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResNetConfig {
    pub variant: BlockVariant,
    /// Frequency bins of the input features.
    pub input_dim: usize,
    pub initial_channels: usize,
    pub stage_channels: [usize; 4],
    pub stage_blocks: [usize; 4],
    pub embed_dim: usize,
    pub se_reduction: usize,
    pub feature_kind: FeatureKind,
}

impl ResNetConfig {
    pub fn resnet34() -> Self {
        ResNetConfig {
            variant: BlockVariant::Basic,
            input_dim: 80,
            initial_channels: 32,
            stage_channels: [32, 64, 128, 256],
            stage_blocks: [3, 4, 6, 3],
            embed_dim: 512,
            se_reduction: 8,
            feature_kind: FeatureKind::Mfb80,
        }
    }

    pub fn resnet50_se() -> Self {
        ResNetConfig { variant: BlockVariant::BottleneckSe, ..Self::resnet34() }
    }

    /// Reduced widths for desk-scale training runs.
    pub fn toy() -> Self {
        ResNetConfig {
            variant: BlockVariant::Basic,
            input_dim: 80,
            initial_channels: 4,
            stage_channels: [4, 8, 16, 32],
            stage_blocks: [1, 1, 1, 1],
            embed_dim: 512,
            se_reduction: 4,
            feature_kind: FeatureKind::Mfb80,
        }
    }

    pub fn arch_id(&self) -> &'static str {
        if *self == Self::resnet34() {
            "resnet34"
        } else if *self == Self::resnet50_se() {
            "resnet50se"
        } else if *self == Self::toy() {
            "toy"
        } else {
            "custom"
        }
    }

    /// Flattened width after statistics pooling.
    pub fn pooled_dim(&self) -> usize {
        // three stride-2 stages shrink the frequency axis by ceil division
        let mut f = self.input_dim;
        for _ in 0..3 {
            f = f.div_ceil(2);
        }
        2 * f * self.stage_channels[3]
    }

    pub fn to_meta(&self) -> Tensor {
        let mut v = vec![
            match self.variant {
                BlockVariant::Basic => 0.0,
                BlockVariant::BottleneckSe => 1.0,
            },
            self.input_dim as f64,
            self.initial_channels as f64,
        ];
        v.extend(self.stage_channels.iter().map(|&c| c as f64));
        v.extend(self.stage_blocks.iter().map(|&b| b as f64));
        v.push(self.embed_dim as f64);
        v.push(self.se_reduction as f64);
        v.push(self.feature_kind.code() as f64);
        Tensor::from_vec(&[v.len()], v).unwrap()
    }

    pub fn from_meta(t: &Tensor) -> Result<Self> {
        let d = t.data();
        if d.len() != 14 {
            return Err(Error::Format("malformed extractor metadata".into()));
        }
        Ok(ResNetConfig {
            variant: if d[0] == 0.0 { BlockVariant::Basic } else { BlockVariant::BottleneckSe },
            input_dim: d[1] as usize,
            initial_channels: d[2] as usize,
            stage_channels: [d[3] as usize, d[4] as usize, d[5] as usize, d[6] as usize],
            stage_blocks: [d[7] as usize, d[8] as usize, d[9] as usize, d[10] as usize],
            embed_dim: d[11] as usize,
            se_reduction: d[12] as usize,
            feature_kind: FeatureKind::from_code(d[13] as u8)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnetConfig {
    pub base_channels: usize,
    /// Feature dimension (frequency axis width).
    pub input_dim: usize,
    /// Frames per analysis window.
    pub window: usize,
}

impl UnetConfig {
    pub fn standard() -> Self {
        UnetConfig { base_channels: 16, input_dim: 23, window: 128 }
    }

    pub fn toy() -> Self {
        UnetConfig { base_channels: 4, input_dim: 23, window: 128 }
    }

    pub fn to_meta(&self) -> Tensor {
        Tensor::from_vec(
            &[3],
            vec![self.base_channels as f64, self.input_dim as f64, self.window as f64],
        )
        .unwrap()
    }

    pub fn from_meta(t: &Tensor) -> Result<Self> {
        let d = t.data();
        if d.len() != 3 {
            return Err(Error::Format("malformed detector metadata".into()));
        }
        Ok(UnetConfig {
            base_channels: d[0] as usize,
            input_dim: d[1] as usize,
            window: d[2] as usize,
        })
    }
}

struct Init<'a> {
    store: &'a mut WeightStore,
    rng: rng::Rng,
}

impl<'a> Init<'a> {
    fn conv(&mut self, name: &str, k: usize, ci: usize, co: usize) {
        // He-normal over fan-in
        let std = crate::math::sqrt(2.0 / (k * k * ci) as f64);
        let normal = Normal::new(0.0, std).unwrap();
        let data: Vec<f64> = (0..k * k * ci * co).map(|_| normal.sample(&mut self.rng)).collect();
        self.store.set(name, Tensor::from_vec(&[k, k, ci, co], data).unwrap());
    }

    fn bn(&mut self, prefix: &str, c: usize) {
        self.store.set(&format!("{prefix}.gamma"), Tensor::from_vec(&[c], vec![1.0; c]).unwrap());
        self.store.set(&format!("{prefix}.beta"), Tensor::zeros(&[c]));
        self.store.set(&format!("{prefix}.mean"), Tensor::zeros(&[c]));
        self.store.set(&format!("{prefix}.var"), Tensor::from_vec(&[c], vec![1.0; c]).unwrap());
    }

    fn dense(&mut self, name: &str, din: usize, dout: usize, bias: bool) {
        let std = crate::math::sqrt(2.0 / din as f64);
        let normal = Normal::new(0.0, std).unwrap();
        let data: Vec<f64> = (0..din * dout).map(|_| normal.sample(&mut self.rng)).collect();
        self.store.set(&format!("{name}.w"), Tensor::from_vec(&[din, dout], data).unwrap());
        if bias {
            self.store.set(&format!("{name}.b"), Tensor::zeros(&[dout]));
        }
    }

    /// Class-weight matrix with one row per class.
    fn class_matrix(&mut self, name: &str, rows: usize, cols: usize) {
        let std = crate::math::sqrt(2.0 / cols as f64);
        let normal = Normal::new(0.0, std).unwrap();
        let data: Vec<f64> = (0..rows * cols).map(|_| normal.sample(&mut self.rng)).collect();
        self.store.set(name, Tensor::from_vec(&[rows, cols], data).unwrap());
    }
}

fn block_prefix(stage: usize, block: usize) -> String {
    format!("s{stage}.b{block}")
}

/// Seeded parameter initialization. `n_classes` adds the classifier head
/// used only during training.
pub fn init_resnet(cfg: &ResNetConfig, n_classes: Option<usize>, seed: u64) -> WeightStore {
    let mut store = WeightStore::new();
    let mut init = Init { store: &mut store, rng: rng::from_seed(seed) };
    init.conv("conv0.w", 3, 1, cfg.initial_channels);
    init.bn("bn0", cfg.initial_channels);
    let mut cin = cfg.initial_channels;
    for stage in 0..4 {
        let cout = cfg.stage_channels[stage];
        for block in 0..cfg.stage_blocks[stage] {
            let p = block_prefix(stage + 1, block);
            let stride = if stage > 0 && block == 0 { 2 } else { 1 };
            match cfg.variant {
                BlockVariant::Basic => {
                    init.conv(&format!("{p}.conv1.w"), 3, cin, cout);
                    init.bn(&format!("{p}.bn1"), cout);
                    init.conv(&format!("{p}.conv2.w"), 3, cout, cout);
                    init.bn(&format!("{p}.bn2"), cout);
                }
                BlockVariant::BottleneckSe => {
                    let mid = (cout / 4).max(1);
                    init.conv(&format!("{p}.conv1.w"), 1, cin, mid);
                    init.bn(&format!("{p}.bn1"), mid);
                    init.conv(&format!("{p}.conv2.w"), 3, mid, mid);
                    init.bn(&format!("{p}.bn2"), mid);
                    init.conv(&format!("{p}.conv3.w"), 1, mid, cout);
                    init.bn(&format!("{p}.bn3"), cout);
                    let hidden = (cout / cfg.se_reduction).max(1);
                    init.dense(&format!("{p}.se1"), cout, hidden, false);
                    init.dense(&format!("{p}.se2"), hidden, cout, false);
                }
            }
            if stride != 1 || cin != cout {
                init.conv(&format!("{p}.sc.w"), 1, cin, cout);
                init.bn(&format!("{p}.scbn"), cout);
            }
            cin = cout;
        }
    }
    init.dense("dense1.a", cfg.pooled_dim(), cfg.embed_dim, true);
    init.dense("dense1.b", cfg.pooled_dim(), cfg.embed_dim, true);
    if let Some(c) = n_classes {
        init.class_matrix("head.w", c, cfg.embed_dim);
    }
    store.set("meta.resnet", cfg.to_meta());
    store
}

struct Builder<'a> {
    g: &'a mut Graph,
    store: &'a WeightStore,
}

impl<'a> Builder<'a> {
    fn param(&mut self, name: &str) -> Result<NodeId> {
        Ok(self.g.param(name, self.store.get(name)?.clone()))
    }

    fn bn(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        let mean = self.store.get(&format!("{prefix}.mean"))?.data().to_vec();
        let var = self.store.get(&format!("{prefix}.var"))?.data().to_vec();
        self.g.batch_norm(
            x,
            gamma,
            beta,
            BN_EPS,
            (&mean, &var),
            (&format!("{prefix}.mean"), &format!("{prefix}.var")),
        )
    }

    fn conv_bn(&mut self, x: NodeId, conv: &str, bn: &str, stride: usize) -> Result<NodeId> {
        let w = self.param(conv)?;
        let c = self.g.conv2d(x, w, stride, Pad::Same)?;
        self.bn(c, bn)
    }

    fn se_scale(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let squeeze = self.g.gap_hw(x);
        let w1 = self.param(&format!("{prefix}.se1.w"))?;
        let hidden = self.g.value(w1).dim(1);
        let zero1 = self.g.leaf(Tensor::zeros(&[hidden]));
        let h = self.g.dense(squeeze, w1, zero1)?;
        let h = self.g.relu(h);
        let w2 = self.param(&format!("{prefix}.se2.w"))?;
        let cout = self.g.value(w2).dim(1);
        let zero2 = self.g.leaf(Tensor::zeros(&[cout]));
        let e = self.g.dense(h, w2, zero2)?;
        let e = self.g.sigmoid(e);
        Ok(self.g.channel_scale(x, e))
    }

    fn residual_block(
        &mut self,
        x: NodeId,
        prefix: &str,
        variant: BlockVariant,
        stride: usize,
    ) -> Result<NodeId> {
        let branch = match variant {
            BlockVariant::Basic => {
                let h = self.conv_bn(x, &format!("{prefix}.conv1.w"), &format!("{prefix}.bn1"), stride)?;
                let h = self.g.relu(h);
                self.conv_bn(h, &format!("{prefix}.conv2.w"), &format!("{prefix}.bn2"), 1)?
            }
            BlockVariant::BottleneckSe => {
                let h = self.conv_bn(x, &format!("{prefix}.conv1.w"), &format!("{prefix}.bn1"), 1)?;
                let h = self.g.relu(h);
                let h = self.conv_bn(h, &format!("{prefix}.conv2.w"), &format!("{prefix}.bn2"), stride)?;
                let h = self.g.relu(h);
                let h = self.conv_bn(h, &format!("{prefix}.conv3.w"), &format!("{prefix}.bn3"), 1)?;
                self.se_scale(h, prefix)?
            }
        };
        let shortcut = if self.store.contains(&format!("{prefix}.sc.w")) {
            self.conv_bn(x, &format!("{prefix}.sc.w"), &format!("{prefix}.scbn"), stride)?
        } else {
            x
        };
        let sum = self.g.add(branch, shortcut)?;
        Ok(self.g.relu(sum))
    }
}

/// Run one residual block over an existing graph node using parameters
/// named `<prefix>.*` in `store`.
pub(crate) fn residual_block_on_graph(
    g: &mut Graph,
    store: &WeightStore,
    x: NodeId,
    prefix: &str,
    variant: BlockVariant,
    stride: usize,
) -> Result<NodeId> {
    let mut b = Builder { g, store };
    b.residual_block(x, prefix, variant, stride)
}

/// Forward pass from `input [n, f, t, 1]` to the embedding `[n, embed]`.
/// Also returns named per-sample shapes of every stage output.
pub fn resnet_forward(
    g: &mut Graph,
    input: NodeId,
    store: &WeightStore,
    cfg: &ResNetConfig,
) -> Result<(NodeId, StageTrace)> {
    let (_, f, _, _) = g.value(input).dims4();
    if f != cfg.input_dim {
        return Err(Error::ShapeMismatch(format!(
            "extractor expects {}-dim features, got {f}",
            cfg.input_dim
        )));
    }
    let mut trace: StageTrace = Vec::new();
    let push_trace = |trace: &mut Vec<(String, Vec<usize>)>, g: &Graph, name: &str, id: NodeId| {
        trace.push((String::from(name), g.value(id).dims()[1..].to_vec()));
    };
    push_trace(&mut trace, g, "input", input);
    let mut b = Builder { g, store };
    let h = b.conv_bn(input, "conv0.w", "bn0", 1)?;
    let mut h = b.g.relu(h);
    push_trace(&mut trace, b.g, "conv1", h);
    for stage in 0..4 {
        for block in 0..cfg.stage_blocks[stage] {
            let stride = if stage > 0 && block == 0 { 2 } else { 1 };
            h = b.residual_block(h, &block_prefix(stage + 1, block), cfg.variant, stride)?;
        }
        push_trace(&mut trace, b.g, &format!("block{}", stage + 1), h);
    }
    let pooled = b.g.stats_pool(h)?;
    push_trace(&mut trace, b.g, "stats_pool", pooled);
    let n = b.g.value(pooled).dim(0);
    let flat = b.g.reshape(pooled, &[n, cfg.pooled_dim()])?;
    push_trace(&mut trace, b.g, "flatten", flat);
    let wa = b.param("dense1.a.w")?;
    let ba = b.param("dense1.a.b")?;
    let da = b.g.dense(flat, wa, ba)?;
    let wb = b.param("dense1.b.w")?;
    let bb = b.param("dense1.b.b")?;
    let db = b.g.dense(flat, wb, bb)?;
    let emb = b.g.maxout(da, db);
    push_trace(&mut trace, b.g, "embedding", emb);
    Ok((emb, trace))
}

/// Seeded U-net parameter initialization.
pub fn init_unet(cfg: &UnetConfig, seed: u64) -> WeightStore {
    let mut store = WeightStore::new();
    let mut init = Init { store: &mut store, rng: rng::from_seed(seed) };
    let chans: Vec<usize> = (0..4).map(|i| cfg.base_channels << i).collect();
    let mut cin = 1;
    for (i, &ch) in chans.iter().enumerate() {
        init.conv(&format!("e{}.c1.w", i + 1), 3, cin, ch);
        init.bn(&format!("e{}.bn1", i + 1), ch);
        init.conv(&format!("e{}.c2.w", i + 1), 3, ch, ch);
        init.bn(&format!("e{}.bn2", i + 1), ch);
        cin = ch;
    }
    let mut up_ch = chans[3];
    for i in (0..4).rev() {
        let skip = chans[i];
        init.conv(&format!("d{}.c1.w", i + 1), 3, up_ch + skip, skip);
        init.bn(&format!("d{}.bn1", i + 1), skip);
        init.conv(&format!("d{}.c2.w", i + 1), 3, skip, skip);
        init.bn(&format!("d{}.bn2", i + 1), skip);
        up_ch = skip;
    }
    init.conv("out.w", 1, chans[0], 1);
    store.set("meta.unet", cfg.to_meta());
    store
}

/// U-net forward from `input [n, window, dim, 1]` to per-frame speech
/// probabilities `[n, window]`: four conv/pool encoder stages, mirrored
/// nearest-neighbour decoder with skip concatenation, 1x1 projection,
/// average over the frequency axis and a sigmoid.
pub fn unet_forward(
    g: &mut Graph,
    input: NodeId,
    store: &WeightStore,
    cfg: &UnetConfig,
) -> Result<NodeId> {
    let (_, h, w, _) = g.value(input).dims4();
    if h != cfg.window || w != cfg.input_dim {
        return Err(Error::ShapeMismatch(format!(
            "detector expects {}x{} windows, got {h}x{w}",
            cfg.window, cfg.input_dim
        )));
    }
    let mut b = Builder { g, store };
    let mut skips: Vec<NodeId> = Vec::new();
    let mut h = input;
    for i in 1..=4 {
        let c = b.conv_bn(h, &format!("e{i}.c1.w"), &format!("e{i}.bn1"), 1)?;
        let c = b.g.relu(c);
        let c = b.conv_bn(c, &format!("e{i}.c2.w"), &format!("e{i}.bn2"), 1)?;
        let c = b.g.relu(c);
        skips.push(c);
        h = b.g.maxpool2(c);
    }
    for i in (1..=4).rev() {
        let skip = skips[i - 1];
        let up = b.g.upsample2(h);
        let (_, sh, sw, _) = b.g.value(skip).dims4();
        let up = b.g.pad_replicate(up, sh, sw);
        let cat = b.g.concat(up, skip)?;
        let c = b.conv_bn(cat, &format!("d{i}.c1.w"), &format!("d{i}.bn1"), 1)?;
        let c = b.g.relu(c);
        let c = b.conv_bn(c, &format!("d{i}.c2.w"), &format!("d{i}.bn2"), 1)?;
        h = b.g.relu(c);
    }
    let wp = b.param("out.w")?;
    let logits_map = b.g.conv2d(h, wp, 1, Pad::Same)?;
    let logits = b.g.mean_w(logits_map)?;
    Ok(b.g.sigmoid(logits))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resnet34_pooled_dim_matches_table_arithmetic() {
        let cfg = ResNetConfig::resnet34();
        assert_eq!(cfg.pooled_dim(), 5120);
    }

    #[test]
    fn meta_round_trip() {
        let cfg = ResNetConfig::resnet50_se();
        let back = ResNetConfig::from_meta(&cfg.to_meta()).unwrap();
        assert_eq!(cfg, back);
        let u = UnetConfig::toy();
        assert_eq!(UnetConfig::from_meta(&u.to_meta()).unwrap(), u);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = init_resnet(&ResNetConfig::toy(), Some(4), 9);
        let b = init_resnet(&ResNetConfig::toy(), Some(4), 9);
        assert_eq!(a, b);
        let c = init_resnet(&ResNetConfig::toy(), Some(4), 10);
        assert_ne!(a, c);
    }

    #[test]
    fn unet_output_has_window_length() {
        let cfg = UnetConfig::toy();
        let store = init_unet(&cfg, 4);
        let mut g = Graph::new(false);
        let x = g.leaf(Tensor::zeros(&[2, 128, 23, 1]));
        let y = unet_forward(&mut g, x, &store, &cfg).unwrap();
        assert_eq!(g.value(y).dims(), &[2, 128]);
        // all-zero input with zeroed BN betas gives probabilities of 1/2
        for &p in g.value(y).data() {
            assert!(p > 0.0 && p < 1.0);
        }
    }
}
