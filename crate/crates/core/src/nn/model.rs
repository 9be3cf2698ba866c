//! Network topology and weights for the two-head U-Net family.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv3x3,
    Conv1x1,
    TransposedConv2x2,
    Batchnorm,
    Relu,
    Maxpool2x2,
    ConcatSkip,
    SoftmaxChannel,
}

impl LayerKind {
    pub fn is_linear(self) -> bool {
        matches!(
            self,
            LayerKind::Conv3x3 | LayerKind::Conv1x1 | LayerKind::TransposedConv2x2
        )
    }

    pub fn has_weights(self) -> bool {
        self.is_linear() || self == LayerKind::Batchnorm
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skip_source: Option<String>,
}

impl LayerSpec {
    fn new(kind: LayerKind, name: impl Into<String>, cin: usize, cout: usize) -> Self {
        Self {
            kind,
            name: name.into(),
            in_channels: cin,
            out_channels: cout,
            skip_source: None,
        }
    }

    /// Names and dims of the weight arrays this layer owns.
    pub fn weight_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (i, o) = (self.in_channels, self.out_channels);
        let k = match self.kind {
            LayerKind::Conv3x3 => 3,
            LayerKind::Conv1x1 => 1,
            LayerKind::TransposedConv2x2 => 2,
            LayerKind::Batchnorm => {
                return ["gamma", "beta", "mean", "var"]
                    .iter()
                    .map(|s| (format!("{}.{s}", self.name), vec![o]))
                    .collect()
            }
            _ => return Vec::new(),
        };
        vec![
            (format!("{}.w", self.name), vec![o, i, k, k]),
            (format!("{}.b", self.name), vec![o]),
        ]
    }
}

/// Which part of the network a layer belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Section {
    Trunk,
    SegHead,
    CcHead,
}

/// Output head selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Seg,
    Cc,
}

impl Head {
    pub fn section(self) -> Section {
        match self {
            Head::Seg => Section::SegHead,
            Head::Cc => Section::CcHead,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel<T = f32> {
    pub depth: usize,
    pub base_width: usize,
    pub in_channels: usize,
    pub trunk: Vec<LayerSpec>,
    pub seg_head: Vec<LayerSpec>,
    pub cc_head: Vec<LayerSpec>,
    pub weights: BTreeMap<String, Tensor<T>>,
}

fn conv_bn_relu(out: &mut Vec<LayerSpec>, prefix: &str, idx: usize, cin: usize, cout: usize) {
    out.push(LayerSpec::new(
        LayerKind::Conv3x3,
        format!("{prefix}.conv{idx}"),
        cin,
        cout,
    ));
    out.push(LayerSpec::new(
        LayerKind::Batchnorm,
        format!("{prefix}.bn{idx}"),
        cout,
        cout,
    ));
    out.push(LayerSpec::new(
        LayerKind::Relu,
        format!("{prefix}.relu{idx}"),
        cout,
        cout,
    ));
}

fn block(out: &mut Vec<LayerSpec>, prefix: &str, cin: usize, cout: usize) {
    conv_bn_relu(out, prefix, 1, cin, cout);
    conv_bn_relu(out, prefix, 2, cout, cout);
}

/// Topology of the U-Net with `depth` pooling levels and base width `width`.
pub fn unet_topology(
    depth: usize,
    width: usize,
    in_channels: usize,
) -> (Vec<LayerSpec>, Vec<LayerSpec>, Vec<LayerSpec>) {
    let mut trunk = Vec::new();
    let mut cin = in_channels;
    for level in 1..=depth {
        let c = width << (level - 1);
        block(&mut trunk, &format!("enc{level}"), cin, c);
        trunk.push(LayerSpec::new(
            LayerKind::Maxpool2x2,
            format!("pool{level}"),
            c,
            c,
        ));
        cin = c;
    }
    let bottom = width << depth;
    block(&mut trunk, "bottleneck", cin, bottom);
    let mut cur = bottom;
    for level in (1..=depth).rev() {
        let c = width << (level - 1);
        trunk.push(LayerSpec::new(
            LayerKind::TransposedConv2x2,
            format!("up{level}"),
            cur,
            c,
        ));
        let mut cat = LayerSpec::new(LayerKind::ConcatSkip, format!("cat{level}"), c, 2 * c);
        cat.skip_source = Some(format!("enc{level}.relu2"));
        trunk.push(cat);
        block(&mut trunk, &format!("dec{level}"), 2 * c, c);
        cur = c;
    }

    let seg_head = vec![
        LayerSpec::new(LayerKind::Conv1x1, "seg.out", width, 2),
        LayerSpec::new(LayerKind::SoftmaxChannel, "seg.softmax", 2, 2),
    ];
    let mut cc_head = Vec::new();
    conv_bn_relu(&mut cc_head, "cc", 1, width, width);
    conv_bn_relu(&mut cc_head, "cc", 2, width, width);
    cc_head.push(LayerSpec::new(LayerKind::Conv1x1, "cc.out", width, 2));
    cc_head.push(LayerSpec::new(LayerKind::SoftmaxChannel, "cc.softmax", 2, 2));
    (trunk, seg_head, cc_head)
}

/// How to fill the weights of a freshly built model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightInit {
    /// All linear weights and biases zero, batch norm identity.
    Zero,
    /// He-normal linear weights, zero biases, identity batch norm.
    He { seed: u64 },
    /// Random weights and biases plus non-trivial batch norm statistics.
    /// `zero_bias` forces every additive term (conv bias, BN shift) to zero.
    Random { seed: u64, zero_bias: bool },
}

impl<T: Real> NetworkModel<T> {
    pub fn unet(depth: usize, width: usize, init: WeightInit) -> Self {
        let (trunk, seg_head, cc_head) = unet_topology(depth, width, 3);
        let mut model = Self {
            depth,
            base_width: width,
            in_channels: 3,
            trunk,
            seg_head,
            cc_head,
            weights: BTreeMap::new(),
        };
        model.init_weights(init);
        model
    }

    pub fn init_weights(&mut self, init: WeightInit) {
        let seed = match init {
            WeightInit::Zero => 0,
            WeightInit::He { seed } | WeightInit::Random { seed, .. } => seed,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = BTreeMap::new();
        let layers: Vec<LayerSpec> = self.layers().map(|(_, l)| l.clone()).collect();
        for layer in &layers {
            for (name, dims) in layer.weight_shapes() {
                let n: usize = dims.iter().product();
                let suffix = name.rsplit('.').next().unwrap_or("");
                let values: Vec<f64> = match (init, suffix) {
                    (_, "gamma") | (_, "var") if !matches!(init, WeightInit::Random { .. }) => {
                        let v = if suffix == "var" { 1.0 - BN_EPS } else { 1.0 };
                        vec![v; n]
                    }
                    (_, "beta") | (_, "mean") | (_, "b")
                        if !matches!(init, WeightInit::Random { zero_bias: false, .. }) =>
                    {
                        vec![0.0; n]
                    }
                    (WeightInit::Zero, _) => vec![0.0; n],
                    (WeightInit::He { .. }, "w") | (WeightInit::Random { .. }, "w") => {
                        let fan_in = match layer.kind {
                            LayerKind::TransposedConv2x2 => dims[1],
                            _ => dims[1] * dims[2] * dims[3],
                        };
                        let std = (2.0 / fan_in as f64).sqrt();
                        let dist = Normal::new(0.0, std).unwrap();
                        (0..n).map(|_| dist.sample(&mut rng)).collect()
                    }
                    (_, "gamma") | (_, "var") => {
                        let dist = Uniform::new(0.5, 1.5).unwrap();
                        (0..n).map(|_| dist.sample(&mut rng)).collect()
                    }
                    _ => {
                        let dist = Uniform::new(-0.1, 0.1).unwrap();
                        (0..n).map(|_| dist.sample(&mut rng)).collect()
                    }
                };
                let data = values.into_iter().map(T::from_f64_lossy).collect();
                weights.insert(name, Tensor::new(dims, data).expect("weight dims"));
            }
        }
        self.weights = weights;
    }

    /// All layers in execution order with their section.
    pub fn layers(&self) -> impl Iterator<Item = (Section, &LayerSpec)> {
        self.trunk
            .iter()
            .map(|l| (Section::Trunk, l))
            .chain(self.seg_head.iter().map(|l| (Section::SegHead, l)))
            .chain(self.cc_head.iter().map(|l| (Section::CcHead, l)))
    }

    pub fn layer(&self, name: &str) -> Option<(Section, &LayerSpec)> {
        self.layers().find(|(_, l)| l.name == name)
    }

    /// Resolves a block alias (`enc1`, `bottleneck`, `dec2`) or a plain layer name
    /// to the layer whose output represents it.
    pub fn resolve_layer(&self, name: &str) -> Result<String> {
        if self.layer(name).is_some() {
            return Ok(name.to_string());
        }
        let alias = format!("{name}.relu2");
        if self.layer(&alias).is_some() {
            return Ok(alias);
        }
        Err(Error::UnknownLayer(name.to_string()))
    }

    pub fn weight(&self, name: &str) -> Result<&Tensor<T>> {
        self.weights
            .get(name)
            .ok_or_else(|| Error::MissingWeight(name.to_string()))
    }

    /// Multiple that input height and width must be divisible by.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }

    pub fn cast<U: Real>(&self) -> NetworkModel<U> {
        NetworkModel {
            depth: self.depth,
            base_width: self.base_width,
            in_channels: self.in_channels,
            trunk: self.trunk.clone(),
            seg_head: self.seg_head.clone(),
            cc_head: self.cc_head.clone(),
            weights: self
                .weights
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Checks channel chaining, skip sources, head structure and weight presence.
    pub fn validate(&self) -> Result<()> {
        let mut channels: BTreeMap<String, usize> = BTreeMap::new();
        let mut check_chain = |layers: &[LayerSpec], mut cur: usize| -> Result<usize> {
            for l in layers {
                if l.kind == LayerKind::ConcatSkip {
                    let src = l.skip_source.as_deref().ok_or_else(|| {
                        Error::Topology(format!("concat `{}` has no skip source", l.name))
                    })?;
                    let sc = *channels.get(src).ok_or_else(|| {
                        Error::Topology(format!(
                            "concat `{}` references unknown or later layer `{src}`",
                            l.name
                        ))
                    })?;
                    if l.in_channels != cur || l.out_channels != cur + sc {
                        return Err(Error::Topology(format!(
                            "concat `{}` channels {}→{} do not match {cur}+{sc}",
                            l.name, l.in_channels, l.out_channels
                        )));
                    }
                } else if l.in_channels != cur {
                    return Err(Error::Topology(format!(
                        "layer `{}` expects {} input channels, receives {cur}",
                        l.name, l.in_channels
                    )));
                }
                if !l.kind.has_weights() && l.kind != LayerKind::ConcatSkip && l.in_channels != l.out_channels {
                    return Err(Error::Topology(format!(
                        "layer `{}` cannot change channel count",
                        l.name
                    )));
                }
                cur = l.out_channels;
                channels.insert(l.name.clone(), cur);
            }
            Ok(cur)
        };
        let trunk_out = check_chain(&self.trunk, self.in_channels)?;
        for head in [&self.seg_head, &self.cc_head] {
            let out = check_chain(head, trunk_out)?;
            if out != 2 || head.last().map(|l| l.kind) != Some(LayerKind::SoftmaxChannel) {
                return Err(Error::Topology("heads must end in a 2-channel softmax".into()));
            }
        }
        let cc_blocks = self
            .cc_head
            .windows(3)
            .filter(|w| {
                w[0].kind == LayerKind::Conv3x3
                    && w[1].kind == LayerKind::Batchnorm
                    && w[2].kind == LayerKind::Relu
            })
            .count();
        let n = self.cc_head.len();
        if cc_blocks != 2 || n < 2 || self.cc_head[n - 2].kind != LayerKind::Conv1x1 {
            return Err(Error::Topology(
                "cc head must be two conv-bn-relu blocks followed by a 1x1 conv".into(),
            ));
        }
        for (_, l) in self.layers() {
            if l.kind == LayerKind::Batchnorm {
                // Batch norm must directly follow a linear layer for canonization.
                let prev = self.previous_layer(&l.name);
                if !prev.is_some_and(|p| p.kind.is_linear()) {
                    return Err(Error::Topology(format!(
                        "batch norm `{}` must follow a convolution",
                        l.name
                    )));
                }
            }
            for (name, dims) in l.weight_shapes() {
                let w = self.weight(&name)?;
                if w.dims() != dims.as_slice() {
                    return Err(Error::WeightDims {
                        name,
                        expected: dims,
                        found: w.dims().to_vec(),
                    });
                }
            }
        }
        Ok(())
    }

    fn previous_layer(&self, name: &str) -> Option<&LayerSpec> {
        for list in [&self.trunk, &self.seg_head, &self.cc_head] {
            if let Some(i) = list.iter().position(|l| l.name == name) {
                return if i > 0 { list.get(i - 1) } else { self.trunk.last() };
            }
        }
        None
    }
}
