//! Network specs, GCT/SE placement, and the sequential graph they resolve to.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{
    backward_seq, effective_reduction, forward_seq, BatchNorm, Conv2d, GctLayer, GlobalAvgPool, Layer, Linear,
    MaxPool, Mode, ParamView, Relu, Residual, SeBlock,
};
use crate::error::{Error, Result};
use crate::gct::GctVariant;
use crate::scalar::Scalar;
use crate::tensor::{ConvGeometry, Shape4, Tensor4};

pub const DEFAULT_SE_REDUCTION: usize = 16;

/// Where GCT layers are inserted when a spec is resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    #[default]
    None,
    BeforeConv,
    BeforeBn,
    AfterBn,
    /// Before the last two convolutions of every residual body.
    LastTwoConvs,
}

impl Placement {
    pub fn name(self) -> &'static str {
        match self {
            Placement::None => "none",
            Placement::BeforeConv => "before_conv",
            Placement::BeforeBn => "before_bn",
            Placement::AfterBn => "after_bn",
            Placement::LastTwoConvs => "last_two_convs",
        }
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Placement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => Placement::None,
            "before_conv" => Placement::BeforeConv,
            "before_bn" => Placement::BeforeBn,
            "after_bn" => Placement::AfterBn,
            "last_two_convs" => Placement::LastTwoConvs,
            other => return Err(Error::InvalidSpec(format!("unknown placement `{other}`"))),
        })
    }
}

fn one() -> usize {
    1
}

/// One entry of a network spec document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    BatchNorm,
    Relu,
    MaxPool {
        kernel: usize,
        #[serde(default)]
        stride: Option<usize>,
        #[serde(default)]
        padding: usize,
    },
    GlobalAvgPool,
    Linear {
        out_features: usize,
    },
    Gct,
    Se {
        #[serde(default)]
        reduction: Option<usize>,
    },
    Residual {
        body: Vec<LayerSpec>,
        #[serde(default)]
        shortcut: Vec<LayerSpec>,
    },
}

/// JSON network description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    pub input_channels: usize,
    /// Spatial (H, W) the network is built for.
    pub input_size: [usize; 2],
    pub layers: Vec<LayerSpec>,
    #[serde(default)]
    pub placement: Placement,
    #[serde(default)]
    pub gct: GctVariant,
    /// When set, one SE block is added per residual body after its last BN.
    #[serde(default)]
    pub se_reduction: Option<usize>,
}

fn conv(out: usize, k: usize, stride: usize, padding: usize) -> LayerSpec {
    LayerSpec::Conv {
        out_channels: out,
        kernel: k,
        stride,
        padding,
    }
}

fn conv_bn_relu(out: usize, stride: usize) -> [LayerSpec; 3] {
    [conv(out, 3, stride, 1), LayerSpec::BatchNorm, LayerSpec::Relu]
}

impl NetworkSpec {
    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::InvalidSpec(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    pub fn with_placement(mut self, placement: Placement) -> Self {
        self.placement = placement;
        self
    }

    pub fn with_gct(mut self, variant: GctVariant) -> Self {
        self.gct = variant;
        self
    }

    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "smallcnn" => Some(Self::smallcnn()),
            "miniresnet" => Some(Self::miniresnet()),
            "resnet50" => Some(Self::resnet50()),
            _ => None,
        }
    }

    /// conv16-conv32-pool-conv64-pool-GAP-linear10 on 3x32x32 input.
    pub fn smallcnn() -> Self {
        let mut layers = Vec::new();
        layers.extend(conv_bn_relu(16, 1));
        layers.extend(conv_bn_relu(32, 1));
        layers.push(LayerSpec::MaxPool {
            kernel: 2,
            stride: None,
            padding: 0,
        });
        layers.extend(conv_bn_relu(64, 1));
        layers.push(LayerSpec::MaxPool {
            kernel: 2,
            stride: None,
            padding: 0,
        });
        layers.push(LayerSpec::GlobalAvgPool);
        layers.push(LayerSpec::Linear { out_features: 10 });
        Self {
            name: "smallcnn".into(),
            input_channels: 3,
            input_size: [32, 32],
            layers,
            placement: Placement::None,
            gct: GctVariant::default(),
            se_reduction: None,
        }
    }

    /// Stem plus three basic-block stages of width 16/32/64.
    pub fn miniresnet() -> Self {
        let mut layers: Vec<LayerSpec> = conv_bn_relu(16, 1).into();
        for (width, stride) in [(16, 1), (32, 2), (64, 2)] {
            let mut body: Vec<LayerSpec> = conv_bn_relu(width, stride).into();
            body.push(conv(width, 3, 1, 1));
            body.push(LayerSpec::BatchNorm);
            let shortcut = if stride == 1 {
                vec![]
            } else {
                vec![conv(width, 1, stride, 0), LayerSpec::BatchNorm]
            };
            layers.push(LayerSpec::Residual { body, shortcut });
            layers.push(LayerSpec::Relu);
        }
        layers.push(LayerSpec::GlobalAvgPool);
        layers.push(LayerSpec::Linear { out_features: 10 });
        Self {
            name: "miniresnet".into(),
            input_channels: 3,
            input_size: [32, 32],
            layers,
            placement: Placement::None,
            gct: GctVariant::default(),
            se_reduction: None,
        }
    }

    /// ResNet-50 (stride on the first 1x1 of each downsampling bottleneck) at 224x224.
    pub fn resnet50() -> Self {
        let mut layers = vec![
            conv(64, 7, 2, 3),
            LayerSpec::BatchNorm,
            LayerSpec::Relu,
            LayerSpec::MaxPool {
                kernel: 3,
                stride: Some(2),
                padding: 1,
            },
        ];
        for (width, blocks, stride) in [(64, 3, 1), (128, 4, 2), (256, 6, 2), (512, 3, 2)] {
            for b in 0..blocks {
                let s = if b == 0 { stride } else { 1 };
                let body = vec![
                    conv(width, 1, s, 0),
                    LayerSpec::BatchNorm,
                    LayerSpec::Relu,
                    conv(width, 3, 1, 1),
                    LayerSpec::BatchNorm,
                    LayerSpec::Relu,
                    conv(width * 4, 1, 1, 0),
                    LayerSpec::BatchNorm,
                ];
                let shortcut = if b == 0 {
                    vec![conv(width * 4, 1, s, 0), LayerSpec::BatchNorm]
                } else {
                    vec![]
                };
                layers.push(LayerSpec::Residual { body, shortcut });
                layers.push(LayerSpec::Relu);
            }
        }
        layers.push(LayerSpec::GlobalAvgPool);
        layers.push(LayerSpec::Linear { out_features: 1000 });
        Self {
            name: "resnet50".into(),
            input_channels: 3,
            input_size: [224, 224],
            layers,
            placement: Placement::None,
            gct: GctVariant::default(),
            se_reduction: None,
        }
    }
}

/// A spec entry after name assignment, placement and shape inference.
#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Conv {
        name: String,
        in_channels: usize,
        out_channels: usize,
        geometry: ConvGeometry,
    },
    BatchNorm {
        name: String,
        channels: usize,
    },
    Relu {
        name: String,
    },
    MaxPool {
        name: String,
        geometry: ConvGeometry,
    },
    GlobalAvgPool {
        name: String,
    },
    Linear {
        name: String,
        in_features: usize,
        out_features: usize,
    },
    Gct {
        name: String,
        channels: usize,
        variant: GctVariant,
    },
    Se {
        name: String,
        channels: usize,
        reduction: usize,
    },
    Residual {
        name: String,
        body: Vec<Node>,
        shortcut: Vec<Node>,
    },
}

impl Node {
    pub fn name(&self) -> &str {
        match self {
            Node::Conv { name, .. }
            | Node::BatchNorm { name, .. }
            | Node::Relu { name }
            | Node::MaxPool { name, .. }
            | Node::GlobalAvgPool { name }
            | Node::Linear { name, .. }
            | Node::Gct { name, .. }
            | Node::Se { name, .. }
            | Node::Residual { name, .. } => name,
        }
    }

    /// Output shape for `input`, validating channel counts.
    pub fn output_shape(&self, input: Shape4) -> Result<Shape4> {
        let need_c = |c: usize| {
            if input.c == c {
                Ok(())
            } else {
                Err(Error::InvalidSpec(format!(
                    "{}: expected {c} input channels, got {}",
                    self.name(),
                    input.c
                )))
            }
        };
        match self {
            Node::Conv {
                in_channels,
                out_channels,
                geometry,
                ..
            } => {
                need_c(*in_channels)?;
                let (h, w) = geometry
                    .output_hw(input.h, input.w)
                    .map_err(|e| Error::InvalidSpec(format!("{}: {e}", self.name())))?;
                Ok(Shape4::new(input.n, *out_channels, h, w))
            }
            Node::MaxPool { geometry, .. } => {
                let (h, w) = geometry
                    .output_hw(input.h, input.w)
                    .map_err(|e| Error::InvalidSpec(format!("{}: {e}", self.name())))?;
                Ok(Shape4::new(input.n, input.c, h, w))
            }
            Node::BatchNorm { channels, .. } | Node::Gct { channels, .. } | Node::Se { channels, .. } => {
                need_c(*channels)?;
                Ok(input)
            }
            Node::Relu { .. } => Ok(input),
            Node::GlobalAvgPool { .. } => Ok(Shape4::new(input.n, input.c, 1, 1)),
            Node::Linear {
                in_features,
                out_features,
                ..
            } => {
                if input.sample() != *in_features {
                    return Err(Error::InvalidSpec(format!(
                        "{}: expected {in_features} input features, got {}",
                        self.name(),
                        input.sample()
                    )));
                }
                Ok(Shape4::new(input.n, *out_features, 1, 1))
            }
            Node::Residual { body, shortcut, .. } => {
                let a = seq_output_shape(body, input)?;
                let b = seq_output_shape(shortcut, input)?;
                if a != b {
                    return Err(Error::InvalidSpec(format!(
                        "{}: body output {a} differs from shortcut output {b}",
                        self.name()
                    )));
                }
                Ok(a)
            }
        }
    }

    /// Depth-first walk over this node and its children.
    pub fn walk<'a>(&'a self, f: &mut dyn FnMut(&'a Node)) {
        f(self);
        if let Node::Residual { body, shortcut, .. } = self {
            for child in body.iter().chain(shortcut) {
                child.walk(f);
            }
        }
    }

    fn instantiate<T: Scalar>(&self, seed: u64) -> Result<Layer<T>> {
        Ok(match self {
            Node::Conv {
                name,
                in_channels,
                out_channels,
                geometry,
            } => Layer::Conv(Conv2d::new(name, *in_channels, *out_channels, *geometry, seed)),
            Node::BatchNorm { name, channels } => Layer::BatchNorm(BatchNorm::new(name, *channels)),
            Node::Relu { name } => Layer::Relu(Relu::new(name)),
            Node::MaxPool { name, geometry } => Layer::MaxPool(MaxPool::new(name, *geometry)),
            Node::GlobalAvgPool { name } => Layer::GlobalAvgPool(GlobalAvgPool::new(name)),
            Node::Linear {
                name,
                in_features,
                out_features,
            } => Layer::Linear(Linear::new(name, *in_features, *out_features, seed)),
            Node::Gct { name, channels, variant } => Layer::Gct(GctLayer::new(name, *channels, *variant)),
            Node::Se {
                name,
                channels,
                reduction,
            } => Layer::Se(SeBlock::new(name, *channels, *reduction, seed)?),
            Node::Residual { name, body, shortcut } => Layer::Residual(Residual {
                name: name.clone(),
                body: body.iter().map(|n| n.instantiate(seed)).collect::<Result<_>>()?,
                shortcut: shortcut.iter().map(|n| n.instantiate(seed)).collect::<Result<_>>()?,
            }),
        })
    }
}

pub fn seq_output_shape(nodes: &[Node], input: Shape4) -> Result<Shape4> {
    nodes.iter().try_fold(input, |s, n| n.output_shape(s))
}

struct Resolver<'a> {
    spec: &'a NetworkSpec,
    counters: HashMap<&'static str, usize>,
}

impl Resolver<'_> {
    fn next(&mut self, kind: &'static str) -> String {
        let c = self.counters.entry(kind).or_insert(0);
        *c += 1;
        format!("{kind}{c}")
    }

    fn gct(&self, name: String, channels: usize) -> Node {
        Node::Gct {
            name,
            channels,
            variant: self.spec.gct,
        }
    }

    fn resolve_seq(&mut self, layers: &[LayerSpec], shape: &mut Shape4, in_body: bool) -> Result<Vec<Node>> {
        let placement = self.spec.placement;
        let total_convs = layers.iter().filter(|l| matches!(l, LayerSpec::Conv { .. })).count();
        let mut conv_idx = 0;
        let mut out = Vec::new();
        for layer in layers {
            match layer {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    if *out_channels == 0 || *kernel == 0 || *stride == 0 {
                        return Err(Error::InvalidSpec(
                            "conv needs out_channels, kernel and stride >= 1".into(),
                        ));
                    }
                    let name = self.next("conv");
                    let late = in_body && conv_idx + 2 >= total_convs;
                    conv_idx += 1;
                    if placement == Placement::BeforeConv || (placement == Placement::LastTwoConvs && late) {
                        out.push(self.gct(format!("{name}.gct"), shape.c));
                    }
                    out.push(Node::Conv {
                        name,
                        in_channels: shape.c,
                        out_channels: *out_channels,
                        geometry: ConvGeometry::square(*kernel, *stride, *padding),
                    });
                }
                LayerSpec::BatchNorm => {
                    let name = self.next("bn");
                    if placement == Placement::BeforeBn {
                        out.push(self.gct(format!("{name}.gct"), shape.c));
                    }
                    out.push(Node::BatchNorm {
                        name: name.clone(),
                        channels: shape.c,
                    });
                    if placement == Placement::AfterBn {
                        out.push(self.gct(format!("{name}.gct"), shape.c));
                    }
                }
                LayerSpec::Relu => out.push(Node::Relu { name: self.next("relu") }),
                LayerSpec::MaxPool {
                    kernel,
                    stride,
                    padding,
                } => {
                    let stride = stride.unwrap_or(*kernel);
                    if *kernel == 0 || stride == 0 || padding * 2 > *kernel {
                        return Err(Error::InvalidSpec("invalid max_pool window".into()));
                    }
                    out.push(Node::MaxPool {
                        name: self.next("pool"),
                        geometry: ConvGeometry::square(*kernel, stride, *padding),
                    });
                }
                LayerSpec::GlobalAvgPool => out.push(Node::GlobalAvgPool { name: self.next("gap") }),
                LayerSpec::Linear { out_features } => {
                    if *out_features == 0 {
                        return Err(Error::InvalidSpec("linear needs out_features >= 1".into()));
                    }
                    out.push(Node::Linear {
                        name: self.next("fc"),
                        in_features: shape.sample(),
                        out_features: *out_features,
                    });
                }
                LayerSpec::Gct => {
                    let name = self.next("gct");
                    out.push(self.gct(name, shape.c));
                }
                LayerSpec::Se { reduction } => {
                    let r = reduction.or(self.spec.se_reduction).unwrap_or(DEFAULT_SE_REDUCTION);
                    out.push(Node::Se {
                        name: self.next("se"),
                        channels: shape.c,
                        reduction: effective_reduction(shape.c, r),
                    });
                }
                LayerSpec::Residual { body, shortcut } => {
                    let name = self.next("res");
                    let mut body_shape = *shape;
                    let mut body_nodes = self.resolve_seq(body, &mut body_shape, true)?;
                    let mut sc_shape = *shape;
                    let sc_nodes = self.resolve_seq(shortcut, &mut sc_shape, false)?;
                    if body_shape != sc_shape {
                        return Err(Error::InvalidSpec(format!(
                            "{name}: body output {body_shape} differs from shortcut output {sc_shape}"
                        )));
                    }
                    if let Some(r) = self.spec.se_reduction {
                        let pos = body_nodes
                            .iter()
                            .rposition(|n| matches!(n, Node::BatchNorm { .. }))
                            .map_or(body_nodes.len(), |p| p + 1);
                        body_nodes.insert(
                            pos,
                            Node::Se {
                                name: format!("{name}.se"),
                                channels: body_shape.c,
                                reduction: effective_reduction(body_shape.c, r),
                            },
                        );
                    }
                    *shape = body_shape;
                    out.push(Node::Residual {
                        name,
                        body: body_nodes,
                        shortcut: sc_nodes,
                    });
                    continue;
                }
            }
            let last = out.last().expect("a node was just pushed");
            *shape = last.output_shape(*shape)?;
        }
        Ok(out)
    }
}

/// Resolves a spec into named nodes with GCT/SE layers inserted.
pub fn resolve(spec: &NetworkSpec) -> Result<Vec<Node>> {
    spec.gct
        .validate()
        .map_err(|e| Error::InvalidSpec(e.to_string()))?;
    if spec.gct.epsilon <= 0.0 && spec.placement != Placement::None {
        return Err(Error::InvalidSpec("GCT epsilon must be positive in a network".into()));
    }
    if spec.input_channels == 0 || spec.input_size.contains(&0) {
        return Err(Error::InvalidSpec("input shape must be non-zero".into()));
    }
    if spec.layers.is_empty() {
        return Err(Error::InvalidSpec("network has no layers".into()));
    }
    let mut shape = Shape4::new(1, spec.input_channels, spec.input_size[0], spec.input_size[1]);
    let mut resolver = Resolver {
        spec,
        counters: HashMap::new(),
    };
    resolver.resolve_seq(&spec.layers, &mut shape, false)
}

/// A built network: resolved nodes plus their instantiated layers.
#[derive(Debug, Clone)]
pub struct Network<T> {
    pub spec: NetworkSpec,
    pub seed: u64,
    nodes: Vec<Node>,
    layers: Vec<Layer<T>>,
}

/// Resolves `spec` and initializes every layer from `seed`.
///
/// Layer weights are seeded per layer name, so inserting GCT nodes (which
/// draw no random numbers) leaves every other layer's initialization as is.
pub fn build_network<T: Scalar>(spec: &NetworkSpec, seed: u64) -> Result<Network<T>> {
    let nodes = resolve(spec)?;
    let layers = nodes.iter().map(|n| n.instantiate(seed)).collect::<Result<_>>()?;
    Ok(Network {
        spec: spec.clone(),
        seed,
        nodes,
        layers,
    })
}

impl<T: Scalar> Network<T> {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn input_shape(&self, batch: usize) -> Shape4 {
        Shape4::new(
            batch,
            self.spec.input_channels,
            self.spec.input_size[0],
            self.spec.input_size[1],
        )
    }

    pub fn forward(&mut self, x: &Tensor4<T>, mode: Mode) -> Result<Tensor4<T>> {
        forward_seq(&mut self.layers, x, mode)
    }

    pub fn backward(&mut self, grad: &Tensor4<T>) -> Result<Tensor4<T>> {
        backward_seq(&mut self.layers, grad)
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(ParamView<'_, T>)) {
        for l in &mut self.layers {
            l.visit_params(f);
        }
    }

    pub fn visit_buffers(&mut self, f: &mut dyn FnMut(String, &mut Vec<T>)) {
        for l in &mut self.layers {
            l.visit_buffers(f);
        }
    }

    pub fn walk<'a>(&'a self, f: &mut dyn FnMut(&'a Layer<T>)) {
        for l in &self.layers {
            l.walk(f);
        }
    }

    pub fn walk_mut(&mut self, f: &mut dyn FnMut(&mut Layer<T>)) {
        for l in &mut self.layers {
            l.walk_mut(f);
        }
    }

    /// GCT layers in depth-first order.
    pub fn gct_layers(&self) -> Vec<&GctLayer<T>> {
        let mut out = Vec::new();
        self.walk(&mut |l| {
            if let Layer::Gct(g) = l {
                out.push(g);
            }
        });
        out
    }

    pub fn gct_layer_mut(&mut self, name: &str) -> Option<&mut GctLayer<T>> {
        let mut found = None;
        for l in &mut self.layers {
            find_gct(l, name, &mut found);
            if found.is_some() {
                break;
            }
        }
        found
    }

    pub fn param_count(&mut self) -> usize {
        let mut total = 0;
        self.visit_params(&mut |p| total += p.value.len());
        total
    }

    /// Flat copy of every parameter and buffer, keyed by name.
    pub fn state(&mut self) -> Vec<(String, Vec<T>)> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| out.push((p.name, p.value.to_vec())));
        self.visit_buffers(&mut |name, v| out.push((name, v.clone())));
        out
    }

    /// Same graph and values in another precision.
    pub fn cast<U: Scalar>(&mut self) -> Result<Network<U>> {
        let mut other: Network<U> = build_network(&self.spec, self.seed)?;
        let state: HashMap<String, Vec<T>> = self.state().into_iter().collect();
        let conv = |v: &[T]| -> Vec<U> { v.iter().map(|&x| U::from_f64_lossy(x.to_f64_lossy())).collect() };
        other.visit_params(&mut |p| p.value.copy_from_slice(&conv(&state[&p.name])));
        other.visit_buffers(&mut |name, v| *v = conv(&state[&name]));
        Ok(other)
    }
}

fn find_gct<'a, T: Scalar>(layer: &'a mut Layer<T>, name: &str, found: &mut Option<&'a mut GctLayer<T>>) {
    match layer {
        Layer::Gct(g) if g.name == name => *found = Some(g),
        Layer::Residual(r) => {
            for child in r.body.iter_mut().chain(r.shortcut.iter_mut()) {
                if found.is_some() {
                    return;
                }
                find_gct(child, name, found);
            }
        }
        _ => {}
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn count(nodes: &[Node], pred: &dyn Fn(&Node) -> bool) -> usize {
        let mut n = 0;
        for node in nodes {
            node.walk(&mut |x| {
                if pred(x) {
                    n += 1
                }
            });
        }
        n
    }

    fn two_conv_spec() -> NetworkSpec {
        NetworkSpec {
            name: "two".into(),
            input_channels: 3,
            input_size: [8, 8],
            layers: vec![
                conv(4, 3, 1, 1),
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                conv(8, 3, 2, 1),
                LayerSpec::BatchNorm,
                LayerSpec::GlobalAvgPool,
                LayerSpec::Linear { out_features: 5 },
            ],
            placement: Placement::BeforeConv,
            gct: GctVariant::default(),
            se_reduction: None,
        }
    }

    #[test]
    fn before_conv_inserts_one_gct_per_conv() {
        let nodes = resolve(&two_conv_spec()).unwrap();
        assert_eq!(count(&nodes, &|n| matches!(n, Node::Gct { .. })), 2);
        assert_eq!(nodes[0].name(), "conv1.gct");
        assert!(matches!(nodes[0], Node::Gct { channels: 3, .. }));
    }

    #[test]
    fn placement_variants() {
        let spec = NetworkSpec::miniresnet();
        let convs = count(&resolve(&spec).unwrap(), &|n| matches!(n, Node::Conv { .. }));
        let bns = count(&resolve(&spec).unwrap(), &|n| matches!(n, Node::BatchNorm { .. }));
        let gcts = |p| count(&resolve(&spec.clone().with_placement(p)).unwrap(), &|n| matches!(n, Node::Gct { .. }));
        assert_eq!(gcts(Placement::None), 0);
        assert_eq!(gcts(Placement::BeforeConv), convs);
        assert_eq!(gcts(Placement::BeforeBn), bns);
        assert_eq!(gcts(Placement::AfterBn), bns);
        assert_eq!(gcts(Placement::LastTwoConvs), 6);
    }

    #[test]
    fn shortcut_convs_get_gct_too() {
        let nodes = resolve(&NetworkSpec::miniresnet().with_placement(Placement::BeforeConv)).unwrap();
        let shortcut = nodes
            .iter()
            .find_map(|n| match n {
                Node::Residual { shortcut, .. } if !shortcut.is_empty() => Some(shortcut),
                _ => None,
            })
            .unwrap();
        assert!(matches!(shortcut[0], Node::Gct { channels: 16, .. }));
    }

    #[test]
    fn se_goes_after_last_bn_of_each_block() {
        let mut spec = NetworkSpec::miniresnet();
        spec.se_reduction = Some(16);
        let nodes = resolve(&spec).unwrap();
        let mut se = Vec::new();
        for n in &nodes {
            n.walk(&mut |x| {
                if let Node::Se { channels, reduction, .. } = x {
                    se.push((*channels, *reduction));
                }
            });
        }
        assert_eq!(se, vec![(16, 4), (32, 8), (64, 16)]);
        let Node::Residual { body, .. } = &nodes[3] else { panic!() };
        assert!(matches!(body.last().unwrap(), Node::Se { .. }));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(NetworkSpec::from_json(r#"{"name":"x","input_channels":1,"input_size":[4,4],"layers":[{"type":"dropout"}]}"#).is_err());
        let mut bad = two_conv_spec();
        bad.layers.push(LayerSpec::Residual {
            body: vec![conv(7, 1, 1, 0)],
            shortcut: vec![],
        });
        assert!(matches!(resolve(&bad), Err(Error::InvalidSpec(_))));
        let mut empty = two_conv_spec();
        empty.layers.clear();
        assert!(resolve(&empty).is_err());
    }

    #[test]
    fn spec_json_roundtrip() {
        let spec = NetworkSpec::miniresnet().with_placement(Placement::AfterBn);
        assert_eq!(NetworkSpec::from_json(&spec.to_json()).unwrap(), spec);
        let parsed = NetworkSpec::from_json(
            r#"{"name":"t","input_channels":1,"input_size":[4,4],"placement":"before_conv",
                "layers":[{"type":"conv","out_channels":2,"kernel":3,"padding":1},{"type":"batch_norm"},
                          {"type":"relu"},{"type":"global_avg_pool"},{"type":"linear","out_features":3}]}"#,
        )
        .unwrap();
        assert_eq!(parsed.placement, Placement::BeforeConv);
        assert_eq!(parsed.gct, GctVariant::default());
    }

    #[test]
    fn build_and_run_forward() {
        let mut net: Network<f32> = build_network(&two_conv_spec(), 7).unwrap();
        let x = Tensor4::full([2, 3, 8, 8], 0.5);
        let y = net.forward(&x, Mode::Train).unwrap();
        assert_eq!(y.shape(), Shape4::new(2, 5, 1, 1));
        assert_eq!(net.gct_layers().len(), 2);
        assert!(net.gct_layer_mut("conv2.gct").is_some());
        assert!(net.gct_layer_mut("nope").is_none());
    }

    #[test]
    fn cast_preserves_values() {
        let mut net: Network<f32> = build_network(&two_conv_spec(), 3).unwrap();
        let mut wide: Network<f64> = net.cast().unwrap();
        let a = net.state();
        let b = wide.state();
        for ((na, va), (nb, vb)) in a.iter().zip(&b) {
            assert_eq!(na, nb);
            for (x, y) in va.iter().zip(vb) {
                assert_eq!(*x as f64, *y);
            }
        }
    }
}
