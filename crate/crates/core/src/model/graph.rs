use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::variant::{Architecture, ModelVariant, ANCHORS_PER_HEAD};
use crate::error::{spec_err, Result};
use crate::nn::{
    BottleneckCsp, Conv, ConvLayer, ConvStyle, Cost, CspSpec, Focus, ParamBuilder, ParamStore, Session, Spp,
    C3,
};
use crate::tensor::{Scalar, Var};

/// Layer type plus its unscaled arguments (channels before the width
/// multiple, repeats before the depth multiple).
#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Focus { channels: usize, kernel: usize },
    Conv { channels: usize, kernel: usize, stride: usize },
    BottleneckCsp { channels: usize, repeats: usize, shortcut: bool },
    C3 { channels: usize, repeats: usize, shortcut: bool },
    Spp { channels: usize },
    Upsample,
    Concat,
    Detect,
}

/// One node of the network DAG. `from` entries are absolute layer indices or
/// negative offsets relative to this layer (`-1` = previous).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub from: Vec<isize>,
    pub kind: LayerKind,
    /// Build stride-preserving convolutions of this layer as ghost convolutions.
    pub ghost: bool,
}

impl LayerSpec {
    fn new(from: &[isize], kind: LayerKind) -> Self {
        Self {
            from: from.to_vec(),
            kind,
            ghost: false,
        }
    }

    fn name(&self) -> &'static str {
        match self.kind {
            LayerKind::Focus { .. } => "Focus",
            LayerKind::Conv { .. } => "Conv",
            LayerKind::BottleneckCsp { .. } => "BottleneckCSP",
            LayerKind::C3 { .. } => "C3",
            LayerKind::Spp { .. } => "SPP",
            LayerKind::Upsample => "Upsample",
            LayerKind::Concat => "Concat",
            LayerKind::Detect => "Detect",
        }
    }
}

/// Layer list of `arch`: backbone, top-down/bottom-up neck and the detect node.
///
/// Ghost scope for `gbh`: every convolution inside the BottleneckCSP blocks
/// and the stride-1 lateral convolutions of the neck. The Focus stem, the SPP
/// convolutions, stride-2 downsamplers and the detect convolutions stay
/// standard.
pub fn layer_specs(arch: Architecture) -> Vec<LayerSpec> {
    use LayerKind::*;
    let csp = |channels, repeats, shortcut| {
        if arch.uses_csp() {
            BottleneckCsp {
                channels,
                repeats,
                shortcut,
            }
        } else {
            C3 {
                channels,
                repeats,
                shortcut,
            }
        }
    };
    let conv = |channels, kernel, stride| Conv {
        channels,
        kernel,
        stride,
    };
    let mut l = vec![
        LayerSpec::new(&[-1], Focus { channels: 64, kernel: 3 }), // 0  /2
        LayerSpec::new(&[-1], conv(128, 3, 2)),                   // 1  /4
        LayerSpec::new(&[-1], csp(128, 3, true)),                 // 2
        LayerSpec::new(&[-1], conv(256, 3, 2)),                   // 3  /8
        LayerSpec::new(&[-1], csp(256, 9, true)),                 // 4
        LayerSpec::new(&[-1], conv(512, 3, 2)),                   // 5  /16
        LayerSpec::new(&[-1], csp(512, 9, true)),                 // 6
        LayerSpec::new(&[-1], conv(1024, 3, 2)),                  // 7  /32
        LayerSpec::new(&[-1], Spp { channels: 1024 }),            // 8
        LayerSpec::new(&[-1], csp(1024, 3, false)),               // 9
        LayerSpec::new(&[-1], conv(512, 1, 1)),                   // 10
        LayerSpec::new(&[-1], Upsample),                          // 11
        LayerSpec::new(&[-1, 6], Concat),                         // 12
        LayerSpec::new(&[-1], csp(512, 3, false)),                // 13
        LayerSpec::new(&[-1], conv(256, 1, 1)),                   // 14
        LayerSpec::new(&[-1], Upsample),                          // 15
        LayerSpec::new(&[-1, 4], Concat),                         // 16
        LayerSpec::new(&[-1], csp(256, 3, false)),                // 17 P3
    ];
    let taps: Vec<isize> = if arch.head_strides().len() == 4 {
        l.extend([
            LayerSpec::new(&[-1], conv(128, 1, 1)),    // 18
            LayerSpec::new(&[-1], Upsample),           // 19
            LayerSpec::new(&[-1, 2], Concat),          // 20
            LayerSpec::new(&[-1], csp(128, 3, false)), // 21 P2 /4
            LayerSpec::new(&[-1], conv(128, 3, 2)),    // 22
            LayerSpec::new(&[-1, 18], Concat),         // 23
            LayerSpec::new(&[-1], csp(256, 3, false)), // 24 P3 /8
            LayerSpec::new(&[-1], conv(256, 3, 2)),    // 25
            LayerSpec::new(&[-1, 14], Concat),         // 26
            LayerSpec::new(&[-1], csp(512, 3, false)), // 27 P4 /16
            LayerSpec::new(&[-1], conv(512, 3, 2)),    // 28
            LayerSpec::new(&[-1, 10], Concat),         // 29
            LayerSpec::new(&[-1], csp(1024, 3, false)), // 30 P5 /32
        ]);
        vec![21, 24, 27, 30]
    } else {
        l.extend([
            LayerSpec::new(&[-1], conv(256, 3, 2)),     // 18
            LayerSpec::new(&[-1, 14], Concat),          // 19
            LayerSpec::new(&[-1], csp(512, 3, false)),  // 20 P4 /16
            LayerSpec::new(&[-1], conv(512, 3, 2)),     // 21
            LayerSpec::new(&[-1, 10], Concat),          // 22
            LayerSpec::new(&[-1], csp(1024, 3, false)), // 23 P5 /32
        ]);
        vec![17, 20, 23]
    };
    if arch.uses_ghost() {
        for spec in &mut l {
            spec.ghost = matches!(
                spec.kind,
                BottleneckCsp { .. } | C3 { .. } | Conv { stride: 1, .. }
            );
        }
    }
    l.push(LayerSpec::new(&taps, Detect));
    l
}

#[derive(Debug, Clone)]
pub enum Node {
    Focus(Focus),
    Conv(ConvLayer),
    Csp(BottleneckCsp),
    C3(C3),
    Spp(Spp),
    Upsample,
    Concat,
}

impl Node {
    fn modules(&self) -> usize {
        match self {
            Node::Focus(b) => b.modules(),
            Node::Conv(b) => b.modules(),
            Node::Csp(b) => b.modules(),
            Node::C3(b) => b.modules(),
            Node::Spp(b) => b.modules(),
            Node::Upsample | Node::Concat => 1,
        }
    }
}

/// Per-head 1x1 prediction convolutions.
#[derive(Debug, Clone)]
pub struct Detect {
    pub taps: Vec<usize>,
    pub convs: Vec<Conv>,
}

/// A built network: layer graph, detect head and its parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub variant: ModelVariant,
    pub specs: Vec<LayerSpec>,
    /// Absolute input indices and the node, per non-detect layer.
    pub nodes: Vec<(Vec<usize>, Node)>,
    pub detect: Detect,
    pub store: ParamStore<f32>,
}

fn resolve(from: &[isize], i: usize) -> Result<Vec<usize>> {
    from.iter()
        .map(|&f| {
            let j = if f < 0 { i as isize + f } else { f };
            if j < 0 || j as usize >= i {
                Err(spec_err(format!("layer {i}: input {f} does not refer to an earlier layer")))
            } else {
                Ok(j as usize)
            }
        })
        .collect()
}

impl Model {
    /// Build `variant` with parameters drawn from a seeded generator.
    pub fn new(variant: ModelVariant, seed: u64) -> Result<Self> {
        let specs = layer_specs(variant.arch);
        Self::from_specs(variant, specs, seed)
    }

    /// Build an arbitrary layer graph (the last spec must be `Detect`).
    pub fn from_specs(variant: ModelVariant, specs: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        variant.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let (detect_spec, body) = specs
            .split_last()
            .filter(|(d, _)| d.kind == LayerKind::Detect)
            .ok_or_else(|| spec_err("layer list must end with a Detect layer"))?;
        let mut channels: Vec<usize> = Vec::with_capacity(specs.len());
        let mut nodes = Vec::with_capacity(body.len());
        for (i, spec) in body.iter().enumerate() {
            if spec.kind == LayerKind::Detect {
                return Err(spec_err(format!("layer {i}: Detect must be the last layer")));
            }
            let from = if i == 0 {
                if spec.from != [-1] {
                    return Err(spec_err("layer 0 must read the image (-1)"));
                }
                vec![]
            } else {
                resolve(&spec.from, i)?
            };
            let cin = if i == 0 { 3 } else { channels[from[0]] };
            if !matches!(spec.kind, LayerKind::Concat) && from.len() > 1 {
                return Err(spec_err(format!("layer {i} ({}) takes a single input", spec.name())));
            }
            let style = if spec.ghost {
                ConvStyle::Ghost
            } else {
                ConvStyle::Standard
            };
            let (node, cout) = pb.scoped(format!("model.{i}"), |pb| -> Result<(Node, usize)> {
                Ok(match spec.kind {
                    LayerKind::Focus { channels: c, kernel } => {
                        let c = variant.channels(c);
                        (Node::Focus(Focus::build(pb, cin, c, kernel)?), c)
                    }
                    LayerKind::Conv {
                        channels: c,
                        kernel,
                        stride,
                    } => {
                        let c = variant.channels(c);
                        (Node::Conv(ConvLayer::cba(pb, cin, c, kernel, stride, style)?), c)
                    }
                    LayerKind::BottleneckCsp {
                        channels: c,
                        repeats,
                        shortcut,
                    } => {
                        let c = variant.channels(c);
                        let spec = CspSpec::new(cin, c, variant.repeats(repeats), shortcut);
                        (Node::Csp(BottleneckCsp::build(pb, spec, style)?), c)
                    }
                    LayerKind::C3 {
                        channels: c,
                        repeats,
                        shortcut,
                    } => {
                        let c = variant.channels(c);
                        let spec = CspSpec::new(cin, c, variant.repeats(repeats), shortcut);
                        (Node::C3(C3::build(pb, spec, style)?), c)
                    }
                    LayerKind::Spp { channels: c } => {
                        let c = variant.channels(c);
                        (Node::Spp(Spp::build(pb, cin, c)?), c)
                    }
                    LayerKind::Upsample => (Node::Upsample, cin),
                    LayerKind::Concat => (Node::Concat, from.iter().map(|&j| channels[j]).sum()),
                    LayerKind::Detect => unreachable!(),
                })
            })?;
            channels.push(cout);
            nodes.push((from, node));
        }
        let taps = resolve(&detect_spec.from, body.len())?;
        let strides = variant.head_strides();
        if taps.len() != strides.len() {
            return Err(spec_err(format!(
                "{} has {} heads but Detect reads {} layers",
                variant.arch,
                strides.len(),
                taps.len()
            )));
        }
        let no = variant.head_channels();
        let idx = body.len();
        let convs: Vec<Conv> = taps
            .iter()
            .enumerate()
            .map(|(h, &t)| pb.scoped(format!("model.{idx}.m.{h}"), |pb| Conv::build(pb, channels[t], no, 1, 1, true)))
            .collect();
        drop(pb);
        let mut model = Self {
            variant,
            specs,
            nodes,
            detect: Detect { taps, convs },
            store,
        };
        model.init_detect_bias();
        model.check_strides()?;
        Ok(model)
    }

    /// Objectness prior of about 8 objects per image and a 0.6 class prior.
    fn init_detect_bias(&mut self) {
        let nc = self.variant.num_classes;
        let per = 5 + nc;
        for (h, conv) in self.detect.convs.iter().enumerate() {
            let stride = self.variant.head_strides()[h] as f64;
            let cells = (self.variant.input_size as f64 / stride).powi(2);
            let obj = (8.0 / cells).ln() as f32;
            let cls = (0.6 / (nc as f64 - 0.99)).ln() as f32;
            let bias = self.store.param_mut(conv.bias.expect("detect conv has bias")).data_mut();
            for a in 0..ANCHORS_PER_HEAD {
                bias[a * per + 4] += obj;
                for c in 0..nc {
                    bias[a * per + 5 + c] += cls;
                }
            }
        }
    }

    /// The traced stride of every head must equal the variant's head stride.
    fn check_strides(&self) -> Result<()> {
        let s = self.variant.input_size;
        let shapes = self.trace([1, 3, s, s], &mut Cost::default());
        for (h, (shape, &stride)) in shapes.iter().zip(self.variant.head_strides()).enumerate() {
            if shape[2] * stride != s {
                return Err(spec_err(format!(
                    "head {h} produces a {}x{} grid, expected stride {stride}",
                    shape[2], shape[3]
                )));
            }
        }
        Ok(())
    }

    /// Raw head maps `[B, A*(5+C), H/s, W/s]`, fine to coarse.
    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Vec<Var>> {
        let mut outs: Vec<Var> = Vec::with_capacity(self.nodes.len());
        for (from, node) in &self.nodes {
            let input = from.first().map_or(x, |&j| outs[j]);
            let y = match node {
                Node::Focus(b) => b.forward(s, input)?,
                Node::Conv(b) => b.forward(s, input)?,
                Node::Csp(b) => b.forward(s, input)?,
                Node::C3(b) => b.forward(s, input)?,
                Node::Spp(b) => b.forward(s, input)?,
                Node::Upsample => s.tape.upsample_nearest2x(input)?,
                Node::Concat => {
                    let parts: Vec<Var> = from.iter().map(|&j| outs[j]).collect();
                    s.tape.concat_channels(&parts)?
                }
            };
            outs.push(y);
        }
        self.detect
            .taps
            .iter()
            .zip(&self.detect.convs)
            .map(|(&t, conv)| conv.forward(s, outs[t]))
            .collect()
    }

    /// Head output shapes for an input of `shape`, accumulating MACs.
    pub fn trace(&self, shape: [usize; 4], cost: &mut Cost) -> Vec<[usize; 4]> {
        let mut shapes: Vec<[usize; 4]> = Vec::with_capacity(self.nodes.len());
        for (from, node) in &self.nodes {
            let input = from.first().map_or(shape, |&j| shapes[j]);
            let out = match node {
                Node::Focus(b) => b.trace(input, cost),
                Node::Conv(b) => b.trace(input, cost),
                Node::Csp(b) => b.trace(input, cost),
                Node::C3(b) => b.trace(input, cost),
                Node::Spp(b) => b.trace(input, cost),
                Node::Upsample => [input[0], input[1], 2 * input[2], 2 * input[3]],
                Node::Concat => {
                    let c = from.iter().map(|&j| shapes[j][1]).sum();
                    [input[0], c, input[2], input[3]]
                }
            };
            shapes.push(out);
        }
        self.detect
            .taps
            .iter()
            .zip(&self.detect.convs)
            .map(|(&t, conv)| conv.trace(shapes[t], cost))
            .collect()
    }

    /// Trainable parameter count (batch-norm running statistics excluded).
    pub fn count_params(&self) -> usize {
        self.store.param_count()
    }

    /// Forward FLOPs (2 x multiply-accumulates of convolutions) for one
    /// square image of side `input_size`.
    pub fn count_flops(&self, input_size: usize) -> u64 {
        let mut cost = Cost::default();
        self.trace([1, 3, input_size, input_size], &mut cost);
        cost.flops()
    }

    /// Leaf-layer count: conv, BN, activation, pool, upsample, concat and one
    /// per detect convolution.
    pub fn count_modules(&self) -> usize {
        self.nodes.iter().map(|(_, n)| n.modules()).sum::<usize>() + self.detect.convs.len()
    }

    pub fn num_heads(&self) -> usize {
        self.detect.convs.len()
    }
}
