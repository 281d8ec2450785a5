//! The modified 3D one-stage detector: residual backbone without its final
//! stage, P2-P6 feature pyramid, and twin convolutional subnets shared across
//! levels that emit per-anchor class logits and box offsets.
//!
//! Wiring: `{C1..C4}` come from the backbone at per-axis strides
//! `{2, 4, 8, 16}`. P4 is the 1x1x1 lateral of C4 (the top of the top-down
//! path), P3/P2 add the trilinearly upsampled coarser map onto the laterals
//! of C3/C2, and P5/P6 come from stride-2 3x3x3 convolutions on C4 (ReLU in
//! between) instead of a C5 stage. C1 gets no lateral; all levels carry
//! `pyramid_channels` features.

use ndarray::{Array5, ArrayD, Axis};
use serde::{Deserialize, Serialize};

use crate::anchors::{generate_anchors, AnchorConfig, PyramidLevel};
use crate::error::{Error, Result};
use crate::geometry::{decode_box, nms, BoundingBox3D, BoxOffsets, Detection};
use crate::nn::{
    ceil_shape, conv::ConvInit, BatchNorm3d, Conv3d, Elem, Initializer, MaxPool3d, Param, Phase,
    Relu, TrilinearResize, VisitParams,
};

pub const OFFSETS_PER_ANCHOR: usize = 6;

/// Architecture hyperparameters. `depth` counts residual-network layers
/// after discarding the final building block: 14 (from the 18-layer basic
/// design) or 41 (from the 50-layer bottleneck design).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub depth: usize,
    /// Temporal subtraction volumes arriving as input channels.
    pub input_channels: usize,
    /// Width of the stem; residual stages use {1, 2, 4} times this.
    pub stem_channels: usize,
    pub pyramid_channels: usize,
    pub subnet_channels: usize,
    pub subnet_depth: usize,
    /// Per-axis `(z, y, x)` strides of the stem, the pooling stage and the
    /// two strided residual stages.
    pub stage_strides: [[usize; 3]; 4],
    /// Classification prior: fresh networks score everything near this.
    pub prior_probability: f64,
    pub anchors: AnchorConfig,
    /// Weight initialization seed.
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            depth: 14,
            input_channels: 13,
            stem_channels: 64,
            pyramid_channels: 256,
            subnet_channels: 64,
            subnet_depth: 4,
            stage_strides: [[2; 3]; 4],
            prior_probability: 0.01,
            anchors: AnchorConfig::default(),
            seed: 0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth != 14 && self.depth != 41 {
            return Err(Error::Config(format!(
                "network.depth: {} unsupported (expected 14 or 41)",
                self.depth
            )));
        }
        if self.input_channels == 0 || self.stem_channels == 0 || self.pyramid_channels == 0 {
            return Err(Error::Config("network: channel counts must be positive".into()));
        }
        if !(0.0 < self.prior_probability && self.prior_probability < 1.0) {
            return Err(Error::Config("network.prior_probability: must lie in (0, 1)".into()));
        }
        self.anchors.validate()
    }

    /// Cumulative per-axis stride of each pyramid level P2..P6.
    pub fn level_strides(&self) -> [[usize; 3]; 5] {
        let mut p2 = [1usize; 3];
        for stage in &self.stage_strides[..2] {
            for a in 0..3 {
                p2[a] *= stage[a];
            }
        }
        let mut p3 = p2;
        let mut p4 = p2;
        for a in 0..3 {
            p3[a] *= self.stage_strides[2][a];
            p4[a] = p3[a] * self.stage_strides[3][a];
        }
        // P5/P6 halve C4 once and twice more.
        [p2, p3, p4, [p4[0] * 2, p4[1] * 2, p4[2] * 2], [p4[0] * 4, p4[1] * 4, p4[2] * 4]]
    }

    /// Anchor configuration with strides derived from the network strides.
    pub fn resolved_anchors(&self) -> AnchorConfig {
        AnchorConfig { strides: self.level_strides(), ..self.anchors.clone() }
    }

    pub fn anchors_per_position(&self) -> usize {
        self.anchors.anchors_per_position()
    }
}

/// Per-level raw predictions: class logits `(N, A, d, h, w)` and box offsets
/// `(N, A*6, d, h, w)`, A = anchors per position. Within a level, anchor
/// `v * A + a` sits at flattened voxel `v` (z-major), matching
/// [`generate_anchors`] order.
pub struct LevelOutput<F: Elem> {
    pub class_logits: Array5<F>,
    pub box_offsets: Array5<F>,
}

impl<F: Elem> LevelOutput<F> {
    pub fn spatial(&self) -> [usize; 3] {
        let d = self.class_logits.dim();
        [d.2, d.3, d.4]
    }

    pub fn anchors_per_position(&self) -> usize {
        self.class_logits.dim().1
    }

    /// Anchor count of this level (per batch item).
    pub fn num_anchors(&self) -> usize {
        let [d, h, w] = self.spatial();
        d * h * w * self.anchors_per_position()
    }
}

pub struct DetectorOutput<F: Elem> {
    /// Ordered P2..P6.
    pub levels: Vec<(PyramidLevel, LevelOutput<F>)>,
}

impl<F: Elem> DetectorOutput<F> {
    pub fn total_anchors(&self) -> usize {
        self.levels.iter().map(|(_, l)| l.num_anchors()).sum()
    }
}

/// Gradients flowing back into the detector, same shapes as the outputs.
pub struct DetectorGrads<F: Elem> {
    pub levels: Vec<(Array5<F>, Array5<F>)>,
}

// ---------------------------------------------------------------------------
// Residual blocks
// ---------------------------------------------------------------------------

struct BasicBlock<F: Elem> {
    conv1: Conv3d<F>,
    bn1: BatchNorm3d<F>,
    relu1: Relu<F>,
    conv2: Conv3d<F>,
    bn2: BatchNorm3d<F>,
    downsample: Option<(Conv3d<F>, BatchNorm3d<F>)>,
    relu_out: Relu<F>,
}

impl<F: Elem> BasicBlock<F> {
    fn new(cin: usize, cout: usize, stride: [usize; 3], rng: &mut Initializer) -> Self {
        let needs_ds = cin != cout || stride != [1, 1, 1];
        Self {
            conv1: Conv3d::new(cin, cout, [3; 3], stride, false, ConvInit::HeNormal, rng),
            bn1: BatchNorm3d::new(cout),
            relu1: Relu::new(),
            conv2: Conv3d::new(cout, cout, [3; 3], [1; 3], false, ConvInit::HeNormal, rng),
            bn2: BatchNorm3d::new(cout),
            downsample: needs_ds.then(|| {
                (
                    Conv3d::new(cin, cout, [1; 3], stride, false, ConvInit::HeNormal, rng),
                    BatchNorm3d::new(cout),
                )
            }),
            relu_out: Relu::new(),
        }
    }

    fn forward(&mut self, x: &Array5<F>, phase: Phase) -> Array5<F> {
        let mut y = self.bn1.forward(&self.conv1.forward(x, phase), phase);
        y = self.relu1.forward(&y, phase);
        y = self.bn2.forward(&self.conv2.forward(&y, phase), phase);
        let identity = match &mut self.downsample {
            Some((conv, bn)) => bn.forward(&conv.forward(x, phase), phase),
            None => x.clone(),
        };
        self.relu_out.forward(&(y + identity), phase)
    }

    fn backward(&mut self, grad: &Array5<F>) -> Array5<F> {
        let g = self.relu_out.backward(grad);
        // Residual: gradient splits into the main path and the identity.
        let g_main = self.bn2.backward(&g);
        let g_main = self.conv2.backward(&g_main);
        let g_main = self.relu1.backward(&g_main);
        let g_main = self.bn1.backward(&g_main);
        let mut g_in = self.conv1.backward(&g_main);
        match &mut self.downsample {
            Some((conv, bn)) => {
                let gd = bn.backward(&g);
                g_in = g_in + conv.backward(&gd);
            }
            None => g_in = g_in + &g,
        }
        g_in
    }
}

impl<F: Elem> VisitParams<F> for BasicBlock<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        self.conv1.visit_params(&format!("{prefix}.conv1"), f);
        self.bn1.visit_params(&format!("{prefix}.bn1"), f);
        self.conv2.visit_params(&format!("{prefix}.conv2"), f);
        self.bn2.visit_params(&format!("{prefix}.bn2"), f);
        if let Some((conv, bn)) = &mut self.downsample {
            conv.visit_params(&format!("{prefix}.down.conv"), f);
            bn.visit_params(&format!("{prefix}.down.bn"), f);
        }
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut ArrayD<F>)) {
        self.bn1.visit_buffers(&format!("{prefix}.bn1"), f);
        self.bn2.visit_buffers(&format!("{prefix}.bn2"), f);
        if let Some((_, bn)) = &mut self.downsample {
            bn.visit_buffers(&format!("{prefix}.down.bn"), f);
        }
    }
}

struct Bottleneck<F: Elem> {
    conv1: Conv3d<F>,
    bn1: BatchNorm3d<F>,
    relu1: Relu<F>,
    conv2: Conv3d<F>,
    bn2: BatchNorm3d<F>,
    relu2: Relu<F>,
    conv3: Conv3d<F>,
    bn3: BatchNorm3d<F>,
    downsample: Option<(Conv3d<F>, BatchNorm3d<F>)>,
    relu_out: Relu<F>,
}

const BOTTLENECK_EXPANSION: usize = 4;

impl<F: Elem> Bottleneck<F> {
    fn new(cin: usize, width: usize, stride: [usize; 3], rng: &mut Initializer) -> Self {
        let cout = width * BOTTLENECK_EXPANSION;
        let needs_ds = cin != cout || stride != [1, 1, 1];
        Self {
            conv1: Conv3d::new(cin, width, [1; 3], [1; 3], false, ConvInit::HeNormal, rng),
            bn1: BatchNorm3d::new(width),
            relu1: Relu::new(),
            conv2: Conv3d::new(width, width, [3; 3], stride, false, ConvInit::HeNormal, rng),
            bn2: BatchNorm3d::new(width),
            relu2: Relu::new(),
            conv3: Conv3d::new(width, cout, [1; 3], [1; 3], false, ConvInit::HeNormal, rng),
            bn3: BatchNorm3d::new(cout),
            downsample: needs_ds.then(|| {
                (
                    Conv3d::new(cin, cout, [1; 3], stride, false, ConvInit::HeNormal, rng),
                    BatchNorm3d::new(cout),
                )
            }),
            relu_out: Relu::new(),
        }
    }

    fn forward(&mut self, x: &Array5<F>, phase: Phase) -> Array5<F> {
        let mut y = self.bn1.forward(&self.conv1.forward(x, phase), phase);
        y = self.relu1.forward(&y, phase);
        y = self.bn2.forward(&self.conv2.forward(&y, phase), phase);
        y = self.relu2.forward(&y, phase);
        y = self.bn3.forward(&self.conv3.forward(&y, phase), phase);
        let identity = match &mut self.downsample {
            Some((conv, bn)) => bn.forward(&conv.forward(x, phase), phase),
            None => x.clone(),
        };
        self.relu_out.forward(&(y + identity), phase)
    }

    fn backward(&mut self, grad: &Array5<F>) -> Array5<F> {
        let g = self.relu_out.backward(grad);
        let g_main = self.bn3.backward(&g);
        let g_main = self.conv3.backward(&g_main);
        let g_main = self.relu2.backward(&g_main);
        let g_main = self.bn2.backward(&g_main);
        let g_main = self.conv2.backward(&g_main);
        let g_main = self.relu1.backward(&g_main);
        let g_main = self.bn1.backward(&g_main);
        let mut g_in = self.conv1.backward(&g_main);
        match &mut self.downsample {
            Some((conv, bn)) => {
                let gd = bn.backward(&g);
                g_in = g_in + conv.backward(&gd);
            }
            None => g_in = g_in + &g,
        }
        g_in
    }
}

impl<F: Elem> VisitParams<F> for Bottleneck<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        self.conv1.visit_params(&format!("{prefix}.conv1"), f);
        self.bn1.visit_params(&format!("{prefix}.bn1"), f);
        self.conv2.visit_params(&format!("{prefix}.conv2"), f);
        self.bn2.visit_params(&format!("{prefix}.bn2"), f);
        self.conv3.visit_params(&format!("{prefix}.conv3"), f);
        self.bn3.visit_params(&format!("{prefix}.bn3"), f);
        if let Some((conv, bn)) = &mut self.downsample {
            conv.visit_params(&format!("{prefix}.down.conv"), f);
            bn.visit_params(&format!("{prefix}.down.bn"), f);
        }
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut ArrayD<F>)) {
        self.bn1.visit_buffers(&format!("{prefix}.bn1"), f);
        self.bn2.visit_buffers(&format!("{prefix}.bn2"), f);
        self.bn3.visit_buffers(&format!("{prefix}.bn3"), f);
        if let Some((_, bn)) = &mut self.downsample {
            bn.visit_buffers(&format!("{prefix}.down.bn"), f);
        }
    }
}

enum Block<F: Elem> {
    Basic(BasicBlock<F>),
    Bottleneck(Bottleneck<F>),
}

impl<F: Elem> Block<F> {
    fn forward(&mut self, x: &Array5<F>, phase: Phase) -> Array5<F> {
        match self {
            Block::Basic(b) => b.forward(x, phase),
            Block::Bottleneck(b) => b.forward(x, phase),
        }
    }
    fn backward(&mut self, g: &Array5<F>) -> Array5<F> {
        match self {
            Block::Basic(b) => b.backward(g),
            Block::Bottleneck(b) => b.backward(g),
        }
    }
}

impl<F: Elem> VisitParams<F> for Block<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        match self {
            Block::Basic(b) => b.visit_params(prefix, f),
            Block::Bottleneck(b) => b.visit_params(prefix, f),
        }
    }
    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut ArrayD<F>)) {
        match self {
            Block::Basic(b) => b.visit_buffers(prefix, f),
            Block::Bottleneck(b) => b.visit_buffers(prefix, f),
        }
    }
}

// ---------------------------------------------------------------------------
// Backbone
// ---------------------------------------------------------------------------

/// Stem + three residual stages; the design's final building block (C5) is
/// discarded. Stage outputs C2..C4 feed the pyramid; C1 (the stem
/// activation) gets no lateral.
pub struct Backbone<F: Elem> {
    stem: Conv3d<F>,
    stem_bn: BatchNorm3d<F>,
    stem_relu: Relu<F>,
    pool: MaxPool3d<F>,
    stages: [Vec<Block<F>>; 3],
    /// Feature channels of (C2, C3, C4).
    pub stage_channels: [usize; 3],
}

pub struct BackboneFeatures<F: Elem> {
    pub c1: Array5<F>,
    pub c2: Array5<F>,
    pub c3: Array5<F>,
    pub c4: Array5<F>,
}

impl<F: Elem> Backbone<F> {
    fn new(config: &NetworkConfig, rng: &mut Initializer) -> Result<Self> {
        let w0 = config.stem_channels;
        let stem = Conv3d::new(
            config.input_channels,
            w0,
            [3; 3],
            config.stage_strides[0],
            false,
            ConvInit::HeNormal,
            rng,
        );
        let (blocks_per_stage, bottleneck): ([usize; 3], bool) = match config.depth {
            14 => ([2, 2, 2], false),
            41 => ([3, 4, 6], true),
            d => return Err(Error::Config(format!("network.depth: {d} unsupported"))),
        };
        let widths = [w0, w0 * 2, w0 * 4];
        let mut stages: [Vec<Block<F>>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        let mut cin = w0;
        for (si, stage) in stages.iter_mut().enumerate() {
            let stride = if si == 0 { [1, 1, 1] } else { config.stage_strides[si + 1] };
            for bi in 0..blocks_per_stage[si] {
                let s = if bi == 0 { stride } else { [1, 1, 1] };
                let block = if bottleneck {
                    let b = Bottleneck::new(cin, widths[si], s, rng);
                    cin = widths[si] * BOTTLENECK_EXPANSION;
                    Block::Bottleneck(b)
                } else {
                    let b = BasicBlock::new(cin, widths[si], s, rng);
                    cin = widths[si];
                    Block::Basic(b)
                };
                stage.push(block);
            }
        }
        let expansion = if bottleneck { BOTTLENECK_EXPANSION } else { 1 };
        Ok(Self {
            stem,
            stem_bn: BatchNorm3d::new(w0),
            stem_relu: Relu::new(),
            pool: MaxPool3d::new([3; 3], config.stage_strides[1]),
            stages,
            stage_channels: [widths[0] * expansion, widths[1] * expansion, widths[2] * expansion],
        })
    }

    pub fn forward(&mut self, x: &Array5<F>, phase: Phase) -> BackboneFeatures<F> {
        let c1 = {
            let y = self.stem.forward(x, phase);
            let y = self.stem_bn.forward(&y, phase);
            self.stem_relu.forward(&y, phase)
        };
        let mut y = self.pool.forward(&c1, phase);
        let mut outs: Vec<Array5<F>> = Vec::with_capacity(3);
        for stage in self.stages.iter_mut() {
            for block in stage.iter_mut() {
                y = block.forward(&y, phase);
            }
            outs.push(y.clone());
        }
        let c4 = outs.pop().unwrap();
        let c3 = outs.pop().unwrap();
        let c2 = outs.pop().unwrap();
        BackboneFeatures { c1, c2, c3, c4 }
    }

    /// `grads`: (dC2, dC3, dC4). Returns the input gradient.
    pub fn backward(&mut self, grads: (Array5<F>, Array5<F>, Array5<F>)) -> Array5<F> {
        let (d2, d3, mut g) = grads;
        for (si, stage) in self.stages.iter_mut().enumerate().rev() {
            for block in stage.iter_mut().rev() {
                g = block.backward(&g);
            }
            // Stage outputs feed both the next stage and a lateral branch.
            if si == 2 {
                g = g + &d3;
            } else if si == 1 {
                g = g + &d2;
            }
        }
        let g = self.pool.backward(&g);
        let g = self.stem_relu.backward(&g);
        let g = self.stem_bn.backward(&g);
        self.stem.backward(&g)
    }

    pub fn parameter_count(&mut self) -> usize {
        let mut count = 0usize;
        self.visit_params("backbone", &mut |_, p| count += p.len());
        count
    }
}

impl<F: Elem> VisitParams<F> for Backbone<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        self.stem.visit_params(&format!("{prefix}.stem"), f);
        self.stem_bn.visit_params(&format!("{prefix}.stem_bn"), f);
        for (si, stage) in self.stages.iter_mut().enumerate() {
            for (bi, block) in stage.iter_mut().enumerate() {
                block.visit_params(&format!("{prefix}.stage{}.block{bi}", si + 1), f);
            }
        }
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut ArrayD<F>)) {
        self.stem_bn.visit_buffers(&format!("{prefix}.stem_bn"), f);
        for (si, stage) in self.stages.iter_mut().enumerate() {
            for (bi, block) in stage.iter_mut().enumerate() {
                block.visit_buffers(&format!("{prefix}.stage{}.block{bi}", si + 1), f);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Feature pyramid
// ---------------------------------------------------------------------------

struct Fpn<F: Elem> {
    lateral2: Conv3d<F>,
    lateral3: Conv3d<F>,
    lateral4: Conv3d<F>,
    up3to2: TrilinearResize<F>,
    up4to3: TrilinearResize<F>,
    p5_conv: Conv3d<F>,
    p5_relu: Relu<F>,
    p6_conv: Conv3d<F>,
}

pub struct PyramidFeatures<F: Elem> {
    /// Ordered P2..P6, all with `pyramid_channels` channels.
    pub levels: Vec<(PyramidLevel, Array5<F>)>,
}

impl<F: Elem> Fpn<F> {
    fn new(config: &NetworkConfig, stage_channels: [usize; 3], rng: &mut Initializer) -> Self {
        let pc = config.pyramid_channels;
        Self {
            lateral2: Conv3d::new(stage_channels[0], pc, [1; 3], [1; 3], true, ConvInit::Gaussian01, rng),
            lateral3: Conv3d::new(stage_channels[1], pc, [1; 3], [1; 3], true, ConvInit::Gaussian01, rng),
            lateral4: Conv3d::new(stage_channels[2], pc, [1; 3], [1; 3], true, ConvInit::Gaussian01, rng),
            up3to2: TrilinearResize::new(),
            up4to3: TrilinearResize::new(),
            p5_conv: Conv3d::new(stage_channels[2], pc, [3; 3], [2; 3], true, ConvInit::Gaussian01, rng),
            p5_relu: Relu::new(),
            p6_conv: Conv3d::new(pc, pc, [3; 3], [2; 3], true, ConvInit::Gaussian01, rng),
        }
    }

    fn forward(&mut self, feats: &BackboneFeatures<F>, phase: Phase) -> PyramidFeatures<F> {
        let p4 = self.lateral4.forward(&feats.c4, phase);
        let l3 = self.lateral3.forward(&feats.c3, phase);
        let t3 = [l3.dim().2, l3.dim().3, l3.dim().4];
        let p3 = l3 + self.up4to3.forward(&p4, t3, phase);
        let l2 = self.lateral2.forward(&feats.c2, phase);
        let t2 = [l2.dim().2, l2.dim().3, l2.dim().4];
        let p2 = l2 + self.up3to2.forward(&p3, t2, phase);
        let p5 = self.p5_conv.forward(&feats.c4, phase);
        let p6 = self.p6_conv.forward(&self.p5_relu.forward(&p5, phase), phase);
        PyramidFeatures {
            levels: vec![
                (PyramidLevel::P2, p2),
                (PyramidLevel::P3, p3),
                (PyramidLevel::P4, p4),
                (PyramidLevel::P5, p5),
                (PyramidLevel::P6, p6),
            ],
        }
    }

    /// `grads` ordered P2..P6. Returns (dC2, dC3, dC4).
    fn backward(&mut self, mut grads: Vec<Array5<F>>) -> (Array5<F>, Array5<F>, Array5<F>) {
        let d_p6 = grads.pop().unwrap();
        let d_p5_direct = grads.pop().unwrap();
        let d_p4_direct = grads.pop().unwrap();
        let d_p3_direct = grads.pop().unwrap();
        let d_p2 = grads.pop().unwrap();

        // P6 path.
        let g = self.p6_conv.backward(&d_p6);
        let g = self.p5_relu.backward(&g);
        let d_p5 = d_p5_direct + g;
        let d_c4_from_p5 = self.p5_conv.backward(&d_p5);

        // Top-down path, reverse order: P2 first.
        let d_l2 = d_p2.clone();
        let d_p3 = d_p3_direct + self.up3to2.backward(&d_p2);
        let d_l3 = d_p3.clone();
        let d_p4 = d_p4_direct + self.up4to3.backward(&d_p3);

        let d_c2 = self.lateral2.backward(&d_l2);
        let d_c3 = self.lateral3.backward(&d_l3);
        let d_c4 = self.lateral4.backward(&d_p4) + d_c4_from_p5;
        (d_c2, d_c3, d_c4)
    }
}

impl<F: Elem> VisitParams<F> for Fpn<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        self.lateral2.visit_params(&format!("{prefix}.lateral2"), f);
        self.lateral3.visit_params(&format!("{prefix}.lateral3"), f);
        self.lateral4.visit_params(&format!("{prefix}.lateral4"), f);
        self.p5_conv.visit_params(&format!("{prefix}.p5"), f);
        self.p6_conv.visit_params(&format!("{prefix}.p6"), f);
    }
}

// ---------------------------------------------------------------------------
// Subnets
// ---------------------------------------------------------------------------

/// Four 3x3x3 convolutions at `subnet_channels` with rectifiers, then a
/// 3x3x3 prediction convolution. One instance is shared by all pyramid
/// levels (forward pushes one cache per level; backward pops in reverse).
struct Subnet<F: Elem> {
    convs: Vec<(Conv3d<F>, Relu<F>)>,
    head: Conv3d<F>,
}

impl<F: Elem> Subnet<F> {
    fn new(config: &NetworkConfig, head_outputs: usize, head_init: ConvInit, rng: &mut Initializer) -> Self {
        let mut convs = Vec::with_capacity(config.subnet_depth);
        let mut cin = config.pyramid_channels;
        for _ in 0..config.subnet_depth {
            convs.push((
                Conv3d::new(cin, config.subnet_channels, [3; 3], [1; 3], true, ConvInit::Gaussian01, rng),
                Relu::new(),
            ));
            cin = config.subnet_channels;
        }
        let head = Conv3d::new(cin, head_outputs, [3; 3], [1; 3], true, head_init, rng);
        Self { convs, head }
    }

    fn forward(&mut self, x: &Array5<F>, phase: Phase) -> Array5<F> {
        let mut y = x.clone();
        for (conv, relu) in self.convs.iter_mut() {
            y = relu.forward(&conv.forward(&y, phase), phase);
        }
        self.head.forward(&y, phase)
    }

    fn backward(&mut self, grad: &Array5<F>) -> Array5<F> {
        let mut g = self.head.backward(grad);
        for (conv, relu) in self.convs.iter_mut().rev() {
            g = conv.backward(&relu.backward(&g));
        }
        g
    }
}

impl<F: Elem> VisitParams<F> for Subnet<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        for (i, (conv, _)) in self.convs.iter_mut().enumerate() {
            conv.visit_params(&format!("{prefix}.conv{i}"), f);
        }
        self.head.visit_params(&format!("{prefix}.head"), f);
    }
}

// ---------------------------------------------------------------------------
// Full detector
// ---------------------------------------------------------------------------

pub struct RetinaNet3d<F: Elem> {
    pub config: NetworkConfig,
    backbone: Backbone<F>,
    fpn: Fpn<F>,
    class_subnet: Subnet<F>,
    box_subnet: Subnet<F>,
}

impl<F: Elem> RetinaNet3d<F> {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Initializer::new(config.seed);
        let backbone = Backbone::new(&config, &mut rng)?;
        let stage_channels = backbone.stage_channels;
        let fpn = Fpn::new(&config, stage_channels, &mut rng);
        let a = config.anchors_per_position();
        let class_subnet =
            Subnet::new(&config, a, ConvInit::PriorBias(config.prior_probability), &mut rng);
        let box_subnet = Subnet::new(&config, a * OFFSETS_PER_ANCHOR, ConvInit::Gaussian01, &mut rng);
        Ok(Self { config, backbone, fpn, class_subnet, box_subnet })
    }

    /// Backbone features (C1..C4), exposed for shape checks.
    pub fn backbone_features(&mut self, x: &Array5<F>) -> BackboneFeatures<F> {
        self.backbone.forward(x, Phase::Eval)
    }

    /// Pyramid features P2..P6, exposed for shape checks.
    pub fn pyramid_features(&mut self, x: &Array5<F>) -> PyramidFeatures<F> {
        let feats = self.backbone.forward(x, Phase::Eval);
        self.fpn.forward(&feats, Phase::Eval)
    }

    pub fn forward(&mut self, x: &Array5<F>, phase: Phase) -> Result<DetectorOutput<F>> {
        let (_, c, _, _, _) = x.dim();
        if c != self.config.input_channels {
            return Err(Error::InvalidInput(format!(
                "expected {} input channels, found {c}",
                self.config.input_channels
            )));
        }
        let feats = self.backbone.forward(x, phase);
        let pyramid = self.fpn.forward(&feats, phase);
        let mut levels = Vec::with_capacity(pyramid.levels.len());
        for (level, feat) in &pyramid.levels {
            let class_logits = self.class_subnet.forward(feat, phase);
            let box_offsets = self.box_subnet.forward(feat, phase);
            levels.push((*level, LevelOutput { class_logits, box_offsets }));
        }
        Ok(DetectorOutput { levels })
    }

    /// Backpropagate per-level gradients (ordered P2..P6) and accumulate
    /// parameter gradients. Must follow a `forward(train=true)`.
    pub fn backward(&mut self, grads: DetectorGrads<F>) {
        // Subnet caches are stacked P2..P6; pop in reverse.
        let mut pyramid_grads: Vec<Array5<F>> = Vec::with_capacity(grads.levels.len());
        for (class_grad, box_grad) in grads.levels.iter().rev() {
            let g_feat = self.class_subnet.backward(class_grad) + self.box_subnet.backward(box_grad);
            pyramid_grads.push(g_feat);
        }
        pyramid_grads.reverse();
        let (d2, d3, d4) = self.fpn.backward(pyramid_grads);
        let _ = self.backbone.backward((d2, d3, d4));
    }

    pub fn zero_grad(&mut self) {
        self.visit_params("net", &mut |_, p| p.zero_grad());
    }

    pub fn parameter_count(&mut self) -> usize {
        let mut count = 0usize;
        self.visit_params("net", &mut |_, p| count += p.len());
        count
    }

    pub fn backbone_parameter_count(&mut self) -> usize {
        self.backbone.parameter_count()
    }

    /// Names and element counts of all trainable parameter tensors, in the
    /// stable visit order.
    pub fn parameter_sizes(&mut self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        self.visit_params("net", &mut |name, p| out.push((name, p.len())));
        out
    }

    /// Accumulated gradient of one parameter element (probing hook).
    pub fn gradient_at(&mut self, name: &str, index: usize) -> f64 {
        let mut value = f64::NAN;
        self.visit_params("net", &mut |n, p| {
            if n == name {
                value = p.grad.as_slice().unwrap()[index].as_f64();
            }
        });
        value
    }

    /// Add `delta` to one parameter element (probing hook).
    pub fn nudge_parameter(&mut self, name: &str, index: usize, delta: f64) {
        self.visit_params("net", &mut |n, p| {
            if n == name {
                let v = p.value.as_slice_mut().unwrap();
                v[index] = v[index] + F::of(delta);
            }
        });
    }

    /// Anchors of every level for the given input spatial shape, in output
    /// order (level-major P2..P6, voxel-major inside).
    pub fn anchors_for_input(&self, input_spatial: [usize; 3]) -> Vec<BoundingBox3D> {
        let cfg = self.config.resolved_anchors();
        let mut all = Vec::new();
        for level in PyramidLevel::ALL {
            let stride = cfg.strides[level.index()];
            let shape = ceil_shape(input_spatial, stride);
            all.extend(generate_anchors(level, shape, &cfg));
        }
        all
    }

    /// Decode raw outputs into per-batch-item detections in input-tensor
    /// coordinates: sigmoid scores filtered at `score_threshold`, offsets
    /// decoded against the anchors, NMS across all levels, top
    /// `max_detections` kept.
    pub fn decode_output(
        &self,
        output: &DetectorOutput<F>,
        score_threshold: f64,
        nms_threshold: f64,
        max_detections: usize,
    ) -> Result<Vec<Vec<(BoundingBox3D, f64)>>> {
        let cfg = self.config.resolved_anchors();
        let batch = output.levels[0].1.class_logits.dim().0;
        let mut per_item: Vec<Vec<Detection>> = vec![Vec::new(); batch];

        for (level, out) in &output.levels {
            let spatial = out.spatial();
            let anchors = generate_anchors(*level, spatial, &cfg);
            let a_count = out.anchors_per_position();
            let v_total = spatial[0] * spatial[1] * spatial[2];
            for n in 0..batch {
                let logits = out
                    .class_logits
                    .index_axis(Axis(0), n)
                    .into_shape_with_order((a_count, v_total))
                    .expect("standard layout");
                let offsets = out
                    .box_offsets
                    .index_axis(Axis(0), n)
                    .into_shape_with_order((a_count * OFFSETS_PER_ANCHOR, v_total))
                    .expect("standard layout");
                for v in 0..v_total {
                    for a in 0..a_count {
                        let score = sigmoid(logits[(a, v)].as_f64());
                        if score < score_threshold {
                            continue;
                        }
                        let mut raw = [0.0f64; OFFSETS_PER_ANCHOR];
                        for (j, r) in raw.iter_mut().enumerate() {
                            *r = offsets[(a * OFFSETS_PER_ANCHOR + j, v)].as_f64();
                        }
                        let off = BoxOffsets::from_array(raw);
                        if !off.is_finite() {
                            continue;
                        }
                        let bbox = decode_box(&anchors[v * a_count + a], &off)?;
                        per_item[n].push(Detection::new(bbox, score.clamp(0.0, 1.0), "")?);
                    }
                }
            }
        }

        Ok(per_item
            .into_iter()
            .map(|dets| {
                nms(&dets, nms_threshold)
                    .into_iter()
                    .take(max_detections)
                    .map(|d| (d.bbox, d.score))
                    .collect()
            })
            .collect())
    }

    /// Inference entry point: forward in eval mode + decode.
    pub fn predict(
        &mut self,
        x: &Array5<F>,
        score_threshold: f64,
        nms_threshold: f64,
        max_detections: usize,
    ) -> Result<Vec<Vec<(BoundingBox3D, f64)>>> {
        let output = self.forward(x, Phase::Eval)?;
        self.decode_output(&output, score_threshold, nms_threshold, max_detections)
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// Checkpoint file layout (documented for cross-implementation portability):
/// 8-byte magic `CADENET1`, little-endian u64 manifest length, UTF-8 JSON
/// manifest, then all tensor data as raw little-endian f32 in manifest
/// order. The manifest carries the `NetworkConfig` and one entry per tensor:
/// `{"name", "kind": "param"|"buffer", "shape": [...]}`.
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CADENET1";

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    config: NetworkConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    kind: String,
    shape: Vec<usize>,
}

fn collect_state<F: Elem>(net: &mut RetinaNet3d<F>) -> Vec<(String, String, ArrayD<F>)> {
    let mut tensors: Vec<(String, String, ArrayD<F>)> = Vec::new();
    net.visit_params("net", &mut |name, p| {
        tensors.push((name, "param".into(), p.value.clone()));
    });
    net.visit_buffers("net", &mut |name, b| {
        tensors.push((name, "buffer".into(), b.clone()));
    });
    tensors
}

/// Atomic write (temp file + rename) of config and all weights/buffers.
pub fn save_checkpoint<F: Elem>(net: &mut RetinaNet3d<F>, path: &std::path::Path) -> Result<()> {
    use std::io::Write;
    let tensors = collect_state(net);
    let manifest = CheckpointManifest {
        config: net.config.clone(),
        tensors: tensors
            .iter()
            .map(|(name, kind, v)| TensorEntry {
                name: name.clone(),
                kind: kind.clone(),
                shape: v.shape().to_vec(),
            })
            .collect(),
    };
    let manifest_json = serde_json::to_vec(&manifest)?;

    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut w = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(manifest_json.len() as u64).to_le_bytes())?;
        w.write_all(&manifest_json)?;
        for (_, _, v) in &tensors {
            for &x in v.iter() {
                w.write_all(&(x.as_f64() as f32).to_le_bytes())?;
            }
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint<F: Elem>(path: &std::path::Path) -> Result<RetinaNet3d<F>> {
    use std::io::Read;
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::InvalidInput(format!("{}: not a checkpoint file", path.display())));
    }
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes)?;
    let mut manifest_json = vec![0u8; u64::from_le_bytes(len_bytes) as usize];
    r.read_exact(&mut manifest_json)?;
    let manifest: CheckpointManifest = serde_json::from_slice(&manifest_json)?;

    let mut data: std::collections::HashMap<String, ArrayD<F>> = std::collections::HashMap::new();
    for entry in &manifest.tensors {
        let n: usize = entry.shape.iter().product();
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)?;
        let values: Vec<F> = bytes
            .chunks_exact(4)
            .map(|c| F::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        let arr = ArrayD::from_shape_vec(entry.shape.clone(), values)
            .map_err(|e| Error::InvalidInput(format!("{}: {e}", entry.name)))?;
        data.insert(entry.name.clone(), arr);
    }

    let mut net = RetinaNet3d::<F>::new(manifest.config)?;
    let mut missing: Vec<String> = Vec::new();
    net.visit_params("net", &mut |name, p| match data.remove(&name) {
        Some(v) if v.shape() == p.value.shape() => p.value = v,
        Some(_) => missing.push(format!("{name} (shape mismatch)")),
        None => missing.push(name),
    });
    net.visit_buffers("net", &mut |name, b| match data.remove(&name) {
        Some(v) if v.shape() == b.shape() => *b = v,
        Some(_) => missing.push(format!("{name} (shape mismatch)")),
        None => missing.push(name),
    });
    if !missing.is_empty() {
        return Err(Error::InvalidInput(format!(
            "checkpoint {} does not cover: {}",
            path.display(),
            missing.join(", ")
        )));
    }
    Ok(net)
}

impl<F: Elem> VisitParams<F> for RetinaNet3d<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        self.backbone.visit_params(&format!("{prefix}.backbone"), f);
        self.fpn.visit_params(&format!("{prefix}.fpn"), f);
        self.class_subnet.visit_params(&format!("{prefix}.class"), f);
        self.box_subnet.visit_params(&format!("{prefix}.box"), f);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut ArrayD<F>)) {
        self.backbone.visit_buffers(&format!("{prefix}.backbone"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> NetworkConfig {
        NetworkConfig {
            depth: 14,
            input_channels: 3,
            stem_channels: 8,
            pyramid_channels: 16,
            subnet_channels: 8,
            subnet_depth: 2,
            seed: 42,
            ..NetworkConfig::default()
        }
    }

    #[test]
    fn backbone_strides_are_2_4_8_16() {
        let mut net = RetinaNet3d::<f32>::new(tiny_config()).unwrap();
        let x = Array5::<f32>::zeros((1, 3, 16, 32, 32));
        let feats = net.backbone_features(&x);
        assert_eq!(feats.c1.dim(), (1, 8, 8, 16, 16));
        assert_eq!(feats.c2.dim(), (1, 8, 4, 8, 8));
        assert_eq!(feats.c3.dim(), (1, 16, 2, 4, 4));
        assert_eq!(feats.c4.dim(), (1, 32, 1, 2, 2));
    }

    #[test]
    fn pyramid_levels_match_ceil_strides_on_odd_sizes() {
        let mut net = RetinaNet3d::<f32>::new(tiny_config()).unwrap();
        // 60 is not a power of two: 60 -> 30 -> 15 -> 8 -> 4 -> 2 -> 1.
        let x = Array5::<f32>::zeros((1, 3, 12, 20, 60));
        let pyr = net.pyramid_features(&x);
        let shapes: Vec<_> = pyr.levels.iter().map(|(_, f)| f.dim()).collect();
        assert_eq!(shapes[0], (1, 16, 3, 5, 15)); // P2 = ceil(/4)
        assert_eq!(shapes[1], (1, 16, 2, 3, 8)); // P3 = ceil(/8)
        assert_eq!(shapes[2], (1, 16, 1, 2, 4)); // P4 = ceil(/16)
        assert_eq!(shapes[3], (1, 16, 1, 1, 2)); // P5 = ceil(/32)
        assert_eq!(shapes[4], (1, 16, 1, 1, 1)); // P6 = ceil(/64)
    }

    #[test]
    fn forward_is_finite_on_zero_input_and_batched() {
        let mut net = RetinaNet3d::<f32>::new(tiny_config()).unwrap();
        let x = Array5::<f32>::zeros((2, 3, 8, 16, 16));
        let out = net.forward(&x, Phase::Eval).unwrap();
        assert_eq!(out.levels.len(), 5);
        for (_, level) in &out.levels {
            assert_eq!(level.class_logits.dim().0, 2);
            assert_eq!(level.class_logits.dim().1, 9);
            assert_eq!(level.box_offsets.dim().1, 54);
            assert!(level.class_logits.iter().all(|v| v.is_finite()));
            assert!(level.box_offsets.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn fresh_network_scores_near_the_prior() {
        let mut net = RetinaNet3d::<f32>::new(tiny_config()).unwrap();
        let x = crate::nn::testutil::random_tensor((1, 3, 8, 16, 16), 7).mapv(|v| v as f32);
        let out = net.forward(&x, Phase::Eval).unwrap();
        let mut scores = Vec::new();
        for (_, level) in &out.levels {
            scores.extend(level.class_logits.iter().map(|&z| sigmoid(z as f64)));
        }
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        assert!((mean - 0.01).abs() < 0.005, "mean prior score {mean}");
    }

    #[test]
    fn depth_14_has_fewer_parameters_than_depth_41() {
        let mut c14 = tiny_config();
        c14.depth = 14;
        let mut c41 = tiny_config();
        c41.depth = 41;
        let mut n14 = RetinaNet3d::<f32>::new(c14).unwrap();
        let mut n41 = RetinaNet3d::<f32>::new(c41).unwrap();
        assert!(n14.backbone_parameter_count() < n41.backbone_parameter_count());
        assert!(n14.parameter_count() < n41.parameter_count());
    }

    #[test]
    fn forward_is_deterministic() {
        let mut net = RetinaNet3d::<f32>::new(tiny_config()).unwrap();
        let x = crate::nn::testutil::random_tensor((1, 3, 8, 16, 16), 9).mapv(|v| v as f32);
        let a = net.forward(&x, Phase::Eval).unwrap();
        let b = net.forward(&x, Phase::Eval).unwrap();
        for ((_, la), (_, lb)) in a.levels.iter().zip(&b.levels) {
            assert_eq!(la.class_logits, lb.class_logits);
            assert_eq!(la.box_offsets, lb.box_offsets);
        }
    }

    #[test]
    fn anchor_count_matches_output_positions() {
        let mut net = RetinaNet3d::<f32>::new(tiny_config()).unwrap();
        let x = Array5::<f32>::zeros((1, 3, 8, 16, 16));
        let out = net.forward(&x, Phase::Eval).unwrap();
        let anchors = net.anchors_for_input([8, 16, 16]);
        assert_eq!(anchors.len(), out.total_anchors());
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        use crate::anchors::match_anchors;
        use crate::geometry::BoundingBox3D;
        use crate::losses::{total_loss, total_loss_with_grads, LossConfig};
        use rand::{Rng, SeedableRng};

        let mut cfg = tiny_config();
        cfg.input_channels = 2;
        cfg.anchors.base_sizes = [6.0, 10.0, 16.0, 24.0, 32.0];
        let mut net = RetinaNet3d::<f64>::new(cfg).unwrap();
        let x = crate::nn::testutil::random_tensor((2, 2, 4, 16, 16), 31);

        let anchors = net.anchors_for_input([4, 16, 16]);
        let gts = [
            vec![
                BoundingBox3D::new([0.5, 2.0, 3.0], [3.5, 9.0, 10.0]).unwrap(),
                BoundingBox3D::new([1.0, 8.0, 8.0], [3.0, 14.0, 15.0]).unwrap(),
            ],
            vec![BoundingBox3D::new([0.0, 4.0, 4.0], [2.0, 12.0, 12.0]).unwrap()],
        ];
        let assignments: Vec<_> = gts.iter().map(|g| match_anchors(&anchors, g, 0.2)).collect();
        let loss_cfg = LossConfig::default();

        net.zero_grad();
        let out = net.forward(&x, Phase::Train).unwrap();
        let (breakdown, grads) = total_loss_with_grads(&out, &assignments, &loss_cfg).unwrap();
        assert!(breakdown.total.is_finite() && breakdown.num_positives > 0);
        net.backward(grads);

        // Collect parameter sizes, then probe random weights.
        let mut names: Vec<(String, usize)> = Vec::new();
        net.visit_params("net", &mut |name, p| names.push((name, p.len())));
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(37);
        let eps = 1e-5;
        for probe in 0..10 {
            let (tname, tlen) = &names[rng.gen_range(0..names.len())];
            let idx = rng.gen_range(0..*tlen);
            let mut analytic = 0.0;
            net.visit_params("net", &mut |name, p| {
                if &name == tname {
                    analytic = p.grad.as_slice().unwrap()[idx];
                }
            });
            let mut eval_at = |delta: f64, net: &mut RetinaNet3d<f64>| {
                net.visit_params("net", &mut |name, p| {
                    if &name == tname {
                        p.value.as_slice_mut().unwrap()[idx] += delta;
                    }
                });
                let out = net.forward(&x, Phase::Probe).unwrap();
                let l = total_loss(&out, &assignments, &loss_cfg).unwrap().total;
                net.visit_params("net", &mut |name, p| {
                    if &name == tname {
                        p.value.as_slice_mut().unwrap()[idx] -= delta;
                    }
                });
                l
            };
            let lp = eval_at(eps, &mut net);
            let lm = eval_at(-eps, &mut net);
            let fd = (lp - lm) / (2.0 * eps);
            let denom = fd.abs().max(analytic.abs());
            // Below ~1e-7 the central difference of an O(1) loss at this eps
            // is dominated by rounding; relative error is meaningless there.
            if denom < 1e-7 {
                continue;
            }
            assert!(
                (fd - analytic).abs() / denom < 1e-3,
                "probe {probe} ({tname}[{idx}]): fd={fd:.8e} analytic={analytic:.8e}"
            );
        }
    }

    #[test]
    fn untrained_network_predicts_nothing_above_half() {
        let mut net = RetinaNet3d::<f32>::new(tiny_config()).unwrap();
        let x = crate::nn::testutil::random_tensor((1, 3, 8, 16, 16), 11).mapv(|v| v as f32);
        let dets = net.predict(&x, 0.5, 0.5, 100).unwrap();
        assert!(dets[0].is_empty());
        let none = net.predict(&x, 1.0, 0.5, 100).unwrap();
        assert!(none[0].is_empty());
    }

    #[test]
    fn checkpoint_round_trip_reproduces_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config();
        cfg.seed = 77;
        let mut net = RetinaNet3d::<f32>::new(cfg).unwrap();
        let x = crate::nn::testutil::random_tensor((1, 3, 8, 16, 16), 13).mapv(|v| v as f32);
        // Two train-mode passes so the running stats are non-trivial; each
        // backward pops the caches its forward pushed.
        for _ in 0..2 {
            let out = net.forward(&x, Phase::Train).unwrap();
            let zeros = DetectorGrads {
                levels: out
                    .levels
                    .iter()
                    .map(|(_, l)| {
                        (
                            Array5::zeros(l.class_logits.dim()),
                            Array5::zeros(l.box_offsets.dim()),
                        )
                    })
                    .collect(),
            };
            net.backward(zeros);
        }
        let want = net.forward(&x, Phase::Eval).unwrap();

        let path = dir.path().join("model.cadenet");
        save_checkpoint(&mut net, &path).unwrap();
        let mut back = load_checkpoint::<f32>(&path).unwrap();
        let got = back.forward(&x, Phase::Eval).unwrap();
        for ((_, a), (_, b)) in want.levels.iter().zip(&got.levels) {
            assert_eq!(a.class_logits, b.class_logits);
            assert_eq!(a.box_offsets, b.box_offsets);
        }
    }
}
