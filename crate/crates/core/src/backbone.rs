//! Residual convolutional backbone producing a `G × G` feature grid.

use bicap_tensor::{Element, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Ctx, Kind, NormId, ParamId, ParamStore, Part};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    /// Two 3×3 convolutions.
    Basic,
    /// 1×1 → 3×3 → 1×1 with 4× expansion.
    Bottleneck,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StemKind {
    /// 3×3 stride-2 convolution.
    Conv3x3,
    /// 7×7 stride-2 convolution then 3×3 stride-2 max-pool.
    Conv7x7,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub widths: Vec<usize>,
    pub blocks: Vec<usize>,
    pub block: BlockKind,
    pub stem: StemKind,
    pub image_side: usize,
    pub grid_side: usize,
}

impl BackboneConfig {
    pub fn desk() -> Self {
        BackboneConfig {
            widths: vec![32, 64, 128, 256],
            blocks: vec![2, 2, 2, 2],
            block: BlockKind::Basic,
            stem: StemKind::Conv3x3,
            image_side: 64,
            grid_side: 4,
        }
    }

    /// ResNet-50 layout: 224 px input, 7 × 7 grid of 2048-d features.
    pub fn resnet50() -> Self {
        BackboneConfig {
            widths: vec![64, 128, 256, 512],
            blocks: vec![3, 4, 6, 3],
            block: BlockKind::Bottleneck,
            stem: StemKind::Conv7x7,
            image_side: 224,
            grid_side: 7,
        }
    }

    pub fn widened(&self, factor: usize) -> Self {
        BackboneConfig { widths: self.widths.iter().map(|w| w * factor).collect(), ..self.clone() }
    }

    fn expansion(&self) -> usize {
        match self.block {
            BlockKind::Basic => 1,
            BlockKind::Bottleneck => 4,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.widths.last().copied().unwrap_or(0) * self.expansion()
    }

    pub fn total_stride(&self) -> usize {
        let stem = match self.stem {
            StemKind::Conv3x3 => 2,
            StemKind::Conv7x7 => 4,
        };
        stem << self.widths.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.widths.is_empty() || self.widths.len() != self.blocks.len() {
            return bad(format!("{} stage widths vs {} block counts", self.widths.len(), self.blocks.len()));
        }
        if self.widths.contains(&0) || self.blocks.contains(&0) {
            return bad("stage widths and block counts must be positive".into());
        }
        if self.grid_side == 0 || self.image_side != self.grid_side * self.total_stride() {
            return bad(format!(
                "image side {} is not grid side {} times the total stride {}",
                self.image_side,
                self.grid_side,
                self.total_stride()
            ));
        }
        Ok(())
    }

    /// Every convolution as `(name, in, out, kernel, stride)` in build order.
    pub fn conv_plan(&self) -> Vec<(String, usize, usize, usize, usize)> {
        let mut plan = Vec::new();
        let stem_w = self.widths[0];
        let k = match self.stem {
            StemKind::Conv3x3 => 3,
            StemKind::Conv7x7 => 7,
        };
        plan.push(("stem".to_string(), 3, stem_w, k, 2));
        let e = self.expansion();
        let mut cin = stem_w;
        for (s, (&w, &n)) in self.widths.iter().zip(&self.blocks).enumerate() {
            for b in 0..n {
                let stride = if b == 0 && s > 0 { 2 } else { 1 };
                let name = format!("s{s}.b{b}");
                match self.block {
                    BlockKind::Basic => {
                        plan.push((format!("{name}.conv1"), cin, w, 3, stride));
                        plan.push((format!("{name}.conv2"), w, w, 3, 1));
                    }
                    BlockKind::Bottleneck => {
                        plan.push((format!("{name}.conv1"), cin, w, 1, 1));
                        plan.push((format!("{name}.conv2"), w, w, 3, stride));
                        plan.push((format!("{name}.conv3"), w, w * e, 1, 1));
                    }
                }
                if stride != 1 || cin != w * e {
                    plan.push((format!("{name}.down"), cin, w * e, 1, stride));
                }
                cin = w * e;
            }
        }
        plan
    }

    /// Trainable parameters: conv weights plus one gain and bias per conv's norm.
    pub fn param_count(&self) -> usize {
        self.conv_plan().iter().map(|(_, i, o, k, _)| i * o * k * k + 2 * o).sum()
    }
}

#[derive(Clone, Debug)]
struct ConvBn {
    weight: ParamId,
    norm: NormId,
    gain: ParamId,
    bias: ParamId,
    stride: usize,
    padding: usize,
}

#[derive(Clone, Debug)]
struct Block {
    convs: Vec<ConvBn>,
    down: Option<ConvBn>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    stem: ConvBn,
    stages: Vec<Vec<Block>>,
}

fn conv_bn<T: Element, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    name: &str,
    (cin, cout, k, stride): (usize, usize, usize, usize),
    rng: &mut R,
) -> Result<ConvBn> {
    let fan_in = (cin * k * k) as f64;
    let weight =
        store.add_normal(&format!("backbone.{name}.weight"), &[cout, cin, k, k], (2.0 / fan_in).sqrt(), Part::Backbone, Kind::Weight, rng)?;
    let gain = store.add(&format!("backbone.{name}.bn.gain"), Tensor::ones(&[cout]), Part::Backbone, Kind::NormGain)?;
    let bias = store.add(&format!("backbone.{name}.bn.bias"), Tensor::zeros(&[cout]), Part::Backbone, Kind::NormBias)?;
    let norm = store.add_norm(&format!("backbone.{name}.bn"), cout);
    Ok(ConvBn { weight, norm, gain, bias, stride, padding: k / 2 })
}

impl Backbone {
    pub fn build<T: Element, R: Rng + ?Sized>(config: &BackboneConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let plan = config.conv_plan();
        let mut it = plan.into_iter().peekable();
        let (name, i, o, k, s) = it.next().expect("stem");
        let stem = conv_bn(store, &name, (i, o, k, s), rng)?;
        let mut stages = Vec::new();
        for (si, &n) in config.blocks.iter().enumerate() {
            let mut blocks = Vec::new();
            for b in 0..n {
                let prefix = format!("s{si}.b{b}.");
                let mut convs = Vec::new();
                let mut down = None;
                while let Some((name, ..)) = it.peek() {
                    if !name.starts_with(&prefix) {
                        break;
                    }
                    let (name, i, o, k, s) = it.next().expect("peeked");
                    let c = conv_bn(store, &name, (i, o, k, s), rng)?;
                    if name.ends_with(".down") {
                        down = Some(c);
                    } else {
                        convs.push(c);
                    }
                }
                blocks.push(Block { convs, down });
            }
            stages.push(blocks);
        }
        Ok(Backbone { config: config.clone(), stem, stages })
    }

    fn apply<T: Element>(ctx: &mut Ctx<'_, T>, c: &ConvBn, x: Var) -> Result<Var> {
        let w = ctx.p(c.weight);
        let y = ctx.tape.conv2d(x, w, None, c.stride, c.padding)?;
        ctx.batch_norm(y, c.norm, c.gain, c.bias)
    }

    /// `[B, 3, S, S]` → `[B, G·G, D_I]`, positions row-major over (row, col).
    pub fn forward_features<T: Element>(&self, ctx: &mut Ctx<'_, T>, images: Var) -> Result<Var> {
        let s = ctx.tape.shape(images).to_vec();
        let side = self.config.image_side;
        if s.len() != 4 || s[1] != 3 || s[2] != side || s[3] != side {
            return Err(Error::Mismatch(format!("backbone expects [B, 3, {side}, {side}], got {s:?}")));
        }
        let mut x = Self::apply(ctx, &self.stem, images)?;
        x = ctx.tape.relu(x);
        if self.config.stem == StemKind::Conv7x7 {
            x = ctx.tape.max_pool2d(x, 3, 2, 1)?;
        }
        for stage in &self.stages {
            for block in stage {
                let shortcut = match &block.down {
                    Some(d) => Self::apply(ctx, d, x)?,
                    None => x,
                };
                let mut y = x;
                for (i, c) in block.convs.iter().enumerate() {
                    y = Self::apply(ctx, c, y)?;
                    if i + 1 < block.convs.len() {
                        y = ctx.tape.relu(y);
                    }
                }
                let sum = ctx.tape.add(y, shortcut)?;
                x = ctx.tape.relu(sum);
            }
        }
        let fs = ctx.tape.shape(x).to_vec();
        let g = self.config.grid_side;
        debug_assert_eq!((fs[2], fs[3]), (g, g));
        let flat = ctx.tape.reshape(x, &[fs[0], fs[1], g * g])?;
        Ok(ctx.tape.permute(flat, &[0, 2, 1])?)
    }

    /// Mean over grid positions: `[B, D_I]`.
    pub fn pooled_features<T: Element>(&self, ctx: &mut Ctx<'_, T>, images: Var) -> Result<Var> {
        let grid = self.forward_features(ctx, images)?;
        Ok(ctx.tape.mean_axis(grid, 1)?)
    }
}
