use bicap_tensor::{Element, Mode, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::head::{HeadConfig, TextualHead};
use crate::params::{Ctx, Kind, ParamId, ParamStore, Part};
use crate::rng::{derive, Stream};
use crate::tasks::TaskKind;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
    pub task: TaskKind,
}

/// Module structure; parameters live in a separate [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Net {
    pub config: ModelConfig,
    pub backbone: Backbone,
    /// `D_I → H`, used only by the textual head.
    pub projection: Option<(ParamId, ParamId)>,
    pub head: Option<TextualHead>,
    /// `D_I → V` over pooled features (token classification).
    pub classifier: Option<(ParamId, ParamId)>,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub net: Net,
    pub store: ParamStore<T>,
}

impl ModelConfig {
    pub fn from_run(cfg: &RunConfig, vocab: usize) -> Self {
        ModelConfig { backbone: cfg.backbone_config(), head: cfg.head_config(vocab), task: cfg.train.task }
    }
}

impl Net {
    pub fn build<T: Element>(config: &ModelConfig, store: &mut ParamStore<T>, seed: u64) -> Result<Self> {
        let mut rng = derive(seed, Stream::Init, 0, 0);
        let backbone = Backbone::build(&config.backbone, store, &mut rng)?;
        let d = config.backbone.feature_dim();
        let (projection, head, classifier) = match config.task {
            TaskKind::Tokclf => {
                let w = store.add_normal("classifier.weight", &[d, config.head.vocab], 0.02, Part::Head, Kind::Weight, &mut rng)?;
                let b = store.add("classifier.bias", Tensor::zeros(&[config.head.vocab]), Part::Head, Kind::Bias)?;
                (None, None, Some((w, b)))
            }
            task => {
                let h = config.head.hidden;
                let w = store.add_normal("projection.weight", &[d, h], 0.02, Part::Head, Kind::Weight, &mut rng)?;
                let b = store.add("projection.bias", Tensor::zeros(&[h]), Part::Head, Kind::Bias)?;
                let head = TextualHead::build(&config.head, task == TaskKind::Bicap, store, &mut rng)?;
                (Some((w, b)), Some(head), None)
            }
        };
        Ok(Net { config: config.clone(), backbone, projection, head, classifier })
    }

    pub fn head(&self) -> Result<&TextualHead> {
        self.head.as_ref().ok_or_else(|| Error::Config("model has no textual head".into()))
    }

    /// Projected grid `[B, G·G, H]` for the textual head.
    pub fn image_features<T: Element>(&self, ctx: &mut Ctx<'_, T>, images: Var) -> Result<Var> {
        let grid = self.backbone.forward_features(ctx, images)?;
        self.project(ctx, grid)
    }

    pub fn project<T: Element>(&self, ctx: &mut Ctx<'_, T>, grid: Var) -> Result<Var> {
        let (w, b) = self.projection.ok_or_else(|| Error::Config("model has no projection".into()))?;
        ctx.linear(grid, w, Some(b))
    }
}

impl<T: Element> Model<T> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = Net::build(config, &mut store, seed)?;
        Ok(Model { net, store })
    }

    /// Frozen, evaluation-mode pooled features `[B, D_I]`.
    pub fn pooled_features(&mut self, images: &Tensor<f32>) -> Result<Tensor<T>> {
        let mut ctx = Ctx::new(&mut self.store, Mode::Eval, derive(0, Stream::Dropout, 0, 0)).frozen();
        let x = ctx.tape.input(images.cast::<T>());
        let pooled = self.net.backbone.pooled_features(&mut ctx, x)?;
        Ok(ctx.tape.tensor(pooled))
    }
}
