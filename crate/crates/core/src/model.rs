//! The full detector: depth transformer, backbone front, fusion at the
//! injection point, backbone rear.

use facedepth_autograd::nn::{Init, Linear};
use facedepth_autograd::{ParamStore, Session, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::fdmt::{Fdmt, FdmtConfig, FdmtOutput};
use crate::mda::{align_depth_features, AttentionScale, DepthAttention, MdaConfig};
use crate::seeding::derive_seed;

/// How depth information enters the backbone.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// Backbone features pass through unchanged.
    None,
    /// Multi-head depth attention on the transformer's pre-head features.
    #[default]
    Mda,
    /// Predicted patch depth concatenated as an extra channel.
    ConcatDepth,
    /// The attention block with backbone features as queries (no depth).
    SelfAttention,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MdaSettings {
    pub heads: usize,
    pub head_dim: usize,
    pub mlp_ratio: usize,
    #[serde(default)]
    pub scale: AttentionScale,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub fdmt: FdmtConfig,
    pub backbone: BackboneConfig,
    pub mda: MdaSettings,
    pub use_fdmt: bool,
    pub fusion: Fusion,
}

impl ModelConfig {
    pub fn mini() -> Self {
        Self {
            fdmt: FdmtConfig::mini(),
            backbone: BackboneConfig::mini(),
            mda: MdaSettings {
                heads: 4,
                head_dim: 8,
                mlp_ratio: 2,
                scale: AttentionScale::HeadWidth,
            },
            use_fdmt: true,
            fusion: Fusion::Mda,
        }
    }

    pub fn full() -> Self {
        Self {
            fdmt: FdmtConfig::full(),
            backbone: BackboneConfig::full(),
            mda: MdaSettings {
                heads: 8,
                head_dim: 8,
                mlp_ratio: 4,
                scale: AttentionScale::HeadWidth,
            },
            use_fdmt: true,
            fusion: Fusion::Mda,
        }
    }

    pub fn image_size(&self) -> usize {
        self.backbone.image_size
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.use_fdmt {
            self.fdmt.validate()?;
            if self.fdmt.image_size != self.backbone.image_size {
                return Err(Error::config(format!(
                    "fdmt image size {} differs from backbone image size {}",
                    self.fdmt.image_size, self.backbone.image_size
                )));
            }
        }
        if matches!(self.fusion, Fusion::Mda | Fusion::ConcatDepth) && !self.use_fdmt {
            return Err(Error::config(format!(
                "fusion {:?} needs depth features but the depth transformer is disabled",
                self.fusion
            )));
        }
        if matches!(self.fusion, Fusion::Mda | Fusion::SelfAttention) {
            self.mda_config().validate()?;
        }
        Ok(())
    }

    pub fn mda_config(&self) -> MdaConfig {
        let (_, _, c) = self.backbone.injection_shape();
        let depth_channels = match self.fusion {
            Fusion::SelfAttention => c,
            _ => self.fdmt.embed_dim,
        };
        MdaConfig {
            heads: self.mda.heads,
            head_dim: self.mda.head_dim,
            rgb_channels: c,
            depth_channels,
            mlp_ratio: self.mda.mlp_ratio,
            scale: self.mda.scale,
        }
    }
}

#[derive(Debug)]
pub enum FusionModule {
    Identity,
    Mda(DepthAttention),
    Concat(Linear),
    SelfAttention(DepthAttention),
}

#[derive(Clone, Copy, Debug)]
pub struct Classified {
    pub logits: Var,
    /// `[B, N, C]` backbone features at the injection point.
    pub rgb: Var,
    /// `[B, N, C]` after fusion.
    pub enhanced: Var,
    /// `[B * heads, N, N]` when an attention fusion is active.
    pub attention: Option<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub classified: Classified,
    pub depth: Option<FdmtOutput>,
}

impl Forward {
    pub fn logits(&self) -> Var {
        self.classified.logits
    }
}

#[derive(Debug)]
pub struct Detector {
    pub config: ModelConfig,
    pub fdmt: Option<Fdmt>,
    pub backbone: Backbone,
    pub fusion: FusionModule,
}

impl Detector {
    /// Build and initialize parameters. Each component draws from its own
    /// seed stream, so toggling one component leaves the others' initial
    /// weights unchanged.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let rng_for = |name: &str| ChaCha8Rng::seed_from_u64(derive_seed(seed, name));
        let backbone = Backbone::new(&mut store, "backbone", &config.backbone, &mut rng_for("backbone"))?;
        let fdmt = if config.use_fdmt {
            Some(Fdmt::new(&mut store, "fdmt", &config.fdmt, &mut rng_for("fdmt"))?)
        } else {
            None
        };
        let mut frng = rng_for("fusion");
        let fusion = match config.fusion {
            Fusion::None => FusionModule::Identity,
            Fusion::Mda => FusionModule::Mda(DepthAttention::new(&mut store, "fusion", &config.mda_config(), &mut frng)?),
            Fusion::SelfAttention => {
                FusionModule::SelfAttention(DepthAttention::new(&mut store, "fusion", &config.mda_config(), &mut frng)?)
            }
            Fusion::ConcatDepth => {
                let (_, _, c) = config.backbone.injection_shape();
                FusionModule::Concat(Linear::new(
                    &mut store,
                    "fusion.concat",
                    c + 1,
                    c,
                    true,
                    Init::TruncNormal(0.02),
                    &mut frng,
                )?)
            }
        };
        Ok((
            Self {
                config: config.clone(),
                fdmt,
                backbone,
                fusion,
            },
            store,
        ))
    }

    fn depth_grid(&self) -> (usize, usize) {
        let g = self.config.fdmt.patches_per_side;
        (g, g)
    }

    /// Backbone classification with the fusion block at the injection point.
    /// `depth` must be present when the fusion consumes depth.
    pub fn classify(&self, s: &mut Session, images: Var, depth: Option<&FdmtOutput>) -> Result<Classified> {
        let front = self.backbone.forward_front(s, images)?;
        let shape = s.shape(front).to_vec();
        let (b, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
        let rgb = s.reshape(front, &[b, h * w, c]);
        let need_depth = || Error::contract("fusion requires depth features but none were supplied");
        let (enhanced, attention) = match &self.fusion {
            FusionModule::Identity => (rgb, None),
            FusionModule::Mda(mda) => {
                let d = depth.ok_or_else(need_depth)?;
                let f_d = align_depth_features(s, d.features, self.depth_grid(), (h, w))?;
                let out = mda.forward(s, f_d, rgb)?;
                (out.enhanced, Some(out.attention))
            }
            FusionModule::SelfAttention(mda) => {
                let out = mda.forward(s, rgb, rgb)?;
                (out.enhanced, Some(out.attention))
            }
            FusionModule::Concat(proj) => {
                let d = depth.ok_or_else(need_depth)?;
                let p = s.shape(d.depth)[1];
                let scalar = s.reshape(d.depth, &[b, p, 1]);
                let scalar = align_depth_features(s, scalar, self.depth_grid(), (h, w))?;
                let cat = s.concat(&[rgb, scalar], 2);
                let delta = proj.forward(s, cat);
                (s.add(rgb, delta), None)
            }
        };
        let spatial = s.reshape(enhanced, &[b, h, w, c]);
        let logits = self.backbone.forward_rear(s, spatial)?;
        Ok(Classified {
            logits,
            rgb,
            enhanced,
            attention,
        })
    }

    pub fn forward(&self, s: &mut Session, images: Var) -> Result<Forward> {
        let depth = match &self.fdmt {
            Some(f) => Some(f.forward(s, images)?),
            None => None,
        };
        let classified = self.classify(s, images, depth.as_ref())?;
        Ok(Forward { classified, depth })
    }

    /// Probability of the fake class for each image in `[B, S, S, 3]`.
    pub fn predict_proba(&self, params: &ParamStore, images: Tensor) -> Result<Vec<f64>> {
        let mut s = Session::inference(params);
        let x = s.input(images);
        let out = self.forward(&mut s, x)?;
        Ok(fake_probabilities(s.value(out.logits())))
    }
}

/// Softmax probability of class 1 for each row of `[B, 2]` logits.
pub fn fake_probabilities(logits: &Tensor) -> Vec<f64> {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            (row[1] - m).exp() / z
        })
        .collect()
}
