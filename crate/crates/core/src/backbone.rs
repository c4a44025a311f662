//! Small convolutional classifier split at an injection index into a front
//! segment (image to `F_rgb`) and a rear segment (`F_en` to logits).

use facedepth_autograd::nn::{Conv2d, Init, Linear};
use facedepth_autograd::{ParamStore, Session, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::CHANNELS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub channels: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub blocks: Vec<BlockSpec>,
    /// Number of blocks in the front segment.
    pub injection_index: usize,
    /// Hidden width of the classifier head; 0 for a single linear layer.
    pub head_width: usize,
    pub num_classes: usize,
}

impl BackboneConfig {
    pub fn mini() -> Self {
        let b = |channels, stride| BlockSpec { channels, stride };
        Self {
            image_size: 32,
            blocks: vec![b(8, 2), b(16, 1), b(24, 2), b(32, 1), b(32, 2), b(32, 1)],
            injection_index: 3,
            head_width: 32,
            num_classes: 2,
        }
    }

    pub fn full() -> Self {
        let b = |channels, stride| BlockSpec { channels, stride };
        Self {
            image_size: 224,
            blocks: vec![b(16, 2), b(32, 2), b(64, 2), b(64, 1), b(128, 2), b(128, 2)],
            injection_index: 3,
            head_width: 64,
            num_classes: 2,
        }
    }

    /// Spatial size and channel count after each block.
    pub fn block_shapes(&self) -> Vec<(usize, usize)> {
        let mut size = self.image_size;
        self.blocks
            .iter()
            .map(|b| {
                size = (size + 2 - 3) / b.stride + 1;
                (size, b.channels)
            })
            .collect()
    }

    /// `(H, W, C)` of the feature map at the injection point.
    pub fn injection_shape(&self) -> (usize, usize, usize) {
        let (size, c) = self.block_shapes()[self.injection_index - 1];
        (size, size, c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.len() < 2 {
            return Err(Error::config("backbone needs at least two blocks"));
        }
        if self.injection_index == 0 || self.injection_index >= self.blocks.len() {
            return Err(Error::config(format!(
                "injection index {} must lie strictly between 0 and {}",
                self.injection_index,
                self.blocks.len()
            )));
        }
        if self.blocks.iter().any(|b| b.channels == 0 || b.stride == 0) {
            return Err(Error::config("backbone channels and strides must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("classifier needs at least two classes"));
        }
        if self.image_size == 0 || self.block_shapes().iter().any(|&(s, _)| s == 0) {
            return Err(Error::config("backbone feature maps must keep positive size"));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub convs: Vec<Conv2d>,
    pub hidden: Option<Linear>,
    pub classifier: Linear,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, name: &str, config: &BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut cin = CHANNELS;
        let mut convs = Vec::with_capacity(config.blocks.len());
        for (i, b) in config.blocks.iter().enumerate() {
            convs.push(Conv2d::new(store, &format!("{name}.block{i}"), cin, b.channels, 3, b.stride, 1, rng)?);
            cin = b.channels;
        }
        let hidden = if config.head_width > 0 {
            let l = Linear::new(store, &format!("{name}.head.hidden"), cin, config.head_width, true, Init::Kaiming, rng)?;
            cin = config.head_width;
            Some(l)
        } else {
            None
        };
        let classifier = Linear::new(
            store,
            &format!("{name}.head.out"),
            cin,
            config.num_classes,
            true,
            Init::Kaiming,
            rng,
        )?;
        Ok(Self {
            config: config.clone(),
            convs,
            hidden,
            classifier,
        })
    }

    fn run_blocks(&self, s: &mut Session, mut x: Var, range: std::ops::Range<usize>) -> Var {
        for conv in &self.convs[range] {
            let y = conv.forward(s, x);
            x = s.relu(y);
        }
        x
    }

    /// `[B, S, S, 3] -> [B, H, W, C]` at the injection point.
    pub fn forward_front(&self, s: &mut Session, images: Var) -> Result<Var> {
        let shape = s.shape(images);
        let n = self.config.image_size;
        if shape.len() != 4 || shape[1] != n || shape[2] != n || shape[3] != CHANNELS {
            return Err(Error::Shape {
                context: "backbone input",
                expected: vec![0, n, n, CHANNELS],
                found: shape.to_vec(),
            });
        }
        Ok(self.run_blocks(s, images, 0..self.config.injection_index))
    }

    /// `[B, H, W, C] -> [B, classes]`.
    pub fn forward_rear(&self, s: &mut Session, enhanced: Var) -> Result<Var> {
        let (h, w, c) = self.config.injection_shape();
        let shape = s.shape(enhanced).to_vec();
        if shape.len() != 4 || shape[1..] != [h, w, c] {
            return Err(Error::Shape {
                context: "backbone rear input",
                expected: vec![shape.first().copied().unwrap_or(0), h, w, c],
                found: shape,
            });
        }
        let x = self.run_blocks(s, enhanced, self.config.injection_index..self.convs.len());
        let shape = s.shape(x).to_vec();
        let (b, c) = (shape[0], shape[3]);
        let x = s.reshape(x, &[b, shape[1] * shape[2], c]);
        let mut x = s.mean_axis(x, 1, false);
        if let Some(hidden) = &self.hidden {
            let y = hidden.forward(s, x);
            x = s.relu(y);
        }
        Ok(self.classifier.forward(s, x))
    }

    pub fn forward(&self, s: &mut Session, images: Var) -> Result<Var> {
        let f = self.forward_front(s, images)?;
        self.forward_rear(s, f)
    }
}
