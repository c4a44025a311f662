use serde::{Deserialize, Serialize};

use facedepth_autograd::Tensor;

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// Interleaved RGB image (`H x W x 3`), values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * CHANNELS {
            return Err(Error::Shape {
                context: "image",
                expected: vec![height, width, CHANNELS],
                found: vec![data.len()],
            });
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * CHANNELS],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * CHANNELS;
        self.data[i..i + CHANNELS].copy_from_slice(&rgb);
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }
}

/// Stack images into a `[B, H, W, 3]` tensor.
pub fn batch_tensor<'a>(images: impl IntoIterator<Item = &'a Image>) -> Result<Tensor> {
    let mut dims = None;
    let mut data = Vec::new();
    let mut count = 0;
    for img in images {
        let d = (img.height, img.width);
        if *dims.get_or_insert(d) != d {
            return Err(Error::contract("images in a batch must share dimensions"));
        }
        data.extend(img.data.iter().map(|&v| v as f64));
        count += 1;
    }
    let (h, w) = dims.ok_or_else(|| Error::contract("empty image batch"))?;
    Ok(facedepth_autograd::tensor::tensor(&[count, h, w, CHANNELS], data))
}
