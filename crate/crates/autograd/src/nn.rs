//! Parameterized layers. Activations are channels-last throughout.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rand::Rng;

use crate::graph::{Var, GATHER_ZERO};
use crate::params::{normal_tensor, trunc_normal_tensor, ParamId, ParamStore, Session};
use crate::tensor::{zeros, Tensor};
use crate::AutogradError;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Truncated normal with the given standard deviation.
    TruncNormal(f64),
    /// He-normal for ReLU layers, `std = sqrt(2 / fan_in)`.
    Kaiming,
    Zeros,
}

impl Init {
    pub fn tensor(self, rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
        match self {
            Init::TruncNormal(std) => trunc_normal_tensor(rng, shape, std),
            Init::Kaiming => normal_tensor(rng, shape, (2.0 / fan_in as f64).sqrt()),
            Init::Zeros => zeros(shape),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<Self, AutogradError> {
        let weight = store.add(format!("{name}.weight"), init.tensor(rng, &[in_dim, out_dim], in_dim))?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), zeros(&[out_dim]))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let w = s.param(self.weight);
        let y = s.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = s.param(b);
                s.add(y, b)
            }
            None => y,
        }
    }
}

/// Layer normalization over the last axis with learned affine.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self, AutogradError> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(ndarray::IxDyn(&[dim])))?,
            beta: store.add(format!("{name}.beta"), zeros(&[dim]))?,
            eps: 1e-6,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let n = s.layer_norm_last(x, self.eps);
        let g = s.param(self.gamma);
        let b = s.param(self.beta);
        let y = s.mul(n, g);
        s.add(y, b)
    }
}

/// Two-layer perceptron with GELU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        out_init: Init,
        rng: &mut impl Rng,
    ) -> Result<Self, AutogradError> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, true, Init::TruncNormal(0.02), rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, true, out_init, rng)?,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let h = self.fc1.forward(s, x);
        let h = s.gelu(h);
        self.fc2.forward(s, h)
    }
}

type TableKey = (usize, usize, usize);

/// Square-kernel 2-D convolution on `[B, H, W, C]` inputs, lowered to
/// im2col + matmul. Weights are stored as `[k * k * C_in, C_out]` with
/// row index `(ky * k + kx) * C_in + c`.
#[derive(Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    tables: Mutex<HashMap<TableKey, Arc<[u32]>>>,
}

impl Clone for Conv2d {
    fn clone(&self) -> Self {
        Self {
            weight: self.weight,
            bias: self.bias,
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
            tables: Mutex::new(HashMap::new()),
        }
    }
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, AutogradError> {
        let fan_in = kernel * kernel * in_channels;
        let weight = store.add(
            format!("{name}.weight"),
            Init::Kaiming.tensor(rng, &[fan_in, out_channels], fan_in),
        )?;
        let bias = store.add(format!("{name}.bias"), zeros(&[out_channels]))?;
        Ok(Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            tables: Mutex::new(HashMap::new()),
        })
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let out = |n: usize| (n + 2 * self.padding - self.kernel) / self.stride + 1;
        (out(h), out(w))
    }

    fn table(&self, batch: usize, h: usize, w: usize) -> Arc<[u32]> {
        let mut cache = self.tables.lock().expect("conv table cache poisoned");
        cache
            .entry((batch, h, w))
            .or_insert_with(|| {
                im2col_table(batch, h, w, self.in_channels, self.kernel, self.stride, self.padding).into()
            })
            .clone()
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let shape = s.shape(x).to_vec();
        assert_eq!(shape.len(), 4, "conv input must be [B, H, W, C]");
        assert_eq!(shape[3], self.in_channels, "conv input channels");
        let (b, h, w) = (shape[0], shape[1], shape[2]);
        let (ho, wo) = self.output_size(h, w);
        let k2c = self.kernel * self.kernel * self.in_channels;
        let cols = s.gather(x, self.table(b, h, w), &[b, ho, wo, k2c]);
        let wv = s.param(self.weight);
        let y = s.matmul(cols, wv);
        let bv = s.param(self.bias);
        s.add(y, bv)
    }
}

/// Gather table mapping each im2col entry to its source element.
pub fn im2col_table(
    batch: usize,
    h: usize,
    w: usize,
    c: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Vec<u32> {
    let ho = (h + 2 * padding - kernel) / stride + 1;
    let wo = (w + 2 * padding - kernel) / stride + 1;
    let mut table = Vec::with_capacity(batch * ho * wo * kernel * kernel * c);
    for bi in 0..batch {
        for oy in 0..ho {
            for ox in 0..wo {
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        let inside = iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w;
                        for ci in 0..c {
                            if inside {
                                let idx = ((bi * h + iy as usize) * w + ix as usize) * c + ci;
                                table.push(idx as u32);
                            } else {
                                table.push(GATHER_ZERO);
                            }
                        }
                    }
                }
            }
        }
    }
    table
}
