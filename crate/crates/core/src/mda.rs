//! Multi-head depth attention.
//!
//! Depth features supply the queries and backbone features supply keys and
//! values. For each head:
//!
//! ```text
//! F_rd  = (F_d W^D)(F_rgb W^R)^T          N x N similarity
//! A_rd  = softmax(F_rd / sqrt(scale))     row-wise over keys
//! head  = A_rd (F_rgb W^V)                N x d
//! ```
//!
//! Heads are concatenated, mapped back to `C` channels by `W^O`, and fused
//! with the input as `F_en = F_rgb + MLP(F'_rgb + F_rgb)`.

use facedepth_autograd::nn::{Init, Mlp};
use facedepth_autograd::{ParamId, ParamStore, Session, Tensor, Var};
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::depth_gt::Plane;
use crate::error::{Error, Result};
use crate::fdmt::{merge_heads, scaled_attention, split_heads};

const INIT_STD: f64 = 0.02;

/// What the similarity logits are divided by (under a square root).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionScale {
    /// Per-head projection width `d`.
    #[default]
    HeadWidth,
    /// Channel count `C` of the backbone features.
    RgbChannels,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MdaConfig {
    pub heads: usize,
    pub head_dim: usize,
    pub rgb_channels: usize,
    pub depth_channels: usize,
    pub mlp_ratio: usize,
    #[serde(default)]
    pub scale: AttentionScale,
}

impl MdaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.head_dim == 0 {
            return Err(Error::config("mda heads and head_dim must be positive"));
        }
        if self.rgb_channels == 0 || self.depth_channels == 0 || self.mlp_ratio == 0 {
            return Err(Error::config("mda channel counts and mlp_ratio must be positive"));
        }
        Ok(())
    }

    pub fn scale_value(&self) -> f64 {
        match self.scale {
            AttentionScale::HeadWidth => self.head_dim as f64,
            AttentionScale::RgbChannels => self.rgb_channels as f64,
        }
    }
}

/// Corner-aligned bilinear interpolation weights, `[dst_h * dst_w, src_h * src_w]`.
pub fn bilinear_matrix(src: (usize, usize), dst: (usize, usize)) -> Result<Array2<f64>> {
    if src.0 == 0 || src.1 == 0 || dst.0 == 0 || dst.1 == 0 {
        return Err(Error::contract("bilinear resize needs non-empty source and target"));
    }
    // (lower index, upper index, upper weight) along one axis
    let axis = |s: usize, d: usize| -> Vec<(usize, usize, f64)> {
        (0..d)
            .map(|i| {
                let pos = if d == 1 || s == 1 {
                    0.0
                } else {
                    i as f64 * (s - 1) as f64 / (d - 1) as f64
                };
                let lo = (pos.floor() as usize).min(s - 1);
                let hi = (lo + 1).min(s - 1);
                (lo, hi, pos - lo as f64)
            })
            .collect()
    };
    let ys = axis(src.0, dst.0);
    let xs = axis(src.1, dst.1);
    let mut m = Array2::zeros((dst.0 * dst.1, src.0 * src.1));
    for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
            let row = oy * dst.1 + ox;
            m[[row, y0 * src.1 + x0]] += (1.0 - wy) * (1.0 - wx);
            m[[row, y0 * src.1 + x1]] += (1.0 - wy) * wx;
            m[[row, y1 * src.1 + x0]] += wy * (1.0 - wx);
            m[[row, y1 * src.1 + x1]] += wy * wx;
        }
    }
    Ok(m)
}

/// Resize a single-channel grid with [`bilinear_matrix`].
pub fn resize_plane(plane: &Plane<f64>, height: usize, width: usize) -> Result<Plane<f64>> {
    let m = bilinear_matrix(plane.dims(), (height, width))?;
    let src = ndarray::ArrayView1::from(plane.as_slice());
    Plane::from_vec(height, width, m.dot(&src).to_vec())
}

/// Resize `[B, h * w, E]` depth features to the backbone's `H x W` grid.
/// Returns the input unchanged when the grids already agree.
pub fn align_depth_features(
    s: &mut Session,
    features: Var,
    src: (usize, usize),
    dst: (usize, usize),
) -> Result<Var> {
    let shape = s.shape(features).to_vec();
    if shape.len() != 3 || shape[1] != src.0 * src.1 {
        return Err(Error::Shape {
            context: "align_depth_features",
            expected: vec![0, src.0 * src.1, 0],
            found: shape,
        });
    }
    if dst.0 == 0 || dst.1 == 0 {
        return Err(Error::contract("depth alignment target must be non-empty"));
    }
    if src == dst {
        return Ok(features);
    }
    let (b, n_src, e) = (shape[0], shape[1], shape[2]);
    let n_dst = dst.0 * dst.1;
    let m = s.input(bilinear_matrix(src, dst)?.into_dyn());
    let x = s.permute(features, &[1, 0, 2]);
    let x = s.reshape(x, &[n_src, b * e]);
    let y = s.matmul(m, x);
    let y = s.reshape(y, &[n_dst, b, e]);
    Ok(s.permute(y, &[1, 0, 2]))
}

/// One depth-attention head on `[B, N, *]` inputs with explicit projection
/// matrices `W^D: [E, d]`, `W^R: [C, d]`, `W^V: [C, d]`. Returns the
/// attended values `[B, N, d]` and the attention `[B, N, N]`.
pub fn depth_attention_head(
    s: &mut Session,
    f_d: Var,
    f_rgb: Var,
    w_depth: Var,
    w_rgb: Var,
    w_value: Var,
    scale: f64,
) -> Result<(Var, Var)> {
    let (qd, kd) = (s.shape(w_depth)[1], s.shape(w_rgb)[1]);
    if qd != kd {
        return Err(Error::Shape {
            context: "depth attention query/key width",
            expected: vec![qd],
            found: vec![kd],
        });
    }
    let (nd, nr) = (s.shape(f_d)[1], s.shape(f_rgb)[1]);
    if nd != nr {
        return Err(Error::Shape {
            context: "depth attention token count",
            expected: vec![nr],
            found: vec![nd],
        });
    }
    let q = s.matmul(f_d, w_depth);
    let k = s.matmul(f_rgb, w_rgb);
    let v = s.matmul(f_rgb, w_value);
    Ok(scaled_attention(s, q, k, v, scale))
}

/// `F_en = F_rgb + MLP(F'_rgb + F_rgb)`.
pub fn fuse(s: &mut Session, f_rgb: Var, f_prime: Var, mlp: &Mlp) -> Result<Var> {
    if s.shape(f_rgb) != s.shape(f_prime) {
        return Err(Error::Shape {
            context: "fuse",
            expected: s.shape(f_rgb).to_vec(),
            found: s.shape(f_prime).to_vec(),
        });
    }
    let mixed = s.add(f_prime, f_rgb);
    let h = mlp.forward(s, mixed);
    Ok(s.add(f_rgb, h))
}

#[derive(Clone, Copy, Debug)]
pub struct MdaOutput {
    /// `[B, N, C]`
    pub enhanced: Var,
    /// `[B * heads, N, N]`
    pub attention: Var,
}

/// Multi-head depth attention with fusion. Per-head projections are stored
/// side by side in one matrix per role, so heads never share weights.
#[derive(Clone, Debug)]
pub struct DepthAttention {
    pub config: MdaConfig,
    pub w_depth: ParamId,
    pub w_rgb: ParamId,
    pub w_value: ParamId,
    pub w_out: ParamId,
    pub mlp: Mlp,
}

impl DepthAttention {
    pub fn new(store: &mut ParamStore, name: &str, config: &MdaConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let init = Init::TruncNormal(INIT_STD);
        let inner = config.heads * config.head_dim;
        let (e, c) = (config.depth_channels, config.rgb_channels);
        Ok(Self {
            config: config.clone(),
            w_depth: store.add(format!("{name}.w_depth"), init.tensor(rng, &[e, inner], e))?,
            w_rgb: store.add(format!("{name}.w_rgb"), init.tensor(rng, &[c, inner], c))?,
            w_value: store.add(format!("{name}.w_value"), init.tensor(rng, &[c, inner], c))?,
            w_out: store.add(format!("{name}.w_out"), init.tensor(rng, &[inner, c], inner))?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), c, c * config.mlp_ratio, init, rng)?,
        })
    }

    /// `f_d: [B, N, E]`, `f_rgb: [B, N, C]` (already aligned).
    pub fn forward(&self, s: &mut Session, f_d: Var, f_rgb: Var) -> Result<MdaOutput> {
        let (ds, rs) = (s.shape(f_d).to_vec(), s.shape(f_rgb).to_vec());
        let cfg = &self.config;
        if ds.len() != 3 || rs.len() != 3 || ds[..2] != rs[..2] {
            return Err(Error::Shape {
                context: "mda inputs",
                expected: rs,
                found: ds,
            });
        }
        if ds[2] != cfg.depth_channels || rs[2] != cfg.rgb_channels {
            return Err(Error::Shape {
                context: "mda channels",
                expected: vec![cfg.depth_channels, cfg.rgb_channels],
                found: vec![ds[2], rs[2]],
            });
        }
        let w_out_rows = s.params().get(self.w_out).shape()[0];
        if w_out_rows != cfg.heads * cfg.head_dim {
            return Err(Error::Shape {
                context: "mda output projection",
                expected: vec![cfg.heads * cfg.head_dim],
                found: vec![w_out_rows],
            });
        }
        let wd = s.param(self.w_depth);
        let wr = s.param(self.w_rgb);
        let wv = s.param(self.w_value);
        let q = s.matmul(f_d, wd);
        let k = s.matmul(f_rgb, wr);
        let v = s.matmul(f_rgb, wv);
        let q = split_heads(s, q, cfg.heads);
        let k = split_heads(s, k, cfg.heads);
        let v = split_heads(s, v, cfg.heads);
        let (heads, attention) = scaled_attention(s, q, k, v, cfg.scale_value());
        let concat = merge_heads(s, heads, cfg.heads);
        let wo = s.param(self.w_out);
        let f_prime = s.matmul(concat, wo);
        let enhanced = fuse(s, f_rgb, f_prime, &self.mlp)?;
        Ok(MdaOutput { enhanced, attention })
    }
}

/// Convenience for tests and diagnostics: the values of a `[.., N, N]`
/// attention tensor that violate row-stochasticity by more than `tol`.
pub fn row_stochastic_violations(attn: &Tensor, tol: f64) -> usize {
    let last = attn.ndim() - 1;
    attn.lanes(ndarray::Axis(last))
        .into_iter()
        .filter(|row| (row.sum() - 1.0).abs() > tol || row.iter().any(|&p| p < 0.0))
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_identity_and_constant() {
        let plane = Plane::from_vec(3, 3, (0..9).map(|v| v as f64).collect()).unwrap();
        assert_eq!(resize_plane(&plane, 3, 3).unwrap(), plane);
        let c = Plane::filled(14, 14, 0.37);
        let r = resize_plane(&c, 28, 28).unwrap();
        assert!(r.as_slice().iter().all(|&v| (v - 0.37).abs() < 1e-12));
        assert!(bilinear_matrix((14, 14), (0, 5)).is_err());
    }

    #[test]
    fn resize_keeps_corners() {
        let plane = Plane::from_vec(14, 14, (0..196).map(|v| (v as f64).sin()).collect()).unwrap();
        let r = resize_plane(&plane, 28, 28).unwrap();
        assert_eq!(r.get(0, 0), plane.get(0, 0));
        assert_eq!(r.get(0, 27), plane.get(0, 13));
        assert_eq!(r.get(27, 0), plane.get(13, 0));
        assert_eq!(r.get(27, 27), plane.get(13, 13));
    }

    #[test]
    fn interpolation_rows_are_convex() {
        let m = bilinear_matrix((4, 5), (9, 7)).unwrap();
        for row in m.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&w| w >= 0.0));
        }
    }

    #[test]
    fn scale_modes() {
        let mut cfg = MdaConfig {
            heads: 8,
            head_dim: 4,
            rgb_channels: 32,
            depth_channels: 16,
            mlp_ratio: 4,
            scale: AttentionScale::HeadWidth,
        };
        assert_eq!(cfg.scale_value(), 4.0);
        cfg.scale = AttentionScale::RgbChannels;
        assert_eq!(cfg.scale_value(), 32.0);
        cfg.heads = 0;
        assert!(cfg.validate().is_err());
    }
}
