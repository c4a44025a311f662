//! Face depth map transformer: a ViT-style encoder that regresses one depth
//! value per image patch and exposes its pre-head token features.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use facedepth_autograd::nn::{Init, LayerNorm, Linear, Mlp};
use facedepth_autograd::{ParamId, ParamStore, Session, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::depth_gt::PatchGrid;
use crate::error::{Error, Result};
use crate::raster::{Image, CHANNELS};

const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdmtConfig {
    pub image_size: usize,
    pub patches_per_side: usize,
    pub embed_dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    #[serde(default = "default_true")]
    pub position_embedding: bool,
}

fn default_true() -> bool {
    true
}

impl FdmtConfig {
    /// 224 px input, 14x14 patches, 12 blocks of 8 heads.
    pub fn full() -> Self {
        Self {
            image_size: 224,
            patches_per_side: 14,
            embed_dim: 192,
            blocks: 12,
            heads: 8,
            mlp_ratio: 4,
            position_embedding: true,
        }
    }

    pub fn mini() -> Self {
        Self {
            image_size: 32,
            patches_per_side: 4,
            embed_dim: 32,
            blocks: 2,
            heads: 4,
            mlp_ratio: 2,
            position_embedding: true,
        }
    }

    pub fn validate(&self) -> Result<PatchGrid> {
        if self.blocks == 0 || self.heads == 0 || self.embed_dim == 0 || self.mlp_ratio == 0 {
            return Err(Error::config("fdmt blocks, heads, embed_dim and mlp_ratio must be positive"));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::config(format!(
                "fdmt embed_dim {} is not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        PatchGrid::square(self.image_size, self.patches_per_side)
    }

    pub fn patch_count(&self) -> usize {
        self.patches_per_side * self.patches_per_side
    }

    pub fn patch_len(&self) -> usize {
        let p = self.image_size / self.patches_per_side;
        p * p * CHANNELS
    }
}

/// Split an image into row-major patches, each flattened in `(y, x, c)` order.
pub fn patchify(image: &Image, grid: &PatchGrid) -> Result<Vec<Vec<f32>>> {
    if (image.height(), image.width()) != grid.image_dims() {
        let (h, w) = grid.image_dims();
        return Err(Error::Shape {
            context: "patchify",
            expected: vec![h, w],
            found: vec![image.height(), image.width()],
        });
    }
    Ok((0..grid.count())
        .map(|p| {
            let (y0, y1, x0, x1) = grid.bounds(p);
            let mut patch = Vec::with_capacity((y1 - y0) * (x1 - x0) * CHANNELS);
            for y in y0..y1 {
                for x in x0..x1 {
                    patch.extend_from_slice(&image.pixel(y, x));
                }
            }
            patch
        })
        .collect())
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &[Vec<f32>], grid: &PatchGrid) -> Result<Image> {
    let (h, w) = grid.image_dims();
    let (ph, pw) = grid.patch_dims();
    if patches.len() != grid.count() || patches.iter().any(|p| p.len() != ph * pw * CHANNELS) {
        return Err(Error::contract("patch sequence does not match grid"));
    }
    let mut img = Image::zeros(h, w);
    for (p, patch) in patches.iter().enumerate() {
        let (y0, _, x0, _) = grid.bounds(p);
        for (i, px) in patch.chunks_exact(CHANNELS).enumerate() {
            img.set_pixel(y0 + i / pw, x0 + i % pw, [px[0], px[1], px[2]]);
        }
    }
    Ok(img)
}

/// Gather table turning `[B, H, W, 3]` into `[B, P, patch_len]`, matching
/// [`patchify`]'s ordering.
pub fn patchify_table(batch: usize, grid: &PatchGrid) -> Vec<u32> {
    let (h, w) = grid.image_dims();
    let (ph, pw) = grid.patch_dims();
    let mut table = Vec::with_capacity(batch * h * w * CHANNELS);
    for b in 0..batch {
        for p in 0..grid.count() {
            let (y0, _, x0, _) = grid.bounds(p);
            for dy in 0..ph {
                for dx in 0..pw {
                    for c in 0..CHANNELS {
                        table.push((((b * h + y0 + dy) * w + x0 + dx) * CHANNELS + c) as u32);
                    }
                }
            }
        }
    }
    table
}

/// Multi-head self-attention over `[B, N, E]` tokens.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

/// `[B, N, H * D] -> [B * H, N, D]`.
pub fn split_heads(s: &mut Session, x: Var, heads: usize) -> Var {
    let shape = s.shape(x).to_vec();
    let (b, n, e) = (shape[0], shape[1], shape[2]);
    let x = s.reshape(x, &[b, n, heads, e / heads]);
    let x = s.permute(x, &[0, 2, 1, 3]);
    s.reshape(x, &[b * heads, n, e / heads])
}

/// `[B * H, N, D] -> [B, N, H * D]`.
pub fn merge_heads(s: &mut Session, x: Var, heads: usize) -> Var {
    let shape = s.shape(x).to_vec();
    let (bh, n, d) = (shape[0], shape[1], shape[2]);
    let b = bh / heads;
    let x = s.reshape(x, &[b, heads, n, d]);
    let x = s.permute(x, &[0, 2, 1, 3]);
    s.reshape(x, &[b, n, heads * d])
}

/// Scaled dot-product attention on `[B', N, D]` operands. Returns the
/// attended values and the row-stochastic attention matrix.
pub fn scaled_attention(s: &mut Session, q: Var, k: Var, v: Var, scale: f64) -> (Var, Var) {
    let kt = s.transpose_last(k);
    let scores = s.bmm(q, kt);
    let scores = s.scale(scores, 1.0 / scale.sqrt());
    let attn = s.softmax_last(scores);
    (s.bmm(attn, v), attn)
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        let init = Init::TruncNormal(INIT_STD);
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, true, init, rng)?,
            key: Linear::new(store, &format!("{name}.key"), dim, dim, true, init, rng)?,
            value: Linear::new(store, &format!("{name}.value"), dim, dim, true, init, rng)?,
            out: Linear::new(store, &format!("{name}.out"), dim, dim, true, init, rng)?,
            heads,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> (Var, Var) {
        let head_dim = self.query.out_dim / self.heads;
        let q = self.query.forward(s, x);
        let k = self.key.forward(s, x);
        let v = self.value.forward(s, x);
        let q = split_heads(s, q, self.heads);
        let k = split_heads(s, k, self.heads);
        let v = split_heads(s, v, self.heads);
        let (ctx, attn) = scaled_attention(s, q, k, v, head_dim as f64);
        let ctx = merge_heads(s, ctx, self.heads);
        (self.out.forward(s, ctx), attn)
    }
}

/// Pre-norm encoder block: `x + Attn(LN(x))`, then `+ MLP(LN(.))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: SelfAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim)?,
            attn: SelfAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim)?,
            mlp: Mlp::new(
                store,
                &format!("{name}.mlp"),
                dim,
                dim * mlp_ratio,
                Init::TruncNormal(INIT_STD),
                rng,
            )?,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> (Var, Var) {
        let h = self.norm1.forward(s, x);
        let (h, attn) = self.attn.forward(s, h);
        let x = s.add(x, h);
        let h = self.norm2.forward(s, x);
        let h = self.mlp.forward(s, h);
        (s.add(x, h), attn)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FdmtOutput {
    /// `[B, P]` patch depths in `[0, 1]`.
    pub depth: Var,
    /// `[B, P, E]` pre-head token features.
    pub features: Var,
}

#[derive(Debug)]
pub struct Fdmt {
    pub config: FdmtConfig,
    pub grid: PatchGrid,
    pub patch_embed: Linear,
    pub position: Option<ParamId>,
    pub blocks: Vec<TransformerBlock>,
    pub norm: LayerNorm,
    pub head: Linear,
    tables: Mutex<HashMap<usize, Arc<[u32]>>>,
}

impl Fdmt {
    pub fn new(store: &mut ParamStore, name: &str, config: &FdmtConfig, rng: &mut impl Rng) -> Result<Self> {
        let grid = config.validate()?;
        let e = config.embed_dim;
        let init = Init::TruncNormal(INIT_STD);
        let patch_embed = Linear::new(store, &format!("{name}.patch_embed"), config.patch_len(), e, true, init, rng)?;
        let position = if config.position_embedding {
            Some(store.add(
                format!("{name}.position"),
                init.tensor(rng, &[config.patch_count(), e], e),
            )?)
        } else {
            None
        };
        let blocks = (0..config.blocks)
            .map(|i| TransformerBlock::new(store, &format!("{name}.block{i}"), e, config.heads, config.mlp_ratio, rng))
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(store, &format!("{name}.norm"), e)?;
        let head = Linear::new(store, &format!("{name}.head"), e, 1, true, init, rng)?;
        Ok(Self {
            config: config.clone(),
            grid,
            patch_embed,
            position,
            blocks,
            norm,
            head,
            tables: Mutex::new(HashMap::new()),
        })
    }

    fn check_input(&self, s: &Session, images: Var) -> Result<usize> {
        let shape = s.shape(images);
        let n = self.config.image_size;
        if shape.len() != 4 || shape[1] != n || shape[2] != n || shape[3] != CHANNELS {
            return Err(Error::Shape {
                context: "fdmt input",
                expected: vec![0, n, n, CHANNELS],
                found: shape.to_vec(),
            });
        }
        Ok(shape[0])
    }

    /// Raw patch sequence `[B, P, patch_len]`.
    pub fn patches(&self, s: &mut Session, images: Var) -> Result<Var> {
        let b = self.check_input(s, images)?;
        let table = self
            .tables
            .lock()
            .expect("patch table cache poisoned")
            .entry(b)
            .or_insert_with(|| patchify_table(b, &self.grid).into())
            .clone();
        Ok(s.gather(images, table, &[b, self.grid.count(), self.config.patch_len()]))
    }

    /// Linear patch projection plus learned position embedding.
    pub fn embed(&self, s: &mut Session, patches: Var) -> Var {
        let tokens = self.patch_embed.forward(s, patches);
        match self.position {
            Some(pos) => {
                let pos = s.param(pos);
                s.add(tokens, pos)
            }
            None => tokens,
        }
    }

    /// Encoder up to (and including) the final normalization. Also returns
    /// every block's attention matrix `[B * heads, P, P]`.
    pub fn encode(&self, s: &mut Session, images: Var) -> Result<(Var, Vec<Var>)> {
        let patches = self.patches(s, images)?;
        let mut x = self.embed(s, patches);
        let mut attention = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, a) = block.forward(s, x);
            x = y;
            attention.push(a);
        }
        Ok((self.norm.forward(s, x), attention))
    }

    /// Per-token linear map to one scalar, squashed by a sigmoid: `[B, P, E] -> [B, P]`.
    pub fn depth_head(&self, s: &mut Session, features: Var) -> Var {
        let shape = s.shape(features).to_vec();
        let y = self.head.forward(s, features);
        let y = s.sigmoid(y);
        s.reshape(y, &shape[..2])
    }

    pub fn forward(&self, s: &mut Session, images: Var) -> Result<FdmtOutput> {
        let (features, _) = self.encode(s, images)?;
        let depth = self.depth_head(s, features);
        Ok(FdmtOutput { depth, features })
    }
}
