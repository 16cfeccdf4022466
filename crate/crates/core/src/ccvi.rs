//! Collaborative cross-view volume integration.
//!
//! Every source view takes a turn as the anchor. The other views are summed
//! into an auxiliary volume, fused with the anchor by a 1x1 convolution, and
//! the fused volume supplies queries and keys for windowed attention over the
//! anchor's own features. A residual feed-forward layer follows.
//!
//! Attention runs on `s x s` core tiles. Keys (and the matching values) come
//! from the tile expanded by a band of `a` positions on each side; band
//! positions that fall outside the volume are masked out of the softmax.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::VolumeVar;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Linear, ParamStore, SparseRows, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CcviConfig {
    pub channels: usize,
    pub key_dim: usize,
    pub ffn_dim: usize,
    pub patch: usize,
    pub band: usize,
}

impl CcviConfig {
    pub fn new(channels: usize) -> Self {
        Self { channels, key_dim: channels, ffn_dim: 2 * channels, patch: 5, band: 3 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.key_dim == 0 || self.patch == 0 || self.channels == 0 || self.ffn_dim == 0 {
            return Err(Error::InvalidArgument(format!("invalid CCVI configuration {self:?}")));
        }
        Ok(())
    }
}

/// One attention window: `s x s` core slots and `(s + 2a)^2` context slots,
/// each holding a flat position in the volume or `None` where it falls outside.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub core: Vec<Option<usize>>,
    pub context: Vec<Option<usize>>,
}

/// Tiles an `height x width` grid into `patch`-sized cores (edge tiles may be
/// partially outside) with a `band`-wide context ring.
pub fn partition_patches(height: usize, width: usize, patch: usize, band: usize) -> Vec<Block> {
    let tiles_y = height.div_ceil(patch);
    let tiles_x = width.div_ceil(patch);
    let side = patch + 2 * band;
    let at = |y: isize, x: isize| -> Option<usize> {
        (y >= 0 && x >= 0 && (y as usize) < height && (x as usize) < width).then(|| y as usize * width + x as usize)
    };
    let mut blocks = Vec::with_capacity(tiles_y * tiles_x);
    for ty in 0..tiles_y {
        for tx in 0..tiles_x {
            let (y0, x0) = ((ty * patch) as isize, (tx * patch) as isize);
            let mut core = Vec::with_capacity(patch * patch);
            for dy in 0..patch as isize {
                for dx in 0..patch as isize {
                    core.push(at(y0 + dy, x0 + dx));
                }
            }
            let mut context = Vec::with_capacity(side * side);
            for dy in 0..side as isize {
                for dx in 0..side as isize {
                    context.push(at(y0 - band as isize + dy, x0 - band as isize + dx));
                }
            }
            blocks.push(Block { core, context });
        }
    }
    blocks
}

/// Gather tables for running all blocks of `views` stacked volumes at once.
#[derive(Clone, Debug)]
pub struct BlockLayout {
    pub blocks: Vec<Block>,
    pub patch: usize,
    pub band: usize,
    /// `[views * blocks * s^2]` rows of core slots.
    pub core_gather: Arc<SparseRows>,
    /// `[views * blocks * (s+2a)^2]` rows of context slots.
    pub context_gather: Arc<SparseRows>,
    /// Per block row of the logits matrix, which context slots exist.
    pub context_mask: Arc<Vec<bool>>,
    /// Back from core slots to `[views * positions]`.
    pub scatter: Arc<SparseRows>,
}

impl BlockLayout {
    pub fn new(views: usize, height: usize, width: usize, patch: usize, band: usize) -> Self {
        let blocks = partition_patches(height, width, patch, band);
        let positions = height * width;
        let (nq, nk) = (patch * patch, (patch + 2 * band).pow(2));
        let mut core = SparseRows::builder(views * positions);
        let mut ctx = SparseRows::builder(views * positions);
        let mut mask = Vec::with_capacity(views * blocks.len() * nq * nk);
        let mut slot_of = vec![0usize; views * positions];
        let mut row = 0;
        for v in 0..views {
            let base = v * positions;
            for b in &blocks {
                for slot in &b.core {
                    match slot {
                        Some(p) => {
                            core.copy_row(base + p);
                            slot_of[base + p] = row;
                        }
                        None => {
                            core.empty_row();
                        }
                    }
                    row += 1;
                }
                for slot in &b.context {
                    match slot {
                        Some(p) => core_or(&mut ctx, Some(base + p)),
                        None => core_or(&mut ctx, None),
                    }
                }
                for _ in 0..nq {
                    mask.extend(b.context.iter().map(Option::is_some));
                }
            }
        }
        let mut scatter = SparseRows::builder(row);
        for &r in &slot_of {
            scatter.copy_row(r);
        }
        Self {
            blocks,
            patch,
            band,
            core_gather: Arc::new(core.build()),
            context_gather: Arc::new(ctx.build()),
            context_mask: Arc::new(mask),
            scatter: Arc::new(scatter.build()),
        }
    }
}

fn core_or(b: &mut crate::numerics::SparseRowsBuilder, src: Option<usize>) {
    match src {
        Some(s) => b.copy_row(s),
        None => b.empty_row(),
    };
}

/// Row map producing, for each anchor `i`, the sum of all other views.
/// Terms are added in ascending view order.
pub fn aux_sum_map(views: usize, positions: usize) -> SparseRows {
    let mut b = SparseRows::builder(views * positions);
    for i in 0..views {
        for p in 0..positions {
            for j in (0..views).filter(|&j| j != i) {
                b.tap(j * positions + p, 1.0);
            }
            b.end_row();
        }
    }
    b.build()
}

#[derive(Clone, Copy, Debug)]
pub struct Ccvi {
    pub config: CcviConfig,
    pub reduce: Linear,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

/// Anchor volumes paired with the sums of their auxiliary views, stacked as
/// `[views * positions, channels]`.
#[derive(Clone, Copy, Debug)]
pub struct AnchorAux {
    pub anchors: Var,
    pub auxiliary: Var,
    pub views: usize,
}

impl Ccvi {
    pub fn new(store: &mut ParamStore, config: CcviConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.channels;
        Ok(Self {
            config,
            reduce: Linear::new(store, "ccvi.reduce", 2 * d, d, rng),
            query: Linear::new(store, "ccvi.query", d, config.key_dim, rng),
            key: Linear::new(store, "ccvi.key", d, config.key_dim, rng),
            value: Linear::new(store, "ccvi.value", d, d, rng),
            ffn_in: Linear::new(store, "ccvi.ffn_in", d, config.ffn_dim, rng),
            ffn_out: Linear::new(store, "ccvi.ffn_out", config.ffn_dim, d, rng),
        })
    }

    /// Stacks the volumes and forms every anchor/auxiliary pair at once.
    pub fn split_anchor_aux(g: &mut Graph, volumes: &[VolumeVar]) -> Result<AnchorAux> {
        let first = volumes.first().ok_or_else(|| Error::InvalidArgument("CCVI needs at least one volume".into()))?;
        for v in volumes {
            if (v.height, v.width, v.channels) != (first.height, first.width, first.channels) {
                return Err(Error::Shape(format!(
                    "CCVI volumes differ: {}x{}x{} vs {}x{}x{}",
                    v.height, v.width, v.channels, first.height, first.width, first.channels
                )));
            }
        }
        let vars: Vec<Var> = volumes.iter().map(|v| v.var).collect();
        let anchors = if vars.len() == 1 { vars[0] } else { g.concat(&vars, 0)? };
        let map = Arc::new(aux_sum_map(volumes.len(), first.positions()));
        let auxiliary = g.gather_rows(anchors, map)?;
        Ok(AnchorAux { anchors, auxiliary, views: volumes.len() })
    }

    /// `Conv([anchor, aux])`: channel concatenation followed by a 1x1 reduction.
    pub fn fuse_aux(&self, g: &mut Graph, store: &ParamStore, anchors: Var, auxiliary: Var) -> Result<Var> {
        let cat = g.concat(&[anchors, auxiliary], 1)?;
        self.reduce.forward(g, store, cat)
    }

    /// Windowed attention: queries and keys from `fused`, values from `anchors`.
    /// Returns the attended features at every position and the attention
    /// weights `[views * blocks, s^2, (s+2a)^2]`.
    pub fn avgi(&self, g: &mut Graph, store: &ParamStore, anchors: Var, fused: Var, layout: &BlockLayout) -> Result<(Var, Var)> {
        let nb = layout.core_gather.n_out() / (layout.patch * layout.patch);
        let (nq, nk) = (layout.patch * layout.patch, (layout.patch + 2 * layout.band).pow(2));
        let dk = self.config.key_dim;
        let d = self.config.channels;
        let q_all = self.query.forward(g, store, fused)?;
        let k_all = self.key.forward(g, store, fused)?;
        let v_all = self.value.forward(g, store, anchors)?;
        let q = g.gather_rows(q_all, layout.core_gather.clone())?;
        let q = g.reshape(q, &[nb, nq, dk])?;
        let k = g.gather_rows(k_all, layout.context_gather.clone())?;
        let k = g.reshape(k, &[nb, nk, dk])?;
        let v = g.gather_rows(v_all, layout.context_gather.clone())?;
        let v = g.reshape(v, &[nb, nk, d])?;
        let logits = g.matmul_ex(q, k, true)?;
        let logits = g.scale(logits, 1.0 / (dk as f64).sqrt());
        let attn = g.softmax_masked(logits, Some(layout.context_mask.clone()))?;
        let out = g.matmul(attn, v)?;
        let out = g.reshape(out, &[nb * nq, d])?;
        Ok((g.gather_rows(out, layout.scatter.clone())?, attn))
    }

    /// Fuses `volumes`; output `i` corresponds to input view `i`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, volumes: &[VolumeVar]) -> Result<Vec<VolumeVar>> {
        let pair = Self::split_anchor_aux(g, volumes)?;
        let first = volumes[0];
        if first.channels != self.config.channels {
            return Err(Error::Shape(format!("CCVI expects {} channels, volumes have {}", self.config.channels, first.channels)));
        }
        let layout = BlockLayout::new(pair.views, first.height, first.width, self.config.patch, self.config.band);
        let fused = self.fuse_aux(g, store, pair.anchors, pair.auxiliary)?;
        let (attended, _) = self.avgi(g, store, pair.anchors, fused, &layout)?;
        let anchored = g.add(attended, pair.anchors)?;
        let h = self.ffn_in.forward(g, store, anchored)?;
        let h = g.elu(h);
        let h = self.ffn_out.forward(g, store, h)?;
        let out = g.add(h, anchored)?;
        let positions = first.positions();
        (0..pair.views)
            .map(|i| {
                let var = if pair.views == 1 { out } else { g.slice(out, 0, i * positions, positions)? };
                Ok(VolumeVar { var, ..first })
            })
            .collect()
    }
}
