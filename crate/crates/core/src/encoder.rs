//! Convolutional image encoder producing half-resolution feature volumes.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, SparseRows, Tensor, Var};
use crate::scene::Image;

/// Feature grid of one source view, stored row-major as `[height * width, channels]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVolume {
    pub grid: Tensor,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub view_index: usize,
}

/// A feature volume that lives in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VolumeVar {
    pub var: Var,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl VolumeVar {
    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    pub fn to_volume(&self, g: &Graph, view_index: usize) -> FeatureVolume {
        FeatureVolume { grid: g.tensor(self.var), height: self.height, width: self.width, channels: self.channels, view_index }
    }
}

/// Output extent of a 3x3, padding-1 convolution with the given stride.
pub fn conv_out(extent: usize, stride: usize) -> usize {
    (extent - 1) / stride + 1
}

/// im2col gather for a 3x3 kernel with zero padding 1: output row
/// `(pixel * 9 + tap)` copies input pixel `(y*stride + ky - 1, x*stride + kx - 1)`.
pub fn im2col_map(height: usize, width: usize, stride: usize) -> SparseRows {
    let (ho, wo) = (conv_out(height, stride), conv_out(width, stride));
    let mut b = SparseRows::builder(height * width);
    for oy in 0..ho {
        for ox in 0..wo {
            for ky in 0..3 {
                for kx in 0..3 {
                    let y = (oy * stride + ky) as isize - 1;
                    let x = (ox * stride + kx) as isize - 1;
                    if y >= 0 && x >= 0 && (y as usize) < height && (x as usize) < width {
                        b.copy_row(y as usize * width + x as usize);
                    } else {
                        b.empty_row();
                    }
                }
            }
        }
    }
    b.build()
}

/// 3x3 convolution, padding 1. Weight layout `[9 * in_channels, out_channels]`
/// with the tap index (`ky * 3 + kx`) major.
#[derive(Clone, Copy, Debug)]
pub struct Conv3x3 {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

impl Conv3x3 {
    pub fn new(store: &mut ParamStore, name: &str, in_channels: usize, out_channels: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let fan_in = 9 * in_channels;
        let weight = store.insert_uniform(format!("{name}.weight"), &[fan_in, out_channels], fan_in, rng);
        let bias = store.insert_uniform(format!("{name}.bias"), &[out_channels], fan_in, rng);
        Self { weight, bias, in_channels, out_channels, stride }
    }

    /// `x: [height * width, in_channels]` to `[ho * wo, out_channels]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, height: usize, width: usize) -> Result<(Var, usize, usize)> {
        let map = Arc::new(im2col_map(height, width, self.stride));
        let (ho, wo) = (conv_out(height, self.stride), conv_out(width, self.stride));
        let cols = g.gather_rows(x, map)?;
        let cols = g.reshape(cols, &[ho * wo, 9 * self.in_channels])?;
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        Ok((g.affine(cols, w, b)?, ho, wo))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Encoder {
    pub conv1: Conv3x3,
    pub conv2: Conv3x3,
    pub conv3: Conv3x3,
    pub channels: usize,
}

impl Encoder {
    /// `3 -> d/2 (stride 1) -> ELU -> d (stride 2) -> ELU -> d (stride 1)`.
    pub fn new(store: &mut ParamStore, channels: usize, rng: &mut impl Rng) -> Self {
        let half = (channels / 2).max(1);
        Self {
            conv1: Conv3x3::new(store, "encoder.conv1", 3, half, 1, rng),
            conv2: Conv3x3::new(store, "encoder.conv2", half, channels, 2, rng),
            conv3: Conv3x3::new(store, "encoder.conv3", channels, channels, 1, rng),
            channels,
        }
    }

    /// Encodes an image whose values are mapped from `[0,1]` to `[-1,1]`.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, image: &Image) -> Result<VolumeVar> {
        let data = image.data.iter().map(|v| 2.0 * v - 1.0).collect();
        let x = g.constant_from(&[image.height * image.width, 3], data);
        self.encode_var(g, store, x, image.height, image.width)
    }

    /// Encodes an image already in the graph as `[height * width, 3]`.
    pub fn encode_var(&self, g: &mut Graph, store: &ParamStore, x: Var, height: usize, width: usize) -> Result<VolumeVar> {
        if g.shape(x) != [height * width, 3] {
            return Err(Error::Shape(format!("encoder expects [{}, 3] input, got {:?}", height * width, g.shape(x))));
        }
        let (h, hh, hw) = self.conv1.forward(g, store, x, height, width)?;
        let h = g.elu(h);
        let (h, hh, hw) = self.conv2.forward(g, store, h, hh, hw)?;
        let h = g.elu(h);
        let (h, hh, hw) = self.conv3.forward(g, store, h, hh, hw)?;
        Ok(VolumeVar { var: h, height: hh, width: hw, channels: self.channels })
    }
}

/// Checks that an image matches the camera extents it is paired with.
pub fn check_extents(image: &Image, width: usize, height: usize) -> Result<()> {
    if image.width != width || image.height != height {
        return Err(Error::Shape(format!(
            "image is {}x{} but the camera expects {width}x{height}",
            image.width, image.height
        )));
    }
    Ok(())
}
