//! Positional encoding, pixel-aligned feature lookup and the radiance network.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::FeatureVolume;
use crate::error::{Error, Result};
use crate::geometry::{bilinear_taps, Camera, PixelCoord, Vec3};
use crate::numerics::{Graph, Linear, ParamStore, SparseRows, Var};

/// Feature grids are half the image resolution, so pixel `(u, v)` maps to
/// grid coordinate `(u / 2, v / 2)`.
pub const FEATURE_SCALE: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosEncoding {
    pub frequencies: usize,
    pub omega: f64,
}

impl Default for PosEncoding {
    fn default() -> Self {
        Self { frequencies: 6, omega: 1.5 }
    }
}

impl PosEncoding {
    pub fn dim(&self) -> usize {
        3 + 6 * self.frequencies
    }

    /// `[x, sin(w x), cos(w x), sin(2 w x), cos(2 w x), ...]`, each entry a
    /// block of three coordinates.
    pub fn encode_into(&self, x: &Vec3, out: &mut Vec<f64>) {
        out.extend_from_slice(x.as_slice());
        let mut freq = self.omega;
        for _ in 0..self.frequencies {
            out.extend(x.iter().map(|c| (freq * c).sin()));
            out.extend(x.iter().map(|c| (freq * c).cos()));
            freq *= 2.0;
        }
    }

    pub fn encode(&self, x: &Vec3) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim());
        self.encode_into(x, &mut out);
        out
    }
}

pub fn pos_encode(x: &Vec3, frequencies: usize, omega: f64) -> Vec<f64> {
    PosEncoding { frequencies, omega }.encode(x)
}

/// Pixel coordinate of `x` in `camera`, and whether it is usable: in front of
/// the camera and inside the feature grid. Points behind the camera fall back
/// to the principal point.
fn feature_pixel(camera: &Camera, x: &Vec3) -> (PixelCoord, bool) {
    let p = camera.world_to_camera(x);
    if p.z <= 1e-9 {
        return (PixelCoord::new(camera.cx, camera.cy), false);
    }
    (PixelCoord::new(camera.fx * p.x / p.z + camera.cx, camera.fy * p.y / p.z + camera.cy), true)
}

/// Row map from stacked volumes `[views * positions]` to per-view bilinear
/// features `[views * points]` (view-major), plus one validity flag per row.
pub fn feature_lookup(points: &[Vec3], cameras: &[Camera], height: usize, width: usize) -> (SparseRows, Vec<bool>) {
    let positions = height * width;
    let mut b = SparseRows::builder(cameras.len() * positions);
    let mut valid = Vec::with_capacity(cameras.len() * points.len());
    for (v, cam) in cameras.iter().enumerate() {
        for x in points {
            let (px, front) = feature_pixel(cam, x);
            let (taps, inside) = bilinear_taps(width, height, px, FEATURE_SCALE);
            for (idx, w) in taps {
                if w != 0.0 {
                    b.tap(v * positions + idx, w);
                }
            }
            b.end_row();
            valid.push(front && inside);
        }
    }
    (b.build(), valid)
}

/// Plain lookup of one point in every view: the interpolated feature and its
/// validity flag.
pub fn gather_pixel_features(x: &Vec3, volumes: &[FeatureVolume], cameras: &[Camera]) -> Result<Vec<(Vec<f64>, bool)>> {
    if volumes.len() != cameras.len() {
        return Err(Error::InvalidArgument(format!("{} volumes but {} cameras", volumes.len(), cameras.len())));
    }
    Ok(volumes
        .iter()
        .zip(cameras)
        .map(|(vol, cam)| {
            let (px, front) = feature_pixel(cam, x);
            let (f, inside) =
                crate::geometry::bilinear(vol.grid.data(), vol.width, vol.height, vol.channels, px, FEATURE_SCALE);
            (f, front && inside)
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldConfig {
    pub width: usize,
    pub blocks: usize,
    /// Number of leading blocks run per view before averaging.
    pub merge_after: usize,
    pub encoding: PosEncoding,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self { width: 64, blocks: 5, merge_after: 3, encoding: PosEncoding::default() }
    }
}

#[derive(Clone, Copy, Debug)]
struct ResBlock {
    fc0: Linear,
    fc1: Linear,
}

impl ResBlock {
    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = g.elu(x);
        let h = self.fc0.forward(g, store, h)?;
        let h = g.elu(h);
        let dx = self.fc1.forward(g, store, h)?;
        g.add(x, dx)
    }
}

/// Per-sample outputs of a radiance model: `rgb [P, 3]` in `[0,1]` and
/// `sigma [P, 1]` non-negative.
#[derive(Clone, Copy, Debug)]
pub struct RadianceOut {
    pub rgb: Var,
    pub sigma: Var,
}

#[derive(Clone, Debug)]
pub struct RadianceNet {
    pub config: FieldConfig,
    pub feature_dim: usize,
    input: Linear,
    features: Vec<Linear>,
    blocks: Vec<ResBlock>,
    head: Linear,
}

impl RadianceNet {
    /// Registers parameters under `prefix` (e.g. `"field.coarse."`).
    pub fn new(store: &mut ParamStore, prefix: &str, config: FieldConfig, feature_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        if config.width == 0 || config.merge_after > config.blocks || config.encoding.omega <= 0.0 {
            return Err(Error::InvalidArgument(format!("invalid field configuration {config:?}")));
        }
        let w = config.width;
        let input = Linear::new(store, &format!("{prefix}input"), config.encoding.dim() + 3, w, rng);
        let features = (0..config.merge_after.max(1).min(config.blocks.max(1)))
            .map(|k| Linear::new(store, &format!("{prefix}feature.{k}"), feature_dim, w, rng))
            .collect();
        let blocks = (0..config.blocks)
            .map(|k| ResBlock {
                fc0: Linear::new(store, &format!("{prefix}block.{k}.fc0"), w, w, rng),
                fc1: Linear::new(store, &format!("{prefix}block.{k}.fc1"), w, w, rng),
            })
            .collect();
        let head = Linear::new(store, &format!("{prefix}head"), w, 4, rng);
        Ok(Self { config, feature_dim, input, features, blocks, head })
    }

    /// `inputs [P, enc + 3]` (encoded position and raw direction) and
    /// `features [views * P, feature_dim]`, view-major.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, inputs: Var, features: Var, views: usize) -> Result<RadianceOut> {
        if views == 0 {
            return Err(Error::InvalidArgument("radiance needs at least one view".into()));
        }
        let p = g.shape(inputs)[0];
        let w = self.config.width;
        if g.shape(features) != [views * p, self.feature_dim] {
            return Err(Error::Shape(format!(
                "features {:?}, expected [{}, {}]",
                g.shape(features),
                views * p,
                self.feature_dim
            )));
        }
        let base = self.input.forward(g, store, inputs)?;
        // hidden state is [views * P, W] until merged, then [P, W]
        let mut h = base;
        let mut per_view = false;
        let merge_at = self.config.merge_after.max(1).min(self.blocks.len().max(1));
        for k in 0..self.blocks.len().max(merge_at) {
            if k < merge_at {
                let f = self.features[k].forward(g, store, features)?;
                h = if per_view {
                    g.add(h, f)?
                } else {
                    per_view = true;
                    let b = g.reshape(h, &[1, p, w])?;
                    let f = g.reshape(f, &[views, p, w])?;
                    let s = g.add(b, f)?;
                    g.reshape(s, &[views * p, w])?
                };
            }
            if let Some(block) = self.blocks.get(k) {
                h = block.forward(g, store, h)?;
            }
            if k + 1 == merge_at {
                let v = g.reshape(h, &[views, p, w])?;
                h = g.mean_axis_symmetric(v, 0)?;
            }
        }
        let h = g.elu(h);
        let out = self.head.forward(g, store, h)?;
        let rgb = g.slice(out, 1, 0, 3)?;
        let rgb = g.sigmoid(rgb);
        let sigma = g.slice(out, 1, 3, 1)?;
        let sigma = g.softplus(sigma);
        Ok(RadianceOut { rgb, sigma })
    }
}

/// Builds the `[P, enc + 3]` network input for sample points and their ray
/// directions.
pub fn network_inputs(encoding: &PosEncoding, points: &[Vec3], directions: &[Vec3]) -> Vec<f64> {
    let mut data = Vec::with_capacity(points.len() * (encoding.dim() + 3));
    for (x, d) in points.iter().zip(directions) {
        encoding.encode_into(x, &mut data);
        data.extend_from_slice(d.as_slice());
    }
    data
}

/// Fused source volumes stacked as `[views * positions, channels]` in a graph,
/// together with the cameras used to look them up.
#[derive(Clone, Debug)]
pub struct ViewFeatures<'a> {
    pub stacked: Var,
    pub cameras: &'a [Camera],
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ViewFeatures<'_> {
    pub fn views(&self) -> usize {
        self.cameras.len()
    }

    /// Features at `points` for every view plus validity flags.
    pub fn lookup(&self, g: &mut Graph, points: &[Vec3]) -> Result<(Var, Vec<bool>)> {
        let (map, valid) = feature_lookup(points, self.cameras, self.height, self.width);
        Ok((g.gather_rows(self.stacked, Arc::new(map))?, valid))
    }
}
