//! Reconstruction loss and the two ray regularizers.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{bilinear, project, Camera, Vec3};
use crate::numerics::{Graph, SparseRows, Var};
use crate::scene::{Image, Rgb};

/// Floor applied to target-side probabilities before the logarithm.
pub const KL_Q_MIN: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_geo: f64,
    pub lambda_app: f64,
    pub tau: f64,
    pub eps_color: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_geo: 1e-4, lambda_app: 2e-4, tau: 0.1, eps_color: 1e-3 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_geo >= 0.0 && self.lambda_app >= 0.0 && self.tau >= 0.0 && self.eps_color > 0.0) {
            return Err(Error::InvalidArgument(format!("invalid loss weights {self:?}")));
        }
        Ok(())
    }
}

/// A reference ray and its adjacent partner, as row indices into a batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RayPair {
    pub reference: usize,
    pub adjacent: usize,
}

/// Sum of squared color errors; `rendered` is `[rays, 3]`.
pub fn loss_reconstruction(g: &mut Graph, rendered: Var, target: &[f64]) -> Result<Var> {
    if g.shape(rendered).iter().product::<usize>() != target.len() {
        return Err(Error::Shape(format!("rendered {:?} vs {} target values", g.shape(rendered), target.len())));
    }
    let t = g.constant_from(g.shape(rendered).to_vec().as_slice(), target.to_vec());
    let d = g.sub(rendered, t)?;
    let sq = g.square(d)?;
    Ok(g.sum_all(sq))
}

/// Pairs whose rays both accumulate at least `tau` density.
pub fn geometry_mask(q_reference: f64, q_adjacent: f64, tau: f64) -> bool {
    !(q_reference < tau || q_adjacent < tau)
}

/// `sum M |D_ref - D_adj|` over `pairs`; `depth` is `[rays]` and `density`
/// holds the cumulative densities used for the mask. Masked pairs never enter
/// the graph.
pub fn loss_geometry(g: &mut Graph, depth: Var, density: &[f64], pairs: &[RayPair], tau: f64) -> Result<(Var, Vec<bool>)> {
    let rays = g.shape(depth).iter().product::<usize>();
    let mask: Vec<bool> = pairs.iter().map(|p| geometry_mask(density[p.reference], density[p.adjacent], tau)).collect();
    let kept: Vec<&RayPair> = pairs.iter().zip(&mask).filter(|(_, &m)| m).map(|(p, _)| p).collect();
    if kept.is_empty() {
        return Ok((g.constant_from(&[], vec![0.0]), mask));
    }
    let mut b = SparseRows::builder(rays);
    for p in &kept {
        b.tap(p.reference, 1.0).tap(p.adjacent, -1.0).end_row();
    }
    let d = g.reshape(depth, &[rays, 1])?;
    let diff = g.gather_rows(d, Arc::new(b.build()))?;
    let a = g.abs(diff);
    Ok((g.sum_all(a), mask))
}

/// Color labels for sample points: the average of bilinear lookups into every
/// source image where the point projects in front of the camera and inside
/// the image. A point with no such view is invalid.
pub fn build_pseudo_label(points: &[Vec3], images: &[&Image], cameras: &[Camera]) -> Result<(Vec<Rgb>, Vec<bool>)> {
    if images.len() != cameras.len() {
        return Err(Error::InvalidArgument(format!("{} images but {} cameras", images.len(), cameras.len())));
    }
    let mut labels = Vec::with_capacity(points.len());
    let mut valid = Vec::with_capacity(points.len());
    let mut seen: Vec<Rgb> = Vec::with_capacity(images.len());
    for x in points {
        seen.clear();
        for (img, cam) in images.iter().zip(cameras) {
            let Ok((px, _)) = project(cam, x) else { continue };
            let (c, inside) = bilinear(&img.data, img.width, img.height, 3, px, 1.0);
            if inside {
                seen.push([c[0], c[1], c[2]]);
            }
        }
        if seen.is_empty() {
            labels.push([0.0; 3]);
            valid.push(false);
            continue;
        }
        let mut label = [0.0; 3];
        for (k, l) in label.iter_mut().enumerate() {
            // summing in sorted order keeps the label independent of view order
            let mut terms: Vec<f64> = seen.iter().map(|c| c[k]).collect();
            terms.sort_by(f64::total_cmp);
            *l = terms.iter().sum::<f64>() / seen.len() as f64;
        }
        labels.push(label);
        valid.push(true);
    }
    Ok((labels, valid))
}

/// Per-ray, per-channel distributions over the valid samples:
/// `p_j = (c_j + eps) / sum_k (c_k + eps)`.
pub fn color_distribution(colors: &[f64], valid: &[bool], eps: f64) -> Vec<f64> {
    let total: f64 = colors.iter().zip(valid).filter(|(_, &v)| v).map(|(c, _)| c + eps).sum();
    colors.iter().zip(valid).map(|(c, &v)| if v { (c + eps) / total } else { 0.0 }).collect()
}

/// `sum_j p_j log(p_j / max(q_j, 1e-8))`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(p, _)| **p > 0.0).map(|(p, q)| p * (p / q.max(KL_Q_MIN)).ln()).sum()
}

/// KL divergence from the label color distribution to the rendered-sample
/// color distribution, averaged over channels and summed over rays. `rgb` is
/// `[rays * samples, 3]`; rays without a valid sample are skipped.
pub fn loss_appearance(
    g: &mut Graph,
    rgb: Var,
    samples: usize,
    labels: &[Rgb],
    valid: &[bool],
    eps: f64,
) -> Result<Var> {
    let n = g.shape(rgb)[0];
    if labels.len() != n || valid.len() != n || samples == 0 || n % samples != 0 {
        return Err(Error::Shape(format!("appearance loss: {n} samples, {} labels, {samples} per ray", labels.len())));
    }
    let rays: Vec<usize> = (0..n / samples).filter(|r| valid[r * samples..(r + 1) * samples].iter().any(|&v| v)).collect();
    if rays.is_empty() {
        return Ok(g.constant_from(&[], vec![0.0]));
    }
    let m = rays.len();
    let mut b = SparseRows::builder(n);
    let mut mask = Vec::with_capacity(m * samples);
    let mut p = Vec::with_capacity(m * samples * 3);
    for &r in &rays {
        let span = r * samples..(r + 1) * samples;
        for j in span.clone() {
            if valid[j] {
                b.copy_row(j);
            } else {
                b.empty_row();
            }
            mask.push(if valid[j] { 1.0 } else { 0.0 });
        }
        let dists: Vec<Vec<f64>> = (0..3)
            .map(|k| {
                let c: Vec<f64> = labels[span.clone()].iter().map(|l| l[k]).collect();
                color_distribution(&c, &valid[span.clone()], eps)
            })
            .collect();
        for j in 0..samples {
            p.extend((0..3).map(|k| dists[k][j]));
        }
    }
    let x = g.gather_rows(rgb, Arc::new(b.build()))?;
    let x = g.add_scalar(x, eps);
    let mv = g.constant_from(&[m * samples, 1], mask);
    let num = g.mul(x, mv)?;
    let num = g.reshape(num, &[m, samples, 3])?;
    let den = g.sum_axis(num, 1)?;
    let den = g.reshape(den, &[m, 1, 3])?;
    let q = g.div(num, den)?;
    // max(q, floor) = relu(q - floor) + floor
    let q = g.add_scalar(q, -KL_Q_MIN);
    let q = g.relu(q);
    let q = g.add_scalar(q, KL_Q_MIN);
    let logq = g.log(q);
    let plogp: f64 = p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum();
    let pv = g.constant_from(&[m, samples, 3], p);
    let cross = g.mul(pv, logq)?;
    let cross = g.sum_all(cross);
    let neg = g.neg(cross);
    let kl = g.add_scalar(neg, plogp);
    Ok(g.scale(kl, 1.0 / 3.0))
}

/// `rec + lambda_geo * geo + lambda_app * app`.
pub fn loss_total(g: &mut Graph, rec: Var, geo: Var, app: Var, weights: &LossWeights) -> Result<Var> {
    let geo = g.scale(geo, weights.lambda_geo);
    let app = g.scale(app, weights.lambda_app);
    let s = g.add(rec, geo)?;
    g.add(s, app)
}
