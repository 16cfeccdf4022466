//! Ray sampling and volume compositing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::RadianceOut;
use crate::geometry::{Ray, Vec3};
use crate::numerics::{Graph, Var};
use crate::scene::{AnalyticField, Rgb};

/// Where samples land inside their bins.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Jitter {
    #[default]
    Random,
    /// Bin midpoints and evenly spaced CDF quantiles.
    Midpoint,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub n_coarse: usize,
    pub n_fine: usize,
    #[serde(default)]
    pub jitter: Jitter,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { n_coarse: 32, n_fine: 32, jitter: Jitter::Random }
    }
}

/// One sample per bin of `[t_near, t_far]` split into `n` equal bins; `draw`
/// returns the offset inside each bin in `[0, 1)`.
pub fn stratified_samples(t_near: f64, t_far: f64, n: usize, mut draw: impl FnMut() -> f64) -> Vec<f64> {
    let width = (t_far - t_near) / n as f64;
    (0..n).map(|i| t_near + (i as f64 + draw()) * width).collect()
}

/// Draws `n` samples from the piecewise-constant density over the bins around
/// `t_coarse` (edges at midpoints, outer edges at `t_near` / `t_far`) whose
/// masses are the coarse weights plus a floor of `1e-2 * mean(weights)`.
/// With all-zero weights the density is uniform. `quantile` yields the CDF
/// value for each draw. The result is sorted.
pub fn importance_samples(
    weights: &[f64],
    t_coarse: &[f64],
    t_near: f64,
    t_far: f64,
    n: usize,
    mut quantile: impl FnMut(usize) -> f64,
) -> Vec<f64> {
    let m = t_coarse.len();
    debug_assert_eq!(weights.len(), m);
    if m == 0 || n == 0 {
        return Vec::new();
    }
    let mut edges = Vec::with_capacity(m + 1);
    edges.push(t_near);
    edges.extend(t_coarse.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    edges.push(t_far);

    let clean: Vec<f64> = weights.iter().map(|&w| if w.is_finite() { w.max(0.0) } else { 0.0 }).collect();
    let total: f64 = clean.iter().sum();
    let mass: Vec<f64> = if total > 0.0 {
        let floor = 1e-2 * total / m as f64;
        clean.iter().map(|w| w + floor).collect()
    } else {
        edges.windows(2).map(|e| e[1] - e[0]).collect()
    };
    let total: f64 = mass.iter().sum();
    let mut cdf = Vec::with_capacity(m + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for w in &mass {
        acc += w / total;
        cdf.push(acc);
    }

    let mut out: Vec<f64> = (0..n)
        .map(|k| {
            let u = quantile(k).clamp(0.0, 1.0) * acc;
            let bin = cdf[1..].partition_point(|&c| c < u).min(m - 1);
            let span = cdf[bin + 1] - cdf[bin];
            let frac = if span > 0.0 { ((u - cdf[bin]) / span).clamp(0.0, 1.0) } else { 0.5 };
            edges[bin] + frac * (edges[bin + 1] - edges[bin])
        })
        .collect();
    out.sort_by(f64::total_cmp);
    out
}

/// Sorted union of two sample sets.
pub fn merge_samples(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    out.extend_from_slice(a);
    out.extend_from_slice(b);
    out.sort_by(f64::total_cmp);
    out
}

/// `t_{i+1} - t_i`, with the last interval running to `t_far`.
pub fn deltas(t: &[f64], t_far: f64) -> Vec<f64> {
    let mut d: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
    if let Some(&last) = t.last() {
        d.push((t_far - last).max(0.0));
    }
    d
}

#[derive(Clone, Debug, PartialEq)]
pub struct Composite {
    pub color: Rgb,
    pub depth: f64,
    pub opacity: f64,
    pub density: f64,
    pub weights: Vec<f64>,
}

/// Alpha compositing of one ray: `alpha_i = 1 - exp(-sigma_i delta_i)`,
/// `w_i = T_i alpha_i`, color gets `(1 - opacity) * background` added.
pub fn composite(sigma: &[f64], rgb: &[Rgb], t: &[f64], delta: &[f64], background: Rgb) -> Composite {
    let mut optical = 0.0;
    let mut color = [0.0; 3];
    let (mut depth, mut opacity, mut density) = (0.0, 0.0, 0.0);
    let mut weights = Vec::with_capacity(sigma.len());
    for i in 0..sigma.len() {
        let sd = sigma[i] * delta[i];
        let alpha = 1.0 - (-sd).exp();
        let w = (-optical as f64).exp() * alpha;
        optical += sd;
        for c in 0..3 {
            color[c] += w * rgb[i][c];
        }
        depth += w * t[i];
        opacity += w;
        density += alpha;
        weights.push(w);
    }
    for c in 0..3 {
        color[c] += (1.0 - opacity) * background[c];
    }
    Composite { color, depth, opacity, density, weights }
}

/// A composited batch of `rays` rays with `samples` samples each.
#[derive(Clone, Debug)]
pub struct RaySampleBatch {
    pub rays: usize,
    pub samples: usize,
    /// `[rays * samples]`, ascending per ray.
    pub t: Vec<f64>,
    pub delta: Vec<f64>,
    pub sigma: Var,
    pub rgb: Var,
    /// `[rays, samples]`
    pub weights: Var,
    /// `[rays, 3]`
    pub color: Var,
    /// `[rays]`
    pub depth: Var,
    pub opacity: Var,
    /// Cumulative density `sum_i alpha_i`, `[rays]`.
    pub density: Var,
}

/// Differentiable compositing of `out` (`[rays * samples]` rows) at the sample
/// distances `t`.
pub fn composite_graph(
    g: &mut Graph,
    out: RadianceOut,
    t: Vec<f64>,
    delta: Vec<f64>,
    rays: usize,
    samples: usize,
    background: Rgb,
) -> Result<RaySampleBatch> {
    if t.len() != rays * samples || delta.len() != t.len() {
        return Err(Error::Shape(format!("{} distances for {rays} rays of {samples} samples", t.len())));
    }
    let sigma = g.reshape(out.sigma, &[rays, samples])?;
    let dv = g.constant_from(&[rays, samples], delta.clone());
    let sd = g.mul(sigma, dv)?;
    let neg = g.neg(sd);
    let e = g.exp(neg);
    let ne = g.neg(e);
    let alpha = g.add_scalar(ne, 1.0);
    let cum = g.cumsum_exclusive(sd)?;
    let ncum = g.neg(cum);
    let trans = g.exp(ncum);
    let weights = g.mul(trans, alpha)?;

    let w3 = g.reshape(weights, &[rays, samples, 1])?;
    let rgb = g.reshape(out.rgb, &[rays, samples, 3])?;
    let wc = g.mul(w3, rgb)?;
    let color = g.sum_axis(wc, 1)?;
    let opacity = g.sum_axis(weights, 1)?;
    let op = g.reshape(opacity, &[rays, 1])?;
    let rest = g.neg(op);
    let rest = g.add_scalar(rest, 1.0);
    let bg = g.constant_from(&[1, 3], background.to_vec());
    let bgc = g.mul(rest, bg)?;
    let color = g.add(color, bgc)?;

    let tv = g.constant_from(&[rays, samples], t.clone());
    let wt = g.mul(weights, tv)?;
    let depth = g.sum_axis(wt, 1)?;
    let density = g.sum_axis(alpha, 1)?;
    Ok(RaySampleBatch { rays, samples, t, delta, sigma: out.sigma, rgb: out.rgb, weights, color, depth, opacity, density })
}

/// Anything that maps sample points and view directions to color and density.
pub trait RadianceModel {
    /// `fine` selects the second-stage network where a model has one.
    fn radiance(&self, g: &mut Graph, points: &[Vec3], directions: &[Vec3], fine: bool) -> Result<RadianceOut>;
}

impl RadianceModel for AnalyticField {
    fn radiance(&self, g: &mut Graph, points: &[Vec3], _directions: &[Vec3], _fine: bool) -> Result<RadianceOut> {
        let mut sigma = Vec::with_capacity(points.len());
        let mut rgb = Vec::with_capacity(3 * points.len());
        for x in points {
            let (s, c) = self.eval(x);
            sigma.push(s);
            rgb.extend_from_slice(&c);
        }
        Ok(RadianceOut { rgb: g.constant_from(&[points.len(), 3], rgb), sigma: g.constant_from(&[points.len(), 1], sigma) })
    }
}

/// Coarse pass and, when `n_fine > 0`, the importance-sampled fine pass.
#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub coarse: RaySampleBatch,
    pub fine: Option<RaySampleBatch>,
}

impl RenderOutput {
    /// The pass whose outputs are reported: fine when present.
    pub fn last(&self) -> &RaySampleBatch {
        self.fine.as_ref().unwrap_or(&self.coarse)
    }
}

/// Random stream for ray `index` under `seed`, independent of batching.
pub fn ray_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn sample_points(rays: &[Ray], t: &[f64], samples: usize) -> (Vec<Vec3>, Vec<Vec3>) {
    let mut points = Vec::with_capacity(t.len());
    let mut dirs = Vec::with_capacity(t.len());
    for (r, ray) in rays.iter().enumerate() {
        for &ti in &t[r * samples..(r + 1) * samples] {
            points.push(ray.at(ti));
            dirs.push(ray.direction);
        }
    }
    (points, dirs)
}

/// Renders `rays`; `ray_ids` name each ray's random stream so results do not
/// depend on how rays are grouped into batches.
pub fn render_rays(
    g: &mut Graph,
    rays: &[Ray],
    ray_ids: &[u64],
    model: &dyn RadianceModel,
    config: &SamplingConfig,
    seed: u64,
    background: Rgb,
) -> Result<RenderOutput> {
    if rays.len() != ray_ids.len() {
        return Err(Error::InvalidArgument(format!("{} rays but {} ray ids", rays.len(), ray_ids.len())));
    }
    if config.n_coarse == 0 {
        return Err(Error::InvalidArgument("n_coarse must be at least 1".into()));
    }
    let nc = config.n_coarse;
    let mut rngs: Vec<ChaCha8Rng> = ray_ids.iter().map(|&id| ray_rng(seed, id)).collect();
    let mut t = Vec::with_capacity(rays.len() * nc);
    let mut delta = Vec::with_capacity(rays.len() * nc);
    for (ray, rng) in rays.iter().zip(rngs.iter_mut()) {
        let ts = match config.jitter {
            Jitter::Random => stratified_samples(ray.t_near, ray.t_far, nc, || rng.gen::<f64>()),
            Jitter::Midpoint => stratified_samples(ray.t_near, ray.t_far, nc, || 0.5),
        };
        delta.extend(deltas(&ts, ray.t_far));
        t.extend(ts);
    }
    let (points, dirs) = sample_points(rays, &t, nc);
    let out = model.radiance(g, &points, &dirs, false)?;
    let coarse = composite_graph(g, out, t, delta, rays.len(), nc, background)?;
    if config.n_fine == 0 {
        return Ok(RenderOutput { coarse, fine: None });
    }

    let nf = config.n_fine;
    let ns = nc + nf;
    let w = g.value(coarse.weights).to_vec();
    let mut t = Vec::with_capacity(rays.len() * ns);
    let mut delta = Vec::with_capacity(rays.len() * ns);
    for (r, (ray, rng)) in rays.iter().zip(rngs.iter_mut()).enumerate() {
        let span = r * nc..(r + 1) * nc;
        let (wr, tr) = (&w[span.clone()], &coarse.t[span]);
        let fine = match config.jitter {
            Jitter::Random => importance_samples(wr, tr, ray.t_near, ray.t_far, nf, |_| rng.gen::<f64>()),
            Jitter::Midpoint => importance_samples(wr, tr, ray.t_near, ray.t_far, nf, |k| (k as f64 + 0.5) / nf as f64),
        };
        let merged = merge_samples(tr, &fine);
        delta.extend(deltas(&merged, ray.t_far));
        t.extend(merged);
    }
    let (points, dirs) = sample_points(rays, &t, ns);
    let out = model.radiance(g, &points, &dirs, true)?;
    let fine = composite_graph(g, out, t, delta, rays.len(), ns, background)?;
    Ok(RenderOutput { coarse, fine: Some(fine) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_grad, relative_error, Tensor};

    #[test]
    fn stratified_one_per_bin() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = stratified_samples(2.0, 6.0, 64, || rng.gen());
        assert_eq!(t.len(), 64);
        for (i, ti) in t.iter().enumerate() {
            let lo = 2.0 + i as f64 * 4.0 / 64.0;
            assert!(*ti >= lo && *ti < lo + 4.0 / 64.0);
        }
        let mid = stratified_samples(0.0, 1.0, 4, || 0.5);
        assert_eq!(mid, vec![0.125, 0.375, 0.625, 0.875]);
    }

    #[test]
    fn importance_concentrates_on_heavy_bin() {
        let t: Vec<f64> = stratified_samples(0.0, 1.0, 16, || 0.5);
        let mut w = vec![0.0; 16];
        w[5] = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = importance_samples(&w, &t, 0.0, 1.0, 10_000, |_| rng.gen());
        let (lo, hi) = (0.5 * (t[4] + t[5]), 0.5 * (t[5] + t[6]));
        let inside = s.iter().filter(|&&x| x >= lo && x < hi).count();
        // mass in the bin is 1.01 / 1.16
        assert!(inside as f64 >= 0.9 * 10_000.0, "{inside}");
        assert!(s.windows(2).all(|p| p[0] <= p[1]));
    }

    #[test]
    fn importance_uniform_histogram() {
        let n = 16;
        let t: Vec<f64> = stratified_samples(0.0, 1.0, n, || 0.5);
        let draws = 10_000;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = importance_samples(&vec![0.3; n], &t, 0.0, 1.0, draws, |_| rng.gen());
        let mut counts = vec![0usize; n];
        for x in s {
            counts[((x * n as f64) as usize).min(n - 1)] += 1;
        }
        let p = 1.0 / n as f64;
        let mean = draws as f64 * p;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() <= 3.0 * sd + 1.0, "{c} vs {mean}");
        }
    }

    #[test]
    fn zero_weights_fall_back_to_uniform() {
        let t = [0.1, 0.4, 0.9];
        let s = importance_samples(&[0.0; 3], &t, 0.0, 1.0, 5, |k| (k as f64 + 0.5) / 5.0);
        assert!(s.iter().all(|x| x.is_finite()));
        for (k, x) in s.iter().enumerate() {
            assert!((x - (k as f64 + 0.5) / 5.0).abs() < 1e-12);
        }
        let s = importance_samples(&[f64::NAN, 0.0, 0.0], &t, 0.0, 1.0, 3, |_| 0.5);
        assert!(s.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn composite_empty_ray_shows_background() {
        let c = composite(&[0.0; 4], &[[0.5; 3]; 4], &[1.0, 2.0, 3.0, 4.0], &[1.0; 4], [0.2, 0.3, 0.4]);
        assert_eq!(c.color, [0.2, 0.3, 0.4]);
        assert_eq!((c.depth, c.opacity, c.density), (0.0, 0.0, 0.0));
    }

    #[test]
    fn composite_saturated_first_sample() {
        let rgb = [[0.9, 0.1, 0.4], [0.0, 1.0, 0.0]];
        let c = composite(&[1e4, 5.0], &rgb, &[2.0, 3.0], &[1.0, 1.0], [0.0; 3]);
        assert!((c.weights[0] - 1.0).abs() < 1e-12);
        assert!((c.depth - 2.0).abs() < 1e-12);
        for k in 0..3 {
            assert!((c.color[k] - rgb[0][k]).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_density_slab_opacity() {
        let t = stratified_samples(0.0, 1.0, 256, || 0.0);
        let d = deltas(&t, 1.0);
        let c = composite(&vec![1.0; 256], &vec![[1.0; 3]; 256], &t, &d, [0.0; 3]);
        assert!((c.opacity - (1.0 - (-1.0f64).exp())).abs() < 1e-3);
        assert!((c.weights.iter().sum::<f64>() - c.opacity).abs() < 1e-12);
    }

    #[test]
    fn weights_are_sub_probability_and_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let n = 12;
            let sigma: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..5.0)).collect();
            let t = stratified_samples(0.0, 2.0, n, || rng.gen());
            let d = deltas(&t, 2.0);
            let c = composite(&sigma, &vec![[0.5; 3]; n], &t, &d, [0.0; 3]);
            assert!(c.weights.iter().all(|&w| w >= 0.0));
            let prod: f64 = sigma.iter().zip(&d).map(|(s, dd)| (-s * dd).exp()).product();
            assert!((c.weights.iter().sum::<f64>() - (1.0 - prod)).abs() < 1e-12);
            let mut more = sigma.clone();
            more[rng.gen_range(0..n)] += 1.0;
            assert!(composite(&more, &vec![[0.5; 3]; n], &t, &d, [0.0; 3]).opacity >= c.opacity);
        }
    }

    #[test]
    fn opaque_surface_depth_within_bin() {
        for n in [16, 64, 256] {
            let t = stratified_samples(1.0, 3.0, n, || 0.5);
            let d = deltas(&t, 3.0);
            let sigma: Vec<f64> = t.iter().map(|&x| if x >= 2.2 { 1e4 } else { 0.0 }).collect();
            let c = composite(&sigma, &vec![[1.0; 3]; n], &t, &d, [0.0; 3]);
            assert!((c.depth - 2.2).abs() <= 2.0 / n as f64);
        }
    }

    #[test]
    fn graph_matches_plain_and_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (rays, s) = (2, 5);
        let t: Vec<f64> = (0..rays).flat_map(|_| stratified_samples(0.5, 2.5, s, || 0.3)).collect();
        let d: Vec<f64> = t.chunks(s).flat_map(|c| deltas(c, 2.5)).collect();
        let sigma = Tensor::new(&[rays * s, 1], (0..rays * s).map(|_| rng.gen_range(0.0..3.0)).collect()).unwrap().with_requires_grad();
        let rgb = Tensor::new(&[rays * s, 3], (0..rays * s * 3).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap().with_requires_grad();
        let bg = [0.1, 0.2, 0.3];
        // loss = sum(color * k1) + sum(depth * k2) mixes every output
        let loss = |sig: &Tensor, col: &Tensor, g: &mut Graph| -> (Var, Var, Var) {
            let a = g.leaf(sig);
            let b = g.leaf(col);
            let batch = composite_graph(g, RadianceOut { rgb: b, sigma: a }, t.clone(), d.clone(), rays, s, bg).unwrap();
            let k = g.constant_from(&[rays, 3], vec![0.3, -0.5, 0.7, 0.2, 0.9, -0.4]);
            let cw = g.mul(batch.color, k).unwrap();
            let cs = g.sum_all(cw);
            let ds = g.sum_all(batch.depth);
            let ds = g.scale(ds, 0.25);
            (g.add(cs, ds).unwrap(), a, b)
        };
        let mut g = Graph::new();
        let (l, a, b) = loss(&sigma, &rgb, &mut g);
        g.backward(l).unwrap();
        let ga = Tensor::new(&[rays * s, 1], g.grad(a).unwrap().to_vec()).unwrap();
        let gb = Tensor::new(&[rays * s, 3], g.grad(b).unwrap().to_vec()).unwrap();
        let fa = finite_difference_grad(|x| { let mut g = Graph::new(); let v = loss(x, &rgb, &mut g).0; g.item(v) }, &sigma, 1e-6);
        let fb = finite_difference_grad(|x| { let mut g = Graph::new(); let v = loss(&sigma, x, &mut g).0; g.item(v) }, &rgb, 1e-6);
        assert!(relative_error(ga.data(), fa.data(), 1e-8) < 1e-4);
        assert!(relative_error(gb.data(), fb.data(), 1e-8) < 1e-4);

        let mut g = Graph::new();
        let a = g.leaf(&sigma);
        let b = g.leaf(&rgb);
        let batch = composite_graph(&mut g, RadianceOut { rgb: b, sigma: a }, t.clone(), d.clone(), rays, s, bg).unwrap();
        for r in 0..rays {
            let span = r * s..(r + 1) * s;
            let cols: Vec<Rgb> = rgb.data()[r * s * 3..(r + 1) * s * 3].chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
            let c = composite(&sigma.data()[span.clone()], &cols, &t[span.clone()], &d[span], bg);
            for k in 0..3 {
                assert!((g.value(batch.color)[r * 3 + k] - c.color[k]).abs() < 1e-12);
            }
            assert!((g.value(batch.depth)[r] - c.depth).abs() < 1e-12);
            assert!((g.value(batch.density)[r] - c.density).abs() < 1e-12);
        }
    }

    #[test]
    fn render_rays_is_deterministic_and_sized() {
        let field = AnalyticField::tri_sphere();
        let rays: Vec<Ray> = (0..4)
            .map(|i| Ray::new(Vec3::new(-0.3 + 0.2 * i as f64, 0.0, -4.0), Vec3::new(0.0, 0.0, 1.0), 2.5, 5.5).unwrap())
            .collect();
        let ids = [0, 1, 2, 3];
        let cfg = SamplingConfig { n_coarse: 8, n_fine: 12, jitter: Jitter::Random };
        let mut g = Graph::new();
        let a = render_rays(&mut g, &rays, &ids, &field, &cfg, 7, [0.0; 3]).unwrap();
        let b = render_rays(&mut g, &rays, &ids, &field, &cfg, 7, [0.0; 3]).unwrap();
        let fine = a.fine.as_ref().unwrap();
        assert_eq!(fine.samples, 20);
        assert_eq!(g.value(fine.color), g.value(b.last().color));
        for r in fine.t.chunks(20) {
            assert!(r.windows(2).all(|p| p[0] <= p[1]));
            assert!(r.iter().all(|&x| (2.5..=5.5).contains(&x)));
        }
        // the same ray rendered alone uses the same stream
        let single = render_rays(&mut g, &rays[2..3], &ids[2..3], &field, &cfg, 7, [0.0; 3]).unwrap();
        assert_eq!(g.value(single.last().color), &g.value(fine.color)[6..9]);
    }
}
