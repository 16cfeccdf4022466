//! Analytic scenes with closed-form density and color, a quadrature oracle
//! renderer, dataset generation and persistence.

mod io;

pub use io::{load_dataset, read_depth_sidecar, read_png, save_dataset, write_depth_sidecar, write_png, MANIFEST_FILE, MANIFEST_VERSION};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ray_for_pixel, Camera, PixelCoord, Ray, Vec3};

pub type Rgb = [f64; 3];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Sphere { radius: f64 },
    /// Axis-aligned box given by its half extents.
    Cuboid { half_extents: [f64; 3] },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub center: [f64; 3],
    /// Peak density per world unit (reached `shell` inside the surface).
    pub density: f64,
    pub color: Rgb,
    /// Width of the linear density ramp at the surface, as a fraction of the
    /// primitive's radius (smallest half extent for boxes). Zero gives a hard edge.
    pub shell: f64,
    /// View-independent diffuse shading against the field's light direction.
    pub lambertian: bool,
}

impl Primitive {
    pub fn sphere(center: [f64; 3], radius: f64, density: f64, color: Rgb) -> Self {
        Self { shape: Shape::Sphere { radius }, center, density, color, shell: 0.1, lambertian: false }
    }

    pub fn cuboid(center: [f64; 3], half_extents: [f64; 3], density: f64, color: Rgb) -> Self {
        Self { shape: Shape::Cuboid { half_extents }, center, density, color, shell: 0.1, lambertian: false }
    }

    fn size(&self) -> f64 {
        match self.shape {
            Shape::Sphere { radius } => radius,
            Shape::Cuboid { half_extents: h } => h[0].min(h[1]).min(h[2]),
        }
    }

    /// Distance from `x` to the surface measured inward (negative outside),
    /// and the outward normal of the nearest face.
    fn inside_distance(&self, x: &Vec3) -> (f64, Vec3) {
        let c = Vec3::from(self.center);
        let d = x - c;
        match self.shape {
            Shape::Sphere { radius } => {
                let n = d.norm();
                let normal = if n > 0.0 { d / n } else { Vec3::z() };
                (radius - n, normal)
            }
            Shape::Cuboid { half_extents: h } => {
                let mut best = f64::INFINITY;
                let mut normal = Vec3::z();
                for axis in 0..3 {
                    let gap = h[axis] - d[axis].abs();
                    if gap < best {
                        best = gap;
                        normal = Vec3::zeros();
                        normal[axis] = d[axis].signum();
                    }
                }
                (best, normal)
            }
        }
    }

    pub fn contains(&self, x: &Vec3) -> bool {
        self.inside_distance(x).0 >= 0.0
    }

    fn density_at(&self, inside: f64) -> f64 {
        if inside < 0.0 {
            return 0.0;
        }
        let width = self.shell * self.size();
        if width <= 0.0 {
            self.density
        } else {
            self.density * (inside / width).min(1.0)
        }
    }

    fn shaded_color(&self, normal: &Vec3, light: &Vec3) -> Rgb {
        if !self.lambertian {
            return self.color;
        }
        let k = AMBIENT + (1.0 - AMBIENT) * normal.dot(light).max(0.0);
        self.color.map(|c| c * k)
    }
}

const AMBIENT: f64 = 0.35;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyticField {
    pub primitives: Vec<Primitive>,
    pub background: Rgb,
    /// Unit direction towards the light used by lambertian primitives.
    pub light: [f64; 3],
}

impl AnalyticField {
    pub fn new(primitives: Vec<Primitive>) -> Result<Self> {
        let field = Self { primitives, background: [0.0; 3], light: normalized([0.4, -0.5, 0.77]) };
        field.validate()?;
        Ok(field)
    }

    pub fn validate(&self) -> Result<()> {
        for (k, p) in self.primitives.iter().enumerate() {
            if !(p.density >= 0.0) {
                return Err(Error::InvalidArgument(format!("primitive {k}: density must be >= 0")));
            }
            if p.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::InvalidArgument(format!("primitive {k}: color outside [0,1]")));
            }
            if !(p.shell >= 0.0) || !(p.size() > 0.0) {
                return Err(Error::InvalidArgument(format!("primitive {k}: invalid size or shell")));
            }
        }
        Ok(())
    }

    /// Three non-overlapping shaded spheres of distinct radii inside the unit cube.
    pub fn tri_sphere() -> Self {
        let mut prims = vec![
            Primitive::sphere([-0.35, -0.2, 0.0], 0.38, 40.0, [0.9, 0.2, 0.15]),
            Primitive::sphere([0.4, 0.3, 0.05], 0.27, 40.0, [0.2, 0.85, 0.3]),
            Primitive::sphere([0.15, -0.45, 0.4], 0.18, 40.0, [0.2, 0.35, 0.95]),
        ];
        prims.iter_mut().for_each(|p| p.lambertian = true);
        Self::new(prims).expect("valid preset")
    }

    /// Seeded random collection of spheres and boxes inside the unit cube.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f1e1d);
        let count = rng.gen_range(2..=4);
        let mut prims: Vec<Primitive> = Vec::new();
        let mut attempts = 0;
        while prims.len() < count && attempts < 1000 {
            attempts += 1;
            let size = rng.gen_range(0.15..0.35);
            let center = [0; 3].map(|_| rng.gen_range(-0.55..0.55));
            let color = [0; 3].map(|_| rng.gen_range(0.1..0.95));
            let p = if rng.gen_bool(0.7) {
                Primitive::sphere(center, size, 40.0, color)
            } else {
                Primitive::cuboid(center, [size, size * rng.gen_range(0.6..1.0), size * rng.gen_range(0.6..1.0)], 40.0, color)
            };
            let clear = prims.iter().all(|q| {
                let d = (Vec3::from(q.center) - Vec3::from(p.center)).norm();
                d > (q.size() + p.size()) * 1.8
            });
            if clear {
                prims.push(Primitive { lambertian: true, ..p });
            }
        }
        Self::new(prims).expect("valid random field")
    }

    /// Density and color at `x`.
    ///
    /// Color is the density-weighted mean of the primitives covering `x`; where
    /// the covering density is zero (exactly on a soft edge) the first covering
    /// primitive's color is used, and the background elsewhere.
    pub fn eval(&self, x: &Vec3) -> (f64, Rgb) {
        let light = Vec3::from(self.light);
        let mut sigma = 0.0;
        let mut acc = [0.0; 3];
        let mut first_hit: Option<Rgb> = None;
        for p in &self.primitives {
            let (inside, normal) = p.inside_distance(x);
            if inside < 0.0 {
                continue;
            }
            let color = p.shaded_color(&normal, &light);
            first_hit.get_or_insert(color);
            let s = p.density_at(inside);
            sigma += s;
            for (a, c) in acc.iter_mut().zip(color) {
                *a += s * c;
            }
        }
        if sigma > 0.0 {
            (sigma, acc.map(|a| a / sigma))
        } else {
            (0.0, first_hit.unwrap_or(self.background))
        }
    }
}

fn normalized(v: [f64; 3]) -> [f64; 3] {
    let n = Vec3::from(v).normalize();
    [n.x, n.y, n.z]
}

/// Free-function form of [`AnalyticField::eval`].
pub fn field_eval(field: &AnalyticField, x: &Vec3) -> (f64, Rgb) {
    field.eval(x)
}

/// Row-major `height x width x 3` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Shape(format!("{width}x{height} RGB image needs {} values, got {}", width * height * 3, data.len())));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: Rgb) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self { width, height, data }
    }

    pub fn pixel(&self, i: usize, j: usize) -> Rgb {
        let k = (j * self.width + i) * 3;
        [self.data[k], self.data[k + 1], self.data[k + 2]]
    }

    /// Rounds every value to the nearest multiple of 1/255.
    pub fn quantized(&self) -> Self {
        let data = self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0).collect();
        Self { width: self.width, height: self.height, data }
    }
}

/// Per-pixel outputs of the oracle renderer.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleRender {
    pub image: Image,
    /// Expected termination distance `sum_i w_i t_i` along the unit ray.
    pub depth: Vec<f64>,
    pub opacity: Vec<f64>,
}

/// Midpoint-rule quadrature of the rendering integral along one ray.
/// Returns `(color, depth, opacity)`.
pub fn oracle_ray(field: &AnalyticField, ray: &Ray, samples: usize) -> (Rgb, f64, f64) {
    let h = (ray.t_far - ray.t_near) / samples as f64;
    let mut transmittance = 1.0;
    let mut color = [0.0; 3];
    let mut depth = 0.0;
    for i in 0..samples {
        let t = ray.t_near + (i as f64 + 0.5) * h;
        let (sigma, rgb) = field.eval(&ray.at(t));
        let alpha = 1.0 - (-sigma * h).exp();
        let w = transmittance * alpha;
        for (c, v) in color.iter_mut().zip(rgb) {
            *c += w * v;
        }
        depth += w * t;
        transmittance *= 1.0 - alpha;
    }
    for (c, b) in color.iter_mut().zip(field.background) {
        *c += transmittance * b;
    }
    (color, depth, 1.0 - transmittance)
}

pub fn oracle_render(field: &AnalyticField, camera: &Camera, near: f64, far: f64, samples: usize) -> Result<OracleRender> {
    if samples < 2 {
        return Err(Error::InvalidArgument(format!("oracle_render needs >= 2 samples, got {samples}")));
    }
    let (w, h) = (camera.width, camera.height);
    let rows: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..h)
        .into_par_iter()
        .map(|j| {
            let mut rgb = Vec::with_capacity(w * 3);
            let mut depth = Vec::with_capacity(w);
            let mut opacity = Vec::with_capacity(w);
            for i in 0..w {
                let ray = ray_for_pixel(camera, PixelCoord::new(i as f64, j as f64), near, far);
                let (c, d, a) = oracle_ray(field, &ray, samples);
                rgb.extend_from_slice(&c);
                depth.push(d);
                opacity.push(a);
            }
            (rgb, depth, opacity)
        })
        .collect();
    let mut out = OracleRender { image: Image { width: w, height: h, data: Vec::with_capacity(w * h * 3) }, depth: vec![], opacity: vec![] };
    for (rgb, d, a) in rows {
        out.image.data.extend(rgb);
        out.depth.extend(d);
        out.opacity.extend(a);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    /// Conditioning views.
    Source,
    /// Views whose pixels supervise training.
    Target,
    /// Held-out views used only for evaluation.
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneDataset {
    pub cameras: Vec<Camera>,
    pub images: Vec<Image>,
    /// Oracle depth per view, when known.
    pub depths: Vec<Option<Vec<f64>>>,
    pub near: f64,
    pub far: f64,
    pub background: Rgb,
    pub splits: Vec<Split>,
}

impl SceneDataset {
    pub fn validate(&self) -> Result<()> {
        let n = self.cameras.len();
        if self.images.len() != n || self.splits.len() != n || self.depths.len() != n {
            return Err(Error::Shape(format!(
                "dataset has {n} cameras, {} images, {} splits, {} depth slots",
                self.images.len(),
                self.splits.len(),
                self.depths.len()
            )));
        }
        for (k, (c, im)) in self.cameras.iter().zip(&self.images).enumerate() {
            if c.width != im.width || c.height != im.height {
                return Err(Error::Shape(format!(
                    "view {k}: image is {}x{} but camera is {}x{}",
                    im.width, im.height, c.width, c.height
                )));
            }
            if let Some(d) = &self.depths[k] {
                if d.len() != c.width * c.height {
                    return Err(Error::Shape(format!("view {k}: depth map has {} values", d.len())));
                }
            }
        }
        if !(0.0 <= self.near && self.near < self.far) {
            return Err(Error::InvalidArgument(format!("invalid bounds near={} far={}", self.near, self.far)));
        }
        Ok(())
    }

    pub fn views_in(&self, split: Split) -> Vec<usize> {
        self.splits.iter().enumerate().filter(|(_, s)| **s == split).map(|(i, _)| i).collect()
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layout {
    /// Cameras on a horizontal arc of `arc_degrees` at fixed elevation.
    Ring { radius: f64, arc_degrees: f64, elevation_degrees: f64 },
    /// Cameras on the upper hemisphere between the given elevations.
    Hemisphere { radius: f64, min_elevation_degrees: f64, max_elevation_degrees: f64 },
}

impl Default for Layout {
    fn default() -> Self {
        Layout::Ring { radius: 4.0, arc_degrees: 120.0, elevation_degrees: 20.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub field: AnalyticField,
    pub layout: Layout,
    /// Evenly spread conditioning views, listed first in the dataset.
    pub source_views: usize,
    pub target_views: usize,
    pub test_views: usize,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
    pub oracle_samples: usize,
    pub seed: u64,
}

impl SceneSpec {
    /// Tri-sphere preset with `views` total views: three sources, two test views, the rest targets.
    pub fn tri_sphere(views: usize, size: usize, seed: u64) -> Self {
        let source_views = views.min(3);
        let test_views = if views >= source_views + 3 { 2 } else { 0 };
        Self {
            field: AnalyticField::tri_sphere(),
            layout: Layout::default(),
            source_views,
            target_views: views - source_views - test_views,
            test_views,
            width: size,
            height: size,
            near: 2.5,
            far: 5.5,
            oracle_samples: 256,
            seed,
        }
    }

    pub fn n_views(&self) -> usize {
        self.source_views + self.target_views + self.test_views
    }

    pub fn focal(&self) -> f64 {
        1.4 * self.width.max(self.height) as f64
    }
}

fn camera_at(spec: &SceneSpec, azimuth: f64, elevation: f64, radius: f64) -> Result<Camera> {
    let eye = Vec3::new(radius * elevation.cos() * azimuth.cos(), radius * elevation.cos() * azimuth.sin(), radius * elevation.sin());
    let mut cam = Camera::look_at(eye, Vec3::zeros(), Vec3::z(), spec.focal(), spec.width, spec.height)?;
    cam.cx = (spec.width as f64 - 1.0) / 2.0;
    cam.cy = (spec.height as f64 - 1.0) / 2.0;
    Ok(cam)
}

/// Generates posed cameras on the layout and renders each view with the oracle.
/// Images are quantized to 8 bits so that they survive PNG storage unchanged.
pub fn make_scene(spec: &SceneSpec) -> Result<SceneDataset> {
    let n = spec.n_views();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("a scene needs >= 2 views, got {n}")));
    }
    if spec.source_views == 0 {
        return Err(Error::InvalidArgument("a scene needs >= 1 source view".into()));
    }
    spec.field.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let deg = std::f64::consts::PI / 180.0;
    let mut poses = Vec::with_capacity(n);
    match spec.layout {
        Layout::Ring { radius, arc_degrees, elevation_degrees } => {
            let arc = arc_degrees * deg;
            let start = -arc / 2.0;
            for k in 0..spec.source_views {
                let f = if spec.source_views == 1 { 0.5 } else { k as f64 / (spec.source_views - 1) as f64 };
                poses.push((start + f * arc, elevation_degrees * deg, radius));
            }
            for _ in spec.source_views..n {
                poses.push((start + rng.gen::<f64>() * arc, elevation_degrees * deg, radius));
            }
        }
        Layout::Hemisphere { radius, min_elevation_degrees, max_elevation_degrees } => {
            let mid = 0.5 * (min_elevation_degrees + max_elevation_degrees) * deg;
            for k in 0..spec.source_views {
                poses.push((2.0 * std::f64::consts::PI * k as f64 / spec.source_views as f64, mid, radius));
            }
            for _ in spec.source_views..n {
                let az = rng.gen::<f64>() * 2.0 * std::f64::consts::PI;
                let el = rng.gen_range(min_elevation_degrees..=max_elevation_degrees) * deg;
                poses.push((az, el, radius));
            }
        }
    }
    let cameras: Vec<Camera> = poses.iter().map(|&(a, e, r)| camera_at(spec, a, e, r)).collect::<Result<_>>()?;
    for i in 0..n {
        for j in i + 1..n {
            if (cameras[i].center() - cameras[j].center()).norm() < 1e-6 {
                return Err(Error::DegenerateLayout(format!("views {i} and {j} share a camera center")));
            }
        }
    }
    let mut images = Vec::with_capacity(n);
    let mut depths = Vec::with_capacity(n);
    for cam in &cameras {
        let r = oracle_render(&spec.field, cam, spec.near, spec.far, spec.oracle_samples)?;
        images.push(r.image.quantized());
        depths.push(Some(r.depth));
    }
    let splits = (0..n)
        .map(|k| {
            if k < spec.source_views {
                Split::Source
            } else if k < spec.source_views + spec.target_views {
                Split::Target
            } else {
                Split::Test
            }
        })
        .collect();
    let ds = SceneDataset { cameras, images, depths, near: spec.near, far: spec.far, background: spec.field.background, splits };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Mat3;

    fn red_blue() -> AnalyticField {
        let mut a = Primitive::sphere([0.0; 3], 1.0, 1.0, [1.0, 0.0, 0.0]);
        let mut b = Primitive::sphere([0.1, 0.0, 0.0], 1.0, 3.0, [0.0, 0.0, 1.0]);
        a.shell = 0.0;
        b.shell = 0.0;
        AnalyticField::new(vec![a, b]).unwrap()
    }

    #[test]
    fn empty_space_is_background() {
        let f = AnalyticField::tri_sphere();
        assert_eq!(f.eval(&Vec3::new(3.0, 3.0, 3.0)), (0.0, [0.0; 3]));
    }

    #[test]
    fn inside_single_sphere() {
        let f = AnalyticField::new(vec![Primitive::sphere([0.0; 3], 0.5, 2.0, [1.0, 0.0, 0.0])]).unwrap();
        assert_eq!(f.eval(&Vec3::zeros()), (2.0, [1.0, 0.0, 0.0]));
    }

    #[test]
    fn overlap_is_density_weighted() {
        let (s, c) = red_blue().eval(&Vec3::new(0.05, 0.0, 0.0));
        assert_eq!(s, 4.0);
        assert_eq!(c, [0.25, 0.0, 0.75]);
    }

    #[test]
    fn eval_is_order_independent() {
        let f = red_blue();
        let mut g = f.clone();
        g.primitives.reverse();
        for x in [Vec3::new(0.05, 0.0, 0.0), Vec3::new(0.9, 0.1, 0.0), Vec3::new(-0.5, 0.2, 0.3)] {
            let (a, ca) = f.eval(&x);
            let (b, cb) = g.eval(&x);
            assert!((a - b).abs() < 1e-15);
            assert!(ca.iter().zip(cb).all(|(p, q)| (p - q).abs() < 1e-15));
        }
    }

    #[test]
    fn rejects_invalid_primitives() {
        assert!(AnalyticField::new(vec![Primitive::sphere([0.0; 3], 1.0, -1.0, [0.5; 3])]).is_err());
        assert!(AnalyticField::new(vec![Primitive::sphere([0.0; 3], 1.0, 1.0, [1.5, 0.0, 0.0])]).is_err());
    }

    fn axis_camera(size: usize) -> Camera {
        Camera::new(10.0, 10.0, (size as f64 - 1.0) / 2.0, (size as f64 - 1.0) / 2.0, Mat3::identity(), Vec3::zeros(), size, size).unwrap()
    }

    #[test]
    fn empty_field_renders_background() {
        let mut f = AnalyticField::new(vec![]).unwrap();
        f.background = [0.2, 0.4, 0.6];
        let r = oracle_render(&f, &axis_camera(4), 1.0, 2.0, 8).unwrap();
        for px in r.image.data.chunks(3) {
            assert!((px[0] - 0.2).abs() < 1e-15 && (px[1] - 0.4).abs() < 1e-15 && (px[2] - 0.6).abs() < 1e-15);
        }
        assert!(r.opacity.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn unit_slab_opacity_is_closed_form() {
        // hard-edged box of density 1 spanning z in [1, 2] along the optical axis
        let mut slab = Primitive::cuboid([0.0, 0.0, 1.5], [5.0, 5.0, 0.5], 1.0, [1.0; 3]);
        slab.shell = 0.0;
        let f = AnalyticField::new(vec![slab]).unwrap();
        let ray = Ray::new(Vec3::zeros(), Vec3::z(), 1.0, 2.0).unwrap();
        let (_, _, opacity) = oracle_ray(&f, &ray, 64);
        assert!((opacity - (1.0 - (-1.0f64).exp())).abs() < 1e-12);
        assert!((opacity - 0.63212).abs() < 1e-5);
    }

    #[test]
    fn opaque_wall_depth() {
        let mut wall = Primitive::cuboid([0.0, 0.0, 3.5], [5.0, 5.0, 0.5], 1e4, [0.5; 3]);
        wall.shell = 0.0;
        let f = AnalyticField::new(vec![wall]).unwrap();
        for n in [32, 128, 512] {
            let ray = Ray::new(Vec3::zeros(), Vec3::z(), 1.0, 5.0).unwrap();
            let (_, d, a) = oracle_ray(&f, &ray, n);
            assert!(a > 0.999);
            assert!((d - 3.0).abs() <= 2.0 * 4.0 / n as f64, "n={n} d={d}");
        }
    }

    #[test]
    fn quadrature_converges_on_default_scene() {
        let spec = SceneSpec::tri_sphere(3, 24, 0);
        let ds = make_scene(&SceneSpec { oracle_samples: 16, ..spec.clone() }).unwrap();
        let cam = &ds.cameras[1];
        let r1024 = oracle_render(&spec.field, cam, spec.near, spec.far, 1024).unwrap();
        let r512 = oracle_render(&spec.field, cam, spec.near, spec.far, 512).unwrap();
        let r256 = oracle_render(&spec.field, cam, spec.near, spec.far, 256).unwrap();
        let diff = |a: &OracleRender, b: &OracleRender| a.image.data.iter().zip(&b.image.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let d1 = diff(&r1024, &r512);
        let d2 = diff(&r512, &r256);
        assert!(d1 < 1e-3, "{d1}");
        assert!(d1 <= d2, "{d1} vs {d2}");
        assert!(r1024.opacity.iter().all(|&a| (0.0..=1.0).contains(&a)));
    }

    #[test]
    fn make_scene_counts_splits_and_determinism() {
        let spec = SceneSpec { target_views: 0, test_views: 0, ..SceneSpec::tri_sphere(3, 16, 4) };
        let a = make_scene(&spec).unwrap();
        assert_eq!(a.len(), 3);
        assert_eq!(a.views_in(Split::Source), vec![0, 1, 2]);
        let b = make_scene(&spec).unwrap();
        assert_eq!(a, b);
        for i in 0..a.len() {
            for j in i + 1..a.len() {
                assert!((a.cameras[i].center() - a.cameras[j].center()).norm() >= 1e-6);
            }
        }
    }

    #[test]
    fn make_scene_rejects_single_view() {
        let spec = SceneSpec { source_views: 1, target_views: 0, test_views: 0, ..SceneSpec::tri_sphere(3, 8, 0) };
        assert!(make_scene(&spec).is_err());
    }

    #[test]
    fn make_scene_rejects_coincident_cameras() {
        let spec = SceneSpec {
            layout: Layout::Ring { radius: 4.0, arc_degrees: 0.0, elevation_degrees: 10.0 },
            ..SceneSpec::tri_sphere(3, 8, 0)
        };
        assert!(matches!(make_scene(&spec), Err(Error::DegenerateLayout(_))));
    }
}
