//! Pinhole cameras, rays, projection and bilinear lookup.
//!
//! Conventions used throughout the crate:
//! - camera frame: +x right, +y down, +z forward (optical axis);
//! - a camera stores its world-from-camera pose; world-to-camera mapping is
//!   always derived from it (`x_cam = R^T (x_world - center)`);
//! - pixel `(i, j)` (column `i`, row `j`) sits at continuous coordinate
//!   `(u, v) = (i, j)` exactly, with no half-pixel offset.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Depth below which a point counts as behind the camera.
pub const MIN_DEPTH: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-from-camera rotation; columns are the camera axes in world coordinates.
    rotation: Mat3,
    /// Camera center in world coordinates (translation of the world-from-camera pose).
    center: Vec3,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    /// Builds a camera from a world-from-camera pose `[R | t]`.
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, rotation: Mat3, center: Vec3, width: usize, height: usize) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::InvalidArgument(format!("focal lengths must be positive, got {fx}, {fy}")));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!("image extents must be >= 1, got {width}x{height}")));
        }
        let ortho = (rotation.transpose() * rotation - Mat3::identity()).abs().max();
        let det = rotation.determinant();
        if ortho > 1e-9 || (det - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "rotation is not a proper rotation (|R^T R - I| = {ortho:.2e}, det = {det})"
            )));
        }
        if !(cx.is_finite() && cy.is_finite() && center.iter().all(|v| v.is_finite())) {
            return Err(Error::InvalidArgument("non-finite camera parameters".into()));
        }
        Ok(Self { fx, fy, cx, cy, rotation, center, width, height })
    }

    /// Builds a camera from a camera-from-world extrinsic `(R, t)`, i.e.
    /// `x_cam = R x_world + t`. The camera center is `-R^T t`.
    pub fn from_extrinsics(fx: f64, fy: f64, cx: f64, cy: f64, r_cw: Mat3, t_cw: Vec3, width: usize, height: usize) -> Result<Self> {
        let rotation = r_cw.transpose();
        Self::new(fx, fy, cx, cy, rotation, -(rotation * t_cw), width, height)
    }

    /// Camera at `eye` looking at `target`; `up` fixes the roll (image rows run against it).
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, focal: f64, width: usize, height: usize) -> Result<Self> {
        let forward = target - eye;
        if forward.norm() < 1e-12 {
            return Err(Error::InvalidArgument("look_at: eye coincides with target".into()));
        }
        let forward = forward.normalize();
        let right = forward.cross(&up);
        if right.norm() < 1e-12 {
            return Err(Error::InvalidArgument("look_at: up is parallel to the viewing direction".into()));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = Mat3::from_columns(&[right, down, forward]);
        let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
        Self::new(focal, focal, cx, cy, rotation, eye, width, height)
    }

    /// Row-major 3x4 world-from-camera matrix.
    pub fn pose_rows(&self) -> [f64; 12] {
        let r = &self.rotation;
        let c = &self.center;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], c[0],
            r[(1, 0)], r[(1, 1)], r[(1, 2)], c[1],
            r[(2, 0)], r[(2, 1)], r[(2, 2)], c[2],
        ]
    }

    pub fn from_pose_rows(fx: f64, fy: f64, cx: f64, cy: f64, pose: &[f64; 12], width: usize, height: usize) -> Result<Self> {
        let rotation = Mat3::new(pose[0], pose[1], pose[2], pose[4], pose[5], pose[6], pose[8], pose[9], pose[10]);
        let center = Vec3::new(pose[3], pose[7], pose[11]);
        Self::new(fx, fy, cx, cy, rotation, center, width, height)
    }

    pub fn center(&self) -> Vec3 {
        self.center
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn world_to_camera(&self, x: &Vec3) -> Vec3 {
        self.rotation.tr_mul(&(x - self.center))
    }

    pub fn contains_pixel(&self, p: PixelCoord) -> bool {
        in_extent(p.u, self.width) && in_extent(p.v, self.height)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelCoord {
    pub u: f64,
    pub v: f64,
}

impl PixelCoord {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn new(origin: Vec3, direction: Vec3, t_near: f64, t_far: f64) -> Result<Self> {
        if !(0.0 <= t_near && t_near < t_far) {
            return Err(Error::InvalidArgument(format!("ray bounds must satisfy 0 <= near < far, got {t_near}, {t_far}")));
        }
        let n = direction.norm();
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::InvalidArgument("ray direction must be non-zero".into()));
        }
        Ok(Self { origin, direction: direction / n, t_near, t_far })
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

/// Projects a world point; returns its pixel coordinate and camera-frame depth.
pub fn project(camera: &Camera, x: &Vec3) -> Result<(PixelCoord, f64)> {
    let p = camera.world_to_camera(x);
    if p.z <= MIN_DEPTH {
        return Err(Error::BehindCamera { depth: p.z });
    }
    let u = camera.fx * p.x / p.z + camera.cx;
    let v = camera.fy * p.y / p.z + camera.cy;
    Ok((PixelCoord { u, v }, p.z))
}

/// Ray through a continuous pixel coordinate. Bounds are the caller's
/// responsibility (`0 <= t_near < t_far`).
pub fn ray_for_pixel(camera: &Camera, pixel: PixelCoord, t_near: f64, t_far: f64) -> Ray {
    debug_assert!(0.0 <= t_near && t_near < t_far);
    let d_cam = Vec3::new((pixel.u - camera.cx) / camera.fx, (pixel.v - camera.cy) / camera.fy, 1.0);
    let direction = (camera.rotation * d_cam).normalize();
    Ray { origin: camera.center, direction, t_near, t_far }
}

fn in_extent(x: f64, extent: usize) -> bool {
    x >= 0.0 && x <= (extent - 1) as f64
}

/// The four bilinear taps `(flat_index, weight)` for looking up `pixel * scale`
/// in a `width x height` grid, plus whether the scaled coordinate was inside
/// the grid before border clamping.
pub fn bilinear_taps(width: usize, height: usize, pixel: PixelCoord, scale: f64) -> ([(usize, f64); 4], bool) {
    let x = pixel.u * scale;
    let y = pixel.v * scale;
    let inside = in_extent(x, width) && in_extent(y, height);
    let (x0, fx) = axis_cell(x, width);
    let (y0, fy) = axis_cell(y, height);
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let taps = [
        (y0 * width + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * width + x1, fx * (1.0 - fy)),
        (y1 * width + x0, (1.0 - fx) * fy),
        (y1 * width + x1, fx * fy),
    ];
    (taps, inside)
}

fn axis_cell(x: f64, extent: usize) -> (usize, f64) {
    let hi = (extent - 1) as f64;
    let x = if x.is_nan() { 0.0 } else { x.clamp(0.0, hi) };
    if extent == 1 {
        return (0, 0.0);
    }
    let i0 = (x.floor() as usize).min(extent - 2);
    (i0, x - i0 as f64)
}

/// Bilinear lookup into a row-major `height x width x channels` grid.
/// Out-of-range coordinates are clamped to the border; the flag reports
/// whether clamping was needed.
pub fn bilinear(grid: &[f64], width: usize, height: usize, channels: usize, pixel: PixelCoord, scale: f64) -> (Vec<f64>, bool) {
    debug_assert_eq!(grid.len(), width * height * channels);
    let (taps, inside) = bilinear_taps(width, height, pixel, scale);
    let mut out = vec![0.0; channels];
    for (idx, w) in taps {
        for (o, g) in out.iter_mut().zip(&grid[idx * channels..(idx + 1) * channels]) {
            *o += w * g;
        }
    }
    (out, inside)
}

/// Draws an integer pixel offset uniformly from `[-max_offset, max_offset]^2 \ {(0,0)}`
/// such that the displaced pixel stays inside the image.
pub fn adjacent_pixel(camera: &Camera, reference: (usize, usize), max_offset: usize, rng: &mut impl Rng) -> Result<(usize, usize)> {
    if max_offset == 0 {
        return Err(Error::InvalidArgument("max_offset must be >= 1".into()));
    }
    if camera.width * camera.height < 2 {
        return Err(Error::InvalidArgument("image has no neighboring pixel".into()));
    }
    let m = max_offset as i64;
    loop {
        let dx = rng.gen_range(-m..=m);
        let dy = rng.gen_range(-m..=m);
        if dx == 0 && dy == 0 {
            continue;
        }
        let (i, j) = (reference.0 as i64 + dx, reference.1 as i64 + dy);
        if (0..camera.width as i64).contains(&i) && (0..camera.height as i64).contains(&j) {
            return Ok((i as usize, j as usize));
        }
    }
}

/// Ray through a pixel near `reference_pixel`, from the same camera center and
/// with the same bounds as `reference`.
pub fn adjacent_ray(
    reference: &Ray,
    reference_pixel: (usize, usize),
    camera: &Camera,
    max_offset: usize,
    rng: &mut impl Rng,
) -> Result<(Ray, (usize, usize))> {
    let (i, j) = adjacent_pixel(camera, reference_pixel, max_offset, rng)?;
    let ray = ray_for_pixel(camera, PixelCoord::new(i as f64, j as f64), reference.t_near, reference.t_far);
    Ok((ray, (i, j)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_camera(f: f64, c: f64) -> Camera {
        Camera::new(f, f, c, c, Mat3::identity(), Vec3::zeros(), 101, 101).unwrap()
    }

    fn random_rotation(rng: &mut impl Rng) -> Mat3 {
        let axis = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let angle = rng.gen_range(-3.0..3.0);
        *nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle).matrix()
    }

    #[test]
    fn projects_optical_axis() {
        let cam = Camera::new(1.0, 1.0, 0.0, 0.0, Mat3::identity(), Vec3::zeros(), 1, 1).unwrap();
        let (p, d) = project(&cam, &Vec3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!((p.u, p.v, d), (0.0, 0.0, 1.0));
    }

    #[test]
    fn projects_with_pinhole_formula() {
        let cam = identity_camera(100.0, 50.0);
        let (p, d) = project(&cam, &Vec3::new(0.5, 0.0, 1.0)).unwrap();
        assert_eq!((p.u, p.v, d), (100.0, 50.0, 1.0));
    }

    #[test]
    fn behind_camera_is_error() {
        let cam = identity_camera(100.0, 50.0);
        assert!(matches!(project(&cam, &Vec3::new(0.0, 0.0, -1.0)), Err(Error::BehindCamera { .. })));
        assert!(project(&cam, &Vec3::new(0.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn principal_point_ray_is_optical_axis() {
        let cam = identity_camera(100.0, 50.0);
        let r = ray_for_pixel(&cam, PixelCoord::new(50.0, 50.0), 1.0, 2.0);
        assert_eq!(r.direction, Vec3::new(0.0, 0.0, 1.0));
    }

    #[test]
    fn adjacent_pixels_subtend_inverse_focal_angle() {
        let cam = Camera::new(1000.0, 1000.0, 50.0, 50.0, Mat3::identity(), Vec3::zeros(), 100, 100).unwrap();
        let a = ray_for_pixel(&cam, PixelCoord::new(50.0, 50.0), 1.0, 2.0);
        let b = ray_for_pixel(&cam, PixelCoord::new(51.0, 50.0), 1.0, 2.0);
        let angle = a.direction.dot(&b.direction).clamp(-1.0, 1.0).acos();
        assert!((angle - 1e-3).abs() < 1e-9, "{angle}");
    }

    #[test]
    fn extrinsic_center_is_minus_rt_t() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = random_rotation(&mut rng);
        let t = Vec3::new(0.3, -1.2, 2.0);
        let cam = Camera::from_extrinsics(10.0, 10.0, 5.0, 5.0, r, t, 10, 10).unwrap();
        let ray = ray_for_pixel(&cam, PixelCoord::new(1.0, 2.0), 0.1, 1.0);
        assert!((ray.origin - (-(r.transpose() * t))).norm() < 1e-12);
    }

    #[test]
    fn rejects_improper_rotation() {
        let flip = Mat3::from_diagonal(&Vec3::new(1.0, 1.0, -1.0));
        assert!(Camera::new(1.0, 1.0, 0.0, 0.0, flip, Vec3::zeros(), 2, 2).is_err());
        assert!(Camera::new(0.0, 1.0, 0.0, 0.0, Mat3::identity(), Vec3::zeros(), 2, 2).is_err());
    }

    #[test]
    fn pixel_round_trip_random_cameras() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let cam = Camera::new(
                rng.gen_range(20.0..200.0),
                rng.gen_range(20.0..200.0),
                rng.gen_range(0.0..64.0),
                rng.gen_range(0.0..64.0),
                random_rotation(&mut rng),
                Vec3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)),
                64,
                64,
            )
            .unwrap();
            let px = PixelCoord::new(rng.gen_range(0.0..63.0), rng.gen_range(0.0..63.0));
            let ray = ray_for_pixel(&cam, px, 0.5, 6.0);
            for _ in 0..5 {
                let t = rng.gen_range(0.5..6.0);
                let (back, depth) = project(&cam, &ray.at(t)).unwrap();
                assert!((back.u - px.u).abs() < 1e-9 && (back.v - px.v).abs() < 1e-9);
                assert!(depth > 0.0);
            }
        }
    }

    #[test]
    fn look_at_points_at_target() {
        let cam = Camera::look_at(Vec3::new(4.0, 0.0, 0.5), Vec3::zeros(), Vec3::z(), 60.0, 33, 33).unwrap();
        let (p, _) = project(&cam, &Vec3::zeros()).unwrap();
        assert!((p.u - 16.0).abs() < 1e-12 && (p.v - 16.0).abs() < 1e-12);
        // world up projects above the center
        let (up, _) = project(&cam, &Vec3::new(0.0, 0.0, 0.5)).unwrap();
        assert!(up.v < 16.0);
    }

    fn grid(width: usize, height: usize, channels: usize, f: impl Fn(usize, usize, usize) -> f64) -> Vec<f64> {
        let mut g = Vec::with_capacity(width * height * channels);
        for j in 0..height {
            for i in 0..width {
                for c in 0..channels {
                    g.push(f(i, j, c));
                }
            }
        }
        g
    }

    #[test]
    fn bilinear_integer_and_midpoint() {
        let g = grid(4, 3, 2, |i, j, c| (i * 10 + j * 100 + c) as f64 * 0.37);
        let (v, inside) = bilinear(&g, 4, 3, 2, PixelCoord::new(2.0, 1.0), 1.0);
        assert!(inside);
        assert_eq!(v, vec![g[(4 + 2) * 2], g[(4 + 2) * 2 + 1]]);
        let (v, _) = bilinear(&g, 4, 3, 2, PixelCoord::new(3.0, 2.0), 1.0);
        assert_eq!(v, vec![g[(2 * 4 + 3) * 2], g[(2 * 4 + 3) * 2 + 1]]);
        let (m, _) = bilinear(&g, 4, 3, 2, PixelCoord::new(0.5, 0.5), 1.0);
        let mean = (g[0] + g[2] + g[8] + g[10]) / 4.0;
        assert!((m[0] - mean).abs() < 1e-12);
    }

    /// Independent per-pixel blend: pick the cell by explicit search.
    fn brute_bilinear(g: &[f64], w: usize, h: usize, ch: usize, x: f64, y: f64) -> Vec<f64> {
        let x = x.clamp(0.0, (w - 1) as f64);
        let y = y.clamp(0.0, (h - 1) as f64);
        let mut out = vec![0.0; ch];
        for j in 0..h {
            for i in 0..w {
                let wx = (1.0 - (x - i as f64).abs()).max(0.0);
                let wy = (1.0 - (y - j as f64).abs()).max(0.0);
                for c in 0..ch {
                    out[c] += wx * wy * g[(j * w + i) * ch + c];
                }
            }
        }
        out
    }

    #[test]
    fn bilinear_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let (w, h, ch) = (rng.gen_range(1..9), rng.gen_range(1..9), rng.gen_range(1..4));
            let g: Vec<f64> = (0..w * h * ch).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let scale = if rng.gen_bool(0.5) { 1.0 } else { 0.5 };
            let p = PixelCoord::new(rng.gen_range(-2.0..20.0), rng.gen_range(-2.0..20.0));
            let (v, inside) = bilinear(&g, w, h, ch, p, scale);
            let b = brute_bilinear(&g, w, h, ch, p.u * scale, p.v * scale);
            for (a, b) in v.iter().zip(&b) {
                assert!((a - b).abs() < 1e-12);
            }
            let (x, y) = (p.u * scale, p.v * scale);
            assert_eq!(inside, x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64);
        }
    }

    #[test]
    fn bilinear_exact_on_affine_grid() {
        let (a, b, c) = (0.7, -1.3, 0.25);
        let g = grid(7, 5, 1, |i, j, _| a * i as f64 + b * j as f64 + c);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..500 {
            let (u, v) = (rng.gen_range(0.0..6.0), rng.gen_range(0.0..4.0));
            let (val, _) = bilinear(&g, 7, 5, 1, PixelCoord::new(u, v), 1.0);
            assert!((val[0] - (a * u + b * v + c)).abs() < 1e-9);
        }
    }

    #[test]
    fn adjacent_offsets_within_window_and_nonzero() {
        let cam = Camera::look_at(Vec3::new(4.0, 0.0, 0.0), Vec3::zeros(), Vec3::z(), 60.0, 64, 64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let reference = (30usize, 2usize);
        let ref_ray = ray_for_pixel(&cam, PixelCoord::new(30.0, 2.0), 2.5, 5.5);
        for _ in 0..10_000 {
            let (ray, (i, j)) = adjacent_ray(&ref_ray, reference, &cam, 7, &mut rng).unwrap();
            let (dx, dy) = (i as i64 - 30, j as i64 - 2);
            assert!(dx.abs().max(dy.abs()) <= 7);
            assert!((dx, dy) != (0, 0));
            assert_eq!((ray.origin - ref_ray.origin).norm(), 0.0);
        }
        assert!(adjacent_ray(&ref_ray, reference, &cam, 0, &mut rng).is_err());
    }
}
