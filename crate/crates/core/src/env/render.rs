//! Low-fidelity z-buffered ray caster.
//!
//! Each primitive is tested only inside the screen rectangle that bounds its
//! projection, so the cost is roughly proportional to covered pixels.

use nalgebra::{Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::kinematics::Pose;

/// Pinhole camera; camera frame is x right, y down, z forward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    /// Camera-to-world pose.
    pub pose: Pose,
    pub width: usize,
    pub height: usize,
    /// Horizontal field of view in radians.
    pub fov: f64,
}

impl Camera {
    pub fn look_at(eye: Point3<f64>, target: Point3<f64>, up: Vector3<f64>, size: usize, fov: f64) -> Self {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let rot = nalgebra::Rotation3::from_matrix_unchecked(nalgebra::Matrix3::from_columns(&[
            right, down, forward,
        ]));
        Camera {
            pose: Pose::from_parts(eye.coords.into(), nalgebra::UnitQuaternion::from_rotation_matrix(&rot)),
            width: size,
            height: size,
            fov,
        }
    }

    /// Fixed ego-centric viewpoint in front of and above the workspace.
    pub fn ego(size: usize) -> Self {
        Camera::look_at(
            Point3::new(0.0, -0.34, 0.36),
            Point3::new(0.0, 0.0, 0.11),
            Vector3::z(),
            size,
            60f64.to_radians(),
        )
    }

    fn focal(&self) -> f64 {
        0.5 * self.width as f64 / (0.5 * self.fov).tan()
    }

    fn ray(&self, px: usize, py: usize) -> Vector3<f64> {
        let f = self.focal();
        let x = (px as f64 + 0.5 - 0.5 * self.width as f64) / f;
        let y = (py as f64 + 0.5 - 0.5 * self.height as f64) / f;
        self.pose.rotation * Vector3::new(x, y, 1.0).normalize()
    }

    /// Pixel rectangle `(x0, x1, y0, y1)` (exclusive ends) covering a world sphere.
    fn bounds(&self, center: &Point3<f64>, radius: f64) -> Option<(usize, usize, usize, usize)> {
        let c = self.pose.inverse_transform_point(center);
        if c.z + radius <= 1e-6 {
            return None;
        }
        if c.z - radius <= 1e-3 {
            return Some((0, self.width, 0, self.height));
        }
        let f = self.focal();
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for corner in 0..8 {
            let s = |bit: usize| if corner & bit == 0 { -radius } else { radius };
            let p = c + Vector3::new(s(1), s(2), s(4));
            let u = p.x / p.z * f + 0.5 * self.width as f64;
            let v = p.y / p.z * f + 0.5 * self.height as f64;
            lo = [lo[0].min(u), lo[1].min(v)];
            hi = [hi[0].max(u), hi[1].max(v)];
        }
        let clampx = |v: f64| v.clamp(0.0, self.width as f64) as usize;
        let clampy = |v: f64| v.clamp(0.0, self.height as f64) as usize;
        let (x0, x1) = (clampx(lo[0].floor()), clampx(hi[0].ceil() + 1.0));
        let (y0, y1) = (clampy(lo[1].floor()), clampy(hi[1].ceil() + 1.0));
        (x0 < x1 && y0 < y1).then_some((x0, x1, y0, y1))
    }
}

/// Semantic class written to the id buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum PixelClass {
    Background = 0,
    Table = 1,
    Body = 2,
    Cap = 3,
    LeftHand = 4,
    RightHand = 5,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    /// Table top `z = 0` limited to `|x|, |y| <= half_extent`.
    Table { half_extent: f64 },
    /// Solid cylinder from `z0` to `z0 + height` along the local z axis.
    Cylinder { pose: Pose, radius: f64, z0: f64, height: f64 },
    Sphere { center: Point3<f64>, radius: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub color: [f64; 3],
    pub class: PixelClass,
}

/// RGB image with 8-bit channels, row-major `height x width x 3`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Image {
    /// Channel value in `[0, 1]`.
    pub fn value(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + c] as f64 / 255.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rendered {
    pub image: Image,
    pub ids: Vec<PixelClass>,
}

impl Rendered {
    pub fn count(&self, class: PixelClass) -> usize {
        self.ids.iter().filter(|&&c| c == class).count()
    }
}

const BACKGROUND: [f64; 3] = [0.85, 0.9, 0.95];

fn light_dir() -> Vector3<f64> {
    Vector3::new(0.3, -0.5, 1.0).normalize()
}

/// Nearest hit `(t, normal)` of a ray with a primitive.
fn intersect(shape: &Shape, o: &Point3<f64>, d: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
    match *shape {
        Shape::Table { half_extent } => {
            if d.z.abs() < 1e-12 {
                return None;
            }
            let t = -o.z / d.z;
            let p = o + d * t;
            (t > 0.0 && p.x.abs() <= half_extent && p.y.abs() <= half_extent).then(|| (t, Vector3::z()))
        }
        Shape::Sphere { center, radius } => {
            let oc = o - center;
            let b = oc.dot(d);
            let c = oc.norm_squared() - radius * radius;
            let disc = b * b - c;
            if disc < 0.0 {
                return None;
            }
            let t = -b - disc.sqrt();
            (t > 0.0).then(|| (t, ((o + d * t) - center) / radius))
        }
        Shape::Cylinder { pose, radius, z0, height } => {
            let lo = pose.inverse_transform_point(o);
            let ld = pose.inverse_transform_vector(d);
            let mut best: Option<(f64, Vector3<f64>)> = None;
            let mut consider = |t: f64, n: Vector3<f64>| {
                if t > 0.0 && best.is_none_or(|(bt, _)| t < bt) {
                    best = Some((t, n));
                }
            };
            let a = ld.x * ld.x + ld.y * ld.y;
            if a > 1e-12 {
                let b = lo.x * ld.x + lo.y * ld.y;
                let c = lo.x * lo.x + lo.y * lo.y - radius * radius;
                let disc = b * b - a * c;
                if disc >= 0.0 {
                    let t = (-b - disc.sqrt()) / a;
                    let z = lo.z + ld.z * t;
                    if z >= z0 && z <= z0 + height {
                        let p = lo + ld * t;
                        consider(t, Vector3::new(p.x, p.y, 0.0) / radius);
                    }
                }
            }
            if ld.z.abs() > 1e-12 {
                for (zc, nz) in [(z0 + height, 1.0), (z0, -1.0)] {
                    let t = (zc - lo.z) / ld.z;
                    let p = lo + ld * t;
                    if p.x * p.x + p.y * p.y <= radius * radius {
                        consider(t, Vector3::new(0.0, 0.0, nz));
                    }
                }
            }
            best.map(|(t, n)| (t, pose.rotation * n))
        }
    }
}

fn bounding_sphere(shape: &Shape) -> Option<(Point3<f64>, f64)> {
    match *shape {
        Shape::Table { .. } => None,
        Shape::Sphere { center, radius } => Some((center, radius)),
        Shape::Cylinder { pose, radius, z0, height } => {
            let c = pose * Point3::new(0.0, 0.0, z0 + 0.5 * height);
            Some((c, (radius * radius + 0.25 * height * height).sqrt()))
        }
    }
}

fn shade(color: [f64; 3], normal: &Vector3<f64>, d: &Vector3<f64>) -> [u8; 3] {
    // Two-sided Lambert with an ambient floor.
    let n = if normal.dot(d) > 0.0 { -normal } else { *normal };
    let k = 0.35 + 0.65 * n.dot(&light_dir()).max(0.0);
    color.map(|c| (c * k * 255.0).round().clamp(0.0, 255.0) as u8)
}

pub fn render(camera: &Camera, primitives: &[Primitive]) -> Rendered {
    let (w, h) = (camera.width, camera.height);
    let mut depth = vec![f64::INFINITY; w * h];
    let mut data = vec![0u8; w * h * 3];
    let mut ids = vec![PixelClass::Background; w * h];
    let bg = BACKGROUND.map(|c| (c * 255.0).round() as u8);
    for px in data.chunks_exact_mut(3) {
        px.copy_from_slice(&bg);
    }
    let origin = Point3::from(camera.pose.translation.vector);
    for prim in primitives {
        let rect = match bounding_sphere(&prim.shape) {
            Some((c, r)) => camera.bounds(&c, r),
            None => Some((0, w, 0, h)),
        };
        let Some((x0, x1, y0, y1)) = rect else { continue };
        for y in y0..y1 {
            for x in x0..x1 {
                let d = camera.ray(x, y);
                if let Some((t, n)) = intersect(&prim.shape, &origin, &d) {
                    let i = y * w + x;
                    if t < depth[i] {
                        depth[i] = t;
                        ids[i] = prim.class;
                        data[i * 3..i * 3 + 3].copy_from_slice(&shade(prim.color, &n, &d));
                    }
                }
            }
        }
    }
    Rendered {
        image: Image { width: w, height: h, data },
        ids,
    }
}
