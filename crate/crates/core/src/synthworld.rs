//! Procedural box-and-plane scenes with a flat-shaded ray-cast renderer.
//!
//! Colours are quantised to multiples of 1/255 so rendered images survive an
//! 8-bit PNG round trip unchanged.

use std::f64::consts::PI;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{add3, pixel_ray, scale3, sub3, CameraPose, Vec3};
use crate::imaging::Image;
use crate::rng::{self, Rng};

const HIT_EPS: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Material {
    Flat([f64; 3]),
    /// 3-D checkerboard with cell size `scale`, evaluated at the hit point.
    Checker { a: [f64; 3], b: [f64; 3], scale: f64 },
}

impl Material {
    pub fn colour_at(&self, p: Vec3) -> [f64; 3] {
        match self {
            Material::Flat(c) => *c,
            Material::Checker { a, b, scale } => {
                let s: i64 = p.iter().map(|v| (v / scale).floor() as i64).sum();
                if s.rem_euclid(2) == 0 { *a } else { *b }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    /// Axis-aligned box `[min, max]`.
    Cuboid { min: Vec3, max: Vec3 },
    /// Axis-aligned rectangle at `coord = offset` on `axis`, spanning `lo..hi`
    /// along the other two axes (in increasing axis order).
    Rect { axis: usize, offset: f64, lo: [f64; 2], hi: [f64; 2] },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub material: Material,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub seed: u64,
    pub primitives: Vec<Primitive>,
    pub background: [f64; 3],
}

/// Nearest intersection along a ray.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub primitive: usize,
}

impl Shape {
    /// Smallest `t > HIT_EPS` at which the ray meets the surface.
    pub fn intersect(&self, o: Vec3, d: Vec3) -> Option<f64> {
        match self {
            Shape::Cuboid { min, max } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                for a in 0..3 {
                    if d[a] == 0.0 {
                        if o[a] < min[a] || o[a] > max[a] {
                            return None;
                        }
                        continue;
                    }
                    let inv = 1.0 / d[a];
                    let (mut ta, mut tb) = ((min[a] - o[a]) * inv, (max[a] - o[a]) * inv);
                    if ta > tb {
                        std::mem::swap(&mut ta, &mut tb);
                    }
                    t0 = t0.max(ta);
                    t1 = t1.min(tb);
                }
                if t0 > t1 {
                    None
                } else if t0 > HIT_EPS {
                    Some(t0)
                } else if t1 > HIT_EPS {
                    Some(t1)
                } else {
                    None
                }
            }
            Shape::Rect { axis, offset, lo, hi } => {
                let a = *axis;
                if d[a] == 0.0 {
                    return None;
                }
                let t = (offset - o[a]) / d[a];
                if t <= HIT_EPS {
                    return None;
                }
                let p = add3(o, scale3(d, t));
                let others = other_axes(a);
                for (k, &ax) in others.iter().enumerate() {
                    if p[ax] < lo[k] || p[ax] > hi[k] {
                        return None;
                    }
                }
                Some(t)
            }
        }
    }
}

fn other_axes(a: usize) -> [usize; 2] {
    match a {
        0 => [1, 2],
        1 => [0, 2],
        _ => [0, 1],
    }
}

impl Scene {
    pub fn empty(seed: u64, background: [f64; 3]) -> Self {
        Self {
            seed,
            primitives: Vec::new(),
            background,
        }
    }

    pub fn trace(&self, o: Vec3, d: Vec3) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for (i, p) in self.primitives.iter().enumerate() {
            if let Some(t) = p.shape.intersect(o, d) {
                if best.is_none_or(|b| t < b.t) {
                    best = Some(Hit { t, primitive: i });
                }
            }
        }
        best
    }

    pub fn shade(&self, o: Vec3, d: Vec3) -> [f64; 3] {
        match self.trace(o, d) {
            Some(h) => self.primitives[h.primitive].material.colour_at(add3(o, scale3(d, h.t))),
            None => self.background,
        }
    }

    /// Whether `x` (on primitive `own`) is hidden from `eye` by a different
    /// primitive.
    pub fn occluded_by_other(&self, eye: Vec3, x: Vec3, own: usize) -> bool {
        let v = sub3(x, eye);
        let dist = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let d = scale3(v, 1.0 / dist);
        self.primitives.iter().enumerate().any(|(i, p)| {
            i != own && p.shape.intersect(eye, d).is_some_and(|t| t < dist * (1.0 - 1e-9))
        })
    }
}

/// Render `scene` through `pose`: nearest hit per pixel centre, flat colour.
pub fn render_view(scene: &Scene, pose: &CameraPose) -> Result<Image> {
    pose.validate()?;
    let (w, h) = (pose.width(), pose.height());
    let mut img = Image::new(w, h);
    for v in 0..h {
        for u in 0..w {
            let (o, d) = pixel_ray(pose, u, v)?;
            img.set_pixel(u, v, scene.shade(o, d));
        }
    }
    Ok(img)
}

/// Primitive index hit by every pixel (`None` for background).
pub fn hit_map(scene: &Scene, pose: &CameraPose) -> Result<Vec<Option<usize>>> {
    let (w, h) = (pose.width(), pose.height());
    let mut out = Vec::with_capacity(w * h);
    for v in 0..h {
        for u in 0..w {
            let (o, d) = pixel_ray(pose, u, v)?;
            out.push(scene.trace(o, d).map(|h| h.primitive));
        }
    }
    Ok(out)
}

fn quantised_colour(rng: &mut Rng) -> [f64; 3] {
    [0; 3].map(|_| rng.random_range(0..=255u32) as f64 / 255.0)
}

/// Orbit placement of one camera.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrbitParams {
    /// Azimuth in radians.
    pub angle: f64,
    pub radius: f64,
    pub height: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OrbitConfig {
    pub radius: f64,
    pub radius_jitter: f64,
    pub height: f64,
    pub height_jitter: f64,
    /// Angular extent of the camera arc in degrees.
    pub arc_degrees: f64,
    pub fov_degrees: f64,
}

impl Default for OrbitConfig {
    fn default() -> Self {
        Self {
            radius: 3.2,
            radius_jitter: 0.25,
            height: 0.9,
            height_jitter: 0.3,
            arc_degrees: 150.0,
            fov_degrees: 40.0,
        }
    }
}

impl OrbitConfig {
    pub fn pose(&self, o: &OrbitParams, resolution: (usize, usize)) -> Result<CameraPose> {
        let eye = [o.radius * o.angle.cos(), -o.height, o.radius * o.angle.sin()];
        let focal = 0.5 * resolution.0 as f64 / (0.5 * self.fov_degrees.to_radians()).tan();
        // world "up" is −y so that image rows run top to bottom with y down
        CameraPose::look_at(eye, [0.0; 3], [0.0, -1.0, 0.0], focal, resolution)
    }

    /// `n` cameras with increasing azimuth over the arc, jittered in radius
    /// and height.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Vec<OrbitParams> {
        let start = rng.random_range(0.0..2.0 * PI);
        let arc = self.arc_degrees.to_radians();
        (0..n)
            .map(|i| OrbitParams {
                angle: start + arc * i as f64 / (n.max(2) - 1) as f64,
                radius: self.radius + rng.random_range(-self.radius_jitter..=self.radius_jitter),
                height: self.height + rng.random_range(-self.height_jitter..=self.height_jitter),
            })
            .collect()
    }
}

/// Fraction of pixels seen from `a` whose surface point is hidden from `b`'s
/// camera centre by another primitive.
pub fn occluded_fraction(scene: &Scene, a: &CameraPose, b: &CameraPose) -> Result<f64> {
    let (w, h) = (a.width(), a.height());
    let eye_b = b.center();
    let mut hidden = 0usize;
    for v in 0..h {
        for u in 0..w {
            let (o, d) = pixel_ray(a, u, v)?;
            if let Some(hit) = scene.trace(o, d) {
                let x = add3(o, scale3(d, hit.t));
                if scene.occluded_by_other(eye_b, x, hit.primitive) {
                    hidden += 1;
                }
            }
        }
    }
    Ok(hidden as f64 / (w * h) as f64)
}

const MAX_TRIES: usize = 100;
const OCCLUSION_PROBE_RES: usize = 32;
const MIN_OCCLUDED_FRACTION: f64 = 0.05;

fn random_scene(seed: u64, attempt: u64) -> Scene {
    let mut r = rng::stream(seed, &[rng::tag::SCENE, attempt]);
    let background = quantised_colour(&mut r);
    let count = r.random_range(3..=12usize);
    let mut primitives = Vec::with_capacity(count);
    // a textured floor under most scenes
    if r.random_bool(0.7) {
        let y = r.random_range(0.5..0.9);
        primitives.push(Primitive {
            shape: Shape::Rect {
                axis: 1,
                offset: y,
                lo: [-1.0, -1.0],
                hi: [1.0, 1.0],
            },
            material: Material::Checker {
                a: quantised_colour(&mut r),
                b: quantised_colour(&mut r),
                scale: r.random_range(0.2..0.5),
            },
        });
    }
    while primitives.len() < count {
        let material = if r.random_bool(0.3) {
            Material::Checker {
                a: quantised_colour(&mut r),
                b: quantised_colour(&mut r),
                scale: r.random_range(0.1..0.3),
            }
        } else {
            Material::Flat(quantised_colour(&mut r))
        };
        let shape = if r.random_bool(0.8) {
            let mut min = [0.0; 3];
            let mut max = [0.0; 3];
            for a in 0..3 {
                let c: f64 = r.random_range(-0.6..0.6);
                let half = r.random_range(0.1..0.35);
                min[a] = (c - half).max(-1.0);
                max[a] = (c + half).min(1.0);
            }
            Shape::Cuboid { min, max }
        } else {
            let axis = r.random_range(0..3usize);
            let offset = r.random_range(-0.7..0.7);
            let mut lo = [0.0; 2];
            let mut hi = [0.0; 2];
            for k in 0..2 {
                let c: f64 = r.random_range(-0.5..0.5);
                let half = r.random_range(0.15..0.45);
                lo[k] = (c - half).max(-1.0);
                hi[k] = (c + half).min(1.0);
            }
            Shape::Rect { axis, offset, lo, hi }
        };
        primitives.push(Primitive { shape, material });
    }
    Scene {
        seed,
        primitives,
        background,
    }
}

/// Deterministic scene for `seed`, rejected and redrawn until some orbit
/// camera sees at least 5% of its pixels on surfaces hidden from the
/// opposite side of the orbit.
pub fn generate_scene(seed: u64) -> Result<Scene> {
    let orbit = OrbitConfig::default();
    let res = (OCCLUSION_PROBE_RES, OCCLUSION_PROBE_RES);
    for attempt in 0..MAX_TRIES as u64 {
        let scene = random_scene(seed, attempt);
        for k in 0..8 {
            let angle = k as f64 * PI / 4.0;
            let a = OrbitParams {
                angle,
                radius: orbit.radius,
                height: orbit.height,
            };
            let b = OrbitParams { angle: angle + PI, ..a };
            if occluded_fraction(&scene, &orbit.pose(&a, res)?, &orbit.pose(&b, res)?)? >= MIN_OCCLUDED_FRACTION {
                return Ok(scene);
            }
        }
    }
    Err(Error::Generation(format!(
        "no scene with enough occlusion after {MAX_TRIES} tries (seed {seed})"
    )))
}

/// View roles within one orbit of `n` cameras.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub context: Vec<usize>,
    /// Strictly between the context views along the arc.
    pub interp: Vec<usize>,
    /// Outside the context span.
    pub extra: Vec<usize>,
}

pub fn orbit_splits(n: usize) -> Splits {
    if n < 2 {
        return Splits {
            context: (0..n).collect(),
            ..Default::default()
        };
    }
    let (a, b) = (n / 4, (3 * n / 4).max(n / 4 + 1).min(n - 1));
    Splits {
        context: vec![a, b],
        interp: (a + 1..b).collect(),
        extra: (0..a).chain(b + 1..n).collect(),
    }
}

/// Centroid of the camera centres.
pub fn camera_centroid(poses: &[CameraPose]) -> Vec3 {
    let mut c = [0.0; 3];
    for p in poses {
        c = add3(c, p.center());
    }
    scale3(c, 1.0 / poses.len().max(1) as f64)
}
