//! Pinhole cameras and per-pixel Plücker ray embeddings.
//!
//! Poses are world←camera: `x_world = R·x_cam + t`, so `t` is the camera
//! centre. Camera axes follow the x-right, y-down, z-forward convention and
//! pixel `(u, v)` is sampled at its centre `(u + 0.5, v + 0.5)`.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};

pub type Vec3 = [f64; 3];

const ORTHO_TOL: f64 = 1e-6;

#[inline]
pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn dot3(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn norm3(a: Vec3) -> f64 {
    dot3(a, a).sqrt()
}

#[inline]
pub fn normalize(a: Vec3) -> Vec3 {
    let n = norm3(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

#[inline]
pub fn sub3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn add3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn scale3(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

/// Camera extrinsics (world←camera) and pinhole intrinsics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub rotation: [[f64; 3]; 3],
    pub translation: Vec3,
    pub focal: (f64, f64),
    pub principal_point: (f64, f64),
    pub resolution: (usize, usize),
}

impl CameraPose {
    pub fn new(
        rotation: [[f64; 3]; 3],
        translation: Vec3,
        focal: (f64, f64),
        principal_point: (f64, f64),
        resolution: (usize, usize),
    ) -> Result<Self> {
        let pose = Self {
            rotation,
            translation,
            focal,
            principal_point,
            resolution,
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                // (RᵀR)_ij = Σ_k R_ki R_kj
                let v: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                if (v - expect).abs() > ORTHO_TOL {
                    return Err(domain!("rotation is not orthonormal (RᵀR[{i}][{j}] = {v})"));
                }
            }
        }
        let det = dot3(r[0], cross(r[1], r[2]));
        if (det - 1.0).abs() > ORTHO_TOL {
            return Err(domain!("rotation determinant is {det}, expected +1"));
        }
        if !(self.focal.0 > 0.0 && self.focal.1 > 0.0) {
            return Err(domain!("focal lengths must be positive, got {:?}", self.focal));
        }
        if self.resolution.0 == 0 || self.resolution.1 == 0 {
            return Err(domain!("resolution must be positive, got {:?}", self.resolution));
        }
        let finite = self.translation.iter().all(|v| v.is_finite())
            && self.principal_point.0.is_finite()
            && self.principal_point.1.is_finite();
        if !finite {
            return Err(domain!("pose contains non-finite values"));
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target`; `up` is the world up direction.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, focal: f64, resolution: (usize, usize)) -> Result<Self> {
        let forward = normalize(sub3(target, eye));
        let right = cross(forward, up);
        if norm3(right) < 1e-9 {
            return Err(domain!("look_at: up vector parallel to viewing direction"));
        }
        let right = normalize(right);
        let down = cross(forward, right);
        // columns are the camera axes expressed in world coordinates
        let rotation = [
            [right[0], down[0], forward[0]],
            [right[1], down[1], forward[1]],
            [right[2], down[2], forward[2]],
        ];
        Self::new(
            rotation,
            eye,
            (focal, focal),
            (resolution.0 as f64 / 2.0, resolution.1 as f64 / 2.0),
            resolution,
        )
    }

    pub fn width(&self) -> usize {
        self.resolution.0
    }

    pub fn height(&self) -> usize {
        self.resolution.1
    }

    pub fn center(&self) -> Vec3 {
        self.translation
    }

    /// Rotate a camera-frame vector into the world frame.
    pub fn to_world(&self, v: Vec3) -> Vec3 {
        let r = &self.rotation;
        [dot3(r[0], v), dot3(r[1], v), dot3(r[2], v)]
    }

    /// World point to camera frame.
    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        let d = sub3(p, self.translation);
        let r = &self.rotation;
        [
            r[0][0] * d[0] + r[1][0] * d[1] + r[2][0] * d[2],
            r[0][1] * d[0] + r[1][1] * d[1] + r[2][1] * d[2],
            r[0][2] * d[0] + r[1][2] * d[1] + r[2][2] * d[2],
        ]
    }

    /// Continuous pixel coordinates of a world point, `None` behind the camera.
    pub fn project(&self, p: Vec3) -> Option<(f64, f64)> {
        let c = self.to_camera(p);
        if c[2] <= 0.0 {
            return None;
        }
        Some((
            self.focal.0 * c[0] / c[2] + self.principal_point.0,
            self.focal.1 * c[1] / c[2] + self.principal_point.1,
        ))
    }

    /// Unnormalised world-space ray direction through the centre of pixel (u, v).
    fn ray_direction(&self, u: usize, v: usize) -> Vec3 {
        let x = (u as f64 + 0.5 - self.principal_point.0) / self.focal.0;
        let y = (v as f64 + 0.5 - self.principal_point.1) / self.focal.1;
        self.to_world([x, y, 1.0])
    }

    /// 12 row-major `[R|t]` values.
    pub fn rt_row_major(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0][0], r[0][1], r[0][2], t[0], r[1][0], r[1][1], r[1][2], t[1], r[2][0], r[2][1], r[2][2], t[2],
        ]
    }

    pub fn from_rt_row_major(
        rt: &[f64; 12],
        intrinsics: [f64; 4],
        resolution: (usize, usize),
    ) -> Result<Self> {
        let rotation = [
            [rt[0], rt[1], rt[2]],
            [rt[4], rt[5], rt[6]],
            [rt[8], rt[9], rt[10]],
        ];
        Self::new(
            rotation,
            [rt[3], rt[7], rt[11]],
            (intrinsics[0], intrinsics[1]),
            (intrinsics[2], intrinsics[3]),
            resolution,
        )
    }

    /// Same camera shifted by `delta` in world space.
    pub fn translated(&self, delta: Vec3) -> Self {
        let mut p = self.clone();
        p.translation = add3(p.translation, delta);
        p
    }
}

/// On-disk pose record: 12 row-major `[R|t]` floats, `(fx, fy, cx, cy)` and `(W, H)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub rt: Vec<f64>,
    pub intrinsics: [f64; 4],
    pub resolution: [usize; 2],
}

/// Byte length of a binary pose record.
pub const POSE_RECORD_BYTES: usize = 16 * 8 + 2 * 4;

impl PoseRecord {
    pub fn from_pose(p: &CameraPose) -> Self {
        Self {
            rt: p.rt_row_major().to_vec(),
            intrinsics: [p.focal.0, p.focal.1, p.principal_point.0, p.principal_point.1],
            resolution: [p.resolution.0, p.resolution.1],
        }
    }

    pub fn to_pose(&self) -> Result<CameraPose> {
        let rt: [f64; 12] = self
            .rt
            .as_slice()
            .try_into()
            .map_err(|_| domain!("pose record needs 12 [R|t] values, got {}", self.rt.len()))?;
        CameraPose::from_rt_row_major(&rt, self.intrinsics, (self.resolution[0], self.resolution[1]))
    }

    /// Little-endian binary form: 16 `f64` followed by two `u32`.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(POSE_RECORD_BYTES);
        for v in self.rt.iter().chain(&self.intrinsics) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &v in &self.resolution {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out
    }

    pub fn from_le_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() != POSE_RECORD_BYTES {
            return Err(domain!(
                "binary pose record must be {POSE_RECORD_BYTES} bytes, got {}",
                bytes.len()
            ));
        }
        let f = |i: usize| f64::from_le_bytes(bytes[i * 8..i * 8 + 8].try_into().unwrap());
        let u = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        Ok(Self {
            rt: (0..12).map(f).collect(),
            intrinsics: [f(12), f(13), f(14), f(15)],
            resolution: [u(128), u(132)],
        })
    }
}

/// World-space ray through pixel (u, v): the camera centre and a unit direction.
pub fn pixel_ray(pose: &CameraPose, u: usize, v: usize) -> Result<(Vec3, Vec3)> {
    if u >= pose.width() || v >= pose.height() {
        return Err(Error::Domain(format!(
            "pixel ({u}, {v}) outside {}x{} image",
            pose.width(),
            pose.height()
        )));
    }
    Ok((pose.center(), normalize(pose.ray_direction(u, v))))
}

/// Per-pixel Plücker coordinates `(d, o × d)`, row-major over pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct PluckerGrid {
    pub width: usize,
    pub height: usize,
    pub directions: Vec<Vec3>,
    pub moments: Vec<Vec3>,
}

impl PluckerGrid {
    #[inline]
    pub fn at(&self, u: usize, v: usize) -> (Vec3, Vec3) {
        let i = v * self.width + u;
        (self.directions[i], self.moments[i])
    }
}

pub fn plucker_grid(pose: &CameraPose) -> Result<PluckerGrid> {
    pose.validate()?;
    let (w, h) = pose.resolution;
    let o = pose.center();
    let mut directions = Vec::with_capacity(w * h);
    let mut moments = Vec::with_capacity(w * h);
    for v in 0..h {
        for u in 0..w {
            let d = normalize(pose.ray_direction(u, v));
            directions.push(d);
            moments.push(cross(o, d));
        }
    }
    Ok(PluckerGrid {
        width: w,
        height: h,
        directions,
        moments,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const I3: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

    fn close(a: Vec3, b: Vec3, tol: f64) -> bool {
        (0..3).all(|i| (a[i] - b[i]).abs() <= tol)
    }

    #[test]
    fn optical_axis_pixel_of_canonical_camera() {
        let pose = CameraPose::new(I3, [0.0; 3], (1.0, 1.0), (0.5, 0.5), (1, 1)).unwrap();
        let (_, d) = pixel_ray(&pose, 0, 0).unwrap();
        assert!(close(d, [0.0, 0.0, 1.0], 1e-15));
    }

    #[test]
    fn origin_is_camera_center() {
        let pose = CameraPose::new(I3, [1.0, 2.0, 3.0], (10.0, 10.0), (2.0, 2.0), (4, 4)).unwrap();
        for (u, v) in [(0, 0), (3, 1), (2, 3)] {
            let (o, _) = pixel_ray(&pose, u, v).unwrap();
            assert_eq!(o, [1.0, 2.0, 3.0]);
        }
    }

    #[test]
    fn hand_evaluated_pinhole_direction() {
        let pose = CameraPose::new(I3, [0.0; 3], (2.0, 2.0), (2.0, 2.0), (4, 4)).unwrap();
        let (_, d) = pixel_ray(&pose, 3, 1).unwrap();
        let n = (0.75f64 * 0.75 + 0.25 * 0.25 + 1.0).sqrt();
        assert!(close(d, [0.75 / n, -0.25 / n, 1.0 / n], 1e-15));
    }

    #[test]
    fn out_of_bounds_pixel_is_rejected() {
        let pose = CameraPose::new(I3, [0.0; 3], (2.0, 2.0), (2.0, 2.0), (4, 4)).unwrap();
        assert!(matches!(pixel_ray(&pose, 4, 0), Err(Error::Domain(_))));
        assert!(matches!(pixel_ray(&pose, 0, 9), Err(Error::Domain(_))));
    }

    #[test]
    fn invalid_poses_are_rejected() {
        let bad_rot = [[1.0, 0.1, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(CameraPose::new(bad_rot, [0.0; 3], (1.0, 1.0), (0.0, 0.0), (2, 2)).is_err());
        let reflection = [[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(CameraPose::new(reflection, [0.0; 3], (1.0, 1.0), (0.0, 0.0), (2, 2)).is_err());
        assert!(CameraPose::new(I3, [0.0; 3], (0.0, 1.0), (0.0, 0.0), (2, 2)).is_err());
        assert!(CameraPose::new(I3, [0.0; 3], (1.0, 1.0), (0.0, 0.0), (0, 2)).is_err());
    }

    #[test]
    fn camera_at_origin_has_zero_moments() {
        let pose = CameraPose::new(I3, [0.0; 3], (3.0, 3.0), (2.0, 2.0), (4, 4)).unwrap();
        let g = plucker_grid(&pose).unwrap();
        assert!(g.moments.iter().all(|m| *m == [0.0, 0.0, 0.0]));
    }

    #[test]
    fn moment_by_hand() {
        assert_eq!(cross([0.0, 1.0, 0.0], [0.0, 0.0, 1.0]), [1.0, 0.0, 0.0]);
        // same thing through the grid: the centre pixel of an odd image looks along +z
        let pose = CameraPose::new(I3, [0.0, 1.0, 0.0], (2.0, 2.0), (1.5, 1.5), (3, 3)).unwrap();
        let g = plucker_grid(&pose).unwrap();
        let (d, m) = g.at(1, 1);
        assert!(close(d, [0.0, 0.0, 1.0], 1e-15));
        assert!(close(m, [1.0, 0.0, 0.0], 1e-15));
    }

    #[test]
    fn look_at_faces_target() {
        let pose = CameraPose::look_at([0.0, 0.0, -3.0], [0.0; 3], [0.0, 1.0, 0.0], 8.0, (8, 8)).unwrap();
        let (px, py) = pose.project([0.0; 3]).unwrap();
        assert!((px - 4.0).abs() < 1e-12 && (py - 4.0).abs() < 1e-12);
        // world up appears towards smaller v (image y points down)
        let (_, py_up) = pose.project([0.0, 0.5, 0.0]).unwrap();
        assert!(py_up < 4.0);
    }

    #[test]
    fn pose_record_round_trips() {
        let pose = CameraPose::look_at([1.0, 0.5, -2.0], [0.1, 0.0, 0.2], [0.0, 1.0, 0.0], 40.0, (64, 48)).unwrap();
        let rec = PoseRecord::from_pose(&pose);
        assert_eq!(rec.to_pose().unwrap(), pose);
        let bytes = rec.to_le_bytes();
        assert_eq!(bytes.len(), POSE_RECORD_BYTES);
        assert_eq!(PoseRecord::from_le_bytes(&bytes).unwrap(), rec);
        let json = serde_json::to_string(&rec).unwrap();
        let back: PoseRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back, rec);
    }

    fn arb_pose() -> impl Strategy<Value = CameraPose> {
        (
            prop::array::uniform3(-3.0f64..3.0),
            prop::array::uniform3(-0.5f64..0.5),
            1.0f64..60.0,
        )
            .prop_filter_map("degenerate look_at", |(eye, target, f)| {
                if norm3(sub3(target, eye)) < 0.5 {
                    return None;
                }
                CameraPose::look_at(eye, target, [0.0, 1.0, 0.0], f, (6, 5)).ok()
            })
    }

    proptest! {
        #[test]
        fn plucker_is_invariant_to_sliding_along_the_ray(pose in arb_pose(), alpha in -10.0f64..10.0, u in 0usize..6, v in 0usize..5) {
            let g = plucker_grid(&pose).unwrap();
            let (d, m) = g.at(u, v);
            let moved = pose.translated(scale3(d, alpha));
            let g2 = plucker_grid(&moved).unwrap();
            let (d2, m2) = g2.at(u, v);
            prop_assert!(close(d, d2, 1e-6));
            prop_assert!(close(m, m2, 1e-6));
        }

        #[test]
        fn moments_are_orthogonal_and_directions_unit(pose in arb_pose()) {
            let g = plucker_grid(&pose).unwrap();
            for (d, m) in g.directions.iter().zip(&g.moments) {
                prop_assert!((norm3(*d) - 1.0).abs() < 1e-6);
                prop_assert!(dot3(*d, *m).abs() < 1e-6);
            }
            // bit-identical on recomputation
            prop_assert_eq!(plucker_grid(&pose).unwrap(), g);
        }
    }
}
