use super::{Box2D, Box3D, Point3};
use serde::{Deserialize, Serialize};

/// Pinhole camera with an ego→camera rigid transform.
///
/// Camera frame: `x` right, `y` down, `z` along the optical axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub intrinsics: [[f64; 3]; 3],
    /// Rotation part of the ego→camera transform.
    pub rotation: [[f64; 3]; 3],
    /// Translation part of the ego→camera transform.
    pub translation: [f64; 3],
    pub image_width: u32,
    pub image_height: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

impl Projection {
    pub fn pixel(&self) -> (u32, u32) {
        (self.u.floor() as u32, self.v.floor() as u32)
    }
}

impl CameraModel {
    pub fn new(
        focal: f64,
        principal: (f64, f64),
        rotation: [[f64; 3]; 3],
        translation: [f64; 3],
        image_width: u32,
        image_height: u32,
    ) -> Self {
        Self {
            intrinsics: [
                [focal, 0.0, principal.0],
                [0.0, focal, principal.1],
                [0.0, 0.0, 1.0],
            ],
            rotation,
            translation,
            image_width,
            image_height,
        }
    }

    /// Camera mounted at `position` looking horizontally along ego yaw `yaw`
    /// with horizontal field of view `hfov` (radians).
    pub fn looking_at_yaw(
        position: Point3,
        yaw: f64,
        hfov: f64,
        image_width: u32,
        image_height: u32,
    ) -> Self {
        let (s, c) = yaw.sin_cos();
        // rows: camera x (right), y (down), z (forward) expressed in ego
        let rotation = [[s, -c, 0.0], [0.0, 0.0, -1.0], [c, s, 0.0]];
        let p = [position.x, position.y, position.z];
        let mut translation = [0.0; 3];
        for (r, t) in rotation.iter().zip(translation.iter_mut()) {
            *t = -(r[0] * p[0] + r[1] * p[1] + r[2] * p[2]);
        }
        let focal = 0.5 * image_width as f64 / (0.5 * hfov).tan();
        Self::new(
            focal,
            (0.5 * image_width as f64, 0.5 * image_height as f64),
            rotation,
            translation,
            image_width,
            image_height,
        )
    }

    pub fn to_camera(&self, p: &Point3) -> [f64; 3] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0][0] * p.x + r[0][1] * p.y + r[0][2] * p.z + t[0],
            r[1][0] * p.x + r[1][1] * p.y + r[1][2] * p.z + t[1],
            r[2][0] * p.x + r[2][1] * p.y + r[2][2] * p.z + t[2],
        ]
    }

    /// Pixel coordinates of a camera-frame point with positive depth, with no
    /// image-bounds check.
    fn pixel_of(&self, pc: &[f64; 3]) -> (f64, f64) {
        let k = &self.intrinsics;
        let x = k[0][0] * pc[0] + k[0][1] * pc[1] + k[0][2] * pc[2];
        let y = k[1][0] * pc[0] + k[1][1] * pc[1] + k[1][2] * pc[2];
        let w = k[2][0] * pc[0] + k[2][1] * pc[1] + k[2][2] * pc[2];
        (x / w, y / w)
    }

    pub fn in_image(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < self.image_width as f64 && v < self.image_height as f64
    }

    /// Checks the intrinsic/extrinsic invariants.
    pub fn validate(&self) -> Result<(), String> {
        let k = &self.intrinsics;
        if !(k[0][0] > 0.0 && k[1][1] > 0.0) {
            return Err("intrinsics must have positive focal entries".into());
        }
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-6 {
                    return Err("extrinsic rotation is not orthonormal".into());
                }
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if (det - 1.0).abs() > 1e-6 {
            return Err(format!("extrinsic rotation has determinant {det}"));
        }
        if self.image_width == 0 || self.image_height == 0 {
            return Err("image size must be positive".into());
        }
        Ok(())
    }
}

/// Projects `p` into `cam`. Absent when behind the camera or off-image.
pub fn project_point(cam: &CameraModel, p: &Point3) -> Option<Projection> {
    let pc = cam.to_camera(p);
    if pc[2] <= 0.0 {
        return None;
    }
    let (u, v) = cam.pixel_of(&pc);
    cam.in_image(u, v)
        .then_some(Projection { u, v, depth: pc[2] })
}

/// Axis-aligned envelope of the corners of `b` that lie in front of the
/// camera, clipped to the image. Absent when fewer than two corners have
/// positive depth or the clipped envelope is empty.
pub fn project_box3d(cam: &CameraModel, b: &Box3D) -> Option<Box2D> {
    let mut n = 0;
    let mut env = Box2D::new(f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for c in b.corners() {
        let pc = cam.to_camera(&c);
        if pc[2] <= 0.0 {
            continue;
        }
        n += 1;
        let (u, v) = cam.pixel_of(&pc);
        env.min_u = env.min_u.min(u);
        env.min_v = env.min_v.min(v);
        env.max_u = env.max_u.max(u);
        env.max_v = env.max_v.max(v);
    }
    if n < 2 {
        return None;
    }
    let (w, h) = (cam.image_width as f64, cam.image_height as f64);
    let clipped = Box2D::new(
        env.min_u.clamp(0.0, w),
        env.min_v.clamp(0.0, h),
        env.max_u.clamp(0.0, w),
        env.max_v.clamp(0.0, h),
    );
    clipped.is_valid().then_some(clipped)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const IDENTITY: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

    fn simple_cam() -> CameraModel {
        CameraModel::new(100.0, (50.0, 50.0), IDENTITY, [0.0; 3], 100, 100)
    }

    #[test]
    fn principal_ray() {
        let p = project_point(&simple_cam(), &Point3::new(0.0, 0.0, 10.0)).unwrap();
        assert_eq!((p.u, p.v, p.depth), (50.0, 50.0, 10.0));
    }

    #[test]
    fn behind_camera_is_absent() {
        assert!(project_point(&simple_cam(), &Point3::new(0.0, 0.0, -1.0)).is_none());
    }

    #[test]
    fn lateral_offset() {
        let p = project_point(&simple_cam(), &Point3::new(1.0, 0.0, 10.0)).unwrap();
        assert!((p.u - 60.0).abs() < 1e-12);
        assert!((p.v - 50.0).abs() < 1e-12);
    }

    #[test]
    fn off_image_is_absent() {
        assert!(project_point(&simple_cam(), &Point3::new(10.0, 0.0, 1.0)).is_none());
    }

    #[test]
    fn centered_cube_projects_symmetrically() {
        let b = Box3D::new(Point3::new(0.0, 0.0, 10.0), [1.0, 1.0, 1.0], 0.0);
        let bb = project_box3d(&simple_cam(), &b).unwrap();
        let (cu, cv) = bb.center();
        assert!((cu - 50.0).abs() < 1e-9 && (cv - 50.0).abs() < 1e-9);
        assert!((bb.width() - bb.height()).abs() < 1e-9);
    }

    #[test]
    fn box_behind_camera_is_absent() {
        let b = Box3D::new(Point3::new(0.0, 0.0, -10.0), [1.0, 1.0, 1.0], 0.0);
        assert!(project_box3d(&simple_cam(), &b).is_none());
    }

    #[test]
    fn ring_camera_is_valid_and_sees_forward() {
        for k in 0..6 {
            let yaw = k as f64 * std::f64::consts::PI / 3.0;
            let cam = CameraModel::looking_at_yaw(
                Point3::new(0.0, 0.0, 1.6),
                yaw,
                std::f64::consts::FRAC_PI_2,
                1600,
                900,
            );
            cam.validate().unwrap();
            let p = Point3::new(10.0 * yaw.cos(), 10.0 * yaw.sin(), 1.6);
            let pr = project_point(&cam, &p).unwrap();
            assert!((pr.u - 800.0).abs() < 1e-6 && (pr.v - 450.0).abs() < 1e-6);
            assert!((pr.depth - 10.0).abs() < 1e-9);
            // up in the world is up in the image
            let up = project_point(&cam, &Point3::new(p.x, p.y, 2.6)).unwrap();
            assert!(up.v < pr.v);
        }
    }

    #[test]
    fn envelope_matches_corner_enumeration() {
        let cam = CameraModel::looking_at_yaw(Point3::new(0.0, 0.0, 1.6), 0.3, 1.6, 1600, 900);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let b = Box3D::new(
                Point3::new(
                    rng.gen_range(-5.0..30.0),
                    rng.gen_range(-20.0..20.0),
                    rng.gen_range(0.0..3.0),
                ),
                [
                    rng.gen_range(0.3..8.0),
                    rng.gen_range(0.3..3.0),
                    rng.gen_range(0.3..3.0),
                ],
                rng.gen_range(-3.0..3.0),
            );
            let got = project_box3d(&cam, &b);
            // oracle: explicit pinhole on each corner
            let k = cam.intrinsics;
            let front: Vec<(f64, f64)> = b
                .corners()
                .iter()
                .filter_map(|c| {
                    let pc = cam.to_camera(c);
                    (pc[2] > 0.0).then(|| {
                        (
                            k[0][0] * pc[0] / pc[2] + k[0][2],
                            k[1][1] * pc[1] / pc[2] + k[1][2],
                        )
                    })
                })
                .collect();
            if front.len() < 2 {
                assert!(got.is_none());
                continue;
            }
            let lo_u = front
                .iter()
                .map(|p| p.0)
                .fold(f64::MAX, f64::min)
                .clamp(0.0, 1600.0);
            let hi_u = front
                .iter()
                .map(|p| p.0)
                .fold(f64::MIN, f64::max)
                .clamp(0.0, 1600.0);
            let lo_v = front
                .iter()
                .map(|p| p.1)
                .fold(f64::MAX, f64::min)
                .clamp(0.0, 900.0);
            let hi_v = front
                .iter()
                .map(|p| p.1)
                .fold(f64::MIN, f64::max)
                .clamp(0.0, 900.0);
            match got {
                None => assert!(hi_u <= lo_u || hi_v <= lo_v),
                Some(bb) => {
                    let want = [lo_u, lo_v, hi_u, hi_v];
                    let have = [bb.min_u, bb.min_v, bb.max_u, bb.max_v];
                    for (a, b) in have.iter().zip(want) {
                        assert!((a - b).abs() < 1e-9, "{have:?} vs {want:?}");
                    }
                }
            }
        }
    }
}
