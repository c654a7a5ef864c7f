//! Coordinate frames, ray–mesh intersection and proximity tests.
//!
//! Convention: right-handed, meters, y-up. Cameras look down their local −z
//! axis with +x to the right and +y up; image rows grow downwards.

use alloc::vec::Vec;
use core::fmt;
use core::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

/// Tolerance used when validating unit quantities read from outside.
/// Accepted values are renormalized so the stored invariant holds to 1e-9.
pub const UNIT_INPUT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub enum GeometryError {
    NonFinite(&'static str),
    NotUnit(&'static str),
    IndexOutOfRange { triangle: usize, index: u32 },
    DegenerateTriangle(usize),
    BadIntrinsics(&'static str),
    PixelOutOfBounds { u: f64, v: f64 },
}

impl fmt::Display for GeometryError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GeometryError::NonFinite(what) => write!(f, "{what} has a non-finite component"),
            GeometryError::NotUnit(what) => write!(f, "{what} is not unit length"),
            GeometryError::IndexOutOfRange { triangle, index } => {
                write!(f, "triangle {triangle} references missing vertex {index}")
            }
            GeometryError::DegenerateTriangle(t) => write!(f, "triangle {t} has zero area"),
            GeometryError::BadIntrinsics(why) => write!(f, "invalid camera intrinsics: {why}"),
            GeometryError::PixelOutOfBounds { u, v } => {
                write!(f, "pixel ({u}, {v}) lies outside the image")
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3::new(0.0, 0.0, 0.0);
    pub const X: Vec3 = Vec3::new(1.0, 0.0, 0.0);
    pub const Y: Vec3 = Vec3::new(0.0, 1.0, 0.0);
    pub const NEG_Z: Vec3 = Vec3::new(0.0, 0.0, -1.0);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        libm::sqrt(self.dot(self))
    }

    pub fn distance(self, o: Vec3) -> f64 {
        (self - o).norm()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    /// Unit vector in the same direction, or `None` for zero/non-finite input.
    pub fn normalized(self) -> Option<Vec3> {
        let n = self.norm();
        if n.is_finite() && n > 0.0 {
            Some(self * (1.0 / n))
        } else {
            None
        }
    }

    pub fn min(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x.min(o.x), self.y.min(o.y), self.z.min(o.z))
    }

    pub fn max(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x.max(o.x), self.y.max(o.y), self.z.max(o.z))
    }

    pub fn axis(self, i: usize) -> f64 {
        match i {
            0 => self.x,
            1 => self.y,
            _ => self.z,
        }
    }
}

impl From<[f64; 3]> for Vec3 {
    fn from(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }
}

impl From<Vec3> for [f64; 3] {
    fn from(v: Vec3) -> Self {
        [v.x, v.y, v.z]
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// Rotation quaternion, serialized as `[x, y, z, w]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct Quat {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
}

impl Quat {
    pub const IDENTITY: Quat = Quat { x: 0.0, y: 0.0, z: 0.0, w: 1.0 };

    /// Rotation of `angle` radians about the unit `axis`.
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Quat {
        let (s, c) = (libm::sin(angle * 0.5), libm::cos(angle * 0.5));
        Quat { x: axis.x * s, y: axis.y * s, z: axis.z * s, w: c }
    }

    pub fn norm(self) -> f64 {
        libm::sqrt(self.x * self.x + self.y * self.y + self.z * self.z + self.w * self.w)
    }

    pub fn conjugate(self) -> Quat {
        Quat { x: -self.x, y: -self.y, z: -self.z, w: self.w }
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite() && self.w.is_finite()
    }

    pub fn rotate(self, v: Vec3) -> Vec3 {
        let q = Vec3::new(self.x, self.y, self.z);
        let t = q.cross(v) * 2.0;
        v + t * self.w + q.cross(t)
    }
}

impl From<[f64; 4]> for Quat {
    fn from(a: [f64; 4]) -> Self {
        Quat { x: a[0], y: a[1], z: a[2], w: a[3] }
    }
}

impl From<Quat> for [f64; 4] {
    fn from(q: Quat) -> Self {
        [q.x, q.y, q.z, q.w]
    }
}

/// Checks a direction read from outside and returns it renormalized.
pub fn unit_direction(v: Vec3, what: &'static str) -> Result<Vec3, GeometryError> {
    if !v.is_finite() {
        return Err(GeometryError::NonFinite(what));
    }
    if libm::fabs(v.norm() - 1.0) > UNIT_INPUT_TOLERANCE {
        return Err(GeometryError::NotUnit(what));
    }
    v.normalized().ok_or(GeometryError::NotUnit(what))
}

/// A 6-DoF pose. Construct through [`Pose::new`] to get the invariants checked.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPose")]
pub struct Pose {
    pub position: Vec3,
    pub orientation: Quat,
}

#[derive(Deserialize)]
struct RawPose {
    position: Vec3,
    #[serde(default = "identity_quat")]
    orientation: Quat,
}

fn identity_quat() -> Quat {
    Quat::IDENTITY
}

impl TryFrom<RawPose> for Pose {
    type Error = GeometryError;
    fn try_from(raw: RawPose) -> Result<Self, Self::Error> {
        Pose::new(raw.position, raw.orientation)
    }
}

impl Pose {
    pub const IDENTITY: Pose = Pose { position: Vec3::ZERO, orientation: Quat::IDENTITY };

    pub fn new(position: Vec3, orientation: Quat) -> Result<Pose, GeometryError> {
        if !position.is_finite() {
            return Err(GeometryError::NonFinite("pose position"));
        }
        if !orientation.is_finite() {
            return Err(GeometryError::NonFinite("pose orientation"));
        }
        let n = orientation.norm();
        if libm::fabs(n - 1.0) > UNIT_INPUT_TOLERANCE {
            return Err(GeometryError::NotUnit("pose orientation"));
        }
        let orientation = Quat {
            x: orientation.x / n,
            y: orientation.y / n,
            z: orientation.z / n,
            w: orientation.w / n,
        };
        Ok(Pose { position, orientation })
    }

    pub fn at(position: Vec3) -> Pose {
        Pose { position, orientation: Quat::IDENTITY }
    }

    /// Local −z axis in world coordinates.
    pub fn forward(&self) -> Vec3 {
        self.orientation.rotate(Vec3::NEG_Z)
    }

    pub fn to_local(&self, world: Vec3) -> Vec3 {
        self.orientation.conjugate().rotate(world - self.position)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
}

impl Ray {
    pub fn new(origin: Vec3, direction: Vec3) -> Result<Ray, GeometryError> {
        if !origin.is_finite() {
            return Err(GeometryError::NonFinite("ray origin"));
        }
        let direction = unit_direction(direction, "ray direction")?;
        Ok(Ray { origin, direction })
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCameraFrame")]
pub struct CameraFrame {
    pub pose: Pose,
    pub intrinsics: Intrinsics,
    pub width: u32,
    pub height: u32,
}

#[derive(Deserialize)]
struct RawCameraFrame {
    pose: Pose,
    intrinsics: Intrinsics,
    width: u32,
    height: u32,
}

impl TryFrom<RawCameraFrame> for CameraFrame {
    type Error = GeometryError;
    fn try_from(raw: RawCameraFrame) -> Result<Self, Self::Error> {
        CameraFrame::new(raw.pose, raw.intrinsics, raw.width, raw.height)
    }
}

impl CameraFrame {
    pub fn new(
        pose: Pose,
        intrinsics: Intrinsics,
        width: u32,
        height: u32,
    ) -> Result<CameraFrame, GeometryError> {
        let Intrinsics { fx, fy, cx, cy } = intrinsics;
        if !(fx.is_finite() && fy.is_finite() && cx.is_finite() && cy.is_finite()) {
            return Err(GeometryError::BadIntrinsics("non-finite value"));
        }
        if fx <= 0.0 || fy <= 0.0 {
            return Err(GeometryError::BadIntrinsics("focal lengths must be positive"));
        }
        let frame = CameraFrame { pose, intrinsics, width, height };
        if !frame.contains(cx, cy) {
            return Err(GeometryError::BadIntrinsics("principal point outside the image"));
        }
        Ok(frame)
    }

    /// Half-open pixel bounds: `0 <= u < width`, `0 <= v < height`.
    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < f64::from(self.width) && v < f64::from(self.height)
    }

    /// Projects a world point to pixel coordinates. `None` when the point is
    /// not strictly in front of the camera.
    pub fn project(&self, world: Vec3) -> Option<[f64; 2]> {
        let p = self.pose.to_local(world);
        if p.z >= 0.0 {
            return None;
        }
        let depth = -p.z;
        let Intrinsics { fx, fy, cx, cy } = self.intrinsics;
        Some([cx + fx * p.x / depth, cy - fy * p.y / depth])
    }
}

/// Unprojects a pixel into a world-space ray starting at the camera center.
pub fn pixel_to_ray(frame: &CameraFrame, pixel: [f64; 2]) -> Result<Ray, GeometryError> {
    let [u, v] = pixel;
    if !frame.contains(u, v) {
        return Err(GeometryError::PixelOutOfBounds { u, v });
    }
    let Intrinsics { fx, fy, cx, cy } = frame.intrinsics;
    let local = Vec3::new((u - cx) / fx, -(v - cy) / fy, -1.0);
    let world = frame.pose.orientation.rotate(local);
    let direction = world.normalized().ok_or(GeometryError::NonFinite("ray direction"))?;
    Ok(Ray { origin: frame.pose.position, direction })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RayHit {
    pub point: Vec3,
    pub distance: f64,
    pub triangle: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Aabb {
    min: Vec3,
    max: Vec3,
}

impl Aabb {
    const EMPTY: Aabb = Aabb {
        min: Vec3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY),
        max: Vec3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
    };

    fn grow(&mut self, p: Vec3) {
        self.min = self.min.min(p);
        self.max = self.max.max(p);
    }

    fn union(mut self, o: &Aabb) -> Aabb {
        self.grow(o.min);
        self.grow(o.max);
        self
    }

    /// Slab test; returns the entry distance if the box is hit before `t_max`.
    fn hit(&self, ray: &Ray, inv: Vec3, t_max: f64) -> Option<f64> {
        let mut t0 = 0.0f64;
        let mut t1 = t_max;
        for i in 0..3 {
            let o = ray.origin.axis(i);
            let d = ray.direction.axis(i);
            let (lo, hi) = (self.min.axis(i), self.max.axis(i));
            if d == 0.0 {
                if o < lo || o > hi {
                    return None;
                }
                continue;
            }
            let inv_d = inv.axis(i);
            let mut a = (lo - o) * inv_d;
            let mut b = (hi - o) * inv_d;
            if a > b {
                core::mem::swap(&mut a, &mut b);
            }
            t0 = t0.max(a);
            t1 = t1.min(b);
            if t0 > t1 {
                return None;
            }
        }
        Some(t0)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum BvhNode {
    Leaf { bounds: Aabb, first: usize, count: usize },
    Inner { bounds: Aabb, left: usize, right: usize },
}

impl BvhNode {
    fn bounds(&self) -> &Aabb {
        match self {
            BvhNode::Leaf { bounds, .. } | BvhNode::Inner { bounds, .. } => bounds,
        }
    }
}

const LEAF_SIZE: usize = 4;

/// A validated triangle mesh with a bounding volume hierarchy for raycasts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMesh", into = "RawMesh")]
pub struct SceneMesh {
    vertices: Vec<Vec3>,
    triangles: Vec<[u32; 3]>,
    order: Vec<usize>,
    nodes: Vec<BvhNode>,
}

#[derive(Serialize, Deserialize)]
struct RawMesh {
    vertices: Vec<Vec3>,
    triangles: Vec<[u32; 3]>,
}

impl TryFrom<RawMesh> for SceneMesh {
    type Error = GeometryError;
    fn try_from(raw: RawMesh) -> Result<Self, Self::Error> {
        SceneMesh::new(raw.vertices, raw.triangles)
    }
}

impl From<SceneMesh> for RawMesh {
    fn from(m: SceneMesh) -> Self {
        RawMesh { vertices: m.vertices, triangles: m.triangles }
    }
}

impl SceneMesh {
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[u32; 3]>) -> Result<SceneMesh, GeometryError> {
        if vertices.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite("mesh vertex"));
        }
        for (t, tri) in triangles.iter().enumerate() {
            for &index in tri {
                if index as usize >= vertices.len() {
                    return Err(GeometryError::IndexOutOfRange { triangle: t, index });
                }
            }
            let [a, b, c] = tri.map(|i| vertices[i as usize]);
            let (e1, e2) = (b - a, c - a);
            let area2 = e1.cross(e2).norm();
            // Also catches NaN areas.
            if area2.partial_cmp(&(1e-12 * e1.norm() * e2.norm())) != Some(core::cmp::Ordering::Greater) {
                return Err(GeometryError::DegenerateTriangle(t));
            }
        }
        let mut mesh = SceneMesh { vertices, triangles, order: Vec::new(), nodes: Vec::new() };
        mesh.build_bvh();
        Ok(mesh)
    }

    pub fn empty() -> SceneMesh {
        SceneMesh { vertices: Vec::new(), triangles: Vec::new(), order: Vec::new(), nodes: Vec::new() }
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[u32; 3]] {
        &self.triangles
    }

    pub fn triangle(&self, t: usize) -> [Vec3; 3] {
        self.triangles[t].map(|i| self.vertices[i as usize])
    }

    fn tri_bounds(&self, t: usize) -> Aabb {
        let mut b = Aabb::EMPTY;
        for p in self.triangle(t) {
            b.grow(p);
        }
        b
    }

    fn centroid(&self, t: usize) -> Vec3 {
        let [a, b, c] = self.triangle(t);
        (a + b + c) * (1.0 / 3.0)
    }

    fn build_bvh(&mut self) {
        self.order = (0..self.triangles.len()).collect();
        self.nodes.clear();
        if !self.triangles.is_empty() {
            self.build_range(0, self.triangles.len());
        }
    }

    fn build_range(&mut self, first: usize, count: usize) -> usize {
        let mut bounds = Aabb::EMPTY;
        let mut centroids = Aabb::EMPTY;
        for &t in &self.order[first..first + count] {
            bounds = bounds.union(&self.tri_bounds(t));
            centroids.grow(self.centroid(t));
        }
        let slot = self.nodes.len();
        if count <= LEAF_SIZE {
            self.nodes.push(BvhNode::Leaf { bounds, first, count });
            return slot;
        }
        let extent = centroids.max - centroids.min;
        let axis = if extent.x >= extent.y && extent.x >= extent.z {
            0
        } else if extent.y >= extent.z {
            1
        } else {
            2
        };
        let mut order = core::mem::take(&mut self.order);
        order[first..first + count].sort_by(|&a, &b| {
            self.centroid(a)
                .axis(axis)
                .total_cmp(&self.centroid(b).axis(axis))
                .then(a.cmp(&b))
        });
        self.order = order;
        self.nodes.push(BvhNode::Leaf { bounds, first, count });
        let half = count / 2;
        let left = self.build_range(first, half);
        let right = self.build_range(first + half, count - half);
        self.nodes[slot] = BvhNode::Inner { bounds, left, right };
        slot
    }
}

/// Möller–Trumbore. Returns the ray parameter of a strictly forward hit.
fn intersect_triangle(ray: &Ray, [a, b, c]: [Vec3; 3]) -> Option<f64> {
    let e1 = b - a;
    let e2 = c - a;
    let p = ray.direction.cross(e2);
    let det = e1.dot(p);
    if libm::fabs(det) <= 1e-14 * e1.norm() * e2.norm() {
        return None;
    }
    let inv_det = 1.0 / det;
    let s = ray.origin - a;
    let u = s.dot(p) * inv_det;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(e1);
    let v = ray.direction.dot(q) * inv_det;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(q) * inv_det;
    (t > 0.0).then_some(t)
}

/// Nearest forward intersection of `ray` with `mesh`. Equal distances resolve
/// to the lower triangle index.
pub fn raycast(mesh: &SceneMesh, ray: &Ray) -> Option<RayHit> {
    if mesh.nodes.is_empty() {
        return None;
    }
    let inv = Vec3::new(1.0 / ray.direction.x, 1.0 / ray.direction.y, 1.0 / ray.direction.z);
    let mut best: Option<(f64, usize)> = None;
    let mut stack: Vec<usize> = Vec::with_capacity(32);
    stack.push(0);
    while let Some(n) = stack.pop() {
        let node = &mesh.nodes[n];
        let limit = best.map_or(f64::INFINITY, |(t, _)| t);
        if node.bounds().hit(ray, inv, limit).is_none() {
            continue;
        }
        match *node {
            BvhNode::Leaf { first, count, .. } => {
                for &t in &mesh.order[first..first + count] {
                    if let Some(d) = intersect_triangle(ray, mesh.triangle(t)) {
                        let better = match best {
                            None => true,
                            Some((bd, bt)) => d < bd || (d == bd && t < bt),
                        };
                        if better {
                            best = Some((d, t));
                        }
                    }
                }
            }
            BvhNode::Inner { left, right, .. } => {
                stack.push(right);
                stack.push(left);
            }
        }
    }
    best.map(|(distance, triangle)| RayHit { point: ray.at(distance), distance, triangle })
}

/// Closed proximity band: true iff the node is no farther than `band_radius`.
pub fn within_band(user_pose: &Pose, node_position: Vec3, band_radius: f64) -> bool {
    user_pose.position.distance(node_position) <= band_radius
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn frame(width: u32, height: u32) -> CameraFrame {
        CameraFrame::new(
            Pose::IDENTITY,
            Intrinsics { fx: 500.0, fy: 500.0, cx: 320.0, cy: 240.0 },
            width,
            height,
        )
        .unwrap()
    }

    fn square_at(z: f64) -> SceneMesh {
        SceneMesh::new(
            vec![
                Vec3::new(-1.0, -1.0, z),
                Vec3::new(1.0, -1.0, z),
                Vec3::new(1.0, 1.0, z),
                Vec3::new(-1.0, 1.0, z),
            ],
            vec![[0, 1, 2], [0, 2, 3]],
        )
        .unwrap()
    }

    #[test]
    fn principal_point_looks_forward() {
        let ray = pixel_to_ray(&frame(640, 480), [320.0, 240.0]).unwrap();
        assert_eq!(ray.origin, Vec3::ZERO);
        assert_eq!(ray.direction, Vec3::NEG_Z);
    }

    #[test]
    fn one_focal_length_right_is_45_degrees() {
        let ray = pixel_to_ray(&frame(1000, 480), [820.0, 240.0]).unwrap();
        let h = core::f64::consts::FRAC_1_SQRT_2;
        assert!((ray.direction.x - h).abs() < 1e-15);
        assert!(ray.direction.y.abs() < 1e-15);
        assert!((ray.direction.z + h).abs() < 1e-15);
    }

    #[test]
    fn pixel_outside_image_is_rejected() {
        let f = frame(640, 480);
        assert!(matches!(
            pixel_to_ray(&f, [640.0, 10.0]),
            Err(GeometryError::PixelOutOfBounds { .. })
        ));
        assert!(pixel_to_ray(&f, [-0.5, 10.0]).is_err());
    }

    // Written independently of `pixel_to_ray`: builds the camera basis from
    // the rotation matrix of the quaternion instead of rotating a vector.
    fn unproject_oracle(f: &CameraFrame, u: f64, v: f64) -> [f64; 3] {
        let q = f.pose.orientation;
        let (x, y, z, w) = (q.x, q.y, q.z, q.w);
        let m = [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - z * w), 2.0 * (x * z + y * w)],
            [2.0 * (x * y + z * w), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - x * w)],
            [2.0 * (x * z - y * w), 2.0 * (y * z + x * w), 1.0 - 2.0 * (x * x + y * y)],
        ];
        let i = f.intrinsics;
        let d = [(u - i.cx) / i.fx, (i.cy - v) / i.fy, -1.0];
        let mut out = [0.0; 3];
        for r in 0..3 {
            out[r] = m[r][0] * d[0] + m[r][1] * d[1] + m[r][2] * d[2];
        }
        let n = (out[0] * out[0] + out[1] * out[1] + out[2] * out[2]).sqrt();
        out.map(|c| c / n)
    }

    fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
        loop {
            let v = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let n = v.norm();
            if n > 0.1 && n <= 1.0 {
                return v * (1.0 / n);
            }
        }
    }

    fn random_frame(rng: &mut ChaCha8Rng) -> CameraFrame {
        let axis = random_unit(rng);
        let pose = Pose::new(
            Vec3::new(rng.gen_range(-3.0..3.0), rng.gen_range(0.0..2.0), rng.gen_range(-3.0..3.0)),
            Quat::from_axis_angle(axis, rng.gen_range(-3.1..3.1)),
        )
        .unwrap();
        let (w, h) = (rng.gen_range(200..1920u32), rng.gen_range(200..1080u32));
        let intr = Intrinsics {
            fx: rng.gen_range(200.0..1500.0),
            fy: rng.gen_range(200.0..1500.0),
            cx: rng.gen_range(0.0..f64::from(w)),
            cy: rng.gen_range(0.0..f64::from(h)),
        };
        CameraFrame::new(pose, intr, w, h).unwrap()
    }

    #[test]
    fn unprojection_matches_matrix_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let f = random_frame(&mut rng);
            let px = [rng.gen_range(0.0..f64::from(f.width)), rng.gen_range(0.0..f64::from(f.height))];
            let ray = pixel_to_ray(&f, px).unwrap();
            let expect = unproject_oracle(&f, px[0], px[1]);
            assert!((ray.direction.x - expect[0]).abs() < 1e-12);
            assert!((ray.direction.y - expect[1]).abs() < 1e-12);
            assert!((ray.direction.z - expect[2]).abs() < 1e-12);
            assert_eq!(ray.origin, f.pose.position);
        }
    }

    #[test]
    fn reprojecting_a_hit_recovers_the_pixel() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut checked = 0;
        for _ in 0..200 {
            let f = random_frame(&mut rng);
            let px = [rng.gen_range(0.0..f64::from(f.width)), rng.gen_range(0.0..f64::from(f.height))];
            let ray = pixel_to_ray(&f, px).unwrap();
            let hit = ray.at(rng.gen_range(0.2..10.0));
            let back = f.project(hit).expect("point in front of camera");
            assert!((back[0] - px[0]).abs() < 1e-6 && (back[1] - px[1]).abs() < 1e-6);
            checked += 1;
        }
        assert_eq!(checked, 200);
    }

    #[test]
    fn perpendicular_central_hit() {
        let mesh = square_at(-2.0);
        let hit = raycast(&mesh, &Ray::new(Vec3::ZERO, Vec3::NEG_Z).unwrap()).unwrap();
        assert_eq!(hit.point, Vec3::new(0.0, 0.0, -2.0));
        assert_eq!(hit.distance, 2.0);
    }

    #[test]
    fn ray_pointing_away_misses() {
        let mesh = square_at(-2.0);
        assert!(raycast(&mesh, &Ray::new(Vec3::ZERO, Vec3::new(0.0, 0.0, 1.0)).unwrap()).is_none());
        assert!(raycast(&SceneMesh::empty(), &Ray::new(Vec3::ZERO, Vec3::NEG_Z).unwrap()).is_none());
    }

    #[test]
    fn mesh_validation_rejects_bad_input() {
        let v = vec![Vec3::ZERO, Vec3::X, Vec3::Y];
        assert!(matches!(
            SceneMesh::new(v.clone(), vec![[0, 1, 3]]),
            Err(GeometryError::IndexOutOfRange { triangle: 0, index: 3 })
        ));
        assert!(matches!(
            SceneMesh::new(v.clone(), vec![[0, 1, 1]]),
            Err(GeometryError::DegenerateTriangle(0))
        ));
        let collinear = vec![Vec3::ZERO, Vec3::X, Vec3::X * 2.0];
        assert!(SceneMesh::new(collinear, vec![[0, 1, 2]]).is_err());
        assert!(SceneMesh::new(v, vec![[0, 1, 2]]).is_ok());
    }

    #[test]
    fn mesh_json_round_trip() {
        let json = r#"{"vertices":[[0,0,0],[1,0,0],[0,1,0]],"triangles":[[0,1,2]]}"#;
        let mesh: SceneMesh = serde_json::from_str(json).unwrap();
        assert_eq!(mesh.triangles().len(), 1);
        let back = serde_json::to_string(&mesh).unwrap();
        let again: SceneMesh = serde_json::from_str(&back).unwrap();
        assert_eq!(mesh, again);
        let bad = r#"{"vertices":[[0,0,0],[1,0,0]],"triangles":[[0,1,2]]}"#;
        assert!(serde_json::from_str::<SceneMesh>(bad).is_err());
    }

    #[test]
    fn band_is_closed() {
        let user = Pose::IDENTITY;
        assert!(within_band(&user, Vec3::new(0.0, 0.0, 0.5), 1.0));
        assert!(within_band(&user, Vec3::new(0.0, 0.0, 1.0), 1.0));
        assert!(!within_band(&user, Vec3::new(0.0, 0.0, 1.0 + 1e-12), 1.0));
    }

    #[test]
    fn band_matches_direct_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let user = Pose::at(Vec3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)));
            let node = Vec3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
            let r: f64 = rng.gen_range(0.1..6.0);
            let dx = node.x - user.position.x;
            let dy = node.y - user.position.y;
            let dz = node.z - user.position.z;
            let expect = (dx * dx + dy * dy + dz * dz).sqrt() <= r;
            assert_eq!(within_band(&user, node, r), expect);
        }
    }

    #[test]
    fn pose_rejects_non_unit_quaternion() {
        assert!(Pose::new(Vec3::ZERO, Quat { x: 0.0, y: 0.0, z: 0.0, w: 2.0 }).is_err());
        assert!(Pose::new(Vec3::new(f64::NAN, 0.0, 0.0), Quat::IDENTITY).is_err());
        let p: Pose = serde_json::from_str(r#"{"position":[1,2,3]}"#).unwrap();
        assert_eq!(p.orientation, Quat::IDENTITY);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn coord() -> impl Strategy<Value = f64> {
            -50.0f64..50.0
        }

        proptest! {
            #[test]
            fn band_is_translation_invariant(
                u in (coord(), coord(), coord()),
                n in (coord(), coord(), coord()),
                t in (coord(), coord(), coord()),
                r in 0.5f64..40.0,
            ) {
                let user = Vec3::new(u.0, u.1, u.2);
                let node = Vec3::new(n.0, n.1, n.2);
                let shift = Vec3::new(t.0, t.1, t.2);
                let d = user.distance(node);
                // skip cases where rounding of the shifted coordinates can flip a boundary case
                prop_assume!((d - r).abs() > 1e-9);
                prop_assert_eq!(
                    within_band(&Pose::at(user), node, r),
                    within_band(&Pose::at(user + shift), node + shift, r)
                );
            }
        }
    }
}
