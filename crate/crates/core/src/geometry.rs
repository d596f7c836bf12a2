//! Ground-truth geometry between two views: homographies and depth + relative
//! pose warps, their Jacobians, correspondence building, and the bilinear
//! reprojection distribution.
//!
//! Pixel centers sit at integer coordinates, `(u, v)` = (column, row), and a
//! point is in view when `0 ≤ u ≤ W − 1` and `0 ≤ v ≤ H − 1`.

use nalgebra::{Matrix2x3, Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::ops::BilinearCell;
use crate::tensor::Tensor;

pub type Mat3 = Matrix3<f64>;
pub type Vec3 = Vector3<f64>;
pub type Point = [f64; 2];
/// Row-major `[[du'/du, du'/dv], [dv'/du, dv'/dv]]`.
pub type Jacobian = [[f64; 2]; 2];

pub const DEFAULT_TH_GT: f64 = 5.0;
/// Round trips farther than this are treated as occluded.
pub const CONSISTENCY_TOLERANCE: f64 = 2.0;
const ORTHONORMAL_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    AtoB,
    BtoA,
}

impl Direction {
    pub fn reverse(self) -> Self {
        match self {
            Direction::AtoB => Direction::BtoA,
            Direction::BtoA => Direction::AtoB,
        }
    }
}

/// Dense positive depth; non-positive or non-finite entries mean "unknown".
///
/// Subpixel depth comes from bilinear interpolation of inverse depth, which
/// is exact on planar surfaces.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width || height < 2 || width < 2 {
            return Err(Error::Dimension(format!("depth map {height}x{width} with {} values", data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let data = (0..height * width).map(|i| f(i % width, i / width)).collect();
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Depth and its `(d/du, d/dv)` at a subpixel position, or `None` out of
    /// bounds or next to an unknown sample.
    pub fn sample(&self, u: f64, v: f64) -> Option<(f64, [f64; 2])> {
        if !in_bounds([u, v], self.height, self.width) {
            return None;
        }
        let cell = BilinearCell::new(u, v, self.width, self.height);
        let taps = cell.taps(self.width);
        let mut inv = [0.0; 4];
        for (slot, &(j, _)) in inv.iter_mut().zip(&taps) {
            let d = self.data[j];
            if !(d > 0.0 && d.is_finite()) {
                return None;
            }
            *slot = 1.0 / d;
        }
        let rho: f64 = taps.iter().zip(&inv).map(|(&(_, w), r)| w * r).sum();
        let (fx, fy) = (cell.fx, cell.fy);
        let du = if cell.x1 != cell.x0 { (1.0 - fy) * (inv[1] - inv[0]) + fy * (inv[3] - inv[2]) } else { 0.0 };
        let dv = if cell.y1 != cell.y0 { (1.0 - fx) * (inv[2] - inv[0]) + fx * (inv[3] - inv[1]) } else { 0.0 };
        let d = 1.0 / rho;
        Some((d, [-du * d * d, -dv * d * d]))
    }
}

/// Pinhole camera: intrinsics and an optional depth map for its image.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub intrinsics: Mat3,
    pub depth: Option<DepthMap>,
}

impl Camera {
    pub fn new(intrinsics: Mat3, depth: Option<DepthMap>) -> Result<Self> {
        if intrinsics.try_inverse().is_none() {
            return Err(Error::InvalidArgument("singular intrinsics".into()));
        }
        Ok(Self { intrinsics, depth })
    }

    /// Focal length `f` and principal point at the image center.
    pub fn simple(focal: f64, height: usize, width: usize, depth: Option<DepthMap>) -> Self {
        let k = Mat3::new(focal, 0.0, (width - 1) as f64 / 2.0, 0.0, focal, (height - 1) as f64 / 2.0, 0.0, 0.0, 1.0);
        Self { intrinsics: k, depth }
    }
}

/// Rigid transform taking camera-A coordinates to camera-B coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelativePose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl RelativePose {
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        check_rotation(&rotation)?;
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self { rotation: Mat3::identity(), translation: Vec3::zeros() }
    }

    /// Relative pose from two world-to-camera poses.
    pub fn between(r_a: &Mat3, t_a: &Vec3, r_b: &Mat3, t_b: &Vec3) -> Result<Self> {
        check_rotation(r_a)?;
        check_rotation(r_b)?;
        let r = r_b * r_a.transpose();
        Ok(Self { rotation: r, translation: t_b - r * t_a })
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self { rotation: rt, translation: -(rt * self.translation) }
    }
}

pub fn check_rotation(r: &Mat3) -> Result<()> {
    let err = (r.transpose() * r - Mat3::identity()).abs().max();
    if !(err <= ORTHONORMAL_TOL) || !((r.determinant() - 1.0).abs() <= ORTHONORMAL_TOL) {
        return Err(Error::InvalidArgument(format!("rotation is not orthonormal (|RᵀR − I| = {err:.2e})")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub enum WarpModel {
    /// Maps homogeneous A pixels to B pixels.
    Homography(Mat3),
    PoseDepth { camera_a: Camera, camera_b: Camera, pose: RelativePose },
}

/// A warp model with the sizes `(height, width)` of both images.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpSpec {
    pub model: WarpModel,
    pub size_a: (usize, usize),
    pub size_b: (usize, usize),
}

impl WarpSpec {
    pub fn homography(h: Mat3, size_a: (usize, usize), size_b: (usize, usize)) -> Result<Self> {
        if !(h.determinant().abs() > 1e-12) {
            return Err(Error::InvalidArgument("homography is singular".into()));
        }
        Ok(Self { model: WarpModel::Homography(h), size_a, size_b })
    }

    pub fn identity(height: usize, width: usize) -> Self {
        Self { model: WarpModel::Homography(Mat3::identity()), size_a: (height, width), size_b: (height, width) }
    }

    pub fn pose_depth(camera_a: Camera, camera_b: Camera, pose: RelativePose) -> Result<Self> {
        let size = |c: &Camera, name: &str| {
            c.depth
                .as_ref()
                .map(|d| (d.height(), d.width()))
                .ok_or_else(|| Error::InvalidArgument(format!("camera {name} needs a depth map")))
        };
        let size_a = size(&camera_a, "A")?;
        let size_b = size(&camera_b, "B")?;
        Ok(Self { model: WarpModel::PoseDepth { camera_a, camera_b, pose }, size_a, size_b })
    }

    pub fn source_size(&self, dir: Direction) -> (usize, usize) {
        match dir {
            Direction::AtoB => self.size_a,
            Direction::BtoA => self.size_b,
        }
    }

    pub fn target_size(&self, dir: Direction) -> (usize, usize) {
        self.source_size(dir.reverse())
    }

    /// Warped position, or `None` when it is out of view, behind the camera,
    /// lacks depth, or fails the round-trip occlusion check.
    pub fn warp(&self, p: Point, dir: Direction) -> Option<Point> {
        self.warp_with_jacobian(p, dir).map(|(q, _)| q)
    }

    pub fn warp_with_jacobian(&self, p: Point, dir: Direction) -> Option<(Point, Jacobian)> {
        let (q, jac) = self.raw_warp(p, dir)?;
        let (h, w) = self.target_size(dir);
        if !in_bounds(q, h, w) {
            return None;
        }
        if matches!(self.model, WarpModel::PoseDepth { .. }) {
            let (back, _) = self.raw_warp(q, dir.reverse())?;
            if distance(back, p) > CONSISTENCY_TOLERANCE {
                return None;
            }
        }
        Some((q, jac))
    }

    /// Ground-truth position for match scoring. Homographies map without
    /// the target bounds check; pose+depth warps behave like [`Self::warp`].
    pub fn reproject(&self, p: Point, dir: Direction) -> Option<Point> {
        match self.model {
            WarpModel::Homography(_) => self.raw_warp(p, dir).map(|(q, _)| q),
            WarpModel::PoseDepth { .. } => self.warp(p, dir),
        }
    }

    fn raw_warp(&self, p: Point, dir: Direction) -> Option<(Point, Jacobian)> {
        let (h, w) = self.source_size(dir);
        if !in_bounds(p, h, w) {
            return None;
        }
        let x = Vec3::new(p[0], p[1], 1.0);
        match &self.model {
            WarpModel::Homography(m) => {
                let m = match dir {
                    Direction::AtoB => *m,
                    Direction::BtoA => m.try_inverse()?,
                };
                let z = m * x;
                let (q, dq) = project(&z)?;
                let jac = dq * m.fixed_columns::<2>(0);
                Some((q, to_jacobian(&jac)))
            }
            WarpModel::PoseDepth { camera_a, camera_b, pose } => {
                let (src, dst, pose) = match dir {
                    Direction::AtoB => (camera_a, camera_b, *pose),
                    Direction::BtoA => (camera_b, camera_a, pose.inverse()),
                };
                let (d, dd) = src.depth.as_ref()?.sample(p[0], p[1])?;
                let k_inv = src.intrinsics.try_inverse()?;
                let ray = k_inv * x;
                let world = pose.rotation * (ray * d) + pose.translation;
                if world.z <= 0.0 {
                    return None;
                }
                let z = dst.intrinsics * world;
                let (q, dq) = project(&z)?;
                let kr = dst.intrinsics * pose.rotation;
                let dx_du = kr * (ray * dd[0] + k_inv.column(0) * d);
                let dx_dv = kr * (ray * dd[1] + k_inv.column(1) * d);
                let ju = dq * dx_du;
                let jv = dq * dx_dv;
                Some((q, [[ju[0], jv[0]], [ju[1], jv[1]]]))
            }
        }
    }

    /// Fraction of source pixels whose warp lands in view.
    pub fn coverage(&self, dir: Direction) -> f64 {
        let (h, w) = self.source_size(dir);
        let hits = (0..h * w).filter(|&i| self.warp([(i % w) as f64, (i / w) as f64], dir).is_some()).count();
        hits as f64 / (h * w) as f64
    }
}

fn project(z: &Vec3) -> Option<(Point, Matrix2x3<f64>)> {
    if !(z.z.abs() > 1e-12) {
        return None;
    }
    let iz = 1.0 / z.z;
    let dq = Matrix2x3::new(iz, 0.0, -z.x * iz * iz, 0.0, iz, -z.y * iz * iz);
    Some(([z.x * iz, z.y * iz], dq))
}

fn to_jacobian(m: &nalgebra::Matrix2<f64>) -> Jacobian {
    [[m[(0, 0)], m[(0, 1)]], [m[(1, 0)], m[(1, 1)]]]
}

pub fn in_bounds(p: Point, height: usize, width: usize) -> bool {
    p[0] >= 0.0 && p[1] >= 0.0 && p[0] <= (width - 1) as f64 && p[1] <= (height - 1) as f64
}

pub fn distance(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Warps rows of `points [N, 2]` on the graph, differentiating through the
/// warp Jacobian. Every point must have a valid warp.
pub fn warp_points_var(g: &Graph, points: Var, spec: &WarpSpec, dir: Direction) -> Var {
    let vp = g.value(points);
    let n = vp.dim(0);
    let mut out = Vec::with_capacity(2 * n);
    let mut jacs = Vec::with_capacity(n);
    for i in 0..n {
        let p = [vp.data()[2 * i], vp.data()[2 * i + 1]];
        let (q, j) = spec
            .raw_warp(p, dir)
            .unwrap_or_else(|| panic!("warp_points_var: point ({:.3}, {:.3}) has no valid warp", p[0], p[1]));
        out.extend_from_slice(&q);
        jacs.push(j);
    }
    g.push(Tensor::new([n, 2], out), &[points], move |grad| {
        let gd = grad.data();
        let data = jacs
            .iter()
            .enumerate()
            .flat_map(|(i, j)| {
                let (gu, gv) = (gd[2 * i], gd[2 * i + 1]);
                [gu * j[0][0] + gv * j[1][0], gu * j[0][1] + gv * j[1][1]]
            })
            .collect();
        vec![(points, Tensor::new([n, 2], data))]
    })
}

/// One ground-truth pair with both reprojections.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correspondence {
    pub index_a: usize,
    pub index_b: usize,
    pub p_a: Point,
    pub p_b: Point,
    /// `p_a` warped into B.
    pub p_ab: Point,
    /// `p_b` warped into A.
    pub p_ba: Point,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorrespondenceSet {
    pub pairs: Vec<Correspondence>,
    pub th_gt: f64,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn index_pairs(&self) -> Vec<(usize, usize)> {
        self.pairs.iter().map(|c| (c.index_a, c.index_b)).collect()
    }

    /// The same pairs seen from B.
    pub fn reversed(&self) -> Self {
        let pairs = self
            .pairs
            .iter()
            .map(|c| Correspondence {
                index_a: c.index_b,
                index_b: c.index_a,
                p_a: c.p_b,
                p_b: c.p_a,
                p_ab: c.p_ba,
                p_ba: c.p_ab,
            })
            .collect();
        Self { pairs, th_gt: self.th_gt }
    }
}

/// Uniform grid over points for radius queries.
struct PointGrid {
    cell: f64,
    cols: usize,
    rows: usize,
    buckets: Vec<Vec<usize>>,
}

impl PointGrid {
    fn new(points: &[Point], cell: f64, height: usize, width: usize) -> Self {
        let cols = ((width as f64 / cell).ceil() as usize).max(1);
        let rows = ((height as f64 / cell).ceil() as usize).max(1);
        let mut buckets = vec![Vec::new(); cols * rows];
        let mut grid = Self { cell, cols, rows, buckets: Vec::new() };
        for (i, &p) in points.iter().enumerate() {
            let (cx, cy) = grid.cell_of(p);
            buckets[cy * cols + cx].push(i);
        }
        grid.buckets = buckets;
        grid
    }

    fn cell_of(&self, p: Point) -> (usize, usize) {
        let cx = ((p[0] / self.cell).floor().max(0.0) as usize).min(self.cols - 1);
        let cy = ((p[1] / self.cell).floor().max(0.0) as usize).min(self.rows - 1);
        (cx, cy)
    }

    /// Nearest point strictly closer than `radius`; ties go to the lower index.
    fn nearest_within(&self, points: &[Point], q: Point, radius: f64) -> Option<(usize, f64)> {
        let (cx, cy) = self.cell_of(q);
        let mut best: Option<(usize, f64)> = None;
        for y in cy.saturating_sub(1)..=(cy + 1).min(self.rows - 1) {
            for x in cx.saturating_sub(1)..=(cx + 1).min(self.cols - 1) {
                for &i in &self.buckets[y * self.cols + x] {
                    let d = distance(points[i], q);
                    if d < radius && best.is_none_or(|(bi, bd)| d < bd || (d == bd && i < bi)) {
                        best = Some((i, d));
                    }
                }
            }
        }
        best
    }
}

/// Ground-truth pairs: each A keypoint is warped into B and paired with its
/// nearest B keypoint when closer than `th_gt`. The B keypoint must warp back
/// into A. Each B keypoint keeps at most one partner, assigned greedily by
/// increasing distance with ties going to the lower A index. Pairs are
/// returned in A-index order.
pub fn build_correspondences(kpts_a: &[Point], kpts_b: &[Point], spec: &WarpSpec, th_gt: f64) -> CorrespondenceSet {
    let mut set = CorrespondenceSet { pairs: Vec::new(), th_gt };
    if !(th_gt > 0.0) || kpts_a.is_empty() || kpts_b.is_empty() {
        return set;
    }
    let (h, w) = spec.size_b;
    let grid = PointGrid::new(kpts_b, th_gt, h, w);
    let mut candidates = Vec::new();
    for (ia, &pa) in kpts_a.iter().enumerate() {
        let Some(p_ab) = spec.warp(pa, Direction::AtoB) else { continue };
        let Some((ib, d)) = grid.nearest_within(kpts_b, p_ab, th_gt) else { continue };
        let Some(p_ba) = spec.warp(kpts_b[ib], Direction::BtoA) else { continue };
        candidates.push((d, ia, Correspondence { index_a: ia, index_b: ib, p_a: pa, p_b: kpts_b[ib], p_ab, p_ba }));
    }
    candidates.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
    let mut taken = vec![false; kpts_b.len()];
    for (_, _, c) in candidates {
        if !std::mem::replace(&mut taken[c.index_b], true) {
            set.pairs.push(c);
        }
    }
    set.pairs.sort_by_key(|c| c.index_a);
    set
}

/// Sparse bilinear distribution `q_r` around `p` on an `H × W` grid: at most
/// four `(flat index, weight)` entries with positive weights summing to one.
pub fn reprojection_probability_map(p: Point, height: usize, width: usize) -> Result<Vec<(usize, f64)>> {
    if height < 2 || width < 2 || !in_bounds(p, height, width) {
        return Err(Error::OutOfBounds { u: p[0], v: p[1], width, height });
    }
    let cell = BilinearCell::new(p[0], p[1], width, height);
    Ok(cell.taps(width).into_iter().filter(|&(_, w)| w > 0.0).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn plane_scene(rng: &mut ChaCha8Rng) -> WarpSpec {
        let (h, w) = (48, 64);
        let cam = |depth| Camera::simple(60.0, h, w, Some(depth));
        let axis = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let rot = nalgebra::Rotation3::from_scaled_axis(axis.normalize() * rng.random_range(0.0..0.15)).into_inner();
        let t = Vec3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.2..0.2));
        let pose = RelativePose::new(rot, t).unwrap();
        let n_a = Vec3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), 1.0).normalize();
        let c_a = 4.0;
        let k = Camera::simple(60.0, h, w, None).intrinsics;
        let k_inv = k.try_inverse().unwrap();
        let depth_for = |n: Vec3, c: f64| DepthMap::from_fn(h, w, |x, y| c / n.dot(&(k_inv * Vec3::new(x as f64, y as f64, 1.0))));
        let n_b = rot * n_a;
        let c_b = c_a + n_b.dot(&t);
        WarpSpec::pose_depth(cam(depth_for(n_a, c_a)), cam(depth_for(n_b, c_b)), pose).unwrap()
    }

    #[test]
    fn identity_pose_is_a_fixed_point() {
        let depth = DepthMap::from_fn(10, 12, |x, y| 2.0 + 0.1 * x as f64 + 0.05 * y as f64);
        let cam = Camera::simple(20.0, 10, 12, Some(depth));
        let spec = WarpSpec::pose_depth(cam.clone(), cam, RelativePose::identity()).unwrap();
        let q = spec.warp([3.25, 7.5], Direction::AtoB).unwrap();
        assert!(distance(q, [3.25, 7.5]) < 1e-12);
        let id = WarpSpec::identity(10, 12);
        assert_eq!(id.warp([4.0, 5.5], Direction::AtoB), Some([4.0, 5.5]));
    }

    #[test]
    fn plane_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let spec = plane_scene(&mut rng);
        let mut checked = 0;
        for _ in 0..200 {
            let p = [rng.random_range(0.0..63.0), rng.random_range(0.0..47.0)];
            if let Some(q) = spec.warp(p, Direction::AtoB) {
                let back = spec.warp(q, Direction::BtoA).unwrap();
                assert!(distance(back, p) < 1e-6);
                checked += 1;
            }
        }
        assert!(checked > 50);
    }

    #[test]
    fn warp_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let spec = plane_scene(&mut rng);
        let h = Mat3::new(1.05, 0.02, 1.0, -0.03, 0.97, 2.0, 1e-4, 2e-4, 1.0);
        let hspec = WarpSpec::homography(h, (48, 64), (48, 64)).unwrap();
        for s in [&spec, &hspec] {
            let pts = Tensor::new([2, 2], vec![20.3, 17.6, 31.7, 25.2]);
            let report = check_gradients(&[pts], |g, v| {
                let q = warp_points_var(g, v[0], s, Direction::AtoB);
                g.sum(g.mul(q, g.constant(Tensor::new([2, 2], vec![0.3, -0.8, 1.1, 0.4]))))
            });
            assert!(report.max_rel_error < 1e-5, "{report:?}");
        }
    }

    #[test]
    fn behind_camera_is_out_of_view() {
        let depth = DepthMap::from_fn(8, 8, |_, _| 1.0);
        let cam = Camera::simple(10.0, 8, 8, Some(depth));
        let pose = RelativePose::new(Mat3::identity(), Vec3::new(0.0, 0.0, -2.0)).unwrap();
        let spec = WarpSpec::pose_depth(cam.clone(), cam, pose).unwrap();
        assert_eq!(spec.warp([3.5, 3.5], Direction::AtoB), None);
    }

    #[test]
    fn grid_correspondences_under_identity() {
        let pts: Vec<Point> = (0..25).map(|i| [(i % 5) as f64 * 7.0, (i / 5) as f64 * 7.0]).collect();
        let spec = WarpSpec::identity(32, 32);
        let set = build_correspondences(&pts, &pts, &spec, DEFAULT_TH_GT);
        assert_eq!(set.len(), 25);
        assert!(set.pairs.iter().all(|c| c.index_a == c.index_b && distance(c.p_b, c.p_ab) == 0.0));
        assert!(build_correspondences(&pts, &pts, &spec, 0.0).is_empty());
    }

    #[test]
    fn probability_map_examples() {
        assert_eq!(reprojection_probability_map([2.0, 1.0], 4, 5).unwrap(), vec![(7, 1.0)]);
        let taps = reprojection_probability_map([1.5, 2.5], 4, 5).unwrap();
        assert_eq!(taps.len(), 4);
        assert!(taps.iter().all(|&(_, w)| w == 0.25));
        assert!(reprojection_probability_map([4.5, 1.0], 4, 5).is_err());
    }

    #[test]
    fn non_orthonormal_rotation_is_rejected() {
        assert!(RelativePose::new(Mat3::identity() * 1.1, Vec3::zeros()).is_err());
    }
}
