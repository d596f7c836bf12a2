//! Synthetic cross-domain training pairs and the external-pair manifest.
//!
//! A pair is two views of one procedurally painted scene. The second view is
//! related to the first by a random homography or by a relative pose over a
//! textured plane with analytic depth, and then receives a photometric
//! domain shift (darker, blue-shifted, noisier).

use std::path::{Path, PathBuf};

use log::warn;
use nalgebra::Rotation3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::{ImageTensor, SIZE_MULTIPLE};
use crate::error::{Error, Result};
use crate::geometry::{Camera, DepthMap, Direction, Mat3, RelativePose, Vec3, WarpModel, WarpSpec};
use crate::io;
use crate::ops::BilinearCell;
use crate::tensor::Tensor;

pub const MIN_OVERLAP: f64 = 0.3;

/// Photometric shift standing in for a day-to-night translation network.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainShiftParams {
    pub gamma: f64,
    pub brightness_scale: f64,
    /// Per-channel RGB multipliers.
    pub color_gains: [f64; 3],
    pub noise_sigma: f64,
}

impl DomainShiftParams {
    pub fn identity() -> Self {
        Self { gamma: 1.0, brightness_scale: 1.0, color_gains: [1.0; 3], noise_sigma: 0.0 }
    }

    /// Dark, blue-shifted, slightly noisy.
    pub fn night() -> Self {
        Self { gamma: 1.5, brightness_scale: 0.5, color_gains: [0.8, 0.9, 1.2], noise_sigma: 0.02 }
    }

    /// The night preset with each parameter jittered by up to ±15%.
    pub fn sample_night(rng: &mut impl Rng) -> Self {
        let base = Self::night();
        let mut j = |v: f64| v * rng.random_range(0.85..1.15);
        Self {
            gamma: j(base.gamma),
            brightness_scale: j(base.brightness_scale),
            color_gains: base.color_gains.map(&mut j),
            noise_sigma: j(base.noise_sigma),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.gamma > 0.0
            && self.brightness_scale > 0.0
            && self.color_gains.iter().all(|g| *g > 0.0 && g.is_finite())
            && self.noise_sigma >= 0.0
            && self.gamma.is_finite()
            && self.brightness_scale.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid domain shift {self:?}")))
        }
    }
}

/// `clamp((brightness · gain_c · x)^γ + noise, 0, 1)` per pixel and channel.
/// Noise is drawn from `seed`.
pub fn domain_shift(image: &ImageTensor, params: &DomainShiftParams, seed: u64) -> Result<ImageTensor> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, params.noise_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let plane = image.height() * image.width();
    let data = image
        .tensor()
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let gain = params.brightness_scale * params.color_gains[i / plane];
            let mut y = (gain * x).powf(params.gamma);
            if params.noise_sigma > 0.0 {
                y += noise.sample(&mut rng);
            }
            y.clamp(0.0, 1.0)
        })
        .collect();
    ImageTensor::new(Tensor::new([3, image.height(), image.width()], data))
}

/// A procedurally painted RGB canvas that can be sampled anywhere; positions
/// outside it read the nearest edge pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct Texture {
    data: Tensor,
}

impl Texture {
    /// Smooth colored background with random rectangles, discs, and strokes.
    pub fn random(height: usize, width: usize, rng: &mut impl Rng) -> Self {
        let plane = height * width;
        let mut data = vec![0.0; 3 * plane];
        for c in 0..3 {
            let waves: Vec<[f64; 4]> = (0..3)
                .map(|_| {
                    let f = rng.random_range(0.5..3.0) * std::f64::consts::TAU;
                    [f * rng.random_range(-1.0..1.0) / width as f64, f * rng.random_range(-1.0..1.0) / height as f64, rng.random_range(0.0..6.3), rng.random_range(0.05..0.15)]
                })
                .collect();
            let base = rng.random_range(0.3..0.7);
            for y in 0..height {
                for x in 0..width {
                    let s: f64 = waves.iter().map(|w| w[3] * (w[0] * x as f64 + w[1] * y as f64 + w[2]).sin()).sum();
                    data[c * plane + y * width + x] = base + s;
                }
            }
        }
        let shapes = (plane / 160).max(8);
        let extent = (height.min(width) as f64 / 6.0).max(3.0);
        for _ in 0..shapes {
            let color = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
            let cx = rng.random_range(0.0..width as f64);
            let cy = rng.random_range(0.0..height as f64);
            let a = rng.random_range(1.5..extent);
            let b = rng.random_range(1.5..extent);
            let kind = rng.random_range(0..3);
            let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let (sa, ca) = angle.sin_cos();
            let x0 = (cx - 2.0 * extent).max(0.0) as usize;
            let x1 = ((cx + 2.0 * extent) as usize).min(width);
            let y0 = (cy - 2.0 * extent).max(0.0) as usize;
            let y1 = ((cy + 2.0 * extent) as usize).min(height);
            for y in y0..y1 {
                for x in x0..x1 {
                    let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                    let (rx, ry) = (ca * dx + sa * dy, -sa * dx + ca * dy);
                    let inside = match kind {
                        0 => rx.abs() <= a && ry.abs() <= b,
                        1 => (rx / a).powi(2) + (ry / b).powi(2) <= 1.0,
                        _ => rx.abs() <= a * 1.5 && ry.abs() <= 1.0,
                    };
                    if inside {
                        for (c, col) in color.iter().enumerate() {
                            data[c * plane + y * width + x] = *col;
                        }
                    }
                }
            }
        }
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        Self { data: Tensor::new([3, height, width], data) }
    }

    pub fn height(&self) -> usize {
        self.data.dim(1)
    }

    pub fn width(&self) -> usize {
        self.data.dim(2)
    }

    pub fn sample(&self, u: f64, v: f64) -> [f64; 3] {
        let (h, w) = (self.height(), self.width());
        let taps = BilinearCell::new(u, v, w, h).taps(w);
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let plane = &self.data.data()[c * h * w..(c + 1) * h * w];
            *o = taps.iter().map(|&(j, wt)| wt * plane[j]).sum();
        }
        out
    }

    /// Renders an `height × width` view whose pixel `(x, y)` shows texture
    /// position `map(x, y)`; `None` renders black.
    pub fn render(&self, height: usize, width: usize, map: impl Fn(f64, f64) -> Option<[f64; 2]>) -> Result<ImageTensor> {
        let plane = height * width;
        let mut data = vec![0.0; 3 * plane];
        for y in 0..height {
            for x in 0..width {
                if let Some([u, v]) = map(x as f64, y as f64) {
                    for (c, val) in self.sample(u, v).into_iter().enumerate() {
                        data[c * plane + y * width + x] = val;
                    }
                }
            }
        }
        ImageTensor::new(Tensor::new([3, height, width], data))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarpKind {
    Homography,
    PoseDepth,
    /// Alternate between the two by seed parity.
    #[default]
    Mixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Crop side length; rounded down to a multiple of 32.
    pub size: usize,
    pub warp: WarpKind,
    /// Largest in-plane rotation, radians.
    pub max_rotation: f64,
    pub min_scale: f64,
    pub max_scale: f64,
    /// Largest translation as a fraction of the side length.
    pub max_translation: f64,
    /// Largest projective coefficient times the side length.
    pub max_perspective: f64,
    /// Largest relative camera rotation of pose warps, radians.
    pub max_pose_rotation: f64,
    pub min_overlap: f64,
    pub max_retries: usize,
    pub domain_shift: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            size: 480,
            warp: WarpKind::Mixed,
            max_rotation: 0.35,
            min_scale: 0.8,
            max_scale: 1.25,
            max_translation: 0.15,
            max_perspective: 0.3,
            max_pose_rotation: 0.15,
            min_overlap: MIN_OVERLAP,
            max_retries: 20,
            domain_shift: true,
        }
    }
}

impl SynthConfig {
    pub fn side(&self) -> usize {
        (self.size / SIZE_MULTIPLE).max(1) * SIZE_MULTIPLE
    }
}

/// A cross-domain pair: `image_a` is the source domain (label 0), `image_b`
/// the target domain (label 1).
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub image_a: ImageTensor,
    pub image_b: ImageTensor,
    pub spec: WarpSpec,
    pub domain_labels: (u8, u8),
    pub overlap: f64,
}

/// Fraction of A pixels whose warp lands inside B.
pub fn overlap(spec: &WarpSpec) -> f64 {
    spec.coverage(Direction::AtoB)
}

/// Random homography about the image center.
pub fn random_homography(side: usize, cfg: &SynthConfig, rng: &mut impl Rng) -> Mat3 {
    let c = (side - 1) as f64 / 2.0;
    let s = side as f64;
    let angle = rng.random_range(-cfg.max_rotation..=cfg.max_rotation);
    let scale = rng.random_range(cfg.min_scale..=cfg.max_scale);
    let (sa, ca) = angle.sin_cos();
    let tx = rng.random_range(-cfg.max_translation..=cfg.max_translation) * s;
    let ty = rng.random_range(-cfg.max_translation..=cfg.max_translation) * s;
    let px = rng.random_range(-cfg.max_perspective..=cfg.max_perspective) / s;
    let py = rng.random_range(-cfg.max_perspective..=cfg.max_perspective) / s;
    let to_origin = Mat3::new(1.0, 0.0, -c, 0.0, 1.0, -c, 0.0, 0.0, 1.0);
    let back = Mat3::new(1.0, 0.0, c + tx, 0.0, 1.0, c + ty, 0.0, 0.0, 1.0);
    let affine = Mat3::new(scale * ca, -scale * sa, 0.0, scale * sa, scale * ca, 0.0, px, py, 1.0);
    back * affine * to_origin
}

/// Textured plane seen by two cameras.
#[derive(Clone, Copy, Debug)]
struct PlaneScene {
    k: Mat3,
    pose: RelativePose,
    /// Plane `n · X = c` in camera-A coordinates.
    normal: Vec3,
    offset: f64,
}

impl PlaneScene {
    fn random(side: usize, cfg: &SynthConfig, rng: &mut impl Rng) -> Self {
        let focal = side as f64;
        let c = (side - 1) as f64 / 2.0;
        let k = Mat3::new(focal, 0.0, c, 0.0, focal, c, 0.0, 0.0, 1.0);
        let offset = rng.random_range(3.0..5.0);
        let normal = Vec3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), 1.0).normalize();
        let axis = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let angle = rng.random_range(0.0..=cfg.max_pose_rotation);
        let rotation = Rotation3::from_scaled_axis(axis.normalize() * angle).into_inner();
        let t = Vec3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)) * (offset * cfg.max_translation * 2.0);
        Self { k, pose: RelativePose { rotation, translation: t }, normal, offset }
    }

    fn plane_in_b(&self) -> (Vec3, f64) {
        let n = self.pose.rotation * self.normal;
        (n, self.offset + n.dot(&self.pose.translation))
    }

    fn depth_along(k_inv: &Mat3, n: &Vec3, c: f64, x: f64, y: f64) -> Option<f64> {
        let denom = n.dot(&(k_inv * Vec3::new(x, y, 1.0)));
        let d = c / denom;
        (denom > 0.0 && d > 0.0 && d.is_finite()).then_some(d)
    }

    fn depth_maps(&self, side: usize) -> (DepthMap, DepthMap) {
        let k_inv = self.k.try_inverse().expect("invertible intrinsics");
        let (nb, cb) = self.plane_in_b();
        let map = |n: Vec3, c: f64| {
            DepthMap::from_fn(side, side, |x, y| Self::depth_along(&k_inv, &n, c, x as f64, y as f64).unwrap_or(0.0))
        };
        (map(self.normal, self.offset), map(nb, cb))
    }

    /// A-image position seen at B pixel `(x, y)`, without bounds checks.
    fn b_to_a(&self, x: f64, y: f64) -> Option<[f64; 2]> {
        let k_inv = self.k.try_inverse()?;
        let (nb, cb) = self.plane_in_b();
        let d = Self::depth_along(&k_inv, &nb, cb, x, y)?;
        let xb = k_inv * Vec3::new(x, y, 1.0) * d;
        let inv = self.pose.inverse();
        let xa = inv.rotation * xb + inv.translation;
        if xa.z <= 0.0 {
            return None;
        }
        let p = self.k * xa;
        Some([p.x / p.z, p.y / p.z])
    }

    fn spec(&self, side: usize) -> WarpSpec {
        let (da, db) = self.depth_maps(side);
        WarpSpec {
            model: WarpModel::PoseDepth {
                camera_a: Camera { intrinsics: self.k, depth: Some(da) },
                camera_b: Camera { intrinsics: self.k, depth: Some(db) },
                pose: self.pose,
            },
            size_a: (side, side),
            size_b: (side, side),
        }
    }
}

/// Draws a geometric relation between two `side × side` views and renders
/// both from `texture`, whose center is A's center. Retries until the overlap
/// is at least `cfg.min_overlap`.
pub fn synth_pair(texture: &Texture, seed: u64, cfg: &SynthConfig) -> Result<TrainSample> {
    let side = cfg.side();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let origin = [
        (texture.width() as f64 - side as f64) / 2.0,
        (texture.height() as f64 - side as f64) / 2.0,
    ];
    let to_texture = move |p: [f64; 2]| [p[0] + origin[0], p[1] + origin[1]];
    let use_pose = match cfg.warp {
        WarpKind::Homography => false,
        WarpKind::PoseDepth => true,
        WarpKind::Mixed => seed % 2 == 1,
    };
    let image_a = texture.render(side, side, |x, y| Some(to_texture([x, y])))?;
    for _ in 0..cfg.max_retries.max(1) {
        let (spec, image_b) = if use_pose {
            let scene = PlaneScene::random(side, cfg, &mut rng);
            let img = texture.render(side, side, |x, y| scene.b_to_a(x, y).map(to_texture))?;
            (scene.spec(side), img)
        } else {
            let h = random_homography(side, cfg, &mut rng);
            let spec = WarpSpec::homography(h, (side, side), (side, side))?;
            let inv = h.try_inverse().expect("checked invertible");
            let img = texture.render(side, side, |x, y| {
                let p = inv * Vec3::new(x, y, 1.0);
                (p.z > 0.0).then(|| to_texture([p.x / p.z, p.y / p.z]))
            })?;
            (spec, img)
        };
        let ov = overlap(&spec);
        if ov < cfg.min_overlap || ov > 1.0 {
            continue;
        }
        let image_b = if cfg.domain_shift {
            let params = DomainShiftParams::sample_night(&mut rng);
            domain_shift(&image_b, &params, rng.random())?
        } else {
            image_b
        };
        return Ok(TrainSample { image_a, image_b, spec, domain_labels: (0, 1), overlap: ov });
    }
    Err(Error::SampleRejected(format!("seed {seed}: overlap stayed below {} after {} tries", cfg.min_overlap, cfg.max_retries)))
}

/// `count` pairs, each over its own texture; pair `i` uses seed `seed + i`.
/// Rejected seeds are skipped with a warning, so fewer pairs may return.
pub fn synth_corpus(seed: u64, count: usize, cfg: &SynthConfig) -> Vec<TrainSample> {
    let side = cfg.side();
    (0..count as u64)
        .filter_map(|i| {
            let s = seed.wrapping_add(i);
            let mut rng = ChaCha8Rng::seed_from_u64(s ^ 0x7E57_u64);
            let texture = Texture::random(2 * side, 2 * side, &mut rng);
            synth_pair(&texture, s, cfg).map_err(|e| warn!("skipping synthetic pair: {e}")).ok()
        })
        .collect()
}

/// Result of reading a manifest: accepted samples in file order and one
/// diagnostic per skipped entry.
#[derive(Debug, Default)]
pub struct ExternalPairs {
    pub samples: Vec<TrainSample>,
    pub skipped: Vec<String>,
}

/// One view of a manifest entry.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewRecord {
    pub image: PathBuf,
    pub intrinsics: Mat3,
    /// World-to-camera rotation.
    pub rotation: Mat3,
    pub translation: Vec3,
    pub depth: PathBuf,
}

/// Fields per view: image path, 9 intrinsics, 9 rotation, 3 translation,
/// depth path.
pub const VIEW_FIELDS: usize = 23;

fn parse_view(tokens: &[&str], base: &Path) -> Result<ViewRecord> {
    let nums = |range: std::ops::Range<usize>| -> Result<Vec<f64>> {
        tokens[range]
            .iter()
            .map(|t| t.parse::<f64>().map_err(|_| Error::Manifest(format!("`{t}` is not a number"))))
            .collect()
    };
    let k = nums(1..10)?;
    let r = nums(10..19)?;
    let t = nums(19..22)?;
    Ok(ViewRecord {
        image: base.join(tokens[0]),
        intrinsics: Mat3::from_row_slice(&k),
        rotation: Mat3::from_row_slice(&r),
        translation: Vec3::new(t[0], t[1], t[2]),
        depth: base.join(tokens[22]),
    })
}

/// Parses one manifest line into its two views.
pub fn parse_manifest_line(line: &str, base: &Path) -> Result<(ViewRecord, ViewRecord)> {
    let tokens: Vec<&str> = line.split_whitespace().collect();
    if tokens.len() != 2 * VIEW_FIELDS {
        return Err(Error::Manifest(format!("expected {} fields, found {}", 2 * VIEW_FIELDS, tokens.len())));
    }
    Ok((parse_view(&tokens[..VIEW_FIELDS], base)?, parse_view(&tokens[VIEW_FIELDS..], base)?))
}

fn load_view(view: &ViewRecord) -> Result<(ImageTensor, Camera)> {
    let raw = io::load_rgb(&view.image)?;
    let depth = io::read_pfm(&view.depth)?;
    if (depth.height(), depth.width()) != (raw.height, raw.width) {
        return Err(Error::Manifest(format!(
            "{}: depth is {}x{}, image is {}x{}",
            view.depth.display(),
            depth.height(),
            depth.width(),
            raw.height,
            raw.width
        )));
    }
    let (image, (x0, y0)) = raw.center_crop_to_multiple(SIZE_MULTIPLE)?;
    let (h, w) = (image.height(), image.width());
    let cropped = DepthMap::from_fn(h, w, |x, y| depth.at(x + x0, y + y0));
    let mut k = view.intrinsics;
    k[(0, 2)] -= x0 as f64;
    k[(1, 2)] -= y0 as f64;
    Ok((image, Camera::new(k, Some(cropped))?))
}

/// Loads one manifest line; relative paths resolve against `base`.
pub fn load_manifest_entry(line: &str, base: &Path, min_overlap: f64) -> Result<TrainSample> {
    let (va, vb) = parse_manifest_line(line, base)?;
    let pose = RelativePose::between(&va.rotation, &va.translation, &vb.rotation, &vb.translation)?;
    let (image_a, cam_a) = load_view(&va)?;
    let (image_b, cam_b) = load_view(&vb)?;
    let spec = WarpSpec::pose_depth(cam_a, cam_b, pose)?;
    let ov = overlap(&spec);
    if ov < min_overlap {
        return Err(Error::SampleRejected(format!("overlap {ov:.3} below {min_overlap}")));
    }
    Ok(TrainSample { image_a, image_b, spec, domain_labels: (0, 1), overlap: ov })
}

/// Reads a pair manifest. Each non-empty line not starting with `#` holds two
/// views (source then target), each as `image K(9) R(9) t(3) depth` with
/// row-major world-to-camera pose. Relative paths resolve against the
/// manifest's directory; depth files are single-channel PFM. Bad entries are
/// skipped with a diagnostic; an unreadable manifest is an error.
pub fn load_external_pairs(manifest: &Path, min_overlap: f64) -> Result<ExternalPairs> {
    let text = std::fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut out = ExternalPairs::default();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        match load_manifest_entry(line, base, min_overlap) {
            Ok(s) => out.samples.push(s),
            Err(e) => {
                let msg = format!("{}:{}: {e}", manifest.display(), n + 1);
                warn!("skipping manifest entry: {msg}");
                out.skipped.push(msg);
            }
        }
    }
    Ok(out)
}

/// Entry `index` (0-based, counting only non-comment lines) of a manifest,
/// without an overlap gate.
pub fn read_manifest_entry(manifest: &Path, index: usize) -> Result<TrainSample> {
    let text = std::fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let line = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .nth(index)
        .ok_or_else(|| Error::Manifest(format!("{} has no entry {index}", manifest.display())))?;
    load_manifest_entry(line, base, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::distance;

    fn small_cfg() -> SynthConfig {
        SynthConfig { size: 64, ..SynthConfig::default() }
    }

    #[test]
    fn identity_shift_is_a_no_op() {
        let img = ImageTensor::new(Tensor::from_fn([3, 32, 32], |i| (i % 17) as f64 / 16.0)).unwrap();
        assert_eq!(domain_shift(&img, &DomainShiftParams::identity(), 1).unwrap(), img);
    }

    #[test]
    fn halving_brightness() {
        let img = ImageTensor::constant(32, 32, 0.8).unwrap();
        let p = DomainShiftParams { brightness_scale: 0.5, ..DomainShiftParams::identity() };
        let out = domain_shift(&img, &p, 1).unwrap();
        assert!(out.tensor().data().iter().all(|v| (v - 0.4).abs() < 1e-12));
    }

    #[test]
    fn identity_warp_has_full_overlap() {
        assert_eq!(overlap(&WarpSpec::identity(32, 32)), 1.0);
        let far = Mat3::new(1.0, 0.0, 100.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert_eq!(overlap(&WarpSpec::homography(far, (32, 32), (32, 32)).unwrap()), 0.0);
    }

    #[test]
    fn pairs_are_deterministic_and_gated() {
        let cfg = small_cfg();
        let a = synth_corpus(5, 4, &cfg);
        let b = synth_corpus(5, 4, &cfg);
        assert_eq!(a.len(), 4);
        assert_eq!(a, b);
        for s in &a {
            assert!((cfg.min_overlap..=1.0).contains(&s.overlap));
        }
        assert!(matches!(a[0].spec.model, WarpModel::PoseDepth { .. }));
        assert!(matches!(a[1].spec.model, WarpModel::Homography(_)));
    }

    #[test]
    fn rendered_views_agree_under_the_warp() {
        let cfg = SynthConfig { domain_shift: false, ..small_cfg() };
        for s in synth_corpus(9, 2, &cfg) {
            let mut checked = 0;
            let mut err = 0.0;
            for y in (4..60).step_by(5) {
                for x in (4..60).step_by(5) {
                    let p = [x as f64, y as f64];
                    let Some(q) = s.spec.warp(p, Direction::AtoB) else { continue };
                    let back = s.spec.warp(q, Direction::BtoA).unwrap();
                    assert!(distance(back, p) < 1e-6);
                    let a = s.image_a.sample(p[0], p[1]).unwrap();
                    let b = s.image_b.sample(q[0], q[1]).unwrap();
                    err += a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>();
                    checked += 1;
                }
            }
            assert!(checked > 20);
            let mean = err / (3 * checked) as f64;
            assert!(mean < 0.1, "mean color error {mean}");
        }
    }

    #[test]
    fn malformed_lines_are_rejected() {
        assert!(parse_manifest_line("a.png 1 2 3", Path::new(".")).is_err());
        let view = "a.png 1 0 0 0 1 0 0 0 1 1 0 0 0 1 0 0 0 1 0 0 0 a.pfm";
        assert!(parse_manifest_line(&format!("{view} {view}"), Path::new(".")).is_ok());
    }
}
