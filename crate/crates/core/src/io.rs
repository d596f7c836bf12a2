//! File formats: RGB rasters, PFM depth maps, and binary feature files.
//!
//! Feature file layout (little-endian):
//!
//! | field       | type             |
//! |-------------|------------------|
//! | magic       | `b"RADA"`        |
//! | format      | `u32` = 1        |
//! | N           | `u32`            |
//! | dim         | `u32`            |
//! | keypoints   | `N × 2` `f32` (u, v) |
//! | scores      | `N` `f32`        |
//! | descriptors | `N × dim` `f32`  |

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use image::{ImageReader, Rgb, RgbImage};

use crate::backbone::ImageTensor;
use crate::error::{Error, Result};
use crate::geometry::{DepthMap, Mat3};
use crate::keypoint::{FeatureSet, Keypoint};
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"RADA";
pub const FEATURE_FORMAT: u32 = 1;

/// An RGB raster of any size, interleaved `H × W × 3` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawImage {
    pub height: usize,
    pub width: usize,
    pub hwc: Vec<f64>,
}

impl RawImage {
    /// Largest centered crop whose sides are multiples of `multiple`, with
    /// the crop's top-left corner `(x0, y0)` in the original.
    pub fn center_crop_to_multiple(&self, multiple: usize) -> Result<(ImageTensor, (usize, usize))> {
        let h = self.height / multiple * multiple;
        let w = self.width / multiple * multiple;
        if h == 0 || w == 0 {
            return Err(Error::Dimension(format!(
                "{}x{} image is smaller than {multiple}x{multiple}",
                self.height, self.width
            )));
        }
        let (y0, x0) = ((self.height - h) / 2, (self.width - w) / 2);
        let mut hwc = Vec::with_capacity(h * w * 3);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * 3;
            hwc.extend_from_slice(&self.hwc[start..start + w * 3]);
        }
        Ok((ImageTensor::from_hwc(h, w, &hwc)?, (x0, y0)))
    }
}

pub fn load_rgb(path: &Path) -> Result<RawImage> {
    let img = ImageReader::open(path).map_err(|e| Error::io(path, e))?.decode()?.to_rgb8();
    let (w, h) = img.dimensions();
    let hwc = img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
    Ok(RawImage { height: h as usize, width: w as usize, hwc })
}

/// Loads an image and center-crops it to multiples of 32.
pub fn load_image(path: &Path) -> Result<ImageTensor> {
    Ok(load_rgb(path)?.center_crop_to_multiple(crate::backbone::SIZE_MULTIPLE)?.0)
}

pub fn to_rgb8(image: &ImageTensor) -> RgbImage {
    let (h, w) = (image.height(), image.width());
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c| (image.get(c, y as usize, x as usize) * 255.0).round().clamp(0.0, 255.0) as u8;
        Rgb([px(0), px(1), px(2)])
    })
}

pub fn save_image(path: &Path, image: &ImageTensor) -> Result<()> {
    to_rgb8(image).save(path)?;
    Ok(())
}

/// Reads a single-channel PFM (`Pf`) file. Rows are stored bottom-up; the
/// sign of the scale line gives the byte order.
pub fn read_pfm(path: &Path) -> Result<DepthMap> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut header = Vec::new();
    while header.len() < 3 {
        let mut line = String::new();
        if r.read_line(&mut line).map_err(|e| Error::io(path, e))? == 0 {
            return Err(Error::InvalidArgument(format!("{}: truncated PFM header", path.display())));
        }
        header.extend(line.split_whitespace().map(str::to_owned));
    }
    let bad = |what: &str| Error::InvalidArgument(format!("{}: {what}", path.display()));
    if header[0] != "Pf" {
        return Err(bad("only single-channel `Pf` depth files are supported"));
    }
    let width: usize = header[1].parse().map_err(|_| bad("bad width"))?;
    let height: usize = header[2].parse().map_err(|_| bad("bad height"))?;
    let mut scale_line = header.get(3).cloned();
    if scale_line.is_none() {
        let mut line = String::new();
        r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        scale_line = Some(line.trim().to_owned());
    }
    let scale: f64 = scale_line.unwrap_or_default().parse().map_err(|_| bad("bad scale"))?;
    let mut bytes = vec![0u8; width * height * 4];
    r.read_exact(&mut bytes).map_err(|e| Error::io(path, e))?;
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| {
            let a = [b[0], b[1], b[2], b[3]];
            if scale < 0.0 { f32::from_le_bytes(a) } else { f32::from_be_bytes(a) }
        })
        .collect();
    let mut data = vec![0.0; width * height];
    for y in 0..height {
        for x in 0..width {
            data[y * width + x] = values[(height - 1 - y) * width + x] as f64;
        }
    }
    DepthMap::new(height, width, data)
}

pub fn write_pfm(path: &Path, depth: &DepthMap) -> Result<()> {
    let (h, w) = (depth.height(), depth.width());
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    for y in (0..h).rev() {
        for x in 0..w {
            out.extend_from_slice(&(depth.at(x, y) as f32).to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a 3×3 homography written as nine whitespace-separated numbers in
/// row-major order.
pub fn read_homography(path: &Path) -> Result<Mat3> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let vals: Vec<f64> = text
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::InvalidArgument(format!("{}: `{t}` is not a number", path.display()))))
        .collect::<Result<_>>()?;
    if vals.len() != 9 {
        return Err(Error::InvalidArgument(format!("{}: expected 9 numbers, found {}", path.display(), vals.len())));
    }
    Ok(Mat3::from_row_slice(&vals))
}

pub fn write_homography(path: &Path, h: &Mat3) -> Result<()> {
    let mut s = String::new();
    for r in 0..3 {
        let row: Vec<String> = (0..3).map(|c| format!("{:e}", h[(r, c)])).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn encode_features(features: &FeatureSet) -> Vec<u8> {
    let (n, dim) = (features.len(), features.dim());
    let mut out = Vec::with_capacity(16 + n * (12 + 4 * dim));
    out.extend_from_slice(FEATURE_MAGIC);
    for v in [FEATURE_FORMAT, n as u32, dim as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for k in &features.keypoints {
        out.extend_from_slice(&(k.u as f32).to_le_bytes());
        out.extend_from_slice(&(k.v as f32).to_le_bytes());
    }
    for k in &features.keypoints {
        out.extend_from_slice(&(k.score as f32).to_le_bytes());
    }
    for &d in features.descriptors.data() {
        out.extend_from_slice(&(d as f32).to_le_bytes());
    }
    out
}

/// Decodes a feature file. The format does not store the image size, so
/// `image_size` is `(0, 0)`.
pub fn decode_features(bytes: &[u8]) -> Result<FeatureSet> {
    let err = |m: &str| Error::FeatureFile(m.to_string());
    if bytes.len() < 16 || &bytes[..4] != FEATURE_MAGIC {
        return Err(err("missing RADA header"));
    }
    let word = |i: usize| u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]);
    if word(4) != FEATURE_FORMAT {
        return Err(Error::FeatureFile(format!("unsupported format version {}", word(4))));
    }
    let (n, dim) = (word(8) as usize, word(12) as usize);
    let expected = 16 + 4 * (n * 2 + n + n * dim);
    if bytes.len() != expected {
        return Err(Error::FeatureFile(format!("expected {expected} bytes for N={n}, dim={dim}, found {}", bytes.len())));
    }
    let floats: Vec<f64> = bytes[16..].chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64).collect();
    let (pos, rest) = floats.split_at(2 * n);
    let (scores, desc) = rest.split_at(n);
    let keypoints = (0..n).map(|i| Keypoint { u: pos[2 * i], v: pos[2 * i + 1], score: scores[i] }).collect();
    Ok(FeatureSet { keypoints, descriptors: Tensor::new([n, dim], desc.to_vec()), image_size: (0, 0) })
}

pub fn write_features(path: &Path, features: &FeatureSet) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_features(features)).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<FeatureSet> {
    decode_features(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_round_trip() {
        let fs = FeatureSet {
            keypoints: vec![Keypoint { u: 1.5, v: 2.25, score: 0.5 }, Keypoint { u: 3.0, v: 0.0, score: 0.75 }],
            descriptors: Tensor::new([2, 2], vec![0.6, 0.8, 1.0, 0.0]),
            image_size: (0, 0),
        };
        let bytes = encode_features(&fs);
        assert_eq!(&bytes[..4], b"RADA");
        let back = decode_features(&bytes).unwrap();
        assert_eq!(back.keypoints, fs.keypoints);
        assert!(back.descriptors.max_abs_diff(&fs.descriptors) < 1e-7);
        assert!(decode_features(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn homography_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("H");
        let h = Mat3::new(1.1, 0.01, -3.5, 0.02, 0.9, 7.25, 1e-4, -2e-4, 1.0);
        write_homography(&p, &h).unwrap();
        assert_eq!(read_homography(&p).unwrap(), h);
    }

    #[test]
    fn pfm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.pfm");
        let d = DepthMap::from_fn(3, 4, |x, y| 1.0 + x as f64 + 10.0 * y as f64);
        write_pfm(&p, &d).unwrap();
        assert_eq!(read_pfm(&p).unwrap(), d);
    }

    #[test]
    fn crop_keeps_the_center() {
        let raw = RawImage { height: 40, width: 70, hwc: (0..40 * 70 * 3).map(|i| (i % 7) as f64 / 7.0).collect() };
        let (img, (x0, y0)) = raw.center_crop_to_multiple(32).unwrap();
        assert_eq!((img.height(), img.width(), x0, y0), (32, 64, 3, 4));
        assert_eq!(img.get(1, 0, 0), raw.hwc[(4 * 70 + 3) * 3 + 1]);
    }
}
