//! Matching, mean matching accuracy, and match visualization.

use image::{Rgb, RgbImage};
use serde::Serialize;

use crate::backbone::ImageTensor;
use crate::error::{Error, Result};
use crate::geometry::{distance, Direction, WarpSpec};
use crate::io::to_rgb8;
use crate::keypoint::FeatureSet;
use crate::tensor::{matmul, Tensor};

pub const DEFAULT_RATIO: f64 = 0.9;
pub const DEFAULT_DISTANCE: f64 = 0.7;
pub const MMA_THRESHOLDS: [f64; 10] = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0];
/// Reprojection error above which a drawn match is red.
pub const VIS_THRESHOLD: f64 = 5.0;

/// Extra test applied on top of mutual nearest neighbours.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum MatchFilter {
    #[default]
    None,
    /// Best-to-second-best descriptor distance ratio at most this value, in
    /// both directions.
    Ratio(f64),
    /// Euclidean distance between the unit descriptors at most this value.
    Distance(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Match {
    pub a: usize,
    pub b: usize,
    pub similarity: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MatchSet {
    pub matches: Vec<Match>,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }

    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.matches.iter().map(|m| (m.a, m.b)).collect()
    }
}

fn unit_distance(similarity: f64) -> f64 {
    (2.0 - 2.0 * similarity).max(0.0).sqrt()
}

/// Index of the best entry and the runner-up value; ties go to the lower
/// index.
fn best_two(values: impl Iterator<Item = f64>) -> Option<(usize, f64, f64)> {
    let mut best: Option<(usize, f64)> = None;
    let mut second = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        match best {
            Some((_, b)) if v <= b => second = second.max(v),
            Some((_, b)) => {
                second = b;
                best = Some((i, v));
            }
            None => best = Some((i, v)),
        }
    }
    best.map(|(i, b)| (i, b, second))
}

fn ratio_ok(best: f64, second: f64, max_ratio: f64) -> bool {
    if second == f64::NEG_INFINITY {
        return true;
    }
    let (d1, d2) = (unit_distance(best), unit_distance(second));
    d2 > 0.0 && d1 / d2 <= max_ratio
}

/// Mutual nearest neighbours under cosine similarity of unit descriptors,
/// sorted by the A index. A nearest neighbour must be unique: a row or
/// column whose best similarity is tied produces no match.
pub fn mutual_nn(desc_a: &Tensor, desc_b: &Tensor, filter: MatchFilter) -> Result<MatchSet> {
    if desc_a.rank() != 2 || desc_b.rank() != 2 || desc_a.dim(1) != desc_b.dim(1) {
        return Err(Error::Dimension(format!("descriptor shapes {:?} and {:?} do not match", desc_a.shape(), desc_b.shape())));
    }
    let (na, nb) = (desc_a.dim(0), desc_b.dim(0));
    if na == 0 || nb == 0 {
        return Ok(MatchSet::default());
    }
    let sims = matmul(desc_a, &desc_b.transpose());
    let data = sims.data();
    let from_b: Vec<_> = (0..nb).map(|j| best_two((0..na).map(|i| data[i * nb + j])).expect("non-empty")).collect();
    let mut matches = Vec::new();
    for i in 0..na {
        let (j, best, second) = best_two(sims.row(i).iter().copied()).expect("non-empty");
        let (back, _, second_b) = from_b[j];
        if back != i || second == best || second_b == best {
            continue;
        }
        let keep = match filter {
            MatchFilter::None => true,
            MatchFilter::Ratio(r) => ratio_ok(best, second, r) && ratio_ok(best, second_b, r),
            MatchFilter::Distance(d) => unit_distance(best) <= d,
        };
        if keep {
            matches.push(Match { a: i, b: j, similarity: best });
        }
    }
    Ok(MatchSet { matches })
}

/// Reprojection error of each match, `None` where ground truth is undefined.
pub fn match_errors(a: &FeatureSet, b: &FeatureSet, matches: &MatchSet, spec: &WarpSpec) -> Vec<Option<f64>> {
    matches
        .matches
        .iter()
        .map(|m| {
            let pa = a.keypoints[m.a].position();
            let pb = b.keypoints[m.b].position();
            spec.reproject(pa, Direction::AtoB).map(|q| distance(q, pb))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MmaCurve {
    pub thresholds: Vec<f64>,
    pub accuracy: Vec<f64>,
    pub num_features: (usize, usize),
    pub num_matches: usize,
}

impl MmaCurve {
    /// Accuracy at the listed threshold `t`.
    pub fn at(&self, t: f64) -> Option<f64> {
        self.thresholds.iter().position(|&x| x == t).map(|i| self.accuracy[i])
    }

    pub fn mma3(&self) -> f64 {
        self.at(3.0).expect("3 px is a standard threshold")
    }

    /// Machine-readable `name=value` lines.
    pub fn machine_lines(&self) -> Vec<String> {
        let mut out = vec![
            format!("num_features_a={}", self.num_features.0),
            format!("num_features_b={}", self.num_features.1),
            format!("num_matches={}", self.num_matches),
        ];
        for (t, a) in self.thresholds.iter().zip(&self.accuracy) {
            out.push(format!("mma@{t}={a:.6}"));
        }
        out
    }

    pub fn table(&self) -> String {
        let mut s = format!(
            "features  {} / {}\nmatches   {}\nthreshold  accuracy\n",
            self.num_features.0, self.num_features.1, self.num_matches
        );
        for (t, a) in self.thresholds.iter().zip(&self.accuracy) {
            s.push_str(&format!("{t:>6} px  {a:>8.4}\n"));
        }
        s
    }
}

/// Fraction of matches with reprojection error at most each threshold. A
/// match without defined ground truth counts as wrong.
pub fn mma_curve(a: &FeatureSet, b: &FeatureSet, matches: &MatchSet, spec: &WarpSpec) -> MmaCurve {
    let errors = match_errors(a, b, matches, spec);
    let n = errors.len();
    let accuracy = MMA_THRESHOLDS
        .iter()
        .map(|&t| {
            if n == 0 {
                0.0
            } else {
                errors.iter().filter(|e| e.is_some_and(|e| e <= t)).count() as f64 / n as f64
            }
        })
        .collect();
    MmaCurve { thresholds: MMA_THRESHOLDS.to_vec(), accuracy, num_features: (a.len(), b.len()), num_matches: n }
}

/// Mean of per-pair curves.
pub fn mean_curve(curves: &[MmaCurve]) -> Option<MmaCurve> {
    let first = curves.first()?;
    let k = curves.len() as f64;
    let accuracy = (0..first.accuracy.len()).map(|i| curves.iter().map(|c| c.accuracy[i]).sum::<f64>() / k).collect();
    Some(MmaCurve {
        thresholds: first.thresholds.clone(),
        accuracy,
        num_features: (
            curves.iter().map(|c| c.num_features.0).sum::<usize>() / curves.len(),
            curves.iter().map(|c| c.num_features.1).sum::<usize>() / curves.len(),
        ),
        num_matches: curves.iter().map(|c| c.num_matches).sum::<usize>() / curves.len(),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct LineCounts {
    pub green: usize,
    pub red: usize,
    pub blue: usize,
}

const GREEN: Rgb<u8> = Rgb([0, 220, 0]);
const RED: Rgb<u8> = Rgb([230, 0, 0]);
const BLUE: Rgb<u8> = Rgb([40, 90, 255]);

/// Side-by-side canvas with one line per match: green within
/// [`VIS_THRESHOLD`] px, red beyond it, blue without ground truth.
pub fn visualize(
    image_a: &ImageTensor,
    image_b: &ImageTensor,
    a: &FeatureSet,
    b: &FeatureSet,
    matches: &MatchSet,
    spec: Option<&WarpSpec>,
) -> (RgbImage, LineCounts) {
    let (ra, rb) = (to_rgb8(image_a), to_rgb8(image_b));
    let (wa, ha) = ra.dimensions();
    let (wb, hb) = rb.dimensions();
    let mut canvas = RgbImage::new(wa + wb, ha.max(hb));
    image::imageops::replace(&mut canvas, &ra, 0, 0);
    image::imageops::replace(&mut canvas, &rb, wa as i64, 0);
    let errors = match spec {
        Some(s) => match_errors(a, b, matches, s),
        None => vec![None; matches.len()],
    };
    let mut counts = LineCounts::default();
    for (m, e) in matches.matches.iter().zip(errors) {
        let color = match e {
            Some(e) if e <= VIS_THRESHOLD => {
                counts.green += 1;
                GREEN
            }
            Some(_) => {
                counts.red += 1;
                RED
            }
            None => {
                counts.blue += 1;
                BLUE
            }
        };
        let pa = a.keypoints[m.a].position();
        let pb = b.keypoints[m.b].position();
        draw_line(&mut canvas, pa, [pb[0] + wa as f64, pb[1]], color);
    }
    (canvas, counts)
}

fn draw_line(img: &mut RgbImage, p: [f64; 2], q: [f64; 2], color: Rgb<u8>) {
    let (mut x0, mut y0) = (p[0].round() as i64, p[1].round() as i64);
    let (x1, y1) = (q[0].round() as i64, q[1].round() as i64);
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let mut err = dx + dy;
    let (w, h) = (img.width() as i64, img.height() as i64);
    loop {
        if (0..w).contains(&x0) && (0..h).contains(&y0) {
            img.put_pixel(x0 as u32, y0 as u32, color);
        }
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Mat3;
    use crate::keypoint::Keypoint;

    fn unit_rows(rows: &[&[f64]]) -> Tensor {
        let dim = rows[0].len();
        let mut data = Vec::new();
        for r in rows {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            data.extend(r.iter().map(|v| v / n));
        }
        Tensor::new([rows.len(), dim], data)
    }

    fn features(points: &[[f64; 2]], desc: Tensor) -> FeatureSet {
        FeatureSet {
            keypoints: points.iter().map(|p| Keypoint { u: p[0], v: p[1], score: 1.0 }).collect(),
            descriptors: desc,
            image_size: (32, 32),
        }
    }

    #[test]
    fn mutual_check_drops_one_sided_matches() {
        let a = unit_rows(&[&[1.0, 0.0], &[0.9, 0.1]]);
        let b = unit_rows(&[&[1.0, 0.05]]);
        let m = mutual_nn(&a, &b, MatchFilter::None).unwrap();
        assert_eq!(m.pairs(), vec![(0, 0)]);
    }

    #[test]
    fn filters() {
        let a = unit_rows(&[&[1.0, 0.0, 0.0]]);
        let b = unit_rows(&[&[1.0, 0.8, 0.0], &[1.0, 0.0, 0.9]]);
        // Two near-equal candidates fail the ratio test.
        assert!(mutual_nn(&a, &b, MatchFilter::Ratio(0.9)).unwrap().is_empty());
        assert_eq!(mutual_nn(&a, &b, MatchFilter::None).unwrap().len(), 1);
        let far = unit_rows(&[&[0.0, 1.0, 0.0]]);
        assert!(mutual_nn(&a, &far, MatchFilter::Distance(0.7)).unwrap().is_empty());
        assert_eq!(mutual_nn(&a, &a, MatchFilter::Distance(0.7)).unwrap().len(), 1);
    }

    #[test]
    fn mma_on_identity() {
        let pts = [[1.0, 1.0], [10.0, 4.0], [20.0, 20.0]];
        let d = unit_rows(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);
        let fa = features(&pts, d.clone());
        let mut shifted = pts;
        shifted[2] = [22.5, 20.0];
        let fb = features(&shifted, d);
        let m = mutual_nn(&fa.descriptors, &fb.descriptors, MatchFilter::None).unwrap();
        let c = mma_curve(&fa, &fb, &m, &WarpSpec::identity(32, 32));
        assert_eq!(c.num_matches, 3);
        assert!((c.at(2.0).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(c.mma3(), 1.0);
        let (img, counts) = visualize(
            &ImageTensor::constant(32, 32, 0.5).unwrap(),
            &ImageTensor::constant(32, 32, 0.5).unwrap(),
            &fa,
            &fb,
            &m,
            Some(&WarpSpec::homography(Mat3::identity(), (32, 32), (32, 32)).unwrap()),
        );
        assert_eq!(img.dimensions(), (64, 32));
        assert_eq!(counts, LineCounts { green: 3, red: 0, blue: 0 });
    }
}
