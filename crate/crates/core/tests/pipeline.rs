//! Data loading, matching, and evaluation against hand-built inputs.

use std::fs;
use std::process::Command;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rada::backbone::ImageTensor;
use rada::data::load_external_pairs;
use rada::eval::{mean_curve, mma_curve, mutual_nn, visualize, Match, MatchFilter, MatchSet, MMA_THRESHOLDS};
use rada::geometry::{Direction, WarpSpec};
use rada::io::load_image;
use rada::keypoint::{FeatureSet, Keypoint};
use rada::Tensor;

fn features(pos: &[[f64; 2]], descriptors: Tensor) -> FeatureSet {
    FeatureSet {
        keypoints: pos.iter().map(|p| Keypoint { u: p[0], v: p[1], score: 0.9 }).collect(),
        descriptors,
        image_size: (32, 32),
    }
}

fn unit_rows(r: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
    let mut t = Tensor::from_fn([n, d], |_| r.random_range(-1.0..1.0));
    for row in t.data_mut().chunks_mut(d) {
        let s = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter_mut().for_each(|x| *x /= s);
    }
    t
}

fn one_hot(rows: &[usize], d: usize) -> Tensor {
    Tensor::from_fn([rows.len(), d], |i| if rows[i / d] == i % d { 1.0 } else { 0.0 })
}

// ---- manifests ------------------------------------------------------------

#[test]
fn empty_manifest_gives_no_samples() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("manifest.txt");
    fs::write(&m, "# nothing here\n\n").unwrap();
    let out = load_external_pairs(&m, 0.3).unwrap();
    assert!(out.samples.is_empty() && out.skipped.is_empty());
}

#[test]
fn manifest_entries_load_in_order_and_bad_rotations_are_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_rada"))
        .args(["synth-data", "-o", dir.path().to_str().unwrap(), "--pairs", "2", "--size", "64", "--warp", "pose-depth"])
        .output()
        .unwrap();
    assert!(status.status.success());
    let m = dir.path().join("manifest.txt");
    let out = load_external_pairs(&m, 0.0).unwrap();
    assert_eq!(out.samples.len(), 2, "{:?}", out.skipped);
    for (i, s) in out.samples.iter().enumerate() {
        assert_eq!(s.image_a, load_image(&dir.path().join(format!("pair_{i:04}_a.png"))).unwrap());
        assert_eq!(s.domain_labels, (0, 1));
    }

    // Scale one rotation entry of the second view of entry 0.
    let text = fs::read_to_string(&m).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let first = lines.iter().position(|l| !l.starts_with('#')).unwrap();
    let mut tokens: Vec<String> = lines[first].split_whitespace().map(String::from).collect();
    tokens[23 + 10] = "1.5".into();
    lines[first] = tokens.join(" ");
    fs::write(&m, lines.join("\n")).unwrap();
    let out = load_external_pairs(&m, 0.0).unwrap();
    assert_eq!(out.samples.len(), 1);
    assert_eq!(out.skipped.len(), 1);
    assert!(out.skipped[0].contains("rotation"), "{}", out.skipped[0]);
    assert_eq!(out.samples[0].image_a, load_image(&dir.path().join("pair_0001_a.png")).unwrap());
}

// ---- matching -------------------------------------------------------------

#[test]
fn orthogonal_sets_share_one_match() {
    let a = one_hot(&[0, 1, 2, 7], 8);
    let b = one_hot(&[3, 4, 7, 5], 8);
    let m = mutual_nn(&a, &b, MatchFilter::None).unwrap();
    assert_eq!(m.pairs(), vec![(3, 2)]);
}

fn brute_mutual(a: &Tensor, b: &Tensor) -> Vec<(usize, usize)> {
    let (na, nb, d) = (a.dim(0), b.dim(0), a.dim(1));
    let sim = |i: usize, j: usize| (0..d).map(|k| a.data()[i * d + k] * b.data()[j * d + k]).sum::<f64>();
    let argmax = |n: usize, f: &dyn Fn(usize) -> f64| {
        let mut best = 0;
        for k in 1..n {
            if f(k) > f(best) {
                best = k;
            }
        }
        best
    };
    (0..na)
        .filter_map(|i| {
            let j = argmax(nb, &|j| sim(i, j));
            let unique = (0..nb).filter(|&k| sim(i, k) == sim(i, j)).count() == 1
                && (0..na).filter(|&k| sim(k, j) == sim(i, j)).count() == 1;
            (argmax(na, &|k| sim(k, j)) == i && unique).then_some((i, j))
        })
        .collect()
}

#[test]
fn mutual_nn_matches_brute_force_and_is_symmetric() {
    let mut r = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10 {
        let (a, b) = (unit_rows(&mut r, 50, 16), unit_rows(&mut r, 50, 16));
        let m = mutual_nn(&a, &b, MatchFilter::None).unwrap();
        assert_eq!(m.pairs(), brute_mutual(&a, &b));
        let mut swapped: Vec<_> = mutual_nn(&b, &a, MatchFilter::None).unwrap().pairs().into_iter().map(|(i, j)| (j, i)).collect();
        swapped.sort();
        assert_eq!(m.pairs(), swapped);
    }
    let a = unit_rows(&mut r, 30, 8);
    let m = mutual_nn(&a, &a, MatchFilter::None).unwrap();
    assert_eq!(m.pairs(), (0..30).map(|i| (i, i)).collect::<Vec<_>>());
}

// ---- MMA ------------------------------------------------------------------

#[test]
fn single_match_error_thresholds() {
    let fa = features(&[[10.0, 10.0]], one_hot(&[0], 2));
    let fb = features(&[[12.5, 10.0]], one_hot(&[0], 2));
    let m = MatchSet { matches: vec![Match { a: 0, b: 0, similarity: 1.0 }] };
    let c = mma_curve(&fa, &fb, &m, &WarpSpec::identity(32, 32));
    assert_eq!((c.at(1.0), c.at(2.0), c.at(3.0)), (Some(0.0), Some(0.0), Some(1.0)));
}

#[test]
fn mean_mma_equals_per_pair_loop() {
    let mut r = ChaCha8Rng::seed_from_u64(12);
    let h = nalgebra::Matrix3::new(1.05, 0.02, 1.5, -0.03, 0.97, -2.0, 1e-4, 0.0, 1.0);
    let spec = WarpSpec::homography(h, (48, 48), (48, 48)).unwrap();
    let mut curves = Vec::new();
    let mut oracle = vec![0.0; MMA_THRESHOLDS.len()];
    let pairs = 6;
    for _ in 0..pairs {
        let n = r.random_range(1..15);
        let pa: Vec<[f64; 2]> = (0..n).map(|_| [r.random_range(4.0..40.0), r.random_range(4.0..40.0)]).collect();
        let pb: Vec<[f64; 2]> = pa
            .iter()
            .map(|&p| {
                let q = spec.warp(p, Direction::AtoB).unwrap();
                [q[0] + r.random_range(-6.0..6.0), q[1] + r.random_range(-6.0..6.0)]
            })
            .collect();
        let desc = unit_rows(&mut r, n, 8);
        let (fa, fb) = (features(&pa, desc.clone()), features(&pb, desc.clone()));
        let m = mutual_nn(&fa.descriptors, &fb.descriptors, MatchFilter::None).unwrap();
        curves.push(mma_curve(&fa, &fb, &m, &spec));
        for (k, &t) in MMA_THRESHOLDS.iter().enumerate() {
            let mut hits = 0;
            for x in &m.matches {
                let q = spec.warp(pa[x.a], Direction::AtoB).unwrap();
                let e = ((q[0] - pb[x.b][0]).powi(2) + (q[1] - pb[x.b][1]).powi(2)).sqrt();
                if e <= t {
                    hits += 1;
                }
            }
            oracle[k] += hits as f64 / m.len() as f64 / pairs as f64;
        }
    }
    let mean = mean_curve(&curves).unwrap();
    for (a, b) in mean.accuracy.iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
    assert!(mean.accuracy.windows(2).all(|w| w[0] <= w[1]));
}

// ---- visualization --------------------------------------------------------

#[test]
fn visualize_colors_by_error() {
    let img = ImageTensor::constant(32, 32, 0.5).unwrap();
    let spec = WarpSpec::identity(32, 32);
    let fa = features(&[[5.0, 5.0]], one_hot(&[0], 2));
    let exact = features(&[[5.0, 5.0]], one_hot(&[0], 2));
    let off = features(&[[15.0, 5.0]], one_hot(&[0], 2));
    let one = MatchSet { matches: vec![Match { a: 0, b: 0, similarity: 1.0 }] };

    let (canvas, c) = visualize(&img, &img, &fa, &exact, &MatchSet::default(), Some(&spec));
    assert_eq!((c.green, c.red, c.blue), (0, 0, 0));
    assert_eq!((canvas.width(), canvas.height()), (64, 32));
    let gray = canvas.get_pixel(20, 20).0;
    assert!(canvas.pixels().all(|p| p.0 == gray), "no lines are drawn");

    let (canvas, c) = visualize(&img, &img, &fa, &exact, &one, Some(&spec));
    assert_eq!((c.green, c.red, c.blue), (1, 0, 0));
    let px = canvas.get_pixel(20, 5).0;
    assert!(px[1] > px[0] && px[1] > px[2], "{px:?}");

    let (canvas, c) = visualize(&img, &img, &fa, &off, &one, Some(&spec));
    assert_eq!((c.green, c.red, c.blue), (0, 1, 0));
    let px = canvas.get_pixel(20, 5).0;
    assert!(px[0] > px[1] && px[0] > px[2], "{px:?}");
}
