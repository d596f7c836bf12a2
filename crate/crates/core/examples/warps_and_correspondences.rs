//! Warps points between views under a homography and under a pose with
//! depth maps, then builds one-to-one ground-truth correspondences.
//!
//! `cargo run --release --example warps_and_correspondences`

use nalgebra::{Matrix3, Rotation3, Vector3};
use rada::geometry::{build_correspondences, distance, Camera, DepthMap, Direction, RelativePose, WarpSpec};

fn main() -> rada::Result<()> {
    let h = Matrix3::new(1.02, 0.05, 3.0, -0.04, 0.98, -2.0, 2e-4, -1e-4, 1.0);
    let homography = WarpSpec::homography(h, (64, 64), (64, 64))?;

    let depth = DepthMap::from_fn(64, 64, |x, y| 4.0 + 0.01 * (x + y) as f64);
    let rotation = *Rotation3::from_euler_angles(0.02, -0.03, 0.05).matrix();
    let pose = RelativePose::new(rotation, Vector3::new(0.1, 0.0, 0.05))?;
    let pose_depth = WarpSpec::pose_depth(Camera::simple(60.0, 64, 64, Some(depth.clone())), Camera::simple(60.0, 64, 64, Some(depth)), pose)?;

    let points: Vec<[f64; 2]> = (0..6).map(|i| [8.0 + 9.0 * i as f64, 30.0 + 3.0 * i as f64]).collect();
    for (name, spec) in [("homography", &homography), ("pose+depth", &pose_depth)] {
        println!("{name}: coverage {:.2}", spec.coverage(Direction::AtoB));
        for p in &points {
            match spec.warp(*p, Direction::AtoB) {
                Some(q) => println!("  ({:5.1}, {:5.1}) -> ({:6.2}, {:6.2})", p[0], p[1], q[0], q[1]),
                None => println!("  ({:5.1}, {:5.1}) -> outside", p[0], p[1]),
            }
        }
        // B reuses A's depth map, so only the homography inverts exactly.
        if let (true, Some(q)) = (name == "homography", spec.warp(points[2], Direction::AtoB)) {
            if let Some(back) = spec.warp(q, Direction::BtoA) {
                println!("  round trip error {:.2e} px", distance(back, points[2]));
            }
        }
    }

    // Detections in B: the true warps of A's points, jittered, plus clutter.
    let mut in_b: Vec<[f64; 2]> = points.iter().filter_map(|p| homography.warp(*p, Direction::AtoB)).map(|q| [q[0] + 0.7, q[1] - 0.4]).collect();
    in_b.extend([[2.0, 2.0], [60.0, 5.0]]);
    let set = build_correspondences(&points, &in_b, &homography, 3.0);
    println!("{} correspondences within {} px:", set.len(), set.th_gt);
    for c in &set.pairs {
        println!("  a{} <-> b{}  residual {:.2} px", c.index_a, c.index_b, distance(c.p_ab, c.p_b));
    }
    Ok(())
}
