//! Hull of a noisy point cloud, boundary rays from its centroid and the
//! radial level sets of the hull against the full square.
//!
//!     cargo run --example hull_and_rays

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reachmap::geometry::{partition_level_sets, ray_to_boundary, FullSpace, PartitionRegion};
use reachmap::{convex_hull, Point2};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let points: Vec<Point2> = (0..2000)
        .map(|_| {
            let r = 0.6 * rng.random::<f64>().sqrt();
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            Point2::new(0.2 + 1.3 * r * a.cos(), -0.1 + 0.8 * r * a.sin())
        })
        .collect();

    let hull = convex_hull(&points, 0.025)?;
    let c = hull.centroid();
    println!(
        "{} points -> {} vertices, area {:.4}, centroid ({:.3}, {:.3})",
        points.len(),
        hull.vertices().len(),
        hull.area(),
        c.x,
        c.y
    );

    println!("   theta   hull r   square r   ratio");
    for i in 0..8 {
        let theta = i as f64 * std::f64::consts::FRAC_PI_4;
        let h = ray_to_boundary(c, theta, &hull, 0.01)?.distance(c);
        let f = ray_to_boundary(c, theta, &FullSpace, 0.01)?.distance(c);
        println!("{:>8.3} {:>8.4} {:>10.4} {:>7.3}", theta, h, f, h / f);
    }

    let levels = 5;
    let part = partition_level_sets(PartitionRegion::Hull(&hull), 40, 40, levels, c, 0.01)?;
    let mut counts = vec![0usize; levels];
    for l in part.cell_level.iter().flatten() {
        counts[*l as usize] += 1;
    }
    println!("cells per level inside the hull (40x40 grid): {counts:?}");
    Ok(())
}
