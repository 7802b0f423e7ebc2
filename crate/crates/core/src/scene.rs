//! Procedural RGB-D scenes for demos, tests and benchmarks.

use crate::image::{DepthMap, Field3, ImageRGB};
use crate::rng::Rng;

const BLOBS: usize = 4;

/// A smooth colored scene with a few soft blobs and a tilted-floor depth
/// map in [0.5, 10] meters. Fully determined by `(seed, h, w)`.
pub fn procedural_scene(seed: u64, h: usize, w: usize) -> (ImageRGB, DepthMap) {
    let mut rng = Rng::new(seed);
    let mut u = |lo: f64, hi: f64| rng.uniform(lo, hi).expect("lo <= hi");
    let base = [u(0.2, 0.8), u(0.2, 0.8), u(0.2, 0.8)];
    let tilt = [u(-0.3, 0.3), u(-0.3, 0.3), u(-0.3, 0.3)];
    let blobs: Vec<([f64; 2], f64, [f64; 3])> = (0..BLOBS)
        .map(|_| {
            (
                [u(0.0, 1.0), u(0.0, 1.0)],
                u(0.05, 0.3),
                [u(-0.4, 0.4), u(-0.4, 0.4), u(-0.4, 0.4)],
            )
        })
        .collect();
    let freq = u(2.0, 8.0);
    let near = u(0.5, 3.0);
    let far = u(near + 1.0, 10.0);

    let norm = |y: usize, x: usize| {
        (
            (y as f64 + 0.5) / h.max(1) as f64,
            (x as f64 + 0.5) / w.max(1) as f64,
        )
    };
    let bump = |fy: f64, fx: f64, center: [f64; 2], radius: f64| {
        let d2 = (fy - center[0]).powi(2) + (fx - center[1]).powi(2);
        (-d2 / (2.0 * radius * radius)).exp()
    };

    let rgb = Field3::from_fn(h, w, |c, y, x| {
        let (fy, fx) = norm(y, x);
        let mut v =
            base[c] + tilt[c] * (fx - 0.5) + 0.05 * (freq * (fx + fy) * std::f64::consts::PI).sin();
        for (center, radius, color) in &blobs {
            v += color[c] * bump(fy, fx, *center, *radius);
        }
        v.clamp(0.0, 1.0)
    });
    let depth: Vec<f64> = (0..h * w)
        .map(|i| {
            let (fy, fx) = norm(i / w, i % w);
            let mut d = far - (far - near) * fy;
            for (center, radius, _) in &blobs {
                d -= 0.3 * (d - near) * bump(fy, fx, *center, *radius);
            }
            d.clamp(0.5, 10.0)
        })
        .collect();
    (rgb, DepthMap::new(h, w, depth).expect("depth in range"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let (a, d) = procedural_scene(3, 9, 13);
        assert_eq!((a.clone(), d.clone()), procedural_scene(3, 9, 13));
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let (lo, hi) = d.min_max();
        assert!(lo >= 0.5 && hi <= 10.0);
        assert_ne!(procedural_scene(4, 9, 13).0, a);
    }
}
