//! Brute-force margin search over the unit lp circle in the plane.

use pgd_core::linmodel::Dataset;

const GRID: usize = 4096;
fn unit_circle_point(theta: f64, p: f64) -> [f64; 2] {
    let (s, c) = theta.sin_cos();
    let n = (c.abs().powf(p) + s.abs().powf(p)).powf(1.0 / p);
    [c / n, s / n]
}

fn grid_margin(data: &Dataset, theta: f64, p: f64) -> f64 {
    let w = unit_circle_point(theta, p);
    (0..data.len())
        .map(|i| {
            let (x, y) = data.point(i);
            y * (x[0] * w[0] + x[1] * w[1])
        })
        .fold(f64::INFINITY, f64::min)
}

/// Best margin over the unit lp circle: a 4096-angle scan, then two zoomed
/// rescans around the winner.
pub fn brute_force_margin(data: &Dataset, p: f64) -> f64 {
    let (mut lo, mut hi) = (0.0, std::f64::consts::TAU);
    let mut best = (f64::NEG_INFINITY, 0.0);
    for _ in 0..3 {
        let step = (hi - lo) / GRID as f64;
        best = (0..=GRID)
            .map(|k| {
                let t = lo + step * k as f64;
                (grid_margin(data, t, p), t)
            })
            .fold((f64::NEG_INFINITY, 0.0), |a, b| if b.0 > a.0 { b } else { a });
        lo = best.1 - 2.0 * step;
        hi = best.1 + 2.0 * step;
    }
    best.0
}
