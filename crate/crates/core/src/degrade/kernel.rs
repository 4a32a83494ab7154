use std::fmt::Write as _;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Smallest and largest supported kernel side.
pub const MIN_SIDE: usize = 3;
pub const MAX_SIDE: usize = 41;

/// Kernel sides used by the synthesis protocol.
pub const PROTOCOL_SIDES: [usize; 4] = [11, 21, 31, 41];

const SUM_TOLERANCE: f64 = 1e-6;

/// A normalized, nonnegative 2-D blur kernel with odd side length.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    side: usize,
    taps: Vec<f64>,
}

fn check_side(side: usize) -> Result<()> {
    if side % 2 == 0 || !(MIN_SIDE..=MAX_SIDE).contains(&side) {
        return Err(Error::invalid(format!(
            "kernel side must be odd and within {MIN_SIDE}..={MAX_SIDE}, got {side}"
        )));
    }
    Ok(())
}

impl Kernel {
    /// Validates side, nonnegativity and unit sum.
    pub fn new(side: usize, taps: Vec<f64>) -> Result<Self> {
        check_side(side)?;
        if taps.len() != side * side {
            return Err(Error::invalid(format!(
                "kernel of side {side} needs {} taps, got {}",
                side * side,
                taps.len()
            )));
        }
        if let Some(v) = taps.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::invalid(format!("kernel tap {v} is negative or non-finite")));
        }
        let sum: f64 = taps.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::invalid(format!("kernel taps sum to {sum}, expected 1")));
        }
        Ok(Kernel { side, taps })
    }

    /// Unit impulse at the center.
    pub fn delta(side: usize) -> Result<Self> {
        check_side(side)?;
        let mut taps = vec![0.0; side * side];
        taps[side * side / 2] = 1.0;
        Ok(Kernel { side, taps })
    }

    /// Box filter with equal taps.
    pub fn uniform(side: usize) -> Result<Self> {
        check_side(side)?;
        let n = side * side;
        Ok(Kernel {
            side,
            taps: vec![1.0 / n as f64; n],
        })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn radius(&self) -> usize {
        self.side / 2
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.taps[y * self.side + x]
    }

    /// The kernel rotated by 180 degrees.
    pub fn flipped(&self) -> Kernel {
        Kernel {
            side: self.side,
            taps: self.taps.iter().rev().copied().collect(),
        }
    }

    /// Plain-text matrix: the side on the first line, then `side` rows.
    pub fn to_text(&self) -> String {
        let mut s = format!("{}\n", self.side);
        for row in self.taps.chunks(self.side) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            let _ = writeln!(s, "{}", line.join(" "));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let side: usize = lines
            .next()
            .ok_or_else(|| Error::invalid("empty kernel file"))?
            .trim()
            .parse()
            .map_err(|e| Error::invalid(format!("bad kernel side: {e}")))?;
        let mut taps = Vec::with_capacity(side * side);
        for (row, line) in lines.enumerate() {
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::invalid(format!("bad kernel tap on row {row}: {e}")))?;
            if vals.len() != side {
                return Err(Error::invalid(format!(
                    "kernel row {row} has {} taps, expected {side}",
                    vals.len()
                )));
            }
            taps.extend(vals);
        }
        Kernel::new(side, taps)
    }
}

/// Generates a camera-shake-like kernel from a seeded random trajectory.
///
/// A smooth random walk is scaled to fit the grid, rasterized with
/// bilinear splatting at sub-pixel spacing, blurred with a Gaussian of
/// std 0.5 px and normalized.
pub fn gen_kernel(side: usize, seed: u64) -> Result<Kernel> {
    check_side(side)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // trajectory with inertia and occasional jerks
    let n_points = 64;
    let mut pts = Vec::with_capacity(n_points);
    let mut pos = (0.0f64, 0.0f64);
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut vel = (angle.cos(), angle.sin());
    pts.push(pos);
    for _ in 1..n_points {
        let nx: f64 = StandardNormal.sample(&mut rng);
        let ny: f64 = StandardNormal.sample(&mut rng);
        let jerk = if rng.gen_bool(0.05) { 2.0 } else { 0.4 };
        vel.0 += jerk * nx;
        vel.1 += jerk * ny;
        let speed = (vel.0 * vel.0 + vel.1 * vel.1).sqrt().max(1e-9);
        vel = (vel.0 / speed, vel.1 / speed);
        pos = (pos.0 + vel.0, pos.1 + vel.1);
        pts.push(pos);
    }

    let (min_x, max_x) = extent(pts.iter().map(|p| p.0));
    let (min_y, max_y) = extent(pts.iter().map(|p| p.1));
    let span = (max_x - min_x).max(max_y - min_y).max(1e-9);
    let room = side.saturating_sub(5) as f64;
    let target = room * rng.gen_range(0.5..=1.0);
    let scale = target / span;
    let center = (side as f64 - 1.0) / 2.0;
    let (cx, cy) = ((min_x + max_x) / 2.0, (min_y + max_y) / 2.0);
    let pts: Vec<(f64, f64)> = pts
        .iter()
        .map(|&(x, y)| ((x - cx) * scale + center, (y - cy) * scale + center))
        .collect();

    let mut grid = vec![0.0f64; side * side];
    for seg in pts.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let len = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
        let samples = ((len * 10.0).ceil() as usize).max(1);
        for s in 0..samples {
            let t = (s as f64 + 0.5) / samples as f64;
            splat(
                &mut grid,
                side,
                a.0 + t * (b.0 - a.0),
                a.1 + t * (b.1 - a.1),
                len / samples as f64 + 1e-3,
            );
        }
    }

    let blurred = gaussian_blur(&grid, side, 0.5, 2);
    let total: f64 = blurred.iter().sum();
    let taps = blurred.iter().map(|v| v / total).collect();
    Kernel::new(side, taps)
}

fn extent(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

fn splat(grid: &mut [f64], side: usize, x: f64, y: f64, weight: f64) {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let last = side as f64 - 1.0;
    for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
        for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
            let (gx, gy) = ((x0 + dx).clamp(0.0, last), (y0 + dy).clamp(0.0, last));
            grid[gy as usize * side + gx as usize] += weight * wx * wy;
        }
    }
}

fn gaussian_blur(src: &[f64], side: usize, std: f64, radius: usize) -> Vec<f64> {
    let r = radius as isize;
    let g: Vec<f64> = (-r..=r).map(|d| (-(d * d) as f64 / (2.0 * std * std)).exp()).collect();
    let norm: f64 = g.iter().sum();
    let g: Vec<f64> = g.iter().map(|v| v / norm).collect();
    let pass = |input: &[f64], horizontal: bool| {
        let mut out = vec![0.0; side * side];
        for y in 0..side {
            for x in 0..side {
                let mut acc = 0.0;
                for (i, gv) in g.iter().enumerate() {
                    let d = i as isize - r;
                    let (sx, sy) = if horizontal {
                        (x as isize + d, y as isize)
                    } else {
                        (x as isize, y as isize + d)
                    };
                    if sx >= 0 && sy >= 0 && (sx as usize) < side && (sy as usize) < side {
                        acc += gv * input[sy as usize * side + sx as usize];
                    }
                }
                out[y * side + x] = acc;
            }
        }
        out
    };
    pass(&pass(src, true), false)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn four_connected(k: &Kernel) -> bool {
        let s = k.side();
        let on: Vec<bool> = k.taps().iter().map(|&v| v > 0.0).collect();
        let Some(start) = on.iter().position(|&b| b) else {
            return false;
        };
        let mut seen = vec![false; s * s];
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(i) = stack.pop() {
            let (y, x) = (i / s, i % s);
            let mut nb = Vec::new();
            if y > 0 {
                nb.push(i - s);
            }
            if y + 1 < s {
                nb.push(i + s);
            }
            if x > 0 {
                nb.push(i - 1);
            }
            if x + 1 < s {
                nb.push(i + 1);
            }
            for j in nb {
                if on[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        on.iter().zip(&seen).all(|(o, s)| !o || *s)
    }

    #[test]
    fn generated_kernels_are_normalized_and_connected() {
        for side in [3, 5, 11, 21, 31, 41] {
            for seed in 0..8 {
                let k = gen_kernel(side, seed).unwrap();
                let sum: f64 = k.taps().iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
                assert!(k.taps().iter().all(|&v| v >= 0.0));
                assert!(four_connected(&k), "side {side} seed {seed}");
            }
        }
    }

    #[test]
    fn generation_is_seeded() {
        assert_eq!(gen_kernel(11, 7).unwrap(), gen_kernel(11, 7).unwrap());
        assert_ne!(gen_kernel(11, 7).unwrap(), gen_kernel(11, 8).unwrap());
    }

    #[test]
    fn large_kernels_are_not_blobs() {
        // a 41-px kernel should spread well beyond the Gaussian footprint
        let k = gen_kernel(41, 3).unwrap();
        let support = k.taps().iter().filter(|&&v| v > 1e-4).count();
        assert!(support > 60, "support {support}");
    }

    #[test]
    fn rejects_bad_sides() {
        assert!(gen_kernel(10, 0).is_err());
        assert!(gen_kernel(43, 0).is_err());
        assert!(Kernel::delta(1).is_err());
    }

    #[test]
    fn rejects_unnormalized_taps() {
        assert!(Kernel::new(3, vec![0.2; 9]).is_err());
        let mut t = vec![0.0; 9];
        t[0] = -0.5;
        t[1] = 1.5;
        assert!(Kernel::new(3, t).is_err());
    }

    #[test]
    fn text_roundtrip_is_exact() {
        let k = gen_kernel(21, 11).unwrap();
        let back = Kernel::from_text(&k.to_text()).unwrap();
        assert_eq!(k, back);
        assert!(k.to_text().starts_with("21\n"));
    }

    #[test]
    fn flip_rotates() {
        let mut taps = vec![0.0; 9];
        taps[0] = 0.75;
        taps[5] = 0.25;
        let k = Kernel::new(3, taps).unwrap();
        let f = k.flipped();
        assert_eq!(f.at(2, 2), 0.75);
        assert_eq!(f.at(1, 0), 0.25);
    }
}
