use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::image::{rgb_to_ycbcr, RgbImage};
use crate::prelude::*;

pub const DEFAULT_PALETTE_SIZE: usize = 4;

/// A dominant garment color in luma/chroma form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PaletteColor {
    pub luma: f64,
    /// `(Cb, Cr)`.
    pub chroma: [f64; 2],
    /// Fraction of garment pixels in this cluster.
    pub weight: f64,
}

const ITERATIONS: usize = 30;

fn is_backdrop(y: f64, c: [f64; 2]) -> bool {
    y > 0.94 && c[0].abs() < 0.03 && c[1].abs() < 0.03
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1]) + (a[2] - b[2]) * (a[2] - b[2])
}

/// Quantizes the garment's non-backdrop pixels into at most `k` colors by
/// k-means in (Y, Cb, Cr).
///
/// Initialization is farthest-point from the pixel nearest the mean, so the
/// result depends only on the image. Near-white backdrop pixels are ignored
/// unless nothing else remains. Clusters are returned by descending weight.
pub fn extract_palette(image: &RgbImage, k: usize) -> Result<Vec<PaletteColor>> {
    let k = k.max(1);
    let all: Vec<[f64; 3]> = image
        .pixels()
        .iter()
        .map(|&p| {
            let (y, c) = rgb_to_ycbcr(p);
            [y, c[0], c[1]]
        })
        .collect();
    let fg: Vec<[f64; 3]> = all.iter().copied().filter(|p| !is_backdrop(p[0], [p[1], p[2]])).collect();
    let pts = if fg.is_empty() { all } else { fg };

    let n = pts.len() as f64;
    let mut mean = [0.0; 3];
    for p in &pts {
        for i in 0..3 {
            mean[i] += p[i] / n;
        }
    }
    let first = pts
        .iter()
        .copied()
        .min_by(|a, b| dist2(*a, mean).total_cmp(&dist2(*b, mean)))
        .expect("non-empty image");
    let mut centers = vec![first];
    while centers.len() < k {
        let (far, d) = pts
            .iter()
            .map(|&p| {
                let d = centers.iter().map(|&c| dist2(p, c)).fold(f64::INFINITY, f64::min);
                (p, d)
            })
            .fold(([0.0; 3], -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if d <= 1e-12 {
            break;
        }
        centers.push(far);
    }

    let mut assign = vec![0usize; pts.len()];
    for _ in 0..ITERATIONS {
        for (a, p) in assign.iter_mut().zip(&pts) {
            *a = (0..centers.len())
                .min_by(|&i, &j| dist2(*p, centers[i]).total_cmp(&dist2(*p, centers[j])))
                .expect("at least one center");
        }
        let mut sums = vec![[0.0; 4]; centers.len()];
        for (a, p) in assign.iter().zip(&pts) {
            for i in 0..3 {
                sums[*a][i] += p[i];
            }
            sums[*a][3] += 1.0;
        }
        let mut moved = false;
        for (c, s) in centers.iter_mut().zip(&sums) {
            if s[3] > 0.0 {
                let nc = [s[0] / s[3], s[1] / s[3], s[2] / s[3]];
                moved |= nc != *c;
                *c = nc;
            }
        }
        if !moved {
            break;
        }
    }
    let mut counts = vec![0usize; centers.len()];
    for a in &assign {
        counts[*a] += 1;
    }
    let mut palette: Vec<PaletteColor> = centers
        .iter()
        .zip(&counts)
        .filter(|(_, &c)| c > 0)
        .map(|(c, &cnt)| PaletteColor {
            luma: c[0],
            chroma: [c[1], c[2]],
            weight: cnt as f64 / n,
        })
        .collect();
    palette.sort_by(|a, b| b.weight.total_cmp(&a.weight).then(a.luma.total_cmp(&b.luma)));
    Ok(palette)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solid_garment_on_white_gives_one_color() {
        let img = RgbImage::from_fn(20, 20, |x, y| {
            if (4..16).contains(&x) && (2..18).contains(&y) {
                [0.8, 0.2, 0.2]
            } else {
                [1.0; 3]
            }
        });
        let p = extract_palette(&img, 4).unwrap();
        assert_eq!(p.len(), 1);
        let (_, c) = rgb_to_ycbcr([0.8, 0.2, 0.2]);
        assert!((p[0].chroma[0] - c[0]).abs() < 1e-12 && (p[0].chroma[1] - c[1]).abs() < 1e-12);
    }

    #[test]
    fn two_tone_garment_splits_by_weight() {
        let img = RgbImage::from_fn(10, 10, |x, _| if x < 7 { [0.1, 0.2, 0.7] } else { [0.9, 0.8, 0.1] });
        let p = extract_palette(&img, 4).unwrap();
        assert_eq!(p.len(), 2);
        assert!((p[0].weight - 0.7).abs() < 1e-12);
    }
}
