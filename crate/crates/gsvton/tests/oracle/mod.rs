//! Reference implementations written directly from the definitions, used to
//! check the engine. Nothing here calls into the engine's numerics.

use gsvton_core::{CameraView, GaussianCloud, RgbImage};

const SH0: f64 = 0.282_094_791_773_878_14;
const SH1: f64 = 0.488_602_511_902_919_9;

fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn transpose(a: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

/// Rotation matrix of a `(w, x, y, z)` quaternion, normalizing first.
fn quat_matrix(q: [f64; 4]) -> [[f64; 3]; 3] {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let [w, x, y, z] = q.map(|v| v / n);
    [
        [w * w + x * x - y * y - z * z, 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), w * w - x * x + y * y - z * z, 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), w * w - x * x - y * y + z * z],
    ]
}

struct Projected {
    depth: f64,
    index: usize,
    mean: [f64; 2],
    inv: [[f64; 2]; 2],
    opacity: f64,
    color: [f64; 3],
}

/// Renders by visiting every Gaussian at every pixel center.
///
/// Rules: camera-space depth must exceed 0.2; centers more than half the
/// image size outside it are dropped; the 2-D covariance is `J W Σ Wᵀ Jᵀ`
/// plus 0.3 on the diagonal; Gaussians are blended front to back in depth
/// order (ties by index) with alpha `min(o·g, 0.99)`, skipping alpha below
/// 1/255; color is degree-0/1 SH plus 0.5, clamped to `[0, 1]`.
pub fn naive_render(cloud: &GaussianCloud, cam: &CameraView, background: [f64; 3]) -> RgbImage {
    let m = &cam.world_to_camera;
    let rot = [
        [m[0][0], m[0][1], m[0][2]],
        [m[1][0], m[1][1], m[1][2]],
        [m[2][0], m[2][1], m[2][2]],
    ];
    let trans = [m[0][3], m[1][3], m[2][3]];
    let rt = transpose(&rot);
    let center: [f64; 3] = std::array::from_fn(|i| -(0..3).map(|k| rt[i][k] * trans[k]).sum::<f64>());
    let (w, h) = (cam.width as f64, cam.height as f64);

    let mut splats = Vec::new();
    for (index, g) in cloud.iter().enumerate() {
        let p = g.position();
        let t: [f64; 3] = std::array::from_fn(|i| (0..3).map(|k| rot[i][k] * p[k]).sum::<f64>() + trans[i]);
        if t[2] <= 0.2 {
            continue;
        }
        let mean = [
            cam.focal[0] * t[0] / t[2] + cam.principal_point[0],
            cam.focal[1] * t[1] / t[2] + cam.principal_point[1],
        ];
        if mean[0] < -0.5 * w || mean[0] > 1.5 * w || mean[1] < -0.5 * h || mean[1] > 1.5 * h {
            continue;
        }
        let r = quat_matrix(g.rotation().0);
        let s = g.scale();
        let rs: [[f64; 3]; 3] = std::array::from_fn(|i| std::array::from_fn(|j| r[i][j] * s[j]));
        let sigma = mat_mul(&rs, &transpose(&rs));
        let j = [
            [cam.focal[0] / t[2], 0.0, -cam.focal[0] * t[0] / (t[2] * t[2])],
            [0.0, cam.focal[1] / t[2], -cam.focal[1] * t[1] / (t[2] * t[2])],
        ];
        let world = mat_mul(&mat_mul(&rot, &sigma), &rt);
        let mut cov = [[0.0; 2]; 2];
        for a in 0..2 {
            for b in 0..2 {
                let mut acc = 0.0;
                for k in 0..3 {
                    for l in 0..3 {
                        acc += j[a][k] * world[k][l] * j[b][l];
                    }
                }
                cov[a][b] = acc;
            }
        }
        cov[0][0] += 0.3;
        cov[1][1] += 0.3;
        let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
        if det <= 0.0 {
            continue;
        }
        let inv = [[cov[1][1] / det, -cov[0][1] / det], [-cov[1][0] / det, cov[0][0] / det]];
        let d: [f64; 3] = std::array::from_fn(|i| p[i] - center[i]);
        let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        let [x, y, z] = d.map(|v| v / n);
        let sh = g.sh();
        assert!(sh.len() == 1 || sh.len() == 4, "oracle covers SH degree 0 and 1");
        let color = std::array::from_fn(|c| {
            let mut v = 0.5 + SH0 * sh[0][c];
            if sh.len() == 4 {
                v += -SH1 * y * sh[1][c] + SH1 * z * sh[2][c] - SH1 * x * sh[3][c];
            }
            v.clamp(0.0, 1.0)
        });
        splats.push(Projected {
            depth: t[2],
            index,
            mean,
            inv,
            opacity: g.opacity(),
            color,
        });
    }
    splats.sort_by(|a, b| a.depth.partial_cmp(&b.depth).unwrap().then(a.index.cmp(&b.index)));

    RgbImage::from_fn(cam.width, cam.height, |px, py| {
        let (fx, fy) = (px as f64 + 0.5, py as f64 + 0.5);
        let mut rgb = [0.0; 3];
        let mut trans = 1.0;
        for s in &splats {
            let d = [fx - s.mean[0], fy - s.mean[1]];
            let q = d[0] * (s.inv[0][0] * d[0] + s.inv[0][1] * d[1]) + d[1] * (s.inv[1][0] * d[0] + s.inv[1][1] * d[1]);
            let alpha = s.opacity * (-0.5 * q).exp();
            if alpha < 1.0 / 255.0 {
                continue;
            }
            let alpha = alpha.min(0.99);
            for c in 0..3 {
                rgb[c] += s.color[c] * alpha * trans;
            }
            trans *= 1.0 - alpha;
        }
        std::array::from_fn(|c| rgb[c] + trans * background[c])
    })
}

/// PSNR for unit-range images over all channels.
pub fn psnr(a: &RgbImage, b: &RgbImage) -> f64 {
    let mut sum = 0.0;
    for (p, q) in a.pixels().iter().zip(b.pixels()) {
        for c in 0..3 {
            sum += (p[c] - q[c]).powi(2);
        }
    }
    let mse = sum / (3 * a.width() * a.height()) as f64;
    -10.0 * mse.log10()
}

fn luma(p: [f64; 3]) -> f64 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

/// Mean SSIM on luma over every full 11×11 window (σ = 1.5), with
/// `K1 = 0.01`, `K2 = 0.03` and unit dynamic range.
pub fn ssim(a: &RgbImage, b: &RgbImage) -> f64 {
    const WIN: usize = 11;
    let (w, h) = a.dims();
    assert!(w >= WIN && h >= WIN);
    let mut kernel = [[0.0; WIN]; WIN];
    let mut total = 0.0;
    for (i, row) in kernel.iter_mut().enumerate() {
        for (j, k) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *k = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            total += *k;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let la: Vec<f64> = a.pixels().iter().map(|&p| luma(p)).collect();
    let lb: Vec<f64> = b.pixels().iter().map(|&p| luma(p)).collect();
    let mut acc = 0.0;
    let mut count = 0;
    for y0 in 0..=h - WIN {
        for x0 in 0..=w - WIN {
            let at = |v: &[f64], i: usize, j: usize| v[(y0 + i) * w + x0 + j];
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..WIN {
                for j in 0..WIN {
                    ma += kernel[i][j] / total * at(&la, i, j);
                    mb += kernel[i][j] / total * at(&lb, i, j);
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..WIN {
                for j in 0..WIN {
                    let k = kernel[i][j] / total;
                    let (da, db) = (at(&la, i, j) - ma, at(&lb, i, j) - mb);
                    va += k * da * da;
                    vb += k * db * db;
                    cov += k * da * db;
                }
            }
            acc += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    acc / count as f64
}

/// Keeps masked pixels, zeroes the rest.
pub fn mask_apply(x: &RgbImage, keep: &[bool]) -> RgbImage {
    RgbImage::from_fn(x.width(), x.height(), |px, py| {
        if keep[py * x.width() + px] {
            x.get(px, py)
        } else {
            [0.0; 3]
        }
    })
}

/// Mean over 2×2 blocks.
pub fn downsample2(x: &RgbImage) -> RgbImage {
    RgbImage::from_fn(x.width() / 2, x.height() / 2, |px, py| {
        std::array::from_fn(|c| {
            (x.get(2 * px, 2 * py)[c] + x.get(2 * px + 1, 2 * py)[c] + x.get(2 * px, 2 * py + 1)[c] + x.get(2 * px + 1, 2 * py + 1)[c])
                / 4.0
        })
    })
}

pub fn max_abs_diff(a: &RgbImage, b: &RgbImage) -> f64 {
    assert_eq!(a.dims(), b.dims());
    a.pixels()
        .iter()
        .zip(b.pixels())
        .flat_map(|(p, q)| (0..3).map(move |c| (p[c] - q[c]).abs()))
        .fold(0.0, f64::max)
}
