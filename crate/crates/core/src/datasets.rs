//! Data sources: three structured 2-D distributions, IDX image archives,
//! a synthetic digit renderer for desk-scale image experiments, block-average
//! downsampling, and seed-deterministic train/test splits.
//!
//! All sampling is counter-based — sample `i` draws from stream
//! `(seed, DATA, i)` — so generation is bit-identical regardless of
//! parallelism.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{OlmError, Result};
use crate::ndgrad::Tensor;
use crate::rng::{self, tag};

/// Covariance of the correlated 2-D Gaussian: variances 1, correlation 0.8.
pub const GAUSSIAN2D_COV: [[f64; 2]; 2] = [[1.0, 0.8], [0.8, 1.0]];

/// Standard deviations of the two axis-aligned sparse components. Unequal so
/// the leading principal component is the horizontal axis.
pub const KSPARSE_STD: [f64; 2] = [1.0, 0.8];

/// Curved-manifold parameters: ellipse semi-axes, rotation, and the standard
/// deviation of Gaussian jitter applied along the curve normal.
pub const MANIFOLD_SEMI_AXES: [f64; 2] = [1.0, 0.5];
pub const MANIFOLD_ROTATION: f64 = std::f64::consts::PI / 6.0;
pub const MANIFOLD_JITTER_STD: f64 = 0.05;

#[derive(Clone, Debug)]
pub struct PointCloud2D {
    /// `n x 2` sample matrix.
    pub points: Tensor,
    pub seed: u64,
}

impl PointCloud2D {
    pub fn len(&self) -> usize {
        self.points.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug)]
pub struct ImageDataset {
    /// `n x (height*width)` row-major flattened images, values in `[0, 1]`.
    pub images: Tensor,
    pub height: usize,
    pub width: usize,
}

impl ImageDataset {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SplitSpec {
    pub n_test: usize,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { n_test: 512, seed: 0 }
    }
}

/// Zero-mean correlated Gaussian samples with covariance [`GAUSSIAN2D_COV`].
pub fn sample_gaussian2d(n: usize, seed: u64) -> PointCloud2D {
    assert!(n >= 1);
    // Exact Cholesky factor of [[1, .8], [.8, 1]].
    let (l10, l11) = (0.8, 0.6);
    let mut data = Vec::with_capacity(2 * n);
    for i in 0..n {
        let mut rng = rng::stream(seed, tag::DATA, i as u64);
        let z0 = rng::normal(&mut rng);
        let z1 = rng::normal(&mut rng);
        data.push(z0);
        data.push(l10 * z0 + l11 * z1);
    }
    PointCloud2D { points: Tensor::from_raw(vec![n, 2], data), seed }
}

/// Axis-sparse samples: each point lies exactly on one coordinate axis, the
/// horizontal one with probability one half.
pub fn sample_ksparse2d(n: usize, seed: u64) -> PointCloud2D {
    assert!(n >= 1);
    let mut data = Vec::with_capacity(2 * n);
    for i in 0..n {
        let mut rng = rng::stream(seed, tag::DATA, i as u64);
        let horizontal = rng::uniform(&mut rng) < 0.5;
        let s = rng::normal(&mut rng);
        if horizontal {
            data.push(s * KSPARSE_STD[0]);
            data.push(0.0);
        } else {
            data.push(0.0);
            data.push(s * KSPARSE_STD[1]);
        }
    }
    PointCloud2D { points: Tensor::from_raw(vec![n, 2], data), seed }
}

/// Point on the rotated ellipse at parameter angle `phi`, plus the outward
/// unit normal there.
fn ellipse_point_and_normal(phi: f64) -> ([f64; 2], [f64; 2]) {
    let (a, b) = (MANIFOLD_SEMI_AXES[0], MANIFOLD_SEMI_AXES[1]);
    let (sp, cp) = phi.sin_cos();
    let p = [a * cp, b * sp];
    // Gradient of the implicit form (x/a)^2 + (y/b)^2, normalized.
    let g = [p[0] / (a * a), p[1] / (b * b)];
    let norm = (g[0] * g[0] + g[1] * g[1]).sqrt();
    let n = [g[0] / norm, g[1] / norm];
    let (sr, cr) = MANIFOLD_ROTATION.sin_cos();
    let rot = |v: [f64; 2]| [cr * v[0] - sr * v[1], sr * v[0] + cr * v[1]];
    (rot(p), rot(n))
}

/// Samples concentrated on a rotated ellipse: uniform parameter angle with
/// Gaussian displacement along the curve normal.
pub fn sample_manifold2d(n: usize, seed: u64) -> PointCloud2D {
    assert!(n >= 1);
    let mut data = Vec::with_capacity(2 * n);
    for i in 0..n {
        let mut rng = rng::stream(seed, tag::DATA, i as u64);
        let phi = rng::uniform(&mut rng) * std::f64::consts::TAU;
        let jitter = rng::normal(&mut rng) * MANIFOLD_JITTER_STD;
        let (p, nrm) = ellipse_point_and_normal(phi);
        data.push(p[0] + jitter * nrm[0]);
        data.push(p[1] + jitter * nrm[1]);
    }
    PointCloud2D { points: Tensor::from_raw(vec![n, 2], data), seed }
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_be_bytes(b))
}

/// Parses an IDX image container: big-endian magic `0x00000803`, then count,
/// rows, cols, then one unsigned byte per pixel, scaled by 1/255.
pub fn parse_idx_images(r: &mut impl Read) -> Result<ImageDataset> {
    let magic = read_u32_be(r)?;
    if magic != IDX_IMAGES_MAGIC {
        if magic & 0xffff_ff00 == 0x0000_0800 {
            return Err(OlmError::Format(format!(
                "IDX rank {} where images (rank 3) expected",
                magic & 0xff
            )));
        }
        return Err(OlmError::Format(format!("bad IDX magic 0x{:08x}", magic)));
    }
    let n = read_u32_be(r)? as usize;
    let rows = read_u32_be(r)? as usize;
    let cols = read_u32_be(r)? as usize;
    let mut bytes = vec![0u8; n * rows * cols];
    r.read_exact(&mut bytes).map_err(|_| {
        OlmError::Format(format!(
            "truncated IDX payload: expected {} bytes",
            n * rows * cols
        ))
    })?;
    let images = bytes.iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok(ImageDataset {
        images: Tensor::from_raw(vec![n, rows * cols], images),
        height: rows,
        width: cols,
    })
}

pub fn load_idx_images(path: impl AsRef<Path>) -> Result<ImageDataset> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    parse_idx_images(&mut f)
}

/// Parses an IDX label container (magic `0x00000801`). Labels are carried
/// through but unused by the reconstruction pipeline.
pub fn parse_idx_labels(r: &mut impl Read) -> Result<Vec<u8>> {
    let magic = read_u32_be(r)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(OlmError::Format(format!("bad IDX label magic 0x{:08x}", magic)));
    }
    let n = read_u32_be(r)? as usize;
    let mut bytes = vec![0u8; n];
    r.read_exact(&mut bytes)
        .map_err(|_| OlmError::Format("truncated IDX label payload".into()))?;
    Ok(bytes)
}

pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    parse_idx_labels(&mut f)
}

/// Writes images as an IDX container, quantizing `[0,1]` to bytes.
pub fn write_idx_images(ds: &ImageDataset, w: &mut impl Write) -> Result<()> {
    w.write_all(&IDX_IMAGES_MAGIC.to_be_bytes())?;
    w.write_all(&(ds.len() as u32).to_be_bytes())?;
    w.write_all(&(ds.height as u32).to_be_bytes())?;
    w.write_all(&(ds.width as u32).to_be_bytes())?;
    let bytes: Vec<u8> = ds
        .images
        .data()
        .iter()
        .map(|&x| (x.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    w.write_all(&bytes)?;
    Ok(())
}

pub fn save_idx_images(ds: &ImageDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_idx_images(ds, &mut f)
}

pub fn write_idx_labels(labels: &[u8], w: &mut impl Write) -> Result<()> {
    w.write_all(&IDX_LABELS_MAGIC.to_be_bytes())?;
    w.write_all(&(labels.len() as u32).to_be_bytes())?;
    w.write_all(labels)?;
    Ok(())
}

/// Block-average downsampling to `target_h x target_w`. The target must
/// divide the source dimensions (or equal them, a no-op).
pub fn preprocess(ds: &ImageDataset, target_h: usize, target_w: usize) -> Result<ImageDataset> {
    if target_h == ds.height && target_w == ds.width {
        return Ok(ds.clone());
    }
    if target_h == 0 || target_w == 0 || ds.height % target_h != 0 || ds.width % target_w != 0 {
        return Err(OlmError::Invalid(format!(
            "target {}x{} does not divide source {}x{}",
            target_h, target_w, ds.height, ds.width
        )));
    }
    let (bh, bw) = (ds.height / target_h, ds.width / target_w);
    let scale = 1.0 / (bh * bw) as f64;
    let mut out = Vec::with_capacity(ds.len() * target_h * target_w);
    for img in 0..ds.len() {
        let src = ds.images.row(img);
        for i in 0..target_h {
            for j in 0..target_w {
                let mut acc = 0.0;
                for bi in 0..bh {
                    for bj in 0..bw {
                        acc += src[(i * bh + bi) * ds.width + (j * bw + bj)];
                    }
                }
                out.push(acc * scale);
            }
        }
    }
    Ok(ImageDataset {
        images: Tensor::from_raw(vec![ds.len(), target_h * target_w], out),
        height: target_h,
        width: target_w,
    })
}

/// Disjoint, seed-deterministic train/test partition whose union is the
/// input. Test indices are a Fisher–Yates prefix of a seeded permutation.
pub fn split(ds: &ImageDataset, spec: &SplitSpec) -> Result<(ImageDataset, ImageDataset)> {
    let n = ds.len();
    if spec.n_test >= n {
        return Err(OlmError::Invalid(format!(
            "n_test {} must be smaller than dataset size {}",
            spec.n_test, n
        )));
    }
    let perm = seeded_permutation(n, spec.seed);
    let mut test_mask = vec![false; n];
    for &i in &perm[..spec.n_test] {
        test_mask[i] = true;
    }
    let d = ds.dim();
    let mut train = Vec::with_capacity((n - spec.n_test) * d);
    let mut test = Vec::with_capacity(spec.n_test * d);
    for i in 0..n {
        let row = ds.images.row(i);
        if test_mask[i] {
            test.extend_from_slice(row);
        } else {
            train.extend_from_slice(row);
        }
    }
    let mk = |rows: Vec<f64>| ImageDataset {
        images: Tensor::from_raw(vec![rows.len() / d, d], rows),
        height: ds.height,
        width: ds.width,
    };
    Ok((mk(train), mk(test)))
}

pub(crate) fn seeded_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = rng::stream(seed, tag::SPLIT, 0);
    for i in (1..n).rev() {
        let j = (rng::uniform(&mut rng) * (i + 1) as f64) as usize;
        perm.swap(i, j.min(i));
    }
    perm
}

// ---- synthetic digits ----
//
// Stroke-based digit glyphs rasterized at 32x32 with random affine jitter.
// Low-dimensional but visibly digit-like; background-dominated so that
// measurement marginals carry the strong asymmetries natural images show.

const DIGIT_CANVAS: usize = 32;

type Stroke = Vec<(f64, f64)>;

fn circle(cx: f64, cy: f64, rx: f64, ry: f64, n: usize) -> Stroke {
    (0..=n)
        .map(|i| {
            let t = std::f64::consts::TAU * i as f64 / n as f64;
            (cx + rx * t.cos(), cy + ry * t.sin())
        })
        .collect()
}

fn digit_strokes(d: u8) -> Vec<Stroke> {
    match d {
        0 => vec![circle(0.5, 0.5, 0.24, 0.36, 18)],
        1 => vec![vec![(0.36, 0.28), (0.52, 0.12), (0.52, 0.88)]],
        2 => vec![vec![
            (0.28, 0.28),
            (0.38, 0.13),
            (0.62, 0.13),
            (0.72, 0.3),
            (0.6, 0.5),
            (0.3, 0.72),
            (0.27, 0.87),
            (0.74, 0.87),
        ]],
        3 => vec![vec![
            (0.3, 0.16),
            (0.6, 0.12),
            (0.71, 0.28),
            (0.52, 0.46),
            (0.71, 0.64),
            (0.6, 0.86),
            (0.29, 0.83),
        ]],
        4 => vec![
            vec![(0.62, 0.88), (0.62, 0.12), (0.26, 0.62), (0.8, 0.62)],
        ],
        5 => vec![vec![
            (0.7, 0.13),
            (0.32, 0.13),
            (0.29, 0.45),
            (0.58, 0.4),
            (0.72, 0.6),
            (0.6, 0.85),
            (0.28, 0.82),
        ]],
        6 => vec![vec![
            (0.64, 0.12),
            (0.4, 0.34),
            (0.29, 0.6),
            (0.38, 0.84),
            (0.62, 0.84),
            (0.7, 0.62),
            (0.52, 0.5),
            (0.31, 0.58),
        ]],
        7 => vec![vec![(0.26, 0.13), (0.74, 0.13), (0.46, 0.88)]],
        8 => vec![
            circle(0.5, 0.3, 0.17, 0.17, 14),
            circle(0.5, 0.66, 0.21, 0.21, 14),
        ],
        9 => vec![
            circle(0.52, 0.33, 0.19, 0.2, 14),
            vec![(0.7, 0.38), (0.62, 0.88)],
        ],
        _ => unreachable!("digit out of range"),
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let (wx, wy) = (p.0 - a.0, p.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 {
        ((wx * vx + wy * vy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (dx, dy) = (wx - t * vx, wy - t * vy);
    (dx * dx + dy * dy).sqrt()
}

/// Renders `n` jittered digit images on a 32x32 canvas, cycling through the
/// ten digit classes. Returns the dataset and the per-image class labels.
pub fn synthetic_digits(n: usize, seed: u64) -> (ImageDataset, Vec<u8>) {
    assert!(n >= 1);
    let c = DIGIT_CANVAS;
    let mut data = Vec::with_capacity(n * c * c);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = rng::stream(seed, tag::DATA, i as u64);
        let digit = (i % 10) as u8;
        labels.push(digit);
        // Affine jitter: rotation, anisotropic scale, translation.
        let rot = (rng::uniform(&mut rng) - 0.5) * 0.3;
        let sx = 0.85 + rng::uniform(&mut rng) * 0.25;
        let sy = 0.85 + rng::uniform(&mut rng) * 0.25;
        let tx = (rng::uniform(&mut rng) - 0.5) * 0.16;
        let ty = (rng::uniform(&mut rng) - 0.5) * 0.16;
        let width = 0.035 + rng::uniform(&mut rng) * 0.02;
        let peak = 0.85 + rng::uniform(&mut rng) * 0.15;
        let (sr, cr) = rot.sin_cos();
        let map = |(x, y): (f64, f64)| {
            let (ux, uy) = (x - 0.5, y - 0.5);
            let (ax, ay) = (ux * sx, uy * sy);
            (
                0.5 + cr * ax - sr * ay + tx,
                0.5 + sr * ax + cr * ay + ty,
            )
        };
        let strokes: Vec<Stroke> = digit_strokes(digit)
            .into_iter()
            .map(|s| s.into_iter().map(map).collect())
            .collect();
        for py in 0..c {
            for px in 0..c {
                let p = ((px as f64 + 0.5) / c as f64, (py as f64 + 0.5) / c as f64);
                let mut d = f64::MAX;
                for s in &strokes {
                    for w in s.windows(2) {
                        d = d.min(segment_distance(p, w[0], w[1]));
                    }
                }
                let v = peak * (-0.5 * (d / width).powi(2)).exp();
                data.push(if v < 1e-4 { 0.0 } else { v.min(1.0) });
            }
        }
    }
    (
        ImageDataset {
            images: Tensor::from_raw(vec![n, c * c], data),
            height: c,
            width: c,
        },
        labels,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn covariance2(points: &Tensor) -> [[f64; 2]; 2] {
        let n = points.shape()[0] as f64;
        let (mut mx, mut my) = (0.0, 0.0);
        for i in 0..points.shape()[0] {
            mx += points.row(i)[0];
            my += points.row(i)[1];
        }
        mx /= n;
        my /= n;
        let mut c = [[0.0; 2]; 2];
        for i in 0..points.shape()[0] {
            let (x, y) = (points.row(i)[0] - mx, points.row(i)[1] - my);
            c[0][0] += x * x;
            c[0][1] += x * y;
            c[1][1] += y * y;
        }
        c[0][0] /= n;
        c[0][1] /= n;
        c[1][0] = c[0][1];
        c[1][1] /= n;
        c
    }

    #[test]
    fn gaussian2d_covariance_matches_target() {
        let cloud = sample_gaussian2d(100_000, 11);
        let c = covariance2(&cloud.points);
        for i in 0..2 {
            for j in 0..2 {
                assert!(
                    (c[i][j] - GAUSSIAN2D_COV[i][j]).abs() < 0.02,
                    "cov[{}][{}] = {}",
                    i,
                    j,
                    c[i][j]
                );
            }
        }
    }

    #[test]
    fn gaussian2d_is_seed_deterministic() {
        let a = sample_gaussian2d(64, 5);
        let b = sample_gaussian2d(64, 5);
        assert_eq!(a.points, b.points);
        let single = sample_gaussian2d(1, 5);
        assert!(single.points.all_finite());
    }

    #[test]
    fn ksparse_points_sit_exactly_on_axes() {
        let cloud = sample_ksparse2d(10_000, 3);
        for i in 0..cloud.len() {
            let r = cloud.points.row(i);
            assert!(r[0] * r[1] == 0.0, "point ({}, {}) off both axes", r[0], r[1]);
        }
    }

    #[test]
    fn ksparse_first_pc_is_horizontal() {
        let cloud = sample_ksparse2d(100_000, 4);
        let c = covariance2(&cloud.points);
        assert!(c[0][0] > c[1][1]);
        let frac_horizontal = (0..cloud.len())
            .filter(|&i| cloud.points.row(i)[1] == 0.0)
            .count() as f64
            / cloud.len() as f64;
        assert!((0.49..=0.51).contains(&frac_horizontal), "{}", frac_horizontal);
        // Principal axis angle from the sample covariance.
        let (vals, vecs) = crate::linalg::sym_eig_desc(&Tensor::from_rows(&[
            vec![c[0][0], c[0][1]],
            vec![c[1][0], c[1][1]],
        ]));
        assert!(vals[0] > vals[1]);
        let angle = vecs.data()[2].atan2(vecs.data()[0]).abs();
        let angle = angle.min(std::f64::consts::PI - angle);
        assert!(angle < 2.0_f64.to_radians(), "first PC at {} rad", angle);
    }

    /// Distance from a point to the rotated ellipse, via dense parameter
    /// search plus local refinement. Test-only oracle.
    fn distance_to_ellipse(p: [f64; 2]) -> f64 {
        let d_at = |phi: f64| {
            let (e, _) = ellipse_point_and_normal(phi);
            ((p[0] - e[0]).powi(2) + (p[1] - e[1]).powi(2)).sqrt()
        };
        let mut best = (0.0, f64::MAX);
        for i in 0..2000 {
            let phi = std::f64::consts::TAU * i as f64 / 2000.0;
            let d = d_at(phi);
            if d < best.1 {
                best = (phi, d);
            }
        }
        let mut lo = best.0 - 0.01;
        let mut hi = best.0 + 0.01;
        for _ in 0..60 {
            let m1 = lo + (hi - lo) / 3.0;
            let m2 = hi - (hi - lo) / 3.0;
            if d_at(m1) < d_at(m2) {
                hi = m2;
            } else {
                lo = m1;
            }
        }
        d_at(0.5 * (lo + hi))
    }

    #[test]
    fn manifold_mean_distance_matches_half_normal() {
        let n = 20_000;
        let cloud = sample_manifold2d(n, 9);
        let mean_dist: f64 = (0..n)
            .map(|i| {
                let r = cloud.points.row(i);
                distance_to_ellipse([r[0], r[1]])
            })
            .sum::<f64>()
            / n as f64;
        let expected = MANIFOLD_JITTER_STD * (2.0 / std::f64::consts::PI).sqrt();
        assert!(
            (mean_dist - expected).abs() / expected < 0.05,
            "mean {} vs expected {}",
            mean_dist,
            expected
        );
    }

    #[test]
    fn manifold_first_pc_near_major_axis() {
        let cloud = sample_manifold2d(100_000, 10);
        let c = covariance2(&cloud.points);
        let (_, vecs) = crate::linalg::sym_eig_desc(&Tensor::from_rows(&[
            vec![c[0][0], c[0][1]],
            vec![c[1][0], c[1][1]],
        ]));
        let angle = vecs.data()[2].atan2(vecs.data()[0]);
        let angle = if angle < 0.0 { angle + std::f64::consts::PI } else { angle };
        let diff = (angle - MANIFOLD_ROTATION).abs();
        let diff = diff.min(std::f64::consts::PI - diff);
        assert!(diff < 3.0_f64.to_radians(), "first PC off by {} rad", diff);
    }

    #[test]
    fn idx_round_trip_and_scaling() {
        let (ds, labels) = synthetic_digits(4, 77);
        let mut buf = Vec::new();
        write_idx_images(&ds, &mut buf).unwrap();
        let back = parse_idx_images(&mut buf.as_slice()).unwrap();
        assert_eq!(back.len(), 4);
        assert_eq!(back.height, 32);
        // Quantization error no more than half a level.
        for (a, b) in ds.images.data().iter().zip(back.images.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        let mut lbuf = Vec::new();
        write_idx_labels(&labels, &mut lbuf).unwrap();
        assert_eq!(parse_idx_labels(&mut lbuf.as_slice()).unwrap(), labels);
    }

    #[test]
    fn idx_fixed_header_example() {
        // 2 images of 28x28: magic, dims, then 1568 payload bytes.
        let mut buf = Vec::new();
        buf.extend_from_slice(&0x0000_0803u32.to_be_bytes());
        buf.extend_from_slice(&2u32.to_be_bytes());
        buf.extend_from_slice(&28u32.to_be_bytes());
        buf.extend_from_slice(&28u32.to_be_bytes());
        buf.extend(std::iter::repeat(0u8).take(784));
        buf.extend(std::iter::repeat(255u8).take(784));
        let ds = parse_idx_images(&mut buf.as_slice()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.dim(), 784);
        assert!(ds.images.row(0).iter().all(|&x| x == 0.0));
        assert!(ds.images.row(1).iter().all(|&x| x == 1.0));
    }

    #[test]
    fn idx_error_cases() {
        let mut buf = Vec::new();
        buf.extend_from_slice(&0x0000_0801u32.to_be_bytes());
        assert!(matches!(
            parse_idx_images(&mut buf.as_slice()),
            Err(OlmError::Format(msg)) if msg.contains("rank 1")
        ));
        let mut buf = Vec::new();
        buf.extend_from_slice(&0xdead_beefu32.to_be_bytes());
        assert!(parse_idx_images(&mut buf.as_slice()).is_err());
        let mut buf = Vec::new();
        buf.extend_from_slice(&0x0000_0803u32.to_be_bytes());
        buf.extend_from_slice(&1u32.to_be_bytes());
        buf.extend_from_slice(&2u32.to_be_bytes());
        buf.extend_from_slice(&2u32.to_be_bytes());
        buf.push(0);
        assert!(matches!(
            parse_idx_images(&mut buf.as_slice()),
            Err(OlmError::Format(msg)) if msg.contains("truncated")
        ));
    }

    #[test]
    fn preprocess_block_average() {
        let ds = ImageDataset {
            images: Tensor::from_raw(vec![1, 4], vec![0.0, 1.0, 0.0, 1.0]),
            height: 2,
            width: 2,
        };
        let out = preprocess(&ds, 1, 1).unwrap();
        assert_eq!(out.images.data(), &[0.5]);

        let constant = ImageDataset {
            images: Tensor::filled(&[3, 784], 0.5),
            height: 28,
            width: 28,
        };
        let down = preprocess(&constant, 14, 14).unwrap();
        assert!(down.images.data().iter().all(|&x| (x - 0.5).abs() < 1e-15));

        let same = preprocess(&constant, 28, 28).unwrap();
        assert_eq!(same.images, constant.images);

        assert!(preprocess(&constant, 16, 16).is_err());
    }

    #[test]
    fn split_is_disjoint_partition() {
        let (ds, _) = synthetic_digits(50, 1);
        let spec = SplitSpec { n_test: 20, seed: 2 };
        let (train, test) = split(&ds, &spec).unwrap();
        assert_eq!(train.len(), 30);
        assert_eq!(test.len(), 20);
        let (train2, test2) = split(&ds, &spec).unwrap();
        assert_eq!(train.images, train2.images);
        assert_eq!(test.images, test2.images);
        // Union of rows equals the input rows, as multisets of byte patterns.
        let key = |t: &Tensor, i: usize| {
            t.row(i).iter().flat_map(|x| x.to_le_bytes()).collect::<Vec<u8>>()
        };
        let mut all: Vec<Vec<u8>> = (0..ds.len()).map(|i| key(&ds.images, i)).collect();
        let mut parts: Vec<Vec<u8>> = (0..train.len())
            .map(|i| key(&train.images, i))
            .chain((0..test.len()).map(|i| key(&test.images, i)))
            .collect();
        all.sort();
        parts.sort();
        assert_eq!(all, parts);
    }

    #[test]
    fn split_boundary_train_of_one() {
        let (ds, _) = synthetic_digits(5, 1);
        let (train, test) = split(&ds, &SplitSpec { n_test: 4, seed: 0 }).unwrap();
        assert_eq!(train.len(), 1);
        assert_eq!(test.len(), 4);
        assert!(split(&ds, &SplitSpec { n_test: 5, seed: 0 }).is_err());
    }

    #[test]
    fn digits_are_in_range_and_background_dominated() {
        let (ds, labels) = synthetic_digits(20, 3);
        assert!(ds.images.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        assert_eq!(labels[3], 3);
        let dark_frac = ds.images.data().iter().filter(|&&x| x < 0.1).count() as f64
            / ds.images.len() as f64;
        assert!(dark_frac > 0.5, "background fraction {}", dark_frac);
    }
}
