//! Dense row-major `f64` tensors and the flat binary container used for
//! checkpoints and measurement matrices.
//!
//! Container layout: magic `OLMT`, `u32` rank, one `u64` per dimension, then
//! the data as `f64`, row-major. All integers and floats little-endian.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{OlmError, Result};

pub const OLMT_MAGIC: [u8; 4] = *b"OLMT";

/// Dense multi-dimensional array of 64-bit reals. Scalars have shape `[]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, rejecting shape/length disagreement and non-finite
    /// entries. This is the validating boundary; internal kernels use the
    /// unchecked constructor.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(OlmError::ShapeMismatch(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        if !data.iter().all(|x| x.is_finite()) {
            return Err(OlmError::NonFinite("tensor construction".into()));
        }
        Ok(Self { shape, data })
    }

    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::from_raw(shape.to_vec(), vec![0.0; n])
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_raw(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_raw(vec![], vec![value])
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self::from_raw(vec![data.len()], data)
    }

    /// Rank-2 tensor from rows. Panics if the rows are ragged.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            data.extend_from_slice(r);
        }
        Self::from_raw(vec![rows.len(), cols], data)
    }

    /// `n x n` identity.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a scalar tensor. Panics on non-scalars.
    pub fn item(&self) -> f64 {
        assert!(
            self.data.len() == 1,
            "item() on tensor of shape {:?}",
            self.shape
        );
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Rows `a..b` of a rank-2 tensor as a new tensor.
    pub fn rows(&self, a: usize, b: usize) -> Tensor {
        assert_eq!(self.rank(), 2);
        let cols = self.shape[1];
        Tensor::from_raw(vec![b - a, cols], self.data[a * cols..b * cols].to_vec())
    }

    /// Row `i` of a rank-2 tensor as a slice.
    pub fn row(&self, i: usize) -> &[f64] {
        assert_eq!(self.rank(), 2);
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(OlmError::ShapeMismatch(format!(
                "cannot reshape {:?} to {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_raw(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn write_olmt(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&OLMT_MAGIC)?;
        w.write_all(&(self.rank() as u32).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in &self.data {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_olmt(r: &mut impl Read) -> Result<Tensor> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != OLMT_MAGIC {
            return Err(OlmError::Format(format!("bad magic {:02x?}", magic)));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let rank = u32::from_le_bytes(b4) as usize;
        if rank > 8 {
            return Err(OlmError::Format(format!("implausible rank {}", rank)));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut b8 = [0u8; 8];
        for _ in 0..rank {
            r.read_exact(&mut b8)?;
            shape.push(u64::from_le_bytes(b8) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut b8)?;
            data.push(f64::from_le_bytes(b8));
        }
        Tensor::new(shape, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_olmt(&mut f)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_olmt(&mut f)
    }
}

// ---- numeric kernels ----
//
// These back both the recorded-graph ops and the eager execution path, so
// forward values are bit-identical between the two.

/// `[m,k] @ [k,n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.rank(), 2, "matmul lhs rank");
    assert_eq!(b.rank(), 2, "matmul rhs rank");
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    assert_eq!(k, k2, "matmul inner dims {} vs {}", k, k2);
    let mut out = vec![0.0; m * n];
    if m * k * n > 0 {
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.data.as_ptr(),
                k as isize,
                1,
                b.data.as_ptr(),
                n as isize,
                1,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    Tensor::from_raw(vec![m, n], out)
}

pub fn transpose(a: &Tensor) -> Tensor {
    assert_eq!(a.rank(), 2, "transpose rank");
    let (m, n) = (a.shape[0], a.shape[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Tensor::from_raw(vec![n, m], out)
}

/// Broadcast compatibility: equal shapes, or `b` equals `a` minus its leading
/// dimension (`b` is then repeated across that batch dimension).
pub(crate) fn broadcast_kind(a: &[usize], b: &[usize]) -> Option<bool> {
    if a == b {
        Some(false)
    } else if !a.is_empty() && a[1..] == *b {
        Some(true)
    } else {
        None
    }
}

pub(crate) fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let bcast = broadcast_kind(&a.shape, &b.shape)
        .unwrap_or_else(|| panic!("incompatible shapes {:?} vs {:?}", a.shape, b.shape));
    let mut out = Vec::with_capacity(a.len());
    if bcast {
        let stride = b.len();
        for (i, &x) in a.data.iter().enumerate() {
            out.push(f(x, b.data[i % stride]));
        }
    } else {
        for (&x, &y) in a.data.iter().zip(&b.data) {
            out.push(f(x, y));
        }
    }
    Tensor::from_raw(a.shape.clone(), out)
}

/// Sums `g` (shaped like `a` in a broadcast op) back down to `b`'s shape.
pub(crate) fn reduce_to(g: &Tensor, b_shape: &[usize]) -> Tensor {
    if g.shape == b_shape {
        return g.clone();
    }
    let stride: usize = b_shape.iter().product();
    let mut out = vec![0.0; stride];
    for (i, &x) in g.data.iter().enumerate() {
        out[i % stride] += x;
    }
    Tensor::from_raw(b_shape.to_vec(), out)
}

pub fn row_sum(a: &Tensor) -> Tensor {
    assert_eq!(a.rank(), 2, "row_sum rank");
    let (m, n) = (a.shape[0], a.shape[1]);
    let mut out = vec![0.0; m];
    for i in 0..m {
        out[i] = a.data[i * n..(i + 1) * n].iter().sum();
    }
    Tensor::from_raw(vec![m], out)
}

pub fn row_scale(a: &Tensor, s: &Tensor) -> Tensor {
    assert_eq!(a.rank(), 2, "row_scale rank");
    assert_eq!(s.shape(), [a.shape[0]], "row_scale scale shape");
    let n = a.shape[1];
    let mut out = Vec::with_capacity(a.len());
    for i in 0..a.shape[0] {
        let c = s.data[i];
        out.extend(a.data[i * n..(i + 1) * n].iter().map(|&x| x * c));
    }
    Tensor::from_raw(a.shape.clone(), out)
}

pub fn concat(a: &Tensor, b: &Tensor, axis: usize) -> Tensor {
    match (a.rank(), axis) {
        (1, 0) => {
            assert_eq!(b.rank(), 1);
            let mut data = a.data.clone();
            data.extend_from_slice(&b.data);
            Tensor::from_raw(vec![a.len() + b.len()], data)
        }
        (2, 0) => {
            assert_eq!(b.rank(), 2);
            assert_eq!(a.shape[1], b.shape[1]);
            let mut data = a.data.clone();
            data.extend_from_slice(&b.data);
            Tensor::from_raw(vec![a.shape[0] + b.shape[0], a.shape[1]], data)
        }
        (2, 1) => {
            assert_eq!(b.rank(), 2);
            assert_eq!(a.shape[0], b.shape[0]);
            let (na, nb) = (a.shape[1], b.shape[1]);
            let mut data = Vec::with_capacity(a.len() + b.len());
            for i in 0..a.shape[0] {
                data.extend_from_slice(&a.data[i * na..(i + 1) * na]);
                data.extend_from_slice(&b.data[i * nb..(i + 1) * nb]);
            }
            Tensor::from_raw(vec![a.shape[0], na + nb], data)
        }
        _ => panic!("concat: unsupported rank {} axis {}", a.rank(), axis),
    }
}

/// `[start, end)` along `axis` of a rank-1 or rank-2 tensor.
pub fn slice(a: &Tensor, axis: usize, start: usize, end: usize) -> Tensor {
    assert!(start <= end, "slice bounds");
    match (a.rank(), axis) {
        (1, 0) => Tensor::from_raw(vec![end - start], a.data[start..end].to_vec()),
        (2, 0) => a.rows(start, end),
        (2, 1) => {
            assert!(end <= a.shape[1]);
            let n = a.shape[1];
            let mut data = Vec::with_capacity((end - start) * a.shape[0]);
            for i in 0..a.shape[0] {
                data.extend_from_slice(&a.data[i * n + start..i * n + end]);
            }
            Tensor::from_raw(vec![a.shape[0], end - start], data)
        }
        _ => panic!("slice: unsupported rank {} axis {}", a.rank(), axis),
    }
}

/// Scatters `g` into a zero tensor of shape `shape` at the slice position;
/// adjoint of `slice`.
pub(crate) fn unslice(g: &Tensor, shape: &[usize], axis: usize, start: usize) -> Tensor {
    let mut out = Tensor::zeros(shape);
    match (shape.len(), axis) {
        (1, 0) => {
            out.data[start..start + g.len()].copy_from_slice(&g.data);
        }
        (2, 0) => {
            let n = shape[1];
            out.data[start * n..start * n + g.len()].copy_from_slice(&g.data);
        }
        (2, 1) => {
            let n = shape[1];
            let w = g.shape[1];
            for i in 0..shape[0] {
                out.data[i * n + start..i * n + start + w]
                    .copy_from_slice(&g.data[i * w..(i + 1) * w]);
            }
        }
        _ => panic!("unslice: unsupported"),
    }
    out
}

pub(crate) fn add_into(dst: &mut Tensor, src: &Tensor) {
    debug_assert_eq!(dst.shape, src.shape);
    for (d, s) in dst.data.iter_mut().zip(&src.data) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_bad_shape_and_nonfinite() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::new(vec![2], vec![1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn matmul_identity() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0], vec![7.0, 8.0, 9.0]]);
        let got = matmul(&Tensor::eye(3), &a);
        assert_eq!(got, a);
    }

    #[test]
    fn transpose_round_trip() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        assert_eq!(transpose(&transpose(&a)), a);
        assert_eq!(transpose(&a).shape(), [3, 2]);
    }

    #[test]
    fn concat_slice_inverse() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = Tensor::from_rows(&[vec![5.0], vec![6.0]]);
        let c = concat(&a, &b, 1);
        assert_eq!(c.shape(), [2, 3]);
        assert_eq!(slice(&c, 1, 0, 2), a);
        assert_eq!(slice(&c, 1, 2, 3), b);
    }

    proptest! {
        #[test]
        fn olmt_round_trip(data in proptest::collection::vec(-1e6f64..1e6, 1..64), cols in 1usize..8) {
            let n = data.len() - data.len() % cols;
            if n == 0 { return Ok(()); }
            let t = Tensor::new(vec![n / cols, cols], data[..n].to_vec()).unwrap();
            let mut buf = Vec::new();
            t.write_olmt(&mut buf).unwrap();
            let back = Tensor::read_olmt(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(t, back);
        }
    }

    #[test]
    fn olmt_rejects_bad_magic() {
        let mut buf = Vec::new();
        Tensor::scalar(1.0).write_olmt(&mut buf).unwrap();
        buf[0] = b'X';
        assert!(Tensor::read_olmt(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn olmt_rejects_truncation() {
        let mut buf = Vec::new();
        Tensor::vector(vec![1.0, 2.0, 3.0]).write_olmt(&mut buf).unwrap();
        buf.truncate(buf.len() - 4);
        assert!(Tensor::read_olmt(&mut buf.as_slice()).is_err());
    }
}
