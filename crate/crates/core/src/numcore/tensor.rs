//! Dense row-major 2-D storage and the plain (untaped) kernels.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// A dense row-major matrix of finite `f64` values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTensor", into = "RawTensor")]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawTensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawTensor> for Tensor2 {
    type Error = Error;

    fn try_from(raw: RawTensor) -> Result<Self> {
        Tensor2::new(raw.rows, raw.cols, raw.data)
    }
}

impl From<Tensor2> for RawTensor {
    fn from(t: Tensor2) -> Self {
        RawTensor {
            rows: t.rows,
            cols: t.cols,
            data: t.data,
        }
    }
}

impl Tensor2 {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "Tensor2::new",
                left: format!("{rows}x{cols}"),
                right: format!("{} values", data.len()),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "Tensor2::new",
                index,
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds without the finiteness scan. Kernels only call this on
    /// values derived from finite inputs by finite arithmetic.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_raw(rows, cols, vec![0.0; rows * cols])
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Result<Self> {
        Self::new(rows, cols, vec![value; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::Shape {
                op: "Tensor2::from_rows",
                left: format!("row length {cols}"),
                right: format!("row length {}", bad.len()),
            });
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    /// A 1×n row vector.
    pub fn row_vector(values: &[f64]) -> Result<Self> {
        Self::new(1, values.len(), values.to_vec())
    }

    /// An n×1 column vector.
    pub fn col_vector(values: &[f64]) -> Result<Self> {
        Self::new(values.len(), 1, values.to_vec())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    /// Overwrites one entry. Rejects non-finite values.
    pub fn set(&mut self, i: usize, j: usize, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                context: "Tensor2::set",
                index: i * self.cols + j,
            });
        }
        self.data[i * self.cols + j] = value;
        Ok(())
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut out = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        Self::from_raw(self.cols, self.rows, out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_raw(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor2) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub(crate) fn scaled(&self, factor: f64) -> Self {
        self.map(|v| v * factor)
    }
}

/// `A · B`.
pub fn matmul(a: &Tensor2, b: &Tensor2) -> Result<Tensor2> {
    if a.cols != b.rows {
        return Err(shape_err("matmul", a.shape(), b.shape()));
    }
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let out_row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a.data[i * k + p];
            // one-hot inputs are mostly zero
            if av == 0.0 {
                continue;
            }
            let b_row = &b.data[p * m..(p + 1) * m];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor2::from_raw(n, m, out))
}

/// `A · Bᵀ` without materializing the transpose.
pub(crate) fn matmul_nt(a: &Tensor2, b: &Tensor2) -> Result<Tensor2> {
    if a.cols != b.cols {
        return Err(shape_err("matmul_nt", a.shape(), b.shape()));
    }
    let (n, k, m) = (a.rows, a.cols, b.rows);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let a_row = &a.data[i * k..(i + 1) * k];
        for j in 0..m {
            let b_row = &b.data[j * k..(j + 1) * k];
            out[i * m + j] = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    }
    Ok(Tensor2::from_raw(n, m, out))
}

/// `Aᵀ · B` without materializing the transpose.
pub(crate) fn matmul_tn(a: &Tensor2, b: &Tensor2) -> Result<Tensor2> {
    if a.rows != b.rows {
        return Err(shape_err("matmul_tn", a.shape(), b.shape()));
    }
    let (k, n, m) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; n * m];
    for p in 0..k {
        let b_row = &b.data[p * m..(p + 1) * m];
        for i in 0..n {
            let av = a.data[p * n + i];
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[i * m..(i + 1) * m];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor2::from_raw(n, m, out))
}

/// Stable softmax of one row. `-inf` entries are masked and map to exactly 0.
pub fn softmax_slice(row: &[f64]) -> Option<Vec<f64>> {
    let max = row
        .iter()
        .copied()
        .filter(|v| *v != f64::NEG_INFINITY)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return None;
    }
    let mut out: Vec<f64> = row
        .iter()
        .map(|&v| {
            if v == f64::NEG_INFINITY {
                0.0
            } else {
                (v - max).exp()
            }
        })
        .collect();
    let total: f64 = out.iter().sum();
    for v in &mut out {
        *v /= total;
    }
    Some(out)
}

/// Row-wise softmax. `key_mask[j] == false` adds a `-inf` sentinel to column `j`
/// of every row before normalizing.
pub fn softmax_rows(m: &Tensor2, key_mask: Option<&[bool]>) -> Result<Tensor2> {
    if let Some(mask) = key_mask {
        if mask.len() != m.cols {
            return Err(Error::Shape {
                op: "softmax_rows",
                left: format!("{}x{}", m.rows, m.cols),
                right: format!("mask of length {}", mask.len()),
            });
        }
    }
    let mut out = Vec::with_capacity(m.data.len());
    let mut logits = vec![0.0; m.cols];
    for i in 0..m.rows {
        logits.copy_from_slice(m.row(i));
        if let Some(mask) = key_mask {
            for (l, &keep) in logits.iter_mut().zip(mask) {
                if !keep {
                    *l = f64::NEG_INFINITY;
                }
            }
        }
        let probs = softmax_slice(&logits).ok_or(Error::DegenerateRow { row: i })?;
        out.extend(probs);
    }
    Ok(Tensor2::from_raw(m.rows, m.cols, out))
}

/// `gamma ⊙ (x − mean) / sqrt(var + eps) + beta` with population variance.
pub fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Result<Vec<f64>> {
    if gamma.len() != x.len() || beta.len() != x.len() {
        return Err(Error::Shape {
            op: "layer_norm",
            left: format!("x of length {}", x.len()),
            right: format!("gamma {} / beta {}", gamma.len(), beta.len()),
        });
    }
    if eps <= 0.0 || x.is_empty() {
        return Err(Error::Contract(format!(
            "layer_norm needs eps > 0 and a non-empty vector (eps = {eps}, len = {})",
            x.len()
        )));
    }
    let (xhat, _) = normalize(x, eps);
    Ok(xhat
        .iter()
        .zip(gamma)
        .zip(beta)
        .map(|((h, g), b)| g * h + b)
        .collect())
}

/// Returns the normalized vector and `1 / sqrt(var + eps)`.
pub(crate) fn normalize(x: &[f64], eps: f64) -> (Vec<f64>, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + eps).sqrt();
    (x.iter().map(|v| (v - mean) * inv_std).collect(), inv_std)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    pub(crate) fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            // relu'(0) = 0
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

pub fn activation(kind: Activation, x: &Tensor2) -> Tensor2 {
    x.map(|v| kind.apply(v))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_examples() {
        let b = Tensor2::from_rows(&[vec![5.0], vec![6.0]]).unwrap();
        assert_eq!(matmul(&Tensor2::identity(2), &b).unwrap(), b);

        let a = Tensor2::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[17.0, 39.0]);

        let z = matmul(&Tensor2::zeros(3, 2), &b).unwrap();
        assert_eq!(z.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor2::zeros(2, 3), &Tensor2::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn transposed_products_agree_with_plain_matmul() {
        let a = Tensor2::new(2, 3, vec![1.0, -2.0, 0.5, 3.0, 0.0, 4.0]).unwrap();
        let b = Tensor2::new(4, 3, (0..12).map(|v| v as f64 * 0.3 - 1.0).collect()).unwrap();
        assert_eq!(
            matmul_nt(&a, &b).unwrap(),
            matmul(&a, &b.transpose()).unwrap()
        );
        let c = Tensor2::new(2, 4, (0..8).map(|v| v as f64 - 2.5).collect()).unwrap();
        assert_eq!(
            matmul_tn(&a, &c).unwrap(),
            matmul(&a.transpose(), &c).unwrap()
        );
    }

    #[test]
    fn rejects_non_finite() {
        assert!(matches!(
            Tensor2::new(1, 2, vec![1.0, f64::NAN]),
            Err(Error::NonFinite { index: 1, .. })
        ));
        assert!(Tensor2::new(1, 1, vec![f64::INFINITY]).is_err());
        assert!(Tensor2::new(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax_slice(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        for c in [-7.0, 0.0, 3.25, 100.0] {
            let p = softmax_slice(&[c, c + 3f64.ln()]).unwrap();
            assert!((p[0] - 0.25).abs() < 1e-12 && (p[1] - 0.75).abs() < 1e-12);
        }
        assert_eq!(softmax_slice(&[0.0, f64::NEG_INFINITY]).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn fully_masked_row_is_degenerate() {
        let m = Tensor2::zeros(2, 2);
        let err = softmax_rows(&m, Some(&[false, false])).unwrap_err();
        assert!(matches!(err, Error::DegenerateRow { row: 0 }));
        assert!(softmax_slice(&[f64::NEG_INFINITY; 3]).is_none());
    }

    #[test]
    fn layer_norm_examples() {
        let ones = [1.0; 4];
        let zeros = [0.0; 4];
        let out = layer_norm(&[3.0; 4], &ones, &zeros, 1e-5).unwrap();
        assert!(out.iter().all(|v| v.abs() < 1e-12));

        let out = layer_norm(&[1.0, -1.0], &[1.0; 2], &[0.0; 2], 1e-300).unwrap();
        assert!((out[0] - 1.0).abs() < 1e-12 && (out[1] + 1.0).abs() < 1e-12);

        // mean 2.5, population var 1.25
        let out = layer_norm(&[1.0, 2.0, 3.0, 4.0], &ones, &zeros, 1e-5).unwrap();
        let denom = (1.25f64 + 1e-5).sqrt();
        let expected = [-1.5 / denom, -0.5 / denom, 0.5 / denom, 1.5 / denom];
        for (o, e) in out.iter().zip(expected) {
            assert!((o - e).abs() < 1e-14);
        }
    }

    #[test]
    fn layer_norm_length_mismatch() {
        assert!(matches!(
            layer_norm(&[1.0, 2.0], &[1.0], &[0.0, 0.0], 1e-5),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn activation_examples() {
        assert_eq!(Activation::Relu.apply(-2.0), 0.0);
        assert_eq!(Activation::Sigmoid.apply(0.0), 0.5);
        assert_eq!(Activation::Tanh.apply(0.0), 0.0);
        assert_eq!(Activation::Relu.derivative(0.0, 0.0), 0.0);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }
}
