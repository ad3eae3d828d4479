//! Row-major dense f64 tensors with the handful of routines the models
//! need. The same routines back both the tape's forward pass and the
//! plain inference path, so the two produce bit-identical values.

use super::{NumericsError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "from_vec",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![x],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Matrix rows when 2-D, 1 otherwise.
    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            1 => self.shape[0],
            _ => self.data.len(),
        }
    }
}

fn shapes_equal(a: &Tensor, b: &Tensor) -> bool {
    a.data.len() == b.data.len() && a.shape == b.shape
}

pub(super) fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if !shapes_equal(a, b) {
        return Err(NumericsError::ShapeMismatch {
            op: "add",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
    Ok(Tensor {
        shape: a.shape.clone(),
        data,
    })
}

pub(super) fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if !shapes_equal(a, b) {
        return Err(NumericsError::ShapeMismatch {
            op: "sub",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect();
    Ok(Tensor {
        shape: a.shape.clone(),
        data,
    })
}

pub(super) fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if !shapes_equal(a, b) {
        return Err(NumericsError::ShapeMismatch {
            op: "mul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
    Ok(Tensor {
        shape: a.shape.clone(),
        data,
    })
}

/// `(r × c) · (c)` → `(r)`, or `(r × c) · (c × k)` → `(r × k)`.
pub(super) fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mismatch = || NumericsError::ShapeMismatch {
        op: "matmul",
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    };
    if a.shape.len() != 2 {
        return Err(mismatch());
    }
    let (r, c) = (a.shape[0], a.shape[1]);
    match b.shape.len() {
        1 => {
            if b.shape[0] != c {
                return Err(mismatch());
            }
            let mut out = vec![0.0; r];
            for i in 0..r {
                let row = &a.data[i * c..(i + 1) * c];
                let mut acc = 0.0;
                for (x, y) in row.iter().zip(&b.data) {
                    acc += x * y;
                }
                out[i] = acc;
            }
            Ok(Tensor {
                shape: vec![r],
                data: out,
            })
        }
        2 => {
            if b.shape[0] != c {
                return Err(mismatch());
            }
            let k = b.shape[1];
            let mut out = vec![0.0; r * k];
            for i in 0..r {
                for l in 0..c {
                    let aval = a.data[i * c + l];
                    if aval == 0.0 {
                        continue;
                    }
                    for j in 0..k {
                        out[i * k + j] += aval * b.data[l * k + j];
                    }
                }
            }
            Ok(Tensor {
                shape: vec![r, k],
                data: out,
            })
        }
        _ => Err(mismatch()),
    }
}

pub(super) fn dot(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.data.len() != b.data.len() {
        return Err(NumericsError::ShapeMismatch {
            op: "dot",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum())
}

pub(super) fn concat(parts: &[&Tensor]) -> Tensor {
    let mut data = Vec::with_capacity(parts.iter().map(|p| p.data.len()).sum());
    for p in parts {
        data.extend_from_slice(&p.data);
    }
    Tensor {
        shape: vec![data.len()],
        data,
    }
}

/// Softmax over each `(start, len)` slice of a flat score vector;
/// positions outside every group become zero. Shift-stabilized.
pub(super) fn softmax_groups(scores: &Tensor, groups: &[(usize, usize)]) -> Tensor {
    let mut out = vec![0.0; scores.data.len()];
    for &(start, len) in groups {
        if len == 0 {
            continue;
        }
        let slice = &scores.data[start..start + len];
        let max = slice.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for (i, &s) in slice.iter().enumerate() {
            let e = (s - max).exp();
            out[start + i] = e;
            denom += e;
        }
        for x in &mut out[start..start + len] {
            *x /= denom;
        }
    }
    Tensor {
        shape: scores.shape.clone(),
        data: out,
    }
}
