use std::rc::Rc;

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Output shape of a broadcasting binary op. Both operands must have the
/// same rank; along each axis the sizes agree or one of them is 1.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "broadcast needs equal ranks, got {a:?} and {b:?}"
        )));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::Dimension(format!(
                "shapes {a:?} and {b:?} are not broadcast-compatible"
            ))),
        })
        .collect()
}

/// For each linear index of `out_shape`, the linear index into a tensor of
/// `in_shape` broadcast to it.
fn broadcast_offsets(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let n: usize = out_shape.iter().product();
    let rank = out_shape.len();
    let mut in_strides = vec![0usize; rank];
    let mut s = 1;
    for d in (0..rank).rev() {
        in_strides[d] = if in_shape[d] == 1 { 0 } else { s };
        s *= in_shape[d];
    }
    let mut idx = vec![0usize; rank];
    let mut out = Vec::with_capacity(n);
    let mut off = 0usize;
    for _ in 0..n {
        out.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += in_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= in_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    out
}

/// Sum `g` over the axes along which `shape` was broadcast.
pub fn reduce_to_shape(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let offsets = broadcast_offsets(g.shape(), shape);
    let mut out = Tensor::zeros(shape);
    let dst = out.data_mut();
    for (&o, &v) in offsets.iter().zip(g.data()) {
        dst[o] += v;
    }
    out
}

fn broadcast_apply(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let shape = broadcast_shape(a.shape(), b.shape())?;
    let oa = broadcast_offsets(&shape, a.shape());
    let ob = broadcast_offsets(&shape, b.shape());
    let data = oa
        .iter()
        .zip(&ob)
        .map(|(&i, &j)| f(a.data()[i], b.data()[j]))
        .collect();
    Tensor::new(shape, data)
}

/// `a` broadcast to `shape` (values repeated along singleton axes).
fn expand(a: &Tensor, shape: &[usize]) -> Tensor {
    if a.shape() == shape {
        return a.clone();
    }
    let offsets = broadcast_offsets(shape, a.shape());
    Tensor::new(shape.to_vec(), offsets.iter().map(|&i| a.data()[i]).collect()).unwrap()
}

impl Var {
    fn unary(
        &self,
        op: &'static str,
        value: Tensor,
        backward: impl Fn(&Tensor) -> Tensor + 'static,
    ) -> Var {
        self.tape
            .custom(op, &[self], value, Box::new(move |g| vec![Some(backward(g))]))
            .expect("single-input op on its own tape")
    }

    fn binary(
        &self,
        other: &Var,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        // (grad_out, a_expanded, b_expanded) -> (da, db) at output shape
        back: impl Fn(&Tensor, &Tensor, &Tensor) -> (Tensor, Tensor) + 'static,
    ) -> Result<Var> {
        self.check_same_tape(other, op)?;
        let value = broadcast_apply(&self.value, &other.value, f)?;
        let a = Rc::clone(&self.value);
        let b = Rc::clone(&other.value);
        let out_shape = value.shape().to_vec();
        self.tape.custom(
            op,
            &[self, other],
            value,
            Box::new(move |g| {
                let ae = expand(&a, &out_shape);
                let be = expand(&b, &out_shape);
                let (da, db) = back(g, &ae, &be);
                vec![
                    Some(reduce_to_shape(&da, a.shape())),
                    Some(reduce_to_shape(&db, b.shape())),
                ]
            }),
        )
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.binary(other, "add", |a, b| a + b, |g, _, _| (g.clone(), g.clone()))
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.binary(other, "sub", |a, b| a - b, |g, _, _| (g.clone(), g.scale(-1.0)))
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.binary(
            other,
            "mul",
            |a, b| a * b,
            |g, a, b| {
                (
                    g.zip_map(b, |g, b| g * b).unwrap(),
                    g.zip_map(a, |g, a| g * a).unwrap(),
                )
            },
        )
    }

    /// Elementwise division; a zero anywhere in the divisor is a domain error.
    pub fn div(&self, other: &Var) -> Result<Var> {
        if other.value.data().iter().any(|&v| v == 0.0) {
            return Err(Error::Domain("division by zero".into()));
        }
        self.binary(
            other,
            "div",
            |a, b| a / b,
            |g, a, b| {
                let da = g.zip_map(b, |g, b| g / b).unwrap();
                let t = a.zip_map(b, |a, b| -a / (b * b)).unwrap();
                (da, g.zip_map(&t, |g, t| g * t).unwrap())
            },
        )
    }

    pub fn neg(&self) -> Var {
        self.unary("neg", self.value.scale(-1.0), |g| g.scale(-1.0))
    }

    pub fn mul_scalar(&self, s: f64) -> Var {
        self.unary("mul_scalar", self.value.scale(s), move |g| g.scale(s))
    }

    pub fn add_scalar(&self, s: f64) -> Var {
        self.unary("add_scalar", self.value.map(|v| v + s), |g| g.clone())
    }

    pub fn exp(&self) -> Var {
        let y = self.value.map(f64::exp);
        let yc = y.clone();
        self.unary("exp", y, move |g| g.zip_map(&yc, |g, y| g * y).unwrap())
    }

    /// Natural log; non-positive entries are a domain error.
    pub fn log(&self) -> Result<Var> {
        if let Some(v) = self.value.data().iter().find(|&&v| v <= 0.0) {
            return Err(Error::Domain(format!("log of non-positive value {v}")));
        }
        let x = Rc::clone(&self.value);
        Ok(self.unary("log", self.value.map(f64::ln), move |g| {
            g.zip_map(&x, |g, x| g / x).unwrap()
        }))
    }

    /// Square root; negative entries are a domain error.
    pub fn sqrt(&self) -> Result<Var> {
        if let Some(v) = self.value.data().iter().find(|&&v| v < 0.0) {
            return Err(Error::Domain(format!("sqrt of negative value {v}")));
        }
        let y = self.value.map(f64::sqrt);
        let yc = y.clone();
        Ok(self.unary("sqrt", y, move |g| {
            g.zip_map(&yc, |g, y| g * 0.5 / y).unwrap()
        }))
    }

    pub fn square(&self) -> Var {
        let x = Rc::clone(&self.value);
        self.unary("square", self.value.map(|v| v * v), move |g| {
            g.zip_map(&x, |g, x| 2.0 * g * x).unwrap()
        })
    }

    pub fn sigmoid(&self) -> Var {
        let y = self.value.map(|v| 1.0 / (1.0 + (-v).exp()));
        let yc = y.clone();
        self.unary("sigmoid", y, move |g| {
            g.zip_map(&yc, |g, y| g * y * (1.0 - y)).unwrap()
        })
    }

    pub fn tanh(&self) -> Var {
        let y = self.value.map(f64::tanh);
        let yc = y.clone();
        self.unary("tanh", y, move |g| {
            g.zip_map(&yc, |g, y| g * (1.0 - y * y)).unwrap()
        })
    }

    pub fn relu(&self) -> Var {
        let x = Rc::clone(&self.value);
        self.unary("relu", self.value.map(|v| v.max(0.0)), move |g| {
            g.zip_map(&x, |g, x| if x > 0.0 { g } else { 0.0 }).unwrap()
        })
    }

    /// `|x|`, with subgradient 0 at 0.
    pub fn abs(&self) -> Var {
        let x = Rc::clone(&self.value);
        self.unary("abs", self.value.map(f64::abs), move |g| {
            g.zip_map(&x, |g, x| g * if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 })
                .unwrap()
        })
    }

    pub fn sin(&self) -> Var {
        let x = Rc::clone(&self.value);
        self.unary("sin", self.value.map(f64::sin), move |g| {
            g.zip_map(&x, |g, x| g * x.cos()).unwrap()
        })
    }

    pub fn cos(&self) -> Var {
        let x = Rc::clone(&self.value);
        self.unary("cos", self.value.map(f64::cos), move |g| {
            g.zip_map(&x, |g, x| -g * x.sin()).unwrap()
        })
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where clamping was active.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var {
        let x = Rc::clone(&self.value);
        self.unary("clamp", self.value.map(|v| v.clamp(lo, hi)), move |g| {
            g.zip_map(&x, |g, x| if (lo..=hi).contains(&x) { g } else { 0.0 })
                .unwrap()
        })
    }

    /// Sum of all entries, as a rank-0 tensor.
    pub fn sum(&self) -> Var {
        let shape = self.value.shape().to_vec();
        self.unary("sum", Tensor::scalar(self.value.sum()), move |g| {
            Tensor::full(shape.clone(), g.item())
        })
    }

    pub fn mean(&self) -> Var {
        let n = self.value.len().max(1) as f64;
        self.sum().mul_scalar(1.0 / n)
    }

    /// Sum along `axis`, keeping it as a singleton axis.
    pub fn sum_axis(&self, axis: usize) -> Result<Var> {
        let shape = self.value.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!(
                "axis {axis} out of range for shape {shape:?}"
            )));
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = 1;
        let value = reduce_to_shape(&self.value, &out_shape);
        Ok(self.unary("sum_axis", value, move |g| expand(g, &shape)))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var> {
        let n = *self
            .value
            .shape()
            .get(axis)
            .ok_or_else(|| Error::Dimension(format!("axis {axis} out of range")))?;
        Ok(self.sum_axis(axis)?.mul_scalar(1.0 / n.max(1) as f64))
    }

    pub fn matmul(&self, other: &Var) -> Result<Var> {
        self.check_same_tape(other, "matmul")?;
        let value = self.value.matmul(&other.value)?;
        let a = Rc::clone(&self.value);
        let b = Rc::clone(&other.value);
        self.tape.custom(
            "matmul",
            &[self, other],
            value,
            Box::new(move |g| {
                let da = g.matmul(&b.transpose().unwrap()).unwrap();
                let db = a.transpose().unwrap().matmul(g).unwrap();
                vec![Some(da), Some(db)]
            }),
        )
    }

    pub fn transpose(&self) -> Result<Var> {
        let value = self.value.transpose()?;
        Ok(self.unary("transpose", value, |g| g.transpose().unwrap()))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value.reshape(shape)?;
        let orig = self.value.shape().to_vec();
        Ok(self.unary("reshape", value, move |g| g.reshape(orig.clone()).unwrap()))
    }

    /// Columns `start..end` of the last axis.
    pub fn narrow_cols(&self, start: usize, end: usize) -> Result<Var> {
        let value = self.value.narrow_cols(start, end)?;
        let shape = self.value.shape().to_vec();
        Ok(self.unary("narrow_cols", value, move |g| {
            let c = *shape.last().unwrap();
            let w = end - start;
            let mut out = Tensor::zeros(shape.clone());
            let dst = out.data_mut();
            for (r, chunk) in g.data().chunks(w.max(1)).enumerate() {
                if w == 0 {
                    break;
                }
                dst[r * c + start..r * c + end].copy_from_slice(chunk);
            }
            out
        }))
    }

    /// Rows `indices` of the first axis (repeats allowed).
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Var> {
        let shape = self.value.shape().to_vec();
        let rows = *shape
            .first()
            .ok_or_else(|| Error::Dimension("gather_rows on a scalar".into()))?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Dimension(format!(
                "row index {bad} out of range for {rows} rows"
            )));
        }
        let width = self.value.len() / rows.max(1);
        let src = self.value.data();
        let mut data = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            data.extend_from_slice(&src[i * width..(i + 1) * width]);
        }
        let mut out_shape = shape.clone();
        out_shape[0] = indices.len();
        let value = Tensor::new(out_shape, data)?;
        let indices = indices.to_vec();
        Ok(self.unary("gather_rows", value, move |g| {
            let mut out = Tensor::zeros(shape.clone());
            let dst = out.data_mut();
            for (k, &i) in indices.iter().enumerate() {
                for (d, s) in dst[i * width..(i + 1) * width]
                    .iter_mut()
                    .zip(&g.data()[k * width..(k + 1) * width])
                {
                    *d += s;
                }
            }
            out
        }))
    }

    /// Softmax along the last axis, with max subtraction.
    pub fn softmax(&self) -> Var {
        let y = softmax_rows(&self.value);
        let yc = y.clone();
        self.unary("softmax", y, move |g| {
            let c = yc.last_dim();
            let mut out = g.clone();
            for (orow, (grow, yrow)) in out
                .data_mut()
                .chunks_mut(c)
                .zip(g.data().chunks(c).zip(yc.data().chunks(c)))
            {
                let s: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                for (o, (&g, &y)) in orow.iter_mut().zip(grow.iter().zip(yrow)) {
                    *o = y * (g - s);
                }
            }
            out
        })
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&self) -> Var {
        let c = self.value.last_dim();
        let mut y = (*self.value).clone();
        for row in y.data_mut().chunks_mut(c) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let yc = y.clone();
        self.unary("log_softmax", y, move |g| {
            let mut out = g.clone();
            for (orow, (grow, yrow)) in out
                .data_mut()
                .chunks_mut(c)
                .zip(g.data().chunks(c).zip(yc.data().chunks(c)))
            {
                let s: f64 = grow.iter().sum();
                for (o, (&g, &y)) in orow.iter_mut().zip(grow.iter().zip(yrow)) {
                    *o = g - y.exp() * s;
                }
            }
            out
        })
    }
}

/// Concatenate rank-2 variables along columns.
pub fn concat_cols(parts: &[&Var]) -> Result<Var> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Dimension("concat of zero tensors".into()))?;
    let tape: Tape = first.tape.clone();
    let rows = first.value.dims2()?.0;
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        first.check_same_tape(p, "concat_cols")?;
        let (r, c) = p.value.dims2()?;
        if r != rows {
            return Err(Error::Dimension(format!(
                "concat_cols row mismatch: {r} vs {rows}"
            )));
        }
        widths.push(c);
    }
    let total: usize = widths.iter().sum();
    let mut data = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for (p, &w) in parts.iter().zip(&widths) {
            data.extend_from_slice(&p.value.data()[r * w..(r + 1) * w]);
        }
    }
    let value = Tensor::new([rows, total], data)?;
    tape.custom(
        "concat_cols",
        parts,
        value,
        Box::new(move |g| {
            let mut start = 0;
            widths
                .iter()
                .map(|&w| {
                    let part = g.narrow_cols(start, start + w).unwrap();
                    start += w;
                    Some(part)
                })
                .collect()
        }),
    )
}

/// Row-wise numerically stable softmax over the last axis.
pub(crate) fn softmax_rows(x: &Tensor) -> Tensor {
    let c = x.last_dim();
    let mut y = x.clone();
    for row in y.data_mut().chunks_mut(c) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    y
}
