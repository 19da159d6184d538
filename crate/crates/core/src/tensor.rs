//! Dense tensors and hand-written differentiable layer primitives.
//!
//! Every forward op here has an explicit backward partner; there is no
//! graph or tape. Backward functions either return gradients for the
//! caller to route, or accumulate into a parameter's `grad` buffer
//! (gradients always add, so shared parameters such as the category
//! table pick up every contribution; callers zero grads between steps).
//! All arithmetic is f64.

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Dense row-major tensor with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Contract(format!(
                "tensor shape {:?} wants {} values, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor {
            shape: vec![1],
            data: vec![v],
            grad: None,
        }
    }

    pub fn vector(v: Vec<f64>) -> Tensor {
        Tensor {
            shape: vec![v.len()],
            data: v,
            grad: None,
        }
    }

    /// 2-D tensor from nested rows; rows must be equal length.
    pub fn matrix(rows: &[Vec<f64>]) -> Result<Tensor> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::Contract("ragged matrix rows".into()));
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Rows of a 2-D tensor (a 1-D tensor counts as a single row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 0,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn has_grad(&self) -> bool {
        self.grad.is_some()
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Allocate (zeroed) grad storage if not present, and return it.
    pub fn grad_mut(&mut self) -> &mut [f64] {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![0.0; n])
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Add `delta` element-wise into the grad buffer.
    pub fn accumulate_grad(&mut self, delta: &Tensor) -> Result<()> {
        if delta.shape != self.shape {
            return Err(Error::ShapeMismatch {
                op: "accumulate_grad",
                left: self.shape.clone(),
                right: delta.shape.clone(),
            });
        }
        let g = self.grad_mut();
        for (gi, di) in g.iter_mut().zip(delta.data.iter()) {
            *gi += di;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

// ---------------------------------------------------------------------------
// Linear layer
// ---------------------------------------------------------------------------

/// y[i,j] = sum_k x[i,k] * w[k,j] + b[j]
pub fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, din) = (x.rows(), x.cols());
    if w.shape().len() != 2 || w.shape()[0] != din {
        return Err(Error::ShapeMismatch {
            op: "linear_forward",
            left: x.shape().to_vec(),
            right: w.shape().to_vec(),
        });
    }
    let dout = w.shape()[1];
    if b.numel() != dout {
        return Err(Error::ShapeMismatch {
            op: "linear_forward",
            left: w.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; n * dout];
    for i in 0..n {
        for k in 0..din {
            let xv = x.data[i * din + k];
            if xv == 0.0 {
                continue;
            }
            let wrow = &w.data[k * dout..(k + 1) * dout];
            let orow = &mut out[i * dout..(i + 1) * dout];
            for j in 0..dout {
                orow[j] += xv * wrow[j];
            }
        }
        let orow = &mut out[i * dout..(i + 1) * dout];
        for j in 0..dout {
            orow[j] += b.data[j];
        }
    }
    Tensor::new(vec![n, dout], out)
}

/// Gradients for the linear layer: returns (dx, dw, db).
pub fn linear_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, din) = (x.rows(), x.cols());
    let dout = w.shape()[1];
    if dy.rows() != n || dy.cols() != dout {
        return Err(Error::ShapeMismatch {
            op: "linear_backward",
            left: vec![n, dout],
            right: dy.shape().to_vec(),
        });
    }
    let mut dx = vec![0.0; n * din];
    let mut dw = vec![0.0; din * dout];
    let mut db = vec![0.0; dout];
    for i in 0..n {
        let dyrow = &dy.data[i * dout..(i + 1) * dout];
        for j in 0..dout {
            db[j] += dyrow[j];
        }
        for k in 0..din {
            let wrow = &w.data[k * dout..(k + 1) * dout];
            let mut acc = 0.0;
            for j in 0..dout {
                acc += dyrow[j] * wrow[j];
            }
            dx[i * din + k] = acc;
            let xv = x.data[i * din + k];
            if xv != 0.0 {
                let dwrow = &mut dw[k * dout..(k + 1) * dout];
                for j in 0..dout {
                    dwrow[j] += xv * dyrow[j];
                }
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(vec![din, dout], dw)?,
        Tensor::new(vec![dout], db)?,
    ))
}

// ---------------------------------------------------------------------------
// Element-wise activations
// ---------------------------------------------------------------------------

pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data.iter().map(|v| v.max(0.0)).collect();
    Tensor {
        shape: x.shape.clone(),
        data,
        grad: None,
    }
}

/// Subgradient at 0 is 0: dy passes only where x > 0.
pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let data = x
        .data
        .iter()
        .zip(dy.data.iter())
        .map(|(xv, d)| if *xv > 0.0 { *d } else { 0.0 })
        .collect();
    Tensor {
        shape: x.shape.clone(),
        data,
        grad: None,
    }
}

pub fn tanh(x: &Tensor) -> Tensor {
    let data = x.data.iter().map(|v| v.tanh()).collect();
    Tensor {
        shape: x.shape.clone(),
        data,
        grad: None,
    }
}

/// Backward from the forward output: d/dx tanh = 1 - y^2.
pub fn tanh_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let data = y
        .data
        .iter()
        .zip(dy.data.iter())
        .map(|(yv, d)| (1.0 - yv * yv) * d)
        .collect();
    Tensor {
        shape: y.shape.clone(),
        data,
        grad: None,
    }
}

/// Numerically stable sigmoid, branch form.
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    let data = x.data.iter().map(|v| sigmoid_scalar(*v)).collect();
    Tensor {
        shape: x.shape.clone(),
        data,
        grad: None,
    }
}

/// Backward from the forward output: d/dx sigmoid = y(1 - y).
pub fn sigmoid_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let data = y
        .data
        .iter()
        .zip(dy.data.iter())
        .map(|(yv, d)| yv * (1.0 - yv) * d)
        .collect();
    Tensor {
        shape: y.shape.clone(),
        data,
        grad: None,
    }
}

// ---------------------------------------------------------------------------
// Dropout
// ---------------------------------------------------------------------------

/// Keep/scale mask from one dropout draw; backward re-applies it.
#[derive(Debug, Clone)]
pub struct DropoutMask {
    scale: Vec<f64>,
}

impl DropoutMask {
    pub fn identity(n: usize) -> DropoutMask {
        DropoutMask {
            scale: vec![1.0; n],
        }
    }
}

/// Inverted dropout: training zeroes each element with probability `rate`
/// and scales survivors by 1/(1-rate); inference is the identity.
pub fn dropout(
    x: &Tensor,
    rate: f64,
    training: bool,
    rng: &mut Rng,
) -> Result<(Tensor, DropoutMask)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!(
            "dropout rate must be in [0, 1), got {rate}"
        )));
    }
    if !training || rate == 0.0 {
        return Ok((x.clone(), DropoutMask::identity(x.numel())));
    }
    let keep = 1.0 - rate;
    let scale: Vec<f64> = (0..x.numel())
        .map(|_| if rng.bernoulli(rate) { 0.0 } else { 1.0 / keep })
        .collect();
    let data = x
        .data
        .iter()
        .zip(scale.iter())
        .map(|(v, s)| v * s)
        .collect();
    Ok((
        Tensor {
            shape: x.shape.clone(),
            data,
            grad: None,
        },
        DropoutMask { scale },
    ))
}

pub fn dropout_backward(mask: &DropoutMask, dy: &Tensor) -> Tensor {
    let data = dy
        .data
        .iter()
        .zip(mask.scale.iter())
        .map(|(d, s)| d * s)
        .collect();
    Tensor {
        shape: dy.shape.clone(),
        data,
        grad: None,
    }
}

// ---------------------------------------------------------------------------
// Embedding lookup
// ---------------------------------------------------------------------------

/// Row `i` of the output is `table[ids[i]]`.
pub fn embedding_lookup(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    let vocab = table.rows();
    let d = table.cols();
    let mut data = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        if id >= vocab {
            return Err(Error::IdOutOfRange { id, vocab });
        }
        data.extend_from_slice(&table.data[id * d..(id + 1) * d]);
    }
    Tensor::new(vec![ids.len(), d], data)
}

/// Scatter-add dy rows into the table's grad; duplicate ids accumulate.
pub fn embedding_backward(table: &mut Tensor, ids: &[usize], dy: &Tensor) -> Result<()> {
    let vocab = table.rows();
    let d = table.cols();
    if dy.rows() != ids.len() || dy.cols() != d {
        return Err(Error::ShapeMismatch {
            op: "embedding_backward",
            left: vec![ids.len(), d],
            right: dy.shape().to_vec(),
        });
    }
    for &id in ids {
        if id >= vocab {
            return Err(Error::IdOutOfRange { id, vocab });
        }
    }
    let grad = table.grad_mut();
    for (row, &id) in ids.iter().enumerate() {
        for j in 0..d {
            grad[id * d + j] += dy.data[row * d + j];
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Concatenation
// ---------------------------------------------------------------------------

/// Horizontal concat of [n, d_k] parts into [n, sum d_k].
pub fn concat_features(parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::Contract("concat_features of zero parts".into()));
    }
    let n = parts[0].rows();
    for p in parts {
        if p.rows() != n {
            return Err(Error::ShapeMismatch {
                op: "concat_features",
                left: parts[0].shape().to_vec(),
                right: p.shape().to_vec(),
            });
        }
    }
    let total: usize = parts.iter().map(|p| p.cols()).sum();
    let mut data = Vec::with_capacity(n * total);
    for i in 0..n {
        for p in parts {
            let c = p.cols();
            data.extend_from_slice(&p.data[i * c..(i + 1) * c]);
        }
    }
    Tensor::new(vec![n, total], data)
}

/// Slice dy back into per-part gradients.
pub fn concat_backward(dy: &Tensor, widths: &[usize]) -> Result<Vec<Tensor>> {
    let n = dy.rows();
    let total: usize = widths.iter().sum();
    if dy.cols() != total {
        return Err(Error::ShapeMismatch {
            op: "concat_backward",
            left: vec![n, total],
            right: dy.shape().to_vec(),
        });
    }
    let mut out: Vec<Tensor> = widths.iter().map(|w| Tensor::zeros(vec![n, *w])).collect();
    for i in 0..n {
        let mut off = 0;
        for (p, w) in widths.iter().enumerate() {
            out[p].data[i * w..(i + 1) * w]
                .copy_from_slice(&dy.data[i * total + off..i * total + off + w]);
            off += w;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Set reduction (pooling)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Mean,
    Max,
}

/// Column-wise reduction of [m, d] to [d]. Requires m >= 1.
pub fn reduce_set(xs: &Tensor, kind: Reduce) -> Result<Tensor> {
    let m = xs.rows();
    let d = xs.cols();
    if m == 0 {
        return Err(Error::Contract(
            "reduce_set over an empty set has no pooled vector".into(),
        ));
    }
    let mut out = vec![0.0; d];
    match kind {
        Reduce::Mean => {
            for i in 0..m {
                for j in 0..d {
                    out[j] += xs.data[i * d + j];
                }
            }
            let inv = 1.0 / m as f64;
            out.iter_mut().for_each(|v| *v *= inv);
        }
        Reduce::Max => {
            out.copy_from_slice(&xs.data[0..d]);
            for i in 1..m {
                for j in 0..d {
                    let v = xs.data[i * d + j];
                    if v > out[j] {
                        out[j] = v;
                    }
                }
            }
        }
    }
    Tensor::new(vec![d], out)
}

/// Backward of `reduce_set`. Mean spreads dy/m over every row; max routes
/// dy to the argmax row, breaking exact ties toward the lowest row index.
pub fn reduce_set_backward(xs: &Tensor, kind: Reduce, dy: &Tensor) -> Result<Tensor> {
    let m = xs.rows();
    let d = xs.cols();
    if dy.numel() != d {
        return Err(Error::ShapeMismatch {
            op: "reduce_set_backward",
            left: vec![d],
            right: dy.shape().to_vec(),
        });
    }
    let mut dx = vec![0.0; m * d];
    match kind {
        Reduce::Mean => {
            let inv = 1.0 / m as f64;
            for i in 0..m {
                for j in 0..d {
                    dx[i * d + j] = dy.data[j] * inv;
                }
            }
        }
        Reduce::Max => {
            for j in 0..d {
                let mut arg = 0;
                let mut best = xs.data[j];
                for i in 1..m {
                    let v = xs.data[i * d + j];
                    if v > best {
                        best = v;
                        arg = i;
                    }
                }
                dx[arg * d + j] = dy.data[j];
            }
        }
    }
    Tensor::new(vec![m, d], dx)
}

// ---------------------------------------------------------------------------
// Binary cross entropy on a logit
// ---------------------------------------------------------------------------

/// softplus(x) = ln(1 + e^x), computed without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Stable form of -[y ln s(z) + (1-y) ln(1-s(z))] for y in {0,1}.
pub fn bce_with_logit(logit: f64, y: u8) -> f64 {
    softplus(logit) - f64::from(y) * logit
}

/// d loss / d logit = sigmoid(logit) - y.
pub fn bce_with_logit_backward(logit: f64, y: u8) -> f64 {
    sigmoid_scalar(logit) - f64::from(y)
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Per-parameter Adam accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(numel: usize) -> AdamState {
        AdamState {
            m: vec![0.0; numel],
            v: vec![0.0; numel],
            t: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update with bias correction. The gradient buffer is left
/// intact; callers zero it between batches.
pub fn adam_step(param: &mut Tensor, state: &mut AdamState, hyper: &AdamHyper) -> Result<()> {
    let n = param.numel();
    if state.m.len() != n || state.v.len() != n {
        return Err(Error::ShapeMismatch {
            op: "adam_step",
            left: param.shape().to_vec(),
            right: vec![state.m.len()],
        });
    }
    let Some(grad) = param.grad.as_ref() else {
        return Err(Error::Contract(
            "adam_step on a parameter with no gradient buffer".into(),
        ));
    };
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    for i in 0..n {
        let g = grad[i];
        state.m[i] = hyper.beta1 * state.m[i] + (1.0 - hyper.beta1) * g;
        state.v[i] = hyper.beta2 * state.v[i] + (1.0 - hyper.beta2) * g * g;
        let mhat = state.m[i] / bc1;
        let vhat = state.v[i] / bc2;
        param.data[i] -= hyper.lr * mhat / (vhat.sqrt() + hyper.eps);
    }
    Ok(())
}
