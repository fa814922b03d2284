//! Reverse-mode differentiation over a fixed set of matrix ops.
//!
//! A [`Tape`] records every op as it is evaluated. [`Tape::grad_of`] walks the
//! record backwards from a scalar (`1×1`) loss and returns one gradient per
//! requested variable. Only the ops the toy transformer needs are supported.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{LabError, Result};
use crate::rope::RopeTable;
use crate::tensor::{sigmoid, Matrix};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulNT(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    Silu(usize),
    RmsNorm(usize, f64),
    Softmax(usize),
    Rope(usize, Arc<RopeTable>),
    SliceCols(usize, usize),
    HStack(Vec<usize>),
    SliceRows(usize, usize),
    VStack(Vec<usize>),
    MeanSquare(usize),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(LabError::Tape(format!("{v:?} is not recorded on tape {}", self.id)));
        }
        Ok(v.idx)
    }

    fn val(&self, v: Var) -> Result<&Matrix> {
        Ok(&self.nodes[self.idx(v)?].value)
    }

    /// Records an input. Every leaf can be differentiated against.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> Result<&Matrix> {
        self.val(v)
    }

    /// Scalar value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let m = self.val(v)?;
        m.expect_shape((1, 1), "scalar")?;
        Ok(m[(0, 0)])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a)?.matmul(self.val(b)?)?;
        Ok(self.push(out, Op::MatMul(a.idx, b.idx)))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a)?.matmul_nt(self.val(b)?)?;
        Ok(self.push(out, Op::MatMulNT(a.idx, b.idx)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a)?.add(self.val(b)?)?;
        Ok(self.push(out, Op::Add(a.idx, b.idx)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a)?.sub(self.val(b)?)?;
        Ok(self.push(out, Op::Sub(a.idx, b.idx)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a)?.zip_map(self.val(b)?, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a.idx, b.idx)))
    }

    /// Adds the `1×c` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let out = self.val(a)?.add_row_broadcast(self.val(bias)?)?;
        Ok(self.push(out, Op::AddRow(a.idx, bias.idx)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.val(a)?.scale(s);
        Ok(self.push(out, Op::Scale(a.idx, s)))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let out = self.val(a)?.map(crate::tensor::silu);
        Ok(self.push(out, Op::Silu(a.idx)))
    }

    /// Parameter-free RMS normalisation of each row.
    pub fn rms_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let out = rms_norm(self.val(a)?, eps);
        Ok(self.push(out, Op::RmsNorm(a.idx, eps)))
    }

    /// Row softmax of `a + additive_mask`, the mask being a constant.
    pub fn softmax(&mut self, a: Var, additive_mask: Option<&Matrix>) -> Result<Var> {
        let out = crate::tensor::softmax_rows(self.val(a)?, additive_mask)?;
        Ok(self.push(out, Op::Softmax(a.idx)))
    }

    /// Per-row rotation of adjacent channel pairs by a fixed table.
    pub fn rope(&mut self, a: Var, table: &Arc<RopeTable>) -> Result<Var> {
        let out = table.apply(self.val(a)?)?;
        Ok(self.push(out, Op::Rope(a.idx, Arc::clone(table))))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let m = self.val(a)?;
        if start > end || end > m.cols() {
            return Err(LabError::Shape(format!("column slice {start}..{end} of {:?}", m.shape())));
        }
        let out = m.slice_cols(start, end);
        Ok(self.push(out, Op::SliceCols(a.idx, start)))
    }

    pub fn hstack(&mut self, parts: &[Var]) -> Result<Var> {
        let mats = parts.iter().map(|&p| self.val(p)).collect::<Result<Vec<_>>>()?;
        let out = Matrix::hstack(&mats)?;
        Ok(self.push(out, Op::HStack(parts.iter().map(|p| p.idx).collect())))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let m = self.val(a)?;
        if start > end || end > m.rows() {
            return Err(LabError::Shape(format!("row slice {start}..{end} of {:?}", m.shape())));
        }
        let out = m.slice_rows(start, end);
        Ok(self.push(out, Op::SliceRows(a.idx, start)))
    }

    pub fn vstack(&mut self, parts: &[Var]) -> Result<Var> {
        let mats = parts.iter().map(|&p| self.val(p)).collect::<Result<Vec<_>>>()?;
        let out = Matrix::vstack(&mats)?;
        Ok(self.push(out, Op::VStack(parts.iter().map(|p| p.idx).collect())))
    }

    /// Mean of squared entries, as a `1×1` node.
    pub fn mean_square(&mut self, a: Var) -> Result<Var> {
        let m = self.val(a)?;
        let n = (m.rows() * m.cols()).max(1) as f64;
        let out = Matrix::filled(1, 1, m.frobenius_sq() / n);
        Ok(self.push(out, Op::MeanSquare(a.idx)))
    }

    /// Mean squared difference between two nodes.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        self.mean_square(d)
    }

    /// Gradients of the scalar `loss` with respect to each of `wrt`.
    ///
    /// Variables that `loss` does not depend on get zero gradients.
    pub fn grad_of(&self, loss: Var, wrt: &[Var]) -> Result<Vec<Matrix>> {
        let li = self.idx(loss)?;
        self.nodes[li].value.expect_shape((1, 1), "loss")?;
        for &w in wrt {
            self.idx(w)?;
        }
        let grads = self.backward(li)?;
        Ok(wrt
            .iter()
            .map(|w| {
                grads[w.idx].clone().unwrap_or_else(|| {
                    let (r, c) = self.nodes[w.idx].value.shape();
                    Matrix::zeros(r, c)
                })
            })
            .collect())
    }

    fn backward(&self, loss: usize) -> Result<Vec<Option<Matrix>>> {
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Matrix::filled(1, 1, 1.0));
        for i in (0..=loss).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => grads[i] = Some(g),
                Op::MatMul(a, b) => {
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    accumulate(&mut grads, *a, g.matmul_nt(bv)?)?;
                    accumulate(&mut grads, *b, av.matmul_tn(&g)?)?;
                }
                Op::MatMulNT(a, b) => {
                    // out = a bᵀ ; da = g b ; db = gᵀ a
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    accumulate(&mut grads, *a, g.matmul(bv)?)?;
                    accumulate(&mut grads, *b, g.matmul_tn(av)?)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g)?;
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.scale(-1.0))?;
                    accumulate(&mut grads, *a, g)?;
                }
                Op::Mul(a, b) => {
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    accumulate(&mut grads, *a, g.zip_map(bv, |x, y| x * y)?)?;
                    accumulate(&mut grads, *b, g.zip_map(av, |x, y| x * y)?)?;
                }
                Op::AddRow(a, bias) => {
                    let mut gb = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, x) in gb.row_mut(0).iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    accumulate(&mut grads, *bias, gb)?;
                    accumulate(&mut grads, *a, g)?;
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.scale(*s))?,
                Op::Silu(a) => {
                    let x = &self.nodes[*a].value;
                    let d = g.zip_map(x, |gv, xv| {
                        let s = sigmoid(xv);
                        gv * (s + xv * s * (1.0 - s))
                    })?;
                    accumulate(&mut grads, *a, d)?;
                }
                Op::RmsNorm(a, eps) => {
                    let x = &self.nodes[*a].value;
                    let d = x.cols() as f64;
                    let mut dx = Matrix::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let xr = x.row(r);
                        let gr = g.row(r);
                        let ms = xr.iter().map(|v| v * v).sum::<f64>() / d;
                        let s = 1.0 / (ms + eps).sqrt();
                        let dot: f64 = xr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, &xv), &gv) in dx.row_mut(r).iter_mut().zip(xr).zip(gr) {
                            *o = s * gv - s * s * s * xv * dot / d;
                        }
                    }
                    accumulate(&mut grads, *a, dx)?;
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut dx = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, &yv), &gv) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o = yv * (gv - dot);
                        }
                    }
                    accumulate(&mut grads, *a, dx)?;
                }
                Op::Rope(a, table) => accumulate(&mut grads, *a, table.apply_transpose(&g)?)?,
                Op::SliceCols(a, start) => {
                    let (r, c) = self.nodes[*a].value.shape();
                    let mut full = Matrix::zeros(r, c);
                    for row in 0..r {
                        full.row_mut(row)[*start..*start + g.cols()].copy_from_slice(g.row(row));
                    }
                    accumulate(&mut grads, *a, full)?;
                }
                Op::HStack(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.nodes[p].value.cols();
                        accumulate(&mut grads, p, g.slice_cols(offset, offset + w))?;
                        offset += w;
                    }
                }
                Op::SliceRows(a, start) => {
                    let (r, c) = self.nodes[*a].value.shape();
                    let mut full = Matrix::zeros(r, c);
                    for row in 0..g.rows() {
                        full.row_mut(start + row).copy_from_slice(g.row(row));
                    }
                    accumulate(&mut grads, *a, full)?;
                }
                Op::VStack(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let h = self.nodes[p].value.rows();
                        accumulate(&mut grads, p, g.slice_rows(offset, offset + h))?;
                        offset += h;
                    }
                }
                Op::MeanSquare(a) => {
                    let x = &self.nodes[*a].value;
                    let n = (x.rows() * x.cols()).max(1) as f64;
                    let k = 2.0 * g[(0, 0)] / n;
                    accumulate(&mut grads, *a, x.scale(k))?;
                }
            }
        }
        Ok(grads)
    }
}

fn accumulate(grads: &mut [Option<Matrix>], idx: usize, g: Matrix) -> Result<()> {
    match &mut grads[idx] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

pub(crate) fn rms_norm(x: &Matrix, eps: f64) -> Matrix {
    let mut out = x.clone();
    let d = x.cols() as f64;
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d;
        let s = 1.0 / (ms + eps).sqrt();
        row.iter_mut().for_each(|v| *v *= s);
    }
    out
}
