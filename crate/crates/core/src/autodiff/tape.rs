use std::sync::Arc;

use super::tensor::{dot, matmul_into, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScaleRows(Var, Var),
    Affine(Var, f64),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    RowGather(Var, Arc<[usize]>),
    RowScatter(Var, Arc<[usize]>, Var),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Clamp(Var, f64, f64),
    MaskedSoftmax(Var),
    Sum(Var),
    Mean(Var),
    SegmentSum(Var, usize),
    BlockMatmulConst(Arc<[Tensor]>, Var),
    BatchedMatmulNt(Var, Var, usize),
    BatchedMatmul(Var, Var, usize),
    StandardizeCols(Var, f64),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Record of executed primitives, replayed in reverse by [`Tape::backward`].
///
/// A tape is built fresh for every forward pass; parameters enter as leaves
/// and read their gradients back after `backward`.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape(),
        rhs: b.shape(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient populated by the last [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.take()
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(value, op, requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// Elementwise sum. `b` may also be a `1 × cols` row added to every row of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() == vb.shape() {
            let mut out = va.clone();
            out.add_assign(vb);
            Ok(self.push(out, Op::Add(a, b), &[a, b]))
        } else if vb.rows() == 1 && vb.cols() == va.cols() {
            let mut out = va.clone();
            for r in 0..out.rows() {
                for (o, &x) in out.row_mut(r).iter_mut().zip(vb.data()) {
                    *o += x;
                }
            }
            Ok(self.push(out, Op::AddRow(a, b), &[a, b]))
        } else {
            Err(shape_err("add", va, vb))
        }
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("sub", va, vb));
        }
        let mut out = va.clone();
        for (o, &x) in out.data_mut().iter_mut().zip(vb.data()) {
            *o -= x;
        }
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("mul", va, vb));
        }
        let mut out = va.clone();
        for (o, &x) in out.data_mut().iter_mut().zip(vb.data()) {
            *o *= x;
        }
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Multiplies row `r` of `x` by `weights[r]`; `weights` is `rows × 1`.
    pub fn scale_rows(&mut self, weights: Var, x: Var) -> Result<Var> {
        let (vw, vx) = (self.value(weights), self.value(x));
        if vw.cols() != 1 || vw.rows() != vx.rows() {
            return Err(shape_err("scale_rows", vw, vx));
        }
        let mut out = vx.clone();
        for r in 0..out.rows() {
            let w = vw.data()[r];
            for o in out.row_mut(r) {
                *o *= w;
            }
        }
        Ok(self.push(out, Op::ScaleRows(weights, x), &[weights, x]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    /// `s · a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, s: f64, shift: f64) -> Var {
        let out = self.value(a).map(|x| s * x + shift);
        self.push(out, Op::Affine(a, s), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a), &[a])
    }

    /// Concatenates along the last (column) dimension.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat_cols of zero tensors"))?;
        let rows = self.value(first).rows();
        let mut cols = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(shape_err("concat_cols", self.value(first), v));
            }
            cols += v.cols();
        }
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            for r in 0..rows {
                out.row_mut(r)[offset..offset + v.cols()].copy_from_slice(v.row(r));
            }
            offset += v.cols();
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Output row `i` is row `indices[i]` of `a`. Indices may repeat.
    pub fn row_gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let va = self.value(a);
        let mut out = Tensor::zeros(indices.len(), va.cols());
        for (i, &r) in indices.iter().enumerate() {
            if r >= va.rows() {
                return Err(Error::Shape {
                    op: "row_gather",
                    lhs: va.shape(),
                    rhs: [r, va.cols()],
                });
            }
            out.row_mut(i).copy_from_slice(va.row(r));
        }
        Ok(self.push(out, Op::RowGather(a, indices.into()), &[a]))
    }

    /// Copy of `base` with row `rows[i]` replaced by row `i` of `src`.
    /// Target rows must be distinct.
    pub fn row_scatter_update(&mut self, base: Var, rows: &[usize], src: Var) -> Result<Var> {
        let (vb, vs) = (self.value(base), self.value(src));
        if vs.rows() != rows.len() || vs.cols() != vb.cols() {
            return Err(shape_err("row_scatter_update", vb, vs));
        }
        let mut seen = vec![false; vb.rows()];
        let mut out = vb.clone();
        for (i, &r) in rows.iter().enumerate() {
            if r >= vb.rows() || std::mem::replace(&mut seen[r], true) {
                return Err(Error::invalid(format!(
                    "row_scatter_update: target row {r} out of range or repeated"
                )));
            }
            out.row_mut(r).copy_from_slice(vs.row(i));
        }
        Ok(self.push(out, Op::RowScatter(base, rows.into(), src), &[base, src]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Log(a), &[a])
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(out, Op::Clamp(a, lo, hi), &[a])
    }

    /// Row-wise softmax of `a + mask`. Masked entries carry `-inf`.
    pub fn masked_softmax(&mut self, a: Var, mask: &Tensor) -> Result<Var> {
        let va = self.value(a);
        if va.shape() != mask.shape() {
            return Err(shape_err("masked_softmax", va, mask));
        }
        let mut out = va.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            for (x, &m) in row.iter_mut().zip(mask.row(r)) {
                *x += m;
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                row.iter_mut().for_each(|x| *x = 0.0);
                continue;
            }
            let mut total = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            for x in row.iter_mut() {
                *x /= total;
            }
        }
        Ok(self.push(out, Op::MaskedSoftmax(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let out = Tensor::scalar(va.sum() / va.len() as f64);
        self.push(out, Op::Mean(a), &[a])
    }

    /// Sums each run of `segment` consecutive rows: `(k·segment) × c → k × c`.
    pub fn segment_sum(&mut self, a: Var, segment: usize) -> Result<Var> {
        let va = self.value(a);
        if segment == 0 || !va.rows().is_multiple_of(segment) {
            return Err(Error::Shape {
                op: "segment_sum",
                lhs: va.shape(),
                rhs: [segment, va.cols()],
            });
        }
        let mut out = Tensor::zeros(va.rows() / segment, va.cols());
        for r in 0..va.rows() {
            let src = va.row(r);
            for (o, &x) in out.row_mut(r / segment).iter_mut().zip(src) {
                *o += x;
            }
        }
        Ok(self.push(out, Op::SegmentSum(a, segment), &[a]))
    }

    /// Left-multiplies consecutive row blocks of `x` by constant matrices.
    ///
    /// Block `b` of shape `r_b × c_b` consumes the next `c_b` rows of `x` and
    /// produces `r_b` output rows. No gradient flows into the blocks.
    pub fn block_matmul_const(&mut self, blocks: Arc<[Tensor]>, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let in_rows: usize = blocks.iter().map(Tensor::cols).sum();
        if in_rows != vx.rows() {
            return Err(Error::Shape {
                op: "block_matmul_const",
                lhs: [blocks.iter().map(Tensor::rows).sum(), in_rows],
                rhs: vx.shape(),
            });
        }
        let out_rows: usize = blocks.iter().map(Tensor::rows).sum();
        let c = vx.cols();
        let mut out = Tensor::zeros(out_rows, c);
        let (mut ri, mut ro) = (0, 0);
        for blk in blocks.iter() {
            matmul_into(
                blk.data(),
                &vx.data()[ri * c..(ri + blk.cols()) * c],
                &mut out.data_mut()[ro * c..(ro + blk.rows()) * c],
                blk.rows(),
                blk.cols(),
                c,
            );
            ri += blk.cols();
            ro += blk.rows();
        }
        Ok(self.push(out, Op::BlockMatmulConst(blocks, x), &[x]))
    }

    /// Per-block `A_b · B_bᵀ` where `a` and `b` are each split into `batches`
    /// equal row blocks.
    pub fn batched_matmul_nt(&mut self, a: Var, b: Var, batches: usize) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if batches == 0
            || va.rows() % batches != 0
            || vb.rows() % batches != 0
            || va.cols() != vb.cols()
        {
            return Err(shape_err("batched_matmul_nt", va, vb));
        }
        let (p, q, d) = (va.rows() / batches, vb.rows() / batches, va.cols());
        let mut out = Tensor::zeros(batches * p, q);
        for bt in 0..batches {
            for i in 0..p {
                let ar = va.row(bt * p + i);
                for j in 0..q {
                    let v = dot(ar, vb.row(bt * q + j));
                    out.data_mut()[(bt * p + i) * q + j] = v;
                }
            }
        }
        debug_assert_eq!(d, vb.cols());
        Ok(self.push(out, Op::BatchedMatmulNt(a, b, batches), &[a, b]))
    }

    /// Per-block `A_b · B_b`: `a` is `(batches·p) × q`, `b` is `(batches·q) × d`.
    pub fn batched_matmul(&mut self, a: Var, b: Var, batches: usize) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if batches == 0
            || va.rows() % batches != 0
            || vb.rows() != batches * va.cols()
        {
            return Err(shape_err("batched_matmul", va, vb));
        }
        let (p, q, d) = (va.rows() / batches, va.cols(), vb.cols());
        let mut out = Tensor::zeros(batches * p, d);
        for bt in 0..batches {
            matmul_into(
                &va.data()[bt * p * q..(bt + 1) * p * q],
                &vb.data()[bt * q * d..(bt + 1) * q * d],
                &mut out.data_mut()[bt * p * d..(bt + 1) * p * d],
                p,
                q,
                d,
            );
        }
        Ok(self.push(out, Op::BatchedMatmul(a, b, batches), &[a, b]))
    }

    /// Reinterprets the row-major values under a new shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let va = self.value(a);
        if va.len() != rows * cols {
            return Err(Error::Shape {
                op: "reshape",
                lhs: va.shape(),
                rhs: [rows, cols],
            });
        }
        let out = Tensor::from_vec(rows, cols, va.data().to_vec())?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    /// Standardizes every column to zero mean and unit variance.
    pub fn standardize_cols(&mut self, a: Var, eps: f64) -> Var {
        let va = self.value(a);
        let (mean, inv_std) = column_stats(va, eps);
        let mut out = va.clone();
        for r in 0..out.rows() {
            for (c, x) in out.row_mut(r).iter_mut().enumerate() {
                *x = (*x - mean[c]) * inv_std[c];
            }
        }
        self.push(out, Op::StandardizeCols(a, eps), &[a])
    }

    /// Populates gradients of every node that depends on a leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape != [1, 1] {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        grads.resize_with(self.nodes.len(), || None);
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.grad = if node.requires_grad { g } else { None };
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let mut acc = |v: Var, delta: Tensor| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        let wants = |v: Var| nodes[v.0].requires_grad;
        let out = &nodes[i].value;

        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if wants(*a) {
                    acc(*a, g.matmul_t(val(*b)).expect("checked in forward"));
                }
                if wants(*b) {
                    acc(*b, val(*a).tmatmul(g).expect("checked in forward"));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(a, b) => {
                acc(*a, g.clone());
                if wants(*b) {
                    let mut gb = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, &x) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    acc(*b, gb);
                }
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    acc(*a, hadamard(g, val(*b)));
                }
                if wants(*b) {
                    acc(*b, hadamard(g, val(*a)));
                }
            }
            Op::ScaleRows(w, x) => {
                let (vw, vx) = (val(*w), val(*x));
                if wants(*w) {
                    let gw = (0..g.rows()).map(|r| dot(g.row(r), vx.row(r))).collect();
                    acc(*w, Tensor::column(gw));
                }
                if wants(*x) {
                    let mut gx = g.clone();
                    for r in 0..gx.rows() {
                        let s = vw.data()[r];
                        gx.row_mut(r).iter_mut().for_each(|v| *v *= s);
                    }
                    acc(*x, gx);
                }
            }
            Op::Affine(a, s) => acc(*a, g.map(|x| x * s)),
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = val(p).cols();
                    if wants(p) {
                        let mut gp = Tensor::zeros(g.rows(), cols);
                        for r in 0..g.rows() {
                            gp.row_mut(r)
                                .copy_from_slice(&g.row(r)[offset..offset + cols]);
                        }
                        acc(p, gp);
                    }
                    offset += cols;
                }
            }
            Op::RowGather(a, idx) => {
                let va = val(*a);
                let mut ga = Tensor::zeros(va.rows(), va.cols());
                for (k, &r) in idx.iter().enumerate() {
                    for (o, &x) in ga.row_mut(r).iter_mut().zip(g.row(k)) {
                        *o += x;
                    }
                }
                acc(*a, ga);
            }
            Op::RowScatter(base, rows, src) => {
                if wants(*base) {
                    let mut gb = g.clone();
                    for &r in rows.iter() {
                        gb.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
                    }
                    acc(*base, gb);
                }
                if wants(*src) {
                    let mut gs = Tensor::zeros(rows.len(), g.cols());
                    for (k, &r) in rows.iter().enumerate() {
                        gs.row_mut(k).copy_from_slice(g.row(r));
                    }
                    acc(*src, gs);
                }
            }
            Op::Relu(a) => acc(*a, zip_map(g, val(*a), |g, x| if x > 0.0 { g } else { 0.0 })),
            Op::Sigmoid(a) => acc(*a, zip_map(g, out, |g, y| g * y * (1.0 - y))),
            Op::Log(a) => acc(*a, zip_map(g, val(*a), |g, x| g / x)),
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                acc(
                    *a,
                    zip_map(g, val(*a), |g, x| if x >= lo && x <= hi { g } else { 0.0 }),
                );
            }
            Op::MaskedSoftmax(a) => {
                let mut ga = Tensor::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let (gr, yr) = (g.row(r), out.row(r));
                    let inner = dot(gr, yr);
                    for ((o, &gv), &y) in ga.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *o = y * (gv - inner);
                    }
                }
                acc(*a, ga);
            }
            Op::Sum(a) => {
                let [r, c] = val(*a).shape();
                acc(*a, Tensor::filled(r, c, g.item()));
            }
            Op::Mean(a) => {
                let [r, c] = val(*a).shape();
                acc(*a, Tensor::filled(r, c, g.item() / (r * c) as f64));
            }
            Op::SegmentSum(a, segment) => {
                let [r, c] = val(*a).shape();
                let mut ga = Tensor::zeros(r, c);
                for row in 0..r {
                    ga.row_mut(row).copy_from_slice(g.row(row / segment));
                }
                acc(*a, ga);
            }
            Op::BlockMatmulConst(blocks, x) => {
                let [r, c] = val(*x).shape();
                let mut gx = Tensor::zeros(r, c);
                let (mut ri, mut ro) = (0, 0);
                for blk in blocks.iter() {
                    let bt = blk.transpose();
                    matmul_into(
                        bt.data(),
                        &g.data()[ro * c..(ro + blk.rows()) * c],
                        &mut gx.data_mut()[ri * c..(ri + blk.cols()) * c],
                        blk.cols(),
                        blk.rows(),
                        c,
                    );
                    ri += blk.cols();
                    ro += blk.rows();
                }
                acc(*x, gx);
            }
            Op::BatchedMatmulNt(a, b, batches) => {
                let (va, vb) = (val(*a), val(*b));
                let (p, q, d) = (va.rows() / batches, vb.rows() / batches, va.cols());
                if wants(*a) {
                    // dA_b = G_b · B_b
                    let mut ga = Tensor::zeros(va.rows(), d);
                    for bt in 0..*batches {
                        matmul_into(
                            &g.data()[bt * p * q..(bt + 1) * p * q],
                            &vb.data()[bt * q * d..(bt + 1) * q * d],
                            &mut ga.data_mut()[bt * p * d..(bt + 1) * p * d],
                            p,
                            q,
                            d,
                        );
                    }
                    acc(*a, ga);
                }
                if wants(*b) {
                    // dB_b = G_bᵀ · A_b
                    let mut gb = Tensor::zeros(vb.rows(), d);
                    for bt in 0..*batches {
                        for i in 0..p {
                            let ar = va.row(bt * p + i);
                            let gr = g.row(bt * p + i);
                            for (j, &gv) in gr.iter().enumerate() {
                                if gv == 0.0 {
                                    continue;
                                }
                                for (o, &x) in gb.row_mut(bt * q + j).iter_mut().zip(ar) {
                                    *o += gv * x;
                                }
                            }
                        }
                    }
                    acc(*b, gb);
                }
            }
            Op::BatchedMatmul(a, b, batches) => {
                let (va, vb) = (val(*a), val(*b));
                let (p, q, d) = (va.rows() / batches, va.cols(), vb.cols());
                if wants(*a) {
                    // dA_b = G_b · B_bᵀ
                    let mut ga = Tensor::zeros(va.rows(), q);
                    for bt in 0..*batches {
                        for i in 0..p {
                            let gr = g.row(bt * p + i);
                            for j in 0..q {
                                ga.data_mut()[(bt * p + i) * q + j] =
                                    dot(gr, vb.row(bt * q + j));
                            }
                        }
                    }
                    acc(*a, ga);
                }
                if wants(*b) {
                    // dB_b = A_bᵀ · G_b
                    let mut gb = Tensor::zeros(vb.rows(), d);
                    for bt in 0..*batches {
                        for i in 0..p {
                            let ar = va.row(bt * p + i);
                            let gr = g.row(bt * p + i);
                            for (j, &av) in ar.iter().enumerate() {
                                if av == 0.0 {
                                    continue;
                                }
                                for (o, &x) in gb.row_mut(bt * q + j).iter_mut().zip(gr) {
                                    *o += av * x;
                                }
                            }
                        }
                    }
                    acc(*b, gb);
                }
            }
            Op::Reshape(a) => {
                let [r, c] = val(*a).shape();
                acc(*a, Tensor::from_vec(r, c, g.data().to_vec()).expect("same length"));
            }
            Op::StandardizeCols(a, eps) => {
                let va = val(*a);
                let (_, inv_std) = column_stats(va, *eps);
                let (r, c) = (va.rows(), va.cols());
                let n = r as f64;
                let mut mean_g = vec![0.0; c];
                let mut mean_gy = vec![0.0; c];
                for row in 0..r {
                    for col in 0..c {
                        let gv = g.get(row, col);
                        mean_g[col] += gv / n;
                        mean_gy[col] += gv * out.get(row, col) / n;
                    }
                }
                let mut ga = Tensor::zeros(r, c);
                for row in 0..r {
                    for col in 0..c {
                        let v = inv_std[col]
                            * (g.get(row, col) - mean_g[col] - out.get(row, col) * mean_gy[col]);
                        ga.set(row, col, v);
                    }
                }
                acc(*a, ga);
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    zip_map(a, b, |x, y| x * y)
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.rows(), a.cols(), data).expect("same shape")
}

fn column_stats(x: &Tensor, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let (r, c) = (x.rows(), x.cols());
    let n = r as f64;
    let mut mean = vec![0.0; c];
    for row in 0..r {
        for (m, &v) in mean.iter_mut().zip(x.row(row)) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; c];
    for row in 0..r {
        for ((s, &v), &m) in var.iter_mut().zip(x.row(row)).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    let inv_std = var.into_iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    (mean, inv_std)
}
