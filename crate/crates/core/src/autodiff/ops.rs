use std::f64::consts::{FRAC_1_SQRT_2, PI};

use super::{ConvGeom, Graph, Node, NodeId, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{self, Precision, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

const GELU_TANH_C: f64 = 0.044715;

fn gelu_tanh(x: f64) -> (f64, f64) {
    let k = (2.0 / PI).sqrt();
    let u = k * (x + GELU_TANH_C * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let du = k * (1.0 + 3.0 * GELU_TANH_C * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (y, dy)
}

/// GELU value, exact (`x·Φ(x)`) or tanh-approximated.
pub fn gelu_scalar(x: f64, exact: bool) -> f64 {
    if exact {
        x * normal_cdf(x)
    } else {
        gelu_tanh(x).0
    }
}

fn gelu_grad(x: f64, exact: bool) -> f64 {
    if exact {
        normal_cdf(x) + x * normal_pdf(x)
    } else {
        gelu_tanh(x).1
    }
}

/// Row-wise softmax with max subtraction. `mask[i]` false forces weight 0.
pub(crate) fn softmax_rows(x: &[f64], cols: usize, mask: Option<&[bool]>) -> Result<Vec<f64>> {
    let mut out = vec![0.0; x.len()];
    for (r, (xr, or)) in x.chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
        let keep = |i: usize| mask.is_none_or(|m| m[r * cols + i]);
        let mut max = f64::NEG_INFINITY;
        for (i, &v) in xr.iter().enumerate() {
            if keep(i) && v > max {
                max = v;
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::EmptyAttentionRow(r));
        }
        let mut z = 0.0;
        for (i, (&v, o)) in xr.iter().zip(or.iter_mut()).enumerate() {
            if keep(i) {
                *o = (v - max).exp();
                z += *o;
            }
        }
        for o in or.iter_mut() {
            *o /= z;
        }
    }
    Ok(out)
}

impl<'g> Var<'g> {
    fn same_graph(&self, other: &Var<'g>) {
        assert!(
            std::ptr::eq(self.graph, other.graph),
            "vars from different graphs"
        );
    }

    fn tracked_any(&self, others: &[NodeId]) -> bool {
        let nodes = self.graph.nodes();
        nodes[self.id].requires_grad || others.iter().any(|&i| nodes[i].requires_grad)
    }

    pub fn matmul(&self, rhs: &Var<'g>) -> Result<Var<'g>> {
        self.same_graph(rhs);
        let (a, b) = (self.value(), rhs.value());
        if a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows() {
            return Err(mismatch("matmul", &a, &b));
        }
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let out = match self.graph.precision() {
            Precision::Verification => {
                let mut out = vec![0.0; m * n];
                tensor::matmul_nn(a.data(), b.data(), &mut out, m, k, n);
                out
            }
            Precision::Fast => tensor::matmul_nn_parallel(a.data(), b.data(), m, k, n),
        };
        let req = self.tracked_any(&[rhs.id]);
        self.graph.push(
            "matmul",
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul(self.id, rhs.id),
            req,
        )
    }

    /// Transpose of a 2-D tensor.
    pub fn t(&self) -> Result<Var<'g>> {
        let a = self.value();
        if a.rank() != 2 {
            return Err(Error::invalid(format!("transpose of rank-{} tensor", a.rank())));
        }
        let req = self.requires_grad();
        self.graph
            .push("transpose", a.transpose(), Op::Transpose(self.id), req)
    }

    fn zip_same(
        &self,
        rhs: &Var<'g>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'g>> {
        self.same_graph(rhs);
        let (a, b) = (self.value(), rhs.value());
        if a.shape() != b.shape() {
            return Err(mismatch(name, &a, &b));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        let req = self.tracked_any(&[rhs.id]);
        self.graph
            .push(name, Tensor::from_parts(a.shape().to_vec(), data), op, req)
    }

    pub fn add(&self, rhs: &Var<'g>) -> Result<Var<'g>> {
        self.zip_same(rhs, "add", |x, y| x + y, Op::Add(self.id, rhs.id))
    }

    pub fn sub(&self, rhs: &Var<'g>) -> Result<Var<'g>> {
        self.zip_same(rhs, "sub", |x, y| x - y, Op::Sub(self.id, rhs.id))
    }

    /// Elementwise product.
    pub fn mul(&self, rhs: &Var<'g>) -> Result<Var<'g>> {
        self.zip_same(rhs, "mul", |x, y| x * y, Op::Mul(self.id, rhs.id))
    }

    pub fn scale(&self, s: f64) -> Result<Var<'g>> {
        let a = self.value();
        let req = self.requires_grad();
        self.graph
            .push("scale", a.map(|x| x * s), Op::Scale(self.id, s), req)
    }

    /// Adds a `1×c` row to every row of an `r×c` matrix.
    pub fn add_row(&self, row: &Var<'g>) -> Result<Var<'g>> {
        self.same_graph(row);
        let (a, b) = (self.value(), row.value());
        if b.len() != a.cols() {
            return Err(mismatch("add_row", &a, &b));
        }
        let c = a.cols();
        let mut data = a.data().to_vec();
        for chunk in data.chunks_mut(c) {
            for (x, y) in chunk.iter_mut().zip(b.data()) {
                *x += y;
            }
        }
        let req = self.tracked_any(&[row.id]);
        self.graph.push(
            "add_row",
            Tensor::from_parts(a.shape().to_vec(), data),
            Op::AddRow(self.id, row.id),
            req,
        )
    }

    /// Adds a constant tensor of identical shape.
    pub fn add_const(&self, c: &Tensor) -> Result<Var<'g>> {
        let a = self.value();
        if a.shape() != c.shape() {
            return Err(mismatch("add_const", &a, c));
        }
        let data = a.data().iter().zip(c.data()).map(|(x, y)| x + y).collect();
        let req = self.requires_grad();
        self.graph.push(
            "add_const",
            Tensor::from_parts(a.shape().to_vec(), data),
            Op::AddConst(self.id),
            req,
        )
    }

    /// Elementwise product with a constant tensor of identical shape.
    pub fn mul_const(&self, c: &Tensor) -> Result<Var<'g>> {
        let a = self.value();
        if a.shape() != c.shape() {
            return Err(mismatch("mul_const", &a, c));
        }
        let data = a.data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
        let req = self.requires_grad();
        self.graph.push(
            "mul_const",
            Tensor::from_parts(a.shape().to_vec(), data),
            Op::MulConst(self.id, c.clone()),
            req,
        )
    }

    /// GELU; exact in verification mode, tanh approximation in fast mode.
    pub fn gelu(&self) -> Result<Var<'g>> {
        let exact = self.graph.precision() == Precision::Verification;
        let a = self.value();
        let req = self.requires_grad();
        self.graph.push(
            "gelu",
            a.map(|x| gelu_scalar(x, exact)),
            Op::Gelu { x: self.id, exact },
            req,
        )
    }

    pub fn relu(&self) -> Result<Var<'g>> {
        let req = self.requires_grad();
        self.graph
            .push("relu", self.value().map(|x| x.max(0.0)), Op::Relu(self.id), req)
    }

    pub fn tanh(&self) -> Result<Var<'g>> {
        let req = self.requires_grad();
        self.graph
            .push("tanh", self.value().map(f64::tanh), Op::Tanh(self.id), req)
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Var<'g>> {
        self.masked_softmax(None)
    }

    /// Softmax over the last axis; entries whose mask is false get weight
    /// exactly 0. A row with no unmasked entry is an error.
    pub fn masked_softmax(&self, mask: Option<&[bool]>) -> Result<Var<'g>> {
        let a = self.value();
        if let Some(m) = mask {
            if m.len() != a.len() {
                return Err(Error::ShapeMismatch {
                    op: "masked_softmax",
                    lhs: a.shape().to_vec(),
                    rhs: vec![m.len()],
                });
            }
        }
        let out = softmax_rows(a.data(), a.cols(), mask)?;
        let req = self.requires_grad();
        self.graph.push(
            "softmax",
            Tensor::from_parts(a.shape().to_vec(), out),
            Op::Softmax(self.id),
            req,
        )
    }

    /// Per-row normalisation over the last axis, then `·gain + bias`
    /// (both `1×d`).
    pub fn layer_norm(&self, gain: &Var<'g>, bias: &Var<'g>) -> Result<Var<'g>> {
        self.same_graph(gain);
        self.same_graph(bias);
        let (x, g, b) = (self.value(), gain.value(), bias.value());
        let d = x.cols();
        if g.len() != d || b.len() != d {
            return Err(mismatch("layer_norm", &x, &g));
        }
        let rows = x.rows();
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let xr = x.row(r);
            let mean = xr.iter().sum::<f64>() / d as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for i in 0..d {
                let h = (xr[i] - mean) * is;
                xhat[r * d + i] = h;
                out[r * d + i] = h * g.data()[i] + b.data()[i];
            }
        }
        let req = self.tracked_any(&[gain.id, bias.id]);
        self.graph.push(
            "layer_norm",
            Tensor::from_parts(x.shape().to_vec(), out),
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                inv_std,
            },
            req,
        )
    }

    /// Columns `start..start+len`.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Var<'g>> {
        let a = self.value();
        let (r, c) = (a.rows(), a.cols());
        if start + len > c || a.rank() != 2 {
            return Err(Error::invalid(format!(
                "slice_cols {start}+{len} of {:?}",
                a.shape()
            )));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&a.row(i)[start..start + len]);
        }
        let req = self.requires_grad();
        self.graph.push(
            "slice_cols",
            Tensor::from_parts(vec![r, len], data),
            Op::SliceCols { x: self.id, start },
            req,
        )
    }

    /// Rows `start..start+len`.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Var<'g>> {
        let a = self.value();
        if start + len > a.rows() || a.rank() != 2 {
            return Err(Error::invalid(format!(
                "slice_rows {start}+{len} of {:?}",
                a.shape()
            )));
        }
        let req = self.requires_grad();
        self.graph.push(
            "slice_rows",
            a.slice_rows(start, len),
            Op::SliceRows { x: self.id, start },
            req,
        )
    }

    pub fn row(&self, r: usize) -> Result<Var<'g>> {
        self.slice_rows(r, 1)
    }

    /// Sum of all entries as a scalar.
    pub fn sum(&self) -> Result<Var<'g>> {
        let req = self.requires_grad();
        self.graph
            .push("sum", Tensor::scalar(self.value().sum()), Op::Sum(self.id), req)
    }
}

impl Graph {
    pub fn concat_rows<'g>(&'g self, parts: &[Var<'g>]) -> Result<Var<'g>> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_rows of nothing"));
        }
        let values: Vec<Tensor> = parts.iter().map(Var::value).collect();
        let out = Tensor::stack_rows(&values)?;
        let req = parts.iter().any(Var::requires_grad);
        self.push(
            "concat_rows",
            out,
            Op::ConcatRows(parts.iter().map(|p| p.id).collect()),
            req,
        )
    }

    pub fn concat_cols<'g>(&'g self, parts: &[Var<'g>]) -> Result<Var<'g>> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_cols of nothing"));
        }
        let values: Vec<Tensor> = parts.iter().map(Var::value).collect();
        let r = values[0].rows();
        if values.iter().any(|v| v.rows() != r) {
            return Err(mismatch("concat_cols", &values[0], &values[1]));
        }
        let total: usize = values.iter().map(Tensor::cols).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for v in &values {
                data.extend_from_slice(v.row(i));
            }
        }
        let req = parts.iter().any(Var::requires_grad);
        self.push(
            "concat_cols",
            Tensor::from_parts(vec![r, total], data),
            Op::ConcatCols(parts.iter().map(|p| p.id).collect()),
            req,
        )
    }

    /// Gathers rows of a `V×d` table.
    pub fn embedding<'g>(&'g self, table: Var<'g>, ids: &[usize]) -> Result<Var<'g>> {
        let t = table.value();
        let (v, d) = (t.rows(), t.cols());
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::invalid(format!("token id {bad} >= vocabulary size {v}")));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        self.push(
            "embedding",
            Tensor::from_parts(vec![ids.len(), d], data),
            Op::Embedding {
                table: table.id,
                ids: ids.to_vec(),
            },
            table.requires_grad(),
        )
    }

    /// `−Σ_r Σ_v targets[r,v] · log softmax(logits[r])_v`, as a scalar.
    pub fn soft_cross_entropy<'g>(&'g self, logits: Var<'g>, targets: &Tensor) -> Result<Var<'g>> {
        let l = logits.value();
        if l.shape() != targets.shape() {
            return Err(mismatch("soft_cross_entropy", &l, targets));
        }
        let v = l.cols();
        let probs = softmax_rows(l.data(), v, None)?;
        let mut loss = 0.0;
        for (lr, tr) in l.data().chunks(v).zip(targets.data().chunks(v)) {
            let max = lr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + lr.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for (&x, &t) in lr.iter().zip(tr) {
                if t != 0.0 {
                    loss -= t * (x - lse);
                }
            }
        }
        self.push(
            "soft_cross_entropy",
            Tensor::scalar(loss),
            Op::SoftCrossEntropy {
                logits: logits.id,
                targets: targets.clone(),
                probs,
            },
            logits.requires_grad(),
        )
    }

    /// Same-padded stride-1 convolution of `x: [B, Cin, H, W]` with
    /// `w: [Cout, Cin, k, k]` (odd `k`) and `b: [Cout]`.
    pub fn conv2d<'g>(&'g self, x: Var<'g>, w: Var<'g>, b: Var<'g>) -> Result<Var<'g>> {
        let (xv, wv, bv) = (x.value(), w.value(), b.value());
        let (xs, ws) = (xv.shape(), wv.shape());
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] || ws[2] % 2 == 0
        {
            return Err(mismatch("conv2d", &xv, &wv));
        }
        if bv.len() != ws[0] {
            return Err(mismatch("conv2d bias", &wv, &bv));
        }
        let geom = ConvGeom {
            batch: xs[0],
            c_in: xs[1],
            c_out: ws[0],
            h: xs[2],
            w: xs[3],
            k: ws[2],
        };
        let out = conv_forward(xv.data(), wv.data(), bv.data(), geom);
        let req = x.requires_grad() || w.requires_grad() || b.requires_grad();
        self.push(
            "conv2d",
            Tensor::from_parts(vec![geom.batch, geom.c_out, geom.h, geom.w], out),
            Op::Conv2d {
                x: x.id,
                w: w.id,
                b: b.id,
                geom,
            },
            req,
        )
    }

    /// 2×2 max pooling with stride 2 over the two trailing axes of
    /// `[B, C, H, W]`; ragged edges form partial windows (ceil mode).
    pub fn max_pool2d<'g>(&'g self, x: Var<'g>) -> Result<Var<'g>> {
        let xv = x.value();
        let s = xv.shape();
        if s.len() != 4 {
            return Err(Error::invalid("max_pool2d expects [B, C, H, W]"));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
        let mut out = vec![0.0; planes * ho * wo];
        let mut argmax = vec![0; out.len()];
        let d = xv.data();
        for p in 0..planes {
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_at = 0;
                    for di in 0..2 {
                        for dj in 0..2 {
                            let (r, c) = (2 * i + di, 2 * j + dj);
                            if r < h && c < w {
                                let at = p * h * w + r * w + c;
                                if d[at] > best {
                                    best = d[at];
                                    best_at = at;
                                }
                            }
                        }
                    }
                    let o = p * ho * wo + i * wo + j;
                    out[o] = best;
                    argmax[o] = best_at;
                }
            }
        }
        self.push(
            "max_pool2d",
            Tensor::from_parts(vec![s[0], s[1], ho, wo], out),
            Op::MaxPool2d { x: x.id, argmax },
            x.requires_grad(),
        )
    }

    /// `[B, C, H, W]` → `[B·H, C·W]`: one row per (batch, time) position,
    /// channels outer within the row.
    pub fn channels_to_rows<'g>(&'g self, x: Var<'g>) -> Result<Var<'g>> {
        let xv = x.value();
        let s = xv.shape();
        if s.len() != 4 {
            return Err(Error::invalid("channels_to_rows expects [B, C, H, W]"));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let mut out = vec![0.0; xv.len()];
        let d = xv.data();
        for bi in 0..b {
            for ci in 0..c {
                for hi in 0..h {
                    let src = ((bi * c + ci) * h + hi) * w;
                    let dst = (bi * h + hi) * c * w + ci * w;
                    out[dst..dst + w].copy_from_slice(&d[src..src + w]);
                }
            }
        }
        self.push(
            "channels_to_rows",
            Tensor::from_parts(vec![b * h, c * w], out),
            Op::ChannelsToRows {
                x: x.id,
                dims: [b, c, h, w],
            },
            x.requires_grad(),
        )
    }
}

fn conv_forward(x: &[f64], w: &[f64], b: &[f64], g: ConvGeom) -> Vec<f64> {
    let ConvGeom {
        batch,
        c_in,
        c_out,
        h,
        w: width,
        k,
    } = g;
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; batch * c_out * h * width];
    for bi in 0..batch {
        for co in 0..c_out {
            let o_plane = &mut out[(bi * c_out + co) * h * width..(bi * c_out + co + 1) * h * width];
            o_plane.iter_mut().for_each(|v| *v = b[co]);
            for ci in 0..c_in {
                let x_plane = &x[(bi * c_in + ci) * h * width..(bi * c_in + ci + 1) * h * width];
                for ki in 0..k {
                    for kj in 0..k {
                        let wv = w[((co * c_in + ci) * k + ki) * k + kj];
                        let di = ki as isize - pad;
                        let dj = kj as isize - pad;
                        for i in 0..h {
                            let si = i as isize + di;
                            if si < 0 || si >= h as isize {
                                continue;
                            }
                            let src_row = &x_plane[si as usize * width..(si as usize + 1) * width];
                            let dst_row = &mut o_plane[i * width..(i + 1) * width];
                            let j_lo = (-dj).max(0) as usize;
                            let j_hi = (width as isize - dj).min(width as isize).max(0) as usize;
                            for j in j_lo..j_hi {
                                dst_row[j] += wv * src_row[(j as isize + dj) as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_backward(
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    g: ConvGeom,
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let ConvGeom {
        batch,
        c_in,
        c_out,
        h,
        w: width,
        k,
    } = g;
    let pad = (k / 2) as isize;
    let plane = h * width;
    if let Some(db) = db {
        for bi in 0..batch {
            for co in 0..c_out {
                db[co] += gout[(bi * c_out + co) * plane..(bi * c_out + co + 1) * plane]
                    .iter()
                    .sum::<f64>();
            }
        }
    }
    let mut dx = dx;
    let mut dw = dw;
    for bi in 0..batch {
        for co in 0..c_out {
            let g_plane = &gout[(bi * c_out + co) * plane..(bi * c_out + co + 1) * plane];
            for ci in 0..c_in {
                let x_off = (bi * c_in + ci) * plane;
                for ki in 0..k {
                    for kj in 0..k {
                        let w_idx = ((co * c_in + ci) * k + ki) * k + kj;
                        let di = ki as isize - pad;
                        let dj = kj as isize - pad;
                        let j_lo = (-dj).max(0) as usize;
                        let j_hi = (width as isize - dj).min(width as isize).max(0) as usize;
                        let mut acc_w = 0.0;
                        for i in 0..h {
                            let si = i as isize + di;
                            if si < 0 || si >= h as isize {
                                continue;
                            }
                            let src = x_off + si as usize * width;
                            for j in j_lo..j_hi {
                                let gv = g_plane[i * width + j];
                                let sj = (j as isize + dj) as usize;
                                acc_w += gv * x[src + sj];
                                if let Some(dx) = dx.as_deref_mut() {
                                    dx[src + sj] += gv * w[w_idx];
                                }
                            }
                        }
                        if let Some(dw) = dw.as_deref_mut() {
                            dw[w_idx] += acc_w;
                        }
                    }
                }
            }
        }
    }
}

fn acc<'a>(
    grads: &'a mut [Option<Vec<f64>>],
    nodes: &[Node],
    id: NodeId,
) -> Option<&'a mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let len = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![0.0; len]))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(super) fn backward_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |id: NodeId| &nodes[id].value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.rows(), av.cols(), bv.cols());
            if let Some(ga) = acc(grads, nodes, *a) {
                tensor::matmul_nt(g, bv.data(), ga, m, n, k);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                tensor::matmul_tn(av.data(), g, gb, m, k, n);
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (val(*a).rows(), val(*a).cols());
            if let Some(ga) = acc(grads, nodes, *a) {
                add_into(ga, &tensor::transpose_raw(g, c, r));
            }
        }
        Op::Add(a, b) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                add_into(ga, g);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                add_into(gb, g);
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                add_into(ga, g);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                for (d, s) in gb.iter_mut().zip(g) {
                    *d -= s;
                }
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).clone(), val(*b).clone());
            if let Some(ga) = acc(grads, nodes, *a) {
                for ((d, s), y) in ga.iter_mut().zip(g).zip(bv.data()) {
                    *d += s * y;
                }
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                for ((d, s), x) in gb.iter_mut().zip(g).zip(av.data()) {
                    *d += s * x;
                }
            }
        }
        Op::Scale(a, s) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                for (d, v) in ga.iter_mut().zip(g) {
                    *d += s * v;
                }
            }
        }
        Op::AddRow(a, b) => {
            let c = val(*b).len();
            if let Some(ga) = acc(grads, nodes, *a) {
                add_into(ga, g);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                for chunk in g.chunks(c) {
                    add_into(gb, chunk);
                }
            }
        }
        Op::AddConst(a) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                add_into(ga, g);
            }
        }
        Op::MulConst(a, c) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                for ((d, s), m) in ga.iter_mut().zip(g).zip(c.data()) {
                    *d += s * m;
                }
            }
        }
        Op::Gelu { x, exact } => {
            let xv = val(*x).clone();
            if let Some(gx) = acc(grads, nodes, *x) {
                for ((d, s), &xi) in gx.iter_mut().zip(g).zip(xv.data()) {
                    *d += s * gelu_grad(xi, *exact);
                }
            }
        }
        Op::Relu(x) => {
            let xv = val(*x).clone();
            if let Some(gx) = acc(grads, nodes, *x) {
                for ((d, s), &xi) in gx.iter_mut().zip(g).zip(xv.data()) {
                    if xi > 0.0 {
                        *d += s;
                    }
                }
            }
        }
        Op::Tanh(x) => {
            let y = node.value.data();
            if let Some(gx) = acc(grads, nodes, *x) {
                for ((d, s), yi) in gx.iter_mut().zip(g).zip(y) {
                    *d += s * (1.0 - yi * yi);
                }
            }
        }
        Op::Softmax(x) => {
            let y = &node.value;
            let c = y.cols();
            if let Some(gx) = acc(grads, nodes, *x) {
                for ((gr, yr), dr) in g.chunks(c).zip(y.data().chunks(c)).zip(gx.chunks_mut(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((d, gi), yi) in dr.iter_mut().zip(gr).zip(yr) {
                        *d += yi * (gi - dot);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let gv = val(*gain).clone();
            let d = gv.len();
            if let Some(gg) = acc(grads, nodes, *gain) {
                for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                    for ((o, a), b) in gg.iter_mut().zip(gr).zip(hr) {
                        *o += a * b;
                    }
                }
            }
            if let Some(gb) = acc(grads, nodes, *bias) {
                for gr in g.chunks(d) {
                    add_into(gb, gr);
                }
            }
            if let Some(gx) = acc(grads, nodes, *x) {
                let n = d as f64;
                for (r, ((gr, hr), dr)) in g
                    .chunks(d)
                    .zip(xhat.chunks(d))
                    .zip(gx.chunks_mut(d))
                    .enumerate()
                {
                    let dh: Vec<f64> = gr.iter().zip(gv.data()).map(|(a, b)| a * b).collect();
                    let sum_dh: f64 = dh.iter().sum();
                    let sum_dh_h: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                    for i in 0..d {
                        dr[i] += inv_std[r] / n * (n * dh[i] - sum_dh - hr[i] * sum_dh_h);
                    }
                }
            }
        }
        Op::Embedding { table, ids } => {
            let d = val(*table).cols();
            if let Some(gt) = acc(grads, nodes, *table) {
                for (row, &i) in g.chunks(d).zip(ids) {
                    add_into(&mut gt[i * d..(i + 1) * d], row);
                }
            }
        }
        Op::SliceCols { x, start } => {
            let c = val(*x).cols();
            let len = node.value.cols();
            if let Some(gx) = acc(grads, nodes, *x) {
                for (r, gr) in g.chunks(len).enumerate() {
                    add_into(&mut gx[r * c + start..r * c + start + len], gr);
                }
            }
        }
        Op::ConcatCols(parts) => {
            let total = node.value.cols();
            let mut off = 0;
            for &p in parts {
                let c = val(p).cols();
                if let Some(gp) = acc(grads, nodes, p) {
                    for (r, dr) in gp.chunks_mut(c).enumerate() {
                        add_into(dr, &g[r * total + off..r * total + off + c]);
                    }
                }
                off += c;
            }
        }
        Op::SliceRows { x, start } => {
            let c = val(*x).cols();
            if let Some(gx) = acc(grads, nodes, *x) {
                add_into(&mut gx[start * c..start * c + g.len()], g);
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let n = val(p).len();
                if let Some(gp) = acc(grads, nodes, p) {
                    add_into(gp, &g[off..off + n]);
                }
                off += n;
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = acc(grads, nodes, *x) {
                for d in gx.iter_mut() {
                    *d += g[0];
                }
            }
        }
        Op::SoftCrossEntropy {
            logits,
            targets,
            probs,
        } => {
            let v = targets.cols();
            if let Some(gl) = acc(grads, nodes, *logits) {
                for ((dr, pr), tr) in gl
                    .chunks_mut(v)
                    .zip(probs.chunks(v))
                    .zip(targets.data().chunks(v))
                {
                    let mass: f64 = tr.iter().sum();
                    for ((d, p), t) in dr.iter_mut().zip(pr).zip(tr) {
                        *d += g[0] * (p * mass - t);
                    }
                }
            }
        }
        Op::Conv2d { x, w, b, geom } => {
            let (xv, wv) = (val(*x).clone(), val(*w).clone());
            let mut dx = nodes[*x].requires_grad.then(|| vec![0.0; xv.len()]);
            let mut dw = nodes[*w].requires_grad.then(|| vec![0.0; wv.len()]);
            let mut db = nodes[*b].requires_grad.then(|| vec![0.0; geom.c_out]);
            conv_backward(
                xv.data(),
                wv.data(),
                g,
                *geom,
                dx.as_deref_mut(),
                dw.as_deref_mut(),
                db.as_deref_mut(),
            );
            for (id, part) in [(*x, dx), (*w, dw), (*b, db)] {
                if let (Some(part), Some(dst)) = (part, acc(grads, nodes, id)) {
                    add_into(dst, &part);
                }
            }
        }
        Op::MaxPool2d { x, argmax } => {
            if let Some(gx) = acc(grads, nodes, *x) {
                for (&src, gv) in argmax.iter().zip(g) {
                    gx[src] += gv;
                }
            }
        }
        Op::ChannelsToRows { x, dims } => {
            let [b, c, h, w] = *dims;
            if let Some(gx) = acc(grads, nodes, *x) {
                for bi in 0..b {
                    for ci in 0..c {
                        for hi in 0..h {
                            let dst = ((bi * c + ci) * h + hi) * w;
                            let src = (bi * h + hi) * c * w + ci * w;
                            add_into(&mut gx[dst..dst + w], &g[src..src + w]);
                        }
                    }
                }
            }
        }
    }
}
