//! Reverse-mode differentiation on a linear tape.
//!
//! Every primitive records its inputs and enough saved state to replay its
//! local derivative. Ops validate shapes on entry; there is no implicit
//! broadcasting anywhere. Nodes are appended in execution order, so one
//! reverse sweep visits each node after all of its consumers.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VarId(usize);

#[derive(Debug)]
enum Op<S: Scalar> {
    Leaf,
    Param,
    Matmul { a: VarId, b: VarId },
    Transpose { x: VarId },
    Reshape { x: VarId },
    Concat0 { xs: Vec<VarId> },
    ConcatCols { xs: Vec<VarId> },
    Gather { x: VarId, idx: Arc<Vec<usize>> },
    ScatterPillars { feat: VarId, cells: Arc<Vec<usize>> },
    SegmentMax { x: VarId, argmax: Vec<u32> },
    Add { a: VarId, b: VarId },
    Sub { a: VarId, b: VarId },
    Mul { a: VarId, b: VarId },
    Affine { x: VarId, alpha: S },
    AddBiasRows { x: VarId, b: VarId },
    AddBiasChannels { x: VarId, b: VarId },
    Relu { x: VarId },
    Sigmoid { x: VarId },
    Ln { x: VarId },
    ClampMin { x: VarId, c: S },
    PowConst { x: VarId, p: S },
    Huber { x: VarId },
    SoftmaxRows { x: VarId },
    LogSoftmaxRows { x: VarId },
    LayerNorm { x: VarId, gain: VarId, bias: VarId, eps: S },
    Conv2d { x: VarId, w: VarId, geom: ConvGeom },
    MaxPool { x: VarId, argmax: Vec<u32> },
    Upsample2x { x: VarId },
    SumAll { x: VarId },
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    hout: usize,
    wout: usize,
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    params: BTreeMap<String, VarId>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), params: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    pub fn dims(&self, id: VarId) -> &[usize] {
        self.nodes[id.0].value.dims()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> VarId {
        debug_assert!(value.is_finite(), "non-finite tensor out of {op:?}");
        self.nodes.push(Node { value, op, needs_grad });
        VarId(self.nodes.len() - 1)
    }

    fn needs(&self, id: VarId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Constant input; gradients stop here.
    pub fn constant(&mut self, value: Tensor<S>) -> VarId {
        self.push(value, Op::Leaf, false)
    }

    /// Registers a named parameter. Repeated registration of the same name
    /// returns the original node, so shared weights accumulate gradients.
    pub fn param(&mut self, store: &ParamStore<S>, name: &str) -> Result<VarId> {
        if let Some(&id) = self.params.get(name) {
            return Ok(id);
        }
        let value = store.value(name)?.clone();
        let id = self.push(value, Op::Param, true);
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    // ---- structural ops ----

    pub fn reshape(&mut self, x: VarId, dims: &[usize]) -> Result<VarId> {
        let v = self.value(x).reshaped(dims)?;
        let needs = self.needs(x);
        Ok(self.push(v, Op::Reshape { x }, needs))
    }

    pub fn transpose2d(&mut self, x: VarId) -> Result<VarId> {
        let xs = self.value(x);
        let d = xs.dims();
        if d.len() != 2 {
            return Err(Error::shape("transpose2d", format!("need 2-d input, got {d:?}")));
        }
        let (r, c) = (d[0], d[1]);
        let out = Tensor::from_vec(&[c, r], kernels::transpose2d(xs.data(), r, c))?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Transpose { x }, needs))
    }

    /// Concatenate along axis 0; trailing extents must agree.
    pub fn concat0(&mut self, xs: &[VarId]) -> Result<VarId> {
        if xs.is_empty() {
            return Err(Error::shape("concat0", "empty input list"));
        }
        let tail: Vec<usize> = self.dims(xs[0])[1..].to_vec();
        let mut rows = 0;
        for &x in xs {
            let d = self.dims(x);
            if d[1..] != tail[..] {
                return Err(Error::shape(
                    "concat0",
                    format!("trailing extents differ: {:?} vs {:?}", &d[1..], tail),
                ));
            }
            rows += d[0];
        }
        let mut data = Vec::with_capacity(rows * tail.iter().product::<usize>());
        for &x in xs {
            data.extend_from_slice(self.value(x).data());
        }
        let mut dims = vec![rows];
        dims.extend_from_slice(&tail);
        let out = Tensor::from_vec(&dims, data)?;
        let needs = xs.iter().any(|&x| self.needs(x));
        Ok(self.push(out, Op::Concat0 { xs: xs.to_vec() }, needs))
    }

    /// Concatenate 2-d blocks along columns; row counts must agree.
    pub fn concat_cols(&mut self, xs: &[VarId]) -> Result<VarId> {
        if xs.is_empty() {
            return Err(Error::shape("concat_cols", "empty input list"));
        }
        let rows = self.dims(xs[0])[0];
        let mut cols = 0;
        for &x in xs {
            let d = self.dims(x);
            if d.len() != 2 || d[0] != rows {
                return Err(Error::shape(
                    "concat_cols",
                    format!("need 2-d blocks with {rows} rows, got {d:?}"),
                ));
            }
            cols += d[1];
        }
        let mut data = vec![S::zero(); rows * cols];
        let mut off = 0;
        for &x in xs {
            let xs_t = self.value(x);
            let c = xs_t.dims()[1];
            for r in 0..rows {
                data[r * cols + off..r * cols + off + c]
                    .copy_from_slice(&xs_t.data()[r * c..(r + 1) * c]);
            }
            off += c;
        }
        let out = Tensor::from_vec(&[rows, cols], data)?;
        let needs = xs.iter().any(|&x| self.needs(x));
        Ok(self.push(out, Op::ConcatCols { xs: xs.to_vec() }, needs))
    }

    /// out.flat[i] = x.flat[idx[i]], viewed with `dims`.
    pub fn gather(&mut self, x: VarId, idx: Arc<Vec<usize>>, dims: &[usize]) -> Result<VarId> {
        let numel: usize = dims.iter().product();
        if numel != idx.len() {
            return Err(Error::shape("gather", format!("{} indices for dims {dims:?}", idx.len())));
        }
        let src = self.value(x);
        let n = src.numel();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::shape("gather", format!("index {bad} out of range {n}")));
        }
        let data: Vec<S> = idx.iter().map(|&i| src.data()[i]).collect();
        let out = Tensor::from_vec(dims, data)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Gather { x, idx }, needs))
    }

    /// Scatter per-pillar features [m, c] onto a zeroed [c, h, w] grid.
    /// `cells[i]` is the flat h*w position of pillar i; cells are distinct.
    pub fn scatter_pillars(
        &mut self,
        feat: VarId,
        cells: Arc<Vec<usize>>,
        c: usize,
        h: usize,
        w: usize,
    ) -> Result<VarId> {
        let f = self.value(feat);
        let d = f.dims();
        if d.len() != 2 || d[1] != c {
            return Err(Error::shape("scatter_pillars", format!("need [m,{c}], got {d:?}")));
        }
        let m = d[0];
        if cells.len() != m {
            return Err(Error::shape("scatter_pillars", "one cell per pillar required"));
        }
        if let Some(&bad) = cells.iter().find(|&&i| i >= h * w) {
            return Err(Error::shape("scatter_pillars", format!("cell {bad} outside {h}x{w}")));
        }
        let mut data = vec![S::zero(); c * h * w];
        for (i, &cell) in cells.iter().enumerate() {
            for ch in 0..c {
                data[ch * h * w + cell] = f.data()[i * c + ch];
            }
        }
        let out = Tensor::from_vec(&[c, h, w], data)?;
        let needs = self.needs(feat);
        Ok(self.push(out, Op::ScatterPillars { feat, cells }, needs))
    }

    /// Column-wise max over contiguous row segments. `bounds` has one more
    /// entry than there are segments; every segment must be non-empty.
    pub fn segment_max(&mut self, x: VarId, bounds: &[usize]) -> Result<VarId> {
        let xs = self.value(x);
        let d = xs.dims();
        if d.len() != 2 {
            return Err(Error::shape("segment_max", format!("need 2-d input, got {d:?}")));
        }
        let (n, cols) = (d[0], d[1]);
        if bounds.len() < 2 || bounds[0] != 0 || *bounds.last().unwrap() != n {
            return Err(Error::shape("segment_max", "bounds must cover all rows"));
        }
        if bounds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::shape("segment_max", "empty or unordered segment"));
        }
        let m = bounds.len() - 1;
        let mut out = vec![S::zero(); m * cols];
        let mut arg = vec![0u32; m * cols];
        for s in 0..m {
            for j in 0..cols {
                let mut best = xs.data()[bounds[s] * cols + j];
                let mut best_row = bounds[s];
                for r in bounds[s] + 1..bounds[s + 1] {
                    let v = xs.data()[r * cols + j];
                    if v > best {
                        best = v;
                        best_row = r;
                    }
                }
                out[s * cols + j] = best;
                arg[s * cols + j] = best_row as u32;
            }
        }
        let out = Tensor::from_vec(&[m, cols], out)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::SegmentMax { x, argmax: arg }, needs))
    }

    // ---- arithmetic ----

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.matmul_inner(a, b, false)
    }

    /// Matmul whose contraction is invariant to consistent permutations of
    /// the inner axis. Used where that axis ranges over attention tokens.
    pub fn matmul_sorted(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.matmul_inner(a, b, true)
    }

    fn matmul_inner(&mut self, a: VarId, b: VarId, sorted: bool) -> Result<VarId> {
        let (da, db) = (self.dims(a).to_vec(), self.dims(b).to_vec());
        if da.len() != 2 || db.len() != 2 || da[1] != db[0] {
            return Err(Error::shape("matmul", format!("incompatible {da:?} x {db:?}")));
        }
        let (m, k, n) = (da[0], da[1], db[1]);
        let data = if sorted {
            kernels::matmul_sorted(self.value(a).data(), self.value(b).data(), m, k, n)
        } else {
            kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n)
        };
        let out = Tensor::from_vec(&[m, n], data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Matmul { a, b }, needs))
    }

    fn zip_same_shape(&mut self, op: &'static str, a: VarId, b: VarId) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::shape(
                op,
                format!("shape mismatch {:?} vs {:?}", self.dims(a), self.dims(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.zip_same_shape("add", a, b)?;
        let data =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::from_vec(self.dims(a).to_vec().as_slice(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add { a, b }, needs))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.zip_same_shape("sub", a, b)?;
        let data =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x - y).collect();
        let out = Tensor::from_vec(self.dims(a).to_vec().as_slice(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Sub { a, b }, needs))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.zip_same_shape("mul", a, b)?;
        let data =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_vec(self.dims(a).to_vec().as_slice(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul { a, b }, needs))
    }

    /// alpha * x + beta, with constant coefficients.
    pub fn affine(&mut self, x: VarId, alpha: S, beta: S) -> Result<VarId> {
        let out = self.value(x).map(|v| alpha * v + beta);
        let needs = self.needs(x);
        Ok(self.push(out, Op::Affine { x, alpha }, needs))
    }

    /// x[m,n] + row vector b[n] on every row.
    pub fn add_bias_rows(&mut self, x: VarId, b: VarId) -> Result<VarId> {
        let dx = self.dims(x).to_vec();
        let db = self.dims(b).to_vec();
        if dx.len() != 2 || db.len() != 1 || db[0] != dx[1] {
            return Err(Error::shape("add_bias_rows", format!("{dx:?} + {db:?}")));
        }
        let (m, n) = (dx[0], dx[1]);
        let mut data = self.value(x).data().to_vec();
        let bias = self.value(b).data().to_vec();
        for r in 0..m {
            for j in 0..n {
                data[r * n + j] += bias[j];
            }
        }
        let out = Tensor::from_vec(&[m, n], data)?;
        let needs = self.needs(x) || self.needs(b);
        Ok(self.push(out, Op::AddBiasRows { x, b }, needs))
    }

    /// x[c,h,w] + per-channel bias b[c].
    pub fn add_bias_channels(&mut self, x: VarId, b: VarId) -> Result<VarId> {
        let dx = self.dims(x).to_vec();
        let db = self.dims(b).to_vec();
        if dx.len() != 3 || db.len() != 1 || db[0] != dx[0] {
            return Err(Error::shape("add_bias_channels", format!("{dx:?} + {db:?}")));
        }
        let (c, hw) = (dx[0], dx[1] * dx[2]);
        let mut data = self.value(x).data().to_vec();
        let bias = self.value(b).data().to_vec();
        for ch in 0..c {
            for p in 0..hw {
                data[ch * hw + p] += bias[ch];
            }
        }
        let out = Tensor::from_vec(&dx, data)?;
        let needs = self.needs(x) || self.needs(b);
        Ok(self.push(out, Op::AddBiasChannels { x, b }, needs))
    }

    // ---- elementwise nonlinearities ----

    pub fn relu(&mut self, x: VarId) -> Result<VarId> {
        let out = self.value(x).map(|v| if v > S::zero() { v } else { S::zero() });
        let needs = self.needs(x);
        Ok(self.push(out, Op::Relu { x }, needs))
    }

    pub fn sigmoid(&mut self, x: VarId) -> Result<VarId> {
        let one = S::one();
        let out = self.value(x).map(|v| one / (one + (-v).exp()));
        let needs = self.needs(x);
        Ok(self.push(out, Op::Sigmoid { x }, needs))
    }

    /// Natural log; inputs must be strictly positive.
    pub fn ln(&mut self, x: VarId) -> Result<VarId> {
        if self.value(x).data().iter().any(|&v| v <= S::zero()) {
            return Err(Error::Contract("ln of non-positive value".into()));
        }
        let out = self.value(x).map(|v| v.ln());
        let needs = self.needs(x);
        Ok(self.push(out, Op::Ln { x }, needs))
    }

    pub fn clamp_min(&mut self, x: VarId, c: S) -> Result<VarId> {
        let out = self.value(x).map(|v| if v < c { c } else { v });
        let needs = self.needs(x);
        Ok(self.push(out, Op::ClampMin { x, c }, needs))
    }

    /// x^p for constant p; inputs must be non-negative.
    pub fn pow_const(&mut self, x: VarId, p: S) -> Result<VarId> {
        if self.value(x).data().iter().any(|&v| v < S::zero()) {
            return Err(Error::Contract("pow_const of negative value".into()));
        }
        let out = self.value(x).map(|v| v.powf(p));
        let needs = self.needs(x);
        Ok(self.push(out, Op::PowConst { x, p }, needs))
    }

    /// Elementwise smooth-L1: 0.5 x^2 for |x| < 1, |x| - 0.5 otherwise.
    pub fn huber(&mut self, x: VarId) -> Result<VarId> {
        let half = S::lit(0.5);
        let one = S::one();
        let out = self.value(x).map(|v| {
            if v.abs() < one {
                half * v * v
            } else {
                v.abs() - half
            }
        });
        let needs = self.needs(x);
        Ok(self.push(out, Op::Huber { x }, needs))
    }

    pub fn softmax_rows(&mut self, x: VarId) -> Result<VarId> {
        let d = self.dims(x).to_vec();
        if d.len() != 2 {
            return Err(Error::shape("softmax_rows", format!("need 2-d input, got {d:?}")));
        }
        let data = kernels::softmax_rows(self.value(x).data(), d[0], d[1]);
        let out = Tensor::from_vec(&d, data)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::SoftmaxRows { x }, needs))
    }

    pub fn log_softmax_rows(&mut self, x: VarId) -> Result<VarId> {
        let d = self.dims(x).to_vec();
        if d.len() != 2 {
            return Err(Error::shape("log_softmax_rows", format!("need 2-d input, got {d:?}")));
        }
        let data = kernels::log_softmax_rows(self.value(x).data(), d[0], d[1]);
        let out = Tensor::from_vec(&d, data)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::LogSoftmaxRows { x }, needs))
    }

    /// Row-wise layer norm with learned gain and bias.
    pub fn layer_norm(&mut self, x: VarId, gain: VarId, bias: VarId, eps: S) -> Result<VarId> {
        let d = self.dims(x).to_vec();
        if d.len() != 2 {
            return Err(Error::shape("layer_norm", format!("need 2-d input, got {d:?}")));
        }
        let (m, n) = (d[0], d[1]);
        if self.dims(gain) != [n] || self.dims(bias) != [n] {
            return Err(Error::shape("layer_norm", "gain/bias must match row width"));
        }
        let xs = self.value(x).data().to_vec();
        let g = self.value(gain).data().to_vec();
        let bb = self.value(bias).data().to_vec();
        let mut data = vec![S::zero(); m * n];
        let inv_n = S::one() / S::from_usize(n).unwrap();
        for r in 0..m {
            let row = &xs[r * n..(r + 1) * n];
            let mut mean = S::zero();
            for &v in row {
                mean += v;
            }
            mean = mean * inv_n;
            let mut var = S::zero();
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            var = var * inv_n;
            let rstd = S::one() / (var + eps).sqrt();
            for j in 0..n {
                data[r * n + j] = g[j] * (row[j] - mean) * rstd + bb[j];
            }
        }
        let out = Tensor::from_vec(&d, data)?;
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, eps }, needs))
    }

    // ---- spatial ops ----

    pub fn conv2d(&mut self, x: VarId, w: VarId, stride: usize, pad: usize) -> Result<VarId> {
        let dx = self.dims(x).to_vec();
        let dw = self.dims(w).to_vec();
        if dx.len() != 3 || dw.len() != 4 {
            return Err(Error::shape("conv2d", format!("input {dx:?}, weight {dw:?}")));
        }
        if dw[1] != dx[0] {
            return Err(Error::shape(
                "conv2d",
                format!("weight expects {} input channels, input has {}", dw[1], dx[0]),
            ));
        }
        let (cin, h, w_in) = (dx[0], dx[1], dx[2]);
        let (cout, kh, kw) = (dw[0], dw[2], dw[3]);
        let hout = kernels::conv_out_extent(h, kh, stride, pad)
            .ok_or_else(|| Error::shape("conv2d", "kernel larger than padded input"))?;
        let wout = kernels::conv_out_extent(w_in, kw, stride, pad)
            .ok_or_else(|| Error::shape("conv2d", "kernel larger than padded input"))?;
        let geom = ConvGeom { cin, h, w: w_in, cout, kh, kw, stride, pad, hout, wout };
        let data = kernels::conv2d(
            self.value(x).data(),
            self.value(w).data(),
            cin,
            h,
            w_in,
            cout,
            kh,
            kw,
            stride,
            pad,
            hout,
            wout,
        );
        let out = Tensor::from_vec(&[cout, hout, wout], data)?;
        let needs = self.needs(x) || self.needs(w);
        Ok(self.push(out, Op::Conv2d { x, w, geom }, needs))
    }

    pub fn maxpool2d(&mut self, x: VarId, k: usize) -> Result<VarId> {
        let d = self.dims(x).to_vec();
        if d.len() != 3 {
            return Err(Error::shape("maxpool2d", format!("need [c,h,w], got {d:?}")));
        }
        if k == 0 || d[1] % k != 0 || d[2] % k != 0 {
            return Err(Error::shape(
                "maxpool2d",
                format!("extents {}x{} not divisible by window {k}", d[1], d[2]),
            ));
        }
        let (vals, arg) = kernels::maxpool(self.value(x).data(), d[0], d[1], d[2], k);
        let out = Tensor::from_vec(&[d[0], d[1] / k, d[2] / k], vals)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::MaxPool { x, argmax: arg }, needs))
    }

    pub fn upsample2x(&mut self, x: VarId) -> Result<VarId> {
        let d = self.dims(x).to_vec();
        if d.len() != 3 {
            return Err(Error::shape("upsample2x", format!("need [c,h,w], got {d:?}")));
        }
        let data = kernels::upsample2x(self.value(x).data(), d[0], d[1], d[2]);
        let out = Tensor::from_vec(&[d[0], d[1] * 2, d[2] * 2], data)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Upsample2x { x }, needs))
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, x: VarId) -> Result<VarId> {
        let mut acc = S::zero();
        for &v in self.value(x).data() {
            acc += v;
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::scalar(acc), Op::SumAll { x }, needs))
    }

    pub fn mean_all(&mut self, x: VarId) -> Result<VarId> {
        let n = self.value(x).numel();
        let s = self.sum_all(x)?;
        self.affine(s, S::one() / S::from_usize(n).unwrap(), S::zero())
    }

    /// x[m,n] * w[n,p] + b[p] on every row.
    pub fn linear(&mut self, x: VarId, w: VarId, b: VarId) -> Result<VarId> {
        let y = self.matmul(x, w)?;
        self.add_bias_rows(y, b)
    }

    // ---- reverse sweep ----

    /// Gradients of a scalar loss with respect to every node.
    pub fn backward_values(&self, loss: VarId) -> Result<Vec<Option<Tensor<S>>>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "loss must be scalar, got dims {:?}",
                self.dims(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(S::one()));
        for i in (0..self.nodes.len()).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let gout = grads[i].clone().unwrap();
            self.apply_backward(i, &gout, &mut grads);
        }
        Ok(grads)
    }

    /// Fills the gradient slot of every parameter in `store`; parameters the
    /// loss never touched get zero.
    pub fn backward(&self, loss: VarId, store: &mut ParamStore<S>) -> Result<()> {
        let grads = self.backward_values(loss)?;
        store.zero_grads();
        for (name, &id) in &self.params {
            if let Some(g) = &grads[id.0] {
                store.set_grad(name, g.clone())?;
            }
        }
        Ok(())
    }

    fn apply_backward(&self, i: usize, gout: &Tensor<S>, grads: &mut Vec<Option<Tensor<S>>>) {
        let acc = |grads: &mut Vec<Option<Tensor<S>>>, id: VarId, delta: Tensor<S>| {
            if !self.nodes[id.0].needs_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(g) => {
                    let sum: Vec<S> =
                        g.data().iter().zip(delta.data()).map(|(&a, &b)| a + b).collect();
                    *g = Tensor::from_vec(g.dims().to_vec().as_slice(), sum).unwrap();
                }
                slot @ None => *slot = Some(delta),
            }
        };

        match &self.nodes[i].op {
            Op::Leaf | Op::Param => {}
            Op::Matmul { a, b } => {
                let (da, db) = (self.dims(*a).to_vec(), self.dims(*b).to_vec());
                let (m, k, n) = (da[0], da[1], db[1]);
                if self.needs(*a) {
                    let ga = kernels::matmul_abt(gout.data(), self.value(*b).data(), m, n, k);
                    acc(grads, *a, Tensor::from_vec(&[m, k], ga).unwrap());
                }
                if self.needs(*b) {
                    let gb = kernels::matmul_atb(self.value(*a).data(), gout.data(), m, k, n);
                    acc(grads, *b, Tensor::from_vec(&[k, n], gb).unwrap());
                }
            }
            Op::Transpose { x } => {
                let d = gout.dims();
                let gx = kernels::transpose2d(gout.data(), d[0], d[1]);
                acc(grads, *x, Tensor::from_vec(&[d[1], d[0]], gx).unwrap());
            }
            Op::Reshape { x } => {
                let gx = gout.reshaped(self.dims(*x)).unwrap();
                acc(grads, *x, gx);
            }
            Op::Concat0 { xs } => {
                let tail: usize = gout.dims()[1..].iter().product();
                let mut off = 0;
                for &x in xs {
                    let rows = self.dims(x)[0];
                    let seg = gout.data()[off..off + rows * tail].to_vec();
                    off += rows * tail;
                    acc(grads, x, Tensor::from_vec(self.dims(x).to_vec().as_slice(), seg).unwrap());
                }
            }
            Op::ConcatCols { xs } => {
                let rows = gout.dims()[0];
                let cols = gout.dims()[1];
                let mut off = 0;
                for &x in xs {
                    let c = self.dims(x)[1];
                    let mut seg = vec![S::zero(); rows * c];
                    for r in 0..rows {
                        seg[r * c..(r + 1) * c]
                            .copy_from_slice(&gout.data()[r * cols + off..r * cols + off + c]);
                    }
                    off += c;
                    acc(grads, x, Tensor::from_vec(&[rows, c], seg).unwrap());
                }
            }
            Op::Gather { x, idx } => {
                let mut gx = vec![S::zero(); self.value(*x).numel()];
                for (o, &src) in idx.iter().enumerate() {
                    gx[src] += gout.data()[o];
                }
                acc(grads, *x, Tensor::from_vec(self.dims(*x).to_vec().as_slice(), gx).unwrap());
            }
            Op::ScatterPillars { feat, cells } => {
                let d = self.dims(*feat).to_vec();
                let (m, c) = (d[0], d[1]);
                let hw = gout.dims()[1] * gout.dims()[2];
                let mut gf = vec![S::zero(); m * c];
                for (i, &cell) in cells.iter().enumerate() {
                    for ch in 0..c {
                        gf[i * c + ch] = gout.data()[ch * hw + cell];
                    }
                }
                acc(grads, *feat, Tensor::from_vec(&[m, c], gf).unwrap());
            }
            Op::SegmentMax { x, argmax } => {
                let cols = gout.dims()[1];
                let mut gx = vec![S::zero(); self.value(*x).numel()];
                for s in 0..gout.dims()[0] {
                    for j in 0..cols {
                        let row = argmax[s * cols + j] as usize;
                        gx[row * cols + j] += gout.data()[s * cols + j];
                    }
                }
                acc(grads, *x, Tensor::from_vec(self.dims(*x).to_vec().as_slice(), gx).unwrap());
            }
            Op::Add { a, b } => {
                acc(grads, *a, gout.clone());
                acc(grads, *b, gout.clone());
            }
            Op::Sub { a, b } => {
                acc(grads, *a, gout.clone());
                acc(grads, *b, gout.map(|v| -v));
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let g: Vec<S> = gout
                        .data()
                        .iter()
                        .zip(self.value(*b).data())
                        .map(|(&g, &v)| g * v)
                        .collect();
                    acc(grads, *a, Tensor::from_vec(gout.dims().to_vec().as_slice(), g).unwrap());
                }
                if self.needs(*b) {
                    let g: Vec<S> = gout
                        .data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(&g, &v)| g * v)
                        .collect();
                    acc(grads, *b, Tensor::from_vec(gout.dims().to_vec().as_slice(), g).unwrap());
                }
            }
            Op::Affine { x, alpha } => {
                acc(grads, *x, gout.map(|v| *alpha * v));
            }
            Op::AddBiasRows { x, b } => {
                acc(grads, *x, gout.clone());
                if self.needs(*b) {
                    let (m, n) = (gout.dims()[0], gout.dims()[1]);
                    let mut gb = vec![S::zero(); n];
                    for r in 0..m {
                        for j in 0..n {
                            gb[j] += gout.data()[r * n + j];
                        }
                    }
                    acc(grads, *b, Tensor::from_vec(&[n], gb).unwrap());
                }
            }
            Op::AddBiasChannels { x, b } => {
                acc(grads, *x, gout.clone());
                if self.needs(*b) {
                    let d = gout.dims();
                    let (c, hw) = (d[0], d[1] * d[2]);
                    let mut gb = vec![S::zero(); c];
                    for ch in 0..c {
                        for p in 0..hw {
                            gb[ch] += gout.data()[ch * hw + p];
                        }
                    }
                    acc(grads, *b, Tensor::from_vec(&[c], gb).unwrap());
                }
            }
            Op::Relu { x } => {
                let g: Vec<S> = gout
                    .data()
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&g, &v)| if v > S::zero() { g } else { S::zero() })
                    .collect();
                acc(grads, *x, Tensor::from_vec(gout.dims().to_vec().as_slice(), g).unwrap());
            }
            Op::Sigmoid { x } => {
                let y = &self.nodes[i].value;
                let g: Vec<S> = gout
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&g, &s)| g * s * (S::one() - s))
                    .collect();
                acc(grads, *x, Tensor::from_vec(gout.dims().to_vec().as_slice(), g).unwrap());
            }
            Op::Ln { x } => {
                let g: Vec<S> =
                    gout.data().iter().zip(self.value(*x).data()).map(|(&g, &v)| g / v).collect();
                acc(grads, *x, Tensor::from_vec(gout.dims().to_vec().as_slice(), g).unwrap());
            }
            Op::ClampMin { x, c } => {
                let g: Vec<S> = gout
                    .data()
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&g, &v)| if v >= *c { g } else { S::zero() })
                    .collect();
                acc(grads, *x, Tensor::from_vec(gout.dims().to_vec().as_slice(), g).unwrap());
            }
            Op::PowConst { x, p } => {
                let pm1 = *p - S::one();
                let g: Vec<S> = gout
                    .data()
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&g, &v)| g * *p * v.powf(pm1))
                    .collect();
                acc(grads, *x, Tensor::from_vec(gout.dims().to_vec().as_slice(), g).unwrap());
            }
            Op::Huber { x } => {
                let one = S::one();
                let g: Vec<S> = gout
                    .data()
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&g, &v)| if v.abs() < one { g * v } else { g * v.signum() })
                    .collect();
                acc(grads, *x, Tensor::from_vec(gout.dims().to_vec().as_slice(), g).unwrap());
            }
            Op::SoftmaxRows { x } => {
                let y = &self.nodes[i].value;
                let (m, n) = (y.dims()[0], y.dims()[1]);
                let mut gx = vec![S::zero(); m * n];
                for r in 0..m {
                    let yr = &y.data()[r * n..(r + 1) * n];
                    let gr = &gout.data()[r * n..(r + 1) * n];
                    let mut dot = S::zero();
                    for j in 0..n {
                        dot += gr[j] * yr[j];
                    }
                    for j in 0..n {
                        gx[r * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(grads, *x, Tensor::from_vec(&[m, n], gx).unwrap());
            }
            Op::LogSoftmaxRows { x } => {
                let y = &self.nodes[i].value;
                let (m, n) = (y.dims()[0], y.dims()[1]);
                let mut gx = vec![S::zero(); m * n];
                for r in 0..m {
                    let yr = &y.data()[r * n..(r + 1) * n];
                    let gr = &gout.data()[r * n..(r + 1) * n];
                    let mut gsum = S::zero();
                    for j in 0..n {
                        gsum += gr[j];
                    }
                    for j in 0..n {
                        gx[r * n + j] = gr[j] - yr[j].exp() * gsum;
                    }
                }
                acc(grads, *x, Tensor::from_vec(&[m, n], gx).unwrap());
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let xs = self.value(*x);
                let (m, n) = (xs.dims()[0], xs.dims()[1]);
                let g = self.value(*gain).data();
                let inv_n = S::one() / S::from_usize(n).unwrap();
                let mut gx = vec![S::zero(); m * n];
                let mut ggain = vec![S::zero(); n];
                let mut gbias = vec![S::zero(); n];
                for r in 0..m {
                    let row = &xs.data()[r * n..(r + 1) * n];
                    let gr = &gout.data()[r * n..(r + 1) * n];
                    let mut mean = S::zero();
                    for &v in row {
                        mean += v;
                    }
                    mean = mean * inv_n;
                    let mut var = S::zero();
                    for &v in row {
                        let d = v - mean;
                        var += d * d;
                    }
                    var = var * inv_n;
                    let rstd = S::one() / (var + *eps).sqrt();
                    let mut dxhat = vec![S::zero(); n];
                    let mut sum_dxhat = S::zero();
                    let mut sum_dxhat_xhat = S::zero();
                    for j in 0..n {
                        let xh = (row[j] - mean) * rstd;
                        ggain[j] += gr[j] * xh;
                        gbias[j] += gr[j];
                        dxhat[j] = gr[j] * g[j];
                        sum_dxhat += dxhat[j];
                        sum_dxhat_xhat += dxhat[j] * xh;
                    }
                    for j in 0..n {
                        let xh = (row[j] - mean) * rstd;
                        gx[r * n + j] =
                            rstd * (dxhat[j] - sum_dxhat * inv_n - xh * sum_dxhat_xhat * inv_n);
                    }
                }
                acc(grads, *x, Tensor::from_vec(&[m, n], gx).unwrap());
                acc(grads, *gain, Tensor::from_vec(&[n], ggain).unwrap());
                acc(grads, *bias, Tensor::from_vec(&[n], gbias).unwrap());
            }
            Op::Conv2d { x, w, geom } => {
                let gm = *geom;
                if self.needs(*w) {
                    let gw = kernels::conv2d_grad_w(
                        self.value(*x).data(),
                        gout.data(),
                        gm.cin,
                        gm.h,
                        gm.w,
                        gm.cout,
                        gm.kh,
                        gm.kw,
                        gm.stride,
                        gm.pad,
                        gm.hout,
                        gm.wout,
                    );
                    acc(
                        grads,
                        *w,
                        Tensor::from_vec(&[gm.cout, gm.cin, gm.kh, gm.kw], gw).unwrap(),
                    );
                }
                if self.needs(*x) {
                    let gx = kernels::conv2d_grad_x(
                        self.value(*w).data(),
                        gout.data(),
                        gm.cin,
                        gm.h,
                        gm.w,
                        gm.cout,
                        gm.kh,
                        gm.kw,
                        gm.stride,
                        gm.pad,
                        gm.hout,
                        gm.wout,
                    );
                    acc(grads, *x, Tensor::from_vec(&[gm.cin, gm.h, gm.w], gx).unwrap());
                }
            }
            Op::MaxPool { x, argmax } => {
                let d = self.dims(*x).to_vec();
                let (h, w) = (d[1], d[2]);
                let od = gout.dims();
                let (ho, wo) = (od[1], od[2]);
                let mut gx = vec![S::zero(); d[0] * h * w];
                for c in 0..d[0] {
                    for p in 0..ho * wo {
                        gx[c * h * w + argmax[c * ho * wo + p] as usize] +=
                            gout.data()[c * ho * wo + p];
                    }
                }
                acc(grads, *x, Tensor::from_vec(&d, gx).unwrap());
            }
            Op::Upsample2x { x } => {
                let d = self.dims(*x).to_vec();
                let (c, h, w) = (d[0], d[1], d[2]);
                let (ho, wo) = (h * 2, w * 2);
                let mut gx = vec![S::zero(); c * h * w];
                for ch in 0..c {
                    for y in 0..ho {
                        for xx in 0..wo {
                            gx[ch * h * w + (y / 2) * w + xx / 2] +=
                                gout.data()[ch * ho * wo + y * wo + xx];
                        }
                    }
                }
                acc(grads, *x, Tensor::from_vec(&d, gx).unwrap());
            }
            Op::SumAll { x } => {
                let g = gout.data()[0];
                let d = self.dims(*x).to_vec();
                acc(grads, *x, Tensor::filled(&d, g).unwrap());
            }
        }
    }
}
