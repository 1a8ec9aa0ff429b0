//! Reverse-mode tape over a closed set of operations.
//!
//! Every operation evaluates eagerly and records its operands; `backward`
//! walks the tape in reverse and applies the hand-written adjoint of each
//! operation. Nodes that do not depend on a trainable leaf are skipped.

use std::collections::BTreeMap;

use super::{NeuralError, ParameterStore, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Clamp(Var, f64, f64),
    Conv2d { x: Var, k: Var, b: Var },
    DepthwiseConv2d { x: Var, k: Var },
    AvgPool { x: Var, factor: usize },
    UpsampleConv { x: Var, k: Var, b: Var, factor: usize },
    Reshape(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    MeanRows(Var),
    ConcatCols(Vec<Var>),
    StackRows(Vec<Var>),
    RepeatRows(Var),
    GatherRows(Var, Vec<usize>),
    Pick(Var, usize),
    NormalizeRows(Var, f64),
    Focal { pred: Var, target: Tensor, gamma: f64, alpha: f64, eps: f64 },
    GaussianLogDensity { sample: Tensor, mean: Var, log_std: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    needs_grad: bool,
    param: Option<String>,
}

/// Splits a shape into `(rows, cols)` with `cols` the trailing axis.
fn mat_dims(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        n => (shape[..n - 1].iter().product(), shape[n - 1]),
    }
}

fn shape_err(op: &'static str, detail: String) -> NeuralError {
    NeuralError::Shape { op, detail }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, grad: None, op, needs_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Constant input; no gradient is tracked through it.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Input whose gradient is tracked (used by gradient checks).
    pub fn input_with_grad(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Loads a named parameter. Frozen parameters enter as constants.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var, NeuralError> {
        let value = store
            .get(name)
            .ok_or_else(|| NeuralError::MissingParameter(name.to_string()))?
            .clone();
        let trainable = store.is_trainable(name);
        let v = self.push(value, Op::Leaf, trainable);
        if trainable {
            self.nodes[v.0].param = Some(name.to_string());
        }
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    // ------------------------------------------------------------------
    // dense algebra

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NeuralError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ad[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                for (o, bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), ng))
    }

    /// Adds a bias vector along the trailing axis.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var, NeuralError> {
        let (_, cols) = mat_dims(self.shape(a));
        if self.nodes[b.0].value.len() != cols {
            return Err(shape_err("add_bias", format!("{:?} + {:?}", self.shape(a), self.shape(b))));
        }
        let bd = self.data(b).to_vec();
        let mut out = self.nodes[a.0].value.clone();
        for chunk in out.data_mut().chunks_mut(cols) {
            for (o, bv) in chunk.iter_mut().zip(&bd) {
                *o += bv;
            }
        }
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::AddBias(a, b), ng))
    }

    fn binary_same(&self, op: &'static str, a: Var, b: Var) -> Result<(), NeuralError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn map2(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let data: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| f(*x, *y)).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(&[a, b]);
        self.push(Tensor::new(shape, data).expect("same shape"), op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NeuralError> {
        self.binary_same("add", a, b)?;
        Ok(self.map2(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NeuralError> {
        self.binary_same("sub", a, b)?;
        Ok(self.map2(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NeuralError> {
        self.binary_same("mul", a, b)?;
        Ok(self.map2(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    fn map1(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let data: Vec<f64> = self.data(a).iter().map(|x| f(*x)).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(&[a]);
        self.push(Tensor::new(shape, data).expect("same shape"), op, ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map1(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.map1(a, Op::Offset(a), |x| x + c)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map1(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map1(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map1(a, Op::Sigmoid(a), logistic)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map1(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var, NeuralError> {
        if self.data(a).iter().any(|x| *x <= 0.0) {
            return Err(NeuralError::Domain { op: "log", detail: "non-positive input".into() });
        }
        Ok(self.map1(a, Op::Log(a), f64::ln))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.map1(a, Op::Abs(a), f64::abs)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.map1(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    // ------------------------------------------------------------------
    // spatial ops on [height, width, channels] maps

    /// Square-kernel convolution, stride 1, zero "same" padding.
    /// `k` is `[kh, kw, c_in, c_out]`, `b` is `[c_out]`.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Var) -> Result<Var, NeuralError> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if sx.len() != 3 || sk.len() != 4 || sk[0] != sk[1] || sk[0] % 2 == 0 || sk[2] != sx[2] {
            return Err(shape_err("conv2d", format!("input {:?} kernel {:?}", sx, sk)));
        }
        if self.nodes[b.0].value.len() != sk[3] {
            return Err(shape_err("conv2d", format!("bias {:?} for kernel {:?}", self.shape(b), sk)));
        }
        let (h, w, cin) = (sx[0], sx[1], sx[2]);
        let (ks, cout) = (sk[0], sk[3]);
        let pad = ks / 2;
        let (xd, kd, bd) = (self.data(x), self.data(k), self.data(b));
        let mut out = vec![0.0; h * w * cout];
        for oy in 0..h {
            for ox in 0..w {
                let o = &mut out[(oy * w + ox) * cout..(oy * w + ox + 1) * cout];
                o.copy_from_slice(bd);
                for dy in 0..ks {
                    let iy = oy as isize + dy as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for dx in 0..ks {
                        let ix = ox as isize + dx as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let xin = &xd[(iy as usize * w + ix as usize) * cin..][..cin];
                        let kbase = (dy * ks + dx) * cin * cout;
                        for (ci, &v) in xin.iter().enumerate() {
                            if v == 0.0 {
                                continue;
                            }
                            let krow = &kd[kbase + ci * cout..kbase + (ci + 1) * cout];
                            for (ov, kv) in o.iter_mut().zip(krow) {
                                *ov += v * kv;
                            }
                        }
                    }
                }
            }
        }
        let ng = self.ng(&[x, k, b]);
        Ok(self.push(Tensor::new(vec![h, w, cout], out)?, Op::Conv2d { x, k, b }, ng))
    }

    /// Per-channel square-kernel convolution; `k` is `[kh, kw, c]`.
    pub fn depthwise_conv2d(&mut self, x: Var, k: Var) -> Result<Var, NeuralError> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if sx.len() != 3 || sk.len() != 3 || sk[0] != sk[1] || sk[0] % 2 == 0 || sk[2] != sx[2] {
            return Err(shape_err("depthwise_conv2d", format!("input {:?} kernel {:?}", sx, sk)));
        }
        let (h, w, c) = (sx[0], sx[1], sx[2]);
        let ks = sk[0];
        let pad = ks / 2;
        let (xd, kd) = (self.data(x), self.data(k));
        let mut out = vec![0.0; h * w * c];
        for oy in 0..h {
            for ox in 0..w {
                let o = &mut out[(oy * w + ox) * c..(oy * w + ox + 1) * c];
                for dy in 0..ks {
                    let iy = oy as isize + dy as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for dx in 0..ks {
                        let ix = ox as isize + dx as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let xin = &xd[(iy as usize * w + ix as usize) * c..][..c];
                        let krow = &kd[(dy * ks + dx) * c..][..c];
                        for ((ov, xv), kv) in o.iter_mut().zip(xin).zip(krow) {
                            *ov += xv * kv;
                        }
                    }
                }
            }
        }
        let ng = self.ng(&[x, k]);
        Ok(self.push(Tensor::new(vec![h, w, c], out)?, Op::DepthwiseConv2d { x, k }, ng))
    }

    pub fn avg_pool(&mut self, x: Var, factor: usize) -> Result<Var, NeuralError> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || factor == 0 || sx[0] % factor != 0 || sx[1] % factor != 0 {
            return Err(shape_err("avg_pool", format!("input {:?} factor {}", sx, factor)));
        }
        let (h, w, c) = (sx[0], sx[1], sx[2]);
        let (oh, ow) = (h / factor, w / factor);
        let norm = 1.0 / (factor * factor) as f64;
        let xd = self.data(x);
        let mut out = vec![0.0; oh * ow * c];
        for y in 0..h {
            for xx in 0..w {
                let o = &mut out[((y / factor) * ow + xx / factor) * c..][..c];
                let xin = &xd[(y * w + xx) * c..][..c];
                for (ov, xv) in o.iter_mut().zip(xin) {
                    *ov += xv * norm;
                }
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::new(vec![oh, ow, c], out)?, Op::AvgPool { x, factor }, ng))
    }

    /// Transposed convolution with kernel size equal to the stride `factor`;
    /// `k` is `[c_in, factor, factor, c_out]`, `b` is `[c_out]`.
    pub fn upsample_conv(&mut self, x: Var, k: Var, b: Var, factor: usize) -> Result<Var, NeuralError> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if sx.len() != 3 || sk.len() != 4 || sk[0] != sx[2] || sk[1] != factor || sk[2] != factor {
            return Err(shape_err("upsample_conv", format!("input {:?} kernel {:?}", sx, sk)));
        }
        if self.nodes[b.0].value.len() != sk[3] {
            return Err(shape_err("upsample_conv", format!("bias {:?}", self.shape(b))));
        }
        let (h, w, cin) = (sx[0], sx[1], sx[2]);
        let cout = sk[3];
        let (oh, ow) = (h * factor, w * factor);
        let (xd, kd, bd) = (self.data(x), self.data(k), self.data(b));
        let mut out = vec![0.0; oh * ow * cout];
        for chunk in out.chunks_mut(cout) {
            chunk.copy_from_slice(bd);
        }
        for y in 0..h {
            for xx in 0..w {
                let xin = &xd[(y * w + xx) * cin..][..cin];
                for i in 0..factor {
                    for j in 0..factor {
                        let oy = y * factor + i;
                        let ox = xx * factor + j;
                        let o = &mut out[(oy * ow + ox) * cout..][..cout];
                        for (ci, &v) in xin.iter().enumerate() {
                            if v == 0.0 {
                                continue;
                            }
                            let krow = &kd[((ci * factor + i) * factor + j) * cout..][..cout];
                            for (ov, kv) in o.iter_mut().zip(krow) {
                                *ov += v * kv;
                            }
                        }
                    }
                }
            }
        }
        let ng = self.ng(&[x, k, b]);
        Ok(self.push(Tensor::new(vec![oh, ow, cout], out)?, Op::UpsampleConv { x, k, b, factor }, ng))
    }

    // ------------------------------------------------------------------
    // shape and reduction ops

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, NeuralError> {
        let v = self.nodes[a.0].value.clone().reshaped(shape.to_vec())?;
        let ng = self.ng(&[a]);
        Ok(self.push(v, Op::Reshape(a), ng))
    }

    /// Softmax along the trailing axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (_, cols) = mat_dims(self.shape(a));
        let mut out = self.nodes[a.0].value.clone();
        for row in out.data_mut().chunks_mut(cols) {
            softmax_in_place(row);
        }
        let ng = self.ng(&[a]);
        self.push(out, Op::Softmax(a), ng)
    }

    /// Log-softmax along the trailing axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let (_, cols) = mat_dims(self.shape(a));
        let mut out = self.nodes[a.0].value.clone();
        for row in out.data_mut().chunks_mut(cols) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let ng = self.ng(&[a]);
        self.push(out, Op::LogSoftmax(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.data(a);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    /// `[rows, cols] -> [rows, 1]`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let (rows, cols) = mat_dims(self.shape(a));
        let out: Vec<f64> = self.data(a).chunks(cols).map(|r| r.iter().sum()).collect();
        let ng = self.ng(&[a]);
        self.push(Tensor::new(vec![rows, 1], out).expect("rows"), Op::RowSum(a), ng)
    }

    /// Mean over all leading axes: `[.., cols] -> [1, cols]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (rows, cols) = mat_dims(self.shape(a));
        let mut out = vec![0.0; cols];
        for r in self.data(a).chunks(cols) {
            for (o, v) in out.iter_mut().zip(r) {
                *o += v;
            }
        }
        for o in out.iter_mut() {
            *o /= rows as f64;
        }
        let ng = self.ng(&[a]);
        self.push(Tensor::row(out), Op::MeanRows(a), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NeuralError> {
        let rows = mat_dims(self.shape(parts[0])).0;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = mat_dims(self.shape(*p));
            if r != rows {
                let shapes: Vec<_> = parts.iter().map(|p| self.shape(*p).to_vec()).collect();
                return Err(shape_err("concat_cols", format!("{:?}", shapes)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (p, &wdt) in parts.iter().zip(&widths) {
            let d = self.data(*p);
            for r in 0..rows {
                out[r * total + off..r * total + off + wdt].copy_from_slice(&d[r * wdt..(r + 1) * wdt]);
            }
            off += wdt;
        }
        let ng = self.ng(parts);
        Ok(self.push(Tensor::new(vec![rows, total], out)?, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Concatenates matrices along the leading axis; all parts must share a width.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var, NeuralError> {
        if parts.is_empty() {
            return Err(shape_err("stack_rows", "no parts".to_string()));
        }
        let cols = mat_dims(self.shape(parts[0])).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for p in parts {
            let (r, c) = mat_dims(self.shape(*p));
            if c != cols {
                let shapes: Vec<_> = parts.iter().map(|p| self.shape(*p).to_vec()).collect();
                return Err(shape_err("stack_rows", format!("{:?}", shapes)));
            }
            out.extend_from_slice(self.data(*p));
            rows += r;
        }
        let ng = self.ng(parts);
        Ok(self.push(Tensor::new(vec![rows, cols], out)?, Op::StackRows(parts.to_vec()), ng))
    }

    /// `[1, cols] -> [rows, cols]`.
    pub fn repeat_rows(&mut self, a: Var, rows: usize) -> Result<Var, NeuralError> {
        let (r, cols) = mat_dims(self.shape(a));
        if r != 1 {
            return Err(shape_err("repeat_rows", format!("{:?}", self.shape(a))));
        }
        let src = self.data(a).to_vec();
        let mut out = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            out.extend_from_slice(&src);
        }
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor::new(vec![rows, cols], out)?, Op::RepeatRows(a), ng))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var, NeuralError> {
        let (rows, cols) = mat_dims(self.shape(a));
        if let Some(bad) = idx.iter().find(|i| **i >= rows) {
            return Err(shape_err("gather_rows", format!("row {} of {:?}", bad, self.shape(a))));
        }
        let d = self.data(a);
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            out.extend_from_slice(&d[i * cols..(i + 1) * cols]);
        }
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor::new(vec![idx.len(), cols], out)?, Op::GatherRows(a, idx.to_vec()), ng))
    }

    /// Single element by flat index, as a scalar.
    pub fn pick(&mut self, a: Var, index: usize) -> Result<Var, NeuralError> {
        let v = *self
            .data(a)
            .get(index)
            .ok_or_else(|| shape_err("pick", format!("index {} of {:?}", index, self.shape(a))))?;
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor::scalar(v), Op::Pick(a, index), ng))
    }

    /// Row-wise `x / (||x|| + eps)`.
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let (_, cols) = mat_dims(self.shape(a));
        let mut out = self.nodes[a.0].value.clone();
        for row in out.data_mut().chunks_mut(cols) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in row.iter_mut() {
                *v /= n + eps;
            }
        }
        let ng = self.ng(&[a]);
        self.push(out, Op::NormalizeRows(a, eps), ng)
    }

    // ------------------------------------------------------------------
    // fused losses

    /// Mean binary focal loss over all cells of `pred` (probabilities).
    pub fn focal(&mut self, pred: Var, target: &Tensor, gamma: f64, alpha: f64, eps: f64) -> Result<Var, NeuralError> {
        if self.shape(pred) != target.shape() {
            return Err(shape_err("focal", format!("{:?} vs {:?}", self.shape(pred), target.shape())));
        }
        let p = self.data(pred);
        let mut total = 0.0;
        for (pv, tv) in p.iter().zip(target.data()) {
            total += focal_term(*pv, *tv, gamma, alpha, eps);
        }
        let loss = total / p.len() as f64;
        let ng = self.ng(&[pred]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Focal { pred, target: target.clone(), gamma, alpha, eps },
            ng,
        ))
    }

    /// Log-density of `sample` under a diagonal Gaussian `N(mean, exp(log_std)^2)`.
    pub fn gaussian_log_density(&mut self, sample: &Tensor, mean: Var, log_std: Var) -> Result<Var, NeuralError> {
        let n = sample.len();
        if self.nodes[mean.0].value.len() != n || self.nodes[log_std.0].value.len() != n {
            return Err(shape_err(
                "gaussian_log_density",
                format!("sample {:?} mean {:?} log_std {:?}", sample.shape(), self.shape(mean), self.shape(log_std)),
            ));
        }
        let lp = gaussian_log_density(sample.data(), self.data(mean), self.data(log_std));
        let ng = self.ng(&[mean, log_std]);
        Ok(self.push(
            Tensor::scalar(lp),
            Op::GaussianLogDensity { sample: sample.clone(), mean, log_std },
            ng,
        ))
    }

    // ------------------------------------------------------------------
    // reverse pass

    /// Back-propagates from a scalar node, filling gradient buffers.
    pub fn backward(&mut self, loss: Var) -> Result<(), NeuralError> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(shape_err("backward", format!("non-scalar root {:?}", self.shape(loss))));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[loss.0].grad = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else { continue };
            self.propagate(i, &g);
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    /// Gradients of every trainable parameter touched by the last backward pass.
    pub fn param_grads(&self) -> BTreeMap<String, Tensor> {
        let mut out: BTreeMap<String, Tensor> = BTreeMap::new();
        for n in &self.nodes {
            if let (Some(name), Some(g)) = (&n.param, &n.grad) {
                match out.get_mut(name) {
                    Some(acc) => acc.add_assign(g),
                    None => {
                        out.insert(name.clone(), g.clone());
                    }
                }
            }
        }
        out
    }

    fn accum(&mut self, v: Var, delta: Vec<f64>) {
        let node = &mut self.nodes[v.0];
        if !node.needs_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta) {
                    *a += b;
                }
            }
            None => {
                node.grad = Some(Tensor::new(node.value.shape().to_vec(), delta).expect("grad shape"));
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&mut self, i: usize, g: &Tensor) {
        let gd = g.data();
        // Operands always precede node `i`, so moving its value and op out
        // while the adjoint runs cannot alias them.
        let out = std::mem::take(&mut self.nodes[i].value);
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.wants(*a) {
                    let bd = self.data(*b);
                    let mut ga = vec![0.0; m * k];
                    for r in 0..m {
                        let grow = &gd[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            ga[r * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    self.accum(*a, ga);
                }
                if self.wants(*b) {
                    let ad = self.data(*a);
                    let mut gb = vec![0.0; k * n];
                    for r in 0..m {
                        let grow = &gd[r * n..(r + 1) * n];
                        for p in 0..k {
                            let av = ad[r * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (o, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += av * gv;
                            }
                        }
                    }
                    self.accum(*b, gb);
                }
            }
            Op::AddBias(a, b) => {
                let cols = self.nodes[b.0].value.len();
                if self.wants(*b) {
                    let mut gb = vec![0.0; cols];
                    for chunk in gd.chunks(cols) {
                        for (o, v) in gb.iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                    self.accum(*b, gb);
                }
                self.accum(*a, gd.to_vec());
            }
            Op::Add(a, b) => {
                self.accum(*a, gd.to_vec());
                self.accum(*b, gd.to_vec());
            }
            Op::Sub(a, b) => {
                self.accum(*a, gd.to_vec());
                self.accum(*b, gd.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let d: Vec<f64> = gd.iter().zip(self.data(*b)).map(|(x, y)| x * y).collect();
                    self.accum(*a, d);
                }
                if self.wants(*b) {
                    let d: Vec<f64> = gd.iter().zip(self.data(*a)).map(|(x, y)| x * y).collect();
                    self.accum(*b, d);
                }
            }
            Op::Scale(a, s) => {
                let d = gd.iter().map(|v| v * s).collect();
                self.accum(*a, d);
            }
            Op::Offset(a) => self.accum(*a, gd.to_vec()),
            Op::Relu(a) => {
                let d = gd.iter().zip(self.data(*a)).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect();
                self.accum(*a, d);
            }
            Op::Tanh(a) => {
                let d = gd.iter().zip(out.data()).map(|(g, y)| g * (1.0 - y * y)).collect();
                self.accum(*a, d);
            }
            Op::Sigmoid(a) => {
                let d = gd.iter().zip(out.data()).map(|(g, y)| g * y * (1.0 - y)).collect();
                self.accum(*a, d);
            }
            Op::Exp(a) => {
                let d = gd.iter().zip(out.data()).map(|(g, y)| g * y).collect();
                self.accum(*a, d);
            }
            Op::Log(a) => {
                let d = gd.iter().zip(self.data(*a)).map(|(g, x)| g / x).collect();
                self.accum(*a, d);
            }
            Op::Abs(a) => {
                let d = gd.iter().zip(self.data(*a)).map(|(g, x)| if *x > 0.0 { *g } else if *x < 0.0 { -g } else { 0.0 }).collect();
                self.accum(*a, d);
            }
            Op::Clamp(a, lo, hi) => {
                let d = gd
                    .iter()
                    .zip(self.data(*a))
                    .map(|(g, x)| if *x >= *lo && *x <= *hi { *g } else { 0.0 })
                    .collect();
                self.accum(*a, d);
            }
            Op::Conv2d { x, k, b } => self.conv2d_backward(*x, *k, *b, gd),
            Op::DepthwiseConv2d { x, k } => self.depthwise_backward(*x, *k, gd),
            Op::AvgPool { x, factor } => {
                let sx = self.shape(*x).to_vec();
                let (h, w, c) = (sx[0], sx[1], sx[2]);
                let ow = w / factor;
                let norm = 1.0 / (factor * factor) as f64;
                let mut gx = vec![0.0; h * w * c];
                for y in 0..h {
                    for xx in 0..w {
                        let src = &gd[((y / factor) * ow + xx / factor) * c..][..c];
                        for (o, v) in gx[(y * w + xx) * c..][..c].iter_mut().zip(src) {
                            *o = v * norm;
                        }
                    }
                }
                self.accum(*x, gx);
            }
            Op::UpsampleConv { x, k, b, factor } => self.upsample_backward(*x, *k, *b, *factor, gd),
            Op::Reshape(a) => self.accum(*a, gd.to_vec()),
            Op::Softmax(a) => {
                let (_, cols) = mat_dims(out.shape());
                let mut d = vec![0.0; gd.len()];
                for ((dr, gr), yr) in d.chunks_mut(cols).zip(gd.chunks(cols)).zip(out.data().chunks(cols)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    for ((o, g), y) in dr.iter_mut().zip(gr).zip(yr) {
                        *o = y * (g - dot);
                    }
                }
                self.accum(*a, d);
            }
            Op::LogSoftmax(a) => {
                let (_, cols) = mat_dims(out.shape());
                let mut d = vec![0.0; gd.len()];
                for ((dr, gr), yr) in d.chunks_mut(cols).zip(gd.chunks(cols)).zip(out.data().chunks(cols)) {
                    let gs: f64 = gr.iter().sum();
                    for ((o, g), y) in dr.iter_mut().zip(gr).zip(yr) {
                        *o = g - y.exp() * gs;
                    }
                }
                self.accum(*a, d);
            }
            Op::Sum(a) => {
                let n = self.nodes[a.0].value.len();
                self.accum(*a, vec![gd[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.len();
                self.accum(*a, vec![gd[0] / n as f64; n]);
            }
            Op::RowSum(a) => {
                let (rows, cols) = mat_dims(self.shape(*a));
                let mut d = Vec::with_capacity(rows * cols);
                for &v in gd.iter().take(rows) {
                    d.extend(std::iter::repeat(v).take(cols));
                }
                self.accum(*a, d);
            }
            Op::MeanRows(a) => {
                let (rows, cols) = mat_dims(self.shape(*a));
                let mut d = Vec::with_capacity(rows * cols);
                for _ in 0..rows {
                    d.extend(gd.iter().map(|v| v / rows as f64));
                }
                self.accum(*a, d);
            }
            Op::ConcatCols(parts) => {
                let total = gd.len() / mat_dims(out.shape()).0;
                let rows = mat_dims(out.shape()).0;
                let mut off = 0;
                for p in parts {
                    let wdt = mat_dims(self.shape(*p)).1;
                    if self.wants(*p) {
                        let mut d = Vec::with_capacity(rows * wdt);
                        for r in 0..rows {
                            d.extend_from_slice(&gd[r * total + off..r * total + off + wdt]);
                        }
                        self.accum(*p, d);
                    }
                    off += wdt;
                }
            }
            Op::StackRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.nodes[p.0].value.len();
                    if self.wants(*p) {
                        self.accum(*p, gd[off..off + n].to_vec());
                    }
                    off += n;
                }
            }
            Op::RepeatRows(a) => {
                let cols = self.nodes[a.0].value.len();
                let mut d = vec![0.0; cols];
                for r in gd.chunks(cols) {
                    for (o, v) in d.iter_mut().zip(r) {
                        *o += v;
                    }
                }
                self.accum(*a, d);
            }
            Op::GatherRows(a, idx) => {
                let (rows, cols) = mat_dims(self.shape(*a));
                let mut d = vec![0.0; rows * cols];
                for (k, &i) in idx.iter().enumerate() {
                    for (o, v) in d[i * cols..(i + 1) * cols].iter_mut().zip(&gd[k * cols..(k + 1) * cols]) {
                        *o += v;
                    }
                }
                self.accum(*a, d);
            }
            Op::Pick(a, index) => {
                let mut d = vec![0.0; self.nodes[a.0].value.len()];
                d[*index] = gd[0];
                self.accum(*a, d);
            }
            Op::NormalizeRows(a, eps) => {
                let (_, cols) = mat_dims(out.shape());
                let xd = self.data(*a);
                let mut d = vec![0.0; xd.len()];
                for ((dr, gr), xr) in d.chunks_mut(cols).zip(gd.chunks(cols)).zip(xd.chunks(cols)) {
                    let n = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let den = n + eps;
                    let gx: f64 = gr.iter().zip(xr).map(|(g, x)| g * x).sum();
                    let corr = if n > 0.0 { gx / (n * den * den) } else { 0.0 };
                    for ((o, g), x) in dr.iter_mut().zip(gr).zip(xr) {
                        *o = g / den - x * corr;
                    }
                }
                self.accum(*a, d);
            }
            Op::Focal { pred, target, gamma, alpha, eps } => {
                let p = self.data(*pred);
                let scale = gd[0] / p.len() as f64;
                let d = p
                    .iter()
                    .zip(target.data())
                    .map(|(pv, tv)| scale * focal_grad(*pv, *tv, *gamma, *alpha, *eps))
                    .collect();
                self.accum(*pred, d);
            }
            Op::GaussianLogDensity { sample, mean, log_std } => {
                let (md, sd) = (self.data(*mean).to_vec(), self.data(*log_std).to_vec());
                let mut gm = Vec::with_capacity(md.len());
                let mut gs = Vec::with_capacity(md.len());
                for ((x, m), s) in sample.data().iter().zip(&md).zip(&sd) {
                    let inv_var = (-2.0 * s).exp();
                    let z2 = (x - m) * (x - m) * inv_var;
                    gm.push(gd[0] * (x - m) * inv_var);
                    gs.push(gd[0] * (z2 - 1.0));
                }
                self.accum(*mean, gm);
                self.accum(*log_std, gs);
            }
        }
        self.nodes[i].op = op;
        self.nodes[i].value = out;
    }

    fn conv2d_backward(&mut self, x: Var, k: Var, b: Var, gd: &[f64]) {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        let (h, w, cin) = (sx[0], sx[1], sx[2]);
        let (ks, cout) = (sk[0], sk[3]);
        let pad = ks / 2;
        if self.wants(b) {
            let mut gb = vec![0.0; cout];
            for chunk in gd.chunks(cout) {
                for (o, v) in gb.iter_mut().zip(chunk) {
                    *o += v;
                }
            }
            self.accum(b, gb);
        }
        let want_x = self.wants(x);
        let want_k = self.wants(k);
        let (xd, kd) = (self.data(x), self.data(k));
        let mut gx = if want_x { vec![0.0; h * w * cin] } else { Vec::new() };
        let mut gk = if want_k { vec![0.0; ks * ks * cin * cout] } else { Vec::new() };
        for oy in 0..h {
            for ox in 0..w {
                let go = &gd[(oy * w + ox) * cout..][..cout];
                for dy in 0..ks {
                    let iy = oy as isize + dy as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for dx in 0..ks {
                        let ix = ox as isize + dx as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let ibase = (iy as usize * w + ix as usize) * cin;
                        let kbase = (dy * ks + dx) * cin * cout;
                        for ci in 0..cin {
                            let krange = kbase + ci * cout..kbase + (ci + 1) * cout;
                            if want_x {
                                let krow = &kd[krange.clone()];
                                gx[ibase + ci] += go.iter().zip(krow).map(|(g, kv)| g * kv).sum::<f64>();
                            }
                            if want_k {
                                let v = xd[ibase + ci];
                                if v != 0.0 {
                                    for (o, g) in gk[krange].iter_mut().zip(go) {
                                        *o += v * g;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        if want_x {
            self.accum(x, gx);
        }
        if want_k {
            self.accum(k, gk);
        }
    }

    fn depthwise_backward(&mut self, x: Var, k: Var, gd: &[f64]) {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        let (h, w, c) = (sx[0], sx[1], sx[2]);
        let ks = sk[0];
        let pad = ks / 2;
        let want_x = self.wants(x);
        let want_k = self.wants(k);
        let (xd, kd) = (self.data(x), self.data(k));
        let mut gx = if want_x { vec![0.0; h * w * c] } else { Vec::new() };
        let mut gk = if want_k { vec![0.0; ks * ks * c] } else { Vec::new() };
        for oy in 0..h {
            for ox in 0..w {
                let go = &gd[(oy * w + ox) * c..][..c];
                for dy in 0..ks {
                    let iy = oy as isize + dy as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for dx in 0..ks {
                        let ix = ox as isize + dx as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let ibase = (iy as usize * w + ix as usize) * c;
                        let kbase = (dy * ks + dx) * c;
                        for ch in 0..c {
                            if want_x {
                                gx[ibase + ch] += go[ch] * kd[kbase + ch];
                            }
                            if want_k {
                                gk[kbase + ch] += go[ch] * xd[ibase + ch];
                            }
                        }
                    }
                }
            }
        }
        if want_x {
            self.accum(x, gx);
        }
        if want_k {
            self.accum(k, gk);
        }
    }

    fn upsample_backward(&mut self, x: Var, k: Var, b: Var, factor: usize, gd: &[f64]) {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        let (h, w, cin) = (sx[0], sx[1], sx[2]);
        let cout = sk[3];
        let ow = w * factor;
        if self.wants(b) {
            let mut gb = vec![0.0; cout];
            for chunk in gd.chunks(cout) {
                for (o, v) in gb.iter_mut().zip(chunk) {
                    *o += v;
                }
            }
            self.accum(b, gb);
        }
        let want_x = self.wants(x);
        let want_k = self.wants(k);
        let (xd, kd) = (self.data(x), self.data(k));
        let mut gx = if want_x { vec![0.0; h * w * cin] } else { Vec::new() };
        let mut gk = if want_k { vec![0.0; cin * factor * factor * cout] } else { Vec::new() };
        for y in 0..h {
            for xx in 0..w {
                let ibase = (y * w + xx) * cin;
                for i in 0..factor {
                    for j in 0..factor {
                        let go = &gd[((y * factor + i) * ow + xx * factor + j) * cout..][..cout];
                        for ci in 0..cin {
                            let kr = ((ci * factor + i) * factor + j) * cout;
                            if want_x {
                                gx[ibase + ci] += go.iter().zip(&kd[kr..kr + cout]).map(|(g, kv)| g * kv).sum::<f64>();
                            }
                            if want_k {
                                let v = xd[ibase + ci];
                                if v != 0.0 {
                                    for (o, g) in gk[kr..kr + cout].iter_mut().zip(go) {
                                        *o += v * g;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        if want_x {
            self.accum(x, gx);
        }
        if want_k {
            self.accum(k, gk);
        }
    }
}

pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

/// Binary focal term for one cell: `-a_t (1 - p_t)^gamma log p_t`, with the
/// target acting as a soft mixture of the positive and negative branch.
pub fn focal_term(p: f64, t: f64, gamma: f64, alpha: f64, eps: f64) -> f64 {
    let p = p.clamp(eps, 1.0 - eps);
    let pos = -alpha * (1.0 - p).powf(gamma) * p.ln();
    let neg = -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln();
    t * pos + (1.0 - t) * neg
}

fn focal_grad(p: f64, t: f64, gamma: f64, alpha: f64, eps: f64) -> f64 {
    if p < eps || p > 1.0 - eps {
        return 0.0;
    }
    let q = 1.0 - p;
    let dpos = -alpha * (-gamma * q.powf(gamma - 1.0) * p.ln() + q.powf(gamma) / p);
    let dneg = -(1.0 - alpha) * (gamma * p.powf(gamma - 1.0) * q.ln() - p.powf(gamma) / q);
    t * dpos + (1.0 - t) * dneg
}

pub fn gaussian_log_density(sample: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    sample
        .iter()
        .zip(mean)
        .zip(log_std)
        .map(|((x, m), s)| {
            let z = (x - m) * (-s).exp();
            -0.5 * z * z - s - half_log_2pi
        })
        .sum()
}
