use std::collections::{HashMap, HashSet};

use super::{conv1d_out_len, ParamId, ParamSet, Result, Tensor, TensorError};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
        segs_in: Vec<usize>,
        segs_out: Vec<usize>,
        // im2col matrix [c_in * k, sum(segs_out)]
        cols: Vec<f64>,
    },
    Add(Var, Var),
    AddSegments {
        a: Var,
        v: Var,
        segs: Vec<usize>,
    },
    SegmentMean {
        x: Var,
        segs: Vec<usize>,
    },
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Abs(Var),
    Square(Var),
    Mean(Var),
    Sum(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Repeat {
        x: Var,
        durations: Vec<usize>,
    },
    ConcatRows(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Leaf gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Ordered record of differentiable operations.
///
/// Nodes are appended in evaluation order, so every input precedes its
/// consumers and a single reverse sweep visits each node once.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    memo: HashMap<String, Vec<Option<Var>>>,
    param_vars: Vec<(String, ParamId, Var)>,
    frozen: HashSet<String>,
}

const LN_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parameters of `namespace` pulled after this call carry no gradient.
    pub fn freeze(&mut self, namespace: &str) {
        self.frozen.insert(namespace.to_string());
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf that is not backed by a parameter.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf for a parameter; repeated calls return the same node.
    pub fn param(&mut self, set: &ParamSet, id: ParamId) -> Var {
        let ns = set.namespace();
        if let Some(v) = self.memo.get(ns).and_then(|m| m.get(id.0).copied().flatten()) {
            return v;
        }
        let p = set.get(id);
        let rg = !p.frozen && !self.frozen.contains(ns);
        let var = self.push(p.value.clone(), Op::Leaf, rg);
        let slots = self.memo.entry(ns.to_string()).or_default();
        if slots.len() <= id.0 {
            slots.resize(id.0 + 1, None);
        }
        slots[id.0] = Some(var);
        self.param_vars.push((ns.to_string(), id, var));
        var
    }

    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let len = self.value(x).dims2()?.1;
        Ok(self.conv1d_segments(x, w, b, stride, padding, &[len])?.0)
    }

    /// Convolves each column segment of `x` independently, each with its own
    /// zero padding. Returns the output and its segment lengths.
    pub fn conv1d_segments(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
        segs: &[usize],
    ) -> Result<(Var, Vec<usize>)> {
        let (c_in, len) = self.value(x).dims2()?;
        let ws = self.shape(w).to_vec();
        let [c_out, w_in, k] = ws[..] else {
            return Err(TensorError::InvalidShape {
                op: "conv1d",
                detail: format!("weight must be [c_out, c_in, k], got {ws:?}"),
            });
        };
        if w_in != c_in {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d",
                left: self.shape(x).to_vec(),
                right: ws,
            });
        }
        if let Some(b) = b {
            if self.value(b).numel() != c_out {
                return Err(TensorError::ShapeMismatch {
                    op: "conv1d bias",
                    left: ws,
                    right: self.shape(b).to_vec(),
                });
            }
        }
        check_segments("conv1d", segs, len)?;
        let segs_out = segs
            .iter()
            .map(|&l| {
                conv1d_out_len(l, k, stride, padding).ok_or_else(|| TensorError::InvalidShape {
                    op: "conv1d",
                    detail: format!(
                        "kernel {k} longer than padded input {l} + 2*{padding} (stride {stride})"
                    ),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let t_out: usize = segs_out.iter().sum();

        let rows = c_in * k;
        let mut cols = vec![0.0; rows * t_out];
        {
            let xd = self.value(x).data();
            let (mut in_off, mut out_off) = (0, 0);
            for (&l, &lo) in segs.iter().zip(&segs_out) {
                for ci in 0..c_in {
                    let xrow = &xd[ci * len + in_off..ci * len + in_off + l];
                    for j in 0..k {
                        let base = (ci * k + j) * t_out + out_off;
                        let dst = &mut cols[base..base + lo];
                        for (t, d) in dst.iter_mut().enumerate() {
                            let src = (t * stride + j) as isize - padding as isize;
                            if src >= 0 && (src as usize) < l {
                                *d = xrow[src as usize];
                            }
                        }
                    }
                }
                in_off += l;
                out_off += lo;
            }
        }
        let mut out = vec![0.0; c_out * t_out];
        if let Some(b) = b {
            let bd = self.value(b).data();
            for (co, row) in out.chunks_mut(t_out).enumerate() {
                row.fill(bd[co]);
            }
        }
        gemm(
            c_out,
            rows,
            t_out,
            self.value(w).data(),
            (rows as isize, 1),
            &cols,
            (t_out as isize, 1),
            &mut out,
            1.0,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let value = Tensor::new(vec![c_out, t_out], out)?;
        let var = self.push(
            value,
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                padding,
                segs_in: segs.to_vec(),
                segs_out: segs_out.clone(),
                cols,
            },
            rg,
        );
        Ok((var, segs_out))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor {
            shape: va.shape().to_vec(),
            data,
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    /// `a[c, t] + v[c]` for every column `t`.
    pub fn add_broadcast(&mut self, a: Var, v: Var) -> Result<Var> {
        let t = self.value(a).dims2()?.1;
        self.add_segments(a, v, &[t])
    }

    /// Adds column `s` of `v[c, n_segs]` to every column of segment `s` of
    /// `a[c, t]`.
    pub fn add_segments(&mut self, a: Var, v: Var, segs: &[usize]) -> Result<Var> {
        let (c, t) = self.value(a).dims2()?;
        check_segments("add_segments", segs, t)?;
        if self.value(v).numel() != c * segs.len() {
            return Err(TensorError::ShapeMismatch {
                op: "add_segments",
                left: self.shape(a).to_vec(),
                right: self.shape(v).to_vec(),
            });
        }
        let mut out = self.value(a).clone();
        let vd = self.value(v).data();
        let n = segs.len();
        for (ch, row) in out.data.chunks_mut(t).enumerate() {
            let mut off = 0;
            for (s, &l) in segs.iter().enumerate() {
                let add = vd[ch * n + s];
                for x in &mut row[off..off + l] {
                    *x += add;
                }
                off += l;
            }
        }
        let rg = self.rg(a) || self.rg(v);
        Ok(self.push(
            out,
            Op::AddSegments {
                a,
                v,
                segs: segs.to_vec(),
            },
            rg,
        ))
    }

    /// Mean over all elements of each column segment: `[c, t] -> [1, n_segs]`.
    pub fn segment_mean(&mut self, x: Var, segs: &[usize]) -> Result<Var> {
        let (c, t) = self.value(x).dims2()?;
        check_segments("segment_mean", segs, t)?;
        let xd = self.value(x).data();
        let mut sums = vec![0.0; segs.len()];
        for row in xd.chunks(t) {
            let mut off = 0;
            for (s, &l) in segs.iter().enumerate() {
                sums[s] += row[off..off + l].iter().sum::<f64>();
                off += l;
            }
        }
        for (s, &l) in sums.iter_mut().zip(segs) {
            *s /= (c * l) as f64;
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![1, segs.len()], sums)?,
            Op::SegmentMean {
                x,
                segs: segs.to_vec(),
            },
            rg,
        ))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|e| e * c);
        let rg = self.rg(x);
        self.push(v, Op::Scale(x, c), rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let v = self.value(x).map(|e| if e >= 0.0 { e } else { slope * e });
        let rg = self.rg(x);
        self.push(v, Op::LeakyRelu(x, slope), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(v, Op::Sigmoid(x), rg)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::abs);
        let rg = self.rg(x);
        self.push(v, Op::Abs(x), rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e * e);
        let rg = self.rg(x);
        self.push(v, Op::Square(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let m = xv.data().iter().sum::<f64>() / xv.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum::<f64>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Normalizes each column `x[:, t]` over channels, then applies a
    /// per-channel gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (c, t) = self.value(x).dims2()?;
        for p in [gamma, beta] {
            if self.value(p).numel() != c {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    left: self.shape(x).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut xhat = vec![0.0; c * t];
        let mut inv_std = vec![0.0; t];
        let mut out = vec![0.0; c * t];
        for col in 0..t {
            let mean = (0..c).map(|ch| xd[ch * t + col]).sum::<f64>() / c as f64;
            let var = (0..c)
                .map(|ch| {
                    let d = xd[ch * t + col] - mean;
                    d * d
                })
                .sum::<f64>()
                / c as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std[col] = inv;
            for ch in 0..c {
                let h = (xd[ch * t + col] - mean) * inv;
                xhat[ch * t + col] = h;
                out[ch * t + col] = gd[ch] * h + bd[ch];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(vec![c, t], out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Gathers columns of `table[h, v]` by id into `[h, ids.len()]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (h, vocab) = self.value(table).dims2()?;
        if ids.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "embedding",
                detail: "empty id sequence".into(),
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(TensorError::InvalidShape {
                op: "embedding",
                detail: format!("id {bad} outside vocabulary of {vocab}"),
            });
        }
        let td = self.value(table).data();
        let p = ids.len();
        let mut out = vec![0.0; h * p];
        for r in 0..h {
            for (j, &id) in ids.iter().enumerate() {
                out[r * p + j] = td[r * vocab + id];
            }
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(vec![h, p], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Repeats column `m` of `x` `durations[m]` times.
    pub fn repeat_columns(&mut self, x: Var, durations: &[usize]) -> Result<Var> {
        let (h, p) = self.value(x).dims2()?;
        if durations.len() != p {
            return Err(TensorError::InvalidShape {
                op: "repeat_columns",
                detail: format!("{} durations for {p} columns", durations.len()),
            });
        }
        let total: usize = durations.iter().sum();
        if total == 0 {
            return Err(TensorError::InvalidShape {
                op: "repeat_columns",
                detail: "all durations are zero".into(),
            });
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(h * total);
        for r in 0..h {
            for (m, &d) in durations.iter().enumerate() {
                let v = xd[r * p + m];
                out.extend(std::iter::repeat_n(v, d));
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![h, total], out)?,
            Op::Repeat {
                x,
                durations: durations.to_vec(),
            },
            rg,
        ))
    }

    /// Stacks `a[r1, t]` above `b[r2, t]`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ta) = self.value(a).dims2()?;
        let (rb, tb) = self.value(b).dims2()?;
        if ta != tb {
            return Err(TensorError::ShapeMismatch {
                op: "concat_rows",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![ra + rb, ta], data)?, Op::ConcatRows(a, b), rg))
    }

    /// Gradients of a scalar with respect to every differentiable leaf.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        if !self.rg(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                padding,
                segs_in,
                segs_out,
                cols,
            } => {
                let (c_in, len) = self.value(*x).dims2()?;
                let wv = self.value(*w);
                let (c_out, k) = (wv.shape()[0], wv.shape()[2]);
                let t_out = g.shape()[1];
                let rows = c_in * k;
                if self.rg(*w) {
                    let mut dw = vec![0.0; c_out * rows];
                    gemm(
                        c_out,
                        t_out,
                        rows,
                        gd,
                        (t_out as isize, 1),
                        cols,
                        (1, t_out as isize),
                        &mut dw,
                        0.0,
                    );
                    accumulate(grads, *w, Tensor::new(wv.shape().to_vec(), dw)?);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let db: Vec<f64> = gd.chunks(t_out).map(|r| r.iter().sum()).collect();
                        accumulate(grads, *b, Tensor::new(self.shape(*b).to_vec(), db)?);
                    }
                }
                if self.rg(*x) {
                    let mut dcols = vec![0.0; rows * t_out];
                    gemm(
                        rows,
                        c_out,
                        t_out,
                        wv.data(),
                        (1, rows as isize),
                        gd,
                        (t_out as isize, 1),
                        &mut dcols,
                        0.0,
                    );
                    let mut dx = vec![0.0; c_in * len];
                    let (mut in_off, mut out_off) = (0, 0);
                    for (&l, &lo) in segs_in.iter().zip(segs_out) {
                        for ci in 0..c_in {
                            let dxrow = &mut dx[ci * len + in_off..ci * len + in_off + l];
                            for j in 0..k {
                                let base = (ci * k + j) * t_out + out_off;
                                let src = &dcols[base..base + lo];
                                for (t, &d) in src.iter().enumerate() {
                                    let pos = (t * stride + j) as isize - *padding as isize;
                                    if pos >= 0 && (pos as usize) < l {
                                        dxrow[pos as usize] += d;
                                    }
                                }
                            }
                        }
                        in_off += l;
                        out_off += lo;
                    }
                    accumulate(grads, *x, Tensor::new(vec![c_in, len], dx)?);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.rg(v) {
                        accumulate(grads, v, g.clone());
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.rg(*b) {
                    accumulate(grads, *b, g.map(|e| -e));
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, elementwise(g, self.value(*b), |gi, bi| gi * bi));
                }
                if self.rg(*b) {
                    accumulate(grads, *b, elementwise(g, self.value(*a), |gi, ai| gi * ai));
                }
            }
            Op::AddSegments { a, v, segs } => {
                if self.rg(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.rg(*v) {
                    let t = g.shape()[1];
                    let n = segs.len();
                    let mut dv = vec![0.0; self.value(*v).numel()];
                    for (ch, row) in gd.chunks(t).enumerate() {
                        let mut off = 0;
                        for (s, &l) in segs.iter().enumerate() {
                            dv[ch * n + s] = row[off..off + l].iter().sum();
                            off += l;
                        }
                    }
                    accumulate(grads, *v, Tensor::new(self.shape(*v).to_vec(), dv)?);
                }
            }
            Op::SegmentMean { x, segs } => {
                if self.rg(*x) {
                    let (c, t) = self.value(*x).dims2()?;
                    let mut dx = vec![0.0; c * t];
                    for row in dx.chunks_mut(t) {
                        let mut off = 0;
                        for (s, &l) in segs.iter().enumerate() {
                            row[off..off + l].fill(gd[s] / (c * l) as f64);
                            off += l;
                        }
                    }
                    accumulate(grads, *x, Tensor::new(vec![c, t], dx)?);
                }
            }
            Op::Scale(x, c) => {
                if self.rg(*x) {
                    accumulate(grads, *x, g.map(|e| e * c));
                }
            }
            Op::LeakyRelu(x, slope) => {
                if self.rg(*x) {
                    let xv = self.value(*x);
                    accumulate(grads, *x, elementwise(g, xv, |gi, xi| {
                        if xi >= 0.0 {
                            gi
                        } else {
                            slope * gi
                        }
                    }));
                }
            }
            Op::Sigmoid(x) => {
                if self.rg(*x) {
                    accumulate(grads, *x, elementwise(g, &node.value, |gi, s| gi * s * (1.0 - s)));
                }
            }
            Op::Abs(x) => {
                if self.rg(*x) {
                    let xv = self.value(*x);
                    accumulate(grads, *x, elementwise(g, xv, |gi, xi| {
                        if xi > 0.0 {
                            gi
                        } else if xi < 0.0 {
                            -gi
                        } else {
                            0.0
                        }
                    }));
                }
            }
            Op::Square(x) => {
                if self.rg(*x) {
                    let xv = self.value(*x);
                    accumulate(grads, *x, elementwise(g, xv, |gi, xi| 2.0 * xi * gi));
                }
            }
            Op::Mean(x) => {
                if self.rg(*x) {
                    let xv = self.value(*x);
                    let n = xv.numel() as f64;
                    accumulate(grads, *x, Tensor::full(xv.shape(), gd[0] / n));
                }
            }
            Op::Sum(x) => {
                if self.rg(*x) {
                    accumulate(grads, *x, Tensor::full(self.shape(*x), gd[0]));
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (c, t) = g.dims2()?;
                if self.rg(*gamma) {
                    let dg: Vec<f64> = (0..c)
                        .map(|ch| (0..t).map(|j| gd[ch * t + j] * xhat[ch * t + j]).sum())
                        .collect();
                    accumulate(grads, *gamma, Tensor::new(self.shape(*gamma).to_vec(), dg)?);
                }
                if self.rg(*beta) {
                    let db: Vec<f64> = gd.chunks(t).map(|r| r.iter().sum()).collect();
                    accumulate(grads, *beta, Tensor::new(self.shape(*beta).to_vec(), db)?);
                }
                if self.rg(*x) {
                    let gam = self.value(*gamma).data();
                    let mut dx = vec![0.0; c * t];
                    let cf = c as f64;
                    for j in 0..t {
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for ch in 0..c {
                            let d = gd[ch * t + j] * gam[ch];
                            sum_d += d;
                            sum_dx += d * xhat[ch * t + j];
                        }
                        for ch in 0..c {
                            let d = gd[ch * t + j] * gam[ch];
                            dx[ch * t + j] =
                                inv_std[j] / cf * (cf * d - sum_d - xhat[ch * t + j] * sum_dx);
                        }
                    }
                    accumulate(grads, *x, Tensor::new(vec![c, t], dx)?);
                }
            }
            Op::Embedding { table, ids } => {
                if self.rg(*table) {
                    let (h, vocab) = self.value(*table).dims2()?;
                    let p = ids.len();
                    let mut dt = vec![0.0; h * vocab];
                    for r in 0..h {
                        for (j, &id) in ids.iter().enumerate() {
                            dt[r * vocab + id] += gd[r * p + j];
                        }
                    }
                    accumulate(grads, *table, Tensor::new(vec![h, vocab], dt)?);
                }
            }
            Op::Repeat { x, durations } => {
                if self.rg(*x) {
                    let (h, p) = self.value(*x).dims2()?;
                    let total: usize = durations.iter().sum();
                    let mut dx = vec![0.0; h * p];
                    for r in 0..h {
                        let mut col = 0;
                        for (m, &d) in durations.iter().enumerate() {
                            dx[r * p + m] = gd[r * total + col..r * total + col + d].iter().sum();
                            col += d;
                        }
                    }
                    accumulate(grads, *x, Tensor::new(vec![h, p], dx)?);
                }
            }
            Op::ConcatRows(a, b) => {
                let na = self.value(*a).numel();
                if self.rg(*a) {
                    accumulate(
                        grads,
                        *a,
                        Tensor::new(self.shape(*a).to_vec(), gd[..na].to_vec())?,
                    );
                }
                if self.rg(*b) {
                    accumulate(
                        grads,
                        *b,
                        Tensor::new(self.shape(*b).to_vec(), gd[na..].to_vec())?,
                    );
                }
            }
        }
        Ok(())
    }

    /// Zeroes the gradient accumulators of `sets`, then fills them with
    /// d`loss`/d`param`.
    pub fn backward(&self, loss: Var, sets: &mut [&mut ParamSet]) -> Result<()> {
        for s in sets.iter_mut() {
            s.zero_grads();
        }
        self.backward_accumulate(loss, sets)
    }

    /// Like [`Tape::backward`] but adds onto the existing accumulators.
    pub fn backward_accumulate(&self, loss: Var, sets: &mut [&mut ParamSet]) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (ns, id, var) in &self.param_vars {
            let Some(g) = grads.get(*var) else { continue };
            if let Some(set) = sets.iter_mut().find(|s| s.namespace() == ns) {
                set.get_mut(*id).grad.add_assign(g);
            }
        }
        Ok(())
    }
}

fn check_segments(op: &'static str, segs: &[usize], len: usize) -> Result<()> {
    if segs.is_empty() || segs.contains(&0) || segs.iter().sum::<usize>() != len {
        return Err(TensorError::InvalidShape {
            op,
            detail: format!("segments {segs:?} do not tile {len} columns"),
        });
    }
    Ok(())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn elementwise(g: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        shape: g.shape().to_vec(),
        data: g
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| f(a, b))
            .collect(),
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
    match &mut grads[v.0] {
        Some(g) => g.add_assign(&t),
        slot => *slot = Some(t),
    }
}

/// `c = a * b + beta * c` for row-major `c[m, n]`; `a` is `[m, k]` and `b`
/// is `[k, n]`, each addressed through (row, column) strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the asserts above bound every index reachable through the
    // given strides, which describe dense row- or column-major layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn zero_input_conv_outputs_bias() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3, 10]));
        let w = tape.input(Tensor::full(&[2, 3, 3], 0.7));
        let b = tape.input(t(&[2], &[1.5, -0.25]));
        let y = tape.conv1d(x, w, Some(b), 1, 1).unwrap();
        let out = tape.value(y);
        assert_eq!(out.shape(), &[2, 10]);
        assert!(out.data()[..10].iter().all(|&v| v == 1.5));
        assert!(out.data()[10..].iter().all(|&v| v == -0.25));
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3, 10]));
        let w = tape.constant(Tensor::zeros(&[2, 4, 3]));
        let err = tape.conv1d(x, w, None, 1, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[3, 10]") && msg.contains("[2, 4, 3]"), "{msg}");
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut tape = Tape::new();
        let xd: Vec<f64> = (0..14).map(|i| (i as f64 * 0.37).sin()).collect();
        let wd: Vec<f64> = (0..12).map(|i| (i as f64 * 0.91).cos()).collect();
        let x = tape.constant(t(&[2, 7], &xd));
        let w = tape.constant(t(&[2, 2, 3], &wd));
        let y = tape.conv1d(x, w, None, 2, 1).unwrap();
        let out = tape.value(y).clone();
        assert_eq!(out.shape(), &[2, 4]);
        for co in 0..2 {
            for to in 0..4 {
                let mut acc = 0.0;
                for ci in 0..2 {
                    for j in 0..3 {
                        let pos = (to * 2 + j) as isize - 1;
                        if (0..7).contains(&pos) {
                            acc += wd[co * 6 + ci * 3 + j] * xd[ci * 7 + pos as usize];
                        }
                    }
                }
                assert!((out.data()[co * 4 + to] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn activation_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 3.0]));
        let l = tape.leaky_relu(x, 0.2);
        let s = tape.sigmoid(x);
        assert_eq!(tape.value(l).data(), &[-0.2, 0.0, 3.0]);
        assert_eq!(tape.value(s).data()[1], 0.5);
    }

    #[test]
    fn linear_loss_gradient_is_input() {
        let mut set = ParamSet::new("p");
        let w = set.add("w", t(&[4], &[0.1, 0.2, 0.3, 0.4]));
        let unused = set.add("unused", t(&[2], &[1.0, 1.0]));
        let mut tape = Tape::new();
        let wv = tape.param(&set, w);
        let _ = tape.param(&set, unused);
        let x = tape.constant(t(&[4], &[1.0, -2.0, 3.0, 0.5]));
        let prod = tape.mul(wv, x).unwrap();
        let loss = tape.sum(prod);
        tape.backward(loss, &mut [&mut set]).unwrap();
        let g = set.get(w).grad.data();
        for (gi, xi) in g.iter().zip([1.0, -2.0, 3.0, 0.5]) {
            assert!((gi - xi).abs() < 1e-12);
        }
        assert!(set.get(unused).grad.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[2]));
        assert!(matches!(tape.gradients(x), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn backward_zeroes_but_accumulate_adds() {
        let mut set = ParamSet::new("p");
        let w = set.add("w", t(&[1], &[2.0]));
        for _ in 0..2 {
            let mut tape = Tape::new();
            let v = tape.param(&set, w);
            let l = tape.square(v);
            let l = tape.sum(l);
            tape.backward(l, &mut [&mut set]).unwrap();
        }
        assert_eq!(set.get(w).grad.data(), &[4.0]);
        let mut tape = Tape::new();
        let v = tape.param(&set, w);
        let l = tape.sum(v);
        tape.backward_accumulate(l, &mut [&mut set]).unwrap();
        assert_eq!(set.get(w).grad.data(), &[5.0]);
    }

    #[test]
    fn frozen_namespace_gets_no_gradient() {
        let mut set = ParamSet::new("frozen");
        let w = set.add("w", t(&[1], &[2.0]));
        let mut tape = Tape::new();
        tape.freeze("frozen");
        let v = tape.param(&set, w);
        assert!(!tape.requires_grad(v));
        let x = tape.input(t(&[1], &[3.0]));
        let y = tape.add(v, x).unwrap();
        let l = tape.sum(y);
        tape.backward(l, &mut [&mut set]).unwrap();
        assert_eq!(set.get(w).grad.data(), &[0.0]);
    }

    #[test]
    fn repeat_examples() {
        let mut tape = Tape::new();
        let h = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let r = tape.repeat_columns(h, &[2, 3]).unwrap();
        assert_eq!(tape.value(r).data(), &[1.0, 1.0, 2.0, 2.0, 2.0]);
        let r = tape.repeat_columns(h, &[0, 3]).unwrap();
        assert_eq!(tape.value(r).data(), &[2.0, 2.0, 2.0]);
        let r = tape.repeat_columns(h, &[1, 1]).unwrap();
        assert_eq!(tape.value(r).data(), &[1.0, 2.0]);
        assert!(tape.repeat_columns(h, &[0, 0]).is_err());
    }
}
