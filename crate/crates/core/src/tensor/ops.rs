//! Primitive operations: forward kernels plus the exact vector-Jacobian
//! product for each. Convolution uses same padding with zero fill and
//! stride 1; pooling is 2x2/stride-2 with ties broken by the first
//! occurrence in row-major window scan; upsampling is nearest-neighbor
//! by factor 2.

use super::{shape_string, strides, Result, Tensor, TensorError};

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Add,
    Sub,
    Mul,
    Matmul,
    Conv2d,
    MaxPool2d,
    NearestUpsample2d,
    Concat { axis: usize },
    Sigmoid,
    Tanh,
    Relu,
    Softmax { axis: usize },
    LayerNorm { eps: f64 },
    Mean { axes: Vec<usize> },
    Sum { axes: Vec<usize> },
    Square,
    Sqrt,
    Log { floor: f64 },
    PowScalar { exponent: f64 },
    Broadcast { shape: Vec<usize> },
    Reshape { shape: Vec<usize> },
    Transpose { perm: Vec<usize> },
    Slice { starts: Vec<usize>, ends: Vec<usize> },
    GatherRows { indices: Vec<usize> },
}

/// Extra forward-pass state kept for the backward pass.
#[derive(Clone, Debug)]
pub enum Saved {
    None,
    /// Flat input index of the winning element per output element.
    ArgIndices(Vec<usize>),
    /// Per-lane 1/sqrt(var + eps) for layer normalization.
    Moments { inv_std: Vec<f64> },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Matmul => "matmul",
            Op::Conv2d => "conv2d",
            Op::MaxPool2d => "max_pool2d",
            Op::NearestUpsample2d => "nearest_upsample2d",
            Op::Concat { .. } => "concat",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Relu => "relu",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Mean { .. } => "mean",
            Op::Sum { .. } => "sum",
            Op::Square => "square",
            Op::Sqrt => "sqrt",
            Op::Log { .. } => "log",
            Op::PowScalar { .. } => "pow_scalar",
            Op::Broadcast { .. } => "broadcast",
            Op::Reshape { .. } => "reshape",
            Op::Transpose { .. } => "transpose",
            Op::Slice { .. } => "slice",
            Op::GatherRows { .. } => "gather_rows",
        }
    }

    fn arity_error(&self, inputs: &[&Tensor]) -> TensorError {
        TensorError::ShapeMismatch {
            op: self.name(),
            expected: "different input count".into(),
            actual: format!("{} inputs", inputs.len()),
        }
    }

    pub(crate) fn forward(&self, inputs: &[&Tensor]) -> Result<(Tensor, Saved)> {
        match self {
            Op::Add | Op::Sub | Op::Mul => {
                let [a, b] = two(inputs).ok_or_else(|| self.arity_error(inputs))?;
                same_shape(self.name(), a, b)?;
                let f: fn(f64, f64) -> f64 = match self {
                    Op::Add => |x, y| x + y,
                    Op::Sub => |x, y| x - y,
                    _ => |x, y| x * y,
                };
                let data = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(&x, &y)| f(x, y))
                    .collect();
                Ok((
                    Tensor {
                        shape: a.shape.clone(),
                        data,
                    },
                    Saved::None,
                ))
            }
            Op::Matmul => {
                let [a, b] = two(inputs).ok_or_else(|| self.arity_error(inputs))?;
                let (m, k) = as_2d(self.name(), a)?;
                let (k2, n) = as_2d(self.name(), b)?;
                if k != k2 {
                    return Err(TensorError::ShapeMismatch {
                        op: self.name(),
                        expected: format!("[{m}, {k}] x [{k}, _]"),
                        actual: format!("[{k2}, {n}] rhs"),
                    });
                }
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    for p in 0..k {
                        let av = a.data[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        let brow = &b.data[p * n..(p + 1) * n];
                        let orow = &mut out[i * n..(i + 1) * n];
                        for j in 0..n {
                            orow[j] += av * brow[j];
                        }
                    }
                }
                Ok((Tensor::new(vec![m, n], out)?, Saved::None))
            }
            Op::Conv2d => {
                let [x, k] = two(inputs).ok_or_else(|| self.arity_error(inputs))?;
                conv2d_forward(x, k)
            }
            Op::MaxPool2d => {
                let [x] = one(inputs).ok_or_else(|| self.arity_error(inputs))?;
                max_pool_forward(x)
            }
            Op::NearestUpsample2d => {
                let [x] = one(inputs).ok_or_else(|| self.arity_error(inputs))?;
                upsample_forward(x)
            }
            Op::Concat { axis } => concat_forward(inputs, *axis),
            Op::Sigmoid => elementwise(inputs, self, |x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            }),
            Op::Tanh => elementwise(inputs, self, f64::tanh),
            Op::Relu => elementwise(inputs, self, |x| x.max(0.0)),
            Op::Square => elementwise(inputs, self, |x| x * x),
            Op::Sqrt => {
                let [x] = one(inputs).ok_or_else(|| self.arity_error(inputs))?;
                if x.data().iter().any(|&v| v < 0.0) {
                    return Err(TensorError::Domain {
                        op: self.name(),
                        reason: "negative input".into(),
                    });
                }
                elementwise(inputs, self, f64::sqrt)
            }
            Op::Log { floor } => {
                let [x] = one(inputs).ok_or_else(|| self.arity_error(inputs))?;
                if *floor <= 0.0 && x.data().iter().any(|&v| v <= 0.0) {
                    return Err(TensorError::Domain {
                        op: self.name(),
                        reason: "non-positive input without floor".into(),
                    });
                }
                let f = *floor;
                elementwise(inputs, self, move |x| x.max(f).ln())
            }
            Op::PowScalar { exponent } => {
                let [x] = one(inputs).ok_or_else(|| self.arity_error(inputs))?;
                if x.data().iter().any(|&v| v <= 0.0) {
                    return Err(TensorError::Domain {
                        op: self.name(),
                        reason: "pow_scalar requires strictly positive base".into(),
                    });
                }
                let e = *exponent;
                elementwise(inputs, self, move |x| x.powf(e))
            }
            Op::Softmax { axis } => {
                let [x] = one(inputs).ok_or_else(|| self.arity_error(inputs))?;
                softmax_forward(x, *axis, self.name())
            }
            Op::LayerNorm { eps } => {
                let [x] = one(inputs).ok_or_else(|| self.arity_error(inputs))?;
                layer_norm_forward(x, *eps)
            }
            Op::Sum { axes } => {
                let [x] = one(inputs).ok_or_else(|| self.arity_error(inputs))?;
                reduce_forward(x, axes, self.name(), false)
            }
            Op::Mean { axes } => {
                let [x] = one(inputs).ok_or_else(|| self.arity_error(inputs))?;
                reduce_forward(x, axes, self.name(), true)
            }
            Op::Broadcast { shape } => {
                let [x] = one(inputs).ok_or_else(|| self.arity_error(inputs))?;
                broadcast_forward(x, shape)
            }
            Op::Reshape { shape } => {
                let [x] = one(inputs).ok_or_else(|| self.arity_error(inputs))?;
                if shape.iter().product::<usize>() != x.numel() {
                    return Err(TensorError::ShapeMismatch {
                        op: self.name(),
                        expected: format!("numel {}", x.numel()),
                        actual: shape_string(shape),
                    });
                }
                Ok((Tensor::new(shape.clone(), x.data.clone())?, Saved::None))
            }
            Op::Transpose { perm } => {
                let [x] = one(inputs).ok_or_else(|| self.arity_error(inputs))?;
                transpose_forward(x, perm, self.name())
            }
            Op::Slice { starts, ends } => {
                let [x] = one(inputs).ok_or_else(|| self.arity_error(inputs))?;
                slice_forward(x, starts, ends, self.name())
            }
            Op::GatherRows { indices } => {
                let [x] = one(inputs).ok_or_else(|| self.arity_error(inputs))?;
                gather_forward(x, indices, self.name())
            }
        }
    }

    /// Gradient w.r.t. each input; entries with `needs[i] == false` are None.
    pub(crate) fn vjp(
        &self,
        grad: &Tensor,
        inputs: &[&Tensor],
        output: &Tensor,
        saved: &Saved,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let g = grad.data();
        match self {
            Op::Add => Ok(vec![
                needs[0].then(|| grad.clone()),
                needs[1].then(|| grad.clone()),
            ]),
            Op::Sub => Ok(vec![
                needs[0].then(|| grad.clone()),
                needs[1].then(|| grad.map(|v| -v)),
            ]),
            Op::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                let da = needs[0].then(|| {
                    Tensor {
                        shape: a.shape.clone(),
                        data: g.iter().zip(b.data()).map(|(&gv, &bv)| gv * bv).collect(),
                    }
                });
                let db = needs[1].then(|| {
                    Tensor {
                        shape: b.shape.clone(),
                        data: g.iter().zip(a.data()).map(|(&gv, &av)| gv * av).collect(),
                    }
                });
                Ok(vec![da, db])
            }
            Op::Matmul => {
                let (a, b) = (inputs[0], inputs[1]);
                let (m, k) = (a.shape[0], a.shape[1]);
                let n = b.shape[1];
                let da = needs[0].then(|| {
                    // dA = g . B^T
                    let mut d = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g[i * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                d[i * k + p] += gv * b.data[p * n + j];
                            }
                        }
                    }
                    Tensor {
                        shape: vec![m, k],
                        data: d,
                    }
                });
                let db = needs[1].then(|| {
                    // dB = A^T . g
                    let mut d = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let av = a.data[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            let grow = &g[i * n..(i + 1) * n];
                            let drow = &mut d[p * n..(p + 1) * n];
                            for j in 0..n {
                                drow[j] += av * grow[j];
                            }
                        }
                    }
                    Tensor {
                        shape: vec![k, n],
                        data: d,
                    }
                });
                Ok(vec![da, db])
            }
            Op::Conv2d => conv2d_vjp(grad, inputs[0], inputs[1], needs),
            Op::MaxPool2d => {
                let Saved::ArgIndices(arg) = saved else {
                    unreachable!("max_pool2d saved state")
                };
                let mut d = vec![0.0; inputs[0].numel()];
                for (o, &src) in arg.iter().enumerate() {
                    d[src] += g[o];
                }
                Ok(vec![needs[0].then(|| Tensor {
                    shape: inputs[0].shape.clone(),
                    data: d,
                })])
            }
            Op::NearestUpsample2d => {
                let x = inputs[0];
                let (h, w, c) = (x.shape[0], x.shape[1], x.shape[2]);
                let mut d = vec![0.0; x.numel()];
                let (oh, ow) = (2 * h, 2 * w);
                for i in 0..oh {
                    for j in 0..ow {
                        let src = ((i / 2) * w + j / 2) * c;
                        let go = (i * ow + j) * c;
                        for ch in 0..c {
                            d[src + ch] += g[go + ch];
                        }
                    }
                }
                Ok(vec![needs[0].then(|| Tensor {
                    shape: x.shape.clone(),
                    data: d,
                })])
            }
            Op::Concat { axis } => concat_vjp(grad, inputs, *axis, needs),
            Op::Sigmoid => {
                let y = output.data();
                Ok(vec![needs[0].then(|| Tensor {
                    shape: output.shape.clone(),
                    data: g
                        .iter()
                        .zip(y)
                        .map(|(&gv, &yv)| gv * yv * (1.0 - yv))
                        .collect(),
                })])
            }
            Op::Tanh => {
                let y = output.data();
                Ok(vec![needs[0].then(|| Tensor {
                    shape: output.shape.clone(),
                    data: g.iter().zip(y).map(|(&gv, &yv)| gv * (1.0 - yv * yv)).collect(),
                })])
            }
            Op::Relu => {
                let x = inputs[0].data();
                Ok(vec![needs[0].then(|| Tensor {
                    shape: inputs[0].shape.clone(),
                    data: g
                        .iter()
                        .zip(x)
                        .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                        .collect(),
                })])
            }
            Op::Square => {
                let x = inputs[0].data();
                Ok(vec![needs[0].then(|| Tensor {
                    shape: inputs[0].shape.clone(),
                    data: g.iter().zip(x).map(|(&gv, &xv)| 2.0 * xv * gv).collect(),
                })])
            }
            Op::Sqrt => {
                let y = output.data();
                Ok(vec![needs[0].then(|| Tensor {
                    shape: output.shape.clone(),
                    data: g.iter().zip(y).map(|(&gv, &yv)| 0.5 * gv / yv).collect(),
                })])
            }
            Op::Log { floor } => {
                let x = inputs[0].data();
                let f = *floor;
                Ok(vec![needs[0].then(|| Tensor {
                    shape: inputs[0].shape.clone(),
                    data: g
                        .iter()
                        .zip(x)
                        .map(|(&gv, &xv)| if xv > f { gv / xv } else { 0.0 })
                        .collect(),
                })])
            }
            Op::PowScalar { exponent } => {
                let x = inputs[0].data();
                let e = *exponent;
                Ok(vec![needs[0].then(|| Tensor {
                    shape: inputs[0].shape.clone(),
                    data: g
                        .iter()
                        .zip(x)
                        .map(|(&gv, &xv)| gv * e * xv.powf(e - 1.0))
                        .collect(),
                })])
            }
            Op::Softmax { axis } => {
                let y = output;
                let (outer, extent, inner) = lanes(&y.shape, *axis);
                let mut d = vec![0.0; y.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |e: usize| (o * extent + e) * inner + i;
                        let mut dot = 0.0;
                        for e in 0..extent {
                            dot += g[idx(e)] * y.data[idx(e)];
                        }
                        for e in 0..extent {
                            d[idx(e)] = y.data[idx(e)] * (g[idx(e)] - dot);
                        }
                    }
                }
                Ok(vec![needs[0].then(|| Tensor {
                    shape: y.shape.clone(),
                    data: d,
                })])
            }
            Op::LayerNorm { .. } => {
                let Saved::Moments { inv_std } = saved else {
                    unreachable!("layer_norm saved state")
                };
                let y = output;
                let n = *y.shape.last().unwrap();
                let lanes_count = y.numel() / n;
                let mut d = vec![0.0; y.numel()];
                for l in 0..lanes_count {
                    let base = l * n;
                    let mut g_mean = 0.0;
                    let mut gy_mean = 0.0;
                    for e in 0..n {
                        g_mean += g[base + e];
                        gy_mean += g[base + e] * y.data[base + e];
                    }
                    g_mean /= n as f64;
                    gy_mean /= n as f64;
                    let r = inv_std[l];
                    for e in 0..n {
                        d[base + e] = r * (g[base + e] - g_mean - y.data[base + e] * gy_mean);
                    }
                }
                Ok(vec![needs[0].then(|| Tensor {
                    shape: y.shape.clone(),
                    data: d,
                })])
            }
            Op::Sum { axes } | Op::Mean { axes } => {
                let x = inputs[0];
                let scale = match self {
                    Op::Mean { .. } => {
                        1.0 / axes.iter().map(|&a| x.shape[a] as f64).product::<f64>()
                    }
                    _ => 1.0,
                };
                let mut d = vec![0.0; x.numel()];
                let xst = strides(&x.shape);
                let reduced: Vec<bool> = (0..x.rank()).map(|a| axes.contains(&a)).collect();
                let kept: Vec<usize> = (0..x.rank()).filter(|a| !reduced[*a]).collect();
                for (flat, slot) in d.iter_mut().enumerate() {
                    let mut oflat = 0;
                    for &a in &kept {
                        let coord = flat / xst[a] % x.shape[a];
                        oflat = oflat * x.shape[a] + coord;
                    }
                    *slot = g[oflat] * scale;
                }
                Ok(vec![needs[0].then(|| Tensor {
                    shape: x.shape.clone(),
                    data: d,
                })])
            }
            Op::Broadcast { shape } => {
                let x = inputs[0];
                let mut d = vec![0.0; x.numel()];
                let padded = pad_left(&x.shape, shape.len());
                let ost = strides(shape);
                let pst = strides(&padded);
                for (flat, &gv) in g.iter().enumerate() {
                    let mut iflat = 0;
                    for a in 0..shape.len() {
                        let coord = flat / ost[a] % shape[a];
                        let ic = if padded[a] == 1 { 0 } else { coord };
                        iflat += ic * pst[a];
                    }
                    d[iflat] += gv;
                }
                Ok(vec![needs[0].then(|| Tensor {
                    shape: x.shape.clone(),
                    data: d,
                })])
            }
            Op::Reshape { .. } => Ok(vec![needs[0].then(|| Tensor {
                shape: inputs[0].shape.clone(),
                data: g.to_vec(),
            })]),
            Op::Transpose { perm } => {
                // gradient flows through the inverse permutation
                let mut inv = vec![0usize; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (t, _) = transpose_forward(grad, &inv, "transpose")?;
                Ok(vec![needs[0].then_some(t)])
            }
            Op::Slice { starts, .. } => {
                let x = inputs[0];
                let mut d = vec![0.0; x.numel()];
                let xst = strides(&x.shape);
                let ost = strides(&grad.shape);
                for (flat, &gv) in g.iter().enumerate() {
                    let mut iflat = 0;
                    for a in 0..x.rank() {
                        let coord = flat / ost[a] % grad.shape[a];
                        iflat += (coord + starts[a]) * xst[a];
                    }
                    d[iflat] = gv;
                }
                Ok(vec![needs[0].then(|| Tensor {
                    shape: x.shape.clone(),
                    data: d,
                })])
            }
            Op::GatherRows { indices } => {
                let x = inputs[0];
                let row = x.numel() / x.shape[0];
                let mut d = vec![0.0; x.numel()];
                for (o, &src) in indices.iter().enumerate() {
                    let grow = &g[o * row..(o + 1) * row];
                    let drow = &mut d[src * row..(src + 1) * row];
                    for (dv, &gv) in drow.iter_mut().zip(grow) {
                        *dv += gv;
                    }
                }
                Ok(vec![needs[0].then(|| Tensor {
                    shape: x.shape.clone(),
                    data: d,
                })])
            }
        }
    }
}

fn one<'a>(inputs: &[&'a Tensor]) -> Option<[&'a Tensor; 1]> {
    (inputs.len() == 1).then(|| [inputs[0]])
}

fn two<'a>(inputs: &[&'a Tensor]) -> Option<[&'a Tensor; 2]> {
    (inputs.len() == 2).then(|| [inputs[0], inputs[1]])
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(TensorError::ShapeMismatch {
            op,
            expected: shape_string(&a.shape),
            actual: shape_string(&b.shape),
        });
    }
    Ok(())
}

fn as_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(TensorError::ShapeMismatch {
            op,
            expected: "rank-2 tensor".into(),
            actual: shape_string(&t.shape),
        });
    }
    Ok((t.shape[0], t.shape[1]))
}

fn elementwise(inputs: &[&Tensor], op: &Op, f: impl Fn(f64) -> f64) -> Result<(Tensor, Saved)> {
    if inputs.len() != 1 {
        return Err(TensorError::ShapeMismatch {
            op: op.name(),
            expected: "1 input".into(),
            actual: format!("{} inputs", inputs.len()),
        });
    }
    Ok((inputs[0].map(f), Saved::None))
}

/// (outer, extent, inner) decomposition of `shape` around `axis`.
fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn pad_left(shape: &[usize], rank: usize) -> Vec<usize> {
    let mut p = vec![1; rank - shape.len()];
    p.extend_from_slice(shape);
    p
}

fn conv2d_forward(x: &Tensor, k: &Tensor) -> Result<(Tensor, Saved)> {
    let bad = |expected: String, actual: &Tensor| TensorError::ShapeMismatch {
        op: "conv2d",
        expected,
        actual: shape_string(&actual.shape),
    };
    if x.rank() != 3 {
        return Err(bad("input [H, W, C_in]".into(), x));
    }
    if k.rank() != 4 {
        return Err(bad("kernel [KH, KW, C_in, C_out]".into(), k));
    }
    let (h, w, cin) = (x.shape[0], x.shape[1], x.shape[2]);
    let (kh, kw, kcin, cout) = (k.shape[0], k.shape[1], k.shape[2], k.shape[3]);
    if kcin != cin {
        return Err(bad(format!("kernel C_in = {cin}"), k));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(bad("odd kernel extents".into(), k));
    }
    let (ph, pw) = (kh / 2, kw / 2);
    let mut out = vec![0.0; h * w * cout];
    for dh in 0..kh {
        let h_lo = ph.saturating_sub(dh);
        let h_hi = (h + ph).saturating_sub(dh).min(h);
        for dw in 0..kw {
            let w_lo = pw.saturating_sub(dw);
            let w_hi = (w + pw).saturating_sub(dw).min(w);
            for hh in h_lo..h_hi {
                let xi = hh + dh - ph;
                for ww in w_lo..w_hi {
                    let xj = ww + dw - pw;
                    let xbase = (xi * w + xj) * cin;
                    let obase = (hh * w + ww) * cout;
                    for ci in 0..cin {
                        let xv = x.data[xbase + ci];
                        if xv == 0.0 {
                            continue;
                        }
                        let kbase = ((dh * kw + dw) * cin + ci) * cout;
                        let krow = &k.data[kbase..kbase + cout];
                        let orow = &mut out[obase..obase + cout];
                        for co in 0..cout {
                            orow[co] += xv * krow[co];
                        }
                    }
                }
            }
        }
    }
    Ok((Tensor::new(vec![h, w, cout], out)?, Saved::None))
}

fn conv2d_vjp(
    grad: &Tensor,
    x: &Tensor,
    k: &Tensor,
    needs: &[bool],
) -> Result<Vec<Option<Tensor>>> {
    let (h, w, cin) = (x.shape[0], x.shape[1], x.shape[2]);
    let (kh, kw, _, cout) = (k.shape[0], k.shape[1], k.shape[2], k.shape[3]);
    let (ph, pw) = (kh / 2, kw / 2);
    let g = grad.data();

    let dx = needs[0].then(|| {
        let mut d = vec![0.0; x.numel()];
        for dh in 0..kh {
            let h_lo = ph.saturating_sub(dh);
            let h_hi = (h + ph).saturating_sub(dh).min(h);
            for dw in 0..kw {
                let w_lo = pw.saturating_sub(dw);
                let w_hi = (w + pw).saturating_sub(dw).min(w);
                for hh in h_lo..h_hi {
                    let xi = hh + dh - ph;
                    for ww in w_lo..w_hi {
                        let xj = ww + dw - pw;
                        let gbase = (hh * w + ww) * cout;
                        let dbase = (xi * w + xj) * cin;
                        for ci in 0..cin {
                            let kbase = ((dh * kw + dw) * cin + ci) * cout;
                            let mut acc = 0.0;
                            for co in 0..cout {
                                acc += k.data[kbase + co] * g[gbase + co];
                            }
                            d[dbase + ci] += acc;
                        }
                    }
                }
            }
        }
        Tensor {
            shape: x.shape.clone(),
            data: d,
        }
    });

    let dk = needs[1].then(|| {
        let mut d = vec![0.0; k.numel()];
        for dh in 0..kh {
            let h_lo = ph.saturating_sub(dh);
            let h_hi = (h + ph).saturating_sub(dh).min(h);
            for dw in 0..kw {
                let w_lo = pw.saturating_sub(dw);
                let w_hi = (w + pw).saturating_sub(dw).min(w);
                for hh in h_lo..h_hi {
                    let xi = hh + dh - ph;
                    for ww in w_lo..w_hi {
                        let xj = ww + dw - pw;
                        let xbase = (xi * w + xj) * cin;
                        let gbase = (hh * w + ww) * cout;
                        for ci in 0..cin {
                            let xv = x.data[xbase + ci];
                            if xv == 0.0 {
                                continue;
                            }
                            let dbase = ((dh * kw + dw) * cin + ci) * cout;
                            let grow = &g[gbase..gbase + cout];
                            let drow = &mut d[dbase..dbase + cout];
                            for co in 0..cout {
                                drow[co] += xv * grow[co];
                            }
                        }
                    }
                }
            }
        }
        Tensor {
            shape: k.shape.clone(),
            data: d,
        }
    });

    Ok(vec![dx, dk])
}

fn max_pool_forward(x: &Tensor) -> Result<(Tensor, Saved)> {
    if x.rank() != 3 || x.shape[0] % 2 != 0 || x.shape[1] % 2 != 0 {
        return Err(TensorError::ShapeMismatch {
            op: "max_pool2d",
            expected: "[H, W, C] with even H, W".into(),
            actual: shape_string(&x.shape),
        });
    }
    let (h, w, c) = (x.shape[0], x.shape[1], x.shape[2]);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow * c];
    let mut arg = vec![0usize; oh * ow * c];
    for i in 0..oh {
        for j in 0..ow {
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for dh in 0..2 {
                    for dw in 0..2 {
                        let idx = ((2 * i + dh) * w + 2 * j + dw) * c + ch;
                        if x.data[idx] > best {
                            best = x.data[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = (i * ow + j) * c + ch;
                out[o] = best;
                arg[o] = best_idx;
            }
        }
    }
    Ok((Tensor::new(vec![oh, ow, c], out)?, Saved::ArgIndices(arg)))
}

fn upsample_forward(x: &Tensor) -> Result<(Tensor, Saved)> {
    if x.rank() != 3 {
        return Err(TensorError::ShapeMismatch {
            op: "nearest_upsample2d",
            expected: "[H, W, C]".into(),
            actual: shape_string(&x.shape),
        });
    }
    let (h, w, c) = (x.shape[0], x.shape[1], x.shape[2]);
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; oh * ow * c];
    for i in 0..oh {
        for j in 0..ow {
            let src = ((i / 2) * w + j / 2) * c;
            let dst = (i * ow + j) * c;
            out[dst..dst + c].copy_from_slice(&x.data[src..src + c]);
        }
    }
    Ok((Tensor::new(vec![oh, ow, c], out)?, Saved::None))
}

fn concat_forward(inputs: &[&Tensor], axis: usize) -> Result<(Tensor, Saved)> {
    let first = inputs.first().ok_or(TensorError::ShapeMismatch {
        op: "concat",
        expected: "at least one input".into(),
        actual: "0 inputs".into(),
    })?;
    if axis >= first.rank() {
        return Err(TensorError::ShapeMismatch {
            op: "concat",
            expected: format!("axis < {}", first.rank()),
            actual: format!("axis {axis}"),
        });
    }
    let mut total_axis = 0;
    for t in inputs {
        if t.rank() != first.rank() {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                expected: shape_string(&first.shape),
                actual: shape_string(&t.shape),
            });
        }
        for a in 0..t.rank() {
            if a != axis && t.shape[a] != first.shape[a] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    expected: shape_string(&first.shape),
                    actual: shape_string(&t.shape),
                });
            }
        }
        total_axis += t.shape[axis];
    }
    let mut out_shape = first.shape.clone();
    out_shape[axis] = total_axis;
    let inner: usize = first.shape[axis + 1..].iter().product();
    let outer: usize = first.shape[..axis].iter().product();
    let mut out = vec![0.0; out_shape.iter().product()];
    let out_lane = total_axis * inner;
    let mut offset = 0;
    for t in inputs {
        let lane = t.shape[axis] * inner;
        for o in 0..outer {
            let src = &t.data[o * lane..(o + 1) * lane];
            let dst = &mut out[o * out_lane + offset..o * out_lane + offset + lane];
            dst.copy_from_slice(src);
        }
        offset += lane;
    }
    Ok((Tensor::new(out_shape, out)?, Saved::None))
}

fn concat_vjp(
    grad: &Tensor,
    inputs: &[&Tensor],
    axis: usize,
    needs: &[bool],
) -> Result<Vec<Option<Tensor>>> {
    let first = inputs[0];
    let inner: usize = first.shape[axis + 1..].iter().product();
    let outer: usize = first.shape[..axis].iter().product();
    let out_lane = grad.shape[axis] * inner;
    let mut grads = Vec::with_capacity(inputs.len());
    let mut offset = 0;
    for (i, t) in inputs.iter().enumerate() {
        let lane = t.shape[axis] * inner;
        if needs[i] {
            let mut d = vec![0.0; t.numel()];
            for o in 0..outer {
                let src = &grad.data[o * out_lane + offset..o * out_lane + offset + lane];
                d[o * lane..(o + 1) * lane].copy_from_slice(src);
            }
            grads.push(Some(Tensor {
                shape: t.shape.clone(),
                data: d,
            }));
        } else {
            grads.push(None);
        }
        offset += lane;
    }
    Ok(grads)
}

fn softmax_forward(x: &Tensor, axis: usize, op: &'static str) -> Result<(Tensor, Saved)> {
    if axis >= x.rank() {
        return Err(TensorError::ShapeMismatch {
            op,
            expected: format!("axis < {}", x.rank()),
            actual: format!("axis {axis}"),
        });
    }
    let (outer, extent, inner) = lanes(&x.shape, axis);
    let mut out = vec![0.0; x.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |e: usize| (o * extent + e) * inner + i;
            let mut mx = f64::NEG_INFINITY;
            for e in 0..extent {
                mx = mx.max(x.data[idx(e)]);
            }
            let mut total = 0.0;
            for e in 0..extent {
                let v = (x.data[idx(e)] - mx).exp();
                out[idx(e)] = v;
                total += v;
            }
            for e in 0..extent {
                out[idx(e)] /= total;
            }
        }
    }
    Ok((
        Tensor {
            shape: x.shape.clone(),
            data: out,
        },
        Saved::None,
    ))
}

fn layer_norm_forward(x: &Tensor, eps: f64) -> Result<(Tensor, Saved)> {
    if x.rank() == 0 {
        return Err(TensorError::ShapeMismatch {
            op: "layer_norm",
            expected: "rank >= 1".into(),
            actual: "rank 0".into(),
        });
    }
    let n = *x.shape.last().unwrap();
    let lanes_count = x.numel() / n;
    let mut out = vec![0.0; x.numel()];
    let mut inv_stds = vec![0.0; lanes_count];
    for l in 0..lanes_count {
        let base = l * n;
        let lane = &x.data[base..base + n];
        let mean = lane.iter().sum::<f64>() / n as f64;
        let var = lane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for e in 0..n {
            out[base + e] = (lane[e] - mean) * inv;
        }
        inv_stds[l] = inv;
    }
    Ok((
        Tensor {
            shape: x.shape.clone(),
            data: out,
        },
        Saved::Moments { inv_std: inv_stds },
    ))
}

fn reduce_forward(x: &Tensor, axes: &[usize], op: &'static str, mean: bool) -> Result<(Tensor, Saved)> {
    if axes.is_empty() || axes.windows(2).any(|w| w[0] >= w[1]) || axes.iter().any(|&a| a >= x.rank()) {
        return Err(TensorError::ShapeMismatch {
            op,
            expected: format!("sorted unique axes < {}", x.rank()),
            actual: format!("{axes:?}"),
        });
    }
    let reduced: Vec<bool> = (0..x.rank()).map(|a| axes.contains(&a)).collect();
    let out_shape: Vec<usize> = (0..x.rank())
        .filter(|&a| !reduced[a])
        .map(|a| x.shape[a])
        .collect();
    let out_numel: usize = out_shape.iter().product();
    let mut out = vec![0.0; out_numel];
    let xst = strides(&x.shape);
    let kept: Vec<usize> = (0..x.rank()).filter(|a| !reduced[*a]).collect();
    for flat in 0..x.numel() {
        let mut oflat = 0;
        for &a in &kept {
            let coord = flat / xst[a] % x.shape[a];
            oflat = oflat * x.shape[a] + coord;
        }
        out[oflat] += x.data[flat];
    }
    if mean {
        let count: f64 = axes.iter().map(|&a| x.shape[a] as f64).product();
        for v in out.iter_mut() {
            *v /= count;
        }
    }
    Ok((Tensor::new(out_shape, out)?, Saved::None))
}

fn broadcast_forward(x: &Tensor, shape: &[usize]) -> Result<(Tensor, Saved)> {
    if shape.len() < x.rank() || shape.len() > super::MAX_RANK {
        return Err(TensorError::ShapeMismatch {
            op: "broadcast",
            expected: format!("target rank in [{}, {}]", x.rank(), super::MAX_RANK),
            actual: shape_string(shape),
        });
    }
    let padded = pad_left(&x.shape, shape.len());
    for a in 0..shape.len() {
        if padded[a] != shape[a] && padded[a] != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "broadcast",
                expected: shape_string(shape),
                actual: shape_string(&x.shape),
            });
        }
    }
    let numel: usize = shape.iter().product();
    let mut out = vec![0.0; numel];
    let ost = strides(shape);
    let pst = strides(&padded);
    for (flat, slot) in out.iter_mut().enumerate() {
        let mut iflat = 0;
        for a in 0..shape.len() {
            let coord = flat / ost[a] % shape[a];
            let ic = if padded[a] == 1 { 0 } else { coord };
            iflat += ic * pst[a];
        }
        *slot = x.data[iflat];
    }
    Ok((Tensor::new(shape.to_vec(), out)?, Saved::None))
}

fn transpose_forward(x: &Tensor, perm: &[usize], op: &'static str) -> Result<(Tensor, Saved)> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(TensorError::ShapeMismatch {
            op,
            expected: format!("permutation of 0..{rank}"),
            actual: format!("{perm:?}"),
        });
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape[p]).collect();
    let mut out = vec![0.0; x.numel()];
    let xst = strides(&x.shape);
    let ost = strides(&out_shape);
    for (flat, slot) in out.iter_mut().enumerate() {
        let mut iflat = 0;
        for a in 0..rank {
            let coord = flat / ost[a] % out_shape[a];
            iflat += coord * xst[perm[a]];
        }
        *slot = x.data[iflat];
    }
    Ok((Tensor::new(out_shape, out)?, Saved::None))
}

fn slice_forward(x: &Tensor, starts: &[usize], ends: &[usize], op: &'static str) -> Result<(Tensor, Saved)> {
    let rank = x.rank();
    if starts.len() != rank
        || ends.len() != rank
        || (0..rank).any(|a| starts[a] >= ends[a] || ends[a] > x.shape[a])
    {
        return Err(TensorError::ShapeMismatch {
            op,
            expected: format!("0 <= starts < ends <= {:?}", x.shape),
            actual: format!("starts {starts:?} ends {ends:?}"),
        });
    }
    let out_shape: Vec<usize> = (0..rank).map(|a| ends[a] - starts[a]).collect();
    let mut out = vec![0.0; out_shape.iter().product()];
    let xst = strides(&x.shape);
    let ost = strides(&out_shape);
    for (flat, slot) in out.iter_mut().enumerate() {
        let mut iflat = 0;
        for a in 0..rank {
            let coord = flat / ost[a] % out_shape[a];
            iflat += (coord + starts[a]) * xst[a];
        }
        *slot = x.data[iflat];
    }
    Ok((Tensor::new(out_shape, out)?, Saved::None))
}

fn gather_forward(x: &Tensor, indices: &[usize], op: &'static str) -> Result<(Tensor, Saved)> {
    if x.rank() == 0 {
        return Err(TensorError::ShapeMismatch {
            op,
            expected: "rank >= 1".into(),
            actual: "rank 0".into(),
        });
    }
    let n = x.shape[0];
    if indices.is_empty() || indices.iter().any(|&i| i >= n) {
        return Err(TensorError::ShapeMismatch {
            op,
            expected: format!("non-empty indices < {n}"),
            actual: format!("{} indices", indices.len()),
        });
    }
    let row = x.numel() / n;
    let mut out_shape = x.shape.clone();
    out_shape[0] = indices.len();
    let mut out = vec![0.0; indices.len() * row];
    for (o, &src) in indices.iter().enumerate() {
        out[o * row..(o + 1) * row].copy_from_slice(&x.data[src * row..(src + 1) * row]);
    }
    Ok((Tensor::new(out_shape, out)?, Saved::None))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_returns_rhs() {
        let eye = t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let a = t(&[3, 3], &[2.0, -1.0, 0.5, 3.0, 4.0, -2.0, 0.0, 7.0, 1.5]);
        let (out, _) = Op::Matmul.forward(&[&eye, &a]).unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let x = t(&[3], &[0.0, 0.0, 0.0]);
        let (out, _) = Op::Softmax { axis: 0 }.forward(&[&x]).unwrap();
        for &v in out.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn conv2d_all_ones_same_padding() {
        // 4x4 ones, single 3x3 ones kernel: centers 9, edges 6, corners 4.
        let x = Tensor::full(&[4, 4, 1], 1.0);
        let k = Tensor::full(&[3, 3, 1, 1], 1.0);
        let (out, _) = Op::Conv2d.forward(&[&x, &k]).unwrap();
        let expect = [
            4.0, 6.0, 6.0, 4.0, //
            6.0, 9.0, 9.0, 6.0, //
            6.0, 9.0, 9.0, 6.0, //
            4.0, 6.0, 6.0, 4.0,
        ];
        assert_eq!(out.data(), &expect);
    }

    #[test]
    fn max_pool_tie_takes_first_in_row_major_scan() {
        let x = t(&[2, 2, 1], &[5.0, 5.0, 5.0, 5.0]);
        let (out, saved) = Op::MaxPool2d.forward(&[&x]).unwrap();
        assert_eq!(out.data(), &[5.0]);
        let Saved::ArgIndices(arg) = saved else { panic!() };
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn max_pool_rejects_odd_extents() {
        let x = Tensor::zeros(&[3, 4, 1]);
        assert!(Op::MaxPool2d.forward(&[&x]).is_err());
    }

    #[test]
    fn layer_norm_zero_mean_unit_variance() {
        let x = t(&[2, 4], &[1.0, 2.0, 3.0, 4.0, -1.0, 5.0, 0.5, 2.5]);
        let (out, _) = Op::LayerNorm { eps: 1e-5 }.forward(&[&x]).unwrap();
        for lane in 0..2 {
            let v = &out.data()[lane * 4..(lane + 1) * 4];
            let mean: f64 = v.iter().sum::<f64>() / 4.0;
            let var: f64 = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-9, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }

    #[test]
    fn reduce_sum_over_middle_axis() {
        let x = t(&[2, 3, 2], &(0..12).map(|v| v as f64).collect::<Vec<_>>());
        let (out, _) = Op::Sum { axes: vec![1] }.forward(&[&x]).unwrap();
        assert_eq!(out.shape(), &[2, 2]);
        // lane (0,0): 0 + 2 + 4 = 6; (0,1): 1 + 3 + 5 = 9
        assert_eq!(out.data(), &[6.0, 9.0, 24.0, 27.0]);
    }

    #[test]
    fn broadcast_row_to_matrix() {
        let x = t(&[1, 3], &[1.0, 2.0, 3.0]);
        let (out, _) = Op::Broadcast { shape: vec![2, 3] }.forward(&[&x]).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn transpose_round_trip_is_bit_exact() {
        let x = t(&[2, 3, 4], &(0..24).map(|v| v as f64 * 0.37).collect::<Vec<_>>());
        let (y, _) = Op::Transpose { perm: vec![2, 0, 1] }.forward(&[&x]).unwrap();
        let (back, _) = Op::Transpose { perm: vec![1, 2, 0] }.forward(&[&y]).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn slice_then_pad_grad_shape() {
        let x = t(&[3, 3], &(0..9).map(|v| v as f64).collect::<Vec<_>>());
        let op = Op::Slice {
            starts: vec![1, 0],
            ends: vec![3, 2],
        };
        let (y, saved) = op.forward(&[&x]).unwrap();
        assert_eq!(y.shape(), &[2, 2]);
        assert_eq!(y.data(), &[3.0, 4.0, 6.0, 7.0]);
        let g = Tensor::full(&[2, 2], 1.0);
        let d = op.vjp(&g, &[&x], &y, &saved, &[true]).unwrap();
        let dx = d[0].as_ref().unwrap();
        assert_eq!(dx.data(), &[0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn gather_rows_scatter_adds_duplicates() {
        let x = t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let op = Op::GatherRows {
            indices: vec![1, 1, 0],
        };
        let (y, saved) = op.forward(&[&x]).unwrap();
        assert_eq!(y.data(), &[3.0, 4.0, 3.0, 4.0, 1.0, 2.0]);
        let g = Tensor::full(&[3, 2], 1.0);
        let d = op.vjp(&g, &[&x], &y, &saved, &[true]).unwrap();
        assert_eq!(d[0].as_ref().unwrap().data(), &[1.0, 1.0, 2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_reports_kind_and_shapes() {
        let a = Tensor::zeros(&[2, 2]);
        let b = Tensor::zeros(&[3]);
        let err = Op::Add.forward(&[&a, &b]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add"), "{msg}");
        assert!(msg.contains("[2, 2]"), "{msg}");
        assert!(msg.contains("[3]"), "{msg}");
    }
}
