//! Eager reverse-mode autodiff: every op computes its value immediately and
//! records itself on the tape; [`Tape::backward`] replays the records in
//! reverse order.

use crate::error::{dim_err, Result, TensorError};
use crate::kernels::{col2im, gemm, im2col, ConvGeom};
use crate::tensor::Tensor;

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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Prelu { x: Var, slope: Var, inner: usize },
    Tanh(Var),
    Sum(Var),
    Mean(Var),
    Dot(Var, Var),
    L2Norm(Var),
    Linear { x: Var, w: Var },
    AddBias { x: Var, b: Var, inner: usize },
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    Upsample { x: Var, factor: usize },
    DownsampleNearest { x: Var, factor: usize },
    AvgPool { x: Var, factor: usize },
    GlobalAvgPool(Var),
    BatchMean(Var),
    BatchVar(Var),
    Normalize { x: Var, mean: Var, var: Var, eps: f64 },
    GatherRows { table: Var, rows: Vec<usize> },
    ClassMix { table: Var, weights: Tensor },
    BroadcastSpatial(Var),
    Reshape(Var),
    NormalizeRows { x: Var, norms: Vec<f64> },
    RowDot(Var, Var),
    Translate { x: Var, dy: isize, dx: isize },
    MaskMul { x: Var, mask: Tensor },
    SpectralNorm { w: Var, u: Vec<f64>, v: Vec<f64>, sigma: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Tensor>,
    op: Op,
}

/// Recording of one computation graph. Nodes are appended in evaluation order,
/// so the node list is always topologically sorted.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFinite(op))
    }
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return dim_err(format!("{op}: shapes {:?} and {:?} differ", a.shape(), b.shape()));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a constant input.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        check_finite("constant", &value)?;
        Ok(self.push_raw(value, false, Op::Leaf))
    }

    /// Records a leaf whose gradient is accumulated by [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        check_finite("param", &value)?;
        Ok(self.push_raw(value, true, Op::Leaf))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push_raw(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, requires_grad, grad: None, op });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, inputs: &[Var], op: Op) -> Result<Var> {
        check_finite(name, &value)?;
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, rg, op))
    }

    fn map(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(name, out, &[x], op)
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(name, av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        self.push(name, out, &[a, b], op)
    }

    // ---- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.map("scale", x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        self.map("add_scalar", x, |v| v + s, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map("tanh", x, f64::tanh, Op::Tanh(x))
    }

    /// Parametric ReLU with one learnable slope per feature along axis 1.
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(slope));
        if xv.ndim() < 2 || sv.shape() != [xv.shape()[1]] {
            return dim_err(format!("prelu: slope {:?} does not match input {:?}", sv.shape(), xv.shape()));
        }
        let c = xv.shape()[1];
        let inner: usize = xv.shape()[2..].iter().product();
        let s = sv.data();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| if v > 0.0 { v } else { s[(i / inner) % c] * v })
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push("prelu", out, &[x, slope], Op::Prelu { x, slope, inner })
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push("sum", Tensor::scalar(s), &[x], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.numel() == 0 {
            return dim_err("mean of empty tensor");
        }
        let m = xv.sum() / xv.numel() as f64;
        self.push("mean", Tensor::scalar(m), &[x], Op::Mean(x))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("dot", av, bv)?;
        let d = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).sum();
        self.push("dot", Tensor::scalar(d), &[a, b], Op::Dot(a, b))
    }

    /// Euclidean norm of all entries.
    pub fn l2_norm(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).data().iter().map(|v| v * v).sum::<f64>().sqrt();
        self.push("l2_norm", Tensor::scalar(n), &[x], Op::L2Norm(x))
    }

    // ---- linear algebra ----------------------------------------------------

    /// `x [N, in] · wᵀ` with `w [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (n, i) = match xv.shape() {
            [n, i] => (*n, *i),
            s => return dim_err(format!("linear: input must be 2-D, got {s:?}")),
        };
        let o = match wv.shape() {
            [o, wi] if *wi == i => *o,
            s => return dim_err(format!("linear: weight {s:?} incompatible with input width {i}")),
        };
        let mut out = vec![0.0; n * o];
        gemm(n, i, o, xv.data(), false, wv.data(), true, 0.0, &mut out);
        self.push("linear", Tensor::new(vec![n, o], out)?, &[x, w], Op::Linear { x, w })
    }

    /// Adds `b[c]` along axis 1 of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if xv.ndim() < 2 || bv.shape() != [xv.shape()[1]] {
            return dim_err(format!("add_bias: bias {:?} does not match input {:?}", bv.shape(), xv.shape()));
        }
        let c = xv.shape()[1];
        let inner: usize = xv.shape()[2..].iter().product();
        let bd = bv.data();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[(i / inner) % c])
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push("add_bias", out, &[x, b], Op::AddBias { x, b, inner })
    }

    /// Cross-correlation of an NCHW input with an `[O, I, k, k]` kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (n, c, h, wd) = xv.nchw()?;
        let (o, ci, kh, kw) = wv.nchw().map_err(|_| {
            TensorError::Dimension(format!("conv2d: kernel must be 4-D, got {:?}", wv.shape()))
        })?;
        if ci != c {
            return dim_err(format!("conv2d: kernel expects {ci} input channels, input has {c}"));
        }
        if stride == 0 {
            return Err(TensorError::Parameter("conv2d: stride must be >= 1".into()));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return dim_err(format!("conv2d: kernel {kh}x{kw} larger than padded input {h}x{wd}"));
        }
        let geom = ConvGeom {
            c,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (wd + 2 * pad - kw) / stride + 1,
        };
        let (k, p) = (geom.rows(), geom.cols());
        let mut out = vec![0.0; n * o * p];
        let mut cols = vec![0.0; if geom.is_pointwise() { 0 } else { k * p }];
        for s in 0..n {
            let img = &xv.data()[s * c * h * wd..(s + 1) * c * h * wd];
            let patches: &[f64] = if geom.is_pointwise() {
                img
            } else {
                im2col(img, &geom, &mut cols);
                &cols
            };
            gemm(o, k, p, wv.data(), false, patches, false, 0.0, &mut out[s * o * p..(s + 1) * o * p]);
        }
        let out = Tensor::new(vec![n, o, geom.oh, geom.ow], out)?;
        self.push("conv2d", out, &[x, w], Op::Conv2d { x, w, geom })
    }

    /// Divides `w` (viewed as a matrix with one row per leading index) by the
    /// spectral norm estimate `sigma = uᵀ W v`. `u` and `v` are held constant
    /// for differentiation.
    pub fn spectral_normalize(&mut self, w: Var, u: &[f64], v: &[f64]) -> Result<Var> {
        let wv = self.value(w);
        let rows = *wv.shape().first().unwrap_or(&0);
        if wv.ndim() < 2 || rows == 0 {
            return dim_err(format!("spectral_normalize: weight must be at least 2-D, got {:?}", wv.shape()));
        }
        let cols = wv.numel() / rows;
        if u.len() != rows || v.len() != cols {
            return dim_err(format!(
                "spectral_normalize: vectors of length {}/{} do not fit a {rows}x{cols} matrix",
                u.len(),
                v.len()
            ));
        }
        let sigma = bilinear(wv.data(), u, v).max(SIGMA_FLOOR);
        let data = wv.data().iter().map(|x| x / sigma).collect();
        let out = Tensor::new(wv.shape().to_vec(), data)?;
        let op = Op::SpectralNorm { w, u: u.to_vec(), v: v.to_vec(), sigma };
        self.push("spectral_normalize", out, &[w], op)
    }

    // ---- spatial -----------------------------------------------------------

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor < 1 {
            return Err(TensorError::Parameter("upsample factor must be >= 1".into()));
        }
        let xv = self.value(x);
        let (n, c, h, w) = xv.nchw()?;
        let (oh, ow) = (h * factor, w * factor);
        let mut out = vec![0.0; n * c * oh * ow];
        for plane in 0..n * c {
            let src = &xv.data()[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for y in 0..oh {
                for xx in 0..ow {
                    dst[y * ow + xx] = src[(y / factor) * w + xx / factor];
                }
            }
        }
        let out = Tensor::new(vec![n, c, oh, ow], out)?;
        self.push("upsample_nearest", out, &[x], Op::Upsample { x, factor })
    }

    /// Keeps the top-left sample of every `factor x factor` block.
    pub fn downsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (n, c, oh, ow, h, w) = self.pool_dims("downsample_nearest", x, factor)?;
        let xv = self.value(x);
        let mut out = vec![0.0; n * c * oh * ow];
        for plane in 0..n * c {
            for y in 0..oh {
                for xx in 0..ow {
                    out[(plane * oh + y) * ow + xx] = xv.data()[(plane * h + y * factor) * w + xx * factor];
                }
            }
        }
        let out = Tensor::new(vec![n, c, oh, ow], out)?;
        self.push("downsample_nearest", out, &[x], Op::DownsampleNearest { x, factor })
    }

    pub fn avg_pool(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (n, c, oh, ow, h, w) = self.pool_dims("avg_pool", x, factor)?;
        let xv = self.value(x);
        let area = (factor * factor) as f64;
        let mut out = vec![0.0; n * c * oh * ow];
        for plane in 0..n * c {
            for y in 0..h {
                for xx in 0..w {
                    out[(plane * oh + y / factor) * ow + xx / factor] += xv.data()[(plane * h + y) * w + xx];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= area);
        let out = Tensor::new(vec![n, c, oh, ow], out)?;
        self.push("avg_pool", out, &[x], Op::AvgPool { x, factor })
    }

    fn pool_dims(&self, name: &str, x: Var, factor: usize) -> Result<(usize, usize, usize, usize, usize, usize)> {
        if factor < 1 {
            return Err(TensorError::Parameter(format!("{name}: factor must be >= 1")));
        }
        let (n, c, h, w) = self.value(x).nchw()?;
        if h % factor != 0 || w % factor != 0 {
            return Err(TensorError::Parameter(format!("{name}: {h}x{w} not divisible by {factor}")));
        }
        Ok((n, c, h / factor, w / factor, h, w))
    }

    /// Mean over both spatial axes: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, c, h, w) = xv.nchw()?;
        let hw = h * w;
        let data = xv
            .data()
            .chunks(hw)
            .map(|plane| plane.iter().sum::<f64>() / hw as f64)
            .collect();
        let out = Tensor::new(vec![n, c], data)?;
        self.push("global_avg_pool", out, &[x], Op::GlobalAvgPool(x))
    }

    /// Shifts every plane by `(dy, dx)` cells; vacated cells become zero.
    pub fn translate(&mut self, x: Var, dy: isize, dx: isize) -> Result<Var> {
        let xv = self.value(x);
        let (n, c, h, w) = xv.nchw()?;
        let mut out = vec![0.0; xv.numel()];
        for plane in 0..n * c {
            for y in 0..h as isize {
                let sy = y - dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for xx in 0..w as isize {
                    let sx = xx - dx;
                    if sx >= 0 && sx < w as isize {
                        out[plane * h * w + (y as usize) * w + xx as usize] =
                            xv.data()[plane * h * w + (sy as usize) * w + sx as usize];
                    }
                }
            }
        }
        let out = Tensor::new(vec![n, c, h, w], out)?;
        self.push("translate", out, &[x], Op::Translate { x, dy, dx })
    }

    /// Elementwise product with a constant mask of shape `[H, W]`,
    /// `[C, H, W]`, or the full input shape (broadcast over leading axes).
    pub fn mask_mul(&mut self, x: Var, mask: &Tensor) -> Result<Var> {
        let xv = self.value(x);
        let xs = xv.shape();
        if mask.ndim() > xs.len() || xs[xs.len() - mask.ndim()..] != *mask.shape() {
            return dim_err(format!("mask_mul: mask {:?} does not broadcast onto {:?}", mask.shape(), xs));
        }
        let m = mask.data();
        let data = xv.data().iter().enumerate().map(|(i, v)| v * m[i % m.len()]).collect();
        let out = Tensor::new(xs.to_vec(), data)?;
        self.push("mask_mul", out, &[x], Op::MaskMul { x, mask: mask.clone() })
    }

    // ---- normalization -----------------------------------------------------

    /// Per-channel mean and biased variance over batch and spatial axes.
    pub fn batch_stats(&mut self, x: Var) -> Result<(Var, Var)> {
        let xv = self.value(x);
        let (n, c, h, w) = xv.nchw()?;
        let m = n * h * w;
        if m == 0 {
            return dim_err("batch_stats: N*H*W must be >= 1");
        }
        let (mean, var) = channel_moments(xv.data(), n, c, h * w);
        let mv = self.push("batch_mean", Tensor::from_vec(mean), &[x], Op::BatchMean(x))?;
        let vv = self.push("batch_var", Tensor::from_vec(var), &[x], Op::BatchVar(x))?;
        Ok((mv, vv))
    }

    /// `(x - mean[k]) / sqrt(var[k] + eps)` per channel `k`.
    pub fn normalize(&mut self, x: Var, mean: Var, var: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (_, c, h, w) = xv.nchw()?;
        let (mv, vv) = (self.value(mean), self.value(var));
        if mv.shape() != [c] || vv.shape() != [c] {
            return dim_err(format!("normalize: statistics must have {c} channels"));
        }
        if eps <= 0.0 {
            return Err(TensorError::Parameter("normalize: epsilon must be > 0".into()));
        }
        let hw = h * w;
        let inv: Vec<f64> = vv.data().iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let k = (i / hw) % c;
                (v - mv.data()[k]) * inv[k]
            })
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push("normalize", out, &[x, mean, var], Op::Normalize { x, mean, var, eps })
    }

    /// Row lookup: `table [K, C]` indexed by `rows` gives `[rows.len(), C]`.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (k, c) = match tv.shape() {
            [k, c] => (*k, *c),
            s => return dim_err(format!("gather_rows: table must be 2-D, got {s:?}")),
        };
        if let Some(&bad) = rows.iter().find(|&&r| r >= k) {
            return Err(TensorError::Parameter(format!("gather_rows: row {bad} out of range (table has {k})")));
        }
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            data.extend_from_slice(&tv.data()[r * c..(r + 1) * c]);
        }
        let out = Tensor::new(vec![rows.len(), c], data)?;
        self.push("gather_rows", out, &[table], Op::GatherRows { table, rows: rows.to_vec() })
    }

    /// Per-position convex mixing of table rows: with `weights [N, K, H, W]`
    /// and `table [K, C]`, returns `out[n, c, h, w] = Σ_k weights[n, k, h, w] · table[k, c]`.
    pub fn class_mix(&mut self, table: Var, weights: &Tensor) -> Result<Var> {
        let tv = self.value(table);
        let (k, c) = match tv.shape() {
            [k, c] => (*k, *c),
            s => return dim_err(format!("class_mix: table must be 2-D, got {s:?}")),
        };
        let (n, wk, h, w) = weights.nchw()?;
        if wk != k {
            return dim_err(format!("class_mix: weights carry {wk} classes, table has {k}"));
        }
        let hw = h * w;
        let mut out = vec![0.0; n * c * hw];
        for s in 0..n {
            for ch in 0..c {
                let dst = &mut out[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                for cls in 0..k {
                    let t = tv.data()[cls * c + ch];
                    let src = &weights.data()[(s * k + cls) * hw..(s * k + cls + 1) * hw];
                    for (d, &wt) in dst.iter_mut().zip(src) {
                        *d += wt * t;
                    }
                }
            }
        }
        let out = Tensor::new(vec![n, c, h, w], out)?;
        self.push("class_mix", out, &[table], Op::ClassMix { table, weights: weights.clone() })
    }

    /// `[N, C] -> [N, C, H, W]` by repetition.
    pub fn broadcast_spatial(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() != 2 {
            return dim_err(format!("broadcast_spatial: expected [N, C], got {:?}", xv.shape()));
        }
        let (n, c) = (xv.shape()[0], xv.shape()[1]);
        let data = xv.data().iter().flat_map(|&v| std::iter::repeat_n(v, h * w)).collect();
        let out = Tensor::new(vec![n, c, h, w], data)?;
        self.push("broadcast_spatial", out, &[x], Op::BroadcastSpatial(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        self.push("reshape", out, &[x], Op::Reshape(x))
    }

    /// Scales every row of `[N, F]` to unit Euclidean length.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() != 2 {
            return dim_err(format!("normalize_rows: expected [N, F], got {:?}", xv.shape()));
        }
        let f = xv.shape()[1];
        let norms: Vec<f64> = xv
            .data()
            .chunks(f.max(1))
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR))
            .collect();
        let data = xv.data().iter().enumerate().map(|(i, v)| v / norms[i / f]).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push("normalize_rows", out, &[x], Op::NormalizeRows { x, norms })
    }

    /// Row-wise inner products of two `[N, F]` tensors.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("row_dot", av, bv)?;
        if av.ndim() != 2 {
            return dim_err(format!("row_dot: expected [N, F], got {:?}", av.shape()));
        }
        let f = av.shape()[1].max(1);
        let data = av
            .data()
            .chunks(f)
            .zip(bv.data().chunks(f))
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum())
            .collect();
        let out = Tensor::new(vec![av.shape()[0]], data)?;
        self.push("row_dot", out, &[a, b], Op::RowDot(a, b))
    }

    // ---- backward ----------------------------------------------------------

    /// Accumulates d(output)/d(leaf) into every gradient-tracking leaf.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.value(output).numel() != 1 {
            return Err(TensorError::Usage(format!(
                "backward requires a scalar output, got shape {:?}",
                self.shape(output)
            )));
        }
        if !self.requires_grad(output) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let n = &self.nodes[v.0];
            if !n.requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n.value.numel()]);
            f(slot);
        };
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |d| d.iter_mut().zip(g).zip(bv).for_each(|((d, g), b)| *d += g * b));
                acc(*b, &mut |d| d.iter_mut().zip(g).zip(av).for_each(|((d, g), a)| *d += g * a));
            }
            Op::Scale(x, s) => acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += s * g)),
            Op::AddScalar(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::Relu(x) => {
                let xv = val(*x);
                acc(*x, &mut |d| {
                    d.iter_mut().zip(g).zip(xv).for_each(|((d, g), x)| {
                        if *x > 0.0 {
                            *d += g
                        }
                    })
                });
            }
            Op::Prelu { x, slope, inner } => {
                let (xv, sv) = (val(*x), val(*slope));
                let c = sv.len();
                acc(*x, &mut |d| {
                    for (j, dj) in d.iter_mut().enumerate() {
                        *dj += if xv[j] > 0.0 { g[j] } else { sv[(j / inner) % c] * g[j] };
                    }
                });
                acc(*slope, &mut |d| {
                    for (j, &xj) in xv.iter().enumerate() {
                        if xj <= 0.0 {
                            d[(j / inner) % c] += g[j] * xj;
                        }
                    }
                });
            }
            Op::Tanh(x) => acc(*x, &mut |d| {
                d.iter_mut().zip(g).zip(y).for_each(|((d, g), y)| *d += g * (1.0 - y * y))
            }),
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(x) => {
                let n = val(*x).len() as f64;
                acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::Dot(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |d| d.iter_mut().zip(bv).for_each(|(d, b)| *d += g[0] * b));
                acc(*b, &mut |d| d.iter_mut().zip(av).for_each(|(d, a)| *d += g[0] * a));
            }
            Op::L2Norm(x) => {
                let norm = y[0];
                if norm > 0.0 {
                    let xv = val(*x);
                    acc(*x, &mut |d| d.iter_mut().zip(xv).for_each(|(d, x)| *d += g[0] * x / norm));
                }
            }
            Op::Linear { x, w } => {
                let (xs, ws) = (self.shape(*x), self.shape(*w));
                let (n, i, o) = (xs[0], xs[1], ws[0]);
                let (xv, wv) = (val(*x), val(*w));
                acc(*x, &mut |d| gemm(n, o, i, g, false, wv, false, 1.0, d));
                acc(*w, &mut |d| gemm(o, n, i, g, true, xv, false, 1.0, d));
            }
            Op::AddBias { x, b, inner } => {
                acc(*x, &mut |d| add_into(d, g));
                let c = val(*b).len();
                acc(*b, &mut |d| {
                    for (j, gj) in g.iter().enumerate() {
                        d[(j / inner) % c] += gj;
                    }
                });
            }
            Op::Conv2d { x, w, geom } => self.conv_backward(*x, *w, geom, g, &mut acc),
            Op::SpectralNorm { w, u, v, sigma } => {
                let wv = val(*w);
                let proj: f64 = g.iter().zip(wv).map(|(g, w)| g * w).sum::<f64>() / (sigma * sigma);
                let cols = v.len();
                acc(*w, &mut |d| {
                    for (j, dj) in d.iter_mut().enumerate() {
                        *dj += g[j] / sigma - proj * u[j / cols] * v[j % cols];
                    }
                });
            }
            Op::Upsample { x, factor } => {
                let (_, _, h, w) = self.value(*x).nchw().expect("checked in forward");
                let (oh, ow) = (h * factor, w * factor);
                acc(*x, &mut |d| {
                    for (plane, dp) in d.chunks_mut(h * w).enumerate() {
                        let gp = &g[plane * oh * ow..(plane + 1) * oh * ow];
                        for yy in 0..oh {
                            for xx in 0..ow {
                                dp[(yy / factor) * w + xx / factor] += gp[yy * ow + xx];
                            }
                        }
                    }
                });
            }
            Op::DownsampleNearest { x, factor } => {
                let (_, _, h, w) = self.value(*x).nchw().expect("checked in forward");
                let (oh, ow) = (h / factor, w / factor);
                acc(*x, &mut |d| {
                    for (plane, dp) in d.chunks_mut(h * w).enumerate() {
                        for yy in 0..oh {
                            for xx in 0..ow {
                                dp[yy * factor * w + xx * factor] += g[(plane * oh + yy) * ow + xx];
                            }
                        }
                    }
                });
            }
            Op::AvgPool { x, factor } => {
                let (_, _, h, w) = self.value(*x).nchw().expect("checked in forward");
                let (oh, ow) = (h / factor, w / factor);
                let area = (factor * factor) as f64;
                acc(*x, &mut |d| {
                    for (plane, dp) in d.chunks_mut(h * w).enumerate() {
                        for yy in 0..h {
                            for xx in 0..w {
                                dp[yy * w + xx] += g[(plane * oh + yy / factor) * ow + xx / factor] / area;
                            }
                        }
                    }
                });
            }
            Op::GlobalAvgPool(x) => {
                let (_, _, h, w) = self.value(*x).nchw().expect("checked in forward");
                let hw = h * w;
                acc(*x, &mut |d| {
                    for (plane, dp) in d.chunks_mut(hw).enumerate() {
                        let gv = g[plane] / hw as f64;
                        dp.iter_mut().for_each(|v| *v += gv);
                    }
                });
            }
            Op::BatchMean(x) => {
                let (n, c, h, w) = self.value(*x).nchw().expect("checked in forward");
                let hw = h * w;
                let m = (n * hw) as f64;
                acc(*x, &mut |d| {
                    for (j, dj) in d.iter_mut().enumerate() {
                        *dj += g[(j / hw) % c] / m;
                    }
                });
            }
            Op::BatchVar(x) => {
                let xt = self.value(*x);
                let (n, c, h, w) = xt.nchw().expect("checked in forward");
                let hw = h * w;
                let m = (n * hw) as f64;
                let (mean, _) = channel_moments(xt.data(), n, c, hw);
                let xv = xt.data();
                acc(*x, &mut |d| {
                    for (j, dj) in d.iter_mut().enumerate() {
                        let k = (j / hw) % c;
                        *dj += g[k] * 2.0 * (xv[j] - mean[k]) / m;
                    }
                });
            }
            Op::Normalize { x, mean, var, eps } => {
                let (_, c, h, w) = self.value(*x).nchw().expect("checked in forward");
                let hw = h * w;
                let (xv, mv, vv) = (val(*x), val(*mean), val(*var));
                let inv: Vec<f64> = vv.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                acc(*x, &mut |d| {
                    for (j, dj) in d.iter_mut().enumerate() {
                        *dj += g[j] * inv[(j / hw) % c];
                    }
                });
                acc(*mean, &mut |d| {
                    for (j, gj) in g.iter().enumerate() {
                        let k = (j / hw) % c;
                        d[k] -= gj * inv[k];
                    }
                });
                acc(*var, &mut |d| {
                    for (j, gj) in g.iter().enumerate() {
                        let k = (j / hw) % c;
                        d[k] -= 0.5 * gj * (xv[j] - mv[k]) * inv[k].powi(3);
                    }
                });
            }
            Op::GatherRows { table, rows } => {
                let c = self.shape(*table)[1];
                acc(*table, &mut |d| {
                    for (s, &r) in rows.iter().enumerate() {
                        add_into(&mut d[r * c..(r + 1) * c], &g[s * c..(s + 1) * c]);
                    }
                });
            }
            Op::ClassMix { table, weights } => {
                let c = self.shape(*table)[1];
                let (n, k, h, w) = weights.nchw().expect("checked in forward");
                let hw = h * w;
                acc(*table, &mut |d| {
                    for s in 0..n {
                        for ch in 0..c {
                            let gp = &g[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                            for cls in 0..k {
                                let wp = &weights.data()[(s * k + cls) * hw..(s * k + cls + 1) * hw];
                                d[cls * c + ch] += gp.iter().zip(wp).map(|(a, b)| a * b).sum::<f64>();
                            }
                        }
                    }
                });
            }
            Op::BroadcastSpatial(x) => {
                let hw = g.len() / val(*x).len().max(1);
                acc(*x, &mut |d| {
                    for (dj, gc) in d.iter_mut().zip(g.chunks(hw)) {
                        *dj += gc.iter().sum::<f64>();
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::NormalizeRows { x, norms } => {
                let f = g.len() / norms.len().max(1);
                acc(*x, &mut |d| {
                    for (r, norm) in norms.iter().enumerate() {
                        let (yr, gr) = (&y[r * f..(r + 1) * f], &g[r * f..(r + 1) * f]);
                        let proj: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..f {
                            d[r * f + j] += (gr[j] - yr[j] * proj) / norm;
                        }
                    }
                });
            }
            Op::RowDot(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let f = av.len() / g.len().max(1);
                acc(*a, &mut |d| d.iter_mut().enumerate().for_each(|(j, d)| *d += g[j / f] * bv[j]));
                acc(*b, &mut |d| d.iter_mut().enumerate().for_each(|(j, d)| *d += g[j / f] * av[j]));
            }
            Op::Translate { x, dy, dx } => {
                let (_, _, h, w) = self.value(*x).nchw().expect("checked in forward");
                acc(*x, &mut |d| {
                    for (plane, dp) in d.chunks_mut(h * w).enumerate() {
                        for yy in 0..h as isize {
                            let sy = yy - dy;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for xx in 0..w as isize {
                                let sx = xx - dx;
                                if sx >= 0 && sx < w as isize {
                                    dp[sy as usize * w + sx as usize] += g[plane * h * w + yy as usize * w + xx as usize];
                                }
                            }
                        }
                    }
                });
            }
            Op::MaskMul { x, mask } => {
                let m = mask.data();
                acc(*x, &mut |d| d.iter_mut().enumerate().for_each(|(j, d)| *d += g[j] * m[j % m.len()]));
            }
        }
    }

    fn conv_backward(&self, x: Var, w: Var, geom: &ConvGeom, g: &[f64], acc: &mut dyn FnMut(Var, &mut dyn FnMut(&mut [f64]))) {
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let n = self.shape(x)[0];
        let o = self.shape(w)[0];
        let (k, p) = (geom.rows(), geom.cols());
        let in_size = geom.c * geom.h * geom.w;
        if self.requires_grad(w) {
            acc(w, &mut |d| {
                let mut cols = vec![0.0; if geom.is_pointwise() { 0 } else { k * p }];
                for s in 0..n {
                    let img = &xv[s * in_size..(s + 1) * in_size];
                    let patches: &[f64] = if geom.is_pointwise() {
                        img
                    } else {
                        im2col(img, geom, &mut cols);
                        &cols
                    };
                    gemm(o, p, k, &g[s * o * p..(s + 1) * o * p], false, patches, true, 1.0, d);
                }
            });
        }
        if self.requires_grad(x) {
            acc(x, &mut |d| {
                let mut dcols = vec![0.0; k * p];
                for s in 0..n {
                    let gs = &g[s * o * p..(s + 1) * o * p];
                    let dimg = &mut d[s * in_size..(s + 1) * in_size];
                    if geom.is_pointwise() {
                        gemm(k, o, p, wv, true, gs, false, 1.0, dimg);
                    } else {
                        gemm(k, o, p, wv, true, gs, false, 0.0, &mut dcols);
                        col2im(&dcols, geom, dimg);
                    }
                }
            });
        }
    }
}

const SIGMA_FLOOR: f64 = 1e-12;
const NORM_FLOOR: f64 = 1e-12;

fn add_into(d: &mut [f64], g: &[f64]) {
    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
}

fn bilinear(w: &[f64], u: &[f64], v: &[f64]) -> f64 {
    let cols = v.len();
    u.iter()
        .enumerate()
        .map(|(r, ur)| ur * w[r * cols..(r + 1) * cols].iter().zip(v).map(|(a, b)| a * b).sum::<f64>())
        .sum()
}

/// Per-channel mean and biased variance (two-pass).
fn channel_moments(x: &[f64], n: usize, c: usize, hw: usize) -> (Vec<f64>, Vec<f64>) {
    let m = (n * hw) as f64;
    let mut mean = vec![0.0; c];
    for s in 0..n {
        for (k, mk) in mean.iter_mut().enumerate() {
            *mk += x[(s * c + k) * hw..(s * c + k + 1) * hw].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    let mut var = vec![0.0; c];
    for s in 0..n {
        for k in 0..c {
            var[k] += x[(s * c + k) * hw..(s * c + k + 1) * hw]
                .iter()
                .map(|v| (v - mean[k]) * (v - mean[k]))
                .sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= m);
    (mean, var)
}
