//! Layer kinds with exact analytic backward passes, the softmax
//! cross-entropy loss and the plain SGD step.
//!
//! Batched tensors carry the batch on the leading axis. Spatial layers use
//! `[batch, channels, height, width]`.

use std::fmt;

use rand::RngCore;

use crate::error::{Error, Result};
use crate::rng::standard_normal;
use crate::tensor::{GradientSet, ParameterSet, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    /// `y = x Wᵀ + b`, weight `[outputs, inputs]`, bias `[outputs]`.
    Dense {
        inputs: usize,
        outputs: usize,
    },
    /// Cross-correlation, weight `[out, in, kernel, kernel]`, bias `[out]`.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    MaxPool2d {
        size: usize,
        stride: usize,
    },
    AvgPool2d {
        size: usize,
        stride: usize,
    },
    Relu,
    Tanh,
    Flatten,
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerSpec::Dense { inputs, outputs } => write!(f, "dense({inputs}->{outputs})"),
            LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, padding } => {
                write!(f, "conv2d({in_channels}->{out_channels}, k={kernel}, s={stride}, p={padding})")
            }
            LayerSpec::MaxPool2d { size, stride } => write!(f, "maxpool2d({size}, s={stride})"),
            LayerSpec::AvgPool2d { size, stride } => write!(f, "avgpool2d({size}, s={stride})"),
            LayerSpec::Relu => f.write_str("relu"),
            LayerSpec::Tanh => f.write_str("tanh"),
            LayerSpec::Flatten => f.write_str("flatten"),
        }
    }
}

/// Weight initialisation scheme for dense and convolutional layers. Biases
/// always start at zero.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Initializer {
    #[default]
    XavierUniform,
    /// Uniform on ±√(6/fan_in), suited to ReLU stacks.
    HeUniform,
    /// Zero-mean Gaussian with the given standard deviation.
    Gaussian { std: f64 },
}

fn parse_usize(kind: &str, field: Option<&str>, default: Option<usize>) -> Result<usize> {
    match (field, default) {
        (Some(s), _) => s.trim().parse().map_err(|_| Error::InvalidArchitecture(format!("{kind}: bad number `{s}`"))),
        (None, Some(d)) => Ok(d),
        (None, None) => Err(Error::InvalidArchitecture(format!("{kind}: missing argument"))),
    }
}

fn expect_rank(kind: &str, input: &[usize], rank: usize) -> Result<()> {
    if input.len() != rank {
        return Err(Error::ShapeMismatch(format!("{kind} expects a rank-{rank} sample, got {input:?}")));
    }
    Ok(())
}

impl LayerSpec {
    /// Parses a compact layer token such as `dense:120`, `conv2d:6:5`,
    /// `conv2d:6:3:1:1`, `maxpool2d:2`, `relu`, given the per-sample input
    /// shape the layer will receive.
    pub fn parse(token: &str, input: &[usize]) -> Result<LayerSpec> {
        let mut parts = token.split(':');
        let kind = parts.next().unwrap_or("").trim();
        let args: Vec<&str> = parts.collect();
        let arg = |i: usize| args.get(i).copied();
        let spec = match kind {
            "dense" => {
                let inputs = input.iter().product();
                LayerSpec::Dense { inputs, outputs: parse_usize(kind, arg(0), None)? }
            }
            "conv2d" => {
                expect_rank(kind, input, 3)?;
                LayerSpec::Conv2d {
                    in_channels: input[0],
                    out_channels: parse_usize(kind, arg(0), None)?,
                    kernel: parse_usize(kind, arg(1), None)?,
                    stride: parse_usize(kind, arg(2), Some(1))?,
                    padding: parse_usize(kind, arg(3), Some(0))?,
                }
            }
            "maxpool2d" | "avgpool2d" => {
                let size = parse_usize(kind, arg(0), None)?;
                let stride = parse_usize(kind, arg(1), Some(size))?;
                if kind == "maxpool2d" {
                    LayerSpec::MaxPool2d { size, stride }
                } else {
                    LayerSpec::AvgPool2d { size, stride }
                }
            }
            "relu" => LayerSpec::Relu,
            "tanh" => LayerSpec::Tanh,
            "flatten" => LayerSpec::Flatten,
            other => return Err(Error::UnknownLayerKind(other.to_string())),
        };
        spec.output_shape(input)?;
        Ok(spec)
    }

    /// Shapes of the layer's parameter tensors, named by role.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            LayerSpec::Dense { inputs, outputs } => {
                vec![("weight", vec![outputs, inputs]), ("bias", vec![outputs])]
            }
            LayerSpec::Conv2d { in_channels, out_channels, kernel, .. } => {
                vec![("weight", vec![out_channels, in_channels, kernel, kernel]), ("bias", vec![out_channels])]
            }
            _ => Vec::new(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerSpec::Dense { inputs, outputs } => {
                if input.len() != 1 || input[0] != inputs {
                    return Err(Error::ShapeMismatch(format!("dense expects [{inputs}], got {input:?}")));
                }
                Ok(vec![outputs])
            }
            LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, padding } => {
                expect_rank("conv2d", input, 3)?;
                if input[0] != in_channels {
                    return Err(Error::ShapeMismatch(format!("conv2d expects {in_channels} channels, got {input:?}")));
                }
                if stride == 0 || kernel == 0 {
                    return Err(Error::InvalidArchitecture("conv2d stride/kernel must be > 0".into()));
                }
                let h = input[1] + 2 * padding;
                let w = input[2] + 2 * padding;
                if h < kernel || w < kernel {
                    return Err(Error::ShapeMismatch(format!(
                        "conv2d kernel {kernel} larger than padded input {input:?}"
                    )));
                }
                Ok(vec![out_channels, (h - kernel) / stride + 1, (w - kernel) / stride + 1])
            }
            LayerSpec::MaxPool2d { size, stride } | LayerSpec::AvgPool2d { size, stride } => {
                expect_rank("pool2d", input, 3)?;
                if size == 0 || stride == 0 {
                    return Err(Error::InvalidArchitecture("pool size/stride must be > 0".into()));
                }
                if input[1] < size || input[2] < size {
                    return Err(Error::ShapeMismatch(format!("pool window {size} larger than input {input:?}")));
                }
                Ok(vec![input[0], (input[1] - size) / stride + 1, (input[2] - size) / stride + 1])
            }
            LayerSpec::Relu | LayerSpec::Tanh => Ok(input.to_vec()),
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    /// Draws fresh parameters for this layer.
    pub fn init_params(&self, init: Initializer, rng: &mut dyn RngCore) -> Vec<Tensor> {
        let (fan_in, fan_out) = match *self {
            LayerSpec::Dense { inputs, outputs } => (inputs, outputs),
            LayerSpec::Conv2d { in_channels, out_channels, kernel, .. } => {
                (in_channels * kernel * kernel, out_channels * kernel * kernel)
            }
            _ => return Vec::new(),
        };
        self.param_shapes()
            .into_iter()
            .map(|(role, shape)| {
                let mut t = Tensor::zeros(shape);
                if role == "weight" {
                    for v in t.data_mut() {
                        *v = match init {
                            Initializer::XavierUniform => {
                                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                                let u = crate::rng::unit_uniform(rng);
                                (2.0 * u - 1.0) * limit
                            }
                            Initializer::HeUniform => {
                                let limit = (6.0 / fan_in as f64).sqrt();
                                let u = crate::rng::unit_uniform(rng);
                                (2.0 * u - 1.0) * limit
                            }
                            Initializer::Gaussian { std } => std * standard_normal(rng),
                        };
                    }
                }
                t
            })
            .collect()
    }
}

fn check_input(layer: &LayerSpec, input: &Tensor) -> Result<Vec<usize>> {
    if input.rank() < 1 {
        return Err(Error::ShapeMismatch(format!("{layer}: input must be batched")));
    }
    layer.output_shape(&input.shape()[1..])
}

fn check_params<P: AsRef<Tensor>>(layer: &LayerSpec, params: &[P]) -> Result<()> {
    let shapes = layer.param_shapes();
    if shapes.len() != params.len() {
        return Err(Error::ShapeMismatch(format!(
            "{layer}: expected {} parameter tensors, got {}",
            shapes.len(),
            params.len()
        )));
    }
    for ((role, shape), t) in shapes.iter().zip(params) {
        let t = t.as_ref();
        if t.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch(format!("{layer}: {role} should be {shape:?}, got {:?}", t.shape())));
        }
    }
    Ok(())
}

fn batched(batch: usize, sample: &[usize]) -> Vec<usize> {
    let mut shape = Vec::with_capacity(sample.len() + 1);
    shape.push(batch);
    shape.extend_from_slice(sample);
    shape
}

/// Range of output positions `o` for which `o * stride + k - pad` lands in
/// `[0, len)`.
#[inline]
fn valid_range(out_len: usize, len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    // o * stride + k - pad <= len - 1
    let hi = if len + pad < k + 1 { 0 } else { (len + pad - k - 1) / stride + 1 };
    (lo.min(out_len), hi.min(out_len))
}

/// `C ← A·B + beta·C` for an m×k by k×n product. Each operand is given by
/// its slice and `[row stride, column stride]`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: [usize; 2],
    b: &[f64],
    sb: [usize; 2],
    beta: f64,
    c: &mut [f64],
    sc: [usize; 2],
) {
    let span = |rows: usize, cols: usize, s: [usize; 2]| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * s[0] + (cols - 1) * s[1] + 1
        }
    };
    assert!(a.len() >= span(m, k, sa) && b.len() >= span(k, n, sb) && c.len() >= span(m, n, sc));
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the assertion above keeps every strided access in bounds and
    // `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa[0] as isize,
            sa[1] as isize,
            b.as_ptr(),
            sb[0] as isize,
            sb[1] as isize,
            beta,
            c.as_mut_ptr(),
            sc[0] as isize,
            sc[1] as isize,
        );
    }
}

/// Index bookkeeping for one convolution over a single sample.
struct ConvGeometry {
    channels: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeometry {
    fn new(
        input: &[usize],
        out_sample: &[usize],
        channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        Self { channels, h: input[2], w: input[3], oh: out_sample[1], ow: out_sample[2], kernel, stride, padding }
    }

    fn in_len(&self) -> usize {
        self.channels * self.h * self.w
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    /// Rows of the unfolded matrix, one per (channel, ky, kx).
    fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    /// Visits every (column row, output row) pair with the input row it
    /// reads and the valid output column range.
    #[inline]
    fn for_each_row(&self, mut f: impl FnMut(usize, usize, usize, usize, usize, usize)) {
        let k = self.kernel;
        for c in 0..self.channels {
            for ky in 0..k {
                let (oy0, oy1) = valid_range(self.oh, self.h, ky, self.stride, self.padding);
                for kx in 0..k {
                    let r = (c * k + ky) * k + kx;
                    let (ox0, ox1) = valid_range(self.ow, self.w, kx, self.stride, self.padding);
                    for oy in oy0..oy1 {
                        let iy = oy * self.stride + ky - self.padding;
                        f(r, oy, c * self.h * self.w + iy * self.w, kx, ox0, ox1);
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        cols.fill(0.0);
        let (plane, ow, s, p) = (self.out_plane(), self.ow, self.stride, self.padding);
        self.for_each_row(|r, oy, row_start, kx, ox0, ox1| {
            let dst = &mut cols[r * plane + oy * ow..][..ow];
            for ox in ox0..ox1 {
                dst[ox] = x[row_start + ox * s + kx - p];
            }
        });
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let (plane, ow, s, p) = (self.out_plane(), self.ow, self.stride, self.padding);
        self.for_each_row(|r, oy, row_start, kx, ox0, ox1| {
            let src = &cols[r * plane + oy * ow..][..ow];
            for ox in ox0..ox1 {
                dx[row_start + ox * s + kx - p] += src[ox];
            }
        });
    }
}

/// Runs one layer forward on a batch.
pub fn layer_forward<P: AsRef<Tensor>>(layer: &LayerSpec, input: &Tensor, params: &[P]) -> Result<Tensor> {
    let out_sample = check_input(layer, input)?;
    check_params(layer, params)?;
    let batch = input.rows();
    let out_shape = batched(batch, &out_sample);
    let x = input.data();
    match *layer {
        LayerSpec::Dense { inputs, outputs } => {
            let (w, b) = (params[0].as_ref().data(), params[1].as_ref().data());
            let mut y = Vec::with_capacity(batch * outputs);
            for _ in 0..batch {
                y.extend_from_slice(b);
            }
            // Y = X·Wᵀ + bias
            gemm(batch, inputs, outputs, x, [inputs, 1], w, [1, inputs], 1.0, &mut y, [outputs, 1]);
            Tensor::new(out_shape, y)
        }
        LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, padding } => {
            let geo = ConvGeometry::new(input.shape(), &out_sample, in_channels, kernel, stride, padding);
            let (w, b) = (params[0].as_ref().data(), params[1].as_ref().data());
            let rows = geo.col_rows();
            let out_plane = geo.out_plane();
            let mut cols = vec![0.0; rows * out_plane];
            let mut y = vec![0.0; batch * out_channels * out_plane];
            for (xs, ys) in x.chunks_exact(geo.in_len()).zip(y.chunks_exact_mut(out_channels * out_plane)) {
                geo.im2col(xs, &mut cols);
                for (yp, &bo) in ys.chunks_exact_mut(out_plane).zip(b) {
                    yp.fill(bo);
                }
                gemm(out_channels, rows, out_plane, w, [rows, 1], &cols, [out_plane, 1], 1.0, ys, [out_plane, 1]);
            }
            Tensor::new(out_shape, y)
        }
        LayerSpec::MaxPool2d { size, stride } | LayerSpec::AvgPool2d { size, stride } => {
            let is_max = matches!(layer, LayerSpec::MaxPool2d { .. });
            let (ch, h, wd) = (input.shape()[1], input.shape()[2], input.shape()[3]);
            let (oh, ow) = (out_sample[1], out_sample[2]);
            let mut y = vec![0.0; batch * ch * oh * ow];
            let norm = 1.0 / (size * size) as f64;
            for p in 0..batch * ch {
                let xp = &x[p * h * wd..(p + 1) * h * wd];
                let yp = &mut y[p * oh * ow..(p + 1) * oh * ow];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = if is_max { f64::NEG_INFINITY } else { 0.0 };
                        for dy in 0..size {
                            let row = &xp[(oy * stride + dy) * wd + ox * stride..][..size];
                            for &v in row {
                                if is_max {
                                    if v > acc {
                                        acc = v;
                                    }
                                } else {
                                    acc += v;
                                }
                            }
                        }
                        yp[oy * ow + ox] = if is_max { acc } else { acc * norm };
                    }
                }
            }
            Tensor::new(out_shape, y)
        }
        LayerSpec::Relu => Tensor::new(out_shape, x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()),
        LayerSpec::Tanh => Tensor::new(out_shape, x.iter().map(|v| v.tanh()).collect()),
        LayerSpec::Flatten => input.clone().reshape(out_shape),
    }
}

/// Backward pass of one layer: given the layer input and the gradient of the
/// loss with respect to the layer output, returns the gradient with respect
/// to the input and to each parameter tensor.
pub fn layer_backward<P: AsRef<Tensor>>(
    layer: &LayerSpec,
    input: &Tensor,
    upstream: &Tensor,
    params: &[P],
) -> Result<(Tensor, Vec<Tensor>)> {
    let out_sample = check_input(layer, input)?;
    check_params(layer, params)?;
    let batch = input.rows();
    let out_shape = batched(batch, &out_sample);
    if upstream.shape() != out_shape.as_slice() {
        return Err(Error::ShapeMismatch(format!(
            "{layer}: upstream gradient {:?}, expected {out_shape:?}",
            upstream.shape()
        )));
    }
    let x = input.data();
    let g = upstream.data();
    let mut dx = vec![0.0; x.len()];
    let param_grads = match *layer {
        LayerSpec::Dense { inputs, outputs } => {
            let w = params[0].as_ref().data();
            let mut dw = vec![0.0; outputs * inputs];
            let mut db = vec![0.0; outputs];
            for gr in g.chunks_exact(outputs) {
                for (d, &go) in db.iter_mut().zip(gr) {
                    *d += go;
                }
            }
            // dW = Gᵀ·X, dX = G·W
            gemm(outputs, batch, inputs, g, [1, outputs], x, [inputs, 1], 0.0, &mut dw, [inputs, 1]);
            gemm(batch, outputs, inputs, g, [outputs, 1], w, [inputs, 1], 0.0, &mut dx, [inputs, 1]);
            vec![Tensor::new(vec![outputs, inputs], dw)?, Tensor::new(vec![outputs], db)?]
        }
        LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, padding } => {
            let geo = ConvGeometry::new(input.shape(), &out_sample, in_channels, kernel, stride, padding);
            let w = params[0].as_ref().data();
            let rows = geo.col_rows();
            let out_plane = geo.out_plane();
            let mut dw = vec![0.0; w.len()];
            let mut db = vec![0.0; out_channels];
            let mut cols = vec![0.0; rows * out_plane];
            let mut dcols = vec![0.0; rows * out_plane];
            for ((xs, gs), dxs) in x
                .chunks_exact(geo.in_len())
                .zip(g.chunks_exact(out_channels * out_plane))
                .zip(dx.chunks_exact_mut(geo.in_len()))
            {
                geo.im2col(xs, &mut cols);
                for (gp, dbo) in gs.chunks_exact(out_plane).zip(db.iter_mut()) {
                    *dbo += gp.iter().sum::<f64>();
                }
                // dW += G·colsᵀ, dcols = Wᵀ·G
                gemm(out_channels, out_plane, rows, gs, [out_plane, 1], &cols, [1, out_plane], 1.0, &mut dw, [rows, 1]);
                gemm(rows, out_channels, out_plane, w, [1, rows], gs, [out_plane, 1], 0.0, &mut dcols, [out_plane, 1]);
                geo.col2im(&dcols, dxs);
            }
            vec![Tensor::new(params[0].as_ref().shape().to_vec(), dw)?, Tensor::new(vec![out_channels], db)?]
        }
        LayerSpec::MaxPool2d { size, stride } | LayerSpec::AvgPool2d { size, stride } => {
            let is_max = matches!(layer, LayerSpec::MaxPool2d { .. });
            let (ch, h, wd) = (input.shape()[1], input.shape()[2], input.shape()[3]);
            let (oh, ow) = (out_sample[1], out_sample[2]);
            let norm = 1.0 / (size * size) as f64;
            for p in 0..batch * ch {
                let xp = &x[p * h * wd..(p + 1) * h * wd];
                let gp = &g[p * oh * ow..(p + 1) * oh * ow];
                let dxp = &mut dx[p * h * wd..(p + 1) * h * wd];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let gv = gp[oy * ow + ox];
                        if is_max {
                            // first maximum in row-major window order wins
                            let mut best = f64::NEG_INFINITY;
                            let mut at = 0;
                            for dy in 0..size {
                                for dxw in 0..size {
                                    let idx = (oy * stride + dy) * wd + ox * stride + dxw;
                                    if xp[idx] > best {
                                        best = xp[idx];
                                        at = idx;
                                    }
                                }
                            }
                            dxp[at] += gv;
                        } else {
                            for dy in 0..size {
                                for dxw in 0..size {
                                    dxp[(oy * stride + dy) * wd + ox * stride + dxw] += gv * norm;
                                }
                            }
                        }
                    }
                }
            }
            Vec::new()
        }
        LayerSpec::Relu => {
            for ((d, &xv), &gv) in dx.iter_mut().zip(x).zip(g) {
                *d = if xv > 0.0 { gv } else { 0.0 };
            }
            Vec::new()
        }
        LayerSpec::Tanh => {
            for ((d, &xv), &gv) in dx.iter_mut().zip(x).zip(g) {
                let y = xv.tanh();
                *d = gv * (1.0 - y * y);
            }
            Vec::new()
        }
        LayerSpec::Flatten => {
            dx.copy_from_slice(g);
            Vec::new()
        }
    };
    Ok((Tensor::new(input.shape().to_vec(), dx)?, param_grads))
}

/// Mean softmax cross-entropy over the batch and its gradient with respect
/// to the logits, `(softmax - onehot) / batch`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    if logits.rank() != 2 || logits.rows() != labels.len() {
        return Err(Error::ShapeMismatch(format!("logits {:?} vs {} labels", logits.shape(), labels.len())));
    }
    let classes = logits.shape()[1];
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let batch = labels.len();
    let inv = 1.0 / batch as f64;
    let mut grad = vec![0.0; logits.len()];
    let mut loss = 0.0;
    for ((row, grow), &label) in logits.data().chunks_exact(classes).zip(grad.chunks_exact_mut(classes)).zip(labels) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (gv, &z) in grow.iter_mut().zip(row) {
            let e = (z - max).exp();
            *gv = e;
            sum += e;
        }
        loss += sum.ln() + max - row[label];
        for gv in grow.iter_mut() {
            *gv = *gv / sum * inv;
        }
        grow[label] -= inv;
    }
    Ok((loss * inv, Tensor::new(logits.shape().to_vec(), grad)?))
}

/// In-place SGD step `w ← w − lr·g` on every entry; bumps the version.
pub fn sgd_step(params: &mut ParameterSet, grads: &GradientSet, lr: f64) -> Result<()> {
    if !lr.is_finite() || lr < 0.0 {
        return Err(Error::Config(format!("learning rate must be finite and >= 0, got {lr}")));
    }
    grads.ensure_matches(params)?;
    for ((_, w), (_, g)) in params.entries_mut().iter_mut().zip(grads.entries()) {
        for (wv, gv) in w.data_mut().iter_mut().zip(g.data()) {
            *wv -= lr * gv;
        }
    }
    params.version += 1;
    Ok(())
}

/// Returns `params − lr·grads` with the version incremented.
pub fn sgd_update(params: &ParameterSet, grads: &GradientSet, lr: f64) -> Result<ParameterSet> {
    let mut next = params.clone();
    sgd_step(&mut next, grads, lr)?;
    Ok(next)
}

/// Mini-batch SGD with optional heavy-ball momentum:
/// `v ← μ·v + g`, `w ← w − η·v`. With μ = 0 this is exactly [`sgd_step`].
#[derive(Debug, Clone)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Option<GradientSet>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        Self { learning_rate, momentum, velocity: None }
    }

    pub fn step(&mut self, params: &mut ParameterSet, grads: &GradientSet) -> Result<()> {
        if self.momentum == 0.0 {
            return sgd_step(params, grads, self.learning_rate);
        }
        match &mut self.velocity {
            None => self.velocity = Some(grads.clone()),
            Some(v) => {
                v.scale(self.momentum);
                v.add_scaled(grads, 1.0)?;
            }
        }
        sgd_step(params, self.velocity.as_ref().expect("set above"), self.learning_rate)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn dense_identity() {
        let layer = LayerSpec::Dense { inputs: 2, outputs: 2 };
        let params = [t(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]), t(vec![2], vec![0.0, 0.0])];
        let y = layer_forward(&layer, &t(vec![1, 2], vec![1.0, 2.0]), &params).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);
        let g = t(vec![1, 2], vec![0.3, -0.7]);
        let (dx, _) = layer_backward(&layer, &t(vec![1, 2], vec![1.0, 2.0]), &g, &params).unwrap();
        assert_eq!(dx.data(), g.data());
    }

    #[test]
    fn relu_forward_and_subgradient() {
        let y = layer_forward::<Tensor>(&LayerSpec::Relu, &t(vec![1, 3], vec![-1.0, 0.0, 3.0]), &[]).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 3.0]);
        let (dx, _) = layer_backward::<Tensor>(
            &LayerSpec::Relu,
            &t(vec![1, 3], vec![-1.0, 0.0, 3.0]),
            &t(vec![1, 3], vec![1.0, 1.0, 1.0]),
            &[],
        )
        .unwrap();
        assert_eq!(dx.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn maxpool_takes_window_max() {
        let layer = LayerSpec::MaxPool2d { size: 2, stride: 2 };
        let y = layer_forward::<Tensor>(&layer, &t(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]), &[]).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[4.0]);
    }

    #[test]
    fn avgpool_averages_window() {
        let layer = LayerSpec::AvgPool2d { size: 2, stride: 2 };
        let y = layer_forward::<Tensor>(&layer, &t(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]), &[]).unwrap();
        assert_eq!(y.data(), &[2.5]);
    }

    #[test]
    fn conv_with_padding_matches_hand_computation() {
        // 1x1 channel, 2x2 input, 2x2 kernel of ones, padding 1 -> 3x3 output of partial sums
        let layer = LayerSpec::Conv2d { in_channels: 1, out_channels: 1, kernel: 2, stride: 1, padding: 1 };
        let params = [t(vec![1, 1, 2, 2], vec![1.0; 4]), t(vec![1], vec![0.5])];
        let y = layer_forward(&layer, &t(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]), &params).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        let expect = [1.0, 3.0, 2.0, 4.0, 10.0, 6.0, 3.0, 7.0, 4.0];
        for (a, b) in y.data().iter().zip(expect) {
            assert_eq!(*a, b + 0.5);
        }
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let layer = LayerSpec::Dense { inputs: 3, outputs: 2 };
        let params = [Tensor::zeros(vec![2, 3]), Tensor::zeros(vec![2])];
        let err = layer_forward(&layer, &t(vec![1, 2], vec![1.0, 2.0]), &params);
        assert!(matches!(err, Err(Error::ShapeMismatch(_))));
        let err = layer_forward(&layer, &Tensor::zeros(vec![1, 3]), &params[..1]);
        assert!(matches!(err, Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn upstream_shape_checked() {
        let err =
            layer_backward::<Tensor>(&LayerSpec::Relu, &Tensor::zeros(vec![2, 3]), &Tensor::zeros(vec![2, 2]), &[]);
        assert!(matches!(err, Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn parse_rejects_unknown_kind() {
        assert!(matches!(LayerSpec::parse("dropout:0.5", &[10]), Err(Error::UnknownLayerKind(_))));
        assert_eq!(
            LayerSpec::parse("conv2d:6:5", &[1, 32, 32]).unwrap(),
            LayerSpec::Conv2d { in_channels: 1, out_channels: 6, kernel: 5, stride: 1, padding: 0 }
        );
    }

    #[test]
    fn cross_entropy_uniform_and_saturated() {
        let (loss, grad) = softmax_cross_entropy(&t(vec![1, 2], vec![0.0, 0.0]), &[0]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(grad.data(), &[-0.5, 0.5]);
        let (loss, grad) = softmax_cross_entropy(&t(vec![1, 2], vec![1000.0, 0.0]), &[0]).unwrap();
        assert!(loss.abs() < 1e-12 && loss >= 0.0);
        assert!(grad.is_finite());
    }

    #[test]
    fn cross_entropy_label_range() {
        let err = softmax_cross_entropy(&Tensor::zeros(vec![1, 3]), &[3]);
        assert!(matches!(err, Err(Error::LabelOutOfRange { label: 3, classes: 3 })));
    }

    #[test]
    fn sgd_arithmetic_and_fixed_point() {
        let p = ParameterSet::new(vec![("w".into(), Tensor::from_vec(vec![1.0]))]).unwrap();
        let g = GradientSet::new(vec![("w".into(), Tensor::from_vec(vec![0.5]))]);
        let next = sgd_update(&p, &g, 0.1).unwrap();
        assert!((next.get("w").unwrap().data()[0] - 0.95).abs() < 1e-15);
        assert_eq!(next.version, 1);
        let zero = GradientSet::zeros_like(&p);
        let same = sgd_update(&p, &zero, 0.1).unwrap();
        assert_eq!(same.entries(), p.entries());
        assert_eq!(same.version, p.version + 1);
    }

    #[test]
    fn momentum_accumulates_velocity() {
        let mut p = ParameterSet::new(vec![("w".into(), t(vec![1], vec![1.0]))]).unwrap();
        let g = GradientSet::new(vec![("w".into(), t(vec![1], vec![1.0]))]);
        let mut opt = Sgd::new(0.1, 0.5);
        opt.step(&mut p, &g).unwrap();
        opt.step(&mut p, &g).unwrap();
        // 1 − 0.1·1 − 0.1·1.5
        assert!((p.entries()[0].1.data()[0] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn sgd_rejects_incongruent_gradients() {
        let p = ParameterSet::new(vec![("w".into(), Tensor::from_vec(vec![1.0]))]).unwrap();
        let g = GradientSet::new(vec![("w".into(), Tensor::from_vec(vec![0.5, 1.0]))]);
        assert!(matches!(sgd_update(&p, &g, 0.1), Err(Error::ShapeMismatch(_))));
    }
}
