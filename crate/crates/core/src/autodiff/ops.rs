use super::conv::{self, ConvGeometry};
use super::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
}

impl Backward for Binary {
    fn backward(&self, grad: &Tensor, inputs: &[&Tensor], _: &Tensor) -> Result<Vec<Option<Tensor>>> {
        Ok(match self {
            Binary::Add => vec![Some(grad.clone()), Some(grad.clone())],
            Binary::Sub => vec![Some(grad.clone()), Some(grad.map(|g| -g))],
            Binary::Mul => vec![
                Some(grad.zip_map(inputs[1], |g, b| g * b)?),
                Some(grad.zip_map(inputs[0], |g, a| g * a)?),
            ],
        })
    }
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Sigmoid,
    Tanh,
    Relu,
    Scale(f64),
    Offset(f64),
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Unary::Tanh => x.tanh(),
            Unary::Relu => x.max(0.0),
            Unary::Scale(k) => k * x,
            Unary::Offset(c) => x + c,
        }
    }
}

impl Backward for Unary {
    fn backward(&self, grad: &Tensor, inputs: &[&Tensor], output: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let g = match *self {
            Unary::Sigmoid => grad.zip_map(output, |g, y| g * y * (1.0 - y))?,
            Unary::Tanh => grad.zip_map(output, |g, y| g * (1.0 - y * y))?,
            Unary::Relu => grad.zip_map(inputs[0], |g, x| if x > 0.0 { g } else { 0.0 })?,
            Unary::Scale(k) => grad.map(|g| g * k),
            Unary::Offset(_) => grad.clone(),
        };
        Ok(vec![Some(g)])
    }
}

struct Conv2d {
    geom: ConvGeometry,
    need_input: bool,
}

impl Backward for Conv2d {
    fn backward(&self, grad: &Tensor, inputs: &[&Tensor], _: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let (gi, gw, gb) = conv::backward(grad, inputs[0], inputs[1], inputs[2], self.geom, self.need_input)?;
        Ok(vec![gi, Some(gw), Some(gb)])
    }
}

struct Sum;

impl Backward for Sum {
    fn backward(&self, grad: &Tensor, inputs: &[&Tensor], _: &Tensor) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(Tensor::full(inputs[0].shape(), grad.item()?))])
    }
}

struct AvgPool {
    k: usize,
}

impl Backward for AvgPool {
    fn backward(&self, grad: &Tensor, inputs: &[&Tensor], _: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let (n, c, h, w) = inputs[0].dims4()?;
        let k = self.k;
        let norm = 1.0 / (k * k) as f64;
        let mut g = Tensor::zeros(&[n, c, h, w]);
        for b in 0..n {
            for ch in 0..c {
                let gp = grad.plane(b, ch);
                let out = g.plane_mut(b, ch);
                for i in 0..h {
                    for j in 0..w {
                        out[i * w + j] = gp[(i / k) * (w / k) + j / k] * norm;
                    }
                }
            }
        }
        Ok(vec![Some(g)])
    }
}

/// Corner-aligned source coordinate of output index `o` on an axis of
/// `n_in` inputs resampled to `n_out`.
fn source_coord(o: usize, n_in: usize, n_out: usize) -> (usize, usize, f64) {
    if n_in == 1 || n_out == 1 {
        return (0, 0, 0.0);
    }
    let s = (o * (n_in - 1)) as f64 / (n_out - 1) as f64;
    let i0 = (s.floor() as usize).min(n_in - 1);
    let i1 = (i0 + 1).min(n_in - 1);
    (i0, i1, s - i0 as f64)
}

struct Upsample {
    factor: usize,
    value_scale: f64,
}

impl Backward for Upsample {
    fn backward(&self, grad: &Tensor, inputs: &[&Tensor], _: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let (n, c, h, w) = inputs[0].dims4()?;
        let (ho, wo) = (h * self.factor, w * self.factor);
        let mut g = Tensor::zeros(&[n, c, h, w]);
        let rows: Vec<_> = (0..ho).map(|i| source_coord(i, h, ho)).collect();
        let cols: Vec<_> = (0..wo).map(|j| source_coord(j, w, wo)).collect();
        for b in 0..n {
            for ch in 0..c {
                let gp = grad.plane(b, ch);
                let out = g.plane_mut(b, ch);
                for (i, &(y0, y1, fy)) in rows.iter().enumerate() {
                    for (j, &(x0, x1, fx)) in cols.iter().enumerate() {
                        let v = gp[i * wo + j] * self.value_scale;
                        out[y0 * w + x0] += v * (1.0 - fy) * (1.0 - fx);
                        out[y0 * w + x1] += v * (1.0 - fy) * fx;
                        out[y1 * w + x0] += v * fy * (1.0 - fx);
                        out[y1 * w + x1] += v * fy * fx;
                    }
                }
            }
        }
        Ok(vec![Some(g)])
    }
}

struct Concat {
    channels: Vec<usize>,
}

impl Backward for Concat {
    fn backward(&self, grad: &Tensor, _: &[&Tensor], _: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(self.channels.len());
        for &c in &self.channels {
            out.push(Some(grad.narrow_channels(start, c)?));
            start += c;
        }
        Ok(out)
    }
}

struct Narrow {
    start: usize,
}

impl Backward for Narrow {
    fn backward(&self, grad: &Tensor, inputs: &[&Tensor], _: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let (n, _, _, _) = grad.dims4()?;
        let count = grad.shape()[1];
        let mut g = Tensor::zeros(inputs[0].shape());
        for b in 0..n {
            for k in 0..count {
                g.plane_mut(b, self.start + k).copy_from_slice(grad.plane(b, k));
            }
        }
        Ok(vec![Some(g)])
    }
}

struct Softmax;

impl Backward for Softmax {
    fn backward(&self, grad: &Tensor, _: &[&Tensor], output: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let (n, c, h, w) = output.dims4()?;
        let mut g = Tensor::zeros(output.shape());
        let hw = h * w;
        for b in 0..n {
            for p in 0..hw {
                let mut dot = 0.0;
                for k in 0..c {
                    let idx = (b * c + k) * hw + p;
                    dot += grad.data()[idx] * output.data()[idx];
                }
                for k in 0..c {
                    let idx = (b * c + k) * hw + p;
                    g.data_mut()[idx] = output.data()[idx] * (grad.data()[idx] - dot);
                }
            }
        }
        Ok(vec![Some(g)])
    }
}

/// Concatenate rank-4 values along the channel axis.
pub fn concat_channels<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Usage("concat_channels of nothing".into()))?;
    let tape: &'t Tape = first.tape;
    let values: Vec<_> = parts.iter().map(|v| v.value()).collect();
    let (n, _, h, w) = values[0].dims4()?;
    let mut channels = Vec::with_capacity(parts.len());
    for v in &values {
        let (vn, vc, vh, vw) = v.dims4()?;
        if (vn, vh, vw) != (n, h, w) {
            return Err(Error::dim(
                "concat_channels",
                format!("part {:?} does not match [{n},_,{h},{w}]", v.shape()),
            ));
        }
        channels.push(vc);
    }
    let total: usize = channels.iter().sum();
    let mut out = Tensor::zeros(&[n, total, h, w]);
    for b in 0..n {
        let mut at = 0;
        for (v, &c) in values.iter().zip(&channels) {
            for k in 0..c {
                out.plane_mut(b, at + k).copy_from_slice(v.plane(b, k));
            }
            at += c;
        }
    }
    Ok(tape.record(out, parts, Concat { channels }))
}

impl<'t> Var<'t> {
    fn binary(self, other: Var<'t>, op: Binary, name: &'static str) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        if a.shape() != b.shape() {
            return Err(Error::dim(
                name,
                format!("shapes {:?} and {:?} differ", a.shape(), b.shape()),
            ));
        }
        let out = match op {
            Binary::Add => a.zip_map(&b, |x, y| x + y)?,
            Binary::Sub => a.zip_map(&b, |x, y| x - y)?,
            Binary::Mul => a.zip_map(&b, |x, y| x * y)?,
        };
        Ok(self.tape.record(out, &[self, other], op))
    }

    fn unary(self, op: Unary) -> Var<'t> {
        let out = self.value().map(|x| op.apply(x));
        self.tape.record(out, &[self], op)
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Add, "add")
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Sub, "sub")
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Mul, "mul")
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Unary::Sigmoid)
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Unary::Tanh)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(Unary::Relu)
    }

    pub fn scale(self, factor: f64) -> Var<'t> {
        self.unary(Unary::Scale(factor))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(Unary::Offset(c))
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn sum(self) -> Var<'t> {
        let out = Tensor::scalar(self.value().sum());
        self.tape.record(out, &[self], Sum)
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    /// Cross-correlation with bias; see [`conv::forward`].
    pub fn conv2d(self, weight: Var<'t>, bias: Var<'t>, stride: usize, pad: usize) -> Result<Var<'t>> {
        let geom = ConvGeometry { stride, pad };
        let out = conv::forward(&self.value(), &weight.value(), &bias.value(), geom)?;
        let need_input = self.requires_grad();
        Ok(self
            .tape
            .record(out, &[self, weight, bias], Conv2d { geom, need_input }))
    }

    /// Non-overlapping `k x k` average pooling.
    pub fn avg_pool(self, k: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4()?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::Config(format!(
                "avg_pool window {k} does not tile {h}x{w}"
            )));
        }
        let (ho, wo) = (h / k, w / k);
        let norm = 1.0 / (k * k) as f64;
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        for b in 0..n {
            for ch in 0..c {
                let src = x.plane(b, ch);
                let dst = out.plane_mut(b, ch);
                for i in 0..h {
                    for j in 0..w {
                        dst[(i / k) * wo + j / k] += src[i * w + j];
                    }
                }
                dst.iter_mut().for_each(|v| *v *= norm);
            }
        }
        Ok(self.tape.record(out, &[self], AvgPool { k }))
    }

    /// Corner-aligned bilinear upsampling by an integer factor.
    ///
    /// Output values are multiplied by `value_scale`; pass the factor
    /// itself when resampling a flow field so displacements stay in
    /// pixels of the new grid.
    pub fn upsample_bilinear(self, factor: usize, value_scale: f64) -> Result<Var<'t>> {
        if factor == 0 {
            return Err(Error::Config("upsample factor must be >= 1".into()));
        }
        let x = self.value();
        let (n, c, h, w) = x.dims4()?;
        let (ho, wo) = (h * factor, w * factor);
        let rows: Vec<_> = (0..ho).map(|i| source_coord(i, h, ho)).collect();
        let cols: Vec<_> = (0..wo).map(|j| source_coord(j, w, wo)).collect();
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        for b in 0..n {
            for ch in 0..c {
                let src = x.plane(b, ch);
                let dst = out.plane_mut(b, ch);
                for (i, &(y0, y1, fy)) in rows.iter().enumerate() {
                    for (j, &(x0, x1, fx)) in cols.iter().enumerate() {
                        let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                        let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                        dst[i * wo + j] = value_scale * (top * (1.0 - fy) + bottom * fy);
                    }
                }
            }
        }
        Ok(self.tape.record(out, &[self], Upsample { factor, value_scale }))
    }

    pub fn narrow_channels(self, start: usize, count: usize) -> Result<Var<'t>> {
        let out = self.value().narrow_channels(start, count)?;
        Ok(self.tape.record(out, &[self], Narrow { start }))
    }

    /// Softmax across the channel axis at every pixel.
    pub fn softmax_channels(self) -> Result<Var<'t>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4()?;
        let hw = h * w;
        let mut out = Tensor::zeros(x.shape());
        for b in 0..n {
            for p in 0..hw {
                let idx = |k: usize| (b * c + k) * hw + p;
                let max = (0..c).map(|k| x.data()[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..c {
                    let e = (x.data()[idx(k)] - max).exp();
                    out.data_mut()[idx(k)] = e;
                    total += e;
                }
                for k in 0..c {
                    out.data_mut()[idx(k)] /= total;
                }
            }
        }
        Ok(self.tape.record(out, &[self], Softmax))
    }
}
