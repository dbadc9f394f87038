//! Differentiable bilinear warping along a dense flow field.
//!
//! A flow field is a `[N, 2, H, W]` tensor: channel 0 is the horizontal
//! offset `dx`, channel 1 the vertical offset `dy`, both in pixels. The
//! warp gathers: output pixel `(i, j)` samples the input at
//! `(i + dy, j + dx)`. Corners falling outside the image read as zero,
//! and a sample whose contributing neighbourhood is entirely outside is
//! zero and flagged in the [`OutOfBoundsMask`].

use crate::autodiff::{Backward, Var};
use crate::error::{Error, Result};
use crate::segmap::{LabelMap, VOID};
use crate::tensor::Tensor;

/// `[N, 1, H, W]` tensor of 0/1; 1 where the sample left the image.
#[derive(Clone, Debug, PartialEq)]
pub struct OutOfBoundsMask(Tensor);

impl OutOfBoundsMask {
    pub fn zeros(n: usize, h: usize, w: usize) -> Self {
        OutOfBoundsMask(Tensor::zeros(&[n, 1, h, w]))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    #[inline]
    pub fn is_set(&self, n: usize, i: usize, j: usize) -> bool {
        self.0.at4(n, 0, i, j) != 0.0
    }

    pub fn count(&self) -> usize {
        self.0.data().iter().filter(|&&v| v != 0.0).count()
    }

    /// Pixel-wise union.
    pub fn union(&self, other: &OutOfBoundsMask) -> Result<OutOfBoundsMask> {
        Ok(OutOfBoundsMask(self.0.zip_map(&other.0, |a, b| {
            if a != 0.0 || b != 0.0 {
                1.0
            } else {
                0.0
            }
        })?))
    }

    pub(crate) fn from_tensor(t: Tensor) -> Self {
        OutOfBoundsMask(t)
    }
}

/// Checks that `flow` is a two-channel field matching `(n, h, w)`.
pub fn check_flow(flow: &Tensor, n: usize, h: usize, w: usize) -> Result<()> {
    let (fnb, fc, fh, fw) = flow.dims4()?;
    if fc != 2 {
        return Err(Error::dim("warp", format!("flow must have 2 channels, got {fc}")));
    }
    if (fnb, fh, fw) != (n, h, w) {
        return Err(Error::dim(
            "warp",
            format!("flow {:?} does not match features [{n},_,{h},{w}]", flow.shape()),
        ));
    }
    Ok(())
}

/// Bilinear sample geometry for one output pixel.
struct Sample {
    y0: isize,
    x0: isize,
    wy: f64,
    wx: f64,
}

#[inline]
fn sample_at(i: usize, j: usize, dx: f64, dy: f64, h: usize, w: usize) -> Option<Sample> {
    let sy = i as f64 + dy;
    let sx = j as f64 + dx;
    if !(sy > -1.0 && sy < h as f64 && sx > -1.0 && sx < w as f64) {
        return None;
    }
    let fy = sy.floor();
    let fx = sx.floor();
    Some(Sample {
        y0: fy as isize,
        x0: fx as isize,
        wy: sy - fy,
        wx: sx - fx,
    })
}

#[inline]
fn read(plane: &[f64], y: isize, x: isize, h: usize, w: usize) -> f64 {
    if y < 0 || x < 0 || y as usize >= h || x as usize >= w {
        0.0
    } else {
        plane[y as usize * w + x as usize]
    }
}

/// Forward warp without recording a gradient.
pub fn warp_tensor(features: &Tensor, flow: &Tensor) -> Result<(Tensor, OutOfBoundsMask)> {
    let (n, c, h, w) = features.dims4()?;
    check_flow(flow, n, h, w)?;
    let mut out = Tensor::zeros(features.shape());
    let mut mask = Tensor::zeros(&[n, 1, h, w]);
    let hw = h * w;
    for b in 0..n {
        let dxs = flow.plane(b, 0);
        let dys = flow.plane(b, 1);
        for i in 0..h {
            for j in 0..w {
                let p = i * w + j;
                let Some(s) = sample_at(i, j, dxs[p], dys[p], h, w) else {
                    mask.data_mut()[b * hw + p] = 1.0;
                    continue;
                };
                let w00 = (1.0 - s.wy) * (1.0 - s.wx);
                let w01 = (1.0 - s.wy) * s.wx;
                let w10 = s.wy * (1.0 - s.wx);
                let w11 = s.wy * s.wx;
                for ch in 0..c {
                    let plane = features.plane(b, ch);
                    let v = w00 * read(plane, s.y0, s.x0, h, w)
                        + w01 * read(plane, s.y0, s.x0 + 1, h, w)
                        + w10 * read(plane, s.y0 + 1, s.x0, h, w)
                        + w11 * read(plane, s.y0 + 1, s.x0 + 1, h, w);
                    out.data_mut()[(b * c + ch) * hw + p] = v;
                }
            }
        }
    }
    Ok((out, OutOfBoundsMask(mask)))
}

struct WarpBackward;

impl Backward for WarpBackward {
    fn backward(&self, grad: &Tensor, inputs: &[&Tensor], _: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let (features, flow) = (inputs[0], inputs[1]);
        let (n, c, h, w) = features.dims4()?;
        let hw = h * w;
        let mut gfeat = Tensor::zeros(features.shape());
        let mut gflow = Tensor::zeros(flow.shape());
        let inside = |y: isize, x: isize| y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w;
        for b in 0..n {
            for i in 0..h {
                for j in 0..w {
                    let p = i * w + j;
                    let dx = flow.plane(b, 0)[p];
                    let dy = flow.plane(b, 1)[p];
                    let Some(s) = sample_at(i, j, dx, dy, h, w) else {
                        continue;
                    };
                    let corners = [
                        (s.y0, s.x0, (1.0 - s.wy) * (1.0 - s.wx)),
                        (s.y0, s.x0 + 1, (1.0 - s.wy) * s.wx),
                        (s.y0 + 1, s.x0, s.wy * (1.0 - s.wx)),
                        (s.y0 + 1, s.x0 + 1, s.wy * s.wx),
                    ];
                    let mut gdx = 0.0;
                    let mut gdy = 0.0;
                    for ch in 0..c {
                        let g = grad.data()[(b * c + ch) * hw + p];
                        if g == 0.0 {
                            continue;
                        }
                        let plane = features.plane(b, ch);
                        let f00 = read(plane, s.y0, s.x0, h, w);
                        let f01 = read(plane, s.y0, s.x0 + 1, h, w);
                        let f10 = read(plane, s.y0 + 1, s.x0, h, w);
                        let f11 = read(plane, s.y0 + 1, s.x0 + 1, h, w);
                        gdx += g * ((1.0 - s.wy) * (f01 - f00) + s.wy * (f11 - f10));
                        gdy += g * ((1.0 - s.wx) * (f10 - f00) + s.wx * (f11 - f01));
                        let gplane = gfeat.plane_mut(b, ch);
                        for &(y, x, wt) in &corners {
                            if inside(y, x) {
                                gplane[y as usize * w + x as usize] += g * wt;
                            }
                        }
                    }
                    gflow.plane_mut(b, 0)[p] = gdx;
                    gflow.plane_mut(b, 1)[p] = gdy;
                }
            }
        }
        Ok(vec![Some(gfeat), Some(gflow)])
    }
}

/// Differentiable warp of `features` along `flow`.
///
/// Gradients reach both the features and the flow.
pub fn warp<'t>(features: Var<'t>, flow: Var<'t>) -> Result<(Var<'t>, OutOfBoundsMask)> {
    let (out, mask) = warp_tensor(&features.value(), &flow.value())?;
    let var = features.tape().record(out, &[features, flow], WarpBackward);
    Ok((var, mask))
}

/// Nearest-neighbour warp of a hard label map.
///
/// Sample locations round half up; samples outside the image become
/// [`VOID`]. `flow` is `[1, 2, H, W]`.
pub fn warp_label_map(labels: &LabelMap, flow: &Tensor) -> Result<LabelMap> {
    let (h, w) = (labels.height(), labels.width());
    check_flow(flow, 1, h, w)?;
    let dxs = flow.plane(0, 0);
    let dys = flow.plane(0, 1);
    let mut out = LabelMap::filled(h, w, VOID);
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            let sy = (i as f64 + dys[p] + 0.5).floor();
            let sx = (j as f64 + dxs[p] + 0.5).floor();
            if sy >= 0.0 && sx >= 0.0 && sy < h as f64 && sx < w as f64 {
                out.set(i, j, labels.get(sy as usize, sx as usize));
            }
        }
    }
    Ok(out)
}

/// Constant flow field of shape `[n, 2, h, w]`.
pub fn constant_flow(n: usize, h: usize, w: usize, dx: f64, dy: f64) -> Tensor {
    let mut t = Tensor::zeros(&[n, 2, h, w]);
    for b in 0..n {
        t.plane_mut(b, 0).fill(dx);
        t.plane_mut(b, 1).fill(dy);
    }
    t
}
