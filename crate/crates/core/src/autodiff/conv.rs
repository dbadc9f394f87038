//! 2-D cross-correlation kernels (no kernel flip) with zero padding.
//!
//! Accumulation order per output element is fixed: bias first, then input
//! channel, kernel row, kernel column. Results are therefore bit-identical
//! to a naive nested loop that sums in the same order.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub pad: usize,
}

/// Output extent along one axis.
pub fn output_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Config("conv2d stride must be >= 1".into()));
    }
    if kernel % 2 == 0 {
        return Err(Error::Config(format!(
            "conv2d kernel extent {kernel} must be odd"
        )));
    }
    let padded = input + 2 * pad;
    if padded < kernel {
        return Err(Error::Config(format!(
            "conv2d kernel {kernel} larger than padded input {padded}"
        )));
    }
    let span = padded - kernel;
    if span % stride != 0 {
        return Err(Error::Config(format!(
            "conv2d output extent ({input} + 2*{pad} - {kernel})/{stride} + 1 is not an integer"
        )));
    }
    Ok(span / stride + 1)
}

struct Dims {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

fn dims(input: &Tensor, weight: &Tensor, bias: &Tensor, geom: ConvGeometry) -> Result<Dims> {
    let (n, cin, h, w) = input.dims4()?;
    let (cout, wcin, kh, kw) = weight.dims4().map_err(|_| {
        Error::dim(
            "conv2d",
            format!("weight must be [Cout,Cin,kh,kw], got {:?}", weight.shape()),
        )
    })?;
    if wcin != cin {
        return Err(Error::dim(
            "conv2d",
            format!("input has {cin} channels but weight expects {wcin}"),
        ));
    }
    if bias.shape() != [cout] {
        return Err(Error::dim(
            "conv2d",
            format!("bias shape {:?} does not match {cout} output channels", bias.shape()),
        ));
    }
    let ho = output_extent(h, kh, geom.stride, geom.pad)?;
    let wo = output_extent(w, kw, geom.stride, geom.pad)?;
    Ok(Dims {
        n,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        ho,
        wo,
    })
}

/// Range of output columns whose input column `ox*stride + k - pad` is in `[0, w)`.
#[inline]
fn valid_range(k: usize, pad: usize, stride: usize, w: usize, wo: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    if w + pad <= k {
        return (0, 0);
    }
    let hi = ((w - 1 + pad - k) / stride + 1).min(wo);
    (lo.min(hi), hi)
}

pub fn forward(input: &Tensor, weight: &Tensor, bias: &Tensor, geom: ConvGeometry) -> Result<Tensor> {
    let d = dims(input, weight, bias, geom)?;
    let ConvGeometry { stride, pad } = geom;
    let mut out = Tensor::zeros(&[d.n, d.cout, d.ho, d.wo]);
    let wdata = weight.data();
    let idata = input.data();
    let plane_in = d.h * d.w;
    let plane_out = d.ho * d.wo;
    let odata = out.data_mut();
    for n in 0..d.n {
        for co in 0..d.cout {
            let oplane = &mut odata[(n * d.cout + co) * plane_out..][..plane_out];
            oplane.fill(bias.data()[co]);
            for ci in 0..d.cin {
                let iplane = &idata[(n * d.cin + ci) * plane_in..][..plane_in];
                for ky in 0..d.kh {
                    let (oy_lo, oy_hi) = valid_range(ky, pad, stride, d.h, d.ho);
                    for kx in 0..d.kw {
                        let wv = wdata[((co * d.cin + ci) * d.kh + ky) * d.kw + kx];
                        let (ox_lo, ox_hi) = valid_range(kx, pad, stride, d.w, d.wo);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - pad;
                            let irow = &iplane[iy * d.w..][..d.w];
                            let orow = &mut oplane[oy * d.wo..][..d.wo];
                            if stride == 1 {
                                let src = &irow[ox_lo + kx - pad..ox_hi + kx - pad];
                                for (o, s) in orow[ox_lo..ox_hi].iter_mut().zip(src) {
                                    *o += wv * s;
                                }
                            } else {
                                for (ox, o) in orow.iter_mut().enumerate().take(ox_hi).skip(ox_lo) {
                                    *o += wv * irow[ox * stride + kx - pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients `(d_input, d_weight, d_bias)` given the output gradient.
pub fn backward(
    grad_out: &Tensor,
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    geom: ConvGeometry,
    need_input: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let d = dims(input, weight, bias, geom)?;
    let ConvGeometry { stride, pad } = geom;
    if grad_out.shape() != [d.n, d.cout, d.ho, d.wo] {
        return Err(Error::dim("conv2d backward", "output gradient shape mismatch"));
    }
    let plane_in = d.h * d.w;
    let plane_out = d.ho * d.wo;
    let gdata = grad_out.data();
    let idata = input.data();
    let wdata = weight.data();

    let mut gbias = Tensor::zeros(&[d.cout]);
    for n in 0..d.n {
        for co in 0..d.cout {
            let g: f64 = gdata[(n * d.cout + co) * plane_out..][..plane_out].iter().sum();
            gbias.data_mut()[co] += g;
        }
    }

    let mut gweight = Tensor::zeros(weight.shape());
    {
        let gw = gweight.data_mut();
        for co in 0..d.cout {
            for ci in 0..d.cin {
                for ky in 0..d.kh {
                    let (oy_lo, oy_hi) = valid_range(ky, pad, stride, d.h, d.ho);
                    for kx in 0..d.kw {
                        let (ox_lo, ox_hi) = valid_range(kx, pad, stride, d.w, d.wo);
                        let mut acc = 0.0;
                        if ox_lo < ox_hi {
                            for n in 0..d.n {
                                let gplane = &gdata[(n * d.cout + co) * plane_out..][..plane_out];
                                let iplane = &idata[(n * d.cin + ci) * plane_in..][..plane_in];
                                for oy in oy_lo..oy_hi {
                                    let iy = oy * stride + ky - pad;
                                    let grow = &gplane[oy * d.wo..][..d.wo];
                                    let irow = &iplane[iy * d.w..][..d.w];
                                    if stride == 1 {
                                        let src = &irow[ox_lo + kx - pad..ox_hi + kx - pad];
                                        acc += grow[ox_lo..ox_hi]
                                            .iter()
                                            .zip(src)
                                            .map(|(g, x)| g * x)
                                            .sum::<f64>();
                                    } else {
                                        for (ox, g) in grow.iter().enumerate().take(ox_hi).skip(ox_lo) {
                                            acc += g * irow[ox * stride + kx - pad];
                                        }
                                    }
                                }
                            }
                        }
                        gw[((co * d.cin + ci) * d.kh + ky) * d.kw + kx] = acc;
                    }
                }
            }
        }
    }

    let ginput = if need_input {
        let mut gin = Tensor::zeros(input.shape());
        let gi = gin.data_mut();
        for n in 0..d.n {
            for ci in 0..d.cin {
                let iplane = &mut gi[(n * d.cin + ci) * plane_in..][..plane_in];
                for co in 0..d.cout {
                    let gplane = &gdata[(n * d.cout + co) * plane_out..][..plane_out];
                    for ky in 0..d.kh {
                        let (oy_lo, oy_hi) = valid_range(ky, pad, stride, d.h, d.ho);
                        for kx in 0..d.kw {
                            let wv = wdata[((co * d.cin + ci) * d.kh + ky) * d.kw + kx];
                            let (ox_lo, ox_hi) = valid_range(kx, pad, stride, d.w, d.wo);
                            if ox_lo >= ox_hi {
                                continue;
                            }
                            for oy in oy_lo..oy_hi {
                                let iy = oy * stride + ky - pad;
                                let grow = &gplane[oy * d.wo..][..d.wo];
                                let irow = &mut iplane[iy * d.w..][..d.w];
                                if stride == 1 {
                                    let dst = &mut irow[ox_lo + kx - pad..ox_hi + kx - pad];
                                    for (x, g) in dst.iter_mut().zip(&grow[ox_lo..ox_hi]) {
                                        *x += wv * g;
                                    }
                                } else {
                                    for (ox, g) in grow.iter().enumerate().take(ox_hi).skip(ox_lo) {
                                        irow[ox * stride + kx - pad] += wv * g;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Some(gin)
    } else {
        None
    };
    Ok((ginput, gweight, gbias))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extent_rules() {
        assert_eq!(output_extent(8, 3, 1, 1).unwrap(), 8);
        assert_eq!(output_extent(3, 3, 1, 0).unwrap(), 1);
        assert_eq!(output_extent(9, 3, 2, 1).unwrap(), 5);
        assert!(matches!(output_extent(8, 3, 2, 1), Err(Error::Config(_))));
        assert!(matches!(output_extent(8, 2, 1, 0), Err(Error::Config(_))));
        assert!(matches!(output_extent(8, 3, 0, 1), Err(Error::Config(_))));
    }

    #[test]
    fn valid_range_covers_padding() {
        // w=4, k=3, pad=1: kx=0 skips ox=0, kx=2 skips ox=3
        assert_eq!(valid_range(0, 1, 1, 4, 4), (1, 4));
        assert_eq!(valid_range(1, 1, 1, 4, 4), (0, 4));
        assert_eq!(valid_range(2, 1, 1, 4, 4), (0, 3));
    }

    #[test]
    fn channel_mismatch_is_dimension_error() {
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let w = Tensor::zeros(&[1, 3, 3, 3]);
        let b = Tensor::zeros(&[1]);
        let err = forward(&x, &w, &b, ConvGeometry { stride: 1, pad: 1 }).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }), "{err}");
    }
}
