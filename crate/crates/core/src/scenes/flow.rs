//! Conversions between flow conventions.
//!
//! Files store forward flow: for each pixel of the source frame, where it
//! lands in the next frame. The warp layer needs sampling fields: for each
//! pixel of the target frame, the offset of its source.

use crate::error::{Error, Result};
use crate::segmap::LabelMap;
use crate::tensor::Tensor;
use crate::warp::check_flow;

#[inline]
fn round_half_up(x: f64) -> i64 {
    (x + 0.5).floor() as i64
}

/// Splat a forward flow into a sampling field.
///
/// Every source pixel `p` lands on `q = round(p + F(p))` and sets
/// `G(q) = -F(p)`. When several sources land on the same `q`, a source
/// whose label matches `dst_labels[q]` wins; otherwise the larger
/// displacement wins (moving objects are drawn in front). Pixels nothing
/// lands on get zero.
pub fn forward_to_sampling(
    forward: &Tensor,
    src_labels: Option<&LabelMap>,
    dst_labels: Option<&LabelMap>,
) -> Result<Tensor> {
    let (n, c, h, w) = forward.dims4()?;
    if n != 1 || c != 2 {
        return Err(Error::dim("forward_to_sampling", format!("expected [1,2,H,W], got {:?}", forward.shape())));
    }
    for l in [src_labels, dst_labels].into_iter().flatten() {
        if l.height() != h || l.width() != w {
            return Err(Error::dim("forward_to_sampling", "label map extent differs from flow"));
        }
    }
    let fx = forward.plane(0, 0);
    let fy = forward.plane(0, 1);
    // (matches label, squared magnitude, dx, dy)
    let mut best: Vec<Option<(bool, f64, f64, f64)>> = vec![None; h * w];
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            let (dx, dy) = (fx[p], fy[p]);
            let qi = round_half_up(i as f64 + dy);
            let qj = round_half_up(j as f64 + dx);
            if qi < 0 || qj < 0 || qi >= h as i64 || qj >= w as i64 {
                continue;
            }
            let q = qi as usize * w + qj as usize;
            let matches = match (src_labels, dst_labels) {
                (Some(s), Some(d)) => s.labels()[p] == d.labels()[q],
                _ => false,
            };
            let cand = (matches, dx * dx + dy * dy, dx, dy);
            let better = match best[q] {
                None => true,
                Some((m, mag, _, _)) => (matches, cand.1) > (m, mag),
            };
            if better {
                best[q] = Some(cand);
            }
        }
    }
    let mut out = Tensor::zeros(&[1, 2, h, w]);
    for (q, b) in best.iter().enumerate() {
        if let Some((_, _, dx, dy)) = b {
            out.plane_mut(0, 0)[q] = -dx;
            out.plane_mut(0, 1)[q] = -dy;
        }
    }
    Ok(out)
}

/// Chain sampling fields `a -> b` and `b -> c` into `a -> c`.
///
/// `G(q) = second(q) + first(round(q + second(q)))`. Where the
/// intermediate location falls outside the image, `second(q)` alone is
/// kept.
pub fn compose_sampling(first: &Tensor, second: &Tensor) -> Result<Tensor> {
    let (n, _, h, w) = second.dims4()?;
    check_flow(first, n, h, w)?;
    check_flow(second, n, h, w)?;
    let mut out = second.clone();
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                let p = i * w + j;
                let (dx, dy) = (second.plane(b, 0)[p], second.plane(b, 1)[p]);
                let mi = round_half_up(i as f64 + dy);
                let mj = round_half_up(j as f64 + dx);
                if mi < 0 || mj < 0 || mi >= h as i64 || mj >= w as i64 {
                    continue;
                }
                let m = mi as usize * w + mj as usize;
                out.plane_mut(b, 0)[p] = dx + first.plane(b, 0)[m];
                out.plane_mut(b, 1)[p] = dy + first.plane(b, 1)[m];
            }
        }
    }
    Ok(out)
}

/// Average over `factor x factor` blocks and divide by `factor`, giving
/// the field in pixels of the coarser grid.
pub fn downscale_flow(flow: &Tensor, factor: usize) -> Result<Tensor> {
    let (n, c, h, w) = flow.dims4()?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::Config(format!(
            "cannot downscale {h}x{w} flow by {factor}"
        )));
    }
    let (ho, wo) = (h / factor, w / factor);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let norm = 1.0 / (factor * factor * factor) as f64;
    for b in 0..n {
        for ch in 0..c {
            let src = flow.plane(b, ch);
            let dst = out.plane_mut(b, ch);
            for i in 0..h {
                for j in 0..w {
                    dst[(i / factor) * wo + j / factor] += src[i * w + j] * norm;
                }
            }
        }
    }
    Ok(out)
}
