//! Value-level compute kernels behind the graph operations.
//!
//! Convolution lowers to im2col plus gemm; the gemm itself dispatches
//! through [`Elem::gemm`] to runtime-SIMD-selected kernels. Everything here
//! is a pure function over slices so the autodiff layer stays a thin
//! bookkeeping shell.

use crate::elem::Elem;
use crate::numkit::tensor::{shape_error, TensorError};

/// `c ← alpha·a·b + beta·c` with row-major logical shapes `m×k`, `k×n`.
/// `ta`/`tb` mark operands whose storage is the transpose of the logical
/// shape (i.e. `a` stored `k×m` when `ta`).
#[allow(clippy::too_many_arguments)]
pub fn mm<E: Elem>(
    m: usize,
    k: usize,
    n: usize,
    alpha: E,
    a: &[E],
    ta: bool,
    b: &[E],
    tb: bool,
    beta: E,
    c: &mut [E],
) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    E::gemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, n as isize, 1);
}

/// Resolved geometry of one conv2d application.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvDims {
    pub batch: usize,
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvDims {
    pub fn resolve(
        x_shape: &[usize],
        w_shape: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self, TensorError> {
        if x_shape.len() != 4 || w_shape.len() != 4 {
            return Err(shape_error(
                "conv2d",
                &[x_shape, w_shape],
                "expected input [n,c,h,w] and weight [co,ci,kh,kw]",
            ));
        }
        if stride == 0 {
            return Err(TensorError::Domain {
                op: "conv2d",
                detail: "stride must be positive".into(),
            });
        }
        let (batch, ci, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
        let (co, wci, kh, kw) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
        if ci != wci {
            return Err(shape_error(
                "conv2d",
                &[x_shape, w_shape],
                format!("input has {ci} channels but weight expects {wci}"),
            ));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(shape_error(
                "conv2d",
                &[x_shape, w_shape],
                format!("kernel {kh}x{kw} exceeds padded input {}x{}", h + 2 * pad, w + 2 * pad),
            ));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Ok(ConvDims {
            batch,
            ci,
            h,
            w,
            co,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch_len(&self) -> usize {
        self.ci * self.kh * self.kw
    }

    fn sites(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfolds one image (`[ci, h, w]` slice) into `[ci·kh·kw, ho·wo]` columns.
fn im2col<E: Elem>(d: &ConvDims, x_img: &[E], cols: &mut [E]) {
    let sites = d.sites();
    for c in 0..d.ci {
        let plane = &x_img[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = ((c * d.kh + ki) * d.kw + kj) * sites;
                for oy in 0..d.ho {
                    let iy = (oy * d.stride + ki) as isize - d.pad as isize;
                    let out = &mut cols[row + oy * d.wo..row + (oy + 1) * d.wo];
                    if iy < 0 || iy >= d.h as isize {
                        out.fill(E::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for (ox, slot) in out.iter_mut().enumerate() {
                        let ix = (ox * d.stride + kj) as isize - d.pad as isize;
                        *slot = if ix < 0 || ix >= d.w as isize {
                            E::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds `[ci·kh·kw, ho·wo]` columns back onto one image gradient.
fn col2im_add<E: Elem>(d: &ConvDims, cols: &[E], dx_img: &mut [E]) {
    let sites = d.sites();
    for c in 0..d.ci {
        let plane = &mut dx_img[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = ((c * d.kh + ki) * d.kw + kj) * sites;
                for oy in 0..d.ho {
                    let iy = (oy * d.stride + ki) as isize - d.pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    let src = &cols[row + oy * d.wo..row + (oy + 1) * d.wo];
                    for (ox, &g) in src.iter().enumerate() {
                        let ix = (ox * d.stride + kj) as isize - d.pad as isize;
                        if ix >= 0 && ix < d.w as isize {
                            dst[ix as usize] += g;
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution: `y[n,co,ho,wo] = w ∗ x (+ b)`.
pub fn conv2d_forward<E: Elem>(d: &ConvDims, x: &[E], w: &[E], b: Option<&[E]>, y: &mut [E]) {
    let sites = d.sites();
    let patch = d.patch_len();
    let img_in = d.ci * d.h * d.w;
    let img_out = d.co * sites;
    let mut cols = vec![E::zero(); patch * sites];
    for img in 0..d.batch {
        let x_img = &x[img * img_in..(img + 1) * img_in];
        let y_img = &mut y[img * img_out..(img + 1) * img_out];
        let col_view: &[E] = if d.is_pointwise() {
            x_img
        } else {
            im2col(d, x_img, &mut cols);
            &cols
        };
        mm(d.co, patch, sites, E::one(), w, false, col_view, false, E::zero(), y_img);
        if let Some(bias) = b {
            for (c, &bc) in bias.iter().enumerate() {
                for v in &mut y_img[c * sites..(c + 1) * sites] {
                    *v += bc;
                }
            }
        }
    }
}

/// Backward convolution; accumulates into `dx`, `dw`, `db` (all pre-sized,
/// any of them optional).
pub fn conv2d_backward<E: Elem>(
    d: &ConvDims,
    x: &[E],
    w: &[E],
    dy: &[E],
    dx: Option<&mut [E]>,
    dw: Option<&mut [E]>,
    db: Option<&mut [E]>,
) {
    let sites = d.sites();
    let patch = d.patch_len();
    let img_in = d.ci * d.h * d.w;
    let img_out = d.co * sites;
    let mut cols = vec![E::zero(); patch * sites];
    let mut dcols = vec![E::zero(); patch * sites];
    let (mut dx, mut dw) = (dx, dw);
    if let Some(db) = db {
        for img in 0..d.batch {
            let dy_img = &dy[img * img_out..(img + 1) * img_out];
            for (c, slot) in db.iter_mut().enumerate() {
                *slot += dy_img[c * sites..(c + 1) * sites].iter().copied().sum();
            }
        }
    }
    for img in 0..d.batch {
        let x_img = &x[img * img_in..(img + 1) * img_in];
        let dy_img = &dy[img * img_out..(img + 1) * img_out];
        if let Some(dw) = dw.as_deref_mut() {
            let col_view: &[E] = if d.is_pointwise() {
                x_img
            } else {
                im2col(d, x_img, &mut cols);
                &cols
            };
            // dW[co, patch] += dY[co, sites] · colsᵀ[sites, patch]
            mm(d.co, sites, patch, E::one(), dy_img, false, col_view, true, E::one(), dw);
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dx_img = &mut dx[img * img_in..(img + 1) * img_in];
            if d.is_pointwise() {
                // dX[ci, sites] += Wᵀ[ci, co] · dY[co, sites]
                mm(patch, d.co, sites, E::one(), w, true, dy_img, false, E::one(), dx_img);
            } else {
                mm(patch, d.co, sites, E::one(), w, true, dy_img, false, E::zero(), &mut dcols);
                col2im_add(d, &dcols, dx_img);
            }
        }
    }
}

/// 2×2 max-pool with stride 2; a trailing odd row/column is dropped.
/// Returns pooled extents and fills `argmax` with flat indices into `x`.
pub fn maxpool2_forward<E: Elem>(
    shape: &[usize],
    x: &[E],
    y: &mut Vec<E>,
    argmax: &mut Vec<u32>,
) -> Result<(usize, usize), TensorError> {
    if shape.len() != 4 {
        return Err(shape_error("max_pool2", &[shape], "expected [n,c,h,w]"));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if h < 2 || w < 2 {
        return Err(shape_error(
            "max_pool2",
            &[shape],
            "spatial extents must be at least 2",
        ));
    }
    let (ho, wo) = (h / 2, w / 2);
    y.clear();
    y.reserve(n * c * ho * wo);
    argmax.clear();
    argmax.reserve(n * c * ho * wo);
    for plane_idx in 0..n * c {
        let base = plane_idx * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let i00 = base + (2 * oy) * w + 2 * ox;
                let candidates = [i00, i00 + 1, i00 + w, i00 + w + 1];
                let mut best = candidates[0];
                for &idx in &candidates[1..] {
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                y.push(x[best]);
                argmax.push(best as u32);
            }
        }
    }
    Ok((ho, wo))
}

/// Per-channel batch statistics of a `[n,c,h,w]` tensor.
pub struct BatchStats<E> {
    pub mean: Vec<E>,
    /// Biased (divide-by-M) variance, the quantity used for normalization.
    pub var: Vec<E>,
}

pub fn channel_stats<E: Elem>(shape: &[usize], x: &[E]) -> BatchStats<E> {
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let m = E::lit((n * hw) as f64);
    let mut mean = vec![E::zero(); c];
    let mut var = vec![E::zero(); c];
    for img in 0..n {
        for ch in 0..c {
            let plane = &x[(img * c + ch) * hw..(img * c + ch + 1) * hw];
            mean[ch] += plane.iter().copied().sum::<E>();
        }
    }
    for v in &mut mean {
        *v /= m;
    }
    for img in 0..n {
        for ch in 0..c {
            let plane = &x[(img * c + ch) * hw..(img * c + ch + 1) * hw];
            let mu = mean[ch];
            var[ch] += plane.iter().map(|&v| (v - mu) * (v - mu)).sum::<E>();
        }
    }
    for v in &mut var {
        *v /= m;
    }
    BatchStats { mean, var }
}

/// Iterates a shape as `(outer, lane, inner)` blocks around `axis`, so that
/// element `(o, l, i)` sits at `(o·lane + l)·inner + i`. Softmax-style ops
/// walk lanes with this decomposition.
pub fn axis_blocks(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let lane = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, lane, inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(x: &[usize], w: &[usize], stride: usize, pad: usize) -> ConvDims {
        ConvDims::resolve(x, w, stride, pad).unwrap()
    }

    #[test]
    fn conv_identity_center_kernel_reproduces_map() {
        let d = dims(&[1, 1, 4, 4], &[1, 1, 3, 3], 1, 1);
        let x: Vec<f64> = (0..16).map(|i| i as f64 * 0.25 - 1.0).collect();
        let mut w = vec![0.0f64; 9];
        w[4] = 1.0;
        let mut y = vec![0.0f64; 16];
        conv2d_forward(&d, &x, &w, None, &mut y);
        assert_eq!(y, x);
    }

    #[test]
    fn conv_pointwise_matches_hand_matmul() {
        let d = dims(&[2, 3, 2, 2], &[4, 3, 1, 1], 1, 0);
        let x: Vec<f32> = (0..24).map(|i| (i as f32).sin()).collect();
        let w: Vec<f32> = (0..12).map(|i| (i as f32).cos()).collect();
        let mut y = vec![0.0f32; 2 * 4 * 4];
        conv2d_forward(&d, &x, &w, None, &mut y);
        for img in 0..2 {
            for co in 0..4 {
                for s in 0..4 {
                    let mut acc = 0.0f32;
                    for ci in 0..3 {
                        acc += w[co * 3 + ci] * x[(img * 3 + ci) * 4 + s];
                    }
                    let got = y[(img * 4 + co) * 4 + s];
                    assert!((got - acc).abs() < 1e-6, "img {img} co {co} site {s}");
                }
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch_and_zero_stride() {
        let err = ConvDims::resolve(&[1, 2, 4, 4], &[1, 3, 3, 3], 1, 1).unwrap_err();
        assert!(matches!(err, TensorError::Shape { op: "conv2d", .. }));
        let err = ConvDims::resolve(&[1, 2, 4, 4], &[1, 2, 3, 3], 0, 1).unwrap_err();
        assert!(matches!(err, TensorError::Domain { op: "conv2d", .. }));
    }

    #[test]
    fn conv_rejects_kernel_larger_than_padded_input() {
        let err = ConvDims::resolve(&[1, 1, 2, 2], &[1, 1, 3, 3], 1, 0).unwrap_err();
        assert!(matches!(err, TensorError::Shape { op: "conv2d", .. }));
    }

    #[test]
    fn maxpool_drops_trailing_odd_column() {
        // 1x1x3x3: only the top-left 2x2 window survives.
        let x: Vec<f64> = vec![1.0, 2.0, 9.0, 4.0, 3.0, 9.0, 9.0, 9.0, 9.0];
        let mut y = Vec::new();
        let mut arg = Vec::new();
        let (ho, wo) = maxpool2_forward(&[1, 1, 3, 3], &x, &mut y, &mut arg).unwrap();
        assert_eq!((ho, wo), (1, 1));
        assert_eq!(y, vec![4.0]);
        assert_eq!(arg, vec![3]);
    }

    #[test]
    fn maxpool_tie_breaks_to_first_in_scan_order() {
        let x = vec![5.0f32, 5.0, 5.0, 5.0];
        let mut y = Vec::new();
        let mut arg = Vec::new();
        maxpool2_forward(&[1, 1, 2, 2], &x, &mut y, &mut arg).unwrap();
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn channel_stats_match_hand_values() {
        // One channel holding [1,2,3,4]: mean 2.5, biased var 1.25.
        let stats = channel_stats(&[1, 1, 2, 2], &[1.0f64, 2.0, 3.0, 4.0]);
        assert_eq!(stats.mean, vec![2.5]);
        assert_eq!(stats.var, vec![1.25]);
    }
}
