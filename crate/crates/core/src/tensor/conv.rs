use super::{Shape, Tensor};
use crate::error::{Error, Result};

/// Spatial padding for stride-1 convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero-pad `(k-1)/2` on each side; output keeps the input's rows and cols.
    Same,
    /// No padding; output shrinks by `k-1`.
    Valid,
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub dx: Tensor,
    pub dw: Tensor,
    pub db: Tensor,
}

struct Geometry {
    c_in: usize,
    c_out: usize,
    k: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }
}

fn geometry(x: Shape, w: Shape, b: Shape, padding: Padding) -> Result<Geometry> {
    let k = w.h;
    if w.w != k || !(k == 1 || k == 3) {
        return Err(Error::shape(format!("kernel must be 1x1 or 3x3, got {}x{}", w.h, w.w)));
    }
    if w.c != x.c {
        return Err(Error::shape(format!(
            "channel mismatch: input has {} channels, kernel expects {}",
            x.c, w.c
        )));
    }
    if b.numel() != w.n {
        return Err(Error::shape(format!(
            "bias has {} entries for {} output channels",
            b.numel(),
            w.n
        )));
    }
    let (pad, out_h, out_w) = match padding {
        Padding::Same => ((k - 1) / 2, x.h, x.w),
        Padding::Valid => {
            if x.h < k || x.w < k {
                return Err(Error::shape(format!(
                    "valid {k}x{k} convolution on {}x{} leaves no output",
                    x.h, x.w
                )));
            }
            (0, x.h - k + 1, x.w - k + 1)
        }
    };
    Ok(Geometry {
        c_in: x.c,
        c_out: w.n,
        k,
        pad,
        out_h,
        out_w,
    })
}

/// Unrolls one sample into a `(c_in*k*k, out_h*out_w)` column matrix.
fn im2col(src: &[f32], h: usize, w: usize, g: &Geometry, cols: &mut [f32]) {
    let plane = g.out_plane();
    for ci in 0..g.c_in {
        let chan = &src[ci * h * w..(ci + 1) * h * w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = oy as isize + ky as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let in_row = &chan[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = ox as isize + kx as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            in_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds a column matrix back onto one sample's input gradient.
fn col2im(cols: &[f32], h: usize, w: usize, g: &Geometry, dst: &mut [f32]) {
    let plane = g.out_plane();
    for ci in 0..g.c_in {
        let chan = &mut dst[ci * h * w..(ci + 1) * h * w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = oy as isize + ky as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let in_row = &mut chan[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..g.out_w {
                        let ix = ox as isize + kx as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            in_row[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c = a·b + beta·c` for row-major `a: m×k`, `b: k×n`, either operand optionally transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    beta: f32,
    c: &mut [f32],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices hold exactly the m*k, k*n and m*n elements addressed by these strides.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Stride-1 cross-correlation with per-output-channel bias.
///
/// `w` is `(c_out, c_in, k, k)` with `k ∈ {1, 3}`; `b` holds `c_out` values in any
/// shape (the parameter store keeps it as `(1, c_out, 1, 1)`).
pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, padding: Padding) -> Result<Tensor> {
    let xs = x.shape();
    let g = geometry(xs, w.shape(), b.shape(), padding)?;
    let out_shape = Shape::new(xs.n, g.c_out, g.out_h, g.out_w);
    let mut out = Tensor::zeros_unchecked(out_shape);
    let plane = g.out_plane();
    let direct = g.k == 1;
    let mut cols = if direct { Vec::new() } else { vec![0.0; g.patch() * plane] };
    for n in 0..xs.n {
        let dst = out.sample_mut(n);
        for (co, &bias) in b.data().iter().enumerate() {
            dst[co * plane..(co + 1) * plane].fill(bias);
        }
        let src: &[f32] = if direct {
            x.sample(n)
        } else {
            im2col(x.sample(n), xs.h, xs.w, &g, &mut cols);
            &cols
        };
        gemm(g.c_out, g.patch(), plane, w.data(), false, src, false, 1.0, dst);
    }
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to input, weights and bias.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    padding: Padding,
) -> Result<ConvGrads> {
    let xs = x.shape();
    let ws = w.shape();
    let bias_shape = Shape::new(1, ws.n, 1, 1);
    let g = geometry(xs, ws, bias_shape, padding)?;
    let expect = Shape::new(xs.n, g.c_out, g.out_h, g.out_w);
    if dy.shape() != expect {
        return Err(Error::shape(format!(
            "conv upstream gradient is {}, expected {expect}",
            dy.shape()
        )));
    }
    let plane = g.out_plane();
    let patch = g.patch();
    let direct = g.k == 1;
    let mut dx = Tensor::zeros_unchecked(xs);
    let mut dw = Tensor::zeros_unchecked(ws);
    let mut db = Tensor::zeros_unchecked(bias_shape);
    let mut cols = if direct { Vec::new() } else { vec![0.0; patch * plane] };
    let mut dcols = vec![0.0; patch * plane];

    for n in 0..xs.n {
        let dy_n = dy.sample(n);
        for (co, acc) in db.data_mut().iter_mut().enumerate() {
            *acc += dy_n[co * plane..(co + 1) * plane].iter().sum::<f32>();
        }
        let src: &[f32] = if direct {
            x.sample(n)
        } else {
            im2col(x.sample(n), xs.h, xs.w, &g, &mut cols);
            &cols
        };
        // dW += dY · colsᵀ
        gemm(g.c_out, plane, patch, dy_n, false, src, true, 1.0, dw.data_mut());
        // dcols = Wᵀ · dY
        gemm(patch, g.c_out, plane, w.data(), true, dy_n, false, 0.0, &mut dcols);
        if direct {
            dx.sample_mut(n).copy_from_slice(&dcols);
        } else {
            col2im(&dcols, xs.h, xs.w, &g, dx.sample_mut(n));
        }
    }
    Ok(ConvGrads { dx, dw, db })
}
