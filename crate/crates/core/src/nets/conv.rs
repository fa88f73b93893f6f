//! 2-D convolution as a candle custom op, im2col + gemm on the CPU.
//!
//! Candle's built-in CPU convolution backward is several times slower for the
//! small feature maps used here, so forward and both gradients are explicit.

use candle_core::{CpuStorage, CustomOp2, Layout, Shape, Tensor, WithDType};
use gemm::{gemm, Parallelism};

trait Elem: WithDType + Default + std::ops::AddAssign {}
impl Elem for f32 {}
impl Elem for f64 {}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Geometry {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn ho(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }
    fn wo(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }
    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }
    fn out_pixels(&self) -> usize {
        self.ho() * self.wo()
    }
    fn in_image(&self) -> usize {
        self.cin * self.h * self.w
    }
}

fn im2col<T: Copy + Default>(g: &Geometry, x: &[T], cols: &mut [T]) {
    let (ho, wo) = (g.ho(), g.wo());
    let n = ho * wo;
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let d = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.h as isize {
                        d.fill(T::default());
                        continue;
                    }
                    let r = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in d.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::default()
                        } else {
                            r[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Copy + std::ops::AddAssign>(g: &Geometry, cols: &[T], x: &mut [T]) {
    let (ho, wo) = (g.ho(), g.wo());
    let n = ho * wo;
    for ci in 0..g.cin {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let r = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            r[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Row-major `dst[m×n] (+)= a[m×k] · b[k×n]` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn matmul<T: Elem>(
    m: usize,
    n: usize,
    k: usize,
    dst: &mut [T],
    dst_rs: isize,
    accumulate: bool,
    a: &[T],
    a_rs: isize,
    a_cs: isize,
    b: &[T],
    b_rs: isize,
    b_cs: isize,
) {
    debug_assert!(dst.len() >= m * n);
    let one = T::from_f64(1.0);
    // SAFETY: every pointer covers the index range implied by its dims and
    // strides; `dst` does not alias `a` or `b`.
    unsafe {
        gemm(
            m,
            n,
            k,
            dst.as_mut_ptr(),
            1,
            dst_rs,
            accumulate,
            a.as_ptr(),
            a_cs,
            a_rs,
            b.as_ptr(),
            b_cs,
            b_rs,
            one,
            one,
            false,
            false,
            false,
            Parallelism::None,
        )
    }
}

fn contiguous<'a, T: Elem>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [T]> {
    let data = s.as_slice::<T>()?;
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("conv2d expects contiguous inputs"),
    }
}

fn forward<T: Elem>(g: &Geometry, x: &[T], w: &[T]) -> Vec<T> {
    let (kk, n) = (g.patch(), g.out_pixels());
    let mut out = vec![T::default(); g.batch * g.cout * n];
    let mut cols = vec![T::default(); kk * n];
    for b in 0..g.batch {
        im2col(g, &x[b * g.in_image()..(b + 1) * g.in_image()], &mut cols);
        let dst = &mut out[b * g.cout * n..(b + 1) * g.cout * n];
        matmul(g.cout, n, kk, dst, n as isize, false, w, kk as isize, 1, &cols, n as isize, 1);
    }
    out
}

fn grad_input<T: Elem>(g: &Geometry, gout: &[T], w: &[T]) -> Vec<T> {
    let (kk, n) = (g.patch(), g.out_pixels());
    let mut gx = vec![T::default(); g.batch * g.in_image()];
    let mut cols = vec![T::default(); kk * n];
    for b in 0..g.batch {
        let go = &gout[b * g.cout * n..(b + 1) * g.cout * n];
        // cols[kk×n] = wᵀ[kk×cout] · go[cout×n]
        matmul(kk, n, g.cout, &mut cols, n as isize, false, w, 1, kk as isize, go, n as isize, 1);
        col2im(g, &cols, &mut gx[b * g.in_image()..(b + 1) * g.in_image()]);
    }
    gx
}

fn grad_weight<T: Elem>(g: &Geometry, x: &[T], gout: &[T]) -> Vec<T> {
    let (kk, n) = (g.patch(), g.out_pixels());
    let mut gw = vec![T::default(); g.cout * kk];
    let mut cols = vec![T::default(); kk * n];
    for b in 0..g.batch {
        im2col(g, &x[b * g.in_image()..(b + 1) * g.in_image()], &mut cols);
        let go = &gout[b * g.cout * n..(b + 1) * g.cout * n];
        // gw[cout×kk] += go[cout×n] · colsᵀ[n×kk]
        matmul(g.cout, kk, n, &mut gw, kk as isize, b > 0, go, n as isize, 1, &cols, 1, n as isize);
    }
    gw
}

macro_rules! dispatch {
    ($s:expr, $f:ident, $($arg:expr),*) => {
        match $s {
            CpuStorage::F32(_) => Ok(<f32 as WithDType>::to_cpu_storage_owned($f::<f32>($($arg),*)?)),
            CpuStorage::F64(_) => Ok(<f64 as WithDType>::to_cpu_storage_owned($f::<f64>($($arg),*)?)),
            _ => candle_core::bail!("conv2d supports f32 and f64 only"),
        }
    };
}

#[derive(Clone, Copy, Debug)]
struct Conv2dOp {
    stride: usize,
    pad: usize,
}

fn geometry(x: &[usize], w: &[usize], stride: usize, pad: usize) -> candle_core::Result<Geometry> {
    let (&[batch, cin, h, wd], &[cout, wcin, k, k2]) = (x, w) else {
        candle_core::bail!("conv2d expects 4-d input and weight, got {x:?} and {w:?}")
    };
    if wcin != cin || k != k2 || h + 2 * pad < k || wd + 2 * pad < k {
        candle_core::bail!("conv2d shape mismatch: input {x:?}, weight {w:?}, pad {pad}");
    }
    Ok(Geometry {
        batch,
        cin,
        h,
        w: wd,
        cout,
        k,
        stride,
        pad,
    })
}

impl CustomOp2 for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d-gemm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = geometry(l1.dims(), l2.dims(), self.stride, self.pad)?;
        fn run<T: Elem>(
            g: &Geometry,
            s1: &CpuStorage,
            l1: &Layout,
            s2: &CpuStorage,
            l2: &Layout,
        ) -> candle_core::Result<Vec<T>> {
            Ok(forward(g, contiguous::<T>(s1, l1)?, contiguous::<T>(s2, l2)?))
        }
        let out: candle_core::Result<CpuStorage> = dispatch!(s1, run, &g, s1, l1, s2, l2);
        Ok((out?, Shape::from((g.batch, g.cout, g.ho(), g.wo()))))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let gx = grad.apply_op2_no_bwd(
            w,
            &GradInputOp {
                stride: self.stride,
                pad: self.pad,
                h: x.dim(2)?,
                w: x.dim(3)?,
            },
        )?;
        let gw = x.apply_op2_no_bwd(
            &grad,
            &GradWeightOp {
                stride: self.stride,
                pad: self.pad,
                k: w.dim(2)?,
            },
        )?;
        Ok((Some(gx), Some(gw)))
    }
}

/// Input gradient; arguments are (output gradient, weight).
struct GradInputOp {
    stride: usize,
    pad: usize,
    h: usize,
    w: usize,
}

impl CustomOp2 for GradInputOp {
    fn name(&self) -> &'static str {
        "conv2d-gemm-grad-input"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let wd = l2.dims();
        let gd = l1.dims();
        let g = geometry(&[gd[0], wd[1], self.h, self.w], wd, self.stride, self.pad)?;
        if gd != [g.batch, g.cout, g.ho(), g.wo()] {
            candle_core::bail!("conv2d grad shape {gd:?} does not match geometry");
        }
        fn run<T: Elem>(
            g: &Geometry,
            s1: &CpuStorage,
            l1: &Layout,
            s2: &CpuStorage,
            l2: &Layout,
        ) -> candle_core::Result<Vec<T>> {
            Ok(grad_input(g, contiguous::<T>(s1, l1)?, contiguous::<T>(s2, l2)?))
        }
        let out: candle_core::Result<CpuStorage> = dispatch!(s1, run, &g, s1, l1, s2, l2);
        Ok((out?, Shape::from((g.batch, g.cin, g.h, g.w))))
    }
}

/// Weight gradient; arguments are (input, output gradient).
struct GradWeightOp {
    stride: usize,
    pad: usize,
    k: usize,
}

impl CustomOp2 for GradWeightOp {
    fn name(&self) -> &'static str {
        "conv2d-gemm-grad-weight"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let xd = l1.dims();
        let gd = l2.dims();
        let g = geometry(xd, &[gd[1], xd[1], self.k, self.k], self.stride, self.pad)?;
        if gd != [g.batch, g.cout, g.ho(), g.wo()] {
            candle_core::bail!("conv2d grad shape {gd:?} does not match geometry");
        }
        fn run<T: Elem>(
            g: &Geometry,
            s1: &CpuStorage,
            l1: &Layout,
            s2: &CpuStorage,
            l2: &Layout,
        ) -> candle_core::Result<Vec<T>> {
            Ok(grad_weight(g, contiguous::<T>(s1, l1)?, contiguous::<T>(s2, l2)?))
        }
        let out: candle_core::Result<CpuStorage> = dispatch!(s1, run, &g, s1, l1, s2, l2);
        Ok((out?, Shape::from((g.cout, g.cin, g.k, g.k))))
    }
}

/// `x: [B, Cin, H, W]`, `w: [Cout, Cin, k, k]` → `[B, Cout, Ho, Wo]`.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> candle_core::Result<Tensor> {
    if stride == 0 {
        candle_core::bail!("conv2d stride must be positive");
    }
    x.contiguous()?
        .apply_op2(&w.contiguous()?, Conv2dOp { stride, pad })
}

/// Nearest-neighbour 2× upsampling; the backward pass sums each 2×2 block.
pub fn upsample2x(x: &Tensor) -> candle_core::Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    x.reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .contiguous()?
        .reshape((b, c, 2 * h, 2 * w))
}
