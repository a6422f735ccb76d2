//! 2-D convolution as a candle custom op backed by im2col + `matrixmultiply`.
//!
//! candle's generic CPU convolution is several times slower than a plain
//! gemm for the small channel counts used here, and its backward pass goes
//! through strided copies. This op computes the forward pass and both
//! gradients with one gemm per batch item.

use std::borrow::Cow;

use candle_core::{CpuStorage, CustomOp2, Layout, Result, Shape, Tensor};

pub trait GemmElem: candle_core::WithDType + Default + std::ops::AddAssign {
    /// `C = A * B + beta * C` with arbitrary strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn unit() -> Self;
}

impl GemmElem for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        unsafe { matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc) }
    }

    fn unit() -> Self {
        1.0
    }
}

impl GemmElem for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        unsafe { matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc) }
    }

    fn unit() -> Self {
        1.0
    }
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    fn cols(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn in_plane(&self) -> usize {
        self.c_in * self.h * self.w
    }

    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Valid output columns `[lo, hi)` for kernel column `kx`.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let wo = self.out_w();
        let mut lo = 0;
        while lo < wo && (lo * self.stride + kx) < self.pad {
            lo += 1;
        }
        let mut hi = wo;
        while hi > lo && (hi - 1) * self.stride + kx >= self.w + self.pad {
            hi -= 1;
        }
        (lo, hi)
    }
}

fn im2col<T: GemmElem>(g: &Geometry, x: &[T], cols: &mut [T]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let hw = ho * wo;
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let (lo, hi) = g.valid_cols(kx);
                let row = &mut cols[((ci * g.k + ky) * g.k + kx) * hw..][..hw];
                for oy in 0..ho {
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize || lo >= hi {
                        dst.fill(T::default());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    dst[..lo].fill(T::default());
                    dst[hi..].fill(T::default());
                    let ix0 = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        dst[lo..hi].copy_from_slice(&src[ix0..ix0 + (hi - lo)]);
                    } else {
                        for (j, d) in dst[lo..hi].iter_mut().enumerate() {
                            *d = src[ix0 + j * g.stride];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: GemmElem>(g: &Geometry, cols: &[T], x: &mut [T]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let hw = ho * wo;
    for ci in 0..g.c_in {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let (lo, hi) = g.valid_cols(kx);
                if lo >= hi {
                    continue;
                }
                let row = &cols[((ci * g.k + ky) * g.k + kx) * hw..][..hw];
                let ix0 = lo * g.stride + kx - g.pad;
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (j, v) in row[oy * wo + lo..oy * wo + hi].iter().enumerate() {
                        dst[ix0 + j * g.stride] += *v;
                    }
                }
            }
        }
    }
}

fn contiguous<'a, T: GemmElem>(s: &'a [T], l: &Layout) -> Result<Cow<'a, [T]>> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(Cow::Borrowed(&s[a..b])),
        None => candle_core::bail!("gemm-conv2d expects contiguous operands"),
    }
}

fn forward<T: GemmElem>(g: &Geometry, x: &[T], wt: &[T]) -> Vec<T> {
    let hw = g.out_h() * g.out_w();
    let kd = g.cols();
    let mut out = vec![T::default(); g.batch * g.c_out * hw];
    let mut cols = if g.pointwise() { Vec::new() } else { vec![T::default(); kd * hw] };
    for b in 0..g.batch {
        let xb = &x[b * g.in_plane()..(b + 1) * g.in_plane()];
        let src: &[T] = if g.pointwise() {
            xb
        } else {
            im2col(g, xb, &mut cols);
            &cols
        };
        let ob = &mut out[b * g.c_out * hw..(b + 1) * g.c_out * hw];
        unsafe {
            T::gemm(
                g.c_out, kd, hw,
                wt.as_ptr(), kd as isize, 1,
                src.as_ptr(), hw as isize, 1,
                T::default(),
                ob.as_mut_ptr(), hw as isize, 1,
            )
        }
    }
    out
}

fn grad_input<T: GemmElem>(g: &Geometry, gout: &[T], wt: &[T]) -> Vec<T> {
    let hw = g.out_h() * g.out_w();
    let kd = g.cols();
    let mut dx = vec![T::default(); g.batch * g.in_plane()];
    let mut dcols = if g.pointwise() { Vec::new() } else { vec![T::default(); kd * hw] };
    for b in 0..g.batch {
        let gb = &gout[b * g.c_out * hw..(b + 1) * g.c_out * hw];
        let dxb = &mut dx[b * g.in_plane()..(b + 1) * g.in_plane()];
        let dst = if g.pointwise() { dxb.as_mut_ptr() } else { dcols.as_mut_ptr() };
        // W^T (kd x c_out) * G (c_out x hw)
        unsafe {
            T::gemm(
                kd, g.c_out, hw,
                wt.as_ptr(), 1, kd as isize,
                gb.as_ptr(), hw as isize, 1,
                T::default(),
                dst, hw as isize, 1,
            )
        }
        if !g.pointwise() {
            col2im(g, &dcols, dxb);
        }
    }
    dx
}

/// Blocked transpose of a row-major `rows x cols` matrix.
fn transpose<T: GemmElem>(src: &[T], rows: usize, cols: usize, dst: &mut [T]) {
    const BLOCK: usize = 32;
    for r0 in (0..rows).step_by(BLOCK) {
        for c0 in (0..cols).step_by(BLOCK) {
            for r in r0..(r0 + BLOCK).min(rows) {
                for c in c0..(c0 + BLOCK).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

fn grad_weight<T: GemmElem>(g: &Geometry, x: &[T], gout: &[T]) -> Vec<T> {
    let hw = g.out_h() * g.out_w();
    let kd = g.cols();
    let mut dw = vec![T::default(); g.c_out * kd];
    let mut cols = if g.pointwise() { Vec::new() } else { vec![T::default(); kd * hw] };
    let mut cols_t = vec![T::default(); kd * hw];
    for b in 0..g.batch {
        let xb = &x[b * g.in_plane()..(b + 1) * g.in_plane()];
        let src: &[T] = if g.pointwise() {
            xb
        } else {
            im2col(g, xb, &mut cols);
            &cols
        };
        // gemm packs a row-major right operand much faster than a strided one
        transpose(src, kd, hw, &mut cols_t);
        let gb = &gout[b * g.c_out * hw..(b + 1) * g.c_out * hw];
        // G (c_out x hw) * cols^T (hw x kd), accumulated over the batch
        unsafe {
            T::gemm(
                g.c_out, hw, kd,
                gb.as_ptr(), hw as isize, 1,
                cols_t.as_ptr(), kd as isize, 1,
                T::unit(),
                dw.as_mut_ptr(), kd as isize, 1,
            )
        }
    }
    dw
}

macro_rules! dispatch {
    ($s1:expr, $l1:expr, $s2:expr, $l2:expr, |$a:ident, $b:ident| $body:expr) => {
        match ($s1, $s2) {
            (CpuStorage::F32(x), CpuStorage::F32(y)) => {
                let $a = contiguous(x, $l1)?;
                let $b = contiguous(y, $l2)?;
                CpuStorage::F32($body)
            }
            (CpuStorage::F64(x), CpuStorage::F64(y)) => {
                let $a = contiguous(x, $l1)?;
                let $b = contiguous(y, $l2)?;
                CpuStorage::F64($body)
            }
            _ => candle_core::bail!("gemm-conv2d supports f32 and f64 only"),
        }
    };
}

/// Square-kernel convolution with symmetric zero padding, no bias.
struct Conv2dOp {
    stride: usize,
    pad: usize,
}

struct Conv2dGradInput {
    stride: usize,
    pad: usize,
    h: usize,
    w: usize,
}

struct Conv2dGradWeight {
    stride: usize,
    pad: usize,
    k: usize,
}

impl CustomOp2 for Conv2dOp {
    fn name(&self) -> &'static str {
        "gemm-conv2d"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let (batch, c_in, h, w) = l1.shape().dims4()?;
        let (c_out, c_in_w, k, k2) = l2.shape().dims4()?;
        if c_in != c_in_w || k != k2 {
            candle_core::bail!("gemm-conv2d: input {:?} vs kernel {:?}", l1.shape(), l2.shape());
        }
        if h + 2 * self.pad < k || w + 2 * self.pad < k {
            candle_core::bail!("gemm-conv2d: kernel {k} larger than padded input {h}x{w}");
        }
        let g = Geometry { batch, c_in, h, w, c_out, k, stride: self.stride, pad: self.pad };
        let out = dispatch!(s1, l1, s2, l2, |x, wt| forward(&g, &x, &wt));
        Ok((out, Shape::from((batch, c_out, g.out_h(), g.out_w()))))
    }

    fn bwd(&self, x: &Tensor, wt: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let (_, _, h, w) = x.dims4()?;
        let (_, _, k, _) = wt.dims4()?;
        let dx = grad.apply_op2_no_bwd(
            wt,
            &Conv2dGradInput { stride: self.stride, pad: self.pad, h, w },
        )?;
        let dw = x.apply_op2_no_bwd(&grad, &Conv2dGradWeight { stride: self.stride, pad: self.pad, k })?;
        Ok((Some(dx), Some(dw)))
    }
}

impl CustomOp2 for Conv2dGradInput {
    fn name(&self) -> &'static str {
        "gemm-conv2d-grad-input"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let (batch, c_out, _, _) = l1.shape().dims4()?;
        let (_, c_in, k, _) = l2.shape().dims4()?;
        let g = Geometry { batch, c_in, h: self.h, w: self.w, c_out, k, stride: self.stride, pad: self.pad };
        let out = dispatch!(s1, l1, s2, l2, |go, wt| grad_input(&g, &go, &wt));
        Ok((out, Shape::from((batch, c_in, self.h, self.w))))
    }
}

impl CustomOp2 for Conv2dGradWeight {
    fn name(&self) -> &'static str {
        "gemm-conv2d-grad-weight"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let (batch, c_in, h, w) = l1.shape().dims4()?;
        let (_, c_out, _, _) = l2.shape().dims4()?;
        let g = Geometry { batch, c_in, h, w, c_out, k: self.k, stride: self.stride, pad: self.pad };
        let out = dispatch!(s1, l1, s2, l2, |x, go| grad_weight(&g, &x, &go));
        Ok((out, Shape::from((c_out, c_in, self.k, self.k))))
    }
}

/// `conv2d(x, weight)` for `x: (B, Cin, H, W)`, `weight: (Cout, Cin, k, k)`.
pub fn conv2d(x: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let x = x.contiguous()?;
    let weight = weight.contiguous()?;
    x.apply_op2(&weight, Conv2dOp { stride, pad })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn det_tensor(shape: &[usize], seed: u64) -> Tensor {
        let n: usize = shape.iter().product();
        let mut s = seed;
        let data: Vec<f64> = (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Tensor::from_vec(data, shape, &Device::Cpu).unwrap()
    }

    /// Compare against candle's reference convolution, forward and backward.
    #[test]
    fn matches_reference_conv() {
        for &(stride, pad, k, h, w) in &[
            (1, 1, 3, 7, 6),
            (2, 1, 3, 8, 10),
            (1, 0, 1, 5, 5),
            (1, 0, 3, 6, 6),
            (2, 0, 1, 6, 4),
        ] {
            let x = Var::from_tensor(&det_tensor(&[2, 3, h, w], 1)).unwrap();
            let wt = Var::from_tensor(&det_tensor(&[4, 3, k, k], 2)).unwrap();
            let probe = det_tensor(&[2, 4, (h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1], 3);
            let ours = conv2d(x.as_tensor(), wt.as_tensor(), stride, pad).unwrap();
            let reference = x.as_tensor().conv2d(wt.as_tensor(), pad, stride, 1, 1).unwrap();
            let diff = (&ours - &reference).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
            assert!(diff < 1e-12, "forward diff {diff}");

            let g_ours = (ours * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            let g_ref = (reference * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            for v in [&x, &wt] {
                let a = g_ours.get(v).unwrap();
                let b = g_ref.get(v).unwrap();
                let d = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
                assert!(d < 1e-11, "grad diff {d} for stride {stride} pad {pad} k {k}");
            }
        }
    }
}
