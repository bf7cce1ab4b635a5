//! Differentiable operations recorded on a [`Tape`].

use crate::error::{Error, Result};
use crate::tape::{BackwardCtx, Function, Precision, Tape, Var};

/// Element types the convolution kernels can run in.
pub(crate) trait Elem:
    Copy + Default + std::ops::AddAssign + std::ops::Mul<Output = Self> + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    /// Raw strided `c = a·b + beta·c`.
    ///
    /// # Safety
    /// Every element addressed through the strides must lie in the buffers.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
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
    );
}

impl Elem for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }

    unsafe fn gemm_raw(
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
    ) {
        // SAFETY: forwarded from the caller.
        unsafe { matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, 1) }
    }
}

impl Elem for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm_raw(
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
    ) {
        // SAFETY: forwarded from the caller.
        unsafe { matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, 1) }
    }
}

/// `c = op(a) · op(b) + beta · c` for row-major matrices with leading
/// dimensions `lda`, `ldb`, `ldc`, where `op(a)` is `m × k` and `op(b)` is
/// `k × n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_ld<T: Elem>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    lda: usize,
    a_trans: bool,
    b: &[T],
    ldb: usize,
    b_trans: bool,
    c: &mut [T],
    ldc: usize,
    beta: T,
) {
    if m == 0 || n == 0 {
        return;
    }
    let (a_rows, a_cols) = if a_trans { (k, m) } else { (m, k) };
    let (b_rows, b_cols) = if b_trans { (n, k) } else { (k, n) };
    assert!(a_cols <= lda && a.len() >= (a_rows - 1) * lda + a_cols);
    assert!(b_cols <= ldb && b.len() >= (b_rows - 1) * ldb + b_cols);
    assert!(n <= ldc && c.len() >= (m - 1) * ldc + n);
    let (rsa, csa) = if a_trans { (1, lda as isize) } else { (lda as isize, 1) };
    let (rsb, csb) = if b_trans { (1, ldb as isize) } else { (ldb as isize, 1) };
    // SAFETY: the asserts above guarantee every index touched through the
    // given strides lies inside the three slices.
    unsafe { T::gemm_raw(m, k, n, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), ldc as isize) }
}

/// [`gemm_ld`] for densely packed matrices.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Elem>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_trans: bool,
    b: &[T],
    b_trans: bool,
    c: &mut [T],
    beta: T,
) {
    let lda = if a_trans { m } else { k };
    let ldb = if b_trans { k } else { n };
    gemm_ld(m, k, n, a, lda, a_trans, b, ldb, b_trans, c, n, beta);
}

/// Unfolded columns are built a few input channels at a time so the scratch
/// buffer stays cache sized.
const COLS_BUDGET: usize = 32 * 1024;

/// Geometry of a 2D cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let [batch, in_channels, height, width] = *input else {
            return Err(Error::shape(format!("conv2d input must be 4D, got {input:?}")));
        };
        let [out_channels, wc, kernel_h, kernel_w] = *weight else {
            return Err(Error::shape(format!("conv2d weight must be 4D, got {weight:?}")));
        };
        if wc != in_channels {
            return Err(Error::shape(format!(
                "conv2d input has {in_channels} channels but weight expects {wc}"
            )));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be positive"));
        }
        let (ph, pw) = (height + 2 * padding, width + 2 * padding);
        if kernel_h > ph || kernel_w > pw {
            return Err(Error::shape(format!(
                "kernel {kernel_h}x{kernel_w} larger than padded input {ph}x{pw}"
            )));
        }
        Ok(Self {
            batch,
            in_channels,
            height,
            width,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
            out_h: (ph - kernel_h) / stride + 1,
            out_w: (pw - kernel_w) / stride + 1,
        })
    }

    fn taps(&self) -> usize {
        self.kernel_h * self.kernel_w
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.taps()
    }

    fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Input channels per unfolding block.
    fn channel_block(&self) -> usize {
        (COLS_BUDGET / (self.taps() * self.out_pixels()).max(1)).clamp(1, self.in_channels)
    }

    /// Unfolds channels `c0..c1` of one image `[C, H, W]` into
    /// `[(c1-c0)*kh*kw, out_h*out_w]`.
    fn im2col<T: Elem>(&self, image: &[T], c0: usize, c1: usize, cols: &mut [T]) {
        let p = self.out_pixels();
        let mut row = 0;
        for c in c0..c1 {
            let plane = &image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..self.kernel_h {
                for kx in 0..self.kernel_w {
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        let line = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        if iy < 0 || iy >= self.height as isize {
                            line.fill(T::default());
                            continue;
                        }
                        let src = &plane[iy as usize * self.width..(iy as usize + 1) * self.width];
                        for (ox, d) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            *d = if ix < 0 || ix >= self.width as isize { T::default() } else { src[ix as usize] };
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`] over all channels: scatters columns back
    /// onto an image.
    fn col2im<T: Elem>(&self, cols: &[T], image: &mut [T]) {
        let p = self.out_pixels();
        let mut row = 0;
        for c in 0..self.in_channels {
            let plane = &mut image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..self.kernel_h {
                for kx in 0..self.kernel_w {
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.width..(iy as usize + 1) * self.width];
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < self.width as isize {
                                dst[ix as usize] += src[oy * self.out_w + ox];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// For stride 1 and square kernels the input gradient is itself a
    /// correlation of the output gradient with the flipped, transposed
    /// weights. Returns that geometry (per image) when it applies.
    fn transposed(&self) -> Option<ConvGeometry> {
        let k = self.kernel_h;
        if self.stride != 1 || self.kernel_w != k || self.padding >= k {
            return None;
        }
        let geo = ConvGeometry::new(
            &[1, self.out_channels, self.out_h, self.out_w],
            &[self.in_channels, self.out_channels, k, k],
            1,
            k - 1 - self.padding,
        )
        .ok()?;
        (geo.out_h == self.height && geo.out_w == self.width).then_some(geo)
    }
}

/// `[K, C, h, w]` → `[C, K, h, w]` with both spatial axes reversed.
fn flip_transpose<T: Elem>(weight: &[T], k: usize, c: usize, h: usize, w: usize) -> Vec<T> {
    let mut out = vec![T::default(); weight.len()];
    for o in 0..k {
        for i in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[((i * k + o) * h + (h - 1 - y)) * w + (w - 1 - x)] = weight[((o * c + i) * h + y) * w + x];
                }
            }
        }
    }
    out
}

/// Correlates one image, accumulating nothing: `out` is overwritten.
fn conv_image<T: Elem>(geo: &ConvGeometry, image: &[T], weight: &[T], out: &mut [T], cols: &mut [T]) {
    let (pl, p, taps) = (geo.patch_len(), geo.out_pixels(), geo.taps());
    let block = geo.channel_block();
    for c0 in (0..geo.in_channels).step_by(block) {
        let c1 = (c0 + block).min(geo.in_channels);
        let rows = (c1 - c0) * taps;
        geo.im2col(image, c0, c1, &mut cols[..rows * p]);
        let beta = T::from_f64(if c0 == 0 { 0.0 } else { 1.0 });
        gemm_ld(geo.out_channels, rows, p, &weight[c0 * taps..], pl, false, &cols[..rows * p], p, false, out, p, beta);
    }
}

fn scratch<T: Elem>(geo: &ConvGeometry) -> Vec<T> {
    vec![T::default(); geo.channel_block() * geo.taps() * geo.out_pixels()]
}

fn narrow<T: Elem>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::from_f64(x)).collect()
}

fn widen<T: Elem>(v: Vec<T>) -> Vec<f64> {
    v.into_iter().map(T::to_f64).collect()
}

/// Stride-1 correlation over a shifted copy of the input.
///
/// The batch is copied once into a zero-padded, channel-major buffer in which
/// rows are `W + p` apart and images `H + p` rows apart, so the right padding
/// of one row doubles as the left padding of the next (and likewise between
/// images). Output pixel `(n, oy, ox)` then sits at column
/// `j = (n·(H+p) + oy)·(W+p) + ox`, and its input under tap `(ky, kx)` at
/// `j + ky·(W+p) + kx` of the same channel row. Every tap therefore becomes a
/// contiguous multiply-add over columns. Columns that land on padding are
/// computed and dropped. Work is blocked over columns so the active slices
/// stay in L1.
struct Shifted<'g> {
    geo: &'g ConvGeometry,
    /// Row and image strides of the padded buffer.
    ws: usize,
    hs: usize,
    /// Padded buffer length per channel.
    len: usize,
    /// Columns spanned by the outputs of all images.
    cols: usize,
}

/// Columns per block.
const SHIFT_BLOCK: usize = 256;

#[inline(always)]
fn axpy<T: Elem>(y: &mut [T], a: T, x: &[T]) {
    for (y, &x) in y.iter_mut().zip(x) {
        *y += a * x;
    }
}

/// Dot product with independent partial sums so it vectorises.
#[inline(always)]
fn dot<T: Elem>(a: &[T], b: &[T]) -> T {
    const LANES: usize = 16;
    let mut lanes = [T::default(); LANES];
    let (ac, bc) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for i in 0..LANES {
            lanes[i] += x[i] * y[i];
        }
    }
    let mut sum = T::default();
    for (x, y) in ar.iter().zip(br) {
        sum += *x * *y;
    }
    for l in lanes {
        sum += l;
    }
    sum
}

impl<'g> Shifted<'g> {
    /// Few-channel inputs are cheap to unfold and thin here.
    const MIN_CHANNELS: usize = 8;

    fn new(geo: &'g ConvGeometry) -> Option<Self> {
        if geo.stride != 1 || geo.in_channels < Self::MIN_CHANNELS || geo.batch == 0 {
            return None;
        }
        let p = geo.padding;
        let (ws, hs) = (geo.width + p, geo.height + p);
        let len = (geo.batch * hs + p) * ws + p;
        let cols = ((geo.batch - 1) * hs + geo.out_h - 1) * ws + geo.out_w;
        Some(Self { geo, ws, hs, len, cols })
    }

    fn offset(&self, t: usize) -> usize {
        (t / self.geo.kernel_w) * self.ws + t % self.geo.kernel_w
    }

    fn column(&self, n: usize, oy: usize) -> usize {
        (n * self.hs + oy) * self.ws
    }

    /// Position of input pixel `(n, y, 0)` in a channel row.
    fn input_start(&self, n: usize, y: usize) -> usize {
        let p = self.geo.padding;
        (n * self.hs + p + y) * self.ws + p
    }

    fn pad_input<T: Elem>(&self, input: &[T]) -> Vec<T> {
        let g = self.geo;
        let mut xp = vec![T::default(); g.in_channels * self.len];
        for n in 0..g.batch {
            for c in 0..g.in_channels {
                for y in 0..g.height {
                    let src = &input[((n * g.in_channels + c) * g.height + y) * g.width..][..g.width];
                    let dst = c * self.len + self.input_start(n, y);
                    xp[dst..dst + g.width].copy_from_slice(src);
                }
            }
        }
        xp
    }

    /// `[K, C, h, w]` → `[h·w, C, K]`.
    fn tap_major<T: Elem>(&self, weight: &[T]) -> Vec<T> {
        let g = self.geo;
        let (k, c, taps) = (g.out_channels, g.in_channels, g.taps());
        let mut out = vec![T::default(); weight.len()];
        for o in 0..k {
            for ch in 0..c {
                for t in 0..taps {
                    out[(t * c + ch) * k + o] = weight[(o * c + ch) * taps + t];
                }
            }
        }
        out
    }

    fn blocks(&self) -> impl Iterator<Item = (usize, usize)> {
        let cols = self.cols;
        (0..cols).step_by(SHIFT_BLOCK).map(move |j0| (j0, SHIFT_BLOCK.min(cols - j0)))
    }

    fn forward<T: Elem>(&self, input: &[T], weight: &[T]) -> Vec<T> {
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2.
            return unsafe { self.forward_avx2(input, weight) };
        }
        self.forward_impl(input, weight)
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    unsafe fn forward_avx2<T: Elem>(&self, input: &[T], weight: &[T]) -> Vec<T> {
        self.forward_impl(input, weight)
    }

    #[inline(always)]
    fn forward_impl<T: Elem>(&self, input: &[T], weight: &[T]) -> Vec<T> {
        let g = self.geo;
        let (k, c) = (g.out_channels, g.in_channels);
        let xp = self.pad_input(input);
        let wt = self.tap_major(weight);
        let mut acc = vec![T::default(); k * self.cols];
        for (j0, n) in self.blocks() {
            for t in 0..g.taps() {
                let off = self.offset(t);
                for ch in 0..c {
                    let xs = &xp[ch * self.len + j0 + off..][..n];
                    let ws = &wt[(t * c + ch) * k..][..k];
                    for (o, &w) in ws.iter().enumerate() {
                        axpy(&mut acc[o * self.cols + j0..][..n], w, xs);
                    }
                }
            }
        }
        let mut out = vec![T::default(); g.batch * k * g.out_pixels()];
        for n in 0..g.batch {
            for o in 0..k {
                for oy in 0..g.out_h {
                    let src = &acc[o * self.cols + self.column(n, oy)..][..g.out_w];
                    out[((n * k + o) * g.out_h + oy) * g.out_w..][..g.out_w].copy_from_slice(src);
                }
            }
        }
        out
    }

    fn backward<T: Elem>(
        &self,
        input: &[T],
        weight: &[T],
        grad_output: &[T],
        needs: [bool; 2],
    ) -> (Option<Vec<T>>, Option<Vec<T>>) {
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2.
            return unsafe { self.backward_avx2(input, weight, grad_output, needs) };
        }
        self.backward_impl(input, weight, grad_output, needs)
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    unsafe fn backward_avx2<T: Elem>(
        &self,
        input: &[T],
        weight: &[T],
        grad_output: &[T],
        needs: [bool; 2],
    ) -> (Option<Vec<T>>, Option<Vec<T>>) {
        self.backward_impl(input, weight, grad_output, needs)
    }

    #[inline(always)]
    fn backward_impl<T: Elem>(
        &self,
        input: &[T],
        weight: &[T],
        grad_output: &[T],
        needs: [bool; 2],
    ) -> (Option<Vec<T>>, Option<Vec<T>>) {
        let g = self.geo;
        let (k, c, taps) = (g.out_channels, g.in_channels, g.taps());
        let zero = T::default();
        // Output gradient in column space, zero on dropped columns.
        let mut gp = vec![zero; k * self.cols];
        for n in 0..g.batch {
            for o in 0..k {
                for oy in 0..g.out_h {
                    let src = &grad_output[((n * k + o) * g.out_h + oy) * g.out_w..][..g.out_w];
                    gp[o * self.cols + self.column(n, oy)..][..g.out_w].copy_from_slice(src);
                }
            }
        }
        let d_weight = needs[1].then(|| {
            let xp = self.pad_input(input);
            let mut dwt = vec![zero; weight.len()];
            for (j0, n) in self.blocks() {
                for t in 0..taps {
                    let off = self.offset(t);
                    for ch in 0..c {
                        let xs = &xp[ch * self.len + j0 + off..][..n];
                        for o in 0..k {
                            dwt[(t * c + ch) * k + o] += dot(&gp[o * self.cols + j0..][..n], xs);
                        }
                    }
                }
            }
            let mut dw = vec![zero; weight.len()];
            for o in 0..k {
                for ch in 0..c {
                    for t in 0..taps {
                        dw[(o * c + ch) * taps + t] = dwt[(t * c + ch) * k + o];
                    }
                }
            }
            dw
        });
        let d_input = needs[0].then(|| {
            let wt = self.tap_major(weight);
            let mut dxp = vec![zero; c * self.len];
            for (j0, n) in self.blocks() {
                for t in 0..taps {
                    let off = self.offset(t);
                    for ch in 0..c {
                        let dst = &mut dxp[ch * self.len + j0 + off..][..n];
                        for (o, &w) in wt[(t * c + ch) * k..][..k].iter().enumerate() {
                            axpy(dst, w, &gp[o * self.cols + j0..][..n]);
                        }
                    }
                }
            }
            let mut dx = vec![zero; input.len()];
            for n in 0..g.batch {
                for ch in 0..c {
                    for y in 0..g.height {
                        let src = ch * self.len + self.input_start(n, y);
                        dx[((n * c + ch) * g.height + y) * g.width..][..g.width].copy_from_slice(&dxp[src..src + g.width]);
                    }
                }
            }
            dx
        });
        (d_input, d_weight)
    }
}

/// Cross-correlation forward pass on raw buffers, shared by the tape op and
/// by anything that just needs filter responses.
pub fn conv2d_forward(geo: &ConvGeometry, input: &[f64], weight: &[f64]) -> Vec<f64> {
    forward_in(geo, input, weight)
}

fn forward_in<T: Elem>(geo: &ConvGeometry, input: &[T], weight: &[T]) -> Vec<T> {
    if let Some(sh) = Shifted::new(geo) {
        return sh.forward(input, weight);
    }
    let in_img = geo.in_channels * geo.height * geo.width;
    let out_img = geo.out_channels * geo.out_pixels();
    let mut out = vec![T::default(); geo.batch * out_img];
    let mut cols = scratch(geo);
    for n in 0..geo.batch {
        conv_image(geo, &input[n * in_img..(n + 1) * in_img], weight, &mut out[n * out_img..(n + 1) * out_img], &mut cols);
    }
    out
}

/// Input and weight gradients of [`forward_in`].
fn backward_in<T: Elem>(
    geo: &ConvGeometry,
    input: &[T],
    weight: &[T],
    grad_output: &[T],
    needs: [bool; 2],
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    if let Some(sh) = Shifted::new(geo) {
        return sh.backward(input, weight, grad_output, needs);
    }
    let (pl, p, taps) = (geo.patch_len(), geo.out_pixels(), geo.taps());
    let in_img = geo.in_channels * geo.height * geo.width;
    let out_img = geo.out_channels * p;
    let (zero, one) = (T::default(), T::from_f64(1.0));
    let mut d_input = needs[0].then(|| vec![zero; input.len()]);
    let mut d_weight = needs[1].then(|| vec![zero; weight.len()]);
    let mut cols = scratch(geo);
    let block = geo.channel_block();

    let transposed = geo.transposed();
    let flipped = transposed.map(|_| flip_transpose(weight, geo.out_channels, geo.in_channels, geo.kernel_h, geo.kernel_w));
    let mut t_cols = transposed.as_ref().map(scratch).unwrap_or_default();
    let mut full_cols = if transposed.is_none() && d_input.is_some() { vec![zero; pl * p] } else { Vec::new() };

    for n in 0..geo.batch {
        let g_out = &grad_output[n * out_img..(n + 1) * out_img];
        if let Some(dw) = d_weight.as_mut() {
            let image = &input[n * in_img..(n + 1) * in_img];
            for c0 in (0..geo.in_channels).step_by(block) {
                let c1 = (c0 + block).min(geo.in_channels);
                let rows = (c1 - c0) * taps;
                geo.im2col(image, c0, c1, &mut cols[..rows * p]);
                // dW[K, block] += dOut[K, P] · cols[block, P]^T
                gemm_ld(geo.out_channels, p, rows, g_out, p, false, &cols[..rows * p], p, true, &mut dw[c0 * taps..], pl, one);
            }
        }
        if let Some(di) = d_input.as_mut() {
            let di = &mut di[n * in_img..(n + 1) * in_img];
            match (&transposed, &flipped) {
                (Some(t), Some(wf)) => conv_image(t, g_out, wf, di, &mut t_cols),
                _ => {
                    // dcols[PL, P] = W[K, PL]^T · dOut[K, P]
                    gemm(pl, geo.out_channels, p, weight, true, g_out, false, &mut full_cols, zero);
                    geo.col2im(&full_cols, di);
                }
            }
        }
    }
    (d_input, d_weight)
}

struct Conv2d {
    geo: ConvGeometry,
    precision: Precision,
}

impl Function for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Vec<f64>>>> {
        let (input, weight, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad_output);
        let needs = [ctx.needs_grad[0], ctx.needs_grad[1]];
        Ok(match self.precision {
            Precision::F64 => {
                let (di, dw) = backward_in(&self.geo, input, weight, g, needs);
                vec![di, dw]
            }
            Precision::F32 => {
                let (di, dw) = backward_in::<f32>(&self.geo, &narrow(input), &narrow(weight), &narrow(g), needs);
                vec![di.map(widen), dw.map(widen)]
            }
        })
    }
}

struct AddChannelBias {
    channels: usize,
    plane: usize,
}

impl Function for AddChannelBias {
    fn name(&self) -> &'static str {
        "add_channel_bias"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Vec<f64>>>> {
        let d_bias = ctx.needs_grad[1].then(|| {
            let mut db = vec![0.0; self.channels];
            for (i, chunk) in ctx.grad_output.chunks(self.plane).enumerate() {
                db[i % self.channels] += chunk.iter().sum::<f64>();
            }
            db
        });
        Ok(vec![ctx.needs_grad[0].then(|| ctx.grad_output.to_vec()), d_bias])
    }
}

struct Relu;

impl Function for Relu {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Vec<f64>>>> {
        let g = ctx
            .inputs[0]
            .iter()
            .zip(ctx.grad_output)
            .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
            .collect();
        Ok(vec![Some(g)])
    }
}

struct Abs;

impl Function for Abs {
    fn name(&self) -> &'static str {
        "abs"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Vec<f64>>>> {
        let g = ctx.inputs[0].iter().zip(ctx.grad_output).map(|(&x, &g)| {
                if x > 0.0 {
                    g
                } else if x < 0.0 {
                    -g
                } else {
                    0.0
                }
            })
            .collect();
        Ok(vec![Some(g)])
    }
}

struct GlobalAvgPool {
    plane: usize,
}

impl Function for GlobalAvgPool {
    fn name(&self) -> &'static str {
        "global_avg_pool"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Vec<f64>>>> {
        let inv = 1.0 / self.plane as f64;
        let g = ctx
            .grad_output
            .iter()
            .flat_map(|&g| std::iter::repeat_n(g * inv, self.plane))
            .collect();
        Ok(vec![Some(g)])
    }
}

struct SoftmaxCrossEntropy {
    probs: Vec<f64>,
    labels: Vec<usize>,
    classes: usize,
}

impl Function for SoftmaxCrossEntropy {
    fn name(&self) -> &'static str {
        "softmax_cross_entropy"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Vec<f64>>>> {
        let scale = ctx.grad_output[0] / self.labels.len() as f64;
        let mut g: Vec<f64> = self.probs.iter().map(|p| p * scale).collect();
        for (row, &label) in self.labels.iter().enumerate() {
            g[row * self.classes + label] -= scale;
        }
        Ok(vec![Some(g)])
    }
}

struct Sum;

impl Function for Sum {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Vec<f64>>>> {
        Ok(vec![Some(vec![ctx.grad_output[0]; ctx.inputs[0].len()])])
    }
}

struct Scale(f64);

impl Function for Scale {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Vec<f64>>>> {
        Ok(vec![Some(ctx.grad_output.iter().map(|g| g * self.0).collect())])
    }
}

struct Add;

impl Function for Add {
    fn name(&self) -> &'static str {
        "add"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Vec<f64>>>> {
        let g = ctx.grad_output.to_vec();
        Ok(vec![ctx.needs_grad[0].then(|| g.clone()), ctx.needs_grad[1].then_some(g)])
    }
}

struct Mul;

impl Function for Mul {
    fn name(&self) -> &'static str {
        "mul"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Vec<f64>>>> {
        let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
        let g = ctx.grad_output;
        Ok(vec![
            ctx.needs_grad[0].then(|| g.iter().zip(b).map(|(g, b)| g * b).collect()),
            ctx.needs_grad[1].then(|| g.iter().zip(a).map(|(g, a)| g * a).collect()),
        ])
    }
}

impl Tape {
    /// Batched cross-correlation of `[N, C, H, W]` with `[K, C, h, w]`,
    /// zero padding on all sides.
    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, padding: usize) -> Result<Var> {
        let geo = ConvGeometry::new(self.shape(input), self.shape(weight), stride, padding)?;
        let precision = self.conv_precision();
        let out = match precision {
            Precision::F64 => forward_in(&geo, self.value(input), self.value(weight)),
            Precision::F32 => widen(forward_in::<f32>(&geo, &narrow(self.value(input)), &narrow(self.value(weight)))),
        };
        let shape = vec![geo.batch, geo.out_channels, geo.out_h, geo.out_w];
        Ok(self.record(&[input, weight], shape, out, Box::new(Conv2d { geo, precision })))
    }

    /// Adds `bias[k]` to every pixel of channel `k` of a `[N, K, H, W]` value.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let [_, channels, h, w] = shape[..] else {
            return Err(Error::shape(format!("bias input must be 4D, got {shape:?}")));
        };
        if self.shape(bias) != [channels] {
            return Err(Error::shape(format!("bias shape {:?} for {channels} channels", self.shape(bias))));
        }
        let plane = h * w;
        let b = self.value(bias);
        let out = self
            .value(x)
            .chunks(plane)
            .enumerate()
            .flat_map(|(i, chunk)| {
                let bi = b[i % channels];
                chunk.iter().map(move |v| v + bi)
            })
            .collect();
        Ok(self.record(&[x, bias], shape, out, Box::new(AddChannelBias { channels, plane })))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        self.record(&[x], shape, out, Box::new(Relu))
    }

    /// Elementwise `|x|`; the gradient at 0 is taken as 0.
    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.abs()).collect();
        let shape = self.shape(x).to_vec();
        self.record(&[x], shape, out, Box::new(Abs))
    }

    /// Spatial mean, `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let [n, c, h, w] = shape[..] else {
            return Err(Error::shape(format!("global_avg_pool input must be 4D, got {shape:?}")));
        };
        let plane = h * w;
        let out = self.value(x).chunks(plane).map(|ch| ch.iter().sum::<f64>() / plane as f64).collect();
        Ok(self.record(&[x], vec![n, c], out, Box::new(GlobalAvgPool { plane })))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let [n, classes] = shape[..] else {
            return Err(Error::shape(format!("logits must be 2D, got {shape:?}")));
        };
        if labels.len() != n {
            return Err(Error::shape(format!("{} labels for a batch of {n}", labels.len())));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let mut probs = Vec::with_capacity(n * classes);
        let mut loss = 0.0;
        for (row, &label) in self.value(logits).chunks(classes).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|z| (z - max).exp()).sum();
            let lse = max + denom.ln();
            loss += lse - row[label];
            probs.extend(row.iter().map(|z| (z - lse).exp()));
        }
        let op = SoftmaxCrossEntropy { probs, labels: labels.to_vec(), classes };
        Ok(self.record(&[logits], vec![1], vec![loss / n as f64], Box::new(op)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.record(&[x], vec![1], vec![s], Box::new(Sum))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        self.record(&[x], shape, out, Box::new(Scale(factor)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!("add of {:?} and {:?}", self.shape(a), self.shape(b))));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.record(&[a, b], shape, out, Box::new(Add)))
    }

    /// Elementwise product of two values of identical shape.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!("mul of {:?} and {:?}", self.shape(a), self.shape(b))));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.record(&[a, b], shape, out, Box::new(Mul)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    /// Direct nested-loop correlation, independent of im2col/gemm.
    fn naive_conv(input: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Vec<f64> {
        let [n, c, h, w] = input.shape()[..] else { unreachable!() };
        let [k, _, kh, kw] = weight.shape()[..] else { unreachable!() };
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; n * k * oh * ow];
        for b in 0..n {
            for o in 0..k {
                for y in 0..oh {
                    for x in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for dy in 0..kh {
                                for dx in 0..kw {
                                    let iy = (y * stride + dy) as isize - pad as isize;
                                    let ix = (x * stride + dx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += input.data()[((b * c + ci) * h + iy as usize) * w + ix as usize]
                                        * weight.data()[((o * c + ci) * kh + dy) * kw + dx];
                                }
                            }
                        }
                        out[((b * k + o) * oh + y) * ow + x] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_scalar_kernel_scales() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1, 1, 3, 3], (1..=9).map(f64::from).collect()));
        let w = tape.leaf(&t(&[1, 1, 1, 1], vec![2.0]));
        let y = tape.conv2d(x, w, 1, 0).unwrap();
        let expect: Vec<f64> = (1..=9).map(|v| 2.0 * v as f64).collect();
        assert_eq!(tape.value(y), expect.as_slice());
    }

    #[test]
    fn conv_delta_kernel_is_identity() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..25).map(|v| v as f64 * 0.3 - 2.0).collect();
        let x = tape.leaf(&t(&[1, 1, 5, 5], data.clone()));
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = tape.leaf(&t(&[1, 1, 3, 3], k));
        let y = tape.conv2d(x, w, 1, 1).unwrap();
        assert_eq!(tape.value(y), data.as_slice());
    }

    #[test]
    fn conv_hand_computed() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let w = tape.leaf(&t(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let y = tape.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y), &[5.0]);
    }

    #[test]
    fn conv_is_correlation_not_convolution() {
        // An asymmetric kernel must not be flipped.
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1, 1, 1, 3], vec![1.0, 2.0, 3.0]));
        let w = tape.leaf(&t(&[1, 1, 1, 3], vec![1.0, 0.0, -1.0]));
        let y = tape.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(tape.value(y), &[-2.0]);
    }

    #[test]
    fn conv_channel_mismatch() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros([1, 2, 4, 4]));
        let w = tape.leaf(&Tensor::zeros([1, 3, 3, 3]));
        assert!(matches!(tape.conv2d(x, w, 1, 1), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn conv_matches_naive_with_stride_and_padding() {
        let input = t(&[2, 3, 7, 6], (0..252).map(|v| ((v * 37) % 11) as f64 - 5.0).collect());
        let weight = t(&[4, 3, 3, 3], (0..108).map(|v| ((v * 13) % 7) as f64 - 3.0).collect());
        for (stride, pad) in [(1, 0), (1, 1), (2, 1), (3, 2)] {
            let mut tape = Tape::new();
            let x = tape.leaf(&input);
            let w = tape.leaf(&weight);
            let y = tape.conv2d(x, w, stride, pad).unwrap();
            assert_eq!(tape.value(y), naive_conv(&input, &weight, stride, pad).as_slice());
        }
    }

    /// Direct adjoint of `naive_conv` for a loss `Σ y·r`.
    fn naive_conv_grads(input: &Tensor, weight: &Tensor, r: &[f64], stride: usize, pad: usize) -> (Vec<f64>, Vec<f64>) {
        let [n, c, h, w] = input.shape()[..] else { unreachable!() };
        let [k, _, kh, kw] = weight.shape()[..] else { unreachable!() };
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut di = vec![0.0; input.len()];
        let mut dw = vec![0.0; weight.len()];
        for b in 0..n {
            for o in 0..k {
                for y in 0..oh {
                    for x in 0..ow {
                        let g = r[((b * k + o) * oh + y) * ow + x];
                        for ci in 0..c {
                            for dy in 0..kh {
                                for dx in 0..kw {
                                    let iy = (y * stride + dy) as isize - pad as isize;
                                    let ix = (x * stride + dx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let ii = ((b * c + ci) * h + iy as usize) * w + ix as usize;
                                    let wi = ((o * c + ci) * kh + dy) * kw + dx;
                                    di[ii] += g * weight.data()[wi];
                                    dw[wi] += g * input.data()[ii];
                                }
                            }
                        }
                    }
                }
            }
        }
        (di, dw)
    }

    #[test]
    fn conv_gradients_match_naive_adjoint() {
        // (channels, kernel, stride, pad): the 6-channel 5×5 case spans
        // several unfolding blocks; stride 2 and pad ≥ kernel take the
        // generic input-gradient path; 8 or more channels at stride 1 use
        // per-tap products.
        let cases = [(3, 3, 1, 1), (6, 5, 1, 2), (2, 3, 2, 1), (2, 3, 1, 3), (1, 1, 1, 0), (12, 5, 1, 2), (9, 3, 1, 0), (8, 3, 1, 4), (9, 1, 1, 0), (10, 3, 2, 1)];
        for (c, ks, stride, pad) in cases {
            let input = t(&[2, c, 16, 15], (0..2 * c * 240).map(|v| ((v * 37) % 11) as f64 - 5.0).collect());
            let weight = t(&[3, c, ks, ks], (0..3 * c * ks * ks).map(|v| ((v * 13) % 7) as f64 - 3.0).collect());
            let mut tape = Tape::new();
            let x = tape.leaf(&input.clone().with_grad());
            let w = tape.leaf(&weight.clone().with_grad());
            let y = tape.conv2d(x, w, stride, pad).unwrap();
            assert_eq!(tape.value(y), naive_conv(&input, &weight, stride, pad).as_slice());
            let r: Vec<f64> = (0..tape.value(y).len()).map(|i| ((i * 29) % 5) as f64 - 2.0).collect();
            let rv = tape.constant(tape.shape(y).to_vec(), r.clone()).unwrap();
            let prod = tape.mul(y, rv).unwrap();
            let loss = tape.sum(prod);
            tape.backward(loss).unwrap();
            let (di, dw) = naive_conv_grads(&input, &weight, &r, stride, pad);
            assert_eq!(tape.grad(x).unwrap(), di.as_slice(), "input grad c={c} k={ks} s={stride} p={pad}");
            assert_eq!(tape.grad(w).unwrap(), dw.as_slice(), "weight grad c={c} k={ks} s={stride} p={pad}");
        }
    }

    #[test]
    fn relu_forward_and_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[3], vec![-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y), &[0.0, 0.0, 2.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], vec![-1.0, 2.0]).with_grad());
        let y = tape.relu(x);
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn pool_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::filled([1, 1, 4, 4], 1.0));
        let y = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(y), &[1.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1, 1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).with_grad());
        let y = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.shape(y), &[1, 1]);
        assert_eq!(tape.value(y), &[4.0]);
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.25; 4]);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::new();
        let z = tape.leaf(&Tensor::zeros([1, 5]));
        let loss = tape.softmax_cross_entropy(z, &[3]).unwrap();
        assert!((tape.value(loss)[0] - 5f64.ln()).abs() < 1e-12);

        let mut tape = Tape::new();
        let z = tape.leaf(&t(&[1, 2], vec![10.0, -10.0]));
        let loss = tape.softmax_cross_entropy(z, &[0]).unwrap();
        // ln(1 + e^-20)
        let expect = (-20f64).exp().ln_1p();
        assert!((tape.value(loss)[0] - expect).abs() < 1e-15);
        assert!((tape.value(loss)[0] - 2.06e-9).abs() < 1e-11);
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let logits = vec![0.5, -1.0, 2.0, 0.0, 0.3, 0.3];
        let labels = [2, 0];
        let mut tape = Tape::new();
        let z = tape.leaf(&t(&[2, 3], logits.clone()).with_grad());
        let loss = tape.softmax_cross_entropy(z, &labels).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(z).unwrap();
        for (r, row) in logits.chunks(3).enumerate() {
            let denom: f64 = row.iter().map(|v| v.exp()).sum();
            for c in 0..3 {
                let onehot = if c == labels[r] { 1.0 } else { 0.0 };
                let expect = (row[c].exp() / denom - onehot) / 2.0;
                assert!((g[r * 3 + c] - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut tape = Tape::new();
        let z = tape.leaf(&Tensor::zeros([1, 3]));
        assert!(matches!(
            tape.softmax_cross_entropy(z, &[3]),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn bias_broadcasts_per_channel() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros([2, 2, 1, 2]).with_grad());
        let b = tape.leaf(&t(&[2], vec![1.0, -1.0]).with_grad());
        let y = tape.add_channel_bias(x, b).unwrap();
        assert_eq!(tape.value(y), &[1.0, 1.0, -1.0, -1.0, 1.0, 1.0, -1.0, -1.0]);
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(b).unwrap(), &[4.0, 4.0]);
    }
}
