//! Raw convolution kernels on flat buffers.
//!
//! Convolutions are lowered to a matrix product through im2col. Transposed
//! convolution is implemented as the adjoint of the matching strided
//! convolution, so both share the same column buffers.

use crate::element::Element;
use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    /// Mirror without repeating the edge sample (`[c b | a b c | b a]`).
    Reflect,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
    pub mode: PadMode,
}

impl Padding {
    pub const NONE: Padding = Padding::uniform(0, PadMode::Zero);

    pub const fn uniform(p: usize, mode: PadMode) -> Self {
        Self {
            top: p,
            bottom: p,
            left: p,
            right: p,
            mode,
        }
    }

    pub const fn zero(p: usize) -> Self {
        Self::uniform(p, PadMode::Zero)
    }

    pub const fn reflect(p: usize) -> Self {
        Self::uniform(p, PadMode::Reflect)
    }

    /// Size-preserving padding for an even kernel at stride 1: the extra
    /// sample goes to the bottom/right edge.
    pub const fn same_even(kernel: usize, mode: PadMode) -> Self {
        let total = kernel - 1;
        Self {
            top: total / 2,
            bottom: total - total / 2,
            left: total / 2,
            right: total - total / 2,
            mode,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: Padding,
}

impl Conv2dSpec {
    pub fn new(stride: usize, padding: Padding) -> Self {
        Self { stride, padding }
    }

    /// Output spatial size, `floor((H + pads - k) / stride) + 1`.
    pub fn output_size(&self, h: usize, w: usize, k: usize) -> Result<(usize, usize)> {
        if self.stride == 0 {
            return Err(invalid("conv2d", "stride must be positive"));
        }
        let hp = h + self.padding.top + self.padding.bottom;
        let wp = w + self.padding.left + self.padding.right;
        if hp < k || wp < k {
            return Err(invalid(
                "conv2d",
                format!("kernel {k} larger than padded input {hp}x{wp}"),
            ));
        }
        if self.padding.mode == PadMode::Reflect {
            let p = &self.padding;
            if p.top.max(p.bottom) >= h || p.left.max(p.right) >= w {
                return Err(invalid(
                    "conv2d",
                    format!("reflection padding {p:?} too large for {h}x{w}"),
                ));
            }
        }
        Ok(((hp - k) / self.stride + 1, (wp - k) / self.stride + 1))
    }
}

/// Transposed convolution: the adjoint of a [`Conv2dSpec`] convolution whose
/// input is the transposed convolution's output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvTranspose2dSpec {
    pub stride: usize,
    /// Zero padding of the adjoint convolution.
    pub padding: usize,
    /// Extra rows/columns appended at the bottom/right of the output.
    pub output_padding: usize,
}

impl ConvTranspose2dSpec {
    /// 3x3 stride-2 upsampling that exactly doubles the spatial size.
    pub const UPSAMPLE2: ConvTranspose2dSpec = ConvTranspose2dSpec {
        stride: 2,
        padding: 1,
        output_padding: 1,
    };

    pub fn output_size(&self, h: usize, w: usize, k: usize) -> Result<(usize, usize)> {
        if self.stride == 0 || h == 0 || w == 0 {
            return Err(invalid("conv_transpose2d", "stride and input size must be positive"));
        }
        let f = |x: usize| -> Result<usize> {
            ((x - 1) * self.stride + k + self.output_padding)
                .checked_sub(2 * self.padding)
                .ok_or_else(|| invalid("conv_transpose2d", "padding larger than output"))
        };
        let out = (f(h)?, f(w)?);
        // The adjoint convolution must map the output back onto the input grid.
        let back = self.adjoint().output_size(out.0, out.1, k)?;
        if back != (h, w) {
            return Err(invalid(
                "conv_transpose2d",
                format!("output_padding {} inconsistent with stride", self.output_padding),
            ));
        }
        Ok(out)
    }

    pub fn adjoint(&self) -> Conv2dSpec {
        Conv2dSpec::new(self.stride, Padding::zero(self.padding))
    }
}

#[inline]
fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

/// Pad one `h x w` plane.
pub fn pad_plane<T: Element>(src: &[T], h: usize, w: usize, p: &Padding, dst: &mut Vec<T>) {
    let hp = h + p.top + p.bottom;
    let wp = w + p.left + p.right;
    dst.clear();
    dst.resize(hp * wp, T::zero());
    for y in 0..hp {
        let sy = y as isize - p.top as isize;
        let row_src = match p.mode {
            PadMode::Zero if sy < 0 || sy >= h as isize => continue,
            PadMode::Zero => sy as usize,
            PadMode::Reflect => reflect_index(sy, h),
        };
        let dst_row = &mut dst[y * wp..(y + 1) * wp];
        let src_row = &src[row_src * w..(row_src + 1) * w];
        dst_row[p.left..p.left + w].copy_from_slice(src_row);
        if p.mode == PadMode::Reflect {
            for x in 0..p.left {
                dst_row[x] = src_row[reflect_index(x as isize - p.left as isize, w)];
            }
            for x in p.left + w..wp {
                dst_row[x] = src_row[reflect_index(x as isize - p.left as isize, w)];
            }
        }
    }
}

/// Adjoint of [`pad_plane`]: fold a gradient on the padded plane back onto the source plane.
pub fn unpad_plane_grad<T: Element>(dpad: &[T], h: usize, w: usize, p: &Padding, dst: &mut [T]) {
    let hp = h + p.top + p.bottom;
    let wp = w + p.left + p.right;
    debug_assert_eq!(dpad.len(), hp * wp);
    debug_assert_eq!(dst.len(), h * w);
    for y in 0..hp {
        let sy = y as isize - p.top as isize;
        let row_src = match p.mode {
            PadMode::Zero if sy < 0 || sy >= h as isize => continue,
            PadMode::Zero => sy as usize,
            PadMode::Reflect => reflect_index(sy, h),
        };
        for x in 0..wp {
            let sx = x as isize - p.left as isize;
            let col_src = match p.mode {
                PadMode::Zero if sx < 0 || sx >= w as isize => continue,
                PadMode::Zero => sx as usize,
                PadMode::Reflect => reflect_index(sx, w),
            };
            dst[row_src * w + col_src] += dpad[y * wp + x];
        }
    }
}

struct Geometry {
    c: usize,
    hp: usize,
    wp: usize,
    k: usize,
    stride: usize,
    ow: usize,
}

/// Upper bound on the number of elements in one im2col buffer. Large
/// problems are processed in bands of output rows to stay below it.
const COL_BUDGET: usize = if cfg!(test) { 1 << 9 } else { 1 << 22 };

fn band_rows(ckk: usize, oh: usize, ow: usize) -> usize {
    (COL_BUDGET / (ckk * ow).max(1)).clamp(1, oh.max(1))
}

/// Columns `[c*k*k, rows*ow]` for output rows `oy0..oy0+rows` of a padded `[c, hp, wp]` block.
fn im2col<T: Element>(padded: &[T], g: &Geometry, oy0: usize, rows: usize, cols: &mut Vec<T>) {
    let n = rows * g.ow;
    cols.clear();
    cols.resize(g.c * g.k * g.k * n, T::zero());
    for ch in 0..g.c {
        let plane = &padded[ch * g.hp * g.wp..(ch + 1) * g.hp * g.wp];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ch * g.k + ky) * g.k + kx;
                let out = &mut cols[row * n..(row + 1) * n];
                for r in 0..rows {
                    let oy = oy0 + r;
                    let src = &plane[(oy * g.stride + ky) * g.wp + kx..];
                    let dst = &mut out[r * g.ow..(r + 1) * g.ow];
                    if g.stride == 1 {
                        dst.copy_from_slice(&src[..g.ow]);
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            *d = src[ox * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]; accumulates into `padded`.
fn col2im<T: Element>(cols: &[T], g: &Geometry, oy0: usize, rows: usize, padded: &mut [T]) {
    let n = rows * g.ow;
    for ch in 0..g.c {
        let plane = &mut padded[ch * g.hp * g.wp..(ch + 1) * g.hp * g.wp];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ch * g.k + ky) * g.k + kx;
                let col = &cols[row * n..(row + 1) * n];
                for r in 0..rows {
                    let base = ((oy0 + r) * g.stride + ky) * g.wp + kx;
                    let src = &col[r * g.ow..(r + 1) * g.ow];
                    for (ox, &v) in src.iter().enumerate() {
                        plane[base + ox * g.stride] += v;
                    }
                }
            }
        }
    }
}

/// Shapes of a convolution problem, `x: [b, c, h, w]`, `w: [o, c, k, k]`.
#[derive(Clone, Copy, Debug)]
pub struct ConvShape {
    pub batch: usize,
    pub in_c: usize,
    pub h: usize,
    pub w: usize,
    pub out_c: usize,
    pub k: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvShape {
    fn geometry(&self, spec: &Conv2dSpec) -> Geometry {
        Geometry {
            c: self.in_c,
            hp: self.h + spec.padding.top + spec.padding.bottom,
            wp: self.w + spec.padding.left + spec.padding.right,
            k: self.k,
            stride: spec.stride,
            ow: self.ow,
        }
    }
}

fn pad_block<T: Element>(x: &[T], s: &ConvShape, p: &Padding, out: &mut Vec<T>, tmp: &mut Vec<T>) {
    let hp = s.h + p.top + p.bottom;
    let wp = s.w + p.left + p.right;
    out.clear();
    out.reserve(s.in_c * hp * wp);
    for ch in 0..s.in_c {
        pad_plane(&x[ch * s.h * s.w..(ch + 1) * s.h * s.w], s.h, s.w, p, tmp);
        out.extend_from_slice(tmp);
    }
}

/// Cross-correlation forward pass. `y` has shape `[b, o, oh, ow]`.
pub fn conv2d_forward<T: Element>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    s: &ConvShape,
    spec: &Conv2dSpec,
) -> Vec<T> {
    let g = s.geometry(spec);
    let n = s.oh * s.ow;
    let ckk = s.in_c * s.k * s.k;
    let mut y = vec![T::zero(); s.batch * s.out_c * n];
    let band = band_rows(ckk, s.oh, s.ow);
    let (mut padded, mut tmp, mut cols) = (Vec::new(), Vec::new(), Vec::new());
    for b in 0..s.batch {
        let xb = &x[b * s.in_c * s.h * s.w..(b + 1) * s.in_c * s.h * s.w];
        pad_block(xb, s, &spec.padding, &mut padded, &mut tmp);
        let yb = &mut y[b * s.out_c * n..(b + 1) * s.out_c * n];
        if let Some(bias) = bias {
            for (o, row) in yb.chunks_mut(n).enumerate() {
                row.fill(bias[o]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        for oy0 in (0..s.oh).step_by(band) {
            let rows = band.min(s.oh - oy0);
            im2col(&padded, &g, oy0, rows, &mut cols);
            let m = rows * s.ow;
            T::gemm(
                s.out_c,
                ckk,
                m,
                weight,
                (ckk as isize, 1),
                &cols,
                (m as isize, 1),
                beta,
                &mut yb[oy0 * s.ow..],
                (n as isize, 1),
            );
        }
    }
    y
}

/// Gradients of [`conv2d_forward`] with respect to the input, weight and bias.
pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dweight: Option<Vec<T>>,
    pub dbias: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Element>(
    x: &[T],
    weight: &[T],
    dy: &[T],
    s: &ConvShape,
    spec: &Conv2dSpec,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let g = s.geometry(spec);
    let n = s.oh * s.ow;
    let ckk = s.in_c * s.k * s.k;
    let mut dx = need.0.then(|| vec![T::zero(); x.len()]);
    let mut dw = need.1.then(|| vec![T::zero(); weight.len()]);
    let dbias = need.2.then(|| {
        let mut db = vec![T::zero(); s.out_c];
        for b in 0..s.batch {
            for (o, acc) in db.iter_mut().enumerate() {
                let start = (b * s.out_c + o) * n;
                *acc += dy[start..start + n].iter().copied().sum::<T>();
            }
        }
        db
    });
    let band = band_rows(ckk, s.oh, s.ow);
    let (mut padded, mut tmp, mut cols) = (Vec::new(), Vec::new(), Vec::new());
    let mut dcols = Vec::new();
    let mut dpad = Vec::new();
    for b in 0..s.batch {
        let dyb = &dy[b * s.out_c * n..(b + 1) * s.out_c * n];
        if dw.is_some() {
            let xb = &x[b * s.in_c * s.h * s.w..(b + 1) * s.in_c * s.h * s.w];
            pad_block(xb, s, &spec.padding, &mut padded, &mut tmp);
        }
        if dx.is_some() {
            dpad.clear();
            dpad.resize(s.in_c * g.hp * g.wp, T::zero());
        }
        for oy0 in (0..s.oh).step_by(band) {
            let rows = band.min(s.oh - oy0);
            let m = rows * s.ow;
            let dy_band = &dyb[oy0 * s.ow..];
            if let Some(dw) = dw.as_mut() {
                im2col(&padded, &g, oy0, rows, &mut cols);
                // dW^T[ckk, o] += cols[ckk, m] * dy^T[m, o], so the large
                // operand is read along its rows
                T::gemm(
                    ckk,
                    m,
                    s.out_c,
                    &cols,
                    (m as isize, 1),
                    dy_band,
                    (1, n as isize),
                    T::one(),
                    dw,
                    (1, ckk as isize),
                );
            }
            if dx.is_some() {
                dcols.clear();
                dcols.resize(ckk * m, T::zero());
                // dcols[ckk, m] = W^T[ckk, o] * dy[o, m]
                T::gemm(
                    ckk,
                    s.out_c,
                    m,
                    weight,
                    (1, ckk as isize),
                    dy_band,
                    (n as isize, 1),
                    T::zero(),
                    &mut dcols,
                    (m as isize, 1),
                );
                col2im(&dcols, &g, oy0, rows, &mut dpad);
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * s.in_c * s.h * s.w..(b + 1) * s.in_c * s.h * s.w];
            for ch in 0..s.in_c {
                unpad_plane_grad(
                    &dpad[ch * g.hp * g.wp..(ch + 1) * g.hp * g.wp],
                    s.h,
                    s.w,
                    &spec.padding,
                    &mut dxb[ch * s.h * s.w..(ch + 1) * s.h * s.w],
                );
            }
        }
    }
    ConvGrads {
        dx,
        dweight: dw,
        dbias,
    }
}

/// Shapes of a transposed convolution, `x: [b, cin, h, w]`, `w: [cin, cout, k, k]`,
/// output `[b, cout, oh, ow]`.
#[derive(Clone, Copy, Debug)]
pub struct ConvTransposeShape {
    pub batch: usize,
    pub in_c: usize,
    pub h: usize,
    pub w: usize,
    pub out_c: usize,
    pub k: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvTransposeShape {
    /// The adjoint convolution maps the `[cout, oh, ow]` output back to `[cin, h, w]`.
    fn adjoint(&self) -> ConvShape {
        ConvShape {
            batch: self.batch,
            in_c: self.out_c,
            h: self.oh,
            w: self.ow,
            out_c: self.in_c,
            k: self.k,
            oh: self.h,
            ow: self.w,
        }
    }
}

pub fn conv_transpose2d_forward<T: Element>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    s: &ConvTransposeShape,
    spec: &ConvTranspose2dSpec,
) -> Vec<T> {
    let adj = s.adjoint();
    let cspec = spec.adjoint();
    let g = adj.geometry(&cspec);
    let n = s.h * s.w;
    let ckk = s.out_c * s.k * s.k;
    let out_plane = s.oh * s.ow;
    let mut y = vec![T::zero(); s.batch * s.out_c * out_plane];
    let band = band_rows(ckk, s.h, s.w);
    let mut cols = Vec::new();
    let mut dpad = Vec::new();
    for b in 0..s.batch {
        let xb = &x[b * s.in_c * n..(b + 1) * s.in_c * n];
        dpad.clear();
        dpad.resize(s.out_c * g.hp * g.wp, T::zero());
        for iy0 in (0..s.h).step_by(band) {
            let rows = band.min(s.h - iy0);
            let m = rows * s.w;
            cols.clear();
            cols.resize(ckk * m, T::zero());
            // cols[cout*k*k, m] = W^T[cout*k*k, cin] * x[cin, m]
            T::gemm(
                ckk,
                s.in_c,
                m,
                weight,
                (1, ckk as isize),
                &xb[iy0 * s.w..],
                (n as isize, 1),
                T::zero(),
                &mut cols,
                (m as isize, 1),
            );
            col2im(&cols, &g, iy0, rows, &mut dpad);
        }
        let yb = &mut y[b * s.out_c * out_plane..(b + 1) * s.out_c * out_plane];
        for ch in 0..s.out_c {
            let plane = &mut yb[ch * out_plane..(ch + 1) * out_plane];
            unpad_plane_grad(
                &dpad[ch * g.hp * g.wp..(ch + 1) * g.hp * g.wp],
                s.oh,
                s.ow,
                &cspec.padding,
                plane,
            );
            if let Some(bias) = bias {
                for v in plane.iter_mut() {
                    *v += bias[ch];
                }
            }
        }
    }
    y
}

pub fn conv_transpose2d_backward<T: Element>(
    x: &[T],
    weight: &[T],
    dy: &[T],
    s: &ConvTransposeShape,
    spec: &ConvTranspose2dSpec,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let adj = s.adjoint();
    let cspec = spec.adjoint();
    let g = adj.geometry(&cspec);
    let n = s.h * s.w;
    let ckk = s.out_c * s.k * s.k;
    let out_plane = s.oh * s.ow;
    let mut dx = need.0.then(|| vec![T::zero(); x.len()]);
    let mut dw = need.1.then(|| vec![T::zero(); weight.len()]);
    let dbias = need.2.then(|| {
        let mut db = vec![T::zero(); s.out_c];
        for b in 0..s.batch {
            for (ch, acc) in db.iter_mut().enumerate() {
                let start = (b * s.out_c + ch) * out_plane;
                *acc += dy[start..start + out_plane].iter().copied().sum::<T>();
            }
        }
        db
    });
    let band = band_rows(ckk, s.h, s.w);
    let (mut padded, mut tmp, mut cols) = (Vec::new(), Vec::new(), Vec::new());
    for b in 0..s.batch {
        let dyb = &dy[b * s.out_c * out_plane..(b + 1) * s.out_c * out_plane];
        pad_block(dyb, &adj, &cspec.padding, &mut padded, &mut tmp);
        for iy0 in (0..s.h).step_by(band) {
            let rows = band.min(s.h - iy0);
            let m = rows * s.w;
            im2col(&padded, &g, iy0, rows, &mut cols);
            if let Some(dx) = dx.as_mut() {
                // dx[cin, m] = W[cin, ckk] * cols[ckk, m]
                T::gemm(
                    s.in_c,
                    ckk,
                    m,
                    weight,
                    (ckk as isize, 1),
                    &cols,
                    (m as isize, 1),
                    T::zero(),
                    &mut dx[b * s.in_c * n + iy0 * s.w..],
                    (n as isize, 1),
                );
            }
            if let Some(dw) = dw.as_mut() {
                let xb = &x[b * s.in_c * n..(b + 1) * s.in_c * n];
                // dW^T[ckk, cin] += cols[ckk, m] * x^T[m, cin]
                T::gemm(
                    ckk,
                    m,
                    s.in_c,
                    &cols,
                    (m as isize, 1),
                    &xb[iy0 * s.w..],
                    (1, n as isize),
                    T::one(),
                    dw,
                    (1, ckk as isize),
                );
            }
        }
    }
    ConvGrads {
        dx,
        dweight: dw,
        dbias,
    }
}
