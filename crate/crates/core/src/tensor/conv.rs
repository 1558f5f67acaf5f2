//! im2col convolution kernels with mirror boundary extension.

use super::Scalar;

/// Reflects an out-of-range index back into `0..n` without repeating the
/// edge sample: `-1 -> 1`, `n -> n - 2`.
///
/// Offsets larger than the signal are folded repeatedly, so any integer maps
/// to a valid index as long as `n >= 1`.
pub fn mirror_index(i: isize, n: usize) -> usize {
    debug_assert!(n > 0);
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let r = i.rem_euclid(period);
    if r < n as isize {
        r as usize
    } else {
        (period - r) as usize
    }
}

/// Sizes involved in one 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub dilation: usize,
}

impl Conv2dGeometry {
    pub fn out_height(&self) -> usize {
        self.height.div_ceil(self.stride)
    }

    pub fn out_width(&self) -> usize {
        self.width.div_ceil(self.stride)
    }

    fn out_pixels(&self) -> usize {
        self.out_height() * self.out_width()
    }

    /// Rows of the column matrix: one per (input channel, kernel tap).
    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    /// `map[tap][o]` is the input coordinate read by output `o` at `tap`.
    fn index_map(&self, kernel: usize, out: usize, n: usize) -> Vec<Vec<usize>> {
        let half = (kernel / 2) as isize;
        (0..kernel)
            .map(|t| {
                let off = (t as isize - half) * self.dilation as isize;
                (0..out)
                    .map(|o| mirror_index((o * self.stride) as isize + off, n))
                    .collect()
            })
            .collect()
    }
}

/// Input coordinates read by one kernel tap along one axis.
///
/// Outputs `lo..hi` read `start + stride * (o - lo)` directly; the few outputs
/// outside that range fall off the edge and go through `map`.
struct TapLine {
    map: Vec<usize>,
    lo: usize,
    hi: usize,
}

impl Conv2dGeometry {
    fn tap_lines(&self, kernel: usize, out: usize, n: usize) -> Vec<TapLine> {
        let half = (kernel / 2) as isize;
        let s = self.stride as isize;
        (0..kernel)
            .map(|t| {
                let off = (t as isize - half) * self.dilation as isize;
                let map = (0..out).map(|o| mirror_index(o as isize * s + off, n)).collect();
                let inside = |o: usize| {
                    let i = o as isize * s + off;
                    i >= 0 && i < n as isize
                };
                let lo = (0..out).find(|&o| inside(o)).unwrap_or(out);
                let hi = (lo..out).find(|&o| !inside(o)).unwrap_or(out);
                TapLine { map, lo, hi }
            })
            .collect()
    }
}

/// Unfolds `x` (`[C, H, W]`) into a `[C*kh*kw, Ho*Wo]` column matrix.
pub(crate) fn im2col<T: Scalar>(x: &[T], g: &Conv2dGeometry) -> Vec<T> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let p = ho * wo;
    let rows = g.index_map(g.kernel_h, ho, g.height);
    let cols = g.tap_lines(g.kernel_w, wo, g.width);
    let mut out = vec![T::zero(); g.col_rows() * p];
    let plane = g.height * g.width;
    let stride = g.stride;
    let mut r = 0;
    for c in 0..g.in_channels {
        let src = &x[c * plane..(c + 1) * plane];
        for row_map in &rows {
            for line in &cols {
                let dst = &mut out[r * p..(r + 1) * p];
                for (oi, &ii) in row_map.iter().enumerate() {
                    let src_row = &src[ii * g.width..(ii + 1) * g.width];
                    let dst_row = &mut dst[oi * wo..(oi + 1) * wo];
                    let (lo, hi) = (line.lo, line.hi);
                    if lo < hi {
                        let first = line.map[lo];
                        if stride == 1 {
                            dst_row[lo..hi].copy_from_slice(&src_row[first..first + hi - lo]);
                        } else {
                            for (d, &s) in dst_row[lo..hi].iter_mut().zip(src_row[first..].iter().step_by(stride)) {
                                *d = s;
                            }
                        }
                    }
                    for o in (0..lo).chain(hi..wo) {
                        dst_row[o] = src_row[line.map[o]];
                    }
                }
                r += 1;
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters column gradients back onto `dx`.
pub(crate) fn col2im_add<T: Scalar>(dcols: &[T], g: &Conv2dGeometry, dx: &mut [T]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let p = ho * wo;
    let rows = g.index_map(g.kernel_h, ho, g.height);
    let cols = g.tap_lines(g.kernel_w, wo, g.width);
    let plane = g.height * g.width;
    let stride = g.stride;
    let mut r = 0;
    for c in 0..g.in_channels {
        let dst = &mut dx[c * plane..(c + 1) * plane];
        for row_map in &rows {
            for line in &cols {
                let src = &dcols[r * p..(r + 1) * p];
                for (oi, &ii) in row_map.iter().enumerate() {
                    let src_row = &src[oi * wo..(oi + 1) * wo];
                    let dst_row = &mut dst[ii * g.width..(ii + 1) * g.width];
                    let (lo, hi) = (line.lo, line.hi);
                    if lo < hi {
                        let first = line.map[lo];
                        for (d, &s) in dst_row[first..].iter_mut().step_by(stride).zip(&src_row[lo..hi]) {
                            *d = *d + s;
                        }
                    }
                    for o in (0..lo).chain(hi..wo) {
                        let jj = line.map[o];
                        dst_row[jj] = dst_row[jj] + src_row[o];
                    }
                }
                r += 1;
            }
        }
    }
}

/// Copy of `x` extended by `pad_h` rows and `pad_w` columns of mirrored
/// samples on every side.
fn mirror_pad<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, pad_h: usize, pad_w: usize) -> Vec<T> {
    let (hp, wp) = (h + 2 * pad_h, w + 2 * pad_w);
    let cols: Vec<usize> = (0..wp).map(|j| mirror_index(j as isize - pad_w as isize, w)).collect();
    let mut out = Vec::with_capacity(c * hp * wp);
    for ch in 0..c {
        for i in 0..hp {
            let ii = mirror_index(i as isize - pad_h as isize, h);
            let row = &x[(ch * h + ii) * w..(ch * h + ii + 1) * w];
            out.extend(cols[..pad_w].iter().map(|&j| row[j]));
            out.extend_from_slice(row);
            out.extend(cols[pad_w + w..].iter().map(|&j| row[j]));
        }
    }
    out
}

/// Adjoint of [`mirror_pad`]: folds padded gradients onto their sources.
fn mirror_fold<T: Scalar>(dpad: &[T], c: usize, h: usize, w: usize, pad_h: usize, pad_w: usize) -> Vec<T> {
    let (hp, wp) = (h + 2 * pad_h, w + 2 * pad_w);
    let cols: Vec<usize> = (0..wp).map(|j| mirror_index(j as isize - pad_w as isize, w)).collect();
    let mut dx = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for i in 0..hp {
            let ii = mirror_index(i as isize - pad_h as isize, h);
            let src = &dpad[(ch * hp + i) * wp..(ch * hp + i + 1) * wp];
            let dst = &mut dx[(ch * h + ii) * w..(ch * h + ii + 1) * w];
            for (d, &s) in dst.iter_mut().zip(&src[pad_w..pad_w + w]) {
                *d = *d + s;
            }
            for j in (0..pad_w).chain(pad_w + w..wp) {
                dst[cols[j]] = dst[cols[j]] + src[j];
            }
        }
    }
    dx
}

/// Stride-1 convolutions run on a mirror-padded input. Output rows are
/// computed `padded_width` wide so that every tap reads a contiguous window
/// of the padded buffer; the extra columns are discarded. The windows are
/// unfolded a cache-sized block of columns at a time, one GEMM per block.
struct PaddedLayout {
    pad_h: usize,
    pad_w: usize,
    padded_width: usize,
    /// Elements per padded channel plane.
    plane: usize,
    /// Elements per wide output channel (`height * padded_width`).
    wide: usize,
    /// Wide columns actually touched: up to the last valid output pixel.
    span: usize,
}

impl PaddedLayout {
    fn new(g: &Conv2dGeometry) -> Self {
        let pad_h = g.dilation * (g.kernel_h / 2);
        let pad_w = g.dilation * (g.kernel_w / 2);
        let padded_width = g.width + 2 * pad_w;
        PaddedLayout {
            pad_h,
            pad_w,
            padded_width,
            plane: (g.height + 2 * pad_h) * padded_width,
            wide: g.height * padded_width,
            span: (g.height - 1) * padded_width + g.width,
        }
    }

    /// Offset of each kernel tap's window within a padded plane.
    fn tap_offsets(&self, g: &Conv2dGeometry) -> impl Iterator<Item = usize> + '_ {
        let (kh, kw, d, wp) = (g.kernel_h, g.kernel_w, g.dilation, self.padded_width);
        (0..kh).flat_map(move |a| (0..kw).map(move |b| a * d * wp + b * d))
    }

    /// `(start, len)` column blocks covering the span.
    fn blocks(&self, g: &Conv2dGeometry) -> impl Iterator<Item = (usize, usize)> {
        const CACHE_FLOATS: usize = 1 << 16;
        let size = (CACHE_FLOATS / (g.col_rows() + g.out_channels)).max(256) / 64 * 64;
        let span = self.span;
        (0..span)
            .step_by(size)
            .map(move |start| (start, size.min(span - start)))
    }
}

/// Copies columns `start..start + len` of every (channel, tap) window into
/// `cols`, one row each.
fn unfold_block<T: Scalar>(
    xpad: &[T],
    g: &Conv2dGeometry,
    lay: &PaddedLayout,
    start: usize,
    len: usize,
    cols: &mut [T],
) {
    let mut r = 0;
    for c in 0..g.in_channels {
        let plane = &xpad[c * lay.plane..];
        for off in lay.tap_offsets(g) {
            cols[r * len..(r + 1) * len].copy_from_slice(&plane[off + start..off + start + len]);
            r += 1;
        }
    }
}

/// Adjoint of [`unfold_block`].
fn fold_block<T: Scalar>(cols: &[T], g: &Conv2dGeometry, lay: &PaddedLayout, start: usize, len: usize, dpad: &mut [T]) {
    let mut r = 0;
    for c in 0..g.in_channels {
        let base = c * lay.plane + start;
        for off in lay.tap_offsets(g) {
            for (d, &s) in dpad[base + off..base + off + len]
                .iter_mut()
                .zip(&cols[r * len..(r + 1) * len])
            {
                *d = *d + s;
            }
            r += 1;
        }
    }
}

/// Data a convolution keeps for its backward pass.
pub(crate) enum ConvSaved<T> {
    /// Mirror-padded input (stride-1 path).
    Padded(Vec<T>),
    /// Column matrix (strided path).
    Columns(Vec<T>),
}

/// Forward convolution. Returns the output and what the backward pass needs.
pub(crate) fn conv2d_forward<T: Scalar>(
    x: &[T],
    kernel: &[T],
    bias: Option<&[T]>,
    g: &Conv2dGeometry,
) -> (Vec<T>, ConvSaved<T>) {
    if g.stride == 1 {
        padded_forward(x, kernel, bias, g)
    } else {
        strided_forward(x, kernel, bias, g)
    }
}

fn padded_forward<T: Scalar>(x: &[T], kernel: &[T], bias: Option<&[T]>, g: &Conv2dGeometry) -> (Vec<T>, ConvSaved<T>) {
    let lay = PaddedLayout::new(g);
    let xpad = mirror_pad(x, g.in_channels, g.height, g.width, lay.pad_h, lay.pad_w);
    let mut wide = vec![T::zero(); g.out_channels * lay.wide];
    if let Some(bias) = bias {
        for (o, &b) in bias.iter().enumerate() {
            wide[o * lay.wide..(o + 1) * lay.wide].fill(b);
        }
    }
    let ck = g.col_rows();
    let beta = if bias.is_some() { T::one() } else { T::zero() };
    let mut cols = Vec::new();
    for (start, len) in lay.blocks(g) {
        cols.resize(ck * len, T::zero());
        unfold_block(&xpad, g, &lay, start, len, &mut cols);
        T::gemm(
            g.out_channels,
            ck,
            len,
            T::one(),
            kernel,
            ck as isize,
            1,
            &cols,
            len as isize,
            1,
            beta,
            &mut wide[start..],
            lay.wide as isize,
            1,
        );
    }
    let mut out = Vec::with_capacity(g.out_channels * g.height * g.width);
    for o in 0..g.out_channels {
        for i in 0..g.height {
            let start = o * lay.wide + i * lay.padded_width;
            out.extend_from_slice(&wide[start..start + g.width]);
        }
    }
    (out, ConvSaved::Padded(xpad))
}

fn strided_forward<T: Scalar>(x: &[T], kernel: &[T], bias: Option<&[T]>, g: &Conv2dGeometry) -> (Vec<T>, ConvSaved<T>) {
    let p = g.out_pixels();
    let ck = g.col_rows();
    let cols = im2col(x, g);
    let mut out = vec![T::zero(); g.out_channels * p];
    if let Some(bias) = bias {
        for (o, &b) in bias.iter().enumerate() {
            out[o * p..(o + 1) * p].fill(b);
        }
    }
    let beta = if bias.is_some() { T::one() } else { T::zero() };
    T::gemm(
        g.out_channels,
        ck,
        p,
        T::one(),
        kernel,
        ck as isize,
        1,
        &cols,
        p as isize,
        1,
        beta,
        &mut out,
        p as isize,
        1,
    );
    (out, ConvSaved::Columns(cols))
}

/// Spreads `dy` (`[Cout, H, W]`) onto the wide layout with zeroed margins.
fn widen<T: Scalar>(dy: &[T], g: &Conv2dGeometry, lay: &PaddedLayout) -> Vec<T> {
    let mut wide = vec![T::zero(); g.out_channels * lay.wide];
    for o in 0..g.out_channels {
        for i in 0..g.height {
            let src = &dy[(o * g.height + i) * g.width..(o * g.height + i + 1) * g.width];
            let start = o * lay.wide + i * lay.padded_width;
            wide[start..start + g.width].copy_from_slice(src);
        }
    }
    wide
}

/// Gradient with respect to the kernel.
pub(crate) fn conv2d_grad_kernel<T: Scalar>(dy: &[T], saved: &ConvSaved<T>, g: &Conv2dGeometry) -> Vec<T> {
    let ck = g.col_rows();
    let mut dk = vec![T::zero(); g.out_channels * ck];
    match saved {
        ConvSaved::Padded(xpad) => {
            let lay = PaddedLayout::new(g);
            let dyw = widen(dy, g, &lay);
            let mut cols = Vec::new();
            for (start, len) in lay.blocks(g) {
                cols.resize(ck * len, T::zero());
                unfold_block(xpad, g, &lay, start, len, &mut cols);
                T::gemm(
                    g.out_channels,
                    len,
                    ck,
                    T::one(),
                    &dyw[start..],
                    lay.wide as isize,
                    1,
                    &cols,
                    1,
                    len as isize,
                    T::one(),
                    &mut dk,
                    ck as isize,
                    1,
                );
            }
        }
        ConvSaved::Columns(cols) => {
            let p = g.out_pixels();
            T::gemm(
                g.out_channels,
                p,
                ck,
                T::one(),
                dy,
                p as isize,
                1,
                cols,
                1,
                p as isize,
                T::zero(),
                &mut dk,
                ck as isize,
                1,
            );
        }
    }
    dk
}

/// Gradient with respect to the input.
pub(crate) fn conv2d_grad_input<T: Scalar>(dy: &[T], kernel: &[T], g: &Conv2dGeometry) -> Vec<T> {
    let ck = g.col_rows();
    if g.stride == 1 {
        let lay = PaddedLayout::new(g);
        let dyw = widen(dy, g, &lay);
        let mut dpad = vec![T::zero(); g.in_channels * lay.plane];
        let mut cols = Vec::new();
        for (start, len) in lay.blocks(g) {
            cols.resize(ck * len, T::zero());
            T::gemm(
                ck,
                g.out_channels,
                len,
                T::one(),
                kernel,
                1,
                ck as isize,
                &dyw[start..],
                lay.wide as isize,
                1,
                T::zero(),
                &mut cols,
                len as isize,
                1,
            );
            fold_block(&cols, g, &lay, start, len, &mut dpad);
        }
        return mirror_fold(&dpad, g.in_channels, g.height, g.width, lay.pad_h, lay.pad_w);
    }
    let p = g.out_pixels();
    let mut dcols = vec![T::zero(); ck * p];
    T::gemm(
        ck,
        g.out_channels,
        p,
        T::one(),
        kernel,
        1,
        ck as isize,
        dy,
        p as isize,
        1,
        T::zero(),
        &mut dcols,
        p as isize,
        1,
    );
    let mut dx = vec![T::zero(); g.in_channels * g.height * g.width];
    col2im_add(&dcols, g, &mut dx);
    dx
}

pub(crate) fn conv2d_grad_bias<T: Scalar>(dy: &[T], g: &Conv2dGeometry) -> Vec<T> {
    let p = g.out_pixels();
    dy.chunks_exact(p)
        .map(|row| row.iter().fold(T::zero(), |acc, &v| acc + v))
        .collect()
}
