//! Slice-level forward and backward kernels used by the tape.

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub padding: usize,
    pub stride: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeometry {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }
}

/// Valid output-column range for kernel column `kj` and the input column
/// offset of its first element (stride 1 only).
#[inline]
fn valid_cols(g: &ConvGeometry, kj: usize) -> (usize, usize) {
    let lo = g.padding.saturating_sub(kj);
    let hi = (g.w + g.padding).saturating_sub(kj).min(g.wo);
    (lo, hi.max(lo))
}

/// Unfolds sample `s` of `x` into columns `s*P..(s+1)*P` of the
/// `(cin*kh*kw) x (n*P)` matrix `cols`.
fn im2col<T: Scalar>(g: &ConvGeometry, x: &[T], s: usize, cols: &mut [T]) {
    let p = g.p();
    let np = g.n * p;
    let pad = g.padding as isize;
    let x = &x[s * g.cin * g.h * g.w..(s + 1) * g.cin * g.h * g.w];
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * np + s * p..row * np + (s + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        let (lo, hi) = valid_cols(g, kj);
                        line[..lo].fill(T::zero());
                        line[hi..].fill(T::zero());
                        let off = lo + kj - g.padding;
                        line[lo..hi].copy_from_slice(&src[off..off + (hi - lo)]);
                        continue;
                    }
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - pad;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns of sample `s` back.
fn col2im<T: Scalar>(g: &ConvGeometry, cols: &[T], s: usize, dx: &mut [T]) {
    let p = g.p();
    let np = g.n * p;
    let pad = g.padding as isize;
    let dx = &mut dx[s * g.cin * g.h * g.w..(s + 1) * g.cin * g.h * g.w];
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * np + s * p..row * np + (s + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let line = &src[oy * g.wo..(oy + 1) * g.wo];
                    if g.stride == 1 {
                        let (lo, hi) = valid_cols(g, kj);
                        let off = lo + kj - g.padding;
                        for (d, v) in dst[off..off + (hi - lo)].iter_mut().zip(&line[lo..hi]) {
                            *d += *v;
                        }
                        continue;
                    }
                    for (ox, v) in line.iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - pad;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += *v;
                        }
                    }
                }
            }
        }
    }
}

fn unfold_batch<T: Scalar>(g: &ConvGeometry, x: &[T]) -> Vec<T> {
    let mut cols = vec![T::zero(); g.k() * g.n * g.p()];
    for s in 0..g.n {
        im2col(g, x, s, &mut cols);
    }
    cols
}

fn conv2d_forward_im2col<T: Scalar>(
    g: &ConvGeometry,
    x: &[T],
    weight: &[T],
    bias: &[T],
) -> Vec<T> {
    let (k, p) = (g.k(), g.p());
    let np = g.n * p;
    let mut out = vec![T::zero(); g.n * g.cout * p];
    for s in 0..g.n {
        for co in 0..g.cout {
            let off = (s * g.cout + co) * p;
            out[off..off + p].fill(bias[co]);
        }
    }
    if k == 0 || np == 0 {
        return out;
    }
    let cols = unfold_batch(g, x);
    // Output column j = s*P + q lives at s*cout*P + co*P + q; one product
    // per sample keeps the row stride uniform.
    for s in 0..g.n {
        T::gemm(
            g.cout,
            k,
            p,
            T::one(),
            weight,
            (k as isize, 1),
            &cols[s * p..],
            (np as isize, 1),
            T::one(),
            &mut out[s * g.cout * p..(s + 1) * g.cout * p],
            (p as isize, 1),
        );
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

fn conv2d_backward_im2col<T: Scalar>(
    g: &ConvGeometry,
    x: &[T],
    weight: &[T],
    dout: &[T],
    want: (bool, bool, bool),
) -> ConvGrads<T> {
    let (k, p) = (g.k(), g.p());
    let np = g.n * p;
    let db = want.2.then(|| {
        let mut db = vec![T::zero(); g.cout];
        for s in 0..g.n {
            for (co, acc) in db.iter_mut().enumerate() {
                let off = (s * g.cout + co) * p;
                *acc += dout[off..off + p].iter().copied().sum::<T>();
            }
        }
        db
    });
    if k == 0 || np == 0 || !(want.0 || want.1) {
        return ConvGrads {
            input: want.0.then(|| vec![T::zero(); x.len()]),
            weight: want.1.then(|| vec![T::zero(); weight.len()]),
            bias: db,
        };
    }
    // dY rearranged as a cout x (n*P) matrix.
    let mut dy = vec![T::zero(); g.cout * np];
    for s in 0..g.n {
        for co in 0..g.cout {
            let src = (s * g.cout + co) * p;
            dy[co * np + s * p..co * np + (s + 1) * p].copy_from_slice(&dout[src..src + p]);
        }
    }
    let dw = want.1.then(|| {
        let cols = unfold_batch(g, x);
        let mut dw = vec![T::zero(); weight.len()];
        // dW^T (k x cout) = cols (k x nP) * dY^T (nP x cout)
        T::gemm(
            k,
            np,
            g.cout,
            T::one(),
            &cols,
            (np as isize, 1),
            &dy,
            (1, np as isize),
            T::zero(),
            &mut dw,
            (1, k as isize),
        );
        dw
    });
    let dx = want.0.then(|| {
        let mut dcols = vec![T::zero(); k * np];
        // dcols = W^T (k x cout) * dY (cout x nP)
        T::gemm(
            k,
            g.cout,
            np,
            T::one(),
            weight,
            (1, k as isize),
            &dy,
            (np as isize, 1),
            T::zero(),
            &mut dcols,
            (np as isize, 1),
        );
        let mut dx = vec![T::zero(); x.len()];
        for s in 0..g.n {
            col2im(g, &dcols, s, &mut dx);
        }
        dx
    });
    ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    g: &ConvGeometry,
    x: &[T],
    weight: &[T],
    bias: &[T],
) -> Vec<T> {
    if g.stride == 1 {
        shifted::forward(g, x, weight, bias)
    } else {
        conv2d_forward_im2col(g, x, weight, bias)
    }
}

pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeometry,
    x: &[T],
    weight: &[T],
    dout: &[T],
    want: (bool, bool, bool),
) -> ConvGrads<T> {
    if g.stride == 1 {
        shifted::backward(g, x, weight, dout, want)
    } else {
        conv2d_backward_im2col(g, x, weight, dout, want)
    }
}

/// Stride-1 convolution without a full im2col buffer.
///
/// The input is zero-padded to `hp x wp`. Output rows are computed at the
/// padded width `wp`, so tap `(ki, kj)` reads the padded plane at a fixed
/// offset `ki*wp + kj` with unit column stride; the last `kw - 1` columns
/// of every extended row wrap around and are discarded. The unfolded
/// matrix is built one column tile at a time so it stays in cache.
mod shifted {
    use super::{ConvGeometry, ConvGrads};
    use crate::scalar::Scalar;

    /// Elements per unfolded tile.
    const TILE: usize = 1 << 15;

    struct Dims {
        wp: usize,
        plane: usize,
        ext: usize,
        slack: usize,
        k: usize,
        tile: usize,
    }

    fn dims(g: &ConvGeometry) -> Dims {
        let hp = g.h + 2 * g.padding;
        let wp = g.w + 2 * g.padding;
        let ext = g.ho * wp;
        let k = g.cin * g.kh * g.kw;
        Dims {
            wp,
            plane: hp * wp,
            ext,
            slack: g.kw - 1,
            k,
            tile: (TILE / k.max(1)).clamp(16, ext.max(16)),
        }
    }

    fn pad_sample<T: Scalar>(g: &ConvGeometry, d: &Dims, x: &[T], s: usize, buf: &mut [T]) {
        buf.fill(T::zero());
        let src = &x[s * g.cin * g.h * g.w..(s + 1) * g.cin * g.h * g.w];
        for ci in 0..g.cin {
            for y in 0..g.h {
                let dst = ci * d.plane + (y + g.padding) * d.wp + g.padding;
                let from = (ci * g.h + y) * g.w;
                buf[dst..dst + g.w].copy_from_slice(&src[from..from + g.w]);
            }
        }
    }

    /// Padded-plane offset of row `(ci, tap)` of the unfolded matrix.
    fn row_offset(g: &ConvGeometry, d: &Dims, row: usize) -> usize {
        let taps = g.kh * g.kw;
        let (ci, tap) = (row / taps, row % taps);
        ci * d.plane + (tap / g.kw) * d.wp + tap % g.kw
    }

    /// Columns `c0..c0+tw` of the unfolded matrix, row-major with stride `tw`.
    fn unfold_tile<T: Scalar>(g: &ConvGeometry, d: &Dims, xp: &[T], c0: usize, tw: usize, tile: &mut [T]) {
        for row in 0..d.k {
            let from = row_offset(g, d, row) + c0;
            tile[row * tw..(row + 1) * tw].copy_from_slice(&xp[from..from + tw]);
        }
    }

    fn tiles(d: &Dims) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..d.ext).step_by(d.tile).map(|c0| (c0, d.tile.min(d.ext - c0)))
    }

    pub(super) fn forward<T: Scalar>(g: &ConvGeometry, x: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
        let d = dims(g);
        let p = g.ho * g.wo;
        let mut out = vec![T::zero(); g.n * g.cout * p];
        let mut xp = vec![T::zero(); g.cin * d.plane + d.slack];
        let mut tile = vec![T::zero(); d.k * d.tile];
        let mut ext = vec![T::zero(); g.cout * d.ext];
        for s in 0..g.n {
            ext.fill(T::zero());
            if g.cin > 0 {
                pad_sample(g, &d, x, s, &mut xp);
                for (c0, tw) in tiles(&d) {
                    unfold_tile(g, &d, &xp, c0, tw, &mut tile);
                    T::gemm(
                        g.cout,
                        d.k,
                        tw,
                        T::one(),
                        weight,
                        (d.k as isize, 1),
                        &tile,
                        (tw as isize, 1),
                        T::zero(),
                        &mut ext[c0..],
                        (d.ext as isize, 1),
                    );
                }
            }
            for co in 0..g.cout {
                let dst = &mut out[(s * g.cout + co) * p..(s * g.cout + co + 1) * p];
                for oy in 0..g.ho {
                    let src = &ext[co * d.ext + oy * d.wp..co * d.ext + oy * d.wp + g.wo];
                    for (o, v) in dst[oy * g.wo..(oy + 1) * g.wo].iter_mut().zip(src) {
                        *o = *v + bias[co];
                    }
                }
            }
        }
        out
    }

    pub(super) fn backward<T: Scalar>(
        g: &ConvGeometry,
        x: &[T],
        weight: &[T],
        dout: &[T],
        want: (bool, bool, bool),
    ) -> ConvGrads<T> {
        let d = dims(g);
        let p = g.ho * g.wo;
        let mut dx = want.0.then(|| vec![T::zero(); x.len()]);
        let mut dw = want.1.then(|| vec![T::zero(); weight.len()]);
        let mut db = want.2.then(|| vec![T::zero(); g.cout]);
        let mut xp = vec![T::zero(); g.cin * d.plane + d.slack];
        let mut dext = vec![T::zero(); g.cout * d.ext];
        let mut dxp = vec![T::zero(); g.cin * d.plane + d.slack];
        let mut tile = vec![T::zero(); d.k * d.tile];
        for s in 0..g.n {
            // dY at the extended width; wrap-around columns stay zero.
            dext.fill(T::zero());
            for co in 0..g.cout {
                let src = &dout[(s * g.cout + co) * p..(s * g.cout + co + 1) * p];
                for oy in 0..g.ho {
                    let at = co * d.ext + oy * d.wp;
                    dext[at..at + g.wo].copy_from_slice(&src[oy * g.wo..(oy + 1) * g.wo]);
                }
                if let Some(db) = db.as_mut() {
                    db[co] += src.iter().copied().sum::<T>();
                }
            }
            if g.cin == 0 {
                continue;
            }
            if let Some(dw) = dw.as_mut() {
                pad_sample(g, &d, x, s, &mut xp);
                // dW (cout x k) += dY_ext tile * unfolded tile^T
                for (c0, tw) in tiles(&d) {
                    unfold_tile(g, &d, &xp, c0, tw, &mut tile);
                    T::gemm(
                        g.cout,
                        tw,
                        d.k,
                        T::one(),
                        &dext[c0..],
                        (d.ext as isize, 1),
                        &tile,
                        (1, tw as isize),
                        T::one(),
                        dw,
                        (d.k as isize, 1),
                    );
                }
            }
            if let Some(dx) = dx.as_mut() {
                // Unfolded gradient tile = W^T * dY_ext tile; each row is
                // added back into the padded plane at its tap offset.
                dxp.fill(T::zero());
                for (c0, tw) in tiles(&d) {
                    T::gemm(
                        d.k,
                        g.cout,
                        tw,
                        T::one(),
                        weight,
                        (1, d.k as isize),
                        &dext[c0..],
                        (d.ext as isize, 1),
                        T::zero(),
                        &mut tile,
                        (tw as isize, 1),
                    );
                    for row in 0..d.k {
                        let at = row_offset(g, &d, row) + c0;
                        for (o, v) in dxp[at..at + tw].iter_mut().zip(&tile[row * tw..(row + 1) * tw]) {
                            *o += *v;
                        }
                    }
                }
                let dst = &mut dx[s * g.cin * g.h * g.w..(s + 1) * g.cin * g.h * g.w];
                for ci in 0..g.cin {
                    for y in 0..g.h {
                        let from = ci * d.plane + (y + g.padding) * d.wp + g.padding;
                        let to = (ci * g.h + y) * g.w;
                        dst[to..to + g.w].copy_from_slice(&dxp[from..from + g.w]);
                    }
                }
            }
        }
        ConvGrads {
            input: dx,
            weight: dw,
            bias: db,
        }
    }
}

/// Returns pooled values and, per output cell, the flat input index of
/// the first maximal element in row-major window order.
pub(crate) fn max_pool_forward<T: Scalar>(
    dims: [usize; 4],
    window: usize,
    x: &[T],
) -> (Vec<T>, Vec<usize>) {
    let [n, c, h, w] = dims;
    let (ho, wo) = (h / window, w / window);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best_idx = base + oy * window * w + ox * window;
                let mut best = x[best_idx];
                for dy in 0..window {
                    for dx in 0..window {
                        let idx = base + (oy * window + dy) * w + ox * window + dx;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    (out, arg)
}

pub(crate) fn upsample2_forward<T: Scalar>(dims: [usize; 4], x: &[T]) -> Vec<T> {
    let [n, c, h, w] = dims;
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); n * c * h2 * w2];
    for plane in 0..n * c {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * h2 * w2..(plane + 1) * h2 * w2];
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[y * w2 + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward<T: Scalar>(dims: [usize; 4], dout: &[T]) -> Vec<T> {
    let [n, c, h, w] = dims;
    let (h2, w2) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); n * c * h * w];
    for plane in 0..n * c {
        let src = &dout[plane * h2 * w2..(plane + 1) * h2 * w2];
        let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[(y / 2) * w + xx / 2] += src[y * w2 + xx];
            }
        }
    }
    dx
}

/// Logistic function without overflow for large `|x|`.
#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
