//! Raw forward/backward kernels over flat row-major buffers.

use super::Scalar;

/// `a[m×k] · b[k×n]`, optionally with either operand read transposed.
/// `ta` means `a` is stored as k×m; `tb` means `b` is stored as n×k.
pub(crate) fn gemm_into<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    beta: T,
    c: &mut [T],
) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    T::gemm(
        m, k, n, T::one(), a, rsa, csa, b, rsb, csb, beta, c, n as isize, 1,
    );
}

pub(crate) fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    gemm_into(m, k, n, a, false, b, false, T::zero(), &mut c);
    c
}

pub(crate) fn transpose2<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

/// Row-wise softmax over the last axis, max-shifted.
pub(crate) fn softmax_rows<T: Scalar>(x: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (row, dst) in x.chunks(n).zip(out.chunks_mut(n)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            total = total + *d;
        }
        for d in dst.iter_mut() {
            *d = *d / total;
        }
    }
    out
}

/// Gradient of a row softmax given its output `y` and upstream `dy`.
pub(crate) fn softmax_rows_backward<T: Scalar>(y: &[T], dy: &[T], n: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for ((yr, dyr), dxr) in y.chunks(n).zip(dy.chunks(n)).zip(dx.chunks_mut(n)) {
        let dot: T = yr.iter().zip(dyr).map(|(a, b)| *a * *b).sum();
        for ((d, &yv), &g) in dxr.iter_mut().zip(yr).zip(dyr) {
            *d = yv * (g - dot);
        }
    }
    dx
}

/// Unfolds one C×H×W image into a (C·k·k)×(H·W) patch matrix, zero padded.
pub(crate) fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ch in 0..c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let out_row = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (xx, o) in out_row.iter_mut().enumerate() {
                        let sx = xx as isize + dx;
                        *o = if sx < 0 || sx >= w as isize {
                            T::zero()
                        } else {
                            src[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
pub(crate) fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, k: usize, dx: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ch in 0..c {
        let plane = &mut dx[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dxo = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + dxo;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let p = &mut plane[sy as usize * w + sx as usize];
                        *p = *p + src[y * w + xx];
                    }
                }
            }
        }
    }
}

pub(crate) struct ConvDims {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl ConvDims {
    fn patch(&self) -> usize {
        self.in_ch * self.k * self.k
    }
}

/// Stride-1 same-padded convolution. Returns the output and the per-image
/// patch matrices needed by the backward pass.
pub(crate) fn conv2d_forward<T: Scalar>(x: &[T], weight: &[T], d: &ConvDims) -> (Vec<T>, Vec<T>) {
    let hw = d.h * d.w;
    let patch = d.patch();
    let mut cols = vec![T::zero(); d.batch * patch * hw];
    let mut y = vec![T::zero(); d.batch * d.out_ch * hw];
    for b in 0..d.batch {
        let img = &x[b * d.in_ch * hw..(b + 1) * d.in_ch * hw];
        let col = &mut cols[b * patch * hw..(b + 1) * patch * hw];
        im2col(img, d.in_ch, d.h, d.w, d.k, col);
        let out = &mut y[b * d.out_ch * hw..(b + 1) * d.out_ch * hw];
        gemm_into(d.out_ch, patch, hw, weight, false, col, false, T::zero(), out);
    }
    (y, cols)
}

/// Returns `(dx, dweight)`; `dx` is skipped when the input needs no gradient.
pub(crate) fn conv2d_backward<T: Scalar>(
    dy: &[T],
    cols: &[T],
    weight: &[T],
    d: &ConvDims,
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>) {
    let hw = d.h * d.w;
    let patch = d.patch();
    let mut dw = vec![T::zero(); d.out_ch * patch];
    let mut dx = need_dx.then(|| vec![T::zero(); d.batch * d.in_ch * hw]);
    let mut dcols = vec![T::zero(); patch * hw];
    for b in 0..d.batch {
        let g = &dy[b * d.out_ch * hw..(b + 1) * d.out_ch * hw];
        let col = &cols[b * patch * hw..(b + 1) * patch * hw];
        // dW += dY[O×HW] · colsᵀ[HW×P]
        gemm_into(d.out_ch, hw, patch, g, false, col, true, T::one(), &mut dw);
        if let Some(dx) = dx.as_mut() {
            // dcols = Wᵀ[P×O] · dY[O×HW]
            gemm_into(patch, d.out_ch, hw, weight, true, g, false, T::zero(), &mut dcols);
            let dimg = &mut dx[b * d.in_ch * hw..(b + 1) * d.in_ch * hw];
            col2im(&dcols, d.in_ch, d.h, d.w, d.k, dimg);
        }
    }
    (dx, dw)
}

/// 2×2 max-pool with stride 2 over B×C×H×W (floor on odd extents).
/// Returns the pooled values and the flat source index of every maximum.
pub(crate) fn maxpool2_forward<T: Scalar>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                y.push(x[best]);
                arg.push(best);
            }
        }
    }
    (y, arg)
}

/// Per-channel batch statistics over (B, H, W) for a B×C×H×W tensor.
pub(crate) fn channel_moments<T: Scalar>(x: &[T], b: usize, c: usize, hw: usize) -> (Vec<T>, Vec<T>) {
    let count = T::from_usize(b * hw).expect("count fits");
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for bi in 0..b {
            let off = (bi * c + ch) * hw;
            s = s + x[off..off + hw].iter().copied().sum::<T>();
        }
        let m = s / count;
        let mut v = T::zero();
        for bi in 0..b {
            let off = (bi * c + ch) * hw;
            v = v + x[off..off + hw].iter().map(|&e| (e - m) * (e - m)).sum::<T>();
        }
        mean[ch] = m;
        var[ch] = v / count;
    }
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposed_gemm_flags() {
        // a = [[1,2,3],[4,5,6]] (2×3), b = [[1,0],[0,1],[1,1]] (3×2)
        let a = [1.0f64, 2., 3., 4., 5., 6.];
        let b = [1.0f64, 0., 0., 1., 1., 1.];
        let c = matmul(&a, &b, 2, 3, 2);
        assert_eq!(c, vec![4., 5., 10., 11.]);
        let at = transpose2(&a, 2, 3);
        let bt = transpose2(&b, 3, 2);
        let mut c2 = vec![0.0; 4];
        gemm_into(2, 3, 2, &at, true, &bt, true, 0.0, &mut c2);
        assert_eq!(c, c2);
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), c> == <x, col2im(c)>
        let (ch, h, w, k) = (2, 3, 4, 3);
        let x: Vec<f64> = (0..ch * h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let n = ch * k * k * h * w;
        let c: Vec<f64> = (0..n).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut cols = vec![0.0; n];
        im2col(&x, ch, h, w, k, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&c, ch, h, w, k, &mut back);
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn maxpool_picks_window_maximum() {
        let x = [1.0f32, 5., 2., 0., 3., 4., 1., 8., 0., 0., 0., 0., 0., 9., 0., 0.];
        let (y, arg) = maxpool2_forward(&x, 1, 4, 4);
        assert_eq!(y, vec![5., 8., 9., 0.]);
        assert_eq!(arg[0], 1);
        assert_eq!(arg[1], 7);
    }
}
