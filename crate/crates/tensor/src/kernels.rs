//! Dense numeric kernels shared by the tape's forward and backward passes.

use crate::Tensor;

/// `C = op(A) · op(B)` with `op(A)` of shape `m×k` and `op(B)` of shape `k×n`.
///
/// `a_trans` means `A` is stored row-major as `k×m`; likewise `b_trans`
/// means `B` is stored as `n×k`. `C` is row-major `m×n` and is overwritten.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.fill(0.0);
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices hold exactly m*k, k*n and m*n elements and the
    // strides above address them in-bounds for the declared shapes.
    unsafe {
        matrixmultiply::dgemm(
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
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Self {
        assert!(x.len() == 4 && w.len() == 4, "conv2d expects 4-D input and weight");
        assert_eq!(x[1], w[1], "conv2d channel mismatch: input {x:?}, weight {w:?}");
        assert!(stride > 0);
        let (h, wd, kh, kw) = (x[2], x[3], w[2], w[3]);
        assert!(h + 2 * pad >= kh && wd + 2 * pad >= kw, "kernel larger than padded input");
        Self {
            c: x[1],
            h,
            w: wd,
            kh,
            kw,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (wd + 2 * pad - kw) / stride + 1,
            stride,
            pad,
        }
    }

    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let ncol = g.cols();
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let ncol = g.cols();
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * ncol..(row + 1) * ncol];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            x[base + ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let g = ConvGeom::new(x.shape(), w.shape(), stride, pad);
    let n = x.shape()[0];
    let o = w.shape()[0];
    if let Some(b) = b {
        assert_eq!(b.shape(), [o], "conv2d bias shape");
    }
    let in_sz = g.c * g.h * g.w;
    let out_sz = o * g.cols();
    let mut cols = vec![0.0; g.rows() * g.cols()];
    let mut out = vec![0.0; n * out_sz];
    for i in 0..n {
        im2col(&x.data()[i * in_sz..(i + 1) * in_sz], &g, &mut cols);
        let dst = &mut out[i * out_sz..(i + 1) * out_sz];
        gemm(o, g.rows(), g.cols(), w.data(), false, &cols, false, dst);
        if let Some(b) = b {
            for (oc, chunk) in dst.chunks_mut(g.cols()).enumerate() {
                let bv = b.data()[oc];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Tensor::new(vec![n, o, g.oh, g.ow], out).unwrap()
}

/// Returns gradients for input, weight and bias.
pub fn conv2d_backward(x: &Tensor, w: &Tensor, gout: &Tensor, stride: usize, pad: usize) -> (Tensor, Tensor, Tensor) {
    let g = ConvGeom::new(x.shape(), w.shape(), stride, pad);
    let n = x.shape()[0];
    let o = w.shape()[0];
    let in_sz = g.c * g.h * g.w;
    let out_sz = o * g.cols();
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; o];
    let mut cols = vec![0.0; g.rows() * g.cols()];
    let mut gcols = vec![0.0; g.rows() * g.cols()];
    let mut gw_i = vec![0.0; w.len()];
    for i in 0..n {
        let go = &gout.data()[i * out_sz..(i + 1) * out_sz];
        for (oc, chunk) in go.chunks(g.cols()).enumerate() {
            gb[oc] += chunk.iter().sum::<f64>();
        }
        im2col(&x.data()[i * in_sz..(i + 1) * in_sz], &g, &mut cols);
        // dW_i = G_i · colsᵀ
        gemm(o, g.cols(), g.rows(), go, false, &cols, true, &mut gw_i);
        gw.iter_mut().zip(&gw_i).for_each(|(a, b)| *a += b);
        // dcols = Wᵀ · G_i
        gemm(g.rows(), o, g.cols(), w.data(), true, go, false, &mut gcols);
        col2im(&gcols, &g, &mut gx[i * in_sz..(i + 1) * in_sz]);
    }
    (
        Tensor::new(x.shape().to_vec(), gx).unwrap(),
        Tensor::new(w.shape().to_vec(), gw).unwrap(),
        Tensor::new(vec![o], gb).unwrap(),
    )
}

pub fn upsample_nearest(x: &Tensor, factor: usize) -> Tensor {
    let s = x.shape();
    assert!(s.len() >= 2 && factor >= 1);
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let planes = x.len() / (h * w);
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let plane = &x.data()[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            let row = &plane[(y / factor) * w..(y / factor + 1) * w];
            for xx in 0..ow {
                out.push(row[xx / factor]);
            }
        }
    }
    let mut shape = s.to_vec();
    let r = shape.len();
    shape[r - 2] = oh;
    shape[r - 1] = ow;
    Tensor::new(shape, out).unwrap()
}

pub fn upsample_nearest_backward(g: &Tensor, in_shape: &[usize], factor: usize) -> Tensor {
    let r = in_shape.len();
    let (h, w) = (in_shape[r - 2], in_shape[r - 1]);
    let (oh, ow) = (h * factor, w * factor);
    let planes = g.len() / (oh * ow);
    let mut gx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let src = &g.data()[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut gx[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                dst[(y / factor) * w + x / factor] += src[y * ow + x];
            }
        }
    }
    Tensor::new(in_shape.to_vec(), gx).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (o, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; n * o * oh * ow];
        for i in 0..n {
            for oc in 0..o {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = 0.0;
                        for ic in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (y * stride + ky) as isize - pad as isize;
                                    let ix = (xx * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x.data()[((i * c + ic) * h + iy as usize) * wd + ix as usize]
                                            * w.data()[((oc * c + ic) * kh + ky) * kw + kx];
                                    }
                                }
                            }
                        }
                        out[((i * o + oc) * oh + y) * ow + xx] = acc;
                    }
                }
            }
        }
        Tensor::new(vec![n, o, oh, ow], out).unwrap()
    }

    #[test]
    fn conv_matches_direct_loops() {
        let x = Tensor::new(vec![2, 2, 5, 6], (0..120).map(|v| (v as f64 * 0.37).sin()).collect()).unwrap();
        let w = Tensor::new(vec![3, 2, 3, 3], (0..54).map(|v| (v as f64 * 0.11).cos()).collect()).unwrap();
        for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
            let fast = conv2d_forward(&x, &w, None, stride, pad);
            let slow = naive_conv(&x, &w, stride, pad);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gemm_transposes() {
        // A = [[1,2],[3,4]], B = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn upsample_roundtrip_shapes() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = upsample_nearest(&x, 2);
        assert_eq!(y.shape(), [1, 1, 4, 4]);
        assert_eq!(&y.data()[..4], &[1.0, 1.0, 2.0, 2.0]);
        let g = upsample_nearest_backward(&Tensor::full(vec![1, 1, 4, 4], 1.0), x.shape(), 2);
        assert_eq!(g.data(), &[4.0; 4]);
    }
}
