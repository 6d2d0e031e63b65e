//! Layer primitives with hand-written reverse passes. Every op iterates in
//! a fixed order, so forward and backward are deterministic regardless of
//! how callers batch them.

use crate::scalar::{s, Scalar};
use crate::tensor::Tensor3;

/// 3x3 convolution, stride 1, zero padding 1. Weight layout
/// `[out_ch, in_ch, 3, 3]`, bias `[out_ch]`.
///
/// The three horizontal taps of each kernel row are fused into one pass
/// over the image row; the first/last columns are patched separately.
pub fn conv3x3<T: Scalar>(input: &Tensor3<T>, weight: &[T], bias: &[T], out_ch: usize) -> Tensor3<T> {
    let (ic_n, h, w) = (input.ch, input.h, input.w);
    debug_assert_eq!(weight.len(), out_ch * ic_n * 9);
    debug_assert!(w >= 2, "fused taps require width >= 2");
    let mut out = Tensor3::zeros(out_ch, h, w);
    for oc in 0..out_ch {
        out.plane_mut(oc).fill(bias[oc]);
        for ic in 0..ic_n {
            let wbase = (oc * ic_n + ic) * 9;
            for ky in 0..3usize {
                let dy = ky as isize - 1;
                let (y0, y1) = shift_bounds(h, dy);
                let w0 = weight[wbase + ky * 3];
                let w1 = weight[wbase + ky * 3 + 1];
                let w2 = weight[wbase + ky * 3 + 2];
                for y in y0..y1 {
                    let src = input.row(ic, (y as isize + dy) as usize);
                    let dst = out.row_mut(oc, y);
                    dst[0] = dst[0] + w1 * src[0] + w2 * src[1];
                    for x in 1..w - 1 {
                        dst[x] = dst[x] + w0 * src[x - 1] + w1 * src[x] + w2 * src[x + 1];
                    }
                    dst[w - 1] = dst[w - 1] + w0 * src[w - 2] + w1 * src[w - 1];
                }
            }
        }
    }
    out
}

/// Gradient of [`conv3x3`] with respect to its input.
pub fn conv3x3_back_input<T: Scalar>(
    d_out: &Tensor3<T>,
    weight: &[T],
    in_ch: usize,
) -> Tensor3<T> {
    let (out_ch, h, w) = (d_out.ch, d_out.h, d_out.w);
    let mut d_in = Tensor3::zeros(in_ch, h, w);
    for oc in 0..out_ch {
        for ic in 0..in_ch {
            let wbase = (oc * in_ch + ic) * 9;
            for ky in 0..3usize {
                let dy = ky as isize - 1;
                let (y0, y1) = shift_bounds(h, dy);
                let w0 = weight[wbase + ky * 3];
                let w1 = weight[wbase + ky * 3 + 1];
                let w2 = weight[wbase + ky * 3 + 2];
                for y in y0..y1 {
                    let g = d_out.row(oc, y);
                    let dst = d_in.row_mut(ic, (y as isize + dy) as usize);
                    dst[0] = dst[0] + w0 * g[1] + w1 * g[0];
                    for u in 1..w - 1 {
                        dst[u] = dst[u] + w0 * g[u + 1] + w1 * g[u] + w2 * g[u - 1];
                    }
                    dst[w - 1] = dst[w - 1] + w1 * g[w - 1] + w2 * g[w - 2];
                }
            }
        }
    }
    d_in
}

/// Accumulate the weight and bias gradients of [`conv3x3`].
pub fn conv3x3_back_params<T: Scalar>(
    input: &Tensor3<T>,
    d_out: &Tensor3<T>,
    d_weight: &mut [T],
    d_bias: &mut [T],
) {
    let (ic_n, h, w) = (input.ch, input.h, input.w);
    let out_ch = d_out.ch;
    for oc in 0..out_ch {
        let mut b = T::zero();
        for y in 0..h {
            for &v in d_out.row(oc, y) {
                b = b + v;
            }
        }
        d_bias[oc] = d_bias[oc] + b;
        for ic in 0..ic_n {
            let wbase = (oc * ic_n + ic) * 9;
            for ky in 0..3usize {
                let dy = ky as isize - 1;
                let (y0, y1) = shift_bounds(h, dy);
                let mut acc0 = T::zero();
                let mut acc1 = T::zero();
                let mut acc2 = T::zero();
                for y in y0..y1 {
                    let g = d_out.row(oc, y);
                    let src = input.row(ic, (y as isize + dy) as usize);
                    acc1 = acc1 + g[0] * src[0];
                    acc2 = acc2 + g[0] * src[1];
                    for x in 1..w - 1 {
                        acc0 = acc0 + g[x] * src[x - 1];
                        acc1 = acc1 + g[x] * src[x];
                        acc2 = acc2 + g[x] * src[x + 1];
                    }
                    acc0 = acc0 + g[w - 1] * src[w - 2];
                    acc1 = acc1 + g[w - 1] * src[w - 1];
                }
                d_weight[wbase + ky * 3] = d_weight[wbase + ky * 3] + acc0;
                d_weight[wbase + ky * 3 + 1] = d_weight[wbase + ky * 3 + 1] + acc1;
                d_weight[wbase + ky * 3 + 2] = d_weight[wbase + ky * 3 + 2] + acc2;
            }
        }
    }
}

#[inline]
fn shift_bounds(len: usize, delta: isize) -> (usize, usize) {
    let lo = if delta < 0 { (-delta) as usize } else { 0 };
    let hi = if delta > 0 { len - delta as usize } else { len };
    (lo, hi)
}

/// 1x1 convolution (per-pixel linear map). Weight layout `[out_ch, in_ch]`.
pub fn conv1x1<T: Scalar>(input: &Tensor3<T>, weight: &[T], bias: &[T], out_ch: usize) -> Tensor3<T> {
    let (ic_n, h, w) = (input.ch, input.h, input.w);
    let mut out = Tensor3::zeros(out_ch, h, w);
    for oc in 0..out_ch {
        out.plane_mut(oc).fill(bias[oc]);
        for ic in 0..ic_n {
            let wgt = weight[oc * ic_n + ic];
            let n = h * w;
            for i in 0..n {
                out.plane_mut(oc)[i] = out.plane(oc)[i] + wgt * input.plane(ic)[i];
            }
        }
    }
    out
}

pub fn conv1x1_back_input<T: Scalar>(d_out: &Tensor3<T>, weight: &[T], in_ch: usize) -> Tensor3<T> {
    let (out_ch, h, w) = (d_out.ch, d_out.h, d_out.w);
    let mut d_in = Tensor3::zeros(in_ch, h, w);
    for oc in 0..out_ch {
        for ic in 0..in_ch {
            let wgt = weight[oc * in_ch + ic];
            let n = h * w;
            for i in 0..n {
                d_in.plane_mut(ic)[i] = d_in.plane(ic)[i] + wgt * d_out.plane(oc)[i];
            }
        }
    }
    d_in
}

pub fn conv1x1_back_params<T: Scalar>(
    input: &Tensor3<T>,
    d_out: &Tensor3<T>,
    d_weight: &mut [T],
    d_bias: &mut [T],
) {
    let (ic_n, out_ch) = (input.ch, d_out.ch);
    let n = input.plane_len();
    for oc in 0..out_ch {
        let g = d_out.plane(oc);
        let mut b = T::zero();
        for &v in g {
            b = b + v;
        }
        d_bias[oc] = d_bias[oc] + b;
        for ic in 0..ic_n {
            let v = input.plane(ic);
            let mut acc = T::zero();
            for i in 0..n {
                acc = acc + g[i] * v[i];
            }
            d_weight[oc * ic_n + ic] = d_weight[oc * ic_n + ic] + acc;
        }
    }
}

/// 2x2 average pooling; spatial dims must be even.
pub fn avg_pool2<T: Scalar>(input: &Tensor3<T>) -> Tensor3<T> {
    let (ch, h, w) = (input.ch, input.h, input.w);
    debug_assert!(h % 2 == 0 && w % 2 == 0);
    let quarter: T = s(0.25);
    let mut out = Tensor3::zeros(ch, h / 2, w / 2);
    for c in 0..ch {
        for y in 0..h / 2 {
            let r0 = input.row(c, 2 * y);
            let r1 = input.row(c, 2 * y + 1);
            let dst = out.row_mut(c, y);
            for (x, d) in dst.iter_mut().enumerate() {
                *d = (r0[2 * x] + r0[2 * x + 1] + r1[2 * x] + r1[2 * x + 1]) * quarter;
            }
        }
    }
    out
}

pub fn avg_pool2_back<T: Scalar>(d_out: &Tensor3<T>) -> Tensor3<T> {
    let (ch, h, w) = (d_out.ch, d_out.h * 2, d_out.w * 2);
    let quarter: T = s(0.25);
    let mut d_in = Tensor3::zeros(ch, h, w);
    for c in 0..ch {
        for y in 0..d_out.h {
            for x in 0..d_out.w {
                let g = d_out.at(c, y, x) * quarter;
                *d_in.at_mut(c, 2 * y, 2 * x) = g;
                *d_in.at_mut(c, 2 * y, 2 * x + 1) = g;
                *d_in.at_mut(c, 2 * y + 1, 2 * x) = g;
                *d_in.at_mut(c, 2 * y + 1, 2 * x + 1) = g;
            }
        }
    }
    d_in
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample2<T: Scalar>(input: &Tensor3<T>) -> Tensor3<T> {
    let (ch, h, w) = (input.ch, input.h, input.w);
    let mut out = Tensor3::zeros(ch, h * 2, w * 2);
    for c in 0..ch {
        for y in 0..h * 2 {
            let src = input.row(c, y / 2);
            let dst = out.row_mut(c, y);
            for (x, d) in dst.iter_mut().enumerate() {
                *d = src[x / 2];
            }
        }
    }
    out
}

pub fn upsample2_back<T: Scalar>(d_out: &Tensor3<T>) -> Tensor3<T> {
    let (ch, h, w) = (d_out.ch, d_out.h / 2, d_out.w / 2);
    let mut d_in = Tensor3::zeros(ch, h, w);
    for c in 0..ch {
        for y in 0..d_out.h {
            let g = d_out.row(c, y);
            let dst = d_in.row_mut(c, y / 2);
            for (x, &v) in g.iter().enumerate() {
                dst[x / 2] = dst[x / 2] + v;
            }
        }
    }
    d_in
}

#[inline]
fn sigmoid<T: Scalar>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

/// SiLU activation `z * sigmoid(z)`; smooth, so finite-difference gradient
/// checks hold to tight tolerances.
pub fn silu<T: Scalar>(z: &Tensor3<T>) -> Tensor3<T> {
    z.map(|v| v * sigmoid(v))
}

/// Upstream gradient through SiLU given the pre-activation `z`.
pub fn silu_back<T: Scalar>(z: &Tensor3<T>, d_a: &Tensor3<T>) -> Tensor3<T> {
    let mut d_z = d_a.clone();
    for (g, &zv) in d_z.as_mut_slice().iter_mut().zip(z.as_slice()) {
        let sg = sigmoid(zv);
        *g = *g * (sg * (T::one() + zv * (T::one() - sg)));
    }
    d_z
}

/// Per-pixel softmax over the channel axis, max-subtracted for stability.
pub fn softmax_channels<T: Scalar>(logits: &Tensor3<T>) -> Tensor3<T> {
    let (ch, h, w) = (logits.ch, logits.h, logits.w);
    let mut out = Tensor3::zeros(ch, h, w);
    let n = h * w;
    for i in 0..n {
        let mut max = logits.plane(0)[i];
        for c in 1..ch {
            let v = logits.plane(c)[i];
            if v > max {
                max = v;
            }
        }
        let mut sum = T::zero();
        for c in 0..ch {
            let e = (logits.plane(c)[i] - max).exp();
            out.plane_mut(c)[i] = e;
            sum = sum + e;
        }
        for c in 0..ch {
            out.plane_mut(c)[i] = out.plane(c)[i] / sum;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, ch: usize, h: usize, w: usize) -> Tensor3<f64> {
        let data = (0..ch * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor3::from_vec(ch, h, w, data).unwrap()
    }

    fn dot(a: &Tensor3<f64>, b: &Tensor3<f64>) -> f64 {
        a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn conv3x3_known_value() {
        // single channel, identity-center kernel plus bias
        let input = Tensor3::from_vec(1, 2, 2, vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let mut weight = vec![0.0; 9];
        weight[4] = 2.0; // center tap
        let out = conv3x3(&input, &weight, &[0.5], 1);
        assert_eq!(out.as_slice(), &[2.5, 4.5, 6.5, 8.5]);
    }

    #[test]
    fn conv3x3_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, 3, 6, 5);
        let y = rand_tensor(&mut rng, 4, 6, 5);
        let weight: Vec<f64> = (0..4 * 3 * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let fx = conv3x3(&x, &weight, &vec![0.0; 4], 4);
        let bty = conv3x3_back_input(&y, &weight, 3);
        assert!((dot(&fx, &y) - dot(&x, &bty)).abs() < 1e-10);
    }

    #[test]
    fn conv3x3_weight_grad_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, 2, 5, 4);
        let y = rand_tensor(&mut rng, 3, 5, 4);
        let mut weight: Vec<f64> = (0..3 * 2 * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bias = vec![0.1, -0.2, 0.3];
        let mut dw = vec![0.0; weight.len()];
        let mut db = vec![0.0; 3];
        conv3x3_back_params(&x, &y, &mut dw, &mut db);
        let h = 1e-6;
        for idx in [0, 7, 19, 40, 53] {
            let orig = weight[idx];
            weight[idx] = orig + h;
            let hi = dot(&conv3x3(&x, &weight, &bias, 3), &y);
            weight[idx] = orig - h;
            let lo = dot(&conv3x3(&x, &weight, &bias, 3), &y);
            weight[idx] = orig;
            let fd = (hi - lo) / (2.0 * h);
            assert!((fd - dw[idx]).abs() < 1e-6, "idx {idx}: {fd} vs {}", dw[idx]);
        }
    }

    #[test]
    fn conv1x1_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, 5, 4, 4);
        let y = rand_tensor(&mut rng, 2, 4, 4);
        let weight: Vec<f64> = (0..2 * 5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let fx = conv1x1(&x, &weight, &[0.0, 0.0], 2);
        let bty = conv1x1_back_input(&y, &weight, 5);
        assert!((dot(&fx, &y) - dot(&x, &bty)).abs() < 1e-10);
    }

    #[test]
    fn pool_and_upsample_adjoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, 2, 6, 8);
        let y = rand_tensor(&mut rng, 2, 3, 4);
        assert!((dot(&avg_pool2(&x), &y) - dot(&x, &avg_pool2_back(&y))).abs() < 1e-12);
        let u = rand_tensor(&mut rng, 2, 3, 4);
        let v = rand_tensor(&mut rng, 2, 6, 8);
        assert!((dot(&upsample2(&u), &v) - dot(&u, &upsample2_back(&v))).abs() < 1e-12);
    }

    #[test]
    fn silu_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = rand_tensor(&mut rng, 1, 3, 3);
        let d_a = rand_tensor(&mut rng, 1, 3, 3);
        let d_z = silu_back(&z, &d_a);
        let h = 1e-6;
        for i in 0..9 {
            let mut zp = z.clone();
            zp.as_mut_slice()[i] += h;
            let mut zm = z.clone();
            zm.as_mut_slice()[i] -= h;
            let fd: f64 = (dot(&silu(&zp), &d_a) - dot(&silu(&zm), &d_a)) / (2.0 * h);
            assert!((fd - d_z.as_slice()[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn softmax_normalizes_per_pixel() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let logits = rand_tensor(&mut rng, 7, 4, 4);
        let p = softmax_channels(&logits);
        for i in 0..16 {
            let sum: f64 = (0..7).map(|c| p.plane(c)[i]).sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!((0..7).all(|c| p.plane(c)[i] > 0.0));
        }
    }
}
