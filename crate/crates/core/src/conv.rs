//! 2-D convolution, stride 1, zero padding.
//!
//! `conv2d` lowers each batch item to an im2col matrix and runs one GEMM.
//! `conv2d_direct` is the plain seven-loop definition and serves as the
//! reference the fast path is tested against.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Weight `Cout×Cin×k×k` and bias stored as `Cout×1×1×1`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> ConvParams<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let w = weight.shape();
        if w.h != w.w || !(w.h == 1 || w.h == 3) {
            return Err(Error::dim(
                "conv_params",
                format!("kernel must be 1x1 or 3x3, weight is {w}"),
            ));
        }
        if bias.shape() != Shape::new(w.n, 1, 1, 1) {
            return Err(Error::dim(
                "conv_params",
                format!("bias {} for weight {w}", bias.shape()),
            ));
        }
        Ok(ConvParams { weight, bias })
    }

    pub fn zeros(c_in: usize, c_out: usize, kernel: usize) -> Self {
        ConvParams {
            weight: Tensor::zeros(Shape::new(c_out, c_in, kernel, kernel)),
            bias: Tensor::zeros(Shape::new(c_out, 1, 1, 1)),
        }
    }

    /// Fan-in scaled uniform weights, bound `sqrt(1 / (Cin·k·k))`; zero bias.
    pub fn init_uniform<R: Rng>(c_in: usize, c_out: usize, kernel: usize, rng: &mut R) -> Self {
        let bound = (1.0 / (c_in * kernel * kernel) as f64).sqrt();
        let shape = Shape::new(c_out, c_in, kernel, kernel);
        let weight = Tensor::from_fn(shape, |_, _, _, _| T::lit(rng.gen_range(-bound..bound)));
        ConvParams {
            weight,
            bias: Tensor::zeros(Shape::new(c_out, 1, 1, 1)),
        }
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape().c
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape().n
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape().h
    }

    /// Padding that keeps H and W unchanged.
    pub fn same_padding(&self) -> usize {
        self.kernel() / 2
    }

    pub fn numel(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Gradients of a convolution with respect to its input and parameters.
#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

fn output_shape<T: Scalar>(
    op: &'static str,
    input: Shape,
    params: &ConvParams<T>,
    padding: usize,
) -> Result<Shape> {
    let w = params.weight.shape();
    if input.c != w.c {
        return Err(Error::dim(
            op,
            format!("input {input} has {} channels, weight {w} expects {}", input.c, w.c),
        ));
    }
    let k = w.h;
    if input.h + 2 * padding < k || input.w + 2 * padding < k {
        return Err(Error::dim(
            op,
            format!("input {input} smaller than kernel {k}x{k} with padding {padding}"),
        ));
    }
    Ok(Shape::new(
        input.n,
        w.n,
        input.h + 2 * padding - k + 1,
        input.w + 2 * padding - k + 1,
    ))
}

/// Reference convolution by direct summation.
pub fn conv2d_direct<T: Scalar>(
    input: &Tensor<T>,
    params: &ConvParams<T>,
    padding: usize,
) -> Result<Tensor<T>> {
    let out_shape = output_shape("conv2d", input.shape(), params, padding)?;
    let s = input.shape();
    let k = params.kernel();
    let p = padding as isize;
    let mut out = Tensor::zeros(out_shape);
    for n in 0..s.n {
        for co in 0..out_shape.c {
            for oh in 0..out_shape.h {
                for ow in 0..out_shape.w {
                    let mut acc = params.bias.data()[co];
                    for ci in 0..s.c {
                        for i in 0..k {
                            for j in 0..k {
                                let ih = oh as isize + i as isize - p;
                                let iw = ow as isize + j as isize - p;
                                if ih < 0 || iw < 0 || ih >= s.h as isize || iw >= s.w as isize {
                                    continue;
                                }
                                acc += params.weight.at(co, ci, i, j)
                                    * input.at(n, ci, ih as usize, iw as usize);
                            }
                        }
                    }
                    out.set(n, co, oh, ow, acc);
                }
            }
        }
    }
    Ok(out)
}

/// Lowers one `C×H×W` item to a `(C·k·k) × (OH·OW)` column matrix.
fn im2col<T: Scalar>(
    item: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let mut cols = vec![T::zero(); c * k * k * oh * ow];
    for ci in 0..c {
        let plane = &item[ci * h * w..(ci + 1) * h * w];
        for i in 0..k {
            for j in 0..k {
                let row = &mut cols[((ci * k + i) * k + j) * oh * ow..][..oh * ow];
                for y in 0..oh {
                    let iy = y + i;
                    if iy < pad || iy - pad >= h {
                        continue;
                    }
                    let src = &plane[(iy - pad) * w..(iy - pad + 1) * w];
                    let dst = &mut row[y * ow..(y + 1) * ow];
                    for (x, d) in dst.iter_mut().enumerate() {
                        let ix = x + j;
                        if ix >= pad && ix - pad < w {
                            *d = src[ix - pad];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: accumulates columns back onto a `C×H×W` item.
fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let mut item = vec![T::zero(); c * h * w];
    for ci in 0..c {
        let plane = &mut item[ci * h * w..(ci + 1) * h * w];
        for i in 0..k {
            for j in 0..k {
                let row = &cols[((ci * k + i) * k + j) * oh * ow..][..oh * ow];
                for y in 0..oh {
                    let iy = y + i;
                    if iy < pad || iy - pad >= h {
                        continue;
                    }
                    let dst = &mut plane[(iy - pad) * w..(iy - pad + 1) * w];
                    for (x, &v) in row[y * ow..(y + 1) * ow].iter().enumerate() {
                        let ix = x + j;
                        if ix >= pad && ix - pad < w {
                            dst[ix - pad] += v;
                        }
                    }
                }
            }
        }
    }
    item
}

fn is_pointwise<T: Scalar>(params: &ConvParams<T>, padding: usize) -> bool {
    params.kernel() == 1 && padding == 0
}

/// Convolution via im2col + GEMM, parallel over batch items.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    params: &ConvParams<T>,
    padding: usize,
) -> Result<Tensor<T>> {
    let out_shape = output_shape("conv2d", input.shape(), params, padding)?;
    let s = input.shape();
    let k = params.kernel();
    let (c_out, c_in) = (params.c_out(), params.c_in());
    let (oh, ow) = (out_shape.h, out_shape.w);
    let mut out = Tensor::zeros(out_shape);
    let item_len = c_out * oh * ow;
    if item_len == 0 {
        return Ok(out);
    }
    let pointwise = is_pointwise(params, padding);
    let bias = params.bias.data();
    out.data_mut()
        .par_chunks_mut(item_len)
        .enumerate()
        .for_each(|(n, dst)| {
            for (co, row) in dst.chunks_mut(oh * ow).enumerate() {
                row.fill(bias[co]);
            }
            let item = input.item(n);
            let lowered;
            let cols: &[T] = if pointwise {
                item
            } else {
                lowered = im2col(item, c_in, s.h, s.w, k, padding, oh, ow);
                &lowered
            };
            T::gemm(
                c_out,
                c_in * k * k,
                oh * ow,
                params.weight.data(),
                false,
                cols,
                false,
                T::one(),
                dst,
            );
        });
    Ok(out)
}

/// Exact gradients of `conv2d` given `grad_out = d loss / d output`.
///
/// Per-item weight and bias partials are reduced in batch order, so the
/// result does not depend on the thread count.
pub fn conv2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    params: &ConvParams<T>,
    padding: usize,
) -> Result<ConvGrads<T>> {
    let out_shape = output_shape("conv2d_backward", input.shape(), params, padding)?;
    if grad_out.shape() != out_shape {
        return Err(Error::dim(
            "conv2d_backward",
            format!("grad_out {} vs forward output {out_shape}", grad_out.shape()),
        ));
    }
    let s = input.shape();
    let k = params.kernel();
    let (c_out, c_in) = (params.c_out(), params.c_in());
    let (oh, ow) = (out_shape.h, out_shape.w);
    let ckk = c_in * k * k;
    let pointwise = is_pointwise(params, padding);

    let partials: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..s.n)
        .into_par_iter()
        .map(|n| {
            let g = grad_out.item(n);
            let item = input.item(n);
            let lowered;
            let cols: &[T] = if pointwise {
                item
            } else {
                lowered = im2col(item, c_in, s.h, s.w, k, padding, oh, ow);
                &lowered
            };
            // dW = g · colsᵀ
            let mut gw = vec![T::zero(); c_out * ckk];
            T::gemm(c_out, oh * ow, ckk, g, false, cols, true, T::zero(), &mut gw);
            let gb: Vec<T> = g.chunks(oh * ow).map(|r| r.iter().copied().sum()).collect();
            // dcols = Wᵀ · g
            let mut gcols = vec![T::zero(); ckk * oh * ow];
            T::gemm(
                ckk,
                c_out,
                oh * ow,
                params.weight.data(),
                true,
                g,
                false,
                T::zero(),
                &mut gcols,
            );
            let gi = if pointwise {
                gcols
            } else {
                col2im(&gcols, c_in, s.h, s.w, k, padding, oh, ow)
            };
            (gi, gw, gb)
        })
        .collect();

    let mut grad_input = Vec::with_capacity(s.numel());
    let mut grad_weight = vec![T::zero(); c_out * ckk];
    let mut grad_bias = vec![T::zero(); c_out];
    for (gi, gw, gb) in partials {
        grad_input.extend_from_slice(&gi);
        for (a, b) in grad_weight.iter_mut().zip(gw) {
            *a += b;
        }
        for (a, b) in grad_bias.iter_mut().zip(gb) {
            *a += b;
        }
    }
    Ok(ConvGrads {
        input: Tensor::from_vec(s, grad_input)?,
        weight: Tensor::from_vec(params.weight.shape(), grad_weight)?,
        bias: Tensor::from_vec(params.bias.shape(), grad_bias)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradient, random_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params_from(weight: Tensor<f64>, bias: Vec<f64>) -> ConvParams<f64> {
        let n = bias.len();
        ConvParams::new(weight, Tensor::from_vec(Shape::new(n, 1, 1, 1), bias).unwrap()).unwrap()
    }

    fn random_params(c_in: usize, c_out: usize, k: usize, seed: u64) -> ConvParams<f64> {
        let w = random_tensor(Shape::new(c_out, c_in, k, k), seed);
        let b = random_tensor(Shape::new(c_out, 1, 1, 1), seed + 1);
        ConvParams::new(w, b).unwrap()
    }

    #[test]
    fn zero_input_gives_bias_everywhere() {
        let p = params_from(random_tensor(Shape::new(2, 1, 3, 3), 1), vec![0.25, -1.5]);
        let x = Tensor::zeros(Shape::new(1, 1, 3, 3));
        let y = conv2d(&x, &p, 1).unwrap();
        assert!(y.item(0)[..9].iter().all(|&v| v == 0.25));
        assert!(y.item(0)[9..].iter().all(|&v| v == -1.5));
    }

    #[test]
    fn center_tap_kernel_is_identity() {
        let mut w = Tensor::zeros(Shape::new(1, 1, 3, 3));
        w.set(0, 0, 1, 1, 1.0);
        let p = params_from(w, vec![0.0]);
        let x = random_tensor(Shape::new(1, 1, 4, 4), 3);
        assert_eq!(conv2d(&x, &p, 1).unwrap(), x);
        assert_eq!(conv2d_direct(&x, &p, 1).unwrap(), x);
    }

    #[test]
    fn all_ones_kernel_on_two_by_two() {
        let p = params_from(Tensor::full(Shape::new(1, 1, 3, 3), 1.0), vec![0.0]);
        let x = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        // every 3x3 window around a 2x2 image covers all four pixels
        assert_eq!(conv2d(&x, &p, 1).unwrap().data(), &[10.0; 4]);
        assert_eq!(conv2d_direct(&x, &p, 1).unwrap().data(), &[10.0; 4]);
    }

    #[test]
    fn channel_mismatch_names_both_shapes() {
        let p = random_params(3, 4, 3, 1);
        let x = Tensor::zeros(Shape::new(1, 2, 5, 5));
        let e = conv2d(&x, &p, 1).unwrap_err().to_string();
        assert!(e.contains("1x2x5x5") && e.contains("4x3x3x3"), "{e}");
    }

    #[test]
    fn rejects_unsupported_kernel_sizes() {
        let w = Tensor::<f32>::zeros(Shape::new(1, 1, 5, 5));
        assert!(ConvParams::new(w, Tensor::zeros(Shape::new(1, 1, 1, 1))).is_err());
    }

    #[test]
    fn same_padding_preserves_spatial_size() {
        for k in [1, 3] {
            let p = random_params(2, 3, k, 5);
            let x = random_tensor(Shape::new(2, 2, 7, 5), 6);
            let y = conv2d(&x, &p, p.same_padding()).unwrap();
            assert_eq!(y.shape(), Shape::new(2, 3, 7, 5));
        }
    }

    #[test]
    fn gemm_path_agrees_with_direct_loops_f32() {
        for (k, pad) in [(3, 1), (1, 0), (3, 0)] {
            let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
            let p = ConvParams::<f32>::init_uniform(5, 7, k, &mut rng);
            let x = random_tensor::<f32>(Shape::new(3, 5, 9, 8), 10 + k as u64);
            let fast = conv2d(&x, &p, pad).unwrap();
            let slow = conv2d_direct(&x, &p, pad).unwrap();
            let scale = slow.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
            let rel = fast.max_abs_diff(&slow) / scale;
            assert!(rel < 1e-6, "k={k} rel={rel}");
        }
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let p = random_params(2, 3, 3, 7);
        let x = random_tensor(Shape::new(1, 2, 4, 4), 8);
        let g = conv2d_backward(&Tensor::zeros(Shape::new(1, 3, 4, 4)), &x, &p, 1).unwrap();
        assert!(g.input.data().iter().all(|&v| v == 0.0));
        assert!(g.weight.data().iter().all(|&v| v == 0.0));
        assert!(g.bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_chain_rule() {
        let p = params_from(Tensor::full(Shape::new(1, 1, 1, 1), 1.5), vec![0.0]);
        let x = Tensor::full(Shape::new(1, 1, 1, 1), -2.0);
        let g = Tensor::full(Shape::new(1, 1, 1, 1), 0.75);
        let grads = conv2d_backward(&g, &x, &p, 0).unwrap();
        assert_eq!(grads.input.data(), &[1.5 * 0.75]);
        assert_eq!(grads.weight.data(), &[-2.0 * 0.75]);
        assert_eq!(grads.bias.data(), &[0.75]);
    }

    #[test]
    fn backward_rejects_wrong_grad_shape() {
        let p = random_params(2, 3, 3, 7);
        let x = random_tensor(Shape::new(1, 2, 4, 4), 8);
        assert!(conv2d_backward(&Tensor::zeros(Shape::new(1, 2, 4, 4)), &x, &p, 1).is_err());
    }

    fn weighted_sum(y: &Tensor<f64>, w: &Tensor<f64>) -> f64 {
        y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (k, pad) in [(3, 1), (1, 0)] {
            let p = random_params(3, 4, k, 20);
            let x = random_tensor(Shape::new(2, 3, 5, 5), 21);
            let up = random_tensor(Shape::new(2, 4, 5, 5), 22);
            let grads = conv2d_backward(&up, &x, &p, pad).unwrap();

            let e_in = check_gradient(
                &x,
                |t| weighted_sum(&conv2d(t, &p, pad).unwrap(), &up),
                |_| grads.input.clone(),
            );
            let e_w = check_gradient(
                &p.weight,
                |t| {
                    let q = ConvParams::new(t.clone(), p.bias.clone()).unwrap();
                    weighted_sum(&conv2d(&x, &q, pad).unwrap(), &up)
                },
                |_| grads.weight.clone(),
            );
            let e_b = check_gradient(
                &p.bias,
                |t| {
                    let q = ConvParams::new(p.weight.clone(), t.clone()).unwrap();
                    weighted_sum(&conv2d(&x, &q, pad).unwrap(), &up)
                },
                |_| grads.bias.clone(),
            );
            assert!(e_in < 1e-4 && e_w < 1e-4 && e_b < 1e-4, "{e_in} {e_w} {e_b}");
        }
    }
}
