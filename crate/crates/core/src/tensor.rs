//! Dense NCHW tensors and the elementwise / channel-routing primitives.

use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Extents of a 4-D NCHW tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Elements in one spatial plane.
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn with_c(self, c: usize) -> Self {
        Shape { c, ..self }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Row-major NCHW tensor. Operations never mutate their inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![T::zero(); shape.numel()],
        }
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::dim(
                "tensor",
                format!("{} elements for shape {shape}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        let s = self.shape;
        ((n * s.c + c) * s.h + h) * s.w + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.offset(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: T) {
        let i = self.offset(n, c, h, w);
        self.data[i] = v;
    }

    /// The contiguous `C×H×W` block of batch item `n`.
    pub fn item(&self, n: usize) -> &[T] {
        let len = self.shape.c * self.shape.plane();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [T] {
        let len = self.shape.c * self.shape.plane();
        &mut self.data[n * len..(n + 1) * len]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&x| U::lit(x.as_f64())).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// In-place `self += other`; used for gradient accumulation.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        same_shape("add_assign", self, other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Stacks single-item tensors along the batch axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::dim("stack", "no tensors"))?
            .shape;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        let mut n = 0;
        for t in items {
            if t.shape.c != first.c || t.shape.h != first.h || t.shape.w != first.w {
                return Err(Error::dim("stack", format!("{} vs {}", t.shape, first)));
            }
            n += t.shape.n;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            shape: Shape { n, ..first },
            data,
        })
    }
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::dim(op, format!("{} vs {}", a.shape, b.shape)));
    }
    Ok(())
}

/// Elementwise sum. Its backward is identity fan-out to both operands.
pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("add", a, b)?;
    Ok(Tensor {
        shape: a.shape,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| x + y).collect(),
    })
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Masks `grad_out` by `activation > 0`. `activation` may be either the
/// pre- or post-ReLU tensor; both give the same mask.
pub fn relu_backward<T: Scalar>(grad_out: &Tensor<T>, activation: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("relu_backward", grad_out, activation)?;
    Ok(Tensor {
        shape: grad_out.shape,
        data: grad_out
            .data
            .iter()
            .zip(&activation.data)
            .map(|(&g, &a)| if a > T::zero() { g } else { T::zero() })
            .collect(),
    })
}

/// Stacks tensors along the channel axis in argument order.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::dim("concat_channels", "no inputs"))?
        .shape;
    let mut c_total = 0;
    for p in parts {
        let s = p.shape;
        if s.n != first.n || s.h != first.h || s.w != first.w {
            return Err(Error::dim("concat_channels", format!("{s} vs {first}")));
        }
        c_total += s.c;
    }
    let out_shape = first.with_c(c_total);
    let mut data = Vec::with_capacity(out_shape.numel());
    for n in 0..first.n {
        for p in parts {
            data.extend_from_slice(p.item(n));
        }
    }
    Ok(Tensor {
        shape: out_shape,
        data,
    })
}

/// Splits a channel-concatenated gradient back into per-input gradients.
pub fn concat_channels_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    channels: &[usize],
) -> Result<Vec<Tensor<T>>> {
    let total: usize = channels.iter().sum();
    if total != grad_out.shape.c {
        return Err(Error::dim(
            "concat_channels_backward",
            format!("parts sum to {total} channels, gradient is {}", grad_out.shape),
        ));
    }
    let mut from = 0;
    let mut out = Vec::with_capacity(channels.len());
    for &c in channels {
        out.push(slice_channels(grad_out, from, from + c)?);
        from += c;
    }
    Ok(out)
}

/// Channels `from..to` of `x`.
pub fn slice_channels<T: Scalar>(x: &Tensor<T>, from: usize, to: usize) -> Result<Tensor<T>> {
    let s = x.shape;
    if from >= to || to > s.c {
        return Err(Error::dim(
            "slice_channels",
            format!("range {from}..{to} of {s}"),
        ));
    }
    let plane = s.plane();
    let out_shape = s.with_c(to - from);
    let mut data = Vec::with_capacity(out_shape.numel());
    for n in 0..s.n {
        let item = x.item(n);
        data.extend_from_slice(&item[from * plane..to * plane]);
    }
    Ok(Tensor {
        shape: out_shape,
        data,
    })
}

/// Scatters a slice gradient into a zero tensor with `total_c` channels.
pub fn slice_channels_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    from: usize,
    total_c: usize,
) -> Result<Tensor<T>> {
    let s = grad_out.shape;
    if from + s.c > total_c {
        return Err(Error::dim(
            "slice_channels_backward",
            format!("{s} at channel {from} exceeds {total_c} channels"),
        ));
    }
    let plane = s.plane();
    let mut out = Tensor::zeros(s.with_c(total_c));
    for n in 0..s.n {
        out.item_mut(n)[from * plane..(from + s.c) * plane].copy_from_slice(grad_out.item(n));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradient, random_tensor};

    #[test]
    fn flat_offset_is_row_major_nchw() {
        let t = Tensor::<f32>::from_fn(Shape::new(2, 3, 4, 5), |n, c, h, w| {
            (n * 1000 + c * 100 + h * 10 + w) as f32
        });
        assert_eq!(t.len(), 120);
        let idx = ((1 * 3 + 2) * 4 + 3) * 5 + 4;
        assert_eq!(t.data()[idx], 1234.0);
        assert_eq!(t.offset(1, 2, 3, 4), idx);
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Tensor::<f32>::from_vec(Shape::new(1, 1, 2, 2), vec![0.0; 3]).is_err());
    }

    #[test]
    fn relu_examples() {
        let x = Tensor::from_vec(Shape::new(1, 3, 1, 1), vec![-1.0f32, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let pos = Tensor::from_vec(Shape::new(1, 2, 1, 2), vec![0.5f32, 1.0, 3.0, 9.0]).unwrap();
        assert_eq!(relu(&pos), pos);
    }

    #[test]
    fn relu_gradient_matches_finite_differences() {
        // keep inputs away from the kink at 0
        let x = random_tensor::<f64>(Shape::new(2, 3, 4, 4), 11).map(|v| {
            if v.abs() < 0.05 {
                v + 0.2f64.copysign(v)
            } else {
                v
            }
        });
        let w = random_tensor::<f64>(x.shape(), 12);
        let err = check_gradient(
            &x,
            |t| relu(t).data().iter().zip(w.data()).map(|(a, b)| a * b).sum(),
            |_| relu_backward(&w, &x).unwrap(),
        );
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn add_identity_and_mismatch() {
        let x = random_tensor::<f32>(Shape::new(1, 2, 3, 3), 1);
        let z = Tensor::zeros(x.shape());
        assert_eq!(add(&x, &z).unwrap(), x);
        let bad = Tensor::<f32>::zeros(Shape::new(1, 3, 3, 3));
        let e = add(&x, &bad).unwrap_err().to_string();
        assert!(e.contains("1x2x3x3") && e.contains("1x3x3x3"), "{e}");
    }

    #[test]
    fn concat_then_slice_round_trip() {
        let a = random_tensor::<f32>(Shape::new(2, 2, 3, 4), 2);
        let b = random_tensor::<f32>(Shape::new(2, 3, 3, 4), 3);
        let cat = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), Shape::new(2, 5, 3, 4));
        assert_eq!(slice_channels(&cat, 2, 5).unwrap(), b);
        assert_eq!(slice_channels(&cat, 0, 2).unwrap(), a);
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let a = Tensor::<f32>::zeros(Shape::new(1, 2, 3, 3));
        let b = Tensor::<f32>::zeros(Shape::new(1, 2, 3, 4));
        assert!(concat_channels(&[&a, &b]).is_err());
    }

    #[test]
    fn slice_rejects_bad_ranges() {
        let a = Tensor::<f32>::zeros(Shape::new(1, 4, 2, 2));
        assert!(slice_channels(&a, 2, 2).is_err());
        assert!(slice_channels(&a, 3, 5).is_err());
    }

    #[test]
    fn concat_gradient_routes_by_channel() {
        let a = random_tensor::<f64>(Shape::new(2, 2, 3, 3), 4);
        let b = random_tensor::<f64>(Shape::new(2, 3, 3, 3), 5);
        let w = random_tensor::<f64>(Shape::new(2, 5, 3, 3), 6);
        let loss_wrt = |which: usize| {
            let (a, b, w) = (a.clone(), b.clone(), w.clone());
            move |t: &Tensor<f64>| {
                let cat = if which == 0 {
                    concat_channels(&[t, &b]).unwrap()
                } else {
                    concat_channels(&[&a, t]).unwrap()
                };
                cat.data().iter().zip(w.data()).map(|(x, y)| x * y).sum::<f64>()
            }
        };
        let grads = concat_channels_backward(&w, &[2, 3]).unwrap();
        let ea = check_gradient(&a, loss_wrt(0), |_| grads[0].clone());
        let eb = check_gradient(&b, loss_wrt(1), |_| grads[1].clone());
        assert!(ea < 1e-4 && eb < 1e-4, "{ea} {eb}");
    }

    #[test]
    fn slice_gradient_scatters_with_zero_padding() {
        let x = random_tensor::<f64>(Shape::new(1, 5, 2, 3), 7);
        let w = random_tensor::<f64>(Shape::new(1, 2, 2, 3), 8);
        let g = slice_channels_backward(&w, 1, 5).unwrap();
        let err = check_gradient(
            &x,
            |t| {
                let s = slice_channels(t, 1, 3).unwrap();
                s.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
            },
            |_| g.clone(),
        );
        assert!(err < 1e-4);
        assert!(g.item(0)[..6].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ops_do_not_mutate_inputs() {
        let a = random_tensor::<f32>(Shape::new(1, 2, 2, 2), 9);
        let keep = a.clone();
        let _ = relu(&a);
        let _ = add(&a, &a).unwrap();
        let _ = concat_channels(&[&a, &a]).unwrap();
        assert_eq!(a, keep);
    }
}
