//! Sub-pixel rearrangement between channel depth and spatial resolution.
//!
//! Index map (checkpoints depend on it):
//! `out(n, c, h, w) = in(n, c·r² + r·(h mod r) + (w mod r), h / r, w / r)`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// `N×(r²C)×H×W -> N×C×(rH)×(rW)`.
pub fn pixel_shuffle<T: Scalar>(input: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let s = input.shape();
    if r == 0 || !s.c.is_multiple_of(r * r) {
        return Err(Error::dim(
            "pixel_shuffle",
            format!("{} channels not divisible by r^2 = {}", s.c, r * r),
        ));
    }
    let c_out = s.c / (r * r);
    let out_shape = Shape::new(s.n, c_out, s.h * r, s.w * r);
    let mut out = Tensor::zeros(out_shape);
    let src = input.data();
    let dst = out.data_mut();
    let mut i = 0;
    for n in 0..s.n {
        for c in 0..c_out {
            for h in 0..s.h * r {
                for w in 0..s.w * r {
                    let ci = c * r * r + r * (h % r) + (w % r);
                    dst[i] = src[((n * s.c + ci) * s.h + h / r) * s.w + w / r];
                    i += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Exact inverse of [`pixel_shuffle`]; also its backward pass.
pub fn pixel_unshuffle<T: Scalar>(input: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let s = input.shape();
    if r == 0 || !s.h.is_multiple_of(r) || !s.w.is_multiple_of(r) {
        return Err(Error::dim(
            "pixel_unshuffle",
            format!("spatial size {}x{} not divisible by r = {r}", s.h, s.w),
        ));
    }
    let (h_lr, w_lr) = (s.h / r, s.w / r);
    let c_out = s.c * r * r;
    let mut out = Tensor::zeros(Shape::new(s.n, c_out, h_lr, w_lr));
    let src = input.data();
    let dst = out.data_mut();
    let mut i = 0;
    for n in 0..s.n {
        for c in 0..s.c {
            for h in 0..s.h {
                for w in 0..s.w {
                    let co = c * r * r + r * (h % r) + (w % r);
                    dst[((n * c_out + co) * h_lr + h / r) * w_lr + w / r] = src[i];
                    i += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Gradient of [`pixel_shuffle`] with respect to its input.
pub fn pixel_shuffle_backward<T: Scalar>(grad_out: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    pixel_unshuffle(grad_out, r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::random_tensor;
    use proptest::prelude::*;

    #[test]
    fn four_channels_to_two_by_two() {
        let x = Tensor::from_vec(Shape::new(1, 4, 1, 1), vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 2, 2));
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn factor_one_is_identity() {
        let x = random_tensor::<f32>(Shape::new(2, 3, 4, 5), 1);
        assert_eq!(pixel_shuffle(&x, 1).unwrap(), x);
    }

    #[test]
    fn rejects_indivisible_channels() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 6, 2, 2));
        assert!(pixel_shuffle(&x, 2).is_err());
        assert!(pixel_unshuffle(&Tensor::<f32>::zeros(Shape::new(1, 1, 3, 4)), 2).is_err());
    }

    #[test]
    fn factor_three_index_map() {
        let x = Tensor::<f64>::from_fn(Shape::new(1, 18, 2, 3), |_, c, h, w| {
            (c * 100 + h * 10 + w) as f64
        });
        let y = pixel_shuffle(&x, 3).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 2, 6, 9));
        // out(0, 1, 4, 7): c·9 + 3·(4%3) + 7%3 = 9 + 3 + 1 = 13, at (1, 2)
        assert_eq!(y.at(0, 1, 4, 7), 1312.0);
    }

    proptest! {
        #[test]
        fn shuffle_round_trips_and_preserves_values(
            seed in 0u64..1000, r in 1usize..4, c in 1usize..3, h in 1usize..5, w in 1usize..5,
        ) {
            let x = random_tensor::<f32>(Shape::new(2, c * r * r, h, w), seed);
            let y = pixel_shuffle(&x, r).unwrap();
            prop_assert_eq!(pixel_unshuffle(&y, r).unwrap(), x.clone());
            let mut a = x.into_vec();
            let mut b = y.into_vec();
            a.sort_by(f32::total_cmp);
            b.sort_by(f32::total_cmp);
            prop_assert_eq!(a, b);
        }
    }
}
