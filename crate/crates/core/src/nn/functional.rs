//! Eager versions of the spatial layers. They accept a single `(h, w, c)`
//! map or an NHWC batch and return the same rank.

use crate::autodiff::kernels;
use crate::autodiff::Padding;
use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor};

fn batched<T: Scalar>(x: &Tensor<T>, op: &str) -> Result<(Tensor<T>, bool)> {
    match x.rank() {
        3 => {
            let mut s = vec![1];
            s.extend_from_slice(x.shape());
            Ok((x.reshape(s)?, true))
        }
        4 => Ok((x.clone(), false)),
        _ => Err(shape_err(op, format!("expected (h,w,c) or NHWC, got {:?}", x.shape()))),
    }
}

fn unbatched<T: Scalar>(y: Tensor<T>, squeeze: bool) -> Result<Tensor<T>> {
    if squeeze {
        y.reshape(y.shape()[1..].to_vec())
    } else {
        Ok(y)
    }
}

pub fn conv2d<T: Scalar>(input: &Tensor<T>, kernels: &Tensor<T>, bias: &Tensor<T>, padding: Padding) -> Result<Tensor<T>> {
    let k = kernels.shape().first().copied().unwrap_or(0);
    if k != 1 && k != 3 {
        return Err(shape_err("conv2d", format!("kernel size {k} not in {{1, 3}}")));
    }
    let (x, squeeze) = batched(input, "conv2d")?;
    unbatched(kernels::conv2d(&x, kernels, bias, padding)?, squeeze)
}

pub fn max_pool2x2<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (x, squeeze) = batched(input, "max_pool2x2")?;
    unbatched(kernels::max_pool2x2(&x)?, squeeze)
}

pub fn upsample_nearest2x<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (x, squeeze) = batched(input, "upsample_nearest2x")?;
    unbatched(kernels::upsample_nearest2x(&x)?, squeeze)
}

/// `(h,w,c)` → `(c)`, or `(b,h,w,c)` → `(b,c)`.
pub fn global_avg_pool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (x, squeeze) = batched(input, "global_avg_pool")?;
    let y = kernels::global_avg_pool(&x)?;
    if squeeze {
        y.reshape(vec![y.shape()[1]])
    } else {
        Ok(y)
    }
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn softmax<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    kernels::softmax(input)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    /// Direct sliding-window cross-correlation with zero padding.
    fn conv_oracle(x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>, pad: usize) -> Tensor<f64> {
        let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (ks, cout) = (k.shape()[0], k.shape()[3]);
        let mut out = Vec::new();
        for oy in 0..h {
            for ox in 0..w {
                for co in 0..cout {
                    let mut acc = b.data()[co];
                    for ky in 0..ks {
                        for kx in 0..ks {
                            let iy = oy as isize + ky as isize - pad as isize;
                            let ix = ox as isize + kx as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                acc += x.at(&[iy as usize, ix as usize, ci]) * k.at(&[ky, kx, ci, co]);
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
        Tensor::new(vec![h, w, cout], out).unwrap()
    }

    #[test]
    fn pointwise_identity() {
        let y = conv2d(&t(&[1, 1, 1], &[5.]), &t(&[1, 1, 1, 1], &[1.]), &t(&[1], &[0.]), Padding::Same).unwrap();
        assert_eq!(y.data(), &[5.0]);
    }

    #[test]
    fn ones_kernel_counts_neighbours() {
        let y = conv2d(&Tensor::full([3, 3, 1], 1.0), &Tensor::full([3, 3, 1, 1], 1.0), &t(&[1], &[0.]), Padding::Same)
            .unwrap();
        assert_eq!(y.data(), &[4., 6., 4., 6., 9., 6., 4., 6., 4.]);
    }

    #[test]
    fn vgg_first_layer_shape() {
        let x = Tensor::<f32>::zeros([224, 224, 3]);
        let y = conv2d(&x, &Tensor::zeros([3, 3, 3, 64]), &Tensor::zeros([64]), Padding::Same).unwrap();
        assert_eq!(y.shape(), &[224, 224, 64]);
    }

    #[test]
    fn channel_mismatch() {
        let err = conv2d(&Tensor::<f64>::zeros([4, 4, 2]), &Tensor::zeros([3, 3, 3, 1]), &Tensor::zeros([1]), Padding::Same);
        assert!(err.is_err());
    }

    #[test]
    fn gap_examples() {
        let y = global_avg_pool(&Tensor::<f64>::full([5, 5, 1], 7.0)).unwrap();
        assert_eq!(y.data(), &[7.0]);
        assert_eq!(global_avg_pool(&Tensor::<f32>::zeros([7, 7, 256])).unwrap().shape(), &[256]);
        assert_eq!(global_avg_pool(&t(&[2, 2, 1], &[1., 2., 3., 4.])).unwrap().data(), &[2.5]);
    }

    #[test]
    fn upsample_examples() {
        assert_eq!(upsample_nearest2x(&t(&[1, 1, 1], &[3.])).unwrap().data(), &[3.; 4]);
        let y = upsample_nearest2x(&t(&[2, 2, 1], &[1., 2., 3., 4.])).unwrap();
        assert_eq!(y.shape(), &[4, 4, 1]);
        assert_eq!(
            y.data(),
            &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
    }

    fn tensor_strategy(shape: Vec<usize>) -> impl Strategy<Value = Tensor<f64>> {
        let n: usize = shape.iter().product();
        proptest::collection::vec(-2.0f64..2.0, n).prop_map(move |v| Tensor::new(shape.clone(), v).unwrap())
    }

    fn conv_case() -> impl Strategy<Value = (Tensor<f64>, Tensor<f64>, Tensor<f64>, usize)> {
        (1usize..=8, 1usize..=8, 1usize..=4, 1usize..=4, prop_oneof![Just(1usize), Just(3usize)]).prop_flat_map(
            |(h, w, cin, cout, k)| {
                (
                    tensor_strategy(vec![h, w, cin]),
                    tensor_strategy(vec![k, k, cin, cout]),
                    tensor_strategy(vec![cout]),
                    Just(k),
                )
            },
        )
    }

    proptest! {
        #[test]
        fn conv_matches_brute_force((x, k, b, ks) in conv_case()) {
            let fast = conv2d(&x, &k, &b, Padding::Same).unwrap();
            let slow = conv_oracle(&x, &k, &b, (ks - 1) / 2);
            // GEMM may associate the sum differently from the loop
            prop_assert!(fast.max_abs_diff(&slow).unwrap() < 1e-12);
        }

        #[test]
        fn conv_equals_brute_force_exactly_on_integer_grids(
            (x, k, b, ks) in conv_case().prop_map(|(x, k, b, ks)| {
                let round = |t: &Tensor<f64>| t.map(|v| (v * 4.0).round());
                (round(&x), round(&k), round(&b), ks)
            })
        ) {
            // small integers: every partial sum is exact, so order cannot matter
            let fast = conv2d(&x, &k, &b, Padding::Same).unwrap();
            prop_assert_eq!(fast, conv_oracle(&x, &k, &b, (ks - 1) / 2));
        }

        #[test]
        fn softmax_rows_are_distributions(v in proptest::collection::vec(-30.0f64..30.0, 12)) {
            let p = softmax(&Tensor::new(vec![3, 4], v).unwrap()).unwrap();
            for row in p.data().chunks(4) {
                prop_assert!(row.iter().all(|&x| x > 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }
}
