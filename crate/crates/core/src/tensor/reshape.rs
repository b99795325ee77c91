use super::{Shape, Tensor};
use crate::error::{Error, Result};

/// Moves each `block×block` spatial tile into channels.
///
/// Output channel `(dy·block + dx)·c + ch` at `(i, j)` holds input channel `ch` at
/// `(i·block + dy, j·block + dx)`: tile offsets are scanned row-major and each offset
/// contributes a full copy of the original channels.
pub fn space_to_depth(x: &Tensor, block: usize) -> Result<Tensor> {
    let s = x.shape();
    if block == 0 || s.h % block != 0 || s.w % block != 0 {
        return Err(Error::shape(format!(
            "space_to_depth block {block} does not divide {}x{}",
            s.h, s.w
        )));
    }
    let os = Shape::new(s.n, s.c * block * block, s.h / block, s.w / block);
    let mut out = Tensor::zeros_unchecked(os);
    for n in 0..s.n {
        for dy in 0..block {
            for dx in 0..block {
                for c in 0..s.c {
                    let oc = (dy * block + dx) * s.c + c;
                    for i in 0..os.h {
                        for j in 0..os.w {
                            let v = x.get(n, c, i * block + dy, j * block + dx);
                            out.set(n, oc, i, j, v);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Exact inverse of [`space_to_depth`].
pub fn depth_to_space(x: &Tensor, block: usize) -> Result<Tensor> {
    let s = x.shape();
    if block == 0 || s.c % (block * block) != 0 {
        return Err(Error::shape(format!(
            "depth_to_space block {block} does not divide {} channels",
            s.c
        )));
    }
    let c = s.c / (block * block);
    let os = Shape::new(s.n, c, s.h * block, s.w * block);
    let mut out = Tensor::zeros_unchecked(os);
    for n in 0..s.n {
        for dy in 0..block {
            for dx in 0..block {
                for ch in 0..c {
                    let ic = (dy * block + dx) * c + ch;
                    for i in 0..s.h {
                        for j in 0..s.w {
                            out.set(n, ch, i * block + dy, j * block + dx, x.get(n, ic, i, j));
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Stacks tensors along the channel axis in argument order.
pub fn concat_channels(xs: &[&Tensor]) -> Result<Tensor> {
    let first = xs
        .first()
        .ok_or_else(|| Error::shape("concat needs at least one input"))?
        .shape();
    for t in xs {
        let s = t.shape();
        if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
            return Err(Error::shape(format!("concat of {s} with {first}: batch or spatial mismatch")));
        }
    }
    let c: usize = xs.iter().map(|t| t.shape().c).sum();
    let os = Shape::new(first.n, c, first.h, first.w);
    let mut data = Vec::with_capacity(os.numel());
    for n in 0..first.n {
        for t in xs {
            data.extend_from_slice(t.sample(n));
        }
    }
    Tensor::from_vec(os, data)
}

/// Splits along channels into consecutive ranges of the given widths.
pub fn split_channels(x: &Tensor, widths: &[usize]) -> Result<Vec<Tensor>> {
    let s = x.shape();
    if widths.iter().sum::<usize>() != s.c || widths.contains(&0) {
        return Err(Error::shape(format!("cannot split {} channels into {widths:?}", s.c)));
    }
    let plane = s.plane();
    let mut outs: Vec<Tensor> = widths
        .iter()
        .map(|&w| Tensor::zeros_unchecked(Shape::new(s.n, w, s.h, s.w)))
        .collect();
    for n in 0..s.n {
        let src = x.sample(n);
        let mut start = 0;
        for out in outs.iter_mut() {
            let len = out.shape().c * plane;
            out.sample_mut(n).copy_from_slice(&src[start..start + len]);
            start += len;
        }
    }
    Ok(outs)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::gradcheck::GradCheck;

    #[test]
    fn smallest_tile() {
        let x = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = space_to_depth(&x, 2).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 4, 1, 1));
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn documented_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(Shape::new(1, 2, 4, 6), 1.0, &mut rng).unwrap();
        let y = space_to_depth(&x, 2).unwrap();
        // offset (1, 0) of channel 1 lands in channel (1*2+0)*2+1 = 5
        assert_eq!(y.get(0, 5, 1, 2), x.get(0, 1, 3, 4));
    }

    #[test]
    fn block_one_is_identity_and_inverse_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(Shape::new(2, 3, 4, 4), 1.0, &mut rng).unwrap();
        assert_eq!(space_to_depth(&x, 1).unwrap(), x);
        let back = depth_to_space(&space_to_depth(&x, 2).unwrap(), 2).unwrap();
        assert_eq!(back, x);
        assert!(space_to_depth(&Tensor::zeros(Shape::new(1, 1, 3, 4)).unwrap(), 2).is_err());
    }

    #[test]
    fn concat_and_split() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::randn(Shape::new(1, 2, 2, 2), 1.0, &mut rng).unwrap();
        let b = Tensor::randn(Shape::new(1, 3, 2, 2), 1.0, &mut rng).unwrap();
        assert_eq!(concat_channels(&[&a]).unwrap(), a);
        let ab = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(ab.shape(), Shape::new(1, 5, 2, 2));
        assert_eq!(ab.get(0, 1, 1, 0), a.get(0, 1, 1, 0));
        assert_eq!(ab.get(0, 4, 0, 1), b.get(0, 2, 0, 1));
        let parts = split_channels(&ab, &[2, 3]).unwrap();
        assert_eq!(parts, vec![a.clone(), b]);
        let wrong = Tensor::zeros(Shape::new(1, 1, 3, 2)).unwrap();
        assert!(concat_channels(&[&a, &wrong]).is_err());
    }

    #[test]
    fn linear_ops_are_exact_under_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Tensor::randn(Shape::new(2, 2, 2, 2), 1.0, &mut rng).unwrap();
        let b = Tensor::randn(Shape::new(2, 1, 2, 2), 1.0, &mut rng).unwrap();
        let cat = GradCheck::new(1e-3)
            .run(
                &[a.clone(), b],
                |t| concat_channels(&[&t[0], &t[1]]).unwrap(),
                |_, dy| split_channels(dy, &[2, 1]).unwrap(),
            )
            .unwrap();
        assert!(cat.max_rel_error < 1e-6, "{cat:?}");

        let x = Tensor::randn(Shape::new(1, 2, 4, 4), 1.0, &mut rng).unwrap();
        let s2d = GradCheck::new(1e-3)
            .run(
                &[x],
                |t| space_to_depth(&t[0], 2).unwrap(),
                |_, dy| vec![depth_to_space(dy, 2).unwrap()],
            )
            .unwrap();
        assert!(s2d.max_rel_error < 1e-6, "{s2d:?}");
    }

    proptest::proptest! {
        #[test]
        fn space_to_depth_round_trips(n in 1usize..3, c in 1usize..4, hb in 1usize..4, wb in 1usize..4, block in 1usize..4, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::randn(Shape::new(n, c, hb * block, wb * block), 1.0, &mut rng).unwrap();
            let y = space_to_depth(&x, block).unwrap();
            proptest::prop_assert_eq!(y.shape(), Shape::new(n, c * block * block, hb, wb));
            proptest::prop_assert_eq!(depth_to_space(&y, block).unwrap(), x);
        }
    }
}
