use super::{Shape, Tensor};
use crate::error::{Error, Result};

fn pooled_shape(s: Shape, op: &str) -> Result<Shape> {
    if s.h < 2 || s.w < 2 {
        return Err(Error::shape(format!("{op} needs at least 2x2 spatial input, got {}x{}", s.h, s.w)));
    }
    Ok(Shape::new(s.n, s.c, s.h / 2, s.w / 2))
}

/// 2×2 stride-2 max pooling. Trailing odd rows/cols are dropped.
///
/// Returns the pooled tensor and, per output element, the flat input index that won.
/// Ties go to the first element in row-major window order.
pub fn maxpool2x2(x: &Tensor) -> Result<(Tensor, Vec<u32>)> {
    let s = x.shape();
    let os = pooled_shape(s, "maxpool")?;
    let mut out = Tensor::zeros_unchecked(os);
    let mut argmax = vec![0u32; os.numel()];
    let src = x.data();
    let dst = out.data_mut();
    let mut o = 0;
    for nc in 0..s.n * s.c {
        let base = nc * s.plane();
        for oy in 0..os.h {
            for ox in 0..os.w {
                let top = base + 2 * oy * s.w + 2 * ox;
                let window = [top, top + 1, top + s.w, top + s.w + 1];
                let mut best = window[0];
                for &i in &window[1..] {
                    if src[i] > src[best] {
                        best = i;
                    }
                }
                dst[o] = src[best];
                argmax[o] = best as u32;
                o += 1;
            }
        }
    }
    Ok((out, argmax))
}

/// Routes each upstream gradient to the input element recorded in `argmax`.
pub fn maxpool2x2_backward(input_shape: Shape, argmax: &[u32], dy: &Tensor) -> Result<Tensor> {
    if dy.numel() != argmax.len() {
        return Err(Error::shape(format!(
            "maxpool gradient has {} elements for {} recorded windows",
            dy.numel(),
            argmax.len()
        )));
    }
    let mut dx = Tensor::zeros_unchecked(input_shape);
    let g = dx.data_mut();
    for (&i, &d) in argmax.iter().zip(dy.data()) {
        g[i as usize] += d;
    }
    Ok(dx)
}

/// 2×2 stride-2 average pooling, same geometry as [`maxpool2x2`].
pub fn avgpool2x2(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    let os = pooled_shape(s, "avgpool")?;
    let mut out = Tensor::zeros_unchecked(os);
    let src = x.data();
    let dst = out.data_mut();
    let mut o = 0;
    for nc in 0..s.n * s.c {
        let base = nc * s.plane();
        for oy in 0..os.h {
            for ox in 0..os.w {
                let top = base + 2 * oy * s.w + 2 * ox;
                dst[o] = 0.25 * (src[top] + src[top + 1] + src[top + s.w] + src[top + s.w + 1]);
                o += 1;
            }
        }
    }
    Ok(out)
}

pub fn avgpool2x2_backward(input_shape: Shape, dy: &Tensor) -> Result<Tensor> {
    let os = pooled_shape(input_shape, "avgpool")?;
    if dy.shape() != os {
        return Err(Error::shape(format!("avgpool gradient is {}, expected {os}", dy.shape())));
    }
    let mut dx = Tensor::zeros_unchecked(input_shape);
    let s = input_shape;
    let g = dx.data_mut();
    let mut o = 0;
    for nc in 0..s.n * s.c {
        let base = nc * s.plane();
        for oy in 0..os.h {
            for ox in 0..os.w {
                let top = base + 2 * oy * s.w + 2 * ox;
                let d = 0.25 * dy.data()[o];
                for i in [top, top + 1, top + s.w, top + s.w + 1] {
                    g[i] += d;
                }
                o += 1;
            }
        }
    }
    Ok(dx)
}

/// Mean over rows and cols per channel; output is `(n, c, 1, 1)` for any input size.
pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let s = x.shape();
    let plane = s.plane();
    let data = x
        .data()
        .chunks_exact(plane)
        .map(|ch| (ch.iter().map(|&v| v as f64).sum::<f64>() / plane as f64) as f32)
        .collect();
    Tensor {
        shape: Shape::new(s.n, s.c, 1, 1),
        data,
    }
}

pub fn global_avg_pool_backward(input_shape: Shape, dy: &Tensor) -> Result<Tensor> {
    let s = input_shape;
    if dy.numel() != s.n * s.c {
        return Err(Error::shape(format!(
            "global pool gradient has {} elements, expected {}",
            dy.numel(),
            s.n * s.c
        )));
    }
    let inv = 1.0 / s.plane() as f32;
    let mut dx = Tensor::zeros_unchecked(s);
    for (ch, &d) in dx.data_mut().chunks_exact_mut(s.plane()).zip(dy.data()) {
        ch.fill(d * inv);
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::gradcheck::GradCheck;

    #[test]
    fn max_of_four() {
        let x = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, arg) = maxpool2x2(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![3]);
    }

    #[test]
    fn constant_input_ties_go_to_first_element() {
        let x = Tensor::full(Shape::new(1, 2, 4, 4), 0.7).unwrap();
        let (y, arg) = maxpool2x2(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.7));
        let dy = Tensor::full(y.shape(), 1.0).unwrap();
        let dx = maxpool2x2_backward(x.shape(), &arg, &dy).unwrap();
        // One receiver per window, always its top-left element.
        assert_eq!(dx.data().iter().filter(|&&v| v == 1.0).count(), 8);
        for c in 0..2 {
            for oy in 0..2 {
                for ox in 0..2 {
                    assert_eq!(dx.get(0, c, 2 * oy, 2 * ox), 1.0);
                }
            }
        }
    }

    #[test]
    fn matches_window_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::randn(Shape::new(1, 3, 6, 6), 1.0, &mut rng).unwrap();
        let (y, _) = maxpool2x2(&x).unwrap();
        for c in 0..3 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut m = f32::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            m = m.max(x.get(0, c, 2 * oy + dy, 2 * ox + dx));
                        }
                    }
                    assert_eq!(y.get(0, c, oy, ox), m);
                }
            }
        }
    }

    #[test]
    fn odd_dims_floor_and_too_small_rejected() {
        let x = Tensor::zeros(Shape::new(1, 1, 5, 7)).unwrap();
        assert_eq!(maxpool2x2(&x).unwrap().0.shape(), Shape::new(1, 1, 2, 3));
        assert_eq!(avgpool2x2(&x).unwrap().shape(), Shape::new(1, 1, 2, 3));
        assert!(maxpool2x2(&Tensor::zeros(Shape::new(1, 1, 1, 4)).unwrap()).is_err());
    }

    #[test]
    fn maxpool_gradient() {
        // Distinct values spaced well beyond the probe step so no window winner flips.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut vals: Vec<f32> = (0..72).map(|i| i as f32 * 0.05 - 1.8).collect();
        vals.shuffle(&mut rng);
        let x = Tensor::from_vec(Shape::new(2, 1, 6, 6), vals).unwrap();
        let report = GradCheck::new(1e-3)
            .run(
                &[x],
                |t| maxpool2x2(&t[0]).unwrap().0,
                |t, dy| {
                    let (_, arg) = maxpool2x2(&t[0]).unwrap();
                    vec![maxpool2x2_backward(t[0].shape(), &arg, dy).unwrap()]
                },
            )
            .unwrap();
        assert!(report.max_rel_error < 1e-3, "{report:?}");
    }

    #[test]
    fn avgpool_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::randn(Shape::new(1, 2, 5, 4), 1.0, &mut rng).unwrap();
        let report = GradCheck::new(1e-3)
            .run(
                &[x],
                |t| avgpool2x2(&t[0]).unwrap(),
                |t, dy| vec![avgpool2x2_backward(t[0].shape(), dy).unwrap()],
            )
            .unwrap();
        assert!(report.max_rel_error < 1e-3, "{report:?}");
    }

    #[test]
    fn global_pool_values_and_gradient() {
        let x = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(global_avg_pool(&x).data(), &[2.5]);
        let k = Tensor::full(Shape::new(2, 3, 16, 16), 0.25).unwrap();
        assert!(global_avg_pool(&k).data().iter().all(|&v| v == 0.25));
        for side in [16, 64] {
            let big = Tensor::zeros(Shape::new(1, 4, side, side)).unwrap();
            assert_eq!(global_avg_pool(&big).shape(), Shape::new(1, 4, 1, 1));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::randn(Shape::new(2, 3, 3, 4), 1.0, &mut rng).unwrap();
        let report = GradCheck::new(1e-3)
            .run(
                &[x],
                |t| global_avg_pool(&t[0]),
                |t, dy| vec![global_avg_pool_backward(t[0].shape(), dy).unwrap()],
            )
            .unwrap();
        assert!(report.max_rel_error < 1e-3, "{report:?}");
    }
}
