//! Resampling, normalisation and masking of single-channel maps.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Source coordinate and interpolation weight for one output axis position
/// under corner-aligned bilinear resampling.
#[inline]
fn source_coord(out: usize, src_len: usize, dst_len: usize) -> (usize, usize, f64) {
    if dst_len == 1 || src_len == 1 {
        return (0, 0, 0.0);
    }
    let pos = out as f64 * (src_len - 1) as f64 / (dst_len - 1) as f64;
    let lo = (pos.floor() as usize).min(src_len - 1);
    let hi = (lo + 1).min(src_len - 1);
    (lo, hi, pos - lo as f64)
}

/// Bilinear upsampling of an `[H, W]` map with corner alignment.
pub fn upsample_bilinear(map: &Tensor, target_h: usize, target_w: usize) -> Result<Tensor> {
    let (h, w) = map.hw()?;
    if target_h < h || target_w < w {
        return Err(Error::invalid(format!(
            "upsample target {target_h}x{target_w} is smaller than source {h}x{w}"
        )));
    }
    let src = map.data();
    let mut out = Vec::with_capacity(target_h * target_w);
    for y in 0..target_h {
        let (y0, y1, fy) = source_coord(y, h, target_h);
        for x in 0..target_w {
            let (x0, x1, fx) = source_coord(x, w, target_w);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Ok(Tensor::from_raw(vec![target_h, target_w], out))
}

/// Transpose of [`upsample_bilinear`]: maps a gradient on the upsampled
/// grid back onto the `h x w` source grid.
pub(crate) fn upsample_bilinear_adjoint(grad: &Tensor, h: usize, w: usize) -> Tensor {
    let (th, tw) = grad.hw().expect("upsampled gradient is 2-d");
    let mut out = vec![0.0; h * w];
    for y in 0..th {
        let (y0, y1, fy) = source_coord(y, h, th);
        for x in 0..tw {
            let (x0, x1, fx) = source_coord(x, w, tw);
            let g = grad.data()[y * tw + x];
            out[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
            out[y0 * w + x1] += g * (1.0 - fy) * fx;
            out[y1 * w + x0] += g * fy * (1.0 - fx);
            out[y1 * w + x1] += g * fy * fx;
        }
    }
    Tensor::from_raw(vec![h, w], out)
}

/// Min-max normalisation to `[0, 1]`. A constant map becomes all zeros.
pub fn min_max_normalize(map: &Tensor) -> Tensor {
    let (lo, hi) = (map.min(), map.max());
    let range = hi - lo;
    if range <= 0.0 {
        return Tensor::zeros(map.shape());
    }
    map.map(|v| ((v - lo) / range).clamp(0.0, 1.0))
}

/// Min-max normalises, then binarises at `delta`: normalised values above
/// `delta` become 1.0 and the rest 0.0. A constant map yields all zeros.
pub fn normalize_threshold(map: &Tensor, delta: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&delta) {
        return Err(Error::invalid(format!(
            "threshold must lie in [0, 1], got {delta}"
        )));
    }
    Ok(min_max_normalize(map).map(|v| if v > delta { 1.0 } else { 0.0 }))
}

/// Broadcasts an `[H, W]` mask over the channels of a `[C, H, W]` image (or
/// takes a mask of the image's own shape) and multiplies pointwise.
fn broadcast_product(mask: &Tensor, image: &Tensor, context: &'static str) -> Result<Tensor> {
    if mask.shape() == image.shape() {
        return mask.zip_map(image, |a, b| a * b);
    }
    let (c, h, w) = image.chw()?;
    if mask.shape() != [h, w] {
        return Err(Error::Shape {
            context,
            lhs: mask.shape().to_vec(),
            rhs: image.shape().to_vec(),
        });
    }
    let plane = h * w;
    Ok(Tensor::from_fn(&[c, h, w], |i| {
        mask.data()[i % plane] * image.data()[i]
    }))
}

/// `E = L ∘ I`, with `L` broadcast across channels.
pub fn explanation_map(mask: &Tensor, image: &Tensor) -> Result<Tensor> {
    broadcast_product(mask, image, "explanation map")
}

/// Pointwise product of a guided-backprop input map with an upsampled
/// saliency map.
pub fn guided_fuse(guided: &Tensor, mask: &Tensor) -> Result<Tensor> {
    broadcast_product(mask, guided, "guided fusion")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn upsample_identity_and_midpoint() {
        let m = Tensor::from_fn(&[3, 4], |i| i as f64);
        assert_eq!(upsample_bilinear(&m, 3, 4).unwrap(), m);
        let row = t(&[1, 2], &[0.0, 1.0]);
        assert_eq!(
            upsample_bilinear(&row, 1, 3).unwrap().data(),
            &[0.0, 0.5, 1.0]
        );
        assert!(upsample_bilinear(&m, 2, 4).is_err());
    }

    #[test]
    fn upsample_constant_stays_constant() {
        let m = Tensor::filled(&[4, 4], 0.3);
        let up = upsample_bilinear(&m, 32, 32).unwrap();
        assert!(up.data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn adjoint_satisfies_inner_product_identity() {
        let m = Tensor::from_fn(&[3, 5], |i| (i as f64 * 0.77).sin());
        let v = Tensor::from_fn(&[7, 11], |i| (i as f64 * 0.31).cos());
        let up = upsample_bilinear(&m, 7, 11).unwrap();
        let lhs: f64 = up.data().iter().zip(v.data()).map(|(a, b)| a * b).sum();
        let adj = upsample_bilinear_adjoint(&v, 3, 5);
        let rhs: f64 = m.data().iter().zip(adj.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn threshold_fixtures() {
        let m = t(&[3], &[0.0, 5.0, 10.0]);
        assert_eq!(
            normalize_threshold(&m, 0.25).unwrap().data(),
            &[0.0, 1.0, 1.0]
        );
        let m = t(&[4], &[2.0, 2.5, 3.0, 2.0]);
        assert_eq!(
            normalize_threshold(&m, 0.0).unwrap().data(),
            &[0.0, 1.0, 1.0, 0.0]
        );
        let c = Tensor::filled(&[2, 2], 7.0);
        assert!(normalize_threshold(&c, 0.5)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert!(normalize_threshold(&m, 1.5).is_err());
    }

    #[test]
    fn explanation_fixtures() {
        let img = t(&[1, 1, 2], &[2.0, 4.0]);
        let half = Tensor::filled(&[1, 2], 0.5);
        assert_eq!(explanation_map(&half, &img).unwrap().data(), &[1.0, 2.0]);
        let ones = Tensor::filled(&[1, 2], 1.0);
        assert_eq!(explanation_map(&ones, &img).unwrap(), img);
        let zeros = Tensor::zeros(&[1, 2]);
        assert!(explanation_map(&zeros, &img)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert!(explanation_map(&Tensor::zeros(&[2, 2]), &img).is_err());
    }

    #[test]
    fn guided_fuse_box_and_identity() {
        let guided = Tensor::from_fn(&[3, 4, 4], |i| i as f64 - 20.0);
        let ones = Tensor::filled(&[4, 4], 1.0);
        assert_eq!(guided_fuse(&guided, &ones).unwrap(), guided);
        let boxed = Tensor::from_fn(&[4, 4], |i| {
            let (y, x) = (i / 4, i % 4);
            if (1..3).contains(&y) && (1..3).contains(&x) {
                0.7
            } else {
                0.0
            }
        });
        let fused = guided_fuse(&guided, &boxed).unwrap();
        for (i, v) in fused.data().iter().enumerate() {
            if boxed.data()[i % 16] == 0.0 {
                assert_eq!(*v, 0.0);
            }
        }
    }

    proptest! {
        #[test]
        fn normalize_is_scale_invariant(
            vals in proptest::collection::vec(0.0f64..100.0, 2..40),
            scale in 0.01f64..100.0,
            delta in 0.0f64..1.0,
        ) {
            let m = Tensor::new(vec![vals.len()], vals).unwrap();
            let a = normalize_threshold(&m, delta).unwrap();
            let b = normalize_threshold(&m.scale(scale), delta).unwrap();
            // Rounding may move a value sitting exactly on the threshold.
            let n = min_max_normalize(&m);
            for i in 0..a.len() {
                if (n.data()[i] - delta).abs() > 1e-9 {
                    prop_assert_eq!(a.data()[i], b.data()[i]);
                }
            }
        }

        #[test]
        fn explanation_bounded_by_image(
            img in proptest::collection::vec(-5.0f64..5.0, 12),
            mask in proptest::collection::vec(0.0f64..=1.0, 4),
        ) {
            let i = Tensor::new(vec![3, 2, 2], img).unwrap();
            let m = Tensor::new(vec![2, 2], mask).unwrap();
            let e = explanation_map(&m, &i).unwrap();
            for (a, b) in e.data().iter().zip(i.data()) {
                prop_assert!(a.abs() <= b.abs());
            }
        }
    }
}
