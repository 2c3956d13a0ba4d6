//! Heatmap colouring and overlay blending.

use anyhow::{bail, Result};
use xcam_core::Tensor;

/// Linear blue (0) → green (0.5) → red (1) colour map.
pub fn colormap(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0);
    if t <= 0.5 {
        [0.0, 2.0 * t, 1.0 - 2.0 * t]
    } else {
        [2.0 * t - 1.0, 2.0 - 2.0 * t, 0.0]
    }
}

/// Colours an `[H, W]` map in `[0, 1]` and blends it half-and-half over a
/// `[3, H, W]` image.
pub fn render_heatmap(saliency: &Tensor, image: &Tensor) -> Result<Tensor> {
    let (c, h, w) = image.chw()?;
    if c != 3 || saliency.shape() != [h, w] {
        bail!(
            "overlay needs a [3, H, W] image and an [H, W] map, got {:?} and {:?}",
            image.shape(),
            saliency.shape()
        );
    }
    let plane = h * w;
    let mut out = vec![0.0; 3 * plane];
    for (p, &s) in saliency.data().iter().enumerate() {
        let color = colormap(s);
        for ch in 0..3 {
            out[ch * plane + p] = 0.5 * image.data()[ch * plane + p] + 0.5 * color[ch];
        }
    }
    Ok(Tensor::new(vec![3, h, w], out)?)
}

/// Rescales a signed map to `[0, 1]` with zero at 0.5, for writing guided
/// gradients as an image.
pub fn signed_to_unit(map: &Tensor) -> Tensor {
    let peak = map.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        return Tensor::filled(map.shape(), 0.5);
    }
    map.map(|v| (0.5 + 0.5 * v / peak).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image() -> Tensor {
        Tensor::from_fn(&[3, 2, 2], |i| i as f64 / 12.0)
    }

    #[test]
    fn endpoints_tint_blue_and_red() {
        let img = image();
        let blue = render_heatmap(&Tensor::zeros(&[2, 2]), &img).unwrap();
        let red = render_heatmap(&Tensor::filled(&[2, 2], 1.0), &img).unwrap();
        for p in 0..4 {
            assert_eq!(blue.data()[p], 0.5 * img.data()[p]);
            assert_eq!(blue.data()[8 + p], 0.5 * img.data()[8 + p] + 0.5);
            assert_eq!(red.data()[p], 0.5 * img.data()[p] + 0.5);
            assert_eq!(red.data()[8 + p], 0.5 * img.data()[8 + p]);
        }
    }

    #[test]
    fn midpoint_is_green() {
        let img = image();
        let mid = render_heatmap(&Tensor::filled(&[2, 2], 0.5), &img).unwrap();
        for p in 0..4 {
            assert_eq!(mid.data()[p], 0.5 * img.data()[p]);
            assert_eq!(mid.data()[4 + p], 0.5 * img.data()[4 + p] + 0.5);
            assert_eq!(mid.data()[8 + p], 0.5 * img.data()[8 + p]);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        assert!(render_heatmap(&Tensor::zeros(&[3, 2]), &image()).is_err());
    }

    #[test]
    fn signed_maps_centre_on_half() {
        let m = Tensor::new(vec![3], vec![-2.0, 0.0, 1.0]).unwrap();
        assert_eq!(signed_to_unit(&m).data(), &[0.0, 0.5, 0.75]);
        assert!(signed_to_unit(&Tensor::zeros(&[2]))
            .data()
            .iter()
            .all(|&v| v == 0.5));
    }
}
