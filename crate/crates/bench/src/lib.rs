//! Inputs shared by the benchmarks.

use emojich::nn::ParamSet;
use emojich::ImageBuffer;
use ndarray::{ArrayD, IxDyn};

/// Deterministic pseudo-random logits in roughly [-8, 8].
pub fn logits(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| ((i as f64 * 12.9898).sin() * 43758.5453).rem_euclid(1.0) * 16.0 - 8.0)
        .collect()
}

/// One tensor of `n` parameters filled from `f(i)`.
pub fn params(n: usize, f: impl Fn(usize) -> f32) -> ParamSet<f32> {
    let mut p = ParamSet::new();
    p.insert("w", ArrayD::from_shape_fn(IxDyn(&[n]), |ix| f(ix[0])));
    p
}

/// A white square canvas with a filled dark disk in the middle.
pub fn disk_on_white(side: usize) -> ImageBuffer {
    let c = side as f64 / 2.0;
    ImageBuffer::from_fn(side, side, 3, |x, y| {
        let d = ((x as f64 - c).powi(2) + (y as f64 - c).powi(2)).sqrt();
        if d < side as f64 / 3.0 {
            [200, 40, 60, 255]
        } else {
            [255; 4]
        }
    })
    .expect("valid size")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inputs_are_well_formed() {
        let l = logits(1000);
        assert!(l.iter().all(|v| v.abs() <= 8.0));
        assert_eq!(params(10, |i| i as f32).expect("w").len(), 10);
        let img = disk_on_white(32);
        assert_eq!(img.pixel(0, 0), &[255, 255, 255]);
        assert_eq!(img.pixel(16, 16), &[200, 40, 60]);
    }
}
