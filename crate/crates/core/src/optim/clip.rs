use crate::autograd::Real;
use crate::nn::ParamSet;

/// Scales all gradients by `max_norm / norm` when the global l2 norm exceeds
/// `max_norm`. Returns the pre-clip norm.
pub fn clip_global_norm<T: Real>(grads: &mut ParamSet<T>, max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "max_norm must be positive");
    let norm = grads
        .tensors()
        .iter()
        .flat_map(|t| t.iter())
        .map(|v| {
            let v = v.f64();
            v * v
        })
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        grads.scale(T::c(max_norm / norm));
    }
    norm
}
