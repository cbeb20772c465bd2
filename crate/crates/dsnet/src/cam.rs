//! Gradient-weighted class activation maps at the head's 1×1 conv block.

use gigaslide_core::ops::upsample::upsample_nearest;
use gigaslide_core::{Graph, ParamStore, Real, Tensor};

use crate::error::{DsnetError, Result};
use crate::model::{Dsnet, DsnetInput};

/// Class activation map for a single-item batch, `[2H, 2W]` on the thumbnail
/// grid, min-max normalized to [0, 1]. A map with no positive evidence (or a
/// constant one) comes back all zero.
pub fn grad_cam<T: Real>(model: &Dsnet, store: &ParamStore<T>, input: &DsnetInput<T>, class: usize) -> Result<Tensor<T>> {
    if input.batch() != 1 {
        return Err(DsnetError::Config(format!("grad_cam takes one slide, got a batch of {}", input.batch())));
    }
    if class >= model.config.classes {
        return Err(DsnetError::Config(format!("class {class} out of range")));
    }
    let mut g = Graph::eval_with_grad();
    let out = model.forward(&mut g, store, input)?;
    let mut seed = Tensor::zeros(g.shape(out.logits));
    seed.data_mut()[class] = T::one();
    let grads = g.backward_seeded(out.logits, seed)?;
    let feats = g.value(out.head_features);
    let grad = grads.get(out.head_features).cloned().unwrap_or_else(|| Tensor::zeros(feats.shape()));
    let factor = input.thumbnail.shape()[2] / feats.shape()[2];
    cam_map(feats, &grad, factor)
}

/// Combines retained features `[1, C, h, w]` with their gradients: channel
/// weights are the spatial mean of the gradients, the weighted sum is clipped
/// at zero, min-max normalized and enlarged `factor` times.
pub fn cam_map<T: Real>(features: &Tensor<T>, grads: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (b, c, h, w) = features.dims4()?;
    if b != 1 || grads.shape() != features.shape() {
        return Err(DsnetError::Config(format!(
            "cam over features {:?} with gradients {:?}",
            features.shape(),
            grads.shape()
        )));
    }
    let hw = h * w;
    let mut cam = vec![T::zero(); hw];
    for ci in 0..c {
        let weight = grads.data()[ci * hw..][..hw].iter().copied().sum::<T>() / T::from_usize(hw).unwrap();
        for (m, &a) in cam.iter_mut().zip(&features.data()[ci * hw..][..hw]) {
            *m += weight * a;
        }
    }
    cam.iter_mut().for_each(|v| *v = v.max(T::zero()));
    let (lo, hi) = cam.iter().fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    cam.iter_mut().for_each(|v| *v = if span > T::zero() { (*v - lo) / span } else { T::zero() });
    let map = upsample_nearest(&Tensor::from_vec(&[1, 1, h, w], cam)?, factor)?;
    Ok(map.reshape(&[h * factor, w * factor])?)
}
