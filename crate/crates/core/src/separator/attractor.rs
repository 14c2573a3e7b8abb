//! Attractor points, distance-based soft masks and the mask loss, with the
//! gradient of the loss with respect to the embeddings.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::spectral::{MaskKind, MaskSet};

fn check_dims(v: &Array3<f64>, masks: &MaskSet) -> Result<()> {
    let (m, n, _) = v.dim();
    if masks.speakers() == 0 || masks.masks.iter().any(|mk| mk.dim() != (m, n)) {
        return Err(Error::ShapeMismatch(format!(
            "embeddings {:?} vs masks {:?}",
            (m, n),
            masks.dim()
        )));
    }
    Ok(())
}

/// Mask-weighted mean embedding of every speaker (`k × D`).
pub fn compute_attractors(v: &Array3<f64>, target: &MaskSet) -> Result<Array2<f64>> {
    check_dims(v, target)?;
    let (m, n, d) = v.dim();
    let k = target.speakers();
    let mut out = Array2::zeros((k, d));
    for (i, mask) in target.masks.iter().enumerate() {
        let weight: f64 = mask.sum();
        if weight <= 0.0 {
            return Err(Error::EmptySpeakerMask(i));
        }
        for t in 0..m {
            for f in 0..n {
                let w = mask[[t, f]];
                if w != 0.0 {
                    for c in 0..d {
                        out[[i, c]] += w * v[[t, f, c]];
                    }
                }
            }
        }
        out.row_mut(i).mapv_inplace(|x| x / weight);
    }
    Ok(out)
}

/// Softmax over speakers of the negative squared distance to each attractor.
pub fn estimate_masks(v: &Array3<f64>, attractors: &Array2<f64>) -> Result<MaskSet> {
    let (m, n, d) = v.dim();
    if attractors.ncols() != d || attractors.nrows() == 0 {
        return Err(Error::ShapeMismatch(format!(
            "attractors {:?} vs embedding width {d}",
            attractors.dim()
        )));
    }
    let k = attractors.nrows();
    let mut masks = vec![Array2::zeros((m, n)); k];
    let mut logits = vec![0.0; k];
    for t in 0..m {
        for f in 0..n {
            for (i, l) in logits.iter_mut().enumerate() {
                *l = -(0..d).map(|c| (v[[t, f, c]] - attractors[[i, c]]).powi(2)).sum::<f64>();
            }
            let top = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let denom: f64 = logits.iter().map(|l| (l - top).exp()).sum();
            for (i, l) in logits.iter().enumerate() {
                masks[i][[t, f]] = (l - top).exp() / denom;
            }
        }
    }
    Ok(MaskSet {
        masks,
        kind: MaskKind::Soft,
    })
}

/// Mean squared error over every (speaker, frame, bin) entry.
pub fn mask_loss(estimated: &MaskSet, target: &MaskSet) -> Result<f64> {
    if estimated.speakers() != target.speakers() || estimated.dim() != target.dim() {
        return Err(Error::ShapeMismatch(format!(
            "{} masks {:?} vs {} masks {:?}",
            estimated.speakers(),
            estimated.dim(),
            target.speakers(),
            target.dim()
        )));
    }
    let count = (target.speakers() * target.dim().0 * target.dim().1) as f64;
    let total: f64 = estimated
        .masks
        .iter()
        .zip(&target.masks)
        .map(|(e, t)| e.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        .sum();
    Ok(total / count)
}

/// Loss of one example and its gradient with respect to the embeddings,
/// including the path through the attractors.
pub fn loss_and_embedding_grad(v: &Array3<f64>, target: &MaskSet) -> Result<(f64, Array3<f64>)> {
    let attractors = compute_attractors(v, target)?;
    let estimated = estimate_masks(v, &attractors)?;
    let loss = mask_loss(&estimated, target)?;
    let (m, n, d) = v.dim();
    let k = target.speakers();
    let scale = 2.0 / (k * m * n) as f64;

    let mut dv = Array3::<f64>::zeros((m, n, d));
    let mut da = Array2::<f64>::zeros((k, d));
    let mut dp = vec![0.0; k];
    let mut dl = vec![0.0; k];
    for t in 0..m {
        for f in 0..n {
            for i in 0..k {
                dp[i] = scale * (estimated.masks[i][[t, f]] - target.masks[i][[t, f]]);
            }
            let weighted: f64 = (0..k).map(|i| estimated.masks[i][[t, f]] * dp[i]).sum();
            for i in 0..k {
                dl[i] = estimated.masks[i][[t, f]] * (dp[i] - weighted);
            }
            // logit_i = -‖v - a_i‖²
            for c in 0..d {
                let mut acc = 0.0;
                for i in 0..k {
                    let diff = v[[t, f, c]] - attractors[[i, c]];
                    acc -= 2.0 * dl[i] * diff;
                    da[[i, c]] += 2.0 * dl[i] * diff;
                }
                dv[[t, f, c]] += acc;
            }
        }
    }
    for (i, mask) in target.masks.iter().enumerate() {
        let weight = mask.sum();
        for t in 0..m {
            for f in 0..n {
                let w = mask[[t, f]];
                if w != 0.0 {
                    for c in 0..d {
                        dv[[t, f, c]] += w * da[[i, c]] / weight;
                    }
                }
            }
        }
    }
    Ok((loss, dv))
}
