use ndarray::{Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::EmbeddingTensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    /// `k × D`
    pub centers: Array2<f64>,
    /// Cluster of every bin, `frames × bins`.
    pub assignment: Array2<usize>,
    /// Sum of squared distances after each assignment step.
    pub objective: Vec<f64>,
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Lloyd's algorithm over all bin embeddings.
///
/// Centres start at `k` distinct bins drawn with `seed`, preferring distinct
/// vectors. Stops early once assignments stop changing.
pub fn kmeans_embed(emb: &EmbeddingTensor, k: usize, iters: usize, seed: u64) -> Result<KMeansResult> {
    let (m, n, d) = emb.v.dim();
    if k == 0 || iters == 0 {
        return Err(Error::InvalidArgument(format!("k-means needs k >= 1 and iters >= 1 (k={k}, iters={iters})")));
    }
    let count = m * n;
    if count < k {
        return Err(Error::InvalidArgument(format!("{count} bins cannot form {k} clusters")));
    }
    let points = emb
        .v
        .view()
        .into_shape_with_order((count, d))
        .map_err(|e| Error::ShapeMismatch(e.to_string()))?;

    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    for &i in &order {
        if chosen.len() == k {
            break;
        }
        if chosen.iter().all(|&c| points.row(c) != points.row(i)) {
            chosen.push(i);
        }
    }
    for &i in &order {
        if chosen.len() == k {
            break;
        }
        if !chosen.contains(&i) {
            chosen.push(i);
        }
    }
    let mut centers = Array2::zeros((k, d));
    for (c, &i) in chosen.iter().enumerate() {
        centers.row_mut(c).assign(&points.row(i));
    }

    let mut labels = vec![usize::MAX; count];
    let mut objective = Vec::with_capacity(iters);
    for _ in 0..iters {
        let mut changed = false;
        let mut total = 0.0;
        for (p, label) in labels.iter_mut().enumerate() {
            let (best, dist) = (0..k)
                .map(|c| (c, sq_dist(points.row(p), centers.row(c))))
                .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
            total += dist;
            if *label != best {
                *label = best;
                changed = true;
            }
        }
        objective.push(total);
        if !changed {
            break;
        }

        let mut sums = Array2::<f64>::zeros((k, d));
        let mut sizes = vec![0usize; k];
        for (p, &label) in labels.iter().enumerate() {
            sums.row_mut(label).scaled_add(1.0, &points.row(p));
            sizes[label] += 1;
        }
        for c in 0..k {
            if sizes[c] > 0 {
                centers.row_mut(c).assign(&(&sums.row(c) / sizes[c] as f64));
            }
        }
        for c in 0..k {
            if sizes[c] == 0 {
                let far = (0..count)
                    .map(|p| (p, sq_dist(points.row(p), centers.row(labels[p]))))
                    .fold((0, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc })
                    .0;
                centers.row_mut(c).assign(&points.row(far));
                sizes[c] = 1;
                labels[far] = c;
            }
        }
    }

    let assignment = Array2::from_shape_vec((m, n), labels).map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    Ok(KMeansResult {
        centers,
        assignment,
        objective,
    })
}
