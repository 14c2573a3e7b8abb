//! Bidirectional-GRU embedding network with attractor-based mask estimation.
//!
//! Log-magnitude frames pass through a stack of bidirectional GRU layers
//! (forward and backward hidden states concatenated), then an affine
//! projection gives one `D`-dimensional embedding per time-frequency bin.
//! Embeddings are unit-normalized. During training, speaker attractors are
//! the mask-weighted means of the embeddings under the ideal binary masks;
//! soft masks are a softmax over negative squared distances to the
//! attractors, and the loss is their mean squared error against the binary
//! targets. At inference k-means centres take the place of the attractors.

mod attractor;
pub mod checkpoint;
pub mod gru;
mod kmeans;
mod train;

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::AudioClip;
use crate::spectral::{log_magnitude, mask_resynthesize, pad_edges, stft, trim_edges, MaskSet, StftConfig};

pub use attractor::{compute_attractors, estimate_masks, loss_and_embedding_grad, mask_loss};
pub use gru::GruParams;
pub use kmeans::{kmeans_embed, KMeansResult};
pub use train::{
    feature_statistics, manifest_examples, prepare_example, train, train_from_manifest, Adam, EpochRecord, TrainConfig,
    TrainOutcome, TrainingExample,
};

const NORM_FLOOR: f64 = 1e-12;
const INFERENCE_KMEANS_ITERS: usize = 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeparatorConfig {
    pub layers: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub bins: usize,
    pub speakers: usize,
}

impl SeparatorConfig {
    /// Four BGRU layers of 300 units per direction, 20-dim embeddings.
    pub fn paper_scale() -> Self {
        Self {
            layers: 4,
            hidden: 300,
            embed_dim: 20,
            bins: 129,
            speakers: 2,
        }
    }

    /// Reduced widths for desk-scale runs.
    pub fn desk_scale() -> Self {
        Self {
            hidden: 32,
            embed_dim: 8,
            ..Self::paper_scale()
        }
    }

    pub fn layer_output_width(&self) -> usize {
        2 * self.hidden
    }

    pub fn projection_width(&self) -> usize {
        self.bins * self.embed_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.embed_dim == 0 || self.bins == 0 || self.speakers == 0 {
            return Err(Error::InvalidArgument(format!("degenerate separator config {self:?}")));
        }
        Ok(())
    }
}

impl Default for SeparatorConfig {
    fn default() -> Self {
        Self::desk_scale()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BgruLayer {
    pub forward: GruParams,
    pub backward: GruParams,
}

/// All network weights plus the fixed input standardization.
#[derive(Clone, Debug, PartialEq)]
pub struct SeparatorParams {
    pub layers: Vec<BgruLayer>,
    /// `2H × bins·D`
    pub w_proj: Array2<f64>,
    pub b_proj: Array1<f64>,
    /// Per-bin feature mean and inverse spread. Set from training data and
    /// not trained.
    pub input_mean: Array1<f64>,
    pub input_scale: Array1<f64>,
}

impl SeparatorParams {
    pub fn zeros(config: &SeparatorConfig) -> Self {
        let h = config.hidden;
        let layers = (0..config.layers)
            .map(|l| {
                let input = if l == 0 { config.bins } else { 2 * h };
                BgruLayer {
                    forward: GruParams::zeros(input, h),
                    backward: GruParams::zeros(input, h),
                }
            })
            .collect();
        Self {
            layers,
            w_proj: Array2::zeros((2 * h, config.projection_width())),
            b_proj: Array1::zeros(config.projection_width()),
            input_mean: Array1::zeros(config.bins),
            input_scale: Array1::ones(config.bins),
        }
    }

    /// Seeded uniform(±1/√fan_in) weights, zero biases, identity input
    /// standardization.
    pub fn init(config: &SeparatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.hidden;
        let layers = (0..config.layers)
            .map(|l| {
                let input = if l == 0 { config.bins } else { 2 * h };
                BgruLayer {
                    forward: GruParams::init(input, h, &mut rng),
                    backward: GruParams::init(input, h, &mut rng),
                }
            })
            .collect();
        let bound = 1.0 / ((2 * h) as f64).sqrt();
        let w_proj = Array2::from_shape_fn((2 * h, config.projection_width()), |_| {
            rand::Rng::random_range(&mut rng, -bound..bound)
        });
        Ok(Self {
            layers,
            w_proj,
            b_proj: Array1::zeros(config.projection_width()),
            input_mean: Array1::zeros(config.bins),
            input_scale: Array1::ones(config.bins),
        })
    }

    /// Trainable tensors in checkpoint order: per layer, forward then
    /// backward cell (`w_in, w_rec, b_in, b_rec`), then `w_proj, b_proj`.
    pub fn trainable(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.extend(layer.forward.tensors());
            out.extend(layer.backward.tensors());
        }
        out.push(self.w_proj.as_slice().expect("contiguous"));
        out.push(self.b_proj.as_slice().expect("contiguous"));
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut [f64]> {
        self.split_mut().0
    }

    fn split_mut(&mut self) -> (Vec<&mut [f64]>, [&mut [f64]; 2]) {
        let Self {
            layers,
            w_proj,
            b_proj,
            input_mean,
            input_scale,
        } = self;
        let mut out = Vec::new();
        for layer in layers {
            out.extend(layer.forward.tensors_mut());
            out.extend(layer.backward.tensors_mut());
        }
        out.push(w_proj.as_slice_mut().expect("contiguous"));
        out.push(b_proj.as_slice_mut().expect("contiguous"));
        let stats = [
            input_mean.as_slice_mut().expect("contiguous"),
            input_scale.as_slice_mut().expect("contiguous"),
        ];
        (out, stats)
    }

    pub fn trainable_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for l in 0..self.layers.len() {
            for dir in ["fwd", "bwd"] {
                for t in ["w_in", "w_rec", "b_in", "b_rec"] {
                    names.push(format!("layer{l}.{dir}.{t}"));
                }
            }
        }
        names.push("proj.w".into());
        names.push("proj.b".into());
        names
    }

    /// Every stored tensor: trainable ones followed by the input statistics.
    pub fn all_tensors(&self) -> Vec<&[f64]> {
        let mut out = self.trainable();
        out.push(self.input_mean.as_slice().expect("contiguous"));
        out.push(self.input_scale.as_slice().expect("contiguous"));
        out
    }

    pub fn all_tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let (mut out, stats) = self.split_mut();
        out.extend(stats);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.all_tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    pub fn parameter_count(&self) -> usize {
        self.trainable().iter().map(|t| t.len()).sum()
    }

    fn check(&self, config: &SeparatorConfig) -> Result<()> {
        let expected = Self::zeros(config);
        let shapes_match = self.layers.len() == expected.layers.len()
            && self
                .all_tensors()
                .iter()
                .zip(expected.all_tensors())
                .all(|(a, b)| a.len() == b.len());
        if !shapes_match {
            return Err(Error::ShapeMismatch("parameters do not match separator config".into()));
        }
        if !self.is_finite() {
            return Err(Error::NonFinite("separator parameters".into()));
        }
        Ok(())
    }
}

/// Unit-norm embeddings, `frames × bins × D`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTensor {
    pub v: Array3<f64>,
}

struct LayerTrace {
    forward: gru::GruCache,
    backward: gru::GruCache,
}

struct ForwardTrace {
    layers: Vec<LayerTrace>,
    top: Array2<f64>,
    /// Pre-normalization embeddings and their norms.
    raw: Array3<f64>,
    norms: Array2<f64>,
}

fn run_forward(
    features: ArrayView2<f64>,
    params: &SeparatorParams,
    config: &SeparatorConfig,
) -> Result<(EmbeddingTensor, ForwardTrace)> {
    config.validate()?;
    params.check(config)?;
    if features.ncols() != config.bins {
        return Err(Error::ShapeMismatch(format!(
            "feature width {} vs {} bins",
            features.ncols(),
            config.bins
        )));
    }
    if features.nrows() == 0 {
        return Err(Error::InvalidArgument("no feature frames".into()));
    }
    if features.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("input features".into()));
    }
    let m = features.nrows();
    let h = config.hidden;
    let mut x = (&features - &params.input_mean) * &params.input_scale;
    let mut traces = Vec::with_capacity(config.layers);
    for layer in &params.layers {
        let (fwd_out, fwd_cache) = gru::forward(&layer.forward, x.view());
        let (bwd_rev, bwd_cache) = gru::forward(&layer.backward, gru::reversed(x.view()).view());
        let mut out = Array2::zeros((m, 2 * h));
        out.slice_mut(s![.., ..h]).assign(&fwd_out);
        out.slice_mut(s![.., h..]).assign(&gru::reversed(bwd_rev.view()));
        traces.push(LayerTrace {
            forward: fwd_cache,
            backward: bwd_cache,
        });
        x = out;
    }
    let proj = x.dot(&params.w_proj) + &params.b_proj;
    let raw = proj
        .into_shape_with_order((m, config.bins, config.embed_dim))
        .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    let norms = raw.map_axis(Axis(2), |u| u.dot(&u).sqrt().max(NORM_FLOOR));
    let mut v = raw.clone();
    for ((t, f), norm) in norms.indexed_iter() {
        v.slice_mut(s![t, f, ..]).mapv_inplace(|x| x / norm);
    }
    Ok((
        EmbeddingTensor { v },
        ForwardTrace {
            layers: traces,
            top: x,
            raw,
            norms,
        },
    ))
}

/// Embeds a `frames × bins` log-magnitude matrix.
pub fn forward(features: ArrayView2<f64>, params: &SeparatorParams, config: &SeparatorConfig) -> Result<EmbeddingTensor> {
    Ok(run_forward(features, params, config)?.0)
}

fn backward(
    params: &SeparatorParams,
    config: &SeparatorConfig,
    trace: &ForwardTrace,
    v: &Array3<f64>,
    dv: &Array3<f64>,
) -> SeparatorParams {
    let (m, n, d) = v.dim();
    let h = config.hidden;
    let mut grads = SeparatorParams::zeros(config);
    grads.input_scale.fill(0.0);

    // Through the unit normalization: du = (dv - v (v·dv)) / ‖u‖.
    let mut du = Array3::<f64>::zeros((m, n, d));
    for t in 0..m {
        for f in 0..n {
            let vv = v.slice(s![t, f, ..]);
            let g = dv.slice(s![t, f, ..]);
            let proj = vv.dot(&g);
            let norm = trace.norms[[t, f]];
            if trace.raw.slice(s![t, f, ..]).dot(&trace.raw.slice(s![t, f, ..])).sqrt() < NORM_FLOOR {
                continue;
            }
            for c in 0..d {
                du[[t, f, c]] = (g[c] - vv[c] * proj) / norm;
            }
        }
    }
    let dproj = du.into_shape_with_order((m, n * d)).expect("contiguous");
    grads.w_proj = trace.top.t().dot(&dproj);
    grads.b_proj = dproj.sum_axis(Axis(0));
    let mut dx = dproj.dot(&params.w_proj.t());

    for (l, (layer, lt)) in params.layers.iter().zip(&trace.layers).enumerate().rev() {
        let (dx_f, g_f) = gru::backward(&layer.forward, &lt.forward, dx.slice(s![.., ..h]));
        let d_bwd_rev = gru::reversed(dx.slice(s![.., h..]));
        let (dx_b_rev, g_b) = gru::backward(&layer.backward, &lt.backward, d_bwd_rev.view());
        dx = dx_f + gru::reversed(dx_b_rev.view());
        grads.layers[l] = BgruLayer {
            forward: g_f,
            backward: g_b,
        };
    }
    grads
}

/// Loss of one example and the gradient of that loss for every parameter.
pub fn example_gradients(
    features: ArrayView2<f64>,
    target: &MaskSet,
    params: &SeparatorParams,
    config: &SeparatorConfig,
) -> Result<(f64, SeparatorParams)> {
    let (emb, trace) = run_forward(features, params, config)?;
    let (loss, dv) = loss_and_embedding_grad(&emb.v, target)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("mask loss".into()));
    }
    Ok((loss, backward(params, config, &trace, &emb.v, &dv)))
}

/// Loss of one example without gradients.
pub fn example_loss(
    features: ArrayView2<f64>,
    target: &MaskSet,
    params: &SeparatorParams,
    config: &SeparatorConfig,
) -> Result<f64> {
    let emb = forward(features, params, config)?;
    let attractors = compute_attractors(&emb.v, target)?;
    mask_loss(&estimate_masks(&emb.v, &attractors)?, target)
}

/// Mean batch loss and its exact gradient. Example gradients are reduced in
/// batch order.
pub fn param_gradients(
    batch: &[(ArrayView2<f64>, &MaskSet)],
    params: &SeparatorParams,
    config: &SeparatorConfig,
) -> Result<(f64, SeparatorParams)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut total = SeparatorParams::zeros(config);
    total.input_scale.fill(0.0);
    let mut loss = 0.0;
    for (features, target) in batch {
        let (l, g) = example_gradients(features.view(), target, params, config)?;
        loss += l;
        for (acc, x) in total.trainable_mut().into_iter().zip(g.trainable()) {
            acc.iter_mut().zip(x).for_each(|(a, b)| *a += b);
        }
    }
    let scale = 1.0 / batch.len() as f64;
    for t in total.trainable_mut() {
        t.iter_mut().for_each(|x| *x *= scale);
    }
    if total.trainable().iter().any(|t| t.iter().any(|x| !x.is_finite())) {
        return Err(Error::NonFinite("parameter gradients".into()));
    }
    Ok((loss * scale, total))
}

/// Separates an 8 kHz mixture into `config.speakers` clips of the same length.
/// The mixture is edge-padded before analysis, as in [`prepare_example`].
pub fn separate(mixture: &AudioClip, params: &SeparatorParams, config: &SeparatorConfig) -> Result<Vec<AudioClip>> {
    let stft_config = StftConfig::default();
    let spec = stft(&pad_edges(mixture, &stft_config), &stft_config)?;
    let features = log_magnitude(&spec);
    let emb = forward(features.view(), params, config)?;
    let clusters = kmeans_embed(&emb, config.speakers, INFERENCE_KMEANS_ITERS, 0)?;
    let masks = estimate_masks(&emb.v, &clusters.centers)?;
    masks
        .masks
        .iter()
        .map(|mask| trim_edges(&mask_resynthesize(mask, &spec)?, mixture.len(), &stft_config))
        .collect()
}
