//! Synthetic text and frame towers plus text-conditioned frame fusion.
//!
//! The towers are frozen random linear maps followed by trainable
//! identity-initialized adapters and L2 normalization. Fusion is single-head
//! scaled dot-product attention over frames with the text as query.

use crate::error::{ensure, Result};
use crate::math::{
    dot, norm, normalize_backward, softmax_unchecked, EmbeddingVector, Matrix, SeededRng,
    COSINE_GUARD,
};

/// Raw text: latent concept activations.
#[derive(Debug, Clone, PartialEq)]
pub struct RawText {
    pub id: u64,
    pub features: Vec<f64>,
}

/// Raw video: `T` frames of concept activations.
#[derive(Debug, Clone, PartialEq)]
pub struct RawVideo {
    pub id: u64,
    pub frames: Vec<Vec<f64>>,
}

/// `T′` unit-norm frame embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameEmbeddingSet {
    pub frames: Vec<EmbeddingVector>,
}

impl FrameEmbeddingSet {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.frames.first().map_or(0, Vec::len)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderStack {
    pub text_projection: Matrix,
    pub frame_projection: Matrix,
    pub text_adapter: Matrix,
    pub frame_adapter: Matrix,
    pub adapters_enabled: bool,
}

impl EncoderStack {
    /// Projections have i.i.d. N(0, 1/c) entries. The frame tower shares the
    /// text tower's map up to `tower_mismatch`:
    /// `P_f = sqrt(1 - m²)·P_t + m·G`, so `m = 0` gives aligned towers and
    /// `m = 1` independent ones.
    pub fn new(dim: usize, concepts: usize, tower_mismatch: f64, adapters_enabled: bool, rng: &mut SeededRng) -> Result<Self> {
        ensure(dim >= 1 && concepts >= 1, || "encoder dimensions must be positive".into())?;
        ensure((0.0..=1.0).contains(&tower_mismatch), || {
            format!("tower mismatch must lie in [0, 1], got {tower_mismatch}")
        })?;
        let scale = 1.0 / (concepts as f64).sqrt();
        let text_projection = Matrix::gaussian(dim, concepts, scale, rng);
        let other = Matrix::gaussian(dim, concepts, scale, rng);
        let keep = (1.0 - tower_mismatch * tower_mismatch).sqrt();
        let frame_projection = Matrix::from_fn(dim, concepts, |r, c| {
            keep * text_projection.get(r, c) + tower_mismatch * other.get(r, c)
        });
        Ok(Self {
            text_projection,
            frame_projection,
            text_adapter: Matrix::identity(dim),
            frame_adapter: Matrix::identity(dim),
            adapters_enabled,
        })
    }

    pub fn dim(&self) -> usize {
        self.text_projection.rows()
    }

    pub fn concepts(&self) -> usize {
        self.text_projection.cols()
    }
}

/// Intermediate values of one tower pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub(crate) struct TowerTrace {
    /// Frozen projection of the raw features.
    pub projected: Vec<f64>,
    /// Norm of the adapted vector before normalization.
    pub adapted_norm: f64,
    pub embedding: EmbeddingVector,
}

fn tower(projection: &Matrix, adapter: &Matrix, features: &[f64], what: &str) -> Result<TowerTrace> {
    ensure(features.len() == projection.cols(), || {
        format!(
            "{what} features have length {}, encoder expects {}",
            features.len(),
            projection.cols()
        )
    })?;
    let projected = projection.matvec(features);
    let adapted = adapter.matvec(&projected);
    let adapted_norm = norm(&adapted);
    ensure(adapted_norm > COSINE_GUARD && adapted_norm.is_finite(), || {
        format!("{what} encodes to a zero vector")
    })?;
    let embedding = adapted.iter().map(|x| x / adapted_norm).collect();
    Ok(TowerTrace {
        projected,
        adapted_norm,
        embedding,
    })
}

impl TowerTrace {
    /// Accumulates the adapter gradient and returns nothing else: the frozen
    /// projection and the raw input are leaves.
    pub fn backward(&self, grad_embedding: &[f64], adapter_grad: &mut Matrix) {
        let grad_adapted = normalize_backward(&self.embedding, self.adapted_norm, grad_embedding);
        adapter_grad.add_outer(1.0, &grad_adapted, &self.projected);
    }
}

pub(crate) fn encode_text_traced(t: &RawText, stack: &EncoderStack) -> Result<TowerTrace> {
    tower(&stack.text_projection, &stack.text_adapter, &t.features, "text")
}

pub(crate) fn encode_frame_traced(frame: &[f64], stack: &EncoderStack) -> Result<TowerTrace> {
    tower(&stack.frame_projection, &stack.frame_adapter, frame, "frame")
}

pub fn encode_text(t: &RawText, stack: &EncoderStack) -> Result<EmbeddingVector> {
    Ok(encode_text_traced(t, stack)?.embedding)
}

/// Uniform-by-index frame sampling: `i_k = floor(k·T / T′)`.
pub fn sample_frame_indices(raw_frames: usize, sampled: usize) -> Result<Vec<usize>> {
    ensure(sampled >= 1, || "at least one frame must be sampled".into())?;
    ensure(raw_frames >= sampled, || {
        format!("video has {raw_frames} frames, {sampled} requested")
    })?;
    Ok((0..sampled).map(|k| k * raw_frames / sampled).collect())
}

pub(crate) fn encode_frames_traced(v: &RawVideo, sampled: usize, stack: &EncoderStack) -> Result<Vec<TowerTrace>> {
    sample_frame_indices(v.frames.len(), sampled)?
        .into_iter()
        .map(|i| encode_frame_traced(&v.frames[i], stack))
        .collect()
}

pub fn encode_frames(v: &RawVideo, sampled: usize, stack: &EncoderStack) -> Result<FrameEmbeddingSet> {
    Ok(FrameEmbeddingSet {
        frames: encode_frames_traced(v, sampled, stack)?
            .into_iter()
            .map(|t| t.embedding)
            .collect(),
    })
}

pub const DEFAULT_DROPOUT: f64 = 0.3;

#[derive(Debug, Clone, PartialEq)]
pub struct FusionParameters {
    pub query_map: Matrix,
    pub key_map: Matrix,
    pub value_map: Matrix,
    pub output_map: Matrix,
    pub dropout: f64,
}

impl FusionParameters {
    /// All four maps start at identity.
    pub fn identity(dim: usize, dropout: f64) -> Result<Self> {
        ensure((0.0..1.0).contains(&dropout), || {
            format!("dropout rate must lie in [0, 1), got {dropout}")
        })?;
        Ok(Self {
            query_map: Matrix::identity(dim),
            key_map: Matrix::identity(dim),
            value_map: Matrix::identity(dim),
            output_map: Matrix::identity(dim),
            dropout,
        })
    }

    pub fn dim(&self) -> usize {
        self.query_map.rows()
    }

    /// Keys and values of a video's frames; independent of the text.
    pub(crate) fn prepare(&self, frames: &[EmbeddingVector]) -> PreparedFrames {
        PreparedFrames {
            keys: frames.iter().map(|f| self.key_map.matvec(f)).collect(),
            values: frames.iter().map(|f| self.value_map.matvec(f)).collect(),
        }
    }

    /// Per-coordinate inverted-dropout multipliers drawn from `rng`.
    pub(crate) fn draw_mask(&self, rng: &mut SeededRng) -> Vec<f64> {
        let keep = 1.0 - self.dropout;
        (0..self.dim())
            .map(|_| if rng.uniform() < self.dropout { 0.0 } else { 1.0 / keep })
            .collect()
    }

    pub(crate) fn fuse_prepared(&self, query: &[f64], prepared: &PreparedFrames, mask: Option<&[f64]>) -> FusionTrace {
        let scale = 1.0 / (query.len() as f64).sqrt();
        let weights = softmax_unchecked(prepared.keys.iter().map(|k| dot(query, k) * scale));
        let mut pooled = vec![0.0; query.len()];
        for (w, val) in weights.iter().zip(&prepared.values) {
            for (p, x) in pooled.iter_mut().zip(val) {
                *p += w * x;
            }
        }
        if let Some(mask) = mask {
            pooled.iter_mut().zip(mask).for_each(|(p, m)| *p *= m);
        }
        let out = self.output_map.matvec(&pooled);
        let out_norm = norm(&out);
        let video = out.iter().map(|x| x / (out_norm + COSINE_GUARD)).collect();
        FusionTrace {
            weights,
            pooled,
            out_norm,
            video,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct PreparedFrames {
    pub keys: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub(crate) struct FusionTrace {
    pub weights: Vec<f64>,
    /// Pooled values after dropout.
    pub pooled: Vec<f64>,
    pub out_norm: f64,
    pub video: EmbeddingVector,
}

/// Gradient buffers of the fusion maps.
#[derive(Debug, Clone)]
pub(crate) struct FusionGrads {
    pub query_map: Matrix,
    pub key_map: Matrix,
    pub value_map: Matrix,
    pub output_map: Matrix,
}

impl FusionGrads {
    pub fn zeros(dim: usize) -> Self {
        Self {
            query_map: Matrix::zeros(dim, dim),
            key_map: Matrix::zeros(dim, dim),
            value_map: Matrix::zeros(dim, dim),
            output_map: Matrix::zeros(dim, dim),
        }
    }
}

impl FusionTrace {
    /// Backward of one fusion call given dL/dv.
    ///
    /// Accumulates the output-map gradient directly, and returns dL/dquery
    /// while adding per-frame dL/dkey and dL/dvalue into the supplied buffers
    /// (the key/value maps are applied once per video, so their gradients are
    /// formed later from the summed buffers).
    pub fn backward(
        &self,
        params: &FusionParameters,
        query: &[f64],
        prepared: &PreparedFrames,
        mask: Option<&[f64]>,
        grad_video: &[f64],
        grads: &mut FusionGrads,
        grad_keys: &mut [Vec<f64>],
        grad_values: &mut [Vec<f64>],
    ) -> Vec<f64> {
        let d = query.len();
        let scale = 1.0 / (d as f64).sqrt();
        // v = o / (|o| + guard)
        let denom = self.out_norm + COSINE_GUARD;
        let proj = dot(&self.video, grad_video);
        let grad_out: Vec<f64> = if self.out_norm > 0.0 {
            let k = self.out_norm / denom;
            self.video
                .iter()
                .zip(grad_video)
                .map(|(v, g)| (g - k * v * proj) / denom)
                .collect()
        } else {
            grad_video.iter().map(|g| g / denom).collect()
        };
        grads.output_map.add_outer(1.0, &grad_out, &self.pooled);
        let mut grad_pooled = params.output_map.matvec_t(&grad_out);
        if let Some(mask) = mask {
            grad_pooled.iter_mut().zip(mask).for_each(|(g, m)| *g *= m);
        }
        let grad_weights: Vec<f64> = prepared.values.iter().map(|val| dot(&grad_pooled, val)).collect();
        let mean_grad: f64 = self.weights.iter().zip(&grad_weights).map(|(w, g)| w * g).sum();
        let mut grad_query = vec![0.0; d];
        for (k, (&w, &gw)) in self.weights.iter().zip(&grad_weights).enumerate() {
            for (gv, gp) in grad_values[k].iter_mut().zip(&grad_pooled) {
                *gv += w * gp;
            }
            let grad_logit = w * (gw - mean_grad) * scale;
            if grad_logit != 0.0 {
                for (gq, key) in grad_query.iter_mut().zip(&prepared.keys[k]) {
                    *gq += grad_logit * key;
                }
                for (gk, q) in grad_keys[k].iter_mut().zip(query) {
                    *gk += grad_logit * q;
                }
            }
        }
        grad_query
    }
}

/// Text-conditioned attention pooling of `frames` into one unit-norm video
/// embedding. Dropout applies to the pooled vector only when `training`.
pub fn fuse(
    frames: &FrameEmbeddingSet,
    t: &[f64],
    p: &FusionParameters,
    training: bool,
    rng: &mut SeededRng,
) -> Result<EmbeddingVector> {
    ensure(!frames.is_empty(), || "fusion over an empty frame set".into())?;
    ensure(t.len() == p.dim() && frames.dim() == p.dim(), || {
        format!(
            "fusion dimension mismatch: text {}, frames {}, parameters {}",
            t.len(),
            frames.dim(),
            p.dim()
        )
    })?;
    let prepared = p.prepare(&frames.frames);
    let query = p.query_map.matvec(t);
    let mask = training.then(|| p.draw_mask(rng));
    let trace = p.fuse_prepared(&query, &prepared, mask.as_deref());
    ensure(trace.out_norm > COSINE_GUARD, || "fused video embedding has zero norm".into())?;
    Ok(trace.video)
}
