//! The text mass: similarity-aware radius, reparameterized sampling, the
//! support text vector, and best-of-M selection at inference.

use std::fmt;
use std::str::FromStr;

use crate::encoders::FrameEmbeddingSet;
use crate::error::{ensure, Error, Result};
use crate::math::{cosine, norm, sample_gaussian, EmbeddingVector, Matrix, PriorSpec, SeededRng};

/// Minimum ‖v − t‖ for the support direction to be defined.
pub const SUPPORT_MIN_DISTANCE: f64 = 1e-9;

/// Text-to-frame cosine similarities `S_i = s(t, f_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityVector(pub Vec<f64>);

impl SimilarityVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.0.iter().sum::<f64>() / self.0.len() as f64
    }
}

/// Strictly positive per-dimension scale of the text mass.
#[derive(Debug, Clone, PartialEq)]
pub struct RadiusVector(Vec<f64>);

impl RadiusVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        ensure(values.iter().all(|&r| r > 0.0 && r.is_finite()), || {
            "radius components must be finite and strictly positive".into()
        })?;
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn l1(&self) -> f64 {
        self.0.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RadiusVariant {
    /// `exp(mean S)`, nothing learnable.
    FixedMean,
    /// `exp(θ · mean S)` broadcast over d.
    Scalar,
    /// `exp(S W)` with `W ∈ R^{T′×d}`.
    Linear,
}

impl RadiusVariant {
    pub const ALL: [RadiusVariant; 3] = [Self::FixedMean, Self::Scalar, Self::Linear];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::FixedMean => "fixed-mean",
            Self::Scalar => "scalar",
            Self::Linear => "linear",
        }
    }
}

impl fmt::Display for RadiusVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RadiusVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed-mean" => Ok(Self::FixedMean),
            "scalar" => Ok(Self::Scalar),
            "linear" => Ok(Self::Linear),
            other => Err(Error::config(
                "radius",
                format!("unknown radius variant `{other}` (expected fixed-mean, scalar or linear)"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RadiusParameters {
    pub variant: RadiusVariant,
    pub theta: f64,
    /// `T′ × d`, row k multiplies `S_k`.
    pub weight: Matrix,
    /// Keeps θ fixed during training (used to pin the scalar variant at θ = 1).
    pub theta_frozen: bool,
}

impl RadiusParameters {
    /// θ = 0 and W = 0, so the learnable variants start at R = 1.
    pub fn new(variant: RadiusVariant, frames: usize, dim: usize) -> Self {
        Self {
            variant,
            theta: 0.0,
            weight: Matrix::zeros(frames, dim),
            theta_frozen: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn frames(&self) -> usize {
        self.weight.rows()
    }
}

pub const DEFAULT_TRIALS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingConfig {
    pub trials: usize,
    pub prior: PriorSpec,
    pub train_samples_per_text: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            trials: DEFAULT_TRIALS,
            prior: PriorSpec::default(),
            train_samples_per_text: 1,
        }
    }
}

impl SamplingConfig {
    pub fn with_trials(trials: usize) -> Self {
        Self {
            trials,
            ..Self::default()
        }
    }
}

pub fn frame_similarities(t: &[f64], frames: &FrameEmbeddingSet) -> Result<SimilarityVector> {
    ensure(!frames.is_empty(), || "similarities against an empty frame set".into())?;
    ensure(frames.dim() == t.len(), || {
        format!("text dimension {} vs frame dimension {}", t.len(), frames.dim())
    })?;
    Ok(similarities(t, &frames.frames))
}

pub(crate) fn similarities(t: &[f64], frames: &[EmbeddingVector]) -> SimilarityVector {
    SimilarityVector(frames.iter().map(|f| cosine(t, f)).collect())
}

pub fn radius(s: &SimilarityVector, params: &RadiusParameters) -> Result<RadiusVector> {
    ensure(!s.is_empty(), || "radius from an empty similarity vector".into())?;
    ensure(s.values().iter().all(|x| x.is_finite()), || "non-finite similarity".into())?;
    if params.variant == RadiusVariant::Linear {
        ensure(s.len() == params.frames(), || {
            format!(
                "similarity vector has {} entries, radius weight expects {}",
                s.len(),
                params.frames()
            )
        })?;
    }
    RadiusVector::new(radius_unchecked(s, params))
}

pub(crate) fn radius_unchecked(s: &SimilarityVector, params: &RadiusParameters) -> Vec<f64> {
    let d = params.dim();
    match params.variant {
        RadiusVariant::FixedMean => vec![s.mean().exp(); d],
        RadiusVariant::Scalar => vec![(params.theta * s.mean()).exp(); d],
        RadiusVariant::Linear => params.weight.matvec_t(s.values()).into_iter().map(f64::exp).collect(),
    }
}

/// Backward of [`radius`]: given dL/dR and the forward output R, accumulates
/// parameter gradients into `grad_theta` / `grad_weight` and returns dL/dS.
pub(crate) fn radius_backward(
    s: &SimilarityVector,
    params: &RadiusParameters,
    r: &[f64],
    grad_r: &[f64],
    grad_theta: &mut f64,
    grad_weight: &mut Matrix,
) -> Vec<f64> {
    let frames = s.len();
    match params.variant {
        RadiusVariant::FixedMean | RadiusVariant::Scalar => {
            // every component equals the same exp(·)
            let total: f64 = grad_r.iter().zip(r).map(|(g, ri)| g * ri).sum();
            let grad_mean = if params.variant == RadiusVariant::Scalar {
                *grad_theta += total * s.mean();
                params.theta * total
            } else {
                total
            };
            vec![grad_mean / frames as f64; frames]
        }
        RadiusVariant::Linear => {
            let grad_z: Vec<f64> = grad_r.iter().zip(r).map(|(g, ri)| g * ri).collect();
            grad_weight.add_outer(1.0, s.values(), &grad_z);
            params.weight.matvec(&grad_z)
        }
    }
}

/// `t + R ⊙ ε` for an explicit noise vector.
pub fn perturb(t: &[f64], r: &[f64], noise: &[f64]) -> EmbeddingVector {
    t.iter()
        .zip(r)
        .zip(noise)
        .map(|((ti, ri), ei)| ti + ri * ei)
        .collect()
}

/// One reparameterized draw `t_s = t + R ⊙ ε`, ε ~ N(0, I). Not renormalized.
pub fn sample_text_mass(t: &[f64], r: &RadiusVector, rng: &mut SeededRng) -> Result<EmbeddingVector> {
    ensure(t.len() == r.len(), || {
        format!("text dimension {} vs radius dimension {}", t.len(), r.len())
    })?;
    let noise = sample_gaussian(rng, t.len())?;
    Ok(perturb(t, r.values(), &noise))
}

/// Point on the mass surface along the unit direction from `t` toward `v`:
/// `t + R ⊙ (v − t)/‖v − t‖`.
pub fn support_text(t: &[f64], v: &[f64], r: &RadiusVector) -> Result<EmbeddingVector> {
    ensure(t.len() == v.len() && t.len() == r.len(), || {
        format!(
            "support vector dimension mismatch: t {}, v {}, R {}",
            t.len(),
            v.len(),
            r.len()
        )
    })?;
    support_unchecked(t, v, r.values()).map(|(sup, _, _)| sup)
}

/// Returns `(t_sup, unit direction, ‖v − t‖)`.
pub(crate) fn support_unchecked(t: &[f64], v: &[f64], r: &[f64]) -> Result<(EmbeddingVector, Vec<f64>, f64)> {
    let diff: Vec<f64> = v.iter().zip(t).map(|(a, b)| a - b).collect();
    let dist = norm(&diff);
    #[allow(clippy::neg_cmp_op_on_partial_ord)] // NaN distances are degenerate too
    if !(dist > SUPPORT_MIN_DISTANCE) {
        return Err(Error::DegenerateGeometry);
    }
    let dir: Vec<f64> = diff.iter().map(|x| x / dist).collect();
    let sup = t
        .iter()
        .zip(&dir)
        .zip(r)
        .map(|((ti, ei), ri)| ti + ei * ri)
        .collect();
    Ok((sup, dir, dist))
}

/// Best-of-M draw from the text mass for one candidate video.
///
/// Samples are drawn sequentially from `rng`, so the first k draws of a
/// larger pool are exactly a smaller pool. Ties keep the lowest trial index.
/// `r = None` is a collapsed (zero-radius) mass: the result is `t` itself.
pub fn select_best_sample(
    t: &[f64],
    r: Option<&RadiusVector>,
    v: &[f64],
    cfg: &SamplingConfig,
    rng: &mut SeededRng,
) -> Result<(EmbeddingVector, f64)> {
    ensure(cfg.trials >= 1, || "best-of-M needs at least one trial".into())?;
    ensure(t.len() == v.len(), || {
        format!("text dimension {} vs video dimension {}", t.len(), v.len())
    })?;
    let Some(r) = r else {
        return Ok((t.to_vec(), cosine(t, v)));
    };
    let mut best: Option<(EmbeddingVector, f64)> = None;
    for _ in 0..cfg.trials {
        let sample = sample_text_mass(t, r, rng)?;
        let sim = cosine(&sample, v);
        if best.as_ref().is_none_or(|(_, b)| sim > *b) {
            best = Some((sample, sim));
        }
    }
    Ok(best.expect("at least one trial"))
}

/// Similarity-only variant of [`select_best_sample`] with a reusable noise buffer.
pub(crate) fn best_similarity(t: &[f64], r: &[f64], v: &[f64], trials: usize, rng: &mut SeededRng, noise: &mut [f64]) -> f64 {
    let mut best = f64::NEG_INFINITY;
    let mut sample = vec![0.0; t.len()];
    for _ in 0..trials {
        rng.fill_gaussian(noise);
        for (((s, ti), ri), ei) in sample.iter_mut().zip(t).zip(r).zip(noise.iter()) {
            *s = ti + ri * ei;
        }
        let sim = cosine(&sample, v);
        if sim > best {
            best = sim;
        }
    }
    best
}
