//! Contrastive objectives over a batch of text-video pairs and their
//! hand-written gradients.
//!
//! A batch of N pairs is fused into an N×N grid `v_ij = ψ(frames_j, t_i)`.
//! Three similarity matrices can be built on that grid, differing only in
//! the text-side vector of row i:
//!
//! * `L_ce`:  the deterministic `t_i`
//! * `L_s`:   one reparameterized draw `t_i + R_i ⊙ ε_i`
//! * `L_sup`: the support vector `t_i + R_i ⊙ (v_ii − t_i)/‖v_ii − t_i‖`
//!
//! where `R_i` is conditioned on the frames of text i's own video. Each
//! matrix goes through the same symmetric cross-entropy.

use std::fmt;
use std::str::FromStr;

use crate::encoders::{encode_frames_traced, encode_text_traced, FusionGrads, FusionTrace, PreparedFrames, RawText, RawVideo, TowerTrace};
use crate::error::{ensure, Error, Result};
use crate::math::{cosine, cosine_backward, normalize_backward, EmbeddingVector, Matrix, SeededRng};
use crate::model::{GradientSet, LogitScale, ModelParameters, ParamName};
use crate::text_mass::{radius_backward, radius_unchecked, similarities, support_unchecked, SimilarityVector};

/// Entry (i, j) is the similarity of text-side row i with column video j.
pub type SimilarityMatrix = Matrix;

/// Which terms are optimized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Objective {
    /// `L_s + α·L_sup`.
    TMass,
    /// `L_ce` on the deterministic text embedding, no text mass.
    Baseline,
    /// `L_ce + L_s`.
    CePlusS,
}

impl Objective {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::TMass => "t-mass",
            Self::Baseline => "baseline",
            Self::CePlusS => "ablation-ce-plus-s",
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "t-mass" => Ok(Self::TMass),
            "baseline" => Ok(Self::Baseline),
            "ablation-ce-plus-s" => Ok(Self::CePlusS),
            other => Err(Error::config(
                "mode",
                format!("unknown mode `{other}` (expected t-mass, baseline or ablation-ce-plus-s)"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    /// Directional terms of the diagnostic `l_ce` matrix.
    pub l_t2v: f64,
    pub l_v2t: f64,
    pub l_ce: f64,
    pub l_s: f64,
    pub l_sup: f64,
    pub l_total: f64,
    pub alpha: f64,
}

/// N training pairs; pair i is `(texts[i], videos[i])`.
#[derive(Debug, Clone)]
pub struct PairBatch {
    pub texts: Vec<RawText>,
    pub videos: Vec<RawVideo>,
}

impl PairBatch {
    pub fn new(texts: Vec<RawText>, videos: Vec<RawVideo>) -> Result<Self> {
        ensure(!texts.is_empty(), || "empty batch".into())?;
        ensure(texts.len() == videos.len(), || {
            format!("batch has {} texts and {} videos", texts.len(), videos.len())
        })?;
        Ok(Self { texts, videos })
    }

    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }
}

/// Randomness consumed by one forward pass, recorded so the backward pass
/// (and finite-difference probes) replay exactly the same draws.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNoise {
    /// `[sample][text] -> ε ∈ R^d`.
    pub eps: Vec<Vec<Vec<f64>>>,
    /// Inverted-dropout multipliers for fusion cell `i·N + j`; `None` in eval mode.
    pub dropout: Option<Vec<Vec<f64>>>,
}

impl BatchNoise {
    /// Draws ε for every text (sample-major), then one dropout mask per
    /// fusion cell in row-major order when `training` and the rate is positive.
    pub fn draw(params: &ModelParameters, n: usize, samples: usize, training: bool, rng: &mut SeededRng) -> Self {
        let d = params.dim();
        let eps = (0..samples.max(1))
            .map(|_| {
                (0..n)
                    .map(|_| {
                        let mut e = vec![0.0; d];
                        rng.fill_gaussian(&mut e);
                        e
                    })
                    .collect()
            })
            .collect();
        let dropout = (training && params.fusion.dropout > 0.0)
            .then(|| (0..n * n).map(|_| params.fusion.draw_mask(rng)).collect());
        Self { eps, dropout }
    }

    pub fn zeros(n: usize, d: usize) -> Self {
        Self {
            eps: vec![vec![vec![0.0; d]; n]],
            dropout: None,
        }
    }

    pub fn samples(&self) -> usize {
        self.eps.len()
    }
}

/// Output of the symmetric cross-entropy with its derivatives.
#[derive(Debug, Clone)]
pub(crate) struct CeOutput {
    pub l_t2v: f64,
    pub l_v2t: f64,
    pub l_ce: f64,
    /// dL_ce / d sims.
    pub grad: Matrix,
    /// dL_ce / dλ.
    pub grad_lambda: f64,
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    max + values.map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub(crate) fn symmetric_ce_full(sims: &Matrix, lambda: f64) -> CeOutput {
    let n = sims.rows();
    let inv_n = 1.0 / n as f64;
    let mut grad = Matrix::zeros(n, n);
    let mut l_t2v = 0.0;
    let mut l_v2t = 0.0;
    let mut grad_lambda = 0.0;

    for i in 0..n {
        let row = sims.row(i);
        let lse = log_sum_exp(row.iter().map(|s| s * lambda));
        l_t2v -= lambda * row[i] - lse;
        let mut expected = 0.0;
        for (j, &s) in row.iter().enumerate() {
            let p = (lambda * s - lse).exp();
            expected += p * s;
            let target = if i == j { 1.0 } else { 0.0 };
            grad.set(i, j, grad.get(i, j) + 0.5 * inv_n * lambda * (p - target));
        }
        grad_lambda += 0.5 * inv_n * (expected - row[i]);
    }
    for j in 0..n {
        let lse = log_sum_exp((0..n).map(|i| sims.get(i, j) * lambda));
        l_v2t -= lambda * sims.get(j, j) - lse;
        let mut expected = 0.0;
        for i in 0..n {
            let s = sims.get(i, j);
            let p = (lambda * s - lse).exp();
            expected += p * s;
            let target = if i == j { 1.0 } else { 0.0 };
            grad.set(i, j, grad.get(i, j) + 0.5 * inv_n * lambda * (p - target));
        }
        grad_lambda += 0.5 * inv_n * (expected - sims.get(j, j));
    }
    l_t2v *= inv_n;
    l_v2t *= inv_n;
    CeOutput {
        l_t2v,
        l_v2t,
        l_ce: 0.5 * (l_t2v + l_v2t),
        grad,
        grad_lambda,
    }
}

/// Symmetric InfoNCE over a square similarity matrix: returns
/// `(L_t→v, L_v→t, L_ce)`.
pub fn symmetric_ce(sims: &SimilarityMatrix, scale: &LogitScale) -> Result<(f64, f64, f64)> {
    ensure(sims.rows() >= 1 && sims.rows() == sims.cols(), || {
        format!("symmetric cross-entropy needs a square matrix, got {:?}", sims.shape())
    })?;
    ensure(sims.is_finite(), || "non-finite similarity entries".into())?;
    let out = symmetric_ce_full(sims, scale.lambda());
    Ok((out.l_t2v, out.l_v2t, out.l_ce))
}

/// Everything the forward pass computes on a batch, kept for backward.
pub struct EncodedBatch {
    n: usize,
    texts: Vec<TowerTrace>,
    frames: Vec<Vec<TowerTrace>>,
    frame_embeddings: Vec<Vec<EmbeddingVector>>,
    queries: Vec<Vec<f64>>,
    prepared: Vec<PreparedFrames>,
    fused: Vec<FusionTrace>,
    similarities: Vec<SimilarityVector>,
    /// Zero vectors when the model has no text mass.
    radii: Vec<Vec<f64>>,
}

impl EncodedBatch {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn text(&self, i: usize) -> &[f64] {
        &self.texts[i].embedding
    }

    pub fn frames(&self, j: usize) -> &[EmbeddingVector] {
        &self.frame_embeddings[j]
    }

    /// `v_ij = ψ(frames_j, t_i)`.
    pub fn video(&self, i: usize, j: usize) -> &[f64] {
        &self.fused[i * self.n + j].video
    }

    pub fn similarity(&self, i: usize) -> &SimilarityVector {
        &self.similarities[i]
    }

    pub fn radius(&self, i: usize) -> &[f64] {
        &self.radii[i]
    }

    /// Matrix `cos(row_i, v_ij)` for text-side rows indexed by `rows`.
    fn matrix(&self, rows: &[usize], text_side: &[EmbeddingVector]) -> Matrix {
        Matrix::from_fn(rows.len(), rows.len(), |a, b| {
            cosine(&text_side[a], self.video(rows[a], rows[b]))
        })
    }
}

pub fn encode_batch(params: &ModelParameters, batch: &PairBatch, noise: &BatchNoise) -> Result<EncodedBatch> {
    let n = batch.len();
    let frames_per_video = params.frames();
    ensure(noise.eps.iter().all(|s| s.len() == n && s.iter().all(|e| e.len() == params.dim())), || {
        "noise does not match batch shape".into()
    })?;
    if let Some(masks) = &noise.dropout {
        ensure(masks.len() == n * n, || "dropout masks do not match batch shape".into())?;
    }
    let stack = &params.encoders;
    let texts = batch
        .texts
        .iter()
        .map(|t| encode_text_traced(t, stack))
        .collect::<Result<Vec<_>>>()?;
    let frames = batch
        .videos
        .iter()
        .map(|v| encode_frames_traced(v, frames_per_video, stack))
        .collect::<Result<Vec<_>>>()?;
    let frame_embeddings: Vec<Vec<EmbeddingVector>> = frames
        .iter()
        .map(|fs| fs.iter().map(|f| f.embedding.clone()).collect())
        .collect();
    let fusion = &params.fusion;
    let queries: Vec<Vec<f64>> = texts.iter().map(|t| fusion.query_map.matvec(&t.embedding)).collect();
    let prepared: Vec<PreparedFrames> = frame_embeddings.iter().map(|f| fusion.prepare(f)).collect();
    let mut fused = Vec::with_capacity(n * n);
    for (i, q) in queries.iter().enumerate() {
        for (j, prep) in prepared.iter().enumerate() {
            let mask = noise.dropout.as_ref().map(|m| m[i * n + j].as_slice());
            let trace = fusion.fuse_prepared(q, prep, mask);
            ensure(trace.out_norm > 0.0, || format!("fused video ({i}, {j}) has zero norm"))?;
            fused.push(trace);
        }
    }
    let similarities: Vec<SimilarityVector> = texts
        .iter()
        .zip(&frame_embeddings)
        .map(|(t, f)| similarities(&t.embedding, f))
        .collect();
    let radii = similarities
        .iter()
        .map(|s| {
            if params.text_mass {
                radius_unchecked(s, &params.radius)
            } else {
                vec![0.0; params.dim()]
            }
        })
        .collect();
    Ok(EncodedBatch {
        n,
        texts,
        frames,
        frame_embeddings,
        queries,
        prepared,
        fused,
        similarities,
        radii,
    })
}

/// Support rows: `(row indices, t_sup, unit directions, distances)`.
struct SupportRows {
    rows: Vec<usize>,
    vectors: Vec<EmbeddingVector>,
    directions: Vec<Vec<f64>>,
    distances: Vec<f64>,
}

fn support_rows(enc: &EncodedBatch) -> SupportRows {
    let mut out = SupportRows {
        rows: Vec::new(),
        vectors: Vec::new(),
        directions: Vec::new(),
        distances: Vec::new(),
    };
    for i in 0..enc.n {
        if let Ok((sup, dir, dist)) = support_unchecked(enc.text(i), enc.video(i, i), enc.radius(i)) {
            out.rows.push(i);
            out.vectors.push(sup);
            out.directions.push(dir);
            out.distances.push(dist);
        }
    }
    out
}

fn stochastic_texts(enc: &EncodedBatch, eps: &[Vec<f64>]) -> Vec<EmbeddingVector> {
    (0..enc.n)
        .map(|i| crate::text_mass::perturb(enc.text(i), enc.radius(i), &eps[i]))
        .collect()
}

/// `L_s`: one text-mass draw per text from the recorded noise, averaged over
/// draws when several samples per text are recorded.
pub fn stochastic_loss(batch: &PairBatch, params: &ModelParameters, noise: &BatchNoise) -> Result<f64> {
    let enc = encode_batch(params, batch, noise)?;
    Ok(stochastic_term(&enc, params, noise))
}

fn stochastic_term(enc: &EncodedBatch, params: &ModelParameters, noise: &BatchNoise) -> f64 {
    let all: Vec<usize> = (0..enc.n).collect();
    let lambda = params.logit_scale.lambda();
    noise
        .eps
        .iter()
        .map(|eps| symmetric_ce_full(&enc.matrix(&all, &stochastic_texts(enc, eps)), lambda).l_ce)
        .sum::<f64>()
        / noise.samples() as f64
}

/// `L_sup`: deterministic; pairs whose video embedding coincides with the
/// text embedding are dropped from the matrix.
pub fn support_loss(batch: &PairBatch, params: &ModelParameters) -> Result<f64> {
    let noise = BatchNoise::zeros(batch.len(), params.dim());
    let enc = encode_batch(params, batch, &noise)?;
    support_term(&enc, params)
}

fn support_term(enc: &EncodedBatch, params: &ModelParameters) -> Result<f64> {
    let sup = support_rows(enc);
    if sup.rows.is_empty() {
        return Err(Error::DegenerateBatch);
    }
    Ok(symmetric_ce_full(&enc.matrix(&sup.rows, &sup.vectors), params.logit_scale.lambda()).l_ce)
}

/// `L_total = L_s + α·L_sup`, plus the diagnostic `L_ce` on deterministic t.
pub fn total_loss(batch: &PairBatch, params: &ModelParameters, alpha: f64, noise: &BatchNoise) -> Result<LossBreakdown> {
    objective_loss(batch, params, Objective::TMass, alpha, noise)
}

pub fn objective_loss(
    batch: &PairBatch,
    params: &ModelParameters,
    objective: Objective,
    alpha: f64,
    noise: &BatchNoise,
) -> Result<LossBreakdown> {
    Ok(run(batch, params, objective, alpha, noise, false)?.0)
}

/// Loss breakdown and analytic gradients of `l_total` for every trainable
/// tensor, replaying the recorded noise.
pub fn backward(
    batch: &PairBatch,
    params: &ModelParameters,
    objective: Objective,
    alpha: f64,
    noise: &BatchNoise,
) -> Result<(LossBreakdown, GradientSet)> {
    let (loss, grads) = run(batch, params, objective, alpha, noise, true)?;
    Ok((loss, grads.expect("gradients requested")))
}

struct Accumulators {
    text: Vec<Vec<f64>>,
    video: Vec<Vec<f64>>,
    radius: Vec<Vec<f64>>,
    lambda: f64,
}

fn run(
    batch: &PairBatch,
    params: &ModelParameters,
    objective: Objective,
    alpha: f64,
    noise: &BatchNoise,
    with_grad: bool,
) -> Result<(LossBreakdown, Option<GradientSet>)> {
    ensure(alpha >= 0.0 && alpha.is_finite(), || format!("alpha must be non-negative, got {alpha}"))?;
    let enc = encode_batch(params, batch, noise)?;
    let n = enc.n;
    let d = params.dim();
    let lambda = params.logit_scale.lambda();
    let all: Vec<usize> = (0..n).collect();

    let (use_ce, use_s, sup_weight) = match objective {
        Objective::TMass => (false, true, alpha),
        Objective::Baseline => (true, false, 0.0),
        Objective::CePlusS => (true, true, 0.0),
    };

    let mut acc = Accumulators {
        text: vec![vec![0.0; d]; n],
        video: vec![vec![0.0; d]; n * n],
        radius: vec![vec![0.0; d]; n],
        lambda: 0.0,
    };

    // diagnostic / baseline term
    let texts: Vec<EmbeddingVector> = (0..n).map(|i| enc.text(i).to_vec()).collect();
    let ce = symmetric_ce_full(&enc.matrix(&all, &texts), lambda);
    if with_grad && use_ce {
        backprop_matrix(&enc, &all, &texts, &ce, 1.0, &mut acc, |acc, row, g| {
            add(&mut acc.text[row], g);
        });
    }

    // stochastic term
    let samples = noise.samples() as f64;
    let mut l_s = 0.0;
    for eps in &noise.eps {
        let ts = stochastic_texts(&enc, eps);
        let out = symmetric_ce_full(&enc.matrix(&all, &ts), lambda);
        l_s += out.l_ce / samples;
        if with_grad && use_s {
            backprop_matrix(&enc, &all, &ts, &out, 1.0 / samples, &mut acc, |acc, row, g| {
                add(&mut acc.text[row], g);
                for ((r, gi), ei) in acc.radius[row].iter_mut().zip(g).zip(&eps[row]) {
                    *r += gi * ei;
                }
            });
        }
    }

    // support term
    let sup = support_rows(&enc);
    let l_sup = if sup.rows.is_empty() {
        if sup_weight > 0.0 {
            return Err(Error::DegenerateBatch);
        }
        0.0
    } else {
        let out = symmetric_ce_full(&enc.matrix(&sup.rows, &sup.vectors), lambda);
        if with_grad && sup_weight > 0.0 {
            let lookup: Vec<Option<usize>> = (0..n).map(|i| sup.rows.iter().position(|&r| r == i)).collect();
            backprop_matrix(&enc, &sup.rows, &sup.vectors, &out, sup_weight, &mut acc, |acc, row, g| {
                let a = lookup[row].expect("support row");
                let dir = &sup.directions[a];
                let dist = sup.distances[a];
                // t_sup = t + e ⊙ R, e = (v_ii − t)/‖v_ii − t‖
                let r = enc.radius(row);
                let grad_dir: Vec<f64> = g.iter().zip(r).map(|(gi, ri)| gi * ri).collect();
                for ((acc_r, gi), ei) in acc.radius[row].iter_mut().zip(g).zip(dir) {
                    *acc_r += gi * ei;
                }
                let grad_diff = normalize_backward(dir, dist, &grad_dir);
                add(&mut acc.video[row * n + row], &grad_diff);
                for ((t, gi), gd) in acc.text[row].iter_mut().zip(g).zip(&grad_diff) {
                    *t += gi - gd;
                }
            });
        }
        out.l_ce
    };

    let l_total = match objective {
        Objective::TMass => l_s + alpha * l_sup,
        Objective::Baseline => ce.l_ce,
        Objective::CePlusS => ce.l_ce + l_s,
    };
    let loss = LossBreakdown {
        l_t2v: ce.l_t2v,
        l_v2t: ce.l_v2t,
        l_ce: ce.l_ce,
        l_s,
        l_sup,
        l_total,
        alpha,
    };
    if !with_grad {
        return Ok((loss, None));
    }
    Ok((loss, Some(propagate(&enc, params, acc, noise))))
}

fn add(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

/// Pushes `weight · dL/dsims` into the text-side rows (through `route`) and
/// into the fused videos.
fn backprop_matrix<F>(
    enc: &EncodedBatch,
    rows: &[usize],
    text_side: &[EmbeddingVector],
    out: &CeOutput,
    weight: f64,
    acc: &mut Accumulators,
    mut route: F,
) where
    F: FnMut(&mut Accumulators, usize, &[f64]),
{
    let n = enc.n;
    let d = text_side.first().map_or(0, Vec::len);
    acc.lambda += weight * out.grad_lambda;
    for (a, &row) in rows.iter().enumerate() {
        let mut grad_row = vec![0.0; d];
        for (b, &col) in rows.iter().enumerate() {
            let g = weight * out.grad.get(a, b);
            cosine_backward(
                &text_side[a],
                enc.video(row, col),
                g,
                Some(&mut grad_row),
                Some(&mut acc.video[row * n + col]),
            );
        }
        route(acc, row, &grad_row);
    }
}

/// Backpropagates the accumulated dL/dt, dL/dv and dL/dR into parameters.
fn propagate(enc: &EncodedBatch, params: &ModelParameters, mut acc: Accumulators, noise: &BatchNoise) -> GradientSet {
    let n = enc.n;
    let d = params.dim();
    let frames = params.frames();
    let mut grad_theta = 0.0;
    let mut grad_weight = Matrix::zeros(frames, d);
    let mut grad_frames = vec![vec![vec![0.0; d]; frames]; n];

    if params.text_mass {
        for i in 0..n {
            let grad_s = radius_backward(
                enc.similarity(i),
                &params.radius,
                enc.radius(i),
                &acc.radius[i],
                &mut grad_theta,
                &mut grad_weight,
            );
            for (k, &gs) in grad_s.iter().enumerate() {
                cosine_backward(
                    enc.text(i),
                    &enc.frame_embeddings[i][k],
                    gs,
                    Some(&mut acc.text[i]),
                    Some(&mut grad_frames[i][k]),
                );
            }
        }
    }

    let fusion = &params.fusion;
    let mut fusion_grads = FusionGrads::zeros(d);
    let mut grad_keys = vec![vec![vec![0.0; d]; frames]; n];
    let mut grad_values = vec![vec![vec![0.0; d]; frames]; n];
    for i in 0..n {
        let mut grad_query = vec![0.0; d];
        for j in 0..n {
            let cell = i * n + j;
            let mask = noise.dropout.as_ref().map(|m| m[cell].as_slice());
            let gq = enc.fused[cell].backward(
                fusion,
                &enc.queries[i],
                &enc.prepared[j],
                mask,
                &acc.video[cell],
                &mut fusion_grads,
                &mut grad_keys[j],
                &mut grad_values[j],
            );
            add(&mut grad_query, &gq);
        }
        fusion_grads.query_map.add_outer(1.0, &grad_query, enc.text(i));
        add(&mut acc.text[i], &fusion.query_map.matvec_t(&grad_query));
    }
    for j in 0..n {
        for k in 0..frames {
            let f = &enc.frame_embeddings[j][k];
            fusion_grads.key_map.add_outer(1.0, &grad_keys[j][k], f);
            fusion_grads.value_map.add_outer(1.0, &grad_values[j][k], f);
            add(&mut grad_frames[j][k], &fusion.key_map.matvec_t(&grad_keys[j][k]));
            add(&mut grad_frames[j][k], &fusion.value_map.matvec_t(&grad_values[j][k]));
        }
    }

    let mut grad_text_adapter = Matrix::zeros(d, d);
    let mut grad_frame_adapter = Matrix::zeros(d, d);
    if params.encoders.adapters_enabled {
        for i in 0..n {
            enc.texts[i].backward(&acc.text[i], &mut grad_text_adapter);
        }
        for j in 0..n {
            for k in 0..frames {
                enc.frames[j][k].backward(&grad_frames[j][k], &mut grad_frame_adapter);
            }
        }
    }
    let grad_log_lambda = acc.lambda * params.logit_scale.jacobian();

    let entries = params
        .trainable()
        .into_iter()
        .map(|p| {
            let g = match p {
                ParamName::TextAdapter => grad_text_adapter.as_slice().to_vec(),
                ParamName::FrameAdapter => grad_frame_adapter.as_slice().to_vec(),
                ParamName::QueryMap => fusion_grads.query_map.as_slice().to_vec(),
                ParamName::KeyMap => fusion_grads.key_map.as_slice().to_vec(),
                ParamName::ValueMap => fusion_grads.value_map.as_slice().to_vec(),
                ParamName::OutputMap => fusion_grads.output_map.as_slice().to_vec(),
                ParamName::RadiusTheta => vec![grad_theta],
                ParamName::RadiusWeight => grad_weight.as_slice().to_vec(),
                ParamName::LogLogitScale => vec![grad_log_lambda],
            };
            (p, g)
        })
        .collect();
    GradientSet::from_entries(entries)
}

/// Tolerances for comparing analytic and central-difference gradients.
pub const GRADCHECK_RELATIVE_TOLERANCE: f64 = 1e-4;
pub const GRADCHECK_ABSOLUTE_TOLERANCE: f64 = 1e-6;
/// Below this magnitude only the absolute tolerance applies.
pub const GRADCHECK_SMALL_GRADIENT: f64 = 1e-3;
/// Central-difference step used by the gradient suite.
pub const GRADCHECK_STEP: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub checked: usize,
    pub failures: usize,
    /// Largest relative error among coordinates with magnitude ≥ 1e-3.
    pub max_relative_error: f64,
    /// Largest absolute error among the small coordinates.
    pub max_absolute_error: f64,
    /// Parameter and flat index of the worst failing coordinate, if any.
    pub worst: Option<(ParamName, usize)>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Compares [`backward`] against central differences of `l_total` over every
/// trainable coordinate. Dropout is forced off so the loss is deterministic.
pub fn gradcheck(
    batch: &PairBatch,
    params: &ModelParameters,
    objective: Objective,
    alpha: f64,
    noise: &BatchNoise,
    h: f64,
) -> Result<GradcheckReport> {
    let noise = BatchNoise {
        eps: noise.eps.clone(),
        dropout: None,
    };
    let (_, grads) = backward(batch, params, objective, alpha, &noise)?;
    grads.check_layout(params)?;
    let analytic = grads.flatten();
    let mut probe = params.clone();
    let numeric = crate::math::finite_diff_gradient(
        |x| {
            probe.set_flat_trainable(x).expect("layout checked");
            run(batch, &probe, objective, alpha, &noise, false).map_or(f64::NAN, |(l, _)| l.l_total)
        },
        &params.flatten_trainable(),
        h,
    )?;

    let mut owners = Vec::with_capacity(analytic.len());
    for (name, g) in grads.iter() {
        owners.extend((0..g.len()).map(|k| (name, k)));
    }
    let mut report = GradcheckReport {
        checked: analytic.len(),
        failures: 0,
        max_relative_error: 0.0,
        max_absolute_error: 0.0,
        worst: None,
    };
    let mut worst_excess = 0.0;
    for ((a, n), owner) in analytic.iter().zip(&numeric).zip(owners) {
        let diff = (a - n).abs();
        let scale = a.abs().max(n.abs());
        let excess = if scale < GRADCHECK_SMALL_GRADIENT {
            report.max_absolute_error = report.max_absolute_error.max(diff);
            diff / GRADCHECK_ABSOLUTE_TOLERANCE
        } else {
            let rel = diff / scale;
            report.max_relative_error = report.max_relative_error.max(rel);
            rel / GRADCHECK_RELATIVE_TOLERANCE
        };
        if excess > 1.0 {
            report.failures += 1;
            if excess > worst_excess {
                worst_excess = excess;
                report.worst = Some(owner);
            }
        }
    }
    Ok(report)
}

/// A random batch and a model pushed away from its initialization, for
/// gradient checks. Dropout is off; the noise holds one draw per text.
pub fn gradcheck_instance(
    seed: u64,
    n: usize,
    dim: usize,
    concepts: usize,
    frames: usize,
    variant: crate::text_mass::RadiusVariant,
) -> (PairBatch, ModelParameters, BatchNoise) {
    let spec = crate::model::ModelSpec {
        dim,
        concepts,
        frames,
        variant,
        text_mass: true,
        adapters: true,
        dropout: 0.0,
        tower_mismatch: 0.3,
        log_logit_scale: 1.5,
        frozen_theta: None,
    };
    let mut params = ModelParameters::init(&spec, seed).expect("valid gradcheck spec");
    let mut rng = SeededRng::new(seed, 77);
    for p in params.trainable() {
        for x in params.get_mut(p) {
            *x += 0.3 * rng.gaussian_pair().0;
        }
    }
    params.radius.theta = 0.5 + rng.uniform();
    let mut feat = |len: usize| {
        let mut v = vec![0.0; len];
        rng.fill_gaussian(&mut v);
        v
    };
    let texts = (0..n).map(|i| RawText { id: i as u64, features: feat(concepts) }).collect();
    let videos = (0..n)
        .map(|i| RawVideo {
            id: i as u64,
            frames: (0..frames).map(|_| feat(concepts)).collect(),
        })
        .collect();
    let batch = PairBatch::new(texts, videos).expect("non-empty batch");
    let noise = BatchNoise::draw(&params, n, 1, false, &mut SeededRng::new(seed, 3));
    (batch, params, noise)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pair_loss_is_zero() {
        let sims = Matrix::from_vec(1, 1, vec![0.37]).unwrap();
        let (a, b, c) = symmetric_ce(&sims, &LogitScale::fixed(1.0)).unwrap();
        assert_eq!((a, b, c), (0.0, 0.0, 0.0));
    }

    #[test]
    fn perfect_two_by_two() {
        let sims = Matrix::identity(2);
        let (_, _, l) = symmetric_ce(&sims, &LogitScale::fixed(1.0)).unwrap();
        assert!((l - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-6);
        assert!((l - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_matrices() {
        let nonsquare = Matrix::zeros(2, 3);
        assert!(symmetric_ce(&nonsquare, &LogitScale::default()).is_err());
        let nan = Matrix::from_vec(1, 1, vec![f64::NAN]).unwrap();
        assert!(symmetric_ce(&nan, &LogitScale::default()).is_err());
    }

    #[test]
    fn ce_gradient_matches_finite_difference() {
        let mut rng = SeededRng::new(5, 5);
        let sims = Matrix::gaussian(4, 4, 0.5, &mut rng);
        let lambda = 3.0;
        let out = symmetric_ce_full(&sims, lambda);
        let fd = crate::math::finite_diff_gradient(
            |x| symmetric_ce_full(&Matrix::from_vec(4, 4, x.to_vec()).unwrap(), lambda).l_ce,
            sims.as_slice(),
            1e-5,
        )
        .unwrap();
        for (a, b) in out.grad.as_slice().iter().zip(&fd) {
            assert!((a - b).abs() < 1e-8);
        }
        let fdl = crate::math::finite_diff_gradient(|x| symmetric_ce_full(&sims, x[0]).l_ce, &[lambda], 1e-5).unwrap();
        assert!((out.grad_lambda - fdl[0]).abs() < 1e-8);
    }

    #[test]
    fn objective_names_round_trip() {
        for o in [Objective::TMass, Objective::Baseline, Objective::CePlusS] {
            assert_eq!(o.as_str().parse::<Objective>().unwrap(), o);
        }
        assert!("xpool".parse::<Objective>().is_err());
    }

    use crate::text_mass::RadiusVariant;
    use proptest::prelude::*;

    fn noise_for(params: &ModelParameters, n: usize, seed: u64) -> BatchNoise {
        BatchNoise::draw(params, n, 1, false, &mut SeededRng::new(seed, 3))
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut seed = 0;
        for variant in RadiusVariant::ALL {
            for (objective, alpha) in [
                (Objective::TMass, 0.0),
                (Objective::TMass, 1.2),
                (Objective::Baseline, 1.2),
                (Objective::CePlusS, 0.0),
            ] {
                seed += 1;
                let (batch, params, _) = gradcheck_instance(seed, 3, 6, 5, 3, variant);
                let noise = noise_for(&params, 3, seed);
                let report = gradcheck(&batch, &params, objective, alpha, &noise, 1e-4).unwrap();
                assert!(report.passed(), "{variant} {objective} {alpha}: {report:?}");
            }
        }
    }

    #[test]
    fn baseline_model_gradients_match() {
        let (batch, mut params, _) = gradcheck_instance(9, 3, 6, 5, 3, RadiusVariant::Scalar);
        params.text_mass = false;
        let noise = noise_for(&params, 3, 9);
        let report = gradcheck(&batch, &params, Objective::Baseline, 0.0, &noise, 1e-4).unwrap();
        assert!(report.passed(), "{report:?}");
        assert!(!params.trainable().contains(&ParamName::RadiusTheta));
    }

    #[test]
    fn stochastic_loss_matches_substitution() {
        let (batch, params, _) = gradcheck_instance(4, 4, 6, 5, 3, RadiusVariant::Linear);
        let noise = noise_for(&params, 4, 4);
        let enc = encode_batch(&params, &batch, &noise).unwrap();
        let sims = Matrix::from_fn(4, 4, |i, j| {
            let ts: Vec<f64> = (0..6).map(|k| enc.text(i)[k] + enc.radius(i)[k] * noise.eps[0][i][k]).collect();
            crate::math::cosine_similarity(&ts, enc.video(i, j)).unwrap()
        });
        let (_, _, expected) = symmetric_ce(&sims, &params.logit_scale).unwrap();
        let got = stochastic_loss(&batch, &params, &noise).unwrap();
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn zero_radius_collapses_to_ce() {
        let (batch, mut params, _) = gradcheck_instance(5, 4, 6, 5, 3, RadiusVariant::Scalar);
        params.text_mass = false;
        let noise = noise_for(&params, 4, 5);
        let loss = total_loss(&batch, &params, 1.2, &noise).unwrap();
        assert!((loss.l_s - loss.l_ce).abs() < 1e-6);
    }

    #[test]
    fn single_pair_losses_are_zero() {
        let (batch, params, _) = gradcheck_instance(6, 1, 6, 5, 3, RadiusVariant::FixedMean);
        let noise = noise_for(&params, 1, 6);
        let loss = total_loss(&batch, &params, 1.2, &noise).unwrap();
        assert_eq!(loss.l_s, 0.0);
        assert_eq!(loss.l_sup, 0.0);
    }

    #[test]
    fn support_loss_matches_substitution_and_is_deterministic() {
        let (batch, params, _) = gradcheck_instance(7, 4, 6, 5, 3, RadiusVariant::Scalar);
        let noise = BatchNoise::zeros(4, 6);
        let enc = encode_batch(&params, &batch, &noise).unwrap();
        let sups: Vec<Vec<f64>> = (0..4)
            .map(|i| {
                let r = crate::text_mass::RadiusVector::new(enc.radius(i).to_vec()).unwrap();
                crate::text_mass::support_text(enc.text(i), enc.video(i, i), &r).unwrap()
            })
            .collect();
        let sims = Matrix::from_fn(4, 4, |i, j| crate::math::cosine_similarity(&sups[i], enc.video(i, j)).unwrap());
        let (_, _, expected) = symmetric_ce(&sims, &params.logit_scale).unwrap();
        let a = support_loss(&batch, &params).unwrap();
        let b = support_loss(&batch, &params).unwrap();
        assert!((a - expected).abs() < 1e-12);
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn total_is_compositional_and_linear_in_alpha() {
        let (batch, params, _) = gradcheck_instance(8, 4, 6, 5, 3, RadiusVariant::Linear);
        let noise = noise_for(&params, 4, 8);
        let zero = total_loss(&batch, &params, 0.0, &noise).unwrap();
        assert_eq!(zero.l_total, zero.l_s);
        let l = total_loss(&batch, &params, 1.2, &noise).unwrap();
        assert!((l.l_total - (l.l_s + 1.2 * l.l_sup)).abs() < 1e-15);
        assert!((l.l_ce - 0.5 * (l.l_t2v + l.l_v2t)).abs() < 1e-15);
        let s = stochastic_loss(&batch, &params, &noise).unwrap();
        let sup = support_loss(&batch, &params).unwrap();
        assert!((l.l_total - (s + 1.2 * sup)).abs() < 1e-12);
        let hi = total_loss(&batch, &params, 2.0, &noise).unwrap();
        assert!((hi.l_total - l.l_total - 0.8 * l.l_sup).abs() < 1e-12);

        let g = |a: f64| backward(&batch, &params, Objective::TMass, a, &noise).unwrap().1.flatten();
        let (g0, g1, g2) = (g(0.0), g(1.0), g(2.0));
        for ((a, b), c) in g0.iter().zip(&g1).zip(&g2) {
            assert!((c - a - 2.0 * (b - a)).abs() < 1e-10);
        }
    }

    #[test]
    fn frozen_projections_get_no_gradient() {
        let (batch, params, _) = gradcheck_instance(10, 3, 6, 5, 3, RadiusVariant::FixedMean);
        let noise = noise_for(&params, 3, 10);
        let (_, grads) = backward(&batch, &params, Objective::TMass, 1.2, &noise).unwrap();
        let names: Vec<&str> = grads.names().map(ParamName::as_str).collect();
        assert!(names.iter().all(|n| !n.contains("projection")));
        assert!(grads.get(ParamName::RadiusTheta).is_none());
        grads.check_layout(&params).unwrap();
    }

    #[test]
    fn perfect_matrix_loss_decreases_in_lambda() {
        let sims = Matrix::identity(4);
        let losses: Vec<f64> = [1.0, 5.0, 20.0]
            .iter()
            .map(|&l| symmetric_ce(&sims, &LogitScale::fixed(l)).unwrap().2)
            .collect();
        assert!(losses[0] > losses[1] && losses[1] > losses[2]);
        assert!(losses[2] < 1e-7);
    }

    #[test]
    fn matches_naive_oracle() {
        let mut rng = SeededRng::new(11, 0);
        let sims = Matrix::gaussian(4, 4, 1.0, &mut rng);
        let lambda = 2.5;
        let mut t2v = 0.0;
        let mut v2t = 0.0;
        for i in 0..4 {
            let mut row = 0.0;
            let mut col = 0.0;
            for j in 0..4 {
                row += (sims.get(i, j) * lambda).exp();
                col += (sims.get(j, i) * lambda).exp();
            }
            t2v -= ((sims.get(i, i) * lambda).exp() / row).ln() / 4.0;
            v2t -= ((sims.get(i, i) * lambda).exp() / col).ln() / 4.0;
        }
        let (a, b, c) = symmetric_ce(&sims, &LogitScale::fixed(lambda)).unwrap();
        assert!((a - t2v).abs() < 1e-10 && (b - v2t).abs() < 1e-10);
        assert!((c - 0.5 * (t2v + v2t)).abs() < 1e-10);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn losses_are_permutation_invariant(seed in 0u64..1000, shift in 1usize..4) {
            let (batch, params, _) = gradcheck_instance(seed, 4, 6, 5, 3, RadiusVariant::Linear);
            let noise = noise_for(&params, 4, seed);
            let perm: Vec<usize> = (0..4).map(|i| (i + shift) % 4).collect();
            let permuted = PairBatch::new(
                perm.iter().map(|&i| batch.texts[i].clone()).collect(),
                perm.iter().map(|&i| batch.videos[i].clone()).collect(),
            ).unwrap();
            let permuted_noise = BatchNoise {
                eps: vec![perm.iter().map(|&i| noise.eps[0][i].clone()).collect()],
                dropout: None,
            };
            let a = total_loss(&batch, &params, 1.2, &noise).unwrap();
            let b = total_loss(&permuted, &params, 1.2, &permuted_noise).unwrap();
            prop_assert!((a.l_ce - b.l_ce).abs() < 1e-10);
            prop_assert!((a.l_s - b.l_s).abs() < 1e-10);
            prop_assert!((a.l_sup - b.l_sup).abs() < 1e-10);
        }

        #[test]
        fn lambda_never_changes_row_argmax(seed in 0u64..1000, lambda in 0.1f64..100.0) {
            let sims = Matrix::gaussian(5, 5, 1.0, &mut SeededRng::new(seed, 0));
            // the matrix itself is λ-free; softmax rows keep the same argmax
            for i in 0..5 {
                let p = crate::math::softmax(sims.row(i), lambda).unwrap();
                let am = |v: &[f64]| (0..v.len()).fold(0, |b, k| if v[k] > v[b] { k } else { b });
                prop_assert_eq!(am(&p), am(sims.row(i)));
            }
        }
    }
}
