//! Retrieval metrics with best-of-M inference, and the diagnostic reports.

use std::fmt;

use rayon::prelude::*;

use crate::dataset::PairRecord;
use crate::encoders::{encode_frames, encode_text, PreparedFrames, RawText, RawVideo};
use crate::error::{ensure, Result};
use crate::math::{cosine, EmbeddingVector, Matrix, SeededRng};
use crate::model::ModelParameters;
use crate::text_mass::{best_similarity, radius_unchecked, similarities, SamplingConfig};

/// Stream tag for inference-time sampling.
pub const INFERENCE_STREAM: u64 = 0x494E_4645;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    TextToVideo,
    VideoToText,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::TextToVideo => "t2v",
            Direction::VideoToText => "v2t",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrievalMetrics {
    pub direction: Direction,
    /// Percentages in [0, 100].
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub mdr: f64,
    pub mnr: f64,
}

/// 1-based rank of the relevant candidate per query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankVector(pub Vec<usize>);

pub fn fmt6(x: f64) -> String {
    format!("{x:.6}")
}

pub const METRICS_HEADER: &str = "direction,r1,r5,r10,mdr,mnr";

impl RetrievalMetrics {
    pub fn csv_fields(&self) -> String {
        [self.r1, self.r5, self.r10, self.mdr, self.mnr]
            .map(fmt6)
            .join(",")
    }
}

pub fn metrics_csv(rows: &[RetrievalMetrics]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for m in rows {
        out.push_str(&format!("{},{}\n", m.direction, m.csv_fields()));
    }
    out
}

/// Ranks each row's relevant column. Ties with a lower column index count
/// against the relevant candidate, ties with a higher one do not.
pub fn rank_metrics(sims: &Matrix, relevant: &[usize], direction: Direction) -> Result<(RankVector, RetrievalMetrics)> {
    ensure(sims.rows() == relevant.len() && !relevant.is_empty(), || {
        format!("{} queries but {} relevant indices", sims.rows(), relevant.len())
    })?;
    let ranks = relevant
        .iter()
        .enumerate()
        .map(|(q, &rel)| {
            ensure(rel < sims.cols(), || {
                format!("relevant index {rel} out of range for {} candidates", sims.cols())
            })?;
            let row = sims.row(q);
            let target = row[rel];
            let ahead = row
                .iter()
                .enumerate()
                .filter(|&(c, &s)| s > target || (s == target && c < rel))
                .count();
            Ok(1 + ahead)
        })
        .collect::<Result<Vec<_>>>()?;
    let q = ranks.len() as f64;
    let recall = |k: usize| 100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / q;
    let mut sorted = ranks.clone();
    sorted.sort_unstable();
    let mid = sorted.len() / 2;
    let mdr = if sorted.len() % 2 == 1 {
        sorted[mid] as f64
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid]) as f64
    };
    let metrics = RetrievalMetrics {
        direction,
        r1: recall(1),
        r5: recall(5),
        r10: recall(10),
        mdr,
        mnr: ranks.iter().sum::<usize>() as f64 / q,
    };
    Ok((RankVector(ranks), metrics))
}

/// Video queries against text candidates: column j of `sims` (text rows,
/// video columns) ranked with `relevant[j]` as the matching text.
pub fn video_to_text_metrics(sims: &Matrix, relevant: &[usize]) -> Result<(RankVector, RetrievalMetrics)> {
    let transposed = Matrix::from_fn(sims.cols(), sims.rows(), |j, i| sims.get(i, j));
    rank_metrics(&transposed, relevant, Direction::VideoToText)
}

/// Encoded queries and candidates shared by every inference routine.
struct Pool {
    text_ids: Vec<u64>,
    video_ids: Vec<u64>,
    texts: Vec<EmbeddingVector>,
    queries: Vec<Vec<f64>>,
    frames: Vec<Vec<EmbeddingVector>>,
    prepared: Vec<PreparedFrames>,
}

/// One (query, candidate) cell.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Cell {
    deterministic: f64,
    sampled: f64,
    l1_radius: f64,
}

impl Pool {
    fn new(texts: &[RawText], videos: &[RawVideo], params: &ModelParameters) -> Result<Self> {
        ensure(!texts.is_empty() && !videos.is_empty(), || "empty query or candidate pool".into())?;
        let stack = &params.encoders;
        let encoded_texts = texts
            .iter()
            .map(|t| encode_text(t, stack))
            .collect::<Result<Vec<_>>>()?;
        let frames = videos
            .iter()
            .map(|v| encode_frames(v, params.frames(), stack).map(|f| f.frames))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            text_ids: texts.iter().map(|t| t.id).collect(),
            video_ids: videos.iter().map(|v| v.id).collect(),
            queries: encoded_texts.iter().map(|t| params.fusion.query_map.matvec(t)).collect(),
            prepared: frames.iter().map(|f| params.fusion.prepare(f)).collect(),
            texts: encoded_texts,
            frames,
        })
    }

    /// Evaluation-mode fusion, the pair-conditioned radius and the best-of-M
    /// similarity drawn from the `(seed, query id, candidate id)` substream.
    fn cell(&self, q: usize, c: usize, params: &ModelParameters, trials: Option<usize>, seed: u64) -> Result<Cell> {
        let trace = params.fusion.fuse_prepared(&self.queries[q], &self.prepared[c], None);
        ensure(trace.out_norm > 0.0, || format!("fused video for query {q}, candidate {c} has zero norm"))?;
        let t = &self.texts[q];
        let deterministic = cosine(t, &trace.video);
        if !params.text_mass {
            return Ok(Cell {
                deterministic,
                sampled: deterministic,
                l1_radius: 0.0,
            });
        }
        let r = radius_unchecked(&similarities(t, &self.frames[c]), &params.radius);
        let sampled = match trials {
            Some(m) => {
                let mut rng = SeededRng::keyed(seed, &[INFERENCE_STREAM, self.text_ids[q], self.video_ids[c]]);
                best_similarity(t, &r, &trace.video, m, &mut rng, &mut vec![0.0; t.len()])
            }
            None => deterministic,
        };
        Ok(Cell {
            deterministic,
            sampled,
            l1_radius: r.iter().sum(),
        })
    }

    fn grid(&self, params: &ModelParameters, trials: Option<usize>, seed: u64) -> Result<Vec<Vec<Cell>>> {
        (0..self.texts.len())
            .into_par_iter()
            .map(|q| {
                (0..self.frames.len())
                    .map(|c| self.cell(q, c, params, trials, seed))
                    .collect()
            })
            .collect()
    }
}

/// Entry (q, c) is the best-of-M similarity of text q against candidate c
/// when `use_sampling`, else the plain similarity of `t_q` and `v_qc`.
pub fn inference_similarity_matrix(
    texts: &[RawText],
    videos: &[RawVideo],
    params: &ModelParameters,
    cfg: &SamplingConfig,
    use_sampling: bool,
    seed: u64,
) -> Result<Matrix> {
    ensure(!use_sampling || cfg.trials >= 1, || "sampling needs at least one trial".into())?;
    let pool = Pool::new(texts, videos, params)?;
    let grid = pool.grid(params, use_sampling.then_some(cfg.trials), seed)?;
    Ok(Matrix::from_fn(texts.len(), videos.len(), |q, c| grid[q][c].sampled))
}

/// Both directions on a paired set: pair k's text is relevant to pair k's video.
pub fn evaluate(
    params: &ModelParameters,
    records: &[PairRecord],
    cfg: &SamplingConfig,
    use_sampling: bool,
    seed: u64,
) -> Result<[RetrievalMetrics; 2]> {
    let texts: Vec<RawText> = records.iter().map(|r| r.text.clone()).collect();
    let videos: Vec<RawVideo> = records.iter().map(|r| r.video.clone()).collect();
    let sims = inference_similarity_matrix(&texts, &videos, params, cfg, use_sampling, seed)?;
    let relevant: Vec<usize> = (0..records.len()).collect();
    let (_, t2v) = rank_metrics(&sims, &relevant, Direction::TextToVideo)?;
    let (_, v2t) = video_to_text_metrics(&sims, &relevant)?;
    Ok([t2v, v2t])
}

#[derive(Debug, Clone, PartialEq)]
pub struct RadiusRow {
    pub query_id: u64,
    pub candidate_id: u64,
    pub relevant: bool,
    pub l1_radius: f64,
    pub best_similarity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RadiusReport {
    pub rows: Vec<RadiusRow>,
}

/// Report CSVs print values in shortest round-trip form so readers recover
/// them exactly.
pub const RADIUS_HEADER: &str = "query_id,candidate_id,relevant,l1_radius,best_similarity";

impl RadiusReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{RADIUS_HEADER}\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.query_id,
                r.candidate_id,
                u8::from(r.relevant),
                r.l1_radius,
                r.best_similarity
            ));
        }
        out
    }

    /// Whether the relevant candidate has the strictly smallest |R|₁ for `query_id`.
    pub fn relevant_is_smallest(&self, query_id: u64) -> Option<bool> {
        let rows: Vec<&RadiusRow> = self.rows.iter().filter(|r| r.query_id == query_id).collect();
        let rel = rows.iter().find(|r| r.relevant)?;
        Some(rows.iter().all(|r| r.relevant || r.l1_radius > rel.l1_radius))
    }
}

/// |R|₁ and best-of-M similarity of one query against each candidate.
pub fn radius_dynamics_report(
    query: &RawText,
    candidates: &[RawVideo],
    relevant: usize,
    params: &ModelParameters,
    cfg: &SamplingConfig,
    seed: u64,
) -> Result<RadiusReport> {
    ensure(params.text_mass, || "radius report needs a text-mass model".into())?;
    ensure(relevant < candidates.len(), || format!("relevant index {relevant} out of range"))?;
    ensure(cfg.trials >= 1, || "sampling needs at least one trial".into())?;
    let pool = Pool::new(std::slice::from_ref(query), candidates, params)?;
    let rows = (0..candidates.len())
        .map(|c| {
            let cell = pool.cell(0, c, params, Some(cfg.trials), seed)?;
            Ok(RadiusRow {
                query_id: query.id,
                candidate_id: candidates[c].id,
                relevant: c == relevant,
                l1_radius: cell.l1_radius,
                best_similarity: cell.sampled,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RadiusReport { rows })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentRow {
    pub query_id: u64,
    pub max_irrelevant_sim_det: f64,
    pub max_irrelevant_sim_stoch: f64,
    /// Per-pair text-to-video cross-entropy term of the relevant pair.
    pub ce_det: f64,
    pub ce_stoch: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentReport {
    pub rows: Vec<AlignmentRow>,
}

pub const ALIGNMENT_HEADER: &str = "query_id,max_irrelevant_sim_det,max_irrelevant_sim_stoch,ce_det,ce_stoch";

impl AlignmentReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{ALIGNMENT_HEADER}\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.query_id,
                r.max_irrelevant_sim_det,
                r.max_irrelevant_sim_stoch,
                r.ce_det,
                r.ce_stoch
            ));
        }
        out
    }
}

/// `−log softmax(λ·row)[rel]`.
pub(crate) fn pair_cross_entropy(row: &[f64], rel: usize, lambda: f64) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &s| m.max(lambda * s));
    let lse = max + row.iter().map(|s| (lambda * s - max).exp()).sum::<f64>().ln();
    (lse - lambda * row[rel]).max(0.0)
}

/// Per query of a paired set: the hardest irrelevant similarity and the
/// relevant pair's cross-entropy term, under `t` and under the selected sample.
pub fn alignment_report(records: &[PairRecord], params: &ModelParameters, cfg: &SamplingConfig, seed: u64) -> Result<AlignmentReport> {
    ensure(records.len() >= 2, || "alignment report needs at least two pairs".into())?;
    ensure(cfg.trials >= 1, || "sampling needs at least one trial".into())?;
    let texts: Vec<RawText> = records.iter().map(|r| r.text.clone()).collect();
    let videos: Vec<RawVideo> = records.iter().map(|r| r.video.clone()).collect();
    let pool = Pool::new(&texts, &videos, params)?;
    let grid = pool.grid(params, Some(cfg.trials), seed)?;
    let lambda = params.logit_scale.lambda();
    let rows = grid
        .iter()
        .enumerate()
        .map(|(q, cells)| {
            let det: Vec<f64> = cells.iter().map(|c| c.deterministic).collect();
            let stoch: Vec<f64> = cells.iter().map(|c| c.sampled).collect();
            let max_irrelevant = |row: &[f64]| {
                row.iter()
                    .enumerate()
                    .filter(|&(c, _)| c != q)
                    .fold(f64::NEG_INFINITY, |m, (_, &s)| m.max(s))
            };
            AlignmentRow {
                query_id: records[q].text.id,
                max_irrelevant_sim_det: max_irrelevant(&det),
                max_irrelevant_sim_stoch: max_irrelevant(&stoch),
                ce_det: pair_cross_entropy(&det, q, lambda),
                ce_stoch: pair_cross_entropy(&stoch, q, lambda),
            }
        })
        .collect();
    Ok(AlignmentReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate, SyntheticSpec};
    use crate::encoders::fuse;
    use crate::model::ModelSpec;
    use crate::text_mass::{radius, select_best_sample, RadiusVariant};
    use proptest::prelude::*;

    fn brute_ranks(sims: &Matrix, relevant: &[usize]) -> Vec<usize> {
        (0..sims.rows())
            .map(|q| {
                let mut order: Vec<usize> = (0..sims.cols()).collect();
                // descending score, ascending index on ties
                order.sort_by(|&a, &b| sims.get(q, b).total_cmp(&sims.get(q, a)).then(a.cmp(&b)));
                1 + order.iter().position(|&c| c == relevant[q]).unwrap()
            })
            .collect()
    }

    #[test]
    fn perfect_and_worst() {
        let (_, m) = rank_metrics(&Matrix::identity(5), &[0, 1, 2, 3, 4], Direction::TextToVideo).unwrap();
        assert_eq!((m.r1, m.mdr, m.mnr), (100.0, 1.0, 1.0));
        let anti = Matrix::from_fn(4, 4, |i, j| if i == j { -1.0 } else { 0.5 });
        let (ranks, m) = rank_metrics(&anti, &[0, 1, 2, 3], Direction::TextToVideo).unwrap();
        assert_eq!(ranks.0, vec![4; 4]);
        assert_eq!((m.r1, m.mnr), (0.0, 4.0));
        assert!(rank_metrics(&anti, &[0, 1, 2, 4], Direction::TextToVideo).is_err());
    }

    #[test]
    fn even_median_averages() {
        let sims = Matrix::from_fn(4, 4, |i, j| if j == 0 { 1.0 } else { -(i as f64) - j as f64 });
        let (ranks, m) = rank_metrics(&sims, &[0, 1, 1, 2], Direction::TextToVideo).unwrap();
        assert_eq!(ranks.0, vec![1, 2, 2, 3]);
        assert_eq!(m.mdr, 2.0);
        let (_, m) = rank_metrics(&sims, &[0, 0, 1, 2], Direction::TextToVideo).unwrap();
        assert_eq!(m.mdr, 1.5);
    }

    #[test]
    fn matches_sort_oracle_with_ties() {
        let mut rng = SeededRng::new(1, 1);
        for trial in 0..200 {
            let sims = Matrix::from_fn(16, 16, |_, _| (rng.below(5) as f64) / 4.0);
            let sims = if trial % 2 == 0 { sims } else { Matrix::from_fn(16, 16, |_, _| rng.uniform()) };
            let relevant: Vec<usize> = (0..16).map(|_| rng.below(16)).collect();
            let (ranks, m) = rank_metrics(&sims, &relevant, Direction::TextToVideo).unwrap();
            assert_eq!(ranks.0, brute_ranks(&sims, &relevant));
            assert!(m.r1 <= m.r5 && m.r5 <= m.r10);
        }
    }

    #[test]
    fn video_to_text_is_transposed_ranking() {
        let mut rng = SeededRng::new(2, 2);
        let sims = Matrix::from_fn(6, 6, |_, _| rng.uniform());
        let rel: Vec<usize> = (0..6).collect();
        let (ranks, _) = video_to_text_metrics(&sims, &rel).unwrap();
        let t = Matrix::from_fn(6, 6, |i, j| sims.get(j, i));
        assert_eq!(ranks.0, brute_ranks(&t, &rel));
        let sym = Matrix::identity(3);
        let (_, a) = rank_metrics(&sym, &[0, 1, 2], Direction::TextToVideo).unwrap();
        let (_, b) = video_to_text_metrics(&sym, &[0, 1, 2]).unwrap();
        assert_eq!(a.csv_fields(), b.csv_fields());
        let single = Matrix::from_vec(1, 1, vec![0.2]).unwrap();
        let (_, m) = video_to_text_metrics(&single, &[0]).unwrap();
        assert_eq!((m.r1, m.mdr, m.mnr), (100.0, 1.0, 1.0));
    }

    fn setup(variant: RadiusVariant) -> (Vec<PairRecord>, ModelParameters) {
        let spec = SyntheticSpec {
            pairs: 2,
            test_pairs: 4,
            concepts: 8,
            frames: 4,
            seed: 5,
            ..SyntheticSpec::default()
        };
        let records = generate(&spec).unwrap()[2..].to_vec();
        let model = ModelSpec {
            dim: 12,
            concepts: 8,
            frames: 4,
            variant,
            text_mass: true,
            adapters: true,
            dropout: 0.3,
            tower_mismatch: 0.2,
            log_logit_scale: crate::model::DEFAULT_LOG_LOGIT_SCALE,
            frozen_theta: None,
        };
        let mut params = ModelParameters::init(&model, 5).unwrap();
        let mut rng = SeededRng::new(9, 9);
        params.radius.weight = Matrix::gaussian(4, 12, 0.5, &mut rng);
        params.radius.theta = 0.7;
        params.fusion.query_map = Matrix::gaussian(12, 12, 0.4, &mut rng);
        (records, params)
    }

    fn split(records: &[PairRecord]) -> (Vec<RawText>, Vec<RawVideo>) {
        (
            records.iter().map(|r| r.text.clone()).collect(),
            records.iter().map(|r| r.video.clone()).collect(),
        )
    }

    #[test]
    fn matches_naive_sampling_oracle() {
        let (records, params) = setup(RadiusVariant::Linear);
        let (texts, videos) = split(&records);
        let cfg = SamplingConfig::with_trials(8);
        let fast = inference_similarity_matrix(&texts, &videos, &params, &cfg, true, 11).unwrap();
        for (q, t) in texts.iter().enumerate() {
            let te = encode_text(t, &params.encoders).unwrap();
            for (c, v) in videos.iter().enumerate() {
                let frames = encode_frames(v, 4, &params.encoders).unwrap();
                let ve = fuse(&frames, &te, &params.fusion, false, &mut SeededRng::new(0, 0)).unwrap();
                let r = radius(&crate::text_mass::frame_similarities(&te, &frames).unwrap(), &params.radius).unwrap();
                let mut rng = SeededRng::keyed(11, &[INFERENCE_STREAM, t.id, v.id]);
                let (_, best) = select_best_sample(&te, Some(&r), &ve, &cfg, &mut rng).unwrap();
                assert!((fast.get(q, c) - best).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sampling_is_monotone_in_trials() {
        let (records, params) = setup(RadiusVariant::Scalar);
        let (texts, videos) = split(&records);
        let at = |m| {
            inference_similarity_matrix(&texts, &videos, &params, &SamplingConfig::with_trials(m), true, 3).unwrap()
        };
        let (a, b, c) = (at(5), at(10), at(20));
        for k in 0..a.as_slice().len() {
            assert!(a.as_slice()[k] <= b.as_slice()[k] && b.as_slice()[k] <= c.as_slice()[k]);
        }
        assert_eq!(at(20), c);
    }

    #[test]
    fn collapsed_mass_matches_deterministic() {
        let (records, mut params) = setup(RadiusVariant::Linear);
        params.text_mass = false;
        let (texts, videos) = split(&records);
        let cfg = SamplingConfig::with_trials(1);
        let a = inference_similarity_matrix(&texts, &videos, &params, &cfg, true, 3).unwrap();
        let b = inference_similarity_matrix(&texts, &videos, &params, &cfg, false, 3).unwrap();
        assert_eq!(a, b);
        let report = alignment_report(&records, &params, &cfg, 3).unwrap();
        for r in report.rows {
            assert!((r.max_irrelevant_sim_det - r.max_irrelevant_sim_stoch).abs() < 1e-9);
            assert!((r.ce_det - r.ce_stoch).abs() < 1e-9);
        }
    }

    #[test]
    fn radius_report_examples() {
        let (records, mut params) = setup(RadiusVariant::Linear);
        params.radius.weight = Matrix::zeros(4, 12);
        let (_, videos) = split(&records);
        let cfg = SamplingConfig::with_trials(4);
        let report = radius_dynamics_report(&records[0].text, &videos, 0, &params, &cfg, 1).unwrap();
        assert!(report.rows.iter().all(|r| (r.l1_radius - 12.0).abs() < 1e-12));
        assert_eq!(report.rows.iter().filter(|r| r.relevant).count(), 1);

        params.radius.variant = RadiusVariant::Scalar;
        params.radius.theta = 0.0;
        let report = radius_dynamics_report(&records[1].text, &videos, 1, &params, &cfg, 1).unwrap();
        let first = report.rows[0].l1_radius;
        assert!(report.rows.iter().all(|r| r.l1_radius == first));
        assert!(report.to_csv().starts_with("query_id,candidate_id,relevant,l1_radius,best_similarity\n"));
    }

    #[test]
    fn alignment_ranges() {
        let (records, params) = setup(RadiusVariant::Linear);
        let report = alignment_report(&records, &params, &SamplingConfig::with_trials(6), 2).unwrap();
        assert_eq!(report.rows.len(), 4);
        for r in &report.rows {
            for s in [r.max_irrelevant_sim_det, r.max_irrelevant_sim_stoch] {
                assert!((-1.0..=1.0).contains(&s));
            }
            assert!(r.ce_det >= 0.0 && r.ce_stoch >= 0.0);
        }
    }

    proptest! {
        #[test]
        fn ranks_ignore_monotone_transforms(seed in 0u64..500, a in 0.1f64..5.0, b in -3.0f64..3.0) {
            let mut rng = SeededRng::new(seed, 0);
            let sims = Matrix::from_fn(8, 8, |_, _| rng.uniform());
            let rel: Vec<usize> = (0..8).map(|_| rng.below(8)).collect();
            let warped = Matrix::from_fn(8, 8, |i, j| (a * sims.get(i, j) + b).exp());
            let (r1, _) = rank_metrics(&sims, &rel, Direction::TextToVideo).unwrap();
            let (r2, _) = rank_metrics(&warped, &rel, Direction::TextToVideo).unwrap();
            prop_assert_eq!(r1, r2);
        }
    }
}
