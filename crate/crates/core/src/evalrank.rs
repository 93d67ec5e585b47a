//! Database ranking and retrieval evaluation.
//!
//! Per-target scores are forward log-likelihoods (or Viterbi, optionally
//! with branch-and-bound pruning against the current top-k floor),
//! maximized over all start alignments. Rank statistics use the worst-case
//! tie rule: the correct target counts below every target with an equal
//! score.

use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{QuantizationConfig, QuantizedEvent};
use crate::lattice::{
    forward_log_likelihood_pre, viterbi_score_bounded_pre, EmissionTables, ScoringContext,
    Workspace,
};
use crate::model::{build_target_model, ErrorModelParams, TargetModel};

/// How targets are scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScoreMethod {
    /// Sum over all paths; the probabilistically complete score.
    Forward,
    /// Most likely single path; enables branch-and-bound pruning.
    Viterbi { prune: bool },
}

/// Which start alignments contribute to a target's score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AlignmentPolicy {
    /// Maximum over every start position.
    Max,
    /// Only the first position; ablation hook.
    First,
}

#[derive(Debug, Clone, Copy)]
pub struct RankOptions {
    pub k: usize,
    pub method: ScoreMethod,
    pub alignment: AlignmentPolicy,
}

impl Default for RankOptions {
    fn default() -> Self {
        Self { k: 10, method: ScoreMethod::Forward, alignment: AlignmentPolicy::Max }
    }
}

/// One ranked entry of the output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankEntry {
    pub target_id: usize,
    pub log_likelihood: f64,
    pub rank: usize,
}

/// Ranking outcome for one query.
#[derive(Debug, Clone)]
pub struct RankedResult {
    /// Top-k entries, sorted by score descending (ties by target id).
    /// Every entry's rank is worst-case: one plus the number of targets
    /// scoring at least as high.
    pub entries: Vec<RankEntry>,
    /// Scores for all targets, in database order; absent under pruning
    /// (pruned targets have no exact score).
    pub all_scores: Option<Vec<f64>>,
    /// True when no target could generate the query at all.
    pub unscorable: bool,
    /// Wall time spent scoring this query.
    pub elapsed: std::time::Duration,
}

/// A database with prebuilt per-target models.
pub struct Database {
    pub targets: Vec<Vec<QuantizedEvent>>,
    pub models: Vec<TargetModel>,
}

impl Database {
    pub fn build(
        targets: Vec<Vec<QuantizedEvent>>,
        l_max: usize,
        m_max: usize,
        cfg: QuantizationConfig,
    ) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::EmptyDatabase);
        }
        let models = targets
            .iter()
            .map(|t| build_target_model(t, l_max, m_max, cfg, 0))
            .collect::<Result<_>>()?;
        Ok(Self { targets, models })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

fn starts(model: &TargetModel, alignment: AlignmentPolicy) -> std::ops::Range<usize> {
    match alignment {
        AlignmentPolicy::Max => 0..model.target_len(),
        AlignmentPolicy::First => 0..1,
    }
}

/// Monotone shared floor tracking the k-th best score seen so far. A stale
/// (lower) floor only prunes less, so readers need no synchronization
/// beyond the lock here.
struct TopKFloor {
    k: usize,
    scores: Vec<f64>,
}

impl TopKFloor {
    fn new(k: usize) -> Mutex<Self> {
        Mutex::new(Self { k, scores: Vec::new() })
    }

    fn insert(&mut self, s: f64) {
        if s == f64::NEG_INFINITY {
            return;
        }
        let pos = self.scores.partition_point(|&x| x > s);
        self.scores.insert(pos, s);
        self.scores.truncate(self.k);
    }

    fn floor(&self) -> f64 {
        if self.scores.len() == self.k {
            *self.scores.last().unwrap()
        } else {
            f64::NEG_INFINITY
        }
    }
}

/// Score every target against a query and return the worst-case-ranked
/// top-k. Scores maximize over start alignments per the policy.
pub fn rank_database(
    params: &ErrorModelParams,
    db: &Database,
    query: &[QuantizedEvent],
    options: &RankOptions,
) -> Result<RankedResult> {
    if db.is_empty() {
        return Err(Error::EmptyDatabase);
    }
    if query.is_empty() {
        return Err(Error::EmptySequence);
    }
    let started = std::time::Instant::now();
    let prune = matches!(options.method, ScoreMethod::Viterbi { prune: true });
    let floor = TopKFloor::new(options.k.max(1));
    let scores: Vec<Option<f64>> = db
        .models
        .par_iter()
        .map_init(Workspace::new, |ws, model| {
            let ctx = ScoringContext::new(model, params).expect("validated params");
            let qlat = match ctx.prepare_query(query) {
                Ok(q) => q,
                Err(_) => return None,
            };
            let emis = match options.method {
                ScoreMethod::Forward => EmissionTables::linear(&ctx, &qlat),
                ScoreMethod::Viterbi { .. } => EmissionTables::log(&ctx, &qlat),
            };
            let mut best = f64::NEG_INFINITY;
            let current_floor =
                if prune { floor.lock().unwrap().floor() } else { f64::NEG_INFINITY };
            for start in starts(model, options.alignment) {
                let s = match options.method {
                    ScoreMethod::Forward => {
                        Some(forward_log_likelihood_pre(&ctx, &qlat, &emis, start, ws))
                    }
                    ScoreMethod::Viterbi { .. } => {
                        // Within one target, the floor may also rise to the
                        // target's own running best: only the maximum over
                        // starts is reported.
                        let f = if prune { current_floor.max(best) } else { f64::NEG_INFINITY };
                        viterbi_score_bounded_pre(&ctx, &qlat, &emis, start, f, ws)
                    }
                };
                if let Some(s) = s {
                    best = best.max(s);
                }
            }
            if prune {
                if best > f64::NEG_INFINITY {
                    floor.lock().unwrap().insert(best);
                }
                if best == f64::NEG_INFINITY {
                    return None;
                }
            }
            Some(best)
        })
        .collect();

    let mut candidates: Vec<(usize, f64)> = scores
        .iter()
        .enumerate()
        .filter_map(|(id, s)| s.map(|v| (id, v)))
        .collect();
    candidates.sort_by(|a, b| {
        b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0))
    });
    let entries: Vec<RankEntry> = candidates
        .iter()
        .take(options.k)
        .map(|&(id, s)| RankEntry {
            target_id: id,
            log_likelihood: s,
            rank: 1 + candidates.iter().filter(|&&(j, v)| j != id && v >= s).count(),
        })
        .collect();
    let unscorable =
        candidates.iter().all(|&(_, s)| s == f64::NEG_INFINITY) || candidates.is_empty();
    let all_scores = if prune {
        None
    } else {
        Some(scores.iter().map(|s| s.unwrap_or(f64::NEG_INFINITY)).collect())
    };
    Ok(RankedResult { entries, all_scores, unscorable, elapsed: started.elapsed() })
}

/// Worst-case rank of the correct target within a full score vector: one
/// plus the number of other targets scoring at least as high. With an
/// unscorable query (all scores negative infinity) this is the database
/// size.
pub fn worst_case_rank(scores: &[f64], correct: usize) -> usize {
    let c = scores[correct];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| j != correct && s >= c)
        .count()
}

/// Mean reciprocal rank of a set of correct-target ranks.
pub fn mrr(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::EmptySequence);
    }
    Ok(ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len() as f64)
}

pub fn median_rank(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::EmptySequence);
    }
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    Ok(if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
    })
}

pub fn mean_rank(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::EmptySequence);
    }
    Ok(ranks.iter().sum::<usize>() as f64 / ranks.len() as f64)
}

/// A receiver operating characteristic curve: (false positive rate, true
/// positive rate) points, monotone in both coordinates from (0,0) to (1,1).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<(f64, f64)>,
}

impl RocCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("fpr,tpr\n");
        for &(f, t) in &self.points {
            out.push_str(&format!("{f},{t}\n"));
        }
        out
    }
}

/// ROC from pooled positive (correct-target) and negative (all other)
/// scores, by sweeping a threshold over the pooled score set.
pub fn roc(positives: &[f64], negatives: &[f64]) -> Result<RocCurve> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::InvalidInput("need at least one positive and one negative".into()));
    }
    let mut thresholds: Vec<f64> =
        positives.iter().chain(negatives).cloned().filter(|s| s.is_finite()).collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut points = vec![(0.0, 0.0)];
    for &th in &thresholds {
        let tp = positives.iter().filter(|&&s| s >= th).count() as f64;
        let fp = negatives.iter().filter(|&&s| s >= th).count() as f64;
        points.push((fp / negatives.len() as f64, tp / positives.len() as f64));
    }
    points.push((1.0, 1.0));
    points.dedup_by(|a, b| a == b);
    Ok(RocCurve { points })
}

/// Differential entropy of a normal distribution with the given variance,
/// in nats.
pub fn gaussian_differential_entropy(variance: f64) -> Result<f64> {
    if !(variance > 0.0) {
        return Err(Error::InvalidParameter(format!("variance {variance} must be > 0")));
    }
    Ok(0.5 * ((2.0 * std::f64::consts::PI * variance).ln() + 1.0))
}

/// Entropy of a discrete distribution in nats, with `0 log 0 = 0`.
pub fn discrete_entropy(dist: &[f64]) -> Result<f64> {
    let sum: f64 = dist.iter().sum();
    if dist.is_empty() || dist.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidDistribution { name: "entropy input".into(), sum });
    }
    Ok(dist.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum())
}

/// Explicit convolution of two discrete distributions (the distribution of
/// a sum of independent variables).
pub fn convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, &x) in a.iter().enumerate() {
        for (j, &y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

/// Mean and variance of a distribution over integer support starting at
/// `min`.
pub fn distribution_moments(dist: &[f64], min: i32) -> (f64, f64) {
    let mean: f64 = dist.iter().enumerate().map(|(i, &p)| (min + i as i32) as f64 * p).sum();
    let var: f64 = dist
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let d = (min + i as i32) as f64 - mean;
            d * d * p
        })
        .sum();
    (mean, var)
}

/// Aggregate retrieval metrics, serialized by the evaluation command.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub mrr: f64,
    pub median_rank: f64,
    pub mean_rank: f64,
    pub queries: usize,
    pub roc: Vec<(f64, f64)>,
}

/// Compute the full metric set from per-query ranks plus pooled scores.
pub fn evaluate(
    ranks: &[usize],
    positives: &[f64],
    negatives: &[f64],
) -> Result<EvalMetrics> {
    Ok(EvalMetrics {
        mrr: mrr(ranks)?,
        median_rank: median_rank(ranks)?,
        mean_rank: mean_rank(ranks)?,
        queries: ranks.len(),
        roc: roc(positives, negatives)?.points,
    })
}
