//! Offline ranking metrics, the evaluation harness, and the AOI-level sweep.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::geo::State;
use crate::numerics::ParamStore;
use crate::policy::{top_k_recommend, Model};
use crate::simulator::{generate_environment, simulate_batch, Environment, Episode, UniformLogger};
use crate::training::{init_params, train_em, DataSource, TrainHistory};

/// Probability that a random positive outranks a random negative, ties
/// counting one half, computed from average ranks.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "auc",
            left: vec![scores.len()],
            right: vec![labels.len()],
        });
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("auc score {s}")));
    }
    let n_pos = labels.iter().filter(|&&l| l != 0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Ranks are 1-based; doubled so tied averages stay integral.
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg2 = (i + 1 + j + 1) as u128;
        let pos = order[i..=j].iter().filter(|&&k| labels[k] != 0).count() as u128;
        rank_sum2 += avg2 * pos;
        i = j + 1;
    }
    let (p, q) = (n_pos as u128, n_neg as u128);
    let wins2 = rank_sum2 - p * (p + 1);
    Ok(wins2 as f64 / 2.0 / (p * q) as f64)
}

/// Binary-gain NDCG with log2 discounts; 0 when no positives exist.
pub fn ndcg_at_k(ranked_labels: &[u8], k: usize) -> f64 {
    let dcg: f64 = ranked_labels
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, &l)| l != 0)
        .map(|(i, _)| 1.0 / ((i + 2) as f64).log2())
        .sum();
    let n_pos = ranked_labels.iter().filter(|&&l| l != 0).count();
    let idcg: f64 = (0..n_pos.min(k)).map(|i| 1.0 / ((i + 2) as f64).log2()).sum();
    if idcg == 0.0 {
        0.0
    } else {
        dcg / idcg
    }
}

/// 1 when any positive sits in the top `k`.
pub fn hit_rate_at_k(ranked_labels: &[u8], k: usize) -> f64 {
    if ranked_labels.iter().take(k).any(|&l| l != 0) {
        1.0
    } else {
        0.0
    }
}

/// Scores a candidate set for one logged step.
pub trait Scorer {
    fn score(&self, user_id: u32, state: &State, candidates: &[u32]) -> Result<Vec<f64>>;
}

/// Ranks by the policy logits.
pub struct ModelScorer<'a> {
    pub model: &'a Model,
    pub params: &'a ParamStore,
}

impl Scorer for ModelScorer<'_> {
    fn score(&self, _: u32, state: &State, candidates: &[u32]) -> Result<Vec<f64>> {
        self.model.logits(self.params.values(), state, candidates)
    }
}

/// Ranks by the true click probability; the metric ceiling.
pub struct OracleScorer<'a>(pub &'a Environment);

impl Scorer for OracleScorer<'_> {
    fn score(&self, user_id: u32, _: &State, candidates: &[u32]) -> Result<Vec<f64>> {
        candidates
            .iter()
            .map(|&i| self.0.click_probability(user_id, i))
            .collect()
    }
}

/// Pseudo-random scores that depend only on the seed and the impression.
pub struct RandomScorer {
    pub seed: u64,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

impl Scorer for RandomScorer {
    fn score(&self, user_id: u32, state: &State, candidates: &[u32]) -> Result<Vec<f64>> {
        let ctx = splitmix(
            self.seed
                ^ splitmix(user_id as u64)
                ^ splitmix((state.behavior_seq.len() as u64) << 32 | state.geo.hour as u64),
        );
        Ok(candidates
            .iter()
            .map(|&i| (splitmix(ctx ^ i as u64) >> 11) as f64 / (1u64 << 53) as f64)
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// One held-out test set per seed.
    pub seeds: Vec<u64>,
    pub sessions_per_seed: usize,
    pub ndcg_ks: Vec<usize>,
    pub hit_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seeds: (1001..=1010).collect(),
            sessions_per_seed: 300,
            ndcg_ks: vec![3, 5, 10, 20, 50],
            hit_k: 10,
        }
    }
}

/// Mixed into evaluation seeds so test streams never coincide with training streams.
const EVAL_SALT: u64 = 0xE7A1_5EED_0000_0000;

/// Uniform-logger sessions with every candidate's outcome recorded, one set per seed.
pub fn generate_test_sets(env: &Environment, cfg: &EvalConfig) -> Result<Vec<Vec<Episode>>> {
    cfg.seeds
        .iter()
        .map(|&s| simulate_batch(env, &UniformLogger, s ^ EVAL_SALT, 0, cfg.sessions_per_seed, true))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub name: String,
    pub mean: f64,
    /// Sample standard deviation across evaluation seeds.
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub metrics: Vec<MetricSummary>,
    /// Sessions per test set.
    pub n_sessions: usize,
    /// Scored impressions per test set.
    pub n_impressions: usize,
    pub n_seeds: usize,
    /// AUC pools all impressions of a test set before ranking.
    pub auc_pooling: String,
}

impl MetricsReport {
    pub fn get(&self, name: &str) -> Option<&MetricSummary> {
        self.metrics.iter().find(|m| m.name == name)
    }

    pub fn auc(&self) -> f64 {
        self.get("auc").map_or(f64::NAN, |m| m.mean)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned plain-text table, one metric per row.
    pub fn to_table(&self) -> String {
        let width = self.metrics.iter().map(|m| m.name.len()).max().unwrap_or(6).max(6);
        let mut out = format!("{:<width$}  {:>8}  {:>8}\n", "metric", "mean", "std");
        for m in &self.metrics {
            let _ = writeln!(out, "{:<width$}  {:>8.4}  {:>8.4}", m.name, m.mean, m.std);
        }
        let _ = writeln!(
            out,
            "{} seeds, {} sessions and {} impressions per seed, AUC pooling: {}",
            self.n_seeds, self.n_sessions, self.n_impressions, self.auc_pooling
        );
        out
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Scores every logged step, ranks its candidates, and compares against the
/// recorded outcomes. Ranking metrics average over steps with at least one
/// positive; AUC pools all impressions of a test set.
pub fn offline_eval(
    scorer: &dyn Scorer,
    test_sets: &[Vec<Episode>],
    ndcg_ks: &[usize],
    hit_k: usize,
) -> Result<MetricsReport> {
    if test_sets.is_empty() || test_sets.iter().any(|t| t.is_empty()) {
        return Err(Error::EmptyInput("test set"));
    }
    let n_metrics = 2 + ndcg_ks.len();
    let mut per_seed: Vec<Vec<f64>> = vec![Vec::new(); n_metrics];
    let (mut n_sessions, mut n_impressions) = (0, 0);
    for set in test_sets {
        let (mut scores, mut labels) = (Vec::new(), Vec::new());
        let mut sums = vec![0.0; n_metrics - 1];
        let mut ranked_steps = 0usize;
        for ep in set {
            for step in &ep.steps {
                let step_labels = step
                    .candidate_labels
                    .as_ref()
                    .ok_or(Error::EmptyInput("candidate labels in test session"))?;
                let s = scorer.score(ep.user_id, &step.state, &step.candidate_set)?;
                if s.len() != step_labels.len() {
                    return Err(Error::ShapeMismatch {
                        op: "offline_eval",
                        left: vec![s.len()],
                        right: vec![step_labels.len()],
                    });
                }
                if step_labels.iter().any(|&l| l != 0) {
                    let order = top_k_recommend(&s, s.len())?;
                    let ranked: Vec<u8> = order.iter().map(|&i| step_labels[i]).collect();
                    for (slot, &k) in sums.iter_mut().zip(ndcg_ks) {
                        *slot += ndcg_at_k(&ranked, k);
                    }
                    sums[ndcg_ks.len()] += hit_rate_at_k(&ranked, hit_k);
                    ranked_steps += 1;
                }
                scores.extend(s);
                labels.extend_from_slice(step_labels);
            }
        }
        per_seed[0].push(auc(&scores, &labels)?);
        for (i, s) in sums.iter().enumerate() {
            per_seed[i + 1].push(s / ranked_steps.max(1) as f64);
        }
        n_sessions = set.len();
        n_impressions = labels.len();
    }
    let names = std::iter::once("auc".to_string())
        .chain(ndcg_ks.iter().map(|k| format!("ndcg@{k}")))
        .chain(std::iter::once(format!("hit_rate@{hit_k}")));
    let metrics = names
        .zip(&per_seed)
        .map(|(name, xs)| {
            let (mean, std) = mean_std(xs);
            MetricSummary { name, mean, std }
        })
        .collect();
    Ok(MetricsReport {
        metrics,
        n_sessions,
        n_impressions,
        n_seeds: test_sets.len(),
        auc_pooling: "global".into(),
    })
}

/// Everything a full run produces.
pub struct Experiment {
    pub env: Environment,
    pub model: Model,
    pub init: ParamStore,
    pub params: ParamStore,
    pub history: TrainHistory,
    pub report: MetricsReport,
}

/// Generates the environment, trains on fresh simulated sessions, and evaluates on held-out test sets.
pub fn train_and_evaluate(cfg: &RunConfig) -> Result<Experiment> {
    let env = generate_environment(&cfg.env)?;
    let vocab = env.vocab();
    let sample = env.geo_sample(cfg.train.init_sample, cfg.train.seed);
    let (model, init) = init_params(&cfg.model, &vocab, &sample, cfg.train.seed)?;
    let mut params = init.clone();
    let history = train_em(&DataSource::Simulator(&env), &model, &mut params, &cfg.train)?;
    let tests = generate_test_sets(&env, &cfg.eval)?;
    let report = offline_eval(
        &ModelScorer {
            model: &model,
            params: &params,
        },
        &tests,
        &cfg.eval.ndcg_ks,
        cfg.eval.hit_k,
    )?;
    Ok(Experiment {
        env,
        model,
        init,
        params,
        history,
        report,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub aoi_level: usize,
    pub auc_mean: f64,
    pub auc_std: f64,
}

/// Full train and evaluate per AOI level with everything else held fixed.
pub fn sensitivity_sweep(base: &RunConfig, levels: &[usize]) -> Result<Vec<SweepRow>> {
    if levels.is_empty() {
        return Err(Error::EmptyInput("aoi levels"));
    }
    levels
        .iter()
        .map(|&level| {
            if !(1..=crate::geo::AOI_LEVELS).contains(&level) {
                return Err(Error::InvalidAoiLevel(level));
            }
            let mut cfg = base.clone();
            cfg.model.aoi_level = level;
            let report = train_and_evaluate(&cfg)?.report;
            let m = report.get("auc").ok_or(Error::EmptyInput("auc"))?;
            Ok(SweepRow {
                aoi_level: level,
                auc_mean: m.mean,
                auc_std: m.std,
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Spec(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Spec(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Spec(e.to_string()))
}

/// Level with the highest mean AUC; ties go to the lower level.
pub fn best_level(rows: &[SweepRow]) -> Option<usize> {
    let mut best: Option<&SweepRow> = None;
    for r in rows {
        if best.is_none_or(|b| r.auc_mean > b.auc_mean) {
            best = Some(r);
        }
    }
    best.map(|r| r.aoi_level)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.1], &[1, 0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.9, 0.8, 0.1], &[1, 0, 1]).unwrap(), 0.5);
        assert_eq!(auc(&[0.3; 6], &[1, 0, 0, 1, 0, 0]).unwrap(), 0.5);
        assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(Error::SingleClass)));
        assert!(auc(&[f64::NAN, 0.2], &[1, 0]).is_err());
    }

    #[test]
    fn ndcg_examples() {
        assert_eq!(ndcg_at_k(&[1, 0, 0], 3), 1.0);
        let v = ndcg_at_k(&[0, 1, 0], 3);
        assert!((v - 1.0 / 3f64.log2()).abs() < 1e-15);
        assert!((v - 0.6309).abs() < 1e-4);
        assert_eq!(ndcg_at_k(&[0, 0, 0], 3), 0.0);
    }

    #[test]
    fn hit_rate_boundaries() {
        let mut at10 = vec![0u8; 20];
        at10[9] = 1;
        assert_eq!(hit_rate_at_k(&at10, 10), 1.0);
        let mut at11 = vec![0u8; 20];
        at11[10] = 1;
        assert_eq!(hit_rate_at_k(&at11, 10), 0.0);
    }

    #[test]
    fn table_lists_every_metric() {
        let report = MetricsReport {
            metrics: vec![
                MetricSummary {
                    name: "auc".into(),
                    mean: 0.7,
                    std: 0.01,
                },
                MetricSummary {
                    name: "ndcg@3".into(),
                    mean: 0.4,
                    std: 0.02,
                },
            ],
            n_sessions: 10,
            n_impressions: 200,
            n_seeds: 2,
            auc_pooling: "global".into(),
        };
        let table = report.to_table();
        let lines: Vec<&str> = table.lines().collect();
        assert!(lines[1].starts_with("auc") && lines[1].ends_with("0.7000    0.0100"));
        assert!(lines[2].starts_with("ndcg@3"));
        assert_eq!(lines[1].len(), lines[2].len());
        let back: MetricsReport = serde_json::from_str(&report.to_json().unwrap()).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn best_level_prefers_lower_on_ties() {
        let rows = [1, 2, 3].map(|l| SweepRow {
            aoi_level: l,
            auc_mean: if l == 1 { 0.6 } else { 0.7 },
            auc_std: 0.0,
        });
        assert_eq!(best_level(&rows), Some(2));
        assert_eq!(best_level(&[]), None);
    }
}
