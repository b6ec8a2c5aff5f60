//! EM orchestration: E-steps on the recognition parameters alternate with
//! REINFORCE M-steps on the policy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{GeoContext, State};
use crate::grouping::{e_step, kmeans_fit, EStepConfig};
use crate::numerics::{discounted_return, grad_check, GradCheckReport, ParamStore, SlotId, Tensor};
use crate::policy::{GroupIndicator, GsVariant, Model, ModelConfig, Vocab, CENTROIDS, PROTOTYPES};
use crate::simulator::{
    generate_environment, simulate_batch, Environment, EnvironmentSpec, Episode, SessionPolicy, SyntheticUser,
    UniformLogger,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Discount factor in (0, 1].
    pub gamma: f64,
    pub learning_rate: f64,
    /// Episodes per M-step.
    pub batch_size: usize,
    pub em_rounds: usize,
    pub m_steps_per_round: usize,
    /// Run the E-step on rounds divisible by this.
    pub e_step_every: usize,
    /// Subtract the batch-mean return.
    pub baseline: bool,
    pub seed: u64,
    /// Geo contexts used to fit the initial centroids or prototypes.
    pub init_sample: usize,
    pub e_step: EStepConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.9,
            learning_rate: 0.003,
            batch_size: 100,
            em_rounds: 200,
            m_steps_per_round: 20,
            e_step_every: 1,
            baseline: true,
            seed: 1,
            init_sample: 500,
            e_step: EStepConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, message: &str| {
            Err(Error::Config {
                path: path.into(),
                message: message.into(),
            })
        };
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("train.gamma", "must be in (0, 1]");
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("train.learning_rate", "must be positive");
        }
        if self.batch_size == 0 || self.m_steps_per_round == 0 || self.e_step_every == 0 {
            return bad("train", "batch_size, m_steps_per_round and e_step_every must be >= 1");
        }
        if self.init_sample == 0 {
            return bad("train.init_sample", "must be >= 1");
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// Mean undiscounted-from-start return `G_0` of the round's episodes.
    pub mean_return: f64,
    /// Mean surrogate objective `Σ (G_t − B) log π` per episode.
    pub objective: f64,
    /// SSE (k-means), mean log-likelihood (prototypes), or 0.
    pub sse_or_loglik: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<RoundRecord>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            w.serialize(r).map_err(|e| Error::Spec(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Spec(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Spec(e.to_string()))
    }

    /// Mean of `mean_return` over rounds `range`.
    pub fn mean_return(&self, range: std::ops::Range<usize>) -> f64 {
        let rows = &self.records[range];
        rows.iter().map(|r| r.mean_return).sum::<f64>() / rows.len() as f64
    }
}

/// Lloyd iteration cap for the initial centroid fit.
pub const INIT_KMEANS_ITERS: usize = 100;

/// Fresh parameters: uniform weights, zero biases, identical towers, and
/// centroids or prototypes fitted by k-means++ on the initial geo embeddings of `geo_sample`.
pub fn init_params(
    cfg: &ModelConfig,
    vocab: &Vocab,
    geo_sample: &[GeoContext],
    seed: u64,
) -> Result<(Model, ParamStore)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    let model = Model::init(&mut params, cfg, vocab, &mut rng)?;
    let slot = match cfg.gs_variant {
        GsVariant::Kmeans => Some(CENTROIDS),
        GsVariant::Proto => Some(PROTOTYPES),
        _ => None,
    };
    if let Some(name) = slot {
        let points = init_points(&model, &params, geo_sample)?;
        let fit = kmeans_fit(&points, cfg.k, INIT_KMEANS_ITERS, seed)?;
        let id = params.id(name)?;
        *params.value_mut(id) = fit.centroids;
    }
    Ok((model, params))
}

fn init_points(model: &Model, params: &ParamStore, sample: &[GeoContext]) -> Result<Tensor> {
    let values = params.values();
    let mut data = Vec::with_capacity(sample.len() * model.d_g());
    for ctx in sample {
        data.extend(model.tables().geo.encode(values, ctx)?);
    }
    if sample.is_empty() {
        return Err(Error::EmptyInput("initial geo sample"));
    }
    Tensor::matrix(sample.len(), model.d_g(), data)
}

/// Slots the M-step updates: everything except the k-means centroids.
pub fn policy_slots(model: &Model, params: &ParamStore) -> Vec<SlotId> {
    let frozen = model.e_step_only_slots();
    params.ids().filter(|id| !frozen.contains(id)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MStepStats {
    /// Surrogate objective `Σ (G_t − B) log π` divided by the number of episodes.
    pub objective: f64,
    pub grad_norm: f64,
    /// Mean `G_0` over the batch.
    pub mean_return: f64,
}

/// Accumulates `Σ_τ Σ_t (G_t − B) ∇ log π(a_t | s_t, ĥ_t)` into the gradient
/// buffers without updating anything. Returns the surrogate objective sum.
pub fn accumulate_surrogate(
    model: &Model,
    params: &mut ParamStore,
    batch: &[Episode],
    gamma: f64,
    baseline: bool,
) -> Result<(f64, f64)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch("m_step"));
    }
    let returns: Vec<Vec<f64>> = batch
        .iter()
        .map(|ep| {
            if ep.steps.is_empty() {
                return Err(Error::EmptyBatch("episode"));
            }
            discounted_return(&ep.rewards(), gamma)
        })
        .collect::<Result<_>>()?;
    let b = if baseline {
        let n: usize = returns.iter().map(Vec::len).sum();
        returns.iter().flatten().sum::<f64>() / n as f64
    } else {
        0.0
    };
    let mean_return = returns.iter().map(|r| r[0]).sum::<f64>() / batch.len() as f64;

    params.zero_grads();
    let (values, mut grads) = params.split_mut();
    let mut objective = 0.0;
    for (ep, ret) in batch.iter().zip(&returns) {
        for (step, &g) in ep.steps.iter().zip(ret) {
            let w = g - b;
            if w == 0.0 {
                continue;
            }
            let chosen = step.chosen_index()?;
            let lp = model.accumulate_log_prob_grad(
                values,
                &mut grads,
                &step.state,
                &step.candidate_set,
                chosen,
                None,
                w,
            )?;
            objective += w * lp;
        }
    }
    Ok((objective, mean_return))
}

/// One REINFORCE update with φ frozen; errors on a non-finite gradient.
pub fn m_step(model: &Model, params: &mut ParamStore, batch: &[Episode], cfg: &TrainConfig) -> Result<MStepStats> {
    let (objective, mean_return) = accumulate_surrogate(model, params, batch, cfg.gamma, cfg.baseline)?;
    let slots = policy_slots(model, params);
    for &id in &slots {
        let grad = params.grad(id);
        if let Some(i) = grad.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient {
                slot: params.name(id).to_string(),
                detail: format!(
                    "entry {i} = {}, objective {objective}, batch of {} episodes",
                    grad.data()[i],
                    batch.len()
                ),
            });
        }
    }
    let grad_norm = params.grad_norm();
    params.ascend(&slots, cfg.learning_rate);
    Ok(MStepStats {
        objective: objective / batch.len() as f64,
        grad_norm,
        mean_return,
    })
}

/// Samples from the model's categorical policy, or takes its argmax when `greedy`.
pub struct ModelPolicy<'a> {
    pub model: &'a Model,
    pub params: &'a ParamStore,
    pub greedy: bool,
}

impl SessionPolicy for ModelPolicy<'_> {
    fn choose(&self, _: &SyntheticUser, state: &State, candidates: &[u32], rng: &mut ChaCha8Rng) -> Result<usize> {
        let mut logits = self.model.logits(self.params.values(), state, candidates)?;
        if self.greedy {
            return Ok(crate::policy::top_k_recommend(&logits, 1)?[0]);
        }
        crate::numerics::softmax_in_place(&mut logits);
        let mut u: f64 = rng.random();
        for (i, p) in logits.iter().enumerate() {
            if u < *p {
                return Ok(i);
            }
            u -= p;
        }
        Ok(logits.len() - 1)
    }
}

/// Where training episodes come from.
pub enum DataSource<'a> {
    /// Fresh on-policy sessions each M-step.
    Simulator(&'a Environment),
    /// Replay of logged sessions in fixed order (off-policy).
    Logged(&'a [Episode]),
}

/// Runs `em_rounds` rounds of {E-step every `e_step_every` rounds, then `m_steps_per_round` M-steps}.
pub fn train_em(
    source: &DataSource<'_>,
    model: &Model,
    params: &mut ParamStore,
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if let DataSource::Logged(logs) = source {
        if logs.is_empty() {
            return Err(Error::EmptyBatch("logged sessions"));
        }
    }
    let mut history = TrainHistory::default();
    let mut e_objective = 0.0;
    let mut cursor = 0usize;
    for round in 0..cfg.em_rounds {
        let (mut ret, mut obj, mut norm) = (0.0, 0.0, 0.0);
        for step in 0..cfg.m_steps_per_round {
            let batch = match source {
                DataSource::Simulator(env) => {
                    let first = ((round * cfg.m_steps_per_round + step) * cfg.batch_size) as u64;
                    let policy = ModelPolicy {
                        model,
                        params,
                        greedy: false,
                    };
                    simulate_batch(env, &policy, cfg.seed, first, cfg.batch_size, false)?
                }
                DataSource::Logged(logs) => (0..cfg.batch_size)
                    .map(|i| logs[(cursor + i) % logs.len()].clone())
                    .collect(),
            };
            cursor = (cursor + cfg.batch_size) % match source {
                DataSource::Logged(logs) => logs.len(),
                DataSource::Simulator(_) => 1,
            };
            if step == 0 && round % cfg.e_step_every == 0 {
                let states = batch.iter().flat_map(|ep| ep.steps.iter().map(|s| &s.state));
                e_objective = e_step(model, params, states, &cfg.e_step)?;
            }
            let stats = m_step(model, params, &batch, cfg)?;
            ret += stats.mean_return;
            obj += stats.objective;
            norm += stats.grad_norm;
        }
        let n = cfg.m_steps_per_round as f64;
        let record = RoundRecord {
            round,
            mean_return: ret / n,
            objective: obj / n,
            sse_or_loglik: e_objective,
            grad_norm: norm / n,
        };
        if ![record.mean_return, record.objective, record.sse_or_loglik, record.grad_norm]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::NonFinite(format!("training history at round {round}: {record:?}")));
        }
        history.records.push(record);
    }
    Ok(history)
}

/// Group indicator routes of every step, in batch order; used to check tower isolation.
pub fn batch_routes(model: &Model, params: &ParamStore, batch: &[Episode]) -> Result<Vec<usize>> {
    let values = params.values();
    let mut out = Vec::new();
    for ep in batch {
        for step in &ep.steps {
            let g = model.tables().geo.encode(values, &step.state.geo)?;
            if let GroupIndicator::Discrete(k) = model.assign(values, &g)? {
                out.push(k);
            }
        }
    }
    Ok(out)
}

/// A model, parameters, and a two-episode batch for checking the full-stack gradient.
pub struct GradCheckFixture {
    pub env: Environment,
    pub model: Model,
    pub params: ParamStore,
    pub batch: Vec<Episode>,
}

/// Builds a [`GradCheckFixture`]. Rewards alternate 1, 0, 1, ... so every
/// step carries a nonzero weight under the batch-mean baseline.
pub fn grad_check_fixture(env_spec: &EnvironmentSpec, cfg: &ModelConfig, seed: u64) -> Result<GradCheckFixture> {
    let env = generate_environment(&EnvironmentSpec {
        seed,
        ..env_spec.clone()
    })?;
    let sample = env.geo_sample(64, seed);
    let (model, params) = init_params(cfg, &env.vocab(), &sample, seed)?;
    let mut batch = simulate_batch(&env, &UniformLogger, seed, 0, 2, false)?;
    let mut flip = true;
    for step in batch.iter_mut().flat_map(|ep| ep.steps.iter_mut()) {
        step.reward = flip as u8;
        flip = !flip;
    }
    Ok(GradCheckFixture {
        env,
        model,
        params,
        batch,
    })
}

/// Central differences against the analytic gradient of `Σ (G_t − B) log π`.
///
/// Weights and discrete routes are computed once at the unperturbed point and
/// held fixed, so the objective is smooth in every coordinate. The error floor
/// is `1e-6 · max(1, Σ |w_t log π_t|)`, the roundoff scale of the summed terms.
pub fn surrogate_grad_check(
    model: &Model,
    params: &mut ParamStore,
    batch: &[Episode],
    gamma: f64,
    baseline: bool,
    eps: f64,
) -> Result<GradCheckReport> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch("grad_check"));
    }
    let returns: Vec<Vec<f64>> = batch
        .iter()
        .map(|ep| discounted_return(&ep.rewards(), gamma))
        .collect::<Result<_>>()?;
    let n: usize = returns.iter().map(Vec::len).sum();
    let b = if baseline {
        returns.iter().flatten().sum::<f64>() / n as f64
    } else {
        0.0
    };
    let values = params.values();
    let mut terms = Vec::with_capacity(n);
    for (ep, ret) in batch.iter().zip(&returns) {
        for (step, &g) in ep.steps.iter().zip(ret) {
            let geo = model.tables().geo.encode(values, &step.state.geo)?;
            let route = match model.assign(values, &geo)? {
                GroupIndicator::Discrete(k) => Some(k),
                _ => None,
            };
            terms.push((step, step.chosen_index()?, route, g - b));
        }
    }
    let mut magnitude = 0.0;
    for &(step, chosen, route, w) in &terms {
        magnitude += (w * model.log_prob(values, &step.state, &step.candidate_set, chosen, route)?).abs();
    }
    grad_check(
        params,
        eps,
        1e-6 * magnitude.max(1.0),
        |p| {
            let mut total = 0.0;
            for &(step, chosen, route, w) in &terms {
                total += w * model.log_prob(p.values(), &step.state, &step.candidate_set, chosen, route)?;
            }
            Ok(total)
        },
        |p| {
            let (values, mut grads) = p.split_mut();
            for &(step, chosen, route, w) in &terms {
                model.accumulate_log_prob_grad(
                    values,
                    &mut grads,
                    &step.state,
                    &step.candidate_set,
                    chosen,
                    route,
                    w,
                )?;
            }
            Ok(())
        },
    )
}
