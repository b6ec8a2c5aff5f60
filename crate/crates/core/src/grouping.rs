//! The recognition model: group assignment from the geo embedding `g` and the
//! variant-specific E-step updates of its parameters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::State;
use crate::numerics::{cosine_grad_v, cosine_sim, matvec, norm, sq_dist, ParamStore, Tensor};
use crate::policy::{log_sum_exp, GroupIndicator, Model, CENTROIDS, PROTOTYPES};

/// Borrowed recognition parameters φ, tagged by head variant.
#[derive(Debug, Clone, Copy)]
pub enum RecognitionParams<'a> {
    Kmeans {
        centroids: &'a [f64],
        k: usize,
        dim: usize,
    },
    Proto {
        prototypes: &'a [f64],
        k: usize,
        dim: usize,
    },
    Can {
        map: &'a [f64],
        p: usize,
        dim: usize,
    },
    Shared,
}

/// `σ_φ(g)`: nearest centroid, most cosine-similar prototype, or `L g`.
pub fn assign(g: &[f64], phi: &RecognitionParams<'_>) -> Result<GroupIndicator> {
    match *phi {
        RecognitionParams::Kmeans { centroids, k, dim } => {
            check_dim(g, dim)?;
            Ok(GroupIndicator::Discrete(nearest(g, centroids, k, dim).0))
        }
        RecognitionParams::Proto { prototypes, k, dim } => {
            check_dim(g, dim)?;
            if norm(g) == 0.0 {
                return Err(Error::ZeroNorm("prototype assignment"));
            }
            let mut best = (0, f64::NEG_INFINITY);
            for j in 0..k {
                let c = cosine_sim(g, &prototypes[j * dim..(j + 1) * dim])?;
                if c > best.1 {
                    best = (j, c);
                }
            }
            Ok(GroupIndicator::Discrete(best.0))
        }
        RecognitionParams::Can { map, p, dim } => {
            check_dim(g, dim)?;
            let mut h = vec![0.0; p];
            matvec(map, dim, g, &mut h);
            Ok(GroupIndicator::Dense(h))
        }
        RecognitionParams::Shared => Ok(GroupIndicator::Shared),
    }
}

fn check_dim(g: &[f64], dim: usize) -> Result<()> {
    if g.len() != dim {
        return Err(Error::ShapeMismatch {
            op: "assign",
            left: vec![g.len()],
            right: vec![dim],
        });
    }
    Ok(())
}

/// Index and squared distance of the nearest centroid; ties go to the lower index.
fn nearest(x: &[f64], centroids: &[f64], k: usize, dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for j in 0..k {
        let d = sq_dist(x, &centroids[j * dim..(j + 1) * dim]);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Within-cluster sum of squares under nearest-centroid assignment.
pub fn sse(points: &Tensor, centroids: &Tensor) -> f64 {
    let (k, dim) = (centroids.rows(), centroids.cols());
    (0..points.rows())
        .map(|i| nearest(points.row(i), centroids.data(), k, dim).1)
        .sum()
}

/// Result of a Lloyd run.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub centroids: Tensor,
    /// SSE of the initial centroids followed by the SSE after every update.
    pub sse_history: Vec<f64>,
    pub iterations: usize,
}

impl KMeansFit {
    pub fn sse(&self) -> f64 {
        *self.sse_history.last().expect("history is never empty")
    }
}

/// Lloyd's algorithm with k-means++ seeding.
///
/// Stops after `max_iters` updates or once assignments stop changing. An
/// empty cluster is reseeded at the point farthest from its current centroid.
pub fn kmeans_fit(points: &Tensor, k: usize, max_iters: usize, seed: u64) -> Result<KMeansFit> {
    let n = points.rows();
    if k == 0 || n < k {
        return Err(Error::TooFewPoints { n, k });
    }
    let init = kmeans_plus_plus(points, k, &mut ChaCha8Rng::seed_from_u64(seed))?;
    Ok(lloyd(points, init, max_iters))
}

fn kmeans_plus_plus(points: &Tensor, k: usize, rng: &mut impl Rng) -> Result<Tensor> {
    let (n, dim) = (points.rows(), points.cols());
    let mut centroids = Vec::with_capacity(k * dim);
    centroids.extend_from_slice(points.row(rng.random_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), &centroids[..dim])).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = points.row(pick).to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), &c));
        }
        centroids.extend_from_slice(&c);
    }
    Tensor::matrix(k, dim, centroids)
}

/// Lloyd iterations warm-started from `centroids`.
pub fn lloyd(points: &Tensor, mut centroids: Tensor, max_iters: usize) -> KMeansFit {
    let (n, dim, k) = (points.rows(), points.cols(), centroids.rows());
    let mut history = vec![sse(points, &centroids)];
    let mut prev: Option<Vec<usize>> = None;
    let mut iterations = 0;
    for _ in 0..max_iters {
        let assign: Vec<(usize, f64)> = (0..n)
            .map(|i| nearest(points.row(i), centroids.data(), k, dim))
            .collect();
        let labels: Vec<usize> = assign.iter().map(|a| a.0).collect();
        if prev.as_ref() == Some(&labels) {
            break;
        }
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for (s, &x) in sums[l * dim..(l + 1) * dim].iter_mut().zip(points.row(i)) {
                *s += x;
            }
        }
        let mut taken = vec![false; n];
        for j in 0..k {
            let row = centroids.row_mut(j);
            if counts[j] > 0 {
                for (c, s) in row.iter_mut().zip(&sums[j * dim..(j + 1) * dim]) {
                    *c = s / counts[j] as f64;
                }
            } else {
                // Reseed at the farthest not-yet-used point.
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .max_by(|&a, &b| assign[a].1.total_cmp(&assign[b].1).then(b.cmp(&a)));
                if let Some(i) = far {
                    taken[i] = true;
                    row.copy_from_slice(points.row(i));
                }
            }
        }
        iterations += 1;
        history.push(sse(points, &centroids));
        prev = Some(labels);
    }
    KMeansFit {
        centroids,
        sse_history: history,
        iterations,
    }
}

/// `(1/N) Σ_i log q(k̂_i | g_i)` with `q = softmax_k(cos(g_i, p_k) / T)` and
/// `k̂_i = argmax_k cos(g_i, p_k)`.
pub fn proto_log_likelihood(points: &Tensor, prototypes: &Tensor, temperature: f64) -> Result<f64> {
    proto_objective(points, prototypes, temperature, None)
}

/// Gradient of [`proto_log_likelihood`] with respect to the prototypes, with the
/// argmax assignments held fixed.
pub fn proto_log_likelihood_grad(
    points: &Tensor,
    prototypes: &Tensor,
    temperature: f64,
) -> Result<(f64, Tensor)> {
    let mut grad = Tensor::zeros(prototypes.shape());
    let value = proto_objective(points, prototypes, temperature, Some(&mut grad))?;
    Ok((value, grad))
}

fn proto_objective(
    points: &Tensor,
    prototypes: &Tensor,
    temperature: f64,
    mut grad: Option<&mut Tensor>,
) -> Result<f64> {
    let n = points.rows();
    if n == 0 {
        return Err(Error::EmptyBatch("prototype likelihood"));
    }
    let k = prototypes.rows();
    let mut total = 0.0;
    let mut logits = vec![0.0; k];
    for i in 0..n {
        let g = points.row(i);
        let mut best = 0;
        for j in 0..k {
            let c = cosine_sim(g, prototypes.row(j))?;
            logits[j] = c / temperature;
            if logits[j] > logits[best] {
                best = j;
            }
        }
        let lse = log_sum_exp(&logits);
        total += logits[best] - lse;
        if let Some(grad) = grad.as_deref_mut() {
            for j in 0..k {
                let q = (logits[j] - lse).exp();
                let indicator = if j == best { 1.0 } else { 0.0 };
                let upstream = (indicator - q) / (temperature * n as f64);
                cosine_grad_v(g, prototypes.row(j), upstream, grad.row_mut(j));
            }
        }
    }
    Ok(total / n as f64)
}

/// Knobs of the E-step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EStepConfig {
    /// Lloyd iteration cap for k-means refits.
    pub max_iters: usize,
    /// Gradient-ascent step for the prototype likelihood.
    pub proto_lr: f64,
}

impl Default for EStepConfig {
    fn default() -> Self {
        Self {
            max_iters: 20,
            proto_lr: 0.05,
        }
    }
}

/// Stacks the geo embeddings of `states` under the current parameters.
pub fn geo_points<'a>(
    model: &Model,
    params: &ParamStore,
    states: impl IntoIterator<Item = &'a State>,
) -> Result<Tensor> {
    let values = params.values();
    let mut data = Vec::new();
    let mut n = 0;
    for s in states {
        data.extend(model.tables().geo.encode(values, &s.geo)?);
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyBatch("e_step"));
    }
    Tensor::matrix(n, model.d_g(), data)
}

/// One E-step over the geo embeddings of `states` with the policy frozen.
///
/// k-means: a warm-started Lloyd refit of the centroids. Prototypes: one
/// gradient-ascent step on the batch log-likelihood. CAN and the ablation: no
/// change. Returns the objective after the update (SSE, mean log-likelihood,
/// or 0).
pub fn e_step<'a>(
    model: &Model,
    params: &mut ParamStore,
    states: impl IntoIterator<Item = &'a State>,
    cfg: &EStepConfig,
) -> Result<f64> {
    let points = geo_points(model, params, states)?;
    match model.variant() {
        crate::policy::GsVariant::Kmeans => {
            let id = params.id(CENTROIDS)?;
            let fit = lloyd(&points, params.value(id).clone(), cfg.max_iters);
            let objective = fit.sse();
            *params.value_mut(id) = fit.centroids;
            Ok(objective)
        }
        crate::policy::GsVariant::Proto => {
            let id = params.id(PROTOTYPES)?;
            let temperature = model.config().temperature;
            let (_, grad) = proto_log_likelihood_grad(&points, params.value(id), temperature)?;
            for (p, g) in params.value_mut(id).data_mut().iter_mut().zip(grad.data()) {
                *p += cfg.proto_lr * g;
            }
            proto_log_likelihood(&points, params.value(id), temperature)
        }
        crate::policy::GsVariant::Can | crate::policy::GsVariant::Din => Ok(0.0),
    }
}
