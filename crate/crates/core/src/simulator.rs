//! Synthetic O2O environment with planted geographic groups.
//!
//! Every GPS cell belongs to exactly one group, and each group has its own
//! category preference profile. The AOI hierarchy is built so that level 3
//! coincides with the groups, levels 1–2 merge groups, and levels 4–5 split
//! them into finer areas. Click probability combines group affinity, the
//! user's own taste, and a calibrated bias.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{GeoContext, GeoVocab, State, AOI_LEVELS, HOURS, SEASONS};
use crate::policy::Vocab;

/// Parameters of the synthetic world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvironmentSpec {
    pub n_groups: usize,
    pub n_categories: usize,
    pub n_items: usize,
    /// Candidate set size `C`.
    pub candidates: usize,
    /// Group × category preference matrix; generated from `preference_decay` when absent.
    pub preference: Option<Vec<Vec<f64>>>,
    /// Ratio between successive categories in a generated preference row.
    pub preference_decay: f64,
    /// Level-4 AOIs inside each level-3 AOI.
    pub aoi4_per_group: usize,
    /// Level-5 AOIs inside each level-4 AOI.
    pub aoi5_per_aoi4: usize,
    /// GPS cells inside each level-5 AOI.
    pub cells_per_aoi5: usize,
    pub n_users: usize,
    /// Vocabulary size of each categorical profile feature.
    pub profile_vocab: Vec<usize>,
    /// Longest initial click history (uniform in `0..=max`).
    pub initial_history_max: usize,
    /// Behavior sequences keep only the most recent clicks.
    pub max_history: usize,
    /// Group-affinity weight.
    pub alpha: f64,
    /// User-taste weight.
    pub beta: f64,
    /// Spread of the per-user taste logits.
    pub noise_scale: f64,
    /// Mean click rate under a uniform policy; the bias is solved to hit it.
    pub target_click_rate: f64,
    /// Steps per session.
    pub session_len: usize,
    pub hour_advance_prob: f64,
    pub seed: u64,
}

impl Default for EnvironmentSpec {
    fn default() -> Self {
        Self {
            n_groups: 3,
            n_categories: 5,
            n_items: 200,
            candidates: 20,
            preference: None,
            preference_decay: 0.35,
            aoi4_per_group: 8,
            aoi5_per_aoi4: 8,
            cells_per_aoi5: 2,
            n_users: 3000,
            profile_vocab: vec![6, 3],
            initial_history_max: 4,
            max_history: 10,
            alpha: 6.0,
            beta: 2.0,
            noise_scale: 1.0,
            target_click_rate: 0.1,
            session_len: 4,
            hour_advance_prob: 0.1,
            seed: 7,
        }
    }
}

/// A simulated user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticUser {
    pub user_id: u32,
    /// Home location; hour and season are redrawn per session.
    pub home: GeoContext,
    pub group: usize,
    /// Probability vector over categories.
    pub taste: Vec<f64>,
    pub profile_ids: Vec<u32>,
    /// Clicks before the first simulated session, oldest first.
    pub history: Vec<(u32, u32)>,
}

/// Group and AOI path of one GPS cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub group: usize,
    pub aoi_path: [u32; AOI_LEVELS],
}

/// The generated world; immutable after [`generate_environment`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub spec: EnvironmentSpec,
    pub preference: Vec<Vec<f64>>,
    pub item_category: Vec<u32>,
    pub cells: Vec<Cell>,
    pub users: Vec<SyntheticUser>,
    pub bias: f64,
    pub aoi_vocab: [usize; AOI_LEVELS],
}

fn spec_err(msg: impl Into<String>) -> Error {
    Error::Spec(msg.into())
}

impl EnvironmentSpec {
    /// The preference matrix, generated as rotated geometric rows when not given.
    pub fn preference_matrix(&self) -> Vec<Vec<f64>> {
        if let Some(p) = &self.preference {
            return p.clone();
        }
        (0..self.n_groups)
            .map(|g| {
                let raw: Vec<f64> = (0..self.n_categories)
                    .map(|c| {
                        let rank = (c + self.n_categories - g % self.n_categories) % self.n_categories;
                        self.preference_decay.powi(rank as i32)
                    })
                    .collect();
                let total: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / total).collect()
            })
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.n_groups == 0 || self.n_categories == 0 || self.n_items == 0 {
            return Err(spec_err("n_groups, n_categories and n_items must be >= 1"));
        }
        if self.candidates == 0 || self.candidates > self.n_items {
            return Err(spec_err(format!(
                "candidates must be in 1..={} (n_items), got {}",
                self.n_items, self.candidates
            )));
        }
        if self.n_items < self.n_categories {
            return Err(spec_err("every category needs at least one item"));
        }
        if self.aoi4_per_group == 0 || self.aoi5_per_aoi4 == 0 || self.cells_per_aoi5 == 0 {
            return Err(spec_err("AOI fan-outs must be >= 1"));
        }
        if self.n_users == 0 || self.session_len == 0 || self.max_history == 0 {
            return Err(spec_err("n_users, session_len and max_history must be >= 1"));
        }
        if self.profile_vocab.contains(&0) {
            return Err(spec_err("profile vocabularies must be >= 1"));
        }
        if !(self.target_click_rate > 0.0 && self.target_click_rate < 1.0) {
            return Err(spec_err("target_click_rate must be in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.hour_advance_prob) {
            return Err(spec_err("hour_advance_prob must be in [0, 1]"));
        }
        if !(self.preference_decay > 0.0) {
            return Err(spec_err("preference_decay must be positive"));
        }
        let pref = self.preference_matrix();
        if pref.len() != self.n_groups {
            return Err(spec_err("preference needs one row per group"));
        }
        for (g, row) in pref.iter().enumerate() {
            let total: f64 = row.iter().sum();
            if row.len() != self.n_categories
                || row.iter().any(|&v| !(v >= 0.0) || !v.is_finite())
                || (total - 1.0).abs() > 1e-9
            {
                return Err(spec_err(format!("preference row {g} is not a probability vector")));
            }
        }
        Ok(())
    }

    /// AOI vocabulary per level for this layout.
    pub fn aoi_vocab(&self) -> [usize; AOI_LEVELS] {
        let g = self.n_groups;
        let l4 = g * self.aoi4_per_group;
        [1, g.div_ceil(2), g, l4, l4 * self.aoi5_per_aoi4]
    }

    pub fn n_cells(&self) -> usize {
        self.aoi_vocab()[4] * self.cells_per_aoi5
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Builds catalog, geo layout, and user population from `spec`.
pub fn generate_environment(spec: &EnvironmentSpec) -> Result<Environment> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let preference = spec.preference_matrix();
    let item_category: Vec<u32> = (0..spec.n_items)
        .map(|i| (i % spec.n_categories) as u32)
        .collect();

    let aoi_vocab = spec.aoi_vocab();
    let cells_per_group = spec.aoi4_per_group * spec.aoi5_per_aoi4 * spec.cells_per_aoi5;
    let cells: Vec<Cell> = (0..spec.n_cells())
        .map(|c| {
            let group = c / cells_per_group;
            let within = c % cells_per_group;
            let a4 = group * spec.aoi4_per_group + within / (spec.aoi5_per_aoi4 * spec.cells_per_aoi5);
            let a5 = a4 * spec.aoi5_per_aoi4 + (within / spec.cells_per_aoi5) % spec.aoi5_per_aoi4;
            Cell {
                group,
                aoi_path: [0, (group / 2) as u32, group as u32, a4 as u32, a5 as u32],
            }
        })
        .collect();

    let mut users: Vec<SyntheticUser> = (0..spec.n_users)
        .map(|u| {
            let cell = rng.random_range(0..cells.len());
            let logits: Vec<f64> = (0..spec.n_categories)
                .map(|_| spec.noise_scale * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exp: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
            let total: f64 = exp.iter().sum();
            SyntheticUser {
                user_id: u as u32,
                home: GeoContext {
                    city_id: cells[cell].aoi_path[0],
                    gps_cell_id: cell as u32,
                    aoi_path: cells[cell].aoi_path,
                    hour: 0,
                    season: 0,
                },
                group: cells[cell].group,
                taste: exp.into_iter().map(|v| v / total).collect(),
                profile_ids: spec
                    .profile_vocab
                    .iter()
                    .map(|&v| rng.random_range(0..v) as u32)
                    .collect(),
                history: vec![],
            }
        })
        .collect();

    let mut env = Environment {
        spec: spec.clone(),
        preference,
        item_category,
        cells,
        users: vec![],
        bias: 0.0,
        aoi_vocab,
    };
    env.bias = calibrate_bias(&env, &users, spec.target_click_rate);

    for user in &mut users {
        let len = rng.random_range(0..=spec.initial_history_max.min(spec.max_history));
        let weights: Vec<f64> = (0..spec.n_items as u32)
            .map(|i| env.click_probability_for(user, i))
            .collect();
        let total: f64 = weights.iter().sum();
        for _ in 0..len {
            let mut target = rng.random::<f64>() * total;
            let mut item = spec.n_items - 1;
            for (i, &w) in weights.iter().enumerate() {
                if target < w {
                    item = i;
                    break;
                }
                target -= w;
            }
            user.history.push((item as u32, env.item_category[item]));
        }
    }
    env.users = users;
    Ok(env)
}

/// Bisection on the bias so the mean click probability over users × items hits `target`.
fn calibrate_bias(env: &Environment, users: &[SyntheticUser], target: f64) -> f64 {
    let spec = &env.spec;
    // Click probability only depends on (group, taste, category): average per category.
    let per_cat: Vec<f64> = (0..spec.n_categories)
        .map(|c| {
            env.item_category.iter().filter(|&&k| k as usize == c).count() as f64
                / spec.n_items as f64
        })
        .collect();
    let mean_rate = |bias: f64| -> f64 {
        users
            .iter()
            .map(|u| {
                (0..spec.n_categories)
                    .map(|c| {
                        per_cat[c]
                            * sigmoid(spec.alpha * env.preference[u.group][c] + spec.beta * u.taste[c] + bias)
                    })
                    .sum::<f64>()
            })
            .sum::<f64>()
            / users.len() as f64
    };
    let (mut lo, mut hi) = (-50.0, 50.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_rate(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

impl Environment {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn user(&self, user_id: u32) -> Result<&SyntheticUser> {
        self.users.get(user_id as usize).ok_or(Error::IndexOutOfRange {
            index: user_id as usize,
            len: self.users.len(),
        })
    }

    pub fn group_of_cell(&self, cell: u32) -> usize {
        self.cells[cell as usize].group
    }

    /// Vocabularies a model needs to embed this world.
    pub fn vocab(&self) -> Vocab {
        Vocab {
            geo: GeoVocab {
                cities: self.aoi_vocab[0],
                gps_cells: self.cells.len(),
                aoi: self.aoi_vocab,
            },
            profile: self.spec.profile_vocab.clone(),
            n_items: self.spec.n_items,
            n_categories: self.spec.n_categories,
            item_category: self.item_category.clone(),
        }
    }

    fn click_probability_for(&self, user: &SyntheticUser, item: u32) -> f64 {
        let c = self.item_category[item as usize] as usize;
        sigmoid(
            self.spec.alpha * self.preference[user.group][c]
                + self.spec.beta * user.taste[c]
                + self.bias,
        )
    }

    /// `sigmoid(α Π[group, cat] + β taste[cat] + bias)`.
    pub fn click_probability(&self, user_id: u32, item: u32) -> Result<f64> {
        if item as usize >= self.spec.n_items {
            return Err(Error::IdOutOfRange {
                feature: "item".into(),
                id: item as usize,
                vocab: self.spec.n_items,
            });
        }
        Ok(self.click_probability_for(self.user(user_id)?, item))
    }

    /// A sample of home geo contexts with random hour and season.
    pub fn geo_sample(&self, n: usize, seed: u64) -> Vec<GeoContext> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let u = &self.users[rng.random_range(0..self.users.len())];
                let mut geo = u.home.clone();
                geo.hour = rng.random_range(0..HOURS) as u8;
                geo.season = rng.random_range(0..SEASONS) as u8;
                geo
            })
            .collect()
    }
}

/// One recommendation step of a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Step {
    pub state: State,
    pub chosen_item: u32,
    pub candidate_set: Vec<u32>,
    /// 1 on click or add-to-cart, 0 otherwise.
    pub reward: u8,
    /// Realized outcome of every candidate; recorded for evaluation logs only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate_labels: Option<Vec<u8>>,
}

impl Step {
    pub fn chosen_index(&self) -> Result<usize> {
        self.candidate_set
            .iter()
            .position(|&i| i == self.chosen_item)
            .ok_or(Error::IndexOutOfRange {
                index: self.chosen_item as usize,
                len: self.candidate_set.len(),
            })
    }
}

/// A logged session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Episode {
    pub session_id: u64,
    pub user_id: u32,
    pub steps: Vec<Step>,
}

impl Episode {
    pub fn rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.reward as f64).collect()
    }
}

/// Chooses one candidate per step.
pub trait SessionPolicy {
    fn choose(
        &self,
        user: &SyntheticUser,
        state: &State,
        candidates: &[u32],
        rng: &mut ChaCha8Rng,
    ) -> Result<usize>;
}

/// Picks a candidate uniformly at random.
#[derive(Debug, Clone, Copy, Default)]
pub struct UniformLogger;

impl SessionPolicy for UniformLogger {
    fn choose(&self, _: &SyntheticUser, _: &State, candidates: &[u32], rng: &mut ChaCha8Rng) -> Result<usize> {
        Ok(rng.random_range(0..candidates.len()))
    }
}

/// Always picks the candidate with the highest true click probability.
pub struct GroupOracle<'a>(pub &'a Environment);

impl SessionPolicy for GroupOracle<'_> {
    fn choose(&self, user: &SyntheticUser, _: &State, candidates: &[u32], _: &mut ChaCha8Rng) -> Result<usize> {
        let probs: Vec<f64> = candidates
            .iter()
            .map(|&i| self.0.click_probability_for(user, i))
            .collect();
        Ok(crate::policy::top_k_recommend(&probs, 1)?[0])
    }
}

/// Independent RNG stream for one session.
pub fn session_rng(seed: u64, session_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(session_id);
    rng
}

/// Runs one session of `env.spec.session_len` steps (or `max_len` when smaller).
///
/// Clicked items are appended to the behavior sequence, which is the state
/// transition. With `record_labels`, every candidate's outcome is drawn and
/// the chosen candidate's outcome becomes the reward.
pub fn simulate_session(
    env: &Environment,
    user_id: u32,
    session_id: u64,
    policy: &dyn SessionPolicy,
    max_len: usize,
    record_labels: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Episode> {
    let user = env.user(user_id)?;
    let mut geo = user.home.clone();
    geo.hour = rng.random_range(0..HOURS) as u8;
    geo.season = rng.random_range(0..SEASONS) as u8;
    let mut state = State {
        user_profile_ids: user.profile_ids.clone(),
        behavior_seq: user.history.clone(),
        geo,
    };
    let mut steps = Vec::with_capacity(max_len);
    for _ in 0..max_len.max(1) {
        let candidates: Vec<u32> = index::sample(rng, env.spec.n_items, env.spec.candidates)
            .into_iter()
            .map(|i| i as u32)
            .collect();
        let chosen = policy.choose(user, &state, &candidates, rng)?;
        if chosen >= candidates.len() {
            return Err(Error::IndexOutOfRange {
                index: chosen,
                len: candidates.len(),
            });
        }
        let (reward, labels) = if record_labels {
            let labels: Vec<u8> = candidates
                .iter()
                .map(|&i| (rng.random::<f64>() < env.click_probability_for(user, i)) as u8)
                .collect();
            (labels[chosen], Some(labels))
        } else {
            let p = env.click_probability_for(user, candidates[chosen]);
            ((rng.random::<f64>() < p) as u8, None)
        };
        let item = candidates[chosen];
        steps.push(Step {
            state: state.clone(),
            chosen_item: item,
            candidate_set: candidates,
            reward,
            candidate_labels: labels,
        });
        if reward == 1 {
            state
                .behavior_seq
                .push((item, env.item_category[item as usize]));
            let excess = state.behavior_seq.len().saturating_sub(env.spec.max_history);
            state.behavior_seq.drain(..excess);
        }
        if rng.random::<f64>() < env.spec.hour_advance_prob {
            state.geo.hour = (state.geo.hour + 1) % HOURS as u8;
        }
    }
    Ok(Episode {
        session_id,
        user_id,
        steps,
    })
}

/// Simulates sessions `first_id..first_id + n`, each on its own RNG stream with a uniformly drawn user.
pub fn simulate_batch(
    env: &Environment,
    policy: &dyn SessionPolicy,
    seed: u64,
    first_id: u64,
    n: usize,
    record_labels: bool,
) -> Result<Vec<Episode>> {
    (0..n as u64)
        .map(|i| {
            let id = first_id + i;
            let mut rng = session_rng(seed, id);
            let user = rng.random_range(0..env.users.len()) as u32;
            simulate_session(env, user, id, policy, env.spec.session_len, record_labels, &mut rng)
        })
        .collect()
}

/// Writes one JSON episode per line.
pub fn write_sessions(episodes: &[Episode], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for ep in episodes {
        serde_json::to_writer(&mut w, ep)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads episodes written by [`write_sessions`]; errors carry the 1-based line number.
pub fn read_sessions(path: &Path) -> Result<Vec<Episode>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ep: Episode = serde_json::from_str(&line).map_err(|source| Error::MalformedLine {
            line: i + 1,
            source,
        })?;
        out.push(ep);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> EnvironmentSpec {
        EnvironmentSpec {
            n_users: 300,
            ..Default::default()
        }
    }

    #[test]
    fn single_group_maps_everything_to_zero() {
        let spec = EnvironmentSpec {
            n_groups: 1,
            n_users: 50,
            ..Default::default()
        };
        let env = generate_environment(&spec).unwrap();
        assert_eq!(env.preference.len(), 1);
        assert!(env.cells.iter().all(|c| c.group == 0));
    }

    #[test]
    fn top_category_differs_across_groups() {
        let spec = EnvironmentSpec {
            preference: Some(vec![
                vec![0.9, 0.025, 0.025, 0.025, 0.025],
                vec![0.025, 0.9, 0.025, 0.025, 0.025],
                vec![0.025, 0.025, 0.9, 0.025, 0.025],
            ]),
            ..small_spec()
        };
        let env = generate_environment(&spec).unwrap();
        let tops: Vec<usize> = env
            .preference
            .iter()
            .map(|row| crate::policy::top_k_recommend(row, 1).unwrap()[0])
            .collect();
        assert_eq!(tops, vec![0, 1, 2]);
        let generated = EnvironmentSpec::default().preference_matrix();
        let tops: Vec<usize> = generated
            .iter()
            .map(|row| crate::policy::top_k_recommend(row, 1).unwrap()[0])
            .collect();
        assert_eq!(tops, vec![0, 1, 2]);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_environment(&small_spec()).unwrap();
        let b = generate_environment(&small_spec()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn aoi_level_three_matches_groups() {
        let env = generate_environment(&small_spec()).unwrap();
        for cell in &env.cells {
            assert_eq!(cell.aoi_path[2] as usize, cell.group);
        }
        // Parent ids are a function of child ids at every level.
        let mut parent = std::collections::HashMap::new();
        for cell in &env.cells {
            for l in 1..AOI_LEVELS {
                let prev = parent.insert((l, cell.aoi_path[l]), cell.aoi_path[l - 1]);
                assert!(prev.is_none() || prev == Some(cell.aoi_path[l - 1]));
            }
        }
        for (l, &v) in env.aoi_vocab.iter().enumerate() {
            assert!(env.cells.iter().all(|c| (c.aoi_path[l] as usize) < v));
        }
    }

    #[test]
    fn constant_click_model_without_weights() {
        let spec = EnvironmentSpec {
            alpha: 0.0,
            beta: 0.0,
            ..small_spec()
        };
        let env = generate_environment(&spec).unwrap();
        let p0 = env.click_probability(0, 0).unwrap();
        assert!((p0 - sigmoid(env.bias)).abs() < 1e-15);
        assert!((p0 - 0.1).abs() < 1e-9);
        for u in 0..10 {
            for i in [3, 50, 199] {
                assert_eq!(env.click_probability(u, i).unwrap(), p0);
            }
        }
    }

    #[test]
    fn click_ordering_follows_preference_row() {
        let spec = EnvironmentSpec {
            alpha: 40.0,
            ..small_spec()
        };
        let env = generate_environment(&spec).unwrap();
        let user = &env.users[0];
        let row = &env.preference[user.group];
        let top = crate::policy::top_k_recommend(row, 5).unwrap();
        // Items 0..5 cover categories 0..5.
        let p_top = env.click_probability(0, top[0] as u32).unwrap();
        let p_bottom = env.click_probability(0, top[4] as u32).unwrap();
        assert!(p_top > p_bottom);
    }

    #[test]
    fn calibrated_rate_under_uniform_impressions() {
        let env = generate_environment(&small_spec()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 10_000;
        let mean: f64 = (0..n)
            .map(|_| {
                let u = rng.random_range(0..env.users.len()) as u32;
                let i = rng.random_range(0..env.spec.n_items) as u32;
                env.click_probability(u, i).unwrap()
            })
            .sum::<f64>()
            / n as f64;
        assert!((0.08..=0.12).contains(&mean), "{mean}");
    }

    #[test]
    fn single_step_session() {
        let env = generate_environment(&small_spec()).unwrap();
        let mut rng = session_rng(1, 0);
        let ep = simulate_session(&env, 3, 0, &UniformLogger, 1, false, &mut rng).unwrap();
        assert_eq!(ep.steps.len(), 1);
        assert!(ep.steps[0].candidate_set.contains(&ep.steps[0].chosen_item));
    }

    #[test]
    fn greedy_session_is_reproducible() {
        let env = generate_environment(&small_spec()).unwrap();
        let oracle = GroupOracle(&env);
        let a = simulate_session(&env, 5, 2, &oracle, 6, true, &mut session_rng(4, 2)).unwrap();
        let b = simulate_session(&env, 5, 2, &oracle, 6, true, &mut session_rng(4, 2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn history_grows_only_on_clicks() {
        let env = generate_environment(&small_spec()).unwrap();
        let eps = simulate_batch(&env, &UniformLogger, 3, 0, 200, false).unwrap();
        for ep in &eps {
            for w in ep.steps.windows(2) {
                let before = w[0].state.behavior_seq.len();
                let after = w[1].state.behavior_seq.len();
                if w[0].reward == 1 {
                    assert!(after == before + 1 || after == env.spec.max_history);
                } else {
                    assert_eq!(after, before);
                }
            }
        }
    }

    #[test]
    fn uniform_reward_rate_near_calibration() {
        let env = generate_environment(&small_spec()).unwrap();
        let eps = simulate_batch(&env, &UniformLogger, 11, 0, 1000, false).unwrap();
        let (clicks, n) = eps
            .iter()
            .flat_map(|e| &e.steps)
            .fold((0.0, 0.0), |(c, n), s| (c + s.reward as f64, n + 1.0));
        let rate = clicks / n;
        assert!((0.085..=0.115).contains(&rate), "{rate}");
    }

    #[test]
    fn inconsistent_spec_rejected() {
        let spec = EnvironmentSpec {
            candidates: 500,
            ..small_spec()
        };
        assert!(matches!(generate_environment(&spec), Err(Error::Spec(_))));
        let spec = EnvironmentSpec {
            preference: Some(vec![vec![0.5, 0.5, 0.0, 0.0, 0.0]; 2]),
            ..small_spec()
        };
        assert!(generate_environment(&spec).is_err());
    }

    #[test]
    fn sessions_jsonl_round_trip() {
        let env = generate_environment(&small_spec()).unwrap();
        let eps = simulate_batch(&env, &UniformLogger, 5, 0, 100, true).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        write_sessions(&eps, &path).unwrap();
        assert_eq!(read_sessions(&path).unwrap(), eps);

        write_sessions(&[], &path).unwrap();
        assert!(read_sessions(&path).unwrap().is_empty());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let env = generate_environment(&small_spec()).unwrap();
        let eps = simulate_batch(&env, &UniformLogger, 5, 0, 2, false).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        write_sessions(&eps, &path).unwrap();
        let mut text = std::fs::read_to_string(&path).unwrap();
        text.push_str("{\"session_id\": 9, \"user_id\": \"ü\", \"steps\": []}\n");
        std::fs::write(&path, text).unwrap();
        match read_sessions(&path) {
            Err(Error::MalformedLine { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected malformed line error, got {other:?}"),
        }
    }
}
