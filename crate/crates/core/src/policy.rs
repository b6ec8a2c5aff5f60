//! The recommendation policy `π(a | s, h) = GS(DIN(s), h)`.
//!
//! A shared Deep Interest Network tower maps the encoded state to a shared
//! action embedding `a_s`. A group-specification head then maps `a_s` to the
//! final action embedding `a`, using parameters selected or generated from the
//! group indicator `h`. Candidate items are scored by inner product with `a`
//! and the policy is the softmax over the candidate set.
//!
//! Every head uses the same micro-MLP shape (`d_a → m → d_a`, tanh hidden,
//! identity output) and the same packed parameter layout `W1, b1, W2, b2`.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{uniform, EmbeddingTables, EncodedState, GeoDims, GeoVocab, State, StateTables};
use crate::grouping::{self, RecognitionParams};
use crate::numerics::{
    affine_row, affine_row_backward, dot, matvec, matvec_backward, softmax_in_place, Grads,
    ParamStore, SlotId, Tensor, Values,
};

/// Which group-specification head the policy uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GsVariant {
    /// `K` separate towers, routed by nearest k-means centroid.
    Kmeans,
    /// Tower weights generated as `tanh(W p_k + b)` from the best-matching prototype.
    Proto,
    /// Tower weights are `h = L g`, a linear map of the geo embedding.
    Can,
    /// No head: `a = a_s`. The shared-tower ablation.
    Din,
}

impl fmt::Display for GsVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            GsVariant::Kmeans => "kmeans",
            GsVariant::Proto => "proto",
            GsVariant::Can => "can",
            GsVariant::Din => "din",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for GsVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kmeans" => Ok(Self::Kmeans),
            "proto" => Ok(Self::Proto),
            "can" => Ok(Self::Can),
            "din" => Ok(Self::Din),
            other => Err(Error::Config {
                path: "model.gs_variant".into(),
                message: format!("unknown variant `{other}` (expected kmeans, proto, can, din)"),
            }),
        }
    }
}

/// The latent group indicator `h`.
#[derive(Debug, Clone, PartialEq)]
pub enum GroupIndicator {
    /// Cluster or prototype index.
    Discrete(usize),
    /// Generated micro-MLP parameter vector of length `P`.
    Dense(Vec<f64>),
    /// The ablation head has no group indicator.
    Shared,
}

impl GroupIndicator {
    fn kind(&self) -> &'static str {
        match self {
            GroupIndicator::Discrete(_) => "discrete",
            GroupIndicator::Dense(_) => "dense",
            GroupIndicator::Shared => "shared",
        }
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub gs_variant: GsVariant,
    /// Number of groups for the discrete heads.
    pub k: usize,
    pub aoi_level: usize,
    /// Item embedding width, equal to the action width `d_a`.
    pub d_item: usize,
    /// Hidden width of the micro-MLP heads.
    pub m: usize,
    pub d_profile: usize,
    pub attention_hidden: usize,
    pub fusion_hidden: usize,
    pub geo_dims: GeoDims,
    /// Prototype likelihood temperature.
    pub temperature: f64,
    /// Half-width of the uniform weight initialization.
    pub init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            gs_variant: GsVariant::Can,
            k: 3,
            aoi_level: 3,
            d_item: 8,
            m: 4,
            d_profile: 4,
            attention_hidden: 16,
            fusion_hidden: 16,
            geo_dims: GeoDims::default(),
            temperature: 0.1,
            init_scale: 0.05,
        }
    }
}

impl ModelConfig {
    pub fn packed_len(&self) -> usize {
        packed_len(self.d_item, self.m)
    }
}

/// Vocabularies the model embeds; derived from the environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    pub geo: GeoVocab,
    pub profile: Vec<usize>,
    pub n_items: usize,
    pub n_categories: usize,
    /// Category of every catalog item.
    pub item_category: Vec<u32>,
}

// ---------------------------------------------------------------------------
// Micro-MLP packing.

/// `P = d_a·m + m + m·d_a + d_a`.
pub fn packed_len(d_a: usize, m: usize) -> usize {
    d_a * m + m + m * d_a + d_a
}

/// Borrowed micro-MLP parameters sliced out of a packed vector.
#[derive(Debug, Clone, Copy)]
pub struct MicroMlp<'a> {
    pub w1: &'a [f64],
    pub b1: &'a [f64],
    pub w2: &'a [f64],
    pub b2: &'a [f64],
    d_a: usize,
    m: usize,
}

/// Slices `v` into `W1 [d_a, m]`, `b1 [m]`, `W2 [m, d_a]`, `b2 [d_a]`.
pub fn unpack_micro_mlp(v: &[f64], d_a: usize, m: usize) -> Result<MicroMlp<'_>> {
    let p = packed_len(d_a, m);
    if v.len() != p {
        return Err(Error::PackedLength {
            expected: p,
            got: v.len(),
        });
    }
    let (w1, rest) = v.split_at(d_a * m);
    let (b1, rest) = rest.split_at(m);
    let (w2, b2) = rest.split_at(m * d_a);
    Ok(MicroMlp {
        w1,
        b1,
        w2,
        b2,
        d_a,
        m,
    })
}

/// Inverse of [`unpack_micro_mlp`].
pub fn pack_micro_mlp(w1: &[f64], b1: &[f64], w2: &[f64], b2: &[f64]) -> Vec<f64> {
    [w1, b1, w2, b2].concat()
}

impl MicroMlp<'_> {
    /// Returns `(hidden, output)`.
    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut hidden = vec![0.0; self.m];
        affine_row(x, self.w1, self.b1, &mut hidden);
        hidden.iter_mut().for_each(|v| *v = v.tanh());
        let mut out = vec![0.0; self.d_a];
        affine_row(&hidden, self.w2, self.b2, &mut out);
        (hidden, out)
    }

    /// Accumulates the packed-parameter gradient into `dv` and the input gradient into `dx`.
    fn backward(&self, x: &[f64], hidden: &[f64], dy: &[f64], dv: Option<&mut [f64]>, dx: &mut [f64]) {
        let mut dh = vec![0.0; self.m];
        let (d_a, m) = (self.d_a, self.m);
        match dv {
            Some(dv) => {
                let (dw1, rest) = dv.split_at_mut(d_a * m);
                let (db1, rest) = rest.split_at_mut(m);
                let (dw2, db2) = rest.split_at_mut(m * d_a);
                affine_row_backward(hidden, self.w2, dy, Some(dw2), Some(db2), Some(&mut dh));
                for (d, h) in dh.iter_mut().zip(hidden) {
                    *d *= 1.0 - h * h;
                }
                affine_row_backward(x, self.w1, &dh, Some(dw1), Some(db1), Some(dx));
            }
            None => {
                affine_row_backward(hidden, self.w2, dy, None, None, Some(&mut dh));
                for (d, h) in dh.iter_mut().zip(hidden) {
                    *d *= 1.0 - h * h;
                }
                affine_row_backward(x, self.w1, &dh, None, None, Some(dx));
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Scoring.

/// `logits[c] = ⟨a, e_c⟩` for candidate embeddings `[C, d_a]`.
pub fn score_items(a: &[f64], candidates: &Tensor) -> Result<Vec<f64>> {
    if candidates.shape().len() != 2 || candidates.cols() != a.len() {
        return Err(Error::ShapeMismatch {
            op: "score_items",
            left: vec![a.len()],
            right: candidates.shape().to_vec(),
        });
    }
    Ok((0..candidates.rows()).map(|c| dot(a, candidates.row(c))).collect())
}

/// `log softmax(logits)[chosen]`.
pub fn policy_log_prob(logits: &[f64], chosen: usize) -> Result<f64> {
    if chosen >= logits.len() {
        return Err(Error::IndexOutOfRange {
            index: chosen,
            len: logits.len(),
        });
    }
    Ok(logits[chosen] - log_sum_exp(logits))
}

pub(crate) fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Indices of the `k` largest logits, ties broken by lower index.
pub fn top_k_recommend(logits: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > logits.len() {
        return Err(Error::IndexOutOfRange {
            index: k,
            len: logits.len(),
        });
    }
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

// ---------------------------------------------------------------------------
// The model.

#[derive(Debug, Clone)]
struct DinSlots {
    query_w: SlotId,
    query_b: SlotId,
    attn_w1: SlotId,
    attn_b1: SlotId,
    attn_w2: SlotId,
    fuse_w1: SlotId,
    fuse_b1: SlotId,
    fuse_w2: SlotId,
    fuse_b2: SlotId,
}

#[derive(Debug, Clone)]
enum HeadSlots {
    Kmeans { towers: SlotId, centroids: SlotId },
    Proto { prototypes: SlotId, w: SlotId, b: SlotId },
    Can { map: SlotId },
    Din,
}

/// Slot names of the recognition parameters φ.
pub const CENTROIDS: &str = "phi.centroids";
pub const PROTOTYPES: &str = "phi.prototypes";
pub const CAN_MAP: &str = "phi.can_map";

/// Intermediate values of the shared tower, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct DinTape {
    pub enc: EncodedState,
    z: Vec<f64>,
    q: Vec<f64>,
    units: Vec<f64>,
    attn_hidden: Vec<f64>,
    /// Attention weights over the behavior sequence.
    pub weights: Vec<f64>,
    /// Attention-weighted sum of the sequence embeddings.
    pub attended: Vec<f64>,
    x: Vec<f64>,
    fuse_hidden: Vec<f64>,
    pub a_s: Vec<f64>,
}

struct HeadTape {
    packed: Vec<f64>,
    hidden: Vec<f64>,
    a: Vec<f64>,
    route: Option<usize>,
}

/// Forward quantities of one scored step.
pub struct StepOutput {
    pub logits: Vec<f64>,
    pub a: Vec<f64>,
    pub group: GroupIndicator,
}

/// The policy network bound to a parameter store layout.
#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    vocab: Vocab,
    tables: StateTables,
    din: DinSlots,
    head: HeadSlots,
}

impl Model {
    /// Creates every slot with the initial values: uniform weights, zero biases,
    /// identical k-means towers, and zero recognition parameters (fitted later).
    pub fn init(
        params: &mut ParamStore,
        cfg: &ModelConfig,
        vocab: &Vocab,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        validate(cfg, vocab)?;
        let s = cfg.init_scale;
        let geo = EmbeddingTables::init(params, &vocab.geo, cfg.geo_dims, cfg.aoi_level, s, rng)?;
        StateTables::init(
            params,
            geo,
            &vocab.profile,
            cfg.d_profile,
            vocab.n_items,
            vocab.n_categories,
            cfg.d_item,
            s,
            rng,
        )?;
        let d = cfg.d_item;
        let dz = cfg.d_profile * vocab.profile.len() + cfg.geo_dims.total();
        let dx = cfg.d_profile * vocab.profile.len() + d + cfg.geo_dims.total();
        let (ha, hf) = (cfg.attention_hidden, cfg.fusion_hidden);
        params.insert("din.query.w", uniform(dz, d, s, rng)?);
        params.insert("din.query.b", Tensor::zeros(&[d]));
        params.insert("din.attn.w1", uniform(4 * d, ha, s, rng)?);
        params.insert("din.attn.b1", Tensor::zeros(&[ha]));
        params.insert("din.attn.w2", uniform(ha, 1, s, rng)?);
        params.insert("din.fuse.w1", uniform(dx, hf, s, rng)?);
        params.insert("din.fuse.b1", Tensor::zeros(&[hf]));
        params.insert("din.fuse.w2", uniform(hf, d, s, rng)?);
        params.insert("din.fuse.b2", Tensor::zeros(&[d]));

        let p = cfg.packed_len();
        let dg = cfg.geo_dims.total();
        match cfg.gs_variant {
            GsVariant::Kmeans => {
                let (m, w1, w2) = (cfg.m, uniform(d, cfg.m, s, rng)?, uniform(cfg.m, d, s, rng)?);
                let tower = pack_micro_mlp(w1.data(), &vec![0.0; m], w2.data(), &vec![0.0; d]);
                let towers: Vec<f64> = (0..cfg.k).flat_map(|_| tower.iter().copied()).collect();
                params.insert("gs.towers", Tensor::matrix(cfg.k, p, towers)?);
                params.insert(CENTROIDS, Tensor::zeros(&[cfg.k, dg]));
            }
            GsVariant::Proto => {
                params.insert("gs.proto.w", uniform(p, dg, s, rng)?);
                params.insert("gs.proto.b", Tensor::zeros(&[p]));
                params.insert(PROTOTYPES, Tensor::zeros(&[cfg.k, dg]));
            }
            GsVariant::Can => {
                params.insert(CAN_MAP, uniform(p, dg, s, rng)?);
            }
            GsVariant::Din => {}
        }
        Self::bind(params, cfg, vocab)
    }

    /// Resolves the slots of an existing parameter store.
    pub fn bind(params: &ParamStore, cfg: &ModelConfig, vocab: &Vocab) -> Result<Self> {
        validate(cfg, vocab)?;
        let geo = EmbeddingTables::bind(params, &vocab.geo, cfg.geo_dims, cfg.aoi_level)?;
        let tables = StateTables::bind(
            params,
            geo,
            &vocab.profile,
            cfg.d_profile,
            vocab.n_items,
            vocab.n_categories,
            cfg.d_item,
        )?;
        let d = cfg.d_item;
        let dz = cfg.d_profile * vocab.profile.len() + cfg.geo_dims.total();
        let dx = dz + d;
        let (ha, hf) = (cfg.attention_hidden, cfg.fusion_hidden);
        let slot = |name: &str, shape: &[usize]| -> Result<SlotId> {
            let id = params.id(name)?;
            if params.value(id).shape() != shape {
                return Err(Error::ShapeMismatch {
                    op: "Model::bind",
                    left: params.value(id).shape().to_vec(),
                    right: shape.to_vec(),
                });
            }
            Ok(id)
        };
        let din = DinSlots {
            query_w: slot("din.query.w", &[dz, d])?,
            query_b: slot("din.query.b", &[d])?,
            attn_w1: slot("din.attn.w1", &[4 * d, ha])?,
            attn_b1: slot("din.attn.b1", &[ha])?,
            attn_w2: slot("din.attn.w2", &[ha, 1])?,
            fuse_w1: slot("din.fuse.w1", &[dx, hf])?,
            fuse_b1: slot("din.fuse.b1", &[hf])?,
            fuse_w2: slot("din.fuse.w2", &[hf, d])?,
            fuse_b2: slot("din.fuse.b2", &[d])?,
        };
        let (p, dg) = (cfg.packed_len(), cfg.geo_dims.total());
        let head = match cfg.gs_variant {
            GsVariant::Kmeans => HeadSlots::Kmeans {
                towers: slot("gs.towers", &[cfg.k, p])?,
                centroids: slot(CENTROIDS, &[cfg.k, dg])?,
            },
            GsVariant::Proto => HeadSlots::Proto {
                prototypes: slot(PROTOTYPES, &[cfg.k, dg])?,
                w: slot("gs.proto.w", &[p, dg])?,
                b: slot("gs.proto.b", &[p])?,
            },
            GsVariant::Can => HeadSlots::Can {
                map: slot(CAN_MAP, &[p, dg])?,
            },
            GsVariant::Din => HeadSlots::Din,
        };
        Ok(Self {
            cfg: cfg.clone(),
            vocab: vocab.clone(),
            tables,
            din,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn variant(&self) -> GsVariant {
        self.cfg.gs_variant
    }

    pub fn tables(&self) -> &StateTables {
        &self.tables
    }

    pub fn d_g(&self) -> usize {
        self.cfg.geo_dims.total()
    }

    /// Slots of φ that only the E-step updates (k-means centroids).
    pub fn e_step_only_slots(&self) -> Vec<SlotId> {
        match self.head {
            HeadSlots::Kmeans { centroids, .. } => vec![centroids],
            _ => vec![],
        }
    }

    /// The recognition parameters φ as seen by [`grouping::assign`].
    pub fn recognition<'a>(&self, values: Values<'a>) -> RecognitionParams<'a> {
        let (k, dg, p) = (self.cfg.k, self.d_g(), self.cfg.packed_len());
        match self.head {
            HeadSlots::Kmeans { centroids, .. } => RecognitionParams::Kmeans {
                centroids: values.get(centroids),
                k,
                dim: dg,
            },
            HeadSlots::Proto { prototypes, .. } => RecognitionParams::Proto {
                prototypes: values.get(prototypes),
                k,
                dim: dg,
            },
            HeadSlots::Can { map } => RecognitionParams::Can {
                map: values.get(map),
                p,
                dim: dg,
            },
            HeadSlots::Din => RecognitionParams::Shared,
        }
    }

    pub fn encode_state(&self, values: Values<'_>, state: &State) -> Result<EncodedState> {
        self.tables.encode_state(values, state)
    }

    /// Candidate embedding matrix `[C, d_a]`.
    pub fn candidate_embeddings(&self, values: Values<'_>, candidates: &[u32]) -> Result<Tensor> {
        if candidates.is_empty() {
            return Err(Error::EmptyInput("candidate set"));
        }
        let d = self.cfg.d_item;
        let mut data = vec![0.0; candidates.len() * d];
        for (c, &item) in candidates.iter().enumerate() {
            let cat = self.category(item)?;
            self.tables
                .item_embedding(values, item, cat, &mut data[c * d..(c + 1) * d])?;
        }
        Tensor::matrix(candidates.len(), d, data)
    }

    fn category(&self, item: u32) -> Result<u32> {
        self.vocab
            .item_category
            .get(item as usize)
            .copied()
            .ok_or(Error::IdOutOfRange {
                feature: "item".into(),
                id: item as usize,
                vocab: self.vocab.n_items,
            })
    }

    // -- shared tower --------------------------------------------------------

    /// Runs the shared tower on encoded state parts.
    pub fn din_forward(&self, values: Values<'_>, enc: EncodedState) -> DinTape {
        let d = self.cfg.d_item;
        let ha = self.cfg.attention_hidden;
        let hf = self.cfg.fusion_hidden;
        let s = &self.din;

        let z = [enc.profile_vec.as_slice(), enc.g.as_slice()].concat();
        let mut q = vec![0.0; d];
        affine_row(&z, values.get(s.query_w), values.get(s.query_b), &mut q);

        let len = enc.seq_len;
        let mut units = vec![0.0; len * 4 * d];
        let mut attn_hidden = vec![0.0; len * ha];
        let mut weights = vec![0.0; len];
        let mut attended = vec![0.0; d];
        if len > 0 {
            let w2 = values.get(s.attn_w2);
            for j in 0..len {
                let e = enc.seq_row(j);
                let u = &mut units[j * 4 * d..(j + 1) * 4 * d];
                for k in 0..d {
                    u[k] = e[k];
                    u[d + k] = q[k];
                    u[2 * d + k] = e[k] * q[k];
                    u[3 * d + k] = e[k] - q[k];
                }
                let t = &mut attn_hidden[j * ha..(j + 1) * ha];
                affine_row(u, values.get(s.attn_w1), values.get(s.attn_b1), t);
                t.iter_mut().for_each(|v| *v = v.tanh());
                weights[j] = dot(t, w2);
            }
            softmax_in_place(&mut weights);
            for j in 0..len {
                for (acc, &e) in attended.iter_mut().zip(enc.seq_row(j)) {
                    *acc += weights[j] * e;
                }
            }
        }

        let x = [
            enc.profile_vec.as_slice(),
            attended.as_slice(),
            enc.g.as_slice(),
        ]
        .concat();
        let mut fuse_hidden = vec![0.0; hf];
        affine_row(&x, values.get(s.fuse_w1), values.get(s.fuse_b1), &mut fuse_hidden);
        fuse_hidden.iter_mut().for_each(|v| *v = v.tanh());
        let mut a_s = vec![0.0; d];
        affine_row(&fuse_hidden, values.get(s.fuse_w2), values.get(s.fuse_b2), &mut a_s);

        DinTape {
            enc,
            z,
            q,
            units,
            attn_hidden,
            weights,
            attended,
            x,
            fuse_hidden,
            a_s,
        }
    }

    /// Backward through the shared tower. Returns `(d_profile, d_seq, dg)`.
    fn din_backward(
        &self,
        values: Values<'_>,
        tape: &DinTape,
        da_s: &[f64],
        grads: &mut Grads<'_>,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let d = self.cfg.d_item;
        let ha = self.cfg.attention_hidden;
        let hf = self.cfg.fusion_hidden;
        let s = &self.din;
        let dp = tape.enc.profile_vec.len();
        let len = tape.enc.seq_len;

        let mut d_fuse = vec![0.0; hf];
        let (gw, gb) = grads.pair_mut(s.fuse_w2, s.fuse_b2);
        affine_row_backward(
            &tape.fuse_hidden,
            values.get(s.fuse_w2),
            da_s,
            Some(gw),
            Some(gb),
            Some(&mut d_fuse),
        );
        for (g, h) in d_fuse.iter_mut().zip(&tape.fuse_hidden) {
            *g *= 1.0 - h * h;
        }
        let mut dx = vec![0.0; tape.x.len()];
        let (gw, gb) = grads.pair_mut(s.fuse_w1, s.fuse_b1);
        affine_row_backward(
            &tape.x,
            values.get(s.fuse_w1),
            &d_fuse,
            Some(gw),
            Some(gb),
            Some(&mut dx),
        );
        let mut d_profile = dx[..dp].to_vec();
        let d_att = &dx[dp..dp + d];
        let mut dg = dx[dp + d..].to_vec();

        let mut d_seq = vec![0.0; len * d];
        let mut dq = vec![0.0; d];
        if len > 0 {
            let dw: Vec<f64> = (0..len).map(|j| dot(d_att, tape.enc.seq_row(j))).collect();
            let mean: f64 = dw.iter().zip(&tape.weights).map(|(a, b)| a * b).sum();
            let w2 = values.get(s.attn_w2);
            let w1 = values.get(s.attn_w1);
            let mut dt = vec![0.0; ha];
            let mut du = vec![0.0; 4 * d];
            for j in 0..len {
                let wj = tape.weights[j];
                let ds = wj * (dw[j] - mean);
                let e = tape.enc.seq_row(j);
                let dseq = &mut d_seq[j * d..(j + 1) * d];
                for (g, &a) in dseq.iter_mut().zip(d_att) {
                    *g += wj * a;
                }
                let t = &tape.attn_hidden[j * ha..(j + 1) * ha];
                for (g, &tv) in grads.get_mut(s.attn_w2).iter_mut().zip(t) {
                    *g += ds * tv;
                }
                for ((g, &w), &tv) in dt.iter_mut().zip(w2).zip(t) {
                    *g = ds * w * (1.0 - tv * tv);
                }
                du.fill(0.0);
                let u = &tape.units[j * 4 * d..(j + 1) * 4 * d];
                let (gw, gb) = grads.pair_mut(s.attn_w1, s.attn_b1);
                affine_row_backward(
                    u,
                    w1,
                    &dt,
                    Some(gw),
                    Some(gb),
                    Some(&mut du),
                );
                for k in 0..d {
                    dseq[k] += du[k] + du[2 * d + k] * tape.q[k] + du[3 * d + k];
                    dq[k] += du[d + k] + du[2 * d + k] * e[k] - du[3 * d + k];
                }
            }
        }

        let mut dz = vec![0.0; tape.z.len()];
        let (gw, gb) = grads.pair_mut(s.query_w, s.query_b);
        affine_row_backward(
            &tape.z,
            values.get(s.query_w),
            &dq,
            Some(gw),
            Some(gb),
            Some(&mut dz),
        );
        for (g, v) in d_profile.iter_mut().zip(&dz[..dp]) {
            *g += v;
        }
        for (g, v) in dg.iter_mut().zip(&dz[dp..]) {
            *g += v;
        }
        (d_profile, d_seq, dg)
    }

    // -- group-specification head -------------------------------------------

    /// Applies the head selected by `h` to the shared action `a_s`.
    pub fn gs_forward(&self, values: Values<'_>, a_s: &[f64], h: &GroupIndicator) -> Result<Vec<f64>> {
        Ok(self.head_forward(values, a_s, h)?.a)
    }

    fn head_forward(&self, values: Values<'_>, a_s: &[f64], h: &GroupIndicator) -> Result<HeadTape> {
        let (d, m, p) = (self.cfg.d_item, self.cfg.m, self.cfg.packed_len());
        let mismatch = || Error::VariantMismatch {
            expected: self.cfg.gs_variant.to_string(),
            got: h.kind().to_string(),
        };
        let (packed, route) = match (&self.head, h) {
            (HeadSlots::Din, GroupIndicator::Shared) => {
                return Ok(HeadTape {
                    packed: vec![],
                    hidden: vec![],
                    a: a_s.to_vec(),
                    route: None,
                })
            }
            (HeadSlots::Kmeans { towers, .. }, GroupIndicator::Discrete(k)) => {
                let k = self.check_group(*k)?;
                (values.get(*towers)[k * p..(k + 1) * p].to_vec(), Some(k))
            }
            (HeadSlots::Proto { prototypes, w, b }, GroupIndicator::Discrete(k)) => {
                let k = self.check_group(*k)?;
                let dg = self.d_g();
                let proto = &values.get(*prototypes)[k * dg..(k + 1) * dg];
                let mut pre = vec![0.0; p];
                matvec(values.get(*w), dg, proto, &mut pre);
                for (v, bias) in pre.iter_mut().zip(values.get(*b)) {
                    *v += bias;
                }
                (pre.iter().map(|v| v.tanh()).collect(), Some(k))
            }
            (HeadSlots::Can { .. }, GroupIndicator::Dense(hv)) => {
                if hv.len() != p {
                    return Err(Error::PackedLength {
                        expected: p,
                        got: hv.len(),
                    });
                }
                (hv.clone(), None)
            }
            _ => return Err(mismatch()),
        };
        let mlp = unpack_micro_mlp(&packed, d, m)?;
        let (hidden, a) = mlp.forward(a_s);
        Ok(HeadTape {
            packed,
            hidden,
            a,
            route,
        })
    }

    fn check_group(&self, k: usize) -> Result<usize> {
        if k >= self.cfg.k {
            return Err(Error::IndexOutOfRange {
                index: k,
                len: self.cfg.k,
            });
        }
        Ok(k)
    }

    /// Backward through the head; returns `da_s` and adds into `dg` for the CAN head.
    fn head_backward(
        &self,
        values: Values<'_>,
        tape: &HeadTape,
        a_s: &[f64],
        g: &[f64],
        da: &[f64],
        dg: &mut [f64],
        grads: &mut Grads<'_>,
    ) -> Result<Vec<f64>> {
        let (d, m, p) = (self.cfg.d_item, self.cfg.m, self.cfg.packed_len());
        if let HeadSlots::Din = self.head {
            return Ok(da.to_vec());
        }
        let mlp = unpack_micro_mlp(&tape.packed, d, m)?;
        let mut da_s = vec![0.0; d];
        let mut dv = vec![0.0; p];
        mlp.backward(a_s, &tape.hidden, da, Some(&mut dv), &mut da_s);
        let dg_dim = self.d_g();
        match self.head {
            HeadSlots::Kmeans { towers, .. } => {
                let k = tape.route.expect("discrete route");
                for (g, v) in grads.get_mut(towers)[k * p..(k + 1) * p].iter_mut().zip(&dv) {
                    *g += v;
                }
            }
            HeadSlots::Proto { prototypes, w, b } => {
                let k = tape.route.expect("discrete route");
                let dpre: Vec<f64> = dv
                    .iter()
                    .zip(&tape.packed)
                    .map(|(g, eta)| g * (1.0 - eta * eta))
                    .collect();
                let proto = &values.get(prototypes)[k * dg_dim..(k + 1) * dg_dim];
                let mut dproto = vec![0.0; dg_dim];
                matvec_backward(
                    values.get(w),
                    dg_dim,
                    proto,
                    &dpre,
                    Some(grads.get_mut(w)),
                    Some(&mut dproto),
                );
                for (g, v) in grads.get_mut(b).iter_mut().zip(&dpre) {
                    *g += v;
                }
                for (g, v) in grads.get_mut(prototypes)[k * dg_dim..(k + 1) * dg_dim]
                    .iter_mut()
                    .zip(&dproto)
                {
                    *g += v;
                }
            }
            HeadSlots::Can { map } => {
                matvec_backward(values.get(map), dg_dim, g, &dv, Some(grads.get_mut(map)), Some(dg));
            }
            HeadSlots::Din => unreachable!(),
        }
        Ok(da_s)
    }

    // -- full stack ------------------------------------------------------------

    /// The group indicator for a geo embedding under the current φ.
    pub fn assign(&self, values: Values<'_>, g: &[f64]) -> Result<GroupIndicator> {
        grouping::assign(g, &self.recognition(values))
    }

    /// Scores a candidate set for `state`.
    pub fn forward(&self, values: Values<'_>, state: &State, candidates: &[u32]) -> Result<StepOutput> {
        let enc = self.encode_state(values, state)?;
        let group = self.assign(values, &enc.g)?;
        let din = self.din_forward(values, enc);
        let head = self.head_forward(values, &din.a_s, &group)?;
        let emb = self.candidate_embeddings(values, candidates)?;
        let logits = score_items(&head.a, &emb)?;
        Ok(StepOutput {
            logits,
            a: head.a,
            group,
        })
    }

    pub fn logits(&self, values: Values<'_>, state: &State, candidates: &[u32]) -> Result<Vec<f64>> {
        Ok(self.forward(values, state, candidates)?.logits)
    }

    /// `log π(chosen | state)` with the discrete route fixed to `route` when given.
    pub fn log_prob(
        &self,
        values: Values<'_>,
        state: &State,
        candidates: &[u32],
        chosen: usize,
        route: Option<usize>,
    ) -> Result<f64> {
        let enc = self.encode_state(values, state)?;
        let group = self.group_for(values, &enc.g, route)?;
        let din = self.din_forward(values, enc);
        let head = self.head_forward(values, &din.a_s, &group)?;
        let emb = self.candidate_embeddings(values, candidates)?;
        policy_log_prob(&score_items(&head.a, &emb)?, chosen)
    }

    fn group_for(&self, values: Values<'_>, g: &[f64], route: Option<usize>) -> Result<GroupIndicator> {
        match (self.cfg.gs_variant, route) {
            (GsVariant::Kmeans | GsVariant::Proto, Some(k)) => Ok(GroupIndicator::Discrete(k)),
            _ => self.assign(values, g),
        }
    }

    /// Accumulates `weight · ∇ log π(chosen | state)` into `grads` and returns the log-probability.
    ///
    /// The discrete route is held fixed at `route` when given, otherwise it is
    /// recomputed from the current φ. The CAN indicator `h = L g` is always
    /// recomputed, so gradients reach both `L` and the geo tables through it.
    #[allow(clippy::too_many_arguments)]
    pub fn accumulate_log_prob_grad(
        &self,
        values: Values<'_>,
        grads: &mut Grads<'_>,
        state: &State,
        candidates: &[u32],
        chosen: usize,
        route: Option<usize>,
        weight: f64,
    ) -> Result<f64> {
        let enc = self.encode_state(values, state)?;
        let group = self.group_for(values, &enc.g, route)?;
        let din = self.din_forward(values, enc);
        let head = self.head_forward(values, &din.a_s, &group)?;
        let emb = self.candidate_embeddings(values, candidates)?;
        let logits = score_items(&head.a, &emb)?;
        let log_prob = policy_log_prob(&logits, chosen)?;

        let mut probs = logits;
        softmax_in_place(&mut probs);
        let d = self.cfg.d_item;
        let mut da = vec![0.0; d];
        for (c, &item) in candidates.iter().enumerate() {
            let indicator = if c == chosen { 1.0 } else { 0.0 };
            let dl = weight * (indicator - probs[c]);
            if dl == 0.0 {
                continue;
            }
            let e = emb.row(c);
            for (g, &v) in da.iter_mut().zip(e) {
                *g += dl * v;
            }
            let de: Vec<f64> = head.a.iter().map(|v| dl * v).collect();
            self.tables.item_backward(item, self.category(item)?, &de, grads);
        }

        let mut dg_head = vec![0.0; self.d_g()];
        let da_s = self.head_backward(values, &head, &din.a_s, &din.enc.g, &da, &mut dg_head, grads)?;
        let (d_profile, d_seq, mut dg) = self.din_backward(values, &din, &da_s, grads);
        for (g, v) in dg.iter_mut().zip(&dg_head) {
            *g += v;
        }
        self.tables
            .encode_backward(state, &d_profile, &d_seq, &dg, grads)?;
        Ok(log_prob)
    }
}

fn validate(cfg: &ModelConfig, vocab: &Vocab) -> Result<()> {
    let bad = |path: &str, message: &str| {
        Err(Error::Config {
            path: path.into(),
            message: message.into(),
        })
    };
    if matches!(cfg.gs_variant, GsVariant::Kmeans | GsVariant::Proto) && cfg.k < 2 {
        return bad("model.k", "discrete heads need K >= 2");
    }
    if cfg.d_item == 0 || cfg.m == 0 || cfg.d_profile == 0 {
        return bad("model", "dims must be >= 1");
    }
    if cfg.attention_hidden == 0 || cfg.fusion_hidden == 0 {
        return bad("model", "hidden widths must be >= 1");
    }
    if !(cfg.temperature > 0.0) {
        return bad("model.temperature", "must be positive");
    }
    if vocab.item_category.len() != vocab.n_items {
        return bad("env", "item_category must cover every item");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn packed_length_arithmetic() {
        assert_eq!(packed_len(8, 4), 76);
        let v = vec![0.0; 76];
        let mlp = unpack_micro_mlp(&v, 8, 4).unwrap();
        let (_, out) = mlp.forward(&[1.0; 8]);
        assert_eq!(out, vec![0.0; 8]);
        assert!(matches!(
            unpack_micro_mlp(&v[..70], 8, 4),
            Err(Error::PackedLength { expected: 76, got: 70 })
        ));
    }

    #[test]
    fn pack_unpack_round_trip() {
        let v: Vec<f64> = (0..76).map(|i| i as f64 * 0.5 - 3.0).collect();
        let mlp = unpack_micro_mlp(&v, 8, 4).unwrap();
        assert_eq!(pack_micro_mlp(mlp.w1, mlp.b1, mlp.w2, mlp.b2), v);
    }

    #[test]
    fn scoring_examples() {
        let cands = Tensor::matrix(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        assert_eq!(score_items(&[0., 1., 0.], &cands).unwrap(), vec![0., 1., 0.]);
        let zero = score_items(&[0.; 3], &cands).unwrap();
        assert_eq!(zero, vec![0.; 3]);
        let p = crate::numerics::softmax(&zero).unwrap();
        assert!(p.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn scoring_matches_naive_loop() {
        let a = [0.3, -0.7, 1.1, 0.2];
        let data: Vec<f64> = (0..20).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect();
        let cands = Tensor::matrix(5, 4, data.clone()).unwrap();
        let logits = score_items(&a, &cands).unwrap();
        for c in 0..5 {
            let mut acc = 0.0;
            for k in 0..4 {
                acc += a[k] * data[c * 4 + k];
            }
            assert!((logits[c] - acc).abs() < 1e-15);
        }
    }

    #[test]
    fn log_prob_examples() {
        assert!((policy_log_prob(&[0.0; 4], 2).unwrap() - 0.25f64.ln()).abs() < 1e-15);
        // ln σ(10) from a 50-digit computation.
        let lp = policy_log_prob(&[10.0, 0.0], 0).unwrap();
        assert!((lp - -4.539_889_921_686_464_6e-5).abs() < 1e-15, "{lp}");
        let logits = [0.3, -1.0, 2.5, 0.0, 0.7];
        let total: f64 = (0..5).map(|c| policy_log_prob(&logits, c).unwrap().exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(policy_log_prob(&logits, 5).is_err());
    }

    #[test]
    fn top_k_examples() {
        assert_eq!(top_k_recommend(&[3., 1., 2.], 2).unwrap(), vec![0, 2]);
        assert_eq!(top_k_recommend(&[1., 1., 1.], 2).unwrap(), vec![0, 1]);
        assert_eq!(top_k_recommend(&[0.5, 2.0, -1.0], 3).unwrap(), vec![1, 0, 2]);
        assert!(top_k_recommend(&[1.0], 2).is_err());
    }

    #[test]
    fn variant_parses() {
        assert_eq!("can".parse::<GsVariant>().unwrap(), GsVariant::Can);
        assert!("star".parse::<GsVariant>().is_err());
    }
}
