//! Spatiotemporal features: raw geo ids, their embedding tables, and state encoding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Grads, ParamStore, SlotId, Tensor, Values};

pub const AOI_LEVELS: usize = 5;
pub const HOURS: usize = 24;
pub const SEASONS: usize = 4;

/// Raw spatiotemporal identifiers of one request.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeoContext {
    pub city_id: u32,
    pub gps_cell_id: u32,
    /// One AOI id per hierarchy level, coarse to fine.
    pub aoi_path: [u32; AOI_LEVELS],
    pub hour: u8,
    pub season: u8,
}

/// Returns the AOI id at `level` (1 = coarsest, 5 = finest).
pub fn aoi_at_level(path: &[u32; AOI_LEVELS], level: usize) -> Result<u32> {
    if !(1..=AOI_LEVELS).contains(&level) {
        return Err(Error::InvalidAoiLevel(level));
    }
    Ok(path[level - 1])
}

/// Vocabulary sizes of the geo features.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeoVocab {
    pub cities: usize,
    pub gps_cells: usize,
    /// Vocabulary size per AOI level.
    pub aoi: [usize; AOI_LEVELS],
}

/// Embedding width per geo feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeoDims {
    pub city: usize,
    pub gps_cell: usize,
    pub aoi: usize,
    pub hour: usize,
    pub season: usize,
}

impl Default for GeoDims {
    fn default() -> Self {
        Self {
            city: 8,
            gps_cell: 8,
            aoi: 16,
            hour: 4,
            season: 4,
        }
    }
}

impl GeoDims {
    pub fn total(&self) -> usize {
        self.city + self.gps_cell + self.aoi + self.hour + self.season
    }
}

/// The five geo embedding tables, with one active AOI level.
#[derive(Debug, Clone)]
pub struct EmbeddingTables {
    city: SlotId,
    gps_cell: SlotId,
    aoi: SlotId,
    hour: SlotId,
    season: SlotId,
    dims: GeoDims,
    vocab: GeoVocab,
    aoi_level: usize,
}

const GEO_SLOTS: [&str; 5] = ["geo.city", "geo.gps_cell", "geo.aoi", "geo.hour", "geo.season"];

impl EmbeddingTables {
    /// Creates uniformly initialized tables in `params`.
    pub fn init(
        params: &mut ParamStore,
        vocab: &GeoVocab,
        dims: GeoDims,
        aoi_level: usize,
        scale: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if !(1..=AOI_LEVELS).contains(&aoi_level) {
            return Err(Error::InvalidAoiLevel(aoi_level));
        }
        let sizes = [
            (vocab.cities, dims.city),
            (vocab.gps_cells, dims.gps_cell),
            (vocab.aoi[aoi_level - 1], dims.aoi),
            (HOURS, dims.hour),
            (SEASONS, dims.season),
        ];
        for (name, (rows, cols)) in GEO_SLOTS.iter().zip(sizes) {
            params.insert(*name, uniform(rows, cols, scale, rng)?);
        }
        Self::bind(params, vocab, dims, aoi_level)
    }

    /// Resolves existing tables in `params`, checking their shapes.
    pub fn bind(
        params: &ParamStore,
        vocab: &GeoVocab,
        dims: GeoDims,
        aoi_level: usize,
    ) -> Result<Self> {
        if !(1..=AOI_LEVELS).contains(&aoi_level) {
            return Err(Error::InvalidAoiLevel(aoi_level));
        }
        if [dims.city, dims.gps_cell, dims.aoi, dims.hour, dims.season].contains(&0) {
            return Err(Error::Spec("geo embedding dims must be >= 1".into()));
        }
        let expected = [
            [vocab.cities, dims.city],
            [vocab.gps_cells, dims.gps_cell],
            [vocab.aoi[aoi_level - 1], dims.aoi],
            [HOURS, dims.hour],
            [SEASONS, dims.season],
        ];
        let mut ids = [SlotId(0); 5];
        for ((name, shape), id) in GEO_SLOTS.iter().zip(expected).zip(ids.iter_mut()) {
            *id = params.id(name)?;
            if params.value(*id).shape() != shape {
                return Err(Error::ShapeMismatch {
                    op: "EmbeddingTables::bind",
                    left: params.value(*id).shape().to_vec(),
                    right: shape.to_vec(),
                });
            }
        }
        Ok(Self {
            city: ids[0],
            gps_cell: ids[1],
            aoi: ids[2],
            hour: ids[3],
            season: ids[4],
            dims,
            vocab: vocab.clone(),
            aoi_level,
        })
    }

    pub fn d_g(&self) -> usize {
        self.dims.total()
    }

    pub fn aoi_level(&self) -> usize {
        self.aoi_level
    }

    pub fn dims(&self) -> GeoDims {
        self.dims
    }

    /// Table rows looked up for `ctx`, validated against the vocabularies.
    fn rows(&self, ctx: &GeoContext) -> Result<[(SlotId, usize, usize); 5]> {
        let aoi = aoi_at_level(&ctx.aoi_path, self.aoi_level)? as usize;
        let checks = [
            ("city", ctx.city_id as usize, self.vocab.cities),
            ("gps_cell", ctx.gps_cell_id as usize, self.vocab.gps_cells),
            ("aoi", aoi, self.vocab.aoi[self.aoi_level - 1]),
            ("hour", ctx.hour as usize, HOURS),
            ("season", ctx.season as usize, SEASONS),
        ];
        for (feature, id, vocab) in checks {
            if id >= vocab {
                return Err(Error::IdOutOfRange {
                    feature: feature.into(),
                    id,
                    vocab,
                });
            }
        }
        Ok([
            (self.city, checks[0].1, self.dims.city),
            (self.gps_cell, checks[1].1, self.dims.gps_cell),
            (self.aoi, checks[2].1, self.dims.aoi),
            (self.hour, checks[3].1, self.dims.hour),
            (self.season, checks[4].1, self.dims.season),
        ])
    }

    /// The geographic embedding g: concatenation of the five feature embeddings.
    pub fn encode(&self, values: Values<'_>, ctx: &GeoContext) -> Result<Vec<f64>> {
        let mut g = Vec::with_capacity(self.d_g());
        for (slot, row, dim) in self.rows(ctx)? {
            g.extend_from_slice(&values.get(slot)[row * dim..(row + 1) * dim]);
        }
        Ok(g)
    }

    /// Scatters `dg` back into the looked-up table rows.
    pub fn backward(&self, ctx: &GeoContext, dg: &[f64], grads: &mut Grads<'_>) -> Result<()> {
        let mut offset = 0;
        for (slot, row, dim) in self.rows(ctx)? {
            let table = grads.get_mut(slot);
            for (t, d) in table[row * dim..(row + 1) * dim]
                .iter_mut()
                .zip(&dg[offset..offset + dim])
            {
                *t += d;
            }
            offset += dim;
        }
        Ok(())
    }
}

/// Recommendation state: user profile, recent clicks, and geo context.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct State {
    pub user_profile_ids: Vec<u32>,
    /// `(item_id, category_id)` pairs, oldest first.
    pub behavior_seq: Vec<(u32, u32)>,
    pub geo: GeoContext,
}

/// Profile and item embedding tables consumed by the shared tower.
#[derive(Debug, Clone)]
pub struct StateTables {
    pub geo: EmbeddingTables,
    profile: Vec<(SlotId, usize)>,
    d_profile: usize,
    item: SlotId,
    category: SlotId,
    n_items: usize,
    n_categories: usize,
    d_item: usize,
}

/// Dense encodings of one state.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedState {
    pub profile_vec: Vec<f64>,
    /// Row-major `[L, d_item]`; empty when the behavior sequence is empty.
    pub seq_embs: Vec<f64>,
    pub seq_len: usize,
    pub g: Vec<f64>,
}

impl EncodedState {
    pub fn seq_is_empty(&self) -> bool {
        self.seq_len == 0
    }

    pub fn seq_row(&self, j: usize) -> &[f64] {
        let d = self.seq_embs.len() / self.seq_len.max(1);
        &self.seq_embs[j * d..(j + 1) * d]
    }
}

fn profile_slot(i: usize) -> String {
    format!("din.profile.{i}")
}

impl StateTables {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        params: &mut ParamStore,
        geo: EmbeddingTables,
        profile_vocab: &[usize],
        d_profile: usize,
        n_items: usize,
        n_categories: usize,
        d_item: usize,
        scale: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        for (i, &v) in profile_vocab.iter().enumerate() {
            params.insert(profile_slot(i), uniform(v, d_profile, scale, rng)?);
        }
        params.insert("din.item_emb", uniform(n_items, d_item, scale, rng)?);
        params.insert("din.category_emb", uniform(n_categories, d_item, scale, rng)?);
        Self::bind(params, geo, profile_vocab, d_profile, n_items, n_categories, d_item)
    }

    pub fn bind(
        params: &ParamStore,
        geo: EmbeddingTables,
        profile_vocab: &[usize],
        d_profile: usize,
        n_items: usize,
        n_categories: usize,
        d_item: usize,
    ) -> Result<Self> {
        let profile = profile_vocab
            .iter()
            .enumerate()
            .map(|(i, &v)| Ok((checked(params, &profile_slot(i), &[v, d_profile])?, v)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            geo,
            profile,
            d_profile,
            item: checked(params, "din.item_emb", &[n_items, d_item])?,
            category: checked(params, "din.category_emb", &[n_categories, d_item])?,
            n_items,
            n_categories,
            d_item,
        })
    }

    pub fn d_profile_total(&self) -> usize {
        self.profile.len() * self.d_profile
    }

    pub fn d_item(&self) -> usize {
        self.d_item
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    fn check_item(&self, item: u32, category: u32) -> Result<()> {
        if item as usize >= self.n_items {
            return Err(Error::IdOutOfRange {
                feature: "item".into(),
                id: item as usize,
                vocab: self.n_items,
            });
        }
        if category as usize >= self.n_categories {
            return Err(Error::IdOutOfRange {
                feature: "category".into(),
                id: category as usize,
                vocab: self.n_categories,
            });
        }
        Ok(())
    }

    /// Item representation: item embedding plus its category embedding.
    pub fn item_embedding(
        &self,
        values: Values<'_>,
        item: u32,
        category: u32,
        out: &mut [f64],
    ) -> Result<()> {
        self.check_item(item, category)?;
        let d = self.d_item;
        let (i, c) = (item as usize, category as usize);
        let items = values.get(self.item);
        let cats = values.get(self.category);
        for k in 0..d {
            out[k] = items[i * d + k] + cats[c * d + k];
        }
        Ok(())
    }

    pub fn item_backward(&self, item: u32, category: u32, de: &[f64], grads: &mut Grads<'_>) {
        let d = self.d_item;
        let (i, c) = (item as usize, category as usize);
        for (g, v) in grads.get_mut(self.item)[i * d..(i + 1) * d].iter_mut().zip(de) {
            *g += v;
        }
        for (g, v) in grads.get_mut(self.category)[c * d..(c + 1) * d].iter_mut().zip(de) {
            *g += v;
        }
    }

    /// Encodes profile, behavior sequence, and geo context.
    pub fn encode_state(&self, values: Values<'_>, state: &State) -> Result<EncodedState> {
        if state.user_profile_ids.len() != self.profile.len() {
            return Err(Error::ShapeMismatch {
                op: "encode_state profile ids",
                left: vec![state.user_profile_ids.len()],
                right: vec![self.profile.len()],
            });
        }
        let dp = self.d_profile;
        let mut profile_vec = Vec::with_capacity(self.d_profile_total());
        for (f, (&id, &(slot, vocab))) in state.user_profile_ids.iter().zip(&self.profile).enumerate() {
            let id = id as usize;
            if id >= vocab {
                return Err(Error::IdOutOfRange {
                    feature: format!("profile.{f}"),
                    id,
                    vocab,
                });
            }
            profile_vec.extend_from_slice(&values.get(slot)[id * dp..(id + 1) * dp]);
        }
        let seq_len = state.behavior_seq.len();
        let mut seq_embs = vec![0.0; seq_len * self.d_item];
        for (j, &(item, cat)) in state.behavior_seq.iter().enumerate() {
            self.item_embedding(
                values,
                item,
                cat,
                &mut seq_embs[j * self.d_item..(j + 1) * self.d_item],
            )?;
        }
        Ok(EncodedState {
            profile_vec,
            seq_embs,
            seq_len,
            g: self.geo.encode(values, &state.geo)?,
        })
    }

    /// Routes gradients of the encoded parts back into their tables.
    pub fn encode_backward(
        &self,
        state: &State,
        d_profile: &[f64],
        d_seq: &[f64],
        dg: &[f64],
        grads: &mut Grads<'_>,
    ) -> Result<()> {
        let dp = self.d_profile;
        for (f, (&id, &(slot, _))) in state.user_profile_ids.iter().zip(&self.profile).enumerate() {
            let id = id as usize;
            for (g, v) in grads.get_mut(slot)[id * dp..(id + 1) * dp]
                .iter_mut()
                .zip(&d_profile[f * dp..(f + 1) * dp])
            {
                *g += v;
            }
        }
        let d = self.d_item;
        for (j, &(item, cat)) in state.behavior_seq.iter().enumerate() {
            self.item_backward(item, cat, &d_seq[j * d..(j + 1) * d], grads);
        }
        self.geo.backward(&state.geo, dg, grads)
    }
}

fn checked(params: &ParamStore, name: &str, shape: &[usize]) -> Result<SlotId> {
    let id = params.id(name)?;
    if params.value(id).shape() != shape {
        return Err(Error::ShapeMismatch {
            op: "bind",
            left: params.value(id).shape().to_vec(),
            right: shape.to_vec(),
        });
    }
    Ok(id)
}

pub(crate) fn uniform(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Result<Tensor> {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-scale..scale))
        .collect();
    Tensor::matrix(rows, cols, data)
}
