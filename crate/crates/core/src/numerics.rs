//! Dense kernels with hand-written backward passes.
//!
//! Everything is `f64`, row-major, and single-threaded. Learnable quantities
//! live in a [`ParamStore`], which pairs every value slot with a gradient slot
//! of the same shape. Backward passes accumulate (`+=`) into those gradient
//! slots; callers clear them with [`ParamStore::zero_grads`].

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense row-major tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::ShapeMismatch {
                op: "Tensor::new",
                left: shape,
                right: vec![data.len()],
            });
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch {
                op: "Tensor::new",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.cols();
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let cols = self.cols();
        &mut self.data[i * cols..(i + 1) * cols]
    }

    pub fn rows(&self) -> usize {
        if self.shape.len() == 1 {
            1
        } else {
            self.shape[0]
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor has at least one dim")
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a slot in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SlotId(pub(crate) usize);

/// Named learnable tensors with parallel gradient buffers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct SlotJson {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a slot. Re-adding an existing name replaces its value and resets its gradient.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> SlotId {
        let name = name.into();
        let grad = Tensor::zeros(value.shape());
        if let Some(&i) = self.index.get(&name) {
            self.values[i] = value;
            self.grads[i] = grad;
            return SlotId(i);
        }
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        self.grads.push(grad);
        SlotId(id)
    }

    pub fn id(&self, name: &str) -> Result<SlotId> {
        self.index
            .get(name)
            .map(|&i| SlotId(i))
            .ok_or_else(|| Error::UnknownSlot(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = SlotId> {
        (0..self.values.len()).map(SlotId)
    }

    pub fn name(&self, id: SlotId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: SlotId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: SlotId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: SlotId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: SlotId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(self.value(self.id(name)?))
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn values(&self) -> Values<'_> {
        Values(&self.values)
    }

    /// Splits the store into read-only values and writable gradients.
    pub fn split_mut(&mut self) -> (Values<'_>, Grads<'_>) {
        (Values(&self.values), Grads(&mut self.grads))
    }

    /// L2 norm over all gradient entries.
    pub fn grad_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.data.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// `value += lr * grad` for the given slots. Zero gradient entries leave values bit-identical.
    pub fn ascend(&mut self, slots: &[SlotId], lr: f64) {
        for &id in slots {
            let grad = &self.grads[id.0];
            for (v, &g) in self.values[id.0].data.iter_mut().zip(&grad.data) {
                if g != 0.0 {
                    *v += lr * g;
                }
            }
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let map: BTreeMap<&str, SlotJson> = self
            .names
            .iter()
            .zip(&self.values)
            .map(|(name, value)| {
                (
                    name.as_str(),
                    SlotJson {
                        shape: value.shape.clone(),
                        data: value.data.clone(),
                    },
                )
            })
            .collect();
        Ok(serde_json::to_string_pretty(&map)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let map: BTreeMap<String, SlotJson> = serde_json::from_str(text)?;
        let mut store = Self::new();
        for (name, slot) in map {
            store.insert(name, Tensor::new(slot.shape, slot.data)?);
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// Read-only view of parameter values, indexed by [`SlotId`].
#[derive(Clone, Copy)]
pub struct Values<'a>(&'a [Tensor]);

impl<'a> Values<'a> {
    pub fn get(&self, id: SlotId) -> &'a [f64] {
        &self.0[id.0].data
    }

    pub fn tensor(&self, id: SlotId) -> &'a Tensor {
        &self.0[id.0]
    }
}

/// Writable view of gradient buffers, indexed by [`SlotId`].
pub struct Grads<'a>(&'a mut [Tensor]);

impl Grads<'_> {
    pub fn get_mut(&mut self, id: SlotId) -> &mut [f64] {
        &mut self.0[id.0].data
    }

    /// Two distinct buffers at once.
    pub fn pair_mut(&mut self, a: SlotId, b: SlotId) -> (&mut [f64], &mut [f64]) {
        assert_ne!(a.0, b.0, "pair_mut needs distinct slots");
        if a.0 < b.0 {
            let (lo, hi) = self.0.split_at_mut(b.0);
            (&mut lo[a.0].data, &mut hi[0].data)
        } else {
            let (lo, hi) = self.0.split_at_mut(a.0);
            (&mut hi[0].data, &mut lo[b.0].data)
        }
    }
}

// ---------------------------------------------------------------------------
// Slice kernels. A vector `x` of length d_in times `w` [d_in, d_out] plus `b`.

pub(crate) fn affine_row(x: &[f64], w: &[f64], b: &[f64], out: &mut [f64]) {
    let d_out = b.len();
    out.copy_from_slice(b);
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let wr = &w[i * d_out..(i + 1) * d_out];
        for (o, &wij) in out.iter_mut().zip(wr) {
            *o += xi * wij;
        }
    }
}

/// Backward of [`affine_row`]: accumulates `dw += x ⊗ dy`, `db += dy`, `dx += W dy`.
pub(crate) fn affine_row_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
    dx: Option<&mut [f64]>,
) {
    let d_out = dy.len();
    if let Some(dw) = dw {
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &mut dw[i * d_out..(i + 1) * d_out];
            for (g, &d) in row.iter_mut().zip(dy) {
                *g += xi * d;
            }
        }
    }
    if let Some(db) = db {
        for (g, &d) in db.iter_mut().zip(dy) {
            *g += d;
        }
    }
    if let Some(dx) = dx {
        for (i, g) in dx.iter_mut().enumerate() {
            let wr = &w[i * d_out..(i + 1) * d_out];
            *g += wr.iter().zip(dy).map(|(a, b)| a * b).sum::<f64>();
        }
    }
}

/// `out = W x` for `W: [rows, cols]` stored row-major.
pub(crate) fn matvec(w: &[f64], cols: usize, x: &[f64], out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        *o = dot(&w[i * cols..(i + 1) * cols], x);
    }
}

/// Backward of [`matvec`]: `dW += dy ⊗ x`, `dx += Wᵀ dy`.
pub(crate) fn matvec_backward(
    w: &[f64],
    cols: usize,
    x: &[f64],
    dy: &[f64],
    dw: Option<&mut [f64]>,
    dx: Option<&mut [f64]>,
) {
    if let Some(dw) = dw {
        for (i, &d) in dy.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            for (g, &xj) in dw[i * cols..(i + 1) * cols].iter_mut().zip(x) {
                *g += d * xj;
            }
        }
    }
    if let Some(dx) = dx {
        for (i, &d) in dy.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            for (g, &wij) in dx.iter_mut().zip(&w[i * cols..(i + 1) * cols]) {
                *g += d * wij;
            }
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

// ---------------------------------------------------------------------------
// Tensor-level operations.

/// `y = x W + b` for `x: [n, d_in]`, `W: [d_in, d_out]`, `b: [d_out]`.
pub fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_affine_shapes(x, w, b)?;
    let (n, d_out) = (x.rows(), w.cols());
    let mut out = vec![0.0; n * d_out];
    for r in 0..n {
        affine_row(x.row(r), &w.data, &b.data, &mut out[r * d_out..(r + 1) * d_out]);
    }
    Tensor::new(vec![n, d_out], out)
}

/// Gradients of [`affine`] given the upstream gradient `dy: [n, d_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineGrads {
    pub dx: Tensor,
    pub dw: Tensor,
    pub db: Tensor,
}

pub fn affine_backward(x: &Tensor, w: &Tensor, b: &Tensor, dy: &Tensor) -> Result<AffineGrads> {
    check_affine_shapes(x, w, b)?;
    let (n, d_out) = (x.rows(), w.cols());
    if dy.shape() != [n, d_out] {
        return Err(Error::ShapeMismatch {
            op: "affine_backward",
            left: dy.shape.clone(),
            right: vec![n, d_out],
        });
    }
    let mut dx = Tensor::zeros(&[n, w.rows()]);
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(b.shape());
    for r in 0..n {
        affine_row_backward(
            x.row(r),
            &w.data,
            dy.row(r),
            Some(&mut dw.data),
            Some(&mut db.data),
            Some(dx.row_mut(r)),
        );
    }
    Ok(AffineGrads { dx, dw, db })
}

fn check_affine_shapes(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<()> {
    if x.shape.len() != 2 || w.shape.len() != 2 || x.cols() != w.rows() {
        return Err(Error::ShapeMismatch {
            op: "affine",
            left: x.shape.clone(),
            right: w.shape.clone(),
        });
    }
    if b.shape != [w.cols()] {
        return Err(Error::ShapeMismatch {
            op: "affine bias",
            left: w.shape.clone(),
            right: b.shape.clone(),
        });
    }
    Ok(())
}

/// Numerically stable softmax.
pub fn softmax(z: &[f64]) -> Result<Vec<f64>> {
    if z.is_empty() {
        return Err(Error::EmptyInput("softmax"));
    }
    let mut out = z.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

pub(crate) fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

/// `log softmax(z)` without forming the probabilities.
pub fn log_softmax(z: &[f64]) -> Result<Vec<f64>> {
    if z.is_empty() {
        return Err(Error::EmptyInput("log_softmax"));
    }
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(z.iter().map(|v| v - lse).collect())
}

/// Cosine similarity; errors when either vector has zero norm.
pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::ShapeMismatch {
            op: "cosine_sim",
            left: vec![u.len()],
            right: vec![v.len()],
        });
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroNorm("cosine_sim"));
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Gradient of `cos(u, v)` with respect to `v`, scaled by `upstream` and added into `dv`.
pub(crate) fn cosine_grad_v(u: &[f64], v: &[f64], upstream: f64, dv: &mut [f64]) {
    let (nu, nv) = (norm(u), norm(v));
    let c = dot(u, v) / (nu * nv);
    for ((d, &ui), &vi) in dv.iter_mut().zip(u).zip(v) {
        *d += upstream * (ui / (nu * nv) - c * vi / (nv * nv));
    }
}

/// `G_t = Σ_{i≥t} γ^{i-t} r_i` for every step.
pub fn discounted_return(rewards: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::InvalidGamma(gamma));
    }
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    Ok(out)
}

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_slot: Option<String>,
    pub worst_index: usize,
    /// Analytic and numeric derivative at the worst coordinate.
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub coordinates: usize,
}

/// Compares analytic gradients against central differences on every coordinate.
///
/// `value` evaluates the objective; `analytic` must accumulate its gradient into
/// the store (grads are zeroed before the call). The relative error per
/// coordinate is `|a - n| / max(|a| + |n|, floor)`. The floor keeps
/// central-difference roundoff from dominating coordinates whose true
/// derivative is tiny; it should match the magnitude of the summed terms.
pub fn grad_check<F, G>(
    params: &mut ParamStore,
    eps: f64,
    floor: f64,
    mut value: F,
    mut analytic: G,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
    G: FnMut(&mut ParamStore) -> Result<()>,
{
    let base = value(params)?;
    if !base.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    params.zero_grads();
    analytic(params)?;
    let ids: Vec<SlotId> = params.ids().collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_slot: None,
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        coordinates: 0,
    };
    for id in ids {
        for i in 0..params.value(id).len() {
            let orig = params.value(id).data[i];
            params.value_mut(id).data[i] = orig + eps;
            let plus = value(params)?;
            params.value_mut(id).data[i] = orig - eps;
            let minus = value(params)?;
            params.value_mut(id).data[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "grad_check objective at {}[{i}]",
                    params.name(id)
                )));
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = params.grad(id).data[i];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(floor);
            report.coordinates += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_slot = Some(params.name(id).to_string());
                report.worst_index = i;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn affine_hand_examples() {
        let x = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let w = Tensor::matrix(2, 1, vec![2.0, 3.0]).unwrap();
        let b = Tensor::vector(vec![1.0]);
        assert_eq!(affine(&x, &w, &b).unwrap().data(), &[3.0]);

        let x = Tensor::zeros(&[3, 2]);
        let w = Tensor::matrix(2, 1, vec![7.0, -4.0]).unwrap();
        let b = Tensor::vector(vec![5.0]);
        assert_eq!(affine(&x, &w, &b).unwrap().data(), &[5.0, 5.0, 5.0]);
    }

    #[test]
    fn affine_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(&mut rng, &[3, 4]);
        let w = random_tensor(&mut rng, &[4, 2]);
        let b = random_tensor(&mut rng, &[2]);
        let y = affine(&x, &w, &b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = b.data()[j];
                for k in 0..4 {
                    acc += x.data()[i * 4 + k] * w.data()[k * 2 + j];
                }
                assert!((y.data()[i * 2 + j] - acc).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn affine_shape_errors_name_both_shapes() {
        let x = Tensor::zeros(&[1, 3]);
        let w = Tensor::zeros(&[2, 1]);
        let b = Tensor::zeros(&[1]);
        let msg = affine(&x, &w, &b).unwrap_err().to_string();
        assert!(msg.contains("[1, 3]") && msg.contains("[2, 1]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-12 && p[1] < 1e-12);
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn softmax_matches_extended_precision() {
        // exp(1), exp(2), exp(3) normalized; reference values from a 50-digit computation.
        let expected = [
            0.090_030_573_170_380_46,
            0.244_728_471_054_797_6,
            0.665_240_955_774_821_9,
        ];
        let p = softmax(&[1.0, 2.0, 3.0]).unwrap();
        for (a, b) in p.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_sim(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_sim(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - 1.0 / 2f64.sqrt()).abs() < 1e-15);
        assert!(matches!(
            cosine_sim(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::ZeroNorm(_))
        ));
    }

    #[test]
    fn cosine_grad_matches_finite_differences() {
        let u = [0.3, -1.2, 0.7];
        let v = [1.1, 0.4, -0.5];
        let mut dv = [0.0; 3];
        cosine_grad_v(&u, &v, 1.0, &mut dv);
        for i in 0..3 {
            let mut vp = v;
            let mut vm = v;
            vp[i] += 1e-6;
            vm[i] -= 1e-6;
            let num = (cosine_sim(&u, &vp).unwrap() - cosine_sim(&u, &vm).unwrap()) / 2e-6;
            assert!((num - dv[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn discounted_return_examples() {
        // Direct geometric sums: 1 + 0.5*0 + 0.25*1, 0 + 0.5*1, 1.
        let direct: Vec<f64> = (0..3)
            .map(|t| {
                let r = [1.0, 0.0, 1.0];
                (t..3).map(|i| 0.5f64.powi((i - t) as i32) * r[i]).sum()
            })
            .collect();
        assert_eq!(direct, vec![1.25, 0.5, 1.0]);
        assert_eq!(discounted_return(&[1.0, 0.0, 1.0], 0.5).unwrap(), direct);
        assert_eq!(discounted_return(&[0.0; 3], 0.9).unwrap(), vec![0.0; 3]);
        assert_eq!(discounted_return(&[1.0], 1.0).unwrap(), vec![1.0]);
        assert!(discounted_return(&[1.0], 0.0).is_err());
        assert!(discounted_return(&[1.0], 1.5).is_err());
    }

    #[test]
    fn grad_check_single_affine_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_tensor(&mut rng, &[3, 4]);
        let mut params = ParamStore::new();
        let w = params.insert("w", random_tensor(&mut rng, &[4, 2]));
        let b = params.insert("b", random_tensor(&mut rng, &[2]));
        let f = |p: &ParamStore| -> Result<f64> {
            let y = affine(&x, p.value(w), p.value(b))?;
            Ok(y.data().iter().sum::<f64>() / y.len() as f64)
        };
        let g = |p: &mut ParamStore| -> Result<()> {
            let y = affine(&x, p.value(w), p.value(b))?;
            let dy = Tensor::new(y.shape().to_vec(), vec![1.0 / y.len() as f64; y.len()])?;
            let grads = affine_backward(&x, p.value(w), p.value(b), &dy)?;
            p.grad_mut(w).data_mut().copy_from_slice(grads.dw.data());
            p.grad_mut(b).data_mut().copy_from_slice(grads.db.data());
            Ok(())
        };
        let report = grad_check(&mut params, 1e-5, 1e-8, f, g).unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn grad_check_constant_function() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::vector(vec![1.0, 2.0]));
        let report = grad_check(&mut params, 1e-5, 1e-8, |_| Ok(4.0), |_| Ok(())).unwrap();
        assert_eq!(report.max_rel_error, 0.0);
        assert!(params.grad(params.id("w").unwrap()).data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn grad_check_rejects_non_finite() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::vector(vec![1.0]));
        assert!(grad_check(&mut params, 1e-5, 1e-8, |_| Ok(f64::NAN), |_| Ok(())).is_err());
    }

    #[test]
    fn param_store_json_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = ParamStore::new();
        params.insert("b.w", random_tensor(&mut rng, &[3, 2]));
        params.insert("a.v", random_tensor(&mut rng, &[4]));
        let back = ParamStore::from_json(&params.to_json().unwrap()).unwrap();
        for id in params.ids() {
            let name = params.name(id);
            assert_eq!(back.get(name).unwrap(), params.value(id));
        }
    }

    #[test]
    fn tensor_rejects_bad_length() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    }
}
