//! Per-node merging of the two channel embeddings of each study.
//!
//! Every mechanism works on `n × d` batches (one row per study); the vector
//! helpers at the bottom wrap a single row for direct use.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::linear::Linear;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionKind {
    Adaptive,
    Shared,
    #[default]
    Fusional,
}

impl FusionKind {
    pub const ALL: [FusionKind; 3] = [FusionKind::Adaptive, FusionKind::Shared, FusionKind::Fusional];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionKind::Adaptive => "adaptive",
            FusionKind::Shared => "shared",
            FusionKind::Fusional => "fusional",
        }
    }
}

impl FromStr for FusionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown fusion {s:?} (adaptive, shared, fusional)")))
    }
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Two-layer tanh perceptron scoring each channel row.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveParams {
    pub hidden: Linear,
    /// no bias: a shared offset cancels in the two-way softmax
    pub score: Linear,
}

impl AdaptiveParams {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize) -> Result<Self> {
        let h = (d / 2).max(1);
        Ok(Self {
            hidden: Linear::new(store, &format!("{prefix}.hidden"), d, h, true)?,
            score: Linear::new(store, &format!("{prefix}.score"), h, 1, false)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.hidden.d_in
    }

    fn row_score(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, store, x)?;
        let h = tape.tanh(h);
        self.score.forward(tape, store, h)
    }

    /// Returns the fused rows and the `n × 2` channel weights.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, hc: Var, ht: Var) -> Result<(Var, Var)> {
        check_pair(tape, hc, ht, self.dim())?;
        let sc = self.row_score(tape, store, hc)?;
        let st = self.row_score(tape, store, ht)?;
        let s = tape.concat(&[sc, st], 1)?;
        let alpha = tape.softmax(s, 1)?;
        let n = tape.shape(hc).0;
        let ac = tape.slice(alpha, 0..n, 0..1)?;
        let at = tape.slice(alpha, 0..n, 1..2)?;
        let c = tape.mul(hc, ac)?;
        let t = tape.mul(ht, at)?;
        Ok((tape.add(c, t)?, alpha))
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.hidden.params();
        v.extend(self.score.params());
        v
    }
}

/// One learnable weight per (study, coordinate), squashed into (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct SharedParams {
    pub raw: ParamId,
    pub rows: usize,
    pub dim: usize,
}

impl SharedParams {
    pub fn new(store: &mut ParamStore, prefix: &str, rows: usize, d: usize) -> Result<Self> {
        Ok(Self {
            raw: store.glorot(&format!("{prefix}.raw"), rows, d)?,
            rows,
            dim: d,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, hc: Var, ht: Var) -> Result<Var> {
        check_pair(tape, hc, ht, self.dim)?;
        if tape.shape(hc).0 != self.rows {
            return Err(Error::DimensionMismatch(format!(
                "shared fusion holds {} rows, got {}",
                self.rows,
                tape.shape(hc).0
            )));
        }
        let raw = tape.param(store, self.raw);
        let w = tape.sigmoid(raw);
        let diff = tape.sub(hc, ht)?;
        let moved = tape.mul(w, diff)?;
        Ok(tape.add(ht, moved)?)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.raw]
    }
}

/// Multi-head attention where the co-reference row queries the two
/// channel rows. Head `h` owns column block `h·d/N..(h+1)·d/N` of each
/// projection.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionalParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub heads: usize,
}

impl FusionalParams {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("fusion width {d} not divisible by {heads} heads")));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{prefix}.query"), d, d, true)?,
            key: Linear::new(store, &format!("{prefix}.key"), d, d, false)?,
            value: Linear::new(store, &format!("{prefix}.value"), d, d, true)?,
            heads,
        })
    }

    pub fn dim(&self) -> usize {
        self.query.d_in
    }

    /// Returns the fused rows and per-head `n × 2` attention weights.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, hc: Var, ht: Var) -> Result<(Var, Vec<Var>)> {
        let d = self.dim();
        check_pair(tape, hc, ht, d)?;
        let n = tape.shape(hc).0;
        let dh = d / self.heads;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let q = self.query.forward(tape, store, hc)?;
        let kc = self.key.forward(tape, store, hc)?;
        let kt = self.key.forward(tape, store, ht)?;
        let vc = self.value.forward(tape, store, hc)?;
        let vt = self.value.forward(tape, store, ht)?;
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = h * dh..(h + 1) * dh;
            let qh = tape.slice_cols(q, cols.clone())?;
            let kch = tape.slice_cols(kc, cols.clone())?;
            let kth = tape.slice_cols(kt, cols.clone())?;
            let sc = tape.row_dot(qh, kch)?;
            let st = tape.row_dot(qh, kth)?;
            let s = tape.concat(&[sc, st], 1)?;
            let s = tape.scale(s, inv_sqrt);
            let alpha = tape.softmax(s, 1)?;
            let ac = tape.slice(alpha, 0..n, 0..1)?;
            let at = tape.slice(alpha, 0..n, 1..2)?;
            let vch = tape.slice_cols(vc, cols.clone())?;
            let vth = tape.slice_cols(vt, cols)?;
            let c = tape.mul(vch, ac)?;
            let t = tape.mul(vth, at)?;
            outs.push(tape.add(c, t)?);
            weights.push(alpha);
        }
        Ok((tape.concat(&outs, 1)?, weights))
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.query.params();
        v.extend(self.key.params());
        v.extend(self.value.params());
        v
    }
}

/// Parameters of whichever mechanism a model uses.
#[derive(Debug, Clone, PartialEq)]
pub enum FusionParams {
    Adaptive(AdaptiveParams),
    Shared(SharedParams),
    Fusional(FusionalParams),
}

impl FusionParams {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        kind: FusionKind,
        rows: usize,
        d: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(match kind {
            FusionKind::Adaptive => FusionParams::Adaptive(AdaptiveParams::new(store, prefix, d)?),
            FusionKind::Shared => FusionParams::Shared(SharedParams::new(store, prefix, rows, d)?),
            FusionKind::Fusional => FusionParams::Fusional(FusionalParams::new(store, prefix, d, heads)?),
        })
    }

    pub fn kind(&self) -> FusionKind {
        match self {
            FusionParams::Adaptive(_) => FusionKind::Adaptive,
            FusionParams::Shared(_) => FusionKind::Shared,
            FusionParams::Fusional(_) => FusionKind::Fusional,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, hc: Var, ht: Var) -> Result<Var> {
        match self {
            FusionParams::Adaptive(p) => Ok(p.forward(tape, store, hc, ht)?.0),
            FusionParams::Shared(p) => p.forward(tape, store, hc, ht),
            FusionParams::Fusional(p) => Ok(p.forward(tape, store, hc, ht)?.0),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        match self {
            FusionParams::Adaptive(p) => p.params(),
            FusionParams::Shared(p) => p.params(),
            FusionParams::Fusional(p) => p.params(),
        }
    }
}

fn check_pair(tape: &Tape, hc: Var, ht: Var, d: usize) -> Result<()> {
    let (a, b) = (tape.shape(hc), tape.shape(ht));
    if a != b || a.1 != d {
        return Err(Error::DimensionMismatch(format!(
            "fusion expects two n×{d} inputs, got {a:?} and {b:?}"
        )));
    }
    Ok(())
}

fn row(v: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("row shape")
}

fn eval_pair(
    hc: &[f64],
    ht: &[f64],
    f: impl FnOnce(&mut Tape, Var, Var) -> Result<Var>,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let c = tape.constant(row(hc));
    let t = tape.constant(row(ht));
    let out = f(&mut tape, c, t)?;
    Ok(tape.value(out).iter().copied().collect())
}

pub fn adaptive_fuse(hc: &[f64], ht: &[f64], params: &AdaptiveParams, store: &ParamStore) -> Result<Vec<f64>> {
    eval_pair(hc, ht, |tape, c, t| Ok(params.forward(tape, store, c, t)?.0))
}

/// `w ⊙ hc + (1 − w) ⊙ ht` for an already squashed weight row.
pub fn shared_matrix_fuse(hc: &[f64], ht: &[f64], w: &[f64]) -> Result<Vec<f64>> {
    if hc.len() != ht.len() || hc.len() != w.len() {
        return Err(Error::DimensionMismatch(format!(
            "shared fusion lengths {}, {}, {}",
            hc.len(),
            ht.len(),
            w.len()
        )));
    }
    Ok(hc
        .iter()
        .zip(ht)
        .zip(w)
        .map(|((&c, &t), &w)| w * c + (1.0 - w) * t)
        .collect())
}

pub fn fusional_attention(hc: &[f64], ht: &[f64], params: &FusionalParams, store: &ParamStore) -> Result<Vec<f64>> {
    eval_pair(hc, ht, |tape, c, t| Ok(params.forward(tape, store, c, t)?.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn adaptive_equal_inputs_is_identity() {
        let mut store = ParamStore::new(1);
        let p = AdaptiveParams::new(&mut store, "f", 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = random_vec(&mut rng, 6);
        assert!(close(&adaptive_fuse(&h, &h, &p, &store).unwrap(), &h));
    }

    #[test]
    fn adaptive_zero_mlp_averages() {
        let mut store = ParamStore::new(2);
        let p = AdaptiveParams::new(&mut store, "f", 4).unwrap();
        store.value_mut(p.score.weight).fill(0.0);
        let hc = [1.0, 2.0, 3.0, 4.0];
        let ht = [3.0, 0.0, -1.0, 4.0];
        let out = adaptive_fuse(&hc, &ht, &p, &store).unwrap();
        assert!(close(&out, &[2.0, 1.0, 1.0, 4.0]));
    }

    #[test]
    fn adaptive_weights_are_convex_and_swap_symmetric() {
        let mut store = ParamStore::new(3);
        let p = AdaptiveParams::new(&mut store, "f", 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let hc = row(&random_vec(&mut rng, 5));
        let ht = row(&random_vec(&mut rng, 5));
        let mut tape = Tape::new();
        let c = tape.constant(hc.clone());
        let t = tape.constant(ht.clone());
        let (out, alpha) = p.forward(&mut tape, &store, c, t).unwrap();
        let (swapped, alpha_sw) = p.forward(&mut tape, &store, t, c).unwrap();
        let a = tape.value(alpha);
        assert!((a[[0, 0]] + a[[0, 1]] - 1.0).abs() < 1e-12);
        assert!((a[[0, 0]] - tape.value(alpha_sw)[[0, 1]]).abs() < 1e-12);
        for j in 0..5 {
            let o = tape.value(out)[[0, j]];
            let (lo, hi) = (hc[[0, j]].min(ht[[0, j]]), hc[[0, j]].max(ht[[0, j]]));
            assert!(o >= lo - 1e-12 && o <= hi + 1e-12);
            assert!((o - tape.value(swapped)[[0, j]]).abs() < 1e-12);
        }
    }

    #[test]
    fn shared_fuse_arithmetic() {
        let out = shared_matrix_fuse(&[1.0, 0.0], &[0.0, 1.0], &[0.25, 0.75]).unwrap();
        assert!(close(&out, &[0.25, 0.25]));
        let avg = shared_matrix_fuse(&[2.0, 4.0], &[0.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!(close(&avg, &[1.0, 2.0]));
        let near = shared_matrix_fuse(&[2.0], &[-2.0], &[1.0 - 1e-12]).unwrap();
        assert!((near[0] - 2.0).abs() < 1e-9);
        assert!(shared_matrix_fuse(&[1.0], &[1.0, 2.0], &[0.5]).is_err());
    }

    #[test]
    fn shared_batched_matches_vector_form() {
        let mut store = ParamStore::new(4);
        let p = SharedParams::new(&mut store, "f", 3, 2).unwrap();
        let hc = Array2::from_shape_fn((3, 2), |(i, j)| (i + j) as f64);
        let ht = Array2::from_shape_fn((3, 2), |(i, j)| (i * j) as f64 - 1.0);
        let mut tape = Tape::new();
        let c = tape.constant(hc.clone());
        let t = tape.constant(ht.clone());
        let out = p.forward(&mut tape, &store, c, t).unwrap();
        let w = store.value(p.raw).mapv(crate::autodiff::sigmoid);
        for i in 0..3 {
            let expect = shared_matrix_fuse(
                hc.row(i).as_slice().unwrap(),
                ht.row(i).as_slice().unwrap(),
                w.row(i).as_slice().unwrap(),
            )
            .unwrap();
            assert!(close(tape.value(out).row(i).as_slice().unwrap(), &expect));
        }
    }

    #[test]
    fn fusional_identical_keys_average_values() {
        let mut store = ParamStore::new(5);
        let p = FusionalParams::new(&mut store, "f", 4, 2).unwrap();
        store.value_mut(p.key.weight).fill(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let hc = random_vec(&mut rng, 4);
        let ht = random_vec(&mut rng, 4);
        let out = fusional_attention(&hc, &ht, &p, &store).unwrap();
        let w = store.value(p.value.weight);
        let b = store.value(p.value.bias.unwrap());
        let v = |x: &[f64]| row(x).dot(w) + b;
        let expect = (v(&hc) + v(&ht)) * 0.5;
        assert!(close(&out, expect.as_slice().unwrap()));
    }

    #[test]
    fn fusional_equal_inputs_return_value_row() {
        let mut store = ParamStore::new(6);
        let p = FusionalParams::new(&mut store, "f", 4, 2).unwrap();
        let h = [0.3, -0.2, 0.9, 0.1];
        let out = fusional_attention(&h, &h, &p, &store).unwrap();
        let v = row(&h).dot(store.value(p.value.weight)) + store.value(p.value.bias.unwrap());
        assert!(close(&out, v.as_slice().unwrap()));
    }

    #[test]
    fn fusional_rejects_indivisible_heads() {
        let mut store = ParamStore::new(7);
        assert!(matches!(FusionalParams::new(&mut store, "f", 6, 4), Err(Error::Config(_))));
    }

    #[test]
    fn fusion_kind_parses() {
        for k in FusionKind::ALL {
            assert_eq!(k.as_str().parse::<FusionKind>().unwrap(), k);
        }
        assert!("mean".parse::<FusionKind>().is_err());
    }
}
