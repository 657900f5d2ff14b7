//! The two embedding channels: heterogeneous attention over the
//! co-reference graph and homogeneous attention over the text graph.
//!
//! Both layers evaluate attention densely per target kind: a `targets ×
//! sources` logit block is built per head and relation, masked by the
//! graph's adjacency and normalized with a masked softmax. Graphs here have
//! at most a few thousand nodes, which keeps these blocks small.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::corpus::{EmbeddingTable, NodeKind, PerKind};
use crate::graphs::{EcgGraph, EtgGraph, Relation};
use crate::linear::Linear;
use crate::{Error, Result};

/// Incoming relations of one target kind, as a single dense mask.
#[derive(Debug, Clone)]
struct TargetPlan {
    relations: Vec<Relation>,
    /// column offset of each relation's source block
    offsets: Vec<usize>,
    mask: Array2<bool>,
    /// 1 for nodes with at least one in-neighbor, else 0 (n×1)
    has_in: Array2<f64>,
}

/// Precomputed masks of a co-reference (or unified) graph.
#[derive(Debug, Clone)]
pub struct HgtTopology {
    counts: PerKind<usize>,
    relations: Vec<Relation>,
    targets: PerKind<Option<TargetPlan>>,
}

impl HgtTopology {
    pub fn new(graph: &EcgGraph) -> Self {
        let relations: Vec<Relation> = graph.relations().collect();
        let targets = PerKind::from_fn(|kind| {
            let rels: Vec<Relation> = relations.iter().copied().filter(|r| r.dst_kind() == kind).collect();
            if rels.is_empty() {
                return None;
            }
            let blocks: Vec<Array2<bool>> = rels.iter().map(|&r| graph.adjacency(r)).collect();
            let mut offsets = Vec::with_capacity(rels.len());
            let mut total = 0;
            for b in &blocks {
                offsets.push(total);
                total += b.ncols();
            }
            let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
            let mask = ndarray::concatenate(Axis(1), &views).expect("blocks share row count");
            let has_in = mask
                .map_axis(Axis(1), |row| if row.iter().any(|&m| m) { 1.0 } else { 0.0 })
                .insert_axis(Axis(1));
            Some(TargetPlan {
                relations: rels,
                offsets,
                mask,
                has_in,
            })
        });
        Self {
            counts: graph.counts().clone(),
            relations,
            targets,
        }
    }

    pub fn relations(&self) -> &[Relation] {
        &self.relations
    }

    pub fn counts(&self) -> &PerKind<usize> {
        &self.counts
    }

    /// Nodes of `kind` with at least one in-neighbor.
    pub fn has_in_neighbors(&self, kind: NodeKind, i: usize) -> bool {
        self.targets[kind]
            .as_ref()
            .is_some_and(|p| p.has_in[[i, 0]] > 0.0)
    }

    /// Relations feeding `kind`, with the column offset of each source block
    /// inside the attention matrices returned by [`hgt_forward`].
    pub fn target_blocks(&self, kind: NodeKind) -> Vec<(Relation, usize)> {
        self.targets[kind]
            .as_ref()
            .map(|p| p.relations.iter().copied().zip(p.offsets.iter().copied()).collect())
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KindProjections {
    pub key: Linear,
    pub query: Linear,
    pub value: Linear,
    pub out: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelationParams {
    /// `heads · dk × dk`; rows `h·dk..(h+1)·dk` hold head `h`
    pub att: ParamId,
    pub msg: ParamId,
    /// 1×1 prior scaling the relation's logits
    pub mu: ParamId,
}

/// Parameters of one heterogeneous attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct HgtParams {
    pub d_in: usize,
    pub d_out: usize,
    pub heads: usize,
    pub kinds: PerKind<KindProjections>,
    /// Residual projections, present only when `d_in != d_out`.
    pub resize: Option<PerKind<Linear>>,
    pub relations: BTreeMap<Relation, RelationParams>,
}

impl HgtParams {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        heads: usize,
        relations: &[Relation],
    ) -> Result<Self> {
        if heads == 0 || d_out % heads != 0 {
            return Err(Error::Config(format!(
                "hgt width {d_out} not divisible by {heads} heads"
            )));
        }
        let dk = d_out / heads;
        let kinds = PerKind::from_fn(|k| k).try_map(|_, &kind| -> Result<KindProjections> {
            let p = format!("{prefix}.{kind}");
            Ok(KindProjections {
                key: Linear::new(store, &format!("{p}.key"), d_in, d_out, false)?,
                query: Linear::new(store, &format!("{p}.query"), d_in, d_out, true)?,
                value: Linear::new(store, &format!("{p}.value"), d_in, d_out, true)?,
                out: Linear::new(store, &format!("{p}.out"), d_out, d_out, true)?,
            })
        })?;
        let resize = if d_in != d_out {
            Some(PerKind::from_fn(|k| k).try_map(|_, &kind| {
                Linear::new(store, &format!("{prefix}.{kind}.resize"), d_in, d_out, false)
            })?)
        } else {
            None
        };
        let bound = (6.0 / (2 * dk) as f64).sqrt();
        let mut rel_params = BTreeMap::new();
        for &r in relations {
            let p = format!("{prefix}.rel.{r}");
            rel_params.insert(
                r,
                RelationParams {
                    att: store.uniform(&format!("{p}.att"), heads * dk, dk, bound)?,
                    msg: store.uniform(&format!("{p}.msg"), heads * dk, dk, bound)?,
                    mu: store.filled(&format!("{p}.mu"), 1, 1, 1.0)?,
                },
            );
        }
        Ok(Self {
            d_in,
            d_out,
            heads,
            kinds,
            resize,
            relations: rel_params,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d_out / self.heads
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        for (_, k) in self.kinds.iter() {
            for l in [&k.key, &k.query, &k.value, &k.out] {
                out.extend(l.params());
            }
        }
        if let Some(r) = &self.resize {
            for (_, l) in r.iter() {
                out.extend(l.params());
            }
        }
        for r in self.relations.values() {
            out.extend([r.att, r.msg, r.mu]);
        }
        out
    }
}

/// Layer output with per-kind, per-head attention matrices
/// (`targets × all sources`, column blocks as in
/// [`HgtTopology::target_blocks`]).
#[derive(Debug, Clone)]
pub struct HgtOutput {
    pub embeddings: PerKind<Var>,
    pub attention: PerKind<Vec<Var>>,
}

fn check_width(tape: &Tape, x: Var, width: usize, what: &str) -> Result<()> {
    let got = tape.shape(x).1;
    if got != width {
        return Err(Error::DimensionMismatch(format!("{what}: expected width {width}, got {got}")));
    }
    Ok(())
}

pub fn hgt_forward(
    tape: &mut Tape,
    store: &ParamStore,
    topo: &HgtTopology,
    h_prev: &PerKind<Var>,
    params: &HgtParams,
) -> Result<HgtOutput> {
    for (kind, &x) in h_prev.iter() {
        check_width(tape, x, params.d_in, "hgt input")?;
        if tape.shape(x).0 != topo.counts[kind] {
            return Err(Error::DimensionMismatch(format!(
                "hgt input for {kind} has {} rows, graph has {}",
                tape.shape(x).0,
                topo.counts[kind]
            )));
        }
    }
    for r in &topo.relations {
        if !params.relations.contains_key(r) {
            return Err(Error::UnknownRelation(*r));
        }
    }
    let dk = params.head_dim();
    let inv_sqrt = 1.0 / (dk as f64).sqrt();

    let mut keys = PerKind::default();
    let mut queries = PerKind::default();
    let mut values = PerKind::default();
    for kind in NodeKind::ALL {
        let proj = &params.kinds[kind];
        keys[kind] = Some(proj.key.forward(tape, store, h_prev[kind])?);
        queries[kind] = Some(proj.query.forward(tape, store, h_prev[kind])?);
        values[kind] = Some(proj.value.forward(tape, store, h_prev[kind])?);
    }
    let keys = keys.map(|_, v: &Option<Var>| v.expect("set above"));
    let queries = queries.map(|_, v: &Option<Var>| v.expect("set above"));
    let values = values.map(|_, v: &Option<Var>| v.expect("set above"));

    let mut embeddings: PerKind<Option<Var>> = PerKind::default();
    let mut attention: PerKind<Vec<Var>> = PerKind::default();
    for kind in NodeKind::ALL {
        let residual = match &params.resize {
            Some(r) => r[kind].forward(tape, store, h_prev[kind])?,
            None => h_prev[kind],
        };
        let Some(plan) = &topo.targets[kind] else {
            embeddings[kind] = Some(residual);
            continue;
        };
        let mut head_outputs = Vec::with_capacity(params.heads);
        for h in 0..params.heads {
            let cols = h * dk..(h + 1) * dk;
            let q = tape.slice_cols(queries[kind], cols.clone())?;
            let mut logit_blocks = Vec::with_capacity(plan.relations.len());
            let mut messages = Vec::with_capacity(plan.relations.len());
            for &rel in &plan.relations {
                let rp = &params.relations[&rel];
                let src = rel.src_kind();
                let att = tape.param(store, rp.att);
                let att = tape.slice_rows(att, cols.clone())?;
                let msg = tape.param(store, rp.msg);
                let msg = tape.slice_rows(msg, cols.clone())?;
                let mu = tape.param(store, rp.mu);

                let k = tape.slice_cols(keys[src], cols.clone())?;
                let k = tape.matmul(k, att)?;
                let kt = tape.transpose(k);
                let logits = tape.matmul(q, kt)?;
                let logits = tape.mul(logits, mu)?;
                logit_blocks.push(tape.scale(logits, inv_sqrt));

                let v = tape.slice_cols(values[src], cols.clone())?;
                messages.push(tape.matmul(v, msg)?);
            }
            let logits = tape.concat(&logit_blocks, 1)?;
            let att = tape.masked_softmax(logits, 1, &plan.mask)?;
            attention[kind].push(att);
            let n = topo.counts[kind];
            let mut agg: Option<Var> = None;
            for (i, &m) in messages.iter().enumerate() {
                let width = tape.shape(m).0;
                let block = tape.slice(att, 0..n, plan.offsets[i]..plan.offsets[i] + width)?;
                let contrib = tape.matmul(block, m)?;
                agg = Some(match agg {
                    Some(a) => tape.add(a, contrib)?,
                    None => contrib,
                });
            }
            head_outputs.push(agg.expect("target plan has at least one relation"));
        }
        let agg = tape.concat(&head_outputs, 1)?;
        let updated = params.kinds[kind].out.forward(tape, store, agg)?;
        let updated = tape.sigmoid(updated);
        let has_in = tape.constant(plan.has_in.clone());
        let updated = tape.mul(updated, has_in)?;
        embeddings[kind] = Some(tape.add(updated, residual)?);
    }
    Ok(HgtOutput {
        embeddings: embeddings.map(|_, v| v.expect("every kind produced")),
        attention,
    })
}

/// One heterogeneous attention layer over the co-reference graph.
pub fn hgt_layer(
    tape: &mut Tape,
    store: &ParamStore,
    topo: &HgtTopology,
    h_prev: &PerKind<Var>,
    params: &HgtParams,
) -> Result<PerKind<Var>> {
    Ok(hgt_forward(tape, store, topo, h_prev, params)?.embeddings)
}

/// Evaluate [`hgt_layer`] on plain values.
pub fn hgt_layer_values(
    graph: &EcgGraph,
    h_prev: &EmbeddingTable,
    params: &HgtParams,
    store: &ParamStore,
) -> Result<EmbeddingTable> {
    let topo = HgtTopology::new(graph);
    let mut tape = Tape::new();
    let inputs = h_prev.tables().map(|_, m| tape.constant(m.clone()));
    let out = hgt_layer(&mut tape, store, &topo, &inputs, params)?;
    let tables = out.map(|_, &v| tape.value(v).clone());
    Ok(EmbeddingTable::new(h_prev.layer() + 1, tables)?)
}

/// How per-head neighbor aggregates are combined in the text channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GatMean {
    /// attention-weighted neighbor sum per head, averaged over heads
    #[default]
    Heads,
    /// as `Heads`, with the neighbor sum additionally divided by degree
    Neighbors,
}

impl std::str::FromStr for GatMean {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "heads" => Ok(Self::Heads),
            "neighbors" => Ok(Self::Neighbors),
            _ => Err(format!("unknown gat mean {s:?}")),
        }
    }
}

impl fmt::Display for GatMean {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GatMean::Heads => "heads",
            GatMean::Neighbors => "neighbors",
        })
    }
}

/// Dense mask and degrees of the text graph.
#[derive(Debug, Clone)]
pub struct GatTopology {
    mask: Array2<bool>,
    inv_degree: Array2<f64>,
}

impl GatTopology {
    pub fn new(graph: &EtgGraph) -> Result<Self> {
        if let Some(j) = (0..graph.len()).find(|&j| !graph.has_self_loop(j)) {
            return Err(Error::MissingSelfLoop(j));
        }
        let mask = graph.adjacency();
        let inv_degree = mask
            .map_axis(Axis(1), |row| 1.0 / row.iter().filter(|&&m| m).count() as f64)
            .insert_axis(Axis(1));
        Ok(Self { mask, inv_degree })
    }

    pub fn len(&self) -> usize {
        self.mask.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.nrows() == 0
    }
}

/// Parameters of one homogeneous attention layer. Each head projects to
/// the full output width so heads can be averaged.
#[derive(Debug, Clone, PartialEq)]
pub struct GatParams {
    pub d_in: usize,
    pub d_out: usize,
    pub heads: usize,
    /// `d_in × heads · d_out`
    pub weight: ParamId,
    /// `2 · d_out × heads`; column `h` is `[a_target; a_source]` of head `h`
    pub attn: ParamId,
}

impl GatParams {
    pub fn new(store: &mut ParamStore, prefix: &str, d_in: usize, d_out: usize, heads: usize) -> Result<Self> {
        if heads == 0 {
            return Err(Error::Config("gat needs at least one head".into()));
        }
        let weight = store.glorot(&format!("{prefix}.weight"), d_in, heads * d_out)?;
        let attn = store.glorot(&format!("{prefix}.attn"), 2 * d_out, heads)?;
        Ok(Self {
            d_in,
            d_out,
            heads,
            weight,
            attn,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.weight, self.attn]
    }
}

#[derive(Debug, Clone)]
pub struct GatOutput {
    pub embedding: Var,
    /// per head, `targets × sources`
    pub attention: Vec<Var>,
}

pub fn gat_forward(
    tape: &mut Tape,
    store: &ParamStore,
    topo: &GatTopology,
    h_prev: Var,
    params: &GatParams,
    mean: GatMean,
) -> Result<GatOutput> {
    check_width(tape, h_prev, params.d_in, "gat input")?;
    let n = topo.len();
    if tape.shape(h_prev).0 != n {
        return Err(Error::DimensionMismatch(format!(
            "gat input has {} rows, graph has {n}",
            tape.shape(h_prev).0
        )));
    }
    let d = params.d_out;
    let w = tape.param(store, params.weight);
    let wh = tape.matmul(h_prev, w)?;
    let a = tape.param(store, params.attn);
    let zeros = tape.constant(Array2::zeros((n, n)));
    let inv_degree = match mean {
        GatMean::Heads => None,
        GatMean::Neighbors => Some(tape.constant(topo.inv_degree.clone())),
    };
    let mut sum: Option<Var> = None;
    let mut attention = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        let wh_h = tape.slice_cols(wh, h * d..(h + 1) * d)?;
        let a_dst = tape.slice(a, 0..d, h..h + 1)?;
        let a_src = tape.slice(a, d..2 * d, h..h + 1)?;
        let s_dst = tape.matmul(wh_h, a_dst)?;
        let s_src = tape.matmul(wh_h, a_src)?;
        let s_src = tape.transpose(s_src);
        let logits = tape.add(zeros, s_dst)?;
        let logits = tape.add(logits, s_src)?;
        let att = tape.masked_softmax(logits, 1, &topo.mask)?;
        attention.push(att);
        let mut agg = tape.matmul(att, wh_h)?;
        if let Some(inv) = inv_degree {
            agg = tape.mul(agg, inv)?;
        }
        sum = Some(match sum {
            Some(s) => tape.add(s, agg)?,
            None => agg,
        });
    }
    let mean_heads = tape.scale(sum.expect("at least one head"), 1.0 / params.heads as f64);
    Ok(GatOutput {
        embedding: tape.sigmoid(mean_heads),
        attention,
    })
}

/// One homogeneous attention layer over the text graph (evidence rows only).
pub fn gat_layer(
    tape: &mut Tape,
    store: &ParamStore,
    topo: &GatTopology,
    h_prev: Var,
    params: &GatParams,
    mean: GatMean,
) -> Result<Var> {
    Ok(gat_forward(tape, store, topo, h_prev, params, mean)?.embedding)
}

/// Evaluate [`gat_layer`] on a plain evidence matrix.
pub fn gat_layer_values(
    graph: &EtgGraph,
    h_prev: &Array2<f64>,
    params: &GatParams,
    store: &ParamStore,
    mean: GatMean,
) -> Result<Array2<f64>> {
    let topo = GatTopology::new(graph)?;
    let mut tape = Tape::new();
    let x = tape.constant(h_prev.clone());
    let out = gat_layer(&mut tape, store, &topo, x, params, mean)?;
    Ok(tape.value(out).clone())
}
