//! Hierarchical residual binders: f(p) = p + gamma * MLP(p) with a global
//! binder followed by one binder per transformer block, the learnable
//! absorbent token, the dual-branch spatial/temporal extension
//! MLP(p) = (1 - g(p)) MLP_s(p) + g(p) MLP_t(p), and span-routed
//! composition of designated prompts.
//!
//! Zero initialization is load-bearing everywhere: gamma = 0 makes every
//! fresh binder an exact identity, and the zero gate scalar makes a just
//! promoted dual-branch binder bit-identical to its single-branch parent.

use crate::checkpoint;
use crate::error::{BicoError, Result};
use crate::graph::{Graph, ValueId};
use crate::param::{ParamStore, StoreNodes};
use crate::rng_stream;
use crate::tensor::{Scalar, Tensor};
use crate::vocab::Vocabulary;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const GLOBAL_PREFIX: &str = "global";
pub const ABSORBENT_KEY: &str = "absorbent";
pub const MLP_KEYS: [&str; 6] = ["w1", "b1", "ln_g", "ln_b", "w2", "b2"];

pub fn block_prefix(i: usize) -> String {
    format!("block{i}")
}

/// All binder prefixes of a set: the global binder first, then one per
/// transformer block.
pub fn binder_prefixes(n_blocks: usize) -> Vec<String> {
    let mut v = vec![GLOBAL_PREFIX.to_string()];
    v.extend((0..n_blocks).map(block_prefix));
    v
}

/// All learned state for one concept source.
#[derive(Clone)]
pub struct BinderSet {
    pub source_id: String,
    pub params: ParamStore<f32>,
    pub bound_token_ids: Vec<u32>,
    /// Whether the temporal (phase B) training ran to completion.
    pub temporal: bool,
    /// Whether the binders are dual-branch (set at promotion).
    pub dual: bool,
    pub n_blocks: usize,
    pub d_model: usize,
    pub base_fingerprint: String,
}

impl BinderSet {
    /// Content hash of the current binder parameters.
    pub fn snapshot_hash(&self) -> String {
        checkpoint::fingerprint(&self.params)
    }

    pub fn check_base(&self, active_fingerprint: &str) -> Result<()> {
        if self.base_fingerprint != active_fingerprint {
            return Err(BicoError::FingerprintMismatch {
                expected: self.base_fingerprint.clone(),
                actual: active_fingerprint.to_string(),
            });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let metadata = serde_json::json!({
            "kind": "binder",
            "source_id": self.source_id,
            "bound_token_ids": self.bound_token_ids,
            "temporal": self.temporal,
            "dual": self.dual,
            "n_blocks": self.n_blocks,
            "d_model": self.d_model,
            "base_fingerprint": self.base_fingerprint,
        });
        checkpoint::write_container_file(path, &metadata, &checkpoint::store_tensors(&self.params))
    }

    pub fn load(path: &Path) -> Result<BinderSet> {
        let (metadata, tensors) = checkpoint::read_container_file(path)?;
        checkpoint::expect_kind(&metadata, "binder")?;
        let field = |name: &str| {
            metadata.get(name).cloned().ok_or_else(|| BicoError::Checkpoint {
                reason: format!("binder checkpoint missing `{name}`"),
            })
        };
        Ok(BinderSet {
            source_id: serde_json::from_value(field("source_id")?)?,
            params: checkpoint::tensors_into_store(tensors),
            bound_token_ids: serde_json::from_value(field("bound_token_ids")?)?,
            temporal: serde_json::from_value(field("temporal")?)?,
            dual: serde_json::from_value(field("dual")?)?,
            n_blocks: serde_json::from_value(field("n_blocks")?)?,
            d_model: serde_json::from_value(field("d_model")?)?,
            base_fingerprint: serde_json::from_value(field("base_fingerprint")?)?,
        })
    }
}

/// Fresh binder set: every binder is an exact identity (gamma = 0) and the
/// absorbent embedding starts near the PAD embedding.
pub fn init_binder_set(
    source_id: &str,
    n_blocks: usize,
    d_model: usize,
    pad_row: &[f32],
    bound_token_ids: Vec<u32>,
    base_fingerprint: &str,
    seed: u64,
) -> BinderSet {
    let mut rng = rng_stream(seed, &format!("binder.init.{source_id}"));
    let mut params = ParamStore::new();
    let hidden = 2 * d_model;
    for prefix in binder_prefixes(n_blocks) {
        let fan = (2.0 / (d_model + hidden) as f64).sqrt();
        params.insert(
            &format!("{prefix}.w1"),
            Tensor::randn(&[d_model, hidden], fan, &mut rng),
            true,
        );
        params.insert(&format!("{prefix}.b1"), Tensor::zeros(&[1, hidden]), true);
        params.insert(
            &format!("{prefix}.ln_g"),
            Tensor::full(&[1, hidden], 1.0),
            true,
        );
        params.insert(&format!("{prefix}.ln_b"), Tensor::zeros(&[1, hidden]), true);
        params.insert(
            &format!("{prefix}.w2"),
            Tensor::randn(&[hidden, d_model], fan, &mut rng),
            true,
        );
        params.insert(&format!("{prefix}.b2"), Tensor::zeros(&[1, d_model]), true);
        params.insert(&format!("{prefix}.gamma"), Tensor::zeros(&[1, 1]), true);
    }
    let mut absorbent = Tensor::zeros(&[1, d_model]);
    let noise = Tensor::<f32>::randn(&[1, d_model], 0.01, &mut rng);
    for (i, v) in absorbent.data_mut().iter_mut().enumerate() {
        *v = pad_row[i] + noise.data()[i];
    }
    params.insert(ABSORBENT_KEY, absorbent, true);
    BinderSet {
        source_id: source_id.to_string(),
        params,
        bound_token_ids,
        temporal: false,
        dual: false,
        n_blocks,
        d_model,
        base_fingerprint: base_fingerprint.to_string(),
    }
}

/// Split every binder MLP into a dual branch: mlp_s keeps the trained
/// weights, mlp_t starts as a deep copy, and the gate g(p) = m * sigmoid(
/// w^T p + b) starts with m = w = b = 0 so the output is bit-identical
/// until training moves the gate.
pub fn promote_to_dual_branch(set: &BinderSet) -> Result<BinderSet> {
    if set.dual {
        return Err(BicoError::AlreadyDualBranch);
    }
    let mut params = ParamStore::new();
    for prefix in binder_prefixes(set.n_blocks) {
        for key in MLP_KEYS {
            let old = set.params.get(&format!("{prefix}.{key}")).clone();
            params.insert(&format!("{prefix}.{key}.s"), old.clone(), true);
            params.insert(&format!("{prefix}.{key}.t"), old, true);
        }
        params.insert(
            &format!("{prefix}.gamma"),
            set.params.get(&format!("{prefix}.gamma")).clone(),
            true,
        );
        params.insert(&format!("{prefix}.gate.m"), Tensor::zeros(&[1, 1]), true);
        params.insert(
            &format!("{prefix}.gate.w"),
            Tensor::zeros(&[set.d_model, 1]),
            true,
        );
        params.insert(&format!("{prefix}.gate.b"), Tensor::zeros(&[1, 1]), true);
    }
    params.insert(ABSORBENT_KEY, set.params.get(ABSORBENT_KEY).clone(), true);
    Ok(BinderSet {
        source_id: set.source_id.clone(),
        params,
        bound_token_ids: set.bound_token_ids.clone(),
        temporal: set.temporal,
        dual: true,
        n_blocks: set.n_blocks,
        d_model: set.d_model,
        base_fingerprint: set.base_fingerprint.clone(),
    })
}

fn mlp_graph<S: Scalar>(
    g: &mut Graph<S>,
    nodes: &StoreNodes,
    prefix: &str,
    suffix: &str,
    p: ValueId,
) -> Result<ValueId> {
    let name = |key: &str| format!("{prefix}.{key}{suffix}");
    let h = g.linear(p, nodes.id(&name("w1")), nodes.id(&name("b1")))?;
    let h = g.layer_norm(h, nodes.id(&name("ln_g")), nodes.id(&name("ln_b")))?;
    let h = g.gelu(h);
    g.linear(h, nodes.id(&name("w2")), nodes.id(&name("b2")))
}

/// One binder application f(p) = p + gamma * MLP(p), row-wise.
pub fn apply_binder_graph<S: Scalar>(
    g: &mut Graph<S>,
    nodes: &StoreNodes,
    prefix: &str,
    dual: bool,
    p: ValueId,
) -> Result<ValueId> {
    let mix = if !dual {
        mlp_graph(g, nodes, prefix, "", p)?
    } else {
        let s = mlp_graph(g, nodes, prefix, ".s", p)?;
        let t = mlp_graph(g, nodes, prefix, ".t", p)?;
        let z = g.matmul(p, nodes.id(&format!("{prefix}.gate.w")))?;
        let z = g.add(z, nodes.id(&format!("{prefix}.gate.b")))?;
        let sig = g.sigmoid(z);
        let gate = g.mul(sig, nodes.id(&format!("{prefix}.gate.m")))?;
        let one_minus = g.affine(gate, -1.0, 1.0);
        let sm = g.mul(s, one_minus)?;
        let tm = g.mul(t, gate)?;
        g.add(sm, tm)?
    };
    let scaled = g.mul(mix, nodes.id(&format!("{prefix}.gamma")))?;
    g.add(p, scaled)
}

/// The hierarchical pass p_u^i = f_block_i(f_global(p)). `p_g` may be
/// precomputed once per graph and shared across blocks.
pub fn bindset_prompt_graph<S: Scalar>(
    g: &mut Graph<S>,
    nodes: &StoreNodes,
    set: &BinderSet,
    block_i: usize,
    p: ValueId,
) -> Result<ValueId> {
    if block_i >= set.n_blocks {
        return Err(BicoError::dim(
            "bindset_prompt",
            format!("block index {} out of {}", block_i, set.n_blocks),
        ));
    }
    let p_g = apply_binder_graph(g, nodes, GLOBAL_PREFIX, set.dual, p)?;
    apply_binder_graph(g, nodes, &block_prefix(block_i), set.dual, p_g)
}

/// Concatenate the absorbent row after the prompt rows.
pub fn attach_absorbent_graph<S: Scalar>(
    g: &mut Graph<S>,
    binder_nodes: &StoreNodes,
    p: ValueId,
    max_prompt_len: usize,
) -> Result<ValueId> {
    let rows = g.value(p).dims()[0];
    if rows + 1 > max_prompt_len {
        return Err(BicoError::PromptTooLong {
            len: rows + 1,
            max: max_prompt_len,
        });
    }
    let absorbent = binder_nodes.id(ABSORBENT_KEY);
    g.concat_rows(&[p, absorbent])
}

/// Tensor-level absorbent attach: returns the extended rows and the slot
/// index of the absorbent row.
pub fn attach_absorbent(
    rows: &Tensor<f32>,
    set: &BinderSet,
    max_prompt_len: usize,
) -> Result<(Tensor<f32>, usize)> {
    let l = rows.dims()[0];
    if l + 1 > max_prompt_len {
        return Err(BicoError::PromptTooLong {
            len: l + 1,
            max: max_prompt_len,
        });
    }
    let d = rows.dims()[1];
    let mut data = rows.data().to_vec();
    data.extend_from_slice(set.params.get(ABSORBENT_KEY).data());
    Ok((Tensor::new(vec![l + 1, d], data)?, l))
}

/// Tensor-level inverse of [`attach_absorbent`].
pub fn detach_absorbent(rows: &Tensor<f32>, slot: usize) -> Result<Tensor<f32>> {
    let (l, d) = (rows.dims()[0], rows.dims()[1]);
    if slot + 1 != l {
        return Err(BicoError::dim(
            "detach_absorbent",
            format!("slot {slot} is not the last of {l} rows"),
        ));
    }
    Tensor::new(vec![l - 1, d], rows.data()[..(l - 1) * d].to_vec())
}

// ── composition plans ────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Route {
    /// Pass the designated prompt rows through unchanged.
    Raw,
    /// Route through the named source's binder hierarchy.
    Source(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub route: Route,
}

/// The designated prompt plus span -> source routing. Positions not
/// covered by any span are implicitly RAW.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionPlan {
    pub designated_ids: Vec<u32>,
    pub spans: Vec<Span>,
}

impl CompositionPlan {
    pub fn validate(&self, known_source: &dyn Fn(&str) -> bool) -> Result<()> {
        let fail = |reason: String| Err(BicoError::InvalidPlan { reason });
        if self.designated_ids.is_empty() {
            return fail("designated prompt is empty".to_string());
        }
        let mut sorted = self.spans.clone();
        sorted.sort_by_key(|s| s.start);
        let mut prev_end = 0usize;
        for (i, s) in sorted.iter().enumerate() {
            if s.start >= s.end || s.end > self.designated_ids.len() {
                return fail(format!(
                    "span {}..{} out of bounds for prompt of length {}",
                    s.start,
                    s.end,
                    self.designated_ids.len()
                ));
            }
            if i > 0 && s.start < prev_end {
                return fail(format!("span {}..{} overlaps its predecessor", s.start, s.end));
            }
            prev_end = s.end;
            if let Route::Source(id) = &s.route {
                if !known_source(id) {
                    return Err(BicoError::UnknownSource { id: id.clone() });
                }
            }
        }
        Ok(())
    }

    /// Distinct source ids referenced by the plan.
    pub fn source_ids(&self) -> Vec<String> {
        let mut out = Vec::new();
        for s in &self.spans {
            if let Route::Source(id) = &s.route {
                if !out.contains(id) {
                    out.push(id.clone());
                }
            }
        }
        out
    }

    /// Canonical single-source plan: every maximal run of concept tokens is
    /// routed through `source_id`; fillers stay RAW.
    pub fn single_source(designated_ids: Vec<u32>, source_id: &str, vocab: &Vocabulary) -> Self {
        let mut spans = Vec::new();
        let mut run_start: Option<usize> = None;
        for (i, &id) in designated_ids.iter().enumerate() {
            if vocab.is_concept(id) {
                run_start.get_or_insert(i);
            } else if let Some(s) = run_start.take() {
                spans.push(Span {
                    start: s,
                    end: i,
                    route: Route::Source(source_id.to_string()),
                });
            }
        }
        if let Some(s) = run_start {
            spans.push(Span {
                start: s,
                end: designated_ids.len(),
                route: Route::Source(source_id.to_string()),
            });
        }
        CompositionPlan {
            designated_ids,
            spans,
        }
    }

    /// Fully RAW plan (plain conditional generation).
    pub fn all_raw(designated_ids: Vec<u32>) -> Self {
        CompositionPlan {
            designated_ids,
            spans: Vec::new(),
        }
    }
}

enum SegmentRoute {
    Raw,
    Routed { source: String },
}

struct Segment {
    start: usize,
    end: usize,
    route: SegmentRoute,
}

fn plan_segments(plan: &CompositionPlan) -> Vec<Segment> {
    let mut spans = plan.spans.clone();
    spans.sort_by_key(|s| s.start);
    let mut segments = Vec::new();
    let mut pos = 0usize;
    for s in spans {
        if s.start > pos {
            segments.push(Segment {
                start: pos,
                end: s.start,
                route: SegmentRoute::Raw,
            });
        }
        segments.push(Segment {
            start: s.start,
            end: s.end,
            route: match &s.route {
                Route::Raw => SegmentRoute::Raw,
                Route::Source(id) => SegmentRoute::Routed { source: id.clone() },
            },
        });
        pos = s.end;
    }
    if pos < plan.designated_ids.len() {
        segments.push(Segment {
            start: pos,
            end: plan.designated_ids.len(),
            route: SegmentRoute::Raw,
        });
    }
    segments
}

/// Graph-side composition prompt builder, caching the embedded designated
/// rows and each routed segment's global-binder output so only the
/// per-block binder runs per block. Absorbent rows are never attached at
/// composition time.
pub struct RoutedPromptBuilder<'a, S: Scalar> {
    plan: &'a CompositionPlan,
    sets: &'a BTreeMap<String, BinderSet>,
    set_nodes: &'a BTreeMap<String, StoreNodes>,
    table_node: ValueId,
    cache: Option<Vec<(Option<(String, ValueId)>, ValueId)>>,
    _marker: std::marker::PhantomData<S>,
}

impl<'a, S: Scalar> RoutedPromptBuilder<'a, S> {
    pub fn new(
        plan: &'a CompositionPlan,
        sets: &'a BTreeMap<String, BinderSet>,
        set_nodes: &'a BTreeMap<String, StoreNodes>,
        table_node: ValueId,
    ) -> Self {
        RoutedPromptBuilder {
            plan,
            sets,
            set_nodes,
            table_node,
            cache: None,
            _marker: std::marker::PhantomData,
        }
    }

    fn build_cache(&mut self, g: &mut Graph<S>) -> Result<()> {
        let ids: Vec<usize> = self.plan.designated_ids.iter().map(|&i| i as usize).collect();
        let rows = g.embedding(self.table_node, &ids)?;
        let mut cache = Vec::new();
        for seg in plan_segments(self.plan) {
            let piece = if seg.start == 0 && seg.end == ids.len() {
                rows
            } else {
                g.slice_rows(rows, seg.start, seg.end)?
            };
            match seg.route {
                SegmentRoute::Raw => cache.push((None, piece)),
                SegmentRoute::Routed { source } => {
                    let set = self.sets.get(&source).ok_or_else(|| BicoError::UnknownSource {
                        id: source.clone(),
                    })?;
                    let nodes = &self.set_nodes[&source];
                    let p_g = apply_binder_graph(g, nodes, GLOBAL_PREFIX, set.dual, piece)?;
                    cache.push((Some((source, p_g)), piece));
                }
            }
        }
        self.cache = Some(cache);
        Ok(())
    }

    /// The composed p_u^i rows for block `i`.
    pub fn block_prompt(&mut self, g: &mut Graph<S>, block_i: usize) -> Result<ValueId> {
        if self.cache.is_none() {
            self.build_cache(g)?;
        }
        let cache = self.cache.as_ref().unwrap();
        let mut parts = Vec::with_capacity(cache.len());
        for (routed, raw_piece) in cache {
            match routed {
                None => parts.push(*raw_piece),
                Some((source, p_g)) => {
                    let set = &self.sets[source];
                    let nodes = &self.set_nodes[source];
                    let out =
                        apply_binder_graph(g, nodes, &block_prefix(block_i), set.dual, *p_g)?;
                    parts.push(out);
                }
            }
        }
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            g.concat_rows(&parts)
        }
    }
}

/// Tensor-level compose_prompt: the composed rows for one block index.
pub fn compose_prompt(
    plan: &CompositionPlan,
    sets: &BTreeMap<String, BinderSet>,
    base_params: &ParamStore<f32>,
    block_i: usize,
) -> Result<Tensor<f32>> {
    let mut g: Graph<f32> = Graph::new();
    let table = g.leaf(base_params.get("embed.table").clone());
    let mut set_nodes = BTreeMap::new();
    for (id, set) in sets {
        set_nodes.insert(id.clone(), StoreNodes::bind(&mut g, &set.params));
    }
    let mut builder: RoutedPromptBuilder<'_, f32> =
        RoutedPromptBuilder::new(plan, sets, &set_nodes, table);
    let out = builder.block_prompt(&mut g, block_i)?;
    Ok(g.value(out).clone())
}

/// Tensor-level hierarchical binder pass over explicit rows.
pub fn bindset_prompt(set: &BinderSet, rows: &Tensor<f32>, block_i: usize) -> Result<Tensor<f32>> {
    let mut g: Graph<f32> = Graph::new();
    let nodes = StoreNodes::bind(&mut g, &set.params);
    let p = g.leaf(rows.clone());
    let out = bindset_prompt_graph(&mut g, &nodes, set, block_i, p)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{embed_prompt, init_base_params, ModelConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_blocks: 3,
            n_heads: 4,
            patch_t: 2,
            patch_h: 4,
            patch_w: 4,
            frames: 4,
            height: 8,
            width: 8,
            vocab_size: 31,
            max_prompt_len: 12,
            mlp_ratio: 4,
            sampler_steps: 8,
        }
    }

    fn fresh_set(name: &str, seed: u64) -> (BinderSet, ParamStore<f32>, ModelConfig) {
        let cfg = cfg();
        let base = init_base_params(&cfg, 1);
        let pad_row: Vec<f32> = base.get("embed.table").row(0).to_vec();
        let set = init_binder_set(
            name,
            cfg.n_blocks,
            cfg.d_model,
            &pad_row,
            vec![11, 28, 8, 24],
            "fp",
            seed,
        );
        (set, base, cfg)
    }

    fn random_rows(l: usize, d: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(&[l, d], 0.7, &mut rng)
    }

    #[test]
    fn fresh_binder_is_exact_identity() {
        let (set, _, c) = fresh_set("a", 0);
        let rows = random_rows(6, c.d_model, 3);
        for block in 0..c.n_blocks {
            let out = bindset_prompt(&set, &rows, block).unwrap();
            assert!(out.bit_eq(&rows), "block {block} not identity");
        }
    }

    #[test]
    fn gamma_one_with_zero_mlp_tail_is_identity() {
        let (mut set, _, c) = fresh_set("a", 0);
        *set.params.get_mut("global.gamma") = Tensor::scalar(1.0);
        // zero the second linear layer: the residual branch vanishes
        let dims = set.params.get("global.w2").dims().to_vec();
        *set.params.get_mut("global.w2") = Tensor::zeros(&dims);
        let rows = random_rows(5, c.d_model, 4);
        let mut g: Graph<f32> = Graph::new();
        let nodes = StoreNodes::bind(&mut g, &set.params);
        let p = g.leaf(rows.clone());
        let out = apply_binder_graph(&mut g, &nodes, GLOBAL_PREFIX, false, p).unwrap();
        assert!(g.value(out).bit_eq(&rows));
    }

    #[test]
    fn matches_straight_line_reimplementation() {
        // independent f64 oracle for f(p) = p + gamma * MLP(p)
        let (set, _, c) = fresh_set("a", 5);
        let mut params = set.params.cast::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for key in MLP_KEYS {
            let name = format!("global.{key}");
            let dims = params.get(&name).dims().to_vec();
            *params.get_mut(&name) = Tensor::randn(&dims, 0.5, &mut rng);
        }
        *params.get_mut("global.gamma") = Tensor::scalar(0.8);
        let rows = random_rows(4, c.d_model, 11).cast::<f64>();

        let mut g: Graph<f64> = Graph::new();
        let nodes = StoreNodes::bind(&mut g, &params);
        let p = g.leaf(rows.clone());
        let out = apply_binder_graph(&mut g, &nodes, GLOBAL_PREFIX, false, p).unwrap();
        let got = g.value(out);

        // straight-line reimplementation
        let d = c.d_model;
        let hidden = 2 * d;
        let w1 = params.get("global.w1");
        let b1 = params.get("global.b1");
        let ln_g = params.get("global.ln_g");
        let ln_b = params.get("global.ln_b");
        let w2 = params.get("global.w2");
        let b2 = params.get("global.b2");
        let gamma = params.get("global.gamma").scalar_value();
        for r in 0..4 {
            let row = rows.row(r);
            let mut h = vec![0.0f64; hidden];
            for (j, hj) in h.iter_mut().enumerate() {
                let mut acc = b1.data()[j];
                for (i, &x) in row.iter().enumerate() {
                    acc += x * w1.data()[i * hidden + j];
                }
                *hj = acc;
            }
            let mean = h.iter().sum::<f64>() / hidden as f64;
            let var = h.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hidden as f64;
            let rstd = 1.0 / (var + 1e-5).sqrt();
            for (j, hj) in h.iter_mut().enumerate() {
                let xhat = (*hj - mean) * rstd;
                *hj = ln_g.data()[j] * xhat + ln_b.data()[j];
            }
            for hj in h.iter_mut() {
                *hj = 0.5 * *hj * (1.0 + libm::erf(*hj / 2f64.sqrt()));
            }
            for j in 0..d {
                let mut acc = b2.data()[j];
                for (i, &x) in h.iter().enumerate() {
                    acc += x * w2.data()[i * d + j];
                }
                let want = row[j] + gamma * acc;
                let have = got.row(r)[j];
                assert!(
                    (want - have).abs() < 1e-12,
                    "row {r} col {j}: {want} vs {have}"
                );
            }
        }
    }

    #[test]
    fn absorbent_attach_detach_roundtrip() {
        let (set, _, c) = fresh_set("a", 1);
        let rows = random_rows(7, c.d_model, 12);
        let (ext, slot) = attach_absorbent(&rows, &set, c.max_prompt_len).unwrap();
        assert_eq!(ext.dims()[0], 8);
        assert_eq!(slot, 7);
        assert_eq!(ext.row(7), set.params.get(ABSORBENT_KEY).data());
        let back = detach_absorbent(&ext, slot).unwrap();
        assert!(back.bit_eq(&rows));
        // overflow of L_max
        let long = random_rows(12, c.d_model, 13);
        assert!(attach_absorbent(&long, &set, c.max_prompt_len).is_err());
    }

    #[test]
    fn promotion_is_bit_transparent() {
        let (mut set, _, c) = fresh_set("a", 2);
        // make the set non-trivial first
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for prefix in binder_prefixes(c.n_blocks) {
            *set.params.get_mut(&format!("{prefix}.gamma")) = Tensor::scalar(0.5);
            let name = format!("{prefix}.w1");
            let dims = set.params.get(&name).dims().to_vec();
            *set.params.get_mut(&name) = Tensor::randn(&dims, 0.4, &mut rng);
        }
        let rows = random_rows(6, c.d_model, 21);
        let before: Vec<Tensor<f32>> = (0..c.n_blocks)
            .map(|b| bindset_prompt(&set, &rows, b).unwrap())
            .collect();
        assert!(!before[0].bit_eq(&rows), "fixture should be non-trivial");

        let dual = promote_to_dual_branch(&set).unwrap();
        assert!(dual.dual);
        for (b, want) in before.iter().enumerate() {
            let got = bindset_prompt(&dual, &rows, b).unwrap();
            assert!(got.bit_eq(want), "block {b} changed at promotion");
        }

        // perturbing the gated temporal branch changes nothing while m == 0
        let mut poked = dual.clone();
        let dims = poked.params.get("global.w1.t").dims().to_vec();
        *poked.params.get_mut("global.w1.t") = Tensor::randn(&dims, 1.0, &mut rng);
        for (b, want) in before.iter().enumerate() {
            let got = bindset_prompt(&poked, &rows, b).unwrap();
            assert!(got.bit_eq(want), "gated branch leaked at block {b}");
        }

        // parameter count: + one mlp copy and 3 gate params per binder
        let n_binders = c.n_blocks + 1;
        let mlp_scalars: usize = MLP_KEYS
            .iter()
            .map(|k| set.params.get(&format!("global.{k}")).numel())
            .sum();
        let want = set.params.total_scalars() + n_binders * (mlp_scalars + c.d_model + 2);
        assert_eq!(dual.params.total_scalars(), want);

        // double promotion is an error
        assert!(promote_to_dual_branch(&dual).is_err());
    }

    #[test]
    fn compose_all_raw_equals_plain_embedding() {
        let (set, base, c) = fresh_set("a", 3);
        let ids = vec![1u32, 11, 28, 8, 3, 24];
        let plan = CompositionPlan::all_raw(ids.clone());
        let mut sets = BTreeMap::new();
        sets.insert("a".to_string(), set);
        let plain = embed_prompt(&ids, &base, &c).unwrap();
        for b in 0..c.n_blocks {
            let out = compose_prompt(&plan, &sets, &base, b).unwrap();
            assert!(out.bit_eq(&plain));
        }
    }

    #[test]
    fn compose_fresh_binders_equals_plain_embedding() {
        let (set, base, c) = fresh_set("a", 4);
        let ids = vec![1u32, 11, 28, 8, 3, 24];
        let plan = CompositionPlan::single_source(ids.clone(), "a", &Vocabulary::standard());
        assert!(!plan.spans.is_empty());
        let mut sets = BTreeMap::new();
        sets.insert("a".to_string(), set);
        let plain = embed_prompt(&ids, &base, &c).unwrap();
        for b in 0..c.n_blocks {
            let out = compose_prompt(&plan, &sets, &base, b).unwrap();
            assert!(out.bit_eq(&plain));
            assert_eq!(out.dims()[0], ids.len(), "no absorbent rows at composition");
        }
    }

    #[test]
    fn two_source_spans_are_local() {
        let (mut set_a, base, c) = fresh_set("a", 5);
        let (mut set_b, _, _) = fresh_set("b", 6);
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        for set in [&mut set_a, &mut set_b] {
            for prefix in binder_prefixes(c.n_blocks) {
                *set.params.get_mut(&format!("{prefix}.gamma")) =
                    Tensor::scalar(rng.gen_range(0.2..0.9f32));
            }
        }
        let ids = vec![1u32, 11, 28, 8, 4, 18, 3, 24];
        let plan = CompositionPlan {
            designated_ids: ids.clone(),
            spans: vec![
                Span {
                    start: 1,
                    end: 4,
                    route: Route::Source("a".to_string()),
                },
                Span {
                    start: 5,
                    end: 6,
                    route: Route::Source("b".to_string()),
                },
            ],
        };
        plan.validate(&|id| id == "a" || id == "b").unwrap();
        let mut sets = BTreeMap::new();
        sets.insert("a".to_string(), set_a.clone());
        sets.insert("b".to_string(), set_b.clone());
        let plain = embed_prompt(&ids, &base, &c).unwrap();
        for b in 0..c.n_blocks {
            let out = compose_prompt(&plan, &sets, &base, b).unwrap();
            // span A rows equal the single-source hierarchical pass on them
            let rows_a = Tensor::new(vec![3, c.d_model], plain.data()[c.d_model..4 * c.d_model].to_vec()).unwrap();
            let want_a = bindset_prompt(&set_a, &rows_a, b).unwrap();
            assert_eq!(&out.data()[c.d_model..4 * c.d_model], want_a.data());
            let rows_b = Tensor::new(vec![1, c.d_model], plain.data()[5 * c.d_model..6 * c.d_model].to_vec()).unwrap();
            let want_b = bindset_prompt(&set_b, &rows_b, b).unwrap();
            assert_eq!(&out.data()[5 * c.d_model..6 * c.d_model], want_b.data());
            // rows outside the spans pass through untouched
            assert_eq!(&out.data()[..c.d_model], &plain.data()[..c.d_model]);
            assert_eq!(
                &out.data()[4 * c.d_model..5 * c.d_model],
                &plain.data()[4 * c.d_model..5 * c.d_model]
            );
            assert_eq!(&out.data()[6 * c.d_model..], &plain.data()[6 * c.d_model..]);
        }

        // changing source A's weights never changes rows outside A's spans
        let mut set_a2 = set_a.clone();
        let dims = set_a2.params.get("block1.w2").dims().to_vec();
        *set_a2.params.get_mut("block1.w2") = Tensor::randn(&dims, 1.0, &mut rng);
        let mut sets2 = BTreeMap::new();
        sets2.insert("a".to_string(), set_a2);
        sets2.insert("b".to_string(), set_b);
        for b in 0..c.n_blocks {
            let before = compose_prompt(&plan, &sets, &base, b).unwrap();
            let after = compose_prompt(&plan, &sets2, &base, b).unwrap();
            assert_eq!(&before.data()[..c.d_model], &after.data()[..c.d_model]);
            assert_eq!(
                &before.data()[4 * c.d_model..],
                &after.data()[4 * c.d_model..]
            );
        }
    }

    #[test]
    fn plan_validation_errors() {
        let ids = vec![1u32, 2, 3, 4];
        let overlap = CompositionPlan {
            designated_ids: ids.clone(),
            spans: vec![
                Span { start: 0, end: 2, route: Route::Raw },
                Span { start: 1, end: 3, route: Route::Raw },
            ],
        };
        assert!(overlap.validate(&|_| true).is_err());
        let oob = CompositionPlan {
            designated_ids: ids.clone(),
            spans: vec![Span { start: 2, end: 9, route: Route::Raw }],
        };
        assert!(oob.validate(&|_| true).is_err());
        let unknown = CompositionPlan {
            designated_ids: ids,
            spans: vec![Span {
                start: 0,
                end: 1,
                route: Route::Source("nope".to_string()),
            }],
        };
        assert!(matches!(
            unknown.validate(&|_| false),
            Err(BicoError::UnknownSource { .. })
        ));
    }

    #[test]
    fn fingerprint_check_rejects_wrong_base() {
        let (set, _, _) = fresh_set("a", 7);
        assert!(set.check_base("fp").is_ok());
        assert!(matches!(
            set.check_base("other"),
            Err(BicoError::FingerprintMismatch { .. })
        ));
    }

    #[test]
    fn save_load_roundtrip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let (mut set, _, _) = fresh_set("src0", 8);
        set.temporal = true;
        let path = dir.path().join("set.bico");
        set.save(&path).unwrap();
        let back = BinderSet::load(&path).unwrap();
        assert_eq!(back.source_id, "src0");
        assert_eq!(back.bound_token_ids, set.bound_token_ids);
        assert_eq!(back.temporal, true);
        assert_eq!(back.dual, false);
        assert_eq!(back.base_fingerprint, "fp");
        assert!(back.params.values_bit_eq(&set.params));
        assert_eq!(back.snapshot_hash(), set.snapshot_hash());
    }

    use rand::Rng;
}
