//! The base generator: a minimal pixel-space diffusion transformer with
//! per-block cross-attention text conditioning, trained with rectified
//! flow matching and sampled by Euler integration.
//!
//! Diffusion runs directly on pixel patches (no VAE). The velocity
//! convention is v = eps - x0 with t = 1 as pure noise, so "high noise"
//! means t near 1. Queries are pre-normalized before cross-attention.

use crate::checkpoint;
use crate::error::{BicoError, Result};
use crate::graph::{Graph, ValueId};
use crate::param::{ParamStore, StoreNodes};
use crate::rng_stream;
use crate::tensor::{sc, Scalar, Tensor};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub patch_t: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub vocab_size: usize,
    pub max_prompt_len: usize,
    pub mlp_ratio: usize,
    pub sampler_steps: usize,
}

impl ModelConfig {
    pub fn from_config(cfg: &crate::config::Config, vocab_size: usize) -> Self {
        let m = &cfg.model;
        ModelConfig {
            d_model: m.d_model,
            n_blocks: m.n_blocks,
            n_heads: m.n_heads,
            patch_t: m.patch_t,
            patch_h: m.patch_h,
            patch_w: m.patch_w,
            frames: m.t,
            height: m.h,
            width: m.w,
            vocab_size,
            max_prompt_len: m.l_max,
            mlp_ratio: m.mlp_ratio,
            sampler_steps: cfg.sample.steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| Err(BicoError::InvalidConfig { reason });
        if self.frames % self.patch_t != 0
            || self.height % self.patch_h != 0
            || self.width % self.patch_w != 0
        {
            return fail("T/H/W must be divisible by the patch sizes".to_string());
        }
        if self.d_model % self.n_heads != 0 {
            return fail("d_model must be divisible by n_heads".to_string());
        }
        if self.d_model % 2 != 0 {
            return fail("d_model must be even for the sinusoidal embedding".to_string());
        }
        if self.vocab_size == 0 || self.max_prompt_len == 0 {
            return fail("vocab_size and L_max must be positive".to_string());
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize, usize) {
        (
            self.frames / self.patch_t,
            self.height / self.patch_h,
            self.width / self.patch_w,
        )
    }

    pub fn n_tokens(&self) -> usize {
        let (gt, gh, gw) = self.grid();
        gt * gh * gw
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_t * self.patch_h * self.patch_w * 3
    }

    pub fn video_dims(&self) -> [usize; 4] {
        [self.frames, self.height, self.width, 3]
    }

    pub fn scene_dims(&self) -> crate::corpus::SceneDims {
        crate::corpus::SceneDims {
            frames: self.frames,
            height: self.height,
            width: self.width,
        }
    }
}

/// A frozen-after-pretraining base model plus its content fingerprint.
pub struct BaseModel {
    pub cfg: ModelConfig,
    pub params: ParamStore<f32>,
    pub fingerprint: String,
}

impl BaseModel {
    pub fn new(cfg: ModelConfig, params: ParamStore<f32>) -> Self {
        let fingerprint = checkpoint::fingerprint(&params);
        BaseModel {
            cfg,
            params,
            fingerprint,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let metadata = serde_json::json!({
            "kind": "base",
            "config": self.cfg,
            "fingerprint": self.fingerprint,
        });
        checkpoint::write_container_file(path, &metadata, &checkpoint::store_tensors(&self.params))
    }

    pub fn load(path: &Path) -> Result<BaseModel> {
        let (metadata, tensors) = checkpoint::read_container_file(path)?;
        checkpoint::expect_kind(&metadata, "base")?;
        let cfg: ModelConfig = serde_json::from_value(
            metadata
                .get("config")
                .cloned()
                .ok_or_else(|| BicoError::Checkpoint {
                    reason: "base checkpoint missing config".to_string(),
                })?,
        )?;
        let stored_fp = metadata
            .get("fingerprint")
            .and_then(|v| v.as_str())
            .unwrap_or("")
            .to_string();
        let params = checkpoint::tensors_into_store(tensors);
        let actual = checkpoint::fingerprint(&params);
        if actual != stored_fp {
            return Err(BicoError::FingerprintMismatch {
                expected: stored_fp,
                actual,
            });
        }
        Ok(BaseModel {
            cfg,
            params,
            fingerprint: actual,
        })
    }
}

// ── parameter initialization ─────────────────────────────────────────

fn xavier(dims: &[usize], rng: &mut rand_chacha::ChaCha8Rng) -> Tensor<f32> {
    let fan_in = dims[0] as f64;
    let fan_out = dims[1] as f64;
    let std = (2.0 / (fan_in + fan_out)).sqrt();
    Tensor::randn(dims, std, rng)
}

/// Fresh base-model parameters. Modulation projections, the cross-attention
/// output projections, and the final head start at zero so every residual
/// branch is silent at step 0.
pub fn init_base_params(cfg: &ModelConfig, seed: u64) -> ParamStore<f32> {
    let mut rng = rng_stream(seed, "base.init");
    let d = cfg.d_model;
    let pd = cfg.patch_dim();
    let hidden = d * cfg.mlp_ratio;
    let mut store = ParamStore::new();
    store.insert(
        "embed.table",
        Tensor::randn(&[cfg.vocab_size, d], 0.3, &mut rng),
        true,
    );
    store.insert("patch.w_in", xavier(&[pd, d], &mut rng), true);
    store.insert("patch.b_in", Tensor::zeros(&[1, d]), true);
    store.insert(
        "pos_embed",
        Tensor::randn(&[cfg.n_tokens(), d], 0.3, &mut rng),
        true,
    );
    for b in 0..cfg.n_blocks {
        let p = |name: &str| format!("block{b}.{name}");
        for w in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
            store.insert(&p(w), xavier(&[d, d], &mut rng), true);
        }
        // key bias omitted: softmax is invariant to a per-row shift,
        // so a key bias is exactly functionless
        for bias in ["attn.bq", "attn.bv", "attn.bo"] {
            store.insert(&p(bias), Tensor::zeros(&[1, d]), true);
        }
        for w in ["xattn.wq", "xattn.wk", "xattn.wv"] {
            store.insert(&p(w), xavier(&[d, d], &mut rng), true);
        }
        store.insert(&p("xattn.wo"), Tensor::zeros(&[d, d]), true);
        for bias in ["xattn.bq", "xattn.bv", "xattn.bo"] {
            store.insert(&p(bias), Tensor::zeros(&[1, d]), true);
        }
        store.insert(&p("lnx.g"), Tensor::full(&[1, d], 1.0), true);
        store.insert(&p("lnx.b"), Tensor::zeros(&[1, d]), true);
        store.insert(&p("mlp.w1"), xavier(&[d, hidden], &mut rng), true);
        store.insert(&p("mlp.b1"), Tensor::zeros(&[1, hidden]), true);
        store.insert(&p("mlp.w2"), xavier(&[hidden, d], &mut rng), true);
        store.insert(&p("mlp.b2"), Tensor::zeros(&[1, d]), true);
        store.insert(&p("mod.w"), Tensor::zeros(&[d, 3 * d]), true);
        store.insert(&p("mod.b"), Tensor::zeros(&[1, 3 * d]), true);
    }
    store.insert("final.ln_g", Tensor::full(&[1, d], 1.0), true);
    store.insert("final.ln_b", Tensor::zeros(&[1, d]), true);
    store.insert("final.w_out", Tensor::zeros(&[d, pd]), true);
    store.insert("final.b_out", Tensor::zeros(&[1, pd]), true);
    store
}

// ── patch tokenization ───────────────────────────────────────────────

fn check_video_dims<S: Scalar>(op: &str, video: &Tensor<S>, cfg: &ModelConfig) -> Result<()> {
    if video.dims() != cfg.video_dims() {
        return Err(BicoError::dim(
            op,
            format!(
                "video dims {:?} do not match config {:?}",
                video.dims(),
                cfg.video_dims()
            ),
        ));
    }
    Ok(())
}

/// Rearrange a video into flat patch rows. Token order is t-major, then
/// patch row, then patch column; within a patch, (dt, dy, dx, channel)
/// row-major. A pure bijective reindexing.
pub fn patchify_raw<S: Scalar>(video: &Tensor<S>, cfg: &ModelConfig) -> Result<Tensor<S>> {
    check_video_dims("patchify", video, cfg)?;
    let (gt, gh, gw) = cfg.grid();
    let (pt, ph, pw) = (cfg.patch_t, cfg.patch_h, cfg.patch_w);
    let (h, w) = (cfg.height, cfg.width);
    let pd = cfg.patch_dim();
    let src = video.data();
    let mut out = Tensor::zeros(&[cfg.n_tokens(), pd]);
    let dst = out.data_mut();
    for tb in 0..gt {
        for yb in 0..gh {
            for xb in 0..gw {
                let token = (tb * gh + yb) * gw + xb;
                let mut e = token * pd;
                for dt in 0..pt {
                    for dy in 0..ph {
                        for dx in 0..pw {
                            let t = tb * pt + dt;
                            let y = yb * ph + dy;
                            let x = xb * pw + dx;
                            let s = ((t * h + y) * w + x) * 3;
                            dst[e] = src[s];
                            dst[e + 1] = src[s + 1];
                            dst[e + 2] = src[s + 2];
                            e += 3;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Exact inverse of [`patchify_raw`].
pub fn unpatchify_raw<S: Scalar>(patches: &Tensor<S>, cfg: &ModelConfig) -> Result<Tensor<S>> {
    let pd = cfg.patch_dim();
    if patches.dims() != [cfg.n_tokens(), pd] {
        return Err(BicoError::dim(
            "unpatchify",
            format!(
                "patch dims {:?} do not match config [{}, {}]",
                patches.dims(),
                cfg.n_tokens(),
                pd
            ),
        ));
    }
    let (gt, gh, gw) = cfg.grid();
    let (pt, ph, pw) = (cfg.patch_t, cfg.patch_h, cfg.patch_w);
    let (h, w) = (cfg.height, cfg.width);
    let src = patches.data();
    let mut out = Tensor::zeros(&cfg.video_dims());
    let dst = out.data_mut();
    for tb in 0..gt {
        for yb in 0..gh {
            for xb in 0..gw {
                let token = (tb * gh + yb) * gw + xb;
                let mut e = token * pd;
                for dt in 0..pt {
                    for dy in 0..ph {
                        for dx in 0..pw {
                            let t = tb * pt + dt;
                            let y = yb * ph + dy;
                            let x = xb * pw + dx;
                            let s = ((t * h + y) * w + x) * 3;
                            dst[s] = src[e];
                            dst[s + 1] = src[e + 1];
                            dst[s + 2] = src[e + 2];
                            e += 3;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Patchify plus the learned input projection: video -> [N, d_model].
pub fn patchify(video: &Tensor<f32>, params: &ParamStore<f32>, cfg: &ModelConfig) -> Result<Tensor<f32>> {
    let raw = patchify_raw(video, cfg)?;
    let mut g: Graph<f32> = Graph::new();
    let x = g.leaf(raw);
    let w = g.leaf(params.get("patch.w_in").clone());
    let b = g.leaf(params.get("patch.b_in").clone());
    let y = g.linear(x, w, b)?;
    Ok(g.value(y).clone())
}

/// The learned output projection plus unpatchify: [N, d_model] -> video.
pub fn unpatchify(tokens: &Tensor<f32>, params: &ParamStore<f32>, cfg: &ModelConfig) -> Result<Tensor<f32>> {
    let mut g: Graph<f32> = Graph::new();
    let x = g.leaf(tokens.clone());
    let w = g.leaf(params.get("final.w_out").clone());
    let b = g.leaf(params.get("final.b_out").clone());
    let y = g.linear(x, w, b)?;
    unpatchify_raw(g.value(y), cfg)
}

// ── timestep embedding ───────────────────────────────────────────────

/// Sinusoidal embedding of the noise level, [1, d_model].
pub fn timestep_embedding<S: Scalar>(t: f64, d: usize) -> Tensor<S> {
    let half = d / 2;
    let pos = t * 1000.0;
    let mut data = Vec::with_capacity(d);
    for i in 0..half {
        let freq = (10_000f64).powf(-(i as f64) / half as f64);
        data.push(sc::<S>((pos * freq).sin()));
    }
    for i in 0..half {
        let freq = (10_000f64).powf(-(i as f64) / half as f64);
        data.push(sc::<S>((pos * freq).cos()));
    }
    Tensor::new(vec![1, d], data).unwrap()
}

// ── forward pass ─────────────────────────────────────────────────────

/// Per-block prompt supplier: returns the [L, d_model] rows used as the
/// cross-attention keys and values of block `i`. The indirection is the
/// hook through which binders inject block-specific prompts.
pub type PromptProvider<'a, S> = dyn FnMut(&mut Graph<S>, usize) -> Result<ValueId> + 'a;

/// Velocity prediction over raw noised patches. Per block:
/// x += gate * selfattn(modulate(norm(x))); x += crossattn(norm(x), p, p);
/// x += gate * mlp(modulate(norm(x))).
pub fn dit_forward_graph<S: Scalar>(
    g: &mut Graph<S>,
    nodes: &StoreNodes,
    cfg: &ModelConfig,
    x_patches: ValueId,
    t: f64,
    provider: &mut PromptProvider<'_, S>,
) -> Result<ValueId> {
    let d = cfg.d_model;
    let ones = g.leaf(Tensor::full(&[1, d], S::one()));
    let zeros = g.leaf(Tensor::zeros(&[1, d]));
    let t_emb = g.leaf(timestep_embedding::<S>(t, d));

    let mut x = g.linear(x_patches, nodes.id("patch.w_in"), nodes.id("patch.b_in"))?;
    let pos = nodes.id("pos_embed");
    x = g.add(x, pos)?;

    for b in 0..cfg.n_blocks {
        let p = |name: &str| format!("block{b}.{name}");
        let mod3 = g.linear(t_emb, nodes.id(&p("mod.w")), nodes.id(&p("mod.b")))?;
        let shift = g.slice_cols(mod3, 0, d)?;
        let scale = g.slice_cols(mod3, d, 2 * d)?;
        let gate = g.slice_cols(mod3, 2 * d, 3 * d)?;
        let scale1 = g.affine(scale, 1.0, 1.0);

        // self-attention branch
        let mut h = g.layer_norm(x, ones, zeros)?;
        h = g.mul(h, scale1)?;
        h = g.add(h, shift)?;
        let q = g.linear(h, nodes.id(&p("attn.wq")), nodes.id(&p("attn.bq")))?;
        let k = g.matmul(h, nodes.id(&p("attn.wk")))?;
        let v = g.linear(h, nodes.id(&p("attn.wv")), nodes.id(&p("attn.bv")))?;
        let a = g.attention(q, k, v, cfg.n_heads)?;
        let a = g.linear(a, nodes.id(&p("attn.wo")), nodes.id(&p("attn.bo")))?;
        let a = g.mul(a, gate)?;
        x = g.add(x, a)?;

        // cross-attention conditioning: prompt rows as keys and values
        let prompt = provider(g, b)?;
        let prows = g.value(prompt).dims().to_vec();
        if prows.len() != 2 || prows[1] != d {
            return Err(BicoError::dim(
                "dit_forward",
                format!("block {b} prompt has dims {:?}, want [L, {}]", prows, d),
            ));
        }
        if prows[0] == 0 || prows[0] > cfg.max_prompt_len {
            return Err(BicoError::PromptTooLong {
                len: prows[0],
                max: cfg.max_prompt_len,
            });
        }
        let hx = g.layer_norm(x, nodes.id(&p("lnx.g")), nodes.id(&p("lnx.b")))?;
        let qx = g.linear(hx, nodes.id(&p("xattn.wq")), nodes.id(&p("xattn.bq")))?;
        let kx = g.matmul(prompt, nodes.id(&p("xattn.wk")))?;
        let vx = g.linear(prompt, nodes.id(&p("xattn.wv")), nodes.id(&p("xattn.bv")))?;
        let ax = g.attention(qx, kx, vx, cfg.n_heads)?;
        let ax = g.linear(ax, nodes.id(&p("xattn.wo")), nodes.id(&p("xattn.bo")))?;
        x = g.add(x, ax)?;

        // mlp branch
        let mut h2 = g.layer_norm(x, ones, zeros)?;
        h2 = g.mul(h2, scale1)?;
        h2 = g.add(h2, shift)?;
        let m1 = g.linear(h2, nodes.id(&p("mlp.w1")), nodes.id(&p("mlp.b1")))?;
        let m1 = g.gelu(m1);
        let m2 = g.linear(m1, nodes.id(&p("mlp.w2")), nodes.id(&p("mlp.b2")))?;
        let m2 = g.mul(m2, gate)?;
        x = g.add(x, m2)?;
    }

    let xf = g.layer_norm(x, nodes.id("final.ln_g"), nodes.id("final.ln_b"))?;
    g.linear(xf, nodes.id("final.w_out"), nodes.id("final.b_out"))
}

// ── rectified flow ───────────────────────────────────────────────────

/// x_t = (1 - t) x0 + t eps, elementwise in pixel space.
pub fn noised_state<S: Scalar>(x0: &Tensor<S>, eps: &Tensor<S>, t: f64) -> Tensor<S> {
    assert_eq!(x0.dims(), eps.dims());
    let ts = sc::<S>(t);
    let om = sc::<S>(1.0 - t);
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&a, &e)| om * a + ts * e)
        .collect();
    Tensor::new(x0.dims().to_vec(), data).unwrap()
}

/// The rectified-flow regression target v = eps - x0.
pub fn flow_target<S: Scalar>(x0: &Tensor<S>, eps: &Tensor<S>) -> Tensor<S> {
    assert_eq!(x0.dims(), eps.dims());
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&a, &e)| e - a)
        .collect();
    Tensor::new(x0.dims().to_vec(), data).unwrap()
}

/// MSE between the velocity prediction on x_t and v = eps - x0, as a graph
/// node so gradients reach every trainable parameter.
pub fn flow_matching_loss_graph<S: Scalar>(
    g: &mut Graph<S>,
    nodes: &StoreNodes,
    cfg: &ModelConfig,
    x0: &Tensor<S>,
    t: f64,
    eps: &Tensor<S>,
    provider: &mut PromptProvider<'_, S>,
) -> Result<ValueId> {
    if !(0.0..=1.0).contains(&t) {
        return Err(BicoError::InvalidConfig {
            reason: format!("noise level t={t} outside [0,1]"),
        });
    }
    let x_t = noised_state(x0, eps, t);
    let target = patchify_raw(&flow_target(x0, eps), cfg)?;
    let x_in = g.leaf(patchify_raw(&x_t, cfg)?);
    let pred = dit_forward_graph(g, nodes, cfg, x_in, t, provider)?;
    let tgt = g.leaf(target);
    g.mse(pred, tgt)
}

/// Prompt provider embedding a fixed id sequence with the frozen table,
/// shared across all blocks (the plain conditional-generation path).
pub fn plain_prompt_provider<'a, S: Scalar>(
    nodes: &'a StoreNodes,
    ids: &'a [u32],
) -> impl FnMut(&mut Graph<S>, usize) -> Result<ValueId> + 'a {
    let mut cached: Option<ValueId> = None;
    move |g: &mut Graph<S>, _block: usize| {
        if let Some(id) = cached {
            return Ok(id);
        }
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let rows = g.embedding(nodes.id("embed.table"), &idx)?;
        cached = Some(rows);
        Ok(rows)
    }
}

/// Pure Euler integration of dx/dt = v from t=1 down to t=0 with uniform
/// steps: x <- x - dt * v(x, t).
pub fn euler_integrate(
    x1: Tensor<f32>,
    steps: usize,
    mut velocity: impl FnMut(&Tensor<f32>, f64) -> Result<Tensor<f32>>,
) -> Result<Tensor<f32>> {
    assert!(steps >= 1);
    let dt = 1.0 / steps as f64;
    let mut x = x1;
    for i in 0..steps {
        let t = 1.0 - i as f64 * dt;
        let v = velocity(&x, t)?;
        if v.dims() != x.dims() {
            return Err(BicoError::dim(
                "euler_integrate",
                format!("velocity dims {:?} vs state {:?}", v.dims(), x.dims()),
            ));
        }
        let dts = dt as f32;
        for (xv, &vv) in x.data_mut().iter_mut().zip(v.data()) {
            *xv -= dts * vv;
        }
    }
    Ok(x)
}

/// Draw Gaussian x1 from the seed and integrate the model velocity field
/// down to t=0. Deterministic given (params, prompts, steps, seed). Output
/// is unclamped; clamping happens only at export.
pub fn sample_video(
    params: &ParamStore<f32>,
    cfg: &ModelConfig,
    provider_factory: &mut dyn FnMut(&mut Graph<f32>, &StoreNodes, usize) -> Result<ValueId>,
    steps: usize,
    seed: u64,
) -> Result<Tensor<f32>> {
    let mut rng = rng_stream(seed, "sample.init");
    let x1 = Tensor::<f32>::randn(&cfg.video_dims(), 1.0, &mut rng);
    euler_integrate(x1, steps, |x, t| {
        let mut g: Graph<f32> = Graph::new();
        let nodes = StoreNodes::bind(&mut g, params);
        let x_in = g.leaf(patchify_raw(x, cfg)?);
        let mut provider =
            |g: &mut Graph<f32>, b: usize| -> Result<ValueId> { provider_factory(g, &nodes, b) };
        let out = dit_forward_graph(&mut g, &nodes, cfg, x_in, t, &mut provider)?;
        unpatchify_raw(g.value(out), cfg)
    })
}

/// Embedding-table lookup for a prompt, [L, d_model].
pub fn embed_prompt(ids: &[u32], params: &ParamStore<f32>, cfg: &ModelConfig) -> Result<Tensor<f32>> {
    if ids.is_empty() {
        return Err(BicoError::dim("embed_prompt", "empty prompt".to_string()));
    }
    if ids.len() > cfg.max_prompt_len {
        return Err(BicoError::PromptTooLong {
            len: ids.len(),
            max: cfg.max_prompt_len,
        });
    }
    let table = params.get("embed.table");
    let d = table.dims()[1];
    let mut out = Tensor::zeros(&[ids.len(), d]);
    for (r, &id) in ids.iter().enumerate() {
        let id = id as usize;
        if id >= table.dims()[0] {
            return Err(BicoError::UnknownToken {
                what: format!("id {id}"),
            });
        }
        out.data_mut()[r * d..(r + 1) * d].copy_from_slice(&table.data()[id * d..(id + 1) * d]);
    }
    Ok(out)
}
