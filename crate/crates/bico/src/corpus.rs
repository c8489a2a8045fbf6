//! Corpus generation: uniform sampling over the scene grammar, rendering,
//! and the on-disk corpus layout (corpus.json plus per-item tensor dumps).

use crate::checkpoint;
use crate::error::{BicoError, Result};
use crate::prompt::{spec_to_prompt, PromptMode, PromptTokens};
use crate::render::render_scene;
use crate::scene::{SceneSpec, SIZE_FRAC_MAX, SIZE_FRAC_MIN};
use crate::tensor::Tensor;
use crate::vocab::{Vocabulary, ALL_BACKGROUNDS, ALL_COLORS, ALL_MOTIONS, ALL_SHAPES, ALL_TEXTURES};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::path::Path;

pub const SPEED_FRAC_MIN: f64 = 0.02;
pub const SPEED_FRAC_MAX: f64 = 0.06;

#[derive(Debug, Clone)]
pub struct CorpusItem {
    pub spec: SceneSpec,
    pub video: Tensor<f32>,
    pub prompt: PromptTokens,
}

/// Frame geometry the sampler needs; mirrors the model's T/H/W.
#[derive(Debug, Clone, Copy)]
pub struct SceneDims {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

/// Sample one valid spec uniformly over the grammar. Start positions are
/// drawn from the feasible interval of the sampled motion; speed decays
/// deterministically if a trajectory cannot fit.
pub fn sample_spec(dims: SceneDims, rng: &mut ChaCha8Rng) -> SceneSpec {
    let shape = ALL_SHAPES[rng.gen_range(0..ALL_SHAPES.len())];
    let color = ALL_COLORS[rng.gen_range(0..ALL_COLORS.len())];
    let hue_deg = (color.bucket_center_deg() + rng.gen_range(-25.0..=25.0)).rem_euclid(360.0);
    let texture = ALL_TEXTURES[rng.gen_range(0..ALL_TEXTURES.len())];
    let texture_seed: u64 = rng.gen();
    let size_frac = rng.gen_range(SIZE_FRAC_MIN..=SIZE_FRAC_MAX).max(SIZE_FRAC_MIN + 1e-6);
    let background = ALL_BACKGROUNDS[rng.gen_range(0..ALL_BACKGROUNDS.len())];
    let motion = ALL_MOTIONS[rng.gen_range(0..ALL_MOTIONS.len())];
    let mut speed_frac = rng.gen_range(SPEED_FRAC_MIN..=SPEED_FRAC_MAX);

    let mut proto = SceneSpec {
        shape,
        hue_deg,
        texture,
        texture_seed,
        size_frac,
        start_pos: (0.5, 0.5),
        motion,
        speed_frac,
        background,
        frames: dims.frames,
        height: dims.height,
        width: dims.width,
    };
    let (mx, my) = proto.margins();
    let (dx, dy) = motion.direction();
    let steps = dims.frames.saturating_sub(1) as f64;
    let span = |speed: f64, d: f64| speed * steps * d.abs();
    // shrink speed until the straight-line trajectory fits
    if !motion.is_bounce() {
        while 1.0 - 2.0 * mx - span(speed_frac, dx) < 0.01
            || 1.0 - 2.0 * my - span(speed_frac, dy) < 0.01
        {
            speed_frac *= 0.7;
        }
        proto.speed_frac = speed_frac;
    }
    let mut pick = |m: f64, d: f64| -> f64 {
        let (lo, hi) = if d > 0.0 {
            (m, 1.0 - m - span(speed_frac, d))
        } else if d < 0.0 {
            (m + span(speed_frac, d), 1.0 - m)
        } else {
            (m, 1.0 - m)
        };
        rng.gen_range(lo..=hi.max(lo))
    };
    let (sx, sy) = if motion.is_bounce() {
        (pick(mx, 0.0), pick(my, 0.0))
    } else {
        (pick(mx, dx), pick(my, dy))
    };
    proto.start_pos = (sx, sy);
    proto
        .validate()
        .expect("sampler must produce valid specs");
    proto
}

/// Render `count` freshly sampled scenes with canonical spatiotemporal
/// prompts. Deterministic given the seed; rendering runs in parallel.
pub fn generate_corpus(
    count: usize,
    seed: u64,
    dims: SceneDims,
    vocab: &Vocabulary,
) -> Result<Vec<CorpusItem>> {
    assert!(count >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let specs: Vec<SceneSpec> = (0..count).map(|_| sample_spec(dims, &mut rng)).collect();
    specs
        .into_par_iter()
        .map(|spec| {
            let video = render_scene(&spec)?;
            let prompt = spec_to_prompt(&spec, PromptMode::Spatiotemporal, vocab);
            Ok(CorpusItem {
                spec,
                video,
                prompt,
            })
        })
        .collect()
}

/// Write a corpus directory: `corpus.json` (array of SceneSpec records)
/// plus one checkpoint-container video dump per item.
pub fn export_corpus(dir: &Path, items: &[CorpusItem]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let specs: Vec<&SceneSpec> = items.iter().map(|i| &i.spec).collect();
    let json = serde_json::to_string_pretty(&specs)?;
    std::fs::write(dir.join("corpus.json"), json)?;
    for (idx, item) in items.iter().enumerate() {
        let path = dir.join(format!("item_{idx:05}.bico"));
        checkpoint::save_corpus_item(&path, &item.spec, &item.prompt, &item.video)?;
    }
    Ok(())
}

/// Load a corpus directory written by [`export_corpus`].
pub fn load_corpus(dir: &Path, vocab: &Vocabulary) -> Result<Vec<CorpusItem>> {
    let json = std::fs::read_to_string(dir.join("corpus.json"))?;
    let specs: Vec<SceneSpec> = serde_json::from_str(&json)?;
    let mut items = Vec::with_capacity(specs.len());
    for (idx, spec) in specs.into_iter().enumerate() {
        let path = dir.join(format!("item_{idx:05}.bico"));
        let (loaded_spec, _prompt, video) = checkpoint::load_corpus_item(&path)?;
        if loaded_spec != spec {
            return Err(BicoError::Checkpoint {
                reason: format!("item {idx} spec disagrees with corpus.json"),
            });
        }
        let prompt = spec_to_prompt(&spec, PromptMode::Spatiotemporal, vocab);
        items.push(CorpusItem {
            spec,
            video,
            prompt,
        });
    }
    Ok(items)
}
