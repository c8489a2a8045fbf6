//! Prompt construction: canonical templates and the deterministic
//! diversification grammar that rephrases a scene's prompt while keeping
//! every concept token unchanged.

use crate::error::{BicoError, Result};
use crate::scene::SceneSpec;
use crate::vocab::Vocabulary;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    /// Spatial concepts only: COLOR, TEXTURE, SHAPE, BACKGROUND.
    SpatialOnly,
    /// Spatial concepts plus the MOTION token.
    Spatiotemporal,
}

/// A discrete token sequence plus the position of an attached absorbent
/// row, when present. The embedded matrix lives graph-side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTokens {
    pub ids: Vec<u32>,
    /// Row index of the absorbent slot (always the last row when attached).
    pub absorbent_slot: Option<usize>,
}

impl PromptTokens {
    pub fn new(ids: Vec<u32>) -> Self {
        PromptTokens {
            ids,
            absorbent_slot: None,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Total embedded row count: token ids plus any absorbent slot.
    pub fn row_count(&self) -> usize {
        self.ids.len() + usize::from(self.absorbent_slot.is_some())
    }

    pub fn surfaces(&self, vocab: &Vocabulary) -> Vec<String> {
        self.ids
            .iter()
            .map(|&id| vocab.surface_of(id).unwrap_or("?").to_string())
            .collect()
    }

    pub fn text(&self, vocab: &Vocabulary) -> String {
        self.surfaces(vocab).join(" ")
    }

    pub fn from_surfaces(words: &[&str], vocab: &Vocabulary) -> Result<Self> {
        let ids = words
            .iter()
            .map(|w| vocab.id_of(w))
            .collect::<Result<Vec<_>>>()?;
        Ok(PromptTokens::new(ids))
    }
}

/// Canonical prompt: [a, COLOR, TEXTURE, SHAPE, (moving, MOTION), on, BACKGROUND].
pub fn spec_to_prompt(spec: &SceneSpec, mode: PromptMode, vocab: &Vocabulary) -> PromptTokens {
    let mut ids = vec![
        vocab.filler_id("a"),
        vocab.color_id(spec.color_token()),
        vocab.texture_id(spec.texture),
        vocab.shape_id(spec.shape),
    ];
    if mode == PromptMode::Spatiotemporal {
        ids.push(vocab.filler_id("moving"));
        ids.push(vocab.motion_id(spec.motion));
    }
    ids.push(vocab.filler_id("on"));
    ids.push(vocab.background_id(spec.background));
    PromptTokens::new(ids)
}

/// One grammatical arrangement in the diversification space.
#[derive(Debug, Clone, Copy)]
struct Variant {
    template: u8,     // spatial phrase ordering
    article: u8,      // "a" | "the"
    motion_late: bool, // motion segment after the background segment
    scene_suffix: bool,
}

const N_TEMPLATES: u8 = 4;

fn variant_space(mode: PromptMode) -> Vec<Variant> {
    let mut out = Vec::new();
    for template in 0..N_TEMPLATES {
        for article in 0..2u8 {
            let motion_opts: &[bool] = if mode == PromptMode::Spatiotemporal {
                &[false, true]
            } else {
                &[false]
            };
            for &motion_late in motion_opts {
                for scene_suffix in [false, true] {
                    out.push(Variant {
                        template,
                        article,
                        motion_late,
                        scene_suffix,
                    });
                }
            }
        }
    }
    out
}

fn realize(spec: &SceneSpec, mode: PromptMode, v: Variant, vocab: &Vocabulary) -> PromptTokens {
    let art = vocab.filler_id(if v.article == 0 { "a" } else { "the" });
    let color = vocab.color_id(spec.color_token());
    let texture = vocab.texture_id(spec.texture);
    let shape = vocab.shape_id(spec.shape);
    let background = vocab.background_id(spec.background);
    let on = vocab.filler_id("on");
    let over = vocab.filler_id("over");
    let with = vocab.filler_id("with");
    let moving = vocab.filler_id("moving");
    let scene = vocab.filler_id("scene");

    let mut ids = Vec::with_capacity(11);
    ids.push(art);
    let (bg_link, spatial_tail): (u32, Vec<u32>) = match v.template {
        0 => (on, vec![color, texture, shape]),
        1 => (on, vec![texture, color, shape]),
        2 => (over, vec![shape, with, color, texture]),
        _ => (on, vec![color, shape, with, texture]),
    };
    ids.extend(spatial_tail);
    let motion_segment = |ids: &mut Vec<u32>| {
        if mode == PromptMode::Spatiotemporal {
            ids.push(moving);
            ids.push(vocab.motion_id(spec.motion));
        }
    };
    if !v.motion_late {
        motion_segment(&mut ids);
    }
    ids.push(bg_link);
    ids.push(background);
    if v.scene_suffix {
        ids.push(scene);
    }
    if v.motion_late {
        motion_segment(&mut ids);
    }
    PromptTokens::new(ids)
}

/// Diversified prompts for one source: every concept token of the spec (for
/// the given mode) appears exactly once per prompt; fillers, phrase order,
/// and optional insertions vary. The first draws walk a shuffled variant
/// space without replacement, so n >= 8 always yields at least
/// min(n, 8) distinct sequences.
pub fn diversify_prompts(
    spec: &SceneSpec,
    n: usize,
    mode: PromptMode,
    seed: u64,
    vocab: &Vocabulary,
) -> Vec<PromptTokens> {
    assert!(n >= 1, "n must be >= 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut space = variant_space(mode);
    space.shuffle(&mut rng);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let v = if i < space.len() {
            space[i]
        } else {
            space[rng.gen_range(0..space.len())]
        };
        out.push(realize(spec, mode, v, vocab));
    }
    out
}

/// Check that a prompt's concept tokens exactly match the spec's concept
/// set for the mode (the diversifier retention contract, used to validate
/// binding jobs).
pub fn prompt_matches_spec(
    prompt: &PromptTokens,
    spec: &SceneSpec,
    mode: PromptMode,
    vocab: &Vocabulary,
) -> Result<()> {
    let want = spec.concept_ids(mode == PromptMode::Spatiotemporal, vocab);
    let mut got: Vec<u32> = prompt
        .ids
        .iter()
        .copied()
        .filter(|&id| vocab.is_concept(id))
        .collect();
    got.sort_unstable();
    let mut want_sorted = want.clone();
    want_sorted.sort_unstable();
    if got != want_sorted {
        return Err(BicoError::InvalidSpec {
            reason: format!(
                "prompt concept tokens {:?} do not match spec concepts {:?}",
                got, want_sorted
            ),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{BackgroundKind, Category, MotionKind, ShapeKind, TextureKind};
    use std::collections::BTreeSet;

    fn spec() -> SceneSpec {
        SceneSpec {
            shape: ShapeKind::Circle,
            hue_deg: 10.0,
            texture: TextureKind::Solid,
            texture_seed: 0,
            size_frac: 0.3,
            start_pos: (0.35, 0.5),
            motion: MotionKind::Right,
            speed_frac: 0.03,
            background: BackgroundKind::Black,
            frames: 8,
            height: 16,
            width: 16,
        }
    }

    #[test]
    fn canonical_spatiotemporal_prompt() {
        let v = Vocabulary::standard();
        let p = spec_to_prompt(&spec(), PromptMode::Spatiotemporal, &v);
        assert_eq!(p.text(&v), "a red solid circle moving right on black");
    }

    #[test]
    fn canonical_spatial_prompt_has_no_motion() {
        let v = Vocabulary::standard();
        let p = spec_to_prompt(&spec(), PromptMode::SpatialOnly, &v);
        assert_eq!(p.text(&v), "a red solid circle on black");
        for &id in &p.ids {
            assert_ne!(v.category_of(id).unwrap(), Category::Motion);
        }
    }

    #[test]
    fn all_emitted_ids_exist() {
        let v = Vocabulary::standard();
        let p = spec_to_prompt(&spec(), PromptMode::Spatiotemporal, &v);
        for &id in &p.ids {
            assert!(v.surface_of(id).is_ok());
        }
    }

    #[test]
    fn diversified_prompts_retain_concepts() {
        let v = Vocabulary::standard();
        for seed in 0..4 {
            let prompts = diversify_prompts(&spec(), 16, PromptMode::Spatiotemporal, seed, &v);
            assert_eq!(prompts.len(), 16);
            for p in &prompts {
                prompt_matches_spec(p, &spec(), PromptMode::Spatiotemporal, &v).unwrap();
                // exactly once each
                let concept_count = p.ids.iter().filter(|&&id| v.is_concept(id)).count();
                assert_eq!(concept_count, 5);
            }
        }
    }

    #[test]
    fn spatial_mode_emits_no_motion_tokens() {
        let v = Vocabulary::standard();
        let prompts = diversify_prompts(&spec(), 32, PromptMode::SpatialOnly, 9, &v);
        for p in &prompts {
            for &id in &p.ids {
                assert_ne!(v.category_of(id).unwrap(), Category::Motion);
            }
        }
    }

    #[test]
    fn seeds_give_different_multisets() {
        let v = Vocabulary::standard();
        let a = diversify_prompts(&spec(), 16, PromptMode::Spatiotemporal, 0, &v);
        let b = diversify_prompts(&spec(), 16, PromptMode::Spatiotemporal, 1, &v);
        let ma: Vec<Vec<u32>> = a.iter().map(|p| p.ids.clone()).collect();
        let mb: Vec<Vec<u32>> = b.iter().map(|p| p.ids.clone()).collect();
        assert_ne!(ma, mb);
    }

    #[test]
    fn at_least_eight_distinct_for_n_of_eight() {
        let v = Vocabulary::standard();
        for seed in 0..20 {
            let prompts = diversify_prompts(&spec(), 8, PromptMode::Spatiotemporal, seed, &v);
            let distinct: BTreeSet<Vec<u32>> = prompts.iter().map(|p| p.ids.clone()).collect();
            assert_eq!(distinct.len(), 8);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let v = Vocabulary::standard();
        let a = diversify_prompts(&spec(), 16, PromptMode::Spatiotemporal, 5, &v);
        let b = diversify_prompts(&spec(), 16, PromptMode::Spatiotemporal, 5, &v);
        assert_eq!(a, b);
    }

    #[test]
    fn diversified_lengths_leave_room_for_absorbent() {
        let v = Vocabulary::standard();
        let prompts = diversify_prompts(&spec(), 64, PromptMode::Spatiotemporal, 2, &v);
        for p in &prompts {
            assert!(p.len() + 1 <= 12, "prompt too long: {}", p.text(&v));
        }
    }
}
