//! Parametric ground truth of a synthetic video: rendering input and
//! evaluation oracle in one record.

use crate::error::{BicoError, Result};
use crate::vocab::{BackgroundKind, ColorToken, MotionKind, ShapeKind, TextureKind, Vocabulary};
use serde::{Deserialize, Serialize};

/// Max distance between an instance hue and its color token's bucket
/// center. The token is truthful but underdetermines the instance.
pub const HUE_BUCKET_TOL_DEG: f64 = 25.0;

pub const SIZE_FRAC_MIN: f64 = 0.15;
pub const SIZE_FRAC_MAX: f64 = 0.45;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub shape: ShapeKind,
    /// Continuous hue in [0, 360); carries instance detail beyond the
    /// COLOR token's bucket center.
    pub hue_deg: f64,
    pub texture: TextureKind,
    pub texture_seed: u64,
    /// Characteristic shape size as a fraction of min(H, W).
    pub size_frac: f64,
    /// Start position of the shape center in the unit square.
    pub start_pos: (f64, f64),
    pub motion: MotionKind,
    /// Per-frame displacement as a fraction of the frame extent along the
    /// motion axis (x displacement is speed_frac * W pixels per frame).
    pub speed_frac: f64,
    pub background: BackgroundKind,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl SceneSpec {
    /// Shape size in pixels (circle diameter / square side / triangle
    /// circumdiameter).
    pub fn size_px(&self) -> f64 {
        self.size_frac * self.height.min(self.width) as f64
    }

    pub fn color_token(&self) -> ColorToken {
        ColorToken::nearest(self.hue_deg)
    }

    /// Margins keeping the shape (plus an anti-aliasing ring) inside the
    /// frame, in unit coordinates.
    pub fn margins(&self) -> (f64, f64) {
        let half = self.size_px() / 2.0 + 1.0;
        (half / self.width as f64, half / self.height as f64)
    }

    /// Shape center at frame t, unit coordinates. Bounce motions reflect
    /// at the margins; others translate linearly.
    pub fn center_at(&self, t: usize) -> (f64, f64) {
        let (mx, my) = self.margins();
        let (dx, dy) = self.motion.direction();
        let step = self.speed_frac * t as f64;
        let x0 = self.start_pos.0;
        let y0 = self.start_pos.1;
        let fold = |u0: f64, du: f64, m: f64| -> f64 {
            if du == 0.0 {
                return u0;
            }
            let w = (1.0 - 2.0 * m).max(1e-9);
            let ph = (u0 - m + du).rem_euclid(2.0 * w);
            m + (w - (ph - w).abs())
        };
        if self.motion.is_bounce() {
            (fold(x0, dx * step, mx), fold(y0, dy * step, my))
        } else {
            (x0 + dx * step, y0 + dy * step)
        }
    }

    /// Count of border reflections over the clip (bounce motions only).
    pub fn expected_reflections(&self) -> usize {
        if !self.motion.is_bounce() {
            return 0;
        }
        let (mx, my) = self.margins();
        let (dx, dy) = self.motion.direction();
        let (m, u0, d) = if dx != 0.0 {
            (mx, self.start_pos.0, dx)
        } else {
            (my, self.start_pos.1, dy)
        };
        let w = (1.0 - 2.0 * m).max(1e-9);
        let mut count = 0;
        for t in 1..self.frames {
            let a = (u0 - m + d * self.speed_frac * (t - 1) as f64).div_euclid(w);
            let b = (u0 - m + d * self.speed_frac * t as f64).div_euclid(w);
            if a != b {
                count += 1;
            }
        }
        count
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| Err(BicoError::InvalidSpec { reason });
        if !(0.0..360.0).contains(&self.hue_deg) {
            return fail(format!("hue_deg {} outside [0,360)", self.hue_deg));
        }
        let center = self.color_token().bucket_center_deg();
        let err = hue_distance_deg(self.hue_deg, center);
        if err > HUE_BUCKET_TOL_DEG {
            return fail(format!(
                "hue_deg {} is {:.1} deg from bucket center {} (max {})",
                self.hue_deg, err, center, HUE_BUCKET_TOL_DEG
            ));
        }
        if !(self.size_frac > SIZE_FRAC_MIN && self.size_frac <= SIZE_FRAC_MAX) {
            return fail(format!(
                "size_frac {} outside ({}, {}]",
                self.size_frac, SIZE_FRAC_MIN, SIZE_FRAC_MAX
            ));
        }
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return fail("frames/height/width must be positive".to_string());
        }
        if self.speed_frac < 0.0 {
            return fail("speed_frac must be non-negative".to_string());
        }
        let (mx, my) = self.margins();
        if mx >= 0.5 || my >= 0.5 {
            return fail(format!(
                "shape of size_frac {} does not fit a {}x{} frame",
                self.size_frac, self.height, self.width
            ));
        }
        // non-bounce trajectories must stay inside the frame
        if !self.motion.is_bounce() {
            for t in 0..self.frames {
                let (x, y) = self.center_at(t);
                if x < mx - 1e-9 || x > 1.0 - mx + 1e-9 || y < my - 1e-9 || y > 1.0 - my + 1e-9 {
                    return fail(format!(
                        "trajectory leaves the frame at t={} (center {:.3},{:.3})",
                        t, x, y
                    ));
                }
            }
        } else {
            let (x0, y0) = self.start_pos;
            if x0 < mx || x0 > 1.0 - mx || y0 < my || y0 > 1.0 - my {
                return fail("bounce start_pos outside margins".to_string());
            }
        }
        Ok(())
    }

    /// Concept token ids for the given prompt mode: spatial tokens are
    /// {COLOR, TEXTURE, SHAPE, BACKGROUND}, temporal tokens are {MOTION}.
    pub fn concept_ids(&self, temporal: bool, vocab: &Vocabulary) -> Vec<u32> {
        let mut ids = vec![
            vocab.color_id(self.color_token()),
            vocab.texture_id(self.texture),
            vocab.shape_id(self.shape),
            vocab.background_id(self.background),
        ];
        if temporal {
            ids.push(vocab.motion_id(self.motion));
        }
        ids
    }
}

/// Circular distance between two hues in degrees, in [0, 180].
pub fn hue_distance_deg(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}
