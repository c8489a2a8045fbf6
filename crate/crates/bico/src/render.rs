//! Deterministic anti-aliased rasterizer for the synthetic scene world.
//!
//! Videos are [T, H, W, 3] tensors with values in [-1, 1]. The same
//! coverage sampler feeds both the renderer and the oracle's ideal masks.

use crate::error::Result;
use crate::scene::SceneSpec;
use crate::tensor::Tensor;
use crate::vocab::{BackgroundKind, ShapeKind, TextureKind};

/// Subsample grid per pixel edge (SS x SS samples per pixel).
const SS: usize = 4;

/// Brightness (HSV value) of the dark regions of striped/dotted textures.
/// Bright enough that dark texels stay well above the foreground
/// segmentation threshold on every background.
const TEXTURE_DARK_V: f64 = 0.6;

pub fn hsv_to_rgb(h_deg: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h_deg.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Analytic background color at pixel coordinates, in [-1, 1].
pub fn background_color(bg: BackgroundKind, x: f64, y: f64) -> [f64; 3] {
    match bg {
        BackgroundKind::Black => [-1.0, -1.0, -1.0],
        BackgroundKind::White => [1.0, 1.0, 1.0],
        BackgroundKind::Gray => [0.0, 0.0, 0.0],
        BackgroundKind::Checker => {
            let cell = 4.0;
            let parity =
                ((x / cell).floor() as i64 + (y / cell).floor() as i64).rem_euclid(2);
            let v = if parity == 0 { -0.3 } else { 0.3 };
            [v, v, v]
        }
    }
}

/// Point-in-shape test in pixel coordinates. `size_px` is the circle
/// diameter, square side, or triangle circumdiameter.
pub fn in_shape(shape: ShapeKind, cx: f64, cy: f64, size_px: f64, x: f64, y: f64) -> bool {
    let dx = x - cx;
    let dy = y - cy;
    let half = size_px / 2.0;
    match shape {
        ShapeKind::Circle => dx * dx + dy * dy <= half * half,
        ShapeKind::Square => dx.abs() <= half && dy.abs() <= half,
        ShapeKind::Triangle => {
            // equilateral, apex up (screen y grows downward)
            let r = half;
            let v = [
                (0.0, -r),
                (r * 0.866_025_403_784_438_6, r * 0.5),
                (-r * 0.866_025_403_784_438_6, r * 0.5),
            ];
            let cross = |a: (f64, f64), b: (f64, f64), p: (f64, f64)| -> f64 {
                (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0)
            };
            let p = (dx, dy);
            let d0 = cross(v[0], v[1], p);
            let d1 = cross(v[1], v[2], p);
            let d2 = cross(v[2], v[0], p);
            let has_neg = d0 < 0.0 || d1 < 0.0 || d2 < 0.0;
            let has_pos = d0 > 0.0 || d1 > 0.0 || d2 > 0.0;
            !(has_neg && has_pos)
        }
    }
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn texture_phases(seed: u64) -> (f64, f64) {
    let mut s = seed;
    let a = splitmix64(&mut s) as f64 / u64::MAX as f64;
    let b = splitmix64(&mut s) as f64 / u64::MAX as f64;
    (a, b)
}

/// Brightness (HSV value) of the foreground at shape-local pixel offsets.
/// Patterns are anchored to the shape center so they travel with it, and
/// only brightness varies: hue stays exact for the oracle.
fn texture_value(texture: TextureKind, seed: u64, size_px: f64, lx: f64, ly: f64) -> f64 {
    match texture {
        TextureKind::Solid => 1.0,
        TextureKind::Striped => {
            let (phase, _) = texture_phases(seed);
            let stripe_w = (size_px / 4.0).max(1.2);
            let idx = (lx / stripe_w + phase * 2.0).floor() as i64;
            if idx.rem_euclid(2) == 0 {
                1.0
            } else {
                TEXTURE_DARK_V
            }
        }
        TextureKind::Dotted => {
            let (phx, phy) = texture_phases(seed);
            let sp = (size_px / 3.0).max(2.0);
            let gx = (lx / sp + phx).rem_euclid(1.0) - 0.5;
            let gy = (ly / sp + phy).rem_euclid(1.0) - 0.5;
            if (gx * gx + gy * gy).sqrt() <= 0.3 {
                TEXTURE_DARK_V
            } else {
                1.0
            }
        }
    }
}

/// Render a scene to a [T, H, W, 3] video tensor. Deterministic in the
/// spec (including texture_seed); values never clamped here.
pub fn render_scene(spec: &SceneSpec) -> Result<Tensor<f32>> {
    spec.validate()?;
    let (t_n, h, w) = (spec.frames, spec.height, spec.width);
    let size_px = spec.size_px();
    let mut data = vec![0.0f32; t_n * h * w * 3];
    let inv_ss2 = 1.0 / (SS * SS) as f64;
    for t in 0..t_n {
        let (cxu, cyu) = spec.center_at(t);
        let (cx, cy) = (cxu * w as f64, cyu * h as f64);
        for i in 0..h {
            for j in 0..w {
                let mut acc = [0.0f64; 3];
                for sy in 0..SS {
                    for sx in 0..SS {
                        let x = j as f64 + (sx as f64 + 0.5) / SS as f64;
                        let y = i as f64 + (sy as f64 + 0.5) / SS as f64;
                        let c = if in_shape(spec.shape, cx, cy, size_px, x, y) {
                            let v = texture_value(
                                spec.texture,
                                spec.texture_seed,
                                size_px,
                                x - cx,
                                y - cy,
                            );
                            let rgb = hsv_to_rgb(spec.hue_deg, 1.0, v);
                            [rgb[0] * 2.0 - 1.0, rgb[1] * 2.0 - 1.0, rgb[2] * 2.0 - 1.0]
                        } else {
                            background_color(spec.background, x, y)
                        };
                        acc[0] += c[0];
                        acc[1] += c[1];
                        acc[2] += c[2];
                    }
                }
                let base = ((t * h + i) * w + j) * 3;
                for ch in 0..3 {
                    data[base + ch] = (acc[ch] * inv_ss2) as f32;
                }
            }
        }
    }
    Tensor::new(vec![t_n, h, w, 3], data)
}

/// Per-pixel coverage of a bare shape (no texture) at the given center:
/// the ideal mask generator shared with the oracles. Returned row-major
/// [h * w] with values in [0, 1].
pub fn ideal_coverage(
    shape: ShapeKind,
    size_px: f64,
    cx: f64,
    cy: f64,
    h: usize,
    w: usize,
) -> Vec<f64> {
    let mut cov = vec![0.0f64; h * w];
    let inv = 1.0 / (SS * SS) as f64;
    for i in 0..h {
        for j in 0..w {
            let mut hits = 0usize;
            for sy in 0..SS {
                for sx in 0..SS {
                    let x = j as f64 + (sx as f64 + 0.5) / SS as f64;
                    let y = i as f64 + (sy as f64 + 0.5) / SS as f64;
                    if in_shape(shape, cx, cy, size_px, x, y) {
                        hits += 1;
                    }
                }
            }
            cov[i * w + j] = hits as f64 * inv;
        }
    }
    cov
}

/// Replicate a single frame ([1,H,W,3] or a frame index of a video) into a
/// static T-frame video.
pub fn replicate_frame(video: &Tensor<f32>, frame: usize, frames_out: usize) -> Tensor<f32> {
    let d = video.dims();
    assert_eq!(d.len(), 4, "expected [T,H,W,3] video");
    let (h, w, c) = (d[1], d[2], d[3]);
    let stride = h * w * c;
    let src = &video.data()[frame * stride..(frame + 1) * stride];
    let mut data = Vec::with_capacity(frames_out * stride);
    for _ in 0..frames_out {
        data.extend_from_slice(src);
    }
    Tensor::new(vec![frames_out, h, w, c], data).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::MotionKind;

    fn spec() -> SceneSpec {
        SceneSpec {
            shape: ShapeKind::Circle,
            hue_deg: 0.0,
            texture: TextureKind::Solid,
            texture_seed: 7,
            size_frac: 0.3,
            start_pos: (0.5, 0.5),
            motion: MotionKind::Static,
            speed_frac: 0.0,
            background: BackgroundKind::Black,
            frames: 2,
            height: 16,
            width: 16,
        }
    }

    #[test]
    fn static_scene_frames_are_identical() {
        let v = render_scene(&spec()).unwrap();
        let stride = 16 * 16 * 3;
        assert_eq!(&v.data()[..stride], &v.data()[stride..2 * stride]);
    }

    #[test]
    fn render_is_bit_deterministic() {
        let a = render_scene(&spec()).unwrap();
        let b = render_scene(&spec()).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn center_pixel_is_pure_red() {
        let v = render_scene(&spec()).unwrap();
        // pixel (8,8) is deep inside the circle
        let base = ((0 * 16 + 8) * 16 + 8) * 3;
        let px = &v.data()[base..base + 3];
        assert!((px[0] - 1.0).abs() < 1e-6);
        assert!((px[1] + 1.0).abs() < 1e-6);
        assert!((px[2] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn values_stay_in_range() {
        let mut s = spec();
        s.background = BackgroundKind::Checker;
        s.texture = TextureKind::Striped;
        let v = render_scene(&s).unwrap();
        assert!(v.data().iter().all(|&x| (-1.0..=1.0).contains(&x)));
        assert!(v.all_finite());
    }

    #[test]
    fn replicate_frame_repeats_bits() {
        let v = render_scene(&spec()).unwrap();
        let r = replicate_frame(&v, 1, 4);
        assert_eq!(r.dims(), &[4, 16, 16, 3]);
        let stride = 16 * 16 * 3;
        for t in 0..4 {
            assert_eq!(
                &r.data()[t * stride..(t + 1) * stride],
                &v.data()[stride..2 * stride]
            );
        }
    }

    #[test]
    fn hsv_primaries() {
        assert_eq!(hsv_to_rgb(0.0, 1.0, 1.0), [1.0, 0.0, 0.0]);
        let g = hsv_to_rgb(120.0, 1.0, 1.0);
        assert!((g[1] - 1.0).abs() < 1e-12 && g[0].abs() < 1e-12);
        let b = hsv_to_rgb(240.0, 1.0, 1.0);
        assert!((b[2] - 1.0).abs() < 1e-12);
    }
}
