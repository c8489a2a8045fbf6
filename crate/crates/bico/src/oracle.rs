//! Procedural measurements on rendered or generated videos: foreground hue,
//! centroid motion, and shape IoU against ideal masks.
//!
//! Foreground segmentation works off the RMS color distance to the analytic
//! background. IoU uses graded coverage maps rather than hard binary masks:
//! at 16x16 a single flipped boundary pixel would dominate the score of the
//! smallest in-range shapes, while graded masks degrade smoothly and keep
//! the oracle's self-consistency tight.

use crate::render::{background_color, ideal_coverage};
use crate::scene::SceneSpec;
use crate::tensor::Tensor;
use crate::vocab::{BackgroundKind, ShapeKind, ALL_SHAPES};

/// Absolute RMS-distance threshold for "this pixel is foreground".
pub const FG_DIST_THRESHOLD: f64 = 0.2;

/// Minimum fraction of pixels that must be foreground for hue to be defined.
pub const MIN_FG_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
}

#[derive(Debug, Clone)]
pub struct MotionMeasurement {
    /// Normalized net centroid displacement over the clip; (0,0) when the
    /// centroid does not move.
    pub direction: (f64, f64),
    /// Mean per-frame centroid displacement magnitude in pixels.
    pub speed_px: f64,
    /// Axis carrying most of the per-frame displacement mass.
    pub dominant_axis: Axis,
    /// Fraction of displacement mass on the dominant axis, in [0.5, 1].
    pub axis_fraction: f64,
    /// Sign changes of the per-frame displacement along the dominant axis.
    pub reflections: usize,
}

#[derive(Debug, Clone)]
pub struct ShapeClassification {
    pub shape: ShapeKind,
    pub iou: f64,
    pub size_frac: f64,
}

struct FrameStats {
    /// RMS color distance to the analytic background per pixel.
    dists: Vec<f64>,
    d_max: f64,
    /// Coverage-weighted centroid in pixel coordinates, if defined.
    centroid: Option<(f64, f64)>,
    /// Sum of estimated coverage = foreground area estimate in px^2.
    area_px: f64,
}

fn video_dims(video: &Tensor<f32>) -> (usize, usize, usize) {
    let d = video.dims();
    assert_eq!(d.len(), 4, "expected [T,H,W,3] video, got {:?}", d);
    assert_eq!(d[3], 3, "expected 3 channels");
    (d[0], d[1], d[2])
}

fn frame_stats(video: &Tensor<f32>, t: usize, bg: BackgroundKind) -> FrameStats {
    let (_, h, w) = video_dims(video);
    let data = video.data();
    let mut dists = vec![0.0f64; h * w];
    let mut d_max = 0.0f64;
    for i in 0..h {
        for j in 0..w {
            let base = ((t * h + i) * w + j) * 3;
            let bgc = background_color(bg, j as f64 + 0.5, i as f64 + 0.5);
            let mut acc = 0.0;
            for ch in 0..3 {
                let d = data[base + ch] as f64 - bgc[ch];
                acc += d * d;
            }
            let dist = (acc / 3.0).sqrt();
            dists[i * w + j] = dist;
            if dist > d_max {
                d_max = dist;
            }
        }
    }
    let mut centroid = None;
    let mut area = 0.0;
    if d_max > FG_DIST_THRESHOLD {
        let mut sx = 0.0;
        let mut sy = 0.0;
        let mut sw = 0.0;
        for i in 0..h {
            for j in 0..w {
                let c = (dists[i * w + j] / d_max).clamp(0.0, 1.0);
                if c > 0.05 {
                    sx += c * (j as f64 + 0.5);
                    sy += c * (i as f64 + 0.5);
                    sw += c;
                    area += c;
                }
            }
        }
        if sw > 0.0 {
            centroid = Some((sx / sw, sy / sw));
        }
    }
    FrameStats {
        dists,
        d_max,
        centroid,
        area_px: area,
    }
}

fn rgb_hue_deg(r: f64, g: f64, b: f64) -> Option<f64> {
    let mx = r.max(g).max(b);
    let mn = r.min(g).min(b);
    let c = mx - mn;
    if c < 1e-6 {
        return None;
    }
    let h = if mx == r {
        ((g - b) / c).rem_euclid(6.0)
    } else if mx == g {
        (b - r) / c + 2.0
    } else {
        (r - g) / c + 4.0
    };
    Some((h * 60.0).rem_euclid(360.0))
}

/// Circular mean of foreground hue over all frames, in degrees. Returns
/// `None` (undefined) when foreground coverage is below 1% of pixels.
pub fn measure_hue(video: &Tensor<f32>, bg: BackgroundKind) -> Option<f64> {
    let (t_n, h, w) = video_dims(video);
    let data = video.data();
    let mut sin_sum = 0.0;
    let mut cos_sum = 0.0;
    let mut fg_count = 0usize;
    for t in 0..t_n {
        let stats = frame_stats(video, t, bg);
        for i in 0..h {
            for j in 0..w {
                if stats.dists[i * w + j] <= FG_DIST_THRESHOLD {
                    continue;
                }
                fg_count += 1;
                let base = ((t * h + i) * w + j) * 3;
                // back to [0,1] for the hue formula
                let r = (data[base] as f64 + 1.0) / 2.0;
                let g = (data[base + 1] as f64 + 1.0) / 2.0;
                let b = (data[base + 2] as f64 + 1.0) / 2.0;
                if let Some(hue) = rgb_hue_deg(r, g, b) {
                    let rad = hue.to_radians();
                    sin_sum += rad.sin();
                    cos_sum += rad.cos();
                }
            }
        }
    }
    let total = t_n * h * w;
    if (fg_count as f64) < MIN_FG_FRACTION * total as f64 {
        return None;
    }
    if sin_sum == 0.0 && cos_sum == 0.0 {
        return None;
    }
    Some(sin_sum.atan2(cos_sum).to_degrees().rem_euclid(360.0))
}

/// Track the foreground centroid across frames. Undefined when fewer than
/// two frames have a measurable foreground.
pub fn measure_motion(video: &Tensor<f32>, bg: BackgroundKind) -> Option<MotionMeasurement> {
    let (t_n, _, _) = video_dims(video);
    let centroids: Vec<(f64, f64)> = (0..t_n)
        .filter_map(|t| frame_stats(video, t, bg).centroid)
        .collect();
    if centroids.len() < 2 {
        return None;
    }
    let first = centroids[0];
    let last = *centroids.last().unwrap();
    let net = (last.0 - first.0, last.1 - first.1);
    let net_norm = (net.0 * net.0 + net.1 * net.1).sqrt();
    let direction = if net_norm > 1e-9 {
        (net.0 / net_norm, net.1 / net_norm)
    } else {
        (0.0, 0.0)
    };
    let mut speed_sum = 0.0;
    let mut mass_x = 0.0;
    let mut mass_y = 0.0;
    let mut deltas_x = Vec::new();
    let mut deltas_y = Vec::new();
    for pair in centroids.windows(2) {
        let dx = pair[1].0 - pair[0].0;
        let dy = pair[1].1 - pair[0].1;
        speed_sum += (dx * dx + dy * dy).sqrt();
        mass_x += dx.abs();
        mass_y += dy.abs();
        deltas_x.push(dx);
        deltas_y.push(dy);
    }
    let steps = (centroids.len() - 1) as f64;
    let dominant_axis = if mass_x >= mass_y { Axis::X } else { Axis::Y };
    let total_mass = mass_x + mass_y;
    let axis_fraction = if total_mass > 1e-9 {
        mass_x.max(mass_y) / total_mass
    } else {
        1.0
    };
    let deltas = match dominant_axis {
        Axis::X => &deltas_x,
        Axis::Y => &deltas_y,
    };
    let mut reflections = 0usize;
    let mut last_sign = 0i8;
    for &d in deltas {
        if d.abs() < 0.15 {
            continue;
        }
        let sign = if d > 0.0 { 1i8 } else { -1i8 };
        if last_sign != 0 && sign != last_sign {
            reflections += 1;
        }
        last_sign = sign;
    }
    Some(MotionMeasurement {
        direction,
        speed_px: speed_sum / steps,
        dominant_axis,
        axis_fraction,
        reflections,
    })
}

/// Graded IoU between two coverage maps put through the same soft
/// threshold ramp (full weight at half coverage and above).
fn graded_iou(measured: &[f64], d_max: f64, ideal: &[f64]) -> f64 {
    let mut inter = 0.0;
    let mut union = 0.0;
    for (&d, &cov) in measured.iter().zip(ideal) {
        let a = (d / (0.5 * d_max)).clamp(0.0, 1.0);
        let a = if a < 0.1 { 0.0 } else { a }; // suppress sub-noise ramp tails
        let b = (cov / 0.5).clamp(0.0, 1.0);
        inter += a.min(b);
        union += a.max(b);
    }
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Mean per-frame IoU between the measured foreground and an ideal mask of
/// the spec's shape/size centered at the measured centroid. Frames without
/// foreground contribute zero; an empty video scores 0.
pub fn measure_shape(video: &Tensor<f32>, spec: &SceneSpec) -> f64 {
    measure_shape_as(video, spec.background, spec.shape, spec.size_px())
}

pub fn measure_shape_as(
    video: &Tensor<f32>,
    bg: BackgroundKind,
    shape: ShapeKind,
    size_px: f64,
) -> f64 {
    let (t_n, h, w) = video_dims(video);
    let mut total = 0.0;
    for t in 0..t_n {
        let stats = frame_stats(video, t, bg);
        let Some((cx, cy)) = stats.centroid else {
            continue;
        };
        let ideal = ideal_coverage(shape, size_px, cx, cy, h, w);
        total += graded_iou(&stats.dists, stats.d_max, &ideal);
    }
    total / t_n as f64
}

/// Identify the foreground shape without knowing its size: estimate the
/// size of each candidate from the measured area, then pick the best IoU.
pub fn classify_shape(video: &Tensor<f32>, bg: BackgroundKind) -> Option<ShapeClassification> {
    let (t_n, h, w) = video_dims(video);
    let mut best: Option<ShapeClassification> = None;
    for &candidate in ALL_SHAPES.iter() {
        let mut total = 0.0;
        let mut frames_used = 0usize;
        let mut size_sum = 0.0;
        for t in 0..t_n {
            let stats = frame_stats(video, t, bg);
            let Some((cx, cy)) = stats.centroid else {
                continue;
            };
            let size_px = size_from_area(candidate, stats.area_px);
            if size_px <= 0.0 {
                continue;
            }
            let ideal = ideal_coverage(candidate, size_px, cx, cy, h, w);
            total += graded_iou(&stats.dists, stats.d_max, &ideal);
            size_sum += size_px;
            frames_used += 1;
        }
        if frames_used == 0 {
            continue;
        }
        let iou = total / t_n as f64;
        let size_frac = size_sum / frames_used as f64 / h.min(w) as f64;
        if best.as_ref().map(|b| iou > b.iou).unwrap_or(true) {
            best = Some(ShapeClassification {
                shape: candidate,
                iou,
                size_frac,
            });
        }
    }
    best
}

/// Invert the area formula of each shape for its characteristic size
/// (diameter / side / circumdiameter).
fn size_from_area(shape: ShapeKind, area: f64) -> f64 {
    if area <= 0.0 {
        return 0.0;
    }
    match shape {
        ShapeKind::Circle => 2.0 * (area / std::f64::consts::PI).sqrt(),
        ShapeKind::Square => area.sqrt(),
        // A = (3*sqrt(3)/4) R^2 for an equilateral triangle of circumradius R
        ShapeKind::Triangle => 2.0 * (area / (3.0 * 3f64.sqrt() / 4.0)).sqrt(),
    }
}

/// Per-frame centroids, exposed for trajectory tests.
pub fn centroid_track(video: &Tensor<f32>, bg: BackgroundKind) -> Vec<Option<(f64, f64)>> {
    let (t_n, _, _) = video_dims(video);
    (0..t_n)
        .map(|t| frame_stats(video, t, bg).centroid)
        .collect()
}
