//! Media export: animated GIF plus a PNG contact sheet (all frames in a row).

use crate::error::{BicoError, Result};
use crate::tensor::Tensor;
use image::codecs::gif::{GifEncoder, Repeat};
use image::{Delay, Frame, ImageBuffer, Rgba, RgbaImage};
use std::path::{Path, PathBuf};

fn to_byte(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) / 2.0) * 255.0).round() as u8
}

fn frame_image(video: &Tensor<f32>, t: usize) -> RgbaImage {
    let d = video.dims();
    let (h, w) = (d[1], d[2]);
    let data = video.data();
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let base = ((t * h + y as usize) * w + x as usize) * 3;
        Rgba([
            to_byte(data[base]),
            to_byte(data[base + 1]),
            to_byte(data[base + 2]),
            255,
        ])
    })
}

/// Path of the contact sheet written alongside a GIF export.
pub fn sheet_path(gif_path: &Path) -> PathBuf {
    let stem = gif_path
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "video".to_string());
    gif_path.with_file_name(format!("{stem}.sheet.png"))
}

/// Values map [-1,1] -> [0,255] with clamping. Writes the animated GIF at
/// `path` and a PNG contact sheet (frames left to right) next to it.
pub fn export_gif(video: &Tensor<f32>, path: &Path, fps: u32) -> Result<()> {
    let d = video.dims();
    if d.len() != 4 || d[3] != 3 {
        return Err(BicoError::dim(
            "export_gif",
            format!("expected [T,H,W,3] video, got {:?}", d),
        ));
    }
    if !video.all_finite() {
        return Err(BicoError::NumericalAbort {
            context: "export_gif input has non-finite values".to_string(),
        });
    }
    let (t_n, h, w) = (d[0], d[1], d[2]);
    let fps = fps.max(1);

    let file = std::fs::File::create(path)?;
    let mut encoder = GifEncoder::new(std::io::BufWriter::new(file));
    encoder
        .set_repeat(Repeat::Infinite)
        .map_err(|e| BicoError::Checkpoint {
            reason: format!("gif encoder: {e}"),
        })?;
    for t in 0..t_n {
        let img = frame_image(video, t);
        let delay = Delay::from_numer_denom_ms(1000, fps);
        encoder
            .encode_frame(Frame::from_parts(img, 0, 0, delay))
            .map_err(|e| BicoError::Checkpoint {
                reason: format!("gif frame {t}: {e}"),
            })?;
    }
    drop(encoder);

    // contact sheet: frames in a row
    let mut sheet: RgbaImage = ImageBuffer::new((w * t_n) as u32, h as u32);
    for t in 0..t_n {
        let img = frame_image(video, t);
        for (x, y, px) in img.enumerate_pixels() {
            sheet.put_pixel(x + (t * w) as u32, y, *px);
        }
    }
    sheet
        .save(sheet_path(path))
        .map_err(|e| BicoError::Checkpoint {
            reason: format!("contact sheet: {e}"),
        })?;
    Ok(())
}

/// Re-read a contact sheet back into a [-1,1] video tensor (test support
/// for the export round trip).
pub fn import_contact_sheet(path: &Path, frames: usize) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|e| BicoError::Checkpoint {
            reason: format!("read sheet: {e}"),
        })?
        .to_rgba8();
    let w = img.width() as usize / frames;
    let h = img.height() as usize;
    let mut data = vec![0f32; frames * h * w * 3];
    for t in 0..frames {
        for y in 0..h {
            for x in 0..w {
                let px = img.get_pixel((t * w + x) as u32, y as u32);
                let base = ((t * h + y) * w + x) * 3;
                for ch in 0..3 {
                    data[base + ch] = px[ch] as f32 / 255.0 * 2.0 - 1.0;
                }
            }
        }
    }
    Tensor::new(vec![frames, h, w, 3], data)
}
