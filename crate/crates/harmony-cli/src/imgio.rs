//! Lossless PNG IO for single images. Pixel values map linearly between
//! the model's `[-1, 1]` range and 8-bit RGB; rendered scenes sit exactly
//! on the 8-bit grid, so a write/read round trip is exact.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use harmony_core::scene::{u8_to_unit, unit_to_u8};
use harmony_core::LatentImage;

pub fn write_png(img: &LatentImage, path: &Path) -> Result<()> {
    if img.b != 1 || img.c != 3 {
        bail!(
            "PNG writer expects a single RGB image, got batch {} channels {}",
            img.b,
            img.c
        );
    }
    let mut rgb = Vec::with_capacity(img.h * img.w * 3);
    for y in 0..img.h {
        for x in 0..img.w {
            for c in 0..3 {
                rgb.push(unit_to_u8(img.at(0, c, y, x)));
            }
        }
    }
    let file =
        fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut encoder = png::Encoder::new(file, img.w as u32, img.h as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header()?;
    writer.write_image_data(&rgb)?;
    Ok(())
}

pub fn read_png(path: &Path) -> Result<LatentImage> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder.read_info()?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf)?;
    if info.bit_depth != png::BitDepth::Eight {
        bail!("expected 8-bit PNG");
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let stride = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => bail!("unsupported PNG color type {other:?}"),
    };
    let mut img = LatentImage::zeros(1, 3, h, w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                *img.at_mut(0, c, y, x) = u8_to_unit(buf[(y * w + x) * stride + c]);
            }
        }
    }
    Ok(img)
}
