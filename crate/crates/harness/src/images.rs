//! Grayscale image loading/saving: PGM (P5) natively, PNG via the png crate
//! (luma conversion for color inputs).

use std::fs;
use std::path::Path;

use guided_conv::io::{image_from_pgm, image_to_pgm};
use guided_conv::Tensor;

use crate::error::HarnessError;

/// Loads a grayscale image tensor (1x1xHxW, values in [0,1]) from .pgm or
/// .png, by extension.
pub fn load_image<P: AsRef<Path>>(path: P) -> Result<Tensor<f32>, HarnessError> {
    let path = path.as_ref();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    let bytes = fs::read(path).map_err(|e| HarnessError::MissingFile {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    match ext.as_str() {
        "pgm" => Ok(image_from_pgm(&bytes)?),
        "png" => load_png(&bytes),
        other => Err(HarnessError::BadImage {
            detail: format!("unsupported image extension {other:?} (use .pgm or .png)"),
        }),
    }
}

pub fn save_pgm<P: AsRef<Path>>(path: P, image: &Tensor<f32>) -> Result<(), HarnessError> {
    fs::write(path, image_to_pgm(image))?;
    Ok(())
}

fn load_png(bytes: &[u8]) -> Result<Tensor<f32>, HarnessError> {
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(|e| HarnessError::BadImage {
        detail: format!("png: {e}"),
    })?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(|e| HarnessError::BadImage {
        detail: format!("png: {e}"),
    })?;
    let (w, h) = (info.width as usize, info.height as usize);
    if info.bit_depth != png::BitDepth::Eight {
        return Err(HarnessError::BadImage {
            detail: "only 8-bit png supported".into(),
        });
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => {
            return Err(HarnessError::BadImage {
                detail: format!("unsupported png color type {other:?}"),
            })
        }
    };
    let data: Vec<f32> = (0..h * w)
        .map(|i| {
            let px = &buf[i * channels..(i + 1) * channels];
            let luma = match channels {
                1 | 2 => px[0] as f32,
                _ => 0.299 * px[0] as f32 + 0.587 * px[1] as f32 + 0.114 * px[2] as f32,
            };
            luma / 255.0
        })
        .collect();
    Ok(Tensor::from_vec(1, 1, h, w, data)?)
}

pub fn save_png<P: AsRef<Path>>(path: P, image: &Tensor<f32>) -> Result<(), HarnessError> {
    let (_, _, h, w) = image.shape();
    let pixels: Vec<u8> = image
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let file = fs::File::create(path)?;
    let mut encoder = png::Encoder::new(std::io::BufWriter::new(file), w as u32, h as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header().map_err(|e| HarnessError::BadImage {
        detail: format!("png: {e}"),
    })?;
    writer.write_image_data(&pixels).map_err(|e| HarnessError::BadImage {
        detail: format!("png: {e}"),
    })?;
    Ok(())
}
