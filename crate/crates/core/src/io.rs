//! Binary and text file formats.
//!
//! - `.gct` tensors: magic `GCT1`, element width byte (4 or 8), four
//!   little-endian u32 dims (n, c, h, w), then the payload as little-endian
//!   IEEE scalars. Round trips are bit-exact.
//! - `.gcm` masks: magic `GCM1`, u32 height, u32 width, u32 cell size, then
//!   one 0/1 byte per cell.
//! - `.gcw` weights: magic `GCW1`, u16 layer count, then per layer four u32
//!   dims (out, in, kh, kw) followed by weights and biases in declaration
//!   order.
//! - PGM (P5, maxval 255) import/export for masks, probability heatmaps and
//!   grayscale images.
//! - Plain-text `x,y,w,h` box annotations and `x,y,w,h,score` detections.

use std::fs;
use std::path::Path;

use crate::element::Element;
use crate::error::{Error, Result};
use crate::guidance::BBox;
use crate::mask::GuidanceMask;
use crate::tensor::Tensor;

const TENSOR_MAGIC: &[u8; 4] = b"GCT1";
const MASK_MAGIC: &[u8; 4] = b"GCM1";
const WEIGHTS_MAGIC: &[u8; 4] = b"GCW1";

fn check_magic(bytes: &[u8], expected: &'static [u8; 4], name: &'static str) -> Result<()> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            what: name,
            expected: 4,
            found: bytes.len(),
        });
    }
    if &bytes[..4] != expected {
        return Err(Error::BadMagic {
            expected: std::str::from_utf8(expected).unwrap(),
            found: bytes[..4].to_vec(),
        });
    }
    Ok(())
}

fn read_u32(bytes: &[u8], off: usize, what: &'static str) -> Result<u32> {
    if bytes.len() < off + 4 {
        return Err(Error::Truncated {
            what,
            expected: off + 4,
            found: bytes.len(),
        });
    }
    Ok(u32::from_le_bytes([
        bytes[off],
        bytes[off + 1],
        bytes[off + 2],
        bytes[off + 3],
    ]))
}

pub fn tensor_to_bytes<E: Element>(t: &Tensor<E>) -> Vec<u8> {
    let (n, c, h, w) = t.shape();
    let mut out = Vec::with_capacity(21 + t.len() * E::WIDTH as usize);
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(E::WIDTH);
    for dim in [n, c, h, w] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

pub fn tensor_from_bytes<E: Element>(bytes: &[u8]) -> Result<Tensor<E>> {
    check_magic(bytes, TENSOR_MAGIC, "tensor file")?;
    if bytes.len() < 5 {
        return Err(Error::Truncated {
            what: "tensor header",
            expected: 21,
            found: bytes.len(),
        });
    }
    let width = bytes[4];
    if width != E::WIDTH {
        return Err(Error::BadHeader {
            what: "tensor",
            detail: format!("element width {} but expected {}", width, E::WIDTH),
        });
    }
    let n = read_u32(bytes, 5, "tensor header")? as usize;
    let c = read_u32(bytes, 9, "tensor header")? as usize;
    let h = read_u32(bytes, 13, "tensor header")? as usize;
    let w = read_u32(bytes, 17, "tensor header")? as usize;
    let count = n * c * h * w;
    let payload = &bytes[21..];
    let need = count * E::WIDTH as usize;
    if payload.len() != need {
        return Err(Error::Truncated {
            what: "tensor payload",
            expected: need,
            found: payload.len(),
        });
    }
    let step = E::WIDTH as usize;
    let data = (0..count).map(|i| E::read_le(&payload[i * step..])).collect();
    Tensor::from_vec(n, c, h, w, data)
}

pub fn write_tensor<E: Element, P: AsRef<Path>>(path: P, t: &Tensor<E>) -> Result<()> {
    fs::write(path, tensor_to_bytes(t))?;
    Ok(())
}

pub fn read_tensor<E: Element, P: AsRef<Path>>(path: P) -> Result<Tensor<E>> {
    tensor_from_bytes(&fs::read(path)?)
}

pub fn mask_to_bytes(mask: &GuidanceMask) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + mask.cells().len());
    out.extend_from_slice(MASK_MAGIC);
    out.extend_from_slice(&(mask.height() as u32).to_le_bytes());
    out.extend_from_slice(&(mask.width() as u32).to_le_bytes());
    out.extend_from_slice(&(mask.cell_size() as u32).to_le_bytes());
    out.extend(mask.cells().iter().map(|&c| c as u8));
    out
}

pub fn mask_from_bytes(bytes: &[u8]) -> Result<GuidanceMask> {
    check_magic(bytes, MASK_MAGIC, "mask file")?;
    let h = read_u32(bytes, 4, "mask header")? as usize;
    let w = read_u32(bytes, 8, "mask header")? as usize;
    let cell = read_u32(bytes, 12, "mask header")? as usize;
    if cell == 0 {
        return Err(Error::BadHeader {
            what: "mask",
            detail: "cell size must be positive".into(),
        });
    }
    let payload = &bytes[16..];
    if payload.len() != h * w {
        return Err(Error::Truncated {
            what: "mask payload",
            expected: h * w,
            found: payload.len(),
        });
    }
    let cells = payload.iter().map(|&b| b != 0).collect();
    Ok(GuidanceMask::from_cells(h, w, cell, cells))
}

pub fn write_mask<P: AsRef<Path>>(path: P, mask: &GuidanceMask) -> Result<()> {
    fs::write(path, mask_to_bytes(mask))?;
    Ok(())
}

pub fn read_mask<P: AsRef<Path>>(path: P) -> Result<GuidanceMask> {
    mask_from_bytes(&fs::read(path)?)
}

/// Binary P5 PGM with maxval 255.
pub fn pgm_to_bytes(h: usize, w: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), h * w);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn pgm_from_bytes(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let header_err = |detail: &str| Error::BadHeader {
        what: "pgm",
        detail: detail.to_string(),
    };
    if !bytes.starts_with(b"P5") {
        return Err(header_err("not a P5 pgm"));
    }
    // header tokens: P5, width, height, maxval; comments start with '#'
    let mut pos = 2;
    let mut fields = Vec::new();
    while fields.len() < 3 && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            break;
        }
        let tok = std::str::from_utf8(&bytes[start..pos]).map_err(|_| header_err("non-ascii header"))?;
        fields.push(tok.parse::<usize>().map_err(|_| header_err("bad header number"))?);
    }
    if fields.len() != 3 {
        return Err(header_err("incomplete header"));
    }
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(header_err("only maxval 255 supported"));
    }
    pos += 1; // single whitespace after maxval
    let payload = &bytes[pos..];
    if payload.len() != h * w {
        return Err(Error::Truncated {
            what: "pgm payload",
            expected: h * w,
            found: payload.len(),
        });
    }
    Ok((h, w, payload.to_vec()))
}

/// Mask as a PGM: 255 for true cells, 0 for false.
pub fn mask_to_pgm(mask: &GuidanceMask) -> Vec<u8> {
    let pixels: Vec<u8> = mask.cells().iter().map(|&c| if c { 255 } else { 0 }).collect();
    pgm_to_bytes(mask.height(), mask.width(), pixels.as_slice())
}

pub fn mask_from_pgm(bytes: &[u8], cell_size: usize) -> Result<GuidanceMask> {
    let (h, w, pixels) = pgm_from_bytes(bytes)?;
    Ok(GuidanceMask::from_cells(
        h,
        w,
        cell_size,
        pixels.iter().map(|&p| p >= 128).collect(),
    ))
}

/// Probability heatmap as a PGM: probability * 255, rounded.
pub fn probabilities_to_pgm(h: usize, w: usize, probs: &[f64]) -> Vec<u8> {
    let pixels: Vec<u8> = probs
        .iter()
        .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    pgm_to_bytes(h, w, &pixels)
}

/// Grayscale image tensor (1 x 1 x h x w, values in [0, 1]) as a PGM.
pub fn image_to_pgm<E: Element>(image: &Tensor<E>) -> Vec<u8> {
    let (_, _, h, w) = image.shape();
    let pixels: Vec<u8> = image
        .data()
        .iter()
        .map(|v| (v.to_f64().clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    pgm_to_bytes(h, w, &pixels)
}

pub fn image_from_pgm<E: Element>(bytes: &[u8]) -> Result<Tensor<E>> {
    let (h, w, pixels) = pgm_from_bytes(bytes)?;
    let data = pixels.iter().map(|&p| E::from_f64(p as f64 / 255.0)).collect();
    Tensor::from_vec(1, 1, h, w, data)
}

/// One box per line: `x,y,w,h` in ASCII decimal.
pub fn boxes_to_string(boxes: &[BBox]) -> String {
    let mut s = String::new();
    for b in boxes {
        s.push_str(&format!("{},{},{},{}\n", b.x, b.y, b.w, b.h));
    }
    s
}

pub fn boxes_from_str(text: &str, path: &str) -> Result<Vec<BBox>> {
    let mut boxes = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return Err(Error::BadRecord {
                path: path.to_string(),
                line: idx + 1,
                detail: format!("expected 4 comma-separated fields, got {}", parts.len()),
            });
        }
        let mut vals = [0.0f64; 4];
        for (i, p) in parts.iter().enumerate() {
            vals[i] = p.trim().parse().map_err(|_| Error::BadRecord {
                path: path.to_string(),
                line: idx + 1,
                detail: format!("bad number {:?}", p),
            })?;
        }
        boxes.push(BBox::new(vals[0], vals[1], vals[2], vals[3])?);
    }
    Ok(boxes)
}

pub fn read_boxes<P: AsRef<Path>>(path: P) -> Result<Vec<BBox>> {
    let text = fs::read_to_string(&path)?;
    boxes_from_str(&text, &path.as_ref().display().to_string())
}

pub fn write_boxes<P: AsRef<Path>>(path: P, boxes: &[BBox]) -> Result<()> {
    fs::write(path, boxes_to_string(boxes))?;
    Ok(())
}

/// Per-layer conv parameters serialized to the `.gcw` layout.
pub fn weights_to_bytes<E: Element>(layers: &[crate::layer::ConvLayer<E>]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&(layers.len() as u16).to_le_bytes());
    for layer in layers {
        for dim in [
            layer.out_channels,
            layer.in_channels,
            layer.kernel_h,
            layer.kernel_w,
        ] {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &v in layer.weights.data() {
            v.write_le(&mut out);
        }
        for &v in &layer.bias {
            v.write_le(&mut out);
        }
    }
    out
}

/// Reads `.gcw` layer tensors. Strides and paddings are architectural, not
/// stored; the caller binds them when reconstructing a network.
pub fn weights_from_bytes<E: Element>(bytes: &[u8]) -> Result<Vec<(usize, usize, usize, usize, Vec<E>, Vec<E>)>> {
    check_magic(bytes, WEIGHTS_MAGIC, "weights file")?;
    if bytes.len() < 6 {
        return Err(Error::Truncated {
            what: "weights header",
            expected: 6,
            found: bytes.len(),
        });
    }
    let count = u16::from_le_bytes([bytes[4], bytes[5]]) as usize;
    let mut pos = 6;
    let step = E::WIDTH as usize;
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let oc = read_u32(bytes, pos, "weights layer dims")? as usize;
        let ic = read_u32(bytes, pos + 4, "weights layer dims")? as usize;
        let kh = read_u32(bytes, pos + 8, "weights layer dims")? as usize;
        let kw = read_u32(bytes, pos + 12, "weights layer dims")? as usize;
        pos += 16;
        let w_count = oc * ic * kh * kw;
        let need = (w_count + oc) * step;
        if bytes.len() < pos + need {
            return Err(Error::Truncated {
                what: "weights payload",
                expected: pos + need,
                found: bytes.len(),
            });
        }
        let weights = (0..w_count).map(|i| E::read_le(&bytes[pos + i * step..])).collect();
        pos += w_count * step;
        let bias = (0..oc).map(|i| E::read_le(&bytes[pos + i * step..])).collect();
        pos += oc * step;
        layers.push((oc, ic, kh, kw, weights, bias));
    }
    if pos != bytes.len() {
        return Err(Error::BadHeader {
            what: "weights",
            detail: format!("{} trailing bytes", bytes.len() - pos),
        });
    }
    Ok(layers)
}

pub fn write_weights<E: Element, P: AsRef<Path>>(path: P, layers: &[crate::layer::ConvLayer<E>]) -> Result<()> {
    fs::write(path, weights_to_bytes(layers))?;
    Ok(())
}
