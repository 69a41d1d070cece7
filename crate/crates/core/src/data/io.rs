//! Netpbm frames and masks, `CPXF` flow files, and clip directories.

use std::io::Read;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageFormat};

use crate::correspondence::FlowField;
use crate::data::Image;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const FLOW_MAGIC: &[u8; 4] = b"CPXF";

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Reads a PPM (P6) or PGM (P5) frame as an `h x w x 3` image in `[0,1]`.
/// Grey frames are replicated across the three channels.
pub fn read_image(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Pnm)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let rgb = match img {
        DynamicImage::ImageLuma16(_) | DynamicImage::ImageRgb16(_) => {
            let buf = img.to_rgb16();
            let (w, h) = buf.dimensions();
            let data = buf.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect();
            return Tensor::new(&[h as usize, w as usize, 3], data);
        }
        other => other.to_rgb8(),
    };
    let (w, h) = rgb.dimensions();
    let data = rgb.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Tensor::new(&[h as usize, w as usize, 3], data)
}

/// Writes an `h x w x 3` image as binary PPM (P6).
pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    let s = img.shape();
    if img.rank() != 3 || s[2] != 3 {
        return Err(Error::shape("write_ppm", &[0, 0, 3], s));
    }
    let mut buf = format!("P6\n{} {}\n255\n", s[1], s[0]).into_bytes();
    buf.extend(img.data().iter().map(|&v| to_u8(v)));
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Writes 8-bit grey values as binary PGM (P5).
pub fn write_pgm(path: &Path, h: usize, w: usize, values: &[u8]) -> Result<()> {
    if values.len() != h * w {
        return Err(Error::shape("write_pgm", &[h * w], &[values.len()]));
    }
    let mut buf = format!("P5\n{w} {h}\n255\n").into_bytes();
    buf.extend_from_slice(values);
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads a PGM as raw 8-bit values with its extents `(h, w)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Pnm)
        .map_err(|e| Error::format(path, e.to_string()))?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok((h as usize, w as usize, img.into_raw()))
}

/// Binary mask as PGM with values `{0, 255}`.
pub fn write_mask(path: &Path, h: usize, w: usize, mask: &[bool]) -> Result<()> {
    let v: Vec<u8> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    write_pgm(path, h, w, &v)
}

/// Reads a `{0,255}` PGM mask; any non-zero value counts as set.
pub fn read_mask(path: &Path) -> Result<(usize, usize, Vec<bool>)> {
    let (h, w, v) = read_pgm(path)?;
    Ok((h, w, v.into_iter().map(|x| x != 0).collect()))
}

/// Class-label map as PGM: binary maps use `{0,255}`, otherwise raw ids.
pub fn write_label_map(path: &Path, h: usize, w: usize, labels: &[u8]) -> Result<()> {
    if labels.iter().all(|&l| l <= 1) {
        let v: Vec<u8> = labels.iter().map(|&l| l * 255).collect();
        write_pgm(path, h, w, &v)
    } else {
        write_pgm(path, h, w, labels)
    }
}

/// Inverse of [`write_label_map`].
pub fn read_label_map(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let (h, w, v) = read_pgm(path)?;
    if v.iter().all(|&x| x == 0 || x == 255) {
        Ok((h, w, v.into_iter().map(|x| (x == 255) as u8).collect()))
    } else {
        Ok((h, w, v))
    }
}

/// `CPXF` flow: magic, `u32` H, `u32` W, then `H*W*2` little-endian `f32` `(du, dv)`.
pub fn write_flow(path: &Path, flow: &FlowField) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + flow.vectors().len() * 4);
    buf.extend_from_slice(FLOW_MAGIC);
    buf.extend_from_slice(&(flow.h() as u32).to_le_bytes());
    buf.extend_from_slice(&(flow.w() as u32).to_le_bytes());
    for v in flow.vectors().data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_flow(path: &Path) -> Result<FlowField> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = bytes.as_slice();
    let mut head = [0u8; 12];
    cur.read_exact(&mut head).map_err(|e| Error::io(path, e))?;
    if &head[..4] != FLOW_MAGIC {
        return Err(Error::format(path, "bad flow magic"));
    }
    let h = u32::from_le_bytes([head[4], head[5], head[6], head[7]]) as usize;
    let w = u32::from_le_bytes([head[8], head[9], head[10], head[11]]) as usize;
    if cur.len() != h * w * 8 {
        return Err(Error::format(path, format!("expected {} payload bytes, found {}", h * w * 8, cur.len())));
    }
    let data = cur
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    FlowField::new(Tensor::new(&[h, w, 2], data)?)
}

/// Orders names with embedded numbers numerically (`f2` before `f10`).
fn natural_key(name: &str) -> Vec<(u64, String)> {
    let mut out = Vec::new();
    let mut text = String::new();
    let mut num: Option<u64> = None;
    for ch in name.chars() {
        if let Some(d) = ch.to_digit(10) {
            num = Some(num.unwrap_or(0).saturating_mul(10).saturating_add(d as u64));
        } else {
            if let Some(n) = num.take() {
                out.push((n, std::mem::take(&mut text)));
            }
            text.push(ch);
        }
    }
    out.push((num.unwrap_or(0), text));
    out
}

/// Frame paths (`.ppm` / `.pgm`) of a clip directory in filename order.
pub fn clip_frame_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in rd {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase());
        if matches!(ext.as_deref(), Some("ppm") | Some("pgm")) {
            paths.push(p);
        }
    }
    paths.sort_by_key(|p| natural_key(&p.file_name().unwrap_or_default().to_string_lossy()));
    Ok(paths)
}

/// Loads a directory of numbered PPM/PGM frames, normalised to `[0,1]`.
pub fn load_clip(dir: &Path) -> Result<Vec<Image>> {
    let paths = clip_frame_paths(dir)?;
    if paths.is_empty() {
        return Err(Error::format(dir, "no PPM/PGM frames found"));
    }
    let mut frames: Vec<Image> = Vec::with_capacity(paths.len());
    for p in &paths {
        let img = read_image(p)?;
        if let Some(first) = frames.first() {
            if first.shape() != img.shape() {
                return Err(Error::format(
                    p,
                    format!("frame extents {:?} differ from {:?}", img.shape(), first.shape()),
                ));
            }
        }
        frames.push(img);
    }
    Ok(frames)
}

/// Writes frames as `frame_00000.ppm`, `frame_00001.ppm`, ...
pub fn save_clip(dir: &Path, frames: &[Image]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, f) in frames.iter().enumerate() {
        write_ppm(&dir.join(format!("frame_{i:05}.ppm")), f)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn natural_order_sorts_numbers_by_value() {
        let mut v = vec!["f10.ppm", "f2.ppm", "f1.ppm"];
        v.sort_by_key(|s| natural_key(s));
        assert_eq!(v, vec!["f1.ppm", "f2.ppm", "f10.ppm"]);
    }

    #[test]
    fn ppm_and_flow_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor::from_fn(&[3, 4, 3], |i| (i % 256) as f32 / 255.0);
        let p = dir.path().join("a.ppm");
        write_ppm(&p, &img).unwrap();
        let raw = std::fs::read(&p).unwrap();
        assert_eq!(&raw[..2], b"P6");
        assert!(read_image(&p).unwrap().max_abs_diff(&img) < 1e-6);

        let flow = FlowField::new(Tensor::from_fn(&[2, 3, 2], |i| i as f32 - 2.5)).unwrap();
        let fp = dir.path().join("f.flo");
        write_flow(&fp, &flow).unwrap();
        let raw = std::fs::read(&fp).unwrap();
        assert_eq!(&raw[..4], b"CPXF");
        assert_eq!(raw.len(), 12 + 2 * 3 * 8);
        assert_eq!(read_flow(&fp).unwrap(), flow);
    }

    #[test]
    fn masks_use_zero_and_255() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        write_mask(&p, 2, 2, &[true, false, false, true]).unwrap();
        let (_, _, raw) = read_pgm(&p).unwrap();
        assert_eq!(raw, vec![255, 0, 0, 255]);
        assert_eq!(read_mask(&p).unwrap().2, vec![true, false, false, true]);
    }

    #[test]
    fn clip_loading_contract() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_clip(dir.path()).is_err());
        let frames: Vec<Image> = (0..3).map(|i| Tensor::full(&[4, 5, 3], i as f32 / 4.0)).collect();
        save_clip(dir.path(), &frames).unwrap();
        let loaded = load_clip(dir.path()).unwrap();
        assert_eq!(loaded.len(), 3);
        assert!(loaded[2].max_abs_diff(&frames[2]) < 1e-2);
        // a grey frame of different size breaks the clip
        write_pgm(&dir.path().join("frame_00003.pgm"), 2, 2, &[0, 1, 2, 3]).unwrap();
        assert!(load_clip(dir.path()).is_err());
    }
}
