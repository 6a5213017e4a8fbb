//! On-disk formats: 8-bit RGB images, 16-bit instance maps, 8-bit mask
//! strips, JSON documents and the pseudo-label store.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::datagen::{InstanceLabelMap, RgbImage};
use crate::error::{Error, Result};
use crate::geometry::BinaryMask;
use crate::model::detection::Detection;
use crate::model::roi_align::ROI_SIZE;
use crate::model::MASK_SIZE;
use crate::pseudolabel::{PseudoBox, PseudoInstance, PseudoLabel, PseudoSidecar};

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => Error::Io(e),
    })
}

fn write_png(path: &Path, w: usize, h: usize, color: png::ColorType, depth: png::BitDepth, data: &[u8]) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    let mut writer = enc.write_header()?;
    writer.write_image_data(data)?;
    writer.finish()?;
    Ok(())
}

fn read_png(path: &Path, color: png::ColorType, depth: png::BitDepth) -> Result<(usize, usize, Vec<u8>)> {
    let dec = png::Decoder::new(BufReader::new(open(path)?));
    let mut reader = dec.read_info()?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| Error::Png("image too large".into()))?];
    let info = reader.next_frame(&mut buf)?;
    if info.color_type != color || info.bit_depth != depth {
        return Err(Error::Png(format!(
            "{}: expected {color:?}/{depth:?}, found {:?}/{:?}",
            path.display(),
            info.color_type,
            info.bit_depth
        )));
    }
    buf.truncate(info.buffer_size());
    Ok((info.height as usize, info.width as usize, buf))
}

pub fn save_rgb(path: &Path, image: &RgbImage) -> Result<()> {
    let bytes: Vec<u8> = image.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    write_png(path, image.width, image.height, png::ColorType::Rgb, png::BitDepth::Eight, &bytes)
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let (h, w, buf) = read_png(path, png::ColorType::Rgb, png::BitDepth::Eight)?;
    Ok(RgbImage {
        height: h,
        width: w,
        data: buf.iter().map(|&b| b as f32 / 255.0).collect(),
    })
}

/// Instance map as a 16-bit grayscale PNG, pixel value = instance id.
pub fn save_labels(path: &Path, labels: &InstanceLabelMap) -> Result<()> {
    if labels.max_id() > u16::MAX as u32 {
        return Err(Error::InvalidArgument(format!("instance id {} exceeds 16 bits", labels.max_id())));
    }
    let bytes: Vec<u8> = labels.data.iter().flat_map(|&v| (v as u16).to_be_bytes()).collect();
    write_png(path, labels.width, labels.height, png::ColorType::Grayscale, png::BitDepth::Sixteen, &bytes)
}

pub fn load_labels(path: &Path) -> Result<InstanceLabelMap> {
    let (h, w, buf) = read_png(path, png::ColorType::Grayscale, png::BitDepth::Sixteen)?;
    let data = buf.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]]) as u32).collect();
    Ok(InstanceLabelMap::from_vec(h, w, data))
}

/// Square masks stacked vertically into one 8-bit strip (0 / 255).
pub fn save_mask_strip(path: &Path, masks: &[&BinaryMask], size: usize) -> Result<()> {
    let mut bytes = Vec::with_capacity(masks.len() * size * size);
    for m in masks {
        if m.shape() != (size, size) {
            return Err(Error::Shape(format!("mask strip expects {size}x{size}, got {:?}", m.shape())));
        }
        bytes.extend(m.as_slice().iter().map(|&b| if b { 255u8 } else { 0 }));
    }
    // a zero-height PNG is invalid; an empty strip is stored as one blank row
    let rows = (masks.len() * size).max(1);
    bytes.resize(rows * size, 0);
    write_png(path, size, rows, png::ColorType::Grayscale, png::BitDepth::Eight, &bytes)
}

pub fn load_mask_strip(path: &Path, size: usize, count: usize) -> Result<Vec<BinaryMask>> {
    let (h, w, buf) = read_png(path, png::ColorType::Grayscale, png::BitDepth::Eight)?;
    if w != size || h < count * size {
        return Err(Error::Shape(format!("mask strip {h}x{w} cannot hold {count} masks of {size}")));
    }
    Ok((0..count)
        .map(|k| {
            let px = &buf[k * size * size..(k + 1) * size * size];
            BinaryMask::from_vec(size, size, px.iter().map(|&b| b >= 128).collect())
        })
        .collect())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(open(path)?))?)
}

/// Pseudo-label store for one image under `dir`: `<id>.json` sidecar,
/// `<id>_labels.png` composited instance map, `<id>_mask14.png` and
/// `<id>_mask28.png` strips.
pub fn save_pseudo(dir: &Path, pl: &PseudoLabel, height: usize, width: usize) -> Result<()> {
    let stem = format!("{:05}", pl.image_id);
    let sidecar = PseudoSidecar {
        image_id: pl.image_id,
        t_box: pl.t_box,
        t_pix: pl.t_pix,
        instances: pl
            .instances
            .iter()
            .map(|i| PseudoBox {
                bbox: i.detection.bbox,
                score: i.detection.score,
            })
            .collect(),
    };
    write_json(&dir.join(format!("{stem}.json")), &sidecar)?;
    save_labels(&dir.join(format!("{stem}_labels.png")), &pl.label_map(height, width))?;
    let m14: Vec<&BinaryMask> = pl.instances.iter().map(|i| &i.mask14).collect();
    let m28: Vec<&BinaryMask> = pl.instances.iter().map(|i| &i.mask28).collect();
    save_mask_strip(&dir.join(format!("{stem}_mask14.png")), &m14, ROI_SIZE)?;
    save_mask_strip(&dir.join(format!("{stem}_mask28.png")), &m28, MASK_SIZE)?;
    Ok(())
}

pub fn load_pseudo(dir: &Path, image_id: u32) -> Result<PseudoLabel> {
    let stem = format!("{image_id:05}");
    let sidecar: PseudoSidecar = read_json(&dir.join(format!("{stem}.json")))?;
    let n = sidecar.instances.len();
    let m14 = load_mask_strip(&dir.join(format!("{stem}_mask14.png")), ROI_SIZE, n)?;
    let m28 = load_mask_strip(&dir.join(format!("{stem}_mask28.png")), MASK_SIZE, n)?;
    Ok(PseudoLabel {
        image_id: sidecar.image_id,
        t_box: sidecar.t_box,
        t_pix: sidecar.t_pix,
        instances: sidecar
            .instances
            .into_iter()
            .zip(m14.into_iter().zip(m28))
            .map(|(b, (mask14, mask28))| PseudoInstance {
                detection: Detection {
                    bbox: b.bbox,
                    score: b.score,
                },
                mask28,
                mask14,
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::generate_scene;

    #[test]
    fn scene_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_scene(5, 64, 80, 6, 0.03).unwrap();
        save_rgb(&dir.path().join("i.png"), &s.image).unwrap();
        save_labels(&dir.path().join("l.png"), &s.labels).unwrap();
        assert_eq!(load_rgb(&dir.path().join("i.png")).unwrap(), s.image);
        assert_eq!(load_labels(&dir.path().join("l.png")).unwrap(), s.labels);
    }

    #[test]
    fn missing_file_is_a_missing_artifact() {
        assert!(matches!(
            load_rgb(Path::new("/no/such/file.png")),
            Err(Error::MissingArtifact(_))
        ));
    }

    #[test]
    fn wrong_png_kind_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("i.png");
        save_rgb(&p, &RgbImage::filled(4, 4, [0.2; 3])).unwrap();
        assert!(load_labels(&p).is_err());
    }
}
