//! Image file formats.
//!
//! `.pnpimg` is the exact format: the 8-byte magic `PNPIMG1\0`, width and
//! height as little-endian `u32`, then `width * height` little-endian `f64`
//! values in row-major order. Sinograms use width = bins, height = angles.
//! PGM (plain `P2`) is a lossy preview scaled to the image maximum.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{Image, Sinogram};

pub const IMAGE_MAGIC: &[u8; 8] = b"PNPIMG1\0";

pub fn encode_image(img: &Image) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + 8 * img.len());
    buf.extend_from_slice(IMAGE_MAGIC);
    buf.extend_from_slice(&(img.width as u32).to_le_bytes());
    buf.extend_from_slice(&(img.height as u32).to_le_bytes());
    for v in &img.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_image(bytes: &[u8], origin: &Path) -> Result<Image> {
    let bad = |reason: &str| Error::Format { path: origin.to_path_buf(), reason: reason.to_string() };
    if bytes.len() < 16 || &bytes[..8] != IMAGE_MAGIC {
        return Err(bad("missing PNPIMG1 header"));
    }
    let width = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if body.len() != 8 * width * height {
        return Err(bad("payload length does not match header"));
    }
    let data = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Image { width, height, data })
}

pub fn sinogram_as_image(s: &Sinogram) -> Image {
    Image { width: s.n_bins, height: s.n_angles, data: s.values.clone() }
}

pub fn image_as_sinogram(img: Image) -> Sinogram {
    Sinogram { n_angles: img.height, n_bins: img.width, values: img.data }
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    write_atomic(path, &encode_image(img))
}

pub fn read_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => {
            Error::MissingPrerequisite { path: path.to_path_buf(), reason: "file not found".into() }
        }
        _ => Error::Io(e),
    })?;
    decode_image(&bytes, path)
}

pub fn write_sinogram(path: &Path, s: &Sinogram) -> Result<()> {
    write_image(path, &sinogram_as_image(s))
}

pub fn read_sinogram(path: &Path) -> Result<Sinogram> {
    read_image(path).map(image_as_sinogram)
}

/// Plain PGM with values scaled so that the maximum maps to 255. Negative
/// values are clipped.
pub fn encode_pgm(img: &Image) -> String {
    let max = img.data.iter().copied().fold(0.0f64, f64::max);
    let mut out = format!("P2\n{} {}\n255\n", img.width, img.height);
    for row in 0..img.height {
        let line: Vec<String> = (0..img.width)
            .map(|col| {
                let v = img.get(col, row);
                let level = if max > 0.0 { (v.max(0.0) / max * 255.0).round() } else { 0.0 };
                format!("{}", level as u32)
            })
            .collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

pub fn write_pgm(path: &Path, img: &Image) -> Result<()> {
    write_atomic(path, encode_pgm(img).as_bytes())
}
