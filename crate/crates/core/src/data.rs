//! Image data sources: a procedural shapes dataset, an 8-bit PPM (P6)
//! directory loader, and a packed little-endian binary format.
//!
//! Every source yields images as an `[n, 3, h, w]` tensor with values in
//! `[0, 1]`, plus one label per image.

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Result, SnapError};
use crate::tensor::Tensor;

/// Images `[n, 3, h, w]` in `[0, 1]` with one class label per image.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImages {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledImages {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The images of samples `[start, start+count)` as one tensor.
    pub fn image_slice(&self, start: usize, count: usize) -> Result<Tensor> {
        let s = self.images.shape();
        if start + count > s[0] {
            return Err(SnapError::Data(format!(
                "slice {start}..{} out of range for {} samples",
                start + count,
                s[0]
            )));
        }
        let per = s[1] * s[2] * s[3];
        let data = self.images.data()[start * per..(start + count) * per].to_vec();
        Ok(Tensor::from_vec(&[count, s[1], s[2], s[3]], data))
    }
}

/// Number of shape classes produced by [`synth_shapes`].
pub const N_SHAPE_CLASSES: usize = 8;

/// Procedurally rendered colored shapes, assigned to classes round-robin so
/// the class histogram is uniform to within one sample. Class is the shape
/// type: filled/outlined rectangle, filled/outlined ellipse, horizontal /
/// vertical / diagonal stripes, checkerboard. Colors and geometry are random
/// per sample; foreground is bright and background dark so geometry, not
/// palette, carries the class. Fully determined by `seed`.
pub fn synth_shapes(n_samples: usize, image_size: usize, seed: u64) -> LabeledImages {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let (h, w) = (image_size, image_size);
    let mut data = Vec::with_capacity(n_samples * 3 * h * w);
    let mut labels = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let class = i % N_SHAPE_CLASSES;
        labels.push(class);
        let fg: [f64; 3] = [rng.gen_range(0.6..1.0), rng.gen_range(0.6..1.0), rng.gen_range(0.6..1.0)];
        let bg: [f64; 3] = [rng.gen_range(0.0..0.4), rng.gen_range(0.0..0.4), rng.gen_range(0.0..0.4)];
        // Geometry in unit coordinates so any resolution renders the same scene.
        let cx = rng.gen_range(0.35..0.65);
        let cy = rng.gen_range(0.35..0.65);
        let rx = rng.gen_range(0.18..0.38);
        let ry = rng.gen_range(0.18..0.38);
        let period = rng.gen_range(0.15..0.3);
        let phase = rng.gen_range(0.0..1.0);
        let border = rng.gen_range(0.05..0.12);
        let mut mask = vec![false; h * w];
        for py in 0..h {
            for px in 0..w {
                let x = (px as f64 + 0.5) / w as f64;
                let y = (py as f64 + 0.5) / h as f64;
                let inside = match class {
                    0 => (x - cx).abs() <= rx && (y - cy).abs() <= ry,
                    1 => {
                        let dx = (x - cx).abs();
                        let dy = (y - cy).abs();
                        dx <= rx && dy <= ry && (rx - dx <= border || ry - dy <= border)
                    }
                    2 => {
                        let q = ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2);
                        q <= 1.0
                    }
                    3 => {
                        let q = ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2);
                        (0.45..=1.0).contains(&q)
                    }
                    4 => ((y / period + phase).floor() as i64).rem_euclid(2) == 0,
                    5 => ((x / period + phase).floor() as i64).rem_euclid(2) == 0,
                    6 => (((x + y) / period + phase).floor() as i64).rem_euclid(2) == 0,
                    _ => {
                        let ix = (x / period + phase).floor() as i64;
                        let iy = (y / period + phase).floor() as i64;
                        (ix + iy).rem_euclid(2) == 0
                    }
                };
                mask[py * w + px] = inside;
            }
        }
        for ch in 0..3 {
            for &inside in &mask {
                let base = if inside { fg[ch] } else { bg[ch] };
                let noisy = base + rng.gen_range(-0.02..0.02);
                data.push(noisy.clamp(0.0, 1.0));
            }
        }
    }
    LabeledImages { images: Tensor::from_vec(&[n_samples, 3, h, w], data), labels }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write one image (`[3, h, w]` in `[0, 1]`) as binary 8-bit PPM (P6).
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(SnapError::shape("write_ppm", "expected one [3, h, w] image"));
    }
    let (h, w) = (s[1], s[2]);
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    for p in 0..plane {
        for ch in 0..3 {
            bytes.push(quantize(image.data()[ch * plane + p]));
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Read a binary 8-bit PPM (P6) file into a `[3, h, w]` tensor in `[0, 1]`.
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0;
    let mut token = |bytes: &[u8]| -> Result<String> {
        // Skip whitespace and '#' comment lines between header fields.
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(SnapError::Format("truncated PPM header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token(&bytes)? != "P6" {
        return Err(SnapError::Format("not a binary PPM (P6) file".into()));
    }
    let w: usize = token(&bytes)?.parse().map_err(|_| SnapError::Format("bad PPM width".into()))?;
    let h: usize = token(&bytes)?.parse().map_err(|_| SnapError::Format("bad PPM height".into()))?;
    let maxval: usize =
        token(&bytes)?.parse().map_err(|_| SnapError::Format("bad PPM maxval".into()))?;
    if maxval != 255 {
        return Err(SnapError::Format(format!("unsupported PPM maxval {maxval}, want 255")));
    }
    pos += 1; // single whitespace byte after maxval
    let need = 3 * w * h;
    if bytes.len() < pos + need {
        return Err(SnapError::Format("PPM pixel data truncated".into()));
    }
    let plane = h * w;
    let mut data = vec![0.0; 3 * plane];
    for p in 0..plane {
        for ch in 0..3 {
            data[ch * plane + p] = bytes[pos + 3 * p + ch] as f64 / 255.0;
        }
    }
    Ok(Tensor::from_vec(&[3, h, w], data))
}

/// Load every `.ppm` under `dir`. Subdirectories are classes in sorted-name
/// order; `.ppm` files directly in `dir` get label 0. All images must match
/// `image_size` — no resampling is performed.
pub fn load_image_dir(dir: &Path, image_size: usize) -> Result<LabeledImages> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<std::io::Result<Vec<_>>>()?;
    entries.sort_by_key(|e| e.file_name());
    let mut sources: Vec<(usize, std::path::PathBuf)> = Vec::new();
    let mut next_class = 0;
    for entry in &entries {
        let path = entry.path();
        if path.is_dir() {
            let mut files: Vec<_> = fs::read_dir(&path)?.collect::<std::io::Result<Vec<_>>>()?;
            files.sort_by_key(|e| e.file_name());
            for f in files {
                let p = f.path();
                if p.extension().is_some_and(|e| e == "ppm") {
                    sources.push((next_class, p));
                }
            }
            next_class += 1;
        } else if path.extension().is_some_and(|e| e == "ppm") {
            sources.push((0, path));
        }
    }
    if sources.is_empty() {
        return Err(SnapError::Data(format!("no .ppm files under {}", dir.display())));
    }
    let mut data = Vec::with_capacity(sources.len() * 3 * image_size * image_size);
    let mut labels = Vec::with_capacity(sources.len());
    for (label, path) in &sources {
        let img = read_ppm(path)?;
        if img.shape() != [3, image_size, image_size] {
            return Err(SnapError::Data(format!(
                "{} is {}x{}, expected {image_size}x{image_size}",
                path.display(),
                img.shape()[2],
                img.shape()[1]
            )));
        }
        data.extend_from_slice(img.data());
        labels.push(*label);
    }
    let n = labels.len();
    Ok(LabeledImages {
        images: Tensor::from_vec(&[n, 3, image_size, image_size], data),
        labels,
    })
}

const PACK_MAGIC: &[u8; 9] = b"SNAPDATA1";

/// Write a dataset as one little-endian binary file:
/// magic, n/h/w as u64, labels as u64, pixels as f64.
pub fn write_packed(path: &Path, data: &LabeledImages) -> Result<()> {
    let s = data.images.shape();
    if s.len() != 4 || s[1] != 3 || s[0] != data.labels.len() {
        return Err(SnapError::shape("write_packed", "expected [n, 3, h, w] images with n labels"));
    }
    let mut bytes = Vec::with_capacity(32 + data.images.len() * 8);
    bytes.extend_from_slice(PACK_MAGIC);
    for dim in [s[0], s[2], s[3]] {
        bytes.extend_from_slice(&(dim as u64).to_le_bytes());
    }
    for &l in &data.labels {
        bytes.extend_from_slice(&(l as u64).to_le_bytes());
    }
    for &v in data.images.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Read a dataset written by [`write_packed`].
pub fn read_packed(path: &Path) -> Result<LabeledImages> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 9 + 24 || &bytes[..9] != PACK_MAGIC {
        return Err(SnapError::Format("not a packed dataset file".into()));
    }
    let mut pos = 9;
    let mut read_u64 = |bytes: &[u8]| -> Result<u64> {
        let end = pos + 8;
        if end > bytes.len() {
            return Err(SnapError::Format("packed dataset truncated".into()));
        }
        let v = u64::from_le_bytes(bytes[pos..end].try_into().unwrap());
        pos = end;
        Ok(v)
    };
    let n = read_u64(&bytes)? as usize;
    let h = read_u64(&bytes)? as usize;
    let w = read_u64(&bytes)? as usize;
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        labels.push(read_u64(&bytes)? as usize);
    }
    let len = n * 3 * h * w;
    if bytes.len() != pos + len * 8 {
        return Err(SnapError::Format("packed dataset has wrong pixel count".into()));
    }
    let mut data = Vec::with_capacity(len);
    for i in 0..len {
        let start = pos + i * 8;
        data.push(f64::from_le_bytes(bytes[start..start + 8].try_into().unwrap()));
    }
    Ok(LabeledImages { images: Tensor::from_vec(&[n, 3, h, w], data), labels })
}
