//! Artifact persistence helpers: content hashing, lossless pixel I/O, and
//! the 16-bit quantization grid that persisted pixel tensors live on.
//!
//! Pixel tensors that leave the process (trigger patterns, poisoned samples)
//! are snapped to the k/65535 grid first, so a save→load round trip through
//! 16-bit PNG reproduces the in-memory values bit for bit.

use std::path::Path;

use ndarray::Array3;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const Q: f64 = 65535.0;

/// Snap every value to the nearest point of the 16-bit grid k/65535.
pub fn quantize16(pixels: &Array3<f64>) -> Array3<f64> {
    pixels.mapv(|v| (v.clamp(0.0, 1.0) * Q).round() / Q)
}

/// True if every value already lies exactly on the 16-bit grid.
pub fn is_quantized16(pixels: &Array3<f64>) -> bool {
    pixels.iter().all(|&v| (v * Q).round() / Q == v)
}

/// Write a (c,h,w) tensor in [0,1] as 16-bit grayscale or RGB PNG.
pub fn save_pixels_png(pixels: &Array3<f64>, path: &Path) -> Result<()> {
    let (c, h, w) = (pixels.shape()[0], pixels.shape()[1], pixels.shape()[2]);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let to_u16 = |v: f64| -> u16 { (v.clamp(0.0, 1.0) * Q).round() as u16 };
    match c {
        1 => {
            let mut img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(w as u32, h as u32);
            for (x, y, p) in img.enumerate_pixels_mut() {
                *p = image::Luma([to_u16(pixels[[0, y as usize, x as usize]])]);
            }
            img.save(path)?;
        }
        3 => {
            let mut img = image::ImageBuffer::<image::Rgb<u16>, Vec<u16>>::new(w as u32, h as u32);
            for (x, y, p) in img.enumerate_pixels_mut() {
                *p = image::Rgb([
                    to_u16(pixels[[0, y as usize, x as usize]]),
                    to_u16(pixels[[1, y as usize, x as usize]]),
                    to_u16(pixels[[2, y as usize, x as usize]]),
                ]);
            }
            img.save(path)?;
        }
        _ => {
            return Err(Error::Input(format!(
                "cannot encode {c}-channel tensor as PNG (1 or 3 channels supported)"
            )))
        }
    }
    Ok(())
}

/// Load a PNG written by [`save_pixels_png`] back into a (c,h,w) tensor on
/// the 16-bit grid.
pub fn load_pixels_png(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::MissingArtifact(format!("{}: {e}", path.display())))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        image::DynamicImage::ImageLuma16(buf) => {
            let mut out = Array3::<f64>::zeros((1, h, w));
            for (x, y, p) in buf.enumerate_pixels() {
                out[[0, y as usize, x as usize]] = p.0[0] as f64 / Q;
            }
            Ok(out)
        }
        image::DynamicImage::ImageRgb16(buf) => {
            let mut out = Array3::<f64>::zeros((3, h, w));
            for (x, y, p) in buf.enumerate_pixels() {
                for c in 0..3 {
                    out[[c, y as usize, x as usize]] = p.0[c] as f64 / Q;
                }
            }
            Ok(out)
        }
        // 8-bit inputs (external datasets) are accepted and mapped onto the
        // same grid: k/255 = 257k/65535 exactly.
        image::DynamicImage::ImageLuma8(buf) => {
            let mut out = Array3::<f64>::zeros((1, h, w));
            for (x, y, p) in buf.enumerate_pixels() {
                out[[0, y as usize, x as usize]] = (p.0[0] as u16 * 257) as f64 / Q;
            }
            Ok(out)
        }
        image::DynamicImage::ImageRgb8(buf) => {
            let mut out = Array3::<f64>::zeros((3, h, w));
            for (x, y, p) in buf.enumerate_pixels() {
                for c in 0..3 {
                    out[[c, y as usize, x as usize]] = (p.0[c] as u16 * 257) as f64 / Q;
                }
            }
            Ok(out)
        }
        other => {
            let rgb = other.into_rgb16();
            let mut out = Array3::<f64>::zeros((3, h, w));
            for (x, y, p) in rgb.enumerate_pixels() {
                for c in 0..3 {
                    out[[c, y as usize, x as usize]] = p.0[c] as f64 / Q;
                }
            }
            Ok(out)
        }
    }
}

/// Hex-encoded SHA-256 of a byte slice.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut s = String::with_capacity(64);
    for b in digest {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Hex-encoded SHA-256 of a file's contents.
pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::MissingArtifact(format!("{}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

/// Verify that a file hashes to `expected`.
pub fn verify_file_hash(path: &Path, expected: &str) -> Result<()> {
    let got = sha256_file(path)?;
    if got != expected {
        return Err(Error::Integrity(format!(
            "{} hash {got} does not match recorded {expected}",
            path.display()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quantize_is_idempotent_and_close() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let px = Array3::from_shape_fn((3, 5, 5), |_| rng.gen_range(0.0..1.0));
        let q = quantize16(&px);
        assert!(is_quantized16(&q));
        assert_eq!(q, quantize16(&q));
        for (a, b) in px.iter().zip(q.iter()) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-12);
        }
    }

    #[test]
    fn png_roundtrip_is_bit_exact_for_quantized() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let px = quantize16(&Array3::from_shape_fn((3, 7, 4), |_| rng.gen_range(0.0..1.0)));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        save_pixels_png(&px, &path).unwrap();
        let back = load_pixels_png(&path).unwrap();
        assert_eq!(px, back);
    }

    #[test]
    fn grayscale_roundtrip() {
        let px = quantize16(&Array3::from_shape_fn((1, 3, 3), |(_, i, j)| {
            (i * 3 + j) as f64 / 10.0
        }));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.png");
        save_pixels_png(&px, &path).unwrap();
        assert_eq!(load_pixels_png(&path).unwrap(), px);
    }

    #[test]
    fn png_encoding_is_deterministic() {
        let px = quantize16(&Array3::from_elem((3, 4, 4), 0.25));
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.png"), dir.path().join("b.png"));
        save_pixels_png(&px, &p1).unwrap();
        save_pixels_png(&px, &p2).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
