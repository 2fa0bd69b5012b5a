//! Discriminating-map visualization: renders the input spectrogram plus the
//! discriminator's fine and coarse output maps as binary PGM images.
//!
//! Map values are rescaled so 0 maps to pixel 0 and 1 to pixel 255 (clamped
//! outside [0,1]); the coarse map is nearest-neighbor up-sampled by the
//! encoder's reduction factor so its blocky granularity stays visible next
//! to the fine map. Images are laid out with time on the horizontal axis and
//! frequency bins top-down.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::discriminator::REDUCTION;
use crate::error::{Error, Result};
use crate::spectrogram::Spectrogram;
use crate::tensor::Tensor;

/// 8-bit grayscale image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        write!(f, "P5\n{} {}\n255\n", self.width, self.height)?;
        f.write_all(&self.pixels)?;
        Ok(())
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let header_err = || Error::Checkpoint(format!("{}: not a P5 PGM", path.display()));
        let mut fields = Vec::new();
        let mut pos = 0usize;
        // header: magic, width, height, maxval as whitespace-separated tokens
        while fields.len() < 4 && pos < bytes.len() {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| header_err())?);
        }
        if fields.len() != 4 || fields[0] != "P5" || fields[3] != "255" {
            return Err(header_err());
        }
        let width: usize = fields[1].parse().map_err(|_| header_err())?;
        let height: usize = fields[2].parse().map_err(|_| header_err())?;
        pos += 1; // single whitespace after maxval
        let pixels = bytes[pos..].to_vec();
        if pixels.len() != width * height {
            return Err(Error::Checkpoint(format!(
                "{}: payload is {} bytes, expected {}",
                path.display(),
                pixels.len(),
                width * height
            )));
        }
        Ok(GrayImage {
            width,
            height,
            pixels,
        })
    }

    pub fn mean_pixel(&self) -> f64 {
        self.pixels.iter().map(|&p| p as f64).sum::<f64>() / self.pixels.len() as f64
    }
}

fn unit_to_pixel(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Renders a (1, T, N) map with the fixed [0,1] -> [0,255] contract.
pub fn render_map(map: &Tensor) -> Result<GrayImage> {
    let shape = map.shape();
    if shape.len() != 3 || shape[0] != 1 {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            expected: 1,
            actual: shape.first().copied().unwrap_or(0),
        });
    }
    let (t, n) = (shape[1], shape[2]);
    let mut pixels = vec![0u8; t * n];
    for bin in 0..n {
        for frame in 0..t {
            pixels[bin * t + frame] = unit_to_pixel(map.data()[frame * n + bin]);
        }
    }
    Ok(GrayImage {
        width: t,
        height: n,
        pixels,
    })
}

/// 1-D time map (1, T) rendered as a single-row image.
pub fn render_map_1d(map: &Tensor) -> Result<GrayImage> {
    let shape = map.shape();
    if shape.len() != 2 || shape[0] != 1 {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            expected: 1,
            actual: shape.first().copied().unwrap_or(0),
        });
    }
    let pixels = map.data().iter().map(|&v| unit_to_pixel(v)).collect();
    Ok(GrayImage {
        width: shape[1],
        height: 1,
        pixels,
    })
}

/// Input spectrogram rendered with its own min/max range.
pub fn render_spectrogram(s: &Spectrogram) -> GrayImage {
    let data = s.tensor().data();
    let lo = data.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (t, n) = (s.frames(), s.bins());
    let mut pixels = vec![0u8; t * n];
    for bin in 0..n {
        for frame in 0..t {
            let v = (s.at(frame, bin) - lo) / span;
            pixels[bin * t + frame] = (v * 255.0).round() as u8;
        }
    }
    GrayImage {
        width: t,
        height: n,
        pixels,
    }
}

/// Nearest-neighbor up-sampling of a coarse map by the reduction factor,
/// cropped to (t, n).
pub fn upsample_coarse(coarse: &Tensor, t: usize, n: usize) -> Result<Tensor> {
    let shape = coarse.shape();
    match shape.len() {
        3 => {
            let (tc, nc) = (shape[1], shape[2]);
            let mut out = vec![0.0; t * n];
            for frame in 0..t {
                for bin in 0..n {
                    let src_t = (frame / REDUCTION).min(tc - 1);
                    let src_n = (bin / REDUCTION).min(nc - 1);
                    out[frame * n + bin] = coarse.data()[src_t * nc + src_n];
                }
            }
            Tensor::new(vec![1, t, n], out)
        }
        2 => {
            let tc = shape[1];
            let mut out = vec![0.0; t];
            for (frame, slot) in out.iter_mut().enumerate() {
                *slot = coarse.data()[(frame / REDUCTION).min(tc - 1)];
            }
            Tensor::new(vec![1, t], out)
        }
        _ => Err(Error::InvalidShape {
            shape: shape.to_vec(),
            expected: 1,
            actual: 0,
        }),
    }
}

/// Output files written by the heatmap command.
#[derive(Debug)]
pub struct HeatmapFiles {
    pub input: PathBuf,
    pub fine: Option<PathBuf>,
    pub coarse: PathBuf,
}

/// Renders the three images for one sample and a discriminator's outputs.
pub fn write_heatmaps(
    prefix: &Path,
    sample: &Spectrogram,
    coarse: &Tensor,
    fine: Option<&Tensor>,
) -> Result<HeatmapFiles> {
    if let Some(dir) = prefix.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let stem = prefix.to_string_lossy();
    let input_path = PathBuf::from(format!("{stem}_input.pgm"));
    render_spectrogram(sample).write_pgm(&input_path)?;

    let (t, n) = (sample.frames(), sample.bins());
    let coarse_up = upsample_coarse(coarse, t, n)?;
    let coarse_path = PathBuf::from(format!("{stem}_coarse.pgm"));
    if coarse_up.shape().len() == 3 {
        render_map(&coarse_up)?.write_pgm(&coarse_path)?;
    } else {
        render_map_1d(&coarse_up)?.write_pgm(&coarse_path)?;
    }

    let fine_path = match fine {
        Some(f) => {
            let path = PathBuf::from(format!("{stem}_fine.pgm"));
            if f.shape().len() == 3 {
                render_map(f)?.write_pgm(&path)?;
            } else {
                render_map_1d(f)?.write_pgm(&path)?;
            }
            Some(path)
        }
        None => None,
    };
    Ok(HeatmapFiles {
        input: input_path,
        fine: fine_path,
        coarse: coarse_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_one_map_renders_white() {
        let m = Tensor::full(vec![1, 4, 3], 1.0);
        let img = render_map(&m).unwrap();
        assert!(img.pixels.iter().all(|&p| p == 255));
        let m = Tensor::full(vec![1, 4, 3], 2.5); // clamped
        assert!(render_map(&m).unwrap().pixels.iter().all(|&p| p == 255));
        let m = Tensor::full(vec![1, 4, 3], -1.0);
        assert!(render_map(&m).unwrap().pixels.iter().all(|&p| p == 0));
    }

    #[test]
    fn upsampled_coarse_matches_input_dims_and_blocks() {
        let coarse = Tensor::new(vec![1, 2, 1], vec![0.0, 1.0]).unwrap();
        let up = upsample_coarse(&coarse, 13, 6).unwrap();
        assert_eq!(up.shape(), &[1, 13, 6]);
        // first 8 frames come from block 0, the rest from block 1
        assert_eq!(up.data()[0], 0.0);
        assert_eq!(up.data()[7 * 6], 0.0);
        assert_eq!(up.data()[8 * 6], 1.0);
        assert_eq!(up.data()[12 * 6 + 5], 1.0);
    }

    #[test]
    fn pgm_round_trip() {
        let dir = std::env::temp_dir().join(format!("specgan-pgm-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let img = GrayImage {
            width: 3,
            height: 2,
            pixels: vec![0, 128, 255, 7, 77, 177],
        };
        let path = dir.join("t.pgm");
        img.write_pgm(&path).unwrap();
        let back = GrayImage::read_pgm(&path).unwrap();
        assert_eq!(img, back);
        std::fs::remove_dir_all(&dir).ok();
    }
}
