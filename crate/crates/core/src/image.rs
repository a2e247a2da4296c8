use ndarray::{Array2, Array3};

use crate::error::{KarlError, Result};

/// An `H × W × C` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub id: String,
    pub pixels: Array3<f64>,
}

impl Image {
    /// Validates the `[0, 1]` range.
    pub fn new(id: impl Into<String>, pixels: Array3<f64>) -> Result<Self> {
        let id = id.into();
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(KarlError::Input(format!(
                "image {id}: pixel value {bad} outside [0, 1]"
            )));
        }
        Ok(Self { id, pixels })
    }

    pub fn filled(id: impl Into<String>, height: usize, width: usize, channels: usize, v: f64) -> Self {
        Self {
            id: id.into(),
            pixels: Array3::from_elem((height, width, channels), v.clamp(0.0, 1.0)),
        }
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn channels(&self) -> usize {
        self.pixels.dim().2
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.pixels.dim()
    }

    /// Rows are non-overlapping `patch × patch` tiles in raster order; each
    /// row holds the tile's pixels as `(dy, dx, c)`.
    pub fn patchify(&self, patch: usize) -> Result<Array2<f64>> {
        let (h, w, c) = self.shape();
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(KarlError::Config(format!(
                "image {}x{} is not divisible by patch size {patch}",
                h, w
            )));
        }
        let (gh, gw) = (h / patch, w / patch);
        let dim = patch * patch * c;
        let mut out = Array2::zeros((gh * gw, dim));
        for gy in 0..gh {
            for gx in 0..gw {
                let row = gy * gw + gx;
                let mut k = 0;
                for dy in 0..patch {
                    for dx in 0..patch {
                        for ch in 0..c {
                            out[[row, k]] = self.pixels[[gy * patch + dy, gx * patch + dx, ch]];
                            k += 1;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Inverse of [`Image::patchify`]. Values are clamped to `[0, 1]`.
    pub fn unpatchify(
        id: impl Into<String>,
        patches: &Array2<f64>,
        shape: (usize, usize, usize),
        patch: usize,
    ) -> Result<Self> {
        let (h, w, c) = shape;
        let (gh, gw) = (h / patch, w / patch);
        if patches.dim() != (gh * gw, patch * patch * c) {
            return Err(KarlError::Input(format!(
                "patch matrix {:?} does not fit a {h}x{w}x{c} image at patch {patch}",
                patches.dim()
            )));
        }
        let mut pixels = Array3::zeros(shape);
        for gy in 0..gh {
            for gx in 0..gw {
                let row = gy * gw + gx;
                let mut k = 0;
                for dy in 0..patch {
                    for dx in 0..patch {
                        for ch in 0..c {
                            pixels[[gy * patch + dy, gx * patch + dx, ch]] = patches[[row, k]].clamp(0.0, 1.0);
                            k += 1;
                        }
                    }
                }
            }
        }
        Ok(Self { id: id.into(), pixels })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patchify_roundtrip() {
        let pixels = Array3::from_shape_fn((8, 12, 3), |(y, x, c)| ((y * 31 + x * 7 + c) % 17) as f64 / 16.0);
        let img = Image::new("a", pixels).unwrap();
        let p = img.patchify(4).unwrap();
        assert_eq!(p.dim(), (6, 48));
        let back = Image::unpatchify("a", &p, img.shape(), 4).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn rejects_indivisible_shape() {
        let img = Image::filled("a", 10, 8, 1, 0.5);
        assert!(matches!(img.patchify(4), Err(KarlError::Config(_))));
    }

    #[test]
    fn rejects_out_of_range_pixels() {
        assert!(Image::new("a", Array3::from_elem((2, 2, 1), 1.5)).is_err());
    }
}
