use crate::error::{Error, Result};
use crate::raster::Image;
use crate::tensor::{Real, Tensor};

/// Non-overlapping square patch tiling of a square image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    /// Patches per side.
    pub grid: usize,
    pub embed_dim: usize,
}

impl PatchGrid {
    pub fn new(image_size: usize, patch_size: usize, channels: usize, embed_dim: usize) -> Result<Self> {
        if patch_size == 0 || image_size == 0 || !image_size.is_multiple_of(patch_size) {
            return Err(Error::Config(format!(
                "image size {image_size} is not divisible by patch size {patch_size}"
            )));
        }
        if channels == 0 || embed_dim == 0 {
            return Err(Error::Config("channels and embed_dim must be positive".into()));
        }
        Ok(PatchGrid {
            image_size,
            patch_size,
            channels,
            grid: image_size / patch_size,
            embed_dim,
        })
    }

    pub fn num_patches(&self) -> usize {
        self.grid * self.grid
    }

    /// Flattened length of one patch.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// Grid (row, col) of patch `i`.
    pub fn position(&self, i: usize) -> (usize, usize) {
        (i / self.grid, i % self.grid)
    }

    /// Patch index that contains pixel `(y, x)`.
    pub fn patch_of_pixel(&self, y: usize, x: usize) -> usize {
        (y / self.patch_size) * self.grid + x / self.patch_size
    }

    pub fn check_image(&self, image: &Image) -> Result<()> {
        if image.height() != self.image_size || image.width() != self.image_size || image.channels() != self.channels {
            return Err(Error::Config(format!(
                "image is {}x{}x{}, backbone expects {}x{}x{}",
                image.height(),
                image.width(),
                image.channels(),
                self.image_size,
                self.image_size,
                self.channels
            )));
        }
        Ok(())
    }

    /// Stacks the flattened patches of every image: `[B·P × p·p·C]`.
    ///
    /// Patches are ordered row-major over the grid; inside a patch, pixels
    /// are row-major with interleaved channels.
    pub fn extract<T: Real>(&self, images: &[&Image]) -> Result<Tensor<T>> {
        if images.is_empty() {
            return Err(Error::Data("no images to embed".into()));
        }
        let p = self.patch_size;
        let mut data = Vec::with_capacity(images.len() * self.num_patches() * self.patch_dim());
        for image in images {
            self.check_image(image)?;
            for gy in 0..self.grid {
                for gx in 0..self.grid {
                    for dy in 0..p {
                        let y = gy * p + dy;
                        let start = image.index(y, gx * p, 0);
                        let row = &image.data()[start..start + p * self.channels];
                        data.extend(row.iter().map(|&v| T::lit(v as f64)));
                    }
                }
            }
        }
        Ok(Tensor::new(
            vec![images.len() * self.num_patches(), self.patch_dim()],
            data,
        )?)
    }
}
