use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A batch of `C x H x W` images, row-major `[batch, channel, row, col]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(batch: usize, channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != batch * channels * height * width {
            return Err(Error::shape(
                "image",
                &[batch, channels, height, width],
                &[data.len()],
            ));
        }
        Ok(ImageTensor {
            batch,
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        ImageTensor {
            batch,
            channels,
            height,
            width,
            data: vec![0.0; batch * channels * height * width],
        }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Values per image (`C·H·W`).
    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn image_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.image_len();
        &mut self.data[i * n..(i + 1) * n]
    }

    /// Copies the images at `indices` into a new batch.
    pub fn select(&self, indices: &[usize]) -> ImageTensor {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        ImageTensor {
            batch: indices.len(),
            data,
            ..*self
        }
    }

    /// Stacks batches with identical image geometry.
    pub fn concat(parts: &[&ImageTensor]) -> Result<ImageTensor> {
        let first = parts.first().ok_or_else(|| Error::Parameter {
            name: "parts",
            detail: "nothing to concatenate".into(),
        })?;
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.data.len()).sum());
        for p in parts {
            if (p.channels, p.height, p.width) != (first.channels, first.height, first.width) {
                return Err(Error::shape(
                    "concat",
                    &[first.channels, first.height, first.width],
                    &[p.channels, p.height, p.width],
                ));
            }
            data.extend_from_slice(&p.data);
        }
        Ok(ImageTensor {
            batch: parts.iter().map(|p| p.batch).sum(),
            data,
            ..**first
        })
    }

    /// Flattens to a `[batch, C·H·W]` tensor.
    pub fn to_matrix(&self) -> Tensor {
        Tensor::new(vec![self.batch, self.image_len()], self.data.clone())
            .expect("consistent image geometry")
    }
}
