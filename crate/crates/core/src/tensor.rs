//! Binary spike tensors shaped `(T, C, H, W)`.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpikeTensor {
    shape: [usize; 4],
    data: Vec<u8>,
}

impl SpikeTensor {
    pub fn zeros(t: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        if t == 0 || c == 0 {
            return Err(Error::validation("spike tensor needs T >= 1 and C >= 1"));
        }
        Ok(Self {
            shape: [t, c, h, w],
            data: vec![0; t * c * h * w],
        })
    }

    /// Builds a tensor from raw values, rejecting anything outside {0, 1}.
    pub fn from_vec(shape: [usize; 4], data: Vec<u8>) -> Result<Self> {
        let [t, c, h, w] = shape;
        if t == 0 || c == 0 {
            return Err(Error::validation("spike tensor needs T >= 1 and C >= 1"));
        }
        if data.len() != t * c * h * w {
            return Err(Error::validation(format!(
                "spike tensor data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        if let Some(i) = data.iter().position(|&v| v > 1) {
            return Err(Error::validation(format!(
                "spike tensor value {} at flat index {i} is not binary",
                data[i]
            )));
        }
        Ok(Self { shape, data })
    }

    /// Thresholds real activations at `>= 0.5`.
    pub fn from_f64(shape: [usize; 4], values: &[f64]) -> Result<Self> {
        Self::from_vec(shape, values.iter().map(|&v| u8::from(v >= 0.5)).collect())
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn timesteps(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    #[inline]
    fn offset(&self, t: usize, c: usize, y: usize, x: usize) -> usize {
        let [_, cs, hs, ws] = self.shape;
        ((t * cs + c) * hs + y) * ws + x
    }

    pub fn get(&self, t: usize, c: usize, y: usize, x: usize) -> u8 {
        self.data[self.offset(t, c, y, x)]
    }

    pub fn set(&mut self, t: usize, c: usize, y: usize, x: usize, spike: bool) {
        let i = self.offset(t, c, y, x);
        self.data[i] = u8::from(spike);
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.data
    }

    /// One timestep as a flat `(C, H, W)` slice.
    pub fn frame(&self, t: usize) -> &[u8] {
        let n = self.shape[1] * self.shape[2] * self.shape[3];
        &self.data[t * n..(t + 1) * n]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }
}
