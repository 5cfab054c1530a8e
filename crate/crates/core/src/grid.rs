//! Square token/pixel grids with channels innermost.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub resolution: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn zeros(resolution: usize, channels: usize) -> Self {
        Grid {
            resolution,
            channels,
            data: vec![0.0; resolution * resolution * channels],
        }
    }

    pub fn from_data(resolution: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != resolution * resolution * channels {
            return Err(Error::domain(format!(
                "grid {resolution}x{resolution}x{channels} needs {} values, got {}",
                resolution * resolution * channels,
                data.len()
            )));
        }
        Ok(Grid {
            resolution,
            channels,
            data,
        })
    }

    pub fn tokens(&self) -> usize {
        self.resolution * self.resolution
    }

    pub fn token(&self, k: usize) -> &[f64] {
        &self.data[k * self.channels..(k + 1) * self.channels]
    }

    pub fn at(&self, i: usize, j: usize) -> &[f64] {
        self.token(j * self.resolution + i)
    }

    pub fn same_shape(&self, other: &Grid) -> bool {
        self.resolution == other.resolution && self.channels == other.channels
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Bilinear lookup at continuous coordinates in `[0, resolution)` where
    /// cell `(i, j)` is centred at `(i + 0.5, j + 0.5)`; edges clamp.
    pub fn bilinear(&self, u: f64, v: f64, out: &mut [f64]) {
        let r = self.resolution as f64;
        let x = (u - 0.5).clamp(0.0, r - 1.0);
        let y = (v - 0.5).clamp(0.0, r - 1.0);
        let i0 = x.floor() as usize;
        let j0 = y.floor() as usize;
        let i1 = (i0 + 1).min(self.resolution - 1);
        let j1 = (j0 + 1).min(self.resolution - 1);
        let fx = x - i0 as f64;
        let fy = y - j0 as f64;
        for c in 0..self.channels {
            let a = self.at(i0, j0)[c] * (1.0 - fx) + self.at(i1, j0)[c] * fx;
            let b = self.at(i0, j1)[c] * (1.0 - fx) + self.at(i1, j1)[c] * fx;
            out[c] = a * (1.0 - fy) + b * fy;
        }
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample(&self, resolution: usize) -> Grid {
        let f = resolution / self.resolution;
        assert_eq!(f * self.resolution, resolution, "upsample factor must be integral");
        let c = self.channels;
        let mut data = Vec::with_capacity(resolution * resolution * c);
        for j in 0..resolution {
            for i in 0..resolution {
                data.extend_from_slice(self.at(i / f, j / f));
            }
        }
        Grid {
            resolution,
            channels: c,
            data,
        }
    }

    /// Average pooling by an integer factor; the adjoint of [`Grid::upsample`]
    /// up to a factor of `f²`.
    pub fn pool(&self, resolution: usize) -> Grid {
        let f = self.resolution / resolution;
        assert_eq!(f * resolution, self.resolution, "pool factor must be integral");
        let c = self.channels;
        let mut out = Grid::zeros(resolution, c);
        let scale = 1.0 / (f * f) as f64;
        for j in 0..self.resolution {
            for i in 0..self.resolution {
                let dst = ((j / f) * resolution + i / f) * c;
                for (o, v) in out.data[dst..dst + c].iter_mut().zip(self.at(i, j)) {
                    *o += v * scale;
                }
            }
        }
        out
    }
}
