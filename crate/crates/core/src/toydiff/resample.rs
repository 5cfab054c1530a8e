//! Linear resampling between square grids, with its adjoint.
//!
//! Upsampling is bilinear with half-pixel centres and clamped edges;
//! downsampling is box averaging by an integer factor.

use ndarray::Array2;

#[derive(Debug, Clone, PartialEq)]
pub struct Resampler {
    pub from: usize,
    pub to: usize,
    /// For each output pixel, its (input pixel, weight) taps.
    taps: Vec<Vec<(usize, f64)>>,
}

fn bilinear_taps(from: usize, to: usize) -> Vec<Vec<(usize, f64)>> {
    // 1-D taps along one axis
    let axis: Vec<[(usize, f64); 2]> = (0..to)
        .map(|o| {
            let x = ((o as f64 + 0.5) * from as f64 / to as f64 - 0.5).clamp(0.0, (from - 1) as f64);
            let i0 = x.floor() as usize;
            let i1 = (i0 + 1).min(from - 1);
            let f = x - i0 as f64;
            [(i0, 1.0 - f), (i1, f)]
        })
        .collect();
    let mut taps = Vec::with_capacity(to * to);
    for j in 0..to {
        for i in 0..to {
            let mut t = Vec::with_capacity(4);
            for (jy, wy) in axis[j] {
                for (ix, wx) in axis[i] {
                    let w = wx * wy;
                    if w != 0.0 {
                        t.push((jy * from + ix, w));
                    }
                }
            }
            taps.push(t);
        }
    }
    taps
}

fn box_taps(from: usize, to: usize) -> Vec<Vec<(usize, f64)>> {
    let f = from / to;
    let w = 1.0 / (f * f) as f64;
    let mut taps = Vec::with_capacity(to * to);
    for j in 0..to {
        for i in 0..to {
            let mut t = Vec::with_capacity(f * f);
            for dj in 0..f {
                for di in 0..f {
                    t.push(((j * f + dj) * from + i * f + di, w));
                }
            }
            taps.push(t);
        }
    }
    taps
}

impl Resampler {
    /// Panics unless one resolution divides the other.
    pub fn new(from: usize, to: usize) -> Self {
        let taps = if from == to {
            (0..to * to).map(|k| vec![(k, 1.0)]).collect()
        } else if to > from {
            assert_eq!(to % from, 0, "upsampling {from}->{to} must be integral");
            bilinear_taps(from, to)
        } else {
            assert_eq!(from % to, 0, "downsampling {from}->{to} must be integral");
            box_taps(from, to)
        };
        Resampler { from, to, taps }
    }

    pub fn compatible(from: usize, to: usize) -> bool {
        from > 0 && to > 0 && (from.is_multiple_of(to) || to.is_multiple_of(from))
    }

    pub fn is_identity(&self) -> bool {
        self.from == self.to
    }

    /// `input` is from² × C.
    pub fn apply(&self, input: &Array2<f64>) -> Array2<f64> {
        let c = input.ncols();
        let mut out = Array2::zeros((self.to * self.to, c));
        for (o, taps) in self.taps.iter().enumerate() {
            let mut row = out.row_mut(o);
            for &(i, w) in taps {
                row.scaled_add(w, &input.row(i));
            }
        }
        out
    }

    /// Transpose of [`Resampler::apply`]; `grad` is to² × C.
    pub fn adjoint(&self, grad: &Array2<f64>) -> Array2<f64> {
        let c = grad.ncols();
        let mut out = Array2::zeros((self.from * self.from, c));
        for (o, taps) in self.taps.iter().enumerate() {
            for &(i, w) in taps {
                out.row_mut(i).scaled_add(w, &grad.row(o));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field(r: usize, c: usize, seed: f64) -> Array2<f64> {
        Array2::from_shape_fn((r * r, c), |(k, ch)| ((k as f64 + 1.3 * ch as f64) * seed).sin())
    }

    #[test]
    fn adjoint_identity_holds() {
        for (from, to) in [(4, 8), (8, 4), (4, 16), (6, 6)] {
            let rs = Resampler::new(from, to);
            let x = field(from, 3, 0.37);
            let y = field(to, 3, 0.91);
            let lhs = (&rs.apply(&x) * &y).sum();
            let rhs = (&x * &rs.adjoint(&y)).sum();
            assert!((lhs - rhs).abs() < 1e-12, "{from}->{to}");
        }
    }

    #[test]
    fn constants_are_preserved() {
        let x = Array2::from_elem((16, 2), 1.5);
        for to in [8, 2, 4] {
            let y = Resampler::new(4, to).apply(&x);
            assert!(y.iter().all(|v| (v - 1.5).abs() < 1e-15));
        }
    }
}
