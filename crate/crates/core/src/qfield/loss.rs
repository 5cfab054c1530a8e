use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::volrender::RenderOutput;

/// Per-ray reduction of the query difference over channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum QNorm {
    /// ‖Δ‖², the default
    #[default]
    SquaredL2,
    /// ‖Δ‖
    L2,
    /// Σ|Δ|
    L1,
}

impl QNorm {
    pub fn name(&self) -> &'static str {
        match self {
            QNorm::SquaredL2 => "squared_l2",
            QNorm::L2 => "l2",
            QNorm::L1 => "l1",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "squared_l2" => Some(QNorm::SquaredL2),
            "l2" => Some(QNorm::L2),
            "l1" => Some(QNorm::L1),
            _ => None,
        }
    }

    /// Per-ray loss and its gradient with respect to `rendered`.
    pub fn eval(&self, rendered: &[f64], target: &[f64], grad: Option<&mut [f64]>) -> f64 {
        match self {
            QNorm::SquaredL2 => {
                let mut l = 0.0;
                for (r, t) in rendered.iter().zip(target) {
                    l += (r - t) * (r - t);
                }
                if let Some(g) = grad {
                    for ((g, r), t) in g.iter_mut().zip(rendered).zip(target) {
                        *g = 2.0 * (r - t);
                    }
                }
                l
            }
            QNorm::L2 => {
                let n = rendered
                    .iter()
                    .zip(target)
                    .map(|(r, t)| (r - t) * (r - t))
                    .sum::<f64>()
                    .sqrt();
                if let Some(g) = grad {
                    for ((g, r), t) in g.iter_mut().zip(rendered).zip(target) {
                        *g = if n > 0.0 { (r - t) / n } else { 0.0 };
                    }
                }
                n
            }
            QNorm::L1 => {
                if let Some(g) = grad {
                    for ((g, r), t) in g.iter_mut().zip(rendered).zip(target) {
                        *g = (r - t).signum() * f64::from(r != t);
                    }
                }
                rendered.iter().zip(target).map(|(r, t)| (r - t).abs()).sum()
            }
        }
    }
}

/// Mean over every ray of every layer of the squared L2 distance between
/// rendered and target queries.
pub fn q_loss(rendered: &[Grid], target: &[Grid]) -> Result<f64> {
    if rendered.len() != target.len() {
        return Err(Error::domain(format!(
            "{} rendered layers vs {} target layers",
            rendered.len(),
            target.len()
        )));
    }
    let mut total = 0.0;
    let mut rays = 0;
    for (r, t) in rendered.iter().zip(target) {
        if !r.same_shape(t) {
            return Err(Error::domain(format!(
                "layer shape mismatch: {}x{} vs {}x{}",
                r.resolution, r.channels, t.resolution, t.channels
            )));
        }
        for k in 0..r.tokens() {
            total += QNorm::SquaredL2.eval(r.token(k), t.token(k), None);
        }
        rays += r.tokens();
    }
    Ok(if rays == 0 { 0.0 } else { total / rays as f64 })
}

/// Squared error of expected depth on supervised rays, zero elsewhere.
pub fn depth_loss(render: &RenderOutput, target_depth: f64, supervised: bool) -> f64 {
    if supervised {
        let d = render.expected_depth - target_depth;
        d * d
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn out(depth: f64) -> RenderOutput {
        RenderOutput {
            feature: vec![],
            expected_depth: depth,
            opacity: 1.0,
            weights: vec![],
        }
    }

    #[test]
    fn identical_is_zero() {
        let g = Grid::from_data(2, 3, (0..12).map(|v| v as f64 * 0.1).collect()).unwrap();
        assert_eq!(q_loss(&[g.clone()], &[g]).unwrap(), 0.0);
    }

    #[test]
    fn three_four_five() {
        let a = Grid::from_data(1, 2, vec![3.0, 4.0]).unwrap();
        let b = Grid::from_data(1, 2, vec![0.0, 0.0]).unwrap();
        assert_eq!(q_loss(&[a], &[b]).unwrap(), 25.0);
    }

    #[test]
    fn channel_permutation_invariant() {
        let a = Grid::from_data(2, 3, (0..12).map(|v| (v as f64).sin()).collect()).unwrap();
        let b = Grid::from_data(2, 3, (0..12).map(|v| (v as f64).cos()).collect()).unwrap();
        let perm = |g: &Grid| {
            let mut d = g.data.clone();
            for k in 0..4 {
                d[k * 3..k * 3 + 3].rotate_left(1);
            }
            Grid::from_data(2, 3, d).unwrap()
        };
        let l0 = q_loss(&[a.clone()], &[b.clone()]).unwrap();
        let l1 = q_loss(&[perm(&a)], &[perm(&b)]).unwrap();
        assert!((l0 - l1).abs() < 1e-15);
        assert!(l0 > 0.0);
    }

    #[test]
    fn shape_mismatch() {
        let a = Grid::zeros(2, 3);
        let b = Grid::zeros(2, 2);
        assert!(q_loss(&[a.clone()], &[b]).is_err());
        assert!(q_loss(&[a.clone(), a.clone()], &[a]).is_err());
    }

    #[test]
    fn depth_terms() {
        assert_eq!(depth_loss(&out(2.0), 1.5, false), 0.0);
        assert_eq!(depth_loss(&out(1.5), 1.5, true), 0.0);
        assert_eq!(depth_loss(&out(2.0), 1.5, true), 0.25);
    }

    #[test]
    fn norm_gradients() {
        let r = [0.5, -1.0, 2.0];
        let t = [0.0, 1.0, 2.5];
        for norm in [QNorm::SquaredL2, QNorm::L2, QNorm::L1] {
            let mut g = [0.0; 3];
            norm.eval(&r, &t, Some(&mut g));
            for k in 0..3 {
                let mut p = r;
                let mut m = r;
                p[k] += 1e-6;
                m[k] -= 1e-6;
                let fd = (norm.eval(&p, &t, None) - norm.eval(&m, &t, None)) / 2e-6;
                assert!((fd - g[k]).abs() < 1e-6, "{norm:?} {k}");
            }
        }
    }
}
