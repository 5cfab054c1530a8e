//! Oracle-based consistency and fidelity measures, and report files.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Camera, Ray, SyntheticScene, Vec3};
use crate::grid::Grid;
use crate::qfield::{DepthSupervision, FeatureField, QuerySet};
use crate::volrender::{render_map, transmittance_along, PointSource};

/// Samples used to locate a surface along a probe ray.
const SURFACE_SAMPLES: usize = 256;
/// Samples used for each visibility test.
const VISIBILITY_SAMPLES: usize = 128;

/// First point along `ray` where the density reaches half its maximum.
fn surface_point(scene: &SyntheticScene, ray: &Ray) -> Option<Vec3> {
    let step = (ray.t_far - ray.t_near) / SURFACE_SAMPLES as f64;
    let densities: Vec<f64> = (0..SURFACE_SAMPLES)
        .map(|i| scene.density_at(&ray.at(ray.t_near + (i as f64 + 0.5) * step)))
        .collect();
    let max = densities.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        return None;
    }
    let i = densities.iter().position(|&d| d >= 0.5 * max)?;
    Some(ray.at(ray.t_near + (i as f64 + 0.5) * step))
}

/// Whether `x` is seen by `camera`; returns its pixel position if so.
fn visible_pixel(scene: &SyntheticScene, camera: &Camera, x: &Vec3, margin: f64) -> Result<Option<(f64, f64)>> {
    let Some((px, py, dist)) = camera.project(x) else {
        return Ok(None);
    };
    if px < 0.0 || py < 0.0 || px >= camera.width as f64 || py >= camera.height as f64 {
        return Ok(None);
    }
    let end = dist - margin;
    if end <= camera.t_near {
        return Ok(None);
    }
    let ray = camera.ray_for_pixel(px, py)?;
    let probe = Ray {
        t_far: end,
        ..ray
    };
    let t = transmittance_along(scene, &probe, VISIBILITY_SAMPLES)?;
    Ok((t > 0.5).then_some((px, py)))
}

/// Mean pairwise query distance at shared surface points, per layer,
/// divided by the mean query norm at those points.
pub fn cross_view_consistency(
    queries: &QuerySet,
    scene: &SyntheticScene,
    cameras: &[Camera],
    samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let views = queries.view_count();
    if views < 2 {
        return Err(Error::Evaluation(format!("consistency needs at least 2 views, got {views}")));
    }
    if cameras.len() != views {
        return Err(Error::domain(format!("{} cameras for {views} query views", cameras.len())));
    }
    if samples == 0 {
        return Err(Error::domain("consistency needs at least one sample"));
    }
    let layers = queries.views[0].len();
    let margin = 2.0
        * scene
            .primitives
            .iter()
            .map(|p| p.softness)
            .fold(0.0, f64::max);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probes: Vec<(usize, f64, f64)> = (0..samples)
        .map(|_| {
            let v = rng.random_range(0..views);
            let cam = &cameras[v];
            (v, rng.random_range(0.0..cam.width as f64), rng.random_range(0.0..cam.height as f64))
        })
        .collect();
    // (per-layer pair distance sum, pair count, per-layer norm sum, vector count)
    let per_point: Vec<Option<(Vec<f64>, usize, Vec<f64>, usize)>> = probes
        .par_iter()
        .map(|&(v, px, py)| -> Result<_> {
            let ray = cameras[v].ray_for_pixel(px, py)?;
            let Some(x) = surface_point(scene, &ray) else {
                return Ok(None);
            };
            let mut seen = Vec::new();
            for (j, cam) in cameras.iter().enumerate() {
                if let Some(p) = visible_pixel(scene, cam, &x, margin)? {
                    seen.push((j, p));
                }
            }
            if seen.len() < 2 {
                return Ok(None);
            }
            let mut dist = vec![0.0; layers];
            let mut norm = vec![0.0; layers];
            for l in 0..layers {
                let vecs: Vec<Vec<f64>> = seen
                    .iter()
                    .map(|&(j, (px, py))| {
                        let g = &queries.views[j][l];
                        let scale = g.resolution as f64;
                        let mut out = vec![0.0; g.channels];
                        g.bilinear(
                            px / cameras[j].width as f64 * scale,
                            py / cameras[j].height as f64 * scale,
                            &mut out,
                        );
                        out
                    })
                    .collect();
                for a in 0..vecs.len() {
                    norm[l] += vecs[a].iter().map(|x| x * x).sum::<f64>().sqrt();
                    for b in a + 1..vecs.len() {
                        dist[l] += vecs[a]
                            .iter()
                            .zip(&vecs[b])
                            .map(|(x, y)| (x - y) * (x - y))
                            .sum::<f64>()
                            .sqrt();
                    }
                }
            }
            let n = seen.len();
            let pairs = n * (n - 1) / 2;
            // per-point mean over pairs, accumulated as a sum over points
            Ok(Some((dist.iter().map(|d| d / pairs as f64).collect(), 1, norm, n)))
        })
        .collect::<Result<_>>()?;
    let mut dist = vec![0.0; layers];
    let mut norm = vec![0.0; layers];
    let (mut points, mut vectors) = (0usize, 0usize);
    for (d, p, n, c) in per_point.into_iter().flatten() {
        for l in 0..layers {
            dist[l] += d[l];
            norm[l] += n[l];
        }
        points += p;
        vectors += c;
    }
    if points == 0 {
        return Err(Error::Evaluation("no surface point is visible from two views".into()));
    }
    Ok((0..layers)
        .map(|l| {
            let mean_norm = norm[l] / vectors as f64;
            let mean_dist = dist[l] / points as f64;
            if mean_norm > 0.0 {
                mean_dist / mean_norm
            } else {
                0.0
            }
        })
        .collect())
}

/// RMSE of the field's expected depth against the supervised depth targets,
/// using each view's finest-layer supervision map.
pub fn depth_rmse(
    field: &FeatureField,
    supervision: &DepthSupervision,
    cameras: &[Camera],
    n_samples: usize,
) -> Result<f64> {
    if supervision.views.len() != cameras.len() {
        return Err(Error::domain("depth supervision and cameras disagree in view count"));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (maps, cam) in supervision.views.iter().zip(cameras) {
        let Some(map) = maps.last() else { continue };
        if map.mask.count() == 0 {
            continue;
        }
        let render = render_map(field, cam, 0, map.resolution, n_samples, None)?;
        for j in 0..map.resolution {
            for i in 0..map.resolution {
                if let Some(target) = map.target(i, j) {
                    let d = render.depth[j * map.resolution + i] - target;
                    sum += d * d;
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        return Err(Error::Evaluation("depth supervision mask is empty".into()));
    }
    Ok((sum / count as f64).sqrt())
}

/// `10 log10(peak² / MSE)` with the peak taken from the reference;
/// identical inputs give `+inf`.
pub fn feature_psnr(rendered: &Grid, reference: &Grid) -> Result<f64> {
    if !rendered.same_shape(reference) {
        return Err(Error::domain("feature maps differ in shape"));
    }
    let mse = rendered
        .data
        .iter()
        .zip(&reference.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / rendered.data.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    let peak = reference.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Mean PSNR over matching lists of maps; infinite entries are skipped
/// unless all are infinite.
pub fn mean_psnr(rendered: &[Grid], reference: &[Grid]) -> Result<f64> {
    if rendered.len() != reference.len() || rendered.is_empty() {
        return Err(Error::domain("map lists differ in length"));
    }
    let values: Vec<f64> = rendered
        .iter()
        .zip(reference)
        .map(|(a, b)| feature_psnr(a, b))
        .collect::<Result<_>>()?;
    let finite: Vec<f64> = values.iter().cloned().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        return Ok(f64::INFINITY);
    }
    Ok(finite.iter().sum::<f64>() / finite.len() as f64)
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    /// Interval index, or `None` for the final row.
    pub interval: Option<usize>,
    pub timestep: usize,
    pub consistency: Vec<f64>,
    /// Field metrics; `None` when the mode trains no field (left blank).
    pub depth_rmse: Option<f64>,
    pub feature_psnr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyReport {
    pub layer_ids: Vec<usize>,
    /// One row per extraction, then the final row.
    pub rows: Vec<ReportRow>,
}

impl ConsistencyReport {
    pub fn final_row(&self) -> Option<&ReportRow> {
        self.rows.last().filter(|r| r.interval.is_none())
    }

    /// Mean over layers of the consistency of each extraction row.
    pub fn series(&self) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.interval.is_some())
            .map(|r| r.consistency.iter().sum::<f64>() / r.consistency.len().max(1) as f64)
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("interval_index,timestep");
        for id in &self.layer_ids {
            let _ = write!(out, ",consistency_layer_{id}");
        }
        out.push_str(",depth_rmse,feature_psnr\n");
        for row in &self.rows {
            match row.interval {
                Some(k) => {
                    let _ = write!(out, "{k}");
                }
                None => out.push_str("final"),
            }
            let _ = write!(out, ",{}", row.timestep);
            for c in &row.consistency {
                let _ = write!(out, ",{c}");
            }
            for v in [row.depth_rmse, row.feature_psnr] {
                out.push(',');
                if let Some(v) = v {
                    let _ = write!(out, "{v}");
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Grey level of a query vector: a fixed projection of its first three
/// channels, centred at 128.
pub fn grey_level(v: &[f64]) -> u8 {
    let s: f64 = v.iter().take(3).sum::<f64>() / 3f64.sqrt();
    (128.0 + 64.0 * s).round().clamp(0.0, 255.0) as u8
}

pub fn pgm_bytes(map: &Grid) -> Vec<u8> {
    let r = map.resolution;
    let mut out = format!("P5\n{r} {r}\n255\n").into_bytes();
    out.extend((0..map.tokens()).map(|k| grey_level(map.token(k))));
    out
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `metrics.csv` and one graymap per view and layer of `queries`.
pub fn write_report(report: &ConsistencyReport, queries: &QuerySet, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join("metrics.csv"), report.to_csv().as_bytes())?;
    for (v, maps) in queries.views.iter().enumerate() {
        for (map, id) in maps.iter().zip(&report.layer_ids) {
            write_file(&dir.join(format!("view{v}_layer{id}.pgm")), &pgm_bytes(map))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{camera_ring, ring_camera, Primitive};
    use crate::qfield::LayerSpec;

    fn scene() -> SyntheticScene {
        SyntheticScene::new(
            vec![Primitive::sphere(Vec3::zeros(), 0.8, 30.0, 0.03)],
            3,
            vec![LayerSpec::new(0, 8, 3)],
            1.0,
        )
        .unwrap()
    }

    fn constant_set(values: &[Vec<f64>]) -> QuerySet {
        QuerySet {
            timestep: 0,
            views: values
                .iter()
                .map(|v| {
                    let data = (0..64).flat_map(|_| v.iter().cloned()).collect();
                    vec![Grid::from_data(8, v.len(), data).unwrap()]
                })
                .collect(),
        }
    }

    #[test]
    fn identical_maps_are_consistent() {
        let cams = camera_ring(3, 3.0, 20.0, 32, 40.0, 0.5, 6.0).unwrap();
        let q = constant_set(&[vec![1.0, 2.0, 0.5], vec![1.0, 2.0, 0.5], vec![1.0, 2.0, 0.5]]);
        let c = cross_view_consistency(&q, &scene(), &cams, 64, 1).unwrap();
        assert_eq!(c, vec![0.0]);
    }

    #[test]
    fn constant_offset_gives_ratio() {
        let cams: Vec<Camera> = [0.0, 1.0]
            .iter()
            .map(|&a| ring_camera(a, 3.0, 20.0, 32, 40.0, 0.5, 6.0).unwrap())
            .collect();
        // norms 5 and 5, distance 6: d/m = 1.2
        let q = constant_set(&[vec![3.0, 4.0, 0.0], vec![-3.0, 4.0, 0.0]]);
        let c = cross_view_consistency(&q, &scene(), &cams, 200, 2).unwrap();
        assert!((c[0] - 1.2).abs() < 1e-12, "{c:?}");
    }

    #[test]
    fn no_shared_points_is_an_error() {
        let cams = camera_ring(2, 3.0, 20.0, 32, 40.0, 0.5, 6.0).unwrap();
        let empty = SyntheticScene::new(vec![], 3, vec![LayerSpec::new(0, 8, 3)], 1.0).unwrap();
        let q = constant_set(&[vec![1.0; 3], vec![1.0; 3]]);
        assert!(matches!(
            cross_view_consistency(&q, &empty, &cams, 16, 0),
            Err(Error::Evaluation(_))
        ));
    }

    #[test]
    fn psnr_closed_form() {
        let reference = Grid::from_data(2, 1, vec![2.0, -1.0, 0.5, 1.0]).unwrap();
        let shifted = |e: f64| Grid::from_data(2, 1, reference.data.iter().map(|v| v + e).collect()).unwrap();
        let p = feature_psnr(&shifted(0.1), &reference).unwrap();
        assert!((p - 20.0 * (2.0f64 / 0.1).log10()).abs() < 1e-9);
        let drop = p - feature_psnr(&shifted(0.2), &reference).unwrap();
        assert!((drop - 6.0206).abs() < 1e-3);
        assert_eq!(feature_psnr(&reference, &reference).unwrap(), f64::INFINITY);
    }

    #[test]
    fn zero_map_is_mid_grey() {
        let bytes = pgm_bytes(&Grid::zeros(4, 3));
        assert!(bytes.ends_with(&[128u8; 16]));
        assert!(bytes.starts_with(b"P5\n4 4\n255\n"));
    }

    #[test]
    fn csv_has_one_row_per_extraction_plus_final() {
        let report = ConsistencyReport {
            layer_ids: vec![0, 1],
            rows: vec![
                ReportRow {
                    interval: Some(1),
                    timestep: 12,
                    consistency: vec![0.5, 0.25],
                    depth_rmse: Some(0.1),
                    feature_psnr: Some(30.0),
                },
                ReportRow {
                    interval: None,
                    timestep: 0,
                    consistency: vec![0.2, 0.1],
                    depth_rmse: Some(0.1),
                    feature_psnr: Some(f64::INFINITY),
                },
            ],
        };
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(
            lines[0],
            "interval_index,timestep,consistency_layer_0,consistency_layer_1,depth_rmse,feature_psnr"
        );
        assert_eq!(lines[2], "final,0,0.2,0.1,0.1,inf");
        assert_eq!(report.series(), vec![0.375]);
        assert_eq!(csv, report.to_csv());
    }
}
