//! Run configuration: JSON with a strict schema and two default profiles.
//!
//! Parsing starts from the defaults of the selected profile (`"paper"` when
//! absent) and merges the document over them key by key. Any key that is
//! not part of the schema is rejected with its dotted path; arrays replace
//! their defaults wholesale.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::geometry::{axis_angle, camera_ring, Camera, EditSpec, Primitive, RigidTransform, SyntheticScene, Vec3};
use crate::pipeline::RunMode;
use crate::qfield::{FieldConfig, LayerSpec, QNorm, TrainConfig};
use crate::toydiff::{GeneratorConfig, KvInjection, Resampler};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Paper,
    Desk,
}

impl Profile {
    pub fn name(&self) -> &'static str {
        match self {
            Profile::Paper => "paper",
            Profile::Desk => "desk",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisAngle {
    pub axis: [f64; 3],
    pub degrees: f64,
}

impl AxisAngle {
    pub fn none() -> Self {
        AxisAngle {
            axis: [0.0, 0.0, 1.0],
            degrees: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrimitiveConfig {
    /// `"sphere"` or `"box"`.
    pub shape: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub half_extents: Option<[f64; 3]>,
    pub center: [f64; 3],
    #[serde(default = "AxisAngle::none")]
    pub rotation: AxisAngle,
    pub density: f64,
    pub softness: f64,
    /// Static primitives are background: never part of an edit silhouette.
    #[serde(default, rename = "static")]
    pub is_static: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformConfig {
    /// Rotation about the primitive's current centre.
    pub rotation: AxisAngle,
    pub translation: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub feature_frequency: f64,
    pub primitives: Vec<PrimitiveConfig>,
    /// One transform per primitive.
    pub edit: Vec<TransformConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraConfig {
    pub count: usize,
    pub radius: f64,
    pub elevation_deg: f64,
    pub fov_deg: f64,
    /// Image side length in pixels.
    pub size: usize,
    pub near: f64,
    pub far: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerConfig {
    pub resolution: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KvConfig {
    pub start_step: usize,
    /// Layer indices whose keys and values are substituted.
    pub layers: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QnerfConfig {
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub depth_weight: f64,
    pub frequencies: usize,
    pub width: usize,
    pub depth: usize,
    /// `"squared_l2"`, `"l2"` or `"l1"`.
    pub norm: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    /// Samples per ray for rendering and training.
    pub n_samples: usize,
    /// Surface points drawn by the consistency metric.
    pub metric_samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub scene: u64,
    pub generator: u64,
    pub training: u64,
    pub sampling: u64,
}

impl Seeds {
    pub fn describe(&self) -> String {
        format!(
            "seeds: scene={} generator={} training={} sampling={}",
            self.scene, self.generator, self.training, self.sampling
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub scene: SceneConfig,
    pub cameras: CameraConfig,
    pub layers: Vec<LayerConfig>,
    /// Denoising steps T.
    pub timesteps: usize,
    /// Half-interval τ.
    pub tau: usize,
    /// Guidance strength α.
    pub alpha: f64,
    /// Per-view target perturbation amplitude η.
    pub eta: f64,
    pub kv_injection: KvConfig,
    pub generator: GeneratorConfig,
    pub qnerf: QnerfConfig,
    pub sampling: SamplingConfig,
    pub seeds: Seeds,
    pub mode: RunMode,
    pub output: String,
}

fn default_scene() -> SceneConfig {
    SceneConfig {
        feature_frequency: 1.5,
        primitives: vec![
            PrimitiveConfig {
                shape: "box".into(),
                radius: None,
                half_extents: Some([1.4, 1.4, 0.1]),
                center: [0.0, 0.0, -0.5],
                rotation: AxisAngle::none(),
                density: 20.0,
                softness: 0.05,
                is_static: true,
            },
            PrimitiveConfig {
                shape: "sphere".into(),
                radius: Some(0.45),
                half_extents: None,
                center: [0.0, 0.0, 0.0],
                rotation: AxisAngle::none(),
                density: 20.0,
                softness: 0.05,
                is_static: false,
            },
            PrimitiveConfig {
                shape: "box".into(),
                radius: None,
                half_extents: Some([0.35, 0.12, 0.12]),
                center: [0.7, 0.0, 0.1],
                rotation: AxisAngle::none(),
                density: 20.0,
                softness: 0.05,
                is_static: false,
            },
        ],
        edit: vec![
            TransformConfig {
                rotation: AxisAngle::none(),
                translation: [0.0; 3],
            },
            TransformConfig {
                rotation: AxisAngle::none(),
                translation: [0.0; 3],
            },
            // swing the arm from +x to +y
            TransformConfig {
                rotation: AxisAngle {
                    axis: [0.0, 0.0, 1.0],
                    degrees: 90.0,
                },
                translation: [-0.7, 0.7, 0.15],
            },
        ],
    }
}

impl RunConfig {
    pub fn defaults(profile: Profile) -> Self {
        let desk = profile == Profile::Desk;
        let layers: Vec<LayerConfig> = if desk {
            [(8, 16), (16, 12), (32, 8)]
                .iter()
                .map(|&(resolution, channels)| LayerConfig { resolution, channels })
                .collect()
        } else {
            [(16, 1280), (32, 640), (64, 320)]
                .iter()
                .flat_map(|&(resolution, channels)| std::iter::repeat_n(LayerConfig { resolution, channels }, 3))
                .collect()
        };
        // the two finest resolutions
        let mut resolutions: Vec<usize> = layers.iter().map(|l| l.resolution).collect();
        resolutions.sort_unstable();
        resolutions.dedup();
        let finest = &resolutions[resolutions.len().saturating_sub(2)..];
        let kv_layers = layers
            .iter()
            .enumerate()
            .filter(|(_, l)| finest.contains(&l.resolution))
            .map(|(i, _)| i)
            .collect();
        let generator = if desk {
            GeneratorConfig::default()
        } else {
            GeneratorConfig {
                latent_resolution: 64,
                latent_channels: 4,
                token_dim: 8,
                ..GeneratorConfig::default()
            }
        };
        RunConfig {
            profile,
            scene: default_scene(),
            cameras: CameraConfig {
                count: 8,
                radius: 4.0,
                elevation_deg: 30.0,
                fov_deg: 40.0,
                size: 64,
                near: 1.5,
                far: 7.0,
            },
            layers,
            timesteps: if desk { 20 } else { 50 },
            tau: if desk { 4 } else { 5 },
            alpha: 60.0,
            eta: 0.5,
            kv_injection: KvConfig {
                start_step: 4,
                layers: kv_layers,
            },
            generator,
            qnerf: QnerfConfig {
                steps: if desk { 2000 } else { 10000 },
                batch: 64,
                learning_rate: 5e-3,
                depth_weight: 1.0,
                frequencies: 6,
                width: if desk { 32 } else { 64 },
                depth: 3,
                norm: "squared_l2".into(),
            },
            sampling: SamplingConfig {
                n_samples: 32,
                metric_samples: 512,
            },
            seeds: Seeds {
                scene: 1,
                generator: 2,
                training: 3,
                sampling: 4,
            },
            mode: RunMode::Full,
            output: "runs/latest".into(),
        }
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        self.layers
            .iter()
            .enumerate()
            .map(|(i, l)| LayerSpec::new(i, l.resolution, l.channels))
            .collect()
    }

    pub fn field_config(&self) -> FieldConfig {
        FieldConfig {
            frequencies: self.qnerf.frequencies,
            width: self.qnerf.width,
            depth: self.qnerf.depth,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.qnerf.steps,
            batch: self.qnerf.batch,
            learning_rate: self.qnerf.learning_rate,
            depth_weight: self.qnerf.depth_weight,
            n_samples: self.sampling.n_samples,
            norm: QNorm::parse(&self.qnerf.norm).unwrap_or_default(),
        }
    }

    pub fn kv(&self) -> KvInjection {
        KvInjection {
            start_step: self.kv_injection.start_step,
            layers: self.kv_injection.layers.clone(),
        }
    }

    pub fn cameras(&self) -> Result<Vec<Camera>> {
        let c = &self.cameras;
        camera_ring(c.count, c.radius, c.elevation_deg, c.size, c.fov_deg, c.near, c.far)
    }

    /// The original scene and its edited counterpart.
    pub fn scenes(&self) -> Result<(SyntheticScene, SyntheticScene)> {
        let prims = self
            .scene
            .primitives
            .iter()
            .enumerate()
            .map(|(i, p)| primitive(p, i))
            .collect::<Result<Vec<_>>>()?;
        let original = SyntheticScene::new(prims, self.seeds.scene, self.layer_specs(), self.scene.feature_frequency)?;
        let edit = EditSpec {
            transforms: self
                .scene
                .edit
                .iter()
                .map(|t| RigidTransform {
                    rotation: rotation(&t.rotation),
                    translation: Vec3::from(t.translation),
                })
                .collect(),
        };
        let edited = original.apply_edit(&edit)?;
        Ok((original, edited))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::config(key, msg));
        if self.timesteps < 2 {
            return bad("timesteps", format!("must be at least 2, got {}", self.timesteps));
        }
        if self.tau < 1 {
            return bad("tau", "must be at least 1".into());
        }
        if 2 * self.tau > self.timesteps {
            return bad(
                "tau",
                format!("2τ ≤ T violated (tau={}, timesteps={})", self.tau, self.timesteps),
            );
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return bad("alpha", "must be finite and non-negative".into());
        }
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return bad("eta", "must be finite and non-negative".into());
        }
        if self.layers.is_empty() {
            return bad("layers", "at least one layer is required".into());
        }
        crate::qfield::validate_layers(&self.layer_specs()).map_err(|e| Error::config("layers", e.to_string()))?;
        self.generator.validate()?;
        let r0 = self.generator.latent_resolution;
        for (i, l) in self.layers.iter().enumerate() {
            if !Resampler::compatible(r0, l.resolution) {
                return bad(
                    "layers",
                    format!("layer {i} resolution {} incompatible with latent resolution {r0}", l.resolution),
                );
            }
            if i > 0 && !Resampler::compatible(self.layers[i - 1].resolution, l.resolution) {
                return bad("layers", format!("layer {i} resolution incompatible with layer {}", i - 1));
            }
        }
        if self.kv_injection.start_step < 1 {
            return bad("kv_injection.start_step", "must be at least 1".into());
        }
        for &l in &self.kv_injection.layers {
            if l >= self.layers.len() {
                return bad("kv_injection.layers", format!("unknown layer {l}"));
            }
        }
        let c = &self.cameras;
        if c.count < 2 {
            return bad("cameras.count", "at least 2 views are required".into());
        }
        if !(c.radius > 0.0 && c.radius.is_finite()) {
            return bad("cameras.radius", "must be positive".into());
        }
        if !(c.fov_deg > 0.0 && c.fov_deg < 180.0) {
            return bad("cameras.fov_deg", "must lie in (0, 180)".into());
        }
        if c.size == 0 {
            return bad("cameras.size", "must be positive".into());
        }
        if !(c.near > 0.0 && c.near < c.far && c.far.is_finite()) {
            return bad("cameras.near", "need 0 < near < far".into());
        }
        let q = &self.qnerf;
        if q.steps < 1 {
            return bad("qnerf.steps", "must be at least 1".into());
        }
        if q.batch < 1 {
            return bad("qnerf.batch", "must be at least 1".into());
        }
        if !(q.learning_rate > 0.0 && q.learning_rate.is_finite()) {
            return bad("qnerf.learning_rate", "must be positive".into());
        }
        if !(q.depth_weight >= 0.0 && q.depth_weight.is_finite()) {
            return bad("qnerf.depth_weight", "must be non-negative".into());
        }
        if q.width < 1 || q.depth < 1 {
            return bad("qnerf.width", "trunk width and depth must be positive".into());
        }
        if QNorm::parse(&q.norm).is_none() {
            return bad("qnerf.norm", format!("unknown norm {:?}", q.norm));
        }
        if self.sampling.n_samples < 2 {
            return bad("sampling.n_samples", "must be at least 2".into());
        }
        if self.sampling.metric_samples < 1 {
            return bad("sampling.metric_samples", "must be at least 1".into());
        }
        let s = &self.scene;
        if s.primitives.is_empty() {
            return bad("scene.primitives", "at least one primitive is required".into());
        }
        if s.edit.len() != s.primitives.len() {
            return bad(
                "scene.edit",
                format!("{} transforms for {} primitives", s.edit.len(), s.primitives.len()),
            );
        }
        if !(s.feature_frequency > 0.0 && s.feature_frequency.is_finite()) {
            return bad("scene.feature_frequency", "must be positive".into());
        }
        for (i, p) in s.primitives.iter().enumerate() {
            primitive(p, i)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }
}

fn rotation(a: &AxisAngle) -> crate::geometry::Mat3 {
    let axis = Vec3::from(a.axis);
    if a.degrees == 0.0 || axis.norm() == 0.0 {
        crate::geometry::Mat3::identity()
    } else {
        axis_angle(axis, a.degrees.to_radians())
    }
}

fn primitive(p: &PrimitiveConfig, index: usize) -> Result<Primitive> {
    let key = format!("scene.primitives.{index}");
    let center = Vec3::from(p.center);
    let prim = match p.shape.as_str() {
        "sphere" => {
            let r = p
                .radius
                .ok_or_else(|| Error::config(format!("{key}.radius"), "spheres need a radius"))?;
            Primitive::sphere(center, r, p.density, p.softness)
        }
        "box" => {
            let h = p
                .half_extents
                .ok_or_else(|| Error::config(format!("{key}.half_extents"), "boxes need half extents"))?;
            Primitive::cuboid(center, Vec3::from(h), rotation(&p.rotation), p.density, p.softness)
        }
        other => return Err(Error::config(format!("{key}.shape"), format!("unknown shape {other:?}"))),
    };
    prim.validate().map_err(|e| Error::config(key, e.to_string()))?;
    Ok(if p.is_static { prim.into_static() } else { prim })
}

fn merge(base: &mut Value, doc: &Value, path: &str) -> Result<()> {
    match (base, doc) {
        (Value::Object(b), Value::Object(d)) => {
            for (k, v) in d {
                let key = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v, &key)?,
                    Some(slot) => *slot = v.clone(),
                    None => return Err(Error::config(key, "unknown key")),
                }
            }
            Ok(())
        }
        (b, d) => {
            *b = d.clone();
            Ok(())
        }
    }
}

fn parse_document(text: &str) -> Result<Map<String, Value>> {
    let value: Value =
        serde_json::from_str(text).map_err(|e| Error::config("<document>", format!("malformed JSON: {e}")))?;
    match value {
        Value::Object(m) => Ok(m),
        _ => Err(Error::config("<document>", "top level must be an object")),
    }
}

/// Sets `key` (dotted path) in `doc`; the value is read as JSON when it
/// parses, otherwise as a string.
pub fn apply_override(doc: &mut Map<String, Value>, key: &str, raw: &str) -> Result<()> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(key, "malformed override key"));
    }
    let mut cur = doc;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
        cur = match entry {
            Value::Object(m) => m,
            _ => return Err(Error::config(key, format!("{p} is not an object"))),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Parses `text`, applies `overrides` (dotted key, raw value) and validates.
pub fn parse_config_with(text: &str, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut doc = parse_document(text)?;
    for (k, v) in overrides {
        apply_override(&mut doc, k, v)?;
    }
    let profile = match doc.get("profile") {
        None => Profile::Paper,
        Some(v) => serde_json::from_value(v.clone())
            .map_err(|_| Error::config("profile", format!("expected \"paper\" or \"desk\", got {v}")))?,
    };
    let mut base = serde_json::to_value(RunConfig::defaults(profile)).expect("defaults serialise");
    merge(&mut base, &Value::Object(doc), "")?;
    let cfg: RunConfig = serde_json::from_value(base).map_err(|e| Error::config("<document>", e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    parse_config_with(text, &[])
}

/// Splits `key=value`.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    match s.split_once('=') {
        Some((k, v)) if !k.is_empty() => Ok((k.trim().to_string(), v.to_string())),
        _ => Err(Error::config(s, "override must look like key=value")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_paper_defaults() {
        let cfg = parse_config("{}").unwrap();
        assert_eq!(cfg.profile, Profile::Paper);
        assert_eq!(cfg.alpha, 60.0);
        assert_eq!(cfg.timesteps, 50);
        assert_eq!(cfg.qnerf.steps, 10000);
        assert_eq!(cfg.layers.len(), 9);
    }

    #[test]
    fn desk_profile() {
        let cfg = parse_config(r#"{"profile":"desk"}"#).unwrap();
        assert_eq!(cfg.timesteps, 20);
        assert_eq!(cfg.tau, 4);
        assert_eq!(cfg.qnerf.steps, 2000);
        let shapes: Vec<(usize, usize)> = cfg.layers.iter().map(|l| (l.resolution, l.channels)).collect();
        assert_eq!(shapes, vec![(8, 16), (16, 12), (32, 8)]);
        assert_eq!(cfg.kv_injection.layers, vec![1, 2]);
        cfg.scenes().unwrap();
        assert_eq!(cfg.cameras().unwrap().len(), 8);
    }

    #[test]
    fn tau_too_large() {
        let err = parse_config(r#"{"tau":30}"#).unwrap_err();
        assert!(err.to_string().contains("2τ ≤ T violated"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = parse_config(r#"{"qnerf":{"stepz":3}}"#).unwrap_err();
        assert!(matches!(&err, Error::Config { key, .. } if key == "qnerf.stepz"), "{err}");
        assert!(parse_config(r#"{"bogus":1}"#).is_err());
        let prim = r#"{"scene":{"primitives":[{"shape":"sphere","radius":1,"center":[0,0,0],"density":1,"softness":0.1,"colour":1}],"edit":[{"rotation":{"axis":[0,0,1],"degrees":0},"translation":[0,0,0]}]}}"#;
        assert!(parse_config(prim).is_err());
    }

    #[test]
    fn malformed_and_invalid() {
        assert!(matches!(parse_config("{"), Err(Error::Config { .. })));
        assert!(parse_config("[]").is_err());
        assert!(parse_config(r#"{"alpha":-1}"#).is_err());
        assert!(parse_config(r#"{"profile":"laptop"}"#).is_err());
        assert!(parse_config(r#"{"alpha":"sixty"}"#).is_err());
        assert!(parse_config(r#"{"kv_injection":{"layers":[12]}}"#).is_err());
    }

    #[test]
    fn round_trip() {
        for profile in [Profile::Paper, Profile::Desk] {
            let cfg = RunConfig::defaults(profile);
            assert_eq!(parse_config(&cfg.to_json()).unwrap(), cfg);
        }
        let mut cfg = RunConfig::defaults(Profile::Desk);
        cfg.eta = 0.25;
        cfg.layers.pop();
        cfg.kv_injection.layers = vec![1];
        assert_eq!(parse_config(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn overrides() {
        let set = |s: &str| parse_override(s).unwrap();
        let cfg = parse_config_with(
            r#"{"profile":"desk"}"#,
            &[set("qnerf.steps=10"), set("eta=0"), set("mode=unguided_baseline")],
        )
        .unwrap();
        assert_eq!(cfg.qnerf.steps, 10);
        assert_eq!(cfg.eta, 0.0);
        assert_eq!(cfg.mode, RunMode::UnguidedBaseline);
        let err = parse_config_with(r#"{"profile":"desk"}"#, &[set("tau=0")]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(parse_override("novalue").is_err());
        assert!(parse_config_with("{}", &[set("qnerf..steps=1")]).is_err());
    }
}
