//! WebAssembly bindings behind `www/index.html`: generate a scene under a
//! domain profile, augment and voxel-downsample it, and score a corrupted
//! copy of its labels.

use fusionseg::cloud::{self, LabeledCloud};
use fusionseg::datagen::{self, AugmentationSpec, DomainProfile, SceneSpec};
use fusionseg::eval::{self, MetricsReport};
use fusionseg::rng;
use fusionseg::SemanticClass;
use wasm_bindgen::prelude::*;

fn js_error(e: fusionseg::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn profile_named(name: &str) -> Result<DomainProfile, fusionseg::Error> {
    match name {
        "sim" => Ok(DomainProfile::sim()),
        "real" => Ok(DomainProfile::real()),
        "noiseless" => Ok(DomainProfile::noiseless()),
        other => Err(fusionseg::Error::Parameter(format!("unknown profile {other:?}"))),
    }
}

/// A labeled cloud held on the Rust side of the page.
#[wasm_bindgen]
pub struct Scene {
    cloud: LabeledCloud,
}

#[wasm_bindgen]
impl Scene {
    /// One generated room. `profile` is `sim`, `real` or `noiseless`;
    /// `density` is points per square meter of surface.
    #[wasm_bindgen(constructor)]
    pub fn new(profile: &str, seed: u32, density: f64) -> Result<Scene, JsError> {
        Self::generate(profile, seed, density).map_err(js_error)
    }

    fn generate(profile: &str, seed: u32, density: f64) -> fusionseg::Result<Scene> {
        let spec = SceneSpec { profile: profile_named(profile)?, density, seed: seed.into(), ..SceneSpec::default() };
        Ok(Scene { cloud: datagen::generate_scene(&spec)? })
    }

    pub fn len(&self) -> usize {
        self.cloud.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cloud.is_empty()
    }

    /// Interleaved `x, y, z` coordinates.
    pub fn positions(&self) -> Vec<f32> {
        self.cloud.points().iter().flat_map(|p| p.map(|v| v as f32)).collect()
    }

    /// Class codes, one per point.
    pub fn labels(&self) -> Vec<u8> {
        self.cloud.label_ids().unwrap_or_else(|| vec![0; self.cloud.len()])
    }

    /// `{"Floor": 1234, ...}` over every class.
    pub fn class_counts(&self) -> String {
        let counts = self.cloud.class_counts();
        let map: serde_json::Map<String, serde_json::Value> = SemanticClass::ALL
            .iter()
            .map(|c| (c.name().to_string(), counts[c.id() as usize].into()))
            .collect();
        serde_json::Value::Object(map).to_string()
    }

    /// A flipped, rotated, scaled and jittered copy, then downsampled on a
    /// voxel grid (skipped when `voxel_size` is 0).
    pub fn transformed(&self, seed: u32, voxel_size: f64) -> Result<Scene, JsError> {
        self.transform(seed, voxel_size).map_err(js_error)
    }

    fn transform(&self, seed: u32, voxel_size: f64) -> fusionseg::Result<Scene> {
        let mut cloud = datagen::augment(&self.cloud, &AugmentationSpec::default(), seed.into());
        if voxel_size > 0.0 {
            cloud = cloud::voxel_downsample(&cloud, voxel_size)?;
        }
        Ok(Scene { cloud })
    }

    /// Metrics of a prediction that replaces each label by a uniformly random
    /// class with probability `flip_rate`, as JSON.
    pub fn score_corrupted(&self, flip_rate: f64, seed: u32) -> Result<String, JsError> {
        self.score(flip_rate, seed).map_err(js_error)
    }

    fn score(&self, flip_rate: f64, seed: u32) -> fusionseg::Result<String> {
        use rand::Rng;
        if !(0.0..=1.0).contains(&flip_rate) {
            return Err(fusionseg::Error::Parameter("flip rate must lie in [0, 1]".into()));
        }
        let truth = self.labels();
        let mut r = rng::seeded(seed.into());
        let pred: Vec<u8> = truth
            .iter()
            .map(|&t| {
                if r.random::<f64>() < flip_rate {
                    r.random_range(1..SemanticClass::COUNT as u8)
                } else {
                    t
                }
            })
            .collect();
        let m = eval::confusion(&pred, &truth, SemanticClass::COUNT)?;
        Ok(MetricsReport::from_matrix(&m, &eval::named_classes())?.to_json())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generate_transform_score() {
        let s = Scene::generate("sim", 3, 40.0).unwrap();
        assert!(s.len() > 100);
        assert_eq!(s.positions().len(), 3 * s.len());
        let t = s.transform(1, 0.2).unwrap();
        assert!(t.len() < s.len());
        let perfect: serde_json::Value = serde_json::from_str(&s.score(0.0, 1).unwrap()).unwrap();
        assert_eq!(perfect["miou"], 1.0);
        let noisy: serde_json::Value = serde_json::from_str(&s.score(0.5, 1).unwrap()).unwrap();
        assert!(noisy["miou"].as_f64().unwrap() < 0.9);
        assert!(Scene::generate("mars", 1, 40.0).is_err());
    }
}
