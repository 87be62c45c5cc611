use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::ShapeSpec;
use crate::mesh::{DEFAULT_REFINE_ITERS, DEFAULT_THRESHOLD};
use crate::train::{ModelConfig, TrainConfig};

/// Everything a command can be configured with. Unknown keys anywhere are
/// rejected; missing sections take their defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Analytic shapes for data generation, training and evaluation.
    pub shapes: Vec<ShapeSpec>,
    pub data: DataConfig,
    pub mesh: MeshConfig,
    pub eval: EvalConfig,
    pub generate: GenerateConfig,
    pub bench: BenchConfig,
}

/// Train from files instead of an analytic shape.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub points: Option<PathBuf>,
    /// Labelled `x y z occ` queries.
    pub queries: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeshConfig {
    pub resolution: usize,
    pub threshold: f64,
    pub refine_iters: usize,
    /// Fit the input cloud's bounding box into the unit cube before
    /// encoding; the mesh is mapped back afterwards.
    pub normalize: bool,
    pub padding: f64,
}

impl Default for MeshConfig {
    fn default() -> Self {
        MeshConfig {
            resolution: 64,
            threshold: DEFAULT_THRESHOLD,
            refine_iters: DEFAULT_REFINE_ITERS,
            normalize: false,
            padding: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Surface samples per mesh.
    pub samples: usize,
    /// Uniform samples for IoU.
    pub iou_samples: usize,
    pub seed: u64,
    pub fscore_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            samples: 10_000,
            iou_samples: 10_000,
            seed: 0,
            fscore_threshold: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub points: usize,
    pub queries: usize,
    pub noise_sigma: f64,
    /// Shape `i` uses seed `seed + i`.
    pub seed: u64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            points: 3000,
            queries: 10_000,
            noise_sigma: 0.005,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub repeats: usize,
    pub queries: usize,
    pub mc_resolution: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            repeats: 3,
            queries: 10_000,
            mc_resolution: 64,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.shapes.iter().try_for_each(ShapeSpec::validate)?;
        let m = &self.mesh;
        if m.resolution < 8 {
            return Err(Error::Config(format!("mesh resolution must be at least 8, got {}", m.resolution)));
        }
        if !(m.threshold > 0.0 && m.threshold < 1.0) {
            return Err(Error::Config(format!("threshold must be in (0, 1), got {}", m.threshold)));
        }
        if !(m.padding >= 0.0 && m.padding < 0.5) {
            return Err(Error::Config(format!("padding must be in [0, 0.5), got {}", m.padding)));
        }
        let e = &self.eval;
        if e.samples == 0 || !(e.fscore_threshold > 0.0) {
            return Err(Error::Config("eval needs samples >= 1 and a positive F-score threshold".into()));
        }
        let g = &self.generate;
        if g.points == 0 || !(g.noise_sigma >= 0.0) {
            return Err(Error::Config("generate needs points >= 1 and noise_sigma >= 0".into()));
        }
        let b = &self.bench;
        if b.repeats == 0 || b.queries == 0 || b.mc_resolution < 2 {
            return Err(Error::Config("bench needs repeats, queries >= 1 and mc_resolution >= 2".into()));
        }
        Ok(())
    }

    /// The single shape a command operates on.
    pub fn single_shape(&self) -> Result<&ShapeSpec> {
        match self.shapes.as_slice() {
            [s] => Ok(s),
            [] => Err(Error::Config("no shape given; add one under \"shapes\"".into())),
            _ => Err(Error::Config(format!("expected one shape, found {}", self.shapes.len()))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"train": {"stpes": 3}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"colour": 1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"model": {"encoder": {"mode": "volume", "depth": 3}}}"#).is_ok());
    }

    #[test]
    fn round_trip() {
        let mut c = RunConfig::default();
        c.shapes.push(ShapeSpec::sphere([0.5; 3], 0.3));
        c.model.encoder.alternation = Some(2);
        let back = RunConfig::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
