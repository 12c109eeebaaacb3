//! Experiment configuration, JSON on disk, and the reproducibility manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::TransferConfig;
use crate::denoisers::TrainConfig;
use crate::diffusion::{make_schedule, NoiseSchedule};
use crate::error::{Error, Result};
use crate::guidance::{GuidanceConfig, GuidanceMode};
use crate::numerics::Shape;
use crate::style::PyramidConfig;

/// Environment variable that relocates relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "STYLEGUIDE_OUT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    /// `N(template, sigma0² I)` with the exact denoiser.
    Gaussian,
    /// Equal-weight mixture over four distinct templates, exact denoiser.
    Gmm,
    /// The Gaussian law, denoised by a trained affine model read from `model_path`.
    Affine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub kind: DataKind,
    /// Template for the Gaussian mean (unused by `gmm`).
    pub template: String,
    pub sigma0: f64,
    pub seed: u64,
    pub model_path: Option<PathBuf>,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            kind: DataKind::Gaussian,
            template: "smooth".into(),
            sigma0: 0.1,
            seed: 17,
            model_path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            steps: 100,
            beta_start: 0.001,
            beta_end: 0.2,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

/// Where the supervised style reference comes from: a template name, or a
/// `.ppm` file path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StyleSpec {
    pub source: String,
    pub seed: u64,
}

impl Default for StyleSpec {
    fn default() -> Self {
        Self {
            source: "checker".into(),
            seed: 5,
        }
    }
}

impl StyleSpec {
    pub fn is_file(&self) -> bool {
        self.source.ends_with(".ppm")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub s0_grid: Vec<f64>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            s0_grid: vec![
                0.0, 1.0, 3.0, 10.0, 30.0, 100.0, 300.0, 1000.0, 3000.0, 10000.0, 30000.0, 100000.0,
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSpec {
    /// Coarse grid each setting picks its base scale from.
    pub s0_grid: Vec<f64>,
    /// Seeds used only for picking scales and level weights.
    pub tuning_seeds: Vec<u64>,
    /// Candidate level weights for setting #0; the best on the tuning
    /// seeds wins. Empty keeps `guidance.weights`.
    pub weight_candidates: Vec<Vec<f64>>,
}

impl Default for AblationSpec {
    fn default() -> Self {
        Self {
            // doubling steps: the MSE setting's optimum sits just below its divergence cliff
            s0_grid: (0..14).map(|k| 10.0 * 2f64.powi(k)).collect(),
            tuning_seeds: vec![1001, 1002, 1003, 1004],
            weight_candidates: vec![
                vec![1.0, 1.0, 1.0, 1.0],
                vec![1.0, 2.0, 4.0, 8.0],
                vec![8.0, 4.0, 2.0, 1.0],
                vec![1.0, 1.0, 2.0, 4.0],
            ],
        }
    }
}

/// Base scales of the two self-guided modes in the diversity study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiversitySpec {
    pub synonymous_s0: f64,
    pub contrastive_s0: f64,
    /// Sample from the four-template mixture instead of `data`, so an
    /// unguided batch actually spans several styles.
    pub style_population: bool,
}

impl Default for DiversitySpec {
    fn default() -> Self {
        Self {
            synonymous_s0: 100.0,
            contrastive_s0: 1000.0,
            style_population: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSpec,
    pub schedule: ScheduleSpec,
    pub image: Shape,
    pub batch_size: usize,
    pub guidance: GuidanceConfig,
    pub pyramid: PyramidConfig,
    pub style: StyleSpec,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Guidance is applied for `t >= guide_from_step` only.
    pub guide_from_step: usize,
    pub sweep: SweepSpec,
    pub ablation: AblationSpec,
    pub diversity: DiversitySpec,
    pub transfer: TransferConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataSpec::default(),
            schedule: ScheduleSpec::default(),
            image: Shape {
                height: 16,
                width: 16,
                channels: 3,
            },
            batch_size: 8,
            guidance: GuidanceConfig {
                mode: GuidanceMode::Supervised,
                s0: 3000.0,
                ..GuidanceConfig::default()
            },
            pyramid: PyramidConfig::default(),
            style: StyleSpec::default(),
            seeds: (1..=20).collect(),
            output_dir: PathBuf::from("out"),
            guide_from_step: 0,
            sweep: SweepSpec::default(),
            ablation: AblationSpec::default(),
            diversity: DiversitySpec::default(),
            transfer: TransferConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        Shape::new(self.image.height, self.image.width, self.image.channels)?;
        PyramidConfig::new(self.pyramid.levels, self.pyramid.epsilon_var)?;
        self.pyramid.check_shape(self.image)?;
        self.guidance.validate()?;
        self.transfer.validate()?;
        if self.guidance.weights.len() != self.pyramid.levels {
            return Err(Error::Config(format!(
                "{} guidance weights for {} pyramid levels",
                self.guidance.weights.len(),
                self.pyramid.levels
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.guidance.mode.is_self_guided() && self.batch_size < 2 {
            return Err(Error::Config(format!(
                "{} guidance needs batch size >= 2 (batch variance / mixing), got {}",
                self.guidance.mode, self.batch_size
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if !(self.data.sigma0 > 0.0) {
            return Err(Error::Config("data.sigma0 must be positive".into()));
        }
        if self.data.kind == DataKind::Affine {
            match &self.data.model_path {
                None => return Err(Error::Config("affine data needs data.model_path".into())),
                Some(p) if !p.exists() => {
                    return Err(Error::Config(format!(
                        "model file {} does not exist",
                        p.display()
                    )))
                }
                _ => {}
            }
        }
        if self.style.is_file() && !Path::new(&self.style.source).exists() {
            return Err(Error::Config(format!(
                "style file {} does not exist",
                self.style.source
            )));
        }
        if self.sweep.s0_grid.is_empty() || self.ablation.s0_grid.is_empty() {
            return Err(Error::Config("s0 grids must be non-empty".into()));
        }
        self.schedule.build()?;
        Ok(())
    }

    /// Output directory after applying the environment override.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.output_dir.is_relative() => Path::new(&root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Reads a config file, or the config embedded in a manifest.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let value = match value.get("manifest_version") {
            Some(_) => value
                .get("config")
                .cloned()
                .ok_or_else(|| Error::Config("manifest has no config".into()))?,
            None => value,
        };
        serde_json::from_value(value).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub manifest_version: u32,
    pub command: String,
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    /// File name (relative to the output directory) → sha256 hex.
    pub artifacts: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Hashes `artifacts` (relative to `dir`) and writes `dir/manifest.json`.
pub fn write_manifest(
    dir: &Path,
    command: &str,
    config: &ExperimentConfig,
    artifacts: &[String],
) -> Result<Manifest> {
    let mut hashes = BTreeMap::new();
    for name in artifacts {
        hashes.insert(name.clone(), sha256_file(&dir.join(name))?);
    }
    let manifest = Manifest {
        manifest_version: 1,
        command: command.to_string(),
        config: config.clone(),
        seeds: config.seeds.clone(),
        artifacts: hashes,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_validates_and_round_trips() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let back: ExperimentConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_unknown_keys() {
        let mut v: serde_json::Value =
            serde_json::from_str(&ExperimentConfig::default().to_json()).unwrap();
        v["guidance"]["bogus"] = serde_json::json!(1);
        assert!(serde_json::from_value::<ExperimentConfig>(v.clone()).is_err());
        let mut w: serde_json::Value =
            serde_json::from_str(&ExperimentConfig::default().to_json()).unwrap();
        w["extra"] = serde_json::json!(true);
        assert!(serde_json::from_value::<ExperimentConfig>(w).is_err());
    }

    #[test]
    fn validation_failures() {
        let mut c = ExperimentConfig::default();
        c.image = Shape {
            height: 4,
            width: 4,
            channels: 3,
        };
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.guidance.mode = GuidanceMode::Synonymous;
        c.batch_size = 1;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ExperimentConfig::default();
        c.data.kind = DataKind::Affine;
        c.data.model_path = Some("/definitely/not/here.txt".into());
        assert!(c.validate().is_err());
    }

    #[test]
    fn manifest_loads_as_config() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.csv"), "x\n1\n").unwrap();
        let c = ExperimentConfig {
            batch_size: 3,
            ..ExperimentConfig::default()
        };
        let m = write_manifest(dir.path(), "sample", &c, &["a.csv".to_string()]).unwrap();
        assert_eq!(m.artifacts["a.csv"].len(), 64);
        let back = ExperimentConfig::load(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(back, c);
    }
}
