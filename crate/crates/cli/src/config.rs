use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};

use kinecal::estimator::{JacobianMode, RobustLoss, SolveOptions};
use kinecal::kinecore::Perturbation;
use kinecal::measurements::{parse_kinds, Kind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Stratified random split.
    #[default]
    Random,
    /// Lower part of the range of one joint trains, the rest tests.
    Workspace,
}

impl std::str::FromStr for SplitMode {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "workspace" => Ok(Self::Workspace),
            _ => bail!("split mode must be `random` or `workspace`, got `{s}`"),
        }
    }
}

fn default_split() -> f64 {
    0.8
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn default_reference() -> Perturbation {
    Perturbation {
        length: 5e-3,
        angle: 0.02,
    }
}

fn default_parallel() -> bool {
    true
}

/// Everything a run reads: inputs, solver settings, split and outputs.
/// Loaded from TOML with `--config`; command-line flags override fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub robot: Option<PathBuf>,
    /// Datasets are concatenated in order.
    #[serde(default)]
    pub dataset: Vec<PathBuf>,
    /// Ground-truth robot, enabling parameter-error reporting.
    #[serde(default)]
    pub truth: Option<PathBuf>,
    /// Free-parameter patterns replacing the robot's own mask.
    #[serde(default)]
    pub mask: Option<Vec<String>>,
    #[serde(default)]
    pub solve: SolveOptions,
    /// Training fraction; 1 keeps every record for training.
    #[serde(default = "default_split")]
    pub split: f64,
    #[serde(default)]
    pub split_mode: SplitMode,
    /// Joint ordering records in workspace mode.
    #[serde(default)]
    pub split_joint: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Kinds entering the run; all kinds in the data when absent.
    #[serde(default)]
    pub kinds: Option<BTreeSet<Kind>>,
    /// Owners whose parameters are projected out before campaign
    /// observability; every non-DH parameter when absent.
    #[serde(default)]
    pub nuisance: Option<Vec<String>>,
    /// Magnitudes normalizing parameter errors.
    #[serde(default = "default_reference")]
    pub reference: Perturbation,
    /// Records per campaign; the smallest per-kind training count when
    /// absent.
    #[serde(default)]
    pub campaign_total: Option<usize>,
    #[serde(default = "default_parallel")]
    pub parallel: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            robot: None,
            dataset: Vec::new(),
            truth: None,
            mask: None,
            solve: SolveOptions::default(),
            split: default_split(),
            split_mode: SplitMode::default(),
            split_joint: 0,
            seed: 0,
            out: default_out(),
            kinds: None,
            nuisance: None,
            reference: default_reference(),
            campaign_total: None,
            parallel: default_parallel(),
        }
    }
}

impl RunConfig {
    /// Reads a TOML config; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: Self =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        cfg.robot.iter_mut().for_each(resolve);
        cfg.truth.iter_mut().for_each(resolve);
        cfg.dataset.iter_mut().for_each(resolve);
        resolve(&mut cfg.out);
        Ok(cfg)
    }

    /// Checks that referenced inputs exist and settings are usable.
    pub fn validate(&self) -> Result<()> {
        let robot = self.robot.as_ref().context("no robot given (--robot)")?;
        ensure!(!self.dataset.is_empty(), "no dataset given (--dataset)");
        for p in std::iter::once(robot)
            .chain(&self.dataset)
            .chain(self.truth.iter())
        {
            ensure!(p.exists(), "input file {} does not exist", p.display());
        }
        if let Some(k) = &self.kinds {
            ensure!(!k.is_empty(), "kind filter must not be empty");
        }
        ensure!(
            self.split > 0.0 && self.split <= 1.0,
            "split fraction must lie in (0, 1], got {}",
            self.split
        );
        self.solve.validate()?;
        Ok(())
    }
}

pub fn parse_kind_list(s: &str) -> Result<BTreeSet<Kind>> {
    Ok(parse_kinds(s)?)
}

pub fn parse_jacobian(s: &str) -> Result<JacobianMode> {
    match s {
        "forward" => Ok(JacobianMode::ForwardDiff),
        "central" => Ok(JacobianMode::CentralDiff),
        _ => bail!("jacobian mode must be `forward` or `central`, got `{s}`"),
    }
}

/// `none` or `huber:DELTA`.
pub fn parse_robust(s: &str) -> Result<RobustLoss> {
    if s == "none" {
        return Ok(RobustLoss::None);
    }
    let delta = s
        .strip_prefix("huber:")
        .with_context(|| format!("robust loss must be `none` or `huber:DELTA`, got `{s}`"))?;
    let delta: f64 = delta
        .parse()
        .with_context(|| format!("invalid huber delta `{delta}`"))?;
    ensure!(delta > 0.0, "huber delta must be > 0, got {delta}");
    Ok(RobustLoss::Huber { delta })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_flag_values() {
        assert_eq!(
            parse_jacobian("central").unwrap(),
            JacobianMode::CentralDiff
        );
        assert!(parse_jacobian("backward").is_err());
        assert_eq!(
            parse_robust("huber:2.5").unwrap(),
            RobustLoss::Huber { delta: 2.5 }
        );
        assert_eq!(parse_robust("none").unwrap(), RobustLoss::None);
        assert!(parse_robust("huber:-1").is_err());
        assert!(parse_robust("cauchy:1").is_err());
        assert_eq!(
            parse_kind_list("sc,so").unwrap(),
            [Kind::SelfContact, Kind::SelfObservation].into()
        );
        assert_eq!(
            "workspace".parse::<SplitMode>().unwrap(),
            SplitMode::Workspace
        );
    }

    #[test]
    fn config_paths_resolve_against_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            "robot = \"r.json\"\ndataset = [\"d.jsonl\"]\nkinds = [\"self_contact\"]\n\
             split_mode = \"workspace\"\n[solve]\nmax_iterations = 5\n",
        )
        .unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.robot.unwrap(), dir.path().join("r.json"));
        assert_eq!(cfg.dataset[0], dir.path().join("d.jsonl"));
        assert_eq!(cfg.out, dir.path().join("out"));
        assert_eq!(cfg.solve.max_iterations, 5);
        assert_eq!(cfg.split_mode, SplitMode::Workspace);
        assert_eq!(cfg.kinds.unwrap(), [Kind::SelfContact].into());
    }

    #[test]
    fn unknown_config_field_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "splt = 0.5\n").unwrap();
        let err = format!("{:#}", RunConfig::load(&path).unwrap_err());
        assert!(err.contains("splt"), "{err}");
    }

    #[test]
    fn validation_rejects_missing_inputs() {
        let cfg = RunConfig {
            robot: Some("/nonexistent/robot.json".into()),
            dataset: vec!["/nonexistent/d.jsonl".into()],
            ..RunConfig::default()
        };
        assert!(cfg
            .validate()
            .unwrap_err()
            .to_string()
            .contains("does not exist"));
        assert!(RunConfig::default().validate().is_err());
    }
}
