//! Run and study configuration files.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use addtree::{TreeSpace, TreeSpec};
use addtree_bench::{builtin, config_digest, Algorithm, BoConfig, ExternalObjective, Objective, RegressionConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Where the objective comes from: a builtin, or a tree-spec file plus an
/// external command.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub objective: Option<String>,
    pub tree_spec: Option<PathBuf>,
    /// Program and arguments; reads `{"leaf", "values"}` JSON on stdin and
    /// prints one number.
    pub command: Vec<String>,
    pub known_optimum: Option<f64>,
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        match (&self.objective, &self.tree_spec) {
            (Some(_), Some(_)) => Err(CliError::User("set either `objective` or `tree_spec`, not both".into())),
            (None, None) => Err(CliError::User("no objective: set `objective` or `tree_spec`".into())),
            (None, Some(p)) => {
                if !p.is_file() {
                    return Err(CliError::User(format!("tree spec `{}` does not exist", p.display())));
                }
                if self.command.is_empty() {
                    return Err(CliError::User("`tree_spec` needs an external `command`".into()));
                }
                Ok(())
            }
            (Some(_), None) => {
                if !self.command.is_empty() {
                    return Err(CliError::User("`command` only applies with `tree_spec`".into()));
                }
                Ok(())
            }
        }
    }

    pub fn build(&self) -> Result<Box<dyn Objective>, CliError> {
        self.validate()?;
        if let Some(name) = &self.objective {
            return builtin(name).map_err(|e| CliError::User(e.to_string()));
        }
        let path = self.tree_spec.as_ref().expect("validated");
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::User(format!("reading tree spec `{}`: {e}", path.display())))?;
        let spec: TreeSpec<f64> =
            TreeSpec::parse(&text).map_err(|e| CliError::User(format!("tree spec `{}`: {e}", path.display())))?;
        let mut f = ExternalObjective::new(Arc::new(TreeSpace::new(spec)), &self.command[0], self.command[1..].to_vec());
        if let Some(v) = self.known_optimum {
            f = f.with_known_optimum(v);
        }
        Ok(Box::new(f))
    }
}

fn default_algorithms() -> Vec<Algorithm> {
    vec![Algorithm::AddTree]
}

fn default_seeds() -> Vec<u64> {
    (0..10).collect()
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(flatten)]
    pub source: ObjectiveConfig,
    #[serde(default = "default_algorithms")]
    pub algorithms: Vec<Algorithm>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// When set, `gamma_g` and `gamma_b` are replaced by rates calibrated
    /// against the reference regret `t^exponent` on a pilot run with the
    /// first seed.
    #[serde(default)]
    pub reference_exponent: Option<f64>,
    #[serde(default)]
    pub bo: BoConfig,
    /// Output location; not part of the digest.
    #[serde(default = "default_out_dir", skip_serializing)]
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            source: ObjectiveConfig::default(),
            algorithms: default_algorithms(),
            seeds: default_seeds(),
            reference_exponent: None,
            bo: BoConfig::default(),
            out_dir: default_out_dir(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::User(format!("reading config `{}`: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::User(format!("config `{}`: {e}", path.display())))
    }

    /// Fills defaults that depend on the objective: the bundled synthetic
    /// function starts from 4 random points.
    pub fn resolve(&mut self) {
        if self.bo.n_init.is_none() && self.source.objective.as_deref() == Some("jenatton") {
            self.bo.n_init = Some(4);
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.source.validate()?;
        self.bo.validate().map_err(CliError::User)?;
        if self.algorithms.is_empty() {
            return Err(CliError::User("no algorithms selected".into()));
        }
        if self.seeds.is_empty() {
            return Err(CliError::User("no seeds given".into()));
        }
        let mut s = self.seeds.clone();
        s.sort_unstable();
        s.dedup();
        if s.len() != self.seeds.len() {
            return Err(CliError::User("seeds must be distinct".into()));
        }
        if let Some(e) = self.reference_exponent {
            if !(e > 0.0 && e < 1.0) {
                return Err(CliError::User(format!("reference_exponent {e} must lie in (0, 1)")));
            }
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        config_digest(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    #[serde(flatten)]
    pub source: ObjectiveConfig,
    #[serde(default)]
    pub study: RegressionConfig,
    #[serde(default = "default_out_dir", skip_serializing)]
    pub out_dir: PathBuf,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            source: ObjectiveConfig::default(),
            study: RegressionConfig::default(),
            out_dir: default_out_dir(),
        }
    }
}

impl StudyConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::User(format!("reading config `{}`: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::User(format!("config `{}`: {e}", path.display())))
    }
}
