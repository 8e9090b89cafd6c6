//! TOML run configuration.
//!
//! Every section is optional and falls back to its defaults. Unknown keys,
//! wrongly typed values and out-of-range values are reported with their
//! dotted key path.

use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::ensemble::EnsembleConfig;
use crate::error::{Error, Result};
use crate::io::read_text;
use crate::losses::LossWeights;
use crate::metrics::{Method, RunSettings};
use crate::solver::SolverConfig;
use crate::synthetic::GenerateSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub methods: Vec<Method>,
    /// Empty compares methods on the stored sparse maps; otherwise every
    /// scene is resampled at each density.
    pub densities: Vec<f64>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            methods: vec![
                Method::Monitored,
                Method::Mean,
                Method::Median,
                Method::Random,
                Method::NoBeta,
            ],
            densities: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub method: Method,
    pub ensemble: EnsembleConfig,
    pub loss: LossWeights,
    pub solver: SolverConfig,
    pub generate: GenerateSpec,
    pub ablate: AblateConfig,
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut table: Table = text.parse().map_err(|e: toml::de::Error| Error::Config {
            key: String::new(),
            message: e.message().to_string(),
        })?;
        let defaults = Value::try_from(RunConfig::default())
            .map_err(|e| Error::invalid(format!("default config does not serialize: {e}")))?;
        let Value::Table(defaults) = defaults else {
            unreachable!("a struct serializes to a table");
        };
        check_table(&mut table, &defaults, "")?;
        let config = match RunConfig::deserialize(Value::Table(table.clone())) {
            Ok(c) => c,
            Err(e) => {
                let mut leaves = Vec::new();
                collect_leaves(&table, "", &mut leaves);
                let key = leaves
                    .into_iter()
                    .find(|(key, value)| {
                        let mut probe = defaults.clone();
                        set_path(&mut probe, key, value.clone());
                        RunConfig::deserialize(Value::Table(probe)).is_err()
                    })
                    .map(|(k, _)| k)
                    .unwrap_or_default();
                return Err(Error::Config {
                    key,
                    message: e.message().to_string(),
                });
            }
        };
        config.validate()?;
        Ok(config)
    }

    /// Serializes every field; [`RunConfig::parse`] reads it back unchanged.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::invalid(format!("config does not serialize: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.ensemble.validate()?;
        self.loss.validate()?;
        self.solver.validate()?;
        self.generate.scene.validate()?;
        let density = self.generate.density;
        if !(density > 0.0 && density <= 1.0) {
            return Err(Error::Config {
                key: "generate.density".into(),
                message: format!("must lie in (0, 1], got {density}"),
            });
        }
        if self.ablate.methods.is_empty() {
            return Err(Error::Config {
                key: "ablate.methods".into(),
                message: "at least one method is required".into(),
            });
        }
        for (i, &d) in self.ablate.densities.iter().enumerate() {
            if !(d > 0.0 && d <= 1.0) || self.ablate.densities[..i].contains(&d) {
                return Err(Error::Config {
                    key: "ablate.densities".into(),
                    message: format!("density {d} is outside (0, 1] or repeated"),
                });
            }
        }
        Ok(())
    }

    pub fn run_settings(&self) -> RunSettings {
        RunSettings {
            ensemble: self.ensemble,
            weights: self.loss,
            solver: self.solver,
            seed: self.seed,
        }
    }
}

fn join(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    }
}

fn type_error(key: String, expected: &Value, found: &Value) -> Error {
    Error::Config {
        key,
        message: format!("expected {}, found {}", expected.type_str(), found.type_str()),
    }
}

/// Integer literals become floats where the default is a float.
fn check_value(value: &mut Value, default: &Value, key: String) -> Result<()> {
    match (&mut *value, default) {
        (Value::Table(t), Value::Table(d)) => check_table(t, d, &key),
        (Value::Integer(i), Value::Float(_)) => {
            *value = Value::Float(*i as f64);
            Ok(())
        }
        (Value::Array(items), Value::Array(d)) => {
            if let Some(proto) = d.first() {
                for (i, item) in items.iter_mut().enumerate() {
                    check_value(item, proto, format!("{key}[{i}]"))?;
                }
            }
            Ok(())
        }
        (v, d) if std::mem::discriminant(&*v) == std::mem::discriminant(d) => Ok(()),
        (v, d) => Err(type_error(key, d, v)),
    }
}

fn check_table(table: &mut Table, defaults: &Table, prefix: &str) -> Result<()> {
    for (key, value) in table.iter_mut() {
        let path = join(prefix, key);
        let Some(default) = defaults.get(key) else {
            return Err(Error::Config {
                key: path,
                message: "unknown key".into(),
            });
        };
        check_value(value, default, path)?;
    }
    Ok(())
}

fn collect_leaves(table: &Table, prefix: &str, out: &mut Vec<(String, Value)>) {
    for (key, value) in table {
        let path = join(prefix, key);
        match value {
            Value::Table(t) => collect_leaves(t, &path, out),
            v => out.push((path, v.clone())),
        }
    }
}

fn set_path(table: &mut Table, path: &str, value: Value) {
    match path.split_once('.') {
        Some((head, rest)) => {
            if let Some(Value::Table(t)) = table.get_mut(head) {
                set_path(t, rest, value);
            }
        }
        None => {
            table.insert(path.to_string(), value);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::InitMode;
    use crate::synthetic::TeacherSuite;

    fn key_of(text: &str) -> String {
        match RunConfig::parse(text) {
            Err(Error::Config { key, .. }) => key,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn empty_is_default() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn overrides_and_coercion() {
        let c = RunConfig::parse(
            "seed = 7\nmethod = \"median\"\n[ensemble]\nlambda = 2\n[solver]\nmax_iters = 10\ninit_mode = \"distilled\"\n\
             [generate]\nsuite = \"disjoint\"\n[generate.scene]\nwidth = 32\n[ablate]\nmethods = [\"monitored\", \"single_teacher_2\"]\ndensities = [1, 0.5]\n",
        )
        .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.method, Method::Median);
        assert_eq!(c.ensemble.lambda, 2.0);
        assert_eq!(c.solver.max_iters, 10);
        assert_eq!(c.solver.init_mode, InitMode::Distilled);
        assert_eq!(c.generate.suite, TeacherSuite::Disjoint);
        assert_eq!(c.generate.scene.width, 32);
        assert_eq!(c.ablate.methods, vec![Method::Monitored, Method::SingleTeacher(2)]);
        assert_eq!(c.ablate.densities, vec![1.0, 0.5]);
    }

    #[test]
    fn toml_round_trip() {
        let mut c = RunConfig::default();
        c.seed = 11;
        c.method = Method::SingleTeacher(2);
        c.ensemble.lambda = 0.3;
        c.solver.step_size = 2e-3;
        c.ablate.densities = vec![0.01, 0.001];
        assert_eq!(RunConfig::parse(&c.to_toml().unwrap()).unwrap(), c);
    }

    #[test]
    fn errors_name_the_key() {
        assert_eq!(key_of("[solver]\nmax_iter = 3\n"), "solver.max_iter");
        assert_eq!(key_of("colour = 1\n"), "colour");
        assert_eq!(key_of("[loss]\nw_md = \"heavy\"\n"), "loss.w_md");
        assert_eq!(key_of("[loss]\nw_sm = -1.0\n"), "loss.w_sm");
        assert_eq!(key_of("[ensemble]\nalpha = 0\n"), "ensemble.alpha");
        assert_eq!(key_of("[solver]\ninit_mode = \"zeros\"\n"), "solver.init_mode");
        assert_eq!(key_of("method = \"best\"\n"), "method");
        assert_eq!(key_of("[generate]\ndensity = 2.0\n"), "generate.density");
        assert_eq!(key_of("[ablate]\ndensities = [\"a\"]\n"), "ablate.densities");
        assert_eq!(key_of("[ablate]\nmethods = [\"mean\", 3]\n"), "ablate.methods[1]");
        assert_eq!(key_of("[ablate]\ndensities = [0.1, 0.1]\n"), "ablate.densities");
        assert_eq!(key_of("solver = 3\n"), "solver");
        assert_eq!(key_of("[solver\n"), "");
    }
}
