//! Flat INI-style experiment configuration.
//!
//! ```text
//! master_seed = 7
//! [federation]
//! clients = 10
//! blocks = 5
//! local.rule = fedbcgd
//! ```
//!
//! Keys are `section.key`; a `[section]` header prefixes the keys below it.
//! Unknown keys are errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::algorithms::{ControlScaling, LocalConfig, LocalRule, LocalSteps};
use crate::compression::{CompressionConfig, FloatUnit, KSelect};
use crate::error::{Error, Result};
use crate::problems::ObjectiveKind;

/// Every key the parser accepts.
pub const KNOWN_KEYS: &[&str] = &[
    "master_seed",
    "problem.kind",
    "problem.source",
    "problem.n",
    "problem.d",
    "problem.margin",
    "problem.data_seed",
    "problem.reg",
    "problem.reg_mode",
    "problem.csv_path",
    "problem.label_column",
    "problem.label_map",
    "federation.clients",
    "federation.sample",
    "federation.blocks",
    "federation.shared_size",
    "federation.rounds",
    "federation.bandwidth",
    "local.rule",
    "local.eta",
    "local.eta_decay",
    "local.steps",
    "local.epochs",
    "local.batch",
    "local.variance_reduction",
    "local.control_init",
    "server.lambda",
    "server.control_scaling",
    "compression.scheme",
    "compression.k",
    "compression.k_fraction",
    "compression.levels",
    "partition.scheme",
    "partition.rho",
    "partition.seed",
    "output.dir",
    "output.dump_frames",
    "output.record_time",
    "output.float_bits",
];

/// Parsed but unvalidated `key = value` pairs with their line numbers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawConfig {
    entries: BTreeMap<String, (String, usize)>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        let mut section = String::new();
        for (i, raw_line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw_line.split('#').next().unwrap_or("").trim();
            if line.is_empty() || line.starts_with(';') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| Error::Parse {
                    line: line_no,
                    message: format!("unterminated section header {line:?}"),
                })?;
                section = name.trim().to_ascii_lowercase();
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: line_no,
                message: format!("expected key = value, got {line:?}"),
            })?;
            let k = k.trim().to_ascii_lowercase();
            if k.is_empty() {
                return Err(Error::Parse {
                    line: line_no,
                    message: "empty key".into(),
                });
            }
            let key = if section.is_empty() || k.contains('.') {
                k
            } else {
                format!("{section}.{k}")
            };
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("unknown key {key:?}"),
                });
            }
            if entries.contains_key(&key) {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("duplicate key {key:?}"),
                });
            }
            entries.insert(key, (v.trim().to_string(), line_no));
        }
        Ok(Self { entries })
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    /// Overrides (or adds) a key; line 0 marks values that came from code.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.to_ascii_lowercase();
        if !KNOWN_KEYS.contains(&key.as_str()) {
            return Err(Error::UnknownAxis(key));
        }
        self.entries.insert(key, (value.to_string(), 0));
        Ok(())
    }

    pub fn remove(&mut self, key: &str) {
        self.entries.remove(key);
    }

    /// Serializes back to the flat `section.key = value` form.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, (v, _)) in &self.entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some((v, line)) => v.parse().map(Some).map_err(|_| Error::Parse {
                line: *line,
                message: format!("cannot parse {key} = {v:?}"),
            }),
        }
    }

    fn or<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.parsed(key)?.unwrap_or(default))
    }

    fn flag(&self, key: &str, default: bool) -> Result<bool> {
        match self.entries.get(key) {
            None => Ok(default),
            Some((v, line)) => match v.to_ascii_lowercase().as_str() {
                "true" | "yes" | "on" | "1" => Ok(true),
                "false" | "no" | "off" | "0" => Ok(false),
                _ => Err(Error::Parse {
                    line: *line,
                    message: format!("{key} expects a boolean, got {v:?}"),
                }),
            },
        }
    }

    fn choice<'a>(&'a self, key: &str, default: &'a str, allowed: &[&str]) -> Result<String> {
        let (v, line) = match self.entries.get(key) {
            None => return Ok(default.to_string()),
            Some((v, line)) => (v.to_ascii_lowercase(), *line),
        };
        if allowed.contains(&v.as_str()) {
            Ok(v)
        } else {
            Err(Error::Parse {
                line,
                message: format!("{key} must be one of {allowed:?}, got {v:?}"),
            })
        }
    }

    fn line_of(&self, key: &str) -> usize {
        self.entries.get(key).map_or(0, |(_, l)| *l)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic { n: usize, d: usize, margin: f64, seed: u64 },
    Csv {
        path: PathBuf,
        label_column: String,
        label_map: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RegMode {
    Absolute,
    /// Regularization is `reg · L` of the unregularized objective.
    Relative,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemConfig {
    pub kind: ObjectiveKind,
    pub source: DataSource,
    pub reg: f64,
    pub reg_mode: RegMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionScheme {
    Dirichlet,
    /// Shuffled equal split.
    Iid,
    /// Every client holds the whole dataset.
    Identical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControlInit {
    Zero,
    /// `c_i = ∇f_i(x^0)`, `c` their mean.
    Gradient,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub problem: ProblemConfig,
    pub clients: usize,
    pub sample: usize,
    pub blocks: usize,
    pub shared_size: usize,
    pub rounds: u32,
    pub bandwidth: Option<Vec<f64>>,
    pub local: LocalConfig,
    pub eta_decay: f64,
    pub control_init: ControlInit,
    pub lambda: f64,
    pub control_scaling: ControlScaling,
    pub compression: CompressionConfig,
    pub partition_scheme: PartitionScheme,
    pub rho: f64,
    pub partition_seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub dump_frames: bool,
    pub record_time: bool,
    pub float_unit: FloatUnit,
}

pub const DEFAULT_ETA_DECAY: f64 = 0.998;

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_raw(&RawConfig::parse(text)?)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_raw(&RawConfig::from_file(path)?)
    }

    pub fn from_raw(raw: &RawConfig) -> Result<Self> {
        let kind = match raw
            .choice("problem.kind", "logistic", &["logistic", "sigmoid", "sigmoid_erm", "quadratic"])?
            .as_str()
        {
            "logistic" => ObjectiveKind::Logistic,
            "quadratic" => ObjectiveKind::Quadratic,
            _ => ObjectiveKind::SigmoidErm,
        };
        let source = match raw.choice("problem.source", "synthetic", &["synthetic", "csv"])?.as_str() {
            "csv" => DataSource::Csv {
                path: raw
                    .get("problem.csv_path")
                    .map(PathBuf::from)
                    .ok_or_else(|| Error::Validation("problem.csv_path is required for csv data".into()))?,
                label_column: raw.get("problem.label_column").unwrap_or("label").to_string(),
                label_map: raw.get("problem.label_map").unwrap_or("").to_string(),
            },
            _ => DataSource::Synthetic {
                n: raw.or("problem.n", 1000)?,
                d: raw.or("problem.d", 10)?,
                margin: raw.or("problem.margin", 2.0)?,
                seed: raw.or("problem.data_seed", 0)?,
            },
        };
        let reg_mode = match raw.choice("problem.reg_mode", "relative", &["relative", "absolute"])?.as_str() {
            "absolute" => RegMode::Absolute,
            _ => RegMode::Relative,
        };
        let problem = ProblemConfig {
            kind,
            source,
            reg: raw.or("problem.reg", 1e-4)?,
            reg_mode,
        };

        let rule: LocalRule = match raw.get("local.rule") {
            None => LocalRule::FedBcgd,
            Some(v) => v.parse().map_err(|_| Error::Parse {
                line: raw.line_of("local.rule"),
                message: format!("unknown local rule {v:?}"),
            })?,
        };
        let steps = match (raw.parsed::<usize>("local.steps")?, raw.parsed::<usize>("local.epochs")?) {
            (Some(_), Some(_)) => {
                return Err(Error::Validation("set local.steps or local.epochs, not both".into()))
            }
            (_, Some(e)) => LocalSteps::Epochs(e),
            (t, None) => LocalSteps::Fixed(t.unwrap_or(10)),
        };
        let local = LocalConfig {
            eta: raw.or("local.eta", 0.1)?,
            steps,
            batch_size: raw.or("local.batch", 50)?,
            rule,
            variance_reduction: raw.flag("local.variance_reduction", true)?,
        };
        let control_init = match raw.choice("local.control_init", "zero", &["zero", "gradient"])?.as_str() {
            "gradient" => ControlInit::Gradient,
            _ => ControlInit::Zero,
        };
        let control_scaling = match raw
            .choice("server.control_scaling", "all", &["all", "participants"])?
            .as_str()
        {
            "participants" => ControlScaling::Participants,
            _ => ControlScaling::AllClients,
        };

        let k_select = match (raw.parsed::<usize>("compression.k")?, raw.parsed::<f64>("compression.k_fraction")?) {
            (Some(_), Some(_)) => {
                return Err(Error::Validation("set compression.k or compression.k_fraction, not both".into()))
            }
            (Some(k), None) => KSelect::Absolute(k),
            (None, f) => KSelect::Fraction(f.unwrap_or(0.05)),
        };
        let compression = match raw
            .choice("compression.scheme", "none", &["none", "topk", "randk", "qsgd"])?
            .as_str()
        {
            "topk" => CompressionConfig::TopK(k_select),
            "randk" => CompressionConfig::RandK(k_select),
            "qsgd" => CompressionConfig::Qsgd {
                levels: raw.or("compression.levels", 16)?,
            },
            _ => CompressionConfig::None,
        };
        let partition_scheme = match raw
            .choice("partition.scheme", "dirichlet", &["dirichlet", "iid", "identical"])?
            .as_str()
        {
            "iid" => PartitionScheme::Iid,
            "identical" => PartitionScheme::Identical,
            _ => PartitionScheme::Dirichlet,
        };
        let bandwidth = match raw.get("federation.bandwidth") {
            None => None,
            Some(v) => Some(
                v.split(',')
                    .map(|t| t.trim().parse::<f64>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| Error::Parse {
                        line: raw.line_of("federation.bandwidth"),
                        message: format!("bad bandwidth list {v:?}"),
                    })?,
            ),
        };
        let clients = raw.or("federation.clients", 10)?;
        let float_unit = match raw.or::<u32>("output.float_bits", 64)? {
            64 => FloatUnit::Bits64,
            32 => FloatUnit::Bits32,
            b => {
                return Err(Error::Validation(format!("output.float_bits must be 32 or 64, got {b}")))
            }
        };

        let cfg = Self {
            master_seed: raw.or("master_seed", 0)?,
            problem,
            clients,
            sample: raw.or("federation.sample", clients)?,
            blocks: raw.or("federation.blocks", 1)?,
            shared_size: raw.or("federation.shared_size", 0)?,
            rounds: raw.or("federation.rounds", 50)?,
            bandwidth,
            local,
            eta_decay: raw.or("local.eta_decay", DEFAULT_ETA_DECAY)?,
            control_init,
            lambda: raw.or("server.lambda", rule.default_lambda())?,
            control_scaling,
            compression,
            partition_scheme,
            rho: raw.or("partition.rho", 0.1)?,
            partition_seed: raw.parsed("partition.seed")?,
            out_dir: raw.get("output.dir").map(PathBuf::from),
            dump_frames: raw.flag("output.dump_frames", false)?,
            record_time: raw.flag("output.record_time", false)?,
            float_unit,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks every cross-field constraint; dimension checks against CSV
    /// data happen once the file is loaded.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.clients == 0 {
            return bad("federation.clients must be >= 1".into());
        }
        if self.sample == 0 || self.sample > self.clients {
            return bad(format!(
                "federation.sample must be in 1..={} (S <= M), got {}",
                self.clients, self.sample
            ));
        }
        if self.blocks == 0 {
            return bad("federation.blocks must be >= 1".into());
        }
        if !self.sample.is_multiple_of(self.blocks) {
            return bad(format!(
                "S mod N must be 0: S = {} is not divisible by N = {}",
                self.sample, self.blocks
            ));
        }
        if let DataSource::Synthetic { n, d, margin, .. } = self.problem.source {
            if n < 2 || d == 0 {
                return bad(format!("synthetic data needs problem.n >= 2 and problem.d >= 1, got n={n}, d={d}"));
            }
            if self.clients > n {
                return bad(format!("{} clients need at least as many samples, have {n}", self.clients));
            }
            if self.shared_size + self.blocks > d {
                return bad(format!(
                    "d = {d} cannot hold {} blocks plus a shared block of {}",
                    self.blocks, self.shared_size
                ));
            }
            if !margin.is_finite() {
                return bad("problem.margin must be finite".into());
            }
        }
        if !(self.problem.reg >= 0.0 && self.problem.reg.is_finite()) {
            return bad(format!("problem.reg must be >= 0, got {}", self.problem.reg));
        }
        self.local.validate().map_err(|e| Error::Validation(e.to_string()))?;
        if !(self.eta_decay > 0.0 && self.eta_decay <= 1.0) {
            return bad(format!("local.eta_decay must be in (0, 1], got {}", self.eta_decay));
        }
        if !(0.0..1.0).contains(&self.lambda) {
            return bad(format!("server.lambda must be in [0, 1), got {}", self.lambda));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return bad(format!("partition.rho must be > 0, got {}", self.rho));
        }
        match self.compression {
            CompressionConfig::TopK(k) | CompressionConfig::RandK(k) => match k {
                KSelect::Absolute(0) => return bad("compression.k must be >= 1".into()),
                KSelect::Fraction(f) if !(f > 0.0 && f <= 1.0) => {
                    return bad(format!("compression.k_fraction must be in (0, 1], got {f}"))
                }
                _ => {}
            },
            CompressionConfig::Qsgd { levels: 0 } => return bad("compression.levels must be >= 1".into()),
            _ => {}
        }
        if let Some(bw) = &self.bandwidth {
            if bw.len() != self.clients {
                return bad(format!(
                    "federation.bandwidth lists {} values for {} clients",
                    bw.len(),
                    self.clients
                ));
            }
            if bw.iter().any(|b| !(b.is_finite() && *b > 0.0)) {
                return bad("federation.bandwidth values must be positive".into());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "\
master_seed = 3
[problem]
kind = logistic
[federation]
clients = 10
sample = 10
blocks = 5
rounds = 50
";

    #[test]
    fn minimal_config_gets_defaults() {
        let c = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(c.master_seed, 3);
        assert_eq!((c.clients, c.sample, c.blocks, c.rounds), (10, 10, 5, 50));
        assert_eq!(c.eta_decay, 0.998);
        assert_eq!(c.local.rule, LocalRule::FedBcgd);
        assert_eq!(c.lambda, 0.8);
        assert_eq!(c.problem.source, DataSource::Synthetic { n: 1000, d: 10, margin: 2.0, seed: 0 });
    }

    #[test]
    fn lambda_default_follows_rule() {
        let c = ExperimentConfig::parse(&format!("{MINIMAL}[local]\nrule = fedbcgd_plus\n")).unwrap();
        assert_eq!(c.lambda, 0.0);
        let c = ExperimentConfig::parse(&format!("{MINIMAL}server.lambda = 0.5\n")).unwrap();
        assert_eq!(c.lambda, 0.5);
    }

    #[test]
    fn indivisible_sample_names_constraint() {
        let text = MINIMAL.replace("blocks = 5", "blocks = 3");
        let err = ExperimentConfig::parse(&text).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        assert!(err.to_string().contains("S mod N"), "{err}");
    }

    #[test]
    fn parse_errors_carry_lines() {
        let err = RawConfig::parse("[federation]\nclients = 3\nbogus = 1\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let err = ExperimentConfig::parse("[federation]\nclients = three\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = RawConfig::parse("no equals sign\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        let err = RawConfig::parse("a.b = 1\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn dotted_keys_and_comments() {
        let c = ExperimentConfig::parse(
            "# comment\nfederation.clients = 4 # trailing\nfederation.blocks = 2\nlocal.epochs = 2\n",
        )
        .unwrap();
        assert_eq!(c.clients, 4);
        assert_eq!(c.sample, 4);
        assert_eq!(c.local.steps, LocalSteps::Epochs(2));
    }

    #[test]
    fn validation_catches_ranges() {
        for bad in [
            "federation.sample = 11",
            "server.lambda = 1.0",
            "partition.rho = 0",
            "local.eta_decay = 0",
            "compression.scheme = qsgd\ncompression.levels = 0",
            "federation.shared_size = 6",
            "federation.bandwidth = 1,2",
        ] {
            let err = ExperimentConfig::parse(&format!("{MINIMAL}{bad}\n")).unwrap_err();
            assert!(err.is_config_error(), "{bad}: {err}");
        }
    }

    #[test]
    fn raw_round_trip() {
        let raw = RawConfig::parse(MINIMAL).unwrap();
        let again = RawConfig::parse(&raw.to_text()).unwrap();
        assert_eq!(raw.to_text(), again.to_text());
    }
}
