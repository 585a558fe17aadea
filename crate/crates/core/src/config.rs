//! Flat key-value experiment configuration.
//!
//! Config files are UTF-8 text, one `section.key = value` assignment per
//! line. `#` starts a comment line; blank lines are skipped. Lists
//! (seeds, per-class counts, sweep values) are comma-separated. Unknown
//! keys are rejected by name rather than silently ignored.
//!
//! The optional root key `preset = desk` starts from the small-scale
//! preset (reduced per-class counts, 50 epochs) before any other key is
//! applied, regardless of where the line appears in the file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::{BaselineMethod, BaselineSpec};
use crate::cmo::CmoParams;
use crate::error::{Error, Result};
use crate::nnr::{NnrConfig, NnrMode};
use crate::synth::{MeanMode, SynthConfig};

/// The training objective. Composite names stack neighbor reweighting
/// and/or constrained group reweighting on the base learner; the rest are
/// standalone robust baselines. The `_kl` / `_chi` suffix picks the
/// divergence order (k = 1 or k = 2) anchoring the group weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum TrainMethod {
    Erm,
    ErmNnr,
    ErmCmoKl,
    ErmCmoChi,
    ErmNnrCmoKl,
    ErmNnrCmoChi,
    Baseline(BaselineMethod),
}

impl TrainMethod {
    pub fn name(self) -> &'static str {
        match self {
            Self::Erm => "erm",
            Self::ErmNnr => "erm_nnr",
            Self::ErmCmoKl => "erm_cmo_kl",
            Self::ErmCmoChi => "erm_cmo_chi",
            Self::ErmNnrCmoKl => "erm_nnr_cmo_kl",
            Self::ErmNnrCmoChi => "erm_nnr_cmo_chi",
            Self::Baseline(b) => b.name(),
        }
    }

    /// Whether the method maintains ascending group weights q.
    pub fn uses_cmo(self) -> bool {
        matches!(
            self,
            Self::ErmCmoKl | Self::ErmCmoChi | Self::ErmNnrCmoKl | Self::ErmNnrCmoChi
        )
    }

    /// Whether the method applies neighbor-derived sample weights.
    pub fn uses_nnr(self) -> bool {
        matches!(self, Self::ErmNnr | Self::ErmNnrCmoKl | Self::ErmNnrCmoChi)
    }

    /// Divergence order pinned by the method name, when it has one.
    pub fn divergence_order(self) -> Option<f64> {
        match self {
            Self::ErmCmoKl | Self::ErmNnrCmoKl => Some(1.0),
            Self::ErmCmoChi | Self::ErmNnrCmoChi => Some(2.0),
            _ => None,
        }
    }

    pub const ALL: [TrainMethod; 14] = [
        Self::Erm,
        Self::ErmNnr,
        Self::ErmCmoKl,
        Self::ErmCmoChi,
        Self::ErmNnrCmoKl,
        Self::ErmNnrCmoChi,
        Self::Baseline(BaselineMethod::Cvar),
        Self::Baseline(BaselineMethod::Chisq),
        Self::Baseline(BaselineMethod::CvarDoro),
        Self::Baseline(BaselineMethod::ChisqDoro),
        Self::Baseline(BaselineMethod::CvarGroup),
        Self::Baseline(BaselineMethod::GroupDro),
        Self::Baseline(BaselineMethod::GradientDro),
        Self::Baseline(BaselineMethod::VariantDro),
    ];
}

impl std::str::FromStr for TrainMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        for method in Self::ALL {
            if method.name() == s {
                return Ok(method);
            }
        }
        let known: Vec<&str> = Self::ALL.iter().map(|m| m.name()).collect();
        Err(Error::Config(format!(
            "unknown method `{s}` (expected one of: {})",
            known.join(", ")
        )))
    }
}

impl From<TrainMethod> for String {
    fn from(m: TrainMethod) -> String {
        m.name().to_string()
    }
}

impl TryFrom<String> for TrainMethod {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl std::fmt::Display for TrainMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Everything one experiment needs: the method, optimizer settings, and
/// the sub-configurations for data generation, neighbor reweighting,
/// constrained group reweighting, and the robust baselines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: TrainMethod,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seeds: Vec<u64>,
    pub embedding_dim: usize,
    pub num_layers: usize,
    pub data: SynthConfig,
    pub nnr: NnrConfig,
    pub cmo: CmoParams,
    pub baseline: BaselineSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: TrainMethod::Erm,
            batch_size: 32,
            epochs: 400,
            learning_rate: 0.001,
            seeds: vec![1, 2, 3, 4, 5],
            embedding_dim: 32,
            num_layers: 3,
            data: SynthConfig::default(),
            nnr: NnrConfig::default(),
            cmo: CmoParams::default(),
            baseline: BaselineSpec::default(),
        }
    }
}

impl TrainConfig {
    /// Small-scale preset: reduced per-class counts (10:1 imbalance
    /// preserved) and 50 epochs, so a full multi-seed run finishes in
    /// seconds rather than hours.
    pub fn desk() -> Self {
        Self {
            epochs: 50,
            // Plain SGD at the full-scale step size barely moves in 50
            // epochs on the small split; the preset carries its own rate.
            learning_rate: 0.3,
            data: SynthConfig::desk_scale(),
            nnr: NnrConfig {
                gamma: 3.5,
                mode: NnrMode::ClassNormalized,
                refresh_every: 25,
                ..NnrConfig::default()
            },
            cmo: CmoParams {
                lambda1: 0.01,
                eta_q: 0.25,
                ..CmoParams::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be ≥ 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("train.epochs must be ≥ 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "train.learning_rate = {} must be > 0",
                self.learning_rate
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("train.seeds must be nonempty".into()));
        }
        if self.embedding_dim == 0 {
            return Err(Error::Config("train.embedding_dim must be ≥ 1".into()));
        }
        self.data.validate()?;
        self.nnr.validate()?;
        self.cmo.validate()?;
        self.baseline.validate()?;
        Ok(())
    }
}

/// Hyperparameter sweep axes. Empty axes keep the base config's value; the
/// sweep runs the Cartesian product of the nonempty ones.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SweepGrid {
    /// Neighbor radius values (`sweep.gamma`).
    pub gamma: Vec<f64>,
    /// Divergence multiplier values (`sweep.lambda1`).
    pub lambda1: Vec<f64>,
    /// Separation multiplier values (`sweep.lambda2`).
    pub lambda2: Vec<f64>,
    /// Group ascent step values (`sweep.eta_q`).
    pub eta_q: Vec<f64>,
}

impl SweepGrid {
    pub fn is_empty(&self) -> bool {
        self.gamma.is_empty()
            && self.lambda1.is_empty()
            && self.lambda2.is_empty()
            && self.eta_q.is_empty()
    }
}

fn split_assignment(line: &str, lineno: usize) -> Result<(&str, &str)> {
    let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
        line: lineno,
        message: format!("expected `key = value`, got `{line}`"),
    })?;
    Ok((key.trim(), value.trim()))
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str, lineno: usize) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| Error::Parse {
        line: lineno,
        message: format!("invalid value `{value}` for {key}: {e}"),
    })
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str, lineno: usize) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s, lineno))
        .collect()
}

fn parse_bool(key: &str, value: &str, lineno: usize) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Parse {
            line: lineno,
            message: format!("invalid value `{value}` for {key}: expected true or false"),
        }),
    }
}

fn assignments(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, line)| (i + 1, line.trim()))
        .filter(|(_, line)| !line.is_empty() && !line.starts_with('#'))
}

/// Parses a full experiment configuration. Starts from the defaults (or
/// the preset named by a `preset` key), applies every assignment, then
/// validates the result.
pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let mut config = TrainConfig::default();
    for (lineno, line) in assignments(text) {
        let (key, value) = split_assignment(line, lineno)?;
        if key == "preset" {
            config = match value {
                "desk" => TrainConfig::desk(),
                "full" => TrainConfig::default(),
                _ => {
                    return Err(Error::Parse {
                        line: lineno,
                        message: format!("invalid value `{value}` for preset: expected desk or full"),
                    })
                }
            };
        }
    }
    for (lineno, line) in assignments(text) {
        let (key, value) = split_assignment(line, lineno)?;
        if key != "preset" {
            apply_key(&mut config, key, value, lineno)?;
        }
    }
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<TrainConfig> {
    parse_config(&std::fs::read_to_string(path)?)
}

/// Parses a sweep grid file (`sweep.gamma = 1.0, 2.0` etc.).
pub fn parse_grid(text: &str) -> Result<SweepGrid> {
    let mut grid = SweepGrid::default();
    for (lineno, line) in assignments(text) {
        let (key, value) = split_assignment(line, lineno)?;
        match key {
            "sweep.gamma" => grid.gamma = parse_list(key, value, lineno)?,
            "sweep.lambda1" => grid.lambda1 = parse_list(key, value, lineno)?,
            "sweep.lambda2" => grid.lambda2 = parse_list(key, value, lineno)?,
            "sweep.eta_q" => grid.eta_q = parse_list(key, value, lineno)?,
            _ => return Err(Error::UnknownKey(key.to_string())),
        }
    }
    if grid.is_empty() {
        return Err(Error::Config("sweep grid has no axes".into()));
    }
    Ok(grid)
}

pub fn load_grid(path: &Path) -> Result<SweepGrid> {
    parse_grid(&std::fs::read_to_string(path)?)
}

fn apply_key(config: &mut TrainConfig, key: &str, value: &str, lineno: usize) -> Result<()> {
    match key {
        "train.method" | "baseline.method" => config.method = parse_value(key, value, lineno)?,
        "train.batch_size" => config.batch_size = parse_value(key, value, lineno)?,
        "train.epochs" => config.epochs = parse_value(key, value, lineno)?,
        "train.learning_rate" => config.learning_rate = parse_value(key, value, lineno)?,
        "train.seeds" => config.seeds = parse_list(key, value, lineno)?,
        "train.embedding_dim" => config.embedding_dim = parse_value(key, value, lineno)?,
        "model.num_layers" => config.num_layers = parse_value(key, value, lineno)?,

        "data.num_classes" => config.data.num_classes = parse_value(key, value, lineno)?,
        "data.train_counts" => config.data.train_counts = parse_list(key, value, lineno)?,
        "data.val_count" => config.data.val_count = parse_value(key, value, lineno)?,
        "data.test_count" => config.data.test_count = parse_value(key, value, lineno)?,
        "data.d_inv" => config.data.d_inv = parse_value(key, value, lineno)?,
        "data.d_spu" => config.data.d_spu = parse_value(key, value, lineno)?,
        "data.sigma" => config.data.sigma = parse_value(key, value, lineno)?,
        "data.alpha" => config.data.alpha = parse_value(key, value, lineno)?,
        "data.beta" => config.data.beta = parse_value(key, value, lineno)?,
        "data.num_train_envs" => config.data.num_train_envs = parse_value(key, value, lineno)?,
        "data.mean_spacing" => config.data.mean_spacing = parse_value(key, value, lineno)?,
        "data.mean_mode" => {
            config.data.mean_mode = match value {
                "axis_aligned" => MeanMode::AxisAligned,
                "random_rotation" => MeanMode::RandomRotation,
                _ => {
                    return Err(Error::Parse {
                        line: lineno,
                        message: format!(
                            "invalid value `{value}` for {key}: expected axis_aligned or random_rotation"
                        ),
                    })
                }
            }
        }
        "data.nodes_min" => config.data.nodes_min = parse_value(key, value, lineno)?,
        "data.nodes_max" => config.data.nodes_max = parse_value(key, value, lineno)?,
        "data.edge_prob" => config.data.edge_prob = parse_value(key, value, lineno)?,
        "data.seed" => config.data.seed = parse_value(key, value, lineno)?,

        "nnr.gamma" => config.nnr.gamma = parse_value(key, value, lineno)?,
        "nnr.mode" => {
            config.nnr.mode = match value {
                "neighbor_fraction" => NnrMode::NeighborFraction,
                "class_normalized" => NnrMode::ClassNormalized,
                _ => {
                    return Err(Error::Parse {
                        line: lineno,
                        message: format!(
                            "invalid value `{value}` for {key}: expected neighbor_fraction or class_normalized"
                        ),
                    })
                }
            }
        }
        "nnr.refresh_every" => config.nnr.refresh_every = parse_value(key, value, lineno)?,
        "nnr.fallback_weight" => config.nnr.fallback_weight = parse_value(key, value, lineno)?,

        "cmo.eta_q" => config.cmo.eta_q = parse_value(key, value, lineno)?,
        "cmo.lambda1" => config.cmo.lambda1 = parse_value(key, value, lineno)?,
        "cmo.lambda2" => config.cmo.lambda2 = parse_value(key, value, lineno)?,
        "cmo.rho1" => config.cmo.rho1 = parse_value(key, value, lineno)?,
        "cmo.rho2" => config.cmo.rho2 = parse_value(key, value, lineno)?,
        "cmo.hard_ball" => config.cmo.hard_ball = parse_bool(key, value, lineno)?,

        "baseline.alpha_cvar" => config.baseline.alpha_cvar = parse_value(key, value, lineno)?,
        "baseline.eps_doro" => config.baseline.eps_doro = parse_value(key, value, lineno)?,
        "baseline.rho_chisq" => config.baseline.rho_chisq = parse_value(key, value, lineno)?,
        "baseline.eta_group" => config.baseline.eta_group = parse_value(key, value, lineno)?,
        "baseline.lambda_var" => config.baseline.lambda_var = parse_value(key, value, lineno)?,

        _ => return Err(Error::UnknownKey(key.to_string())),
    }
    if let TrainMethod::Baseline(b) = config.method {
        config.baseline.method = b;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_yields_defaults() {
        let config = parse_config("").unwrap();
        assert_eq!(config, TrainConfig::default());
        assert_eq!(config.batch_size, 32);
        assert_eq!(config.epochs, 400);
        assert_eq!(config.learning_rate, 0.001);
        assert_eq!(config.seeds, vec![1, 2, 3, 4, 5]);
        assert_eq!(config.embedding_dim, 32);
        assert_eq!(config.num_layers, 3);
    }

    #[test]
    fn comments_blanks_and_whitespace_are_tolerated() {
        let text = "\n# a comment\n   train.epochs   =   7\n\n  # another\ntrain.batch_size=16\n";
        let config = parse_config(text).unwrap();
        assert_eq!(config.epochs, 7);
        assert_eq!(config.batch_size, 16);
    }

    #[test]
    fn every_section_key_is_settable() {
        let text = "\
train.method = erm_nnr_cmo_kl
train.batch_size = 8
train.epochs = 3
train.learning_rate = 0.01
train.seeds = 2, 4
train.embedding_dim = 6
model.num_layers = 1
data.num_classes = 3
data.train_counts = 30, 30, 5
data.val_count = 10
data.test_count = 20
data.d_inv = 4
data.d_spu = 5
data.sigma = 0.7
data.alpha = 0.1
data.beta = 0.8
data.num_train_envs = 3
data.mean_spacing = 2.0
data.mean_mode = random_rotation
data.nodes_min = 4
data.nodes_max = 9
data.edge_prob = 0.25
data.seed = 99
nnr.gamma = 1.5
nnr.mode = class_normalized
nnr.refresh_every = 2
nnr.fallback_weight = 0.5
cmo.eta_q = 0.02
cmo.lambda1 = 0.4
cmo.lambda2 = 0.03
cmo.rho1 = 0.9
cmo.rho2 = 1.1
cmo.hard_ball = true
baseline.alpha_cvar = 0.4
baseline.eps_doro = 0.05
baseline.rho_chisq = 0.6
baseline.eta_group = 0.2
baseline.lambda_var = 0.7
";
        let config = parse_config(text).unwrap();
        assert_eq!(config.method, TrainMethod::ErmNnrCmoKl);
        assert_eq!(config.seeds, vec![2, 4]);
        assert_eq!(config.data.train_counts, vec![30, 30, 5]);
        assert_eq!(config.data.mean_mode, MeanMode::RandomRotation);
        assert_eq!(config.data.seed, 99);
        assert_eq!(config.nnr.mode, NnrMode::ClassNormalized);
        assert_eq!(config.nnr.refresh_every, 2);
        assert!(config.cmo.hard_ball);
        assert_eq!(config.cmo.lambda1, 0.4);
        assert_eq!(config.baseline.alpha_cvar, 0.4);
        assert_eq!(config.num_layers, 1);
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let err = parse_config("train.momentum = 0.9").unwrap_err();
        assert!(err.to_string().contains("train.momentum"));
        match err {
            Error::UnknownKey(key) => assert_eq!(key, "train.momentum"),
            other => panic!("expected UnknownKey, got {other:?}"),
        }

        let err = parse_config("cmo.k = 2").unwrap_err();
        match err {
            Error::UnknownKey(key) => assert_eq!(key, "cmo.k"),
            other => panic!("expected UnknownKey, got {other:?}"),
        }
    }

    #[test]
    fn malformed_lines_report_their_line_number() {
        let err = parse_config("train.epochs = 5\nnonsense without equals\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected Parse, got {other:?}"),
        }

        let err = parse_config("\n\ntrain.epochs = many").unwrap_err();
        match err {
            Error::Parse { line, message } => {
                assert_eq!(line, 3);
                assert!(message.contains("train.epochs"));
                assert!(message.contains("many"));
            }
            other => panic!("expected Parse, got {other:?}"),
        }
    }

    #[test]
    fn preset_applies_first_regardless_of_position() {
        let before = parse_config("preset = desk\ntrain.epochs = 9").unwrap();
        let after = parse_config("train.epochs = 9\npreset = desk").unwrap();
        assert_eq!(before, after);
        assert_eq!(before.epochs, 9);
        assert_eq!(before.data, SynthConfig::desk_scale());

        let plain = parse_config("preset = desk").unwrap();
        assert_eq!(plain, TrainConfig::desk());
        assert_eq!(plain.epochs, 50);

        assert!(parse_config("preset = huge").is_err());
    }

    #[test]
    fn all_method_names_round_trip() {
        for method in TrainMethod::ALL {
            let parsed: TrainMethod = method.name().parse().unwrap();
            assert_eq!(parsed, method);
            let config = parse_config(&format!("train.method = {}", method.name())).unwrap();
            assert_eq!(config.method, method);
        }
        assert!("gradient_descent".parse::<TrainMethod>().is_err());

        // `erm` resolves to the composite spelling, not the baseline one.
        assert_eq!("erm".parse::<TrainMethod>().unwrap(), TrainMethod::Erm);
    }

    #[test]
    fn baseline_method_key_is_a_synonym_and_syncs_the_spec() {
        let config = parse_config("baseline.method = cvar_group").unwrap();
        assert_eq!(
            config.method,
            TrainMethod::Baseline(BaselineMethod::CvarGroup)
        );
        assert_eq!(config.baseline.method, BaselineMethod::CvarGroup);
    }

    #[test]
    fn method_serializes_as_its_name() {
        let json = serde_json::to_string(&TrainMethod::ErmCmoChi).unwrap();
        assert_eq!(json, "\"erm_cmo_chi\"");
        let back: TrainMethod = serde_json::from_str(&json).unwrap();
        assert_eq!(back, TrainMethod::ErmCmoChi);

        let json = serde_json::to_string(&TrainMethod::Baseline(BaselineMethod::GroupDro)).unwrap();
        assert_eq!(json, "\"group_dro\"");
    }

    #[test]
    fn validation_rejects_bad_settings() {
        assert!(parse_config("train.batch_size = 0").is_err());
        assert!(parse_config("train.epochs = 0").is_err());
        assert!(parse_config("train.learning_rate = 0").is_err());
        assert!(parse_config("train.learning_rate = -0.1").is_err());
        assert!(parse_config("train.seeds = ").is_err());
        assert!(parse_config("train.embedding_dim = 0").is_err());
        // Sub-config validation is reached too.
        assert!(parse_config("data.alpha = 1.5").is_err());
        assert!(parse_config("nnr.gamma = -1").is_err());
        assert!(parse_config("cmo.rho1 = 0").is_err());
        assert!(parse_config("baseline.alpha_cvar = 0").is_err());
    }

    #[test]
    fn config_json_round_trips() {
        let config = parse_config("preset = desk\ntrain.method = erm_cmo_kl").unwrap();
        let json = serde_json::to_string(&config).unwrap();
        let back: TrainConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, config);
    }

    #[test]
    fn grid_files_parse_lists_per_axis() {
        let grid = parse_grid("sweep.gamma = 1.0, 2.0\nsweep.eta_q = 0.01\n").unwrap();
        assert_eq!(grid.gamma, vec![1.0, 2.0]);
        assert_eq!(grid.eta_q, vec![0.01]);
        assert!(grid.lambda1.is_empty());
        assert!(grid.lambda2.is_empty());

        match parse_grid("sweep.rho = 1.0").unwrap_err() {
            Error::UnknownKey(key) => assert_eq!(key, "sweep.rho"),
            other => panic!("expected UnknownKey, got {other:?}"),
        }
        assert!(parse_grid("# nothing\n").is_err());
        assert!(parse_grid("sweep.gamma = fast").is_err());
    }
}
