//! Experiment configuration: a flat key-value text format with dotted
//! section names. Parsing is strict; unknown keys are listed in the
//! error.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::attack::{AttackConfig, Objective};
use crate::augment::AugMixConfig;
use crate::error::{Error, Result};
use crate::federation::{Algorithm, FederationConfig};
use crate::losses::LossConfig;
use crate::models::{Activation, ModelSpec};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DatasetSource {
    /// Synthetic class-conditional digits.
    Synth { count: usize, side: usize, classes: usize },
    /// IDX image/label pair, optionally mean-pooled by `downscale`.
    Idx { images: PathBuf, labels: PathBuf, downscale: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Untrained,
    Convergent,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Untrained => "untrained",
            Stage::Convergent => "convergent",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "untrained" => Ok(Stage::Untrained),
            "convergent" => Ok(Stage::Convergent),
            other => Err(Error::config(format!("unknown stage '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub federation: FederationConfig,
    pub attack: AttackConfig,
    /// Protection severities to sweep; 0 means defense disabled.
    pub severities: Vec<f64>,
    pub stages: Vec<Stage>,
    pub attacks_per_cell: usize,
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.federation.validate()?;
        self.attack.validate()?;
        if self.attacks_per_cell == 0 {
            return Err(Error::config("attacks_per_cell must be at least 1"));
        }
        if self.severities.is_empty() || self.stages.is_empty() {
            return Err(Error::config("severity and stage lists must be nonempty"));
        }
        for &s in &self.severities {
            if !(0.0..=10.0).contains(&s) {
                return Err(Error::config(format!("severity {s} outside [0, 10]")));
            }
        }
        Ok(())
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetSource::Synth { count: 500, side: 16, classes: 10 },
            federation: FederationConfig {
                clients: 10,
                participation: 0.5,
                rounds: 10,
                local_epochs: 1,
                eta: 0.05,
                alpha_part: 0.1,
                batch_size: 32,
                algorithm: Algorithm::FedAvg,
                mu_prox: 0.01,
                defense_enabled: false,
                aug_cfg: AugMixConfig::default(),
                loss_cfg: LossConfig::default(),
                model: ModelSpec {
                    layer_sizes: vec![256, 64, 10],
                    activation: Activation::Relu,
                    init_seed: 0,
                },
                seed: 42,
                deterministic: false,
            },
            attack: AttackConfig::default(),
            severities: vec![0.0, 2.0, 10.0],
            stages: vec![Stage::Untrained, Stage::Convergent],
            attacks_per_cell: 3,
            out_dir: PathBuf::from("out"),
        }
    }
}

fn parse_list<T: std::str::FromStr>(value: &str, key: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<T>()
                .map_err(|e| Error::config(format!("{key}: bad element '{s}': {e}")))
        })
        .collect()
}

struct KeyMap {
    map: BTreeMap<String, String>,
    used: std::collections::BTreeSet<String>,
}

impl KeyMap {
    fn take(&mut self, key: &str) -> Option<String> {
        self.used.insert(key.to_string());
        self.map.get(key).cloned()
    }

    fn parse<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.take(key) {
            Some(v) => v
                .parse::<T>()
                .map(Some)
                .map_err(|e| Error::config(format!("{key}: bad value '{v}': {e}"))),
            None => Ok(None),
        }
    }
}

/// Parse the flat dotted key-value format. Keys not in the schema are
/// rejected, listed by name.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::config(format!("line {}: expected 'key = value'", lineno + 1))
        })?;
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    let mut keys = KeyMap {
        map,
        used: Default::default(),
    };
    let mut cfg = ExperimentConfig::default();

    if let Some(source) = keys.take("dataset.source") {
        cfg.dataset = match source.as_str() {
            "synth" => DatasetSource::Synth {
                count: keys.parse("dataset.count")?.unwrap_or(500),
                side: keys.parse("dataset.side")?.unwrap_or(16),
                classes: keys.parse("dataset.classes")?.unwrap_or(10),
            },
            "idx" => DatasetSource::Idx {
                images: PathBuf::from(
                    keys.take("dataset.images")
                        .ok_or_else(|| Error::config("dataset.images required for idx source"))?,
                ),
                labels: PathBuf::from(
                    keys.take("dataset.labels")
                        .ok_or_else(|| Error::config("dataset.labels required for idx source"))?,
                ),
                downscale: keys.parse("dataset.downscale")?.unwrap_or(1),
            },
            other => return Err(Error::config(format!("unknown dataset.source '{other}'"))),
        };
    }

    let fed = &mut cfg.federation;
    if let Some(v) = keys.parse("federation.clients")? {
        fed.clients = v;
    }
    if let Some(v) = keys.parse("federation.participation")? {
        fed.participation = v;
    }
    if let Some(v) = keys.parse("federation.rounds")? {
        fed.rounds = v;
    }
    if let Some(v) = keys.parse("federation.local_epochs")? {
        fed.local_epochs = v;
    }
    if let Some(v) = keys.parse("federation.eta")? {
        fed.eta = v;
    }
    if let Some(v) = keys.parse("federation.alpha_part")? {
        fed.alpha_part = v;
    }
    if let Some(v) = keys.parse("federation.batch_size")? {
        fed.batch_size = v;
    }
    if let Some(v) = keys.take("federation.algorithm") {
        fed.algorithm = match v.as_str() {
            "fedavg" => Algorithm::FedAvg,
            "fedprox" => Algorithm::FedProx,
            other => return Err(Error::config(format!("unknown algorithm '{other}'"))),
        };
    }
    if let Some(v) = keys.parse("federation.mu_prox")? {
        fed.mu_prox = v;
    }
    if let Some(v) = keys.parse("federation.defense_enabled")? {
        fed.defense_enabled = v;
    }
    if let Some(v) = keys.parse("federation.seed")? {
        fed.seed = v;
    }
    if let Some(v) = keys.parse("federation.deterministic")? {
        fed.deterministic = v;
    }
    if let Some(v) = keys.take("model.layer_sizes") {
        fed.model.layer_sizes = parse_list(&v, "model.layer_sizes")?;
    }
    if let Some(v) = keys.take("model.activation") {
        fed.model.activation = Activation::parse(&v)?;
    }
    if let Some(v) = keys.parse("augmix.n_chains")? {
        fed.aug_cfg.n_chains = v;
    }
    if let Some(v) = keys.parse("augmix.severity")? {
        fed.aug_cfg.severity = v;
    }
    if let Some(v) = keys.parse("augmix.mix_concentration")? {
        fed.aug_cfg.mix_concentration = v;
    }
    if let Some(v) = keys.parse("augmix.max_chain_len")? {
        fed.aug_cfg.max_chain_len = v;
    }
    if let Some(v) = keys.parse("loss.lambda_base")? {
        fed.loss_cfg.lambda_base = v;
    }
    if let Some(v) = keys.parse("loss.scale")? {
        fed.loss_cfg.scale = v;
    }
    if let Some(v) = keys.parse("loss.large_val")? {
        fed.loss_cfg.large_val = v;
    }
    if let Some(v) = keys.parse("loss.scaling_enabled")? {
        fed.loss_cfg.scaling_enabled = v;
    }
    if let Some(v) = keys.parse("loss.sticky")? {
        fed.loss_cfg.sticky = v;
    }

    if let Some(v) = keys.parse("attack.iterations")? {
        cfg.attack.iterations = v;
    }
    if let Some(v) = keys.parse("attack.lr")? {
        cfg.attack.lr = v;
    }
    if let Some(v) = keys.parse("attack.tv_coeff")? {
        cfg.attack.tv_coeff = v;
    }
    if let Some(v) = keys.parse("attack.batch_size")? {
        cfg.attack.batch_size = v;
    }
    if let Some(v) = keys.take("attack.objective") {
        cfg.attack.objective = match v.as_str() {
            "cosine" => Objective::Cosine,
            "l2" => Objective::L2,
            other => return Err(Error::config(format!("unknown objective '{other}'"))),
        };
    }
    if let Some(v) = keys.parse("attack.labels_known")? {
        cfg.attack.labels_known = v;
    }
    if let Some(v) = keys.parse("attack.local_epochs_observed")? {
        cfg.attack.local_epochs_observed = v;
    }
    if let Some(v) = keys.parse("attack.seed")? {
        cfg.attack.seed = v;
    }

    if let Some(v) = keys.take("experiment.severities") {
        cfg.severities = parse_list(&v, "experiment.severities")?;
    }
    if let Some(v) = keys.take("experiment.stages") {
        cfg.stages = v
            .split(',')
            .map(|s| Stage::parse(s.trim()))
            .collect::<Result<_>>()?;
    }
    if let Some(v) = keys.parse("experiment.attacks_per_cell")? {
        cfg.attacks_per_cell = v;
    }
    if let Some(v) = keys.take("experiment.out_dir") {
        cfg.out_dir = PathBuf::from(v);
    }

    let unknown: Vec<&String> = keys
        .map
        .keys()
        .filter(|k| !keys.used.contains(*k))
        .collect();
    if !unknown.is_empty() {
        let names: Vec<String> = unknown.iter().map(|s| s.to_string()).collect();
        return Err(Error::config(format!(
            "unknown config keys: {}",
            names.join(", ")
        )));
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Canonical serialization; `parse_config(serialize_config(c))` is the
/// identity on the represented values.
pub fn serialize_config(cfg: &ExperimentConfig) -> String {
    let mut s = String::new();
    match &cfg.dataset {
        DatasetSource::Synth { count, side, classes } => {
            writeln!(s, "dataset.source = synth").unwrap();
            writeln!(s, "dataset.count = {count}").unwrap();
            writeln!(s, "dataset.side = {side}").unwrap();
            writeln!(s, "dataset.classes = {classes}").unwrap();
        }
        DatasetSource::Idx { images, labels, downscale } => {
            writeln!(s, "dataset.source = idx").unwrap();
            writeln!(s, "dataset.images = {}", images.display()).unwrap();
            writeln!(s, "dataset.labels = {}", labels.display()).unwrap();
            writeln!(s, "dataset.downscale = {downscale}").unwrap();
        }
    }
    let f = &cfg.federation;
    writeln!(s, "federation.clients = {}", f.clients).unwrap();
    writeln!(s, "federation.participation = {}", f.participation).unwrap();
    writeln!(s, "federation.rounds = {}", f.rounds).unwrap();
    writeln!(s, "federation.local_epochs = {}", f.local_epochs).unwrap();
    writeln!(s, "federation.eta = {}", f.eta).unwrap();
    writeln!(s, "federation.alpha_part = {}", f.alpha_part).unwrap();
    writeln!(s, "federation.batch_size = {}", f.batch_size).unwrap();
    let algo = match f.algorithm {
        Algorithm::FedAvg => "fedavg",
        Algorithm::FedProx => "fedprox",
    };
    writeln!(s, "federation.algorithm = {algo}").unwrap();
    writeln!(s, "federation.mu_prox = {}", f.mu_prox).unwrap();
    writeln!(s, "federation.defense_enabled = {}", f.defense_enabled).unwrap();
    writeln!(s, "federation.seed = {}", f.seed).unwrap();
    writeln!(s, "federation.deterministic = {}", f.deterministic).unwrap();
    let sizes: Vec<String> = f.model.layer_sizes.iter().map(|v| v.to_string()).collect();
    writeln!(s, "model.layer_sizes = {}", sizes.join(",")).unwrap();
    writeln!(s, "model.activation = {}", f.model.activation.as_str()).unwrap();
    writeln!(s, "augmix.n_chains = {}", f.aug_cfg.n_chains).unwrap();
    writeln!(s, "augmix.severity = {}", f.aug_cfg.severity).unwrap();
    writeln!(s, "augmix.mix_concentration = {}", f.aug_cfg.mix_concentration).unwrap();
    writeln!(s, "augmix.max_chain_len = {}", f.aug_cfg.max_chain_len).unwrap();
    writeln!(s, "loss.lambda_base = {}", f.loss_cfg.lambda_base).unwrap();
    writeln!(s, "loss.scale = {}", f.loss_cfg.scale).unwrap();
    writeln!(s, "loss.large_val = {}", f.loss_cfg.large_val).unwrap();
    writeln!(s, "loss.scaling_enabled = {}", f.loss_cfg.scaling_enabled).unwrap();
    writeln!(s, "loss.sticky = {}", f.loss_cfg.sticky).unwrap();
    let a = &cfg.attack;
    writeln!(s, "attack.iterations = {}", a.iterations).unwrap();
    writeln!(s, "attack.lr = {}", a.lr).unwrap();
    writeln!(s, "attack.tv_coeff = {}", a.tv_coeff).unwrap();
    writeln!(s, "attack.batch_size = {}", a.batch_size).unwrap();
    let obj = match a.objective {
        Objective::Cosine => "cosine",
        Objective::L2 => "l2",
    };
    writeln!(s, "attack.objective = {obj}").unwrap();
    writeln!(s, "attack.labels_known = {}", a.labels_known).unwrap();
    writeln!(s, "attack.local_epochs_observed = {}", a.local_epochs_observed).unwrap();
    writeln!(s, "attack.seed = {}", a.seed).unwrap();
    let sevs: Vec<String> = cfg.severities.iter().map(|v| v.to_string()).collect();
    writeln!(s, "experiment.severities = {}", sevs.join(",")).unwrap();
    let stages: Vec<&str> = cfg.stages.iter().map(|v| v.as_str()).collect();
    writeln!(s, "experiment.stages = {}", stages.join(",")).unwrap();
    writeln!(s, "experiment.attacks_per_cell = {}", cfg.attacks_per_cell).unwrap();
    writeln!(s, "experiment.out_dir = {}", cfg.out_dir.display()).unwrap();
    s
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}
