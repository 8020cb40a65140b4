//! Run configuration: training hyperparameters, view toggles, ablation
//! selection, and paths.
//!
//! Values resolve in four layers, each overriding the one below: built-in
//! profile defaults, then the TOML config file, then `POIREC_*` environment
//! variables, then command-line flags. Unknown config keys and unknown
//! `POIREC_*` variables are rejected rather than ignored.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which components are removed, mirroring the standard ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// Everything on.
    Full,
    /// No prototype level and no clustering loss; the pairwise POI graph
    /// is still learned.
    NoHsl,
    /// Pairwise structure learning replaced by rule-based graphs; the
    /// hierarchical level (which clusters learned structure embeddings)
    /// is disabled with it.
    NoPsl,
    /// View-shared contrastive loss off.
    NoShar,
    /// View-specific orthogonality loss off.
    NoSpec,
    /// Both fusion losses off.
    NoSharSpec,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::Full,
        Ablation::NoHsl,
        Ablation::NoPsl,
        Ablation::NoShar,
        Ablation::NoSpec,
        Ablation::NoSharSpec,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoHsl => "no-hsl",
            Ablation::NoPsl => "no-psl",
            Ablation::NoShar => "no-shar",
            Ablation::NoSpec => "no-spec",
            Ablation::NoSharSpec => "no-shar-spec",
        }
    }

    /// Whether the bi-level graph keeps its prototype level.
    pub fn prototypes_enabled(self) -> bool {
        !matches!(self, Ablation::NoHsl | Ablation::NoPsl)
    }

    /// Whether the POI adjacency is learned (otherwise rule-based).
    pub fn learned_graph(self) -> bool {
        self != Ablation::NoPsl
    }

    /// Loss weights after applying the ablation to the configured betas.
    pub fn effective_betas(self, beta_hsl: f64, beta_sh: f64, beta_sp: f64) -> (f64, f64, f64) {
        let hsl = if self.prototypes_enabled() { beta_hsl } else { 0.0 };
        let sh = match self {
            Ablation::NoShar | Ablation::NoSharSpec => 0.0,
            _ => beta_sh,
        };
        let sp = match self {
            Ablation::NoSpec | Ablation::NoSharSpec => 0.0,
            _ => beta_sp,
        };
        (hsl, sh, sp)
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation '{s}'")))
    }
}

/// When the clustering E-step runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstepCadence {
    /// Once per epoch, before the batch loop. The efficient default.
    Epoch,
    /// Before every minibatch, following the written procedure literally.
    Batch,
}

impl EstepCadence {
    pub fn name(self) -> &'static str {
        match self {
            EstepCadence::Epoch => "epoch",
            EstepCadence::Batch => "batch",
        }
    }
}

impl fmt::Display for EstepCadence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EstepCadence {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "epoch" => Ok(EstepCadence::Epoch),
            "batch" => Ok(EstepCadence::Batch),
            other => Err(Error::Config(format!("unknown e-step cadence '{other}'"))),
        }
    }
}

/// Built-in configuration baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    /// Full-scale settings from the published evaluation protocol.
    Paper,
    /// Small settings for synthetic data and CI-speed runs.
    Desk,
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Paper => "paper",
            Profile::Desk => "desk",
        })
    }
}

impl FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Profile::Paper),
            "desk" => Ok(Profile::Desk),
            other => Err(Error::Config(format!("unknown profile '{other}'"))),
        }
    }
}

/// The complete, flat run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    // Optimization.
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub seed: u64,
    // Dimensions.
    pub d2: usize,
    pub d3: usize,
    // Loss weights.
    pub beta_hsl: f64,
    pub beta_sh: f64,
    pub beta_sp: f64,
    // Structure learning.
    pub k: usize,
    pub tau1: f64,
    pub tau2: f64,
    pub epsilon: f64,
    pub top_k: usize,
    pub estep: EstepCadence,
    // Rule-based graph substitute (the no-psl ablation).
    pub rule_distance_km: f64,
    // Sequences.
    pub max_seq_len: usize,
    pub split_ratio: f64,
    // Views and ablation.
    pub spatial_view: bool,
    pub temporal_view: bool,
    pub ablation: Ablation,
    // Paths.
    pub dataset: String,
    pub workdir: String,
    // Export toggles.
    pub export_graph: bool,
    pub export_embeddings: bool,
}

impl RunConfig {
    /// Defaults for one of the built-in profiles.
    pub fn profile(p: Profile) -> Self {
        let base = RunConfig {
            lr: 1e-4,
            epochs: 60,
            batch_size: 96,
            clip_norm: 5.0,
            seed: 17,
            d2: 1024,
            d3: 1024,
            beta_hsl: 1e-4,
            beta_sh: 1e-1,
            beta_sp: 1e-4,
            k: 80,
            tau1: 0.1,
            tau2: 0.5,
            epsilon: 0.5,
            top_k: 10,
            estep: EstepCadence::Epoch,
            rule_distance_km: 2.0,
            max_seq_len: 50,
            split_ratio: 0.8,
            spatial_view: true,
            temporal_view: true,
            ablation: Ablation::Full,
            dataset: "dataset.prdt".to_string(),
            workdir: "runs".to_string(),
            export_graph: false,
            export_embeddings: false,
        };
        match p {
            Profile::Paper => base,
            Profile::Desk => RunConfig {
                lr: 1e-3,
                epochs: 40,
                d2: 32,
                d3: 32,
                k: 4,
                ..base
            },
        }
    }

    /// Overlays values parsed from a TOML document. Unknown keys fail.
    pub fn apply_toml(&mut self, text: &str) -> Result<()> {
        let partial: PartialConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))?;
        partial.apply(self);
        self.validate()
    }

    /// Overlays `POIREC_*` environment variables, e.g. `POIREC_LR=0.001`
    /// or `POIREC_ABLATION=no-psl`. Unknown `POIREC_*` names fail.
    pub fn apply_env<I>(&mut self, vars: I) -> Result<()>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        for (key, value) in vars {
            let Some(field) = key.strip_prefix("POIREC_") else {
                continue;
            };
            self.set_field(&field.to_ascii_lowercase(), &value)
                .map_err(|e| Error::Config(format!("{key}: {e}")))?;
        }
        self.validate()
    }

    fn set_field(&mut self, field: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(value: &str) -> Result<T>
        where
            T::Err: fmt::Display,
        {
            value
                .parse()
                .map_err(|e| Error::Config(format!("invalid value '{value}': {e}")))
        }
        fn parse_bool(value: &str) -> Result<bool> {
            match value {
                "true" | "1" => Ok(true),
                "false" | "0" => Ok(false),
                other => Err(Error::Config(format!("invalid boolean '{other}'"))),
            }
        }
        match field {
            "lr" => self.lr = parse(value)?,
            "epochs" => self.epochs = parse(value)?,
            "batch_size" => self.batch_size = parse(value)?,
            "clip_norm" => self.clip_norm = parse(value)?,
            "seed" => self.seed = parse(value)?,
            "d2" => self.d2 = parse(value)?,
            "d3" => self.d3 = parse(value)?,
            "beta_hsl" => self.beta_hsl = parse(value)?,
            "beta_sh" => self.beta_sh = parse(value)?,
            "beta_sp" => self.beta_sp = parse(value)?,
            "k" => self.k = parse(value)?,
            "tau1" => self.tau1 = parse(value)?,
            "tau2" => self.tau2 = parse(value)?,
            "epsilon" => self.epsilon = parse(value)?,
            "top_k" => self.top_k = parse(value)?,
            "estep" => self.estep = value.parse()?,
            "rule_distance_km" => self.rule_distance_km = parse(value)?,
            "max_seq_len" => self.max_seq_len = parse(value)?,
            "split_ratio" => self.split_ratio = parse(value)?,
            "spatial_view" => self.spatial_view = parse_bool(value)?,
            "temporal_view" => self.temporal_view = parse_bool(value)?,
            "ablation" => self.ablation = value.parse()?,
            "dataset" => self.dataset = value.to_string(),
            "workdir" => self.workdir = value.to_string(),
            "export_graph" => self.export_graph = parse_bool(value)?,
            "export_embeddings" => self.export_embeddings = parse_bool(value)?,
            other => return Err(Error::Config(format!("unknown field '{other}'"))),
        }
        Ok(())
    }

    /// Rejects values outside the supported ranges.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.lr > 0.0) {
            problems.push("lr must be positive");
        }
        if self.epochs == 0 {
            problems.push("epochs must be positive");
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be positive");
        }
        if !(self.clip_norm > 0.0) {
            problems.push("clip_norm must be positive");
        }
        if self.d2 == 0 || self.d3 == 0 {
            problems.push("d2 and d3 must be positive");
        }
        if self.beta_hsl < 0.0 || self.beta_sh < 0.0 || self.beta_sp < 0.0 {
            problems.push("betas must be non-negative");
        }
        if self.k == 0 {
            problems.push("k must be positive");
        }
        if !(self.tau1 > 0.0) || !(self.tau2 > 0.0) {
            problems.push("temperatures must be positive");
        }
        if self.top_k == 0 {
            problems.push("top_k must be positive");
        }
        if !(self.rule_distance_km > 0.0) {
            problems.push("rule_distance_km must be positive");
        }
        if self.max_seq_len == 0 {
            problems.push("max_seq_len must be positive");
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            problems.push("split_ratio must lie strictly between 0 and 1");
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// The loss weights after the ablation is applied.
    pub fn effective_betas(&self) -> (f64, f64, f64) {
        self.ablation
            .effective_betas(self.beta_hsl, self.beta_sh, self.beta_sp)
    }

    /// Active view kinds in canonical order.
    pub fn views(&self) -> Vec<crate::ingest::ViewKind> {
        let mut v = Vec::new();
        if self.spatial_view {
            v.push(crate::ingest::ViewKind::Spatial);
        }
        if self.temporal_view {
            v.push(crate::ingest::ViewKind::Temporal);
        }
        v
    }
}

/// File-level overlay: every field optional, unknown keys rejected.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PartialConfig {
    lr: Option<f64>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    clip_norm: Option<f64>,
    seed: Option<u64>,
    d2: Option<usize>,
    d3: Option<usize>,
    beta_hsl: Option<f64>,
    beta_sh: Option<f64>,
    beta_sp: Option<f64>,
    k: Option<usize>,
    tau1: Option<f64>,
    tau2: Option<f64>,
    epsilon: Option<f64>,
    top_k: Option<usize>,
    estep: Option<EstepCadence>,
    rule_distance_km: Option<f64>,
    max_seq_len: Option<usize>,
    split_ratio: Option<f64>,
    spatial_view: Option<bool>,
    temporal_view: Option<bool>,
    ablation: Option<Ablation>,
    dataset: Option<String>,
    workdir: Option<String>,
    export_graph: Option<bool>,
    export_embeddings: Option<bool>,
}

impl PartialConfig {
    fn apply(self, cfg: &mut RunConfig) {
        macro_rules! overlay {
            ($($field:ident),* $(,)?) => {
                $(if let Some(v) = self.$field { cfg.$field = v; })*
            };
        }
        overlay!(
            lr, epochs, batch_size, clip_norm, seed, d2, d3, beta_hsl, beta_sh, beta_sp, k,
            tau1, tau2, epsilon, top_k, estep, rule_distance_km, max_seq_len, split_ratio,
            spatial_view, temporal_view, ablation, dataset, workdir, export_graph,
            export_embeddings,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_profile_matches_published_settings() {
        let c = RunConfig::profile(Profile::Paper);
        assert_eq!(c.lr, 1e-4);
        assert_eq!(c.epochs, 60);
        assert_eq!(c.batch_size, 96);
        assert_eq!((c.d2, c.d3), (1024, 1024));
        assert_eq!((c.beta_hsl, c.beta_sh, c.beta_sp), (1e-4, 1e-1, 1e-4));
        assert_eq!(c.k, 80);
        assert_eq!((c.tau1, c.tau2), (0.1, 0.5));
        c.validate().unwrap();
    }

    #[test]
    fn desk_profile_is_small_and_valid() {
        let c = RunConfig::profile(Profile::Desk);
        assert_eq!((c.d2, c.d3), (32, 32));
        assert_eq!(c.k, 4);
        assert!(c.epochs <= 200);
        c.validate().unwrap();
    }

    #[test]
    fn toml_overlays_only_named_fields() {
        let mut c = RunConfig::profile(Profile::Desk);
        c.apply_toml("lr = 0.01\nablation = \"no-psl\"\nspatial_view = false\n")
            .unwrap();
        assert_eq!(c.lr, 0.01);
        assert_eq!(c.ablation, Ablation::NoPsl);
        assert!(!c.spatial_view);
        // Untouched fields keep profile defaults.
        assert_eq!(c.k, 4);
    }

    #[test]
    fn unknown_toml_key_is_rejected() {
        let mut c = RunConfig::profile(Profile::Desk);
        let err = c.apply_toml("learning_rate = 0.01\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("learning_rate"));
    }

    #[test]
    fn env_overrides_file_values() {
        let mut c = RunConfig::profile(Profile::Desk);
        c.apply_toml("lr = 0.01\n").unwrap();
        c.apply_env([("POIREC_LR".to_string(), "0.5".to_string())])
            .unwrap();
        assert_eq!(c.lr, 0.5);
    }

    #[test]
    fn env_rejects_unknown_and_invalid() {
        let mut c = RunConfig::profile(Profile::Desk);
        assert!(c
            .apply_env([("POIREC_LEARNING".to_string(), "1".to_string())])
            .is_err());
        assert!(c
            .apply_env([("POIREC_EPOCHS".to_string(), "soon".to_string())])
            .is_err());
        // Unprefixed variables are ignored.
        c.apply_env([("PATH".to_string(), "/usr/bin".to_string())])
            .unwrap();
    }

    #[test]
    fn validation_names_every_problem() {
        let mut c = RunConfig::profile(Profile::Desk);
        c.lr = 0.0;
        c.split_ratio = 1.5;
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("lr"));
        assert!(msg.contains("split_ratio"));
    }

    #[test]
    fn ablation_grid_maps_to_component_switches() {
        let (hsl, sh, sp) = (1e-4, 1e-1, 1e-4);
        assert_eq!(
            Ablation::Full.effective_betas(hsl, sh, sp),
            (hsl, sh, sp)
        );
        assert_eq!(Ablation::NoHsl.effective_betas(hsl, sh, sp), (0.0, sh, sp));
        assert_eq!(Ablation::NoPsl.effective_betas(hsl, sh, sp), (0.0, sh, sp));
        assert_eq!(Ablation::NoShar.effective_betas(hsl, sh, sp), (hsl, 0.0, sp));
        assert_eq!(Ablation::NoSpec.effective_betas(hsl, sh, sp), (hsl, sh, 0.0));
        assert_eq!(
            Ablation::NoSharSpec.effective_betas(hsl, sh, sp),
            (hsl, 0.0, 0.0)
        );
        assert!(Ablation::Full.prototypes_enabled());
        assert!(!Ablation::NoHsl.prototypes_enabled());
        assert!(!Ablation::NoPsl.prototypes_enabled());
        assert!(Ablation::NoShar.prototypes_enabled());
        assert!(Ablation::Full.learned_graph());
        assert!(!Ablation::NoPsl.learned_graph());
    }

    #[test]
    fn ablation_names_round_trip() {
        for a in Ablation::ALL {
            assert_eq!(a.name().parse::<Ablation>().unwrap(), a);
        }
        assert!("no_psl".parse::<Ablation>().is_err());
        for (s, c) in [("epoch", EstepCadence::Epoch), ("batch", EstepCadence::Batch)] {
            assert_eq!(s.parse::<EstepCadence>().unwrap(), c);
        }
        assert!("step".parse::<EstepCadence>().is_err());
        assert_eq!("paper".parse::<Profile>().unwrap(), Profile::Paper);
        assert_eq!("desk".parse::<Profile>().unwrap(), Profile::Desk);
        assert!("prod".parse::<Profile>().is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let mut c = RunConfig::profile(Profile::Desk);
        c.seed = 99;
        c.ablation = Ablation::NoShar;
        let text = toml::to_string(&c).unwrap();
        let mut back = RunConfig::profile(Profile::Paper);
        back.apply_toml(&text).unwrap();
        assert_eq!(back, c);
    }
}
