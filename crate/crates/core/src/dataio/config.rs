//! Run configuration: a flat JSON object of hyperparameters.
//!
//! Omitted keys take the defaults below (the coronal mouse brain setting plus
//! the optimizer/runtime defaults). Unknown keys are rejected so that typos do
//! not silently fall back to defaults.

use std::fmt;
use std::path::Path;

use serde::de::{self, Deserializer};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config is not a JSON object: {0}")]
    NotAnObject(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{key}` has an invalid value: {reason}")]
    InvalidValue { key: String, reason: String },
    #[error("config key `{key}` = {value} is out of range: {reason}")]
    OutOfRange {
        key: String,
        value: String,
        reason: &'static str,
    },
}

/// Spatial graph radius: either fixed or chosen from the coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub enum Epsilon {
    #[default]
    Auto,
    Radius(f64),
}

impl Serialize for Epsilon {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Epsilon::Auto => s.serialize_str("auto"),
            Epsilon::Radius(r) => s.serialize_f64(*r),
        }
    }
}

impl<'de> Deserialize<'de> for Epsilon {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        match Value::deserialize(d)? {
            Value::String(s) if s == "auto" => Ok(Epsilon::Auto),
            Value::Number(n) => n
                .as_f64()
                .map(Epsilon::Radius)
                .ok_or_else(|| de::Error::custom("radius is not representable as f64")),
            other => Err(de::Error::custom(format!(
                "expected a positive number or \"auto\", got {other}"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// `theta * y_tra + (1 - theta) * y_mor`
    #[default]
    Sum,
    /// `[y_mor, y_tra]` fed to a fusion MLP of input width `2 * d_emb`.
    Concat,
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FusionMode::Sum => f.write_str("sum"),
            FusionMode::Concat => f.write_str("concat"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// kNN size of the transcriptomic topology graph.
    pub k_tr: usize,
    /// kNN size of the morphology topology graph.
    pub k_mo: usize,
    /// Upper bound of the augmentation mixing coefficient, transcriptomics.
    pub r_u_tr: f64,
    /// Upper bound of the augmentation mixing coefficient, morphology.
    pub r_u_mo: f64,
    /// Kernel degrees of freedom.
    pub nu: f64,
    pub d_emb: usize,
    /// Share of the transcriptomic embedding in the fused representation.
    pub theta: f64,
    /// Reconstruction loss weight.
    pub lambda_: f64,
    /// Log-boost applied to the prior of augmented pairs.
    pub alpha: f64,
    /// Minimum number of spots a gene must be detected in.
    pub tau: usize,
    pub n_mlp: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub epsilon_radius: Epsilon,
    /// Number of spatial domains; `None` means "number of distinct
    /// ground-truth labels".
    pub n_clusters: Option<usize>,
    pub refine: bool,

    pub fusion_mode: FusionMode,
    /// Uniform negatives drawn per anchor.
    pub n_neg: usize,
    /// Inverted dropout probability on encoder inputs (training only).
    pub dropout: f64,
    /// Epoch period of the embedding-space kNN rebuild.
    pub knn_refresh: usize,
    pub n_top_genes: usize,
    /// Morphology principal components kept.
    pub n_pcs: usize,
    pub vis_epochs: usize,
    pub vis_lr: f64,
    pub deconv_l1: f64,
    pub gmm_restarts: usize,
    pub refine_k: usize,
    pub paga_k: usize,
    pub marker_top_n: usize,
    pub mrre_k: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            k_tr: 7,
            k_mo: 7,
            r_u_tr: 0.1,
            r_u_mo: 0.1,
            nu: 0.05,
            d_emb: 72,
            theta: 0.9,
            lambda_: 0.01,
            alpha: 2.0,
            tau: 50,
            n_mlp: 1,
            lr: 0.001,
            epochs: 600,
            seed: 42,
            epsilon_radius: Epsilon::Auto,
            n_clusters: None,
            refine: false,
            fusion_mode: FusionMode::Sum,
            n_neg: 5,
            dropout: 0.1,
            knn_refresh: 10,
            n_top_genes: 3000,
            n_pcs: 50,
            vis_epochs: 300,
            vis_lr: 0.01,
            deconv_l1: 0.1,
            gmm_restarts: 10,
            refine_k: 6,
            paga_k: 10,
            marker_top_n: 10,
            mrre_k: 10,
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "k_tr",
    "k_mo",
    "r_u_tr",
    "r_u_mo",
    "nu",
    "d_emb",
    "theta",
    "lambda_",
    "alpha",
    "tau",
    "n_mlp",
    "lr",
    "epochs",
    "seed",
    "epsilon_radius",
    "n_clusters",
    "refine",
    "fusion_mode",
    "n_neg",
    "dropout",
    "knn_refresh",
    "n_top_genes",
    "n_pcs",
    "vis_epochs",
    "vis_lr",
    "deconv_l1",
    "gmm_restarts",
    "refine_k",
    "paga_k",
    "marker_top_n",
    "mrre_k",
];

impl RunConfig {
    /// Build a config from a JSON object, filling defaults and validating.
    pub fn from_map(map: &Map<String, Value>) -> Result<Self, ConfigError> {
        if let Some(k) = map.keys().find(|k| !CONFIG_KEYS.contains(&k.as_str())) {
            return Err(ConfigError::UnknownKey(k.clone()));
        }
        let defaults = serde_json::to_value(RunConfig::default()).expect("default serializes");
        // Check keys one at a time so a type error names the offending key.
        for (k, v) in map {
            let mut probe = defaults.clone();
            probe[k.as_str()] = v.clone();
            if let Err(e) = serde_json::from_value::<RunConfig>(probe) {
                return Err(ConfigError::InvalidValue {
                    key: k.clone(),
                    reason: e.to_string(),
                });
            }
        }
        let mut merged = defaults;
        for (k, v) in map {
            merged[k.as_str()] = v.clone();
        }
        let cfg: RunConfig = serde_json::from_value(merged).map_err(|e| ConfigError::InvalidValue {
            key: String::new(),
            reason: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(s: &str) -> Result<Self, ConfigError> {
        let v: Value = serde_json::from_str(s).map_err(|e| ConfigError::NotAnObject(e.to_string()))?;
        match v {
            Value::Object(map) => Self::from_map(&map),
            other => Err(ConfigError::NotAnObject(other.to_string())),
        }
    }

    /// Apply a `key=value` override. The value is parsed as JSON first and
    /// falls back to a bare string (so `fusion_mode=concat` works).
    pub fn with_override(&self, key: &str, raw: &str) -> Result<Self, ConfigError> {
        let parsed = serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut map = match serde_json::to_value(self).expect("config serializes") {
            Value::Object(m) => m,
            _ => unreachable!(),
        };
        if !CONFIG_KEYS.contains(&key) {
            return Err(ConfigError::UnknownKey(key.to_string()));
        }
        map.insert(key.to_string(), parsed);
        Self::from_map(&map)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        fn bad(key: &str, value: impl fmt::Display, reason: &'static str) -> ConfigError {
            ConfigError::OutOfRange {
                key: key.to_string(),
                value: value.to_string(),
                reason,
            }
        }
        let positive_ints = [
            ("k_tr", self.k_tr),
            ("k_mo", self.k_mo),
            ("d_emb", self.d_emb),
            ("n_mlp", self.n_mlp),
            ("epochs", self.epochs),
            ("n_neg", self.n_neg),
            ("knn_refresh", self.knn_refresh),
            ("n_top_genes", self.n_top_genes),
            ("n_pcs", self.n_pcs),
            ("gmm_restarts", self.gmm_restarts),
            ("refine_k", self.refine_k),
            ("paga_k", self.paga_k),
            ("marker_top_n", self.marker_top_n),
            ("mrre_k", self.mrre_k),
        ];
        for (key, v) in positive_ints {
            if v == 0 {
                return Err(bad(key, v, "must be a positive integer"));
            }
        }
        for (key, v) in [("r_u_tr", self.r_u_tr), ("r_u_mo", self.r_u_mo)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(bad(key, v, "must lie in (0, 1]"));
            }
        }
        if !(self.nu > 0.0 && self.nu.is_finite()) {
            return Err(bad("nu", self.nu, "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(bad("theta", self.theta, "must lie in [0, 1]"));
        }
        for (key, v) in [
            ("lambda_", self.lambda_),
            ("alpha", self.alpha),
            ("deconv_l1", self.deconv_l1),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(bad(key, v, "must be a nonnegative real"));
            }
        }
        // lr = 0 freezes the optimizer; it is allowed for diagnostics.
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(bad("lr", self.lr, "must be a nonnegative real"));
        }
        if !(self.vis_lr > 0.0 && self.vis_lr.is_finite()) {
            return Err(bad("vis_lr", self.vis_lr, "must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(bad("dropout", self.dropout, "must lie in [0, 1)"));
        }
        if let Epsilon::Radius(r) = self.epsilon_radius {
            if !(r > 0.0 && r.is_finite()) {
                return Err(bad("epsilon_radius", r, "must be positive or \"auto\""));
            }
        }
        if self.n_clusters == Some(0) {
            return Err(bad("n_clusters", 0, "must be a positive integer"));
        }
        Ok(())
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    RunConfig::from_json_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coronal_row_round_trips() {
        let cfg = RunConfig::from_json_str(
            r#"{"k_tr":7,"k_mo":7,"nu":0.05,"d_emb":72,"theta":0.9,"lambda_":0.01}"#,
        )
        .unwrap();
        assert_eq!(cfg.k_tr, 7);
        assert_eq!(cfg.k_mo, 7);
        assert_eq!(cfg.r_u_tr, 0.1);
        assert_eq!(cfg.r_u_mo, 0.1);
        assert_eq!(cfg.nu, 0.05);
        assert_eq!(cfg.d_emb, 72);
        assert_eq!(cfg.theta, 0.9);
        assert_eq!(cfg.lambda_, 0.01);
    }

    #[test]
    fn empty_object_is_all_defaults() {
        assert_eq!(RunConfig::from_json_str("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn negative_nu_is_out_of_range() {
        let err = RunConfig::from_json_str(r#"{"nu":-1}"#).unwrap_err();
        assert!(matches!(err, ConfigError::OutOfRange { ref key, .. } if key == "nu"), "{err}");
    }

    #[test]
    fn unknown_key_rejected() {
        let err = RunConfig::from_json_str(r#"{"k_tra":7}"#).unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey(ref k) if k == "k_tra"));
    }

    #[test]
    fn wrong_type_names_the_key() {
        let err = RunConfig::from_json_str(r#"{"d_emb":"big"}"#).unwrap_err();
        assert!(matches!(err, ConfigError::InvalidValue { ref key, .. } if key == "d_emb"), "{err}");
    }

    #[test]
    fn epsilon_accepts_auto_and_numbers() {
        let cfg = RunConfig::from_json_str(r#"{"epsilon_radius":1.5}"#).unwrap();
        assert_eq!(cfg.epsilon_radius, Epsilon::Radius(1.5));
        let cfg = RunConfig::from_json_str(r#"{"epsilon_radius":"auto"}"#).unwrap();
        assert_eq!(cfg.epsilon_radius, Epsilon::Auto);
        assert!(RunConfig::from_json_str(r#"{"epsilon_radius":"near"}"#).is_err());
        assert!(RunConfig::from_json_str(r#"{"epsilon_radius":0}"#).is_err());
    }

    #[test]
    fn defaulting_is_idempotent() {
        let first = RunConfig::from_json_str(r#"{"theta":0.7,"fusion_mode":"concat"}"#).unwrap();
        let second = RunConfig::from_json_str(&first.to_json_pretty()).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn overrides_parse_bare_strings() {
        let cfg = RunConfig::default().with_override("fusion_mode", "concat").unwrap();
        assert_eq!(cfg.fusion_mode, FusionMode::Concat);
        let cfg = cfg.with_override("epochs", "12").unwrap();
        assert_eq!(cfg.epochs, 12);
        assert!(cfg.with_override("nope", "1").is_err());
        assert!(cfg.with_override("theta", "2").is_err());
    }
}
