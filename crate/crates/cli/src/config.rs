//! Run configuration: JSON file, then command-line flags, then `--set`.

use std::path::{Path, PathBuf};

use ovseg::fixtures::{ArchConfig, SynthSpec};
use ovseg::gradcheck::{DEFAULT_CASES, DEFAULT_STEP, DEFAULT_TOLERANCE};
use ovseg::inference::{FusionConfig, DEFAULT_ALPHA, DEFAULT_BETA};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Dataset root: `vocabulary.json`, `bundles/<image>/`, `gt/<image>.{png,json}`.
    pub data: PathBuf,
    /// Output directory.
    pub out: PathBuf,
    /// Weights directory; seeded random weights when absent.
    pub weights: Option<PathBuf>,
    /// Prediction directory read by `evaluate`; `<out>/pred` when absent.
    pub pred: Option<PathBuf>,
    /// Synonym map for matching test names against training names.
    pub synonyms: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data: "data".into(),
            out: "out".into(),
            weights: None,
            pred: None,
            synonyms: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelParams {
    pub alpha: f64,
    pub beta: f64,
    /// Overrides the temperature stored with the weights.
    pub tau: Option<f64>,
    /// CLIP-path temperature; the LDP temperature when absent.
    pub tau_clip: Option<f64>,
    /// Decoder layers to run; all layers of the weights when absent.
    pub layers: Option<usize>,
    pub mask_threshold: f32,
    pub positional_encoding: bool,
    pub fpn_activations: bool,
    pub min_mask_area: f32,
    pub hard_pool_threshold: f32,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            tau: None,
            tau_clip: None,
            layers: None,
            mask_threshold: 0.5,
            positional_encoding: false,
            fpn_activations: true,
            min_mask_area: 1e-4,
            hard_pool_threshold: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossParams {
    pub gamma_a: f64,
    pub gamma_b: f64,
    pub gamma_c: f64,
    pub lambda_cls: f64,
    pub lambda_bce: f64,
    pub lambda_dice: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        Self {
            gamma_a: 2.0,
            gamma_b: 5.0,
            gamma_c: 1.0,
            lambda_cls: 2.0,
            lambda_bce: 5.0,
            lambda_dice: 5.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckParams {
    pub cases: usize,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradcheckParams {
    fn default() -> Self {
        Self {
            cases: DEFAULT_CASES,
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterParams {
    /// Clusters per map; the image's ground-truth segment count when absent.
    pub k: Option<usize>,
    pub max_iters: usize,
}

impl Default for ClusterParams {
    fn default() -> Self {
        Self {
            k: None,
            max_iters: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthParams {
    pub images: usize,
    pub spec: SynthSpec,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            images: 2,
            spec: SynthSpec::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Flags {
    /// Evaluate the IoU loss as the printed mask MSE.
    pub literal_eq2: bool,
    pub dice_in_loss: bool,
    pub hard_pooling: bool,
    /// Fixed exponents instead of the selective ensemble.
    pub geometric_baseline: bool,
    /// Selective-ensemble exponents with this constant confidence ratio.
    pub force_se_conf: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub arch: ArchConfig,
    pub model: ModelParams,
    pub fusion: FusionConfig,
    pub loss: LossParams,
    pub gradcheck: GradcheckParams,
    pub cluster: ClusterParams,
    pub synth: SynthParams,
    pub flags: Flags,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthParams::default();
        Self {
            seed: 0,
            paths: Paths::default(),
            arch: ArchConfig {
                d_sam: synth.spec.d_sam,
                d_clip: synth.spec.d_clip,
                d_emb: synth.spec.d_emb,
                ..ArchConfig::default()
            },
            model: ModelParams::default(),
            fusion: FusionConfig::default(),
            loss: LossParams::default(),
            gradcheck: GradcheckParams::default(),
            cluster: ClusterParams::default(),
            synth,
            flags: Flags::default(),
        }
    }
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn in_unit(path: &str, v: f64) -> Result<(), CliError> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(invalid(format!("{path} = {v} must lie in [0, 1]")))
    }
}

fn positive(path: &str, v: f64) -> Result<(), CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("{path} = {v} must be positive")))
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        in_unit("model.alpha", self.model.alpha)?;
        in_unit("model.beta", self.model.beta)?;
        in_unit("model.mask_threshold", self.model.mask_threshold as f64)?;
        in_unit("model.hard_pool_threshold", self.model.hard_pool_threshold as f64)?;
        if let Some(t) = self.model.tau {
            positive("model.tau", t)?;
        }
        if let Some(t) = self.model.tau_clip {
            positive("model.tau_clip", t)?;
        }
        if self.model.layers == Some(0) {
            return Err(invalid("model.layers must be at least 1"));
        }
        if self.model.min_mask_area < 0.0 {
            return Err(invalid("model.min_mask_area must be >= 0"));
        }
        if let Some(v) = self.flags.force_se_conf {
            in_unit("flags.force_se_conf", v)?;
        }
        if self.flags.force_se_conf.is_some() && self.flags.geometric_baseline {
            return Err(invalid(
                "flags.force_se_conf and flags.geometric_baseline are exclusive",
            ));
        }
        for (p, v) in [
            ("loss.gamma_a", self.loss.gamma_a),
            ("loss.gamma_b", self.loss.gamma_b),
            ("loss.gamma_c", self.loss.gamma_c),
            ("loss.lambda_cls", self.loss.lambda_cls),
            ("loss.lambda_bce", self.loss.lambda_bce),
            ("loss.lambda_dice", self.loss.lambda_dice),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(format!("{p} = {v} must be >= 0")));
            }
        }
        positive("gradcheck.step", self.gradcheck.step)?;
        positive("gradcheck.tolerance", self.gradcheck.tolerance)?;
        if self.gradcheck.cases == 0 {
            return Err(invalid("gradcheck.cases must be at least 1"));
        }
        if self.cluster.k == Some(0) {
            return Err(invalid("cluster.k must be at least 1"));
        }
        if self.synth.images == 0 {
            return Err(invalid("synth.images must be at least 1"));
        }
        self.fusion.validate().map_err(|e| invalid(e.to_string()))?;
        self.arch.validate().map_err(|e| invalid(e.to_string()))?;
        self.synth.spec.validate().map_err(|e| invalid(e.to_string()))?;
        Ok(())
    }

    pub fn pred_dir(&self) -> PathBuf {
        self.paths.pred.clone().unwrap_or_else(|| self.paths.out.join("pred"))
    }
}

fn default_tree() -> Value {
    serde_json::to_value(RunConfig::default()).expect("default config serializes")
}

/// Every leaf key of the default configuration with its default value.
pub fn key_listing() -> Vec<(String, String)> {
    fn walk(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
        match v {
            Value::Object(map) => {
                for (k, child) in map {
                    let path = if prefix.is_empty() {
                        k.clone()
                    } else {
                        format!("{prefix}.{k}")
                    };
                    walk(&path, child, out);
                }
            }
            Value::Number(n) if n.is_f64() => {
                out.push((prefix.to_string(), short_float(n.as_f64().unwrap_or(f64::NAN))))
            }
            leaf => out.push((prefix.to_string(), leaf.to_string())),
        }
    }
    let mut out = Vec::new();
    walk("", &default_tree(), &mut out);
    out
}

/// Single-precision fields widen to noisy doubles; print those at f32 width.
fn short_float(v: f64) -> String {
    if (v as f32) as f64 == v {
        format!("{:?}", v as f32)
    } else {
        format!("{v:?}")
    }
}

pub fn help_text() -> String {
    let keys = key_listing();
    let width = keys.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut s = String::from("Configuration keys (JSON file via --config, override with --set key=value):\n");
    for (k, v) in keys {
        s += &format!("  {k:<width$}  {v}\n");
    }
    s
}

/// Walks `path` in the default tree to reject unknown keys before merging.
fn check_known(path: &str) -> Result<(), CliError> {
    let tree = default_tree();
    let mut node = &tree;
    for part in path.split('.') {
        match node {
            Value::Object(map) => match map.get(part) {
                Some(child) => node = child,
                None => return Err(invalid(format!("unknown config key `{path}`"))),
            },
            _ => return Err(invalid(format!("unknown config key `{path}`"))),
        }
    }
    if node.is_object() {
        return Err(invalid(format!("config key `{path}` is a section, not a value")));
    }
    Ok(())
}

fn set_path(root: &mut Value, path: &str, value: Value) -> Result<(), CliError> {
    check_known(path)?;
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        node = node
            .as_object_mut()
            .and_then(|m| m.get_mut(*part))
            .ok_or_else(|| invalid(format!("config key `{path}` is not reachable")))?;
    }
    let map = node
        .as_object_mut()
        .ok_or_else(|| invalid(format!("config key `{path}` is not reachable")))?;
    map.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Recursively overlays `file` onto `base`, naming the first unknown key.
fn overlay(base: &mut Value, file: &Value, prefix: &str) -> Result<(), CliError> {
    let Value::Object(fmap) = file else {
        return Err(invalid(format!("config section `{prefix}` must be an object")));
    };
    for (k, v) in fmap {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        let slot = base
            .as_object_mut()
            .and_then(|m| m.get_mut(k))
            .ok_or_else(|| invalid(format!("unknown config key `{path}`")))?;
        if slot.is_object() {
            overlay(slot, v, &path)?;
        } else {
            *slot = v.clone();
        }
    }
    Ok(())
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Overrides from dedicated command-line flags.
#[derive(Clone, Debug, Default)]
pub struct FlagOverrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub sets: Vec<String>,
}

pub fn load(config: Option<&Path>, flags: &FlagOverrides) -> Result<RunConfig, CliError> {
    let mut tree = default_tree();
    if let Some(path) = config {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let file: Value = serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        overlay(&mut tree, &file, "")?;
    }
    if let Some(seed) = flags.seed {
        tree["seed"] = Value::from(seed);
    }
    if let Some(out) = &flags.out {
        tree["paths"]["out"] = Value::String(out.display().to_string());
    }
    for s in &flags.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| invalid(format!("--set expects key=value, got `{s}`")))?;
        set_path(&mut tree, k.trim(), parse_value(v.trim()))?;
    }
    let cfg: RunConfig = serde_json::from_value(tree).map_err(|e| invalid(format!("config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}
