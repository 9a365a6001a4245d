//! Experiment configuration, read from JSON.

use std::collections::BTreeSet;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{ConfigIssue, Error, Result};
use crate::fit::{FitConfig, ModelSpec};
use crate::model::{Family, GmmParams, MixPpcaParams, Model, PpcaParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Global,
    Linear,
    MatchedLinear,
    KlNaive,
    KlControl,
    KlWeighted,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 6] = [
        EstimatorKind::Global,
        EstimatorKind::Linear,
        EstimatorKind::MatchedLinear,
        EstimatorKind::KlNaive,
        EstimatorKind::KlControl,
        EstimatorKind::KlWeighted,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Global => "global",
            EstimatorKind::Linear => "linear",
            EstimatorKind::MatchedLinear => "matched_linear",
            EstimatorKind::KlNaive => "kl_naive",
            EstimatorKind::KlControl => "kl_control",
            EstimatorKind::KlWeighted => "kl_weighted",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    pub fn valid_names() -> String {
        Self::ALL.map(|k| k.name()).join(", ")
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    #[serde(rename = "n")]
    BootstrapSize,
    #[serde(rename = "d")]
    Machines,
    #[serde(rename = "N")]
    TotalSize,
    Alpha,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::BootstrapSize => "n",
            SweepAxis::Machines => "d",
            SweepAxis::TotalSize => "N",
            SweepAxis::Alpha => "alpha",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

/// One component of an explicitly given true model. GMM components use
/// `covariance`; PPCA components use `loading` (p rows of q entries) and
/// `noise_var`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentValues {
    pub mean: Vec<f64>,
    #[serde(default)]
    pub covariance: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub loading: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub noise_var: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthValues {
    /// Mixture weights; omitted for PPCA.
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
    pub components: Vec<ComponentValues>,
}

fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
        return Err(Error::InvalidInput(format!("{what} must be a non-empty rectangular array")));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

impl TruthValues {
    pub fn build(&self, spec: &ModelSpec) -> Result<Model> {
        let ppca_comp = |c: &ComponentValues, s: usize| -> Result<PpcaParams> {
            let w = c
                .loading
                .as_ref()
                .ok_or_else(|| Error::InvalidInput(format!("components[{s}].loading is required")))?;
            let sigma2 = c
                .noise_var
                .ok_or_else(|| Error::InvalidInput(format!("components[{s}].noise_var is required")))?;
            PpcaParams::new(DVector::from_vec(c.mean.clone()), matrix_from_rows(w, "loading")?, sigma2)
        };
        let weights = || {
            self.weights
                .clone()
                .ok_or_else(|| Error::InvalidInput("weights are required for mixtures".into()))
        };
        let model = match spec.family {
            Family::Gmm => {
                let means = self.components.iter().map(|c| DVector::from_vec(c.mean.clone())).collect();
                let covs = self
                    .components
                    .iter()
                    .enumerate()
                    .map(|(s, c)| {
                        let rows = c
                            .covariance
                            .as_ref()
                            .ok_or_else(|| Error::InvalidInput(format!("components[{s}].covariance is required")))?;
                        matrix_from_rows(rows, "covariance")
                    })
                    .collect::<Result<Vec<_>>>()?;
                Model::Gmm(GmmParams::new(weights()?, means, covs)?)
            }
            Family::Ppca => {
                if self.components.len() != 1 {
                    return Err(Error::InvalidInput("ppca truth has exactly one component".into()));
                }
                Model::Ppca(ppca_comp(&self.components[0], 0)?)
            }
            Family::MixPpca => {
                let comps = self
                    .components
                    .iter()
                    .enumerate()
                    .map(|(s, c)| ppca_comp(c, s))
                    .collect::<Result<Vec<_>>>()?;
                Model::MixPpca(MixPpcaParams::new(weights()?, comps)?)
            }
        };
        if model.dim() != spec.p || model.n_components() != spec.m || model.latent_dim() != spec.q {
            return Err(Error::InvalidInput(format!(
                "explicit truth has p={}, m={}, q={}; model spec says p={}, m={}, q={}",
                model.dim(),
                model.n_components(),
                model.latent_dim(),
                spec.p,
                spec.m,
                spec.q
            )));
        }
        Ok(model)
    }
}

fn default_holdout() -> usize {
    1000
}

fn default_true() -> bool {
    true
}

/// Experiment description. The bootstrap size comes from exactly one of
/// `n`, `n_tot` (with `n = n_tot / d`) or `alpha` (with
/// `n = round((N/d)^alpha)`), unless the sweep axis supplies it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    #[serde(default)]
    pub truth: Option<TruthValues>,
    #[serde(rename = "N")]
    pub total_size: usize,
    pub d: usize,
    #[serde(default)]
    pub n: Option<usize>,
    #[serde(default)]
    pub n_tot: Option<usize>,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub sweep: Option<Sweep>,
    pub estimators: Vec<String>,
    pub trials: usize,
    pub master_seed: u64,
    #[serde(default)]
    pub fit: FitConfig,
    #[serde(default = "default_holdout")]
    pub holdout_size: usize,
    /// Fit locals and the pooled estimators with BIC over `1..=m_max`
    /// components.
    #[serde(default)]
    pub m_max: Option<usize>,
    /// Match mixture components before linear combination.
    #[serde(default = "default_true")]
    pub matching: bool,
    /// Allow linear combination of PPCA loadings, which are only identified
    /// up to rotation.
    #[serde(default)]
    pub ppca_linear: bool,
    /// Upper clip on log importance weights.
    #[serde(default)]
    pub weight_clip: Option<f64>,
    /// Record wall-clock time per estimator. Off by default so that
    /// record files are byte-reproducible.
    #[serde(default)]
    pub record_timing: bool,
}

/// Sizes at one sweep position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub index: usize,
    pub total_size: usize,
    pub d: usize,
    pub n: usize,
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let field = if path == "." { "<root>".to_string() } else { path };
            Error::Config(vec![ConfigIssue { field, message: e.inner().to_string() }])
        })?;
        Ok(cfg)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    /// Every problem found, each tagged with its field path.
    pub fn issues(&self) -> Vec<ConfigIssue> {
        let mut out = self.model.issues("model.");
        let mut bad = |field: &str, message: String| out.push(ConfigIssue { field: field.to_string(), message });
        if self.trials == 0 {
            bad("trials", "must be at least 1".into());
        }
        if self.holdout_size == 0 {
            bad("holdout_size", "must be at least 1".into());
        }
        let mut seen = BTreeSet::new();
        for (i, name) in self.estimators.iter().enumerate() {
            match EstimatorKind::parse(name) {
                None => bad(
                    &format!("estimators[{i}]"),
                    format!("unknown estimator \"{name}\" (valid: {})", EstimatorKind::valid_names()),
                ),
                Some(k) => {
                    if !seen.insert(k) {
                        bad(&format!("estimators[{i}]"), format!("\"{name}\" listed twice"));
                    }
                }
            }
        }
        if let Some(m) = self.m_max {
            if m == 0 {
                bad("m_max", "must be at least 1".into());
            }
        }
        if let Some(c) = self.weight_clip {
            if !c.is_finite() {
                bad("weight_clip", "must be finite".into());
            }
        }
        if let Some(t) = &self.truth {
            if let Err(e) = t.build(&self.model) {
                bad("truth", e.to_string());
            }
        }
        let axis = self.sweep.as_ref().map(|s| s.axis);
        let supplies_n = matches!(axis, Some(SweepAxis::BootstrapSize | SweepAxis::Alpha));
        let rules = [self.n.is_some(), self.n_tot.is_some(), self.alpha.is_some()].iter().filter(|b| **b).count();
        if supplies_n {
            if rules > 0 {
                bad("sweep.axis", "the sweep supplies n; drop n, n_tot and alpha".into());
            }
        } else if rules != 1 {
            bad("n", "set exactly one of n, n_tot, alpha".into());
        }
        if let Some(a) = self.alpha {
            if !(a > 0.0 && a.is_finite()) {
                bad("alpha", "must be positive".into());
            }
        }
        if let Some(s) = &self.sweep {
            if s.values.is_empty() {
                bad("sweep.values", "must not be empty".into());
            }
            for (i, v) in s.values.iter().enumerate() {
                let integral = matches!(s.axis, SweepAxis::BootstrapSize | SweepAxis::Machines | SweepAxis::TotalSize);
                if !(v.is_finite() && *v > 0.0) || (integral && v.fract() != 0.0) {
                    bad(&format!("sweep.values[{i}]"), format!("{v} is not a valid {} value", s.axis.name()));
                }
            }
        }
        for e in self.fit.issues("fit.") {
            out.push(e);
        }
        if out.is_empty() {
            match self.points_unchecked() {
                Ok(points) => {
                    for pt in points {
                        out.extend(point_issues(self, &pt));
                    }
                }
                Err(issue) => out.push(issue),
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let issues = self.issues();
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(issues))
        }
    }

    pub fn estimator_kinds(&self) -> Vec<EstimatorKind> {
        let mut kinds: Vec<EstimatorKind> = self.estimators.iter().filter_map(|s| EstimatorKind::parse(s)).collect();
        kinds.sort();
        kinds
    }

    /// Replaces `master_seed` with `KLFUSE_SEED_OVERRIDE` when that
    /// variable is set.
    pub fn apply_seed_override(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var("KLFUSE_SEED_OVERRIDE") {
            self.master_seed = v.trim().parse().map_err(|_| {
                Error::Config(vec![ConfigIssue {
                    field: "KLFUSE_SEED_OVERRIDE".into(),
                    message: format!("\"{v}\" is not an unsigned integer"),
                }])
            })?;
        }
        Ok(())
    }

    pub fn points(&self) -> Result<Vec<SweepPoint>> {
        self.validate()?;
        self.points_unchecked().map_err(|i| Error::Config(vec![i]))
    }

    fn points_unchecked(&self) -> std::result::Result<Vec<SweepPoint>, ConfigIssue> {
        let values: Vec<Option<f64>> = match &self.sweep {
            None => vec![None],
            Some(s) => s.values.iter().map(|v| Some(*v)).collect(),
        };
        let axis = self.sweep.as_ref().map(|s| s.axis);
        values
            .into_iter()
            .enumerate()
            .map(|(index, v)| {
                let mut total_size = self.total_size;
                let mut d = self.d;
                let mut alpha = self.alpha;
                let mut n = self.n;
                match (axis, v) {
                    (Some(SweepAxis::BootstrapSize), Some(v)) => n = Some(v as usize),
                    (Some(SweepAxis::Machines), Some(v)) => d = v as usize,
                    (Some(SweepAxis::TotalSize), Some(v)) => total_size = v as usize,
                    (Some(SweepAxis::Alpha), Some(v)) => alpha = Some(v),
                    _ => {}
                }
                let field = match axis {
                    Some(_) => format!("sweep.values[{index}]"),
                    None => "d".to_string(),
                };
                if d == 0 {
                    return Err(ConfigIssue { field, message: "d must be at least 1".into() });
                }
                let n = match (n, self.n_tot, alpha) {
                    (Some(n), _, _) => n,
                    (None, Some(tot), _) => {
                        if tot % d != 0 {
                            return Err(ConfigIssue {
                                field: "n_tot".into(),
                                message: format!("n_tot={tot} is not divisible by d={d}"),
                            });
                        }
                        tot / d
                    }
                    (None, None, Some(a)) => ((total_size as f64 / d as f64).powf(a)).round() as usize,
                    (None, None, None) => {
                        return Err(ConfigIssue { field: "n".into(), message: "no bootstrap size rule".into() })
                    }
                };
                Ok(SweepPoint { index, total_size, d, n })
            })
            .collect()
    }
}

fn point_issues(cfg: &ExperimentConfig, pt: &SweepPoint) -> Vec<ConfigIssue> {
    let field = |name: &str| match &cfg.sweep {
        Some(s) if matches!(
            (s.axis, name),
            (SweepAxis::TotalSize, "N") | (SweepAxis::Machines, "d") | (SweepAxis::BootstrapSize | SweepAxis::Alpha, "n")
        ) =>
        {
            format!("sweep.values[{}]", pt.index)
        }
        _ => name.to_string(),
    };
    let mut out = Vec::new();
    if pt.total_size % pt.d != 0 {
        out.push(ConfigIssue {
            field: field("N"),
            message: format!("N={} is not divisible by d={}", pt.total_size, pt.d),
        });
    } else if pt.total_size / pt.d < 2 {
        out.push(ConfigIssue { field: field("d"), message: "each shard needs at least 2 rows".into() });
    }
    if pt.n < 2 {
        out.push(ConfigIssue { field: field("n"), message: format!("bootstrap size must be at least 2, got {}", pt.n) });
    }
    out
}
