//! Reduced distribution and correlation functions for bump initial data.

use std::path::{Path, PathBuf};

use hscorr::reduction::{
    dispersion_functional, estimate_f, estimate_f_ratio, estimate_g, fg_consistency, grand_partition_estimate,
};
use hscorr::{Engine, InitialData, PhasePoint, QuadratureSpec, ReducedEstimate};
use serde::{Deserialize, Serialize};

use crate::output::{create_dir, JsonLines};
use crate::{require_positive, resolve_seed, CliError, Provenance};

/// `g₁⁰ = ρ₀ · bump(|q|/R) · Maxwellian(β)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BumpConfig {
    pub rho0: f64,
    pub radius: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadratureConfig {
    pub n_max: usize,
    pub samples: usize,
    pub beta_prop: Option<f64>,
    pub box_half: Option<f64>,
    pub pathology_budget: usize,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        let d = QuadratureSpec::default();
        QuadratureConfig {
            n_max: d.n_max,
            samples: d.samples,
            beta_prop: d.beta_prop,
            box_half: d.box_half,
            pathology_budget: d.pathology_budget,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// `F_s` through the cluster expansion of the correlations.
    F,
    /// `F_s` as a ratio of grand canonical sums.
    FRatio,
    G,
    /// `F_s` against the sum over partitions of products of `G`.
    Fg,
    /// The truncated grand partition function.
    Partition,
    Dispersion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Observable {
    Number,
    Energy,
    MomentumX,
}

impl Observable {
    fn eval(self, x: &PhasePoint) -> f64 {
        match self {
            Observable::Number => 1.0,
            Observable::Energy => 0.5 * x.p.iter().map(|c| c * c).sum::<f64>(),
            Observable::MomentumX => x.p[0],
        }
    }
}

/// One estimate requested at every time of the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Task {
    pub kind: TaskKind,
    /// Observed spheres as `[q1, q2, q3, p1, p2, p3]`.
    #[serde(default)]
    pub points: Vec<[f64; 6]>,
    pub observable: Option<Observable>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReduceConfig {
    pub seed: Option<u64>,
    pub sigma: f64,
    pub times: Vec<f64>,
    pub initial: BumpConfig,
    #[serde(default)]
    pub quadrature: QuadratureConfig,
    #[serde(rename = "task")]
    pub tasks: Vec<Task>,
}

impl ReduceConfig {
    fn validate(&self) -> Result<(), CliError> {
        require_positive("rho0", self.initial.rho0)?;
        require_positive("radius", self.initial.radius)?;
        require_positive("beta", self.initial.beta)?;
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(CliError::Config(format!("sigma must be nonnegative, got {}", self.sigma)));
        }
        if self.times.is_empty() || self.tasks.is_empty() {
            return Err(CliError::Config("at least one time and one task are required".into()));
        }
        if self.quadrature.samples < 2 {
            return Err(CliError::Config("quadrature needs at least two samples".into()));
        }
        for task in &self.tasks {
            let needs_points = !matches!(task.kind, TaskKind::Partition | TaskKind::Dispersion);
            if needs_points == task.points.is_empty() {
                return Err(CliError::Config(format!("{:?} task: points are required exactly for F, F_ratio, G and FG", task.kind)));
            }
            if (task.kind == TaskKind::Dispersion) != task.observable.is_some() {
                return Err(CliError::Config("an observable is required exactly for dispersion tasks".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckStatus {
    Pass,
    Fail,
}

/// A check attached to a record: a closed form or an identity.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecordCheck {
    pub name: &'static str,
    pub reference: f64,
    pub residual: f64,
    pub tolerance: f64,
    pub status: CheckStatus,
}

impl RecordCheck {
    fn new(name: &'static str, reference: f64, residual: f64, tolerance: f64) -> Self {
        let status = if residual <= tolerance { CheckStatus::Pass } else { CheckStatus::Fail };
        RecordCheck {
            name,
            reference,
            residual,
            tolerance,
            status,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReduceRecord {
    pub task: usize,
    pub kind: TaskKind,
    pub t: f64,
    pub sigma: f64,
    pub n_max: usize,
    pub samples: usize,
    pub points: Vec<[f64; 6]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub estimate: Option<ReducedEstimate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub result: Option<serde_json::Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub check: Option<RecordCheck>,
}

impl ReduceRecord {
    pub fn passed(&self) -> bool {
        self.check.as_ref().is_none_or(|c| c.status == CheckStatus::Pass)
    }
}

/// Configuration after command-line overrides; this is what gets hashed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolvedReduce {
    pub seed: u64,
    pub config: ReduceConfig,
}

pub fn resolve(mut config: ReduceConfig, seed_flag: Option<u64>) -> Result<ResolvedReduce, CliError> {
    let seed = resolve_seed(seed_flag, config.seed)?;
    config.seed = Some(seed);
    config.validate()?;
    Ok(ResolvedReduce { seed, config })
}

fn to_points(raw: &[[f64; 6]]) -> Vec<PhasePoint> {
    raw.iter()
        .map(|r| PhasePoint::new([r[0], r[1], r[2]], [r[3], r[4], r[5]]))
        .collect()
}

pub fn evaluate(resolved: &ResolvedReduce) -> Result<Vec<ReduceRecord>, CliError> {
    let cfg = &resolved.config;
    let init = InitialData::bump(cfg.initial.rho0, cfg.initial.radius, cfg.initial.beta)?;
    let engine = Engine::new(cfg.sigma);
    let q = &cfg.quadrature;
    let spec = QuadratureSpec {
        n_max: q.n_max,
        samples: q.samples,
        beta_prop: q.beta_prop,
        box_half: q.box_half,
        seed: resolved.seed,
        workers: 0,
        pathology_budget: q.pathology_budget,
    };
    let mut records = Vec::new();
    for &t in &cfg.times {
        for (index, task) in cfg.tasks.iter().enumerate() {
            let x = to_points(&task.points);
            let mut record = ReduceRecord {
                task: index,
                kind: task.kind,
                t,
                sigma: cfg.sigma,
                n_max: q.n_max,
                samples: q.samples,
                points: task.points.clone(),
                estimate: None,
                result: None,
                check: None,
            };
            match task.kind {
                TaskKind::F | TaskKind::FRatio => {
                    let est = if task.kind == TaskKind::F {
                        estimate_f(&engine, t, &x, &init, &spec)?
                    } else {
                        estimate_f_ratio(&engine, t, &x, &init, &spec)?
                    };
                    if cfg.sigma == 0.0 && x.len() == 1 {
                        record.check = Some(free_transport_check(&init, &engine, t, &x, &est)?);
                    }
                    record.estimate = Some(est);
                }
                TaskKind::G => record.estimate = Some(estimate_g(&engine, t, &x, &init, &spec)?),
                TaskKind::Partition => record.estimate = Some(grand_partition_estimate(&engine, t, &init, &spec)?),
                TaskKind::Fg => {
                    let c = fg_consistency(&engine, t, &x, &init, &spec)?;
                    record.check = Some(RecordCheck::new("cluster_relation", c.cluster_sum, c.residual, 3.0 * c.combined_std_error));
                    record.result = Some(serde_json::to_value(&c)?);
                }
                TaskKind::Dispersion => {
                    let observable = task.observable.expect("validated");
                    let a = move |x: &PhasePoint| observable.eval(x);
                    let d = dispersion_functional(&engine, t, &a, &init, &spec)?;
                    record.result = Some(serde_json::to_value(&d)?);
                }
            }
            records.push(record);
        }
    }
    Ok(records)
}

/// Point particles never interact, so `F₁(t, x) = g₁⁰(q − pt, p)`.
fn free_transport_check(init: &InitialData, engine: &Engine, t: f64, x: &[PhasePoint], est: &ReducedEstimate) -> Result<RecordCheck, CliError> {
    let reference = init.correlation(engine, 0.0, &[x[0].streamed(-t)])?;
    let residual = (est.value - reference).abs();
    let tolerance = 3.0 * est.std_error + 1e-12 * reference.abs().max(1.0);
    Ok(RecordCheck::new("free_transport", reference, residual, tolerance))
}

/// Evaluates the configuration and writes `reduce.jsonl` under `out`.
pub fn run(resolved: &ResolvedReduce, out: &Path) -> Result<(Vec<ReduceRecord>, PathBuf), CliError> {
    let records = evaluate(resolved)?;
    create_dir(out)?;
    let mut writer = JsonLines::create(out.join("reduce.jsonl"), Provenance::new(resolved.seed, resolved)?)?;
    for r in &records {
        writer.write(r)?;
    }
    Ok((records, writer.finish()?))
}
