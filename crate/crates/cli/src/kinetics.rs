//! Homogeneous DSMC runs with the H functional, collision-integral moments and
//! diameter scans of the low-density expansion.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use hscorr::correlations::OnePointFn;
use hscorr::kinetics::{
    bg_scaling_probe, bimodal_density, collision_moments, h_functional, maxwellian_density, CollisionQuadrature,
    EnsembleMoments, HEstimate, HistogramSpec, MomentumEnsemble, ScalingProbe,
};
use hscorr::reduction::bump;
use hscorr::{PhasePoint, QuadratureSpec};
use serde::{Deserialize, Serialize};

use crate::output::{create_dir, create_file, JsonLines};
use crate::{require_positive, resolve_seed, CliError, Provenance};

/// Relative tolerance of the final moment test against the Maxwellian.
pub const MOMENT_TOLERANCE: f64 = 0.01;
/// Step-to-step increases of `H` up to this many combined standard errors are noise.
pub const H_ENVELOPE_SIGMAS: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialMomenta {
    Maxwellian { temperature: f64 },
    /// Beams at `±u` along `z`, each a Maxwellian of temperature `beam_temperature`.
    Bimodal { u: f64, beam_temperature: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DsmcConfig {
    pub initial: InitialMomenta,
    pub particles: usize,
    pub density: f64,
    pub sigma: f64,
    pub dt: f64,
    pub steps: usize,
    #[serde(default = "one")]
    pub record_every: usize,
    #[serde(default)]
    pub histogram: HistogramSpec,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollisionConfig {
    pub initial: InitialMomenta,
    pub samples: usize,
}

/// Diameter scan at one observed sphere for data `bump(|q|/R) · bimodal(p)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingConfig {
    pub t: f64,
    pub epsilons: Vec<f64>,
    pub orders: Vec<usize>,
    /// Observed sphere as `[q1, q2, q3, p1, p2, p3]`.
    pub point: [f64; 6],
    pub radius: f64,
    pub u: f64,
    pub beam_temperature: f64,
    pub samples: usize,
    pub beta_prop: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KineticsConfig {
    pub seed: Option<u64>,
    pub dsmc: Option<DsmcConfig>,
    pub collision: Option<CollisionConfig>,
    pub scaling: Option<ScalingConfig>,
}

impl KineticsConfig {
    fn validate(&self) -> Result<(), CliError> {
        if self.dsmc.is_none() && self.collision.is_none() && self.scaling.is_none() {
            return Err(CliError::Config("nothing to run: add a dsmc, collision or scaling section".into()));
        }
        if let Some(d) = &self.dsmc {
            check_initial(&d.initial)?;
            require_positive("density", d.density)?;
            require_positive("sigma", d.sigma)?;
            require_positive("dt", d.dt)?;
            if d.record_every == 0 {
                return Err(CliError::Config("record_every must be at least 1".into()));
            }
        }
        if let Some(c) = &self.collision {
            check_initial(&c.initial)?;
        }
        if let Some(s) = &self.scaling {
            require_positive("t", s.t)?;
            require_positive("radius", s.radius)?;
            require_positive("beam_temperature", s.beam_temperature)?;
            if s.orders.is_empty() || s.orders.iter().any(|&n| n > 1) {
                return Err(CliError::Config("scaling orders must be a nonempty subset of {0, 1}".into()));
            }
        }
        Ok(())
    }
}

fn check_initial(initial: &InitialMomenta) -> Result<(), CliError> {
    match *initial {
        InitialMomenta::Maxwellian { temperature } => require_positive("temperature", temperature),
        InitialMomenta::Bimodal { beam_temperature, .. } => require_positive("beam_temperature", beam_temperature),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolvedKinetics {
    pub seed: u64,
    pub config: KineticsConfig,
}

pub fn resolve(mut config: KineticsConfig, seed_flag: Option<u64>) -> Result<ResolvedKinetics, CliError> {
    let seed = resolve_seed(seed_flag, config.seed)?;
    config.seed = Some(seed);
    config.validate()?;
    Ok(ResolvedKinetics { seed, config })
}

/// One row of the time series.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimeSeriesRow {
    pub step: usize,
    pub t: f64,
    pub rho: f64,
    pub mean_x: f64,
    pub mean_y: f64,
    pub mean_z: f64,
    pub temperature: f64,
    pub temperature_x: f64,
    pub temperature_y: f64,
    pub temperature_z: f64,
    pub kurtosis_ratio: f64,
    pub h: f64,
    pub h_std_error: f64,
    pub h_empty_fraction: f64,
    pub collisions: usize,
}

impl TimeSeriesRow {
    fn new(step: usize, ens: &MomentumEnsemble, m: &EnsembleMoments, h: &HEstimate, collisions: usize) -> Self {
        TimeSeriesRow {
            step,
            t: ens.time,
            rho: ens.density,
            mean_x: m.mean[0],
            mean_y: m.mean[1],
            mean_z: m.mean[2],
            temperature: m.temperature,
            temperature_x: m.temperature_axes[0],
            temperature_y: m.temperature_axes[1],
            temperature_z: m.temperature_axes[2],
            kurtosis_ratio: m.kurtosis_ratio,
            h: h.value,
            h_std_error: h.std_error,
            h_empty_fraction: h.empty_fraction,
            collisions,
        }
    }
}

/// A pass/fail line of the kinetics summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub check: String,
    pub passed: bool,
    pub detail: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingRow {
    pub epsilon: f64,
    pub n: usize,
    pub magnitude: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct KineticsOutput {
    pub series: Vec<TimeSeriesRow>,
    pub scaling: Vec<ScalingRow>,
    pub summaries: Vec<Summary>,
}

impl KineticsOutput {
    pub fn passed(&self) -> bool {
        self.summaries.iter().all(|s| s.passed)
    }

    pub fn summary(&self, check: &str) -> Option<&Summary> {
        self.summaries.iter().find(|s| s.check == check)
    }
}

pub fn evaluate(resolved: &ResolvedKinetics) -> Result<KineticsOutput, CliError> {
    let mut out = KineticsOutput::default();
    let seed = resolved.seed;
    if let Some(d) = &resolved.config.dsmc {
        run_dsmc(d, seed, &mut out)?;
    }
    if let Some(c) = &resolved.config.collision {
        run_collision(c, seed, &mut out)?;
    }
    if let Some(s) = &resolved.config.scaling {
        run_scaling(s, seed, &mut out)?;
    }
    Ok(out)
}

fn run_dsmc(d: &DsmcConfig, seed: u64, out: &mut KineticsOutput) -> Result<(), CliError> {
    let mut ens = match d.initial {
        InitialMomenta::Maxwellian { temperature } => {
            MomentumEnsemble::maxwellian(d.particles, temperature, [0.0; 3], d.density, seed)?
        }
        InitialMomenta::Bimodal { u, beam_temperature } => {
            MomentumEnsemble::bimodal(d.particles, u, beam_temperature, d.density, seed)?
        }
    };
    let initial = ens.moments();
    let mut collisions = 0;
    for step in 0..=d.steps {
        if step % d.record_every == 0 || step == d.steps {
            let h = h_functional(&ens.momenta, &d.histogram)?;
            out.series.push(TimeSeriesRow::new(step, &ens, &ens.moments(), &h, collisions));
        }
        if step < d.steps {
            collisions = ens.step(d.dt, d.sigma, seed)?;
        }
    }
    out.summaries.push(h_monotone(&out.series));
    out.summaries.push(maxwellian_moments(&initial, &ens.moments(), ens.len()));
    Ok(())
}

/// Largest step-to-step increase of `H` relative to its noise envelope.
fn h_monotone(series: &[TimeSeriesRow]) -> Summary {
    let mut worst_ratio = 0.0f64;
    let mut worst_step = 0;
    for w in series.windows(2) {
        let envelope = H_ENVELOPE_SIGMAS * (w[0].h_std_error.powi(2) + w[1].h_std_error.powi(2)).sqrt();
        let ratio = (w[1].h - w[0].h) / envelope;
        if ratio > worst_ratio {
            worst_ratio = ratio;
            worst_step = w[1].step;
        }
    }
    let (first, last) = (series.first(), series.last());
    Summary {
        check: "h_non_increasing".into(),
        passed: worst_ratio <= 1.0,
        detail: serde_json::json!({
            "worst_increase_over_envelope": worst_ratio,
            "worst_step": worst_step,
            "envelope_sigmas": H_ENVELOPE_SIGMAS,
            "h_initial": first.map(|r| r.h),
            "h_final": last.map(|r| r.h),
        }),
    }
}

/// Compares the final moments with a Maxwellian of the initial density, mean and temperature.
fn maxwellian_moments(initial: &EnsembleMoments, last: &EnsembleMoments, n: usize) -> Summary {
    let t = initial.temperature;
    let mean_shift = (0..3).map(|k| (last.mean[k] - initial.mean[k]).abs()).fold(0.0, f64::max) / t.sqrt();
    let temperature_shift = (last.temperature / t - 1.0).abs();
    let axes = (0..3).map(|k| (last.temperature_axes[k] / t - 1.0).abs()).fold(0.0, f64::max);
    let kurtosis = (last.kurtosis_ratio - 1.0).abs();
    let worst = mean_shift.max(temperature_shift).max(axes).max(kurtosis);
    Summary {
        check: "maxwellian_moments".into(),
        passed: worst <= MOMENT_TOLERANCE,
        detail: serde_json::json!({
            "particles": n,
            "temperature": t,
            "mean_shift": mean_shift,
            "temperature_shift": temperature_shift,
            "axis_temperature_deviation": axes,
            "kurtosis_deviation": kurtosis,
            "tolerance": MOMENT_TOLERANCE,
        }),
    }
}

fn run_collision(c: &CollisionConfig, seed: u64, out: &mut KineticsOutput) -> Result<(), CliError> {
    let quad = CollisionQuadrature::new(c.samples, seed);
    let moments = match c.initial {
        InitialMomenta::Maxwellian { temperature } => {
            collision_moments(&move |p: &hscorr::Vec3| maxwellian_density(temperature, [0.0; 3], p), &quad)?
        }
        InitialMomenta::Bimodal { u, beam_temperature } => collision_moments(&bimodal_density(u, beam_temperature), &quad)?,
    };
    let passed = moments.iter().all(|m| m.covers(0.0, 3.0));
    out.summaries.push(Summary {
        check: "collision_invariants_vanish".into(),
        passed,
        detail: serde_json::json!({
            "invariants": ["1", "p_x", "p_y", "p_z", "p^2/2"],
            "moments": moments,
            "sigmas": 3.0,
        }),
    });
    Ok(())
}

/// Expected slope and tolerance of the order-`n` magnitude against `log ε`.
pub fn expected_slope(n: usize) -> (f64, f64) {
    if n == 0 { (0.0, 0.1) } else { (2.0, 0.3) }
}

fn run_scaling(s: &ScalingConfig, seed: u64, out: &mut KineticsOutput) -> Result<(), CliError> {
    let (radius, u, t0) = (s.radius, s.u, s.beam_temperature);
    let beams = bimodal_density(u, t0);
    let f0: Arc<OnePointFn> = Arc::new(move |x: &PhasePoint| bump(radius, &x.q) * beams(&x.p));
    let x = [PhasePoint::new([s.point[0], s.point[1], s.point[2]], [s.point[3], s.point[4], s.point[5]])];
    let beta = 1.0 / (t0 + u * u / 3.0);
    let spec = QuadratureSpec {
        n_max: 1,
        samples: s.samples,
        beta_prop: s.beta_prop,
        seed,
        ..QuadratureSpec::default()
    };
    for &n in &s.orders {
        let probe: ScalingProbe = bg_scaling_probe(s.t, &x, n, &s.epsilons, f0.clone(), radius, beta, &spec)?;
        out.scaling.extend(probe.points.iter().map(|p| ScalingRow {
            epsilon: p.epsilon,
            n,
            magnitude: p.magnitude,
            std_error: p.std_error,
        }));
        let (expected, tolerance) = expected_slope(n);
        let passed = if n == 0 {
            // order 0 does not depend on the diameter at all
            (probe.slope - expected).abs() <= tolerance
        } else {
            !probe.inconclusive && (probe.slope - expected).abs() <= tolerance
        };
        out.summaries.push(Summary {
            check: format!("scaling_order_{n}"),
            passed,
            detail: serde_json::json!({
                "slope": probe.slope,
                "expected": expected,
                "tolerance": tolerance,
                "inconclusive": probe.inconclusive,
            }),
        });
    }
    Ok(())
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T], provenance: &Provenance) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(create_file(path)?);
    for (i, row) in rows.iter().enumerate() {
        let value = crate::output::with_provenance(provenance, row)?;
        if let serde_json::Value::Object(map) = value {
            if i == 0 {
                w.write_record(map.keys())?;
            }
            w.write_record(map.values().map(csv_field))?;
        }
    }
    w.flush().map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn csv_field(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Output files of a kinetics run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KineticsFiles {
    pub timeseries: Option<PathBuf>,
    pub scaling: Option<PathBuf>,
    pub summary: PathBuf,
}

pub fn run(resolved: &ResolvedKinetics, out_dir: &Path) -> Result<(KineticsOutput, KineticsFiles), CliError> {
    let output = evaluate(resolved)?;
    let provenance = Provenance::new(resolved.seed, resolved)?;
    create_dir(out_dir)?;
    let mut files = KineticsFiles {
        timeseries: None,
        scaling: None,
        summary: out_dir.join("kinetics.jsonl"),
    };
    if !output.series.is_empty() {
        let path = out_dir.join("timeseries.csv");
        write_csv(&path, &output.series, &provenance)?;
        files.timeseries = Some(path);
    }
    if !output.scaling.is_empty() {
        let path = out_dir.join("scaling.csv");
        write_csv(&path, &output.scaling, &provenance)?;
        files.scaling = Some(path);
    }
    let mut summary = JsonLines::create(files.summary.clone(), provenance)?;
    for s in &output.summaries {
        summary.write(s)?;
    }
    summary.finish()?;
    Ok((output, files))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parse_config;

    const SMALL: &str = r#"
[dsmc]
particles = 4000
density = 1.0
sigma = 1.0
dt = 0.004
steps = 20
record_every = 5
initial = { kind = "maxwellian", temperature = 1.0 }
histogram = { bins_per_axis = 6 }

[collision]
samples = 5000
initial = { kind = "bimodal", u = 1.0, beam_temperature = 0.5 }
"#;

    #[test]
    fn small_run_records_every_fifth_step() {
        let cfg: KineticsConfig = parse_config(SMALL).unwrap();
        let out = evaluate(&resolve(cfg, Some(2)).unwrap()).unwrap();
        let steps: Vec<usize> = out.series.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![0, 5, 10, 15, 20]);
        assert!(out.summary("collision_invariants_vanish").unwrap().passed);
    }

    #[test]
    fn empty_config_is_rejected() {
        let cfg: KineticsConfig = parse_config("seed = 1").unwrap();
        assert!(matches!(resolve(cfg, None), Err(CliError::Config(_))));
    }

    #[test]
    fn monotone_check_uses_the_envelope() {
        let row = |step, h| TimeSeriesRow {
            step,
            t: 0.0,
            rho: 1.0,
            mean_x: 0.0,
            mean_y: 0.0,
            mean_z: 0.0,
            temperature: 1.0,
            temperature_x: 1.0,
            temperature_y: 1.0,
            temperature_z: 1.0,
            kurtosis_ratio: 1.0,
            h,
            h_std_error: 0.01,
            h_empty_fraction: 0.0,
            collisions: 0,
        };
        assert!(h_monotone(&[row(0, 1.0), row(1, 1.02)]).passed);
        assert!(!h_monotone(&[row(0, 1.0), row(1, 1.1)]).passed);
    }
}
