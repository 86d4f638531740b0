//! Experiment configuration: a sectioned `key = value` file parsed with
//! unknown-key rejection, re-emitted in a canonical form and hashed for
//! provenance.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::admm::AdmmConfig;
use crate::error::{Error, Result};
use crate::net::{Activation, ArchConfig};
use crate::recon::OsemConfig;
use crate::sim::{GeometryConfig, PhantomSpec};
use crate::train::{derive_seed, log_uniform_doses, Phase, SimulationPlan, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub phantoms: PhantomSection,
    pub geometry: GeometrySection,
    pub simulation: SimulationSection,
    #[serde(default)]
    pub osem: OsemSection,
    #[serde(default)]
    pub net: NetSection,
    pub train: TrainSections,
    #[serde(default)]
    pub admm: AdmmSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub certify: CertifySection,
    #[serde(default)]
    pub paths: PathsSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSection {
    pub count: usize,
    pub grid_size: usize,
    /// The last `n_test` phantoms form the test split.
    pub n_test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometrySection {
    pub n_angles: usize,
    pub n_bins: usize,
    #[serde(default = "one")]
    pub bin_width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    pub doses_per_phantom: usize,
    pub dose_low: f64,
    pub dose_high: f64,
    #[serde(default = "default_background")]
    pub background_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OsemSection {
    #[serde(default = "default_osem_iterations")]
    pub n_iterations: usize,
    /// 0 picks the largest divisor of the angle count not above 14.
    #[serde(default)]
    pub n_subsets: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSection {
    #[serde(default = "default_layers")]
    pub n_layers: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default = "default_activation")]
    pub activation: String,
    #[serde(default = "yes")]
    pub global_skip: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSections {
    #[serde(default = "PhaseSection::pre")]
    pub pre: PhaseSection,
    #[serde(default = "PhaseSection::jac")]
    pub jac: PhaseSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSection {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub beta: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_power_iters")]
    pub power_iters: usize,
    #[serde(default = "default_eval_power_iters")]
    pub eval_power_iters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdmmSection {
    /// Required by `reconstruct` unless given on the command line.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(default = "default_admm_iterations")]
    pub n_iterations: usize,
    #[serde(default = "default_inner")]
    pub n_inner: usize,
    #[serde(default = "default_inner_tol")]
    pub inner_tol: f64,
    #[serde(default)]
    pub record_t_residual: bool,
    /// Which dose level of each test phantom is reconstructed.
    #[serde(default)]
    pub dose_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    /// Empty selects the pilot-centered default grid.
    #[serde(default)]
    pub rhos: Vec<f64>,
    #[serde(default = "default_pilot")]
    pub pilot_iterations: usize,
    /// Position of the swept simulation among the reconstructed test ones.
    #[serde(default)]
    pub test_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertifySection {
    #[serde(default = "default_samples")]
    pub n_samples: usize,
    #[serde(default = "default_cert_power_iters")]
    pub power_iters: usize,
    /// Relative change of the estimate that ends the power iteration early.
    #[serde(default = "default_cert_tol")]
    pub power_tol: f64,
    #[serde(default = "default_margin")]
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    #[serde(default = "default_data_dir")]
    pub data_dir: PathBuf,
    #[serde(default = "default_checkpoint_dir")]
    pub checkpoint_dir: PathBuf,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn one() -> f64 {
    1.0
}
fn yes() -> bool {
    true
}
fn default_background() -> f64 {
    0.2
}
fn default_osem_iterations() -> usize {
    8
}
fn default_layers() -> usize {
    ArchConfig::default().n_layers
}
fn default_channels() -> usize {
    ArchConfig::default().channels
}
fn default_kernel() -> usize {
    ArchConfig::default().kernel
}
fn default_activation() -> String {
    "softplus-shifted".into()
}
fn default_alpha() -> f64 {
    0.1
}
fn default_epsilon() -> f64 {
    0.05
}
fn default_power_iters() -> usize {
    10
}
fn default_eval_power_iters() -> usize {
    30
}
fn default_admm_iterations() -> usize {
    40
}
fn default_inner() -> usize {
    30
}
fn default_inner_tol() -> f64 {
    1e-8
}
fn default_pilot() -> usize {
    20
}
fn default_samples() -> usize {
    100
}
fn default_cert_power_iters() -> usize {
    50
}
fn default_cert_tol() -> f64 {
    1e-7
}
fn default_margin() -> f64 {
    0.05
}
fn default_data_dir() -> PathBuf {
    "data".into()
}
fn default_checkpoint_dir() -> PathBuf {
    "checkpoints".into()
}
fn default_output_dir() -> PathBuf {
    "results".into()
}

impl Default for OsemSection {
    fn default() -> Self {
        OsemSection { n_iterations: default_osem_iterations(), n_subsets: 0 }
    }
}

impl Default for NetSection {
    fn default() -> Self {
        NetSection {
            n_layers: default_layers(),
            channels: default_channels(),
            kernel: default_kernel(),
            activation: default_activation(),
            global_skip: true,
        }
    }
}

impl PhaseSection {
    fn from_train(cfg: TrainConfig) -> Self {
        PhaseSection {
            epochs: cfg.epochs,
            learning_rate: cfg.learning_rate,
            batch_size: cfg.batch_size,
            beta: cfg.beta,
            alpha: cfg.alpha,
            epsilon: cfg.epsilon,
            power_iters: cfg.power_iters,
            eval_power_iters: cfg.eval_power_iters,
        }
    }

    pub fn pre() -> Self {
        Self::from_train(TrainConfig::pre_defaults(0))
    }

    pub fn jac() -> Self {
        Self::from_train(TrainConfig::jac_defaults(0))
    }
}

impl Default for AdmmSection {
    fn default() -> Self {
        AdmmSection {
            rho: None,
            n_iterations: default_admm_iterations(),
            n_inner: default_inner(),
            inner_tol: default_inner_tol(),
            record_t_residual: false,
            dose_index: 0,
        }
    }
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection { rhos: Vec::new(), pilot_iterations: default_pilot(), test_index: 0 }
    }
}

impl Default for CertifySection {
    fn default() -> Self {
        CertifySection {
            n_samples: default_samples(),
            power_iters: default_cert_power_iters(),
            power_tol: default_cert_tol(),
            margin: default_margin(),
        }
    }
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            data_dir: default_data_dir(),
            checkpoint_dir: default_checkpoint_dir(),
            output_dir: default_output_dir(),
        }
    }
}

pub fn parse_activation(name: &str) -> Result<Activation> {
    match name {
        "softplus-shifted" => Ok(Activation::SoftplusShifted),
        "relu" => Ok(Activation::Relu),
        "identity" => Ok(Activation::Identity),
        other => Err(Error::Config(format!(
            "net.activation: unknown activation {other:?} (expected softplus-shifted, relu or identity)"
        ))),
    }
}

fn check(cond: bool, key: &str, msg: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Config(format!("{key}: {msg}")))
    }
}

impl ExperimentConfig {
    /// Parses and validates. Errors name the offending key or line.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths in `[paths]` are resolved
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.paths.data_dir, &mut cfg.paths.checkpoint_dir, &mut cfg.paths.output_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// All keys, defaults filled in, in a fixed order.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serialization cannot fail")
    }

    /// SHA-256 of the canonical form, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.phantoms;
        check(p.count >= 2, "phantoms.count", "at least 2 phantoms are needed")?;
        check(p.n_test >= 1 && p.n_test < p.count, "phantoms.n_test", "must be in 1..count")?;
        check(p.grid_size >= 8, "phantoms.grid_size", "must be at least 8")?;
        self.geometry().validate(p.grid_size).map_err(|e| Error::Config(format!("geometry: {e}")))?;
        let s = &self.simulation;
        check(s.doses_per_phantom >= 1, "simulation.doses_per_phantom", "must be at least 1")?;
        check(s.dose_low > 0.0 && s.dose_low.is_finite(), "simulation.dose_low", "must be positive")?;
        check(s.dose_high >= s.dose_low && s.dose_high.is_finite(), "simulation.dose_high", "must be >= dose_low")?;
        check(
            (0.0..1.0).contains(&s.background_fraction),
            "simulation.background_fraction",
            "must be in [0, 1)",
        )?;
        self.osem().validate(self.geometry.n_angles).map_err(|e| Error::Config(format!("osem: {e}")))?;
        self.arch()?.validate().map_err(|e| Error::Config(format!("net: {e}")))?;
        for phase in [Phase::Pre, Phase::Jac] {
            self.train_config(phase)
                .validate()
                .map_err(|e| Error::Config(format!("train.{}: {e}", phase.as_str())))?;
        }
        let a = &self.admm;
        if let Some(rho) = a.rho {
            check(rho > 0.0 && rho.is_finite(), "admm.rho", "must be positive")?;
        }
        check(a.n_iterations >= 1, "admm.n_iterations", "must be at least 1")?;
        check(a.n_inner >= 1, "admm.n_inner", "must be at least 1")?;
        check(a.inner_tol >= 0.0, "admm.inner_tol", "must be nonnegative")?;
        check(a.dose_index < s.doses_per_phantom, "admm.dose_index", "must be below doses_per_phantom")?;
        check(
            self.sweep.rhos.iter().all(|r| *r > 0.0 && r.is_finite()),
            "sweep.rhos",
            "all values must be positive",
        )?;
        check(self.sweep.pilot_iterations >= 1, "sweep.pilot_iterations", "must be at least 1")?;
        check(self.sweep.test_index < p.n_test, "sweep.test_index", "must be below phantoms.n_test")?;
        let c = &self.certify;
        check(c.n_samples >= 1, "certify.n_samples", "must be at least 1")?;
        check(c.power_iters >= 1, "certify.power_iters", "must be at least 1")?;
        check(c.power_tol >= 0.0, "certify.power_tol", "must be nonnegative")?;
        check(c.margin >= 0.0, "certify.margin", "must be nonnegative")?;
        Ok(())
    }

    pub fn geometry(&self) -> GeometryConfig {
        GeometryConfig {
            n_angles: self.geometry.n_angles,
            n_bins: self.geometry.n_bins,
            bin_width: self.geometry.bin_width,
        }
    }

    pub fn osem(&self) -> OsemConfig {
        let mut cfg = OsemConfig::default_for(self.geometry.n_angles);
        cfg.n_iterations = self.osem.n_iterations;
        if self.osem.n_subsets > 0 {
            cfg.n_subsets = self.osem.n_subsets;
        }
        cfg
    }

    pub fn arch(&self) -> Result<ArchConfig> {
        Ok(ArchConfig {
            n_layers: self.net.n_layers,
            channels: self.net.channels,
            kernel: self.net.kernel,
            activation: parse_activation(&self.net.activation)?,
            global_skip: self.net.global_skip,
        })
    }

    pub fn phantom_specs(&self) -> Vec<PhantomSpec> {
        (0..self.phantoms.count)
            .map(|pid| PhantomSpec::brain_like(self.phantoms.grid_size, derive_seed(self.seed, &[pid as u64, 0xF4])))
            .collect()
    }

    /// Dose levels per phantom, sorted ascending.
    pub fn doses(&self) -> Vec<Vec<f64>> {
        let s = &self.simulation;
        (0..self.phantoms.count)
            .map(|pid| {
                let mut d = log_uniform_doses(
                    s.doses_per_phantom,
                    s.dose_low,
                    s.dose_high,
                    derive_seed(self.seed, &[pid as u64, 0xD0]),
                );
                d.sort_by(f64::total_cmp);
                d
            })
            .collect()
    }

    pub fn simulation_plan(&self) -> SimulationPlan {
        SimulationPlan {
            geometry: self.geometry(),
            background_fraction: self.simulation.background_fraction,
            doses: self.doses(),
            n_test_phantoms: self.phantoms.n_test,
            seed: self.seed,
            osem: self.osem(),
        }
    }

    pub fn train_config(&self, phase: Phase) -> TrainConfig {
        let (s, tag) = match phase {
            Phase::Pre => (&self.train.pre, 1),
            Phase::Jac => (&self.train.jac, 2),
        };
        TrainConfig {
            phase,
            epochs: s.epochs,
            learning_rate: s.learning_rate,
            batch_size: s.batch_size,
            beta: s.beta,
            alpha: s.alpha,
            epsilon: s.epsilon,
            power_iters: s.power_iters,
            eval_power_iters: s.eval_power_iters,
            seed: derive_seed(self.seed, &[0x7A, tag]),
        }
    }

    pub fn init_seed(&self) -> u64 {
        derive_seed(self.seed, &[0x1417])
    }

    pub fn admm_config(&self, rho: f64, n_iterations: Option<usize>) -> AdmmConfig {
        AdmmConfig {
            rho,
            n_iterations: n_iterations.unwrap_or(self.admm.n_iterations),
            n_inner: self.admm.n_inner,
            inner_tol: self.admm.inner_tol,
            record_t_residual: self.admm.record_t_residual,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 3
[phantoms]
count = 3
grid_size = 16
n_test = 1
[geometry]
n_angles = 12
n_bins = 24
[simulation]
doses_per_phantom = 2
dose_low = 0.5
dose_high = 1.0
[train]
"#;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.admm.n_iterations, 40);
        assert_eq!(cfg.train.pre.epochs, 50);
        assert_eq!(cfg.train.jac.batch_size, 5);
        assert_eq!(cfg.train.jac.beta, 10.0);
        assert_eq!(cfg.osem().n_subsets, 12);
    }

    #[test]
    fn canonical_form_is_a_fixed_point() {
        let cfg = ExperimentConfig::parse(MINIMAL).unwrap();
        let text = cfg.canonical();
        let again = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.canonical(), text);
        assert_eq!(again.hash(), cfg.hash());
    }

    #[test]
    fn unknown_key_names_the_key() {
        let text = MINIMAL.replace("n_bins = 24", "n_bins = 24\nbins_per_mm = 3");
        let err = ExperimentConfig::parse(&text).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("bins_per_mm"), "{err}");
    }

    #[test]
    fn invalid_value_names_the_key() {
        let text = MINIMAL.replace("n_test = 1", "n_test = 3");
        let err = ExperimentConfig::parse(&text).unwrap_err();
        assert!(err.to_string().contains("phantoms.n_test"), "{err}");
    }

    #[test]
    fn doses_are_sorted_and_in_range() {
        let cfg = ExperimentConfig::parse(MINIMAL).unwrap();
        for d in cfg.doses() {
            assert!(d.windows(2).all(|w| w[0] <= w[1]));
            assert!(d.iter().all(|&x| (0.5..=1.0).contains(&x)));
        }
    }
}
