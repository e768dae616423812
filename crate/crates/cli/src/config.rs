//! Experiment configuration: a versioned TOML tree, unknown keys rejected.

use std::path::Path;

use num_complex::Complex64;
use serde::Deserialize;

use semilab_core::helmholtz::{Grid, Layer};
use semilab_core::measure::{MeasureSetup, Observable};
use semilab_core::potential_flow::{ClassifyParams, EnergySpec, Potential, PotentialPair, SamplerConfig};
use semilab_core::source::{Profile, SourceManifold};
use semilab_core::wkb::{InitialProfile, WkbConfig, WkbSetup};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    pub h_list: Vec<f64>,
    #[serde(default = "default_ppw")]
    pub points_per_wavelength: f64,
    pub potential: PotentialConfig,
    pub energy: EnergyConfig,
    pub source: SourceConfig,
    #[serde(default)]
    pub profile: ProfileConfig,
    pub grid: GridConfig,
    #[serde(default)]
    pub observables: Vec<ObservableConfig>,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub flow: FlowConfig,
    #[serde(default)]
    pub wkb: WkbSection,
    #[serde(default)]
    pub checks: ChecksConfig,
}

fn default_ppw() -> f64 {
    32.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianConfig {
    pub amplitude: f64,
    pub center: Vec<f64>,
    pub width: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialConfig {
    pub dimension: usize,
    #[serde(default = "one")]
    pub rho: f64,
    #[serde(default)]
    pub v1: Vec<GaussianConfig>,
    #[serde(default)]
    pub v2: Vec<GaussianConfig>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyConfig {
    pub e0: f64,
    /// `[re, im]` of `E1`.
    #[serde(default)]
    pub e1: [f64; 2],
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "lowercase", tag = "kind")]
pub enum SourceConfig {
    Point {
        center: Vec<f64>,
        #[serde(default = "one")]
        amplitude: f64,
    },
    Circle {
        center: [f64; 2],
        radius: f64,
        #[serde(default = "one")]
        amplitude: f64,
    },
    Segment {
        a: [f64; 2],
        b: [f64; 2],
        #[serde(default = "one")]
        amplitude: f64,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileConfig {
    pub scale: f64,
    pub width: f64,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self { scale: 1.0, width: 1.0 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub half_extent: f64,
    #[serde(default)]
    pub layer_width: f64,
    #[serde(default)]
    pub layer_strength: f64,
    /// Weight exponent of the reported `L^{2,alpha}` norm.
    #[serde(default = "one")]
    pub alpha: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservableConfig {
    pub x: Vec<f64>,
    pub xi: Vec<f64>,
    pub sigma_x: f64,
    pub sigma_xi: f64,
    #[serde(default = "one")]
    pub coefficient: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub measure: f64,
    pub ray: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { measure: 1e-12, ray: 1e-11 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub samples: usize,
    pub t_max: f64,
    pub dt: f64,
    /// Sampling box; defaults to `[-2, 2]^n`.
    pub box_lo: Option<Vec<f64>>,
    pub box_hi: Option<Vec<f64>>,
    pub r_escape: f64,
    pub gamma: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            samples: 20,
            t_max: 20.0,
            dt: 0.1,
            box_lo: None,
            box_hi: None,
            r_escape: 5.0,
            gamma: 0.1,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WkbSection {
    pub profile_width: f64,
    pub xi0: f64,
    pub half_extent: f64,
    pub coarse: f64,
    /// Propagation time; `tau0` of the source when absent.
    pub t: Option<f64>,
    pub hessian_times: Vec<f64>,
    /// Direction angle of the Hessian sample points in the plane.
    pub hessian_angle: f64,
}

impl Default for WkbSection {
    fn default() -> Self {
        Self {
            profile_width: 1.0,
            xi0: 1.0,
            half_extent: 16.0,
            coarse: 0.1,
            t: None,
            hessian_times: vec![0.2, 0.1, 0.05],
            hessian_angle: 0.3,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChecksConfig {
    pub absorption_samples: usize,
    pub return_fraction: f64,
    /// The tube identity holds up to `1 + O(t)`; the tolerance is this slope
    /// times the tube width.
    pub tube_slope: f64,
    pub liouville_relerr: f64,
    pub incoming_radius: f64,
    pub incoming_mass: f64,
    pub bkw_h_list: Vec<f64>,
}

impl Default for ChecksConfig {
    fn default() -> Self {
        Self {
            absorption_samples: 40,
            return_fraction: 1e-3,
            tube_slope: 0.02,
            liouville_relerr: 1e-4,
            incoming_radius: 6.0,
            incoming_mass: 1e-10,
            bkw_h_list: vec![1.0 / 16.0, 1.0 / 32.0, 1.0 / 64.0],
        }
    }
}

fn field(name: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{name}: {msg}"))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    fn validate(&self) -> Result<(), CliError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(field("schema_version", format!("expected {SCHEMA_VERSION}, found {}", self.schema_version)));
        }
        if self.h_list.is_empty() {
            return Err(field("h_list", "must not be empty"));
        }
        if self.h_list.iter().any(|h| !(*h > 0.0)) {
            return Err(field("h_list", "entries must be positive"));
        }
        if self.h_list.windows(2).any(|w| w[1] >= w[0]) {
            return Err(field("h_list", "must be strictly decreasing"));
        }
        if !(self.points_per_wavelength >= 8.0) {
            return Err(field("points_per_wavelength", "must be at least 8"));
        }
        let n = self.potential.dimension;
        if !(n == 1 || n == 2) {
            return Err(field("potential.dimension", "must be 1 or 2"));
        }
        for (name, list) in [("potential.v1", &self.potential.v1), ("potential.v2", &self.potential.v2)] {
            for (i, g) in list.iter().enumerate() {
                if g.center.len() != n {
                    return Err(field(&format!("{name}[{i}].center"), format!("needs {n} coordinates")));
                }
            }
        }
        for (i, o) in self.observables.iter().enumerate() {
            if o.x.len() != n || o.xi.len() != n {
                return Err(field(&format!("observables[{i}]"), format!("x and xi need {n} coordinates")));
            }
        }
        if let (Some(lo), Some(hi)) = (&self.flow.box_lo, &self.flow.box_hi) {
            if lo.len() != n || hi.len() != n || lo.iter().zip(hi).any(|(a, b)| a >= b) {
                return Err(field("flow.box_lo/box_hi", "need matching dimensions and lo < hi"));
            }
        }
        let source_n = match &self.source {
            SourceConfig::Point { center, .. } => center.len(),
            _ => 2,
        };
        if source_n != n {
            return Err(field("source", format!("lives in dimension {source_n}, potential in {n}")));
        }
        // Build everything once so that parameter errors surface as config
        // errors rather than mid-run.
        self.potential_pair()?;
        self.energy(self.h_list[0])?;
        self.source_manifold()?;
        self.profile()?;
        self.observable_list()?;
        for &h in &self.h_list {
            self.grid(h)?.check_resolves(h).map_err(|e| field("grid", e))?;
        }
        Ok(())
    }

    pub fn potential_pair(&self) -> Result<PotentialPair, CliError> {
        let n = self.potential.dimension;
        let build = |name: &str, list: &[GaussianConfig]| -> Result<Potential, CliError> {
            let mut p = Potential::zero(n);
            for (i, g) in list.iter().enumerate() {
                p = p.with_gaussian(g.amplitude, &g.center, g.width).map_err(|e| field(&format!("{name}[{i}]"), e))?;
            }
            Ok(p)
        };
        let v1 = build("potential.v1", &self.potential.v1)?;
        let v2 = build("potential.v2", &self.potential.v2)?;
        PotentialPair::new(v1, v2, self.potential.rho).map_err(|e| field("potential", e))
    }

    pub fn energy(&self, h: f64) -> Result<EnergySpec, CliError> {
        let [re, im] = self.energy.e1;
        EnergySpec::new(self.energy.e0, Complex64::new(re, im), h).map_err(|e| field("energy", e))
    }

    pub fn source_manifold(&self) -> Result<SourceManifold, CliError> {
        let s = match &self.source {
            SourceConfig::Point { center, amplitude } => SourceManifold::point(center.clone(), *amplitude),
            SourceConfig::Circle { center, radius, amplitude } => SourceManifold::circle(*center, *radius, *amplitude),
            SourceConfig::Segment { a, b, amplitude } => SourceManifold::segment(*a, *b, *amplitude),
        };
        s.map_err(|e| field("source", e))
    }

    pub fn profile(&self) -> Result<Profile, CliError> {
        Profile::gaussian(self.profile.scale, self.profile.width).map_err(|e| field("profile", e))
    }

    pub fn observable_list(&self) -> Result<Vec<Observable>, CliError> {
        let n = self.potential.dimension;
        self.observables
            .iter()
            .enumerate()
            .map(|(i, o)| {
                Observable::new(n)
                    .with_bump(&o.x, &o.xi, o.sigma_x, o.sigma_xi, o.coefficient)
                    .map_err(|e| field(&format!("observables[{i}]"), e))
            })
            .collect()
    }

    /// Solver grid for `h`: spacing the smaller of a wavelength over
    /// `points_per_wavelength` and the resolution floor `h / 4`.
    pub fn grid(&self, h: f64) -> Result<Grid, CliError> {
        let wavelength = 2.0 * std::f64::consts::PI * h / self.energy.e0.max(f64::MIN_POSITIVE).sqrt();
        let dx = (wavelength / self.points_per_wavelength).min(0.25 * h);
        let layer = (self.grid.layer_width > 0.0).then_some(Layer {
            width: self.grid.layer_width,
            strength: self.grid.layer_strength,
        });
        Grid::new(self.potential.dimension, self.grid.half_extent, dx, layer).map_err(|e| field("grid", e))
    }

    pub fn measure_setup(&self) -> Result<MeasureSetup, CliError> {
        let mut m = MeasureSetup::new(self.potential_pair()?, self.energy(self.h_list[0])?, self.source_manifold()?, self.profile()?);
        m.ray_tol = self.tolerances.ray;
        Ok(m)
    }

    pub fn sampler(&self, samples: usize, seed: u64) -> SamplerConfig {
        let n = self.potential.dimension;
        let lo = self.flow.box_lo.clone().unwrap_or_else(|| vec![-2.0; n]);
        let hi = self.flow.box_hi.clone().unwrap_or_else(|| vec![2.0; n]);
        let classify = ClassifyParams {
            t_max: self.flow.t_max,
            r_escape: self.flow.r_escape,
            gamma: self.flow.gamma,
            tol: self.tolerances.ray,
        };
        SamplerConfig::new(lo, hi, samples, seed, classify)
    }

    pub fn wkb_setup(&self) -> Result<WkbSetup, CliError> {
        let n = self.potential.dimension;
        let w = &self.wkb;
        Ok(WkbSetup {
            pot: self.potential_pair()?,
            e0: self.energy.e0,
            e1: Complex64::new(self.energy.e1[0], self.energy.e1[1]),
            profile: InitialProfile::normalized(vec![0.0; n], w.profile_width).map_err(|e| field("wkb.profile_width", e))?,
            xi0: w.xi0,
            half_extent: w.half_extent,
            coarse: w.coarse,
            cfg: WkbConfig::default(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
schema_version = 1
h_list = [0.1, 0.05]

[potential]
dimension = 1

[energy]
e0 = 1.0
e1 = [0.0, 0.2]

[source]
kind = "point"
center = [0.0]

[grid]
half_extent = 4.0
"#;

    #[test]
    fn minimal_config_parses() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.points_per_wavelength, 32.0);
        assert!(cfg.observables.is_empty());
        let g = cfg.grid(0.1).unwrap();
        assert!(g.dx <= 0.025);
    }

    #[test]
    fn unknown_key_names_the_field_and_line() {
        let text = MINIMAL.replace("e0 = 1.0", "e0 = 1.0\nenergy_shift = 3");
        let msg = ExperimentConfig::from_toml(&text).unwrap_err().to_string();
        assert!(msg.contains("energy_shift") && msg.contains("line"), "{msg}");
    }

    #[test]
    fn h_list_must_decrease() {
        let text = MINIMAL.replace("[0.1, 0.05]", "[0.05, 0.1]");
        let msg = ExperimentConfig::from_toml(&text).unwrap_err().to_string();
        assert!(msg.contains("h_list"), "{msg}");
    }

    #[test]
    fn coarse_wavelength_sampling_is_rejected() {
        let text = MINIMAL.replace("h_list", "points_per_wavelength = 4\nh_list");
        assert!(ExperimentConfig::from_toml(&text).unwrap_err().to_string().contains("points_per_wavelength"));
    }
}
