//! Experiment configuration read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::SompConfig;
use crate::coop::dequant::{BackhaulMode, DequantConfig};
use crate::detect::DetectConfig;
use crate::error::{config_err, Error, Result};
use crate::esprit::RefineConfig;
use crate::frame::FrameConfig;
use crate::oamp::OampConfig;
use crate::scene::{AngleSource, Boresight, ChannelParams, GeometryConfig};

/// One operating point of the simulated system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub num_satellites: usize,
    pub num_users: usize,
    pub num_active: usize,
    pub num_paths: usize,
    pub rice_factor_db: f64,
    /// `L`.
    pub max_delay: usize,
    /// `G`; the training sequence length is `G + L - 1`.
    pub nonisi_len: usize,
    /// `N`.
    pub data_len: usize,
    /// `M_s`.
    pub used_subcarriers: usize,
    /// `P_s`.
    pub num_frames: usize,
    pub snr_db: f64,
    pub array_x: usize,
    pub array_y: usize,
    pub altitude_km: f64,
    pub triangle_side_km: f64,
    pub boresight: Boresight,
    pub angle_source: AngleSource,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            num_satellites: 3,
            num_users: 100,
            num_active: 15,
            num_paths: 3,
            rice_factor_db: 10.0,
            max_delay: 17,
            nonisi_len: 136,
            data_len: 540,
            used_subcarriers: 540,
            num_frames: 1,
            snr_db: 12.0,
            array_x: 10,
            array_y: 10,
            altitude_km: 550.0,
            triangle_side_km: 500.0,
            boresight: Boresight::Centroid,
            angle_source: AngleSource::Geometry,
        }
    }
}

impl Scenario {
    pub fn ts_len(&self) -> usize {
        self.nonisi_len + self.max_delay - 1
    }

    pub fn noise_var(&self) -> f64 {
        10f64.powf(-self.snr_db / 10.0)
    }

    pub fn num_antennas(&self) -> usize {
        self.array_x * self.array_y
    }

    pub fn frame_config(&self) -> FrameConfig {
        FrameConfig::new(self.ts_len(), self.data_len, self.used_subcarriers, self.max_delay, self.num_frames)
    }

    pub fn geometry(&self) -> GeometryConfig {
        GeometryConfig {
            num_satellites: self.num_satellites,
            altitude_km: self.altitude_km,
            triangle_side_km: self.triangle_side_km,
            num_users: self.num_users,
            array_x: self.array_x,
            array_y: self.array_y,
            boresight: self.boresight,
            angle_source: self.angle_source,
        }
    }

    pub fn channel_params(&self) -> ChannelParams {
        ChannelParams {
            num_active: self.num_active,
            num_paths: self.num_paths,
            rice_factor: 10f64.powf(self.rice_factor_db / 10.0),
            max_delay: self.max_delay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_delay == 0 || self.nonisi_len == 0 {
            return Err(config_err("max_delay and nonisi_len must be >= 1"));
        }
        if !self.snr_db.is_finite() || !self.rice_factor_db.is_finite() {
            return Err(config_err("snr_db and rice_factor_db must be finite"));
        }
        if self.nonisi_len >= self.num_users * self.max_delay {
            return Err(config_err(format!(
                "nonisi_len {} must be below num_users * max_delay = {}",
                self.nonisi_len,
                self.num_users * self.max_delay
            )));
        }
        self.geometry().validate()?;
        self.channel_params().validate(self.num_users)?;
        self.frame_config().validate()
    }

    /// The scenario with one sweep parameter replaced.
    pub fn with(&self, axis: SweepAxis, value: f64) -> Result<Scenario> {
        let mut s = self.clone();
        let count = || -> Result<usize> {
            if value >= 0.0 && value.fract() == 0.0 && value < 1e9 {
                Ok(value as usize)
            } else {
                Err(config_err(format!("sweep value {value} must be a non-negative integer for {axis:?}")))
            }
        };
        match axis {
            SweepAxis::G => s.nonisi_len = count()?,
            SweepAxis::Snr => s.snr_db = value,
            SweepAxis::Ka => s.num_active = count()?,
            SweepAxis::K => s.num_users = count()?,
            SweepAxis::Q => s.num_satellites = count()?,
            SweepAxis::ArraySize => {
                s.array_x = count()?;
                s.array_y = s.array_x;
            }
            SweepAxis::QuantBits => {
                count()?;
            }
        }
        s.validate()?;
        Ok(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SweepAxis {
    #[serde(rename = "G")]
    G,
    #[serde(rename = "SNR")]
    Snr,
    #[serde(rename = "K_a")]
    Ka,
    #[serde(rename = "K")]
    K,
    #[serde(rename = "Q")]
    Q,
    #[serde(rename = "arraySize")]
    ArraySize,
    #[serde(rename = "quantBits")]
    QuantBits,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::G => "G",
            SweepAxis::Snr => "SNR",
            SweepAxis::Ka => "K_a",
            SweepAxis::K => "K",
            SweepAxis::Q => "Q",
            SweepAxis::ArraySize => "arraySize",
            SweepAxis::QuantBits => "quantBits",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    /// OAMP-MMV JADCE.
    #[serde(rename = "alg1")]
    Alg1,
    /// OAMP-MMV followed by ESPRIT refinement.
    #[serde(rename = "alg1+alg2")]
    Alg1Alg2,
    #[serde(rename = "somp")]
    Somp,
    #[serde(rename = "oracleLs")]
    OracleLs,
    #[serde(rename = "perfectCsi")]
    PerfectCsi,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Alg1 => "alg1",
            Algorithm::Alg1Alg2 => "alg1+alg2",
            Algorithm::Somp => "somp",
            Algorithm::OracleLs => "oracleLs",
            Algorithm::PerfectCsi => "perfectCsi",
        }
    }

    /// Whether the algorithm makes its own activity decisions.
    pub fn detects_activity(self) -> bool {
        !matches!(self, Algorithm::OracleLs | Algorithm::PerfectCsi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Detection {
    #[serde(rename = "nonCooperative")]
    NonCooperative,
    #[serde(rename = "cooperativeLS")]
    CooperativeLs,
    #[serde(rename = "bayesDequantMSCTP")]
    BayesMsctp,
    #[serde(rename = "bayesDequantMSCBP")]
    BayesMscbp,
    #[serde(rename = "lsMSCTP")]
    LsMsctp,
    #[serde(rename = "lsMSCBP")]
    LsMscbp,
}

impl Detection {
    pub fn name(self) -> &'static str {
        match self {
            Detection::NonCooperative => "nonCooperative",
            Detection::CooperativeLs => "cooperativeLS",
            Detection::BayesMsctp => "bayesDequantMSCTP",
            Detection::BayesMscbp => "bayesDequantMSCBP",
            Detection::LsMsctp => "lsMSCTP",
            Detection::LsMscbp => "lsMSCBP",
        }
    }

    pub fn backhaul_mode(self) -> Option<BackhaulMode> {
        match self {
            Detection::BayesMsctp | Detection::LsMsctp => Some(BackhaulMode::Msctp),
            Detection::BayesMscbp | Detection::LsMscbp => Some(BackhaulMode::Mscbp),
            _ => None,
        }
    }

    pub fn is_quantized(self) -> bool {
        self.backhaul_mode().is_some()
    }
}

/// Solver knobs shared by every trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub oamp: OampConfig,
    pub refine: RefineConfig,
    pub somp: SompConfig,
    /// Cap SOMP at `K_a P` columns.
    pub somp_known_sparsity: bool,
    pub dequant: DequantConfig,
    pub detect: DetectConfig,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            oamp: OampConfig::default(),
            refine: RefineConfig::default(),
            somp: SompConfig::default(),
            somp_known_sparsity: true,
            dequant: DequantConfig::default(),
            detect: DetectConfig::default(),
        }
    }
}

pub const FAST_TRIALS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub scenario: Scenario,
    pub sweep_axis: SweepAxis,
    pub sweep_values: Vec<f64>,
    pub algorithms: Vec<Algorithm>,
    pub detection: Vec<Detection>,
    /// Resolutions used by quantized detection modes.
    #[serde(default = "default_bits")]
    pub quant_bits: Vec<u32>,
    pub trials: usize,
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default)]
    pub solver: SolverConfig,
}

fn default_bits() -> Vec<u32> {
    vec![3]
}

fn default_output() -> PathBuf {
    PathBuf::from("results.csv")
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Checks every sweep point up front so no work starts on a bad config.
    pub fn validate(&self) -> Result<()> {
        if self.sweep_values.is_empty() {
            return Err(config_err("sweep_values is empty"));
        }
        if self.trials == 0 {
            return Err(config_err("trials must be >= 1"));
        }
        if self.algorithms.is_empty() || self.detection.is_empty() {
            return Err(config_err("need at least one algorithm and one detection mode"));
        }
        if self.detection.iter().any(|d| d.is_quantized()) && self.quant_bits.is_empty()
            && self.sweep_axis != SweepAxis::QuantBits
        {
            return Err(config_err("quantized detection needs quant_bits"));
        }
        if let Some(b) = self.quant_bits.iter().find(|&&b| b == 0 || b > 16) {
            return Err(config_err(format!("quant_bits entry {b} outside 1..=16")));
        }
        if !(self.solver.oamp.damping > 0.0 && self.solver.oamp.damping <= 1.0) {
            return Err(config_err("oamp damping must lie in (0, 1]"));
        }
        self.scenario.validate()?;
        for &v in &self.sweep_values {
            self.scenario.with(self.sweep_axis, v)?;
            if self.sweep_axis == SweepAxis::QuantBits && !(1.0..=16.0).contains(&v) {
                return Err(config_err(format!("quantBits sweep value {v} outside 1..=16")));
            }
        }
        Ok(())
    }

    /// Quantizer resolutions in effect at one sweep value.
    pub fn bits_at(&self, value: f64) -> Vec<u32> {
        if self.sweep_axis == SweepAxis::QuantBits {
            vec![value as u32]
        } else {
            self.quant_bits.clone()
        }
    }
}
