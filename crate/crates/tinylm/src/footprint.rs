//! Training-footprint calculator: energy from GPU-hours, emissions from
//! energy, and the published reference rows used as oracle data.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

pub const DEFAULT_GPU_WATTS: f64 = 400.0;
pub const DEFAULT_PUE: f64 = 1.1;
/// US national average grid intensity, kg CO2e per KWh (= tCO2eq per MWh).
pub const DEFAULT_CARBON_INTENSITY: f64 = 0.385;

fn default_watts() -> f64 {
    DEFAULT_GPU_WATTS
}
fn default_pue() -> f64 {
    DEFAULT_PUE
}
fn default_intensity() -> f64 {
    DEFAULT_CARBON_INTENSITY
}

/// All fields strictly positive.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FootprintInput {
    pub gpu_hours: f64,
    #[serde(default = "default_watts")]
    pub gpu_power_watts: f64,
    #[serde(default = "default_pue")]
    pub pue: f64,
    /// kg CO2e per KWh.
    #[serde(default = "default_intensity")]
    pub carbon_intensity: f64,
}

impl FootprintInput {
    /// A100-80GB NVLink defaults: 400 W, PUE 1.1, US-average intensity.
    pub fn new(gpu_hours: f64) -> FootprintInput {
        FootprintInput {
            gpu_hours,
            gpu_power_watts: DEFAULT_GPU_WATTS,
            pue: DEFAULT_PUE,
            carbon_intensity: DEFAULT_CARBON_INTENSITY,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("gpu_hours", self.gpu_hours),
            ("gpu_power_watts", self.gpu_power_watts),
            ("pue", self.pue),
            ("carbon_intensity", self.carbon_intensity),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Domain(format!(
                    "{name} must be strictly positive, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Megawatt-hours to train: GPU-h x watts x PUE / 1e6.
pub fn energy_mwh(inp: &FootprintInput) -> Result<f64> {
    inp.validate()?;
    Ok(inp.gpu_hours * inp.gpu_power_watts * inp.pue / 1e6)
}

/// Tons of CO2-equivalent: MWh x intensity (kg/KWh equals t/MWh).
pub fn carbon_tco2eq(mwh: f64, intensity: f64) -> Result<f64> {
    if !(mwh.is_finite() && mwh >= 0.0) {
        return Err(Error::Domain(format!("MWh must be nonnegative, got {mwh}")));
    }
    if !(intensity.is_finite() && intensity > 0.0) {
        return Err(Error::Domain(format!(
            "carbon intensity must be strictly positive, got {intensity}"
        )));
    }
    Ok(mwh * intensity)
}

/// Both outputs for one input.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Footprint {
    pub mwh: f64,
    pub tco2eq: f64,
}

pub fn footprint(inp: &FootprintInput) -> Result<Footprint> {
    let mwh = energy_mwh(inp)?;
    let tco2eq = carbon_tco2eq(mwh, inp.carbon_intensity)?;
    Ok(Footprint { mwh, tco2eq })
}

/// Integer display convention of the reference rows: megawatt-hours
/// truncate toward zero (449.84 shows as 449)...
pub fn display_mwh(mwh: f64) -> i64 {
    mwh.trunc() as i64
}

/// ...while tons round to the nearest integer (13.96 shows as 14).
pub fn display_tco2eq(tons: f64) -> i64 {
    tons.round() as i64
}

/// One published training-footprint figure: GPU-hours plus the integer
/// cells as displayed in the original report.
#[derive(Debug, Clone, Copy)]
pub struct ReferenceRow {
    pub label: &'static str,
    pub gpu_hours: f64,
    pub mwh_displayed: i64,
    pub tco2eq_displayed: i64,
}

/// Published footprints of public models, all normalized to A100-80GB at
/// 400 W, PUE 1.1, and 0.385 kg CO2e/KWh. Note the BLOOM-175B energy cell:
/// the formula gives 476.4672 MWh, but the original report displays 475.
pub const REFERENCE_ROWS: [ReferenceRow; 6] = [
    ReferenceRow { label: "OPT-175B", gpu_hours: 809_472.0, mwh_displayed: 356, tco2eq_displayed: 137 },
    ReferenceRow { label: "BLOOM-175B", gpu_hours: 1_082_880.0, mwh_displayed: 475, tco2eq_displayed: 183 },
    ReferenceRow { label: "LLaMA-7B", gpu_hours: 82_432.0, mwh_displayed: 36, tco2eq_displayed: 14 },
    ReferenceRow { label: "LLaMA-13B", gpu_hours: 135_168.0, mwh_displayed: 59, tco2eq_displayed: 23 },
    ReferenceRow { label: "LLaMA-33B", gpu_hours: 530_432.0, mwh_displayed: 233, tco2eq_displayed: 90 },
    ReferenceRow { label: "LLaMA-65B", gpu_hours: 1_022_362.0, mwh_displayed: 449, tco2eq_displayed: 173 },
];
