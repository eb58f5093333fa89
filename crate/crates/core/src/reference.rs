//! Bundled measured values: spin couplings, optical strain rows and quoted decay constants.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optical::{Branching, OpticalLevelModel};
use crate::physics::{angular, FieldParams, NuclearSpinParams};

const RAW: &str = include_str!("../data/reference.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceField {
    pub field_gauss: f64,
    pub larmor_khz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceSpin {
    pub label: String,
    pub delta_omega_khz: f64,
    pub t2_star_ms: f64,
}

impl ReferenceSpin {
    pub fn params(&self) -> Result<NuclearSpinParams> {
        NuclearSpinParams::direct(self.label.clone(), angular(self.delta_omega_khz * 1e3), self.t2_star_ms * 1e-3)
    }

    pub fn delta_omega(&self) -> f64 {
        angular(self.delta_omega_khz * 1e3)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceOptical {
    pub t_ex_ns: f64,
    pub t_ex_err_ns: f64,
    pub t_e_prime_ns: f64,
    pub t_e_prime_err_ns: f64,
    pub isc_rate_mhz: f64,
    pub isc_rate_err_mhz: f64,
    pub p_s: f64,
    pub p_s_err: f64,
    pub singlet_lifetime_ns: f64,
    pub singlet_lifetime_err_ns: f64,
    pub branching_ratio: f64,
    pub branching_ratio_err: f64,
    pub pulse_fwhm_ns: f64,
    pub double_excitation: f64,
}

/// One strain configuration of the optical study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrainRow {
    pub strain_shift_ghz: f64,
    pub lifetime_ns: f64,
    pub lifetime_err_ns: f64,
    pub p_s: f64,
    pub p_s_err: f64,
    pub ratio: f64,
    pub ratio_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuotedDecay {
    pub id: String,
    pub spin: String,
    pub n_1e: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub err: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_ns: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m_err: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceRepump {
    pub p_sat_half_pi_nw: f64,
    pub p_sat_half_pi_err_nw: f64,
    pub p_sat_pi_nw: f64,
    pub p_sat_pi_err_nw: f64,
    pub p_init: f64,
    pub p_init_err: f64,
    pub p_init_repump_us: f64,
    pub repump_power_uw: f64,
    pub repump_duration_us: f64,
    pub attempt_duration_us: f64,
    pub model_p_init: f64,
    pub model_p_mw: f64,
    pub t2_hahn_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceSet {
    pub field: ReferenceField,
    pub spins: Vec<ReferenceSpin>,
    pub optical: ReferenceOptical,
    pub strain_rows: Vec<StrainRow>,
    pub decay_constants: Vec<QuotedDecay>,
    pub repump: ReferenceRepump,
}

impl ReferenceSet {
    pub fn field_params(&self) -> Result<FieldParams> {
        FieldParams::from_larmor(angular(self.field.larmor_khz * 1e3))
    }

    pub fn spin(&self, label: &str) -> Result<&ReferenceSpin> {
        self.spins
            .iter()
            .find(|s| s.label.eq_ignore_ascii_case(label))
            .ok_or_else(|| Error::MissingHyperfine { label: label.to_string() })
    }

    pub fn decay(&self, id: &str) -> Option<&QuotedDecay> {
        self.decay_constants.iter().find(|d| d.id == id)
    }

    /// Level model built from the quoted lifetimes and the symmetric branching ratio.
    pub fn optical_model(&self) -> Result<OpticalLevelModel> {
        let o = &self.optical;
        let mut model = OpticalLevelModel::reference();
        model.t_ex = o.t_ex_ns * 1e-9;
        model.t_e_prime = o.t_e_prime_ns * 1e-9;
        model.gamma_es = crate::optical::isc_rate_from_lifetimes(model.t_ex, model.t_e_prime)?;
        model.t_s = o.singlet_lifetime_ns * 1e-9;
        model.branching = Branching::from_ratio(o.branching_ratio, 1.0, 1.0)?;
        model.validate()?;
        Ok(model)
    }
}

/// The bundled set, parsed once.
pub fn reference() -> &'static ReferenceSet {
    static CELL: OnceLock<ReferenceSet> = OnceLock::new();
    CELL.get_or_init(|| serde_json::from_str(RAW).expect("bundled reference set is valid JSON"))
}

pub fn raw_json() -> &'static str {
    RAW
}
