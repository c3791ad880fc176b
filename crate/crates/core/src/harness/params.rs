//! The resolved parameters of a configuration, as printed by `moniqua params`.

use std::fmt;

use serde::Serialize;

use crate::quant::{bits_bound, bits_required};
use crate::theory::{theorem1_floor, D2Constants, Provenance, ThetaRule};
use crate::topo::mixing_time_bound;

use super::run::Prepared;
use super::HarnessError;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamsReport {
    pub n: usize,
    pub topology: String,
    pub algorithm: String,
    pub rho: f64,
    pub lambda2: f64,
    pub lambda_n: f64,
    pub phi: f64,
    /// Spectral quantity of the matrix actually used; differs from `rho`
    /// only in one-bit mode.
    pub effective_rho: f64,
    pub mixing_time_bound: f64,
    /// Closed-form budget from `n` and the effective `rho`.
    pub bits_bound: u32,
    pub alpha0: f64,
    pub c_alpha: f64,
    pub eta: f64,
    pub theta_coefficient: Option<f64>,
    pub theta_fixed: Option<f64>,
    pub theta_0: Option<f64>,
    pub delta: Option<f64>,
    /// `ceil(log2(1/(2 delta) + 1))` for the prescribed delta.
    pub bits_required: Option<u32>,
    pub gamma: Option<f64>,
    pub g_inf: Option<f64>,
    pub provenance: Option<Provenance>,
    pub quantizer: String,
    pub quantizer_step: f64,
    pub quantizer_delta: f64,
    /// Bits per coordinate on the wire.
    pub bits_per_coord: Option<u32>,
    pub d2: Option<D2Constants>,
    pub tmix: Option<usize>,
    pub naive_floor: Option<f64>,
}

pub fn params_report(p: &Prepared) -> Result<ParamsReport, HarnessError> {
    let cfg = &p.config;
    let s = p.base_matrix.spectrum();
    let (coef, fixed) = match p.params.map(|t| t.theta) {
        Some(ThetaRule::PerAlpha(c)) => (Some(c), None),
        Some(ThetaRule::Fixed(t)) => (None, Some(t)),
        None => (None, None),
    };
    let delta = p.params.map(|t| t.delta);
    Ok(ParamsReport {
        n: cfg.n,
        topology: cfg.topology.as_str().to_string(),
        algorithm: cfg.algorithm.as_str().to_string(),
        rho: s.rho,
        lambda2: s.lambda2,
        lambda_n: s.lambda_n,
        phi: s.phi,
        effective_rho: p.matrix.rho(),
        mixing_time_bound: mixing_time_bound(p.matrix.rho(), cfg.n, cfg.theory.log_base)?,
        bits_bound: bits_bound(cfg.n, p.matrix.rho())?,
        alpha0: p.steps.alpha0,
        c_alpha: p.steps.c_alpha,
        eta: p.steps.eta,
        theta_coefficient: coef,
        theta_fixed: fixed,
        theta_0: p.params.map(|t| t.theta_at(p.steps.alpha(0))),
        delta,
        bits_required: delta.map(bits_required).transpose()?,
        gamma: p.params.and_then(|t| t.gamma),
        g_inf: p.params.map(|t| t.g_inf).filter(|g| *g > 0.0),
        provenance: p.params.map(|t| t.provenance),
        quantizer: p.quantizer.kind.as_str().to_string(),
        quantizer_step: p.quantizer.step,
        quantizer_delta: p.quantizer.delta(),
        bits_per_coord: p.bits_per_coord()?,
        d2: p.d2,
        tmix: p.gossip.as_ref().map(|g| g.tmix()),
        naive_floor: match cfg.algorithm {
            crate::algos::Algorithm::DpsgdNaive => Some(theorem1_floor(s.phi, p.quantizer.delta())),
            _ => None,
        },
    })
}

impl fmt::Display for ParamsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let value = serde_json::to_value(self).map_err(|_| fmt::Error)?;
        let obj = value.as_object().ok_or(fmt::Error)?;
        let width = obj.keys().map(String::len).max().unwrap_or(0);
        for (k, v) in obj {
            if v.is_null() {
                continue;
            }
            match v.as_object() {
                Some(inner) => {
                    for (ik, iv) in inner {
                        writeln!(f, "{:width$} = {iv}", format!("{k}.{ik}"))?;
                    }
                }
                None => match v.as_str() {
                    Some(s) => writeln!(f, "{k:width$} = {s}")?,
                    None => writeln!(f, "{k:width$} = {v}")?,
                },
            }
        }
        Ok(())
    }
}
