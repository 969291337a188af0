//! Calibratable coefficients of the step-time and memory models.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::catalog::CATALOG_VERSION;
use crate::error::{Error, Result};
use crate::spec::Family;

const GIB: f64 = (1u64 << 30) as f64;

/// Coefficients the empirical measurements absorb.
///
/// `mfu_base` is keyed by gpu id, then model family. Pairs missing from the
/// map use `mfu_default`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerfParams {
    pub mfu_default: f64,
    #[serde(default)]
    pub mfu_base: BTreeMap<String, BTreeMap<Family, f64>>,
    pub mult_compile: f64,
    pub mult_kernels: f64,
    /// Applied only to fp32 models.
    pub mult_tf32: f64,
    pub ckpt_recompute_frac: f64,
    pub batch_halfsat_tokens: f64,
    pub comm_efficiency: f64,
    pub host_efficiency: f64,
    pub update_bytes_per_param: f64,
    pub act_coeff: BTreeMap<Family, f64>,
    /// Share of `act_coeff` held by attention score matrices; fused
    /// attention kernels remove it.
    pub attn_quadratic_share: BTreeMap<Family, f64>,
    pub framework_overhead_bytes: f64,
    pub mem_headroom_frac: f64,
}

impl Default for PerfParams {
    fn default() -> Self {
        let families = |vals: [f64; 5]| Family::ALL.into_iter().zip(vals).collect();
        Self {
            mfu_default: 0.4,
            mfu_base: BTreeMap::new(),
            mult_compile: 1.10,
            mult_kernels: 1.25,
            mult_tf32: 1.08,
            ckpt_recompute_frac: 1.0 / 3.0,
            batch_halfsat_tokens: 4096.0,
            comm_efficiency: 0.7,
            host_efficiency: 0.5,
            update_bytes_per_param: 32.0,
            // decoder, encoder, ssm, conv, vit
            act_coeff: families([120.0, 60.0, 40.0, 60.0, 30.0]),
            attn_quadratic_share: families([0.6, 0.5, 0.75, 0.0, 0.5]),
            framework_overhead_bytes: 1.5 * GIB,
            mem_headroom_frac: 0.08,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamsDoc {
    version: u32,
    params: PerfParams,
}

impl PerfParams {
    /// The calibrated parameter file shipped with the crate.
    pub fn shipped() -> Self {
        let text = crate::catalog::bundled_file("perf_params.toml").expect("bundled params");
        Self::parse("perf_params.toml", text).expect("shipped params are valid")
    }

    /// Limit in which step time reduces to the analytic estimate: full
    /// utilization, no saturation, no multipliers and free updates and
    /// communication.
    ///
    /// Not a valid calibration state (`check` rejects it).
    pub fn ideal() -> Self {
        Self {
            mfu_default: 1.0,
            mfu_base: BTreeMap::new(),
            mult_compile: 1.0,
            mult_kernels: 1.0,
            mult_tf32: 1.0,
            batch_halfsat_tokens: 0.0,
            comm_efficiency: f64::INFINITY,
            host_efficiency: f64::INFINITY,
            update_bytes_per_param: 0.0,
            ..Self::default()
        }
    }

    pub fn mfu(&self, gpu_id: &str, family: Family) -> f64 {
        self.mfu_base
            .get(gpu_id)
            .and_then(|m| m.get(&family))
            .copied()
            .unwrap_or(self.mfu_default)
    }

    pub fn set_mfu(&mut self, gpu_id: &str, family: Family, value: f64) {
        self.mfu_base
            .entry(gpu_id.to_string())
            .or_default()
            .insert(family, value);
    }

    pub fn act_coeff(&self, family: Family) -> f64 {
        self.act_coeff.get(&family).copied().unwrap_or(0.0)
    }

    pub fn attn_share(&self, family: Family) -> f64 {
        self.attn_quadratic_share
            .get(&family)
            .copied()
            .unwrap_or(0.0)
    }

    pub fn check(&self) -> Result<()> {
        let fail = |m: String| Err(Error::invalid("perf params", m));
        let unit = |x: f64| x.is_finite() && x > 0.0 && x <= 1.0;
        let pos = |x: f64| x.is_finite() && x > 0.0;
        if !unit(self.mfu_default) {
            return fail(format!("mfu_default {} not in (0, 1]", self.mfu_default));
        }
        for (gpu, fams) in &self.mfu_base {
            for (fam, v) in fams {
                if !unit(*v) {
                    return fail(format!("mfu_base {gpu}/{fam} = {v} not in (0, 1]"));
                }
            }
        }
        for (name, v) in [
            ("mult_compile", self.mult_compile),
            ("mult_kernels", self.mult_kernels),
            ("mult_tf32", self.mult_tf32),
        ] {
            if !(v.is_finite() && v >= 1.0) {
                return fail(format!("{name} = {v} must be >= 1"));
            }
        }
        for (name, v) in [
            ("ckpt_recompute_frac", self.ckpt_recompute_frac),
            ("batch_halfsat_tokens", self.batch_halfsat_tokens),
            ("update_bytes_per_param", self.update_bytes_per_param),
            ("framework_overhead_bytes", self.framework_overhead_bytes),
        ] {
            if !pos(v) {
                return fail(format!("{name} = {v} must be positive"));
            }
        }
        for (name, v) in [
            ("comm_efficiency", self.comm_efficiency),
            ("host_efficiency", self.host_efficiency),
        ] {
            if !unit(v) {
                return fail(format!("{name} = {v} not in (0, 1]"));
            }
        }
        if !(self.mem_headroom_frac > 0.0 && self.mem_headroom_frac < 1.0) {
            return fail(format!(
                "mem_headroom_frac {} not in (0, 1)",
                self.mem_headroom_frac
            ));
        }
        for fam in Family::ALL {
            if !pos(self.act_coeff(fam)) {
                return fail(format!("act_coeff.{fam} must be positive"));
            }
            let s = self.attn_share(fam);
            if !(0.0..1.0).contains(&s) {
                return fail(format!("attn_quadratic_share.{fam} = {s} not in [0, 1)"));
            }
        }
        Ok(())
    }

    pub fn parse(what: &str, text: &str) -> Result<Self> {
        let doc: ParamsDoc = toml::from_str(text).map_err(|e| Error::parse(what, e))?;
        if doc.version != CATALOG_VERSION {
            return Err(Error::Version {
                what: what.to_string(),
                found: doc.version,
                expected: CATALOG_VERSION,
            });
        }
        doc.params.check()?;
        Ok(doc.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&path.display().to_string(), &text)
    }

    pub fn to_toml(&self) -> String {
        let doc = ParamsDoc {
            version: CATALOG_VERSION,
            params: self.clone(),
        };
        toml::to_string(&doc).expect("params serialize")
    }

    /// SHA-256 of the serialized file, hex encoded.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        Sha256::digest(self.to_toml().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
