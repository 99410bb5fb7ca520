//! Invariant suites shared by the test targets and the `verify` command.
//!
//! Each suite draws its cases from a seeded generator, compares the library
//! against an independent oracle and returns a [`Verdict`]. A failing verdict
//! carries the first counterexample found.

mod attn;
mod data;
mod grad;

use std::str::FromStr;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::attention::inject_mask_off_by_one;
use crate::{Error, Result};

pub use attn::{attention_case, local_kernel, local_oracle, tglobal_kernel, tglobal_oracle, AttentionCase};
pub use data::{brute_force_scores, brute_force_select};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    AttnEquiv,
    Gradcheck,
    PsgOracle,
    Packing,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::AttnEquiv, Suite::Gradcheck, Suite::PsgOracle, Suite::Packing];

    pub fn as_str(self) -> &'static str {
        match self {
            Suite::AttnEquiv => "attn-equiv",
            Suite::Gradcheck => "gradcheck",
            Suite::PsgOracle => "psg-oracle",
            Suite::Packing => "packing",
        }
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown suite {s:?}")))
    }
}

/// Deliberate bugs for checking that the suites notice them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fault {
    MaskOffByOne,
}

impl FromStr for Fault {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mask-off-by-one" => Ok(Fault::MaskOffByOne),
            other => Err(Error::Invalid(format!("unknown fault {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub seeds: usize,
    pub base_seed: u64,
    pub fault: Option<Fault>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seeds: 100,
            base_seed: 0,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Counterexample {
    pub seed: u64,
    pub detail: String,
    /// SHA-256 of the case inputs.
    pub inputs_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub suite: Suite,
    pub passed: bool,
    pub cases: usize,
    pub metric: &'static str,
    pub value: f64,
    pub threshold: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fault: Option<Fault>,
    pub counterexample: Option<Counterexample>,
}

impl Verdict {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("verdict serialises")
    }
}

/// Accumulates a worst-case metric and the first failing case.
pub(crate) struct Tally {
    suite: Suite,
    metric: &'static str,
    threshold: f64,
    cases: usize,
    value: f64,
    counterexample: Option<Counterexample>,
}

impl Tally {
    pub(crate) fn new(suite: Suite, metric: &'static str, threshold: f64) -> Self {
        Self {
            suite,
            metric,
            threshold,
            cases: 0,
            value: 0.0,
            counterexample: None,
        }
    }

    /// Record one case; it fails when `value` is not below the threshold.
    pub(crate) fn record(
        &mut self,
        seed: u64,
        value: f64,
        digest: impl FnOnce() -> String,
        detail: impl FnOnce() -> String,
    ) {
        self.cases += 1;
        let bad = value.is_nan() || value >= self.threshold;
        if value.is_nan() || value > self.value {
            self.value = value;
        }
        if bad && self.counterexample.is_none() {
            self.counterexample = Some(Counterexample {
                seed,
                detail: detail(),
                inputs_digest: digest(),
            });
        }
    }

    fn finish(self, fault: Option<Fault>) -> Verdict {
        Verdict {
            suite: self.suite,
            passed: self.counterexample.is_none(),
            cases: self.cases,
            metric: self.metric,
            value: self.value,
            threshold: self.threshold,
            fault,
            counterexample: self.counterexample,
        }
    }
}

pub(crate) fn digest_of(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn f64_bytes(xs: &[f64]) -> Vec<u8> {
    xs.iter().flat_map(|x| x.to_le_bytes()).collect()
}

pub(crate) fn u32_bytes(xs: &[u32]) -> Vec<u8> {
    xs.iter().flat_map(|x| x.to_le_bytes()).collect()
}

struct FaultGuard;

impl Drop for FaultGuard {
    fn drop(&mut self) {
        inject_mask_off_by_one(false);
    }
}

pub fn run_suite(suite: Suite, opts: &VerifyOptions) -> Result<Verdict> {
    let _guard = FaultGuard;
    inject_mask_off_by_one(opts.fault == Some(Fault::MaskOffByOne));
    let tally = match suite {
        Suite::AttnEquiv => attn::run(opts)?,
        Suite::Gradcheck => grad::run(opts)?,
        Suite::PsgOracle => data::run_psg(opts)?,
        Suite::Packing => data::run_packing(opts)?,
    };
    Ok(tally.finish(opts.fault))
}

/// Seed of case `i`.
pub(crate) fn case_seed(opts: &VerifyOptions, i: usize) -> u64 {
    opts.base_seed.wrapping_add(i as u64)
}
