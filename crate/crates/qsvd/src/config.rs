//! Run configuration shared by every pipeline stage. Flags override a
//! config file, which overrides defaults; the effective configuration and
//! its hash are echoed into every report.

use crate::error::{Error, Result};
use crate::quant::QuantSpec;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Whitening {
    None,
    Activation,
}

impl FromStr for Whitening {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Whitening::None),
            "activation" => Ok(Whitening::Activation),
            other => Err(Error::Usage(format!(
                "unknown whitening '{other}' (expected none, activation)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationChoice {
    Hadamard,
    Random,
    None,
}

impl FromStr for RotationChoice {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hadamard" => Ok(RotationChoice::Hadamard),
            "random" => Ok(RotationChoice::Random),
            "none" => Ok(RotationChoice::None),
            other => Err(Error::Usage(format!(
                "unknown rotation '{other}' (expected hadamard, random, none)"
            ))),
        }
    }
}

/// `fixed:<v>` pins the split exponent; `search` grid-searches it per
/// layer during quantization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BetaMode {
    Fixed(f64),
    Search,
}

impl BetaMode {
    /// The exponent used by stages that do not search.
    pub fn fixed_or_default(&self) -> f64 {
        match self {
            BetaMode::Fixed(v) => *v,
            BetaMode::Search => 0.5,
        }
    }
}

impl fmt::Display for BetaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BetaMode::Fixed(v) => write!(f, "fixed:{v}"),
            BetaMode::Search => write!(f, "search"),
        }
    }
}

impl FromStr for BetaMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "search" {
            return Ok(BetaMode::Search);
        }
        if let Some(v) = s.strip_prefix("fixed:") {
            let v: f64 = v
                .parse()
                .map_err(|_| Error::Usage(format!("bad beta value in '{s}'")))?;
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Usage(format!("beta {v} outside [0, 1]")));
            }
            return Ok(BetaMode::Fixed(v));
        }
        Err(Error::Usage(format!(
            "unknown beta mode '{s}' (expected fixed:<v> or search)"
        )))
    }
}

/// `count:<k>` is a global retained-singular-value total; `ratio:<R2>` is
/// a target cache ratio converted to a count per model shape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BudgetSpec {
    Count(usize),
    Ratio(f64),
}

impl fmt::Display for BudgetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BudgetSpec::Count(k) => write!(f, "count:{k}"),
            BudgetSpec::Ratio(r) => write!(f, "ratio:{r}"),
        }
    }
}

impl FromStr for BudgetSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if let Some(k) = s.strip_prefix("count:") {
            let k: usize = k
                .parse()
                .map_err(|_| Error::Usage(format!("bad budget count in '{s}'")))?;
            if k == 0 {
                return Err(Error::Usage("budget count must be >= 1".into()));
            }
            return Ok(BudgetSpec::Count(k));
        }
        if let Some(r) = s.strip_prefix("ratio:") {
            let r: f64 = r
                .parse()
                .map_err(|_| Error::Usage(format!("bad budget ratio in '{s}'")))?;
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::Usage(format!("budget ratio {r} outside (0, 1]")));
            }
            return Ok(BudgetSpec::Ratio(r));
        }
        Err(Error::Usage(format!(
            "unknown budget '{s}' (expected count:<k> or ratio:<R2>)"
        )))
    }
}

macro_rules! string_serde {
    ($t:ty) => {
        impl Serialize for $t {
            fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
                s.serialize_str(&self.to_string())
            }
        }
        impl<'de> Deserialize<'de> for $t {
            fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

string_serde!(BetaMode);
string_serde!(BudgetSpec);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub whitening: Whitening,
    pub beta_mode: BetaMode,
    pub scheme: String,
    pub budget: BudgetSpec,
    pub rotation: RotationChoice,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            whitening: Whitening::None,
            beta_mode: BetaMode::Fixed(0.5),
            scheme: "fp".into(),
            budget: BudgetSpec::Ratio(1.0),
            rotation: RotationChoice::Hadamard,
            threads: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        // Rejects unknown scheme names.
        self.quant_spec()?;
        if self.threads == Some(0) {
            return Err(Error::Usage("--threads must be >= 1".into()));
        }
        Ok(())
    }

    pub fn quant_spec(&self) -> Result<QuantSpec> {
        QuantSpec::from_scheme(&self.scheme)
    }

    /// Short stable digest of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config always serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
