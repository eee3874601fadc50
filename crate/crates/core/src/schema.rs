//! Feature schema: the ordered list of covariates a cohort may contain,
//! each continuous, categorical with a fixed level set, or binary.
//!
//! The schema fixes the encoded width `d`: one column per continuous or
//! binary feature and one indicator column per categorical level.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashSet;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureKind {
    Continuous,
    Categorical { levels: Vec<String> },
    Binary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureDef {
    pub name: String,
    #[serde(flatten)]
    pub kind: FeatureKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub units: Option<String>,
}

impl FeatureDef {
    pub fn continuous(name: &str) -> Self {
        FeatureDef { name: name.to_string(), kind: FeatureKind::Continuous, units: None }
    }

    pub fn binary(name: &str) -> Self {
        FeatureDef { name: name.to_string(), kind: FeatureKind::Binary, units: None }
    }

    pub fn categorical(name: &str, levels: &[&str]) -> Self {
        FeatureDef {
            name: name.to_string(),
            kind: FeatureKind::Categorical { levels: levels.iter().map(|s| s.to_string()).collect() },
            units: None,
        }
    }

    /// Number of encoded columns this feature occupies.
    pub fn encoded_width(&self) -> usize {
        match &self.kind {
            FeatureKind::Continuous | FeatureKind::Binary => 1,
            FeatureKind::Categorical { levels } => levels.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub features: Vec<FeatureDef>,
}

impl FeatureSchema {
    pub fn new(features: Vec<FeatureDef>) -> Result<Self> {
        let schema = FeatureSchema { features };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for f in &self.features {
            if !seen.insert(f.name.as_str()) {
                return Err(Error::schema(format!("duplicate feature name `{}`", f.name)));
            }
            if let FeatureKind::Categorical { levels } = &f.kind {
                if levels.is_empty() {
                    return Err(Error::schema(format!("feature `{}` has no levels", f.name)));
                }
                let mut level_seen = HashSet::new();
                for level in levels {
                    if !level_seen.insert(level.as_str()) {
                        return Err(Error::schema(format!(
                            "feature `{}` has duplicate level `{level}`",
                            f.name
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let schema: FeatureSchema = serde_json::from_str(text)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("cannot read schema {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schema serializes")
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    /// Total encoded width `d`: continuous and binary columns plus all
    /// one-hot indicator columns.
    pub fn encoded_width(&self) -> usize {
        self.features.iter().map(|f| f.encoded_width()).sum()
    }

    /// SHA-256 of the canonical (compact JSON) schema text; stored in model
    /// artifacts so scoring can refuse data encoded under a different schema.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("schema serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        let mut out = String::with_capacity(64);
        for byte in digest {
            out.push_str(&format!("{byte:02x}"));
        }
        out
    }
}

/// A raw covariate value as read from the long-format CSV, typed by the
/// schema entry it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub enum RawValue {
    Real(f64),
    Token(String),
    Flag(bool),
}

impl RawValue {
    /// Parse a CSV `value` field according to the feature kind.
    pub fn parse(text: &str, feature: &FeatureDef) -> Result<RawValue> {
        match &feature.kind {
            FeatureKind::Continuous => {
                let v: f64 = text.trim().parse().map_err(|_| {
                    Error::schema(format!(
                        "feature `{}` expects a real value, got `{text}`",
                        feature.name
                    ))
                })?;
                if !v.is_finite() {
                    return Err(Error::numeric(format!(
                        "feature `{}` has non-finite value `{text}`",
                        feature.name
                    )));
                }
                Ok(RawValue::Real(v))
            }
            FeatureKind::Categorical { .. } => Ok(RawValue::Token(text.trim().to_string())),
            FeatureKind::Binary => match text.trim() {
                "0" | "false" => Ok(RawValue::Flag(false)),
                "1" | "true" => Ok(RawValue::Flag(true)),
                other => Err(Error::schema(format!(
                    "feature `{}` expects 0/1/true/false, got `{other}`",
                    feature.name
                ))),
            },
        }
    }
}
