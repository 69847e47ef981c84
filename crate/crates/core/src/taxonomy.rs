//! Two-level class scheme: global categories over fine subclasses.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TaxonomyError {
    #[error("duplicate subclass name `{0}`")]
    DuplicateName(String),
    #[error("subclass `{0}` assigned to BACKGROUND")]
    BackgroundSubclass(String),
    #[error("no subclass declared for {0}")]
    MissingFamily(GlobalClass),
    #[error("subclass index {index} out of range for K = {k}")]
    OutOfRange { index: usize, k: usize },
    #[error("unknown global class `{0}`")]
    UnknownGlobal(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum GlobalClass {
    Light,
    Sign,
    Background,
}

impl GlobalClass {
    pub const ALL: [GlobalClass; 3] = [GlobalClass::Light, GlobalClass::Sign, GlobalClass::Background];
    pub const FOREGROUND: [GlobalClass; 2] = [GlobalClass::Light, GlobalClass::Sign];
    pub const COUNT: usize = 3;

    /// Position in the 3-way global logit vector.
    pub fn index(self) -> usize {
        match self {
            GlobalClass::Light => 0,
            GlobalClass::Sign => 1,
            GlobalClass::Background => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<GlobalClass> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            GlobalClass::Light => "LIGHT",
            GlobalClass::Sign => "SIGN",
            GlobalClass::Background => "BACKGROUND",
        }
    }
}

impl fmt::Display for GlobalClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GlobalClass {
    type Err = TaxonomyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "LIGHT" => Ok(GlobalClass::Light),
            "SIGN" => Ok(GlobalClass::Sign),
            "BACKGROUND" => Ok(GlobalClass::Background),
            other => Err(TaxonomyError::UnknownGlobal(other.to_string())),
        }
    }
}

/// Ordered subclass list with its global mapping. Immutable once built.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(String, GlobalClass)>", into = "Vec<(String, GlobalClass)>")]
pub struct Taxonomy {
    names: Vec<String>,
    globals: Vec<GlobalClass>,
    lights: Vec<usize>,
    signs: Vec<usize>,
}

impl Taxonomy {
    pub fn build<I, S>(entries: I) -> Result<Self, TaxonomyError>
    where
        I: IntoIterator<Item = (S, GlobalClass)>,
        S: Into<String>,
    {
        let mut names = Vec::new();
        let mut globals = Vec::new();
        let mut seen = HashSet::new();
        for (name, global) in entries {
            let name = name.into();
            if global == GlobalClass::Background {
                return Err(TaxonomyError::BackgroundSubclass(name));
            }
            if !seen.insert(name.clone()) {
                return Err(TaxonomyError::DuplicateName(name));
            }
            names.push(name);
            globals.push(global);
        }
        let family = |g: GlobalClass| -> Vec<usize> {
            globals
                .iter()
                .enumerate()
                .filter(|(_, x)| **x == g)
                .map(|(i, _)| i)
                .collect()
        };
        let lights = family(GlobalClass::Light);
        let signs = family(GlobalClass::Sign);
        if lights.is_empty() {
            return Err(TaxonomyError::MissingFamily(GlobalClass::Light));
        }
        if signs.is_empty() {
            return Err(TaxonomyError::MissingFamily(GlobalClass::Sign));
        }
        Ok(Self {
            names,
            globals,
            lights,
            signs,
        })
    }

    /// Generic `light_i` / `sign_j` taxonomy with the given family sizes.
    pub fn generic(n_lights: usize, n_signs: usize) -> Result<Self, TaxonomyError> {
        let lights = (0..n_lights).map(|i| (format!("light_{i}"), GlobalClass::Light));
        let signs = (0..n_signs).map(|i| (format!("sign_{i}"), GlobalClass::Sign));
        Self::build(lights.chain(signs))
    }

    /// Default scheme: 5 light states and 45 sign types, K = 50.
    pub fn traffic_default() -> Self {
        Self::generic(5, 45).expect("default taxonomy is valid")
    }

    /// Number of subclasses, K.
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.names.get(index).map(String::as_str)
    }

    pub fn global_of(&self, subclass: usize) -> Result<GlobalClass, TaxonomyError> {
        self.globals
            .get(subclass)
            .copied()
            .ok_or(TaxonomyError::OutOfRange {
                index: subclass,
                k: self.len(),
            })
    }

    /// Subclass indices belonging to `global`, ascending. Empty for BACKGROUND.
    pub fn family(&self, global: GlobalClass) -> &[usize] {
        match global {
            GlobalClass::Light => &self.lights,
            GlobalClass::Sign => &self.signs,
            GlobalClass::Background => &[],
        }
    }

    pub fn count(&self, global: GlobalClass) -> usize {
        self.family(global).len()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, GlobalClass)> {
        self.names.iter().map(String::as_str).zip(self.globals.iter().copied())
    }
}

impl TryFrom<Vec<(String, GlobalClass)>> for Taxonomy {
    type Error = TaxonomyError;

    fn try_from(v: Vec<(String, GlobalClass)>) -> Result<Self, Self::Error> {
        Taxonomy::build(v)
    }
}

impl From<Taxonomy> for Vec<(String, GlobalClass)> {
    fn from(t: Taxonomy) -> Self {
        t.names.into_iter().zip(t.globals).collect()
    }
}
