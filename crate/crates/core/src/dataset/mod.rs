//! Scenes assembled from two source datasets with missing labels.
//!
//! Every [`Frame`] carries its complete (oracle) annotation set; an
//! annotation is *visible* when the frame's source dataset labels its global
//! class and *hidden* otherwise. A lights-set frame therefore holds visible
//! lights and hidden signs, and vice versa.

mod features;
mod generator;
mod io;

pub use features::FeatureOracle;
pub use generator::{generate_synthetic, violates_separation, GeneratorConfig};
pub use io::{load, load_expecting, parse, save, write_atomic, FORMAT_NAME, FORMAT_VERSION};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BBox;
use crate::taxonomy::{GlobalClass, Taxonomy, TaxonomyError};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("could not place objects in frame {frame} after {attempts} attempts")]
    Infeasible { frame: u64, attempts: usize },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("schema error: {0}")]
    Schema(String),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which source dataset a frame was drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SourceTag {
    #[serde(rename = "LIGHTS_SET")]
    Lights,
    #[serde(rename = "SIGNS_SET")]
    Signs,
}

impl SourceTag {
    pub const ALL: [SourceTag; 2] = [SourceTag::Lights, SourceTag::Signs];

    /// The global class this source labels.
    pub fn labelled_global(self) -> GlobalClass {
        match self {
            SourceTag::Lights => GlobalClass::Light,
            SourceTag::Signs => GlobalClass::Sign,
        }
    }

    pub fn for_global(g: GlobalClass) -> Option<SourceTag> {
        match g {
            GlobalClass::Light => Some(SourceTag::Lights),
            GlobalClass::Sign => Some(SourceTag::Signs),
            GlobalClass::Background => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SourceTag::Lights => "LIGHTS_SET",
            SourceTag::Signs => "SIGNS_SET",
        }
    }
}

impl fmt::Display for SourceTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SourceTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "LIGHTS_SET" => Ok(SourceTag::Lights),
            "SIGNS_SET" => Ok(SourceTag::Signs),
            other => Err(format!("unknown source tag `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub bbox: BBox,
    pub subclass: usize,
    pub visible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub id: u64,
    pub width: f64,
    pub height: f64,
    pub source: SourceTag,
    pub annotations: Vec<Annotation>,
    pub seed: u64,
}

impl Frame {
    pub fn visible(&self) -> impl Iterator<Item = &Annotation> {
        self.annotations.iter().filter(|a| a.visible)
    }

    pub fn hidden(&self) -> impl Iterator<Item = &Annotation> {
        self.annotations.iter().filter(|a| !a.visible)
    }

    pub fn visible_gt(&self) -> Vec<Annotation> {
        self.visible().copied().collect()
    }

    /// Checks bounds and the missing-label structure against `taxonomy`.
    pub fn validate(&self, taxonomy: &Taxonomy) -> Result<(), DatasetError> {
        if !(self.width > 0.0 && self.height > 0.0) {
            return Err(DatasetError::Schema(format!(
                "frame {}: non-positive dimensions {}x{}",
                self.id, self.width, self.height
            )));
        }
        let labelled = self.source.labelled_global();
        for a in &self.annotations {
            if !a.bbox.within(self.width, self.height) {
                return Err(DatasetError::Schema(format!(
                    "frame {}: box {:?} outside {}x{}",
                    self.id,
                    a.bbox.coords(),
                    self.width,
                    self.height
                )));
            }
            let g = taxonomy
                .global_of(a.subclass)
                .map_err(|e| DatasetError::Schema(format!("frame {}: {e}", self.id)))?;
            if a.visible && g != labelled {
                return Err(DatasetError::Schema(format!(
                    "frame {}: visible {} annotation in a {} frame",
                    self.id, g, self.source
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub taxonomy: Taxonomy,
    pub config: GeneratorConfig,
    pub frames: Vec<Frame>,
}

impl Dataset {
    pub fn validate(&self) -> Result<(), DatasetError> {
        self.frames.iter().try_for_each(|f| f.validate(&self.taxonomy))
    }

    pub fn frames_from(&self, source: SourceTag) -> impl Iterator<Item = &Frame> {
        self.frames.iter().filter(move |f| f.source == source)
    }
}

/// Rounds to 6 decimal places, the precision of the dataset file.
pub(crate) fn quantize(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}
