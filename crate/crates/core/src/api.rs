//! Request and response bodies of the inspection HTTP API, shared by the
//! server and its clients.

use serde::{Deserialize, Serialize};

use crate::analytics::{PrototypeStats, ReportMode, SpecificityLabel};
use crate::index::{Occurrence, Rank, TokenKind};

pub const DEFAULT_PAGE_LIMIT: usize = 50;
pub const MAX_PAGE_LIMIT: usize = 1000;
pub const DEFAULT_EXAMPLES: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Formats {
    pub checkpoint: String,
    pub index: String,
    pub report: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestDataset {
    pub dataset_id: String,
    pub name: String,
    pub images: usize,
    pub has_labels: bool,
}

/// `GET /api/manifest`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub formats: Formats,
    pub mode: ReportMode,
    pub datasets: Vec<ManifestDataset>,
    pub num_prototypes: usize,
    pub num_patches: usize,
    pub grid: (usize, usize),
    pub threshold: f64,
    pub min_occurrences: u64,
    pub token_kind: TokenKind,
    pub checkpoint_hash: String,
}

/// Orderings of `GET /api/prototypes`; without one, prototypes come in id
/// order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrototypeSort {
    Id,
    Occurrences,
    ClassProportion,
    Specificity,
}

impl std::str::FromStr for PrototypeSort {
    type Err = crate::Error;
    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "id" => Ok(Self::Id),
            "occurrences" => Ok(Self::Occurrences),
            "class_proportion" => Ok(Self::ClassProportion),
            "specificity" => Ok(Self::Specificity),
            _ => Err(crate::Error::InvalidArgument(format!(
                "sort must be id, occurrences, class_proportion or specificity, got `{s}`"
            ))),
        }
    }
}

/// Query string of `GET /api/prototypes`. Unset fields fall back to the
/// report's options.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PrototypeQuery {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<SpecificityLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_kind: Option<TokenKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_occurrences: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sort: Option<PrototypeSort>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
}

/// `GET /api/prototypes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypePage {
    /// Matches before paging.
    pub total: usize,
    pub offset: usize,
    pub limit: usize,
    pub items: Vec<PrototypeStats>,
}

/// Query string of `GET /api/prototypes/{id}/examples`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExamplesQuery {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<Rank>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_kind: Option<TokenKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    #[serde(flatten)]
    pub occurrence: Occurrence,
    pub image_url: String,
    pub attention_url: String,
}

/// `GET /api/prototypes/{id}/examples`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Examples {
    pub prototype: usize,
    pub rank: Rank,
    pub token_kind: TokenKind,
    pub items: Vec<Example>,
}

/// Body of every non-2xx JSON response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

pub fn image_url(dataset: &str, image_id: &str) -> String {
    format!("/api/images/{dataset}/{image_id}")
}

pub fn attention_url(prototype: usize, dataset: &str, image_id: &str) -> String {
    format!("/api/prototypes/{prototype}/attention/{image_id}?dataset={dataset}")
}
