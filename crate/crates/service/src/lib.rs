//! Read-only HTTP/JSON inspection API over a checkpoint, an assignment
//! index and a comparison report.
//!
//! All artifacts are loaded once at start-up and shared immutably between
//! requests; the only thing ever written is the attention-overlay cache,
//! which lives outside the artifact directories.

pub mod fixture;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::extract::rejection::QueryRejection;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use sha2::{Digest, Sha256};
use tower_http::cors::{Any, CorsLayer};

use protosim_core::analytics::{
    specificity, ComparisonReport, PrototypeStats, SpecificityOptions, REPORT_FORMAT, REPORT_JSON,
};
use protosim_core::api::{
    attention_url, image_url, ErrorBody, Example, Examples, ExamplesQuery, Formats, Manifest,
    ManifestDataset, PrototypePage, PrototypeQuery, PrototypeSort, DEFAULT_EXAMPLES,
    DEFAULT_PAGE_LIMIT, MAX_PAGE_LIMIT,
};
use protosim_core::checkpoint::{file_hash, Checkpoint, CHECKPOINT_FORMAT};
use protosim_core::image_ops::ImageTensor;
use protosim_core::index::{IndexStore, Rank, INDEX_FORMAT};
use protosim_core::model::ProtoModel;
use protosim_core::viz::{attention_map, png_bytes, render_overlay};

pub const CACHE_DIR_ENV: &str = "PROTOSIM_CACHE_DIR";

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("checkpoint hash {actual} does not match the {artifact} ({expected}); refusing to start")]
    HashMismatch {
        artifact: &'static str,
        expected: String,
        actual: String,
    },
    #[error(transparent)]
    Core(#[from] protosim_core::Error),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Artifact locations.
#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub index_dir: PathBuf,
    pub checkpoint: PathBuf,
    /// Report directory or the `report.json` file itself.
    pub report: PathBuf,
    /// Overlay cache; defaults to `$PROTOSIM_CACHE_DIR`, then a directory
    /// under the system temp dir.
    pub cache_dir: Option<PathBuf>,
}

/// Everything a request may read.
pub struct AppState {
    pub store: IndexStore,
    pub model: ProtoModel,
    pub report: ComparisonReport,
    report_bytes: Vec<u8>,
    pub checkpoint_hash: String,
    pub cache_dir: PathBuf,
    image_paths: HashMap<(String, String), PathBuf>,
}

impl AppState {
    /// Loads and cross-checks the artifacts.
    pub fn load(cfg: &ServeConfig) -> Result<Self, ServiceError> {
        let checkpoint_hash = file_hash(&cfg.checkpoint)?;
        let checkpoint = Checkpoint::load(&cfg.checkpoint)?;
        let model = checkpoint.model()?;
        let store = IndexStore::load(&cfg.index_dir, false)?;
        if store.manifest.checkpoint_hash != checkpoint_hash {
            return Err(ServiceError::HashMismatch {
                artifact: "index manifest",
                expected: store.manifest.checkpoint_hash.clone(),
                actual: checkpoint_hash,
            });
        }
        let report_path = if cfg.report.is_dir() {
            cfg.report.join(REPORT_JSON)
        } else {
            cfg.report.clone()
        };
        let text = std::fs::read_to_string(&report_path).map_err(|e| ServiceError::Io {
            path: report_path.clone(),
            source: e,
        })?;
        let report: ComparisonReport = serde_json::from_str(&text)
            .map_err(|e| protosim_core::Error::format(&report_path, e.to_string()))?;
        if report.checkpoint_hash != checkpoint_hash {
            return Err(ServiceError::HashMismatch {
                artifact: "report",
                expected: report.checkpoint_hash.clone(),
                actual: checkpoint_hash,
            });
        }
        let mut image_paths = HashMap::new();
        for d in &store.manifest.datasets {
            for e in d.descriptor.list_images()? {
                image_paths.insert((e.dataset_id, e.image_id), e.path);
            }
        }
        let cache_dir = cfg
            .cache_dir
            .clone()
            .or_else(|| std::env::var_os(CACHE_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| std::env::temp_dir().join("protosim-overlays"));
        let report_bytes = serde_json::to_vec(&report).map_err(protosim_core::Error::from)?;
        Ok(Self {
            store,
            model,
            report,
            report_bytes,
            checkpoint_hash,
            cache_dir,
            image_paths,
        })
    }

    pub fn manifest(&self) -> Manifest {
        let opts = &self.report.options;
        Manifest {
            formats: Formats {
                checkpoint: CHECKPOINT_FORMAT.into(),
                index: INDEX_FORMAT.into(),
                report: REPORT_FORMAT.into(),
            },
            mode: self.report.mode,
            datasets: self
                .store
                .manifest
                .datasets
                .iter()
                .map(|d| ManifestDataset {
                    dataset_id: d.descriptor.dataset_id.clone(),
                    name: d.descriptor.name.clone(),
                    images: self.store.index.image_count(&d.descriptor.dataset_id),
                    has_labels: d.descriptor.labels.is_some(),
                })
                .collect(),
            num_prototypes: self.store.index.k(),
            num_patches: self.store.index.num_patches(),
            grid: self.store.manifest.grid,
            threshold: opts.threshold,
            min_occurrences: opts.min_occurrences,
            token_kind: opts.token_kind,
            checkpoint_hash: self.checkpoint_hash.clone(),
        }
    }

    /// Filtered, sorted and paged prototype statistics. Non-default
    /// threshold, token kind or minimum count relabel from the index.
    pub fn prototypes(&self, q: &PrototypeQuery) -> Result<PrototypePage, ApiError> {
        let base = self.report.options;
        let opts = SpecificityOptions {
            threshold: q.threshold.unwrap_or(base.threshold),
            min_occurrences: q.min_occurrences.unwrap_or(base.min_occurrences),
            token_kind: q.token_kind.unwrap_or(base.token_kind),
        };
        opts.validate().map_err(ApiError::bad_request)?;
        let mut stats: Vec<PrototypeStats> = if opts == base {
            self.report.prototypes.clone()
        } else {
            (0..self.store.index.k())
                .map(|p| specificity(&self.store.index, p, &opts))
                .collect::<Result<_, _>>()
                .map_err(ApiError::bad_request)?
        };
        if let Some(label) = &q.label {
            stats.retain(|s| s.label.as_ref() == Some(label));
        }
        let desc = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(x), Some(y)) => y.total_cmp(&x),
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => std::cmp::Ordering::Equal,
        };
        match q.sort.unwrap_or(PrototypeSort::Id) {
            PrototypeSort::Id => {}
            PrototypeSort::Occurrences => stats.sort_by(|a, b| {
                b.occurrences
                    .cmp(&a.occurrences)
                    .then(a.prototype_id.cmp(&b.prototype_id))
            }),
            PrototypeSort::ClassProportion => stats.sort_by(|a, b| {
                desc(a.class_proportion, b.class_proportion)
                    .then(a.prototype_id.cmp(&b.prototype_id))
            }),
            PrototypeSort::Specificity => stats.sort_by(|a, b| {
                desc(a.specificity, b.specificity).then(a.prototype_id.cmp(&b.prototype_id))
            }),
        }
        let total = stats.len();
        let offset = q.offset.unwrap_or(0);
        let limit = q.limit.unwrap_or(DEFAULT_PAGE_LIMIT).min(MAX_PAGE_LIMIT);
        let items = stats.into_iter().skip(offset).take(limit).collect();
        Ok(PrototypePage {
            total,
            offset,
            limit,
            items,
        })
    }

    pub fn prototype(&self, id: usize) -> Result<&PrototypeStats, ApiError> {
        self.report
            .prototypes
            .get(id)
            .ok_or_else(|| ApiError::not_found(self.out_of_range(id)))
    }

    fn out_of_range(&self, id: usize) -> String {
        protosim_core::Error::PrototypeOutOfRange {
            id,
            k: self.store.index.k(),
        }
        .to_string()
    }

    pub fn examples(&self, id: usize, q: &ExamplesQuery) -> Result<Examples, ApiError> {
        if id >= self.store.index.k() {
            return Err(ApiError::not_found(self.out_of_range(id)));
        }
        if let Some(d) = &q.dataset {
            if self.store.manifest.dataset(d).is_none() {
                return Err(ApiError::not_found(format!("unknown dataset `{d}`")));
            }
        }
        let rank = q.rank.unwrap_or(Rank::Count);
        let kind = q.token_kind.unwrap_or(self.report.options.token_kind);
        let mut occ = self
            .store
            .index
            .query_occurrences(id, q.dataset.as_deref(), kind, rank)
            .map_err(ApiError::bad_request)?;
        occ.truncate(q.k.unwrap_or(DEFAULT_EXAMPLES));
        Ok(Examples {
            prototype: id,
            rank,
            token_kind: kind,
            items: occ
                .into_iter()
                .map(|o| Example {
                    image_url: image_url(&o.dataset_id, &o.image_id),
                    attention_url: attention_url(id, &o.dataset_id, &o.image_id),
                    occurrence: o,
                })
                .collect(),
        })
    }

    /// Resolves an image id, optionally qualified by dataset.
    pub fn image_path(&self, dataset: Option<&str>, image_id: &str) -> Result<(String, &Path), ApiError> {
        let mut hits = self
            .image_paths
            .iter()
            .filter(|((d, i), _)| i == image_id && dataset.is_none_or(|want| want == d));
        let first = hits
            .next()
            .ok_or_else(|| ApiError::not_found(format!("unknown image `{image_id}`")))?;
        if hits.next().is_some() {
            return Err(ApiError::bad_request(format!(
                "image id `{image_id}` exists in several datasets; pass ?dataset="
            )));
        }
        Ok((first.0 .0.clone(), first.1.as_path()))
    }

    fn cache_path(&self, dataset: &str, image_id: &str, prototype: usize) -> PathBuf {
        let mut h = Sha256::new();
        for part in [self.checkpoint_hash.as_str(), dataset, image_id, &prototype.to_string()] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part.as_bytes());
        }
        self.cache_dir.join(format!("{}.png", hex::encode(h.finalize())))
    }

    /// Overlay PNG, computed once per (checkpoint, image, prototype) and
    /// cached on disk with create-if-absent semantics.
    pub fn attention_png(&self, id: usize, dataset: Option<&str>, image_id: &str) -> Result<Vec<u8>, ApiError> {
        if id >= self.store.index.k() {
            return Err(ApiError::not_found(self.out_of_range(id)));
        }
        let (dataset, path) = self.image_path(dataset, image_id)?;
        let cached = self.cache_path(&dataset, image_id, id);
        if let Ok(bytes) = std::fs::read(&cached) {
            return Ok(bytes);
        }
        let image = ImageTensor::load(path).map_err(ApiError::internal)?;
        let grid = attention_map(&self.model, &image, id).map_err(ApiError::internal)?;
        let bytes = png_bytes(&render_overlay(&image, &grid).map_err(ApiError::internal)?)
            .map_err(ApiError::internal)?;
        if let Err(e) = store_if_absent(&self.cache_dir, &cached, &bytes) {
            tracing::warn!(path = %cached.display(), "overlay cache write failed: {e}");
        }
        Ok(bytes)
    }
}

fn store_if_absent(dir: &Path, path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    use std::io::Write;
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    match tmp.persist_noclobber(path) {
        Ok(_) => Ok(()),
        Err(e) if e.error.kind() == std::io::ErrorKind::AlreadyExists => Ok(()),
        Err(e) => Err(e.error),
    }
}

/// JSON error response.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    pub fn bad_request(e: impl ToString) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            message: e.to_string(),
        }
    }

    pub fn not_found(e: impl ToString) -> Self {
        Self {
            status: StatusCode::NOT_FOUND,
            message: e.to_string(),
        }
    }

    pub fn internal(e: impl ToString) -> Self {
        Self {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            message: e.to_string(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (
            self.status,
            Json(ErrorBody {
                error: self.message,
            }),
        )
            .into_response()
    }
}

impl From<QueryRejection> for ApiError {
    fn from(e: QueryRejection) -> Self {
        Self::bad_request(e.body_text())
    }
}

type Shared = Arc<AppState>;

fn parse_id(raw: &str) -> Result<usize, ApiError> {
    raw.parse()
        .map_err(|_| ApiError::bad_request(format!("prototype id must be a non-negative integer, got `{raw}`")))
}

async fn manifest(State(s): State<Shared>) -> Json<Manifest> {
    Json(s.manifest())
}

async fn prototypes(
    State(s): State<Shared>,
    q: Result<Query<PrototypeQuery>, QueryRejection>,
) -> Result<Json<PrototypePage>, ApiError> {
    let Query(q) = q?;
    let page = tokio::task::spawn_blocking(move || s.prototypes(&q))
        .await
        .map_err(ApiError::internal)??;
    Ok(Json(page))
}

async fn prototype(State(s): State<Shared>, UrlPath(id): UrlPath<String>) -> Result<Json<PrototypeStats>, ApiError> {
    Ok(Json(s.prototype(parse_id(&id)?)?.clone()))
}

async fn examples(
    State(s): State<Shared>,
    UrlPath(id): UrlPath<String>,
    q: Result<Query<ExamplesQuery>, QueryRejection>,
) -> Result<Json<Examples>, ApiError> {
    let Query(q) = q?;
    Ok(Json(s.examples(parse_id(&id)?, &q)?))
}

#[derive(serde::Deserialize)]
struct DatasetParam {
    dataset: Option<String>,
}

async fn attention(
    State(s): State<Shared>,
    UrlPath((id, image_id)): UrlPath<(String, String)>,
    q: Result<Query<DatasetParam>, QueryRejection>,
) -> Result<Response, ApiError> {
    let Query(q) = q?;
    let id = parse_id(&id)?;
    let bytes = tokio::task::spawn_blocking(move || s.attention_png(id, q.dataset.as_deref(), &image_id))
        .await
        .map_err(ApiError::internal)??;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

fn content_type(path: &Path) -> &'static str {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .as_deref()
    {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("gif") => "image/gif",
        Some("bmp") => "image/bmp",
        Some("webp") => "image/webp",
        _ => "application/octet-stream",
    }
}

async fn image(
    State(s): State<Shared>,
    UrlPath((dataset, image_id)): UrlPath<(String, String)>,
) -> Result<Response, ApiError> {
    if s.store.manifest.dataset(&dataset).is_none() {
        return Err(ApiError::not_found(format!("unknown dataset `{dataset}`")));
    }
    let (_, path) = s.image_path(Some(&dataset), &image_id)?;
    let path = path.to_path_buf();
    let bytes = tokio::fs::read(&path).await.map_err(ApiError::internal)?;
    Ok(([(header::CONTENT_TYPE, content_type(&path))], bytes).into_response())
}

async fn report(State(s): State<Shared>) -> Response {
    (
        [(header::CONTENT_TYPE, HeaderValue::from_static("application/json"))],
        s.report_bytes.clone(),
    )
        .into_response()
}

async fn not_found() -> ApiError {
    ApiError::not_found("no such endpoint")
}

/// The API router; `ui_dir`, when given, is served for every other path.
pub fn router(state: Arc<AppState>, ui_dir: Option<&Path>) -> Router {
    let cors = CorsLayer::new()
        .allow_origin(Any)
        .allow_methods([Method::GET])
        .allow_headers(Any);
    let api = Router::new()
        .route("/api/manifest", get(manifest))
        .route("/api/prototypes", get(prototypes))
        .route("/api/prototypes/{id}", get(prototype))
        .route("/api/prototypes/{id}/examples", get(examples))
        .route("/api/prototypes/{id}/attention/{image_id}", get(attention))
        .route("/api/images/{dataset}/{image_id}", get(image))
        .route("/api/report", get(report))
        .route("/api/{*rest}", get(not_found));
    let app = match ui_dir {
        Some(dir) => api.fallback_service(
            tower_http::services::ServeDir::new(dir)
                .fallback(tower_http::services::ServeFile::new(dir.join("index.html"))),
        ),
        None => api.fallback(not_found),
    };
    app.with_state(state).layer(cors)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: Arc<AppState>,
    ui_dir: Option<PathBuf>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let app = router(state, ui_dir.as_deref());
    axum::serve(listener, app)
        .with_graceful_shutdown(shutdown)
        .await
}
