//! Comparison analytics over an assignment index: dataset specificity,
//! bank diversity, class-versus-patch usage, spatial co-assignment maps and
//! semantic alignment with image labels.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::index::{ImageRecord, IndexStore, Occurrence, PrototypeIndex, Rank, TokenKind};
use crate::protosim::PrototypeBank;

pub const REPORT_FORMAT: &str = "protosim-report-v1";
pub const DEFAULT_THRESHOLD: f64 = 0.95;
pub const DEFAULT_MIN_OCCURRENCES: u64 = 10;

/// Specificity verdict for one prototype.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum SpecificityLabel {
    SpecificTo(String),
    Shared,
    InsufficientData,
}

impl fmt::Display for SpecificityLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::SpecificTo(d) => write!(f, "specific-to:{d}"),
            Self::Shared => f.write_str("shared"),
            Self::InsufficientData => f.write_str("insufficient-data"),
        }
    }
}

impl std::str::FromStr for SpecificityLabel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared" => Ok(Self::Shared),
            "insufficient-data" => Ok(Self::InsufficientData),
            _ => match s.strip_prefix("specific-to:") {
                Some(d) if !d.is_empty() => Ok(Self::SpecificTo(d.to_string())),
                _ => Err(Error::InvalidArgument(format!(
                    "label must be specific-to:ID, shared or insufficient-data, got `{s}`"
                ))),
            },
        }
    }
}

impl Serialize for SpecificityLabel {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SpecificityLabel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpecificityOptions {
    /// A prototype is dataset-specific when one dataset's share is strictly
    /// above this.
    pub threshold: f64,
    /// Fewer occurrences than this yield `insufficient-data`.
    pub min_occurrences: u64,
    pub token_kind: TokenKind,
}

impl Default for SpecificityOptions {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            min_occurrences: DEFAULT_MIN_OCCURRENCES,
            token_kind: TokenKind::Any,
        }
    }
}

impl SpecificityOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "threshold must lie in (0, 1], got {}",
                self.threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetShare {
    pub dataset_id: String,
    pub count: u64,
    pub proportion: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeStats {
    pub prototype_id: usize,
    /// Occurrences of the selected token kind.
    pub occurrences: u64,
    pub class_occurrences: u64,
    pub patch_occurrences: u64,
    /// Share of class-token occurrences among all occurrences.
    pub class_proportion: Option<f64>,
    pub per_dataset: Vec<DatasetShare>,
    /// Absent in single-dataset summaries.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<SpecificityLabel>,
    /// Largest dataset share.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub specificity: Option<f64>,
}

/// Per-dataset proportions and specificity label of one prototype.
pub fn specificity(
    index: &PrototypeIndex,
    prototype: usize,
    opts: &SpecificityOptions,
) -> Result<PrototypeStats> {
    opts.validate()?;
    let counts = index.counts(prototype)?;
    let total: u64 = counts.iter().map(|(_, c)| c.get(opts.token_kind)).sum();
    let class: u64 = counts.iter().map(|(_, c)| c.class).sum();
    let patch: u64 = counts.iter().map(|(_, c)| c.patch).sum();
    let per_dataset: Vec<DatasetShare> = counts
        .iter()
        .map(|(d, c)| {
            let n = c.get(opts.token_kind);
            DatasetShare {
                dataset_id: d.clone(),
                count: n,
                proportion: if total > 0 { n as f64 / total as f64 } else { 0.0 },
            }
        })
        .collect();
    let top = per_dataset
        .iter()
        .fold(None::<&DatasetShare>, |best, s| match best {
            Some(b) if b.proportion >= s.proportion => Some(b),
            _ => Some(s),
        })
        .map(|s| (s.dataset_id.clone(), s.proportion));
    let comparison = index.datasets().len() >= 2;
    let label = comparison.then(|| {
        if total < opts.min_occurrences || total == 0 {
            SpecificityLabel::InsufficientData
        } else {
            match &top {
                Some((d, share)) if *share > opts.threshold => {
                    SpecificityLabel::SpecificTo(d.clone())
                }
                _ => SpecificityLabel::Shared,
            }
        }
    });
    Ok(PrototypeStats {
        prototype_id: prototype,
        occurrences: total,
        class_occurrences: class,
        patch_occurrences: patch,
        class_proportion: (class + patch > 0).then(|| class as f64 / (class + patch) as f64),
        per_dataset,
        label,
        specificity: if comparison && total > 0 {
            top.map(|(_, share)| share)
        } else {
            None
        },
    })
}

/// Share of a prototype's occurrences that are class tokens; `None` when
/// unused.
pub fn class_patch_proportion(index: &PrototypeIndex, prototype: usize) -> Result<Option<f64>> {
    let t = index.total_counts(prototype)?;
    Ok((t.class + t.patch > 0).then(|| t.class as f64 / (t.class + t.patch) as f64))
}

/// Mean pairwise cosine similarity of the bank rows. Zero-norm rows are
/// excluded (with a warning) and counted in the second return value.
pub fn prototype_diversity(bank: &PrototypeBank) -> Result<(f64, usize)> {
    let rows = bank.rows()?;
    let mut units: Vec<Vec<f64>> = Vec::with_capacity(rows.len());
    let mut excluded = 0;
    for r in &rows {
        let norm = r.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        if norm == 0.0 {
            excluded += 1;
        } else {
            units.push(r.iter().map(|&v| v as f64 / norm).collect());
        }
    }
    if excluded > 0 {
        tracing::warn!(excluded, "zero-norm prototypes excluded from diversity");
    }
    let n = units.len();
    if n < 2 {
        return Err(Error::InvalidArgument(
            "diversity needs at least two non-zero prototypes".into(),
        ));
    }
    // sum_{i != j} u_i.u_j = |sum u|^2 - sum |u_i|^2
    let d = units[0].len();
    let mut sum = vec![0.0f64; d];
    let mut self_dots = 0.0;
    for u in &units {
        for (s, v) in sum.iter_mut().zip(u) {
            *s += v;
        }
        self_dots += u.iter().map(|v| v * v).sum::<f64>();
    }
    let total: f64 = sum.iter().map(|v| v * v).sum();
    Ok(((total - self_dots) / (n * (n - 1)) as f64, excluded))
}

/// Spatial co-assignment map over the patch grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentreBiasMap {
    pub rows: usize,
    pub cols: usize,
    /// Row-major patch positions the map is anchored on.
    pub selected: Vec<usize>,
    /// `rows × cols`, each in `[-1, 1]`.
    pub values: Vec<Vec<f64>>,
}

/// The centre cell(s) of a grid: one cell for odd sides, the middle two
/// rows/columns for even sides.
pub fn centre_positions(rows: usize, cols: usize) -> Vec<usize> {
    let mid = |n: usize| if n % 2 == 1 { vec![n / 2] } else { vec![n / 2 - 1, n / 2] };
    let mut out = Vec::new();
    for r in mid(rows) {
        for c in mid(cols) {
            out.push(r * cols + c);
        }
    }
    out
}

/// Co-assignment correlation of two grid positions across images: the
/// Pearson correlation of their prototype indicator vectors pooled over
/// prototypes, `(agree − Σₖ pₛ(k)p_q(k)) / √((1 − Σₖ pₛ(k)²)(1 − Σₖ p_q(k)²))`.
/// A position always correlates 1 with itself; two constant positions
/// correlate 1 when they always agree and 0 otherwise; a constant position
/// correlates 0 with a varying one.
pub fn co_assignment(records: &[&ImageRecord], s: usize, q: usize) -> f64 {
    if s == q {
        return 1.0;
    }
    let n = records.len() as f64;
    let mut ps: BTreeMap<usize, f64> = BTreeMap::new();
    let mut pq: BTreeMap<usize, f64> = BTreeMap::new();
    let mut agree = 0.0;
    for r in records {
        let (a, b) = (r.patch_prototypes[s], r.patch_prototypes[q]);
        *ps.entry(a).or_default() += 1.0 / n;
        *pq.entry(b).or_default() += 1.0 / n;
        if a == b {
            agree += 1.0 / n;
        }
    }
    let expected: f64 = ps
        .iter()
        .map(|(k, v)| v * pq.get(k).copied().unwrap_or(0.0))
        .sum();
    let var_s = 1.0 - ps.values().map(|v| v * v).sum::<f64>();
    let var_q = 1.0 - pq.values().map(|v| v * v).sum::<f64>();
    if var_s <= 1e-12 && var_q <= 1e-12 {
        // Both positions constant: perfectly co-assigned or never.
        return if agree >= 1.0 - 1e-12 { 1.0 } else { 0.0 };
    }
    if var_s <= 1e-12 || var_q <= 1e-12 {
        return 0.0;
    }
    ((agree - expected) / (var_s * var_q).sqrt()).clamp(-1.0, 1.0)
}

/// Mean co-assignment of every grid cell with the selected positions.
pub fn centre_bias_map(
    records: &[&ImageRecord],
    grid: (usize, usize),
    selected: &[usize],
) -> Result<CentreBiasMap> {
    let (rows, cols) = grid;
    let n = rows * cols;
    if records.len() < 2 {
        return Err(Error::Data("centre-bias map needs at least two images".into()));
    }
    if selected.is_empty() || selected.iter().any(|&s| s >= n) {
        return Err(Error::InvalidArgument(format!(
            "selected positions must be non-empty and below {n}"
        )));
    }
    for r in records {
        if r.patch_prototypes.len() != n {
            return Err(Error::mismatch(
                "centre-bias map",
                format!("{} patch tokens", r.patch_prototypes.len()),
                format!("{rows}x{cols} grid"),
            ));
        }
    }
    let values = (0..rows)
        .map(|i| {
            (0..cols)
                .map(|j| {
                    let q = i * cols + j;
                    selected
                        .iter()
                        .map(|&s| co_assignment(records, s, q))
                        .sum::<f64>()
                        / selected.len() as f64
                })
                .collect()
        })
        .collect();
    Ok(CentreBiasMap {
        rows,
        cols,
        selected: selected.to_vec(),
        values,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAlignment {
    pub class: String,
    pub images: usize,
    /// Most frequent class-token prototype of the class.
    pub top_prototype: usize,
    pub top_prototype_images: usize,
    /// `top_prototype_images / images`.
    pub strength: f64,
    /// The top prototype's own most frequent class is this class.
    pub aligned: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeClasses {
    pub prototype: usize,
    pub top_class: String,
    pub counts: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub dataset_id: String,
    pub num_classes: usize,
    pub aligned: usize,
    /// Strongest association first.
    pub classes: Vec<ClassAlignment>,
    pub prototypes: Vec<PrototypeClasses>,
    pub missing_labels: Vec<String>,
}

fn argmax_count<K: Ord + Clone>(counts: &BTreeMap<K, usize>) -> Option<(K, usize)> {
    // BTreeMap iterates keys ascending, so ties keep the smallest key.
    counts.iter().fold(None, |best, (k, &n)| match best {
        Some((_, bn)) if bn >= n => best,
        _ => Some((k.clone(), n)),
    })
}

/// Matches classes with class-token prototypes in both directions. Images
/// without a label are listed; more than 10% unlabeled aborts.
pub fn semantic_alignment(
    dataset_id: &str,
    records: &[&ImageRecord],
    labels: &BTreeMap<String, String>,
) -> Result<AlignmentReport> {
    let missing: Vec<String> = records
        .iter()
        .filter(|r| !labels.contains_key(&r.image_id))
        .map(|r| r.image_id.clone())
        .collect();
    if missing.len() as f64 > 0.10 * records.len() as f64 {
        return Err(Error::Data(format!(
            "{} of {} images of `{dataset_id}` have no label",
            missing.len(),
            records.len()
        )));
    }
    for id in &missing {
        tracing::warn!(image = %id, "image has no label");
    }
    let mut by_class: BTreeMap<String, BTreeMap<usize, usize>> = BTreeMap::new();
    let mut by_proto: BTreeMap<usize, BTreeMap<String, usize>> = BTreeMap::new();
    for r in records {
        let Some(c) = labels.get(&r.image_id) else {
            continue;
        };
        *by_class.entry(c.clone()).or_default().entry(r.class_prototype).or_default() += 1;
        *by_proto.entry(r.class_prototype).or_default().entry(c.clone()).or_default() += 1;
    }
    let top_class: BTreeMap<usize, String> = by_proto
        .iter()
        .filter_map(|(p, c)| argmax_count(c).map(|(c, _)| (*p, c)))
        .collect();
    let mut classes: Vec<ClassAlignment> = by_class
        .iter()
        .filter_map(|(c, protos)| {
            let (p, n) = argmax_count(protos)?;
            let images: usize = protos.values().sum();
            Some(ClassAlignment {
                class: c.clone(),
                images,
                top_prototype: p,
                top_prototype_images: n,
                strength: n as f64 / images as f64,
                aligned: top_class.get(&p) == Some(c),
            })
        })
        .collect();
    classes.sort_by(|a, b| {
        b.strength
            .total_cmp(&a.strength)
            .then_with(|| a.class.cmp(&b.class))
    });
    let prototypes = by_proto
        .into_iter()
        .map(|(p, counts)| PrototypeClasses {
            prototype: p,
            top_class: top_class[&p].clone(),
            counts,
        })
        .collect();
    Ok(AlignmentReport {
        dataset_id: dataset_id.to_string(),
        num_classes: classes.len(),
        aligned: classes.iter().filter(|c| c.aligned).count(),
        classes,
        prototypes,
        missing_labels: missing,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportMode {
    Comparison,
    Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDataset {
    pub dataset_id: String,
    pub images: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub specific: BTreeMap<String, usize>,
    pub shared: usize,
    pub insufficient_data: usize,
    /// Prototypes assigned to no token at all (also counted as
    /// insufficient data).
    pub unused: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diversity {
    pub mean_cosine_similarity: f64,
    pub excluded_zero_norm: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetCentreBias {
    pub dataset_id: String,
    pub statistic: String,
    pub map: CentreBiasMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub format: String,
    pub mode: ReportMode,
    pub options: SpecificityOptions,
    pub num_prototypes: usize,
    pub num_patches: usize,
    pub checkpoint_hash: String,
    pub datasets: Vec<ReportDataset>,
    pub counts: LabelCounts,
    pub diversity: Diversity,
    /// Every prototype in id order.
    pub prototypes: Vec<PrototypeStats>,
    /// Top exemplars of every used prototype, keyed by id.
    pub exemplars: BTreeMap<usize, Vec<Occurrence>>,
    pub centre_bias: Vec<DatasetCentreBias>,
}

pub const CENTRE_BIAS_STATISTIC: &str =
    "pooled co-assignment correlation with the centre patches (agreement minus chance, over indicator variance)";

impl ComparisonReport {
    pub fn stats(&self, prototype: usize) -> Option<&PrototypeStats> {
        self.prototypes.get(prototype)
    }
}

/// Builds the full report. With one dataset the report is a summary:
/// frequencies and exemplars without specificity labels.
pub fn compare_report(
    store: &IndexStore,
    bank: &PrototypeBank,
    opts: &SpecificityOptions,
    top_k: usize,
) -> Result<ComparisonReport> {
    opts.validate()?;
    let index = &store.index;
    if bank.k() != index.k() {
        return Err(Error::mismatch("report", format!("bank K={}", bank.k()), format!("index K={}", index.k())));
    }
    let mode = if index.datasets().len() >= 2 {
        ReportMode::Comparison
    } else {
        ReportMode::Summary
    };
    let mut counts = LabelCounts::default();
    for d in index.datasets() {
        counts.specific.insert(d.clone(), 0);
    }
    let mut prototypes = Vec::with_capacity(index.k());
    let mut exemplars = BTreeMap::new();
    for p in 0..index.k() {
        let s = specificity(index, p, opts)?;
        if s.class_occurrences + s.patch_occurrences == 0 {
            counts.unused += 1;
        }
        match &s.label {
            Some(SpecificityLabel::SpecificTo(d)) => *counts.specific.entry(d.clone()).or_default() += 1,
            Some(SpecificityLabel::Shared) => counts.shared += 1,
            Some(SpecificityLabel::InsufficientData) => counts.insufficient_data += 1,
            None => {}
        }
        if s.occurrences > 0 && top_k > 0 {
            let mut occ = index.query_occurrences(p, None, opts.token_kind, Rank::Count)?;
            occ.truncate(top_k);
            exemplars.insert(p, occ);
        }
        prototypes.push(s);
    }
    let (mean, excluded) = prototype_diversity(bank)?;
    let grid = store.manifest.grid;
    let centre = centre_positions(grid.0, grid.1);
    let mut centre_bias = Vec::new();
    for d in index.datasets() {
        let recs = store.dataset_records(d);
        if recs.len() < 2 {
            continue;
        }
        centre_bias.push(DatasetCentreBias {
            dataset_id: d.clone(),
            statistic: CENTRE_BIAS_STATISTIC.to_string(),
            map: centre_bias_map(&recs, grid, &centre)?,
        });
    }
    Ok(ComparisonReport {
        format: REPORT_FORMAT.to_string(),
        mode,
        options: *opts,
        num_prototypes: index.k(),
        num_patches: index.num_patches(),
        checkpoint_hash: store.manifest.checkpoint_hash.clone(),
        datasets: index
            .datasets()
            .iter()
            .map(|d| ReportDataset {
                dataset_id: d.clone(),
                images: index.image_count(d),
            })
            .collect(),
        counts,
        diversity: Diversity {
            mean_cosine_similarity: mean,
            excluded_zero_norm: excluded,
        },
        prototypes,
        exemplars,
        centre_bias,
    })
}

pub const REPORT_JSON: &str = "report.json";

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Writes `report.json`, `index.html` and one page per used prototype.
pub fn write_report(report: &ComparisonReport, store: &IndexStore, out: &Path) -> Result<()> {
    use crate::checkpoint::write_atomic;
    let pages = out.join("prototypes");
    std::fs::create_dir_all(&pages).map_err(|e| Error::io(&pages, e))?;
    let mut json = serde_json::to_string_pretty(report)?;
    json.push('\n');
    write_atomic(&out.join(REPORT_JSON), json.as_bytes())?;

    let mut html = String::from(
        "<!doctype html>\n<html><head><meta charset=\"utf-8\"><title>Prototype comparison</title></head><body>\n",
    );
    html.push_str(&format!(
        "<h1>Prototype {}</h1>\n<p>K = {}, threshold {} , minimum occurrences {}, tokens: {}</p>\n",
        match report.mode {
            ReportMode::Comparison => "comparison",
            ReportMode::Summary => "summary",
        },
        report.num_prototypes,
        report.options.threshold,
        report.options.min_occurrences,
        report.options.token_kind
    ));
    html.push_str("<ul>\n");
    for d in &report.datasets {
        html.push_str(&format!(
            "<li>{}: {} images, {} specific prototypes</li>\n",
            escape(&d.dataset_id),
            d.images,
            report.counts.specific.get(&d.dataset_id).copied().unwrap_or(0)
        ));
    }
    html.push_str(&format!(
        "<li>shared: {}</li><li>insufficient data: {} (unused: {})</li>\n</ul>\n",
        report.counts.shared, report.counts.insufficient_data, report.counts.unused
    ));
    html.push_str(&format!(
        "<p>Mean pairwise cosine similarity of prototypes: {:.4}</p>\n",
        report.diversity.mean_cosine_similarity
    ));
    html.push_str("<table border=\"1\"><tr><th>prototype</th><th>label</th><th>occurrences</th><th>class share</th>");
    for d in &report.datasets {
        html.push_str(&format!("<th>{}</th>", escape(&d.dataset_id)));
    }
    html.push_str("</tr>\n");
    for s in report.prototypes.iter().filter(|s| s.occurrences > 0) {
        html.push_str(&format!(
            "<tr><td><a href=\"prototypes/{0}.html\">{0}</a></td><td>{1}</td><td>{2}</td><td>{3}</td>",
            s.prototype_id,
            s.label.as_ref().map(|l| l.to_string()).unwrap_or_default(),
            s.occurrences,
            s.class_proportion.map(|v| format!("{v:.3}")).unwrap_or_default()
        ));
        for d in &s.per_dataset {
            html.push_str(&format!("<td>{:.3}</td>", d.proportion));
        }
        html.push_str("</tr>\n");
        let mut page = format!(
            "<!doctype html>\n<html><head><meta charset=\"utf-8\"><title>Prototype {0}</title></head><body>\n<h1>Prototype {0}</h1>\n<p><a href=\"../index.html\">back</a></p>\n",
            s.prototype_id
        );
        for occ in report.exemplars.get(&s.prototype_id).into_iter().flatten() {
            let src = store
                .image_path(&occ.dataset_id, &occ.image_id)
                .map(|p| format!("file://{}", p.display()))
                .unwrap_or_default();
            page.push_str(&format!(
                "<figure style=\"display:inline-block\"><img src=\"{}\" width=\"128\"><figcaption>{} / {} ({} tokens)</figcaption></figure>\n",
                escape(&src),
                escape(&occ.dataset_id),
                escape(&occ.image_id),
                occ.count
            ));
        }
        page.push_str("</body></html>\n");
        write_atomic(&pages.join(format!("{}.html", s.prototype_id)), page.as_bytes())?;
    }
    html.push_str("</table>\n</body></html>\n");
    write_atomic(&out.join("index.html"), html.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Tensor};

    fn rec(d: &str, id: &str, class: usize, patches: &[usize]) -> ImageRecord {
        ImageRecord {
            image_id: id.into(),
            dataset_id: d.into(),
            class_prototype: class,
            patch_prototypes: patches.to_vec(),
            top_affinities: vec![],
        }
    }

    #[test]
    fn label_text_round_trip() {
        for l in [
            SpecificityLabel::SpecificTo("A".into()),
            SpecificityLabel::Shared,
            SpecificityLabel::InsufficientData,
        ] {
            assert_eq!(l.to_string().parse::<SpecificityLabel>().unwrap(), l);
        }
        assert!("specific-to:".parse::<SpecificityLabel>().is_err());
    }

    #[test]
    fn min_occurrence_gate() {
        let records: Vec<_> = (0..3).map(|i| rec("A", &i.to_string(), 1, &[1, 1])).collect();
        let mut all = records;
        all.push(rec("B", "b", 0, &[0, 0]));
        let idx = PrototypeIndex::build(2, 2, &all).unwrap();
        let s = specificity(&idx, 1, &SpecificityOptions::default()).unwrap();
        assert_eq!(s.occurrences, 9);
        assert_eq!(s.label, Some(SpecificityLabel::InsufficientData));
        let opts = SpecificityOptions {
            min_occurrences: 9,
            ..Default::default()
        };
        assert_eq!(
            specificity(&idx, 1, &opts).unwrap().label,
            Some(SpecificityLabel::SpecificTo("A".into()))
        );
    }

    #[test]
    fn diversity_excludes_zero_rows() {
        let t = Tensor::new(&[[1f32, 0.0], [0.0, 1.0], [0.0, 0.0]], &Device::Cpu).unwrap();
        let bank = PrototypeBank::new(t).unwrap();
        let (m, ex) = prototype_diversity(&bank).unwrap();
        assert_eq!(ex, 1);
        assert!(m.abs() < 1e-12);
    }

    #[test]
    fn centre_positions_odd_and_even() {
        assert_eq!(centre_positions(3, 3), vec![4]);
        assert_eq!(centre_positions(4, 4), vec![5, 6, 9, 10]);
    }
}
