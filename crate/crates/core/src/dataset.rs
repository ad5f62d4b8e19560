//! Feature matrices, per-item metadata and the join between them.
//!
//! Items are keyed by opaque string ids. A [`Dataset`] keeps feature rows and
//! metadata records aligned by index and carries a ledger of every item that
//! was excluded along the way, so omissions stay auditable.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::invariance::{assign_groups, ConditionSpec, Group};

const EMAT_MAGIC: &[u8; 4] = b"EMAT";
const EMAT_VERSION: u32 = 1;

/// Dense row-major matrix of top-level features, one row per item.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    item_ids: Vec<String>,
    cols: usize,
    values: Vec<f32>,
}

impl FeatureMatrix {
    /// Validates shape, id uniqueness and finiteness.
    pub fn new(item_ids: Vec<String>, cols: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != item_ids.len() * cols {
            return Err(Error::invalid(format!(
                "{} values do not fill {} rows of {} columns",
                values.len(),
                item_ids.len(),
                cols
            )));
        }
        check_unique(&item_ids)?;
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / cols + 1,
                col: pos % cols,
            });
        }
        Ok(FeatureMatrix {
            item_ids,
            cols,
            values,
        })
    }

    /// Builds a matrix from f64 rows, rounding each value to f32.
    pub fn from_rows(item_ids: Vec<String>, rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * cols);
        for (r, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(Error::RaggedRow {
                    row: r + 1,
                    expected: cols,
                    found: row.len(),
                });
            }
            values.extend(row.iter().map(|&v| v as f32));
        }
        FeatureMatrix::new(item_ids, cols, values)
    }

    pub fn rows(&self) -> usize {
        self.item_ids.len()
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn value(&self, row: usize, col: usize) -> f64 {
        f64::from(self.values[row * self.cols + col])
    }

    /// Column `col` as f64 for the given rows.
    pub fn column_at(&self, col: usize, rows: &[usize]) -> Vec<f64> {
        rows.iter().map(|&r| self.value(r, col)).collect()
    }

    pub fn select_rows(&self, rows: &[usize]) -> FeatureMatrix {
        let mut values = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            values.extend_from_slice(self.row(r));
        }
        FeatureMatrix {
            item_ids: rows.iter().map(|&r| self.item_ids[r].clone()).collect(),
            cols: self.cols,
            values,
        }
    }

    /// Copy with every row scaled to unit Euclidean norm (zero rows stay zero).
    pub fn unit_normalized(&self) -> FeatureMatrix {
        let mut values = self.values.clone();
        if self.cols > 0 {
            for row in values.chunks_mut(self.cols) {
                let norm = row
                    .iter()
                    .map(|&v| f64::from(v) * f64::from(v))
                    .sum::<f64>()
                    .sqrt();
                if norm > 0.0 {
                    row.iter_mut()
                        .for_each(|v| *v = (f64::from(*v) / norm) as f32);
                }
            }
        }
        FeatureMatrix {
            item_ids: self.item_ids.clone(),
            cols: self.cols,
            values,
        }
    }

    /// Row-major f64 copy, convenient for numeric kernels.
    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| f64::from(v)).collect()
    }
}

fn check_unique(ids: &[String]) -> Result<()> {
    let mut seen = HashSet::with_capacity(ids.len());
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::DuplicateId(id.clone()));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureFormat {
    Csv,
    Emat,
}

impl FeatureFormat {
    /// `.emat` selects the binary format, anything else CSV.
    pub fn from_path(path: &Path) -> FeatureFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("emat") => FeatureFormat::Emat,
            _ => FeatureFormat::Csv,
        }
    }
}

pub fn load_features(path: &Path, format: FeatureFormat) -> Result<FeatureMatrix> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    match format {
        FeatureFormat::Csv => read_features_csv(reader),
        FeatureFormat::Emat => read_emat(reader),
    }
}

pub fn save_features(path: &Path, fm: &FeatureMatrix, format: FeatureFormat) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    match format {
        FeatureFormat::Csv => write_features_csv(&mut writer, fm)?,
        FeatureFormat::Emat => write_emat(&mut writer, fm).map_err(|e| Error::io(path, e))?,
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

pub fn read_features_csv<R: Read>(reader: R) -> Result<FeatureMatrix> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.get(0) != Some("item_id") {
        return Err(Error::MalformedHeader(
            "first column must be `item_id`".into(),
        ));
    }
    let cols = header.len() - 1;
    if cols == 0 {
        return Err(Error::MalformedHeader("no feature columns".into()));
    }
    for (j, name) in header.iter().skip(1).enumerate() {
        if name != format!("f{j}") {
            return Err(Error::MalformedHeader(format!(
                "column {} is `{name}`, expected `f{j}`",
                j + 1
            )));
        }
    }

    let mut ids = Vec::new();
    let mut values = Vec::new();
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        let row = r + 1;
        if record.len() != cols + 1 {
            return Err(Error::RaggedRow {
                row,
                expected: cols + 1,
                found: record.len(),
            });
        }
        ids.push(record[0].to_string());
        for (col, cell) in record.iter().skip(1).enumerate() {
            let v: f32 = cell.trim().parse().map_err(|_| Error::BadValue {
                row,
                col,
                message: format!("cannot parse `{cell}` as a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::NonFinite { row, col });
            }
            values.push(v);
        }
    }
    FeatureMatrix::new(ids, cols, values)
}

pub fn write_features_csv<W: Write>(writer: W, fm: &FeatureMatrix) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["item_id".to_string()];
    header.extend((0..fm.cols()).map(|j| format!("f{j}")));
    wtr.write_record(&header)?;
    for (i, id) in fm.item_ids().iter().enumerate() {
        let mut record = Vec::with_capacity(fm.cols() + 1);
        record.push(id.clone());
        // f32 Display is the shortest representation that parses back exactly.
        record.extend(fm.row(i).iter().map(|v| v.to_string()));
        wtr.write_record(&record)?;
    }
    wtr.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn write_emat<W: Write>(mut w: W, fm: &FeatureMatrix) -> std::io::Result<()> {
    w.write_all(EMAT_MAGIC)?;
    w.write_all(&EMAT_VERSION.to_le_bytes())?;
    w.write_all(&(fm.rows() as u64).to_le_bytes())?;
    w.write_all(&(fm.cols() as u64).to_le_bytes())?;
    for v in fm.values() {
        w.write_all(&v.to_le_bytes())?;
    }
    for id in fm.item_ids() {
        w.write_all(&(id.len() as u32).to_le_bytes())?;
        w.write_all(id.as_bytes())?;
    }
    Ok(())
}

pub fn read_emat<R: Read>(mut r: R) -> Result<FeatureMatrix> {
    let truncated = |_| Error::Emat("truncated file".into());
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != EMAT_MAGIC {
        return Err(Error::Emat("bad magic bytes".into()));
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b4).map_err(truncated)?;
    let version = u32::from_le_bytes(b4);
    if version != EMAT_VERSION {
        return Err(Error::Emat(format!("unsupported version {version}")));
    }
    r.read_exact(&mut b8).map_err(truncated)?;
    let rows = u64::from_le_bytes(b8);
    r.read_exact(&mut b8).map_err(truncated)?;
    let cols = u64::from_le_bytes(b8);
    let count = rows
        .checked_mul(cols)
        .and_then(|c| usize::try_from(c).ok())
        .ok_or_else(|| Error::Emat("dimensions overflow".into()))?;
    let (rows, cols) = (rows as usize, cols as usize);

    let mut raw = vec![
        0u8;
        count
            .checked_mul(4)
            .ok_or_else(|| Error::Emat("dimensions overflow".into()))?
    ];
    r.read_exact(&mut raw).map_err(truncated)?;
    let values: Vec<f32> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();

    let mut ids = Vec::with_capacity(rows);
    for _ in 0..rows {
        r.read_exact(&mut b4).map_err(truncated)?;
        let len = u32::from_le_bytes(b4) as usize;
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf).map_err(truncated)?;
        let id = String::from_utf8(buf).map_err(|_| Error::Emat("item_id is not UTF-8".into()))?;
        ids.push(id);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| Error::io("<emat>", e))? != 0 {
        return Err(Error::Emat("trailing bytes after item_id list".into()));
    }
    FeatureMatrix::new(ids, cols, values)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MediaType {
    Still,
    VideoFrame,
}

impl MediaType {
    pub fn parse(s: &str) -> Option<MediaType> {
        match s.trim() {
            "still" => Some(MediaType::Still),
            "video" | "video_frame" => Some(MediaType::VideoFrame),
            _ => None,
        }
    }

    /// Label used in metadata CSV files.
    pub fn as_csv(self) -> &'static str {
        match self {
            MediaType::Still => "still",
            MediaType::VideoFrame => "video",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetadataRecord {
    pub item_id: String,
    pub subject_id: String,
    pub media_type: Option<MediaType>,
    pub yaw_deg: Option<f64>,
    pub pitch_deg: Option<f64>,
    pub roll_deg: Option<f64>,
    pub template_id: Option<String>,
}

impl MetadataRecord {
    pub fn has(&self, field: Field) -> bool {
        match field {
            Field::MediaType => self.media_type.is_some(),
            Field::Yaw => self.yaw_deg.is_some(),
            Field::Pitch => self.pitch_deg.is_some(),
            Field::Roll => self.roll_deg.is_some(),
            Field::TemplateId => self.template_id.is_some(),
        }
    }
}

/// Optional metadata fields an analysis may require.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Field {
    MediaType,
    Yaw,
    Pitch,
    Roll,
    TemplateId,
}

impl Field {
    pub fn name(self) -> &'static str {
        match self {
            Field::MediaType => "media_type",
            Field::Yaw => "yaw_deg",
            Field::Pitch => "pitch_deg",
            Field::Roll => "roll_deg",
            Field::TemplateId => "template_id",
        }
    }
}

const METADATA_HEADER: [&str; 7] = [
    "item_id",
    "subject_id",
    "media_type",
    "yaw_deg",
    "pitch_deg",
    "roll_deg",
    "template_id",
];

pub fn load_metadata(path: &Path) -> Result<Vec<MetadataRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_metadata_csv(BufReader::new(file))
}

pub fn save_metadata(path: &Path, records: &[MetadataRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    write_metadata_csv(&mut writer, records)?;
    writer.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metadata_csv<R: Read>(reader: R) -> Result<Vec<MetadataRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.iter().ne(METADATA_HEADER.iter().copied()) {
        return Err(Error::MalformedHeader(format!(
            "expected `{}`",
            METADATA_HEADER.join(",")
        )));
    }

    let mut records = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = r + 1;
        if rec.len() != METADATA_HEADER.len() {
            return Err(Error::RaggedRow {
                row,
                expected: METADATA_HEADER.len(),
                found: rec.len(),
            });
        }
        let cell = |col: usize| {
            let s = rec[col].trim();
            (!s.is_empty()).then_some(s)
        };
        let angle = |col: usize| -> Result<Option<f64>> {
            cell(col)
                .map(|s| {
                    let v: f64 = s.parse().map_err(|_| Error::BadValue {
                        row,
                        col,
                        message: format!("cannot parse `{s}` as degrees"),
                    })?;
                    if v.is_finite() {
                        Ok(v)
                    } else {
                        Err(Error::NonFinite { row, col })
                    }
                })
                .transpose()
        };

        let item_id = cell(0).ok_or_else(|| Error::BadValue {
            row,
            col: 0,
            message: "empty item_id".into(),
        })?;
        let subject_id = cell(1).ok_or_else(|| Error::BadValue {
            row,
            col: 1,
            message: "empty subject_id".into(),
        })?;
        let media_type = cell(2)
            .map(|s| {
                MediaType::parse(s).ok_or_else(|| Error::BadValue {
                    row,
                    col: 2,
                    message: format!("media_type `{s}` is neither `still` nor `video`"),
                })
            })
            .transpose()?;
        let yaw_deg = angle(3)?;
        if let Some(yaw) = yaw_deg {
            if !(-90.0..=90.0).contains(&yaw) {
                return Err(Error::BadValue {
                    row,
                    col: 3,
                    message: format!("yaw {yaw} outside [-90, 90]"),
                });
            }
        }
        records.push(MetadataRecord {
            item_id: item_id.to_string(),
            subject_id: subject_id.to_string(),
            media_type,
            yaw_deg,
            pitch_deg: angle(4)?,
            roll_deg: angle(5)?,
            template_id: cell(6).map(str::to_string),
        });
    }
    Ok(records)
}

pub fn write_metadata_csv<W: Write>(writer: W, records: &[MetadataRecord]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(METADATA_HEADER)?;
    let angle = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    for r in records {
        wtr.write_record([
            r.item_id.clone(),
            r.subject_id.clone(),
            r.media_type
                .map(|m| m.as_csv().to_string())
                .unwrap_or_default(),
            angle(r.yaw_deg),
            angle(r.pitch_deg),
            angle(r.roll_deg),
            r.template_id.clone().unwrap_or_default(),
        ])?;
    }
    wtr.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DropReason {
    MissingFeatures,
    MissingMetadata,
    MissingField(Field),
}

impl fmt::Display for DropReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DropReason::MissingFeatures => f.write_str("missing_features"),
            DropReason::MissingMetadata => f.write_str("missing_metadata"),
            DropReason::MissingField(field) => write!(f, "missing_field:{}", field.name()),
        }
    }
}

impl Serialize for DropReason {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DroppedItem {
    pub item_id: String,
    pub reason: DropReason,
}

/// Feature rows joined with their metadata. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: FeatureMatrix,
    metadata: Vec<MetadataRecord>,
    dropped: Vec<DroppedItem>,
}

/// Joins features and metadata by item id.
///
/// Retained items keep feature-file order. Feature rows without a record are
/// dropped as `missing_metadata`, records without a feature row as
/// `missing_features`, and items lacking a `required` field as
/// `missing_field:<name>` (first missing field in `required` order).
pub fn join(
    features: &FeatureMatrix,
    records: &[MetadataRecord],
    required: &[Field],
) -> Result<Dataset> {
    let mut by_id: HashMap<&str, usize> = HashMap::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        if by_id.insert(rec.item_id.as_str(), i).is_some() {
            return Err(Error::DuplicateId(rec.item_id.clone()));
        }
    }

    let mut keep_rows = Vec::new();
    let mut metadata = Vec::new();
    let mut dropped = Vec::new();
    let mut matched = vec![false; records.len()];
    for (row, id) in features.item_ids().iter().enumerate() {
        let Some(&ri) = by_id.get(id.as_str()) else {
            dropped.push(DroppedItem {
                item_id: id.clone(),
                reason: DropReason::MissingMetadata,
            });
            continue;
        };
        matched[ri] = true;
        let rec = &records[ri];
        if let Some(&field) = required.iter().find(|&&f| !rec.has(f)) {
            dropped.push(DroppedItem {
                item_id: id.clone(),
                reason: DropReason::MissingField(field),
            });
            continue;
        }
        keep_rows.push(row);
        metadata.push(rec.clone());
    }
    for (rec, _) in records.iter().zip(&matched).filter(|(_, &m)| !m) {
        dropped.push(DroppedItem {
            item_id: rec.item_id.clone(),
            reason: DropReason::MissingFeatures,
        });
    }

    if keep_rows.is_empty() {
        return Err(Error::EmptyJoin);
    }
    Ok(Dataset {
        features: features.select_rows(&keep_rows),
        metadata,
        dropped,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.metadata.len()
    }

    pub fn is_empty(&self) -> bool {
        self.metadata.is_empty()
    }

    pub fn features(&self) -> &FeatureMatrix {
        &self.features
    }

    pub fn metadata(&self) -> &[MetadataRecord] {
        &self.metadata
    }

    pub fn dropped(&self) -> &[DroppedItem] {
        &self.dropped
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Narrows the dataset to items carrying every field in `required`,
    /// appending the newly excluded items to the ledger.
    pub fn require(&self, required: &[Field]) -> Result<Dataset> {
        let mut keep = Vec::with_capacity(self.len());
        let mut dropped = self.dropped.clone();
        for (i, rec) in self.metadata.iter().enumerate() {
            match required.iter().find(|&&f| !rec.has(f)) {
                Some(&field) => dropped.push(DroppedItem {
                    item_id: rec.item_id.clone(),
                    reason: DropReason::MissingField(field),
                }),
                None => keep.push(i),
            }
        }
        if keep.is_empty() {
            return Err(Error::EmptyJoin);
        }
        Ok(Dataset {
            features: self.features.select_rows(&keep),
            metadata: keep.iter().map(|&i| self.metadata[i].clone()).collect(),
            dropped,
        })
    }

    /// Same dataset with features replaced (e.g. after normalization).
    pub fn with_features(&self, features: FeatureMatrix) -> Result<Dataset> {
        if features.item_ids() != self.features.item_ids() {
            return Err(Error::invalid("replacement features must keep item order"));
        }
        Ok(Dataset {
            features,
            metadata: self.metadata.clone(),
            dropped: self.dropped.clone(),
        })
    }

    /// Item indices per subject, subjects in label order.
    pub fn indices_by_subject(&self) -> BTreeMap<&str, Vec<usize>> {
        let mut out: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, rec) in self.metadata.iter().enumerate() {
            out.entry(rec.subject_id.as_str()).or_default().push(i);
        }
        out
    }
}

/// Identities with at least `min_per_group` items in both groups of `condition`,
/// sorted by label.
pub fn select_identities(
    ds: &Dataset,
    condition: &ConditionSpec,
    min_per_group: usize,
) -> Vec<String> {
    let groups = assign_groups(ds, condition);
    ds.indices_by_subject()
        .into_iter()
        .filter(|(_, items)| {
            let a = items.iter().filter(|&&i| groups[i] == Group::A).count();
            let b = items.iter().filter(|&&i| groups[i] == Group::B).count();
            a >= min_per_group && b >= min_per_group
        })
        .map(|(s, _)| s.to_string())
        .collect()
}
