//! Canonical exam data model: ingestion, label-set consolidation, template
//! rendering, and corpus statistics.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One examination: structured fields plus free-text history/diagnosis and an
/// optional raw protocol-group name.
///
/// The sex code is kept verbatim as the source encodes it (e.g. `"2"`), and
/// the exam name is carried through persistence but never templated.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExamRecord {
    pub exam_code: String,
    pub exam_name: String,
    pub sex: String,
    pub age: u32,
    #[serde(default)]
    pub history: String,
    #[serde(default)]
    pub diagnosis: String,
    /// Raw group name as ingested; dense ids come from [`ProtocolLabelSet`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub protocol_group: Option<String>,
}

impl ExamRecord {
    pub fn validate(&self) -> Result<()> {
        if self.exam_code.is_empty() {
            return Err(Error::InvalidConfig("exam_code must be non-empty".into()));
        }
        Ok(())
    }
}

/// Consolidated label set: groups ordered by descending support so the
/// "largest", "second largest", ... classes used by resampling are
/// positionally stable. Ties break by name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolLabelSet {
    groups: Vec<LabelGroup>,
    exclusion_threshold: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelGroup {
    pub id: usize,
    pub name: String,
    pub support: usize,
}

impl ProtocolLabelSet {
    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn groups(&self) -> &[LabelGroup] {
        &self.groups
    }

    pub fn exclusion_threshold(&self) -> usize {
        self.exclusion_threshold
    }

    pub fn name_of(&self, id: usize) -> Option<&str> {
        self.groups.get(id).map(|g| g.name.as_str())
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.groups.iter().find(|g| g.name == name).map(|g| g.id)
    }

    /// Dense label id of a record, if it carries a retained group.
    pub fn label_of(&self, record: &ExamRecord) -> Option<usize> {
        record
            .protocol_group
            .as_deref()
            .and_then(|name| self.id_of(name))
    }

    /// Dense label ids for a labeled dataset; errors on records without a
    /// retained group.
    pub fn labels_for(&self, records: &[ExamRecord]) -> Result<Vec<usize>> {
        records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                self.label_of(r).ok_or_else(|| Error::MalformedRow {
                    row: i + 1,
                    field: "protocol_group".into(),
                    message: format!("{:?} is not a retained group", r.protocol_group),
                })
            })
            .collect()
    }
}

/// Drop groups with support below `threshold` (together with their records)
/// and re-index the rest densely by descending support.
///
/// Unlabeled records are dropped as well: consolidation prepares a supervised
/// dataset and only labeled rows can participate.
pub fn consolidate_labels(
    records: &[ExamRecord],
    threshold: usize,
) -> Result<(Vec<ExamRecord>, ProtocolLabelSet)> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for r in records {
        if let Some(name) = r.protocol_group.as_deref() {
            *counts.entry(name).or_insert(0) += 1;
        }
    }
    let mut retained: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|&(_, c)| c >= threshold)
        .map(|(n, c)| (n.to_string(), c))
        .collect();
    if retained.is_empty() {
        return Err(Error::EmptyLabelSet { threshold });
    }
    retained.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let groups: Vec<LabelGroup> = retained
        .into_iter()
        .enumerate()
        .map(|(id, (name, support))| LabelGroup { id, name, support })
        .collect();
    let set = ProtocolLabelSet {
        groups,
        exclusion_threshold: threshold,
    };
    let filtered: Vec<ExamRecord> = records
        .iter()
        .filter(|r| set.label_of(r).is_some())
        .cloned()
        .collect();
    Ok((filtered, set))
}

/// A rendered classification input. `source_id` indexes the originating
/// record in its dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplatedSequence {
    pub text: String,
    pub source_id: usize,
}

/// Render the fixed single-sequence template. Empty history/diagnosis render
/// as empty strings after the field label so the grammar stays intact.
pub fn render_template(record: &ExamRecord) -> String {
    format!(
        "Exam is {}. Sex is {}. Age at Exam {}. History: {}. Diagnosis: {}",
        record.exam_code, record.sex, record.age, record.history, record.diagnosis
    )
}

pub fn render_all(records: &[ExamRecord]) -> Vec<TemplatedSequence> {
    records
        .iter()
        .enumerate()
        .map(|(source_id, r)| TemplatedSequence {
            text: render_template(r),
            source_id,
        })
        .collect()
}

/// Whitespace word-count statistics for one text field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldStats {
    pub min: usize,
    pub max: usize,
    pub mean: f64,
    pub median: f64,
    pub std_dev: f64,
    /// Fraction of records where the field has zero words.
    pub empty_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub history: FieldStats,
    pub diagnosis: FieldStats,
    pub template_char_mean: f64,
    pub template_char_median: f64,
}

fn median_of_sorted(sorted: &[usize]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
    }
}

fn field_stats(counts: &[usize]) -> FieldStats {
    let n = counts.len() as f64;
    let mean = counts.iter().sum::<usize>() as f64 / n;
    // Population standard deviation.
    let var = counts
        .iter()
        .map(|&c| {
            let d = c as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let mut sorted = counts.to_vec();
    sorted.sort_unstable();
    FieldStats {
        min: sorted[0],
        max: *sorted.last().unwrap(),
        mean,
        median: median_of_sorted(&sorted),
        std_dev: var.sqrt(),
        empty_fraction: counts.iter().filter(|&&c| c == 0).count() as f64 / n,
    }
}

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Word statistics on the unstructured fields plus templated character
/// lengths. Counts split on whitespace; empty fields count as zero words.
pub fn compute_stats(records: &[ExamRecord]) -> Result<CorpusStats> {
    if records.is_empty() {
        return Err(Error::EmptyInput("compute_stats on empty corpus".into()));
    }
    let history: Vec<usize> = records.iter().map(|r| word_count(&r.history)).collect();
    let diagnosis: Vec<usize> = records.iter().map(|r| word_count(&r.diagnosis)).collect();
    let mut template_chars: Vec<usize> = records
        .iter()
        .map(|r| render_template(r).chars().count())
        .collect();
    let mean = template_chars.iter().sum::<usize>() as f64 / records.len() as f64;
    template_chars.sort_unstable();
    Ok(CorpusStats {
        history: field_stats(&history),
        diagnosis: field_stats(&diagnosis),
        template_char_mean: mean,
        template_char_median: median_of_sorted(&template_chars),
    })
}

/// Dataset serialization format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    Csv,
    Jsonl,
}

impl DatasetFormat {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(DatasetFormat::Csv),
            "jsonl" => Ok(DatasetFormat::Jsonl),
            other => Err(Error::UnknownFormat(other.to_string())),
        }
    }

    /// Infer from a file extension, defaulting to CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") => DatasetFormat::Jsonl,
            _ => DatasetFormat::Csv,
        }
    }
}

pub const COLUMNS: [&str; 7] = [
    "exam_code",
    "exam_name",
    "sex",
    "age",
    "history",
    "diagnosis",
    "protocol_group",
];

pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<Vec<ExamRecord>> {
    match format {
        DatasetFormat::Csv => load_csv(path),
        DatasetFormat::Jsonl => load_jsonl(path),
    }
}

pub fn save_dataset(path: &Path, format: DatasetFormat, records: &[ExamRecord]) -> Result<()> {
    match format {
        DatasetFormat::Csv => save_csv(path, records),
        DatasetFormat::Jsonl => save_jsonl(path, records),
    }
}

fn load_csv(path: &Path) -> Result<Vec<ExamRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut reader = csv::Reader::from_reader(BufReader::new(file));
    let headers = reader.headers()?.clone();
    let mut index = HashMap::new();
    for (i, h) in headers.iter().enumerate() {
        if !COLUMNS.contains(&h) {
            return Err(Error::UnknownColumn(h.to_string()));
        }
        index.insert(h.to_string(), i);
    }
    for required in &COLUMNS[..6] {
        if !index.contains_key(*required) {
            return Err(Error::MissingColumn((*required).to_string()));
        }
    }
    let mut records = Vec::new();
    for (row_idx, row) in reader.records().enumerate() {
        let row = row?;
        let row_no = row_idx + 1;
        let get = |field: &str| -> &str { row.get(index[field]).unwrap_or("") };
        let age: u32 = get("age").parse().map_err(|_| Error::MalformedRow {
            row: row_no,
            field: "age".into(),
            message: format!("expected a non-negative integer, got {:?}", get("age")),
        })?;
        let record = ExamRecord {
            exam_code: get("exam_code").to_string(),
            exam_name: get("exam_name").to_string(),
            sex: get("sex").to_string(),
            age,
            history: get("history").to_string(),
            diagnosis: get("diagnosis").to_string(),
            protocol_group: index
                .get("protocol_group")
                .map(|&i| row.get(i).unwrap_or(""))
                .filter(|s| !s.is_empty())
                .map(str::to_string),
        };
        if record.exam_code.is_empty() {
            return Err(Error::MalformedRow {
                row: row_no,
                field: "exam_code".into(),
                message: "must be non-empty".into(),
            });
        }
        records.push(record);
    }
    Ok(records)
}

fn save_csv(path: &Path, records: &[ExamRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut writer = csv::Writer::from_writer(BufWriter::new(file));
    writer.write_record(COLUMNS)?;
    for r in records {
        writer.write_record([
            r.exam_code.as_str(),
            r.exam_name.as_str(),
            r.sex.as_str(),
            &r.age.to_string(),
            r.history.as_str(),
            r.diagnosis.as_str(),
            r.protocol_group.as_deref().unwrap_or(""),
        ])?;
    }
    writer.flush().map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

fn load_jsonl(path: &Path) -> Result<Vec<ExamRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ExamRecord =
            serde_json::from_str(&line).map_err(|e| Error::MalformedRow {
                row: idx + 1,
                field: e.to_string(),
                message: "invalid JSON record".into(),
            })?;
        if record.exam_code.is_empty() {
            return Err(Error::MalformedRow {
                row: idx + 1,
                field: "exam_code".into(),
                message: "must be non-empty".into(),
            });
        }
        records.push(record);
    }
    Ok(records)
}

fn save_jsonl(path: &Path, records: &[ExamRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")
            .map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}
