//! Knee-visit records, the radiographic PFOA rule and dataset manifests.
//!
//! A manifest is a UTF-8 CSV file with one knee-visit per row. Missing values
//! are empty cells and load as `None`, never as zero. Two optional preamble
//! lines (`# provenance: ...`, `# spacing_mm: ...`) precede the header.
//!
//! KL grades are stored as read. Values outside 0–4 (e.g. the reader codes
//! some registries use for "not gradable") are treated as non-standard and are
//! removed by [`exclusion_filter`] rather than rejected at load time.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::roi::RoiDetection;
use crate::{Error, Result};

pub const MANIFEST_HEADER: [&str; 15] = [
    "subject_id",
    "side",
    "visit",
    "age",
    "sex",
    "bmi",
    "womac_total",
    "womac_pain",
    "kl",
    "ost",
    "jsn",
    "scl",
    "cyst",
    "pfoa",
    "image_path",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn code(self) -> &'static str {
        match self {
            Side::Left => "L",
            Side::Right => "R",
        }
    }
}

impl FromStr for Side {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "L" => Ok(Side::Left),
            "R" => Ok(Side::Right),
            other => Err(format!("expected L or R, got {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Visit {
    Baseline,
    M15,
    M30,
    M60,
    M84,
}

impl Visit {
    pub const ALL: [Visit; 5] = [Visit::Baseline, Visit::M15, Visit::M30, Visit::M60, Visit::M84];

    pub fn code(self) -> &'static str {
        match self {
            Visit::Baseline => "baseline",
            Visit::M15 => "m15",
            Visit::M30 => "m30",
            Visit::M60 => "m60",
            Visit::M84 => "m84",
        }
    }
}

impl FromStr for Visit {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Visit::ALL
            .into_iter()
            .find(|v| v.code() == s)
            .ok_or_else(|| format!("unknown visit {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sex {
    Female,
    Male,
}

impl Sex {
    pub fn code(self) -> &'static str {
        match self {
            Sex::Female => "F",
            Sex::Male => "M",
        }
    }

    /// Numeric encoding used by the reference models (female 0, male 1).
    pub fn as_feature(self) -> f64 {
        match self {
            Sex::Female => 0.0,
            Sex::Male => 1.0,
        }
    }
}

impl FromStr for Sex {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "F" => Ok(Sex::Female),
            "M" => Ok(Sex::Male),
            other => Err(format!("expected F or M, got {other:?}")),
        }
    }
}

/// Semi-quantitative patellofemoral feature grades, each 0 (normal) to 3 (severe).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct PatellofemoralGrades {
    pub osteophyte: u8,
    pub jsn: u8,
    pub sclerosis: u8,
    pub cysts: u8,
}

impl PatellofemoralGrades {
    pub fn new(osteophyte: u8, jsn: u8, sclerosis: u8, cysts: u8) -> Self {
        PatellofemoralGrades {
            osteophyte,
            jsn,
            sclerosis,
            cysts,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, g) in [
            ("osteophyte", self.osteophyte),
            ("jsn", self.jsn),
            ("sclerosis", self.sclerosis),
            ("cysts", self.cysts),
        ] {
            if g > 3 {
                return Err(Error::validation(format!("{name} grade {g} outside 0-3")));
            }
        }
        Ok(())
    }
}

/// Radiographic PFOA: osteophyte grade ≥ 2, or JSN ≥ 1 together with any
/// osteophyte, sclerosis or cyst grade ≥ 1.
pub fn pfoa_label(g: &PatellofemoralGrades) -> Result<bool> {
    g.validate()?;
    let any_other = g.osteophyte >= 1 || g.sclerosis >= 1 || g.cysts >= 1;
    Ok(g.osteophyte >= 2 || (g.jsn >= 1 && any_other))
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RecordKey {
    pub subject_id: String,
    pub side: Side,
    pub visit: Visit,
}

impl fmt::Display for RecordKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.subject_id, self.side.code(), self.visit.code())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KneeRecord {
    pub subject_id: String,
    pub side: Side,
    pub visit: Visit,
    pub age: f64,
    pub sex: Sex,
    pub bmi: Option<f64>,
    pub womac_total: Option<f64>,
    pub womac_pain: Option<f64>,
    pub kl_grade: Option<i32>,
    pub pf_grades: Option<PatellofemoralGrades>,
    pub pfoa: Option<bool>,
    pub image_path: Option<String>,
}

impl KneeRecord {
    pub fn key(&self) -> RecordKey {
        RecordKey {
            subject_id: self.subject_id.clone(),
            side: self.side,
            visit: self.visit,
        }
    }

    /// KL grade if it is one of the standard values 0–4.
    pub fn standard_kl(&self) -> Option<u8> {
        match self.kl_grade {
            Some(k @ 0..=4) => Some(k as u8),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.subject_id.is_empty() {
            return Err(Error::validation("empty subject_id"));
        }
        if !(self.age >= 0.0) {
            return Err(Error::validation(format!("age {} must be >= 0", self.age)));
        }
        if let Some(b) = self.bmi {
            if !(b > 0.0) {
                return Err(Error::validation(format!("bmi {b} must be > 0")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<KneeRecord>,
    pub provenance: String,
    /// Target pixel spacing (mm) the images are standardised to.
    pub spacing_mm: f64,
}

impl DatasetManifest {
    pub fn new(records: Vec<KneeRecord>, provenance: impl Into<String>, spacing_mm: f64) -> Result<Self> {
        let manifest = DatasetManifest {
            records,
            provenance: provenance.into(),
            spacing_mm,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.spacing_mm > 0.0) {
            return Err(Error::validation(format!("spacing {} must be > 0", self.spacing_mm)));
        }
        let mut seen = BTreeSet::new();
        for r in &self.records {
            r.validate()?;
            if !seen.insert(r.key()) {
                return Err(Error::validation(format!("duplicate record key {}", r.key())));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn subjects(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.subject_id.as_str()).collect()
    }

    /// Copy with only the records for which `keep` returns true.
    pub fn filtered(&self, mut keep: impl FnMut(&KneeRecord) -> bool) -> DatasetManifest {
        DatasetManifest {
            records: self.records.iter().filter(|r| keep(r)).cloned().collect(),
            provenance: self.provenance.clone(),
            spacing_mm: self.spacing_mm,
        }
    }
}

fn escape_provenance(s: &str) -> String {
    s.replace('\\', "\\\\").replace('\n', "\\n")
}

fn unescape_provenance(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some('n') => out.push('\n'),
                Some(other) => out.push(other),
                None => out.push('\\'),
            }
        } else {
            out.push(c);
        }
    }
    out
}

fn opt_to_cell<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!("# provenance: {}\n", escape_provenance(&manifest.provenance)));
    out.push_str(&format!("# spacing_mm: {}\n", manifest.spacing_mm));
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    w.write_record(MANIFEST_HEADER)?;
    for r in &manifest.records {
        let g = r.pf_grades;
        w.write_record([
            r.subject_id.clone(),
            r.side.code().to_string(),
            r.visit.code().to_string(),
            r.age.to_string(),
            r.sex.code().to_string(),
            opt_to_cell(r.bmi),
            opt_to_cell(r.womac_total),
            opt_to_cell(r.womac_pain),
            opt_to_cell(r.kl_grade),
            opt_to_cell(g.map(|g| g.osteophyte)),
            opt_to_cell(g.map(|g| g.jsn)),
            opt_to_cell(g.map(|g| g.sclerosis)),
            opt_to_cell(g.map(|g| g.cysts)),
            opt_to_cell(r.pfoa.map(u8::from)),
            r.image_path.clone().unwrap_or_default(),
        ])?;
    }
    let body = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    out.push_str(std::str::from_utf8(&body).expect("csv writer emits utf-8"));
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

struct RowParser<'a> {
    path: &'a Path,
    row: usize,
    record: &'a csv::StringRecord,
}

impl RowParser<'_> {
    fn err(&self, col: usize, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            row: self.row,
            column: MANIFEST_HEADER[col].to_string(),
            message: message.into(),
        }
    }

    fn cell(&self, col: usize) -> &str {
        self.record.get(col).unwrap_or("")
    }

    fn required<T: FromStr>(&self, col: usize) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        let s = self.cell(col);
        if s.is_empty() {
            return Err(self.err(col, "required value is missing"));
        }
        s.parse().map_err(|e: T::Err| self.err(col, format!("{s:?}: {e}")))
    }

    fn optional<T: FromStr>(&self, col: usize) -> Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        let s = self.cell(col);
        if s.is_empty() {
            return Ok(None);
        }
        s.parse()
            .map(Some)
            .map_err(|e: T::Err| self.err(col, format!("{s:?}: {e}")))
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut provenance = String::new();
    let mut spacing_mm = 0.2;
    let mut preamble_lines = 0usize;
    let mut body_start = 0usize;
    for line in text.split_inclusive('\n') {
        let Some(comment) = line.strip_prefix('#') else { break };
        preamble_lines += 1;
        body_start += line.len();
        let comment = comment.trim_end_matches(['\n', '\r']).trim_start();
        if let Some(v) = comment.strip_prefix("provenance:") {
            provenance = unescape_provenance(v.strip_prefix(' ').unwrap_or(v));
        } else if let Some(v) = comment.strip_prefix("spacing_mm:") {
            spacing_mm = v.trim().parse().map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                row: preamble_lines,
                column: "spacing_mm".into(),
                message: format!("{e}"),
            })?;
        }
    }

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(text[body_start..].as_bytes());
    let header = reader.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            row: preamble_lines + 1,
            column: "header".into(),
            message: format!("expected {:?}", MANIFEST_HEADER.join(",")),
        });
    }

    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        // 1-based file line: preamble + header + data index.
        let row_no = preamble_lines + 2 + i;
        let row = row.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            row: row_no,
            column: "*".into(),
            message: e.to_string(),
        })?;
        let p = RowParser {
            path,
            row: row_no,
            record: &row,
        };
        let grades: [Option<u8>; 4] = [p.optional(9)?, p.optional(10)?, p.optional(11)?, p.optional(12)?];
        let pf_grades = match grades {
            [Some(o), Some(j), Some(s), Some(c)] => Some(PatellofemoralGrades::new(o, j, s, c)),
            [None, None, None, None] => None,
            _ => {
                let col = 9 + grades.iter().position(Option::is_none).unwrap_or(0);
                return Err(p.err(col, "partially missing patellofemoral grades"));
            }
        };
        let pfoa = match p.cell(13) {
            "" => None,
            "0" => Some(false),
            "1" => Some(true),
            other => return Err(p.err(13, format!("expected 0 or 1, got {other:?}"))),
        };
        let image_path = match p.cell(14) {
            "" => None,
            s => Some(s.to_string()),
        };
        let record = KneeRecord {
            subject_id: p.required(0)?,
            side: p.required(1)?,
            visit: p.required(2)?,
            age: p.required(3)?,
            sex: p.required(4)?,
            bmi: p.optional(5)?,
            womac_total: p.optional(6)?,
            womac_pain: p.optional(7)?,
            kl_grade: p.optional(8)?,
            pf_grades,
            pfoa,
            image_path,
        };
        record.validate().map_err(|e| p.err(0, e.to_string()))?;
        records.push(record);
    }
    DatasetManifest::new(records, provenance, spacing_mm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ExclusionReason {
    MissingRadiograph,
    MissingPfoaStatus,
    NonStandardKl,
    LowRoiConfidence,
}

impl ExclusionReason {
    pub const ALL: [ExclusionReason; 4] = [
        ExclusionReason::MissingRadiograph,
        ExclusionReason::MissingPfoaStatus,
        ExclusionReason::NonStandardKl,
        ExclusionReason::LowRoiConfidence,
    ];

    pub fn describe(self) -> &'static str {
        match self {
            ExclusionReason::MissingRadiograph => "missing radiograph",
            ExclusionReason::MissingPfoaStatus => "missing PFOA status",
            ExclusionReason::NonStandardKl => "non-standard KL grade",
            ExclusionReason::LowRoiConfidence => "low ROI confidence",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExclusionCounts(pub BTreeMap<ExclusionReason, usize>);

impl ExclusionCounts {
    pub fn get(&self, reason: ExclusionReason) -> usize {
        self.0.get(&reason).copied().unwrap_or(0)
    }

    pub fn total(&self) -> usize {
        self.0.values().sum()
    }
}

/// The first applicable exclusion reason for a record, checked in the order of
/// [`ExclusionReason::ALL`]. A missing KL grade is not an exclusion: the
/// reference models handle it as a missing value.
pub fn exclusion_reason(record: &KneeRecord, roi_passed: bool) -> Option<ExclusionReason> {
    if record.image_path.is_none() {
        Some(ExclusionReason::MissingRadiograph)
    } else if record.pfoa.is_none() {
        Some(ExclusionReason::MissingPfoaStatus)
    } else if record.kl_grade.is_some() && record.standard_kl().is_none() {
        Some(ExclusionReason::NonStandardKl)
    } else if !roi_passed {
        Some(ExclusionReason::LowRoiConfidence)
    } else {
        None
    }
}

/// Drops incomplete records and knees whose ROI failed the confidence gate.
///
/// `roi_results` holds the gated detection for every record that passed; a
/// record without an entry counts as a gate miss. Each dropped record is
/// counted under exactly one reason.
pub fn exclusion_filter(
    manifest: &DatasetManifest,
    roi_results: &BTreeMap<RecordKey, RoiDetection>,
) -> (DatasetManifest, ExclusionCounts) {
    let mut counts = ExclusionCounts::default();
    let kept = manifest.filtered(|r| {
        let passed = roi_results.contains_key(&r.key());
        match exclusion_reason(r, passed) {
            Some(reason) => {
                *counts.0.entry(reason).or_insert(0) += 1;
                false
            }
            None => true,
        }
    });
    (kept, counts)
}
