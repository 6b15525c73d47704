//! Spam corpus ingestion, template bucketing and datapoint extraction.

mod bucket;
mod extract;
mod labels;
mod tokenize;

pub use bucket::{
    bucket_emails, bucket_quality, read_buckets, read_membership, write_buckets, write_membership,
    Bucket, BucketParams, BucketQuality, Bucketing,
};
pub use extract::{
    extract_addresses, extract_datapoints, parse_amount, read_datapoints, write_datapoints,
    Currency, ExtractedDatapoints, ExtractionFlag, ExtractionRules, FiatAmount, FiatRates,
    SecretKind, SecretLabel,
};
pub use labels::{group_campaigns, label_buckets, read_labels, BucketLabel, Campaign, EmailLabel};
pub use tokenize::{jaccard, normalize_and_tokenize, TokenSuffix};

use std::collections::{BTreeMap, HashSet};
use std::io::BufRead;

use chrono::{DateTime, NaiveDateTime, Utc};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("line {line}: duplicate email id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("invalid parameter: {0}")]
    Parameter(String),
}

/// One masked spam message.
#[derive(Debug, Clone, PartialEq)]
pub struct Email {
    pub id: String,
    /// Parsed `Date` header; `None` when `date_raw` could not be parsed.
    pub date: Option<DateTime<Utc>>,
    pub date_raw: String,
    pub language: Option<String>,
    pub subject: String,
    pub body: String,
    pub masked_fields: BTreeMap<String, String>,
}

impl Email {
    pub fn new(id: impl Into<String>, date_raw: impl Into<String>, body: impl Into<String>) -> Self {
        let date_raw = date_raw.into();
        Self {
            id: id.into(),
            date: parse_email_date(&date_raw),
            date_raw,
            language: None,
            subject: String::new(),
            body: body.into(),
            masked_fields: BTreeMap::new(),
        }
    }

    pub fn has_valid_date(&self) -> bool {
        self.date.is_some()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct EmailRecord {
    id: String,
    #[serde(default)]
    date: String,
    #[serde(default)]
    language: Option<String>,
    #[serde(default)]
    subject: String,
    #[serde(default)]
    body: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    masked_fields: BTreeMap<String, String>,
}

/// Accepts RFC 2822 `Date` headers, RFC 3339 and `YYYY-MM-DD HH:MM:SS` (UTC).
pub fn parse_email_date(raw: &str) -> Option<DateTime<Utc>> {
    let raw = raw.trim();
    if raw.is_empty() {
        return None;
    }
    if let Ok(dt) = DateTime::parse_from_rfc2822(raw) {
        return Some(dt.with_timezone(&Utc));
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(raw) {
        return Some(dt.with_timezone(&Utc));
    }
    NaiveDateTime::parse_from_str(raw, "%Y-%m-%d %H:%M:%S")
        .ok()
        .map(|n| n.and_utc())
}

/// Reads a JSON-lines corpus. Blank lines are skipped; ids must be unique.
pub fn read_corpus<R: BufRead>(reader: R) -> Result<Vec<Email>, CorpusError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EmailRecord = serde_json::from_str(&line).map_err(|e| CorpusError::Schema {
            line: lineno,
            message: e.to_string(),
        })?;
        if !seen.insert(rec.id.clone()) {
            return Err(CorpusError::DuplicateId { line: lineno, id: rec.id });
        }
        out.push(Email {
            date: parse_email_date(&rec.date),
            id: rec.id,
            date_raw: rec.date,
            language: rec.language.filter(|l| !l.is_empty()),
            subject: rec.subject,
            body: rec.body,
            masked_fields: rec.masked_fields,
        });
    }
    Ok(out)
}

pub fn write_corpus<W: std::io::Write>(mut w: W, emails: &[Email]) -> std::io::Result<()> {
    for e in emails {
        let rec = EmailRecord {
            id: e.id.clone(),
            date: e.date_raw.clone(),
            language: e.language.clone(),
            subject: e.subject.clone(),
            body: e.body.clone(),
            masked_fields: e.masked_fields.clone(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
