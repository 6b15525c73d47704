//! Per-email datapoints: payment addresses, ransom amount and the leaked
//! password or phone number quoted back to the recipient.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Read, Write};
use std::str::FromStr;
use std::sync::OnceLock;

use chrono::NaiveDate;
use regex::Regex;
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};

use super::{CorpusError, Email};
use crate::base58::{is_base58_char, is_valid_legacy_address};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Currency {
    Usd,
    Eur,
    Gbp,
    Nok,
}

impl Currency {
    pub fn code(self) -> &'static str {
        match self {
            Currency::Usd => "USD",
            Currency::Eur => "EUR",
            Currency::Gbp => "GBP",
            Currency::Nok => "NOK",
        }
    }

    fn from_marker(marker: &str) -> Option<Self> {
        let m = marker.to_lowercase();
        Some(match m.as_str() {
            "$" | "us$" | "usd" | "dollar" | "dollars" => Currency::Usd,
            "€" | "eur" | "euro" | "euros" => Currency::Eur,
            "£" | "gbp" | "pounds" => Currency::Gbp,
            "nok" | "kr" | "kroner" => Currency::Nok,
            _ => return None,
        })
    }
}

impl fmt::Display for Currency {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Currency {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "USD" => Ok(Currency::Usd),
            "EUR" => Ok(Currency::Eur),
            "GBP" => Ok(Currency::Gbp),
            "NOK" => Ok(Currency::Nok),
            other => Err(format!("unknown currency {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FiatAmount {
    #[serde(with = "rust_decimal::serde::str")]
    pub value: Decimal,
    pub currency: Currency,
}

/// Daily fiat rates in USD per unit, keyed by UTC date.
#[derive(Debug, Clone, Default)]
pub struct FiatRates {
    rates: BTreeMap<(NaiveDate, Currency), Decimal>,
}

#[derive(Debug, Deserialize)]
struct RateRow {
    date: NaiveDate,
    currency: String,
    usd_per_unit: Decimal,
}

impl FiatRates {
    pub fn insert(&mut self, date: NaiveDate, currency: Currency, usd_per_unit: Decimal) {
        self.rates.insert((date, currency), usd_per_unit);
    }

    /// USD is always 1; other currencies need an exact-date entry.
    pub fn usd_per_unit(&self, date: NaiveDate, currency: Currency) -> Option<Decimal> {
        if currency == Currency::Usd {
            return Some(Decimal::ONE);
        }
        self.rates.get(&(date, currency)).copied()
    }

    pub fn len(&self) -> usize {
        self.rates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rates.is_empty()
    }

    /// CSV `date,currency,usd_per_unit`.
    pub fn read_csv<R: Read>(r: R) -> Result<Self, CorpusError> {
        let mut rdr = csv::Reader::from_reader(r);
        let mut out = Self::default();
        for (i, row) in rdr.deserialize().enumerate() {
            let row: RateRow = row?;
            let currency = Currency::from_str(&row.currency).map_err(|message| {
                CorpusError::Schema {
                    line: i + 2,
                    message,
                }
            })?;
            if row.usd_per_unit <= Decimal::ZERO {
                return Err(CorpusError::Schema {
                    line: i + 2,
                    message: "rate must be positive".into(),
                });
            }
            out.insert(row.date, currency, row.usd_per_unit);
        }
        Ok(out)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), CorpusError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["date", "currency", "usd_per_unit"])?;
        for ((date, cur), rate) in &self.rates {
            out.write_record([date.to_string(), cur.code().to_string(), rate.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SecretKind {
    Password,
    Phone,
}

/// A label after which the spam quotes the recipient's secret, e.g.
/// `password:`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SecretLabel {
    pub label: String,
    pub kind: SecretKind,
}

/// Delimiters used to locate secrets. Campaign templates that phrase the
/// password differently get their own rule set.
#[derive(Debug, Clone)]
pub struct ExtractionRules {
    labels: Vec<SecretLabel>,
    pattern: Option<Regex>,
}

impl ExtractionRules {
    pub fn new(mut labels: Vec<SecretLabel>) -> Self {
        // longest label first so "phone number:" beats "phone"
        labels.sort_by(|a, b| b.label.len().cmp(&a.label.len()).then(a.label.cmp(&b.label)));
        let pattern = if labels.is_empty() {
            None
        } else {
            let alts: Vec<String> = labels.iter().map(|l| regex::escape(l.label.trim())).collect();
            Some(
                Regex::new(&format!(r"(?i)(?:^|[^\p{{L}}\p{{N}}])({})\s*(\S+)", alts.join("|")))
                    .expect("escaped labels form a valid pattern"),
            )
        };
        Self { labels, pattern }
    }

    pub fn labels(&self) -> &[SecretLabel] {
        &self.labels
    }

    fn find_secret(&self, body: &str) -> Option<(String, SecretKind)> {
        let caps = self.pattern.as_ref()?.captures(body)?;
        let matched = caps.get(1)?.as_str().to_lowercase();
        let kind = self
            .labels
            .iter()
            .find(|l| l.label.trim().to_lowercase() == matched)
            .map(|l| l.kind)?;
        let value = caps.get(2)?.as_str().trim_end_matches([',', ';', ')', ']']);
        let value = value.strip_suffix('.').unwrap_or(value);
        (!value.is_empty()).then(|| (value.to_string(), kind))
    }
}

impl Default for ExtractionRules {
    fn default() -> Self {
        let l = |label: &str, kind| SecretLabel {
            label: label.to_string(),
            kind,
        };
        Self::new(vec![
            l("password:", SecretKind::Password),
            l("password is", SecretKind::Password),
            l("pass:", SecretKind::Password),
            l("passwort:", SecretKind::Password),
            l("heslo:", SecretKind::Password),
            l("phone:", SecretKind::Phone),
            l("phone number:", SecretKind::Phone),
        ])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionFlag {
    /// A non-USD amount had no rate for the email date.
    MissingRate,
    /// The email date could not be parsed, so no conversion was possible.
    InvalidDate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractedDatapoints {
    pub email_id: String,
    pub payment_addresses: Vec<String>,
    pub amount: Option<FiatAmount>,
    #[serde(with = "rust_decimal::serde::str_option")]
    pub amount_usd: Option<Decimal>,
    pub password_or_phone: Option<String>,
    pub secret_kind: Option<SecretKind>,
    #[serde(default)]
    pub flags: Vec<ExtractionFlag>,
}

/// Maximal base58 runs that look like legacy addresses and pass the
/// checksum, deduplicated in order of first appearance.
pub fn extract_addresses(text: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    let mut start = None;
    let mut push = |s: &str| {
        if matches!(s.as_bytes().first(), Some(b'1' | b'3'))
            && (26..=35).contains(&s.len())
            && is_valid_legacy_address(s)
            && !out.iter().any(|x| x == s)
        {
            out.push(s.to_string());
        }
    };
    for (i, c) in text.char_indices() {
        if is_base58_char(c) {
            start.get_or_insert(i);
        } else if let Some(s) = start.take() {
            push(&text[s..i]);
        }
    }
    if let Some(s) = start {
        push(&text[s..]);
    }
    out
}

fn amount_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        let num = r"\d{1,3}(?:[,.'\u{a0}]\d{3})+(?:[.,]\d{1,2})?|\d+(?:[.,]\d{1,2})?";
        let pre = r"(?i:us\$|\$|€|£|usd|eur|gbp|nok)";
        let post = r"(?i:usd|eur|gbp|nok|dollars?|euros?|pounds|kroner|kr|\$|€|£)";
        Regex::new(&format!(
            r"(?:(?P<pre>{pre})\s?(?P<n1>{num}))|(?:(?P<n2>{num})\s?(?P<post>{post}))(?:[^\p{{L}}]|$)"
        ))
        .expect("static pattern")
    })
}

fn parse_number(raw: &str) -> Option<Decimal> {
    let cleaned: String = raw.chars().filter(|c| !matches!(c, '\'' | '\u{a0}')).collect();
    // the last separator is a decimal mark iff 1-2 digits follow it
    let last_sep = cleaned.rfind([',', '.']);
    let normalized = match last_sep {
        Some(pos) if cleaned.len() - pos - 1 <= 2 => {
            let (int, frac) = cleaned.split_at(pos);
            format!("{}.{}", int.replace([',', '.'], ""), &frac[1..])
        }
        _ => cleaned.replace([',', '.'], ""),
    };
    Decimal::from_str(&normalized).ok()
}

/// First fiat amount in the text, from a currency symbol or code before or
/// after the number.
pub fn parse_amount(text: &str) -> Option<FiatAmount> {
    for caps in amount_regex().captures_iter(text) {
        let (marker, number) = match (caps.name("pre"), caps.name("n1"), caps.name("n2"), caps.name("post")) {
            (Some(m), Some(n), _, _) => (m.as_str(), n.as_str()),
            (_, _, Some(n), Some(m)) => (m.as_str(), n.as_str()),
            _ => continue,
        };
        if let (Some(currency), Some(value)) = (Currency::from_marker(marker), parse_number(number)) {
            return Some(FiatAmount { value, currency });
        }
    }
    None
}

pub fn extract_datapoints(
    email: &Email,
    rates: &FiatRates,
    rules: &ExtractionRules,
) -> ExtractedDatapoints {
    let text = if email.subject.is_empty() {
        email.body.clone()
    } else {
        format!("{}\n{}", email.subject, email.body)
    };
    let payment_addresses = extract_addresses(&text);
    let amount = parse_amount(&email.body);
    let mut flags = Vec::new();
    let amount_usd = amount.and_then(|a| {
        if a.currency == Currency::Usd {
            return Some(a.value);
        }
        let Some(date) = email.date else {
            flags.push(ExtractionFlag::InvalidDate);
            return None;
        };
        match rates.usd_per_unit(date.date_naive(), a.currency) {
            Some(rate) => Some(a.value * rate),
            None => {
                flags.push(ExtractionFlag::MissingRate);
                None
            }
        }
    });
    let secret = rules.find_secret(&email.body);
    ExtractedDatapoints {
        email_id: email.id.clone(),
        payment_addresses,
        amount,
        amount_usd,
        secret_kind: secret.as_ref().map(|s| s.1),
        password_or_phone: secret.map(|s| s.0),
        flags,
    }
}

pub fn write_datapoints<W: Write>(mut w: W, points: &[ExtractedDatapoints]) -> std::io::Result<()> {
    for p in points {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_datapoints<R: BufRead>(r: R) -> Result<Vec<ExtractedDatapoints>, CorpusError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CorpusError::Schema {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}
