//! Ledger export ingestion, address and UTXO indexes, USD valuation.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Read, Write};
use std::path::Path;

use chrono::{DateTime, NaiveDate, TimeZone, Utc};
use rust_decimal::Decimal;
use serde::{Deserialize, Deserializer, Serialize};

pub const SATS_PER_BTC: u64 = 100_000_000;

#[derive(Debug, thiserror::Error)]
pub enum LedgerError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("line {line}: duplicate transaction {tx_id}")]
    DuplicateTx { line: usize, tx_id: String },
    #[error("line {line}: output {output} already spent by {first_spender}")]
    DoubleSpend {
        line: usize,
        output: OutputRef,
        first_spender: String,
    },
    #[error("transaction {tx_id} spends unknown output {output}")]
    UnresolvedSpend { tx_id: String, output: OutputRef },
    #[error("transaction {tx_id} input disagrees with spent output {output}: {detail}")]
    SpendMismatch {
        tx_id: String,
        output: OutputRef,
        detail: String,
    },
    #[error("transaction {tx_id} pays {outputs} sat from {inputs} sat of inputs")]
    FeeViolation { tx_id: String, inputs: u64, outputs: u64 },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct OutputRef {
    pub tx_id: String,
    pub index: u32,
}

impl OutputRef {
    pub fn new(tx_id: impl Into<String>, index: u32) -> Self {
        Self {
            tx_id: tx_id.into(),
            index,
        }
    }
}

impl fmt::Display for OutputRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.tx_id, self.index)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TxInput {
    pub address: String,
    pub value_sat: u64,
    pub spends: OutputRef,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TxOutput {
    pub index: u32,
    pub address: String,
    pub value_sat: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transaction {
    pub tx_id: String,
    #[serde(deserialize_with = "de_timestamp")]
    pub timestamp: DateTime<Utc>,
    #[serde(default)]
    pub inputs: Vec<TxInput>,
    pub outputs: Vec<TxOutput>,
}

impl Transaction {
    /// Coinbase transactions carry no inputs.
    pub fn is_coinbase(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_sum(&self) -> u64 {
        self.inputs.iter().map(|i| i.value_sat).sum()
    }

    pub fn output_sum(&self) -> u64 {
        self.outputs.iter().map(|o| o.value_sat).sum()
    }

    pub fn output_ref(&self, index: u32) -> OutputRef {
        OutputRef::new(self.tx_id.clone(), index)
    }
}

/// RFC 3339 strings or integer unix seconds.
fn de_timestamp<'de, D: Deserializer<'de>>(d: D) -> Result<DateTime<Utc>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Secs(i64),
        Text(String),
    }
    match Raw::deserialize(d)? {
        Raw::Secs(s) => Utc
            .timestamp_opt(s, 0)
            .single()
            .ok_or_else(|| serde::de::Error::custom("timestamp out of range")),
        Raw::Text(t) => DateTime::parse_from_rfc3339(&t)
            .map(|d| d.with_timezone(&Utc))
            .map_err(serde::de::Error::custom),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IngestOptions {
    /// Reject non-coinbase transactions whose outputs exceed their inputs.
    pub check_fees: bool,
    /// Reject inputs spending outputs missing from the ledger.
    pub require_resolved: bool,
    /// Drop transactions later than this instant.
    pub cutoff: Option<DateTime<Utc>>,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            check_fees: true,
            require_resolved: true,
            cutoff: None,
        }
    }
}

/// Immutable, indexed ledger.
#[derive(Debug, Clone, Default)]
pub struct ChainStore {
    txs: Vec<Transaction>,
    by_id: HashMap<String, usize>,
    received: HashMap<String, Vec<OutputRef>>,
    sent: HashMap<String, Vec<usize>>,
    spender: HashMap<OutputRef, (usize, usize)>,
}

impl ChainStore {
    pub fn from_transactions(
        txs: impl IntoIterator<Item = Transaction>,
        opts: &IngestOptions,
    ) -> Result<Self, LedgerError> {
        let mut store = Self::default();
        for (i, tx) in txs.into_iter().enumerate() {
            store.push(tx, i + 1, opts)?;
        }
        store.finish(opts)?;
        Ok(store)
    }

    /// Reads JSON lines; blank lines are skipped.
    pub fn ingest<R: BufRead>(reader: R, opts: &IngestOptions) -> Result<Self, LedgerError> {
        let mut store = Self::default();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let tx: Transaction = serde_json::from_str(&line).map_err(|e| LedgerError::Schema {
                line: i + 1,
                message: e.to_string(),
            })?;
            store.push(tx, i + 1, opts)?;
        }
        store.finish(opts)?;
        Ok(store)
    }

    pub fn ingest_path(path: &Path, opts: &IngestOptions) -> Result<Self, LedgerError> {
        let f = std::fs::File::open(path)?;
        Self::ingest(std::io::BufReader::new(f), opts)
    }

    fn push(&mut self, tx: Transaction, line: usize, opts: &IngestOptions) -> Result<(), LedgerError> {
        if opts.cutoff.is_some_and(|c| tx.timestamp > c) {
            return Ok(());
        }
        if self.by_id.contains_key(&tx.tx_id) {
            return Err(LedgerError::DuplicateTx { line, tx_id: tx.tx_id });
        }
        for (pos, out) in tx.outputs.iter().enumerate() {
            if out.index as usize != pos {
                return Err(LedgerError::Schema {
                    line,
                    message: format!(
                        "transaction {} output indices must run 0..{} in order",
                        tx.tx_id,
                        tx.outputs.len()
                    ),
                });
            }
        }
        if opts.check_fees && !tx.is_coinbase() && tx.output_sum() > tx.input_sum() {
            return Err(LedgerError::FeeViolation {
                tx_id: tx.tx_id.clone(),
                inputs: tx.input_sum(),
                outputs: tx.output_sum(),
            });
        }
        let idx = self.txs.len();
        let mut within: HashSet<&OutputRef> = HashSet::with_capacity(tx.inputs.len());
        for input in &tx.inputs {
            if let Some(&(first, _)) = self.spender.get(&input.spends) {
                return Err(LedgerError::DoubleSpend {
                    line,
                    output: input.spends.clone(),
                    first_spender: self.txs[first].tx_id.clone(),
                });
            }
            if !within.insert(&input.spends) {
                return Err(LedgerError::DoubleSpend {
                    line,
                    output: input.spends.clone(),
                    first_spender: tx.tx_id.clone(),
                });
            }
        }
        for (n, input) in tx.inputs.iter().enumerate() {
            self.spender.insert(input.spends.clone(), (idx, n));
            let sent = self.sent.entry(input.address.clone()).or_default();
            if sent.last() != Some(&idx) {
                sent.push(idx);
            }
        }
        for out in &tx.outputs {
            self.received
                .entry(out.address.clone())
                .or_default()
                .push(tx.output_ref(out.index));
        }
        self.by_id.insert(tx.tx_id.clone(), idx);
        self.txs.push(tx);
        Ok(())
    }

    fn finish(&self, opts: &IngestOptions) -> Result<(), LedgerError> {
        // deterministic error reporting regardless of hash order
        let mut refs: Vec<(&OutputRef, &(usize, usize))> = self.spender.iter().collect();
        refs.sort_by_key(|(_, &(tx, n))| (tx, n));
        for (out, &(tx, n)) in refs {
            let spending = &self.txs[tx];
            match self.output(out) {
                Some(o) => {
                    let input = &spending.inputs[n];
                    if o.address != input.address || o.value_sat != input.value_sat {
                        return Err(LedgerError::SpendMismatch {
                            tx_id: spending.tx_id.clone(),
                            output: out.clone(),
                            detail: format!(
                                "input ({}, {}) vs output ({}, {})",
                                input.address, input.value_sat, o.address, o.value_sat
                            ),
                        });
                    }
                }
                None if opts.require_resolved => {
                    return Err(LedgerError::UnresolvedSpend {
                        tx_id: spending.tx_id.clone(),
                        output: out.clone(),
                    })
                }
                None => {}
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.txs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.txs.is_empty()
    }

    pub fn transactions(&self) -> &[Transaction] {
        &self.txs
    }

    pub fn tx(&self, tx_id: &str) -> Option<&Transaction> {
        self.by_id.get(tx_id).map(|&i| &self.txs[i])
    }

    pub fn output(&self, r: &OutputRef) -> Option<&TxOutput> {
        self.tx(&r.tx_id)?.outputs.get(r.index as usize)
    }

    /// Spending transaction and input position of an output, if spent.
    pub fn spender_of(&self, r: &OutputRef) -> Option<(&Transaction, usize)> {
        self.spender.get(r).map(|&(tx, n)| (&self.txs[tx], n))
    }

    /// Outputs paid to `address`, in ledger order.
    pub fn incoming(&self, address: &str) -> &[OutputRef] {
        self.received.get(address).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Transactions spending from `address`, in ledger order.
    pub fn outgoing(&self, address: &str) -> impl Iterator<Item = &Transaction> {
        self.sent
            .get(address)
            .into_iter()
            .flatten()
            .map(|&i| &self.txs[i])
    }

    /// Every address seen as input or output, sorted.
    pub fn addresses(&self) -> Vec<&str> {
        let mut out: Vec<&str> = self
            .received
            .keys()
            .chain(self.sent.keys())
            .map(String::as_str)
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    pub fn write_ledger<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for tx in &self.txs {
            serde_json::to_writer(&mut w, tx)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("no BTC price for {date}")]
pub struct MissingPrice {
    pub date: NaiveDate,
}

/// Daily closing USD price per BTC.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PriceSeries {
    daily: BTreeMap<NaiveDate, Decimal>,
}

#[derive(Deserialize)]
struct PriceRow {
    date: NaiveDate,
    usd_per_btc: Decimal,
}

impl PriceSeries {
    pub fn from_daily(
        daily: impl IntoIterator<Item = (NaiveDate, Decimal)>,
    ) -> Result<Self, LedgerError> {
        let mut out = BTreeMap::new();
        for (i, (date, price)) in daily.into_iter().enumerate() {
            if price <= Decimal::ZERO {
                return Err(LedgerError::Schema {
                    line: i + 2,
                    message: format!("price for {date} must be positive"),
                });
            }
            if out.insert(date, price).is_some() {
                return Err(LedgerError::Schema {
                    line: i + 2,
                    message: format!("duplicate price date {date}"),
                });
            }
        }
        Ok(Self { daily: out })
    }

    /// CSV `date,usd_per_btc`.
    pub fn read_csv<R: Read>(r: R) -> Result<Self, LedgerError> {
        let mut rdr = csv::Reader::from_reader(r);
        let mut rows = Vec::new();
        for row in rdr.deserialize() {
            let row: PriceRow = row?;
            rows.push((row.date, row.usd_per_btc));
        }
        Self::from_daily(rows)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), LedgerError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["date", "usd_per_btc"])?;
        for (d, p) in &self.daily {
            out.write_record([d.to_string(), p.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn usd_per_btc(&self, date: NaiveDate) -> Option<Decimal> {
        self.daily.get(&date).copied()
    }

    pub fn is_empty(&self) -> bool {
        self.daily.is_empty()
    }
}

pub fn sat_to_btc(sat: u64) -> Decimal {
    Decimal::new(sat as i64, 8)
}

/// `sat / 1e8 × close` on the UTC date of `at`, exact.
pub fn value_usd(sat: u64, at: DateTime<Utc>, prices: &PriceSeries) -> Result<Decimal, MissingPrice> {
    let date = at.date_naive();
    let rate = prices.usd_per_btc(date).ok_or(MissingPrice { date })?;
    Ok(sat_to_btc(sat) * rate)
}

/// Two-decimal USD string, half away from zero.
pub fn format_usd(usd: Decimal) -> String {
    let r = usd.round_dp_with_strategy(2, rust_decimal::RoundingStrategy::MidpointAwayFromZero);
    format!("{r:.2}")
}

/// Eight-decimal BTC string.
pub fn format_btc(sat: u64) -> String {
    format!("{}.{:08}", sat / SATS_PER_BTC, sat % SATS_PER_BTC)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ts(s: &str) -> DateTime<Utc> {
        DateTime::parse_from_rfc3339(s).unwrap().with_timezone(&Utc)
    }

    fn coinbase(id: &str, to: &str, value: u64) -> Transaction {
        Transaction {
            tx_id: id.into(),
            timestamp: ts("2018-10-01T00:00:00Z"),
            inputs: vec![],
            outputs: vec![TxOutput {
                index: 0,
                address: to.into(),
                value_sat: value,
            }],
        }
    }

    fn spend(id: &str, from: &Transaction, index: u32, to: &[(&str, u64)]) -> Transaction {
        let o = &from.outputs[index as usize];
        Transaction {
            tx_id: id.into(),
            timestamp: ts("2018-10-02T00:00:00Z"),
            inputs: vec![TxInput {
                address: o.address.clone(),
                value_sat: o.value_sat,
                spends: from.output_ref(index),
            }],
            outputs: to
                .iter()
                .enumerate()
                .map(|(i, (a, v))| TxOutput {
                    index: i as u32,
                    address: a.to_string(),
                    value_sat: *v,
                })
                .collect(),
        }
    }

    #[test]
    fn empty_file_is_empty_store() {
        let store = ChainStore::ingest("".as_bytes(), &IngestOptions::default()).unwrap();
        assert!(store.is_empty());
        assert!(store.addresses().is_empty());
    }

    #[test]
    fn one_payment_indexed() {
        let store = ChainStore::from_transactions([coinbase("c", "A", 50)], &IngestOptions::default()).unwrap();
        assert_eq!(store.incoming("A"), &[OutputRef::new("c", 0)]);
        assert_eq!(store.outgoing("A").count(), 0);
    }

    #[test]
    fn spend_index_and_errors() {
        let c = coinbase("c", "A", 100);
        let s = spend("s", &c, 0, &[("B", 60), ("C", 30)]);
        let store = ChainStore::from_transactions([c.clone(), s.clone()], &IngestOptions::default()).unwrap();
        let (tx, n) = store.spender_of(&OutputRef::new("c", 0)).unwrap();
        assert_eq!((tx.tx_id.as_str(), n), ("s", 0));
        assert_eq!(store.outgoing("A").count(), 1);
        assert_eq!(store.addresses(), vec!["A", "B", "C"]);

        let s2 = spend("s2", &c, 0, &[("D", 100)]);
        let err = ChainStore::from_transactions([c.clone(), s.clone(), s2], &IngestOptions::default()).unwrap_err();
        assert!(matches!(err, LedgerError::DoubleSpend { line: 3, .. }), "{err}");

        let err = ChainStore::from_transactions([c.clone(), c.clone()], &IngestOptions::default()).unwrap_err();
        assert!(matches!(err, LedgerError::DuplicateTx { line: 2, .. }));

        let greedy = spend("g", &c, 0, &[("B", 101)]);
        let err = ChainStore::from_transactions([c.clone(), greedy.clone()], &IngestOptions::default()).unwrap_err();
        assert!(matches!(err, LedgerError::FeeViolation { .. }));
        let lenient = IngestOptions {
            check_fees: false,
            ..Default::default()
        };
        assert!(ChainStore::from_transactions([c.clone(), greedy], &lenient).is_ok());

        let err = ChainStore::from_transactions([s.clone()], &IngestOptions::default()).unwrap_err();
        assert!(matches!(err, LedgerError::UnresolvedSpend { .. }));

        let mut wrong = s;
        wrong.inputs[0].value_sat = 99;
        let err = ChainStore::from_transactions([c, wrong], &lenient).unwrap_err();
        assert!(matches!(err, LedgerError::SpendMismatch { .. }));
    }

    #[test]
    fn out_of_order_outputs_rejected() {
        let mut c = coinbase("c", "A", 1);
        c.outputs[0].index = 1;
        let err = ChainStore::from_transactions([c], &IngestOptions::default()).unwrap_err();
        assert!(matches!(err, LedgerError::Schema { line: 1, .. }));
    }

    #[test]
    fn json_schema_and_cutoff() {
        let data = concat!(
            r#"{"tx_id":"a","timestamp":"2018-10-01T00:00:00Z","inputs":[],"outputs":[{"index":0,"address":"A","value_sat":5}]}"#,
            "\n",
            r#"{"tx_id":"b","timestamp":1556668800,"inputs":[],"outputs":[{"index":0,"address":"B","value_sat":5}]}"#,
            "\n"
        );
        let store = ChainStore::ingest(data.as_bytes(), &IngestOptions::default()).unwrap();
        assert_eq!(store.len(), 2);
        let cut = IngestOptions {
            cutoff: Some(ts("2019-04-30T00:00:00Z")),
            ..Default::default()
        };
        assert_eq!(ChainStore::ingest(data.as_bytes(), &cut).unwrap().len(), 1);

        let bad = r#"{"tx_id":"a","timestamp":"x","outputs":[]}"#;
        assert!(matches!(
            ChainStore::ingest(bad.as_bytes(), &IngestOptions::default()),
            Err(LedgerError::Schema { line: 1, .. })
        ));
        let negative = r#"{"tx_id":"a","timestamp":0,"outputs":[{"index":0,"address":"A","value_sat":-1}]}"#;
        assert!(ChainStore::ingest(negative.as_bytes(), &IngestOptions::default()).is_err());
    }

    #[test]
    fn export_roundtrip() {
        let c = coinbase("c", "A", 100);
        let s = spend("s", &c, 0, &[("B", 60), ("C", 30)]);
        let store = ChainStore::from_transactions([c, s], &IngestOptions::default()).unwrap();
        let mut buf = Vec::new();
        store.write_ledger(&mut buf).unwrap();
        let back = ChainStore::ingest(buf.as_slice(), &IngestOptions::default()).unwrap();
        assert_eq!(back.transactions(), store.transactions());
    }

    #[test]
    fn valuation() {
        let d = NaiveDate::from_ymd_opt(2018, 12, 1).unwrap();
        let prices = PriceSeries::from_daily([(d, Decimal::from(4000))]).unwrap();
        let at = ts("2018-12-01T23:59:59Z");
        assert_eq!(value_usd(SATS_PER_BTC, at, &prices).unwrap(), Decimal::from(4000));
        assert_eq!(value_usd(0, at, &prices).unwrap(), Decimal::ZERO);
        assert_eq!(
            value_usd(1, ts("2018-12-02T00:00:00Z"), &prices),
            Err(MissingPrice {
                date: NaiveDate::from_ymd_opt(2018, 12, 2).unwrap()
            })
        );
        assert_eq!(format_btc(28_177_600_000), "281.77600000");
        assert_eq!(format_btc(1), "0.00000001");
    }

    #[test]
    fn prices_csv_validation() {
        let ok = "date,usd_per_btc\n2018-12-01,4000.5\n";
        let p = PriceSeries::read_csv(ok.as_bytes()).unwrap();
        let mut out = Vec::new();
        p.write_csv(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), ok);
        assert!(PriceSeries::read_csv("date,usd_per_btc\n2018-12-01,0\n".as_bytes()).is_err());
        assert!(PriceSeries::read_csv("date,usd_per_btc\n2018-12-01,1\n2018-12-01,2\n".as_bytes()).is_err());
    }
}
