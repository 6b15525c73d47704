//! Victim-payment filters and revenue aggregation.
//!
//! A payment is one output paid to an address of the expanded sextortion
//! set. Every incoming output becomes a [`PaymentRecord`] carrying the set
//! of filters it passed, so rejected records stay auditable.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use chrono::{DateTime, Datelike, NaiveDate, Utc};
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};

use crate::chainstore::{format_btc, format_usd, value_usd, ChainStore, OutputRef, PriceSeries, Transaction};

#[derive(Debug, thiserror::Error)]
pub enum FilterError {
    #[error("ransom amount set is empty")]
    EmptyAmounts,
    #[error("tolerance must lie in [0, 1), got {0}")]
    Tolerance(Decimal),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("row {row}: {message}")]
    Schema { row: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Filter {
    Collector,
    Range,
    MovingMoney,
}

impl Filter {
    pub const ALL: [Filter; 3] = [Filter::Collector, Filter::Range, Filter::MovingMoney];

    pub fn name(self) -> &'static str {
        match self {
            Filter::Collector => "collector",
            Filter::Range => "range",
            Filter::MovingMoney => "moving_money",
        }
    }

    fn bit(self) -> u8 {
        match self {
            Filter::Collector => 1,
            Filter::Range => 2,
            Filter::MovingMoney => 4,
        }
    }
}

/// Filters a record passed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct FilterSet(u8);

impl FilterSet {
    pub fn insert(&mut self, f: Filter) {
        self.0 |= f.bit();
    }

    pub fn with(mut self, f: Filter) -> Self {
        self.insert(f);
        self
    }

    pub fn contains(self, f: Filter) -> bool {
        self.0 & f.bit() != 0
    }

    pub fn is_superset(self, other: FilterSet) -> bool {
        self.0 & other.0 == other.0
    }

    pub fn iter(self) -> impl Iterator<Item = Filter> {
        Filter::ALL.into_iter().filter(move |f| self.contains(*f))
    }
}

impl fmt::Display for FilterSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.iter().map(Filter::name).collect();
        f.write_str(&names.join("|"))
    }
}

impl FromStr for FilterSet {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut out = FilterSet::default();
        for part in s.split('|').filter(|p| !p.is_empty()) {
            let f = Filter::ALL
                .into_iter()
                .find(|f| f.name() == part)
                .ok_or_else(|| format!("unknown filter {part:?}"))?;
            out.insert(f);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Keep,
    Drop,
}

impl Decision {
    pub fn kept(self) -> bool {
        self == Decision::Keep
    }
}

/// Drops transactions moving money between sextortion addresses: at least
/// one sextortion input and at least one sextortion output.
pub fn collector_filter(tx: &Transaction, sextortion: &BTreeSet<String>) -> Decision {
    let from_inside = tx.inputs.iter().any(|i| sextortion.contains(&i.address));
    let to_inside = tx.outputs.iter().any(|o| sextortion.contains(&o.address));
    if from_inside && to_inside {
        Decision::Drop
    } else {
        Decision::Keep
    }
}

/// Drops single-output (send-maximum) transactions.
pub fn moving_money_filter(tx: &Transaction) -> Decision {
    if tx.outputs.len() == 1 {
        Decision::Drop
    } else {
        Decision::Keep
    }
}

/// Ransom amounts seen in spam (`S`) and the tolerance `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct RansomAmountSet {
    min: Decimal,
    max: Decimal,
    count: usize,
    tolerance: Decimal,
}

impl RansomAmountSet {
    pub fn new(amounts: impl IntoIterator<Item = Decimal>, tolerance: Decimal) -> Result<Self, FilterError> {
        if tolerance < Decimal::ZERO || tolerance >= Decimal::ONE {
            return Err(FilterError::Tolerance(tolerance));
        }
        let mut iter = amounts.into_iter();
        let first = iter.next().ok_or(FilterError::EmptyAmounts)?;
        let (mut min, mut max, mut count) = (first, first, 1);
        for a in iter {
            min = min.min(a);
            max = max.max(a);
            count += 1;
        }
        Ok(Self {
            min,
            max,
            count,
            tolerance,
        })
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// `[(1 - p) min S, (1 + p) max S]`, inclusive.
    pub fn window(&self) -> (Decimal, Decimal) {
        (
            (Decimal::ONE - self.tolerance) * self.min,
            (Decimal::ONE + self.tolerance) * self.max,
        )
    }

    pub fn contains(&self, usd: Decimal) -> bool {
        let (lo, hi) = self.window();
        lo <= usd && usd <= hi
    }
}

/// Which amount window applies to a receiving address.
#[derive(Debug, Clone)]
pub enum RangePolicy {
    Global(RansomAmountSet),
    /// Experimental: each address is checked against the windows of the
    /// campaigns it belongs to; addresses without a campaign fall back to
    /// the global window.
    PerCampaign {
        global: RansomAmountSet,
        campaigns: Vec<RansomAmountSet>,
        by_address: HashMap<String, Vec<usize>>,
    },
}

impl RangePolicy {
    pub fn keeps(&self, address: &str, usd: Decimal) -> bool {
        match self {
            RangePolicy::Global(s) => s.contains(usd),
            RangePolicy::PerCampaign {
                global,
                campaigns,
                by_address,
            } => match by_address.get(address) {
                Some(ids) if !ids.is_empty() => ids.iter().any(|&i| campaigns[i].contains(usd)),
                _ => global.contains(usd),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaymentRecord {
    pub output_ref: OutputRef,
    pub receiving_address: String,
    pub timestamp: DateTime<Utc>,
    pub value_sat: u64,
    pub value_usd: Option<Decimal>,
    #[serde(skip)]
    pub passed: FilterSet,
}

impl PaymentRecord {
    pub fn passes(&self, combo: FilterCombo) -> bool {
        self.passed.is_superset(combo.required())
    }

    pub fn missing_price(&self) -> bool {
        self.value_usd.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RangeDecision {
    Keep,
    Drop,
    /// No price for the payment date; never silently kept.
    MissingPrice,
}

pub fn range_filter(payment: &PaymentRecord, policy: &RangePolicy) -> RangeDecision {
    match payment.value_usd {
        None => RangeDecision::MissingPrice,
        Some(usd) if policy.keeps(&payment.receiving_address, usd) => RangeDecision::Keep,
        Some(_) => RangeDecision::Drop,
    }
}

/// Every output paid to an address of `sextortion`, with each filter
/// evaluated. With `range` set to `None` the range filter passes all
/// records.
pub fn collect_payments(
    store: &ChainStore,
    sextortion: &BTreeSet<String>,
    prices: &PriceSeries,
    range: Option<&RangePolicy>,
) -> Vec<PaymentRecord> {
    let mut out = Vec::new();
    for tx in store.transactions() {
        let collector = collector_filter(tx, sextortion);
        let moving = moving_money_filter(tx);
        for o in tx.outputs.iter().filter(|o| sextortion.contains(&o.address)) {
            let mut record = PaymentRecord {
                output_ref: tx.output_ref(o.index),
                receiving_address: o.address.clone(),
                timestamp: tx.timestamp,
                value_sat: o.value_sat,
                value_usd: value_usd(o.value_sat, tx.timestamp, prices).ok(),
                passed: FilterSet::default(),
            };
            if collector.kept() {
                record.passed.insert(Filter::Collector);
            }
            let in_range = match range {
                Some(policy) => range_filter(&record, policy) == RangeDecision::Keep,
                None => true,
            };
            if in_range {
                record.passed.insert(Filter::Range);
            }
            if moving.kept() {
                record.passed.insert(Filter::MovingMoney);
            }
            out.push(record);
        }
    }
    out.sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then(a.output_ref.cmp(&b.output_ref)));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FilterCombo {
    /// Collector + Range.
    #[serde(rename = "1+2")]
    CollectorRange,
    /// Collector + Range + Moving-Money.
    #[serde(rename = "1+2+3")]
    All,
}

impl FilterCombo {
    pub const BOTH: [FilterCombo; 2] = [FilterCombo::CollectorRange, FilterCombo::All];

    pub fn required(self) -> FilterSet {
        let base = FilterSet::default().with(Filter::Collector).with(Filter::Range);
        match self {
            FilterCombo::CollectorRange => base,
            FilterCombo::All => base.with(Filter::MovingMoney),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            FilterCombo::CollectorRange => "1+2",
            FilterCombo::All => "1+2+3",
        }
    }
}

impl FromStr for FilterCombo {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "1+2" => Ok(FilterCombo::CollectorRange),
            "1+2+3" => Ok(FilterCombo::All),
            other => Err(format!("unknown filter combination {other:?}")),
        }
    }
}

impl fmt::Display for FilterCombo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MonthlyRevenue {
    /// `YYYY-MM`, UTC.
    pub month: String,
    pub payments: usize,
    pub usd: Decimal,
    pub sat: u64,
    pub cumulative_usd: Decimal,
    pub cumulative_sat: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComponentRevenue {
    pub component: usize,
    pub payments: usize,
    pub usd: Decimal,
    pub sat: u64,
    pub usd_share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RevenueReport {
    pub combo: FilterCombo,
    pub payments: usize,
    pub usd: Decimal,
    pub sat: u64,
    /// Contiguous calendar months from the first to the last payment.
    pub monthly: Vec<MonthlyRevenue>,
    pub by_component: Vec<ComponentRevenue>,
}

fn month_start(ts: DateTime<Utc>) -> NaiveDate {
    NaiveDate::from_ymd_opt(ts.year(), ts.month(), 1).expect("valid month")
}

fn next_month(d: NaiveDate) -> NaiveDate {
    if d.month() == 12 {
        NaiveDate::from_ymd_opt(d.year() + 1, 1, 1)
    } else {
        NaiveDate::from_ymd_opt(d.year(), d.month() + 1, 1)
    }
    .expect("valid month")
}

/// Totals and monthly series over the payments passing `combo`.
/// `components` maps receiving addresses to linkage components when a
/// per-component split is wanted.
pub fn revenue_report(
    payments: &[PaymentRecord],
    combo: FilterCombo,
    components: Option<&HashMap<String, usize>>,
) -> RevenueReport {
    let kept: Vec<&PaymentRecord> = payments.iter().filter(|p| p.passes(combo)).collect();
    let usd: Decimal = kept.iter().filter_map(|p| p.value_usd).sum();
    let sat: u64 = kept.iter().map(|p| p.value_sat).sum();

    let mut by_month: BTreeMap<NaiveDate, (usize, Decimal, u64)> = BTreeMap::new();
    for p in &kept {
        let e = by_month.entry(month_start(p.timestamp)).or_default();
        e.0 += 1;
        e.1 += p.value_usd.unwrap_or_default();
        e.2 += p.value_sat;
    }
    let mut monthly = Vec::new();
    if let (Some(&first), Some(&last)) = (by_month.keys().next(), by_month.keys().next_back()) {
        let (mut cum_usd, mut cum_sat) = (Decimal::ZERO, 0u64);
        let mut m = first;
        while m <= last {
            let (n, u, s) = by_month.get(&m).copied().unwrap_or_default();
            cum_usd += u;
            cum_sat += s;
            monthly.push(MonthlyRevenue {
                month: m.format("%Y-%m").to_string(),
                payments: n,
                usd: u,
                sat: s,
                cumulative_usd: cum_usd,
                cumulative_sat: cum_sat,
            });
            m = next_month(m);
        }
    }

    let mut by_component = Vec::new();
    if let Some(map) = components {
        let mut acc: BTreeMap<usize, (usize, Decimal, u64)> = BTreeMap::new();
        for p in &kept {
            if let Some(&c) = map.get(&p.receiving_address) {
                let e = acc.entry(c).or_default();
                e.0 += 1;
                e.1 += p.value_usd.unwrap_or_default();
                e.2 += p.value_sat;
            }
        }
        by_component = acc
            .into_iter()
            .map(|(component, (n, u, s))| ComponentRevenue {
                component,
                payments: n,
                usd: u,
                sat: s,
                usd_share: if usd.is_zero() {
                    0.0
                } else {
                    (u / usd).try_into().unwrap_or(0.0)
                },
            })
            .collect();
    }

    RevenueReport {
        combo,
        payments: kept.len(),
        usd,
        sat,
        monthly,
        by_component,
    }
}

pub const REVENUE_TABLE_HEADER: [&str; 4] = ["filters", "payments", "revenue_usd", "revenue_btc"];

/// One row per filter combination.
pub fn write_revenue_table<W: Write>(w: W, reports: &[RevenueReport]) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(REVENUE_TABLE_HEADER)?;
    for r in reports {
        out.write_record([
            r.combo.label().to_string(),
            r.payments.to_string(),
            format_usd(r.usd),
            format_btc(r.sat),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_monthly<W: Write>(w: W, reports: &[RevenueReport]) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "filters",
        "month",
        "payments",
        "revenue_usd",
        "revenue_btc",
        "cumulative_usd",
        "cumulative_btc",
    ])?;
    for r in reports {
        for m in &r.monthly {
            out.write_record([
                r.combo.label().to_string(),
                m.month.clone(),
                m.payments.to_string(),
                format_usd(m.usd),
                format_btc(m.sat),
                format_usd(m.cumulative_usd),
                format_btc(m.cumulative_sat),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct PaymentRow {
    tx_id: String,
    output_index: u32,
    address: String,
    timestamp: DateTime<Utc>,
    value_sat: u64,
    value_usd: String,
    filters_passed: String,
}

/// CSV `tx_id,output_index,address,timestamp,value_sat,value_usd,filters_passed`.
/// USD values are written exactly; a missing price leaves the cell empty.
pub fn write_payments<W: Write>(w: W, payments: &[PaymentRecord]) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    for p in payments {
        out.serialize(PaymentRow {
            tx_id: p.output_ref.tx_id.clone(),
            output_index: p.output_ref.index,
            address: p.receiving_address.clone(),
            timestamp: p.timestamp,
            value_sat: p.value_sat,
            value_usd: p.value_usd.map(|d| d.normalize().to_string()).unwrap_or_default(),
            filters_passed: p.passed.to_string(),
        })?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_payments<R: Read>(r: R) -> Result<Vec<PaymentRecord>, FilterError> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize().enumerate() {
        let row: PaymentRow = row?;
        let bad = |message: String| FilterError::Schema { row: i + 1, message };
        let value_usd = if row.value_usd.is_empty() {
            None
        } else {
            Some(Decimal::from_str(&row.value_usd).map_err(|e| bad(e.to_string()))?)
        };
        out.push(PaymentRecord {
            output_ref: OutputRef::new(row.tx_id, row.output_index),
            receiving_address: row.address,
            timestamp: row.timestamp,
            value_sat: row.value_sat,
            value_usd,
            passed: row.filters_passed.parse().map_err(bad)?,
        });
    }
    Ok(out)
}
