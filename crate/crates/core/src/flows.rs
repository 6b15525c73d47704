//! Holding periods of victim payments and forward flow tracing.
//!
//! Taint follows spends breadth-first. Each spending transaction hands a
//! tainted input's amount to its outputs in proportion to output value
//! over total input value, rounded down to whole satoshis, so fees and
//! rounding only ever shrink the traced amount.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use chrono::{DateTime, NaiveDate, Utc};
use rust_decimal::Decimal;
use serde::Serialize;

use crate::chainstore::{format_btc, format_usd, ChainStore, OutputRef};
use crate::clustering::{AttributionTags, Clustering};
use crate::filters::PaymentRecord;

pub const HOLDING_BIN_HOURS: u64 = 10;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HoldingPeriod {
    pub payment: OutputRef,
    pub received_at: DateTime<Utc>,
    pub spent_at: Option<DateTime<Utc>>,
    /// Hours; `None` while unspent.
    pub duration_hours: Option<f64>,
    pub amount_sat: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HoldingSummary {
    pub spent: usize,
    pub unspent: usize,
    /// Spends recorded before the receipt; excluded from the statistics.
    pub inconsistent: usize,
    pub mean_days: Option<f64>,
    pub median_days: Option<f64>,
    /// `(bin_start_hours, satoshis)`, contiguous from 0.
    pub histogram: Vec<(u64, u64)>,
}

/// Per-UTXO holding periods: from the payment's block time to the time of
/// the transaction spending that exact output.
pub fn holding_periods(payments: &[PaymentRecord], store: &ChainStore) -> (Vec<HoldingPeriod>, HoldingSummary) {
    let mut periods = Vec::with_capacity(payments.len());
    let mut inconsistent = 0;
    for p in payments {
        let spent_at = store.spender_of(&p.output_ref).map(|(tx, _)| tx.timestamp);
        let duration_hours = spent_at.map(|s| (s - p.timestamp).num_seconds() as f64 / 3600.0);
        if duration_hours.is_some_and(|d| d < 0.0) {
            inconsistent += 1;
        }
        periods.push(HoldingPeriod {
            payment: p.output_ref.clone(),
            received_at: p.timestamp,
            spent_at,
            duration_hours,
            amount_sat: p.value_sat,
        });
    }

    let valid: Vec<&HoldingPeriod> = periods
        .iter()
        .filter(|h| h.duration_hours.is_some_and(|d| d >= 0.0))
        .collect();
    let mut hours: Vec<f64> = valid.iter().filter_map(|h| h.duration_hours).collect();
    hours.sort_by(f64::total_cmp);
    let mean_days = (!hours.is_empty()).then(|| hours.iter().sum::<f64>() / hours.len() as f64 / 24.0);
    let median_days = (!hours.is_empty()).then(|| {
        let n = hours.len();
        let m = if n % 2 == 1 {
            hours[n / 2]
        } else {
            (hours[n / 2 - 1] + hours[n / 2]) / 2.0
        };
        m / 24.0
    });

    let mut bins: BTreeMap<u64, u64> = BTreeMap::new();
    for h in &valid {
        let d = h.duration_hours.unwrap_or(0.0);
        let bin = (d / HOLDING_BIN_HOURS as f64).floor() as u64;
        *bins.entry(bin).or_default() += h.amount_sat;
    }
    let histogram = match bins.keys().next_back() {
        Some(&last) => (0..=last)
            .map(|b| (b * HOLDING_BIN_HOURS, bins.get(&b).copied().unwrap_or(0)))
            .collect(),
        None => Vec::new(),
    };

    let summary = HoldingSummary {
        spent: valid.len(),
        unspent: periods.iter().filter(|h| h.spent_at.is_none()).count(),
        inconsistent,
        mean_days,
        median_days,
        histogram,
    };
    (periods, summary)
}

/// CSV `bin_start_hours,btc_amount`.
pub fn write_holding_histogram<W: Write>(w: W, summary: &HoldingSummary) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["bin_start_hours", "btc_amount"])?;
    for &(start, sat) in &summary.histogram {
        out.write_record([start.to_string(), format_btc(sat)])?;
    }
    out.flush()?;
    Ok(())
}

pub fn holding_histogram_svg(summary: &HoldingSummary) -> String {
    let bars: Vec<(f64, f64, f64)> = summary
        .histogram
        .iter()
        .map(|&(start, sat)| (start as f64, HOLDING_BIN_HOURS as f64, sat as f64 / 1e8))
        .collect();
    crate::plot::bar_chart(
        &crate::plot::Axes::new("Holding period of victim payments", "hours until spent", "BTC"),
        &bars,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    TaggedEntity,
    WidthLimit,
    DepthLimit,
    Unspent,
}

impl StopReason {
    pub fn name(self) -> &'static str {
        match self {
            StopReason::TaggedEntity => "tagged_entity",
            StopReason::WidthLimit => "width_limit",
            StopReason::DepthLimit => "depth_limit",
            StopReason::Unspent => "unspent",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FlowNode {
    pub address: String,
    pub cluster_id: Option<usize>,
    pub traced_sat: u64,
    /// Tainted outputs held by this address at this depth.
    pub outputs: Vec<(OutputRef, u64)>,
    pub stop: Option<StopReason>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FlowLevel {
    pub depth: usize,
    /// Sorted by address.
    pub nodes: Vec<FlowNode>,
}

impl FlowLevel {
    pub fn traced_sat(&self) -> u64 {
        self.nodes.iter().map(|n| n.traced_sat).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TraceOptions {
    pub max_depth: usize,
    /// A level with more nodes than this is recorded but not expanded.
    pub width_limit: usize,
}

impl Default for TraceOptions {
    fn default() -> Self {
        Self {
            max_depth: 3,
            width_limit: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FlowTraversal {
    pub roots: Vec<OutputRef>,
    /// `levels[d]` is depth `d`; depth 0 holds the receiving addresses.
    pub levels: Vec<FlowLevel>,
    /// Depth whose width triggered the halt, if any.
    pub width_halt: Option<usize>,
}

impl FlowTraversal {
    pub fn level(&self, depth: usize) -> Option<&FlowLevel> {
        self.levels.get(depth)
    }
}

fn is_tagged(address: &str, tags: &AttributionTags, clustering: &Clustering) -> bool {
    tags.tag_of(address).is_some() || clustering.cluster_of(address).is_some_and(|c| c.tag.is_some())
}

fn make_level(
    depth: usize,
    tainted: BTreeMap<OutputRef, (String, u64)>,
    clustering: &Clustering,
) -> FlowLevel {
    let mut by_addr: BTreeMap<String, Vec<(OutputRef, u64)>> = BTreeMap::new();
    for (r, (addr, sat)) in tainted {
        if sat > 0 {
            by_addr.entry(addr).or_default().push((r, sat));
        }
    }
    let nodes = by_addr
        .into_iter()
        .map(|(address, outputs)| FlowNode {
            cluster_id: clustering.cluster_id_of(&address),
            traced_sat: outputs.iter().map(|o| o.1).sum(),
            address,
            outputs,
            stop: None,
        })
        .collect();
    FlowLevel { depth, nodes }
}

/// Breadth-first forward trace from the payment outputs.
pub fn trace_flows(
    payments: &[PaymentRecord],
    store: &ChainStore,
    tags: &AttributionTags,
    clustering: &Clustering,
    opts: &TraceOptions,
) -> FlowTraversal {
    let mut roots: Vec<OutputRef> = payments.iter().map(|p| p.output_ref.clone()).collect();
    roots.sort();
    roots.dedup();
    let start: BTreeMap<OutputRef, (String, u64)> = payments
        .iter()
        .map(|p| (p.output_ref.clone(), (p.receiving_address.clone(), p.value_sat)))
        .collect();

    let mut levels = vec![make_level(0, start, clustering)];
    let mut width_halt = None;
    loop {
        let depth = levels.len() - 1;
        let level = levels.last_mut().expect("at least one level");
        if level.nodes.len() > opts.width_limit {
            for n in &mut level.nodes {
                n.stop = Some(StopReason::WidthLimit);
            }
            width_halt = Some(depth);
            break;
        }
        let mut next: BTreeMap<OutputRef, (String, u64)> = BTreeMap::new();
        for node in &mut level.nodes {
            if is_tagged(&node.address, tags, clustering) {
                node.stop = Some(StopReason::TaggedEntity);
                continue;
            }
            let mut any_spent = false;
            for (r, taint) in &node.outputs {
                let Some((tx, _)) = store.spender_of(r) else {
                    continue;
                };
                any_spent = true;
                if depth >= opts.max_depth {
                    continue;
                }
                let total_in = tx.input_sum() as u128;
                if total_in == 0 {
                    continue;
                }
                for o in &tx.outputs {
                    let share = (*taint as u128 * o.value_sat as u128 / total_in) as u64;
                    let e = next
                        .entry(tx.output_ref(o.index))
                        .or_insert_with(|| (o.address.clone(), 0));
                    e.1 += share;
                }
            }
            if !any_spent {
                node.stop = Some(StopReason::Unspent);
            } else if depth >= opts.max_depth {
                node.stop = Some(StopReason::DepthLimit);
            }
        }
        if depth >= opts.max_depth || next.values().all(|v| v.1 == 0) {
            break;
        }
        levels.push(make_level(depth + 1, next, clustering));
    }

    FlowTraversal {
        roots,
        levels,
        width_halt,
    }
}

/// One row of a per-depth cluster table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DepthClusterRow {
    pub cluster_id: usize,
    pub total_spent_usd: Option<Decimal>,
    pub first_tx: DateTime<Utc>,
    pub txs_out: usize,
    pub btc_received_sat: u64,
}

/// Untagged clusters at `depth`, by traced BTC received (descending).
/// Addresses in `exclude` (the sextortion set) are left out.
pub fn depth_cluster_table(
    traversal: &FlowTraversal,
    clustering: &Clustering,
    depth: usize,
    exclude: &BTreeSet<String>,
) -> Vec<DepthClusterRow> {
    let Some(level) = traversal.level(depth) else {
        return Vec::new();
    };
    let mut received: BTreeMap<usize, u64> = BTreeMap::new();
    for n in level.nodes.iter().filter(|n| !exclude.contains(&n.address)) {
        if let Some(c) = n.cluster_id {
            *received.entry(c).or_default() += n.traced_sat;
        }
    }
    let mut rows: Vec<DepthClusterRow> = received
        .into_iter()
        .filter_map(|(c, sat)| {
            let cluster = clustering.get(c)?;
            cluster.tag.is_none().then_some(DepthClusterRow {
                cluster_id: c,
                total_spent_usd: cluster.spent_usd,
                first_tx: cluster.first_tx,
                txs_out: cluster.txs_out,
                btc_received_sat: sat,
            })
        })
        .collect();
    rows.sort_by(|a, b| b.btc_received_sat.cmp(&a.btc_received_sat).then(a.cluster_id.cmp(&b.cluster_id)));
    rows
}

pub const DEPTH_TABLE_HEADER: [&str; 5] = ["cluster_id", "total_spent_usd", "first_tx", "txs_out", "btc_received"];

pub fn write_depth_table<W: Write>(w: W, rows: &[DepthClusterRow]) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(DEPTH_TABLE_HEADER)?;
    for r in rows {
        out.write_record([
            r.cluster_id.to_string(),
            r.total_spent_usd.map(format_usd).unwrap_or_default(),
            r.first_tx.format("%Y-%m-%d").to_string(),
            r.txs_out.to_string(),
            format_btc(r.btc_received_sat),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Every traced node with its stop reason.
pub fn write_flow_nodes<W: Write>(w: W, traversal: &FlowTraversal) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["depth", "address", "cluster_id", "btc_traced", "stop"])?;
    for level in &traversal.levels {
        for n in &level.nodes {
            out.write_record([
                level.depth.to_string(),
                n.address.clone(),
                n.cluster_id.map(|c| c.to_string()).unwrap_or_default(),
                format_btc(n.traced_sat),
                n.stop.map(StopReason::name).unwrap_or_default().to_string(),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlowShare {
    pub sat: u64,
    /// Relative to the revenue denominator; 0 when that is 0.
    pub fraction: f64,
}

fn share(sat: u64, revenue_sat: u64) -> FlowShare {
    FlowShare {
        sat,
        fraction: if revenue_sat == 0 {
            0.0
        } else {
            sat as f64 / revenue_sat as f64
        },
    }
}

/// Traced BTC reaching tagged entities at depths `1..=within`.
pub fn tagged_received(traversal: &FlowTraversal, within: usize, revenue_sat: u64) -> FlowShare {
    let sat = traversal
        .levels
        .iter()
        .skip(1)
        .take(within)
        .flat_map(|l| l.nodes.iter())
        .filter(|n| n.stop == Some(StopReason::TaggedEntity))
        .map(|n| n.traced_sat)
        .sum();
    share(sat, revenue_sat)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CashoutSummary {
    pub share: FlowShare,
    pub clusters: Vec<usize>,
}

/// Traced BTC at `depth` entering untagged clusters already active before
/// `cutoff`, skipping addresses in `exclude`.
pub fn cashout_candidates(
    traversal: &FlowTraversal,
    clustering: &Clustering,
    depth: usize,
    cutoff: NaiveDate,
    revenue_sat: u64,
    exclude: &BTreeSet<String>,
) -> CashoutSummary {
    let rows = depth_cluster_table(traversal, clustering, depth, exclude);
    let old: Vec<&DepthClusterRow> = rows.iter().filter(|r| r.first_tx.date_naive() < cutoff).collect();
    let mut clusters: Vec<usize> = old.iter().map(|r| r.cluster_id).collect();
    clusters.sort_unstable();
    CashoutSummary {
        share: share(old.iter().map(|r| r.btc_received_sat).sum(), revenue_sat),
        clusters,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chainstore::{IngestOptions, Transaction, TxInput, TxOutput};
    use crate::clustering::{multi_input_cluster, ClusteringOptions};
    use crate::filters::FilterSet;
    use chrono::{Duration, TimeZone};

    fn t0() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2018, 9, 1, 0, 0, 0).unwrap()
    }

    struct Builder {
        txs: Vec<Transaction>,
    }

    impl Builder {
        fn new() -> Self {
            Self { txs: Vec::new() }
        }

        fn coinbase(&mut self, id: &str, hours: i64, outputs: &[(&str, u64)]) {
            self.tx(id, hours, &[], outputs);
        }

        fn tx(&mut self, id: &str, hours: i64, inputs: &[(&str, u32)], outputs: &[(&str, u64)]) {
            let inputs = inputs
                .iter()
                .map(|(prev, idx)| {
                    let o = &self.txs.iter().find(|t| t.tx_id == *prev).unwrap().outputs[*idx as usize];
                    TxInput {
                        address: o.address.clone(),
                        value_sat: o.value_sat,
                        spends: OutputRef::new(*prev, *idx),
                    }
                })
                .collect();
            self.txs.push(Transaction {
                tx_id: id.into(),
                timestamp: t0() + Duration::hours(hours),
                inputs,
                outputs: outputs
                    .iter()
                    .enumerate()
                    .map(|(i, (a, v))| TxOutput {
                        index: i as u32,
                        address: a.to_string(),
                        value_sat: *v,
                    })
                    .collect(),
            });
        }

        fn store(self) -> ChainStore {
            ChainStore::from_transactions(self.txs, &IngestOptions::default()).unwrap()
        }
    }

    fn payment(store: &ChainStore, tx: &str, idx: u32) -> PaymentRecord {
        let t = store.tx(tx).unwrap();
        let o = &t.outputs[idx as usize];
        PaymentRecord {
            output_ref: OutputRef::new(tx, idx),
            receiving_address: o.address.clone(),
            timestamp: t.timestamp,
            value_sat: o.value_sat,
            value_usd: None,
            passed: FilterSet::default(),
        }
    }

    #[test]
    fn holding_arithmetic() {
        let mut b = Builder::new();
        b.coinbase("cb", 0, &[("S", 100), ("S", 200), ("S", 300), ("S", 400)]);
        b.tx("s1", 10, &[("cb", 0)], &[("X", 100)]);
        b.tx("s2", 20, &[("cb", 1)], &[("X", 200)]);
        b.tx("s3", 30, &[("cb", 2)], &[("X", 300)]);
        let store = b.store();
        let payments: Vec<_> = (0..4).map(|i| payment(&store, "cb", i)).collect();
        let (periods, s) = holding_periods(&payments, &store);
        assert_eq!(periods[3].duration_hours, None);
        assert_eq!((s.spent, s.unspent), (3, 1));
        assert!((s.mean_days.unwrap() * 24.0 - 20.0).abs() < 1e-12);
        assert!((s.median_days.unwrap() * 24.0 - 20.0).abs() < 1e-12);
        assert_eq!(s.histogram, vec![(0, 0), (10, 100), (20, 200), (30, 300)]);
        let spent_total: u64 = s.histogram.iter().map(|b| b.1).sum();
        assert_eq!(spent_total, 600);

        let mut csv = Vec::new();
        write_holding_histogram(&mut csv, &s).unwrap();
        assert!(String::from_utf8(csv).unwrap().starts_with("bin_start_hours,btc_amount\n0,0.00000000\n10,0.00000100\n"));
        assert!(holding_histogram_svg(&s).contains("<rect x="));
    }

    #[test]
    fn same_timestamp_spend_is_zero() {
        let mut b = Builder::new();
        b.coinbase("cb", 0, &[("S", 100)]);
        b.tx("s", 0, &[("cb", 0)], &[("X", 100)]);
        let store = b.store();
        let (p, s) = holding_periods(&[payment(&store, "cb", 0)], &store);
        assert_eq!(p[0].duration_hours, Some(0.0));
        assert_eq!(s.histogram, vec![(0, 100)]);
    }

    fn no_tags() -> AttributionTags {
        AttributionTags::default()
    }

    #[test]
    fn single_output_carries_everything() {
        let mut b = Builder::new();
        b.coinbase("cb", 0, &[("S", 1_000)]);
        b.tx("s", 1, &[("cb", 0)], &[("X", 1_000)]);
        let store = b.store();
        let cl = multi_input_cluster(&store, &ClusteringOptions::default());
        let t = trace_flows(&[payment(&store, "cb", 0)], &store, &no_tags(), &cl, &TraceOptions::default());
        assert_eq!(t.levels[1].nodes[0].address, "X");
        assert_eq!(t.levels[1].nodes[0].traced_sat, 1_000);
        assert_eq!(t.levels[1].nodes[0].stop, Some(StopReason::Unspent));
    }

    #[test]
    fn three_level_fanout_conserves() {
        let mut b = Builder::new();
        b.coinbase("cb", 0, &[("S", 10_000)]);
        // 60/40 split with no fee
        b.tx("h1", 1, &[("cb", 0)], &[("A", 6_000), ("B", 4_000)]);
        // A splits 1/3 : 2/3 after a 300 sat fee
        b.tx("h2", 2, &[("h1", 0)], &[("C", 1_900), ("D", 3_800)]);
        // B mixes with an untainted 4_000 input
        b.coinbase("cb2", 0, &[("Z", 4_000)]);
        b.tx("h3", 3, &[("h1", 1), ("cb2", 0)], &[("E", 8_000)]);
        let store = b.store();
        let cl = multi_input_cluster(&store, &ClusteringOptions::default());
        let t = trace_flows(&[payment(&store, "cb", 0)], &store, &no_tags(), &cl, &TraceOptions::default());
        let at = |d: usize, a: &str| t.levels[d].nodes.iter().find(|n| n.address == a).unwrap().traced_sat;
        assert_eq!(at(1, "A"), 6_000);
        assert_eq!(at(1, "B"), 4_000);
        assert_eq!(at(2, "C"), 6_000 * 1_900 / 6_000);
        assert_eq!(at(2, "D"), 6_000 * 3_800 / 6_000);
        assert_eq!(at(2, "E"), 4_000 * 8_000 / 8_000);
        for w in t.levels.windows(2) {
            assert!(w[1].traced_sat() <= w[0].traced_sat());
        }
        assert_eq!(t.levels[2].traced_sat(), 1_900 + 3_800 + 4_000);
    }

    #[test]
    fn stops_at_tags_and_depth() {
        let mut b = Builder::new();
        b.coinbase("cb", 0, &[("S", 1_000)]);
        b.tx("h1", 1, &[("cb", 0)], &[("EX", 500), ("Y", 500)]);
        b.tx("h2", 2, &[("h1", 0)], &[("EX2", 500)]);
        b.tx("h3", 2, &[("h1", 1)], &[("W", 500)]);
        b.tx("h4", 3, &[("h3", 0)], &[("V", 500)]);
        let store = b.store();
        let mut tags = AttributionTags::default();
        tags.insert("EX", "exchange", "test");
        let mut cl = multi_input_cluster(&store, &ClusteringOptions::default());
        cl.attach_tags(&tags);
        let opts = TraceOptions {
            max_depth: 2,
            width_limit: 100,
        };
        let t = trace_flows(&[payment(&store, "cb", 0)], &store, &tags, &cl, &opts);
        assert_eq!(t.levels.len(), 3);
        let ex = t.levels[1].nodes.iter().find(|n| n.address == "EX").unwrap();
        assert_eq!(ex.stop, Some(StopReason::TaggedEntity));
        // nothing from EX shows up later
        assert!(t.levels[2].nodes.iter().all(|n| n.address != "EX2"));
        assert_eq!(t.levels[2].nodes[0].address, "W");
        assert_eq!(t.levels[2].nodes[0].stop, Some(StopReason::DepthLimit));
        assert_eq!(tagged_received(&t, 2, 1_000).sat, 500);
        assert_eq!(tagged_received(&t, 2, 1_000).fraction, 0.5);
    }

    #[test]
    fn width_limit_halts_level() {
        let mut b = Builder::new();
        b.coinbase("cb", 0, &[("S", 1_000_000)]);
        let outs: Vec<(String, u64)> = (0..5).map(|i| (format!("F{i}"), 200_000)).collect();
        let outs_ref: Vec<(&str, u64)> = outs.iter().map(|(a, v)| (a.as_str(), *v)).collect();
        b.tx("fan", 1, &[("cb", 0)], &outs_ref);
        b.tx("next", 2, &[("fan", 0)], &[("G", 200_000)]);
        let store = b.store();
        let cl = multi_input_cluster(&store, &ClusteringOptions::default());
        let opts = TraceOptions {
            max_depth: 5,
            width_limit: 4,
        };
        let t = trace_flows(&[payment(&store, "cb", 0)], &store, &no_tags(), &cl, &opts);
        assert_eq!(t.width_halt, Some(1));
        assert_eq!(t.levels.len(), 2);
        assert!(t.levels[1].nodes.iter().all(|n| n.stop == Some(StopReason::WidthLimit)));
    }

    #[test]
    fn depth_table_and_cashout() {
        let mut b = Builder::new();
        b.coinbase("old", -24 * 200, &[("O1", 5)]);
        b.coinbase("cb", 0, &[("S", 10_000)]);
        b.tx("h1", 1, &[("cb", 0)], &[("M", 10_000)]);
        b.tx("h2", 2, &[("h1", 0)], &[("O2", 2_000), ("N", 8_000)]);
        // O1 and O2 co-spend: one cluster first seen long before the cutoff
        b.tx("o", 3, &[("old", 0), ("h2", 0)], &[("Q", 2_005)]);
        let store = b.store();
        let cl = multi_input_cluster(&store, &ClusteringOptions::default());
        let opts = TraceOptions {
            max_depth: 2,
            width_limit: 100,
        };
        let t = trace_flows(&[payment(&store, "cb", 0)], &store, &no_tags(), &cl, &opts);
        let rows = depth_cluster_table(&t, &cl, 2, &BTreeSet::new());
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].btc_received_sat, 8_000);
        let cutoff = NaiveDate::from_ymd_opt(2018, 6, 1).unwrap();
        let c = cashout_candidates(&t, &cl, 2, cutoff, 10_000, &BTreeSet::new());
        assert_eq!(c.share.sat, 2_000);
        assert!((c.share.fraction - 0.2).abs() < 1e-12);
        assert_eq!(c.clusters, vec![cl.cluster_id_of("O1").unwrap()]);

        let none = cashout_candidates(&t, &cl, 2, NaiveDate::from_ymd_opt(2017, 1, 1).unwrap(), 10_000, &BTreeSet::new());
        assert_eq!((none.share.sat, none.share.fraction), (0, 0.0));

        let mut csv = Vec::new();
        write_depth_table(&mut csv, &rows).unwrap();
        assert!(String::from_utf8(csv).unwrap().starts_with("cluster_id,total_spent_usd,first_tx,txs_out,btc_received\n"));
    }
}
