//! Multiple-input address clustering with CoinJoin exclusion, seed
//! expansion and supercluster exclusion.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};

use chrono::{DateTime, Utc};
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};

use crate::chainstore::{format_usd, value_usd, ChainStore, MissingPrice, PriceSeries, Transaction};
use crate::unionfind::DisjointSets;

/// Equal-value-output CoinJoin heuristic.
///
/// A transaction is flagged when its most frequent output value `v` occurs
/// `k >= min_equal_outputs` times, it spends from at least `k` distinct
/// addresses, it has at least `2k - 1` outputs, and `v` is not the largest
/// output value. Ties on frequency pick the smallest value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoinJoinRule {
    pub min_equal_outputs: usize,
    pub require_distinct_inputs: bool,
    pub require_output_count: bool,
    pub require_not_largest: bool,
}

impl Default for CoinJoinRule {
    fn default() -> Self {
        Self {
            min_equal_outputs: 2,
            require_distinct_inputs: true,
            require_output_count: true,
            require_not_largest: true,
        }
    }
}

pub fn detect_coinjoin(tx: &Transaction, rule: &CoinJoinRule) -> bool {
    if tx.outputs.len() < 2 {
        return false;
    }
    let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
    for o in &tx.outputs {
        *counts.entry(o.value_sat).or_default() += 1;
    }
    // BTreeMap iterates ascending, so the first max is the smallest value
    let (value, k) = counts
        .iter()
        .fold((0u64, 0usize), |best, (&v, &c)| if c > best.1 { (v, c) } else { best });
    if k < rule.min_equal_outputs.max(2) {
        return false;
    }
    if rule.require_distinct_inputs {
        let distinct: BTreeSet<&str> = tx.inputs.iter().map(|i| i.address.as_str()).collect();
        if distinct.len() < k {
            return false;
        }
    }
    if rule.require_output_count && tx.outputs.len() < 2 * k - 1 {
        return false;
    }
    if rule.require_not_largest {
        let largest = *counts.keys().next_back().expect("non-empty outputs");
        if value == largest {
            return false;
        }
    }
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusteringOptions {
    pub exclude_coinjoin: bool,
    pub coinjoin: CoinJoinRule,
}

impl Default for ClusteringOptions {
    fn default() -> Self {
        Self {
            exclude_coinjoin: true,
            coinjoin: CoinJoinRule::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AddressCluster {
    /// Rank of the cluster's smallest address among all clusters.
    pub cluster_id: usize,
    pub addresses: BTreeSet<String>,
    pub seed_addresses: BTreeSet<String>,
    pub first_tx: DateTime<Utc>,
    pub received_sat: u64,
    pub received_usd: Option<Decimal>,
    pub spent_sat: u64,
    pub spent_usd: Option<Decimal>,
    /// Transactions spending from at least one member.
    pub txs_out: usize,
    pub tag: Option<String>,
}

impl AddressCluster {
    pub fn len(&self) -> usize {
        self.addresses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.addresses.is_empty()
    }

    pub fn is_singleton(&self) -> bool {
        self.addresses.len() == 1
    }
}

#[derive(Debug, Clone, Default)]
pub struct Clustering {
    clusters: Vec<AddressCluster>,
    index: HashMap<String, usize>,
    pub coinjoins_excluded: usize,
}

/// Union-find over co-spent input addresses of every transaction not
/// flagged as CoinJoin (when excluded). Every ledger address lands in
/// exactly one cluster; statistics come from the full ledger.
pub fn multi_input_cluster(store: &ChainStore, opts: &ClusteringOptions) -> Clustering {
    let addresses = store.addresses();
    let ids: HashMap<&str, usize> = addresses.iter().enumerate().map(|(i, a)| (*a, i)).collect();
    let mut ds = DisjointSets::new(addresses.len());
    let mut coinjoins = 0;
    for tx in store.transactions() {
        if tx.inputs.len() < 2 {
            continue;
        }
        if opts.exclude_coinjoin && detect_coinjoin(tx, &opts.coinjoin) {
            coinjoins += 1;
            continue;
        }
        let first = ids[tx.inputs[0].address.as_str()];
        for input in &tx.inputs[1..] {
            ds.union(first, ids[input.address.as_str()]);
        }
    }

    // groups come ordered by smallest member id, i.e. smallest address
    let groups = ds.groups();
    let mut of_addr = vec![0usize; addresses.len()];
    for (cid, g) in groups.iter().enumerate() {
        for &a in g {
            of_addr[a] = cid;
        }
    }

    let mut first_tx: Vec<Option<DateTime<Utc>>> = vec![None; groups.len()];
    let mut received = vec![0u64; groups.len()];
    let mut spent = vec![0u64; groups.len()];
    let mut txs_out = vec![0usize; groups.len()];
    for tx in store.transactions() {
        let mut touched_out: Vec<usize> = Vec::with_capacity(tx.inputs.len());
        for input in &tx.inputs {
            let c = of_addr[ids[input.address.as_str()]];
            spent[c] += input.value_sat;
            touched_out.push(c);
            first_tx[c] = Some(first_tx[c].map_or(tx.timestamp, |t| t.min(tx.timestamp)));
        }
        touched_out.sort_unstable();
        touched_out.dedup();
        for c in touched_out {
            txs_out[c] += 1;
        }
        for out in &tx.outputs {
            let c = of_addr[ids[out.address.as_str()]];
            received[c] += out.value_sat;
            first_tx[c] = Some(first_tx[c].map_or(tx.timestamp, |t| t.min(tx.timestamp)));
        }
    }

    let clusters: Vec<AddressCluster> = groups
        .iter()
        .enumerate()
        .map(|(cid, g)| AddressCluster {
            cluster_id: cid,
            addresses: g.iter().map(|&a| addresses[a].to_string()).collect(),
            seed_addresses: BTreeSet::new(),
            first_tx: first_tx[cid].expect("every ledger address appears in a transaction"),
            received_sat: received[cid],
            received_usd: None,
            spent_sat: spent[cid],
            spent_usd: None,
            txs_out: txs_out[cid],
            tag: None,
        })
        .collect();
    let index = addresses
        .iter()
        .enumerate()
        .map(|(i, a)| (a.to_string(), of_addr[i]))
        .collect();
    Clustering {
        clusters,
        index,
        coinjoins_excluded: coinjoins,
    }
}

impl Clustering {
    pub fn clusters(&self) -> &[AddressCluster] {
        &self.clusters
    }

    pub fn get(&self, cluster_id: usize) -> Option<&AddressCluster> {
        self.clusters.get(cluster_id)
    }

    pub fn cluster_id_of(&self, address: &str) -> Option<usize> {
        self.index.get(address).copied()
    }

    pub fn cluster_of(&self, address: &str) -> Option<&AddressCluster> {
        self.cluster_id_of(address).map(|c| &self.clusters[c])
    }

    /// Values every incoming output and every spent input at its
    /// transaction date.
    pub fn attach_usd(&mut self, store: &ChainStore, prices: &PriceSeries) -> Result<(), MissingPrice> {
        let mut received = vec![Decimal::ZERO; self.clusters.len()];
        let mut spent = vec![Decimal::ZERO; self.clusters.len()];
        for tx in store.transactions() {
            for input in &tx.inputs {
                let c = self.index[&input.address];
                spent[c] += value_usd(input.value_sat, tx.timestamp, prices)?;
            }
            for out in &tx.outputs {
                let c = self.index[&out.address];
                received[c] += value_usd(out.value_sat, tx.timestamp, prices)?;
            }
        }
        for (c, cluster) in self.clusters.iter_mut().enumerate() {
            cluster.received_usd = Some(received[c]);
            cluster.spent_usd = Some(spent[c]);
        }
        Ok(())
    }

    /// A cluster takes the tag of its smallest tagged address.
    pub fn attach_tags(&mut self, tags: &AttributionTags) {
        for cluster in &mut self.clusters {
            cluster.tag = cluster
                .addresses
                .iter()
                .find_map(|a| tags.tag_of(a).map(str::to_string));
        }
    }

    pub fn mark_seeds(&mut self, seeds: &SeedSet) {
        for cluster in &mut self.clusters {
            cluster.seed_addresses.clear();
        }
        for s in &seeds.all {
            if let Some(&c) = self.index.get(s) {
                self.clusters[c].seed_addresses.insert(s.clone());
            }
        }
    }

    /// Canonical partition: sorted member lists, sorted.
    pub fn partition(&self) -> Vec<Vec<String>> {
        self.clusters
            .iter()
            .map(|c| c.addresses.iter().cloned().collect())
            .collect()
    }

    /// CSV `cluster_id,address`.
    pub fn write_membership<W: Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["cluster_id", "address"])?;
        for c in &self.clusters {
            for a in &c.addresses {
                out.write_record([c.cluster_id.to_string(), a.clone()])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Reads a `cluster_id,address` CSV into an address → cluster map.
pub fn read_cluster_membership<R: Read>(r: R) -> Result<BTreeMap<String, usize>, csv::Error> {
    #[derive(Deserialize)]
    struct Row {
        cluster_id: usize,
        address: String,
    }
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = BTreeMap::new();
    for row in rdr.deserialize() {
        let row: Row = row?;
        out.insert(row.address, row.cluster_id);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tag {
    pub tag: String,
    pub source: String,
}

/// Externally harvested address labels, e.g. exchange names.
#[derive(Debug, Clone, Default)]
pub struct AttributionTags {
    by_address: BTreeMap<String, Tag>,
}

impl AttributionTags {
    pub fn insert(&mut self, address: impl Into<String>, tag: impl Into<String>, source: impl Into<String>) {
        self.by_address.insert(
            address.into(),
            Tag {
                tag: tag.into(),
                source: source.into(),
            },
        );
    }

    pub fn tag_of(&self, address: &str) -> Option<&str> {
        self.by_address.get(address).map(|t| t.tag.as_str())
    }

    pub fn len(&self) -> usize {
        self.by_address.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_address.is_empty()
    }

    /// CSV `address,tag,source`.
    pub fn read_csv<R: Read>(r: R) -> Result<Self, csv::Error> {
        #[derive(Deserialize)]
        struct Row {
            address: String,
            tag: String,
            #[serde(default)]
            source: String,
        }
        let mut rdr = csv::Reader::from_reader(r);
        let mut out = Self::default();
        for row in rdr.deserialize() {
            let row: Row = row?;
            out.insert(row.address, row.tag, row.source);
        }
        Ok(out)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["address", "tag", "source"])?;
        for (a, t) in &self.by_address {
            out.write_record([a, &t.tag, &t.source])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Addresses extracted from spam, and the subset that ever received funds.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SeedSet {
    pub all: BTreeSet<String>,
    pub funded: BTreeSet<String>,
}

impl SeedSet {
    pub fn new(addresses: impl IntoIterator<Item = String>, store: &ChainStore) -> Self {
        let all: BTreeSet<String> = addresses.into_iter().collect();
        let funded = all
            .iter()
            .filter(|a| !store.incoming(a).is_empty())
            .cloned()
            .collect();
        Self { all, funded }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpansionOptions {
    /// Clusters with more addresses than this keep only their seeds.
    pub supercluster_limit: usize,
    /// Tagged clusters (known services) keep only their seeds.
    pub exclude_tagged: bool,
}

impl Default for ExpansionOptions {
    fn default() -> Self {
        Self {
            supercluster_limit: 10_000,
            exclude_tagged: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SeedExpansion {
    pub addresses: BTreeSet<String>,
    /// Funded seeds whose cluster is just themselves.
    pub unclustered_seeds: usize,
    /// Funded seeds inside multi-address clusters.
    pub clustered_seeds: usize,
    /// Multi-address clusters holding a funded seed, excluded ones included.
    pub clusters_touched: Vec<usize>,
    pub excluded_clusters: Vec<usize>,
}

pub fn expand_seeds(seeds: &SeedSet, clustering: &Clustering, opts: &ExpansionOptions) -> SeedExpansion {
    let mut out = SeedExpansion::default();
    let mut touched = BTreeSet::new();
    let mut excluded = BTreeSet::new();
    for seed in &seeds.funded {
        out.addresses.insert(seed.clone());
        let Some(cluster) = clustering.cluster_of(seed) else {
            out.unclustered_seeds += 1;
            continue;
        };
        if cluster.is_singleton() {
            out.unclustered_seeds += 1;
            continue;
        }
        out.clustered_seeds += 1;
        touched.insert(cluster.cluster_id);
        let tagged = opts.exclude_tagged && cluster.tag.is_some();
        if cluster.len() > opts.supercluster_limit || tagged {
            excluded.insert(cluster.cluster_id);
        } else {
            out.addresses.extend(cluster.addresses.iter().cloned());
        }
    }
    out.clusters_touched = touched.into_iter().collect();
    out.excluded_clusters = excluded.into_iter().collect();
    out
}

/// One row of the seed-cluster summary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterRow {
    pub cluster_id: usize,
    pub seed_addresses: usize,
    pub addresses: usize,
    pub amount_received_usd: Option<Decimal>,
    pub first_tx: DateTime<Utc>,
}

/// Clusters touched by funded seeds, by USD received (descending).
pub fn cluster_report(clustering: &Clustering, expansion: &SeedExpansion, seeds: &SeedSet) -> Vec<ClusterRow> {
    let mut rows: Vec<ClusterRow> = expansion
        .clusters_touched
        .iter()
        .filter_map(|&c| clustering.get(c))
        .map(|c| ClusterRow {
            cluster_id: c.cluster_id,
            seed_addresses: c.addresses.iter().filter(|a| seeds.funded.contains(*a)).count(),
            addresses: c.len(),
            amount_received_usd: c.received_usd,
            first_tx: c.first_tx,
        })
        .collect();
    rows.sort_by(|a, b| {
        b.amount_received_usd
            .cmp(&a.amount_received_usd)
            .then(a.cluster_id.cmp(&b.cluster_id))
    });
    rows
}

pub const CLUSTER_REPORT_HEADER: [&str; 5] = [
    "cluster_id",
    "seed_addresses",
    "addresses",
    "amount_received_usd",
    "first_tx",
];

pub fn write_cluster_report<W: Write>(w: W, rows: &[ClusterRow]) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(CLUSTER_REPORT_HEADER)?;
    for r in rows {
        out.write_record([
            r.cluster_id.to_string(),
            r.seed_addresses.to_string(),
            r.addresses.to_string(),
            r.amount_received_usd
                .map(format_usd).unwrap_or_default(),
            r.first_tx.format("%Y-%m-%d").to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}
