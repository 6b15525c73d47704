//! Bucket-linkage graph: buckets joined by shared payment addresses or
//! shared address clusters.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::Write;

use serde::Serialize;

use crate::unionfind::DisjointSets;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    SharedAddress,
    SharedCluster,
}

impl fmt::Display for EdgeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EdgeKind::SharedAddress => "shared_address",
            EdgeKind::SharedCluster => "shared_cluster",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LinkageNode {
    pub bucket_id: usize,
    pub campaign: String,
    pub email_count: usize,
    pub addresses: BTreeSet<String>,
}

/// Unordered pair with `a < b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LinkageEdge {
    pub a: usize,
    pub b: usize,
    pub kind: EdgeKind,
    pub weight: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LinkageGraph {
    /// Sorted by bucket id.
    pub nodes: Vec<LinkageNode>,
    /// Sorted by `(a, b, kind)`.
    pub edges: Vec<LinkageEdge>,
    /// Clusters seen in at least two buckets.
    pub multi_bucket_clusters: usize,
}

fn pair_counts<'a, K: Ord + 'a>(
    sets: impl Iterator<Item = (usize, BTreeSet<K>)>,
) -> BTreeMap<(usize, usize), usize> {
    let mut holders: BTreeMap<K, Vec<usize>> = BTreeMap::new();
    for (node, keys) in sets {
        for k in keys {
            holders.entry(k).or_default().push(node);
        }
    }
    let mut counts = BTreeMap::new();
    for nodes in holders.values() {
        for i in 0..nodes.len() {
            for j in i + 1..nodes.len() {
                let (a, b) = (nodes[i].min(nodes[j]), nodes[i].max(nodes[j]));
                if a != b {
                    *counts.entry((a, b)).or_default() += 1;
                }
            }
        }
    }
    counts
}

/// `clusters` maps clustered addresses to their cluster id; addresses
/// absent from it are treated as unclustered and only produce
/// shared-address edges.
pub fn build_linkage(nodes: Vec<LinkageNode>, clusters: &HashMap<String, usize>) -> LinkageGraph {
    let mut nodes = nodes;
    nodes.sort_by_key(|n| n.bucket_id);
    nodes.dedup_by_key(|n| n.bucket_id);

    let by_addr = pair_counts(nodes.iter().map(|n| (n.bucket_id, n.addresses.clone())));
    let cluster_sets: Vec<(usize, BTreeSet<usize>)> = nodes
        .iter()
        .map(|n| {
            let ids = n.addresses.iter().filter_map(|a| clusters.get(a).copied()).collect();
            (n.bucket_id, ids)
        })
        .collect();
    let mut cluster_holders: BTreeMap<usize, usize> = BTreeMap::new();
    for (_, ids) in &cluster_sets {
        for &c in ids {
            *cluster_holders.entry(c).or_default() += 1;
        }
    }
    let by_cluster = pair_counts(cluster_sets.into_iter());

    let mut edges: Vec<LinkageEdge> = by_addr
        .into_iter()
        .map(|((a, b), weight)| LinkageEdge {
            a,
            b,
            kind: EdgeKind::SharedAddress,
            weight,
        })
        .chain(by_cluster.into_iter().map(|((a, b), weight)| LinkageEdge {
            a,
            b,
            kind: EdgeKind::SharedCluster,
            weight,
        }))
        .collect();
    edges.sort_by_key(|e| (e.a, e.b, e.kind));

    LinkageGraph {
        nodes,
        edges,
        multi_bucket_clusters: cluster_holders.values().filter(|&&n| n >= 2).count(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Component {
    /// Sorted bucket ids.
    pub bucket_ids: Vec<usize>,
    pub email_count: usize,
    pub address_count: usize,
    pub email_share: f64,
    pub address_share: f64,
}

impl Component {
    pub fn node_count(&self) -> usize {
        self.bucket_ids.len()
    }
}

/// Connected components over both edge kinds, largest first (ties by
/// smallest bucket id). Shares are relative to the graph's total email
/// count and its distinct addresses.
pub fn components(graph: &LinkageGraph) -> Vec<Component> {
    let pos: HashMap<usize, usize> = graph
        .nodes
        .iter()
        .enumerate()
        .map(|(i, n)| (n.bucket_id, i))
        .collect();
    let mut dsu = DisjointSets::new(graph.nodes.len());
    for e in &graph.edges {
        if let (Some(&a), Some(&b)) = (pos.get(&e.a), pos.get(&e.b)) {
            dsu.union(a, b);
        }
    }
    let total_emails: usize = graph.nodes.iter().map(|n| n.email_count).sum();
    let total_addresses = graph
        .nodes
        .iter()
        .flat_map(|n| n.addresses.iter())
        .collect::<BTreeSet<_>>()
        .len();
    let share = |x: usize, total: usize| if total == 0 { 0.0 } else { x as f64 / total as f64 };

    let mut out: Vec<Component> = dsu
        .groups()
        .into_iter()
        .map(|members| {
            let email_count = members.iter().map(|&i| graph.nodes[i].email_count).sum();
            let address_count = members
                .iter()
                .flat_map(|&i| graph.nodes[i].addresses.iter())
                .collect::<BTreeSet<_>>()
                .len();
            let mut bucket_ids: Vec<usize> = members.iter().map(|&i| graph.nodes[i].bucket_id).collect();
            bucket_ids.sort_unstable();
            Component {
                bucket_ids,
                email_count,
                address_count,
                email_share: share(email_count, total_emails),
                address_share: share(address_count, total_addresses),
            }
        })
        .collect();
    out.sort_by(|a, b| {
        b.node_count()
            .cmp(&a.node_count())
            .then(a.bucket_ids[0].cmp(&b.bucket_ids[0]))
    });
    out
}

/// Maps every address of a node to the index of its component.
pub fn component_of_address(graph: &LinkageGraph, comps: &[Component]) -> HashMap<String, usize> {
    let node_comp: HashMap<usize, usize> = comps
        .iter()
        .enumerate()
        .flat_map(|(ci, c)| c.bucket_ids.iter().map(move |&b| (b, ci)))
        .collect();
    let mut out = HashMap::new();
    for n in &graph.nodes {
        if let Some(&c) = node_comp.get(&n.bucket_id) {
            for a in &n.addresses {
                out.entry(a.clone()).or_insert(c);
            }
        }
    }
    out
}

/// CSV `bucket_a,bucket_b,kind,weight`.
pub fn write_edges<W: Write>(w: W, graph: &LinkageGraph) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["bucket_a", "bucket_b", "kind", "weight"])?;
    for e in &graph.edges {
        out.write_record([e.a.to_string(), e.b.to_string(), e.kind.to_string(), e.weight.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_components<W: Write>(w: W, comps: &[Component]) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["component", "nodes", "emails", "addresses", "email_share", "address_share", "bucket_ids"])?;
    for (i, c) in comps.iter().enumerate() {
        let ids: Vec<String> = c.bucket_ids.iter().map(|b| b.to_string()).collect();
        out.write_record([
            i.to_string(),
            c.node_count().to_string(),
            c.email_count.to_string(),
            c.address_count.to_string(),
            format!("{:.6}", c.email_share),
            format!("{:.6}", c.address_share),
            ids.join(" "),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Undirected DOT graph; shared-address edges are red, shared-cluster
/// edges black, pen width follows the weight.
pub fn write_dot<W: Write>(mut w: W, graph: &LinkageGraph) -> std::io::Result<()> {
    writeln!(w, "graph linkage {{")?;
    writeln!(w, "  node [shape=circle];")?;
    for n in &graph.nodes {
        let campaign = n.campaign.replace('\\', "\\\\").replace('"', "\\\"");
        writeln!(
            w,
            "  b{} [label=\"{}\", tooltip=\"{} ({} emails)\"];",
            n.bucket_id, n.bucket_id, campaign, n.email_count
        )?;
    }
    for e in &graph.edges {
        let color = match e.kind {
            EdgeKind::SharedAddress => "red",
            EdgeKind::SharedCluster => "black",
        };
        writeln!(
            w,
            "  b{} -- b{} [color={color}, penwidth={}, label=\"{}\"];",
            e.a, e.b, e.weight, e.weight
        )?;
    }
    writeln!(w, "}}")
}
