//! Stage orchestration. Every stage reads the configured inputs plus the
//! files earlier stages left in the output directory, so each one can run
//! on its own.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::Utc;
use rust_decimal::Decimal;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::chainstore::{format_btc, format_usd, ChainStore, IngestOptions, PriceSeries};
use crate::clustering::{
    cluster_report, expand_seeds, multi_input_cluster, read_cluster_membership, write_cluster_report,
    AttributionTags, Clustering, ClusteringOptions, ExpansionOptions, SeedSet,
};
use crate::config::{GroupBy, PipelineConfig, RangeScope};
use crate::corpus::{
    bucket_emails, bucket_quality, extract_datapoints, label_buckets, read_buckets, read_corpus, read_datapoints,
    read_labels, write_buckets, write_datapoints, write_membership, Bucket, BucketLabel, BucketParams,
    ExtractedDatapoints, ExtractionRules, FiatRates, SecretKind,
};
use crate::filters::{
    collect_payments, read_payments, revenue_report, write_monthly, write_payments, write_revenue_table,
    FilterCombo, PaymentRecord, RangePolicy, RansomAmountSet,
};
use crate::flows::{
    cashout_candidates, depth_cluster_table, holding_histogram_svg, holding_periods, tagged_received, trace_flows,
    write_depth_table, write_flow_nodes, write_holding_histogram, TraceOptions,
};
use crate::linkage::{build_linkage, component_of_address, components, write_components, write_dot, write_edges, LinkageNode};
use crate::plot::{line_chart, Axes, Series};
use crate::stats::{breach_match, group_amounts, group_summary_svg, screen_and_compare, write_group_summary, write_tests, NormalityOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Bucket,
    Extract,
    Cluster,
    Filter,
    Trace,
    Stats,
    Linkage,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Bucket,
        Stage::Extract,
        Stage::Cluster,
        Stage::Filter,
        Stage::Trace,
        Stage::Stats,
        Stage::Linkage,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Bucket => "bucket",
            Stage::Extract => "extract",
            Stage::Cluster => "cluster",
            Stage::Filter => "filter",
            Stage::Trace => "trace",
            Stage::Stats => "stats",
            Stage::Linkage => "linkage",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Internal,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Config => 2,
            ErrorClass::Data => 3,
            ErrorClass::Internal => 4,
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{}{message}", stage.map(|s| format!("stage {s}: ")).unwrap_or_default())]
pub struct PipelineError {
    pub stage: Option<Stage>,
    pub class: ErrorClass,
    pub message: String,
}

impl PipelineError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            stage: None,
            class: ErrorClass::Config,
            message: message.into(),
        }
    }

    fn at(stage: Stage, class: ErrorClass, message: impl fmt::Display) -> Self {
        Self {
            stage: Some(stage),
            class,
            message: message.to_string(),
        }
    }
}

type Result<T> = std::result::Result<T, PipelineError>;

/// Sub-seed for one consumer of randomness.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("eight bytes"))
}

struct Ctx<'a> {
    cfg: &'a PipelineConfig,
    out: &'a Path,
    stage: Stage,
}

impl Ctx<'_> {
    fn data(&self, e: impl fmt::Display) -> PipelineError {
        PipelineError::at(self.stage, ErrorClass::Data, e)
    }

    fn config(&self, e: impl fmt::Display) -> PipelineError {
        PipelineError::at(self.stage, ErrorClass::Config, e)
    }

    fn internal(&self, e: impl fmt::Display) -> PipelineError {
        PipelineError::at(self.stage, ErrorClass::Internal, e)
    }

    /// A configured input file.
    fn input(&self, field: &str, p: &Path) -> Result<BufReader<File>> {
        let path = self.cfg.resolve(p);
        File::open(&path)
            .map(BufReader::new)
            .map_err(|e| self.config(format!("input {field} ({}) not readable: {e}", path.display())))
    }

    /// A file written by an earlier stage.
    fn prior(&self, name: &str, producer: Stage) -> Result<BufReader<File>> {
        File::open(self.out.join(name))
            .map(BufReader::new)
            .map_err(|_| self.config(format!("missing {name}; run the {producer} stage first")))
    }

    fn create(&self, name: &str) -> Result<BufWriter<File>> {
        File::create(self.out.join(name))
            .map(BufWriter::new)
            .map_err(|e| self.internal(format!("writing {name}: {e}")))
    }

    fn write_str(&self, name: &str, text: &str) -> Result<()> {
        std::fs::write(self.out.join(name), text).map_err(|e| self.internal(format!("writing {name}: {e}")))
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| self.internal(e))?;
        text.push('\n');
        self.write_str(name, &text)
    }

    fn read_json(&self, name: &str, producer: Stage) -> Result<Value> {
        serde_json::from_reader(self.prior(name, producer)?).map_err(|e| self.data(format!("{name}: {e}")))
    }
}

fn emails(ctx: &Ctx<'_>) -> Result<Vec<crate::corpus::Email>> {
    read_corpus(ctx.input("paths.corpus", &ctx.cfg.paths.corpus)?).map_err(|e| ctx.data(format!("corpus: {e}")))
}

fn ledger(ctx: &Ctx<'_>) -> Result<ChainStore> {
    let opts = IngestOptions {
        check_fees: ctx.cfg.ledger.check_fees,
        require_resolved: ctx.cfg.ledger.require_resolved,
        cutoff: None,
    };
    ChainStore::ingest(ctx.input("paths.ledger", &ctx.cfg.paths.ledger)?, &opts)
        .map_err(|e| ctx.data(format!("ledger: {e}")))
}

fn prices(ctx: &Ctx<'_>, required: bool) -> Result<Option<PriceSeries>> {
    match &ctx.cfg.paths.prices {
        Some(p) => PriceSeries::read_csv(ctx.input("paths.prices", p)?)
            .map(Some)
            .map_err(|e| ctx.data(format!("prices: {e}"))),
        None if required => Err(ctx.config("input paths.prices is required when filter.range_enabled is set")),
        None => Ok(None),
    }
}

fn tags(ctx: &Ctx<'_>) -> Result<AttributionTags> {
    match &ctx.cfg.paths.tags {
        Some(p) => AttributionTags::read_csv(ctx.input("paths.tags", p)?).map_err(|e| ctx.data(format!("tags: {e}"))),
        None => Ok(AttributionTags::default()),
    }
}

fn buckets(ctx: &Ctx<'_>) -> Result<Vec<Bucket>> {
    read_buckets(ctx.prior("buckets.jsonl", Stage::Bucket)?, ctx.prior("bucket_membership.csv", Stage::Bucket)?)
        .map_err(|e| ctx.data(format!("bucket outputs: {e}")))
}

fn bucket_labels(ctx: &Ctx<'_>) -> Result<Vec<BucketLabel>> {
    let mut rdr = csv::Reader::from_reader(ctx.prior("bucket_labels.csv", Stage::Bucket)?);
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| ctx.data(format!("bucket_labels.csv: {e}")))?;
        let bucket_id = row[0].parse().map_err(|e| ctx.data(format!("bucket_labels.csv: {e}")))?;
        out.push(BucketLabel {
            bucket_id,
            sextortion: &row[1] == "true",
            campaign: row[2].to_string(),
        });
    }
    Ok(out)
}

fn datapoints(ctx: &Ctx<'_>) -> Result<Vec<ExtractedDatapoints>> {
    read_datapoints(ctx.prior("datapoints.jsonl", Stage::Extract)?).map_err(|e| ctx.data(format!("datapoints: {e}")))
}

fn expanded(ctx: &Ctx<'_>) -> Result<BTreeSet<String>> {
    let mut out = BTreeSet::new();
    for line in ctx.prior("expanded_addresses.txt", Stage::Cluster)?.lines() {
        let line = line.map_err(|e| ctx.data(e))?;
        if !line.trim().is_empty() {
            out.insert(line.trim().to_string());
        }
    }
    Ok(out)
}

fn payments(ctx: &Ctx<'_>) -> Result<Vec<PaymentRecord>> {
    read_payments(ctx.prior("payments.csv", Stage::Filter)?).map_err(|e| ctx.data(format!("payments.csv: {e}")))
}

/// Email id → campaign, for sextortion emails only.
fn campaign_of_email(buckets: &[Bucket], labels: &[BucketLabel]) -> BTreeMap<String, String> {
    let by_bucket: HashMap<usize, &BucketLabel> = labels.iter().map(|l| (l.bucket_id, l)).collect();
    let mut out = BTreeMap::new();
    for b in buckets {
        if let Some(l) = by_bucket.get(&b.id).filter(|l| l.sextortion) {
            for m in &b.member_ids {
                out.insert(m.clone(), l.campaign.clone());
            }
        }
    }
    out
}

fn clustering(ctx: &Ctx<'_>, store: &ChainStore, with_prices: Option<&PriceSeries>) -> Result<Clustering> {
    let opts = ClusteringOptions {
        exclude_coinjoin: ctx.cfg.cluster.exclude_coinjoin,
        ..Default::default()
    };
    let mut c = multi_input_cluster(store, &opts);
    if let Some(p) = with_prices {
        c.attach_usd(store, p).map_err(|e| ctx.data(e))?;
    }
    c.attach_tags(&tags(ctx)?);
    Ok(c)
}

fn stage_bucket(ctx: &Ctx<'_>) -> Result<Value> {
    let emails = emails(ctx)?;
    let params = BucketParams {
        suffix_len: ctx.cfg.bucket.suffix_len,
        threshold: ctx.cfg.bucket.threshold,
    };
    let bucketing = bucket_emails(&emails, params).map_err(|e| ctx.config(e))?;
    write_buckets(ctx.create("buckets.jsonl")?, &bucketing.buckets).map_err(|e| ctx.internal(e))?;
    write_membership(ctx.create("bucket_membership.csv")?, &bucketing.buckets).map_err(|e| ctx.internal(e))?;

    let qseed = derive_seed(ctx.cfg.seed, "bucket-quality");
    let mut q = csv::Writer::from_writer(ctx.create("bucket_quality.csv")?);
    q.write_record(["bucket_id", "members", "mean_jaccard", "variance", "pairs"])
        .map_err(|e| ctx.internal(e))?;
    let mut weighted = 0.0;
    for b in &bucketing.buckets {
        let members = bucketing.member_suffixes(b);
        let bq = bucket_quality(&members, ctx.cfg.bucket.quality_sample, qseed.wrapping_add(b.id as u64));
        weighted += bq.mean * b.len() as f64;
        q.write_record([
            b.id.to_string(),
            b.len().to_string(),
            format!("{:.6}", bq.mean),
            format!("{:.6}", bq.variance),
            bq.pairs.to_string(),
        ])
        .map_err(|e| ctx.internal(e))?;
    }
    q.flush().map_err(|e| ctx.internal(e))?;

    let labels = match &ctx.cfg.paths.labels {
        Some(p) => read_labels(ctx.input("paths.labels", p)?).map_err(|e| ctx.data(format!("labels: {e}")))?,
        None => Vec::new(),
    };
    let resolved = label_buckets(&bucketing.buckets, &labels);
    let mut w = csv::Writer::from_writer(ctx.create("bucket_labels.csv")?);
    w.write_record(["bucket_id", "sextortion", "campaign"]).map_err(|e| ctx.internal(e))?;
    for l in &resolved {
        w.write_record([l.bucket_id.to_string(), l.sextortion.to_string(), l.campaign.clone()])
            .map_err(|e| ctx.internal(e))?;
    }
    w.flush().map_err(|e| ctx.internal(e))?;

    let campaigns = crate::corpus::group_campaigns(&bucketing.buckets, &resolved);
    Ok(json!({
        "emails": emails.len(),
        "exact_buckets": bucketing.exact_bucket_count,
        "buckets": bucketing.buckets.len(),
        "sextortion_buckets": resolved.iter().filter(|l| l.sextortion).count(),
        "campaigns": campaigns.len(),
        "mean_jaccard": if emails.is_empty() { 1.0 } else { weighted / emails.len() as f64 },
    }))
}

fn stage_extract(ctx: &Ctx<'_>) -> Result<Value> {
    let emails = emails(ctx)?;
    let rates = match &ctx.cfg.paths.rates {
        Some(p) => FiatRates::read_csv(ctx.input("paths.rates", p)?).map_err(|e| ctx.data(format!("rates: {e}")))?,
        None => FiatRates::default(),
    };
    let sextortion = campaign_of_email(&buckets(ctx)?, &bucket_labels(ctx)?);
    let rules = ExtractionRules::default();
    let points: Vec<ExtractedDatapoints> = emails
        .iter()
        .filter(|e| sextortion.contains_key(&e.id))
        .map(|e| extract_datapoints(e, &rates, &rules))
        .collect();
    write_datapoints(ctx.create("datapoints.jsonl")?, &points).map_err(|e| ctx.internal(e))?;
    let seeds: BTreeSet<&str> = points.iter().flat_map(|p| p.payment_addresses.iter().map(String::as_str)).collect();
    let mut w = ctx.create("seed_addresses.txt")?;
    for s in &seeds {
        writeln!(w, "{s}").map_err(|e| ctx.internal(e))?;
    }
    w.flush().map_err(|e| ctx.internal(e))?;
    Ok(json!({
        "emails": points.len(),
        "with_address": points.iter().filter(|p| !p.payment_addresses.is_empty()).count(),
        "with_amount": points.iter().filter(|p| p.amount.is_some()).count(),
        "with_amount_usd": points.iter().filter(|p| p.amount_usd.is_some()).count(),
        "with_secret": points.iter().filter(|p| p.password_or_phone.is_some()).count(),
        "seed_addresses": seeds.len(),
    }))
}

fn stage_cluster(ctx: &Ctx<'_>) -> Result<Value> {
    let store = ledger(ctx)?;
    let points = datapoints(ctx)?;
    let prices = prices(ctx, false)?;
    let mut clustering = clustering(ctx, &store, prices.as_ref())?;
    let seeds = SeedSet::new(points.iter().flat_map(|p| p.payment_addresses.iter().cloned()), &store);
    clustering.mark_seeds(&seeds);
    let expansion = expand_seeds(
        &seeds,
        &clustering,
        &ExpansionOptions {
            supercluster_limit: ctx.cfg.cluster.supercluster_limit,
            exclude_tagged: ctx.cfg.cluster.exclude_tagged,
        },
    );
    clustering.write_membership(ctx.create("clusters.csv")?).map_err(|e| ctx.internal(e))?;
    let rows = cluster_report(&clustering, &expansion, &seeds);
    write_cluster_report(ctx.create("cluster_stats.csv")?, &rows).map_err(|e| ctx.internal(e))?;
    let mut w = ctx.create("expanded_addresses.txt")?;
    for a in &expansion.addresses {
        writeln!(w, "{a}").map_err(|e| ctx.internal(e))?;
    }
    w.flush().map_err(|e| ctx.internal(e))?;
    Ok(json!({
        "transactions": store.len(),
        "clusters": clustering.clusters().len(),
        "coinjoins_excluded": clustering.coinjoins_excluded,
        "seed_addresses": seeds.all.len(),
        "funded_seeds": seeds.funded.len(),
        "unclustered_seeds": expansion.unclustered_seeds,
        "clustered_seeds": expansion.clustered_seeds,
        "clusters_touched": expansion.clusters_touched,
        "excluded_clusters": expansion.excluded_clusters,
        "expanded_addresses": expansion.addresses.len(),
    }))
}

fn range_policy(ctx: &Ctx<'_>, amounts: Vec<(Option<String>, Decimal)>, addresses: &[(String, String)]) -> Result<Option<RangePolicy>> {
    if !ctx.cfg.filter.range_enabled {
        return Ok(None);
    }
    let p = ctx.cfg.filter.tolerance;
    let fixed = &ctx.cfg.filter.ransom_amounts;
    let global_amounts: Vec<Decimal> = if fixed.is_empty() {
        amounts.iter().map(|a| a.1).collect()
    } else {
        fixed.clone()
    };
    if global_amounts.is_empty() {
        return Ok(None);
    }
    let global = RansomAmountSet::new(global_amounts, p).map_err(|e| ctx.config(e))?;
    if ctx.cfg.filter.range_scope == RangeScope::Global || !fixed.is_empty() {
        return Ok(Some(RangePolicy::Global(global)));
    }
    let mut by_campaign: BTreeMap<String, Vec<Decimal>> = BTreeMap::new();
    for (c, a) in amounts {
        if let Some(c) = c {
            by_campaign.entry(c).or_default().push(a);
        }
    }
    let names: Vec<String> = by_campaign.keys().cloned().collect();
    let mut campaigns = Vec::new();
    for v in by_campaign.into_values() {
        campaigns.push(RansomAmountSet::new(v, p).map_err(|e| ctx.config(e))?);
    }
    let mut by_address: HashMap<String, Vec<usize>> = HashMap::new();
    for (addr, campaign) in addresses {
        if let Ok(i) = names.binary_search(campaign) {
            let e = by_address.entry(addr.clone()).or_default();
            if !e.contains(&i) {
                e.push(i);
            }
        }
    }
    Ok(Some(RangePolicy::PerCampaign {
        global,
        campaigns,
        by_address,
    }))
}

fn stage_filter(ctx: &Ctx<'_>) -> Result<Value> {
    let store = ledger(ctx)?;
    let prices = prices(ctx, ctx.cfg.filter.range_enabled)?.unwrap_or_default();
    let expanded = expanded(ctx)?;
    let points = datapoints(ctx)?;
    let campaign_of = campaign_of_email(&buckets(ctx)?, &bucket_labels(ctx)?);

    let amounts: Vec<(Option<String>, Decimal)> = points
        .iter()
        .filter_map(|p| p.amount_usd.map(|a| (campaign_of.get(&p.email_id).cloned(), a)))
        .collect();
    // receiving address → campaign, through seeds and their clusters
    let mut address_campaign: Vec<(String, String)> = Vec::new();
    if ctx.cfg.filter.range_scope == RangeScope::PerCampaign {
        let membership = read_cluster_membership(ctx.prior("clusters.csv", Stage::Cluster)?).map_err(|e| ctx.data(e))?;
        let mut members: BTreeMap<usize, Vec<&String>> = BTreeMap::new();
        for (a, c) in &membership {
            members.entry(*c).or_default().push(a);
        }
        for p in &points {
            let Some(camp) = campaign_of.get(&p.email_id) else { continue };
            for seed in &p.payment_addresses {
                address_campaign.push((seed.clone(), camp.clone()));
                if let Some(c) = membership.get(seed) {
                    for m in members.get(c).into_iter().flatten().filter(|m| expanded.contains(**m)) {
                        address_campaign.push(((*m).clone(), camp.clone()));
                    }
                }
            }
        }
    }
    let policy = range_policy(ctx, amounts, &address_campaign)?;
    let mut records = collect_payments(&store, &expanded, &prices, policy.as_ref());
    if ctx.cfg.filter.range_enabled && policy.is_none() {
        // no ransom amounts at all: nothing can be inside the window
        for r in &mut records {
            r.passed = r.passed.iter().filter(|f| *f != crate::filters::Filter::Range).fold(Default::default(), |s, f| s.with(f));
        }
    }
    write_payments(ctx.create("payments.csv")?, &records).map_err(|e| ctx.internal(e))?;
    let reports: Vec<_> = FilterCombo::BOTH.iter().map(|&c| revenue_report(&records, c, None)).collect();
    write_revenue_table(ctx.create("revenue.csv")?, &reports).map_err(|e| ctx.internal(e))?;
    write_monthly(ctx.create("revenue_monthly.csv")?, &reports).map_err(|e| ctx.internal(e))?;
    let series: Vec<Series> = reports
        .iter()
        .map(|r| Series {
            name: format!("filters {}", r.combo.label()),
            points: r
                .monthly
                .iter()
                .enumerate()
                .map(|(i, m)| (i as f64, m.cumulative_usd.try_into().unwrap_or(0.0)))
                .collect(),
        })
        .collect();
    ctx.write_str(
        "revenue_cumulative.svg",
        &line_chart(&Axes::new("Cumulative revenue", "month index", "USD"), &series),
    )?;
    let window = policy.as_ref().map(|p| match p {
        RangePolicy::Global(s) | RangePolicy::PerCampaign { global: s, .. } => s.window(),
    });
    Ok(json!({
        "records": records.len(),
        "missing_price": records.iter().filter(|r| r.missing_price()).count(),
        "window_usd": window.map(|(lo, hi)| [lo.normalize().to_string(), hi.normalize().to_string()]),
        "combos": reports.iter().map(|r| json!({
            "filters": r.combo.label(),
            "payments": r.payments,
            "revenue_usd": format_usd(r.usd),
            "revenue_btc": format_btc(r.sat),
        })).collect::<Vec<_>>(),
    }))
}

fn stage_trace(ctx: &Ctx<'_>) -> Result<Value> {
    let store = ledger(ctx)?;
    let prices = prices(ctx, false)?;
    let clustering = clustering(ctx, &store, prices.as_ref())?;
    let tags = tags(ctx)?;
    let exclude = expanded(ctx)?;
    let combo = ctx.cfg.flows.combo;
    let kept: Vec<PaymentRecord> = payments(ctx)?.into_iter().filter(|p| p.passes(combo)).collect();
    let revenue_sat: u64 = kept.iter().map(|p| p.value_sat).sum();

    let (periods, holding) = holding_periods(&kept, &store);
    write_holding_histogram(ctx.create("holding.csv")?, &holding).map_err(|e| ctx.internal(e))?;
    ctx.write_str("holding.svg", &holding_histogram_svg(&holding))?;
    let mut w = csv::Writer::from_writer(ctx.create("holding_periods.csv")?);
    w.write_record(["tx_id", "output_index", "received_at", "spent_at", "duration_hours", "value_sat"])
        .map_err(|e| ctx.internal(e))?;
    for p in &periods {
        w.write_record([
            p.payment.tx_id.clone(),
            p.payment.index.to_string(),
            p.received_at.to_rfc3339(),
            p.spent_at.map(|s| s.to_rfc3339()).unwrap_or_default(),
            p.duration_hours.map(|d| format!("{d:.4}")).unwrap_or_default(),
            p.amount_sat.to_string(),
        ])
        .map_err(|e| ctx.internal(e))?;
    }
    w.flush().map_err(|e| ctx.internal(e))?;

    let opts = TraceOptions {
        max_depth: ctx.cfg.flows.max_depth,
        width_limit: ctx.cfg.flows.width_limit,
    };
    let traversal = trace_flows(&kept, &store, &tags, &clustering, &opts);
    write_flow_nodes(ctx.create("flow_nodes.csv")?, &traversal).map_err(|e| ctx.internal(e))?;
    let depth = ctx.cfg.flows.report_depth;
    let rows = depth_cluster_table(&traversal, &clustering, depth, &exclude);
    write_depth_table(ctx.create(&format!("depth_{depth}_clusters.csv"))?, &rows).map_err(|e| ctx.internal(e))?;
    let tagged = tagged_received(&traversal, ctx.cfg.flows.tagged_within, revenue_sat);
    let cashout = cashout_candidates(&traversal, &clustering, depth, ctx.cfg.flows.cutoff, revenue_sat, &exclude);
    Ok(json!({
        "combo": combo.label(),
        "roots": traversal.roots.len(),
        "revenue_sat": revenue_sat,
        "holding": holding,
        "levels": traversal.levels.iter().map(|l| json!({
            "depth": l.depth,
            "nodes": l.nodes.len(),
            "traced_sat": l.traced_sat(),
        })).collect::<Vec<_>>(),
        "width_halt": traversal.width_halt,
        "tagged_within": ctx.cfg.flows.tagged_within,
        "tagged": tagged,
        "cashout_cutoff": ctx.cfg.flows.cutoff.to_string(),
        "cashout": cashout,
    }))
}

fn stage_stats(ctx: &Ctx<'_>) -> Result<Value> {
    let points = datapoints(ctx)?;
    let key_of: BTreeMap<String, String> = match ctx.cfg.stats.group_by {
        GroupBy::Language => emails(ctx)?
            .into_iter()
            .map(|e| (e.id, e.language.unwrap_or_else(|| "unknown".into())))
            .collect(),
        GroupBy::Campaign => campaign_of_email(&buckets(ctx)?, &bucket_labels(ctx)?),
    };
    let items = points.iter().filter_map(|p| {
        let usd: f64 = p.amount_usd?.try_into().ok()?;
        Some((key_of.get(&p.email_id).cloned().unwrap_or_else(|| "unknown".into()), usd))
    });
    let groups = group_amounts(items);
    let opts = NormalityOptions {
        resamples: ctx.cfg.stats.resamples,
        sample_size: ctx.cfg.stats.sample_size,
        alpha: ctx.cfg.stats.alpha,
    };
    let analysis = screen_and_compare(&groups, &opts, ctx.cfg.stats.alpha, derive_seed(ctx.cfg.seed, "normality"));
    write_group_summary(ctx.create("group_summary.csv")?, &analysis.summary).map_err(|e| ctx.internal(e))?;
    write_tests(ctx.create("welch_tests.csv")?, &analysis.tests).map_err(|e| ctx.internal(e))?;
    ctx.write_str("group_summary.svg", &group_summary_svg(&analysis.summary))?;
    let mut w = csv::Writer::from_writer(ctx.create("normality.csv")?);
    w.write_record(["group", "passed", "statistic", "critical", "note"]).map_err(|e| ctx.internal(e))?;
    for (g, outcome) in &analysis.screened {
        let rec = match outcome {
            Ok(o) => [
                g.clone(),
                o.passed.to_string(),
                o.statistic.map(|s| format!("{s:.6}")).unwrap_or_default(),
                format!("{:.6}", o.critical),
                o.reason.clone().unwrap_or_default(),
            ],
            Err(e) => [g.clone(), "false".into(), String::new(), String::new(), e.clone()],
        };
        w.write_record(rec).map_err(|e| ctx.internal(e))?;
    }
    w.flush().map_err(|e| ctx.internal(e))?;

    let mut summary = json!({
        "groups": groups.len(),
        "screened_in": analysis.screened.iter().filter(|(_, o)| matches!(o, Ok(o) if o.passed)).count(),
        "tests": analysis.tests.len(),
        "rejections": analysis.tests.iter().filter(|t| t.reject).count(),
        "alpha": analysis.alpha,
    });
    if !ctx.cfg.paths.breach_lists.is_empty() {
        let lists: Vec<PathBuf> = ctx.cfg.paths.breach_lists.iter().map(|p| ctx.cfg.resolve(p)).collect();
        for p in &lists {
            if !p.is_file() {
                return Err(ctx.config(format!("input paths.breach_lists ({}) not readable", p.display())));
            }
        }
        let refs: Vec<&Path> = lists.iter().map(PathBuf::as_path).collect();
        let passwords = points
            .iter()
            .filter(|p| p.secret_kind == Some(SecretKind::Password))
            .filter_map(|p| p.password_or_phone.as_deref());
        let m = breach_match(passwords, &refs, ctx.cfg.stats.breach_fraction, derive_seed(ctx.cfg.seed, "breach"))
            .map_err(|e| ctx.data(e))?;
        ctx.write_json("breach.json", &m)?;
        summary["breach"] = serde_json::to_value(&m).map_err(|e| ctx.internal(e))?;
    }
    Ok(summary)
}

fn stage_linkage(ctx: &Ctx<'_>) -> Result<Value> {
    let buckets = buckets(ctx)?;
    let labels = bucket_labels(ctx)?;
    let points = datapoints(ctx)?;
    let membership = read_cluster_membership(ctx.prior("clusters.csv", Stage::Cluster)?).map_err(|e| ctx.data(e))?;
    let cluster_summary = ctx.read_json("cluster_summary.json", Stage::Cluster)?;
    let excluded: BTreeSet<usize> = cluster_summary["excluded_clusters"]
        .as_array()
        .map(|a| a.iter().filter_map(|v| v.as_u64()).map(|v| v as usize).collect())
        .unwrap_or_default();
    let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
    for c in membership.values() {
        *sizes.entry(*c).or_default() += 1;
    }

    let addr_of: HashMap<&str, &Vec<String>> =
        points.iter().map(|p| (p.email_id.as_str(), &p.payment_addresses)).collect();
    let label_of: HashMap<usize, &BucketLabel> = labels.iter().map(|l| (l.bucket_id, l)).collect();
    let nodes: Vec<LinkageNode> = buckets
        .iter()
        .filter_map(|b| {
            let l = label_of.get(&b.id).filter(|l| l.sextortion)?;
            Some(LinkageNode {
                bucket_id: b.id,
                campaign: l.campaign.clone(),
                email_count: b.len(),
                addresses: b
                    .member_ids
                    .iter()
                    .filter_map(|m| addr_of.get(m.as_str()))
                    .flat_map(|v| v.iter().cloned())
                    .collect(),
            })
        })
        .collect();
    let seeds: BTreeSet<&String> = nodes.iter().flat_map(|n| n.addresses.iter()).collect();
    let cluster_map: HashMap<String, usize> = seeds
        .iter()
        .filter_map(|s| membership.get(*s).map(|c| ((*s).clone(), *c)))
        .filter(|(_, c)| sizes.get(c).copied().unwrap_or(0) > 1 && !excluded.contains(c))
        .collect();
    let graph = build_linkage(nodes, &cluster_map);
    let comps = components(&graph);
    write_edges(ctx.create("linkage_edges.csv")?, &graph).map_err(|e| ctx.internal(e))?;
    write_components(ctx.create("linkage_components.csv")?, &comps).map_err(|e| ctx.internal(e))?;
    let mut dot = ctx.create("linkage.dot")?;
    write_dot(&mut dot, &graph).map_err(|e| ctx.internal(e))?;
    dot.flush().map_err(|e| ctx.internal(e))?;

    // receiving addresses inherit the component of the seeds in their cluster
    let mut component_of = component_of_address(&graph, &comps);
    let mut cluster_component: BTreeMap<usize, usize> = BTreeMap::new();
    for (a, &k) in &component_of {
        if let Some(&c) = cluster_map.get(a) {
            cluster_component.entry(c).or_insert(k);
        }
    }
    for (a, c) in &membership {
        if let Some(&k) = cluster_component.get(c) {
            component_of.entry(a.clone()).or_insert(k);
        }
    }
    let combo = ctx.cfg.flows.combo;
    let report = revenue_report(&payments(ctx)?, combo, Some(&component_of));
    let mut w = csv::Writer::from_writer(ctx.create("revenue_by_component.csv")?);
    w.write_record(["component", "payments", "revenue_usd", "revenue_btc", "usd_share"])
        .map_err(|e| ctx.internal(e))?;
    for c in &report.by_component {
        w.write_record([
            c.component.to_string(),
            c.payments.to_string(),
            format_usd(c.usd),
            format_btc(c.sat),
            format!("{:.6}", c.usd_share),
        ])
        .map_err(|e| ctx.internal(e))?;
    }
    w.flush().map_err(|e| ctx.internal(e))?;
    Ok(json!({
        "nodes": graph.nodes.len(),
        "edges": graph.edges.len(),
        "multi_bucket_clusters": graph.multi_bucket_clusters,
        "component_sizes": comps.iter().map(|c| c.node_count()).collect::<Vec<_>>(),
        "largest_email_share": comps.first().map(|c| c.email_share),
        "largest_address_share": comps.first().map(|c| c.address_share),
        "combo": combo.label(),
        "largest_revenue_share": report.by_component.iter().find(|c| c.component == 0).map(|c| c.usd_share),
    }))
}

fn stage_report(ctx: &Ctx<'_>) -> Result<Value> {
    let mut out = serde_json::Map::new();
    for (key, stage) in [
        ("bucketing", Stage::Bucket),
        ("extraction", Stage::Extract),
        ("clustering", Stage::Cluster),
        ("filters", Stage::Filter),
        ("flows", Stage::Trace),
        ("stats", Stage::Stats),
        ("linkage", Stage::Linkage),
    ] {
        out.insert(key.into(), ctx.read_json(&summary_name(stage), stage)?);
    }
    let v = Value::Object(out);
    ctx.write_json("summary.json", &v)?;
    Ok(json!({ "stages": 7 }))
}

fn summary_name(stage: Stage) -> String {
    format!("{}_summary.json", stage.name())
}

/// Runs one stage against `out`, writing its files and `<stage>_summary.json`.
pub fn run_stage(stage: Stage, cfg: &PipelineConfig, out: &Path) -> Result<Value> {
    std::fs::create_dir_all(out)
        .map_err(|e| PipelineError::at(stage, ErrorClass::Config, format!("output dir {}: {e}", out.display())))?;
    let ctx = Ctx { cfg, out, stage };
    let summary = match stage {
        Stage::Bucket => stage_bucket(&ctx),
        Stage::Extract => stage_extract(&ctx),
        Stage::Cluster => stage_cluster(&ctx),
        Stage::Filter => stage_filter(&ctx),
        Stage::Trace => stage_trace(&ctx),
        Stage::Stats => stage_stats(&ctx),
        Stage::Linkage => stage_linkage(&ctx),
        Stage::Report => stage_report(&ctx),
    }?;
    if stage != Stage::Report {
        ctx.write_json(&summary_name(stage), &summary)?;
    }
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ManifestEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

/// Every file under `dir` except the manifest itself, sorted by path.
pub fn build_manifest(dir: &Path) -> std::io::Result<Vec<ManifestEntry>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<ManifestEntry>) -> std::io::Result<()> {
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
                continue;
            }
            let rel = path.strip_prefix(root).expect("under root").to_string_lossy().replace('\\', "/");
            if rel == MANIFEST {
                continue;
            }
            let bytes = std::fs::read(&path)?;
            out.push(ManifestEntry {
                path: rel,
                bytes: bytes.len() as u64,
                sha256: Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect(),
            });
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    out.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(out)
}

pub const MANIFEST: &str = "manifest.json";
pub const FAILED_MARKER: &str = "FAILED";

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub manifest: Vec<ManifestEntry>,
}

/// A fresh `run-<UTC timestamp>` directory under `root`.
pub fn timestamped_dir(root: &Path) -> std::io::Result<PathBuf> {
    std::fs::create_dir_all(root)?;
    let stamp = Utc::now().format("run-%Y%m%dT%H%M%SZ").to_string();
    let mut dir = root.join(&stamp);
    let mut n = 1;
    while dir.exists() {
        n += 1;
        dir = root.join(format!("{stamp}-{n}"));
    }
    std::fs::create_dir(&dir)?;
    Ok(dir)
}

/// All stages in order into `dir`. On failure the partial outputs stay and
/// a `FAILED` marker names the stage.
pub fn run_in(cfg: &PipelineConfig, dir: &Path) -> Result<RunOutcome> {
    cfg.validate().map_err(|e| PipelineError::config(e.to_string()))?;
    for stage in Stage::ALL {
        if let Err(e) = run_stage(stage, cfg, dir) {
            let _ = std::fs::write(
                dir.join(FAILED_MARKER),
                format!("stage: {stage}\nerror: {}\n", e.message),
            );
            return Err(e);
        }
    }
    let manifest = build_manifest(dir).map_err(|e| PipelineError::at(Stage::Report, ErrorClass::Internal, e))?;
    let mut text = serde_json::to_string_pretty(&json!({ "files": manifest }))
        .map_err(|e| PipelineError::at(Stage::Report, ErrorClass::Internal, e))?;
    text.push('\n');
    std::fs::write(dir.join(MANIFEST), text).map_err(|e| PipelineError::at(Stage::Report, ErrorClass::Internal, e))?;
    Ok(RunOutcome {
        dir: dir.to_path_buf(),
        manifest,
    })
}

/// [`run_in`] a new timestamped directory under `out_root`.
pub fn run_pipeline(cfg: &PipelineConfig, out_root: &Path) -> Result<RunOutcome> {
    cfg.validate().map_err(|e| PipelineError::config(e.to_string()))?;
    let dir = timestamped_dir(out_root)
        .map_err(|e| PipelineError::config(format!("output dir {}: {e}", out_root.display())))?;
    run_in(cfg, &dir)
}
