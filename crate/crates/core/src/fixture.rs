//! Synthetic corpora and ledgers with known ground truth.
//!
//! [`generate_fixture`] plants every situation the pipeline has to handle
//! (template perturbations, shared addresses, victim payments inside and
//! outside the ransom window, collector transfers, single-output sweeps, a
//! CoinJoin, a supercluster, tagged exchanges two hops out and an old
//! cluster) and records the expected outcome of each by construction.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use chrono::{DateTime, Datelike, Duration, NaiveDate, TimeZone, Utc};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::base58::{address_from_hash, P2PKH_VERSION, P2SH_VERSION};
use crate::chainstore::{OutputRef, PriceSeries, Transaction, TxInput, TxOutput};
use crate::clustering::AttributionTags;
use crate::config::{Paths, PipelineConfig};
use crate::corpus::{Currency, Email, EmailLabel, FiatRates};

#[derive(Debug, thiserror::Error)]
pub enum FixtureError {
    #[error("invalid fixture spec: {0}")]
    Spec(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialising: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Other(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureSpec {
    /// Sextortion templates, one campaign each.
    pub campaigns: usize,
    pub emails_per_campaign: usize,
    /// Non-sextortion spam templates.
    pub other_templates: usize,
    pub emails_per_other: usize,
    /// At least 4.
    pub addresses_per_campaign: usize,
    /// The first this-many campaigns advertise one common address.
    pub shared_address_campaigns: usize,
    /// Joins the last two campaigns through one co-spend.
    pub shared_cluster_pair: bool,
    /// Generate ledger, prices and tags; otherwise only the corpus.
    pub ledger: bool,
    /// In-window victim payments per wallet address.
    pub victims_per_address: usize,
    /// Size of the online-wallet cluster hosting one seed.
    pub supercluster_size: usize,
    /// Limit written to the emitted config.
    pub supercluster_limit: usize,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            campaigns: 5,
            emails_per_campaign: 40,
            other_templates: 1,
            emails_per_other: 20,
            addresses_per_campaign: 4,
            shared_address_campaigns: 3,
            shared_cluster_pair: true,
            ledger: true,
            victims_per_address: 2,
            supercluster_size: 250,
            supercluster_limit: 200,
        }
    }
}

impl FixtureSpec {
    /// Corpus only: `templates` sextortion templates of `per_template` emails.
    pub fn bucketing(templates: usize, per_template: usize) -> Self {
        Self {
            campaigns: templates,
            emails_per_campaign: per_template,
            other_templates: 0,
            emails_per_other: 0,
            shared_address_campaigns: 0,
            shared_cluster_pair: false,
            ledger: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), FixtureError> {
        let bad = |m: &str| Err(FixtureError::Spec(m.to_string()));
        if self.campaigns == 0 {
            return bad("need at least one campaign");
        }
        if self.addresses_per_campaign < 4 {
            return bad("addresses_per_campaign must be at least 4");
        }
        if self.emails_per_campaign < 2 {
            return bad("emails_per_campaign must be at least 2");
        }
        if self.shared_address_campaigns > self.campaigns {
            return bad("shared_address_campaigns exceeds campaigns");
        }
        if self.ledger && self.victims_per_address == 0 {
            return bad("victims_per_address must be at least 1");
        }
        if self.ledger && self.supercluster_size <= self.supercluster_limit {
            return bad("supercluster_size must exceed supercluster_limit");
        }
        Ok(())
    }
}

/// Expected classification of one output paid to the expanded set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PaymentKind {
    /// Victim payment with a change output.
    Victim,
    /// Victim payment with a single output.
    Sweep,
    /// Movement between the spammer's own addresses.
    Collector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthPayment {
    pub output: OutputRef,
    pub address: String,
    pub timestamp: DateTime<Utc>,
    pub value_sat: u64,
    pub value_usd: Decimal,
    pub kind: PaymentKind,
    pub in_window: bool,
    pub in_combo_1_2: bool,
    pub in_combo_1_2_3: bool,
    /// Spend time, when spent.
    pub spent_at: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRevenue {
    pub combo: String,
    pub payments: usize,
    pub usd: Decimal,
    pub sat: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthFlowRow {
    /// Smallest address of the receiving cluster.
    pub representative: String,
    pub sat: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub templates: usize,
    /// Email id → template index.
    pub template_of: BTreeMap<String, usize>,
    pub sextortion_templates: Vec<usize>,
    pub ransom_min_usd: Option<Decimal>,
    pub ransom_max_usd: Option<Decimal>,
    pub seeds: BTreeSet<String>,
    pub expanded_addresses: BTreeSet<String>,
    pub payments: Vec<TruthPayment>,
    pub revenue: Vec<TruthRevenue>,
    /// `(output, usd, kept)` for the planted window-boundary payments.
    pub boundary: Vec<(OutputRef, Decimal, bool)>,
    pub coinjoin_tx: Option<String>,
    /// Addresses merged into the spammer cluster if CoinJoins were not excluded.
    pub coinjoin_strangers: Vec<String>,
    pub supercluster_addresses: usize,
    /// Campaign clusters touched by seeds, as sorted address sets.
    pub seed_clusters: Vec<BTreeSet<String>>,
    pub tagged_received_sat: u64,
    pub cashout_sat: u64,
    /// Depth-2 untagged clusters by traced satoshis, descending.
    pub depth2: Vec<TruthFlowRow>,
    /// Linkage component node counts, descending.
    pub linkage_components: Vec<usize>,
    pub breach_candidates: usize,
    pub breach_listed: usize,
}

#[derive(Debug, Clone)]
pub struct Fixture {
    pub spec: FixtureSpec,
    pub emails: Vec<Email>,
    pub labels: Vec<EmailLabel>,
    pub transactions: Vec<Transaction>,
    pub prices: PriceSeries,
    pub rates: FiatRates,
    pub tags: AttributionTags,
    pub breach_words: Vec<String>,
    pub config: PipelineConfig,
    pub truth: GroundTruth,
}

const LANGUAGES: [&str; 20] = [
    "en", "de", "fr", "es", "it", "nl", "pt", "pl", "cs", "sk", "sl", "ja", "no", "sv", "da", "fi", "hu", "ro", "tr",
    "el",
];
const CONSONANTS: &[u8] = b"bcdfghjklmnprstvz";
const VOWELS: &[u8] = b"aeiou";
const HEAD_LEN: usize = 40;
const TAIL_LEN: usize = 60;

fn month_price(d: NaiveDate) -> Decimal {
    // every price divides 1e8 sat/BTC into whole satoshis per cent
    Decimal::from(match (d.year(), d.month()) {
        (y, _) if y < 2018 => 1000,
        (2018, 1..=6) => 8000,
        (2018, 7..=10) => 6250,
        (2018, 11) => 5000,
        (2018, 12) => 4000,
        _ => 3125,
    })
}

fn eur_rate(d: NaiveDate) -> Decimal {
    Decimal::new([116, 115, 117, 114, 113, 114][(d.month() as usize) % 6], 2)
}

/// Satoshis worth exactly `cents` at the close of `at`.
fn sat_for_cents(cents: u64, at: DateTime<Utc>) -> u64 {
    let price: u64 = month_price(at.date_naive()).try_into().expect("integral price");
    cents * (1_000_000 / price)
}

fn cents_usd(cents: u64) -> Decimal {
    Decimal::new(cents as i64, 2)
}

struct Words {
    used: HashSet<String>,
}

impl Words {
    fn fresh(&mut self, rng: &mut ChaCha8Rng) -> String {
        loop {
            let syllables = rng.random_range(2..=4);
            let mut w = String::new();
            for _ in 0..syllables {
                w.push(CONSONANTS[rng.random_range(0..CONSONANTS.len())] as char);
                w.push(VOWELS[rng.random_range(0..VOWELS.len())] as char);
            }
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }
}

struct Template {
    subject: Vec<String>,
    head: Vec<String>,
    alternates: BTreeMap<usize, String>,
    fillers: Vec<String>,
    tail: Vec<String>,
}

fn make_template(words: &mut Words, rng: &mut ChaCha8Rng) -> Template {
    let head: Vec<String> = (0..HEAD_LEN).map(|_| words.fresh(rng)).collect();
    let mut alternates = BTreeMap::new();
    while alternates.len() < 8 {
        let pos = rng.random_range(0..HEAD_LEN);
        alternates.entry(pos).or_insert_with(|| words.fresh(rng));
    }
    Template {
        subject: (0..3).map(|_| words.fresh(rng)).collect(),
        head,
        alternates,
        fillers: (0..4).map(|_| words.fresh(rng)).collect(),
        tail: (0..TAIL_LEN).map(|_| words.fresh(rng)).collect(),
    }
}

struct Slots<'a> {
    amount: Option<&'a str>,
    address: Option<&'a str>,
    password: &'a str,
}

fn render(t: &Template, slots: &Slots<'_>, rng: &mut ChaCha8Rng) -> String {
    let mut head: Vec<String> = t
        .head
        .iter()
        .enumerate()
        .map(|(i, w)| match t.alternates.get(&i) {
            Some(alt) if rng.random_bool(0.5) => alt.clone(),
            _ => w.clone(),
        })
        .collect();
    if rng.random_bool(0.3) {
        let pos = rng.random_range(0..head.len());
        head.insert(pos, t.fillers[rng.random_range(0..t.fillers.len())].clone());
    }
    if rng.random_bool(0.3) {
        head.remove(rng.random_range(0..head.len()));
    }
    for w in head.iter_mut() {
        if rng.random_bool(0.1) {
            w.push([',', '.', '!'][rng.random_range(0..3)]);
        }
    }
    if let Some(first) = head.first_mut() {
        let mut c = first.chars();
        if let Some(f) = c.next() {
            *first = f.to_uppercase().chain(c).collect();
        }
    }

    let mut tail: Vec<String> = Vec::with_capacity(TAIL_LEN + 8);
    tail.extend(t.tail[..24].iter().cloned());
    if let Some(a) = slots.amount {
        tail.push(a.to_string());
    }
    tail.extend(t.tail[24..34].iter().cloned());
    if let Some(addr) = slots.address {
        tail.push("bitcoin".into());
        tail.push("address:".into());
        tail.push(addr.to_string());
    }
    tail.extend(t.tail[34..50].iter().cloned());
    tail.push("password:".into());
    tail.push(slots.password.to_string());
    tail.extend(t.tail[50..].iter().cloned());
    format!("{}\n\n{}", head.join(" "), tail.join(" "))
}

fn format_amount(value: u64, currency: Currency, rng: &mut ChaCha8Rng) -> String {
    let digits = if value >= 1000 {
        match currency {
            Currency::Usd => format!("{},{:03}", value / 1000, value % 1000),
            _ => format!("{}.{:03}", value / 1000, value % 1000),
        }
    } else {
        value.to_string()
    };
    match (currency, rng.random_bool(0.5)) {
        (Currency::Usd, true) => format!("${digits}"),
        (Currency::Usd, false) => format!("{digits} USD"),
        (_, true) => format!("\u{20ac}{digits}"),
        (_, false) => format!("{digits} EUR"),
    }
}

struct Ids {
    seed: u64,
    counter: u64,
    addresses: HashSet<String>,
}

impl Ids {
    fn tx(&mut self) -> String {
        self.counter += 1;
        let mut h = Sha256::new();
        h.update(format!("fixture:{}:{}", self.seed, self.counter));
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn address(&mut self, rng: &mut ChaCha8Rng) -> String {
        loop {
            let mut hash = [0u8; 20];
            rng.fill(&mut hash);
            let version = if rng.random_bool(0.8) { P2PKH_VERSION } else { P2SH_VERSION };
            let a = address_from_hash(version, &hash);
            if self.addresses.insert(a.clone()) {
                return a;
            }
        }
    }
}

/// UTXO bookkeeping while planting transactions.
struct Chain {
    txs: Vec<Transaction>,
    values: BTreeMap<OutputRef, (String, u64)>,
    spent_at: BTreeMap<OutputRef, DateTime<Utc>>,
}

impl Chain {
    fn push(&mut self, tx: Transaction) -> String {
        for i in &tx.inputs {
            self.spent_at.insert(i.spends.clone(), tx.timestamp);
        }
        for o in &tx.outputs {
            self.values
                .insert(tx.output_ref(o.index), (o.address.clone(), o.value_sat));
        }
        let id = tx.tx_id.clone();
        self.txs.push(tx);
        id
    }

    fn input(&self, r: &OutputRef) -> TxInput {
        let (address, value_sat) = self.values[r].clone();
        TxInput {
            address,
            value_sat,
            spends: r.clone(),
        }
    }

    fn make(&mut self, ids: &mut Ids, at: DateTime<Utc>, inputs: &[OutputRef], outputs: &[(String, u64)]) -> String {
        let tx = Transaction {
            tx_id: ids.tx(),
            timestamp: at,
            inputs: inputs.iter().map(|r| self.input(r)).collect(),
            outputs: outputs
                .iter()
                .enumerate()
                .map(|(i, (a, v))| TxOutput {
                    index: i as u32,
                    address: a.clone(),
                    value_sat: *v,
                })
                .collect(),
        };
        self.push(tx)
    }
}

#[derive(Clone)]
struct Planned {
    output: OutputRef,
    address: String,
    at: DateTime<Utc>,
    sat: u64,
    usd: Decimal,
    kind: PaymentKind,
    in_window: bool,
}

const VICTIM_FEE: u64 = 10_000;

#[allow(clippy::too_many_arguments)]
fn victim_pays(
    chain: &mut Chain,
    ids: &mut Ids,
    rng: &mut ChaCha8Rng,
    funding_at: DateTime<Utc>,
    at: DateTime<Utc>,
    to: &str,
    cents: u64,
    sweep: bool,
    in_window: bool,
) -> Planned {
    let sat = sat_for_cents(cents, at);
    let victim = ids.address(rng);
    let change = if sweep { 0 } else { rng.random_range(100_000..5_000_000) };
    let fund = chain.make(ids, funding_at, &[], &[(victim.clone(), sat + change + VICTIM_FEE)]);
    let mut outputs = vec![(to.to_string(), sat)];
    if !sweep {
        outputs.push((victim, change));
    }
    let tx = chain.make(ids, at, &[OutputRef::new(fund, 0)], &outputs);
    Planned {
        output: OutputRef::new(tx, 0),
        address: to.to_string(),
        at,
        sat,
        usd: cents_usd(cents),
        kind: if sweep { PaymentKind::Sweep } else { PaymentKind::Victim },
        in_window,
    }
}

struct Campaign {
    seeds: Vec<String>,
    /// Seeds co-spent by the campaign's consolidation.
    wallet: Vec<String>,
    /// Non-seed member of the campaign cluster.
    hidden: String,
    currency: Currency,
    start: DateTime<Utc>,
}

pub fn generate_fixture(spec: &FixtureSpec, seed: u64) -> Result<Fixture, FixtureError> {
    spec.validate()?;
    let mut crng = ChaCha8Rng::seed_from_u64(seed);
    let mut lrng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1ed6_e700_0000);
    let mut ids = Ids {
        seed,
        counter: 0,
        addresses: HashSet::new(),
    };
    let mut truth = GroundTruth {
        seed,
        ..Default::default()
    };

    // campaigns, their addresses and roles
    let n = spec.campaigns;
    let k_shared = if spec.shared_address_campaigns >= 2 { spec.shared_address_campaigns } else { 0 };
    let shared_addr = (k_shared > 0).then(|| ids.address(&mut lrng));
    let super_campaign = (spec.ledger && n >= 2).then_some(1usize);
    let pair = (spec.shared_cluster_pair && n >= 2 && n - 2 >= k_shared && super_campaign.is_none_or(|s| s < n - 2))
        .then(|| (n - 2, n - 1));

    let base = Utc.with_ymd_and_hms(2018, 7, 2, 0, 0, 0).unwrap();
    let mut campaigns = Vec::with_capacity(n);
    for c in 0..n {
        let mut seeds: Vec<String> = (0..spec.addresses_per_campaign).map(|_| ids.address(&mut lrng)).collect();
        if c < k_shared {
            *seeds.last_mut().expect("at least four") = shared_addr.clone().expect("shared address");
        }
        let wallet: Vec<String> = seeds
            .iter()
            .enumerate()
            .filter(|(i, a)| {
                !(super_campaign == Some(c) && *i == 0) && !(c > 0 && Some(*a) == shared_addr.as_ref())
            })
            .map(|(_, a)| a.clone())
            .collect();
        campaigns.push(Campaign {
            seeds,
            wallet,
            hidden: ids.address(&mut lrng),
            currency: if c % 4 == 1 { Currency::Eur } else { Currency::Usd },
            start: base + Duration::days(5 * c as i64),
        });
    }

    // corpus
    let mut words = Words { used: HashSet::new() };
    let total_templates = n + spec.other_templates;
    let templates: Vec<Template> = (0..total_templates).map(|_| make_template(&mut words, &mut crng)).collect();
    let common_pw = words.fresh(&mut crng);
    let mut drafts: Vec<(usize, Email, bool)> = Vec::new();
    let mut ransom: Vec<Decimal> = Vec::new();
    let mut passwords: Vec<String> = Vec::new();
    for (t, tpl) in templates.iter().enumerate() {
        let sextortion = t < n;
        let count = if sextortion { spec.emails_per_campaign } else { spec.emails_per_other };
        let language = LANGUAGES[t % LANGUAGES.len()];
        let mid = 400 + 60 * (t as u64 % 7);
        for j in 0..count {
            let password = match crng.random_range(0..20) {
                0 | 1 => common_pw.clone(),
                2 => words.fresh(&mut crng)[..3].to_string(),
                _ => format!("{}{}", words.fresh(&mut crng), crng.random_range(10..100)),
            };
            let (amount_text, address) = if sextortion {
                let camp = &campaigns[t];
                let value = match (t, j) {
                    (0, 0) => 200,
                    (0, 1) => 2000,
                    _ => mid - 150 + crng.random_range(0..=150) + crng.random_range(0..=150),
                };
                let usd = match camp.currency {
                    Currency::Usd => Decimal::from(value),
                    _ => Decimal::from(value) * eur_rate(camp.start.date_naive()),
                };
                ransom.push(usd);
                let addr = camp.seeds[j % camp.seeds.len()].clone();
                (Some(format_amount(value, camp.currency, &mut crng)), Some(addr))
            } else {
                (None, None)
            };
            let body = render(
                tpl,
                &Slots {
                    amount: amount_text.as_deref(),
                    address: address.as_deref(),
                    password: &password,
                },
                &mut crng,
            );
            if sextortion {
                passwords.push(password.clone());
            }
            let day = if sextortion { campaigns[t].start } else { base } - Duration::days(crng.random_range(0..10))
                + Duration::minutes(crng.random_range(0..1440));
            let mut email = Email::new(String::new(), day.to_rfc2822(), body);
            email.language = Some(language.to_string());
            email.subject = tpl.subject.join(" ");
            // the campaign start day carries the rate used above
            if sextortion && matches!(campaigns[t].currency, Currency::Eur) {
                email.date_raw = campaigns[t].start.to_rfc2822();
                email.date = Some(campaigns[t].start);
            }
            email.masked_fields.insert("to".into(), "<masked>".into());
            drafts.push((t, email, sextortion));
        }
    }
    drafts.shuffle(&mut crng);
    let mut emails = Vec::with_capacity(drafts.len());
    let mut labels = Vec::with_capacity(drafts.len());
    for (i, (t, mut e, sextortion)) in drafts.into_iter().enumerate() {
        e.id = format!("m{:06}", i + 1);
        truth.template_of.insert(e.id.clone(), t);
        labels.push(EmailLabel {
            email_id: e.id.clone(),
            label: if sextortion { "sextortion" } else { "other" }.into(),
            campaign: format!("campaign-{t:02}"),
        });
        emails.push(e);
    }
    truth.templates = total_templates;
    truth.sextortion_templates = (0..n).collect();
    truth.ransom_min_usd = ransom.iter().min().copied();
    truth.ransom_max_usd = ransom.iter().max().copied();

    // breach list: every other unique candidate plus noise
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for p in &passwords {
        *counts.entry(p.as_str()).or_default() += 1;
    }
    let candidates: Vec<&str> = counts
        .iter()
        .filter(|(p, &c)| c == 1 && p.chars().count() >= 4)
        .map(|(p, _)| *p)
        .collect();
    let mut breach_words: Vec<String> = candidates.iter().step_by(2).map(|s| s.to_string()).collect();
    breach_words.push(common_pw.clone());
    for _ in 0..50 {
        breach_words.push(words.fresh(&mut crng));
    }
    breach_words.sort();
    truth.breach_candidates = candidates.len();
    truth.breach_listed = candidates.len().div_ceil(2);

    // prices and rates
    let first_day = NaiveDate::from_ymd_opt(2017, 1, 1).unwrap();
    let last_day = NaiveDate::from_ymd_opt(2019, 3, 31).unwrap();
    let days: Vec<NaiveDate> = first_day.iter_days().take_while(|d| *d <= last_day).collect();
    let prices = PriceSeries::from_daily(days.iter().map(|&d| (d, month_price(d))))
        .map_err(|e| FixtureError::Other(e.to_string()))?;
    let mut rates = FiatRates::default();
    for &d in &days {
        rates.insert(d, Currency::Eur, eur_rate(d));
        rates.insert(d, Currency::Gbp, Decimal::new(130, 2));
        rates.insert(d, Currency::Nok, Decimal::new(12, 2));
    }

    let mut tags = AttributionTags::default();
    let mut chain = Chain {
        txs: Vec::new(),
        values: BTreeMap::new(),
        spent_at: BTreeMap::new(),
    };

    if spec.ledger {
        plant_ledger(spec, &campaigns, pair, super_campaign, &mut chain, &mut ids, &mut lrng, &mut tags, &mut truth);
    }

    truth.seeds = campaigns.iter().flat_map(|c| c.seeds.iter().cloned()).collect();
    // linkage: one component per shared group / pair, singletons elsewhere
    let mut comps: Vec<usize> = Vec::new();
    let mut grouped = 0;
    if k_shared >= 2 {
        comps.push(k_shared);
        grouped += k_shared;
    }
    if pair.is_some() && spec.ledger {
        comps.push(2);
        grouped += 2;
    }
    comps.extend(std::iter::repeat_n(1, n - grouped));
    comps.sort_unstable_by(|a, b| b.cmp(a));
    truth.linkage_components = comps;

    let mut txs = chain.txs;
    txs.sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then(a.tx_id.cmp(&b.tx_id)));

    let mut config = PipelineConfig::new(Paths {
        corpus: "corpus.jsonl".into(),
        ledger: "ledger.jsonl".into(),
        prices: Some("prices.csv".into()),
        rates: Some("rates.csv".into()),
        tags: Some("tags.csv".into()),
        labels: Some("labels.csv".into()),
        breach_lists: vec!["breach.txt".into()],
    });
    config.seed = seed & (i64::MAX as u64);
    config.cluster.supercluster_limit = spec.supercluster_limit;

    Ok(Fixture {
        spec: spec.clone(),
        emails,
        labels,
        transactions: txs,
        prices,
        rates,
        tags,
        breach_words,
        config,
        truth,
    })
}

#[allow(clippy::too_many_arguments)]
fn plant_ledger(
    spec: &FixtureSpec,
    campaigns: &[Campaign],
    pair: Option<(usize, usize)>,
    super_campaign: Option<usize>,
    chain: &mut Chain,
    ids: &mut Ids,
    rng: &mut ChaCha8Rng,
    tags: &mut AttributionTags,
    truth: &mut GroundTruth,
) {
    let funding_at = Utc.with_ymd_and_hms(2018, 6, 20, 0, 0, 0).unwrap();
    let hours = |c: &Campaign, h: i64| c.start + Duration::hours(h);
    let window_cents = |rng: &mut ChaCha8Rng| rng.random_range(25_000..=180_000u64);
    let mut planned: Vec<Planned> = Vec::new();

    // an old cluster, active long before the cutoff
    let old1 = ids.address(rng);
    let old2 = ids.address(rng);
    let old_at = Utc.with_ymd_and_hms(2017, 2, 1, 0, 0, 0).unwrap();
    let ocb = chain.make(ids, old_at, &[], &[(old1.clone(), 100_000_000), (old2.clone(), 100_000_000)]);
    let old_sink = ids.address(rng);
    chain.make(
        ids,
        old_at + Duration::days(28),
        &[OutputRef::new(ocb.clone(), 0), OutputRef::new(ocb, 1)],
        &[(old_sink, 200_000_000)],
    );
    let old_rep = old1.clone().min(old2.clone());

    // per campaign: which outputs each consolidation spends
    let mut consolidate: Vec<Vec<OutputRef>> = vec![Vec::new(); campaigns.len()];
    let mut used_hours: Vec<BTreeSet<i64>> = vec![BTreeSet::new(); campaigns.len()];
    let mut pick_hour = |c: usize, lo: i64, hi: i64, rng: &mut ChaCha8Rng| loop {
        let h = rng.random_range(lo..hi);
        if used_hours[c].insert(h) {
            return h;
        }
    };

    for (ci, camp) in campaigns.iter().enumerate() {
        // in-window victims on every wallet address
        for addr in &camp.wallet {
            for _ in 0..spec.victims_per_address {
                let h = pick_hour(ci, 0, 190, rng);
                let cents = window_cents(rng);
                let p = victim_pays(chain, ids, rng, funding_at, hours(camp, h), addr, cents, false, true);
                consolidate[ci].push(p.output.clone());
                planned.push(p);
            }
        }
        // found only through expansion
        let h = pick_hour(ci, 0, 190, rng);
        let cents = window_cents(rng);
        let p = victim_pays(chain, ids, rng, funding_at, hours(camp, h), &camp.hidden, cents, false, true);
        consolidate[ci].push(p.output.clone());
        planned.push(p);
        // exact-amount sweep
        let h = pick_hour(ci, 0, 190, rng);
        let cents = window_cents(rng);
        let p = victim_pays(chain, ids, rng, funding_at, hours(camp, h), &camp.wallet[0], cents, true, true);
        consolidate[ci].push(p.output.clone());
        planned.push(p);
        // too large
        let h = pick_hour(ci, 0, 190, rng);
        let p = victim_pays(chain, ids, rng, funding_at, hours(camp, h), &camp.wallet[0], 330_000 + ci as u64, false, false);
        consolidate[ci].push(p.output.clone());
        planned.push(p);
        // too small, later moved to the hidden address
        let h = pick_hour(ci, 0, 190, rng);
        let small = victim_pays(chain, ids, rng, funding_at, hours(camp, h), &camp.wallet[1], 4_000 + ci as u64, false, false);
        let moved = chain.make(
            ids,
            hours(camp, 195),
            std::slice::from_ref(&small.output),
            &[(camp.hidden.clone(), small.sat)],
        );
        planned.push(small.clone());
        planned.push(Planned {
            output: OutputRef::new(moved, 0),
            address: camp.hidden.clone(),
            at: hours(camp, 195),
            sat: small.sat,
            usd: Decimal::from(small.sat) * month_price(hours(camp, 195).date_naive()) / Decimal::from(100_000_000u64),
            kind: PaymentKind::Collector,
            in_window: false,
        });
        consolidate[ci].push(planned.last().expect("just pushed").output.clone());

        if ci == 0 {
            for (cents, kept) in [(18_000u64, true), (17_999, false), (220_000, true), (220_001, false)] {
                let h = pick_hour(ci, 0, 190, rng);
                let p = victim_pays(chain, ids, rng, funding_at, hours(camp, h), &camp.wallet[0], cents, false, kept);
                truth.boundary.push((p.output.clone(), p.usd, kept));
                consolidate[ci].push(p.output.clone());
                planned.push(p);
            }
            plant_coinjoin(camp, chain, ids, rng, funding_at, &mut planned, truth);
        }
        if super_campaign == Some(ci) {
            plant_supercluster(spec, camp, chain, ids, rng, funding_at, &mut planned, truth);
        }
        if let Some((p_c, q_c)) = pair {
            if ci == q_c {
                // one payment to the partner's wallet joins this consolidation
                let partner = &campaigns[p_c].wallet[0];
                let h = pick_hour(ci, 0, 190, rng);
                let cents = window_cents(rng);
                let p = victim_pays(chain, ids, rng, funding_at, hours(camp, h), partner, cents, false, true);
                consolidate[ci].push(p.output.clone());
                planned.push(p);
            }
        }
    }

    // consolidations, cash-outs and late unspent payments
    let exchange_tag = "ExchangeA";
    let mut tagged = 0u64;
    let mut cashout = 0u64;
    let mut depth2: BTreeMap<String, u64> = BTreeMap::new();
    let roots: BTreeMap<OutputRef, u64> = planned
        .iter()
        .filter(|p| p.in_window && p.kind != PaymentKind::Collector)
        .map(|p| (p.output.clone(), p.sat))
        .collect();
    for (ci, camp) in campaigns.iter().enumerate() {
        let inputs = &consolidate[ci];
        let total: u64 = inputs.iter().map(|r| chain.values[r].1).sum();
        let taint: u64 = inputs.iter().filter_map(|r| roots.get(r)).sum();
        let collect = ids.address(rng);
        let k = chain.make(ids, hours(camp, 200), inputs, &[(collect, total)]);
        let exchange = ids.address(rng);
        tags.insert(exchange.clone(), exchange_tag, "fixture");
        let mixer = ids.address(rng);
        let (e, o) = (total / 2, total / 5);
        let m = total - e - o;
        chain.make(
            ids,
            hours(camp, 220),
            &[OutputRef::new(k, 0)],
            &[(exchange, e), (old1.clone(), o), (mixer.clone(), m)],
        );
        let share = |v: u64| (taint as u128 * v as u128 / total as u128) as u64;
        tagged += share(e);
        cashout += share(o);
        *depth2.entry(old_rep.clone()).or_default() += share(o);
        *depth2.entry(mixer).or_default() += share(m);

        let cents = window_cents(rng);
        let late = victim_pays(chain, ids, rng, funding_at, hours(camp, 210), &camp.wallet[0], cents, false, true);
        planned.push(late);
    }
    truth.tagged_received_sat = tagged;
    truth.cashout_sat = cashout;
    let mut rows: Vec<TruthFlowRow> = depth2
        .into_iter()
        .map(|(representative, sat)| TruthFlowRow { representative, sat })
        .collect();
    rows.sort_by(|a, b| b.sat.cmp(&a.sat).then(a.representative.cmp(&b.representative)));
    truth.depth2 = rows;

    // clusters touched by seeds
    let mut clusters: Vec<BTreeSet<String>> = Vec::new();
    for (ci, camp) in campaigns.iter().enumerate() {
        if pair.is_some_and(|(p, _)| p == ci) {
            continue;
        }
        let mut set: BTreeSet<String> = camp.wallet.iter().cloned().collect();
        set.insert(camp.hidden.clone());
        if let Some((p, q)) = pair {
            if q == ci {
                set.extend(campaigns[p].wallet.iter().cloned());
                set.insert(campaigns[p].hidden.clone());
            }
        }
        clusters.push(set);
    }
    clusters.sort();
    let mut expanded: BTreeSet<String> = campaigns.iter().flat_map(|c| c.seeds.iter().cloned()).collect();
    for c in &clusters {
        expanded.extend(c.iter().cloned());
    }
    truth.seed_clusters = clusters;
    truth.expanded_addresses = expanded;

    // classification
    let mut payments: Vec<TruthPayment> = planned
        .into_iter()
        .map(|p| {
            let c12 = p.kind != PaymentKind::Collector && p.in_window;
            TruthPayment {
                spent_at: chain.spent_at.get(&p.output).copied(),
                in_combo_1_2: c12,
                in_combo_1_2_3: c12 && p.kind == PaymentKind::Victim,
                output: p.output,
                address: p.address,
                timestamp: p.at,
                value_sat: p.sat,
                value_usd: p.usd,
                kind: p.kind,
                in_window: p.in_window,
            }
        })
        .collect();
    payments.sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then(a.output.cmp(&b.output)));
    for (label, pick) in [
        ("1+2", (|p: &TruthPayment| p.in_combo_1_2) as fn(&TruthPayment) -> bool),
        ("1+2+3", |p: &TruthPayment| p.in_combo_1_2_3),
    ] {
        let kept: Vec<&TruthPayment> = payments.iter().filter(|p| pick(p)).collect();
        truth.revenue.push(TruthRevenue {
            combo: label.into(),
            payments: kept.len(),
            usd: kept.iter().map(|p| p.value_usd).sum(),
            sat: kept.iter().map(|p| p.value_sat).sum(),
        });
    }
    truth.payments = payments;
}

fn plant_coinjoin(
    camp: &Campaign,
    chain: &mut Chain,
    ids: &mut Ids,
    rng: &mut ChaCha8Rng,
    funding_at: DateTime<Utc>,
    planned: &mut Vec<Planned>,
    truth: &mut GroundTruth,
) {
    let at = camp.start + Duration::hours(150);
    let p = victim_pays(chain, ids, rng, funding_at, at - Duration::hours(5), &camp.wallet[1], 6_000, false, false);
    let strangers: Vec<String> = (0..3).map(|_| ids.address(rng)).collect();
    let fund = chain.make(
        ids,
        funding_at,
        &[],
        &strangers.iter().map(|s| (s.clone(), 2_000_000)).collect::<Vec<_>>(),
    );
    let v = 500_000;
    let mut inputs = vec![p.output.clone()];
    inputs.extend((0..3).map(|i| OutputRef::new(fund.clone(), i)));
    let mut outputs: Vec<(String, u64)> = (0..4).map(|_| (ids.address(rng), v)).collect();
    outputs.push((ids.address(rng), p.sat - v));
    for _ in 0..3 {
        outputs.push((ids.address(rng), 1_500_000));
    }
    let cj = chain.make(ids, at, &inputs, &outputs);
    truth.coinjoin_tx = Some(cj);
    truth.coinjoin_strangers = strangers;
    planned.push(p);
}

#[allow(clippy::too_many_arguments)]
fn plant_supercluster(
    spec: &FixtureSpec,
    camp: &Campaign,
    chain: &mut Chain,
    ids: &mut Ids,
    rng: &mut ChaCha8Rng,
    funding_at: DateTime<Utc>,
    planned: &mut Vec<Planned>,
    truth: &mut GroundTruth,
) {
    let hosted = &camp.seeds[0];
    // one in-window payment stays put, one small one is swept by the service
    let cents = rng.random_range(25_000..=180_000u64);
    planned.push(victim_pays(chain, ids, rng, funding_at, camp.start + Duration::hours(20), hosted, cents, false, true));
    let small = victim_pays(chain, ids, rng, funding_at, camp.start + Duration::hours(30), hosted, 4_500, false, false);
    let members: Vec<(String, u64)> = (0..spec.supercluster_size - 1).map(|_| (ids.address(rng), 50_000)).collect();
    let fund = chain.make(ids, funding_at, &[], &members);
    let mut inputs: Vec<OutputRef> = (0..members.len() as u32).map(|i| OutputRef::new(fund.clone(), i)).collect();
    inputs.push(small.output.clone());
    let total = 50_000 * members.len() as u64 + small.sat;
    let hot = ids.address(rng);
    chain.make(ids, camp.start + Duration::hours(100), &inputs, &[(hot, total)]);
    truth.supercluster_addresses = spec.supercluster_size;
    planned.push(small);
}

/// Writes the fixture files plus `pipeline.toml` and `ground_truth.json`.
pub fn write_fixture(fx: &Fixture, dir: &Path) -> Result<(), FixtureError> {
    use std::io::Write as _;
    std::fs::create_dir_all(dir)?;
    let open = |name: &str| -> Result<std::io::BufWriter<std::fs::File>, FixtureError> {
        Ok(std::io::BufWriter::new(std::fs::File::create(dir.join(name))?))
    };
    crate::corpus::write_corpus(open("corpus.jsonl")?, &fx.emails)?;
    {
        let mut w = csv::Writer::from_writer(open("labels.csv")?);
        w.write_record(["email_id", "label", "campaign"]).map_err(|e| FixtureError::Other(e.to_string()))?;
        for l in &fx.labels {
            w.write_record([&l.email_id, &l.label, &l.campaign])
                .map_err(|e| FixtureError::Other(e.to_string()))?;
        }
        w.flush()?;
    }
    let store = crate::chainstore::ChainStore::from_transactions(
        fx.transactions.clone(),
        &crate::chainstore::IngestOptions::default(),
    )
    .map_err(|e| FixtureError::Other(format!("fixture ledger is inconsistent: {e}")))?;
    store.write_ledger(open("ledger.jsonl")?)?;
    fx.prices.write_csv(open("prices.csv")?).map_err(|e| FixtureError::Other(e.to_string()))?;
    fx.rates.write_csv(open("rates.csv")?).map_err(|e| FixtureError::Other(e.to_string()))?;
    fx.tags.write_csv(open("tags.csv")?).map_err(|e| FixtureError::Other(e.to_string()))?;
    let mut b = open("breach.txt")?;
    for w in &fx.breach_words {
        writeln!(b, "{w}")?;
    }
    b.flush()?;
    let toml = fx.config.to_toml().map_err(|e| FixtureError::Other(e.to_string()))?;
    std::fs::write(dir.join("pipeline.toml"), toml)?;
    let mut g = open("ground_truth.json")?;
    serde_json::to_writer_pretty(&mut g, &fx.truth)?;
    g.write_all(b"\n")?;
    g.flush()?;
    Ok(())
}

/// A random but consistent ledger: every spend resolves, values balance,
/// and roughly one transaction in eight is CoinJoin-shaped.
pub fn random_ledger(seed: u64, n_tx: usize, n_addr: usize) -> Vec<Transaction> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_addr = n_addr.max(2);
    let pool: Vec<String> = (0..n_addr).map(|i| format!("addr{i:04}")).collect();
    let mut utxos: Vec<(OutputRef, String, u64)> = Vec::new();
    let mut txs = Vec::with_capacity(n_tx);
    let mut at = Utc.with_ymd_and_hms(2018, 1, 1, 0, 0, 0).unwrap();
    for t in 0..n_tx {
        at += Duration::minutes(rng.random_range(1..120));
        let tx_id = format!("tx{seed:x}-{t:05}");
        let pick = |rng: &mut ChaCha8Rng| pool[rng.random_range(0..pool.len())].clone();
        let mut inputs = Vec::new();
        let mut outputs: Vec<(String, u64)> = Vec::new();
        let coinbase = utxos.len() < 4 || rng.random_bool(0.1);
        if coinbase {
            for _ in 0..rng.random_range(1..=3) {
                outputs.push((pick(&mut rng), rng.random_range(1_000_000..50_000_000)));
            }
        } else if rng.random_bool(0.125) && utxos.len() >= 4 {
            // CoinJoin-shaped: k spenders, k equal outputs, k - 1 changes
            let k = rng.random_range(2..=4.min(utxos.len()));
            let mut chosen = Vec::new();
            let mut seen_addr = HashSet::new();
            let mut order: Vec<usize> = (0..utxos.len()).collect();
            order.shuffle(&mut rng);
            for i in order {
                if seen_addr.insert(utxos[i].1.clone()) {
                    chosen.push(i);
                    if chosen.len() == k {
                        break;
                    }
                }
            }
            if chosen.len() == k {
                chosen.sort_unstable_by(|a, b| b.cmp(a));
                let picked: Vec<(OutputRef, String, u64)> = chosen.into_iter().map(|i| utxos.swap_remove(i)).collect();
                let v = picked.iter().map(|p| p.2).min().unwrap_or(0) / 2;
                for p in &picked {
                    inputs.push(TxInput {
                        address: p.1.clone(),
                        value_sat: p.2,
                        spends: p.0.clone(),
                    });
                }
                for _ in 0..k {
                    outputs.push((pick(&mut rng), v));
                }
                let mut changes: Vec<u64> = picked.iter().map(|p| p.2 - v).collect();
                changes.sort_unstable_by(|a, b| b.cmp(a));
                // k - 1 change outputs, the largest absorbing the rest
                let rest: u64 = changes[k - 1..].iter().sum();
                changes.truncate(k - 1);
                changes[0] += rest;
                for c in changes {
                    outputs.push((pick(&mut rng), c));
                }
            }
        }
        if !coinbase && outputs.is_empty() {
            let m = rng.random_range(1..=4.min(utxos.len()));
            let mut sum = 0u64;
            for _ in 0..m {
                let i = rng.random_range(0..utxos.len());
                let u = utxos.swap_remove(i);
                sum += u.2;
                inputs.push(TxInput {
                    address: u.1,
                    value_sat: u.2,
                    spends: u.0,
                });
            }
            let fee = rng.random_range(0..=sum / 100);
            let mut left = sum - fee;
            let outs = rng.random_range(1..=3);
            for o in 0..outs {
                let v = if o + 1 == outs { left } else { rng.random_range(0..=left) };
                left -= v;
                outputs.push((pick(&mut rng), v));
            }
        }
        let tx = Transaction {
            tx_id: tx_id.clone(),
            timestamp: at,
            inputs,
            outputs: outputs
                .iter()
                .enumerate()
                .map(|(i, (a, v))| TxOutput {
                    index: i as u32,
                    address: a.clone(),
                    value_sat: *v,
                })
                .collect(),
        };
        for o in &tx.outputs {
            utxos.push((tx.output_ref(o.index), o.address.clone(), o.value_sat));
        }
        txs.push(tx);
    }
    txs
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FanoutSpec {
    pub levels: usize,
    pub max_fanout: usize,
    /// Chance that a freshly created node is a tagged entity.
    pub tag_probability: f64,
    /// Depth whose level is made wider than `width_limit`.
    pub wide_depth: Option<usize>,
    pub width_limit: usize,
}

impl Default for FanoutSpec {
    fn default() -> Self {
        Self {
            levels: 4,
            max_fanout: 3,
            tag_probability: 0.15,
            wide_depth: None,
            width_limit: 100,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FanoutLedger {
    pub transactions: Vec<Transaction>,
    /// Depth-0 payment output.
    pub root: (OutputRef, String, u64, DateTime<Utc>),
    pub tags: AttributionTags,
    /// Tagged addresses with the depth they were planted at.
    pub tagged: BTreeMap<String, usize>,
    /// Every planted node address with its depth.
    pub depth_of: BTreeMap<String, usize>,
}

/// A tree of spends from one root payment. Each node, tagged or not,
/// spends its output to 1..=max_fanout fresh addresses, sometimes mixing
/// in an untainted input and paying a fee.
pub fn fanout_ledger(seed: u64, spec: &FanoutSpec) -> FanoutLedger {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut at = Utc.with_ymd_and_hms(2018, 8, 1, 0, 0, 0).unwrap();
    let mut counter = 0usize;
    let mut next_id = |prefix: &str| {
        counter += 1;
        format!("{prefix}{seed:x}-{counter:05}")
    };
    let mut txs = Vec::new();
    let root_addr = next_id("node");
    let root_value = rng.random_range(10_000_000..1_000_000_000u64);
    let cb = Transaction {
        tx_id: next_id("cb"),
        timestamp: at,
        inputs: vec![],
        outputs: vec![TxOutput {
            index: 0,
            address: root_addr.clone(),
            value_sat: root_value,
        }],
    };
    let root = (cb.output_ref(0), root_addr.clone(), root_value, at);
    txs.push(cb);
    let mut tags = AttributionTags::default();
    let mut tagged = BTreeMap::new();
    let mut depth_of = BTreeMap::from([(root_addr.clone(), 0)]);
    let mut frontier = vec![(root.0.clone(), root_addr, root_value)];
    for depth in 1..=spec.levels {
        let mut next = Vec::new();
        let wide = spec.wide_depth == Some(depth);
        for (i, (r, addr, value)) in frontier.iter().enumerate() {
            at += Duration::minutes(10);
            let mut inputs = vec![TxInput {
                address: addr.clone(),
                value_sat: *value,
                spends: r.clone(),
            }];
            if rng.random_bool(0.3) {
                let extra_addr = next_id("outside");
                let extra = Transaction {
                    tx_id: next_id("cb"),
                    timestamp: at,
                    inputs: vec![],
                    outputs: vec![TxOutput {
                        index: 0,
                        address: extra_addr.clone(),
                        value_sat: rng.random_range(1_000..*value.max(&2_000)),
                    }],
                };
                inputs.push(TxInput {
                    address: extra_addr,
                    value_sat: extra.outputs[0].value_sat,
                    spends: extra.output_ref(0),
                });
                txs.push(extra);
            }
            let total: u64 = inputs.iter().map(|i| i.value_sat).sum();
            let fee = rng.random_range(0..=total / 50);
            let fanout = if wide && i == 0 {
                spec.width_limit + 1
            } else {
                rng.random_range(1..=spec.max_fanout)
            };
            // every output gets at least half an even share
            let floor = (total - fee) / (2 * fanout as u64);
            let mut left = total - fee - floor * fanout as u64;
            let mut outputs = Vec::with_capacity(fanout);
            for o in 0..fanout {
                let extra = if o + 1 == fanout { left } else { rng.random_range(0..=left / 2) };
                left -= extra;
                let v = floor + extra;
                let a = next_id("node");
                depth_of.insert(a.clone(), depth);
                // the wide level hangs off a chain of untagged first children
                let keeps_path = spec.wide_depth.is_some_and(|w| depth < w) && i == 0 && o == 0;
                if !keeps_path && rng.random_bool(spec.tag_probability) {
                    tags.insert(a.clone(), "ExchangeB", "fanout");
                    tagged.insert(a.clone(), depth);
                }
                outputs.push(TxOutput {
                    index: o as u32,
                    address: a,
                    value_sat: v,
                });
            }
            let tx = Transaction {
                tx_id: next_id("tx"),
                timestamp: at,
                inputs,
                outputs,
            };
            for o in &tx.outputs {
                next.push((tx.output_ref(o.index), o.address.clone(), o.value_sat));
            }
            txs.push(tx);
        }
        frontier = next;
    }
    FanoutLedger {
        transactions: txs,
        root,
        tags,
        tagged,
        depth_of,
    }
}
