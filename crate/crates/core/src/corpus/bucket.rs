//! Two-step email bucketing: exact suffix match, then Jaccard merge of
//! templates under transitive closure.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tokenize::{normalize_and_tokenize, TokenSuffix};
use super::{CorpusError, Email};
use crate::unionfind::DisjointSets;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BucketParams {
    /// Number of trailing words compared (`l`).
    pub suffix_len: usize,
    /// Merge threshold on template Jaccard similarity (`t`), strict.
    pub threshold: f64,
}

impl Default for BucketParams {
    fn default() -> Self {
        Self {
            suffix_len: 50,
            threshold: 0.3,
        }
    }
}

impl BucketParams {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.suffix_len < 1 {
            return Err(CorpusError::Parameter("l must be at least 1".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(CorpusError::Parameter(format!(
                "t must lie in (0,1), got {}",
                self.threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bucket {
    pub id: usize,
    pub template_email_id: String,
    /// Members in stream order.
    pub member_ids: Vec<String>,
    pub suffix: TokenSuffix,
}

impl Bucket {
    pub fn len(&self) -> usize {
        self.member_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.member_ids.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct Bucketing {
    /// Final buckets, numbered by size (largest first).
    pub buckets: Vec<Bucket>,
    /// Number of buckets after the exact-suffix step.
    pub exact_bucket_count: usize,
    /// Suffix of every email, keyed by email id.
    pub suffixes: HashMap<String, TokenSuffix>,
}

impl Bucketing {
    pub fn bucket_of(&self) -> HashMap<&str, usize> {
        let mut out = HashMap::new();
        for b in &self.buckets {
            for m in &b.member_ids {
                out.insert(m.as_str(), b.id);
            }
        }
        out
    }

    pub fn member_suffixes(&self, bucket: &Bucket) -> Vec<&TokenSuffix> {
        bucket
            .member_ids
            .iter()
            .filter_map(|id| self.suffixes.get(id))
            .collect()
    }
}

struct ExactBucket {
    template: usize,
    members: Vec<usize>,
}

pub fn bucket_emails(emails: &[Email], params: BucketParams) -> Result<Bucketing, CorpusError> {
    params.validate()?;

    let suffixes: Vec<TokenSuffix> = emails
        .iter()
        .map(|e| TokenSuffix::new(normalize_and_tokenize(&e.body), params.suffix_len))
        .collect();

    // step 1: exact suffix match against existing templates
    let mut exact: Vec<ExactBucket> = Vec::new();
    let mut by_suffix: HashMap<&[String], usize> = HashMap::new();
    for (i, s) in suffixes.iter().enumerate() {
        match by_suffix.get(s.tokens()) {
            Some(&b) => exact[b].members.push(i),
            None => {
                by_suffix.insert(s.tokens(), exact.len());
                exact.push(ExactBucket {
                    template: i,
                    members: vec![i],
                });
            }
        }
    }

    // step 2: merge templates whose suffix sets are more similar than t
    let template_sets: Vec<Vec<u32>> = intern_sets(exact.iter().map(|b| &suffixes[b.template]));
    let mut ds = DisjointSets::new(exact.len());
    for (a, b) in similar_pairs(&template_sets, params.threshold) {
        ds.union(a, b);
    }

    let mut groups = ds.groups();
    let group_size = |g: &Vec<usize>| g.iter().map(|&b| exact[b].members.len()).sum::<usize>();
    // groups arrive ordered by smallest exact-bucket id
    groups.sort_by(|a, b| group_size(b).cmp(&group_size(a)).then(a[0].cmp(&b[0])));

    let buckets = groups
        .iter()
        .enumerate()
        .map(|(id, g)| {
            let rep = *g
                .iter()
                .max_by(|&&x, &&y| {
                    exact[x]
                        .members
                        .len()
                        .cmp(&exact[y].members.len())
                        .then(y.cmp(&x))
                })
                .expect("non-empty group");
            let mut members: Vec<usize> = g.iter().flat_map(|&b| exact[b].members.iter().copied()).collect();
            members.sort_unstable();
            let template = exact[rep].template;
            Bucket {
                id,
                template_email_id: emails[template].id.clone(),
                member_ids: members.iter().map(|&m| emails[m].id.clone()).collect(),
                suffix: suffixes[template].clone(),
            }
        })
        .collect();

    Ok(Bucketing {
        buckets,
        exact_bucket_count: exact.len(),
        suffixes: emails
            .iter()
            .zip(suffixes)
            .map(|(e, s)| (e.id.clone(), s))
            .collect(),
    })
}

/// Maps each suffix to a sorted, deduplicated vector of token ids ordered
/// by ascending global frequency (rarest first).
fn intern_sets<'a>(sets: impl Iterator<Item = &'a TokenSuffix>) -> Vec<Vec<u32>> {
    let raw: Vec<HashSet<&str>> = sets.map(|s| s.token_set()).collect();
    let mut freq: HashMap<&str, usize> = HashMap::new();
    for s in &raw {
        for t in s {
            *freq.entry(t).or_default() += 1;
        }
    }
    let mut vocab: Vec<(&str, usize)> = freq.into_iter().collect();
    vocab.sort_by(|a, b| a.1.cmp(&b.1).then(a.0.cmp(b.0)));
    let rank: HashMap<&str, u32> = vocab
        .iter()
        .enumerate()
        .map(|(i, (t, _))| (*t, i as u32))
        .collect();
    raw.iter()
        .map(|s| {
            let mut v: Vec<u32> = s.iter().map(|t| rank[t]).collect();
            v.sort_unstable();
            v
        })
        .collect()
}

fn sorted_jaccard(a: &[u32], b: &[u32]) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    inter as f64 / (a.len() + b.len() - inter) as f64
}

/// Number of leading (rarest) tokens that must be indexed so that every
/// pair with Jaccard ≥ t shares at least one indexed token.
fn prefix_len(size: usize, threshold: f64) -> usize {
    let required = ((threshold * size as f64) - 1e-9).ceil().max(0.0) as usize;
    (size - required.min(size) + 1).min(size)
}

/// All pairs `(a, b)`, `a < b`, with Jaccard strictly above `threshold`,
/// using prefix filtering over an inverted index. Pairs already covered by
/// an earlier merge are still reported; callers only need the closure.
fn similar_pairs(sets: &[Vec<u32>], threshold: f64) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    let mut ds = DisjointSets::new(sets.len());
    let mut index: HashMap<u32, Vec<usize>> = HashMap::new();
    let mut first_empty: Option<usize> = None;
    let mut seen: Vec<usize> = vec![usize::MAX; sets.len()];

    for (i, set) in sets.iter().enumerate() {
        if set.is_empty() {
            match first_empty {
                Some(e) => {
                    ds.union(e, i);
                    pairs.push((e, i));
                }
                None => first_empty = Some(i),
            }
            continue;
        }
        let prefix = &set[..prefix_len(set.len(), threshold)];
        for tok in prefix {
            if let Some(postings) = index.get(tok) {
                for &j in postings {
                    if seen[j] == i {
                        continue;
                    }
                    seen[j] = i;
                    // already in the same merged group: the pair adds nothing
                    if ds.find(i) == ds.find(j) {
                        continue;
                    }
                    if sorted_jaccard(&sets[j], set) > threshold {
                        ds.union(i, j);
                        pairs.push((j, i));
                    }
                }
            }
        }
        for tok in prefix {
            index.entry(*tok).or_default().push(i);
        }
    }
    pairs
}

/// Mean and population variance of pairwise Jaccard similarity among
/// bucket members.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BucketQuality {
    pub mean: f64,
    pub variance: f64,
    pub pairs: usize,
}

/// Exact over all pairs when the bucket has at most `sample_size` members,
/// otherwise over all pairs of a seeded random sample of `sample_size`
/// members. A single-member bucket scores mean 1, variance 0.
pub fn bucket_quality(members: &[&TokenSuffix], sample_size: usize, seed: u64) -> BucketQuality {
    assert!(!members.is_empty(), "bucket must be non-empty");
    let chosen: Vec<&TokenSuffix> = if members.len() <= sample_size.max(2) {
        members.to_vec()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = rand::seq::index::sample(&mut rng, members.len(), sample_size.max(2)).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| members[i]).collect()
    };
    if chosen.len() < 2 {
        return BucketQuality {
            mean: 1.0,
            variance: 0.0,
            pairs: 0,
        };
    }
    let sets = intern_sets(chosen.iter().copied());
    let mut values = Vec::with_capacity(sets.len() * (sets.len() - 1) / 2);
    for i in 0..sets.len() {
        for j in i + 1..sets.len() {
            values.push(sorted_jaccard(&sets[i], &sets[j]));
        }
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let variance = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    BucketQuality {
        mean,
        variance,
        pairs: values.len(),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct BucketRecord {
    bucket_id: usize,
    template_email_id: String,
    member_count: usize,
    suffix_tokens: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct MembershipRow {
    email_id: String,
    bucket_id: usize,
}

pub fn write_buckets<W: Write>(mut w: W, buckets: &[Bucket]) -> std::io::Result<()> {
    for b in buckets {
        let rec = BucketRecord {
            bucket_id: b.id,
            template_email_id: b.template_email_id.clone(),
            member_count: b.member_ids.len(),
            suffix_tokens: b.suffix.tokens().to_vec(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Membership CSV `email_id,bucket_id`, in bucket then stream order.
pub fn write_membership<W: Write>(w: W, buckets: &[Bucket]) -> Result<(), CorpusError> {
    let mut out = csv::Writer::from_writer(w);
    for b in buckets {
        for m in &b.member_ids {
            out.serialize(MembershipRow {
                email_id: m.clone(),
                bucket_id: b.id,
            })?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Rebuilds buckets from the JSON-lines summary and the membership CSV.
pub fn read_buckets<R: BufRead, M: std::io::Read>(
    summary: R,
    membership: M,
) -> Result<Vec<Bucket>, CorpusError> {
    let members = read_membership(membership)?;
    let mut by_bucket: HashMap<usize, Vec<String>> = HashMap::new();
    for (email, bucket) in members {
        by_bucket.entry(bucket).or_default().push(email);
    }
    let mut out = Vec::new();
    for (i, line) in summary.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: BucketRecord = serde_json::from_str(&line).map_err(|e| CorpusError::Schema {
            line: i + 1,
            message: e.to_string(),
        })?;
        let member_ids = by_bucket.remove(&rec.bucket_id).unwrap_or_default();
        if member_ids.len() != rec.member_count {
            return Err(CorpusError::Schema {
                line: i + 1,
                message: format!(
                    "bucket {} lists {} members but membership has {}",
                    rec.bucket_id,
                    rec.member_count,
                    member_ids.len()
                ),
            });
        }
        let len = rec.suffix_tokens.len().max(1);
        out.push(Bucket {
            id: rec.bucket_id,
            template_email_id: rec.template_email_id,
            member_ids,
            suffix: TokenSuffix::new(rec.suffix_tokens, len),
        });
    }
    Ok(out)
}

/// `(email_id, bucket_id)` rows of a membership CSV.
pub fn read_membership<R: std::io::Read>(r: R) -> Result<Vec<(String, usize)>, CorpusError> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let row: MembershipRow = row?;
        out.push((row.email_id, row.bucket_id));
    }
    Ok(out)
}
