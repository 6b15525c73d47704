//! Human-supplied bucket annotation and campaign grouping.
//!
//! Annotators label emails (normally the bucket templates); a bucket takes
//! its template's label, or the first labeled member when the template
//! carries none.

use std::collections::{BTreeMap, HashMap};
use std::io::Read;

use serde::{Deserialize, Serialize};

use super::{Bucket, CorpusError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmailLabel {
    pub email_id: String,
    /// `sextortion` or `other`.
    pub label: String,
    #[serde(default)]
    pub campaign: String,
}

impl EmailLabel {
    pub fn is_sextortion(&self) -> bool {
        self.label.eq_ignore_ascii_case("sextortion")
    }
}

/// CSV `email_id,label,campaign`.
pub fn read_labels<R: Read>(r: R) -> Result<Vec<EmailLabel>, CorpusError> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize().enumerate() {
        let row: EmailLabel = row?;
        if !row.is_sextortion() && !row.label.eq_ignore_ascii_case("other") {
            return Err(CorpusError::Schema {
                line: i + 2,
                message: format!("label must be sextortion or other, got {:?}", row.label),
            });
        }
        out.push(row);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BucketLabel {
    pub bucket_id: usize,
    pub sextortion: bool,
    pub campaign: String,
}

/// Resolves one label per bucket. Unlabeled buckets count as sextortion
/// and form a campaign of their own named `bucket-<id>`.
pub fn label_buckets(buckets: &[Bucket], labels: &[EmailLabel]) -> Vec<BucketLabel> {
    let by_email: HashMap<&str, &EmailLabel> = labels.iter().map(|l| (l.email_id.as_str(), l)).collect();
    buckets
        .iter()
        .map(|b| {
            let found = by_email.get(b.template_email_id.as_str()).copied().or_else(|| {
                b.member_ids.iter().find_map(|m| by_email.get(m.as_str()).copied())
            });
            match found {
                Some(l) => BucketLabel {
                    bucket_id: b.id,
                    sextortion: l.is_sextortion(),
                    campaign: if l.campaign.is_empty() {
                        format!("bucket-{}", b.id)
                    } else {
                        l.campaign.clone()
                    },
                },
                None => BucketLabel {
                    bucket_id: b.id,
                    sextortion: true,
                    campaign: format!("bucket-{}", b.id),
                },
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Campaign {
    pub name: String,
    pub bucket_ids: Vec<usize>,
    pub email_count: usize,
}

/// Merges sextortion buckets sharing a campaign name, largest first.
pub fn group_campaigns(buckets: &[Bucket], labels: &[BucketLabel]) -> Vec<Campaign> {
    let sizes: HashMap<usize, usize> = buckets.iter().map(|b| (b.id, b.len())).collect();
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for l in labels.iter().filter(|l| l.sextortion) {
        groups.entry(l.campaign.as_str()).or_default().push(l.bucket_id);
    }
    let mut out: Vec<Campaign> = groups
        .into_iter()
        .map(|(name, mut ids)| {
            ids.sort_unstable();
            Campaign {
                name: name.to_string(),
                email_count: ids.iter().map(|id| sizes.get(id).copied().unwrap_or(0)).sum(),
                bucket_ids: ids,
            }
        })
        .collect();
    out.sort_by(|a, b| b.email_count.cmp(&a.email_count).then(a.name.cmp(&b.name)));
    out
}
