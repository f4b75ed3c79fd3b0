//! Train/test splitting with a date cutoff, one test record per origin and n-gram overlap removal.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::ted_tokens;
use crate::normalize::document_body;
use crate::record::{Split, TikZRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitPolicy {
    /// Records dated strictly after this day are test candidates.
    pub test_after_date: NaiveDate,
    pub ngram_n: usize,
    /// Fraction of a test record's n-grams a train record must share to be flagged;
    /// `None` flags any shared n-gram.
    pub token_overlap_threshold: Option<f64>,
    pub one_per_origin: bool,
    /// Optional cap on the test split, filled by seeded sampling.
    pub test_size: Option<usize>,
    pub seed: u64,
}

impl Default for SplitPolicy {
    fn default() -> Self {
        SplitPolicy {
            test_after_date: NaiveDate::from_ymd_opt(2025, 5, 31).expect("valid date"),
            ngram_n: 8,
            token_overlap_threshold: None,
            one_per_origin: true,
            test_size: None,
            seed: 0,
        }
    }
}

impl SplitPolicy {
    pub fn problems(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if self.ngram_n < 2 {
            problems.push("split.ngram_n must be >= 2".to_string());
        }
        if let Some(t) = self.token_overlap_threshold {
            if !(t > 0.0 && t <= 1.0) {
                problems.push("split.token_overlap_threshold must lie in (0, 1]".to_string());
            }
        }
        problems
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlaggedPair {
    pub test_id: String,
    pub train_id: String,
    pub shared_ngram_count: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContaminationReport {
    pub flagged_pairs: Vec<FlaggedPair>,
    pub removed_from_train: BTreeSet<String>,
    pub removed_from_test: BTreeSet<String>,
}

/// `(train_candidates, test_candidates)`; undated records are train-only.
pub fn date_split(records: Vec<TikZRecord>, policy: &SplitPolicy) -> (Vec<TikZRecord>, Vec<TikZRecord>) {
    records
        .into_iter()
        .partition(|r| !r.date.is_some_and(|d| d > policy.test_after_date))
}

/// Keeps the lowest record_id per origin as the test representative and removes every
/// other record of that origin from both sides. Returns `(test, train, removed)`.
pub fn enforce_origin_uniqueness(
    test_candidates: Vec<TikZRecord>,
    train: Vec<TikZRecord>,
    policy: &SplitPolicy,
) -> (Vec<TikZRecord>, Vec<TikZRecord>, Vec<TikZRecord>) {
    if !policy.one_per_origin {
        return (test_candidates, train, Vec::new());
    }
    let mut by_origin: BTreeMap<String, Vec<TikZRecord>> = BTreeMap::new();
    for r in test_candidates {
        by_origin.entry(r.origin_key.clone()).or_default().push(r);
    }
    let mut test = Vec::new();
    let mut removed = Vec::new();
    for (_, mut group) in by_origin {
        group.sort_by(|a, b| a.record_id.cmp(&b.record_id));
        let mut it = group.into_iter();
        test.extend(it.next());
        removed.extend(it);
    }
    let test_origins: HashSet<&str> = test.iter().map(|r| r.origin_key.as_str()).collect();
    let (clash, train): (Vec<_>, Vec<_>) = train
        .into_iter()
        .partition(|r| test_origins.contains(r.origin_key.as_str()));
    removed.extend(clash);
    (test, train, removed)
}

/// Tokens outside the standalone wrapper lines.
fn content_tokens(code: &str) -> Vec<String> {
    ted_tokens(document_body(code).unwrap_or(code))
}

/// Distinct n-grams of the record body, each joined into one key.
pub fn ngrams(code: &str, n: usize) -> HashSet<String> {
    content_tokens(code)
        .windows(n)
        .map(|w| w.join("\u{1f}"))
        .collect()
}

/// Flags train records overlapping any test record and lists them for removal.
pub fn ngram_filter(test: &[TikZRecord], train: &[TikZRecord], policy: &SplitPolicy) -> ContaminationReport {
    let n = policy.ngram_n;
    let test_grams: Vec<HashSet<String>> = test.par_iter().map(|r| ngrams(&r.code, n)).collect();
    let mut index: HashMap<&str, Vec<usize>> = HashMap::new();
    for (ti, grams) in test_grams.iter().enumerate() {
        for g in grams {
            index.entry(g.as_str()).or_default().push(ti);
        }
    }

    let mut flagged: Vec<FlaggedPair> = train
        .par_iter()
        .flat_map_iter(|tr| {
            let mut shared: BTreeMap<usize, usize> = BTreeMap::new();
            for g in ngrams(&tr.code, n) {
                if let Some(tis) = index.get(g.as_str()) {
                    for &ti in tis {
                        *shared.entry(ti).or_default() += 1;
                    }
                }
            }
            shared
                .into_iter()
                .filter(|&(ti, count)| match policy.token_overlap_threshold {
                    None => count > 0,
                    Some(t) => count as f64 >= t * test_grams[ti].len().max(1) as f64,
                })
                .map(|(ti, count)| FlaggedPair {
                    test_id: test[ti].record_id.clone(),
                    train_id: tr.record_id.clone(),
                    shared_ngram_count: count,
                })
                .collect::<Vec<_>>()
        })
        .collect();
    flagged.sort_by(|a, b| (&a.test_id, &a.train_id).cmp(&(&b.test_id, &b.train_id)));
    ContaminationReport {
        removed_from_train: flagged.iter().map(|p| p.train_id.clone()).collect(),
        removed_from_test: BTreeSet::new(),
        flagged_pairs: flagged,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Splits {
    pub train: Vec<TikZRecord>,
    pub test: Vec<TikZRecord>,
    pub quarantine: Vec<TikZRecord>,
    pub report: ContaminationReport,
}

fn mark(mut records: Vec<TikZRecord>, split: Split) -> Vec<TikZRecord> {
    for r in &mut records {
        *r = r.next_version("split");
        r.split = Some(split);
    }
    records.sort_by(|a, b| a.record_id.cmp(&b.record_id));
    records
}

/// Full split: date cutoff, test eligibility (compiled and described), per-origin
/// uniqueness, optional seeded test sampling, then n-gram decontamination of train.
pub fn build_splits(records: Vec<TikZRecord>, policy: &SplitPolicy) -> Result<Splits> {
    policy.validate()?;
    let (mut train, candidates) = date_split(records, policy);
    let (eligible, ineligible): (Vec<_>, Vec<_>) = candidates
        .into_iter()
        .partition(|r| r.is_compiled() && r.description.is_some());
    train.extend(ineligible);

    let (mut test, train, mut quarantine) = {
        let mut eligible = eligible;
        eligible.sort_by(|a, b| a.record_id.cmp(&b.record_id));
        enforce_origin_uniqueness(eligible, train, policy)
    };

    let mut train = train;
    if let Some(size) = policy.test_size {
        if test.len() > size {
            test.sort_by(|a, b| a.record_id.cmp(&b.record_id));
            let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
            test.shuffle(&mut rng);
            let dropped = test.split_off(size);
            // the sampled-out representatives no longer claim their origin
            train.extend(dropped);
        }
    }
    test.sort_by(|a, b| a.record_id.cmp(&b.record_id));
    train.sort_by(|a, b| a.record_id.cmp(&b.record_id));

    let report = ngram_filter(&test, &train, policy);
    let (flagged, train): (Vec<_>, Vec<_>) = train
        .into_iter()
        .partition(|r| report.removed_from_train.contains(&r.record_id));
    quarantine.extend(flagged);

    Ok(Splits {
        train: mark(train, Split::Train),
        test: mark(test, Split::Test),
        quarantine: mark(quarantine, Split::Quarantine),
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::{CompileStatus, License, SourceKind, SourceMeta};

    fn rec(id: &str, origin: &str, date: Option<(i32, u32, u32)>, body: &str) -> TikZRecord {
        let meta = SourceMeta {
            source_kind: SourceKind::Arxiv,
            origin_key: origin.into(),
            license: License::PermissiveCc,
            date: date.map(|(y, m, d)| NaiveDate::from_ymd_opt(y, m, d).unwrap()),
        };
        let code = crate::normalize::wrap_standalone(body, &[]).code;
        let mut r = TikZRecord::new(id, &meta, code);
        r.compile_status = Some(CompileStatus::Ok);
        r.description = Some("d".into());
        r
    }

    fn cutoff() -> SplitPolicy {
        SplitPolicy {
            test_after_date: NaiveDate::from_ymd_opt(2025, 5, 31).unwrap(),
            ..Default::default()
        }
    }

    #[test]
    fn date_boundaries() {
        let rs = vec![
            rec("a", "o1", Some((2025, 6, 1)), "x"),
            rec("b", "o2", None, "x"),
            rec("c", "o3", Some((2025, 5, 31)), "x"),
        ];
        let (train, test) = date_split(rs, &cutoff());
        assert_eq!(test.iter().map(|r| r.record_id.as_str()).collect::<Vec<_>>(), ["a"]);
        assert_eq!(train.len(), 2);
    }

    #[test]
    fn origin_uniqueness_removes_siblings() {
        let test = vec![rec("p1-b", "paper1", Some((2025, 7, 1)), "x"), rec("p1-a", "paper1", Some((2025, 7, 1)), "y")];
        let train = vec![rec("p1-c", "paper1", None, "z"), rec("q", "paper2", None, "w")];
        let (t, tr, removed) = enforce_origin_uniqueness(test, train, &cutoff());
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].record_id, "p1-a");
        assert_eq!(tr.iter().map(|r| r.record_id.as_str()).collect::<Vec<_>>(), ["q"]);
        assert_eq!(removed.len(), 2);
    }

    #[test]
    fn ngram_flags_and_whitelist() {
        let draw = "\\draw[thick] (0,0) -- (1,1) -- (2,0);";
        let test = vec![rec("t", "o1", Some((2025, 7, 1)), draw)];
        let train = vec![
            rec("same", "o2", None, draw),
            rec("wrapper-only", "o3", None, "Q"),
            rec("partial", "o4", None, &format!("\\fill (5,5) circle (1); {draw}")),
        ];
        let report = ngram_filter(&test, &train, &cutoff());
        assert_eq!(
            report.removed_from_train.iter().map(String::as_str).collect::<Vec<_>>(),
            ["partial", "same"]
        );
    }

    #[test]
    fn splits_are_deterministic_and_valid() {
        let mut rs = Vec::new();
        for i in 0..30 {
            let date = if i % 3 == 0 { Some((2025, 8, 1)) } else { Some((2024, 1, 1)) };
            rs.push(rec(&format!("r{i:02}"), &format!("o{}", i % 7), date, &format!("\\node at ({i},{}) {{n{i}}};", i * 3)));
        }
        let a = build_splits(rs.clone(), &cutoff()).unwrap();
        let b = build_splits(rs, &cutoff()).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let origins: HashSet<&str> = a.test.iter().map(|r| r.origin_key.as_str()).collect();
        assert_eq!(origins.len(), a.test.len());
        for r in a.test.iter().chain(&a.train) {
            r.validate().unwrap();
        }
    }

    #[test]
    fn policy_validation() {
        let p = SplitPolicy {
            ngram_n: 1,
            token_overlap_threshold: Some(0.0),
            ..Default::default()
        };
        assert_eq!(p.problems().len(), 2);
    }
}
