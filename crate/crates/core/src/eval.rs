//! HitRatio@k over next-track prediction events, cohort breakdowns and
//! report rendering.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::fusion::{top_k, FusionModel};
use crate::numerics::SeededRng;
use crate::sessions::{DatasetSplit, Session};

pub const DEFAULT_KS: [usize; 5] = [10, 20, 30, 40, 50];

/// One `(prefix, next track)` question asked of a ranker.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PredictionTask<'a> {
    pub user_id: &'a str,
    /// Ordinal of the session among the same user's evaluated sessions.
    pub session: usize,
    pub prefix: &'a [usize],
    pub target: usize,
}

/// Every within-session prefix of every session, in order.
pub fn session_prefixes<'a, I>(sessions: I) -> Vec<PredictionTask<'a>>
where
    I: IntoIterator<Item = &'a Session>,
{
    let mut out = Vec::new();
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    for s in sessions {
        let counter = seen.entry(&s.user_id).or_insert(0);
        let sid = *counter;
        *counter += 1;
        for t in 1..s.tracks.len() {
            out.push(PredictionTask {
                user_id: &s.user_id,
                session: sid,
                prefix: &s.tracks[..t],
                target: s.tracks[t],
            });
        }
    }
    out
}

/// Prediction tasks from the test half of a split.
pub fn iterate_test_prefixes(split: &DatasetSplit) -> Vec<PredictionTask<'_>> {
    session_prefixes(split.test_sessions())
}

/// Anything that can produce a ranked top-k list for a task.
pub trait Ranker: Sync {
    fn vocab_size(&self) -> usize;
    fn rank(&self, task: &PredictionTask<'_>, k: usize) -> Result<Vec<usize>>;
}

impl Ranker for FusionModel {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn rank(&self, task: &PredictionTask<'_>, k: usize) -> Result<Vec<usize>> {
        self.predict_topk(task.prefix, k)
    }
}

/// Scores every track uniformly at random; the draw depends only on the seed
/// and the task, so results do not depend on evaluation order.
#[derive(Clone, Debug)]
pub struct UniformRanker {
    pub vocab_size: usize,
    pub seed: u64,
}

impl Ranker for UniformRanker {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn rank(&self, task: &PredictionTask<'_>, k: usize) -> Result<Vec<usize>> {
        if k > self.vocab_size {
            return Err(Error::InvalidArgument(format!(
                "k = {} exceeds vocabulary size {}",
                k, self.vocab_size
            )));
        }
        let user = crate::numerics::derive_seed(self.seed, task.user_id);
        let mut rng = SeededRng::keyed(user, &[task.session as u64, task.prefix.len() as u64]);
        let scores: Vec<f64> = (0..self.vocab_size).map(|_| rng.unit()).collect();
        Ok(top_k(&scores, k))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionEvent {
    pub user_id: String,
    pub session: usize,
    pub prefix_len: usize,
    pub target: usize,
    /// Parallel to the evaluated `ks`.
    pub hits: Vec<bool>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Averaging {
    /// Pool every prediction event.
    #[default]
    Micro,
    /// Average per-user ratios.
    Macro,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HitRatioReport {
    pub label: String,
    pub cohort: Option<String>,
    /// Ascending.
    pub ks: Vec<usize>,
    pub hits: Vec<usize>,
    pub total: usize,
    pub ratios: Vec<f64>,
}

impl HitRatioReport {
    pub fn ratio_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.ratios[i])
    }

    pub fn is_monotone(&self) -> bool {
        self.ratios.windows(2).all(|w| w[0] <= w[1])
    }
}

fn normalized_ks(ks: &[usize]) -> Result<Vec<usize>> {
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    if ks.is_empty() || ks[0] == 0 {
        return Err(Error::InvalidArgument("ks must be non-empty and positive".into()));
    }
    Ok(ks)
}

/// Ranks every task once at the largest `k` and records membership per `k`.
pub fn evaluate_events<R: Ranker + ?Sized>(
    ranker: &R,
    tasks: &[PredictionTask<'_>],
    ks: &[usize],
) -> Result<Vec<PredictionEvent>> {
    let ks = normalized_ks(ks)?;
    let kmax = *ks.last().unwrap();
    let mut events = exec::map(tasks, |task| -> Result<PredictionEvent> {
        let top = ranker.rank(task, kmax)?;
        let pos = top.iter().position(|&t| t == task.target);
        Ok(PredictionEvent {
            user_id: task.user_id.to_string(),
            session: task.session,
            prefix_len: task.prefix.len(),
            target: task.target,
            hits: ks.iter().map(|&k| pos.is_some_and(|p| p < k)).collect(),
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    events.sort_by(|a, b| {
        (a.user_id.as_str(), a.session, a.prefix_len).cmp(&(b.user_id.as_str(), b.session, b.prefix_len))
    });
    Ok(events)
}

/// Aggregates events into a report.
pub fn summarize(
    label: &str,
    events: &[PredictionEvent],
    ks: &[usize],
    averaging: Averaging,
) -> Result<HitRatioReport> {
    let ks = normalized_ks(ks)?;
    if events.is_empty() {
        return Err(Error::Empty(format!("no prediction events for `{}`", label)));
    }
    let mut hits = vec![0usize; ks.len()];
    for e in events {
        for (h, &hit) in hits.iter_mut().zip(&e.hits) {
            *h += hit as usize;
        }
    }
    let total = events.len();
    let ratios = match averaging {
        Averaging::Micro => hits.iter().map(|&h| h as f64 / total as f64).collect(),
        Averaging::Macro => {
            let mut per_user: BTreeMap<&str, (Vec<usize>, usize)> = BTreeMap::new();
            for e in events {
                let entry = per_user
                    .entry(&e.user_id)
                    .or_insert_with(|| (vec![0; ks.len()], 0));
                entry.1 += 1;
                for (h, &hit) in entry.0.iter_mut().zip(&e.hits) {
                    *h += hit as usize;
                }
            }
            let users = per_user.len() as f64;
            (0..ks.len())
                .map(|i| {
                    per_user
                        .values()
                        .map(|(h, n)| h[i] as f64 / *n as f64)
                        .sum::<f64>()
                        / users
                })
                .collect()
        }
    };
    Ok(HitRatioReport {
        label: label.to_string(),
        cohort: None,
        ks,
        hits,
        total,
        ratios,
    })
}

pub fn evaluate_hit_ratio<R: Ranker + ?Sized>(
    ranker: &R,
    tasks: &[PredictionTask<'_>],
    ks: &[usize],
    averaging: Averaging,
    label: &str,
) -> Result<HitRatioReport> {
    let events = evaluate_events(ranker, tasks, ks)?;
    summarize(label, &events, ks, averaging)
}

/// Integer distress scores keyed by user.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct UserMetadata {
    pub scores: BTreeMap<String, u32>,
}

/// Reads `user_id,k10_score`; scores must be integers in `[10, 50]`.
pub fn read_user_metadata<R: Read>(reader: R) -> Result<UserMetadata> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers().map_err(|e| Error::parse(1, e.to_string()))?;
    if headers.iter().map(str::trim).collect::<Vec<_>>() != ["user_id", "k10_score"] {
        return Err(Error::parse(1, "expected header `user_id,k10_score`"));
    }
    let mut scores = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::parse(line, e.to_string()))?;
        let user = rec.get(0).unwrap_or("").trim();
        if user.is_empty() {
            return Err(Error::parse(line, "empty user_id"));
        }
        let raw = rec.get(1).unwrap_or("").trim();
        let score: u32 = raw
            .parse()
            .map_err(|_| Error::parse(line, format!("bad score `{}`", raw)))?;
        if !(10..=50).contains(&score) {
            return Err(Error::parse(line, format!("score {} outside [10, 50]", score)));
        }
        if scores.insert(user.to_string(), score).is_some() {
            return Err(Error::parse(line, format!("duplicate user `{}`", user)));
        }
    }
    Ok(UserMetadata { scores })
}

pub fn write_user_metadata<W: std::io::Write>(mut w: W, meta: &UserMetadata) -> Result<()> {
    writeln!(w, "user_id,k10_score")?;
    for (u, s) in &meta.scores {
        writeln!(w, "{},{}", u, s)?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CohortRule {
    AtLeast(u32),
    Below(u32),
}

impl CohortRule {
    pub fn matches(self, score: u32) -> bool {
        match self {
            CohortRule::AtLeast(t) => score >= t,
            CohortRule::Below(t) => score < t,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cohort {
    pub label: String,
    pub rule: CohortRule,
    /// Keep only the first `n` members by descending score.
    pub top_n: Option<usize>,
}

pub const AT_RISK_MIN: u32 = 29;
pub const NO_RISK_BELOW: u32 = 20;

impl Cohort {
    pub fn at_risk() -> Self {
        Cohort {
            label: "At-risk".into(),
            rule: CohortRule::AtLeast(AT_RISK_MIN),
            top_n: None,
        }
    }

    pub fn no_risk() -> Self {
        Cohort {
            label: "No-risk".into(),
            rule: CohortRule::Below(NO_RISK_BELOW),
            top_n: None,
        }
    }

    pub fn with_top_n(mut self, n: usize) -> Self {
        self.top_n = Some(n);
        self
    }

    /// Matching users by descending score, ties by user id.
    pub fn members(&self, meta: &UserMetadata) -> Vec<String> {
        let mut users: Vec<(&String, u32)> = meta
            .scores
            .iter()
            .filter(|(_, &s)| self.rule.matches(s))
            .map(|(u, &s)| (u, s))
            .collect();
        users.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        if let Some(n) = self.top_n {
            users.truncate(n);
        }
        users.into_iter().map(|(u, _)| u.clone()).collect()
    }
}

/// Restricts a split to a cohort's members.
pub fn cohort_split(split: &DatasetSplit, cohort: &Cohort, meta: &UserMetadata) -> Result<DatasetSplit> {
    let members: HashSet<String> = cohort.members(meta).into_iter().collect();
    let sub = split.filter_users(&members);
    if sub.users.is_empty() {
        return Err(Error::Empty(format!("cohort `{}` has no evaluated users", cohort.label)));
    }
    Ok(sub)
}

/// Per-cohort reports. Each cohort is scored by its own ranker and yields its
/// own error, so one empty cohort does not hide the others.
pub fn cohort_evaluate<R: Ranker + ?Sized>(
    cohorts: &[(Cohort, &R)],
    split: &DatasetSplit,
    meta: &UserMetadata,
    ks: &[usize],
    label: &str,
) -> Vec<(String, Result<HitRatioReport>)> {
    cohorts
        .iter()
        .map(|(cohort, ranker)| {
            let result = cohort_split(split, cohort, meta).and_then(|sub| {
                let tasks = iterate_test_prefixes(&sub);
                let mut r = evaluate_hit_ratio(*ranker, &tasks, ks, Averaging::Micro, label)?;
                r.cohort = Some(cohort.label.clone());
                Ok(r)
            });
            (cohort.label.clone(), result)
        })
        .collect()
}

/// Percentage with two decimals.
pub fn format_ratio(ratio: f64) -> String {
    format!("{:.2}", ratio * 100.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub label: String,
    pub cohort: Option<String>,
    pub k: usize,
    pub hits: usize,
    pub total: usize,
    pub ratio: f64,
}

/// Text table plus one JSON record per line and `(report, k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedReport {
    pub table: String,
    pub records: String,
}

pub fn render_report(reports: &[HitRatioReport]) -> RenderedReport {
    let mut ks: Vec<usize> = reports.iter().flat_map(|r| r.ks.iter().copied()).collect();
    ks.sort_unstable();
    ks.dedup();
    let row_label = |r: &HitRatioReport| match &r.cohort {
        Some(c) => format!("{} [{}]", r.label, c),
        None => r.label.clone(),
    };
    let width = reports
        .iter()
        .map(|r| row_label(r).len())
        .chain(std::iter::once(6))
        .max()
        .unwrap_or(6);
    let mut table = format!("{:<width$}", "Method");
    for k in &ks {
        let _ = write!(table, " | {:>6}", format!("k={k}"));
    }
    table.push('\n');
    table.push_str(&"-".repeat(width + ks.len() * 9));
    table.push('\n');
    let mut records = String::new();
    for r in reports {
        let _ = write!(table, "{:<width$}", row_label(r));
        for k in &ks {
            let cell = r.ratio_at(*k).map(format_ratio).unwrap_or_else(|| "-".into());
            let _ = write!(table, " | {:>6}", cell);
        }
        table.push('\n');
        for (i, &k) in r.ks.iter().enumerate() {
            let rec = ReportRecord {
                label: r.label.clone(),
                cohort: r.cohort.clone(),
                k,
                hits: r.hits[i],
                total: r.total,
                ratio: r.ratios[i],
            };
            records.push_str(&serde_json::to_string(&rec).expect("plain record"));
            records.push('\n');
        }
    }
    RenderedReport { table, records }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn session(user: &str, tracks: &[usize]) -> Session {
        Session {
            user_id: user.into(),
            tracks: tracks.to_vec(),
            start: 0,
            end: 0,
        }
    }

    /// Fixed ranking lists per target, for hand-built fixtures.
    struct TableRanker {
        vocab: usize,
        lists: BTreeMap<usize, Vec<usize>>,
    }

    impl Ranker for TableRanker {
        fn vocab_size(&self) -> usize {
            self.vocab
        }
        fn rank(&self, task: &PredictionTask<'_>, k: usize) -> Result<Vec<usize>> {
            let mut l = self.lists[task.prefix.last().unwrap()].clone();
            l.truncate(k);
            Ok(l)
        }
    }

    struct Oracle;
    impl Ranker for Oracle {
        fn vocab_size(&self) -> usize {
            100
        }
        fn rank(&self, task: &PredictionTask<'_>, k: usize) -> Result<Vec<usize>> {
            let mut v = vec![task.target];
            v.extend((0..100).filter(|&t| t != task.target).take(k - 1));
            Ok(v)
        }
    }

    #[test]
    fn prefix_counts() {
        assert_eq!(session_prefixes(&[session("u", &[1, 2, 3, 4, 5])]).len(), 4);
        assert_eq!(session_prefixes(&[session("u", &[1, 2])]).len(), 1);
        let two = [session("u", &[1, 2, 3, 4, 5]), session("v", &[1, 2, 3, 4, 5, 6])];
        let tasks = session_prefixes(&two);
        assert_eq!(tasks.len(), 9);
        assert_eq!(tasks[4].prefix, &[1]);
        assert_eq!(tasks[4].target, 2);
        assert_eq!(tasks[4].session, 0);
        let same_user = [session("u", &[1, 2]), session("u", &[3, 4])];
        assert_eq!(session_prefixes(&same_user)[1].session, 1);
    }

    #[test]
    fn perfect_ranker_scores_one() {
        let s = [session("u", &[1, 2, 3, 4, 5, 6])];
        let r = evaluate_hit_ratio(&Oracle, &session_prefixes(&s), &DEFAULT_KS, Averaging::Micro, "o").unwrap();
        assert_eq!(r.ratios, vec![1.0; 5]);
        assert!(evaluate_hit_ratio(&Oracle, &[], &DEFAULT_KS, Averaging::Micro, "o").is_err());
    }

    #[test]
    fn hand_built_fixture() {
        // Six events; rank lists keyed by the last prefix track.
        let lists = BTreeMap::from([
            (0, vec![1, 2, 3]),
            (1, vec![3, 2, 1]),
            (2, vec![0, 1, 3]),
            (3, vec![2, 0, 1]),
        ]);
        let ranker = TableRanker { vocab: 4, lists };
        let s = [session("a", &[0, 1, 2, 3]), session("b", &[2, 0, 3, 1])];
        // events: 0->1 (pos 0), 1->2 (pos 1), 2->3 (pos 2), 2->0 (pos 0), 0->3 (pos 2), 3->1 (pos 2)
        let r = evaluate_hit_ratio(&ranker, &session_prefixes(&s), &[1, 2, 3], Averaging::Micro, "t").unwrap();
        assert_eq!(r.total, 6);
        assert_eq!(r.hits, vec![2, 3, 6]);
        let m = evaluate_hit_ratio(&ranker, &session_prefixes(&s), &[1, 2, 3], Averaging::Macro, "t").unwrap();
        assert!((m.ratios[0] - (1.0 / 3.0 + 1.0 / 3.0) / 2.0).abs() < 1e-15);
        assert!((m.ratios[1] - (2.0 / 3.0 + 1.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn uniform_ranker_is_calibrated_and_order_free() {
        let mut rng = SeededRng::new(1);
        let sessions: Vec<Session> = (0..400)
            .map(|i| session(&format!("u{}", i % 40), &(0..30).map(|_| rng.index(1000)).collect::<Vec<_>>()))
            .collect();
        let tasks = session_prefixes(&sessions);
        assert!(tasks.len() >= 10_000);
        let ranker = UniformRanker { vocab_size: 1000, seed: 3 };
        let r = evaluate_hit_ratio(&ranker, &tasks, &DEFAULT_KS, Averaging::Micro, "rand").unwrap();
        assert!((r.ratios[0] - 0.01).abs() <= 0.005, "{r:?}");
        assert!(r.is_monotone());
        let mut rev = tasks.clone();
        rev.reverse();
        let r2 = evaluate_hit_ratio(&ranker, &rev, &DEFAULT_KS, Averaging::Micro, "rand").unwrap();
        assert_eq!(r.hits, r2.hits);
    }

    #[test]
    fn cohort_rules_and_truncation() {
        let meta = read_user_metadata("user_id,k10_score\na,29\nb,19\nc,35\nd,24\ne,10\n".as_bytes()).unwrap();
        assert_eq!(Cohort::at_risk().members(&meta), vec!["c", "a"]);
        assert_eq!(Cohort::no_risk().members(&meta), vec!["b", "e"]);
        assert_eq!(Cohort::no_risk().with_top_n(1).members(&meta), vec!["b"]);
        assert!(read_user_metadata("user_id,k10_score\na,51\n".as_bytes()).is_err());
        assert!(matches!(
            read_user_metadata("user_id,k10_score\na,20\nb,x\n".as_bytes()),
            Err(Error::Parse { line: 3, .. })
        ));
        let mut buf = Vec::new();
        write_user_metadata(&mut buf, &meta).unwrap();
        assert_eq!(read_user_metadata(buf.as_slice()).unwrap(), meta);
    }

    #[test]
    fn cohort_errors_are_per_cohort_and_hits_pool() {
        let meta = read_user_metadata("user_id,k10_score\na,40\nb,12\n".as_bytes()).unwrap();
        let split = crate::sessions::split_train_test(&[
            session("a", &[1, 2, 3, 4, 5]),
            session("a", &[2, 3, 4, 5, 6]),
            session("b", &[7, 8, 9, 1, 2]),
            session("b", &[3, 3, 4, 9, 9]),
        ]);
        let ranker = UniformRanker { vocab_size: 10, seed: 1 };
        let nobody = Cohort {
            label: "none".into(),
            rule: CohortRule::AtLeast(60),
            top_n: None,
        };
        let out = cohort_evaluate(
            &[(Cohort::at_risk(), &ranker), (Cohort::no_risk(), &ranker), (nobody, &ranker)],
            &split,
            &meta,
            &[1, 5],
            "rand",
        );
        assert!(out[2].1.is_err());
        let a = out[0].1.as_ref().unwrap();
        let b = out[1].1.as_ref().unwrap();
        assert_eq!(a.cohort.as_deref(), Some("At-risk"));
        let pooled = evaluate_hit_ratio(&ranker, &iterate_test_prefixes(&split), &[1, 5], Averaging::Micro, "rand").unwrap();
        assert_eq!(pooled.total, a.total + b.total);
        for i in 0..2 {
            assert_eq!(pooled.hits[i], a.hits[i] + b.hits[i]);
        }
    }

    #[test]
    fn rendering() {
        let r = HitRatioReport {
            label: "ANNW".into(),
            cohort: None,
            ks: vec![10, 20],
            hits: vec![3317, 4000],
            total: 10000,
            ratios: vec![0.3317, 0.4],
        };
        let out = render_report(&[r.clone()]);
        let lines: Vec<&str> = out.table.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].find("k=10").unwrap() < lines[0].find("k=20").unwrap());
        assert!(lines[2].contains("33.17") && lines[2].contains("40.00"));
        assert_eq!(out.records.lines().count(), 2);
        let rec: ReportRecord = serde_json::from_str(out.records.lines().next().unwrap()).unwrap();
        assert_eq!((rec.k, rec.hits, rec.total), (10, 3317, 10000));
        assert_eq!(format_ratio(0.3317), "33.17");
    }

    proptest::proptest! {
        #[test]
        fn matches_brute_force(seed in 0u64..1000, n in 1usize..100) {
            let mut rng = SeededRng::new(seed);
            let vocab = 60;
            let sessions = vec![session("u", &(0..=n).map(|_| rng.index(vocab)).collect::<Vec<_>>())];
            let tasks = session_prefixes(&sessions);
            let ranker = UniformRanker { vocab_size: vocab, seed };
            let ks = [1, 5, 10, 30];
            let r = evaluate_hit_ratio(&ranker, &tasks, &ks, Averaging::Micro, "p").unwrap();
            for (i, &k) in ks.iter().enumerate() {
                let brute = tasks.iter().filter(|t| ranker.rank(t, k).unwrap().contains(&t.target)).count();
                proptest::prop_assert_eq!(r.hits[i], brute);
            }
            proptest::prop_assert!(r.is_monotone());
        }
    }
}
