//! Listening-log parsing, session segmentation, vocabulary and the per-user
//! chronological train/test split.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, Write};

use chrono::{DateTime, NaiveDateTime};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::exec;

/// A gap of at least this many seconds ends a session.
pub const SESSION_GAP_SECS: i64 = 7200;
/// Shorter sessions are discarded.
pub const MIN_SESSION_LEN: usize = 5;
/// Joins canonical artist and title into one track key.
pub const KEY_SEPARATOR: char = '\u{241F}';

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ListeningEvent {
    pub user_id: String,
    pub track_key: String,
    /// Seconds since the Unix epoch, UTC.
    pub timestamp: i64,
}

/// Lowercase, trim, and collapse internal whitespace.
pub fn canonicalize(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Canonical key for an (artist, title) pair.
pub fn track_key(artist: &str, title: &str) -> String {
    format!("{}{}{}", canonicalize(artist), KEY_SEPARATOR, canonicalize(title))
}

/// Canonicalizes a key read from a side file: each separator-delimited part
/// is canonicalized, single-part ids are only trimmed.
pub fn canonical_key(raw: &str) -> String {
    match raw.split_once(KEY_SEPARATOR) {
        Some((artist, title)) => track_key(artist, title),
        None => raw.trim().to_string(),
    }
}

/// Accepts RFC 3339 (`2020-01-01T10:00:00Z`) or a naive UTC date-time.
pub fn parse_timestamp(s: &str) -> Option<i64> {
    let s = s.trim();
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.timestamp());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(dt.and_utc().timestamp());
        }
    }
    None
}

pub fn format_timestamp(ts: i64) -> String {
    DateTime::from_timestamp(ts, 0)
        .map(|d| d.format("%Y-%m-%dT%H:%M:%SZ").to_string())
        .unwrap_or_else(|| ts.to_string())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ParseMode {
    /// The first bad record aborts parsing.
    #[default]
    Strict,
    /// Bad records are skipped and reported.
    Lenient,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RecordError {
    pub line: usize,
    pub message: String,
}

#[derive(Clone, Debug, Default)]
pub struct ParsedEvents {
    pub events: Vec<ListeningEvent>,
    pub skipped: Vec<RecordError>,
    pub duplicates: usize,
}

fn parse_record(line: &str) -> std::result::Result<ListeningEvent, String> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 4 {
        return Err(format!("expected 4 tab-separated fields, found {}", fields.len()));
    }
    let user_id = fields[0].trim();
    if user_id.is_empty() {
        return Err("empty user_id".into());
    }
    let track_key = if fields[2].trim().is_empty() {
        fields[1].trim().to_string()
    } else {
        if canonicalize(fields[1]).is_empty() {
            return Err("empty artist field".into());
        }
        track_key(fields[1], fields[2])
    };
    if track_key.is_empty() {
        return Err("empty track field".into());
    }
    let timestamp = parse_timestamp(fields[3])
        .ok_or_else(|| format!("malformed timestamp `{}`", fields[3].trim()))?;
    if timestamp <= 0 {
        return Err(format!("timestamp {} is not after the epoch", timestamp));
    }
    Ok(ListeningEvent {
        user_id: user_id.to_string(),
        track_key,
        timestamp,
    })
}

/// Reads the tab-separated event format. Output is sorted by
/// `(user_id, timestamp)` (file order among ties) with exact duplicates removed.
pub fn parse_events<R: BufRead>(reader: R, mode: ParseMode) -> Result<ParsedEvents> {
    let mut out = ParsedEvents::default();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        if i == 0 && line.split('\t').next().map(str::trim) == Some("user_id") {
            continue;
        }
        match parse_record(line) {
            Ok(ev) => out.events.push(ev),
            Err(message) => match mode {
                ParseMode::Strict => return Err(Error::parse(lineno, message)),
                ParseMode::Lenient => out.skipped.push(RecordError {
                    line: lineno,
                    message,
                }),
            },
        }
    }
    out.events
        .sort_by(|a, b| a.user_id.cmp(&b.user_id).then(a.timestamp.cmp(&b.timestamp)));
    let before = out.events.len();
    let mut seen = HashSet::new();
    out.events.retain(|e| seen.insert(e.clone()));
    out.duplicates = before - out.events.len();
    Ok(out)
}

pub fn write_events<W: Write>(mut w: W, events: &[(String, String, String, i64)]) -> Result<()> {
    writeln!(w, "user_id\tartist\ttitle\ttimestamp")?;
    for (user, artist, title, ts) in events {
        writeln!(w, "{}\t{}\t{}\t{}", user, artist, title, format_timestamp(*ts))?;
    }
    Ok(())
}

/// A contiguous run of one user's events before index assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct EventSession {
    pub user_id: String,
    pub keys: Vec<String>,
    pub timestamps: Vec<i64>,
}

/// Splits one user's time-ordered events wherever the gap reaches
/// [`SESSION_GAP_SECS`] and keeps groups of at least [`MIN_SESSION_LEN`].
pub fn segment_user(events: &[ListeningEvent]) -> Vec<EventSession> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=events.len() {
        let boundary =
            i == events.len() || events[i].timestamp - events[i - 1].timestamp >= SESSION_GAP_SECS;
        if boundary {
            let group = &events[start..i];
            if group.len() >= MIN_SESSION_LEN {
                out.push(EventSession {
                    user_id: group[0].user_id.clone(),
                    keys: group.iter().map(|e| e.track_key.clone()).collect(),
                    timestamps: group.iter().map(|e| e.timestamp).collect(),
                });
            }
            start = i;
        }
    }
    out
}

/// Segments every user's events; users are processed independently.
pub fn extract_sessions(events: &[ListeningEvent]) -> Vec<EventSession> {
    let mut by_user: Vec<&[ListeningEvent]> = Vec::new();
    let mut start = 0;
    for i in 1..=events.len() {
        if i == events.len() || events[i].user_id != events[start].user_id {
            if i > start {
                by_user.push(&events[start..i]);
            }
            start = i;
        }
    }
    exec::map(&by_user, |u| segment_user(u))
        .into_iter()
        .flatten()
        .collect()
}

/// Bijection between track keys and dense indices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Vocabulary {
    keys: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_keys<I: IntoIterator<Item = String>>(keys: I) -> Result<Self> {
        let mut v = Vocabulary::default();
        for k in keys {
            if v.index.contains_key(&k) {
                return Err(Error::Format(format!("duplicate vocabulary key `{}`", k)));
            }
            v.index.insert(k.clone(), v.keys.len());
            v.keys.push(k);
        }
        Ok(v)
    }

    /// Indices assigned in first-seen order over all session events sorted
    /// by timestamp (ties by user id, then position).
    pub fn from_sessions(sessions: &[EventSession]) -> Self {
        let mut order: Vec<(i64, &str, usize, usize)> = Vec::new();
        for (s, sess) in sessions.iter().enumerate() {
            for (p, ts) in sess.timestamps.iter().enumerate() {
                order.push((*ts, &sess.user_id, s, p));
            }
        }
        order.sort();
        let mut v = Vocabulary::default();
        for (_, _, s, p) in order {
            let key = &sessions[s].keys[p];
            if !v.index.contains_key(key) {
                v.index.insert(key.clone(), v.keys.len());
                v.keys.push(key.clone());
            }
        }
        v
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn index_of(&self, key: &str) -> Option<usize> {
        self.index.get(key).copied()
    }

    pub fn key(&self, index: usize) -> Option<&str> {
        self.keys.get(index).map(String::as_str)
    }

    pub fn keys(&self) -> &[String] {
        &self.keys
    }

    /// Short hex digest of the ordered key list.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for k in &self.keys {
            h.update(k.as_bytes());
            h.update([b'\n']);
        }
        hex::encode(&h.finalize()[..8])
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        for (i, k) in self.keys.iter().enumerate() {
            writeln!(w, "{}\t{}", i, k)?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let mut keys = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            let (idx, key) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(i + 1, "expected `index<TAB>key`"))?;
            if idx.parse::<usize>().ok() != Some(i) {
                return Err(Error::parse(i + 1, format!("index `{}` out of order", idx)));
            }
            keys.push(key.to_string());
        }
        Vocabulary::from_keys(keys)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub user_id: String,
    /// Track indices in timestamp order.
    pub tracks: Vec<usize>,
    pub start: i64,
    pub end: i64,
}

impl Session {
    pub fn len(&self) -> usize {
        self.tracks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }
}

/// Sessions and vocabulary derived from a full event log.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub vocab: Vocabulary,
    /// Ordered by user, then start time, then first track index.
    pub sessions: Vec<Session>,
}

impl Dataset {
    pub fn from_events(events: &[ListeningEvent]) -> Self {
        let raw = extract_sessions(events);
        let vocab = Vocabulary::from_sessions(&raw);
        let mut sessions: Vec<Session> = raw
            .iter()
            .map(|s| Session {
                user_id: s.user_id.clone(),
                tracks: s.keys.iter().map(|k| vocab.index[k]).collect(),
                start: s.timestamps[0],
                end: *s.timestamps.last().unwrap(),
            })
            .collect();
        sort_sessions(&mut sessions);
        Dataset { vocab, sessions }
    }
}

fn sort_sessions(sessions: &mut [Session]) {
    sessions.sort_by(|a, b| {
        a.user_id
            .cmp(&b.user_id)
            .then(a.start.cmp(&b.start))
            .then(a.tracks.first().cmp(&b.tracks.first()))
    });
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UserSplit {
    pub user_id: String,
    pub train: Vec<Session>,
    pub test: Vec<Session>,
}

/// Chronological per-user split.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    /// Sorted by user id.
    pub users: Vec<UserSplit>,
}

impl DatasetSplit {
    pub fn train_sessions(&self) -> impl Iterator<Item = &Session> {
        self.users.iter().flat_map(|u| u.train.iter())
    }

    pub fn test_sessions(&self) -> impl Iterator<Item = &Session> {
        self.users.iter().flat_map(|u| u.test.iter())
    }

    /// Restricts the split to the given users.
    pub fn filter_users(&self, keep: &HashSet<String>) -> DatasetSplit {
        DatasetSplit {
            users: self
                .users
                .iter()
                .filter(|u| keep.contains(&u.user_id))
                .cloned()
                .collect(),
        }
    }

    /// Tracks appearing in at least one training session.
    pub fn train_track_mask(&self, vocab_size: usize) -> Vec<bool> {
        let mut seen = vec![false; vocab_size];
        for s in self.train_sessions() {
            for &t in &s.tracks {
                seen[t] = true;
            }
        }
        seen
    }
}

/// Number of training sessions for a user with `n` sessions.
pub fn train_count(n: usize) -> usize {
    if n < 2 {
        n
    } else {
        // floor(0.7 n) in exact integer arithmetic
        7 * n / 10
    }
}

/// First `floor(0.7 n)` sessions of each user train, the rest test.
pub fn split_train_test(sessions: &[Session]) -> DatasetSplit {
    let mut by_user: BTreeMap<&str, Vec<Session>> = BTreeMap::new();
    for s in sessions {
        by_user.entry(&s.user_id).or_default().push(s.clone());
    }
    let users = by_user
        .into_iter()
        .map(|(user, mut list)| {
            sort_sessions(&mut list);
            let test = list.split_off(train_count(list.len()));
            UserSplit {
                user_id: user.to_string(),
                train: list,
                test,
            }
        })
        .collect();
    DatasetSplit { users }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub users: usize,
    pub sessions: usize,
    pub unique_tracks: usize,
    pub events: usize,
    pub mean_session_length: f64,
}

/// Counts over kept sessions only.
pub fn compute_stats<'a, I: IntoIterator<Item = &'a Session>>(sessions: I) -> DatasetStats {
    let mut users = HashSet::new();
    let mut tracks = HashSet::new();
    let mut count = 0;
    let mut events = 0;
    for s in sessions {
        users.insert(s.user_id.as_str());
        tracks.extend(s.tracks.iter().copied());
        count += 1;
        events += s.len();
    }
    DatasetStats {
        users: users.len(),
        sessions: count,
        unique_tracks: tracks.len(),
        events,
        mean_session_length: if count == 0 {
            0.0
        } else {
            events as f64 / count as f64
        },
    }
}

impl DatasetStats {
    pub fn render(&self) -> String {
        format!(
            "Number of Users              {}\n\
             Number of Sessions           {}\n\
             Unique Songs                 {}\n\
             Logs (Total Listening Events) {}\n\
             Average Length of Session    {:.2}\n",
            self.users, self.sessions, self.unique_tracks, self.events, self.mean_session_length
        )
    }
}

/// `user<TAB>start<TAB>end<TAB>idx idx ...`, one session per line.
pub fn write_sessions<'a, W: Write, I: IntoIterator<Item = &'a Session>>(
    mut w: W,
    sessions: I,
) -> Result<()> {
    for s in sessions {
        let tracks: Vec<String> = s.tracks.iter().map(usize::to_string).collect();
        writeln!(w, "{}\t{}\t{}\t{}", s.user_id, s.start, s.end, tracks.join(" "))?;
    }
    Ok(())
}

pub fn read_sessions<R: BufRead>(r: R) -> Result<Vec<Session>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let bad = |m: &str| Error::parse(i + 1, m.to_string());
        if f.len() != 4 {
            return Err(bad("expected 4 fields"));
        }
        let tracks = f[3]
            .split(' ')
            .map(|t| t.parse::<usize>().map_err(|_| bad("bad track index")))
            .collect::<Result<Vec<_>>>()?;
        out.push(Session {
            user_id: f[0].to_string(),
            start: f[1].parse().map_err(|_| bad("bad start"))?,
            end: f[2].parse().map_err(|_| bad("bad end"))?,
            tracks,
        });
    }
    Ok(out)
}
