//! Event-log data model, NDJSON ingestion and per-user timelines.
//!
//! A log is one JSON object per line, tagged by `type`:
//!
//! ```text
//! {"type":"window","user_id":"u1","t_start":0,"t_end":86400}
//! {"type":"bid","user_id":"u1","t_j":12.5,"ghost_bid_g":0.1,"submitted_B":true,...}
//! {"type":"conversion","user_id":"u1","t_c":400,"value_v":50,"margin_m":0.3}
//! {"type":"retarget","user_id":"u1","t_r":3.0,"event_kind":"homepage"}
//! ```

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use flate2::read::MultiGzDecoder;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BidEvent {
    pub user_id: String,
    pub t_j: f64,
    /// Intended bid g_j.
    #[serde(rename = "ghost_bid_g")]
    pub ghost_bid: f64,
    /// Randomized intention to submit, B_j.
    #[serde(rename = "submitted_B")]
    pub submitted: bool,
    #[serde(rename = "submitted_bid_b")]
    pub bid: f64,
    pub p_win_b: f64,
    pub p_win_g: f64,
    #[serde(rename = "won_A")]
    pub won: bool,
    /// Clearing cost, present exactly when won.
    #[serde(rename = "cost_c", default, skip_serializing_if = "Option::is_none")]
    pub cost: Option<f64>,
    #[serde(rename = "viewable_V", default, skip_serializing_if = "Option::is_none")]
    pub viewable: Option<bool>,
    #[serde(default = "one")]
    pub p_viewable: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub characteristics: BTreeMap<String, f64>,
}

fn one() -> f64 {
    1.0
}

impl BidEvent {
    /// Weight w_ijk of characteristic `k`; "unit" is 1 for every impression.
    pub fn weight(&self, characteristic: &str) -> f64 {
        if characteristic == UNIT {
            1.0
        } else {
            self.characteristics.get(characteristic).copied().unwrap_or(0.0)
        }
    }

    /// Realized viewability indicator (unknown counts as not viewable).
    pub fn viewed(&self) -> f64 {
        if self.viewable == Some(true) {
            1.0
        } else {
            0.0
        }
    }
}

/// The characteristic carried by every impression with weight one.
pub const UNIT: &str = "unit";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConversionEvent {
    pub user_id: String,
    pub t_c: f64,
    #[serde(rename = "value_v", default = "one")]
    pub value: f64,
    #[serde(rename = "margin_m", default = "one")]
    pub margin: f64,
}

impl ConversionEvent {
    pub fn profit(&self) -> f64 {
        self.margin * self.value
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetargetEvent {
    pub user_id: String,
    pub t_r: f64,
    #[serde(default)]
    pub event_kind: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowRecord {
    pub user_id: String,
    pub t_start: f64,
    pub t_end: f64,
}

/// One line of the event log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EventRecord {
    Window(WindowRecord),
    Bid(BidEvent),
    Conversion(ConversionEvent),
    Retarget(RetargetEvent),
}

impl EventRecord {
    pub fn user_id(&self) -> &str {
        match self {
            EventRecord::Window(w) => &w.user_id,
            EventRecord::Bid(b) => &b.user_id,
            EventRecord::Conversion(c) => &c.user_id,
            EventRecord::Retarget(r) => &r.user_id,
        }
    }
}

const WINDOW_FIELDS: &[&str] = &["type", "user_id", "t_start", "t_end"];
const BID_FIELDS: &[&str] = &[
    "type",
    "user_id",
    "t_j",
    "ghost_bid_g",
    "submitted_B",
    "submitted_bid_b",
    "p_win_b",
    "p_win_g",
    "won_A",
    "cost_c",
    "viewable_V",
    "p_viewable",
    "characteristics",
];
const CONVERSION_FIELDS: &[&str] = &["type", "user_id", "t_c", "value_v", "margin_m"];
const RETARGET_FIELDS: &[&str] = &["type", "user_id", "t_r", "event_kind"];

/// All events of one user inside its observation window, each list sorted
/// by time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventTimeline {
    pub user_id: String,
    pub t_start: f64,
    pub t_end: f64,
    pub bids: Vec<BidEvent>,
    pub conversions: Vec<ConversionEvent>,
    pub retargets: Vec<RetargetEvent>,
}

impl EventTimeline {
    pub fn new(user_id: impl Into<String>, t_start: f64, t_end: f64) -> Self {
        EventTimeline {
            user_id: user_id.into(),
            t_start,
            t_end,
            bids: Vec::new(),
            conversions: Vec::new(),
            retargets: Vec::new(),
        }
    }

    pub fn window_length(&self) -> f64 {
        self.t_end - self.t_start
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.t_start && t <= self.t_end
    }

    /// Number of bids with t_j < t.
    pub fn bids_before(&self, t: f64) -> usize {
        self.bids.partition_point(|b| b.t_j < t)
    }

    pub fn sort(&mut self) {
        self.bids.sort_by(|a, b| a.t_j.total_cmp(&b.t_j).then_with(|| tie_break(a, b)));
        self.conversions.sort_by(|a, b| a.t_c.total_cmp(&b.t_c).then_with(|| tie_break(a, b)));
        self.retargets.sort_by(|a, b| a.t_r.total_cmp(&b.t_r).then_with(|| tie_break(a, b)));
    }

    /// The log records describing this timeline, window first.
    pub fn records(&self) -> impl Iterator<Item = EventRecord> + '_ {
        let window = EventRecord::Window(WindowRecord {
            user_id: self.user_id.clone(),
            t_start: self.t_start,
            t_end: self.t_end,
        });
        std::iter::once(window)
            .chain(self.bids.iter().cloned().map(EventRecord::Bid))
            .chain(self.conversions.iter().cloned().map(EventRecord::Conversion))
            .chain(self.retargets.iter().cloned().map(EventRecord::Retarget))
    }
}

// Equal timestamps are ordered by content so ingestion does not depend on
// line order.
fn tie_break<T: Serialize>(a: &T, b: &T) -> Ordering {
    let a = serde_json::to_string(a).unwrap_or_default();
    let b = serde_json::to_string(b).unwrap_or_default();
    a.cmp(&b)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Violation {
    Parse,
    UnknownType,
    MissingWindow,
    DuplicateWindow,
    EmptyWindow,
    OutOfWindow,
    NonFinite,
    Negative,
    Probability,
    WonWithoutSubmitted,
    CostWithoutWin,
    WinWithoutCost,
    Viewability,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Violation::Parse => "parse",
            Violation::UnknownType => "unknown-type",
            Violation::MissingWindow => "missing-window",
            Violation::DuplicateWindow => "duplicate-window",
            Violation::EmptyWindow => "empty-window",
            Violation::OutOfWindow => "out-of-window",
            Violation::NonFinite => "non-finite",
            Violation::Negative => "negative",
            Violation::Probability => "probability",
            Violation::WonWithoutSubmitted => "won-without-submitted",
            Violation::CostWithoutWin => "cost-without-win",
            Violation::WinWithoutCost => "win-without-cost",
            Violation::Viewability => "viewability",
        };
        f.write_str(s)
    }
}

/// A rejected record: 1-based line number, rule and detail.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LineError {
    pub line: usize,
    pub violation: Violation,
    pub detail: String,
}

impl fmt::Display for LineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}: {}", self.line, self.violation, self.detail)
    }
}

/// Result of a successful ingestion.
#[derive(Clone, Debug, Default)]
pub struct Ingested {
    pub timelines: Vec<EventTimeline>,
    pub records: usize,
    /// Fields present in the input but not part of the schema (ignored).
    pub unknown_fields: usize,
}

impl Ingested {
    pub fn counts(&self) -> EventCounts {
        let mut c = EventCounts { users: self.timelines.len(), ..Default::default() };
        for t in &self.timelines {
            c.bids += t.bids.len();
            c.impressions += t.bids.iter().filter(|b| b.won).count();
            c.conversions += t.conversions.len();
            c.retargets += t.retargets.len();
        }
        c
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct EventCounts {
    pub users: usize,
    pub bids: usize,
    pub impressions: usize,
    pub conversions: usize,
    pub retargets: usize,
}

fn check_probability(line: usize, name: &str, p: f64, errors: &mut Vec<LineError>) {
    if !(0.0..=1.0).contains(&p) {
        errors.push(LineError { line, violation: Violation::Probability, detail: format!("{name}={p} outside [0,1]") });
    }
}

fn check_finite(line: usize, values: &[(&str, f64)], errors: &mut Vec<LineError>) -> bool {
    let mut ok = true;
    for (name, v) in values {
        if !v.is_finite() {
            errors.push(LineError { line, violation: Violation::NonFinite, detail: format!("{name}={v}") });
            ok = false;
        }
    }
    ok
}

fn check_non_negative(line: usize, values: &[(&str, f64)], errors: &mut Vec<LineError>) {
    for (name, v) in values {
        if *v < 0.0 {
            errors.push(LineError { line, violation: Violation::Negative, detail: format!("{name}={v}") });
        }
    }
}

/// Record-local checks; window membership is checked after grouping.
fn check_record(line: usize, record: &EventRecord, errors: &mut Vec<LineError>) {
    match record {
        EventRecord::Window(w) => {
            if check_finite(line, &[("t_start", w.t_start), ("t_end", w.t_end)], errors) && w.t_end <= w.t_start {
                errors.push(LineError {
                    line,
                    violation: Violation::EmptyWindow,
                    detail: format!("window [{}, {}] has no length", w.t_start, w.t_end),
                });
            }
        }
        EventRecord::Bid(b) => {
            let mut values = vec![
                ("t_j", b.t_j),
                ("ghost_bid_g", b.ghost_bid),
                ("submitted_bid_b", b.bid),
                ("p_win_b", b.p_win_b),
                ("p_win_g", b.p_win_g),
                ("p_viewable", b.p_viewable),
            ];
            if let Some(c) = b.cost {
                values.push(("cost_c", c));
            }
            check_finite(line, &values, errors);
            check_non_negative(line, &[("ghost_bid_g", b.ghost_bid), ("submitted_bid_b", b.bid)], errors);
            if let Some(c) = b.cost {
                check_non_negative(line, &[("cost_c", c)], errors);
            }
            check_probability(line, "p_win_b", b.p_win_b, errors);
            check_probability(line, "p_win_g", b.p_win_g, errors);
            check_probability(line, "p_viewable", b.p_viewable, errors);
            if b.won && !b.submitted {
                errors.push(LineError {
                    line,
                    violation: Violation::WonWithoutSubmitted,
                    detail: format!("bid at t_j={} won but was not submitted", b.t_j),
                });
            }
            match (b.won, b.cost.is_some()) {
                (true, false) => errors.push(LineError {
                    line,
                    violation: Violation::WinWithoutCost,
                    detail: format!("won bid at t_j={} has no cost_c", b.t_j),
                }),
                (false, true) => errors.push(LineError {
                    line,
                    violation: Violation::CostWithoutWin,
                    detail: format!("lost bid at t_j={} carries cost_c", b.t_j),
                }),
                _ => {}
            }
            if b.won != b.viewable.is_some() {
                errors.push(LineError {
                    line,
                    violation: Violation::Viewability,
                    detail: "viewable_V must be known exactly for won impressions".into(),
                });
            }
        }
        EventRecord::Conversion(c) => {
            check_finite(line, &[("t_c", c.t_c), ("value_v", c.value), ("margin_m", c.margin)], errors);
            check_non_negative(line, &[("value_v", c.value)], errors);
            check_probability(line, "margin_m", c.margin, errors);
        }
        EventRecord::Retarget(r) => {
            check_finite(line, &[("t_r", r.t_r)], errors);
        }
    }
}

/// Parses one line, counting fields outside the schema.
pub fn parse_line(text: &str, line: usize) -> std::result::Result<(EventRecord, usize), LineError> {
    let value: Value = serde_json::from_str(text)
        .map_err(|e| LineError { line, violation: Violation::Parse, detail: e.to_string() })?;
    let Some(obj) = value.as_object() else {
        return Err(LineError { line, violation: Violation::Parse, detail: "record is not a JSON object".into() });
    };
    let tag = match obj.get("type") {
        Some(Value::String(s)) => s.as_str(),
        _ => return Err(LineError { line, violation: Violation::UnknownType, detail: "missing type tag".into() }),
    };
    let known = match tag {
        "window" => WINDOW_FIELDS,
        "bid" => BID_FIELDS,
        "conversion" => CONVERSION_FIELDS,
        "retarget" => RETARGET_FIELDS,
        other => {
            return Err(LineError { line, violation: Violation::UnknownType, detail: format!("type {other:?}") });
        }
    };
    let unknown = obj.keys().filter(|k| !known.contains(&k.as_str())).count();
    let record = serde_json::from_value(value)
        .map_err(|e| LineError { line, violation: Violation::Parse, detail: e.to_string() })?;
    Ok((record, unknown))
}

#[derive(Default)]
struct Pending {
    window: Option<(usize, WindowRecord)>,
    events: Vec<(usize, EventRecord)>,
}

/// Groups, validates and sorts an NDJSON event stream. Every violation is
/// collected; any violation fails the whole ingestion.
pub fn ingest<R: BufRead>(reader: R) -> Result<Ingested> {
    let mut errors = Vec::new();
    let mut users: HashMap<String, Pending> = HashMap::new();
    let mut records = 0;
    let mut unknown_fields = 0;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let text = line?;
        if text.trim().is_empty() {
            continue;
        }
        let (record, unknown) = match parse_line(&text, line_no) {
            Ok(r) => r,
            Err(e) => {
                errors.push(e);
                continue;
            }
        };
        records += 1;
        unknown_fields += unknown;
        check_record(line_no, &record, &mut errors);
        let pending = users.entry(record.user_id().to_string()).or_default();
        match record {
            EventRecord::Window(w) => {
                if let Some((first, _)) = &pending.window {
                    errors.push(LineError {
                        line: line_no,
                        violation: Violation::DuplicateWindow,
                        detail: format!("user {:?} already has a window on line {first}", w.user_id),
                    });
                } else {
                    pending.window = Some((line_no, w));
                }
            }
            other => pending.events.push((line_no, other)),
        }
    }
    if unknown_fields > 0 {
        log::warn!("ignored {unknown_fields} unknown field(s) in event log");
    }

    let mut timelines = Vec::with_capacity(users.len());
    for (user_id, pending) in users {
        let Some((_, window)) = pending.window else {
            let line = pending.events.iter().map(|(l, _)| *l).min().unwrap_or(0);
            errors.push(LineError {
                line,
                violation: Violation::MissingWindow,
                detail: format!("user {user_id:?} has events but no window record"),
            });
            continue;
        };
        let mut timeline = EventTimeline::new(user_id, window.t_start, window.t_end);
        for (line, event) in pending.events {
            let t = match &event {
                EventRecord::Bid(b) => b.t_j,
                EventRecord::Conversion(c) => c.t_c,
                EventRecord::Retarget(r) => r.t_r,
                EventRecord::Window(_) => unreachable!("windows are stored separately"),
            };
            // Retargeting events may precede the window: they only modulate
            // later impressions.
            let in_window = match event {
                EventRecord::Retarget(_) => t <= timeline.t_end,
                _ => timeline.contains(t),
            };
            if t.is_finite() && !in_window {
                errors.push(LineError {
                    line,
                    violation: Violation::OutOfWindow,
                    detail: format!("t={t} outside [{}, {}]", timeline.t_start, timeline.t_end),
                });
            }
            match event {
                EventRecord::Bid(b) => timeline.bids.push(b),
                EventRecord::Conversion(c) => timeline.conversions.push(c),
                EventRecord::Retarget(r) => timeline.retargets.push(r),
                EventRecord::Window(_) => {}
            }
        }
        timeline.sort();
        timelines.push(timeline);
    }
    if !errors.is_empty() {
        errors.sort_by_key(|e| e.line);
        return Err(Error::Validation(errors));
    }
    timelines.sort_by(|a, b| a.user_id.cmp(&b.user_id));
    Ok(Ingested { timelines, records, unknown_fields })
}

/// Opens a file for reading, decompressing gzip input transparently.
pub fn open_reader(path: &Path) -> Result<Box<dyn BufRead>> {
    let mut file = File::open(path)?;
    let mut magic = [0u8; 2];
    let n = file.read(&mut magic)?;
    drop(file);
    let file = File::open(path)?;
    if n == 2 && magic == [0x1f, 0x8b] {
        Ok(Box::new(BufReader::new(MultiGzDecoder::new(file))))
    } else {
        Ok(Box::new(BufReader::new(file)))
    }
}

pub fn ingest_path(path: &Path) -> Result<Ingested> {
    ingest(open_reader(path)?)
}

/// Writes timelines back as an event log that re-ingests to the same
/// structure.
pub fn write_events<W: Write>(timelines: &[EventTimeline], mut out: W) -> Result<()> {
    for timeline in timelines {
        for record in timeline.records() {
            serde_json::to_writer(&mut out, &record)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

/// Writes one JSON object per timeline.
pub fn write_timelines<W: Write>(timelines: &[EventTimeline], mut out: W) -> Result<()> {
    for timeline in timelines {
        serde_json::to_writer(&mut out, timeline)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
