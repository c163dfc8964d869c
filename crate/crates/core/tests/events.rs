use std::collections::BTreeMap;
use std::io::Write;

use incrementality::events::*;
use incrementality::Error;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn lines_for(user: &str, offset: f64) -> Vec<String> {
    vec![
        format!(r#"{{"type":"window","user_id":"{user}","t_start":0,"t_end":100}}"#),
        format!(
            r#"{{"type":"bid","user_id":"{user}","t_j":{},"ghost_bid_g":0.2,"submitted_B":true,"submitted_bid_b":0.2,"p_win_b":0.3,"p_win_g":0.3,"won_A":true,"cost_c":0.1,"viewable_V":false,"p_viewable":0.6,"characteristics":{{"mobile":1.0}}}}"#,
            50.0 + offset
        ),
        format!(
            r#"{{"type":"bid","user_id":"{user}","t_j":{},"ghost_bid_g":0.2,"submitted_B":false,"submitted_bid_b":0.0,"p_win_b":0.0,"p_win_g":0.3,"won_A":false}}"#,
            10.0 + offset
        ),
        format!(r#"{{"type":"conversion","user_id":"{user}","t_c":{},"value_v":40,"margin_m":0.25}}"#, 70.0 + offset),
    ]
}

fn corpus() -> Vec<String> {
    let mut lines = Vec::new();
    for (i, u) in ["carol", "alice", "bob"].iter().enumerate() {
        lines.extend(lines_for(u, i as f64));
    }
    lines
}

/// Sort-then-group oracle built from the parsed records directly.
fn oracle(lines: &[String]) -> Vec<EventTimeline> {
    let mut map: BTreeMap<String, EventTimeline> = BTreeMap::new();
    let mut records: Vec<EventRecord> = lines.iter().map(|l| serde_json::from_str(l).unwrap()).collect();
    records.sort_by(|a, b| a.user_id().cmp(b.user_id()));
    for r in &records {
        if let EventRecord::Window(w) = r {
            map.insert(w.user_id.clone(), EventTimeline::new(w.user_id.clone(), w.t_start, w.t_end));
        }
    }
    for r in records {
        let tl = map.get_mut(r.user_id()).unwrap();
        match r {
            EventRecord::Bid(b) => tl.bids.push(b),
            EventRecord::Conversion(c) => tl.conversions.push(c),
            EventRecord::Retarget(x) => tl.retargets.push(x),
            EventRecord::Window(_) => {}
        }
    }
    for tl in map.values_mut() {
        tl.bids.sort_by(|a, b| a.t_j.partial_cmp(&b.t_j).unwrap());
    }
    map.into_values().collect()
}

#[test]
fn shuffled_users_are_grouped_and_sorted() {
    let mut lines = corpus();
    lines.shuffle(&mut ChaCha8Rng::seed_from_u64(3));
    let got = ingest(lines.join("\n").as_bytes()).unwrap();
    assert_eq!(got.timelines, oracle(&lines));
    let ids: Vec<_> = got.timelines.iter().map(|t| t.user_id.as_str()).collect();
    assert_eq!(ids, ["alice", "bob", "carol"]);
    for tl in &got.timelines {
        assert!(tl.bids.windows(2).all(|w| w[0].t_j <= w[1].t_j));
    }
    let c = got.counts();
    assert_eq!((c.users, c.bids, c.impressions, c.conversions), (3, 6, 3, 3));
}

#[test]
fn round_trip() {
    let first = ingest(corpus().join("\n").as_bytes()).unwrap();
    let mut buf = Vec::new();
    write_events(&first.timelines, &mut buf).unwrap();
    let second = ingest(buf.as_slice()).unwrap();
    assert_eq!(first.timelines, second.timelines);
}

#[test]
fn gzip_is_transparent() {
    let dir = tempfile::tempdir().unwrap();
    let plain = dir.path().join("events.ndjson");
    let packed = dir.path().join("events.ndjson.gz");
    std::fs::write(&plain, corpus().join("\n")).unwrap();
    let mut enc = flate2::write::GzEncoder::new(std::fs::File::create(&packed).unwrap(), flate2::Compression::default());
    enc.write_all(corpus().join("\n").as_bytes()).unwrap();
    enc.finish().unwrap();
    assert_eq!(ingest_path(&plain).unwrap().timelines, ingest_path(&packed).unwrap().timelines);
}

#[test]
fn every_violation_is_reported_with_its_line() {
    let log = [
        r#"{"type":"window","user_id":"a","t_start":0,"t_end":10}"#,
        r#"not json"#,
        r#"{"type":"bid","user_id":"a","t_j":1,"ghost_bid_g":0.1,"submitted_B":true,"submitted_bid_b":0.1,"p_win_b":1.5,"p_win_g":0.5,"won_A":false}"#,
        r#"{"type":"conversion","user_id":"a","t_c":20}"#,
        r#"{"type":"window","user_id":"a","t_start":0,"t_end":10}"#,
    ]
    .join("\n");
    let Err(Error::Validation(errs)) = ingest(log.as_bytes()) else { panic!("expected failure") };
    let got: Vec<_> = errs.iter().map(|e| (e.line, e.violation)).collect();
    assert_eq!(
        got,
        vec![(2, Violation::Parse), (3, Violation::Probability), (4, Violation::OutOfWindow), (5, Violation::DuplicateWindow)]
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn permutation_invariant(seed in any::<u64>()) {
        let mut lines = corpus();
        // Equal timestamps exercise the content tie-break.
        lines.push(r#"{"type":"retarget","user_id":"bob","t_r":5,"event_kind":"home"}"#.into());
        lines.push(r#"{"type":"retarget","user_id":"bob","t_r":5,"event_kind":"cart"}"#.into());
        let base = ingest(lines.join("\n").as_bytes()).unwrap();
        lines.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let shuffled = ingest(lines.join("\n").as_bytes()).unwrap();
        prop_assert_eq!(base.timelines, shuffled.timelines);
    }
}
