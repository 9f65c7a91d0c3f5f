use std::collections::BTreeMap;

use miniprof::channel::{Record, RecordKind, PPM};
use miniprof::report::Profile;
use miniprof::units::Nanos;
use miniprof::vm::LineId;
use proptest::prelude::*;

fn records() -> impl Strategy<Value = Vec<Record>> {
    let kind = prop_oneof![Just(RecordKind::Malloc), Just(RecordKind::Free), Just(RecordKind::Copy)];
    prop::collection::vec((kind, 1u64..1 << 24, 0..=PPM, 0u64..1 << 30, 1u32..6), 0..200).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (kind, bytes, ppm, footprint, line))| Record {
                seq: i as u64 + 1,
                kind,
                bytes,
                python_fraction_ppm: ppm,
                footprint,
                line: LineId::new("m.asm", line),
            })
            .collect()
    })
}

fn signed(r: &Record) -> i64 {
    match r.kind {
        RecordKind::Malloc => r.bytes as i64,
        RecordKind::Free => -(r.bytes as i64),
        RecordKind::Copy => 0,
    }
}

proptest! {
    #[test]
    fn per_line_net_sums_to_program_net(recs in records()) {
        let mut p = Profile::new();
        p.apply_records(&recs);
        let lines: i64 = p.lines.values().map(|s| s.net_python_bytes() + s.net_native_bytes()).sum();
        prop_assert_eq!(lines, recs.iter().map(signed).sum::<i64>());
        prop_assert_eq!(lines, p.net_record_bytes);
    }

    #[test]
    fn split_matches_signed_bytes_per_line(recs in records()) {
        let mut p = Profile::new();
        p.apply_records(&recs);
        let mut oracle: BTreeMap<LineId, i64> = BTreeMap::new();
        for r in &recs {
            *oracle.entry(r.line.clone()).or_default() += signed(r);
        }
        for (line, s) in &p.lines {
            prop_assert_eq!(s.net_python_bytes() + s.net_native_bytes(), oracle[line]);
        }
    }

    #[test]
    fn rendering_is_deterministic(recs in records()) {
        let build = || {
            let mut p = Profile::new();
            p.apply_records(&recs);
            p.report(Nanos::from_millis(1500)).render()
        };
        prop_assert_eq!(build(), build());
    }

    #[test]
    fn rows_are_ordered_by_line(recs in records()) {
        let mut p = Profile::new();
        p.apply_records(&recs);
        let report = p.report(Nanos::from_secs(1));
        prop_assert!(report.rows.windows(2).all(|w| w[0].line < w[1].line));
        let shares: f64 = report.rows.iter().map(|r| r.python_pct + r.native_pct).sum();
        prop_assert!(shares <= 100.0 + 1e-9);
    }
}
