//! Peak memory while streaming a large input file. Kept in its own test
//! binary so no other test shares the process.
#![cfg(target_os = "linux")]

use std::io::{BufWriter, Write};

use driveforge::pipeline::ingest_records;

const RECORDS: usize = 100_000;
const QA_PER_FRAME: usize = 10;

fn peak_rss_kib() -> u64 {
    let status = std::fs::read_to_string("/proc/self/status").unwrap();
    status
        .lines()
        .find_map(|l| l.strip_prefix("VmHWM:"))
        .and_then(|v| v.trim().trim_end_matches("kB").trim().parse().ok())
        .expect("VmHWM in /proc/self/status")
}

#[test]
fn streaming_100k_records_stays_bounded() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("qa.json");
    let filler = "the ego vehicle should keep a safe distance from the vehicle ahead ".repeat(10);
    {
        let mut w = BufWriter::new(std::fs::File::create(&path).unwrap());
        write!(w, r#"[{{"scene_id":"big","key_frames":["#).unwrap();
        for f in 0..RECORDS / QA_PER_FRAME {
            if f > 0 {
                w.write_all(b",").unwrap();
            }
            write!(w, r#"{{"frame_id":"f{f}","image_paths":{{"CAM_FRONT":"{f}/a.jpg"}},"QA":["#).unwrap();
            for q in 0..QA_PER_FRAME {
                if q > 0 {
                    w.write_all(b",").unwrap();
                }
                write!(w, r#"{{"question":"q{q} <c1,CAM_FRONT,10.0,20.0> {filler}","answer":"a{q} {filler}"}}"#).unwrap();
            }
            w.write_all(b"]}").unwrap();
        }
        w.write_all(b"]}]").unwrap();
        w.flush().unwrap();
    }
    let file_mib = std::fs::metadata(&path).unwrap().len() / (1 << 20);
    assert!(file_mib >= 128, "fixture only {file_mib} MiB");

    let before = peak_rss_kib();
    let mut count = 0;
    let mut bytes = 0;
    for rec in ingest_records(&path, dir.path()).unwrap() {
        let rec = rec.unwrap();
        bytes += rec.question.len();
        count += 1;
    }
    let grown_mib = (peak_rss_kib() - before) / 1024;
    assert_eq!(count, RECORDS);
    assert!(bytes > 0);
    assert!(grown_mib < 32, "peak RSS grew by {grown_mib} MiB while streaming a {file_mib} MiB file");
}
