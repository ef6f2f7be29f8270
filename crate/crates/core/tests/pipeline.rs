use std::fs;
use std::path::Path;

use driveforge::boxer::{MaskCandidate, MaskProvider, MaskRequest, ProviderError};
use driveforge::ctag::{parse_tags, CameraName, TagGeometry};
use driveforge::fixtures::{write_fixture, Fixture, FixtureSpec};
use driveforge::pipeline::{
    run, run_with, ConversationRecord, PipelineError, RecordStatus, RunConfig, Stage, JOURNAL_FILE, RECORDS_FILE,
};

fn fixture(dir: &Path, records: usize) -> Fixture {
    write_fixture(
        dir,
        &FixtureSpec {
            records,
            view_w: 320,
            view_h: 180,
            seed: 7,
        },
    )
    .unwrap()
}

fn config(fx: &Fixture, out: &Path, workers: usize) -> RunConfig {
    let mut c = RunConfig::new(&fx.qa_json, &fx.image_root, out);
    c.workers = workers;
    c
}

fn records(out: &Path) -> Vec<ConversationRecord> {
    fs::read_to_string(out.join(RECORDS_FILE))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn empty_input_gives_empty_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("qa.json");
    fs::write(&input, "[]").unwrap();
    let out = dir.path().join("out");
    let m = run(&RunConfig::new(&input, dir.path(), &out)).unwrap();
    assert_eq!((m.counts.frames, m.counts.records, m.counts.ok, m.counts.error), (0, 0, 0, 0));
    assert_eq!(fs::read(out.join(RECORDS_FILE)).unwrap(), b"");
    assert!(out.join("manifest.json").is_file());
}

#[test]
fn worker_count_does_not_change_output() {
    let dir = tempfile::tempdir().unwrap();
    let fx = fixture(dir.path(), 10);
    let (a, b) = (dir.path().join("w1"), dir.path().join("w4"));
    let ma = run(&config(&fx, &a, 1)).unwrap();
    let mb = run(&config(&fx, &b, 4)).unwrap();
    assert_eq!(ma.counts.ok, 10);
    assert_eq!(fs::read(a.join(RECORDS_FILE)).unwrap(), fs::read(b.join(RECORDS_FILE)).unwrap());
    assert_eq!(ma.deterministic_json(), mb.deterministic_json());
    for f in 0..fx.frames {
        let rel = format!("images/frame_{f:04}.png");
        assert_eq!(fs::read(a.join(&rel)).unwrap(), fs::read(b.join(&rel)).unwrap(), "{rel}");
    }
}

#[test]
fn records_follow_input_order_and_use_normalized_boxes() {
    let dir = tempfile::tempdir().unwrap();
    let fx = fixture(dir.path(), 12);
    let out = dir.path().join("out");
    let m = run(&config(&fx, &out, 3)).unwrap();
    let recs = records(&out);
    assert_eq!(recs.len(), m.counts.ok);
    let ids: Vec<_> = recs.iter().map(|r| r.sample_id.clone()).collect();
    let expected: Vec<_> = (0..4).flat_map(|f| (0..3).map(move |q| format!("frame_{f:04}_q{q}"))).collect();
    assert_eq!(ids, expected);
    let mut tags = 0;
    for r in &recs {
        assert!(r.user_text.starts_with("<image>\n"));
        for text in [&r.user_text, &r.assistant_text] {
            for t in parse_tags(text).unwrap().tags() {
                tags += 1;
                match t.geometry {
                    TagGeometry::BoxNorm { x1, y1, x2, y2 } => {
                        assert!(x1 <= x2 && y1 <= y2 && x2 <= 1000 && y2 <= 1000)
                    }
                    ref g => panic!("{g:?}"),
                }
            }
        }
        assert!(out.join(&r.composite_image).is_file());
    }
    assert!(tags >= 12);
}

#[test]
fn missing_image_is_a_record_error() {
    let dir = tempfile::tempdir().unwrap();
    let fx = fixture(dir.path(), 6);
    fs::remove_file(fx.image_root.join("frame_0000").join(format!("{}.png", CameraName::Back))).unwrap();
    let out = dir.path().join("out");
    let m = run(&config(&fx, &out, 2)).unwrap();
    assert_eq!((m.counts.ok, m.counts.error), (3, 3));
    for s in &m.records[..3] {
        match s {
            RecordStatus::Error { stage, message, .. } => {
                assert_eq!(*stage, Stage::Ingest);
                assert!(message.contains("CAM_BACK"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }
    assert_eq!(records(&out).len(), 3);
}

#[test]
fn interrupted_run_resumes_to_identical_output() {
    let dir = tempfile::tempdir().unwrap();
    let fx = fixture(dir.path(), 15);
    let whole = dir.path().join("whole");
    let reference = run(&config(&fx, &whole, 2)).unwrap();

    let out = dir.path().join("cut");
    run(&config(&fx, &out, 2)).unwrap();
    // Simulate a crash: two frames never journaled, a torn record line, and
    // a half-written image for a frame that was journaled.
    let journal = fs::read_to_string(out.join(JOURNAL_FILE)).unwrap();
    let lines: Vec<&str> = journal.lines().collect();
    fs::write(out.join(JOURNAL_FILE), lines[..lines.len() - 2].join("\n") + "\n").unwrap();
    let recs = fs::read(out.join(RECORDS_FILE)).unwrap();
    fs::write(out.join(RECORDS_FILE), &recs[..recs.len() - 700]).unwrap();
    fs::write(out.join("images/frame_0002.png"), b"torn").unwrap();
    fs::remove_file(out.join("manifest.json")).unwrap();

    let mut resume = config(&fx, &out, 3);
    resume.resume = true;
    let resumed = run(&resume).unwrap();
    assert_eq!(resumed.run.resumed_frames, 2);
    assert_eq!(fs::read(whole.join(RECORDS_FILE)).unwrap(), fs::read(out.join(RECORDS_FILE)).unwrap());
    assert_eq!(reference.deterministic_json(), resumed.deterministic_json());
    assert_eq!(fs::read(whole.join("images/frame_0002.png")).unwrap(), fs::read(out.join("images/frame_0002.png")).unwrap());

    // Resuming a finished run redoes nothing.
    let again = run(&resume).unwrap();
    assert_eq!(again.run.resumed_frames, fx.frames);
    assert_eq!(fs::read(whole.join(RECORDS_FILE)).unwrap(), fs::read(out.join(RECORDS_FILE)).unwrap());
}

#[test]
fn resume_refuses_a_different_config() {
    let dir = tempfile::tempdir().unwrap();
    let fx = fixture(dir.path(), 3);
    let out = dir.path().join("out");
    run(&config(&fx, &out, 1)).unwrap();
    let mut c = config(&fx, &out, 1);
    c.resume = true;
    c.system_prompt = Some("custom".into());
    assert!(matches!(run(&c), Err(PipelineError::Resume(_))));
}

#[test]
fn temporal_records_reference_the_previous_composite() {
    let dir = tempfile::tempdir().unwrap();
    let fx = fixture(dir.path(), 9);
    let out = dir.path().join("out");
    let mut c = config(&fx, &out, 2);
    c.temporal = true;
    let m = run(&c).unwrap();
    // The first frame has no predecessor.
    assert_eq!((m.counts.ok, m.counts.error), (6, 3));
    assert!(matches!(&m.records[0], RecordStatus::Error { stage: Stage::Temporal, .. }));
    for r in records(&out) {
        assert!(r.temporal);
        assert!(r.user_text.starts_with("previous images: <image1>, current images: <image2> "));
        let prev = r.prev_composite_image.unwrap();
        assert!(out.join(&prev).is_file());
        assert_ne!(prev, r.composite_image);
    }
}

struct Broken;

impl MaskProvider for Broken {
    fn candidates(&mut self, _: &MaskRequest<'_>) -> Result<Vec<MaskCandidate>, ProviderError> {
        Err(ProviderError::Timeout(std::time::Duration::from_secs(60)))
    }
}

#[test]
fn provider_failures_are_recorded_per_record() {
    let dir = tempfile::tempdir().unwrap();
    let fx = fixture(dir.path(), 3);
    let out = dir.path().join("out");
    let m = run_with(&config(&fx, &out, 1), &|| Ok(Box::new(Broken))).unwrap();
    // Multiple choice and perception questions carry tags; planning does not.
    assert_eq!((m.counts.ok, m.counts.error), (1, 2));
    match &m.records[0] {
        RecordStatus::Error { stage, message, .. } => {
            assert_eq!(*stage, Stage::Box);
            assert!(message.contains("frame_0000_q0"), "{message}");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn unwritable_output_is_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let fx = fixture(dir.path(), 3);
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    assert!(matches!(run(&config(&fx, &blocker.join("out"), 1)), Err(PipelineError::Output { .. })));
}

#[test]
fn schema_errors_are_fatal_and_located() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("qa.json");
    fs::write(&input, r#"[{"scene_id":"s","key_frames":[{"frame_id":3}]}]"#).unwrap();
    match run(&RunConfig::new(&input, dir.path(), dir.path().join("out"))) {
        Err(PipelineError::Ingest(e)) => assert!(e.to_string().contains("[0].key_frames[0].frame_id"), "{e}"),
        other => panic!("{other:?}"),
    }
}
