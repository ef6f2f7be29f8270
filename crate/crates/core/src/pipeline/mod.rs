//! Dataset conversion.
//!
//! Frames stream out of the input file, each frame is composed once, its
//! tagged objects are boxed once, and every question becomes one
//! [`ConversationRecord`]. [`run`] drives the whole file with a worker
//! pool and writes `records.jsonl`, `manifest.json` and `images/`.

mod convert;
mod ingest;
pub mod inspect;
mod run;

pub use convert::{
    check_frame_id, composite_path, convert, convert_temporal, ConversationRecord, ConvertOptions, FrameSession,
    Provenance, RecordError, Stage, TagStyle, IMAGE_DIR, IMAGE_PLACEHOLDER, SYSTEM_PROMPT,
};
pub use ingest::{ingest, ingest_records, Frame, Ingest, IngestError, QARecord, QaItem};
pub use run::{
    run, run_with, ConfigSnapshot, LayoutSnapshot, PipelineError, ProviderFactory, ProviderKind, RecordStatus,
    RunConfig, RunCounts, RunInfo, RunManifest, TrainingMetadata, JOURNAL_FILE, MANIFEST_FILE, RECORDS_FILE,
};
