//! Parallel conversion of a whole input file with resumable output.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use crossbeam_channel::{bounded, unbounded};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::boxer::{MaskProvider, MaskRequest, MaskCandidate, ProviderError, SidecarOptions, SidecarProvider, SyntheticProvider, OVERSIZED_FRACTION};
use crate::compositor::{save_png, TILE_SIZE, TOKENS_PER_TILE};
use crate::geometry::{CompositeLayout, NORM_SCALE};

use super::convert::{check_frame_id, composite_path, ConvertOptions, FrameSession, RecordError, Stage, TagStyle, SYSTEM_PROMPT};
use super::ingest::{ingest, Frame, IngestError};

pub const RECORDS_FILE: &str = "records.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const JOURNAL_FILE: &str = "journal.jsonl";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProviderKind {
    Synthetic { k_nearest: usize },
    Sidecar { argv: Vec<String>, timeout_ms: u64 },
}

impl ProviderKind {
    /// Open a session of this kind.
    pub fn open(&self) -> Result<Box<dyn MaskProvider>, ProviderError> {
        Ok(match self {
            ProviderKind::Synthetic { k_nearest } => Box::new(SyntheticProvider::new(*k_nearest)),
            ProviderKind::Sidecar { argv, timeout_ms } => Box::new(SidecarProvider::spawn(
                argv,
                SidecarOptions {
                    timeout: Duration::from_millis(*timeout_ms),
                    want_rle: false,
                },
            )?),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub input: PathBuf,
    pub images: PathBuf,
    pub out: PathBuf,
    pub workers: usize,
    pub temporal: bool,
    pub resume: bool,
    pub provider: ProviderKind,
    pub tag_style: TagStyle,
    /// Replaces the built-in system prompt; changes the config hash.
    pub system_prompt: Option<String>,
    pub seed: u64,
}

impl RunConfig {
    pub fn new(input: impl Into<PathBuf>, images: impl Into<PathBuf>, out: impl Into<PathBuf>) -> Self {
        Self {
            input: input.into(),
            images: images.into(),
            out: out.into(),
            workers: 1,
            temporal: false,
            resume: false,
            provider: ProviderKind::Synthetic {
                k_nearest: crate::boxer::DEFAULT_K_NEAREST,
            },
            tag_style: TagStyle::Inline,
            system_prompt: None,
            seed: 0,
        }
    }

    pub fn snapshot(&self) -> ConfigSnapshot {
        let l = CompositeLayout::STANDARD;
        ConfigSnapshot {
            input: self.input.display().to_string(),
            images: self.images.display().to_string(),
            layout: LayoutSnapshot {
                view_w: l.view_w(),
                view_h: l.view_h(),
                cols: l.cols(),
                rows: l.rows(),
                composite_w: l.composite_w(),
                composite_h: l.composite_h(),
                norm_scale: NORM_SCALE,
                tile_size: TILE_SIZE,
                tokens_per_tile: TOKENS_PER_TILE,
            },
            provider: self.provider.clone(),
            oversized_fraction: OVERSIZED_FRACTION,
            temporal: self.temporal,
            tag_style: self.tag_style,
            system_prompt: self.system_prompt.clone().unwrap_or_else(|| SYSTEM_PROMPT.to_string()),
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutSnapshot {
    pub view_w: u32,
    pub view_h: u32,
    pub cols: u32,
    pub rows: u32,
    pub composite_w: u32,
    pub composite_h: u32,
    pub norm_scale: u16,
    pub tile_size: u32,
    pub tokens_per_tile: usize,
}

/// Everything that influences the output bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSnapshot {
    pub input: String,
    pub images: String,
    pub layout: LayoutSnapshot,
    pub provider: ProviderKind,
    pub oversized_fraction: f64,
    pub temporal: bool,
    pub tag_style: TagStyle,
    pub system_prompt: String,
    pub seed: u64,
}

impl ConfigSnapshot {
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("snapshot serializes")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RecordStatus {
    Ok { sample_id: String },
    Error { sample_id: String, stage: Stage, message: String },
}

impl RecordStatus {
    pub fn sample_id(&self) -> &str {
        match self {
            RecordStatus::Ok { sample_id } | RecordStatus::Error { sample_id, .. } => sample_id,
        }
    }

    pub fn is_ok(&self) -> bool {
        matches!(self, RecordStatus::Ok { .. })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunCounts {
    pub frames: usize,
    pub records: usize,
    pub ok: usize,
    pub error: usize,
}

/// Hyperparameters of the reference fine-tuning run, kept as documentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub learning_rate: f64,
    pub epochs: u32,
    pub batch_size: u32,
    pub note: String,
}

impl Default for TrainingMetadata {
    fn default() -> Self {
        Self {
            learning_rate: 2e-5,
            epochs: 1,
            batch_size: 1024,
            note: "reference fine-tuning settings; not used by the converter".into(),
        }
    }
}

/// Facts about this particular execution. Excluded from determinism checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub workers: usize,
    pub resumed_frames: usize,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ConfigSnapshot,
    pub config_hash: String,
    pub counts: RunCounts,
    pub records: Vec<RecordStatus>,
    pub training: TrainingMetadata,
    pub run: RunInfo,
}

impl RunManifest {
    /// Manifest bytes with the per-run section blanked.
    pub fn deterministic_json(&self) -> String {
        let mut copy = self.clone();
        copy.run = RunInfo {
            workers: 0,
            resumed_frames: 0,
            started_unix_ms: 0,
            finished_unix_ms: 0,
        };
        serde_json::to_string_pretty(&copy).expect("manifest serializes")
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{path}: {source}")]
    Output {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("cannot resume: {0}")]
    Resume(String),
}

fn output_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Output {
        path: path.display().to_string(),
        source,
    }
}

fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct ImageEntry {
    path: String,
    len: u64,
    sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct JournalHeader {
    config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct JournalEntry {
    seq: usize,
    frame_id: String,
    records_end: u64,
    records_sha256: String,
    statuses: Vec<RecordStatus>,
    images: Vec<ImageEntry>,
}

/// State recovered from a previous run's journal.
struct Recovered {
    frames: usize,
    records_end: u64,
    journal_end: u64,
    statuses: Vec<RecordStatus>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn image_matches(out: &Path, e: &ImageEntry) -> bool {
    fs::read(out.join(&e.path)).is_ok_and(|b| b.len() as u64 == e.len && sha256_hex(&b) == e.sha256)
}

/// Walk the journal and keep the longest prefix whose outputs verify.
fn recover(out: &Path, config_hash: &str) -> Result<Option<Recovered>, PipelineError> {
    let journal_path = out.join(JOURNAL_FILE);
    let Ok(file) = File::open(&journal_path) else {
        return Ok(None);
    };
    let mut reader = BufReader::new(file);
    let mut line = String::new();
    let n = reader.read_line(&mut line).map_err(output_err(&journal_path))?;
    let header: JournalHeader = match serde_json::from_str(&line) {
        Ok(h) if line.ends_with('\n') => h,
        _ => return Ok(None),
    };
    if header.config_hash != config_hash {
        return Err(PipelineError::Resume(format!(
            "{} was written with config {}, current config is {config_hash}",
            out.display(),
            header.config_hash
        )));
    }

    let records_path = out.join(RECORDS_FILE);
    let mut records = File::open(&records_path).ok();
    let mut state = Recovered {
        frames: 0,
        records_end: 0,
        journal_end: n as u64,
        statuses: Vec::new(),
    };
    loop {
        line.clear();
        let n = reader.read_line(&mut line).map_err(output_err(&journal_path))?;
        if n == 0 || !line.ends_with('\n') {
            break;
        }
        let Ok(entry) = serde_json::from_str::<JournalEntry>(&line) else {
            break;
        };
        if entry.seq != state.frames || entry.records_end < state.records_end {
            break;
        }
        let Some(file) = records.as_mut() else {
            break;
        };
        let mut chunk = vec![0; (entry.records_end - state.records_end) as usize];
        let read_ok = file.seek(SeekFrom::Start(state.records_end)).is_ok() && file.read_exact(&mut chunk).is_ok();
        if !read_ok || sha256_hex(&chunk) != entry.records_sha256 {
            break;
        }
        if !entry.images.iter().all(|e| image_matches(out, e)) {
            break;
        }
        state.frames += 1;
        state.records_end = entry.records_end;
        state.journal_end += n as u64;
        state.statuses.extend(entry.statuses);
    }
    Ok(Some(state))
}

struct FrameOutput {
    frame_id: String,
    lines: Vec<u8>,
    statuses: Vec<RecordStatus>,
    images: Vec<ImageEntry>,
}

struct Job {
    seq: usize,
    frame: Frame,
    problem: Option<RecordError>,
    prev: Option<Result<Frame, RecordError>>,
}

/// Stand-in session when a provider could not be started.
struct Unavailable(String);

impl MaskProvider for Unavailable {
    fn candidates(&mut self, _: &MaskRequest<'_>) -> Result<Vec<MaskCandidate>, ProviderError> {
        Err(ProviderError::Protocol(format!("provider unavailable: {}", self.0)))
    }
}

struct Context<'a> {
    out: &'a Path,
    layout: CompositeLayout,
    options: ConvertOptions,
}

fn write_image(ctx: &Context<'_>, session: &FrameSession, stage: Stage) -> Result<ImageEntry, RecordError> {
    let composite = session.composite().map_err(|e| RecordError::new(stage, e.message))?;
    let rel = composite_path(session.frame_id());
    let bytes = save_png(&composite.pixels, &ctx.out.join(&rel)).map_err(|e| RecordError::new(Stage::Write, e))?;
    Ok(ImageEntry {
        path: rel,
        len: bytes.len() as u64,
        sha256: sha256_hex(&bytes),
    })
}

fn process(job: &Job, provider: &mut dyn MaskProvider, ctx: &Context<'_>) -> FrameOutput {
    let frame = &job.frame;
    let mut out = FrameOutput {
        frame_id: frame.frame_id.clone(),
        lines: Vec::new(),
        statuses: Vec::new(),
        images: Vec::new(),
    };
    if frame.qa.is_empty() {
        return out;
    }
    let fail_all = |out: &mut FrameOutput, e: RecordError| {
        out.statuses = (0..frame.qa.len())
            .map(|i| RecordStatus::Error {
                sample_id: frame.sample_id(i),
                stage: e.stage,
                message: e.message.clone(),
            })
            .collect();
    };

    let prepared = (|| {
        if let Some(e) = &job.problem {
            return Err(e.clone());
        }
        let session = FrameSession::open(frame, &ctx.layout)?;
        let mut images = vec![write_image(ctx, &session, Stage::Compose)?];
        let prev_id = match &job.prev {
            None => None,
            Some(Err(e)) => return Err(e.clone()),
            Some(Ok(prev)) => {
                let prev_session = FrameSession::open(prev, &ctx.layout)
                    .map_err(|e| RecordError::new(Stage::Temporal, format!("previous frame {}: {e}", prev.frame_id)))?;
                images.push(write_image(ctx, &prev_session, Stage::Temporal)?);
                Some(prev.frame_id.clone())
            }
        };
        Ok((session, images, prev_id))
    })();

    let (mut session, images, prev_id) = match prepared {
        Ok(p) => p,
        Err(e) => {
            fail_all(&mut out, e);
            return out;
        }
    };
    out.images = images;
    for (i, qa) in frame.qa.iter().enumerate() {
        match session.convert_qa(qa, i, prev_id.as_deref(), provider, &ctx.options) {
            Ok(rec) => {
                serde_json::to_writer(&mut out.lines, &rec).expect("record serializes");
                out.lines.push(b'\n');
                out.statuses.push(RecordStatus::Ok { sample_id: rec.sample_id });
            }
            Err(e) => out.statuses.push(RecordStatus::Error {
                sample_id: frame.sample_id(i),
                stage: e.stage,
                message: e.message,
            }),
        }
    }
    out
}

/// Index of every frame's image paths, for temporal linkage.
fn frame_index(config: &RunConfig) -> Result<HashMap<String, Frame>, PipelineError> {
    let mut index = HashMap::new();
    for frame in ingest(&config.input, &config.images)? {
        let mut frame = frame?;
        frame.qa.clear();
        index.entry(frame.frame_id.clone()).or_insert(frame);
    }
    Ok(index)
}

/// Convert `config.input` with the configured provider.
pub fn run(config: &RunConfig) -> Result<RunManifest, PipelineError> {
    let kind = config.provider.clone();
    run_with(config, &move || kind.open())
}

/// Provider factory; called once per worker thread.
pub type ProviderFactory<'a> = dyn Fn() -> Result<Box<dyn MaskProvider>, ProviderError> + Sync + 'a;

/// Convert `config.input`, opening one provider session per worker.
///
/// Records are written in input order whatever the worker count. Each
/// finished frame is journaled so an interrupted run can resume.
pub fn run_with(config: &RunConfig, factory: &ProviderFactory<'_>) -> Result<RunManifest, PipelineError> {
    let started = now_ms();
    let out = config.out.as_path();
    let images_dir = out.join(super::convert::IMAGE_DIR);
    fs::create_dir_all(&images_dir).map_err(output_err(&images_dir))?;

    let snapshot = config.snapshot();
    let config_hash = snapshot.hash();
    let recovered = if config.resume { recover(out, &config_hash)? } else { None };

    let records_path = out.join(RECORDS_FILE);
    let journal_path = out.join(JOURNAL_FILE);
    let mut records = OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(false)
        .open(&records_path)
        .map_err(output_err(&records_path))?;
    let mut journal = OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(false)
        .open(&journal_path)
        .map_err(output_err(&journal_path))?;

    let (skip, mut records_end, mut statuses) = match recovered {
        Some(r) => {
            records.set_len(r.records_end).map_err(output_err(&records_path))?;
            journal.set_len(r.journal_end).map_err(output_err(&journal_path))?;
            (r.frames, r.records_end, r.statuses)
        }
        None => {
            records.set_len(0).map_err(output_err(&records_path))?;
            journal.set_len(0).map_err(output_err(&journal_path))?;
            let header = serde_json::to_string(&JournalHeader {
                config_hash: config_hash.clone(),
            })
            .expect("header serializes");
            writeln!(journal, "{header}").map_err(output_err(&journal_path))?;
            (0, 0, Vec::new())
        }
    };
    records.seek(SeekFrom::End(0)).map_err(output_err(&records_path))?;
    journal.seek(SeekFrom::End(0)).map_err(output_err(&journal_path))?;
    if skip > 0 {
        log::info!("resuming after {skip} verified frame(s)");
    }

    let index = if config.temporal { Some(frame_index(config)?) } else { None };
    let ctx = Context {
        out,
        layout: CompositeLayout::STANDARD,
        options: ConvertOptions {
            system_prompt: snapshot.system_prompt.clone(),
            tag_style: config.tag_style,
        },
    };
    let workers = config.workers.max(1);
    let in_flight = 4 * workers + 4;

    let mut frames_total = skip;
    let (ingest_result, write_result) = std::thread::scope(|s| {
        let (job_tx, job_rx) = bounded::<Job>(workers);
        let (res_tx, res_rx) = unbounded::<(usize, FrameOutput)>();
        let (token_tx, token_rx) = bounded::<()>(in_flight);
        for _ in 0..in_flight {
            token_tx.send(()).expect("fresh channel");
        }

        let index = index.as_ref();
        let dispatcher = s.spawn(move || -> Result<usize, PipelineError> {
            let mut seen = HashSet::new();
            let mut seq = 0;
            for frame in ingest(&config.input, &config.images)? {
                let frame = frame?;
                let duplicate = !seen.insert(frame.frame_id.clone());
                if seq < skip {
                    seq += 1;
                    continue;
                }
                if token_rx.recv().is_err() {
                    break;
                }
                let problem = if duplicate {
                    Some(RecordError::new(Stage::Ingest, format!("duplicate frame id {:?}", frame.frame_id)))
                } else {
                    check_frame_id(&frame.frame_id).err()
                };
                let prev = index.map(|idx| match frame.prev_frame_id.as_deref() {
                    None => Err(RecordError::new(Stage::Temporal, "no previous frame linkage")),
                    Some(p) => idx
                        .get(p)
                        .cloned()
                        .ok_or_else(|| RecordError::new(Stage::Temporal, format!("previous frame {p:?} not in input")))
                        .and_then(|f| check_frame_id(&f.frame_id).map(|()| f)),
                });
                if job_tx.send(Job { seq, frame, problem, prev }).is_err() {
                    break;
                }
                seq += 1;
            }
            Ok(seq)
        });

        for _ in 0..workers {
            let job_rx = job_rx.clone();
            let res_tx = res_tx.clone();
            let ctx = &ctx;
            s.spawn(move || {
                let mut provider = factory().unwrap_or_else(|e| {
                    log::error!("cannot open mask provider: {e}");
                    Box::new(Unavailable(e.to_string()))
                });
                for job in job_rx {
                    let output = process(&job, provider.as_mut(), ctx);
                    if res_tx.send((job.seq, output)).is_err() {
                        break;
                    }
                }
            });
        }
        drop(job_rx);
        drop(res_tx);

        let mut pending = BTreeMap::new();
        let mut next = skip;
        let mut write_result = Ok(());
        'recv: for (seq, output) in res_rx.iter() {
            pending.insert(seq, output);
            while let Some(output) = pending.remove(&next) {
                let entry = JournalEntry {
                    seq: next,
                    frame_id: output.frame_id,
                    records_end: records_end + output.lines.len() as u64,
                    records_sha256: sha256_hex(&output.lines),
                    statuses: output.statuses,
                    images: output.images,
                };
                let line = serde_json::to_string(&entry).expect("journal entry serializes");
                let written = records
                    .write_all(&output.lines)
                    .and_then(|()| records.flush())
                    .map_err(output_err(&records_path))
                    .and_then(|()| writeln!(journal, "{line}").map_err(output_err(&journal_path)));
                if let Err(e) = written {
                    write_result = Err(e);
                    break 'recv;
                }
                records_end = entry.records_end;
                statuses.extend(entry.statuses);
                next += 1;
                let _ = token_tx.send(());
            }
        }
        drop(res_rx);
        drop(token_tx);
        (dispatcher.join().expect("dispatcher thread"), write_result)
    });
    write_result?;
    frames_total = frames_total.max(ingest_result?);

    let ok = statuses.iter().filter(|s| s.is_ok()).count();
    let manifest = RunManifest {
        config: snapshot,
        config_hash,
        counts: RunCounts {
            frames: frames_total,
            records: statuses.len(),
            ok,
            error: statuses.len() - ok,
        },
        records: statuses,
        training: TrainingMetadata::default(),
        run: RunInfo {
            workers,
            resumed_frames: skip,
            started_unix_ms: started,
            finished_unix_ms: now_ms(),
        },
    };
    write_manifest(out, &manifest)?;
    Ok(manifest)
}

fn write_manifest(out: &Path, manifest: &RunManifest) -> Result<(), PipelineError> {
    let path = out.join(MANIFEST_FILE);
    let mut tmp = tempfile::NamedTempFile::new_in(out).map_err(output_err(&path))?;
    serde_json::to_writer_pretty(&mut tmp, manifest).map_err(|e| PipelineError::Output {
        path: path.display().to_string(),
        source: e.into(),
    })?;
    tmp.write_all(b"\n").map_err(output_err(&path))?;
    tmp.persist(&path).map_err(|e| PipelineError::Output {
        path: path.display().to_string(),
        source: e.error,
    })?;
    Ok(())
}
