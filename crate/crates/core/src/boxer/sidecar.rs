//! Line-delimited JSON protocol for out-of-process mask providers.
//!
//! ```text
//! -> {"id": "f0/c1", "image": "/data/CAM_BACK/0001.jpg", "point": [1088.3, 497.5]}
//! <- {"id": "f0/c1", "candidates": [{"area": 812, "bbox": [1070, 480, 1106, 515], "contains_prompt": true}]}
//! <- {"id": "f0/c2", "error": "cannot read image"}
//! ```
//!
//! One object per line in each direction. Responses are matched by id and
//! may arrive out of order. `rle` is only sent when the request sets
//! `"want_rle": true`.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{MaskCandidate, MaskProvider, MaskRequest, ProviderError};
use crate::geometry::{PxBox, PxPoint};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRequest {
    pub id: String,
    pub image: PathBuf,
    pub point: [f64; 2],
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub want_rle: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireCandidate {
    pub area: u64,
    pub bbox: [f64; 4],
    pub contains_prompt: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rle: Option<Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WireResponse {
    Candidates { id: String, candidates: Vec<WireCandidate> },
    Error { id: String, error: String },
}

impl WireResponse {
    pub fn id(&self) -> &str {
        match self {
            WireResponse::Candidates { id, .. } | WireResponse::Error { id, .. } => id,
        }
    }
}

impl From<&MaskCandidate> for WireCandidate {
    fn from(c: &MaskCandidate) -> Self {
        Self {
            area: c.area_px,
            bbox: [c.bbox.x1, c.bbox.y1, c.bbox.x2, c.bbox.y2],
            contains_prompt: c.contains_prompt,
            rle: c.rle.clone(),
        }
    }
}

impl From<WireCandidate> for MaskCandidate {
    fn from(c: WireCandidate) -> Self {
        let [x1, y1, x2, y2] = c.bbox;
        Self {
            area_px: c.area,
            bbox: PxBox::new(x1, y1, x2, y2),
            contains_prompt: c.contains_prompt,
            rle: c.rle,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SidecarOptions {
    pub timeout: Duration,
    pub want_rle: bool,
}

impl Default for SidecarOptions {
    fn default() -> Self {
        Self {
            timeout: DEFAULT_TIMEOUT,
            want_rle: false,
        }
    }
}

/// A child process speaking the protocol on its stdin/stdout.
pub struct SidecarProvider {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
    stash: HashMap<String, WireResponse>,
    options: SidecarOptions,
}

impl SidecarProvider {
    /// Spawn `argv[0]` with the remaining arguments.
    pub fn spawn(argv: &[String], options: SidecarOptions) -> Result<Self, ProviderError> {
        let (program, args) = argv
            .split_first()
            .ok_or_else(|| ProviderError::Protocol("empty sidecar command".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, lines) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(Self {
            child,
            stdin,
            lines,
            stash: HashMap::new(),
            options,
        })
    }

    fn await_response(&mut self, id: &str) -> Result<WireResponse, ProviderError> {
        if let Some(r) = self.stash.remove(id) {
            return Ok(r);
        }
        let deadline = Instant::now() + self.options.timeout;
        loop {
            let remaining = deadline.saturating_duration_since(Instant::now());
            let line = match self.lines.recv_timeout(remaining) {
                Ok(line) => line?,
                Err(RecvTimeoutError::Timeout) => return Err(ProviderError::Timeout(self.options.timeout)),
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(ProviderError::Protocol("sidecar closed its output".into()))
                }
            };
            if line.trim().is_empty() {
                continue;
            }
            let response: WireResponse = serde_json::from_str(&line)
                .map_err(|e| ProviderError::Protocol(format!("bad response line: {e}")))?;
            if response.id() == id {
                return Ok(response);
            }
            // Late answer to an earlier request, or one sent ahead of time.
            self.stash.insert(response.id().to_string(), response);
        }
    }
}

impl MaskProvider for SidecarProvider {
    fn candidates(&mut self, request: &MaskRequest<'_>) -> Result<Vec<MaskCandidate>, ProviderError> {
        let wire = WireRequest {
            id: request.id.to_string(),
            image: request.image.to_path_buf(),
            point: [request.point.x, request.point.y],
            want_rle: self.options.want_rle,
        };
        let mut line = serde_json::to_string(&wire).expect("request serializes");
        line.push('\n');
        self.stdin.write_all(line.as_bytes())?;
        self.stdin.flush()?;
        match self.await_response(request.id)? {
            WireResponse::Candidates { candidates, .. } => {
                Ok(candidates.into_iter().map(MaskCandidate::from).collect())
            }
            WireResponse::Error { error, .. } => Err(ProviderError::Remote(error)),
        }
    }
}

impl Drop for SidecarProvider {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Serve the protocol from `input` to `output` using `provider`.
///
/// Per-request failures become error responses; only I/O on the streams
/// ends the loop early. Returns the number of requests answered.
pub fn serve(
    input: impl BufRead,
    mut output: impl Write,
    provider: &mut dyn MaskProvider,
) -> std::io::Result<usize> {
    let mut answered = 0;
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let response = match serde_json::from_str::<WireRequest>(&line) {
            Err(e) => WireResponse::Error {
                id: "unknown".into(),
                error: format!("malformed request: {e}"),
            },
            Ok(req) => {
                let request = MaskRequest {
                    id: &req.id,
                    image: &req.image,
                    point: PxPoint::new(req.point[0], req.point[1]),
                };
                match provider.candidates(&request) {
                    Ok(mut cands) => {
                        cands.sort_by(|a, b| b.area_px.cmp(&a.area_px));
                        WireResponse::Candidates {
                            id: req.id.clone(),
                            candidates: cands
                                .iter()
                                .map(|c| {
                                    let mut w = WireCandidate::from(c);
                                    if !req.want_rle {
                                        w.rle = None;
                                    }
                                    w
                                })
                                .collect(),
                        }
                    }
                    Err(e) => WireResponse::Error {
                        id: req.id.clone(),
                        error: e.to_string(),
                    },
                }
            }
        };
        serde_json::to_writer(&mut output, &response)?;
        output.write_all(b"\n")?;
        output.flush()?;
        answered += 1;
    }
    Ok(answered)
}
