//! Streaming reader for the QA input file.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::sync::mpsc::{sync_channel, Receiver, SyncSender};
use std::thread::JoinHandle;

use serde::de::{self, DeserializeSeed, Deserializer, MapAccess, SeqAccess, Visitor};
use serde::Deserialize;
use thiserror::Error;

use crate::ctag::CameraName;

/// Frames buffered between the parser thread and the consumer.
const INGEST_BUFFER: usize = 64;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot open {path}: {source}")]
    Open {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}: schema error at {path}: {message}")]
    Schema {
        file: String,
        path: String,
        message: String,
    },
}

/// One question/answer pair as it appears in the input.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct QaItem {
    pub question: String,
    pub answer: String,
    #[serde(default)]
    pub category: Option<String>,
}

/// `QA` is either a flat list or a map from category to list.
#[derive(Debug, Clone, PartialEq, Default)]
struct QaList(Vec<QaItem>);

impl<'de> Deserialize<'de> for QaList {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = QaList;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a list of QA items or a map from category to such lists")
            }

            fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> Result<QaList, A::Error> {
                let mut out = Vec::new();
                while let Some(item) = seq.next_element()? {
                    out.push(item);
                }
                Ok(QaList(out))
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<QaList, A::Error> {
                let mut out = Vec::new();
                while let Some((category, items)) = map.next_entry::<String, Vec<QaItem>>()? {
                    out.extend(items.into_iter().map(|mut q| {
                        q.category.get_or_insert_with(|| category.clone());
                        q
                    }));
                }
                Ok(QaList(out))
            }
        }
        d.deserialize_any(V)
    }
}

#[derive(Debug, Deserialize)]
struct RawFrame {
    frame_id: String,
    #[serde(default)]
    prev_frame_id: Option<String>,
    image_paths: BTreeMap<CameraName, PathBuf>,
    #[serde(rename = "QA", default)]
    qa: QaList,
}

/// A key frame with image paths resolved against the image root.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub scene_id: String,
    pub frame_id: String,
    pub prev_frame_id: Option<String>,
    pub image_paths: BTreeMap<CameraName, PathBuf>,
    pub qa: Vec<QaItem>,
}

/// One question with the frame it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct QARecord {
    pub scene_id: String,
    pub frame_id: String,
    pub question: String,
    pub answer: String,
    pub qa_category: Option<String>,
    pub image_paths: BTreeMap<CameraName, PathBuf>,
    pub prev_frame_id: Option<String>,
}

impl Frame {
    /// `{frame_id}_q{index}`.
    pub fn sample_id(&self, index: usize) -> String {
        format!("{}_q{index}", self.frame_id)
    }

    /// Every camera present and every file readable as a regular file.
    pub fn check_images(&self) -> Result<(), String> {
        let missing: Vec<&str> = CameraName::ALL
            .iter()
            .filter(|c| !self.image_paths.contains_key(c))
            .map(|c| c.as_str())
            .collect();
        if !missing.is_empty() {
            return Err(format!("no image path for {}", missing.join(", ")));
        }
        for (camera, path) in &self.image_paths {
            if !path.is_file() {
                return Err(format!("{camera} image {} not found", path.display()));
            }
        }
        Ok(())
    }

    pub fn records(&self) -> impl Iterator<Item = QARecord> + '_ {
        self.qa.iter().map(|q| QARecord {
            scene_id: self.scene_id.clone(),
            frame_id: self.frame_id.clone(),
            question: q.question.clone(),
            answer: q.answer.clone(),
            qa_category: q.category.clone(),
            image_paths: self.image_paths.clone(),
            prev_frame_id: self.prev_frame_id.clone(),
        })
    }
}

/// Frames in file order, parsed on a background thread.
///
/// At most a fixed number of parsed frames are held in memory at once; a
/// schema error ends the stream.
pub struct Ingest {
    rx: Option<Receiver<Result<Frame, IngestError>>>,
    handle: Option<JoinHandle<()>>,
}

impl Iterator for Ingest {
    type Item = Result<Frame, IngestError>;

    fn next(&mut self) -> Option<Self::Item> {
        self.rx.as_ref()?.recv().ok()
    }
}

impl Drop for Ingest {
    fn drop(&mut self) {
        // Closing the channel makes the parser stop at its next send.
        self.rx.take();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

/// Start streaming frames from `qa_json`.
pub fn ingest(qa_json: &Path, image_root: &Path) -> Result<Ingest, IngestError> {
    let file = File::open(qa_json).map_err(|source| IngestError::Open {
        path: qa_json.display().to_string(),
        source,
    })?;
    let (tx, rx) = sync_channel(INGEST_BUFFER);
    let root = image_root.to_path_buf();
    let name = qa_json.display().to_string();
    let handle = std::thread::Builder::new()
        .name("ingest".into())
        .spawn(move || parse_stream(file, &root, &name, &tx))
        .map_err(|source| IngestError::Open {
            path: qa_json.display().to_string(),
            source,
        })?;
    Ok(Ingest {
        rx: Some(rx),
        handle: Some(handle),
    })
}

/// Flatten frames into per-question records.
pub fn ingest_records(
    qa_json: &Path,
    image_root: &Path,
) -> Result<impl Iterator<Item = Result<QARecord, IngestError>>, IngestError> {
    Ok(ingest(qa_json, image_root)?.flat_map(|f| match f {
        Ok(frame) => frame.records().map(Ok).collect::<Vec<_>>(),
        Err(e) => vec![Err(e)],
    }))
}

const STOPPED: &str = "consumer stopped";

fn parse_stream(file: File, root: &Path, name: &str, tx: &SyncSender<Result<Frame, IngestError>>) {
    let mut json = serde_json::Deserializer::from_reader(BufReader::new(file));
    let mut track = serde_path_to_error::Track::new();
    let result = serde_path_to_error::Deserializer::new(&mut json, &mut track)
        .deserialize_seq(SceneVisitor { root, tx })
        .and_then(|()| json.end());
    if let Err(e) = result {
        let message = e.to_string();
        if !message.starts_with(STOPPED) {
            let path = track.path().to_string();
            let _ = tx.send(Err(IngestError::Schema {
                file: name.to_string(),
                path: if path.is_empty() { ".".into() } else { path },
                message,
            }));
        }
    }
}

struct SceneVisitor<'a> {
    root: &'a Path,
    tx: &'a SyncSender<Result<Frame, IngestError>>,
}

impl<'de> Visitor<'de> for SceneVisitor<'_> {
    type Value = ();

    fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("a list of scenes")
    }

    fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> Result<(), A::Error> {
        while seq.next_element_seed(SceneSeed { root: self.root, tx: self.tx })?.is_some() {}
        Ok(())
    }
}

/// Streams one scene's frames. Frames seen before `scene_id` are held
/// until it arrives.
struct SceneSeed<'a> {
    root: &'a Path,
    tx: &'a SyncSender<Result<Frame, IngestError>>,
}

impl SceneSeed<'_> {
    fn emit<E: de::Error>(&self, scene_id: &str, raw: RawFrame) -> Result<(), E> {
        let frame = Frame {
            scene_id: scene_id.to_string(),
            frame_id: raw.frame_id,
            prev_frame_id: raw.prev_frame_id,
            image_paths: raw.image_paths.into_iter().map(|(c, p)| (c, self.root.join(p))).collect(),
            qa: raw.qa.0,
        };
        self.tx.send(Ok(frame)).map_err(|_| E::custom(STOPPED))
    }
}

impl<'de> DeserializeSeed<'de> for SceneSeed<'_> {
    type Value = ();

    fn deserialize<D: Deserializer<'de>>(self, d: D) -> Result<(), D::Error> {
        d.deserialize_map(self)
    }
}

impl<'de> Visitor<'de> for SceneSeed<'_> {
    type Value = ();

    fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("a scene object")
    }

    fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<(), A::Error> {
        let mut scene_id: Option<String> = None;
        let mut held = Vec::new();
        let mut seen_frames = false;
        while let Some(key) = map.next_key::<String>()? {
            match key.as_str() {
                "scene_id" => scene_id = Some(map.next_value()?),
                "key_frames" if !seen_frames => {
                    seen_frames = true;
                    map.next_value_seed(FramesSeed {
                        scene: &self,
                        scene_id: scene_id.as_deref(),
                        held: &mut held,
                    })?;
                }
                "key_frames" => return Err(de::Error::duplicate_field("key_frames")),
                _ => {
                    map.next_value::<de::IgnoredAny>()?;
                }
            }
        }
        let scene_id = scene_id.ok_or_else(|| de::Error::missing_field("scene_id"))?;
        if !seen_frames {
            return Err(de::Error::missing_field("key_frames"));
        }
        for raw in held {
            self.emit(&scene_id, raw)?;
        }
        Ok(())
    }
}

struct FramesSeed<'s, 'a> {
    scene: &'s SceneSeed<'a>,
    scene_id: Option<&'s str>,
    held: &'s mut Vec<RawFrame>,
}

impl<'de> DeserializeSeed<'de> for FramesSeed<'_, '_> {
    type Value = ();

    fn deserialize<D: Deserializer<'de>>(self, d: D) -> Result<(), D::Error> {
        d.deserialize_seq(self)
    }
}

impl<'de> Visitor<'de> for FramesSeed<'_, '_> {
    type Value = ();

    fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("a list of key frames")
    }

    fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> Result<(), A::Error> {
        while let Some(raw) = seq.next_element::<RawFrame>()? {
            match self.scene_id {
                Some(id) => self.scene.emit(id, raw)?,
                None => self.held.push(raw),
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, body: &str) -> PathBuf {
        let p = dir.join("qa.json");
        std::fs::write(&p, body).unwrap();
        p
    }

    const PATHS: &str = r#"{"CAM_FRONT":"f.png","CAM_FRONT_LEFT":"fl.png","CAM_FRONT_RIGHT":"fr.png","CAM_BACK":"b.png","CAM_BACK_LEFT":"bl.png","CAM_BACK_RIGHT":"br.png"}"#;

    #[test]
    fn frames_and_records_in_file_order() {
        let dir = tempfile::tempdir().unwrap();
        let body = format!(
            r#"[{{"scene_id":"s","key_frames":[{{"frame_id":"f0","image_paths":{PATHS},"QA":[{{"question":"q0","answer":"a0"}},{{"question":"q1","answer":"a1","category":"planning"}}]}}]}}]"#
        );
        let path = write(dir.path(), &body);
        let recs: Vec<QARecord> = ingest_records(&path, Path::new("/data")).unwrap().map(Result::unwrap).collect();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].question, "q0");
        assert_eq!(recs[1].qa_category.as_deref(), Some("planning"));
        assert_eq!(recs[0].image_paths[&CameraName::Back], Path::new("/data/b.png"));
        assert_eq!(recs[0].prev_frame_id, None);
    }

    #[test]
    fn categorized_qa_map_keeps_order() {
        let dir = tempfile::tempdir().unwrap();
        let body = format!(
            r#"[{{"scene_id":"s","key_frames":[{{"frame_id":"f0","prev_frame_id":"p","image_paths":{PATHS},"QA":{{"perception":[{{"question":"q0","answer":"a0"}}],"behavior":[{{"question":"q1","answer":"a1"}}]}}}}]}}]"#
        );
        let path = write(dir.path(), &body);
        let frames: Vec<Frame> = ingest(&path, dir.path()).unwrap().map(Result::unwrap).collect();
        let cats: Vec<_> = frames[0].qa.iter().map(|q| q.category.clone().unwrap()).collect();
        assert_eq!(cats, ["perception", "behavior"]);
        assert_eq!(frames[0].prev_frame_id.as_deref(), Some("p"));
    }

    #[test]
    fn schema_errors_are_located() {
        let dir = tempfile::tempdir().unwrap();
        let body = format!(
            r#"[{{"scene_id":"s","key_frames":[{{"frame_id":"f0","image_paths":{PATHS},"QA":[]}},{{"frame_id":"f1","image_paths":{PATHS},"QA":[{{"question":1,"answer":"a"}}]}}]}}]"#
        );
        let path = write(dir.path(), &body);
        let items: Vec<_> = ingest(&path, dir.path()).unwrap().collect();
        assert_eq!(items.len(), 2);
        assert!(items[0].is_ok());
        match &items[1] {
            Err(IngestError::Schema { path, .. }) => assert_eq!(path, "[0].key_frames[1].QA[0].question"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn scene_id_may_follow_the_frames() {
        let dir = tempfile::tempdir().unwrap();
        let body = format!(r#"[{{"key_frames":[{{"frame_id":"f0","image_paths":{PATHS}}}],"scene_id":"late","extra":[1]}}]"#);
        let path = write(dir.path(), &body);
        let frames: Vec<Frame> = ingest(&path, dir.path()).unwrap().map(Result::unwrap).collect();
        assert_eq!(frames[0].scene_id, "late");

        let path = write(dir.path(), r#"[{"key_frames":[]}]"#);
        let items: Vec<_> = ingest(&path, dir.path()).unwrap().collect();
        assert!(matches!(items.as_slice(), [Err(IngestError::Schema { .. })]));
    }

    #[test]
    fn unknown_camera_is_a_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(dir.path(), r#"[{"scene_id":"s","key_frames":[{"frame_id":"f","image_paths":{"CAM_TOP":"x"}}]}]"#);
        let items: Vec<_> = ingest(&path, dir.path()).unwrap().collect();
        assert!(matches!(items.as_slice(), [Err(IngestError::Schema { .. })]));
    }

    #[test]
    fn missing_images_are_reported_per_frame() {
        let dir = tempfile::tempdir().unwrap();
        let mut frame = Frame {
            scene_id: "s".into(),
            frame_id: "f".into(),
            prev_frame_id: None,
            image_paths: BTreeMap::new(),
            qa: vec![],
        };
        assert!(frame.check_images().unwrap_err().contains("CAM_FRONT_LEFT"));
        for c in CameraName::ALL {
            let p = dir.path().join(format!("{c}.png"));
            std::fs::write(&p, b"x").unwrap();
            frame.image_paths.insert(c, p);
        }
        assert!(frame.check_images().is_ok());
        std::fs::remove_file(&frame.image_paths[&CameraName::Back]).unwrap();
        assert!(frame.check_images().unwrap_err().contains("CAM_BACK image"));
    }

    #[test]
    fn dropping_early_stops_the_parser() {
        let dir = tempfile::tempdir().unwrap();
        let frames: Vec<String> = (0..500)
            .map(|i| format!(r#"{{"frame_id":"f{i}","image_paths":{PATHS}}}"#))
            .collect();
        let path = write(dir.path(), &format!(r#"[{{"scene_id":"s","key_frames":[{}]}}]"#, frames.join(",")));
        let mut it = ingest(&path, dir.path()).unwrap();
        assert_eq!(it.next().unwrap().unwrap().frame_id, "f0");
        drop(it);
    }
}
