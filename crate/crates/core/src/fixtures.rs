//! Seeded synthetic datasets in the input format.
//!
//! Every view is black with a few white, well separated rectangles, so the
//! synthetic mask provider finds exactly one component under each prompt.

use std::io;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::ctag::CameraName;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FixtureSpec {
    /// Questions in total; the last frame may hold fewer than the others.
    pub records: usize,
    pub view_w: u32,
    pub view_h: u32,
    pub seed: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            records: 2 * QA_PER_FRAME,
            view_w: 1600,
            view_h: 900,
            seed: 0,
        }
    }
}

/// Paths of a written fixture.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fixture {
    pub qa_json: PathBuf,
    pub image_root: PathBuf,
    pub frames: usize,
    pub records: usize,
}

/// Questions per frame: one multiple choice and two open.
pub const QA_PER_FRAME: usize = 3;

const OBJECTS: [&str; 5] = ["car", "truck", "pedestrian", "bus", "cyclist"];
const SIDES: [&str; 4] = ["front", "back", "front left", "back right"];
const ACTIONS: [&str; 4] = [
    "keep going at the same speed and stay in the current lane",
    "slow down gradually and yield to the crossing traffic",
    "stop before the crosswalk and wait for the pedestrians",
    "change to the left lane after checking the mirrors",
];
const OPTIONS: [&str; 4] = ["Going ahead.", "Turn left.", "Turn right.", "Stopped."];

struct Rect {
    x: u32,
    y: u32,
    w: u32,
    h: u32,
}

impl Rect {
    fn center(&self) -> (f64, f64) {
        (
            f64::from(self.x) + f64::from(self.w) / 2.0,
            f64::from(self.y) + f64::from(self.h) / 2.0,
        )
    }
}

/// Up to three rectangles, each inside its own cell of a 4x2 grid.
fn draw_view(rng: &mut ChaCha8Rng, w: u32, h: u32) -> (RgbImage, Vec<Rect>) {
    let mut img = RgbImage::new(w, h);
    let (cw, ch) = (w / 4, h / 2);
    let mut cells: Vec<u32> = (0..8).collect();
    cells.shuffle(rng);
    let mut rects = Vec::new();
    for &cell in cells.iter().take(rng.gen_range(1..=3)) {
        let (cx, cy) = ((cell % 4) * cw, (cell / 4) * ch);
        let rw = rng.gen_range(cw / 6..=cw / 2).max(2);
        let rh = rng.gen_range(ch / 6..=ch / 2).max(2);
        let x = cx + 1 + rng.gen_range(0..cw - rw - 1);
        let y = cy + 1 + rng.gen_range(0..ch - rh - 1);
        for py in y..y + rh {
            for px in x..x + rw {
                img.put_pixel(px, py, Rgb([255, 255, 255]));
            }
        }
        rects.push(Rect { x, y, w: rw, h: rh });
    }
    (img, rects)
}

fn tag(id: usize, camera: CameraName, r: &Rect) -> String {
    let (x, y) = r.center();
    format!("<c{id},{camera},{x:.1},{y:.1}>")
}

/// Write `qa.json` and `images/` under `dir`.
pub fn write_fixture(dir: &Path, spec: &FixtureSpec) -> io::Result<Fixture> {
    if spec.view_w < 64 || spec.view_h < 32 {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "views must be at least 64x32"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let image_root = dir.join("images");
    std::fs::create_dir_all(&image_root)?;
    let frame_count = spec.records.div_ceil(QA_PER_FRAME);
    let mut frames = Vec::with_capacity(frame_count);
    for i in 0..frame_count {
        let frame_id = format!("frame_{i:04}");
        let frame_dir = image_root.join(&frame_id);
        std::fs::create_dir_all(&frame_dir)?;
        let mut image_paths = serde_json::Map::new();
        let mut objects = Vec::new();
        for camera in CameraName::ALL {
            let (img, rects) = draw_view(&mut rng, spec.view_w, spec.view_h);
            img.save(frame_dir.join(format!("{camera}.png")))
                .map_err(|e| io::Error::new(io::ErrorKind::Other, e))?;
            image_paths.insert(camera.to_string(), json!(format!("{frame_id}/{camera}.png")));
            // Tag the largest blob so the largest-mask rule keeps the prompted one.
            let largest = rects.into_iter().max_by_key(|r| r.w * r.h).expect("at least one rectangle");
            objects.push((camera, largest));
        }
        objects.shuffle(&mut rng);
        let (cam1, r1) = &objects[0];
        let (cam2, r2) = &objects[1];
        let (t1, t2) = (tag(1, *cam1, r1), tag(2, *cam2, r2));

        let letter = rng.gen_range(0..4);
        let options: Vec<String> = OPTIONS
            .iter()
            .enumerate()
            .map(|(k, o)| format!("{}. {o}", (b'A' + k as u8) as char))
            .collect();
        let mcq = json!({
            "question": format!(
                "What is the moving status of object {t1}? Please select the correct answer from the following options: {}",
                options.join(" ")
            ),
            "answer": options[letter],
            "category": "behavior",
        });
        let perception = json!({
            "question": "What are the important objects in the current scene? Those objects will be considered for the future reasoning and driving decision.",
            "answer": format!(
                "There is a {} to the {} of the ego vehicle {t1}, and a {} to the {} of the ego vehicle {t2}.",
                OBJECTS.choose(&mut rng).expect("non-empty"),
                SIDES.choose(&mut rng).expect("non-empty"),
                OBJECTS.choose(&mut rng).expect("non-empty"),
                SIDES.choose(&mut rng).expect("non-empty"),
            ),
            "category": "perception",
        });
        let planning = json!({
            "question": "In this scenario, what are safe actions to take for the ego vehicle?",
            "answer": format!(
                "The ego vehicle should {} in frame {i} of the drive.",
                ACTIONS.choose(&mut rng).expect("non-empty")
            ),
            "category": "planning",
        });
        let mut qa = vec![mcq, perception, planning];
        qa.truncate(spec.records - i * QA_PER_FRAME);
        let mut frame = json!({
            "frame_id": frame_id,
            "image_paths": image_paths,
            "QA": qa,
        });
        if i > 0 {
            frame["prev_frame_id"] = json!(format!("frame_{:04}", i - 1));
        }
        frames.push(frame);
    }
    let qa_json = dir.join("qa.json");
    let body = json!([{ "scene_id": "scene_0000", "key_frames": frames }]);
    std::fs::write(&qa_json, serde_json::to_vec_pretty(&body)?)?;
    Ok(Fixture {
        qa_json,
        image_root,
        frames: frame_count,
        records: spec.records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_bytes() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let spec = FixtureSpec {
            view_w: 160,
            view_h: 90,
            ..Default::default()
        };
        write_fixture(a.path(), &spec).unwrap();
        write_fixture(b.path(), &spec).unwrap();
        for rel in ["qa.json", "images/frame_0001/CAM_BACK.png"] {
            assert_eq!(std::fs::read(a.path().join(rel)).unwrap(), std::fs::read(b.path().join(rel)).unwrap());
        }
    }
}
