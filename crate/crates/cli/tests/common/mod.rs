#![allow(dead_code)]

use std::io::{Cursor, Read};
use std::path::{Path, PathBuf};

use deskmark_core::fusion::{IconDetection, RawDetections, TextDetection};
use deskmark_core::BBox;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

pub struct Output {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl Output {
    pub fn json(&self) -> Value {
        let last = self.stdout.lines().last().unwrap_or_default();
        serde_json::from_str(last).unwrap_or_else(|e| panic!("{e}: {}", self.stdout))
    }

    pub fn error(&self) -> Value {
        serde_json::from_str(self.stderr.trim()).unwrap_or_else(|e| panic!("{e}: {}", self.stderr))
    }
}

/// Runs the CLI in-process.
pub fn run(args: &[&str], vars: &[(&str, &str)]) -> Output {
    let argv = std::iter::once("deskmark").chain(args.iter().copied()).map(Into::into);
    let vars: Vec<(String, String)> = vars.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = deskmark_cli::main_with(argv, &vars, &mut out, &mut err);
    Output {
        code,
        stdout: String::from_utf8(out).unwrap(),
        stderr: String::from_utf8(err).unwrap(),
    }
}

pub fn ok(args: &[&str]) -> Output {
    let o = run(args, &[]);
    assert_eq!(o.code, 0, "{args:?}: {}", o.stderr);
    o
}

pub const SCREEN_W: u32 = 320;
pub const SCREEN_H: u32 = 200;
const LABELS: [&str; 6] = ["OK", "Cancel", "File", "Save as", "Search", "Help"];

/// Detections for one synthetic screen: a jittered grid of icons, some
/// with a label inside, plus a few free-standing text lines.
pub fn synthetic_detections(rng: &mut ChaCha8Rng) -> RawDetections {
    let mut icons = Vec::new();
    let mut texts = Vec::new();
    for row in 0..3 {
        for col in 0..5 {
            let x = 10.0 + 60.0 * col as f64 + rng.random_range(0.0..8.0);
            let y = 12.0 + 50.0 * row as f64 + rng.random_range(0.0..8.0);
            let w = rng.random_range(24.0..40.0);
            let h = rng.random_range(16.0..28.0);
            icons.push(IconDetection {
                bbox: BBox::new(x, y, x + w, y + h).unwrap(),
                confidence: rng.random_range(0.3..1.0),
            });
            if rng.random_bool(0.4) {
                texts.push(TextDetection {
                    bbox: BBox::new(x + 3.0, y + 3.0, x + w - 3.0, y + h - 3.0).unwrap(),
                    text: LABELS[rng.random_range(0..LABELS.len())].into(),
                    confidence: rng.random_range(0.5..1.0),
                });
            }
        }
    }
    for i in 0..3 {
        let y = 165.0 + 10.0 * i as f64;
        texts.push(TextDetection {
            bbox: BBox::new(20.0 + 40.0 * i as f64, y, 90.0 + 40.0 * i as f64, y + 8.0).unwrap(),
            text: format!("status line {i}"),
            confidence: 0.9,
        });
    }
    RawDetections {
        text_boxes: texts,
        icon_boxes: icons,
        image_width: SCREEN_W,
        image_height: SCREEN_H,
    }
}

pub fn screen_png(det: &RawDetections, shade: u8) -> Vec<u8> {
    let mut img = image::RgbaImage::from_pixel(SCREEN_W, SCREEN_H, image::Rgba([shade, shade, 250, 255]));
    for b in det.icon_boxes.iter().map(|i| i.bbox).chain(det.text_boxes.iter().map(|t| t.bbox)) {
        for y in b.y1() as u32..(b.y2() as u32).min(SCREEN_H) {
            for x in b.x1() as u32..(b.x2() as u32).min(SCREEN_W) {
                img.put_pixel(x, y, image::Rgba([40, 40, 40, 255]));
            }
        }
    }
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png).unwrap();
    buf.into_inner()
}

/// Writes `n` screenshots, their stub detections under `detections/` and a
/// `sources.jsonl` cycling through three OSes.
pub fn write_screens(dir: &Path, n: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    std::fs::create_dir_all(dir.join("detections")).unwrap();
    let mut sources = String::new();
    for i in 0..n {
        let id = format!("shot-{i:02}");
        let det = synthetic_detections(&mut rng);
        std::fs::write(dir.join(format!("{id}.png")), screen_png(&det, 200 + i as u8)).unwrap();
        std::fs::write(dir.join("detections").join(format!("{id}.json")), serde_json::to_string(&det).unwrap()).unwrap();
        let os = ["windows", "macos", "linux"][i % 3];
        sources.push_str(&json!({"image_id": id, "os": os, "source": "synthetic"}).to_string());
        sources.push('\n');
    }
    std::fs::write(dir.join("sources.jsonl"), sources).unwrap();
}

/// Files under `root`, relative path and bytes, sorted by path. Lock files
/// are skipped.
pub fn snapshot(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else if p.extension().is_none_or(|x| x != "lock") {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort();
    out
}

/// Header line of a JSONL artifact.
pub fn artifact_meta(path: &Path) -> Option<deskmark_core::jsonl::ArtifactMeta> {
    let f = std::io::BufReader::new(std::fs::File::open(path).unwrap());
    deskmark_core::jsonl::read_lines_with_meta::<Value, _>(f).unwrap().0
}

pub fn agent() -> ureq::Agent {
    ureq::Agent::config_builder().http_status_as_error(false).build().into()
}

pub fn get(url: &str, token: Option<&str>) -> (u16, String) {
    let mut req = agent().get(url);
    if let Some(t) = token {
        req = req.header("Authorization", &format!("Bearer {t}"));
    }
    let mut resp = req.call().unwrap();
    let mut body = String::new();
    resp.body_mut().as_reader().read_to_string(&mut body).unwrap();
    (resp.status().as_u16(), body)
}

pub fn get_bytes(url: &str) -> (u16, Option<String>, Vec<u8>) {
    let mut resp = agent().get(url).call().unwrap();
    let ct = resp
        .headers()
        .get("content-type")
        .and_then(|v| v.to_str().ok())
        .map(str::to_string);
    let mut body = Vec::new();
    resp.body_mut().as_reader().read_to_end(&mut body).unwrap();
    (resp.status().as_u16(), ct, body)
}

pub fn post(url: &str, body: &Value, token: Option<&str>) -> (u16, String) {
    let mut req = agent().post(url).header("Content-Type", "application/json");
    if let Some(t) = token {
        req = req.header("Authorization", &format!("Bearer {t}"));
    }
    let mut resp = req.send(body.to_string()).unwrap();
    let mut text = String::new();
    resp.body_mut().as_reader().read_to_string(&mut text).unwrap();
    (resp.status().as_u16(), text)
}
