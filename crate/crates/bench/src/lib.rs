//! Seeded input generators shared by the benchmarks.

use deskmark_core::dataset::{ElementKind, UiElement};
use deskmark_core::eval::{Geometry, GroundingSample, Platform, Prediction};
use deskmark_core::fusion::{IconDetection, RawDetections, TextDetection};
use deskmark_core::BBox;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const WIDTH: u32 = 1920;
pub const HEIGHT: u32 = 1080;

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let w = rng.random_range(8.0..200.0);
    let h = rng.random_range(8.0..60.0);
    let x = rng.random_range(0.0..WIDTH as f64 - w);
    let y = rng.random_range(0.0..HEIGHT as f64 - h);
    BBox::new(x, y, x + w, y + h).expect("positive size")
}

pub fn boxes(n: usize, seed: u64) -> Vec<BBox> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| random_box(&mut rng)).collect()
}

/// A screen with `icons` icon boxes and `texts` text boxes; about a third of
/// the texts sit inside an icon.
pub fn detections(icons: usize, texts: usize, seed: u64) -> RawDetections {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let icon_boxes: Vec<IconDetection> = (0..icons)
        .map(|_| IconDetection { bbox: random_box(&mut rng), confidence: rng.random_range(0.0..1.0) })
        .collect();
    let text_boxes = (0..texts)
        .map(|i| {
            let bbox = match icon_boxes.get(i * 3) {
                Some(host) if i % 3 == 0 => host.bbox,
                _ => random_box(&mut rng),
            };
            TextDetection { bbox, text: format!("label {i}"), confidence: rng.random_range(0.0..1.0) }
        })
        .collect();
    RawDetections { text_boxes, icon_boxes, image_width: WIDTH, image_height: HEIGHT }
}

pub fn elements(n: usize, seed: u64) -> Vec<UiElement> {
    boxes(n, seed)
        .into_iter()
        .map(|bbox| UiElement {
            mark_id: 0,
            bbox,
            kind: ElementKind::IconWidget,
            embedded_text: None,
            caption: None,
            source_confidence: 1.0,
        })
        .collect()
}

/// `n` samples and noisy box predictions for them.
pub fn grounding(n: usize, seed: u64) -> (Vec<Prediction>, Vec<GroundingSample>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let platforms = [Platform::Mobile, Platform::Desktop, Platform::Web];
    let mut preds = Vec::with_capacity(n);
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let gt = random_box(&mut rng);
        let d = rng.random_range(-10.0..10.0f64).max(-gt.x1().min(gt.y1()));
        let pred = BBox::new(gt.x1() + d, gt.y1() + d, gt.x2() + d, gt.y2() + d).expect("shifted box");
        let ocr = i % 4 == 0;
        samples.push(GroundingSample {
            sample_id: format!("s{i}"),
            image_id: format!("img{}", i / 10),
            instruction: "click it".into(),
            gt_bbox: gt,
            platform: platforms[i % 3],
            kind: if ocr { ElementKind::Text } else { ElementKind::IconWidget },
            gt_text: ocr.then(|| "open the file menu".into()),
        });
        preds.push(Prediction {
            sample_id: format!("s{i}"),
            geometry: Some(Geometry::BBox(pred)),
            pred_text: ocr.then(|| "open file menu".into()),
        });
    }
    (preds, samples)
}
