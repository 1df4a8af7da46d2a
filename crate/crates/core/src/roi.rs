//! Patellar region-of-interest selection.
//!
//! Any detector that produces scored boxes can feed [`select_roi`], which
//! keeps the most confident box only if it reaches the certainty threshold
//! (0.90 by default). Knees with no qualifying box are excluded downstream.
//!
//! [`WindowDetector`] is a stand-in detector: a small CNN scores square
//! windows on a grid (stride a quarter of the window) and greedy
//! non-maximum suppression at IoU 0.3 removes duplicates. Manual annotations
//! enter through [`load_annotations`] with confidence 1.0, so they always pass
//! the gate.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::datamodel::{RecordKey, Side, Visit};
use crate::imaging::{resize_values, Image};
use crate::neuralnet::{self, ArchDescriptor, CnnModel, TrainConfig};
use crate::rng;
use crate::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.90;
pub const NMS_IOU: f64 = 0.3;
pub const ANNOTATION_HEADER: [&str; 7] = ["subject_id", "side", "visit", "x", "y", "w", "h"];

/// Axis-aligned box: top-left pixel plus size. The corner may lie outside
/// the image; that is only checked when the box is cropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RoiBox {
    pub x: i32,
    pub y: i32,
    pub w: u32,
    pub h: u32,
}

impl RoiBox {
    pub fn new(x: i32, y: i32, w: u32, h: u32) -> Self {
        RoiBox { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        f64::from(self.w) * f64::from(self.h)
    }

    pub fn center(&self) -> (f64, f64) {
        (
            f64::from(self.x) + f64::from(self.w) / 2.0,
            f64::from(self.y) + f64::from(self.h) / 2.0,
        )
    }

    /// The same box in an image rescaled by `factor`.
    pub fn scaled(&self, factor: f64) -> RoiBox {
        RoiBox {
            x: (f64::from(self.x) * factor).round() as i32,
            y: (f64::from(self.y) * factor).round() as i32,
            w: ((f64::from(self.w) * factor).round() as u32).max(1),
            h: ((f64::from(self.h) * factor).round() as u32).max(1),
        }
    }
}

pub fn iou(a: &RoiBox, b: &RoiBox) -> f64 {
    let ix0 = i64::from(a.x).max(i64::from(b.x));
    let iy0 = i64::from(a.y).max(i64::from(b.y));
    let ix1 = (i64::from(a.x) + i64::from(a.w)).min(i64::from(b.x) + i64::from(b.w));
    let iy1 = (i64::from(a.y) + i64::from(a.h)).min(i64::from(b.y) + i64::from(b.h));
    if ix1 <= ix0 || iy1 <= iy0 {
        return 0.0;
    }
    let inter = ((ix1 - ix0) * (iy1 - iy0)) as f64;
    inter / (a.area() + b.area() - inter)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoiDetection {
    pub bbox: RoiBox,
    pub confidence: f64,
}

/// The most confident detection at or above `threshold`, if any. Ties keep
/// the earliest detection.
///
/// # Panics
/// If `threshold` is outside `(0, 1]`.
pub fn select_roi(detections: &[RoiDetection], threshold: f64) -> Option<RoiDetection> {
    assert!(
        threshold > 0.0 && threshold <= 1.0,
        "ROI threshold {threshold} outside (0, 1]"
    );
    detections
        .iter()
        .filter(|d| d.confidence >= threshold)
        .fold(None, |best: Option<&RoiDetection>, d| match best {
            Some(b) if b.confidence >= d.confidence => Some(b),
            _ => Some(d),
        })
        .copied()
}

/// Greedy non-maximum suppression: detections are visited by descending
/// confidence and dropped if they overlap a kept box with IoU >= `max_iou`.
pub fn non_max_suppression(detections: &[RoiDetection], max_iou: f64) -> Vec<RoiDetection> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .confidence
            .total_cmp(&detections[a].confidence)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<RoiDetection> = Vec::new();
    for i in order {
        let d = detections[i];
        if kept.iter().all(|k| iou(&k.bbox, &d.bbox) < max_iou) {
            kept.push(d);
        }
    }
    kept
}

/// Sliding-window patella scorer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowDetector {
    pub scorer: CnnModel,
    /// Side of the square window in image pixels.
    pub window: usize,
    pub stride: usize,
    pub nms_iou: f64,
}

fn grid_positions(len: usize, window: usize, stride: usize) -> Vec<usize> {
    let last = len - window;
    let mut p: Vec<usize> = (0..=last).step_by(stride.max(1)).collect();
    if p.last() != Some(&last) {
        p.push(last);
    }
    p
}

/// Window pixels scaled to `[0, 1]` and resized to the scorer's input.
fn window_input(img: &Image, x: usize, y: usize, window: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let max = f64::from(img.depth().max_value());
    let mut values = Vec::with_capacity(window * window);
    for yy in y..y + window {
        for xx in x..x + window {
            values.push(f64::from(img.get(xx, yy)) / max);
        }
    }
    if out_h == window && out_w == window {
        return values;
    }
    resize_values(
        &values,
        window,
        window,
        out_w,
        out_h,
        window as f64 / out_w as f64,
        window as f64 / out_h as f64,
    )
}

impl WindowDetector {
    pub fn new(scorer: CnnModel, window: usize) -> Self {
        WindowDetector {
            scorer,
            window,
            stride: (window / 4).max(1),
            nms_iou: NMS_IOU,
        }
    }

    /// Every grid window with its positive-class score, before suppression.
    pub fn score_windows(&self, img: &Image) -> Result<Vec<RoiDetection>> {
        if img.width() < self.window || img.height() < self.window {
            return Err(Error::validation(format!(
                "{}x{} image is smaller than the {}-pixel detection window",
                img.width(),
                img.height(),
                self.window
            )));
        }
        let (ih, iw) = (self.scorer.descriptor.input_height, self.scorer.descriptor.input_width);
        let xs = grid_positions(img.width(), self.window, self.stride);
        let ys = grid_positions(img.height(), self.window, self.stride);
        let mut boxes = Vec::with_capacity(xs.len() * ys.len());
        let mut inputs = Vec::with_capacity(xs.len() * ys.len());
        for &y in &ys {
            for &x in &xs {
                boxes.push(RoiBox::new(x as i32, y as i32, self.window as u32, self.window as u32));
                inputs.push(window_input(img, x, y, self.window, ih, iw));
            }
        }
        let refs: Vec<&[f64]> = inputs.iter().map(Vec::as_slice).collect();
        let scores = self.scorer.predict_many(&refs, 64)?;
        Ok(boxes
            .into_iter()
            .zip(scores)
            .map(|(bbox, confidence)| RoiDetection { bbox, confidence })
            .collect())
    }

    /// Scored windows after non-maximum suppression, most confident first.
    pub fn detect(&self, img: &Image) -> Result<Vec<RoiDetection>> {
        Ok(non_max_suppression(&self.score_windows(img)?, self.nms_iou))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let d: WindowDetector = serde_json::from_str(&text)?;
        d.scorer.validate()?;
        Ok(d)
    }
}

/// Runs the stand-in detector on a preprocessed 8-bit image.
pub fn detect_standin(img: &Image, detector: &WindowDetector) -> Result<Vec<RoiDetection>> {
    detector.detect(img)
}

#[derive(Debug, Clone)]
pub struct ScorerTraining {
    pub window: usize,
    pub arch: ArchDescriptor,
    pub train: TrainConfig,
    pub positives_per_image: usize,
    pub negatives_per_image: usize,
    /// Negatives overlap the annotated box by less than this IoU.
    pub negative_max_iou: f64,
}

impl ScorerTraining {
    pub fn new(window: usize, seed: u64) -> Self {
        ScorerTraining {
            window,
            arch: ArchDescriptor::default().with_input(32, 32).with_widths(&[4, 8, 8], 32),
            train: TrainConfig {
                batch_size: 32,
                lr0: 0.01,
                epochs: 12,
                lr_step: 6,
                dropout_p: 0.2,
                seed,
                ..TrainConfig::default()
            },
            positives_per_image: 3,
            negatives_per_image: 6,
            negative_max_iou: 0.2,
        }
    }
}

/// Trains a window scorer from preprocessed images and their patella boxes.
/// Positive windows are centred on the box with up to half a stride of
/// jitter, matching how far a grid window can sit from the true box.
pub fn train_window_detector(samples: &[(&Image, RoiBox)], setup: &ScorerTraining) -> Result<WindowDetector> {
    let window = setup.window;
    let stride = (window / 4).max(1);
    let (ih, iw) = (setup.arch.input_height, setup.arch.input_width);
    let mut r = rng::stream(rng::derive(setup.train.seed, "roi-windows"), 0);
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for (img, gt) in samples {
        if img.width() < window || img.height() < window {
            return Err(Error::validation("training image smaller than the detection window"));
        }
        let max_x = (img.width() - window) as i64;
        let max_y = (img.height() - window) as i64;
        let (cx, cy) = gt.center();
        let jitter = (stride / 2) as i64;
        for _ in 0..setup.positives_per_image {
            let x = (cx - window as f64 / 2.0).round() as i64 + r.random_range(-jitter..=jitter);
            let y = (cy - window as f64 / 2.0).round() as i64 + r.random_range(-jitter..=jitter);
            let (x, y) = (x.clamp(0, max_x) as usize, y.clamp(0, max_y) as usize);
            inputs.push(window_input(img, x, y, window, ih, iw));
            labels.push(1u8);
        }
        let mut drawn = 0;
        let mut attempts = 0;
        while drawn < setup.negatives_per_image && attempts < 200 {
            attempts += 1;
            let x = r.random_range(0..=max_x) as usize;
            let y = r.random_range(0..=max_y) as usize;
            let b = RoiBox::new(x as i32, y as i32, window as u32, window as u32);
            if iou(&b, gt) < setup.negative_max_iou {
                inputs.push(window_input(img, x, y, window, ih, iw));
                labels.push(0u8);
                drawn += 1;
            }
        }
    }
    let refs: Vec<&[f64]> = inputs.iter().map(Vec::as_slice).collect();
    let outcome = neuralnet::train(&refs, &labels, &setup.arch, &setup.train)?;
    Ok(WindowDetector::new(outcome.model, window))
}

pub fn save_annotations(annotations: &BTreeMap<RecordKey, RoiBox>, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(ANNOTATION_HEADER)?;
    for (k, b) in annotations {
        w.write_record([
            k.subject_id.clone(),
            k.side.code().to_string(),
            k.visit.code().to_string(),
            b.x.to_string(),
            b.y.to_string(),
            b.w.to_string(),
            b.h.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads manual annotations; each becomes a detection with confidence 1.0.
/// Boxes are not checked against image bounds here.
pub fn load_annotations(path: &Path) -> Result<BTreeMap<RecordKey, RoiDetection>> {
    let mut reader = csv::Reader::from_path(path)?;
    let header = reader.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != ANNOTATION_HEADER {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            row: 1,
            column: "header".into(),
            message: format!("expected {}", ANNOTATION_HEADER.join(",")),
        });
    }
    let mut out = BTreeMap::new();
    for (i, row) in reader.records().enumerate() {
        let row_no = i + 2;
        let row = row?;
        let field = |c: usize| row.get(c).unwrap_or("");
        let err = |c: usize, m: String| Error::Parse {
            path: path.to_path_buf(),
            row: row_no,
            column: ANNOTATION_HEADER[c].to_string(),
            message: m,
        };
        let side: Side = field(1).parse().map_err(|e| err(1, e))?;
        let visit: Visit = field(2).parse().map_err(|e| err(2, e))?;
        let int = |c: usize| field(c).parse::<i64>().map_err(|e| err(c, e.to_string()));
        let (x, y, w, h) = (int(3)?, int(4)?, int(5)?, int(6)?);
        if w < 1 || h < 1 {
            return Err(err(5, format!("box size {w}x{h} must be positive")));
        }
        let key = RecordKey {
            subject_id: field(0).to_string(),
            side,
            visit,
        };
        let det = RoiDetection {
            bbox: RoiBox::new(x as i32, y as i32, w as u32, h as u32),
            confidence: 1.0,
        };
        if out.insert(key.clone(), det).is_some() {
            return Err(err(0, format!("duplicate annotation for {key}")));
        }
    }
    Ok(out)
}
