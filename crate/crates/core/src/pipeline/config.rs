use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::gbm::Variant;
use crate::roi;
use crate::synth::SynthConfig;
use crate::{Error, Result};

/// Where `roi` takes each knee's box from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoiSource {
    /// The trained stand-in detector, gated at `roi_threshold`.
    Detector,
    /// Manual annotations only; unannotated knees count as gate misses.
    Annotations,
    /// The detector, with manual annotations filling in gate misses.
    Rescue,
}

impl RoiSource {
    pub fn code(self) -> &'static str {
        match self {
            RoiSource::Detector => "detector",
            RoiSource::Annotations => "annotations",
            RoiSource::Rescue => "rescue",
        }
    }
}

impl FromStr for RoiSource {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "detector" => Ok(RoiSource::Detector),
            "annotations" => Ok(RoiSource::Annotations),
            "rescue" => Ok(RoiSource::Rescue),
            other => Err(format!("expected detector, annotations or rescue, got {other:?}")),
        }
    }
}

/// Settings shared by every command. Values come from defaults, then a
/// `key = value` config file, then command-line flags.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub out: PathBuf,
    pub manifest: Option<PathBuf>,
    pub images: Option<PathBuf>,
    pub k: usize,
    pub seed: u64,
    pub roi_threshold: f64,
    pub roi_source: RoiSource,
    pub variant: Option<Variant>,
    pub budget: usize,
    pub inner_folds: usize,
    pub bootstrap: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_step: usize,
    pub dropout: f64,
    pub cnn_widths: Vec<usize>,
    pub cnn_fc: usize,
    pub roi_window: usize,
    pub roi_train_images: usize,
    pub roi_epochs: usize,
    pub subjects: usize,
    pub knees_per_subject: usize,
    pub prevalence: f64,
    pub clinical_effect: f64,
    pub image_effect: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        RunConfig {
            out: PathBuf::from("run"),
            manifest: None,
            images: None,
            k: 5,
            seed: 0,
            roi_threshold: roi::DEFAULT_THRESHOLD,
            roi_source: RoiSource::Detector,
            variant: None,
            budget: 20,
            inner_folds: 3,
            bootstrap: 2000,
            epochs: 20,
            batch_size: 64,
            lr0: 0.001,
            lr_step: 8,
            dropout: 0.5,
            cnn_widths: vec![32, 64, 128],
            cnn_fc: 256,
            roi_window: 64,
            roi_train_images: 150,
            roi_epochs: 12,
            subjects: synth.n_subjects,
            knees_per_subject: synth.knees_per_subject,
            prevalence: synth.prevalence,
            clinical_effect: synth.clinical_effect,
            image_effect: synth.image_effect,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::validation(format!("config `{key}`: cannot parse `{value}`: {e}")))
}

impl RunConfig {
    /// Keys accepted by [`RunConfig::set`].
    pub const KEYS: [&'static str; 26] = [
        "out",
        "manifest",
        "images",
        "k",
        "seed",
        "roi_threshold",
        "roi_source",
        "variant",
        "budget",
        "inner_folds",
        "bootstrap",
        "epochs",
        "batch_size",
        "lr0",
        "lr_step",
        "dropout",
        "cnn_widths",
        "cnn_fc",
        "roi_window",
        "roi_train_images",
        "roi_epochs",
        "subjects",
        "knees_per_subject",
        "prevalence",
        "clinical_effect",
        "image_effect",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "out" => self.out = PathBuf::from(v),
            "manifest" => self.manifest = Some(PathBuf::from(v)),
            "images" => self.images = Some(PathBuf::from(v)),
            "k" => self.k = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "roi_threshold" => self.roi_threshold = parse(key, v)?,
            "roi_source" => self.roi_source = parse(key, v)?,
            "variant" => self.variant = Some(Variant::try_from(parse::<u8>(key, v)?)?),
            "budget" => self.budget = parse(key, v)?,
            "inner_folds" => self.inner_folds = parse(key, v)?,
            "bootstrap" => self.bootstrap = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "lr0" => self.lr0 = parse(key, v)?,
            "lr_step" => self.lr_step = parse(key, v)?,
            "dropout" => self.dropout = parse(key, v)?,
            "cnn_widths" => {
                self.cnn_widths = v.split(',').map(|w| parse(key, w.trim())).collect::<Result<_>>()?;
            }
            "cnn_fc" => self.cnn_fc = parse(key, v)?,
            "roi_window" => self.roi_window = parse(key, v)?,
            "roi_train_images" => self.roi_train_images = parse(key, v)?,
            "roi_epochs" => self.roi_epochs = parse(key, v)?,
            "subjects" => self.subjects = parse(key, v)?,
            "knees_per_subject" => self.knees_per_subject = parse(key, v)?,
            "prevalence" => self.prevalence = parse(key, v)?,
            "clinical_effect" => self.clinical_effect = parse(key, v)?,
            "image_effect" => self.image_effect = parse(key, v)?,
            other => return Err(Error::validation(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::validation(format!("config line {}: expected key = value", i + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 || self.inner_folds < 2 {
            return Err(Error::validation("k and inner_folds must be at least 2"));
        }
        if !(self.roi_threshold > 0.0 && self.roi_threshold <= 1.0) {
            return Err(Error::validation("roi_threshold must be in (0, 1]"));
        }
        if self.budget == 0 || self.bootstrap == 0 || self.epochs == 0 {
            return Err(Error::validation("budget, bootstrap and epochs must be >= 1"));
        }
        if self.cnn_widths.len() != 3 || self.cnn_widths.contains(&0) || self.cnn_fc == 0 {
            return Err(Error::validation(
                "cnn_widths needs three positive widths and cnn_fc > 0",
            ));
        }
        if self.roi_window < 8 {
            return Err(Error::validation("roi_window must be at least 8 pixels"));
        }
        Ok(())
    }

    /// Every setting as sorted `key=value` lines.
    pub fn echo(&self) -> Vec<String> {
        let opt = |p: &Option<PathBuf>| p.as_ref().map_or("-".to_string(), |p| p.display().to_string());
        let widths: Vec<String> = self.cnn_widths.iter().map(|w| w.to_string()).collect();
        let mut lines = vec![
            format!("out={}", self.out.display()),
            format!("manifest={}", opt(&self.manifest)),
            format!("images={}", opt(&self.images)),
            format!("k={}", self.k),
            format!("seed={}", self.seed),
            format!("roi_threshold={}", self.roi_threshold),
            format!("roi_source={}", self.roi_source.code()),
            format!(
                "variant={}",
                self.variant.map_or("all".to_string(), |v| v.index().to_string())
            ),
            format!("budget={}", self.budget),
            format!("inner_folds={}", self.inner_folds),
            format!("bootstrap={}", self.bootstrap),
            format!("epochs={}", self.epochs),
            format!("batch_size={}", self.batch_size),
            format!("lr0={}", self.lr0),
            format!("lr_step={}", self.lr_step),
            format!("dropout={}", self.dropout),
            format!("cnn_widths={}", widths.join(",")),
            format!("cnn_fc={}", self.cnn_fc),
            format!("roi_window={}", self.roi_window),
            format!("roi_train_images={}", self.roi_train_images),
            format!("roi_epochs={}", self.roi_epochs),
            format!("subjects={}", self.subjects),
            format!("knees_per_subject={}", self.knees_per_subject),
            format!("prevalence={}", self.prevalence),
            format!("clinical_effect={}", self.clinical_effect),
            format!("image_effect={}", self.image_effect),
        ];
        lines.sort();
        lines
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            n_subjects: self.subjects,
            knees_per_subject: self.knees_per_subject,
            prevalence: self.prevalence,
            clinical_effect: self.clinical_effect,
            image_effect: self.image_effect,
            seed: self.seed,
            ..SynthConfig::default()
        }
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.manifest.clone().unwrap_or_else(|| self.out.join("manifest.csv"))
    }

    pub fn images_dir(&self) -> PathBuf {
        self.images.clone().unwrap_or_else(|| self.out.join("images"))
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}
