//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use cfnet::features::HogConfig;
use cfnet::losses::LossWeights;
use cfnet::model::{ClassifierConfig, EncoderConfig, STAGES};
use cfnet::ndgrad::AdamWConfig;
use cfnet::pipeline::{AugmentConfig, FinetuneConfig, HogSource, Imbalance, PretrainConfig, SplitSpec, SynthConfig};
use cfnet::sarsim::{GroundTruth, RadarParams};

use crate::CliError;

/// Every accepted key with its default and a one-line description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "0", "global seed; every random stream derives from it"),
    ("radar.wavelength", "0.055", "carrier wavelength (m)"),
    ("radar.chirp_rate", "1.5e12", "range chirp rate (Hz/s)"),
    ("radar.pulse_duration", "1e-6", "pulse duration (s)"),
    ("radar.sample_rate", "2e6", "range sampling rate (Hz)"),
    ("radar.velocity", "150", "platform velocity (m/s)"),
    ("radar.ref_range", "10000", "slant range of the scene centre (m)"),
    ("radar.prf", "0", "pulse repetition frequency (Hz); 0 = matched to the grid"),
    ("radar.rcmc", "true", "range cell migration correction"),
    ("dataset.classes", "6", "number of target classes (2..=10)"),
    ("dataset.per_class", "34", "samples per class (largest class under table1)"),
    ("dataset.size", "64", "image side in pixels (multiple of 32)"),
    ("dataset.imbalance", "balanced", "balanced | table1"),
    ("dataset.split", "70/15/15", "train/val/test percentages"),
    ("dataset.gt_source", "rda", "16-bit ground truth: rda | original"),
    ("model.channels", "8,16,32,64,128", "encoder stage widths"),
    ("model.scales_used", "5", "deepest encoder scales fused by the classifier (1..=5)"),
    ("model.embed_dim", "128", "classifier embedding width"),
    ("model.hog_hidden", "256", "hidden width of the HOG branch"),
    ("loss.lambda_rec", "1.0", "reconstruction weight"),
    ("loss.lambda_con", "0.5", "branch consistency weight"),
    ("loss.lambda_align", "0.1", "bottleneck alignment weight"),
    ("loss.lambda_sep", "0.1", "triplet separation weight"),
    ("loss.margin", "0.2", "triplet margin"),
    ("loss.triplet_normalize", "true", "centre on the batch mean and L2-normalize features before triplet mining"),
    ("loss.focal_gamma", "2.0", "focal loss focusing parameter"),
    ("augment.rotate_p", "1.0", "probability of a random quarter-turn rotation"),
    ("augment.hflip_p", "0.5", "horizontal flip probability"),
    ("augment.vflip_p", "0.5", "vertical flip probability"),
    ("augment.speckle_p", "0.3", "multiplicative speckle probability"),
    ("augment.speckle_var", "0.01,0.05", "speckle variance range"),
    ("augment.gamma_p", "0.3", "gamma probability"),
    ("augment.gamma", "0.8,1.25", "gamma range"),
    ("augment.blur_p", "0.2", "Gaussian blur probability"),
    ("augment.blur_sigma", "0.4,0.8", "blur sigma range (px)"),
    ("augment.brightness_p", "0.3", "brightness/contrast probability"),
    ("augment.brightness", "-0.05,0.05", "additive brightness range"),
    ("augment.contrast", "0.85,1.15", "contrast factor range"),
    ("augment.erase_p", "0.3", "random erasing probability (1-bit input only)"),
    ("augment.erase_area", "0.02,0.1", "erased area fraction range"),
    ("augment.erase_aspect", "0.3,3.3", "erased rectangle aspect range"),
    ("augment.erase_fill", "0", "erased pixel value"),
    ("augment.oversample_target", "800", "draws per class per epoch; 0 = largest train class"),
    ("augment.allow_undersample", "false", "permit classes larger than the target"),
    ("train.pretrain_epochs", "30", "pre-training epochs"),
    ("train.pretrain_lr", "1e-4", "pre-training learning rate"),
    ("train.pk_p", "4", "classes per pre-training batch"),
    ("train.pk_k", "4", "samples per class per pre-training batch"),
    ("train.head_epochs", "5", "fine-tuning epochs with a frozen backbone"),
    ("train.full_epochs", "15", "fine-tuning epochs with everything trainable"),
    ("train.finetune_lr", "5e-5", "head learning rate during fine-tuning"),
    ("train.backbone_lr_mult", "0.1", "backbone learning-rate multiplier in the second phase"),
    ("train.lr_schedule", "constant", "second-phase fine-tuning schedule: constant | cosine"),
    ("train.weight_decay", "0.01", "AdamW decoupled weight decay"),
    ("train.batch_size", "16", "fine-tuning batch size"),
    ("train.init", "pretrained", "fine-tuning backbone: pretrained | scratch"),
    ("hog.source", "reconstructed", "reconstructed | raw1bit | off"),
    ("hog.cell", "8", "HOG cell side (px)"),
    ("hog.bins", "9", "orientation bins"),
    ("hog.block", "2", "block side (cells)"),
    ("hog.clip", "0.2", "L2-Hys clipping threshold"),
    ("eval.split", "test", "split evaluated by `eval`"),
    ("eval.triptychs", "8", "number of PGM triptychs written by `eval`"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { values: KEYS.iter().map(|&(k, v, _)| (k, v.to_string())).collect() }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let k = KEYS
            .iter()
            .map(|e| e.0)
            .find(|&k| k == key)
            .ok_or_else(|| CliError::Usage(format!("unknown config key `{key}` (see `cfnet config`)")))?;
        self.values.insert(k, value.trim().to_string());
        Ok(())
    }

    /// Applies one `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<(), CliError> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("expected key=value, got `{pair}`")))?;
        self.set(k.trim(), v)
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn merge_text(&mut self, text: &str, origin: &str) -> Result<(), CliError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.set_pair(line).map_err(|e| CliError::Usage(format!("{origin}:{}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut c = RunConfig::default();
        c.merge_text(&text, &path.display().to_string())?;
        Ok(c)
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("undeclared config key {key}"))
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T, CliError> {
        let v = self.get(key);
        v.parse().map_err(|_| CliError::Usage(format!("config key `{key}`: cannot parse `{v}`")))
    }

    fn range(&self, key: &str) -> Result<(f64, f64), CliError> {
        let v = self.get(key);
        let bad = || CliError::Usage(format!("config key `{key}`: expected `lo,hi`, got `{v}`"));
        let (a, b) = v.split_once(',').ok_or_else(bad)?;
        Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
    }

    /// Every key with its effective value, one `key = value` line each.
    pub fn resolved(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<(), CliError> {
        std::fs::create_dir_all(dir).map_err(|e| cfnet::Error::Io { path: dir.into(), source: e })?;
        let p = dir.join("config.resolved");
        std::fs::write(&p, self.resolved()).map_err(|e| cfnet::Error::Io { path: p, source: e })?;
        Ok(())
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.parse("seed")
    }

    pub fn radar(&self, size: usize) -> Result<RadarParams, CliError> {
        let mut p = RadarParams::for_grid(size, size);
        p.wavelength = self.parse("radar.wavelength")?;
        p.chirp_rate = self.parse("radar.chirp_rate")?;
        p.pulse_duration = self.parse("radar.pulse_duration")?;
        p.sample_rate = self.parse("radar.sample_rate")?;
        p.velocity = self.parse("radar.velocity")?;
        p.ref_range = self.parse("radar.ref_range")?;
        p.rcmc = self.parse("radar.rcmc")?;
        let prf: f64 = self.parse("radar.prf")?;
        p.prf = if prf > 0.0 { prf } else { (size as f64 * p.azimuth_rate(p.ref_range)).sqrt() };
        p.range_spacing = p.c / (2.0 * p.sample_rate);
        p.azimuth_spacing = p.velocity / p.prf;
        Ok(p)
    }

    pub fn synth(&self) -> Result<SynthConfig, CliError> {
        let size = self.parse("dataset.size")?;
        let mut s = SynthConfig::new(self.parse("dataset.classes")?, self.parse("dataset.per_class")?, size, self.seed()?);
        s.imbalance = match self.get("dataset.imbalance") {
            "balanced" => Imbalance::Balanced,
            "table1" => Imbalance::Table1,
            o => return Err(CliError::Usage(format!("dataset.imbalance must be balanced|table1, got `{o}`"))),
        };
        s.split = SplitSpec::parse(self.get("dataset.split"))?;
        s.gt_source = match self.get("dataset.gt_source") {
            "rda" => GroundTruth::Rda,
            "original" => GroundTruth::Original,
            o => return Err(CliError::Usage(format!("dataset.gt_source must be rda|original, got `{o}`"))),
        };
        s.radar = self.radar(size)?;
        Ok(s)
    }

    pub fn encoder(&self) -> Result<EncoderConfig, CliError> {
        let v = self.get("model.channels");
        let ch: Vec<usize> = v
            .split(',')
            .map(|c| c.trim().parse())
            .collect::<Result<_, _>>()
            .map_err(|_| CliError::Usage(format!("model.channels: cannot parse `{v}`")))?;
        let channels: [usize; STAGES] = ch
            .try_into()
            .map_err(|_| CliError::Usage(format!("model.channels needs {STAGES} values, got `{v}`")))?;
        Ok(EncoderConfig { channels })
    }

    pub fn hog(&self) -> Result<HogConfig, CliError> {
        Ok(HogConfig {
            cell: self.parse("hog.cell")?,
            bins: self.parse("hog.bins")?,
            block: self.parse("hog.block")?,
            clip: self.parse("hog.clip")?,
            ..Default::default()
        })
    }

    pub fn hog_source(&self) -> Result<HogSource, CliError> {
        Ok(self.get("hog.source").parse()?)
    }

    pub fn augment(&self) -> Result<AugmentConfig, CliError> {
        Ok(AugmentConfig {
            rotate_p: self.parse("augment.rotate_p")?,
            hflip_p: self.parse("augment.hflip_p")?,
            vflip_p: self.parse("augment.vflip_p")?,
            speckle_p: self.parse("augment.speckle_p")?,
            speckle_var: self.range("augment.speckle_var")?,
            gamma_p: self.parse("augment.gamma_p")?,
            gamma: self.range("augment.gamma")?,
            blur_p: self.parse("augment.blur_p")?,
            blur_sigma: self.range("augment.blur_sigma")?,
            brightness_p: self.parse("augment.brightness_p")?,
            brightness: self.range("augment.brightness")?,
            contrast: self.range("augment.contrast")?,
            erase_p: self.parse("augment.erase_p")?,
            erase_area: self.range("augment.erase_area")?,
            erase_aspect: self.range("augment.erase_aspect")?,
            erase_fill: self.parse("augment.erase_fill")?,
        })
    }

    fn adamw(&self, lr_key: &str) -> Result<AdamWConfig, CliError> {
        Ok(AdamWConfig { lr: self.parse(lr_key)?, weight_decay: self.parse("train.weight_decay")?, ..Default::default() })
    }

    pub fn pretrain(&self) -> Result<PretrainConfig, CliError> {
        Ok(PretrainConfig {
            encoder: self.encoder()?,
            epochs: self.parse("train.pretrain_epochs")?,
            optim: self.adamw("train.pretrain_lr")?,
            p: self.parse("train.pk_p")?,
            k: self.parse("train.pk_k")?,
            weights: LossWeights {
                rec: self.parse("loss.lambda_rec")?,
                con: self.parse("loss.lambda_con")?,
                align: self.parse("loss.lambda_align")?,
                sep: self.parse("loss.lambda_sep")?,
                margin: self.parse("loss.margin")?,
            },
            triplet_normalize: self.parse("loss.triplet_normalize")?,
            seed: self.seed()?,
            oversample_target: self.parse("augment.oversample_target")?,
            allow_undersample: self.parse("augment.allow_undersample")?,
            augment: self.augment()?,
        })
    }

    /// Fine-tuning settings; the HOG width comes from the HOG stage output.
    pub fn finetune(&self, num_classes: usize, hog_dim: Option<usize>) -> Result<FinetuneConfig, CliError> {
        Ok(FinetuneConfig {
            encoder: self.encoder()?,
            classifier: ClassifierConfig {
                num_classes,
                hog_dim,
                scales_used: self.parse("model.scales_used")?,
                embed_dim: self.parse("model.embed_dim")?,
                hog_hidden: self.parse("model.hog_hidden")?,
            },
            head_epochs: self.parse("train.head_epochs")?,
            full_epochs: self.parse("train.full_epochs")?,
            optim: self.adamw("train.finetune_lr")?,
            backbone_lr_mult: self.parse("train.backbone_lr_mult")?,
            lr_schedule: self.parse("train.lr_schedule")?,
            batch_size: self.parse("train.batch_size")?,
            focal_gamma: self.parse("loss.focal_gamma")?,
            seed: self.seed()?,
            oversample_target: self.parse("augment.oversample_target")?,
            allow_undersample: self.parse("augment.allow_undersample")?,
            augment: self.augment()?,
        })
    }
}
