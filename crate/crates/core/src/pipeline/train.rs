use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use super::augment::{augment, AugmentConfig, GeomOp};
use super::checkpoint::Checkpoint;
use super::manifest::{Dataset, Manifest, Split};
use super::sampling::{chunk_batches, oversample_plan, pk_batches};
use crate::error::{Error, Result};
use crate::features::{hog_extract, HogConfig};
use crate::losses::{compound, focal_loss, inverse_frequency_alpha, l_align, l_con, l_rec, l_sep, Components, LossWeights};
use crate::metrics::{confusion, psnr, ConfusionMatrix};
use crate::model::{CfNet, Classifier, ClassifierConfig, EncoderConfig, STAGES};
use crate::ndgrad::io::{self, AnyTensor};
use crate::ndgrad::{AdamW, AdamWConfig, ParamSet, Tape, Tensor};
use crate::par;
use crate::rng::{self, purpose};

pub const PRETRAIN_CURVES: &str = "pretrain_curves.csv";
pub const FINETUNE_CURVES: &str = "finetune_curves.csv";
pub const CKPT_BEST: &str = "ckpt_best.cfck";
pub const CKPT_FINAL: &str = "ckpt_final.cfck";
pub const CLASSIFIER_BEST: &str = "classifier_best.cfck";
const EVAL_CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub encoder: EncoderConfig,
    pub epochs: usize,
    pub optim: AdamWConfig,
    /// Classes per batch.
    pub p: usize,
    /// Samples per class per batch.
    pub k: usize,
    pub weights: LossWeights,
    /// Centre and L2-normalize pooled bottleneck features before triplet
    /// mining.
    pub triplet_normalize: bool,
    pub seed: u64,
    /// Draws per class per epoch; 0 means "largest train class".
    pub oversample_target: usize,
    pub allow_undersample: bool,
    pub augment: AugmentConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            encoder: EncoderConfig::default(),
            epochs: 30,
            optim: AdamWConfig { lr: 1e-4, ..Default::default() },
            p: 4,
            k: 4,
            weights: LossWeights::default(),
            triplet_normalize: true,
            seed: 0,
            oversample_target: 800,
            allow_undersample: false,
            augment: AugmentConfig::default(),
        }
    }
}

/// Epoch means of the pre-training objectives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurveRow {
    pub epoch: usize,
    pub l_rec: f64,
    pub l_con: f64,
    pub l_align: f64,
    pub l_sep: f64,
    pub l_total: f64,
}

pub fn pretrain_curves_csv(rows: &[CurveRow]) -> String {
    let mut s = String::from("epoch,l_rec,l_con,l_align,l_sep,l_total\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{},{},{}\n", r.epoch, r.l_rec, r.l_con, r.l_align, r.l_sep, r.l_total));
    }
    s
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub net: CfNet,
    pub optimizer: AdamW<f32>,
    /// Parameters at the epoch with the lowest mean `l_total` (the
    /// initialization when no epoch ran).
    pub best: ParamSet<f32>,
    pub best_epoch: usize,
    pub curves: Vec<CurveRow>,
}

fn validate_common(epochs_ok: bool, optim: &AdamWConfig, augment: &AugmentConfig) -> Result<()> {
    if !epochs_ok {
        return Err(Error::InvalidParam("epoch counts must be non-negative integers".into()));
    }
    if !(optim.lr.is_finite() && optim.lr > 0.0) {
        return Err(Error::InvalidParam(format!("learning rate must be > 0, got {}", optim.lr)));
    }
    augment.validate()
}

fn class_members(m: &Manifest, split: Split) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); m.num_classes()];
    for i in m.indices(split) {
        out[m.rows[i].label].push(i);
    }
    out
}

fn resolve_target(members: &[Vec<usize>], target: usize) -> usize {
    if target == 0 {
        members.iter().map(Vec::len).max().unwrap_or(0)
    } else {
        target
    }
}

/// Augmented `(1-bit, 16-bit)` batches `(N, 1, H, W)` plus geometric ops.
fn augmented_batch(
    ds: &Dataset,
    batch: &[usize],
    cfg: &AugmentConfig,
    seed: u64,
    epoch: u64,
    offset: usize,
) -> Result<(Tensor<f32>, Tensor<f32>, Vec<GeomOp>)> {
    let jobs: Vec<(usize, usize)> = batch.iter().copied().enumerate().collect();
    let out = par::map_slice(&jobs, |&(j, i)| {
        let mut r = rng::stream(seed, &[purpose::AUGMENT, epoch, (offset + j) as u64]);
        augment(&ds.img_1bit[i], &ds.img_16bit[i], cfg, &mut r)
    });
    let mut a = Vec::with_capacity(out.len());
    let mut b = Vec::with_capacity(out.len());
    let mut ops = Vec::with_capacity(out.len());
    for (x1, x16, op) in out {
        a.push(x1);
        b.push(x16);
        ops.push(op);
    }
    let [h, w] = ds.image_shape()?;
    let n = batch.len();
    Ok((Tensor::stack(&a)?.reshape(&[n, 1, h, w])?, Tensor::stack(&b)?.reshape(&[n, 1, h, w])?, ops))
}

fn finite(v: f64, component: &'static str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteLoss { component })
    }
}

/// Stage 1: self-supervised pre-training of the dual-branch network on the
/// train split. Writes curves and checkpoints into `out` when given.
pub fn pretrain(ds: &Dataset, cfg: &PretrainConfig, out: Option<&Path>) -> Result<PretrainOutcome> {
    validate_common(true, &cfg.optim, &cfg.augment)?;
    cfg.weights.validate()?;
    let mut net = CfNet::new(cfg.encoder.clone(), cfg.seed)?;
    let ids = net.param_ids();
    let mut opt = AdamW::new(cfg.optim, &net.params, &ids);
    let members = class_members(&ds.manifest, Split::Train);
    let target = resolve_target(&members, cfg.oversample_target);
    let labels = ds.manifest.labels();

    let mut best = net.params.clone();
    let (mut best_epoch, mut best_total) = (0, f64::INFINITY);
    let mut curves = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let e = epoch as u64;
        let plan = oversample_plan(&members, target, cfg.allow_undersample, cfg.seed, e)?;
        let batches = pk_batches(&plan, &labels, cfg.p, cfg.k, cfg.seed, e)?;
        let mut sums = [0.0f64; 5];
        let mut offset = 0;
        for batch in &batches {
            let (x1, x16, _) = augmented_batch(ds, batch, &cfg.augment, cfg.seed, e, offset)?;
            offset += batch.len();
            let blabels: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let (v16, v1) = (tape.input(x16), tape.input(x1));
            let o = net.forward(&mut tape, v16, v1)?;
            // Triplets are mined on pooled bottleneck features: the flattened
            // map is dominated by target pose rather than class.
            let pooled = tape.global_avg_pool(o.f_s)?;
            let c = Components {
                rec: l_rec(&mut tape, o.x_s, v16)?,
                con: l_con(&mut tape, o.x_t, o.x_s)?,
                align: l_align(&mut tape, o.f_t, o.f_s)?,
                sep: l_sep(&mut tape, pooled, &blabels, cfg.weights.margin, cfg.triplet_normalize)?,
            };
            let total = compound(&mut tape, &c, &cfg.weights)?;
            let vals = [
                finite(tape.value(c.rec).item() as f64, "l_rec")?,
                finite(tape.value(c.con).item() as f64, "l_con")?,
                finite(tape.value(c.align).item() as f64, "l_align")?,
                finite(tape.value(c.sep).item() as f64, "l_sep")?,
                finite(tape.value(total).item() as f64, "l_total")?,
            ];
            for (s, v) in sums.iter_mut().zip(vals) {
                *s += v;
            }
            let grads = tape.backward(total)?;
            net.params.accumulate(&grads)?;
            opt.step(&mut net.params)?;
        }
        let n = batches.len().max(1) as f64;
        let row = CurveRow {
            epoch,
            l_rec: sums[0] / n,
            l_con: sums[1] / n,
            l_align: sums[2] / n,
            l_sep: sums[3] / n,
            l_total: sums[4] / n,
        };
        if row.l_total < best_total {
            best_total = row.l_total;
            best_epoch = epoch;
            best = net.params.clone();
        }
        curves.push(row);
    }

    let outcome = PretrainOutcome { net, optimizer: opt, best, best_epoch, curves };
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_text(&dir.join(PRETRAIN_CURVES), &pretrain_curves_csv(&outcome.curves))?;
        let mut fin = Checkpoint::with_optimizer(&outcome.net.params, &outcome.optimizer);
        push_encoder_meta(&mut fin, &cfg.encoder);
        fin.save(&dir.join(CKPT_FINAL))?;
        let mut b = Checkpoint::from_params(&outcome.best);
        push_encoder_meta(&mut b, &cfg.encoder);
        b.save(&dir.join(CKPT_BEST))?;
    }
    Ok(outcome)
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn meta(values: &[usize]) -> AnyTensor {
    AnyTensor::F64(Tensor::from_vec(values.iter().map(|&v| v as f64).collect()))
}

fn read_meta(ck: &Checkpoint, name: &str) -> Result<Vec<usize>> {
    match ck.get(name) {
        Some(AnyTensor::F64(t)) => Ok(t.data().iter().map(|&v| v as usize).collect()),
        _ => Err(Error::Format(format!("checkpoint has no {name} entry"))),
    }
}

fn push_encoder_meta(ck: &mut Checkpoint, enc: &EncoderConfig) {
    ck.push("meta.encoder", meta(&enc.channels));
}

fn encoder_from_meta(ck: &Checkpoint) -> Result<EncoderConfig> {
    let ch = read_meta(ck, "meta.encoder")?;
    let channels: [usize; STAGES] =
        ch.try_into().map_err(|_| Error::Format("meta.encoder must list 5 channel counts".into()))?;
    Ok(EncoderConfig { channels })
}

/// Rebuilds a reconstruction network from a pre-training checkpoint.
pub fn load_cfnet(path: &Path) -> Result<CfNet> {
    let ck = Checkpoint::load(path)?;
    let mut net = CfNet::new(encoder_from_meta(&ck)?, 0)?;
    ck.restore_params(&mut net.params)?;
    Ok(net)
}

pub fn save_classifier(model: &Classifier, path: &Path) -> Result<()> {
    let mut ck = Checkpoint::from_params(&model.params);
    push_encoder_meta(&mut ck, &model.encoder_config);
    let c = &model.config;
    ck.push(
        "meta.classifier",
        meta(&[c.num_classes, c.hog_dim.unwrap_or(0), c.scales_used, c.embed_dim, c.hog_hidden]),
    );
    ck.save(path)
}

pub fn load_classifier(path: &Path) -> Result<Classifier> {
    let ck = Checkpoint::load(path)?;
    let m = read_meta(&ck, "meta.classifier")?;
    let [num_classes, hog, scales_used, embed_dim, hog_hidden] = m[..] else {
        return Err(Error::Format("meta.classifier must hold 5 values".into()));
    };
    let config = ClassifierConfig { num_classes, hog_dim: (hog > 0).then_some(hog), scales_used, embed_dim, hog_hidden };
    let mut model = Classifier::new(encoder_from_meta(&ck)?, config, 0)?;
    ck.restore_params(&mut model.params)?;
    Ok(model)
}

/// What the HOG branch is computed from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HogSource {
    /// The student reconstruction of the 1-bit image.
    Reconstructed,
    Raw1bit,
    /// No HOG branch.
    Off,
}

impl fmt::Display for HogSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HogSource::Reconstructed => "reconstructed",
            HogSource::Raw1bit => "raw1bit",
            HogSource::Off => "off",
        })
    }
}

impl FromStr for HogSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reconstructed" => Ok(HogSource::Reconstructed),
            "raw1bit" => Ok(HogSource::Raw1bit),
            "off" => Ok(HogSource::Off),
            _ => Err(Error::InvalidParam(format!("hog.source must be reconstructed|raw1bit|off, got {s:?}"))),
        }
    }
}

/// Per-row HOG descriptors and the images they were computed from (kept so
/// augmented training samples can recompute the descriptor after the same
/// geometric transform).
#[derive(Clone, Debug, PartialEq)]
pub struct HogFeatures {
    pub config: HogConfig,
    pub sources: Vec<Tensor<f32>>,
    pub descriptors: Vec<Vec<f32>>,
}

impl HogFeatures {
    pub fn dim(&self) -> usize {
        self.descriptors.first().map_or(0, Vec::len)
    }

    /// `(N, D)` descriptors for the given rows.
    pub fn batch(&self, idx: &[usize]) -> Result<Tensor<f32>> {
        let mut data = Vec::with_capacity(idx.len() * self.dim());
        for &i in idx {
            data.extend_from_slice(&self.descriptors[i]);
        }
        Tensor::new(&[idx.len(), self.dim()], data)
    }

    /// Reads the descriptor files referenced by the manifest; `None` when the
    /// manifest carries no HOG paths.
    pub fn load(ds: &Dataset, config: HogConfig) -> Result<Option<Self>> {
        if !ds.manifest.has_hog() {
            return Ok(None);
        }
        let mut sources = Vec::with_capacity(ds.len());
        let mut descriptors = Vec::with_capacity(ds.len());
        for r in &ds.manifest.rows {
            let rel = r.path_hog.as_deref().expect("checked by has_hog");
            let p = ds.root.join(rel);
            if !p.exists() {
                return Err(Error::MissingInput { path: p, hint: "run the `hog` stage first".into() });
            }
            descriptors.push(io::load_f32(&p)?.into_data());
            sources.push(io::load_f32(&ds.root.join(source_path(rel)))?);
        }
        let f = HogFeatures { config, sources, descriptors };
        if f.descriptors.iter().any(|d| d.len() != f.dim()) {
            return Err(Error::Format("HOG descriptors differ in length".into()));
        }
        Ok(Some(f))
    }
}

fn source_path(hog_rel: &str) -> String {
    match hog_rel.strip_suffix(".cft") {
        Some(stem) => format!("{stem}_src.cft"),
        None => format!("{hog_rel}_src"),
    }
}

/// Computes HOG descriptors for every row from `source`. `net` is required
/// for [`HogSource::Reconstructed`].
pub fn compute_hog(ds: &Dataset, net: Option<&CfNet>, source: HogSource, config: &HogConfig) -> Result<Option<HogFeatures>> {
    config.validate()?;
    let sources: Vec<Tensor<f32>> = match source {
        HogSource::Off => return Ok(None),
        HogSource::Raw1bit => ds.img_1bit.clone(),
        HogSource::Reconstructed => {
            let net = net.ok_or_else(|| {
                Error::Precondition("hog.source=reconstructed needs a pre-training checkpoint; run `pretrain` first".into())
            })?;
            let idx: Vec<usize> = (0..ds.len()).collect();
            let mut out = Vec::with_capacity(ds.len());
            for chunk in idx.chunks(EVAL_CHUNK) {
                let imgs: Vec<Tensor<f32>> = chunk.iter().map(|&i| ds.img_1bit[i].clone()).collect();
                let rec = net.student_reconstruct(&Tensor::stack(&imgs)?)?;
                out.extend((0..chunk.len()).map(|j| rec.index_outer(j)));
            }
            out
        }
    };
    let descriptors = par::map_slice(&sources, |s| hog_extract(s, config)).into_iter().collect::<Result<Vec<_>>>()?;
    Ok(Some(HogFeatures { config: config.clone(), sources, descriptors }))
}

/// Stage 2: computes descriptors and writes `hog/<id>.cft` (descriptor),
/// `hog/<id>_src.cft` (source image) and an updated manifest into `out`.
/// Image paths in the new manifest point back into the dataset directory.
pub fn extract_hog_stage(
    ds: &Dataset,
    net: Option<&CfNet>,
    source: HogSource,
    config: &HogConfig,
    out: &Path,
) -> Result<(Manifest, Option<HogFeatures>)> {
    let feats = compute_hog(ds, net, source, config)?;
    let root = ds.root.canonicalize().map_err(|e| Error::io(&ds.root, e))?;
    let abs = |rel: &str| root.join(rel).to_string_lossy().into_owned();
    let mut m = ds.manifest.clone();
    for r in &mut m.rows {
        r.path_1bit = abs(&r.path_1bit);
        r.path_16bit = abs(&r.path_16bit);
        r.path_hog = None;
    }
    if let Some(f) = &feats {
        let dir = out.join("hog");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (i, r) in m.rows.iter_mut().enumerate() {
            let rel = format!("hog/{}.cft", r.id);
            io::save_f32(&out.join(&rel), &Tensor::from_vec(f.descriptors[i].clone()))?;
            io::save_f32(&out.join(source_path(&rel)), &f.sources[i])?;
            r.path_hog = Some(rel);
        }
    }
    m.save(out)?;
    Ok((m, feats))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from the configured rate towards zero, stepped per epoch.
    Cosine,
}

impl LrSchedule {
    /// Rate multiplier for epoch `k` (0-based) of `n`.
    pub fn factor(self, k: usize, n: usize) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * k as f64 / n.max(1) as f64).cos()),
        }
    }
}

impl fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LrSchedule::Constant => "constant",
            LrSchedule::Cosine => "cosine",
        })
    }
}

impl FromStr for LrSchedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(LrSchedule::Constant),
            "cosine" => Ok(LrSchedule::Cosine),
            _ => Err(Error::InvalidParam(format!("train.lr_schedule must be constant|cosine, got {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub encoder: EncoderConfig,
    pub classifier: ClassifierConfig,
    pub head_epochs: usize,
    pub full_epochs: usize,
    /// Head learning rate; the backbone uses `lr * backbone_lr_mult` in
    /// the second phase.
    pub optim: AdamWConfig,
    pub backbone_lr_mult: f64,
    /// Learning-rate schedule over the second phase.
    pub lr_schedule: LrSchedule,
    pub batch_size: usize,
    pub focal_gamma: f64,
    pub seed: u64,
    /// Draws per class per epoch; 0 means "largest train class".
    pub oversample_target: usize,
    pub allow_undersample: bool,
    pub augment: AugmentConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            encoder: EncoderConfig::default(),
            classifier: ClassifierConfig::default(),
            head_epochs: 5,
            full_epochs: 15,
            optim: AdamWConfig { lr: 5e-5, ..Default::default() },
            backbone_lr_mult: 0.1,
            lr_schedule: LrSchedule::Constant,
            batch_size: 16,
            focal_gamma: 2.0,
            seed: 0,
            oversample_target: 800,
            allow_undersample: false,
            augment: AugmentConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: u8,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

pub fn finetune_curves_csv(rows: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,phase,train_loss,train_acc,val_acc\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{},{}\n", r.epoch, r.phase, r.train_loss, r.train_acc, r.val_acc));
    }
    s
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    /// Best-validation model of the second phase (the first-phase model
    /// when the second phase has no epochs).
    pub model: Classifier,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub curves: Vec<EpochRecord>,
}

/// Predicted classes for rows `idx`, in order.
pub fn predict(model: &Classifier, ds: &Dataset, hog: Option<&HogFeatures>, idx: &[usize]) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(EVAL_CHUNK) {
        let imgs: Vec<Tensor<f32>> = chunk.iter().map(|&i| ds.img_1bit[i].clone()).collect();
        let h = hog.map(|f| f.batch(chunk)).transpose()?;
        let logits = model.predict_logits(&Tensor::stack(&imgs)?, h.as_ref())?;
        preds.extend(Classifier::argmax(&logits));
    }
    Ok(preds)
}

fn accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    preds.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / preds.len() as f64
}

/// Confusion matrix and predictions on one split.
pub fn evaluate(model: &Classifier, ds: &Dataset, hog: Option<&HogFeatures>, split: Split) -> Result<(ConfusionMatrix, Vec<usize>)> {
    let idx = ds.manifest.indices(split);
    if idx.is_empty() {
        return Err(Error::Precondition(format!("the {split} split is empty")));
    }
    let preds = predict(model, ds, hog, &idx)?;
    let labels: Vec<usize> = idx.iter().map(|&i| ds.manifest.rows[i].label).collect();
    Ok((confusion(&preds, &labels, ds.manifest.num_classes())?, preds))
}

/// `(PSNR(reconstruction, 16-bit), PSNR(1-bit, 16-bit))` per row of `idx`.
pub fn reconstruction_psnr(net: &CfNet, ds: &Dataset, idx: &[usize]) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(EVAL_CHUNK) {
        let imgs: Vec<Tensor<f32>> = chunk.iter().map(|&i| ds.img_1bit[i].clone()).collect();
        let rec = net.student_reconstruct(&Tensor::stack(&imgs)?)?;
        for (j, &i) in chunk.iter().enumerate() {
            let t = &ds.img_16bit[i];
            out.push((psnr(&rec.index_outer(j), t, 1.0)?, psnr(&ds.img_1bit[i], t, 1.0)?));
        }
    }
    Ok(out)
}

struct FinetuneRun<'a> {
    ds: &'a Dataset,
    hog: Option<&'a HogFeatures>,
    cfg: &'a FinetuneConfig,
    members: Vec<Vec<usize>>,
    target: usize,
    alpha: Vec<f64>,
    labels: Vec<usize>,
    val_idx: Vec<usize>,
    val_labels: Vec<usize>,
}

impl FinetuneRun<'_> {
    fn epoch(&self, model: &mut Classifier, opt: &mut AdamW<f32>, epoch: usize, phase: u8) -> Result<EpochRecord> {
        let cfg = self.cfg;
        let e = epoch as u64;
        // Offset the stream so fine-tuning never replays pre-training draws.
        let seed = rng::mix(&[cfg.seed, 0xF1]);
        let plan = oversample_plan(&self.members, self.target, cfg.allow_undersample, seed, e)?;
        let (mut loss_sum, mut correct, mut seen, mut nb) = (0.0, 0usize, 0usize, 0usize);
        let mut offset = 0;
        for batch in chunk_batches(&plan, cfg.batch_size) {
            let (x1, _, ops) = augmented_batch(self.ds, &batch, &cfg.augment, seed, e, offset)?;
            offset += batch.len();
            let hog = match self.hog {
                Some(f) => {
                    let rows: Vec<(usize, GeomOp)> = batch.iter().copied().zip(ops.iter().copied()).collect();
                    let ds = par::map_slice(&rows, |&(i, op)| {
                        if op == GeomOp::default() {
                            Ok(f.descriptors[i].clone())
                        } else {
                            hog_extract(&op.apply(&f.sources[i]), &f.config)
                        }
                    });
                    let data: Vec<f32> = ds.into_iter().collect::<Result<Vec<_>>>()?.concat();
                    Some(Tensor::new(&[batch.len(), f.dim()], data)?)
                }
                None => None,
            };
            let blabels: Vec<usize> = batch.iter().map(|&i| self.labels[i]).collect();
            let mut tape = Tape::new();
            let xv = tape.input(x1);
            let hv = hog.map(|h| tape.input(h));
            let logits = model.forward(&mut tape, xv, hv)?;
            let loss = focal_loss(&mut tape, logits, &blabels, cfg.focal_gamma, &self.alpha)?;
            loss_sum += finite(tape.value(loss).item() as f64, "focal")?;
            let preds = Classifier::argmax(tape.value(logits));
            correct += preds.iter().zip(&blabels).filter(|(a, b)| a == b).count();
            seen += batch.len();
            nb += 1;
            let grads = tape.backward(loss)?;
            model.params.accumulate(&grads)?;
            opt.step(&mut model.params)?;
        }
        let val = predict(model, self.ds, self.hog, &self.val_idx)?;
        Ok(EpochRecord {
            epoch,
            phase,
            train_loss: loss_sum / nb.max(1) as f64,
            train_acc: if seen == 0 { 0.0 } else { correct as f64 / seen as f64 },
            val_acc: accuracy(&val, &self.val_labels),
        })
    }
}

/// Stage 3: two-phase supervised fine-tuning. `backbone` holds a
/// pre-training parameter set whose `student.enc.*` tensors initialise the
/// classifier backbone; `None` trains from a random backbone.
pub fn finetune(
    ds: &Dataset,
    hog: Option<&HogFeatures>,
    backbone: Option<&ParamSet<f32>>,
    cfg: &FinetuneConfig,
    out: Option<&Path>,
) -> Result<FinetuneOutcome> {
    validate_common(true, &cfg.optim, &cfg.augment)?;
    if cfg.batch_size == 0 {
        return Err(Error::InvalidParam("train.batch_size must be positive".into()));
    }
    if !(cfg.backbone_lr_mult >= 0.0) {
        return Err(Error::InvalidParam("train.backbone_lr_mult must be >= 0".into()));
    }
    let got = hog.map(HogFeatures::dim);
    if cfg.classifier.hog_dim != got {
        return Err(Error::shape(
            "finetune",
            format!("model HOG dimension {:?} but HOG stage provides {:?}", cfg.classifier.hog_dim, got),
        ));
    }
    if cfg.classifier.num_classes != ds.manifest.num_classes() {
        return Err(Error::shape(
            "finetune",
            format!("model has {} classes, dataset {}", cfg.classifier.num_classes, ds.manifest.num_classes()),
        ));
    }
    let mut model = Classifier::new(cfg.encoder.clone(), cfg.classifier.clone(), cfg.seed)?;
    if let Some(src) = backbone {
        model.load_backbone(src, "student.")?;
    }
    let members = class_members(&ds.manifest, Split::Train);
    let val_idx = ds.manifest.indices(Split::Val);
    if val_idx.is_empty() {
        return Err(Error::Precondition("fine-tuning needs a non-empty val split".into()));
    }
    let labels = ds.manifest.labels();
    let run = FinetuneRun {
        ds,
        hog,
        cfg,
        target: resolve_target(&members, cfg.oversample_target),
        alpha: inverse_frequency_alpha(&ds.manifest.class_counts(Split::Train)),
        members,
        val_labels: val_idx.iter().map(|&i| labels[i]).collect(),
        labels,
        val_idx,
    };

    let mut curves = Vec::new();
    let mut epoch = 0;
    model.set_backbone_trainable(false);
    let mut opt = AdamW::new(cfg.optim, &model.params, &model.head_ids());
    for _ in 0..cfg.head_epochs {
        epoch += 1;
        curves.push(run.epoch(&mut model, &mut opt, epoch, 1)?);
    }
    model.set_backbone_trainable(true);

    let mut best = (model.clone(), epoch, curves.last().map_or(f64::NAN, |r: &EpochRecord| r.val_acc));
    let mut opt = AdamW::new(cfg.optim, &model.params, &model.head_ids());
    opt.add_group(&model.params, &model.backbone_ids(), cfg.backbone_lr_mult);
    for k in 0..cfg.full_epochs {
        epoch += 1;
        opt.config.lr = cfg.optim.lr * cfg.lr_schedule.factor(k, cfg.full_epochs);
        let rec = run.epoch(&mut model, &mut opt, epoch, 2)?;
        if k == 0 || rec.val_acc > best.2 {
            best = (model.clone(), epoch, rec.val_acc);
        }
        curves.push(rec);
    }
    let (model, best_epoch, best_val_acc) = best;
    let best_val_acc = if best_val_acc.is_nan() {
        accuracy(&predict(&model, ds, hog, &run.val_idx)?, &run.val_labels)
    } else {
        best_val_acc
    };
    let outcome = FinetuneOutcome { model, best_epoch, best_val_acc, curves };
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_text(&dir.join(FINETUNE_CURVES), &finetune_curves_csv(&outcome.curves))?;
        save_classifier(&outcome.model, &dir.join(CLASSIFIER_BEST))?;
    }
    Ok(outcome)
}
