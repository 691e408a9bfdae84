use super::{as_batch, Encoder, EncoderConfig, Linear, STAGES};
use crate::error::{Error, Result};
use crate::ndgrad::{ParamId, ParamSet, Tape, Tensor, Var};
use crate::rng::{self, purpose};

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierConfig {
    pub num_classes: usize,
    /// HOG descriptor length, or `None` to drop the HOG branch.
    pub hog_dim: Option<usize>,
    /// Average only the deepest `k` scales (1..=5).
    pub scales_used: usize,
    pub embed_dim: usize,
    pub hog_hidden: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig { num_classes: 6, hog_dim: Some(1764), scales_used: STAGES, embed_dim: 128, hog_hidden: 256 }
    }
}

/// Multi-scale fusion classifier on the student encoder.
///
/// Each used scale is global-average-pooled and projected to `embed_dim`;
/// the projections are averaged, concatenated with the HOG embedding
/// (`fc1 -> relu -> fc2`), fused by `linear + relu`, and mapped to logits.
///
/// Parameter namespace: `backbone.enc.*`, `scale{i}.*`, `hog.fc{1,2}.*`,
/// `fuse.*`, `head.*`.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub config: ClassifierConfig,
    pub encoder_config: EncoderConfig,
    pub params: ParamSet<f32>,
    backbone: Encoder,
    scales: Vec<(usize, Linear)>,
    hog: Option<(Linear, Linear)>,
    fuse: Linear,
    head: Linear,
}

pub const BACKBONE_PREFIX: &str = "backbone.";

/// Element-wise mean of equally shaped embeddings.
pub fn average_scales(tape: &mut Tape<f32>, vs: &[Var]) -> Result<Var> {
    let (&first, rest) = vs
        .split_first()
        .ok_or_else(|| Error::Precondition("average of zero scales".into()))?;
    let mut acc = first;
    for &v in rest {
        acc = tape.add(acc, v)?;
    }
    tape.scale(acc, 1.0 / vs.len() as f64)
}

impl Classifier {
    pub fn new(encoder_config: EncoderConfig, config: ClassifierConfig, seed: u64) -> Result<Self> {
        encoder_config.validate()?;
        if config.num_classes < 2 {
            return Err(Error::InvalidParam(format!("need at least 2 classes, got {}", config.num_classes)));
        }
        if !(1..=STAGES).contains(&config.scales_used) {
            return Err(Error::InvalidParam(format!("model.scales_used must be in 1..=5, got {}", config.scales_used)));
        }
        let mut ps = ParamSet::new();
        let stream = |k: u64| rng::stream(seed, &[purpose::INIT, 100 + k]);
        let backbone = Encoder::new(&mut ps, "backbone.enc", &encoder_config, &mut stream(0));
        let d = config.embed_dim;
        let mut r = stream(1);
        let scales = (STAGES - config.scales_used..STAGES)
            .map(|i| (i, Linear::new(&mut ps, &format!("scale{i}"), encoder_config.channels[i], d, &mut r)))
            .collect();
        let mut r = stream(2);
        let hog = config.hog_dim.map(|n| {
            (
                Linear::new(&mut ps, "hog.fc1", n, config.hog_hidden, &mut r),
                Linear::new(&mut ps, "hog.fc2", config.hog_hidden, d, &mut r),
            )
        });
        let fuse_in = if hog.is_some() { 2 * d } else { d };
        let mut r = stream(3);
        let fuse = Linear::new(&mut ps, "fuse", fuse_in, d, &mut r);
        let head = Linear::new(&mut ps, "head", d, config.num_classes, &mut r);
        Ok(Classifier { config, encoder_config, params: ps, backbone, scales, hog, fuse, head })
    }

    /// Copies `{prefix}enc.*` tensors (e.g. `student.enc.*` of a
    /// reconstruction network) into the backbone.
    pub fn load_backbone(&mut self, source: &ParamSet<f32>, prefix: &str) -> Result<()> {
        for id in self.backbone.param_ids() {
            let name = self.params.name(id).to_string();
            let src_name = format!("{prefix}{}", &name[BACKBONE_PREFIX.len()..]);
            let v = source
                .get(&src_name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks {src_name}")))?;
            if v.shape() != self.params.value(id).shape() {
                return Err(Error::shape(
                    "load-backbone",
                    format!("{src_name} is {:?}, backbone expects {:?}", v.shape(), self.params.value(id).shape()),
                ));
            }
            *self.params.value_mut(id) = v.clone();
        }
        Ok(())
    }

    pub fn set_backbone_trainable(&mut self, trainable: bool) {
        self.params.set_trainable_prefix(BACKBONE_PREFIX, trainable);
    }

    pub fn backbone_ids(&self) -> Vec<ParamId> {
        self.backbone.param_ids()
    }

    pub fn head_ids(&self) -> Vec<ParamId> {
        let bb = self.backbone_ids();
        self.params.ids().filter(|id| !bb.contains(id)).collect()
    }

    /// Logits `(N, num_classes)` for images `(N, 1, H, W)` and optional HOG
    /// descriptors `(N, D)`.
    pub fn forward(&self, tape: &mut Tape<f32>, x: Var, hog: Option<Var>) -> Result<Var> {
        let ps = &self.params;
        let s = self.backbone.forward(tape, ps, x)?;
        let mut vs = Vec::with_capacity(self.scales.len());
        for &(i, p) in &self.scales {
            let g = tape.global_avg_pool(s[i])?;
            vs.push(p.forward(tape, ps, g)?);
        }
        let v_cnn = average_scales(tape, &vs)?;
        let fused = match (&self.hog, hog, self.config.hog_dim) {
            (Some((fc1, fc2)), Some(h), Some(dim)) => {
                let hs = tape.shape(h);
                if hs.len() != 2 || hs[1] != dim || hs[0] != tape.shape(x)[0] {
                    return Err(Error::shape("classifier", format!("HOG input {hs:?}, expected (N, {dim})")));
                }
                let a = fc1.forward(tape, ps, h)?;
                let a = tape.relu(a)?;
                let v_hog = fc2.forward(tape, ps, a)?;
                tape.concat(&[v_cnn, v_hog], 1)?
            }
            (None, None, _) => v_cnn,
            (Some(_), None, Some(dim)) => {
                return Err(Error::shape("classifier", format!("model expects {dim}-dim HOG input, none given")))
            }
            _ => return Err(Error::shape("classifier", "HOG input given to a model without a HOG branch")),
        };
        let f = self.fuse.forward(tape, ps, fused)?;
        let f = tape.relu(f)?;
        self.head.forward(tape, ps, f)
    }

    /// Logits for an image batch without recording gradients.
    pub fn predict_logits(&self, x: &Tensor<f32>, hog: Option<&Tensor<f32>>) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let xv = tape.input(as_batch(x)?);
        let hv = hog.map(|h| tape.input(h.clone()));
        let out = self.forward(&mut tape, xv, hv)?;
        Ok(tape.value(out).clone())
    }

    /// Arg-max class per row of `(N, C)` logits; ties resolve to the lower index.
    pub fn argmax(logits: &Tensor<f32>) -> Vec<usize> {
        let c = *logits.shape().last().expect("rank >= 1");
        logits
            .data()
            .chunks(c)
            .map(|row| row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best }))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(n: usize) -> Tensor<f32> {
        Tensor::uniform(&[n, 1, 64, 64], 0.0, 1.0, &mut rng::stream(3, &[7]))
    }

    #[test]
    fn logits_shape_for_class_counts() {
        for c in [4, 5, 6, 7] {
            let cfg = ClassifierConfig { num_classes: c, hog_dim: Some(1764), ..Default::default() };
            let m = Classifier::new(EncoderConfig::default(), cfg, 1).unwrap();
            let hog = Tensor::uniform(&[3, 1764], 0.0, 0.2, &mut rng::stream(0, &[1]));
            assert_eq!(m.predict_logits(&batch(3), Some(&hog)).unwrap().shape(), &[3, c]);
        }
    }

    #[test]
    fn hog_mismatch_is_an_error() {
        let m = Classifier::new(EncoderConfig::default(), ClassifierConfig::default(), 1).unwrap();
        let bad = Tensor::zeros(&[2, 100]);
        assert!(matches!(m.predict_logits(&batch(2), Some(&bad)), Err(Error::Shape { .. })));
        assert!(m.predict_logits(&batch(2), None).is_err());
        let no_hog = ClassifierConfig { hog_dim: None, ..Default::default() };
        let m = Classifier::new(EncoderConfig::default(), no_hog, 1).unwrap();
        assert_eq!(m.predict_logits(&batch(2), None).unwrap().shape(), &[2, 6]);
        assert!(m.predict_logits(&batch(2), Some(&Tensor::zeros(&[2, 1764]))).is_err());
    }

    #[test]
    fn equal_scale_embeddings_average_to_themselves() {
        let mut tape = Tape::new();
        let u = Tensor::new(&[1, 3], vec![0.25f32, -1.5, 3.0]).unwrap();
        let vs: Vec<Var> = (0..5).map(|_| tape.input(u.clone())).collect();
        let m = average_scales(&mut tape, &vs).unwrap();
        assert_eq!(tape.value(m), &u);
    }

    #[test]
    fn argmax_prefers_lower_index_on_ties() {
        let l = Tensor::new(&[2, 3], vec![1.0f32, 3.0, 3.0, -1.0, -2.0, -1.0]).unwrap();
        assert_eq!(Classifier::argmax(&l), vec![1, 0]);
    }
}
