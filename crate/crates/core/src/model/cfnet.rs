use super::{as_batch, Attention, Decoder, Encoder, EncoderConfig, STAGES};
use crate::error::{Error, Result};
use crate::ndgrad::{ParamId, ParamSet, Tape, Tensor, Var};
use crate::rng::{self, purpose};

/// Dual-branch reconstruction network.
///
/// The student branch sees the 1-bit image, the teacher branch the 16-bit
/// image. The student decoder receives `attn(Q = f_S, K = V = f_T)`; the
/// teacher decoder receives self-attention `attn(f_T, f_T)` through the same
/// projections. Without a teacher input the student falls back to
/// self-attention on its own bottleneck.
///
/// Parameter namespace: `student.enc.*`, `teacher.enc.*`, `attn.*`,
/// `student.dec.*`, `teacher.dec.*`.
#[derive(Clone, Debug)]
pub struct CfNet {
    pub config: EncoderConfig,
    pub params: ParamSet<f32>,
    student_enc: Encoder,
    teacher_enc: Encoder,
    attn: Attention,
    student_dec: Decoder,
    teacher_dec: Decoder,
}

/// Tape handles of one forward pass; `f_t`/`f_s` are the encoder bottlenecks.
#[derive(Clone, Copy, Debug)]
pub struct CfNetOutput {
    pub x_t: Var,
    pub x_s: Var,
    pub f_t: Var,
    pub f_s: Var,
}

impl CfNet {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamSet::new();
        let stream = |k: u64| rng::stream(seed, &[purpose::INIT, k]);
        let student_enc = Encoder::new(&mut ps, "student.enc", &config, &mut stream(0));
        let teacher_enc = Encoder::new(&mut ps, "teacher.enc", &config, &mut stream(1));
        let attn = Attention::new(&mut ps, "attn", config.bottleneck(), &mut stream(2));
        let student_dec = Decoder::new(&mut ps, "student.dec", &config, &mut stream(3));
        let teacher_dec = Decoder::new(&mut ps, "teacher.dec", &config, &mut stream(4));
        Ok(CfNet { config, params: ps, student_enc, teacher_enc, attn, student_dec, teacher_dec })
    }

    /// Both branches on `(N, 1, H, W)` batches of equal shape.
    pub fn forward(&self, tape: &mut Tape<f32>, x_16bit: Var, x_1bit: Var) -> Result<CfNetOutput> {
        if tape.shape(x_16bit) != tape.shape(x_1bit) {
            return Err(Error::shape(
                "cfnet",
                format!("16-bit input {:?} vs 1-bit input {:?}", tape.shape(x_16bit), tape.shape(x_1bit)),
            ));
        }
        let ps = &self.params;
        let s = self.student_enc.forward(tape, ps, x_1bit)?;
        let t = self.teacher_enc.forward(tape, ps, x_16bit)?;
        let (f_s, f_t) = (s[STAGES - 1], t[STAGES - 1]);
        let fused_s = self.attn.forward(tape, ps, f_s, f_t)?.fused;
        let fused_t = self.attn.forward(tape, ps, f_t, f_t)?.fused;
        let x_s = self.student_dec.forward(tape, ps, fused_s, &s[..STAGES - 1])?;
        let x_t = self.teacher_dec.forward(tape, ps, fused_t, &t[..STAGES - 1])?;
        Ok(CfNetOutput { x_t, x_s, f_t, f_s })
    }

    /// Teacher-free student path.
    pub fn reconstruct(&self, tape: &mut Tape<f32>, x_1bit: Var) -> Result<Var> {
        let ps = &self.params;
        let s = self.student_enc.forward(tape, ps, x_1bit)?;
        let f_s = s[STAGES - 1];
        let fused = self.attn.forward(tape, ps, f_s, f_s)?.fused;
        self.student_dec.forward(tape, ps, fused, &s[..STAGES - 1])
    }

    /// Reconstructs an image `[H, W]` or a batch `(N, [1,] H, W)`; the output
    /// has the input's shape.
    pub fn student_reconstruct(&self, x_1bit: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let x = tape.input(as_batch(x_1bit)?);
        let y = self.reconstruct(&mut tape, x)?;
        tape.value(y).clone().reshape(x_1bit.shape())
    }

    pub fn encoder(&self) -> &Encoder {
        &self.student_enc
    }

    pub fn attention(&self) -> &Attention {
        &self.attn
    }

    pub fn student_decoder(&self) -> &Decoder {
        &self.student_dec
    }

    /// Parameter ids grouped as (name, ids) for diagnostics.
    pub fn groups(&self) -> Vec<(&'static str, Vec<ParamId>)> {
        vec![
            ("student.enc", self.student_enc.param_ids()),
            ("teacher.enc", self.teacher_enc.param_ids()),
            ("attn", self.attn.param_ids()),
            ("student.dec", self.student_dec.param_ids()),
            ("teacher.dec", self.teacher_dec.param_ids()),
        ]
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.params.ids().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(n: usize, seed: u64) -> Tensor<f32> {
        Tensor::uniform(&[n, 1, 64, 64], 0.0, 1.0, &mut rng::stream(seed, &[99]))
    }

    #[test]
    fn encoder_shapes_for_64() {
        let net = CfNet::new(EncoderConfig::default(), 1).unwrap();
        let mut tape = Tape::new();
        let x = tape.input(image(2, 0));
        let s = net.encoder().forward(&mut tape, &net.params, x).unwrap();
        let shapes: Vec<Vec<usize>> = s.iter().map(|v| tape.shape(*v).to_vec()).collect();
        assert_eq!(
            shapes,
            vec![
                vec![2, 8, 32, 32],
                vec![2, 16, 16, 16],
                vec![2, 32, 8, 8],
                vec![2, 64, 4, 4],
                vec![2, 128, 2, 2]
            ]
        );
    }

    #[test]
    fn zero_image_gives_zero_features() {
        let net = CfNet::new(EncoderConfig::default(), 3).unwrap();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[1, 1, 64, 64]));
        for v in net.encoder().forward(&mut tape, &net.params, x).unwrap() {
            assert!(tape.value(v).data().iter().all(|&a| a == 0.0));
        }
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let net = CfNet::new(EncoderConfig::default(), 3).unwrap();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[1, 1, 48, 40]));
        assert!(matches!(net.encoder().forward(&mut tape, &net.params, x), Err(Error::Shape { .. })));
    }

    #[test]
    fn seeds_give_different_bottlenecks() {
        let x = image(1, 5);
        let s4 = |seed| {
            let net = CfNet::new(EncoderConfig::default(), seed).unwrap();
            let mut tape = Tape::new();
            let v = tape.input(x.clone());
            let s = net.encoder().forward(&mut tape, &net.params, v).unwrap();
            tape.value(s[4]).clone()
        };
        assert_ne!(s4(1), s4(2));
        assert_eq!(s4(1), s4(1));
    }

    #[test]
    fn output_shapes_and_range() {
        let net = CfNet::new(EncoderConfig::default(), 9).unwrap();
        let mut tape = Tape::new();
        let x16 = tape.input(image(2, 1));
        let x1 = tape.input(image(2, 2));
        let o = net.forward(&mut tape, x16, x1).unwrap();
        assert_eq!(tape.shape(o.x_s), &[2, 1, 64, 64]);
        assert_eq!(tape.shape(o.x_t), &[2, 1, 64, 64]);
        assert_eq!(tape.shape(o.f_s), &[2, 128, 2, 2]);
        assert_eq!(tape.shape(o.f_t), &[2, 128, 2, 2]);
        for v in [o.x_s, o.x_t] {
            assert!(tape.value(v).data().iter().all(|&a| a > 0.0 && a < 1.0));
        }
    }

    #[test]
    fn reconstruct_is_deterministic_and_shape_preserving() {
        let net = CfNet::new(EncoderConfig::default(), 4).unwrap();
        let x = Tensor::uniform(&[64, 64], 0.0, 1.0, &mut rng::stream(0, &[1]));
        let a = net.student_reconstruct(&x).unwrap();
        let b = net.student_reconstruct(&x).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[64, 64]);
    }

    #[test]
    fn names_follow_namespace() {
        let net = CfNet::new(EncoderConfig::default(), 0).unwrap();
        for n in ["student.enc.stage0.w", "teacher.enc.stage4.b", "attn.wq", "student.dec.out.b", "teacher.dec.up0.w"] {
            assert!(net.params.id(n).is_some(), "{n}");
        }
        let total: usize = net.groups().iter().map(|g| g.1.len()).sum();
        assert_eq!(total, net.params.len());
    }
}
