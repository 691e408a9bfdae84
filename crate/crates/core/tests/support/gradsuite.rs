//! Central-difference gradient checks for every tape primitive and loss.
//!
//! Each case is a small graph over random leaves; the checked scalar is
//! `sum(out * R)` for a fixed random `R`, so every output element gets a
//! distinct cotangent. Numeric gradients are taken in f64. The analytic
//! gradient is checked in both f64 and f32 against the same numeric one.

use cfnet::losses::{self, Components, LossWeights};
use cfnet::ndgrad::{Element, Tape, Tensor, Var};
use cfnet::rng;
use rand::Rng;

pub const POINTS: usize = 10;
const MAX_COORDS: usize = 64;
const H: f64 = 1e-6;
pub const TOL_F64: f64 = 1e-6;
pub const TOL_F32: f64 = 1e-3;

#[derive(Clone, Copy)]
pub enum Dom {
    /// Signed, bounded away from zero (keeps ReLU-style kinks out of reach).
    Signed,
    /// In [0.5, 2].
    Pos,
}

type Build<T> = fn(&mut Tape<T>, &[Var]) -> cfnet::Result<Var>;

pub struct Case {
    pub name: &'static str,
    inputs: Vec<(Vec<usize>, Dom)>,
    f64: Build<f64>,
    f32: Build<f32>,
}

macro_rules! case {
    ($name:expr, [$(($($d:expr),*; $dom:ident)),*], |$t:ident, $v:ident| $body:expr) => {
        Case {
            name: $name,
            inputs: vec![$((vec![$($d),*], Dom::$dom)),*],
            f64: |$t: &mut Tape<f64>, $v: &[Var]| $body,
            f32: |$t: &mut Tape<f32>, $v: &[Var]| $body,
        }
    };
}

const SEP_LABELS: [usize; 6] = [0, 0, 1, 1, 2, 2];
const FOCAL_LABELS: [usize; 4] = [2, 0, 1, 2];
const FOCAL_ALPHA: [f64; 3] = [1.0, 0.5, 2.0];

pub fn cases() -> Vec<Case> {
    vec![
        case!("add", [(3, 4; Signed), (4; Signed)], |t, v| t.add(v[0], v[1])),
        case!("sub", [(2, 3, 4; Signed), (3, 1; Signed)], |t, v| t.sub(v[0], v[1])),
        case!("mul", [(2, 3, 4; Signed), (3, 1; Signed)], |t, v| t.mul(v[0], v[1])),
        case!("div", [(3, 4; Signed), (1, 4; Pos)], |t, v| t.div(v[0], v[1])),
        case!("affine", [(5; Signed)], |t, v| t.affine(v[0], 1.7, -0.3)),
        case!("matmul", [(3, 4; Signed), (4, 5; Signed)], |t, v| t.matmul(v[0], v[1])),
        case!("matmul_batched", [(2, 3, 4; Signed), (2, 4, 2; Signed)], |t, v| t.matmul(v[0], v[1])),
        case!("matmul_bcast", [(2, 3, 4; Signed), (4, 5; Signed)], |t, v| t.matmul(v[0], v[1])),
        case!("conv2d", [(2, 3, 6, 6; Signed), (4, 3, 3, 3; Signed), (4; Signed)], |t, v| {
            t.conv2d(v[0], v[1], Some(v[2]), 1, 1)
        }),
        case!("conv2d_s2", [(1, 2, 7, 7; Signed), (3, 2, 3, 3; Signed)], |t, v| t.conv2d(v[0], v[1], None, 2, 0)),
        case!("conv_transpose2d", [(2, 3, 4, 4; Signed), (3, 2, 3, 3; Signed), (2; Signed)], |t, v| {
            t.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1)
        }),
        case!("relu", [(3, 5; Signed)], |t, v| t.relu(v[0])),
        case!("sigmoid", [(3, 5; Signed)], |t, v| t.sigmoid(v[0])),
        case!("softmax", [(3, 5; Signed)], |t, v| t.softmax(v[0])),
        case!("log_softmax", [(3, 5; Signed)], |t, v| t.log_softmax(v[0])),
        case!("global_avg_pool", [(2, 3, 4, 4; Signed)], |t, v| t.global_avg_pool(v[0])),
        case!("avg_pool", [(2, 2, 6, 6; Signed)], |t, v| t.avg_pool(v[0], 2, 2)),
        case!("reshape", [(2, 6; Signed)], |t, v| t.reshape(v[0], &[3, 4])),
        case!("transpose", [(2, 3, 4; Signed)], |t, v| t.transpose(v[0])),
        case!("concat", [(2, 3; Signed), (2, 2; Signed)], |t, v| t.concat(&[v[0], v[1]], 1)),
        case!("sum", [(2, 3, 4; Signed)], |t, v| t.sum(v[0], &[1], true)),
        case!("sum_all", [(2, 3; Signed)], |t, v| t.sum_all(v[0])),
        case!("mean", [(2, 3, 4; Signed)], |t, v| t.mean(v[0], &[0, 2], false)),
        case!("square", [(7; Signed)], |t, v| t.square(v[0])),
        case!("sqrt", [(7; Pos)], |t, v| t.sqrt(v[0])),
        case!("pow", [(7; Pos)], |t, v| t.pow(v[0], 1.5)),
        case!("exp", [(7; Signed)], |t, v| t.exp(v[0])),
        case!("log", [(7; Pos)], |t, v| t.log(v[0])),
        case!("l2_norm", [(3, 4; Signed)], |t, v| t.l2_norm(v[0], 1)),
        case!("pairwise_distance", [(4, 3; Signed)], |t, v| t.pairwise_distance(v[0])),
        case!("slice", [(3, 5; Signed)], |t, v| t.slice(v[0], 1, 1, 2)),
        case!("gather", [(3, 4; Signed)], |t, v| t.gather(v[0], vec![0, 5, 5, 11])),
        case!("l_rec", [(2, 1, 4, 4; Signed), (2, 1, 4, 4; Signed)], |t, v| losses::l_rec(t, v[0], v[1])),
        case!("l_con", [(2, 1, 4, 4; Signed), (2, 1, 4, 4; Signed)], |t, v| losses::l_con(t, v[0], v[1])),
        case!("l_align", [(3, 2, 2, 2; Signed), (3, 2, 2, 2; Signed)], |t, v| losses::l_align(t, v[0], v[1])),
        case!("l_sep", [(6, 4; Signed)], |t, v| losses::l_sep(t, v[0], &SEP_LABELS, 0.2, false)),
        case!("l_sep_normalized", [(6, 4; Signed)], |t, v| losses::l_sep(t, v[0], &SEP_LABELS, 0.2, true)),
        case!("focal_g0", [(4, 3; Signed)], |t, v| losses::focal_loss(t, v[0], &FOCAL_LABELS, 0.0, &FOCAL_ALPHA)),
        case!("focal_g2", [(4, 3; Signed)], |t, v| losses::focal_loss(t, v[0], &FOCAL_LABELS, 2.0, &FOCAL_ALPHA)),
        case!(
            "compound",
            [(6, 1, 3, 3; Signed), (6, 1, 3, 3; Signed), (6, 1, 3, 3; Signed), (6, 4; Signed), (6, 4; Signed)],
            |t, v| {
                let c = Components {
                    rec: losses::l_rec(t, v[0], v[1])?,
                    con: losses::l_con(t, v[2], v[0])?,
                    align: losses::l_align(t, v[3], v[4])?,
                    sep: losses::l_sep(t, v[4], &SEP_LABELS, 0.2, false)?,
                };
                losses::compound(t, &c, &LossWeights::default())
            }
        ),
    ]
}

fn sample(shape: &[usize], dom: Dom, r: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| match dom {
            Dom::Signed => {
                let u: f64 = r.random_range(-1.0..1.0);
                u.signum() * (0.05 + 0.95 * u.abs())
            }
            Dom::Pos => r.random_range(0.5..2.0),
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Value of `sum(out * R)` and, if asked, the gradient for every input.
fn eval<T: Element>(build: Build<T>, xs: &[Tensor<f64>], r: Option<&Tensor<f64>>, grads: bool) -> (Tensor<f64>, f64, Vec<Tensor<f64>>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.cast::<T>(), grads)).collect();
    let out = build(&mut tape, &vars).unwrap_or_else(|e| panic!("forward failed: {e}"));
    let out_val = tape.value(out).cast::<f64>();
    let Some(r) = r else { return (out_val, 0.0, vec![]) };
    let rv = tape.input(r.cast::<T>());
    let prod = tape.mul(out, rv).unwrap();
    let l = tape.sum_all(prod).unwrap();
    let lv = tape.value(l).item().to_f64().unwrap();
    if !grads {
        return (out_val, lv, vec![]);
    }
    let g = tape.backward(l).unwrap();
    let gs = vars
        .iter()
        .zip(xs)
        .map(|(&v, x)| g.get(v).map(|t| t.cast::<f64>()).unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect();
    (out_val, lv, gs)
}

#[derive(Debug, Clone)]
pub struct CaseResult {
    pub name: &'static str,
    pub points: usize,
    /// Resampled because a kink lay within the stencil.
    pub resampled: usize,
    pub err_f64: f64,
    pub err_f32: f64,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.points >= POINTS && self.err_f64 < TOL_F64 && self.err_f32 < TOL_F32
    }
}

/// Max abs deviation over the sampled coordinates, relative to the largest
/// numeric gradient magnitude (floored so all-zero gradients compare absolutely).
fn rel_err(analytic: &[(f64, f64)]) -> f64 {
    let scale = analytic.iter().map(|&(_, n)| n.abs()).fold(1e-3, f64::max);
    analytic.iter().map(|&(a, n)| (a - n).abs()).fold(0.0, f64::max) / scale
}

pub fn check(case: &Case, seed: u64) -> CaseResult {
    let mut res = CaseResult { name: case.name, points: 0, resampled: 0, err_f64: 0.0, err_f32: 0.0 };
    let mut attempt = 0u64;
    while res.points < POINTS {
        assert!(attempt < 20 * POINTS as u64, "{}: too many kinked points", case.name);
        let mut r = rng::stream(seed, &[attempt]);
        attempt += 1;
        let xs: Vec<_> = case.inputs.iter().map(|(s, d)| sample(s, *d, &mut r)).collect();
        let (out, _, _) = eval(case.f64, &xs, None, false);
        let cot = sample(out.shape(), Dom::Signed, &mut r);
        let (_, l0, g64) = eval(case.f64, &xs, Some(&cot), true);
        let (_, _, g32) = eval(case.f32, &xs, Some(&cot), true);
        let (mut p64, mut p32) = (vec![], vec![]);
        let mut kinked = false;
        'inputs: for (i, x) in xs.iter().enumerate() {
            let n = x.data().len();
            let coords: Vec<usize> =
                if n <= MAX_COORDS { (0..n).collect() } else { (0..MAX_COORDS).map(|_| r.random_range(0..n)).collect() };
            for c in coords {
                let mut shifted = xs.clone();
                shifted[i].data_mut()[c] = x.data()[c] + H;
                let (_, lp, _) = eval(case.f64, &shifted, Some(&cot), false);
                shifted[i].data_mut()[c] = x.data()[c] - H;
                let (_, lm, _) = eval(case.f64, &shifted, Some(&cot), false);
                // A smooth function has a second difference of order h^2;
                // crossing a kink makes it of order h.
                if (lp + lm - 2.0 * l0).abs() > 1e-9 * l0.abs().max(1.0) {
                    kinked = true;
                    break 'inputs;
                }
                let num = (lp - lm) / (2.0 * H);
                p64.push((g64[i].data()[c], num));
                p32.push((g32[i].data()[c], num));
            }
        }
        if kinked {
            res.resampled += 1;
            continue;
        }
        res.err_f64 = res.err_f64.max(rel_err(&p64));
        res.err_f32 = res.err_f32.max(rel_err(&p32));
        res.points += 1;
    }
    res
}

pub fn run_all(seed: u64) -> Vec<CaseResult> {
    cases().iter().enumerate().map(|(k, c)| check(c, rng::mix(&[seed, k as u64]))).collect()
}
