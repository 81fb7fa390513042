//! Scalar transcription of the batch objective, generic over the float type.
//!
//! Evaluated in double-double arithmetic it gives finite differences whose
//! rounding noise sits far below what an `f64` evaluation of a loss of this
//! size can resolve, which is what the model gradient check compares against.

use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::error::{Error, Result};
use crate::gradcheck::{analytic_gradients, relative_error};
use crate::model::{ModelDims, Rdn, RdnParams, RdnWeights, Variant};
use crate::rng;
use crate::tensor::Tensor;
use crate::train::{batch_objective, Example};
use crate::vocab::{BOS, EOS};

pub trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
}

/// Unevaluated sum `hi + lo` with `|lo| ≤ ulp(hi)/2`, about 106 bits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DoubleDouble {
    pub hi: f64,
    pub lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

impl DoubleDouble {
    pub fn new(hi: f64, lo: f64) -> Self {
        let (hi, lo) = two_sum(hi, lo);
        DoubleDouble { hi, lo }
    }

    fn scale_pow2(self, k: i32) -> Self {
        let f = 2f64.powi(k);
        DoubleDouble {
            hi: self.hi * f,
            lo: self.lo * f,
        }
    }

    fn mul_f64(self, b: f64) -> Self {
        let (p, e) = two_prod(self.hi, b);
        let (hi, lo) = quick_two_sum(p, e + self.lo * b);
        DoubleDouble { hi, lo }
    }
}

impl Add for DoubleDouble {
    type Output = Self;
    fn add(self, b: Self) -> Self {
        let (s, e) = two_sum(self.hi, b.hi);
        let (t, f) = two_sum(self.lo, b.lo);
        let (s, e) = quick_two_sum(s, e + t);
        let (hi, lo) = quick_two_sum(s, e + f);
        DoubleDouble { hi, lo }
    }
}

impl Neg for DoubleDouble {
    type Output = Self;
    fn neg(self) -> Self {
        DoubleDouble {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl Sub for DoubleDouble {
    type Output = Self;
    fn sub(self, b: Self) -> Self {
        self + -b
    }
}

impl Mul for DoubleDouble {
    type Output = Self;
    fn mul(self, b: Self) -> Self {
        let (p, e) = two_prod(self.hi, b.hi);
        let (hi, lo) = quick_two_sum(p, e + (self.hi * b.lo + self.lo * b.hi));
        DoubleDouble { hi, lo }
    }
}

impl Div for DoubleDouble {
    type Output = Self;
    fn div(self, b: Self) -> Self {
        let q1 = self.hi / b.hi;
        let r = self - b.mul_f64(q1);
        let q2 = r.hi / b.hi;
        let r = r - b.mul_f64(q2);
        let q3 = r.hi / b.hi;
        let (hi, lo) = quick_two_sum(q1, q2);
        DoubleDouble { hi, lo } + DoubleDouble::from_f64(q3)
    }
}

impl Scalar for DoubleDouble {
    fn from_f64(x: f64) -> Self {
        DoubleDouble { hi: x, lo: 0.0 }
    }
    fn to_f64(self) -> f64 {
        self.hi + self.lo
    }
    fn exp(self) -> Self {
        let (k, m) = exp_parts(self);
        (DoubleDouble::from_f64(1.0) + m).scale_pow2(k)
    }
    fn ln(self) -> Self {
        let one = DoubleDouble::from_f64(1.0);
        let mut y = DoubleDouble::from_f64(self.hi.ln());
        for _ in 0..2 {
            y = y + self * Scalar::exp(-y) - one;
        }
        y
    }
    fn tanh(self) -> Self {
        let one = DoubleDouble::from_f64(1.0);
        let negative = self.hi < 0.0;
        let ax = if negative { -self } else { self };
        let (k, m) = exp_parts(ax.mul_f64(-2.0));
        // tanh|x| = (1 − e^{−2|x|}) / (1 + e^{−2|x|}), via e^{−2|x|} − 1 near zero
        let t = if k == 0 {
            -m / (m + DoubleDouble::from_f64(2.0))
        } else {
            let e = (one + m).scale_pow2(k);
            (one - e) / (one + e)
        };
        if negative {
            -t
        } else {
            t
        }
    }
}

/// `(k, m)` with `exp(x) = 2^k · (1 + m)`.
fn exp_parts(x: DoubleDouble) -> (i32, DoubleDouble) {
    const LN_2: DoubleDouble = DoubleDouble {
        hi: std::f64::consts::LN_2,
        lo: 2.319_046_813_846_299_6e-17,
    };
    let x = if x.hi.abs() > 700.0 {
        DoubleDouble::from_f64(x.hi.clamp(-700.0, 700.0))
    } else {
        x
    };
    let k = (x.hi / LN_2.hi).round();
    let r = x - LN_2.mul_f64(k);
    // Taylor series for e^s − 1 at s = r / 2^10, then (1 + m)² − 1 = m(2 + m)
    let s = r.scale_pow2(-10);
    let mut term = s;
    let mut m = s;
    for n in 2..=12 {
        term = term * s / DoubleDouble::from_f64(n as f64);
        m = m + term;
    }
    let two = DoubleDouble::from_f64(2.0);
    for _ in 0..10 {
        m = m * (m + two);
    }
    (k as i32, m)
}

/// Row-major matrix; vectors are `n × 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat<S> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<S>,
}

impl<S: Scalar> Mat<S> {
    pub fn from_tensor(t: &Tensor) -> Self {
        let (rows, cols) = match t.shape() {
            [r, c] => (*r, *c),
            _ => (t.len(), 1),
        };
        Mat {
            rows,
            cols,
            data: t.data().iter().map(|&x| S::from_f64(x)).collect(),
        }
    }

    fn at(&self, i: usize, j: usize) -> S {
        self.data[i * self.cols + j]
    }

    fn matvec(&self, x: &[S]) -> Vec<S> {
        (0..self.rows)
            .map(|i| (0..self.cols).fold(S::from_f64(0.0), |acc, j| acc + self.at(i, j) * x[j]))
            .collect()
    }
}

fn zero<S: Scalar>() -> S {
    S::from_f64(0.0)
}

fn add<S: Scalar>(a: &[S], b: &[S]) -> Vec<S> {
    a.iter().zip(b).map(|(&x, &y)| x + y).collect()
}

fn sigmoid<S: Scalar>(x: S) -> S {
    S::from_f64(1.0) / (S::from_f64(1.0) + (-x).exp())
}

/// `log Σ exp(x)` with max subtraction.
fn log_sum_exp<S: Scalar>(x: &[S]) -> S {
    let m = x
        .iter()
        .map(|v| v.to_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let m = S::from_f64(m);
    let s = x.iter().fold(zero::<S>(), |acc, &v| acc + (v - m).exp());
    m + s.ln()
}

fn lstm<S: Scalar>(
    w_x: &Mat<S>,
    w_h: &Mat<S>,
    bias: &Mat<S>,
    x: &[S],
    h: &[S],
    c: &[S],
) -> (Vec<S>, Vec<S>) {
    let n = h.len();
    let z = add(&add(&w_x.matvec(x), &w_h.matvec(h)), &bias.data);
    let mut h_next = Vec::with_capacity(n);
    let mut c_next = Vec::with_capacity(n);
    for j in 0..n {
        let i = sigmoid(z[j]);
        let f = sigmoid(z[n + j]);
        let g = z[2 * n + j].tanh();
        let o = sigmoid(z[3 * n + j]);
        let cj = f * c[j] + i * g;
        c_next.push(cj);
        h_next.push(o * cj.tanh());
    }
    (h_next, c_next)
}

fn attend<S: Scalar>(
    w_k: &Mat<S>,
    w_q: &Mat<S>,
    score: &Mat<S>,
    query: &[S],
    keys: &[Vec<S>],
) -> Vec<S> {
    let q = w_q.matvec(query);
    let scores: Vec<S> = keys
        .iter()
        .map(|k| {
            let hidden = add(&w_k.matvec(k), &q);
            hidden
                .iter()
                .zip(&score.data)
                .fold(zero::<S>(), |acc, (&h, &w)| acc + h.tanh() * w)
        })
        .collect();
    let lse = log_sum_exp(&scores);
    let mut ctx = vec![zero::<S>(); keys[0].len()];
    for (s, k) in scores.iter().zip(keys) {
        let a = (*s - lse).exp();
        for (c, &x) in ctx.iter_mut().zip(k) {
            *c = *c + a * x;
        }
    }
    ctx
}

/// Per-caption `(xe, pos)` under teacher forcing.
pub fn caption_loss<S: Scalar>(
    w: &RdnWeights<Mat<S>>,
    variant: Variant,
    regions: &[Tensor],
    tokens: &[usize],
) -> (S, S) {
    let keys: Vec<Vec<S>> = regions
        .iter()
        .map(|r| r.data().iter().map(|&x| S::from_f64(x)).collect())
        .collect();
    let k = S::from_f64(keys.len() as f64);
    let mut mean = vec![zero::<S>(); keys[0].len()];
    for r in &keys {
        for (m, &x) in mean.iter_mut().zip(r) {
            *m = *m + x / k;
        }
    }
    let hidden = w.lstm1.w_hidden.cols;
    let blank = vec![zero::<S>(); hidden];
    let (mut h1, mut c1, mut h2, mut c2) = (blank.clone(), blank.clone(), blank.clone(), blank);
    let mut history: Vec<Vec<S>> = Vec::with_capacity(tokens.len());
    let (mut xe, mut pos) = (zero::<S>(), zero::<S>());
    let n = tokens.len() as f64;
    let mut prev = BOS;
    for (t, &gold) in tokens.iter().enumerate() {
        let emb = (0..w.embedding.table.rows).map(|r| w.embedding.table.at(r, prev));
        let x1: Vec<S> = mean
            .iter()
            .copied()
            .chain(emb)
            .chain(h2.iter().copied())
            .collect();
        (h1, c1) = lstm(
            &w.lstm1.w_input,
            &w.lstm1.w_hidden,
            &w.lstm1.bias,
            &x1,
            &h1,
            &c1,
        );
        let r_hat = attend(
            &w.att_vis.w_key,
            &w.att_vis.w_query,
            &w.att_vis.score,
            &h1,
            &keys,
        );
        let x2: Vec<S> = r_hat.iter().chain(&h1).copied().collect();
        (h2, c2) = lstm(
            &w.lstm2.w_input,
            &w.lstm2.w_hidden,
            &w.lstm2.bias,
            &x2,
            &h2,
            &c2,
        );
        history.push(h2.clone());
        let h_hat = if variant.uses_reflective_attention() {
            attend(
                &w.att_ref.w_key,
                &w.att_ref.w_query,
                &w.att_ref.score,
                &h1,
                &history,
            )
        } else {
            h2.clone()
        };
        let bias = w
            .out_head
            .bias
            .as_ref()
            .map(|b| b.data.clone())
            .unwrap_or_default();
        let logits = add(&w.out_head.weight.matvec(&h_hat), &bias);
        xe = xe + log_sum_exp(&logits) - logits[gold];
        let p = sigmoid(w.pos_head.weight.matvec(&h_hat)[0]);
        let d = p - S::from_f64((t + 1) as f64 / n);
        pos = pos + d * d;
        prev = gold;
    }
    (xe, pos)
}

/// Batch mean of `xe + λ·pos`, matching [`batch_objective`].
pub fn batch_loss<S: Scalar>(
    w: &RdnWeights<Mat<S>>,
    variant: Variant,
    batch: &[Example],
    lambda: f64,
) -> S {
    let mut total = zero::<S>();
    for ex in batch {
        let (xe, pos) = caption_loss(w, variant, &ex.regions, &ex.tokens);
        total = total + xe;
        if lambda > 0.0 {
            total = total + S::from_f64(lambda) * pos;
        }
    }
    total / S::from_f64(batch.len() as f64)
}

/// Outcome of [`precise_grad_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGradCheck {
    pub max_rel_error: f64,
    /// Parameter holding the worst coordinate.
    pub worst_parameter: String,
    pub coordinates: usize,
}

/// Tape gradients of the batch objective against central differences of
/// the double-double [`batch_loss`], over every parameter coordinate.
/// `corrupt` names a parameter whose analytic gradient is perturbed first.
pub fn precise_grad_check(
    params: &RdnParams,
    examples: &[Example],
    lambda: f64,
    eps: f64,
    corrupt: Option<&str>,
) -> Result<ModelGradCheck> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Domain(format!(
            "finite-difference step {eps} outside [1e-7, 1e-3]"
        )));
    }
    if examples.is_empty() {
        return Err(Error::Domain(
            "gradient check needs at least one example".into(),
        ));
    }
    let lambda = if params.variant.uses_position_loss() {
        lambda
    } else {
        0.0
    };
    let named = params.weights.named();
    let names: Vec<String> = named.iter().map(|(n, _)| n.clone()).collect();
    let flat: Vec<Tensor> = named.into_iter().map(|(_, t)| t.clone()).collect();
    if let Some(c) = corrupt {
        if !names.iter().any(|n| n == c) {
            return Err(Error::Config(format!("unknown parameter {c}")));
        }
    }

    let batch: Vec<&Example> = examples.iter().collect();
    let mut analytic = analytic_gradients(&flat, &|tape, vars| {
        let rdn = Rdn {
            dims: params.dims,
            variant: params.variant,
            weights: params.weights.from_ordered(vars.to_vec())?,
        };
        Ok(batch_objective(tape, &rdn, &batch, lambda)?.2)
    })?;
    if let Some(i) = corrupt.and_then(|c| names.iter().position(|n| n == c)) {
        let g = &mut analytic[i].data_mut()[0];
        *g = 2.0 * *g + 1e-2;
    }

    let mut mats: Vec<Mat<DoubleDouble>> = flat.iter().map(Mat::from_tensor).collect();
    let eval = |mats: &[Mat<DoubleDouble>]| -> Result<DoubleDouble> {
        let w = params.weights.from_ordered(mats.to_vec())?;
        Ok(batch_loss(&w, params.variant, examples, lambda))
    };
    let step = DoubleDouble::from_f64(eps);
    let mut report = ModelGradCheck {
        max_rel_error: 0.0,
        worst_parameter: String::new(),
        coordinates: 0,
    };
    for (pi, grad) in analytic.iter().enumerate() {
        for ci in 0..grad.len() {
            let orig = mats[pi].data[ci];
            mats[pi].data[ci] = orig + step;
            let plus = eval(&mats)?;
            mats[pi].data[ci] = orig - step;
            let minus = eval(&mats)?;
            mats[pi].data[ci] = orig;
            let numeric = ((plus - minus) / (step + step)).to_f64();
            if !numeric.is_finite() {
                return Err(Error::NonFinite {
                    what: format!("objective at {}, coordinate {ci}", names[pi]),
                });
            }
            let err = relative_error(grad.data()[ci], numeric);
            if err > report.max_rel_error || report.coordinates == 0 {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst_parameter = names[pi].clone();
            }
            report.coordinates += 1;
        }
    }
    Ok(report)
}

/// Tiny full-variant model and one record for gradient checking: `k = 3`
/// standard-normal regions, four random words and `<eos>`. Weights are
/// Gaussian with standard deviation `1/√fan_in` so that gates and attention
/// scores sit in their responsive range.
pub fn gradcheck_fixture(dims: ModelDims, seed: u64) -> Result<(RdnParams, Example)> {
    if dims.vocab <= EOS + 2 {
        return Err(Error::Config(format!(
            "vocabulary of {} is too small",
            dims.vocab
        )));
    }
    let mut params = RdnParams::init(dims, Variant::Full, seed)?;
    let mut r = rng::seeded(seed);
    params.weights.visit_mut(&mut |_, t| {
        let fan_in = if t.shape().len() == 2 {
            t.shape()[1]
        } else {
            1
        } as f64;
        for x in t.data_mut() {
            *x = rng::standard_normal(&mut r) / fan_in.sqrt();
        }
    });
    let regions = (0..3)
        .map(|_| {
            Tensor::vector(
                (0..dims.region)
                    .map(|_| rng::standard_normal(&mut r))
                    .collect(),
            )
        })
        .collect();
    let mut tokens: Vec<usize> = (0..4)
        .map(|_| EOS + 2 + rng::index(&mut r, dims.vocab - EOS - 2))
        .collect();
    tokens.push(EOS);
    Ok((params, Example { regions, tokens }))
}
