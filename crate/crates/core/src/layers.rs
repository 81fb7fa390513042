//! Parameterized building blocks.
//!
//! Each block is generic over its parameter storage: `Block<Tensor>` owns
//! values, `Block<Var>` is the same block bound onto a [`Tape`]. `map` converts
//! between the two and walks parameters with stable dotted names.

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Half-width of the uniform initializer.
pub const INIT_SCALE: f64 = 0.08;
/// Initial value of the forget-gate bias.
pub const FORGET_BIAS: f64 = 1.0;

fn uniform_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for x in t.data_mut() {
        *x = rng::uniform(rng, -INIT_SCALE, INIT_SCALE);
    }
    t
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// LSTM cell with fused gate weights.
///
/// Gate rows are laid out as `(input, forget, cell, output)`, each `H` rows:
/// `w_input` is `4H × input_dim`, `w_hidden` is `4H × H`, `bias` is `4H`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCell<T> {
    pub w_input: T,
    pub w_hidden: T,
    pub bias: T,
}

impl<T> LstmCell<T> {
    pub fn map<'a, U>(&'a self, prefix: &str, f: &mut impl FnMut(&str, &'a T) -> U) -> LstmCell<U> {
        LstmCell {
            w_input: f(&join(prefix, "w_input"), &self.w_input),
            w_hidden: f(&join(prefix, "w_hidden"), &self.w_hidden),
            bias: f(&join(prefix, "bias"), &self.bias),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
        f(&join(prefix, "w_input"), &mut self.w_input);
        f(&join(prefix, "w_hidden"), &mut self.w_hidden);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

impl LstmCell<Tensor> {
    pub fn init(input_dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        let w_input = uniform_tensor(&[4 * hidden, input_dim], rng);
        let w_hidden = uniform_tensor(&[4 * hidden, hidden], rng);
        let mut bias = uniform_tensor(&[4 * hidden], rng);
        for b in &mut bias.data_mut()[hidden..2 * hidden] {
            *b = FORGET_BIAS;
        }
        LstmCell {
            w_input,
            w_hidden,
            bias,
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_hidden.shape()[1]
    }

    pub fn input_dim(&self) -> usize {
        self.w_input.shape()[1]
    }
}

/// One LSTM transition: returns `(h', c')`.
pub fn lstm_step(tape: &mut Tape, p: &LstmCell<Var>, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
    let hidden = tape.shape(p.w_hidden)[1];
    if tape.shape(c) != [hidden] {
        return Err(Error::dim("lstm_step", &[hidden], tape.shape(c)));
    }
    let gx = tape.matmul(p.w_input, x)?;
    let gh = tape.matmul(p.w_hidden, h)?;
    let pre = tape.add_n(&[gx, gh, p.bias])?;

    let i = tape.slice(pre, 0, hidden)?;
    let f = tape.slice(pre, hidden, hidden)?;
    let g = tape.slice(pre, 2 * hidden, hidden)?;
    let o = tape.slice(pre, 3 * hidden, hidden)?;
    let i = tape.sigmoid(i);
    let f = tape.sigmoid(f);
    let g = tape.tanh(g);
    let o = tape.sigmoid(o);

    let keep = tape.mul(f, c)?;
    let write = tape.mul(i, g)?;
    let c_next = tape.add(keep, write)?;
    let squashed = tape.tanh(c_next);
    let h_next = tape.mul(o, squashed)?;
    Ok((h_next, c_next))
}

/// Additive (tanh) attention: `score_i = v · tanh(W_k key_i + W_q query)`.
///
/// `w_key` is `A × key_dim`, `w_query` is `A × query_dim`, `score` is `1 × A`.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention<T> {
    pub w_key: T,
    pub w_query: T,
    pub score: T,
}

impl<T> Attention<T> {
    pub fn map<'a, U>(
        &'a self,
        prefix: &str,
        f: &mut impl FnMut(&str, &'a T) -> U,
    ) -> Attention<U> {
        Attention {
            w_key: f(&join(prefix, "w_key"), &self.w_key),
            w_query: f(&join(prefix, "w_query"), &self.w_query),
            score: f(&join(prefix, "score"), &self.score),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
        f(&join(prefix, "w_key"), &mut self.w_key);
        f(&join(prefix, "w_query"), &mut self.w_query);
        f(&join(prefix, "score"), &mut self.score);
    }
}

impl Attention<Tensor> {
    pub fn init(key_dim: usize, query_dim: usize, att_dim: usize, rng: &mut Rng) -> Self {
        Attention {
            w_key: uniform_tensor(&[att_dim, key_dim], rng),
            w_query: uniform_tensor(&[att_dim, query_dim], rng),
            score: uniform_tensor(&[1, att_dim], rng),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Attended {
    /// Softmax weights, one per key.
    pub weights: Var,
    /// Weighted sum of the values.
    pub context: Var,
}

/// `W_k · key`. Keys that persist across steps only need projecting once.
pub fn project_key(tape: &mut Tape, p: &Attention<Var>, key: Var) -> Result<Var> {
    tape.matmul(p.w_key, key)
}

/// Attention over keys already passed through [`project_key`].
pub fn attend_projected(
    tape: &mut Tape,
    p: &Attention<Var>,
    query: Var,
    projected_keys: &[Var],
    values: &[Var],
) -> Result<Attended> {
    if projected_keys.is_empty() {
        return Err(Error::Domain("attention over an empty key set".into()));
    }
    if projected_keys.len() != values.len() {
        return Err(Error::dim(
            "attention",
            &[projected_keys.len()],
            &[values.len()],
        ));
    }
    let q = tape.matmul(p.w_query, query)?;
    let mut hidden = Vec::with_capacity(projected_keys.len());
    for &k in projected_keys {
        let pre = tape.add(k, q)?;
        hidden.push(tape.tanh(pre));
    }
    let hidden = tape.stack_rows(&hidden)?;
    let att_dim = tape.shape(p.score)[1];
    let score = tape.reshape(p.score, vec![att_dim])?;
    let scores = tape.matmul(hidden, score)?;
    let weights = tape.softmax(scores)?;

    let stacked = tape.stack_rows(values)?;
    let row = tape.reshape(weights, vec![1, values.len()])?;
    let context = tape.matmul(row, stacked)?;
    let width = tape.shape(context)[1];
    let context = tape.reshape(context, vec![width])?;
    Ok(Attended { weights, context })
}

pub fn additive_attention(
    tape: &mut Tape,
    p: &Attention<Var>,
    query: Var,
    keys: &[Var],
    values: &[Var],
) -> Result<Attended> {
    if keys.is_empty() {
        return Err(Error::Domain("attention over an empty key set".into()));
    }
    let projected = keys
        .iter()
        .map(|&k| project_key(tape, p, k))
        .collect::<Result<Vec<_>>>()?;
    attend_projected(tape, p, query, &projected, values)
}

/// Word embedding matrix, `E × V`; column `id` embeds token `id`.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding<T> {
    pub table: T,
}

impl<T> Embedding<T> {
    pub fn map<'a, U>(
        &'a self,
        prefix: &str,
        f: &mut impl FnMut(&str, &'a T) -> U,
    ) -> Embedding<U> {
        Embedding {
            table: f(&join(prefix, "table"), &self.table),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
        f(&join(prefix, "table"), &mut self.table);
    }
}

impl Embedding<Tensor> {
    pub fn init(embed_dim: usize, vocab: usize, rng: &mut Rng) -> Self {
        Embedding {
            table: uniform_tensor(&[embed_dim, vocab], rng),
        }
    }
}

pub fn embed_lookup(tape: &mut Tape, p: &Embedding<Var>, token: usize) -> Result<Var> {
    tape.column(p.table, token)
}

/// Affine map `W x (+ b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: T,
    pub bias: Option<T>,
}

impl<T> Linear<T> {
    pub fn map<'a, U>(&'a self, prefix: &str, f: &mut impl FnMut(&str, &'a T) -> U) -> Linear<U> {
        Linear {
            weight: f(&join(prefix, "weight"), &self.weight),
            bias: self.bias.as_ref().map(|b| f(&join(prefix, "bias"), b)),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

impl Linear<Tensor> {
    pub fn init(input: usize, output: usize, with_bias: bool, rng: &mut Rng) -> Self {
        Linear {
            weight: uniform_tensor(&[output, input], rng),
            bias: with_bias.then(|| uniform_tensor(&[output], rng)),
        }
    }
}

pub fn linear(tape: &mut Tape, p: &Linear<Var>, x: Var) -> Result<Var> {
    let wx = tape.matmul(p.weight, x)?;
    match p.bias {
        Some(b) => tape.add(wx, b),
        None => Ok(wx),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::tape::sigmoid;
    use proptest::prelude::*;

    fn bind_lstm(tape: &mut Tape, p: &LstmCell<Tensor>) -> LstmCell<Var> {
        p.map("", &mut |_, t| tape.param(t))
    }

    fn bind_att(tape: &mut Tape, p: &Attention<Tensor>) -> Attention<Var> {
        p.map("", &mut |_, t| tape.param(t))
    }

    fn vec_var(tape: &mut Tape, v: &[f64]) -> Var {
        tape.constant(Tensor::vector(v.to_vec()))
    }

    #[test]
    fn lstm_zero_weights_give_zero_hidden() {
        let p = LstmCell {
            w_input: Tensor::zeros(&[8, 3]),
            w_hidden: Tensor::zeros(&[8, 2]),
            bias: Tensor::zeros(&[8]),
        };
        let mut tape = Tape::new();
        let pv = bind_lstm(&mut tape, &p);
        let x = vec_var(&mut tape, &[0.4, -1.0, 2.0]);
        let h = vec_var(&mut tape, &[0.3, 0.1]);
        let c = tape.constant(Tensor::zeros(&[2]));
        let (h2, _) = lstm_step(&mut tape, &pv, x, h, c).unwrap();
        assert_eq!(tape.value(h2).data(), &[0.0, 0.0]);
    }

    #[test]
    fn lstm_bias_only_matches_closed_form() {
        // H = 1, zero input and state: gates are functions of the bias alone.
        let mut rng = rng::seeded(3);
        let mut p = LstmCell::init(2, 1, &mut rng);
        p.bias = Tensor::vector(vec![0.3, -0.7, 0.9, 1.4]);
        let mut tape = Tape::new();
        let pv = bind_lstm(&mut tape, &p);
        let x = tape.constant(Tensor::zeros(&[2]));
        let h = tape.constant(Tensor::zeros(&[1]));
        let c = tape.constant(Tensor::zeros(&[1]));
        let (h1, c1) = lstm_step(&mut tape, &pv, x, h, c).unwrap();
        let c_expected = sigmoid(0.3) * 0.9f64.tanh();
        let h_expected = sigmoid(1.4) * c_expected.tanh();
        assert!((tape.scalar(c1).unwrap() - c_expected).abs() < 1e-15);
        assert!((tape.scalar(h1).unwrap() - h_expected).abs() < 1e-15);
    }

    #[test]
    fn lstm_saturated_forget_keeps_cell() {
        let mut rng = rng::seeded(5);
        let mut p = LstmCell::init(3, 2, &mut rng);
        let b = p.bias.data_mut();
        for v in &mut b[0..2] {
            *v = -40.0; // input gate ~ 0
        }
        for v in &mut b[2..4] {
            *v = 40.0; // forget gate ~ 1
        }
        let mut tape = Tape::new();
        let pv = bind_lstm(&mut tape, &p);
        let x = vec_var(&mut tape, &[0.2, 0.5, -0.1]);
        let h = vec_var(&mut tape, &[0.1, -0.3]);
        let c0 = vec_var(&mut tape, &[0.7, -0.4]);
        let (h1, c1) = lstm_step(&mut tape, &pv, x, h, c0).unwrap();
        let (_, c2) = lstm_step(&mut tape, &pv, x, h1, c1).unwrap();
        for (a, b) in tape.value(c2).data().iter().zip(&[0.7, -0.4]) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn lstm_rejects_bad_shapes() {
        let mut rng = rng::seeded(1);
        let p = LstmCell::init(3, 2, &mut rng);
        let mut tape = Tape::new();
        let pv = bind_lstm(&mut tape, &p);
        let x = tape.constant(Tensor::zeros(&[4]));
        let h = tape.constant(Tensor::zeros(&[2]));
        let c = tape.constant(Tensor::zeros(&[2]));
        assert!(matches!(
            lstm_step(&mut tape, &pv, x, h, c),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn attention_single_key() {
        let mut rng = rng::seeded(2);
        let p = Attention::init(3, 2, 4, &mut rng);
        let mut tape = Tape::new();
        let pv = bind_att(&mut tape, &p);
        let q = vec_var(&mut tape, &[0.5, -0.5]);
        let k = vec_var(&mut tape, &[1.0, 2.0, 3.0]);
        let a = additive_attention(&mut tape, &pv, q, &[k], &[k]).unwrap();
        assert_eq!(tape.value(a.weights).data(), &[1.0]);
        assert_eq!(tape.value(a.context).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn attention_identical_keys_average_values() {
        let mut rng = rng::seeded(4);
        let p = Attention::init(2, 2, 3, &mut rng);
        let mut tape = Tape::new();
        let pv = bind_att(&mut tape, &p);
        let q = vec_var(&mut tape, &[0.1, 0.9]);
        let k = vec_var(&mut tape, &[0.3, 0.3]);
        let v1 = vec_var(&mut tape, &[1.0, 0.0, 2.0]);
        let v2 = vec_var(&mut tape, &[3.0, 4.0, -2.0]);
        let a = additive_attention(&mut tape, &pv, q, &[k, k], &[v1, v2]).unwrap();
        for w in tape.value(a.weights).data() {
            assert!((w - 0.5).abs() < 1e-15);
        }
        let ctx = tape.value(a.context).data();
        for (c, e) in ctx.iter().zip(&[2.0, 2.0, 0.0]) {
            assert!((c - e).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_scalar_dims_match_hand_softmax() {
        // A = 1, key/query dims 1: score_i = v * tanh(wk*k_i + wq*q).
        let p = Attention {
            w_key: Tensor::matrix(1, 1, vec![0.8]).unwrap(),
            w_query: Tensor::matrix(1, 1, vec![-0.3]).unwrap(),
            score: Tensor::matrix(1, 1, vec![2.0]).unwrap(),
        };
        let (q, k1, k2): (f64, f64, f64) = (0.5, 1.5, -0.25);
        let s1 = 2.0 * (0.8 * k1 - 0.3 * q).tanh();
        let s2 = 2.0 * (0.8 * k2 - 0.3 * q).tanh();
        let w1 = s1.exp() / (s1.exp() + s2.exp());

        let mut tape = Tape::new();
        let pv = bind_att(&mut tape, &p);
        let qv = vec_var(&mut tape, &[q]);
        let a = vec_var(&mut tape, &[k1]);
        let b = vec_var(&mut tape, &[k2]);
        let att = additive_attention(&mut tape, &pv, qv, &[a, b], &[a, b]).unwrap();
        let w = tape.value(att.weights).data();
        assert!((w[0] - w1).abs() < 1e-14);
        assert!((w[1] - (1.0 - w1)).abs() < 1e-14);
        let ctx = tape.scalar(att.context).unwrap();
        assert!((ctx - (w1 * k1 + (1.0 - w1) * k2)).abs() < 1e-14);
    }

    #[test]
    fn attention_empty_keys_is_domain_error() {
        let mut rng = rng::seeded(2);
        let p = Attention::init(3, 2, 4, &mut rng);
        let mut tape = Tape::new();
        let pv = bind_att(&mut tape, &p);
        let q = vec_var(&mut tape, &[0.5, -0.5]);
        assert!(matches!(
            additive_attention(&mut tape, &pv, q, &[], &[]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn embedding_lookup_and_gradient() {
        let mut rng = rng::seeded(8);
        let p = Embedding::init(3, 5, &mut rng);
        let mut tape = Tape::new();
        let pv = p.map("", &mut |_, t| tape.param(t));
        let e0 = embed_lookup(&mut tape, &pv, 0).unwrap();
        let first: Vec<f64> = (0..3).map(|r| p.table.get2(r, 0)).collect();
        assert_eq!(tape.value(e0).data(), first.as_slice());

        // one-hot product agrees with the lookup
        let mut onehot = vec![0.0; 5];
        onehot[3] = 1.0;
        let o = vec_var(&mut tape, &onehot);
        let prod = tape.matmul(pv.table, o).unwrap();
        let e3 = embed_lookup(&mut tape, &pv, 3).unwrap();
        assert_eq!(tape.value(prod).data(), tape.value(e3).data());

        let loss = tape.sum(e3);
        let g = tape.backward(loss).unwrap();
        let gt = g.wrt(pv.table);
        for r in 0..3 {
            for c in 0..5 {
                assert_eq!(gt.get2(r, c), if c == 3 { 1.0 } else { 0.0 });
            }
        }
        assert!(matches!(
            embed_lookup(&mut tape, &pv, 5),
            Err(Error::Index { index: 5, bound: 5 })
        ));
    }

    #[test]
    fn linear_cases() {
        let mut tape = Tape::new();
        let ident = Linear {
            weight: Tensor::identity(3),
            bias: Some(Tensor::zeros(&[3])),
        };
        let pv = ident.map("", &mut |_, t| tape.param(t));
        let x = vec_var(&mut tape, &[1.0, -2.0, 0.5]);
        let y = linear(&mut tape, &pv, x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, -2.0, 0.5]);

        let zero = Linear {
            weight: Tensor::zeros(&[2, 3]),
            bias: Some(Tensor::vector(vec![0.25, -4.0])),
        };
        let pv = zero.map("", &mut |_, t| tape.param(t));
        let y = linear(&mut tape, &pv, x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.25, -4.0]);

        let mut rng = rng::seeded(6);
        let rand = Linear::init(3, 2, true, &mut rng);
        let pv = rand.map("", &mut |_, t| tape.param(t));
        let y = linear(&mut tape, &pv, x).unwrap();
        let wx = tape.matmul(pv.weight, x).unwrap();
        let composed = tape.add(wx, pv.bias.unwrap()).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(composed).data());

        let bad = vec_var(&mut tape, &[1.0, 2.0]);
        assert!(linear(&mut tape, &pv, bad).is_err());
    }

    #[test]
    fn parameter_names_are_dotted() {
        let mut rng = rng::seeded(0);
        let p = Linear::init(2, 2, false, &mut rng);
        let mut names = Vec::new();
        p.map("head", &mut |n, _| names.push(n.to_string()));
        assert_eq!(names, ["head.weight"]);
    }

    #[test]
    fn lstm_gradcheck() {
        let mut rng = rng::seeded(21);
        let p = LstmCell::init(3, 2, &mut rng);
        let params = vec![
            p.w_input.clone(),
            p.w_hidden.clone(),
            p.bias.clone(),
            Tensor::vector(vec![0.3, -0.6, 0.9]),
            Tensor::vector(vec![0.1, 0.2]),
            Tensor::vector(vec![-0.5, 0.4]),
        ];
        let report = grad_check(&params, 1e-5, |tape, v| {
            let cell = LstmCell {
                w_input: v[0],
                w_hidden: v[1],
                bias: v[2],
            };
            let (h, c) = lstm_step(tape, &cell, v[3], v[4], v[5])?;
            let (h, c) = lstm_step(tape, &cell, v[3], h, c)?;
            let hc = tape.mul(h, c)?;
            let s = tape.sum(hc);
            let sh = tape.sum(h);
            tape.add(s, sh)
        })
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }

    #[test]
    fn attention_gradcheck() {
        let mut rng = rng::seeded(22);
        let p = Attention::init(3, 2, 4, &mut rng);
        let params = vec![
            p.w_key.clone(),
            p.w_query.clone(),
            Tensor::matrix(1, 4, vec![0.9, -1.1, 0.7, 1.3]).unwrap(),
            Tensor::vector(vec![0.8, -0.4]),
            Tensor::vector(vec![1.0, 0.5, -1.0]),
            Tensor::vector(vec![-0.2, 0.9, 0.3]),
            Tensor::vector(vec![0.6, -0.8, 1.2]),
        ];
        let report = grad_check(&params, 1e-5, |tape, v| {
            let att = Attention {
                w_key: v[0],
                w_query: v[1],
                score: v[2],
            };
            let keys = [v[4], v[5], v[6]];
            let a = additive_attention(tape, &att, v[3], &keys, &keys)?;
            let w = tape.select(a.weights, 0)?;
            let sq = tape.mul(a.context, a.context)?;
            let s = tape.sum(sq);
            tape.add(s, w)
        })
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }

    #[test]
    fn embedding_and_linear_gradcheck() {
        let mut rng = rng::seeded(23);
        let e = Embedding::init(3, 4, &mut rng);
        let l = Linear::init(3, 2, true, &mut rng);
        let params = vec![e.table.clone(), l.weight.clone(), l.bias.clone().unwrap()];
        let report = grad_check(&params, 1e-5, |tape, v| {
            let x = tape.column(v[0], 2)?;
            let lin = Linear {
                weight: v[1],
                bias: Some(v[2]),
            };
            let y = linear(tape, &lin, x)?;
            let t = tape.tanh(y);
            Ok(tape.sum(t))
        })
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }

    fn arb_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-3.0f64..3.0, len)
    }

    proptest! {
        #[test]
        fn attention_weights_form_simplex(
            seed in 0u64..1000,
            keys in prop::collection::vec(arb_vec(3), 1..6),
            query in arb_vec(2),
        ) {
            let mut rng = rng::seeded(seed);
            let p = Attention::init(3, 2, 4, &mut rng);
            let mut tape = Tape::new();
            let pv = bind_att(&mut tape, &p);
            let q = vec_var(&mut tape, &query);
            let ks: Vec<Var> = keys.iter().map(|k| vec_var(&mut tape, k)).collect();
            let a = additive_attention(&mut tape, &pv, q, &ks, &ks).unwrap();
            let w = tape.value(a.weights).data();
            prop_assert_eq!(w.len(), keys.len());
            prop_assert!(w.iter().all(|&x| x >= 0.0));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn attention_is_permutation_equivariant(
            seed in 0u64..1000,
            keys in prop::collection::vec(arb_vec(3), 2..6),
            query in arb_vec(2),
            rot in 0usize..6,
        ) {
            let mut rng = rng::seeded(seed);
            let p = Attention::init(3, 2, 4, &mut rng);
            let n = keys.len();
            let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();

            let mut tape = Tape::new();
            let pv = bind_att(&mut tape, &p);
            let q = vec_var(&mut tape, &query);
            let ks: Vec<Var> = keys.iter().map(|k| vec_var(&mut tape, k)).collect();
            let permuted: Vec<Var> = perm.iter().map(|&i| ks[i]).collect();
            let a = additive_attention(&mut tape, &pv, q, &ks, &ks).unwrap();
            let b = additive_attention(&mut tape, &pv, q, &permuted, &permuted).unwrap();
            let (wa, wb) = (tape.value(a.weights).data(), tape.value(b.weights).data());
            for (j, &i) in perm.iter().enumerate() {
                prop_assert!((wb[j] - wa[i]).abs() <= 1e-12);
            }
            for (x, y) in tape.value(a.context).data().iter().zip(tape.value(b.context).data()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn lstm_hidden_is_bounded(
            seed in 0u64..1000,
            x in arb_vec(3),
            h in prop::collection::vec(-1.0f64..1.0, 2),
            c in arb_vec(2),
        ) {
            let mut rng = rng::seeded(seed);
            let mut p = LstmCell::init(3, 2, &mut rng);
            for w in p.w_input.data_mut() {
                *w *= 20.0;
            }
            let mut tape = Tape::new();
            let pv = bind_lstm(&mut tape, &p);
            let (xv, hv, cv) = (vec_var(&mut tape, &x), vec_var(&mut tape, &h), vec_var(&mut tape, &c));
            let (h1, c1) = lstm_step(&mut tape, &pv, xv, hv, cv).unwrap();
            prop_assert!(tape.value(h1).data().iter().all(|v| v.abs() < 1.0));
            prop_assert!(tape.value(c1).is_finite());
        }
    }
}
