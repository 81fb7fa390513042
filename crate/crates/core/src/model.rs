//! The reflective decoder.
//!
//! One decoding step runs, in order:
//!
//! 1. `h¹, c¹ = LSTM₁([r̄; W_e·token; h²ₜ₋₁], h¹ₜ₋₁, c¹ₜ₋₁)`
//! 2. visual attention with query `h¹` over the regions, giving `r̂`
//! 3. `h², c² = LSTM₂([r̂; h¹], h²ₜ₋₁, c²ₜ₋₁)`, appended to the history
//! 4. reflective attention with query `h¹` over every history entry
//!    (including the current `h²`), giving `ĥ²`
//! 5. word logits `W_s ĥ² + b_s` and relative position `σ(W_l ĥ²)`
//!
//! Variants without reflective attention use `ĥ² = h²`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    attend_projected, embed_lookup, linear, lstm_step, project_key, Attention, Embedding, Linear,
    LstmCell,
};
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::vocab::BOS;

/// Ablation variants: which of the reflective modules are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Neither reflective attention nor the position loss.
    #[serde(rename = "baseline")]
    Baseline,
    /// Position loss only.
    #[serde(rename = "pos")]
    PosOnly,
    /// Reflective attention only.
    #[serde(rename = "ref")]
    RefOnly,
    #[serde(rename = "full")]
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Baseline,
        Variant::PosOnly,
        Variant::RefOnly,
        Variant::Full,
    ];

    pub fn uses_reflective_attention(self) -> bool {
        matches!(self, Variant::RefOnly | Variant::Full)
    }

    pub fn uses_position_loss(self) -> bool {
        matches!(self, Variant::PosOnly | Variant::Full)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::PosOnly => "pos",
            Variant::RefOnly => "ref",
            Variant::Full => "full",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Region feature width `D`.
    pub region: usize,
    /// Word embedding width `E`.
    pub embed: usize,
    /// Hidden width `H` of both LSTM layers.
    pub hidden: usize,
    /// Width of both attention layers.
    pub attention: usize,
    pub vocab: usize,
}

impl ModelDims {
    /// Desk-scale widths (E=32, H=64, attention 32) for the given data.
    pub fn desk(region: usize, vocab: usize) -> Self {
        ModelDims {
            region,
            embed: 32,
            hidden: 64,
            attention: 32,
            vocab,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("region", self.region),
            ("embed", self.embed),
            ("hidden", self.hidden),
            ("attention", self.attention),
            ("vocab", self.vocab),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Config(format!(
                    "model dimension {name} must be positive"
                )));
            }
        }
        Ok(())
    }
}

/// Every trainable tensor of the decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct RdnWeights<T> {
    pub embedding: Embedding<T>,
    pub lstm1: LstmCell<T>,
    pub lstm2: LstmCell<T>,
    pub att_vis: Attention<T>,
    pub att_ref: Attention<T>,
    pub out_head: Linear<T>,
    pub pos_head: Linear<T>,
}

impl<T> RdnWeights<T> {
    pub fn map<'a, U>(&'a self, f: &mut impl FnMut(&str, &'a T) -> U) -> RdnWeights<U> {
        RdnWeights {
            embedding: self.embedding.map("embedding", f),
            lstm1: self.lstm1.map("lstm1", f),
            lstm2: self.lstm2.map("lstm2", f),
            att_vis: self.att_vis.map("att_vis", f),
            att_ref: self.att_ref.map("att_ref", f),
            out_head: self.out_head.map("out_head", f),
            pos_head: self.pos_head.map("pos_head", f),
        }
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&str, &mut T)) {
        self.embedding.visit_mut("embedding", f);
        self.lstm1.visit_mut("lstm1", f);
        self.lstm2.visit_mut("lstm2", f);
        self.att_vis.visit_mut("att_vis", f);
        self.att_ref.visit_mut("att_ref", f);
        self.out_head.visit_mut("out_head", f);
        self.pos_head.visit_mut("pos_head", f);
    }

    /// Parameters with their names, in a fixed order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.map(&mut |n, t| out.push((n.to_string(), t)));
        out
    }

    /// Rebuilds a weight set with this one's layout from values in
    /// [`RdnWeights::named`] order.
    pub fn from_ordered<U>(&self, values: Vec<U>) -> Result<RdnWeights<U>> {
        let expected = self.named().len();
        if values.len() != expected {
            return Err(Error::Contract(format!(
                "expected {expected} parameter values, got {}",
                values.len()
            )));
        }
        let mut it = values.into_iter();
        Ok(self.map(&mut |_, _| it.next().expect("length checked")))
    }
}

/// Decoder parameters together with their dimensions and variant.
#[derive(Debug, Clone, PartialEq)]
pub struct RdnParams {
    pub dims: ModelDims,
    pub variant: Variant,
    pub weights: RdnWeights<Tensor>,
}

impl RdnParams {
    /// Uniform(±0.08) initialization with forget-gate biases at 1.0.
    pub fn init(dims: ModelDims, variant: Variant, seed: u64) -> Result<Self> {
        dims.validate()?;
        let ModelDims {
            region: d,
            embed: e,
            hidden: h,
            attention: a,
            vocab: v,
        } = dims;
        let mut rng = rng::seeded(seed);
        let weights = RdnWeights {
            embedding: Embedding::init(e, v, &mut rng),
            lstm1: LstmCell::init(d + e + h, h, &mut rng),
            lstm2: LstmCell::init(d + h, h, &mut rng),
            att_vis: Attention::init(d, h, a, &mut rng),
            att_ref: Attention::init(h, h, a, &mut rng),
            out_head: Linear::init(h, v, true, &mut rng),
            pos_head: Linear::init(h, 1, false, &mut rng),
        };
        Ok(RdnParams {
            dims,
            variant,
            weights,
        })
    }

    /// Shapes every parameter must have for `dims`, in [`RdnWeights::named`]
    /// order.
    pub fn expected_shapes(dims: ModelDims) -> Vec<(String, Vec<usize>)> {
        let template = RdnParams::init(dims, Variant::Full, 0).expect("validated dims");
        template
            .weights
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect()
    }

    /// Checks every parameter shape against `dims`, naming the first offender.
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        let expected = Self::expected_shapes(self.dims);
        let actual = self.weights.named();
        if expected.len() != actual.len() {
            return Err(Error::Load(
                "parameter count does not match dimensions".into(),
            ));
        }
        for ((name, shape), (_, t)) in expected.iter().zip(actual) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Load(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        self.weights.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        RdnParams {
            variant,
            ..self.clone()
        }
    }

    /// Records every parameter on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Rdn {
        Rdn {
            dims: self.dims,
            variant: self.variant,
            weights: self.weights.map(&mut |_, t| tape.param(t)),
        }
    }
}

/// Coordinate-wise mean of the region features.
pub fn mean_pool_regions(regions: &[Tensor]) -> Result<Tensor> {
    let Some(first) = regions.first() else {
        return Err(Error::Domain("empty region set".into()));
    };
    let mut acc = vec![0.0; first.len()];
    for r in regions {
        if r.shape() != first.shape() {
            return Err(Error::dim("mean_pool_regions", first.shape(), r.shape()));
        }
        for (a, x) in acc.iter_mut().zip(r.data()) {
            *a += x;
        }
    }
    let k = regions.len() as f64;
    Ok(Tensor::vector(acc.into_iter().map(|s| s / k).collect()))
}

/// Per-image values shared by every decoding step.
#[derive(Debug, Clone)]
pub struct ImageContext {
    pub regions: Vec<Var>,
    pub mean: Var,
    /// Regions already projected by the visual attention key matrix.
    pub region_keys: Vec<Var>,
}

/// Recurrent carry plus the history of second-layer hidden states.
#[derive(Debug, Clone)]
pub struct DecoderState {
    pub h1: Var,
    pub c1: Var,
    pub h2: Var,
    pub c2: Var,
    pub history: Vec<Var>,
    /// History entries projected by the reflective key matrix; empty for
    /// variants without reflective attention.
    pub history_keys: Vec<Var>,
    pub t: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct StepOutput {
    pub logits: Var,
    /// Predicted relative position, one element in (0, 1).
    pub pos_pred: Var,
    pub alpha_vis: Var,
    /// Reflective attention weights over the `t` history entries; `None` for
    /// variants without reflective attention.
    pub alpha_ref: Option<Var>,
    /// Attended region feature `r̂`.
    pub region_context: Var,
    pub h2: Var,
    /// Attended hidden state `ĥ²` fed to both heads.
    pub h_ref: Var,
}

/// [`RdnParams`] bound onto a tape.
#[derive(Debug, Clone)]
pub struct Rdn {
    pub dims: ModelDims,
    pub variant: Variant,
    pub weights: RdnWeights<Var>,
}

impl Rdn {
    pub fn prepare_image(&self, tape: &mut Tape, regions: &[Tensor]) -> Result<ImageContext> {
        let mean = mean_pool_regions(regions)?;
        if mean.len() != self.dims.region {
            return Err(Error::dim("regions", &[self.dims.region], &[mean.len()]));
        }
        let mean = tape.constant(mean);
        let regions: Vec<Var> = regions.iter().map(|r| tape.constant(r.clone())).collect();
        let region_keys = regions
            .iter()
            .map(|&r| project_key(tape, &self.weights.att_vis, r))
            .collect::<Result<Vec<_>>>()?;
        Ok(ImageContext {
            regions,
            mean,
            region_keys,
        })
    }

    /// Zero carries, empty history.
    pub fn init_state(&self, tape: &mut Tape) -> DecoderState {
        let h = self.dims.hidden;
        let zero = tape.constant(Tensor::zeros(&[h]));
        DecoderState {
            h1: zero,
            c1: zero,
            h2: zero,
            c2: zero,
            history: Vec::new(),
            history_keys: Vec::new(),
            t: 0,
        }
    }

    pub fn step(
        &self,
        tape: &mut Tape,
        state: &DecoderState,
        prev_token: usize,
        image: &ImageContext,
    ) -> Result<(StepOutput, DecoderState)> {
        let w = &self.weights;
        let emb = embed_lookup(tape, &w.embedding, prev_token)?;
        let x1 = tape.concat(&[image.mean, emb, state.h2])?;
        let (h1, c1) = lstm_step(tape, &w.lstm1, x1, state.h1, state.c1)?;

        let vis = attend_projected(tape, &w.att_vis, h1, &image.region_keys, &image.regions)?;
        let x2 = tape.concat(&[vis.context, h1])?;
        let (h2, c2) = lstm_step(tape, &w.lstm2, x2, state.h2, state.c2)?;

        let mut history = state.history.clone();
        history.push(h2);
        let mut history_keys = state.history_keys.clone();
        let (alpha_ref, h_ref) = if self.variant.uses_reflective_attention() {
            history_keys.push(project_key(tape, &w.att_ref, h2)?);
            let att = attend_projected(tape, &w.att_ref, h1, &history_keys, &history)?;
            (Some(att.weights), att.context)
        } else {
            (None, h2)
        };

        let logits = linear(tape, &w.out_head, h_ref)?;
        let pos_logit = linear(tape, &w.pos_head, h_ref)?;
        let pos_pred = tape.sigmoid(pos_logit);

        let out = StepOutput {
            logits,
            pos_pred,
            alpha_vis: vis.weights,
            alpha_ref,
            region_context: vis.context,
            h2,
            h_ref,
        };
        let next = DecoderState {
            h1,
            c1,
            h2,
            c2,
            history,
            history_keys,
            t: state.t + 1,
        };
        Ok((out, next))
    }

    /// Teacher-forced pass: step `t` consumes `gold[t-1]` (`<bos>` first) and
    /// predicts `gold[t]`.
    pub fn forward_teacher(
        &self,
        tape: &mut Tape,
        image: &ImageContext,
        gold: &[usize],
    ) -> Result<Vec<StepOutput>> {
        if gold.is_empty() {
            return Err(Error::Domain(
                "teacher forcing needs a nonempty caption".into(),
            ));
        }
        if let Some(&bad) = gold.iter().find(|&&t| t >= self.dims.vocab) {
            return Err(Error::Index {
                index: bad,
                bound: self.dims.vocab,
            });
        }
        let mut state = self.init_state(tape);
        let mut outputs = Vec::with_capacity(gold.len());
        let mut prev = BOS;
        for &tok in gold {
            let (out, next) = self.step(tape, &state, prev, image)?;
            outputs.push(out);
            state = next;
            prev = tok;
        }
        Ok(outputs)
    }
}
