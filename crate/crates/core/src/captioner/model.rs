//! Encoder–decoder captioner: a bidirectional LSTM per modality, an LSTM
//! decoder over word embeddings, and attentive fusion for the word
//! distribution.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::bahdanau::Query;
use crate::error::{dim_err, HocaError, Result};
use crate::maf::{maf_step, maf_step_node, precompute_node, MafConfig, MafDims, MafLayout, MafOutput, MafParams, MafStepNodes};
use crate::rng::{stream, xavier_uniform, HocaRng};
use crate::tensor::{DenseTensor, FeatureMatrix};

use super::data::BOS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub maf: MafConfig,
    /// Decoder hidden size.
    pub hidden: usize,
    /// Hidden size of each encoder direction.
    pub encoder_hidden: usize,
    pub embed: usize,
    /// Common-space dimension of the attention projections.
    pub common: usize,
    pub fusion_attention: usize,
    /// Dropout on decoder inputs and states during training; 0 disables it.
    #[serde(default)]
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            maf: MafConfig::default(),
            hidden: 32,
            encoder_hidden: 16,
            embed: 16,
            common: 16,
            fusion_attention: 16,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self, modalities: usize) -> Result<()> {
        self.maf.validate(modalities)?;
        for (name, v) in [
            ("hidden", self.hidden),
            ("encoder_hidden", self.encoder_hidden),
            ("embed", self.embed),
            ("common", self.common),
            ("fusion_attention", self.fusion_attention),
        ] {
            if v == 0 {
                return Err(HocaError::Config(format!("{name}: must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(HocaError::Config(format!("dropout: must lie in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }
}

/// Input shapes the model is built for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataShape {
    pub d_raw: Vec<usize>,
    pub extents: Vec<usize>,
    pub vocab: usize,
}

/// Plain-value LSTM cell: gates stacked as `[input; forget; cell; output]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub w_x: DenseTensor,
    pub w_h: DenseTensor,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl DecoderState {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            h: vec![0.0; hidden],
            c: vec![0.0; hidden],
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn matvec(m: &DenseTensor, v: &[f64]) -> Vec<f64> {
    let cols = m.shape()[1];
    m.data()
        .chunks(cols)
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

impl LstmParams {
    pub fn hidden(&self) -> usize {
        self.b.len() / 4
    }

    /// One cell update.
    pub fn step(&self, state: &DecoderState, x: &[f64]) -> Result<DecoderState> {
        let h = self.hidden();
        if x.len() != self.w_x.shape()[1] || state.h.len() != h || state.c.len() != h {
            return dim_err(format!(
                "lstm expects input {} and state {h}, got {} and {}",
                self.w_x.shape()[1],
                x.len(),
                state.h.len()
            ));
        }
        let gx = matvec(&self.w_x, x);
        let gh = matvec(&self.w_h, &state.h);
        let pre: Vec<f64> = gx.iter().zip(&gh).zip(&self.b).map(|((a, b), c)| a + b + c).collect();
        let mut next = DecoderState::zeros(h);
        for k in 0..h {
            let i = sigmoid(pre[k]);
            let f = sigmoid(pre[h + k]);
            let g = pre[2 * h + k].tanh();
            let o = sigmoid(pre[3 * h + k]);
            next.c[k] = f * state.c[k] + i * g;
            next.h[k] = o * next.c[k].tanh();
        }
        Ok(next)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LstmIds {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub b: ParamId,
}

impl LstmIds {
    fn register(store: &mut ParamStore, rng: &mut HocaRng, prefix: &str, input: usize, hidden: usize) -> Result<Self> {
        let w_x = xavier_uniform(rng, input, 4 * hidden, 4 * hidden * input);
        let w_h = xavier_uniform(rng, hidden, 4 * hidden, 4 * hidden * hidden);
        // Forget-gate bias starts at 1 so early gradients pass through time.
        let b: Vec<f64> = (0..4 * hidden)
            .map(|k| if (hidden..2 * hidden).contains(&k) { 1.0 } else { 0.0 })
            .collect();
        Ok(Self {
            w_x: store.add(format!("{prefix}.w_x"), DenseTensor::matrix(4 * hidden, input, w_x)?, true)?,
            w_h: store.add(format!("{prefix}.w_h"), DenseTensor::matrix(4 * hidden, hidden, w_h)?, true)?,
            b: store.add(format!("{prefix}.b"), DenseTensor::vector(b)?, true)?,
        })
    }

    fn params(&self, store: &ParamStore) -> LstmParams {
        LstmParams {
            w_x: store.get(self.w_x).value.clone(),
            w_h: store.get(self.w_h).value.clone(),
            b: store.get(self.b).value.data().to_vec(),
        }
    }

    fn vars(&self, g: &mut Graph, store: &ParamStore) -> LstmVars {
        LstmVars {
            w_x: g.param(store, self.w_x),
            w_h: g.param(store, self.w_h),
            b: g.param(store, self.b),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    pub w_x: Var,
    pub w_h: Var,
    pub b: Var,
}

/// Graph LSTM update from a precomputed input projection `W_x·x`.
pub fn lstm_step_node(g: &mut Graph, vars: &LstmVars, gx: Var, h: Var, c: Var, hidden: usize) -> Result<(Var, Var)> {
    let gh = g.matvec(vars.w_h, h)?;
    let s = g.add(gx, gh)?;
    let pre = g.add(s, vars.b)?;
    let i_pre = g.slice(pre, 0, hidden)?;
    let f_pre = g.slice(pre, hidden, hidden)?;
    let g_pre = g.slice(pre, 2 * hidden, hidden)?;
    let o_pre = g.slice(pre, 3 * hidden, hidden)?;
    let i = g.sigmoid(i_pre)?;
    let f = g.sigmoid(f_pre)?;
    let cand = g.tanh(g_pre)?;
    let o = g.sigmoid(o_pre)?;
    let fc = g.mul(f, c)?;
    let ig = g.mul(i, cand)?;
    let c_next = g.add(fc, ig)?;
    let tc = g.tanh(c_next)?;
    let h_next = g.mul(o, tc)?;
    Ok((h_next, c_next))
}

/// Plain-value snapshot of a whole model, used for evaluation and decoding.
#[derive(Debug, Clone)]
pub struct InferenceParams {
    pub encoders: Vec<(LstmParams, LstmParams)>,
    pub embed: DenseTensor,
    pub decoder: LstmParams,
    pub maf: MafParams,
}

impl InferenceParams {
    pub fn vocab(&self) -> usize {
        self.embed.shape()[0]
    }

    pub fn hidden(&self) -> usize {
        self.decoder.hidden()
    }

    /// Bidirectional encoding; column `r` is `[h_fwd(r); h_bwd(r)]`.
    pub fn encode(&self, features: &[FeatureMatrix]) -> Result<Vec<FeatureMatrix>> {
        if features.len() != self.encoders.len() {
            return dim_err(format!("{} modalities for {} encoders", features.len(), self.encoders.len()));
        }
        features
            .iter()
            .zip(&self.encoders)
            .map(|(f, (fwd, bwd))| encode_bidirectional(fwd, bwd, f))
            .collect()
    }

    pub fn embedding(&self, token: usize) -> Result<Vec<f64>> {
        let [v, e] = *self.embed.shape() else {
            return dim_err("embedding must be a matrix");
        };
        if token >= v {
            return Err(HocaError::Argument(format!("token {token} outside vocabulary of {v}")));
        }
        Ok(self.embed.data()[token * e..(token + 1) * e].to_vec())
    }

    /// Decoder update on `token`; the new hidden state is the attention query.
    pub fn decode_step(&self, state: &DecoderState, token: usize) -> Result<(DecoderState, Query)> {
        let x = self.embedding(token)?;
        let next = self.decoder.step(state, &x)?;
        let q = Query(next.h.clone());
        Ok((next, q))
    }

    /// Decoder update followed by fusion.
    pub fn step(&self, encoded: &[FeatureMatrix], state: &DecoderState, token: usize) -> Result<(DecoderState, MafOutput)> {
        let (next, q) = self.decode_step(state, token)?;
        let out = maf_step(&q, encoded, &self.maf)?;
        Ok((next, out))
    }
}

fn encode_bidirectional(fwd: &LstmParams, bwd: &LstmParams, f: &FeatureMatrix) -> Result<FeatureMatrix> {
    let cols = f.columns();
    let run = |p: &LstmParams, order: &mut dyn Iterator<Item = usize>| -> Result<Vec<Vec<f64>>> {
        let mut out = vec![Vec::new(); cols.len()];
        let mut s = DecoderState::zeros(p.hidden());
        for r in order {
            s = p.step(&s, &cols[r])?;
            out[r] = s.h.clone();
        }
        Ok(out)
    };
    let hf = run(fwd, &mut (0..cols.len()))?;
    let hb = run(bwd, &mut (0..cols.len()).rev())?;
    let joined: Vec<Vec<f64>> = hf.into_iter().zip(hb).map(|(a, b)| [a, b].concat()).collect();
    FeatureMatrix::from_columns(&joined)
}

/// The trainable captioner.
#[derive(Debug, Clone)]
pub struct Captioner {
    pub config: ModelConfig,
    pub shape: DataShape,
    pub store: ParamStore,
    encoders: Vec<(LstmIds, LstmIds)>,
    embed: ParamId,
    decoder: LstmIds,
    maf: MafLayout,
}

/// Graph handles for one forward pass.
pub struct CaptionerVars {
    encoders: Vec<(LstmVars, LstmVars)>,
    embed: Var,
    decoder: LstmVars,
    maf: crate::maf::MafVars,
}

/// Encoded features and their query-independent projections.
pub struct EncodedNodes {
    pub encoded: Vec<Var>,
    pub projected: Vec<Var>,
}

/// Per-step dropout masks, already scaled by `1/(1−p)`.
pub struct DropoutMasks {
    pub input: Var,
    pub hidden: Var,
}

impl Captioner {
    /// Builds a freshly initialised model. Parameters are drawn from a stream
    /// of `seed` reserved for initialisation.
    pub fn new(config: &ModelConfig, shape: &DataShape, seed: u64) -> Result<Self> {
        let n = shape.extents.len();
        config.validate(n)?;
        if shape.d_raw.len() != n {
            return dim_err(format!("{} raw dims for {n} modalities", shape.d_raw.len()));
        }
        let mut rng = stream(seed, 0x1417);
        let mut store = ParamStore::new();
        let eh = config.encoder_hidden;
        let mut encoders = Vec::with_capacity(n);
        for (m, &d) in shape.d_raw.iter().enumerate() {
            let fwd = LstmIds::register(&mut store, &mut rng, &format!("enc.{m}.fwd"), d, eh)?;
            let bwd = LstmIds::register(&mut store, &mut rng, &format!("enc.{m}.bwd"), d, eh)?;
            encoders.push((fwd, bwd));
        }
        let emb = xavier_uniform(&mut rng, shape.vocab, config.embed, shape.vocab * config.embed);
        let embed = store.add("dec.embed", DenseTensor::matrix(shape.vocab, config.embed, emb)?, true)?;
        let decoder = LstmIds::register(&mut store, &mut rng, "dec.lstm", config.embed, config.hidden)?;
        let dims = MafDims {
            extents: shape.extents.clone(),
            context: 2 * eh,
            hidden: config.hidden,
            common: config.common,
            fusion_attention: config.fusion_attention,
            vocab: shape.vocab,
        };
        let maf = MafLayout::register(&mut store, &mut rng, &config.maf, &dims)?;
        Ok(Self {
            config: config.clone(),
            shape: shape.clone(),
            store,
            encoders,
            embed,
            decoder,
            maf,
        })
    }

    pub fn maf_layout(&self) -> &MafLayout {
        &self.maf
    }

    pub fn vocab(&self) -> usize {
        self.shape.vocab
    }

    pub fn snapshot(&self) -> Result<InferenceParams> {
        Ok(InferenceParams {
            encoders: self
                .encoders
                .iter()
                .map(|(f, b)| (f.params(&self.store), b.params(&self.store)))
                .collect(),
            embed: self.store.get(self.embed).value.clone(),
            decoder: self.decoder.params(&self.store),
            maf: self.maf.params(&self.store)?,
        })
    }

    pub fn vars(&self, g: &mut Graph, store: &ParamStore) -> CaptionerVars {
        CaptionerVars {
            encoders: self
                .encoders
                .iter()
                .map(|(f, b)| (f.vars(g, store), b.vars(g, store)))
                .collect(),
            embed: g.param(store, self.embed),
            decoder: self.decoder.vars(g, store),
            maf: self.maf.vars(g, store),
        }
    }

    fn check_features(&self, features: &[FeatureMatrix]) -> Result<()> {
        if features.len() != self.shape.extents.len() {
            return dim_err(format!("{} modalities, model expects {}", features.len(), self.shape.extents.len()));
        }
        for (m, f) in features.iter().enumerate() {
            if f.d() != self.shape.d_raw[m] || f.t() != self.shape.extents[m] {
                return dim_err(format!(
                    "modality {m} is {}×{}, model expects {}×{}",
                    f.d(),
                    f.t(),
                    self.shape.d_raw[m],
                    self.shape.extents[m]
                ));
            }
        }
        Ok(())
    }

    /// Graph encoding of one item's raw features.
    pub fn encode_node(&self, g: &mut Graph, vars: &CaptionerVars, features: &[FeatureMatrix]) -> Result<EncodedNodes> {
        self.check_features(features)?;
        let eh = self.config.encoder_hidden;
        let mut encoded = Vec::with_capacity(features.len());
        for (f, (fwd, bwd)) in features.iter().zip(&vars.encoders) {
            let x = g.features(f);
            let t = f.t();
            let run = |g: &mut Graph, p: &LstmVars, reverse: bool| -> Result<Vec<Var>> {
                let gx_all = g.matmul(p.w_x, x)?;
                let mut h = g.vector(vec![0.0; eh])?;
                let mut c = g.vector(vec![0.0; eh])?;
                let mut out = vec![h; t];
                for step in 0..t {
                    let r = if reverse { t - 1 - step } else { step };
                    let gx = g.column(gx_all, r)?;
                    (h, c) = lstm_step_node(g, p, gx, h, c, eh)?;
                    out[r] = h;
                }
                Ok(out)
            };
            let hf = run(g, fwd, false)?;
            let hb = run(g, bwd, true)?;
            let cols = hf
                .into_iter()
                .zip(hb)
                .map(|(a, b)| g.concat(&[a, b]))
                .collect::<Result<Vec<_>>>()?;
            encoded.push(g.stack_columns(&cols)?);
        }
        let projected = precompute_node(g, &vars.maf, &encoded)?;
        Ok(EncodedNodes { encoded, projected })
    }

    /// One decoder step in the graph. Returns the new `(h, c)` and the fusion
    /// nodes for the new query.
    pub fn step_node(
        &self,
        g: &mut Graph,
        vars: &CaptionerVars,
        enc: &EncodedNodes,
        h: Var,
        c: Var,
        token: usize,
        dropout: Option<&DropoutMasks>,
    ) -> Result<(Var, Var, MafStepNodes)> {
        if token >= self.shape.vocab {
            return Err(HocaError::Argument(format!("token {token} outside vocabulary of {}", self.shape.vocab)));
        }
        let mut x = g.row(vars.embed, token)?;
        if let Some(m) = dropout {
            x = g.mul(x, m.input)?;
        }
        let gx = g.matvec(vars.decoder.w_x, x)?;
        let (h_next, c_next) = lstm_step_node(g, &vars.decoder, gx, h, c, self.config.hidden)?;
        let query = match dropout {
            Some(m) => g.mul(h_next, m.hidden)?,
            None => h_next,
        };
        let nodes = maf_step_node(g, &self.maf, &vars.maf, query, &enc.encoded, &enc.projected)?;
        Ok((h_next, c_next, nodes))
    }

    /// Teacher-forced caption loss `Σ_s −log p(y_s)` for one item, built on
    /// `g`. `dropout_rng` enables dropout masks when the model has a non-zero
    /// rate.
    pub fn loss_node(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        features: &[FeatureMatrix],
        caption: &[usize],
        mut dropout_rng: Option<&mut HocaRng>,
    ) -> Result<Var> {
        if caption.is_empty() {
            return Err(HocaError::Argument("caption is empty".into()));
        }
        let vars = self.vars(g, store);
        let enc = self.encode_node(g, &vars, features)?;
        let hidden = self.config.hidden;
        let mut h = g.vector(vec![0.0; hidden])?;
        let mut c = g.vector(vec![0.0; hidden])?;
        let mut prev = BOS;
        let mut losses = Vec::with_capacity(caption.len());
        for &target in caption {
            let masks = match dropout_rng.as_deref_mut() {
                Some(rng) if self.config.dropout > 0.0 => Some(DropoutMasks {
                    input: mask(g, rng, self.config.embed, self.config.dropout)?,
                    hidden: mask(g, rng, hidden, self.config.dropout)?,
                }),
                _ => None,
            };
            let (hn, cn, nodes) = self.step_node(g, &vars, &enc, h, c, prev, masks.as_ref())?;
            losses.push(g.softmax_cross_entropy(nodes.logits, target)?);
            h = hn;
            c = cn;
            prev = target;
        }
        g.add_all(&losses)
    }
}

fn mask(g: &mut Graph, rng: &mut HocaRng, len: usize, rate: f64) -> Result<Var> {
    use rand::Rng;
    let keep = 1.0 / (1.0 - rate);
    let values = (0..len).map(|_| if rng.random_bool(rate) { 0.0 } else { keep }).collect();
    g.vector(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maf::{ArityConfig, Mechanism};
    use crate::rng::{seeded, uniform_vec};

    fn tiny_shape() -> DataShape {
        DataShape {
            d_raw: vec![3, 2, 3],
            extents: vec![2, 3, 2],
            vocab: 6,
        }
    }

    fn tiny_config(mechanism: Mechanism) -> ModelConfig {
        ModelConfig {
            maf: MafConfig {
                mechanism,
                arities: if mechanism == Mechanism::Unary { ArityConfig::unary() } else { ArityConfig::all() },
                ..MafConfig::default()
            },
            hidden: 4,
            encoder_hidden: 3,
            embed: 3,
            common: 3,
            fusion_attention: 3,
            dropout: 0.0,
        }
    }

    fn features(rng: &mut HocaRng, shape: &DataShape) -> Vec<FeatureMatrix> {
        shape
            .d_raw
            .iter()
            .zip(&shape.extents)
            .map(|(&d, &t)| FeatureMatrix::new(d, t, uniform_vec(rng, d * t, -1.0, 1.0)).unwrap())
            .collect()
    }

    #[test]
    fn zero_weight_cell_uses_biases_only() {
        let p = LstmParams {
            w_x: DenseTensor::zeros(&[8, 2]).unwrap(),
            w_h: DenseTensor::zeros(&[8, 2]).unwrap(),
            b: vec![0.0, 1.0, 0.5, -0.5, 0.3, 0.2, 2.0, 0.0],
        };
        let s = DecoderState {
            h: vec![9.0, 9.0],
            c: vec![0.4, -1.0],
        };
        let next = p.step(&s, &[5.0, -5.0]).unwrap();
        for k in 0..2 {
            let (i, f, g, o) = (sigmoid(p.b[k]), sigmoid(p.b[2 + k]), p.b[4 + k].tanh(), sigmoid(p.b[6 + k]));
            let c = f * s.c[k] + i * g;
            assert_eq!(next.c[k], c);
            assert_eq!(next.h[k], o * c.tanh());
        }
        assert_eq!(p.step(&s, &[5.0, -5.0]).unwrap(), next);
    }

    #[test]
    fn state_stays_bounded() {
        let model = Captioner::new(&tiny_config(Mechanism::Lowrank), &tiny_shape(), 3).unwrap();
        let snap = model.snapshot().unwrap();
        let mut s = DecoderState::zeros(4);
        for _ in 0..100 {
            s = snap.decode_step(&s, 5).unwrap().0;
            assert!(s.h.iter().all(|v| v.abs() <= 1.0));
            assert!(s.c.iter().all(|v| v.is_finite() && v.abs() <= 101.0));
        }
        assert!(snap.decode_step(&s, 6).is_err());
    }

    #[test]
    fn single_step_encoding_concatenates_directions() {
        let mut rng = seeded(1);
        let fwd = LstmParams {
            w_x: DenseTensor::matrix(8, 2, uniform_vec(&mut rng, 16, -1.0, 1.0)).unwrap(),
            w_h: DenseTensor::matrix(8, 2, uniform_vec(&mut rng, 16, -1.0, 1.0)).unwrap(),
            b: uniform_vec(&mut rng, 8, -1.0, 1.0),
        };
        let f = FeatureMatrix::new(2, 1, vec![0.3, -0.6]).unwrap();
        let out = encode_bidirectional(&fwd, &fwd, &f).unwrap();
        let h = fwd.step(&DecoderState::zeros(2), &[0.3, -0.6]).unwrap().h;
        assert_eq!(out.column(0), [h.clone(), h].concat());
    }

    #[test]
    fn reversal_swaps_directions_under_tied_weights() {
        let mut rng = seeded(2);
        let p = LstmParams {
            w_x: DenseTensor::matrix(12, 2, uniform_vec(&mut rng, 24, -1.0, 1.0)).unwrap(),
            w_h: DenseTensor::matrix(12, 3, uniform_vec(&mut rng, 36, -1.0, 1.0)).unwrap(),
            b: uniform_vec(&mut rng, 12, -1.0, 1.0),
        };
        let f = FeatureMatrix::new(2, 4, uniform_vec(&mut rng, 8, -1.0, 1.0)).unwrap();
        let rev = f.permute_columns(&[3, 2, 1, 0]).unwrap();
        let a = encode_bidirectional(&p, &p, &f).unwrap();
        let b = encode_bidirectional(&p, &p, &rev).unwrap();
        for r in 0..4 {
            let (ca, cb) = (a.column(r), b.column(3 - r));
            assert_eq!(&cb[..3], &ca[3..]);
            assert_eq!(&cb[3..], &ca[..3]);
        }
    }

    #[test]
    fn zero_input_zero_bias_encodes_to_zero() {
        let p = LstmParams {
            w_x: DenseTensor::filled(&[8, 3], 0.7).unwrap(),
            w_h: DenseTensor::filled(&[8, 2], -0.2).unwrap(),
            b: vec![0.0; 8],
        };
        let out = encode_bidirectional(&p, &p, &FeatureMatrix::zeros(3, 5).unwrap()).unwrap();
        assert!(out.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn graph_encoder_matches_plain_encoder() {
        let shape = tiny_shape();
        let model = Captioner::new(&tiny_config(Mechanism::Hoca), &shape, 4).unwrap();
        let mut rng = seeded(5);
        let feats = features(&mut rng, &shape);
        let plain = model.snapshot().unwrap().encode(&feats).unwrap();
        let mut g = Graph::new();
        let vars = model.vars(&mut g, &model.store);
        let enc = model.encode_node(&mut g, &vars, &feats).unwrap();
        for (node, m) in enc.encoded.iter().zip(&plain) {
            for (a, b) in g.value(*node).data().iter().zip(m.values()) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn teacher_forced_loss_matches_plain_steps() {
        let shape = tiny_shape();
        for mech in [Mechanism::Unary, Mechanism::Hoca, Mechanism::Lowrank] {
            let model = Captioner::new(&tiny_config(mech), &shape, 6).unwrap();
            let mut rng = seeded(7);
            let feats = features(&mut rng, &shape);
            let caption = [4, 5, 0];
            let mut g = Graph::new();
            let loss = model.loss_node(&mut g, &model.store, &feats, &caption, None).unwrap();
            let snap = model.snapshot().unwrap();
            let enc = snap.encode(&feats).unwrap();
            let mut s = DecoderState::zeros(4);
            let mut prev = BOS;
            let mut total = 0.0;
            for &t in &caption {
                let (next, out) = snap.step(&enc, &s, prev).unwrap();
                total -= out.probs[t].ln();
                s = next;
                prev = t;
            }
            let got = g.value(loss).item().unwrap();
            assert!((got - total).abs() < 1e-12, "{mech}: {got} vs {total}");
        }
    }

    #[test]
    fn zero_parameters_give_uniform_loss() {
        let shape = tiny_shape();
        let mut model = Captioner::new(&tiny_config(Mechanism::Lowrank), &shape, 8).unwrap();
        for id in model.store.ids().collect::<Vec<_>>() {
            model.store.get_mut(id).value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut rng = seeded(9);
        let feats = features(&mut rng, &shape);
        let mut g = Graph::new();
        let loss = model.loss_node(&mut g, &model.store, &feats, &[4, 4, 5, 0], None).unwrap();
        assert!((g.value(loss).item().unwrap() - 4.0 * 6f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn dropout_masks_are_inverted() {
        let shape = tiny_shape();
        let mut cfg = tiny_config(Mechanism::Lowrank);
        cfg.dropout = 0.5;
        let model = Captioner::new(&cfg, &shape, 10).unwrap();
        let mut rng = seeded(11);
        let feats = features(&mut rng, &shape);
        let mut g = Graph::new();
        let mut drop_rng = seeded(12);
        let with = model.loss_node(&mut g, &model.store, &feats, &[4, 0], Some(&mut drop_rng)).unwrap();
        let without = model.loss_node(&mut g, &model.store, &feats, &[4, 0], None).unwrap();
        assert!(g.value(with).item().unwrap().is_finite());
        assert_ne!(g.value(with).item().unwrap(), g.value(without).item().unwrap());
        let m = mask(&mut g, &mut drop_rng, 1000, 0.5).unwrap();
        assert!(g.value(m).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn rejects_bad_inputs() {
        let shape = tiny_shape();
        let model = Captioner::new(&tiny_config(Mechanism::Lowrank), &shape, 13).unwrap();
        let mut g = Graph::new();
        let mut rng = seeded(14);
        let mut feats = features(&mut rng, &shape);
        assert!(model.loss_node(&mut g, &model.store, &feats, &[9], None).is_err());
        feats.pop();
        assert!(model.loss_node(&mut g, &model.store, &feats, &[4], None).is_err());
        let bad = ModelConfig {
            hidden: 0,
            ..tiny_config(Mechanism::Lowrank)
        };
        assert!(Captioner::new(&bad, &shape, 0).is_err());
    }
}
