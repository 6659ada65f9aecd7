//! The RAC network.
//!
//! The reader turns token ids into `U_x = SAM(E_x)`, where `E_x` is the
//! embedding followed by tanh convolutions. The coder embeds every code
//! title (embedding → tanh convolution → max over the title), uses those
//! vectors as queries over `U_x`, and scores each attended vector with a
//! shared `d → 1` projection and a sigmoid.
//!
//! Parameter containers are generic over the leaf type so the same
//! structure holds tensors (`RacParams<Tensor>`) and their tape handles
//! (`RacParams<Var>`).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{EncodedExample, TitleMatrix, PAD};
use crate::embeddings::EmbeddingTable;
use crate::metrics::ScoreMatrix;
use crate::numerics::{Checkpoint, Rng, Tape, Tensor, Var};
use crate::{Error, Result};

/// Logit assigned to masked attention positions when padding masks are on.
const MASKED_LOGIT: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RacConfig {
    pub vocab_size: usize,
    pub d: usize,
    pub n_x: usize,
    pub n_t: usize,
    pub n_y: usize,
    pub d_ff: usize,
    pub sam_layers: usize,
    pub conv_kernel: usize,
    pub reader_conv_layers: usize,
    pub dropout: f64,
    /// `false` replaces title-derived queries with a learned random matrix.
    pub code_title_queries: bool,
    /// Shared scalar bias inside the output sigmoid.
    pub output_bias: bool,
    /// Mask PAD key positions inside both attentions.
    pub mask_padding: bool,
}

impl RacConfig {
    pub fn new(vocab_size: usize, n_y: usize) -> Self {
        RacConfig {
            vocab_size,
            d: 300,
            n_x: 4096,
            n_t: 36,
            n_y,
            d_ff: 1024,
            sam_layers: 4,
            conv_kernel: 10,
            reader_conv_layers: 2,
            dropout: 0.1,
            code_title_queries: true,
            output_bias: true,
            mask_padding: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d", self.d),
            ("n_x", self.n_x),
            ("n_t", self.n_t),
            ("n_y", self.n_y),
            ("d_ff", self.d_ff),
            ("conv_kernel", self.conv_kernel),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be at least 1")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T = Tensor> {
    /// `k × d_in × d_out`.
    pub kernel: T,
    pub bias: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamLayerParams<T = Tensor> {
    pub w_q: T,
    pub w_k: T,
    pub w_v: T,
    pub w_1: T,
    pub w_2: T,
    pub ln1_gain: T,
    pub ln1_bias: T,
    pub ln2_gain: T,
    pub ln2_bias: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReaderParams<T = Tensor> {
    pub embedding: T,
    pub convs: Vec<ConvParams<T>>,
    pub layers: Vec<SamLayerParams<T>>,
}

/// Where the coder's per-code attention queries come from.
#[derive(Clone, Debug, PartialEq)]
pub enum Queries<T = Tensor> {
    Titles { embedding: T, conv: ConvParams<T> },
    /// `n_y × d`, learned from a random start.
    Learned(T),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoderParams<T = Tensor> {
    pub queries: Queries<T>,
    /// `d × 1`, shared by every code.
    pub w_3: T,
    pub bias: Option<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RacParams<T = Tensor> {
    pub reader: ReaderParams<T>,
    pub coder: CoderParams<T>,
}

impl<T> RacParams<T> {
    /// Builds a parallel structure by visiting every leaf in a fixed order.
    pub fn map<'s, U>(&'s self, f: &mut impl FnMut(&str, &'s T) -> U) -> RacParams<U> {
        let conv = |f: &mut dyn FnMut(&str, &'s T) -> U, p: &'s ConvParams<T>, name: &str| ConvParams {
            kernel: f(&format!("{name}.kernel"), &p.kernel),
            bias: f(&format!("{name}.bias"), &p.bias),
        };
        let r = &self.reader;
        let embedding = f("reader.embedding", &r.embedding);
        let convs = r
            .convs
            .iter()
            .enumerate()
            .map(|(i, c)| conv(f, c, &format!("reader.conv{i}")))
            .collect();
        let layers = r
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let n = |s: &str| format!("reader.sam{i}.{s}");
                SamLayerParams {
                    w_q: f(&n("w_q"), &l.w_q),
                    w_k: f(&n("w_k"), &l.w_k),
                    w_v: f(&n("w_v"), &l.w_v),
                    w_1: f(&n("w_1"), &l.w_1),
                    w_2: f(&n("w_2"), &l.w_2),
                    ln1_gain: f(&n("ln1_gain"), &l.ln1_gain),
                    ln1_bias: f(&n("ln1_bias"), &l.ln1_bias),
                    ln2_gain: f(&n("ln2_gain"), &l.ln2_gain),
                    ln2_bias: f(&n("ln2_bias"), &l.ln2_bias),
                }
            })
            .collect();
        let c = &self.coder;
        let queries = match &c.queries {
            Queries::Titles { embedding, conv: cp } => Queries::Titles {
                embedding: f("coder.title_embedding", embedding),
                conv: conv(f, cp, "coder.title_conv"),
            },
            Queries::Learned(q) => Queries::Learned(f("coder.queries", q)),
        };
        RacParams {
            reader: ReaderParams {
                embedding,
                convs,
                layers,
            },
            coder: CoderParams {
                queries,
                w_3: f("coder.w_3", &c.w_3),
                bias: c.bias.as_ref().map(|b| f("coder.bias", b)),
            },
        }
    }

    /// Leaves in the same order as [`RacParams::map`].
    pub fn leaves(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.map(&mut |name, t| out.push((name.to_string(), t)));
        out
    }

    /// Same structure with the leaves replaced, in [`RacParams::map`] order.
    pub fn rebuild<U: Clone>(&self, leaves: &[U]) -> Result<RacParams<U>> {
        let expected = self.leaves().len();
        if leaves.len() != expected {
            return Err(Error::invalid(format!("expected {expected} leaves, got {}", leaves.len())));
        }
        let mut it = leaves.iter();
        Ok(self.map(&mut |_, _| it.next().expect("length checked").clone()))
    }

    /// Mutable leaves in the same order as [`RacParams::map`].
    pub fn leaves_mut(&mut self) -> Vec<(String, &mut T)> {
        let mut out = Vec::new();
        self.for_each_mut(&mut |name, t| out.push((name.to_string(), t)));
        out
    }

    pub fn for_each_mut<'s>(&'s mut self, f: &mut impl FnMut(&str, &'s mut T)) {
        let conv = |f: &mut dyn FnMut(&str, &'s mut T), p: &'s mut ConvParams<T>, name: &str| {
            f(&format!("{name}.kernel"), &mut p.kernel);
            f(&format!("{name}.bias"), &mut p.bias);
        };
        let r = &mut self.reader;
        f("reader.embedding", &mut r.embedding);
        for (i, c) in r.convs.iter_mut().enumerate() {
            conv(f, c, &format!("reader.conv{i}"));
        }
        for (i, l) in r.layers.iter_mut().enumerate() {
            let n = |s: &str| format!("reader.sam{i}.{s}");
            f(&n("w_q"), &mut l.w_q);
            f(&n("w_k"), &mut l.w_k);
            f(&n("w_v"), &mut l.w_v);
            f(&n("w_1"), &mut l.w_1);
            f(&n("w_2"), &mut l.w_2);
            f(&n("ln1_gain"), &mut l.ln1_gain);
            f(&n("ln1_bias"), &mut l.ln1_bias);
            f(&n("ln2_gain"), &mut l.ln2_gain);
            f(&n("ln2_bias"), &mut l.ln2_bias);
        }
        let c = &mut self.coder;
        match &mut c.queries {
            Queries::Titles { embedding, conv: cp } => {
                f("coder.title_embedding", embedding);
                conv(f, cp, "coder.title_conv");
            }
            Queries::Learned(q) => f("coder.queries", q),
        }
        f("coder.w_3", &mut c.w_3);
        if let Some(b) = &mut c.bias {
            f("coder.bias", b);
        }
    }
}

impl RacParams<Tensor> {
    /// Registers every tensor on `tape` (trainable or constant).
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>, trainable: bool) -> RacParams<Var> {
        self.map(&mut |_, t| if trainable { tape.param(t) } else { tape.constant_ref(t) })
    }

    pub fn parameter_count(&self) -> usize {
        self.leaves().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Forward-pass switches shared by every layer.
pub struct Ctx<'r> {
    pub train: bool,
    pub dropout: f64,
    pub rng: &'r mut Rng,
}

impl<'r> Ctx<'r> {
    pub fn eval(rng: &'r mut Rng) -> Self {
        Ctx {
            train: false,
            dropout: 0.0,
            rng,
        }
    }

    fn drop(&mut self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        tape.dropout(x, self.dropout, self.rng, self.train)
    }
}

/// `E_x`: embedding lookup, then `tanh(conv)` per reader convolution, then
/// dropout on the module output.
pub fn convolved_embedding(tape: &mut Tape<'_>, reader: &ReaderParams<Var>, ids: &[usize], ctx: &mut Ctx<'_>) -> Result<Var> {
    let mut h = tape.embedding(reader.embedding, ids, &[ids.len()])?;
    for conv in &reader.convs {
        h = tape.conv1d(h, conv.kernel, conv.bias)?;
        h = tape.tanh(h)?;
    }
    ctx.drop(tape, h)
}

/// Row mask over `rows × keys` scores, true where the key is padding.
fn key_mask(rows: usize, key_is_pad: &[bool]) -> Vec<bool> {
    let mut m = Vec::with_capacity(rows * key_is_pad.len());
    for _ in 0..rows {
        m.extend_from_slice(key_is_pad);
    }
    m
}

/// One single-head layer:
/// `A = LN(H + drop(softmax(H W_q (H W_k)ᵀ / √d) H W_v))`, then
/// `LN(A + drop(relu(A W_1) W_2))`.
pub fn self_attention_layer(
    tape: &mut Tape<'_>,
    layer: &SamLayerParams<Var>,
    h: Var,
    key_is_pad: Option<&[bool]>,
    ctx: &mut Ctx<'_>,
) -> Result<Var> {
    let d = tape.value(h)?.cols();
    let n = tape.value(h)?.rows();
    let q = tape.matmul(h, layer.w_q)?;
    let k = tape.matmul(h, layer.w_k)?;
    let v = tape.matmul(h, layer.w_v)?;
    let scores = tape.matmul_t(q, k)?;
    let mut scores = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
    if let Some(pad) = key_is_pad {
        scores = tape.masked_fill(scores, &key_mask(n, pad), MASKED_LOGIT)?;
    }
    let weights = tape.softmax(scores)?;
    let attended = tape.matmul(weights, v)?;
    let attended = ctx.drop(tape, attended)?;
    let res = tape.add(h, attended)?;
    let a = tape.layer_norm(res, layer.ln1_gain, layer.ln1_bias)?;

    let ff = tape.matmul(a, layer.w_1)?;
    let ff = tape.relu(ff)?;
    let ff = tape.matmul(ff, layer.w_2)?;
    let ff = ctx.drop(tape, ff)?;
    let res = tape.add(a, ff)?;
    tape.layer_norm(res, layer.ln2_gain, layer.ln2_bias)
}

/// `U_x`: the self-attention layers applied in sequence.
pub fn sam(tape: &mut Tape<'_>, layers: &[SamLayerParams<Var>], e_x: Var, key_is_pad: Option<&[bool]>, ctx: &mut Ctx<'_>) -> Result<Var> {
    layers
        .iter()
        .try_fold(e_x, |h, layer| self_attention_layer(tape, layer, h, key_is_pad, ctx))
}

/// `E_t` (`n_y × d`): per title row, embedding → tanh(conv) → max over the
/// title positions. With learned queries the matrix is returned as is.
pub fn code_title_embedding(tape: &mut Tape<'_>, queries: &Queries<Var>, titles: &TitleMatrix) -> Result<Var> {
    match queries {
        Queries::Titles { embedding, conv } => {
            let e = tape.embedding(*embedding, titles.ids(), &[titles.n_y(), titles.n_t()])?;
            let c = tape.conv1d(e, conv.kernel, conv.bias)?;
            let c = tape.tanh(c)?;
            tape.global_max_pool(c)
        }
        Queries::Learned(q) => Ok(*q),
    }
}

/// `A = softmax(E_t U_xᵀ / √d)` and `V_x = A U_x`.
pub fn code_guided_attention(tape: &mut Tape<'_>, e_t: Var, u_x: Var, key_is_pad: Option<&[bool]>) -> Result<(Var, Var)> {
    let d = tape.value(u_x)?.cols();
    let rows = tape.value(e_t)?.rows();
    let logits = tape.matmul_t(e_t, u_x)?;
    let mut logits = tape.scale(logits, 1.0 / (d as f64).sqrt())?;
    if let Some(pad) = key_is_pad {
        logits = tape.masked_fill(logits, &key_mask(rows, pad), MASKED_LOGIT)?;
    }
    let a = tape.softmax(logits)?;
    let v = tape.matmul(a, u_x)?;
    Ok((v, a))
}

/// Pre-sigmoid code scores `V_x W_3 (+ b)` as an `n_y` vector.
pub fn output_logits(tape: &mut Tape<'_>, coder: &CoderParams<Var>, v_x: Var) -> Result<Var> {
    let n_y = tape.value(v_x)?.rows();
    let mut z = tape.matmul(v_x, coder.w_3)?;
    if let Some(b) = coder.bias {
        z = tape.add_bias(z, b)?;
    }
    tape.reshape(z, &[n_y])
}

/// Handles to every intermediate of one document's forward pass.
pub struct ForwardVars {
    pub e_x: Var,
    pub u_x: Var,
    pub e_t: Var,
    pub v_x: Var,
    pub attention: Var,
    pub logits: Var,
}

/// Values of every intermediate for one document.
#[derive(Clone, Debug, PartialEq)]
pub struct Activations {
    pub e_x: Tensor,
    pub u_x: Tensor,
    pub e_t: Tensor,
    /// `n_y × n_x`; each row sums to one.
    pub attention: Tensor,
    pub v_x: Tensor,
    pub y: Vec<f64>,
}

impl Activations {
    fn collect(tape: &Tape<'_>, v: &ForwardVars) -> Result<Self> {
        let logits = tape.value(v.logits)?;
        Ok(Activations {
            e_x: tape.value(v.e_x)?.clone(),
            u_x: tape.value(v.u_x)?.clone(),
            e_t: tape.value(v.e_t)?.clone(),
            attention: tape.value(v.attention)?.clone(),
            v_x: tape.value(v.v_x)?.clone(),
            y: logits.data().iter().map(|&z| sigmoid(z)).collect(),
        })
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSidecar {
    pub config: RacConfig,
    pub vocab_fingerprint: String,
    pub title_fingerprint: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RacModel {
    pub config: RacConfig,
    pub params: RacParams,
}

fn uniform(rng: &mut Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform_range(-bound, bound)).collect()).unwrap()
}

impl RacModel {
    /// Fresh parameters. Embedding tables start from `embeddings` when
    /// given, otherwise from `N(0, 1/d)` with a zero PAD row.
    pub fn init(config: RacConfig, embeddings: Option<&EmbeddingTable>, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (d, k, v) = (config.d, config.conv_kernel, config.vocab_size);
        let table = match embeddings {
            Some(t) => {
                if t.vectors().shape() != [v, d] {
                    return Err(Error::Shape {
                        op: "init_embeddings",
                        left: vec![v, d],
                        right: t.vectors().shape().to_vec(),
                    });
                }
                t.vectors().clone()
            }
            None => {
                let std = (1.0 / d as f64).sqrt();
                let mut data: Vec<f64> = (0..v * d).map(|_| rng.normal(0.0, std)).collect();
                data[PAD * d..(PAD + 1) * d].fill(0.0);
                Tensor::new(vec![v, d], data)?
            }
        };
        let conv_bound = 1.0 / ((k * d) as f64).sqrt();
        let proj_bound = 1.0 / (d as f64).sqrt();
        let conv = |rng: &mut Rng| ConvParams {
            kernel: uniform(rng, &[k, d, d], conv_bound),
            bias: Tensor::zeros(&[d]),
        };
        let convs = (0..config.reader_conv_layers).map(|_| conv(rng)).collect();
        let layers = (0..config.sam_layers)
            .map(|_| SamLayerParams {
                w_q: uniform(rng, &[d, d], proj_bound),
                w_k: uniform(rng, &[d, d], proj_bound),
                w_v: uniform(rng, &[d, d], proj_bound),
                w_1: uniform(rng, &[d, config.d_ff], proj_bound),
                w_2: uniform(rng, &[config.d_ff, d], 1.0 / (config.d_ff as f64).sqrt()),
                ln1_gain: Tensor::full(&[d], 1.0),
                ln1_bias: Tensor::zeros(&[d]),
                ln2_gain: Tensor::full(&[d], 1.0),
                ln2_bias: Tensor::zeros(&[d]),
            })
            .collect();
        let queries = if config.code_title_queries {
            Queries::Titles {
                embedding: table.clone(),
                conv: conv(rng),
            }
        } else {
            Queries::Learned(uniform(rng, &[config.n_y, d], proj_bound))
        };
        let params = RacParams {
            reader: ReaderParams {
                embedding: table,
                convs,
                layers,
            },
            coder: CoderParams {
                queries,
                w_3: Tensor::zeros(&[d, 1]),
                bias: config.output_bias.then(|| Tensor::zeros(&[1])),
            },
        };
        Ok(RacModel { config, params })
    }

    fn check_inputs(&self, ids: &[usize], titles: &TitleMatrix) -> Result<()> {
        let c = &self.config;
        if ids.len() != c.n_x {
            return Err(Error::Shape {
                op: "predict",
                left: vec![c.n_x],
                right: vec![ids.len()],
            });
        }
        if titles.n_y() != c.n_y || titles.n_t() != c.n_t {
            return Err(Error::Shape {
                op: "predict",
                left: vec![c.n_y, c.n_t],
                right: vec![titles.n_y(), titles.n_t()],
            });
        }
        Ok(())
    }

    pub fn pad_mask(&self, ids: &[usize]) -> Option<Vec<bool>> {
        self.config
            .mask_padding
            .then(|| ids.iter().map(|&i| i == PAD).collect())
    }

    /// Full forward pass for one document on an existing tape. `e_t` may be
    /// shared across documents of a batch.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        bound: &RacParams<Var>,
        ids: &[usize],
        e_t: Var,
        ctx: &mut Ctx<'_>,
    ) -> Result<ForwardVars> {
        let mask = self.pad_mask(ids);
        let e_x = convolved_embedding(tape, &bound.reader, ids, ctx)?;
        let u_x = sam(tape, &bound.reader.layers, e_x, mask.as_deref(), ctx)?;
        let (v_x, attention) = code_guided_attention(tape, e_t, u_x, mask.as_deref())?;
        let logits = output_logits(tape, &bound.coder, v_x)?;
        Ok(ForwardVars {
            e_x,
            u_x,
            e_t,
            v_x,
            attention,
            logits,
        })
    }

    /// Runs the whole pipeline for one document.
    pub fn predict(&self, ids: &[usize], titles: &TitleMatrix, train: bool, rng: &mut Rng) -> Result<Activations> {
        self.check_inputs(ids, titles)?;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let mut ctx = Ctx {
            train,
            dropout: self.config.dropout,
            rng,
        };
        let e_t = code_title_embedding(&mut tape, &bound.coder.queries, titles)?;
        let vars = self.forward(&mut tape, &bound, ids, e_t, &mut ctx)?;
        Activations::collect(&tape, &vars)
    }

    /// Eval-mode pass starting from a given `E_x` (`n × d`), skipping the
    /// convolved embedding.
    pub fn predict_from_embedded(&self, e_x: &Tensor, titles: &TitleMatrix) -> Result<Activations> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let mut rng = Rng::new(0);
        let mut ctx = Ctx::eval(&mut rng);
        let e_t = code_title_embedding(&mut tape, &bound.coder.queries, titles)?;
        let e_x = tape.constant_ref(e_x);
        let u_x = sam(&mut tape, &bound.reader.layers, e_x, None, &mut ctx)?;
        let (v_x, attention) = code_guided_attention(&mut tape, e_t, u_x, None)?;
        let logits = output_logits(&mut tape, &bound.coder, v_x)?;
        Activations::collect(
            &tape,
            &ForwardVars {
                e_x,
                u_x,
                e_t,
                v_x,
                attention,
                logits,
            },
        )
    }

    /// Title embeddings in eval mode.
    pub fn title_embeddings(&self, titles: &TitleMatrix) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let e_t = code_title_embedding(&mut tape, &bound.coder.queries, titles)?;
        Ok(tape.value(e_t)?.clone())
    }

    /// Eval-mode probabilities for many documents, computing `E_t` once.
    pub fn predict_scores(&self, examples: &[EncodedExample], titles: &TitleMatrix) -> Result<ScoreMatrix> {
        let mut data = Vec::with_capacity(examples.len() * self.config.n_y);
        self.for_each_prediction(examples, titles, |_, y, _| data.extend_from_slice(y))?;
        ScoreMatrix::new(examples.len(), self.config.n_y, data)
    }

    /// Calls `f(index, probabilities, attention)` per example, eval mode.
    pub fn for_each_prediction(
        &self,
        examples: &[EncodedExample],
        titles: &TitleMatrix,
        mut f: impl FnMut(usize, &[f64], &Tensor),
    ) -> Result<()> {
        let e_t_value = self.title_embeddings(titles)?;
        let mut rng = Rng::new(0);
        for (i, ex) in examples.iter().enumerate() {
            self.check_inputs(&ex.token_ids, titles)?;
            let mut tape = Tape::new();
            let bound = self.params.bind(&mut tape, false);
            let e_t = tape.constant_ref(&e_t_value);
            let mut ctx = Ctx::eval(&mut rng);
            let vars = self.forward(&mut tape, &bound, &ex.token_ids, e_t, &mut ctx)?;
            let y: Vec<f64> = tape.value(vars.logits)?.data().iter().map(|&z| sigmoid(z)).collect();
            f(i, &y, tape.value(vars.attention)?);
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        for (name, t) in self.params.leaves() {
            ckpt.insert(name, t.clone());
        }
        ckpt
    }

    /// Copies tensors by name into a model shaped by `config`.
    pub fn from_checkpoint(config: RacConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut rng = Rng::new(0);
        let mut model = RacModel::init(config, None, &mut rng)?;
        let mut failure = None;
        model.params.for_each_mut(&mut |name, t| {
            if failure.is_some() {
                return;
            }
            match ckpt.require(name) {
                Ok(src) if src.shape() == t.shape() => *t = src.clone(),
                Ok(src) => {
                    failure = Some(Error::Checkpoint(format!(
                        "`{name}` has shape {:?}, expected {:?}",
                        src.shape(),
                        t.shape()
                    )))
                }
                Err(e) => failure = Some(e),
            }
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(model),
        }
    }

    pub fn sidecar_path(path: &Path) -> PathBuf {
        path.with_extension("json")
    }

    /// Writes the tensor container at `path` and the JSON sidecar next to
    /// it (same stem, `.json`).
    pub fn save(&self, path: impl AsRef<Path>, vocab_fingerprint: &str, title_fingerprint: &str) -> Result<()> {
        let path = path.as_ref();
        let sidecar = ModelSidecar {
            config: self.config.clone(),
            vocab_fingerprint: vocab_fingerprint.to_string(),
            title_fingerprint: title_fingerprint.to_string(),
        };
        let mut ckpt = self.to_checkpoint();
        ckpt.metadata.insert("vocab_fingerprint".into(), sidecar.vocab_fingerprint.clone());
        ckpt.metadata.insert("title_fingerprint".into(), sidecar.title_fingerprint.clone());
        ckpt.write(path)?;
        fs::write(Self::sidecar_path(path), serde_json::to_vec_pretty(&sidecar)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, ModelSidecar)> {
        let path = path.as_ref();
        let sidecar: ModelSidecar = serde_json::from_slice(&fs::read(Self::sidecar_path(path))?)?;
        let ckpt = Checkpoint::read(path)?;
        let model = Self::from_checkpoint(sidecar.config.clone(), &ckpt)?;
        Ok((model, sidecar))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(vocab: usize, n_x: usize, n_t: usize, n_y: usize) -> RacConfig {
        RacConfig {
            d: 4,
            n_x,
            n_t,
            d_ff: 6,
            sam_layers: 2,
            conv_kernel: 3,
            ..RacConfig::new(vocab, n_y)
        }
    }

    fn titles(n_y: usize, n_t: usize, vocab: usize) -> TitleMatrix {
        TitleMatrix::from_ids(n_t, (0..n_y * n_t).map(|i| 2 + (i * 7) % (vocab - 2)).collect()).unwrap()
    }

    fn model(config: RacConfig, seed: u64) -> RacModel {
        RacModel::init(config, None, &mut Rng::new(seed)).unwrap()
    }

    #[test]
    fn parameter_names_are_unique_and_ordered() {
        let m = model(tiny(10, 5, 3, 2), 1);
        let names: Vec<String> = m.params.leaves().into_iter().map(|(n, _)| n).collect();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        let mut visited = Vec::new();
        let mut m2 = m.clone();
        m2.params.for_each_mut(&mut |n, _| visited.push(n.to_string()));
        assert_eq!(visited, names);
    }

    #[test]
    fn all_pad_input_gives_zero_convolved_embedding() {
        let m = model(tiny(10, 6, 3, 2), 2);
        let mut tape = Tape::new();
        let bound = m.params.bind(&mut tape, false);
        let mut rng = Rng::new(0);
        let e_x = convolved_embedding(&mut tape, &bound.reader, &[PAD; 6], &mut Ctx::eval(&mut rng)).unwrap();
        let v = tape.value(e_x).unwrap();
        assert_eq!(v.shape(), &[6, 4]);
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_query_key_weights_give_mean_pooling() {
        let mut m = model(tiny(10, 5, 3, 2), 3);
        let layer = &mut m.params.reader.layers[0];
        layer.w_q = Tensor::zeros(&[4, 4]);
        layer.w_k = Tensor::zeros(&[4, 4]);
        let h_val = uniform(&mut Rng::new(9), &[5, 4], 1.0);
        let mut tape = Tape::new();
        let bound = m.params.bind(&mut tape, false);
        let h = tape.constant_ref(&h_val);
        let l = &bound.reader.layers[0];
        // reproduce the first half of the layer to inspect the weights
        let q = tape.matmul(h, l.w_q).unwrap();
        let k = tape.matmul(h, l.w_k).unwrap();
        let s = tape.matmul_t(q, k).unwrap();
        let a = tape.softmax(s).unwrap();
        assert!(tape.value(a).unwrap().data().iter().all(|&w| (w - 0.2).abs() < 1e-15));
        let v = tape.matmul(h, l.w_v).unwrap();
        let att = tape.matmul(a, v).unwrap();
        let vv = tape.value(v).unwrap().clone();
        let mean: Vec<f64> = (0..4).map(|j| (0..5).map(|i| vv.get2(i, j)).sum::<f64>() / 5.0).collect();
        for i in 0..5 {
            for j in 0..4 {
                assert!((tape.value(att).unwrap().get2(i, j) - mean[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sam_with_zero_layers_is_identity() {
        let m = model(RacConfig { sam_layers: 0, ..tiny(10, 5, 3, 2) }, 4);
        let h_val = uniform(&mut Rng::new(1), &[5, 4], 1.0);
        let mut tape = Tape::new();
        let bound = m.params.bind(&mut tape, false);
        let h = tape.constant_ref(&h_val);
        let mut rng = Rng::new(0);
        let u = sam(&mut tape, &bound.reader.layers, h, None, &mut Ctx::eval(&mut rng)).unwrap();
        assert_eq!(tape.value(u).unwrap(), &h_val);
    }

    #[test]
    fn identical_titles_give_identical_rows() {
        let m = model(tiny(10, 5, 3, 3), 5);
        let t = TitleMatrix::from_ids(3, vec![2, 3, 4, 5, 6, 0, 2, 3, 4]).unwrap();
        let e = m.title_embeddings(&t).unwrap();
        assert_eq!(e.row(0), e.row(2));
        assert_ne!(e.row(0), e.row(1));
    }

    #[test]
    fn zero_queries_attend_uniformly() {
        let u_val = uniform(&mut Rng::new(2), &[4, 3], 1.0);
        let mut tape = Tape::new();
        let e_t = tape.constant(Tensor::zeros(&[2, 3]));
        let u = tape.constant_ref(&u_val);
        let (v, a) = code_guided_attention(&mut tape, e_t, u, None).unwrap();
        assert!(tape.value(a).unwrap().data().iter().all(|&w| (w - 0.25).abs() < 1e-15));
        let v = tape.value(v).unwrap();
        for j in 0..3 {
            let mean = (0..4).map(|i| u_val.get2(i, j)).sum::<f64>() / 4.0;
            assert!((v.get2(0, j) - mean).abs() < 1e-12);
            assert_eq!(v.get2(0, j), v.get2(1, j));
        }
    }

    #[test]
    fn dominant_key_takes_the_attention() {
        // d = 4, scaled logit gap = (q·u_0 - q·u_1)/2 = (24 - 0)/2 = 12 > 10
        let mut tape = Tape::new();
        let e_t = tape.constant(Tensor::new(vec![1, 4], vec![3.0, 3.0, 0.0, 0.0]).unwrap());
        let u = tape.constant(Tensor::new(vec![2, 4], vec![4.0, 4.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0]).unwrap());
        let (_, a) = code_guided_attention(&mut tape, e_t, u, None).unwrap();
        let w = tape.value(a).unwrap().data()[0];
        assert!(w > 0.99);
        assert!((w - 1.0 / (1.0 + (-12.0f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn zero_output_weights_give_one_half() {
        let c = tiny(12, 6, 3, 4);
        let m = model(c.clone(), 6);
        let ids: Vec<usize> = (0..6).map(|i| 2 + i).collect();
        let act = m.predict(&ids, &titles(4, 3, 12), false, &mut Rng::new(0)).unwrap();
        assert_eq!(act.y, vec![0.5; 4]);
        for r in 0..4 {
            let s: f64 = act.attention.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_is_deterministic_and_train_uses_dropout() {
        let c = RacConfig { dropout: 0.5, ..tiny(12, 6, 3, 4) };
        let mut m = model(c, 7);
        m.params.coder.w_3 = uniform(&mut Rng::new(3), &[4, 1], 1.0);
        let ids: Vec<usize> = (0..6).map(|i| 2 + i).collect();
        let t = titles(4, 3, 12);
        let a = m.predict(&ids, &t, false, &mut Rng::new(1)).unwrap();
        let b = m.predict(&ids, &t, false, &mut Rng::new(2)).unwrap();
        assert_eq!(a.y, b.y);
        let c = m.predict(&ids, &t, true, &mut Rng::new(1)).unwrap();
        assert_ne!(a.y, c.y);
    }

    #[test]
    fn wrong_input_length_is_rejected() {
        let m = model(tiny(12, 6, 3, 4), 8);
        assert!(m.predict(&[2, 3], &titles(4, 3, 12), false, &mut Rng::new(0)).is_err());
        assert!(m.predict(&[2; 6], &titles(4, 2, 12), false, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn out_of_range_id_is_rejected() {
        let m = model(tiny(12, 6, 3, 4), 8);
        let err = m.predict(&[2, 3, 4, 5, 6, 99], &titles(4, 3, 12), false, &mut Rng::new(0));
        assert!(matches!(err, Err(Error::IndexOutOfRange { index: 99, .. })));
    }

    #[test]
    fn learned_query_ablation_has_no_title_parameters() {
        let m = model(RacConfig { code_title_queries: false, ..tiny(12, 6, 3, 4) }, 9);
        let names: Vec<String> = m.params.leaves().into_iter().map(|(n, _)| n).collect();
        assert!(names.contains(&"coder.queries".to_string()));
        assert!(!names.iter().any(|n| n.starts_with("coder.title")));
        let e = m.title_embeddings(&titles(4, 3, 12)).unwrap();
        assert_eq!(e.shape(), &[4, 4]);
    }

    #[test]
    fn save_load_round_trip() {
        let m = model(tiny(12, 6, 3, 4), 10);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.ckpt");
        m.save(&p, "vfp", "tfp").unwrap();
        let (back, side) = RacModel::load(&p).unwrap();
        assert_eq!(back, m);
        assert_eq!(side.vocab_fingerprint, "vfp");
        assert!(dir.path().join("model.json").exists());
    }

    #[test]
    fn pretrained_table_must_match_shape() {
        use crate::corpus::Vocabulary;
        use crate::embeddings::{train_skipgram, SkipGramConfig};
        let v = Vocabulary::from_texts(["a b c d"], 1).unwrap();
        let cfg = SkipGramConfig { dim: 4, min_count: 1, epochs: 1, ..Default::default() };
        let table = train_skipgram(&[v.encode("a b c d")], &v, &cfg).unwrap();
        let ok = RacModel::init(tiny(v.len(), 4, 2, 2), Some(&table), &mut Rng::new(0)).unwrap();
        assert_eq!(&ok.params.reader.embedding, table.vectors());
        assert!(RacModel::init(tiny(v.len() + 1, 4, 2, 2), Some(&table), &mut Rng::new(0)).is_err());
    }
}
