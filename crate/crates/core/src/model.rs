//! The instructed graph decoder.
//!
//! A small pre-norm transformer encodes the sentence. A decoder reads the
//! instruction while cross-attending to the sentence. Decoder states at the
//! label-slot positions then attend over the sentence tokens, and a biaffine
//! scorer turns the resulting label-aware token states into a
//! `|x| × |x| × K` logit matrix.
//!
//! ```
//! use rand::SeedableRng;
//! use tie::model::{Model, ModelConfig};
//!
//! let config = ModelConfig { vocab_size: 20, channels: 3, ..ModelConfig::tiny(8) };
//! let model = Model::new(config, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0)).unwrap();
//! let logits = model.logits(&[4, 5, 6, 7], &[8, 9, 10, 11, 12], &[1, 3, 4]).unwrap();
//! assert_eq!(logits.shape(), &[4, 4, 3]);
//! ```

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::tape::{sigmoid, Tape, Var};
use crate::tensor::Tensor;

const MASKED: f64 = -1e9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub layers_enc: usize,
    pub layers_dec: usize,
    pub heads: usize,
    /// FFN hidden width inside transformer blocks.
    pub ffn: usize,
    pub max_len: usize,
    pub max_instr_len: usize,
    pub dropout: f64,
    pub vocab_size: usize,
    /// Width of the scoring head. Datasets with fewer label channels use
    /// the leading channels.
    pub channels: usize,
    /// Feed `H_enc + H_x` instead of `H_x` to the scoring MLPs.
    #[serde(default)]
    pub residual_label_attention: bool,
    #[serde(default = "yes")]
    pub causal_decoder: bool,
}

fn yes() -> bool {
    true
}

impl ModelConfig {
    /// One layer each way, one head, no dropout.
    pub fn tiny(d: usize) -> Self {
        ModelConfig {
            d,
            layers_enc: 1,
            layers_dec: 1,
            heads: 1,
            ffn: 4 * d,
            max_len: crate::schema::DEFAULT_MAX_LEN,
            max_instr_len: crate::instruction::DEFAULT_MAX_INSTR_LEN,
            dropout: 0.0,
            vocab_size: 3,
            channels: 1,
            residual_label_attention: false,
            causal_decoder: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("layers_enc", self.layers_enc),
            ("layers_dec", self.layers_dec),
            ("heads", self.heads),
            ("ffn", self.ffn),
            ("max_len", self.max_len),
            ("max_instr_len", self.max_instr_len),
            ("vocab_size", self.vocab_size),
            ("channels", self.channels),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if self.d % self.heads != 0 {
            return Err(Error::config("heads", format!("d = {} is not divisible by {} heads", self.d, self.heads)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Tape handles for every intermediate named in the architecture.
#[derive(Debug, Clone, Copy)]
pub struct ForwardState {
    /// `|x| × d`
    pub h_enc: Var,
    /// `|u| × d`
    pub h_dec: Var,
    /// `K × d`
    pub h_slot: Var,
    /// `|x| × d`
    pub h_x: Var,
    pub h_head: Var,
    pub h_tail: Var,
    /// `|x| × |x| × K`, before the score layer.
    pub m_x: Var,
    /// `|x| × |x| × K`
    pub logits: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

/// Groups whose shapes depend on the channel count.
pub const CHANNEL_PARAMS: [&str; 4] = ["biaffine.w3", "biaffine.w4", "score.w", "score.b"];

impl Model {
    /// Parameters are drawn in a fixed order, channel-dependent ones last,
    /// so two configs differing only in `channels` share every other
    /// tensor under the same seed.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let bound = 1.0 / (d as f64).sqrt();
        let mut p = ParamStore::new();
        p.push_uniform("embed", "embed.tokens", &[config.vocab_size, d], bound, rng);
        p.push_uniform("embed", "embed.enc_pos", &[config.max_len, d], bound, rng);
        p.push_uniform("embed", "embed.dec_pos", &[config.max_instr_len, d], bound, rng);
        for l in 0..config.layers_enc {
            let g = format!("enc.{l}");
            norm(&mut p, &g, "ln1", d);
            attention(&mut p, &g, "attn", d, bound, rng);
            norm(&mut p, &g, "ln2", d);
            ffn(&mut p, &g, d, config.ffn, bound, rng);
        }
        norm(&mut p, "enc.out", "ln", d);
        for l in 0..config.layers_dec {
            let g = format!("dec.{l}");
            norm(&mut p, &g, "ln1", d);
            attention(&mut p, &g, "self", d, bound, rng);
            norm(&mut p, &g, "ln2", d);
            attention(&mut p, &g, "cross", d, bound, rng);
            norm(&mut p, &g, "ln3", d);
            ffn(&mut p, &g, d, config.ffn, bound, rng);
        }
        norm(&mut p, "dec.out", "ln", d);
        p.push_uniform("label_attn", "label_attn.w1", &[d, d], bound, rng);
        p.push_uniform("label_attn", "label_attn.w2", &[d, d], bound, rng);
        for side in ["head", "tail"] {
            let g = format!("mlp_{side}");
            p.push_uniform(&g, &format!("{g}.w1"), &[d, d], bound, rng);
            p.push(&g, &format!("{g}.b1"), Tensor::zeros(&[d]));
            p.push_uniform(&g, &format!("{g}.w2"), &[d, d], bound, rng);
            p.push(&g, &format!("{g}.b2"), Tensor::zeros(&[d]));
        }
        let k = config.channels;
        p.push_uniform("biaffine", "biaffine.w3", &[d, k, d], bound, rng);
        p.push_uniform("biaffine", "biaffine.w4", &[k, 2 * d], bound, rng);
        p.push_uniform("score", "score.w", &[k, k], bound, rng);
        p.push("score", "score.b", Tensor::zeros(&[k]));
        Ok(Model { config, params: p })
    }

    /// Changes the channel count. Existing channels keep their weights; new
    /// ones are freshly initialized. Only [`CHANNEL_PARAMS`] change.
    pub fn resize_channels<R: Rng + ?Sized>(&mut self, channels: usize, rng: &mut R) -> Result<()> {
        if channels == 0 {
            return Err(Error::config("channels", "must be at least 1"));
        }
        let (d, old) = (self.config.d, self.config.channels);
        let bound = 1.0 / (d as f64).sqrt();
        let keep = old.min(channels);
        let mut draw = |old_val: Option<f64>| old_val.unwrap_or_else(|| rng.gen_range(-bound..bound));

        let w3 = self.params.get("biaffine.w3").unwrap().value.clone();
        let mut data = Vec::with_capacity(d * channels * d);
        for a in 0..d {
            for c in 0..channels {
                for b in 0..d {
                    data.push(draw((c < keep).then(|| w3.at(&[a, c, b]))));
                }
            }
        }
        self.params.replace("biaffine.w3", Tensor::from_parts_unchecked(vec![d, channels, d], data))?;

        let w4 = self.params.get("biaffine.w4").unwrap().value.clone();
        let mut data = Vec::with_capacity(channels * 2 * d);
        for c in 0..channels {
            for b in 0..2 * d {
                data.push(draw((c < keep).then(|| w4.at(&[c, b]))));
            }
        }
        self.params.replace("biaffine.w4", Tensor::from_parts_unchecked(vec![channels, 2 * d], data))?;

        let ws = self.params.get("score.w").unwrap().value.clone();
        let mut data = Vec::with_capacity(channels * channels);
        for i in 0..channels {
            for j in 0..channels {
                data.push(draw((i < keep && j < keep).then(|| ws.at(&[i, j]))));
            }
        }
        self.params.replace("score.w", Tensor::from_parts_unchecked(vec![channels, channels], data))?;

        let bs = self.params.get("score.b").unwrap().value.clone();
        let data = (0..channels).map(|c| if c < keep { bs.data()[c] } else { 0.0 }).collect();
        self.params.replace("score.b", Tensor::from_parts_unchecked(vec![channels], data))?;

        self.config.channels = channels;
        Ok(())
    }

    fn check_ids(&self, ids: &[usize], limit: usize, what: &'static str) -> Result<()> {
        if ids.is_empty() || ids.len() > limit {
            return Err(Error::Index {
                op: what,
                index: ids.len(),
                len: limit,
            });
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::Index {
                op: "token id",
                index: bad,
                len: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Sentence encoder: `|x| × d`.
    pub fn encode_sentence(&self, tape: &mut Tape, p: &Bound, ids: &[usize], rng: Option<&mut (dyn RngCore + '_)>) -> Result<Var> {
        self.check_ids(ids, self.config.max_len, "sentence length")?;
        let mut drop = Dropout::new(self.config.dropout, rng);
        let tok = tape.embedding_lookup(p.get("embed.tokens"), ids)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pos = tape.embedding_lookup(p.get("embed.enc_pos"), &positions)?;
        let mut h = tape.add(tok, pos)?;
        for l in 0..self.config.layers_enc {
            let g = format!("enc.{l}");
            let x = layer_norm(tape, p, &format!("{g}.ln1"), h)?;
            let a = self.attend(tape, p, &format!("{g}.attn"), x, x, false, &mut drop)?;
            h = tape.add(h, a)?;
            let x = layer_norm(tape, p, &format!("{g}.ln2"), h)?;
            let f = feed_forward(tape, p, &g, x, &mut drop)?;
            h = tape.add(h, f)?;
        }
        layer_norm(tape, p, "enc.out.ln", h)
    }

    /// Instruction decoder with cross-attention to `h_enc`: `|u| × d`.
    pub fn decode_instruction(
        &self,
        tape: &mut Tape,
        p: &Bound,
        h_enc: Var,
        ids: &[usize],
        rng: Option<&mut (dyn RngCore + '_)>,
    ) -> Result<Var> {
        self.check_ids(ids, self.config.max_instr_len, "instruction length")?;
        let mut drop = Dropout::new(self.config.dropout, rng);
        let tok = tape.embedding_lookup(p.get("embed.tokens"), ids)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pos = tape.embedding_lookup(p.get("embed.dec_pos"), &positions)?;
        let mut h = tape.add(tok, pos)?;
        for l in 0..self.config.layers_dec {
            let g = format!("dec.{l}");
            let x = layer_norm(tape, p, &format!("{g}.ln1"), h)?;
            let a = self.attend(tape, p, &format!("{g}.self"), x, x, self.config.causal_decoder, &mut drop)?;
            h = tape.add(h, a)?;
            let x = layer_norm(tape, p, &format!("{g}.ln2"), h)?;
            let c = self.attend(tape, p, &format!("{g}.cross"), x, h_enc, false, &mut drop)?;
            h = tape.add(h, c)?;
            let x = layer_norm(tape, p, &format!("{g}.ln3"), h)?;
            let f = feed_forward(tape, p, &g, x, &mut drop)?;
            h = tape.add(h, f)?;
        }
        layer_norm(tape, p, "dec.out.ln", h)
    }

    /// Multi-head attention of `q_in` over `kv_in`.
    #[allow(clippy::too_many_arguments)]
    fn attend(
        &self,
        tape: &mut Tape,
        p: &Bound,
        prefix: &str,
        q_in: Var,
        kv_in: Var,
        causal: bool,
        drop: &mut Dropout<'_, '_>,
    ) -> Result<Var> {
        let heads = self.config.heads;
        let dh = self.config.d / heads;
        let q = tape.matmul(q_in, p.get(&format!("{prefix}.q")))?;
        let k = tape.matmul(kv_in, p.get(&format!("{prefix}.k")))?;
        let v = tape.matmul(kv_in, p.get(&format!("{prefix}.v")))?;
        let (n, m) = (tape.shape(q)[0], tape.shape(k)[0]);
        let mask = if causal {
            let mut t = Tensor::zeros(&[n, m]);
            for i in 0..n {
                for j in i + 1..m {
                    t.set(&[i, j], MASKED);
                }
            }
            Some(tape.constant(t))
        } else {
            None
        };
        let (qt, kt, vt) = (tape.transpose(q)?, tape.transpose(k)?, tape.transpose(v)?);
        let mut out: Option<Var> = None;
        for h in 0..heads {
            let qh_t = tape.slice_rows(qt, h * dh, dh)?;
            let qh = tape.transpose(qh_t)?;
            let kh_t = tape.slice_rows(kt, h * dh, dh)?;
            let vh_t = tape.slice_rows(vt, h * dh, dh)?;
            let vh = tape.transpose(vh_t)?;
            let raw = tape.matmul(qh, kh_t)?;
            let mut s = tape.scale(raw, 1.0 / (dh as f64).sqrt())?;
            if let Some(mask) = mask {
                s = tape.add(s, mask)?;
            }
            let probs = tape.softmax_rows(s)?;
            let probs = drop.apply(tape, probs)?;
            let head = tape.matmul(probs, vh)?;
            out = Some(match out {
                None => head,
                Some(acc) => tape.concat_last_dim(acc, head)?,
            });
        }
        tape.matmul(out.expect("heads >= 1"), p.get(&format!("{prefix}.o")))
    }

    /// Rows of `h_dec` at the label-slot positions: `K × d`.
    pub fn gather_slots(&self, tape: &mut Tape, h_dec: Var, slot_index: &[usize]) -> Result<Var> {
        tape.gather_rows(h_dec, slot_index)
    }

    /// `softmax((H_enc W1)(H_slot W2)ᵀ) (H_slot W2)`, plus `H_enc` when the
    /// residual variant is on.
    pub fn label_attention(&self, tape: &mut Tape, p: &Bound, h_enc: Var, h_slot: Var) -> Result<Var> {
        let a = tape.matmul(h_enc, p.get("label_attn.w1"))?;
        let b = tape.matmul(h_slot, p.get("label_attn.w2"))?;
        let bt = tape.transpose(b)?;
        let s = tape.matmul(a, bt)?;
        let w = tape.softmax_rows(s)?;
        let h = tape.matmul(w, b)?;
        if self.config.residual_label_attention {
            tape.add(h_enc, h)
        } else {
            Ok(h)
        }
    }

    /// Biaffine scoring over the first `k` channels. Returns
    /// `(H_head, H_tail, M_x, logits)`.
    pub fn biaffine_score(&self, tape: &mut Tape, p: &Bound, h_x: Var, k: usize) -> Result<(Var, Var, Var, Var)> {
        let (d, kk) = (self.config.d, self.config.channels);
        if k == 0 || k > kk {
            return Err(Error::Index {
                op: "channel count",
                index: k,
                len: kk,
            });
        }
        let n = tape.shape(h_x)[0];
        let hh = mlp(tape, p, "mlp_head", h_x)?;
        let ht = mlp(tape, p, "mlp_tail", h_x)?;

        // Bilinear term, one d×d slice per channel.
        let w3 = tape.reshape(p.get("biaffine.w3"), &[d, kk * d])?;
        let w3 = leading_columns(tape, w3, k * d)?;
        let a = tape.matmul(hh, w3)?;
        let a = tape.reshape(a, &[n * k, d])?;
        let ht_t = tape.transpose(ht)?;
        let bil = tape.matmul(a, ht_t)?;
        let bil = tape.reshape(bil, &[n, k, n])?;
        let bil = tape.transpose(bil)?;

        // Linear term over concatenated pairs.
        let rows_i: Vec<usize> = (0..n * n).map(|c| c / n).collect();
        let rows_j: Vec<usize> = (0..n * n).map(|c| c % n).collect();
        let pi = tape.gather_rows(hh, &rows_i)?;
        let pj = tape.gather_rows(ht, &rows_j)?;
        let pair = tape.concat_last_dim(pi, pj)?;
        let w4 = tape.slice_rows(p.get("biaffine.w4"), 0, k)?;
        let w4t = tape.transpose(w4)?;
        let lin = tape.matmul(pair, w4t)?;
        let lin = tape.reshape(lin, &[n, n, k])?;

        let m_x = tape.add(bil, lin)?;
        let flat = tape.reshape(m_x, &[n * n, k])?;
        let ws = tape.slice_rows(p.get("score.w"), 0, k)?;
        let ws = leading_columns(tape, ws, k)?;
        let bs = tape.reshape(p.get("score.b"), &[kk, 1])?;
        let bs = tape.slice_rows(bs, 0, k)?;
        let bs = tape.reshape(bs, &[k])?;
        let z = tape.matmul(flat, ws)?;
        let z = tape.add_bias(z, bs)?;
        let logits = tape.reshape(z, &[n, n, k])?;
        Ok((hh, ht, m_x, logits))
    }

    /// Full forward pass. Dropout is active iff `rng` is given.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        sentence: &[usize],
        instruction: &[usize],
        slot_index: &[usize],
        mut rng: Option<&mut (dyn RngCore + '_)>,
    ) -> Result<ForwardState> {
        let h_enc = self.encode_sentence(tape, p, sentence, rng.as_deref_mut())?;
        let h_dec = self.decode_instruction(tape, p, h_enc, instruction, rng.as_deref_mut())?;
        let h_slot = self.gather_slots(tape, h_dec, slot_index)?;
        let h_x = self.label_attention(tape, p, h_enc, h_slot)?;
        let (h_head, h_tail, m_x, logits) = self.biaffine_score(tape, p, h_x, slot_index.len())?;
        Ok(ForwardState {
            h_enc,
            h_dec,
            h_slot,
            h_x,
            h_head,
            h_tail,
            m_x,
            logits,
        })
    }

    /// Eval-mode logits on a scratch tape.
    pub fn logits(&self, sentence: &[usize], instruction: &[usize], slot_index: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let st = self.forward(&mut tape, &p, sentence, instruction, slot_index, None)?;
        Ok(tape.value(st.logits).clone())
    }

    /// Eval-mode sigmoid scores in (0, 1).
    pub fn scores(&self, sentence: &[usize], instruction: &[usize], slot_index: &[usize]) -> Result<Tensor> {
        Ok(self.logits(sentence, instruction, slot_index)?.map(sigmoid))
    }
}

/// Columns `0..cols` of a matrix.
fn leading_columns(tape: &mut Tape, a: Var, cols: usize) -> Result<Var> {
    if tape.shape(a)[1] == cols {
        return Ok(a);
    }
    let t = tape.transpose(a)?;
    let t = tape.slice_rows(t, 0, cols)?;
    tape.transpose(t)
}

fn norm(p: &mut ParamStore, group: &str, name: &str, d: usize) {
    p.push(group, &format!("{group}.{name}.g"), Tensor::full(&[d], 1.0));
    p.push(group, &format!("{group}.{name}.b"), Tensor::zeros(&[d]));
}

fn attention<R: Rng + ?Sized>(p: &mut ParamStore, group: &str, name: &str, d: usize, bound: f64, rng: &mut R) {
    for m in ["q", "k", "v", "o"] {
        p.push_uniform(group, &format!("{group}.{name}.{m}"), &[d, d], bound, rng);
    }
}

fn ffn<R: Rng + ?Sized>(p: &mut ParamStore, group: &str, d: usize, hidden: usize, bound: f64, rng: &mut R) {
    p.push_uniform(group, &format!("{group}.ffn.w1"), &[d, hidden], bound, rng);
    p.push(group, &format!("{group}.ffn.b1"), Tensor::zeros(&[hidden]));
    p.push_uniform(group, &format!("{group}.ffn.w2"), &[hidden, d], bound, rng);
    p.push(group, &format!("{group}.ffn.b2"), Tensor::zeros(&[d]));
}

fn layer_norm(tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    tape.layer_norm(x, p.get(&format!("{prefix}.g")), p.get(&format!("{prefix}.b")))
}

fn feed_forward(tape: &mut Tape, p: &Bound, group: &str, x: Var, drop: &mut Dropout<'_, '_>) -> Result<Var> {
    let h = tape.matmul(x, p.get(&format!("{group}.ffn.w1")))?;
    let h = tape.add_bias(h, p.get(&format!("{group}.ffn.b1")))?;
    let h = tape.gelu(h)?;
    let h = drop.apply(tape, h)?;
    let h = tape.matmul(h, p.get(&format!("{group}.ffn.w2")))?;
    tape.add_bias(h, p.get(&format!("{group}.ffn.b2")))
}

/// `Linear → GELU → Linear`, hidden width d.
fn mlp(tape: &mut Tape, p: &Bound, group: &str, x: Var) -> Result<Var> {
    let h = tape.matmul(x, p.get(&format!("{group}.w1")))?;
    let h = tape.add_bias(h, p.get(&format!("{group}.b1")))?;
    let h = tape.gelu(h)?;
    let h = tape.matmul(h, p.get(&format!("{group}.w2")))?;
    tape.add_bias(h, p.get(&format!("{group}.b2")))
}

/// Inverted dropout; a no-op without an RNG or at rate 0.
struct Dropout<'a, 'r> {
    rate: f64,
    rng: Option<&'a mut (dyn RngCore + 'r)>,
}

impl<'a, 'r> Dropout<'a, 'r> {
    fn new(rate: f64, rng: Option<&'a mut (dyn RngCore + 'r)>) -> Self {
        Dropout { rate, rng }
    }

    fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        let Some(rng) = self.rng.as_deref_mut() else {
            return Ok(x);
        };
        if self.rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.rate;
        let shape = tape.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mask = tape.constant(Tensor::from_parts_unchecked(shape, data));
        tape.mul(x, mask)
    }
}
