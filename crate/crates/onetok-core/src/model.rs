//! Decoder-only transformer backbone.
//!
//! Pre-norm blocks with rotary positions, causal attention and a gated
//! (SiLU) feed-forward, mapping a token sequence to next-token logits at the
//! final unmasked position. Weights are immutable after load; per-metric
//! low-rank adapters perturb the four attention projections at call time.
//!
//! Training support is a recorded forward (`forward_train`) plus an explicit
//! hand-chained backward that produces gradients for adapter tensors only —
//! the backbone itself is frozen by construction.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::adapter::{LoraAdapter, LoraGrads, Target};
use crate::container::{Container, ContainerError};
use crate::tensor::{
    mm, mm_nt, mm_tn_acc, rms_norm_backward_slice, rms_norm_slice, rope_rotate_row, silu,
    silu_backward, softmax_backward_slice, softmax_slice, Scalar, Tensor,
};
use crate::util::fnv1a64;

/// Epsilon inside the RMS norm denominator.
pub const RMS_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model config error: {0}")]
    Config(String),
    #[error("input of {len} tokens exceeds max context {max}")]
    ContextLength { len: usize, max: usize },
    #[error("token id {id} out of range for vocab size {vocab}")]
    VocabRange { id: u32, vocab: usize },
    #[error("input must contain at least one token")]
    EmptyInput,
    #[error("forward produced non-finite logits")]
    NonFinite,
    #[error(transparent)]
    Container(#[from] ContainerError),
}

/// Architecture hyperparameters. `d_model = n_heads * d_head`, `d_head` even.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub max_context: usize,
    pub rope_theta: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale default: vocab 512, d_model 64, 4 layers, 4 heads, d_ff 256.
    pub fn desk() -> Self {
        ModelConfig {
            vocab_size: 512,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_head: 16,
            d_ff: 256,
            max_context: 1024,
            rope_theta: 10_000.0,
            seed: 42,
        }
    }

    /// Much smaller config for fast multi-adapter tests.
    pub fn tiny() -> Self {
        ModelConfig {
            vocab_size: 512,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_head: 8,
            d_ff: 32,
            max_context: 256,
            rope_theta: 10_000.0,
            seed: 7,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_head", self.d_head),
            ("d_ff", self.d_ff),
            ("max_context", self.max_context),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model != self.n_heads * self.d_head {
            return Err(ModelError::Config(format!(
                "d_model ({}) must equal n_heads * d_head ({} * {})",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if self.d_head % 2 != 0 {
            return Err(ModelError::Config(format!(
                "d_head ({}) must be even for rotary positions",
                self.d_head
            )));
        }
        if self.rope_theta <= 0.0 {
            return Err(ModelError::Config("rope_theta must be positive".into()));
        }
        Ok(())
    }

    /// Stable identifier of this architecture + seed, stored in adapter files.
    pub fn fingerprint(&self) -> u64 {
        let canon = format!(
            "v{} d{} l{} h{} dh{} ff{} ctx{} theta{} seed{}",
            self.vocab_size,
            self.d_model,
            self.n_layers,
            self.n_heads,
            self.d_head,
            self.d_ff,
            self.max_context,
            self.rope_theta,
            self.seed
        );
        fnv1a64(canon.as_bytes())
    }
}

/// Next-token scores over the full vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits<T = f32>(Vec<T>);

impl<T: Scalar> Logits<T> {
    pub fn new(scores: Vec<T>) -> Self {
        Logits(scores)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<T> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct LayerWeights<T = f32> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub w_gate: Tensor<T>,
    pub w_up: Tensor<T>,
    pub w_down: Tensor<T>,
    pub attn_norm: Tensor<T>,
    pub ffn_norm: Tensor<T>,
}

impl<T: Scalar> LayerWeights<T> {
    fn projection(&self, target: Target) -> &Tensor<T> {
        match target {
            Target::Query => &self.wq,
            Target::Key => &self.wk,
            Target::Value => &self.wv,
            Target::Output => &self.wo,
        }
    }
}

/// The frozen backbone: embedding, decoder layers, final norm, output head.
#[derive(Debug, Clone)]
pub struct ModelWeights<T = f32> {
    config: ModelConfig,
    pub embed: Tensor<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub final_norm: Tensor<T>,
    pub head: Tensor<T>,
}

impl<T: Scalar> ModelWeights<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Deterministic random initialization from `config.seed`:
    /// weight matrices from a normal with std 0.02, norm gains at one.
    pub fn init_random(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let ff = config.d_ff;
        let v = config.vocab_size;
        let embed = normal_tensor(&mut rng, &[v, d]);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerWeights {
                attn_norm: Tensor::filled(&[d], T::ONE),
                wq: normal_tensor(&mut rng, &[d, d]),
                wk: normal_tensor(&mut rng, &[d, d]),
                wv: normal_tensor(&mut rng, &[d, d]),
                wo: normal_tensor(&mut rng, &[d, d]),
                ffn_norm: Tensor::filled(&[d], T::ONE),
                w_gate: normal_tensor(&mut rng, &[d, ff]),
                w_up: normal_tensor(&mut rng, &[d, ff]),
                w_down: normal_tensor(&mut rng, &[ff, d]),
            });
        }
        let final_norm = Tensor::filled(&[d], T::ONE);
        let head = normal_tensor(&mut rng, &[d, v]);
        Ok(ModelWeights {
            config,
            embed,
            layers,
            final_norm,
            head,
        })
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<(), ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::EmptyInput);
        }
        if tokens.len() > self.config.max_context {
            return Err(ModelError::ContextLength {
                len: tokens.len(),
                max: self.config.max_context,
            });
        }
        for &id in tokens {
            if id as usize >= self.config.vocab_size {
                return Err(ModelError::VocabRange {
                    id,
                    vocab: self.config.vocab_size,
                });
            }
        }
        Ok(())
    }

    /// Logits at the final unmasked position.
    pub fn forward(
        &self,
        tokens: &[u32],
        adapter: Option<&LoraAdapter<T>>,
    ) -> Result<Logits<T>, ModelError> {
        let (x_final, _) = self.forward_impl(tokens, adapter, false)?;
        let seq_len = tokens.len();
        let d = self.config.d_model;
        let v = self.config.vocab_size;
        let mut normed = vec![T::ZERO; d];
        rms_norm_slice(&mut normed, x_final.row(seq_len - 1), self.final_norm.data(), RMS_EPS);
        let mut logits = vec![T::ZERO; v];
        mm(&mut logits, &normed, self.head.data(), 1, d, v);
        if !logits.iter().all(|x| x.is_finite()) {
            return Err(ModelError::NonFinite);
        }
        Ok(Logits(logits))
    }

    /// Logits at every position: row `t` depends only on tokens `0..=t`.
    pub fn forward_all_positions(
        &self,
        tokens: &[u32],
        adapter: Option<&LoraAdapter<T>>,
    ) -> Result<Tensor<T>, ModelError> {
        let (x_final, _) = self.forward_impl(tokens, adapter, false)?;
        let seq_len = tokens.len();
        let d = self.config.d_model;
        let v = self.config.vocab_size;
        let mut normed = Tensor::zeros(&[seq_len, d]);
        for t in 0..seq_len {
            rms_norm_slice(normed.row_mut(t), x_final.row(t), self.final_norm.data(), RMS_EPS);
        }
        let mut out = Tensor::zeros(&[seq_len, v]);
        mm(out.data_mut(), normed.data(), self.head.data(), seq_len, d, v);
        if !out.all_finite() {
            return Err(ModelError::NonFinite);
        }
        Ok(out)
    }

    /// Recorded forward pass for training.
    pub fn forward_train(
        &self,
        tokens: &[u32],
        adapter: &LoraAdapter<T>,
    ) -> Result<Tape<T>, ModelError> {
        let (_, tape) = self.forward_impl(tokens, Some(adapter), true)?;
        Ok(tape.expect("tape requested"))
    }

    /// Logit of a single vocabulary token at the final position, from a tape.
    pub fn class_logits_from_tape(&self, tape: &Tape<T>, class_ids: &[u32]) -> Vec<T> {
        let v = self.config.vocab_size;
        let d = self.config.d_model;
        let head = self.head.data();
        class_ids
            .iter()
            .map(|&c| {
                let mut acc = T::ZERO;
                for i in 0..d {
                    acc += tape.final_normed[i] * head[i * v + c as usize];
                }
                acc
            })
            .collect()
    }

    fn forward_impl(
        &self,
        tokens: &[u32],
        adapter: Option<&LoraAdapter<T>>,
        record: bool,
    ) -> Result<(Tensor<T>, Option<Tape<T>>), ModelError> {
        self.check_tokens(tokens)?;
        let cfg = &self.config;
        let (seq_len, d, ff) = (tokens.len(), cfg.d_model, cfg.d_ff);
        let (heads, dh) = (cfg.n_heads, cfg.d_head);
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());

        let mut x = Tensor::zeros(&[seq_len, d]);
        for (t, &id) in tokens.iter().enumerate() {
            x.row_mut(t).copy_from_slice(self.embed.row(id as usize));
        }

        let mut tape = record.then(|| Tape {
            tokens: tokens.to_vec(),
            layers: Vec::with_capacity(cfg.n_layers),
            x_final: Tensor::zeros(&[0]),
            final_normed: Vec::new(),
        });

        for (l, layer) in self.layers.iter().enumerate() {
            // attention sublayer, pre-norm
            let mut n1 = Tensor::zeros(&[seq_len, d]);
            for t in 0..seq_len {
                rms_norm_slice(n1.row_mut(t), x.row(t), layer.attn_norm.data(), RMS_EPS);
            }
            let mut q = self.project(&n1, layer, adapter, l, Target::Query);
            let mut k = self.project(&n1, layer, adapter, l, Target::Key);
            let v = self.project(&n1, layer, adapter, l, Target::Value);
            for t in 0..seq_len {
                for h in 0..heads {
                    rope_rotate_row(&mut q.row_mut(t)[h * dh..(h + 1) * dh], t, cfg.rope_theta, false);
                    rope_rotate_row(&mut k.row_mut(t)[h * dh..(h + 1) * dh], t, cfg.rope_theta, false);
                }
            }

            let mut ctx = Tensor::zeros(&[seq_len, d]);
            let mut probs_per_head = record.then(Vec::new);
            let mut qh = vec![T::ZERO; seq_len * dh];
            let mut kh = vec![T::ZERO; seq_len * dh];
            let mut vh = vec![T::ZERO; seq_len * dh];
            for h in 0..heads {
                gather_head(&mut qh, q.data(), seq_len, d, h, dh);
                gather_head(&mut kh, k.data(), seq_len, d, h, dh);
                gather_head(&mut vh, v.data(), seq_len, d, h, dh);
                // causal scores and row softmax
                let mut probs = Tensor::zeros(&[seq_len, seq_len]);
                for i in 0..seq_len {
                    let row = probs.row_mut(i);
                    for j in 0..=i {
                        let mut acc = T::ZERO;
                        for c in 0..dh {
                            acc += qh[i * dh + c] * kh[j * dh + c];
                        }
                        row[j] = acc * scale;
                    }
                    softmax_slice(&mut row[..=i]);
                }
                // context = probs . v_head
                for i in 0..seq_len {
                    let out_row = &mut ctx.row_mut(i)[h * dh..(h + 1) * dh];
                    let prow = probs.row(i);
                    for j in 0..=i {
                        let p = prow[j];
                        if p == T::ZERO {
                            continue;
                        }
                        for c in 0..dh {
                            out_row[c] += p * vh[j * dh + c];
                        }
                    }
                }
                if let Some(list) = probs_per_head.as_mut() {
                    list.push(probs);
                }
            }

            let attn_out = self.project(&ctx, layer, adapter, l, Target::Output);
            let mut x_mid = x.clone();
            for (o, dv) in x_mid.data_mut().iter_mut().zip(attn_out.data()) {
                *o += *dv;
            }

            // feed-forward sublayer, pre-norm, gated silu
            let mut n2 = Tensor::zeros(&[seq_len, d]);
            for t in 0..seq_len {
                rms_norm_slice(n2.row_mut(t), x_mid.row(t), layer.ffn_norm.data(), RMS_EPS);
            }
            let mut gate = Tensor::zeros(&[seq_len, ff]);
            mm(gate.data_mut(), n2.data(), layer.w_gate.data(), seq_len, d, ff);
            let mut up = Tensor::zeros(&[seq_len, ff]);
            mm(up.data_mut(), n2.data(), layer.w_up.data(), seq_len, d, ff);
            let mut gate_act = Tensor::zeros(&[seq_len, ff]);
            for (ga, &g) in gate_act.data_mut().iter_mut().zip(gate.data()) {
                *ga = silu(g);
            }
            let mut hidden = Tensor::zeros(&[seq_len, ff]);
            for ((hv, &ga), &u) in hidden
                .data_mut()
                .iter_mut()
                .zip(gate_act.data())
                .zip(up.data())
            {
                *hv = ga * u;
            }
            let mut ffn_out = Tensor::zeros(&[seq_len, d]);
            mm(ffn_out.data_mut(), hidden.data(), layer.w_down.data(), seq_len, ff, d);

            let mut x_next = x_mid.clone();
            for (o, dv) in x_next.data_mut().iter_mut().zip(ffn_out.data()) {
                *o += *dv;
            }

            if let Some(tape) = tape.as_mut() {
                tape.layers.push(LayerTape {
                    x_in: x,
                    n1,
                    q,
                    k,
                    v,
                    probs: probs_per_head.unwrap(),
                    ctx,
                    x_mid,
                    gate,
                    gate_act,
                    up,
                });
            }
            x = x_next;
        }

        if let Some(tape) = tape.as_mut() {
            let mut normed = vec![T::ZERO; d];
            rms_norm_slice(&mut normed, x.row(seq_len - 1), self.final_norm.data(), RMS_EPS);
            tape.final_normed = normed;
            tape.x_final = x.clone();
        }
        Ok((x, tape))
    }

    /// `x . W_target`, plus the adapter's low-rank delta when a site exists.
    fn project(
        &self,
        x: &Tensor<T>,
        layer: &LayerWeights<T>,
        adapter: Option<&LoraAdapter<T>>,
        layer_idx: usize,
        target: Target,
    ) -> Tensor<T> {
        let (rows, d_in) = (x.shape()[0], x.shape()[1]);
        let w = layer.projection(target);
        let d_out = w.shape()[1];
        let mut out = Tensor::zeros(&[rows, d_out]);
        mm(out.data_mut(), x.data(), w.data(), rows, d_in, d_out);
        if let Some(adapter) = adapter {
            adapter.add_delta_rows(layer_idx, target, x, &mut out);
        }
        out
    }

    /// Backward pass from sparse logit gradients at the final position.
    ///
    /// `d_logits` pairs vocabulary token ids with the loss gradient of their
    /// final-position logit. Gradients flow through the whole stack but are
    /// accumulated only into `grads` (the adapter tensors); backbone weights
    /// stay untouched.
    pub fn backward(
        &self,
        tape: &Tape<T>,
        adapter: &LoraAdapter<T>,
        d_logits: &[(u32, T)],
        grads: &mut LoraGrads<T>,
    ) {
        let cfg = &self.config;
        let seq_len = tape.tokens.len();
        let (d, ff, heads, dh) = (cfg.d_model, cfg.d_ff, cfg.n_heads, cfg.d_head);
        let v = cfg.vocab_size;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());

        // head backward: d(normed final hidden)
        let mut d_normed = vec![T::ZERO; d];
        let head = self.head.data();
        for &(c, g) in d_logits {
            for i in 0..d {
                d_normed[i] += g * head[i * v + c as usize];
            }
        }
        // final rms norm backward, final row only
        let mut d_x = Tensor::zeros(&[seq_len, d]);
        rms_norm_backward_slice(
            d_x.row_mut(seq_len - 1),
            None,
            tape.x_final.row(seq_len - 1),
            self.final_norm.data(),
            RMS_EPS,
            &d_normed,
        );

        for (l, layer) in self.layers.iter().enumerate().rev() {
            let lt = &tape.layers[l];

            // ffn backward: x_next = x_mid + (silu(n2 Wg) * (n2 Wu)) Wd
            let mut d_hidden = Tensor::zeros(&[seq_len, ff]);
            mm_nt(d_hidden.data_mut(), d_x.data(), layer.w_down.data(), seq_len, d, ff);
            let mut d_gate = Tensor::zeros(&[seq_len, ff]);
            let mut d_up = Tensor::zeros(&[seq_len, ff]);
            for i in 0..seq_len * ff {
                let dh_v = d_hidden.data()[i];
                d_gate.data_mut()[i] = dh_v * lt.up.data()[i] * silu_backward(lt.gate.data()[i]);
                d_up.data_mut()[i] = dh_v * lt.gate_act.data()[i];
            }
            let mut d_n2 = Tensor::zeros(&[seq_len, d]);
            mm_nt(d_n2.data_mut(), d_gate.data(), layer.w_gate.data(), seq_len, ff, d);
            let mut d_n2_up = Tensor::zeros(&[seq_len, d]);
            mm_nt(d_n2_up.data_mut(), d_up.data(), layer.w_up.data(), seq_len, ff, d);
            for (a, b) in d_n2.data_mut().iter_mut().zip(d_n2_up.data()) {
                *a += *b;
            }
            // d_x currently holds d(x_next); residual passes it to x_mid
            let mut d_x_mid = d_x.clone();
            for t in 0..seq_len {
                let mut d_row = vec![T::ZERO; d];
                rms_norm_backward_slice(
                    &mut d_row,
                    None,
                    lt.x_mid.row(t),
                    layer.ffn_norm.data(),
                    RMS_EPS,
                    d_n2.row(t),
                );
                for (o, dv) in d_x_mid.row_mut(t).iter_mut().zip(d_row.iter()) {
                    *o += *dv;
                }
            }

            // attention output projection backward
            let d_attn_out = &d_x_mid; // x_mid = x_in + attn_out
            let mut d_ctx = Tensor::zeros(&[seq_len, d]);
            mm_nt(d_ctx.data_mut(), d_attn_out.data(), layer.wo.data(), seq_len, d, d);
            adapter.backward_delta_rows(
                l,
                Target::Output,
                &lt.ctx,
                d_attn_out,
                &mut d_ctx,
                grads,
            );

            // per-head attention backward
            let mut d_q = Tensor::zeros(&[seq_len, d]);
            let mut d_k = Tensor::zeros(&[seq_len, d]);
            let mut d_v = Tensor::zeros(&[seq_len, d]);
            let mut qh = vec![T::ZERO; seq_len * dh];
            let mut kh = vec![T::ZERO; seq_len * dh];
            let mut vh = vec![T::ZERO; seq_len * dh];
            let mut d_ctx_h = vec![T::ZERO; seq_len * dh];
            for h in 0..heads {
                gather_head(&mut qh, lt.q.data(), seq_len, d, h, dh);
                gather_head(&mut kh, lt.k.data(), seq_len, d, h, dh);
                gather_head(&mut vh, lt.v.data(), seq_len, d, h, dh);
                gather_head(&mut d_ctx_h, d_ctx.data(), seq_len, d, h, dh);
                let probs = &lt.probs[h];

                // d_probs = d_ctx_h . vh^T ; d_vh = probs^T . d_ctx_h
                let mut d_probs = vec![T::ZERO; seq_len * seq_len];
                mm_nt(&mut d_probs, &d_ctx_h, &vh, seq_len, dh, seq_len);
                let mut d_vh = vec![T::ZERO; seq_len * dh];
                mm_tn_acc(&mut d_vh, probs.data(), &d_ctx_h, seq_len, seq_len, dh);

                // softmax backward per causal row, then scale
                let mut d_scores = vec![T::ZERO; seq_len * seq_len];
                for i in 0..seq_len {
                    softmax_backward_slice(
                        &mut d_scores[i * seq_len..i * seq_len + i + 1],
                        &probs.row(i)[..=i],
                        &d_probs[i * seq_len..i * seq_len + i + 1],
                    );
                    for jdx in i * seq_len..i * seq_len + i + 1 {
                        d_scores[jdx] *= scale;
                    }
                }

                // d_qh = d_scores . kh ; d_kh = d_scores^T . qh
                let mut d_qh = vec![T::ZERO; seq_len * dh];
                mm(&mut d_qh, &d_scores, &kh, seq_len, seq_len, dh);
                let mut d_kh = vec![T::ZERO; seq_len * dh];
                mm_tn_acc(&mut d_kh, &d_scores, &qh, seq_len, seq_len, dh);

                scatter_head(d_q.data_mut(), &d_qh, seq_len, d, h, dh);
                scatter_head(d_k.data_mut(), &d_kh, seq_len, d, h, dh);
                scatter_head(d_v.data_mut(), &d_vh, seq_len, d, h, dh);
            }

            // rope backward: rotate gradients by the negated angles
            for t in 0..seq_len {
                for h in 0..heads {
                    rope_rotate_row(&mut d_q.row_mut(t)[h * dh..(h + 1) * dh], t, cfg.rope_theta, true);
                    rope_rotate_row(&mut d_k.row_mut(t)[h * dh..(h + 1) * dh], t, cfg.rope_theta, true);
                }
            }

            // projection backward into d_n1 (+ adapter grads at q/k/v sites)
            let mut d_n1 = Tensor::zeros(&[seq_len, d]);
            mm_nt(d_n1.data_mut(), d_q.data(), layer.wq.data(), seq_len, d, d);
            adapter.backward_delta_rows(l, Target::Query, &lt.n1, &d_q, &mut d_n1, grads);
            let mut tmp = Tensor::zeros(&[seq_len, d]);
            mm_nt(tmp.data_mut(), d_k.data(), layer.wk.data(), seq_len, d, d);
            for (a, b) in d_n1.data_mut().iter_mut().zip(tmp.data()) {
                *a += *b;
            }
            adapter.backward_delta_rows(l, Target::Key, &lt.n1, &d_k, &mut d_n1, grads);
            let mut tmp_v = Tensor::zeros(&[seq_len, d]);
            mm_nt(tmp_v.data_mut(), d_v.data(), layer.wv.data(), seq_len, d, d);
            for (a, b) in d_n1.data_mut().iter_mut().zip(tmp_v.data()) {
                *a += *b;
            }
            adapter.backward_delta_rows(l, Target::Value, &lt.n1, &d_v, &mut d_n1, grads);

            // attention pre-norm backward + residual into d(x_in)
            let mut d_x_in = d_x_mid;
            for t in 0..seq_len {
                let mut d_row = vec![T::ZERO; d];
                rms_norm_backward_slice(
                    &mut d_row,
                    None,
                    lt.x_in.row(t),
                    layer.attn_norm.data(),
                    RMS_EPS,
                    d_n1.row(t),
                );
                for (o, dv) in d_x_in.row_mut(t).iter_mut().zip(d_row.iter()) {
                    *o += *dv;
                }
            }
            d_x = d_x_in;
        }
    }

    /// FNV-1a over every tensor's little-endian bytes, in canonical order.
    pub fn checksum(&self) -> u64 {
        let mut bytes = Vec::new();
        let mut push = |t: &Tensor<T>| {
            for &v in t.data() {
                bytes.extend_from_slice(&v.to_f64().to_le_bytes());
            }
        };
        push(&self.embed);
        for layer in &self.layers {
            push(&layer.attn_norm);
            push(&layer.wq);
            push(&layer.wk);
            push(&layer.wv);
            push(&layer.wo);
            push(&layer.ffn_norm);
            push(&layer.w_gate);
            push(&layer.w_up);
            push(&layer.w_down);
        }
        push(&self.final_norm);
        push(&self.head);
        fnv1a64(&bytes)
    }

    /// Cast to another precision (used by the f64 gradient checks).
    pub fn cast<U: Scalar>(&self) -> ModelWeights<U> {
        ModelWeights {
            config: self.config,
            embed: self.embed.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    wq: l.wq.cast(),
                    wk: l.wk.cast(),
                    wv: l.wv.cast(),
                    wo: l.wo.cast(),
                    w_gate: l.w_gate.cast(),
                    w_up: l.w_up.cast(),
                    w_down: l.w_down.cast(),
                    attn_norm: l.attn_norm.cast(),
                    ffn_norm: l.ffn_norm.cast(),
                })
                .collect(),
            final_norm: self.final_norm.cast(),
            head: self.head.cast(),
        }
    }
}

impl ModelWeights<f32> {
    /// Write weights to the tensor container format.
    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<(), ModelError> {
        let mut c = Container::new();
        c.set_meta("kind", "model");
        c.set_meta("vocab_size", self.config.vocab_size);
        c.set_meta("d_model", self.config.d_model);
        c.set_meta("n_layers", self.config.n_layers);
        c.set_meta("n_heads", self.config.n_heads);
        c.set_meta("d_head", self.config.d_head);
        c.set_meta("d_ff", self.config.d_ff);
        c.set_meta("max_context", self.config.max_context);
        c.set_meta("rope_theta", self.config.rope_theta);
        c.set_meta("seed", self.config.seed);
        c.push("embed", self.embed.clone());
        for (i, l) in self.layers.iter().enumerate() {
            c.push(&format!("layers.{i}.attn_norm"), l.attn_norm.clone());
            c.push(&format!("layers.{i}.wq"), l.wq.clone());
            c.push(&format!("layers.{i}.wk"), l.wk.clone());
            c.push(&format!("layers.{i}.wv"), l.wv.clone());
            c.push(&format!("layers.{i}.wo"), l.wo.clone());
            c.push(&format!("layers.{i}.ffn_norm"), l.ffn_norm.clone());
            c.push(&format!("layers.{i}.w_gate"), l.w_gate.clone());
            c.push(&format!("layers.{i}.w_up"), l.w_up.clone());
            c.push(&format!("layers.{i}.w_down"), l.w_down.clone());
        }
        c.push("final_norm", self.final_norm.clone());
        c.push("head", self.head.clone());
        c.save(path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, ModelError> {
        let mut c = Container::load(path)?;
        if c.meta("kind")? != "model" {
            return Err(ModelError::Config("container is not a model file".into()));
        }
        let config = ModelConfig {
            vocab_size: c.meta_parsed("vocab_size")?,
            d_model: c.meta_parsed("d_model")?,
            n_layers: c.meta_parsed("n_layers")?,
            n_heads: c.meta_parsed("n_heads")?,
            d_head: c.meta_parsed("d_head")?,
            d_ff: c.meta_parsed("d_ff")?,
            max_context: c.meta_parsed("max_context")?,
            rope_theta: c.meta_parsed("rope_theta")?,
            seed: c.meta_parsed("seed")?,
        };
        config.validate()?;
        let embed = c.take("embed")?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            layers.push(LayerWeights {
                attn_norm: c.take(&format!("layers.{i}.attn_norm"))?,
                wq: c.take(&format!("layers.{i}.wq"))?,
                wk: c.take(&format!("layers.{i}.wk"))?,
                wv: c.take(&format!("layers.{i}.wv"))?,
                wo: c.take(&format!("layers.{i}.wo"))?,
                ffn_norm: c.take(&format!("layers.{i}.ffn_norm"))?,
                w_gate: c.take(&format!("layers.{i}.w_gate"))?,
                w_up: c.take(&format!("layers.{i}.w_up"))?,
                w_down: c.take(&format!("layers.{i}.w_down"))?,
            });
        }
        let final_norm = c.take("final_norm")?;
        let head = c.take("head")?;
        let model = ModelWeights {
            config,
            embed,
            layers,
            final_norm,
            head,
        };
        model.validate_shapes()?;
        Ok(model)
    }

    fn validate_shapes(&self) -> Result<(), ModelError> {
        let cfg = &self.config;
        let expect = |t: &Tensor<f32>, shape: &[usize], name: &str| {
            if t.shape() != shape {
                Err(ModelError::Config(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )))
            } else {
                Ok(())
            }
        };
        expect(&self.embed, &[cfg.vocab_size, cfg.d_model], "embed")?;
        for (i, l) in self.layers.iter().enumerate() {
            let d = cfg.d_model;
            expect(&l.wq, &[d, d], &format!("layers.{i}.wq"))?;
            expect(&l.wk, &[d, d], &format!("layers.{i}.wk"))?;
            expect(&l.wv, &[d, d], &format!("layers.{i}.wv"))?;
            expect(&l.wo, &[d, d], &format!("layers.{i}.wo"))?;
            expect(&l.w_gate, &[d, cfg.d_ff], &format!("layers.{i}.w_gate"))?;
            expect(&l.w_up, &[d, cfg.d_ff], &format!("layers.{i}.w_up"))?;
            expect(&l.w_down, &[cfg.d_ff, d], &format!("layers.{i}.w_down"))?;
            expect(&l.attn_norm, &[d], &format!("layers.{i}.attn_norm"))?;
            expect(&l.ffn_norm, &[d], &format!("layers.{i}.ffn_norm"))?;
        }
        expect(&self.final_norm, &[cfg.d_model], "final_norm")?;
        expect(&self.head, &[cfg.d_model, cfg.vocab_size], "head")?;
        Ok(())
    }
}

/// Recorded activations from one training forward pass.
#[derive(Debug, Clone)]
pub struct Tape<T = f32> {
    pub tokens: Vec<u32>,
    layers: Vec<LayerTape<T>>,
    /// Residual stream after the last layer, before the final norm.
    pub x_final: Tensor<T>,
    /// Final-position hidden state after the final norm.
    pub final_normed: Vec<T>,
}

#[derive(Debug, Clone)]
struct LayerTape<T> {
    x_in: Tensor<T>,
    n1: Tensor<T>,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    probs: Vec<Tensor<T>>,
    ctx: Tensor<T>,
    x_mid: Tensor<T>,
    gate: Tensor<T>,
    gate_act: Tensor<T>,
    up: Tensor<T>,
}

fn gather_head<T: Scalar>(out: &mut [T], x: &[T], seq_len: usize, d: usize, h: usize, dh: usize) {
    for t in 0..seq_len {
        out[t * dh..(t + 1) * dh].copy_from_slice(&x[t * d + h * dh..t * d + (h + 1) * dh]);
    }
}

fn scatter_head<T: Scalar>(out: &mut [T], x: &[T], seq_len: usize, d: usize, h: usize, dh: usize) {
    for t in 0..seq_len {
        out[t * d + h * dh..t * d + (h + 1) * dh].copy_from_slice(&x[t * dh..(t + 1) * dh]);
    }
}

fn normal_tensor<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    use rand::Rng;
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        // Box-Muller from two uniforms; std 0.02
        let u1: f64 = 1.0 - rng.random::<f64>();
        let u2: f64 = rng.random::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        data.push(T::from_f64(0.02 * r * theta.cos()));
        if data.len() < n {
            data.push(T::from_f64(0.02 * r * theta.sin()));
        }
    }
    Tensor::from_vec(shape, data).expect("shape/data consistent")
}
