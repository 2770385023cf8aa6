use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{DetectorConfig, MocaMode};
use super::params::{Init, ParamSet};
use crate::autodiff::{Tape, Tensor, Var, LAYERNORM_EPS};
use crate::error::{ensure, Error, Result};

/// Initial class-logit bias, `−ln((1 − π)/π)` for prior `π = 0.01`.
pub const CLASS_PRIOR_BIAS: f64 = -4.59511985013459;

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct AttnIdx {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct MlpIdx {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct EncIdx {
    attn: AttnIdx,
    ffn: MlpIdx,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct DecIdx {
    self_attn: AttnIdx,
    cross_attn: AttnIdx,
    ffn: MlpIdx,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Layout {
    patch_w: usize,
    patch_b: usize,
    enc: Vec<EncIdx>,
    query_content: usize,
    query_pos: usize,
    f_theta: usize,
    dec: Vec<DecIdx>,
    cls_w: usize,
    cls_b: usize,
    box_mlp: MlpIdx,
}

fn push_attn(p: &mut ParamSet, prefix: &str, d: usize, rng: &mut ChaCha8Rng) -> AttnIdx {
    let mut w = |n: &str| p.push(format!("{prefix}.{n}"), d, d, Init::Xavier, rng);
    let wq = w("wq");
    let wk = w("wk");
    let wv = w("wv");
    let wo = w("wo");
    let mut b = |n: &str| p.push(format!("{prefix}.{n}"), 1, d, Init::Zeros, rng);
    AttnIdx {
        wq,
        bq: b("bq"),
        wk,
        bk: b("bk"),
        wv,
        bv: b("bv"),
        wo,
        bo: b("bo"),
    }
}

fn push_mlp(
    p: &mut ParamSet,
    prefix: &str,
    d_in: usize,
    hidden: usize,
    d_out: usize,
    rng: &mut ChaCha8Rng,
) -> MlpIdx {
    MlpIdx {
        w1: p.push(format!("{prefix}.w1"), d_in, hidden, Init::Xavier, rng),
        b1: p.push(format!("{prefix}.b1"), 1, hidden, Init::Zeros, rng),
        w2: p.push(format!("{prefix}.w2"), hidden, d_out, Init::Xavier, rng),
        b2: p.push(format!("{prefix}.b2"), 1, d_out, Init::Zeros, rng),
    }
}

/// Builds the parameter table in its canonical order:
///
/// | group | names |
/// |---|---|
/// | backbone | `backbone.patch.weight [P²×d]`, `backbone.patch.bias [1×d]` |
/// | encoder `i` | `encoder.i.attn.{wq,wk,wv,wo} [d×d]`, `.{bq,bk,bv,bo} [1×d]`, `encoder.i.ffn.{w1 [d×F], b1 [1×F], w2 [F×d], b2 [1×d]}` |
/// | queries | `query.content [N×d]`, `query.pos [N×d]` |
/// | token | `moca.f_theta [d×d]` |
/// | decoder `l` | `decoder.l.self_attn.*`, `decoder.l.cross_attn.*`, `decoder.l.ffn.*` as above |
/// | heads | `head.class.weight [d×C]`, `head.class.bias [1×C]`, `head.box.{w1 [d×d], b1, w2 [d×4], b2 [1×4]}` |
///
/// Within an attention block the order is `wq wk wv wo bq bk bv bo`.
pub(crate) fn build(config: &DetectorConfig, rng: &mut ChaCha8Rng) -> (ParamSet, Layout) {
    let d = config.d_model;
    let p2 = config.patch_size * config.patch_size;
    let mut p = ParamSet::new();
    let patch_w = p.push("backbone.patch.weight", p2, d, Init::Xavier, rng);
    let patch_b = p.push("backbone.patch.bias", 1, d, Init::Zeros, rng);
    let enc = (0..config.encoder_layers)
        .map(|i| EncIdx {
            attn: push_attn(&mut p, &format!("encoder.{i}.attn"), d, rng),
            ffn: push_mlp(&mut p, &format!("encoder.{i}.ffn"), d, config.ffn_dim, d, rng),
        })
        .collect();
    let query_content = p.push("query.content", config.num_queries, d, Init::Normal(1.0), rng);
    let query_pos = p.push("query.pos", config.num_queries, d, Init::Normal(1.0), rng);
    let f_theta = p.push("moca.f_theta", d, d, Init::Xavier, rng);
    let dec = (0..config.decoder_layers)
        .map(|l| DecIdx {
            self_attn: push_attn(&mut p, &format!("decoder.{l}.self_attn"), d, rng),
            cross_attn: push_attn(&mut p, &format!("decoder.{l}.cross_attn"), d, rng),
            ffn: push_mlp(&mut p, &format!("decoder.{l}.ffn"), d, config.ffn_dim, d, rng),
        })
        .collect();
    let cls_w = p.push("head.class.weight", d, config.num_classes, Init::Xavier, rng);
    let cls_b = p.push(
        "head.class.bias",
        1,
        config.num_classes,
        Init::Constant(CLASS_PRIOR_BIAS),
        rng,
    );
    let box_mlp = push_mlp(&mut p, "head.box", d, d, 4, rng);
    let layout = Layout {
        patch_w,
        patch_b,
        enc,
        query_content,
        query_pos,
        f_theta,
        dec,
        cls_w,
        cls_b,
        box_mlp,
    };
    (p, layout)
}

/// Fixed 2D sine/cosine encoding for a `gh × gw` grid, row-major. The first
/// half of the channels encodes the row, the second half the column.
pub fn sine_position_encoding(gh: usize, gw: usize, d_model: usize) -> Result<Tensor> {
    ensure!(
        d_model % 4 == 0 && d_model > 0,
        Dimension,
        "positional encoding needs d_model divisible by 4, got {d_model}"
    );
    let half = d_model / 2;
    let mut data = Vec::with_capacity(gh * gw * d_model);
    let enc = |pos: f64, out: &mut Vec<f64>| {
        for i in 0..half / 2 {
            let freq = 10000f64.powf(2.0 * i as f64 / half as f64);
            out.push((pos / freq).sin());
            out.push((pos / freq).cos());
        }
    };
    for r in 0..gh {
        for c in 0..gw {
            enc((r as f64 + 0.5) / gh as f64 * 2.0 * PI, &mut data);
            enc((c as f64 + 0.5) / gw as f64 * 2.0 * PI, &mut data);
        }
    }
    Tensor::matrix(gh * gw, d_model, data)
}

/// Non-overlapping `p × p` patches as rows (row-major over the patch grid,
/// pixels row-major within a patch).
pub fn extract_patches(image: &Tensor, p: usize) -> Result<Tensor> {
    let (h, w) = image.dims();
    ensure!(
        p > 0 && h % p == 0 && w % p == 0,
        Dimension,
        "image {h}x{w} not divisible by patch size {p}"
    );
    let (gh, gw) = (h / p, w / p);
    let x = image.data();
    let mut data = Vec::with_capacity(h * w);
    for gr in 0..gh {
        for gc in 0..gw {
            for i in 0..p {
                let start = (gr * p + i) * w + gc * p;
                data.extend_from_slice(&x[start..start + p]);
            }
        }
    }
    Tensor::matrix(gh * gw, p * p, data)
}

/// Parameters of one attention block as tape variables.
#[derive(Clone, Copy, Debug)]
pub struct AttnVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

impl AttnVars {
    fn from(idx: AttnIdx, v: &[Var]) -> Self {
        Self {
            wq: v[idx.wq],
            bq: v[idx.bq],
            wk: v[idx.wk],
            bk: v[idx.bk],
            wv: v[idx.wv],
            bv: v[idx.bv],
            wo: v[idx.wo],
            bo: v[idx.bo],
        }
    }
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

fn mlp(tape: &mut Tape, x: Var, v: &[Var], idx: MlpIdx) -> Result<Var> {
    let h = linear(tape, x, v[idx.w1], v[idx.b1])?;
    let h = tape.relu(h);
    linear(tape, h, v[idx.w2], v[idx.b2])
}

/// Multi-head scaled dot-product attention. `mask` flags key rows whose
/// attention weight is forced to zero. Returns the output (`rows(q_src) × d`)
/// and the per-head attention matrices.
pub fn multi_head_attention(
    tape: &mut Tape,
    p: &AttnVars,
    q_src: Var,
    k_src: Var,
    v_src: Var,
    heads: usize,
    mask: Option<&[bool]>,
) -> Result<(Var, Vec<Var>)> {
    let d = tape.dims(q_src).1;
    ensure!(heads >= 1 && d % heads == 0, Dimension, "d={d} heads={heads}");
    let dk = d / heads;
    let q = linear(tape, q_src, p.wq, p.bq)?;
    let k = linear(tape, k_src, p.wk, p.bk)?;
    let v = linear(tape, v_src, p.wv, p.bv)?;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dk, dk)?;
        let kh = tape.slice_cols(k, h * dk, dk)?;
        let vh = tape.slice_cols(v, h * dk, dk)?;
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt)?;
        let a = tape.masked_softmax_rows(scores, scale, mask)?;
        outs.push(tape.matmul(a, vh)?);
        weights.push(a);
    }
    let cat = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    Ok((linear(tape, cat, p.wo, p.bo)?, weights))
}

/// Augmented query set `[q_1 … q_N; t]`: the token row goes last.
pub fn moca_augment(tape: &mut Tape, q: Var, token_row: Var) -> Result<Var> {
    let (_, d) = tape.dims(q);
    let (r, c) = tape.dims(token_row);
    ensure!(r == 1 && c == d, Dimension, "token row {r}x{c} vs query width {d}");
    tape.concat_rows(&[q, token_row])
}

/// Detector parameters placed on one tape.
#[derive(Clone, Debug)]
pub struct BoundDetector {
    pub vars: Vec<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerOutput {
    /// `N × C` class logits.
    pub logits: Var,
    /// `N × 4` sigmoid boxes, `cxcywh`.
    pub boxes: Var,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `Q^(1) … Q^(k+1)` for the `k` decoder layers that ran.
    pub states: Vec<Var>,
    /// Per-layer predictions from the shared heads (empty when heads are off).
    pub layers: Vec<LayerOutput>,
    /// Projected token row `f_θ(m)`, when MoCA is active.
    pub token_row: Option<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    pub mode: MocaMode,
    /// Number of decoder layers to run (all when `None`).
    pub layers: Option<usize>,
    pub heads: bool,
}

impl ForwardOptions {
    pub fn full(mode: MocaMode) -> Self {
        Self {
            mode,
            layers: None,
            heads: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detector {
    config: DetectorConfig,
    params: ParamSet,
    layout: Layout,
}

impl Detector {
    pub fn init(config: DetectorConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let (params, layout) = build(&config, rng);
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    /// Rebuilds a detector from tensors listed in canonical order.
    pub fn from_tensors(config: DetectorConfig, names: &[String], tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (mut params, layout) = build(&config, &mut rng);
        if names != params.names() {
            return Err(Error::Checkpoint(format!(
                "parameter table does not match config ({} names vs {} expected)",
                names.len(),
                params.len()
            )));
        }
        params
            .assign(tensors)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Default mode from the config flag.
    pub fn default_mode(&self) -> MocaMode {
        if self.config.moca {
            MocaMode::On
        } else {
            MocaMode::Off
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundDetector {
        BoundDetector {
            vars: self.params.bind(tape, trainable),
        }
    }

    #[cfg(test)]
    pub(crate) fn f_theta_index(&self) -> usize {
        self.layout.f_theta
    }

    pub(crate) fn layout_query_content(&self) -> usize {
        self.layout.query_content
    }

    /// Patch embedding plus positional encoding, then the encoder layers.
    pub fn memory(&self, tape: &mut Tape, b: &BoundDetector, image: &Tensor) -> Result<Var> {
        let p = self.config.patch_size;
        let d = self.config.d_model;
        let patches = extract_patches(image, p)?;
        let (gh, gw) = (image.rows() / p, image.cols() / p);
        let x = tape.constant(patches);
        let v = &b.vars;
        let emb = linear(tape, x, v[self.layout.patch_w], v[self.layout.patch_b])?;
        let pe = tape.constant(sine_position_encoding(gh, gw, d)?);
        let mut m = tape.add(emb, pe)?;
        for e in &self.layout.enc {
            let a = AttnVars::from(e.attn, v);
            let (att, _) = multi_head_attention(tape, &a, m, m, m, self.config.heads, None)?;
            let r = tape.add(m, att)?;
            let m1 = tape.layernorm_rows(r, LAYERNORM_EPS);
            let f = mlp(tape, m1, v, e.ffn)?;
            let r = tape.add(m1, f)?;
            m = tape.layernorm_rows(r, LAYERNORM_EPS);
        }
        Ok(m)
    }

    /// `f_θ(m)` for a `1 × d_model` token.
    pub fn project_token_row(&self, tape: &mut Tape, b: &BoundDetector, token: Var) -> Result<Var> {
        let (r, c) = tape.dims(token);
        ensure!(
            r == 1 && c == self.config.d_model,
            Dimension,
            "token must be 1x{}, got {r}x{c}",
            self.config.d_model
        );
        tape.matmul(token, b.vars[self.layout.f_theta])
    }

    /// One decoder layer: augmented self-attention (token row appended when
    /// `token_row` is given), first-`N` row slice, residual, norm; then
    /// cross-attention and FFN blocks.
    pub fn decoder_layer(
        &self,
        tape: &mut Tape,
        b: &BoundDetector,
        layer: usize,
        q: Var,
        memory: Var,
        token_row: Option<Var>,
        mask_token: bool,
    ) -> Result<Var> {
        let v = &b.vars;
        let idx = self.layout.dec[layer];
        let n = self.config.num_queries;
        let qpos = v[self.layout.query_pos];
        let with_pos = tape.add(q, qpos)?;
        let sa = AttnVars::from(idx.self_attn, v);
        let msa = match token_row {
            Some(t) => {
                // The token's positional slot is zero, so it enters the
                // query/key input as-is.
                let qk = moca_augment(tape, with_pos, t)?;
                let vals = moca_augment(tape, q, t)?;
                let mut mask = vec![false; n + 1];
                mask[n] = mask_token;
                let mask = mask_token.then_some(mask.as_slice());
                let (out, _) = multi_head_attention(tape, &sa, qk, qk, vals, self.config.heads, mask)?;
                tape.slice_rows(out, 0, n)?
            }
            None => {
                let (out, _) =
                    multi_head_attention(tape, &sa, with_pos, with_pos, q, self.config.heads, None)?;
                out
            }
        };
        let r = tape.add(q, msa)?;
        let q1 = tape.layernorm_rows(r, LAYERNORM_EPS);

        let ca = AttnVars::from(idx.cross_attn, v);
        let q1p = tape.add(q1, qpos)?;
        let (cross, _) = multi_head_attention(tape, &ca, q1p, memory, memory, self.config.heads, None)?;
        let r = tape.add(q1, cross)?;
        let q2 = tape.layernorm_rows(r, LAYERNORM_EPS);

        let f = mlp(tape, q2, v, idx.ffn)?;
        let r = tape.add(q2, f)?;
        Ok(tape.layernorm_rows(r, LAYERNORM_EPS))
    }

    /// Shared class and box heads on one query state.
    pub fn heads(&self, tape: &mut Tape, b: &BoundDetector, q: Var) -> Result<LayerOutput> {
        let v = &b.vars;
        let logits = linear(tape, q, v[self.layout.cls_w], v[self.layout.cls_b])?;
        let raw = mlp(tape, q, v, self.layout.box_mlp)?;
        let boxes = tape.sigmoid(raw);
        Ok(LayerOutput { logits, boxes })
    }

    /// Full forward. `token` is the projected modality token `m` (`1 × d`);
    /// it is required unless the mode is [`MocaMode::Off`].
    pub fn forward(
        &self,
        tape: &mut Tape,
        b: &BoundDetector,
        image: &Tensor,
        token: Option<Var>,
        opts: ForwardOptions,
    ) -> Result<ForwardOutput> {
        let n_layers = opts.layers.unwrap_or(self.config.decoder_layers);
        ensure!(
            n_layers <= self.config.decoder_layers,
            Contract,
            "asked for {n_layers} of {} decoder layers",
            self.config.decoder_layers
        );
        let memory = self.memory(tape, b, image)?;
        let token_row = match opts.mode {
            MocaMode::Off => None,
            MocaMode::On | MocaMode::MaskedToken => {
                let t = token.ok_or_else(|| {
                    Error::Contract("MoCA is enabled but no modality token was given".into())
                })?;
                Some(self.project_token_row(tape, b, t)?)
            }
        };
        let mask = opts.mode == MocaMode::MaskedToken;
        let mut q = b.vars[self.layout.query_content];
        let mut states = vec![q];
        let mut layers = Vec::new();
        for l in 0..n_layers {
            q = self.decoder_layer(tape, b, l, q, memory, token_row, mask)?;
            states.push(q);
            if opts.heads {
                layers.push(self.heads(tape, b, q)?);
            }
        }
        Ok(ForwardOutput {
            states,
            layers,
            token_row,
        })
    }

    /// Final-layer class probabilities (`N × C`) and boxes (`N × 4`) without
    /// gradient tracking.
    pub fn predict(&self, image: &Tensor, token: Option<&Tensor>, mode: MocaMode) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let t = token.map(|t| tape.constant(t.clone()));
        let out = self.forward(&mut tape, &b, image, t, ForwardOptions::full(mode))?;
        let last = out.layers.last().expect("at least two decoder layers");
        let probs = tape.sigmoid(last.logits);
        Ok((tape.value(probs).clone(), tape.value(last.boxes).clone()))
    }
}
