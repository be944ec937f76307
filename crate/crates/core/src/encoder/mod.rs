//! Encoder stack over token sequences and the pairwise link classifier.

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurizer::{assemble_batch, default_time_freqs, Batch, ChannelConfig, TokenSequence};
use crate::rng::{Rng, SeedStream};
use crate::tensor::{load_checkpoint, save_checkpoint, ParamId, ParamStore, Tape, Tensor, Var};

pub const RMS_EPS: f64 = 1e-6;
pub const ROPE_BASE: f64 = 10000.0;
pub const LAMBDA_INIT: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    #[default]
    Differential,
    Standard,
}

/// Where rotary embeddings are applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RopeMode {
    /// Rotate per-head queries and keys in every layer.
    #[default]
    Qk,
    /// Rotate the projected token stream once before the first layer.
    Tokens,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_attn: usize,
    pub dropout: f64,
    pub attention: AttentionKind,
    pub rope: RopeMode,
    /// RMS-normalize each head's output before concatenation.
    pub head_norm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 2,
            d_attn: 45,
            dropout: 0.2,
            attention: AttentionKind::Differential,
            rope: RopeMode::Qk,
            head_norm: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.d_attn == 0 {
            return Err(Error::Config("layers, heads and d_attn must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    fn branches(&self) -> usize {
        match self.attention {
            AttentionKind::Differential => 2,
            AttentionKind::Standard => 1,
        }
    }

    /// Concatenated head width (each head's values are `2 * d_attn` wide).
    pub fn value_width(&self) -> usize {
        self.heads * 2 * self.d_attn
    }
}

/// Largest even width not exceeding `w`.
fn even_prefix(w: usize) -> usize {
    w - w % 2
}

/// Rotate pairs `(2i, 2i+1)` of every row by `positions[r] * 10000^(-2i/width)`.
pub fn rope_apply(x: &Tensor, positions: &[usize]) -> Result<Tensor> {
    let width = x.cols();
    if !width.is_multiple_of(2) {
        return Err(Error::Config(format!("rope width {width} is odd")));
    }
    if positions.len() != x.rows() {
        return Err(Error::Shape("rope_apply: one position per row required".into()));
    }
    let mut out = x.clone();
    crate::tensor::rope_rotate(out.data_mut(), width, positions, width, ROPE_BASE, false);
    Ok(out)
}

/// Attention maps of one head in one layer, for row-stacked sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub layer: usize,
    pub head: usize,
    /// Zero for standard attention.
    pub lambda: f64,
    pub seq_len: usize,
    /// `rows x seq_len` softmax maps; `a2` is absent for standard attention.
    pub a1: Tensor,
    pub a2: Option<Tensor>,
    /// `a1 - lambda * a2` (equal to `a1` for standard attention).
    pub b: Tensor,
    /// Row validity of the batch.
    pub valid: Vec<bool>,
}

#[derive(Debug, Clone)]
struct ChannelIds {
    node: Option<ParamId>,
    edge: Option<ParamId>,
    freqs: ParamId,
    time: ParamId,
    cooc_w: ParamId,
    cooc_b: ParamId,
    cooc: ParamId,
    spatial: ParamId,
}

#[derive(Debug, Clone)]
struct LayerIds {
    norm1: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    lambdas: Vec<ParamId>,
    norm2: ParamId,
    gate: ParamId,
    up: ParamId,
    down: ParamId,
}

#[derive(Debug, Clone)]
struct ClassifierIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Options for one forward pass.
#[derive(Default)]
pub struct Forward<'a> {
    /// Enables dropout when present.
    pub dropout_rng: Option<&'a mut Rng>,
    /// Capture attention maps.
    pub record: bool,
}

impl<'a> Forward<'a> {
    pub fn eval() -> Self {
        Self::default()
    }

    pub fn recording() -> Self {
        Self {
            dropout_rng: None,
            record: true,
        }
    }

    pub fn train(rng: &'a mut Rng) -> Self {
        Self {
            dropout_rng: Some(rng),
            record: false,
        }
    }
}

/// Learnable tensors of the channel projections, encoder layers and
/// classifier, together with their configuration.
#[derive(Debug, Clone)]
pub struct Model {
    pub channels: ChannelConfig,
    pub config: ModelConfig,
    node_dim: usize,
    edge_dim: usize,
    params: ParamStore,
    chan: ChannelIds,
    layers: Vec<LayerIds>,
    cls: ClassifierIds,
}

fn xavier(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
    Tensor::matrix(rows, cols, data).expect("shape")
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    channels: ChannelConfig,
    model: ModelConfig,
    node_dim: usize,
    edge_dim: usize,
    #[serde(default)]
    extra: serde_json::Value,
}

impl Model {
    pub fn new(
        channels: ChannelConfig,
        config: ModelConfig,
        node_dim: usize,
        edge_dim: usize,
        seeds: &SeedStream,
    ) -> Result<Self> {
        channels.validate()?;
        config.validate()?;
        let mut rng = seeds.rng("init");
        let mut p = ParamStore::new();
        let d = channels.d;
        let width = channels.token_width();
        let half_c = channels.d_c / 2;

        let chan = ChannelIds {
            node: (node_dim > 0).then(|| p.add("chan.node", xavier(&mut rng, node_dim, d))),
            edge: (edge_dim > 0).then(|| p.add("chan.edge", xavier(&mut rng, edge_dim, d))),
            freqs: p.add("chan.time_freqs", Tensor::row_vector(default_time_freqs(channels.d_t))),
            time: p.add("chan.time", xavier(&mut rng, channels.d_t, d)),
            cooc_w: p.add("chan.cooc_w", xavier(&mut rng, 1, half_c)),
            cooc_b: p.add("chan.cooc_b", Tensor::zeros(&[1, half_c])),
            cooc: p.add("chan.cooc", xavier(&mut rng, channels.d_c, d)),
            spatial: p.add("chan.spatial", xavier(&mut rng, channels.d_s, d)),
        };

        let qk_width = config.heads * config.branches() * config.d_attn;
        let vw = config.value_width();
        let hidden = 2 * width;
        let layers = (0..config.layers)
            .map(|l| LayerIds {
                norm1: p.add(format!("layer{l}.norm1"), Tensor::full(&[1, width], 1.0)),
                wq: p.add(format!("layer{l}.wq"), xavier(&mut rng, width, qk_width)),
                wk: p.add(format!("layer{l}.wk"), xavier(&mut rng, width, qk_width)),
                wv: p.add(format!("layer{l}.wv"), xavier(&mut rng, width, vw)),
                wo: p.add(format!("layer{l}.wo"), xavier(&mut rng, vw, width)),
                lambdas: match config.attention {
                    AttentionKind::Differential => (0..config.heads)
                        .map(|h| p.add(format!("layer{l}.lambda{h}"), Tensor::scalar(LAMBDA_INIT)))
                        .collect(),
                    AttentionKind::Standard => Vec::new(),
                },
                norm2: p.add(format!("layer{l}.norm2"), Tensor::full(&[1, width], 1.0)),
                gate: p.add(format!("layer{l}.ffn_gate"), xavier(&mut rng, width, hidden)),
                up: p.add(format!("layer{l}.ffn_up"), xavier(&mut rng, width, hidden)),
                down: p.add(format!("layer{l}.ffn_down"), xavier(&mut rng, hidden, width)),
            })
            .collect();

        let cls = ClassifierIds {
            w1: p.add("cls.w1", xavier(&mut rng, 2 * width, width)),
            b1: p.add("cls.b1", Tensor::zeros(&[1, width])),
            w2: p.add("cls.w2", xavier(&mut rng, width, 1)),
            b2: p.add("cls.b2", Tensor::scalar(0.0)),
        };

        Ok(Self {
            channels,
            config,
            node_dim,
            edge_dim,
            params: p,
            chan,
            layers,
            cls,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn node_dim(&self) -> usize {
        self.node_dim
    }

    pub fn edge_dim(&self) -> usize {
        self.edge_dim
    }

    /// Set a named parameter; panics on unknown names or wrong sizes.
    pub fn set_param(&mut self, name: &str, data: &[f64]) {
        let id = self.params.find(name).unwrap_or_else(|| panic!("no parameter {name}"));
        let t = self.params.get_mut(id);
        assert_eq!(t.len(), data.len(), "size of {name}");
        t.data_mut().copy_from_slice(data);
    }

    pub fn lambda(&self, layer: usize, head: usize) -> f64 {
        self.layers[layer]
            .lambdas
            .get(head)
            .map_or(0.0, |&id| self.params.get(id).data()[0])
    }

    pub fn save(&self, blob: &Path, extra: serde_json::Value) -> Result<()> {
        let meta = CheckpointMeta {
            channels: self.channels.clone(),
            model: self.config.clone(),
            node_dim: self.node_dim,
            edge_dim: self.edge_dim,
            extra,
        };
        save_checkpoint(&self.params, blob, serde_json::to_value(meta)?)
    }

    pub fn load(blob: &Path) -> Result<(Self, serde_json::Value)> {
        let (store, header) = load_checkpoint(blob)?;
        let meta: CheckpointMeta = serde_json::from_value(header.meta)
            .map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
        let mut model = Model::new(meta.channels, meta.model, meta.node_dim, meta.edge_dim, &SeedStream::new(0))?;
        if store.names() != model.params.names()
            || store.tensors().iter().zip(model.params.tensors()).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::Checkpoint("parameters do not match the stored configuration".into()));
        }
        model.params = store;
        Ok((model, meta.extra))
    }

    fn dropout(&self, tape: &mut Tape, x: Var, opts: &mut Forward) -> Result<Var> {
        let p = self.config.dropout;
        let Some(rng) = opts.dropout_rng.as_deref_mut() else {
            return Ok(x);
        };
        if p == 0.0 {
            return Ok(x);
        }
        let shape = tape.value(x).shape().to_vec();
        let n: usize = shape.iter().product();
        let keep = 1.0 / (1.0 - p);
        let mask = (0..n).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
        tape.mul_const(x, Tensor::new(shape, mask)?)
    }

    /// Project the raw channels of a batch to `rows x 5d` tokens.
    pub fn embed(&self, tape: &mut Tape, batch: &Batch) -> Result<Var> {
        if batch.cfg != self.channels || batch.node_dim != self.node_dim || batch.edge_dim != self.edge_dim {
            return Err(Error::Batch("batch does not match the model's channel configuration".into()));
        }
        let n = batch.rows();
        let d = self.channels.d;
        let p = &self.params;
        let project = |tape: &mut Tape, id: Option<ParamId>, raw: &[f64], w: usize| -> Result<Var> {
            match id {
                Some(id) => {
                    let x = tape.constant(Tensor::matrix(n, w, raw.to_vec())?);
                    let wv = tape.param(p, id);
                    tape.matmul(x, wv)
                }
                None => Ok(tape.constant(Tensor::zeros(&[n, d]))),
            }
        };
        let node = project(tape, self.chan.node, &batch.node_feat, self.node_dim)?;
        let edge = project(tape, self.chan.edge, &batch.edge_feat, self.edge_dim)?;
        let spatial = project(tape, Some(self.chan.spatial), &batch.spatial, self.channels.d_s)?;

        let freqs = tape.param(p, self.chan.freqs);
        let enc = tape.time_encode(freqs, batch.dt.clone(), batch.time_active.clone())?;
        let wt = tape.param(p, self.chan.time);
        let time = tape.matmul(enc, wt)?;

        let cw = tape.param(p, self.chan.cooc_w);
        let cb = tape.param(p, self.chan.cooc_b);
        let mut halves = Vec::with_capacity(2);
        for counts in [&batch.cooc_own, &batch.cooc_other] {
            let c = tape.constant(Tensor::matrix(n, 1, counts.clone())?);
            let h = tape.matmul(c, cw)?;
            let h = tape.add_row(h, cb)?;
            halves.push(tape.silu(h));
        }
        let cooc = tape.concat_cols(&halves)?;
        let dc = self.channels.d_c;
        let row_mask: Vec<f64> = batch
            .valid
            .iter()
            .flat_map(|&v| std::iter::repeat_n(if v { 1.0 } else { 0.0 }, dc))
            .collect();
        let cooc = tape.mul_const(cooc, Tensor::matrix(n, dc, row_mask)?)?;
        let wc = tape.param(p, self.chan.cooc);
        let cooc = tape.matmul(cooc, wc)?;

        let z = tape.concat_cols(&[node, edge, time, cooc, spatial])?;
        match self.config.rope {
            RopeMode::Tokens => tape.rope(z, batch.positions.clone(), even_prefix(5 * d), ROPE_BASE),
            RopeMode::Qk => Ok(z),
        }
    }

    /// The attention sublayer of `layer` applied to normalized tokens `h`.
    /// Returns the concatenated head outputs before the output projection.
    fn attention_heads(
        &self,
        tape: &mut Tape,
        layer: usize,
        h: Var,
        batch: &Batch,
        key_mask: &[bool],
        opts: &mut Forward,
        records: &mut Vec<AttentionRecord>,
    ) -> Result<Var> {
        let ids = &self.layers[layer];
        let p = &self.params;
        let da = self.config.d_attn;
        let nb = self.config.branches();
        let seg = batch.seq_len;
        let scale = 1.0 / (da as f64).sqrt();
        let rot = even_prefix(da);

        let wq = tape.param(p, ids.wq);
        let wk = tape.param(p, ids.wk);
        let wv = tape.param(p, ids.wv);
        let q = tape.matmul(h, wq)?;
        let k = tape.matmul(h, wk)?;
        let v = tape.matmul(h, wv)?;

        let mut heads = Vec::with_capacity(self.config.heads);
        for head in 0..self.config.heads {
            let vh = tape.slice_cols(v, head * 2 * da, 2 * da)?;
            let mut maps = Vec::with_capacity(nb);
            for branch in 0..nb {
                let off = (head * nb + branch) * da;
                let mut qb = tape.slice_cols(q, off, da)?;
                let mut kb = tape.slice_cols(k, off, da)?;
                if self.config.rope == RopeMode::Qk && rot > 0 {
                    qb = tape.rope(qb, batch.positions.clone(), rot, ROPE_BASE)?;
                    kb = tape.rope(kb, batch.positions.clone(), rot, ROPE_BASE)?;
                }
                let s = tape.seg_scores(qb, kb, seg, scale)?;
                maps.push(tape.softmax_rows(s, Some(key_mask))?);
            }
            let lambda = ids.lambdas.get(head).map(|&id| tape.param(p, id));
            if opts.record {
                let a1 = tape.value(maps[0]).clone();
                let a2 = maps.get(1).map(|&m| tape.value(m).clone());
                let lam = lambda.map_or(0.0, |l| tape.value(l).data()[0]);
                let b = match &a2 {
                    Some(a2) => {
                        let data = a1.data().iter().zip(a2.data()).map(|(x, y)| x - lam * y).collect();
                        Tensor::new(a1.shape().to_vec(), data)?
                    }
                    None => a1.clone(),
                };
                records.push(AttentionRecord {
                    layer,
                    head,
                    lambda: lam,
                    seq_len: seg,
                    a1,
                    a2,
                    b,
                    valid: batch.valid.clone(),
                });
            }
            let a1 = self.dropout(tape, maps[0], opts)?;
            let mut out = tape.seg_apply(a1, vh, seg)?;
            if let (Some(&m2), Some(lam)) = (maps.get(1), lambda) {
                let a2 = self.dropout(tape, m2, opts)?;
                let o2 = tape.seg_apply(a2, vh, seg)?;
                let o2 = tape.scale_var(o2, lam)?;
                out = tape.sub(out, o2)?;
            }
            if self.config.head_norm {
                out = tape.rms_norm(out, None, RMS_EPS)?;
            }
            heads.push(out);
        }
        tape.concat_cols(&heads)
    }

    /// One pre-norm layer: attention then SwiGLU, each with a residual.
    fn layer(
        &self,
        tape: &mut Tape,
        layer: usize,
        z: Var,
        batch: &Batch,
        key_mask: &[bool],
        opts: &mut Forward,
        records: &mut Vec<AttentionRecord>,
    ) -> Result<Var> {
        let ids = &self.layers[layer];
        let p = &self.params;
        let g1 = tape.param(p, ids.norm1);
        let h = tape.rms_norm(z, Some(g1), RMS_EPS)?;
        let heads = self.attention_heads(tape, layer, h, batch, key_mask, opts, records)?;
        let wo = tape.param(p, ids.wo);
        let a = tape.matmul(heads, wo)?;
        let a = self.dropout(tape, a, opts)?;
        let z = tape.add(z, a)?;

        let g2 = tape.param(p, ids.norm2);
        let h = tape.rms_norm(z, Some(g2), RMS_EPS)?;
        let wg = tape.param(p, ids.gate);
        let wu = tape.param(p, ids.up);
        let wd = tape.param(p, ids.down);
        let gate = tape.matmul(h, wg)?;
        let gate = tape.silu(gate);
        let up = tape.matmul(h, wu)?;
        let f = tape.mul(gate, up)?;
        let f = tape.matmul(f, wd)?;
        let f = self.dropout(tape, f, opts)?;
        tape.add(z, f)
    }

    /// Token representations after every layer (`rows x 5d`).
    pub fn encode_tokens(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        opts: &mut Forward,
        records: &mut Vec<AttentionRecord>,
    ) -> Result<Var> {
        let key_mask = batch.key_mask();
        let mut z = self.embed(tape, batch)?;
        for l in 0..self.config.layers {
            z = self.layer(tape, l, z, batch, &key_mask, opts, records)?;
        }
        Ok(z)
    }

    /// Mean-pooled embeddings, one row per sequence.
    pub fn encode(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        opts: &mut Forward,
        records: &mut Vec<AttentionRecord>,
    ) -> Result<Var> {
        let z = self.encode_tokens(tape, batch, opts, records)?;
        tape.seg_mean(z, batch.seq_len, &batch.valid)
    }

    /// Link probabilities (`n x 1`) from source and destination embeddings.
    pub fn classify(&self, tape: &mut Tape, yu: Var, yv: Var) -> Result<Var> {
        let p = &self.params;
        let x = tape.concat_cols(&[yu, yv])?;
        let w1 = tape.param(p, self.cls.w1);
        let b1 = tape.param(p, self.cls.b1);
        let w2 = tape.param(p, self.cls.w2);
        let b2 = tape.param(p, self.cls.b2);
        let h = tape.matmul(x, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.silu(h);
        let logit = tape.matmul(h, w2)?;
        let logit = tape.add_row(logit, b2)?;
        Ok(tape.sigmoid(logit))
    }

    /// Probabilities for a list of `(source, destination)` sequence pairs.
    pub fn forward_pairs(
        &self,
        tape: &mut Tape,
        pairs: &[(TokenSequence, TokenSequence)],
        opts: &mut Forward,
        records: &mut Vec<AttentionRecord>,
    ) -> Result<Var> {
        let n = pairs.len();
        let seqs: Vec<&TokenSequence> = pairs.iter().map(|p| &p.0).chain(pairs.iter().map(|p| &p.1)).collect();
        let batch = assemble_batch(&seqs)?;
        let y = self.encode(tape, &batch, opts, records)?;
        let yu = tape.slice_rows(y, 0, n)?;
        let yv = tape.slice_rows(y, n, n)?;
        self.classify(tape, yu, yv)
    }

    /// Evaluation-mode probabilities, processed in chunks.
    pub fn score_pairs(&self, pairs: &[(TokenSequence, TokenSequence)]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(pairs.len());
        for chunk in pairs.chunks(256) {
            let mut tape = Tape::new();
            let p = self.forward_pairs(&mut tape, chunk, &mut Forward::eval(), &mut Vec::new())?;
            out.extend_from_slice(tape.value(p).data());
        }
        Ok(out)
    }

    /// Evaluation-mode pooled embedding of one sequence.
    pub fn encode_node(&self, seq: &TokenSequence) -> Result<Vec<f64>> {
        let batch = assemble_batch(&[seq])?;
        let mut tape = Tape::new();
        let y = self.encode(&mut tape, &batch, &mut Forward::eval(), &mut Vec::new())?;
        Ok(tape.value(y).data().to_vec())
    }

    /// Pooled embeddings and attention maps for a set of sequences.
    pub fn encode_with_records(&self, seqs: &[&TokenSequence]) -> Result<(Tensor, Vec<AttentionRecord>)> {
        let batch = assemble_batch(seqs)?;
        let mut tape = Tape::new();
        let mut records = Vec::new();
        let y = self.encode(&mut tape, &batch, &mut Forward::recording(), &mut records)?;
        Ok((tape.value(y).clone(), records))
    }

    /// One attention sublayer on explicit tokens `z` (`rows x 5d`): returns
    /// the head outputs before and after the output projection, plus maps.
    /// No normalization is applied to `z`.
    pub fn diff_attention(
        &self,
        layer: usize,
        z: &Tensor,
        batch: &Batch,
    ) -> Result<(Tensor, Tensor, Vec<AttentionRecord>)> {
        if z.cols() != self.channels.token_width() || z.rows() != batch.rows() {
            return Err(Error::Config(format!(
                "tokens {:?} do not match width {} and {} rows",
                z.shape(),
                self.channels.token_width(),
                batch.rows()
            )));
        }
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let mut records = Vec::new();
        let key_mask = batch.key_mask();
        let heads = self.attention_heads(&mut tape, layer, zv, batch, &key_mask, &mut Forward::recording(), &mut records)?;
        let wo = tape.param(&self.params, self.layers[layer].wo);
        let out = tape.matmul(heads, wo)?;
        Ok((tape.value(heads).clone(), tape.value(out).clone(), records))
    }

    /// One full layer on explicit tokens `z`.
    pub fn encoder_layer(&self, layer: usize, z: &Tensor, batch: &Batch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let out = self.layer(&mut tape, layer, zv, batch, &batch.key_mask(), &mut Forward::eval(), &mut Vec::new())?;
        Ok(tape.value(out).clone())
    }

    /// Mean BCE over labelled pairs, recorded on `tape`.
    pub fn loss(
        &self,
        tape: &mut Tape,
        pairs: &[(TokenSequence, TokenSequence)],
        labels: &[f64],
        opts: &mut Forward,
    ) -> Result<Var> {
        let p = self.forward_pairs(tape, pairs, opts, &mut Vec::new())?;
        tape.bce(p, labels.to_vec())
    }
}
