//! Mean-pool + per-step projection autoregressive scorer with exact gradients.
//!
//! For a history `x` and a code prefix `y^{<t}` the step-`t` logits are
//!
//! ```text
//! u_t      = mean(item_embed[x]) + sum_{j<t} token_embed_j[y^j]
//! hidden_t = tanh(step_proj_t . u_t)
//! z_t      = hidden_t . output_proj_t + bias_t
//! ```
//!
//! and token scores are the log-softmax of `z_t` over level `t`'s vocabulary.

use std::fs;
use std::io::{Read, Write};
use std::ops::{Deref, DerefMut};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numeric::log_softmax;
use crate::tokenizer::TokenizedCatalog;

const CHECKPOINT_MAGIC: &[u8; 8] = b"GRECCKPT";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dim: usize,
    pub num_items: usize,
    pub vocab_sizes: Vec<usize>,
    /// `num_items x dim`
    pub item_embed: Vec<f64>,
    /// per level, `vocab_t x dim`
    pub token_embed: Vec<Vec<f64>>,
    /// per level, `dim x dim` (output index major)
    pub step_proj: Vec<Vec<f64>>,
    /// per level, `dim x vocab_t`
    pub output_proj: Vec<Vec<f64>>,
    /// per level, `vocab_t`
    pub bias: Vec<Vec<f64>>,
}

/// A named view of one parameter tensor.
#[derive(Debug)]
pub struct TensorView<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

impl ModelParams {
    pub fn zeros(num_items: usize, vocab_sizes: &[usize], dim: usize) -> Self {
        Self {
            dim,
            num_items,
            vocab_sizes: vocab_sizes.to_vec(),
            item_embed: vec![0.0; num_items * dim],
            token_embed: vocab_sizes.iter().map(|&v| vec![0.0; v * dim]).collect(),
            step_proj: vocab_sizes.iter().map(|_| vec![0.0; dim * dim]).collect(),
            output_proj: vocab_sizes.iter().map(|&v| vec![0.0; dim * v]).collect(),
            bias: vocab_sizes.iter().map(|&v| vec![0.0; v]).collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.num_items, &self.vocab_sizes, self.dim)
    }

    pub fn depth(&self) -> usize {
        self.vocab_sizes.len()
    }

    pub fn tensors(&self) -> Vec<TensorView<'_>> {
        let d = self.dim;
        let mut out = vec![TensorView {
            name: "item_embed".into(),
            shape: vec![self.num_items, d],
            data: &self.item_embed,
        }];
        for (t, &v) in self.vocab_sizes.iter().enumerate() {
            out.push(TensorView { name: format!("token_embed.{t}"), shape: vec![v, d], data: &self.token_embed[t] });
            out.push(TensorView { name: format!("step_proj.{t}"), shape: vec![d, d], data: &self.step_proj[t] });
            out.push(TensorView { name: format!("output_proj.{t}"), shape: vec![d, v], data: &self.output_proj[t] });
            out.push(TensorView { name: format!("bias.{t}"), shape: vec![v], data: &self.bias[t] });
        }
        out
    }

    /// Mutable slices in the same order as [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![&mut self.item_embed];
        for (((tok, proj), outp), b) in self
            .token_embed
            .iter_mut()
            .zip(self.step_proj.iter_mut())
            .zip(self.output_proj.iter_mut())
            .zip(self.bias.iter_mut())
        {
            out.push(tok);
            out.push(proj);
            out.push(outp);
            out.push(b);
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Mean of the history's item embeddings.
    pub fn pooled_history(&self, history: &[u32]) -> Result<Vec<f64>> {
        if history.is_empty() {
            return Err(Error::Data("empty history".into()));
        }
        let d = self.dim;
        let mut pooled = vec![0.0; d];
        for &item in history {
            let item = item as usize;
            if item >= self.num_items {
                return Err(Error::Data(format!("history item {item} outside catalog of {}", self.num_items)));
            }
            for (p, e) in pooled.iter_mut().zip(&self.item_embed[item * d..(item + 1) * d]) {
                *p += e;
            }
        }
        let scale = 1.0 / history.len() as f64;
        pooled.iter_mut().for_each(|p| *p *= scale);
        Ok(pooled)
    }

    /// `u + token_embed_t[code]`, the step input after committing `code` at level `t`.
    pub fn extend_input(&self, u: &[f64], t: usize, code: u32) -> Vec<f64> {
        let d = self.dim;
        let row = &self.token_embed[t][code as usize * d..(code as usize + 1) * d];
        u.iter().zip(row).map(|(a, b)| a + b).collect()
    }

    /// Hidden state and logits at step `t` for step input `u`.
    pub fn step(&self, t: usize, u: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim;
        let proj = &self.step_proj[t];
        let hidden: Vec<f64> = (0..d)
            .map(|i| {
                let row = &proj[i * d..(i + 1) * d];
                row.iter().zip(u).map(|(p, x)| p * x).sum::<f64>().tanh()
            })
            .collect();
        let v = self.vocab_sizes[t];
        let w = &self.output_proj[t];
        let mut logits = self.bias[t].clone();
        for (k, &h) in hidden.iter().enumerate() {
            if h == 0.0 {
                continue;
            }
            for (z, wk) in logits.iter_mut().zip(&w[k * v..(k + 1) * v]) {
                *z += h * wk;
            }
        }
        (hidden, logits)
    }

    /// Log-probabilities over level `t`'s vocabulary.
    pub fn step_log_probs(&self, t: usize, u: &[f64]) -> Vec<f64> {
        log_softmax(&self.step(t, u).1)
    }
}

/// Parameters drawn from `U(-1/sqrt(d), 1/sqrt(d))`, deterministic per seed.
pub fn init_params(catalog: &TokenizedCatalog, dim: usize, seed: u64) -> Result<ModelParams> {
    if dim == 0 {
        return Err(Error::Config("model.dim must be >= 1".into()));
    }
    let mut params = ModelParams::zeros(catalog.num_items(), catalog.vocab_sizes(), dim);
    let bound = 1.0 / (dim as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for tensor in params.tensors_mut() {
        for x in tensor.iter_mut() {
            *x = rng.random_range(-bound..bound);
        }
    }
    Ok(params)
}

/// Everything the backward pass needs from one teacher-forced forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub history: Vec<u32>,
    pub codes: Vec<u32>,
    pub pooled: Vec<f64>,
    /// step inputs `u_t`
    pub inputs: Vec<Vec<f64>>,
    pub hidden: Vec<Vec<f64>>,
    pub logits: Vec<Vec<f64>>,
    pub log_probs: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn depth(&self) -> usize {
        self.codes.len()
    }

    /// Log-probability of the conditioning code at every step.
    pub fn token_scores(&self) -> Vec<f64> {
        self.codes
            .iter()
            .zip(&self.log_probs)
            .map(|(&c, lp)| lp[c as usize])
            .collect()
    }
}

fn check_codes(params: &ModelParams, codes: &[u32]) -> Result<()> {
    if codes.len() != params.depth() {
        return Err(Error::Data(format!("expected {} codes, got {}", params.depth(), codes.len())));
    }
    for (t, (&c, &v)) in codes.iter().zip(&params.vocab_sizes).enumerate() {
        if c as usize >= v {
            return Err(Error::Data(format!("code {c} at level {} outside vocab {v}", t + 1)));
        }
    }
    Ok(())
}

/// Teacher-forced forward pass over all `T` steps.
pub fn forward(params: &ModelParams, history: &[u32], codes: &[u32]) -> Result<ForwardTrace> {
    let pooled = params.pooled_history(history)?;
    forward_pooled(params, history, &pooled, codes)
}

/// Forward pass reusing an already pooled history (shared across candidates).
pub fn forward_pooled(params: &ModelParams, history: &[u32], pooled: &[f64], codes: &[u32]) -> Result<ForwardTrace> {
    check_codes(params, codes)?;
    let depth = params.depth();
    let mut inputs = Vec::with_capacity(depth);
    let mut hidden = Vec::with_capacity(depth);
    let mut logits = Vec::with_capacity(depth);
    let mut log_probs = Vec::with_capacity(depth);
    let mut u = pooled.to_vec();
    for t in 0..depth {
        let (h, z) = params.step(t, &u);
        log_probs.push(log_softmax(&z));
        hidden.push(h);
        logits.push(z);
        let next = if t + 1 < depth { Some(params.extend_input(&u, t, codes[t])) } else { None };
        inputs.push(u);
        if let Some(n) = next {
            u = n;
        } else {
            break;
        }
    }
    Ok(ForwardTrace {
        history: history.to_vec(),
        codes: codes.to_vec(),
        pooled: pooled.to_vec(),
        inputs,
        hidden,
        logits,
        log_probs,
    })
}

/// Accumulated `dL/dtheta`, shaped like [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub ModelParams);

impl Deref for Gradients {
    type Target = ModelParams;
    fn deref(&self) -> &ModelParams {
        &self.0
    }
}

impl DerefMut for Gradients {
    fn deref_mut(&mut self) -> &mut ModelParams {
        &mut self.0
    }
}

impl Gradients {
    pub fn zeros_for(params: &ModelParams) -> Self {
        Self(params.zeros_like())
    }

    pub fn zero(&mut self) {
        for t in self.0.tensors_mut() {
            t.fill(0.0);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.0.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.0
            .tensors()
            .iter()
            .flat_map(|t| t.data.iter())
            .fold(0.0, |m, x| m.max(x.abs()))
    }
}

fn check_trace(params: &ModelParams, trace: &ForwardTrace) -> Result<()> {
    if trace.depth() != params.depth() || trace.hidden.len() != params.depth() {
        return Err(Error::Contract(format!(
            "trace covers {} steps, model has {}",
            trace.hidden.len(),
            params.depth()
        )));
    }
    Ok(())
}

/// Backward pass for one step's logit gradient `dz`; adds the gradient that
/// reaches the pooled history into `dpooled`.
fn backward_step(
    params: &ModelParams,
    trace: &ForwardTrace,
    t: usize,
    dz: &[f64],
    grads: &mut ModelParams,
    dpooled: &mut [f64],
) {
    let d = params.dim;
    let du = step_backward(params, t, &trace.hidden[t], &trace.inputs[t], dz, grads);
    for (p, g) in dpooled.iter_mut().zip(&du) {
        *p += g;
    }
    for j in 0..t {
        let c = trace.codes[j] as usize;
        for (e, g) in grads.token_embed[j][c * d..(c + 1) * d].iter_mut().zip(&du) {
            *e += g;
        }
    }
}

/// Gradients of one step's parameters; returns `dL/du_t`.
fn step_backward(params: &ModelParams, t: usize, hidden: &[f64], u: &[f64], dz: &[f64], grads: &mut ModelParams) -> Vec<f64> {
    let d = params.dim;
    let v = params.vocab_sizes[t];
    let w = &params.output_proj[t];

    let mut da = vec![0.0; d];
    {
        let gw = &mut grads.output_proj[t];
        for k in 0..d {
            let wk = &w[k * v..(k + 1) * v];
            let gk = &mut gw[k * v..(k + 1) * v];
            let hk = hidden[k];
            let mut dh = 0.0;
            for j in 0..v {
                dh += wk[j] * dz[j];
                gk[j] += hk * dz[j];
            }
            da[k] = dh * (1.0 - hk * hk);
        }
    }
    for (b, g) in grads.bias[t].iter_mut().zip(dz) {
        *b += g;
    }

    let proj = &params.step_proj[t];
    let gproj = &mut grads.step_proj[t];
    let mut du = vec![0.0; d];
    for i in 0..d {
        let ai = da[i];
        if ai == 0.0 {
            continue;
        }
        let row = &proj[i * d..(i + 1) * d];
        let grow = &mut gproj[i * d..(i + 1) * d];
        for j in 0..d {
            grow[j] += ai * u[j];
            du[j] += row[j] * ai;
        }
    }
    du
}

fn scatter_pooled(params: &ModelParams, history: &[u32], dpooled: &[f64], grads: &mut ModelParams) {
    let d = params.dim;
    let scale = 1.0 / history.len() as f64;
    for &item in history {
        let item = item as usize;
        for (e, g) in grads.item_embed[item * d..(item + 1) * d].iter_mut().zip(dpooled) {
            *e += g * scale;
        }
    }
}

/// Exact `dL/dtheta` given `dL/dz_t` for every step.
pub fn backward(params: &ModelParams, trace: &ForwardTrace, dlogits: &[Vec<f64>]) -> Result<Gradients> {
    let mut grads = Gradients::zeros_for(params);
    backward_into(params, trace, dlogits, &mut grads)?;
    Ok(grads)
}

/// Like [`backward`] but accumulates into existing gradients.
pub fn backward_into(
    params: &ModelParams,
    trace: &ForwardTrace,
    dlogits: &[Vec<f64>],
    grads: &mut Gradients,
) -> Result<()> {
    check_trace(params, trace)?;
    if dlogits.len() != params.depth()
        || dlogits.iter().zip(&params.vocab_sizes).any(|(dz, &v)| dz.len() != v)
    {
        return Err(Error::Contract("dlogits shape does not match the trace".into()));
    }
    let mut dpooled = vec![0.0; params.dim];
    for (t, dz) in dlogits.iter().enumerate() {
        if dz.iter().all(|&g| g == 0.0) {
            continue;
        }
        backward_step(params, trace, t, dz, grads, &mut dpooled);
    }
    scatter_pooled(params, &trace.history, &dpooled, grads);
    Ok(())
}

/// Backward pass for a loss that depends on the logits only through the
/// token scores `s_t = log_softmax(z_t)[y_t]`. `score_grads[t] = dL/ds_t`,
/// so `dL/dz_t = score_grads[t] * (onehot(y_t) - softmax(z_t))`.
pub fn backward_token_scores(
    params: &ModelParams,
    trace: &ForwardTrace,
    score_grads: &[f64],
    grads: &mut Gradients,
) -> Result<()> {
    check_trace(params, trace)?;
    if score_grads.len() != params.depth() {
        return Err(Error::Contract("score gradient length does not match the trace".into()));
    }
    let mut dpooled = vec![0.0; params.dim];
    let mut dz = Vec::new();
    for (t, &g) in score_grads.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        token_score_dlogits_into(&trace.log_probs[t], trace.codes[t], g, &mut dz);
        backward_step(params, trace, t, &dz, grads, &mut dpooled);
    }
    scatter_pooled(params, &trace.history, &dpooled, grads);
    Ok(())
}

#[derive(Debug, Clone)]
struct TreeNode {
    parent: usize,
    step: usize,
    /// code committed at `step - 1` to reach this node
    code_in: u32,
    children: Vec<(u32, usize)>,
    input: Vec<f64>,
    hidden: Vec<f64>,
    log_probs: Vec<f64>,
}

/// Forward state for several candidate code sequences under one history.
/// Candidates sharing a prefix share that prefix's step computations, and the
/// backward pass visits each distinct prefix once.
#[derive(Debug, Clone)]
pub struct CandidateTree {
    history: Vec<u32>,
    codes: Vec<Vec<u32>>,
    nodes: Vec<TreeNode>,
    /// `paths[c][t]`: node computing step `t` for candidate `c`
    paths: Vec<Vec<usize>>,
}

impl CandidateTree {
    pub fn build(params: &ModelParams, history: &[u32], candidates: &[&[u32]]) -> Result<Self> {
        let pooled = params.pooled_history(history)?;
        let depth = params.depth();
        let mut nodes: Vec<TreeNode> = Vec::new();
        let (hidden, logits) = params.step(0, &pooled);
        nodes.push(TreeNode {
            parent: usize::MAX,
            step: 0,
            code_in: 0,
            children: Vec::new(),
            input: pooled,
            hidden,
            log_probs: log_softmax(&logits),
        });
        let mut paths = Vec::with_capacity(candidates.len());
        for codes in candidates {
            check_codes(params, codes)?;
            let mut path = Vec::with_capacity(depth);
            let mut cur = 0;
            path.push(cur);
            for t in 1..depth {
                let code = codes[t - 1];
                cur = match nodes[cur].children.iter().find(|c| c.0 == code) {
                    Some(&(_, id)) => id,
                    None => {
                        let input = params.extend_input(&nodes[cur].input, t - 1, code);
                        let (hidden, logits) = params.step(t, &input);
                        let id = nodes.len();
                        nodes.push(TreeNode {
                            parent: cur,
                            step: t,
                            code_in: code,
                            children: Vec::new(),
                            input,
                            hidden,
                            log_probs: log_softmax(&logits),
                        });
                        nodes[cur].children.push((code, id));
                        id
                    }
                };
                path.push(cur);
            }
            paths.push(path);
        }
        Ok(Self {
            history: history.to_vec(),
            codes: candidates.iter().map(|c| c.to_vec()).collect(),
            nodes,
            paths,
        })
    }

    pub fn num_candidates(&self) -> usize {
        self.codes.len()
    }

    /// Number of distinct prefixes evaluated.
    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn token_scores(&self, c: usize) -> Vec<f64> {
        self.paths[c]
            .iter()
            .zip(&self.codes[c])
            .map(|(&n, &code)| self.nodes[n].log_probs[code as usize])
            .collect()
    }

    /// Accumulates gradients for `score_grads[c][t] = dL/ds_t` of candidate `c`.
    pub fn backward(&self, params: &ModelParams, score_grads: &[Vec<f64>], grads: &mut Gradients) -> Result<()> {
        if score_grads.len() != self.codes.len() || score_grads.iter().any(|g| g.len() != params.depth()) {
            return Err(Error::Contract("score gradients do not match the candidate set".into()));
        }
        let n = self.nodes.len();
        let mut onehot: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n];
        for (c, g) in score_grads.iter().enumerate() {
            for (t, &gt) in g.iter().enumerate() {
                if gt != 0.0 {
                    onehot[self.paths[c][t]].push((self.codes[c][t], gt));
                }
            }
        }
        let d = params.dim;
        let mut du_acc: Vec<Option<Vec<f64>>> = vec![None; n];
        let mut dz = Vec::new();
        for id in (0..n).rev() {
            let node = &self.nodes[id];
            if !onehot[id].is_empty() {
                let gsum: f64 = onehot[id].iter().map(|e| e.1).sum();
                dz.clear();
                dz.extend(node.log_probs.iter().map(|lp| -gsum * lp.exp()));
                for &(code, g) in &onehot[id] {
                    dz[code as usize] += g;
                }
                let du = step_backward(params, node.step, &node.hidden, &node.input, &dz, grads);
                match &mut du_acc[id] {
                    Some(acc) => acc.iter_mut().zip(&du).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(du),
                }
            }
            let Some(du) = du_acc[id].take() else { continue };
            if id == 0 {
                scatter_pooled(params, &self.history, &du, grads);
                continue;
            }
            let c = node.code_in as usize;
            let t = node.step - 1;
            for (e, g) in grads.token_embed[t][c * d..(c + 1) * d].iter_mut().zip(&du) {
                *e += g;
            }
            match &mut du_acc[node.parent] {
                Some(acc) => acc.iter_mut().zip(&du).for_each(|(a, b)| *a += b),
                slot => *slot = Some(du),
            }
        }
        Ok(())
    }
}

/// `g * (onehot(code) - softmax)` written into `out`.
pub(crate) fn token_score_dlogits_into(log_probs: &[f64], code: u32, g: f64, out: &mut Vec<f64>) {
    out.clear();
    out.extend(log_probs.iter().map(|lp| -g * lp.exp()));
    out[code as usize] += g;
}

fn write_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Writes a versioned checkpoint: magic, version, 32-byte config digest, then
/// each tensor as `(name, shape, little-endian f64 payload)`.
pub fn save_checkpoint(params: &ModelParams, digest: &[u8; 32], path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(64 + params.num_parameters() * 8);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    write_u32(&mut buf, CHECKPOINT_VERSION);
    buf.extend_from_slice(digest);
    let tensors = params.tensors();
    write_u32(&mut buf, tensors.len() as u32);
    for t in tensors {
        write_u32(&mut buf, t.name.len() as u32);
        buf.extend_from_slice(t.name.as_bytes());
        write_u32(&mut buf, t.shape.len() as u32);
        for &s in &t.shape {
            buf.extend_from_slice(&(s as u64).to_le_bytes());
        }
        for &x in t.data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    f.write_all(&buf)
        .and_then(|_| f.sync_all())
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Reads a checkpoint written by [`save_checkpoint`]; returns the parameters and config digest.
pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, [u8; 32])> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let digest: [u8; 32] = cur.take(32)?.try_into().unwrap();
    let count = cur.u32()? as usize;
    let mut tensors: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::with_capacity(count);
    for _ in 0..count {
        let len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?;
        let ndim = cur.u32()? as usize;
        let shape = (0..ndim).map(|_| cur.u64().map(|s| s as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = cur
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, shape, data));
    }
    if cur.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    let (_, item_shape, _) = tensors
        .first()
        .filter(|(n, s, _)| n == "item_embed" && s.len() == 2)
        .ok_or_else(|| Error::Checkpoint("missing item_embed".into()))?;
    let (num_items, dim) = (item_shape[0], item_shape[1]);
    if (count - 1) % 4 != 0 {
        return Err(Error::Checkpoint("unexpected tensor count".into()));
    }
    let vocab_sizes: Vec<usize> = tensors[1..].chunks(4).map(|c| c[0].1[0]).collect();
    let mut params = ModelParams::zeros(num_items, &vocab_sizes, dim);
    let expected: Vec<(String, Vec<usize>)> =
        params.tensors().into_iter().map(|t| (t.name, t.shape)).collect();
    for ((name, shape, data), (exp_name, exp_shape), dst) in tensors
        .into_iter()
        .zip(expected)
        .zip(params.tensors_mut())
        .map(|((a, b), c)| (a, b, c))
    {
        if name != exp_name || shape != exp_shape {
            return Err(Error::Checkpoint(format!(
                "tensor {name} {shape:?} does not match expected {exp_name} {exp_shape:?}"
            )));
        }
        dst.copy_from_slice(&data);
    }
    Ok((params, digest))
}
