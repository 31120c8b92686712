use std::collections::HashMap;
use std::fmt;

use ndarray::{s, Array1, Array2, Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::autodiff::{Graph, Var};
use super::config::{ModelConfig, TokenLayout};
use super::mask::MaskPlan;
use super::{dim_err, ModelError};
use crate::dataset::{Dataset, N_ACTION, N_TACTILE, OBJECT_DIM};

/// Model inputs and reconstruction targets for a batch of frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameBatch {
    /// `B x H x W x 3` in `[0, 1]`.
    pub images: Array4<f64>,
    /// `B x 40`, binary.
    pub tactile: Array2<f64>,
    /// `B x (1 + q) x 48`: the current action followed by `q` future ones.
    pub actions: Array3<f64>,
    /// `B x 11`.
    pub objects: Array2<f64>,
}

impl FrameBatch {
    pub fn from_dataset(ds: &Dataset, idx: &[usize]) -> Self {
        let images = ds.images.select(Axis(0), idx).mapv(|v| v as f64 / 255.0);
        let tactile = ds.tactile.select(Axis(0), idx).mapv(f64::from);
        let p = ds.horizon();
        let mut actions = Array3::zeros((idx.len(), 1 + p, N_ACTION));
        for (b, &i) in idx.iter().enumerate() {
            actions.index_axis_mut(Axis(0), b).assign(&ds.action_stack(i).mapv(f64::from));
        }
        let objects = ds.objects.select(Axis(0), idx).mapv(f64::from);
        FrameBatch { images, tactile, actions, objects }
    }

    /// An observation batch without targets, for feature extraction.
    pub fn observation(images: Array4<f64>, tactile: Array2<f64>, actions: Array2<f64>) -> Self {
        let b = images.shape()[0];
        FrameBatch {
            images,
            tactile,
            actions: actions.insert_axis(Axis(1)),
            objects: Array2::zeros((b, OBJECT_DIM)),
        }
    }

    pub fn len(&self) -> usize {
        self.tactile.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        FrameBatch {
            images: self.images.select(Axis(0), idx),
            tactile: self.tactile.select(Axis(0), idx),
            actions: self.actions.select(Axis(0), idx),
            objects: self.objects.select(Axis(0), idx),
        }
    }
}

/// Embedded tokens per group, positional encodings included.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    /// `B x D`.
    pub cls: Array2<f64>,
    /// `B x n x D` for each group.
    pub visual: Array3<f64>,
    pub tactile: Array3<f64>,
    pub action: Array3<f64>,
    pub null: Array3<f64>,
}

/// Encoder output. Row 0 of every sample is the CLS latent, followed by the
/// kept tokens of each group in layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct Latents {
    /// `B x T x D`.
    pub sequence: Array3<f64>,
    pub plans: Vec<MaskPlan>,
}

impl Latents {
    pub fn cls(&self) -> Array2<f64> {
        self.sequence.index_axis(Axis(1), 0).to_owned()
    }
}

/// Decoder output for one sample. Groups the config leaves out are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    /// `n_v x (patch * patch * 3)`, patches row-major, pixels `(y, x, c)`.
    pub visual: Option<Array2<f64>>,
    /// One logit per taxel; taxels without a token are 0.
    pub tactile_logits: Option<Array1<f64>>,
    /// `(1 + p) x 48`; joints without a token are 0.
    pub actions: Option<Array2<f64>>,
    /// Position, unit quaternion, sizes.
    pub object: Option<Array1<f64>>,
}

/// Batch-mean loss components and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct LossReport {
    pub total: f64,
    pub img: f64,
    pub tac: f64,
    pub bot: f64,
    pub act: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.total, self.img, self.tac, self.bot, self.act].iter().all(|v| v.is_finite())
    }
}

impl fmt::Display for LossReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "total {:.6} (img {:.6}, tac {:.6}, bot {:.6}, act {:.6})",
            self.total, self.img, self.tac, self.bot, self.act
        )
    }
}

/// Named parameter matrices in registration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Params {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
    index: HashMap<String, usize>,
}

impl Params {
    fn add(&mut self, name: String, value: Array2<f64>) {
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Array2<f64>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.values
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Array2::len).sum()
    }

    /// Weight matrices get weight decay; norms, biases and embeddings do not.
    pub fn decays(&self, i: usize) -> bool {
        self.names[i].ends_with(".w")
    }

    /// Whether a parameter feeds the encoder (tokenizer included).
    pub fn is_encoder(&self, i: usize) -> bool {
        self.names[i].starts_with("tok.") || self.names[i].starts_with("enc.")
    }
}

fn sinusoid(n: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |(i, k)| {
        let freq = 1.0 / 10000f64.powf((2 * (k / 2)) as f64 / d as f64);
        let a = i as f64 * freq;
        if k % 2 == 0 {
            a.sin()
        } else {
            a.cos()
        }
    })
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn xavier(&mut self, rows: usize, cols: usize) -> Array2<f64> {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let u = Uniform::new_inclusive(-a, a).expect("finite bound");
        Array2::from_shape_fn((rows, cols), |_| u.sample(&mut self.rng))
    }

    fn normal(&mut self, rows: usize, cols: usize) -> Array2<f64> {
        let n = Normal::new(0.0, 0.02).expect("positive sigma");
        Array2::from_shape_fn((rows, cols), |_| n.sample(&mut self.rng))
    }
}

const GROUPS: [&str; 4] = ["v", "c", "a", "o"];

#[derive(Debug, Clone, PartialEq)]
pub struct VtaoModel {
    config: ModelConfig,
    layout: TokenLayout,
    params: Params,
}

impl VtaoModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = config.layout();
        let d = config.embed_dim;
        let hidden = d * config.mlp_ratio;
        let mut init = Init { rng: ChaCha8Rng::seed_from_u64(seed) };
        let mut p = Params::default();
        let patch = config.patch_size.pow(2) * 3;
        let gmax = layout.action_width();

        p.add("tok.cls".into(), init.normal(1, d));
        let [nv, nc, na, no] = layout.group_sizes();
        let inputs = [(nv, patch), (nc, 1), (na, gmax)];
        for (g, &(n, width)) in inputs.iter().enumerate() {
            if n == 0 {
                continue;
            }
            p.add(format!("tok.{}.w", GROUPS[g]), init.xavier(width, d));
            p.add(format!("tok.{}.b", GROUPS[g]), Array2::zeros((1, d)));
            if config.learned_pos {
                p.add(format!("tok.{}.pos", GROUPS[g]), init.normal(n, d));
            }
        }
        if no > 0 {
            p.add("tok.o.null".into(), init.normal(no, d));
        }

        let block = |p: &mut Params, init: &mut Init, prefix: &str| {
            p.add(format!("{prefix}.ln1.g"), Array2::ones((1, d)));
            p.add(format!("{prefix}.ln1.b"), Array2::zeros((1, d)));
            p.add(format!("{prefix}.qkv.w"), init.xavier(d, 3 * d));
            p.add(format!("{prefix}.qkv.b"), Array2::zeros((1, 3 * d)));
            p.add(format!("{prefix}.proj.w"), init.xavier(d, d));
            p.add(format!("{prefix}.proj.b"), Array2::zeros((1, d)));
            p.add(format!("{prefix}.ln2.g"), Array2::ones((1, d)));
            p.add(format!("{prefix}.ln2.b"), Array2::zeros((1, d)));
            p.add(format!("{prefix}.fc1.w"), init.xavier(d, hidden));
            p.add(format!("{prefix}.fc1.b"), Array2::zeros((1, hidden)));
            p.add(format!("{prefix}.fc2.w"), init.xavier(hidden, d));
            p.add(format!("{prefix}.fc2.b"), Array2::zeros((1, d)));
        };
        for i in 0..config.enc_depth {
            block(&mut p, &mut init, &format!("enc.{i}"));
        }
        p.add("enc.ln.g".into(), Array2::ones((1, d)));
        p.add("enc.ln.b".into(), Array2::zeros((1, d)));

        let model = VtaoModel { config, layout, params: Params::default() };
        for t in 0..model.trunk_count() {
            let prefix = format!("dec{t}");
            p.add(format!("{prefix}.embed.w"), init.xavier(d, d));
            p.add(format!("{prefix}.embed.b"), Array2::zeros((1, d)));
            p.add(format!("{prefix}.mask"), init.normal(1, d));
            if model.config.learned_pos {
                p.add(format!("{prefix}.pos"), init.normal(model.layout.total(), d));
            }
            for i in 0..model.config.dec_depth {
                block(&mut p, &mut init, &format!("{prefix}.{i}"));
            }
            p.add(format!("{prefix}.ln.g"), Array2::ones((1, d)));
            p.add(format!("{prefix}.ln.b"), Array2::zeros((1, d)));
        }
        let outputs = [patch, 1, (1 + model.config.p) * gmax, OBJECT_DIM];
        for g in model.objectives() {
            p.add(format!("head.{}.w", GROUPS[g]), init.xavier(d, outputs[g]));
            p.add(format!("head.{}.b", GROUPS[g]), Array2::zeros((1, outputs[g])));
        }
        Ok(VtaoModel { params: p, ..model })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &TokenLayout {
        &self.layout
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    /// Replaces every parameter value, checking names and shapes.
    pub fn set_params(&mut self, named: Vec<(String, Array2<f64>)>) -> Result<(), ModelError> {
        if named.len() != self.params.len() {
            return Err(ModelError::Checkpoint(format!(
                "{} tensors where the config implies {}",
                named.len(),
                self.params.len()
            )));
        }
        for (i, (name, value)) in named.into_iter().enumerate() {
            if name != self.params.names[i] || value.dim() != self.params.values[i].dim() {
                return Err(ModelError::Checkpoint(format!(
                    "tensor {i} is {name} {:?}, expected {} {:?}",
                    value.dim(),
                    self.params.names[i],
                    self.params.values[i].dim()
                )));
            }
            self.params.values[i] = value;
        }
        Ok(())
    }

    /// Groups with a reconstruction head: 0 visual, 1 tactile, 2 action, 3 object.
    fn objectives(&self) -> Vec<usize> {
        let [nv, nc, na, no] = self.layout.group_sizes();
        [nv, nc, na, no].iter().enumerate().filter(|(_, &n)| n > 0).map(|(g, _)| g).collect()
    }

    fn trunk_count(&self) -> usize {
        let n = self.objectives().len();
        if self.config.separate_decoders {
            n
        } else {
            n.min(1)
        }
    }

    /// SHA-256 over the names and bytes of the tokenizer and encoder parameters.
    pub fn encoder_digest(&self) -> String {
        let mut h = Sha256::new();
        for i in 0..self.params.len() {
            if self.params.is_encoder(i) {
                h.update(self.params.names[i].as_bytes());
                for v in &self.params.values[i] {
                    h.update(v.to_le_bytes());
                }
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn check_batch(&self, batch: &FrameBatch, plans: &[MaskPlan], targets: bool) -> Result<(), ModelError> {
        let b = batch.len();
        if b == 0 {
            return Err(dim_err("batch size", "at least 1", 0));
        }
        let s = self.config.image_size;
        let sh = batch.images.shape();
        if self.layout.visual > 0 && sh != [b, s, s, 3] {
            return Err(dim_err("images", [b, s, s, 3], sh));
        }
        if sh[0] != b {
            return Err(dim_err("images batch", b, sh[0]));
        }
        if batch.tactile.dim() != (b, N_TACTILE) {
            return Err(dim_err("tactile", (b, N_TACTILE), batch.tactile.dim()));
        }
        let a = batch.actions.dim();
        let steps = if targets && self.layout.action.len() > 0 { 1 + self.config.p } else { 1 };
        if a.0 != b || a.1 < steps || a.2 != N_ACTION {
            return Err(dim_err("actions", format!("({b}, >= {steps}, {N_ACTION})"), a));
        }
        if batch.objects.dim() != (b, OBJECT_DIM) {
            return Err(dim_err("objects", (b, OBJECT_DIM), batch.objects.dim()));
        }
        if plans.len() != b {
            return Err(dim_err("mask plans", b, plans.len()));
        }
        for plan in plans {
            plan.check(&self.layout)?;
            let counts: Vec<usize> = plan.groups().iter().map(|g| g.len()).collect();
            let first: Vec<usize> = plans[0].groups().iter().map(|g| g.len()).collect();
            if counts != first {
                return Err(ModelError::Plan(format!("mask counts {counts:?} differ within the batch from {first:?}")));
            }
        }
        Ok(())
    }

    pub fn tokenize(&self, batch: &FrameBatch) -> Result<TokenBatch, ModelError> {
        let plans = vec![MaskPlan::none(); batch.len()];
        self.check_batch(batch, &plans, false)?;
        let mut f = Forward::new(self, false);
        let t = f.tokens(batch);
        let b = batch.len();
        let d = self.config.embed_dim;
        let cube = |f: &Forward, v: Option<Var>, n: usize| match v {
            Some(v) => f.g.value(v).clone().into_shape_with_order((b, n, d)).expect("token rows"),
            None => Array3::zeros((b, 0, d)),
        };
        let [nv, nc, na, no] = self.layout.group_sizes();
        Ok(TokenBatch {
            cls: f.g.value(t.cls).clone(),
            visual: cube(&f, t.groups[0], nv),
            tactile: cube(&f, t.groups[1], nc),
            action: cube(&f, t.groups[2], na),
            null: cube(&f, t.groups[3], no),
        })
    }

    pub fn encode(&self, batch: &FrameBatch, plans: &[MaskPlan]) -> Result<Latents, ModelError> {
        self.check_batch(batch, plans, false)?;
        let mut f = Forward::new(self, false);
        let t = f.tokens(batch);
        let (lat, len) = f.encode(&t, plans);
        let sequence = f
            .g
            .value(lat)
            .clone()
            .into_shape_with_order((batch.len(), len, self.config.embed_dim))
            .expect("latent rows");
        Ok(Latents { sequence, plans: plans.to_vec() })
    }

    /// CLS latents with nothing masked, `B x D`.
    pub fn cls_features(&self, batch: &FrameBatch) -> Result<Array2<f64>, ModelError> {
        Ok(self.encode(batch, &vec![MaskPlan::none(); batch.len()])?.cls())
    }

    pub fn reconstruct(&self, batch: &FrameBatch, plans: &[MaskPlan]) -> Result<Vec<Reconstruction>, ModelError> {
        self.check_batch(batch, plans, false)?;
        let mut f = Forward::new(self, false);
        let heads = f.run(batch, plans);
        let b = batch.len();
        let l = &self.layout;
        let gmax = l.action_width();
        let steps = 1 + self.config.p;
        let out = (0..b)
            .map(|i| {
                let rows = |v: Var, n: usize| f.g.value(v).slice(s![i * n..(i + 1) * n, ..]).to_owned();
                Reconstruction {
                    visual: heads.visual.map(|v| rows(v, l.visual)),
                    tactile_logits: heads.tactile.map(|v| {
                        let mut c = Array1::zeros(N_TACTILE);
                        for (k, &taxel) in l.tactile.iter().enumerate() {
                            c[taxel] = f.g.value(v)[[i * l.tactile.len() + k, 0]];
                        }
                        c
                    }),
                    actions: heads.action.map(|v| {
                        let tok = rows(v, l.action.len());
                        let mut a = Array2::zeros((steps, N_ACTION));
                        for (k, group) in l.action.iter().enumerate() {
                            for (j, &dof) in group.iter().enumerate() {
                                for st in 0..steps {
                                    a[[st, dof]] = tok[[k, st * gmax + j]];
                                }
                            }
                        }
                        a
                    }),
                    object: heads.object.map(|v| f.g.value(v).row(i).to_owned()),
                }
            })
            .collect();
        Ok(out)
    }

    pub fn loss(&self, batch: &FrameBatch, plans: &[MaskPlan]) -> Result<LossReport, ModelError> {
        self.check_batch(batch, plans, true)?;
        let mut f = Forward::new(self, false);
        let heads = f.run(batch, plans);
        Ok(f.loss(batch, plans, &heads).1)
    }

    /// Loss and the gradient of its total, aligned with [`Params::values`].
    pub fn loss_and_grad(
        &self,
        batch: &FrameBatch,
        plans: &[MaskPlan],
    ) -> Result<(LossReport, Vec<Array2<f64>>), ModelError> {
        self.check_batch(batch, plans, true)?;
        let mut f = Forward::new(self, true);
        let heads = f.run(batch, plans);
        let (total, report) = f.loss(batch, plans, &heads);
        if !report.is_finite() {
            return Err(ModelError::NonFinite { step: 0, report });
        }
        let grads = match total {
            Some(root) => {
                let mut g = f.g.backward(root);
                f.params
                    .iter()
                    .zip(&self.params.values)
                    .map(|(v, value)| g.take(*v).unwrap_or_else(|| Array2::zeros(value.dim())))
                    .collect()
            }
            None => self.params.values.iter().map(|v| Array2::zeros(v.dim())).collect(),
        };
        Ok((report, grads))
    }
}

struct Tokens {
    cls: Var,
    groups: [Option<Var>; 4],
}

struct Heads {
    visual: Option<Var>,
    tactile: Option<Var>,
    action: Option<Var>,
    object: Option<Var>,
}

/// One recorded pass over a batch.
struct Forward<'a> {
    m: &'a VtaoModel,
    g: Graph,
    params: Vec<Var>,
}

impl<'a> Forward<'a> {
    fn new(m: &'a VtaoModel, trainable: bool) -> Self {
        let mut g = Graph::new();
        let params = m
            .params
            .values
            .iter()
            .map(|v| if trainable { g.param(v.clone()) } else { g.constant(v.clone()) })
            .collect();
        Forward { m, g, params }
    }

    fn p(&self, name: &str) -> Var {
        self.params[self.m.params.index[name]]
    }

    fn linear(&mut self, x: Var, prefix: &str) -> Var {
        let w = self.p(&format!("{prefix}.w"));
        let b = self.p(&format!("{prefix}.b"));
        let y = self.g.matmul(x, w);
        self.g.add_row(y, b)
    }

    fn ln(&mut self, x: Var, prefix: &str) -> Var {
        let (gm, bt) = (self.p(&format!("{prefix}.g")), self.p(&format!("{prefix}.b")));
        self.g.layer_norm(x, gm, bt)
    }

    fn block(&mut self, x: Var, prefix: &str, batch: usize, heads: usize) -> Var {
        let h = self.ln(x, &format!("{prefix}.ln1"));
        let qkv = self.linear(h, &format!("{prefix}.qkv"));
        let a = self.g.attention(qkv, batch, heads);
        let a = self.linear(a, &format!("{prefix}.proj"));
        let x = self.g.add(x, a);
        let h = self.ln(x, &format!("{prefix}.ln2"));
        let h = self.linear(h, &format!("{prefix}.fc1"));
        let h = self.g.gelu(h);
        let h = self.linear(h, &format!("{prefix}.fc2"));
        self.g.add(x, h)
    }

    /// Positional table of a group, tiled over the batch.
    fn positions(&mut self, name: &str, n: usize, batch: usize) -> Var {
        let tile: Vec<usize> = (0..batch).flat_map(|_| 0..n).collect();
        let table = if self.m.config.learned_pos {
            self.p(name)
        } else {
            self.g.constant(sinusoid(n, self.m.config.embed_dim))
        };
        self.g.gather(table, tile)
    }

    fn tokens(&mut self, batch: &FrameBatch) -> Tokens {
        let b = batch.len();
        let l = &self.m.layout;
        let cfg = &self.m.config;
        let cls = self.p("tok.cls");
        let cls = self.g.gather(cls, vec![0; b]);
        let mut inputs: [Option<Array2<f64>>; 3] = [None, None, None];
        if l.visual > 0 {
            let ps = cfg.patch_size;
            let side = cfg.image_size / ps;
            let mut x = Array2::zeros((b * l.visual, ps * ps * 3));
            for i in 0..b {
                for py in 0..side {
                    for px in 0..side {
                        let patch = batch.images.slice(s![i, py * ps..(py + 1) * ps, px * ps..(px + 1) * ps, ..]);
                        let row = i * l.visual + py * side + px;
                        for (k, v) in patch.iter().enumerate() {
                            x[[row, k]] = *v;
                        }
                    }
                }
            }
            inputs[0] = Some(x);
        }
        if !l.tactile.is_empty() {
            let n = l.tactile.len();
            inputs[1] = Some(Array2::from_shape_fn((b * n, 1), |(r, _)| batch.tactile[[r / n, l.tactile[r % n]]]));
        }
        if !l.action.is_empty() {
            let n = l.action.len();
            let mut x = Array2::zeros((b * n, l.action_width()));
            for i in 0..b {
                for (k, group) in l.action.iter().enumerate() {
                    for (j, &dof) in group.iter().enumerate() {
                        x[[i * n + k, j]] = batch.actions[[i, 0, dof]];
                    }
                }
            }
            inputs[2] = Some(x);
        }
        let sizes = l.group_sizes();
        let mut groups = [None; 4];
        for (gi, x) in inputs.into_iter().enumerate() {
            let Some(x) = x else { continue };
            let x = self.g.constant(x);
            let e = self.linear(x, &format!("tok.{}", GROUPS[gi]));
            let pos = self.positions(&format!("tok.{}.pos", GROUPS[gi]), sizes[gi], b);
            groups[gi] = Some(self.g.add(e, pos));
        }
        if sizes[3] > 0 {
            let null = self.p("tok.o.null");
            groups[3] = Some(self.g.gather(null, (0..b).flat_map(|_| 0..sizes[3]).collect()));
        }
        Tokens { cls, groups }
    }

    /// Drops masked tokens and runs the encoder; returns latents and the per-sample length.
    fn encode(&mut self, t: &Tokens, plans: &[MaskPlan]) -> (Var, usize) {
        let b = plans.len();
        let l = &self.m.layout;
        let sizes = l.group_sizes();
        let mut parts = vec![t.cls];
        let mut offsets = [0usize; 4];
        let mut next = b;
        for g in 0..4 {
            offsets[g] = next;
            if let Some(v) = t.groups[g] {
                parts.push(v);
                next += b * sizes[g];
            }
        }
        let all = self.g.concat(parts);
        let mut idx = Vec::new();
        for (i, plan) in plans.iter().enumerate() {
            idx.push(i);
            for (g, kept) in plan.kept(l).iter().enumerate() {
                idx.extend(kept.iter().map(|k| offsets[g] + i * sizes[g] + k));
            }
        }
        let len = idx.len() / b;
        let mut x = self.g.gather(all, idx);
        for d in 0..self.m.config.enc_depth {
            x = self.block(x, &format!("enc.{d}"), b, self.m.config.enc_heads);
        }
        (self.ln(x, "enc.ln"), len)
    }

    /// Restores the full sequence with mask tokens and runs one decoder trunk.
    fn decode(&mut self, lat: Var, len: usize, plans: &[MaskPlan], trunk: usize) -> Var {
        let b = plans.len();
        let l = &self.m.layout;
        let prefix = format!("dec{trunk}");
        let y = self.linear(lat, &format!("{prefix}.embed"));
        let mask = self.p(&format!("{prefix}.mask"));
        let full = self.g.concat(vec![y, mask]);
        let mask_row = b * len;
        let sizes = l.group_sizes();
        let mut idx = Vec::with_capacity(b * l.total());
        for (i, plan) in plans.iter().enumerate() {
            let base = i * len;
            idx.push(base);
            let mut enc_pos = 1;
            for (g, masked) in plan.groups().iter().enumerate() {
                for k in 0..sizes[g] {
                    if masked.binary_search(&k).is_ok() {
                        idx.push(mask_row);
                    } else {
                        idx.push(base + enc_pos);
                        enc_pos += 1;
                    }
                }
            }
        }
        let x = self.g.gather(full, idx);
        let pos = self.positions(&format!("{prefix}.pos"), l.total(), b);
        let mut x = self.g.add(x, pos);
        for d in 0..self.m.config.dec_depth {
            x = self.block(x, &format!("{prefix}.{d}"), b, self.m.config.dec_heads);
        }
        self.ln(x, &format!("{prefix}.ln"))
    }

    fn run(&mut self, batch: &FrameBatch, plans: &[MaskPlan]) -> Heads {
        let t = self.tokens(batch);
        let (lat, len) = self.encode(&t, plans);
        let b = batch.len();
        let l = &self.m.layout;
        let sizes = l.group_sizes();
        let total = l.total();
        let mut shared = None;
        let mut out = [None; 4];
        for (k, g) in self.m.objectives().into_iter().enumerate() {
            let z = if self.m.config.separate_decoders {
                self.decode(lat, len, plans, k)
            } else {
                match shared {
                    Some(z) => z,
                    None => {
                        let z = self.decode(lat, len, plans, 0);
                        shared = Some(z);
                        z
                    }
                }
            };
            let start = 1 + sizes[..g].iter().sum::<usize>();
            let rows: Vec<usize> = (0..b).flat_map(|i| (0..sizes[g]).map(move |k| i * total + start + k)).collect();
            let mut h = self.g.gather(z, rows);
            if g == 3 {
                h = self.g.mean_blocks(h, sizes[3]);
            }
            let mut y = self.linear(h, &format!("head.{}", GROUPS[g]));
            if g == 3 {
                y = self.g.normalize_slice(y, 3, 4);
            }
            out[g] = Some(y);
        }
        Heads { visual: out[0], tactile: out[1], action: out[2], object: out[3] }
    }

    /// Mean over the batch of per-sample residual norms.
    fn mean_norm(&mut self, pred: Var, target: &Array2<f64>, rows: &[Vec<usize>], pad: Option<&Array2<f64>>) -> Var {
        let b = rows.len();
        let mut norms = Vec::with_capacity(b);
        for r in rows {
            let p = self.g.gather(pred, r.clone());
            let p = match pad {
                Some(mask) => {
                    let m = self.g.constant(mask.select(Axis(0), r));
                    self.g.mul(p, m)
                }
                None => p,
            };
            let t = self.g.constant(target.select(Axis(0), r));
            let res = self.g.sub(p, t);
            norms.push(self.g.norm(res));
        }
        let sum = self.g.sum_scalars(&norms);
        self.g.scale(sum, 1.0 / b as f64)
    }

    fn loss(&mut self, batch: &FrameBatch, plans: &[MaskPlan], heads: &Heads) -> (Option<Var>, LossReport) {
        let b = batch.len();
        let l = &self.m.layout;
        let cfg = &self.m.config;
        let w = cfg.weights;
        // Reconstruction groups score masked positions; with none masked, all of them.
        let rows_of = |n: usize, masked: &dyn Fn(&MaskPlan) -> &Vec<usize>| -> Vec<Vec<usize>> {
            plans
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let m = masked(p);
                    if m.is_empty() {
                        (0..n).map(|k| i * n + k).collect()
                    } else {
                        m.iter().map(|k| i * n + k).collect()
                    }
                })
                .collect()
        };
        let all_rows = |n: usize| -> Vec<Vec<usize>> { (0..b).map(|i| (i * n..(i + 1) * n).collect()).collect() };
        let mut terms = Vec::new();
        let mut report = LossReport::default();

        if let Some(v) = heads.visual {
            let ps = cfg.patch_size;
            let side = cfg.image_size / ps;
            let mut target = Array2::zeros((b * l.visual, ps * ps * 3));
            for i in 0..b {
                for py in 0..side {
                    for px in 0..side {
                        let patch = batch.images.slice(s![i, py * ps..(py + 1) * ps, px * ps..(px + 1) * ps, ..]);
                        for (k, x) in patch.iter().enumerate() {
                            target[[i * l.visual + py * side + px, k]] = *x;
                        }
                    }
                }
            }
            let rows = rows_of(l.visual, &|p| &p.visual);
            let c = self.mean_norm(v, &target, &rows, None);
            report.img = self.g.scalar(c);
            terms.push(self.g.scale(c, w.img));
        }
        if let Some(c) = heads.tactile {
            let n = l.tactile.len();
            let target = Array2::from_shape_fn((b * n, 1), |(r, _)| batch.tactile[[r / n, l.tactile[r % n]]]);
            let probs = self.g.sigmoid(c);
            let rows = rows_of(n, &|p| &p.tactile);
            let c = self.mean_norm(probs, &target, &rows, None);
            report.tac = self.g.scalar(c);
            terms.push(self.g.scale(c, w.tac));
        }
        if let Some(o) = heads.object {
            let c = self.mean_norm(o, &batch.objects, &all_rows(1), None);
            report.bot = self.g.scalar(c);
            terms.push(self.g.scale(c, w.bot));
        }
        if let Some(a) = heads.action {
            let n = l.action.len();
            let gmax = l.action_width();
            let steps = 1 + cfg.p;
            let mut target = Array2::zeros((b * n, steps * gmax));
            let mut pad = Array2::zeros((b * n, steps * gmax));
            for i in 0..b {
                for (k, group) in l.action.iter().enumerate() {
                    for (j, &dof) in group.iter().enumerate() {
                        for st in 0..steps {
                            target[[i * n + k, st * gmax + j]] = batch.actions[[i, st, dof]];
                            pad[[i * n + k, st * gmax + j]] = 1.0;
                        }
                    }
                }
            }
            let c = self.mean_norm(a, &target, &all_rows(n), Some(&pad));
            report.act = self.g.scalar(c);
            terms.push(self.g.scale(c, w.act));
        }
        if terms.is_empty() {
            return (None, report);
        }
        let total = self.g.sum_scalars(&terms);
        report.total = self.g.scalar(total);
        (Some(total), report)
    }
}
