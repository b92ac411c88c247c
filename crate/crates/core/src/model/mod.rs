//! Encoder-decoder forecaster that can be evaluated on any coalition of
//! feature groups.
//!
//! Each time step is embedded by attending over the embeddings of the
//! variables present at that step. Absent past days are removed from encoder
//! self-attention and decoder cross-attention through key masks; absent
//! covariates are removed from the per-step attention. The network therefore
//! never sees a feature outside the coalition.
//!
//! Two equivalent evaluation layouts exist. [`Layout::Masked`] keeps every row
//! and masks attention scores; [`Layout::Pruned`] physically drops absent day
//! rows and absent covariates, which is cheaper and is what training and
//! batched explanation use.

mod batched;
mod checkpoint;
#[cfg(test)]
pub(crate) mod tests;

use std::collections::HashMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

pub use batched::batched_forward;
pub use checkpoint::{write_atomic, Checkpoint, CHECKPOINT_VERSION};

use crate::error::{Error, Result};
use crate::numkernel::{AttnMask, Eager, Exec, Tensor};
use crate::schema::{CovariateKind, FeatureSchema, ForecastExample, GroupMask, STEPS_PER_DAY};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Encoder layers; the decoder has the same number.
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    /// Hidden width of the feed-forward blocks; `4 * d_model` when unset.
    pub ff_dim: Option<usize>,
    pub dropout: f32,
    /// Use the mean instead of the sum of present embeddings as the
    /// feature-attention query.
    pub mean_query: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            d_model: 128,
            heads: 2,
            ff_dim: None,
            dropout: 0.0,
            mean_query: false,
        }
    }
}

impl ModelConfig {
    /// Small configuration that trains in minutes on one core.
    pub fn desk() -> Self {
        Self {
            layers: 1,
            d_model: 16,
            heads: 2,
            ff_dim: Some(32),
            dropout: 0.0,
            mean_query: false,
        }
    }

    pub fn ff(&self) -> usize {
        self.ff_dim.unwrap_or(4 * self.d_model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.d_model == 0 || self.heads == 0 {
            return Err(Error::invalid("layers, d_model and heads must be positive"));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.ff() == 0 {
            return Err(Error::invalid("feed-forward width must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout must be in [0, 1)"));
        }
        Ok(())
    }
}

/// Evaluation layout, see the module docs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    Masked,
    Pruned,
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Zeros,
    Ones,
    /// Uniform with variance `1 / fan_in`.
    FanIn(usize),
    Normal(f64),
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct Attn {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    g: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct Ffn {
    up: Linear,
    down: Linear,
}

#[derive(Clone, Copy, Debug)]
struct EncLayer {
    attn: Attn,
    ln1: Norm,
    ffn: Ffn,
    ln2: Norm,
}

#[derive(Clone, Copy, Debug)]
struct DecLayer {
    self_attn: Attn,
    ln1: Norm,
    cross: Attn,
    ln2: Norm,
    ffn: Ffn,
    ln3: Norm,
}

#[derive(Clone, Copy, Debug)]
enum Embed {
    Table(usize),
    Linear(Linear),
}

#[derive(Clone, Debug)]
struct Ids {
    target: Embed,
    covariates: Vec<Embed>,
    null_step: usize,
    enc: Vec<EncLayer>,
    dec: Vec<DecLayer>,
    head: Linear,
}

struct Spec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

#[derive(Default)]
struct Builder {
    specs: Vec<Spec>,
}

impl Builder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push(Spec { name, shape, init });
        self.specs.len() - 1
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            w: self.add(format!("{name}.w"), vec![fan_in, fan_out], Init::FanIn(fan_in)),
            b: self.add(format!("{name}.b"), vec![fan_out], Init::Zeros),
        }
    }

    fn attn(&mut self, name: &str, d: usize) -> Attn {
        Attn {
            q: self.linear(&format!("{name}.q"), d, d),
            k: self.linear(&format!("{name}.k"), d, d),
            v: self.linear(&format!("{name}.v"), d, d),
            o: self.linear(&format!("{name}.o"), d, d),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            g: self.add(format!("{name}.g"), vec![d], Init::Ones),
            b: self.add(format!("{name}.b"), vec![d], Init::Zeros),
        }
    }

    fn ffn(&mut self, name: &str, d: usize, ff: usize) -> Ffn {
        Ffn {
            up: self.linear(&format!("{name}.up"), d, ff),
            down: self.linear(&format!("{name}.down"), ff, d),
        }
    }
}

fn build_layout(config: &ModelConfig, schema: &FeatureSchema) -> (Ids, Vec<Spec>) {
    let d = config.d_model;
    let ff = config.ff();
    let emb_std = 1.0 / (d as f64).sqrt();
    let mut b = Builder::default();
    let target = Embed::Linear(b.linear("embed.load", 1, d));
    let covariates = schema
        .covariates()
        .iter()
        .map(|c| match c.kind {
            CovariateKind::Categorical { cardinality } => Embed::Table(b.add(
                format!("embed.{}.table", c.name),
                vec![cardinality, d],
                Init::Normal(emb_std),
            )),
            CovariateKind::Continuous => Embed::Linear(b.linear(&format!("embed.{}", c.name), 1, d)),
        })
        .collect();
    let null_step = b.add("embed.null_step".into(), vec![d], Init::Normal(emb_std));
    let enc = (0..config.layers)
        .map(|l| EncLayer {
            attn: b.attn(&format!("enc.{l}.attn"), d),
            ln1: b.norm(&format!("enc.{l}.ln1"), d),
            ffn: b.ffn(&format!("enc.{l}.ffn"), d, ff),
            ln2: b.norm(&format!("enc.{l}.ln2"), d),
        })
        .collect();
    let dec = (0..config.layers)
        .map(|l| DecLayer {
            self_attn: b.attn(&format!("dec.{l}.self"), d),
            ln1: b.norm(&format!("dec.{l}.ln1"), d),
            cross: b.attn(&format!("dec.{l}.cross"), d),
            ln2: b.norm(&format!("dec.{l}.ln2"), d),
            ffn: b.ffn(&format!("dec.{l}.ffn"), d, ff),
            ln3: b.norm(&format!("dec.{l}.ln3"), d),
        })
        .collect();
    let head = b.linear("head", d, 1);
    (
        Ids {
            target,
            covariates,
            null_step,
            enc,
            dec,
            head,
        },
        b.specs,
    )
}

/// Fixed sinusoidal encoding for `positions` rows.
fn positional_table(positions: usize, d: usize) -> Tensor {
    Tensor::from_fn(&[positions, d], |i| {
        let (pos, j) = ((i / d) as f64, i % d);
        let freq = 10_000f64.powf(-((j / 2 * 2) as f64) / d as f64);
        if j % 2 == 0 {
            (pos * freq).sin() as f32
        } else {
            (pos * freq).cos() as f32
        }
    })
}

/// Weights of the forecaster together with the configuration and schema they
/// were built for.
#[derive(Clone, Debug)]
pub struct ModelParams {
    config: ModelConfig,
    schema: FeatureSchema,
    names: Vec<String>,
    tensors: Vec<Arc<Tensor>>,
    ids: Ids,
    positional: Arc<Tensor>,
}

impl ModelParams {
    /// Fresh weights drawn deterministically from `seed`.
    pub fn init(config: &ModelConfig, schema: &FeatureSchema, seed: u64) -> Result<Self> {
        config.validate()?;
        let (ids, specs) = build_layout(config, schema);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = specs
            .iter()
            .map(|s| {
                let n: usize = s.shape.iter().product();
                let data: Vec<f32> = match s.init {
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::FanIn(fan_in) => {
                        let a = (3.0 / fan_in as f64).sqrt();
                        let u = Uniform::new(-a, a).expect("uniform bounds");
                        (0..n).map(|_| u.sample(&mut rng) as f32).collect()
                    }
                    Init::Normal(std) => {
                        let nd = Normal::new(0.0, std).expect("normal std");
                        (0..n).map(|_| nd.sample(&mut rng) as f32).collect()
                    }
                };
                Arc::new(Tensor::new(s.shape.clone(), data).expect("spec shape"))
            })
            .collect();
        Ok(Self::assemble(config, schema, ids, specs, tensors))
    }

    /// Weights from named tensors; every expected name must be present with the right shape.
    pub fn from_named(
        config: &ModelConfig,
        schema: &FeatureSchema,
        named: impl IntoIterator<Item = (String, Tensor)>,
    ) -> Result<Self> {
        config.validate()?;
        let (ids, specs) = build_layout(config, schema);
        let mut map: HashMap<String, Tensor> = named.into_iter().collect();
        let mut tensors = Vec::with_capacity(specs.len());
        for s in &specs {
            let t = map
                .remove(&s.name)
                .ok_or_else(|| Error::invalid(format!("missing parameter {}", s.name)))?;
            if t.shape() != s.shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "parameter",
                    lhs: s.shape.clone(),
                    rhs: t.shape().to_vec(),
                });
            }
            if !t.is_finite() {
                return Err(Error::NonFinite("parameter"));
            }
            tensors.push(Arc::new(t));
        }
        if let Some(extra) = map.keys().next() {
            return Err(Error::invalid(format!("unexpected parameter {extra}")));
        }
        Ok(Self::assemble(config, schema, ids, specs, tensors))
    }

    fn assemble(
        config: &ModelConfig,
        schema: &FeatureSchema,
        ids: Ids,
        specs: Vec<Spec>,
        tensors: Vec<Arc<Tensor>>,
    ) -> Self {
        Self {
            config: config.clone(),
            schema: schema.clone(),
            names: specs.into_iter().map(|s| s.name).collect(),
            tensors,
            ids,
            positional: Arc::new(positional_table(schema.window(), config.d_model)),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Arc<Tensor>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Arc<Tensor>] {
        &mut self.tensors
    }

    pub fn n_weights(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.tensors[i].as_ref())
    }

    /// Replaces one parameter, keeping its shape.
    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?;
        if t.shape() != self.tensors[i].shape() {
            return Err(Error::ShapeMismatch {
                op: "parameter",
                lhs: self.tensors[i].shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        self.tensors[i] = Arc::new(t);
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.is_finite())
    }

    /// The same network with covariate `c` removed from its variable set.
    pub fn without_covariate(&self, c: usize) -> Result<Self> {
        if c >= self.schema.covariates().len() {
            return Err(Error::invalid(format!("no covariate {c}")));
        }
        let schema = self.schema.without_covariate(c);
        let (_, specs) = build_layout(&self.config, &schema);
        let named = specs
            .iter()
            .map(|s| {
                let t = self.get(&s.name).expect("reduced layout is a subset");
                (s.name.clone(), t.clone())
            })
            .collect::<Vec<_>>();
        Self::from_named(&self.config, &schema, named)
    }

    /// Prediction for `example` from the groups in `mask`, by attention masking.
    pub fn forward(&self, example: &ForecastExample, mask: GroupMask) -> Result<Vec<f64>> {
        self.forward_layout(example, mask, Layout::Masked)
    }

    /// Prediction from the inputs with absent groups physically removed.
    pub fn forward_pruned(&self, example: &ForecastExample, mask: GroupMask) -> Result<Vec<f64>> {
        self.forward_layout(example, mask, Layout::Pruned)
    }

    pub fn forward_layout(&self, example: &ForecastExample, mask: GroupMask, layout: Layout) -> Result<Vec<f64>> {
        let mut e = Eager;
        let y = self.forward_with(&mut e, example, mask, layout)?;
        finish(&y)
    }

    /// Forward pass on any backend; returns the `[horizon, 1]` prediction.
    pub fn forward_with<E: Exec>(
        &self,
        e: &mut E,
        example: &ForecastExample,
        mask: GroupMask,
        layout: Layout,
    ) -> Result<E::V> {
        let plan = Plan::new(&self.schema, mask, layout)?;
        let enc = if plan.any_day {
            let x = self.encoder_input(e, example, &plan.enc_rows, &plan.enc_covs, &plan.enc_present)?;
            Some(self.encoder(e, x, plan.key_mask.as_ref())?)
        } else {
            None
        };
        let y = self.decoder_input(e, example, &plan.dec_covs, &plan.dec_present)?;
        let first = &self.ids.dec[0];
        let y = self.decoder_self(e, first, y)?;
        let q = match &enc {
            Some(_) => Some(self.linear(e, &y, &first.cross.q)?),
            None => None,
        };
        let y = self.decoder_rest(e, 0, y, q, enc.as_ref(), plan.key_mask.as_ref())?;
        self.head(e, &y)
    }

    /// Embedding of one time step. `values` holds one value per variable
    /// (the target first for encoder steps), `present` which of them are visible.
    /// With no variable present the learned null-step embedding is returned.
    pub fn embed_step(&self, encoder_step: bool, values: &[f64], present: &[bool]) -> Result<Tensor> {
        let mut vars: Vec<Embed> = Vec::new();
        if encoder_step {
            vars.push(self.ids.target);
        }
        vars.extend(self.ids.covariates.iter().copied());
        if values.len() != vars.len() || present.len() != vars.len() {
            return Err(Error::invalid("one value and one presence flag per variable"));
        }
        if !present.iter().any(|p| *p) {
            return Ok(self.tensors[self.ids.null_step].as_ref().clone());
        }
        let mut e = Eager;
        let cols: Vec<(Embed, Vec<f64>)> = vars.into_iter().zip(values).map(|(v, x)| (v, vec![*x])).collect();
        let out = self.embed_vars(&mut e, &cols, present)?;
        out.as_ref().clone().reshape(&[self.config.d_model])
    }

    fn p<E: Exec>(&self, e: &mut E, id: usize) -> E::V {
        e.param(id, &self.tensors[id])
    }

    fn linear<E: Exec>(&self, e: &mut E, x: &E::V, l: &Linear) -> Result<E::V> {
        let w = self.p(e, l.w);
        let b = self.p(e, l.b);
        let y = e.matmul(x, &w)?;
        e.add_row(&y, &b)
    }

    fn norm<E: Exec>(&self, e: &mut E, x: &E::V, n: &Norm) -> Result<E::V> {
        let g = self.p(e, n.g);
        let b = self.p(e, n.b);
        e.layer_norm(x, &g, &b)
    }

    /// `norm(x + dropout(delta))`
    fn add_norm<E: Exec>(&self, e: &mut E, x: &E::V, delta: &E::V, n: &Norm) -> Result<E::V> {
        let d = e.dropout(delta)?;
        let s = e.add(x, &d)?;
        self.norm(e, &s, n)
    }

    fn ffn<E: Exec>(&self, e: &mut E, x: &E::V, f: &Ffn) -> Result<E::V> {
        let h = self.linear(e, x, &f.up)?;
        let h = e.relu(&h);
        self.linear(e, &h, &f.down)
    }

    fn embed_var<E: Exec>(&self, e: &mut E, var: Embed, values: &[f64]) -> Result<E::V> {
        match var {
            Embed::Table(id) => {
                let idx: Vec<usize> = values.iter().map(|v| *v as usize).collect();
                let table = self.p(e, id);
                e.gather(&table, &idx)
            }
            Embed::Linear(l) => {
                let x = e.constant(Tensor::matrix(
                    values.len(),
                    1,
                    values.iter().map(|v| *v as f32).collect(),
                ));
                self.linear(e, &x, &l)
            }
        }
    }

    fn embed_vars<E: Exec>(&self, e: &mut E, vars: &[(Embed, Vec<f64>)], present: &[bool]) -> Result<E::V> {
        let parts = vars
            .iter()
            .map(|(v, values)| self.embed_var(e, *v, values))
            .collect::<Result<Vec<_>>>()?;
        let stacked = e.stack(&parts)?;
        e.feature_attention(&stacked, present, self.config.mean_query)
    }

    fn add_positions<E: Exec>(&self, e: &mut E, x: &E::V, positions: &[usize]) -> Result<E::V> {
        let pe = e.constant(self.positional.select_rows(positions));
        let y = e.add(x, &pe)?;
        e.dropout(&y)
    }

    /// Embedded and position-encoded encoder rows.
    fn encoder_input<E: Exec>(
        &self,
        e: &mut E,
        ex: &ForecastExample,
        rows: &[usize],
        covs: &[usize],
        present: &[bool],
    ) -> Result<E::V> {
        let mut vars = Vec::with_capacity(covs.len() + 1);
        vars.push((
            self.ids.target,
            rows.iter().map(|r| ex.past_target[*r]).collect::<Vec<_>>(),
        ));
        for c in covs {
            vars.push((
                self.ids.covariates[*c],
                rows.iter().map(|r| ex.covariates[*c][*r]).collect(),
            ));
        }
        let x = self.embed_vars(e, &vars, present)?;
        self.add_positions(e, &x, rows)
    }

    fn project_qkv<E: Exec>(&self, e: &mut E, x: &E::V, a: &Attn) -> Result<[E::V; 3]> {
        Ok([
            self.linear(e, x, &a.q)?,
            self.linear(e, x, &a.k)?,
            self.linear(e, x, &a.v)?,
        ])
    }

    /// One encoder layer given its input and the input's q/k/v projections.
    fn encoder_layer<E: Exec>(
        &self,
        e: &mut E,
        l: &EncLayer,
        x: E::V,
        qkv: [E::V; 3],
        mask: Option<&AttnMask>,
    ) -> Result<E::V> {
        let [q, k, v] = qkv;
        let a = e.attention(&q, &k, &v, self.config.heads, mask)?;
        let a = self.linear(e, &a, &l.attn.o)?;
        let x = self.add_norm(e, &x, &a, &l.ln1)?;
        let f = self.ffn(e, &x, &l.ffn)?;
        self.add_norm(e, &x, &f, &l.ln2)
    }

    fn encoder<E: Exec>(&self, e: &mut E, x: E::V, mask: Option<&AttnMask>) -> Result<E::V> {
        self.encoder_from(e, 0, x, None, mask)
    }

    /// Runs encoder layers `from..`, optionally with precomputed q/k/v for layer `from`.
    fn encoder_from<E: Exec>(
        &self,
        e: &mut E,
        from: usize,
        mut x: E::V,
        mut qkv: Option<[E::V; 3]>,
        mask: Option<&AttnMask>,
    ) -> Result<E::V> {
        for l in &self.ids.enc[from..] {
            let p = match qkv.take() {
                Some(p) => p,
                None => self.project_qkv(e, &x, &l.attn)?,
            };
            x = self.encoder_layer(e, l, x, p, mask)?;
        }
        Ok(x)
    }

    fn decoder_input<E: Exec>(
        &self,
        e: &mut E,
        ex: &ForecastExample,
        covs: &[usize],
        present: &[bool],
    ) -> Result<E::V> {
        let lb = self.schema.lookback();
        let h = self.schema.horizon();
        let positions: Vec<usize> = (lb..lb + h).collect();
        let x = if !present.iter().any(|p| *p) {
            let zeros = e.constant(Tensor::zeros(&[h, self.config.d_model]));
            let null = self.p(e, self.ids.null_step);
            e.add_row(&zeros, &null)?
        } else {
            let vars: Vec<(Embed, Vec<f64>)> = covs
                .iter()
                .map(|c| (self.ids.covariates[*c], ex.covariates[*c][lb..lb + h].to_vec()))
                .collect();
            self.embed_vars(e, &vars, present)?
        };
        self.add_positions(e, &x, &positions)
    }

    fn decoder_self<E: Exec>(&self, e: &mut E, l: &DecLayer, y: E::V) -> Result<E::V> {
        let [q, k, v] = self.project_qkv(e, &y, &l.self_attn)?;
        let a = e.attention(&q, &k, &v, self.config.heads, None)?;
        let a = self.linear(e, &a, &l.self_attn.o)?;
        self.add_norm(e, &y, &a, &l.ln1)
    }

    /// Cross-attention and feed-forward of decoder layer `from`, then all later layers.
    /// `q` is the cross-attention query projection of `y` (unused without encoder).
    fn decoder_rest<E: Exec>(
        &self,
        e: &mut E,
        from: usize,
        mut y: E::V,
        mut q: Option<E::V>,
        enc: Option<&E::V>,
        mask: Option<&AttnMask>,
    ) -> Result<E::V> {
        for (i, l) in self.ids.dec.iter().enumerate().skip(from) {
            if i > from {
                y = self.decoder_self(e, l, y)?;
            }
            let c = match enc {
                Some(enc) => {
                    let q = match q.take() {
                        Some(q) => q,
                        None => self.linear(e, &y, &l.cross.q)?,
                    };
                    let k = self.linear(e, enc, &l.cross.k)?;
                    let v = self.linear(e, enc, &l.cross.v)?;
                    e.attention(&q, &k, &v, self.config.heads, mask)?
                }
                // No visible past: the attended context is the zero vector.
                None => e.constant(Tensor::zeros(&[self.schema.horizon(), self.config.d_model])),
            };
            let c = self.linear(e, &c, &l.cross.o)?;
            y = self.add_norm(e, &y, &c, &l.ln2)?;
            let f = self.ffn(e, &y, &l.ffn)?;
            y = self.add_norm(e, &y, &f, &l.ln3)?;
        }
        Ok(y)
    }

    fn head<E: Exec>(&self, e: &mut E, y: &E::V) -> Result<E::V> {
        self.linear(e, y, &self.ids.head)
    }
}

fn finish(y: &Tensor) -> Result<Vec<f64>> {
    if !y.is_finite() {
        return Err(Error::NonFinite("forward"));
    }
    Ok(y.data().iter().map(|v| *v as f64).collect())
}

/// Which rows and variables a coalition exposes, per layout.
struct Plan {
    any_day: bool,
    enc_rows: Vec<usize>,
    enc_covs: Vec<usize>,
    /// Presence flags for `[target, enc_covs...]`.
    enc_present: Vec<bool>,
    dec_covs: Vec<usize>,
    dec_present: Vec<bool>,
    key_mask: Option<AttnMask>,
}

impl Plan {
    fn new(schema: &FeatureSchema, mask: GroupMask, layout: Layout) -> Result<Self> {
        if mask.n() != schema.n_groups() {
            return Err(Error::invalid(format!(
                "mask has {} groups, schema has {}",
                mask.n(),
                schema.n_groups()
            )));
        }
        let days = schema.day_groups();
        let nc = schema.covariates().len();
        let day_on = |t: usize| mask.contains(t / STEPS_PER_DAY);
        let cov_on = |c: usize| mask.contains(days + c);
        let any_day = (0..days).any(|g| mask.contains(g));
        let present_covs: Vec<usize> = (0..nc).filter(|c| cov_on(*c)).collect();
        Ok(match layout {
            Layout::Masked => Self {
                any_day,
                enc_rows: (0..schema.lookback()).collect(),
                enc_covs: (0..nc).collect(),
                enc_present: std::iter::once(true).chain((0..nc).map(cov_on)).collect(),
                dec_covs: (0..nc).collect(),
                dec_present: (0..nc).map(cov_on).collect(),
                key_mask: Some(AttnMask::from_allowed((0..schema.lookback()).map(day_on).collect())),
            },
            Layout::Pruned => Self {
                any_day,
                enc_rows: (0..schema.lookback()).filter(|t| day_on(*t)).collect(),
                enc_present: vec![true; present_covs.len() + 1],
                enc_covs: present_covs.clone(),
                dec_present: vec![true; present_covs.len()],
                dec_covs: present_covs,
                key_mask: None,
            },
        })
    }
}
