//! Generator and discriminator networks.
//!
//! The generator maps `(x_t, t, y, x0_prev)` to a target estimate; its three
//! image inputs are concatenated along the channel (or feature) axis and its
//! head is `tanh`, matching data normalized to `[-1, 1]`. The discriminator
//! maps `(x_candidate, t, x_t)` to one logit per sample. Both inject a learned
//! projection of the sinusoidal time encoding at every stage.
//!
//! Two reference backbones are provided:
//!
//! * `mlp` for vector data: an input layer and `depth` residual SiLU layers of
//!   `width` units.
//! * `tiny_unet` for `(c, h, w)` images with even `h`, `w`: four stages
//!   (two at full resolution, two at half), each a two-convolution residual
//!   block, with a skip connection across the bottleneck. The discriminator
//!   uses the two encoder stages followed by global average pooling.
//!
//! No normalization layers are used. Both are small enough to train on a CPU
//! in minutes.

pub mod embedding;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;

pub use embedding::{time_embedding, time_embedding_batch};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::{substream, Purpose};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NetKind {
    Mlp,
    TinyUnet,
}

impl fmt::Display for NetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NetKind::Mlp => "mlp",
            NetKind::TinyUnet => "tiny_unet",
        })
    }
}

impl FromStr for NetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(NetKind::Mlp),
            "tiny_unet" | "unet" => Ok(NetKind::TinyUnet),
            other => Err(Error::Config(format!(
                "unknown net kind `{other}` (expected mlp or tiny_unet)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Generator,
    Discriminator,
}

impl Role {
    fn inputs(self) -> usize {
        match self {
            Role::Generator => 3,
            Role::Discriminator => 2,
        }
    }

    fn tag(self) -> u64 {
        match self {
            Role::Generator => 1,
            Role::Discriminator => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub kind: NetKind,
    /// Hidden units per mlp layer.
    pub width: usize,
    /// Residual hidden layers of the mlp.
    pub depth: usize,
    /// Base channel count of the tiny UNet (doubled at half resolution).
    pub channels: usize,
    pub time_embed_dim: usize,
    /// Width of the learned map applied to the time encoding.
    pub time_hidden: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            kind: NetKind::Mlp,
            width: 64,
            depth: 2,
            channels: 8,
            time_embed_dim: 256,
            time_hidden: 32,
        }
    }
}

impl NetConfig {
    pub fn validate(&self, sample_shape: &[usize]) -> Result<()> {
        if self.time_embed_dim < 2 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "time_embed_dim must be even and >= 2, got {}",
                self.time_embed_dim
            )));
        }
        if self.time_hidden == 0 {
            return Err(Error::Config("time_hidden must be positive".into()));
        }
        match self.kind {
            NetKind::Mlp => {
                if sample_shape.len() != 1 || self.width == 0 {
                    return Err(Error::Config(format!(
                        "mlp needs vector samples and width > 0, got shape {sample_shape:?}"
                    )));
                }
            }
            NetKind::TinyUnet => {
                let ok = sample_shape.len() == 3
                    && sample_shape[1].is_multiple_of(2)
                    && sample_shape[2].is_multiple_of(2)
                    && sample_shape[1] > 0
                    && sample_shape[2] > 0;
                if !ok || self.channels == 0 {
                    return Err(Error::Config(format!(
                        "tiny_unet needs (c, h, w) samples with even h, w and channels > 0, \
                         got shape {sample_shape:?}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: Arc<HashMap<String, usize>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.tensors[i] = value;
        } else {
            Arc::make_mut(&mut self.index).insert(name.clone(), self.names.len());
            self.names.push(name);
            self.tensors.push(value);
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Zero tensors with the same names and shapes.
    pub fn zeros_like(&self) -> ParamSet {
        let mut out = ParamSet::new();
        for (n, t) in self.iter() {
            out.insert(n, Tensor::zeros(t.shape()));
        }
        out
    }

    /// Places every tensor on `graph` as a leaf.
    pub fn leaves<'g>(&self, graph: &'g Graph) -> ParamVars<'g> {
        ParamVars {
            vars: self.tensors.iter().map(|t| graph.leaf(t.clone())).collect(),
            index: self.index.clone(),
        }
    }
}

/// Parameters placed on a graph, addressable by name.
pub struct ParamVars<'g> {
    vars: Vec<Var<'g>>,
    index: Arc<HashMap<String, usize>>,
}

impl<'g> ParamVars<'g> {
    pub fn get(&self, name: &str) -> Var<'g> {
        match self.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("missing parameter `{name}`"),
        }
    }

    pub fn all(&self) -> &[Var<'g>] {
        &self.vars
    }
}

/// A generator or discriminator with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    config: NetConfig,
    role: Role,
    sample_shape: Vec<usize>,
    params: ParamSet,
}

impl Network {
    /// Builds the architecture for `sample_shape` with uniform fan-in scaled
    /// initialization (`U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`, zero biases).
    pub fn new(config: NetConfig, role: Role, sample_shape: &[usize], seed: u64) -> Result<Self> {
        config.validate(sample_shape)?;
        let mut init = Init {
            params: ParamSet::new(),
            seed,
            role,
        };
        let th = config.time_hidden;
        init.dense("time.0", config.time_embed_dim, th);
        init.dense("time.1", th, th);
        match config.kind {
            NetKind::Mlp => {
                let d = sample_shape[0];
                let w = config.width;
                init.dense("in", role.inputs() * d, w);
                init.dense("in.temb", th, w);
                for l in 0..config.depth {
                    init.dense(&format!("hidden{l}"), w, w);
                    init.dense(&format!("hidden{l}.temb"), th, w);
                }
                let out = match role {
                    Role::Generator => d,
                    Role::Discriminator => 1,
                };
                init.dense("out", w, out);
            }
            NetKind::TinyUnet => {
                let c_img = sample_shape[0];
                let c = config.channels;
                init.conv("in", role.inputs() * c_img, c);
                init.resblock("enc1", c, th);
                init.conv("down", c, 2 * c);
                init.resblock("enc2", 2 * c, th);
                match role {
                    Role::Generator => {
                        init.resblock("mid", 2 * c, th);
                        init.conv("up", 3 * c, c);
                        init.resblock("dec1", c, th);
                        init.conv("out", c, c_img);
                    }
                    Role::Discriminator => {
                        init.dense("out", 2 * c, 1);
                    }
                }
            }
        }
        Ok(Network {
            config,
            role,
            sample_shape: sample_shape.to_vec(),
            params: init.params,
        })
    }

    /// Reassembles a network from stored parameters, checking every name and
    /// shape against the architecture.
    pub fn from_params(
        config: NetConfig,
        role: Role,
        sample_shape: &[usize],
        params: ParamSet,
    ) -> Result<Self> {
        let mut net = Network::new(config, role, sample_shape, 0)?;
        if params.len() != net.params.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                net.params.len(),
                params.len()
            )));
        }
        let mut ordered = ParamSet::new();
        for (name, expect) in net.params.iter() {
            let got = params
                .get(name)
                .ok_or_else(|| Error::Format(format!("missing parameter `{name}`")))?;
            if got.shape() != expect.shape() {
                return Err(Error::Format(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    got.shape(),
                    expect.shape()
                )));
            }
            ordered.insert(name, got.clone());
        }
        net.params = ordered;
        Ok(net)
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn check_inputs(&self, inputs: &[&Tensor], ts: &[usize]) -> Result<()> {
        let first = inputs[0];
        if first.sample_shape() != self.sample_shape.as_slice() {
            return Err(Error::Shape {
                expected: self.sample_shape.clone(),
                got: first.sample_shape().to_vec(),
            });
        }
        for x in &inputs[1..] {
            first.ensure_same_shape(x)?;
        }
        if ts.len() != first.batch() {
            return Err(Error::Shape {
                expected: vec![first.batch()],
                got: vec![ts.len()],
            });
        }
        Ok(())
    }

    /// Differentiable forward pass. `inputs` are `[x_t, y, x0_prev]` for the
    /// generator and `[x_candidate, x_t]` for the discriminator.
    pub fn forward<'g>(
        &self,
        graph: &'g Graph,
        params: &ParamVars<'g>,
        inputs: &[Var<'g>],
        ts: &[usize],
    ) -> Result<Var<'g>> {
        if inputs.len() != self.role.inputs() {
            return Err(Error::Config(format!(
                "{:?} takes {} inputs, got {}",
                self.role,
                self.role.inputs(),
                inputs.len()
            )));
        }
        let values: Vec<_> = inputs.iter().map(|v| v.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        self.check_inputs(&refs, ts)?;

        let emb = graph.constant(time_embedding_batch(ts, self.config.time_embed_dim)?);
        let temb = dense(params, "time.0", emb).silu();
        let temb = dense(params, "time.1", temb).silu();
        let x = graph.concat1(inputs);
        let out = match self.config.kind {
            NetKind::Mlp => self.mlp(params, x, temb),
            NetKind::TinyUnet => self.unet(graph, params, x, temb),
        };
        Ok(out)
    }

    fn mlp<'g>(&self, p: &ParamVars<'g>, x: Var<'g>, temb: Var<'g>) -> Var<'g> {
        let mut h = dense(p, "in", x).add(dense(p, "in.temb", temb)).silu();
        for l in 0..self.config.depth {
            let name = format!("hidden{l}");
            let r = dense(p, &name, h)
                .add(dense(p, &format!("{name}.temb"), temb))
                .silu();
            h = h.add(r);
        }
        let out = dense(p, "out", h);
        match self.role {
            Role::Generator => out.tanh(),
            Role::Discriminator => {
                let b = out.shape()[0];
                out.reshape(&[b])
            }
        }
    }

    fn unet<'g>(&self, graph: &'g Graph, p: &ParamVars<'g>, x: Var<'g>, temb: Var<'g>) -> Var<'g> {
        let h0 = conv(p, "in", x);
        let h1 = resblock(p, "enc1", h0, temb);
        let d = conv(p, "down", h1.avgpool2());
        let h2 = resblock(p, "enc2", d, temb);
        match self.role {
            Role::Generator => {
                let h3 = resblock(p, "mid", h2, temb);
                let u = graph.concat1(&[h3.upsample2(), h1]);
                let u = conv(p, "up", u);
                let h4 = resblock(p, "dec1", u, temb);
                conv(p, "out", h4.silu()).tanh()
            }
            Role::Discriminator => {
                let s = h2.shape();
                let pooled = h2
                    .reduce_to(&[s[0], s[1], 1, 1])
                    .scale(1.0 / (s[2] * s[3]) as f64)
                    .reshape(&[s[0], s[1]])
                    .silu();
                dense(p, "out", pooled).reshape(&[s[0]])
            }
        }
    }

    /// Generator evaluation without gradients.
    pub fn generate(
        &self,
        x_t: &Tensor,
        ts: &[usize],
        y: &Tensor,
        x0_prev: &Tensor,
    ) -> Result<Tensor> {
        self.expect_role(Role::Generator)?;
        self.check_inputs(&[x_t, y, x0_prev], ts)?;
        let g = Graph::new();
        let pv = self.params.leaves(&g);
        let inputs = [g.constant(x_t.clone()), g.constant(y.clone()), g.constant(x0_prev.clone())];
        let out = self.forward(&g, &pv, &inputs, ts)?;
        Ok(out.value().as_ref().clone())
    }

    /// Discriminator logits without gradients, shape `(batch,)`.
    pub fn discriminate(&self, x_candidate: &Tensor, ts: &[usize], x_t: &Tensor) -> Result<Tensor> {
        self.expect_role(Role::Discriminator)?;
        self.check_inputs(&[x_candidate, x_t], ts)?;
        let g = Graph::new();
        let pv = self.params.leaves(&g);
        let inputs = [g.constant(x_candidate.clone()), g.constant(x_t.clone())];
        let out = self.forward(&g, &pv, &inputs, ts)?;
        Ok(out.value().as_ref().clone())
    }

    fn expect_role(&self, role: Role) -> Result<()> {
        if self.role != role {
            return Err(Error::Config(format!("network is a {:?}, not a {role:?}", self.role)));
        }
        Ok(())
    }
}

fn dense<'g>(p: &ParamVars<'g>, name: &str, x: Var<'g>) -> Var<'g> {
    let w = p.get(&format!("{name}.w"));
    let b = p.get(&format!("{name}.b"));
    let y = x.matmul(w);
    let s = y.shape();
    y.add(b.reshape(&[1, s[1]]).broadcast(&s))
}

fn conv<'g>(p: &ParamVars<'g>, name: &str, x: Var<'g>) -> Var<'g> {
    let w = p.get(&format!("{name}.w"));
    let b = p.get(&format!("{name}.b"));
    let y = x.conv2d(w);
    let s = y.shape();
    y.add(b.reshape(&[1, s[1], 1, 1]).broadcast(&s))
}

fn resblock<'g>(p: &ParamVars<'g>, name: &str, x: Var<'g>, temb: Var<'g>) -> Var<'g> {
    let r = conv(p, &format!("{name}.conv0"), x.silu());
    let s = r.shape();
    let t = dense(p, &format!("{name}.temb"), temb)
        .reshape(&[s[0], s[1], 1, 1])
        .broadcast(&s);
    let r = conv(p, &format!("{name}.conv1"), r.add(t).silu());
    x.add(r)
}

struct Init {
    params: ParamSet,
    seed: u64,
    role: Role,
}

impl Init {
    fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) {
        let bound = (6.0 / fan_in as f64).sqrt();
        // One substream per tensor, keyed by its position.
        let key = self.params.len() as u64;
        let mut rng = substream(self.seed, self.role.tag(), key, Purpose::Init);
        let t = Tensor::from_fn(shape, |_| rng.random_range(-bound..bound));
        self.params.insert(name, t);
    }

    fn dense(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        self.uniform(&format!("{name}.w"), &[fan_in, fan_out], fan_in);
        self.params.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize) {
        self.uniform(&format!("{name}.w"), &[cout, cin, 3, 3], cin * 9);
        self.params.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
    }

    fn resblock(&mut self, name: &str, ch: usize, time_hidden: usize) {
        self.conv(&format!("{name}.conv0"), ch, ch);
        self.dense(&format!("{name}.temb"), time_hidden, ch);
        self.conv(&format!("{name}.conv1"), ch, ch);
    }
}
