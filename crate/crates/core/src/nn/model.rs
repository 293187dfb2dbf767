use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::graph::{Graph, NodeId};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Eye {
    Os,
    Od,
}

impl Eye {
    pub const BOTH: [Eye; 2] = [Eye::Os, Eye::Od];

    pub fn index(self) -> usize {
        match self {
            Eye::Os => 0,
            Eye::Od => 1,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Eye::Os => "os",
            Eye::Od => "od",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraTarget {
    Query,
    Key,
    Value,
    Output,
}

impl LoraTarget {
    const ALL: [LoraTarget; 4] = [LoraTarget::Query, LoraTarget::Key, LoraTarget::Value, LoraTarget::Output];

    fn tag(self) -> &'static str {
        match self {
            LoraTarget::Query => "q",
            LoraTarget::Key => "k",
            LoraTarget::Value => "v",
            LoraTarget::Output => "o",
        }
    }
}

/// Where the per-eye adapters sit.
///
/// * `AtFfn`: a parallel branch beside each block's MLP, reading the MLP's
///   normalized input: `h + MLP(LN(h)) + s·up(ReLU(down(LN(h))))`.
/// * `BeforeFfn`: a serial residual adapter on each block's MLP input:
///   `a = LN(h); a' = a + s·up(ReLU(down(a))); h + MLP(a')`.
/// * `AfterEmbedding`: one residual adapter per eye on the position-embedded
///   tokens, before the first block.
/// * `BeforeFc`: one residual adapter per eye on the pooled feature, before
///   the heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterPosition {
    AtFfn,
    AfterEmbedding,
    BeforeFfn,
    BeforeFc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadSharing {
    Shared,
    PerEye,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub lora_rank: usize,
    /// Defaults to the rank.
    pub lora_alpha: Option<f64>,
    pub lora_targets: Vec<LoraTarget>,
    pub adapter_dim: usize,
    pub adapter_scale: f64,
    pub adapter_position: AdapterPosition,
    pub adapters_enabled: bool,
    pub head_sharing: HeadSharing,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 32,
            patch_size: 4,
            channels: 1,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            lora_rank: 4,
            lora_alpha: None,
            lora_targets: vec![LoraTarget::Query, LoraTarget::Value],
            adapter_dim: 1,
            adapter_scale: 0.1,
            adapter_position: AdapterPosition::AtFfn,
            adapters_enabled: true,
            head_sharing: HeadSharing::Shared,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if !matches!(self.channels, 1 | 3) {
            return fail(format!("channels must be 1 or 3, got {}", self.channels));
        }
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return fail(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.depth == 0 || self.mlp_ratio == 0 {
            return fail("depth and mlp_ratio must be at least 1".into());
        }
        if self.lora_rank == 0 {
            return fail("lora_rank must be at least 1".into());
        }
        if self.adapter_dim == 0 {
            return fail("adapter_dim must be at least 1".into());
        }
        if !(self.adapter_scale > 0.0 && self.adapter_scale <= 1.0) {
            return fail(format!("adapter_scale must lie in (0, 1], got {}", self.adapter_scale));
        }
        if self.lora_alpha.is_some_and(|a| !a.is_finite() || a <= 0.0) {
            return fail("lora_alpha must be positive".into());
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        let n = self.image_size / self.patch_size;
        n * n
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }

    pub fn lora_scaling(&self) -> f64 {
        self.lora_alpha.unwrap_or(self.lora_rank as f64) / self.lora_rank as f64
    }

    fn has_target(&self, t: LoraTarget) -> bool {
        self.lora_targets.contains(&t)
    }
}

/// Forward variant: the full adapted model, or the plain frozen trunk with
/// every LoRA and adapter branch skipped.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardMode {
    Full,
    FrozenTrunk,
}

#[derive(Clone, Copy, Debug)]
pub struct LoraIds {
    pub a: ParamId,
    pub b: ParamId,
}

/// A frozen projection with an optional low-rank trainable update.
#[derive(Clone, Copy, Debug)]
pub struct LoraLinear {
    pub w: ParamId,
    pub bias: ParamId,
    pub lora: Option<LoraIds>,
    pub scaling: f64,
}

impl LoraLinear {
    /// `x·Wᵀ + b + (alpha/r)·(x·Aᵀ)·Bᵀ`.
    pub fn forward(&self, g: &mut Graph, x: NodeId, mode: ForwardMode) -> Result<NodeId> {
        let (w, b) = (g.param(self.w), g.param(self.bias));
        let base = g.linear(x, w, Some(b))?;
        match (self.lora, mode) {
            (Some(l), ForwardMode::Full) => {
                let (a, bb) = (g.param(l.a), g.param(l.b));
                let down = g.linear(x, a, None)?;
                let up = g.linear(down, bb, None)?;
                let up = g.scale(up, self.scaling);
                g.add(base, up)
            }
            _ => Ok(base),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EyeAdapter {
    pub down: ParamId,
    pub up: ParamId,
    pub scale: f64,
    pub eye: Eye,
}

impl EyeAdapter {
    /// The branch `s·up(ReLU(down(x)))`, without the residual.
    pub fn branch(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let (d, u) = (g.param(self.down), g.param(self.up));
        let h = g.linear(x, d, None)?;
        let h = g.relu(h);
        let h = g.linear(h, u, None)?;
        Ok(g.scale(h, self.scale))
    }
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    weight: ParamId,
    bias: ParamId,
}

impl Norm {
    fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        g.layer_norm(x, w, b)
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1: Norm,
    q: LoraLinear,
    k: LoraLinear,
    v: LoraLinear,
    o: LoraLinear,
    ln2: Norm,
    fc1: (ParamId, ParamId),
    fc2: (ParamId, ParamId),
    adapters: Option<[EyeAdapter; 2]>,
}

#[derive(Clone, Copy, Debug)]
struct Heads {
    reg: (ParamId, ParamId),
    cls: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
struct Layout {
    patch: (ParamId, ParamId),
    pos: ParamId,
    embed_adapters: Option<[EyeAdapter; 2]>,
    blocks: Vec<Block>,
    norm: Norm,
    fc_adapters: Option<[EyeAdapter; 2]>,
    heads: Vec<Heads>,
}

#[derive(Clone, Copy, Debug)]
pub struct EyeOutput {
    pub mu: NodeId,
    pub logit: NodeId,
}

/// Exact parameter counts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamReport {
    pub n_total: usize,
    pub n_trainable: usize,
    pub per_group: BTreeMap<String, usize>,
}

impl ParamReport {
    pub fn trainable_fraction(&self) -> f64 {
        self.n_trainable as f64 / self.n_total as f64
    }
}

/// Parameter group from a parameter name.
pub fn param_group(name: &str) -> &'static str {
    if name.contains("lora_") {
        "lora"
    } else if name.contains("adapter") {
        "adapter"
    } else if name.starts_with("head") {
        "head"
    } else {
        "trunk"
    }
}

struct Init {
    trunk: ChaCha8Rng,
    lora: ChaCha8Rng,
    adapter: ChaCha8Rng,
    head: ChaCha8Rng,
}

fn stream(seed: u64, k: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(k);
    r
}

fn normal(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let d = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| d.sample(rng))
}

/// Bi-channel vision transformer: shared frozen trunk, LoRA on attention
/// projections, one adapter set per eye and regression/classification heads.
#[derive(Clone, Debug)]
pub struct BiChannelModel {
    config: ModelConfig,
    seed: u64,
    store: ParamStore,
    layout: Layout,
}

impl BiChannelModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init {
            trunk: stream(seed, 0),
            lora: stream(seed, 1),
            adapter: stream(seed, 2),
            head: stream(seed, 3),
        };
        let mut s = ParamStore::new();
        let c = &config;
        let d = c.embed_dim;
        let hidden = d * c.mlp_ratio;

        let frozen_linear = |s: &mut ParamStore, init: &mut Init, name: &str, out: usize, inp: usize| {
            let w = s.add(
                format!("{name}.weight"),
                normal(&mut init.trunk, vec![out, inp], 1.0 / (inp as f64).sqrt()),
                false,
            );
            let b = s.add(format!("{name}.bias"), Tensor::zeros(vec![out]), false);
            (w, b)
        };
        let norm = |s: &mut ParamStore, name: &str| Norm {
            weight: s.add(format!("{name}.weight"), Tensor::filled(vec![d], 1.0), false),
            bias: s.add(format!("{name}.bias"), Tensor::zeros(vec![d]), false),
        };
        let adapter_pair = |s: &mut ParamStore, init: &mut Init, prefix: &str| {
            Eye::BOTH.map(|eye| {
                let down = s.add(
                    format!("{prefix}.{}.down", eye.tag()),
                    normal(&mut init.adapter, vec![c.adapter_dim, d], 1.0 / (d as f64).sqrt()),
                    true,
                );
                let up = s.add(format!("{prefix}.{}.up", eye.tag()), Tensor::zeros(vec![d, c.adapter_dim]), true);
                EyeAdapter {
                    down,
                    up,
                    scale: c.adapter_scale,
                    eye,
                }
            })
        };
        let adapters_at = |p: AdapterPosition| c.adapters_enabled && c.adapter_position == p;

        let patch = frozen_linear(&mut s, &mut init, "patch", d, c.patch_dim());
        let pos = s.add("pos", normal(&mut init.trunk, vec![c.tokens(), d], 0.02), false);
        let embed_adapters = adapters_at(AdapterPosition::AfterEmbedding)
            .then(|| adapter_pair(&mut s, &mut init, "adapter.embed"));

        let mut blocks = Vec::with_capacity(c.depth);
        for i in 0..c.depth {
            let p = format!("blocks.{i}");
            let ln1 = norm(&mut s, &format!("{p}.ln1"));
            let mut proj = LoraTarget::ALL.map(|t| {
                let (w, bias) = frozen_linear(&mut s, &mut init, &format!("{p}.attn.{}", t.tag()), d, d);
                LoraLinear {
                    w,
                    bias,
                    lora: None,
                    scaling: c.lora_scaling(),
                }
            });
            for (t, pr) in LoraTarget::ALL.iter().zip(proj.iter_mut()) {
                if c.has_target(*t) {
                    let base = format!("{p}.attn.{}", t.tag());
                    let r = c.lora_rank;
                    let a = s.add(
                        format!("{base}.lora_a"),
                        normal(&mut init.lora, vec![r, d], 1.0 / (r as f64).sqrt()),
                        true,
                    );
                    let b = s.add(format!("{base}.lora_b"), Tensor::zeros(vec![d, r]), true);
                    pr.lora = Some(LoraIds { a, b });
                }
            }
            let ln2 = norm(&mut s, &format!("{p}.ln2"));
            let fc1 = frozen_linear(&mut s, &mut init, &format!("{p}.mlp.fc1"), hidden, d);
            let fc2 = frozen_linear(&mut s, &mut init, &format!("{p}.mlp.fc2"), d, hidden);
            let adapters = (adapters_at(AdapterPosition::AtFfn) || adapters_at(AdapterPosition::BeforeFfn))
                .then(|| adapter_pair(&mut s, &mut init, &format!("{p}.adapter")));
            let [q, k, v, o] = proj;
            blocks.push(Block {
                ln1,
                q,
                k,
                v,
                o,
                ln2,
                fc1,
                fc2,
                adapters,
            });
        }
        let norm_f = norm(&mut s, "norm");
        let fc_adapters = adapters_at(AdapterPosition::BeforeFc).then(|| adapter_pair(&mut s, &mut init, "adapter.fc"));

        let head_names: Vec<String> = match c.head_sharing {
            HeadSharing::Shared => vec!["head".into()],
            HeadSharing::PerEye => Eye::BOTH.iter().map(|e| format!("head.{}", e.tag())).collect(),
        };
        let heads = head_names
            .iter()
            .map(|h| {
                let mut lin = |name: String| {
                    let w = s.add(format!("{name}.weight"), normal(&mut init.head, vec![1, d], 0.02), true);
                    let b = s.add(format!("{name}.bias"), Tensor::zeros(vec![1]), true);
                    (w, b)
                };
                Heads {
                    reg: lin(format!("{h}.reg")),
                    cls: lin(format!("{h}.cls")),
                }
            })
            .collect();

        let layout = Layout {
            patch,
            pos,
            embed_adapters,
            blocks,
            norm: norm_f,
            fc_adapters,
            heads,
        };
        Ok(BiChannelModel {
            config,
            seed,
            store: s,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn heads(&self, eye: Eye) -> Heads {
        self.layout.heads[eye.index() % self.layout.heads.len()]
    }

    /// The `(weight, bias)` ids of the regression and classification heads
    /// used by `eye`.
    pub fn head_ids(&self, eye: Eye) -> [(ParamId, ParamId); 2] {
        let h = self.heads(eye);
        [h.reg, h.cls]
    }

    /// Adapter parameter ids belonging to one eye.
    pub fn adapter_ids(&self, eye: Eye) -> Vec<ParamId> {
        let l = &self.layout;
        l.embed_adapters
            .iter()
            .chain(l.blocks.iter().filter_map(|b| b.adapters.as_ref()))
            .chain(l.fc_adapters.iter())
            .flat_map(|pair| {
                let a = pair[eye.index()];
                [a.down, a.up]
            })
            .collect()
    }

    pub fn adapter_count(&self) -> usize {
        let l = &self.layout;
        2 * (l.embed_adapters.iter().count()
            + l.blocks.iter().filter(|b| b.adapters.is_some()).count()
            + l.fc_adapters.iter().count())
    }

    pub fn ids_in_group(&self, group: &str) -> Vec<ParamId> {
        self.store
            .ids()
            .filter(|&id| param_group(self.store.name(id)) == group)
            .collect()
    }

    /// Flips every trunk parameter between frozen and trainable.
    pub fn set_trunk_trainable(&mut self, flag: bool) {
        for id in self.ids_in_group("trunk") {
            self.store.set_trainable(id, flag);
        }
    }

    /// Sets the regression and classification biases of every head.
    pub fn set_head_biases(&mut self, reg: f64, cls: f64) {
        for h in self.layout.heads.clone() {
            self.store.get_mut(h.reg.1).data_mut()[0] = reg;
            self.store.get_mut(h.cls.1).data_mut()[0] = cls;
        }
    }

    pub fn trainable_parameter_report(&self) -> ParamReport {
        let mut per_group = BTreeMap::new();
        for id in self.store.ids() {
            let name = self.store.name(id);
            let group = if self.store.is_trainable(id) {
                param_group(name)
            } else {
                "frozen"
            };
            *per_group.entry(group.to_string()).or_insert(0) += self.store.get(id).numel();
        }
        ParamReport {
            n_total: self.store.n_total(),
            n_trainable: self.store.n_trainable(),
            per_group,
        }
    }

    /// Splits `batch` images (each `C×H×W`, row-major) into patch rows.
    pub fn patchify(&self, images: &[f64], batch: usize) -> Result<Vec<f64>> {
        let c = &self.config;
        if images.len() != batch * c.image_len() {
            return Err(Error::ShapeMismatch {
                expected: vec![batch, c.channels, c.image_size, c.image_size],
                got: vec![images.len()],
            });
        }
        let (s, p, np) = (c.image_size, c.patch_size, c.image_size / c.patch_size);
        let mut out = Vec::with_capacity(images.len());
        for img in images.chunks_exact(c.image_len()) {
            for pi in 0..np {
                for pj in 0..np {
                    for ch in 0..c.channels {
                        for y in 0..p {
                            let row = (ch * s + pi * p + y) * s + pj * p;
                            out.extend_from_slice(&img[row..row + p]);
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Token features after the final layer norm, `[batch·tokens, embed_dim]`.
    pub fn encode_tokens(&self, g: &mut Graph, images: &[f64], batch: usize, eye: Eye, mode: ForwardMode) -> Result<NodeId> {
        let c = &self.config;
        let l = &self.layout;
        let full = mode == ForwardMode::Full;
        let t = c.tokens();
        let patches = self.patchify(images, batch)?;
        let x = g.input(batch * t, c.patch_dim(), patches)?;
        let (pw, pb) = (g.param(l.patch.0), g.param(l.patch.1));
        let e = g.linear(x, pw, Some(pb))?;
        let pos = g.param(l.pos);
        let mut h = g.add_broadcast(e, pos)?;
        if let (true, Some(ad)) = (full, &l.embed_adapters) {
            let br = ad[eye.index()].branch(g, h)?;
            h = g.add(h, br)?;
        }
        for blk in &l.blocks {
            let a = blk.ln1.forward(g, h)?;
            let q = blk.q.forward(g, a, mode)?;
            let k = blk.k.forward(g, a, mode)?;
            let v = blk.v.forward(g, a, mode)?;
            let att = g.attention(q, k, v, batch, t, c.heads)?;
            let o = blk.o.forward(g, att, mode)?;
            h = g.add(h, o)?;

            let m = blk.ln2.forward(g, h)?;
            let adapter = blk.adapters.filter(|_| full).map(|ad| ad[eye.index()]);
            let mlp_in = match (adapter, c.adapter_position) {
                (Some(ad), AdapterPosition::BeforeFfn) => {
                    let br = ad.branch(g, m)?;
                    g.add(m, br)?
                }
                _ => m,
            };
            let (w1, b1) = (g.param(blk.fc1.0), g.param(blk.fc1.1));
            let f = g.linear(mlp_in, w1, Some(b1))?;
            let f = g.gelu(f);
            let (w2, b2) = (g.param(blk.fc2.0), g.param(blk.fc2.1));
            let mut f = g.linear(f, w2, Some(b2))?;
            if let (Some(ad), AdapterPosition::AtFfn) = (adapter, c.adapter_position) {
                let br = ad.branch(g, m)?;
                f = g.add(f, br)?;
            }
            h = g.add(h, f)?;
        }
        l.norm.forward(g, h)
    }

    /// Pooled feature `[batch, embed_dim]` fed to the heads.
    pub fn features(&self, g: &mut Graph, images: &[f64], batch: usize, eye: Eye, mode: ForwardMode) -> Result<NodeId> {
        let tok = self.encode_tokens(g, images, batch, eye, mode)?;
        let mut pooled = g.mean_tokens(tok, self.config.tokens())?;
        if let (ForwardMode::Full, Some(ad)) = (mode, &self.layout.fc_adapters) {
            let br = ad[eye.index()].branch(g, pooled)?;
            pooled = g.add(pooled, br)?;
        }
        Ok(pooled)
    }

    /// Builds the forward pass for a batch of one eye's images.
    pub fn forward(&self, g: &mut Graph, images: &[f64], batch: usize, eye: Eye, mode: ForwardMode) -> Result<EyeOutput> {
        let pooled = self.features(g, images, batch, eye, mode)?;
        let h = self.heads(eye);
        let (rw, rb) = (g.param(h.reg.0), g.param(h.reg.1));
        let mu = g.linear(pooled, rw, Some(rb))?;
        let (cw, cb) = (g.param(h.cls.0), g.param(h.cls.1));
        let logit = g.linear(pooled, cw, Some(cb))?;
        Ok(EyeOutput { mu, logit })
    }

    /// `(mu, logit)` per image, evaluated in chunks.
    pub fn predict(&self, images: &[f64], batch: usize, eye: Eye, mode: ForwardMode) -> Result<Vec<(f64, f64)>> {
        const CHUNK: usize = 64;
        let len = self.config.image_len();
        if images.len() != batch * len {
            return Err(Error::ShapeMismatch {
                expected: vec![batch, len],
                got: vec![images.len()],
            });
        }
        let mut out = Vec::with_capacity(batch);
        for chunk in images.chunks(CHUNK * len) {
            let n = chunk.len() / len;
            let mut g = Graph::new(&self.store);
            let o = self.forward(&mut g, chunk, n, eye, mode)?;
            out.extend(g.value(o.mu).iter().copied().zip(g.value(o.logit).iter().copied()));
        }
        Ok(out)
    }

    /// One image shaped `[C, H, W]` (or `[H, W]` for one channel).
    pub fn forward_eye(&self, image: &Tensor, eye: Eye) -> Result<(f64, f64)> {
        let c = &self.config;
        let ok = match image.shape() {
            [h, w] => c.channels == 1 && *h == c.image_size && *w == c.image_size,
            [ch, h, w] => *ch == c.channels && *h == c.image_size && *w == c.image_size,
            _ => false,
        };
        if !ok {
            return Err(Error::ShapeMismatch {
                expected: vec![c.channels, c.image_size, c.image_size],
                got: image.shape().to_vec(),
            });
        }
        Ok(self.predict(image.data(), 1, eye, ForwardMode::Full)?[0])
    }

    pub(crate) fn from_parts(config: ModelConfig, seed: u64, values: Vec<(String, Tensor, bool)>) -> Result<Self> {
        let mut m = BiChannelModel::new(config, seed)?;
        if values.len() != m.store.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} parameters, model expects {}",
                values.len(),
                m.store.len()
            )));
        }
        for (name, t, trainable) in values {
            let id = m
                .store
                .id(&name)
                .ok_or_else(|| Error::Config(format!("unknown parameter {name} in checkpoint")))?;
            if m.store.get(id).shape() != t.shape() {
                return Err(Error::ShapeMismatch {
                    expected: m.store.get(id).shape().to_vec(),
                    got: t.shape().to_vec(),
                });
            }
            m.store.assign(id, t.data())?;
            m.store.set_trainable(id, trainable);
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};

    use super::*;
    use crate::oracle::finite_diff_grad;

    fn small() -> ModelConfig {
        ModelConfig {
            image_size: 8,
            patch_size: 4,
            embed_dim: 8,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            lora_rank: 2,
            adapter_dim: 2,
            ..ModelConfig::default()
        }
    }

    fn images(n: usize, len: usize, seed: u64) -> Vec<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..n * len).map(|_| r.random_range(-1.0..1.0)).collect()
    }

    /// Randomizes every trainable parameter so zero-init branches are live.
    fn perturb(m: &mut BiChannelModel, seed: u64) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        for id in m.store().trainable_ids() {
            let vals: Vec<f64> = m.store().get(id).data().iter().map(|_| r.random_range(-0.5..0.5)).collect();
            m.store_mut().assign(id, &vals).unwrap();
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = [
            ModelConfig { patch_size: 5, ..ModelConfig::default() },
            ModelConfig { lora_rank: 0, ..ModelConfig::default() },
            ModelConfig { adapter_dim: 0, ..ModelConfig::default() },
            ModelConfig { adapter_scale: 0.0, ..ModelConfig::default() },
            ModelConfig { adapter_scale: 1.5, ..ModelConfig::default() },
            ModelConfig { heads: 3, ..ModelConfig::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
    }

    #[test]
    fn config_json_defaults_fill_in() {
        let c: ModelConfig = serde_json::from_str(r#"{"lora_rank": 8, "adapter_position": "before_fc"}"#).unwrap();
        assert_eq!(c.lora_rank, 8);
        assert_eq!(c.lora_scaling(), 1.0);
        assert_eq!(c.adapter_position, AdapterPosition::BeforeFc);
        assert_eq!(c.embed_dim, 64);
        assert!(serde_json::from_str::<ModelConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn lora_adds_512_per_64_square_layer_at_rank_4() {
        let c = ModelConfig {
            lora_targets: vec![LoraTarget::Query],
            depth: 1,
            adapters_enabled: false,
            ..ModelConfig::default()
        };
        let m = BiChannelModel::new(c, 0).unwrap();
        assert_eq!(m.trainable_parameter_report().per_group["lora"], 512);
    }

    #[test]
    fn default_counts() {
        let m = BiChannelModel::new(ModelConfig::default(), 0).unwrap();
        let r = m.trainable_parameter_report();
        assert_eq!(m.adapter_count(), 8);
        assert_eq!(r.per_group["adapter"], 8 * 128);
        assert_eq!(r.per_group["lora"], 4 * 2 * 512);
        assert_eq!(r.per_group["head"], 2 * 65);
        assert_eq!(r.n_trainable, r.per_group.iter().filter(|(k, _)| *k != "frozen").map(|(_, v)| v).sum::<usize>());
        assert_eq!(r.n_total, r.n_trainable + r.per_group["frozen"]);
        assert!(r.trainable_fraction() < 0.05, "{}", r.trainable_fraction());

        let off = BiChannelModel::new(
            ModelConfig {
                adapters_enabled: false,
                ..ModelConfig::default()
            },
            0,
        )
        .unwrap();
        let r = off.trainable_parameter_report();
        assert_eq!(r.n_trainable, 4 * 2 * 512 + 2 * 65);
        assert!(!r.per_group.contains_key("adapter"));
    }

    #[test]
    fn partition_is_exact() {
        let m = BiChannelModel::new(ModelConfig::default(), 1).unwrap();
        for id in m.store().ids() {
            let name = m.store().name(id);
            let trainable = m.store().is_trainable(id);
            assert_eq!(trainable, param_group(name) != "trunk", "{name}");
        }
    }

    #[test]
    fn zero_init_is_bitwise_frozen_trunk() {
        for pos in [
            AdapterPosition::AtFfn,
            AdapterPosition::BeforeFfn,
            AdapterPosition::AfterEmbedding,
            AdapterPosition::BeforeFc,
        ] {
            let c = ModelConfig {
                adapter_position: pos,
                lora_targets: LoraTarget::ALL.to_vec(),
                ..small()
            };
            let m = BiChannelModel::new(c, 2).unwrap();
            let x = images(3, m.config().image_len(), 3);
            for eye in Eye::BOTH {
                let full = m.predict(&x, 3, eye, ForwardMode::Full).unwrap();
                let plain = m.predict(&x, 3, eye, ForwardMode::FrozenTrunk).unwrap();
                for (a, b) in full.iter().zip(&plain) {
                    assert_eq!(a.0.to_bits(), b.0.to_bits());
                    assert_eq!(a.1.to_bits(), b.1.to_bits());
                }
            }
        }
    }

    #[test]
    fn eyes_differ_only_through_adapters() {
        let mut m = BiChannelModel::new(small(), 4).unwrap();
        perturb(&mut m, 5);
        let x = images(2, m.config().image_len(), 6);
        let os = m.predict(&x, 2, Eye::Os, ForwardMode::Full).unwrap();
        let od = m.predict(&x, 2, Eye::Od, ForwardMode::Full).unwrap();
        assert_ne!(os, od);
        // copy OS adapters onto OD
        for (a, b) in m.adapter_ids(Eye::Os).into_iter().zip(m.adapter_ids(Eye::Od)) {
            let v = m.store().get(a).data().to_vec();
            m.store_mut().assign(b, &v).unwrap();
        }
        let os = m.predict(&x, 2, Eye::Os, ForwardMode::Full).unwrap();
        let od = m.predict(&x, 2, Eye::Od, ForwardMode::Full).unwrap();
        assert_eq!(os, od);
    }

    #[test]
    fn routing_partition_is_exact() {
        let mut m = BiChannelModel::new(small(), 7).unwrap();
        perturb(&mut m, 8);
        let x = images(3, m.config().image_len(), 9);
        let mut g = Graph::new(m.store());
        let o = m.forward(&mut g, &x, 3, Eye::Od, ForwardMode::Full).unwrap();
        let grads = g.backward(&[(o.mu, &[1.0, -0.5, 0.25]), (o.logit, &[0.3, 0.2, -1.0])]).unwrap();
        for id in m.adapter_ids(Eye::Os) {
            assert!(grads.get(id).is_none_or(|g| g.iter().all(|&v| v == 0.0)));
        }
        assert!(m.adapter_ids(Eye::Od).iter().any(|&id| grads.get(id).is_some_and(|g| g.iter().any(|&v| v != 0.0))));
    }

    #[test]
    fn forward_is_deterministic() {
        let m = BiChannelModel::new(small(), 10).unwrap();
        let img = Tensor::new(vec![1, 8, 8], images(1, 64, 11)).unwrap();
        let a = m.forward_eye(&img, Eye::Os).unwrap();
        let b = m.forward_eye(&img, Eye::Os).unwrap();
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert_eq!(a.1.to_bits(), b.1.to_bits());
        let wrong = Tensor::zeros(vec![1, 4, 4]);
        assert!(matches!(m.forward_eye(&wrong, Eye::Os), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn same_seed_same_model() {
        let a = BiChannelModel::new(small(), 12).unwrap();
        let b = BiChannelModel::new(small(), 12).unwrap();
        for id in a.store().ids() {
            assert_eq!(a.store().get(id).data(), b.store().get(id).data());
        }
        assert_eq!(a.store().frozen_checksum(), b.store().frozen_checksum());
    }

    #[test]
    fn lora_gradient_matches_finite_differences() {
        let mut m = BiChannelModel::new(small(), 13).unwrap();
        perturb(&mut m, 14);
        let x = images(2, m.config().image_len(), 15);
        let loss = |m: &BiChannelModel| {
            let p = m.predict(&x, 2, Eye::Os, ForwardMode::Full).unwrap();
            p.iter().map(|(mu, l)| mu * mu + 0.5 * l).sum::<f64>()
        };
        let mut g = Graph::new(m.store());
        let o = m.forward(&mut g, &x, 2, Eye::Os, ForwardMode::Full).unwrap();
        let mu = g.value(o.mu).to_vec();
        let seed: Vec<f64> = mu.iter().map(|v| 2.0 * v).collect();
        let grads = g.backward(&[(o.mu, &seed), (o.logit, &[0.5, 0.5])]).unwrap();
        let a_id = m.store().id("blocks.0.attn.q.lora_a").unwrap();
        let base = m.store().get(a_id).data().to_vec();
        let fd = finite_diff_grad(
            |v| {
                let mut mm = m.clone();
                mm.store_mut().assign(a_id, v).unwrap();
                loss(&mm)
            },
            &base,
            1e-5,
        );
        for (a, b) in grads.get(a_id).unwrap().iter().zip(&fd) {
            assert!((a - b).abs() <= 1e-4 * a.abs().max(1e-4), "{a} vs {b}");
        }
    }

    #[test]
    fn patchify_orders_tokens_row_major() {
        let c = ModelConfig {
            image_size: 4,
            patch_size: 2,
            embed_dim: 4,
            heads: 1,
            ..ModelConfig::default()
        };
        let m = BiChannelModel::new(c, 0).unwrap();
        let img: Vec<f64> = (0..16).map(f64::from).collect();
        let p = m.patchify(&img, 1).unwrap();
        assert_eq!(&p[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&p[4..8], &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(&p[12..], &[10.0, 11.0, 14.0, 15.0]);
    }
}
