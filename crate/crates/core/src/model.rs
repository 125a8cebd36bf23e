//! The super-resolution network.
//!
//! ```text
//! LR [N,7,H,W] ─ stem 3×3 ─┬─ deep panel:    N × (4 conv, residual add) ─┐
//!                          └─ shallow panel: 1 × (2 conv, residual add) ─┴─ concat → 1×1 fuse
//!   → multi-kernel attention (1/3/5/7 branches, softmax over branches)
//!   → log2(s) × (nearest ×2 → 3×3 conv → ReLU [→ back-projection])
//!   → six heads (3×3 conv → ReLU → 3×3 conv): PL, R_p, DS, φ, θ (1 ch), LOS (2 ch)
//! ```
//!
//! Parameters live in a name-ordered table; names are `/`-separated paths such
//! as `deep/1/conv3/w` or `head/pl/conv2/b`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::dataset::Kind;
use crate::error::{Error, FormatError, Result};
use crate::loss::PredictionVars;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub width: usize,
    /// Hidden channels of each output head.
    pub head_width: usize,
    pub block_repeats: usize,
    pub shallow_convs_per_block: usize,
    pub deep_convs_per_block: usize,
    pub attention_kernels: Vec<usize>,
    pub attention_reduction: usize,
    pub scale: usize,
    pub back_projection: bool,
    pub use_residual: bool,
    pub use_attention: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 7,
            width: 64,
            head_width: 64,
            block_repeats: 2,
            shallow_convs_per_block: 2,
            deep_convs_per_block: 4,
            attention_kernels: vec![1, 3, 5, 7],
            attention_reduction: 4,
            scale: 2,
            back_projection: false,
            use_residual: true,
            use_attention: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels != 7 {
            return Err(Error::config("in_channels", format!("must be 7, got {}", self.in_channels)));
        }
        for (field, v) in [
            ("width", self.width),
            ("head_width", self.head_width),
            ("block_repeats", self.block_repeats),
            ("shallow_convs_per_block", self.shallow_convs_per_block),
            ("attention_reduction", self.attention_reduction),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if self.deep_convs_per_block != self.shallow_convs_per_block + 2 {
            return Err(Error::config(
                "deep_convs_per_block",
                format!(
                    "must equal shallow_convs_per_block + 2 = {}, got {}",
                    self.shallow_convs_per_block + 2,
                    self.deep_convs_per_block
                ),
            ));
        }
        if self.attention_kernels.is_empty() {
            return Err(Error::config("attention_kernels", "must not be empty"));
        }
        if let Some(k) = self.attention_kernels.iter().find(|&&k| k % 2 == 0 || k > 7) {
            return Err(Error::config("attention_kernels", format!("kernel {k} is not one of 1, 3, 5, 7")));
        }
        if !matches!(self.scale, 2 | 4 | 8) {
            return Err(Error::config("scale", format!("must be 2, 4 or 8, got {}", self.scale)));
        }
        Ok(())
    }

    pub fn reduced_width(&self) -> usize {
        (self.width / self.attention_reduction).max(1)
    }

    pub fn up_stages(&self) -> usize {
        self.scale.trailing_zeros() as usize
    }
}

/// Parameter names, shapes and fan-in, in construction order.
fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, usize)> {
    let c = cfg.width;
    let mut out = Vec::new();
    let mut conv = |name: String, cout: usize, cin: usize, k: usize| {
        out.push((format!("{name}/w"), vec![cout, cin, k, k], cin * k * k));
        out.push((format!("{name}/b"), vec![cout], 0));
    };
    conv("stem".into(), c, cfg.in_channels, 3);
    for b in 0..cfg.block_repeats {
        for j in 0..cfg.deep_convs_per_block {
            conv(format!("deep/{b}/conv{j}"), c, c, 3);
        }
    }
    for j in 0..cfg.shallow_convs_per_block {
        conv(format!("shallow/0/conv{j}"), c, c, 3);
    }
    conv("fuse".into(), c, 2 * c, 1);
    if cfg.use_attention {
        for &k in &cfg.attention_kernels {
            conv(format!("attn/k{k}"), c, c, k);
        }
    }
    for s in 0..cfg.up_stages() {
        conv(format!("up/{s}/conv"), c, c, 3);
        if cfg.back_projection {
            conv(format!("up/{s}/down"), c, c, 3);
            conv(format!("up/{s}/proj"), c, c, 3);
        }
    }
    for kind in Kind::TARGETS {
        let outc = if kind == Kind::Los { 2 } else { 1 };
        conv(format!("head/{}/conv1", kind.name()), cfg.head_width, c, 3);
        conv(format!("head/{}/conv2", kind.name()), outc, cfg.head_width, 3);
    }
    if cfg.use_attention {
        let r = cfg.reduced_width();
        out.push(("attn/reduce/w".into(), vec![r, c], c));
        out.push(("attn/reduce/b".into(), vec![r], 0));
        for i in 0..cfg.attention_kernels.len() {
            out.push((format!("attn/expand{i}/w"), vec![c, r], r));
            out.push((format!("attn/expand{i}/b"), vec![c], 0));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: BTreeMap<String, Tensor>,
}

/// He-uniform weights (bound `sqrt(6 / fan_in)`), zero biases, seeded.
pub fn build_model(config: &ModelConfig) -> Result<Model> {
    config.validate()?;
    let mut rng = rng::stream(config.seed, 0x1417);
    let mut params = BTreeMap::new();
    for (name, shape, fan_in) in layout(config) {
        let len: usize = shape.iter().product();
        let data = if fan_in == 0 {
            vec![0.0; len]
        } else {
            let bound = (6.0 / fan_in as f64).sqrt();
            (0..len).map(|_| rng.random_range(-bound..bound)).collect()
        };
        params.insert(name, Tensor::new(&shape, data)?);
    }
    Ok(Model { config: config.clone(), params })
}

/// Parameters bound to a tape as leaves.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Binding from explicit `(name, var)` pairs, e.g. variables created by
    /// a gradient checker.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, Var)>) -> Self {
        Bound { vars: pairs.into_iter().map(|(n, v)| (n.to_string(), v)).collect() }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("parameter `{name}` is not registered")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Intermediate results of the backbone.
#[derive(Clone, Copy, Debug)]
pub struct BackboneOut {
    pub stem: Var,
    pub deep: Var,
    pub shallow: Var,
    pub output: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionOut {
    pub output: Var,
    /// Branch weights `[N,B,C]`, absent when attention is disabled.
    pub weights: Option<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOut {
    pub prediction: PredictionVars,
    pub attention_weights: Option<Var>,
}

/// Concrete output maps of one forward pass, normalized units.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionValues {
    pub regression: [Tensor; 5],
    pub los_logits: Tensor,
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Replaces a parameter value; the shape must not change.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))?;
        if slot.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter `{name}` has shape {:?}, replacement {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    /// Registers every parameter on `tape`; gradients are tracked for the
    /// names accepted by `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: &dyn Fn(&str) -> bool) -> Bound {
        let vars = self.params.iter().map(|(name, t)| (name.clone(), tape.leaf(t.clone(), trainable(name)))).collect();
        Bound { vars }
    }

    fn conv(&self, tape: &mut Tape, p: &Bound, name: &str, x: Var) -> Result<Var> {
        let w = p.get(&format!("{name}/w"))?;
        let b = p.get(&format!("{name}/b"))?;
        tape.conv2d(x, w, b)
    }

    pub fn forward_backbone(&self, tape: &mut Tape, p: &Bound, input: Var) -> Result<BackboneOut> {
        let cfg = &self.config;
        let [_, c, _, _] = tape.value(input).dims4()?;
        if c != cfg.in_channels {
            return Err(Error::Shape(format!("model expects {} input channels, got {c}", cfg.in_channels)));
        }
        let stem = self.conv(tape, p, "stem", input)?;

        let mut deep = stem;
        for b in 0..cfg.block_repeats {
            deep = self.panel_block(tape, p, &format!("deep/{b}"), cfg.deep_convs_per_block, deep)?;
        }
        let shallow = self.panel_block(tape, p, "shallow/0", cfg.shallow_convs_per_block, stem)?;
        let both = tape.concat_channels(deep, shallow)?;
        let output = self.conv(tape, p, "fuse", both)?;
        Ok(BackboneOut { stem, deep, shallow, output })
    }

    /// `convs` convolutions with ReLU between them, plus the block input when
    /// residual connections are enabled.
    fn panel_block(&self, tape: &mut Tape, p: &Bound, prefix: &str, convs: usize, input: Var) -> Result<Var> {
        let mut h = input;
        for j in 0..convs {
            h = self.conv(tape, p, &format!("{prefix}/conv{j}"), h)?;
            if j + 1 < convs {
                h = tape.relu(h);
            }
        }
        if self.config.use_residual {
            h = tape.add(h, input)?;
        }
        Ok(h)
    }

    pub fn forward_attention(&self, tape: &mut Tape, p: &Bound, features: Var) -> Result<AttentionOut> {
        let cfg = &self.config;
        if !cfg.use_attention {
            return Ok(AttentionOut { output: features, weights: None });
        }
        let [_, c, _, _] = tape.value(features).dims4()?;
        if c != cfg.width {
            return Err(Error::Shape(format!("attention expects {} channels, got {c}", cfg.width)));
        }
        let mut branches = Vec::with_capacity(cfg.attention_kernels.len());
        for &k in &cfg.attention_kernels {
            branches.push(self.conv(tape, p, &format!("attn/k{k}"), features)?);
        }
        let mut sum = branches[0];
        for &b in &branches[1..] {
            sum = tape.add(sum, b)?;
        }
        let pooled = tape.global_avg_pool(sum)?;
        let reduced = tape.linear(pooled, p.get("attn/reduce/w")?, p.get("attn/reduce/b")?)?;
        let reduced = tape.relu(reduced);
        let mut logits = Vec::with_capacity(branches.len());
        for i in 0..branches.len() {
            logits.push(tape.linear(reduced, p.get(&format!("attn/expand{i}/w"))?, p.get(&format!("attn/expand{i}/b"))?)?);
        }
        let stacked = tape.stack(&logits)?;
        let weights = tape.branch_softmax(stacked)?;
        let mut output = None;
        for (i, &branch) in branches.iter().enumerate() {
            let a = tape.branch_select(weights, i)?;
            let scaled = tape.channel_scale(branch, a)?;
            output = Some(match output {
                None => scaled,
                Some(acc) => tape.add(acc, scaled)?,
            });
        }
        Ok(AttentionOut { output: output.expect("at least one branch"), weights: Some(weights) })
    }

    pub fn upscale(&self, tape: &mut Tape, p: &Bound, features: Var) -> Result<Var> {
        let mut f = features;
        for s in 0..self.config.up_stages() {
            let up = tape.upsample_nearest(f, 2)?;
            let conv = self.conv(tape, p, &format!("up/{s}/conv"), up)?;
            let mut hr = tape.relu(conv);
            if self.config.back_projection {
                let down = tape.block_mean(hr, 2)?;
                let lr_est = self.conv(tape, p, &format!("up/{s}/down"), down)?;
                let err = tape.sub(f, lr_est)?;
                let err_up = tape.upsample_nearest(err, 2)?;
                let correction = self.conv(tape, p, &format!("up/{s}/proj"), err_up)?;
                hr = tape.add(hr, correction)?;
            }
            f = hr;
        }
        Ok(f)
    }

    pub fn forward_heads(&self, tape: &mut Tape, p: &Bound, features: Var) -> Result<PredictionVars> {
        let mut outs = Vec::with_capacity(6);
        for kind in Kind::TARGETS {
            let h = self.conv(tape, p, &format!("head/{}/conv1", kind.name()), features)?;
            let h = tape.relu(h);
            outs.push(self.conv(tape, p, &format!("head/{}/conv2", kind.name()), h)?);
        }
        Ok(PredictionVars { regression: [outs[0], outs[1], outs[2], outs[3], outs[4]], los_logits: outs[5] })
    }

    /// Backbone → attention → upscale → heads.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, input: Var) -> Result<ForwardOut> {
        let backbone = self.forward_backbone(tape, p, input)?;
        let attention = self.forward_attention(tape, p, backbone.output)?;
        let up = self.upscale(tape, p, attention.output)?;
        let prediction = self.forward_heads(tape, p, up)?;
        Ok(ForwardOut { prediction, attention_weights: attention.weights })
    }

    /// Inference on a `[N,7,H,W]` tensor without gradient tracking.
    pub fn predict(&self, input: &Tensor) -> Result<PredictionValues> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, &|_| false);
        let x = tape.constant(input.clone());
        let out = self.forward(&mut tape, &p, x)?.prediction;
        Ok(PredictionValues {
            regression: out.regression.map(|v| tape.value(v).clone()),
            los_logits: tape.value(out.los_logits).clone(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(&bytes).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Model> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        BufReader::new(file).read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        Model::decode(&bytes)
    }

    /// Checkpoint bytes: `CSRM`, u16 version, u32-prefixed JSON config,
    /// u32 parameter count, then per parameter (in name order) u16 name
    /// length, name, u8 rank, u32 dims, f64 data; all little-endian.
    pub fn encode(&self) -> Result<Vec<u8>> {
        let json = serde_json::to_vec(&self.config)?;
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Model> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.array()?;
        if magic != CHECKPOINT_MAGIC {
            return Err(FormatError::BadMagic { expected: CHECKPOINT_MAGIC, found: magic }.into());
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != CHECKPOINT_VERSION {
            return Err(FormatError::VersionMismatch { expected: CHECKPOINT_VERSION, found: version }.into());
        }
        let json_len = u32::from_le_bytes(r.array()?) as usize;
        let config: ModelConfig = serde_json::from_slice(r.take(json_len)?)
            .map_err(|e| FormatError::Malformed(format!("checkpoint config: {e}")))?;
        config.validate()?;
        let count = u32::from_le_bytes(r.array()?) as usize;
        let mut params = BTreeMap::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.array()?) as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| FormatError::Malformed("parameter name is not UTF-8".into()))?;
            let rank = r.array::<1>()?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(r.array()?) as usize);
            }
            let len: usize = shape.iter().product();
            let data = r.take(len * 8)?.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8"))).collect();
            params.insert(name, Tensor::new(&shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(FormatError::Malformed("trailing bytes after parameters".into()).into());
        }
        let expected = layout(&config);
        if expected.len() != params.len() {
            return Err(FormatError::Malformed(format!(
                "config implies {} parameters, checkpoint has {}",
                expected.len(),
                params.len()
            ))
            .into());
        }
        for (name, shape, _) in &expected {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(FormatError::Malformed(format!(
                        "parameter `{name}` has shape {:?}, config implies {shape:?}",
                        t.shape()
                    ))
                    .into())
                }
                None => return Err(FormatError::Malformed(format!("missing parameter `{name}`")).into()),
            }
        }
        Ok(Model { config, params })
    }
}

const CHECKPOINT_MAGIC: [u8; 4] = *b"CSRM";
const CHECKPOINT_VERSION: u16 = 1;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(FormatError::Truncated(format!("checkpoint ended at byte {}", self.bytes.len())).into());
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}
