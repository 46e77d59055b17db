//! RawMixer: a stride-B raw convolution aligned with the MSFA basic pattern,
//! a ConvMixer block, and a small positional-encoding-free transformer
//! encoder whose tokens are average pooled into the texture feature.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rawmix_autodiff::{BatchNormState, Checkpoint, ParamId, ParamSet, Tape, Tensor, Var};
use rawmix_core::RawImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{Descriptor, FeatureVector};

const LN_EPS: f64 = 1e-5;
const EXTRACT_CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawMixerConfig {
    /// Side B of the MSFA basic pattern.
    pub pattern_width: usize,
    pub n_kernels: usize,
    /// Side of the depthwise mixing kernel.
    pub mixer_kernel: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub ff_dim: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
}

impl RawMixerConfig {
    pub fn new(pattern_width: usize, num_classes: usize) -> Self {
        Self {
            pattern_width,
            n_kernels: 320,
            mixer_kernel: 3,
            embed_dim: 384,
            heads: 6,
            encoder_layers: 1,
            ff_dim: 1536,
            feature_dim: 128,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("pattern_width", self.pattern_width),
            ("n_kernels", self.n_kernels),
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
            ("ff_dim", self.ff_dim),
            ("feature_dim", self.feature_dim),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "{} heads do not divide embed_dim {}",
                self.heads, self.embed_dim
            )));
        }
        if self.mixer_kernel % 2 == 0 {
            return Err(Error::Config(format!("mixer kernel {} must be odd", self.mixer_kernel)));
        }
        Ok(())
    }
}

/// How batch norm layers behave during a forward pass.
pub enum BnMode<'a> {
    /// Batch statistics; the given running statistics are updated.
    Train(&'a mut [BatchNormState; 2]),
    /// The model's running statistics.
    Eval,
}

/// Handles into a recorded forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// `[n, feature_dim]`
    pub features: Var,
    /// `[n, num_classes]`
    pub logits: Var,
    /// Intermediate outputs by stage name, in pipeline order.
    pub stages: Vec<(&'static str, Var)>,
}

#[derive(Debug, Clone)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    ln1: (ParamId, ParamId),
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: (ParamId, ParamId),
    ff1: Linear,
    ff2: Linear,
}

#[derive(Debug, Clone)]
struct Ids {
    raw_w: ParamId,
    raw_b: ParamId,
    bn1: (ParamId, ParamId),
    dw_w: ParamId,
    dw_b: ParamId,
    bn2: (ParamId, ParamId),
    pw_w: ParamId,
    pw_b: ParamId,
    embed: Linear,
    layers: Vec<EncoderLayer>,
    ln_final: (ParamId, ParamId),
    fc: Linear,
    classifier: Linear,
}

#[derive(Debug, Clone)]
pub struct RawMixer {
    config: RawMixerConfig,
    pub(crate) params: ParamSet,
    ids: Ids,
    pub(crate) bn: [BatchNormState; 2],
}

struct Init {
    rng: ChaCha8Rng,
    params: ParamSet,
}

impl Init {
    fn uniform(&mut self, name: &str, shape: Vec<usize>, fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        self.params.add(name, Tensor::new(shape, data).unwrap())
    }

    fn constant(&mut self, name: &str, len: usize, value: f64) -> ParamId {
        self.params.add(name, Tensor::full(vec![len], value))
    }

    fn linear(&mut self, name: &str, inp: usize, out: usize) -> Linear {
        Linear {
            w: self.uniform(&format!("{name}.weight"), vec![inp, out], inp),
            b: self.uniform(&format!("{name}.bias"), vec![out], inp),
        }
    }

    fn norm(&mut self, name: &str, len: usize) -> (ParamId, ParamId) {
        (
            self.constant(&format!("{name}.gamma"), len, 1.0),
            self.constant(&format!("{name}.beta"), len, 0.0),
        )
    }
}

impl RawMixer {
    /// Fresh model with fan-in scaled uniform weights drawn from `seed`.
    pub fn new(config: RawMixerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let (b, k, mk, e) = (c.pattern_width, c.n_kernels, c.mixer_kernel, c.embed_dim);
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: ParamSet::new(),
        };
        let raw_w = init.uniform("raw_conv.weight", vec![k, 1, b, b], b * b);
        let raw_b = init.uniform("raw_conv.bias", vec![k], b * b);
        let bn1 = init.norm("bn1", k);
        let dw_w = init.uniform("mixer.depthwise.weight", vec![k, 1, mk, mk], mk * mk);
        let dw_b = init.uniform("mixer.depthwise.bias", vec![k], mk * mk);
        let bn2 = init.norm("bn2", k);
        let pw_w = init.uniform("mixer.pointwise.weight", vec![k, k], k);
        let pw_b = init.uniform("mixer.pointwise.bias", vec![k], k);
        let embed = init.linear("embed", k, e);
        let layers = (0..c.encoder_layers)
            .map(|l| EncoderLayer {
                ln1: init.norm(&format!("encoder.{l}.ln1"), e),
                q: init.linear(&format!("encoder.{l}.attn.q"), e, e),
                k: init.linear(&format!("encoder.{l}.attn.k"), e, e),
                v: init.linear(&format!("encoder.{l}.attn.v"), e, e),
                o: init.linear(&format!("encoder.{l}.attn.out"), e, e),
                ln2: init.norm(&format!("encoder.{l}.ln2"), e),
                ff1: init.linear(&format!("encoder.{l}.ff1"), e, c.ff_dim),
                ff2: init.linear(&format!("encoder.{l}.ff2"), c.ff_dim, e),
            })
            .collect();
        let ln_final = init.norm("encoder.ln_final", e);
        let fc = init.linear("fc", e, c.feature_dim);
        let classifier = init.linear("classifier", c.feature_dim, c.num_classes);
        let ids = Ids {
            raw_w,
            raw_b,
            bn1,
            dw_w,
            dw_b,
            bn2,
            pw_w,
            pw_b,
            embed,
            layers,
            ln_final,
            fc,
            classifier,
        };
        Ok(Self {
            bn: [BatchNormState::new(k), BatchNormState::new(k)],
            config,
            params: init.params,
            ids,
        })
    }

    pub fn config(&self) -> &RawMixerConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn batch_norm_states(&self) -> &[BatchNormState; 2] {
        &self.bn
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    /// Side m of the raw conv output for a patch of side `x`.
    pub fn grid_side(&self, x: usize) -> usize {
        x / self.config.pattern_width
    }

    /// Stacks same-sized patches into a `[n, 1, h, w]` tensor.
    pub fn input_tensor(&self, imgs: &[&RawImage]) -> Result<Tensor> {
        let first = imgs.first().ok_or_else(|| Error::Size("empty batch".into()))?;
        let b = self.config.pattern_width;
        let (h, w) = (first.height(), first.width());
        if h < 2 * b || w < 2 * b {
            return Err(Error::Size(format!(
                "{w}x{h} patch gives fewer than 2x2 basic patterns (B={b})"
            )));
        }
        let mut data = Vec::with_capacity(imgs.len() * h * w);
        for img in imgs {
            if img.pattern().width() != b {
                return Err(Error::Config(format!(
                    "model expects B={b}, patch has B={}",
                    img.pattern().width()
                )));
            }
            if (img.height(), img.width()) != (h, w) {
                return Err(Error::Size(format!(
                    "batch mixes {w}x{h} and {}x{} patches",
                    img.width(),
                    img.height()
                )));
            }
            data.extend_from_slice(img.data());
        }
        Ok(Tensor::new(vec![imgs.len(), 1, h, w], data)?)
    }

    fn norm(&self, tape: &mut Tape, x: Var, which: usize, bn: &mut BnMode<'_>) -> Result<Var> {
        let (g, b) = if which == 0 { self.ids.bn1 } else { self.ids.bn2 };
        let (g, b) = (tape.param(&self.params, g), tape.param(&self.params, b));
        Ok(match bn {
            BnMode::Train(states) => tape.batch_norm_train(x, g, b, &mut states[which])?,
            BnMode::Eval => tape.batch_norm_eval(x, g, b, &self.bn[which])?,
        })
    }

    fn linear(&self, tape: &mut Tape, x: Var, l: &Linear) -> Result<Var> {
        let w = tape.param(&self.params, l.w);
        let b = tape.param(&self.params, l.b);
        let y = tape.matmul(x, w)?;
        Ok(tape.add_bias(y, b, 1)?)
    }

    fn layer_norm(&self, tape: &mut Tape, x: Var, (g, b): (ParamId, ParamId)) -> Result<Var> {
        let g = tape.param(&self.params, g);
        let b = tape.param(&self.params, b);
        Ok(tape.layer_norm(x, g, b, LN_EPS)?)
    }

    /// Records the full forward pass for a batch of patches.
    pub fn forward(&self, tape: &mut Tape, imgs: &[&RawImage], bn: BnMode<'_>) -> Result<Forward> {
        let input = self.input_tensor(imgs)?;
        let x = tape.constant(input);
        self.forward_input(tape, x, bn)
    }

    /// Forward pass from an already stacked `[n, 1, h, w]` input.
    pub fn forward_input(&self, tape: &mut Tape, x: Var, mut bn: BnMode<'_>) -> Result<Forward> {
        let b = self.config.pattern_width;
        let ids = &self.ids;
        let mut stages = Vec::new();

        let w = tape.param(&self.params, ids.raw_w);
        let bias = tape.param(&self.params, ids.raw_b);
        let f = tape.strided_conv2d(x, w, b, 0)?;
        let f = tape.add_bias(f, bias, 1)?;
        stages.push(("raw_conv", f));
        let f = tape.selu(f);
        let pre_mix = self.norm(tape, f, 0, &mut bn)?;
        stages.push(("bn1", pre_mix));

        let w = tape.param(&self.params, ids.dw_w);
        let bias = tape.param(&self.params, ids.dw_b);
        let d = tape.depthwise_conv2d(pre_mix, w, self.config.mixer_kernel / 2)?;
        let d = tape.add_bias(d, bias, 1)?;
        let d = tape.selu(d);
        let d = self.norm(tape, d, 1, &mut bn)?;
        stages.push(("depthwise", d));
        let w = tape.param(&self.params, ids.pw_w);
        let bias = tape.param(&self.params, ids.pw_b);
        let p = tape.pointwise_conv2d(d, w)?;
        let p = tape.add_bias(p, bias, 1)?;
        let mixed = tape.add(p, pre_mix)?;
        stages.push(("mixer", mixed));
        let pooled = tape.maxpool2x2(mixed)?;
        stages.push(("maxpool", pooled));

        let s = tape.shape(pooled).to_vec();
        let (n, k, tokens) = (s[0], s[1], s[2] * s[3]);
        let t = tape.reshape(pooled, vec![n, k, tokens])?;
        let t = tape.permute(t, &[0, 2, 1])?;
        stages.push(("tokens", t));
        let mut out = self.forward_tokens(tape, t)?;
        stages.append(&mut out.stages);
        out.stages = stages;
        Ok(out)
    }

    /// Transformer encoder, token pooling and heads applied to `[n, tokens, n_kernels]`.
    pub fn forward_tokens(&self, tape: &mut Tape, tokens: Var) -> Result<Forward> {
        let s = tape.shape(tokens).to_vec();
        if s.len() != 3 || s[2] != self.config.n_kernels {
            return Err(Error::Size(format!(
                "tokens {s:?} should be [n, t, {}]",
                self.config.n_kernels
            )));
        }
        let (n, t) = (s[0], s[1]);
        let e = self.config.embed_dim;
        let heads = self.config.heads;
        let d = e / heads;
        let mut stages = Vec::new();

        let flat = tape.reshape(tokens, vec![n * t, s[2]])?;
        let mut x = self.linear(tape, flat, &self.ids.embed)?;
        stages.push(("embed", x));
        for layer in &self.ids.layers {
            let h = self.layer_norm(tape, x, layer.ln1)?;
            let split = |tape: &mut Tape, v: Var| -> Result<Var> {
                let v = tape.reshape(v, vec![n, t, heads, d])?;
                let v = tape.permute(v, &[0, 2, 1, 3])?;
                Ok(tape.reshape(v, vec![n * heads, t, d])?)
            };
            let q = self.linear(tape, h, &layer.q)?;
            let q = split(tape, q)?;
            let k = self.linear(tape, h, &layer.k)?;
            let k = split(tape, k)?;
            let v = self.linear(tape, h, &layer.v)?;
            let v = split(tape, v)?;
            let scores = tape.batched_matmul(q, k, true)?;
            let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
            let attn = tape.softmax(scores)?;
            let ctx = tape.batched_matmul(attn, v, false)?;
            let ctx = tape.reshape(ctx, vec![n, heads, t, d])?;
            let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
            let ctx = tape.reshape(ctx, vec![n * t, e])?;
            let o = self.linear(tape, ctx, &layer.o)?;
            x = tape.add(x, o)?;

            let h = self.layer_norm(tape, x, layer.ln2)?;
            let f = self.linear(tape, h, &layer.ff1)?;
            let f = tape.selu(f);
            let f = self.linear(tape, f, &layer.ff2)?;
            x = tape.add(x, f)?;
            stages.push(("encoder_layer", x));
        }
        let x = self.layer_norm(tape, x, self.ids.ln_final)?;
        let x = tape.reshape(x, vec![n, t, e])?;
        let pooled = tape.mean_axis(x, 1)?;
        stages.push(("token_mean", pooled));
        let f = self.linear(tape, pooled, &self.ids.fc)?;
        let features = tape.selu(f);
        stages.push(("features", features));
        let logits = self.linear(tape, features, &self.ids.classifier)?;
        stages.push(("logits", logits));
        Ok(Forward {
            features,
            logits,
            stages,
        })
    }

    fn eval_rows(&self, imgs: &[&RawImage], logits: bool) -> Result<Vec<Vec<f64>>> {
        let mut rows = Vec::with_capacity(imgs.len());
        for chunk in imgs.chunks(EXTRACT_CHUNK) {
            let mut tape = Tape::new();
            let out = self.forward(&mut tape, chunk, BnMode::Eval)?;
            let v = if logits { out.logits } else { out.features };
            let width = tape.shape(v)[1];
            rows.extend(tape.value(v).data().chunks(width).map(<[f64]>::to_vec));
        }
        Ok(rows)
    }

    /// Eval-mode 128-d features, one row per patch.
    pub fn features(&self, imgs: &[&RawImage]) -> Result<Vec<FeatureVector>> {
        self.eval_rows(imgs, false)
    }

    /// Eval-mode class scores, one row per patch.
    pub fn logits(&self, imgs: &[&RawImage]) -> Result<Vec<Vec<f64>>> {
        self.eval_rows(imgs, true)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(serde_json::json!({
            "model": "rawmixer",
            "config": self.config,
        }));
        for p in self.params.iter() {
            ck.push(p.name.clone(), p.value.clone());
        }
        for (i, s) in self.bn.iter().enumerate() {
            let k = s.running_mean.len();
            ck.push(format!("bn{}.running_mean", i + 1), Tensor::new(vec![k], s.running_mean.clone()).unwrap());
            ck.push(format!("bn{}.running_var", i + 1), Tensor::new(vec![k], s.running_var.clone()).unwrap());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta.get("model").and_then(|m| m.as_str()) != Some("rawmixer") {
            return Err(Error::Config("checkpoint does not hold a RawMixer".into()));
        }
        let config: RawMixerConfig = serde_json::from_value(ck.meta["config"].clone())
            .map_err(|e| Error::Config(format!("checkpoint config: {e}")))?;
        let mut model = Self::new(config, 0)?;
        for p in model.params.iter_mut() {
            let shape = p.value.shape().to_vec();
            p.value = ck.expect(&p.name, &shape)?.clone();
        }
        for (i, s) in model.bn.iter_mut().enumerate() {
            let k = [s.running_mean.len()];
            s.running_mean = ck.expect(&format!("bn{}.running_mean", i + 1), &k)?.data().to_vec();
            s.running_var = ck.expect(&format!("bn{}.running_var", i + 1), &k)?.data().to_vec();
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

impl Descriptor for RawMixer {
    fn name(&self) -> &str {
        "rawmixer"
    }

    fn dim(&self) -> usize {
        self.config.feature_dim
    }

    fn extract(&self, img: &RawImage) -> Result<FeatureVector> {
        Ok(self.features(&[img])?.remove(0))
    }

    fn extract_all(&self, imgs: &[&RawImage]) -> Result<Vec<FeatureVector>> {
        self.features(imgs)
    }
}

/// Output of [`raw_conv`]: `channels` maps of `rows x cols`, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMaps {
    pub channels: usize,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl FeatureMaps {
    pub fn get(&self, n: usize, x: usize, y: usize) -> f64 {
        self.data[(n * self.rows + y) * self.cols + x]
    }
}

/// The raw convolution on its own:
/// `F_n(x, y) = sum_{i,j} H_n(i, j) * raw(B*x + i, B*y + j)`,
/// stride B, no padding, no bias. `kernels` is `[n, 1, B, B]` with
/// `kernels[n, 0, j, i] = H_n(i, j)`.
pub fn raw_conv(img: &RawImage, kernels: &Tensor) -> Result<FeatureMaps> {
    let b = img.pattern().width();
    let s = kernels.shape();
    if s.len() != 4 || s[1] != 1 || s[2] != b || s[3] != b {
        return Err(Error::Config(format!(
            "raw conv kernels {s:?} do not match the {b}x{b} basic pattern"
        )));
    }
    let (cols, rows) = img.cells();
    let h = kernels.data();
    let mut data = vec![0.0; s[0] * rows * cols];
    for n in 0..s[0] {
        let kern = &h[n * b * b..(n + 1) * b * b];
        for y in 0..rows {
            for x in 0..cols {
                let mut acc = 0.0;
                for j in 0..b {
                    for i in 0..b {
                        acc += kern[j * b + i] * img.get(b * x + i, b * y + j);
                    }
                }
                data[(n * rows + y) * cols + x] = acc;
            }
        }
    }
    Ok(FeatureMaps {
        channels: s[0],
        rows,
        cols,
        data,
    })
}
