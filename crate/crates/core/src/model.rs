//! The encoder-only classifier: patch embedding, positional table, a stack of
//! encoder blocks and the pooled MLP head.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{
    self, AttentionWeights, DenseParams, Dropout, EncoderBlockParams, FeedForwardParams,
    HeadParams, LayerNormParams, Mode, ParamId,
};
use crate::tensor::{Tape, Tensor, Var};

/// Parameter count reported for the reference variant.
pub const REFERENCE_PARAM_COUNT: usize = 36_301;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Positional {
    Learned,
    Sinusoidal,
}

impl Positional {
    pub fn as_str(self) -> &'static str {
        match self {
            Positional::Learned => "learned",
            Positional::Sinusoidal => "sinusoidal",
        }
    }
}

impl std::str::FromStr for Positional {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "learned" => Ok(Positional::Learned),
            "sinusoidal" => Ok(Positional::Sinusoidal),
            other => Err(format!("unknown positional scheme '{other}'")),
        }
    }
}

/// Architecture knobs. `Default` is the reference variant.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_len: usize,
    pub patch_len: usize,
    pub d_model: usize,
    pub head_size: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub d_ff: usize,
    pub mlp_units: Vec<usize>,
    pub n_classes: usize,
    pub dropout: f64,
    pub positional: Positional,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_len: crate::data::BEAT_LEN,
            patch_len: 11,
            d_model: 64,
            head_size: 16,
            heads: 8,
            encoder_layers: 4,
            d_ff: 64,
            mlp_units: vec![128, 64],
            n_classes: 5,
            dropout: 0.15,
            positional: Positional::Learned,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Small verification model: 4 tokens of width 8, two heads of size 4.
    pub fn tiny() -> Self {
        Self {
            patch_len: 47,
            d_model: 8,
            head_size: 4,
            heads: 2,
            encoder_layers: 2,
            d_ff: 16,
            mlp_units: vec![16],
            ..Self::default()
        }
    }

    pub fn tokens(&self) -> usize {
        layers::token_count(self.input_len, self.patch_len)
    }

    /// Checks every field and reports all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let positive = [
            ("input_len", self.input_len),
            ("patch_len", self.patch_len),
            ("d_model", self.d_model),
            ("head_size", self.head_size),
            ("heads", self.heads),
            ("encoder_layers", self.encoder_layers),
            ("d_ff", self.d_ff),
        ];
        for (name, v) in positive {
            if v == 0 {
                errs.push(format!("{name} must be positive"));
            }
        }
        if self.patch_len > self.input_len {
            errs.push(format!(
                "patch_len {} exceeds input_len {}",
                self.patch_len, self.input_len
            ));
        }
        if self.mlp_units.is_empty() {
            errs.push("mlp_units must be non-empty".into());
        }
        if self.mlp_units.contains(&0) {
            errs.push("mlp_units entries must be positive".into());
        }
        if self.n_classes < 2 {
            errs.push("n_classes must be at least 2".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            errs.push(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// `key = value` lines, in a fixed order.
    pub fn to_kv(&self) -> Vec<(&'static str, String)> {
        let units: Vec<String> = self.mlp_units.iter().map(|u| u.to_string()).collect();
        vec![
            ("input_len", self.input_len.to_string()),
            ("patch_len", self.patch_len.to_string()),
            ("d_model", self.d_model.to_string()),
            ("head_size", self.head_size.to_string()),
            ("heads", self.heads.to_string()),
            ("encoder_layers", self.encoder_layers.to_string()),
            ("d_ff", self.d_ff.to_string()),
            ("mlp_units", units.join(",")),
            ("n_classes", self.n_classes.to_string()),
            ("dropout", self.dropout.to_string()),
            ("positional", self.positional.as_str().to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    /// Applies one `key = value` pair. Returns `Ok(false)` for keys this
    /// struct does not own.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<bool, String> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.trim()
                .parse()
                .map_err(|_| format!("{key}: cannot parse '{v}'"))
        }
        match key {
            "input_len" => self.input_len = num(key, value)?,
            "patch_len" => self.patch_len = num(key, value)?,
            "d_model" => self.d_model = num(key, value)?,
            "head_size" => self.head_size = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "encoder_layers" => self.encoder_layers = num(key, value)?,
            "d_ff" => self.d_ff = num(key, value)?,
            "mlp_units" => {
                self.mlp_units = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| num(key, s))
                    .collect::<std::result::Result<_, _>>()?
            }
            "n_classes" => self.n_classes = num(key, value)?,
            "dropout" => self.dropout = num(key, value)?,
            "positional" => self.positional = value.trim().parse()?,
            "seed" => self.seed = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// A named trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// One line of the parameter reconciliation table.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamCountRow {
    pub component: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCountReport {
    pub rows: Vec<ParamCountRow>,
    pub total: usize,
    pub reference: usize,
}

impl ParamCountReport {
    pub fn delta(&self) -> i64 {
        self.total as i64 - self.reference as i64
    }
}

impl fmt::Display for ParamCountReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<28} {:>10}", "component", "params")?;
        for row in &self.rows {
            writeln!(f, "{:<28} {:>10}", row.component, row.count)?;
        }
        writeln!(f, "{:<28} {:>10}", "total", self.total)?;
        writeln!(f, "{:<28} {:>10}", "reference", self.reference)?;
        write!(f, "{:<28} {:>+10}", "delta", self.delta())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: Vec<Param>,
    embed: DenseParams<ParamId>,
    positional: Option<ParamId>,
    sinusoid: Option<Tensor>,
    blocks: Vec<EncoderBlockParams<ParamId>>,
    head: HeadParams<ParamId>,
}

struct Builder {
    params: Vec<Param>,
    rng: ChaCha8Rng,
}

impl Builder {
    fn push(&mut self, name: String, value: Tensor) -> ParamId {
        self.params.push(Param { name, value });
        ParamId(self.params.len() - 1)
    }

    /// Glorot-uniform weight, zero bias.
    fn dense(&mut self, name: &str, fan_in: usize, fan_out: usize) -> DenseParams<ParamId> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| self.rng.gen_range(-limit..limit))
            .collect();
        DenseParams {
            w: self.push(format!("{name}.w"), Tensor::new(vec![fan_in, fan_out], w).unwrap()),
            b: self.push(format!("{name}.b"), Tensor::zeros(&[fan_out])),
        }
    }

    fn layer_norm(&mut self, name: &str, d: usize) -> LayerNormParams<ParamId> {
        LayerNormParams {
            gamma: self.push(format!("{name}.gamma"), Tensor::full(&[d], 1.0)),
            beta: self.push(format!("{name}.beta"), Tensor::zeros(&[d])),
        }
    }
}

impl Model {
    /// Builds and initializes a model; deterministic for a fixed `config.seed`.
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = config;
        let mut b = Builder {
            params: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(c.seed),
        };
        let embed = b.dense("embed", c.patch_len, c.d_model);
        let (positional, sinusoid) = match c.positional {
            Positional::Learned => (
                Some(b.push("positional".into(), Tensor::zeros(&[c.tokens(), c.d_model]))),
                None,
            ),
            Positional::Sinusoidal => (None, Some(layers::sinusoidal_table(c.tokens(), c.d_model))),
        };
        let blocks = (0..c.encoder_layers)
            .map(|i| {
                let mut proj = |kind: &str| {
                    (0..c.heads)
                        .map(|h| b.dense(&format!("block{i}.attn.{kind}{h}"), c.d_model, c.head_size))
                        .collect::<Vec<_>>()
                };
                let query = proj("q");
                let key = proj("k");
                let value = proj("v");
                let output = b.dense(&format!("block{i}.attn.out"), c.heads * c.head_size, c.d_model);
                let norm1 = b.layer_norm(&format!("block{i}.norm1"), c.d_model);
                let ffn = FeedForwardParams {
                    inner: b.dense(&format!("block{i}.ffn.inner"), c.d_model, c.d_ff),
                    outer: b.dense(&format!("block{i}.ffn.outer"), c.d_ff, c.d_model),
                };
                let norm2 = b.layer_norm(&format!("block{i}.norm2"), c.d_model);
                EncoderBlockParams {
                    attention: AttentionWeights {
                        query,
                        key,
                        value,
                        output,
                    },
                    norm1,
                    ffn,
                    norm2,
                }
            })
            .collect();
        let mut width = c.d_model;
        let hidden = c
            .mlp_units
            .iter()
            .enumerate()
            .map(|(j, &units)| {
                let d = b.dense(&format!("head.hidden{j}"), width, units);
                width = units;
                d
            })
            .collect();
        let out = b.dense("head.out", width, c.n_classes);

        let model = Self {
            config: c.clone(),
            params: b.params,
            embed,
            positional,
            sinusoid,
            blocks,
            head: HeadParams { hidden, out },
        };
        let report = model.param_report();
        log::info!(
            "built model with {} trainable parameters (reference {}, delta {:+})",
            report.total,
            report.reference,
            report.delta()
        );
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn count_params(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Per-component parameter counts against the reference total.
    pub fn param_report(&self) -> ParamCountReport {
        let mut rows: Vec<ParamCountRow> = Vec::new();
        for p in &self.params {
            let component = component_of(&p.name);
            match rows.iter_mut().find(|r| r.component == component) {
                Some(r) => r.count += p.value.numel(),
                None => rows.push(ParamCountRow {
                    component,
                    count: p.value.numel(),
                }),
            }
        }
        ParamCountReport {
            total: self.count_params(),
            rows,
            reference: REFERENCE_PARAM_COUNT,
        }
    }

    /// Records every parameter as a trainable leaf; returns handles in
    /// parameter order.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.value.clone())).collect()
    }

    /// Records the forward pass for `[B, input_len]` features and returns
    /// `[B, n_classes]` logits.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        bound: &[Var],
        features: Var,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let shape = tape.shape(features);
        if shape.len() != 2 || shape[1] != self.config.input_len {
            return Err(Error::dim("forward", shape, &[self.config.input_len]));
        }
        let var = |id: ParamId| bound[id.0];
        let mut dropout = Dropout::new(self.config.dropout, mode, rng)?;

        let tokens = layers::patch_embed(tape, features, self.config.patch_len, &self.embed.map(&var))?;
        let table = match (self.positional, &self.sinusoid) {
            (Some(id), _) => var(id),
            (None, Some(t)) => tape.constant(t.clone()),
            (None, None) => unreachable!("model always has a positional scheme"),
        };
        let pos = layers::positional_embedding(tape, table, self.config.tokens())?;
        let mut x = tape.add(tokens, pos)?;
        for block in &self.blocks {
            x = layers::encoder_block(tape, x, &block.map(&var), &mut dropout)?;
        }
        layers::classification_head(tape, x, &self.head.map(&var), &mut dropout)
    }

    /// Forward pass without keeping the tape.
    pub fn forward(&self, features: &Tensor, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound: Vec<Var> = self.params.iter().map(|p| tape.constant(p.value.clone())).collect();
        let x = tape.constant(features.clone());
        let logits = self.forward_on_tape(&mut tape, &bound, x, mode, rng)?;
        Ok(tape.value(logits).clone())
    }

    /// Eval-mode logits.
    pub fn logits(&self, features: &Tensor) -> Result<Tensor> {
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        self.forward(features, Mode::Eval, &mut unused)
    }

    /// Eval-mode class probabilities.
    pub fn predict_proba(&self, features: &Tensor) -> Result<Tensor> {
        Ok(self.logits(features)?.softmax_rows())
    }

    /// Adds the tape's gradients for `bound` into each parameter's slot.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &[Var]) {
        for (p, &v) in self.params.iter_mut().zip(bound) {
            match tape.grad(v) {
                Some(g) => p.value.accumulate_grad(g),
                None => p.value.zero_grad(),
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.value.zero_grad());
    }

    /// Replaces parameter values from `(name, tensor)` pairs; names and
    /// shapes must match this model exactly.
    pub fn load_params(&mut self, tensors: Vec<(String, Tensor)>) -> Result<()> {
        if tensors.len() != self.params.len() {
            return Err(Error::ConfigMismatch(format!(
                "expected {} parameter tensors, found {}",
                self.params.len(),
                tensors.len()
            )));
        }
        for (p, (name, t)) in self.params.iter_mut().zip(tensors) {
            if p.name != name || p.value.shape() != t.shape() {
                return Err(Error::ConfigMismatch(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    p.name,
                    p.value.shape(),
                    name,
                    t.shape()
                )));
            }
            p.value = t;
        }
        Ok(())
    }
}

fn component_of(name: &str) -> String {
    let mut parts = name.split('.');
    match parts.next() {
        Some(block) if block.starts_with("block") => {
            let sub = parts.next().unwrap_or("");
            let sub = match sub {
                "norm1" | "norm2" => "norms",
                other => other,
            };
            format!("{block}.{sub}")
        }
        Some("head") => {
            let layer = parts.next().unwrap_or("");
            format!("head.{layer}")
        }
        Some(other) => other.to_string(),
        None => String::new(),
    }
}
