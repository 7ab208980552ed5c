//! Pre-LN transformer encoder over the residue vocabulary, with a tied
//! MLM output head and four task heads (per-token classes, sequence
//! classes, residue-pair contacts, scalar regression).
//!
//! Parameters live in an insertion-ordered name -> tensor map; the order
//! is the canonical checkpoint order. `bind` leafs every parameter onto
//! a tape exactly once so fan-out (for example the tied embedding used
//! by both `encode` and `mlm_logits`) accumulates into a single
//! gradient.

mod forward;

pub use forward::{streaming_eval_hidden, EncoderOutput, Mode, LN_EPS};

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, TensorId};

/// Encoder hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub hidden_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_size: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
    pub dropout: f64,
    pub pre_ln: bool,
}

impl ModelConfig {
    /// Config with conventional defaults: ffn 4H, 512 positions, the
    /// 30-token residue vocabulary, dropout 0.1, pre-LN order.
    pub fn new(hidden_size: usize, num_layers: usize, num_heads: usize) -> Self {
        ModelConfig {
            hidden_size,
            num_layers,
            num_heads,
            ffn_size: 4 * hidden_size,
            max_positions: 512,
            vocab_size: crate::tokenizer::VOCAB_SIZE,
            dropout: 0.1,
            pre_ln: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_size == 0 || self.num_heads == 0 || self.num_layers == 0 {
            return Err(Error::Config(format!(
                "hidden {}, layers {}, heads {} must all be positive",
                self.hidden_size, self.num_layers, self.num_heads
            )));
        }
        if self.hidden_size % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden_size, self.num_heads
            )));
        }
        if self.max_positions < 2 {
            return Err(Error::Config(format!(
                "max_positions {} cannot hold [CLS] and a token",
                self.max_positions
            )));
        }
        if self.ffn_size == 0 || self.vocab_size == 0 {
            return Err(Error::Config("ffn_size and vocab_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// The ten published grid rows, named `hidden-H-layer-L-head-A`.
    pub fn preset_names() -> &'static [&'static str] {
        &[
            "hidden-512-layer-32-head-8",
            "hidden-768-layer-12-head-6",
            "hidden-768-layer-16-head-16",
            "hidden-768-layer-16-head-24",
            "hidden-1024-layer-12-head-16",
            "hidden-1024-layer-12-head-32",
            "hidden-2048-layer-12-head-16",
            "hidden-2048-layer-24-head-16",
            "hidden-2048-layer-24-head-8",
            "hidden-3072-layer-24-head-16",
        ]
    }

    /// Expands a preset name into its config.
    pub fn preset(name: &str) -> Result<ModelConfig> {
        if !Self::preset_names().contains(&name) {
            return Err(Error::Config(format!(
                "unknown preset '{name}'; valid presets: {}",
                Self::preset_names().join(", ")
            )));
        }
        let mut parts = name.split('-');
        let mut next_num = |key: &str| -> usize {
            assert_eq!(parts.next(), Some(key));
            parts.next().expect("preset grammar").parse().expect("preset grammar")
        };
        let hidden = next_num("hidden");
        let layers = next_num("layer");
        let heads = next_num("head");
        Ok(ModelConfig::new(hidden, layers, heads))
    }

    /// Encoder parameter names and shapes in canonical (checkpoint)
    /// order.
    pub fn param_spec(&self) -> Vec<(String, Vec<usize>)> {
        let (h, f) = (self.hidden_size, self.ffn_size);
        let mut spec = vec![
            ("embed.token".into(), vec![self.vocab_size, h]),
            ("embed.position".into(), vec![self.max_positions, h]),
        ];
        for i in 0..self.num_layers {
            for (suffix, dims) in [
                ("attn.ln.gamma", vec![h]),
                ("attn.ln.beta", vec![h]),
                ("attn.q.w", vec![h, h]),
                ("attn.q.b", vec![h]),
                ("attn.k.w", vec![h, h]),
                ("attn.k.b", vec![h]),
                ("attn.v.w", vec![h, h]),
                ("attn.v.b", vec![h]),
                ("attn.o.w", vec![h, h]),
                ("attn.o.b", vec![h]),
                ("ffn.ln.gamma", vec![h]),
                ("ffn.ln.beta", vec![h]),
                ("ffn.fc1.w", vec![h, f]),
                ("ffn.fc1.b", vec![f]),
                ("ffn.fc2.w", vec![f, h]),
                ("ffn.fc2.b", vec![h]),
            ] {
                spec.push((format!("layer{i}.{suffix}"), dims));
            }
        }
        if self.pre_ln {
            spec.push(("final_ln.gamma".into(), vec![h]));
            spec.push(("final_ln.beta".into(), vec![h]));
        }
        spec.push(("mlm.bias".into(), vec![self.vocab_size]));
        spec
    }

    /// Encoder parameter count as an explicit formula: embeddings
    /// (V+P)H, twelve H-square-sized matrices plus 13H of biases and
    /// norms per layer (with ffn = 4H), the final norm pair (pre-LN
    /// only; post-LN has no final norm), and the MLM bias.
    pub fn closed_form_param_count(&self) -> usize {
        let (h, f, v, p) = (self.hidden_size, self.ffn_size, self.vocab_size, self.max_positions);
        let per_layer = 4 * h * h + 4 * h + 2 * (h * f) + f + h + 4 * h;
        let final_norm = if self.pre_ln { 2 * h } else { 0 };
        (v + p) * h + self.num_layers * per_layer + final_norm + v
    }
}

/// Task heads. Each owns a 2-layer GELU MLP whose parameters join the
/// model's map under a head-specific prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    /// Per-position classifier, 3 or 8 secondary-structure classes.
    TokenClass { classes: usize },
    /// Sequence classifier on the [CLS] state.
    SeqClass { classes: usize },
    /// Residue-pair contact scorer on concatenated state pairs.
    Contact,
    /// Scalar regression on the [CLS] state.
    Regress,
}

impl HeadKind {
    pub fn prefix(&self) -> String {
        match self {
            HeadKind::TokenClass { classes } => format!("head.tok{classes}"),
            HeadKind::SeqClass { classes } => format!("head.seq{classes}"),
            HeadKind::Contact => "head.contact".into(),
            HeadKind::Regress => "head.value".into(),
        }
    }

    /// Parameter names and shapes for this head.
    pub fn param_spec(&self, config: &ModelConfig) -> Result<Vec<(String, Vec<usize>)>> {
        let h = config.hidden_size;
        let (d_in, d_out) = match self {
            HeadKind::TokenClass { classes } => {
                if *classes != 3 && *classes != 8 {
                    return Err(Error::Config(format!(
                        "token classifier supports 3 or 8 classes, got {classes}"
                    )));
                }
                (h, *classes)
            }
            HeadKind::SeqClass { classes } => {
                if *classes < 2 {
                    return Err(Error::Config(format!(
                        "sequence classifier needs at least 2 classes, got {classes}"
                    )));
                }
                (h, *classes)
            }
            HeadKind::Contact => (2 * h, 1),
            HeadKind::Regress => (h, 1),
        };
        let p = self.prefix();
        Ok(vec![
            (format!("{p}.fc1.w"), vec![d_in, h]),
            (format!("{p}.fc1.b"), vec![h]),
            (format!("{p}.fc2.w"), vec![h, d_out]),
            (format!("{p}.fc2.b"), vec![d_out]),
        ])
    }
}

/// FNV-1a, used to derive a per-tensor rng stream from (seed, name) so
/// initialization order never matters: layer-streaming forward passes
/// see exactly the weights a fully materialized model would.
fn fnv1a(name: &str) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for b in name.as_bytes() {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Initial data for one named tensor: Normal(0, 0.02^2) for weight
/// matrices and embeddings, ones for norm gains, zeros for biases and
/// norm shifts. Draws in f64 so every element precision sees the same
/// stream.
pub(crate) fn init_tensor_data<T: Scalar>(name: &str, dims: &[usize], seed: u64) -> Vec<T> {
    let numel: usize = dims.iter().product();
    if name.ends_with(".w") || name.starts_with("embed.") {
        let normal = Normal::new(0.0f64, 0.02).expect("valid stddev");
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name));
        (0..numel).map(|_| T::from_f64(normal.sample(&mut rng))).collect()
    } else if name.ends_with(".gamma") {
        vec![T::one(); numel]
    } else {
        vec![T::zero(); numel]
    }
}

/// Parameter tensor ids on one tape, name -> leaf. Heads and the MLM
/// projection look up the same ids `encode` used, so each parameter has
/// exactly one gradient slot.
pub struct Bound {
    pub ids: IndexMap<String, TensorId>,
}

impl Bound {
    pub fn id(&self, name: &str) -> TensorId {
        *self.ids.get(name).unwrap_or_else(|| panic!("parameter '{name}' not bound"))
    }
}

/// The encoder plus any instantiated heads. Element type `T` is the
/// working precision; f64 instantiations run the identical code path
/// for gradient checking.
#[derive(Debug, Clone)]
pub struct Model<T: Scalar = f32> {
    pub config: ModelConfig,
    pub seed: u64,
    pub params: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> Model<T> {
    /// Fresh encoder with seeded initialization; no heads yet.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = IndexMap::new();
        for (name, dims) in config.param_spec() {
            let data = init_tensor_data::<T>(&name, &dims, seed);
            let t = Tensor::new(dims, data).expect("spec dims match data");
            params.insert(name, t.with_requires_grad(true));
        }
        Ok(Model { config, seed, params })
    }

    /// Adds a head's parameters if not already present. Idempotent;
    /// initialization depends only on (model seed, tensor name).
    pub fn ensure_head(&mut self, head: HeadKind) -> Result<()> {
        for (name, dims) in head.param_spec(&self.config)? {
            if !self.params.contains_key(&name) {
                let data = init_tensor_data::<T>(&name, &dims, self.seed);
                let t = Tensor::new(dims, data).expect("spec dims");
                self.params.insert(name, t.with_requires_grad(true));
            }
        }
        Ok(())
    }

    pub fn has_head(&self, head: HeadKind) -> bool {
        self.params.contains_key(&format!("{}.fc1.w", head.prefix()))
    }

    /// Total trainable elements across all present tensors.
    pub fn param_count(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    /// Names participating in the MLM objective (everything outside
    /// `head.`).
    pub fn encoder_param_names(&self) -> Vec<String> {
        self.params.keys().filter(|n| !n.starts_with("head.")).cloned().collect()
    }

    /// Leafs every parameter onto the tape, in canonical order.
    pub fn bind<'m>(&'m self, tape: &mut Tape<'m, T>) -> Bound {
        let mut ids = IndexMap::new();
        for (name, tensor) in &self.params {
            ids.insert(name.clone(), tape.leaf(tensor));
        }
        Bound { ids }
    }

    /// Casts every parameter to another element precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let mut params = IndexMap::new();
        for (name, tensor) in &self.params {
            params.insert(name.clone(), tensor.cast::<U>());
        }
        Model { config: self.config.clone(), seed: self.seed, params }
    }
}
