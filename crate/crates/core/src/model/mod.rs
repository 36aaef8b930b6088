//! Bidirectional-attention sequential recommender with exact analytic
//! gradients.
//!
//! Architecture: item embedding plus learned positions, `n_layers` pre-norm
//! encoder layers (multi-head self-attention over non-pad positions, GELU
//! feed-forward of width `4 * d_model`), a final layer norm, and logits tied
//! to the item embedding plus a per-item output bias. Logits cover the real
//! items `1..=num_items` only.

use std::sync::Arc;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::ItemId;
use crate::error::{Error, Result};
use crate::util::{self, rng_from_seed};

mod backward;
mod forward;
pub mod optim;
mod params;

pub use forward::{Dropout, ForwardOutput, PositionOutput, WindowCache};
pub use params::{ParamVector, Segment};
pub(crate) use params::{read_segments, write_segments};

pub const INIT_STD: f64 = 0.02;
pub(crate) const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// `|V|`; filled in from the dataset when left at 0 in a config file.
    pub num_items: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    /// Window length `T`.
    pub max_len: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_items: 0,
            d_model: 64,
            n_heads: 2,
            n_layers: 2,
            max_len: 50,
            dropout: 0.2,
        }
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            d_model: 16,
            n_heads: 2,
            n_layers: 1,
            max_len: 20,
            ..Self::default()
        }
    }

    pub fn with_items(mut self, num_items: usize) -> Self {
        self.num_items = num_items;
        self
    }

    /// Token vocabulary: pad `0`, items, mask `num_items + 1`.
    pub fn vocab(&self) -> usize {
        self.num_items + 2
    }

    pub fn mask_token(&self) -> ItemId {
        self.num_items as ItemId + 1
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_items == 0 {
            return Err(Error::Config("num_items must be >= 1".into()));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model ({}) must be a positive multiple of n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerLayout {
    pub attn_q: usize,
    pub attn_k: usize,
    pub attn_v: usize,
    pub attn_o: usize,
    pub ln1_scale: usize,
    pub ln1_shift: usize,
    pub ln2_scale: usize,
    pub ln2_shift: usize,
    pub ffn_w1: usize,
    pub ffn_b1: usize,
    pub ffn_w2: usize,
    pub ffn_b2: usize,
}

/// Offsets of every weight inside the flat parameter vector.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub item_embedding: usize,
    pub pos_embedding: usize,
    pub final_ln_scale: usize,
    pub final_ln_shift: usize,
    pub output_bias: usize,
    pub layers: Vec<LayerLayout>,
    pub segments: Arc<[Segment]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Normal,
    Ones,
    Zeros,
}

fn segment_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.d_model;
    let f = cfg.ffn_dim();
    let mut specs = vec![
        ("item_embedding".to_string(), vec![cfg.vocab(), d], Init::Normal),
        ("pos_embedding".to_string(), vec![cfg.max_len, d], Init::Normal),
        ("final_ln_scale".to_string(), vec![d], Init::Ones),
        ("final_ln_shift".to_string(), vec![d], Init::Zeros),
        ("output_bias".to_string(), vec![cfg.num_items], Init::Normal),
    ];
    for l in 0..cfg.n_layers {
        let p = format!("layer{l}.");
        specs.extend([
            (p.clone() + "attn_q", vec![d, d], Init::Normal),
            (p.clone() + "attn_k", vec![d, d], Init::Normal),
            (p.clone() + "attn_v", vec![d, d], Init::Normal),
            (p.clone() + "attn_o", vec![d, d], Init::Normal),
            (p.clone() + "ln1_scale", vec![d], Init::Ones),
            (p.clone() + "ln1_shift", vec![d], Init::Zeros),
            (p.clone() + "ln2_scale", vec![d], Init::Ones),
            (p.clone() + "ln2_shift", vec![d], Init::Zeros),
            (p.clone() + "ffn_w1", vec![d, f], Init::Normal),
            (p.clone() + "ffn_b1", vec![f], Init::Normal),
            (p.clone() + "ffn_w2", vec![f, d], Init::Normal),
            (p + "ffn_b2", vec![d], Init::Normal),
        ]);
    }
    specs.sort_by(|a, b| a.0.cmp(&b.0));
    specs
}

/// The fixed architecture bound to one configuration.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    layout: Layout,
    arch_hash: u64,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let specs = segment_specs(&config);
        let mut fingerprint = format!(
            "mergerec-encoder;items={};d={};heads={};layers={};T={};",
            config.num_items, config.d_model, config.n_heads, config.n_layers, config.max_len
        );
        let mut segments = Vec::with_capacity(specs.len());
        let mut offset = 0;
        for (name, shape, _) in &specs {
            let len: usize = shape.iter().product();
            fingerprint.push_str(&format!("{name}:{shape:?};"));
            segments.push(Segment {
                name: name.clone(),
                offset,
                len,
            });
            offset += len;
        }
        let segments: Arc<[Segment]> = segments.into();
        let at = |name: &str| -> usize {
            segments
                .iter()
                .find(|s| s.name == name)
                .map(|s| s.offset)
                .expect("segment present by construction")
        };
        let layers = (0..config.n_layers)
            .map(|l| {
                let n = |s: &str| at(&format!("layer{l}.{s}"));
                LayerLayout {
                    attn_q: n("attn_q"),
                    attn_k: n("attn_k"),
                    attn_v: n("attn_v"),
                    attn_o: n("attn_o"),
                    ln1_scale: n("ln1_scale"),
                    ln1_shift: n("ln1_shift"),
                    ln2_scale: n("ln2_scale"),
                    ln2_shift: n("ln2_shift"),
                    ffn_w1: n("ffn_w1"),
                    ffn_b1: n("ffn_b1"),
                    ffn_w2: n("ffn_w2"),
                    ffn_b2: n("ffn_b2"),
                }
            })
            .collect();
        let layout = Layout {
            item_embedding: at("item_embedding"),
            pos_embedding: at("pos_embedding"),
            final_ln_scale: at("final_ln_scale"),
            final_ln_shift: at("final_ln_shift"),
            output_bias: at("output_bias"),
            layers,
            segments,
        };
        Ok(Self {
            config,
            layout,
            arch_hash: util::sha256_u64(fingerprint.as_bytes()),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn arch_hash(&self) -> u64 {
        self.arch_hash
    }

    pub fn num_params(&self) -> usize {
        self.layout.segments.iter().map(|s| s.len).sum()
    }

    pub fn segments(&self) -> &[Segment] {
        &self.layout.segments
    }

    /// Normal(0, 0.02) weights, layer-norm scales 1 and shifts 0, drawn
    /// segment by segment in canonical order.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let mut rng = rng_from_seed(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut values = Vec::with_capacity(self.num_params());
        for (_, shape, init) in segment_specs(&self.config) {
            let len: usize = shape.iter().product();
            match init {
                Init::Normal => values.extend((0..len).map(|_| normal.sample(&mut rng))),
                Init::Ones => values.extend(std::iter::repeat_n(1.0, len)),
                Init::Zeros => values.extend(std::iter::repeat_n(0.0, len)),
            }
        }
        ParamVector::new(self.arch_hash, self.layout.segments.clone(), values)
            .expect("layout matches by construction")
    }

    /// Rejects parameter vectors built for a different architecture.
    pub fn check(&self, params: &ParamVector) -> Result<()> {
        if params.arch_hash() != self.arch_hash {
            return Err(Error::ArchMismatch {
                expected: self.arch_hash,
                found: params.arch_hash(),
            });
        }
        if params.segments() != &self.layout.segments[..] {
            return Err(Error::Format("segment layout does not match the model".into()));
        }
        Ok(())
    }

    pub fn load_checkpoint<R: std::io::Read>(&self, r: &mut R) -> Result<ParamVector> {
        let params = ParamVector::read_checkpoint_expecting(r, self.arch_hash)?;
        self.check(&params)?;
        Ok(params)
    }
}
