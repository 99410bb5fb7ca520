use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::attention::AttentionMode;
use crate::numerics::{Real, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayerIx {
    pub attn_norm: usize,
    pub q: usize,
    pub k: usize,
    pub v: usize,
    pub o: usize,
    pub rel_bias: usize,
    pub side_bias: Option<usize>,
    pub global_norm: Option<usize>,
    pub ffn_norm: usize,
    pub wi: usize,
    pub wo: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayerIx {
    pub self_norm: usize,
    pub q: usize,
    pub k: usize,
    pub v: usize,
    pub o: usize,
    pub rel_bias: usize,
    pub cross_norm: usize,
    pub cq: usize,
    pub ck: usize,
    pub cv: usize,
    pub co: usize,
    pub ffn_norm: usize,
    pub wi: usize,
    pub wo: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Ones,
    Zeros,
    Normal(f64),
}

/// Parameter names, shapes and initialisers in checkpoint order, with index
/// handles for the forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
    inits: Vec<Init>,
    pub embedding: usize,
    pub encoder: Vec<EncoderLayerIx>,
    pub encoder_norm: usize,
    pub decoder: Vec<DecoderLayerIx>,
    pub decoder_norm: usize,
    pub lm_head: usize,
}

struct Builder {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    inits: Vec<Init>,
}

impl Builder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.names.push(name);
        self.shapes.push(shape);
        self.inits.push(init);
        self.names.len() - 1
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (d, f, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
        let (h, nb) = (cfg.attention.num_heads, cfg.attention.num_buckets);
        let proj = Init::Normal(1.0 / (d as f64).sqrt());
        let mut b = Builder {
            names: vec![],
            shapes: vec![],
            inits: vec![],
        };
        let embedding = b.add("embedding".into(), vec![v, d], Init::Normal(1.0));
        let tglobal = cfg.encoder_mode == AttentionMode::TGlobal;
        let encoder = (0..cfg.num_layers)
            .map(|i| {
                let p = |s: &str| format!("encoder.{i}.{s}");
                EncoderLayerIx {
                    attn_norm: b.add(p("attn_norm"), vec![d], Init::Ones),
                    q: b.add(p("q"), vec![d, d], proj),
                    k: b.add(p("k"), vec![d, d], proj),
                    v: b.add(p("v"), vec![d, d], proj),
                    o: b.add(p("o"), vec![d, d], proj),
                    rel_bias: b.add(p("rel_bias"), vec![h, nb], Init::Zeros),
                    side_bias: tglobal.then(|| b.add(p("side_bias"), vec![h, nb], Init::Zeros)),
                    global_norm: tglobal.then(|| b.add(p("global_norm"), vec![d], Init::Ones)),
                    ffn_norm: b.add(p("ffn_norm"), vec![d], Init::Ones),
                    wi: b.add(p("wi"), vec![d, f], proj),
                    wo: b.add(p("wo"), vec![f, d], Init::Normal(1.0 / (f as f64).sqrt())),
                }
            })
            .collect();
        let encoder_norm = b.add("encoder.final_norm".into(), vec![d], Init::Ones);
        let decoder = (0..cfg.num_layers)
            .map(|i| {
                let p = |s: &str| format!("decoder.{i}.{s}");
                DecoderLayerIx {
                    self_norm: b.add(p("self_norm"), vec![d], Init::Ones),
                    q: b.add(p("q"), vec![d, d], proj),
                    k: b.add(p("k"), vec![d, d], proj),
                    v: b.add(p("v"), vec![d, d], proj),
                    o: b.add(p("o"), vec![d, d], proj),
                    rel_bias: b.add(p("rel_bias"), vec![h, nb], Init::Zeros),
                    cross_norm: b.add(p("cross_norm"), vec![d], Init::Ones),
                    cq: b.add(p("cross_q"), vec![d, d], proj),
                    ck: b.add(p("cross_k"), vec![d, d], proj),
                    cv: b.add(p("cross_v"), vec![d, d], proj),
                    co: b.add(p("cross_o"), vec![d, d], proj),
                    ffn_norm: b.add(p("ffn_norm"), vec![d], Init::Ones),
                    wi: b.add(p("wi"), vec![d, f], proj),
                    wo: b.add(p("wo"), vec![f, d], Init::Normal(1.0 / (f as f64).sqrt())),
                }
            })
            .collect();
        let decoder_norm = b.add("decoder.final_norm".into(), vec![d], Init::Ones);
        let lm_head = b.add("lm_head".into(), vec![d, v], proj);
        Layout {
            names: b.names,
            shapes: b.shapes,
            inits: b.inits,
            embedding,
            encoder,
            encoder_norm,
            decoder,
            decoder_norm,
            lm_head,
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// Named parameter tensors in [`Layout`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T: Real = f64> {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Real> Params<T> {
    /// Seeded initialisation: unit-normal embeddings, `N(0, 1/fan_in)`
    /// projections, unit norm scales, zero bias tables.
    pub fn init(layout: &Layout, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = layout
            .shapes
            .iter()
            .zip(&layout.inits)
            .map(|(shape, init)| match *init {
                Init::Ones => Tensor::ones(shape),
                Init::Zeros => Tensor::zeros(shape),
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).expect("positive std");
                    Tensor::from_fn(shape, |_| T::of(dist.sample(&mut rng)))
                }
            })
            .collect();
        Params {
            names: layout.names.clone(),
            tensors,
        }
    }

    /// Check names and shapes against `layout`.
    pub fn check(&self, layout: &Layout) -> Result<()> {
        if self.names != layout.names {
            return Err(Error::Format("parameter names do not match the model layout".into()));
        }
        for ((n, t), s) in self.names.iter().zip(&self.tensors).zip(&layout.shapes) {
            if t.shape() != s.as_slice() {
                return Err(Error::shape("params", format!("{n}: {:?} expected {s:?}", t.shape())));
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        Params {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.all_finite())
    }
}
