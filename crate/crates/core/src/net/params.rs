use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::NetworkConfig;
use super::graph::{LayerGraph, NodeKind};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;
use crate::wtconv::{WTConvConfig, WTConvParams};

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    /// Running normalization statistics are stored alongside the weights but
    /// are not optimized.
    pub trainable: bool,
}

/// Named parameter tensors in a fixed build order.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

pub(crate) fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Effective group count of a dense layer's bottleneck.
pub fn bottleneck_groups(cfg: &NetworkConfig, in_channels: usize, out_channels: usize) -> usize {
    gcd(gcd(cfg.bottleneck_groups, in_channels), out_channels)
}

pub fn layer_wtconv_config(cfg: &NetworkConfig, growth: usize) -> WTConvConfig {
    WTConvConfig::new(cfg.wt_levels, cfg.wt_kernel, cfg.bottleneck_width * growth)
        .with_mode(cfg.wt_mode)
        .with_residual(cfg.wt_residual)
}

impl NetworkParams {
    pub fn from_entries(entries: Vec<ParamEntry>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if index.insert(e.name.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate parameter name {}", e.name)));
            }
        }
        Ok(Self { entries, index })
    }

    /// Deterministic initialization: ReLU-scaled uniform conv weights, unit
    /// normalization scales, zero offsets and biases.
    pub fn build(cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let graph = LayerGraph::build(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut entries = Vec::new();
        let mut push = |name: String, tensor: Tensor, trainable: bool| {
            entries.push(ParamEntry {
                name,
                tensor,
                trainable,
            })
        };
        let kaiming = |shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng| {
            let b = (6.0 / fan_in as f64).sqrt();
            Tensor::uniform(shape, -b, b, rng)
        };
        let bn = |push: &mut dyn FnMut(String, Tensor, bool), name: &str, c: usize| {
            push(format!("{name}.bn.gamma"), Tensor::full(&[c], 1.0), true);
            push(format!("{name}.bn.beta"), Tensor::zeros(&[c]), true);
            push(format!("{name}.bn.running_mean"), Tensor::zeros(&[c]), false);
            push(format!("{name}.bn.running_var"), Tensor::full(&[c], 1.0), false);
        };

        for node in &graph.nodes {
            let (cin, cout) = (node.in_channels, node.out_channels);
            match node.kind {
                NodeKind::Stem => {
                    let w = kaiming(&[cout, 1, 3, 3, 3], 27, &mut rng);
                    push("stem.weight".into(), w, true);
                }
                NodeKind::Transition => {
                    bn(&mut push, &node.name, cin);
                    let w = kaiming(&[cout, cin, 1, 1, 1], cin, &mut rng);
                    push(format!("{}.conv.weight", node.name), w, true);
                }
                NodeKind::Dense => {
                    bn(&mut push, &node.name, cin);
                    let width = cfg.bottleneck_width * cout;
                    let g = bottleneck_groups(cfg, cin, width);
                    let w = kaiming(&[width, cin / g, 1, 1, 1], cin / g, &mut rng);
                    push(format!("{}.bottleneck.weight", node.name), w, true);
                    let wcfg = layer_wtconv_config(cfg, cout);
                    let wp = WTConvParams::init(&wcfg, &mut rng)?;
                    for (block, t) in wp.blocks() {
                        push(format!("{}.wtconv.{block}", node.name), t.clone(), true);
                    }
                    let w = kaiming(&[cout, width, 1, 1, 1], width, &mut rng);
                    push(format!("{}.pointwise.weight", node.name), w, true);
                }
            }
        }
        let c = graph.head_channels;
        bn(&mut push, "head", c);
        let b = 1.0 / (c as f64).sqrt();
        let w = Tensor::uniform(&[cfg.classes, c], -b, b, &mut rng);
        push("head.weight".into(), w, true);
        push("head.bias".into(), Tensor::zeros(&[cfg.classes]), true);
        Self::from_entries(entries)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index_of(name)
            .map(|i| &self.entries[i].tensor)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let i = self
            .index_of(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named {name}")))?;
        Ok(&mut self.entries[i].tensor)
    }

    /// Replaces a tensor, keeping its shape.
    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.shape() != tensor.shape() {
            return Err(shape_err!(
                "{name}: {:?} cannot replace {:?}",
                tensor.shape(),
                slot.shape()
            ));
        }
        *slot = tensor;
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    tensor: Tensor::zeros(e.tensor.shape()),
                    trainable: e.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.len())
            .sum()
    }

    /// Accumulates `other` into `self` entry by entry.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(shape_err!("parameter sets differ in length"));
        }
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            a.tensor.add_assign(&b.tensor)?;
        }
        Ok(())
    }

    /// Rounds every value through `f32`, the checkpoint precision.
    pub fn quantize_f32(&mut self) {
        for e in &mut self.entries {
            e.tensor
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = *v as f32 as f64);
        }
    }

    /// Reassembles one dense layer's wavelet conv parameters.
    pub fn wtconv(&self, layer: &str, wcfg: &WTConvConfig) -> Result<WTConvParams> {
        let get = |block: String| self.get(&format!("{layer}.wtconv.{block}")).cloned();
        Ok(WTConvParams {
            level_kernels: (1..=wcfg.levels)
                .map(|i| get(format!("level{i}.kernel")))
                .collect::<Result<_>>()?,
            level_scales: (1..=wcfg.levels)
                .map(|i| get(format!("level{i}.scale")))
                .collect::<Result<_>>()?,
            base_kernel: if wcfg.residual {
                Some(get("base.kernel".into())?)
            } else {
                None
            },
        })
    }

    /// Adds one layer's wavelet conv gradients into the matching entries.
    pub fn accumulate_wtconv(&mut self, layer: &str, grads: &WTConvParams) -> Result<()> {
        for (block, t) in grads.blocks() {
            self.get_mut(&format!("{layer}.wtconv.{block}"))?.add_assign(t)?;
        }
        Ok(())
    }
}
