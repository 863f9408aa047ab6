use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Snapshot, SnapshotItem, Tape, Tensor, Var};

/// Snapshot record holding the JSON model configuration.
pub const CONFIG_RECORD: &str = "__config__";

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    /// Normal with std `sqrt(2 / fan_in) · scale`.
    FanIn {
        fan_in: usize,
        scale: f64,
    },
    Zero,
}

fn conv(out: &mut Vec<(String, Vec<usize>, Init)>, name: &str, o: usize, i: usize, scale: f64) {
    out.push((
        format!("{name}.weight"),
        vec![o, i, 3, 3],
        Init::FanIn {
            fan_in: i * 9,
            scale,
        },
    ));
    out.push((format!("{name}.bias"), vec![o], Init::Zero));
}

fn dense(out: &mut Vec<(String, Vec<usize>, Init)>, name: &str, o: usize, i: usize) {
    out.push((
        format!("{name}.weight"),
        vec![o, i],
        Init::FanIn {
            fan_in: i,
            scale: 1.0,
        },
    ));
    out.push((format!("{name}.bias"), vec![o], Init::Zero));
}

fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let c = cfg.channels;
    let mut out = Vec::new();
    for i in 0..cfg.encoder_depth {
        conv(
            &mut out,
            &format!("encoder.{i}"),
            c,
            if i == 0 { 3 } else { c },
            1.0,
        );
    }
    for t in 1..=cfg.units {
        let u = format!("unit{t}");
        if cfg.intra_en {
            let cin = if cfg.routes_top1_into(t) { 4 * c } else { c };
            conv(&mut out, &format!("{u}.spatial.0"), c, cin, 1.0);
            conv(&mut out, &format!("{u}.spatial.1"), c, c, 1.0);
            dense(&mut out, &format!("{u}.se.reduce"), c / cfg.se_reduction, c);
            dense(&mut out, &format!("{u}.se.expand"), c, c / cfg.se_reduction);
        }
        conv(&mut out, &format!("{u}.e2a"), 3, c, 1.0);
        if cfg.inter_af {
            if cfg.e2a {
                conv(&mut out, &format!("{u}.cof.0"), c, 3, 1.0);
                conv(&mut out, &format!("{u}.cof.1"), 1, c, 1.0);
            }
            conv(
                &mut out,
                &format!("{u}.gconv.0"),
                c,
                3 * (cfg.k + 1) * c,
                1.0,
            );
            conv(&mut out, &format!("{u}.gconv.1"), c, c, 1.0);
            conv(&mut out, &format!("{u}.gwt.0"), c, 3 * c, 1.0);
            for l in 1..4 {
                conv(&mut out, &format!("{u}.gwt.{l}"), c, c, 1.0);
            }
        }
    }
    conv(&mut out, "head", 3, c, 0.1);
    out
}

/// Names and shapes of every learnable tensor for `cfg`, in storage order.
pub fn param_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    layout(cfg).into_iter().map(|(n, s, _)| (n, s)).collect()
}

/// Named learnable tensors plus the configuration they were built for.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Scalar> {
    pub config: ModelConfig,
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> ModelParams<T> {
    /// Fan-in scaled normal weights, zero biases; the head is scaled by 0.1.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = layout(&config)
            .into_iter()
            .map(|(name, shape, init)| {
                let t = match init {
                    Init::Zero => Tensor::zeros(shape),
                    Init::FanIn { fan_in, scale } => {
                        let std = (2.0 / fan_in as f64).sqrt() * scale;
                        let normal = Normal::new(0.0, std).expect("positive std");
                        Tensor::from_fn(shape, |_| T::lit(normal.sample(&mut rng)))
                    }
                };
                (name, t)
            })
            .collect();
        Ok(ModelParams { config, entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.cast()))
                .collect(),
        }
    }

    /// Records every tensor on `tape` (as trainable leaves when `trainable`).
    pub fn bind(&self, tape: &Tape<T>, trainable: bool) -> HashMap<String, Var> {
        self.entries
            .iter()
            .map(|(n, t)| (n.clone(), tape.leaf(t.clone(), trainable)))
            .collect()
    }

    /// Builds parameters from named tensors, checking names and shapes
    /// against the layout for `config`.
    pub fn from_entries(
        config: ModelConfig,
        mut named: HashMap<String, Tensor<T>>,
    ) -> Result<Self> {
        config.validate()?;
        let mut entries = Vec::new();
        for (name, shape) in param_shapes(&config) {
            let t = named
                .remove(&name)
                .ok_or_else(|| Error::schema(&name, "missing parameter tensor"))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::schema(
                    &name,
                    format!("expected shape {:?}, found {:?}", shape, t.shape()),
                ));
            }
            entries.push((name, t));
        }
        if let Some(extra) = named.keys().next() {
            return Err(Error::schema(extra, "unexpected parameter tensor"));
        }
        Ok(ModelParams { config, entries })
    }

    /// Mirrors the auxiliary-view weight blocks (view 0 ← view 2) in every
    /// layer that consumes a concatenation over views, so swapping the two
    /// auxiliary inputs leaves the output unchanged.
    pub fn symmetrize_views(&mut self) {
        let c = self.config.channels;
        let group = (self.config.k + 1) * c;
        let units = self.config.units;
        for t in 1..=units {
            let u = format!("unit{t}");
            // [F (C) | top1 view0 (C) | top1 view1 (C) | top1 view2 (C)]
            if self.config.routes_top1_into(t) && self.config.intra_en {
                mirror_input_blocks(self.get_mut(&format!("{u}.spatial.0.weight")), c, c, 3 * c);
            }
            if self.config.inter_af {
                mirror_input_blocks(
                    self.get_mut(&format!("{u}.gconv.0.weight")),
                    group,
                    0,
                    2 * group,
                );
                mirror_input_blocks(self.get_mut(&format!("{u}.gwt.0.weight")), c, 0, 2 * c);
            }
        }
    }
}

/// Copies input-channel block `[src, src + len)` onto `[dst, dst + len)`.
fn mirror_input_blocks<T: Scalar>(w: Option<&mut Tensor<T>>, len: usize, dst: usize, src: usize) {
    let Some(w) = w else { return };
    let (o, i, kh, kw) = w.dims4().expect("conv weight is OIHW");
    let plane = kh * kw;
    let data = w.data_mut();
    for out_c in 0..o {
        for j in 0..len {
            let s = (out_c * i + src + j) * plane;
            let d = (out_c * i + dst + j) * plane;
            for q in 0..plane {
                data[d + q] = data[s + q];
            }
        }
    }
}

impl ModelParams<f32> {
    pub fn to_snapshot(&self) -> Result<Snapshot> {
        let mut s = Snapshot::new();
        let cfg = serde_json::to_vec(&self.config)
            .map_err(|e| Error::Malformed(format!("serializing model config: {e}")))?;
        s.push_bytes(CONFIG_RECORD, cfg);
        for (n, t) in &self.entries {
            s.push_tensor(n.clone(), t.clone());
        }
        Ok(s)
    }

    /// Reads parameters from a snapshot. Tensors outside the model layout,
    /// such as optimizer moments, are ignored.
    pub fn from_snapshot(s: &Snapshot) -> Result<Self> {
        let raw = s
            .bytes(CONFIG_RECORD)
            .ok_or_else(|| Error::schema(CONFIG_RECORD, "snapshot has no model config record"))?;
        let config: ModelConfig =
            serde_json::from_slice(raw).map_err(|e| Error::schema(CONFIG_RECORD, e.to_string()))?;
        let layout: HashMap<String, Vec<usize>> = param_shapes(&config).into_iter().collect();
        let named = s
            .items
            .iter()
            .filter_map(|(n, item)| match item {
                SnapshotItem::F32(t) if layout.contains_key(n) => Some((n.clone(), t.clone())),
                _ => None,
            })
            .collect();
        Self::from_entries(config, named)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_snapshot()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_snapshot(&Snapshot::load(path)?)
    }
}
