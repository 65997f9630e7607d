//! Full cross-view model: equivariant encoder, patch graph with
//! descriptor readout, and a linear classifier head, all addressed by
//! stable tensor names.

use crate::backbone::{
    backbone_tables, encode_realized, realize_backbone, BackboneConfig, FeatureField, Field,
    GroupSpec, RealizedBackbone,
};
use crate::error::{Error, Result};
use crate::graph::{
    build_graph, build_plain_graph, gcn_propagate, init_super, partition, readout, Activation,
    NodeGraph, PatchGrid, ReadoutMode,
};
use crate::tape::{GatherMap, Graph, Var};
use crate::tensor::{Scalar, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::Arc;

const STATS_EPS: f64 = 1e-5;
const STATS_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub group_order: usize,
    pub stage_widths: Vec<usize>,
    pub kernel_size: usize,
    pub downsample: Vec<usize>,
    pub image_channels: usize,
    pub image_side: usize,
    pub grid_side: usize,
    pub gnn_widths: Vec<usize>,
    pub super_node: bool,
    pub classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            group_order: 4,
            stage_widths: vec![8, 16],
            kernel_size: 3,
            downsample: vec![2, 2],
            image_channels: 3,
            image_side: 64,
            grid_side: 4,
            gnn_widths: vec![64],
            super_node: true,
            classes: 32,
        }
    }
}

impl ModelConfig {
    pub fn backbone(&self) -> Result<BackboneConfig> {
        let cfg = BackboneConfig {
            group: GroupSpec::new(self.group_order)?,
            stage_widths: self.stage_widths.clone(),
            kernel_size: self.kernel_size,
            downsample: self.downsample.clone(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let backbone = self.backbone()?;
        if self.image_channels == 0 {
            return Err(Error::Config("image_channels must be positive".into()));
        }
        if self.classes == 0 {
            return Err(Error::Config("classes must be positive".into()));
        }
        if self.gnn_widths.is_empty() {
            return Err(Error::Config("at least one message-passing layer".into()));
        }
        let total = backbone.total_downsample();
        if self.image_side == 0 || self.image_side % total != 0 {
            return Err(Error::Config(format!(
                "image side {} not divisible by the backbone downsample {}",
                self.image_side, total
            )));
        }
        let fs = self.feature_side();
        if self.grid_side == 0 || fs % self.grid_side != 0 {
            return Err(Error::Config(format!(
                "feature side {} not divisible by grid side {}",
                fs, self.grid_side
            )));
        }
        Ok(())
    }

    pub fn feature_side(&self) -> usize {
        let total: usize = self.downsample.iter().product();
        self.image_side / total
    }

    pub fn feature_channels(&self) -> usize {
        *self.stage_widths.last().expect("validated non-empty")
    }

    pub fn patch_count(&self) -> usize {
        self.grid_side * self.grid_side
    }

    pub fn descriptor_dim(&self) -> usize {
        *self.gnn_widths.last().expect("validated non-empty")
    }

    /// Every named trainable tensor and its shape, in name order.
    pub fn parameter_shapes(&self) -> Result<BTreeMap<String, Vec<usize>>> {
        let backbone = self.backbone()?;
        let mut shapes = BTreeMap::new();
        for i in 0..self.stage_widths.len() {
            shapes.insert(
                format!("backbone.layer{}.base", i),
                backbone.base_shape(i, self.image_channels),
            );
            shapes.insert(format!("backbone.layer{}.bias", i), vec![self.stage_widths[i]]);
        }
        let mut d_in = self.feature_channels();
        for (l, &d_out) in self.gnn_widths.iter().enumerate() {
            shapes.insert(format!("gnn.layer{}.weight", l), vec![d_in, d_out]);
            d_in = d_out;
        }
        shapes.insert(
            "head.classifier.weight".into(),
            vec![self.descriptor_dim(), self.classes],
        );
        Ok(shapes)
    }

    /// Non-trainable running statistics, keyed like parameters.
    pub fn buffer_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let c = self.feature_channels();
        let mut shapes = BTreeMap::new();
        shapes.insert("norm.running_mean".into(), vec![c]);
        shapes.insert("norm.running_var".into(), vec![c]);
        shapes
    }
}

/// The assembled model: named parameters, running statistics, and the
/// fixed structures (rotation tables, patch grid, node graph) derived
/// from the config.
pub struct EgsModel<T: Scalar> {
    pub config: ModelConfig,
    pub params: BTreeMap<String, Tensor<T>>,
    pub buffers: BTreeMap<String, Tensor<T>>,
    backbone: BackboneConfig,
    tables: Vec<Arc<GatherMap>>,
    grid: PatchGrid,
    graph: NodeGraph,
}

const ROLE_INIT: u64 = 11;

fn uniform_tensor<T: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>, bound: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(-bound..bound)))
}

impl<T: Scalar> EgsModel<T> {
    /// Fresh model with seeded initialization. Kernels use a fan-in
    /// bound over the realized filter extent; linear maps use a
    /// symmetric fan-sum bound; biases start at zero.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let shapes = config.parameter_shapes()?;
        let mut params = BTreeMap::new();
        for (idx, (name, shape)) in shapes.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(crate::data::derive_seed(&[
                seed,
                ROLE_INIT,
                idx as u64,
            ]));
            let t = if name.ends_with(".bias") {
                Tensor::zeros(shape.clone())
            } else if name.starts_with("backbone.") {
                let k = config.kernel_size;
                let fan_in = if name.contains("layer0") {
                    config.image_channels * k * k
                } else {
                    shape[1] * config.group_order * k * k
                };
                uniform_tensor(&mut rng, shape.clone(), (6.0 / fan_in as f64).sqrt())
            } else {
                let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                uniform_tensor(&mut rng, shape.clone(), bound)
            };
            params.insert(name.clone(), t);
        }
        let mut buffers = BTreeMap::new();
        for (name, shape) in config.buffer_shapes() {
            let t = if name.ends_with("mean") {
                Tensor::zeros(shape)
            } else {
                Tensor::from_fn(shape, |_| T::one())
            };
            buffers.insert(name, t);
        }
        Self::from_parts(config, params, buffers)
    }

    /// Assemble from existing tensors, validating every name and shape.
    pub fn from_parts(
        config: ModelConfig,
        params: BTreeMap<String, Tensor<T>>,
        buffers: BTreeMap<String, Tensor<T>>,
    ) -> Result<Self> {
        config.validate()?;
        let expected = config.parameter_shapes()?;
        check_tensor_set("parameter", &expected, &params)?;
        check_tensor_set("buffer", &config.buffer_shapes(), &buffers)?;
        let backbone = config.backbone()?;
        let tables = backbone_tables(&backbone, config.image_channels);
        let grid = PatchGrid::new(config.grid_side, config.grid_side)?;
        let graph = if config.super_node {
            build_graph(&grid)
        } else {
            build_plain_graph(&grid)
        };
        Ok(EgsModel {
            config,
            params,
            buffers,
            backbone,
            tables,
            grid,
            graph,
        })
    }

    pub fn graph_nodes(&self) -> usize {
        self.graph.nodes()
    }

    /// Put every named tensor on the tape; parameters as gradient
    /// roots, buffers as constants.
    pub fn bind(&self, g: &mut Graph<T>) -> Result<BoundModel> {
        let mut vars = BTreeMap::new();
        for (name, tensor) in &self.params {
            vars.insert(name.clone(), g.param(tensor.clone()));
        }
        let stage_params: Vec<(Var, Var)> = (0..self.config.stage_widths.len())
            .map(|i| {
                (
                    vars[&format!("backbone.layer{}.base", i)],
                    vars[&format!("backbone.layer{}.bias", i)],
                )
            })
            .collect();
        let realized = realize_backbone(g, &stage_params, &self.tables, &self.backbone)?;

        // standardization constants, tiled to the node-feature shape
        let n = self.config.patch_count();
        let c = self.config.feature_channels();
        let mean = &self.buffers["norm.running_mean"];
        let var = &self.buffers["norm.running_var"];
        let neg_mean = Tensor::from_fn(vec![n, c], |i| {
            T::from_f64(-mean.values()[i % c].to_f64())
        });
        let inv_std = Tensor::from_fn(vec![n, c], |i| {
            T::from_f64(1.0 / (var.values()[i % c].to_f64() + STATS_EPS).sqrt())
        });
        Ok(BoundModel {
            vars,
            realized,
            neg_mean: g.leaf(neg_mean),
            inv_std: g.leaf(inv_std),
        })
    }

    /// Encode one image to patch-node features `[n,C]`; returns the raw
    /// nodes (they feed the running statistics) and the standardized
    /// version the graph layers consume.
    fn encode_nodes(
        &self,
        g: &mut Graph<T>,
        bound: &BoundModel,
        image: &FeatureField<T>,
    ) -> Result<(Var, Var)> {
        let field = Field::input(g, image);
        let pooled = encode_realized(g, &field, &bound.realized, &self.backbone)?;
        if pooled.height != self.config.feature_side() {
            return Err(Error::Geometry(format!(
                "encoder produced side {}, config wants {}",
                pooled.height,
                self.config.feature_side()
            )));
        }
        let raw = partition(g, &pooled, &self.grid)?;
        let centered = g.add(raw, bound.neg_mean)?;
        let standardized = g.mul(centered, bound.inv_std)?;
        Ok((raw, standardized))
    }

    /// Descriptors and class logits for a batch of images on a shared
    /// tape. Node features are returned so training can refresh the
    /// running statistics.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        bound: &BoundModel,
        images: &[FeatureField<T>],
    ) -> Result<ForwardOutput> {
        if images.is_empty() {
            return Err(Error::Dimension("empty image batch".into()));
        }
        let mut descriptors = Vec::with_capacity(images.len());
        let mut node_features = Vec::with_capacity(images.len());
        for image in images {
            let (raw, nodes) = self.encode_nodes(g, bound, image)?;
            node_features.push(raw);
            let mut h = if self.config.super_node {
                init_super(g, nodes)?
            } else {
                nodes
            };
            let last = self.config.gnn_widths.len() - 1;
            for l in 0..=last {
                let w = bound.vars[&format!("gnn.layer{}.weight", l)];
                let act = if l < last { Activation::Relu } else { Activation::Identity };
                h = gcn_propagate(g, h, &self.graph, w, act)?;
            }
            descriptors.push(readout(g, h, &self.graph, ReadoutMode::SuperOnly)?);
        }
        let stacked = g.stack_rows(&descriptors)?;
        let logits = g.matmul(stacked, bound.vars["head.classifier.weight"])?;
        Ok(ForwardOutput {
            descriptors: stacked,
            logits,
            node_features,
        })
    }

    /// EMA update of the running statistics from observed node
    /// features, channel by channel.
    pub fn update_stats(&mut self, g: &Graph<T>, node_features: &[Var]) -> Result<()> {
        if node_features.is_empty() {
            return Err(Error::Dimension("no node features to pool stats from".into()));
        }
        let c = self.config.feature_channels();
        let mut count = 0usize;
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for &v in node_features {
            let t = g.value(v);
            let s = t.shape();
            if s.len() != 2 || s[1] != c {
                return Err(Error::Dimension(format!(
                    "node features {:?} for {} channels",
                    s, c
                )));
            }
            for r in 0..s[0] {
                for ch in 0..c {
                    let x = t.values()[r * c + ch].to_f64();
                    sum[ch] += x;
                    sq[ch] += x * x;
                }
            }
            count += s[0];
        }
        let mean = &self.buffers["norm.running_mean"];
        let var = &self.buffers["norm.running_var"];
        let mut new_mean = Vec::with_capacity(c);
        let mut new_var = Vec::with_capacity(c);
        for ch in 0..c {
            let m = sum[ch] / count as f64;
            let v = (sq[ch] / count as f64 - m * m).max(0.0);
            new_mean.push(T::from_f64(
                (1.0 - STATS_MOMENTUM) * mean.values()[ch].to_f64() + STATS_MOMENTUM * m,
            ));
            new_var.push(T::from_f64(
                (1.0 - STATS_MOMENTUM) * var.values()[ch].to_f64() + STATS_MOMENTUM * v,
            ));
        }
        self.buffers
            .insert("norm.running_mean".into(), Tensor::new(vec![c], new_mean)?);
        self.buffers
            .insert("norm.running_var".into(), Tensor::new(vec![c], new_var)?);
        Ok(())
    }

    /// Descriptor matrix `[B,d]` for a batch, on a throwaway tape.
    pub fn embed(&self, images: &[FeatureField<T>]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g)?;
        let out = self.forward(&mut g, &bound, images)?;
        Ok(g.value(out.descriptors).clone())
    }
}

fn check_tensor_set<T: Scalar>(
    kind: &str,
    expected: &BTreeMap<String, Vec<usize>>,
    got: &BTreeMap<String, Tensor<T>>,
) -> Result<()> {
    for (name, shape) in expected {
        match got.get(name) {
            None => return Err(Error::Format(format!("missing {} {}", kind, name))),
            Some(t) if t.shape() != &shape[..] => {
                return Err(Error::Format(format!(
                    "{} {} has shape {:?}, model wants {:?}",
                    kind,
                    name,
                    t.shape(),
                    shape
                )))
            }
            _ => {}
        }
    }
    for name in got.keys() {
        if !expected.contains_key(name) {
            return Err(Error::Format(format!("unexpected {} {}", kind, name)));
        }
    }
    Ok(())
}

/// Tape-bound parameters plus the realized kernels and standardization
/// constants, valid for one graph.
pub struct BoundModel {
    pub vars: BTreeMap<String, Var>,
    realized: RealizedBackbone,
    neg_mean: Var,
    inv_std: Var,
}

pub struct ForwardOutput {
    pub descriptors: Var,
    pub logits: Var,
    /// Raw per-image patch nodes, pre-standardization; these feed the
    /// running statistics so the stats track the encoder itself rather
    /// than their own rescaled output.
    pub node_features: Vec<Var>,
}
