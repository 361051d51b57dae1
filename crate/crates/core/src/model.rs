//! Full model: backbone, pose graph and classifier, with seeded init and
//! a flat list of named parameters for serialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{ViTConfig, Vit, VitParams, INIT_STD};
use crate::error::{Error, Result};
use crate::hoi_head::{Classifier, DEFAULT_NUM_VERBS};
use crate::numerics::{Linear, MlpSpec, Tensor};
use crate::pose_graph::{GraphConfig, GraphParams, LayerNormParams, Mbf};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vit: ViTConfig,
    pub graph: GraphConfig,
    pub num_verbs: usize,
}

impl ModelConfig {
    /// Small enough for tests and the bundled fixtures.
    pub fn tiny() -> Self {
        Self {
            vit: ViTConfig {
                patch_size: 16,
                image_size: 64,
                embed_dim: 32,
                num_heads: 2,
                num_layers: 2,
                mlp_ratio: 2,
            },
            graph: GraphConfig {
                node_dim: 16,
                edge_dim: 16,
                attn_dim: 8,
                mbf_branches: 4,
                steps: 2,
            },
            num_verbs: 8,
        }
    }

    /// ViT-B/16 at 672 px with the paper-scale head.
    pub fn base() -> Self {
        Self {
            vit: ViTConfig {
                patch_size: 16,
                image_size: 672,
                embed_dim: 768,
                num_heads: 12,
                num_layers: 12,
                mlp_ratio: 4,
            },
            graph: GraphConfig {
                node_dim: 256,
                edge_dim: 256,
                attn_dim: 64,
                mbf_branches: 4,
                steps: 2,
            },
            num_verbs: DEFAULT_NUM_VERBS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        let g = &self.graph;
        if g.node_dim == 0 || g.edge_dim == 0 || g.attn_dim == 0 || g.mbf_branches == 0 {
            return Err(Error::Config("graph widths must be positive".into()));
        }
        if !g.node_dim.is_multiple_of(g.mbf_branches) {
            return Err(Error::Config(format!(
                "node width {} not divisible by {} branches",
                g.node_dim, g.mbf_branches
            )));
        }
        if self.num_verbs == 0 {
            return Err(Error::Config("verb vocabulary is empty".into()));
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::tiny()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    pub vit: Vit<T>,
    pub graph: GraphParams<T>,
    pub classifier: Classifier<T>,
}

fn linear<'a, T>(out: &mut Vec<(String, &'a mut Tensor<T>)>, name: &str, l: &'a mut Linear<T>) {
    out.push((format!("{name}.weight"), &mut l.weight));
    out.push((format!("{name}.bias"), &mut l.bias));
}

fn mlp<'a, T: Scalar>(out: &mut Vec<(String, &'a mut Tensor<T>)>, name: &str, m: &'a mut MlpSpec<T>) {
    for (i, l) in m.layers_mut().iter_mut().enumerate() {
        linear(out, &format!("{name}.{i}"), l);
    }
}

fn mbf<'a, T>(out: &mut Vec<(String, &'a mut Tensor<T>)>, name: &str, m: &'a mut Mbf<T>) {
    for (i, b) in m.branches.iter_mut().enumerate() {
        linear(out, &format!("{name}.branch{i}.appearance"), &mut b.appearance);
        linear(out, &format!("{name}.branch{i}.edge"), &mut b.edge);
    }
    linear(out, &format!("{name}.output"), &mut m.output);
}

fn norm<'a, T>(out: &mut Vec<(String, &'a mut Tensor<T>)>, name: &str, n: &'a mut LayerNormParams<T>) {
    out.push((format!("{name}.gain"), &mut n.gain));
    out.push((format!("{name}.shift"), &mut n.shift));
}

impl<T: Scalar> Model<T> {
    /// Weights `N(0, 0.02²)`, biases and shifts zero, norm gains one.
    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = VitParams::random(&config.vit, &mut rng);
        let vit = Vit::new(config.vit, params)?;
        let graph = GraphParams::random(config.vit.embed_dim, &config.graph, INIT_STD, &mut rng);
        let g = &config.graph;
        let classifier = Classifier::random(
            g.node_dim,
            g.edge_dim,
            g.mbf_branches,
            g.branch_dim(),
            config.num_verbs,
            INIT_STD,
            &mut rng,
        );
        Ok(Self {
            config,
            vit,
            graph,
            classifier,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Every parameter tensor with its stable name, in file order.
    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        let v = self.vit.params_mut();
        linear(&mut out, "vit.patch_proj", &mut v.patch_proj);
        out.push(("vit.cls_token".into(), &mut v.cls_token));
        out.push(("vit.pos_embed".into(), &mut v.pos_embed));
        for (i, l) in v.layers.iter_mut().enumerate() {
            let n = format!("vit.layer{i}");
            out.push((format!("{n}.ln1.gain"), &mut l.ln1_gain));
            out.push((format!("{n}.ln1.shift"), &mut l.ln1_shift));
            linear(&mut out, &format!("{n}.qkv"), &mut l.qkv);
            linear(&mut out, &format!("{n}.proj"), &mut l.proj);
            out.push((format!("{n}.ln2.gain"), &mut l.ln2_gain));
            out.push((format!("{n}.ln2.shift"), &mut l.ln2_shift));
            linear(&mut out, &format!("{n}.fc1"), &mut l.fc1);
            linear(&mut out, &format!("{n}.fc2"), &mut l.fc2);
        }
        let g = &mut self.graph;
        mlp(&mut out, "graph.node_encoder", &mut g.node_encoder);
        mlp(&mut out, "graph.edge_encoder", &mut g.edge_encoder);
        mlp(&mut out, "graph.query", &mut g.query_mlp);
        mlp(&mut out, "graph.key", &mut g.key_mlp);
        mlp(&mut out, "graph.local_projector", &mut g.local_projector);
        mbf(&mut out, "graph.object_to_human", &mut g.object_to_human);
        mbf(&mut out, "graph.human_to_object", &mut g.human_to_object);
        norm(&mut out, "graph.human_norm", &mut g.human_norm);
        norm(&mut out, "graph.object_norm", &mut g.object_norm);
        mbf(&mut out, "classifier.fusion", &mut self.classifier.fusion);
        linear(&mut out, "classifier.head", &mut self.classifier.head);
        out
    }

    /// Names and shapes of all parameters, in file order.
    pub fn declarations(&self) -> Vec<(String, Vec<usize>)> {
        self.clone()
            .named_params_mut()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.declarations()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> Result<Model<U>> {
        let mut out = Model::<U>::random(self.config, 0)?;
        let mut src = self.clone();
        for ((_, dst), (_, s)) in out.named_params_mut().into_iter().zip(src.named_params_mut()) {
            *dst = s.cast();
        }
        Ok(out)
    }
}
