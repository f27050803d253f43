//! The brain module f_θ: spatial attention over sensors, subject-specific
//! linear layers, residual dilated convolution blocks, projection, temporal
//! aggregation, and MLP heads, with exact reverse-mode gradients.

pub mod net;
pub mod ops;

use std::path::Path;

use rand::RngExt;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datastore::tensor;
use crate::error::{MegError, Result};

pub use net::{spatial_attention_forward, BrainModule, ForwardTrace, Mode};
pub use ops::BatchTensor;

/// Hidden width of the Bahdanau-style temporal attention head.
pub const ATTENTION_HIDDEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    MeanPool,
    Affine,
    Attention,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadLayout {
    ClipOnly,
    ClipAndMse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BrainModuleConfig {
    #[serde(default = "default_c_in")]
    pub c_in: usize,
    #[serde(default = "default_c_att")]
    pub c_att: usize,
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(default = "default_n_blocks")]
    pub n_blocks: usize,
    #[serde(default = "default_f_proj")]
    pub f_proj: usize,
    #[serde(default = "default_t")]
    pub t: usize,
    #[serde(default = "default_fourier_k")]
    pub fourier_k: usize,
    #[serde(default = "default_n_subjects")]
    pub n_subjects: usize,
    #[serde(default = "default_aggregation")]
    pub aggregation: Aggregation,
    #[serde(default = "default_head_blocks")]
    pub head_blocks: usize,
    #[serde(default = "default_f_out")]
    pub f_out: usize,
    #[serde(default = "default_head_layout")]
    pub head_layout: HeadLayout,
    /// Output dim of the MSE head; defaults to `f_out`.
    #[serde(default)]
    pub f_out_mse: Option<usize>,
}

fn default_c_in() -> usize { 272 }
fn default_c_att() -> usize { 270 }
fn default_d() -> usize { 320 }
fn default_n_blocks() -> usize { 2 }
fn default_f_proj() -> usize { 2048 }
fn default_t() -> usize { 181 }
fn default_fourier_k() -> usize { 32 }
fn default_n_subjects() -> usize { 4 }
fn default_aggregation() -> Aggregation { Aggregation::Affine }
fn default_head_blocks() -> usize { 1 }
fn default_f_out() -> usize { 768 }
fn default_head_layout() -> HeadLayout { HeadLayout::ClipOnly }

impl Default for BrainModuleConfig {
    fn default() -> Self {
        BrainModuleConfig {
            c_in: default_c_in(),
            c_att: default_c_att(),
            d: default_d(),
            n_blocks: default_n_blocks(),
            f_proj: default_f_proj(),
            t: default_t(),
            fourier_k: default_fourier_k(),
            n_subjects: default_n_subjects(),
            aggregation: default_aggregation(),
            head_blocks: default_head_blocks(),
            f_out: default_f_out(),
            head_layout: default_head_layout(),
            f_out_mse: None,
        }
    }
}

impl BrainModuleConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("c_in", self.c_in),
            ("c_att", self.c_att),
            ("d", self.d),
            ("n_blocks", self.n_blocks),
            ("f_proj", self.f_proj),
            ("t", self.t),
            ("fourier_k", self.fourier_k),
            ("n_subjects", self.n_subjects),
            ("f_out", self.f_out),
        ] {
            if v == 0 {
                return Err(MegError::Invalid(format!("config field {name} must be positive")));
            }
        }
        if self.head_blocks == 0 {
            // identity head: the aggregated features are the output
            if self.f_out != self.f_proj {
                return Err(MegError::Invalid(
                    "head_blocks=0 requires f_out == f_proj".into(),
                ));
            }
            if self.f_out_mse.is_some_and(|f| f != self.f_proj) {
                return Err(MegError::Invalid(
                    "head_blocks=0 requires f_out_mse == f_proj".into(),
                ));
            }
        }
        Ok(())
    }

    /// Block input width: c_att for the first block, d afterwards.
    pub fn block_in(&self, k: usize) -> usize {
        if k == 0 {
            self.c_att
        } else {
            self.d
        }
    }

    /// Dilation schedule: conv1/conv2 of block k use 2^(2k mod 5) and
    /// 2^((2k+1) mod 5); the gated conv3 is undilated.
    pub fn dilations(&self, k: usize) -> (usize, usize) {
        (1usize << ((2 * k) % 5), 1usize << ((2 * k + 1) % 5))
    }

    pub fn mse_dim(&self) -> usize {
        self.f_out_mse.unwrap_or(self.f_out)
    }

    pub fn head_dims(&self) -> Vec<usize> {
        match self.head_layout {
            HeadLayout::ClipOnly => vec![self.f_out],
            HeadLayout::ClipAndMse => vec![self.f_out, self.mse_dim()],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BnParams {
    fn init(c: usize) -> Self {
        BnParams {
            gamma: vec![1.0; c],
            beta: vec![0.0; c],
            running_mean: vec![0.0; c],
            running_var: vec![1.0; c],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlockParams {
    pub conv1_w: Vec<f64>,
    pub conv1_b: Vec<f64>,
    pub bn1: BnParams,
    pub conv2_w: Vec<f64>,
    pub conv2_b: Vec<f64>,
    pub bn2: BnParams,
    pub conv3_w: Vec<f64>,
    pub conv3_b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AggParams {
    MeanPool,
    /// Weight per timestep plus one bias, both zero-initialized.
    Affine { w: Vec<f64>, b: Vec<f64> },
    /// Bahdanau scoring: score_t = v·tanh(W·y[:,t] + b).
    Attention { w: Vec<f64>, b: Vec<f64>, v: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    /// One (weights, bias) pair per head block; weights are out×in.
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BrainModuleParams {
    /// Per output channel: fourier_K² cosine then fourier_K² sine weights.
    pub attn_coef: Vec<f64>,
    pub post_w: Vec<f64>,
    pub post_b: Vec<f64>,
    /// n_subjects stacked c_att×c_att matrices, no bias.
    pub subject_w: Vec<f64>,
    pub blocks: Vec<ConvBlockParams>,
    pub proj1_w: Vec<f64>,
    pub proj1_b: Vec<f64>,
    pub proj2_w: Vec<f64>,
    pub proj2_b: Vec<f64>,
    pub agg: AggParams,
    pub heads: Vec<HeadParams>,
}

impl BrainModuleParams {
    /// All-zero parameters with the right shapes (BN buffers at identity).
    pub fn zeros(config: &BrainModuleConfig) -> Result<Self> {
        config.validate()?;
        let k2 = config.fourier_k * config.fourier_k;
        let blocks = (0..config.n_blocks)
            .map(|k| {
                let c_in = config.block_in(k);
                let d = config.d;
                ConvBlockParams {
                    conv1_w: vec![0.0; d * c_in * 3],
                    conv1_b: vec![0.0; d],
                    bn1: BnParams::init(d),
                    conv2_w: vec![0.0; d * d * 3],
                    conv2_b: vec![0.0; d],
                    bn2: BnParams::init(d),
                    conv3_w: vec![0.0; 2 * d * d * 3],
                    conv3_b: vec![0.0; 2 * d],
                }
            })
            .collect();
        let agg = match config.aggregation {
            Aggregation::MeanPool => AggParams::MeanPool,
            Aggregation::Affine => AggParams::Affine { w: vec![0.0; config.t], b: vec![0.0] },
            Aggregation::Attention => AggParams::Attention {
                w: vec![0.0; ATTENTION_HIDDEN * config.f_proj],
                b: vec![0.0; ATTENTION_HIDDEN],
                v: vec![0.0; ATTENTION_HIDDEN],
            },
        };
        let heads = config
            .head_dims()
            .into_iter()
            .map(|f_out| {
                let mut layers = Vec::with_capacity(config.head_blocks);
                for blk in 0..config.head_blocks {
                    let out = if blk + 1 == config.head_blocks { f_out } else { config.f_proj };
                    layers.push((vec![0.0; out * config.f_proj], vec![0.0; out]));
                }
                HeadParams { layers }
            })
            .collect();
        Ok(BrainModuleParams {
            attn_coef: vec![0.0; config.c_att * 2 * k2],
            post_w: vec![0.0; config.c_att * config.c_att],
            post_b: vec![0.0; config.c_att],
            subject_w: vec![0.0; config.n_subjects * config.c_att * config.c_att],
            blocks,
            proj1_w: vec![0.0; 2 * config.d * config.d],
            proj1_b: vec![0.0; 2 * config.d],
            proj2_w: vec![0.0; config.f_proj * 2 * config.d],
            proj2_b: vec![0.0; config.f_proj],
            agg,
            heads,
        })
    }

    /// Learnable tensors in a fixed order (running BN buffers excluded).
    pub fn learnable(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = vec![
            ("attn_coef".into(), &self.attn_coef),
            ("post_w".into(), &self.post_w),
            ("post_b".into(), &self.post_b),
            ("subject_w".into(), &self.subject_w),
        ];
        for (k, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{k}.conv1_w"), &b.conv1_w));
            out.push((format!("block{k}.conv1_b"), &b.conv1_b));
            out.push((format!("block{k}.bn1_gamma"), &b.bn1.gamma));
            out.push((format!("block{k}.bn1_beta"), &b.bn1.beta));
            out.push((format!("block{k}.conv2_w"), &b.conv2_w));
            out.push((format!("block{k}.conv2_b"), &b.conv2_b));
            out.push((format!("block{k}.bn2_gamma"), &b.bn2.gamma));
            out.push((format!("block{k}.bn2_beta"), &b.bn2.beta));
            out.push((format!("block{k}.conv3_w"), &b.conv3_w));
            out.push((format!("block{k}.conv3_b"), &b.conv3_b));
        }
        out.push(("proj1_w".into(), &self.proj1_w));
        out.push(("proj1_b".into(), &self.proj1_b));
        out.push(("proj2_w".into(), &self.proj2_w));
        out.push(("proj2_b".into(), &self.proj2_b));
        match &self.agg {
            AggParams::MeanPool => {}
            AggParams::Affine { w, b } => {
                out.push(("agg_w".into(), w));
                out.push(("agg_b".into(), b));
            }
            AggParams::Attention { w, b, v } => {
                out.push(("agg_w".into(), w));
                out.push(("agg_b".into(), b));
                out.push(("agg_v".into(), v));
            }
        }
        for (h, head) in self.heads.iter().enumerate() {
            for (l, (w, b)) in head.layers.iter().enumerate() {
                out.push((format!("head{h}.l{l}_w"), w));
                out.push((format!("head{h}.l{l}_b"), b));
            }
        }
        out
    }

    pub fn learnable_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        let mut out: Vec<(String, &mut Vec<f64>)> = vec![
            ("attn_coef".into(), &mut self.attn_coef),
            ("post_w".into(), &mut self.post_w),
            ("post_b".into(), &mut self.post_b),
            ("subject_w".into(), &mut self.subject_w),
        ];
        for (k, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("block{k}.conv1_w"), &mut b.conv1_w));
            out.push((format!("block{k}.conv1_b"), &mut b.conv1_b));
            out.push((format!("block{k}.bn1_gamma"), &mut b.bn1.gamma));
            out.push((format!("block{k}.bn1_beta"), &mut b.bn1.beta));
            out.push((format!("block{k}.conv2_w"), &mut b.conv2_w));
            out.push((format!("block{k}.conv2_b"), &mut b.conv2_b));
            out.push((format!("block{k}.bn2_gamma"), &mut b.bn2.gamma));
            out.push((format!("block{k}.bn2_beta"), &mut b.bn2.beta));
            out.push((format!("block{k}.conv3_w"), &mut b.conv3_w));
            out.push((format!("block{k}.conv3_b"), &mut b.conv3_b));
        }
        out.push(("proj1_w".into(), &mut self.proj1_w));
        out.push(("proj1_b".into(), &mut self.proj1_b));
        out.push(("proj2_w".into(), &mut self.proj2_w));
        out.push(("proj2_b".into(), &mut self.proj2_b));
        match &mut self.agg {
            AggParams::MeanPool => {}
            AggParams::Affine { w, b } => {
                out.push(("agg_w".into(), w));
                out.push(("agg_b".into(), b));
            }
            AggParams::Attention { w, b, v } => {
                out.push(("agg_w".into(), w));
                out.push(("agg_b".into(), b));
                out.push(("agg_v".into(), v));
            }
        }
        for (h, head) in self.heads.iter_mut().enumerate() {
            for (l, (w, b)) in head.layers.iter_mut().enumerate() {
                out.push((format!("head{h}.l{l}_w"), w));
                out.push((format!("head{h}.l{l}_b"), b));
            }
        }
        out
    }

    /// Running BN buffers, for checkpointing.
    pub fn buffers(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = Vec::new();
        for (k, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{k}.bn1_rmean"), &b.bn1.running_mean));
            out.push((format!("block{k}.bn1_rvar"), &b.bn1.running_var));
            out.push((format!("block{k}.bn2_rmean"), &b.bn2.running_mean));
            out.push((format!("block{k}.bn2_rvar"), &b.bn2.running_var));
        }
        out
    }

    fn buffers_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        let mut out: Vec<(String, &mut Vec<f64>)> = Vec::new();
        for (k, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("block{k}.bn1_rmean"), &mut b.bn1.running_mean));
            out.push((format!("block{k}.bn1_rvar"), &mut b.bn1.running_var));
            out.push((format!("block{k}.bn2_rmean"), &mut b.bn2.running_mean));
            out.push((format!("block{k}.bn2_rvar"), &mut b.bn2.running_var));
        }
        out
    }

    pub fn n_learnable(&self) -> usize {
        self.learnable().iter().map(|(_, s)| s.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.learnable().iter().all(|(_, s)| s.iter().all(|v| v.is_finite()))
    }
}

fn uniform_fill(rng: &mut ChaCha8Rng, slice: &mut [f64], fan_in: usize) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    for v in slice.iter_mut() {
        *v = rng.random_range(-bound..bound);
    }
}

/// Builds initialized parameters: uniform ±1/√fan_in everywhere except the
/// temporal-aggregation affine weights, which start at zero so the module's
/// output is initially insensitive to its input.
pub fn build(config: &BrainModuleConfig, seed: u64) -> Result<BrainModuleParams> {
    let mut p = BrainModuleParams::zeros(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k2 = config.fourier_k * config.fourier_k;
    uniform_fill(&mut rng, &mut p.attn_coef, 2 * k2);
    uniform_fill(&mut rng, &mut p.post_w, config.c_att);
    uniform_fill(&mut rng, &mut p.post_b, config.c_att);
    uniform_fill(&mut rng, &mut p.subject_w, config.c_att);
    for k in 0..config.n_blocks {
        let c_in = config.block_in(k);
        let b = &mut p.blocks[k];
        uniform_fill(&mut rng, &mut b.conv1_w, c_in * 3);
        uniform_fill(&mut rng, &mut b.conv1_b, c_in * 3);
        uniform_fill(&mut rng, &mut b.conv2_w, config.d * 3);
        uniform_fill(&mut rng, &mut b.conv2_b, config.d * 3);
        uniform_fill(&mut rng, &mut b.conv3_w, config.d * 3);
        uniform_fill(&mut rng, &mut b.conv3_b, config.d * 3);
    }
    uniform_fill(&mut rng, &mut p.proj1_w, config.d);
    uniform_fill(&mut rng, &mut p.proj1_b, config.d);
    uniform_fill(&mut rng, &mut p.proj2_w, 2 * config.d);
    uniform_fill(&mut rng, &mut p.proj2_b, 2 * config.d);
    match &mut p.agg {
        AggParams::MeanPool | AggParams::Affine { .. } => {}
        AggParams::Attention { w, b, v } => {
            uniform_fill(&mut rng, w, config.f_proj);
            uniform_fill(&mut rng, b, config.f_proj);
            uniform_fill(&mut rng, v, ATTENTION_HIDDEN);
        }
    }
    for head in p.heads.iter_mut() {
        for (w, b) in head.layers.iter_mut() {
            uniform_fill(&mut rng, w, config.f_proj);
            uniform_fill(&mut rng, b, config.f_proj);
        }
    }
    Ok(p)
}

/// Per-layer parameter counts in presentation order, plus the total.
pub fn count_params(params: &BrainModuleParams) -> (Vec<(String, usize)>, usize) {
    let mut rows: Vec<(String, usize)> = vec![
        ("spatial_attention".into(), params.attn_coef.len()),
        ("post_attention_linear".into(), params.post_w.len() + params.post_b.len()),
        ("subject_layers".into(), params.subject_w.len()),
    ];
    for (k, b) in params.blocks.iter().enumerate() {
        let count = b.conv1_w.len()
            + b.conv1_b.len()
            + b.bn1.gamma.len()
            + b.bn1.beta.len()
            + b.conv2_w.len()
            + b.conv2_b.len()
            + b.bn2.gamma.len()
            + b.bn2.beta.len()
            + b.conv3_w.len()
            + b.conv3_b.len();
        rows.push((format!("conv_block_{}", k + 1), count));
    }
    rows.push((
        "final_projection".into(),
        params.proj1_w.len() + params.proj1_b.len() + params.proj2_w.len() + params.proj2_b.len(),
    ));
    let agg_count = match &params.agg {
        AggParams::MeanPool => 0,
        AggParams::Affine { w, b } => w.len() + b.len(),
        AggParams::Attention { w, b, v } => w.len() + b.len() + v.len(),
    };
    rows.push(("temporal_aggregation".into(), agg_count));
    for (h, head) in params.heads.iter().enumerate() {
        let name = if h == 0 { "head_clip".to_string() } else { "head_mse".to_string() };
        let count = head.layers.iter().map(|(w, b)| w.len() + b.len()).sum();
        if count > 0 {
            rows.push((name, count));
        }
    }
    let total = rows.iter().map(|(_, c)| c).sum();
    (rows, total)
}

fn tensor_file_name(name: &str) -> String {
    format!("{}.megt", name.replace('.', "_"))
}

/// Writes a checkpoint directory: config.json plus one tensor file per
/// parameter and BN buffer.
pub fn save_checkpoint(dir: &Path, config: &BrainModuleConfig, params: &BrainModuleParams) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(config)
        .map_err(|e| MegError::Runtime(format!("config serialization: {e}")))?;
    std::fs::write(dir.join("config.json"), json)?;
    for (name, slice) in params.learnable().into_iter().chain(params.buffers()) {
        tensor::write_tensor_f64(&dir.join(tensor_file_name(&name)), &[slice.len()], slice)?;
    }
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(BrainModuleConfig, BrainModuleParams)> {
    let text = std::fs::read_to_string(dir.join("config.json"))?;
    let config: BrainModuleConfig = serde_json::from_str(&text)
        .map_err(|e| MegError::Format(format!("config.json: {e}")))?;
    let mut params = BrainModuleParams::zeros(&config)?;
    for (name, slot) in params.learnable_mut() {
        let (shape, data) = tensor::read_tensor_f64(&dir.join(tensor_file_name(&name)))?;
        if shape != [slot.len()] {
            return Err(MegError::Shape(format!(
                "checkpoint tensor {name} has shape {shape:?}, expected [{}]",
                slot.len()
            )));
        }
        *slot = data;
    }
    for (name, slot) in params.buffers_mut() {
        let (shape, data) = tensor::read_tensor_f64(&dir.join(tensor_file_name(&name)))?;
        if shape != [slot.len()] {
            return Err(MegError::Shape(format!(
                "checkpoint tensor {name} has shape {shape:?}, expected [{}]",
                slot.len()
            )));
        }
        *slot = data;
    }
    Ok((config, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_reproduces_published_counts() {
        let config = BrainModuleConfig::default();
        let params = BrainModuleParams::zeros(&config).unwrap();
        let (rows, total) = count_params(&params);
        let by_name: std::collections::HashMap<&str, usize> =
            rows.iter().map(|(n, c)| (n.as_str(), *c)).collect();
        assert_eq!(by_name["spatial_attention"], 552_960);
        assert_eq!(by_name["post_attention_linear"], 73_170);
        assert_eq!(by_name["subject_layers"], 291_600);
        assert_eq!(by_name["conv_block_1"], 1_183_360);
        assert_eq!(by_name["conv_block_2"], 1_231_360);
        assert_eq!(by_name["final_projection"], 1_518_208);
        assert_eq!(by_name["temporal_aggregation"], 182);
        assert_eq!(by_name["head_clip"], 1_573_632);
        assert_eq!(total, 6_424_472);
    }

    #[test]
    fn mean_pool_has_no_aggregation_params() {
        let config = BrainModuleConfig {
            aggregation: Aggregation::MeanPool,
            ..BrainModuleConfig::default()
        };
        let params = BrainModuleParams::zeros(&config).unwrap();
        let (rows, total) = count_params(&params);
        let agg = rows.iter().find(|(n, _)| n == "temporal_aggregation").unwrap();
        assert_eq!(agg.1, 0);
        assert_eq!(total, 6_424_472 - 182);
    }

    #[test]
    fn count_ignores_parameter_values() {
        let config = BrainModuleConfig::default();
        let zeroed = BrainModuleParams::zeros(&config).unwrap();
        let built = build(&config, 3).unwrap();
        assert_eq!(count_params(&zeroed), count_params(&built));
    }

    #[test]
    fn affine_aggregation_initialized_to_zero() {
        let config = BrainModuleConfig::default();
        let params = build(&config, 0).unwrap();
        match &params.agg {
            AggParams::Affine { w, b } => {
                assert!(w.iter().all(|&v| v == 0.0));
                assert!(b.iter().all(|&v| v == 0.0));
            }
            other => panic!("expected affine aggregation, got {other:?}"),
        }
    }

    #[test]
    fn build_is_seed_deterministic_and_bounded() {
        let config = BrainModuleConfig {
            c_in: 6,
            c_att: 4,
            d: 8,
            f_proj: 16,
            t: 12,
            fourier_k: 2,
            n_subjects: 2,
            f_out: 4,
            ..BrainModuleConfig::default()
        };
        let a = build(&config, 9).unwrap();
        let b = build(&config, 9).unwrap();
        assert_eq!(a, b);
        let c = build(&config, 10).unwrap();
        assert_ne!(a, c);
        assert!(a.all_finite());
        // fan-in bound for the post-attention linear is 1/sqrt(c_att)
        let bound = 1.0 / (config.c_att as f64).sqrt();
        assert!(a.post_w.iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn learnable_views_agree() {
        let config = BrainModuleConfig {
            head_layout: HeadLayout::ClipAndMse,
            aggregation: Aggregation::Attention,
            ..BrainModuleConfig::default()
        };
        let mut params = BrainModuleParams::zeros(&config).unwrap();
        let names: Vec<String> = params.learnable().into_iter().map(|(n, _)| n).collect();
        let names_mut: Vec<String> = params.learnable_mut().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, names_mut);
        assert!(names.contains(&"head1.l0_w".to_string()));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let config = BrainModuleConfig {
            c_in: 6,
            c_att: 4,
            d: 8,
            f_proj: 16,
            t: 12,
            fourier_k: 2,
            n_subjects: 2,
            f_out: 4,
            ..BrainModuleConfig::default()
        };
        let mut params = build(&config, 5).unwrap();
        // perturb a BN buffer so the buffer path is exercised
        params.blocks[0].bn1.running_mean[2] = 0.625;
        save_checkpoint(dir.path(), &config, &params).unwrap();
        let (config2, params2) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(config2, config);
        // storage is f32; at these magnitudes the round trip is near-exact
        for ((_, a), (_, b)) in params.learnable().iter().zip(params2.learnable().iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() < 1e-6);
            }
        }
        assert_eq!(params2.blocks[0].bn1.running_mean[2], 0.625);
    }

    #[test]
    fn head_blocks_zero_requires_matching_dims() {
        let bad = BrainModuleConfig {
            head_blocks: 0,
            f_out: 64,
            f_proj: 128,
            ..BrainModuleConfig::default()
        };
        assert!(bad.validate().is_err());
        let ok = BrainModuleConfig {
            head_blocks: 0,
            f_out: 128,
            f_proj: 128,
            ..BrainModuleConfig::default()
        };
        ok.validate().unwrap();
        let params = BrainModuleParams::zeros(&ok).unwrap();
        let (rows, _) = count_params(&params);
        assert!(!rows.iter().any(|(n, _)| n.starts_with("head")));
    }
}
