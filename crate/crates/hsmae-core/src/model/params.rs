//! Parameter containers and the canonical parameter order.
//!
//! Everything learnable lives in [`ModelParams`]; gradients and optimizer
//! moments reuse the same type so they share one traversal. The visit
//! order defines the canonical parameter order used by checkpoints and
//! seeded initialization — changing it invalidates saved checkpoints.

use crate::linalg::Mat;
use crate::rng::Stream;
use crate::Scalar;

use super::ModelConfig;

/// A dense layer `y = x Wᵀ + b`, with `w` stored out×in and `b` 1×out.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearP<T> {
    pub w: Mat<T>,
    pub b: Mat<T>,
}

impl<T: Scalar> LinearP<T> {
    fn zeros(out_dim: usize, in_dim: usize) -> Self {
        LinearP {
            w: Mat::zeros(out_dim, in_dim),
            b: Mat::zeros(1, out_dim),
        }
    }
}

/// Layer-normalization gain and bias, each 1×dim.
#[derive(Debug, Clone, PartialEq)]
pub struct NormP<T> {
    pub g: Mat<T>,
    pub b: Mat<T>,
}

impl<T: Scalar> NormP<T> {
    fn zeros(dim: usize) -> Self {
        NormP {
            g: Mat::zeros(1, dim),
            b: Mat::zeros(1, dim),
        }
    }
}

/// One pre-norm transformer block: attention (combined QKV projection
/// plus output projection) and a two-layer GELU MLP, each behind its own
/// normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockP<T> {
    pub ln1: NormP<T>,
    pub qkv: LinearP<T>,
    pub out: LinearP<T>,
    pub ln2: NormP<T>,
    pub fc1: LinearP<T>,
    pub fc2: LinearP<T>,
}

impl<T: Scalar> BlockP<T> {
    fn zeros(dim: usize, mlp_ratio: usize) -> Self {
        BlockP {
            ln1: NormP::zeros(dim),
            qkv: LinearP::zeros(3 * dim, dim),
            out: LinearP::zeros(dim, dim),
            ln2: NormP::zeros(dim),
            fc1: LinearP::zeros(mlp_ratio * dim, dim),
            fc2: LinearP::zeros(dim, mlp_ratio * dim),
        }
    }
}

/// All model parameters. Doubles as the gradient and moment container.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    /// token_len → enc_dim.
    pub token_proj: LinearP<T>,
    pub enc: Vec<BlockP<T>>,
    /// enc_dim → dec_dim.
    pub enc_to_dec: LinearP<T>,
    /// The learned stand-in fed to the decoder at masked positions, 1×dec_dim.
    pub mask_token: Mat<T>,
    pub dec: Vec<BlockP<T>>,
    pub final_norm: NormP<T>,
    /// dec_dim → token_len.
    pub head: LinearP<T>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        ModelParams {
            token_proj: LinearP::zeros(cfg.enc_dim, cfg.token_len()),
            enc: (0..cfg.enc_blocks)
                .map(|_| BlockP::zeros(cfg.enc_dim, cfg.mlp_ratio))
                .collect(),
            enc_to_dec: LinearP::zeros(cfg.dec_dim, cfg.enc_dim),
            mask_token: Mat::zeros(1, cfg.dec_dim),
            dec: (0..cfg.dec_blocks)
                .map(|_| BlockP::zeros(cfg.dec_dim, cfg.mlp_ratio))
                .collect(),
            final_norm: NormP::zeros(cfg.dec_dim),
            head: LinearP::zeros(cfg.token_len(), cfg.dec_dim),
        }
    }

    /// Named tensors in canonical order.
    pub fn visit(&self) -> Vec<(String, &Mat<T>)> {
        let mut out = Vec::new();
        out.push(("token_proj.w".to_string(), &self.token_proj.w));
        out.push(("token_proj.b".to_string(), &self.token_proj.b));
        for (i, b) in self.enc.iter().enumerate() {
            push_block(&mut out, &format!("enc.{i}"), b);
        }
        out.push(("enc_to_dec.w".to_string(), &self.enc_to_dec.w));
        out.push(("enc_to_dec.b".to_string(), &self.enc_to_dec.b));
        out.push(("mask_token".to_string(), &self.mask_token));
        for (i, b) in self.dec.iter().enumerate() {
            push_block(&mut out, &format!("dec.{i}"), b);
        }
        out.push(("final_norm.g".to_string(), &self.final_norm.g));
        out.push(("final_norm.b".to_string(), &self.final_norm.b));
        out.push(("head.w".to_string(), &self.head.w));
        out.push(("head.b".to_string(), &self.head.b));
        out
    }

    /// Named tensors in canonical order, mutably.
    pub fn visit_mut(&mut self) -> Vec<(String, &mut Mat<T>)> {
        let mut out: Vec<(String, &mut Mat<T>)> = Vec::new();
        out.push(("token_proj.w".to_string(), &mut self.token_proj.w));
        out.push(("token_proj.b".to_string(), &mut self.token_proj.b));
        for (i, b) in self.enc.iter_mut().enumerate() {
            push_block_mut(&mut out, &format!("enc.{i}"), b);
        }
        out.push(("enc_to_dec.w".to_string(), &mut self.enc_to_dec.w));
        out.push(("enc_to_dec.b".to_string(), &mut self.enc_to_dec.b));
        out.push(("mask_token".to_string(), &mut self.mask_token));
        for (i, b) in self.dec.iter_mut().enumerate() {
            push_block_mut(&mut out, &format!("dec.{i}"), b);
        }
        out.push(("final_norm.g".to_string(), &mut self.final_norm.g));
        out.push(("final_norm.b".to_string(), &mut self.final_norm.b));
        out.push(("head.w".to_string(), &mut self.head.w));
        out.push(("head.b".to_string(), &mut self.head.b));
        out
    }

    /// Total scalar parameter count.
    pub fn n_scalars(&self) -> usize {
        self.visit().iter().map(|(_, m)| m.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.visit().iter().all(|(_, m)| m.all_finite())
    }

    /// Name of the first non-finite tensor, if any.
    pub fn first_non_finite(&self) -> Option<String> {
        self.visit()
            .into_iter()
            .find(|(_, m)| !m.all_finite())
            .map(|(name, _)| name)
    }

    pub fn convert<U: Scalar>(&self) -> ModelParams<U> {
        let conv_mat = |m: &Mat<T>| {
            Mat::from_vec(
                m.rows(),
                m.cols(),
                m.iter().map(|&v| U::cast(v.to_f64())).collect(),
            )
        };
        let conv_lin = |l: &LinearP<T>| LinearP {
            w: conv_mat(&l.w),
            b: conv_mat(&l.b),
        };
        let conv_norm = |n: &NormP<T>| NormP {
            g: conv_mat(&n.g),
            b: conv_mat(&n.b),
        };
        let conv_block = |b: &BlockP<T>| BlockP {
            ln1: conv_norm(&b.ln1),
            qkv: conv_lin(&b.qkv),
            out: conv_lin(&b.out),
            ln2: conv_norm(&b.ln2),
            fc1: conv_lin(&b.fc1),
            fc2: conv_lin(&b.fc2),
        };
        ModelParams {
            token_proj: conv_lin(&self.token_proj),
            enc: self.enc.iter().map(conv_block).collect(),
            enc_to_dec: conv_lin(&self.enc_to_dec),
            mask_token: conv_mat(&self.mask_token),
            dec: self.dec.iter().map(conv_block).collect(),
            final_norm: conv_norm(&self.final_norm),
            head: conv_lin(&self.head),
        }
    }
}

fn push_block<'a, T>(out: &mut Vec<(String, &'a Mat<T>)>, prefix: &str, b: &'a BlockP<T>) {
    out.push((format!("{prefix}.ln1.g"), &b.ln1.g));
    out.push((format!("{prefix}.ln1.b"), &b.ln1.b));
    out.push((format!("{prefix}.qkv.w"), &b.qkv.w));
    out.push((format!("{prefix}.qkv.b"), &b.qkv.b));
    out.push((format!("{prefix}.out.w"), &b.out.w));
    out.push((format!("{prefix}.out.b"), &b.out.b));
    out.push((format!("{prefix}.ln2.g"), &b.ln2.g));
    out.push((format!("{prefix}.ln2.b"), &b.ln2.b));
    out.push((format!("{prefix}.fc1.w"), &b.fc1.w));
    out.push((format!("{prefix}.fc1.b"), &b.fc1.b));
    out.push((format!("{prefix}.fc2.w"), &b.fc2.w));
    out.push((format!("{prefix}.fc2.b"), &b.fc2.b));
}

fn push_block_mut<'a, T>(
    out: &mut Vec<(String, &'a mut Mat<T>)>,
    prefix: &str,
    b: &'a mut BlockP<T>,
) {
    out.push((format!("{prefix}.ln1.g"), &mut b.ln1.g));
    out.push((format!("{prefix}.ln1.b"), &mut b.ln1.b));
    out.push((format!("{prefix}.qkv.w"), &mut b.qkv.w));
    out.push((format!("{prefix}.qkv.b"), &mut b.qkv.b));
    out.push((format!("{prefix}.out.w"), &mut b.out.w));
    out.push((format!("{prefix}.out.b"), &mut b.out.b));
    out.push((format!("{prefix}.ln2.g"), &mut b.ln2.g));
    out.push((format!("{prefix}.ln2.b"), &mut b.ln2.b));
    out.push((format!("{prefix}.fc1.w"), &mut b.fc1.w));
    out.push((format!("{prefix}.fc1.b"), &mut b.fc1.b));
    out.push((format!("{prefix}.fc2.w"), &mut b.fc2.w));
    out.push((format!("{prefix}.fc2.b"), &mut b.fc2.b));
}

/// Weight initialization: Xavier-uniform for weight matrices (limit
/// sqrt(6/(fan_in+fan_out)), the scheme the reference masked-autoencoder
/// uses for its linear layers), except that the matrices writing into the
/// residual stream (attention output projections and second MLP layers)
/// start at zero so every block begins as the identity — the projection
/// chain trains at full speed from step one and the blocks fade in as
/// their gradients arrive. Mask token is truncated normal (std 0.02,
/// clipped at two standard deviations), normalization gains one,
/// everything else zero. Deterministic in the seed; tensors are filled
/// in canonical order.
pub fn init_params<T: Scalar>(cfg: &ModelConfig, seed: u64) -> ModelParams<T> {
    let mut params = ModelParams::zeros(cfg);
    let mut rng = Stream::seed(seed);
    for (name, mat) in params.visit_mut() {
        if name.ends_with(".out.w") || name.ends_with(".fc2.w") {
            // residual writes start silent
        } else if name.ends_with(".w") {
            let (fan_out, fan_in) = mat.shape();
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in mat.as_mut_slice() {
                *v = T::cast(rng.uniform_in(-limit, limit));
            }
        } else if name == "mask_token" {
            for v in mat.as_mut_slice() {
                *v = T::cast(rng.truncated_normal(0.02, 2.0));
            }
        } else if name.ends_with(".g") {
            mat.fill(T::one());
        }
        // biases stay zero
    }
    params
}
