//! Closed-form size and forward-cost estimates for an [`ArchConfig`].
//!
//! Both formulas mirror the layout built by [`crate::nn::EncoderModel`]:
//! learned token and position embeddings (no token-type table), biased
//! Q/K/V/O and feed-forward projections, two layer norms per block, a tanh
//! pooler over the first token, and a linear classifier.
//!
//! FLOPs count only matrix products, at two operations per multiply-accumulate.
//! Bias adds, softmax, layer norm, activations and embedding lookups are not
//! counted.

use serde::{Deserialize, Serialize};

use crate::archspace::ArchConfig;
use crate::error::{Error, Result};

pub const DEFAULT_BYTES_PER_PARAM: u64 = 4;
const MIB: f64 = (1u64 << 20) as f64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeEstimate {
    pub param_count: u64,
    pub bytes: u64,
    pub megabytes: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopsEstimate {
    pub flops: u64,
    pub gflops: f64,
    pub seq_len: usize,
}

/// Exact number of scalar weights in the encoder classifier.
pub fn param_count(config: &ArchConfig) -> u64 {
    let v = config.vocab as u64;
    let h = config.hidden as u64;
    let d = config.ffn as u64;
    let s = config.max_seq_len as u64;
    let c = config.num_classes as u64;
    let l = config.layers as u64;

    let embeddings = v * h + s * h + 2 * h;
    let attention = 4 * (h * h + h);
    let feed_forward = (h * d + d) + (d * h + h);
    let norms = 2 * (2 * h);
    let per_layer = attention + feed_forward + norms;
    let head = (h * h + h) + (h * c + c);

    embeddings + l * per_layer + head
}

/// [`param_count`] without overflow panics, for configs read from untrusted input.
pub fn checked_param_count(config: &ArchConfig) -> Option<u64> {
    let v = config.vocab as u64;
    let h = config.hidden as u64;
    let d = config.ffn as u64;
    let s = config.max_seq_len as u64;
    let c = config.num_classes as u64;
    let l = config.layers as u64;
    let hh = h.checked_mul(h)?;
    let hd = h.checked_mul(d)?;
    let embeddings = v.checked_mul(h)?.checked_add(s.checked_mul(h)?)?.checked_add(h.checked_mul(2)?)?;
    let per_layer = hh
        .checked_add(h)?
        .checked_mul(4)?
        .checked_add(hd.checked_mul(2)?)?
        .checked_add(d)?
        .checked_add(h.checked_mul(5)?)?;
    let head = hh.checked_add(h)?.checked_add(h.checked_mul(c)?)?.checked_add(c)?;
    embeddings.checked_add(l.checked_mul(per_layer)?)?.checked_add(head)
}

/// Stored size at `bytes_per_param` bytes per weight; megabytes use a 2^20 divisor.
pub fn model_size(config: &ArchConfig, bytes_per_param: u64) -> Result<SizeEstimate> {
    if !matches!(bytes_per_param, 1 | 2 | 4 | 8) {
        return Err(Error::InvalidArgument(format!(
            "bytes_per_param must be 1, 2, 4 or 8, got {bytes_per_param}"
        )));
    }
    let param_count = param_count(config);
    let bytes = param_count * bytes_per_param;
    Ok(SizeEstimate {
        param_count,
        bytes,
        megabytes: bytes as f64 / MIB,
    })
}

/// [`model_size`] at fp32.
pub fn model_size_fp32(config: &ArchConfig) -> SizeEstimate {
    model_size(config, DEFAULT_BYTES_PER_PARAM).expect("4 bytes per param is always accepted")
}

/// Matrix-product FLOPs of one forward pass over `seq_len` tokens.
pub fn forward_flops(config: &ArchConfig, seq_len: usize) -> Result<FlopsEstimate> {
    if seq_len == 0 || seq_len > config.max_seq_len {
        return Err(Error::SequenceLength {
            len: seq_len,
            max: config.max_seq_len,
        });
    }
    let n = seq_len as u64;
    let h = config.hidden as u64;
    let d = config.ffn as u64;
    let c = config.num_classes as u64;

    let projections = 2 * n * (4 * h * h);
    let scores = 2 * n * n * h;
    let context = 2 * n * n * h;
    let feed_forward = 2 * n * (h * d + d * h);
    let per_layer = projections + scores + context + feed_forward;
    // pooler and classifier only see the first token
    let head = 2 * h * h + 2 * h * c;

    let flops = config.layers as u64 * per_layer + head;
    Ok(FlopsEstimate {
        flops,
        gflops: flops as f64 / 1e9,
        seq_len,
    })
}
