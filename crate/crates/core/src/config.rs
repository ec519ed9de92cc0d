//! Serving configuration and hardware profile.
//!
//! [`ServeConfig`] is the single source of truth for every budget the
//! engine enforces: the packed-batch query-token cap, the materialized-logit
//! cap, the denoising schedule shape, sparsity retention, and model
//! dimensions used by the analytic memory model.

use thiserror::Error;

/// Errors raised when validating a [`ServeConfig`].
#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("{0} must be at least 1")]
    ZeroField(&'static str),
    #[error("retention_ratio must be in (0, 1], got {0}")]
    RetentionOutOfRange(f64),
    #[error("pool_kernel must be odd and >= 1, got {0}")]
    BadPoolKernel(usize),
    #[error("gen_length {gen_length} is not a multiple of block_size {block_size}")]
    GenLengthNotBlockMultiple { gen_length: u32, block_size: u32 },
    #[error("num_steps * block_size = {product} is not divisible by gen_length {gen_length}")]
    StepsNotDivisible { product: u64, gen_length: u32 },
    #[error("hbm_bytes {hbm} must exceed weights_bytes {weights}")]
    WeightsExceedHbm { hbm: u64, weights: u64 },
    #[error("{0} must be positive")]
    NonPositiveRate(&'static str),
    #[error("guard_band_fraction must be non-negative and finite, got {0}")]
    BadGuardBand(f64),
}

/// Device memory envelope and abstract machine rates for the cost model.
///
/// The rates are synthetic knobs, not measurements of any physical device;
/// they only fix the relative weight of compute-bound and bandwidth-bound
/// work in simulated time.
#[derive(Debug, Clone, PartialEq)]
pub struct HardwareProfile {
    /// Total device memory in bytes.
    pub hbm_bytes: u64,
    /// Bytes held by resident model weights.
    pub weights_bytes: u64,
    /// Abstract FLOP/s applied to compute-bound work.
    pub compute_rate: f64,
    /// Abstract bytes/s applied to cache reads.
    pub mem_bandwidth: f64,
    /// Fraction added on top of the profiled activation peak.
    pub guard_band_fraction: f64,
}

const GIB: u64 = 1024 * 1024 * 1024;

impl HardwareProfile {
    /// 24 GiB consumer-class card holding an 8B-parameter model in fp16.
    pub fn consumer_24g() -> Self {
        Self {
            hbm_bytes: 24 * GIB,
            weights_bytes: 17 * GIB,
            compute_rate: 5e13,
            mem_bandwidth: 1e12,
            guard_band_fraction: 0.05,
        }
    }

    /// 48 GiB server-class card, same resident weights: more compute and
    /// memory headroom, slightly lower bandwidth.
    pub fn server_48g() -> Self {
        Self {
            hbm_bytes: 48 * GIB,
            weights_bytes: 17 * GIB,
            compute_rate: 9e13,
            mem_bandwidth: 9e11,
            guard_band_fraction: 0.05,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.hbm_bytes <= self.weights_bytes {
            return Err(ConfigError::WeightsExceedHbm {
                hbm: self.hbm_bytes,
                weights: self.weights_bytes,
            });
        }
        if self.compute_rate.is_nan() || self.compute_rate <= 0.0 {
            return Err(ConfigError::NonPositiveRate("compute_rate"));
        }
        if self.mem_bandwidth.is_nan() || self.mem_bandwidth <= 0.0 {
            return Err(ConfigError::NonPositiveRate("mem_bandwidth"));
        }
        if !self.guard_band_fraction.is_finite() || self.guard_band_fraction < 0.0 {
            return Err(ConfigError::BadGuardBand(self.guard_band_fraction));
        }
        Ok(())
    }
}

/// All engine tunables plus the hardware profile.
#[derive(Debug, Clone, PartialEq)]
pub struct ServeConfig {
    /// Cap on total query tokens in one packed step batch.
    pub max_num_batched_tokens: u64,
    /// Cap on simultaneously materialized logit tokens.
    pub max_num_logits: u64,
    /// Generated tokens per full-length request.
    pub gen_length: u32,
    /// Denoising steps for a full-length request.
    pub num_steps: u32,
    /// Tokens per semi-autoregressive block.
    pub block_size: u32,
    /// Steps between forced refreshes within a block; `None` refreshes only
    /// at block boundaries.
    pub refresh_interval: Option<u32>,
    /// Fraction of context tokens retained per head, in (0, 1].
    pub retention_ratio: f64,
    /// Local pooling window for importance scoring (odd).
    pub pool_kernel: usize,
    /// Vocabulary size.
    pub vocab_size: u64,
    pub num_heads: u64,
    pub head_dim: u64,
    pub hidden_dim: u64,
    pub num_layers: u64,
    /// Element width of KV/logit storage in bytes.
    pub bytes_per_element: u64,
    /// Workspace bytes per batched query token, in units of
    /// `hidden_dim * bytes_per_element` (attention/MLP scratch proxy).
    pub workspace_scale: u64,
    pub hw: HardwareProfile,
}

impl Default for ServeConfig {
    /// Consumer-card defaults: 4,000 batched tokens, 2,048 materialized
    /// logits, 256 tokens over 256 steps in blocks of 32, retention 0.5.
    fn default() -> Self {
        Self {
            max_num_batched_tokens: 4000,
            max_num_logits: 2048,
            gen_length: 256,
            num_steps: 256,
            block_size: 32,
            refresh_interval: None,
            retention_ratio: 0.5,
            pool_kernel: 3,
            vocab_size: 126_464,
            num_heads: 32,
            head_dim: 128,
            hidden_dim: 4096,
            num_layers: 32,
            bytes_per_element: 2,
            workspace_scale: 8,
            hw: HardwareProfile::consumer_24g(),
        }
    }
}

impl ServeConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.max_num_batched_tokens == 0 {
            return Err(ConfigError::ZeroField("max_num_batched_tokens"));
        }
        if self.max_num_logits == 0 {
            return Err(ConfigError::ZeroField("max_num_logits"));
        }
        if self.block_size == 0 {
            return Err(ConfigError::ZeroField("block_size"));
        }
        if self.gen_length == 0 {
            return Err(ConfigError::ZeroField("gen_length"));
        }
        if self.num_steps == 0 {
            return Err(ConfigError::ZeroField("num_steps"));
        }
        if self.refresh_interval == Some(0) {
            return Err(ConfigError::ZeroField("refresh_interval"));
        }
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("num_heads", self.num_heads),
            ("head_dim", self.head_dim),
            ("hidden_dim", self.hidden_dim),
            ("num_layers", self.num_layers),
            ("bytes_per_element", self.bytes_per_element),
            ("workspace_scale", self.workspace_scale),
        ] {
            if v == 0 {
                return Err(ConfigError::ZeroField(name));
            }
        }
        if self.retention_ratio.is_nan()
            || self.retention_ratio <= 0.0
            || self.retention_ratio > 1.0
        {
            return Err(ConfigError::RetentionOutOfRange(self.retention_ratio));
        }
        if self.pool_kernel == 0 || self.pool_kernel.is_multiple_of(2) {
            return Err(ConfigError::BadPoolKernel(self.pool_kernel));
        }
        if !self.gen_length.is_multiple_of(self.block_size) {
            return Err(ConfigError::GenLengthNotBlockMultiple {
                gen_length: self.gen_length,
                block_size: self.block_size,
            });
        }
        // The schedule assigns a whole number of steps to each block.
        let product = self.num_steps as u64 * self.block_size as u64;
        if !product.is_multiple_of(self.gen_length as u64) || product / self.gen_length as u64 == 0
        {
            return Err(ConfigError::StepsNotDivisible {
                product,
                gen_length: self.gen_length,
            });
        }
        self.hw.validate()
    }
}
