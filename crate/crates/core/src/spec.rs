//! Domain types: models, GPUs, machines and training configurations.

use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Decoder,
    Encoder,
    Ssm,
    Conv,
    Vit,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::Decoder,
        Family::Encoder,
        Family::Ssm,
        Family::Conv,
        Family::Vit,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::Decoder => "decoder",
            Family::Encoder => "encoder",
            Family::Ssm => "ssm",
            Family::Conv => "conv",
            Family::Vit => "vit",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    Fp32,
    Fp16Mixed,
    Bf16Mixed,
}

impl Precision {
    pub fn is_mixed(self) -> bool {
        !matches!(self, Precision::Fp32)
    }

    /// Bytes per activation element.
    pub fn activation_bytes(self) -> f64 {
        if self.is_mixed() {
            2.0
        } else {
            4.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Adam,
    Adamw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generation {
    PreAmpere,
    Ampere,
    Hopper,
}

impl Generation {
    pub fn supports_tf32(self) -> bool {
        self != Generation::PreAmpere
    }
}

/// Replication hyper-parameters and architecture of one trainable model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub id: String,
    pub family: Family,
    pub param_count: u64,
    #[serde(default)]
    pub seq_len: u64,
    #[serde(default)]
    pub vocab_size: u64,
    #[serde(default)]
    pub image_size: u64,
    #[serde(default)]
    pub num_classes: u64,
    pub hidden_size: u64,
    pub num_layers: u64,
    #[serde(default)]
    pub num_heads: u64,
    pub global_batch_size: u64,
    pub training_steps: u64,
    pub precision: Precision,
    pub optimizer: Optimizer,
    pub supports_compile: bool,
    pub supports_custom_kernels: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_training_flops_override: Option<f64>,
}

impl ModelSpec {
    pub fn is_token_model(&self) -> bool {
        self.seq_len > 0 && self.vocab_size > 0
    }

    pub fn is_image_model(&self) -> bool {
        self.image_size > 0 && self.num_classes > 0
    }

    /// Tokens (or patches) one sample contributes to a pass.
    ///
    /// Vision models count 16x16 patches of the input image.
    pub fn sample_tokens(&self) -> f64 {
        if self.is_token_model() {
            self.seq_len as f64
        } else {
            let side = self.image_size as f64 / 16.0;
            side * side
        }
    }

    pub fn check(&self) -> crate::Result<()> {
        let bad = |m: &str| Err(crate::Error::invalid(format!("model `{}`", self.id), m));
        if self.id.is_empty() {
            return bad("empty id");
        }
        if self.param_count == 0 {
            return bad("param_count must be positive");
        }
        if self.global_batch_size == 0 {
            return bad("global_batch_size must be positive");
        }
        if self.training_steps == 0 {
            return bad("training_steps must be positive");
        }
        if self.hidden_size == 0 || self.num_layers == 0 {
            return bad("hidden_size and num_layers must be positive");
        }
        if !self.is_token_model() && !self.is_image_model() {
            return bad("needs seq_len/vocab_size or image_size/num_classes");
        }
        if let Some(f) = self.total_training_flops_override {
            if !(f.is_finite() && f > 0.0) {
                return bad("total_training_flops_override must be positive");
            }
        }
        Ok(())
    }
}

/// One GPU product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpuSpec {
    pub id: String,
    pub memory_bytes: u64,
    /// 16-bit tensor throughput, FLOPs/sec.
    pub peak_half_flops: f64,
    pub generation: Generation,
    pub unit_price_usd: f64,
    pub mem_bandwidth_bytes: f64,
}

impl GpuSpec {
    pub fn check(&self) -> crate::Result<()> {
        let ok = self.memory_bytes > 0
            && positive(self.peak_half_flops)
            && positive(self.unit_price_usd)
            && positive(self.mem_bandwidth_bytes);
        if ok {
            Ok(())
        } else {
            Err(crate::Error::invalid(
                format!("gpu `{}`", self.id),
                "all quantities must be positive",
            ))
        }
    }
}

/// A GPU type in a given count, plus the system build around it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineSpec {
    pub id: String,
    pub gpu: GpuSpec,
    pub n_gpus: u32,
    pub system_price_usd: f64,
    pub host_ram_bytes: u64,
    /// GPU to GPU bandwidth, bytes/sec.
    pub intra_node_bw_bytes: f64,
    /// Host RAM to GPU bandwidth, bytes/sec.
    pub host_device_bw_bytes: f64,
}

impl MachineSpec {
    pub fn check(&self) -> crate::Result<()> {
        let what = || format!("machine `{}`", self.id);
        if !matches!(self.n_gpus, 1 | 2 | 4 | 8) {
            return Err(crate::Error::invalid(what(), "n_gpus must be 1, 2, 4 or 8"));
        }
        let ok = self.host_ram_bytes > 0
            && positive(self.system_price_usd)
            && positive(self.intra_node_bw_bytes)
            && positive(self.host_device_bw_bytes);
        if !ok {
            return Err(crate::Error::invalid(
                what(),
                "all quantities must be positive",
            ));
        }
        self.gpu.check()
    }

    pub fn aggregate_peak_flops(&self) -> f64 {
        self.n_gpus as f64 * self.gpu.peak_half_flops
    }
}

fn positive(x: f64) -> bool {
    x.is_finite() && x > 0.0
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum Sharding {
    #[default]
    None,
    Zero1,
    Zero2,
    Zero3,
    Fsdp2,
    Fsdp3,
}

impl Sharding {
    pub const ALL: [Sharding; 6] = [
        Sharding::None,
        Sharding::Zero1,
        Sharding::Zero2,
        Sharding::Zero3,
        Sharding::Fsdp2,
        Sharding::Fsdp3,
    ];

    /// 0 = disabled, 1 = optimizer, 2 = +gradients, 3 = +weights.
    pub fn stage(self) -> u8 {
        match self {
            Sharding::None => 0,
            Sharding::Zero1 => 1,
            Sharding::Zero2 | Sharding::Fsdp2 => 2,
            Sharding::Zero3 | Sharding::Fsdp3 => 3,
        }
    }

    pub fn is_zero(self) -> bool {
        matches!(self, Sharding::Zero1 | Sharding::Zero2 | Sharding::Zero3)
    }

    pub fn is_enabled(self) -> bool {
        self != Sharding::None
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Sharding::None => "none",
            Sharding::Zero1 => "zero1",
            Sharding::Zero2 => "zero2",
            Sharding::Zero3 => "zero3",
            Sharding::Fsdp2 => "fsdp2",
            Sharding::Fsdp3 => "fsdp3",
        }
    }
}

impl fmt::Display for Sharding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One point in the efficient-training search space.
///
/// `micro_batch` and `grad_accum_steps` are 0 while unset.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub compile: bool,
    pub custom_kernels: bool,
    pub tf32: bool,
    pub act_checkpointing: bool,
    pub sharding: Sharding,
    pub offload: bool,
    pub micro_batch: u64,
    pub grad_accum_steps: u64,
}

impl TrainConfig {
    /// Off-the-shelf settings: no efficiency method enabled.
    pub fn naive() -> Self {
        Self::default()
    }

    /// Number of memory-saving methods enabled.
    pub fn memory_saving_count(&self) -> u32 {
        self.act_checkpointing as u32 + self.sharding.is_enabled() as u32 + self.offload as u32
    }

    pub fn with_batch(mut self, micro_batch: u64, grad_accum_steps: u64) -> Self {
        self.micro_batch = micro_batch;
        self.grad_accum_steps = grad_accum_steps;
        self
    }

    /// Short stable identifier used in reports.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let digest = Sha256::digest(self.to_string().as_bytes());
        digest[..4].iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl fmt::Display for TrainConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let flag = |b: bool| if b { '+' } else { '-' };
        write!(
            f,
            "{}compile {}kernels {}tf32 {}ckpt shard={} {}offload mb={} gas={}",
            flag(self.compile),
            flag(self.custom_kernels),
            flag(self.tf32),
            flag(self.act_checkpointing),
            self.sharding,
            flag(self.offload),
            self.micro_batch,
            self.grad_accum_steps
        )
    }
}
