//! System heterogeneity: device and link catalogs, per-round sampling of
//! CPU frequency and bandwidth, and the client latency model.
//!
//! Units are fixed crate-wide: bits, seconds, MHz (= 10⁶ cycles/s) and
//! Mb/s (= 10⁶ bits/s).

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ModelSpec;

const MEGA: f64 = 1e6;

/// Sampled values are floored at this fraction of the mean.
pub const TRUNCATION_FLOOR_FRAC: f64 = 0.1;

pub const DEFAULT_STDEV_FRAC: f64 = 0.1;
pub const DEFAULT_CYCLES_PER_BIT: f64 = 1.0;
pub const DEFAULT_BITS_PER_PARAM: u64 = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareSpec {
    pub name: String,
    #[serde(rename = "cpu_freq_mhz")]
    pub cpu_freq_mean: f64,
    pub cores: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferProtocol {
    pub name: String,
    #[serde(rename = "bandwidth_mbps")]
    pub bandwidth_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub hardware: Vec<HardwareSpec>,
    pub protocols: Vec<TransferProtocol>,
}

impl Catalog {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.hardware.is_empty() {
            problems.push("hardware catalog is empty".to_string());
        }
        if self.protocols.is_empty() {
            problems.push("protocol catalog is empty".to_string());
        }
        for h in &self.hardware {
            if !(h.cpu_freq_mean > 0.0 && h.cpu_freq_mean.is_finite()) {
                problems.push(format!("{}: cpu_freq_mhz must be > 0", h.name));
            }
            if h.cores < 1 {
                problems.push(format!("{}: cores must be >= 1", h.name));
            }
        }
        for p in &self.protocols {
            if !(p.bandwidth_mean > 0.0 && p.bandwidth_mean.is_finite()) {
                problems.push(format!("{}: bandwidth_mbps must be > 0", p.name));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Catalog = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }
}

impl Default for Catalog {
    fn default() -> Self {
        builtin_hardware_catalog()
    }
}

/// The twelve simulated edge devices and four link types.
pub fn builtin_hardware_catalog() -> Catalog {
    const HW: [(f64, u32); 12] = [
        (921.0, 128),
        (1300.0, 256),
        (800.0, 384),
        (1100.0, 384),
        (1377.0, 384),
        (350.0, 4),
        (1500.0, 4),
        (700.0, 1),
        (3950.0, 2),
        (4300.0, 4),
        (4400.0, 4),
        (4400.0, 8),
    ];
    const LINKS: [(&str, f64); 4] = [
        ("Wi-Fi 1", 6.0),
        ("Wi-Fi 3", 33.0),
        ("Wi-Fi 4", 336.0),
        ("Fast Ethernet", 100.0),
    ];
    Catalog {
        hardware: HW
            .iter()
            .enumerate()
            .map(|(i, &(f, c))| HardwareSpec {
                name: format!("Hardware Spec. {}", i + 1),
                cpu_freq_mean: f,
                cores: c,
            })
            .collect(),
        protocols: LINKS
            .iter()
            .map(|&(name, bw)| TransferProtocol {
                name: name.to_string(),
                bandwidth_mean: bw,
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientSystemProfile {
    pub hardware: HardwareSpec,
    pub protocol: TransferProtocol,
    /// CPU cycles needed to train on one bit of data.
    pub cycles_per_bit: f64,
    pub freq_stdev_frac: f64,
    pub bw_stdev_frac: f64,
}

impl ClientSystemProfile {
    pub fn new(hardware: HardwareSpec, protocol: TransferProtocol) -> Self {
        ClientSystemProfile {
            hardware,
            protocol,
            cycles_per_bit: DEFAULT_CYCLES_PER_BIT,
            freq_stdev_frac: DEFAULT_STDEV_FRAC,
            bw_stdev_frac: DEFAULT_STDEV_FRAC,
        }
    }

    pub fn deterministic(mut self) -> Self {
        self.freq_stdev_frac = 0.0;
        self.bw_stdev_frac = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cycles_per_bit > 0.0 && self.cycles_per_bit.is_finite()) {
            return Err(Error::invalid("cycles_per_bit must be > 0"));
        }
        for (name, v) in [
            ("freq_stdev_frac", self.freq_stdev_frac),
            ("bw_stdev_frac", self.bw_stdev_frac),
        ] {
            if !(0.0..=0.5).contains(&v) {
                return Err(Error::invalid(format!("{name} {v} not in [0, 0.5]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundConditions {
    /// CPU frequency this round, MHz.
    pub freq_mhz: f64,
    /// Link bandwidth this round, Mb/s.
    pub bandwidth_mbps: f64,
}

fn truncated_normal<R: Rng + ?Sized>(mean: f64, stdev_frac: f64, rng: &mut R) -> f64 {
    if stdev_frac == 0.0 {
        return mean;
    }
    let normal = Normal::new(mean, mean * stdev_frac).expect("finite positive stdev");
    normal.sample(rng).max(TRUNCATION_FLOOR_FRAC * mean)
}

/// Draw this round's frequency and bandwidth. Frequency is drawn first.
pub fn sample_round_conditions<R: Rng + ?Sized>(
    profile: &ClientSystemProfile,
    rng: &mut R,
) -> RoundConditions {
    let freq_mhz = truncated_normal(profile.hardware.cpu_freq_mean, profile.freq_stdev_frac, rng);
    let bandwidth_mbps =
        truncated_normal(profile.protocol.bandwidth_mean, profile.bw_stdev_frac, rng);
    RoundConditions {
        freq_mhz,
        bandwidth_mbps,
    }
}

fn require_positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must be > 0, got {v}")))
    }
}

/// Seconds to train on `data_bits`: `bits · g / (cores · f)`.
pub fn local_compute_time(data_bits: f64, cycles_per_bit: f64, cores: u32, freq_mhz: f64) -> Result<f64> {
    require_positive("data_bits", data_bits)?;
    require_positive("cycles_per_bit", cycles_per_bit)?;
    require_positive("cores", f64::from(cores))?;
    require_positive("freq_mhz", freq_mhz)?;
    Ok(data_bits * cycles_per_bit / (f64::from(cores) * freq_mhz * MEGA))
}

/// Seconds to upload `model_bits` at `bandwidth_mbps`.
pub fn transmission_time(model_bits: f64, bandwidth_mbps: f64) -> Result<f64> {
    if !(model_bits >= 0.0 && model_bits.is_finite()) {
        return Err(Error::invalid(format!("model_bits must be >= 0, got {model_bits}")));
    }
    require_positive("bandwidth_mbps", bandwidth_mbps)?;
    Ok(model_bits / (bandwidth_mbps * MEGA))
}

/// Compute time plus upload time.
pub fn client_latency(
    profile: &ClientSystemProfile,
    conditions: &RoundConditions,
    data_bits: f64,
    model_bits: f64,
) -> Result<f64> {
    let compute = local_compute_time(
        data_bits,
        profile.cycles_per_bit,
        profile.hardware.cores,
        conditions.freq_mhz,
    )?;
    Ok(compute + transmission_time(model_bits, conditions.bandwidth_mbps)?)
}

pub fn model_size_bits(spec: &ModelSpec, bits_per_param: u64) -> u64 {
    spec.param_count() as u64 * bits_per_param
}

/// Client `k` gets device `k mod 12` and link `k mod 4` of the catalog.
pub fn round_robin_profiles(catalog: &Catalog, num_clients: usize) -> Vec<ClientSystemProfile> {
    (0..num_clients)
        .map(|k| {
            ClientSystemProfile::new(
                catalog.hardware[k % catalog.hardware.len()].clone(),
                catalog.protocols[k % catalog.protocols.len()].clone(),
            )
        })
        .collect()
}
