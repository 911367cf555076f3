//! Experiment configuration: strict JSON schema, per-experiment defaults,
//! and range validation with key paths in every error.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mmu::CostModel;
use crate::monitor::{ScanConfig, ScanMode};
use crate::workload::{ContentSpec, Pattern, TraceSpec};
use crate::{ept, mmu, HUGE_PAGE_BYTES};

pub const MIB: u64 = 1024 * 1024;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unknown experiment {0:?}; see list-experiments")]
    UnknownExperiment(String),
    #[error("{path} = {value} out of range: {why}")]
    Range {
        path: &'static str,
        value: f64,
        why: &'static str,
    },
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct MachineConfig {
    pub tlb_base_entries: Option<usize>,
    pub tlb_huge_entries: Option<usize>,
    pub walk_refs_huge: Option<u32>,
    pub walk_refs_base: Option<u32>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PolicySection {
    /// Expected usage ratio; omitted means fast_capacity / total_memory.
    pub f_use: Option<f64>,
    pub psr_lower_bound: Option<f64>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TiersSection {
    pub fast_mib: Option<u64>,
    /// Omitted means "always enough" (total memory).
    pub slow_mib: Option<u64>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct MutationSection {
    /// Exact number of host mutations injected per fine-monitoring window.
    pub count: Option<u64>,
    /// Poisson mean used when no exact count is given.
    pub rate: Option<f64>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub unbalanced_pcts: Option<Vec<u8>>,
    pub fast_mib: Option<Vec<u64>>,
    pub wss_mib: Option<Vec<u64>>,
    pub fixed_thresholds: Option<Vec<u16>>,
}

/// On-disk experiment description. Everything except the name is optional;
/// unset sections take the experiment's desk-scale defaults.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub machine: MachineConfig,
    #[serde(default)]
    pub trace: Option<TraceSpec>,
    #[serde(default)]
    pub contents: Option<ContentSpec>,
    #[serde(default)]
    pub scan: Option<ScanConfig>,
    #[serde(default)]
    pub policy: PolicySection,
    #[serde(default)]
    pub tiers: TiersSection,
    #[serde(default)]
    pub costs: Option<CostModel>,
    #[serde(default)]
    pub host_mutations: MutationSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

fn default_seed() -> u64 {
    1
}

pub const EXPERIMENT_NAMES: [&str; 6] = [
    "fig2-ccdf",
    "micro-tmm",
    "micro-share",
    "monitor-accuracy",
    "vmexit-table",
    "dynamic-vs-fixed",
];

/// Fully concrete settings after defaults are applied.
#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct Resolved {
    pub name: String,
    pub seed: u64,
    pub tlb_base_entries: usize,
    pub tlb_huge_entries: usize,
    pub walk_refs_huge: u32,
    pub walk_refs_base: u32,
    pub trace: TraceSpec,
    pub contents: ContentSpec,
    pub scan: ScanConfig,
    pub f_use: Option<f64>,
    pub psr_lower_bound: f64,
    pub fast_capacity: u64,
    pub slow_capacity: Option<u64>,
    pub costs: CostModel,
    pub mutation_count: Option<u64>,
    pub mutation_rate: f64,
    pub unbalanced_pcts: Vec<u8>,
    pub fast_mib_sweep: Vec<u64>,
    pub wss_mib_sweep: Vec<u64>,
    pub fixed_thresholds: Vec<u16>,
    /// Not part of the manifest echo: the destination never affects results.
    #[serde(skip_serializing)]
    pub out_dir: PathBuf,
}

impl Resolved {
    pub fn build_machine(&self, total_bytes: u64, kind: ept::RegionKind, host_base: u64) -> mmu::Machine {
        let regions = (total_bytes / HUGE_PAGE_BYTES) as usize;
        let mut space =
            ept::EptSpace::build_with(total_bytes, &vec![kind; regions], host_base).expect("layout");
        space.walk_refs_huge = self.walk_refs_huge;
        space.walk_refs_base = self.walk_refs_base;
        mmu::Machine::with_tlb(
            space,
            mmu::Tlb::new(self.tlb_base_entries, self.tlb_huge_entries),
        )
    }
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<ExperimentConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let config: ExperimentConfig = serde_json::from_str(&text)?;
        Ok(config)
    }

    /// Apply experiment defaults and validate every range.
    pub fn resolve(&self) -> Result<Resolved, ConfigError> {
        if !EXPERIMENT_NAMES.contains(&self.name.as_str()) {
            return Err(ConfigError::UnknownExperiment(self.name.clone()));
        }
        let defaults = experiment_defaults(&self.name, self.seed);
        let mut trace = self.trace.unwrap_or(defaults.trace);
        trace.seed = self.seed;
        let mut contents = self.contents.unwrap_or(defaults.contents);
        contents.seed = self.seed;
        let resolved = Resolved {
            name: self.name.clone(),
            seed: self.seed,
            tlb_base_entries: self
                .machine
                .tlb_base_entries
                .unwrap_or(mmu::DEFAULT_TLB_BASE_ENTRIES),
            tlb_huge_entries: self
                .machine
                .tlb_huge_entries
                .unwrap_or(mmu::DEFAULT_TLB_HUGE_ENTRIES),
            walk_refs_huge: self
                .machine
                .walk_refs_huge
                .unwrap_or(ept::DEFAULT_WALK_REFS_HUGE),
            walk_refs_base: self
                .machine
                .walk_refs_base
                .unwrap_or(ept::DEFAULT_WALK_REFS_BASE),
            trace,
            contents,
            scan: self.scan.unwrap_or(defaults.scan),
            f_use: self.policy.f_use.or(defaults.f_use),
            psr_lower_bound: self.policy.psr_lower_bound.unwrap_or(0.5),
            fast_capacity: self.tiers.fast_mib.map(|m| m * MIB).unwrap_or(defaults.fast_capacity),
            slow_capacity: self.tiers.slow_mib.map(|m| m * MIB),
            costs: self.costs.unwrap_or_default(),
            mutation_count: self.host_mutations.count,
            mutation_rate: self.host_mutations.rate.unwrap_or(0.0),
            unbalanced_pcts: self
                .sweep
                .unbalanced_pcts
                .clone()
                .unwrap_or_else(|| vec![0, 25, 50, 75, 100]),
            fast_mib_sweep: self
                .sweep
                .fast_mib
                .clone()
                .unwrap_or_else(|| vec![2, 4, 8, 16]),
            wss_mib_sweep: self
                .sweep
                .wss_mib
                .clone()
                .unwrap_or_else(|| vec![2, 4, 8, 16]),
            fixed_thresholds: self
                .sweep
                .fixed_thresholds
                .clone()
                .unwrap_or_else(|| vec![10, 256]),
            out_dir: self
                .out_dir
                .clone()
                .unwrap_or_else(|| PathBuf::from("reports")),
        };
        validate(&resolved)?;
        Ok(resolved)
    }
}

struct Defaults {
    trace: TraceSpec,
    contents: ContentSpec,
    scan: ScanConfig,
    f_use: Option<f64>,
    fast_capacity: u64,
}

fn experiment_defaults(name: &str, seed: u64) -> Defaults {
    let scan = ScanConfig {
        window_ticks: 20_480,
        interval_ticks: 2_048,
        hot_threshold: 1,
        sampling_fraction: 0.05,
        mode: ScanMode::TwoStage,
    };
    match name {
        "micro-tmm" => Defaults {
            // 40 MiB working set focused on ~4 MiB of accessed bytes; the
            // runner picks the hot-set size per unbalanced fraction.
            trace: TraceSpec {
                wss: 40 * MIB,
                pattern: Pattern::Hotspot {
                    hot_fraction: 0.1,
                    hot_op_fraction: 1.0,
                },
                read_fraction: 0.5,
                unbalanced_fraction: 0.0,
                target_psr: 0.9,
                events: 3 * scan.window_ticks,
                seed,
            },
            contents: ContentSpec::default(),
            scan,
            f_use: None,
            fast_capacity: 8 * MIB,
        },
        "micro-share" => Defaults {
            trace: TraceSpec {
                wss: 8 * MIB,
                pattern: Pattern::Hotspot {
                    hot_fraction: 0.75,
                    hot_op_fraction: 1.0,
                },
                read_fraction: 1.0,
                unbalanced_fraction: 2.0 / 3.0,
                target_psr: 0.9,
                events: 3 * scan.window_ticks,
                seed,
            },
            contents: ContentSpec {
                vm_count: 2,
                frames_per_vm: 2048,
                duplicate_fraction: 1.0,
                zero_fraction: 0.125,
                seed,
            },
            scan,
            f_use: Some(0.5),
            fast_capacity: 8 * MIB,
        },
        "vmexit-table" => Defaults {
            trace: TraceSpec {
                wss: 16 * MIB,
                pattern: Pattern::Sequential,
                read_fraction: 1.0,
                unbalanced_fraction: 0.0,
                target_psr: 0.0,
                events: 4096,
                seed,
            },
            contents: ContentSpec::default(),
            scan,
            f_use: None,
            fast_capacity: 16 * MIB,
        },
        "dynamic-vs-fixed" => Defaults {
            trace: TraceSpec {
                wss: 16 * MIB,
                pattern: Pattern::UniformRandom,
                read_fraction: 0.5,
                unbalanced_fraction: 1.0,
                // 10 accessed base regions per huge page.
                target_psr: 1.0 - 10.0 / 512.0,
                events: 3 * scan.window_ticks,
                seed,
            },
            contents: ContentSpec::default(),
            scan,
            f_use: None,
            fast_capacity: 8 * MIB,
        },
        // fig2-ccdf and monitor-accuracy share a skewed hotspot workload;
        // the accuracy run focuses every operation on the hot set so cold
        // regions stay cold at region granularity.
        _ => Defaults {
            trace: TraceSpec {
                wss: 32 * MIB,
                pattern: Pattern::Hotspot {
                    hot_fraction: 0.2,
                    hot_op_fraction: if name == "monitor-accuracy" { 1.0 } else { 0.8 },
                },
                read_fraction: 0.5,
                unbalanced_fraction: 0.9,
                target_psr: 0.9,
                events: 3 * scan.window_ticks,
                seed,
            },
            contents: ContentSpec {
                vm_count: 1,
                frames_per_vm: 32 * MIB / 4096,
                duplicate_fraction: 0.0,
                zero_fraction: 0.05,
                seed,
            },
            scan,
            f_use: None,
            fast_capacity: 32 * MIB,
        },
    }
}

fn fraction(path: &'static str, value: f64, lo: f64, hi: f64) -> Result<(), ConfigError> {
    if value.is_nan() || value < lo || value > hi {
        return Err(ConfigError::Range {
            path,
            value,
            why: "must be a fraction within bounds",
        });
    }
    Ok(())
}

fn validate(r: &Resolved) -> Result<(), ConfigError> {
    if let Some(f_use) = r.f_use {
        if f_use.is_nan() || f_use <= 0.0 || f_use > 1.0 {
            return Err(ConfigError::Range {
                path: "policy.f_use",
                value: f_use,
                why: "must be in (0, 1]",
            });
        }
    }
    fraction("policy.psr_lower_bound", r.psr_lower_bound, 0.0, 1.0)?;
    fraction("trace.read_fraction", r.trace.read_fraction, 0.0, 1.0)?;
    fraction(
        "trace.unbalanced_fraction",
        r.trace.unbalanced_fraction,
        0.0,
        1.0,
    )?;
    fraction("trace.target_psr", r.trace.target_psr, 0.0, 1.0)?;
    if let Pattern::Hotspot {
        hot_fraction,
        hot_op_fraction,
    } = r.trace.pattern
    {
        fraction("trace.pattern.hot_fraction", hot_fraction, 0.0, 1.0)?;
        fraction("trace.pattern.hot_op_fraction", hot_op_fraction, 0.0, 1.0)?;
    }
    fraction(
        "contents.duplicate_fraction",
        r.contents.duplicate_fraction,
        0.0,
        1.0,
    )?;
    fraction("contents.zero_fraction", r.contents.zero_fraction, 0.0, 1.0)?;
    fraction("scan.sampling_fraction", r.scan.sampling_fraction, 0.0, 1.0)?;
    if r.trace.wss == 0 || !r.trace.wss.is_multiple_of(HUGE_PAGE_BYTES) {
        return Err(ConfigError::Range {
            path: "trace.wss",
            value: r.trace.wss as f64,
            why: "must be a non-zero multiple of 2 MiB",
        });
    }
    if r.scan.interval_ticks == 0 || !r.scan.window_ticks.is_multiple_of(r.scan.interval_ticks) {
        return Err(ConfigError::Range {
            path: "scan.interval_ticks",
            value: r.scan.interval_ticks as f64,
            why: "must divide scan.window_ticks",
        });
    }
    if r.scan.hot_threshold == 0 {
        return Err(ConfigError::Range {
            path: "scan.hot_threshold",
            value: 0.0,
            why: "must be at least 1",
        });
    }
    if let Some(rate) = Some(r.mutation_rate) {
        if rate < 0.0 || rate.is_nan() {
            return Err(ConfigError::Range {
                path: "host_mutations.rate",
                value: rate,
                why: "must be non-negative",
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_resolves_with_defaults() {
        let config: ExperimentConfig =
            serde_json::from_str(r#"{"name": "micro-tmm", "seed": 9}"#).unwrap();
        let resolved = config.resolve().unwrap();
        assert_eq!(resolved.seed, 9);
        assert_eq!(resolved.fast_capacity, 8 * MIB);
        assert_eq!(resolved.trace.wss, 40 * MIB);
        assert_eq!(resolved.tlb_base_entries, 64);
        assert_eq!(resolved.trace.seed, 9);
    }

    #[test]
    fn unknown_key_is_rejected_by_name() {
        let err = serde_json::from_str::<ExperimentConfig>(
            r#"{"name": "micro-tmm", "pollicy": {}}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("pollicy"), "{err}");
    }

    #[test]
    fn out_of_range_f_use_names_key_path() {
        let config: ExperimentConfig = serde_json::from_str(
            r#"{"name": "micro-share", "policy": {"f_use": 1.5}}"#,
        )
        .unwrap();
        let err = config.resolve().unwrap_err();
        assert!(err.to_string().contains("policy.f_use"), "{err}");
    }

    #[test]
    fn unknown_experiment_is_rejected() {
        let config: ExperimentConfig =
            serde_json::from_str(r#"{"name": "fig9-nope"}"#).unwrap();
        assert!(matches!(
            config.resolve().unwrap_err(),
            ConfigError::UnknownExperiment(_)
        ));
    }

    #[test]
    fn trace_seed_follows_config_seed() {
        let config: ExperimentConfig = serde_json::from_str(
            r#"{"name": "fig2-ccdf", "seed": 77, "trace": {"wss": 4194304, "events": 100, "seed": 5}}"#,
        )
        .unwrap();
        let resolved = config.resolve().unwrap();
        assert_eq!(resolved.trace.seed, 77);
        assert_eq!(resolved.trace.wss, 4 * MIB);
    }
}
