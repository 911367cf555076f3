//! Deterministic desk-scale simulator of huge-page management under
//! virtualization: a second-level (EPT-style) address-space model with
//! companion-page fine-grained monitoring, hot-page-pressure driven
//! promotion/demotion, VM-friendly split/collapse, and tiered-memory and
//! page-sharing case studies driven by seeded synthetic workloads.

pub mod content;
pub mod ept;
pub mod harness;
pub mod mmu;
pub mod monitor;
pub mod policy;
pub mod remap;
pub mod rng;
pub mod share;
pub mod tmm;
pub mod workload;

/// Bytes per base page (4 KiB).
pub const BASE_PAGE_BYTES: u64 = 4096;
/// Bytes per huge page (2 MiB).
pub const HUGE_PAGE_BYTES: u64 = 2 * 1024 * 1024;
/// Base pages covered by one huge page.
pub const ENTRIES_PER_HUGE: u64 = HUGE_PAGE_BYTES / BASE_PAGE_BYTES;
