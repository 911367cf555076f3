//! Hot-page-pressure bookkeeping and greedy promotion/demotion planning.
//!
//! All pressure arithmetic runs in whole bytes: a page's skew contribution is
//! `untouched_base_regions * 4096`, which represents `psr * huge_page_bytes`
//! exactly, so plan bookkeeping never drifts.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::monitor::PsrRecord;
use crate::{BASE_PAGE_BYTES, ENTRIES_PER_HUGE, HUGE_PAGE_BYTES};

/// Page skew ratio: the fraction of a huge page's 512 base regions that were
/// not accessed. Stored as the untouched count, so every value is an exact
/// multiple of 1/512 (and converts to f64 without rounding).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Psr {
    untouched: u16,
}

impl Psr {
    pub fn from_ns(n_s: u16) -> Psr {
        assert!(n_s <= ENTRIES_PER_HUGE as u16);
        Psr {
            untouched: ENTRIES_PER_HUGE as u16 - n_s,
        }
    }

    pub fn from_untouched(untouched: u16) -> Psr {
        assert!(untouched <= ENTRIES_PER_HUGE as u16);
        Psr { untouched }
    }

    pub fn untouched(&self) -> u16 {
        self.untouched
    }

    pub fn n_s(&self) -> u16 {
        ENTRIES_PER_HUGE as u16 - self.untouched
    }

    /// Exact value of `psr * 2 MiB` in bytes.
    pub fn skew_bytes(&self) -> u64 {
        u64::from(self.untouched) * BASE_PAGE_BYTES
    }

    pub fn as_f64(&self) -> f64 {
        f64::from(self.untouched) / ENTRIES_PER_HUGE as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    /// Expected share of VM memory in use: fast-tier fraction for tiering,
    /// the sharing waterline otherwise.
    pub f_use: f64,
    /// Huge pages with skew below this are always treated as balanced.
    pub psr_lower_bound: f64,
    /// Total VM memory in bytes.
    pub s_tot: u64,
    pub huge_page_bytes: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            f_use: 1.0,
            psr_lower_bound: 0.5,
            s_tot: 0,
            huge_page_bytes: HUGE_PAGE_BYTES,
        }
    }
}

impl PolicyConfig {
    /// Byte budget the hypervisor expects the VM to keep hot.
    pub fn expected_bytes(&self) -> i64 {
        (self.s_tot as f64 * self.f_use).round() as i64
    }
}

/// Signed bytes of hot memory beyond the expected-usage budget. Positive
/// pressure calls for demotion, negative leaves room to promote; zero is the
/// ideal.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HotPagePressure {
    pub hp: i64,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PolicyError {
    #[error("hot set of {s_hot} bytes exceeds total VM memory {s_tot}")]
    HotExceedsTotal { s_hot: u64, s_tot: u64 },
}

pub fn init_hot_page_pressure(
    s_hot: u64,
    config: &PolicyConfig,
) -> Result<HotPagePressure, PolicyError> {
    if s_hot > config.s_tot {
        return Err(PolicyError::HotExceedsTotal {
            s_hot,
            s_tot: config.s_tot,
        });
    }
    Ok(HotPagePressure {
        hp: s_hot as i64 - config.expected_bytes(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PlanEntry {
    pub region: u64,
    pub psr: Psr,
}

/// Ordered remap decisions plus the pressure they account for. Demotions are
/// listed most-skewed first, promotions least-skewed first.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Plan {
    pub demote: Vec<PlanEntry>,
    pub promote: Vec<PlanEntry>,
    pub hp_before: i64,
    pub hp_after: i64,
}

impl Plan {
    fn empty(hp: i64) -> Plan {
        Plan {
            demote: Vec::new(),
            promote: Vec::new(),
            hp_before: hp,
            hp_after: hp,
        }
    }
}

/// Greedily demote the most skewed hot huge pages until pressure is spent.
/// Pages below the skew lower bound are never demoted: they already map
/// enough accessed base regions that the translation win dominates.
pub fn plan_demotions(
    hp: HotPagePressure,
    candidates: &[PsrRecord],
    config: &PolicyConfig,
) -> Plan {
    if hp.hp <= 0 {
        return Plan::empty(hp.hp);
    }
    let mut sorted: Vec<&PsrRecord> = candidates.iter().collect();
    sorted.sort_by(|a, b| b.psr.cmp(&a.psr).then(a.region.cmp(&b.region)));
    let mut plan = Plan::empty(hp.hp);
    let mut pressure = hp.hp;
    for record in sorted {
        if pressure <= 0 {
            break;
        }
        if record.psr.as_f64() < config.psr_lower_bound {
            break;
        }
        pressure -= record.psr.skew_bytes() as i64;
        plan.demote.push(PlanEntry {
            region: record.region,
            psr: record.psr,
        });
    }
    plan.hp_after = pressure;
    plan
}

/// Greedily promote the least skewed base regions while pressure stays at or
/// below zero; the first candidate that would push it positive stops the
/// plan.
pub fn plan_promotions(
    hp: HotPagePressure,
    candidates: &[PsrRecord],
    _config: &PolicyConfig,
) -> Plan {
    if hp.hp >= 0 {
        return Plan::empty(hp.hp);
    }
    let mut sorted: Vec<&PsrRecord> = candidates.iter().collect();
    sorted.sort_by(|a, b| a.psr.cmp(&b.psr).then(a.region.cmp(&b.region)));
    let mut plan = Plan::empty(hp.hp);
    let mut pressure = hp.hp;
    for record in sorted {
        let next = pressure + record.psr.skew_bytes() as i64;
        if next > 0 {
            break;
        }
        pressure = next;
        plan.promote.push(PlanEntry {
            region: record.region,
            psr: record.psr,
        });
    }
    plan.hp_after = pressure;
    plan
}

/// Per-region fine access data feeding the fixed-threshold baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RegionAccess {
    pub region: u64,
    pub mapped_huge: bool,
    /// Base regions accessed out of 512.
    pub touched: u16,
}

/// Fixed-threshold comparator: demote huge regions whose touched count is at
/// or below the threshold, promote base regions above it, in region order.
pub fn fixed_threshold_plan(regions: &[RegionAccess], threshold: u16) -> Plan {
    assert!(threshold as u64 <= ENTRIES_PER_HUGE);
    let mut plan = Plan::empty(0);
    let mut sorted: Vec<&RegionAccess> = regions.iter().collect();
    sorted.sort_by_key(|r| r.region);
    for r in sorted {
        let entry = PlanEntry {
            region: r.region,
            psr: Psr::from_ns(r.touched),
        };
        if r.mapped_huge && r.touched <= threshold {
            plan.demote.push(entry);
        } else if !r.mapped_huge && r.touched > threshold {
            plan.promote.push(entry);
        }
    }
    plan
}
