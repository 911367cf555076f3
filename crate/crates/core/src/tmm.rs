//! Tiered fast/slow placement driven by access monitoring: the fine-grained
//! two-stage strategy with pressure-driven remapping, and the pure-huge and
//! pure-base scan baselines.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::content::ContentStore;
use crate::ept::{RegionMapping, ScanGranularity};
use crate::mmu::{access_cost, CostModel, FlushScope, Machine, Tier};
use crate::monitor::{
    classify_hot_cold, compute_psr, stage1_scan, stage2_fine_monitor, HostMutation, ScanConfig,
};
use crate::policy::{init_hot_page_pressure, plan_demotions, plan_promotions, Plan, PolicyConfig, Psr};
use crate::remap::{collapse_huge_region, split_huge_page, SplitMode};
use crate::workload::Trace;
use crate::{BASE_PAGE_BYTES, ENTRIES_PER_HUGE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TmmStrategy {
    Fhpm,
    HmmVHuge,
    HmmVBase,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TierSpec {
    pub fast_capacity: u64,
    pub slow_capacity: u64,
}

impl TierSpec {
    pub fn validate(&self, total_bytes: u64) -> Result<(), TmmError> {
        if self.fast_capacity + self.slow_capacity < total_bytes {
            return Err(TmmError::TiersTooSmall {
                fast: self.fast_capacity,
                slow: self.slow_capacity,
                total: total_bytes,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TmmError {
    #[error("tiers ({fast} + {slow} bytes) cannot hold {total} bytes")]
    TiersTooSmall { fast: u64, slow: u64, total: u64 },
    #[error("{frames} frames exceed fast capacity of {capacity} frames")]
    CapacityExceeded { frames: u64, capacity: u64 },
    #[error("monitoring failed: {0}")]
    Monitor(String),
}

/// Host-frame to tier assignment with a hard fast-tier capacity.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Placement {
    fast: BTreeSet<u64>,
    slow: BTreeSet<u64>,
    fast_capacity_frames: u64,
}

impl Placement {
    /// First-touch placement: host frames fill the fast tier in allocation
    /// order until it is full, then spill to slow.
    pub fn first_touch(machine: &Machine, fast_capacity: u64) -> Placement {
        let fast_capacity_frames = fast_capacity / BASE_PAGE_BYTES;
        let mut placement = Placement {
            fast: BTreeSet::new(),
            slow: BTreeSet::new(),
            fast_capacity_frames,
        };
        let mut frames: Vec<u64> = Vec::new();
        for (_, mapping) in machine.space.regions() {
            match mapping {
                RegionMapping::HugeLeaf(pde) => {
                    frames.extend((0..ENTRIES_PER_HUGE).map(|i| pde.frame.0 + i));
                }
                RegionMapping::BaseTable(table) => {
                    frames.extend(table.iter().filter(|p| p.present).map(|p| p.frame.0));
                }
                RegionMapping::Unmapped => {}
            }
        }
        frames.sort_unstable();
        for frame in frames {
            if (placement.fast.len() as u64) < fast_capacity_frames {
                placement.fast.insert(frame);
            } else {
                placement.slow.insert(frame);
            }
        }
        placement
    }

    pub fn tier_of(&self, host_frame: u64) -> Tier {
        if self.fast.contains(&host_frame) {
            Tier::Fast
        } else {
            Tier::Slow
        }
    }

    pub fn fast_used(&self) -> u64 {
        self.fast.len() as u64 * BASE_PAGE_BYTES
    }

    pub fn slow_used(&self) -> u64 {
        self.slow.len() as u64 * BASE_PAGE_BYTES
    }

    pub fn fast_capacity(&self) -> u64 {
        self.fast_capacity_frames * BASE_PAGE_BYTES
    }


}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MigrateStats {
    pub migrated_bytes: u64,
}

/// Move frames to a tier. Filling fast past capacity evicts the coldest
/// residents (frequency ascending, then frame index) to slow first.
pub fn migrate(
    placement: &mut Placement,
    frames: &[u64],
    target: Tier,
    hotness: &BTreeMap<u64, u32>,
    stats: &mut MigrateStats,
) -> Result<(), TmmError> {
    match target {
        Tier::Slow => {
            for &frame in frames {
                if placement.slow.contains(&frame) {
                    continue;
                }
                placement.fast.remove(&frame);
                placement.slow.insert(frame);
                stats.migrated_bytes += BASE_PAGE_BYTES;
            }
        }
        Tier::Fast => {
            let incoming: Vec<u64> = frames
                .iter()
                .copied()
                .filter(|f| !placement.fast.contains(f))
                .collect();
            if frames.len() as u64 > placement.fast_capacity_frames {
                return Err(TmmError::CapacityExceeded {
                    frames: frames.len() as u64,
                    capacity: placement.fast_capacity_frames,
                });
            }
            let need =
                (placement.fast.len() + incoming.len()) as i64 - placement.fast_capacity_frames as i64;
            if need > 0 {
                let mut residents: Vec<u64> = placement
                    .fast
                    .iter()
                    .copied()
                    .filter(|f| !frames.contains(f))
                    .collect();
                residents.sort_by_key(|f| (hotness.get(f).copied().unwrap_or(0), *f));
                for frame in residents.into_iter().take(need as usize) {
                    placement.fast.remove(&frame);
                    placement.slow.insert(frame);
                    stats.migrated_bytes += BASE_PAGE_BYTES;
                }
            }
            for frame in incoming {
                placement.slow.remove(&frame);
                placement.fast.insert(frame);
                stats.migrated_bytes += BASE_PAGE_BYTES;
            }
        }
    }
    Ok(())
}

/// One placement unit: a whole huge region or a single base frame, with the
/// frequency that ranks it.
#[derive(Clone, Debug, PartialEq, Eq)]
struct HotUnit {
    freq: u32,
    /// Base frames outrank huge regions at equal frequency: their heat is
    /// denser per byte.
    is_huge: bool,
    index: u64,
    host_frames: Vec<u64>,
}

fn rank_units(mut units: Vec<HotUnit>) -> Vec<HotUnit> {
    units.sort_by(|a, b| {
        b.freq
            .cmp(&a.freq)
            .then(a.is_huge.cmp(&b.is_huge))
            .then(a.index.cmp(&b.index))
    });
    units
}

/// Migrate ranked units into fast while they fit, evicting the coldest
/// residents; units past capacity go to slow. Frames outside every unit are
/// left where they are, so nothing is demoted without pressure.
fn apply_ranked_placement(
    placement: &mut Placement,
    ranked: &[HotUnit],
    stats: &mut MigrateStats,
) -> Result<(), TmmError> {
    let mut hotness: BTreeMap<u64, u32> = BTreeMap::new();
    for unit in ranked {
        for &frame in &unit.host_frames {
            let slot = hotness.entry(frame).or_insert(0);
            *slot = (*slot).max(unit.freq);
        }
    }
    let cap = placement.fast_capacity_frames as usize;
    let mut claimed = 0usize;
    for unit in ranked {
        if claimed + unit.host_frames.len() <= cap {
            claimed += unit.host_frames.len();
            migrate(placement, &unit.host_frames, Tier::Fast, &hotness, stats)?;
        } else {
            migrate(placement, &unit.host_frames, Tier::Slow, &hotness, stats)?;
        }
    }
    Ok(())
}

/// Sum of access costs for a window replayed against a placement, starting
/// from a cold TLB, plus which fast bytes were actually touched.
pub fn estimate_epoch_cost(
    machine: &mut Machine,
    window: &[crate::mmu::AccessEvent],
    placement: &Placement,
    model: &CostModel,
) -> (u64, u64) {
    machine.tlb.flush(FlushScope::All);
    let mut total = 0u64;
    let mut fast_touched: BTreeSet<u64> = BTreeSet::new();
    for event in window {
        let outcome = machine.access(event);
        let tier = match outcome.hpa {
            Some(hpa) => {
                let frame = hpa / BASE_PAGE_BYTES;
                let tier = placement.tier_of(frame);
                if tier == Tier::Fast {
                    fast_touched.insert(frame);
                }
                tier
            }
            None => Tier::Slow,
        };
        total += access_cost(&outcome, event.kind, model, tier);
    }
    (total, fast_touched.len() as u64 * BASE_PAGE_BYTES)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    pub strategy: TmmStrategy,
    pub fast_ratio: f64,
    pub cost: u64,
    pub fast_accessed_bytes: u64,
    pub huge_ratio_in_fast: f64,
    pub fast_used: u64,
    pub migrated_bytes: u64,
    pub plan: Plan,
}

/// Host mutations to inject during the fine-monitoring window, and an
/// optional fixed demotion/promotion threshold that replaces the
/// pressure-driven plan.
#[derive(Clone, Debug, Default)]
pub struct EpochOptions {
    pub mutations: Vec<HostMutation>,
    pub fixed_threshold: Option<u16>,
}

/// Run one monitoring + remap + migrate + cost epoch.
///
/// Window 0 of the trace feeds coarse monitoring, window 1 fine monitoring,
/// window 2 the cost estimate.
#[allow(clippy::too_many_arguments)]
pub fn run_tmm_epoch(
    machine: &mut Machine,
    contents: &mut ContentStore,
    trace: &Trace,
    strategy: TmmStrategy,
    tier: &TierSpec,
    placement: &mut Placement,
    scan: &ScanConfig,
    policy: &PolicyConfig,
    model: &CostModel,
    options: &EpochOptions,
) -> Result<EpochReport, TmmError> {
    tier.validate(machine.space.total_bytes())?;
    let s1 = trace.window(0, scan.window_ticks);
    let s2 = trace.window(1, scan.window_ticks);
    let cost_window = trace.window(2, scan.window_ticks);
    let mut migrate_stats = MigrateStats::default();
    let copies_before = machine.stats.copies_bytes;

    let (units, plan) = match strategy {
        TmmStrategy::HmmVHuge => {
            let hist = stage1_scan_huge(machine, s1, scan)?;
            let units = hist
                .regions
                .iter()
                .filter(|(_, &f)| f >= scan.hot_threshold)
                .map(|(&region, &freq)| HotUnit {
                    freq,
                    is_huge: true,
                    index: region,
                    host_frames: region_host_frames(machine, region),
                })
                .collect();
            (units, Plan::default())
        }
        TmmStrategy::HmmVBase => {
            let hist =
                stage1_scan(machine, s1, scan).map_err(|e| TmmError::Monitor(e.to_string()))?;
            let units = hist
                .frames
                .iter()
                .filter(|(_, &f)| f >= scan.hot_threshold)
                .map(|(&gfn, &freq)| HotUnit {
                    freq,
                    is_huge: false,
                    index: gfn,
                    host_frames: gfn_host_frame(machine, gfn).into_iter().collect(),
                })
                .collect();
            (units, Plan::default())
        }
        TmmStrategy::Fhpm => {
            fhpm_epoch_units(machine, contents, s1, s2, scan, policy, options)?
        }
    };

    let ranked = rank_units(units);
    apply_ranked_placement(placement, &ranked, &mut migrate_stats)?;

    let (access_total, fast_accessed_bytes) =
        estimate_epoch_cost(machine, cost_window, placement, model);
    let copy_bytes = (machine.stats.copies_bytes - copies_before) + migrate_stats.migrated_bytes;
    let cost = access_total + (copy_bytes / BASE_PAGE_BYTES) * model.copy_page;

    Ok(EpochReport {
        strategy,
        fast_ratio: tier.fast_capacity as f64 / machine.space.total_bytes() as f64,
        cost,
        fast_accessed_bytes,
        huge_ratio_in_fast: huge_ratio_in_fast(machine, placement),
        fast_used: placement.fast_used(),
        migrated_bytes: migrate_stats.migrated_bytes,
        plan,
    })
}

fn stage1_scan_huge(
    machine: &mut Machine,
    window: &[crate::mmu::AccessEvent],
    scan: &ScanConfig,
) -> Result<crate::monitor::AccessHistogram, TmmError> {
    // Region-granularity scan for the pure-huge baseline.
    scan.validate().map_err(|e| TmmError::Monitor(e.to_string()))?;
    if window.is_empty() {
        return Err(TmmError::Monitor("empty window".into()));
    }
    let mut histogram = crate::monitor::AccessHistogram::default();
    let start = window[0].tick;
    let mut cursor = 0usize;
    for interval in 0..scan.intervals() {
        machine.clear_ad_and_flush(ScanGranularity::HugeOnly);
        let end_tick = start + (interval + 1) * scan.interval_ticks;
        let begin = cursor;
        while cursor < window.len() && window[cursor].tick < end_tick {
            cursor += 1;
        }
        for event in &window[begin..cursor] {
            machine.access(event);
        }
        let snap = machine.clear_ad_and_flush(ScanGranularity::HugeOnly);
        for (&region, &(accessed, _)) in &snap.regions {
            let slot = histogram.regions.entry(region).or_insert(0);
            if accessed {
                *slot += 1;
            }
        }
    }
    Ok(histogram)
}

/// Monitoring plus pressure-driven remapping; returns placement units and
/// the executed plan.
fn fhpm_epoch_units(
    machine: &mut Machine,
    contents: &mut ContentStore,
    s1: &[crate::mmu::AccessEvent],
    s2: &[crate::mmu::AccessEvent],
    scan: &ScanConfig,
    policy: &PolicyConfig,
    options: &EpochOptions,
) -> Result<(Vec<HotUnit>, Plan), TmmError> {
    let hist = stage1_scan(machine, s1, scan).map_err(|e| TmmError::Monitor(e.to_string()))?;
    let partition = classify_hot_cold(&hist, scan.hot_threshold);

    let hot_huge: Vec<u64> = partition.hot_regions.iter().copied().collect();
    let reports = stage2_fine_monitor(machine, &hot_huge, s2, &hist, &options.mutations)
        .map_err(|e| TmmError::Monitor(e.to_string()))?;
    // Invalidated reports are treated as balanced pages: never demoted on
    // stale data.
    let psrs: Vec<_> = reports
        .iter()
        .filter(|r| r.valid)
        .map(|r| compute_psr(r).expect("valid"))
        .collect();

    let vm_policy = PolicyConfig {
        s_tot: machine.space.total_bytes(),
        ..*policy
    };
    let s_hot = partition.hot_bytes().min(vm_policy.s_tot);
    let hp = init_hot_page_pressure(s_hot, &vm_policy).expect("clamped");
    let mut plan = if let Some(threshold) = options.fixed_threshold {
        let access: Vec<crate::policy::RegionAccess> = reports
            .iter()
            .filter(|r| r.valid)
            .map(|r| crate::policy::RegionAccess {
                region: r.region,
                mapped_huge: true,
                touched: r.n_s() as u16,
            })
            .chain(machine.space.regions().filter_map(|(region, mapping)| {
                match mapping {
                    RegionMapping::BaseTable(t) if t.iter().all(|p| p.present) => {
                        let touched = (0..ENTRIES_PER_HUGE)
                            .filter(|slot| {
                                partition
                                    .hot_frames
                                    .contains(&(region * ENTRIES_PER_HUGE + slot))
                            })
                            .count() as u16;
                        Some(crate::policy::RegionAccess {
                            region,
                            mapped_huge: false,
                            touched,
                        })
                    }
                    _ => None,
                }
            }))
            .collect();
        crate::policy::fixed_threshold_plan(&access, threshold)
    } else if hp.hp > 0 {
        plan_demotions(hp, &psrs, &vm_policy)
    } else {
        // Promotion candidates: fully present base regions, skew taken from
        // the count of hot frames they hold.
        let candidates: Vec<crate::monitor::PsrRecord> = machine
            .space
            .regions()
            .filter_map(|(region, mapping)| match mapping {
                RegionMapping::BaseTable(t) if t.iter().all(|p| p.present) => {
                    let touched = (0..ENTRIES_PER_HUGE)
                        .filter(|slot| {
                            partition
                                .hot_frames
                                .contains(&(region * ENTRIES_PER_HUGE + slot))
                        })
                        .count() as u16;
                    Some(crate::monitor::PsrRecord {
                        region,
                        psr: Psr::from_ns(touched),
                    })
                }
                _ => None,
            })
            .collect();
        plan_promotions(hp, &candidates, &vm_policy)
    };
    plan.hp_before = hp.hp;

    let demoted: BTreeSet<u64> = plan.demote.iter().map(|e| e.region).collect();
    for entry in &plan.demote {
        let mut stats = machine.stats;
        split_huge_page(
            &mut machine.space,
            &mut machine.tlb,
            entry.region,
            SplitMode::VmFriendly,
            &mut stats,
        )
        .expect("hot huge leaf");
        machine.stats = stats;
    }
    let mut promoted: BTreeSet<u64> = BTreeSet::new();
    for entry in &plan.promote {
        let mut stats = machine.stats;
        if collapse_huge_region(
            &mut machine.space,
            &mut machine.tlb,
            entry.region,
            SplitMode::VmFriendly,
            &mut stats,
            contents,
            |_| false,
        )
        .is_ok()
        {
            promoted.insert(entry.region);
        }
        machine.stats = stats;
    }

    // Hot units after remapping: hot huge pages that stayed huge (plus
    // promoted regions), hot base frames, and the accessed offsets exposed
    // by each demotion at their inherited frequency.
    let mut units = Vec::new();
    for &region in &partition.hot_regions {
        if demoted.contains(&region) {
            continue;
        }
        let freq = hist.regions.get(&region).copied().unwrap_or(0);
        units.push(HotUnit {
            freq,
            is_huge: true,
            index: region,
            host_frames: region_host_frames(machine, region),
        });
    }
    for &region in &promoted {
        units.push(HotUnit {
            freq: scan.hot_threshold,
            is_huge: true,
            index: region,
            host_frames: region_host_frames(machine, region),
        });
    }
    for &gfn in &partition.hot_frames {
        if promoted.contains(&(gfn / ENTRIES_PER_HUGE)) {
            continue;
        }
        units.push(HotUnit {
            freq: hist.frames.get(&gfn).copied().unwrap_or(0),
            is_huge: false,
            index: gfn,
            host_frames: gfn_host_frame(machine, gfn).into_iter().collect(),
        });
    }
    for report in &reports {
        if !report.valid || !demoted.contains(&report.region) {
            continue;
        }
        for offset in report.accessed_bitmap.iter_set() {
            let gfn = report.region * ENTRIES_PER_HUGE + offset as u64;
            units.push(HotUnit {
                freq: report.inherited_frequency,
                is_huge: false,
                index: gfn,
                host_frames: gfn_host_frame(machine, gfn).into_iter().collect(),
            });
        }
    }
    Ok((units, plan))
}

fn region_host_frames(machine: &Machine, region: u64) -> Vec<u64> {
    match machine.space.mapping(region) {
        Ok(RegionMapping::HugeLeaf(pde)) => {
            (0..ENTRIES_PER_HUGE).map(|i| pde.frame.0 + i).collect()
        }
        Ok(RegionMapping::BaseTable(table)) => table
            .iter()
            .filter(|p| p.present)
            .map(|p| p.frame.0)
            .collect(),
        _ => Vec::new(),
    }
}

fn gfn_host_frame(machine: &Machine, gfn: u64) -> Option<u64> {
    machine
        .space
        .translate(gfn * BASE_PAGE_BYTES)
        .ok()
        .map(|t| t.hpa / BASE_PAGE_BYTES)
}

fn huge_ratio_in_fast(machine: &Machine, placement: &Placement) -> f64 {
    let fast_used = placement.fast_used();
    if fast_used == 0 {
        return 0.0;
    }
    let mut huge_bytes = 0u64;
    for (_, mapping) in machine.space.regions() {
        if let RegionMapping::HugeLeaf(pde) = mapping {
            let in_fast = (0..ENTRIES_PER_HUGE)
                .filter(|i| placement.tier_of(pde.frame.0 + i) == Tier::Fast)
                .count() as u64;
            huge_bytes += in_fast * BASE_PAGE_BYTES;
        }
    }
    huge_bytes as f64 / fast_used as f64
}
