//! Two-stage access monitoring. Stage 1 scans every mapping at its natural
//! granularity, clearing and collecting A/D bits once per interval to build
//! a frequency histogram. Stage 2 redirects the hot huge pages to companion
//! tables for one extended window and reads back per-base-region bitmaps.
//! The same machinery drives the split-scan, sampling-scan, zero-scan,
//! huge-scan and base-scan comparison baselines.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::content::ContentStore;
use crate::ept::{FrameNumber, RegionBitmap, RegionMapping, ScanGranularity};
use crate::mmu::{AccessEvent, Machine};
use crate::policy::Psr;
use crate::remap::{collapse_huge_region, split_huge_page, SplitMode};
use crate::rng::SimRng;
use crate::{BASE_PAGE_BYTES, ENTRIES_PER_HUGE, HUGE_PAGE_BYTES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScanMode {
    TwoStage,
    SplitScan,
    SamplingScan,
    ZeroScan,
    HugeScan,
    BaseScan,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScanConfig {
    pub window_ticks: u64,
    pub interval_ticks: u64,
    /// Intervals a region must be seen in to classify as hot.
    pub hot_threshold: u32,
    pub sampling_fraction: f64,
    pub mode: ScanMode,
}

impl Default for ScanConfig {
    fn default() -> Self {
        ScanConfig {
            window_ticks: 20_480,
            interval_ticks: 2_048,
            hot_threshold: 1,
            sampling_fraction: 0.05,
            mode: ScanMode::TwoStage,
        }
    }
}

impl ScanConfig {
    pub fn intervals(&self) -> u64 {
        self.window_ticks / self.interval_ticks
    }

    pub fn validate(&self) -> Result<(), MonitorError> {
        if self.window_ticks == 0
            || self.interval_ticks == 0
            || !self.window_ticks.is_multiple_of(self.interval_ticks)
        {
            return Err(MonitorError::BadIntervals {
                window: self.window_ticks,
                interval: self.interval_ticks,
            });
        }
        if self.hot_threshold == 0 {
            return Err(MonitorError::ZeroThreshold);
        }
        Ok(())
    }
}

/// Interval counts per huge region and per base frame.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AccessHistogram {
    pub regions: BTreeMap<u64, u32>,
    pub frames: BTreeMap<u64, u32>,
}

impl AccessHistogram {
    /// Bytes whose frequency meets the threshold, regions weighted 2 MiB and
    /// frames 4 KiB.
    pub fn hot_bytes(&self, threshold: u32) -> u64 {
        let hot_regions = self.regions.values().filter(|f| **f >= threshold).count() as u64;
        let hot_frames = self.frames.values().filter(|f| **f >= threshold).count() as u64;
        hot_regions * HUGE_PAGE_BYTES + hot_frames * BASE_PAGE_BYTES
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty() && self.frames.is_empty()
    }
}

/// Stage-2 result for one monitored huge region.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FineGrainReport {
    pub region: u64,
    pub accessed_bitmap: RegionBitmap,
    pub dirty_bitmap: RegionBitmap,
    /// Stage-1 interval count of the owning huge page; base regions inherit
    /// it rather than being re-counted over multiple periods.
    pub inherited_frequency: u32,
    /// False when a host mutation invalidated the companion mid-window.
    pub valid: bool,
}

impl FineGrainReport {
    pub fn n_s(&self) -> u32 {
        self.accessed_bitmap.count_ones()
    }

    pub fn n_h(&self) -> u32 {
        ENTRIES_PER_HUGE as u32
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PsrRecord {
    pub region: u64,
    pub psr: Psr,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MonitorError {
    #[error("window of {window} ticks cannot be divided into {interval}-tick intervals")]
    BadIntervals { window: u64, interval: u64 },
    #[error("hot threshold must be at least 1")]
    ZeroThreshold,
    #[error("empty trace window")]
    EmptyWindow,
    #[error("region {0} is not a huge leaf")]
    RegionNotHuge(u64),
    #[error("report for region {0} was invalidated by a host mutation")]
    InvalidReport(u64),
    #[error("scan mode {0:?} not valid for this operation")]
    ModeMismatch(ScanMode),
}

/// A host mutation injected at a tick during monitoring.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HostMutation {
    pub tick: u64,
    pub region: u64,
}

/// Spread `count` mutations over the window, targeting distinct monitored
/// regions chosen by seed. Fewer mutations than requested are produced only
/// when there are not enough distinct targets.
pub fn schedule_mutations(
    count: u64,
    targets: &[u64],
    window_start: u64,
    window_ticks: u64,
    seed: u64,
) -> Vec<HostMutation> {
    if count == 0 || targets.is_empty() {
        return Vec::new();
    }
    let mut rng = SimRng::new(seed).split("host-mutations");
    let take = count.min(targets.len() as u64);
    let picks = rng.sample_distinct(targets.len() as u64, take);
    picks
        .into_iter()
        .enumerate()
        .map(|(i, idx)| HostMutation {
            tick: window_start + (i as u64 + 1) * window_ticks / (take + 1),
            region: targets[idx as usize],
        })
        .collect()
}

fn replay_interval(machine: &mut Machine, events: &[AccessEvent]) {
    for event in events {
        machine.access(event);
    }
}

fn tally(histogram: &mut AccessHistogram, snap: &crate::ept::AdSnapshot) {
    for (&region, &(accessed, _)) in &snap.regions {
        let slot = histogram.regions.entry(region).or_insert(0);
        if accessed {
            *slot += 1;
        }
    }
    for (&gfn, &(accessed, _)) in &snap.frames {
        let slot = histogram.frames.entry(gfn).or_insert(0);
        if accessed {
            *slot += 1;
        }
    }
}

/// Stage 1: per interval, clear A/D, replay, then collect. The histogram
/// counts the intervals in which each region or frame was seen accessed and
/// lists every scanned entry, touched or not.
pub fn stage1_scan(
    machine: &mut Machine,
    window: &[AccessEvent],
    config: &ScanConfig,
) -> Result<AccessHistogram, MonitorError> {
    stage1_scan_at(machine, window, config, ScanGranularity::All)
}

fn stage1_scan_at(
    machine: &mut Machine,
    window: &[AccessEvent],
    config: &ScanConfig,
    granularity: ScanGranularity,
) -> Result<AccessHistogram, MonitorError> {
    config.validate()?;
    if window.is_empty() {
        return Err(MonitorError::EmptyWindow);
    }
    let start = window[0].tick;
    let mut histogram = AccessHistogram::default();
    let mut cursor = 0usize;
    for interval in 0..config.intervals() {
        machine.clear_ad_and_flush(granularity);
        let end_tick = start + (interval + 1) * config.interval_ticks;
        let begin = cursor;
        while cursor < window.len() && window[cursor].tick < end_tick {
            cursor += 1;
        }
        replay_interval(machine, &window[begin..cursor]);
        let snap = machine.clear_ad_and_flush(granularity);
        tally(&mut histogram, &snap);
    }
    Ok(histogram)
}

/// Total hot/cold partition of a histogram at a threshold.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct HotColdPartition {
    pub hot_regions: BTreeSet<u64>,
    pub cold_regions: BTreeSet<u64>,
    pub hot_frames: BTreeSet<u64>,
    pub cold_frames: BTreeSet<u64>,
}

impl HotColdPartition {
    pub fn hot_bytes(&self) -> u64 {
        self.hot_regions.len() as u64 * HUGE_PAGE_BYTES
            + self.hot_frames.len() as u64 * BASE_PAGE_BYTES
    }
}

pub fn classify_hot_cold(histogram: &AccessHistogram, hot_threshold: u32) -> HotColdPartition {
    let mut partition = HotColdPartition::default();
    for (&region, &freq) in &histogram.regions {
        if freq >= hot_threshold {
            partition.hot_regions.insert(region);
        } else {
            partition.cold_regions.insert(region);
        }
    }
    for (&gfn, &freq) in &histogram.frames {
        if freq >= hot_threshold {
            partition.hot_frames.insert(gfn);
        } else {
            partition.cold_frames.insert(gfn);
        }
    }
    partition
}

/// Stage 2: redirect each hot huge region to a companion, replay one
/// extended window with host mutations interleaved by tick, then restore and
/// read the per-frame bitmaps. Regions hit by a mutation come back invalid.
pub fn stage2_fine_monitor(
    machine: &mut Machine,
    hot_regions: &[u64],
    window: &[AccessEvent],
    stage1: &AccessHistogram,
    mutations: &[HostMutation],
) -> Result<Vec<FineGrainReport>, MonitorError> {
    for &region in hot_regions {
        match machine.space.mapping(region) {
            Ok(RegionMapping::HugeLeaf(pde)) if !pde.redirected => {}
            _ => return Err(MonitorError::RegionNotHuge(region)),
        }
    }
    for &region in hot_regions {
        machine.redirect_region(region).expect("checked huge leaf");
    }

    let mut conflicted = BTreeSet::new();
    let mut mutations: Vec<HostMutation> = mutations.to_vec();
    mutations.sort_by_key(|m| m.tick);
    let mut next_mutation = 0usize;
    for event in window {
        while next_mutation < mutations.len() && mutations[next_mutation].tick <= event.tick {
            let m = mutations[next_mutation];
            if machine.host_mutate(m.region).conflict {
                conflicted.insert(m.region);
            }
            next_mutation += 1;
        }
        machine.access(event);
    }
    for m in &mutations[next_mutation..] {
        if machine.host_mutate(m.region).conflict {
            conflicted.insert(m.region);
        }
    }

    let mut reports = Vec::with_capacity(hot_regions.len());
    for &region in hot_regions {
        let inherited_frequency = stage1.regions.get(&region).copied().unwrap_or(0);
        if conflicted.contains(&region) {
            reports.push(FineGrainReport {
                region,
                accessed_bitmap: RegionBitmap::default(),
                dirty_bitmap: RegionBitmap::default(),
                inherited_frequency,
                valid: false,
            });
        } else {
            let bitmap = machine.restore_region(region).expect("still redirected");
            reports.push(FineGrainReport {
                region,
                accessed_bitmap: bitmap.accessed,
                dirty_bitmap: bitmap.dirty,
                inherited_frequency,
                valid: true,
            });
        }
    }
    Ok(reports)
}

pub fn compute_psr(report: &FineGrainReport) -> Result<PsrRecord, MonitorError> {
    if !report.valid {
        return Err(MonitorError::InvalidReport(report.region));
    }
    Ok(PsrRecord {
        region: report.region,
        psr: Psr::from_ns(report.n_s() as u16),
    })
}

/// Side effects accumulated by a baseline scan.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BaselineStats {
    pub regions_split: u64,
    pub regions_collapsed: u64,
    pub lazy_refill_exits: u64,
    pub zero_frames: BTreeSet<u64>,
    pub sampled_regions: BTreeSet<u64>,
}

pub struct BaselineScan {
    pub histogram: AccessHistogram,
    pub stats: BaselineStats,
}

/// Run one of the comparison monitors over a window.
///
/// Split-scan splits every huge region through the lazy interface, scans at
/// base granularity, then collapses back; sampling-scan does the same for a
/// seeded fraction; zero-scan reports all-zero frames from the content
/// store; huge-scan and base-scan scan at a single granularity.
pub fn baseline_monitor(
    machine: &mut Machine,
    window: &[AccessEvent],
    config: &ScanConfig,
    contents: &mut ContentStore,
    seed: u64,
) -> Result<BaselineScan, MonitorError> {
    config.validate()?;
    let mut stats = BaselineStats::default();
    let histogram = match config.mode {
        ScanMode::TwoStage => return Err(MonitorError::ModeMismatch(config.mode)),
        ScanMode::HugeScan => stage1_scan_at(machine, window, config, ScanGranularity::HugeOnly)?,
        ScanMode::BaseScan => stage1_scan(machine, window, config)?,
        ScanMode::SplitScan | ScanMode::SamplingScan => {
            let huge_regions: Vec<u64> = machine
                .space
                .regions()
                .filter_map(|(r, m)| match m {
                    RegionMapping::HugeLeaf(pde) if !pde.redirected => Some(r),
                    _ => None,
                })
                .collect();
            let chosen: Vec<u64> = if config.mode == ScanMode::SplitScan {
                huge_regions
            } else {
                let count =
                    (config.sampling_fraction * huge_regions.len() as f64).round() as u64;
                let mut rng = SimRng::new(seed).split("sampling-scan");
                rng.sample_distinct(huge_regions.len() as u64, count.min(huge_regions.len() as u64))
                    .into_iter()
                    .map(|i| huge_regions[i as usize])
                    .collect()
            };
            let exits_before = machine.stats.vm_exits_from_lazy_refill;
            for &region in &chosen {
                let mut s = machine.stats;
                split_huge_page(&mut machine.space, &mut machine.tlb, region, SplitMode::LinuxLazy, &mut s)
                    .expect("huge leaf");
                machine.stats = s;
                stats.regions_split += 1;
                stats.sampled_regions.insert(region);
            }
            let histogram = stage1_scan(machine, window, config)?;
            for &region in &chosen {
                // Lazily split regions may still hold untouched entries;
                // populate them so the region can collapse back.
                for slot in 0..ENTRIES_PER_HUGE {
                    let gpa = region * HUGE_PAGE_BYTES + slot * BASE_PAGE_BYTES;
                    if machine.space.translate(gpa).is_err() {
                        machine.access(&AccessEvent {
                            gpa,
                            kind: crate::mmu::AccessKind::Read,
                            tick: window.last().map(|e| e.tick).unwrap_or(0),
                        });
                    }
                }
                let mut s = machine.stats;
                collapse_huge_region(
                    &mut machine.space,
                    &mut machine.tlb,
                    region,
                    SplitMode::LinuxLazy,
                    &mut s,
                    contents,
                    |_| false,
                )
                .expect("fully present");
                machine.stats = s;
                stats.regions_collapsed += 1;
            }
            stats.lazy_refill_exits = machine.stats.vm_exits_from_lazy_refill - exits_before;
            histogram
        }
        ScanMode::ZeroScan => {
            let mut histogram = AccessHistogram::default();
            for region in 0..machine.space.region_count() {
                for slot in 0..ENTRIES_PER_HUGE {
                    let gfn = region * ENTRIES_PER_HUGE + slot;
                    let gpa = gfn * BASE_PAGE_BYTES;
                    if let Ok(t) = machine.space.translate(gpa) {
                        let frame = FrameNumber(t.hpa / BASE_PAGE_BYTES);
                        if contents.get(frame).map(|c| c.zero).unwrap_or(false) {
                            stats.zero_frames.insert(gfn);
                        }
                    }
                }
                histogram.regions.insert(region, 0);
            }
            histogram
        }
    };
    Ok(BaselineScan { histogram, stats })
}
