//! The experiment registry: each experiment builds seeded machines and
//! workloads, runs the relevant strategies, and emits CSV tables.

use std::collections::BTreeSet;
use std::path::Path;

use thiserror::Error;

use super::config::{ConfigError, Resolved, EXPERIMENT_NAMES, MIB};
use super::reports::{write_reports, Csv, RunOutputs};
use crate::content::{ContentStore, FrameContent};
use crate::csv_row;
use crate::ept::{FrameNumber, RegionKind};
use crate::mmu::{AccessEvent, AccessKind, Machine};
use crate::monitor::{
    baseline_monitor, classify_hot_cold, compute_psr, schedule_mutations, stage1_scan,
    stage2_fine_monitor, AccessHistogram, FineGrainReport, HostMutation, ScanConfig, ScanMode,
};
use crate::policy::PolicyConfig;
use crate::remap::{collapse_huge_region, split_huge_page, SplitMode};
use crate::rng::SimRng;
use crate::share::{dedup_oracle, run_share_epoch, SharePool, ShareStats, ShareStrategy};
use crate::tmm::{
    run_tmm_epoch, EpochOptions, EpochReport, Placement, TierSpec, TmmStrategy,
};
use crate::workload::{ccdf, eligible_offsets_for_psr, generate_trace, Pattern, Trace, TraceSpec};
use crate::{BASE_PAGE_BYTES, ENTRIES_PER_HUGE, HUGE_PAGE_BYTES};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("writing reports: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Sim(String),
}

impl From<crate::monitor::MonitorError> for HarnessError {
    fn from(e: crate::monitor::MonitorError) -> Self {
        HarnessError::Sim(e.to_string())
    }
}

impl From<crate::tmm::TmmError> for HarnessError {
    fn from(e: crate::tmm::TmmError) -> Self {
        HarnessError::Sim(e.to_string())
    }
}

impl From<crate::share::ShareError> for HarnessError {
    fn from(e: crate::share::ShareError) -> Self {
        HarnessError::Sim(e.to_string())
    }
}

impl From<crate::workload::WorkloadError> for HarnessError {
    fn from(e: crate::workload::WorkloadError) -> Self {
        HarnessError::Sim(e.to_string())
    }
}

pub fn experiment_names() -> &'static [&'static str] {
    &EXPERIMENT_NAMES
}

/// Run one experiment and write its reports under `out_dir`.
pub fn run_experiment(resolved: &Resolved, out_dir: &Path) -> Result<RunOutputs, HarnessError> {
    let tables = match resolved.name.as_str() {
        "fig2-ccdf" => fig2_ccdf(resolved)?,
        "micro-tmm" => micro_tmm(resolved)?,
        "micro-share" => micro_share(resolved)?,
        "monitor-accuracy" => monitor_accuracy(resolved)?,
        "vmexit-table" => vmexit_table(resolved)?,
        "dynamic-vs-fixed" => dynamic_vs_fixed(resolved)?,
        other => return Err(ConfigError::UnknownExperiment(other.to_string()).into()),
    };
    Ok(write_reports(resolved, out_dir, &tables)?)
}

fn region_count(wss: u64) -> u64 {
    wss / HUGE_PAGE_BYTES
}

/// Two-stage monitoring over windows 0 and 1 of a trace, returning the
/// stage-1 histogram, the fine reports, and a base-granularity histogram
/// derived from them (accessed offsets at inherited frequency).
pub fn two_stage_fine_histogram(
    machine: &mut Machine,
    trace: &Trace,
    scan: &ScanConfig,
    mutations: &[HostMutation],
) -> Result<(AccessHistogram, Vec<FineGrainReport>, AccessHistogram), HarnessError> {
    let s1 = trace.window(0, scan.window_ticks);
    let s2 = trace.window(1, scan.window_ticks);
    let stage1 = stage1_scan(machine, s1, scan)?;
    let partition = classify_hot_cold(&stage1, scan.hot_threshold);
    let hot: Vec<u64> = partition.hot_regions.iter().copied().collect();
    let reports = stage2_fine_monitor(machine, &hot, s2, &stage1, mutations)?;

    let mut fine = AccessHistogram::default();
    for (&region, &freq) in &stage1.regions {
        if !partition.hot_regions.contains(&region) {
            fine.regions.insert(region, freq);
        }
    }
    for (&gfn, &freq) in &stage1.frames {
        fine.frames.insert(gfn, freq);
    }
    for report in &reports {
        if !report.valid {
            // Invalidated fine data: fall back to the coarse view.
            fine.regions.insert(report.region, report.inherited_frequency);
            continue;
        }
        for slot in 0..ENTRIES_PER_HUGE {
            let gfn = report.region * ENTRIES_PER_HUGE + slot;
            let freq = if report.accessed_bitmap.test(slot as usize) {
                report.inherited_frequency
            } else {
                0
            };
            fine.frames.insert(gfn, freq);
        }
    }
    Ok((stage1, reports, fine))
}

// ---------------------------------------------------------------------------
// fig2-ccdf

fn fig2_ccdf(r: &Resolved) -> Result<Vec<Csv>, HarnessError> {
    let trace = generate_trace(&r.trace)?;
    let window = trace.window(0, r.scan.window_ticks);
    let mut table = Csv::new("ccdf.csv", "monitor,x,y");

    let mut contents = ContentStore::default();
    let mut huge = r.build_machine(r.trace.wss, RegionKind::Huge, 0);
    let huge_cfg = ScanConfig {
        mode: ScanMode::HugeScan,
        ..r.scan
    };
    let huge_hist = baseline_monitor(&mut huge, window, &huge_cfg, &mut contents, r.seed)?.histogram;

    let mut base = r.build_machine(r.trace.wss, RegionKind::Base, 0);
    let base_cfg = ScanConfig {
        mode: ScanMode::BaseScan,
        ..r.scan
    };
    let base_hist = baseline_monitor(&mut base, window, &base_cfg, &mut contents, r.seed)?.histogram;

    let mut two_stage = r.build_machine(r.trace.wss, RegionKind::Huge, 0);
    let (_, _, fine) = two_stage_fine_histogram(&mut two_stage, &trace, &r.scan, &[])?;

    for (name, hist) in [
        ("huge-scan", &huge_hist),
        ("base-scan", &base_hist),
        ("two-stage", &fine),
    ] {
        for (x, y) in ccdf(hist, 100)? {
            csv_row!(table, "{name},{x},{y}");
        }
    }
    Ok(vec![table])
}

// ---------------------------------------------------------------------------
// micro-tmm

/// Hot-set size (in regions) whose accessed bytes best match the target
/// under the given skewed fraction.
pub fn hot_set_regions(total_regions: u64, hot_bytes: u64, ubf: f64, target_psr: f64) -> u64 {
    let eligible = eligible_offsets_for_psr(target_psr);
    (1..=total_regions)
        .min_by_key(|&h| {
            let skewed = (ubf * h as f64).round() as u64;
            let accessed = (h - skewed) * HUGE_PAGE_BYTES + skewed * eligible * BASE_PAGE_BYTES;
            accessed.abs_diff(hot_bytes)
        })
        .unwrap_or(1)
}

pub struct MicroTmmPoint {
    pub unbalanced_pct: u8,
    pub report: EpochReport,
}

pub fn micro_tmm_points(r: &Resolved) -> Result<Vec<MicroTmmPoint>, HarnessError> {
    let regions = region_count(r.trace.wss);
    let hot_bytes = match r.trace.pattern {
        Pattern::Hotspot { hot_fraction, .. } => (hot_fraction * r.trace.wss as f64).round() as u64,
        _ => r.trace.wss,
    };
    let tier = TierSpec {
        fast_capacity: r.fast_capacity,
        slow_capacity: r.slow_capacity.unwrap_or(r.trace.wss),
    };
    let policy = PolicyConfig {
        f_use: r.f_use.unwrap_or(r.fast_capacity as f64 / r.trace.wss as f64),
        psr_lower_bound: r.psr_lower_bound,
        s_tot: r.trace.wss,
        ..PolicyConfig::default()
    };

    let mut points = Vec::new();
    for &pct in &r.unbalanced_pcts {
        let ubf = f64::from(pct) / 100.0;
        let hot_regions = hot_set_regions(regions, hot_bytes, ubf, r.trace.target_psr);
        let spec = TraceSpec {
            pattern: Pattern::Hotspot {
                hot_fraction: hot_regions as f64 / regions as f64,
                hot_op_fraction: 1.0,
            },
            unbalanced_fraction: ubf,
            ..r.trace
        };
        let trace = generate_trace(&spec)?;
        for strategy in [TmmStrategy::Fhpm, TmmStrategy::HmmVHuge, TmmStrategy::HmmVBase] {
            let kind = match strategy {
                TmmStrategy::HmmVBase => RegionKind::Base,
                _ => RegionKind::Huge,
            };
            let mut machine = r.build_machine(r.trace.wss, kind, 0);
            let mut placement = Placement::first_touch(&machine, tier.fast_capacity);
            let mut contents = ContentStore::default();
            let report = run_tmm_epoch(
                &mut machine,
                &mut contents,
                &trace,
                strategy,
                &tier,
                &mut placement,
                &r.scan,
                &policy,
                &r.costs,
                &EpochOptions::default(),
            )?;
            points.push(MicroTmmPoint {
                unbalanced_pct: pct,
                report,
            });
        }
    }
    Ok(points)
}

fn strategy_name(s: TmmStrategy) -> &'static str {
    match s {
        TmmStrategy::Fhpm => "fhpm",
        TmmStrategy::HmmVHuge => "hmm-v-huge",
        TmmStrategy::HmmVBase => "hmm-v-base",
    }
}

fn micro_tmm(r: &Resolved) -> Result<Vec<Csv>, HarnessError> {
    let points = micro_tmm_points(r)?;
    let mut epochs = Csv::new(
        "tmm_epochs.csv",
        "scenario,strategy,fast_ratio,cost,fast_accessed_bytes,huge_ratio_in_fast,fast_used,migrated_bytes",
    );
    let mut plans = Csv::new("plan_log.csv", "scenario,action,region,psr,hp_before,hp_after");
    for p in &points {
        let rep = &p.report;
        csv_row!(
            epochs,
            "ubf={},{},{},{},{},{},{},{}",
            p.unbalanced_pct,
            strategy_name(rep.strategy),
            rep.fast_ratio,
            rep.cost,
            rep.fast_accessed_bytes,
            rep.huge_ratio_in_fast,
            rep.fast_used,
            rep.migrated_bytes
        );
        for entry in &rep.plan.demote {
            csv_row!(
                plans,
                "ubf={},demote,{},{},{},{}",
                p.unbalanced_pct,
                entry.region,
                entry.psr.as_f64(),
                rep.plan.hp_before,
                rep.plan.hp_after
            );
        }
        for entry in &rep.plan.promote {
            csv_row!(
                plans,
                "ubf={},promote,{},{},{},{}",
                p.unbalanced_pct,
                entry.region,
                entry.psr.as_f64(),
                rep.plan.hp_before,
                rep.plan.hp_after
            );
        }
    }
    Ok(vec![epochs, plans])
}

// ---------------------------------------------------------------------------
// micro-share

const VM_HOST_STRIDE: u64 = 1 << 32;

/// The sharing micro scenario: per VM one balanced-hot region quarter, a
/// skewed-hot half, and a cold quarter. Both VMs hold the same dataset at
/// per-VM permuted positions; duplicates follow the data's role (hot data is
/// hot in both VMs) and zero frames sit in the untouched parts of skewed
/// regions.
pub struct ShareScenario {
    pub traces: Vec<Trace>,
    pub regions_per_vm: u64,
    pub vm_count: usize,
    contents: ContentStore,
    resolved_tlb: (usize, usize),
    walk_refs: (u32, u32),
    wss: u64,
}

impl ShareScenario {
    pub fn fresh_pool(&self) -> SharePool {
        let layout = vec![RegionKind::Huge; self.regions_per_vm as usize];
        let machines: Vec<Machine> = (0..self.vm_count)
            .map(|vm| {
                let mut space = crate::ept::EptSpace::build_with(
                    self.wss,
                    &layout,
                    vm as u64 * VM_HOST_STRIDE,
                )
                .expect("layout");
                space.walk_refs_huge = self.walk_refs.0;
                space.walk_refs_base = self.walk_refs.1;
                Machine::with_tlb(space, crate::mmu::Tlb::new(self.resolved_tlb.0, self.resolved_tlb.1))
            })
            .collect();
        SharePool::new(machines, self.contents.clone())
    }
}

pub fn build_share_scenario(r: &Resolved) -> Result<ShareScenario, HarnessError> {
    let vm_count = r.contents.vm_count.max(2) as usize;
    let regions = region_count(r.trace.wss);
    let balanced = (regions / 4).max(1);
    let cold = (regions / 4).max(1);
    let skewed = regions.saturating_sub(balanced + cold).max(1);
    let hot_regions: Vec<u64> = (0..balanced + skewed).collect();
    let skewed_regions: Vec<u64> = (balanced..balanced + skewed).collect();
    let cold_regions: Vec<u64> = (balanced + skewed..regions).collect();
    let eligible_n = eligible_offsets_for_psr(r.trace.target_psr);
    let root = SimRng::new(r.seed).split("share-scenario");

    // Eligible (touched) offsets per skewed region, distinct per VM.
    let mut eligible: Vec<Vec<Vec<u64>>> = Vec::new();
    for vm in 0..vm_count {
        let mut per_region = Vec::new();
        for &region in &skewed_regions {
            per_region.push(
                root.split_index("eligible", (vm as u64) << 32 | region)
                    .sample_distinct(ENTRIES_PER_HUGE, eligible_n),
            );
        }
        eligible.push(per_region);
    }

    // Traces: every event lands in the hot regions; skewed regions expose
    // only their eligible offsets.
    let mut traces = Vec::new();
    let events = r.trace.events;
    for (vm, vm_eligible) in eligible.iter().enumerate() {
        let mut ops = root.split_index("ops", vm as u64);
        let mut trace_events = Vec::with_capacity(events as usize);
        for tick in 0..events {
            let region = hot_regions[ops.next_below(hot_regions.len() as u64) as usize];
            let offset = match skewed_regions.iter().position(|&sr| sr == region) {
                Some(i) => {
                    let offsets = &vm_eligible[i];
                    offsets[ops.next_below(offsets.len() as u64) as usize]
                }
                None => ops.next_below(ENTRIES_PER_HUGE),
            };
            let kind = if ops.next_bool(r.trace.read_fraction) {
                AccessKind::Read
            } else {
                AccessKind::Write
            };
            trace_events.push(AccessEvent {
                gpa: (region * ENTRIES_PER_HUGE + offset) * BASE_PAGE_BYTES,
                kind,
                tick,
            });
        }
        traces.push(Trace {
            events: trace_events,
            spec: r.trace,
            focused_regions: hot_regions.clone(),
            unbalanced: skewed_regions
                .iter()
                .enumerate()
                .map(|(i, &sr)| (sr, vm_eligible[i].clone()))
                .collect(),
        });
    }

    // Contents: one dataset shared by all VMs. Hot data lives in hot
    // positions of every VM, cold data in cold positions; the untouched
    // parts of skewed regions carry the zero frames (never-initialized
    // bloat) and the cold-duplicate remainder.
    let total_frames = regions * ENTRIES_PER_HUGE;
    let zero_target = (r.contents.zero_fraction * total_frames as f64).round() as u64;
    let mut contents = ContentStore::default();
    for (vm, vm_eligible) in eligible.iter().enumerate() {
        let base = vm as u64 * VM_HOST_STRIDE;
        let mut next_bal = 0u64;
        let mut next_hot = 0u64;
        let mut next_colddup = 0u64;
        let mut next_cold = 0u64;

        let place = |contents: &mut ContentStore, gfn: u64, content: FrameContent| {
            contents.set(FrameNumber(base + gfn), content);
        };

        for &region in &hot_regions {
            if skewed_regions.contains(&region) {
                continue;
            }
            let mut slots: Vec<u64> = (0..ENTRIES_PER_HUGE).collect();
            shuffle(&mut slots, &mut root.split_index("bal-perm", (vm as u64) << 32 | region));
            for slot in slots {
                place(
                    &mut contents,
                    region * ENTRIES_PER_HUGE + slot,
                    FrameContent::unique(id_of(&root, "bal-data", next_bal)),
                );
                next_bal += 1;
            }
        }
        let mut zeros_left = zero_target;
        for (i, &region) in skewed_regions.iter().enumerate() {
            let touched: BTreeSet<u64> = vm_eligible[i].iter().copied().collect();
            for &slot in &vm_eligible[i] {
                place(
                    &mut contents,
                    region * ENTRIES_PER_HUGE + slot,
                    FrameContent::unique(id_of(&root, "hot-data", next_hot)),
                );
                next_hot += 1;
            }
            let mut untouched: Vec<u64> = (0..ENTRIES_PER_HUGE)
                .filter(|s| !touched.contains(s))
                .collect();
            shuffle(
                &mut untouched,
                &mut root.split_index("skew-perm", (vm as u64) << 32 | region),
            );
            for slot in untouched {
                let content = if zeros_left > 0 {
                    zeros_left -= 1;
                    FrameContent::zero()
                } else {
                    let c = FrameContent::unique(id_of(&root, "cold-dup", next_colddup));
                    next_colddup += 1;
                    c
                };
                place(&mut contents, region * ENTRIES_PER_HUGE + slot, content);
            }
        }
        for &region in &cold_regions {
            let mut slots: Vec<u64> = (0..ENTRIES_PER_HUGE).collect();
            shuffle(&mut slots, &mut root.split_index("cold-perm", (vm as u64) << 32 | region));
            for slot in slots {
                place(
                    &mut contents,
                    region * ENTRIES_PER_HUGE + slot,
                    FrameContent::unique(id_of(&root, "cold-data", next_cold)),
                );
                next_cold += 1;
            }
        }
    }

    Ok(ShareScenario {
        traces,
        regions_per_vm: regions,
        vm_count,
        contents,
        resolved_tlb: (r.tlb_base_entries, r.tlb_huge_entries),
        walk_refs: (r.walk_refs_huge, r.walk_refs_base),
        wss: r.trace.wss,
    })
}

fn shuffle(slots: &mut [u64], rng: &mut SimRng) {
    for i in (1..slots.len()).rev() {
        let j = rng.next_below(i as u64 + 1) as usize;
        slots.swap(i, j);
    }
}

fn id_of(root: &SimRng, label: &str, index: u64) -> u64 {
    let id = root.split_index(label, index).next_u64();
    if id == 0 {
        1
    } else {
        id
    }
}

pub const SHARE_STRATEGIES: [ShareStrategy; 5] = [
    ShareStrategy::HugePageShare,
    ShareStrategy::LinuxKsm,
    ShareStrategy::Ingens,
    ShareStrategy::ZeroScan,
    ShareStrategy::Fhpm,
];

pub fn share_strategy_name(s: ShareStrategy) -> &'static str {
    match s {
        ShareStrategy::Fhpm => "fhpm-share",
        ShareStrategy::LinuxKsm => "linux-ksm",
        ShareStrategy::HugePageShare => "huge-page-share",
        ShareStrategy::Ingens => "ingens",
        ShareStrategy::ZeroScan => "zero-scan",
    }
}

pub struct MicroShareResult {
    pub strategy: ShareStrategy,
    pub stats: ShareStats,
    pub oracle: u64,
    pub total_bytes: u64,
}

pub fn micro_share_results(r: &Resolved) -> Result<Vec<MicroShareResult>, HarnessError> {
    let scenario = build_share_scenario(r)?;
    let policy = PolicyConfig {
        f_use: r.f_use.unwrap_or(0.5),
        psr_lower_bound: r.psr_lower_bound,
        ..PolicyConfig::default()
    };
    let mut results = Vec::new();
    for strategy in SHARE_STRATEGIES {
        let mut pool = scenario.fresh_pool();
        let oracle = dedup_oracle(&pool);
        let total_bytes: u64 = pool.machines.iter().map(|m| m.space.total_bytes()).sum();
        let stats = run_share_epoch(
            &mut pool,
            &scenario.traces,
            strategy,
            &r.scan,
            &policy,
            &r.costs,
            8,
        )?;
        results.push(MicroShareResult {
            strategy,
            stats,
            oracle,
            total_bytes,
        });
    }
    Ok(results)
}

fn micro_share(r: &Resolved) -> Result<Vec<Csv>, HarnessError> {
    let results = micro_share_results(r)?;
    let mut table = Csv::new(
        "share_stats.csv",
        "strategy,bytes_saved,saved_pct,oracle_ratio,vm,huge_ratio,est_cost",
    );
    for result in &results {
        let saved_pct = 100.0 * result.stats.bytes_saved as f64 / result.total_bytes as f64;
        let oracle_ratio = if result.oracle == 0 {
            0.0
        } else {
            result.stats.bytes_saved as f64 / result.oracle as f64
        };
        for (vm, report) in result.stats.per_vm.iter().enumerate() {
            csv_row!(
                table,
                "{},{},{saved_pct},{oracle_ratio},{vm},{},{}",
                share_strategy_name(result.strategy),
                result.stats.bytes_saved,
                report.huge_ratio,
                report.est_cost
            );
        }
    }
    Ok(vec![table])
}

// ---------------------------------------------------------------------------
// monitor-accuracy

const BUCKETS: [(u32, u32); 5] = [(0, 20), (20, 40), (40, 60), (60, 80), (80, 100)];

/// Bytes per normalized-frequency bucket, regions weighted 2 MiB and frames
/// 4 KiB. The last bucket is closed at 100.
pub fn frequency_buckets(hist: &AccessHistogram, intervals: u64) -> [u64; 5] {
    let mut out = [0u64; 5];
    let mut add = |freq: u32, bytes: u64| {
        let norm = if intervals == 0 {
            0.0
        } else {
            f64::from(freq) * 100.0 / intervals as f64
        };
        let idx = BUCKETS
            .iter()
            .position(|&(lo, hi)| norm >= f64::from(lo) && (norm < f64::from(hi) || hi == 100))
            .unwrap_or(4);
        out[idx] += bytes;
    };
    for &freq in hist.regions.values() {
        add(freq, HUGE_PAGE_BYTES);
    }
    for &freq in hist.frames.values() {
        add(freq, BASE_PAGE_BYTES);
    }
    out
}

pub struct MonitorAccuracyTables {
    pub buckets: Vec<(&'static str, [u64; 5])>,
    pub reports: Vec<FineGrainReport>,
    pub stage1: AccessHistogram,
}

pub fn monitor_accuracy_tables(r: &Resolved) -> Result<MonitorAccuracyTables, HarnessError> {
    let trace = generate_trace(&r.trace)?;
    let window = trace.window(0, r.scan.window_ticks);
    let intervals = r.scan.intervals();
    let contents_template = {
        let stores = crate::workload::generate_contents(&r.contents, |_| 0)?;
        stores.into_iter().next().unwrap_or_default()
    };

    let mut rows = Vec::new();
    for (name, mode, kind) in [
        ("base-scan", ScanMode::BaseScan, RegionKind::Base),
        ("huge-scan", ScanMode::HugeScan, RegionKind::Huge),
        ("split-scan", ScanMode::SplitScan, RegionKind::Huge),
        ("sampling-scan", ScanMode::SamplingScan, RegionKind::Huge),
        ("zero-scan", ScanMode::ZeroScan, RegionKind::Huge),
    ] {
        let mut machine = r.build_machine(r.trace.wss, kind, 0);
        let mut contents = contents_template.clone();
        let cfg = ScanConfig { mode, ..r.scan };
        let scan = baseline_monitor(&mut machine, window, &cfg, &mut contents, r.seed)?;
        rows.push((name, frequency_buckets(&scan.histogram, intervals)));
    }

    let mut machine = r.build_machine(r.trace.wss, RegionKind::Huge, 0);
    let mutations = plan_mutations(r, &trace)?;
    let (stage1, reports, fine) =
        two_stage_fine_histogram(&mut machine, &trace, &r.scan, &mutations)?;
    rows.push(("two-stage", frequency_buckets(&fine, intervals)));

    Ok(MonitorAccuracyTables {
        buckets: rows,
        reports,
        stage1,
    })
}

fn plan_mutations(r: &Resolved, trace: &Trace) -> Result<Vec<HostMutation>, HarnessError> {
    let count = match r.mutation_count {
        Some(count) => count,
        None if r.mutation_rate > 0.0 => SimRng::new(r.seed)
            .split("mutation-count")
            .next_poisson(r.mutation_rate),
        None => 0,
    };
    if count == 0 {
        return Ok(Vec::new());
    }
    // Targets are the regions the fine stage will monitor: the hot set.
    let mut probe = r.build_machine(r.trace.wss, RegionKind::Huge, 0);
    let s1 = trace.window(0, r.scan.window_ticks);
    let hist = stage1_scan(&mut probe, s1, &r.scan)?;
    let hot: Vec<u64> = classify_hot_cold(&hist, r.scan.hot_threshold)
        .hot_regions
        .into_iter()
        .collect();
    Ok(schedule_mutations(
        count,
        &hot,
        r.scan.window_ticks,
        r.scan.window_ticks,
        r.seed,
    ))
}

fn monitor_accuracy(r: &Resolved) -> Result<Vec<Csv>, HarnessError> {
    let tables = monitor_accuracy_tables(r)?;
    let mut buckets = Csv::new("monitor_accuracy.csv", "monitor,bucket_lo,bucket_hi,bytes");
    for (name, row) in &tables.buckets {
        for (i, &(lo, hi)) in BUCKETS.iter().enumerate() {
            csv_row!(buckets, "{name},{lo},{hi},{}", row[i]);
        }
    }
    let mut fine = Csv::new("fine_reports.csv", "region_id,frequency,n_s,psr,valid");
    for report in &tables.reports {
        let psr = compute_psr(report)
            .map(|p| p.psr.as_f64())
            .unwrap_or(0.0);
        csv_row!(
            fine,
            "{},{},{},{psr},{}",
            report.region,
            report.inherited_frequency,
            report.n_s(),
            report.valid
        );
    }
    Ok(vec![buckets, fine])
}

// ---------------------------------------------------------------------------
// vmexit-table

pub struct VmexitRow {
    pub wss: u64,
    pub mode: SplitMode,
    pub splits: u64,
    pub collapses: u64,
    pub split_exits: u64,
    pub collapse_exits: u64,
    pub entries_written: u64,
}

pub fn vmexit_rows(r: &Resolved) -> Result<Vec<VmexitRow>, HarnessError> {
    let mut rows = Vec::new();
    for &wss_mib in &r.wss_mib_sweep {
        let wss = wss_mib * MIB;
        for mode in [SplitMode::LinuxLazy, SplitMode::VmFriendly] {
            let mut machine = r.build_machine(wss, RegionKind::Huge, 0);
            let mut contents = ContentStore::default();
            let spec = TraceSpec {
                wss,
                pattern: Pattern::Sequential,
                read_fraction: 1.0,
                unbalanced_fraction: 0.0,
                events: wss / BASE_PAGE_BYTES,
                seed: r.seed,
                ..r.trace
            };
            let sweep = generate_trace(&spec)?;

            for region in 0..machine.space.region_count() {
                let mut stats = machine.stats;
                split_huge_page(&mut machine.space, &mut machine.tlb, region, mode, &mut stats)
                    .map_err(|e| HarnessError::Sim(e.to_string()))?;
                machine.stats = stats;
            }
            machine.replay(&sweep.events);
            let split_exits = machine.stats.vm_exits_from_lazy_refill;

            for region in 0..machine.space.region_count() {
                let mut stats = machine.stats;
                collapse_huge_region(
                    &mut machine.space,
                    &mut machine.tlb,
                    region,
                    mode,
                    &mut stats,
                    &mut contents,
                    |_| false,
                )
                .map_err(|e| HarnessError::Sim(e.to_string()))?;
                machine.stats = stats;
            }
            machine.replay(&sweep.events);
            let collapse_exits = machine.stats.vm_exits_from_lazy_refill - split_exits;

            rows.push(VmexitRow {
                wss,
                mode,
                splits: machine.stats.splits,
                collapses: machine.stats.collapses,
                split_exits,
                collapse_exits,
                entries_written: machine.stats.ept_entries_written,
            });
        }
    }
    Ok(rows)
}

fn vmexit_table(r: &Resolved) -> Result<Vec<Csv>, HarnessError> {
    let rows = vmexit_rows(r)?;
    let mut table = Csv::new(
        "vmexits.csv",
        "wss_bytes,mode,splits,collapses,split_exits,collapse_exits,total_exits,entries_written",
    );
    for row in &rows {
        let mode = match row.mode {
            SplitMode::LinuxLazy => "linux-lazy",
            SplitMode::VmFriendly => "vm-friendly",
        };
        csv_row!(
            table,
            "{},{mode},{},{},{},{},{},{}",
            row.wss,
            row.splits,
            row.collapses,
            row.split_exits,
            row.collapse_exits,
            row.split_exits + row.collapse_exits,
            row.entries_written
        );
    }
    Ok(vec![table])
}

// ---------------------------------------------------------------------------
// dynamic-vs-fixed

pub struct PolicyPoint {
    pub fast_mib: u64,
    pub policy: &'static str,
    pub threshold: Option<u16>,
    pub report: EpochReport,
}

pub fn dynamic_vs_fixed_points(r: &Resolved) -> Result<Vec<PolicyPoint>, HarnessError> {
    let trace = generate_trace(&r.trace)?;
    let mut points = Vec::new();
    for &fast_mib in &r.fast_mib_sweep {
        let tier = TierSpec {
            fast_capacity: fast_mib * MIB,
            slow_capacity: r.slow_capacity.unwrap_or(r.trace.wss),
        };
        let mut runs: Vec<(&'static str, Option<u16>)> = vec![("dynamic", None)];
        for &t in &r.fixed_thresholds {
            let name: &'static str = match t {
                10 => "fixed-10",
                256 => "fixed-256",
                _ => "fixed",
            };
            runs.push((name, Some(t)));
        }
        for (policy_name, threshold) in runs {
            let mut machine = r.build_machine(r.trace.wss, RegionKind::Huge, 0);
            let mut placement = Placement::first_touch(&machine, tier.fast_capacity);
            let mut contents = ContentStore::default();
            let policy = PolicyConfig {
                f_use: r
                    .f_use
                    .unwrap_or(tier.fast_capacity as f64 / r.trace.wss as f64),
                psr_lower_bound: r.psr_lower_bound,
                s_tot: r.trace.wss,
                ..PolicyConfig::default()
            };
            let options = EpochOptions {
                fixed_threshold: threshold,
                ..EpochOptions::default()
            };
            let report = run_tmm_epoch(
                &mut machine,
                &mut contents,
                &trace,
                TmmStrategy::Fhpm,
                &tier,
                &mut placement,
                &r.scan,
                &policy,
                &r.costs,
                &options,
            )?;
            points.push(PolicyPoint {
                fast_mib,
                policy: policy_name,
                threshold,
                report,
            });
        }
    }
    Ok(points)
}

fn dynamic_vs_fixed(r: &Resolved) -> Result<Vec<Csv>, HarnessError> {
    let points = dynamic_vs_fixed_points(r)?;
    let mut epochs = Csv::new(
        "tmm_epochs.csv",
        "scenario,strategy,fast_ratio,cost,fast_accessed_bytes,huge_ratio_in_fast,fast_used,migrated_bytes",
    );
    let mut plans = Csv::new("plan_log.csv", "scenario,action,region,psr,hp_before,hp_after");
    for p in &points {
        csv_row!(
            epochs,
            "fast={}mib,{},{},{},{},{},{},{}",
            p.fast_mib,
            p.policy,
            p.report.fast_ratio,
            p.report.cost,
            p.report.fast_accessed_bytes,
            p.report.huge_ratio_in_fast,
            p.report.fast_used,
            p.report.migrated_bytes
        );
        for entry in &p.report.plan.demote {
            csv_row!(
                plans,
                "fast={}mib;policy={},demote,{},{},{},{}",
                p.fast_mib,
                p.policy,
                entry.region,
                entry.psr.as_f64(),
                p.report.plan.hp_before,
                p.report.plan.hp_after
            );
        }
    }
    Ok(vec![epochs, plans])
}
