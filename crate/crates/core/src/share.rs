//! Content-based page sharing across VMs: stable/unstable content trees,
//! copy-on-write breaking, deferred split/collapse, and the comparison
//! strategies (whole-huge-page sharing, unconditional base-page merging,
//! cold-only splitting, zero-page merging).

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::content::{full_equal, ContentStore, FrameContent};
use crate::ept::{FrameNumber, RegionMapping};
use crate::mmu::{access_cost, AccessEvent, AccessKind, CostModel, Machine, Tier};
use crate::monitor::{
    classify_hot_cold, compute_psr, stage1_scan, stage2_fine_monitor, ScanConfig,
};
use crate::policy::{init_hot_page_pressure, plan_demotions, PolicyConfig};
use crate::remap::{split_huge_page, SplitMode};
use crate::rng::SimRng;
use crate::workload::Trace;
use crate::{BASE_PAGE_BYTES, ENTRIES_PER_HUGE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShareStrategy {
    /// Two-stage monitoring; split cold pages and pressure-selected skewed
    /// hot pages that hold share candidates; collapse only share-free
    /// regions; stop at the usage waterline or a fixpoint.
    Fhpm,
    /// Share-first: split any huge page holding a shareable base region and
    /// merge maximally.
    LinuxKsm,
    /// Compare whole 2 MiB regions and merge equal ones; never split.
    HugePageShare,
    /// Split cold huge pages only, then merge among split memory.
    Ingens,
    /// Merge only all-zero base regions.
    ZeroScan,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ShareError {
    #[error("page sharing needs at least 2 machines, got {0}")]
    NeedTwoMachines(usize),
    #[error("expected one trace per machine ({machines}), got {traces}")]
    TraceCountMismatch { machines: usize, traces: usize },
    #[error("frame of vm {vm} gfn {gfn} is not shared")]
    FrameNotShared { vm: usize, gfn: u64 },
    #[error("monitoring failed: {0}")]
    Monitor(String),
}

/// Per-VM numbers reported by a sharing run.
#[derive(Clone, Debug, PartialEq)]
pub struct VmShareReport {
    pub huge_ratio: f64,
    pub est_cost: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ShareStats {
    pub bytes_saved: u64,
    pub shared_frames: u64,
    pub cow_breaks: u64,
    pub passes: u32,
    pub per_vm: Vec<VmShareReport>,
}

/// Stable/unstable content trees for one scan pass. Keys are 64-bit digests;
/// every hit is confirmed by full content comparison before use.
#[derive(Debug, Default)]
pub struct MergeTrees {
    stable: BTreeMap<u64, Vec<FrameNumber>>,
    unstable: BTreeMap<u64, Vec<(usize, u64, FrameNumber)>>,
}

impl MergeTrees {
    fn stable_insert(&mut self, digest: u64, frame: FrameNumber) {
        self.stable.entry(digest).or_default().push(frame);
    }

    fn stable_lookup(&self, content: &FrameContent, contents: &ContentStore) -> Option<FrameNumber> {
        self.stable.get(&content.digest).and_then(|chain| {
            chain
                .iter()
                .find(|f| contents.get(**f).map(|c| full_equal(c, content)).unwrap_or(false))
                .copied()
        })
    }

    fn unstable_lookup(
        &self,
        content: &FrameContent,
        contents: &ContentStore,
    ) -> Option<(usize, u64, FrameNumber)> {
        self.unstable.get(&content.digest).and_then(|chain| {
            chain
                .iter()
                .find(|(_, _, f)| contents.get(*f).map(|c| full_equal(c, content)).unwrap_or(false))
                .copied()
        })
    }

    fn unstable_insert(&mut self, digest: u64, vm: usize, gfn: u64, frame: FrameNumber) {
        self.unstable.entry(digest).or_default().push((vm, gfn, frame));
    }

    fn unstable_remove(&mut self, digest: u64, frame: FrameNumber) {
        if let Some(chain) = self.unstable.get_mut(&digest) {
            chain.retain(|(_, _, f)| *f != frame);
            if chain.is_empty() {
                self.unstable.remove(&digest);
            }
        }
    }
}

/// All sharing state for one run: the participating machines, the global
/// content store over their disjoint host-frame ranges, and the share
/// groups (canonical frame to sharer set).
pub struct SharePool {
    pub machines: Vec<Machine>,
    pub contents: ContentStore,
    groups: BTreeMap<FrameNumber, BTreeSet<(usize, u64)>>,
    member_of: BTreeMap<(usize, u64), FrameNumber>,
    write_seq: BTreeMap<(usize, u64), u64>,
    pub cow_breaks: u64,
}

/// Deterministic content written by the `seq`-th write of (vm, gfn).
pub fn written_content(vm: usize, gfn: u64, seq: u64) -> FrameContent {
    let id = SimRng::new(0x57A7E)
        .split_index("write", ((vm as u64) << 48) ^ gfn)
        .split_index("seq", seq)
        .next_u64();
    FrameContent::unique(if id == 0 { 1 } else { id })
}

impl SharePool {
    pub fn new(machines: Vec<Machine>, contents: ContentStore) -> Self {
        SharePool {
            machines,
            contents,
            groups: BTreeMap::new(),
            member_of: BTreeMap::new(),
            write_seq: BTreeMap::new(),
            cow_breaks: 0,
        }
    }

    pub fn bytes_saved(&self) -> u64 {
        self.groups
            .values()
            .map(|g| (g.len() as u64 - 1) * BASE_PAGE_BYTES)
            .sum()
    }

    pub fn shared_frames(&self) -> u64 {
        self.groups.values().map(|g| g.len() as u64).sum()
    }

    pub fn is_shared_frame(&self, frame: FrameNumber) -> bool {
        self.groups.contains_key(&frame)
    }

    pub fn is_shared_mapping(&self, vm: usize, gfn: u64) -> bool {
        self.member_of.contains_key(&(vm, gfn))
    }

    /// Host frame currently mapping (vm, gfn), if translated.
    pub fn frame_of(&self, vm: usize, gfn: u64) -> Option<FrameNumber> {
        self.machines[vm]
            .space
            .translate(gfn * BASE_PAGE_BYTES)
            .ok()
            .map(|t| FrameNumber(t.hpa / BASE_PAGE_BYTES))
    }

    /// Logical content read through translation.
    pub fn content_of(&self, vm: usize, gfn: u64) -> Option<FrameContent> {
        self.frame_of(vm, gfn)
            .and_then(|f| self.contents.get(f).copied())
    }

    fn base_mapped(&self, vm: usize, gfn: u64) -> bool {
        let region = gfn / ENTRIES_PER_HUGE;
        let slot = (gfn % ENTRIES_PER_HUGE) as usize;
        matches!(
            self.machines[vm].space.mapping(region),
            Ok(RegionMapping::BaseTable(t)) if t[slot].present
        )
    }

    fn huge_mapped(&self, vm: usize, region: u64) -> bool {
        matches!(
            self.machines[vm].space.mapping(region),
            Ok(RegionMapping::HugeLeaf(pde)) if !pde.redirected
        )
    }

    /// Point (vm, gfn) at the canonical frame, write-protected, and free its
    /// old private frame.
    fn attach_to_group(&mut self, vm: usize, gfn: u64, canonical: FrameNumber) {
        let region = gfn / ENTRIES_PER_HUGE;
        let slot = (gfn % ENTRIES_PER_HUGE) as usize;
        let old = {
            let machine = &mut self.machines[vm];
            let mapping = machine.space.mapping_mut(region).expect("mapped");
            match mapping {
                RegionMapping::BaseTable(t) => {
                    let old = t[slot].frame;
                    t[slot].frame = canonical;
                    t[slot].perm_w = false;
                    old
                }
                _ => unreachable!("attach requires a base mapping"),
            }
        };
        self.machines[vm]
            .tlb
            .flush(crate::mmu::FlushScope::Region(region));
        if old != canonical {
            self.contents.remove(old);
        }
        self.groups.entry(canonical).or_default().insert((vm, gfn));
        self.member_of.insert((vm, gfn), canonical);
    }

    /// Write-protect the canonical owner itself when a group forms.
    fn protect_canonical(&mut self, vm: usize, gfn: u64, canonical: FrameNumber) {
        let region = gfn / ENTRIES_PER_HUGE;
        let slot = (gfn % ENTRIES_PER_HUGE) as usize;
        if let Ok(RegionMapping::BaseTable(t)) = self.machines[vm].space.mapping_mut(region) {
            t[slot].perm_w = false;
        }
        self.groups.entry(canonical).or_default().insert((vm, gfn));
        self.member_of.insert((vm, gfn), canonical);
    }

    fn detach_member(&mut self, vm: usize, gfn: u64) -> FrameNumber {
        let canonical = self.member_of.remove(&(vm, gfn)).expect("member");
        let group = self.groups.get_mut(&canonical).expect("group");
        group.remove(&(vm, gfn));
        if group.len() == 1 {
            // Last sharer keeps the frame privately again.
            let last = *group.iter().next().unwrap();
            self.groups.remove(&canonical);
            self.member_of.remove(&last);
            let region = last.1 / ENTRIES_PER_HUGE;
            let slot = (last.1 % ENTRIES_PER_HUGE) as usize;
            if let Ok(RegionMapping::BaseTable(t)) =
                self.machines[last.0].space.mapping_mut(region)
            {
                t[slot].perm_w = true;
            }
        }
        canonical
    }

    /// Break one sharer out of its group with a private copy; the write that
    /// triggered the break lands in the copy. Costs one VM-exit.
    pub fn cow_write_break(&mut self, vm: usize, gfn: u64) -> Result<(), ShareError> {
        if !self.member_of.contains_key(&(vm, gfn)) {
            return Err(ShareError::FrameNotShared { vm, gfn });
        }
        let canonical = self.detach_member(vm, gfn);
        let private = self.machines[vm].space.allocator.alloc();
        let content = self
            .contents
            .get(canonical)
            .copied()
            .unwrap_or(FrameContent::zero());
        self.contents.set(private, content);
        let region = gfn / ENTRIES_PER_HUGE;
        let slot = (gfn % ENTRIES_PER_HUGE) as usize;
        if let Ok(RegionMapping::BaseTable(t)) = self.machines[vm].space.mapping_mut(region) {
            t[slot].frame = private;
            t[slot].perm_w = true;
        }
        self.machines[vm]
            .tlb
            .flush(crate::mmu::FlushScope::Region(region));
        self.cow_breaks += 1;
        Ok(())
    }

    /// Apply a write's content mutation to (vm, gfn)'s current frame.
    fn mutate_on_write(&mut self, vm: usize, gfn: u64) {
        let seq = self.write_seq.entry((vm, gfn)).or_insert(0);
        *seq += 1;
        let seq = *seq;
        if let Some(frame) = self.frame_of(vm, gfn) {
            self.contents.set(frame, written_content(vm, gfn, seq));
        }
    }

    /// Replay a window with copy-on-write semantics; returns the summed
    /// access cost with every frame on the fast tier.
    pub fn replay_window(&mut self, vm: usize, window: &[AccessEvent], model: &CostModel) -> u64 {
        let mut total = 0u64;
        for event in window {
            if event.kind == AccessKind::Write {
                let gfn = event.gpa / BASE_PAGE_BYTES;
                if self.member_of.contains_key(&(vm, gfn)) {
                    self.cow_write_break(vm, gfn).expect("shared");
                    total += model.vm_exit;
                }
                self.mutate_on_write(vm, gfn);
            }
            let outcome = self.machines[vm].access(event);
            total += access_cost(&outcome, event.kind, model, Tier::Fast);
        }
        total
    }

    pub fn huge_ratio(&self, vm: usize) -> f64 {
        let space = &self.machines[vm].space;
        let huge = space
            .regions()
            .filter(|(_, m)| matches!(m, RegionMapping::HugeLeaf(_)))
            .count() as f64;
        huge / space.region_count() as f64
    }

    /// Walk every guest frame of every VM through the trees, merging equal
    /// base-mapped frames (or only zeroes) and tagging regions whose content
    /// has a duplicate elsewhere. Returns merges done and tagged regions.
    fn walk_and_merge(&mut self, only_zero: bool) -> WalkOutcome {
        let mut trees = MergeTrees::default();
        for &canonical in self.groups.keys() {
            if let Some(c) = self.contents.get(canonical) {
                trees.stable_insert(c.digest, canonical);
            }
        }
        let mut outcome = WalkOutcome::default();
        let vm_count = self.machines.len();
        for vm in 0..vm_count {
            let frames = self.machines[vm].space.total_guest_frames();
            for gfn in 0..frames {
                if self.member_of.contains_key(&(vm, gfn)) {
                    continue;
                }
                let Some(frame) = self.frame_of(vm, gfn) else {
                    continue;
                };
                let Some(content) = self.contents.get(frame).copied() else {
                    continue;
                };
                if only_zero && !content.zero {
                    continue;
                }
                let region = gfn / ENTRIES_PER_HUGE;
                if let Some(canonical) = trees.stable_lookup(&content, &self.contents) {
                    outcome.candidate_regions.insert((vm, region));
                    if self.base_mapped(vm, gfn) {
                        self.attach_to_group(vm, gfn, canonical);
                        outcome.merges += 1;
                    }
                    continue;
                }
                if let Some((vm2, gfn2, frame2)) = trees.unstable_lookup(&content, &self.contents)
                {
                    outcome.candidate_regions.insert((vm, region));
                    outcome
                        .candidate_regions
                        .insert((vm2, gfn2 / ENTRIES_PER_HUGE));
                    if self.base_mapped(vm, gfn) && self.base_mapped(vm2, gfn2) {
                        // Promote the pair into a stable group around the
                        // first-seen frame.
                        let digest = content.digest;
                        trees.unstable_remove(digest, frame2);
                        trees.stable_insert(digest, frame2);
                        self.protect_canonical(vm2, gfn2, frame2);
                        self.attach_to_group(vm, gfn, frame2);
                        outcome.merges += 1;
                    }
                    continue;
                }
                trees.unstable_insert(content.digest, vm, gfn, frame);
            }
        }
        outcome
    }

    fn split_region(&mut self, vm: usize, region: u64) {
        let machine = &mut self.machines[vm];
        let mut stats = machine.stats;
        split_huge_page(
            &mut machine.space,
            &mut machine.tlb,
            region,
            SplitMode::VmFriendly,
            &mut stats,
        )
        .expect("huge leaf");
        machine.stats = stats;
    }

    fn region_has_shared_frame(&self, vm: usize, region: u64) -> bool {
        (0..ENTRIES_PER_HUGE)
            .any(|slot| self.member_of.contains_key(&(vm, region * ENTRIES_PER_HUGE + slot)))
    }

    /// Whole-region merge for the huge-page-share strategy: every slot of
    /// the region joins a group keyed by the canonical run's frames.
    fn merge_huge_regions(&mut self, canonical_vm: usize, canonical_region: u64, vm: usize, region: u64) {
        let canonical_base = match self.machines[canonical_vm]
            .space
            .mapping(canonical_region)
            .expect("mapped")
        {
            RegionMapping::HugeLeaf(pde) => pde.frame,
            _ => unreachable!(),
        };
        let old_base = match self.machines[vm].space.mapping_mut(region).expect("mapped") {
            RegionMapping::HugeLeaf(pde) => {
                let old = pde.frame;
                pde.frame = canonical_base;
                pde.perm_w = false;
                old
            }
            _ => unreachable!(),
        };
        if let Ok(RegionMapping::HugeLeaf(pde)) =
            self.machines[canonical_vm].space.mapping_mut(canonical_region)
        {
            pde.perm_w = false;
        }
        self.machines[vm]
            .tlb
            .flush(crate::mmu::FlushScope::Region(region));
        for slot in 0..ENTRIES_PER_HUGE {
            let canonical = FrameNumber(canonical_base.0 + slot);
            self.contents.remove(FrameNumber(old_base.0 + slot));
            self.groups
                .entry(canonical)
                .or_default()
                .extend([
                    (canonical_vm, canonical_region * ENTRIES_PER_HUGE + slot),
                    (vm, region * ENTRIES_PER_HUGE + slot),
                ]);
            self.member_of.insert(
                (canonical_vm, canonical_region * ENTRIES_PER_HUGE + slot),
                canonical,
            );
            self.member_of
                .insert((vm, region * ENTRIES_PER_HUGE + slot), canonical);
        }
    }
}

#[derive(Debug, Default)]
struct WalkOutcome {
    merges: u64,
    candidate_regions: BTreeSet<(usize, u64)>,
}

/// Brute-force ceiling: group every guest frame of every VM by full content
/// and sum (group_size - 1) * 4096. Independent of the tree path and of any
/// sharing already in effect.
pub fn dedup_oracle(pool: &SharePool) -> u64 {
    let mut by_digest: BTreeMap<u64, Vec<FrameContent>> = BTreeMap::new();
    let mut sizes: BTreeMap<(u64, usize), u64> = BTreeMap::new();
    for vm in 0..pool.machines.len() {
        for gfn in 0..pool.machines[vm].space.total_guest_frames() {
            let Some(content) = pool.content_of(vm, gfn) else {
                continue;
            };
            let chain = by_digest.entry(content.digest).or_default();
            match chain.iter().position(|c| full_equal(c, &content)) {
                Some(idx) => *sizes.get_mut(&(content.digest, idx)).unwrap() += 1,
                None => {
                    chain.push(content);
                    sizes.insert((content.digest, chain.len() - 1), 1);
                }
            }
        }
    }
    sizes
        .values()
        .map(|&n| n.saturating_sub(1) * BASE_PAGE_BYTES)
        .sum()
}

/// Run one sharing strategy to its stop rule over the pool.
#[allow(clippy::too_many_arguments)]
pub fn run_share_epoch(
    pool: &mut SharePool,
    traces: &[Trace],
    strategy: ShareStrategy,
    scan: &ScanConfig,
    policy: &PolicyConfig,
    model: &CostModel,
    max_passes: u32,
) -> Result<ShareStats, ShareError> {
    if pool.machines.len() < 2 {
        return Err(ShareError::NeedTwoMachines(pool.machines.len()));
    }
    if traces.len() != pool.machines.len() {
        return Err(ShareError::TraceCountMismatch {
            machines: pool.machines.len(),
            traces: traces.len(),
        });
    }

    let mut passes = 0u32;
    match strategy {
        ShareStrategy::HugePageShare => {
            passes = 1;
            merge_equal_huge_regions(pool);
        }
        ShareStrategy::LinuxKsm => {
            for _ in 0..max_passes {
                passes += 1;
                let walk = pool.walk_and_merge(false);
                let mut split_any = false;
                for (vm, region) in walk.candidate_regions {
                    if pool.huge_mapped(vm, region) {
                        pool.split_region(vm, region);
                        split_any = true;
                    }
                }
                if walk.merges == 0 && !split_any {
                    break;
                }
            }
        }
        ShareStrategy::Ingens => {
            let cold = monitor_cold_regions(pool, traces, scan)?;
            for _ in 0..max_passes {
                passes += 1;
                let walk = pool.walk_and_merge(false);
                let mut split_any = false;
                for (vm, region) in walk.candidate_regions {
                    if cold.contains(&(vm, region)) && pool.huge_mapped(vm, region) {
                        pool.split_region(vm, region);
                        split_any = true;
                    }
                }
                if walk.merges == 0 && !split_any {
                    break;
                }
            }
        }
        ShareStrategy::ZeroScan => {
            for _ in 0..max_passes {
                passes += 1;
                let walk = pool.walk_and_merge(true);
                let mut split_any = false;
                for (vm, region) in walk.candidate_regions {
                    if pool.huge_mapped(vm, region) {
                        pool.split_region(vm, region);
                        split_any = true;
                    }
                }
                if walk.merges == 0 && !split_any {
                    break;
                }
            }
        }
        ShareStrategy::Fhpm => {
            passes = run_fhpm_share(pool, traces, scan, policy, max_passes)?;
        }
    }

    let mut per_vm = Vec::new();
    for (vm, trace) in traces.iter().enumerate() {
        let window = trace.window(2, scan.window_ticks);
        let est_cost = pool.replay_window(vm, window, model);
        per_vm.push(VmShareReport {
            huge_ratio: pool.huge_ratio(vm),
            est_cost,
        });
    }
    Ok(ShareStats {
        bytes_saved: pool.bytes_saved(),
        shared_frames: pool.shared_frames(),
        cow_breaks: pool.cow_breaks,
        passes,
        per_vm,
    })
}

fn monitor_cold_regions(
    pool: &mut SharePool,
    traces: &[Trace],
    scan: &ScanConfig,
) -> Result<BTreeSet<(usize, u64)>, ShareError> {
    let mut cold = BTreeSet::new();
    for (vm, trace) in traces.iter().enumerate() {
        let window = trace.window(0, scan.window_ticks);
        let hist = stage1_scan(&mut pool.machines[vm], window, scan)
            .map_err(|e| ShareError::Monitor(e.to_string()))?;
        let partition = classify_hot_cold(&hist, scan.hot_threshold);
        cold.extend(partition.cold_regions.iter().map(|&r| (vm, r)));
    }
    Ok(cold)
}

/// Monitoring, pressure planning, and the split/merge/collapse pass loop for
/// the fine-grained strategy.
fn run_fhpm_share(
    pool: &mut SharePool,
    traces: &[Trace],
    scan: &ScanConfig,
    policy: &PolicyConfig,
    max_passes: u32,
) -> Result<u32, ShareError> {
    let vm_count = pool.machines.len();
    let mut cold: BTreeSet<(usize, u64)> = BTreeSet::new();
    let mut demote_allowed: BTreeSet<(usize, u64)> = BTreeSet::new();
    let mut hp_after = vec![0i64; vm_count];

    for vm in 0..vm_count {
        let s1 = traces[vm].window(0, scan.window_ticks);
        let s2 = traces[vm].window(1, scan.window_ticks);
        let machine = &mut pool.machines[vm];
        let hist =
            stage1_scan(machine, s1, scan).map_err(|e| ShareError::Monitor(e.to_string()))?;
        let partition = classify_hot_cold(&hist, scan.hot_threshold);
        cold.extend(partition.cold_regions.iter().map(|&r| (vm, r)));

        let hot_huge: Vec<u64> = partition
            .hot_regions
            .iter()
            .copied()
            .filter(|&r| {
                matches!(machine.space.mapping(r), Ok(RegionMapping::HugeLeaf(pde)) if !pde.redirected)
            })
            .collect();
        let reports = stage2_fine_monitor(machine, &hot_huge, s2, &hist, &[])
            .map_err(|e| ShareError::Monitor(e.to_string()))?;
        let psrs: Vec<_> = reports
            .iter()
            .filter(|r| r.valid)
            .map(|r| compute_psr(r).expect("valid"))
            .collect();

        let vm_policy = PolicyConfig {
            s_tot: machine.space.total_bytes(),
            ..*policy
        };
        let s_hot = partition.hot_bytes();
        let hp = init_hot_page_pressure(s_hot.min(vm_policy.s_tot), &vm_policy)
            .expect("clamped under total");
        let plan = plan_demotions(hp, &psrs, &vm_policy);
        demote_allowed.extend(plan.demote.iter().map(|e| (vm, e.region)));
        hp_after[vm] = plan.hp_after;
    }

    let total_bytes: u64 = pool.machines.iter().map(|m| m.space.total_bytes()).sum();
    let waterline = (total_bytes as f64 * policy.f_use).round() as u64;

    let mut passes = 0u32;
    for _ in 0..max_passes {
        passes += 1;
        let walk = pool.walk_and_merge(false);
        let mut changed = walk.merges > 0;
        for (vm, region) in &walk.candidate_regions {
            let eligible =
                cold.contains(&(*vm, *region)) || demote_allowed.contains(&(*vm, *region));
            if eligible && pool.huge_mapped(*vm, *region) {
                pool.split_region(*vm, *region);
                changed = true;
            }
        }
        if total_bytes - pool.bytes_saved() <= waterline || !changed {
            break;
        }
    }
    Ok(passes)
}

/// Group still-huge regions by full 2 MiB content and merge equal ones.
fn merge_equal_huge_regions(pool: &mut SharePool) {
    // Key regions by the digest sequence of their frames; confirm with full
    // per-frame comparison before merging.
    let mut by_key: BTreeMap<Vec<u64>, (usize, u64)> = BTreeMap::new();
    let vm_count = pool.machines.len();
    for vm in 0..vm_count {
        for region in 0..pool.machines[vm].space.region_count() {
            if !pool.huge_mapped(vm, region) || pool.region_has_shared_frame(vm, region) {
                continue;
            }
            let Some(key) = region_digest_key(pool, vm, region) else {
                continue;
            };
            match by_key.get(&key) {
                Some(&(cvm, cregion)) => {
                    if regions_fully_equal(pool, cvm, cregion, vm, region) {
                        pool.merge_huge_regions(cvm, cregion, vm, region);
                    }
                }
                None => {
                    by_key.insert(key, (vm, region));
                }
            }
        }
    }
}

fn region_digest_key(pool: &SharePool, vm: usize, region: u64) -> Option<Vec<u64>> {
    (0..ENTRIES_PER_HUGE)
        .map(|slot| {
            pool.content_of(vm, region * ENTRIES_PER_HUGE + slot)
                .map(|c| c.digest)
        })
        .collect()
}

fn regions_fully_equal(pool: &SharePool, avm: usize, aregion: u64, bvm: usize, bregion: u64) -> bool {
    (0..ENTRIES_PER_HUGE).all(|slot| {
        match (
            pool.content_of(avm, aregion * ENTRIES_PER_HUGE + slot),
            pool.content_of(bvm, bregion * ENTRIES_PER_HUGE + slot),
        ) {
            (Some(a), Some(b)) => full_equal(&a, &b),
            _ => false,
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::HUGE_PAGE_BYTES;
    use crate::ept::{EptSpace, RegionKind};
    use crate::workload::{generate_contents, generate_trace, ContentSpec, Pattern, TraceSpec};

    const VM_STRIDE: u64 = 1 << 32;

    fn build_pool(vm_count: usize, regions: usize, spec: &ContentSpec) -> SharePool {
        let layout = vec![RegionKind::Huge; regions];
        let machines: Vec<Machine> = (0..vm_count)
            .map(|vm| {
                Machine::new(
                    EptSpace::build_with(
                        regions as u64 * HUGE_PAGE_BYTES,
                        &layout,
                        vm as u64 * VM_STRIDE,
                    )
                    .unwrap(),
                )
            })
            .collect();
        let stores = generate_contents(spec, |vm| vm * VM_STRIDE).unwrap();
        let mut contents = ContentStore::default();
        for store in stores {
            contents.merge_from(store);
        }
        SharePool::new(machines, contents)
    }

    fn uniform_trace(regions: usize, events: u64, seed: u64, read_fraction: f64) -> Trace {
        generate_trace(&TraceSpec {
            wss: regions as u64 * HUGE_PAGE_BYTES,
            pattern: Pattern::UniformRandom,
            read_fraction,
            unbalanced_fraction: 0.0,
            events,
            seed,
            ..TraceSpec::default()
        })
        .unwrap()
    }

    fn dup_spec(regions: usize) -> ContentSpec {
        ContentSpec {
            vm_count: 2,
            frames_per_vm: regions as u64 * ENTRIES_PER_HUGE,
            duplicate_fraction: 1.0,
            zero_fraction: 0.0,
            seed: 11,
        }
    }

    #[test]
    fn oracle_counts_duplicate_pairs() {
        let pool = build_pool(2, 2, &dup_spec(2));
        assert_eq!(dedup_oracle(&pool), 2 * ENTRIES_PER_HUGE * BASE_PAGE_BYTES);
    }

    #[test]
    fn oracle_zero_without_duplicates() {
        let spec = ContentSpec {
            duplicate_fraction: 0.0,
            ..dup_spec(2)
        };
        let pool = build_pool(2, 2, &spec);
        assert_eq!(dedup_oracle(&pool), 0);
    }

    #[test]
    fn oracle_groups_three_vms() {
        let spec = ContentSpec {
            vm_count: 3,
            frames_per_vm: 8,
            duplicate_fraction: 1.0 / 8.0,
            zero_fraction: 0.0,
            seed: 3,
        };
        let layout = vec![RegionKind::Base];
        let machines: Vec<Machine> = (0..3)
            .map(|vm| {
                Machine::new(
                    EptSpace::build_with(HUGE_PAGE_BYTES, &layout, vm as u64 * VM_STRIDE).unwrap(),
                )
            })
            .collect();
        let stores = generate_contents(&spec, |vm| vm * VM_STRIDE).unwrap();
        let mut contents = ContentStore::default();
        for s in stores {
            contents.merge_from(s);
        }
        // Only 8 frames of 512 are populated per VM; one content is shared
        // by all three VMs.
        let pool = SharePool::new(machines, contents);
        assert_eq!(dedup_oracle(&pool), 2 * BASE_PAGE_BYTES);
    }

    #[test]
    fn ksm_reaches_the_oracle() {
        let regions = 4;
        let mut pool = build_pool(2, regions, &dup_spec(regions));
        let oracle = dedup_oracle(&pool);
        let traces = vec![
            uniform_trace(regions, 3 * 20_480, 1, 1.0),
            uniform_trace(regions, 3 * 20_480, 2, 1.0),
        ];
        let stats = run_share_epoch(
            &mut pool,
            &traces,
            ShareStrategy::LinuxKsm,
            &ScanConfig::default(),
            &PolicyConfig::default(),
            &CostModel::default(),
            16,
        )
        .unwrap();
        assert_eq!(stats.bytes_saved, oracle);
        assert_eq!(pool.huge_ratio(0), 0.0);
        assert!(stats.bytes_saved <= oracle);
    }

    #[test]
    fn huge_page_share_fails_on_permuted_contents() {
        let regions = 4;
        let mut pool = build_pool(2, regions, &dup_spec(regions));
        let traces = vec![
            uniform_trace(regions, 3 * 20_480, 1, 1.0),
            uniform_trace(regions, 3 * 20_480, 2, 1.0),
        ];
        let stats = run_share_epoch(
            &mut pool,
            &traces,
            ShareStrategy::HugePageShare,
            &ScanConfig::default(),
            &PolicyConfig::default(),
            &CostModel::default(),
            16,
        )
        .unwrap();
        // Permuted placement leaves no two regions content-equal, and every
        // huge page survives.
        assert_eq!(stats.bytes_saved, 0);
        assert_eq!(pool.huge_ratio(0), 1.0);
        assert_eq!(pool.huge_ratio(1), 1.0);
    }

    #[test]
    fn huge_page_share_merges_identical_layouts() {
        // Two VMs with identical content at identical positions: whole
        // regions match.
        let regions = 2;
        let spec = ContentSpec {
            vm_count: 1,
            frames_per_vm: regions as u64 * ENTRIES_PER_HUGE,
            duplicate_fraction: 1.0,
            zero_fraction: 0.0,
            seed: 11,
        };
        let layout = vec![RegionKind::Huge; regions];
        let machines: Vec<Machine> = (0..2)
            .map(|vm| {
                Machine::new(
                    EptSpace::build_with(
                        regions as u64 * HUGE_PAGE_BYTES,
                        &layout,
                        vm as u64 * VM_STRIDE,
                    )
                    .unwrap(),
                )
            })
            .collect();
        let mut contents = ContentStore::default();
        let base = generate_contents(&spec, |_| 0).unwrap().remove(0);
        for (frame, c) in base.iter() {
            contents.set(frame, *c);
            contents.set(FrameNumber(frame.0 + VM_STRIDE), *c);
        }
        let mut pool = SharePool::new(machines, contents);
        let oracle = dedup_oracle(&pool);
        let traces = vec![
            uniform_trace(regions, 3 * 20_480, 1, 1.0),
            uniform_trace(regions, 3 * 20_480, 2, 1.0),
        ];
        let stats = run_share_epoch(
            &mut pool,
            &traces,
            ShareStrategy::HugePageShare,
            &ScanConfig::default(),
            &PolicyConfig::default(),
            &CostModel::default(),
            16,
        )
        .unwrap();
        assert_eq!(stats.bytes_saved, regions as u64 * HUGE_PAGE_BYTES);
        assert_eq!(stats.bytes_saved, oracle);
        assert_eq!(pool.huge_ratio(0), 1.0);
    }

    #[test]
    fn no_duplicates_no_savings_for_any_strategy() {
        let spec = ContentSpec {
            duplicate_fraction: 0.0,
            ..dup_spec(2)
        };
        for strategy in [
            ShareStrategy::Fhpm,
            ShareStrategy::LinuxKsm,
            ShareStrategy::HugePageShare,
            ShareStrategy::Ingens,
            ShareStrategy::ZeroScan,
        ] {
            let mut pool = build_pool(2, 2, &spec);
            let traces = vec![
                uniform_trace(2, 3 * 20_480, 1, 1.0),
                uniform_trace(2, 3 * 20_480, 2, 1.0),
            ];
            let stats = run_share_epoch(
                &mut pool,
                &traces,
                strategy,
                &ScanConfig::default(),
                &PolicyConfig {
                    f_use: 0.5,
                    ..PolicyConfig::default()
                },
                &CostModel::default(),
                8,
            )
            .unwrap();
            assert_eq!(stats.bytes_saved, 0, "{strategy:?}");
        }
    }

    #[test]
    fn pool_rejects_single_machine() {
        let mut pool = build_pool(1, 2, &ContentSpec {
            vm_count: 1,
            ..dup_spec(2)
        });
        let traces = vec![uniform_trace(2, 100, 1, 1.0)];
        assert_eq!(
            run_share_epoch(
                &mut pool,
                &traces,
                ShareStrategy::LinuxKsm,
                &ScanConfig::default(),
                &PolicyConfig::default(),
                &CostModel::default(),
                4,
            )
            .unwrap_err(),
            ShareError::NeedTwoMachines(1)
        );
    }

    #[test]
    fn cow_break_privatizes_writer() {
        let regions = 2;
        let mut pool = build_pool(2, regions, &dup_spec(regions));
        let traces = vec![
            uniform_trace(regions, 3 * 20_480, 1, 1.0),
            uniform_trace(regions, 3 * 20_480, 2, 1.0),
        ];
        run_share_epoch(
            &mut pool,
            &traces,
            ShareStrategy::LinuxKsm,
            &ScanConfig::default(),
            &PolicyConfig::default(),
            &CostModel::default(),
            16,
        )
        .unwrap();
        let saved_before = pool.bytes_saved();
        let shared_gfn = (0..pool.machines[0].space.total_guest_frames())
            .find(|&g| pool.is_shared_mapping(0, g))
            .expect("something shared");
        let peer_frame = pool.frame_of(1, 0);
        pool.cow_write_break(0, shared_gfn).unwrap();
        assert_eq!(pool.bytes_saved(), saved_before - BASE_PAGE_BYTES);
        assert!(!pool.is_shared_mapping(0, shared_gfn));
        // Reads by other sharers are unaffected.
        assert_eq!(pool.frame_of(1, 0), peer_frame);
        assert_eq!(pool.cow_breaks, 1);
        // Breaking an unshared frame is an error.
        assert_eq!(
            pool.cow_write_break(0, shared_gfn).unwrap_err(),
            ShareError::FrameNotShared {
                vm: 0,
                gfn: shared_gfn
            }
        );
    }

    #[test]
    fn two_writers_break_twice() {
        let regions = 2;
        let mut pool = build_pool(2, regions, &dup_spec(regions));
        let traces = vec![
            uniform_trace(regions, 3 * 20_480, 1, 1.0),
            uniform_trace(regions, 3 * 20_480, 2, 1.0),
        ];
        run_share_epoch(
            &mut pool,
            &traces,
            ShareStrategy::LinuxKsm,
            &ScanConfig::default(),
            &PolicyConfig::default(),
            &CostModel::default(),
            16,
        )
        .unwrap();
        // Find a 3-way group: two identical contents share with a third...
        // with 2 VMs groups are pairs, so write from each side.
        let gfn_a = (0..pool.machines[0].space.total_guest_frames())
            .find(|&g| pool.is_shared_mapping(0, g))
            .unwrap();
        let canonical = pool.member_of[&(0, gfn_a)];
        let (vm_b, gfn_b) = *pool.groups[&canonical]
            .iter()
            .find(|(vm, _)| *vm == 1)
            .expect("peer sharer");
        let before = pool.cow_breaks;
        pool.cow_write_break(0, gfn_a).unwrap();
        // The group dissolved (pair); the peer's mapping became private.
        assert!(!pool.is_shared_mapping(vm_b, gfn_b));
        assert_eq!(pool.cow_breaks, before + 1);
    }

    #[test]
    fn replay_with_writes_keeps_contents_readable() {
        let regions = 2;
        let mut pool = build_pool(2, regions, &dup_spec(regions));
        let traces = vec![
            uniform_trace(regions, 3 * 20_480, 1, 1.0),
            uniform_trace(regions, 3 * 20_480, 2, 1.0),
        ];
        run_share_epoch(
            &mut pool,
            &traces,
            ShareStrategy::LinuxKsm,
            &ScanConfig::default(),
            &PolicyConfig::default(),
            &CostModel::default(),
            16,
        )
        .unwrap();
        // Shadow the logical contents, then write over a window and check
        // every mapping still reads its own expected content.
        let frames = pool.machines[0].space.total_guest_frames();
        let mut shadow: BTreeMap<(usize, u64), FrameContent> = BTreeMap::new();
        for vm in 0..2 {
            for gfn in 0..frames {
                shadow.insert((vm, gfn), pool.content_of(vm, gfn).unwrap());
            }
        }
        let write_trace = uniform_trace(regions, 2000, 77, 0.0);
        let mut seq: BTreeMap<(usize, u64), u64> = BTreeMap::new();
        for event in &write_trace.events {
            let gfn = event.gpa / BASE_PAGE_BYTES;
            let s = seq.entry((0, gfn)).or_insert(0);
            *s += 1;
            shadow.insert((0, gfn), written_content(0, gfn, *s));
        }
        pool.replay_window(0, &write_trace.events, &CostModel::default());
        for vm in 0..2 {
            for gfn in 0..frames {
                assert_eq!(
                    pool.content_of(vm, gfn).unwrap(),
                    shadow[&(vm, gfn)],
                    "vm {vm} gfn {gfn}"
                );
            }
        }
        // No share group may survive a write through it unbroken.
        assert!(pool.bytes_saved() <= dedup_oracle(&pool));
    }

    #[test]
    fn saving_never_exceeds_oracle() {
        for strategy in [
            ShareStrategy::Fhpm,
            ShareStrategy::LinuxKsm,
            ShareStrategy::Ingens,
            ShareStrategy::ZeroScan,
        ] {
            let spec = ContentSpec {
                duplicate_fraction: 0.6,
                zero_fraction: 0.1,
                ..dup_spec(4)
            };
            let mut pool = build_pool(2, 4, &spec);
            let oracle = dedup_oracle(&pool);
            let traces = vec![
                uniform_trace(4, 3 * 20_480, 1, 1.0),
                uniform_trace(4, 3 * 20_480, 2, 1.0),
            ];
            let stats = run_share_epoch(
                &mut pool,
                &traces,
                strategy,
                &ScanConfig::default(),
                &PolicyConfig {
                    f_use: 0.5,
                    ..PolicyConfig::default()
                },
                &CostModel::default(),
                8,
            )
            .unwrap();
            assert!(stats.bytes_saved <= oracle, "{strategy:?}");
        }
    }

    #[test]
    fn collapse_veto_holds_after_sharing() {
        let regions = 4;
        let mut pool = build_pool(2, regions, &dup_spec(regions));
        let traces = vec![
            uniform_trace(regions, 3 * 20_480, 1, 1.0),
            uniform_trace(regions, 3 * 20_480, 2, 1.0),
        ];
        run_share_epoch(
            &mut pool,
            &traces,
            ShareStrategy::Fhpm,
            &ScanConfig::default(),
            &PolicyConfig {
                f_use: 0.5,
                ..PolicyConfig::default()
            },
            &CostModel::default(),
            8,
        )
        .unwrap();
        for vm in 0..2 {
            for region in 0..regions as u64 {
                if pool.huge_mapped(vm, region) {
                    assert!(
                        !pool.region_has_shared_frame(vm, region),
                        "huge region {region} of vm {vm} holds a shared frame"
                    );
                }
            }
        }
    }
}
