//! Second-level (guest-physical to host-physical) address-space model.
//!
//! A guest address space is covered by 2 MiB regions. Each region is mapped
//! by a huge leaf directory entry, by a table of 512 base-page entries, or is
//! unmapped (transient state used by lazy remapping). A huge leaf can be
//! temporarily redirected to a companion table so the simulated MMU records
//! accessed/dirty bits per base-page region instead of once per huge page.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::{BASE_PAGE_BYTES, ENTRIES_PER_HUGE, HUGE_PAGE_BYTES};

/// Host physical frame number in 4 KiB units.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FrameNumber(pub u64);

impl FrameNumber {
    pub fn base_addr(self) -> u64 {
        self.0 * BASE_PAGE_BYTES
    }
}

/// One page-table entry: a huge-leaf directory entry or a base-page entry.
///
/// `is_huge_leaf` models the page-size bit. `redirected` is the per-directory
/// tracking bit set while the entry points at a companion table; the entry
/// then walks like a table pointer even though it logically still maps the
/// original huge frame run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EptEntry {
    pub present: bool,
    pub frame: FrameNumber,
    pub is_huge_leaf: bool,
    pub perm_r: bool,
    pub perm_w: bool,
    pub perm_x: bool,
    pub accessed: bool,
    pub dirty: bool,
    pub redirected: bool,
}

impl EptEntry {
    pub fn absent() -> Self {
        EptEntry {
            present: false,
            frame: FrameNumber(0),
            is_huge_leaf: false,
            perm_r: false,
            perm_w: false,
            perm_x: false,
            accessed: false,
            dirty: false,
            redirected: false,
        }
    }

    pub fn leaf(frame: FrameNumber, huge: bool, perms: Perms) -> Self {
        EptEntry {
            present: true,
            frame,
            is_huge_leaf: huge,
            perm_r: perms.r,
            perm_w: perms.w,
            perm_x: perms.x,
            accessed: false,
            dirty: false,
            redirected: false,
        }
    }

    pub fn perms(&self) -> Perms {
        Perms {
            r: self.perm_r,
            w: self.perm_w,
            x: self.perm_x,
        }
    }

    fn mark(&mut self, write: bool) {
        self.accessed = true;
        if write {
            self.dirty = true;
        }
    }

    fn take_ad(&mut self) -> (bool, bool) {
        let ad = (self.accessed, self.dirty);
        self.accessed = false;
        self.dirty = false;
        ad
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Perms {
    pub r: bool,
    pub w: bool,
    pub x: bool,
}

impl Perms {
    pub fn rwx() -> Self {
        Perms {
            r: true,
            w: true,
            x: true,
        }
    }
}

/// Shadow table installed in place of a redirected huge-leaf entry. Entry `i`
/// maps the i-th base frame of the original huge run with the original
/// permissions, so translation is preserved while A/D bits accrue per entry.
#[derive(Clone, Debug)]
pub struct CompanionPage {
    pub entries: Box<[EptEntry; 512]>,
    pub origin_pde: EptEntry,
}

/// How one 2 MiB guest region is currently mapped.
#[derive(Clone, Debug)]
pub enum RegionMapping {
    HugeLeaf(EptEntry),
    /// 512 base-page entries. Entries may be non-present after a lazy split;
    /// a non-present entry keeps the frame/permissions it will be refilled
    /// with on first touch.
    BaseTable(Box<[EptEntry; 512]>),
    /// No mapping installed (transient after a lazy collapse).
    Unmapped,
}

/// Per-frame accessed/dirty flags collected from a companion on restore.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FineBitmap {
    pub accessed: RegionBitmap,
    pub dirty: RegionBitmap,
}

/// 512-bit bitmap covering the base-page regions of one huge page.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RegionBitmap {
    words: [u64; 8],
}

impl RegionBitmap {
    pub fn set(&mut self, idx: usize) {
        debug_assert!(idx < 512);
        self.words[idx / 64] |= 1u64 << (idx % 64);
    }

    pub fn test(&self, idx: usize) -> bool {
        debug_assert!(idx < 512);
        self.words[idx / 64] & (1u64 << (idx % 64)) != 0
    }

    pub fn count_ones(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }

    pub fn any(&self) -> bool {
        self.words.iter().any(|w| *w != 0)
    }

    pub fn iter_set(&self) -> impl Iterator<Item = usize> + '_ {
        (0..512).filter(move |&i| self.test(i))
    }
}

/// A/D values read (and cleared) by a scan pass, keyed at the granularity
/// they were collected: whole huge regions or individual guest frames.
#[derive(Clone, Debug, Default)]
pub struct AdSnapshot {
    pub regions: BTreeMap<u64, (bool, bool)>,
    pub frames: BTreeMap<u64, (bool, bool)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScanGranularity {
    /// Huge-leaf entries only (companions of redirected leaves included).
    HugeOnly,
    /// Every present leaf: huge leaves, base tables, companions.
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LeafLevel {
    Huge,
    Base,
    CompanionBase,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Translation {
    pub hpa: u64,
    pub leaf_level: LeafLevel,
    pub walk_refs: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegionKind {
    Huge,
    Base,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EptError {
    #[error("address space size must be a non-zero multiple of {HUGE_PAGE_BYTES} bytes, got {0}")]
    BadSize(u64),
    #[error("layout covers {got} regions, address space has {expected}")]
    LayoutMismatch { expected: u64, got: u64 },
    #[error("translation fault at gpa {gpa:#x}")]
    TranslationFault { gpa: u64 },
    #[error("region {0} is not a huge leaf")]
    NotHugeLeaf(u64),
    #[error("region {0} is already redirected")]
    AlreadyRedirected(u64),
    #[error("region {0} is not redirected")]
    NotRedirected(u64),
    #[error("region {0} is out of range")]
    NoSuchRegion(u64),
}

/// Monotone host-frame source. Frames are never recycled; peak usage is a
/// reported metric, not a constraint.
#[derive(Clone, Debug)]
pub struct FrameAllocator {
    next: u64,
}

impl FrameAllocator {
    pub fn new(start_frame: u64) -> Self {
        Self { next: start_frame }
    }

    pub fn alloc(&mut self) -> FrameNumber {
        let f = self.next;
        self.next += 1;
        FrameNumber(f)
    }

    /// Allocate `count` contiguous frames aligned to `align` frames.
    pub fn alloc_aligned_run(&mut self, count: u64, align: u64) -> FrameNumber {
        let base = self.next.next_multiple_of(align);
        self.next = base + count;
        FrameNumber(base)
    }

    pub fn frames_used_up_to(&self) -> u64 {
        self.next
    }
}

/// The second-level address space of one simulated machine.
#[derive(Clone, Debug)]
pub struct EptSpace {
    total_guest_frames: u64,
    directory: BTreeMap<u64, RegionMapping>,
    companions: BTreeMap<u64, CompanionPage>,
    /// Huge-leaf entries staged by a lazy collapse, installed on next touch.
    pending_huge: BTreeMap<u64, EptEntry>,
    pub allocator: FrameAllocator,
    pub walk_refs_huge: u32,
    pub walk_refs_base: u32,
    peak_companions: usize,
}

/// Reference walk lengths for a two-dimensional translation: a huge leaf
/// removes the last level of both dimensions.
pub const DEFAULT_WALK_REFS_HUGE: u32 = 15;
pub const DEFAULT_WALK_REFS_BASE: u32 = 24;

impl EptSpace {
    /// Map a fresh address space of `total_bytes` with the per-region
    /// huge/base choice in `layout`. Huge regions get a 512-aligned
    /// contiguous host run; base regions allocate frame by frame.
    pub fn build(total_bytes: u64, layout: &[RegionKind]) -> Result<Self, EptError> {
        Self::build_with(total_bytes, layout, 0)
    }

    pub fn build_with(
        total_bytes: u64,
        layout: &[RegionKind],
        host_frame_base: u64,
    ) -> Result<Self, EptError> {
        if total_bytes == 0 || !total_bytes.is_multiple_of(HUGE_PAGE_BYTES) {
            return Err(EptError::BadSize(total_bytes));
        }
        let regions = total_bytes / HUGE_PAGE_BYTES;
        if layout.len() as u64 != regions {
            return Err(EptError::LayoutMismatch {
                expected: regions,
                got: layout.len() as u64,
            });
        }
        let mut allocator = FrameAllocator::new(host_frame_base);
        let mut directory = BTreeMap::new();
        for (region, kind) in layout.iter().enumerate() {
            let mapping = match kind {
                RegionKind::Huge => {
                    let base = allocator.alloc_aligned_run(ENTRIES_PER_HUGE, ENTRIES_PER_HUGE);
                    RegionMapping::HugeLeaf(EptEntry::leaf(base, true, Perms::rwx()))
                }
                RegionKind::Base => {
                    let mut table = Box::new([EptEntry::absent(); 512]);
                    for pte in table.iter_mut() {
                        *pte = EptEntry::leaf(allocator.alloc(), false, Perms::rwx());
                    }
                    RegionMapping::BaseTable(table)
                }
            };
            directory.insert(region as u64, mapping);
        }
        Ok(EptSpace {
            total_guest_frames: regions * ENTRIES_PER_HUGE,
            directory,
            companions: BTreeMap::new(),
            pending_huge: BTreeMap::new(),
            allocator,
            walk_refs_huge: DEFAULT_WALK_REFS_HUGE,
            walk_refs_base: DEFAULT_WALK_REFS_BASE,
            peak_companions: 0,
        })
    }

    pub fn total_bytes(&self) -> u64 {
        self.total_guest_frames * BASE_PAGE_BYTES
    }

    pub fn total_guest_frames(&self) -> u64 {
        self.total_guest_frames
    }

    pub fn region_count(&self) -> u64 {
        self.total_guest_frames / ENTRIES_PER_HUGE
    }

    pub fn regions(&self) -> impl Iterator<Item = (u64, &RegionMapping)> {
        self.directory.iter().map(|(r, m)| (*r, m))
    }

    pub fn mapping(&self, region: u64) -> Result<&RegionMapping, EptError> {
        self.directory
            .get(&region)
            .ok_or(EptError::NoSuchRegion(region))
    }

    pub(crate) fn mapping_mut(&mut self, region: u64) -> Result<&mut RegionMapping, EptError> {
        self.directory
            .get_mut(&region)
            .ok_or(EptError::NoSuchRegion(region))
    }

    pub(crate) fn set_mapping(&mut self, region: u64, mapping: RegionMapping) {
        self.directory.insert(region, mapping);
    }

    pub fn companion(&self, region: u64) -> Option<&CompanionPage> {
        self.companions.get(&region)
    }

    pub fn active_companions(&self) -> usize {
        self.companions.len()
    }

    pub fn peak_companions(&self) -> usize {
        self.peak_companions
    }


    pub(crate) fn stage_pending_huge(&mut self, region: u64, entry: EptEntry) {
        self.pending_huge.insert(region, entry);
    }

    pub(crate) fn take_pending_huge(&mut self, region: u64) -> Option<EptEntry> {
        self.pending_huge.remove(&region)
    }

    /// Walk the tables for `gpa` without touching A/D bits.
    pub fn translate(&self, gpa: u64) -> Result<Translation, EptError> {
        if gpa >= self.total_bytes() {
            return Err(EptError::TranslationFault { gpa });
        }
        let region = gpa / HUGE_PAGE_BYTES;
        let slot = (gpa % HUGE_PAGE_BYTES) / BASE_PAGE_BYTES;
        match self.directory.get(&region) {
            None | Some(RegionMapping::Unmapped) => Err(EptError::TranslationFault { gpa }),
            Some(RegionMapping::HugeLeaf(pde)) => {
                if pde.redirected {
                    let companion = &self.companions[&region];
                    let pte = &companion.entries[slot as usize];
                    Ok(Translation {
                        hpa: pte.frame.base_addr() + gpa % BASE_PAGE_BYTES,
                        leaf_level: LeafLevel::CompanionBase,
                        walk_refs: self.walk_refs_base,
                    })
                } else {
                    Ok(Translation {
                        hpa: pde.frame.base_addr() + gpa % HUGE_PAGE_BYTES,
                        leaf_level: LeafLevel::Huge,
                        walk_refs: self.walk_refs_huge,
                    })
                }
            }
            Some(RegionMapping::BaseTable(table)) => {
                let pte = &table[slot as usize];
                if !pte.present {
                    return Err(EptError::TranslationFault { gpa });
                }
                Ok(Translation {
                    hpa: pte.frame.base_addr() + gpa % BASE_PAGE_BYTES,
                    leaf_level: LeafLevel::Base,
                    walk_refs: self.walk_refs_base,
                })
            }
        }
    }

    /// Set accessed (and dirty on write) on the leaf that maps `gpa`.
    pub(crate) fn mark_leaf(&mut self, gpa: u64, write: bool) {
        let region = gpa / HUGE_PAGE_BYTES;
        let slot = ((gpa % HUGE_PAGE_BYTES) / BASE_PAGE_BYTES) as usize;
        match self.directory.get_mut(&region) {
            Some(RegionMapping::HugeLeaf(pde)) => {
                if pde.redirected {
                    self.companions.get_mut(&region).expect("companion").entries[slot]
                        .mark(write);
                } else {
                    pde.mark(write);
                }
            }
            Some(RegionMapping::BaseTable(table))
                if table[slot].present => {
                    table[slot].mark(write);
                }
            _ => {}
        }
    }

    /// Read out and clear A/D bits at the requested granularity. Redirected
    /// regions report their companion entries per frame; the redirected
    /// directory entry itself is left alone.
    pub fn clear_and_collect_ad(&mut self, granularity: ScanGranularity) -> AdSnapshot {
        let mut snap = AdSnapshot::default();
        for (&region, mapping) in self.directory.iter_mut() {
            match mapping {
                RegionMapping::HugeLeaf(pde) => {
                    if pde.redirected {
                        let companion = self.companions.get_mut(&region).expect("companion");
                        for (i, pte) in companion.entries.iter_mut().enumerate() {
                            let gfn = region * ENTRIES_PER_HUGE + i as u64;
                            snap.frames.insert(gfn, pte.take_ad());
                        }
                    } else {
                        snap.regions.insert(region, pde.take_ad());
                    }
                }
                RegionMapping::BaseTable(table) => {
                    if granularity == ScanGranularity::All {
                        for (i, pte) in table.iter_mut().enumerate() {
                            if pte.present {
                                let gfn = region * ENTRIES_PER_HUGE + i as u64;
                                snap.frames.insert(gfn, pte.take_ad());
                            }
                        }
                    }
                }
                RegionMapping::Unmapped => {}
            }
        }
        snap
    }

    /// Swing a huge-leaf directory entry to a fresh companion table. The
    /// caller owns TLB coherence for the region.
    pub fn redirect_to_companion(&mut self, region: u64) -> Result<(), EptError> {
        let mapping = self.mapping(region)?;
        let pde = match mapping {
            RegionMapping::HugeLeaf(pde) if pde.redirected => {
                return Err(EptError::AlreadyRedirected(region))
            }
            RegionMapping::HugeLeaf(pde) => *pde,
            _ => return Err(EptError::NotHugeLeaf(region)),
        };
        let perms = pde.perms();
        let mut entries = Box::new([EptEntry::absent(); 512]);
        for (i, pte) in entries.iter_mut().enumerate() {
            *pte = EptEntry::leaf(FrameNumber(pde.frame.0 + i as u64), false, perms);
        }
        self.companions.insert(
            region,
            CompanionPage {
                entries,
                origin_pde: pde,
            },
        );
        self.peak_companions = self.peak_companions.max(self.companions.len());
        let mut redirected = pde;
        redirected.is_huge_leaf = false;
        redirected.redirected = true;
        self.set_mapping(region, RegionMapping::HugeLeaf(redirected));
        Ok(())
    }

    /// Recycle the companion and reinstall the saved directory entry. The
    /// restored entry's A/D bits are the OR over the companion entries, so
    /// coarse history survives fine monitoring.
    pub fn restore_companion(&mut self, region: u64) -> Result<FineBitmap, EptError> {
        match self.mapping(region)? {
            RegionMapping::HugeLeaf(pde) if pde.redirected => {}
            _ => return Err(EptError::NotRedirected(region)),
        }
        let companion = self.companions.remove(&region).expect("companion");
        let mut bitmap = FineBitmap::default();
        for (i, pte) in companion.entries.iter().enumerate() {
            if pte.accessed {
                bitmap.accessed.set(i);
            }
            if pte.dirty {
                bitmap.dirty.set(i);
            }
        }
        let mut restored = companion.origin_pde;
        restored.accessed |= bitmap.accessed.any();
        restored.dirty |= bitmap.dirty.any();
        if restored.dirty {
            restored.accessed = true;
        }
        self.set_mapping(region, RegionMapping::HugeLeaf(restored));
        Ok(bitmap)
    }

    /// Conflict path: the host mutated the backing mapping while the region
    /// was redirected. The companion is discarded and the directory entry
    /// reverts to its pre-redirection state; collected fine bits are dropped.
    pub(crate) fn revert_redirection(&mut self, region: u64) -> Result<(), EptError> {
        match self.mapping(region)? {
            RegionMapping::HugeLeaf(pde) if pde.redirected => {}
            _ => return Err(EptError::NotRedirected(region)),
        }
        let companion = self.companions.remove(&region).expect("companion");
        self.set_mapping(region, RegionMapping::HugeLeaf(companion.origin_pde));
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn space_2r() -> EptSpace {
        EptSpace::build(2 * HUGE_PAGE_BYTES, &[RegionKind::Huge, RegionKind::Huge]).unwrap()
    }

    #[test]
    fn build_all_huge() {
        let space = space_2r();
        assert_eq!(space.total_guest_frames(), 1024);
        let huge_leaves = space
            .regions()
            .filter(|(_, m)| matches!(m, RegionMapping::HugeLeaf(_)))
            .count();
        assert_eq!(huge_leaves, 2);
    }

    #[test]
    fn build_mixed_layout() {
        let space =
            EptSpace::build(2 * HUGE_PAGE_BYTES, &[RegionKind::Huge, RegionKind::Base]).unwrap();
        match space.mapping(1).unwrap() {
            RegionMapping::BaseTable(t) => {
                assert!(t.iter().all(|pte| pte.present));
            }
            other => panic!("expected base table, got {other:?}"),
        }
    }

    #[test]
    fn build_rejects_layout_mismatch() {
        let err = EptSpace::build(HUGE_PAGE_BYTES, &[]).unwrap_err();
        assert_eq!(
            err,
            EptError::LayoutMismatch {
                expected: 1,
                got: 0
            }
        );
    }

    #[test]
    fn build_rejects_zero_and_unaligned_size() {
        assert!(matches!(
            EptSpace::build(0, &[]),
            Err(EptError::BadSize(0))
        ));
        assert!(matches!(
            EptSpace::build(HUGE_PAGE_BYTES + 1, &[RegionKind::Huge]),
            Err(EptError::BadSize(_))
        ));
    }

    #[test]
    fn huge_regions_get_aligned_runs() {
        let space =
            EptSpace::build(2 * HUGE_PAGE_BYTES, &[RegionKind::Base, RegionKind::Huge]).unwrap();
        match space.mapping(1).unwrap() {
            RegionMapping::HugeLeaf(pde) => assert_eq!(pde.frame.0 % 512, 0),
            other => panic!("expected huge leaf, got {other:?}"),
        }
    }

    #[test]
    fn translate_huge_offset_arithmetic() {
        let mut space = space_2r();
        // Pin the first region's run at a known frame for the arithmetic check.
        space.set_mapping(
            0,
            RegionMapping::HugeLeaf(EptEntry::leaf(FrameNumber(4096), true, Perms::rwx())),
        );
        let t = space.translate(8192).unwrap();
        assert_eq!(t.hpa, 4096 * 4096 + 8192);
        assert_eq!(t.leaf_level, LeafLevel::Huge);
        assert_eq!(t.walk_refs, 15);
    }

    #[test]
    fn translate_out_of_range_faults() {
        let space = space_2r();
        assert_eq!(
            space.translate(space.total_bytes()),
            Err(EptError::TranslationFault {
                gpa: space.total_bytes()
            })
        );
    }

    #[test]
    fn translate_unmapped_region_faults() {
        let mut space = space_2r();
        space.set_mapping(1, RegionMapping::Unmapped);
        let gpa = HUGE_PAGE_BYTES + 5;
        assert_eq!(space.translate(gpa), Err(EptError::TranslationFault { gpa }));
    }

    #[test]
    fn redirection_preserves_translation() {
        let mut space = space_2r();
        let gpa = HUGE_PAGE_BYTES / 2 + 123;
        let before = space.translate(gpa).unwrap();
        space.redirect_to_companion(0).unwrap();
        let during = space.translate(gpa).unwrap();
        assert_eq!(during.hpa, before.hpa);
        assert_eq!(during.leaf_level, LeafLevel::CompanionBase);
        assert_eq!(during.walk_refs, 24);
        space.restore_companion(0).unwrap();
        let after = space.translate(gpa).unwrap();
        assert_eq!(after.hpa, before.hpa);
        assert_eq!(after.leaf_level, LeafLevel::Huge);
    }

    #[test]
    fn companion_entries_mirror_origin() {
        let mut space = space_2r();
        space.set_mapping(
            0,
            RegionMapping::HugeLeaf(EptEntry::leaf(FrameNumber(1024), true, Perms::rwx())),
        );
        space.redirect_to_companion(0).unwrap();
        let companion = space.companion(0).unwrap();
        assert_eq!(companion.entries[0].frame, FrameNumber(1024));
        assert_eq!(companion.entries[511].frame, FrameNumber(1535));
        assert!(companion.entries.iter().all(|e| e.perms() == Perms::rwx()));
        assert!(companion.entries.iter().all(|e| !e.is_huge_leaf));
    }

    #[test]
    fn double_redirect_rejected() {
        let mut space = space_2r();
        space.redirect_to_companion(0).unwrap();
        assert_eq!(
            space.redirect_to_companion(0),
            Err(EptError::AlreadyRedirected(0))
        );
    }

    #[test]
    fn redirect_base_table_rejected() {
        let mut space =
            EptSpace::build(HUGE_PAGE_BYTES, &[RegionKind::Base]).unwrap();
        assert_eq!(space.redirect_to_companion(0), Err(EptError::NotHugeLeaf(0)));
    }

    #[test]
    fn restore_merges_ad_bits_by_or() {
        let mut space = space_2r();
        space.redirect_to_companion(0).unwrap();
        space.mark_leaf(0, false);
        space.mark_leaf(200 * BASE_PAGE_BYTES, false);
        let bitmap = space.restore_companion(0).unwrap();
        assert_eq!(bitmap.accessed.iter_set().collect::<Vec<_>>(), vec![0, 200]);
        assert!(!bitmap.dirty.any());
        match space.mapping(0).unwrap() {
            RegionMapping::HugeLeaf(pde) => {
                assert!(pde.accessed);
                assert!(!pde.dirty);
                assert!(!pde.redirected);
                assert!(pde.is_huge_leaf);
            }
            other => panic!("expected huge leaf, got {other:?}"),
        }
    }

    #[test]
    fn restore_untouched_companion_clears_ad() {
        let mut space = space_2r();
        space.redirect_to_companion(0).unwrap();
        let bitmap = space.restore_companion(0).unwrap();
        assert!(!bitmap.accessed.any());
        match space.mapping(0).unwrap() {
            RegionMapping::HugeLeaf(pde) => assert!(!pde.accessed && !pde.dirty),
            other => panic!("expected huge leaf, got {other:?}"),
        }
    }

    #[test]
    fn restore_without_redirect_rejected() {
        let mut space = space_2r();
        assert_eq!(space.restore_companion(0), Err(EptError::NotRedirected(0)));
    }

    #[test]
    fn round_trip_restores_origin_fields() {
        let mut space = space_2r();
        let origin = match space.mapping(0).unwrap() {
            RegionMapping::HugeLeaf(pde) => *pde,
            _ => unreachable!(),
        };
        space.redirect_to_companion(0).unwrap();
        space.mark_leaf(17 * BASE_PAGE_BYTES, true);
        space.restore_companion(0).unwrap();
        match space.mapping(0).unwrap() {
            RegionMapping::HugeLeaf(pde) => {
                assert_eq!(pde.frame, origin.frame);
                assert_eq!(pde.perms(), origin.perms());
                assert!(pde.is_huge_leaf);
                assert!(pde.accessed && pde.dirty);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn clear_and_collect_reports_then_zeroes() {
        let mut space = space_2r();
        space.mark_leaf(0, false);
        let snap = space.clear_and_collect_ad(ScanGranularity::HugeOnly);
        assert_eq!(snap.regions[&0], (true, false));
        assert_eq!(snap.regions[&1], (false, false));
        let snap2 = space.clear_and_collect_ad(ScanGranularity::HugeOnly);
        assert!(snap2.regions.values().all(|ad| *ad == (false, false)));
    }

    #[test]
    fn clear_and_collect_reads_companion_frames() {
        let mut space = space_2r();
        space.redirect_to_companion(0).unwrap();
        space.mark_leaf(3 * BASE_PAGE_BYTES, false);
        space.mark_leaf(7 * BASE_PAGE_BYTES, true);
        let snap = space.clear_and_collect_ad(ScanGranularity::HugeOnly);
        let touched: Vec<u64> = snap
            .frames
            .iter()
            .filter(|(_, ad)| ad.0)
            .map(|(gfn, _)| *gfn)
            .collect();
        assert_eq!(touched, vec![3, 7]);
        assert_eq!(snap.frames[&7], (true, true));
        // Redirected PDE is skipped while its companion is live.
        assert!(!snap.regions.contains_key(&0));
    }

    #[test]
    fn coverage_partition_is_total() {
        let space =
            EptSpace::build(3 * HUGE_PAGE_BYTES, &[RegionKind::Huge, RegionKind::Base, RegionKind::Huge])
                .unwrap();
        for region in 0..space.region_count() {
            space.mapping(region).unwrap();
        }
    }
}
