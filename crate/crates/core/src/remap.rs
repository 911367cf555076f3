//! Split and collapse of huge regions, in two flavors: the Linux-style lazy
//! path that invalidates second-level entries and repopulates them on first
//! touch (one EPT-violation exit per touch), and the VM-friendly path that
//! refills entries eagerly so no exits follow.

use thiserror::Error;

use crate::content::ContentStore;
use crate::ept::{EptEntry, EptError, EptSpace, FrameNumber, RegionMapping};
use crate::mmu::{FlushScope, Tlb};
use crate::{ENTRIES_PER_HUGE, HUGE_PAGE_BYTES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SplitMode {
    LinuxLazy,
    VmFriendly,
}

/// Counters accumulated across remap operations and lazy refills.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RemapStats {
    pub splits: u64,
    pub collapses: u64,
    pub ept_entries_written: u64,
    pub vm_exits_from_lazy_refill: u64,
    pub tlb_flushes: u64,
    pub copies_bytes: u64,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RemapError {
    #[error("region {0} is not a huge leaf")]
    NotHugeLeaf(u64),
    #[error("region {0} is redirected; restore it before remapping")]
    Redirected(u64),
    #[error("region {0} is not a fully present base table")]
    MissingEntries(u64),
    #[error("region {0} holds shared frame {1:?}")]
    SharedFrame(u64, FrameNumber),
    #[error(transparent)]
    Ept(#[from] EptError),
}

/// Break one huge leaf into 512 base entries over the same frames. The old
/// directory entry's A/D bits are dropped: the coarse bit carries no
/// per-frame information and monitoring rescans after remapping.
pub fn split_huge_page(
    space: &mut EptSpace,
    tlb: &mut Tlb,
    region: u64,
    mode: SplitMode,
    stats: &mut RemapStats,
) -> Result<(), RemapError> {
    let pde = match space.mapping(region)? {
        RegionMapping::HugeLeaf(pde) if pde.redirected => {
            return Err(RemapError::Redirected(region))
        }
        RegionMapping::HugeLeaf(pde) => *pde,
        _ => return Err(RemapError::NotHugeLeaf(region)),
    };
    let perms = pde.perms();
    let mut table = Box::new([EptEntry::absent(); 512]);
    for (i, pte) in table.iter_mut().enumerate() {
        *pte = EptEntry::leaf(FrameNumber(pde.frame.0 + i as u64), false, perms);
        if mode == SplitMode::LinuxLazy {
            pte.present = false;
        }
    }
    if mode == SplitMode::VmFriendly {
        stats.ept_entries_written += ENTRIES_PER_HUGE;
    }
    space.set_mapping(region, RegionMapping::BaseTable(table));
    tlb.flush(FlushScope::Region(region));
    stats.splits += 1;
    stats.tlb_flushes += 1;
    Ok(())
}

/// Rebuild one huge leaf from a fully present base table. Contents move to a
/// fresh 512-aligned run; `is_shared` vetoes collapse while any frame of the
/// region is deduplicated.
pub fn collapse_huge_region(
    space: &mut EptSpace,
    tlb: &mut Tlb,
    region: u64,
    mode: SplitMode,
    stats: &mut RemapStats,
    contents: &mut ContentStore,
    is_shared: impl Fn(FrameNumber) -> bool,
) -> Result<(), RemapError> {
    let old_frames: Vec<FrameNumber> = match space.mapping(region)? {
        RegionMapping::BaseTable(table) => {
            if table.iter().any(|pte| !pte.present) {
                return Err(RemapError::MissingEntries(region));
            }
            if let Some(pte) = table.iter().find(|pte| is_shared(pte.frame)) {
                return Err(RemapError::SharedFrame(region, pte.frame));
            }
            table.iter().map(|pte| pte.frame).collect()
        }
        _ => return Err(RemapError::MissingEntries(region)),
    };
    let perms = match space.mapping(region)? {
        RegionMapping::BaseTable(table) => table[0].perms(),
        _ => unreachable!(),
    };
    let new_base = space
        .allocator
        .alloc_aligned_run(ENTRIES_PER_HUGE, ENTRIES_PER_HUGE);
    for (i, old) in old_frames.iter().enumerate() {
        contents.move_frame(*old, FrameNumber(new_base.0 + i as u64));
    }
    stats.copies_bytes += HUGE_PAGE_BYTES;
    let entry = EptEntry::leaf(new_base, true, perms);
    match mode {
        SplitMode::VmFriendly => {
            space.set_mapping(region, RegionMapping::HugeLeaf(entry));
            stats.ept_entries_written += 1;
        }
        SplitMode::LinuxLazy => {
            space.set_mapping(region, RegionMapping::Unmapped);
            space.stage_pending_huge(region, entry);
        }
    }
    tlb.flush(FlushScope::Region(region));
    stats.collapses += 1;
    stats.tlb_flushes += 1;
    Ok(())
}
