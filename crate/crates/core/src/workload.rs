//! Seeded generators for access traces and VM contents, the CCDF reduction,
//! and the binary trace file format.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::content::{ContentStore, FrameContent};
use crate::ept::FrameNumber;
use crate::mmu::{AccessEvent, AccessKind};
use crate::monitor::AccessHistogram;
use crate::rng::SimRng;
use crate::{BASE_PAGE_BYTES, ENTRIES_PER_HUGE, HUGE_PAGE_BYTES};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
#[serde(tag = "kind")]
pub enum Pattern {
    Sequential,
    UniformRandom,
    Hotspot {
        /// Fraction of the working set receiving the focused accesses.
        hot_fraction: f64,
        /// Fraction of events sent to that hot set.
        hot_op_fraction: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TraceSpec {
    /// Working-set size in bytes; must be a multiple of 2 MiB.
    pub wss: u64,
    pub pattern: Pattern,
    pub read_fraction: f64,
    /// Fraction of focused regions that are skewed. Under a hotspot pattern
    /// this applies to the hot region set, otherwise to all regions.
    pub unbalanced_fraction: f64,
    /// Skew of the unbalanced regions; eligible offsets per such region are
    /// `max(1, round((1 - target_psr) * 512))`.
    pub target_psr: f64,
    pub events: u64,
    pub seed: u64,
}

impl Default for TraceSpec {
    fn default() -> Self {
        TraceSpec {
            wss: 8 * HUGE_PAGE_BYTES,
            pattern: Pattern::UniformRandom,
            read_fraction: 0.5,
            unbalanced_fraction: 0.0,
            target_psr: 0.9,
            events: 20_480,
            seed: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContentSpec {
    pub vm_count: u64,
    pub frames_per_vm: u64,
    /// Fraction of each VM's frames holding cross-VM-identical contents.
    pub duplicate_fraction: f64,
    /// Fraction of each VM's frames that are all-zero.
    pub zero_fraction: f64,
    pub seed: u64,
}

impl Default for ContentSpec {
    fn default() -> Self {
        ContentSpec {
            vm_count: 2,
            frames_per_vm: 2048,
            duplicate_fraction: 0.0,
            zero_fraction: 0.0,
            seed: 1,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum WorkloadError {
    #[error("working set must be a non-zero multiple of {HUGE_PAGE_BYTES} bytes, got {0}")]
    BadWss(u64),
    #[error("event count must be non-zero")]
    ZeroEvents,
    #[error("fraction {name} = {value} outside [0,1]")]
    BadFraction { name: &'static str, value: f64 },
    #[error("empty histogram")]
    EmptyHistogram,
    #[error("trace file: {0}")]
    BadTraceFile(String),
}

/// Number of eligible base offsets in a skewed region.
pub fn eligible_offsets_for_psr(target_psr: f64) -> u64 {
    let raw = ((1.0 - target_psr) * ENTRIES_PER_HUGE as f64 + 0.5).floor() as u64;
    raw.clamp(1, ENTRIES_PER_HUGE)
}

/// Seeded access trace over a working set. Region roles (focused, skewed)
/// and per-region eligible offsets are deterministic functions of the spec.
#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    pub events: Vec<AccessEvent>,
    pub spec: TraceSpec,
    /// Regions the hotspot pattern focuses on (all regions otherwise).
    pub focused_regions: Vec<u64>,
    /// Skewed regions and their eligible offsets.
    pub unbalanced: Vec<(u64, Vec<u64>)>,
}

impl Trace {
    /// Events with tick in `[window * window_ticks, (window+1) * window_ticks)`.
    pub fn window(&self, window: u64, window_ticks: u64) -> &[AccessEvent] {
        let lo = self
            .events
            .partition_point(|e| e.tick < window * window_ticks);
        let hi = self
            .events
            .partition_point(|e| e.tick < (window + 1) * window_ticks);
        &self.events[lo..hi]
    }
}

fn check_fraction(name: &'static str, value: f64) -> Result<(), WorkloadError> {
    if !(0.0..=1.0).contains(&value) || value.is_nan() {
        return Err(WorkloadError::BadFraction { name, value });
    }
    Ok(())
}

pub fn generate_trace(spec: &TraceSpec) -> Result<Trace, WorkloadError> {
    if spec.wss == 0 || !spec.wss.is_multiple_of(HUGE_PAGE_BYTES) {
        return Err(WorkloadError::BadWss(spec.wss));
    }
    if spec.events == 0 {
        return Err(WorkloadError::ZeroEvents);
    }
    check_fraction("read_fraction", spec.read_fraction)?;
    check_fraction("unbalanced_fraction", spec.unbalanced_fraction)?;
    check_fraction("target_psr", spec.target_psr)?;
    if let Pattern::Hotspot {
        hot_fraction,
        hot_op_fraction,
    } = spec.pattern
    {
        check_fraction("hot_fraction", hot_fraction)?;
        check_fraction("hot_op_fraction", hot_op_fraction)?;
    }

    let regions = spec.wss / HUGE_PAGE_BYTES;
    let root = SimRng::new(spec.seed);

    // Focused set: under a hotspot pattern a seeded subset, otherwise all.
    let focused_regions: Vec<u64> = match spec.pattern {
        Pattern::Hotspot { hot_fraction, .. } => {
            let count = ((hot_fraction * regions as f64).round() as u64).clamp(1, regions);
            root.split("hot-set").sample_distinct(regions, count)
        }
        _ => (0..regions).collect(),
    };
    let cold_regions: Vec<u64> = (0..regions)
        .filter(|r| !focused_regions.contains(r))
        .collect();

    // Skew applies to the focused set; eligible offsets are seeded per region.
    let skewed_count =
        (spec.unbalanced_fraction * focused_regions.len() as f64).round() as usize;
    let n_eligible = eligible_offsets_for_psr(spec.target_psr);
    let unbalanced: Vec<(u64, Vec<u64>)> = focused_regions
        .iter()
        .take(skewed_count)
        .map(|&region| {
            let offsets = root
                .split_index("eligible-offsets", region)
                .sample_distinct(ENTRIES_PER_HUGE, n_eligible);
            (region, offsets)
        })
        .collect();

    let offsets_of = |region: u64| -> Option<&Vec<u64>> {
        unbalanced
            .iter()
            .find(|(r, _)| *r == region)
            .map(|(_, o)| o)
    };

    let mut ops = root.split("ops");
    let mut events = Vec::with_capacity(spec.events as usize);
    // Sequential sweeps walk the eligible frames of the focused set in
    // address order, wrapping.
    let sweep: Vec<u64> = if spec.pattern == Pattern::Sequential {
        let mut frames = Vec::new();
        let mut sorted = focused_regions.clone();
        sorted.sort_unstable();
        for region in sorted {
            match offsets_of(region) {
                Some(offsets) => {
                    frames.extend(offsets.iter().map(|o| region * ENTRIES_PER_HUGE + o))
                }
                None => frames
                    .extend((0..ENTRIES_PER_HUGE).map(|o| region * ENTRIES_PER_HUGE + o)),
            }
        }
        frames
    } else {
        Vec::new()
    };

    for tick in 0..spec.events {
        let gfn = match spec.pattern {
            Pattern::Sequential => sweep[(tick % sweep.len() as u64) as usize],
            Pattern::UniformRandom | Pattern::Hotspot { .. } => {
                let use_hot = match spec.pattern {
                    Pattern::Hotspot {
                        hot_op_fraction, ..
                    } => cold_regions.is_empty() || ops.next_bool(hot_op_fraction),
                    _ => true,
                };
                let pool = if use_hot {
                    &focused_regions
                } else {
                    &cold_regions
                };
                let region = pool[ops.next_below(pool.len() as u64) as usize];
                let offset = match offsets_of(region) {
                    Some(offsets) => offsets[ops.next_below(offsets.len() as u64) as usize],
                    None => ops.next_below(ENTRIES_PER_HUGE),
                };
                region * ENTRIES_PER_HUGE + offset
            }
        };
        let kind = if ops.next_bool(spec.read_fraction) {
            AccessKind::Read
        } else {
            AccessKind::Write
        };
        events.push(AccessEvent {
            gpa: gfn * BASE_PAGE_BYTES,
            kind,
            tick,
        });
    }

    Ok(Trace {
        events,
        spec: *spec,
        focused_regions,
        unbalanced,
    })
}

/// Per-VM content stores over disjoint host-frame ranges. Duplicate contents
/// appear once per VM at seeded per-VM positions; zero frames are all-zero;
/// the rest are unique per (vm, frame).
pub fn generate_contents(
    spec: &ContentSpec,
    host_frame_base_of: impl Fn(u64) -> u64,
) -> Result<Vec<ContentStore>, WorkloadError> {
    check_fraction("duplicate_fraction", spec.duplicate_fraction)?;
    check_fraction("zero_fraction", spec.zero_fraction)?;
    let root = SimRng::new(spec.seed);
    let frames = spec.frames_per_vm;
    let dup_count = (spec.duplicate_fraction * frames as f64).round() as u64;
    let zero_count =
        ((spec.zero_fraction * frames as f64).round() as u64).min(frames - dup_count.min(frames));

    let mut stores = Vec::new();
    for vm in 0..spec.vm_count {
        let mut store = ContentStore::default();
        let positions = permuted_positions(&root, vm, frames);
        let base = host_frame_base_of(vm);
        for (slot, &pos) in positions.iter().enumerate() {
            let slot = slot as u64;
            let content = if slot < dup_count {
                // Same logical content in every VM, different position.
                FrameContent::unique(content_id(&root, "dup", slot))
            } else if slot < dup_count + zero_count {
                FrameContent::zero()
            } else {
                FrameContent::unique(content_id(
                    &root,
                    "vm-unique",
                    (vm << 32) | slot,
                ))
            };
            store.set(FrameNumber(base + pos), content);
        }
        stores.push(store);
    }
    Ok(stores)
}

fn permuted_positions(root: &SimRng, vm: u64, frames: u64) -> Vec<u64> {
    let mut rng = root.split_index("perm", vm);
    let mut positions: Vec<u64> = (0..frames).collect();
    // Fisher-Yates.
    for i in (1..positions.len()).rev() {
        let j = rng.next_below(i as u64 + 1) as usize;
        positions.swap(i, j);
    }
    positions
}

fn content_id(root: &SimRng, label: &str, index: u64) -> u64 {
    let id = root.split_index(label, index).next_u64();
    if id == 0 {
        1
    } else {
        id
    }
}

/// Complementary CDF of access frequency, weighted by bytes. Frequencies are
/// normalized so the maximum maps to `normalize_to`; the y value at x is the
/// fraction of scanned memory with normalized frequency strictly above x.
pub fn ccdf(
    histogram: &AccessHistogram,
    normalize_to: u32,
) -> Result<Vec<(f64, f64)>, WorkloadError> {
    if histogram.is_empty() {
        return Err(WorkloadError::EmptyHistogram);
    }
    let mut weighted: Vec<(u32, u64)> = Vec::new();
    for &freq in histogram.regions.values() {
        weighted.push((freq, HUGE_PAGE_BYTES));
    }
    for &freq in histogram.frames.values() {
        weighted.push((freq, BASE_PAGE_BYTES));
    }
    let total_bytes: u64 = weighted.iter().map(|(_, b)| b).sum();
    let max_freq = weighted.iter().map(|(f, _)| *f).max().unwrap_or(0);
    let norm = |freq: u32| -> f64 {
        if max_freq == 0 {
            0.0
        } else {
            f64::from(freq) * f64::from(normalize_to) / f64::from(max_freq)
        }
    };
    let mut curve = Vec::with_capacity(normalize_to as usize + 1);
    for x in 0..=normalize_to {
        let above: u64 = weighted
            .iter()
            .filter(|(f, _)| norm(*f) > f64::from(x))
            .map(|(_, b)| b)
            .sum();
        curve.push((f64::from(x), above as f64 / total_bytes as f64));
    }
    Ok(curve)
}

const TRACE_MAGIC: &[u8; 8] = b"FHPMTRC\0";
const TRACE_VERSION: u32 = 1;

/// Write a trace as the 16-byte magic+version header followed by
/// little-endian (tick: u64, gpa: u64, kind: u8) records.
pub fn write_trace(mut out: impl Write, trace: &Trace) -> std::io::Result<()> {
    out.write_all(TRACE_MAGIC)?;
    out.write_all(&TRACE_VERSION.to_le_bytes())?;
    out.write_all(&0u32.to_le_bytes())?;
    for event in &trace.events {
        out.write_all(&event.tick.to_le_bytes())?;
        out.write_all(&event.gpa.to_le_bytes())?;
        out.write_all(&[match event.kind {
            AccessKind::Read => 0u8,
            AccessKind::Write => 1u8,
        }])?;
    }
    Ok(())
}

pub fn read_trace(mut input: impl Read) -> Result<Vec<AccessEvent>, WorkloadError> {
    let mut header = [0u8; 16];
    input
        .read_exact(&mut header)
        .map_err(|e| WorkloadError::BadTraceFile(e.to_string()))?;
    if &header[..8] != TRACE_MAGIC {
        return Err(WorkloadError::BadTraceFile("bad magic".into()));
    }
    let version = u32::from_le_bytes(header[8..12].try_into().unwrap());
    if version != TRACE_VERSION {
        return Err(WorkloadError::BadTraceFile(format!(
            "unsupported version {version}"
        )));
    }
    let mut events = Vec::new();
    let mut record = [0u8; 17];
    loop {
        match input.read_exact(&mut record) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(WorkloadError::BadTraceFile(e.to_string())),
        }
        events.push(AccessEvent {
            tick: u64::from_le_bytes(record[0..8].try_into().unwrap()),
            gpa: u64::from_le_bytes(record[8..16].try_into().unwrap()),
            kind: match record[16] {
                0 => AccessKind::Read,
                1 => AccessKind::Write,
                k => {
                    return Err(WorkloadError::BadTraceFile(format!(
                        "bad access kind {k}"
                    )))
                }
            },
        });
    }
    Ok(events)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eligible_offsets_rounding() {
        assert_eq!(eligible_offsets_for_psr(0.9), 51);
        assert_eq!(eligible_offsets_for_psr(0.0), 512);
        // A fully skewed target still leaves one touchable offset.
        assert_eq!(eligible_offsets_for_psr(1.0), 1);
        let realized: f64 = 1.0 - 51.0 / 512.0;
        assert!((realized - 0.9004).abs() < 1e-4);
    }

    #[test]
    fn trace_is_deterministic() {
        let spec = TraceSpec {
            unbalanced_fraction: 0.5,
            events: 5000,
            ..TraceSpec::default()
        };
        let a = generate_trace(&spec).unwrap();
        let b = generate_trace(&spec).unwrap();
        assert_eq!(a, b);
        let other = generate_trace(&TraceSpec { seed: 2, ..spec }).unwrap();
        assert_ne!(a.events, other.events);
    }

    #[test]
    fn trace_rejects_bad_specs() {
        assert!(matches!(
            generate_trace(&TraceSpec {
                wss: 0,
                ..TraceSpec::default()
            }),
            Err(WorkloadError::BadWss(0))
        ));
        assert!(matches!(
            generate_trace(&TraceSpec {
                events: 0,
                ..TraceSpec::default()
            }),
            Err(WorkloadError::ZeroEvents)
        ));
        assert!(matches!(
            generate_trace(&TraceSpec {
                read_fraction: 1.5,
                ..TraceSpec::default()
            }),
            Err(WorkloadError::BadFraction { .. })
        ));
    }

    #[test]
    fn unbalanced_regions_stay_within_eligible_offsets() {
        let spec = TraceSpec {
            unbalanced_fraction: 1.0,
            target_psr: 0.9,
            events: 50_000,
            ..TraceSpec::default()
        };
        let trace = generate_trace(&spec).unwrap();
        for (region, offsets) in &trace.unbalanced {
            assert_eq!(offsets.len(), 51);
            let touched: std::collections::BTreeSet<u64> = trace
                .events
                .iter()
                .map(|e| e.gpa / BASE_PAGE_BYTES)
                .filter(|gfn| gfn / ENTRIES_PER_HUGE == *region)
                .map(|gfn| gfn % ENTRIES_PER_HUGE)
                .collect();
            assert!(touched.iter().all(|o| offsets.contains(o)));
        }
    }

    #[test]
    fn hotspot_event_share_tracks_fraction() {
        let spec = TraceSpec {
            wss: 20 * HUGE_PAGE_BYTES,
            pattern: Pattern::Hotspot {
                hot_fraction: 0.2,
                hot_op_fraction: 0.8,
            },
            events: 1_000_000,
            ..TraceSpec::default()
        };
        let trace = generate_trace(&spec).unwrap();
        let hot: std::collections::BTreeSet<u64> =
            trace.focused_regions.iter().copied().collect();
        let hot_events = trace
            .events
            .iter()
            .filter(|e| hot.contains(&(e.gpa / HUGE_PAGE_BYTES)))
            .count();
        let share = hot_events as f64 / trace.events.len() as f64;
        assert!((share - 0.8).abs() < 0.01, "share {share}");
    }

    #[test]
    fn read_fraction_drives_kinds() {
        let spec = TraceSpec {
            read_fraction: 1.0,
            events: 1000,
            ..TraceSpec::default()
        };
        let trace = generate_trace(&spec).unwrap();
        assert!(trace.events.iter().all(|e| e.kind == AccessKind::Read));
    }

    #[test]
    fn sequential_sweep_touches_each_frame_once_per_lap() {
        let spec = TraceSpec {
            wss: 2 * HUGE_PAGE_BYTES,
            pattern: Pattern::Sequential,
            events: 1024,
            read_fraction: 1.0,
            ..TraceSpec::default()
        };
        let trace = generate_trace(&spec).unwrap();
        let frames: std::collections::BTreeSet<u64> =
            trace.events.iter().map(|e| e.gpa / BASE_PAGE_BYTES).collect();
        assert_eq!(frames.len(), 1024);
        // Ticks are strictly increasing from zero.
        assert!(trace
            .events
            .iter()
            .enumerate()
            .all(|(i, e)| e.tick == i as u64));
    }

    #[test]
    fn duplicate_contents_pair_across_vms() {
        let spec = ContentSpec {
            vm_count: 2,
            frames_per_vm: 64,
            duplicate_fraction: 1.0,
            zero_fraction: 0.0,
            seed: 5,
        };
        let stores = generate_contents(&spec, |vm| vm * 1_000_000).unwrap();
        let ids = |s: &ContentStore| -> std::collections::BTreeSet<u64> {
            s.iter().map(|(_, c)| c.content_id).collect()
        };
        assert_eq!(ids(&stores[0]), ids(&stores[1]));
        assert_eq!(stores[0].len(), 64);
    }

    #[test]
    fn unique_contents_do_not_collide() {
        let spec = ContentSpec {
            vm_count: 2,
            frames_per_vm: 64,
            duplicate_fraction: 0.0,
            zero_fraction: 0.0,
            seed: 5,
        };
        let stores = generate_contents(&spec, |vm| vm * 1_000_000).unwrap();
        let mut all: Vec<u64> = stores
            .iter()
            .flat_map(|s| s.iter().map(|(_, c)| c.content_id).collect::<Vec<_>>())
            .collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 128);
    }

    #[test]
    fn zero_fraction_marks_zero_frames() {
        let spec = ContentSpec {
            vm_count: 1,
            frames_per_vm: 100,
            duplicate_fraction: 0.0,
            zero_fraction: 0.1,
            seed: 5,
        };
        let stores = generate_contents(&spec, |_| 0).unwrap();
        let zeros = stores[0].iter().filter(|(_, c)| c.zero).count();
        assert_eq!(zeros, 10);
    }

    #[test]
    fn ccdf_is_monotone_non_increasing() {
        let mut hist = AccessHistogram::default();
        for i in 0..20 {
            hist.frames.insert(i, (i % 7) as u32);
        }
        let curve = ccdf(&hist, 100).unwrap();
        assert_eq!(curve.len(), 101);
        assert!(curve.windows(2).all(|w| w[0].1 >= w[1].1));
    }

    #[test]
    fn ccdf_uniform_frequency_is_a_step() {
        let mut hist = AccessHistogram::default();
        hist.frames.insert(0, 5);
        hist.frames.insert(1, 5);
        let curve = ccdf(&hist, 100).unwrap();
        // Everything sits at normalized 100: fraction 1 below it, 0 at the top.
        assert_eq!(curve[0].1, 1.0);
        assert_eq!(curve[99].1, 1.0);
        assert_eq!(curve[100].1, 0.0);
    }

    #[test]
    fn ccdf_half_cold_half_hot() {
        let mut hist = AccessHistogram::default();
        hist.frames.insert(0, 0);
        hist.frames.insert(1, 8);
        let curve = ccdf(&hist, 100).unwrap();
        assert_eq!(curve[0].1, 0.5);
        assert_eq!(curve[50].1, 0.5);
        assert_eq!(curve[100].1, 0.0);
    }

    #[test]
    fn ccdf_rejects_empty_histogram() {
        assert_eq!(
            ccdf(&AccessHistogram::default(), 100).unwrap_err(),
            WorkloadError::EmptyHistogram
        );
    }

    #[test]
    fn trace_file_round_trip() {
        let spec = TraceSpec {
            events: 100,
            ..TraceSpec::default()
        };
        let trace = generate_trace(&spec).unwrap();
        let mut buf = Vec::new();
        write_trace(&mut buf, &trace).unwrap();
        assert_eq!(buf.len(), 16 + 17 * 100);
        let events = read_trace(buf.as_slice()).unwrap();
        assert_eq!(events, trace.events);
    }

    #[test]
    fn trace_file_rejects_bad_magic() {
        let err = read_trace(&b"NOTATRACE_______"[..]).unwrap_err();
        assert!(matches!(err, WorkloadError::BadTraceFile(_)));
    }
}
