//! Frame contents, modeled as canonical generator seeds instead of raw
//! bytes. Two frames are equal exactly when their expanded 4 KiB streams
//! are equal; the 64-bit digest is only a search key, never proof.

use std::collections::BTreeMap;

use crate::ept::FrameNumber;
use crate::rng::SimRng;
use crate::BASE_PAGE_BYTES;

/// Content of one host frame. `content_id` seeds the canonical byte
/// generator; id 0 is the all-zero frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameContent {
    pub content_id: u64,
    pub digest: u64,
    pub zero: bool,
}

impl FrameContent {
    pub fn zero() -> Self {
        FrameContent {
            content_id: 0,
            digest: digest_of(0, true),
            zero: true,
        }
    }

    pub fn unique(content_id: u64) -> Self {
        debug_assert!(content_id != 0);
        FrameContent {
            content_id,
            digest: digest_of(content_id, false),
            zero: false,
        }
    }

    /// Expand the canonical 4 KiB byte stream for this content.
    pub fn bytes(&self) -> Vec<u8> {
        if self.zero {
            return vec![0u8; BASE_PAGE_BYTES as usize];
        }
        let mut rng = SimRng::new(self.content_id);
        let mut out = Vec::with_capacity(BASE_PAGE_BYTES as usize);
        while out.len() < BASE_PAGE_BYTES as usize {
            out.extend_from_slice(&rng.next_u64().to_le_bytes());
        }
        out
    }
}

fn digest_of(content_id: u64, zero: bool) -> u64 {
    // FNV-1a over the expanded stream would do; hashing the canonical id is
    // byte-equivalent because the stream is a pure function of it.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in content_id.to_le_bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    if zero {
        h ^ 0x5a5a_5a5a_5a5a_5a5a
    } else {
        h
    }
}

/// Full comparison: expand both streams and compare bytes.
pub fn full_equal(a: &FrameContent, b: &FrameContent) -> bool {
    a.bytes() == b.bytes()
}

/// Host-frame to content map for the whole simulated host.
#[derive(Clone, Debug, Default)]
pub struct ContentStore {
    frames: BTreeMap<FrameNumber, FrameContent>,
}

impl ContentStore {
    pub fn set(&mut self, frame: FrameNumber, content: FrameContent) {
        self.frames.insert(frame, content);
    }

    pub fn get(&self, frame: FrameNumber) -> Option<&FrameContent> {
        self.frames.get(&frame)
    }

    pub fn remove(&mut self, frame: FrameNumber) -> Option<FrameContent> {
        self.frames.remove(&frame)
    }

    /// Carry a frame's content to a new frame (collapse copies).
    pub fn move_frame(&mut self, from: FrameNumber, to: FrameNumber) {
        if let Some(content) = self.frames.remove(&from) {
            self.frames.insert(to, content);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (FrameNumber, &FrameContent)> {
        self.frames.iter().map(|(f, c)| (*f, c))
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn merge_from(&mut self, other: ContentStore) {
        self.frames.extend(other.frames);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_frames_expand_to_zeroes() {
        let z = FrameContent::zero();
        assert!(z.bytes().iter().all(|b| *b == 0));
        assert_eq!(z.bytes().len(), 4096);
    }

    #[test]
    fn equal_ids_equal_bytes() {
        assert!(full_equal(&FrameContent::unique(7), &FrameContent::unique(7)));
        assert!(!full_equal(&FrameContent::unique(7), &FrameContent::unique(8)));
        assert!(!full_equal(&FrameContent::unique(7), &FrameContent::zero()));
    }

    #[test]
    fn move_frame_carries_content() {
        let mut store = ContentStore::default();
        store.set(FrameNumber(3), FrameContent::unique(42));
        store.move_frame(FrameNumber(3), FrameNumber(9));
        assert!(store.get(FrameNumber(3)).is_none());
        assert_eq!(store.get(FrameNumber(9)).unwrap().content_id, 42);
    }
}
