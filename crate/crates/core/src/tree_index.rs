//! Addressing of the full binary tree.
//!
//! A node is identified by its generation and its position inside that
//! generation. The bits of `index`, read from the most significant of the
//! `generation` bits down, spell the path from the root (`0` = first child,
//! `1` = second child). Navigation is plain integer arithmetic, and a whole
//! generation maps onto a contiguous slice `0..2^generation`.

use std::fmt;

use crate::error::{BmcError, Result};

/// Deepest generation that can be addressed. Indices are `u64`; a few guard
/// bits are kept so that tree sizes `2^(n+1) - 1` never overflow.
pub const MAX_DEPTH: u32 = 60;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId {
    generation: u32,
    index: u64,
}

impl NodeId {
    pub const ROOT: NodeId = NodeId {
        generation: 0,
        index: 0,
    };

    pub fn new(generation: u32, index: u64) -> Result<Self> {
        if generation > MAX_DEPTH || index >= (1u64 << generation) {
            return Err(BmcError::InvalidNode { generation, index });
        }
        Ok(Self { generation, index })
    }

    pub fn generation(self) -> u32 {
        self.generation
    }

    pub fn index(self) -> u64 {
        self.index
    }

    pub fn is_root(self) -> bool {
        self.generation == 0
    }

    /// The two children `(g+1, 2k)` and `(g+1, 2k+1)`.
    pub fn children(self) -> Result<(NodeId, NodeId)> {
        let generation = self.generation + 1;
        check_depth(generation)?;
        let left = self.index << 1;
        Ok((
            NodeId {
                generation,
                index: left,
            },
            NodeId {
                generation,
                index: left | 1,
            },
        ))
    }

    pub fn parent(self) -> Option<NodeId> {
        if self.generation == 0 {
            return None;
        }
        Some(NodeId {
            generation: self.generation - 1,
            index: self.index >> 1,
        })
    }

    /// `0` for a first child, `1` for a second child, `None` for the root.
    pub fn side(self) -> Option<u8> {
        (self.generation > 0).then_some((self.index & 1) as u8)
    }

    /// Position in level-order (breadth-first) enumeration of the tree.
    pub fn level_order_position(self) -> u64 {
        (1u64 << self.generation) - 1 + self.index
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.generation == 0 {
            return f.write_str("∅");
        }
        for bit in (0..self.generation).rev() {
            let c = if (self.index >> bit) & 1 == 0 { '0' } else { '1' };
            write!(f, "{c}")?;
        }
        Ok(())
    }
}

pub fn check_depth(depth: u32) -> Result<()> {
    if depth > MAX_DEPTH {
        Err(BmcError::DepthOutOfRange {
            depth,
            max: MAX_DEPTH,
        })
    } else {
        Ok(())
    }
}

/// `|G_n| = 2^n`.
pub fn generation_size(n: u32) -> Result<u64> {
    check_depth(n)?;
    Ok(1u64 << n)
}

/// `|T_n| = 2^(n+1) - 1`.
pub fn tree_size(n: u32) -> Result<u64> {
    check_depth(n)?;
    Ok((1u64 << (n + 1)) - 1)
}

/// Level-order iterator over generation `n`.
pub fn generation(n: u32) -> Result<impl DoubleEndedIterator<Item = NodeId>> {
    let size = generation_size(n)?;
    Ok((0..size).map(move |index| NodeId {
        generation: n,
        index,
    }))
}

/// Level-order iterator over the tree `T_n`.
pub fn tree(n: u32) -> Result<impl Iterator<Item = NodeId>> {
    check_depth(n)?;
    Ok((0..=n).flat_map(|g| {
        (0..(1u64 << g)).map(move |index| NodeId {
            generation: g,
            index,
        })
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sizes() {
        assert_eq!(generation_size(0).unwrap(), 1);
        assert_eq!(generation_size(5).unwrap(), 32);
        assert_eq!(tree_size(3).unwrap(), 15);
        assert_eq!(tree_size(MAX_DEPTH).unwrap(), (1u64 << 61) - 1);
        assert!(matches!(
            generation_size(MAX_DEPTH + 1),
            Err(BmcError::DepthOutOfRange { .. })
        ));
    }

    #[test]
    fn navigation() {
        let (l, r) = NodeId::ROOT.children().unwrap();
        assert_eq!((l, r), (NodeId::new(1, 0).unwrap(), NodeId::new(1, 1).unwrap()));
        let (l, r) = NodeId::new(2, 3).unwrap().children().unwrap();
        assert_eq!((l.generation(), l.index()), (3, 6));
        assert_eq!((r.generation(), r.index()), (3, 7));
        assert_eq!(NodeId::new(3, 6).unwrap().parent(), Some(NodeId::new(2, 3).unwrap()));
        assert_eq!(NodeId::ROOT.parent(), None);
        assert_eq!(NodeId::new(3, 6).unwrap().to_string(), "110");
    }

    #[test]
    fn rejects_bad_addresses() {
        assert!(NodeId::new(2, 4).is_err());
        assert!(NodeId::new(MAX_DEPTH + 1, 0).is_err());
        let deepest = NodeId::new(MAX_DEPTH, 0).unwrap();
        assert!(matches!(deepest.children(), Err(BmcError::DepthOutOfRange { .. })));
    }

    #[test]
    fn generation_enumeration_is_complete() {
        let ids: Vec<_> = generation(4).unwrap().collect();
        assert_eq!(ids.len(), 16);
        for (k, id) in ids.iter().enumerate() {
            assert_eq!(id.index(), k as u64);
        }
        let tree: Vec<_> = tree(3).unwrap().collect();
        assert_eq!(tree.len() as u64, tree_size(3).unwrap());
        for (pos, id) in tree.iter().enumerate() {
            assert_eq!(id.level_order_position(), pos as u64);
        }
    }

    proptest! {
        #[test]
        fn parent_inverts_children(g in 0u32..MAX_DEPTH, raw in any::<u64>()) {
            let id = NodeId::new(g, raw % (1u64 << g)).unwrap();
            let (l, r) = id.children().unwrap();
            prop_assert_eq!(l.parent(), Some(id));
            prop_assert_eq!(r.parent(), Some(id));
            prop_assert_eq!(l.side(), Some(0));
            prop_assert_eq!(r.side(), Some(1));
        }
    }
}
