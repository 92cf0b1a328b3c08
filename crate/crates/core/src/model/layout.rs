use std::collections::HashMap;

use super::{ModelError, SystemTopology};

/// One state block: a robot node (12 entries, pose perturbation then strain) or a rigid body (6).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BlockId {
    Node { robot: usize, node: usize },
    Body(usize),
}

impl BlockId {
    pub fn dim(&self) -> usize {
        match self {
            BlockId::Node { .. } => 12,
            BlockId::Body(_) => 6,
        }
    }
}

impl std::fmt::Display for BlockId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BlockId::Node { robot, node } => write!(f, "robot:{robot}:{node}"),
            BlockId::Body(b) => write!(f, "body:{b}"),
        }
    }
}

/// Bijection between state blocks and contiguous block indices / scalar offsets.
#[derive(Clone, Debug, PartialEq)]
pub struct StateLayout {
    blocks: Vec<BlockId>,
    offsets: Vec<usize>,
    index: HashMap<BlockId, usize>,
    dim: usize,
}

impl StateLayout {
    /// Robots in declaration order, nodes by ascending arclength, rigid bodies last.
    pub fn new(topology: &SystemTopology) -> Self {
        let order: Vec<usize> = (0..topology.robots.len()).collect();
        Self::with_robot_order(topology, &order).expect("identity order is valid")
    }

    /// Same layout with robots visited in `order` (a permutation of robot indices).
    pub fn with_robot_order(topology: &SystemTopology, order: &[usize]) -> Result<Self, ModelError> {
        let mut seen = vec![false; topology.robots.len()];
        if order.len() != seen.len() {
            return Err(ModelError::schema("robot order", "must list every robot exactly once"));
        }
        for &r in order {
            if r >= seen.len() || std::mem::replace(&mut seen[r], true) {
                return Err(ModelError::schema("robot order", "must list every robot exactly once"));
            }
        }
        let mut blocks = Vec::new();
        for &robot in order {
            for node in 0..topology.robots[robot].node_count() {
                blocks.push(BlockId::Node { robot, node });
            }
        }
        blocks.extend((0..topology.bodies.len()).map(BlockId::Body));
        Ok(Self::from_blocks(blocks))
    }

    /// Arbitrary block order. Every block must appear once.
    pub fn from_blocks(blocks: Vec<BlockId>) -> Self {
        let mut offsets = Vec::with_capacity(blocks.len());
        let mut dim = 0;
        for b in &blocks {
            offsets.push(dim);
            dim += b.dim();
        }
        let index = blocks.iter().enumerate().map(|(i, b)| (*b, i)).collect();
        Self {
            blocks,
            offsets,
            index,
            dim,
        }
    }

    /// Reorders blocks so that the block now at position `i` is the one previously at `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self::from_blocks(perm.iter().map(|&p| self.blocks[p]).collect())
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn total_dim(&self) -> usize {
        self.dim
    }

    pub fn blocks(&self) -> &[BlockId] {
        &self.blocks
    }

    pub fn block(&self, i: usize) -> BlockId {
        self.blocks[i]
    }

    pub fn index_of(&self, b: &BlockId) -> usize {
        self.index[b]
    }

    pub fn offset(&self, i: usize) -> usize {
        self.offsets[i]
    }

    pub fn dim(&self, i: usize) -> usize {
        self.blocks[i].dim()
    }
}
