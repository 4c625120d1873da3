//! Static aggregation topologies: complete k-ary tree construction and the
//! reconfiguration arithmetic used when parties join an already-deployed tree.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Hardware profile of one aggregator container plus its timing model.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContainerSpec {
    pub vcpus: u32,
    pub ram_gb: u32,
    /// CPU time to fold one update (or one partial aggregate) into a node's
    /// running sum.
    pub per_update_cpu_seconds: f64,
    /// CPU time of the final optimizer step at the root.
    pub finalize_cpu_seconds: f64,
    /// Time to instantiate a fresh aggregator container.
    pub startup_seconds: f64,
}

impl Default for ContainerSpec {
    fn default() -> Self {
        ContainerSpec {
            vcpus: 2,
            ram_gb: 4,
            per_update_cpu_seconds: 0.3,
            finalize_cpu_seconds: 0.0,
            startup_seconds: 1.5,
        }
    }
}

impl ContainerSpec {
    pub fn validate(&self) -> Result<(), TopologyError> {
        if self.per_update_cpu_seconds <= 0.0 || !self.per_update_cpu_seconds.is_finite() {
            return Err(TopologyError::InvalidSpec("per_update_cpu_seconds"));
        }
        if self.startup_seconds <= 0.0 || !self.startup_seconds.is_finite() {
            return Err(TopologyError::InvalidSpec("startup_seconds"));
        }
        if self.finalize_cpu_seconds < 0.0 || !self.finalize_cpu_seconds.is_finite() {
            return Err(TopologyError::InvalidSpec("finalize_cpu_seconds"));
        }
        if self.vcpus == 0 || self.ram_gb == 0 {
            return Err(TopologyError::InvalidSpec("vcpus/ram_gb"));
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TopologyError {
    #[error("party count must be >= 1, got {0}")]
    NoParties(usize),
    #[error("fanout must be >= 2, got {0}")]
    FanoutTooSmall(usize),
    #[error("invalid container spec field {0}")]
    InvalidSpec(&'static str),
}

/// Index of a node within a [`TreePlan`].
pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode {
    pub id: NodeId,
    /// Leaf nodes own a contiguous block of party ids; internal nodes own none.
    pub parties: Vec<u32>,
    pub children: Vec<NodeId>,
    pub parent: Option<NodeId>,
    /// Distance from the leaf level (leaves are 0).
    pub level: usize,
}

impl TreeNode {
    pub fn is_leaf(&self) -> bool {
        self.level == 0
    }

    /// How many inputs this node folds per round: parties for a leaf,
    /// child partials for an internal node.
    pub fn fan_in(&self) -> usize {
        if self.is_leaf() {
            self.parties.len()
        } else {
            self.children.len()
        }
    }
}

/// A complete, balanced k-ary aggregation tree over `party_count` parties.
#[derive(Debug, Clone, PartialEq)]
pub struct TreePlan {
    pub fanout: usize,
    pub party_count: usize,
    pub nodes: Vec<TreeNode>,
    pub root: NodeId,
    /// Node ids of the leaf level, ascending by party block.
    pub leaves: Vec<NodeId>,
}

impl TreePlan {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn leaf_count(&self) -> usize {
        self.leaves.len()
    }

    /// Leaf responsible for a given party.
    pub fn leaf_of(&self, party: u32) -> Option<NodeId> {
        if (party as usize) >= self.party_count {
            return None;
        }
        Some(self.leaves[party as usize / self.fanout])
    }

    /// Number of levels including the leaf level.
    pub fn depth(&self) -> usize {
        self.nodes[self.root].level + 1
    }
}

/// Builds the aggregation tree: `ceil(n/k)` leaves over contiguous ascending
/// party blocks, then internal levels grouping `k` nodes at a time until a
/// single root remains.
pub fn build_tree(party_count: usize, fanout: usize) -> Result<TreePlan, TopologyError> {
    if party_count < 1 {
        return Err(TopologyError::NoParties(party_count));
    }
    if fanout < 2 {
        return Err(TopologyError::FanoutTooSmall(fanout));
    }

    let mut nodes: Vec<TreeNode> = Vec::new();
    let leaf_count = party_count.div_ceil(fanout);
    let mut leaves = Vec::with_capacity(leaf_count);
    for leaf_index in 0..leaf_count {
        let lo = leaf_index * fanout;
        let hi = ((leaf_index + 1) * fanout).min(party_count);
        let id = nodes.len();
        nodes.push(TreeNode {
            id,
            parties: (lo as u32..hi as u32).collect(),
            children: Vec::new(),
            parent: None,
            level: 0,
        });
        leaves.push(id);
    }

    let mut current = leaves.clone();
    let mut level = 0;
    while current.len() > 1 {
        level += 1;
        let mut next = Vec::with_capacity(current.len().div_ceil(fanout));
        for group in current.chunks(fanout) {
            let id = nodes.len();
            for &child in group {
                nodes[child].parent = Some(id);
            }
            nodes.push(TreeNode {
                id,
                parties: Vec::new(),
                children: group.to_vec(),
                parent: None,
                level,
            });
            next.push(id);
        }
        current = next;
    }

    let root = current[0];
    Ok(TreePlan {
        fanout,
        party_count,
        nodes,
        root,
        leaves,
    })
}

/// Result of admitting joining parties into a deployed tree.
#[derive(Debug, Clone)]
pub struct Reconfiguration {
    pub plan: TreePlan,
    /// Containers that had to be instantiated for the new shape.
    pub nodes_added: usize,
    /// Wall time the overlay is blocked: instantiation of new containers plus
    /// a constant for re-wiring parent/child endpoints.
    pub delay_seconds: f64,
    pub events: u32,
}

/// Rebuilds the tree for `party_count + joining` parties. Existing parties
/// keep their contiguous blocks, so only trailing leaves and any widened
/// internal levels require fresh containers.
pub fn reconfigure_tree(
    plan: &TreePlan,
    joining: usize,
    spec: &ContainerSpec,
    retopology_seconds: f64,
) -> Result<Reconfiguration, TopologyError> {
    if joining == 0 {
        return Ok(Reconfiguration {
            plan: plan.clone(),
            nodes_added: 0,
            delay_seconds: 0.0,
            events: 0,
        });
    }
    let new_plan = build_tree(plan.party_count + joining, plan.fanout)?;
    let nodes_added = new_plan.node_count().saturating_sub(plan.node_count());
    let delay_seconds = nodes_added as f64 * spec.startup_seconds + retopology_seconds;
    Ok(Reconfiguration {
        plan: new_plan,
        nodes_added,
        delay_seconds,
        events: 1,
    })
}
