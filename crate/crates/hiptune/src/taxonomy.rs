//! The 3-level attack taxonomy: live / {physical, digital} at level 1, five
//! coarse attack groups at level 2, fourteen fine categories at level 3, and
//! a configurable number of leaf attack methods (default 54) hanging off the
//! level-3 nodes. Node ids are dense and stable under serialization.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{fnv1a_bytes, fnv1a_init, fnv1a_u64};

pub const LIVE: &str = "live";
pub const PHYSICAL: &str = "physical";
pub const DIGITAL: &str = "digital";

/// (level-2 name, level-1 parent, [(level-3 name, default method count)])
const DEFAULT_STRUCTURE: &[(&str, &str, &[(&str, usize)])] = &[
    ("2D", PHYSICAL, &[("print", 3), ("replay", 3), ("cutouts", 2)]),
    ("3D", PHYSICAL, &[("transparent", 2), ("plaster", 2), ("resin", 2)]),
    (
        "manipulation",
        DIGITAL,
        &[("attribute-edit", 5), ("face-swap", 5), ("video-driven", 5)],
    ),
    ("adversarial", DIGITAL, &[("pixel-level", 5), ("semantic-level", 5)]),
    (
        "generation",
        DIGITAL,
        &[("id-consistent", 5), ("style-transfer", 5), ("prompt-based", 5)],
    ),
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaxonomyNode {
    pub id: u16,
    pub name: String,
    /// 1, 2, or 3.
    pub level: u8,
    pub parent: Option<u16>,
    /// Leaf attack methods owned by this node (level 3 only).
    pub method_ids: Vec<u16>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackTaxonomy {
    nodes: Vec<TaxonomyNode>,
    n_methods: u16,
}

/// Build the attack taxonomy with the default method allocation (54 leaves).
pub fn build_taxonomy() -> AttackTaxonomy {
    build_taxonomy_with(&BTreeMap::new()).expect("default taxonomy is valid")
}

/// Build the taxonomy with per-level-3-node method-count overrides, keyed by
/// node name. Unknown names and zero counts are configuration errors.
pub fn build_taxonomy_with(leaf_methods_per_node: &BTreeMap<String, usize>) -> Result<AttackTaxonomy> {
    let known: Vec<&str> = DEFAULT_STRUCTURE
        .iter()
        .flat_map(|(_, _, leaves)| leaves.iter().map(|(n, _)| *n))
        .collect();
    for (name, count) in leaf_methods_per_node {
        if !known.contains(&name.as_str()) {
            return Err(Error::Config(format!(
                "unknown level-3 node in leaf method map: {name}"
            )));
        }
        if *count == 0 {
            return Err(Error::Config(format!(
                "level-3 node {name} must own at least one leaf method"
            )));
        }
    }

    let mut nodes: Vec<TaxonomyNode> = Vec::new();
    let push = |nodes: &mut Vec<TaxonomyNode>, name: &str, level: u8, parent: Option<u16>| -> u16 {
        let id = nodes.len() as u16;
        nodes.push(TaxonomyNode {
            id,
            name: name.to_string(),
            level,
            parent,
            method_ids: Vec::new(),
        });
        id
    };

    // Level 1 in canonical child order: live, physical, digital.
    let _live = push(&mut nodes, LIVE, 1, None);
    let physical = push(&mut nodes, PHYSICAL, 1, None);
    let digital = push(&mut nodes, DIGITAL, 1, None);

    let mut level3: Vec<(u16, &[(&str, usize)])> = Vec::new();
    for (l2_name, l1_name, leaves) in DEFAULT_STRUCTURE {
        let l1 = if *l1_name == PHYSICAL { physical } else { digital };
        let l2 = push(&mut nodes, l2_name, 2, Some(l1));
        level3.push((l2, leaves));
    }
    let mut l3_ids = Vec::new();
    for (l2, leaves) in &level3 {
        for (name, default_count) in leaves.iter() {
            let id = push(&mut nodes, name, 3, Some(*l2));
            let count = leaf_methods_per_node.get(*name).copied().unwrap_or(*default_count);
            l3_ids.push((id, count));
        }
    }

    // Dense method ids in level-3 node order.
    let mut next_method = 0u16;
    for (id, count) in l3_ids {
        let node = &mut nodes[id as usize];
        node.method_ids = (next_method..next_method + count as u16).collect();
        next_method += count as u16;
    }

    AttackTaxonomy::from_nodes(nodes)
}

impl AttackTaxonomy {
    /// Validating constructor; rejects duplicate names, broken parent chains
    /// and non-dense ids.
    pub fn from_nodes(nodes: Vec<TaxonomyNode>) -> Result<Self> {
        let mut names = std::collections::BTreeSet::new();
        for node in &nodes {
            if !names.insert(node.name.clone()) {
                return Err(Error::Config(format!("duplicate node name: {}", node.name)));
            }
        }
        for (i, node) in nodes.iter().enumerate() {
            if node.id as usize != i {
                return Err(Error::Config(format!(
                    "node ids must be dense: found {} at position {i}",
                    node.id
                )));
            }
            match (node.level, node.parent) {
                (1, None) => {}
                (1, Some(_)) => {
                    return Err(Error::Config(format!("level-1 node {} has a parent", node.name)))
                }
                (_, None) => {
                    return Err(Error::Config(format!("node {} lacks a parent", node.name)))
                }
                (level, Some(p)) => {
                    let parent = nodes.get(p as usize).ok_or_else(|| {
                        Error::Config(format!("node {} has dangling parent {p}", node.name))
                    })?;
                    if parent.level + 1 != level {
                        return Err(Error::Config(format!(
                            "node {} at level {level} under level-{} parent",
                            node.name, parent.level
                        )));
                    }
                }
            }
            if node.level != 3 && !node.method_ids.is_empty() {
                return Err(Error::Config(format!(
                    "non-leaf node {} owns methods",
                    node.name
                )));
            }
        }
        let mut seen_methods = std::collections::BTreeSet::new();
        let mut n_methods = 0u16;
        for node in nodes.iter().filter(|n| n.level == 3) {
            if node.method_ids.is_empty() {
                return Err(Error::Config(format!(
                    "level-3 node {} owns no methods",
                    node.name
                )));
            }
            for m in &node.method_ids {
                if !seen_methods.insert(*m) {
                    return Err(Error::Config(format!("method {m} owned by two nodes")));
                }
                n_methods = n_methods.max(m + 1);
            }
        }
        if seen_methods.len() != n_methods as usize {
            return Err(Error::Config("method ids must be dense".into()));
        }
        Ok(AttackTaxonomy { nodes, n_methods })
    }

    pub fn nodes(&self) -> &[TaxonomyNode] {
        &self.nodes
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_methods(&self) -> usize {
        self.n_methods as usize
    }

    pub fn node(&self, id: u16) -> Result<&TaxonomyNode> {
        self.nodes
            .get(id as usize)
            .ok_or_else(|| Error::Label(format!("unknown taxonomy node id {id}")))
    }

    pub fn node_by_name(&self, name: &str) -> Option<&TaxonomyNode> {
        self.nodes.iter().find(|n| n.name == name)
    }

    pub fn live_id(&self) -> u16 {
        self.node_by_name(LIVE).expect("live node").id
    }

    /// Children in canonical order (ascending id = insertion order).
    pub fn children(&self, id: u16) -> Vec<u16> {
        self.nodes
            .iter()
            .filter(|n| n.parent == Some(id))
            .map(|n| n.id)
            .collect()
    }

    pub fn level_nodes(&self, level: u8) -> Vec<&TaxonomyNode> {
        self.nodes.iter().filter(|n| n.level == level).collect()
    }

    /// Position of `child` within `parent`'s canonical child list.
    pub fn child_index(&self, parent: u16, child: u16) -> Result<usize> {
        self.children(parent)
            .iter()
            .position(|&c| c == child)
            .ok_or_else(|| Error::Label(format!("node {child} is not a child of {parent}")))
    }

    /// Level-1 order used by the routing gates: live, physical, digital.
    pub fn level1_order(&self) -> Vec<u16> {
        let mut ids: Vec<u16> = self.level_nodes(1).iter().map(|n| n.id).collect();
        ids.sort_unstable();
        ids
    }

    /// Level-3 node owning a method.
    pub fn method_node(&self, method_id: u16) -> Result<u16> {
        self.nodes
            .iter()
            .find(|n| n.level == 3 && n.method_ids.contains(&method_id))
            .map(|n| n.id)
            .ok_or_else(|| Error::Label(format!("unknown method id {method_id}")))
    }

    /// Full (level1, level2, level3) chain for a method.
    pub fn path_for_method(&self, method_id: u16) -> Result<(u16, u16, u16)> {
        let l3 = self.method_node(method_id)?;
        let l2 = self.node(l3)?.parent.expect("level-3 node has parent");
        let l1 = self.node(l2)?.parent.expect("level-2 node has parent");
        Ok((l1, l2, l3))
    }

    /// Check that (l1, l2, l3) is a parent chain of the right levels.
    pub fn validate_path(&self, path: (u16, u16, u16)) -> Result<()> {
        let (l1, l2, l3) = path;
        let n1 = self.node(l1)?;
        let n2 = self.node(l2)?;
        let n3 = self.node(l3)?;
        if n1.level != 1 || n2.level != 2 || n3.level != 3 {
            return Err(Error::Label(format!(
                "path levels ({}, {}, {}) are not (1, 2, 3)",
                n1.level, n2.level, n3.level
            )));
        }
        if n2.parent != Some(l1) || n3.parent != Some(l2) {
            return Err(Error::Label(format!(
                "path ({l1}, {l2}, {l3}) is not a parent chain"
            )));
        }
        Ok(())
    }

    /// The level-1 ancestor of any node.
    pub fn level1_ancestor(&self, id: u16) -> Result<u16> {
        let mut cur = self.node(id)?;
        while let Some(p) = cur.parent {
            cur = self.node(p)?;
        }
        Ok(cur.id)
    }

    /// Stable content hash; checkpoints embed it to reject mismatched loads.
    pub fn hash(&self) -> u64 {
        let mut h = fnv1a_init();
        for node in &self.nodes {
            h = fnv1a_u64(h, node.id as u64);
            h = fnv1a_bytes(h, node.name.as_bytes());
            h = fnv1a_u64(h, node.level as u64);
            h = fnv1a_u64(h, node.parent.map(|p| p as u64 + 1).unwrap_or(0));
            for m in &node.method_ids {
                h = fnv1a_u64(h, *m as u64);
            }
        }
        h
    }
}
