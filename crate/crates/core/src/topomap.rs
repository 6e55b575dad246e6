//! The agent's online topological map and the inputs it contributes to graph tokens.

use std::collections::BTreeMap;

use numcore::Tensor;

use crate::error::{contract, Result};
use crate::geom::{egocentric, Point};
use crate::simenv::Observation;
use crate::world::NodeId;

/// Pose features of the agent's own location (and of the STOP token).
pub const ZERO_POSE: [f64; 5] = [0.0, 0.0, 0.0, 0.0, 1.0];
/// Meters per unit in the pose features.
pub const POSE_SCALE: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeStatus {
    Current,
    Visited,
    Frontier,
}

/// Where a node's feature comes from: its own panorama once visited, or the
/// view of the parent that last observed it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSource {
    Panorama,
    Inherited { parent: NodeId, sector: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapNode {
    pub status: NodeStatus,
    pub source: FeatureSource,
    /// Step-embedding bucket: 0 when never visited, else visit step + 1.
    pub last_visit: usize,
    /// `[forward, left, range, sin θ, cos θ]` relative to the current node, distances scaled.
    pub pose: [f64; 5],
    position: Point,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TopoMap {
    nodes: BTreeMap<NodeId, MapNode>,
    panoramas: BTreeMap<NodeId, Tensor>,
    current: Option<NodeId>,
    max_bucket: usize,
}

impl TopoMap {
    /// Empty map whose step buckets saturate at `max_steps`.
    pub fn new(max_steps: usize) -> Self {
        TopoMap {
            max_bucket: max_steps.max(1),
            ..Self::default()
        }
    }

    pub fn update(&mut self, obs: &Observation) -> Result<()> {
        match (self.current, self.nodes.get(&obs.node)) {
            (None, _) => {}
            (Some(_), Some(n)) if n.status != NodeStatus::Current => {}
            _ => {
                return contract(format!(
                    "observation at node {} does not follow the map's frontier",
                    obs.node
                ))
            }
        }
        if let Some(prev) = self.current {
            if let Some(n) = self.nodes.get_mut(&prev) {
                n.status = NodeStatus::Visited;
            }
        }
        self.nodes.insert(
            obs.node,
            MapNode {
                status: NodeStatus::Current,
                source: FeatureSource::Panorama,
                last_visit: (obs.step + 1).min(self.max_bucket),
                pose: ZERO_POSE,
                position: obs.position,
            },
        );
        self.panoramas.insert(obs.node, obs.views.clone());
        self.current = Some(obs.node);
        let (s, c) = obs.heading.sin_cos();
        for nb in &obs.neighbors {
            let position = [
                obs.position[0] + nb.forward * c - nb.left * s,
                obs.position[1] + nb.forward * s + nb.left * c,
            ];
            let entry = self.nodes.entry(nb.node).or_insert(MapNode {
                status: NodeStatus::Frontier,
                source: FeatureSource::Panorama,
                last_visit: 0,
                pose: ZERO_POSE,
                position,
            });
            if entry.status == NodeStatus::Frontier {
                entry.source = FeatureSource::Inherited {
                    parent: obs.node,
                    sector: nb.sector,
                };
            }
        }
        for node in self.nodes.values_mut() {
            let (f, l, r, th) = egocentric(obs.position, obs.heading, node.position);
            node.pose = if r == 0.0 {
                ZERO_POSE
            } else {
                [f / POSE_SCALE, l / POSE_SCALE, r / POSE_SCALE, th.sin(), th.cos()]
            };
        }
        Ok(())
    }

    pub fn current(&self) -> Option<NodeId> {
        self.current
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn get(&self, v: NodeId) -> Option<&MapNode> {
        self.nodes.get(&v)
    }

    /// Node ids in canonical (ascending) order; graph token `i + 1` is node `ids[i]`.
    pub fn node_ids(&self) -> Vec<NodeId> {
        self.nodes.keys().copied().collect()
    }

    pub fn nodes(&self) -> impl Iterator<Item = (NodeId, &MapNode)> {
        self.nodes.iter().map(|(&k, v)| (k, v))
    }

    pub fn frontier(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .filter(|(_, n)| n.status == NodeStatus::Frontier)
            .map(|(&k, _)| k)
            .collect()
    }

    /// Raw `K × d_view` panorama of a visited node.
    pub fn panorama(&self, v: NodeId) -> Option<&Tensor> {
        self.panoramas.get(&v)
    }

    pub fn panoramas(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        self.panoramas.iter().map(|(&k, v)| (k, v))
    }

    /// Candidate mask over graph tokens (STOP first): STOP and frontier nodes.
    pub fn candidate_mask(&self) -> Vec<bool> {
        std::iter::once(true)
            .chain(self.nodes.values().map(|n| n.status == NodeStatus::Frontier))
            .collect()
    }

    /// Graph-token index of a node (STOP is 0).
    pub fn token_index(&self, v: NodeId) -> Option<usize> {
        self.nodes.keys().position(|&k| k == v).map(|i| i + 1)
    }

    /// Node behind a graph-token index; `None` for STOP or out of range.
    pub fn node_at(&self, token: usize) -> Option<NodeId> {
        token.checked_sub(1).and_then(|i| self.nodes.keys().nth(i).copied())
    }
}
