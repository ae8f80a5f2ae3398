//! The network graph: switches and hosts joined by point-to-point links.
//! Ports are allocated per node as links are added; every port belongs to
//! exactly one link. Shortest-path next hops over the switch graph feed
//! the auto-derived LPM tables.

use std::collections::BTreeMap;

use crate::time::SimDuration;
use crate::{NodeId, PortId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeRole {
    Switch,
    Host,
}

#[derive(Debug, Clone)]
pub struct Node {
    pub name: String,
    pub role: NodeRole,
}

#[derive(Debug, Clone, Copy)]
pub struct LinkEnd {
    pub node: NodeId,
    pub port: PortId,
}

#[derive(Debug, Clone, Default)]
pub struct Topology {
    nodes: Vec<Node>,
    /// (node, port) -> (peer node, peer port, propagation delay).
    peers: BTreeMap<(NodeId, PortId), (NodeId, PortId, SimDuration)>,
    next_port: Vec<u8>,
}

impl Topology {
    pub fn new() -> Topology {
        Topology::default()
    }

    pub fn add_node(&mut self, name: &str, role: NodeRole) -> NodeId {
        self.nodes.push(Node {
            name: name.to_string(),
            role,
        });
        self.next_port.push(0);
        self.nodes.len() - 1
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Wires two nodes together, allocating one fresh port on each side.
    /// Returns the (a-side, b-side) ports.
    pub fn add_link(&mut self, a: NodeId, b: NodeId, delay: SimDuration) -> (PortId, PortId) {
        assert_ne!(a, b, "self links are not allowed");
        let pa = self.alloc_port(a);
        let pb = self.alloc_port(b);
        self.peers.insert((a, pa), (b, pb, delay));
        self.peers.insert((b, pb), (a, pa, delay));
        (pa, pb)
    }

    fn alloc_port(&mut self, node: NodeId) -> PortId {
        let p = self.next_port[node];
        self.next_port[node] = p.checked_add(1).expect("more than 255 ports on one node");
        p
    }

    pub fn peer(&self, node: NodeId, port: PortId) -> Option<(NodeId, PortId, SimDuration)> {
        self.peers.get(&(node, port)).copied()
    }

    /// Neighbors of a node as (local port, peer node), in port order.
    pub fn neighbors(&self, node: NodeId) -> Vec<(PortId, NodeId)> {
        self.peers
            .range((node, 0)..=(node, PortId::MAX))
            .map(|(&(_, port), &(peer, _, _))| (port, peer))
            .collect()
    }

    /// BFS distances from `from`, walking only switch-to-switch links.
    fn switch_distances(&self, from: NodeId) -> Vec<Option<u32>> {
        let mut dist = vec![None; self.nodes.len()];
        dist[from] = Some(0);
        let mut frontier = vec![from];
        while !frontier.is_empty() {
            let mut next = Vec::new();
            for &n in &frontier {
                let d = dist[n].unwrap();
                for (_, peer) in self.neighbors(n) {
                    if self.nodes[peer].role == NodeRole::Switch && dist[peer].is_none() {
                        dist[peer] = Some(d + 1);
                        next.push(peer);
                    }
                }
            }
            frontier = next;
        }
        dist
    }

    /// Port on `from` toward `to` along a shortest switch path, breaking
    /// ties by the lowest neighbor node id. None when unreachable.
    pub fn next_hop_port(&self, from: NodeId, to: NodeId) -> Option<PortId> {
        if from == to {
            return None;
        }
        let dist = self.switch_distances(to);
        let my_dist = dist[from]?;
        self.neighbors(from)
            .into_iter()
            .filter(|&(_, peer)| {
                self.nodes[peer].role == NodeRole::Switch && dist[peer] == Some(my_dist - 1)
            })
            .min_by_key(|&(port, peer)| (peer, port))
            .map(|(port, _)| port)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// core - agg1/agg2 - acc1, plus a host on acc1.
    fn diamond() -> (Topology, NodeId, NodeId, NodeId, NodeId) {
        let mut t = Topology::new();
        let core = t.add_node("core", NodeRole::Switch);
        let agg1 = t.add_node("agg1", NodeRole::Switch);
        let agg2 = t.add_node("agg2", NodeRole::Switch);
        let acc1 = t.add_node("acc1", NodeRole::Switch);
        t.add_link(core, agg1, SimDuration::from_micros(10));
        t.add_link(core, agg2, SimDuration::from_micros(10));
        t.add_link(agg1, acc1, SimDuration::from_micros(10));
        t.add_link(agg2, acc1, SimDuration::from_micros(10));
        (t, core, agg1, agg2, acc1)
    }

    #[test]
    fn links_allocate_ports_pairwise() {
        let (t, core, agg1, _, _) = diamond();
        let (peer, peer_port, _) = t.peer(core, 0).unwrap();
        assert_eq!(peer, agg1);
        assert_eq!(peer_port, 0);
        let back = t.peer(agg1, 0).unwrap();
        assert_eq!(back.0, core);
    }

    #[test]
    fn next_hop_breaks_ties_deterministically() {
        let (t, core, agg1, _, acc1) = diamond();
        // Both aggs lie on a shortest path; the lower node id wins.
        let port = t.next_hop_port(core, acc1).unwrap();
        let (peer, _, _) = t.peer(core, port).unwrap();
        assert_eq!(peer, agg1);
    }

    #[test]
    fn hosts_never_carry_transit_paths() {
        // sw1 - host - sw2: the only "path" runs through a host, which BFS
        // must refuse to expand.
        let mut t = Topology::new();
        let sw1 = t.add_node("sw1", NodeRole::Switch);
        let sw2 = t.add_node("sw2", NodeRole::Switch);
        let host = t.add_node("h1", NodeRole::Host);
        t.add_link(sw1, host, SimDuration::from_micros(1));
        t.add_link(host, sw2, SimDuration::from_micros(1));
        assert!(t.next_hop_port(sw1, sw2).is_none());
    }
}
