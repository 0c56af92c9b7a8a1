//! IAB tree construction, look-ahead depths and tunnel routing tables.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::channel::LinkState;
use crate::error::{Error, Result};
use crate::geometry::Position;
use crate::time::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// GTP-like tunnel identifier, one per UE bearer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TunnelId(pub u32);

impl fmt::Display for TunnelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "teid {}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Donor,
    Iab,
    Ue,
}

impl Role {
    pub fn is_gnb(self) -> bool {
        !matches!(self, Role::Ue)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologyNode {
    pub id: NodeId,
    pub role: Role,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    /// η: subframes of scheduling look-ahead. Zero for UEs.
    pub lookahead_depth: u32,
    /// N: longest gNB-to-gNB path below this node.
    pub max_downstream_hops: u32,
    pub tunnel: Option<TunnelId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IabTree {
    pub nodes: BTreeMap<NodeId, TopologyNode>,
    pub donor_id: NodeId,
    /// Time at which attached UEs may start receiving traffic.
    pub ue_attach_time: SimTime,
}

impl IabTree {
    pub fn new(donor: NodeId) -> Self {
        let mut nodes = BTreeMap::new();
        nodes.insert(
            donor,
            TopologyNode {
                id: donor,
                role: Role::Donor,
                parent: None,
                children: Vec::new(),
                lookahead_depth: 1,
                max_downstream_hops: 0,
                tunnel: None,
            },
        );
        IabTree { nodes, donor_id: donor, ue_attach_time: SimTime::ZERO }
    }

    /// Attaches `id` below `parent`. Depths are not updated; call
    /// [`compute_lookahead`] once the tree is complete.
    pub fn attach(&mut self, id: NodeId, role: Role, parent: NodeId) -> Result<()> {
        if role == Role::Donor {
            return Err(Error::Structure("a tree has exactly one donor".into()));
        }
        if self.nodes.contains_key(&id) {
            return Err(Error::Structure(format!("node {id} attached twice")));
        }
        let p = self
            .nodes
            .get_mut(&parent)
            .ok_or_else(|| Error::Structure(format!("parent {parent} of {id} is not in the tree")))?;
        if p.role == Role::Ue {
            return Err(Error::Structure(format!("UE {parent} cannot have children")));
        }
        p.children.push(id);
        p.children.sort();
        self.nodes.insert(
            id,
            TopologyNode {
                id,
                role,
                parent: Some(parent),
                children: Vec::new(),
                lookahead_depth: if role == Role::Ue { 0 } else { 1 },
                max_downstream_hops: 0,
                tunnel: None,
            },
        );
        Ok(())
    }

    pub fn node(&self, id: NodeId) -> &TopologyNode {
        &self.nodes[&id]
    }

    pub fn role(&self, id: NodeId) -> Role {
        self.nodes[&id].role
    }

    pub fn gnbs(&self) -> impl Iterator<Item = &TopologyNode> {
        self.nodes.values().filter(|n| n.role.is_gnb())
    }

    pub fn ues(&self) -> impl Iterator<Item = &TopologyNode> {
        self.nodes.values().filter(|n| n.role == Role::Ue)
    }

    pub fn iab_children(&self, id: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes[&id].children.iter().copied().filter(|c| self.nodes[c].role == Role::Iab)
    }

    /// gNB path from the donor down to `id` (inclusive), or `None` if `id` is
    /// not connected to the donor.
    pub fn path_from_donor(&self, id: NodeId) -> Option<Vec<NodeId>> {
        let mut path = vec![id];
        let mut cur = id;
        while let Some(p) = self.nodes.get(&cur)?.parent {
            if path.len() > self.nodes.len() {
                return None;
            }
            path.push(p);
            cur = p;
        }
        if cur != self.donor_id {
            return None;
        }
        path.reverse();
        Some(path)
    }

    pub fn serving_gnb(&self, ue: NodeId) -> Option<NodeId> {
        self.nodes.get(&ue).and_then(|n| n.parent)
    }

    /// Number of wireless hops from the donor to `id`.
    pub fn depth(&self, id: NodeId) -> Option<usize> {
        self.path_from_donor(id).map(|p| p.len() - 1)
    }

    /// Depth-first walk from the donor; errors if a node is reached twice or
    /// some node is unreachable.
    pub fn check_tree(&self) -> Result<Vec<NodeId>> {
        let mut seen = HashMap::with_capacity(self.nodes.len());
        let mut order = Vec::with_capacity(self.nodes.len());
        let mut stack = vec![self.donor_id];
        while let Some(id) = stack.pop() {
            if seen.insert(id, ()).is_some() {
                return Err(Error::Structure(format!("cycle through {id}")));
            }
            order.push(id);
            let n = self.nodes.get(&id).ok_or_else(|| Error::Structure(format!("dangling child {id}")))?;
            for c in n.children.iter().rev() {
                if self.nodes.get(c).and_then(|cn| cn.parent) != Some(id) {
                    return Err(Error::Structure(format!("child {c} does not point back to {id}")));
                }
                stack.push(*c);
            }
        }
        if seen.len() != self.nodes.len() {
            return Err(Error::Structure("nodes unreachable from the donor".into()));
        }
        Ok(order)
    }
}

/// A gNB that can take part in the tree.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GnbSite {
    pub id: NodeId,
    pub position: Position,
    pub wired: bool,
}

/// Directed link states keyed by `(tx, rx)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LinkTable {
    links: HashMap<(NodeId, NodeId), LinkState>,
}

impl LinkTable {
    pub fn insert(&mut self, link: LinkState) {
        self.links.insert((link.tx, link.rx), link);
    }

    pub fn get(&self, tx: NodeId, rx: NodeId) -> Option<&LinkState> {
        self.links.get(&(tx, rx))
    }

    pub fn len(&self) -> usize {
        self.links.len()
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttachPolicy {
    ClosestWired,
    BestHqf,
}

/// Connects IAB nodes to the single wired donor in `sites`.
///
/// `BestHqf` grows the tree greedily: at each step the unattached node with
/// the strongest non-outage link from an already attached gNB joins below
/// that gNB. Parents are always attached before their children, so the
/// result cannot contain loops.
pub fn attach_iab_nodes(sites: &[GnbSite], links: &LinkTable, policy: AttachPolicy) -> Result<IabTree> {
    let donors: Vec<&GnbSite> = sites.iter().filter(|s| s.wired).collect();
    let donor = match donors.as_slice() {
        [d] => *d,
        [] => return Err(Error::config("no wired donor")),
        _ => return Err(Error::config("exactly one wired donor is supported")),
    };
    let mut tree = IabTree::new(donor.id);
    let mut pending: Vec<&GnbSite> = sites.iter().filter(|s| !s.wired).collect();
    pending.sort_by_key(|s| s.id);

    let usable = |tx: NodeId, rx: NodeId| links.get(tx, rx).filter(|l| !l.in_outage()).map(|l| l.snr_db);

    match policy {
        AttachPolicy::ClosestWired => {
            for site in pending {
                if usable(donor.id, site.id).is_none() {
                    return Err(Error::Attachment { node: site.id });
                }
                tree.attach(site.id, Role::Iab, donor.id)?;
            }
        }
        AttachPolicy::BestHqf => {
            let mut attached = vec![donor.id];
            while !pending.is_empty() {
                let mut best: Option<(f64, usize, NodeId)> = None;
                for (i, site) in pending.iter().enumerate() {
                    for &p in &attached {
                        let Some(snr) = usable(p, site.id) else { continue };
                        let better = match best {
                            None => true,
                            Some((b, bi, bp)) => {
                                snr > b || (snr == b && (site.id, p) < (pending[bi].id, bp))
                            }
                        };
                        if better {
                            best = Some((snr, i, p));
                        }
                    }
                }
                let Some((_, i, parent)) = best else {
                    return Err(Error::Attachment { node: pending[0].id });
                };
                let site = pending.remove(i);
                tree.attach(site.id, Role::Iab, parent)?;
                attached.push(site.id);
            }
        }
    }
    compute_lookahead(&mut tree)?;
    Ok(tree)
}

/// Attaches each UE to its geometrically closest gNB (ties toward the lower
/// id) and assigns tunnel ids `1, 2, …` in UE order.
pub fn attach_ues(
    tree: &mut IabTree,
    sites: &[GnbSite],
    ues: &[(NodeId, Position)],
    attach_delay: SimTime,
) -> Result<()> {
    if sites.is_empty() {
        return Err(Error::config("no gNB to attach UEs to"));
    }
    let mut next_tunnel = 1 + tree.nodes.values().filter_map(|n| n.tunnel).map(|t| t.0).max().unwrap_or(0);
    for (ue, pos) in ues {
        let serving = sites
            .iter()
            .filter(|s| tree.nodes.contains_key(&s.id))
            .min_by(|a, b| {
                let (da, db) = (a.position.distance_3d(pos), b.position.distance_3d(pos));
                da.total_cmp(&db).then(a.id.cmp(&b.id))
            })
            .ok_or_else(|| Error::config("no attached gNB"))?;
        tree.attach(*ue, Role::Ue, serving.id)?;
        tree.nodes.get_mut(ue).unwrap().tunnel = Some(TunnelId(next_tunnel));
        next_tunnel += 1;
    }
    tree.ue_attach_time = attach_delay;
    Ok(())
}

/// Fills `N` and `η = N + 1` for every gNB.
pub fn compute_lookahead(tree: &mut IabTree) -> Result<()> {
    let order = tree.check_tree()?;
    // Reverse DFS preorder visits children before parents.
    for id in order.into_iter().rev() {
        if tree.nodes[&id].role == Role::Ue {
            continue;
        }
        let n = tree
            .iab_children(id)
            .map(|c| 1 + tree.nodes[&c].max_downstream_hops)
            .max()
            .unwrap_or(0);
        let node = tree.nodes.get_mut(&id).unwrap();
        node.max_downstream_hops = n;
        node.lookahead_depth = n + 1;
    }
    Ok(())
}

/// For every gNB, the number of UEs reachable through each child.
pub fn downstream_ue_counts(tree: &IabTree) -> BTreeMap<NodeId, BTreeMap<NodeId, usize>> {
    fn subtree_ues(tree: &IabTree, id: NodeId) -> usize {
        let n = &tree.nodes[&id];
        match n.role {
            Role::Ue => 1,
            _ => n.children.iter().map(|c| subtree_ues(tree, *c)).sum(),
        }
    }
    tree.gnbs()
        .map(|g| (g.id, g.children.iter().map(|c| (*c, subtree_ues(tree, *c))).collect()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Route {
    /// Forward on the backhaul bearer toward this IAB child.
    Forward(NodeId),
    /// The tunnel terminates here; deliver on the access bearer of this UE.
    Local(NodeId),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoutingTable {
    pub routes: HashMap<TunnelId, Route>,
}

impl RoutingTable {
    pub fn lookup(&self, tunnel: TunnelId) -> Option<Route> {
        self.routes.get(&tunnel).copied()
    }
}

pub fn build_routing_tables(tree: &IabTree) -> Result<BTreeMap<NodeId, RoutingTable>> {
    let mut tables: BTreeMap<NodeId, RoutingTable> = tree.gnbs().map(|g| (g.id, RoutingTable::default())).collect();
    for ue in tree.ues() {
        let tunnel = ue
            .tunnel
            .ok_or_else(|| Error::Structure(format!("UE {} has no tunnel", ue.id)))?;
        let path = tree
            .path_from_donor(ue.id)
            .ok_or_else(|| Error::Structure(format!("{tunnel} has no path from the donor")))?;
        // path = donor, ..., serving gNB, UE
        for w in path.windows(2) {
            let route = if w[1] == ue.id { Route::Local(ue.id) } else { Route::Forward(w[1]) };
            tables.get_mut(&w[0]).unwrap().routes.insert(tunnel, route);
        }
    }
    Ok(tables)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// donor 0 → {1, 4}, 1 → 2 → 3; UEs 11, 12 on node 3 and UE 13 on node 4.
    pub(crate) fn reference_tree() -> IabTree {
        let mut t = IabTree::new(NodeId(0));
        t.attach(NodeId(1), Role::Iab, NodeId(0)).unwrap();
        t.attach(NodeId(4), Role::Iab, NodeId(0)).unwrap();
        t.attach(NodeId(2), Role::Iab, NodeId(1)).unwrap();
        t.attach(NodeId(3), Role::Iab, NodeId(2)).unwrap();
        for (ue, gnb, teid) in [(11, 3, 1), (12, 3, 2), (13, 4, 3)] {
            t.attach(NodeId(ue), Role::Ue, NodeId(gnb)).unwrap();
            t.nodes.get_mut(&NodeId(ue)).unwrap().tunnel = Some(TunnelId(teid));
        }
        compute_lookahead(&mut t).unwrap();
        t
    }

    #[test]
    fn reference_tree_lookahead() {
        let t = reference_tree();
        let eta = |i| t.node(NodeId(i)).lookahead_depth;
        assert_eq!((eta(0), eta(1), eta(2), eta(3), eta(4)), (4, 3, 2, 1, 1));
        assert_eq!(t.node(NodeId(0)).max_downstream_hops, 3);
    }

    #[test]
    fn lookahead_of_lonely_donor() {
        let mut t = IabTree::new(NodeId(0));
        t.attach(NodeId(5), Role::Ue, NodeId(0)).unwrap();
        compute_lookahead(&mut t).unwrap();
        assert_eq!(t.node(NodeId(0)).lookahead_depth, 1);
    }

    #[test]
    fn reference_tree_counts() {
        let t = reference_tree();
        let c = downstream_ue_counts(&t);
        assert_eq!(c[&NodeId(1)][&NodeId(2)], 2);
        assert_eq!(c[&NodeId(0)][&NodeId(4)], 1);
        assert_eq!(c[&NodeId(0)][&NodeId(1)], 2);
        assert_eq!(c[&NodeId(4)][&NodeId(13)], 1);
        let donor_total: usize = c[&NodeId(0)].values().sum();
        assert_eq!(donor_total, 3);
    }

    #[test]
    fn reference_tree_routes() {
        let t = reference_tree();
        let r = build_routing_tables(&t).unwrap();
        assert_eq!(r[&NodeId(0)].lookup(TunnelId(3)), Some(Route::Forward(NodeId(4))));
        assert_eq!(r[&NodeId(4)].lookup(TunnelId(3)), Some(Route::Local(NodeId(13))));
        assert_eq!(r[&NodeId(0)].lookup(TunnelId(1)), Some(Route::Forward(NodeId(1))));
        assert_eq!(r[&NodeId(1)].lookup(TunnelId(1)), Some(Route::Forward(NodeId(2))));
        assert_eq!(r[&NodeId(2)].lookup(TunnelId(1)), Some(Route::Forward(NodeId(3))));
        assert_eq!(r[&NodeId(3)].lookup(TunnelId(1)), Some(Route::Local(NodeId(11))));
        assert_eq!(r[&NodeId(4)].lookup(TunnelId(1)), None);
    }

    #[test]
    fn direct_ue_terminates_at_donor() {
        let mut t = IabTree::new(NodeId(0));
        t.attach(NodeId(1), Role::Ue, NodeId(0)).unwrap();
        t.nodes.get_mut(&NodeId(1)).unwrap().tunnel = Some(TunnelId(1));
        let r = build_routing_tables(&t).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[&NodeId(0)].lookup(TunnelId(1)), Some(Route::Local(NodeId(1))));
    }

    #[test]
    fn rejects_structural_mistakes() {
        let mut t = IabTree::new(NodeId(0));
        t.attach(NodeId(1), Role::Ue, NodeId(0)).unwrap();
        assert!(t.attach(NodeId(2), Role::Ue, NodeId(1)).is_err());
        assert!(t.attach(NodeId(1), Role::Iab, NodeId(0)).is_err());
        assert!(t.attach(NodeId(3), Role::Iab, NodeId(9)).is_err());
        // Corrupt the tree by hand into a cycle.
        t.attach(NodeId(4), Role::Iab, NodeId(0)).unwrap();
        t.nodes.get_mut(&NodeId(4)).unwrap().children.push(NodeId(0));
        assert!(compute_lookahead(&mut t).is_err());
    }

    fn site(id: u32, x: f64, wired: bool) -> GnbSite {
        GnbSite { id: NodeId(id), position: Position::new(x, 0.0, 10.0), wired }
    }

    fn link(tx: u32, rx: u32, snr: f64) -> LinkState {
        LinkState {
            tx: NodeId(tx),
            rx: NodeId(rx),
            distance_3d: 1.0,
            los: true,
            snr_db: snr,
            spectral_efficiency: if snr >= -5.0 { 1.0 } else { 0.0 },
            per_symbol_capacity: if snr >= -5.0 { 1000 } else { 0 },
        }
    }

    #[test]
    fn empty_relay_set() {
        let t = attach_iab_nodes(&[site(0, 0.0, true)], &LinkTable::default(), AttachPolicy::BestHqf).unwrap();
        assert_eq!(t.nodes.len(), 1);
        assert_eq!(t.node(NodeId(0)).lookahead_depth, 1);
    }

    #[test]
    fn chain_through_relay() {
        let sites = [site(0, 0.0, true), site(1, 100.0, false), site(2, 200.0, false)];
        let mut links = LinkTable::default();
        for (a, b, s) in [(0, 1, 20.0), (0, 2, -20.0), (1, 2, 15.0)] {
            links.insert(link(a, b, s));
            links.insert(link(b, a, s));
        }
        let t = attach_iab_nodes(&sites, &links, AttachPolicy::BestHqf).unwrap();
        assert_eq!(t.node(NodeId(1)).parent, Some(NodeId(0)));
        assert_eq!(t.node(NodeId(2)).parent, Some(NodeId(1)));
        assert_eq!(t.node(NodeId(0)).max_downstream_hops, 2);
        assert_eq!(
            attach_iab_nodes(&sites, &links, AttachPolicy::ClosestWired),
            Err(Error::Attachment { node: NodeId(2) })
        );
    }

    #[test]
    fn unreachable_relay_is_reported() {
        let sites = [site(0, 0.0, true), site(7, 500.0, false)];
        let mut links = LinkTable::default();
        links.insert(link(0, 7, -30.0));
        assert_eq!(
            attach_iab_nodes(&sites, &links, AttachPolicy::BestHqf),
            Err(Error::Attachment { node: NodeId(7) })
        );
    }

    #[test]
    fn ue_attachment_ties_and_tunnels() {
        let sites = [site(0, 0.0, true), site(1, 100.0, false)];
        let mut links = LinkTable::default();
        links.insert(link(0, 1, 30.0));
        let mut t = attach_iab_nodes(&sites, &links, AttachPolicy::ClosestWired).unwrap();
        let ues = [
            (NodeId(10), Position::new(80.0, 0.0, 10.0)),
            (NodeId(11), Position::new(50.0, 0.0, 10.0)),
            (NodeId(12), Position::new(5.0, 0.0, 10.0)),
        ];
        attach_ues(&mut t, &sites, &ues, SimTime::from_secs(0.1)).unwrap();
        assert_eq!(t.serving_gnb(NodeId(10)), Some(NodeId(1)));
        assert_eq!(t.serving_gnb(NodeId(11)), Some(NodeId(0)));
        assert_eq!(t.serving_gnb(NodeId(12)), Some(NodeId(0)));
        let tunnels: Vec<_> = ues.iter().map(|(u, _)| t.node(*u).tunnel.unwrap().0).collect();
        assert_eq!(tunnels, vec![1, 2, 3]);
        assert_eq!(t.ue_attach_time, SimTime::from_millis(100));
    }
}
