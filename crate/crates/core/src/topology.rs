//! Network topology: nodes, typed links, sources with their candidate paths,
//! hop distances and the link/path incidence matrix.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LinkId(pub u32);

impl fmt::Display for LinkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkKind {
    Valid,
    OobWormhole,
    IbWormhole,
    /// Zero-delay attachment link. Carries flow but contributes nothing to
    /// path delay; used for source access hops that no delay law covers.
    Access,
}

impl LinkKind {
    pub fn is_wormhole(self) -> bool {
        matches!(self, LinkKind::OobWormhole | LinkKind::IbWormhole)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkSpec {
    pub id: LinkId,
    pub from: String,
    pub to: String,
    pub kind: LinkKind,
    /// Service capacity in flow units.
    pub capacity: f64,
    /// Propagation delay in time units.
    pub propagation_delay: f64,
    /// Buffer size of the M/M/1/K queue in front of the link.
    pub queue_capacity: u32,
    /// Geometric leash slack in time units.
    pub slack: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub id: u32,
    pub origin: String,
    pub destination: String,
    pub rate: f64,
    pub paths: Vec<Vec<LinkId>>,
}

/// Immutable network description. Construct through [`NetworkSpec::new`],
/// which enforces the structural invariants.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    nodes: Vec<String>,
    links: Vec<LinkSpec>,
    sources: Vec<SourceSpec>,
    per_hop_delay: f64,
    link_index: HashMap<LinkId, usize>,
    path_offsets: Vec<usize>,
}

impl NetworkSpec {
    pub fn new(
        nodes: Vec<String>,
        links: Vec<LinkSpec>,
        sources: Vec<SourceSpec>,
        per_hop_delay: f64,
    ) -> Result<Self> {
        let node_set: BTreeSet<&str> = nodes.iter().map(String::as_str).collect();
        if node_set.len() != nodes.len() {
            return Err(Error::input("duplicate node id"));
        }
        if !(per_hop_delay >= 0.0 && per_hop_delay.is_finite()) {
            return Err(Error::input("per-hop delay must be finite and nonnegative"));
        }

        let mut link_index = HashMap::new();
        for (i, link) in links.iter().enumerate() {
            if link_index.insert(link.id, i).is_some() {
                return Err(Error::input(format!("duplicate link id {}", link.id)));
            }
            for end in [&link.from, &link.to] {
                if !node_set.contains(end.as_str()) {
                    return Err(Error::input(format!("link {} references unknown node {end}", link.id)));
                }
            }
            if link.kind != LinkKind::Access {
                if !(link.capacity > 0.0 && link.capacity.is_finite()) {
                    return Err(Error::input(format!("link {}: capacity must be positive", link.id)));
                }
                if !(link.propagation_delay > 0.0 && link.propagation_delay.is_finite()) {
                    return Err(Error::input(format!(
                        "link {}: propagation delay must be positive",
                        link.id
                    )));
                }
                if link.queue_capacity < 1 {
                    return Err(Error::input(format!("link {}: queue capacity must be at least 1", link.id)));
                }
            }
            if !link.slack.is_finite() {
                return Err(Error::input(format!("link {}: slack must be finite", link.id)));
            }
        }

        let mut path_offsets = Vec::with_capacity(sources.len() + 1);
        let mut offset = 0;
        let mut source_ids = BTreeSet::new();
        for src in &sources {
            if !source_ids.insert(src.id) {
                return Err(Error::input(format!("duplicate source id {}", src.id)));
            }
            if !(src.rate > 0.0 && src.rate.is_finite()) {
                return Err(Error::input(format!("source {}: rate must be positive", src.id)));
            }
            for end in [&src.origin, &src.destination] {
                if !node_set.contains(end.as_str()) {
                    return Err(Error::input(format!("source {} references unknown node {end}", src.id)));
                }
            }
            if src.paths.is_empty() {
                return Err(Error::input(format!("source {} has no paths", src.id)));
            }
            for (j, path) in src.paths.iter().enumerate() {
                check_walk(&links, &link_index, src, path)
                    .map_err(|e| Error::input(format!("source {} path {}: {e}", src.id, j + 1)))?;
            }
            path_offsets.push(offset);
            offset += src.paths.len();
        }
        path_offsets.push(offset);

        Ok(NetworkSpec {
            nodes,
            links,
            sources,
            per_hop_delay,
            link_index,
            path_offsets,
        })
    }

    pub fn nodes(&self) -> &[String] {
        &self.nodes
    }

    pub fn links(&self) -> &[LinkSpec] {
        &self.links
    }

    pub fn sources(&self) -> &[SourceSpec] {
        &self.sources
    }

    pub fn per_hop_delay(&self) -> f64 {
        self.per_hop_delay
    }

    pub fn link(&self, id: LinkId) -> Option<&LinkSpec> {
        self.link_index.get(&id).map(|&i| &self.links[i])
    }

    pub fn link_position(&self, id: LinkId) -> Option<usize> {
        self.link_index.get(&id).copied()
    }

    /// Total number of paths over all sources.
    pub fn path_count(&self) -> usize {
        *self.path_offsets.last().unwrap_or(&0)
    }

    /// Column range of source `i` in the stacked path vector.
    pub fn path_range(&self, source: usize) -> std::ops::Range<usize> {
        self.path_offsets[source]..self.path_offsets[source + 1]
    }

    pub fn has_node(&self, node: &str) -> bool {
        self.nodes.iter().any(|n| n == node)
    }

    /// Returns a copy with one link's parameters replaced.
    pub fn with_link(&self, link: LinkSpec) -> Result<Self> {
        let mut links = self.links.clone();
        let pos = self
            .link_position(link.id)
            .ok_or_else(|| Error::input(format!("unknown link {}", link.id)))?;
        links[pos] = link;
        NetworkSpec::new(self.nodes.clone(), links, self.sources.clone(), self.per_hop_delay)
    }
}

fn check_walk(
    links: &[LinkSpec],
    index: &HashMap<LinkId, usize>,
    src: &SourceSpec,
    path: &[LinkId],
) -> std::result::Result<(), String> {
    if path.is_empty() {
        return Err("empty path".into());
    }
    let mut at = src.origin.as_str();
    for id in path {
        let link = index
            .get(id)
            .map(|&i| &links[i])
            .ok_or_else(|| format!("unknown link {id}"))?;
        if link.from != at {
            return Err(format!("link {id} starts at {} but the walk is at {at}", link.from));
        }
        at = link.to.as_str();
    }
    if at != src.destination {
        return Err(format!("walk ends at {at}, expected {}", src.destination));
    }
    Ok(())
}

/// Undirected hop-count graph over a subset of the network's links.
#[derive(Debug, Clone)]
pub struct HopGraph {
    names: Vec<String>,
    index: HashMap<String, usize>,
    adjacency: Vec<Vec<usize>>,
}

impl HopGraph {
    pub fn from_spec(spec: &NetworkSpec, include: impl Fn(&LinkSpec) -> bool) -> Self {
        let names = spec.nodes().to_vec();
        let index: HashMap<String, usize> =
            names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        let mut adjacency = vec![Vec::new(); names.len()];
        for link in spec.links().iter().filter(|l| include(l)) {
            let (a, b) = (index[&link.from], index[&link.to]);
            if a != b {
                adjacency[a].push(b);
                adjacency[b].push(a);
            }
        }
        for adj in &mut adjacency {
            adj.sort_unstable();
            adj.dedup();
        }
        HopGraph { names, index, adjacency }
    }

    /// Graph of the links an honest node can route over: everything except
    /// wormhole tunnels.
    pub fn legitimate(spec: &NetworkSpec) -> Self {
        Self::from_spec(spec, |l| !l.kind.is_wormhole())
    }

    /// Graph over anonymous nodes `0..n` from an undirected edge list.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Self {
        let names: Vec<String> = (0..n).map(|i| i.to_string()).collect();
        let index = names.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        let mut adjacency = vec![Vec::new(); n];
        for &(a, b) in edges {
            if a != b {
                adjacency[a].push(b);
                adjacency[b].push(a);
            }
        }
        for adj in &mut adjacency {
            adj.sort_unstable();
            adj.dedup();
        }
        HopGraph { names, index, adjacency }
    }

    pub fn node_count(&self) -> usize {
        self.names.len()
    }

    pub fn node_index(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::input(format!("unknown node {name}")))
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    /// Breadth-first hop counts from `from`; `None` marks unreachable nodes.
    pub fn distances_from(&self, from: usize) -> Vec<Option<u32>> {
        let mut dist = vec![None; self.names.len()];
        let mut queue = VecDeque::new();
        dist[from] = Some(0);
        queue.push_back(from);
        while let Some(u) = queue.pop_front() {
            let du = dist[u].unwrap_or(0);
            for &v in &self.adjacency[u] {
                if dist[v].is_none() {
                    dist[v] = Some(du + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    pub fn distance(&self, a: &str, b: &str) -> Result<Option<u32>> {
        let (i, j) = (self.node_index(a)?, self.node_index(b)?);
        Ok(self.distances_from(i)[j])
    }

    pub fn is_connected(&self) -> bool {
        self.names.is_empty() || self.distances_from(0).iter().all(Option::is_some)
    }
}

/// Minimum hop count between two nodes over the undirected graph of all links.
/// Returns `Ok(None)` when the nodes are disconnected.
pub fn shortest_path_len(spec: &NetworkSpec, i: &str, j: &str) -> Result<Option<u32>> {
    HopGraph::from_spec(spec, |_| true).distance(i, j)
}

/// Dense 0/1 link-by-path matrix; rows follow `NetworkSpec::links` order and
/// columns the stacked per-source path lists.
#[derive(Debug, Clone, PartialEq)]
pub struct IncidenceMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<u8>,
}

impl IncidenceMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, link: usize, path: usize) -> u8 {
        self.entries[link * self.cols + path]
    }

    pub fn column_support(&self, path: usize) -> Vec<usize> {
        (0..self.rows).filter(|&l| self.get(l, path) == 1).collect()
    }

    /// Links on each path, as row indices.
    pub fn path_links(&self) -> Vec<Vec<usize>> {
        (0..self.cols).map(|p| self.column_support(p)).collect()
    }
}

pub fn build_incidence(spec: &NetworkSpec) -> IncidenceMatrix {
    let rows = spec.links().len();
    let cols = spec.path_count();
    let mut entries = vec![0u8; rows * cols];
    let mut col = 0;
    for src in spec.sources() {
        for path in &src.paths {
            for id in path {
                let row = spec.link_position(*id).expect("validated path link");
                entries[row * cols + col] = 1;
            }
            col += 1;
        }
    }
    IncidenceMatrix { rows, cols, entries }
}

/// Per-link rates `r_l = (A r)_l`.
pub fn link_rates(a: &IncidenceMatrix, path_rates: &[f64]) -> Result<Vec<f64>> {
    if path_rates.len() != a.cols {
        return Err(Error::input(format!(
            "rate vector has {} entries, incidence has {} paths",
            path_rates.len(),
            a.cols
        )));
    }
    if let Some(p) = path_rates.iter().position(|r| !(*r >= 0.0)) {
        return Err(Error::input(format!("negative or NaN rate {} on path {p}", path_rates[p])));
    }
    Ok((0..a.rows)
        .map(|l| {
            (0..a.cols)
                .filter(|&p| a.get(l, p) == 1)
                .map(|p| path_rates[p])
                .sum()
        })
        .collect())
}

/// Groups the stacked path columns by their link set, skipping access links.
/// Sources that share a physical route land in the same group; the group
/// totals are the identifiable path quantities at a Wardrop equilibrium.
pub fn route_groups(spec: &NetworkSpec) -> BTreeMap<Vec<LinkId>, Vec<usize>> {
    let mut groups: BTreeMap<Vec<LinkId>, Vec<usize>> = BTreeMap::new();
    let mut col = 0;
    for src in spec.sources() {
        for path in &src.paths {
            let mut key: Vec<LinkId> = path
                .iter()
                .copied()
                .filter(|id| spec.link(*id).map(|l| l.kind != LinkKind::Access).unwrap_or(true))
                .collect();
            key.sort();
            groups.entry(key).or_default().push(col);
            col += 1;
        }
    }
    groups
}

#[cfg(test)]
mod tests {
    use super::*;

    fn valid(id: u32, from: &str, to: &str) -> LinkSpec {
        LinkSpec {
            id: LinkId(id),
            from: from.into(),
            to: to.into(),
            kind: LinkKind::Valid,
            capacity: 1.0,
            propagation_delay: 1.0,
            queue_capacity: 5,
            slack: 0.0,
        }
    }

    fn line() -> NetworkSpec {
        let nodes = ["a", "b", "c", "d", "e"].iter().map(|s| s.to_string()).collect();
        let links = vec![valid(1, "a", "b"), valid(2, "b", "c"), valid(3, "c", "d")];
        let src = SourceSpec {
            id: 1,
            origin: "a".into(),
            destination: "d".into(),
            rate: 1.0,
            paths: vec![vec![LinkId(1), LinkId(2), LinkId(3)]],
        };
        NetworkSpec::new(nodes, links, vec![src], 1.0).unwrap()
    }

    #[test]
    fn hop_distances_on_a_line() {
        let spec = line();
        assert_eq!(shortest_path_len(&spec, "a", "a").unwrap(), Some(0));
        assert_eq!(shortest_path_len(&spec, "a", "d").unwrap(), Some(3));
        assert_eq!(shortest_path_len(&spec, "d", "a").unwrap(), Some(3));
        assert_eq!(shortest_path_len(&spec, "a", "e").unwrap(), None);
        assert!(matches!(shortest_path_len(&spec, "a", "zz"), Err(Error::Input(_))));
    }

    #[test]
    fn single_link_incidence() {
        let nodes = vec!["s".to_string(), "t".to_string()];
        let src = SourceSpec {
            id: 1,
            origin: "s".into(),
            destination: "t".into(),
            rate: 2.0,
            paths: vec![vec![LinkId(7)]],
        };
        let spec = NetworkSpec::new(nodes, vec![valid(7, "s", "t")], vec![src], 1.0).unwrap();
        let a = build_incidence(&spec);
        assert_eq!((a.rows(), a.cols()), (1, 1));
        assert_eq!(a.get(0, 0), 1);
        assert_eq!(link_rates(&a, &[0.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn rejects_broken_walks_and_bad_rates() {
        let nodes: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let links = vec![valid(1, "a", "b"), valid(2, "b", "c")];
        let bad_walk = SourceSpec {
            id: 1,
            origin: "a".into(),
            destination: "c".into(),
            rate: 1.0,
            paths: vec![vec![LinkId(2), LinkId(1)]],
        };
        assert!(NetworkSpec::new(nodes.clone(), links.clone(), vec![bad_walk], 1.0).is_err());

        let zero_rate = SourceSpec {
            id: 1,
            origin: "a".into(),
            destination: "c".into(),
            rate: 0.0,
            paths: vec![vec![LinkId(1), LinkId(2)]],
        };
        assert!(NetworkSpec::new(nodes.clone(), links.clone(), vec![zero_rate], 1.0).is_err());

        let mut zero_cap = links.clone();
        zero_cap[0].capacity = 0.0;
        let ok_src = SourceSpec {
            id: 1,
            origin: "a".into(),
            destination: "c".into(),
            rate: 1.0,
            paths: vec![vec![LinkId(1), LinkId(2)]],
        };
        assert!(NetworkSpec::new(nodes, zero_cap, vec![ok_src], 1.0).is_err());
    }

    #[test]
    fn link_rates_rejects_negative_and_mismatched_input() {
        let spec = line();
        let a = build_incidence(&spec);
        assert!(matches!(link_rates(&a, &[-1.0]), Err(Error::Input(_))));
        assert!(matches!(link_rates(&a, &[1.0, 2.0]), Err(Error::Input(_))));
        assert_eq!(link_rates(&a, &[7.0]).unwrap(), vec![7.0, 7.0, 7.0]);
    }
}
