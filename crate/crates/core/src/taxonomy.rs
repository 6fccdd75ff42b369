//! Concept DAG construction and queries: ancestry, transitive closure,
//! lowest common ancestor, depth, frequency and information content.
//!
//! The graph is a rooted DAG of hypernym edges (parent = more general). It is
//! immutable after [`build_graph`] and safe to share across threads.

use std::collections::{HashMap, HashSet};
use std::fmt;

use thiserror::Error;

/// Dense concept index. Id 0 is always the root.
#[derive(Copy, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct ConceptId(pub u32);

impl ConceptId {
    pub const ROOT: ConceptId = ConceptId(0);

    #[inline]
    pub fn idx(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ConceptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Error, Debug)]
pub enum TaxonomyError {
    #[error("empty concept name in edge record {0}")]
    EmptyName(usize),
    #[error("duplicate edge {child:?} -> {parent:?}")]
    DuplicateEdge { child: String, parent: String },
    #[error("multiple roots: {0:?}")]
    MultipleRoots(Vec<String>),
    #[error("cycle detected involving concepts {0:?}")]
    CycleDetected(Vec<String>),
    #[error("concept {0:?} is not reachable from the root")]
    Disconnected(String),
    #[error("unknown concept {0:?} in frequency counts")]
    UnknownConcept(String),
    #[error("malformed record at line {line}: {message}")]
    BadRecord { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Rooted DAG of concepts. Parents are hypernyms (more general), children
/// hyponyms. Depth counts nodes along the longest root path, so
/// `depth(root) == 1`.
#[derive(Clone, Debug)]
pub struct ConceptGraph {
    names: Vec<String>,
    name_index: HashMap<String, ConceptId>,
    parents: Vec<Vec<ConceptId>>,
    children: Vec<Vec<ConceptId>>,
    depth: Vec<u32>,
    /// Ancestor list per node, sorted by id, including the node itself.
    ancestors: Vec<Vec<ConceptId>>,
    /// Ids in topological order (parents before children).
    topo: Vec<ConceptId>,
}

impl ConceptGraph {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn root(&self) -> ConceptId {
        ConceptId::ROOT
    }

    pub fn name(&self, id: ConceptId) -> &str {
        &self.names[id.idx()]
    }

    pub fn id_of(&self, name: &str) -> Option<ConceptId> {
        self.name_index.get(name).copied()
    }

    pub fn parents(&self, id: ConceptId) -> &[ConceptId] {
        &self.parents[id.idx()]
    }

    pub fn children(&self, id: ConceptId) -> &[ConceptId] {
        &self.children[id.idx()]
    }

    /// Longest-path depth from the root; `depth(root) == 1`.
    pub fn depth(&self, id: ConceptId) -> u32 {
        self.depth[id.idx()]
    }

    /// Ancestors of `id` sorted by id, including `id` itself.
    pub fn ancestors(&self, id: ConceptId) -> &[ConceptId] {
        &self.ancestors[id.idx()]
    }

    /// True when `anc` is an ancestor of `node` (a node is its own ancestor).
    pub fn is_ancestor(&self, anc: ConceptId, node: ConceptId) -> bool {
        self.ancestors[node.idx()].binary_search(&anc).is_ok()
    }

    pub fn ids(&self) -> impl Iterator<Item = ConceptId> + '_ {
        (0..self.names.len() as u32).map(ConceptId)
    }

    /// Ids in topological order, parents before children.
    pub fn topo_order(&self) -> &[ConceptId] {
        &self.topo
    }

    /// Concepts without children, in id order.
    pub fn leaves(&self) -> Vec<ConceptId> {
        self.ids().filter(|&id| self.children(id).is_empty()).collect()
    }
}

/// Concept frequencies and their information content (natural log).
#[derive(Clone, Debug)]
pub struct InformationContentTable {
    frequency: Vec<f64>,
    information: Vec<f64>,
    /// Concepts that were never observed; their information carries the
    /// finite sentinel value instead of infinity.
    pub zero_frequency: Vec<ConceptId>,
}

impl InformationContentTable {
    pub fn frequency(&self, id: ConceptId) -> f64 {
        self.frequency[id.idx()]
    }

    pub fn information(&self, id: ConceptId) -> f64 {
        self.information[id.idx()]
    }
}

/// Build and validate the concept graph from `(child_name, parent_name)`
/// edges, and derive per-concept frequencies from own pixel counts.
///
/// A concept's frequency is the sum of its own count and the counts of its
/// distinct descendants (each counted once regardless of path multiplicity),
/// divided by the total count. Unobserved concepts get a finite information
/// sentinel: the information of the rarest observed concept plus ln 2.
pub fn build_graph(
    edge_records: &[(String, String)],
    own_pixel_counts: &HashMap<String, u64>,
) -> Result<(ConceptGraph, InformationContentTable), TaxonomyError> {
    // Collect names in first-appearance order so id assignment is stable.
    let mut order: Vec<String> = Vec::new();
    let mut seen: HashSet<&str> = HashSet::new();
    let mut has_parent: HashSet<&str> = HashSet::new();
    let mut edge_set: HashSet<(&str, &str)> = HashSet::new();

    for (i, (child, parent)) in edge_records.iter().enumerate() {
        if child.is_empty() || parent.is_empty() {
            return Err(TaxonomyError::EmptyName(i));
        }
        if !edge_set.insert((child.as_str(), parent.as_str())) {
            return Err(TaxonomyError::DuplicateEdge {
                child: child.clone(),
                parent: parent.clone(),
            });
        }
        for name in [child, parent] {
            if seen.insert(name.as_str()) {
                order.push(name.clone());
            }
        }
        has_parent.insert(child.as_str());
    }

    let roots: Vec<&String> = order.iter().filter(|n| !has_parent.contains(n.as_str())).collect();
    if order.is_empty() {
        // Degenerate but legal: a single-concept taxonomy can be built from
        // counts alone when exactly one concept name is supplied there.
        if own_pixel_counts.len() == 1 {
            let name = own_pixel_counts.keys().next().unwrap().clone();
            order.push(name);
        } else {
            return Err(TaxonomyError::MultipleRoots(vec![]));
        }
    } else if roots.len() > 1 {
        return Err(TaxonomyError::MultipleRoots(
            roots.into_iter().cloned().collect(),
        ));
    } else if roots.is_empty() {
        return Err(TaxonomyError::CycleDetected(order));
    }

    // Assign ids: root first, then first-appearance order.
    let root_name = if order.len() == 1 {
        order[0].clone()
    } else {
        order
            .iter()
            .find(|n| !has_parent.contains(n.as_str()))
            .unwrap()
            .clone()
    };
    let mut names: Vec<String> = vec![root_name.clone()];
    names.extend(order.iter().filter(|n| **n != root_name).cloned());
    let name_index: HashMap<String, ConceptId> = names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.clone(), ConceptId(i as u32)))
        .collect();

    let n = names.len();
    let mut parents: Vec<Vec<ConceptId>> = vec![Vec::new(); n];
    let mut children: Vec<Vec<ConceptId>> = vec![Vec::new(); n];
    for (child, parent) in edge_records {
        let c = name_index[child];
        let p = name_index[parent];
        parents[c.idx()].push(p);
        children[p.idx()].push(c);
    }
    for list in parents.iter_mut().chain(children.iter_mut()) {
        list.sort_unstable();
    }

    // Kahn's topological sort; leftovers mean a cycle.
    let mut indeg: Vec<usize> = parents.iter().map(|p| p.len()).collect();
    let mut queue: Vec<ConceptId> = vec![ConceptId::ROOT];
    let mut topo: Vec<ConceptId> = Vec::with_capacity(n);
    while let Some(v) = queue.pop() {
        topo.push(v);
        for &c in &children[v.idx()] {
            indeg[c.idx()] -= 1;
            if indeg[c.idx()] == 0 {
                queue.push(c);
            }
        }
        // Keep deterministic order: smallest id first on the stack top.
        queue.sort_unstable_by(|a, b| b.cmp(a));
    }
    if topo.len() != n {
        let stuck: Vec<String> = (0..n)
            .filter(|&i| indeg[i] > 0)
            .map(|i| names[i].clone())
            .collect();
        return Err(TaxonomyError::CycleDetected(stuck));
    }

    // Reachability from root (defensive; single-source DAGs are connected).
    let mut reach = vec![false; n];
    reach[0] = true;
    for &v in &topo {
        if !reach[v.idx()] {
            return Err(TaxonomyError::Disconnected(names[v.idx()].clone()));
        }
        for &c in &children[v.idx()] {
            reach[c.idx()] = true;
        }
    }

    // Depth: 1 + max over parents, along the topological order.
    let mut depth = vec![0u32; n];
    depth[0] = 1;
    for &v in &topo {
        if v == ConceptId::ROOT {
            continue;
        }
        depth[v.idx()] = 1 + parents[v.idx()].iter().map(|p| depth[p.idx()]).max().unwrap();
    }

    // Ancestor sets (including self) as sorted id lists.
    let mut ancestors: Vec<Vec<ConceptId>> = vec![Vec::new(); n];
    for &v in &topo {
        let mut set: HashSet<ConceptId> = HashSet::new();
        set.insert(v);
        for &p in &parents[v.idx()] {
            set.extend(ancestors[p.idx()].iter().copied());
        }
        let mut list: Vec<ConceptId> = set.into_iter().collect();
        list.sort_unstable();
        ancestors[v.idx()] = list;
    }

    let graph = ConceptGraph {
        names,
        name_index,
        parents,
        children,
        depth,
        ancestors,
        topo,
    };

    let ic = information_content(&graph, own_pixel_counts)?;
    Ok((graph, ic))
}

/// Frequency and information content from own pixel counts.
fn information_content(
    graph: &ConceptGraph,
    own_pixel_counts: &HashMap<String, u64>,
) -> Result<InformationContentTable, TaxonomyError> {
    for name in own_pixel_counts.keys() {
        if graph.id_of(name).is_none() {
            return Err(TaxonomyError::UnknownConcept(name.clone()));
        }
    }
    let n = graph.len();
    let mut own = vec![0u64; n];
    for (name, &count) in own_pixel_counts {
        own[graph.id_of(name).unwrap().idx()] = count;
    }
    let total: u64 = own.iter().sum();

    // Descendant sets as bitsets so multi-path nodes are counted once.
    let words = n.div_ceil(64);
    let mut desc: Vec<Vec<u64>> = vec![vec![0u64; words]; n];
    for &v in graph.topo_order().iter().rev() {
        let i = v.idx();
        desc[i][i / 64] |= 1u64 << (i % 64);
        for &c in graph.children(v) {
            let (a, b) = if i < c.idx() {
                let (lo, hi) = desc.split_at_mut(c.idx());
                (&mut lo[i], &hi[0])
            } else {
                let (lo, hi) = desc.split_at_mut(i);
                (&mut hi[0], &lo[c.idx()])
            };
            for (w, &src) in a.iter_mut().zip(b.iter()) {
                *w |= src;
            }
        }
    }

    let mut frequency = vec![0.0f64; n];
    for id in graph.ids() {
        let mut sum = 0u64;
        for (w, &bits) in desc[id.idx()].iter().enumerate() {
            let mut bits = bits;
            while bits != 0 {
                let b = bits.trailing_zeros() as usize;
                sum += own[w * 64 + b];
                bits &= bits - 1;
            }
        }
        frequency[id.idx()] = if total > 0 { sum as f64 / total as f64 } else { 0.0 };
    }
    // The root covers every observation by definition.
    frequency[0] = 1.0;

    let mut information = vec![0.0f64; n];
    let mut zero_frequency = Vec::new();
    let rarest = frequency
        .iter()
        .filter(|&&f| f > 0.0)
        .map(|&f| -f.ln())
        .fold(0.0f64, f64::max);
    for id in graph.ids() {
        let f = frequency[id.idx()];
        if f > 0.0 {
            information[id.idx()] = -f.ln();
        } else {
            information[id.idx()] = rarest + std::f64::consts::LN_2;
            zero_frequency.push(id);
        }
    }
    information[0] = 0.0;

    Ok(InformationContentTable {
        frequency,
        information,
        zero_frequency,
    })
}

/// All ordered (ancestor, descendant) pairs implied by the edge set,
/// excluding self-pairs, sorted by ids.
pub fn transitive_closure(graph: &ConceptGraph) -> Vec<(ConceptId, ConceptId)> {
    let mut pairs = Vec::new();
    for v in graph.ids() {
        for &a in graph.ancestors(v) {
            if a != v {
                pairs.push((a, v));
            }
        }
    }
    pairs.sort_unstable();
    pairs
}

/// Deepest common ancestor of `l` and `p`; a node is its own ancestor.
/// Ties between equally deep ancestors break toward the smallest id.
pub fn lca(graph: &ConceptGraph, l: ConceptId, p: ConceptId) -> ConceptId {
    let la = graph.ancestors(l);
    let pa = graph.ancestors(p);
    let mut best = ConceptId::ROOT;
    let mut best_depth = 0u32;
    let (mut i, mut j) = (0usize, 0usize);
    while i < la.len() && j < pa.len() {
        match la[i].cmp(&pa[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                let d = graph.depth(la[i]);
                if d > best_depth {
                    best_depth = d;
                    best = la[i];
                }
                i += 1;
                j += 1;
            }
        }
    }
    best
}

/// DOT rendering of the graph; node labels carry names and a `freq`
/// attribute carries the concept frequency.
pub fn export_dot(graph: &ConceptGraph, ic: &InformationContentTable) -> String {
    let mut out = String::from("digraph concepts {\n");
    for id in graph.ids() {
        let label = graph.name(id).replace('\\', "\\\\").replace('"', "\\\"");
        out.push_str(&format!(
            "  n{} [label=\"{}\", freq=\"{}\"];\n",
            id,
            label,
            ic.frequency(id)
        ));
    }
    for id in graph.ids() {
        for &c in graph.children(id) {
            out.push_str(&format!("  n{} -> n{};\n", id, c));
        }
    }
    out.push_str("}\n");
    out
}

/// Parse a taxonomy TSV: `child_name<TAB>parent_name` per line, `#` comments.
pub fn parse_taxonomy_tsv(text: &str) -> Result<Vec<(String, String)>, TaxonomyError> {
    let mut edges = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split('\t');
        let child = fields.next().unwrap_or("").trim();
        let parent = fields.next().unwrap_or("").trim();
        if parent.is_empty() || fields.next().is_some() {
            return Err(TaxonomyError::BadRecord {
                line: lineno + 1,
                message: "expected exactly `child<TAB>parent`".into(),
            });
        }
        edges.push((child.to_string(), parent.to_string()));
    }
    Ok(edges)
}

/// Parse a frequency TSV: `concept_name<TAB>own_pixel_count` per line.
pub fn parse_frequency_tsv(text: &str) -> Result<HashMap<String, u64>, TaxonomyError> {
    let mut counts = HashMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split('\t');
        let name = fields.next().unwrap_or("").trim();
        let count = fields.next().unwrap_or("").trim();
        let parsed: u64 = count.parse().map_err(|_| TaxonomyError::BadRecord {
            line: lineno + 1,
            message: format!("bad count {count:?}"),
        })?;
        if name.is_empty() || fields.next().is_some() {
            return Err(TaxonomyError::BadRecord {
                line: lineno + 1,
                message: "expected exactly `name<TAB>count`".into(),
            });
        }
        counts.insert(name.to_string(), parsed);
    }
    Ok(counts)
}
