//! Sankey-style flow of probe predictions across spaces, plus parallel-coordinate data.
//!
//! Column `i` holds every instance of the subset exactly once. Before its
//! prediction depth an instance sits in the class node of its probe-`i`
//! prediction, inside the rectangle of its actual class. From its depth on it
//! is absorbed into the column's top node (finally correct) or bottom node
//! (finally incorrect). Instances whose deepest probe still disagrees with the
//! final prediction stay in class nodes throughout and drop into the bottom
//! node at the last column only when incorrect.
//!
//! Element ids: `c{i}:p{class}` (class node), `c{i}:p{class}:a{class}`
//! (rectangle), `c{i}:top`, `c{i}:bottom`, and `{source}>{target}` for links.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::difficulty::{Analysis, DifficultyProfile};
use crate::ids::InstanceId;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FlowError {
    #[error("subset is empty")]
    EmptySubset,
    #[error("instance {0} has no profile")]
    UnknownInstance(InstanceId),
    #[error("unknown flow element `{0}`")]
    UnknownElement(String),
    #[error("instance {id}: trace has {got} probes, expected {expected}")]
    TraceLength { id: InstanceId, expected: usize, got: usize },
}

/// What the flow needs to know about one instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowInstance {
    pub id: InstanceId,
    pub label: u32,
    pub prediction: u32,
    /// Probe predictions, input space first.
    pub trace: Vec<u32>,
    pub depth: usize,
    pub never_aligned: bool,
}

impl FlowInstance {
    pub fn from_profile(p: &DifficultyProfile, trace: &[u32]) -> Self {
        FlowInstance {
            id: p.instance,
            label: p.label,
            prediction: p.prediction,
            trace: trace.to_vec(),
            depth: p.prediction_depth,
            never_aligned: p.never_aligned,
        }
    }

    fn correct(&self) -> bool {
        self.label == self.prediction
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
enum Slot {
    Class { predicted: u32, actual: u32 },
    Top,
    Bottom,
}

fn slot(inst: &FlowInstance, column: usize, last: usize) -> Slot {
    let absorbed = if inst.never_aligned { column == last && !inst.correct() } else { column >= inst.depth };
    if !absorbed {
        Slot::Class { predicted: inst.trace[column], actual: inst.label }
    } else if inst.correct() {
        Slot::Top
    } else {
        Slot::Bottom
    }
}

fn slot_id(column: usize, s: Slot) -> String {
    match s {
        Slot::Class { predicted, actual } => format!("c{column}:p{predicted}:a{actual}"),
        Slot::Top => format!("c{column}:top"),
        Slot::Bottom => format!("c{column}:bottom"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rectangle {
    pub id: String,
    pub actual: u32,
    pub count: usize,
    pub ids: Vec<InstanceId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassNode {
    pub id: String,
    pub predicted: u32,
    pub count: usize,
    pub rectangles: Vec<Rectangle>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressedNode {
    pub id: String,
    pub count: usize,
    /// Count per actual class, indexed by class.
    pub class_counts: Vec<usize>,
    pub ids: Vec<InstanceId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowColumn {
    pub index: usize,
    pub space: String,
    pub nodes: Vec<ClassNode>,
    pub top: CompressedNode,
    pub bottom: CompressedNode,
}

impl FlowColumn {
    pub fn class_mass(&self) -> usize {
        self.nodes.iter().map(|n| n.count).sum()
    }

    pub fn total(&self) -> usize {
        self.class_mass() + self.top.count + self.bottom.count
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowLink {
    pub id: String,
    /// Column of the source element; the target sits in the next column.
    pub column: usize,
    pub source: String,
    pub target: String,
    pub count: usize,
    pub ids: Vec<InstanceId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowGraph {
    pub num_instances: usize,
    pub num_classes: usize,
    pub columns: Vec<FlowColumn>,
    pub links: Vec<FlowLink>,
}

/// Builds the flow for `instances`. Nodes are ordered by predicted class,
/// rectangles by actual class, links by (column, source, target).
pub fn build_flow(instances: &[FlowInstance], num_classes: usize, space_names: &[String]) -> Result<FlowGraph, FlowError> {
    if instances.is_empty() {
        return Err(FlowError::EmptySubset);
    }
    let columns = space_names.len();
    for inst in instances {
        if inst.trace.len() != columns {
            return Err(FlowError::TraceLength { id: inst.id, expected: columns, got: inst.trace.len() });
        }
    }
    let mut sorted: Vec<&FlowInstance> = instances.iter().collect();
    sorted.sort_by_key(|i| i.id);
    sorted.dedup_by_key(|i| i.id);
    let last = columns - 1;

    let empty_node = |id: String| CompressedNode { id, count: 0, class_counts: vec![0; num_classes], ids: Vec::new() };
    let mut out_cols = Vec::with_capacity(columns);
    let mut links = Vec::new();
    for (c, space) in space_names.iter().enumerate() {
        let mut classes: BTreeMap<u32, BTreeMap<u32, Vec<InstanceId>>> = BTreeMap::new();
        let mut top = empty_node(format!("c{c}:top"));
        let mut bottom = empty_node(format!("c{c}:bottom"));
        let mut flows: BTreeMap<(Slot, Slot), Vec<InstanceId>> = BTreeMap::new();
        for inst in &sorted {
            let s = slot(inst, c, last);
            match s {
                Slot::Class { predicted, actual } => classes.entry(predicted).or_default().entry(actual).or_default().push(inst.id),
                Slot::Top | Slot::Bottom => {
                    let node = if s == Slot::Top { &mut top } else { &mut bottom };
                    node.count += 1;
                    if let Some(n) = node.class_counts.get_mut(inst.label as usize) {
                        *n += 1;
                    }
                    node.ids.push(inst.id);
                }
            }
            if c < last {
                flows.entry((s, slot(inst, c + 1, last))).or_default().push(inst.id);
            }
        }
        let nodes = classes
            .into_iter()
            .map(|(predicted, rects)| {
                let rectangles: Vec<Rectangle> = rects
                    .into_iter()
                    .map(|(actual, ids)| Rectangle { id: slot_id(c, Slot::Class { predicted, actual }), actual, count: ids.len(), ids })
                    .collect();
                ClassNode { id: format!("c{c}:p{predicted}"), predicted, count: rectangles.iter().map(|r| r.count).sum(), rectangles }
            })
            .collect();
        for ((from, to), ids) in flows {
            let (source, target) = (slot_id(c, from), slot_id(c + 1, to));
            links.push(FlowLink { id: format!("{source}>{target}"), column: c, source, target, count: ids.len(), ids });
        }
        out_cols.push(FlowColumn { index: c, space: space.clone(), nodes, top, bottom });
    }
    Ok(FlowGraph { num_instances: sorted.len(), num_classes, columns: out_cols, links })
}

impl FlowGraph {
    /// The exact id set an element aggregates, sorted.
    pub fn select(&self, element: &str) -> Result<Vec<InstanceId>, FlowError> {
        let unknown = || FlowError::UnknownElement(element.to_string());
        if element.contains('>') {
            return self.links.iter().find(|l| l.id == element).map(|l| l.ids.clone()).ok_or_else(unknown);
        }
        let (col, rest) = element.split_once(':').ok_or_else(unknown)?;
        let col: usize = col.strip_prefix('c').and_then(|c| c.parse().ok()).ok_or_else(unknown)?;
        let column = self.columns.get(col).ok_or_else(unknown)?;
        match rest {
            "top" => return Ok(column.top.ids.clone()),
            "bottom" => return Ok(column.bottom.ids.clone()),
            _ => {}
        }
        for node in &column.nodes {
            if node.id == element {
                let mut ids: Vec<InstanceId> = node.rectangles.iter().flat_map(|r| r.ids.iter().copied()).collect();
                ids.sort_unstable();
                return Ok(ids);
            }
            if let Some(r) = node.rectangles.iter().find(|r| r.id == element) {
                return Ok(r.ids.clone());
            }
        }
        Err(unknown())
    }
}

pub fn flow_click_select(graph: &FlowGraph, element: &str) -> Result<Vec<InstanceId>, FlowError> {
    graph.select(element)
}

fn space_names(analysis: &Analysis) -> Vec<String> {
    let b = analysis.bundle();
    (0..b.num_spaces()).map(|s| b.space_name(s).to_string()).collect()
}

/// Flow over a subset of an analysis' profiled instances.
pub fn flow_for(analysis: &Analysis, members: &[InstanceId]) -> Result<FlowGraph, FlowError> {
    let instances = members
        .iter()
        .map(|&id| {
            let p = analysis.profile(id).ok_or(FlowError::UnknownInstance(id))?;
            Ok(FlowInstance::from_profile(p, analysis.probe_predictions(id).expect("profiled")))
        })
        .collect::<Result<Vec<_>, FlowError>>()?;
    build_flow(&instances, analysis.bundle().num_classes(), &space_names(analysis))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcpAxis {
    pub key: String,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polyline {
    pub id: InstanceId,
    pub values: Vec<f64>,
}

/// One axis for data kDN followed by one per probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcpAxes {
    pub axes: Vec<PcpAxis>,
    pub polylines: Vec<Polyline>,
}

pub fn pcp_data(profiles: &[&DifficultyProfile], space_names: &[String]) -> Result<PcpAxes, FlowError> {
    if profiles.is_empty() {
        return Err(FlowError::EmptySubset);
    }
    let mut axes = vec![PcpAxis { key: "data_kdn".into(), label: "data".into() }];
    axes.extend(space_names.iter().enumerate().map(|(i, n)| PcpAxis { key: format!("kdn_L{i}"), label: n.clone() }));
    let mut polylines: Vec<Polyline> = profiles
        .iter()
        .map(|p| Polyline { id: p.instance, values: std::iter::once(p.data_kdn).chain(p.layer_kdn.iter().copied()).collect() })
        .collect();
    polylines.sort_by_key(|p| p.id);
    polylines.dedup_by_key(|p| p.id);
    Ok(PcpAxes { axes, polylines })
}

pub fn pcp_for(analysis: &Analysis, members: &[InstanceId]) -> Result<PcpAxes, FlowError> {
    let profiles = members.iter().map(|&id| analysis.profile(id).ok_or(FlowError::UnknownInstance(id))).collect::<Result<Vec<_>, _>>()?;
    pcp_data(&profiles, &space_names(analysis))
}

/// Mass conservation checks: every column holds all instances, and link mass
/// leaving each element equals its count (and likewise entering).
pub fn check_conservation(graph: &FlowGraph) -> Result<(), String> {
    let mut element_counts: HashMap<String, usize> = HashMap::new();
    for col in &graph.columns {
        if col.total() != graph.num_instances {
            return Err(format!("column {} holds {} of {}", col.index, col.total(), graph.num_instances));
        }
        for n in &col.nodes {
            if n.count != n.rectangles.iter().map(|r| r.count).sum::<usize>() {
                return Err(format!("{} count differs from its rectangles", n.id));
            }
            for r in &n.rectangles {
                element_counts.insert(r.id.clone(), r.count);
            }
        }
        element_counts.insert(col.top.id.clone(), col.top.count);
        element_counts.insert(col.bottom.id.clone(), col.bottom.count);
    }
    let mut out: HashMap<&str, usize> = HashMap::new();
    let mut inn: HashMap<&str, usize> = HashMap::new();
    for l in &graph.links {
        *out.entry(&l.source).or_default() += l.count;
        *inn.entry(&l.target).or_default() += l.count;
    }
    let last = graph.columns.len().saturating_sub(1);
    for (id, &count) in &element_counts {
        let col: usize = id[1..id.find(':').unwrap()].parse().unwrap();
        if col < last && out.get(id.as_str()).copied().unwrap_or(0) != count {
            return Err(format!("{id} sends {:?} but holds {count}", out.get(id.as_str())));
        }
        if col > 0 && inn.get(id.as_str()).copied().unwrap_or(0) != count {
            return Err(format!("{id} receives {:?} but holds {count}", inn.get(id.as_str())));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(i: u32, label: u32, prediction: u32, trace: &[u32], depth: usize, never_aligned: bool) -> FlowInstance {
        FlowInstance { id: InstanceId::test(i), label, prediction, trace: trace.to_vec(), depth, never_aligned }
    }

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| if i == 0 { "input".into() } else { format!("l{i}") }).collect()
    }

    #[test]
    fn all_easy_collapses_into_top() {
        let xs: Vec<_> = (0..5).map(|i| inst(i, i % 2, i % 2, &[i % 2; 3], 0, false)).collect();
        let g = build_flow(&xs, 2, &names(3)).unwrap();
        for col in &g.columns {
            assert_eq!(col.top.count, 5);
            assert_eq!(col.class_mass(), 0);
            assert_eq!(col.top.class_counts, vec![3, 2]);
        }
        assert_eq!(g.select("c0:top").unwrap().len(), 5);
        assert_eq!(g.links.len(), 2);
        check_conservation(&g).unwrap();
    }

    #[test]
    fn never_aligned_stays_in_class_nodes() {
        let wrong = inst(0, 0, 1, &[0, 0, 0], 2, true);
        let right = inst(1, 1, 1, &[0, 0, 0], 2, true);
        let g = build_flow(&[wrong, right], 2, &names(3)).unwrap();
        assert_eq!(g.columns[1].class_mass(), 2);
        assert_eq!(g.columns[2].bottom.ids, vec![InstanceId::test(0)]);
        assert_eq!(g.columns[2].top.count, 0);
        assert_eq!(g.select("c2:p0:a1").unwrap(), vec![InstanceId::test(1)]);
        check_conservation(&g).unwrap();
    }

    #[test]
    fn errors() {
        assert_eq!(build_flow(&[], 2, &names(3)).unwrap_err(), FlowError::EmptySubset);
        let bad = inst(0, 0, 0, &[0, 0], 0, false);
        assert!(matches!(build_flow(&[bad], 2, &names(3)), Err(FlowError::TraceLength { .. })));
        let g = build_flow(&[inst(0, 0, 0, &[0, 0, 0], 0, false)], 2, &names(3)).unwrap();
        for e in ["c9:top", "nope", "c0:p5", "c0:top>c1:bottom", "x0:top"] {
            assert!(matches!(g.select(e), Err(FlowError::UnknownElement(_))), "{e}");
        }
    }

    #[test]
    fn link_equals_endpoint_intersection() {
        let xs = vec![inst(0, 0, 0, &[1, 0, 0], 1, false), inst(1, 0, 0, &[1, 1, 0], 2, false), inst(2, 1, 0, &[1, 1, 0], 2, false)];
        let g = build_flow(&xs, 2, &names(3)).unwrap();
        for l in &g.links {
            let a = g.select(&l.source).unwrap();
            let b = g.select(&l.target).unwrap();
            let both: Vec<_> = a.into_iter().filter(|x| b.contains(x)).collect();
            assert_eq!(g.select(&l.id).unwrap(), both, "{}", l.id);
        }
    }

    #[test]
    fn pcp_shape() {
        let p = DifficultyProfile {
            instance: InstanceId::test(0),
            label: 0,
            prediction: 0,
            data_kdn: 0.0,
            layer_kdn: vec![0.0; 4],
            prediction_depth: 0,
            model_difficulty: 0.0,
            human_difficulty: None,
            correct: true,
            pattern: crate::difficulty::Pattern::Unclassified,
            never_aligned: false,
        };
        let pcp = pcp_data(&[&p], &names(4)).unwrap();
        assert_eq!(pcp.axes.len(), 5);
        assert_eq!(pcp.polylines[0].values, vec![0.0; 5]);
        assert_eq!(pcp_data(&[], &names(4)).unwrap_err(), FlowError::EmptySubset);
    }
}
