//! Line-oriented TSV storage for review graphs.
//!
//! `nodes.tsv`: `id  kind(U|R|P)  label(0|1|-)  f1,f2,...`
//! `edges.tsv`: `src_id  dst_id`
//! `groups.tsv`: `user_id  A  A_prime`
//!
//! Each file starts with a header line. Node ids are arbitrary tokens and
//! are mapped to dense indices in file order.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::{GroupAssignment, NodeId, NodeKind, NodeRecord, ReviewGraph};

pub const NODES_FILE: &str = "nodes.tsv";
pub const EDGES_FILE: &str = "edges.tsv";
pub const GROUPS_FILE: &str = "groups.tsv";

fn parse_err(file: &str, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        file: file.to_string(),
        line,
        message: message.into(),
    }
}

/// Text of `nodes.tsv`; features keep 17 significant digits.
pub fn nodes_text(g: &ReviewGraph) -> String {
    let mut out = String::from("id\tkind\tlabel\tfeatures\n");
    for i in 0..g.node_count() {
        let v = NodeId(i);
        let label = match g.label(v) {
            Some(true) => "1",
            Some(false) => "0",
            None => "-",
        };
        let feats: Vec<String> = g.feature(v).iter().map(|x| format!("{x:.16e}")).collect();
        writeln!(out, "{i}\t{}\t{label}\t{}", g.kind(v).code(), feats.join(",")).unwrap();
    }
    out
}

pub fn edges_text(g: &ReviewGraph) -> String {
    let mut out = String::from("src_id\tdst_id\n");
    for &(a, b) in g.edges() {
        writeln!(out, "{a}\t{b}").unwrap();
    }
    out
}

pub fn groups_text(g: &ReviewGraph, groups: &GroupAssignment) -> String {
    let mut out = String::from("user_id\tA\tA_prime\n");
    let show = |v: Option<u8>| v.map_or("-".to_string(), |x| x.to_string());
    for &u in g.users() {
        writeln!(out, "{u}\t{}\t{}", show(groups.a(u)), show(groups.a_prime(u))).unwrap();
    }
    out
}

/// Writes `nodes.tsv`, `edges.tsv` and `groups.tsv` into `dir`.
pub fn write_graph(g: &ReviewGraph, groups: &GroupAssignment, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(NODES_FILE), nodes_text(g))?;
    fs::write(dir.join(EDGES_FILE), edges_text(g))?;
    fs::write(dir.join(GROUPS_FILE), groups_text(g, groups))?;
    Ok(())
}

/// Data lines of a TSV file with their 1-based line numbers, header skipped.
fn data_lines<'a>(text: &'a str, header: &'a str) -> impl Iterator<Item = (usize, &'a str)> + 'a {
    text.lines()
        .enumerate()
        .map(|(k, l)| (k + 1, l.trim_end_matches('\r')))
        .filter(move |(k, l)| !(l.is_empty() || (*k == 1 && l.starts_with(header))))
}

/// Parses `nodes.tsv` and `edges.tsv` texts into a validated graph.
pub fn parse_graph(nodes: &str, edges: &str) -> Result<ReviewGraph> {
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut records = Vec::new();
    let mut dim = None;
    for (line, text) in data_lines(nodes, "id\t") {
        let cols: Vec<&str> = text.split('\t').collect();
        if cols.len() != 4 {
            return Err(parse_err(NODES_FILE, line, format!("expected 4 columns, found {}", cols.len())));
        }
        let kind = NodeKind::from_code(cols[1])
            .ok_or_else(|| parse_err(NODES_FILE, line, format!("unknown node kind {:?}", cols[1])))?;
        let label = match cols[2] {
            "1" => Some(true),
            "0" => Some(false),
            "-" => None,
            other => return Err(parse_err(NODES_FILE, line, format!("bad label {other:?}"))),
        };
        let features = if cols[3].is_empty() {
            Vec::new()
        } else {
            cols[3]
                .split(',')
                .map(|t| t.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| parse_err(NODES_FILE, line, format!("bad feature: {e}")))?
        };
        match dim {
            None => dim = Some(features.len()),
            Some(d) if d != features.len() => {
                return Err(parse_err(NODES_FILE, line, format!("expected {d} features, found {}", features.len())))
            }
            _ => {}
        }
        if index.insert(cols[0], records.len()).is_some() {
            return Err(parse_err(NODES_FILE, line, format!("duplicate node id {:?}", cols[0])));
        }
        records.push(NodeRecord { kind, label, features });
    }
    let mut pairs = Vec::new();
    for (line, text) in data_lines(edges, "src_id\t") {
        let cols: Vec<&str> = text.split('\t').collect();
        if cols.len() != 2 {
            return Err(parse_err(EDGES_FILE, line, format!("expected 2 columns, found {}", cols.len())));
        }
        let lookup = |t: &str| {
            index
                .get(t)
                .map(|&i| NodeId(i))
                .ok_or_else(|| parse_err(EDGES_FILE, line, format!("unknown node id {t:?}")))
        };
        pairs.push((lookup(cols[0])?, lookup(cols[1])?));
    }
    ReviewGraph::build(records, &pairs, dim.unwrap_or(0))
}

/// Reads `nodes.tsv` and `edges.tsv` from `dir`.
pub fn read_graph(dir: &Path) -> Result<ReviewGraph> {
    let nodes = fs::read_to_string(dir.join(NODES_FILE))?;
    let edges = fs::read_to_string(dir.join(EDGES_FILE))?;
    parse_graph(&nodes, &edges)
}
