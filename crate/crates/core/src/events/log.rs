use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type NodeId = usize;

/// One timestamped, directed interaction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub src: NodeId,
    pub dst: NodeId,
    pub ts: f64,
    pub edge_feat: Vec<f64>,
    /// Position in the log.
    pub idx: usize,
}

/// Chronologically ordered interaction stream with optional features.
#[derive(Debug, Clone, PartialEq)]
pub struct EventLog {
    interactions: Vec<Interaction>,
    /// Dense node features, one row per node id; zeros where absent.
    node_feat: Vec<Vec<f64>>,
    num_nodes: usize,
    edge_dim: usize,
    node_dim: usize,
}

impl EventLog {
    /// Build a log from `(src, dst, ts)` triples without features.
    pub fn from_edges(edges: &[(NodeId, NodeId, f64)]) -> Result<Self> {
        let rows = edges.iter().map(|&(s, d, t)| (s, d, t, Vec::new())).collect();
        Self::new(rows, Vec::new(), 0)
    }

    /// Build and validate a log. `node_feat` may be shorter than the node
    /// count; missing rows become zero vectors. `min_nodes` lets callers keep
    /// isolated trailing node ids.
    pub fn new(
        rows: Vec<(NodeId, NodeId, f64, Vec<f64>)>,
        node_feat: Vec<Vec<f64>>,
        min_nodes: usize,
    ) -> Result<Self> {
        let edge_dim = rows.first().map_or(0, |r| r.3.len());
        let node_dim = node_feat.iter().map(Vec::len).max().unwrap_or(0);
        let mut interactions = Vec::with_capacity(rows.len());
        let mut num_nodes = min_nodes.max(node_feat.len());
        let mut prev = f64::NEG_INFINITY;
        for (i, (src, dst, ts, feat)) in rows.into_iter().enumerate() {
            if !ts.is_finite() || ts < 0.0 {
                return Err(Error::Parse {
                    line: i + 2,
                    msg: format!("invalid timestamp {ts}"),
                });
            }
            if ts < prev {
                return Err(Error::Ordering { line: i + 2, prev, ts });
            }
            if feat.len() != edge_dim {
                return Err(Error::Schema(format!(
                    "interaction {i} has {} edge features, expected {edge_dim}",
                    feat.len()
                )));
            }
            prev = ts;
            num_nodes = num_nodes.max(src + 1).max(dst + 1);
            interactions.push(Interaction {
                src,
                dst,
                ts,
                edge_feat: feat,
                idx: i,
            });
        }
        let mut dense = vec![vec![0.0; node_dim]; num_nodes];
        for (n, f) in node_feat.into_iter().enumerate() {
            if !f.is_empty() && f.len() != node_dim {
                return Err(Error::Schema(format!(
                    "node {n} has {} features, expected {node_dim}",
                    f.len()
                )));
            }
            if !f.is_empty() {
                dense[n] = f;
            }
        }
        Ok(Self {
            interactions,
            node_feat: dense,
            num_nodes,
            edge_dim,
            node_dim,
        })
    }

    pub fn interactions(&self) -> &[Interaction] {
        &self.interactions
    }

    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn edge_dim(&self) -> usize {
        self.edge_dim
    }

    pub fn node_dim(&self) -> usize {
        self.node_dim
    }

    pub fn node_feat(&self, node: NodeId) -> &[f64] {
        &self.node_feat[node]
    }

    pub fn max_ts(&self) -> Option<f64> {
        self.interactions.last().map(|e| e.ts)
    }

    /// Writes the event CSV (`src,dst,ts[,f0,...]`).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(File::create(path)?);
        let mut header = String::from("src,dst,ts");
        for i in 0..self.edge_dim {
            header.push_str(&format!(",f{i}"));
        }
        writeln!(w, "{header}")?;
        for e in &self.interactions {
            write!(w, "{},{},{}", e.src, e.dst, e.ts)?;
            for f in &e.edge_feat {
                write!(w, ",{f}")?;
            }
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes the node-feature CSV (`node,f0,...`); no-op if there are none.
    pub fn write_node_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(File::create(path)?);
        let mut header = String::from("node");
        for i in 0..self.node_dim {
            header.push_str(&format!(",f{i}"));
        }
        writeln!(w, "{header}")?;
        for (n, f) in self.node_feat.iter().enumerate() {
            write!(w, "{n}")?;
            for v in f {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn parse_field<T: std::str::FromStr>(s: &str, line: usize, what: &str) -> Result<T> {
    s.trim().parse().map_err(|_| Error::Parse {
        line,
        msg: format!("bad {what} {s:?}"),
    })
}

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(File::open(path)?))
}

/// Load an event CSV (`src,dst,ts[,f0,...]`) and an optional node-feature
/// CSV (`node,f0,...`).
pub fn load_events(path: &Path, node_feat_path: Option<&Path>) -> Result<EventLog> {
    let mut rdr = reader(path)?;
    let header = rdr.headers()?.clone();
    let names: Vec<&str> = header.iter().collect();
    if names.len() < 3 || names[0] != "src" || names[1] != "dst" || names[2] != "ts" {
        return Err(Error::Schema(format!(
            "event header must start with src,dst,ts, got {names:?}"
        )));
    }
    let edge_dim = names.len() - 3;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != names.len() {
            return Err(Error::Schema(format!(
                "line {line}: {} fields, header has {}",
                rec.len(),
                names.len()
            )));
        }
        let src: NodeId = parse_field(&rec[0], line, "src")?;
        let dst: NodeId = parse_field(&rec[1], line, "dst")?;
        let ts: f64 = parse_field(&rec[2], line, "ts")?;
        if !ts.is_finite() || ts < 0.0 {
            return Err(Error::Parse {
                line,
                msg: format!("invalid timestamp {ts}"),
            });
        }
        if let Some(&(_, _, prev, _)) = rows.last() {
            if ts < prev {
                return Err(Error::Ordering { line, prev, ts });
            }
        }
        let feat = (3..rec.len())
            .map(|i| parse_field::<f64>(&rec[i], line, "edge feature"))
            .collect::<Result<Vec<_>>>()?;
        debug_assert_eq!(feat.len(), edge_dim);
        rows.push((src, dst, ts, feat));
    }

    let mut node_feat: Vec<Vec<f64>> = Vec::new();
    if let Some(np) = node_feat_path {
        let mut rdr = reader(np)?;
        let header = rdr.headers()?.clone();
        if header.get(0) != Some("node") {
            return Err(Error::Schema("node-feature header must start with node".into()));
        }
        let width = header.len() - 1;
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            if rec.len() != width + 1 {
                return Err(Error::Schema(format!(
                    "node features line {line}: {} values, expected {width}",
                    rec.len().saturating_sub(1)
                )));
            }
            let node: NodeId = parse_field(&rec[0], line, "node")?;
            let feat = (1..rec.len())
                .map(|i| parse_field::<f64>(&rec[i], line, "node feature"))
                .collect::<Result<Vec<_>>>()?;
            if node_feat.len() <= node {
                node_feat.resize(node + 1, Vec::new());
            }
            node_feat[node] = feat;
        }
        // Absent rows become zeros of the declared width.
        for f in node_feat.iter_mut().filter(|f| f.is_empty()) {
            *f = vec![0.0; width];
        }
    }
    EventLog::new(rows, node_feat, 0)
}

/// Convert the common benchmark layout (`user,item,timestamp,label,f0,...`,
/// one header line) into the event CSV schema. Item ids are shifted past the
/// largest user id so the two id spaces do not collide.
pub fn convert_benchmark_csv(input: &Path, output: &Path) -> Result<EventLog> {
    let text = std::fs::read_to_string(input)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 4 {
            return Err(Error::Parse {
                line: line_no,
                msg: "expected at least user,item,timestamp,label".into(),
            });
        }
        let src: NodeId = parse_field(fields[0], line_no, "user")?;
        let dst: NodeId = parse_field(fields[1], line_no, "item")?;
        let ts: f64 = parse_field(fields[2], line_no, "timestamp")?;
        let feat = fields[4..]
            .iter()
            .map(|f| parse_field::<f64>(f, line_no, "feature"))
            .collect::<Result<Vec<_>>>()?;
        rows.push((src, dst, ts, feat));
    }
    let offset = rows.iter().map(|r| r.0 + 1).max().unwrap_or(0);
    for r in &mut rows {
        r.1 += offset;
    }
    rows.sort_by(|a, b| a.2.total_cmp(&b.2));
    let log = EventLog::new(rows, Vec::new(), 0)?;
    log.write_csv(output)?;
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn loads_three_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "e.csv", "src,dst,ts\n0,1,1.0\n1,2,2.0\n0,2,2.0\n");
        let log = load_events(&p, None).unwrap();
        assert_eq!(log.len(), 3);
        assert_eq!(log.num_nodes(), 3);
        assert_eq!(log.interactions()[2].idx, 2);
        assert_eq!(log.interactions()[2].ts, 2.0);
        assert_eq!(log.edge_dim(), 0);
    }

    #[test]
    fn header_only_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "e.csv", "src,dst,ts\n");
        let log = load_events(&p, None).unwrap();
        assert!(log.is_empty());
    }

    #[test]
    fn decreasing_timestamp_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "e.csv", "src,dst,ts\n0,1,2.0\n1,0,1.0\n");
        match load_events(&p, None) {
            Err(Error::Ordering { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected ordering error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_row_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "e.csv", "src,dst,ts\n0,1,1.0\n0,x,2.0\n");
        match load_events(&p, None) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn feature_width_mismatch_is_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "e.csv", "src,dst,ts,f0,f1\n0,1,1.0,0.5,0.5\n0,1,2.0,0.5\n");
        assert!(matches!(load_events(&p, None), Err(Error::Schema(_))));
    }

    #[test]
    fn node_features_fill_missing_with_zeros() {
        let dir = tempfile::tempdir().unwrap();
        let e = write(&dir, "e.csv", "src,dst,ts,f0\n0,3,1.0,0.25\n");
        let n = write(&dir, "n.csv", "node,f0,f1\n1,1.0,2.0\n");
        let log = load_events(&e, Some(&n)).unwrap();
        assert_eq!(log.num_nodes(), 4);
        assert_eq!(log.node_dim(), 2);
        assert_eq!(log.node_feat(1), &[1.0, 2.0]);
        assert_eq!(log.node_feat(3), &[0.0, 0.0]);
        assert_eq!(log.interactions()[0].edge_feat, vec![0.25]);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![(0, 1, 0.5, vec![1.5]), (2, 1, 0.75, vec![-3.0]), (1, 1, 0.75, vec![0.0])];
        let log = EventLog::new(rows, Vec::new(), 0).unwrap();
        let p = dir.path().join("out.csv");
        log.write_csv(&p).unwrap();
        assert_eq!(load_events(&p, None).unwrap(), log);
    }

    #[test]
    fn converts_benchmark_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "raw.csv", "user_id,item_id,timestamp,state_label,feat\n0,5,1.0,0,0.1\n1,4,3.0,0,0.2\n");
        let out = dir.path().join("events.csv");
        let log = convert_benchmark_csv(&p, &out).unwrap();
        assert_eq!(log.len(), 2);
        assert_eq!(log.num_nodes(), 8);
        assert_eq!(log.interactions()[0].dst, 7);
        assert_eq!(load_events(&out, None).unwrap(), log);
    }
}
