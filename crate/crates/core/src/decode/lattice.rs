//! Decoding lattice and its text format.
//!
//! ```text
//! lattice<TAB>nodes=N<TAB>start=S<TAB>frames=f0,f1,...
//! finals<TAB>id:logweight<TAB>...
//! from<TAB>to<TAB>wordpiece<TAB>logweight     (one line per arc)
//! ```

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Arc {
    pub from: usize,
    pub to: usize,
    pub wordpiece: u32,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Lattice {
    /// Frame at which each node was created.
    pub frames: Vec<usize>,
    pub arcs: Vec<Arc>,
    pub start: usize,
    /// Final nodes with their closing log weights.
    pub finals: Vec<(usize, f64)>,
}

impl Lattice {
    pub fn num_nodes(&self) -> usize {
        self.frames.len()
    }

    pub fn num_arcs(&self) -> usize {
        self.arcs.len()
    }

    /// Log weight of the path spelling `labels` from the start node plus the
    /// final weight of its end node, if such a path ends in a final node.
    pub fn path_score(&self, labels: &[u32]) -> Option<f64> {
        let mut node = self.start;
        let mut total = 0.0;
        for &y in labels {
            let a = self.arcs.iter().find(|a| a.from == node && a.wordpiece == y)?;
            total += a.weight;
            node = a.to;
        }
        let (_, fw) = self.finals.iter().find(|(n, _)| *n == node)?;
        Some(total + fw)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_nodes();
        if self.start >= n {
            return Err(Error::usage(format!("start node {} does not exist", self.start)));
        }
        for a in &self.arcs {
            if a.from >= n || a.to >= n {
                return Err(Error::usage(format!("arc {}->{} references a missing node", a.from, a.to)));
            }
            if self.frames[a.to] < self.frames[a.from] {
                return Err(Error::usage(format!("arc {}->{} goes back in time", a.from, a.to)));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let frames: Vec<String> = self.frames.iter().map(|f| f.to_string()).collect();
        let mut out = format!(
            "lattice\tnodes={}\tstart={}\tframes={}\n",
            self.num_nodes(),
            self.start,
            frames.join(",")
        );
        out.push_str("finals");
        for (n, w) in &self.finals {
            let _ = write!(out, "\t{n}:{w:?}");
        }
        out.push('\n');
        for a in &self.arcs {
            let _ = writeln!(out, "{}\t{}\t{}\t{:?}", a.from, a.to, a.wordpiece, a.weight);
        }
        out
    }

    pub fn from_text(text: &str, path: &str) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            path: path.to_string(),
            line,
            message,
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| err(1, "empty lattice file".into()))?;
        let fields: Vec<&str> = header.split('\t').collect();
        let [tag, nodes, start, frames] = fields.as_slice() else {
            return Err(err(1, "expected `lattice<TAB>nodes=N<TAB>start=S<TAB>frames=...`".into()));
        };
        let value = |f: &str, key: &str| -> Result<String> {
            f.strip_prefix(key)
                .map(String::from)
                .ok_or_else(|| err(1, format!("expected `{key}...`")))
        };
        if *tag != "lattice" {
            return Err(err(1, "missing `lattice` tag".into()));
        }
        let n: usize = value(nodes, "nodes=")?
            .parse()
            .map_err(|_| err(1, "bad node count".into()))?;
        let start: usize = value(start, "start=")?
            .parse()
            .map_err(|_| err(1, "bad start node".into()))?;
        let fr = value(frames, "frames=")?;
        let frames: Vec<usize> = if fr.is_empty() {
            Vec::new()
        } else {
            fr.split(',')
                .map(|f| f.parse().map_err(|_| err(1, format!("bad frame `{f}`"))))
                .collect::<Result<_>>()?
        };
        if frames.len() != n {
            return Err(err(1, format!("{} frames listed for {n} nodes", frames.len())));
        }
        if start >= n {
            return Err(err(1, format!("start node {start} does not exist")));
        }
        let finals_line = lines.next().ok_or_else(|| err(2, "missing finals line".into()))?;
        let mut parts = finals_line.split('\t');
        if parts.next() != Some("finals") {
            return Err(err(2, "expected `finals` line".into()));
        }
        let mut finals = Vec::new();
        for p in parts {
            let (id, w) = p.split_once(':').ok_or_else(|| err(2, format!("bad final entry `{p}`")))?;
            let id: usize = id.parse().map_err(|_| err(2, format!("bad final node `{id}`")))?;
            if id >= n {
                return Err(err(2, format!("final node {id} does not exist")));
            }
            let w: f64 = w.parse().map_err(|_| err(2, format!("bad final weight `{w}`")))?;
            finals.push((id, w));
        }
        let mut arcs = Vec::new();
        for (i, line) in lines.enumerate() {
            let ln = i + 3;
            let f: Vec<&str> = line.split('\t').collect();
            let [from, to, wp, w] = f.as_slice() else {
                return Err(err(ln, format!("expected 4 fields, found {}", f.len())));
            };
            let node = |s: &str| -> Result<usize> {
                let v: usize = s.parse().map_err(|_| err(ln, format!("bad node id `{s}`")))?;
                if v >= n {
                    return Err(err(ln, format!("arc references node {v}, which does not exist")));
                }
                Ok(v)
            };
            arcs.push(Arc {
                from: node(from)?,
                to: node(to)?,
                wordpiece: wp.parse().map_err(|_| err(ln, format!("bad wordpiece `{wp}`")))?,
                weight: w.parse().map_err(|_| err(ln, format!("bad weight `{w}`")))?,
            });
        }
        Ok(Self {
            frames,
            arcs,
            start,
            finals,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, &path.display().to_string())
    }

    /// Human-readable summary: one line per node with its outgoing arcs.
    pub fn pretty(&self, unit: impl Fn(u32) -> String) -> String {
        let finals: BTreeSet<usize> = self.finals.iter().map(|(n, _)| *n).collect();
        let mut out = format!(
            "{} nodes, {} arcs, start {}, {} final\n",
            self.num_nodes(),
            self.num_arcs(),
            self.start,
            self.finals.len()
        );
        for n in 0..self.num_nodes() {
            let mark = if finals.contains(&n) { " (final)" } else { "" };
            let _ = writeln!(out, "node {n} @ frame {}{mark}", self.frames[n]);
            for a in self.arcs.iter().filter(|a| a.from == n) {
                let _ = writeln!(out, "  -> {} [{}] {:.6}", a.to, unit(a.wordpiece), a.weight);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Lattice {
        Lattice {
            frames: vec![0, 1, 1, 3],
            arcs: vec![
                Arc { from: 0, to: 1, wordpiece: 4, weight: -0.25 },
                Arc { from: 0, to: 2, wordpiece: 5, weight: -1.0 / 3.0 },
                Arc { from: 1, to: 3, wordpiece: 6, weight: -2.5e-7 },
            ],
            start: 0,
            finals: vec![(3, -0.125), (2, -4.0)],
        }
    }

    #[test]
    fn text_round_trip() {
        let l = sample();
        let back = Lattice::from_text(&l.to_text(), "mem").unwrap();
        assert_eq!(back, l);
        assert_eq!(l.path_score(&[4, 6]), Some(-0.25 - 2.5e-7 - 0.125));
    }

    #[test]
    fn empty_lattice_is_two_lines() {
        let l = Lattice {
            frames: vec![0],
            arcs: vec![],
            start: 0,
            finals: vec![(0, -1.5)],
        };
        let t = l.to_text();
        assert_eq!(t.lines().count(), 2);
        assert_eq!(Lattice::from_text(&t, "mem").unwrap(), l);
    }

    #[test]
    fn dangling_target_names_node() {
        let t = "lattice\tnodes=2\tstart=0\tframes=0,1\nfinals\t1:0.0\n0\t7\t3\t-1.0\n";
        let e = Lattice::from_text(t, "x.lat").unwrap_err();
        match e {
            Error::Parse { line, message, .. } => {
                assert_eq!(line, 3);
                assert!(message.contains("node 7"));
            }
            other => panic!("{other:?}"),
        }
    }
}
