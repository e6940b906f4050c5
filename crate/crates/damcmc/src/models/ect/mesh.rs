//! Structured triangular meshes of the unit disk with tagged electrode arcs.
//!
//! The canonical meshes are shipped as plain-text data files and parsed at
//! model construction; the deterministic generator that produced them lives
//! here too, so the files can be audited or regenerated.
//!
//! File format (line oriented, `#` starts a comment):
//!
//! ```text
//! nodes <count>
//! <index> <x> <y>
//! elements <count>
//! <index> <n0> <n1> <n2>
//! electrodes <count>
//! <index> <node-count> <node-id> ...
//! ```
//!
//! Nodes are listed center first, then ring by ring outward; elements are
//! counterclockwise triangles; each electrode lists the boundary nodes of
//! one contiguous arc.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct DiskMesh {
    pub nodes: Vec<[f64; 2]>,
    pub elements: Vec<[usize; 3]>,
    pub electrodes: Vec<Vec<usize>>,
}

fn take_line<'a>(lines: &[&'a str], cursor: &mut usize, what: &str) -> Result<&'a str> {
    let line = lines
        .get(*cursor)
        .ok_or_else(|| Error::Mesh(format!("missing {what} line")))?;
    *cursor += 1;
    Ok(line)
}

fn expect_section(lines: &[&str], cursor: &mut usize, name: &str) -> Result<usize> {
    let line = take_line(lines, cursor, name)?;
    let mut parts = line.split_whitespace();
    let head = parts.next().unwrap_or("");
    if head != name {
        return Err(Error::Mesh(format!("expected `{name}`, found `{head}`")));
    }
    parts
        .next()
        .and_then(|c| c.parse().ok())
        .ok_or_else(|| Error::Mesh(format!("bad `{name}` count")))
}

impl DiskMesh {
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_elements(&self) -> usize {
        self.elements.len()
    }

    pub fn n_electrodes(&self) -> usize {
        self.electrodes.len()
    }

    /// Nodes on the unit circle.
    pub fn boundary_nodes(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, p)| (p[0].hypot(p[1]) - 1.0).abs() < 1e-9)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn element_centroid(&self, e: usize) -> [f64; 2] {
        let [a, b, c] = self.elements[e];
        [
            (self.nodes[a][0] + self.nodes[b][0] + self.nodes[c][0]) / 3.0,
            (self.nodes[a][1] + self.nodes[b][1] + self.nodes[c][1]) / 3.0,
        ]
    }

    fn validate(&self) -> Result<()> {
        let n = self.nodes.len();
        for (i, el) in self.elements.iter().enumerate() {
            if el.iter().any(|&v| v >= n) {
                return Err(Error::Mesh(format!("element {i} references a missing node")));
            }
            if el[0] == el[1] || el[1] == el[2] || el[0] == el[2] {
                return Err(Error::Mesh(format!("element {i} is degenerate")));
            }
        }
        let boundary: std::collections::HashSet<usize> =
            self.boundary_nodes().into_iter().collect();
        let mut seen = std::collections::HashSet::new();
        for (k, arc) in self.electrodes.iter().enumerate() {
            if arc.is_empty() {
                return Err(Error::Mesh(format!("electrode {k} has no nodes")));
            }
            for &node in arc {
                if node >= n {
                    return Err(Error::Mesh(format!(
                        "electrode {k} references a missing node"
                    )));
                }
                if !boundary.contains(&node) {
                    return Err(Error::Mesh(format!(
                        "electrode {k} node {node} is not on the boundary"
                    )));
                }
                if !seen.insert(node) {
                    return Err(Error::Mesh(format!(
                        "electrode arcs overlap at node {node}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or("").trim())
            .filter(|l| !l.is_empty())
            .collect();
        let mut cursor = 0usize;

        let n_nodes = expect_section(&lines, &mut cursor, "nodes")?;
        let mut nodes = Vec::with_capacity(n_nodes);
        for i in 0..n_nodes {
            let line = take_line(&lines, &mut cursor, "node")?;
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 3 || f[0].parse::<usize>() != Ok(i) {
                return Err(Error::Mesh(format!("bad node line: `{line}`")));
            }
            let x: f64 = f[1].parse().map_err(|_| Error::Mesh(format!("bad node x: `{line}`")))?;
            let y: f64 = f[2].parse().map_err(|_| Error::Mesh(format!("bad node y: `{line}`")))?;
            nodes.push([x, y]);
        }

        let n_elements = expect_section(&lines, &mut cursor, "elements")?;
        let mut elements = Vec::with_capacity(n_elements);
        for i in 0..n_elements {
            let line = take_line(&lines, &mut cursor, "element")?;
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 4 || f[0].parse::<usize>() != Ok(i) {
                return Err(Error::Mesh(format!("bad element line: `{line}`")));
            }
            let parse = |s: &str| -> Result<usize> {
                s.parse()
                    .map_err(|_| Error::Mesh(format!("bad element node id: `{line}`")))
            };
            elements.push([parse(f[1])?, parse(f[2])?, parse(f[3])?]);
        }

        let n_electrodes = expect_section(&lines, &mut cursor, "electrodes")?;
        let mut electrodes = Vec::with_capacity(n_electrodes);
        for i in 0..n_electrodes {
            let line = take_line(&lines, &mut cursor, "electrode")?;
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() < 3 || f[0].parse::<usize>() != Ok(i) {
                return Err(Error::Mesh(format!("bad electrode line: `{line}`")));
            }
            let count: usize = f[1]
                .parse()
                .map_err(|_| Error::Mesh(format!("bad electrode count: `{line}`")))?;
            if f.len() != 2 + count {
                return Err(Error::Mesh(format!(
                    "electrode {i} announces {count} nodes but lists {}",
                    f.len() - 2
                )));
            }
            let mut arc = Vec::with_capacity(count);
            for s in &f[2..] {
                arc.push(
                    s.parse()
                        .map_err(|_| Error::Mesh(format!("bad electrode node id: `{line}`")))?,
                );
            }
            electrodes.push(arc);
        }

        let mesh = Self {
            nodes,
            elements,
            electrodes,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn to_text(&self, comment: &str) -> String {
        let mut out = String::new();
        out.push_str(&format!("# {comment}\n"));
        out.push_str(&format!("nodes {}\n", self.nodes.len()));
        for (i, p) in self.nodes.iter().enumerate() {
            out.push_str(&format!("{i} {:?} {:?}\n", p[0], p[1]));
        }
        out.push_str(&format!("elements {}\n", self.elements.len()));
        for (i, el) in self.elements.iter().enumerate() {
            out.push_str(&format!("{i} {} {} {}\n", el[0], el[1], el[2]));
        }
        out.push_str(&format!("electrodes {}\n", self.electrodes.len()));
        for (i, arc) in self.electrodes.iter().enumerate() {
            out.push_str(&format!("{i} {}", arc.len()));
            for n in arc {
                out.push_str(&format!(" {n}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Builds the structured concentric-ring triangulation of the unit disk.
///
/// `n_theta` angular sectors, `n_rings` rings of radius `k / n_rings`, and
/// `n_electrodes` boundary arcs alternating with equally wide gaps, so
/// `n_theta` must be divisible by `2 * n_electrodes`. The element count is
/// `n_theta * (2 * n_rings - 1)`.
pub fn structured_disk(n_theta: usize, n_rings: usize, n_electrodes: usize) -> Result<DiskMesh> {
    if n_theta < 3 || n_rings < 1 {
        return Err(Error::Mesh("need n_theta >= 3 and n_rings >= 1".into()));
    }
    if n_electrodes > 0 && !n_theta.is_multiple_of(2 * n_electrodes) {
        return Err(Error::Mesh(format!(
            "n_theta = {n_theta} is not divisible by 2 * n_electrodes = {}",
            2 * n_electrodes
        )));
    }

    let mut nodes = vec![[0.0, 0.0]];
    for k in 1..=n_rings {
        let r = k as f64 / n_rings as f64;
        for j in 0..n_theta {
            let th = 2.0 * std::f64::consts::PI * j as f64 / n_theta as f64;
            nodes.push([r * th.cos(), r * th.sin()]);
        }
    }
    let ring_node = |k: usize, j: usize| 1 + (k - 1) * n_theta + (j % n_theta);

    let mut elements = Vec::with_capacity(n_theta * (2 * n_rings - 1));
    for j in 0..n_theta {
        elements.push([0, ring_node(1, j), ring_node(1, j + 1)]);
    }
    for k in 1..n_rings {
        for j in 0..n_theta {
            let (i0, i1) = (ring_node(k, j), ring_node(k, j + 1));
            let (o0, o1) = (ring_node(k + 1, j), ring_node(k + 1, j + 1));
            elements.push([i0, o0, o1]);
            elements.push([i0, o1, i1]);
        }
    }

    let mut electrodes = Vec::with_capacity(n_electrodes);
    if n_electrodes > 0 {
        let edges_per = n_theta / (2 * n_electrodes);
        for e in 0..n_electrodes {
            let start = e * 2 * edges_per;
            let arc: Vec<usize> = (start..=start + edges_per)
                .map(|j| ring_node(n_rings, j))
                .collect();
            electrodes.push(arc);
        }
    }

    let mesh = DiskMesh {
        nodes,
        elements,
        electrodes,
    };
    mesh.validate()?;
    Ok(mesh)
}
