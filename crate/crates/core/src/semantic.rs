//! Is-a taxonomies and the path, Wu-Palmer and Leacock-Chodorow relatedness
//! measures used to grade how sensible a misclassification is.
//!
//! Conventions: depth counts nodes from the root (root depth 1) along the
//! shortest is-a chain; path length counts nodes, so a concept is at length 1
//! from itself; the least common subsumer is the deepest common ancestor.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fs;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SemanticError {
    #[error("taxonomy is empty")]
    Empty,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("is-a cycle through '{0}'")]
    Cycle(String),
    #[error("several root candidates: {0:?}")]
    MultipleRoots(Vec<String>),
    #[error("root '{0}' has a parent")]
    RootHasParent(String),
    #[error("'{0}' does not reach the root")]
    Orphan(String),
    #[error("label '{0}' is not mapped to a taxonomy node")]
    Unmapped(String),
    #[error("'{0}' and '{1}' share no ancestor")]
    NoCommonAncestor(String, String),
    #[error("no misclassified pairs to score")]
    NoPairs,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Validated rooted DAG of concepts.
#[derive(Debug, Clone)]
pub struct Taxonomy {
    ids: Vec<String>,
    index: HashMap<String, usize>,
    parents: Vec<Vec<usize>>,
    depth: Vec<usize>,
    root: usize,
    labels: HashMap<String, String>,
}

impl Taxonomy {
    /// Parses `child parent` lines and an optional `!root <id>` directive.
    /// Blank lines and lines starting with `#` are ignored.
    pub fn parse(text: &str) -> Result<Self, SemanticError> {
        let mut ids: Vec<String> = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut parents: Vec<Vec<usize>> = Vec::new();
        let mut declared_root = None;
        let mut intern = |name: &str, ids: &mut Vec<String>, parents: &mut Vec<Vec<usize>>| {
            *index.entry(name.to_string()).or_insert_with(|| {
                ids.push(name.to_string());
                parents.push(Vec::new());
                ids.len() - 1
            })
        };
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |message: &str| SemanticError::Parse {
                line: i + 1,
                message: message.to_string(),
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields[0] == "!root" {
                if fields.len() != 2 {
                    return Err(bad("expected '!root <id>'"));
                }
                if declared_root.is_some() {
                    return Err(bad("root declared twice"));
                }
                declared_root = Some(intern(fields[1], &mut ids, &mut parents));
                continue;
            }
            if fields.len() != 2 {
                return Err(bad("expected 'child parent'"));
            }
            let child = intern(fields[0], &mut ids, &mut parents);
            let parent = intern(fields[1], &mut ids, &mut parents);
            if !parents[child].contains(&parent) {
                parents[child].push(parent);
            }
        }
        if ids.is_empty() {
            return Err(SemanticError::Empty);
        }
        let index: HashMap<String, usize> =
            ids.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();

        check_acyclic(&ids, &parents)?;

        let parentless: Vec<usize> = (0..ids.len()).filter(|&i| parents[i].is_empty()).collect();
        let root = match declared_root {
            Some(r) => {
                if !parents[r].is_empty() {
                    return Err(SemanticError::RootHasParent(ids[r].clone()));
                }
                r
            }
            None if parentless.len() == 1 => parentless[0],
            None => {
                return Err(SemanticError::MultipleRoots(
                    parentless.iter().map(|&i| ids[i].clone()).collect(),
                ))
            }
        };

        let mut children = vec![Vec::new(); ids.len()];
        for (c, ps) in parents.iter().enumerate() {
            for &p in ps {
                children[p].push(c);
            }
        }
        let mut depth = vec![0; ids.len()];
        depth[root] = 1;
        let mut queue = VecDeque::from([root]);
        while let Some(n) = queue.pop_front() {
            for &c in &children[n] {
                if depth[c] == 0 {
                    depth[c] = depth[n] + 1;
                    queue.push_back(c);
                }
            }
        }
        if let Some(i) = depth.iter().position(|&d| d == 0) {
            return Err(SemanticError::Orphan(ids[i].clone()));
        }
        Ok(Taxonomy {
            ids,
            index,
            parents,
            depth,
            root,
            labels: HashMap::new(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SemanticError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Attaches a label → node map. Without one, labels are node ids.
    pub fn with_label_map(mut self, map: HashMap<String, String>) -> Result<Self, SemanticError> {
        for node in map.values() {
            if !self.index.contains_key(node) {
                return Err(SemanticError::Unmapped(node.clone()));
            }
        }
        self.labels = map;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn root(&self) -> &str {
        &self.ids[self.root]
    }

    pub fn max_depth(&self) -> usize {
        *self.depth.iter().max().expect("nonempty")
    }

    pub fn depth(&self, node: &str) -> Option<usize> {
        self.index.get(node).map(|&i| self.depth[i])
    }

    fn resolve(&self, label: &str) -> Result<usize, SemanticError> {
        let node = self.labels.get(label).map(String::as_str).unwrap_or(label);
        self.index
            .get(node)
            .copied()
            .ok_or_else(|| SemanticError::Unmapped(label.to_string()))
    }

    /// Edge distance from `n` to each of its ancestors (itself included).
    fn ancestors(&self, n: usize) -> HashMap<usize, usize> {
        let mut dist = HashMap::from([(n, 0)]);
        let mut queue = VecDeque::from([n]);
        while let Some(x) = queue.pop_front() {
            for &p in &self.parents[x] {
                if !dist.contains_key(&p) {
                    dist.insert(p, dist[&x] + 1);
                    queue.push_back(p);
                }
            }
        }
        dist
    }
}

fn check_acyclic(ids: &[String], parents: &[Vec<usize>]) -> Result<(), SemanticError> {
    // 0 = unvisited, 1 = on stack, 2 = done
    let mut state = vec![0u8; ids.len()];
    for start in 0..ids.len() {
        if state[start] != 0 {
            continue;
        }
        let mut stack = vec![(start, 0usize)];
        state[start] = 1;
        while let Some(&mut (n, ref mut next)) = stack.last_mut() {
            if *next < parents[n].len() {
                let p = parents[n][*next];
                *next += 1;
                match state[p] {
                    0 => {
                        state[p] = 1;
                        stack.push((p, 0));
                    }
                    1 => return Err(SemanticError::Cycle(ids[p].clone())),
                    _ => {}
                }
            } else {
                state[n] = 2;
                stack.pop();
            }
        }
    }
    Ok(())
}

/// Parses `label node_id` lines; the label may contain spaces, the node id
/// is the last field.
pub fn parse_label_map(text: &str) -> Result<HashMap<String, String>, SemanticError> {
    let mut map = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (label, node) = line.rsplit_once(char::is_whitespace).ok_or(SemanticError::Parse {
            line: i + 1,
            message: "expected 'label node_id'".into(),
        })?;
        map.insert(label.trim().to_string(), node.to_string());
    }
    Ok(map)
}

pub fn load_label_map(path: impl AsRef<Path>) -> Result<HashMap<String, String>, SemanticError> {
    parse_label_map(&fs::read_to_string(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SemanticScores {
    pub path: f64,
    pub wup: f64,
    pub lch: f64,
}

/// Shortest path between two concepts through a common ancestor, and the
/// deepest common ancestor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PathInfo {
    /// Node count of the shortest path.
    pub len: usize,
    pub lcs_depth: usize,
    /// Edge distances from each concept to the deepest common ancestor.
    pub to_lcs: (usize, usize),
}

pub fn path_info(tax: &Taxonomy, a: &str, b: &str) -> Result<PathInfo, SemanticError> {
    let (ia, ib) = (tax.resolve(a)?, tax.resolve(b)?);
    let (da, db) = (tax.ancestors(ia), tax.ancestors(ib));
    let common: BTreeMap<usize, (usize, usize)> = da
        .iter()
        .filter_map(|(c, &x)| db.get(c).map(|&y| (*c, (x, y))))
        .collect();
    let len = common
        .values()
        .map(|&(x, y)| x + y + 1)
        .min()
        .ok_or_else(|| SemanticError::NoCommonAncestor(a.to_string(), b.to_string()))?;
    // deepest ancestor; among equally deep ones the closest
    let (lcs, to_lcs) = common
        .iter()
        .min_by_key(|&(&c, &(x, y))| (std::cmp::Reverse(tax.depth[c]), x + y, c))
        .map(|(&c, &d)| (c, d))
        .expect("nonempty");
    Ok(PathInfo {
        len,
        lcs_depth: tax.depth[lcs],
        to_lcs,
    })
}

/// Path, Wu-Palmer and Leacock-Chodorow relatedness. For Wu-Palmer each
/// concept's depth is taken along its route through the common subsumer,
/// which is its ordinary depth in a tree and keeps the score in (0, 1] when
/// a concept has several parents.
pub fn relatedness(tax: &Taxonomy, a: &str, b: &str) -> Result<SemanticScores, SemanticError> {
    let info = path_info(tax, a, b)?;
    let len = info.len as f64;
    let d = info.lcs_depth;
    Ok(SemanticScores {
        path: 1.0 / len,
        wup: 2.0 * d as f64 / (info.to_lcs.0 + info.to_lcs.1 + 2 * d) as f64,
        lch: -(len / (2.0 * tax.max_depth() as f64)).ln(),
    })
}

/// Mean of each measure over `(true, predicted)` label pairs.
pub fn avg_semantic_scores<S: AsRef<str>>(
    tax: &Taxonomy,
    pairs: &[(S, S)],
) -> Result<SemanticScores, SemanticError> {
    if pairs.is_empty() {
        return Err(SemanticError::NoPairs);
    }
    let mut acc = SemanticScores {
        path: 0.0,
        wup: 0.0,
        lch: 0.0,
    };
    for (a, b) in pairs {
        let s = relatedness(tax, a.as_ref(), b.as_ref())?;
        acc.path += s.path;
        acc.wup += s.wup;
        acc.lch += s.lch;
    }
    let n = pairs.len() as f64;
    Ok(SemanticScores {
        path: acc.path / n,
        wup: acc.wup / n,
        lch: acc.lch / n,
    })
}
