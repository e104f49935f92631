//! SMILES subset parsing, Bemis-Murcko scaffold extraction, and
//! scaffold-grouped train/test splitting.
//!
//! The parser covers the organic subset (B, C, N, O, P, S, F, Cl, Br, I),
//! bracket atoms with charge and H-count, branches, ring-closure digits and
//! %nn, explicit bonds - = # :, and aromatic lowercase atoms. Stereo
//! markers (/ \ @) and isotopes are accepted and discarded. Scaffold keys
//! identify the pruned scaffold graph up to isomorphism over element,
//! aromaticity, and bond order; charges and H-counts are stripped.
//!
//! Kekulized and aromatic forms of the same ring are NOT unified:
//! "C1=CC=CC=C1" and "c1ccccc1" produce different keys. Aromaticity
//! perception from kekule input is out of scope.

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use thiserror::Error;

pub const EMPTY_SCAFFOLD: &str = "∅";

#[derive(Debug, Error, PartialEq)]
pub enum ChemError {
    #[error("empty SMILES input")]
    EmptyInput,
    #[error("unclosed ring bond opened at byte {offset}")]
    UnclosedRing { offset: usize },
    #[error("unbalanced parenthesis at byte {offset}")]
    UnbalancedParenthesis { offset: usize },
    #[error("unknown atom symbol at byte {offset}")]
    UnknownAtomSymbol { offset: usize },
    #[error("all {n} eligible drugs share one scaffold; test set would be empty")]
    AllOneScaffold { n: usize },
    #[error("no drugs with a parseable SMILES to split")]
    NoEligibleDrugs,
    #[error("train fraction {fraction} leaves an empty split side")]
    DegenerateFraction { fraction: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum BondOrder {
    Single,
    Double,
    Triple,
    Aromatic,
}

impl BondOrder {
    fn label(self) -> u8 {
        match self {
            BondOrder::Single => b'-',
            BondOrder::Double => b'=',
            BondOrder::Triple => b'#',
            BondOrder::Aromatic => b':',
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Atom {
    pub element: &'static str,
    pub aromatic: bool,
    pub charge: i32,
    pub h_count: Option<u8>,
    pub ring: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bond {
    pub a: usize,
    pub b: usize,
    pub order: BondOrder,
    pub ring: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Molecule {
    pub atoms: Vec<Atom>,
    pub bonds: Vec<Bond>,
}

impl Molecule {
    pub fn degree(&self, i: usize) -> usize {
        self.bonds.iter().filter(|b| b.a == i || b.b == i).count()
    }
}

const ELEMENTS: [&str; 11] = ["B", "C", "N", "O", "P", "S", "F", "Cl", "Br", "I", "H"];

fn element_of(sym: &str) -> Option<&'static str> {
    ELEMENTS.iter().copied().find(|e| *e == sym)
}

// Bond order recorded during parsing; implicit bonds are resolved after
// ring perception (aromatic inside rings, single elsewhere).
#[derive(Debug, Clone, Copy)]
enum RawOrder {
    Implicit,
    Explicit(BondOrder),
}

struct Parser<'a> {
    s: &'a [u8],
    pos: usize,
    atoms: Vec<Atom>,
    bonds: Vec<(usize, usize, RawOrder)>,
    prev: Option<usize>,
    stack: Vec<(usize, usize)>,
    ring_open: HashMap<u16, (usize, Option<BondOrder>, usize)>,
    pending: Option<BondOrder>,
}

pub fn parse_smiles(s: &str) -> Result<Molecule, ChemError> {
    if s.is_empty() {
        return Err(ChemError::EmptyInput);
    }
    let mut p = Parser {
        s: s.as_bytes(),
        pos: 0,
        atoms: Vec::new(),
        bonds: Vec::new(),
        prev: None,
        stack: Vec::new(),
        ring_open: HashMap::new(),
        pending: None,
    };
    p.run()?;
    if let Some(&(_, off)) = p.stack.first() {
        return Err(ChemError::UnbalancedParenthesis { offset: off });
    }
    if let Some(off) = p.ring_open.values().map(|v| v.2).min() {
        return Err(ChemError::UnclosedRing { offset: off });
    }
    Ok(finish(p.atoms, p.bonds))
}

impl<'a> Parser<'a> {
    fn run(&mut self) -> Result<(), ChemError> {
        while self.pos < self.s.len() {
            let c = self.s[self.pos];
            match c {
                b'(' => {
                    let prev = self.prev.ok_or(ChemError::UnbalancedParenthesis {
                        offset: self.pos,
                    })?;
                    self.stack.push((prev, self.pos));
                    self.pos += 1;
                }
                b')' => {
                    let (prev, _) = self.stack.pop().ok_or(
                        ChemError::UnbalancedParenthesis { offset: self.pos },
                    )?;
                    self.prev = Some(prev);
                    self.pos += 1;
                }
                b'-' => self.take_bond(BondOrder::Single),
                b'=' => self.take_bond(BondOrder::Double),
                b'#' => self.take_bond(BondOrder::Triple),
                b':' => self.take_bond(BondOrder::Aromatic),
                b'/' | b'\\' => self.take_bond(BondOrder::Single),
                b'0'..=b'9' => {
                    let n = (c - b'0') as u16;
                    self.pos += 1;
                    self.ring_closure(n, self.pos - 1)?;
                }
                b'%' => {
                    let start = self.pos;
                    if self.pos + 2 >= self.s.len()
                        || !self.s[self.pos + 1].is_ascii_digit()
                        || !self.s[self.pos + 2].is_ascii_digit()
                    {
                        return Err(ChemError::UnknownAtomSymbol { offset: start });
                    }
                    let n = (self.s[self.pos + 1] - b'0') as u16 * 10
                        + (self.s[self.pos + 2] - b'0') as u16;
                    self.pos += 3;
                    self.ring_closure(n, start)?;
                }
                b'[' => self.bracket_atom()?,
                b'C' if self.peek(1) == Some(b'l') => {
                    self.add_atom("Cl", false, 0, None);
                    self.pos += 2;
                }
                b'B' if self.peek(1) == Some(b'r') => {
                    self.add_atom("Br", false, 0, None);
                    self.pos += 2;
                }
                b'B' | b'C' | b'N' | b'O' | b'P' | b'S' | b'F' | b'I' => {
                    let sym = element_of(std::str::from_utf8(&[c]).unwrap()).unwrap();
                    self.add_atom(sym, false, 0, None);
                    self.pos += 1;
                }
                b'b' | b'c' | b'n' | b'o' | b'p' | b's' => {
                    let upper = (c as char).to_ascii_uppercase().to_string();
                    let sym = element_of(&upper).unwrap();
                    self.add_atom(sym, true, 0, None);
                    self.pos += 1;
                }
                _ => return Err(ChemError::UnknownAtomSymbol { offset: self.pos }),
            }
        }
        Ok(())
    }

    fn peek(&self, ahead: usize) -> Option<u8> {
        self.s.get(self.pos + ahead).copied()
    }

    fn take_bond(&mut self, order: BondOrder) {
        self.pending = Some(order);
        self.pos += 1;
    }

    fn add_atom(&mut self, element: &'static str, aromatic: bool, charge: i32, h: Option<u8>) {
        let idx = self.atoms.len();
        self.atoms.push(Atom {
            element,
            aromatic,
            charge,
            h_count: h,
            ring: false,
        });
        if let Some(prev) = self.prev {
            let order = match self.pending.take() {
                Some(o) => RawOrder::Explicit(o),
                None => RawOrder::Implicit,
            };
            self.bonds.push((prev, idx, order));
        } else {
            self.pending = None;
        }
        self.prev = Some(idx);
    }

    fn ring_closure(&mut self, n: u16, offset: usize) -> Result<(), ChemError> {
        let cur = self
            .prev
            .ok_or(ChemError::UnknownAtomSymbol { offset })?;
        match self.ring_open.remove(&n) {
            Some((other, opened_bond, opened_at)) => {
                if other == cur {
                    return Err(ChemError::UnclosedRing { offset: opened_at });
                }
                let order = match opened_bond.or(self.pending.take()) {
                    Some(o) => RawOrder::Explicit(o),
                    None => RawOrder::Implicit,
                };
                self.bonds.push((other, cur, order));
            }
            None => {
                self.ring_open.insert(n, (cur, self.pending.take(), offset));
            }
        }
        Ok(())
    }

    fn bracket_atom(&mut self) -> Result<(), ChemError> {
        let start = self.pos;
        self.pos += 1;
        while self.peek(0).is_some_and(|c| c.is_ascii_digit()) {
            self.pos += 1; // isotope, discarded
        }
        let (element, aromatic) = match self.peek(0) {
            Some(c @ (b'b' | b'c' | b'n' | b'o' | b'p' | b's')) => {
                self.pos += 1;
                let upper = (c as char).to_ascii_uppercase().to_string();
                (element_of(&upper).unwrap(), true)
            }
            Some(c) if c.is_ascii_uppercase() => {
                let two = if self.peek(1).is_some_and(|d| d.is_ascii_lowercase()) {
                    let sym = std::str::from_utf8(&self.s[self.pos..self.pos + 2])
                        .unwrap()
                        .to_string();
                    element_of(&sym)
                } else {
                    None
                };
                if let Some(sym) = two {
                    self.pos += 2;
                    (sym, false)
                } else {
                    let one = std::str::from_utf8(&self.s[self.pos..self.pos + 1])
                        .unwrap()
                        .to_string();
                    let sym = element_of(&one)
                        .ok_or(ChemError::UnknownAtomSymbol { offset: self.pos })?;
                    self.pos += 1;
                    (sym, false)
                }
            }
            _ => return Err(ChemError::UnknownAtomSymbol { offset: start }),
        };
        while self.peek(0) == Some(b'@') {
            self.pos += 1; // chirality, discarded
        }
        let mut h = None;
        if self.peek(0) == Some(b'H') && element != "H" {
            self.pos += 1;
            let mut count = 1u8;
            if self.peek(0).is_some_and(|c| c.is_ascii_digit()) {
                count = self.s[self.pos] - b'0';
                self.pos += 1;
            }
            h = Some(count);
        }
        let mut charge = 0i32;
        while let Some(c @ (b'+' | b'-')) = self.peek(0) {
            let sign = if c == b'+' { 1 } else { -1 };
            self.pos += 1;
            if self.peek(0).is_some_and(|d| d.is_ascii_digit()) {
                charge += sign * (self.s[self.pos] - b'0') as i32;
                self.pos += 1;
            } else {
                charge += sign;
            }
        }
        if self.peek(0) != Some(b']') {
            return Err(ChemError::UnknownAtomSymbol { offset: start });
        }
        self.pos += 1;
        self.add_atom(element, aromatic, charge, h);
        Ok(())
    }
}

fn finish(atoms: Vec<Atom>, raw: Vec<(usize, usize, RawOrder)>) -> Molecule {
    let pairs: Vec<(usize, usize)> = raw.iter().map(|&(a, b, _)| (a, b)).collect();
    let ring_bond = non_bridge_edges(atoms.len(), &pairs);
    let mut mol = Molecule {
        atoms,
        bonds: Vec::with_capacity(raw.len()),
    };
    for (i, (a, b, order)) in raw.into_iter().enumerate() {
        let both_aromatic = mol.atoms[a].aromatic && mol.atoms[b].aromatic;
        let order = match order {
            RawOrder::Explicit(o) => o,
            // implicit aromatic bonds only exist inside rings
            RawOrder::Implicit if both_aromatic && ring_bond[i] => BondOrder::Aromatic,
            RawOrder::Implicit => BondOrder::Single,
        };
        mol.bonds.push(Bond {
            a,
            b,
            order,
            ring: ring_bond[i],
        });
        if ring_bond[i] {
            mol.atoms[a].ring = true;
            mol.atoms[b].ring = true;
        }
    }
    mol
}

/// Marks each edge that lies on at least one cycle (i.e. is not a bridge).
fn non_bridge_edges(n: usize, edges: &[(usize, usize)]) -> Vec<bool> {
    let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    for (ei, &(a, b)) in edges.iter().enumerate() {
        adj[a].push((b, ei));
        adj[b].push((a, ei));
    }
    let mut disc = vec![usize::MAX; n];
    let mut low = vec![0usize; n];
    let mut bridge = vec![false; edges.len()];
    let mut timer = 0usize;

    struct Dfs<'t> {
        adj: &'t [Vec<(usize, usize)>],
        disc: &'t mut [usize],
        low: &'t mut [usize],
        bridge: &'t mut [bool],
        timer: &'t mut usize,
    }
    fn go(d: &mut Dfs, u: usize, parent_edge: usize) {
        d.disc[u] = *d.timer;
        d.low[u] = *d.timer;
        *d.timer += 1;
        for i in 0..d.adj[u].len() {
            let (v, ei) = d.adj[u][i];
            if ei == parent_edge {
                continue;
            }
            if d.disc[v] == usize::MAX {
                go(d, v, ei);
                d.low[u] = d.low[u].min(d.low[v]);
                if d.low[v] > d.disc[u] {
                    d.bridge[ei] = true;
                }
            } else {
                d.low[u] = d.low[u].min(d.disc[v]);
            }
        }
    }
    for start in 0..n {
        if disc[start] == usize::MAX {
            let mut d = Dfs {
                adj: &adj,
                disc: &mut disc,
                low: &mut low,
                bridge: &mut bridge,
                timer: &mut timer,
            };
            go(&mut d, start, usize::MAX);
        }
    }
    bridge.iter().map(|&b| !b).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ScaffoldKey(pub String);

impl std::fmt::Display for ScaffoldKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// The scaffold graph: iteratively delete non-ring atoms of degree <= 1
/// until none remain. Exocyclic terminals (including double-bonded ones
/// like carbonyl oxygens) are removed; ring systems and the acyclic
/// linkers between them survive.
pub fn murcko_scaffold_graph(m: &Molecule) -> Molecule {
    if !m.atoms.iter().any(|a| a.ring) {
        return Molecule {
            atoms: Vec::new(),
            bonds: Vec::new(),
        };
    }
    let n = m.atoms.len();
    let mut alive = vec![true; n];
    let mut deg = vec![0usize; n];
    for b in &m.bonds {
        deg[b.a] += 1;
        deg[b.b] += 1;
    }
    let mut queue: Vec<usize> = (0..n)
        .filter(|&i| !m.atoms[i].ring && deg[i] <= 1)
        .collect();
    while let Some(i) = queue.pop() {
        if !alive[i] || m.atoms[i].ring || deg[i] > 1 {
            continue;
        }
        alive[i] = false;
        for b in &m.bonds {
            let other = if b.a == i && alive[b.b] {
                b.b
            } else if b.b == i && alive[b.a] {
                b.a
            } else {
                continue;
            };
            deg[other] -= 1;
            if !m.atoms[other].ring && deg[other] <= 1 {
                queue.push(other);
            }
        }
    }
    let mut remap = vec![usize::MAX; n];
    let mut atoms = Vec::new();
    for i in 0..n {
        if alive[i] {
            remap[i] = atoms.len();
            atoms.push(m.atoms[i].clone());
        }
    }
    let bonds = m
        .bonds
        .iter()
        .filter(|b| alive[b.a] && alive[b.b])
        .map(|b| Bond {
            a: remap[b.a],
            b: remap[b.b],
            order: b.order,
            ring: b.ring,
        })
        .collect();
    Molecule { atoms, bonds }
}

pub fn murcko_scaffold(m: &Molecule) -> ScaffoldKey {
    let scaffold = murcko_scaffold_graph(m);
    if scaffold.atoms.is_empty() {
        return ScaffoldKey(EMPTY_SCAFFOLD.to_string());
    }
    let labels: Vec<String> = scaffold
        .atoms
        .iter()
        .map(|a| {
            if a.aromatic {
                a.element.to_ascii_lowercase()
            } else {
                a.element.to_string()
            }
        })
        .collect();
    let mut adj: Vec<Vec<(usize, u8)>> = vec![Vec::new(); scaffold.atoms.len()];
    for b in &scaffold.bonds {
        adj[b.a].push((b.b, b.order.label()));
        adj[b.b].push((b.a, b.order.label()));
    }
    ScaffoldKey(canonical_form(&labels, &adj))
}

pub fn scaffold_key(smiles: &str) -> Result<ScaffoldKey, ChemError> {
    Ok(murcko_scaffold(&parse_smiles(smiles)?))
}

/// Canonical string for a labeled graph, invariant under vertex reordering.
/// Neighborhood refinement (element, aromaticity, degree seeded) is iterated
/// to stability; remaining ties are broken by individualizing each member
/// of the first ambiguous color class and keeping the lexicographically
/// minimal serialization.
fn canonical_form(labels: &[String], adj: &[Vec<(usize, u8)>]) -> String {
    let n = labels.len();
    let init: Vec<usize> = {
        let sigs: Vec<(String, usize)> = (0..n).map(|i| (labels[i].clone(), adj[i].len())).collect();
        dense_rank(&sigs)
    };
    let mut best: Option<String> = None;
    search(&init, labels, adj, &mut best);
    best.expect("nonempty graph yields a serialization")
}

fn dense_rank<T: Ord + Clone>(sigs: &[T]) -> Vec<usize> {
    let mut sorted: Vec<T> = sigs.to_vec();
    sorted.sort();
    sorted.dedup();
    sigs.iter()
        .map(|s| sorted.binary_search(s).unwrap())
        .collect()
}

fn refine(colors: &[usize], adj: &[Vec<(usize, u8)>]) -> Vec<usize> {
    let mut colors = colors.to_vec();
    loop {
        let sigs: Vec<(usize, Vec<(u8, usize)>)> = colors
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let mut nb: Vec<(u8, usize)> =
                    adj[i].iter().map(|&(j, o)| (o, colors[j])).collect();
                nb.sort_unstable();
                (c, nb)
            })
            .collect();
        let next = dense_rank(&sigs);
        let classes_before = colors.iter().collect::<std::collections::HashSet<_>>().len();
        let classes_after = next.iter().collect::<std::collections::HashSet<_>>().len();
        if classes_after == classes_before {
            return next;
        }
        colors = next;
    }
}

fn search(colors: &[usize], labels: &[String], adj: &[Vec<(usize, u8)>], best: &mut Option<String>) {
    let colors = refine(colors, adj);
    let n = colors.len();
    let mut by_color: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in colors.iter().enumerate() {
        by_color.entry(c).or_default().push(i);
    }
    if by_color.len() == n {
        let s = serialize(&colors, labels, adj);
        if best.as_ref().is_none_or(|b| s < *b) {
            *best = Some(s);
        }
        return;
    }
    let class = by_color
        .values()
        .find(|v| v.len() > 1)
        .expect("non-discrete partition has an ambiguous class");
    for &a in class {
        let mut c2: Vec<usize> = colors.iter().map(|&c| c * 2 + 1).collect();
        c2[a] = colors[a] * 2;
        search(&c2, labels, adj, best);
    }
}

fn serialize(colors: &[usize], labels: &[String], adj: &[Vec<(usize, u8)>]) -> String {
    let n = colors.len();
    let mut order = vec![0usize; n]; // canonical position -> atom
    for (i, &c) in colors.iter().enumerate() {
        order[c] = i;
    }
    let atom_part: Vec<&str> = order.iter().map(|&i| labels[i].as_str()).collect();
    let mut edges: Vec<(usize, usize, u8)> = Vec::new();
    for (i, nbrs) in adj.iter().enumerate() {
        for &(j, o) in nbrs {
            if i < j {
                let (a, b) = (colors[i].min(colors[j]), colors[i].max(colors[j]));
                edges.push((a, b, o));
            }
        }
    }
    edges.sort_unstable();
    let edge_part: Vec<String> = edges
        .iter()
        .map(|&(a, b, o)| format!("{a}{}{b}", o as char))
        .collect();
    format!("{}|{}", atom_part.join(","), edge_part.join(";"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcludedDrug {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
    pub achieved_train_fraction: f64,
    pub excluded: Vec<ExcludedDrug>,
}

impl SplitAssignment {
    pub fn is_train(&self, id: &str) -> bool {
        self.train.binary_search_by(|x| x.as_str().cmp(id)).is_ok()
    }

    pub fn is_test(&self, id: &str) -> bool {
        self.test.binary_search_by(|x| x.as_str().cmp(id)).is_ok()
    }
}

/// Group drugs by scaffold key, shuffle group order with the seeded PRNG,
/// and fill train with whole groups until the target fraction is reached.
/// Unparseable SMILES are excluded and reported in the assignment.
pub fn scaffold_split(
    drugs: &[(String, String)],
    train_fraction: f64,
    seed: u64,
) -> Result<SplitAssignment, ChemError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(ChemError::DegenerateFraction {
            fraction: train_fraction,
        });
    }
    let mut excluded = Vec::new();
    let mut groups: IndexMap<ScaffoldKey, Vec<&str>> = IndexMap::new();
    for (id, smiles) in drugs {
        match scaffold_key(smiles) {
            Ok(key) => groups.entry(key).or_default().push(id),
            Err(e) => excluded.push(ExcludedDrug {
                id: id.clone(),
                reason: e.to_string(),
            }),
        }
    }
    let total: usize = groups.values().map(|v| v.len()).sum();
    if total == 0 {
        return Err(ChemError::NoEligibleDrugs);
    }
    if groups.len() == 1 {
        return Err(ChemError::AllOneScaffold { n: total });
    }

    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.shuffle(&mut crate::rng::stream(seed, "scaffold-split", &[]));

    let target = train_fraction * total as f64;
    let mut train: Vec<String> = Vec::new();
    let mut test: Vec<String> = Vec::new();
    let mut last_train_group: Option<usize> = None;
    for gi in order {
        let members = &groups[gi];
        if (train.len() as f64) < target {
            train.extend(members.iter().map(|s| s.to_string()));
            last_train_group = Some(gi);
        } else {
            test.extend(members.iter().map(|s| s.to_string()));
        }
    }
    // Greedy fill can swallow every group when the tail group is large;
    // hand the last train group back so both sides stay populated.
    if test.is_empty() {
        let gi = last_train_group.expect("train nonempty when test is empty");
        let members: Vec<String> = groups[gi].iter().map(|s| s.to_string()).collect();
        train.retain(|id| !members.contains(id));
        test = members;
    }
    train.sort();
    test.sort();
    let achieved = train.len() as f64 / total as f64;
    Ok(SplitAssignment {
        train,
        test,
        seed,
        achieved_train_fraction: achieved,
        excluded,
    })
}

/// Seeded uniform shuffle of drug ids with a prefix assigned to train.
/// Scaffold disjointness is deliberately NOT guaranteed here.
pub fn random_split(
    ids: &[String],
    train_fraction: f64,
    seed: u64,
) -> Result<SplitAssignment, ChemError> {
    let n = ids.len();
    let n_train = (train_fraction * n as f64).floor() as usize;
    if n == 0 || n_train == 0 || n_train >= n {
        return Err(ChemError::DegenerateFraction {
            fraction: train_fraction,
        });
    }
    let mut shuffled: Vec<String> = ids.to_vec();
    shuffled.shuffle(&mut crate::rng::stream(seed, "random-split", &[]));
    let mut train: Vec<String> = shuffled[..n_train].to_vec();
    let mut test: Vec<String> = shuffled[n_train..].to_vec();
    train.sort();
    test.sort();
    Ok(SplitAssignment {
        train,
        test,
        seed,
        achieved_train_fraction: n_train as f64 / n as f64,
        excluded: Vec::new(),
    })
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
pub struct ScaffoldAuditRow {
    pub train_count: usize,
    pub test_count: usize,
}

/// Recompute scaffold keys for both sides from scratch and tabulate
/// per-key membership. A key with both counts positive is leakage.
pub fn leakage_audit(
    drugs: &[(String, String)],
    assignment: &SplitAssignment,
) -> Result<BTreeMap<String, ScaffoldAuditRow>, ChemError> {
    let mut audit: BTreeMap<String, ScaffoldAuditRow> = BTreeMap::new();
    for (id, smiles) in drugs {
        let in_train = assignment.is_train(id);
        let in_test = assignment.is_test(id);
        if !in_train && !in_test {
            continue;
        }
        let key = scaffold_key(smiles)?;
        let row = audit.entry(key.0).or_default();
        if in_train {
            row.train_count += 1;
        } else {
            row.test_count += 1;
        }
    }
    Ok(audit)
}

pub fn leaked_keys(audit: &BTreeMap<String, ScaffoldAuditRow>) -> Vec<String> {
    audit
        .iter()
        .filter(|(_, r)| r.train_count > 0 && r.test_count > 0)
        .map(|(k, _)| k.clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(s: &str) -> ScaffoldKey {
        scaffold_key(s).unwrap()
    }

    #[test]
    fn ethanol_parses() {
        let m = parse_smiles("CCO").unwrap();
        assert_eq!(m.atoms.len(), 3);
        assert_eq!(m.bonds.len(), 2);
        assert!(m.bonds.iter().all(|b| b.order == BondOrder::Single));
        assert!(m.atoms.iter().all(|a| !a.ring));
    }

    #[test]
    fn benzene_is_one_aromatic_ring() {
        let m = parse_smiles("c1ccccc1").unwrap();
        assert_eq!(m.atoms.len(), 6);
        assert_eq!(m.bonds.len(), 6);
        assert!(m.atoms.iter().all(|a| a.aromatic && a.ring));
        assert!(m.bonds.iter().all(|b| b.order == BondOrder::Aromatic && b.ring));
    }

    #[test]
    fn unclosed_ring_reports_opening_offset() {
        assert_eq!(
            parse_smiles("C1CC"),
            Err(ChemError::UnclosedRing { offset: 1 })
        );
    }

    #[test]
    fn unbalanced_parenthesis_reports_offset() {
        assert_eq!(
            parse_smiles("CC(C"),
            Err(ChemError::UnbalancedParenthesis { offset: 2 })
        );
        assert_eq!(
            parse_smiles("CC)C"),
            Err(ChemError::UnbalancedParenthesis { offset: 2 })
        );
    }

    #[test]
    fn unknown_symbol_and_empty_input() {
        assert_eq!(parse_smiles(""), Err(ChemError::EmptyInput));
        assert_eq!(
            parse_smiles("CXO"),
            Err(ChemError::UnknownAtomSymbol { offset: 1 })
        );
    }

    #[test]
    fn bracket_atoms_carry_charge_and_h() {
        let m = parse_smiles("C[N+](C)(C)C").unwrap();
        assert_eq!(m.atoms[1].element, "N");
        assert_eq!(m.atoms[1].charge, 1);
        let m = parse_smiles("[O-]C").unwrap();
        assert_eq!(m.atoms[0].charge, -1);
        let m = parse_smiles("c1cc[nH]c1").unwrap();
        assert_eq!(m.atoms[3].h_count, Some(1));
        assert!(m.atoms[3].aromatic);
    }

    #[test]
    fn stereo_markers_are_discarded() {
        let m = parse_smiles("F/C=C/F").unwrap();
        assert_eq!(m.atoms.len(), 4);
        assert_eq!(m.bonds.len(), 3);
        let m = parse_smiles("N[C@@H](C)O").unwrap();
        assert_eq!(m.atoms.len(), 4);
    }

    #[test]
    fn interring_implicit_bond_is_single() {
        // biphenyl written without the explicit dash: the bond joining the
        // two rings is not itself in a ring, so it resolves to single
        let m = parse_smiles("c1ccc(c2ccccc2)cc1").unwrap();
        let single: Vec<&Bond> = m.bonds.iter().filter(|b| b.order == BondOrder::Single).collect();
        assert_eq!(single.len(), 1);
        assert!(!single[0].ring);
    }

    #[test]
    fn acyclic_scaffold_is_empty() {
        assert_eq!(key("CCO").0, EMPTY_SCAFFOLD);
        assert_eq!(key("CC(C)C(=O)O").0, EMPTY_SCAFFOLD);
    }

    #[test]
    fn substituents_prune_to_the_bare_ring() {
        assert_eq!(key("CCc1ccccc1"), key("c1ccccc1"));
        assert_eq!(key("Cc1ccccc1"), key("c1ccccc1"));
        assert_eq!(key("CCOC(=O)c1ccccc1"), key("c1ccccc1"));
    }

    #[test]
    fn exocyclic_carbonyl_is_removed() {
        assert_eq!(key("O=C1CCCCC1"), key("C1CCCCC1"));
    }

    #[test]
    fn bibenzyl_keeps_its_linker() {
        let bibenzyl = key("c1ccc(CCc2ccccc2)cc1");
        assert_ne!(bibenzyl, key("c1ccccc1"));
        let g = murcko_scaffold_graph(&parse_smiles("c1ccc(CCc2ccccc2)cc1").unwrap());
        assert_eq!(g.atoms.len(), 14); // two rings plus the 2-carbon linker
    }

    #[test]
    fn pruning_is_idempotent() {
        for s in ["c1ccc(CCc2ccccc2)cc1", "CCc1ccccc1", "O=C1CCCCC1"] {
            let g1 = murcko_scaffold_graph(&parse_smiles(s).unwrap());
            let g2 = murcko_scaffold_graph(&g1);
            assert_eq!(g1.atoms.len(), g2.atoms.len());
            assert_eq!(g1.bonds.len(), g2.bonds.len());
        }
    }

    #[test]
    fn key_survives_atom_reordering() {
        assert_eq!(key("c1ccncc1"), key("n1ccccc1"));
        assert_eq!(key("C1CCNCC1"), key("N1CCCCC1"));
        assert_eq!(key("c1ccc2ccccc2c1"), key("c1ccc2c(c1)cccc2"));
    }

    #[test]
    fn near_isomorphs_get_distinct_keys() {
        // same formula, different topology or labeling
        assert_ne!(key("c1cncnc1"), key("c1cnccn1")); // pyrimidine vs pyrazine
        assert_ne!(
            key("c1ccc2cc3ccccc3cc2c1"), // anthracene
            key("c1ccc2c(c1)ccc1ccccc12") // phenanthrene
        );
        assert_ne!(key("c1ccccc1"), key("C1CCCCC1"));
        assert_ne!(key("C1=CC=CC=C1"), key("c1ccccc1")); // kekule not unified
    }

    #[test]
    fn ten_singleton_scaffolds_split_eight_two() {
        let drugs: Vec<(String, String)> = (3..13)
            .map(|n| {
                let ring = format!("C1{}1", "C".repeat(n - 1));
                (format!("d{n}"), ring)
            })
            .collect();
        let a = scaffold_split(&drugs, 0.8, 7).unwrap();
        assert_eq!(a.train.len(), 8);
        assert_eq!(a.test.len(), 2);
        assert!((a.achieved_train_fraction - 0.8).abs() < 1e-12);
    }

    #[test]
    fn single_scaffold_cannot_split() {
        let drugs: Vec<(String, String)> = (0..10)
            .map(|i| (format!("d{i}"), "c1ccccc1".to_string()))
            .collect();
        assert_eq!(
            scaffold_split(&drugs, 0.8, 7),
            Err(ChemError::AllOneScaffold { n: 10 })
        );
    }

    #[test]
    fn split_is_deterministic_and_seed_sensitive() {
        let drugs: Vec<(String, String)> = (3..13)
            .map(|n| (format!("d{n}"), format!("C1{}1", "C".repeat(n - 1))))
            .collect();
        let a = scaffold_split(&drugs, 0.8, 42).unwrap();
        let b = scaffold_split(&drugs, 0.8, 42).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        let differs = (0..20).any(|s| scaffold_split(&drugs, 0.8, s).unwrap().train != a.train);
        assert!(differs);
    }

    #[test]
    fn unparseable_drugs_are_excluded_and_reported() {
        let drugs = vec![
            ("d0".to_string(), "c1ccccc1".to_string()),
            ("d1".to_string(), "C1CC".to_string()),
            ("d2".to_string(), "C1CCCCC1".to_string()),
            ("d3".to_string(), "C1CCCC1".to_string()),
        ];
        let a = scaffold_split(&drugs, 0.5, 1).unwrap();
        assert_eq!(a.excluded.len(), 1);
        assert_eq!(a.excluded[0].id, "d1");
        assert_eq!(a.train.len() + a.test.len(), 3);
    }

    #[test]
    fn random_split_sizes_and_determinism() {
        let ids: Vec<String> = (0..10).map(|i| format!("d{i}")).collect();
        let a = random_split(&ids, 0.8, 5).unwrap();
        assert_eq!(a.train.len(), 8);
        assert_eq!(a.test.len(), 2);
        let b = random_split(&ids, 0.8, 5).unwrap();
        assert_eq!(a.train, b.train);
        let differs = (0..20).any(|s| random_split(&ids, 0.8, s).unwrap().train != a.train);
        assert!(differs);
        assert!(matches!(
            random_split(&ids[..1], 0.5, 1),
            Err(ChemError::DegenerateFraction { .. })
        ));
    }

    #[test]
    fn audit_finds_no_leakage_after_scaffold_split() {
        let mut drugs: Vec<(String, String)> = Vec::new();
        for (i, core) in ["c1ccccc1", "C1CCCCC1", "c1ccncc1", "C1CCNCC1", "c1ccoc1"]
            .iter()
            .enumerate()
        {
            for j in 0..3 {
                // same scaffold, different substituent length
                drugs.push((format!("d{i}_{j}"), format!("{}{core}", "C".repeat(j + 1))));
            }
        }
        let a = scaffold_split(&drugs, 0.8, 11).unwrap();
        let audit = leakage_audit(&drugs, &a).unwrap();
        assert!(leaked_keys(&audit).is_empty());
        let total: usize = audit.values().map(|r| r.train_count + r.test_count).sum();
        assert_eq!(total, drugs.len());
    }
}
