//! SMILES parsing into heavy-atom molecular graphs and fixed-layout atom
//! featurization.
//!
//! Supported: organic-subset and bracket atoms over B, C, N, O, P, S, F, Cl,
//! Br, I and H; aromatic lowercase atoms; bonds `-`, `=`, `#`, `:`; branches;
//! ring closures `0-9` and `%nn`; bracket charges and hydrogen counts.
//! Stereo markers (`/`, `\`, `@`) are accepted and dropped. Hydrogens stay
//! implicit except for bracket counts, which are recorded on the atom.

use std::collections::HashMap;
use std::fmt;

use log::warn;
use thiserror::Error;

use crate::tensor::{Matrix, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Element {
    B,
    C,
    N,
    O,
    P,
    S,
    F,
    Cl,
    Br,
    I,
    H,
}

impl Element {
    pub const ALL: [Element; 11] = [
        Element::B,
        Element::C,
        Element::N,
        Element::O,
        Element::P,
        Element::S,
        Element::F,
        Element::Cl,
        Element::Br,
        Element::I,
        Element::H,
    ];

    pub fn symbol(self) -> &'static str {
        match self {
            Element::B => "B",
            Element::C => "C",
            Element::N => "N",
            Element::O => "O",
            Element::P => "P",
            Element::S => "S",
            Element::F => "F",
            Element::Cl => "Cl",
            Element::Br => "Br",
            Element::I => "I",
            Element::H => "H",
        }
    }

    fn from_symbol(symbol: &str) -> Option<Element> {
        Element::ALL.into_iter().find(|e| e.symbol() == symbol)
    }

    fn index(self) -> usize {
        Element::ALL.iter().position(|&e| e == self).unwrap()
    }
}

impl fmt::Display for Element {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BondKind {
    Single,
    Double,
    Triple,
    Aromatic,
}

impl BondKind {
    const ALL: [BondKind; 4] = [BondKind::Single, BondKind::Double, BondKind::Triple, BondKind::Aromatic];
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AtomRecord {
    pub element: Element,
    pub formal_charge: i8,
    pub aromatic: bool,
    pub ring_member: bool,
    pub explicit_h: u8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Bond {
    pub a: usize,
    pub b: usize,
    pub kind: BondKind,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MolecularGraph {
    pub atoms: Vec<AtomRecord>,
    pub bonds: Vec<Bond>,
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum SmilesErrorKind {
    #[error("empty SMILES string")]
    Empty,
    #[error("non-ASCII input")]
    NonAscii,
    #[error("unsupported element `{0}`")]
    UnsupportedElement(String),
    #[error("multi-fragment SMILES ('.') is not supported")]
    MultiFragment,
    #[error("unexpected character `{0}`")]
    UnexpectedChar(char),
    #[error("unbalanced parentheses")]
    UnbalancedParens,
    #[error("ring bond {0} is never closed")]
    UnclosedRing(u32),
    #[error("conflicting bond symbols on ring closure {0}")]
    RingBondConflict(u32),
    #[error("bond symbol without a following atom")]
    DanglingBond,
    #[error("unterminated bracket atom")]
    UnclosedBracket,
    #[error("formal charge {0} outside [-4, 4]")]
    ChargeOutOfRange(i32),
    #[error("duplicate bond between atoms {0} and {1}")]
    DuplicateBond(usize, usize),
    #[error("atom bonded to itself")]
    SelfBond,
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
#[error("SMILES error at byte {offset}: {kind}")]
pub struct SmilesError {
    pub offset: usize,
    pub kind: SmilesErrorKind,
}

impl SmilesError {
    /// Valid SMILES using features outside the supported subset.
    pub fn is_unsupported(&self) -> bool {
        matches!(
            self.kind,
            SmilesErrorKind::UnsupportedElement(_) | SmilesErrorKind::MultiFragment
        )
    }
}

struct Parser<'a> {
    input: &'a [u8],
    pos: usize,
    atoms: Vec<AtomRecord>,
    bonds: Vec<Bond>,
    prev: Option<usize>,
    branches: Vec<(Option<usize>, usize)>,
    pending: Option<(Option<BondKind>, usize)>,
    rings: HashMap<u32, (usize, Option<BondKind>, usize)>,
    stereo_seen: bool,
}

impl<'a> Parser<'a> {
    fn err<T>(&self, offset: usize, kind: SmilesErrorKind) -> Result<T, SmilesError> {
        Err(SmilesError { offset, kind })
    }

    fn peek(&self) -> Option<u8> {
        self.input.get(self.pos).copied()
    }

    fn parse(mut self) -> Result<MolecularGraph, SmilesError> {
        while let Some(c) = self.peek() {
            let start = self.pos;
            match c {
                b'(' => {
                    if self.prev.is_none() {
                        return self.err(start, SmilesErrorKind::UnexpectedChar('('));
                    }
                    if self.pending.is_some() {
                        return self.err(start, SmilesErrorKind::DanglingBond);
                    }
                    self.branches.push((self.prev, start));
                    self.pos += 1;
                }
                b')' => {
                    if self.pending.is_some() {
                        return self.err(start, SmilesErrorKind::DanglingBond);
                    }
                    let Some((prev, _)) = self.branches.pop() else {
                        return self.err(start, SmilesErrorKind::UnbalancedParens);
                    };
                    self.prev = prev;
                    self.pos += 1;
                }
                b'-' | b'=' | b'#' | b':' | b'/' | b'\\' => {
                    if self.pending.is_some() || self.prev.is_none() {
                        return self.err(start, SmilesErrorKind::UnexpectedChar(c as char));
                    }
                    let kind = match c {
                        b'=' => Some(BondKind::Double),
                        b'#' => Some(BondKind::Triple),
                        b':' => Some(BondKind::Aromatic),
                        b'-' => Some(BondKind::Single),
                        _ => {
                            self.stereo_seen = true;
                            Some(BondKind::Single)
                        }
                    };
                    self.pending = Some((kind, start));
                    self.pos += 1;
                }
                b'.' => return self.err(start, SmilesErrorKind::MultiFragment),
                b'0'..=b'9' => {
                    self.pos += 1;
                    self.ring_closure((c - b'0') as u32, start)?;
                }
                b'%' => {
                    let digits = self.input.get(start + 1..start + 3);
                    match digits {
                        Some(d) if d.iter().all(u8::is_ascii_digit) => {
                            let n = ((d[0] - b'0') * 10 + (d[1] - b'0')) as u32;
                            self.pos += 3;
                            self.ring_closure(n, start)?;
                        }
                        _ => return self.err(start, SmilesErrorKind::UnexpectedChar('%')),
                    }
                }
                b'[' => {
                    let atom = self.bracket_atom()?;
                    self.add_atom(atom, start)?;
                }
                _ => {
                    let atom = self.organic_atom()?;
                    self.add_atom(atom, start)?;
                }
            }
        }
        if let Some(&(_, offset)) = self.branches.last() {
            return self.err(offset, SmilesErrorKind::UnbalancedParens);
        }
        if let Some((_, offset)) = self.pending {
            return self.err(offset, SmilesErrorKind::DanglingBond);
        }
        if let Some((&n, &(_, _, offset))) = self.rings.iter().min_by_key(|(_, v)| v.2) {
            return self.err(offset, SmilesErrorKind::UnclosedRing(n));
        }
        if self.stereo_seen {
            warn!("stereochemistry markers ignored");
        }

        let mut graph = MolecularGraph {
            atoms: self.atoms,
            bonds: self.bonds,
        };
        assign_rings(&mut graph);
        Ok(graph)
    }

    fn ring_closure(&mut self, n: u32, offset: usize) -> Result<(), SmilesError> {
        let Some(current) = self.prev else {
            return self.err(offset, SmilesErrorKind::UnexpectedChar(self.input[offset] as char));
        };
        let bond = self.pending.take().and_then(|(k, _)| k);
        match self.rings.remove(&n) {
            None => {
                self.rings.insert(n, (current, bond, offset));
            }
            Some((other, open_bond, _)) => {
                let kind = match (open_bond, bond) {
                    (Some(a), Some(b)) if a != b => return self.err(offset, SmilesErrorKind::RingBondConflict(n)),
                    (Some(k), _) | (None, Some(k)) => k,
                    (None, None) => self.implicit_bond(other, current),
                };
                self.add_bond(other, current, kind, offset)?;
            }
        }
        Ok(())
    }

    fn implicit_bond(&self, a: usize, b: usize) -> BondKind {
        if self.atoms[a].aromatic && self.atoms[b].aromatic {
            BondKind::Aromatic
        } else {
            BondKind::Single
        }
    }

    fn add_bond(&mut self, a: usize, b: usize, kind: BondKind, offset: usize) -> Result<(), SmilesError> {
        if a == b {
            return self.err(offset, SmilesErrorKind::SelfBond);
        }
        if self
            .bonds
            .iter()
            .any(|x| (x.a == a && x.b == b) || (x.a == b && x.b == a))
        {
            return self.err(offset, SmilesErrorKind::DuplicateBond(a.min(b), a.max(b)));
        }
        self.bonds.push(Bond { a, b, kind });
        Ok(())
    }

    fn add_atom(&mut self, atom: AtomRecord, offset: usize) -> Result<(), SmilesError> {
        self.atoms.push(atom);
        let idx = self.atoms.len() - 1;
        if let Some(prev) = self.prev {
            let explicit = self.pending.take().and_then(|(k, _)| k);
            let kind = explicit.unwrap_or_else(|| self.implicit_bond(prev, idx));
            self.add_bond(prev, idx, kind, offset)?;
        }
        self.prev = Some(idx);
        Ok(())
    }

    fn element_symbol(&mut self, allow_aromatic: &[u8]) -> Result<(Element, bool), SmilesError> {
        let start = self.pos;
        let Some(c) = self.peek() else {
            return self.err(start, SmilesErrorKind::UnclosedBracket);
        };
        if allow_aromatic.contains(&c) {
            self.pos += 1;
            let upper = (c as char).to_ascii_uppercase().to_string();
            return Ok((Element::from_symbol(&upper).unwrap(), true));
        }
        if !c.is_ascii_uppercase() {
            if c.is_ascii_lowercase() || c == b'*' {
                let mut sym = (c as char).to_string();
                if let Some(n) = self.input.get(start + 1).filter(|n| n.is_ascii_lowercase()) {
                    sym.push(*n as char);
                }
                return self.err(start, SmilesErrorKind::UnsupportedElement(sym));
            }
            return self.err(start, SmilesErrorKind::UnexpectedChar(c as char));
        }
        // Two-letter symbols first.
        if let Some(&n) = self.input.get(start + 1) {
            if n.is_ascii_lowercase() {
                let two = format!("{}{}", c as char, n as char);
                if let Some(e) = Element::from_symbol(&two) {
                    self.pos += 2;
                    return Ok((e, false));
                }
                let single = (c as char).to_string();
                let one = Element::from_symbol(&single);
                // `Cn`-style ambiguity only matters inside brackets or for
                // genuine two-letter elements the organic subset lacks.
                if one.is_none() || !allow_aromatic.contains(&n) {
                    return self.err(start, SmilesErrorKind::UnsupportedElement(two));
                }
            }
        }
        let single = (c as char).to_string();
        match Element::from_symbol(&single) {
            Some(e) => {
                self.pos += 1;
                Ok((e, false))
            }
            None => self.err(start, SmilesErrorKind::UnsupportedElement(single)),
        }
    }

    fn organic_atom(&mut self) -> Result<AtomRecord, SmilesError> {
        let start = self.pos;
        let (element, aromatic) = self.element_symbol(b"bcnops")?;
        if element == Element::H {
            // Bare H is only legal inside brackets.
            return self.err(start, SmilesErrorKind::UnexpectedChar('H'));
        }
        Ok(AtomRecord {
            element,
            formal_charge: 0,
            aromatic,
            ring_member: false,
            explicit_h: 0,
        })
    }

    fn bracket_atom(&mut self) -> Result<AtomRecord, SmilesError> {
        let open = self.pos;
        self.pos += 1;
        while self.peek().is_some_and(|c| c.is_ascii_digit()) {
            self.pos += 1; // isotope, ignored
        }
        let (element, aromatic) = self.element_symbol(b"bcnops")?;
        while self.peek() == Some(b'@') {
            self.stereo_seen = true;
            self.pos += 1;
        }
        let mut explicit_h = 0u8;
        if self.peek() == Some(b'H') {
            self.pos += 1;
            explicit_h = 1;
            if let Some(d) = self.peek().filter(u8::is_ascii_digit) {
                explicit_h = d - b'0';
                self.pos += 1;
            }
        }
        let mut charge: i32 = 0;
        if let Some(sign @ (b'+' | b'-')) = self.peek() {
            let unit = if sign == b'+' { 1 } else { -1 };
            self.pos += 1;
            charge = unit;
            if let Some(d) = self.peek().filter(u8::is_ascii_digit) {
                charge = unit * (d - b'0') as i32;
                self.pos += 1;
            } else {
                while self.peek() == Some(sign) {
                    charge += unit;
                    self.pos += 1;
                }
            }
        }
        if !(-4..=4).contains(&charge) {
            return self.err(open, SmilesErrorKind::ChargeOutOfRange(charge));
        }
        if self.peek() == Some(b':') {
            self.pos += 1;
            while self.peek().is_some_and(|c| c.is_ascii_digit()) {
                self.pos += 1; // atom class, ignored
            }
        }
        match self.peek() {
            Some(b']') => self.pos += 1,
            Some(c) => return self.err(self.pos, SmilesErrorKind::UnexpectedChar(c as char)),
            None => return self.err(open, SmilesErrorKind::UnclosedBracket),
        }
        Ok(AtomRecord {
            element,
            formal_charge: charge as i8,
            aromatic,
            ring_member: false,
            explicit_h,
        })
    }
}

/// Marks ring bonds (non-bridges) and ring atoms; aromatic bonds outside
/// any ring become single bonds.
fn assign_rings(graph: &mut MolecularGraph) {
    let n = graph.atoms.len();
    let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    for (e, b) in graph.bonds.iter().enumerate() {
        adj[b.a].push((b.b, e));
        adj[b.b].push((b.a, e));
    }
    let mut is_bridge = vec![false; graph.bonds.len()];
    let mut disc = vec![usize::MAX; n];
    let mut low = vec![0usize; n];
    let mut timer = 0;
    for root in 0..n {
        if disc[root] != usize::MAX {
            continue;
        }
        // Iterative DFS: (node, parent edge, next neighbor position).
        let mut stack = vec![(root, usize::MAX, 0usize)];
        disc[root] = timer;
        low[root] = timer;
        timer += 1;
        while let Some(&mut (v, parent_edge, ref mut next)) = stack.last_mut() {
            if *next < adj[v].len() {
                let (w, e) = adj[v][*next];
                *next += 1;
                if e == parent_edge {
                    continue;
                }
                if disc[w] == usize::MAX {
                    disc[w] = timer;
                    low[w] = timer;
                    timer += 1;
                    stack.push((w, e, 0));
                } else {
                    low[v] = low[v].min(disc[w]);
                }
            } else {
                stack.pop();
                if let Some(&(u, _, _)) = stack.last() {
                    low[u] = low[u].min(low[v]);
                    if low[v] > disc[u] {
                        is_bridge[parent_edge] = true;
                    }
                }
            }
        }
    }
    for (bond, &bridge) in graph.bonds.iter_mut().zip(&is_bridge) {
        if bridge {
            if bond.kind == BondKind::Aromatic {
                bond.kind = BondKind::Single;
            }
        } else {
            graph.atoms[bond.a].ring_member = true;
            graph.atoms[bond.b].ring_member = true;
        }
    }
}

/// Parses a single-fragment SMILES string.
pub fn parse_smiles(smiles: &str) -> Result<MolecularGraph, SmilesError> {
    if smiles.is_empty() {
        return Err(SmilesError {
            offset: 0,
            kind: SmilesErrorKind::Empty,
        });
    }
    if let Some(offset) = smiles.bytes().position(|b| !b.is_ascii()) {
        return Err(SmilesError {
            offset,
            kind: SmilesErrorKind::NonAscii,
        });
    }
    Parser {
        input: smiles.as_bytes(),
        pos: 0,
        atoms: Vec::new(),
        bonds: Vec::new(),
        prev: None,
        branches: Vec::new(),
        pending: None,
        rings: HashMap::new(),
        stereo_seen: false,
    }
    .parse()
}

/// Width of an atom feature row.
pub const ATOM_FEATURES: usize = 42;

const DEGREE_OFFSET: usize = 11;
const CHARGE_OFFSET: usize = 18;
const AROMATIC_OFFSET: usize = 23;
const RING_OFFSET: usize = 24;
const HCOUNT_OFFSET: usize = 25;
const BOND_OFFSET: usize = 30;

impl MolecularGraph {
    pub fn num_atoms(&self) -> usize {
        self.atoms.len()
    }

    pub fn degree(&self, atom: usize) -> usize {
        self.bonds.iter().filter(|b| b.a == atom || b.b == atom).count()
    }

    /// Atom feature matrix, one 42-wide row per atom:
    ///
    /// | cols  | block                                               |
    /// |-------|-----------------------------------------------------|
    /// | 0-10  | element one-hot (B C N O P S F Cl Br I H)          |
    /// | 11-17 | heavy-atom degree one-hot, 0..=6 (clamped)          |
    /// | 18-22 | formal charge one-hot, -2..=2 (clamped)             |
    /// | 23    | aromatic flag                                       |
    /// | 24    | ring-membership flag                                |
    /// | 25-29 | explicit hydrogen count one-hot, 0..=4 (clamped)    |
    /// | 30-41 | per bond kind (single, double, triple, aromatic), a |
    /// |       | 3-way one-hot of the attached count: 0, 1, 2 or more|
    pub fn featurize(&self) -> Tensor {
        let mut m = Matrix::zeros((self.atoms.len(), ATOM_FEATURES));
        for (i, atom) in self.atoms.iter().enumerate() {
            let mut row = m.row_mut(i);
            row[atom.element.index()] = 1.0;
            row[DEGREE_OFFSET + self.degree(i).min(6)] = 1.0;
            row[CHARGE_OFFSET + (atom.formal_charge.clamp(-2, 2) + 2) as usize] = 1.0;
            row[AROMATIC_OFFSET] = atom.aromatic as u8 as f64;
            row[RING_OFFSET] = atom.ring_member as u8 as f64;
            row[HCOUNT_OFFSET + atom.explicit_h.min(4) as usize] = 1.0;
            for (k, kind) in BondKind::ALL.iter().enumerate() {
                let count = self
                    .bonds
                    .iter()
                    .filter(|b| b.kind == *kind && (b.a == i || b.b == i))
                    .count();
                row[BOND_OFFSET + 3 * k + count.min(2)] = 1.0;
            }
        }
        Tensor::constant(m)
    }

    /// Symmetric 0/1 adjacency with zero diagonal.
    pub fn adjacency(&self) -> Tensor {
        let n = self.atoms.len();
        let mut m = Matrix::zeros((n, n));
        for b in &self.bonds {
            m[[b.a, b.b]] = 1.0;
            m[[b.b, b.a]] = 1.0;
        }
        Tensor::constant(m)
    }

    /// Same molecule with atoms relabeled so that old atom `i` becomes
    /// `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> MolecularGraph {
        let mut atoms = self.atoms.clone();
        for (old, atom) in self.atoms.iter().enumerate() {
            atoms[perm[old]] = atom.clone();
        }
        let bonds = self
            .bonds
            .iter()
            .map(|b| Bond {
                a: perm[b.a],
                b: perm[b.b],
                kind: b.kind,
            })
            .collect();
        MolecularGraph { atoms, bonds }
    }
}
