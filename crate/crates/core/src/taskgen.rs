//! Planning-task generators (star graph, binary tree, Countdown, 3-SAT),
//! brute-force oracles, and the single-line text formats used for datasets.
//!
//! Line grammar, shared by all four tasks:
//!
//! ```text
//! graph:     u,v | u,v | ... / a,b = p1,p2,...,pk
//! countdown: n1 | n2 | ... / target = <infix expression>
//! sat:       l,l,l | l,l,l | ... / var_count = b1,b2,...
//! ```
//!
//! Graph prompts carry two nodes whose order is selected by [`PromptOrder`].
//! Countdown expressions are written in fully parenthesized infix (nested
//! binary nodes are wrapped, the root is not); this linearization is a local
//! convention, not a canonical one. SAT literals are signed 1-based variable
//! indices and the witness is written as `0`/`1` bits.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type NodeId = u32;

/// Separator between list items (edges, operands, clauses).
pub const ITEM_SEP: &str = " | ";
/// Separator between the item list and the prompt.
pub const PROMPT_SEP: &str = " / ";
/// Separator between the prompt and the answer.
pub const ANSWER_SEP: &str = " = ";

/// Largest value any Countdown operand, target, or intermediate may take
/// (exclusive).
pub const COUNTDOWN_LIMIT: u32 = 100;

pub const SAT_VARS: usize = 7;
pub const SAT_CLAUSES: usize = 45;

/// Attempts per Countdown instance before giving up.
const COUNTDOWN_BUDGET: usize = 10_000;

pub(crate) fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Order of the two prompt nodes in a serialized graph line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PromptOrder {
    /// `end, start`: the end node precedes the start node, which is the layout
    /// the disentangled model consumes.
    #[default]
    EndStart,
    /// `start, end`: the layout of the plain-text path-finding datasets.
    StartEnd,
}

impl PromptOrder {
    fn arrange(self, start: NodeId, end: NodeId) -> (NodeId, NodeId) {
        match self {
            PromptOrder::EndStart => (end, start),
            PromptOrder::StartEnd => (start, end),
        }
    }

    fn unpack(self, a: NodeId, b: NodeId) -> (NodeId, NodeId) {
        // returns (start, end)
        match self {
            PromptOrder::EndStart => (b, a),
            PromptOrder::StartEnd => (a, b),
        }
    }
}

impl FromStr for PromptOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "end-start" | "theory" => Ok(PromptOrder::EndStart),
            "start-end" | "text" => Ok(PromptOrder::StartEnd),
            other => Err(Error::InvalidArgument(format!("unknown prompt order {other:?}"))),
        }
    }
}

// ---------------------------------------------------------------------------
// Graph tasks
// ---------------------------------------------------------------------------

/// A star graph: `path_count` vertex-disjoint paths of `path_len` nodes
/// (start included) leaving a shared start node.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StarInstance {
    pub node_count: usize,
    pub edges: Vec<(NodeId, NodeId)>,
    pub start: NodeId,
    pub end: NodeId,
    pub path: Vec<NodeId>,
    pub path_count: usize,
    pub path_len: usize,
}

/// A complete binary tree rooted at `start`, with `end` a leaf.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TreeInstance {
    pub node_count: usize,
    pub depth: usize,
    pub edges: Vec<(NodeId, NodeId)>,
    pub start: NodeId,
    pub end: NodeId,
    pub path: Vec<NodeId>,
}

pub fn gen_star(path_count: usize, path_len: usize, node_count: usize, seed: u64) -> Result<StarInstance> {
    if path_count == 0 || path_len < 2 {
        return Err(Error::Capacity(format!(
            "a star needs at least one path of two nodes, got {path_count} paths of {path_len}"
        )));
    }
    let needed = path_count * (path_len - 1) + 1;
    if needed > node_count {
        return Err(Error::Capacity(format!(
            "{path_count} paths of {path_len} nodes need {needed} labels, only {node_count} available"
        )));
    }
    if node_count > NodeId::MAX as usize {
        return Err(Error::Capacity(format!("{node_count} labels exceed the id range")));
    }

    let mut rng = rng_for(seed);
    let labels: Vec<NodeId> = rand::seq::index::sample(&mut rng, node_count, needed)
        .into_iter()
        .map(|i| i as NodeId + 1)
        .collect();
    let start = labels[0];
    let mut edges = Vec::with_capacity(needed - 1);
    let mut path = vec![start];
    for (p, chunk) in labels[1..].chunks(path_len - 1).enumerate() {
        let mut prev = start;
        for &node in chunk {
            edges.push((prev, node));
            if p == 0 {
                path.push(node);
            }
            prev = node;
        }
    }
    edges.shuffle(&mut rng);
    let end = *path.last().expect("path has at least two nodes");

    Ok(StarInstance {
        node_count,
        edges,
        start,
        end,
        path,
        path_count,
        path_len,
    })
}

/// Complete binary tree with `2^depth - 1` nodes labelled `1..=2^depth - 1`
/// in random order; the end node is a uniformly chosen leaf.
pub fn gen_binary_tree(depth: usize, seed: u64) -> Result<TreeInstance> {
    if depth == 0 {
        return Err(Error::Capacity("tree depth must be at least 1".into()));
    }
    if depth > 24 {
        return Err(Error::Capacity(format!("tree depth {depth} is too large")));
    }
    let n = (1usize << depth) - 1;
    let mut rng = rng_for(seed);
    let mut labels: Vec<NodeId> = (1..=n as NodeId).collect();
    labels.shuffle(&mut rng);

    // heap layout: children of slot i are 2i+1 and 2i+2
    let mut edges = Vec::with_capacity(n.saturating_sub(1));
    for child in 1..n {
        edges.push((labels[(child - 1) / 2], labels[child]));
    }
    let first_leaf = (1usize << (depth - 1)) - 1;
    let leaf = rng.gen_range(first_leaf..n);
    let mut slots = vec![leaf];
    while let Some(&s) = slots.last() {
        if s == 0 {
            break;
        }
        slots.push((s - 1) / 2);
    }
    let path: Vec<NodeId> = slots.iter().rev().map(|&s| labels[s]).collect();
    edges.shuffle(&mut rng);

    Ok(TreeInstance {
        node_count: n,
        depth,
        edges,
        start: labels[0],
        end: labels[leaf],
        path,
    })
}

/// Follows the unique directed walk from `start` to `end`, returning it if
/// exactly one exists.
pub fn walk_path(edges: &[(NodeId, NodeId)], start: NodeId, end: NodeId) -> Option<Vec<NodeId>> {
    let mut children: HashMap<NodeId, Vec<NodeId>> = HashMap::new();
    for &(u, v) in edges {
        children.entry(u).or_default().push(v);
    }
    let mut found: Vec<Vec<NodeId>> = Vec::new();
    let mut stack = vec![vec![start]];
    let limit = edges.len() + 1;
    while let Some(walk) = stack.pop() {
        let last = *walk.last().unwrap();
        if last == end {
            found.push(walk);
            if found.len() > 1 {
                return None;
            }
            continue;
        }
        if walk.len() > limit {
            continue;
        }
        for &next in children.get(&last).map(Vec::as_slice).unwrap_or(&[]) {
            if !walk.contains(&next) {
                let mut w = walk.clone();
                w.push(next);
                stack.push(w);
            }
        }
    }
    if found.len() == 1 {
        found.pop()
    } else {
        None
    }
}

fn degrees(edges: &[(NodeId, NodeId)]) -> (HashMap<NodeId, usize>, HashMap<NodeId, usize>) {
    let mut out_deg = HashMap::new();
    let mut in_deg = HashMap::new();
    for &(u, v) in edges {
        *out_deg.entry(u).or_insert(0) += 1;
        *in_deg.entry(v).or_insert(0) += 1;
    }
    (out_deg, in_deg)
}

fn node_set(edges: &[(NodeId, NodeId)], extra: &[NodeId]) -> HashSet<NodeId> {
    edges.iter().flat_map(|&(u, v)| [u, v]).chain(extra.iter().copied()).collect()
}

fn check_label_range(nodes: &HashSet<NodeId>, node_count: usize) -> Result<()> {
    if let Some(bad) = nodes.iter().find(|&&n| n == 0 || n as usize > node_count) {
        return Err(Error::Validation(format!(
            "node {bad} outside the label range 1..={node_count}"
        )));
    }
    Ok(())
}

impl StarInstance {
    /// Checks every structural invariant, including that `path` is the unique
    /// walk from start to end.
    pub fn validate(&self) -> Result<()> {
        let nodes = node_set(&self.edges, &[self.start, self.end]);
        check_label_range(&nodes, self.node_count)?;
        if self.path_count == 0 || self.path_len < 2 {
            return Err(Error::Validation("empty star".into()));
        }
        if self.edges.len() != self.path_count * (self.path_len - 1) {
            return Err(Error::Validation(format!(
                "{} edges do not form {} paths of {} nodes",
                self.edges.len(),
                self.path_count,
                self.path_len
            )));
        }
        if nodes.len() != self.edges.len() + 1 {
            return Err(Error::Validation("node labels are not pairwise distinct".into()));
        }
        let (out_deg, in_deg) = degrees(&self.edges);
        if out_deg.get(&self.start).copied().unwrap_or(0) != self.path_count {
            return Err(Error::Validation(format!(
                "start node {} does not have {} outgoing paths",
                self.start, self.path_count
            )));
        }
        if in_deg.contains_key(&self.start) {
            return Err(Error::Validation("start node has an incoming edge".into()));
        }
        for &n in &nodes {
            if n == self.start {
                continue;
            }
            if in_deg.get(&n).copied().unwrap_or(0) != 1 || out_deg.get(&n).copied().unwrap_or(0) > 1 {
                return Err(Error::Validation(format!("node {n} breaks the star shape")));
            }
        }
        // every arm must have exactly path_len nodes
        for &(u, first) in self.edges.iter().filter(|(u, _)| *u == self.start) {
            let _ = u;
            let mut len = 2;
            let mut cur = first;
            while let Some(&(_, next)) = self.edges.iter().find(|(a, _)| *a == cur) {
                cur = next;
                len += 1;
                if len > self.path_len {
                    break;
                }
            }
            if len != self.path_len {
                return Err(Error::Validation(format!("arm through {first} has {len} nodes")));
            }
        }
        match walk_path(&self.edges, self.start, self.end) {
            Some(p) if p == self.path => Ok(()),
            Some(p) => Err(Error::Validation(format!(
                "stored path {:?} differs from the walk {:?}",
                self.path, p
            ))),
            None => Err(Error::Validation("end node is not reachable from start".into())),
        }
    }

    pub fn to_line(&self, order: PromptOrder) -> String {
        graph_line(&self.edges, self.start, self.end, &self.path, order)
    }

    /// Parses a graph line and validates it as a star. Without an explicit
    /// `node_count` the largest label is used.
    pub fn parse(line: &str, order: PromptOrder, node_count: Option<usize>) -> Result<Self> {
        let raw = parse_graph_line(line, order)?;
        let max_label = node_set(&raw.edges, &[raw.start, raw.end]).into_iter().max().unwrap_or(0) as usize;
        let node_count = node_count.unwrap_or(max_label);
        let path_count = raw.edges.iter().filter(|(u, _)| *u == raw.start).count();
        let inst = StarInstance {
            node_count,
            path_count,
            path_len: raw.path.len(),
            edges: raw.edges,
            start: raw.start,
            end: raw.end,
            path: raw.path,
        };
        inst.validate().map_err(|e| Error::parse(raw.answer_offset, e.to_string()))?;
        Ok(inst)
    }
}

impl TreeInstance {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Validation("tree depth must be at least 1".into()));
        }
        let n = (1usize << self.depth) - 1;
        let nodes = node_set(&self.edges, &[self.start, self.end]);
        check_label_range(&nodes, self.node_count)?;
        if self.edges.len() + 1 != n || nodes.len() != n {
            return Err(Error::Validation(format!(
                "a depth-{} tree has {n} nodes, found {}",
                self.depth,
                nodes.len()
            )));
        }
        let (out_deg, in_deg) = degrees(&self.edges);
        if in_deg.contains_key(&self.start) {
            return Err(Error::Validation("root has a parent".into()));
        }
        let mut children: HashMap<NodeId, Vec<NodeId>> = HashMap::new();
        for &(u, v) in &self.edges {
            children.entry(u).or_default().push(v);
        }
        for &node in &nodes {
            if node != self.start && in_deg.get(&node).copied().unwrap_or(0) != 1 {
                return Err(Error::Validation(format!("node {node} does not have one parent")));
            }
            let d = out_deg.get(&node).copied().unwrap_or(0);
            if d != 0 && d != 2 {
                return Err(Error::Validation(format!("node {node} has {d} children")));
            }
        }
        // all leaves sit at the same depth
        let mut level = vec![self.start];
        for _ in 1..self.depth {
            let mut next = Vec::new();
            for node in &level {
                match children.get(node) {
                    Some(c) => next.extend_from_slice(c),
                    None => return Err(Error::Validation("tree is not complete".into())),
                }
            }
            level = next;
        }
        if level.iter().any(|n| children.contains_key(n)) {
            return Err(Error::Validation("tree is deeper than declared".into()));
        }
        if !level.contains(&self.end) {
            return Err(Error::Validation(format!("end node {} is not a leaf", self.end)));
        }
        match walk_path(&self.edges, self.start, self.end) {
            Some(p) if p == self.path => Ok(()),
            _ => Err(Error::Validation("stored path is not the root-to-end walk".into())),
        }
    }

    pub fn to_line(&self, order: PromptOrder) -> String {
        graph_line(&self.edges, self.start, self.end, &self.path, order)
    }

    pub fn parse(line: &str, order: PromptOrder, node_count: Option<usize>) -> Result<Self> {
        let raw = parse_graph_line(line, order)?;
        let nodes = node_set(&raw.edges, &[raw.start, raw.end]);
        let max_label = nodes.iter().copied().max().unwrap_or(0) as usize;
        let n = raw.edges.len() + 1;
        if !(n + 1).is_power_of_two() {
            return Err(Error::parse(0, format!("{n} nodes cannot form a complete binary tree")));
        }
        let inst = TreeInstance {
            node_count: node_count.unwrap_or(max_label),
            depth: (n + 1).trailing_zeros() as usize,
            edges: raw.edges,
            start: raw.start,
            end: raw.end,
            path: raw.path,
        };
        inst.validate().map_err(|e| Error::parse(raw.answer_offset, e.to_string()))?;
        Ok(inst)
    }
}

fn join_ids(ids: &[NodeId]) -> String {
    ids.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(",")
}

fn graph_line(
    edges: &[(NodeId, NodeId)],
    start: NodeId,
    end: NodeId,
    path: &[NodeId],
    order: PromptOrder,
) -> String {
    let edge_text = edges
        .iter()
        .map(|(u, v)| format!("{u},{v}"))
        .collect::<Vec<_>>()
        .join(ITEM_SEP);
    let (a, b) = order.arrange(start, end);
    format!("{edge_text}{PROMPT_SEP}{a},{b}{ANSWER_SEP}{}", join_ids(path))
}

struct RawGraph {
    edges: Vec<(NodeId, NodeId)>,
    start: NodeId,
    end: NodeId,
    path: Vec<NodeId>,
    answer_offset: usize,
}

/// Splits `text` (which begins at byte `base` of the full line) on `sep`,
/// returning each piece with its absolute byte offset.
fn split_at<'a>(text: &'a str, base: usize, sep: &str) -> Vec<(usize, &'a str)> {
    let mut out = Vec::new();
    let mut from = 0;
    for (idx, _) in text.match_indices(sep) {
        out.push((base + from, &text[from..idx]));
        from = idx + sep.len();
    }
    out.push((base + from, &text[from..]));
    out
}

/// Splits a line into its three sections: items, prompt, answer.
fn sections(line: &str) -> Result<[(usize, &str); 3]> {
    let line = line.strip_suffix('\n').unwrap_or(line);
    let Some(eq) = line.find(ANSWER_SEP) else {
        return Err(Error::parse(line.len(), format!("missing {ANSWER_SEP:?}")));
    };
    let head = &line[..eq];
    let Some(slash) = head.rfind(PROMPT_SEP) else {
        // an empty item list serializes as a leading " / "
        return Err(Error::parse(eq, format!("missing {PROMPT_SEP:?}")));
    };
    let answer_at = eq + ANSWER_SEP.len();
    let prompt_at = slash + PROMPT_SEP.len();
    Ok([
        (0, &head[..slash]),
        (prompt_at, &head[prompt_at..]),
        (answer_at, &line[answer_at..]),
    ])
}

fn parse_num<T: FromStr>(tok: &str, pos: usize) -> Result<T> {
    if tok.is_empty() || !tok.bytes().all(|b| b.is_ascii_digit() || b == b'-') {
        return Err(Error::parse(pos, format!("expected an integer, found {tok:?}")));
    }
    tok.parse::<T>()
        .map_err(|_| Error::parse(pos, format!("integer {tok:?} out of range")))
}

fn parse_list<T: FromStr>(text: &str, base: usize) -> Result<Vec<T>> {
    split_at(text, base, ",")
        .into_iter()
        .map(|(pos, tok)| parse_num(tok, pos))
        .collect()
}

fn parse_graph_line(line: &str, order: PromptOrder) -> Result<RawGraph> {
    let [(items_at, items), (prompt_at, prompt), (answer_at, answer)] = sections(line)?;
    let mut edges = Vec::new();
    if !items.is_empty() {
        for (pos, pair) in split_at(items, items_at, ITEM_SEP) {
            let ids: Vec<NodeId> = parse_list(pair, pos)?;
            if ids.len() != 2 {
                return Err(Error::parse(pos, format!("edge {pair:?} is not a pair")));
            }
            edges.push((ids[0], ids[1]));
        }
    }
    let prompt_ids: Vec<NodeId> = parse_list(prompt, prompt_at)?;
    if prompt_ids.len() != 2 {
        return Err(Error::parse(prompt_at, "prompt must name exactly two nodes"));
    }
    let (start, end) = order.unpack(prompt_ids[0], prompt_ids[1]);
    let path: Vec<NodeId> = parse_list(answer, answer_at)?;
    if path.first() != Some(&start) || path.last() != Some(&end) {
        return Err(Error::parse(
            answer_at,
            format!("path must run from {start} to {end} for the given prompt order"),
        ));
    }
    Ok(RawGraph {
        edges,
        start,
        end,
        path,
        answer_offset: answer_at,
    })
}

// ---------------------------------------------------------------------------
// Countdown
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Op {
    Add,
    Sub,
    Mul,
    Div,
}

impl Op {
    pub const ALL: [Op; 4] = [Op::Add, Op::Sub, Op::Mul, Op::Div];

    pub fn symbol(self) -> char {
        match self {
            Op::Add => '+',
            Op::Sub => '-',
            Op::Mul => '*',
            Op::Div => '/',
        }
    }

    /// Applies the operator under Countdown rules: the result must be a
    /// positive integer below [`COUNTDOWN_LIMIT`] and division must be exact.
    pub fn apply(self, a: u32, b: u32) -> Option<u32> {
        let r = match self {
            Op::Add => a.checked_add(b)?,
            Op::Sub => a.checked_sub(b)?,
            Op::Mul => a.checked_mul(b)?,
            Op::Div => {
                if b == 0 || a % b != 0 {
                    return None;
                }
                a / b
            }
        };
        (r > 0 && r < COUNTDOWN_LIMIT).then_some(r)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Expr {
    Num(u32),
    Bin(Box<Expr>, Op, Box<Expr>),
}

impl Expr {
    pub fn bin(l: Expr, op: Op, r: Expr) -> Expr {
        Expr::Bin(Box::new(l), op, Box::new(r))
    }

    /// Evaluates under Countdown rules; `None` if any intermediate leaves the
    /// allowed range or a division is inexact.
    pub fn eval(&self) -> Option<u32> {
        match self {
            Expr::Num(n) => (*n > 0 && *n < COUNTDOWN_LIMIT).then_some(*n),
            Expr::Bin(l, op, r) => op.apply(l.eval()?, r.eval()?),
        }
    }

    pub fn leaves(&self) -> Vec<u32> {
        match self {
            Expr::Num(n) => vec![*n],
            Expr::Bin(l, _, r) => {
                let mut v = l.leaves();
                v.extend(r.leaves());
                v
            }
        }
    }

    fn fmt_nested(&self, f: &mut fmt::Formatter<'_>, root: bool) -> fmt::Result {
        match self {
            Expr::Num(n) => write!(f, "{n}"),
            Expr::Bin(l, op, r) => {
                if !root {
                    write!(f, "(")?;
                }
                l.fmt_nested(f, false)?;
                write!(f, "{}", op.symbol())?;
                r.fmt_nested(f, false)?;
                if !root {
                    write!(f, ")")?;
                }
                Ok(())
            }
        }
    }

    /// Parses infix with the usual precedence and left associativity.
    pub fn parse(text: &str, base: usize) -> Result<Expr> {
        let mut p = ExprParser {
            src: text.as_bytes(),
            pos: 0,
            base,
        };
        let e = p.sum()?;
        if p.pos != p.src.len() {
            return Err(Error::parse(base + p.pos, "trailing characters in expression"));
        }
        Ok(e)
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.fmt_nested(f, true)
    }
}

struct ExprParser<'a> {
    src: &'a [u8],
    pos: usize,
    base: usize,
}

impl ExprParser<'_> {
    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn sum(&mut self) -> Result<Expr> {
        let mut lhs = self.product()?;
        while let Some(c @ (b'+' | b'-')) = self.peek() {
            self.pos += 1;
            let rhs = self.product()?;
            lhs = Expr::bin(lhs, if c == b'+' { Op::Add } else { Op::Sub }, rhs);
        }
        Ok(lhs)
    }

    fn product(&mut self) -> Result<Expr> {
        let mut lhs = self.atom()?;
        while let Some(c @ (b'*' | b'/')) = self.peek() {
            self.pos += 1;
            let rhs = self.atom()?;
            lhs = Expr::bin(lhs, if c == b'*' { Op::Mul } else { Op::Div }, rhs);
        }
        Ok(lhs)
    }

    fn atom(&mut self) -> Result<Expr> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let e = self.sum()?;
                if self.peek() != Some(b')') {
                    return Err(Error::parse(self.base + self.pos, "expected ')'"));
                }
                self.pos += 1;
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() => {
                let from = self.pos;
                while self.peek().is_some_and(|c| c.is_ascii_digit()) {
                    self.pos += 1;
                }
                let tok = std::str::from_utf8(&self.src[from..self.pos]).expect("ascii digits");
                Ok(Expr::Num(parse_num(tok, self.base + from)?))
            }
            _ => Err(Error::parse(self.base + self.pos, "expected a number or '('")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CountdownInstance {
    pub operands: Vec<u32>,
    pub target: u32,
    pub solution: Expr,
}

fn sample_expr(rng: &mut ChaCha8Rng, leaves: usize) -> Option<Expr> {
    if leaves == 1 {
        return Some(Expr::Num(rng.gen_range(1..COUNTDOWN_LIMIT)));
    }
    let left_n = rng.gen_range(1..leaves);
    let l = sample_expr(rng, left_n)?;
    let r = sample_expr(rng, leaves - left_n)?;
    let (lv, rv) = (l.eval()?, r.eval()?);
    let valid: Vec<Op> = Op::ALL.into_iter().filter(|op| op.apply(lv, rv).is_some()).collect();
    let op = *valid.choose(rng)?;
    Some(Expr::bin(l, op, r))
}

/// Samples a random expression tree over `operand_count` leaves and reads off
/// its operands and value.
pub fn gen_countdown(operand_count: usize, seed: u64) -> Result<CountdownInstance> {
    if operand_count < 2 {
        return Err(Error::Capacity("countdown needs at least two operands".into()));
    }
    let mut rng = rng_for(seed);
    for _ in 0..COUNTDOWN_BUDGET {
        if let Some(expr) = sample_expr(&mut rng, operand_count) {
            let target = expr.eval().expect("sampled trees are valid");
            let mut operands = expr.leaves();
            operands.shuffle(&mut rng);
            return Ok(CountdownInstance {
                operands,
                target,
                solution: expr,
            });
        }
    }
    Err(Error::Generation {
        attempts: COUNTDOWN_BUDGET,
        reason: format!("no valid {operand_count}-operand expression tree sampled"),
    })
}

fn sorted(mut v: Vec<u32>) -> Vec<u32> {
    v.sort_unstable();
    v
}

/// True iff the stored solution uses every operand exactly once, stays within
/// the Countdown rules at every node, and evaluates to the target.
pub fn verify_countdown(instance: &CountdownInstance) -> Result<bool> {
    if instance.operands.is_empty() {
        return Err(Error::Validation("no operands".into()));
    }
    let in_range = |n: u32| n > 0 && n < COUNTDOWN_LIMIT;
    if !instance.operands.iter().all(|&n| in_range(n)) || !in_range(instance.target) {
        return Err(Error::Validation(format!(
            "operands and target must lie in 1..{COUNTDOWN_LIMIT}"
        )));
    }
    if sorted(instance.solution.leaves()) != sorted(instance.operands.clone()) {
        return Ok(false);
    }
    Ok(instance.solution.eval() == Some(instance.target))
}

/// Exhaustive search for an expression that combines all operands into the
/// target under Countdown rules.
pub fn solve_countdown(operands: &[u32], target: u32) -> Option<Expr> {
    fn search(items: Vec<(u32, Expr)>, target: u32) -> Option<Expr> {
        if items.len() == 1 {
            return (items[0].0 == target).then(|| items[0].1.clone());
        }
        for i in 0..items.len() {
            for j in 0..items.len() {
                if i == j {
                    continue;
                }
                for op in Op::ALL {
                    // commutative ops only need one orientation
                    if matches!(op, Op::Add | Op::Mul) && i > j {
                        continue;
                    }
                    let Some(v) = op.apply(items[i].0, items[j].0) else {
                        continue;
                    };
                    let mut rest: Vec<(u32, Expr)> = items
                        .iter()
                        .enumerate()
                        .filter(|(k, _)| *k != i && *k != j)
                        .map(|(_, it)| it.clone())
                        .collect();
                    rest.push((v, Expr::bin(items[i].1.clone(), op, items[j].1.clone())));
                    if let Some(e) = search(rest, target) {
                        return Some(e);
                    }
                }
            }
        }
        None
    }
    if operands.is_empty() || operands.iter().any(|&n| n == 0 || n >= COUNTDOWN_LIMIT) {
        return None;
    }
    search(operands.iter().map(|&n| (n, Expr::Num(n))).collect(), target)
}

impl CountdownInstance {
    pub fn to_line(&self) -> String {
        let ops = self.operands.iter().map(u32::to_string).collect::<Vec<_>>().join(ITEM_SEP);
        format!("{ops}{PROMPT_SEP}{}{ANSWER_SEP}{}", self.target, self.solution)
    }

    pub fn parse(line: &str) -> Result<Self> {
        let [(items_at, items), (prompt_at, prompt), (answer_at, answer)] = sections(line)?;
        let operands = split_at(items, items_at, ITEM_SEP)
            .into_iter()
            .map(|(pos, tok)| parse_num(tok, pos))
            .collect::<Result<Vec<u32>>>()?;
        let target = parse_num(prompt, prompt_at)?;
        let solution = Expr::parse(answer, answer_at)?;
        let inst = CountdownInstance {
            operands,
            target,
            solution,
        };
        match verify_countdown(&inst) {
            Ok(true) => Ok(inst),
            Ok(false) => Err(Error::parse(answer_at, "solution does not reach the target")),
            Err(e) => Err(Error::parse(items_at, e.to_string())),
        }
    }
}

// ---------------------------------------------------------------------------
// SAT
// ---------------------------------------------------------------------------

/// CNF formula over variables `1..=var_count`; literals are signed indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Cnf {
    pub var_count: usize,
    pub clauses: Vec<Vec<i32>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SatInstance {
    pub formula: Cnf,
    pub witness: Vec<bool>,
}

fn literal_true(lit: i32, assignment: &[bool]) -> bool {
    let value = assignment[lit.unsigned_abs() as usize - 1];
    if lit > 0 {
        value
    } else {
        !value
    }
}

impl Cnf {
    pub fn validate(&self) -> Result<()> {
        for (i, clause) in self.clauses.iter().enumerate() {
            if clause.is_empty() {
                return Err(Error::Validation(format!("clause {i} is empty")));
            }
            let mut seen = HashSet::new();
            for &lit in clause {
                let var = lit.unsigned_abs() as usize;
                if lit == 0 || var > self.var_count {
                    return Err(Error::Validation(format!("literal {lit} out of range")));
                }
                if !seen.insert(var) {
                    return Err(Error::Validation(format!("clause {i} repeats variable {var}")));
                }
            }
        }
        Ok(())
    }

    pub fn is_satisfied_by(&self, assignment: &[bool]) -> bool {
        self.clauses
            .iter()
            .all(|c| c.iter().any(|&lit| literal_true(lit, assignment)))
    }
}

/// True iff every clause contains a satisfied literal.
pub fn verify_sat(formula: &Cnf, assignment: &[bool]) -> Result<bool> {
    if assignment.len() != formula.var_count {
        return Err(Error::Validation(format!(
            "assignment has {} values for {} variables",
            assignment.len(),
            formula.var_count
        )));
    }
    formula.validate()?;
    Ok(formula.is_satisfied_by(assignment))
}

/// Plants a random witness, then keeps sampling 3-literal clauses over
/// distinct variables until `clause_count` of them are satisfied by it.
pub fn gen_sat_with(var_count: usize, clause_count: usize, seed: u64) -> Result<SatInstance> {
    if var_count < 3 {
        return Err(Error::Capacity("3-SAT needs at least three variables".into()));
    }
    let mut rng = rng_for(seed);
    let witness: Vec<bool> = (0..var_count).map(|_| rng.gen()).collect();
    let mut clauses = Vec::with_capacity(clause_count);
    while clauses.len() < clause_count {
        let vars = rand::seq::index::sample(&mut rng, var_count, 3);
        let clause: Vec<i32> = vars
            .into_iter()
            .map(|v| {
                let lit = v as i32 + 1;
                if rng.gen() {
                    lit
                } else {
                    -lit
                }
            })
            .collect();
        if clause.iter().any(|&lit| literal_true(lit, &witness)) {
            clauses.push(clause);
        }
    }
    Ok(SatInstance {
        formula: Cnf { var_count, clauses },
        witness,
    })
}

/// 7 variables, 45 clauses.
pub fn gen_sat(seed: u64) -> SatInstance {
    gen_sat_with(SAT_VARS, SAT_CLAUSES, seed).expect("default sizes are valid")
}

/// DPLL with unit propagation; returns a satisfying assignment if one exists.
pub fn solve_sat(formula: &Cnf) -> Option<Vec<bool>> {
    fn dpll(clauses: &[Vec<i32>], assign: &mut Vec<Option<bool>>) -> bool {
        // unit propagation to a fixed point
        let mut trail = Vec::new();
        loop {
            let mut unit = None;
            for c in clauses {
                let mut open = None;
                let mut open_count = 0;
                let mut sat = false;
                for &lit in c {
                    match assign[lit.unsigned_abs() as usize - 1] {
                        Some(v) if v == (lit > 0) => {
                            sat = true;
                            break;
                        }
                        Some(_) => {}
                        None => {
                            open_count += 1;
                            open = Some(lit);
                        }
                    }
                }
                if sat {
                    continue;
                }
                if open_count == 0 {
                    for v in trail {
                        assign[v] = None;
                    }
                    return false;
                }
                if open_count == 1 {
                    unit = open;
                    break;
                }
            }
            match unit {
                Some(lit) => {
                    let v = lit.unsigned_abs() as usize - 1;
                    assign[v] = Some(lit > 0);
                    trail.push(v);
                }
                None => break,
            }
        }
        let Some(branch) = assign.iter().position(Option::is_none) else {
            return true;
        };
        for value in [false, true] {
            assign[branch] = Some(value);
            if dpll(clauses, assign) {
                return true;
            }
        }
        assign[branch] = None;
        for v in trail {
            assign[v] = None;
        }
        false
    }

    let mut assign = vec![None; formula.var_count];
    if dpll(&formula.clauses, &mut assign) {
        Some(assign.into_iter().map(|v| v.unwrap_or(false)).collect())
    } else {
        None
    }
}

impl SatInstance {
    pub fn to_line(&self) -> String {
        let clauses = self
            .formula
            .clauses
            .iter()
            .map(|c| c.iter().map(i32::to_string).collect::<Vec<_>>().join(","))
            .collect::<Vec<_>>()
            .join(ITEM_SEP);
        let bits = self
            .witness
            .iter()
            .map(|&b| if b { "1" } else { "0" })
            .collect::<Vec<_>>()
            .join(",");
        format!("{clauses}{PROMPT_SEP}{}{ANSWER_SEP}{bits}", self.formula.var_count)
    }

    pub fn parse(line: &str) -> Result<Self> {
        let [(items_at, items), (prompt_at, prompt), (answer_at, answer)] = sections(line)?;
        let clauses = split_at(items, items_at, ITEM_SEP)
            .into_iter()
            .map(|(pos, c)| parse_list::<i32>(c, pos))
            .collect::<Result<Vec<_>>>()?;
        let var_count: usize = parse_num(prompt, prompt_at)?;
        let mut witness = Vec::new();
        for (pos, tok) in split_at(answer, answer_at, ",") {
            witness.push(match tok {
                "0" => false,
                "1" => true,
                _ => return Err(Error::parse(pos, format!("expected 0 or 1, found {tok:?}"))),
            });
        }
        let formula = Cnf { var_count, clauses };
        match verify_sat(&formula, &witness) {
            Ok(true) => Ok(SatInstance { formula, witness }),
            Ok(false) => Err(Error::parse(answer_at, "witness does not satisfy the formula")),
            Err(e) => Err(Error::parse(items_at, e.to_string())),
        }
    }
}

// ---------------------------------------------------------------------------
// Unified dataset surface
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Star,
    Tree,
    Countdown,
    Sat,
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "star" => Ok(TaskKind::Star),
            "tree" => Ok(TaskKind::Tree),
            "countdown" => Ok(TaskKind::Countdown),
            "sat" => Ok(TaskKind::Sat),
            other => Err(Error::InvalidArgument(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TaskInstance {
    Star(StarInstance),
    Tree(TreeInstance),
    Countdown(CountdownInstance),
    Sat(SatInstance),
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ParseOptions {
    pub order: PromptOrder,
    pub node_count: Option<usize>,
}

impl TaskInstance {
    pub fn kind(&self) -> TaskKind {
        match self {
            TaskInstance::Star(_) => TaskKind::Star,
            TaskInstance::Tree(_) => TaskKind::Tree,
            TaskInstance::Countdown(_) => TaskKind::Countdown,
            TaskInstance::Sat(_) => TaskKind::Sat,
        }
    }

    /// Runs the task's own oracle on the stored answer.
    pub fn verify(&self) -> Result<bool> {
        match self {
            TaskInstance::Star(s) => Ok(s.validate().is_ok()),
            TaskInstance::Tree(t) => Ok(t.validate().is_ok()),
            TaskInstance::Countdown(c) => verify_countdown(c),
            TaskInstance::Sat(s) => verify_sat(&s.formula, &s.witness),
        }
    }
}

/// One instance as a single line (no trailing newline).
pub fn serialize(instance: &TaskInstance, order: PromptOrder) -> String {
    match instance {
        TaskInstance::Star(s) => s.to_line(order),
        TaskInstance::Tree(t) => t.to_line(order),
        TaskInstance::Countdown(c) => c.to_line(),
        TaskInstance::Sat(s) => s.to_line(),
    }
}

pub fn parse(line: &str, kind: TaskKind, opts: ParseOptions) -> Result<TaskInstance> {
    Ok(match kind {
        TaskKind::Star => TaskInstance::Star(StarInstance::parse(line, opts.order, opts.node_count)?),
        TaskKind::Tree => TaskInstance::Tree(TreeInstance::parse(line, opts.order, opts.node_count)?),
        TaskKind::Countdown => TaskInstance::Countdown(CountdownInstance::parse(line)?),
        TaskKind::Sat => TaskInstance::Sat(SatInstance::parse(line)?),
    })
}

/// Parameters for [`generate`].
#[derive(Clone, Copy, Debug)]
pub enum TaskParams {
    Star {
        path_count: usize,
        path_len: usize,
        node_count: usize,
    },
    Tree {
        depth: usize,
    },
    Countdown {
        operand_count: usize,
    },
    Sat {
        var_count: usize,
        clause_count: usize,
    },
}

pub fn generate(params: TaskParams, seed: u64) -> Result<TaskInstance> {
    Ok(match params {
        TaskParams::Star {
            path_count,
            path_len,
            node_count,
        } => TaskInstance::Star(gen_star(path_count, path_len, node_count, seed)?),
        TaskParams::Tree { depth } => TaskInstance::Tree(gen_binary_tree(depth, seed)?),
        TaskParams::Countdown { operand_count } => {
            TaskInstance::Countdown(gen_countdown(operand_count, seed)?)
        }
        TaskParams::Sat {
            var_count,
            clause_count,
        } => TaskInstance::Sat(gen_sat_with(var_count, clause_count, seed)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const APPENDIX_LINE: &str = "74,64 | 3,36 | 49,63 | 40,16 | 31,73 | 73,18 | 51,22 | 49,46 | 38,19 | 13,27 | 46,40 | 49,74 | 63,31 | 65,13 | 64,3 | 49,61 | 19,51 | 61,65 | 49,38 | 16,41 / 49,18 = 49,63,31,73,18";

    #[test]
    fn text_dataset_line_round_trips() {
        let star = StarInstance::parse(APPENDIX_LINE, PromptOrder::StartEnd, None).unwrap();
        assert_eq!(star.path_count, 5);
        assert_eq!(star.path_len, 5);
        assert_eq!(star.start, 49);
        assert_eq!(star.end, 18);
        assert_eq!(star.to_line(PromptOrder::StartEnd), APPENDIX_LINE);
    }

    #[test]
    fn single_edge_line_round_trips() {
        let line = "3,6 / 6,3 = 3,6";
        let star = StarInstance::parse(line, PromptOrder::EndStart, None).unwrap();
        assert_eq!(star.edges, vec![(3, 6)]);
        assert_eq!(star.path, vec![3, 6]);
        assert_eq!(star.to_line(PromptOrder::EndStart), line);
    }

    #[test]
    fn minimal_star() {
        let s = gen_star(1, 2, 2, 9).unwrap();
        assert_eq!(s.edges.len(), 1);
        assert_eq!(s.path, vec![s.start, s.end]);
        s.validate().unwrap();
    }

    #[test]
    fn star_capacity_error() {
        assert!(matches!(gen_star(3, 4, 9, 0), Err(Error::Capacity(_))));
        assert!(matches!(gen_star(2, 1, 9, 0), Err(Error::Capacity(_))));
    }

    #[test]
    fn star_generation_is_deterministic() {
        assert_eq!(gen_star(2, 3, 10, 5).unwrap(), gen_star(2, 3, 10, 5).unwrap());
        assert_ne!(gen_star(2, 3, 10, 5).unwrap(), gen_star(2, 3, 10, 6).unwrap());
    }

    #[test]
    fn parse_errors_carry_positions() {
        let err = StarInstance::parse("3,x / 6,3 = 3,6", PromptOrder::EndStart, None).unwrap_err();
        assert_eq!(err, Error::parse(2, "expected an integer, found \"x\""));
        assert!(matches!(
            StarInstance::parse("3,6 / 6,3 3,6", PromptOrder::EndStart, None),
            Err(Error::Parse { .. })
        ));
        assert!(matches!(
            StarInstance::parse("3,6,7 / 6,3 = 3,6", PromptOrder::EndStart, None),
            Err(Error::Parse { position: 0, .. })
        ));
        // path does not follow the edges
        assert!(matches!(
            StarInstance::parse("3,6 | 3,7 / 7,3 = 3,6,7", PromptOrder::EndStart, None),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn tree_depth_one_is_a_single_node() {
        let t = gen_binary_tree(1, 3).unwrap();
        assert!(t.edges.is_empty());
        assert_eq!(t.path, vec![t.start]);
        assert_eq!(t.start, t.end);
        t.validate().unwrap();
        let line = t.to_line(PromptOrder::StartEnd);
        assert_eq!(TreeInstance::parse(&line, PromptOrder::StartEnd, None).unwrap(), t);
    }

    #[test]
    fn tree_depth_zero_rejected() {
        assert!(matches!(gen_binary_tree(0, 0), Err(Error::Capacity(_))));
    }

    #[test]
    fn tree_path_branches_at_every_step() {
        for seed in 0..20 {
            let t = gen_binary_tree(3, seed).unwrap();
            assert_eq!(t.path.len(), 3);
            assert_eq!(t.edges.len(), 6);
            for w in t.path.windows(2) {
                let children: Vec<_> = t.edges.iter().filter(|(u, _)| *u == w[0]).map(|e| e.1).collect();
                assert_eq!(children.len(), 2);
                assert_eq!(children.iter().filter(|&&c| c != w[1]).count(), 1);
            }
            t.validate().unwrap();
        }
    }

    #[test]
    fn tree_is_deterministic() {
        let a = gen_binary_tree(4, 77).unwrap().to_line(PromptOrder::StartEnd);
        let b = gen_binary_tree(4, 77).unwrap().to_line(PromptOrder::StartEnd);
        assert_eq!(a.as_bytes(), b.as_bytes());
    }

    #[test]
    fn countdown_reference_puzzle() {
        let inst = CountdownInstance::parse("11 | 14 | 40 | 97 / 19 = (97-40)/(14-11)").unwrap();
        assert!(verify_countdown(&inst).unwrap());
        assert!(solve_countdown(&[11, 14, 40, 97], 19).is_some());
        let wrong = CountdownInstance {
            solution: Expr::parse("(97-40)-(14+11)", 0).unwrap(),
            ..inst.clone()
        };
        assert!(!verify_countdown(&wrong).unwrap());
    }

    #[test]
    fn countdown_two_fives() {
        let inst = CountdownInstance {
            operands: vec![5, 5],
            target: 10,
            solution: Expr::bin(Expr::Num(5), Op::Add, Expr::Num(5)),
        };
        assert!(verify_countdown(&inst).unwrap());
        assert_eq!(inst.to_line(), "5 | 5 / 10 = 5+5");
    }

    #[test]
    fn countdown_rules() {
        assert_eq!(Op::Div.apply(7, 2), None);
        assert_eq!(Op::Sub.apply(3, 3), None);
        assert_eq!(Op::Mul.apply(10, 10), None);
        assert_eq!(Op::Div.apply(96, 8), Some(12));
        let bad = CountdownInstance {
            operands: vec![0, 5],
            target: 5,
            solution: Expr::Num(5),
        };
        assert!(verify_countdown(&bad).is_err());
        assert!(gen_countdown(1, 0).is_err());
    }

    #[test]
    fn countdown_expression_errors() {
        assert!(matches!(Expr::parse("(1+2", 10), Err(Error::Parse { position: 14, .. })));
        assert!(matches!(Expr::parse("1+", 0), Err(Error::Parse { .. })));
        assert!(matches!(Expr::parse("1 2", 0), Err(Error::Parse { .. })));
    }

    #[test]
    fn sat_small_formula() {
        let f = Cnf {
            var_count: 3,
            clauses: vec![vec![-1], vec![1, -2], vec![1, 2, 3]],
        };
        assert!(verify_sat(&f, &[false, false, true]).unwrap());
        assert!(!verify_sat(&f, &[false, false, false]).unwrap());
        assert!(verify_sat(&f, &[true, false]).is_err());
        let inst = SatInstance {
            formula: f,
            witness: vec![false, false, true],
        };
        let line = inst.to_line();
        assert_eq!(line, "-1 | 1,-2 | 1,2,3 / 3 = 0,0,1");
        assert_eq!(SatInstance::parse(&line).unwrap(), inst);
    }

    #[test]
    fn sat_all_positive() {
        let f = Cnf {
            var_count: 4,
            clauses: vec![vec![1, 2, 3], vec![2, 3, 4], vec![1, 3, 4]],
        };
        assert!(verify_sat(&f, &[true; 4]).unwrap());
    }

    #[test]
    fn sat_rejects_repeated_variable() {
        let f = Cnf {
            var_count: 3,
            clauses: vec![vec![1, -1, 2]],
        };
        assert!(verify_sat(&f, &[true; 3]).is_err());
    }

    #[test]
    fn dpll_detects_unsat() {
        let f = Cnf {
            var_count: 1,
            clauses: vec![vec![1], vec![-1]],
        };
        assert!(solve_sat(&f).is_none());
        let g = Cnf {
            var_count: 2,
            clauses: vec![vec![1, 2], vec![-1, 2], vec![1, -2], vec![-1, -2]],
        };
        assert!(solve_sat(&g).is_none());
    }

    #[test]
    fn generated_sat_shape() {
        let inst = gen_sat(11);
        assert_eq!(inst.formula.var_count, 7);
        assert_eq!(inst.formula.clauses.len(), 45);
        assert!(inst.formula.clauses.iter().all(|c| c.len() == 3));
        assert!(verify_sat(&inst.formula, &inst.witness).unwrap());
    }
}
