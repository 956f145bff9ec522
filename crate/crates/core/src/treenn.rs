//! Recursive networks over labeled binary trees, producing one inside state
//! vector per tree node.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::autograd::{Graph, NodeId};
use crate::encoders::Activation;
use crate::error::{Error, Result};
use crate::model::{InitSpec, ParamStore};

/// `(A -> B, C, i, k, j)` with 1-based word indices `i <= k <= j`. Leaves
/// are `(A -> A, A, i, i, i)`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ProductionRule {
    pub a: String,
    pub b: String,
    pub c: String,
    pub i: usize,
    pub k: usize,
    pub j: usize,
}

impl ProductionRule {
    pub fn leaf(label: &str, i: usize) -> Self {
        ProductionRule {
            a: label.to_string(),
            b: label.to_string(),
            c: label.to_string(),
            i,
            k: i,
            j: i,
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.i == self.j
    }

    pub fn span(&self) -> (usize, usize) {
        (self.i, self.j)
    }
}

impl fmt::Display for ProductionRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {}, {}, {})", self.a, self.b, self.c, self.i, self.k, self.j)
    }
}

/// Rules are stored leaves first (left to right), then internal nodes in
/// post-order, so children always precede their parent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryTree {
    pub tokens: Vec<String>,
    pub rules: Vec<ProductionRule>,
}

enum Sexp {
    Atom(String),
    List(Vec<Sexp>),
}

fn lex(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        match ch {
            '(' | ')' => {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            }
            c if c.is_whitespace() => {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
            }
            c => cur.push(c),
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

fn read_sexp(tokens: &[String], pos: &mut usize) -> Result<Sexp> {
    let tok = tokens.get(*pos).ok_or_else(|| Error::Tree("unexpected end of input".into()))?;
    *pos += 1;
    match tok.as_str() {
        "(" => {
            let mut items = Vec::new();
            loop {
                match tokens.get(*pos).map(String::as_str) {
                    Some(")") => {
                        *pos += 1;
                        return Ok(Sexp::List(items));
                    }
                    Some(_) => items.push(read_sexp(tokens, pos)?),
                    None => return Err(Error::Tree("unbalanced parentheses: missing `)`".into())),
                }
            }
        }
        ")" => Err(Error::Tree("unbalanced parentheses: unexpected `)`".into())),
        atom => Ok(Sexp::Atom(atom.to_string())),
    }
}

struct Builder {
    tokens: Vec<String>,
    leaves: Vec<ProductionRule>,
    internal: Vec<ProductionRule>,
}

impl Builder {
    /// Returns the node's label and span.
    fn visit(&mut self, node: &Sexp) -> Result<(String, usize, usize)> {
        let items = match node {
            Sexp::List(items) => items,
            Sexp::Atom(a) => return Err(Error::Tree(format!("bare word `{a}` without a pre-terminal"))),
        };
        let label = match items.first() {
            Some(Sexp::Atom(l)) => l.clone(),
            _ => return Err(Error::Tree("every node needs a label".into())),
        };
        match &items[1..] {
            [Sexp::Atom(word)] => {
                self.tokens.push(word.clone());
                let i = self.tokens.len();
                self.leaves.push(ProductionRule::leaf(&label, i));
                Ok((label, i, i))
            }
            [left, right] => {
                let (b, i, k) = self.visit(left)?;
                let (c, k1, j) = self.visit(right)?;
                debug_assert_eq!(k1, k + 1);
                self.internal.push(ProductionRule {
                    a: label.clone(),
                    b,
                    c,
                    i,
                    k,
                    j,
                });
                Ok((label, i, j))
            }
            rest => Err(Error::Tree(format!(
                "node `{label}` has {} children; trees must be binary with unary pre-terminals",
                rest.len()
            ))),
        }
    }
}

/// Parses `(S (NP (Det the) (Noun boy)) ...)`.
pub fn parse_sexp(text: &str) -> Result<BinaryTree> {
    let tokens = lex(text);
    if tokens.is_empty() {
        return Err(Error::Tree("empty tree".into()));
    }
    let mut pos = 0;
    let root = read_sexp(&tokens, &mut pos)?;
    if pos != tokens.len() {
        return Err(Error::Tree(format!("trailing input after the tree: `{}`", tokens[pos..].join(" "))));
    }
    let mut b = Builder {
        tokens: Vec::new(),
        leaves: Vec::new(),
        internal: Vec::new(),
    };
    b.visit(&root)?;
    let mut rules = b.leaves;
    rules.extend(b.internal);
    Ok(BinaryTree { tokens: b.tokens, rules })
}

impl BinaryTree {
    /// Builds a tree from an unordered rule set, checking that it tiles.
    pub fn from_rules(tokens: Vec<String>, rules: impl IntoIterator<Item = ProductionRule>) -> Result<Self> {
        let n = tokens.len();
        let by_span: BTreeMap<(usize, usize), ProductionRule> = rules.into_iter().map(|r| (r.span(), r)).collect();
        fn walk(
            span: (usize, usize),
            by_span: &BTreeMap<(usize, usize), ProductionRule>,
            leaves: &mut Vec<ProductionRule>,
            internal: &mut Vec<ProductionRule>,
        ) -> Result<String> {
            let r = by_span
                .get(&span)
                .ok_or_else(|| Error::Tree(format!("no node spans {}..{}", span.0, span.1)))?;
            if r.is_leaf() {
                leaves.push(r.clone());
                return Ok(r.a.clone());
            }
            if !(r.i <= r.k && r.k < r.j) {
                return Err(Error::Tree(format!("bad split in {r}")));
            }
            let b = walk((r.i, r.k), by_span, leaves, internal)?;
            let c = walk((r.k + 1, r.j), by_span, leaves, internal)?;
            if b != r.b || c != r.c {
                return Err(Error::Tree(format!("child labels of {r} are {b} and {c}")));
            }
            internal.push(r.clone());
            Ok(r.a.clone())
        }
        if n == 0 {
            return Err(Error::Tree("empty sentence".into()));
        }
        let (mut leaves, mut internal) = (Vec::new(), Vec::new());
        walk((1, n), &by_span, &mut leaves, &mut internal)?;
        if leaves.len() + internal.len() != by_span.len() {
            return Err(Error::Tree("rules outside the tree rooted at the full span".into()));
        }
        leaves.extend(internal);
        let tree = BinaryTree { tokens, rules: leaves };
        tree.validate()?;
        Ok(tree)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn root(&self) -> &ProductionRule {
        self.rules.last().expect("trees are nonempty")
    }

    /// Unordered rule set, for comparisons that ignore storage order.
    pub fn rule_set(&self) -> BTreeSet<ProductionRule> {
        self.rules.iter().cloned().collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.tokens.len();
        let leaves = self.rules.iter().filter(|r| r.is_leaf()).count();
        if n == 0 || leaves != n || self.rules.len() != 2 * n - 1 {
            return Err(Error::Tree(format!(
                "{n} words need {n} leaf and {} internal rules, found {leaves} and {}",
                n.saturating_sub(1),
                self.rules.len() - leaves
            )));
        }
        let root = self.root();
        if root.span() != (1, n) {
            return Err(Error::Tree(format!("root spans {}..{}, not 1..{n}", root.i, root.j)));
        }
        let mut seen = BTreeMap::new();
        for r in &self.rules {
            if !r.is_leaf() {
                let (b, c) = (seen.get(&(r.i, r.k)), seen.get(&(r.k + 1, r.j)));
                if b != Some(&r.b) || c != Some(&r.c) {
                    return Err(Error::Tree(format!("children of {r} missing or out of order")));
                }
            }
            if seen.insert(r.span(), r.a.clone()).is_some() {
                return Err(Error::Tree(format!("duplicate span in {r}")));
            }
        }
        Ok(())
    }

    /// Renders back to an s-expression.
    pub fn to_sexp(&self) -> String {
        let by_span: BTreeMap<(usize, usize), &ProductionRule> = self.rules.iter().map(|r| (r.span(), r)).collect();
        fn go(span: (usize, usize), by_span: &BTreeMap<(usize, usize), &ProductionRule>, tokens: &[String], out: &mut String) {
            let r = by_span[&span];
            if r.is_leaf() {
                out.push_str(&format!("({} {})", r.a, tokens[r.i - 1]));
            } else {
                out.push_str(&format!("({} ", r.a));
                go((r.i, r.k), by_span, tokens, out);
                out.push(' ');
                go((r.k + 1, r.j), by_span, tokens, out);
                out.push(')');
            }
        }
        let mut out = String::new();
        go((1, self.tokens.len()), &by_span, &self.tokens, &mut out);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Composition {
    /// `g([sB; sC] W)` with one `2d x d` matrix.
    Untied,
    /// `g([sB; sC; v(A); v(B)] W)` with `d_nt`-dimensional label embeddings.
    LabelEmbedding { d_nt: usize },
    /// `g([sB; sC] W^{BC})`; unseen pairs use a shared default matrix.
    PerPair,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecNnSpec {
    pub composition: Composition,
    pub dim: usize,
    pub activation: Activation,
}

/// Recursive network with parameters under `{prefix}/`.
#[derive(Debug, Clone, PartialEq)]
pub struct RecNn {
    pub prefix: String,
    pub spec: RecNnSpec,
    /// Nonterminal inventory; indexes the label-embedding table.
    pub labels: Vec<String>,
    /// Child-label pairs with their own matrix in per-pair mode.
    pub pairs: BTreeSet<(String, String)>,
}

/// Labels and child-label pairs occurring in `trees`.
pub fn label_inventory<'a>(trees: impl IntoIterator<Item = &'a BinaryTree>) -> (Vec<String>, BTreeSet<(String, String)>) {
    let mut labels = BTreeSet::new();
    let mut pairs = BTreeSet::new();
    for t in trees {
        for r in &t.rules {
            labels.insert(r.a.clone());
            if !r.is_leaf() {
                pairs.insert((r.b.clone(), r.c.clone()));
            }
        }
    }
    (labels.into_iter().collect(), pairs)
}

impl RecNn {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        spec: RecNnSpec,
        labels: Vec<String>,
        pairs: BTreeSet<(String, String)>,
    ) -> Result<Self> {
        if spec.dim == 0 {
            return Err(Error::invalid("recnn", "dim must be positive"));
        }
        let net = RecNn {
            prefix: prefix.to_string(),
            spec,
            labels,
            pairs,
        };
        let d = net.spec.dim;
        match net.spec.composition {
            Composition::Untied => store.add_param(&net.default_weight(), 2 * d, d, InitSpec::Xavier)?,
            Composition::LabelEmbedding { d_nt } => {
                if d_nt == 0 {
                    return Err(Error::invalid("recnn", "d_nt must be positive"));
                }
                store.add_param(&net.default_weight(), 2 * d + 2 * d_nt, d, InitSpec::Xavier)?;
                store.add_lookup(&net.label_table(), net.labels.len(), d_nt, InitSpec::Xavier)?;
            }
            Composition::PerPair => {
                store.add_param(&net.default_weight(), 2 * d, d, InitSpec::Xavier)?;
                for (b, c) in &net.pairs {
                    store.add_param(&net.pair_weight(b, c), 2 * d, d, InitSpec::Xavier)?;
                }
            }
        }
        Ok(net)
    }

    pub fn default_weight(&self) -> String {
        format!("{}/W", self.prefix)
    }

    pub fn pair_weight(&self, b: &str, c: &str) -> String {
        format!("{}/W[{},{}]", self.prefix, b, c)
    }

    pub fn label_table(&self) -> String {
        format!("{}/labels", self.prefix)
    }

    fn label_index(&self, label: &str) -> usize {
        // unknown labels fall through to the table's UNK row
        self.labels.iter().position(|l| l == label).unwrap_or(self.labels.len())
    }

    /// Inside states for every node of `tree`; `leaves[i]` is `v(x_{i+1})`.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, tree: &BinaryTree, leaves: &[NodeId]) -> Result<TreeStates> {
        recnn_encode(g, store, self, tree, leaves)
    }
}

/// A tree node `q^A_{i:j}`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TreeNode {
    pub label: String,
    pub i: usize,
    pub j: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeStates {
    /// Aligned with `tree.rules`.
    pub nodes: Vec<(TreeNode, NodeId)>,
}

impl TreeStates {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn root(&self) -> NodeId {
        self.nodes.last().expect("nonempty").1
    }

    pub fn get(&self, i: usize, j: usize) -> Option<NodeId> {
        self.nodes.iter().find(|(n, _)| n.i == i && n.j == j).map(|&(_, id)| id)
    }
}

pub fn recnn_encode(g: &mut Graph, store: &ParamStore, net: &RecNn, tree: &BinaryTree, leaves: &[NodeId]) -> Result<TreeStates> {
    tree.validate()?;
    let d = net.spec.dim;
    if leaves.len() != tree.len() {
        return Err(Error::invalid(
            "recnn",
            format!("{} leaf vectors for a {}-word tree", leaves.len(), tree.len()),
        ));
    }
    if let Some(&bad) = leaves.iter().find(|&&l| g.shape(l) != (1, d)) {
        return Err(Error::Shape {
            op: "recnn",
            lhs: g.shape(bad),
            rhs: (1, d),
        });
    }
    let mut by_span: BTreeMap<(usize, usize), NodeId> = BTreeMap::new();
    let mut nodes = Vec::with_capacity(tree.rules.len());
    for r in &tree.rules {
        let s = if r.is_leaf() {
            leaves[r.i - 1]
        } else {
            let sb = by_span[&(r.i, r.k)];
            let sc = by_span[&(r.k + 1, r.j)];
            let (input, w) = match net.spec.composition {
                Composition::Untied => (g.concat(&[sb, sc])?, net.default_weight()),
                Composition::LabelEmbedding { .. } => {
                    let table = net.label_table();
                    let va = g.lookup(store, &table, net.label_index(&r.a))?;
                    let vb = g.lookup(store, &table, net.label_index(&r.b))?;
                    (g.concat(&[sb, sc, va, vb])?, net.default_weight())
                }
                Composition::PerPair => {
                    let key = (r.b.clone(), r.c.clone());
                    let w = if net.pairs.contains(&key) { net.pair_weight(&r.b, &r.c) } else { net.default_weight() };
                    (g.concat(&[sb, sc])?, w)
                }
            };
            let wn = g.parameter(store, &w)?;
            let lin = g.matmul(input, wn)?;
            net.spec.activation.apply(g, lin)?
        };
        by_span.insert(r.span(), s);
        nodes.push((
            TreeNode {
                label: r.a.clone(),
                i: r.i,
                j: r.j,
            },
            s,
        ));
    }
    Ok(TreeStates { nodes })
}
