//! Dataflow-graph model: builder interface, validation, topological
//! order, and the markup file format with a canonical byte-exact
//! serialization.
//!
//! Markup grammar (whitespace-insensitive between tokens, `#` comments):
//!
//! ```text
//! inputs = {"Batch","Weight"}
//! 1: "BatchPre" in={"Batch"} out={"1_0"}
//! 2: "SpMM_Mean" in={"1_0"} out={"2_0","2_1"}
//! 3: "GEMM" in={"2_0","Weight"} out={"3_0"}
//! 4: "ReLU" in={"3_0"} out={"4_0"}
//! outputs = {"Result"="4_0"}
//! ```
//!
//! Node outputs are labeled `seq_index`; an input label is either a
//! declared input name or the label of an earlier node's output, which
//! makes builder-produced graphs acyclic by construction.

use std::collections::HashSet;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DfgError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("duplicate name {0:?}")]
    DuplicateName(String),
    #[error("invalid name {0:?}")]
    BadName(String),
    #[error("label {0:?} does not resolve to an input or an earlier node output")]
    DanglingLabel(String),
    #[error("node {got} out of order (expected seq {expected})")]
    SeqOutOfOrder { expected: u32, got: u32 },
    #[error("node {seq} declares output {got:?}, expected {expected:?}")]
    BadOutputLabel { seq: u32, expected: String, got: String },
    #[error("node {0} has no outputs")]
    NoOutputs(u32),
    #[error("graph has no outputs")]
    NoGraphOutputs,
}

pub type Result<T> = std::result::Result<T, DfgError>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DfgNode {
    pub seq: u32,
    pub op: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DataflowGraph {
    pub inputs: Vec<String>,
    pub nodes: Vec<DfgNode>,
    /// Result name -> producing label, in declaration order.
    pub outputs: Vec<(String, String)>,
}

fn is_label_shaped(name: &str) -> bool {
    match name.split_once('_') {
        Some((a, b)) => {
            !a.is_empty()
                && !b.is_empty()
                && a.bytes().all(|c| c.is_ascii_digit())
                && b.bytes().all(|c| c.is_ascii_digit())
        }
        None => false,
    }
}

fn check_name(name: &str) -> Result<()> {
    if name.is_empty() || name.contains('"') || name.bytes().any(|c| c.is_ascii_control()) {
        return Err(DfgError::BadName(name.to_string()));
    }
    Ok(())
}

impl DataflowGraph {
    /// Revalidates all structural invariants.
    pub fn validate(&self) -> Result<()> {
        let mut names: HashSet<&str> = HashSet::new();
        for input in &self.inputs {
            check_name(input)?;
            if is_label_shaped(input) {
                return Err(DfgError::BadName(input.clone()));
            }
            if !names.insert(input) {
                return Err(DfgError::DuplicateName(input.clone()));
            }
        }
        let mut arities: Vec<usize> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let expected = (i + 1) as u32;
            if node.seq != expected {
                return Err(DfgError::SeqOutOfOrder {
                    expected,
                    got: node.seq,
                });
            }
            check_name(&node.op)?;
            for label in &node.inputs {
                self.check_label(label, &arities)?;
            }
            if node.outputs.is_empty() {
                return Err(DfgError::NoOutputs(node.seq));
            }
            for (j, out) in node.outputs.iter().enumerate() {
                let expect = format!("{}_{}", node.seq, j);
                if *out != expect {
                    return Err(DfgError::BadOutputLabel {
                        seq: node.seq,
                        expected: expect,
                        got: out.clone(),
                    });
                }
            }
            arities.push(node.outputs.len());
        }
        if self.outputs.is_empty() {
            return Err(DfgError::NoGraphOutputs);
        }
        let mut out_names: HashSet<&str> = HashSet::new();
        for (name, label) in &self.outputs {
            check_name(name)?;
            if names.contains(name.as_str()) || !out_names.insert(name) {
                return Err(DfgError::DuplicateName(name.clone()));
            }
            self.check_label(label, &arities)?;
        }
        Ok(())
    }

    fn check_label(&self, label: &str, arities: &[usize]) -> Result<()> {
        if self.inputs.iter().any(|i| i == label) {
            return Ok(());
        }
        if let Some((seq, idx)) = parse_label(label) {
            if seq >= 1 && (seq as usize) <= arities.len() && (idx as usize) < arities[seq as usize - 1]
            {
                return Ok(());
            }
        }
        Err(DfgError::DanglingLabel(label.to_string()))
    }

    /// Execution order. Ascending seq is already topological because
    /// labels only reference earlier nodes; this verifies it.
    pub fn toposort(&self) -> Vec<u32> {
        debug_assert!(self.validate().is_ok());
        self.nodes.iter().map(|n| n.seq).collect()
    }

    /// Canonical markup serialization: one byte stream per graph.
    pub fn save(&self) -> String {
        let mut out = String::new();
        out.push_str("inputs = {");
        push_str_list(&mut out, self.inputs.iter());
        out.push_str("}\n");
        for node in &self.nodes {
            out.push_str(&format!("{}: \"{}\" in={{", node.seq, node.op));
            push_str_list(&mut out, node.inputs.iter());
            out.push_str("} out={");
            push_str_list(&mut out, node.outputs.iter());
            out.push_str("}\n");
        }
        out.push_str("outputs = {");
        for (i, (name, label)) in self.outputs.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            out.push_str(&format!("\"{name}\"=\"{label}\""));
        }
        out.push_str("}\n");
        out
    }

    /// Parses and validates a markup text.
    pub fn load(text: &str) -> Result<Self> {
        let mut inputs: Option<Vec<String>> = None;
        let mut outputs: Option<Vec<(String, String)>> = None;
        let mut nodes: Vec<DfgNode> = Vec::new();

        for (lineno, raw) in text.lines().enumerate() {
            let lineno = lineno + 1;
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            };
            if line.trim().is_empty() {
                continue;
            }
            let mut lex = Lexer::new(line, lineno);
            match lex.peek()? {
                Tok::Ident(word) if word == "inputs" => {
                    lex.next_tok()?;
                    lex.expect(Tok::Eq)?;
                    let list = lex.str_list()?;
                    lex.end()?;
                    if inputs.replace(list).is_some() {
                        return Err(lex.err("duplicate inputs line"));
                    }
                }
                Tok::Ident(word) if word == "outputs" => {
                    lex.next_tok()?;
                    lex.expect(Tok::Eq)?;
                    let map = lex.str_map()?;
                    lex.end()?;
                    if outputs.replace(map).is_some() {
                        return Err(lex.err("duplicate outputs line"));
                    }
                }
                Tok::Int(_) => {
                    let seq = match lex.next_tok()? {
                        Tok::Int(v) => v,
                        _ => unreachable!(),
                    };
                    lex.expect(Tok::Colon)?;
                    let op = lex.string()?;
                    lex.keyword("in")?;
                    lex.expect(Tok::Eq)?;
                    let ins = lex.str_list()?;
                    lex.keyword("out")?;
                    lex.expect(Tok::Eq)?;
                    let outs = lex.str_list()?;
                    lex.end()?;
                    nodes.push(DfgNode {
                        seq,
                        op,
                        inputs: ins,
                        outputs: outs,
                    });
                }
                _ => return Err(lex.err("expected 'inputs', 'outputs' or a node line")),
            }
        }

        let graph = DataflowGraph {
            inputs: inputs.unwrap_or_default(),
            nodes,
            outputs: outputs.ok_or(DfgError::NoGraphOutputs)?,
        };
        graph.validate()?;
        Ok(graph)
    }
}

pub fn parse_label(label: &str) -> Option<(u32, u32)> {
    let (a, b) = label.split_once('_')?;
    Some((a.parse().ok()?, b.parse().ok()?))
}

fn push_str_list<'a>(out: &mut String, items: impl Iterator<Item = &'a String>) {
    for (i, item) in items.enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push('"');
        out.push_str(item);
        out.push('"');
    }
}

// ----------------------------------------------------------------------
// Builder
// ----------------------------------------------------------------------

/// Accumulates a graph through createIn/createOp/createOut calls; each
/// op receives the next sequence number.
#[derive(Debug, Default)]
pub struct DfgBuilder {
    graph: DataflowGraph,
}

impl DfgBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn create_in(&mut self, name: &str) -> Result<&mut Self> {
        check_name(name)?;
        if is_label_shaped(name) {
            return Err(DfgError::BadName(name.to_string()));
        }
        if self.graph.inputs.iter().any(|i| i == name) {
            return Err(DfgError::DuplicateName(name.to_string()));
        }
        self.graph.inputs.push(name.to_string());
        Ok(self)
    }

    /// Adds a node and returns its output labels.
    pub fn create_op(
        &mut self,
        op: &str,
        in_labels: &[&str],
        out_arity: usize,
    ) -> Result<Vec<String>> {
        check_name(op)?;
        let seq = (self.graph.nodes.len() + 1) as u32;
        let arities: Vec<usize> = self.graph.nodes.iter().map(|n| n.outputs.len()).collect();
        for label in in_labels {
            self.graph.check_label(label, &arities)?;
        }
        if out_arity == 0 {
            return Err(DfgError::NoOutputs(seq));
        }
        let outputs: Vec<String> = (0..out_arity).map(|i| format!("{seq}_{i}")).collect();
        self.graph.nodes.push(DfgNode {
            seq,
            op: op.to_string(),
            inputs: in_labels.iter().map(|s| s.to_string()).collect(),
            outputs: outputs.clone(),
        });
        Ok(outputs)
    }

    pub fn create_out(&mut self, name: &str, label: &str) -> Result<&mut Self> {
        check_name(name)?;
        if self.graph.inputs.iter().any(|i| i == name)
            || self.graph.outputs.iter().any(|(n, _)| n == name)
        {
            return Err(DfgError::DuplicateName(name.to_string()));
        }
        let arities: Vec<usize> = self.graph.nodes.iter().map(|n| n.outputs.len()).collect();
        self.graph.check_label(label, &arities)?;
        self.graph
            .outputs
            .push((name.to_string(), label.to_string()));
        Ok(self)
    }

    pub fn build(self) -> Result<DataflowGraph> {
        self.graph.validate()?;
        Ok(self.graph)
    }
}

// ----------------------------------------------------------------------
// Lexer
// ----------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
enum Tok {
    Ident(String),
    Str(String),
    Int(u32),
    Colon,
    Eq,
    LBrace,
    RBrace,
    Comma,
    End,
}

struct Lexer<'a> {
    chars: std::iter::Peekable<std::str::Chars<'a>>,
    line: usize,
    lookahead: Option<Tok>,
}

impl<'a> Lexer<'a> {
    fn new(text: &'a str, line: usize) -> Self {
        Self {
            chars: text.chars().peekable(),
            line,
            lookahead: None,
        }
    }

    fn err(&self, msg: impl Into<String>) -> DfgError {
        DfgError::Parse {
            line: self.line,
            msg: msg.into(),
        }
    }

    fn peek(&mut self) -> Result<&Tok> {
        if self.lookahead.is_none() {
            self.lookahead = Some(self.lex()?);
        }
        Ok(self.lookahead.as_ref().unwrap())
    }

    fn next_tok(&mut self) -> Result<Tok> {
        match self.lookahead.take() {
            Some(t) => Ok(t),
            None => self.lex(),
        }
    }

    fn lex(&mut self) -> Result<Tok> {
        while matches!(self.chars.peek(), Some(c) if c.is_whitespace()) {
            self.chars.next();
        }
        let Some(&c) = self.chars.peek() else {
            return Ok(Tok::End);
        };
        match c {
            ':' => {
                self.chars.next();
                Ok(Tok::Colon)
            }
            '=' => {
                self.chars.next();
                Ok(Tok::Eq)
            }
            '{' => {
                self.chars.next();
                Ok(Tok::LBrace)
            }
            '}' => {
                self.chars.next();
                Ok(Tok::RBrace)
            }
            ',' => {
                self.chars.next();
                Ok(Tok::Comma)
            }
            '"' => {
                self.chars.next();
                let mut s = String::new();
                loop {
                    match self.chars.next() {
                        Some('"') => return Ok(Tok::Str(s)),
                        Some(c) => s.push(c),
                        None => return Err(self.err("unterminated string")),
                    }
                }
            }
            c if c.is_ascii_digit() => {
                let mut n = String::new();
                while matches!(self.chars.peek(), Some(c) if c.is_ascii_digit()) {
                    n.push(self.chars.next().unwrap());
                }
                n.parse()
                    .map(Tok::Int)
                    .map_err(|_| self.err(format!("integer {n} out of range")))
            }
            c if c.is_alphanumeric() || c == '_' => {
                let mut s = String::new();
                while matches!(self.chars.peek(), Some(&c) if c.is_alphanumeric() || c == '_') {
                    s.push(self.chars.next().unwrap());
                }
                Ok(Tok::Ident(s))
            }
            other => Err(self.err(format!("unexpected character {other:?}"))),
        }
    }

    fn expect(&mut self, want: Tok) -> Result<()> {
        let got = self.next_tok()?;
        if got != want {
            return Err(self.err(format!("expected {want:?}, found {got:?}")));
        }
        Ok(())
    }

    fn keyword(&mut self, word: &str) -> Result<()> {
        match self.next_tok()? {
            Tok::Ident(w) if w == word => Ok(()),
            other => Err(self.err(format!("expected keyword {word:?}, found {other:?}"))),
        }
    }

    fn string(&mut self) -> Result<String> {
        match self.next_tok()? {
            Tok::Str(s) => Ok(s),
            other => Err(self.err(format!("expected string, found {other:?}"))),
        }
    }

    fn str_list(&mut self) -> Result<Vec<String>> {
        self.expect(Tok::LBrace)?;
        let mut out = Vec::new();
        if *self.peek()? == Tok::RBrace {
            self.next_tok()?;
            return Ok(out);
        }
        loop {
            out.push(self.string()?);
            match self.next_tok()? {
                Tok::Comma => continue,
                Tok::RBrace => return Ok(out),
                other => return Err(self.err(format!("expected ',' or '}}', found {other:?}"))),
            }
        }
    }

    fn str_map(&mut self) -> Result<Vec<(String, String)>> {
        self.expect(Tok::LBrace)?;
        let mut out = Vec::new();
        if *self.peek()? == Tok::RBrace {
            self.next_tok()?;
            return Ok(out);
        }
        loop {
            let name = self.string()?;
            self.expect(Tok::Eq)?;
            let label = self.string()?;
            out.push((name, label));
            match self.next_tok()? {
                Tok::Comma => continue,
                Tok::RBrace => return Ok(out),
                other => return Err(self.err(format!("expected ',' or '}}', found {other:?}"))),
            }
        }
    }

    fn end(&mut self) -> Result<()> {
        match self.next_tok()? {
            Tok::End => Ok(()),
            other => Err(self.err(format!("trailing tokens: {other:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fig7_like() -> DataflowGraph {
        let mut b = DfgBuilder::new();
        b.create_in("Batch").unwrap();
        b.create_in("Weight").unwrap();
        b.create_op("BatchPre", &["Batch"], 1).unwrap();
        b.create_op("SpMM_Mean", &["1_0"], 2).unwrap();
        b.create_op("GEMM", &["2_0", "Weight"], 1).unwrap();
        b.create_op("ReLU", &["3_0"], 1).unwrap();
        b.create_out("Result", "4_0").unwrap();
        b.build().unwrap()
    }

    #[test]
    fn builder_assigns_sequences() {
        let g = fig7_like();
        assert_eq!(g.nodes.len(), 4);
        assert_eq!(g.nodes[2].op, "GEMM");
        assert_eq!(g.nodes[2].inputs, vec!["2_0", "Weight"]);
        assert_eq!(g.toposort(), vec![1, 2, 3, 4]);
    }

    #[test]
    fn save_contains_canonical_node_line() {
        let text = fig7_like().save();
        assert!(
            text.contains("3: \"GEMM\" in={\"2_0\",\"Weight\"} out={\"3_0\"}"),
            "got: {text}"
        );
    }

    #[test]
    fn round_trip_identity() {
        let g = fig7_like();
        let text = g.save();
        let back = DataflowGraph::load(&text).unwrap();
        assert_eq!(back, g);
        assert_eq!(back.save(), text);
    }

    #[test]
    fn load_is_whitespace_insensitive_and_skips_comments() {
        let text = "# a comment\ninputs = { \"A\" }\n1 :  \"Id\"  in = { \"A\" }  out = { \"1_0\" }\noutputs = { \"R\" = \"1_0\" }\n";
        let g = DataflowGraph::load(text).unwrap();
        assert_eq!(g.inputs, vec!["A"]);
        assert_eq!(g.outputs, vec![("R".into(), "1_0".into())]);
    }

    #[test]
    fn passthrough_graph_is_valid() {
        let mut b = DfgBuilder::new();
        b.create_in("X").unwrap();
        b.create_out("Y", "X").unwrap();
        let g = b.build().unwrap();
        assert_eq!(g.toposort(), Vec::<u32>::new());
    }

    #[test]
    fn dangling_label_rejected() {
        let mut b = DfgBuilder::new();
        b.create_in("A").unwrap();
        b.create_op("Id", &["A"], 1).unwrap();
        assert_eq!(
            b.create_out("R", "9_0").unwrap_err(),
            DfgError::DanglingLabel("9_0".into())
        );
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut b = DfgBuilder::new();
        b.create_in("A").unwrap();
        assert_eq!(
            b.create_in("A").unwrap_err(),
            DfgError::DuplicateName("A".into())
        );
    }

    #[test]
    fn out_of_order_seq_rejected() {
        let text = "inputs = {\"A\"}\n2: \"Id\" in={\"A\"} out={\"2_0\"}\noutputs = {\"R\"=\"2_0\"}\n";
        assert_eq!(
            DataflowGraph::load(text).unwrap_err(),
            DfgError::SeqOutOfOrder {
                expected: 1,
                got: 2
            }
        );
    }

    #[test]
    fn parse_error_carries_line_number() {
        let text = "inputs = {\"A\"}\n1: \"Id\" in={\"A\" out={\"1_0\"}\noutputs = {\"R\"=\"1_0\"}\n";
        match DataflowGraph::load(text).unwrap_err() {
            DfgError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn label_shaped_input_names_rejected() {
        let mut b = DfgBuilder::new();
        assert!(matches!(b.create_in("2_0"), Err(DfgError::BadName(_))));
    }
}
