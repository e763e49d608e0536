//! Dependency trees, the two parser backends, and span expansion.

use std::collections::BTreeSet;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::grammar::RawToken;
use crate::world::{Color, Relation, Shape, SyntheticScene};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepTree {
    /// Head of each token; `None` for the root.
    pub heads: Vec<Option<usize>>,
    pub labels: Vec<String>,
}

impl DepTree {
    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    /// Exactly one root, heads in range, no cycles.
    pub fn check(&self) -> Result<(), PipelineError> {
        let n = self.heads.len();
        if self.labels.len() != n {
            return Err(PipelineError::MalformedTree(format!("{} heads but {} labels", n, self.labels.len())));
        }
        let roots = self.heads.iter().filter(|h| h.is_none()).count();
        if n > 0 && roots != 1 {
            return Err(PipelineError::MalformedTree(format!("{roots} roots")));
        }
        for (i, h) in self.heads.iter().enumerate() {
            if let Some(h) = *h {
                if h >= n {
                    return Err(PipelineError::MalformedTree(format!("token {i} has orphan head {h}")));
                }
            }
            // Walking up must reach the root within n steps.
            let mut cur = i;
            for _ in 0..=n {
                match self.heads[cur] {
                    Some(h) => cur = h,
                    None => break,
                }
            }
            if self.heads[cur].is_some() {
                return Err(PipelineError::MalformedTree(format!("cycle through token {i}")));
            }
        }
        Ok(())
    }

    pub fn children(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.heads.iter().enumerate().filter(move |(_, h)| **h == Some(i)).map(|(c, _)| c)
    }
}

/// Produces a dependency tree over caption tokens.
pub trait Parser {
    fn parse(&self, tokens: &[RawToken]) -> Result<DepTree, PipelineError>;
}

/// Child relations through which a grounded word expands.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpansionRules {
    pub eligible: Vec<String>,
    /// Relation of a prepositional object to its preposition; followed only
    /// below an eligible `prep` edge so expansion stays inside the noun phrase.
    pub prep_object: String,
}

impl Default for ExpansionRules {
    fn default() -> Self {
        Self {
            eligible: ["det", "amod", "compound", "prep"].map(String::from).to_vec(),
            prep_object: "pobj".into(),
        }
    }
}

fn is_noun(t: &str) -> bool {
    Shape::ALL.iter().any(|s| s.word() == t) || matches!(t, "object" | "thing" | "image" | "picture")
}

fn is_color(t: &str) -> bool {
    Color::ALL.iter().any(|c| c.word() == t)
}

fn is_det(t: &str) -> bool {
    matches!(t, "the" | "a")
}

/// Rule-based parser for the closed caption and question templates.
#[derive(Clone, Debug, Default)]
pub struct TemplateParser;

impl Parser for TemplateParser {
    fn parse(&self, tokens: &[RawToken]) -> Result<DepTree, PipelineError> {
        let n = tokens.len();
        let words: Vec<&str> = tokens.iter().map(|t| t.text.as_str()).collect();
        let mut heads: Vec<Option<usize>> = vec![None; n];
        let mut labels = vec![String::new(); n];
        if n == 0 {
            return Ok(DepTree { heads, labels });
        }
        let root = words.iter().position(|w| *w == "is").unwrap_or(0);
        labels[root] = "root".into();

        // Noun phrases: determiners and colors attach to the next noun.
        let mut noun_of = vec![None; n];
        let mut i = 0;
        while i < n {
            if is_det(words[i]) || is_color(words[i]) {
                let mut j = i;
                while j < n && (is_det(words[j]) || is_color(words[j])) {
                    j += 1;
                }
                if j < n && is_noun(words[j]) {
                    for k in i..j {
                        noun_of[k] = Some(j);
                    }
                    i = j;
                    continue;
                }
            }
            i += 1;
        }

        let mut last_prep: Option<usize> = None;
        for i in 0..n {
            if i == root {
                continue;
            }
            let w = words[i];
            let (h, l) = if let Some(noun) = noun_of[i] {
                (noun, if is_det(w) { "det" } else { "amod" })
            } else if is_noun(w) {
                match last_prep {
                    Some(p) => (p, "pobj"),
                    None if i < root => (root, "nsubj"),
                    None => (root, "dep"),
                }
            } else if w == "of" && i > 0 && matches!(words[i - 1], "left" | "right") {
                last_prep = Some(i);
                (i - 1, "prep")
            } else if matches!(w, "left" | "right" | "above" | "below" | "on") {
                last_prep = Some(i);
                (root, "prep")
            } else if matches!(w, ":" | "?" | "." | ",") {
                (root, "punct")
            } else {
                (root, "dep")
            };
            heads[i] = Some(h);
            labels[i] = l.into();
        }
        let tree = DepTree { heads, labels };
        tree.check()?;
        Ok(tree)
    }
}

/// Builds the exact tree of a generated scene caption from its template.
#[derive(Clone, Debug)]
pub struct OracleParser<'a> {
    pub scene: &'a SyntheticScene,
}

impl Parser for OracleParser<'_> {
    fn parse(&self, tokens: &[RawToken]) -> Result<DepTree, PipelineError> {
        let rel = self.scene.fact().relation;
        // the c s is REL the c s
        let rel_len = if matches!(rel, Relation::LeftOf | Relation::RightOf) { 2 } else { 1 };
        let n = 6 + rel_len + 1;
        if tokens.len() != n {
            return Err(PipelineError::Parse(format!("expected {n} tokens for a scene caption, found {}", tokens.len())));
        }
        let (subj, is, r0) = (2, 3, 4);
        let pobj_head = r0 + rel_len - 1;
        let obj = n - 1;
        let mut heads = vec![Some(subj), Some(subj), Some(is), None];
        let mut labels: Vec<String> = ["det", "amod", "nsubj", "root"].map(String::from).to_vec();
        heads.push(Some(is));
        labels.push("prep".into());
        if rel_len == 2 {
            heads.push(Some(r0));
            labels.push("prep".into());
        }
        heads.extend([Some(obj), Some(obj), Some(pobj_head)]);
        labels.extend(["det", "amod", "pobj"].map(String::from));
        let tree = DepTree { heads, labels };
        tree.check()?;
        Ok(tree)
    }
}

/// Expands each group of grounded words into one contiguous token span.
///
/// Every word expands through eligible child relations without entering
/// another group's words; the group's span is the contiguous block of its
/// expansion containing its first grounded word.
pub fn expand_spans(tree: &DepTree, groups: &[Vec<usize>], rules: &ExpansionRules) -> Result<Vec<Range<usize>>, PipelineError> {
    tree.check()?;
    let n = tree.len();
    let mut owner = vec![None; n];
    for (g, words) in groups.iter().enumerate() {
        for &w in words {
            if w >= n {
                return Err(PipelineError::Parse(format!("grounded token {w} outside the parse")));
            }
            owner[w] = Some(g);
        }
    }
    let eligible = |l: &str| rules.eligible.iter().any(|e| e == l);
    let mut spans = Vec::with_capacity(groups.len());
    for (g, words) in groups.iter().enumerate() {
        let mut set = BTreeSet::new();
        let mut stack: Vec<(usize, bool)> = words.iter().map(|&w| (w, false)).collect();
        while let Some((t, under_prep)) = stack.pop() {
            if !set.insert(t) {
                continue;
            }
            for c in tree.children(t) {
                if owner[c].is_some_and(|o| o != g) {
                    continue;
                }
                let l = tree.labels[c].as_str();
                if eligible(l) || (under_prep && l == rules.prep_object) {
                    stack.push((c, under_prep || l == "prep"));
                }
            }
        }
        let Some(&anchor) = words.first() else {
            return Err(PipelineError::Parse(format!("group {g} has no words")));
        };
        let (mut lo, mut hi) = (anchor, anchor);
        while lo > 0 && set.contains(&(lo - 1)) {
            lo -= 1;
        }
        while hi + 1 < n && set.contains(&(hi + 1)) {
            hi += 1;
        }
        spans.push(lo..hi + 1);
    }
    Ok(spans)
}
