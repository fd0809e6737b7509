//! Selection-set queries: `{ process(id: j0.p1) { kind siblings { processes { memory_rss } } } }`.

use std::fmt;

use seastar_core::entity::{EntityId, Kind};
use seastar_core::model::Relation;
use serde_json::{Map, Value};

use crate::error::ApiError;
use crate::view::{CallerIdentity, Context, View};

/// Fields of a resource object selectable by name.
pub const FIELDS: [&str; 8] = [
    "timestamp",
    "parent_node",
    "child_nodes",
    "sibling_nodes",
    "attributes",
    "kind",
    "id",
    "labels",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Target {
    Id(String),
    SelfRef,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Query {
    pub kind: Kind,
    pub target: Target,
    pub selection: Vec<Selection>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Selection {
    Field(String),
    Metric(String),
    Parent(Vec<Selection>),
    Context(Vec<Selection>),
    /// `children`/`siblings` grouped by plural kind.
    Related(Relation, Vec<(Kind, Vec<Selection>)>),
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Open,
    Close,
    LParen,
    RParen,
    Colon,
    Word(String),
    Str(String),
    End,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Open => f.write_str("`{`"),
            Tok::Close => f.write_str("`}`"),
            Tok::LParen => f.write_str("`(`"),
            Tok::RParen => f.write_str("`)`"),
            Tok::Colon => f.write_str("`:`"),
            Tok::Word(w) => write!(f, "`{w}`"),
            Tok::Str(s) => write!(f, "\"{s}\""),
            Tok::End => f.write_str("end of input"),
        }
    }
}

fn word_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '/' | '~' | '-')
}

fn is_ident(w: &str) -> bool {
    let mut chars = w.chars();
    chars.next().is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn err(position: usize, message: impl Into<String>) -> ApiError {
    ApiError::Parse {
        position,
        message: message.into(),
    }
}

/// Tokens with their 1-based character positions.
fn lex(text: &str) -> Result<Vec<(Tok, usize)>, ApiError> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let pos = i + 1;
        match c {
            c if c.is_whitespace() || c == ',' => i += 1,
            '#' => {
                while i < chars.len() && chars[i] != '\n' {
                    i += 1;
                }
            }
            '{' | '}' | '(' | ')' | ':' => {
                out.push((
                    match c {
                        '{' => Tok::Open,
                        '}' => Tok::Close,
                        '(' => Tok::LParen,
                        ')' => Tok::RParen,
                        _ => Tok::Colon,
                    },
                    pos,
                ));
                i += 1;
            }
            '"' => {
                let mut s = String::new();
                i += 1;
                loop {
                    match chars.get(i) {
                        None => return Err(err(pos, "unterminated string")),
                        Some('"') => break,
                        Some('\\') => {
                            let Some(&next) = chars.get(i + 1) else {
                                return Err(err(i + 1, "dangling escape"));
                            };
                            s.push(next);
                            i += 2;
                        }
                        Some(&ch) => {
                            s.push(ch);
                            i += 1;
                        }
                    }
                }
                i += 1;
                out.push((Tok::Str(s), pos));
            }
            c if word_char(c) => {
                let start = i;
                while i < chars.len() && word_char(chars[i]) {
                    i += 1;
                }
                out.push((Tok::Word(chars[start..i].iter().collect()), pos));
            }
            other => return Err(err(pos, format!("unexpected character `{other}`"))),
        }
    }
    out.push((Tok::End, chars.len() + 1));
    Ok(out)
}

struct Parser {
    toks: Vec<(Tok, usize)>,
    at: usize,
}

impl Parser {
    fn peek(&self) -> &(Tok, usize) {
        &self.toks[self.at]
    }

    fn next(&mut self) -> (Tok, usize) {
        let t = self.toks[self.at].clone();
        if self.at + 1 < self.toks.len() {
            self.at += 1;
        }
        t
    }

    fn expect(&mut self, want: Tok) -> Result<usize, ApiError> {
        let (tok, pos) = self.next();
        if tok == want {
            Ok(pos)
        } else {
            Err(err(pos, format!("expected {want}, found {tok}")))
        }
    }

    fn ident(&mut self) -> Result<(String, usize), ApiError> {
        match self.next() {
            (Tok::Word(w), pos) if is_ident(&w) => Ok((w, pos)),
            (tok, pos) => Err(err(pos, format!("expected a name, found {tok}"))),
        }
    }

    fn query(&mut self) -> Result<Query, ApiError> {
        self.expect(Tok::Open)?;
        let (name, pos) = self.ident()?;
        let kind: Kind = name
            .parse()
            .map_err(|_| err(pos, format!("unknown resource type `{name}`")))?;
        self.expect(Tok::LParen)?;
        let (arg, pos) = self.ident()?;
        if arg != "id" {
            return Err(err(pos, format!("unknown argument `{arg}`")));
        }
        self.expect(Tok::Colon)?;
        let target = match self.next() {
            (Tok::Word(w), _) if w == "self" => Target::SelfRef,
            (Tok::Word(w), _) | (Tok::Str(w), _) => Target::Id(w),
            (tok, pos) => return Err(err(pos, format!("expected an id, found {tok}"))),
        };
        self.expect(Tok::RParen)?;
        let selection = self.block()?;
        self.expect(Tok::Close)?;
        match self.peek() {
            (Tok::End, _) => Ok(Query {
                kind,
                target,
                selection,
            }),
            (tok, pos) => Err(err(*pos, format!("unexpected {tok} after query"))),
        }
    }

    fn block(&mut self) -> Result<Vec<Selection>, ApiError> {
        self.expect(Tok::Open)?;
        let mut out = Vec::new();
        while self.peek().0 != Tok::Close {
            out.push(self.selection()?);
        }
        self.next();
        Ok(out)
    }

    fn selection(&mut self) -> Result<Selection, ApiError> {
        let (name, pos) = self.ident()?;
        let has_block = self.peek().0 == Tok::Open;
        let relation = match name.as_str() {
            "children" => Some(Relation::Children),
            "siblings" => Some(Relation::Siblings),
            _ => None,
        };
        match (name.as_str(), has_block) {
            ("parent", true) => Ok(Selection::Parent(self.block()?)),
            ("context", true) => Ok(Selection::Context(self.block()?)),
            (_, true) if relation.is_some() => {
                self.expect(Tok::Open)?;
                let mut groups = Vec::new();
                while self.peek().0 != Tok::Close {
                    let (plural, ppos) = self.ident()?;
                    let kind = Kind::from_plural(&plural)
                        .ok_or_else(|| err(ppos, format!("expected a plural kind, found `{plural}`")))?;
                    groups.push((kind, self.block()?));
                }
                self.next();
                Ok(Selection::Related(relation.expect("checked"), groups))
            }
            ("parent" | "context" | "children" | "siblings", false) => {
                Err(err(pos, format!("`{name}` needs a selection block")))
            }
            (_, true) => Err(err(pos, format!("`{name}` takes no selection block"))),
            (f, false) if FIELDS.contains(&f) => Ok(Selection::Field(name)),
            (_, false) => Ok(Selection::Metric(name)),
        }
    }
}

pub fn parse(text: &str) -> Result<Query, ApiError> {
    Parser { toks: lex(text)?, at: 0 }.query()
}

impl Query {
    /// The id the query starts from, for cache partitioning.
    pub fn root_id(&self) -> Option<&str> {
        match &self.target {
            Target::Id(id) => Some(id),
            Target::SelfRef => None,
        }
    }
}

/// Runs `query` and returns the selection result of its root entity.
pub fn execute(view: &View<'_>, query: &Query, who: Option<&CallerIdentity>) -> Result<Value, ApiError> {
    let root = match &query.target {
        Target::Id(id) => view.resolve(query.kind, id)?,
        Target::SelfRef => {
            let who = who.ok_or_else(|| ApiError::NoIdentity("query uses `self`".into()))?;
            view.resolve_self(query.kind, who)?
        }
    };
    select(view, &root, &query.selection)
}

fn select(view: &View<'_>, id: &EntityId, selection: &[Selection]) -> Result<Value, ApiError> {
    let mut out = Map::new();
    let mut object = None;
    for s in selection {
        match s {
            Selection::Field(name) => {
                if object.is_none() {
                    object = Some(serde_json::to_value(view.render(id)?).map_err(|e| ApiError::Internal(e.to_string()))?);
                }
                let value = object.as_ref().and_then(|o| o.get(name)).cloned().unwrap_or(Value::Null);
                out.insert(name.clone(), value);
            }
            Selection::Metric(name) => {
                out.insert(name.clone(), view.latest(id, name).map_or(Value::Null, Value::from));
            }
            Selection::Parent(inner) => {
                let value = match view.model.parent_of(id) {
                    Some(p) => select(view, &p.clone(), inner)?,
                    None => Value::Null,
                };
                out.insert("parent".into(), value);
            }
            Selection::Context(inner) => {
                let value = match view.context(id)? {
                    Context::One(e) => select(view, &e, inner)?,
                    Context::Many(list) => keyed(view, &list, inner)?,
                };
                out.insert("context".into(), value);
            }
            Selection::Related(relation, groups) => {
                let related = view.navigate(id, *relation)?;
                let mut grouped = Map::new();
                for (kind, inner) in groups {
                    let members: Vec<EntityId> = related.iter().filter(|e| e.kind() == Some(*kind)).cloned().collect();
                    grouped.insert(kind.plural().to_string(), keyed(view, &members, inner)?);
                }
                let name = if *relation == Relation::Children { "children" } else { "siblings" };
                out.insert(name.into(), Value::Object(grouped));
            }
        }
    }
    Ok(Value::Object(out))
}

fn keyed(view: &View<'_>, ids: &[EntityId], inner: &[Selection]) -> Result<Value, ApiError> {
    let mut map = Map::new();
    for e in ids {
        map.insert(e.to_string(), select(view, e, inner)?);
    }
    Ok(Value::Object(map))
}
