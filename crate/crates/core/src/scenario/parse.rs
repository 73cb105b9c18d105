use std::collections::{BTreeMap, BTreeSet};

use crate::channel::{ChangeKind, ChannelView, Flag, Grants, ModeChange, NoticeKind, Topic};
use crate::desync::Collide;
use crate::topology::{Client, ClientId, Link, ServerId, Ticks, TopologyError};

use super::{
    mode_change, Action, Assertion, Check, DetectOutcome, ScalarField, Scenario, Servers, SetField,
    SetOp, Timed,
};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseErrorKind {
    #[error("syntax error: {0}")]
    SyntaxError(String),
    #[error("unknown name `{0}`")]
    UnknownName(String),
    #[error("action at t{at} comes after one at t{previous}")]
    TimeNonMonotonic { at: Ticks, previous: Ticks },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{line}:{col}: {kind}")]
pub struct ParseError {
    pub line: usize,
    pub col: usize,
    pub kind: ParseErrorKind,
}

#[derive(Debug, Clone, Copy)]
struct Tok<'a> {
    text: &'a str,
    col: usize,
}

type PResult<T> = Result<T, ParseError>;

fn tokenize(line: &str, lineno: usize) -> PResult<Vec<Tok<'_>>> {
    let mut out = Vec::new();
    let bytes = line.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i].is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        if bytes[i] == b'"' {
            i += 1;
            let mut escaped = false;
            loop {
                if i >= bytes.len() {
                    return Err(ParseError {
                        line: lineno,
                        col: start + 1,
                        kind: ParseErrorKind::SyntaxError("unterminated string".into()),
                    });
                }
                match bytes[i] {
                    b'\\' if !escaped => escaped = true,
                    b'"' if !escaped => break,
                    _ => escaped = false,
                }
                i += 1;
            }
            i += 1;
        } else {
            while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
                i += 1;
            }
        }
        out.push(Tok {
            text: &line[start..i],
            col: start + 1,
        });
    }
    Ok(out)
}

struct Parser<'a> {
    line: &'a str,
    lineno: usize,
    toks: Vec<Tok<'a>>,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn err<T>(&self, col: usize, kind: ParseErrorKind) -> PResult<T> {
        Err(ParseError {
            line: self.lineno,
            col,
            kind,
        })
    }

    fn syntax<T>(&self, col: usize, msg: impl Into<String>) -> PResult<T> {
        self.err(col, ParseErrorKind::SyntaxError(msg.into()))
    }

    fn end_col(&self) -> usize {
        self.line.trim_end().len() + 1
    }

    fn next(&mut self, what: &str) -> PResult<Tok<'a>> {
        match self.toks.get(self.pos) {
            Some(t) => {
                self.pos += 1;
                Ok(*t)
            }
            None => self.syntax(self.end_col(), format!("expected {what}")),
        }
    }

    fn peek(&self) -> Option<Tok<'a>> {
        self.toks.get(self.pos).copied()
    }

    fn eat(&mut self, word: &str) -> bool {
        if self.peek().is_some_and(|t| t.text == word) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, word: &str) -> PResult<()> {
        let t = self.next(&format!("`{word}`"))?;
        if t.text == word {
            Ok(())
        } else {
            self.syntax(t.col, format!("expected `{word}`, found `{}`", t.text))
        }
    }

    fn done(&self) -> PResult<()> {
        match self.peek() {
            None => Ok(()),
            Some(t) => self.syntax(t.col, format!("unexpected `{}`", t.text)),
        }
    }

    /// Everything from the next token to the end of the line.
    fn rest(&mut self, what: &str) -> PResult<&'a str> {
        let t = self.next(what)?;
        self.pos = self.toks.len();
        Ok(self.line[t.col - 1..].trim_end())
    }

    fn number<T: std::str::FromStr>(&mut self, what: &str) -> PResult<T> {
        let t = self.next(what)?;
        match t.text.parse() {
            Ok(n) => Ok(n),
            Err(_) => self.syntax(t.col, format!("expected {what}, found `{}`", t.text)),
        }
    }

    fn string(&mut self, what: &str) -> PResult<String> {
        let t = self.next(what)?;
        if t.text.starts_with('"') {
            match serde_json::from_str(t.text) {
                Ok(s) => Ok(s),
                Err(e) => self.syntax(t.col, format!("bad string: {e}")),
            }
        } else {
            Ok(t.text.to_owned())
        }
    }

    fn channel_next(&mut self, what: &str) -> PResult<String> {
        let t = self.next(what)?;
        channel_name(self, t)
    }

    fn client_next(&mut self, names: &Names, what: &str) -> PResult<ClientId> {
        let t = self.next(what)?;
        names.client(self, t)
    }

    fn clients_next(&mut self, names: &Names, what: &str) -> PResult<BTreeSet<ClientId>> {
        let t = self.next(what)?;
        names.clients(self, t)
    }

    fn server_next(&mut self, names: &Names, what: &str) -> PResult<ServerId> {
        let t = self.next(what)?;
        names.server(self, t)
    }

    fn servers_next(&mut self, names: &Names, what: &str) -> PResult<Servers> {
        let t = self.next(what)?;
        names.servers(self, t)
    }

    fn link_next(&mut self, names: &Names, what: &str) -> PResult<Link> {
        let t = self.next(what)?;
        names.link(self, t)
    }
}

#[derive(Default)]
struct Names {
    servers: BTreeSet<ServerId>,
    clients: BTreeSet<ClientId>,
    links: BTreeMap<Link, usize>,
}

impl Names {
    fn server(&self, p: &Parser<'_>, t: Tok<'_>) -> PResult<ServerId> {
        let s = ServerId::from(t.text);
        if self.servers.contains(&s) {
            Ok(s)
        } else {
            p.err(t.col, ParseErrorKind::UnknownName(t.text.into()))
        }
    }

    fn client(&self, p: &Parser<'_>, t: Tok<'_>) -> PResult<ClientId> {
        let c = ClientId::from(t.text);
        if self.clients.contains(&c) {
            Ok(c)
        } else {
            p.err(t.col, ParseErrorKind::UnknownName(t.text.into()))
        }
    }

    fn clients(&self, p: &Parser<'_>, t: Tok<'_>) -> PResult<BTreeSet<ClientId>> {
        if t.text == "-" {
            return Ok(BTreeSet::new());
        }
        t.text
            .split(',')
            .map(|n| {
                let c = ClientId::from(n);
                if self.clients.contains(&c) {
                    Ok(c)
                } else {
                    p.err(t.col, ParseErrorKind::UnknownName(n.into()))
                }
            })
            .collect()
    }

    fn link_pair(&self, p: &Parser<'_>, t: Tok<'_>) -> PResult<(ServerId, ServerId)> {
        let Some((x, y)) = t.text.split_once('-') else {
            return p.syntax(
                t.col,
                format!("expected a link like A-B, found `{}`", t.text),
            );
        };
        for n in [x, y] {
            if !self.servers.contains(&ServerId::from(n)) {
                return p.err(t.col, ParseErrorKind::UnknownName(n.into()));
            }
        }
        Ok((x.into(), y.into()))
    }

    fn link(&self, p: &Parser<'_>, t: Tok<'_>) -> PResult<Link> {
        let (x, y) = self.link_pair(p, t)?;
        let link = Link::new(x, y);
        if self.links.contains_key(&link) {
            Ok(link)
        } else {
            p.err(t.col, ParseErrorKind::UnknownName(t.text.into()))
        }
    }

    fn servers(&self, p: &Parser<'_>, t: Tok<'_>) -> PResult<Servers> {
        let Some(list) = t.text.strip_prefix('@') else {
            return p.syntax(t.col, format!("expected @SERVER, found `{}`", t.text));
        };
        if list == "*" {
            return Ok(Servers::All);
        }
        list.split(',')
            .map(|n| {
                let s = ServerId::from(n);
                if self.servers.contains(&s) {
                    Ok(s)
                } else {
                    p.err(t.col, ParseErrorKind::UnknownName(n.into()))
                }
            })
            .collect::<PResult<Vec<_>>>()
            .map(Servers::List)
    }
}

fn channel_name(p: &Parser<'_>, t: Tok<'_>) -> PResult<String> {
    if t.text.len() > 1 && matches!(t.text.as_bytes()[0], b'#' | b'!' | b'&' | b'+') {
        Ok(t.text.to_owned())
    } else {
        p.syntax(
            t.col,
            format!("expected a channel name, found `{}`", t.text),
        )
    }
}

fn time_prefix(p: &Parser<'_>, t: Tok<'_>, s: &str) -> PResult<Ticks> {
    match s.parse() {
        Ok(n) => Ok(n),
        Err(_) => p.syntax(t.col, format!("bad time `{}`", t.text)),
    }
}

/// Parses scenario text. Declarations must precede their first use.
pub fn parse_scenario(text: &str) -> Result<Scenario, ParseError> {
    let mut sc = Scenario::default();
    let mut names = Names::default();
    let mut last_time: Option<Ticks> = None;
    let mut servers_line = 0;
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with("//") {
            continue;
        }
        let mut p = Parser {
            line: raw,
            lineno,
            toks: tokenize(raw, lineno)?,
            pos: 0,
        };
        let head = p.next("a directive")?;
        let postfix = match p.toks.last() {
            Some(last)
                if matches!(head.text, "split" | "join" | "join-link")
                    && last.text.starts_with('@') =>
            {
                p.toks.pop()
            }
            _ => None,
        };
        if let Some(last) = postfix {
            p.pos = 0;
            p.toks.insert(0, last);
        }
        let head = if postfix.is_some() {
            p.next("a time")?
        } else {
            head
        };
        if let Some(t) = head.text.strip_prefix('@') {
            let at = time_prefix(&p, head, t)?;
            if let Some(prev) = last_time {
                if at < prev {
                    return p.err(
                        head.col,
                        ParseErrorKind::TimeNonMonotonic { at, previous: prev },
                    );
                }
            }
            last_time = Some(at);
            let action = parse_action(&mut p, &names)?;
            sc.actions.push(Timed { at, action });
            continue;
        }
        if head.text == "assert" || head.text.starts_with("assert@") {
            let at = match head.text.strip_prefix("assert@") {
                Some(t) => Some(time_prefix(&p, head, t)?),
                None => None,
            };
            let check = parse_check(&mut p, &names)?;
            sc.assertions.push(Assertion { at, check });
            continue;
        }
        match head.text {
            "name" => sc.name = Some(p.rest("a name")?.to_owned()),
            "summary" => sc.summary = Some(p.rest("a summary")?.to_owned()),
            "servers" | "chain" => {
                if !sc.servers.is_empty() {
                    return p.syntax(head.col, "servers declared twice");
                }
                servers_line = lineno;
                let mut list = Vec::new();
                while let Some(t) = p.peek() {
                    if t.text == "latency" {
                        break;
                    }
                    p.pos += 1;
                    let s = ServerId::from(t.text);
                    if !names.servers.insert(s.clone()) {
                        return p.syntax(t.col, format!("duplicate server `{}`", t.text));
                    }
                    list.push(s);
                }
                if list.is_empty() {
                    return p.syntax(p.end_col(), "expected server names");
                }
                if head.text == "chain" {
                    let lat = if p.eat("latency") {
                        p.number("a latency")?
                    } else {
                        1
                    };
                    for w in list.windows(2) {
                        names.links.insert(Link::new(&w[0], &w[1]), lineno);
                        sc.links.push((w[0].clone(), w[1].clone(), lat));
                    }
                }
                p.done()?;
                sc.servers = list;
            }
            "link" => {
                let t = p.next("a link")?;
                let (x, y) = names.link_pair(&p, t)?;
                // `link A-B 3` and `link A-B latency 3` are both accepted.
                p.eat("latency");
                let lat = if p.peek().is_some() {
                    p.number("a latency")?
                } else {
                    1
                };
                p.done()?;
                names.links.insert(Link::new(&x, &y), lineno);
                sc.links.push((x, y, lat));
            }
            "client" => {
                let t = p.next("a nick")?;
                let nick = t.text;
                let h = p.next("@HOME")?;
                let Some(home) = h.text.strip_prefix('@') else {
                    return p.syntax(h.col, "expected @HOME");
                };
                if !names.servers.contains(&ServerId::from(home)) {
                    return p.err(h.col, ParseErrorKind::UnknownName(home.into()));
                }
                let mut client = Client::new(nick, home);
                if p.eat("latency") {
                    client.link_latency = p.number("a latency")?;
                }
                p.done()?;
                if names.servers.contains(&ServerId::from(nick))
                    || !names.clients.insert(ClientId::from(nick))
                {
                    return p.syntax(t.col, format!("duplicate name `{nick}`"));
                }
                sc.clients.push(client);
            }
            "channel" => {
                let v = parse_channel(&mut p, &names)?;
                sc.channels.push(v);
            }
            "seed" => {
                sc.seed = p.number("a seed")?;
                p.done()?;
            }
            "jitter" => {
                sc.jitter = p.number("a jitter")?;
                p.done()?;
            }
            "max-ticks" => {
                sc.max_ticks = Some(p.number("a tick budget")?);
                p.done()?;
            }
            "policy" => {
                let t = p.next("a policy")?;
                match t.text {
                    "ps_conflict_fixed=true" => sc.ps_conflict_fixed = true,
                    "ps_conflict_fixed=false" => sc.ps_conflict_fixed = false,
                    other => return p.syntax(t.col, format!("unknown policy `{other}`")),
                }
                p.done()?;
            }
            other => return p.syntax(head.col, format!("unknown directive `{other}`")),
        }
    }
    if sc.servers.is_empty() {
        return Err(ParseError {
            line: 1,
            col: 1,
            kind: ParseErrorKind::SyntaxError("missing topology".into()),
        });
    }
    if let Err(e) = sc.topology() {
        let line = match &e {
            TopologyError::CycleDetected(l)
            | TopologyError::DuplicateLink(l)
            | TopologyError::ZeroLatency(l) => names.links.get(l).copied().unwrap_or(servers_line),
            _ => servers_line,
        };
        return Err(ParseError {
            line,
            col: 1,
            kind: ParseErrorKind::SyntaxError(e.to_string()),
        });
    }
    Ok(sc)
}

fn parse_channel(p: &mut Parser<'_>, names: &Names) -> PResult<ChannelView> {
    let t = p.next("a channel name")?;
    let mut v = ChannelView::new(channel_name(p, t)?);
    while let Some(key) = p.peek() {
        p.pos += 1;
        match key.text {
            "members" => v.members = p.clients_next(names, "members")?,
            "ops" => v.ops = p.clients_next(names, "ops")?,
            "voices" => v.voices = p.clients_next(names, "voices")?,
            "creator" => {
                let t = p.next("a creator")?;
                v.creator = Some(names.client(p, t)?);
            }
            "modes" => {
                let t = p.next("modes")?;
                let Some(letters) = t.text.strip_prefix('+') else {
                    return p.syntax(t.col, "modes must start with +");
                };
                for c in letters.chars() {
                    match Flag::from_letter(c) {
                        Some(f) => {
                            v.flags.insert(f);
                        }
                        None => return p.syntax(t.col, format!("unknown mode `{c}`")),
                    }
                }
            }
            "key" => v.key = Some(p.next("a key")?.text.to_owned()),
            "limit" => v.limit = Some(p.number("a limit")?),
            "bans" => v.bans = p.next("bans")?.text.split(',').map(str::to_owned).collect(),
            "exceptions" => {
                v.exceptions = p
                    .next("exceptions")?
                    .text
                    .split(',')
                    .map(str::to_owned)
                    .collect()
            }
            "topic" => {
                let text = p.string("a topic")?;
                p.expect("by")?;
                let setter = p.next("a setter")?.text.to_owned();
                v.topic = Some(Topic { text, setter });
            }
            other => return p.syntax(key.col, format!("unknown channel attribute `{other}`")),
        }
    }
    if v.members.is_empty() {
        return p.syntax(t.col, "a channel needs members");
    }
    if let Err(e) = v.check_invariants() {
        return p.syntax(t.col, e);
    }
    Ok(v)
}

fn parse_action(p: &mut Parser<'_>, names: &Names) -> PResult<Action> {
    let verb = p.next("an action")?;
    let action = match verb.text {
        "topic" | "mode" | "kick" | "part" | "msg" => {
            let actor = p.client_next(names, "a nick")?;
            let channel = p.channel_next("a channel")?;
            let kind = match verb.text {
                "topic" => ChangeKind::Topic(Topic {
                    text: p.rest("topic text")?.to_owned(),
                    setter: actor.to_string(),
                }),
                "msg" => ChangeKind::Privmsg {
                    text: p.rest("message text")?.to_owned(),
                    claims_membership: false,
                },
                "kick" => ChangeKind::Kick {
                    target: p.client_next(names, "a nick")?,
                },
                "part" => ChangeKind::Part { who: actor.clone() },
                _ => parse_mode(p, names)?,
            };
            Action::Command(ModeChange::by(&actor, channel, kind))
        }
        "join" | "join-link" => {
            let first = p.next("a nick or link")?;
            let is_client =
                verb.text == "join" && p.peek().is_some_and(|t| !t.text.starts_with('@'));
            if is_client {
                let actor = names.client(p, first)?;
                let channel = p.channel_next("a channel")?;
                let key = p.peek().map(|t| t.text.to_owned());
                if key.is_some() {
                    p.pos += 1;
                }
                let kind = ChangeKind::Join {
                    who: actor.clone(),
                    key,
                    grants: Grants::default(),
                };
                Action::Command(ModeChange::by(&actor, channel, kind))
            } else {
                Action::Rejoin(names.link(p, first)?)
            }
        }
        "split" => Action::Split(p.link_next(names, "a link")?),
        "desync-one" | "desync-two" => {
            let a = p.client_next(names, "a nick")?;
            let b = p.client_next(names, "a nick")?;
            let target = p.link_next(names, "a link")?;
            let channel = p.channel_next("a channel")?;
            let how_tok = p.next("deop or kick")?;
            let how = match how_tok.text {
                "deop" => Collide::Deop,
                "kick" => Collide::Kick,
                other => {
                    return p.syntax(
                        how_tok.col,
                        format!("expected deop or kick, found `{other}`"),
                    )
                }
            };
            if verb.text == "desync-one" {
                Action::DesyncOne {
                    a,
                    b,
                    target,
                    channel,
                    how,
                }
            } else {
                p.expect("at")?;
                let meeting = p.number("a meeting time")?;
                let skew = if p.eat("skew") {
                    p.number("a skew")?
                } else {
                    0
                };
                Action::DesyncTwo {
                    a,
                    b,
                    target,
                    channel,
                    how,
                    meeting,
                    skew,
                }
            }
        }
        "detect" => {
            let channel = p.channel_next("a channel")?;
            p.expect("prober")?;
            let prober = p.client_next(names, "a nick")?;
            p.expect("helper")?;
            let helper = p.client_next(names, "a nick")?;
            let blind = p.eat("blind");
            Action::Detect {
                channel,
                prober,
                helper,
                blind,
            }
        }
        other => return p.syntax(verb.col, format!("unknown action `{other}`")),
    };
    p.done()?;
    Ok(action)
}

fn parse_mode(p: &mut Parser<'_>, names: &Names) -> PResult<ChangeKind> {
    let t = p.next("a mode")?;
    let mut chars = t.text.chars();
    let sign = match chars.next() {
        Some('+') => true,
        Some('-') => false,
        _ => {
            return p.syntax(
                t.col,
                format!("expected +MODE or -MODE, found `{}`", t.text),
            )
        }
    };
    let (Some(letter), None) = (chars.next(), chars.next()) else {
        return p.syntax(t.col, "one mode per line");
    };
    let needs_arg = match letter {
        'o' | 'v' | 'O' | 'b' | 'e' => true,
        'l' | 'k' => sign,
        _ => false,
    };
    let arg = if needs_arg {
        Some(p.next("a mode argument")?)
    } else {
        None
    };
    if matches!(letter, 'o' | 'v' | 'O') {
        names.client(p, arg.expect("argument read"))?;
    }
    match mode_change(sign, letter, arg.map(|a| a.text)) {
        Some(k) => Ok(k),
        None => p.syntax(t.col, format!("bad mode `{}`", t.text)),
    }
}

fn parse_set(p: &mut Parser<'_>) -> PResult<BTreeSet<String>> {
    let t = p.next("a list")?;
    if t.text == "-" {
        Ok(BTreeSet::new())
    } else {
        Ok(t.text.split(',').map(str::to_owned).collect())
    }
}

fn parse_check(p: &mut Parser<'_>, names: &Names) -> PResult<Check> {
    let head = p.next("an assertion")?;
    let check = match head.text {
        "members" | "ops" | "voices" | "bans" | "exceptions" => {
            let field = match head.text {
                "members" => SetField::Members,
                "ops" => SetField::Ops,
                "voices" => SetField::Voices,
                "bans" => SetField::Bans,
                _ => SetField::Exceptions,
            };
            let servers = p.servers_next(names, "@SERVERS")?;
            let channel = p.channel_next("a channel")?;
            let op_tok = p.next("==, contains or lacks")?;
            let op = match op_tok.text {
                "==" => SetOp::Equals(parse_set(p)?),
                "contains" => SetOp::Contains(p.next("a name")?.text.to_owned()),
                "lacks" => SetOp::Lacks(p.next("a name")?.text.to_owned()),
                other => {
                    return p.syntax(
                        op_tok.col,
                        format!("expected ==, contains or lacks, found `{other}`"),
                    )
                }
            };
            Check::Set {
                field,
                servers,
                channel,
                op,
            }
        }
        "creator" | "topic" | "key" | "limit" | "flags" => {
            let field = match head.text {
                "creator" => ScalarField::Creator,
                "topic" => ScalarField::Topic,
                "key" => ScalarField::Key,
                "limit" => ScalarField::Limit,
                _ => ScalarField::Flags,
            };
            let servers = p.servers_next(names, "@SERVERS")?;
            let channel = p.channel_next("a channel")?;
            p.expect("==")?;
            let raw = p.peek().map(|t| t.text);
            let value = if raw == Some("none") {
                p.pos += 1;
                None
            } else {
                Some(p.string("a value")?)
            };
            Check::Scalar {
                field,
                servers,
                channel,
                value,
            }
        }
        "boundary" => {
            let channel = p.channel_next("a channel")?;
            p.expect("==")?;
            let t = p.next("links or none")?;
            let mut edges = BTreeSet::new();
            if t.text != "none" {
                for part in t.text.split(',') {
                    edges.insert(names.link(
                        p,
                        Tok {
                            text: part,
                            col: t.col,
                        },
                    )?);
                }
            }
            Check::Boundary { channel, edges }
        }
        "synced" | "desynced" => Check::Synced {
            channel: p.channel_next("a channel")?,
            expect: head.text == "synced",
        },
        "views" => {
            let channel = p.channel_next("a channel")?;
            let left = p.server_next(names, "a server")?;
            let op = p.next("== or !=")?;
            let equal = match op.text {
                "==" => true,
                "!=" => false,
                other => return p.syntax(op.col, format!("expected == or !=, found `{other}`")),
            };
            let right = p.server_next(names, "a server")?;
            Check::SameView {
                channel,
                left,
                right,
                equal,
            }
        }
        "notices" => {
            let mut servers = None;
            let mut kind = None;
            let mut culprit = None;
            loop {
                let t = p.next("==")?;
                match t.text {
                    "==" => break,
                    "kind" => {
                        let k = p.next("a notice kind")?;
                        kind = Some(match k.text {
                            "fake_mode" => NoticeKind::FakeMode,
                            "fake_join" => NoticeKind::FakeJoin,
                            other => {
                                return p.syntax(k.col, format!("unknown notice kind `{other}`"))
                            }
                        });
                    }
                    "culprit" => culprit = Some(p.next("a nick")?.text.to_owned()),
                    s if s.starts_with('@') => servers = Some(names.servers(p, t)?),
                    other => return p.syntax(t.col, format!("unexpected `{other}`")),
                }
            }
            Check::Notices {
                servers,
                kind,
                culprit,
                count: p.number("a count")?,
            }
        }
        "trace" => {
            let observer = p.next("an observer")?.text.to_owned();
            let op = p.next("==, contains or lacks")?;
            match op.text {
                "==" => {
                    let json = p.rest("a JSON array")?;
                    match serde_json::from_str::<Vec<String>>(json) {
                        Ok(lines) => Check::Trace { observer, lines },
                        Err(e) => return p.syntax(op.col + 3, format!("bad JSON array: {e}")),
                    }
                }
                "contains" | "lacks" => Check::TraceHas {
                    observer,
                    line: p.string("a line")?,
                    present: op.text == "contains",
                },
                other => {
                    return p.syntax(
                        op.col,
                        format!("expected ==, contains or lacks, found `{other}`"),
                    )
                }
            }
        }
        "trace-count" => {
            let observer = p.next("an observer")?.text.to_owned();
            let since = if p.eat("since") {
                Some(p.number("a tick")?)
            } else {
                None
            };
            p.expect("==")?;
            Check::TraceCount {
                observer,
                since,
                count: p.number("a count")?,
            }
        }
        "order" => {
            let observer = p.next("an observer")?.text.to_owned();
            let first = p.string("a line")?;
            p.expect("before")?;
            let second = p.string("a line")?;
            Check::Order {
                observer,
                first,
                second,
            }
        }
        "quiescent" => {
            p.expect("==")?;
            Check::Quiescent(p.number("a tick")?)
        }
        "detect" => {
            p.expect("==")?;
            let t = p.next("a detection result")?;
            let outcome = match t.text {
                "synced" => DetectOutcome::Synced,
                "inconclusive" => DetectOutcome::Inconclusive,
                s if s.contains('-') => DetectOutcome::Edge(names.link(p, t)?),
                _ => DetectOutcome::Foreign(names.server(p, t)?),
            };
            Check::Detect(outcome)
        }
        "numeric" => {
            let client = p.client_next(names, "a nick")?;
            let code = p.number("a numeric code")?;
            let server = match p.peek() {
                Some(t) if t.text.starts_with('@') => {
                    p.pos += 1;
                    Some(names.server(
                        p,
                        Tok {
                            text: &t.text[1..],
                            col: t.col,
                        },
                    )?)
                }
                _ => None,
            };
            Check::Numeric {
                client,
                code,
                server,
            }
        }
        "numerics" => {
            let client = p.client_next(names, "a nick")?;
            p.expect("==")?;
            Check::Numerics {
                client,
                count: p.number("a count")?,
            }
        }
        other => return p.syntax(head.col, format!("unknown assertion `{other}`")),
    };
    p.done()?;
    Ok(check)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = "\
name tiny
chain A X Y
client a @A
client x @X latency 2
channel #c members a,x ops a,x modes +nt topic \"hello there\" by a
@0 topic a #c I am a!
@0 mode x #c -o a
@1 split A-X
@2 join A-X
assert ops @* #c == x
assert trace a == [\"-X- Topic (#c): changed by a: I am a!\"]
";

    #[test]
    fn parses_a_small_scenario() {
        let s = parse_scenario(SMALL).unwrap();
        assert_eq!(s.name.as_deref(), Some("tiny"));
        assert_eq!(s.servers.len(), 3);
        assert_eq!(s.links.len(), 2);
        assert_eq!(s.clients[1].link_latency, 2);
        assert_eq!(s.channels[0].topic.as_ref().unwrap().text, "hello there");
        assert_eq!(s.actions.len(), 4);
        assert!(matches!(s.actions[3].action, Action::Rejoin(_)));
        assert_eq!(s.assertions.len(), 2);
    }

    #[test]
    fn render_round_trips() {
        let s = parse_scenario(SMALL).unwrap();
        let again = parse_scenario(&s.to_string()).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn empty_file_has_no_topology() {
        let e = parse_scenario("").unwrap_err();
        assert_eq!(
            e.kind,
            ParseErrorKind::SyntaxError("missing topology".into())
        );
    }

    #[test]
    fn undeclared_client_is_unknown() {
        let e = parse_scenario("chain A X\nclient a @A\n@0 topic q #c hi\n").unwrap_err();
        assert_eq!((e.line, e.col), (3, 10));
        assert_eq!(e.kind, ParseErrorKind::UnknownName("q".into()));
    }

    #[test]
    fn time_must_not_go_backwards() {
        let e = parse_scenario("chain A X\nclient a @A\n@3 part a #c\n@2 part a #c\n").unwrap_err();
        assert_eq!(e.line, 4);
        assert_eq!(
            e.kind,
            ParseErrorKind::TimeNonMonotonic { at: 2, previous: 3 }
        );
    }

    #[test]
    fn cycles_are_reported_on_their_link() {
        let e = parse_scenario("servers A B C\nlink A-B\nlink B-C\nlink C-A\n").unwrap_err();
        assert_eq!(e.line, 4);
    }

    #[test]
    fn syntax_errors_point_at_the_token() {
        let e = parse_scenario("chain A X\nclient a @A\n@0 mode a #c +q\n").unwrap_err();
        assert_eq!((e.line, e.col), (3, 14));
        let e = parse_scenario("chain A X\nbogus\n").unwrap_err();
        assert_eq!((e.line, e.col), (2, 1));
        let e = parse_scenario("chain A X\nclient a @A\n@0 topic a\n").unwrap_err();
        assert_eq!(e.line, 3);
    }
}
