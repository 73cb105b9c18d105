//! Scenario files: a network, some channels, timed actions and assertions.
//!
//! The grammar is documented in `docs/scenario-dsl.md`. [`parse_scenario`]
//! reads a file, `Display` writes one back, and [`run_scenario`] executes
//! it.

mod builtins;
mod parse;
mod run;

use std::collections::BTreeSet;
use std::fmt;

use serde::Serialize;

use crate::channel::{ChangeKind, ChannelView, Flag, ListKind, ModeChange, NoticeKind};
use crate::desync::{Collide, DesyncError};
use crate::engine::EngineError;
use crate::splitjoin::SplitError;
use crate::topology::{Client, ClientId, Link, ServerId, Ticks, Topology, TopologyError};

pub use builtins::{builtin, builtins, list_builtins, Builtin};
pub use parse::{parse_scenario, ParseError, ParseErrorKind};
pub use run::{
    attempt_until_desynced, attempts_with_seed, run_observed, run_scenario, AssertionResult,
    DetectOutcome, RunReport,
};

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Desync(#[from] DesyncError),
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error("scenario has no desync action")]
    NoDesyncAction,
    #[error("no desync after {0} attempts")]
    MaxAttemptsExceeded(u32),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scenario {
    pub name: Option<String>,
    pub summary: Option<String>,
    pub servers: Vec<ServerId>,
    pub links: Vec<(ServerId, ServerId, Ticks)>,
    pub clients: Vec<Client>,
    pub channels: Vec<ChannelView>,
    pub seed: u64,
    pub jitter: Ticks,
    pub ps_conflict_fixed: bool,
    pub max_ticks: Option<Ticks>,
    pub actions: Vec<Timed>,
    pub assertions: Vec<Assertion>,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            name: None,
            summary: None,
            servers: Vec::new(),
            links: Vec::new(),
            clients: Vec::new(),
            channels: Vec::new(),
            seed: 0,
            jitter: 0,
            ps_conflict_fixed: true,
            max_ticks: None,
            actions: Vec::new(),
            assertions: Vec::new(),
        }
    }
}

impl Scenario {
    pub fn topology(&self) -> Result<Topology, TopologyError> {
        Topology::build(
            self.servers.clone(),
            self.links.clone(),
            self.clients.clone(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Timed {
    pub at: Ticks,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    Command(ModeChange),
    Split(Link),
    Rejoin(Link),
    DesyncOne {
        a: ClientId,
        b: ClientId,
        target: Link,
        channel: String,
        how: Collide,
    },
    DesyncTwo {
        a: ClientId,
        b: ClientId,
        target: Link,
        channel: String,
        how: Collide,
        meeting: Ticks,
        skew: i64,
    },
    Detect {
        channel: String,
        prober: ClientId,
        helper: ClientId,
        blind: bool,
    },
}

impl Action {
    pub fn verb(&self) -> &'static str {
        match self {
            Action::Command(c) => match c.kind {
                ChangeKind::Topic(_) => "topic",
                ChangeKind::Kick { .. } => "kick",
                ChangeKind::Join { .. } => "join",
                ChangeKind::Part { .. } => "part",
                ChangeKind::Privmsg { .. } => "msg",
                _ => "mode",
            },
            Action::Split(_) => "split",
            Action::Rejoin(_) => "join",
            Action::DesyncOne { .. } => "desync-one",
            Action::DesyncTwo { .. } => "desync-two",
            Action::Detect { .. } => "detect",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assertion {
    /// Checked once everything up to this tick has run; `None` means at
    /// quiescence.
    pub at: Option<Ticks>,
    pub check: Check,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Servers {
    All,
    List(Vec<ServerId>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SetField {
    Members,
    Ops,
    Voices,
    Bans,
    Exceptions,
}

impl SetField {
    fn word(self) -> &'static str {
        match self {
            SetField::Members => "members",
            SetField::Ops => "ops",
            SetField::Voices => "voices",
            SetField::Bans => "bans",
            SetField::Exceptions => "exceptions",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SetOp {
    Equals(BTreeSet<String>),
    Contains(String),
    Lacks(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalarField {
    Creator,
    Topic,
    Key,
    Limit,
    Flags,
}

impl ScalarField {
    fn word(self) -> &'static str {
        match self {
            ScalarField::Creator => "creator",
            ScalarField::Topic => "topic",
            ScalarField::Key => "key",
            ScalarField::Limit => "limit",
            ScalarField::Flags => "flags",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Check {
    Set {
        field: SetField,
        servers: Servers,
        channel: String,
        op: SetOp,
    },
    /// `None` expects the field to be unset.
    Scalar {
        field: ScalarField,
        servers: Servers,
        channel: String,
        value: Option<String>,
    },
    Boundary {
        channel: String,
        edges: BTreeSet<Link>,
    },
    Synced {
        channel: String,
        expect: bool,
    },
    SameView {
        channel: String,
        left: ServerId,
        right: ServerId,
        equal: bool,
    },
    Notices {
        servers: Option<Servers>,
        kind: Option<NoticeKind>,
        culprit: Option<String>,
        count: usize,
    },
    Trace {
        observer: String,
        lines: Vec<String>,
    },
    TraceHas {
        observer: String,
        line: String,
        present: bool,
    },
    TraceCount {
        observer: String,
        since: Option<Ticks>,
        count: usize,
    },
    Order {
        observer: String,
        first: String,
        second: String,
    },
    Quiescent(Ticks),
    Detect(DetectOutcome),
    Numeric {
        client: ClientId,
        code: u16,
        server: Option<ServerId>,
    },
    Numerics {
        client: ClientId,
        count: usize,
    },
}

fn join<T: fmt::Display>(items: impl IntoIterator<Item = T>) -> String {
    let v: Vec<String> = items.into_iter().map(|i| i.to_string()).collect();
    if v.is_empty() {
        "-".into()
    } else {
        v.join(",")
    }
}

fn quote(s: &str) -> String {
    serde_json::to_string(s).expect("strings serialize")
}

fn collide_word(how: Collide) -> &'static str {
    match how {
        Collide::Deop => "deop",
        Collide::Kick => "kick",
    }
}

impl fmt::Display for Servers {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Servers::All => f.write_str("@*"),
            Servers::List(l) => write!(f, "@{}", join(l)),
        }
    }
}

impl fmt::Display for DetectOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DetectOutcome::Edge(l) => write!(f, "{l}"),
            DetectOutcome::Foreign(s) => write!(f, "{s}"),
            DetectOutcome::Synced => f.write_str("synced"),
            DetectOutcome::Inconclusive => f.write_str("inconclusive"),
        }
    }
}

pub(crate) fn render_command(c: &ModeChange) -> String {
    let actor = c.actor.name();
    let chan = &c.channel;
    match &c.kind {
        ChangeKind::Topic(t) => format!("topic {actor} {chan} {}", t.text),
        ChangeKind::Kick { target } => format!("kick {actor} {chan} {target}"),
        ChangeKind::Join { key: Some(k), .. } => format!("join {actor} {chan} {k}"),
        ChangeKind::Join { key: None, .. } => format!("join {actor} {chan}"),
        ChangeKind::Part { .. } => format!("part {actor} {chan}"),
        ChangeKind::Privmsg { text, .. } => format!("msg {actor} {chan} {text}"),
        other => format!("mode {actor} {chan} {}", other.mode_text()),
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Command(c) => f.write_str(&render_command(c)),
            Action::Split(l) => write!(f, "split {l}"),
            Action::Rejoin(l) => write!(f, "join {l}"),
            Action::DesyncOne {
                a,
                b,
                target,
                channel,
                how,
            } => write!(
                f,
                "desync-one {a} {b} {target} {channel} {}",
                collide_word(*how)
            ),
            Action::DesyncTwo {
                a,
                b,
                target,
                channel,
                how,
                meeting,
                skew,
            } => write!(
                f,
                "desync-two {a} {b} {target} {channel} {} at {meeting} skew {skew}",
                collide_word(*how)
            ),
            Action::Detect {
                channel,
                prober,
                helper,
                blind,
            } => {
                write!(f, "detect {channel} prober {prober} helper {helper}")?;
                if *blind {
                    f.write_str(" blind")?;
                }
                Ok(())
            }
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Check::Set {
                field,
                servers,
                channel,
                op,
            } => {
                write!(f, "{} {servers} {channel} ", field.word())?;
                match op {
                    SetOp::Equals(s) => write!(f, "== {}", join(s)),
                    SetOp::Contains(s) => write!(f, "contains {s}"),
                    SetOp::Lacks(s) => write!(f, "lacks {s}"),
                }
            }
            Check::Scalar {
                field,
                servers,
                channel,
                value,
            } => {
                write!(f, "{} {servers} {channel} == ", field.word())?;
                match (field, value) {
                    (_, None) => f.write_str("none"),
                    (ScalarField::Topic, Some(v)) => f.write_str(&quote(v)),
                    (_, Some(v)) => f.write_str(v),
                }
            }
            Check::Boundary { channel, edges } => {
                if edges.is_empty() {
                    write!(f, "boundary {channel} == none")
                } else {
                    write!(f, "boundary {channel} == {}", join(edges))
                }
            }
            Check::Synced { channel, expect } => {
                write!(
                    f,
                    "{} {channel}",
                    if *expect { "synced" } else { "desynced" }
                )
            }
            Check::SameView {
                channel,
                left,
                right,
                equal,
            } => write!(
                f,
                "views {channel} {left} {} {right}",
                if *equal { "==" } else { "!=" }
            ),
            Check::Notices {
                servers,
                kind,
                culprit,
                count,
            } => {
                f.write_str("notices")?;
                if let Some(s) = servers {
                    write!(f, " {s}")?;
                }
                if let Some(k) = kind {
                    write!(f, " kind {k}")?;
                }
                if let Some(c) = culprit {
                    write!(f, " culprit {c}")?;
                }
                write!(f, " == {count}")
            }
            Check::Trace { observer, lines } => {
                write!(
                    f,
                    "trace {observer} == {}",
                    serde_json::to_string(lines).expect("serialize")
                )
            }
            Check::TraceHas {
                observer,
                line,
                present,
            } => write!(
                f,
                "trace {observer} {} {}",
                if *present { "contains" } else { "lacks" },
                quote(line)
            ),
            Check::TraceCount {
                observer,
                since,
                count,
            } => {
                write!(f, "trace-count {observer}")?;
                if let Some(t) = since {
                    write!(f, " since {t}")?;
                }
                write!(f, " == {count}")
            }
            Check::Order {
                observer,
                first,
                second,
            } => write!(
                f,
                "order {observer} {} before {}",
                quote(first),
                quote(second)
            ),
            Check::Quiescent(t) => write!(f, "quiescent == {t}"),
            Check::Detect(d) => write!(f, "detect == {d}"),
            Check::Numeric {
                client,
                code,
                server,
            } => {
                write!(f, "numeric {client} {code}")?;
                if let Some(s) = server {
                    write!(f, " @{s}")?;
                }
                Ok(())
            }
            Check::Numerics { client, count } => write!(f, "numerics {client} == {count}"),
        }
    }
}

fn render_channel(f: &mut fmt::Formatter<'_>, v: &ChannelView) -> fmt::Result {
    write!(f, "channel {} members {}", v.name, join(&v.members))?;
    if !v.ops.is_empty() {
        write!(f, " ops {}", join(&v.ops))?;
    }
    if !v.voices.is_empty() {
        write!(f, " voices {}", join(&v.voices))?;
    }
    if let Some(c) = &v.creator {
        write!(f, " creator {c}")?;
    }
    if !v.flags.is_empty() {
        write!(f, " modes {}", v.flag_string())?;
    }
    if let Some(k) = &v.key {
        write!(f, " key {k}")?;
    }
    if let Some(l) = v.limit {
        write!(f, " limit {l}")?;
    }
    for (word, list) in [
        (ListKind::Ban, &v.bans),
        (ListKind::Exception, &v.exceptions),
    ] {
        if !list.is_empty() {
            let w = if word == ListKind::Ban {
                "bans"
            } else {
                "exceptions"
            };
            write!(f, " {w} {}", join(list))?;
        }
    }
    if let Some(t) = &v.topic {
        write!(f, " topic {} by {}", quote(&t.text), t.setter)?;
    }
    writeln!(f)
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(n) = &self.name {
            writeln!(f, "name {n}")?;
        }
        if let Some(s) = &self.summary {
            writeln!(f, "summary {s}")?;
        }
        writeln!(
            f,
            "servers {}",
            self.servers
                .iter()
                .map(|s| s.as_str())
                .collect::<Vec<_>>()
                .join(" ")
        )?;
        for (x, y, lat) in &self.links {
            writeln!(f, "link {x}-{y} latency {lat}")?;
        }
        for c in &self.clients {
            write!(f, "client {} @{}", c.nick, c.home)?;
            if c.link_latency > 0 {
                write!(f, " latency {}", c.link_latency)?;
            }
            writeln!(f)?;
        }
        for ch in &self.channels {
            render_channel(f, ch)?;
        }
        writeln!(f, "seed {}", self.seed)?;
        writeln!(f, "jitter {}", self.jitter)?;
        writeln!(f, "policy ps_conflict_fixed={}", self.ps_conflict_fixed)?;
        if let Some(m) = self.max_ticks {
            writeln!(f, "max-ticks {m}")?;
        }
        for t in &self.actions {
            writeln!(f, "@{} {}", t.at, t.action)?;
        }
        for a in &self.assertions {
            match a.at {
                Some(t) => writeln!(f, "assert@{t} {}", a.check)?,
                None => writeln!(f, "assert {}", a.check)?,
            }
        }
        Ok(())
    }
}

/// Mode letters accepted by `mode` lines, mapped to the change they make.
pub(crate) fn mode_change(sign: bool, letter: char, arg: Option<&str>) -> Option<ChangeKind> {
    let target = || arg.map(ClientId::from);
    Some(match letter {
        'o' => ChangeKind::Op {
            target: target()?,
            set: sign,
        },
        'v' => ChangeKind::Voice {
            target: target()?,
            set: sign,
        },
        'O' => ChangeKind::Creator {
            target: target()?,
            set: sign,
        },
        'l' if sign => ChangeKind::Limit(Some(arg?.parse().ok()?)),
        'l' => ChangeKind::Limit(None),
        'k' if sign => ChangeKind::Key(Some(arg?.to_owned())),
        'k' => ChangeKind::Key(None),
        'b' => ChangeKind::List {
            list: ListKind::Ban,
            mask: arg?.to_owned(),
            add: sign,
        },
        'e' => ChangeKind::List {
            list: ListKind::Exception,
            mask: arg?.to_owned(),
            add: sign,
        },
        c => ChangeKind::Flag {
            flag: Flag::from_letter(c)?,
            set: sign,
        },
    })
}
