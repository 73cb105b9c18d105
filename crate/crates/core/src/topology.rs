//! Server tree: servers, weighted links and client attachments.
//!
//! An IRC network without cycles is an undirected tree, so every pair of
//! servers is joined by exactly one simple path. Everything the simulator
//! needs to know about routing follows from that: paths, hop distances,
//! one-way latencies and the two halves produced by cutting a link.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

/// Simulated time, in integer ticks.
pub type Ticks = u64;

macro_rules! name_type {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(String);

        impl $name {
            pub fn new(name: impl Into<String>) -> Self {
                Self(name.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_owned())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                Self(s)
            }
        }
    };
}

name_type!(
    /// Short server name, e.g. `A`.
    ServerId
);
name_type!(
    /// Client nickname. Nicks double as client identities.
    ClientId
);

/// A client attached to its home server.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Client {
    pub nick: ClientId,
    pub home: ServerId,
    /// Ticks between the client and its home server.
    pub link_latency: Ticks,
}

impl Client {
    pub fn new(nick: impl Into<String>, home: impl Into<String>) -> Self {
        Client {
            nick: ClientId::new(nick),
            home: ServerId::new(home),
            link_latency: 0,
        }
    }

    pub fn with_latency(mut self, latency: Ticks) -> Self {
        self.link_latency = latency;
        self
    }
}

/// Unordered server pair. Endpoints are stored sorted so `A-X` and `X-A`
/// compare equal.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Link {
    lo: ServerId,
    hi: ServerId,
}

impl Link {
    pub fn new(x: impl Into<ServerId>, y: impl Into<ServerId>) -> Self {
        let (x, y) = (x.into(), y.into());
        if x <= y {
            Link { lo: x, hi: y }
        } else {
            Link { lo: y, hi: x }
        }
    }

    pub fn endpoints(&self) -> (&ServerId, &ServerId) {
        (&self.lo, &self.hi)
    }

    pub fn touches(&self, s: &ServerId) -> bool {
        &self.lo == s || &self.hi == s
    }

    /// The endpoint that is not `s`, if `s` is an endpoint.
    pub fn other(&self, s: &ServerId) -> Option<&ServerId> {
        if &self.lo == s {
            Some(&self.hi)
        } else if &self.hi == s {
            Some(&self.lo)
        } else {
            None
        }
    }
}

impl From<&ServerId> for ServerId {
    fn from(s: &ServerId) -> Self {
        s.clone()
    }
}

impl fmt::Display for Link {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.lo, self.hi)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TopologyError {
    #[error("topology has no servers")]
    Empty,
    #[error("duplicate name `{0}`")]
    DuplicateName(String),
    #[error("link {0} is declared twice")]
    DuplicateLink(Link),
    #[error("server {0} is linked to itself")]
    SelfLink(ServerId),
    #[error("link {0} needs a latency of at least one tick")]
    ZeroLatency(Link),
    #[error("link {0} closes a cycle")]
    CycleDetected(Link),
    #[error("server {0} is not connected to the rest of the network")]
    Disconnected(ServerId),
    #[error("unknown server `{0}`")]
    UnknownServer(ServerId),
    #[error("unknown client `{0}`")]
    UnknownClient(ClientId),
    #[error("unknown link {0}")]
    UnknownLink(Link),
}

/// A validated server tree. Immutable once built.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    /// Servers in declaration order.
    order: Vec<ServerId>,
    adjacency: BTreeMap<ServerId, BTreeMap<ServerId, Ticks>>,
    clients: BTreeMap<ClientId, Client>,
}

impl Topology {
    /// Validates and builds a tree. Links are checked in the order given, so
    /// a cycle is reported on the first link that closes one.
    pub fn build(
        servers: impl IntoIterator<Item = ServerId>,
        links: impl IntoIterator<Item = (ServerId, ServerId, Ticks)>,
        clients: impl IntoIterator<Item = Client>,
    ) -> Result<Topology, TopologyError> {
        let mut order = Vec::new();
        let mut adjacency: BTreeMap<ServerId, BTreeMap<ServerId, Ticks>> = BTreeMap::new();
        for s in servers {
            if adjacency.insert(s.clone(), BTreeMap::new()).is_some() {
                return Err(TopologyError::DuplicateName(s.0));
            }
            order.push(s);
        }
        if order.is_empty() {
            return Err(TopologyError::Empty);
        }

        // union-find over declaration indices
        let index: BTreeMap<&ServerId, usize> =
            order.iter().enumerate().map(|(i, s)| (s, i)).collect();
        let mut parent: Vec<usize> = (0..order.len()).collect();
        fn find(parent: &mut [usize], mut i: usize) -> usize {
            while parent[i] != i {
                parent[i] = parent[parent[i]];
                i = parent[i];
            }
            i
        }

        let mut edges = Vec::new();
        for (x, y, latency) in links {
            if x == y {
                return Err(TopologyError::SelfLink(x));
            }
            let link = Link::new(x.clone(), y.clone());
            let (Some(&ix), Some(&iy)) = (index.get(&x), index.get(&y)) else {
                let missing = if index.contains_key(&x) { y } else { x };
                return Err(TopologyError::UnknownServer(missing));
            };
            if adjacency[&x].contains_key(&y) || edges.iter().any(|(l, _)| l == &link) {
                return Err(TopologyError::DuplicateLink(link));
            }
            if latency == 0 {
                return Err(TopologyError::ZeroLatency(link));
            }
            let (rx, ry) = (find(&mut parent, ix), find(&mut parent, iy));
            if rx == ry {
                return Err(TopologyError::CycleDetected(link));
            }
            parent[rx] = ry;
            edges.push((link, (x, y, latency)));
        }
        for (_, (x, y, latency)) in edges {
            adjacency.get_mut(&x).unwrap().insert(y.clone(), latency);
            adjacency.get_mut(&y).unwrap().insert(x, latency);
        }
        let root = find(&mut parent, 0);
        for (i, s) in order.iter().enumerate() {
            if find(&mut parent, i) != root {
                return Err(TopologyError::Disconnected(s.clone()));
            }
        }

        let mut by_nick = BTreeMap::new();
        for c in clients {
            if !adjacency.contains_key(&c.home) {
                return Err(TopologyError::UnknownServer(c.home));
            }
            if by_nick.contains_key(&c.nick)
                || adjacency.contains_key(&ServerId::from(c.nick.as_str()))
            {
                return Err(TopologyError::DuplicateName(c.nick.0));
            }
            by_nick.insert(c.nick.clone(), c);
        }

        Ok(Topology {
            order,
            adjacency,
            clients: by_nick,
        })
    }

    /// A chain of servers with uniform link latency.
    pub fn chain(
        names: &[&str],
        latency: Ticks,
        clients: Vec<Client>,
    ) -> Result<Topology, TopologyError> {
        let servers = names.iter().map(|n| ServerId::from(*n));
        let links = names
            .windows(2)
            .map(|w| (ServerId::from(w[0]), ServerId::from(w[1]), latency));
        Topology::build(servers, links, clients)
    }

    /// Decodes a Prüfer sequence over `names` into a tree with uniform
    /// latency. `seq` must have length `names.len() - 2` with entries
    /// indexing into `names`.
    pub fn from_pruefer(names: &[ServerId], seq: &[usize], latency: Ticks) -> Topology {
        let n = names.len();
        let mut links = Vec::with_capacity(n.saturating_sub(1));
        if n == 2 {
            links.push((names[0].clone(), names[1].clone(), latency));
        } else if n > 2 {
            assert_eq!(seq.len(), n - 2, "prüfer sequence length");
            let mut degree = vec![1usize; n];
            for &i in seq {
                degree[i] += 1;
            }
            for &i in seq {
                let leaf = (0..n).find(|&j| degree[j] == 1).unwrap();
                links.push((names[leaf].clone(), names[i].clone(), latency));
                degree[leaf] -= 1;
                degree[i] -= 1;
            }
            let rest: Vec<usize> = (0..n).filter(|&j| degree[j] == 1).collect();
            links.push((names[rest[0]].clone(), names[rest[1]].clone(), latency));
        }
        Topology::build(names.iter().cloned(), links, Vec::new())
            .expect("prüfer decode yields a tree")
    }

    /// Same tree with a different client set.
    pub fn with_clients(
        &self,
        clients: impl IntoIterator<Item = Client>,
    ) -> Result<Topology, TopologyError> {
        Topology::build(self.order.iter().cloned(), self.link_triples(), clients)
    }

    /// Same shape, latency of each link replaced by `f(link)`.
    pub fn with_latencies(
        &self,
        mut f: impl FnMut(&Link) -> Ticks,
    ) -> Result<Topology, TopologyError> {
        let links: Vec<_> = self
            .links()
            .map(|(l, _)| {
                let t = f(&l);
                let (x, y) = l.endpoints();
                (x.clone(), y.clone(), t)
            })
            .collect();
        Topology::build(
            self.order.iter().cloned(),
            links,
            self.clients.values().cloned(),
        )
    }

    fn link_triples(&self) -> Vec<(ServerId, ServerId, Ticks)> {
        self.links()
            .map(|(l, t)| {
                let (x, y) = l.endpoints();
                (x.clone(), y.clone(), t)
            })
            .collect()
    }

    pub fn servers(&self) -> &[ServerId] {
        &self.order
    }

    pub fn contains(&self, s: &ServerId) -> bool {
        self.adjacency.contains_key(s)
    }

    /// Every link once, sorted.
    pub fn links(&self) -> impl Iterator<Item = (Link, Ticks)> + '_ {
        self.adjacency.iter().flat_map(|(s, nbrs)| {
            nbrs.iter()
                .filter(move |(n, _)| s < *n)
                .map(move |(n, &t)| (Link::new(s.clone(), n.clone()), t))
        })
    }

    pub fn link_latency(&self, link: &Link) -> Option<Ticks> {
        let (x, y) = link.endpoints();
        self.adjacency.get(x)?.get(y).copied()
    }

    pub fn neighbors(&self, s: &ServerId) -> impl Iterator<Item = (&ServerId, Ticks)> + '_ {
        self.adjacency
            .get(s)
            .into_iter()
            .flat_map(|m| m.iter().map(|(n, &t)| (n, t)))
    }

    pub fn clients(&self) -> impl Iterator<Item = &Client> + '_ {
        self.clients.values()
    }

    pub fn client(&self, nick: &ClientId) -> Result<&Client, TopologyError> {
        self.clients
            .get(nick)
            .ok_or_else(|| TopologyError::UnknownClient(nick.clone()))
    }

    /// Clients whose home is `s`.
    pub fn clients_on<'a>(&'a self, s: &'a ServerId) -> impl Iterator<Item = &'a Client> + 'a {
        self.clients.values().filter(move |c| &c.home == s)
    }

    fn check(&self, s: &ServerId) -> Result<(), TopologyError> {
        if self.contains(s) {
            Ok(())
        } else {
            Err(TopologyError::UnknownServer(s.clone()))
        }
    }

    /// The unique simple path from `s` to `d`, both inclusive.
    pub fn path(&self, s: &ServerId, d: &ServerId) -> Result<Vec<ServerId>, TopologyError> {
        self.check(s)?;
        self.check(d)?;
        let mut prev: BTreeMap<&ServerId, &ServerId> = BTreeMap::new();
        let mut queue = VecDeque::from([s]);
        let mut seen = BTreeSet::from([s]);
        while let Some(cur) = queue.pop_front() {
            if cur == d {
                break;
            }
            for (n, _) in self.neighbors(cur) {
                if seen.insert(n) {
                    prev.insert(n, cur);
                    queue.push_back(n);
                }
            }
        }
        let mut path = vec![d.clone()];
        let mut cur = d;
        while cur != s {
            cur = prev[cur];
            path.push(cur.clone());
        }
        path.reverse();
        Ok(path)
    }

    /// Links traversed by `path(s, d)`, in order.
    pub fn path_links(&self, s: &ServerId, d: &ServerId) -> Result<Vec<Link>, TopologyError> {
        Ok(self
            .path(s, d)?
            .windows(2)
            .map(|w| Link::new(w[0].clone(), w[1].clone()))
            .collect())
    }

    /// Sum of link latencies along `path(s, d)`.
    pub fn path_latency(&self, s: &ServerId, d: &ServerId) -> Result<Ticks, TopologyError> {
        let path = self.path(s, d)?;
        Ok(path.windows(2).map(|w| self.adjacency[&w[0]][&w[1]]).sum())
    }

    pub fn hops(&self, s: &ServerId, d: &ServerId) -> Result<usize, TopologyError> {
        Ok(self.path(s, d)?.len() - 1)
    }

    /// Time for a message from client `c` to reach server `s` on an idle
    /// network: the client's own link plus every server link on the way.
    pub fn one_way_latency(&self, c: &ClientId, s: &ServerId) -> Result<Ticks, TopologyError> {
        let client = self.client(c)?;
        Ok(client.link_latency + self.path_latency(&client.home, s)?)
    }

    /// Removes the link `x-y` and returns the two components; the first one
    /// contains `x`.
    pub fn split_components(
        &self,
        x: &ServerId,
        y: &ServerId,
    ) -> Result<(BTreeSet<ServerId>, BTreeSet<ServerId>), TopologyError> {
        let link = Link::new(x.clone(), y.clone());
        if self.link_latency(&link).is_none() {
            return Err(TopologyError::UnknownLink(link));
        }
        let blocked = BTreeSet::from([link]);
        let left = self.reachable(x, &blocked);
        let right = self.reachable(y, &blocked);
        Ok((left, right))
    }

    /// Servers reachable from `start` without using any link in `blocked`.
    pub fn reachable(&self, start: &ServerId, blocked: &BTreeSet<Link>) -> BTreeSet<ServerId> {
        let mut seen = BTreeSet::new();
        if !self.contains(start) {
            return seen;
        }
        seen.insert(start.clone());
        let mut stack = vec![start.clone()];
        while let Some(cur) = stack.pop() {
            for (n, _) in self.neighbors(&cur) {
                if blocked.contains(&Link::new(cur.clone(), n.clone())) {
                    continue;
                }
                if seen.insert(n.clone()) {
                    stack.push(n.clone());
                }
            }
        }
        seen
    }

    /// Longest path measured in hops.
    pub fn hop_diameter(&self) -> usize {
        self.eccentricities(|_| 1).into_iter().max().unwrap_or(0) as usize
    }

    /// Longest path measured in link latency.
    pub fn latency_diameter(&self) -> Ticks {
        self.eccentricities(|t| t).into_iter().max().unwrap_or(0)
    }

    fn eccentricities(&self, weight: impl Fn(Ticks) -> Ticks) -> Vec<Ticks> {
        self.order
            .iter()
            .map(|s| {
                let mut best = 0;
                let mut stack = vec![(s, None::<&ServerId>, 0)];
                while let Some((cur, from, dist)) = stack.pop() {
                    best = best.max(dist);
                    for (n, t) in self.neighbors(cur) {
                        if Some(n) != from {
                            stack.push((n, Some(cur), dist + weight(t)));
                        }
                    }
                }
                best
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(n: &str) -> ServerId {
        ServerId::from(n)
    }

    fn six_chain() -> Topology {
        Topology::chain(
            &["C", "B", "A", "X", "Y", "Z"],
            1,
            vec![Client::new("a", "A"), Client::new("x", "X")],
        )
        .unwrap()
    }

    fn set(names: &[&str]) -> BTreeSet<ServerId> {
        names.iter().map(|n| s(n)).collect()
    }

    #[test]
    fn six_chain_is_valid() {
        let t = six_chain();
        assert_eq!(t.servers().len(), 6);
        assert_eq!(t.links().count(), 5);
        assert_eq!(t.hop_diameter(), 5);
    }

    #[test]
    fn single_server() {
        let t = Topology::build([s("A")], [], []).unwrap();
        assert_eq!(t.path(&s("A"), &s("A")).unwrap(), vec![s("A")]);
        assert_eq!(t.hop_diameter(), 0);
    }

    #[test]
    fn triangle_is_rejected() {
        let err = Topology::build(
            [s("A"), s("B"), s("C")],
            [
                (s("A"), s("B"), 1),
                (s("B"), s("C"), 1),
                (s("C"), s("A"), 1),
            ],
            [],
        )
        .unwrap_err();
        assert_eq!(err, TopologyError::CycleDetected(Link::new(s("C"), s("A"))));
    }

    #[test]
    fn malformed_inputs() {
        let err = Topology::build([s("A"), s("B"), s("C")], [(s("A"), s("B"), 1)], []).unwrap_err();
        assert_eq!(err, TopologyError::Disconnected(s("C")));
        let err = Topology::build([s("A"), s("A")], [], []).unwrap_err();
        assert_eq!(err, TopologyError::DuplicateName("A".into()));
        let err = Topology::build(
            [s("A"), s("B")],
            [(s("A"), s("B"), 1), (s("B"), s("A"), 1)],
            [],
        )
        .unwrap_err();
        assert_eq!(err, TopologyError::DuplicateLink(Link::new(s("A"), s("B"))));
        let err = Topology::build([s("A")], [(s("A"), s("A"), 1)], []).unwrap_err();
        assert_eq!(err, TopologyError::SelfLink(s("A")));
        let err = Topology::build([s("A"), s("B")], [(s("A"), s("B"), 0)], []).unwrap_err();
        assert_eq!(err, TopologyError::ZeroLatency(Link::new(s("A"), s("B"))));
        let err = Topology::build([s("A")], [], [Client::new("a", "Q")]).unwrap_err();
        assert_eq!(err, TopologyError::UnknownServer(s("Q")));
        let err = Topology::build([s("A")], [], [Client::new("a", "A"), Client::new("a", "A")])
            .unwrap_err();
        assert_eq!(err, TopologyError::DuplicateName("a".into()));
        assert_eq!(
            Topology::build([], [], []).unwrap_err(),
            TopologyError::Empty
        );
    }

    #[test]
    fn paths_on_the_chain() {
        let t = six_chain();
        assert_eq!(
            t.path(&s("A"), &s("Z")).unwrap(),
            vec![s("A"), s("X"), s("Y"), s("Z")]
        );
        assert_eq!(t.path(&s("Z"), &s("C")).unwrap().len(), 6);
        assert_eq!(
            t.path(&s("A"), &s("Q")).unwrap_err(),
            TopologyError::UnknownServer(s("Q"))
        );
    }

    #[test]
    fn latencies() {
        let t = six_chain();
        let a = ClientId::from("a");
        assert_eq!(t.one_way_latency(&a, &s("X")).unwrap(), 1);
        assert_eq!(t.one_way_latency(&a, &s("A")).unwrap(), 0);
        assert_eq!(t.one_way_latency(&a, &s("Z")).unwrap(), 3);
        assert!(matches!(
            t.one_way_latency(&ClientId::from("q"), &s("A")),
            Err(TopologyError::UnknownClient(_))
        ));
        let slow = t
            .with_clients([Client::new("a", "A").with_latency(4)])
            .unwrap();
        assert_eq!(slow.one_way_latency(&a, &s("A")).unwrap(), 4);
    }

    #[test]
    fn split_at_the_boundary_edge() {
        let t = six_chain();
        let (left, right) = t.split_components(&s("A"), &s("X")).unwrap();
        assert_eq!(left, set(&["C", "B", "A"]));
        assert_eq!(right, set(&["X", "Y", "Z"]));
        let (rest, leaf) = t.split_components(&s("Y"), &s("Z")).unwrap();
        assert_eq!(leaf, set(&["Z"]));
        assert_eq!(rest.len(), 5);
        assert!(matches!(
            t.split_components(&s("A"), &s("Z")),
            Err(TopologyError::UnknownLink(_))
        ));
    }

    #[test]
    fn star_spokes_split_off_single_leaves() {
        for n in 1..=7 {
            let mut names = vec![s("H")];
            names.extend((0..n).map(|i| s(&format!("L{i}"))));
            let links = (1..=n).map(|i| (s("H"), names[i].clone(), 1));
            let t = Topology::build(names.clone(), links, []).unwrap();
            let mut parts = 0;
            for leaf in &names[1..] {
                let (hub_side, leaf_side) = t.split_components(&s("H"), leaf).unwrap();
                assert_eq!((hub_side.len(), leaf_side.len()), (n, 1));
                parts += 1;
            }
            // cutting every spoke leaves the hub plus n isolated leaves
            assert_eq!(parts + 1, n + 1);
        }
    }

    #[test]
    fn pruefer_decode_counts() {
        let names: Vec<ServerId> = (0..4).map(|i| s(&format!("S{i}"))).collect();
        let mut shapes = BTreeSet::new();
        for a in 0..4 {
            for b in 0..4 {
                let t = Topology::from_pruefer(&names, &[a, b], 1);
                shapes.insert(t.links().map(|(l, _)| l).collect::<Vec<_>>());
            }
        }
        // Cayley: 4^(4-2) labelled trees
        assert_eq!(shapes.len(), 16);
    }
}
