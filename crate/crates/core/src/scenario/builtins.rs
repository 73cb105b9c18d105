use super::{parse_scenario, Scenario, ScenarioError};

/// A scenario shipped with the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Builtin {
    pub name: &'static str,
    pub source: &'static str,
}

impl Builtin {
    pub fn scenario(&self) -> Result<Scenario, ScenarioError> {
        Ok(parse_scenario(self.source)?)
    }

    /// The `summary` line of the source.
    pub fn summary(&self) -> &'static str {
        self.source
            .lines()
            .find_map(|l| l.trim().strip_prefix("summary "))
            .unwrap_or("")
    }
}

macro_rules! corpus {
    ($($name:literal),* $(,)?) => {
        &[$(Builtin { name: $name, source: include_str!(concat!("../../scenarios/", $name, ".scn")) }),*]
    };
}

const CORPUS: &[Builtin] = corpus![
    "flowing-topic",
    "colliding-deop",
    "netjoin-repair",
    "netjoin-conflict",
    "toggle-convergence",
    "fake-join",
    "detect-probe",
    "manual-repair",
    "hidden-ops",
    "cloak",
    "anon-monitor",
    "multi-boundary",
    "jittered-desync",
];

pub fn builtins() -> &'static [Builtin] {
    CORPUS
}

pub fn builtin(name: &str) -> Option<&'static Builtin> {
    CORPUS.iter().find(|b| b.name == name)
}

/// Names and summaries, in corpus order.
pub fn list_builtins() -> Vec<(&'static str, &'static str)> {
    CORPUS.iter().map(|b| (b.name, b.summary())).collect()
}
