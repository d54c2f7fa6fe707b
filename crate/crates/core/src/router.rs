//! Jurisdiction extraction and strategy selection.
//!
//! Queries that name states are routed to the state-wise strategy (search
//! only those partitions, one answer section per state); everything else goes
//! to the whole-index strategy.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Jurisdiction, UsState};

const BUILTIN_ADJACENCY: &str = include_str!("../data/adjacency.json");
const NEIGHBOR_TRIGGER: &str = "neighboring states";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "WDI")]
    Wdi,
    #[serde(rename = "SWI")]
    Swi,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Wdi => "WDI",
            Strategy::Swi => "SWI",
        })
    }
}

/// Strategy requested by a caller.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyChoice {
    #[default]
    Auto,
    Wdi,
    Swi,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("unknown strategy: {0} (expected auto, wdi or swi)")]
pub struct UnknownStrategy(pub String);

impl FromStr for StrategyChoice {
    type Err = UnknownStrategy;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "auto" => Ok(StrategyChoice::Auto),
            "wdi" => Ok(StrategyChoice::Wdi),
            "swi" => Ok(StrategyChoice::Swi),
            _ => Err(UnknownStrategy(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub strategy: Strategy,
    pub states: Vec<Jurisdiction>,
    pub expanded_from_neighbors: bool,
}

impl RoutingDecision {
    pub fn wdi() -> Self {
        RoutingDecision {
            strategy: Strategy::Wdi,
            states: Vec::new(),
            expanded_from_neighbors: false,
        }
    }
}

#[derive(Debug, Error)]
pub enum RouterError {
    #[error("{path}: {reason}")]
    Load { path: String, reason: String },
    #[error("adjacency table: {0}")]
    Adjacency(String),
    #[error("alias table: {0}")]
    Alias(String),
}

fn words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

/// Optional alias → jurisdiction table (e.g. `"Ala." → Alabama`).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AliasTable(BTreeMap<String, Jurisdiction>);

impl AliasTable {
    pub fn from_map(raw: &HashMap<String, String>) -> Result<Self, RouterError> {
        let mut out = BTreeMap::new();
        for (alias, canonical) in raw {
            let j = Jurisdiction::parse(canonical)
                .ok_or_else(|| RouterError::Alias(format!("{alias:?} maps to unknown jurisdiction {canonical:?}")))?;
            if words(alias).is_empty() {
                return Err(RouterError::Alias(format!("alias {alias:?} has no word characters")));
            }
            out.insert(alias.clone(), j);
        }
        Ok(AliasTable(out))
    }

    pub fn from_json(text: &str) -> Result<Self, RouterError> {
        let raw: HashMap<String, String> = serde_json::from_str(text).map_err(|e| RouterError::Alias(e.to_string()))?;
        Self::from_map(&raw)
    }

    pub fn load(path: &Path) -> Result<Self, RouterError> {
        Self::from_json(&read(path)?)
    }
}

/// State → neighboring states. Must cover all fifty states.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adjacency(BTreeMap<UsState, BTreeSet<UsState>>);

impl Adjacency {
    pub fn from_json(text: &str) -> Result<Self, RouterError> {
        let raw: BTreeMap<String, Vec<String>> =
            serde_json::from_str(text).map_err(|e| RouterError::Adjacency(e.to_string()))?;
        let state = |name: &str| {
            UsState::from_name(name).ok_or_else(|| RouterError::Adjacency(format!("unknown state {name:?}")))
        };
        let mut map = BTreeMap::new();
        for (k, vs) in &raw {
            let neighbors = vs.iter().map(|v| state(v)).collect::<Result<BTreeSet<_>, _>>()?;
            map.insert(state(k)?, neighbors);
        }
        if let Some(missing) = UsState::all().find(|s| !map.contains_key(s)) {
            return Err(RouterError::Adjacency(format!("no entry for {}", missing.name())));
        }
        Ok(Adjacency(map))
    }

    pub fn load(path: &Path) -> Result<Self, RouterError> {
        Self::from_json(&read(path)?)
    }

    /// The shipped table of shared land borders (point contacts excluded).
    pub fn builtin() -> Self {
        Self::from_json(BUILTIN_ADJACENCY).expect("builtin adjacency table is valid")
    }

    pub fn neighbors(&self, state: UsState) -> impl Iterator<Item = UsState> + '_ {
        self.0.get(&state).into_iter().flatten().copied()
    }
}

fn read(path: &Path) -> Result<String, RouterError> {
    std::fs::read_to_string(path).map_err(|e| RouterError::Load {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

/// Dictionary matcher over word sequences, longest pattern first.
struct Gazetteer {
    patterns: Vec<(Vec<String>, Jurisdiction)>,
}

impl Gazetteer {
    fn new(aliases: Option<&AliasTable>) -> Self {
        let mut patterns: Vec<(Vec<String>, Jurisdiction)> = UsState::all()
            .map(|s| (words(s.name()), Jurisdiction::State(s)))
            .collect();
        patterns.push((vec!["federal".into()], Jurisdiction::Federal));
        if let Some(table) = aliases {
            patterns.extend(table.0.iter().map(|(alias, j)| (words(alias), *j)));
        }
        // stable sort keeps canonical names ahead of aliases of equal length
        patterns.sort_by_key(|p| std::cmp::Reverse(p.0.len()));
        Gazetteer { patterns }
    }

    fn default_ref() -> &'static Gazetteer {
        static DEFAULT: OnceLock<Gazetteer> = OnceLock::new();
        DEFAULT.get_or_init(|| Gazetteer::new(None))
    }

    fn extract(&self, query: &str) -> Vec<Jurisdiction> {
        let tokens = words(query);
        let mut found = Vec::new();
        let mut i = 0;
        while i < tokens.len() {
            let hit = self
                .patterns
                .iter()
                .find(|(p, _)| tokens.len() - i >= p.len() && tokens[i..i + p.len()] == p[..]);
            match hit {
                Some((p, j)) => {
                    if !found.contains(j) {
                        found.push(*j);
                    }
                    i += p.len();
                }
                None => i += 1,
            }
        }
        found
    }
}

/// Jurisdictions named in `query`, in order of first mention.
pub fn extract_states(query: &str) -> Vec<Jurisdiction> {
    Gazetteer::default_ref().extract(query)
}

pub fn extract_states_with_aliases(query: &str, aliases: &AliasTable) -> Vec<Jurisdiction> {
    Gazetteer::new(Some(aliases)).extract(query)
}

fn mentions_neighbors(query: &str) -> bool {
    query
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
        .contains(NEIGHBOR_TRIGGER)
}

/// Append the neighbors of every named state when the query asks about
/// "neighboring states" and an adjacency table is configured. Neighbors are
/// deduplicated and appended in alphabetical order. The flag reports whether
/// anything was added.
pub fn expand_neighbors(
    states: &[Jurisdiction],
    query: &str,
    adjacency: Option<&Adjacency>,
) -> (Vec<Jurisdiction>, bool) {
    let mut out = states.to_vec();
    let Some(adjacency) = adjacency else {
        return (out, false);
    };
    if !mentions_neighbors(query) {
        return (out, false);
    }
    let extra: BTreeSet<UsState> = states
        .iter()
        .filter_map(|j| match j {
            Jurisdiction::State(s) => Some(*s),
            _ => None,
        })
        .flat_map(|s| adjacency.neighbors(s))
        .filter(|n| !states.contains(&Jurisdiction::State(*n)))
        .collect();
    // UsState orders by index into the alphabetical name list
    let expanded = !extra.is_empty();
    out.extend(extra.into_iter().map(Jurisdiction::State));
    (out, expanded)
}

#[derive(Debug, Clone)]
pub struct RouterConfig {
    pub swi_enabled: bool,
    pub adjacency: Option<Adjacency>,
    /// Also search the Federal partition whenever states are named.
    pub include_federal: bool,
    aliases: Option<std::sync::Arc<Gazetteer>>,
}

impl fmt::Debug for Gazetteer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Gazetteer({} patterns)", self.patterns.len())
    }
}

impl Default for RouterConfig {
    fn default() -> Self {
        RouterConfig::new(true, None, None, false)
    }
}

impl RouterConfig {
    pub fn new(
        swi_enabled: bool,
        aliases: Option<&AliasTable>,
        adjacency: Option<Adjacency>,
        include_federal: bool,
    ) -> Self {
        RouterConfig {
            swi_enabled,
            adjacency,
            include_federal,
            aliases: aliases.map(|t| std::sync::Arc::new(Gazetteer::new(Some(t)))),
        }
    }

    pub fn extract(&self, query: &str) -> Vec<Jurisdiction> {
        match &self.aliases {
            None => extract_states(query),
            Some(g) => g.extract(query),
        }
    }

    /// States the query targets after neighbor expansion and the optional
    /// Federal add-on. Ignores `swi_enabled`.
    pub fn target_states(&self, query: &str) -> (Vec<Jurisdiction>, bool) {
        let (mut states, expanded) = expand_neighbors(&self.extract(query), query, self.adjacency.as_ref());
        if self.include_federal && !states.is_empty() && !states.contains(&Jurisdiction::Federal) {
            states.push(Jurisdiction::Federal);
        }
        (states, expanded)
    }
}

pub fn route(query: &str, config: &RouterConfig) -> RoutingDecision {
    if !config.swi_enabled {
        return RoutingDecision::wdi();
    }
    let (states, expanded) = config.target_states(query);
    if states.is_empty() {
        RoutingDecision::wdi()
    } else {
        RoutingDecision {
            strategy: Strategy::Swi,
            states,
            expanded_from_neighbors: expanded,
        }
    }
}
