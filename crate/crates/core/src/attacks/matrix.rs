//! Which user-initiated API can be confounded into which attacker API.
//!
//! Feasibility is derived from authorization alone: the attacker may run
//! API B in place of API A when everything B needs is something A's flow
//! hands over. NFC proximity adds UP to every flow; credentials left at
//! the default protection policy drop GetAssertion's UV requirement.

use std::fmt;

use crate::codec::Command;

/// Column order of the rendered grid.
pub const COLUMN_ORDER: [Command; 7] = [
    Command::CredentialManagement,
    Command::Reset,
    Command::GetAssertion,
    Command::MakeCredential,
    Command::ClientPin,
    Command::Selection,
    Command::GetInfo,
];

/// Row order of the rendered grid.
pub const ROW_ORDER: [Command; 7] = Command::ALL;

/// Number of cells the grid has, diagonal included.
pub const CELL_COUNT: usize = 49;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AuthSet {
    pub uv: bool,
    pub up: bool,
}

impl AuthSet {
    pub const NONE: AuthSet = AuthSet { uv: false, up: false };

    pub const fn new(uv: bool, up: bool) -> Self {
        AuthSet { uv, up }
    }

    pub fn subset_of(self, other: AuthSet) -> bool {
        (!self.uv || other.uv) && (!self.up || other.up)
    }

    pub fn with_up(self) -> Self {
        AuthSet { up: true, ..self }
    }
}

impl fmt::Display for AuthSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.uv, self.up) {
            (true, true) => f.write_str("{UV,UP}"),
            (true, false) => f.write_str("{UV}"),
            (false, true) => f.write_str("{UP}"),
            (false, false) => f.write_str("{}"),
        }
    }
}

/// Authorization a user hands over while running `api` through the client.
pub fn provided_by(api: Command) -> AuthSet {
    match api {
        Command::MakeCredential | Command::GetAssertion => AuthSet::new(true, true),
        Command::CredentialManagement | Command::ClientPin => AuthSet::new(true, false),
        Command::Reset | Command::Selection => AuthSet::new(false, true),
        Command::GetInfo => AuthSet::NONE,
    }
}

/// Authorization the attacker needs to reach its goal with `api`.
///
/// GetAssertion is sent with `up=false`, so only UV remains. Selection's
/// goal is keeping the device busy, which the pending touch request does
/// whether or not anyone answers it.
pub fn required_by(api: Command, weak_credprotect: bool) -> AuthSet {
    match api {
        Command::MakeCredential => AuthSet::new(true, true),
        Command::GetAssertion => AuthSet::new(!weak_credprotect, false),
        Command::CredentialManagement => AuthSet::new(true, false),
        Command::Reset => AuthSet::new(false, true),
        Command::ClientPin | Command::Selection | Command::GetInfo => AuthSet::NONE,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Constraint {
    Always,
    ProximityOnly,
    WeakCredProtectOnly,
    Infeasible,
}

impl Constraint {
    pub fn feasible(self) -> bool {
        self != Constraint::Infeasible
    }

    pub fn marker(self) -> &'static str {
        match self {
            Constraint::Always => "✓",
            Constraint::ProximityOnly => "✓¹",
            Constraint::WeakCredProtectOnly => "✓²",
            Constraint::Infeasible => "n/a",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Constraint::Always => "always",
            Constraint::ProximityOnly => "proximity_only",
            Constraint::WeakCredProtectOnly => "weak_credprotect_only",
            Constraint::Infeasible => "infeasible",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConfusionPair {
    pub api_a: Command,
    pub api_b: Command,
    pub constraint: Constraint,
}

/// Context the grid is computed for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatrixConfig {
    /// The attacker can reach the device over NFC.
    pub nfc: bool,
    /// Some targeted credentials use the default protection policy.
    pub weak_credprotect: bool,
}

impl Default for MatrixConfig {
    fn default() -> Self {
        MatrixConfig { nfc: true, weak_credprotect: true }
    }
}

/// Classifies one (A, B) cell.
pub fn classify(api_a: Command, api_b: Command, config: MatrixConfig) -> Constraint {
    if api_a == api_b {
        return Constraint::Infeasible;
    }
    let have = provided_by(api_a);
    if required_by(api_b, false).subset_of(have) {
        Constraint::Always
    } else if config.weak_credprotect && required_by(api_b, true).subset_of(have) {
        Constraint::WeakCredProtectOnly
    } else if config.nfc && required_by(api_b, false).subset_of(have.with_up()) {
        Constraint::ProximityOnly
    } else {
        Constraint::Infeasible
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub config: MatrixConfig,
    /// Row-major over [`ROW_ORDER`] × [`COLUMN_ORDER`].
    pub cells: Vec<ConfusionPair>,
}

pub fn enumerate_confusions(config: MatrixConfig) -> ConfusionMatrix {
    let cells = ROW_ORDER
        .iter()
        .flat_map(|&a| COLUMN_ORDER.iter().map(move |&b| (a, b)))
        .map(|(api_a, api_b)| ConfusionPair { api_a, api_b, constraint: classify(api_a, api_b, config) })
        .collect();
    ConfusionMatrix { config, cells }
}

impl ConfusionMatrix {
    pub fn get(&self, api_a: Command, api_b: Command) -> ConfusionPair {
        *self
            .cells
            .iter()
            .find(|c| c.api_a == api_a && c.api_b == api_b)
            .expect("every pair has a cell")
    }

    pub fn feasible(&self) -> impl Iterator<Item = &ConfusionPair> {
        self.cells.iter().filter(|c| c.constraint.feasible())
    }

    /// Feasible cells per attacker API, in [`COLUMN_ORDER`].
    pub fn column_totals(&self) -> [usize; 7] {
        COLUMN_ORDER.map(|b| self.feasible().filter(|c| c.api_b == b).count())
    }

    /// One line noting how many of the grid's cells are feasible.
    pub fn metadata(&self) -> String {
        let feasible = self.feasible().count();
        format!(
            "feasible={feasible} cells={CELL_COUNT} diagonal=7 nfc={} weak_credprotect={}",
            self.config.nfc, self.config.weak_credprotect
        )
    }

    pub fn render(&self) -> String {
        let mut out = String::from("A\\B");
        for b in COLUMN_ORDER {
            out.push_str(&format!(" {:>4}", b.short_name()));
        }
        out.push('\n');
        for a in ROW_ORDER {
            out.push_str(&format!("{:<3}", a.short_name()));
            for b in COLUMN_ORDER {
                out.push_str(&format!(" {:>4}", self.get(a, b).constraint.marker()));
            }
            out.push('\n');
        }
        out.push_str("Tot");
        for t in self.column_totals() {
            out.push_str(&format!(" {t:>4}"));
        }
        out.push('\n');
        out
    }

    pub fn totals_line(&self) -> String {
        self.column_totals().map(|t| t.to_string()).join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use Command::*;

    #[test]
    fn diagonal_is_never_feasible() {
        let m = enumerate_confusions(MatrixConfig::default());
        for c in Command::ALL {
            assert_eq!(m.get(c, c).constraint, Constraint::Infeasible);
        }
        assert_eq!(m.cells.len(), CELL_COUNT);
    }

    #[test]
    fn annotated_cells() {
        let m = enumerate_confusions(MatrixConfig::default());
        assert_eq!(m.get(GetInfo, Reset).constraint, Constraint::ProximityOnly);
        assert_eq!(m.get(Reset, GetAssertion).constraint, Constraint::WeakCredProtectOnly);
        assert_eq!(m.get(GetAssertion, CredentialManagement).constraint, Constraint::Always);
        assert_eq!(m.get(Selection, MakeCredential).constraint, Constraint::Infeasible);
    }

    #[test]
    fn without_nfc_proximity_cells_drop_out() {
        let with = enumerate_confusions(MatrixConfig::default());
        let without = enumerate_confusions(MatrixConfig { nfc: false, ..Default::default() });
        for (x, y) in with.cells.iter().zip(&without.cells) {
            let expect = match x.constraint {
                Constraint::ProximityOnly => Constraint::Infeasible,
                c => c,
            };
            assert_eq!(y.constraint, expect, "{:?}->{:?}", x.api_a, x.api_b);
        }
        assert!(without.feasible().count() < with.feasible().count());
    }

    #[test]
    fn render_has_totals_row() {
        let m = enumerate_confusions(MatrixConfig::default());
        let text = m.render();
        assert_eq!(text.lines().count(), 9);
        assert!(text.lines().last().unwrap().starts_with("Tot"));
    }
}
