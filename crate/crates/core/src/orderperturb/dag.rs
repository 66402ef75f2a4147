use std::collections::BTreeMap;

/// Integer value of every variable in one evaluated sample.
pub type Values = BTreeMap<String, i64>;

/// A non-source variable and the rule that produces it.
#[derive(Clone, Debug)]
pub struct Rule {
    pub name: &'static str,
    /// Parent variables in the order they appear in `expr`.
    pub parents: &'static [&'static str],
    /// Right-hand side as rendered in the reasoning text.
    pub expr: &'static str,
    eval: fn(&[f64]) -> f64,
    truncate: bool,
}

impl Rule {
    /// Applies the rule to integer parent values (given in `parents` order).
    pub fn apply(&self, parents: &[i64]) -> i64 {
        let raw = (self.eval)(&parents.iter().map(|&v| v as f64).collect::<Vec<_>>());
        if self.truncate {
            raw.trunc() as i64
        } else {
            raw.round_ties_even() as i64
        }
    }
}

/// The fixed fifteen-variable generating graph.
#[derive(Clone, Debug)]
pub struct DagTemplate {
    pub sources: [&'static str; 2],
    /// Rules in topological (canonical) order.
    pub rules: Vec<Rule>,
    pub target: &'static str,
}

impl Default for DagTemplate {
    fn default() -> Self {
        Self::standard()
    }
}

impl DagTemplate {
    pub fn standard() -> Self {
        let rules = vec![
            Rule {
                name: "Quasar",
                parents: &["Zorin", "Vortex"],
                expr: "(Zorin + Vortex) * 0.5 + 10",
                eval: |p| (p[0] + p[1]) * 0.5 + 10.0,
                truncate: false,
            },
            Rule {
                name: "Flux",
                parents: &["Zorin", "Vortex"],
                expr: "(Zorin - Vortex) * 0.6 + 20",
                eval: |p| (p[0] - p[1]) * 0.6 + 20.0,
                truncate: false,
            },
            Rule {
                name: "Radiant",
                parents: &["Quasar", "Flux"],
                expr: "(Quasar + 2 * Flux) / 3",
                eval: |p| (p[0] + 2.0 * p[1]) / 3.0,
                truncate: false,
            },
            Rule {
                name: "Nova",
                parents: &["Quasar", "Flux", "Zorin"],
                expr: "(Quasar - Flux + Zorin) / 3 + 5",
                eval: |p| (p[0] - p[1] + p[2]) / 3.0 + 5.0,
                truncate: false,
            },
            Rule {
                name: "Gravity",
                parents: &["Radiant", "Quasar"],
                expr: "(Radiant * Quasar) / 120 + 8",
                eval: |p| (p[0] * p[1]) / 120.0 + 8.0,
                truncate: false,
            },
            Rule {
                name: "Pulse",
                parents: &["Radiant", "Flux"],
                expr: "Radiant * 0.4 + Flux * 0.9",
                eval: |p| p[0] * 0.4 + p[1] * 0.9,
                truncate: false,
            },
            Rule {
                name: "Helix",
                parents: &["Gravity", "Pulse", "Radiant"],
                expr: "(Gravity + Pulse + Radiant) / 3",
                eval: |p| (p[0] + p[1] + p[2]) / 3.0,
                truncate: false,
            },
            Rule {
                name: "Echo",
                parents: &["Pulse", "Flux"],
                expr: "(Pulse - Flux) * 0.8",
                eval: |p| (p[0] - p[1]) * 0.8,
                truncate: false,
            },
            Rule {
                name: "Comet",
                parents: &["Pulse", "Gravity"],
                expr: "(Pulse + Gravity) * 0.6 + 2",
                eval: |p| (p[0] + p[1]) * 0.6 + 2.0,
                truncate: false,
            },
            Rule {
                name: "Aether",
                parents: &["Echo", "Gravity"],
                expr: "(Echo + Gravity) * 0.5",
                eval: |p| (p[0] + p[1]) * 0.5,
                truncate: false,
            },
            Rule {
                name: "Nebula",
                parents: &["Helix", "Comet"],
                expr: "(Helix + Comet) / 2 + 3",
                eval: |p| (p[0] + p[1]) / 2.0 + 3.0,
                truncate: false,
            },
            Rule {
                name: "Celestia",
                parents: &["Nebula", "Aether", "Echo"],
                expr: "(Nebula + Aether + Echo) * 1.1 + 6",
                eval: |p| (p[0] + p[1] + p[2]) * 1.1 + 6.0,
                truncate: false,
            },
            Rule {
                name: "Stardust",
                parents: &["Celestia"],
                expr: "int(Celestia * 0.7)",
                eval: |p| p[0] * 0.7,
                truncate: true,
            },
        ];
        Self {
            sources: ["Zorin", "Vortex"],
            rules,
            target: "Stardust",
        }
    }

    /// Variable names: sources first, then rules in canonical order.
    pub fn nodes(&self) -> Vec<&'static str> {
        self.sources
            .iter()
            .copied()
            .chain(self.rules.iter().map(|r| r.name))
            .collect()
    }

    pub fn rule(&self, name: &str) -> Option<&Rule> {
        self.rules.iter().find(|r| r.name == name)
    }

    pub fn is_source(&self, name: &str) -> bool {
        self.sources.contains(&name)
    }

    /// Canonical position of a rule (0-based).
    pub fn rule_index(&self, name: &str) -> Option<usize> {
        self.rules.iter().position(|r| r.name == name)
    }

    /// Evaluates every variable. Each rule sees the already-rounded integers
    /// of its parents.
    pub fn evaluate(&self, zorin: i64, vortex: i64) -> Values {
        let mut values = Values::new();
        values.insert(self.sources[0].to_string(), zorin);
        values.insert(self.sources[1].to_string(), vortex);
        for rule in &self.rules {
            let parents: Vec<i64> = rule.parents.iter().map(|p| values[*p]).collect();
            values.insert(rule.name.to_string(), rule.apply(&parents));
        }
        values
    }

    pub fn question(&self, zorin: i64, vortex: i64) -> String {
        format!(
            "Please infer the value of the {} variable based on the variables below. \
             The input variables are {} (value: {zorin}) and {} (value: {vortex}).",
            self.target, self.sources[0], self.sources[1]
        )
    }
}
