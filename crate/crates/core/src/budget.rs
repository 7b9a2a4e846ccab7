//! Parameter accounting: how much of the system is actually updated.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Frozen,
    Trainable,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Frozen => "frozen",
            Role::Trainable => "trainable",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetEntry {
    pub name: String,
    pub count: u64,
    pub role: Role,
}

impl BudgetEntry {
    pub fn new(name: impl Into<String>, count: u64, role: Role) -> Self {
        Self {
            name: name.into(),
            count,
            role,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamBudget {
    pub entries: Vec<BudgetEntry>,
    pub trainable_total: u64,
    pub frozen_total: u64,
    pub ratio: f64,
}

/// Sum entries by role and compute `trainable / (trainable + frozen)`.
pub fn param_budget(entries: Vec<BudgetEntry>) -> Result<ParamBudget> {
    let mut trainable_total = 0u64;
    let mut frozen_total = 0u64;
    for e in &entries {
        match e.role {
            Role::Trainable => trainable_total += e.count,
            Role::Frozen => frozen_total += e.count,
        }
    }
    let total = trainable_total + frozen_total;
    if total == 0 {
        return Err(Error::Degenerate(
            "parameter budget has zero total parameters".into(),
        ));
    }
    // Totals stay below 2^53, so the division is exact to float64 rounding.
    let ratio = trainable_total as f64 / total as f64;
    Ok(ParamBudget {
        entries,
        trainable_total,
        frozen_total,
        ratio,
    })
}

/// The full-size system: grouping projection, LoRA and three output
/// projections are updated; the unified encoder, the 7B LLM and the three
/// diffusion backbones stay frozen.
pub fn paper_scale_entries() -> Vec<BudgetEntry> {
    const M: u64 = 1_000_000;
    vec![
        BudgetEntry::new("encoder (ImageBind)", 1_200 * M, Role::Frozen),
        BudgetEntry::new("input projection (grouping)", 28 * M, Role::Trainable),
        BudgetEntry::new("llm (Vicuna)", 7_000 * M, Role::Frozen),
        BudgetEntry::new("llm lora", 33 * M, Role::Trainable),
        BudgetEntry::new("output projection image", 31 * M, Role::Trainable),
        BudgetEntry::new("output projection audio", 31 * M, Role::Trainable),
        BudgetEntry::new("output projection video", 32 * M, Role::Trainable),
        BudgetEntry::new("diffusion image (SD)", 1_300 * M, Role::Frozen),
        BudgetEntry::new("diffusion audio (AudioLDM)", 975 * M, Role::Frozen),
        BudgetEntry::new("diffusion video (Zeroscope)", 1_800 * M, Role::Frozen),
    ]
}

impl ParamBudget {
    /// Plain-text table with one line per entry and a summary line.
    pub fn render_table(&self) -> String {
        let width = self
            .entries
            .iter()
            .map(|e| e.name.len())
            .max()
            .unwrap_or(9)
            .max(9);
        let mut out = format!("{:<width$}  {:>15}  {}\n", "component", "params", "role");
        for e in &self.entries {
            out.push_str(&format!(
                "{:<width$}  {:>15}  {}\n",
                e.name, e.count, e.role
            ));
        }
        out.push_str(&format!(
            "trainable {} / frozen {} -> ratio {:.5} (~{:.0}%)\n",
            self.trainable_total,
            self.frozen_total,
            self.ratio,
            self.ratio * 100.0
        ));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn paper_scale_ratio() {
        let b = param_budget(paper_scale_entries()).unwrap();
        assert_eq!(b.trainable_total, 155_000_000);
        assert_eq!(b.frozen_total, 12_275_000_000);
        assert!((b.ratio - 155.0 / 12_430.0).abs() < 1e-12);
        assert!((b.ratio - 0.01247).abs() < 1e-4);
    }

    #[test]
    fn all_frozen_is_zero_ratio() {
        let b = param_budget(vec![BudgetEntry::new("x", 100, Role::Frozen)]).unwrap();
        assert_eq!(b.ratio, 0.0);
    }

    #[test]
    fn half_and_half() {
        let b = param_budget(vec![
            BudgetEntry::new("a", 50, Role::Trainable),
            BudgetEntry::new("b", 50, Role::Frozen),
        ])
        .unwrap();
        assert_eq!(b.ratio, 0.5);
    }

    #[test]
    fn zero_totals_are_degenerate() {
        assert!(matches!(
            param_budget(vec![BudgetEntry::new("a", 0, Role::Trainable)]),
            Err(Error::Degenerate(_))
        ));
        assert!(matches!(param_budget(vec![]), Err(Error::Degenerate(_))));
    }

    proptest! {
        #[test]
        fn ratio_is_exact_and_bounded(counts in proptest::collection::vec((0u64..1_000_000_000, any::<bool>()), 1..12)) {
            let entries: Vec<_> = counts
                .iter()
                .enumerate()
                .map(|(i, &(c, t))| BudgetEntry::new(format!("e{i}"), c, if t { Role::Trainable } else { Role::Frozen }))
                .collect();
            let tr: u64 = counts.iter().filter(|c| c.1).map(|c| c.0).sum();
            let fr: u64 = counts.iter().filter(|c| !c.1).map(|c| c.0).sum();
            match param_budget(entries) {
                Ok(b) => {
                    prop_assert_eq!(b.trainable_total, tr);
                    prop_assert_eq!(b.frozen_total, fr);
                    prop_assert!((0.0..=1.0).contains(&b.ratio));
                    let exact = tr as f64 / (tr + fr) as f64;
                    prop_assert!((b.ratio - exact).abs() < 1e-12);
                }
                Err(_) => prop_assert_eq!(tr + fr, 0),
            }
        }
    }
}
