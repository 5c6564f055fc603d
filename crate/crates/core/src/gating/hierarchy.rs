use serde::{Deserialize, Serialize};

use super::CellTable;
use crate::{Error, Result};

/// `child` may only be positive where `parent` is positive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HierarchyRule {
    pub child: String,
    pub parent: String,
}

/// Validated rule set: markers in topological order (parents first) with the
/// parents of each.
#[derive(Debug, Clone, PartialEq)]
pub struct Hierarchy {
    order: Vec<(usize, Vec<usize>)>,
}

impl Hierarchy {
    pub fn new(rules: &[HierarchyRule], markers: &[String]) -> Result<Self> {
        let index = |name: &str| {
            markers
                .iter()
                .position(|m| m == name)
                .ok_or_else(|| Error::Invalid(format!("hierarchy rule names unknown marker `{name}`")))
        };
        let n = markers.len();
        let mut parents = vec![Vec::new(); n];
        for rule in rules {
            let (c, p) = (index(&rule.child)?, index(&rule.parent)?);
            if c == p {
                return Err(Error::CyclicHierarchy(rule.child.clone()));
            }
            if !parents[c].contains(&p) {
                parents[c].push(p);
            }
        }
        // Kahn's algorithm, lowest index first for a stable order
        let mut indegree: Vec<usize> = parents.iter().map(Vec::len).collect();
        let mut ready: std::collections::BTreeSet<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(&next) = ready.iter().next() {
            ready.remove(&next);
            order.push((next, parents[next].clone()));
            for child in 0..n {
                if parents[child].contains(&next) {
                    indegree[child] -= 1;
                    if indegree[child] == 0 {
                        ready.insert(child);
                    }
                }
            }
        }
        if order.len() < n {
            let stuck = (0..n).find(|&i| indegree[i] > 0).expect("cycle member");
            return Err(Error::CyclicHierarchy(markers[stuck].clone()));
        }
        order.retain(|(_, p)| !p.is_empty());
        Ok(Self { order })
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Force child labels false wherever a parent is negative. Posteriors are
    /// left untouched.
    pub fn apply(&self, table: &mut CellTable) {
        for row in &mut table.rows {
            let Some(labels) = row.label.as_mut() else { continue };
            for (child, parents) in &self.order {
                if parents.iter().any(|&p| !labels[p]) {
                    labels[*child] = false;
                }
            }
        }
    }
}

pub fn apply_hierarchy(table: &CellTable, rules: &[HierarchyRule]) -> Result<CellTable> {
    let hierarchy = Hierarchy::new(rules, &table.markers)?;
    let mut out = table.clone();
    hierarchy.apply(&mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gating::CellRow;
    use proptest::prelude::*;

    fn rule(child: &str, parent: &str) -> HierarchyRule {
        HierarchyRule { child: child.into(), parent: parent.into() }
    }

    fn table(markers: &[&str], labels: Vec<Vec<bool>>) -> CellTable {
        CellTable {
            markers: markers.iter().map(|s| s.to_string()).collect(),
            rows: labels
                .into_iter()
                .enumerate()
                .map(|(i, l)| CellRow {
                    tile_id: "t".into(),
                    cell_id: i as u32 + 1,
                    centroid: (0.0, 0.0),
                    mean_expr: vec![0.0; l.len()],
                    posterior: Some(vec![0.5; l.len()]),
                    label: Some(l),
                })
                .collect(),
        }
    }

    /// Iterate every rule until nothing changes.
    fn fixpoint_oracle(t: &CellTable, rules: &[HierarchyRule]) -> CellTable {
        let mut out = t.clone();
        loop {
            let mut changed = false;
            for row in &mut out.rows {
                let l = row.label.as_mut().unwrap();
                for r in rules {
                    let (c, p) = (
                        t.markers.iter().position(|m| *m == r.child).unwrap(),
                        t.markers.iter().position(|m| *m == r.parent).unwrap(),
                    );
                    if l[c] && !l[p] {
                        l[c] = false;
                        changed = true;
                    }
                }
            }
            if !changed {
                return out;
            }
        }
    }

    #[test]
    fn cd3_requires_cd45() {
        let t = table(&["CD45", "CD3"], vec![vec![false, true], vec![true, true]]);
        let out = apply_hierarchy(&t, &[rule("CD3", "CD45")]).unwrap();
        assert_eq!(out.labels(1), vec![false, true]);
        assert_eq!(out.rows[0].posterior, t.rows[0].posterior);
    }

    #[test]
    fn empty_rules_identity() {
        let t = table(&["a", "b"], vec![vec![false, true]]);
        assert_eq!(apply_hierarchy(&t, &[]).unwrap(), t);
    }

    #[test]
    fn chain_resolves_in_one_pass() {
        // rules listed child-first on purpose
        let rules = [rule("CD8", "CD3"), rule("CD3", "CD45")];
        let t = table(&["CD8", "CD3", "CD45"], vec![vec![true, true, false]]);
        let out = apply_hierarchy(&t, &rules).unwrap();
        assert_eq!(out.rows[0].label, Some(vec![false, false, false]));
        assert_eq!(out, fixpoint_oracle(&t, &rules));
    }

    #[test]
    fn cycles_rejected() {
        let markers: Vec<String> = vec!["a".into(), "b".into(), "c".into()];
        let rules = [rule("a", "b"), rule("b", "c"), rule("c", "a")];
        assert!(matches!(Hierarchy::new(&rules, &markers), Err(Error::CyclicHierarchy(_))));
        assert!(Hierarchy::new(&[rule("a", "a")], &markers).is_err());
        assert!(Hierarchy::new(&[rule("a", "zzz")], &markers).is_err());
    }

    proptest! {
        #[test]
        fn fixpoint_and_no_violations(bits in proptest::collection::vec(proptest::collection::vec(any::<bool>(), 4), 1..40)) {
            let rules = [rule("CD3", "CD45"), rule("CD8", "CD3"), rule("CD4", "CD3")];
            let t = table(&["CD45", "CD3", "CD8", "CD4"], bits);
            let once = apply_hierarchy(&t, &rules).unwrap();
            prop_assert_eq!(&once, &fixpoint_oracle(&t, &rules));
            prop_assert_eq!(&apply_hierarchy(&once, &rules).unwrap(), &once);
            for m in 0..4 {
                let before = t.labels(m).iter().filter(|&&b| b).count();
                let after = once.labels(m).iter().filter(|&&b| b).count();
                prop_assert!(after <= before);
            }
        }
    }
}
