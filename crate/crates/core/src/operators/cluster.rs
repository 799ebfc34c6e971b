use serde::Serialize;

use crate::prompt::{render_element, Candidate, ClusterGroup, Payload, PromptTask};
use crate::relation::{extract_elements, Granularity, Source};

use super::{resolve_variant, Engine, LroKind, NoteKind, OperatorError, Requirement, Variant};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Cluster {
    pub label: Option<String>,
    /// Element ids, ascending.
    pub members: Vec<usize>,
}

/// A partition of the element ids `0..n`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ClusterResult {
    pub clusters: Vec<Cluster>,
}

impl ClusterResult {
    pub fn k(&self) -> usize {
        self.clusters.len()
    }

    pub fn element_count(&self) -> usize {
        self.clusters.iter().map(|c| c.members.len()).sum()
    }

    /// One label per element; unlabeled clusters are named `cluster_<i>`.
    pub fn labels(&self) -> Vec<String> {
        let mut out = vec![String::new(); self.element_count()];
        for (i, c) in self.clusters.iter().enumerate() {
            let label = c.label.clone().unwrap_or_else(|| format!("cluster_{i}"));
            for &m in &c.members {
                if let Some(slot) = out.get_mut(m) {
                    slot.clone_from(&label);
                }
            }
        }
        out
    }

    /// Cluster index of each element.
    pub fn assignment(&self) -> Vec<usize> {
        let mut out = vec![usize::MAX; self.element_count()];
        for (i, c) in self.clusters.iter().enumerate() {
            for &m in &c.members {
                if let Some(slot) = out.get_mut(m) {
                    *slot = i;
                }
            }
        }
        out
    }

    /// Whether the clusters are disjoint, non-empty and cover `0..n`.
    pub fn is_partition_of(&self, n: usize) -> bool {
        let mut seen = vec![false; n];
        for c in &self.clusters {
            if c.members.is_empty() {
                return false;
            }
            for &m in &c.members {
                if m >= n || std::mem::replace(&mut seen[m], true) {
                    return false;
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

/// Turns an arbitrary assignment of `0..n` into a partition: groups with the
/// same label merge, repeated elements stay in their first group, omitted
/// elements become singleton clusters, and empty groups are dropped. Returns
/// a warning for every repair.
pub fn repair_partition(n: usize, groups: Vec<ClusterGroup>) -> (ClusterResult, Vec<String>) {
    let mut warnings = Vec::new();
    let mut seen = vec![false; n];
    let mut clusters: Vec<Cluster> = Vec::new();
    for g in groups {
        let label = g
            .label
            .map(|l| l.trim().to_string())
            .filter(|l| !l.is_empty());
        let pos = match label
            .as_ref()
            .and_then(|l| clusters.iter().position(|c| c.label.as_ref() == Some(l)))
        {
            Some(p) => {
                warnings.push(format!(
                    "merged repeated cluster label `{}`",
                    label.as_deref().unwrap_or_default()
                ));
                p
            }
            None => {
                clusters.push(Cluster {
                    label,
                    members: Vec::new(),
                });
                clusters.len() - 1
            }
        };
        for m in g.members {
            if m >= n {
                warnings.push(format!("dropped out-of-range element {m}"));
            } else if std::mem::replace(&mut seen[m], true) {
                warnings.push(format!(
                    "element {m} was assigned twice; kept its first cluster"
                ));
            } else {
                clusters[pos].members.push(m);
            }
        }
    }
    clusters.retain(|c| !c.members.is_empty());
    let omitted: Vec<usize> = (0..n).filter(|&i| !seen[i]).collect();
    if !omitted.is_empty() {
        warnings.push(format!(
            "elements {omitted:?} were not assigned; each got its own cluster"
        ));
    }
    for m in omitted {
        let mut label = format!("unassigned_{m}");
        while clusters
            .iter()
            .any(|c| c.label.as_deref() == Some(label.as_str()))
        {
            label.push('_');
        }
        clusters.push(Cluster {
            label: Some(label),
            members: vec![m],
        });
    }
    for c in &mut clusters {
        c.members.sort_unstable();
    }
    (ClusterResult { clusters }, warnings)
}

fn summary(c: &Candidate<'_>, opts: &crate::prompt::PromptOptions) -> String {
    const MAX: usize = 80;
    let s = render_element(&c.element, opts);
    if s.chars().count() <= MAX {
        s
    } else {
        format!("{}...", s.chars().take(MAX).collect::<String>())
    }
}

impl Engine {
    pub async fn lro_cluster(
        &self,
        source: Source<'_>,
        g: Granularity,
        l: &Requirement,
        variant: Option<Variant>,
    ) -> Result<ClusterResult, OperatorError> {
        let variant = resolve_variant(LroKind::Cluster, g, variant)?;
        let candidates: Vec<Candidate<'_>> = extract_elements(source, g)?
            .into_iter()
            .enumerate()
            .map(|(i, e)| Candidate::new(i, e))
            .collect();
        let n = candidates.len();
        if n == 0 {
            return Ok(ClusterResult::default());
        }
        if variant == Variant::All {
            let ask = self.build(
                variant,
                &PromptTask::ClusterAll {
                    g,
                    candidates: &candidates,
                },
                l,
            )?;
            let Payload::Assignment(groups) = self.ask_one(ask).await? else {
                unreachable!("assignment shape")
            };
            let (result, warnings) = repair_partition(n, groups);
            for w in warnings {
                self.note(NoteKind::Warning, format!("cluster: {w}"));
            }
            return Ok(result);
        }
        const SHOWN: usize = 3;
        let mut clusters: Vec<Cluster> = Vec::new();
        for c in &candidates {
            let listing: Vec<(String, Vec<String>)> = clusters
                .iter()
                .map(|cl| {
                    let mut shown: Vec<String> = cl
                        .members
                        .iter()
                        .take(SHOWN)
                        .map(|&m| summary(&candidates[m], self.options()))
                        .collect();
                    if cl.members.len() > SHOWN {
                        shown.push(format!("(+{} more)", cl.members.len() - SHOWN));
                    }
                    (cl.label.clone().unwrap_or_default(), shown)
                })
                .collect();
            let ask = self.build(
                variant,
                &PromptTask::ClusterOne {
                    g,
                    clusters: &listing,
                    candidate: c,
                },
                l,
            )?;
            let Payload::Label(label) = self.ask_one(ask).await? else {
                unreachable!("label shape")
            };
            let existing = clusters.iter_mut().find(|cl| {
                cl.label
                    .as_deref()
                    .is_some_and(|x| x.eq_ignore_ascii_case(&label))
            });
            match existing {
                Some(cl) => cl.members.push(c.id),
                None => clusters.push(Cluster {
                    label: Some(label),
                    members: vec![c.id],
                }),
            }
        }
        Ok(ClusterResult { clusters })
    }
}
