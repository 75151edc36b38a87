//! The network transformation space: backward substitution and removal.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Approximator, BackwardMode, Graph, VertexId};
use crate::error::{Error, Result};

/// One point of the transformation space. Vertices absent from `bpda`
/// keep their native backward; vertices absent from `removal` are kept.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TransformPolicy {
    #[serde(default)]
    pub bpda: BTreeMap<VertexId, Approximator>,
    #[serde(default)]
    pub removal: BTreeMap<VertexId, bool>,
}

impl TransformPolicy {
    pub fn is_empty(&self) -> bool {
        self.bpda.is_empty() && !self.removal.values().any(|&r| r)
    }

    /// Short human-readable description, e.g. `bpda(3=identity) remove(7)`.
    pub fn summary(&self) -> String {
        let mut parts = Vec::new();
        if !self.bpda.is_empty() {
            let items: Vec<String> = self
                .bpda
                .iter()
                .map(|(v, a)| format!("{v}={}", a.kind()))
                .collect();
            parts.push(format!("bpda({})", items.join(",")));
        }
        let removed: Vec<String> = self
            .removal
            .iter()
            .filter(|(_, r)| **r)
            .map(|(v, _)| v.to_string())
            .collect();
        if !removed.is_empty() {
            parts.push(format!("remove({})", removed.join(",")));
        }
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join(" ")
        }
    }
}

/// Operator-level vertices without a usable derivative whose input and
/// output dimensions agree.
pub fn list_bpda_candidates(graph: &Graph) -> Vec<VertexId> {
    graph
        .vertices()
        .iter()
        .filter(|v| !v.internal && v.is_removable() && !v.op.is_differentiable())
        .map(|v| v.id)
        .collect()
}

/// Operator-level vertices whose input and output dimensions agree.
pub fn list_removal_candidates(graph: &Graph) -> Vec<VertexId> {
    graph
        .vertices()
        .iter()
        .filter(|v| !v.internal && v.is_removable())
        .map(|v| v.id)
        .collect()
}

/// Builds the surrogate `t(f)`; the source graph is left untouched.
/// A vertex that is both substituted and removed is simply removed.
pub fn apply_transform(graph: &Graph, policy: &TransformPolicy) -> Result<Graph> {
    let bpda = list_bpda_candidates(graph);
    let removal = list_removal_candidates(graph);
    for id in policy.bpda.keys() {
        graph.vertex(*id)?;
        if !bpda.contains(id) {
            return Err(Error::NotCandidate {
                vertex: *id,
                what: "BPDA",
            });
        }
    }
    for id in policy.removal.keys() {
        graph.vertex(*id)?;
        if !removal.contains(id) {
            return Err(Error::NotCandidate {
                vertex: *id,
                what: "removal",
            });
        }
    }
    let mut out = graph.clone();
    for (id, approx) in &policy.bpda {
        let v = out.vertex_mut(*id)?;
        check_approximator(approx, &v.in_shape)?;
        v.backward = BackwardMode::Bpda(approx.clone());
    }
    for (id, remove) in &policy.removal {
        if *remove {
            out.splice_out(*id)?;
        }
    }
    Ok(out)
}

fn check_approximator(approx: &Approximator, shape: &[usize]) -> Result<()> {
    let (c, _, _) = super::as_image(shape);
    let ok = match approx {
        Approximator::Identity => true,
        Approximator::Conv1 { layer } => layer.c_in == c && layer.c_out == c && layer.kernel == 1,
        Approximator::Conv2Relu { hidden, output } => {
            hidden.c_in == c && hidden.c_out == c && output.c_in == c && output.c_out == c
        }
    };
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidParam(format!(
            "approximator channels do not match vertex shape {shape:?}"
        )))
    }
}
