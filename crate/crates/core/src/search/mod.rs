//! The attack search: transformation search, TPE trial generation,
//! successive halving and greedy sequence construction.

mod engine;
pub mod sha;
pub mod space;
pub mod tpe;

pub use engine::{
    correctly_classified, default_attack, greedy_sequence_search, score, score_outcomes, time_bound, transformation_search,
    EvalSet, RoundReport, SampleResult, SearchConfig, SearchOutcome, SearchReport, SearchTiming, TransformEval,
    TransformReport, Trial,
};
pub use sha::{successive_halving, Rung, ShaResult};
pub use space::{AttackSpace, Dim, Space, Value};
pub use tpe::{Tpe, TpeConfig};

/// Serializes minus infinity (a timed-out score) as JSON null.
pub(crate) mod score_serde {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() { Some(*v) } else { None }.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NEG_INFINITY))
    }

    pub mod pairs {
        use serde::{Deserialize, Deserializer, Serialize, Serializer};

        pub fn serialize<S: Serializer>(v: &[(usize, f64)], s: S) -> Result<S::Ok, S::Error> {
            v.iter()
                .map(|(i, x)| (*i, if x.is_finite() { Some(*x) } else { None }))
                .collect::<Vec<_>>()
                .serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<(usize, f64)>, D::Error> {
            Ok(Vec::<(usize, Option<f64>)>::deserialize(d)?
                .into_iter()
                .map(|(i, x)| (i, x.unwrap_or(f64::NEG_INFINITY)))
                .collect())
        }
    }
}
