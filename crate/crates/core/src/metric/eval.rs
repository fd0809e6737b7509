use std::collections::BTreeSet;

use crate::entity::{EntityId, Kind, Timestamp, NANOS_PER_SEC};
use crate::model::ModelStore;
use crate::scalar::Scalar;
use crate::timeseries::{SeriesKey, TimeSeriesStore};

use super::expr::{AggFn, BinOp, Expr, MetricRef};

/// The structural questions evaluation needs answered.
pub trait Topology {
    fn kind_of(&self, id: &str) -> Option<Kind>;
    fn is_alive(&self, id: &str, t: Timestamp) -> bool;
    fn descendants_at(&self, id: &str, kind: Kind, t: Timestamp) -> Vec<EntityId>;
    fn alive_of_kind(&self, kind: Kind, t: Timestamp) -> Vec<EntityId>;
}

impl Topology for ModelStore {
    fn kind_of(&self, id: &str) -> Option<Kind> {
        ModelStore::kind_of(self, id)
    }

    fn is_alive(&self, id: &str, t: Timestamp) -> bool {
        ModelStore::is_alive(self, id, t)
    }

    fn descendants_at(&self, id: &str, kind: Kind, t: Timestamp) -> Vec<EntityId> {
        ModelStore::descendants_at(self, id, kind, t)
    }

    fn alive_of_kind(&self, kind: Kind, t: Timestamp) -> Vec<EntityId> {
        let mut out: Vec<EntityId> = self
            .graphs()
            .flat_map(|g| g.nodes.values())
            .filter(|n| n.kind == kind && n.lifetime.contains(t))
            .map(|n| n.id.clone())
            .collect();
        out.sort();
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EvalError {
    #[error("unknown metric `{0}`")]
    UnknownMetric(String),
    #[error("unknown entity `{0}`")]
    UnknownEntity(String),
    #[error("metric `{metric}` is scoped to {expected}, `{entity}` is not")]
    ScopeMismatch {
        metric: String,
        expected: Kind,
        entity: String,
    },
    #[error("`{id}` is not alive at {t}")]
    NotAliveAt { id: String, t: Timestamp },
    #[error("insufficient data")]
    InsufficientData,
    #[error("division by zero")]
    DivisionByZero,
}

/// Evaluates expressions against stored samples at a point in time.
///
/// A bare metric reference takes the newest sample in `[t - lookback, t]`.
/// Windowed functions read the closed window `[t - w, t]`.
pub struct Evaluator<'a, V: Scalar> {
    pub store: &'a TimeSeriesStore<V>,
    pub topology: &'a dyn Topology,
    pub lookback: i64,
}

impl<V: Scalar> Evaluator<'_, V> {
    pub fn eval(&self, expr: &Expr, entity: &str, t: Timestamp) -> Result<V, EvalError> {
        match expr {
            Expr::Number(n) => Ok(V::from_f64_lossy(*n)),
            Expr::Metric(m) => self.instant(entity, &m.name, t),
            Expr::Neg(inner) => Ok(-self.eval(inner, entity, t)?),
            Expr::Binary { op, lhs, rhs } => {
                let a = self.eval(lhs, entity, t)?;
                let b = self.eval(rhs, entity, t)?;
                binary(*op, a, b)
            }
            Expr::AvgOverTime { inner, window } => self.avg_over_time(inner, *window, entity, t),
            Expr::Rate { metric, window } => self.rate(&metric.name, *window, entity, t),
            Expr::Aggregate { func, metric } => self.aggregate(*func, metric, entity, t),
        }
    }

    fn instant(&self, entity: &str, metric: &str, t: Timestamp) -> Result<V, EvalError> {
        let key = SeriesKey::new(entity, metric);
        match self.store.latest_at(&key, t) {
            Ok(Some(s)) if s.ts >= t - self.lookback => Ok(s.value),
            _ => Err(EvalError::InsufficientData),
        }
    }

    fn aggregate(
        &self,
        func: AggFn,
        metric: &MetricRef,
        entity: &str,
        t: Timestamp,
    ) -> Result<V, EvalError> {
        let Some(kind) = metric.child_kind else {
            return Err(EvalError::InsufficientData);
        };
        let values: Vec<V> = self
            .topology
            .descendants_at(entity, kind, t)
            .iter()
            .filter_map(|child| self.instant(child, &metric.name, t).ok())
            .collect();
        if values.is_empty() {
            return Err(EvalError::InsufficientData);
        }
        let sum = || values.iter().fold(V::zero(), |acc, &v| acc + v);
        Ok(match func {
            AggFn::Sum => sum(),
            AggFn::Avg => sum() / V::from_usize(values.len()).unwrap_or_else(V::nan),
            AggFn::Min => values.iter().copied().fold(V::infinity(), V::min),
            AggFn::Max => values.iter().copied().fold(V::neg_infinity(), V::max),
        })
    }

    /// Series timestamps that can change the value of `expr` for `entity`.
    fn change_points(&self, expr: &Expr, entity: &str, from: Timestamp, to: Timestamp) -> BTreeSet<Timestamp> {
        let mut out = BTreeSet::new();
        let mut add = |entity: &str, metric: &str| {
            if let Ok(samples) = self.store.query_closed(&SeriesKey::new(entity, metric), from, to) {
                out.extend(samples.into_iter().map(|s| s.ts));
            }
        };
        collect_refs(expr, &mut |m| match m.child_kind {
            None => add(entity, &m.name),
            Some(kind) => {
                for child in self.topology.descendants_at(entity, kind, to) {
                    add(child.as_str(), &m.name);
                }
            }
        });
        out
    }

    /// Mean of `inner` evaluated at every sample timestamp inside the window.
    fn avg_over_time(&self, inner: &Expr, window: i64, entity: &str, t: Timestamp) -> Result<V, EvalError> {
        let mut total = V::zero();
        let mut count = 0usize;
        for ts in self.change_points(inner, entity, t - window, t) {
            match self.eval(inner, entity, ts) {
                Ok(v) => {
                    total = total + v;
                    count += 1;
                }
                Err(EvalError::InsufficientData) => {}
                Err(e) => return Err(e),
            }
        }
        if count == 0 {
            return Err(EvalError::InsufficientData);
        }
        Ok(total / V::from_usize(count).unwrap_or_else(V::nan))
    }

    /// Per-second increase of a counter, treating drops as resets.
    fn rate(&self, metric: &str, window: i64, entity: &str, t: Timestamp) -> Result<V, EvalError> {
        let samples = self
            .store
            .query_closed(&SeriesKey::new(entity, metric), t - window, t)
            .map_err(|_| EvalError::InsufficientData)?;
        if samples.len() < 2 {
            return Err(EvalError::InsufficientData);
        }
        let mut increase = V::zero();
        for pair in samples.windows(2) {
            let delta = pair[1].value - pair[0].value;
            increase = increase + if delta < V::zero() { pair[1].value } else { delta };
        }
        let first = samples[0].ts;
        let last = samples[samples.len() - 1].ts;
        let seconds = V::from_f64_lossy((last - first) as f64 / NANOS_PER_SEC as f64);
        Ok(increase / seconds)
    }
}

fn collect_refs(expr: &Expr, f: &mut dyn FnMut(&MetricRef)) {
    match expr {
        Expr::Number(_) => {}
        Expr::Metric(m) | Expr::Rate { metric: m, .. } | Expr::Aggregate { metric: m, .. } => f(m),
        Expr::Neg(inner) | Expr::AvgOverTime { inner, .. } => collect_refs(inner, f),
        Expr::Binary { lhs, rhs, .. } => {
            collect_refs(lhs, f);
            collect_refs(rhs, f);
        }
    }
}

fn binary<V: Scalar>(op: BinOp, a: V, b: V) -> Result<V, EvalError> {
    let truth = |c: bool| if c { V::one() } else { V::zero() };
    Ok(match op {
        BinOp::Add => a + b,
        BinOp::Sub => a - b,
        BinOp::Mul => a * b,
        BinOp::Div => {
            if b == V::zero() {
                return Err(EvalError::DivisionByZero);
            }
            a / b
        }
        BinOp::Lt => truth(a < b),
        BinOp::Le => truth(a <= b),
        BinOp::Gt => truth(a > b),
        BinOp::Ge => truth(a >= b),
        BinOp::Eq => truth(a == b),
    })
}
