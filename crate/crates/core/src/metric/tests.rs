use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::expr::{AggFn, BinOp, Expr, MetricRef};
use super::*;
use crate::entity::{Lifetime, NANOS_PER_SEC};
use crate::model::EntityLookup;
use crate::timeseries::{Sample, SeriesKey, StoreConfig};

const S: i64 = NANOS_PER_SEC;

/// Hand-built hierarchy, independent of the model store.
#[derive(Default)]
struct Tree {
    nodes: BTreeMap<String, (Kind, Option<String>, Lifetime)>,
}

impl Tree {
    fn add(&mut self, id: &str, kind: Kind, parent: Option<&str>, life: Lifetime) {
        self.nodes
            .insert(id.to_string(), (kind, parent.map(str::to_string), life));
    }
}

impl EntityLookup for Tree {
    fn entity_lifetime(&self, id: &str) -> Option<Lifetime> {
        self.nodes.get(id).map(|n| n.2)
    }
}

impl Topology for Tree {
    fn kind_of(&self, id: &str) -> Option<Kind> {
        self.nodes.get(id).map(|n| n.0)
    }

    fn is_alive(&self, id: &str, t: Timestamp) -> bool {
        self.nodes.get(id).is_some_and(|n| n.2.contains(t))
    }

    fn descendants_at(&self, id: &str, kind: Kind, t: Timestamp) -> Vec<EntityId> {
        let mut out = Vec::new();
        for (child, (k, _, life)) in &self.nodes {
            if *k != kind || !life.contains(t) {
                continue;
            }
            let mut cur = self.nodes[child].1.clone();
            let mut ok = true;
            while let Some(p) = cur {
                if !self.is_alive(&p, t) {
                    ok = false;
                }
                if p == id {
                    break;
                }
                cur = self.nodes[&p].1.clone();
                if cur.is_none() {
                    ok = false;
                }
            }
            if ok && self.nodes[child].1.is_some() {
                out.push(EntityId::from(child.as_str()));
            }
        }
        out
    }

    fn alive_of_kind(&self, kind: Kind, t: Timestamp) -> Vec<EntityId> {
        self.nodes
            .iter()
            .filter(|(_, (k, _, life))| *k == kind && life.contains(t))
            .map(|(id, _)| EntityId::from(id.as_str()))
            .collect()
    }
}

fn known() -> BTreeSet<String> {
    STANDARD_METRICS.iter().map(|m| m.to_string()).collect()
}

fn job_tree(processes: usize) -> Tree {
    let mut tree = Tree::default();
    tree.add("application/job/j0", Kind::Job, None, Lifetime::open(0));
    for p in 0..processes {
        tree.add(
            &format!("application/process/j0.p{p}"),
            Kind::Process,
            Some("application/job/j0"),
            Lifetime::open(0),
        );
    }
    tree
}

fn put(store: &TimeSeriesStore<f64>, tree: &Tree, entity: &str, metric: &str, ts: i64, v: f64) {
    store
        .append(tree, &SeriesKey::new(entity, metric), Sample::new(ts, v))
        .unwrap();
}

#[test]
fn avg_over_time_of_constant() {
    let tree = job_tree(1);
    let store = TimeSeriesStore::<f64>::default();
    for i in 0..30 {
        put(&store, &tree, "application/job/j0", "memory_rss", i * S, 7.0);
    }
    let engine = MetricEngine::<f64>::default();
    engine
        .register_metric(
            DerivedMetric::new("avg_rss", Kind::Job, "avg_over_time(memory_rss, 10s)"),
            &known(),
        )
        .unwrap();
    let v = engine
        .evaluate(&store, &tree, "avg_rss", "application/job/j0", 20 * S)
        .unwrap();
    assert_eq!(v, 7.0);
}

#[test]
fn rate_of_linear_counter() {
    let tree = job_tree(1);
    let store = TimeSeriesStore::<f64>::default();
    for i in 0..30 {
        put(&store, &tree, "application/job/j0", "io_read_bytes", i * S, 100.0 * i as f64);
    }
    let engine = MetricEngine::<f64>::default();
    engine
        .register_metric(
            DerivedMetric::new("read_rate", Kind::Job, "rate(io_read_bytes, 10s)"),
            &known(),
        )
        .unwrap();
    let v = engine
        .evaluate(&store, &tree, "read_rate", "application/job/j0", 25 * S)
        .unwrap();
    assert!((v - 100.0).abs() <= 1e-9, "{v}");
}

#[test]
fn rate_handles_counter_reset() {
    let tree = job_tree(1);
    let store = TimeSeriesStore::<f64>::default();
    // 0,100,200 then reset to 50,150: increase = 100+100+50+100 over 4s.
    for (i, v) in [0.0, 100.0, 200.0, 50.0, 150.0].into_iter().enumerate() {
        put(&store, &tree, "application/job/j0", "c", i as i64 * S, v);
    }
    let engine = MetricEngine::<f64>::default();
    let eval = engine.evaluator(&store, &tree);
    let expr = parse("rate(c, 10s)").unwrap();
    assert_eq!(eval.eval(&expr, "application/job/j0", 4 * S).unwrap(), 87.5);
}

#[test]
fn registration_errors() {
    let engine = MetricEngine::<f64>::default();
    let err = engine
        .register_metric(DerivedMetric::new("bad", Kind::Job, "avg_over_time("), &known())
        .unwrap_err();
    match err {
        RegisterError::Parse(p) => assert_eq!(p.column, 15),
        other => panic!("{other:?}"),
    }
    let dm = DerivedMetric::new("x", Kind::Job, "sum(io_read_bytes@process)");
    engine.register_metric(dm.clone(), &known()).unwrap();
    assert_eq!(
        engine.register_metric(dm, &known()),
        Err(RegisterError::DuplicateName("x".into()))
    );
    assert_eq!(
        engine.register_metric(DerivedMetric::new("y", Kind::Job, "sum(bogus@process)"), &known()),
        Err(RegisterError::UnknownBaseMetric("bogus".into()))
    );
    assert!(matches!(
        engine.register_metric(DerivedMetric::new("z", Kind::Thread, "sum(io_read_bytes@process)"), &known()),
        Err(RegisterError::Type(_))
    ));
    assert_eq!(engine.derived_for_scope(Kind::Job), vec!["x".to_string()]);
    assert!(engine.derived_for_scope(Kind::Process).is_empty());
}

#[test]
fn evaluation_errors() {
    let tree = job_tree(2);
    let store = TimeSeriesStore::<f64>::default();
    put(&store, &tree, "application/job/j0", "memory_rss", 0, 0.0);
    let engine = MetricEngine::<f64>::default();
    let k = known();
    engine
        .register_metric(DerivedMetric::new("inv", Kind::Job, "1 / memory_rss"), &k)
        .unwrap();
    engine
        .register_metric(DerivedMetric::new("io", Kind::Job, "sum(io_read_bytes@process)"), &k)
        .unwrap();
    assert_eq!(
        engine.evaluate(&store, &tree, "inv", "application/job/j0", S),
        Err(EvalError::DivisionByZero)
    );
    assert_eq!(
        engine.evaluate(&store, &tree, "io", "application/job/j0", S),
        Err(EvalError::InsufficientData)
    );
    assert!(matches!(
        engine.evaluate(&store, &tree, "io", "application/process/j0.p0", S),
        Err(EvalError::ScopeMismatch { .. })
    ));
    // Outside the instant lookback the sample no longer counts.
    assert_eq!(
        engine.evaluate(&store, &tree, "inv", "application/job/j0", 6 * S),
        Err(EvalError::InsufficientData)
    );
}

// ---------------------------------------------------------------------------
// Brute-force oracle: materializes every series as a plain vector and
// evaluates by linear scans, with its own reading of the semantics.
// ---------------------------------------------------------------------------

type Flat = BTreeMap<(String, String), Vec<(i64, f64)>>;

struct Brute<'a> {
    data: &'a Flat,
    tree: &'a Tree,
    lookback: i64,
}

impl Brute<'_> {
    fn series(&self, entity: &str, metric: &str) -> Vec<(i64, f64)> {
        self.data
            .get(&(entity.to_string(), metric.to_string()))
            .cloned()
            .unwrap_or_default()
    }

    fn instant(&self, entity: &str, metric: &str, t: i64) -> Option<f64> {
        let mut best: Option<(i64, f64)> = None;
        for (ts, v) in self.series(entity, metric) {
            if ts <= t && ts >= t - self.lookback && best.is_none_or(|(b, _)| ts >= b) {
                best = Some((ts, v));
            }
        }
        best.map(|b| b.1)
    }

    fn children(&self, entity: &str, kind: Kind, t: i64) -> Vec<String> {
        // Walk every node and test ancestry explicitly.
        self.tree
            .nodes
            .iter()
            .filter(|(_, (k, _, life))| *k == kind && life.contains(t))
            .filter(|(id, _)| {
                let mut cur = self.tree.nodes[*id].1.clone();
                while let Some(p) = cur {
                    if p == entity {
                        return true;
                    }
                    cur = self.tree.nodes[&p].1.clone();
                }
                false
            })
            .map(|(id, _)| id.clone())
            .collect()
    }

    fn eval(&self, e: &Expr, entity: &str, t: i64) -> Result<f64, &'static str> {
        match e {
            Expr::Number(n) => Ok(*n),
            Expr::Metric(m) => self.instant(entity, &m.name, t).ok_or("nodata"),
            Expr::Neg(x) => Ok(-self.eval(x, entity, t)?),
            Expr::Binary { op, lhs, rhs } => {
                let a = self.eval(lhs, entity, t)?;
                let b = self.eval(rhs, entity, t)?;
                Ok(match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div if b == 0.0 => return Err("div0"),
                    BinOp::Div => a / b,
                    BinOp::Lt => (a < b) as u8 as f64,
                    BinOp::Le => (a <= b) as u8 as f64,
                    BinOp::Gt => (a > b) as u8 as f64,
                    BinOp::Ge => (a >= b) as u8 as f64,
                    BinOp::Eq => (a == b) as u8 as f64,
                })
            }
            Expr::Aggregate { func, metric } => {
                let vals: Vec<f64> = self
                    .children(entity, metric.child_kind.unwrap(), t)
                    .iter()
                    .filter_map(|c| self.instant(c, &metric.name, t))
                    .collect();
                if vals.is_empty() {
                    return Err("nodata");
                }
                let sum: f64 = vals.iter().sum();
                Ok(match func {
                    AggFn::Sum => sum,
                    AggFn::Avg => sum / vals.len() as f64,
                    AggFn::Min => vals.iter().cloned().fold(f64::INFINITY, f64::min),
                    AggFn::Max => vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                })
            }
            Expr::Rate { metric, window } => {
                let pts: Vec<_> = self
                    .series(entity, &metric.name)
                    .into_iter()
                    .filter(|(ts, _)| *ts >= t - window && *ts <= t)
                    .collect();
                if pts.len() < 2 {
                    return Err("nodata");
                }
                let mut inc = 0.0;
                for w in pts.windows(2) {
                    inc += if w[1].1 < w[0].1 { w[1].1 } else { w[1].1 - w[0].1 };
                }
                Ok(inc / ((pts[pts.len() - 1].0 - pts[0].0) as f64 / 1e9))
            }
            Expr::AvgOverTime { inner, window } => {
                // Candidate instants: every stored timestamp of every series
                // the inner expression can touch, inside the window.
                let mut names = Vec::new();
                refs(inner, &mut names);
                let mut stamps = BTreeSet::new();
                for m in names {
                    let owners = match m.child_kind {
                        None => vec![entity.to_string()],
                        Some(k) => self.children(entity, k, t),
                    };
                    for o in owners {
                        for (ts, _) in self.series(&o, &m.name) {
                            if ts >= t - window && ts <= t {
                                stamps.insert(ts);
                            }
                        }
                    }
                }
                let mut vals = Vec::new();
                for ts in stamps {
                    match self.eval(inner, entity, ts) {
                        Ok(v) => vals.push(v),
                        Err("nodata") => {}
                        Err(e) => return Err(e),
                    }
                }
                if vals.is_empty() {
                    return Err("nodata");
                }
                Ok(vals.iter().sum::<f64>() / vals.len() as f64)
            }
        }
    }
}

fn refs(e: &Expr, out: &mut Vec<MetricRef>) {
    match e {
        Expr::Number(_) => {}
        Expr::Metric(m) | Expr::Rate { metric: m, .. } | Expr::Aggregate { metric: m, .. } => {
            out.push(m.clone())
        }
        Expr::Neg(x) | Expr::AvgOverTime { inner: x, .. } => refs(x, out),
        Expr::Binary { lhs, rhs, .. } => {
            refs(lhs, out);
            refs(rhs, out);
        }
    }
}

fn close(a: f64, b: f64) -> bool {
    a == b || (a - b).abs() <= 1e-9 * a.abs().max(b.abs())
}

/// Job with four processes of staggered lifetimes and jittered samples.
fn jittered_fixture(seed: u64) -> (Tree, TimeSeriesStore<f64>, Flat) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tree = Tree::default();
    tree.add("application/job/j0", Kind::Job, None, Lifetime::open(0));
    let lives = [(0, None), (5 * S, Some(40 * S)), (10 * S, None), (0, Some(20 * S))];
    for (p, (start, end)) in lives.into_iter().enumerate() {
        tree.add(
            &format!("application/process/j0.p{p}"),
            Kind::Process,
            Some("application/job/j0"),
            Lifetime { start, end },
        );
    }
    let store = TimeSeriesStore::<f64>::new(StoreConfig {
        lifetime_tolerance: 0,
        ..StoreConfig::default()
    });
    let mut flat = Flat::new();
    for (id, (_, _, life)) in &tree.nodes {
        for metric in ["io_read_bytes", "io_write_bytes", "memory_rss"] {
            let mut ts = life.start + rng.random_range(0..S / 2);
            while ts < life.end.unwrap_or(60 * S) && ts < 60 * S {
                let v = rng.random_range(0.0..600_000.0f64).round();
                put(&store, &tree, id, metric, ts, v);
                flat.entry((id.clone(), metric.to_string())).or_default().push((ts, v));
                ts += rng.random_range(S / 2..3 * S / 2);
            }
        }
    }
    (tree, store, flat)
}

#[test]
fn io_threshold_matches_brute_force_oracle() {
    let (tree, store, flat) = jittered_fixture(11);
    let engine = MetricEngine::<f64>::default();
    let function = "(sum(io_read_bytes@process) + sum(io_write_bytes@process)) < 1000000";
    engine
        .register_metric(DerivedMetric::new("i_o_threshold", Kind::Job, function), &known())
        .unwrap();
    let brute = Brute { data: &flat, tree: &tree, lookback: DEFAULT_LOOKBACK };
    let expr = parse(function).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut seen = BTreeSet::new();
    for _ in 0..50 {
        let t = rng.random_range(0..60 * S);
        let got = engine.evaluate(&store, &tree, "i_o_threshold", "application/job/j0", t);
        let want = brute.eval(&expr, "application/job/j0", t);
        match (got, want) {
            (Ok(g), Ok(w)) => {
                assert!(close(g, w), "t={t}: {g} vs {w}");
                seen.insert(g as i64);
            }
            (Err(EvalError::InsufficientData), Err("nodata")) => {}
            (g, w) => panic!("t={t}: {g:?} vs {w:?}"),
        }
    }
    assert_eq!(seen.len(), 2, "probes should see both outcomes");
}

fn expr_strategy() -> impl Strategy<Value = String> {
    let leaf = prop_oneof![
        (0u32..2_000_000).prop_map(|n| n.to_string()),
        Just("memory_rss".to_string()),
        Just("io_read_bytes".to_string()),
        Just("sum(io_write_bytes@process)".to_string()),
        Just("max(memory_rss@process)".to_string()),
        Just("avg(io_read_bytes@process)".to_string()),
        Just("min(io_read_bytes@process)".to_string()),
        (1u32..20).prop_map(|w| format!("rate(io_read_bytes, {w}s)")),
    ];
    leaf.prop_recursive(3, 16, 2, |inner| {
        prop_oneof![
            (inner.clone(), prop_oneof![Just("+"), Just("-"), Just("*"), Just("/"), Just("<"), Just(">="), Just("==")], inner.clone())
                .prop_map(|(a, op, b)| format!("({a} {op} {b})")),
            (inner.clone(), 1u32..15).prop_map(|(a, w)| format!("avg_over_time({a}, {w}s)")),
            inner.prop_map(|a| format!("-{a}")),
        ]
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn random_expressions_match_oracle(src in expr_strategy(), seed in 0u64..4, t in 0i64..60_000) {
        let t = t * 1_000_000;
        let (tree, store, flat) = jittered_fixture(seed);
        let expr = parse(&src).unwrap();
        prop_assert!(expr.type_check(Kind::Job).is_ok());
        let engine = MetricEngine::<f64>::default();
        let got = engine.evaluator(&store, &tree).eval(&expr, "application/job/j0", t);
        let brute = Brute { data: &flat, tree: &tree, lookback: DEFAULT_LOOKBACK };
        let want = brute.eval(&expr, "application/job/j0", t);
        match (got, want) {
            (Ok(g), Ok(w)) => prop_assert!(close(g, w) || (g.is_nan() && w.is_nan()), "{src} at {t}: {g} vs {w}"),
            (Err(EvalError::InsufficientData), Err("nodata")) => {}
            (Err(EvalError::DivisionByZero), Err("div0")) => {}
            (g, w) => prop_assert!(false, "{src} at {t}: {g:?} vs {w:?}"),
        }
        // Re-evaluation is bit-identical.
        let again = engine.evaluator(&store, &tree).eval(&expr, "application/job/j0", t);
        let first = engine.evaluator(&store, &tree).eval(&expr, "application/job/j0", t);
        prop_assert_eq!(format!("{again:?}"), format!("{first:?}"));
    }
}

#[test]
fn subscribe_errors() {
    let engine = MetricEngine::<f64>::default();
    let k = known();
    engine
        .register_metric(DerivedMetric::new("hot", Kind::Job, "sum(cpu_utilization@thread) > 1"), &k)
        .unwrap();
    assert_eq!(
        engine.subscribe("http://h/cb", Kind::Job, "nope", &k),
        Err(SubscribeError::UnknownMetric("nope".into()))
    );
    for bad in ["not a uri", "ftp://h/cb", "/relative", "http://"] {
        assert!(matches!(
            engine.subscribe(bad, Kind::Job, "hot", &k),
            Err(SubscribeError::MalformedUri(_))
        ), "{bad}");
    }
    assert!(matches!(
        engine.subscribe("http://h/cb", Kind::Node, "hot", &k),
        Err(SubscribeError::ScopeMismatch { .. })
    ));
    assert_eq!(engine.subscribe("http://h/cb", Kind::Job, "hot", &k), Ok(1));
    assert_eq!(engine.subscribe("https://h:8080/x?y=1", Kind::Thread, "cpu_utilization", &k), Ok(2));
}

/// Counts false->true transitions of a boolean sequence.
fn rising_edges(values: &[bool]) -> usize {
    let mut prev = false;
    let mut n = 0;
    for &v in values {
        if v && !prev {
            n += 1;
        }
        prev = v;
    }
    n
}

#[test]
fn constantly_true_fires_once() {
    let tree = job_tree(1);
    let store = TimeSeriesStore::<f64>::default();
    let engine = MetricEngine::<f64>::default();
    let k = known();
    engine
        .register_metric(DerivedMetric::new("always", Kind::Job, "memory_rss >= 0"), &k)
        .unwrap();
    engine.subscribe("http://h/cb", Kind::Job, "always", &k).unwrap();
    let mut fired = 0;
    for i in 0..20 {
        put(&store, &tree, "application/job/j0", "memory_rss", i * S, 5.0);
        fired += engine.detect(&store, &tree, i * S).len();
    }
    assert_eq!(fired, 1);
}

#[test]
fn flapping_series_fires_per_rising_edge() {
    let tree = job_tree(1);
    let store = TimeSeriesStore::<f64>::default();
    let engine = MetricEngine::<f64>::default();
    let k = known();
    engine
        .register_metric(DerivedMetric::new("low", Kind::Job, "memory_rss < 10"), &k)
        .unwrap();
    engine.subscribe("http://h/cb", Kind::Job, "low", &k).unwrap();
    let values = [20., 5., 5., 30., 1., 40., 40., 2., 3., 50., 9., 99., 8., 8.];
    let mut deliveries = Vec::new();
    for (i, v) in values.iter().enumerate() {
        let t = i as i64 * S;
        put(&store, &tree, "application/job/j0", "memory_rss", t, *v);
        deliveries.extend(engine.detect(&store, &tree, t));
    }
    let predicate: Vec<bool> = values.iter().map(|v| *v < 10.0).collect();
    assert_eq!(rising_edges(&predicate), 5);
    assert_eq!(deliveries.len(), 5);
    let times: Vec<i64> = deliveries.iter().map(|d| d.payload.timestamp / S).collect();
    assert_eq!(times, vec![1, 4, 7, 10, 12]);
    let body = serde_json::to_value(&deliveries[0].payload).unwrap();
    let keys: Vec<&str> = body.as_object().unwrap().keys().map(String::as_str).collect();
    assert_eq!(keys, vec!["entity_id", "metric", "scope", "timestamp", "value"]);
    assert_eq!(body["scope"], "job");
}

#[test]
fn missing_data_holds_state_and_new_entities_fire() {
    let mut tree = job_tree(0);
    let store = TimeSeriesStore::<f64>::default();
    let engine = MetricEngine::<f64>::default();
    let k = known();
    engine.subscribe("http://h/cb", Kind::Job, "cpu_utilization", &k).unwrap();
    put(&store, &tree, "application/job/j0", "cpu_utilization", 0, 1.0);
    assert_eq!(engine.detect(&store, &tree, 0).len(), 1);
    // A ten second gap: no data, state stays true, no refire on return.
    assert!(engine.detect(&store, &tree, 10 * S).is_empty());
    put(&store, &tree, "application/job/j0", "cpu_utilization", 11 * S, 1.0);
    assert!(engine.detect(&store, &tree, 11 * S).is_empty());
    tree.add("application/job/j1", Kind::Job, None, Lifetime::open(12 * S));
    put(&store, &tree, "application/job/j1", "cpu_utilization", 12 * S, 3.0);
    let fired = engine.detect(&store, &tree, 12 * S);
    assert_eq!(fired.len(), 1);
    assert_eq!(fired[0].payload.entity_id, "application/job/j1");
    assert_eq!(fired[0].payload.value, 3.0);
}

#[test]
fn eval_period_gates_detection() {
    let tree = job_tree(0);
    let store = TimeSeriesStore::<f64>::default();
    let engine = MetricEngine::<f64>::default();
    let k = known();
    let mut dm = DerivedMetric::new("hi", Kind::Job, "memory_rss > 0");
    dm.eval_period = 2 * S;
    engine.register_metric(dm, &k).unwrap();
    engine.subscribe("http://h/cb", Kind::Job, "hi", &k).unwrap();
    let mut at = Vec::new();
    for i in 0..8 {
        let t = i * S;
        put(&store, &tree, "application/job/j0", "memory_rss", t, (i % 2) as f64);
        at.extend(engine.detect(&store, &tree, t).iter().map(|n| n.payload.timestamp / S));
    }
    // Evaluated at 0,2,4,6 only, where the value is always 0.
    assert!(at.is_empty());
}

#[test]
fn retry_schedule_is_exponential() {
    let policy = RetryPolicy::default();
    let delays: Vec<u64> = (0..policy.attempts).map(|a| policy.delay_ms(a)).collect();
    assert_eq!(delays, vec![0, 100, 200]);
}

#[test]
fn evaluation_is_generic_over_scalar() {
    let tree = job_tree(2);
    let store = TimeSeriesStore::<f32>::default();
    for p in 0..2 {
        store
            .append(
                &tree,
                &SeriesKey::new(format!("application/process/j0.p{p}"), "io_read_bytes"),
                Sample::new(0, 1.5f32),
            )
            .unwrap();
    }
    let engine = MetricEngine::<f32>::default();
    let expr = parse("sum(io_read_bytes@process) * 2").unwrap();
    assert_eq!(engine.evaluator(&store, &tree).eval(&expr, "application/job/j0", S), Ok(6.0f32));
}
