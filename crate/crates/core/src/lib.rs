pub mod entity;
pub mod event;
pub mod model;
pub mod scalar;
pub mod timeseries;
pub mod metric;
pub mod bus;
pub mod sensors;
pub mod ingest;
pub mod pipeline;
pub mod sim;

/// Telemetry store over `f64` samples.
pub type SampleStore = timeseries::TimeSeriesStore<f64>;
/// Metric engine over `f64` values.
pub type MetricEngineF64 = metric::MetricEngine<f64>;
