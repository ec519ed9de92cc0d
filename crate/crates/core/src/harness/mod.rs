//! Workload generation, trace and config file formats, metrics, and
//! ablation orchestration.

pub mod ablation;
pub mod configfile;
pub mod metrics;
pub mod trace;
pub mod workload;

pub use ablation::{ablation_csv, run_ablation, AblationReport};
pub use configfile::{config_to_string, parse_config, ConfigFileError};
pub use metrics::{compute_metrics, event_log_csv, metrics_csv, MetricsError};
pub use trace::{parse_trace, validate_against_config, write_trace, TraceError, TraceRecord};
pub use workload::{gen_burst, gen_poisson, LengthSpec};
