//! Data generation and persistence: synthetic clients, parameter files,
//! experiment reports and profile records.

mod paramfile;
mod report;
mod synthetic;

pub use paramfile::{decode_params, encode_params, read_params, write_params};
pub use report::{
    load_profiles, load_report, profiles_from_str, profiles_to_string, report_from_str, report_to_string,
    save_profiles, save_report, write_metrics_csv, ClientBest, ExperimentReport, ReportSummary, RoundMetrics, RunMode,
    REPORT_SCHEMA, REPORT_VERSION,
};
pub use synthetic::{generate_client, generate_synthetic, ClientDataset, ClientSpec, LabeledSamples};
