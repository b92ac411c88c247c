//! Library side of the `shapcast` binary: configuration, dataset
//! directories, real-data ingestion and the subcommands.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod ingest;
pub mod output;

/// Process exit code for a failed command: 3 for numerical failures
/// (non-finite values, divergence), 2 for everything else.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    let numerical = err
        .chain()
        .filter_map(|e| e.downcast_ref::<shapcast::Error>())
        .any(shapcast::Error::is_numerical);
    if numerical {
        3
    } else {
        2
    }
}
