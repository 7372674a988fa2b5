//! Multi-environment data generation.

mod counterexample;
mod dataset;
mod mixing;
mod scm;

pub use counterexample::{
    make_counterexample, make_counterexample_with, Counterexample, CounterexampleKind, CounterexampleOracle,
    CounterexampleParams,
};
pub use dataset::{
    csv_header, from_csv, pool, read_dataset, to_csv, write_dataset, DatasetSidecar, EnvDataset, MultiEnvData,
    Oracle, Pooled, SidecarFile, Split, SIDECAR_NAME,
};
pub use mixing::{mix_invertible_mlp, mix_polynomial, Mixing, MixingKind, MixingSpec, MLP_SLOPE, MLP_SV_RANGE};
pub use scm::{d2_spec, simulate, three_env_spec, NoiseLaw, ScmSpec};
