//! Rate estimation for training and exact integer coding for bitstreams.

mod bounds;
mod factorized;
mod gaussian;
mod range_coder;
mod table;

pub use factorized::{factorized_rate_bits, FactorizedModel, PARAMS_PER_CHANNEL};
pub use gaussian::{
    gaussian_interval_rate, gaussian_rate_bits, level_probabilities, normal_interval, GaussianConditional,
};
pub use range_coder::{range_decode, range_encode, RangeDecoder, RangeEncoder, FLUSH_BYTES};
pub use table::{
    build_coding_table, conditional_table, conditional_tables, CodingTable, ScaleTable, DEFAULT_PRECISION,
};

/// Probability floor used by every rate estimate.
pub const P_MIN: f64 = 1.0 / 65536.0;
