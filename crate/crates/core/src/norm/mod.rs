//! Normalization regimes. PWS and WN transform the filters before the
//! convolution; BN and group norm standardize the convolution output.

pub mod bn;
pub mod group;
pub mod pws;
pub mod wn;

pub use bn::{bn_backward, bn_forward, BnCache, BnConfig, BnGrads, BnParams};
pub use group::{group_norm_backward, group_norm_forward, GroupNormCache, GroupNormConfig, GroupNormGrads, GroupNormParams};
pub use pws::{
    pws_backward, pws_fold, pws_forward, pws_standardize, GammaPreset, PwsCache, PwsConfig, PwsGrads, PwsParams, StandardizedBank,
};
pub use wn::{wn_backward, wn_forward, WnBank, WnCache, WnGrads, WnParams};

/// Whether batch statistics are computed (and running averages updated) or
/// frozen statistics are used.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}
