// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod decode;
pub mod env;
pub mod oracle;
pub mod par;
pub mod policy;
pub mod rl;
pub mod rng;
pub mod search;
pub mod tensor;
pub mod train;
