//! Binary inspection and rewriting for in-process isolation with
//! memory protection keys, plus a simulator to exercise the result.

pub mod bytescan;
pub mod elfio;
pub mod inspector;
pub mod rewriter;
pub mod sim;
pub mod x86;
