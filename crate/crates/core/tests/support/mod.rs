// Each integration-test target compiles its own copy of this module and
// uses a different subset of the oracle helpers.
#![allow(dead_code)]

pub mod oracle;
