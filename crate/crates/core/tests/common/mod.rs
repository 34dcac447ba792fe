#![allow(dead_code)]

pub mod arch_oracle;
pub mod e2e;
pub mod gradsuite;
pub mod images;
