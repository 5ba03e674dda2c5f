#![allow(dead_code)]

pub mod bandit;
pub mod corpus;
pub mod gradcheck;
pub mod oracle;
pub mod reference;
