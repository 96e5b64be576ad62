//! Constrained logistic regression trees: decision trees whose splits are
//! one-feature logistic classifiers fitted under a bound on their covariance
//! with a binary protected attribute.

pub mod builder;
pub mod data;
pub mod harness;
pub mod metrics;
pub mod oracle;
pub mod solver;
pub mod tree;
