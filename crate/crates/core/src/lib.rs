pub mod amr;
pub mod catalog;
pub mod cem;
pub mod error;
pub mod grid;
pub mod history;
pub mod inject;
pub mod sbw;
pub mod stats;
