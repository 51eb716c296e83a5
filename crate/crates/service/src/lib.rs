//! Operational surface of the collaging engine: the `collage` command-line
//! tool and the HTTP API driven by the studio.

pub mod api;
pub mod cli;
pub mod engine;
