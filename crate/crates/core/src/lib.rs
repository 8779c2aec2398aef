//! Case-driven multi-agent relevance engine.
//!
//! The crate is organised around the closed loop that turns user-perceived
//! bad cases into fixes:
//!
//! * [`world`]: seeded catalog, query stream, hidden standard, simulated tools
//! * [`model`]: the unified retrieval/coarse/fine model and query parsing
//! * [`annotator`]: standard-grounded labeling with a reward-model selector
//! * [`dialectic`]: bounded User/Annotator negotiation and outcome routing
//! * [`optimizer`]: diagnosis, data refinement and pattern probing
//! * [`rules`]: runtime directives
//! * [`memory`]: shared precedent store
//! * [`deep_search`]: tool-chaining candidate discovery
//! * [`serving`]: consistency routing and the hypernym relevance cache
//! * [`pipeline`]: iteration cycles, checkpoint guard, persistence, case workflow

pub mod annotator;
pub mod deep_search;
pub mod dialectic;
pub mod domain;
pub mod error;
pub mod memory;
pub mod model;
pub mod optimizer;
pub mod par;
pub mod pipeline;
pub mod records;
pub mod rules;
pub mod serving;
pub mod util;
pub mod world;

pub use domain::{Case, CaseProvenance, Prediction, Product, Query, RelevanceLabel, SourceStage};
pub use error::{Error, Result};
