pub mod ingest;
pub mod llm;
pub mod profiles;
pub mod util;
pub mod embed;
pub mod gat;
pub mod graph;
pub mod rerank;
pub mod eval;
pub mod pipeline;
