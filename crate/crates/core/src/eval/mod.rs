//! Retrieval metrics, similarity analyses, routing reports and ablations.

pub mod retrieval;

pub use retrieval::{evaluate_retrieval, RetrievalResult};
pub mod routing;

pub use routing::{routing_report, spearman, RoutingReport};
pub mod similarity;

pub use similarity::{category_similarity_matrix, concept_similarity_matrix, CategorySimilarity, ConceptSimilarity};
pub mod ablation;

pub use ablation::{run_ablation, run_variant, AblationRow, LayerwiseTable, Variant};
pub mod report;

pub use report::{Metrics, RunReport};
