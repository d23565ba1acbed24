//! Mock text encoder and the embedding augmentation schemes: dropout
//! variants, per-sample variant selection and multi-template prompts.

pub mod bank;
pub mod embed;
pub mod templates;

pub use bank::EmbeddingBank;
pub use embed::{cosine, embed, make_variants, QueryText};
pub use templates::{average_template_scores, render_templates, TemplateList, DEFAULT_TEMPLATE};
