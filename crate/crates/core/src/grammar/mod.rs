//! Toy vocabulary, prompt templates and dataset generation.

mod dataset;
mod spec;
mod vocab;

pub use dataset::{generate_dataset, splits_disjoint, Dataset, DatasetRecord, Split};
pub use spec::{
    parse_user_prompt, render_user_prompt, spec_space, ObjectSlot, PromptSpec, SpecKey,
    TaskCategory, UserPrompt,
};
pub use vocab::{
    build_vocabulary, detail, numeral, vocabulary, Color, Function, Layout, ObjectClass, Relation,
    Structure, Token, TokenClass, TokenId, TokenKind, Vocabulary, DETAIL_SURFACES, END,
    NUMERAL_SURFACES, VOCAB_SIZE,
};
