//! Corpus to fixed-window token dataset: tokenization, windowing, the
//! train/val split, and shuffled batching.

mod dataset;
mod synthetic;
mod tokenizer;

pub use dataset::{batch_iterator, build_windows, epoch_order, is_val_window, split_train_val, token_stream, Split, TokenWindowDataset};
pub use synthetic::synthetic_stories;
pub use tokenizer::{ByteTokenizer, Tokenizer, VocabTokenizer};
