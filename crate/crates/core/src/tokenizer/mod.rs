//! WordPiece vocabulary training and greedy longest-match tokenization.
//!
//! Text is normalized before matching (canonical composition, Arabic
//! diacritics and tatweel removed, Latin lowercased) but every piece keeps a
//! byte range into the original text, which QA span recovery and NER label
//! alignment depend on.

mod trainer;
mod vocab;
mod wordpiece;

pub use trainer::train_vocab;
pub use vocab::{SpecialIds, Vocab, CLS, CONTINUATION, MASK, PAD, SEP, SPECIAL_TOKENS, UNK};
pub use wordpiece::{Encoding, Piece, Tokenizer, MAX_WORD_CHARS};
