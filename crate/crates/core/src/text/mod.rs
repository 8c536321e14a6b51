//! Referring-expression tokenization and LSTM encoding.

pub mod lstm;
pub mod vocab;

pub use lstm::{encode_batch, init_lstm, lstm_encode, LstmShape};
pub use vocab::{build_vocab, load_embeddings, tokenize, Vocab, DEFAULT_MAX_LEN, PAD_ID, UNK_ID};
