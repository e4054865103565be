//! Keystroke-to-characters decoding for pinyin input across every input
//! mode (perfect, abbreviated, mixed and noisy pinyin on 26-key and 9-key
//! layouts), and the selection-feedback loop that turns candidate choices
//! into reward-model training data.

pub mod decoder;
pub mod engine;
pub mod error;
pub mod evalgen;
pub mod feedback;
pub mod keymap;
pub mod lexicon;
pub mod reward;
pub mod scorer;
pub mod segmentation;

pub use error::{Error, Result};
pub use keymap::{is_input_prefix, p2i, KeyLayout, KeySequence};
pub use lexicon::{load_lexicon, ChunkMode, Lexicon, UserWord};
pub use segmentation::{
    build_lattice, build_lattice_with, classify_mode, enumerate_pysegs, InputMode, PysegPath, SegLattice,
    SegmentConfig, Syllable,
};
pub use scorer::{
    apply_extension, sft_loss, softmax, train_ngram, Extension, NGramConfig, NGramScorer, ScorerContract,
    SftSample, SyllableToken, TaskDescriptor, TaskKind,
};
pub use decoder::{
    adjusted_char_prob, correction_penalty, decode, restricted_syllable_dist, Candidate, DecodeConfig,
};
pub use evalgen::{evaluate, gen_testset, inject_noise, p_at_k, EvalReport, NoiseType, TestCase};
pub use engine::Engine;
pub use feedback::{compute_binary_labels, compute_labels, label_table, LabelRow, RewardSample, SelectionEvent, Window};
pub use reward::{
    acc_binary, acc_rank, loss_batch_wise, loss_class_wise, loss_contra_wise, loss_query_wise, loss_sample_wise,
    train_reward_model, FeaturizerConfig, Method, RewardModel, TrainConfig, TrainReport,
};
