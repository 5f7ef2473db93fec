//! Fixed token-id layout and prompt template shared by the dataset
//! generator and the planted-circuit constructor.
//!
//! The synthetic "system preamble" is a short fixed token pattern with one
//! forbidden-word slot and a two-token injection window, so the forbidden
//! token sits at a constant, queryable position across every render of a
//! fact.

/// Special tokens.
pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const SYS_A: u32 = 2;
pub const SYS_B: u32 = 3;
pub const SYS_C: u32 = 4;
pub const FORBID_MARK: u32 = 5;
pub const QUERY: u32 = 6;
/// First token of a filled injection window ("from <distractor>").
pub const INJ_MARK: u32 = 7;

/// Token-id region bases. Regions are sized for the 512-token toy vocab.
pub const SUBJECT_BASE: u32 = 16;
pub const MAX_SUBJECTS: u32 = 128;
pub const RELATION_BASE: u32 = SUBJECT_BASE + MAX_SUBJECTS; // 144
pub const MAX_RELATIONS: u32 = 16;
pub const ANSWER_BASE: u32 = RELATION_BASE + MAX_RELATIONS; // 160
/// Alias classes are adjacent token pairs; 16 classes = 32 answer tokens.
pub const MAX_ANSWER_CLASSES: u32 = 16;
pub const FILLER_BASE: u32 = ANSWER_BASE + 2 * MAX_ANSWER_CLASSES; // 192
pub const MIN_VOCAB: u32 = 256;

/// Rendered prompt layout (fixed length):
/// `BOS SYS_A inj inj SYS_B FORBID_MARK <forbidden> SYS_C <subject> <relation> QUERY`
pub const PROMPT_LEN: usize = 11;
pub const INJECTION_SLOT: [usize; 2] = [2, 3];
pub const FORBIDDEN_SLOT: usize = 6;
pub const SUBJECT_POS: usize = 8;
pub const RELATION_POS: usize = 9;
pub const FINAL_POS: usize = PROMPT_LEN - 1;

pub fn is_answer_token(t: u32) -> bool {
    (ANSWER_BASE..FILLER_BASE).contains(&t)
}

pub fn is_subject_token(t: u32) -> bool {
    (SUBJECT_BASE..SUBJECT_BASE + MAX_SUBJECTS).contains(&t)
}

/// Alias-class id of an answer token.
pub fn answer_class(t: u32) -> Option<u32> {
    is_answer_token(t).then(|| (t - ANSWER_BASE) / 2)
}

/// The two case-variant tokens of an alias class.
pub fn class_tokens(class: u32) -> [u32; 2] {
    [ANSWER_BASE + 2 * class, ANSWER_BASE + 2 * class + 1]
}

/// Primary (lower-id) token of an alias class.
pub fn class_primary(class: u32) -> u32 {
    ANSWER_BASE + 2 * class
}

/// Category of an alias class, for a world with `classes_per_category`
/// classes in each category.
pub fn class_category(class: u32, classes_per_category: u32) -> u32 {
    class / classes_per_category
}

/// Canonical subject-to-answer-class mapping (16 classes, 4 per category):
/// the ranked answers of subject `i` cycle within one category. The planted
/// circuit hard-wires this mapping, so worlds analyzed with a planted model
/// must use it too.
pub fn canonical_classes(subject_index: u32) -> [u32; 3] {
    let c0 = subject_index % MAX_ANSWER_CLASSES;
    let cat = c0 / 4;
    let idx = c0 % 4;
    [c0, cat * 4 + (idx + 1) % 4, cat * 4 + (idx + 2) % 4]
}
