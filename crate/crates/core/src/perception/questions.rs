use serde::{Deserialize, Serialize};

use super::PerceptionError;

/// Number of hierarchical questions asked per image.
pub const QUESTION_COUNT: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: u8,
    pub text: String,
}

/// The four questions, ordered from specific local regions (Q1, Q2) through
/// targets (Q3) to the global scene (Q4).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuestionSet {
    questions: [Question; QUESTION_COUNT],
}

pub const DEFAULT_QUESTIONS: [&str; QUESTION_COUNT] = [
    "Which regions of the image have the highest contrast?",
    "Which regions contain the most detailed information?",
    "What targets are significant in this image?",
    "What is the content of the image?",
];

impl QuestionSet {
    /// Questions get ids 1..=4 in order. Texts must be non-empty.
    pub fn new(texts: [impl Into<String>; QUESTION_COUNT]) -> Result<Self, PerceptionError> {
        let mut i = 0u8;
        let questions = texts.map(|t| {
            i += 1;
            Question { id: i, text: t.into() }
        });
        if let Some(q) = questions.iter().find(|q| q.text.trim().is_empty()) {
            return Err(PerceptionError::InvalidQuestions(format!("question {} is empty", q.id)));
        }
        Ok(Self { questions })
    }

    pub fn iter(&self) -> impl Iterator<Item = &Question> {
        self.questions.iter()
    }

    pub fn get(&self, index: usize) -> &Question {
        &self.questions[index]
    }
}

impl Default for QuestionSet {
    fn default() -> Self {
        Self::new(DEFAULT_QUESTIONS).expect("default questions are valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_set_has_four_unique_ids() {
        let q = QuestionSet::default();
        let ids: Vec<u8> = q.iter().map(|q| q.id).collect();
        assert_eq!(ids, vec![1, 2, 3, 4]);
        assert_eq!(q.get(3).text, "What is the content of the image?");
        assert_eq!(q.get(2).text, "What targets are significant in this image?");
    }

    #[test]
    fn empty_text_rejected() {
        assert!(QuestionSet::new(["a", " ", "c", "d"]).is_err());
    }
}
