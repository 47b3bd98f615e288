//! Multi-choice prompt construction and encoder input assembly.
//!
//! A task's candidate relations become the prompt "[C] d1 [C] d2 ... [C] dN";
//! the instance gets its entity pair wrapped with [e1]..[/e1] and [e2]..[/e2];
//! the full encoder input is "[CLS] prompt [SEP] wrapped-instance [SEP]" with
//! every marker position recorded.

use thiserror::Error;

use crate::data::{validate_choices, validate_instance, DataError, RelationInstance, RelationType};
use crate::vocab::{self, Vocabulary};

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("choice list is empty")]
    EmptyChoices,
    #[error("prompt needs {needed} positions but max_len is {max_len}; the prompt is never truncated")]
    PromptTooLong { needed: usize, max_len: usize },
    #[error("truncation to {max_len} would drop an entity marker")]
    MarkerTruncated { max_len: usize },
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Assembled encoder input: token ids plus marker bookkeeping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelInput {
    pub ids: Vec<u32>,
    /// Position of each [C], one per choice, strictly increasing.
    pub choice_markers: Vec<usize>,
    pub e1_open: usize,
    pub e1_close: usize,
    pub e2_open: usize,
    pub e2_close: usize,
    /// [first separator, terminal separator]
    pub sep_positions: [usize; 2],
}

impl ModelInput {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Re-derives every marker position by scanning `ids`; mismatch means a
    /// construction bug.
    pub fn validate(&self) -> Result<(), String> {
        if self.ids.first() != Some(&vocab::CLS) {
            return Err("input does not start with [CLS]".into());
        }
        let seps: Vec<usize> = scan(&self.ids, vocab::SEP);
        if seps.len() != 2 || seps != self.sep_positions {
            return Err(format!("separators at {seps:?}, recorded {:?}", self.sep_positions));
        }
        if self.sep_positions[1] != self.ids.len() - 1 {
            return Err("terminal [SEP] is not last".into());
        }
        let choices = scan(&self.ids, vocab::CHOICE);
        if choices != self.choice_markers {
            return Err(format!(
                "choice markers at {choices:?}, recorded {:?}",
                self.choice_markers
            ));
        }
        if self.choice_markers.iter().any(|&p| p >= seps[0]) {
            return Err("choice marker after first [SEP]".into());
        }
        for (id, pos) in [
            (vocab::E1_OPEN, self.e1_open),
            (vocab::E1_CLOSE, self.e1_close),
            (vocab::E2_OPEN, self.e2_open),
            (vocab::E2_CLOSE, self.e2_close),
        ] {
            let found = scan(&self.ids, id);
            if found != [pos] {
                return Err(format!("marker {id} at {found:?}, recorded {pos}"));
            }
        }
        if !(seps[0] < self.e1_open
            && self.e1_open < self.e1_close
            && self.e1_close < self.e2_open
            && self.e2_open < self.e2_close)
        {
            return Err("entity markers out of order".into());
        }
        Ok(())
    }
}

fn scan(ids: &[u32], id: u32) -> Vec<usize> {
    ids.iter()
        .enumerate()
        .filter(|(_, &x)| x == id)
        .map(|(p, _)| p)
        .collect()
}

/// "[C] d1 [C] d2 ..." as surface tokens, plus the prompt-relative position
/// of each [C].
pub fn build_choice_prompt(
    choices: &[RelationType],
) -> Result<(Vec<String>, Vec<usize>), CodecError> {
    if choices.is_empty() {
        return Err(CodecError::EmptyChoices);
    }
    validate_choices(choices)?;
    let mut tokens = Vec::new();
    let mut markers = Vec::with_capacity(choices.len());
    for choice in choices {
        markers.push(tokens.len());
        tokens.push("[C]".to_string());
        tokens.extend(choice.description.iter().cloned());
    }
    Ok((tokens, markers))
}

/// Wraps the entity pair: "[e1] head .. [/e1] ... [e2] tail .. [/e2]".
/// Output length is n + 4 and stripping the markers recovers the input.
pub fn wrap_instance(inst: &RelationInstance) -> Result<Vec<String>, CodecError> {
    validate_instance(inst)?;
    let mut out = Vec::with_capacity(inst.tokens.len() + 4);
    for (i, tok) in inst.tokens.iter().enumerate() {
        if i == inst.head.start {
            out.push("[e1]".to_string());
        }
        if i == inst.tail.start {
            out.push("[e2]".to_string());
        }
        out.push(tok.clone());
        if i == inst.head.end {
            out.push("[/e1]".to_string());
        }
        if i == inst.tail.end {
            out.push("[/e2]".to_string());
        }
    }
    Ok(out)
}

/// Concatenates prompt and wrapped instance into the final id sequence.
/// Truncation drops instance tokens from the right and never touches the
/// prompt or any marker.
pub fn assemble_input(
    prompt_tokens: &[String],
    wrapped_instance: &[String],
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<ModelInput, CodecError> {
    let prompt_len = prompt_tokens.len();
    if prompt_len + 3 > max_len {
        return Err(CodecError::PromptTooLong {
            needed: prompt_len + 3,
            max_len,
        });
    }
    let budget = max_len - prompt_len - 3;
    let kept = wrapped_instance.len().min(budget);
    if wrapped_instance[kept..]
        .iter()
        .any(|t| matches!(t.as_str(), "[e1]" | "[/e1]" | "[e2]" | "[/e2]"))
    {
        return Err(CodecError::MarkerTruncated { max_len });
    }

    let mut ids = Vec::with_capacity(prompt_len + kept + 3);
    ids.push(vocab::CLS);
    let mut choice_markers = Vec::new();
    for tok in prompt_tokens {
        if tok == "[C]" {
            choice_markers.push(ids.len());
        }
        ids.push(vocab.id(tok));
    }
    let first_sep = ids.len();
    ids.push(vocab::SEP);
    let (mut e1_open, mut e1_close, mut e2_open, mut e2_close) = (0, 0, 0, 0);
    for tok in &wrapped_instance[..kept] {
        let pos = ids.len();
        match tok.as_str() {
            "[e1]" => e1_open = pos,
            "[/e1]" => e1_close = pos,
            "[e2]" => e2_open = pos,
            "[/e2]" => e2_close = pos,
            _ => {}
        }
        ids.push(vocab.id(tok));
    }
    let last_sep = ids.len();
    ids.push(vocab::SEP);

    Ok(ModelInput {
        ids,
        choice_markers,
        e1_open,
        e1_close,
        e2_open,
        e2_close,
        sep_positions: [first_sep, last_sep],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{RelId, Span};
    use proptest::prelude::*;

    fn rel(desc: &str) -> RelationType {
        RelationType::new(
            RelId::new(desc.replace(' ', "_")),
            desc.split_whitespace().map(String::from).collect(),
        )
        .unwrap()
    }

    fn tim_cook() -> RelationInstance {
        RelationInstance::new(
            ["Tim", "Cook", "is", "the", "CEO", "of", "Apple", "."]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            Span::new(0, 1),
            Span::new(6, 6),
            None,
        )
        .unwrap()
    }

    #[test]
    fn figure_style_prompt() {
        let choices = [rel("employee of"), rel("ceo of"), rel("others")];
        let (tokens, markers) = build_choice_prompt(&choices).unwrap();
        assert_eq!(
            tokens.join(" "),
            "[C] employee of [C] ceo of [C] others"
        );
        assert_eq!(markers, vec![0, 3, 6]);
    }

    #[test]
    fn single_choice_prompt() {
        let (tokens, markers) = build_choice_prompt(&[rel("r")]).unwrap();
        assert_eq!(tokens, vec!["[C]", "r"]);
        assert_eq!(markers, vec![0]);
    }

    #[test]
    fn empty_choices_rejected() {
        assert!(matches!(
            build_choice_prompt(&[]),
            Err(CodecError::EmptyChoices)
        ));
    }

    #[test]
    fn wrap_places_markers_around_entities() {
        let wrapped = wrap_instance(&tim_cook()).unwrap();
        assert_eq!(
            wrapped.join(" "),
            "[e1] Tim Cook [/e1] is the CEO of [e2] Apple [/e2] ."
        );
        assert_eq!(wrapped.len(), tim_cook().tokens.len() + 4);
    }

    #[test]
    fn wrap_minimal_instance() {
        let inst = RelationInstance::new(
            vec!["t1".into(), "t2".into()],
            Span::new(0, 0),
            Span::new(1, 1),
            None,
        )
        .unwrap();
        let wrapped = wrap_instance(&inst).unwrap();
        assert_eq!(wrapped.join(" "), "[e1] t1 [/e1] [e2] t2 [/e2]");
        assert_eq!(wrapped.len(), 6);
    }

    #[test]
    fn stripping_markers_recovers_tokens() {
        let inst = tim_cook();
        let wrapped = wrap_instance(&inst).unwrap();
        let stripped: Vec<&String> = wrapped
            .iter()
            .filter(|t| !matches!(t.as_str(), "[e1]" | "[/e1]" | "[e2]" | "[/e2]"))
            .collect();
        assert_eq!(stripped, inst.tokens.iter().collect::<Vec<_>>());
    }

    #[test]
    fn assemble_full_example() {
        let choices = [rel("employee of"), rel("ceo of"), rel("others")];
        let (prompt, _) = build_choice_prompt(&choices).unwrap();
        let wrapped = wrap_instance(&tim_cook()).unwrap();
        let vocab = Vocabulary::build(
            tim_cook()
                .tokens
                .iter()
                .map(String::as_str)
                .chain(["employee", "of", "ceo", "others"]),
        );
        let input = assemble_input(&prompt, &wrapped, &vocab, 160).unwrap();
        input.validate().unwrap();
        assert_eq!(input.ids[0], vocab::CLS);
        assert_eq!(input.choice_markers.len(), 3);
        // [CLS] + 8 prompt tokens + [SEP] + 12 instance tokens + [SEP]
        assert_eq!(input.len(), 1 + prompt.len() + 1 + wrapped.len() + 1);
        assert_eq!(*input.ids.last().unwrap(), vocab::SEP);
    }

    #[test]
    fn length_arithmetic_single_choice() {
        let (prompt, _) = build_choice_prompt(&[rel("r")]).unwrap();
        let inst = RelationInstance::new(
            vec!["t1".into(), "t2".into()],
            Span::new(0, 0),
            Span::new(1, 1),
            None,
        )
        .unwrap();
        let wrapped = wrap_instance(&inst).unwrap();
        let vocab = Vocabulary::build(["t1", "t2", "r"]);
        let input = assemble_input(&prompt, &wrapped, &vocab, 160).unwrap();
        assert_eq!(input.len(), 1 + 2 + 1 + 6 + 1);
    }

    #[test]
    fn prompt_never_truncated() {
        let (prompt, _) = build_choice_prompt(&[rel("a very long description here")]).unwrap();
        let vocab = Vocabulary::build(["x"]);
        let wrapped = wrap_instance(&RelationInstance::new(
            vec!["x".into(), "y".into()],
            Span::new(0, 0),
            Span::new(1, 1),
            None,
        )
        .unwrap())
        .unwrap();
        assert!(matches!(
            assemble_input(&prompt, &wrapped, &vocab, 8),
            Err(CodecError::PromptTooLong { .. })
        ));
    }

    #[test]
    fn truncation_drops_tail_tokens_not_markers() {
        let inst = RelationInstance::new(
            (0..20).map(|i| format!("t{i}")).collect(),
            Span::new(0, 0),
            Span::new(2, 2),
            None,
        )
        .unwrap();
        let wrapped = wrap_instance(&inst).unwrap();
        let (prompt, _) = build_choice_prompt(&[rel("r")]).unwrap();
        let vocab = Vocabulary::build((0..20).map(|i| format!("t{i}")).collect::<Vec<_>>().iter().map(String::as_str));
        // room for prompt(2) + 3 + 10 instance tokens; markers end at index 6
        let input = assemble_input(&prompt, &wrapped, &vocab, 15).unwrap();
        input.validate().unwrap();
        assert_eq!(input.len(), 15);
        // dropping into the marker region errors instead
        assert!(matches!(
            assemble_input(&prompt, &wrapped, &vocab, 9),
            Err(CodecError::MarkerTruncated { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        /// Position bookkeeping always survives an independent rescan, and
        /// instance tokens are recoverable from the ids between separators.
        #[test]
        fn assembled_inputs_validate_and_invert(
            n_choices in 1usize..6,
            desc_len in 1usize..4,
            n_tokens in 2usize..24,
            head_start in 0usize..4,
            gap in 1usize..4,
        ) {
            let head_end = head_start;
            let tail_start = head_end + gap;
            prop_assume!(tail_start < n_tokens);
            let choices: Vec<RelationType> = (0..n_choices)
                .map(|c| {
                    RelationType::new(
                        RelId::new(format!("r{c}")),
                        (0..desc_len).map(|d| format!("w{c}_{d}")).collect(),
                    )
                    .unwrap()
                })
                .collect();
            let inst = RelationInstance::new(
                (0..n_tokens).map(|i| format!("tok{i}")).collect(),
                Span::new(head_start, head_end),
                Span::new(tail_start, tail_start),
                None,
            )
            .unwrap();
            let (prompt, markers) = build_choice_prompt(&choices).unwrap();
            prop_assert_eq!(markers.len(), n_choices);
            let wrapped = wrap_instance(&inst).unwrap();
            let vocab = Vocabulary::build(
                inst.tokens.iter().map(String::as_str)
                    .chain(choices.iter().flat_map(|c| c.description.iter().map(String::as_str))),
            );
            let input = assemble_input(&prompt, &wrapped, &vocab, 160).unwrap();
            prop_assert!(input.validate().is_ok());
            prop_assert_eq!(input.choice_markers.len(), n_choices);

            // Reversibility: ids strictly between the separators, minus the
            // four entity markers, are exactly the lowercased instance tokens.
            let body = &input.ids[input.sep_positions[0] + 1..input.sep_positions[1]];
            let recovered: Vec<String> = body
                .iter()
                .filter(|&&id| ![crate::vocab::E1_OPEN, crate::vocab::E1_CLOSE, crate::vocab::E2_OPEN, crate::vocab::E2_CLOSE].contains(&id))
                .map(|&id| vocab.token(id).unwrap().to_string())
                .collect();
            let expected: Vec<String> = inst.tokens.iter().map(|t| t.to_lowercase()).collect();
            prop_assert_eq!(recovered, expected);
        }
    }
}
