//! Randomized tokenizer invariants: determinism, id bounds, the padded
//! sequence structure, and subword reconstruction.

use proptest::prelude::*;
use xmodal_core::tokenizer::{TokenSequence, Vocabulary, CLS_TOKEN, PAD_TOKEN, SEP_TOKEN, UNK_TOKEN};

fn test_vocab() -> Vocabulary {
    let mut tokens: Vec<String> = [PAD_TOKEN, UNK_TOKEN, CLS_TOKEN, SEP_TOKEN]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for t in [
        "a", "b", "ab", "abc", "##a", "##b", "##c", "##ab", "game", "play", "##er", "fun", "!",
        "?", ",",
    ] {
        tokens.push(t.to_string());
    }
    Vocabulary::from_tokens(tokens).unwrap()
}

fn assert_sequence_invariants(seq: &TokenSequence, vocab: &Vocabulary, max_len: usize) {
    assert_eq!(seq.ids.len(), max_len);
    assert_eq!(seq.mask.len(), max_len);
    assert!(seq.true_length >= 2 && seq.true_length <= max_len);
    for (i, &m) in seq.mask.iter().enumerate() {
        assert_eq!(m == 1, i < seq.true_length, "mask must be a 1-prefix");
    }
    for (i, &id) in seq.ids.iter().enumerate() {
        assert!(id < vocab.len(), "id {id} out of vocab");
        if i >= seq.true_length {
            assert_eq!(id, vocab.pad_id(), "padding must be [PAD]");
        }
    }
    assert_eq!(seq.ids[0], vocab.cls_id());
    assert_eq!(seq.ids[seq.true_length - 1], vocab.sep_id());
}

proptest! {
    #[test]
    fn encode_satisfies_sequence_invariants(
        phrase in "[a-cA-C!?, ]{0,40}",
        max_len in 2usize..20,
    ) {
        let vocab = test_vocab();
        let seq = vocab.encode(&phrase, max_len).unwrap();
        assert_sequence_invariants(&seq, &vocab, max_len);
    }

    #[test]
    fn encode_is_deterministic(phrase in "[a-z !,]{0,30}") {
        let vocab = test_vocab();
        let a = vocab.encode(&phrase, 16).unwrap();
        let b = vocab.encode(&phrase, 16).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn wordpiece_reconstructs_word_when_no_unk(word in "[abc]{1,12}") {
        let vocab = test_vocab();
        let pieces = vocab.wordpiece(&word);
        if pieces.iter().all(|p| p != UNK_TOKEN) {
            let rebuilt: String = pieces
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    if i == 0 {
                        p.as_str()
                    } else {
                        p.strip_prefix("##").expect("continuation prefix")
                    }
                })
                .collect();
            prop_assert_eq!(rebuilt, word);
        } else {
            // UNK replaces the whole word, never mixes with real pieces.
            prop_assert_eq!(pieces.len(), 1);
        }
    }
}
