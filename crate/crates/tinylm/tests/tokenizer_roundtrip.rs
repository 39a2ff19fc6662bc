//! Randomized round-trip and vocabulary invariants for the tokenizer.

mod support;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use support::{random_utf8, TOKENIZER_CORPUS};
use tinylm::tokenizer::Tokenizer;

fn trained() -> Tokenizer {
    Tokenizer::train(TOKENIZER_CORPUS, 420).unwrap()
}

#[test]
fn round_trip_identity_on_random_utf8() {
    let tok = trained();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for i in 0..1000 {
        let s = random_utf8(&mut rng);
        let ids = tok.encode(&s, false);
        let out = tok.decode(&ids).unwrap();
        assert!(!out.lossy, "case {i}: unexpected lossy decode of {s:?}");
        assert_eq!(out.text, s, "case {i}: round trip changed the text");
    }
}

#[test]
fn round_trip_survives_bos() {
    let tok = trained();
    let s = "the dog lay by the door in 1998.";
    let ids = tok.encode(s, true);
    assert_eq!(ids[0], tok.bos_id());
    assert_eq!(tok.decode(&ids[1..]).unwrap().text, s);
}

#[test]
fn no_learned_token_contains_two_digits() {
    let tok = trained();
    // Ids 0/1 are BOS/EOS and 2..258 the byte tokens (whose names contain
    // hex digits); everything after is learned from the corpus.
    for id in 258..tok.vocab_size() as u32 {
        let t = tok.token(id).unwrap();
        let digits = t.chars().filter(char::is_ascii_digit).count();
        assert!(digits < 2, "token {id} {t:?} merges digits");
    }
    // Digits still tokenize, one token per digit.
    let ids = tok.encode("1998", false);
    assert_eq!(ids.len(), 4);
    for (id, d) in ids.iter().zip(["1", "9", "9", "8"]) {
        assert_eq!(tok.token(*id), Some(d));
    }
}

#[test]
fn byte_fallback_covers_unseen_characters() {
    let tok = trained();
    // U+597D is absent from the training corpus, so it must decompose
    // into byte tokens (ids 2..258) and still decode exactly.
    let s = "好";
    let ids = tok.encode(s, false);
    assert_eq!(ids.len(), s.len(), "one token per UTF-8 byte");
    for id in &ids {
        assert!((2..258).contains(id), "id {id} is not a byte token");
    }
    let out = tok.decode(&ids).unwrap();
    assert_eq!(out.text, s);
    assert!(!out.lossy);
}

#[test]
fn save_load_preserves_encodings() {
    let tok = trained();
    let reloaded = Tokenizer::from_file_str(&tok.to_file_string()).unwrap();
    assert_eq!(reloaded.vocab_size(), tok.vocab_size());
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for _ in 0..50 {
        let s = random_utf8(&mut rng);
        assert_eq!(reloaded.encode(&s, true), tok.encode(&s, true));
    }
}
