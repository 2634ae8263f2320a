//! Frame splitting and byte pair encoding.
//!
//! Frames are split at dots and underscores, then at camelCase boundaries,
//! and lowercased. BPE runs at character level within those pieces: training
//! repeatedly merges the most frequent adjacent symbol pair (ties broken
//! lexicographically) until the vocabulary limit is reached or no pair
//! occurs twice.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::trace::StackTrace;
use crate::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;

const PAD_SYMBOL: &str = "<pad>";
const UNK_SYMBOL: &str = "<unk>";
const VOCAB_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerConfig {
    pub vocab_size: usize,
    /// Frames kept per trace, counted from the top of the stack.
    pub max_frames: usize,
    pub max_tokens_per_frame: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig { vocab_size: 10_000, max_frames: 128, max_tokens_per_frame: 32 }
    }
}

/// Splits one normalized frame into lowercased sub-identifier pieces.
///
/// Dots and underscores separate segments; within a segment a boundary falls
/// before an uppercase letter that follows a lowercase letter or digit, and
/// before the last capital of an uppercase run followed by a lowercase
/// letter. Digits never start a piece.
pub fn split_frame(normalized: &str) -> Vec<String> {
    let mut pieces = Vec::new();
    for segment in normalized.split(['.', '_']) {
        let chars: Vec<char> = segment.chars().collect();
        if chars.is_empty() {
            continue;
        }
        let mut start = 0;
        for i in 1..chars.len() {
            let prev = chars[i - 1];
            let c = chars[i];
            let boundary = c.is_uppercase()
                && (prev.is_lowercase()
                    || prev.is_ascii_digit()
                    || (prev.is_uppercase()
                        && matches!(chars.get(i + 1), Some(n) if n.is_lowercase())));
            if boundary {
                pieces.push(chars[start..i].iter().collect::<String>().to_lowercase());
                start = i;
            }
        }
        pieces.push(chars[start..].iter().collect::<String>().to_lowercase());
    }
    pieces.retain(|p| !p.is_empty());
    pieces
}

/// Trained byte pair encoding vocabulary.
///
/// Ids are dense: PAD=0, UNK=1, the sorted training alphabet, then one id per
/// merge in training order.
#[derive(Debug, Clone)]
pub struct BpeVocab {
    merges: Vec<(String, String)>,
    token_to_id: BTreeMap<String, u32>,
    /// merge pair -> training-order rank, derived from `merges`
    ranks: HashMap<(String, String), usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    version: u32,
    vocab_size: usize,
    merges: Vec<(String, String)>,
    tokens: BTreeMap<String, u32>,
}

impl BpeVocab {
    pub fn size(&self) -> usize {
        self.token_to_id.len()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn id_of(&self, symbol: &str) -> Option<u32> {
        self.token_to_id.get(symbol).copied()
    }

    /// Encodes one split piece by greedy merge application in training order:
    /// repeatedly merge the adjacent pair with the lowest merge rank.
    /// Characters outside the training alphabet come out as UNK.
    pub fn encode_piece(&self, piece: &str) -> Vec<u32> {
        let mut symbols: Vec<String> = piece.chars().map(String::from).collect();
        if symbols.is_empty() {
            return Vec::new();
        }
        loop {
            let mut best: Option<(usize, usize)> = None; // (rank, position)
            for i in 0..symbols.len() - 1 {
                let key = (symbols[i].clone(), symbols[i + 1].clone());
                if let Some(&rank) = self.ranks.get(&key) {
                    if best.map_or(true, |(r, _)| rank < r) {
                        best = Some((rank, i));
                    }
                }
            }
            let Some((rank, _)) = best else { break };
            let (left, right) = self.merges[rank].clone();
            let mut out = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
                    out.push(format!("{left}{right}"));
                    i += 2;
                } else {
                    out.push(std::mem::take(&mut symbols[i]));
                    i += 1;
                }
            }
            symbols = out;
        }
        symbols
            .iter()
            .map(|s| self.token_to_id.get(s).copied().unwrap_or(UNK))
            .collect()
    }

    pub fn to_json_string(&self) -> String {
        let file = VocabFile {
            version: VOCAB_VERSION,
            vocab_size: self.token_to_id.len(),
            merges: self.merges.clone(),
            tokens: self.token_to_id.clone(),
        };
        serde_json::to_string(&file).expect("vocab serialization cannot fail")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_string())?;
        Ok(())
    }

    pub fn from_json_str(json: &str, origin: &Path) -> Result<BpeVocab> {
        let file: VocabFile = serde_json::from_str(json)
            .map_err(|e| Error::artifact(origin, format!("invalid vocab json: {e}")))?;
        if file.version != VOCAB_VERSION {
            return Err(Error::artifact(
                origin,
                format!("vocab version {} unsupported (expected {VOCAB_VERSION})", file.version),
            ));
        }
        if file.tokens.len() != file.vocab_size {
            return Err(Error::artifact(origin, "vocab_size does not match token count"));
        }
        let mut seen = vec![false; file.tokens.len()];
        for (_, &id) in &file.tokens {
            let idx = id as usize;
            if idx >= seen.len() || seen[idx] {
                return Err(Error::artifact(origin, format!("token ids not dense: id {id}")));
            }
            seen[idx] = true;
        }
        if file.tokens.get(PAD_SYMBOL) != Some(&PAD) || file.tokens.get(UNK_SYMBOL) != Some(&UNK)
        {
            return Err(Error::artifact(origin, "reserved pad/unk ids missing"));
        }
        for (l, r) in &file.merges {
            if !file.tokens.contains_key(l) || !file.tokens.contains_key(r) {
                return Err(Error::artifact(origin, format!("merge ({l},{r}) references unknown symbol")));
            }
        }
        let ranks = file
            .merges
            .iter()
            .enumerate()
            .map(|(i, pair)| (pair.clone(), i))
            .collect();
        Ok(BpeVocab { merges: file.merges, token_to_id: file.tokens, ranks })
    }

    pub fn load(path: &Path) -> Result<BpeVocab> {
        let json = std::fs::read_to_string(path)?;
        Self::from_json_str(&json, path)
    }
}

struct Word {
    symbols: Vec<u32>,
    count: u64,
}

/// Trains a BPE vocabulary on the frames of the given corpus.
///
/// Deterministic: candidate pairs are ranked by (count desc, pair symbols
/// lexicographically asc), and merges stop once the best pair occurs fewer
/// than twice or the vocabulary is full.
pub fn train_bpe(corpus: &[StackTrace], vocab_size: usize) -> Result<BpeVocab> {
    let mut piece_counts: BTreeMap<String, u64> = BTreeMap::new();
    for trace in corpus {
        for frame in &trace.frames {
            for piece in split_frame(&frame.normalized) {
                *piece_counts.entry(piece).or_default() += 1;
            }
        }
    }
    if piece_counts.is_empty() {
        return Err(Error::Tokenizer("empty corpus: no frame pieces to train on".into()));
    }

    let alphabet: BTreeSet<char> = piece_counts.keys().flat_map(|p| p.chars()).collect();
    let min_size = 2 + alphabet.len();
    if vocab_size < min_size {
        return Err(Error::Tokenizer(format!(
            "vocab_size {vocab_size} below reserved + alphabet size {min_size}"
        )));
    }

    let mut symbols: Vec<String> = Vec::with_capacity(vocab_size);
    symbols.push(PAD_SYMBOL.into());
    symbols.push(UNK_SYMBOL.into());
    symbols.extend(alphabet.iter().map(|&c| String::from(c)));
    let mut symbol_ids: HashMap<String, u32> =
        symbols.iter().enumerate().map(|(i, s)| (s.clone(), i as u32)).collect();

    let mut words: Vec<Word> = piece_counts
        .iter()
        .map(|(piece, &count)| Word {
            symbols: piece.chars().map(|c| symbol_ids[&String::from(c)]).collect(),
            count,
        })
        .collect();

    // Pair bookkeeping: exact counts, an index of words containing each pair,
    // and a lazily invalidated max-heap keyed by (count, reverse-lex pair).
    let mut pair_counts: HashMap<(u32, u32), u64> = HashMap::new();
    let mut pair_words: HashMap<(u32, u32), BTreeSet<usize>> = HashMap::new();
    let mut heap: std::collections::BinaryHeap<(u64, std::cmp::Reverse<(String, String)>, (u32, u32))> =
        std::collections::BinaryHeap::new();

    for (w, word) in words.iter().enumerate() {
        for pair in word.symbols.windows(2) {
            let key = (pair[0], pair[1]);
            *pair_counts.entry(key).or_default() += word.count;
            pair_words.entry(key).or_default().insert(w);
        }
    }
    for (&pair, &count) in &pair_counts {
        let names = (symbols[pair.0 as usize].clone(), symbols[pair.1 as usize].clone());
        heap.push((count, std::cmp::Reverse(names), pair));
    }

    let mut merges: Vec<(String, String)> = Vec::new();
    while symbols.len() < vocab_size {
        let Some((count, _, pair)) = heap.pop() else { break };
        if pair_counts.get(&pair) != Some(&count) {
            continue; // stale heap entry
        }
        if count < 2 {
            break;
        }
        let left = symbols[pair.0 as usize].clone();
        let right = symbols[pair.1 as usize].clone();
        let merged = format!("{left}{right}");
        if merged == PAD_SYMBOL || merged == UNK_SYMBOL || symbol_ids.contains_key(&merged) {
            // Reserved-name or duplicate-symbol collision: retire the pair.
            pair_counts.remove(&pair);
            pair_words.remove(&pair);
            continue;
        }
        let new_id = symbols.len() as u32;
        symbols.push(merged.clone());
        symbol_ids.insert(merged, new_id);
        merges.push((left, right));
        pair_counts.remove(&pair);

        let members = pair_words.remove(&pair).unwrap_or_default();
        for w in members {
            let word = &mut words[w];
            if !word.symbols.windows(2).any(|p| (p[0], p[1]) == pair) {
                continue; // stale membership
            }
            let old = std::mem::take(&mut word.symbols);
            let mut new = Vec::with_capacity(old.len());
            let mut i = 0;
            while i < old.len() {
                if i + 1 < old.len() && (old[i], old[i + 1]) == pair {
                    new.push(new_id);
                    i += 2;
                } else {
                    new.push(old[i]);
                    i += 1;
                }
            }
            let count_w = word.count;
            for p in old.windows(2) {
                let key = (p[0], p[1]);
                if key == pair {
                    continue; // already removed wholesale
                }
                if let Some(c) = pair_counts.get_mut(&key) {
                    *c -= count_w.min(*c);
                    if *c == 0 {
                        pair_counts.remove(&key);
                        if let Some(set) = pair_words.get_mut(&key) {
                            set.remove(&w);
                        }
                    } else {
                        let names =
                            (symbols[key.0 as usize].clone(), symbols[key.1 as usize].clone());
                        heap.push((*c, std::cmp::Reverse(names), key));
                    }
                }
            }
            for p in new.windows(2) {
                let key = (p[0], p[1]);
                *pair_counts.entry(key).or_default() += count_w;
                pair_words.entry(key).or_default().insert(w);
                let names = (symbols[key.0 as usize].clone(), symbols[key.1 as usize].clone());
                heap.push((pair_counts[&key], std::cmp::Reverse(names), key));
            }
            word.symbols = new;
        }
    }

    let token_to_id: BTreeMap<String, u32> =
        symbols.iter().enumerate().map(|(i, s)| (s.clone(), i as u32)).collect();
    let ranks = merges.iter().enumerate().map(|(i, p)| (p.clone(), i)).collect();
    Ok(BpeVocab { merges, token_to_id, ranks })
}

/// A trace after tokenization: per-frame token ids plus the normalized frame
/// strings the reranker uses for shared-frame identity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedTrace {
    pub frames: Vec<Vec<u32>>,
    pub frame_keys: Vec<String>,
}

/// Tokenizes a trace: frames beyond `max_frames` (from the top of the stack)
/// are dropped, tokens beyond `max_tokens_per_frame` are dropped. A frame
/// whose pieces produce no tokens is kept as a single UNK so downstream
/// encoders never see an empty sequence.
pub fn encode_trace(
    trace: &StackTrace,
    vocab: &BpeVocab,
    max_frames: usize,
    max_tokens_per_frame: usize,
) -> TokenizedTrace {
    let keep = trace.frames.len().min(max_frames.max(1));
    let mut frames = Vec::with_capacity(keep);
    let mut frame_keys = Vec::with_capacity(keep);
    for frame in &trace.frames[..keep] {
        let mut tokens = Vec::new();
        'pieces: for piece in split_frame(&frame.normalized) {
            for id in vocab.encode_piece(&piece) {
                tokens.push(id);
                if tokens.len() >= max_tokens_per_frame.max(1) {
                    break 'pieces;
                }
            }
        }
        if tokens.is_empty() {
            tokens.push(UNK);
        }
        frames.push(tokens);
        frame_keys.push(frame.normalized.clone());
    }
    TokenizedTrace { frames, frame_keys }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn trace_of(frames: &[&str]) -> StackTrace {
        StackTrace::new("r", 0, frames.iter().map(|s| s.to_string()).collect(), None).unwrap()
    }

    #[test]
    fn split_frame_camel_case() {
        assert_eq!(
            split_frame("com.intellij.openapi.EditorImpl.getDocument"),
            ["com", "intellij", "openapi", "editor", "impl", "get", "document"]
        );
        assert_eq!(split_frame("a.B.c"), ["a", "b", "c"]);
    }

    #[test]
    fn split_frame_uppercase_runs() {
        assert_eq!(split_frame("io.HTTPServer.run"), ["io", "http", "server", "run"]);
        assert_eq!(split_frame("XMLHttpRequest"), ["xml", "http", "request"]);
    }

    #[test]
    fn split_frame_underscores_and_digits() {
        assert_eq!(split_frame("g_main_loop_run"), ["g", "main", "loop", "run"]);
        assert_eq!(split_frame("utf8Decode"), ["utf8", "decode"]);
        assert_eq!(split_frame("foo_bar2Baz"), ["foo", "bar2", "baz"]);
    }

    #[test]
    fn split_frame_drops_empty_segments() {
        assert_eq!(split_frame("a..b"), ["a", "b"]);
        assert_eq!(split_frame("_leading"), ["leading"]);
    }

    #[test]
    fn train_on_repeated_single_pair() {
        let corpus = vec![trace_of(&["aaaa"]), trace_of(&["aaaa"])];
        let vocab = train_bpe(&corpus, 260).unwrap();
        assert_eq!(vocab.merges()[0], ("a".to_string(), "a".to_string()));
        assert!(vocab.id_of("aa").is_some());
    }

    #[test]
    fn train_tie_breaks_lexicographically() {
        // "abab": pairs (a,b) x2, (b,a) x1 per word. With several copies the
        // top pair is unique, but "abab" vs "baba" mixes give ties; the
        // smaller pair string must win.
        let corpus = vec![trace_of(&["abab", "baba"]); 3];
        let vocab = train_bpe(&corpus, 100).unwrap();
        // (a,b) count = 2+1 = 3, (b,a) count = 1+2 = 3: lexicographic tie-break.
        assert_eq!(vocab.merges()[0], ("a".to_string(), "b".to_string()));
    }

    #[test]
    fn train_rejects_tiny_vocab() {
        let corpus = vec![trace_of(&["abcdef"])];
        assert!(train_bpe(&corpus, 4).is_err());
    }

    #[test]
    fn train_rejects_empty_corpus() {
        assert!(train_bpe(&[], 100).is_err());
    }

    #[test]
    fn vocab_never_exceeds_limit() {
        let corpus = vec![trace_of(&["com.example.Foo.bar", "com.example.Foo.baz"]); 10];
        let vocab = train_bpe(&corpus, 24).unwrap();
        assert!(vocab.size() <= 24);
    }

    #[test]
    fn unknown_characters_encode_to_unk() {
        let corpus = vec![trace_of(&["abab"]); 4];
        let vocab = train_bpe(&corpus, 100).unwrap();
        let ids = vocab.encode_piece("abz");
        assert!(ids.contains(&UNK));
    }

    #[test]
    fn known_alphabet_never_produces_unk() {
        let corpus = vec![
            trace_of(&["com.example.service.UserHandler.handleRequest"]),
            trace_of(&["org.lib.Parser.parseInput"]),
        ];
        let vocab = train_bpe(&corpus, 200).unwrap();
        // A name unseen in training but over the training alphabet.
        for piece in split_frame("net.example.RequestParser.run") {
            let ids = vocab.encode_piece(&piece);
            assert!(!ids.contains(&UNK), "piece {piece} produced UNK: {ids:?}");
            assert!(!ids.is_empty());
        }
    }

    #[test]
    fn encode_trace_truncates() {
        let corpus = vec![trace_of(&["aa.bb.cc"]); 4];
        let vocab = train_bpe(&corpus, 100).unwrap();
        let long = trace_of(&["aa.bb.cc", "aa.bb", "cc.aa", "bb.cc"]);
        let tok = encode_trace(&long, &vocab, 2, 2);
        assert_eq!(tok.frames.len(), 2);
        assert!(tok.frames.iter().all(|f| f.len() <= 2));
        assert_eq!(tok.frame_keys, ["aa.bb.cc", "aa.bb"]);
    }

    #[test]
    fn vocab_json_roundtrip() {
        let corpus = vec![trace_of(&["com.example.Foo.bar", "org.Foo.baz"]); 5];
        let vocab = train_bpe(&corpus, 64).unwrap();
        let json = vocab.to_json_string();
        let back = BpeVocab::from_json_str(&json, Path::new("test")).unwrap();
        assert_eq!(back.to_json_string(), json);
        assert_eq!(back.encode_piece("example"), vocab.encode_piece("example"));
    }

    #[test]
    fn training_is_deterministic() {
        let corpus: Vec<StackTrace> = (0..20)
            .map(|i| trace_of(&[&format!("com.pkg{i}.Cls{i}.method{i}"), "shared.Frame.run"]))
            .collect();
        let a = train_bpe(&corpus, 150).unwrap().to_json_string();
        let b = train_bpe(&corpus, 150).unwrap().to_json_string();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn encode_never_exceeds_piece_length(
            pieces in prop::collection::vec("[a-z]{1,12}", 1..6),
        ) {
            let frames: Vec<String> = pieces.clone();
            let corpus = vec![StackTrace::new("r", 0, frames, None).unwrap(); 3];
            let vocab = train_bpe(&corpus, 500).unwrap();
            for piece in &pieces {
                let ids = vocab.encode_piece(piece);
                prop_assert!(ids.len() <= piece.chars().count());
                prop_assert!(!ids.is_empty());
                for id in ids {
                    prop_assert!((id as usize) < vocab.size());
                }
            }
        }

        #[test]
        fn split_pieces_are_lowercase_nonempty(frame in "[a-zA-Z0-9._]{1,40}") {
            let pieces = split_frame(&frame);
            let total: usize = pieces.iter().map(|p| p.chars().count()).sum();
            // Splitting never invents characters.
            prop_assert!(total <= frame.chars().count());
            for piece in pieces {
                prop_assert!(!piece.is_empty());
                prop_assert_eq!(piece.clone(), piece.to_lowercase());
            }
        }

        #[test]
        fn digits_never_start_a_mid_segment_piece(frame in "[a-z][a-zA-Z0-9]{0,30}") {
            // Segments starting with a letter never yield a digit-led piece.
            for piece in split_frame(&frame) {
                prop_assert!(!piece.starts_with(|c: char| c.is_ascii_digit()));
            }
        }
    }
}
