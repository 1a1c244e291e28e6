use std::collections::{HashMap, HashSet};

use super::vocab::{Vocab, CONTINUATION, SPECIAL_TOKENS};
use super::wordpiece::{pretokenize, MAX_WORD_CHARS};
use crate::error::{Error, Result};

type Pair = (u32, u32);

struct Word {
    symbols: Vec<u32>,
    count: i64,
}

/// Trains a WordPiece vocabulary of at most `target_size` entries.
///
/// The alphabet is every character seen with frequency `>= min_frequency`,
/// in the form it occurs (`c` word-initially, `##c` inside a word). Merges
/// are picked by likelihood score `count(ab) / (count(a) · count(b))`, ties
/// broken by pair count and then by the pair's strings. Chunks containing a
/// character below `min_frequency` are left out; they encode to `[UNK]`.
pub fn train_vocab<I, S>(corpus: I, target_size: usize, min_frequency: u64) -> Result<Vocab>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut chunk_counts: HashMap<String, i64> = HashMap::new();
    for line in corpus {
        for word in pretokenize(line.as_ref()) {
            for chunk in word.chunks {
                if chunk.len() > MAX_WORD_CHARS {
                    continue;
                }
                let s: String = chunk.iter().map(|c| c.ch).collect();
                *chunk_counts.entry(s).or_default() += 1;
            }
        }
    }
    if chunk_counts.is_empty() {
        return Err(Error::Tokenizer("cannot train a vocabulary on an empty corpus".into()));
    }

    let mut symbols: Vec<String> = Vec::new();
    let mut symbol_ids: HashMap<String, u32> = HashMap::new();
    let mut intern = |s: String, symbols: &mut Vec<String>| -> u32 {
        *symbol_ids.entry(s.clone()).or_insert_with(|| {
            symbols.push(s);
            (symbols.len() - 1) as u32
        })
    };

    // sorted for a deterministic symbol numbering
    let mut chunks: Vec<(String, i64)> = chunk_counts.into_iter().collect();
    chunks.sort();

    let mut words: Vec<Word> = Vec::with_capacity(chunks.len());
    for (chunk, count) in &chunks {
        let syms = chunk
            .chars()
            .enumerate()
            .map(|(i, c)| {
                let s = if i == 0 {
                    c.to_string()
                } else {
                    format!("{CONTINUATION}{c}")
                };
                intern(s, &mut symbols)
            })
            .collect();
        words.push(Word {
            symbols: syms,
            count: *count,
        });
    }

    let mut freq = vec![0i64; symbols.len()];
    for w in &words {
        for &s in &w.symbols {
            freq[s as usize] += w.count;
        }
    }
    let min_freq = min_frequency.max(1) as i64;
    let alphabet_ok: Vec<bool> = freq.iter().map(|&f| f >= min_freq).collect();
    words.retain(|w| w.symbols.iter().all(|&s| alphabet_ok[s as usize]));

    let mut alphabet: Vec<u32> = (0..symbols.len() as u32)
        .filter(|&s| alphabet_ok[s as usize])
        .collect();
    alphabet.sort_by(|&a, &b| {
        freq[b as usize]
            .cmp(&freq[a as usize])
            .then_with(|| symbols[a as usize].cmp(&symbols[b as usize]))
    });

    let floor = SPECIAL_TOKENS.len() + alphabet.len();
    if target_size <= floor {
        return Err(Error::Tokenizer(format!(
            "target size {target_size} cannot hold {} specials and {} alphabet symbols",
            SPECIAL_TOKENS.len(),
            alphabet.len()
        )));
    }

    let mut vocab: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    let mut in_vocab: HashSet<String> = vocab.iter().cloned().collect();
    for &s in &alphabet {
        let tok = symbols[s as usize].clone();
        in_vocab.insert(tok.clone());
        vocab.push(tok);
    }

    // pair statistics over the retained words
    let mut freq = vec![0i64; symbols.len()];
    let mut pair_counts: HashMap<Pair, i64> = HashMap::new();
    let mut pair_words: HashMap<Pair, HashSet<usize>> = HashMap::new();
    for (wi, w) in words.iter().enumerate() {
        for &s in &w.symbols {
            freq[s as usize] += w.count;
        }
        for p in w.symbols.windows(2) {
            let pair = (p[0], p[1]);
            *pair_counts.entry(pair).or_default() += w.count;
            pair_words.entry(pair).or_default().insert(wi);
        }
    }

    while vocab.len() < target_size {
        let best = pair_counts
            .iter()
            .filter(|(_, &c)| c >= min_freq)
            .map(|(&pair, &c)| {
                let score = c as f64 / (freq[pair.0 as usize] as f64 * freq[pair.1 as usize] as f64);
                (pair, c, score)
            })
            .max_by(|x, y| {
                x.2.total_cmp(&y.2).then_with(|| x.1.cmp(&y.1)).then_with(|| {
                    let kx = (&symbols[x.0 .0 as usize], &symbols[x.0 .1 as usize]);
                    let ky = (&symbols[y.0 .0 as usize], &symbols[y.0 .1 as usize]);
                    ky.cmp(&kx)
                })
            });
        let Some((pair, _, _)) = best else { break };

        let merged = format!(
            "{}{}",
            symbols[pair.0 as usize],
            symbols[pair.1 as usize]
                .strip_prefix(CONTINUATION)
                .unwrap_or(&symbols[pair.1 as usize])
        );
        let new_sym = match symbol_ids.get(&merged) {
            Some(&id) => id,
            None => {
                symbols.push(merged.clone());
                freq.push(0);
                let id = (symbols.len() - 1) as u32;
                symbol_ids.insert(merged.clone(), id);
                id
            }
        };
        if in_vocab.insert(merged.clone()) {
            vocab.push(merged);
        }

        let affected: Vec<usize> = pair_words
            .remove(&pair)
            .map(|s| {
                let mut v: Vec<usize> = s.into_iter().collect();
                v.sort_unstable();
                v
            })
            .unwrap_or_default();
        for wi in affected {
            let w = &mut words[wi];
            for p in w.symbols.windows(2) {
                let pp = (p[0], p[1]);
                if let Some(c) = pair_counts.get_mut(&pp) {
                    *c -= w.count;
                    if *c <= 0 {
                        pair_counts.remove(&pp);
                    }
                }
            }
            let mut next = Vec::with_capacity(w.symbols.len());
            let mut i = 0;
            while i < w.symbols.len() {
                if i + 1 < w.symbols.len() && (w.symbols[i], w.symbols[i + 1]) == pair {
                    freq[pair.0 as usize] -= w.count;
                    freq[pair.1 as usize] -= w.count;
                    freq[new_sym as usize] += w.count;
                    next.push(new_sym);
                    i += 2;
                } else {
                    next.push(w.symbols[i]);
                    i += 1;
                }
            }
            w.symbols = next;
            for p in w.symbols.windows(2) {
                let pp = (p[0], p[1]);
                *pair_counts.entry(pp).or_default() += w.count;
                pair_words.entry(pp).or_default().insert(wi);
            }
        }
        pair_counts.remove(&pair);
    }

    Vocab::from_tokens(vocab)
}
