use std::collections::HashMap;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::tokenizer::{Vocab, SPECIAL_TOKENS};

/// Ids below this are the special tokens.
pub const FIRST_CONTENT_ID: u32 = SPECIAL_TOKENS.len() as u32;

/// A toy language: Zipf-distributed base tokens plus two planted rules.
///
/// * bigram rule: a trigger token is always followed by its target;
/// * skip rule: an opener at position `t` forces its closer at `t + 2`
///   unless a bigram rule already claims that position.
///
/// Targets and closers are never drawn from the base distribution, so they
/// carry exactly the rule signal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticLangSpec {
    /// Size of the whole id space, specials included.
    pub vocab_size: usize,
    /// Tokens per generated sequence.
    pub sequence_len: usize,
    pub num_sequences: usize,
    pub num_bigrams: usize,
    pub num_skip_rules: usize,
    pub zipf_exponent: f64,
    pub seed: u64,
}

impl Default for SyntheticLangSpec {
    fn default() -> Self {
        SyntheticLangSpec {
            vocab_size: 8192,
            // one sequence plus its [SEP] fills a 32-token window after [CLS]
            sequence_len: 30,
            num_sequences: 200,
            num_bigrams: 64,
            num_skip_rules: 32,
            zipf_exponent: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticLanguage {
    spec: SyntheticLangSpec,
    base_ids: Vec<u32>,
    base_probs: Vec<f64>,
    base_dist: WeightedIndex<f64>,
    bigrams: HashMap<u32, u32>,
    skips: HashMap<u32, u32>,
    /// (trigger, target) in rank order; used to draw look-alike corruptions.
    bigram_list: Vec<(u32, u32)>,
    skip_list: Vec<(u32, u32)>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticCorpus {
    pub train: Vec<Vec<u32>>,
    pub heldout: Vec<Vec<u32>>,
}

impl SyntheticLanguage {
    pub fn new(spec: SyntheticLangSpec) -> Result<Self> {
        if spec.vocab_size < 16 {
            return Err(Error::Config(format!("synthetic vocab_size must be >= 16, got {}", spec.vocab_size)));
        }
        let content = spec.vocab_size - FIRST_CONTENT_ID as usize;
        let planted = 2 * (spec.num_bigrams + spec.num_skip_rules);
        if planted + 2 > content {
            return Err(Error::Config(format!(
                "{} planted rules need {planted} distinct tokens plus 2 free ones, only {content} available",
                spec.num_bigrams + spec.num_skip_rules
            )));
        }
        if spec.sequence_len == 0 {
            return Err(Error::Config("sequence_len must be positive".into()));
        }
        if !(spec.zipf_exponent >= 0.0 && spec.zipf_exponent.is_finite()) {
            return Err(Error::Config(format!("zipf_exponent must be finite and >= 0, got {}", spec.zipf_exponent)));
        }
        let mut ids: Vec<u32> = (FIRST_CONTENT_ID..spec.vocab_size as u32).collect();
        ids.shuffle(&mut stream_rng(spec.seed, "synthetic.layout", 0));
        let (nb, ns) = (spec.num_bigrams, spec.num_skip_rules);
        let targets = &ids[..nb];
        let closers = &ids[nb..nb + ns];
        let base_ids = ids[nb + ns..].to_vec();
        let weights: Vec<f64> = (1..=base_ids.len())
            .map(|r| (r as f64).powf(-spec.zipf_exponent))
            .collect();
        let z: f64 = weights.iter().sum();
        let base_probs: Vec<f64> = weights.iter().map(|w| w / z).collect();
        let base_dist = WeightedIndex::new(&base_probs).expect("positive weights");
        // the most frequent base tokens carry the rules
        let bigram_list: Vec<(u32, u32)> = base_ids[..nb].iter().copied().zip(targets.iter().copied()).collect();
        let skip_list: Vec<(u32, u32)> = base_ids[nb..nb + ns]
            .iter()
            .copied()
            .zip(closers.iter().copied())
            .collect();
        Ok(SyntheticLanguage {
            bigrams: bigram_list.iter().copied().collect(),
            skips: skip_list.iter().copied().collect(),
            bigram_list,
            skip_list,
            base_ids,
            base_probs,
            base_dist,
            spec,
        })
    }

    pub fn spec(&self) -> &SyntheticLangSpec {
        &self.spec
    }

    /// Base-distribution tokens and their probabilities.
    pub fn base_distribution(&self) -> (&[u32], &[f64]) {
        (&self.base_ids, &self.base_probs)
    }

    pub fn bigrams(&self) -> &[(u32, u32)] {
        &self.bigram_list
    }

    pub fn skip_rules(&self) -> &[(u32, u32)] {
        &self.skip_list
    }

    /// The token a rule forces at position `t`, if any.
    pub fn forced(&self, seq: &[u32], t: usize) -> Option<u32> {
        if t >= 1 {
            if let Some(&b) = self.bigrams.get(&seq[t - 1]) {
                return Some(b);
            }
        }
        if t >= 2 {
            if let Some(&c) = self.skips.get(&seq[t - 2]) {
                return Some(c);
            }
        }
        None
    }

    pub fn sample_base(&self, rng: &mut impl Rng) -> u32 {
        self.base_ids[self.base_dist.sample(rng)]
    }

    pub fn generate(&self, len: usize, rng: &mut impl Rng) -> Vec<u32> {
        let mut seq = Vec::with_capacity(len);
        for t in 0..len {
            let tok = match self.forced(&seq, t) {
                Some(f) => f,
                None => self.sample_base(rng),
            };
            seq.push(tok);
        }
        seq
    }

    /// Independently for each rule-forced position, with probability `rate`,
    /// substitutes the output of a different rule of the same kind whose
    /// trigger is drawn from the base distribution. Unigram statistics of
    /// the outputs are preserved; only the pairing breaks. Returns the number
    /// of substitutions.
    pub fn corrupt(&self, seq: &mut [u32], rate: f64, rng: &mut impl Rng) -> usize {
        let original = seq.to_vec();
        let mut changed = 0;
        for t in 0..seq.len() {
            let Some(f) = self.forced(&original, t) else { continue };
            if !rng.gen_bool(rate) {
                continue;
            }
            let is_bigram = t >= 1 && self.bigrams.contains_key(&original[t - 1]);
            let (list, trigger_probs) = if is_bigram {
                (&self.bigram_list, &self.base_probs[..self.bigram_list.len()])
            } else {
                let nb = self.bigram_list.len();
                (&self.skip_list, &self.base_probs[nb..nb + self.skip_list.len()])
            };
            if list.len() < 2 {
                continue;
            }
            let weights: Vec<f64> = list
                .iter()
                .zip(trigger_probs)
                .map(|((_, out), &p)| if *out == f { 0.0 } else { p })
                .collect();
            let pick = WeightedIndex::new(&weights).expect("another rule exists").sample(rng);
            seq[t] = list[pick].1;
            changed += 1;
        }
        changed
    }

    /// `num_sequences` sequences from `self.spec.seed`; the first 95% train, the
    /// rest are held out.
    pub fn corpus(&self) -> SyntheticCorpus {
        let seqs: Vec<Vec<u32>> = (0..self.spec.num_sequences as u64)
            .map(|i| self.generate(self.spec.sequence_len, &mut stream_rng(self.spec.seed, "synthetic.seq", i)))
            .collect();
        let n_train = (seqs.len() * 95).div_ceil(100);
        let mut train = seqs;
        let heldout = train.split_off(n_train);
        SyntheticCorpus { train, heldout }
    }

    /// Surface form of a content id: lowercase letters only, so it survives
    /// normalization and tokenizes to exactly one piece under [`Self::vocab`].
    pub fn word(id: u32) -> String {
        let mut n = (id - FIRST_CONTENT_ID) as usize;
        let mut s = vec![b's'];
        loop {
            s.push(b'a' + (n % 26) as u8);
            n /= 26;
            if n == 0 {
                break;
            }
        }
        String::from_utf8(s).expect("ascii")
    }

    pub fn render(ids: &[u32]) -> String {
        ids.iter().map(|&i| Self::word(i)).collect::<Vec<_>>().join(" ")
    }

    /// Specials followed by every content word, so ids coincide with the
    /// generator's.
    pub fn vocab(&self) -> Vocab {
        let tokens = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain((FIRST_CONTENT_ID..self.spec.vocab_size as u32).map(Self::word))
            .collect();
        Vocab::from_tokens(tokens).expect("synthetic words are distinct")
    }
}
