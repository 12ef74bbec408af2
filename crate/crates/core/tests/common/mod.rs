#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Mutex;

use ordersmith::backend::{Backend, BackendError, Example, MockConfig, MockLm, PromptTemplate};
use ordersmith::LabelSpace;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const POS_WORDS: [&str; 3] = ["good", "great", "fine"];
pub const NEG_WORDS: [&str; 3] = ["bad", "awful", "poor"];
const FILLER: [&str; 8] = ["the", "movie", "plot", "cast", "was", "quite", "scenes", "overall"];

pub fn binary_space() -> LabelSpace {
    LabelSpace::from_verbalizers(&["positive", "negative"]).unwrap()
}

pub fn mock_config() -> MockConfig {
    let mut keywords = BTreeMap::new();
    keywords.insert("positive".into(), POS_WORDS.iter().map(|s| s.to_string()).collect());
    keywords.insert("negative".into(), NEG_WORDS.iter().map(|s| s.to_string()).collect());
    MockConfig {
        keywords,
        alpha: 1.0,
        beta: 1.0,
        decay: 0.5,
    }
}

pub fn mock(space: &LabelSpace) -> MockLm {
    MockLm::new(&mock_config(), space, &PromptTemplate::sentiment()).unwrap()
}

/// Labeled texts whose keyword evidence is noisy: some carry no keyword,
/// some carry one for the other label.
pub fn synthetic_examples(n: usize, p_pos: f64, seed: u64, tag: &str) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let positive = rng.gen_bool(p_pos);
            let (own, other) = if positive {
                (POS_WORDS, NEG_WORDS)
            } else {
                (NEG_WORDS, POS_WORDS)
            };
            let n_own = match rng.gen_range(0..20) {
                0..=5 => 0,
                6..=15 => 1,
                _ => 2,
            };
            let n_other = usize::from(rng.gen_bool(0.3));
            let mut words: Vec<&str> = (0..3).map(|_| FILLER[rng.gen_range(0..FILLER.len())]).collect();
            for _ in 0..n_own {
                words.insert(rng.gen_range(0..=words.len()), own[rng.gen_range(0..3)]);
            }
            for _ in 0..n_other {
                words.insert(rng.gen_range(0..=words.len()), other[rng.gen_range(0..3)]);
            }
            let text = format!("{} {tag}{i}", words.join(" "));
            Example::labeled(text, if positive { "positive" } else { "negative" })
        })
        .collect()
}

pub fn write_jsonl(path: &Path, examples: &[Example]) {
    let mut out = String::new();
    for e in examples {
        let record = serde_json::json!({"text": e.text, "label": e.label});
        writeln!(out, "{record}").unwrap();
    }
    std::fs::write(path, out).unwrap();
}

/// Mock-backed config text over `train.jsonl` / `test.jsonl` in the same directory.
pub fn config_toml(extra: &str) -> String {
    format!(
        r#"
train = "train.jsonl"
test = "test.jsonl"
dataset_name = "synthetic"
{extra}

[[labels]]
id = "positive"
verbalizer = "positive"

[[labels]]
id = "negative"
verbalizer = "negative"

[backend]
kind = "mock"
alpha = 1.0
beta = 1.0
decay = 0.5

[backend.keywords]
positive = ["good", "great", "fine"]
negative = ["bad", "awful", "poor"]
"#
    )
}

/// Records every prompt that reaches the wrapped backend.
pub struct Recording<B> {
    pub inner: B,
    pub prompts: Mutex<Vec<String>>,
}

impl<B> Recording<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            prompts: Mutex::new(Vec::new()),
        }
    }

    pub fn take(&self) -> Vec<String> {
        std::mem::take(&mut *self.prompts.lock().unwrap())
    }
}

impl<B: Backend> Backend for Recording<B> {
    fn identity(&self) -> String {
        self.inner.identity()
    }

    fn next_token_logprobs(&self, prompt: &str, candidates: &[String]) -> Result<Vec<f64>, BackendError> {
        self.prompts.lock().unwrap().push(prompt.to_string());
        self.inner.next_token_logprobs(prompt, candidates)
    }
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}
