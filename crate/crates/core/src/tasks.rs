//! Templated factual-recall prompt sets.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{BpeVocab, TokenSpan};

const X_SLOT: &str = "{X}";
const Y_SLOT: &str = "{Y}";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub templates: Vec<String>,
    pub pairs: Vec<(String, String)>,
    pub shot_prefix_template: String,
}

impl TaskSpec {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: TaskSpec = serde_json::from_str(&text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.templates.is_empty() {
            return Err(Error::Task(format!("{}: no templates", self.name)));
        }
        for t in &self.templates {
            if t.matches(X_SLOT).count() != 1 {
                return Err(Error::Task(format!(
                    "template {t:?} must contain exactly one {X_SLOT}"
                )));
            }
        }
        if self.pairs.is_empty() {
            return Err(Error::Task(format!("{}: no pairs", self.name)));
        }
        let mut seen = HashSet::new();
        for (x, _) in &self.pairs {
            if !seen.insert(x) {
                return Err(Error::Task(format!("pair collision on {x:?}")));
            }
        }
        let p = &self.shot_prefix_template;
        if p.matches(X_SLOT).count() != 1 || p.matches(Y_SLOT).count() != 1 {
            return Err(Error::Task(format!(
                "shot prefix {p:?} needs one {X_SLOT} and one {Y_SLOT}"
            )));
        }
        Ok(())
    }
}

/// Options for [`build_dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetOptions {
    pub shots: usize,
    pub seed: u64,
    /// Prefix every prompt with the end-of-text token.
    pub prepend_bos: bool,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        Self {
            shots: 0,
            seed: 0,
            prepend_bos: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptInstance {
    /// Prompt text, without the end-of-text prefix.
    pub text: String,
    /// Token ids fed to the model (including the prefix when present).
    pub tokens: Vec<u32>,
    pub bos: bool,
    pub x: String,
    pub y: String,
    /// Span of X inside the query clause.
    pub x_span: TokenSpan,
    /// First subword of `" X"`.
    pub x_token: u32,
    /// First subword of `" Y"`.
    pub y_token: u32,
    pub template_index: usize,
    pub pair_index: usize,
    pub shots: usize,
    pub demonstrations: Vec<(String, String)>,
}

impl PromptInstance {
    /// Position whose token closes the X span.
    pub fn x_position(&self) -> usize {
        self.x_span.last()
    }

    pub fn final_position(&self) -> usize {
        self.tokens.len() - 1
    }

    /// Token ids of `text` alone.
    pub fn text_tokens(&self) -> &[u32] {
        &self.tokens[usize::from(self.bos)..]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDataset {
    pub task: String,
    pub options: DatasetOptions,
    pub prompts: Vec<PromptInstance>,
}

impl TaskDataset {
    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }
}

/// First token of the leading-space form of `word`.
pub fn first_subword(vocab: &BpeVocab, word: &str) -> Result<u32> {
    vocab
        .encode(&format!(" {word}"))
        .first()
        .copied()
        .ok_or_else(|| Error::Task(format!("{word:?} encodes to nothing")))
}

/// Every template filled with every pair, in template-major order.
pub fn build_dataset(
    spec: &TaskSpec,
    vocab: &BpeVocab,
    opts: DatasetOptions,
) -> Result<TaskDataset> {
    spec.validate()?;
    if opts.shots + 1 > spec.pairs.len() {
        return Err(Error::Task(format!(
            "{} shots need at least {} pairs, task has {}",
            opts.shots,
            opts.shots + 1,
            spec.pairs.len()
        )));
    }
    let bos = if opts.prepend_bos {
        Some(
            vocab
                .end_of_text()
                .ok_or_else(|| Error::Tokenizer("no end-of-text token".into()))?,
        )
    } else {
        None
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut prompts = Vec::with_capacity(spec.templates.len() * spec.pairs.len());
    for (ti, template) in spec.templates.iter().enumerate() {
        for (pi, (x, y)) in spec.pairs.iter().enumerate() {
            let demos: Vec<(String, String)> =
                index::sample(&mut rng, spec.pairs.len() - 1, opts.shots)
                    .into_iter()
                    .map(|i| spec.pairs[if i >= pi { i + 1 } else { i }].clone())
                    .collect();
            let prefix: String = demos
                .iter()
                .map(|(dx, dy)| {
                    spec.shot_prefix_template
                        .replace(X_SLOT, dx)
                        .replace(Y_SLOT, dy)
                })
                .collect();
            let text = format!("{prefix}{}", template.replace(X_SLOT, x));

            let mut tokens: Vec<u32> = bos.into_iter().collect();
            let offset = tokens.len();
            tokens.extend(vocab.encode(&text));

            // the query clause starts at the token holding the first byte
            // after the demonstrations
            let mut query_start = offset;
            let mut bytes = 0;
            for (i, &id) in tokens[offset..].iter().enumerate() {
                let next = bytes + vocab.decode_bytes(&[id])?.len();
                if next > prefix.len() {
                    query_start = offset + i;
                    break;
                }
                bytes = next;
            }
            let x_span = vocab.find_span(&tokens, x, Some(query_start..tokens.len()))?;

            prompts.push(PromptInstance {
                text,
                x_token: first_subword(vocab, x)?,
                y_token: first_subword(vocab, y)?,
                tokens,
                bos: bos.is_some(),
                x: x.clone(),
                y: y.clone(),
                x_span,
                template_index: ti,
                pair_index: pi,
                shots: opts.shots,
                demonstrations: demos,
            });
        }
    }
    Ok(TaskDataset {
        task: spec.name.clone(),
        options: opts,
        prompts,
    })
}

/// The interventions used for `prompt`: the whole dataset, the prompt itself
/// included.
pub fn intervention_set<'a>(
    dataset: &'a TaskDataset,
    _prompt: &PromptInstance,
) -> &'a [PromptInstance] {
    &dataset.prompts
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::OnceLock;

    fn vocab() -> &'static BpeVocab {
        static V: OnceLock<BpeVocab> = OnceLock::new();
        V.get_or_init(BpeVocab::gpt2)
    }

    fn spec() -> TaskSpec {
        TaskSpec {
            name: "toy".into(),
            templates: vec![
                "The capital of {X} is".into(),
                "Surely {X}'s capital is".into(),
            ],
            pairs: vec![
                ("France".into(), "Paris".into()),
                ("Japan".into(), "Tokyo".into()),
                ("USA".into(), "Washington. D.C.".into()),
            ],
            shot_prefix_template: "The capital of {X} is {Y}, ".into(),
        }
    }

    #[test]
    fn zero_shot_instances() {
        let ds = build_dataset(&spec(), vocab(), DatasetOptions::default()).unwrap();
        assert_eq!(ds.len(), 6);
        let p = &ds.prompts[0];
        assert_eq!(p.text, "The capital of France is");
        assert_eq!(p.tokens, vec![50256, 464, 3139, 286, 4881, 318]);
        assert_eq!(p.x_position(), 4);
        assert_eq!(p.y_token, 6342);
        for p in &ds.prompts {
            assert_eq!(vocab().decode(p.text_tokens()).unwrap(), p.text);
            assert!(p.x_span.surface.contains(&p.x));
            assert!(format!(" {}", p.y).starts_with(&vocab().decode(&[p.y_token]).unwrap()));
        }
        let usa = &ds.prompts[2];
        assert_eq!(vocab().decode(&[usa.y_token]).unwrap(), " Washington");
    }

    #[test]
    fn few_shot_is_seeded_and_excludes_query() {
        let opts = DatasetOptions {
            shots: 2,
            seed: 7,
            prepend_bos: false,
        };
        let a = build_dataset(&spec(), vocab(), opts).unwrap();
        let b = build_dataset(&spec(), vocab(), opts).unwrap();
        assert_eq!(a, b);
        for p in &a.prompts {
            assert_eq!(p.demonstrations.len(), 2);
            assert!(p.demonstrations.iter().all(|(x, _)| *x != p.x));
            assert_ne!(p.demonstrations[0], p.demonstrations[1]);
            // the query X sits after the demonstrations
            let prefix_len = vocab().encode(&p.text).len() - p.x_span.end;
            assert!(prefix_len <= 3);
        }
        assert!(a.prompts[0].text.starts_with("The capital of "));
    }

    #[test]
    fn rejects_bad_specs() {
        let mut s = spec();
        s.templates.push("no slot here".into());
        assert!(matches!(
            build_dataset(&s, vocab(), DatasetOptions::default()),
            Err(Error::Task(_))
        ));
        let mut s = spec();
        s.pairs.push(("France".into(), "Lyon".into()));
        assert!(matches!(s.validate(), Err(Error::Task(_))));
        let opts = DatasetOptions {
            shots: 3,
            ..Default::default()
        };
        assert!(build_dataset(&spec(), vocab(), opts).is_err());
    }

    #[test]
    fn intervention_set_is_whole_dataset() {
        let ds = build_dataset(&spec(), vocab(), DatasetOptions::default()).unwrap();
        assert_eq!(intervention_set(&ds, &ds.prompts[3]).len(), ds.len());
    }
}
