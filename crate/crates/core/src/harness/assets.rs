use std::path::{Path, PathBuf};

use super::HarnessError;

pub const DATA_DIR_ENV: &str = "SPECLEAK_DATA_DIR";

const FILES: [&str; 8] = [
    "corpus.txt",
    "store.txt",
    "wordlist.txt",
    "prompts_general.txt",
    "prompts_similar.txt",
    "prompts_rephrased.txt",
    "probe_corpus.txt",
    "probe_phrases.tsv",
];

const BUNDLED: [&str; 8] = [
    include_str!("../../data/corpus.txt"),
    include_str!("../../data/store.txt"),
    include_str!("../../data/wordlist.txt"),
    include_str!("../../data/prompts_general.txt"),
    include_str!("../../data/prompts_similar.txt"),
    include_str!("../../data/prompts_rephrased.txt"),
    include_str!("../../data/probe_corpus.txt"),
    include_str!("../../data/probe_phrases.tsv"),
];

/// One phrase of the cache-capacity probe corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbePhrase {
    pub len: usize,
    pub family: usize,
    pub text: String,
}

/// The data files experiments run on. Files missing from a data directory
/// fall back to the bundled copy.
#[derive(Debug, Clone)]
pub struct Assets {
    texts: Vec<String>,
    pub source: Option<PathBuf>,
}

impl Assets {
    pub fn bundled() -> Self {
        Self {
            texts: BUNDLED.iter().map(|s| s.to_string()).collect(),
            source: None,
        }
    }

    pub fn from_dir(dir: &Path) -> Result<Self, HarnessError> {
        if !dir.is_dir() {
            return Err(HarnessError::Config(format!(
                "data directory {} does not exist",
                dir.display()
            )));
        }
        let texts = FILES
            .iter()
            .zip(BUNDLED)
            .map(|(name, fallback)| {
                let path = dir.join(name);
                if path.exists() {
                    std::fs::read_to_string(&path).map_err(|e| HarnessError::io(&path, e))
                } else {
                    Ok(fallback.to_string())
                }
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            texts,
            source: Some(dir.to_owned()),
        })
    }

    /// Explicit directory, else the environment variable, else bundled.
    pub fn resolve(dir: Option<&Path>) -> Result<Self, HarnessError> {
        match dir {
            Some(d) => Self::from_dir(d),
            None => match std::env::var_os(DATA_DIR_ENV) {
                Some(d) if !d.is_empty() => Self::from_dir(Path::new(&d)),
                _ => Ok(Self::bundled()),
            },
        }
    }

    pub fn corpus(&self) -> &str {
        &self.texts[0]
    }

    pub fn store(&self) -> Vec<&str> {
        lines(&self.texts[1])
    }

    pub fn wordlist(&self) -> &str {
        &self.texts[2]
    }

    pub fn prompts_general(&self) -> Vec<&str> {
        lines(&self.texts[3])
    }

    pub fn prompts_similar(&self) -> Vec<&str> {
        lines(&self.texts[4])
    }

    pub fn prompts_rephrased(&self) -> Vec<&str> {
        lines(&self.texts[5])
    }

    pub fn probe_corpus(&self) -> &str {
        &self.texts[6]
    }

    pub fn probe_phrases(&self) -> Result<Vec<ProbePhrase>, HarnessError> {
        parse_probe_phrases(&self.texts[7])
    }
}

pub fn lines(text: &str) -> Vec<&str> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect()
}

/// Parses `len \t family \t phrase` rows.
pub fn parse_probe_phrases(text: &str) -> Result<Vec<ProbePhrase>, HarnessError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let bad =
                |msg: &str| HarnessError::Data(format!("probe phrases line {}: {msg}", i + 1));
            let mut cols = l.split('\t');
            let len = cols
                .next()
                .and_then(|c| c.parse().ok())
                .ok_or_else(|| bad("bad length"))?;
            let family = cols
                .next()
                .and_then(|c| c.parse().ok())
                .ok_or_else(|| bad("bad family size"))?;
            let text = cols
                .next()
                .ok_or_else(|| bad("missing phrase"))?
                .trim()
                .to_owned();
            if text.split_whitespace().count() != len {
                return Err(bad("phrase length disagrees with its length column"));
            }
            Ok(ProbePhrase { len, family, text })
        })
        .collect()
}
