//! A loaded lexicon, scorer and decoder configuration, shared by the
//! command line and the HTTP service.

use std::fs::File;
use std::io::BufReader;
use std::path::Path;
use std::sync::Arc;

use crate::decoder::{decode, Candidate, DecodeConfig};
use crate::error::{Error, Result};
use crate::keymap::{KeyLayout, KeySequence};
use crate::lexicon::{Lexicon, BUNDLED_CORPUS};
use crate::scorer::{train_ngram, Extension, NGramConfig, NGramScorer};

#[derive(Debug, Clone)]
pub struct Engine {
    lexicon: Arc<Lexicon>,
    scorer: Arc<NGramScorer>,
    config: DecodeConfig,
}

impl Engine {
    pub fn new(lexicon: Arc<Lexicon>, scorer: NGramScorer, config: DecodeConfig) -> Result<Self> {
        config.validate()?;
        Ok(Engine {
            lexicon,
            scorer: Arc::new(scorer),
            config,
        })
    }

    /// Bundled lexicon with a scorer trained on the bundled corpus.
    pub fn bundled() -> Result<Self> {
        Self::load(None, None)
    }

    /// Loads the lexicon from `lexicon_dir` (bundled when absent) and the
    /// scorer from a saved model file (trained on the bundled corpus when
    /// absent).
    pub fn load(model: Option<&Path>, lexicon_dir: Option<&Path>) -> Result<Self> {
        let lexicon = match lexicon_dir {
            Some(dir) => Arc::new(Lexicon::from_dir(dir)?),
            None => Lexicon::bundled_shared().clone(),
        };
        let scorer = match model {
            Some(path) => {
                let file = File::open(path)
                    .map_err(|e| Error::NotFound { kind: "model file", what: format!("{}: {e}", path.display()) })?;
                NGramScorer::load(BufReader::new(file), lexicon.clone())?
            }
            None => train_ngram(BUNDLED_CORPUS, lexicon.clone(), NGramConfig::default())?,
        };
        Self::new(lexicon, scorer, DecodeConfig::default())
    }

    pub fn with_config(mut self, config: DecodeConfig) -> Result<Self> {
        config.validate()?;
        self.config = config;
        Ok(self)
    }

    pub fn lexicon(&self) -> &Arc<Lexicon> {
        &self.lexicon
    }

    pub fn scorer(&self) -> &NGramScorer {
        &self.scorer
    }

    pub fn config(&self) -> &DecodeConfig {
        &self.config
    }

    /// Decodes `keys` typed on `layout`, returning at most `top_k`
    /// candidates. Beams are widened to at least `top_k`.
    pub fn decode(&self, keys: &str, layout: KeyLayout, top_k: usize, ext: &Extension) -> Result<Vec<Candidate>> {
        if keys.is_empty() {
            return Err(Error::Validation("empty key sequence".into()));
        }
        let x = KeySequence::parse(keys, layout)?;
        let cfg = DecodeConfig {
            top_k,
            beam_width_pyseg: self.config.beam_width_pyseg.max(top_k),
            beam_width_char: self.config.beam_width_char.max(top_k),
            ..self.config.clone()
        };
        decode(&x, self.scorer.as_ref(), &self.lexicon, ext, &cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_engine_decodes() {
        let e = Engine::bundled().unwrap();
        let out = e.decode("woaini", KeyLayout::TwentySixKey, 3, &Extension::default()).unwrap();
        assert_eq!(out[0].chars, "我爱你");
        assert!(out.len() <= 3);
        assert!(matches!(
            e.decode("", KeyLayout::TwentySixKey, 3, &Extension::default()),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            e.decode("w1", KeyLayout::TwentySixKey, 3, &Extension::default()),
            Err(Error::InvalidKey { .. })
        ));
    }

    #[test]
    fn missing_model_file_is_reported() {
        let err = Engine::load(Some(Path::new("/nonexistent/model.tsv")), None).unwrap_err();
        assert!(matches!(err, Error::NotFound { .. }));
    }
}
