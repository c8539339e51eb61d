//! Tokenizer and encoder sharing one parameter set; pre-training decoders
//! and fine-tuning heads register into the same set.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderConfig, LatentSequence};
use crate::error::{Error, Result};
use crate::nn::{Mat, ParamSet, Tape, Var};
use crate::tokenization::{TokenIndex, Tokenizer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub index: TokenIndex,
    pub patch_len: usize,
    pub encoder: EncoderConfig,
}

impl ModelConfig {
    pub fn dim(&self) -> usize {
        self.encoder.model_dim
    }

    /// Reject token matrices whose grid differs from the one the model was
    /// built for.
    pub fn check_tokens(&self, tokens: &Mat) -> Result<()> {
        if tokens.dim() != (self.index.len(), self.patch_len) {
            return Err(Error::Shape(format!(
                "token matrix is {:?}, model expects ({}, {})",
                tokens.dim(),
                self.index.len(),
                self.patch_len
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PimtModel {
    pub cfg: ModelConfig,
    pub params: ParamSet,
    pub tokenizer: Tokenizer,
    pub encoder: Encoder,
}

impl PimtModel {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.encoder.validate()?;
        if cfg.patch_len == 0 || cfg.index.is_empty() {
            return Err(Error::Config("token grid and patch length must be nonempty".into()));
        }
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.encoder.seed);
        rng.set_stream(1);
        let tokenizer = Tokenizer::register(&mut params, cfg.index, cfg.patch_len, cfg.dim(), &mut rng);
        let encoder = Encoder::register(&mut params, &cfg.encoder)?;
        Ok(Self {
            cfg,
            params,
            tokenizer,
            encoder,
        })
    }

    /// Token embeddings followed by the encoder; returns `(embeddings, latents)`.
    pub fn forward(&self, tape: &mut Tape, tokens: Var, mask: Option<&[bool]>) -> (Var, Var) {
        let e = self.tokenizer.forward(tape, tokens, mask);
        let z = self.encoder.forward(tape, e);
        (e, z)
    }

    pub fn encode(&self, tokens: &Mat) -> Result<LatentSequence> {
        self.cfg.check_tokens(tokens)?;
        let mut tape = Tape::new(&self.params);
        let x = tape.constant(tokens.clone());
        let (_, z) = self.forward(&mut tape, x, None);
        Ok(LatentSequence {
            latents: tape.value(z).clone(),
            index: self.cfg.index,
        })
    }
}
