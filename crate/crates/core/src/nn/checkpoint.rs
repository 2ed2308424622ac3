//! Parser checkpointing: a versioned JSON container holding the full model
//! state. All numbers are finite 64-bit floats, which the JSON writer
//! prints with round-trip precision, so save → load reproduces every
//! tensor and optimizer slot bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Parser, ParserConfig, WordVocab};
use super::params::{AdamState, ParamStore};
use crate::error::{Error, Result};
use crate::grammar::ActionRegistry;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    config: ParserConfig,
    vocab: WordVocab,
    action_keys: Vec<String>,
    dar_tasks: usize,
    params: ParamStore,
    opt: AdamState,
}

impl Parser {
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let file = CheckpointFile {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            action_keys: self.action_keys.clone(),
            dar_tasks: self.dar_tasks,
            params: self.params.clone(),
            opt: self.opt.clone(),
        };
        let json = serde_json::to_string(&file)?;
        fs::write(path, json)?;
        Ok(())
    }

    /// Loads a checkpoint, returning the parser together with the action
    /// registry reconstructed in the exact id order it was saved with.
    pub fn load_checkpoint(path: &Path) -> Result<(Parser, ActionRegistry)> {
        let json = fs::read_to_string(path)?;
        let file: CheckpointFile = serde_json::from_str(&json)?;
        if file.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint {
                msg: format!(
                    "unsupported checkpoint version {} (expected {})",
                    file.version, CHECKPOINT_VERSION
                ),
            });
        }
        let mut registry = ActionRegistry::new();
        for key in &file.action_keys {
            registry.intern(key);
        }
        let parser = Parser::from_parts(
            file.config,
            file.vocab,
            file.action_keys,
            file.dar_tasks,
            file.params,
            file.opt,
        )?;
        Ok((parser, registry))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::Grammar;
    use crate::nn::params::{GradStore, Partition, TrainMask};

    fn toy_parser() -> (Parser, ActionRegistry) {
        let mut registry = ActionRegistry::new();
        let _ = registry.bind(
            Grammar::parse(
                "toy",
                "start Q\nslot ent : a b\nQ -> ( f E )\nQ -> ( g E )\nE -> slot(ent)\n",
            )
            .unwrap(),
        );
        let vocab = WordVocab::build(["one", "two", "three"].into_iter());
        let config = ParserConfig {
            word_emb_dim: 6,
            hidden_dim: 8,
            action_emb_dim: 4,
            dar_enabled: true,
            max_decode_steps: 30,
            rng_seed: 99,
        };
        let partitions = vec![Partition::Global; registry.len()];
        let parser = Parser::new(config, vocab, &registry, &partitions, 3).unwrap();
        (parser, registry)
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let (mut parser, registry) = toy_parser();
        // Dirty the optimizer state so the round trip covers it too.
        let mut grads = GradStore::zeros_like(&parser.params);
        for slot in &mut grads.slots {
            for (i, g) in slot.iter_mut().enumerate() {
                *g = (i as f64 + 1.0) * 0.001;
            }
        }
        grads.apply_mask(&TrainMask::all(&parser.params));
        let mut opt = std::mem::replace(&mut parser.opt, AdamState::zeros_like(&parser.params));
        super::super::params::adam_step(&mut parser.params, &grads, &mut opt, 0.01);
        parser.opt = opt;

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        parser.save_checkpoint(&path).unwrap();
        let (loaded, reg2) = Parser::load_checkpoint(&path).unwrap();

        assert_eq!(registry.keys(), reg2.keys());
        assert_eq!(parser.action_keys, loaded.action_keys);
        assert_eq!(parser.params.len(), loaded.params.len());
        for (a, b) in parser.params.tensors().iter().zip(loaded.params.tensors()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.partition, b.partition);
            assert!(
                a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()),
                "tensor '{}' changed across the round trip",
                a.name
            );
        }
        for (a, b) in parser.opt.m.iter().zip(&loaded.opt.m) {
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        for (a, b) in parser.opt.v.iter().zip(&loaded.opt.v) {
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(parser.opt.t, loaded.opt.t);
    }

    #[test]
    fn loaded_parser_behaves_identically() {
        let (parser, _) = toy_parser();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        parser.save_checkpoint(&path).unwrap();
        let (loaded, mut registry) = Parser::load_checkpoint(&path).unwrap();
        let bound = registry.bind(
            Grammar::parse(
                "toy",
                "start Q\nslot ent : a b\nQ -> ( f E )\nQ -> ( g E )\nE -> slot(ent)\n",
            )
            .unwrap(),
        );
        let a = parser.parse(&[1, 2], &bound, 0, 1).unwrap();
        let b = loaded.parse(&[1, 2], &bound, 0, 1).unwrap();
        assert_eq!(a.lf.canonical_text(), b.lf.canonical_text());
        assert_eq!(a.logprob.to_bits(), b.logprob.to_bits());
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let (parser, _) = toy_parser();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        parser.save_checkpoint(&path).unwrap();
        let text = std::fs::read_to_string(&path)
            .unwrap()
            .replacen("\"version\":1", "\"version\":9", 1);
        std::fs::write(&path, text).unwrap();
        let err = Parser::load_checkpoint(&path).unwrap_err();
        assert!(matches!(err, Error::Checkpoint { .. }));
    }
}
