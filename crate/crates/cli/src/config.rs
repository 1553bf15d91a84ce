use std::path::{Path, PathBuf};

use capforge_core::decoding::NucleusParams;
use capforge_core::metrics::MetricConfig;
use capforge_core::rerank::{RerankMode, RerankWeights};
use capforge_core::rvq::CodecConfig;
use capforge_core::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub n_events: usize,
    pub dim: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            n_events: 12,
            dim: 16,
            noise_sigma: 0.3,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecSection {
    pub preset: String,
    /// Overrides of the preset's depth and codebook size.
    pub n_q: Option<usize>,
    pub codebook_size: Option<usize>,
    /// Cap on frames sampled for codebook fitting; 0 uses every frame.
    pub max_fit_frames: usize,
}

impl Default for CodecSection {
    fn default() -> Self {
        CodecSection {
            preset: "desk".into(),
            n_q: None,
            codebook_size: None,
            max_fit_frames: 40_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Raw clip counts before filtering.
    pub pretrain_size: usize,
    pub finetune_size: usize,
    /// Pretraining clips that copy a finetuning clip; listed in the blocklist.
    pub overlap_size: usize,
    pub n_refs: usize,
    pub split_fractions: [f64; 3],
    pub min_duration_s: f64,
    pub max_duration_s: f64,
    pub blocklist: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            pretrain_size: 1600,
            finetune_size: 1100,
            overlap_size: 40,
            n_refs: 5,
            split_fractions: [0.7, 0.1, 0.2],
            min_duration_s: capforge_core::dataio::DEFAULT_MIN_DURATION_S,
            max_duration_s: capforge_core::dataio::DEFAULT_MAX_DURATION_S,
            blocklist: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn: usize,
    pub max_positions: usize,
    pub mcm_ratio: f64,
    pub mcm_weight: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            hidden: 64,
            heads: 2,
            enc_layers: 2,
            dec_layers: 2,
            ffn: 128,
            max_positions: 128,
            mcm_ratio: 0.15,
            mcm_weight: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub batch_size: usize,
    pub pretrain_steps: usize,
    pub finetune_steps: usize,
    pub clip_norm: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            lr: 3e-4,
            batch_size: 16,
            pretrain_steps: 600,
            finetune_steps: 600,
            clip_norm: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub beam_width: usize,
    pub length_penalty: f64,
    pub max_len: usize,
    pub top_p: f64,
    pub temperature: f64,
    pub n_candidates: usize,
    /// Cap on evaluated test items; 0 keeps all.
    pub max_items: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        let n = NucleusParams::default();
        DecodeConfig {
            beam_width: 4,
            length_penalty: 0.0,
            max_len: 32,
            top_p: n.top_p,
            temperature: n.temperature,
            n_candidates: n.n_candidates,
            max_items: 0,
        }
    }
}

impl DecodeConfig {
    pub fn nucleus(&self) -> NucleusParams {
        NucleusParams {
            top_p: self.top_p,
            temperature: self.temperature,
            n_candidates: self.n_candidates,
            max_len: self.max_len,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RerankSection {
    pub modes: Vec<RerankMode>,
    pub w_enc: f64,
    pub w_dec: f64,
}

impl Default for RerankSection {
    fn default() -> Self {
        let w = RerankWeights::default();
        RerankSection {
            modes: vec![
                RerankMode::BeamPassthrough,
                RerankMode::Encoder,
                RerankMode::Decoder,
                RerankMode::Hybrid,
            ],
            w_enc: w.w_enc,
            w_dec: w.w_dec,
        }
    }
}

impl RerankSection {
    pub fn weights(&self) -> RerankWeights {
        RerankWeights {
            w_enc: self.w_enc,
            w_dec: self.w_dec,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

/// Every knob of an experiment. Missing keys take their defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub codec: CodecSection,
    pub dataset: DatasetConfig,
    pub model: ModelSection,
    pub train: TrainSection,
    pub decode: DecodeConfig,
    pub rerank: RerankSection,
    pub metrics: MetricConfig,
    pub paths: PathsConfig,
}

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| cfg_err(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| cfg_err(format!("invalid config {}: {e}", path.display())))
    }

    /// Applies `key.path=value` overrides. Values are parsed as JSON when
    /// possible and taken as strings otherwise; unknown keys are rejected.
    pub fn with_overrides(self, sets: &[String]) -> Result<Self> {
        let mut root = serde_json::to_value(&self)?;
        for s in sets {
            let (key, raw) = s
                .split_once('=')
                .ok_or_else(|| cfg_err(format!("override '{s}' is not key=value")))?;
            let mut slot = &mut root;
            for part in key.split('.') {
                slot = slot
                    .as_object_mut()
                    .and_then(|o| o.get_mut(part))
                    .ok_or_else(|| cfg_err(format!("unknown config key '{key}'")))?;
            }
            *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        }
        serde_json::from_value(root).map_err(|e| cfg_err(format!("invalid override: {e}")))
    }

    pub fn codec_config(&self) -> Result<CodecConfig> {
        let mut c = CodecConfig::preset(&self.codec.preset, self.world.dim)?;
        if let Some(n) = self.codec.n_q {
            c.n_q = n;
        }
        if let Some(k) = self.codec.codebook_size {
            c.codebook_size = k;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.codec_config()?;
        self.rerank.weights().validate()?;
        self.decode.nucleus().validate()?;
        self.metrics.validate()?;
        if self.decode.beam_width == 0 || self.decode.max_len == 0 {
            return Err(cfg_err("beam width and max_len must be positive"));
        }
        if self.decode.max_len >= self.model.max_positions {
            return Err(cfg_err("decode.max_len must be below model.max_positions"));
        }
        let f = self.dataset.split_fractions;
        if f.iter().any(|x| *x < 0.0) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(cfg_err("split fractions must be non-negative and sum to 1"));
        }
        if self.dataset.n_refs == 0 {
            return Err(cfg_err("dataset.n_refs must be positive"));
        }
        if self.world.n_events == 0 || self.world.n_events > capforge_core::synthworld::STANDARD_EVENTS.len() {
            return Err(cfg_err("world.n_events out of range"));
        }
        if self.rerank.modes.is_empty() {
            return Err(cfg_err("rerank.modes is empty"));
        }
        Ok(())
    }

    /// Short hex digest of every setting that can change a result. Output
    /// location is left out so identical runs in different directories
    /// agree.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths = PathsConfig::default();
        c.dataset.blocklist = None;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(&Sha256::digest(&bytes)[..8])
    }
}
