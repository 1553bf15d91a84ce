//! Pipeline stages. Each reads the previous stage's artifacts under the
//! output directory and writes its own, stamped with the config hash.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use capforge_core::dataio::{self, ManifestEntry, Split};
use capforge_core::decoding::{beam_search, nucleus_sample, Candidate, CandidateRecord, Source};
use capforge_core::metrics::{evaluate, EvalCorpus, EvalItem, MetricReport, OracleEmbedder, SpiceProxy};
use capforge_core::model::{
    loss_trace_csv, mcm_accuracy, train, CaptionVocab, Checkpoint, ClipDecoder, Model, ModelConfig, StageData,
    TrainConfig, TrainExample, EOS,
};
use capforge_core::rerank::{decoder_score, encoder_score, rank, RankedRecord, RerankMode, RuleDetector, ScoredCandidate};
use capforge_core::rvq::{fit_rvq, CodecGrid, FeatureSeq, RvqCodec};
use capforge_core::synthworld::{
    oracle_audio_embedding, oracle_text_embedding, render_captions, render_frames, sample_scene, EventVocab, Scene,
    SceneSpec,
};
use capforge_core::{Error, Result};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

pub const STAGES: [&str; 7] = ["synth-data", "rvq", "train", "generate", "rerank", "evaluate", "report"];

/// A row or document stamped with the hash of the config that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stamped<T> {
    pub config_hash: String,
    #[serde(flatten)]
    pub inner: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub id: String,
    pub set: String,
    pub scene: Scene,
    pub captions: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub id: String,
    pub frames: FeatureSeq,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridLine {
    pub id: String,
    #[serde(flatten)]
    pub grid: CodecGrid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrepCounts {
    pub raw: usize,
    pub after_duration: usize,
    pub after_dedup: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataLog {
    pub pretrain: PrepCounts,
    pub finetune: PrepCounts,
    pub blocklisted: usize,
    pub split_counts: BTreeMap<String, usize>,
    pub min_duration_s: f64,
    pub max_duration_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecFile {
    pub preset: String,
    pub fit_frames: usize,
    /// Reconstruction MSE on the fitting frames using the first `n` levels.
    pub mse_by_depth: Vec<(usize, f64)>,
    pub codec: RvqCodec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageBoundary {
    pub name: String,
    pub examples: usize,
    pub first_step: usize,
    pub last_step: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McmAccuracy {
    pub split: String,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
    pub chance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub stages: Vec<StageBoundary>,
    pub steps: usize,
    pub num_params: usize,
    pub final_caption_ce: f64,
    pub final_mcm_ce: f64,
    pub mcm_heldout: McmAccuracy,
}

/// Resolved configuration plus output location.
pub struct Ctx {
    pub cfg: ExperimentConfig,
    pub hash: String,
    pub out: PathBuf,
}

impl Ctx {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let hash = cfg.hash();
        let out = cfg.paths.out_dir.clone();
        Ok(Ctx { cfg, hash, out })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn stamp<T>(&self, inner: T) -> Stamped<T> {
        Stamped {
            config_hash: self.hash.clone(),
            inner,
        }
    }

    fn vocab(&self) -> Result<EventVocab> {
        EventVocab::standard(self.cfg.world.n_events, self.cfg.world.dim, self.cfg.world.seed)
    }

    fn seed(&self, salt: u64) -> u64 {
        self.cfg.seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15)
    }
}

fn ensure_dir(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    Ok(())
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    ensure_dir(path)?;
    let mut w = BufWriter::new(File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_dir(path)?;
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn missing(stage: &str, path: &Path) -> Error {
    Error::Input(format!(
        "{stage}: missing input {} (run the earlier pipeline stages first)",
        path.display()
    ))
}

pub fn read_jsonl<T: DeserializeOwned>(stage: &str, path: &Path) -> Result<Vec<T>> {
    let f = File::open(path).map_err(|_| missing(stage, path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: format!("{}: {e}", path.display()),
        })?);
    }
    Ok(out)
}

pub fn read_json<T: DeserializeOwned>(stage: &str, path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|_| missing(stage, path))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn check_hash(ctx: &Ctx, stage: &str, path: &Path, found: &str) -> Result<()> {
    if found != ctx.hash {
        return Err(Error::Data(format!(
            "{stage}: {} was produced by config {found}, current config is {}",
            path.display(),
            ctx.hash
        )));
    }
    Ok(())
}

fn read_stamped<T: DeserializeOwned>(ctx: &Ctx, stage: &str, rel: &str) -> Result<Vec<T>> {
    let path = ctx.path(rel);
    let rows: Vec<Stamped<T>> = read_jsonl(stage, &path)?;
    let mut out = Vec::with_capacity(rows.len());
    for r in rows {
        check_hash(ctx, stage, &path, &r.config_hash)?;
        out.push(r.inner);
    }
    Ok(out)
}

fn read_stamped_json<T: DeserializeOwned>(ctx: &Ctx, stage: &str, rel: &str) -> Result<T> {
    let path = ctx.path(rel);
    let doc: Stamped<T> = read_json(stage, &path)?;
    check_hash(ctx, stage, &path, &doc.config_hash)?;
    Ok(doc.inner)
}

const PRETRAIN: &str = "data/pretrain.jsonl";
const FINETUNE: &str = "data/finetune.jsonl";
const SCENES: &str = "data/scenes.jsonl";
const FRAMES: &str = "data/frames.jsonl";
const GRIDS: &str = "codes/grids.jsonl";
const CODEC: &str = "codes/codec.json";
const CHECKPOINT: &str = "model/checkpoint.json";
const CANDIDATES: &str = "generate/candidates.jsonl";

pub fn ranked_path(mode: RerankMode) -> String {
    format!("rerank/ranked_{}.jsonl", system_name(mode))
}

pub fn metrics_path(mode: RerankMode) -> String {
    format!("evaluate/metrics_{}.json", system_name(mode))
}

/// Name of the system a rerank mode produces in the comparison table.
pub fn system_name(mode: RerankMode) -> &'static str {
    match mode {
        RerankMode::BeamPassthrough => "beam",
        RerankMode::Encoder => "encoder",
        RerankMode::Decoder => "decoder",
        RerankMode::Hybrid => "hybrid",
    }
}

fn manifest_entry(id: &str, scene: &Scene, captions: Vec<String>) -> ManifestEntry {
    ManifestEntry {
        id: id.to_string(),
        duration_s: scene.duration_s,
        codec_path: GRIDS.to_string(),
        captions,
        split: Split::Train,
    }
}

fn save_stamped_manifest(ctx: &Ctx, rel: &str, entries: &[ManifestEntry]) -> Result<()> {
    let rows: Vec<_> = entries.iter().map(|e| ctx.stamp(e.clone())).collect();
    write_jsonl(&ctx.path(rel), &rows)
}

fn load_stamped_manifest(ctx: &Ctx, stage: &str, rel: &str) -> Result<Vec<ManifestEntry>> {
    let path = ctx.path(rel);
    let f = File::open(&path).map_err(|_| missing(stage, &path))?;
    let entries = dataio::parse_manifest(BufReader::new(f))?;
    let stamps: Vec<Stamped<serde_json::Value>> = read_jsonl(stage, &path)?;
    for s in &stamps {
        check_hash(ctx, stage, &path, &s.config_hash)?;
    }
    Ok(entries)
}

/// Draws both datasets, renders frames and captions, and applies the
/// duration filter, blocklist dedup and splits.
pub fn cmd_synth_data(ctx: &Ctx) -> Result<DataLog> {
    let c = &ctx.cfg;
    let d = &c.dataset;
    if d.pretrain_size == 0 || d.finetune_size == 0 {
        return Err(Error::Config("dataset sizes must be positive".into()));
    }
    if d.overlap_size > d.finetune_size {
        return Err(Error::Config("dataset.overlap_size exceeds finetune_size".into()));
    }
    let vocab = ctx.vocab()?;
    let codec = c.codec_config()?;
    let spec = SceneSpec::new(codec.frame_rate_hz);

    let mut scenes = Vec::new();
    let mut frames = Vec::new();
    let mut draw = |prefix: &str, set: &str, n: usize, stream: u64| -> Vec<ManifestEntry> {
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        rng.set_stream(stream);
        (0..n)
            .map(|i| {
                let id = format!("{prefix}-{i:05}");
                let scene = sample_scene(&vocab, &spec, &mut rng);
                let captions = render_captions(&scene, &vocab, d.n_refs, &mut rng);
                let seq = render_frames(&scene, &vocab, codec.frame_rate_hz, c.world.noise_sigma, &mut rng);
                let entry = manifest_entry(&id, &scene, captions.clone());
                scenes.push(SceneRecord {
                    id: id.clone(),
                    set: set.into(),
                    scene,
                    captions,
                });
                frames.push(FrameRecord { id, frames: seq });
                entry
            })
            .collect()
    };
    let finetune_raw = draw("ft", "finetune", d.finetune_size, 1);
    let mut pretrain_raw = draw("pt", "pretrain", d.pretrain_size, 2);

    // copies of finetune clips inside the pretraining pool
    let mut blocklist = Vec::new();
    let n_scenes = scenes.len();
    for i in 0..d.overlap_size {
        let src = scenes[i].clone();
        let id = format!("pt-dup-{i:05}");
        pretrain_raw.push(manifest_entry(&id, &src.scene, src.captions.clone()));
        scenes.push(SceneRecord {
            id: id.clone(),
            set: "pretrain".into(),
            ..src
        });
        frames.push(FrameRecord {
            id: id.clone(),
            frames: frames[i].frames.clone(),
        });
        blocklist.push(id);
    }
    debug_assert_eq!(scenes.len(), n_scenes + d.overlap_size);

    let block_ids: std::collections::HashSet<String> = match &d.blocklist {
        Some(p) => dataio::load_blocklist(p)?,
        None => blocklist.iter().cloned().collect(),
    };

    let pre_dur = dataio::filter_duration(&pretrain_raw, d.min_duration_s, d.max_duration_s)?;
    let pretrain = dataio::dedup_against(&pre_dur, &block_ids);
    let fine_dur = dataio::filter_duration(&finetune_raw, d.min_duration_s, d.max_duration_s)?;
    let fine_dedup = dataio::dedup_against(&fine_dur, &block_ids);
    if pretrain.is_empty() || fine_dedup.is_empty() {
        return Err(Error::Data("no clips left after duration filtering and dedup".into()));
    }
    let finetune = dataio::make_splits(&fine_dedup, d.split_fractions, ctx.seed(3))?;

    let mut split_counts = BTreeMap::new();
    for e in &finetune {
        *split_counts.entry(e.split.to_string()).or_insert(0) += 1;
    }
    let log = DataLog {
        pretrain: PrepCounts {
            raw: pretrain_raw.len(),
            after_duration: pre_dur.len(),
            after_dedup: pretrain.len(),
        },
        finetune: PrepCounts {
            raw: finetune_raw.len(),
            after_duration: fine_dur.len(),
            after_dedup: fine_dedup.len(),
        },
        blocklisted: block_ids.len(),
        split_counts,
        min_duration_s: d.min_duration_s,
        max_duration_s: d.max_duration_s,
    };

    save_stamped_manifest(ctx, "data/pretrain_raw.jsonl", &pretrain_raw)?;
    save_stamped_manifest(ctx, "data/finetune_raw.jsonl", &finetune_raw)?;
    save_stamped_manifest(ctx, PRETRAIN, &pretrain)?;
    save_stamped_manifest(ctx, FINETUNE, &finetune)?;
    let scene_rows: Vec<_> = scenes.into_iter().map(|s| ctx.stamp(s)).collect();
    write_jsonl(&ctx.path(SCENES), &scene_rows)?;
    let frame_rows: Vec<_> = frames.into_iter().map(|f| ctx.stamp(f)).collect();
    write_jsonl(&ctx.path(FRAMES), &frame_rows)?;
    let mut bl = format!("# config_hash {}\n", ctx.hash);
    for id in &blocklist {
        bl.push_str(id);
        bl.push('\n');
    }
    fs::write(ctx.path("data/blocklist.txt"), bl)?;
    write_json(&ctx.path("data/data_log.json"), &ctx.stamp(log.clone()))?;
    log::info!(
        "synth-data: pretrain {} → {}, finetune {} → {}",
        log.pretrain.raw,
        log.pretrain.after_dedup,
        log.finetune.raw,
        log.finetune.after_dedup
    );
    Ok(log)
}

fn used_ids(pretrain: &[ManifestEntry], finetune: &[ManifestEntry]) -> Vec<String> {
    pretrain.iter().chain(finetune).map(|e| e.id.clone()).collect()
}

/// Fits the codec on training clips and encodes every kept clip.
pub fn cmd_rvq(ctx: &Ctx) -> Result<CodecFile> {
    const STAGE: &str = "rvq";
    let pretrain = load_stamped_manifest(ctx, STAGE, PRETRAIN)?;
    let finetune = load_stamped_manifest(ctx, STAGE, FINETUNE)?;
    let frames: Vec<FrameRecord> = read_stamped(ctx, STAGE, FRAMES)?;
    let by_id: HashMap<&str, &FeatureSeq> = frames.iter().map(|f| (f.id.as_str(), &f.frames)).collect();
    let codec_cfg = ctx.cfg.codec_config()?;

    let fit_ids = pretrain
        .iter()
        .chain(finetune.iter().filter(|e| e.split == Split::Train))
        .map(|e| e.id.as_str());
    let mut rows: Vec<f64> = Vec::new();
    for id in fit_ids {
        let seq = by_id
            .get(id)
            .ok_or_else(|| Error::Data(format!("{STAGE}: no frames for clip '{id}'")))?;
        rows.extend_from_slice(&seq.frames);
    }
    let dim = codec_cfg.dim;
    let n_rows = rows.len() / dim;
    let cap = ctx.cfg.codec.max_fit_frames;
    if cap > 0 && n_rows > cap {
        let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed(4));
        let mut pick = sample(&mut rng, n_rows, cap).into_vec();
        pick.sort_unstable();
        rows = pick.iter().flat_map(|&r| rows[r * dim..(r + 1) * dim].to_vec()).collect();
    }
    let fit = FeatureSeq::new(dim, codec_cfg.frame_rate_hz, rows)?;
    let corpus = [fit];
    let codec = fit_rvq(&corpus, &codec_cfg, ctx.seed(5))?;
    let mut mse_by_depth = Vec::new();
    for n in 1..=codec.n_q() {
        mse_by_depth.push((n, codec.truncated(n)?.reconstruction_mse(&corpus)?));
    }
    log::info!("rvq: {} fit frames, mse by depth {:?}", corpus[0].len(), mse_by_depth);

    let ids = used_ids(&pretrain, &finetune);
    let grids: Vec<Stamped<GridLine>> = ids
        .par_iter()
        .map(|id| {
            let seq = by_id
                .get(id.as_str())
                .ok_or_else(|| Error::Data(format!("{STAGE}: no frames for clip '{id}'")))?;
            Ok(ctx.stamp(GridLine {
                id: id.clone(),
                grid: codec.encode(seq)?,
            }))
        })
        .collect::<Result<_>>()?;
    write_jsonl(&ctx.path(GRIDS), &grids)?;
    let file = CodecFile {
        preset: ctx.cfg.codec.preset.clone(),
        fit_frames: corpus[0].len(),
        mse_by_depth,
        codec,
    };
    write_json(&ctx.path(CODEC), &ctx.stamp(file.clone()))?;
    Ok(file)
}

fn caption_vocab(vocab: &EventVocab) -> CaptionVocab {
    CaptionVocab::new(vocab.caption_words())
}

struct Clips {
    grids: HashMap<String, CodecGrid>,
    scenes: HashMap<String, SceneRecord>,
}

impl Clips {
    fn load(ctx: &Ctx, stage: &str) -> Result<Self> {
        let grids: Vec<GridLine> = read_stamped(ctx, stage, GRIDS)?;
        let scenes: Vec<SceneRecord> = read_stamped(ctx, stage, SCENES)?;
        Ok(Clips {
            grids: grids.into_iter().map(|g| (g.id, g.grid)).collect(),
            scenes: scenes.into_iter().map(|s| (s.id.clone(), s)).collect(),
        })
    }

    fn grid(&self, stage: &str, id: &str) -> Result<&CodecGrid> {
        self.grids
            .get(id)
            .ok_or_else(|| Error::Data(format!("{stage}: no codec grid for clip '{id}'")))
    }

    fn scene(&self, stage: &str, id: &str) -> Result<&Scene> {
        self.scenes
            .get(id)
            .map(|s| &s.scene)
            .ok_or_else(|| Error::Data(format!("{stage}: no scene for clip '{id}'")))
    }
}

fn examples(
    stage: &str,
    entries: &[ManifestEntry],
    clips: &Clips,
    world: &EventVocab,
    vocab: &CaptionVocab,
) -> Result<Vec<TrainExample>> {
    let mut out = Vec::new();
    for e in entries {
        let grid = clips.grid(stage, &e.id)?;
        let seq_emb = oracle_audio_embedding(clips.scene(stage, &e.id)?, world)?;
        for cap in &e.captions {
            let words: Vec<String> = cap.split_whitespace().map(String::from).collect();
            out.push(TrainExample {
                grid: grid.clone(),
                seq_emb: seq_emb.clone(),
                caption: vocab.words_to_ids(&words)?,
            });
        }
    }
    Ok(out)
}

fn model_config(ctx: &Ctx, codec: &RvqCodec, world: &EventVocab, vocab: &CaptionVocab) -> ModelConfig {
    let m = &ctx.cfg.model;
    ModelConfig {
        n_q: codec.n_q(),
        codebook_size: codec.codebook_size(),
        seq_dim: world.embedding_dim(),
        hidden: m.hidden,
        heads: m.heads,
        enc_layers: m.enc_layers,
        dec_layers: m.dec_layers,
        ffn: m.ffn,
        vocab_size: vocab.len(),
        max_positions: m.max_positions,
    }
}

/// Two-stage training: pretraining clips, then the finetuning train split.
pub fn cmd_train(ctx: &Ctx) -> Result<TrainLog> {
    const STAGE: &str = "train";
    let pretrain = load_stamped_manifest(ctx, STAGE, PRETRAIN)?;
    let finetune = load_stamped_manifest(ctx, STAGE, FINETUNE)?;
    let codec: CodecFile = read_stamped_json(ctx, STAGE, CODEC)?;
    let clips = Clips::load(ctx, STAGE)?;
    let world = ctx.vocab()?;
    let vocab = caption_vocab(&world);

    let ft_train: Vec<ManifestEntry> = finetune.iter().filter(|e| e.split == Split::Train).cloned().collect();
    let t = &ctx.cfg.train;
    let stages = [
        StageData {
            name: "pretrain".into(),
            examples: examples(STAGE, &pretrain, &clips, &world, &vocab)?,
            steps: t.pretrain_steps,
        },
        StageData {
            name: "finetune".into(),
            examples: examples(STAGE, &ft_train, &clips, &world, &vocab)?,
            steps: t.finetune_steps,
        },
    ];
    let mcfg = model_config(ctx, &codec.codec, &world, &vocab);
    let model = Model::new(mcfg.clone(), ctx.seed(6))?;
    let tcfg = TrainConfig {
        mcm_ratio: ctx.cfg.model.mcm_ratio,
        mcm_weight: ctx.cfg.model.mcm_weight,
        lr: t.lr,
        batch_size: t.batch_size,
        seed: ctx.seed(7),
        clip_norm: t.clip_norm,
        ..TrainConfig::default()
    };
    let outcome = train(model, &stages, &tcfg)?;
    for s in &outcome.stages {
        log::info!("stage '{}' covered steps {}..={}", s.name, s.first_step, s.last_step);
    }

    // held-out masked-code accuracy on the finetuning test split
    let ratio = if tcfg.mcm_ratio > 0.0 { tcfg.mcm_ratio } else { TrainConfig::default().mcm_ratio };
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed(8));
    let test: Vec<ManifestEntry> = finetune.iter().filter(|e| e.split == Split::Test).cloned().collect();
    let held: Vec<_> = examples(STAGE, &test, &clips, &world, &vocab)?
        .into_iter()
        .step_by(ctx.cfg.dataset.n_refs.max(1))
        .map(|ex| ex.masked(ratio, mcfg.mask_code(), &mut rng))
        .collect();
    let (correct, total) = mcm_accuracy(&outcome.model, &held)?;
    let acc = McmAccuracy {
        split: "test".into(),
        correct,
        total,
        accuracy: if total > 0 { correct as f64 / total as f64 } else { 0.0 },
        chance: 1.0 / mcfg.codebook_size as f64,
    };

    let last = outcome.trace.last();
    let log = TrainLog {
        stages: outcome
            .stages
            .iter()
            .map(|s| StageBoundary {
                name: s.name.clone(),
                examples: s.examples,
                first_step: s.first_step,
                last_step: s.last_step,
            })
            .collect(),
        steps: outcome.trace.len(),
        num_params: outcome.model.num_params(),
        final_caption_ce: last.map_or(0.0, |r| r.caption_ce),
        final_mcm_ce: last.map_or(0.0, |r| r.mcm_ce),
        mcm_heldout: acc,
    };
    let csv = format!("# config_hash {}\n{}", ctx.hash, loss_trace_csv(&outcome.trace));
    ensure_dir(&ctx.path("model/loss.csv"))?;
    fs::write(ctx.path("model/loss.csv"), csv)?;
    write_json(&ctx.path(CHECKPOINT), &Checkpoint::new(&outcome.model, &vocab, &ctx.hash))?;
    write_json(&ctx.path("model/train_log.json"), &ctx.stamp(log.clone()))?;
    Ok(log)
}

fn load_model(ctx: &Ctx, stage: &str) -> Result<(Model, CaptionVocab)> {
    let path = ctx.path(CHECKPOINT);
    let ck: Checkpoint = read_json(stage, &path)?;
    check_hash(ctx, stage, &path, &ck.config_hash)?;
    ck.into_model()
}

/// Test items to decode, in manifest order.
fn test_items(ctx: &Ctx, stage: &str) -> Result<Vec<ManifestEntry>> {
    let finetune = load_stamped_manifest(ctx, stage, FINETUNE)?;
    let mut test: Vec<ManifestEntry> = finetune.into_iter().filter(|e| e.split == Split::Test).collect();
    if ctx.cfg.decode.max_items > 0 {
        test.truncate(ctx.cfg.decode.max_items);
    }
    if test.is_empty() {
        return Err(Error::Data(format!("{stage}: test split is empty")));
    }
    Ok(test)
}

fn to_record(item_id: &str, index: usize, c: &Candidate, vocab: &CaptionVocab, hash: &str) -> CandidateRecord {
    CandidateRecord {
        item_id: item_id.to_string(),
        candidate_index: index,
        tokens: c.tokens.iter().map(|&t| vocab.word(t).to_string()).collect(),
        token_logprobs: c.token_logprobs.clone(),
        source: c.source,
        hit_max_len: c.hit_max_len,
        config_hash: hash.to_string(),
    }
}

/// Beam and nucleus candidates for every test item.
pub fn cmd_generate(ctx: &Ctx) -> Result<usize> {
    const STAGE: &str = "generate";
    let (model, vocab) = load_model(ctx, STAGE)?;
    let clips = Clips::load(ctx, STAGE)?;
    let world = ctx.vocab()?;
    let items = test_items(ctx, STAGE)?;
    let d = &ctx.cfg.decode;
    let per_item: Vec<Vec<CandidateRecord>> = items
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let grid = clips.grid(STAGE, &e.id)?;
            let emb = oracle_audio_embedding(clips.scene(STAGE, &e.id)?, &world)?;
            let mut dec = ClipDecoder::new(&model, grid, &emb)?;
            dec.max_len = d.max_len;
            let beams = beam_search(&dec, d.beam_width, d.max_len, d.length_penalty)?;
            let samples = nucleus_sample(&dec, &d.nucleus(), ctx.seed(1000 + i as u64))?;
            Ok(beams
                .iter()
                .chain(&samples)
                .enumerate()
                .map(|(k, c)| to_record(&e.id, k, c, &vocab, &ctx.hash))
                .collect())
        })
        .collect::<Result<_>>()?;
    let rows: Vec<CandidateRecord> = per_item.into_iter().flatten().collect();
    write_jsonl(&ctx.path(CANDIDATES), &rows)?;
    Ok(rows.len())
}

fn group_by_item<T, F: Fn(&T) -> &str>(rows: Vec<T>, key: F) -> Vec<(String, Vec<T>)> {
    let mut out: Vec<(String, Vec<T>)> = Vec::new();
    for r in rows {
        let k = key(&r).to_string();
        match out.last_mut() {
            Some((last, v)) if *last == k => v.push(r),
            _ => out.push((k, vec![r])),
        }
    }
    out
}

/// Scores candidates and writes one ranked file per configured mode. The
/// beam system ranks beam candidates; the other modes rank nucleus ones.
pub fn cmd_rerank(ctx: &Ctx) -> Result<()> {
    const STAGE: &str = "rerank";
    let (model, vocab) = load_model(ctx, STAGE)?;
    let clips = Clips::load(ctx, STAGE)?;
    let world = ctx.vocab()?;
    let detector = RuleDetector::from_vocab(&world);
    let path = ctx.path(CANDIDATES);
    let rows: Vec<CandidateRecord> = read_jsonl(STAGE, &path)?;
    for r in &rows {
        check_hash(ctx, STAGE, &path, &r.config_hash)?;
    }
    let grouped = group_by_item(rows, |r| r.item_id.as_str());

    // raw scores per candidate, computed once
    let scored: Vec<(String, Vec<(Source, ScoredCandidate)>)> = grouped
        .par_iter()
        .map(|(id, cands)| {
            let grid = clips.grid(STAGE, id)?;
            let audio = oracle_audio_embedding(clips.scene(STAGE, id)?, &world)?;
            let enc = model.encode(grid, &audio)?;
            let n_enc = enc.len() / model.config().hidden;
            let mut out = Vec::with_capacity(cands.len());
            for c in cands {
                let ids = vocab.words_to_ids(&c.tokens)?;
                let words: Vec<String> = c.tokens.iter().filter(|t| vocab.id(t) != EOS).cloned().collect();
                let lps = model.teacher_forced_logprobs(&enc, n_enc, &ids);
                let text = oracle_text_embedding(&words.join(" "), &world);
                out.push((
                    c.source,
                    ScoredCandidate {
                        tokens: words,
                        encoder_score: encoder_score(&audio, &text)?,
                        decoder_score: decoder_score(&lps)?,
                    },
                ));
            }
            Ok((id.clone(), out))
        })
        .collect::<Result<_>>()?;

    for &mode in &ctx.cfg.rerank.modes {
        let want = if mode == RerankMode::BeamPassthrough { Source::Beam } else { Source::Nucleus };
        let mut lines = Vec::new();
        for (id, cands) in &scored {
            let pool: Vec<ScoredCandidate> = cands
                .iter()
                .filter(|(s, _)| *s == want)
                .map(|(_, c)| c.clone())
                .collect();
            if pool.is_empty() {
                return Err(Error::Data(format!("{STAGE}: item '{id}' has no {want:?} candidates")));
            }
            let ranked = rank(&pool, &detector, ctx.cfg.rerank.weights(), mode)?;
            lines.extend(
                ranked
                    .iter()
                    .enumerate()
                    .map(|(k, r)| RankedRecord::new(id, k, r, mode, &ctx.hash)),
            );
        }
        write_jsonl(&ctx.path(&ranked_path(mode)), &lines)?;
    }
    Ok(())
}

/// Scores the top-ranked caption of every item for each configured mode.
pub fn cmd_evaluate(ctx: &Ctx) -> Result<Vec<(RerankMode, MetricReport)>> {
    const STAGE: &str = "evaluate";
    let items = test_items(ctx, STAGE)?;
    let refs: HashMap<&str, &Vec<String>> = items.iter().map(|e| (e.id.as_str(), &e.captions)).collect();
    let world = ctx.vocab()?;
    let detector = RuleDetector::from_vocab(&world);
    let embedder = OracleEmbedder { vocab: world };
    let mut out = Vec::new();
    for &mode in &ctx.cfg.rerank.modes {
        let path = ctx.path(&ranked_path(mode));
        let rows: Vec<RankedRecord> = read_jsonl(STAGE, &path)?;
        let mut corpus = EvalCorpus::default();
        for r in rows.into_iter().filter(|r| r.rank == 0) {
            check_hash(ctx, STAGE, &path, &r.config_hash)?;
            let references = refs
                .get(r.item_id.as_str())
                .ok_or_else(|| Error::Data(format!("{STAGE}: item '{}' is not in the test split", r.item_id)))?;
            corpus.items.push(EvalItem {
                item_id: r.item_id.clone(),
                candidate: r.tokens.join(" "),
                references: references.to_vec(),
            });
        }
        let mut report = evaluate(&corpus, &ctx.cfg.metrics, &SpiceProxy, &embedder, &detector)?;
        let extra = &mut report.config.extra;
        extra.insert("config_hash".into(), ctx.hash.clone().into());
        extra.insert("system".into(), system_name(mode).into());
        extra.insert("w_enc".into(), ctx.cfg.rerank.w_enc.into());
        extra.insert("w_dec".into(), ctx.cfg.rerank.w_dec.into());
        write_json(&ctx.path(&metrics_path(mode)), &report)?;
        out.push((mode, report));
    }
    Ok(out)
}
