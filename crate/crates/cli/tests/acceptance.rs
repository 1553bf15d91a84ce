//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero when any criterion fails.

#[path = "../../core/tests/oracles/mod.rs"]
mod oracles;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use capforge::pipeline::{self, DataLog, TrainLog};
use capforge::{report, Ctx, ExperimentConfig};
use capforge_core::dataio::{dedup_against, filter_duration, ManifestEntry, Split};
use capforge_core::decoding::{beam_search, nucleus_filter, nucleus_sample, NucleusParams, StepModel};
use capforge_core::metrics::{cider_d, meteor_lite, tokenize, CiderConfig, SpiceBackend, SpiceProxy};
use capforge_core::model::{grad_check, MaskedExample, Model, ModelConfig};
use capforge_core::rerank::{
    rank, FluencyDetector, FluencyFlag, FluencyFlags, RerankMode, RerankWeights, RuleDetector, ScoredCandidate,
};
use capforge_core::rvq::{fit_rvq, CodecConfig, CodecGrid, FeatureSeq};
use capforge_core::synthworld::SeqEmbedding;
use proptest::test_runner::{Config as PropConfig, TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn within(start: Instant, limit: Duration, what: &str) -> Result<(), String> {
    let took = start.elapsed();
    ensure!(took < limit, "{what} took {took:.1?}, limit {limit:?}");
    Ok(())
}

fn t(s: &str) -> Vec<String> {
    tokenize(s)
}

fn c1_metric_oracles() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..100 {
        let corpus = oracles::random_corpus(seed);
        ensure!(corpus.len() <= 10, "corpus {seed} has {} items", corpus.len());
        let got = cider_d(&corpus, CiderConfig::default());
        let want = oracles::cider_dense(&corpus, 4, 6.0);
        for (g, w) in got.iter().zip(&want) {
            worst = worst.max((g - w).abs());
        }
    }
    ensure!(worst < 1e-9, "CIDEr-D vs dense oracle: max diff {worst:e}");

    // METEOR-lite: P = R = 1 with one chunk over four matches; the second
    // pair shares "the dog" only (P = R = 2/3, one chunk over two matches).
    ensure!(meteor_lite(&t("a b c d"), &[t("a b c d")]) == 1.0 - 0.5 * 0.25f64.powi(3), "meteor identical");
    let f = 10.0 * (2.0 / 3.0) * (2.0 / 3.0) / (2.0 / 3.0 + 9.0 * 2.0 / 3.0);
    let m = meteor_lite(&t("the dog barks"), &[t("the dog sleeps")]);
    ensure!(m == f * (1.0 - 0.5 * 0.5f64.powi(3)), "meteor partial {m} vs {}", f * (1.0 - 0.5 * 0.5f64.powi(3)));
    ensure!(meteor_lite(&t("a b"), &[t("c d")]) == 0.0, "meteor disjoint");

    // SPICE-proxy: content words {dog, barks} vs {dog, barks} and vs {dog, barks, rain}.
    let s = SpiceProxy;
    ensure!(s.score(&t("a dog barks"), &[t("the dog barks")]).map_err(|e| e.to_string())? == 1.0, "spice exact");
    let got = s.score(&t("dog barks"), &[t("a dog barks"), t("rain")]).map_err(|e| e.to_string())?;
    ensure!(got == 2.0 * 1.0 * (2.0 / 3.0) / (1.0 + 2.0 / 3.0), "spice partial {got}");
    ensure!(s.score(&t("a dog barks"), &[t("rain falls")]).map_err(|e| e.to_string())? == 0.0, "spice disjoint");

    let identical = vec![
        (t("a dog barks loudly outside"), vec![t("a dog barks loudly outside")]),
        (t("rain falls on the roof"), vec![t("rain falls on the roof")]),
    ];
    let ten = cider_d(&identical, CiderConfig::default());
    ensure!(ten == vec![10.0, 10.0], "identical disjoint corpus gave {ten:?}");
    within(start, Duration::from_secs(10), "metric oracles")?;
    Ok(format!("max CIDEr-D diff {worst:.1e} over 100 corpora, {:.2?}", start.elapsed()))
}

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        n_q: 2,
        codebook_size: 5,
        seq_dim: 3,
        hidden: 8,
        heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        ffn: 12,
        vocab_size: 9,
        max_positions: 16,
    }
}

fn c2_grad_check() -> Outcome {
    let start = Instant::now();
    let batch = vec![
        MaskedExample {
            grid: CodecGrid::new(vec![vec![0, 5, 2, 1], vec![1, 5, 4, 3]]).unwrap(),
            masked_cols: vec![1],
            mcm_targets: vec![vec![3, 2]],
            seq_emb: SeqEmbedding { vector: vec![0.0, 0.6, 0.8] },
            caption: vec![4, 5, 6],
        },
        MaskedExample {
            grid: CodecGrid::new(vec![vec![5, 3, 5], vec![5, 0, 5]]).unwrap(),
            masked_cols: vec![0, 2],
            mcm_targets: vec![vec![1, 4], vec![2, 2]],
            seq_emb: SeqEmbedding { vector: vec![1.0, 0.0, 0.0] },
            caption: vec![7, 8],
        },
    ];
    let model = Model::new(tiny_model_config(), 21).map_err(|e| e.to_string())?;
    let mut detail = Vec::new();
    for lambda in [0.0, 1.0] {
        let r = grad_check(&model, &batch, lambda, 1e-4).map_err(|e| e.to_string())?;
        ensure!(r.checked == model.num_params(), "checked {} of {}", r.checked, model.num_params());
        ensure!(r.max_rel_error < 1e-5, "lambda {lambda}: max rel error {:e} in {}", r.max_rel_error, r.worst_group);
        detail.push(format!("lambda {lambda}: {:.1e}", r.max_rel_error));
    }
    within(start, Duration::from_secs(30), "grad check")?;
    Ok(format!("{} over {} params, {:.2?}", detail.join(", "), model.num_params(), start.elapsed()))
}

fn random_frames(rng: &mut ChaCha8Rng, seqs: usize, len: usize, dim: usize) -> Vec<FeatureSeq> {
    (0..seqs)
        .map(|_| {
            let frames = (0..len * dim).map(|_| rng.random_range(-3.0..3.0)).collect();
            FeatureSeq::new(dim, 10.0, frames).unwrap()
        })
        .collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn c3_rvq() -> Outcome {
    let start = Instant::now();
    let mut checked = 0usize;
    for case in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(case);
        let dim = rng.random_range(1..=5);
        let k = rng.random_range(1..=8);
        let n_q = rng.random_range(1..=4);
        let corpus = random_frames(&mut rng, 2, 12, dim);
        let cfg = CodecConfig { n_q, codebook_size: k, dim, frame_rate_hz: 10.0 };
        let codec = fit_rvq(&corpus, &cfg, case).map_err(|e| e.to_string())?;
        let probe = random_frames(&mut rng, 1, 10, dim).remove(0);
        let grid = codec.encode(&probe).map_err(|e| e.to_string())?;
        for t in 0..probe.len() {
            let mut residual = probe.frame(t).to_vec();
            for q in 0..n_q {
                let chosen = grid.codes[q][t] as usize;
                let d_chosen = sq_dist(&residual, codec.centroid(q, chosen));
                for j in 0..k {
                    let d = sq_dist(&residual, codec.centroid(q, j));
                    ensure!(d_chosen <= d, "case {case} frame {t} level {q}: {chosen} at {d_chosen} but {j} at {d}");
                }
                for (r, c) in residual.iter_mut().zip(codec.centroid(q, chosen)) {
                    *r -= c;
                }
                checked += 1;
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let corpus = random_frames(&mut rng, 8, 50, 4);
    let mut mses = Vec::new();
    for n_q in [1, 2, 4, 8] {
        let cfg = CodecConfig { n_q, codebook_size: 8, dim: 4, frame_rate_hz: 10.0 };
        let codec = fit_rvq(&corpus, &cfg, 3).map_err(|e| e.to_string())?;
        mses.push(codec.reconstruction_mse(&corpus).map_err(|e| e.to_string())?);
    }
    ensure!(mses.windows(2).all(|w| w[1] <= w[0]), "MSE by n_q 1,2,4,8 not non-increasing: {mses:?}");
    within(start, Duration::from_secs(30), "RVQ properties")?;
    Ok(format!(
        "{checked} level choices optimal; MSE n_q=1,2,4,8: {}; {:.2?}",
        mses.iter().map(|m| format!("{m:.4}")).collect::<Vec<_>>().join(", "),
        start.elapsed()
    ))
}

/// Step distributions looked up by prefix.
struct TableModel {
    rows: Vec<(Vec<usize>, Vec<f64>)>,
    default: Vec<f64>,
    eos: usize,
}

impl TableModel {
    fn probs(&self, prefix: &[usize]) -> &[f64] {
        self.rows.iter().find(|(p, _)| p == prefix).map_or(&self.default, |(_, r)| r)
    }
}

impl StepModel for TableModel {
    type State = Vec<usize>;

    fn vocab_size(&self) -> usize {
        self.default.len()
    }

    fn eos(&self) -> usize {
        self.eos
    }

    fn start(&self) -> (Vec<usize>, Vec<f64>) {
        (Vec::new(), self.probs(&[]).iter().map(|p| p.ln()).collect())
    }

    fn step(&self, state: &mut Vec<usize>, token: usize) -> Vec<f64> {
        state.push(token);
        self.probs(state).iter().map(|p| p.ln()).collect()
    }
}

fn c4_sampler() -> Outcome {
    let kept = nucleus_filter(&[0.5, 0.3, 0.2], 0.7);
    ensure!(kept == vec![(0, 0.5 / 0.8), (1, 0.3 / 0.8)], "nucleus fixture gave {kept:?}");
    let kept = nucleus_filter(&[0.1, 0.6, 0.3], 0.6);
    ensure!(kept == vec![(1, 1.0)], "single-token nucleus gave {kept:?}");

    let probs = vec![0.05, 0.3, 0.15, 0.25, 0.1, 0.15];
    let flat = TableModel {
        rows: vec![(vec![], probs.clone())],
        default: vec![1.0 / 6.0; 6],
        eos: 0,
    };
    let params = NucleusParams {
        top_p: 1.0,
        temperature: 1.0,
        n_candidates: 100_000,
        max_len: 1,
    };
    let draws = nucleus_sample(&flat, &params, 2024).map_err(|e| e.to_string())?;
    let mut counts = vec![0u64; probs.len()];
    for d in &draws {
        counts[d.tokens[0]] += 1;
    }
    let stat = oracles::chi_squared(&counts, &probs);
    let p_value = 1.0 - ChiSquared::new((probs.len() - 1) as f64).unwrap().cdf(stat);
    ensure!(p_value > 0.01, "chi2 {stat:.3}, p-value {p_value:.4}");

    // tokens: 0 = A, 1 = B, 2 = end
    let toy = TableModel {
        rows: vec![
            (vec![], vec![0.55, 0.2, 0.25]),
            (vec![0], vec![0.1, 0.6, 0.3]),
            (vec![1], vec![0.2, 0.2, 0.6]),
        ],
        default: vec![0.3, 0.3, 0.4],
        eos: 2,
    };
    let mut finished: Vec<(Vec<usize>, f64)> = Vec::new();
    for a in 0..3usize {
        let la = toy.probs(&[]).get(a).unwrap().ln();
        if a == 2 {
            finished.push((vec![a], la));
            continue;
        }
        for b in 0..3usize {
            finished.push((vec![a, b], la + toy.probs(&[a])[b].ln()));
        }
    }
    finished.sort_by(|x, y| y.1.total_cmp(&x.1));
    let beams = beam_search(&toy, 2, 2, 0.0).map_err(|e| e.to_string())?;
    ensure!(beams.len() == 2, "beam returned {} hypotheses", beams.len());
    for (b, (seq, lp)) in beams.iter().zip(&finished) {
        ensure!(&b.tokens == seq, "beam {:?} vs enumeration {seq:?}", b.tokens);
        ensure!((b.sum_logprob - lp).abs() < 1e-12, "beam score {} vs {lp}", b.sum_logprob);
    }
    Ok(format!("chi2 {stat:.2} (p {p_value:.3}); beam top-2 {:?}", finished[..2].iter().map(|f| &f.0).collect::<Vec<_>>()))
}

struct FlagTable(BTreeMap<Vec<String>, FluencyFlags>);

impl FluencyDetector for FlagTable {
    fn detect(&self, tokens: &[String]) -> FluencyFlags {
        self.0.get(tokens).cloned().unwrap_or_default()
    }
}

fn cand(s: &str, enc: f64, dec: f64) -> ScoredCandidate {
    ScoredCandidate {
        tokens: s.split_whitespace().map(String::from).collect(),
        encoder_score: enc,
        decoder_score: dec,
    }
}

fn c5_rerank() -> Outcome {
    let det = RuleDetector::new(["dog", "barks", "rain", "falls"]);
    let order = |cs: &[ScoredCandidate], w: RerankWeights, m: RerankMode| -> Result<Vec<Vec<String>>, String> {
        Ok(rank(cs, &det, w, m).map_err(|e| e.to_string())?.into_iter().map(|r| r.tokens).collect())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..50 {
        let cs: Vec<_> = (0..8)
            .map(|i| cand(&format!("a dog barks n{i}"), rng.random_range(-1.0..1.0), rng.random_range(-5.0..0.0)))
            .collect();
        let enc_w = RerankWeights { w_enc: 1.0, w_dec: 0.0 };
        let dec_w = RerankWeights { w_enc: 0.0, w_dec: 1.0 };
        let by_enc = order(&cs, enc_w, RerankMode::Hybrid)?;
        let by_dec = order(&cs, dec_w, RerankMode::Hybrid)?;
        let mut want_enc = cs.clone();
        want_enc.sort_by(|a, b| b.encoder_score.total_cmp(&a.encoder_score));
        let mut want_dec = cs.clone();
        want_dec.sort_by(|a, b| b.decoder_score.total_cmp(&a.decoder_score));
        ensure!(by_enc == want_enc.into_iter().map(|c| c.tokens).collect::<Vec<_>>(), "trial {trial}: (1,0) order");
        ensure!(by_dec == want_dec.into_iter().map(|c| c.tokens).collect::<Vec<_>>(), "trial {trial}: (0,1) order");
        ensure!(by_enc == order(&cs, enc_w, RerankMode::Encoder)?, "trial {trial}: encoder mode");
        ensure!(by_dec == order(&cs, dec_w, RerankMode::Decoder)?, "trial {trial}: decoder mode");
    }

    // normalized (enc, dec): c1 (1, 0), c2 (0, 1), c3 (0.5, 0.8)
    let fixture = vec![
        cand("a dog barks c1", 0.9, -3.0),
        cand("a dog barks c2", 0.1, -1.0),
        cand("a dog barks c3", 0.5, -1.4),
    ];
    let got: Vec<String> = order(&fixture, RerankWeights::default(), RerankMode::Hybrid)?
        .into_iter()
        .map(|t| t[3].clone())
        .collect();
    ensure!(got == ["c3", "c1", "c2"], "hybrid fixture order {got:?}");

    let all = [FluencyFlag::RepeatedNgram, FluencyFlag::IncompleteEnding, FluencyFlag::TooShort, FluencyFlag::NoContentWord];
    let modes = [RerankMode::Encoder, RerankMode::Decoder, RerankMode::Hybrid, RerankMode::BeamPassthrough];
    let strategy = (
        proptest::collection::vec(0u8..16, 1..12),
        proptest::collection::vec((-1.0f64..1.0, -5.0f64..0.0), 12),
        0usize..4,
    );
    let mut runner = TestRunner::new(PropConfig { cases: 512, failure_persistence: None, ..PropConfig::default() });
    runner
        .run(&strategy, |(flags, scores, mode_ix)| {
            let mut table = BTreeMap::new();
            let mut cs = Vec::new();
            for (i, &bits) in flags.iter().enumerate() {
                let c = cand(&format!("c{}", i % 7), scores[i].0, scores[i].1);
                let set: FluencyFlags = all.iter().enumerate().filter(|(b, _)| bits >> b & 1 == 1).map(|(_, f)| *f).collect();
                table.entry(c.tokens.clone()).or_insert(set);
                cs.push(c);
            }
            let out = rank(&cs, &FlagTable(table), RerankWeights::default(), modes[mode_ix])
                .map_err(|e| TestCaseError::fail(e.to_string()))?;
            if out.is_empty() {
                return Err(TestCaseError::fail("filter returned nothing"));
            }
            Ok(())
        })
        .map_err(|e| format!("fuzzed flag patterns: {e}"))?;
    Ok("pure-weight orderings on 50 draws, fixture c3 > c1 > c2, 512 flag patterns non-empty".into())
}

/// Runs every stage except the printed report.
fn run_pipeline(cfg: ExperimentConfig) -> Result<(Ctx, DataLog, TrainLog), String> {
    let ctx = Ctx::new(cfg).map_err(|e| e.to_string())?;
    let e = |e: capforge_core::Error| e.to_string();
    let data = pipeline::cmd_synth_data(&ctx).map_err(e)?;
    pipeline::cmd_rvq(&ctx).map_err(e)?;
    let train = pipeline::cmd_train(&ctx).map_err(e)?;
    pipeline::cmd_generate(&ctx).map_err(e)?;
    pipeline::cmd_rerank(&ctx).map_err(e)?;
    pipeline::cmd_evaluate(&ctx).map_err(e)?;
    Ok((ctx, data, train))
}

fn reference_config(root: &Path, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = seed;
    cfg.paths.out_dir = root.join(format!("seed{seed}"));
    cfg
}

struct ReferenceRun {
    ctx: Ctx,
    data: DataLog,
    train: TrainLog,
    took: Duration,
}

fn c6_mcm(run: &ReferenceRun) -> Outcome {
    let m = &run.train.mcm_heldout;
    let k = run.ctx.cfg.codec_config().map_err(|e| e.to_string())?.codebook_size;
    let chance = 1.0 / k as f64;
    let scenes = run.data.pretrain.after_dedup + run.data.finetune.after_dedup;
    ensure!((1500..=2500).contains(&scenes), "reference run has {scenes} scenes");
    ensure!(run.took < Duration::from_secs(600), "reference run took {:.0?}", run.took);
    ensure!(
        m.accuracy >= 5.0 * chance,
        "held-out MCM accuracy {:.4} < 5 x chance {:.4} ({}/{})",
        m.accuracy,
        5.0 * chance,
        m.correct,
        m.total
    );
    Ok(format!(
        "{}/{} = {:.4} >= {:.4} on {} split, {scenes} scenes, run {:.0?}",
        m.correct,
        m.total,
        m.accuracy,
        5.0 * chance,
        m.split,
        run.took
    ))
}

fn c7_directions(runs: &[Result<ReferenceRun, String>]) -> Outcome {
    let mut agree = 0;
    let mut lines = Vec::new();
    for run in runs {
        let run = run.as_ref().map_err(|e| e.clone())?;
        let paths: Vec<PathBuf> = [RerankMode::BeamPassthrough, RerankMode::Hybrid]
            .iter()
            .map(|&m| run.ctx.path(&pipeline::metrics_path(m)))
            .collect();
        let cmp = report::compare(&paths, false).map_err(|e| e.to_string())?;
        let beam = cmp.rows.iter().find(|r| r.system == "beam").ok_or("no beam row")?;
        let hybrid = cmp.rows.iter().find(|r| r.system == "hybrid").ok_or("no hybrid row")?;
        let ok = hybrid.fense >= beam.fense && hybrid.vocab > beam.vocab;
        agree += ok as usize;
        lines.push(format!(
            "seed {}: FENSE {:.3} vs {:.3}, vocab {} vs {}",
            run.ctx.cfg.seed, hybrid.fense, beam.fense, hybrid.vocab, beam.vocab
        ));
    }
    ensure!(agree * 2 > runs.len(), "{agree}/{} seeds agree; {}", runs.len(), lines.join("; "));
    Ok(format!("{agree}/{} seeds agree; {}", runs.len(), lines.join("; ")))
}

fn entry(id: &str, duration_s: f64) -> ManifestEntry {
    ManifestEntry {
        id: id.into(),
        duration_s,
        codec_path: format!("{id}.json"),
        captions: vec!["a dog barks".into()],
        split: Split::Train,
    }
}

fn c8_dataset(run: &ReferenceRun) -> Outcome {
    let fixtures = [
        ("below", 0.999_999, false),
        ("lower", 1.0, true),
        ("mid", 12.5, true),
        ("upper", 30.0, true),
        ("above", 30.000_001, false),
        ("tiny", 0.01, false),
    ];
    let es: Vec<_> = fixtures.iter().map(|(id, d, _)| entry(id, *d)).collect();
    let kept: BTreeSet<String> = filter_duration(&es, 1.0, 30.0)
        .map_err(|e| e.to_string())?
        .into_iter()
        .map(|e| e.id)
        .collect();
    let want: BTreeSet<String> = fixtures.iter().filter(|f| f.2).map(|f| f.0.to_string()).collect();
    ensure!(kept == want, "duration filter kept {kept:?}");

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for trial in 0..100 {
        let es: Vec<_> = (0..rng.random_range(0..40)).map(|i| entry(&format!("c{i}"), 5.0)).collect();
        let block: HashSet<String> = (0..rng.random_range(0..40))
            .filter(|_| rng.random_bool(0.5))
            .map(|i| format!("c{i}"))
            .collect();
        let got: Vec<String> = dedup_against(&es, &block).into_iter().map(|e| e.id).collect();
        let all: HashSet<String> = es.iter().map(|e| e.id.clone()).collect();
        let diff: HashSet<String> = all.difference(&block).cloned().collect();
        ensure!(got.iter().cloned().collect::<HashSet<_>>() == diff, "trial {trial}: dedup differs from set difference");
        ensure!(got.len() == diff.len(), "trial {trial}: duplicated ids");
    }

    let d = &run.data;
    ensure!(d.pretrain.after_duration < d.pretrain.raw, "no pretrain clips outside the duration bounds");
    ensure!(d.pretrain.after_dedup < d.pretrain.after_duration, "blocklist removed no pretrain clips");
    let stages = &run.train.stages;
    ensure!(stages.len() == 2, "{} stages logged", stages.len());
    ensure!(stages[0].name == "pretrain" && stages[1].name == "finetune", "stage order {:?}", stages);
    ensure!(stages[1].first_step == stages[0].last_step + 1, "stage boundary not contiguous: {stages:?}");
    ensure!(stages.iter().all(|s| s.examples > 0), "empty stage: {stages:?}");
    Ok(format!(
        "bounds inclusive; dedup = set difference on 100 draws; pretrain {}->{}->{}; boundary at step {}",
        d.pretrain.raw, d.pretrain.after_duration, d.pretrain.after_dedup, stages[1].first_step
    ))
}

fn small_config(out: PathBuf) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default()
        .with_overrides(&[
            "dataset.pretrain_size=160".into(),
            "dataset.finetune_size=120".into(),
            "dataset.overlap_size=8".into(),
            "train.pretrain_steps=15".into(),
            "train.finetune_steps=15".into(),
            "decode.n_candidates=8".into(),
        ])
        .unwrap();
    cfg.seed = 11;
    cfg.paths.out_dir = out;
    cfg
}

fn artifacts(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for dir in ["generate", "rerank", "evaluate"] {
        let mut files: Vec<PathBuf> = std::fs::read_dir(root.join(dir))
            .map(|rd| rd.filter_map(|e| e.ok().map(|e| e.path())).collect())
            .unwrap_or_default();
        files.sort();
        out.extend(files.into_iter().map(|p| p.strip_prefix(root).unwrap().to_path_buf()));
    }
    out
}

fn c9_determinism(root: &Path) -> Outcome {
    let a = root.join("det_a");
    let b = root.join("det_b");
    run_pipeline(small_config(a.clone()))?;
    run_pipeline(small_config(b.clone()))?;
    let files = artifacts(&a);
    ensure!(files.len() >= 9, "expected candidates, 4 rankings and 4 reports; found {files:?}");
    ensure!(files == artifacts(&b), "artifact sets differ");
    for f in &files {
        let x = std::fs::read(a.join(f)).map_err(|e| e.to_string())?;
        let y = std::fs::read(b.join(f)).map_err(|e| e.to_string())?;
        ensure!(x == y, "{} differs between runs", f.display());
    }
    Ok(format!("{} files byte-identical", files.len()))
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    })
}

fn main() {
    let root = tempfile::tempdir().expect("temp dir");
    let mut results: Vec<(&str, Outcome)> = vec![
        ("1 metric oracle equivalence", guarded(c1_metric_oracles)),
        ("2 gradient correctness", guarded(c2_grad_check)),
        ("3 RVQ properties", guarded(c3_rvq)),
        ("4 sampler correctness", guarded(c4_sampler)),
        ("5 reranking algebra", guarded(c5_rerank)),
    ];

    let runs: Vec<Result<ReferenceRun, String>> = (0..3u64)
        .map(|seed| {
            let start = Instant::now();
            let (ctx, data, train) = catch_unwind(AssertUnwindSafe(|| run_pipeline(reference_config(root.path(), seed))))
                .unwrap_or_else(|_| Err("pipeline panicked".into()))?;
            Ok(ReferenceRun { ctx, data, train, took: start.elapsed() })
        })
        .collect();
    let reference = runs[0].as_ref().map_err(|e| e.clone());
    results.push(("6 MCM learns", reference.clone().and_then(|r| guarded(|| c6_mcm(r)))));
    results.push(("7 hybrid vs beam direction", guarded(|| c7_directions(&runs))));
    results.push(("8 dataset rules", reference.and_then(|r| guarded(|| c8_dataset(r)))));
    results.push(("9 determinism", guarded(|| c9_determinism(root.path()))));

    let mut failed = 0;
    for (name, r) in &results {
        match r {
            Ok(detail) => println!("criterion {name}: PASS ({detail})"),
            Err(why) => {
                failed += 1;
                println!("criterion {name}: FAIL ({why})");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
