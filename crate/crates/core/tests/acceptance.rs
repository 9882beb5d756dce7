//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

mod common;

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};
use std::path::Path;
use std::time::{Duration, Instant};

use cmg::autograd::{Tape, Var};
use cmg::captioner::{
    beam_search, greedy_decode, prepare_inputs, Ablation, BeamConfig, CaptionModel, DecoderConfig,
    ModelShape, StepModel, VideoInputs,
};
use cmg::cmgf::FeatureTensor;
use cmg::config::Config;
use cmg::corpus::{BOS_ID, EOS_ID, PAD_ID};
use cmg::datagen::{generate, generate_corpus, select_keyframes, Corpus, FeatureGrid, GeneratorSpec};
use cmg::localizer::{Localizer, LocalizerConfig};
use cmg::metagraph::{build_knn_edges, MetaGraphConfig, MetaGraphEncoder};
use cmg::metalearner::{alignment_loss, binarize_attention, export_frames, concat_frames, ExportContext, MetaLearner, MetaLearnerConfig, Negatives};
use cmg::metrics;
use cmg::nn::{attention_mask, GatLayer, TransformerLayer};
use cmg::params::{Adam, ParamId, ParamStore};
use cmg::scenegraph::{build_frame_graph, GraphNode, SceneConfig};
use cmg::trainer::{self, LossKind, Pipeline, TextAssets, TrainLog, XeData, XeOptions};
use cmg::Mat;
use common::gradcheck::{self, project, GradReport};
use common::{oracles, rng};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

const GRAD_INSTANCES: usize = 20;
const GRAD_ENTRIES_PER_PARAM: usize = 3;
const GRAD_BUDGET: Duration = Duration::from_secs(120);

const KNN_INSTANCES: usize = 1000;
const KNN_MAX_NODES: usize = 32;
const BEAM_MODELS: usize = 100;
const BEAM_MAX_VOCAB: usize = 5;
const BEAM_MAX_LEN: usize = 3;
const METRIC_INSTANCES: usize = 200;
const METRIC_MAX_TOKENS: usize = 6;
/// Brute-force scorers sum in a different order; agreement is to rounding.
const METRIC_TOL: f64 = 1e-9;
const KEYFRAME_INSTANCES: usize = 300;
const ORACLE_BUDGET: Duration = Duration::from_secs(120);

const STOCHASTIC_TOL: f64 = 1e-6;
const PERMUTATION_TOL: f64 = 1e-12;

const OVERFIT_VIDEOS: usize = 8;
const OVERFIT_MAX_VOCAB: usize = 40;
const OVERFIT_MAX_TOKENS: usize = 10;
const OVERFIT_MAX_STEPS: usize = 2000;
const OVERFIT_TOKEN_ACCURACY: f64 = 0.95;
const OVERFIT_EXACT: usize = 6;
const OVERFIT_BUDGET: Duration = Duration::from_secs(300);

const LOCALIZATION_RATIO: f64 = 2.0;
const LOCALIZATION_BUDGET: Duration = Duration::from_secs(900);
const ABLATION_ROWS: usize = 6;
const ABLATION_BUDGET: Duration = Duration::from_secs(1800);
const SCST_STEPS: usize = 200;
const SCST_MIN_RATIO: f64 = 0.95;
const SCST_BUDGET: Duration = Duration::from_secs(600);

type Outcome = Result<String, String>;

fn main() {
    let started = Instant::now();
    let mut failed = 0;
    let mut report = |n: usize, name: &str, out: Outcome| {
        match out {
            Ok(detail) => println!("PASS [{n}] {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL [{n}] {name}: {detail}");
            }
        }
    };
    report(1, "gradient suite", gradient_suite());
    report(2, "oracle suite", oracle_suite());
    report(3, "invariant suite", invariant_suite());
    report(4, "overfit", overfit());
    let dir = tempfile::tempdir().expect("tempdir");
    let pipeline = desk_pipeline(dir.path());
    report(5, "weak localization", weak_localization(&pipeline));
    report(6, "directional ablation", directional_ablation(&pipeline));
    report(7, "scst direction", scst_direction(&pipeline));
    println!("acceptance finished in {:.1}s, {failed} failed", started.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn within(budget: Duration, started: Instant, detail: String) -> Outcome {
    let took = started.elapsed();
    if took > budget {
        Err(format!("{detail}; took {took:.1?}, budget {budget:?}"))
    } else {
        Ok(format!("{detail} ({took:.1?})"))
    }
}

fn hash_of<T: Hash>(x: &T) -> u64 {
    let mut h = DefaultHasher::new();
    x.hash(&mut h);
    h.finish()
}

fn random_mat(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Mat {
    Mat::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
}

// ---- 1. gradients ---------------------------------------------------------

fn small_meta(seed: u64) -> MetaLearner {
    let cfg = MetaLearnerConfig {
        attn_dim: 5,
        hidden: 4,
        embed_dim: 3,
        align_dim: 4,
        ..Default::default()
    };
    MetaLearner::new(cfg, 3, 7, &mut rng(seed))
}

fn all_ids(store: &ParamStore) -> Vec<ParamId> {
    store.ids().collect()
}

fn framed(len: usize, vocab: usize, r: &mut ChaCha8Rng) -> Vec<usize> {
    let mut ids = vec![BOS_ID];
    ids.extend((0..len).map(|_| r.random_range(3..vocab)));
    ids.push(EOS_ID);
    ids
}

fn grad_attend(seed: u64) -> GradReport {
    let m = small_meta(seed);
    let mut r = rng(seed ^ 0xA);
    let v = random_mat(6, 3, &mut r);
    let h = random_mat(1, 4, &mut r);
    let (ra, rc) = (random_mat(1, 6, &mut r), random_mat(1, 3, &mut r));
    let ids = [m.w_v, m.w_h, m.w_f];
    gradcheck::check(
        &m.store,
        &ids,
        GRAD_ENTRIES_PER_PARAM,
        |t| {
            let v = t.constant(v.clone());
            let h = t.constant(h.clone());
            let vw = m.project_cells(t, v);
            let (alpha, ctx) = m.attend(t, v, vw, h);
            let a = project(t, alpha, &ra);
            let c = project(t, ctx, &rc);
            (t.add(a, c), 0)
        },
        &mut r,
    )
}

fn grad_step(seed: u64) -> GradReport {
    let m = small_meta(seed);
    let mut r = rng(seed ^ 0xB);
    let v = random_mat(6, 3, &mut r);
    let (h0, c0) = (random_mat(1, 4, &mut r), random_mat(1, 4, &mut r));
    let token = r.random_range(0..7);
    let (rh, rcell, ra) = (random_mat(1, 4, &mut r), random_mat(1, 4, &mut r), random_mat(1, 6, &mut r));
    gradcheck::check(
        &m.store,
        &all_ids(&m.store),
        GRAD_ENTRIES_PER_PARAM,
        |t| {
            let v = t.constant(v.clone());
            let vw = m.project_cells(t, v);
            let state = cmg::nn::LstmState {
                h: t.constant(h0.clone()),
                c: t.constant(c0.clone()),
            };
            let (s, alpha) = m.step(t, token, v, vw, state).expect("valid token");
            let a = project(t, s.h, &rh);
            let b = project(t, s.c, &rcell);
            let c = project(t, alpha, &ra);
            let ab = t.add(a, b);
            (t.add(ab, c), 0)
        },
        &mut r,
    )
}

fn grad_word_loss(seed: u64) -> GradReport {
    let m = small_meta(seed);
    let mut r = rng(seed ^ 0xC);
    let v = random_mat(6, 3, &mut r);
    let ids = framed(3, 7, &mut r);
    gradcheck::check(
        &m.store,
        &all_ids(&m.store),
        GRAD_ENTRIES_PER_PARAM,
        |t| {
            let v = t.constant(v.clone());
            (m.word_loss(t, v, &ids).expect("caption").0, 0)
        },
        &mut r,
    )
}

/// Even seeds check the bare triplet loss on free embeddings; odd seeds the
/// whole meta-learner objective through its projections.
fn grad_alignment(seed: u64) -> GradReport {
    let mut r = rng(seed ^ 0xD);
    if seed % 2 == 0 {
        let mut store = ParamStore::new();
        let vis: Vec<ParamId> = (0..3).map(|i| store.add(format!("v{i}"), random_mat(1, 4, &mut r))).collect();
        let txt: Vec<ParamId> = (0..3).map(|i| store.add(format!("h{i}"), random_mat(1, 4, &mut r))).collect();
        let margin = r.random_range(0.1..1.0);
        gradcheck::check(
            &store,
            &all_ids(&store),
            GRAD_ENTRIES_PER_PARAM,
            |t| {
                let v: Vec<Var> = vis.iter().map(|&p| t.param(p)).collect();
                let h: Vec<Var> = txt.iter().map(|&p| t.param(p)).collect();
                (alignment_loss(t, &v, &h, margin, Negatives::All).expect("pairs"), 0)
            },
            &mut r,
        )
    } else {
        let m = small_meta(seed);
        let batch: Vec<(Mat, Vec<usize>)> = (0..3).map(|_| (random_mat(6, 3, &mut r), framed(2, 7, &mut r))).collect();
        gradcheck::check(
            &m.store,
            &all_ids(&m.store),
            GRAD_ENTRIES_PER_PARAM,
            |t| (m.meta_loss(t, &batch).expect("batch").total, 0),
            &mut r,
        )
    }
}

fn grad_localizer(seed: u64) -> GradReport {
    let mut r = rng(seed ^ 0xE);
    let cfg = LocalizerConfig {
        hidden: 4,
        ..Default::default()
    };
    let loc = Localizer::new(cfg, 2, 3, &mut r);
    let grid = FeatureGrid::new(3, 3, random_mat(9, 2, &mut r)).expect("grid");
    let targets = Mat::from_vec(9, 3, (0..27).map(|_| f64::from(r.random_bool(0.3) as u8)).collect());
    gradcheck::check(
        &loc.store,
        &all_ids(&loc.store),
        GRAD_ENTRIES_PER_PARAM,
        |t| (loc.bce_loss(t, &grid, &targets).expect("shapes"), 0),
        &mut r,
    )
}

fn grad_metagraph(seed: u64) -> GradReport {
    let mut r = rng(seed ^ 0xF);
    let mut store = ParamStore::new();
    let cfg = MetaGraphConfig {
        knn_j: 2,
        out_dim: 4,
        ..Default::default()
    };
    let enc = MetaGraphEncoder::new(&mut store, "mg", 3, cfg, &mut r);
    let x = store.add("nodes", random_mat(5, 3, &mut r));
    let rr = random_mat(1, 4, &mut r);
    gradcheck::check(
        &store,
        &all_ids(&store),
        GRAD_ENTRIES_PER_PARAM,
        |t| {
            let xv = t.param(x);
            let edges = build_knn_edges(t.value(xv), 2);
            let y = enc.encode(t, Some(xv));
            (project(t, y, &rr), hash_of(&edges))
        },
        &mut r,
    )
}

fn grad_gat(seed: u64) -> GradReport {
    let mut r = rng(seed ^ 0x10);
    let mut store = ParamStore::new();
    let layer = GatLayer::new(&mut store, "gat", 4, 3, 2, seed % 2 == 0, &mut r);
    let x = store.add("x", random_mat(5, 4, &mut r));
    let edges: Vec<(usize, usize)> = (0..5).map(|_| (r.random_range(0..5), r.random_range(0..5))).collect();
    let mask = attention_mask(5, &edges);
    let rr = random_mat(5, layer.output_dim(), &mut r);
    gradcheck::check(
        &store,
        &all_ids(&store),
        GRAD_ENTRIES_PER_PARAM,
        |t| {
            let xv = t.param(x);
            let y = layer.forward(t, xv, &mask);
            (project(t, y, &rr), 0)
        },
        &mut r,
    )
}

fn grad_transformer(seed: u64) -> GradReport {
    let mut r = rng(seed ^ 0x11);
    let mut store = ParamStore::new();
    let layer = TransformerLayer::new(&mut store, "tf", 4, 2, 6, &mut r);
    let x = store.add("x", random_mat(5, 4, &mut r));
    let rr = random_mat(5, 4, &mut r);
    gradcheck::check(
        &store,
        &all_ids(&store),
        GRAD_ENTRIES_PER_PARAM,
        |t| {
            let xv = t.param(x);
            let y = layer.forward(t, xv);
            (project(t, y, &rr), 0)
        },
        &mut r,
    )
}

fn tiny_spec(seed: u64, videos: usize) -> GeneratorSpec {
    GeneratorSpec {
        num_videos: videos,
        frames_per_video: 6,
        grid_side: 4,
        channels: 4,
        captions_per_video: 1,
        seed,
        ..Default::default()
    }
}

fn tiny_scene() -> SceneConfig {
    SceneConfig {
        node_dim: 4,
        gat_hidden: 2,
        gat_heads: 2,
        out_dim: 4,
        transformer_heads: 2,
        transformer_ffn: 6,
        ..Default::default()
    }
}

/// Discrete choices the captioner makes from parameter values: video-graph
/// links from embedded node features and kNN edges of the concept nodes.
fn decoder_choices(t: &mut Tape<'_>, model: &CaptionModel, inputs: &[VideoInputs]) -> u64 {
    let mut h = DefaultHasher::new();
    for inp in inputs {
        if let Some(scene) = &model.scene {
            for strip in [false, true] {
                let frames: Vec<_> = if strip {
                    inp.frame_graphs.iter().map(|f| f.without_predicates()).collect()
                } else {
                    inp.frame_graphs.clone()
                };
                let nodes: Vec<GraphNode> = frames.iter().flat_map(|f| f.nodes.iter().cloned()).collect();
                if nodes.is_empty() {
                    continue;
                }
                let x = scene.embed_nodes(t, &nodes);
                let g = scene.video_graph(&frames, t.value(x)).expect("graph");
                g.links.hash(&mut h);
            }
        }
        if let (Some(enc), Some(x)) = (&model.metagraph, model.concept_nodes(t, &inp.detections)) {
            build_knn_edges(t.value(x), enc.config.knn_j).hash(&mut h);
        }
    }
    h.finish()
}

fn grad_decoder(seed: u64) -> GradReport {
    let corpus = generate(&tiny_spec(seed, 3)).expect("corpus");
    let text = TextAssets::build(&corpus, 6, 1).expect("text");
    let mut r = rng(seed ^ 0x12);
    let channels = corpus.videos[0].grid_shape().2;
    let loc = Localizer::new(
        LocalizerConfig {
            hidden: 4,
            ..Default::default()
        },
        channels,
        text.classes.len(),
        &mut r,
    );
    let inputs: Vec<VideoInputs> = corpus
        .videos
        .iter()
        .map(|v| prepare_inputs(v, 3, Some(&loc), &corpus.scene_classes).expect("inputs"))
        .collect();
    let caps: Vec<Vec<usize>> = corpus.videos.iter().map(|v| text.encode_captions(v)[0].clone()).collect();
    let shape = ModelShape::of(&corpus.videos[0], text.classes.len(), corpus.scene_classes.clone(), text.vocab.len());
    let cfg = DecoderConfig {
        word_dim: 4,
        proj_dim: 4,
        hidden: 5,
        ..Default::default()
    };
    let graph = MetaGraphConfig {
        out_dim: 4,
        ..Default::default()
    };
    let model = CaptionModel::new(&shape, cfg, &graph, &tiny_scene(), Ablation::default(), &mut r).expect("model");
    gradcheck::check(
        &model.store,
        &all_ids(&model.store),
        2,
        |t| {
            let batch: Vec<(&VideoInputs, &[usize])> = inputs.iter().zip(&caps).map(|(i, c)| (i, c.as_slice())).collect();
            let extra = decoder_choices(t, &model, &inputs);
            (model.xe_loss(t, &batch).expect("xe"), extra)
        },
        &mut r,
    )
}

fn gradient_suite() -> Outcome {
    let started = Instant::now();
    let ops: [(&str, fn(u64) -> GradReport); 9] = [
        ("attend", grad_attend),
        ("step", grad_step),
        ("word_loss", grad_word_loss),
        ("alignment_loss", grad_alignment),
        ("localizer_bce", grad_localizer),
        ("metagraph_encode", grad_metagraph),
        ("gat_layer", grad_gat),
        ("transformer_layer", grad_transformer),
        ("decoder_xe", grad_decoder),
    ];
    let mut failures = Vec::new();
    let mut summary = Vec::new();
    for (name, f) in ops {
        let mut total = GradReport::default();
        for i in 0..GRAD_INSTANCES as u64 {
            total.merge(f(1000 + i));
        }
        if !total.passed() {
            failures.push(format!("{name}: max rel err {:.2e} at {}", total.max_rel_err, total.worst));
        }
        summary.push(format!("{name} {:.1e}", total.max_rel_err));
    }
    if !failures.is_empty() {
        return Err(failures.join("; "));
    }
    within(
        GRAD_BUDGET,
        started,
        format!("{GRAD_INSTANCES} instances per op, max rel err: {}", summary.join(", ")),
    )
}

// ---- 2. oracles -----------------------------------------------------------

/// A step model whose next-token distribution depends on the whole prefix.
struct TableModel {
    vocab: usize,
    seed: u64,
}

impl StepModel for TableModel {
    type State = Vec<usize>;

    fn initial(&self) -> Vec<usize> {
        Vec::new()
    }

    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn step(&self, state: &Vec<usize>, token: usize) -> (Vec<usize>, Vec<f64>) {
        let mut prefix = state.clone();
        prefix.push(token);
        let mut r = rng(self.seed ^ hash_of(&prefix));
        // Coarse logits so that exact ties occur.
        let logits: Vec<f64> = (0..self.vocab).map(|_| f64::from(r.random_range(0..4u8))).collect();
        let z = logits.iter().map(|l| l.exp()).sum::<f64>().ln();
        (prefix, logits.iter().map(|l| l - z).collect())
    }
}

fn knn_oracle() -> Result<(), String> {
    let mut r = rng(2);
    for case in 0..KNN_INSTANCES {
        let l = r.random_range(1..=KNN_MAX_NODES);
        let d = r.random_range(1..4);
        let j = r.random_range(1..6);
        // Small integer coordinates make distance ties common.
        let pts: Vec<Vec<f64>> = (0..l)
            .map(|_| (0..d).map(|_| f64::from(r.random_range(0..3u8))).collect())
            .collect();
        let got = build_knn_edges(&Mat::from_rows(&pts), j);
        let want = oracles::knn_edges(&pts, j);
        if got != want {
            return Err(format!("kNN case {case} (L={l}, J={j}) differs"));
        }
    }
    Ok(())
}

fn beam_oracle() -> Result<(), String> {
    let mut r = rng(3);
    for case in 0..BEAM_MODELS {
        let vocab = r.random_range(4..=BEAM_MAX_VOCAB);
        let model = TableModel {
            vocab,
            seed: r.random(),
        };
        let max_len = r.random_range(1..=BEAM_MAX_LEN);
        let norm = r.random_bool(0.5);
        let emittable = vocab - 2;
        let full = emittable.pow(max_len as u32);
        let exhaustive = beam_search(
            &model,
            &BeamConfig {
                beam: full,
                max_len,
                length_norm: norm,
            },
        )
        .map_err(|e| e.to_string())?;
        let want = oracles::exhaustive_decode(&model, max_len, norm, PAD_ID, BOS_ID, EOS_ID);
        if exhaustive.0 != want.0 || exhaustive.1 != want.1 {
            return Err(format!("beam case {case}: {exhaustive:?} vs enumeration {want:?}"));
        }
        let one = beam_search(
            &model,
            &BeamConfig {
                beam: 1,
                max_len,
                length_norm: norm,
            },
        )
        .map_err(|e| e.to_string())?;
        if one.0 != greedy_decode(&model, max_len) {
            return Err(format!("beam case {case}: beam 1 differs from greedy"));
        }
    }
    Ok(())
}

fn random_sentence(r: &mut ChaCha8Rng, min: usize) -> Vec<String> {
    const WORDS: [&str; 5] = ["a", "red", "box", "moves", "left"];
    let n = r.random_range(min..=METRIC_MAX_TOKENS);
    (0..n).map(|_| WORDS[r.random_range(0..WORDS.len())].to_string()).collect()
}

fn metric_oracle() -> Result<(), String> {
    let mut r = rng(4);
    let close = |a: f64, b: f64| (a - b).abs() <= METRIC_TOL * a.abs().max(1.0);
    for case in 0..METRIC_INSTANCES {
        let n = r.random_range(1..4);
        let cands: Vec<Vec<String>> = (0..n).map(|_| random_sentence(&mut r, 1)).collect();
        let refs: Vec<Vec<Vec<String>>> = (0..n)
            .map(|_| (0..r.random_range(1..4)).map(|_| random_sentence(&mut r, 1)).collect())
            .collect();
        for order in 1..=4 {
            let got = metrics::bleu(&cands, &refs, order).map_err(|e| e.to_string())?;
            let want = oracles::bleu(&cands, &refs, order);
            if !close(got, want) {
                return Err(format!("BLEU@{order} case {case}: {got} vs {want}"));
            }
        }
        for (c, rs) in cands.iter().zip(&refs) {
            let (got, want) = (metrics::rouge_l(c, rs), oracles::rouge_l(c, rs));
            if !close(got, want) {
                return Err(format!("ROUGE-L case {case}: {got} vs {want}"));
            }
        }
        let got = metrics::cider(&cands, &refs).map_err(|e| e.to_string())?;
        let want = oracles::cider(&cands, &refs);
        if !close(got, want) {
            return Err(format!("CIDEr-D case {case}: {got} vs {want}"));
        }
    }
    Ok(())
}

fn keyframe_oracle() -> Result<(), String> {
    let mut r = rng(5);
    for case in 0..KEYFRAME_INSTANCES {
        let f = r.random_range(1..=10);
        let n = r.random_range(0..=12);
        let frames: Vec<Vec<f64>> = (0..f)
            .map(|_| (0..4).map(|_| f64::from(r.random_range(0..3u8))).collect())
            .collect();
        let grids: Vec<FeatureGrid> = frames
            .iter()
            .map(|v| FeatureGrid::new(2, 2, Mat::from_vec(4, 1, v.clone())).expect("grid"))
            .collect();
        let got = select_keyframes(&grids, n);
        let want = oracles::keyframes(&frames, n);
        if got != want {
            return Err(format!("key frames case {case}: {got:?} vs {want:?}"));
        }
    }
    Ok(())
}

fn oracle_suite() -> Outcome {
    let started = Instant::now();
    knn_oracle()?;
    beam_oracle()?;
    metric_oracle()?;
    keyframe_oracle()?;
    within(
        ORACLE_BUDGET,
        started,
        format!(
            "exact agreement on {KNN_INSTANCES} kNN, {BEAM_MODELS} beam models, \
             {METRIC_INSTANCES} metric and {KEYFRAME_INSTANCES} key-frame cases"
        ),
    )
}

// ---- 3. invariants --------------------------------------------------------

fn rows_stochastic(m: &Mat, mask: Option<&Mat>) -> Result<(), String> {
    for i in 0..m.rows() {
        let s: f64 = m.row(i).iter().sum();
        if (s - 1.0).abs() > STOCHASTIC_TOL {
            return Err(format!("row {i} sums to {s}"));
        }
        if let Some(mask) = mask {
            if m.row(i).iter().zip(mask.row(i)).any(|(&a, &k)| k == 0.0 && a != 0.0) {
                return Err(format!("row {i} attends outside its neighbourhood"));
            }
        }
    }
    Ok(())
}

fn attention_invariants() -> Result<(), String> {
    for seed in 0..20 {
        let mut r = rng(seed);
        let m = small_meta(seed);
        let mut t = Tape::with_params(&m.store);
        let v = t.constant(random_mat(8, 3, &mut r));
        let h = t.constant(random_mat(1, 4, &mut r));
        let vw = m.project_cells(&mut t, v);
        let (alpha, _) = m.attend(&mut t, v, vw, h);
        rows_stochastic(t.value(alpha), None).map_err(|e| format!("cell attention: {e}"))?;

        let mut store = ParamStore::new();
        let layer = GatLayer::new(&mut store, "g", 4, 3, 3, true, &mut r);
        let edges: Vec<(usize, usize)> = (0..6).map(|_| (r.random_range(0..7), r.random_range(0..7))).collect();
        let mask = attention_mask(7, &edges);
        let mut t = Tape::with_params(&store);
        let x = t.constant(random_mat(7, 4, &mut r));
        let (_, maps) = layer.forward_with_attention(&mut t, x, &mask);
        for a in maps {
            rows_stochastic(t.value(a), Some(&mask)).map_err(|e| format!("GAT: {e}"))?;
        }
    }
    Ok(())
}

/// Recomputes every exported mask from the attention maps directly.
fn mask_rule(corpus: &Corpus) -> Result<(), String> {
    let text = TextAssets::build(corpus, 8, 1).map_err(|e| e.to_string())?;
    let cfg = MetaLearnerConfig {
        attn_dim: 6,
        hidden: 8,
        embed_dim: 4,
        align_dim: 4,
        frames_sampled: 3,
        ..Default::default()
    };
    let channels = corpus.videos[0].grid_shape().2;
    let m = MetaLearner::new(cfg, channels, text.vocab.len(), &mut rng(6));
    let ctx = ExportContext {
        vocab: &text.vocab,
        classes: &text.classes,
        synonyms: &text.synonyms,
        lexicon: &text.lexicon,
        key_frames: 4,
    };
    let got = m.export_pseudo_masks(&corpus.videos, &ctx).map_err(|e| e.to_string())?;
    let mut want: BTreeMap<(String, usize, usize), Vec<bool>> = BTreeMap::new();
    for v in &corpus.videos {
        let frames = export_frames(v, 4, 3);
        let grid = concat_frames(&v.frames, &frames);
        let per = v.frames[0].num_cells();
        for cap in &v.captions {
            let tokens = cmg::corpus::tokenize(cap);
            let ids = text.vocab.encode(&tokens);
            let mut t = Tape::with_params(&m.store);
            let g = t.constant(grid.clone());
            let trace = m.forward_caption(&mut t, g, &ids).map_err(|e| e.to_string())?;
            for (i, tok) in tokens.iter().enumerate() {
                let Some(class) = text.classes.class_of(tok, &text.synonyms) else { continue };
                let alpha = t.value(trace.alphas[i]).data();
                let max = alpha.iter().cloned().fold(f64::MIN, f64::max);
                for (fi, &frame) in frames.iter().enumerate() {
                    let cells: Vec<bool> = (0..per).map(|c| alpha[fi * per + c] >= 0.5 * max).collect();
                    if cells.iter().any(|&b| b) {
                        let e = want.entry((v.id.clone(), class, frame)).or_insert(vec![false; per]);
                        e.iter_mut().zip(cells).for_each(|(a, b)| *a |= b);
                    }
                }
            }
        }
    }
    let got: BTreeMap<(String, usize, usize), Vec<bool>> =
        got.masks.into_iter().map(|(k, v)| ((k.video, k.class, k.frame), v)).collect();
    if got != want {
        return Err(format!("{} exported masks, {} by the rule", got.len(), want.len()));
    }
    if got.is_empty() {
        return Err("no masks exported".into());
    }
    let split = binarize_attention(&[0.1, 0.4, 0.2, 0.2, 0.05, 0.05], 2, 0.5);
    if split != vec![vec![false, true, true], vec![true, false, false]] {
        return Err(format!("binarize_attention gave {split:?}"));
    }
    Ok(())
}

fn graph_invariants(corpus: &Corpus) -> Result<(), String> {
    let classes = &corpus.scene_classes;
    for v in &corpus.videos {
        let mut frames = Vec::new();
        for g in &v.scene_graphs {
            let fg = build_frame_graph(g, classes).map_err(|e| e.to_string())?;
            let p = g.triplets.len();
            if fg.nodes.len() != g.objects.len() + p || fg.edges.len() != 2 * p {
                return Err(format!(
                    "{} frame {}: {} nodes, {} edges for {} objects and {p} triplets",
                    v.id,
                    g.frame,
                    fg.nodes.len(),
                    fg.edges.len(),
                    g.objects.len()
                ));
            }
            frames.push(fg);
        }
        let n: usize = frames.iter().map(|f| f.nodes.len()).sum();
        let mut r = rng(hash_of(&v.id));
        // Aligned features so that every IoU-qualified pair links.
        let feats = Mat::from_vec(n, 3, (0..n * 3).map(|_| r.random_range(0.9..1.0)).collect());
        let vg = cmg::scenegraph::build_video_graph(&frames, &feats, 0.9, 0.5).map_err(|e| e.to_string())?;
        for (f, &off) in frames.iter().zip(&vg.offsets) {
            for &(a, b) in &f.edges {
                if !vg.edges.contains(&(a + off, b + off)) {
                    return Err(format!("{}: frame edge ({a}, {b}) missing from the video graph", v.id));
                }
            }
        }
    }
    Ok(())
}

fn permutation_invariance() -> Result<(), String> {
    for seed in 0..50 {
        let mut r = rng(100 + seed);
        let mut store = ParamStore::new();
        let enc = MetaGraphEncoder::new(
            &mut store,
            "mg",
            3,
            MetaGraphConfig {
                out_dim: 5,
                ..Default::default()
            },
            &mut r,
        );
        let l = r.random_range(2..10);
        // Continuous coordinates give distinct distances almost surely.
        let x = random_mat(l, 3, &mut r);
        let mut perm: Vec<usize> = (0..l).collect();
        perm.shuffle(&mut r);
        let out = |m: Mat| {
            let mut t = Tape::with_params(&store);
            let x = t.constant(m);
            let y = enc.encode(&mut t, Some(x));
            t.value(y).clone()
        };
        let (a, b) = (out(x.clone()), out(x.select_rows(&perm)));
        if a.data().iter().zip(b.data()).any(|(p, q)| (p - q).abs() > PERMUTATION_TOL) {
            return Err(format!("seed {seed}: R_meta changes under permutation {perm:?}"));
        }
    }
    Ok(())
}

fn cmgf_roundtrip() -> Result<(), String> {
    let mut r = rng(7);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    for case in 0..200 {
        let rank = r.random_range(1..=4);
        let dims: Vec<usize> = (0..rank).map(|_| r.random_range(0..4)).collect();
        let n: usize = dims.iter().product();
        let data: Vec<f32> = (0..n)
            .map(|_| match r.random_range(0..8) {
                0 => f32::from_bits(r.random()),
                1 => -0.0,
                2 => f32::INFINITY,
                _ => r.random_range(-1e6..1e6),
            })
            .collect();
        let t = FeatureTensor::new(dims.clone(), data.clone()).map_err(|e| e.to_string())?;
        let bytes = t.to_bytes();
        let path = dir.path().join(format!("{case}.cmgf"));
        t.write(&path).map_err(|e| e.to_string())?;
        let back = FeatureTensor::read(&path).map_err(|e| e.to_string())?;
        let same = back.dims() == dims
            && back.data().iter().map(|x| x.to_bits()).eq(data.iter().map(|x| x.to_bits()))
            && back.to_bytes() == bytes
            && std::fs::read(&path).map_err(|e| e.to_string())? == bytes;
        if !same {
            return Err(format!("CMGF case {case} ({dims:?}) does not round-trip"));
        }
    }
    Ok(())
}

fn tree_digest(dir: &Path) -> Vec<u8> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).expect("readable") {
            let p = e.expect("entry").path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push(p);
            }
        }
    }
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        h.update(f.strip_prefix(dir).expect("inside").to_string_lossy().as_bytes());
        h.update(std::fs::read(&f).expect("readable"));
    }
    h.finalize().to_vec()
}

fn determinism() -> Result<(), String> {
    let spec = tiny_spec(11, 6);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate_corpus(&spec, a.path()).map_err(|e| e.to_string())?;
    generate_corpus(&spec, b.path()).map_err(|e| e.to_string())?;
    if tree_digest(a.path()) != tree_digest(b.path()) {
        return Err("generate_corpus output differs between identical runs".into());
    }
    let corpus = generate(&spec).map_err(|e| e.to_string())?;
    let text = TextAssets::build(&corpus, 6, 1).map_err(|e| e.to_string())?;
    let inputs: Vec<VideoInputs> = corpus
        .videos
        .iter()
        .map(|v| prepare_inputs(v, 3, None, &corpus.scene_classes).expect("inputs"))
        .collect();
    let caps: Vec<Vec<Vec<usize>>> = corpus.videos.iter().map(|v| text.encode_captions(v)).collect();
    let run = || {
        let mut model = tiny_captioner(&corpus, &text, Ablation::default().with_meta(false), 8);
        let opts = XeOptions {
            epochs: 3,
            batch_size: 2,
            learning_rate: 1e-2,
            clip_norm: 5.0,
            max_steps: None,
            checkpoint_dir: None,
        };
        let data = XeData {
            inputs: &inputs,
            captions: &caps,
        };
        let curve = trainer::train_xe(&mut model, data, &opts, &mut rng(9), &mut TrainLog::memory()).expect("xe");
        let params: Vec<u64> = model.store.iter().flat_map(|(_, _, m)| m.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()).collect();
        (curve.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), params)
    };
    if run() != run() {
        return Err("train_xe differs between identical seeded runs".into());
    }
    Ok(())
}

fn tiny_captioner(corpus: &Corpus, text: &TextAssets, ablation: Ablation, seed: u64) -> CaptionModel {
    let shape = ModelShape::of(&corpus.videos[0], text.classes.len(), corpus.scene_classes.clone(), text.vocab.len());
    let cfg = DecoderConfig {
        word_dim: 6,
        proj_dim: 6,
        hidden: 8,
        ..Default::default()
    };
    let graph = MetaGraphConfig {
        out_dim: 6,
        ..Default::default()
    };
    CaptionModel::new(&shape, cfg, &graph, &tiny_scene(), ablation, &mut rng(seed)).expect("model")
}

trait WithMeta {
    fn with_meta(self, on: bool) -> Self;
}

impl WithMeta for Ablation {
    fn with_meta(mut self, on: bool) -> Self {
        self.no_meta = !on;
        self
    }
}

fn invariant_suite() -> Outcome {
    let corpus = generate(&tiny_spec(21, 6)).map_err(|e| e.to_string())?;
    let checks: [(&str, Box<dyn Fn() -> Result<(), String> + '_>); 6] = [
        ("row-stochastic attention", Box::new(attention_invariants)),
        ("pseudo-mask rule", Box::new(|| mask_rule(&corpus))),
        ("graph counts and containment", Box::new(|| graph_invariants(&corpus))),
        ("metagraph permutation invariance", Box::new(permutation_invariance)),
        ("CMGF round-trip", Box::new(cmgf_roundtrip)),
        ("seeded determinism", Box::new(determinism)),
    ];
    let mut names = Vec::new();
    for (name, f) in &checks {
        f().map_err(|e| format!("{name}: {e}"))?;
        names.push(*name);
    }
    Ok(names.join(", "))
}

// ---- 4. overfit -----------------------------------------------------------

fn overfit() -> Outcome {
    let started = Instant::now();
    let spec = GeneratorSpec {
        num_videos: OVERFIT_VIDEOS,
        captions_per_video: 1,
        seed: 31,
        ..Default::default()
    };
    let corpus = generate(&spec).map_err(|e| e.to_string())?;
    let cfg = Config::desk();
    let text = TextAssets::build(&corpus, cfg.data.concept_classes, 1).map_err(|e| e.to_string())?;
    if text.vocab.len() > OVERFIT_MAX_VOCAB {
        return Err(format!("vocabulary of {} exceeds {OVERFIT_MAX_VOCAB}", text.vocab.len()));
    }
    let caps: Vec<Vec<Vec<usize>>> = corpus.videos.iter().map(|v| text.encode_captions(v)).collect();
    if let Some(long) = caps.iter().flatten().find(|c| c.len() - 2 > OVERFIT_MAX_TOKENS) {
        return Err(format!("caption of {} tokens", long.len() - 2));
    }
    let inputs: Vec<VideoInputs> = corpus
        .videos
        .iter()
        .map(|v| prepare_inputs(v, cfg.data.key_frames, None, &corpus.scene_classes).expect("inputs"))
        .collect();
    let shape = ModelShape::of(&corpus.videos[0], text.classes.len(), corpus.scene_classes.clone(), text.vocab.len());
    let ablation = Ablation::default().with_meta(false);
    let mut model = CaptionModel::new(&shape, cfg.decoder.clone(), &cfg.graph, &cfg.scene, ablation, &mut rng(32))
        .map_err(|e| e.to_string())?;
    let batch: Vec<(&VideoInputs, &[usize])> = inputs.iter().zip(&caps).map(|(i, c)| (i, c[0].as_slice())).collect();
    let mut adam = Adam::new(&model.store, cfg.decoder.learning_rate).with_clip(cfg.decoder.clip_norm);
    let data = XeData {
        inputs: &inputs,
        captions: &caps,
    };
    let (mut acc, mut exact) = (0.0, 0);
    let mut steps = 0;
    while steps < OVERFIT_MAX_STEPS {
        let grads = {
            let mut t = Tape::with_params(&model.store);
            let loss = model.xe_loss(&mut t, &batch).map_err(|e| e.to_string())?;
            t.backward(loss).params()
        };
        adam.step(&mut model.store, &grads);
        steps += 1;
        if steps % 50 == 0 {
            acc = trainer::token_accuracy(&model, data).map_err(|e| e.to_string())?;
            exact = 0;
            for (inp, c) in inputs.iter().zip(&caps) {
                let body = &c[0][1..c[0].len() - 1];
                if model.generate(inp, 1).map_err(|e| e.to_string())? == body {
                    exact += 1;
                }
            }
            if acc >= OVERFIT_TOKEN_ACCURACY && exact >= OVERFIT_EXACT {
                break;
            }
        }
    }
    let detail = format!(
        "token accuracy {acc:.3}, {exact}/{OVERFIT_VIDEOS} exact greedy captions after {steps} steps, vocab {}",
        text.vocab.len()
    );
    if acc < OVERFIT_TOKEN_ACCURACY || exact < OVERFIT_EXACT {
        return Err(detail);
    }
    within(OVERFIT_BUDGET, started, detail)
}

// ---- 5-7. desk-scale experiments -----------------------------------------

fn desk_pipeline(out: &Path) -> Pipeline {
    let mut cfg = Config::desk();
    cfg.scst.steps = SCST_STEPS;
    let corpus = generate(&cfg.generator).expect("desk corpus");
    Pipeline::new(cfg, corpus, out)
}

fn weak_localization(p: &Pipeline) -> Outcome {
    let started = Instant::now();
    if p.corpus.videos.len() != 64 {
        return Err(format!("corpus has {} videos", p.corpus.videos.len()));
    }
    p.stage_meta().map_err(|e| e.to_string())?;
    let (_, rep) = p.train_localizer().map_err(|e| e.to_string())?;
    let detail = format!(
        "mean IoU {:.3} vs area-matched random {:.3}, ratio {:.2} over {} pairs",
        rep.mean_iou,
        rep.mean_random_iou,
        rep.ratio(),
        rep.pairs
    );
    if !(rep.ratio() >= LOCALIZATION_RATIO) {
        return Err(detail);
    }
    within(LOCALIZATION_BUDGET, started, detail)
}

fn directional_ablation(p: &Pipeline) -> Outcome {
    let started = Instant::now();
    let rep = p.ablate().map_err(|e| e.to_string())?;
    let written = std::fs::read_to_string(p.out.join("ablation.json")).map_err(|e| e.to_string())?;
    let parsed: trainer::AblationReport = serde_json::from_str(&written).map_err(|e| e.to_string())?;
    if rep.rows.len() != ABLATION_ROWS || parsed.rows.len() != ABLATION_ROWS {
        return Err(format!("grid has {} rows", rep.rows.len()));
    }
    let xe = |name: &str| rep.rows.iter().find(|r| r.name == name).map(|r| r.report.heldout_xe);
    let (Some(bl), Some(all)) = (xe("BL"), xe("All")) else {
        return Err("grid lacks the BL or All row".into());
    };
    let table: Vec<String> = rep.rows.iter().map(|r| format!("{} {:.3}", r.name, r.report.heldout_xe)).collect();
    let detail = format!("held-out XE {}", table.join(", "));
    if all > bl {
        return Err(detail);
    }
    within(ABLATION_BUDGET, started, detail)
}

fn zero_advantage(model: &CaptionModel, inp: &VideoInputs) -> Result<(), String> {
    let stepper = model.stepper(inp).map_err(|e| e.to_string())?;
    let sample = cmg::captioner::sample_sequence(&stepper, model.config.max_len, 1.0, &mut rng(8)).map_err(|e| e.to_string())?;
    let mut ids = vec![BOS_ID];
    ids.extend(sample);
    let mut t = Tape::with_params(&model.store);
    let lp = model.sequence_log_prob(&mut t, inp, &ids).map_err(|e| e.to_string())?;
    let loss = trainer::scst_objective(&mut t, lp, 0.0);
    if t.scalar(loss) != 0.0 {
        return Err(format!("zero-advantage loss is {}", t.scalar(loss)));
    }
    let grads = t.backward(loss).params();
    if grads.iter().any(|g| g.data().iter().any(|&x| x != 0.0)) {
        return Err("zero-advantage gradient is not exactly zero".into());
    }
    Ok(())
}

fn scst_direction(p: &Pipeline) -> Outcome {
    let started = Instant::now();
    let (model, rep) = p
        .fit_captioner(&p.config.ablation, LossKind::Scst, None)
        .map_err(|e| e.to_string())?;
    let inputs = p.inputs(&p.config.ablation).map_err(|e| e.to_string())?;
    zero_advantage(&model, &inputs[0])?;
    let (Some(before), Some(after)) = (rep.train_cider_before_scst, rep.train_cider_after_scst) else {
        return Err("SCST did not run".into());
    };
    let detail = format!("CIDEr-D {before:.3} -> {after:.3} after {SCST_STEPS} steps; zero advantage gives zero gradient");
    if after < SCST_MIN_RATIO * before {
        return Err(detail);
    }
    within(SCST_BUDGET, started, detail)
}
