//! Deterministic synthetic scenes: coloured shapes on a feature grid, one
//! moving "actor" and one static "landmark" per video.
//!
//! Occupied cells carry `shape_code + colour_code + noise`, empty cells only
//! noise. Two context streams are emitted per frame: `appearance` encodes
//! the two colours, `motion` the actor's direction. Shape identity is only
//! visible in the grid and in the scene graphs.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::records::{
    Corpus, FeatureGrid, FrameRegions, FrameSceneGraph, SceneClasses, SceneObject, SceneTriplet,
    VideoRecord,
};
use crate::error::{Error, Result};
use crate::tensor::Mat;

pub const DIRECTIONS: [&str; 4] = ["left", "right", "up", "down"];
pub const PREDICATES: [&str; 4] = ["above", "below", "left-of", "right-of"];
pub const CELL_PIXELS: f64 = 16.0;
pub const APPEARANCE_DIM: usize = 16;
pub const MOTION_DIM: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorSpec {
    pub num_videos: usize,
    pub frames_per_video: usize,
    pub grid_side: usize,
    pub channels: usize,
    pub object_size: usize,
    pub captions_per_video: usize,
    pub shape_classes: Vec<String>,
    pub color_classes: Vec<String>,
    /// Caption templates. Placeholders: `{color}`, `{shape}`, `{alt}` (a
    /// synonym of the actor shape), `{dir}`, `{color2}`, `{shape2}`.
    pub motion_templates: Vec<String>,
    /// `member -> canonical` synonym pairs for shape nouns.
    pub shape_synonyms: Vec<(String, String)>,
    pub cell_noise: f64,
    pub context_noise: f64,
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        Self {
            num_videos: 64,
            frames_per_video: 12,
            grid_side: 6,
            channels: 16,
            object_size: 2,
            captions_per_video: 2,
            shape_classes: s(&["square", "circle", "triangle", "cross"]),
            color_classes: s(&["red", "green", "blue", "yellow"]),
            motion_templates: s(&[
                "a {color} {shape} moves {dir} near a {color2} {shape2}",
                "the {color} {alt} moves {dir}",
                "a {shape2} sees the {shape} move {dir}",
            ]),
            shape_synonyms: vec![
                ("box".into(), "square".into()),
                ("ball".into(), "circle".into()),
                ("wedge".into(), "triangle".into()),
                ("plus".into(), "cross".into()),
            ],
            cell_noise: 0.1,
            context_noise: 0.2,
            seed: 7,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.shape_classes.is_empty() {
            return Err(Error::validation("generator needs at least one shape class"));
        }
        if self.shape_classes.len() < 2 {
            return Err(Error::validation(
                "generator needs two shape classes (actor and landmark differ)",
            ));
        }
        if self.color_classes.is_empty() {
            return Err(Error::validation("generator needs at least one colour class"));
        }
        if self.motion_templates.is_empty() {
            return Err(Error::validation("generator needs at least one caption template"));
        }
        for (name, v) in [
            ("num_videos", self.num_videos),
            ("frames_per_video", self.frames_per_video),
            ("grid_side", self.grid_side),
            ("channels", self.channels),
            ("object_size", self.object_size),
            ("captions_per_video", self.captions_per_video),
        ] {
            if v == 0 {
                return Err(Error::validation(format!("{name} must be at least 1")));
            }
        }
        if self.object_size > self.grid_side {
            return Err(Error::validation("object_size exceeds grid_side"));
        }
        Ok(())
    }

    fn alt_name<'a>(&'a self, shape: &'a str) -> &'a str {
        self.shape_synonyms
            .iter()
            .find(|(_, canon)| canon == shape)
            .map_or(shape, |(member, _)| member.as_str())
    }
}

#[derive(Clone, Copy, Debug)]
struct Placement {
    x: usize,
    y: usize,
}

struct Scene {
    actor_shape: usize,
    actor_color: usize,
    land_shape: usize,
    land_color: usize,
    direction: usize,
    actor_path: Vec<Placement>,
    landmark: Placement,
}

/// Generates all records in memory.
pub fn generate(spec: &GeneratorSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.channels;
    let code_std = 1.0 / (d as f64).sqrt() * 2.0;
    let shape_codes = Mat::random_normal(spec.shape_classes.len(), d, code_std, &mut rng);
    let color_codes = Mat::random_normal(spec.color_classes.len(), d, code_std * 0.75, &mut rng);
    let ncol = spec.color_classes.len();
    let appearance_proj = Mat::random_normal(2 * ncol, APPEARANCE_DIM, 1.0, &mut rng);
    let motion_proj = Mat::random_normal(DIRECTIONS.len(), MOTION_DIM, 1.0, &mut rng);

    let mut videos = Vec::with_capacity(spec.num_videos);
    for vi in 0..spec.num_videos {
        let scene = sample_scene(spec, &mut rng);
        videos.push(render(
            spec,
            &scene,
            format!("video{vi:04}"),
            &shape_codes,
            &color_codes,
            &appearance_proj,
            &motion_proj,
            &mut rng,
        )?);
    }

    let mut lexicon: Vec<String> = spec.shape_classes.clone();
    for (member, _) in &spec.shape_synonyms {
        if !lexicon.contains(member) {
            lexicon.push(member.clone());
        }
    }
    Ok(Corpus {
        dir: Default::default(),
        videos,
        scene_classes: SceneClasses {
            objects: spec.shape_classes.clone(),
            predicates: PREDICATES.iter().map(|s| s.to_string()).collect(),
        },
        lexicon,
        synonyms: spec.shape_synonyms.clone(),
    })
}

/// Generates a corpus and writes it under `dir`.
pub fn generate_corpus(spec: &GeneratorSpec, dir: &Path) -> Result<Corpus> {
    let mut corpus = generate(spec)?;
    corpus.write(dir)?;
    corpus.dir = dir.to_path_buf();
    Ok(corpus)
}

fn sample_scene(spec: &GeneratorSpec, rng: &mut ChaCha8Rng) -> Scene {
    let nshape = spec.shape_classes.len();
    let actor_shape = rng.random_range(0..nshape);
    let land_shape = (actor_shape + rng.random_range(1..nshape)) % nshape;
    let actor_color = rng.random_range(0..spec.color_classes.len());
    let land_color = rng.random_range(0..spec.color_classes.len());
    let direction = rng.random_range(0..DIRECTIONS.len());

    let span = spec.grid_side - spec.object_size;
    let cross = rng.random_range(0..=span);
    let frames = spec.frames_per_video;
    let actor_path: Vec<Placement> = (0..frames)
        .map(|t| {
            let progress = if frames > 1 { t * span / (frames - 1) } else { 0 };
            match DIRECTIONS[direction] {
                "left" => Placement { x: span - progress, y: cross },
                "right" => Placement { x: progress, y: cross },
                "up" => Placement { x: cross, y: span - progress },
                _ => Placement { x: cross, y: progress },
            }
        })
        .collect();

    let size = spec.object_size;
    let mut free = Vec::new();
    for y in 0..=span {
        for x in 0..=span {
            let p = Placement { x, y };
            if actor_path.iter().all(|a| !overlaps(*a, p, size)) {
                free.push(p);
            }
        }
    }
    let landmark = match free.choose(rng) {
        Some(p) => *p,
        None => Placement {
            x: rng.random_range(0..=span),
            y: rng.random_range(0..=span),
        },
    };
    Scene {
        actor_shape,
        actor_color,
        land_shape,
        land_color,
        direction,
        actor_path,
        landmark,
    }
}

fn overlaps(a: Placement, b: Placement, size: usize) -> bool {
    a.x < b.x + size && b.x < a.x + size && a.y < b.y + size && b.y < a.y + size
}

fn cells_of(p: Placement, size: usize, side: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(size * size);
    for y in p.y..p.y + size {
        for x in p.x..p.x + size {
            out.push(y * side + x);
        }
    }
    out
}

fn bbox(p: Placement, size: usize) -> [f64; 4] {
    [
        p.x as f64 * CELL_PIXELS,
        p.y as f64 * CELL_PIXELS,
        (p.x + size) as f64 * CELL_PIXELS,
        (p.y + size) as f64 * CELL_PIXELS,
    ]
}

fn relation(actor: Placement, landmark: Placement) -> (&'static str, &'static str) {
    let dx = actor.x as i64 - landmark.x as i64;
    let dy = actor.y as i64 - landmark.y as i64;
    if dx.abs() >= dy.abs() {
        if dx < 0 {
            ("left-of", "right-of")
        } else {
            ("right-of", "left-of")
        }
    } else if dy < 0 {
        ("above", "below")
    } else {
        ("below", "above")
    }
}

fn fill_template(spec: &GeneratorSpec, template: &str, scene: &Scene) -> String {
    let shape = &spec.shape_classes[scene.actor_shape];
    template
        .replace("{color2}", &spec.color_classes[scene.land_color])
        .replace("{shape2}", &spec.shape_classes[scene.land_shape])
        .replace("{color}", &spec.color_classes[scene.actor_color])
        .replace("{shape}", shape)
        .replace("{alt}", spec.alt_name(shape))
        .replace("{dir}", DIRECTIONS[scene.direction])
}

fn gaussian_noise(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    Mat::random_normal(1, n, std, rng).into_vec()
}

#[allow(clippy::too_many_arguments)]
fn render(
    spec: &GeneratorSpec,
    scene: &Scene,
    id: String,
    shape_codes: &Mat,
    color_codes: &Mat,
    appearance_proj: &Mat,
    motion_proj: &Mat,
    rng: &mut ChaCha8Rng,
) -> Result<VideoRecord> {
    let side = spec.grid_side;
    let d = spec.channels;
    let size = spec.object_size;
    let captions: Vec<String> = (0..spec.captions_per_video)
        .map(|k| {
            let t = &spec.motion_templates[k % spec.motion_templates.len()];
            fill_template(spec, t, scene)
        })
        .collect();

    let canon = |tok: &str| -> String {
        spec.shape_synonyms
            .iter()
            .find(|(m, _)| m == tok)
            .map_or_else(|| tok.to_string(), |(_, c)| c.clone())
    };
    let mentioned: Vec<String> = captions
        .iter()
        .flat_map(|c| c.split_whitespace().map(canon).collect::<Vec<_>>())
        .filter(|t| spec.shape_classes.contains(t))
        .collect();
    let actor_name = &spec.shape_classes[scene.actor_shape];
    let land_name = &spec.shape_classes[scene.land_shape];

    let ncol = spec.color_classes.len();
    let mut appearance_onehot = Mat::zeros(1, 2 * ncol);
    appearance_onehot.set(0, scene.actor_color, 1.0);
    appearance_onehot.set(0, ncol + scene.land_color, 1.0);
    let appearance_base = appearance_onehot.matmul(appearance_proj);
    let mut motion_onehot = Mat::zeros(1, DIRECTIONS.len());
    motion_onehot.set(0, scene.direction, 1.0);
    let motion_base = motion_onehot.matmul(motion_proj);

    let mut frames = Vec::with_capacity(spec.frames_per_video);
    let mut appearance = Mat::zeros(spec.frames_per_video, APPEARANCE_DIM);
    let mut motion = Mat::zeros(spec.frames_per_video, MOTION_DIM);
    let mut scene_graphs = Vec::with_capacity(spec.frames_per_video);
    let mut regions = Vec::with_capacity(spec.frames_per_video);

    for (t, &actor) in scene.actor_path.iter().enumerate() {
        let noise = gaussian_noise(rng, side * side * d, spec.cell_noise);
        let mut cells = Mat::from_vec(side * side, d, noise);
        let objects = [
            (actor, scene.actor_shape, scene.actor_color),
            (scene.landmark, scene.land_shape, scene.land_color),
        ];
        for (p, s, c) in objects {
            for cell in cells_of(p, size, side) {
                let row = cells.row_mut(cell);
                for (k, v) in row.iter_mut().enumerate() {
                    *v += shape_codes.get(s, k) + color_codes.get(c, k);
                }
            }
        }
        frames.push(FeatureGrid::new(side, side, cells)?);

        let an = gaussian_noise(rng, APPEARANCE_DIM, spec.context_noise);
        for (k, v) in an.iter().enumerate() {
            appearance.set(t, k, appearance_base.get(0, k) + v);
        }
        let mn = gaussian_noise(rng, MOTION_DIM, spec.context_noise);
        for (k, v) in mn.iter().enumerate() {
            motion.set(t, k, motion_base.get(0, k) + v);
        }

        let (rel, inv) = relation(actor, scene.landmark);
        scene_graphs.push(FrameSceneGraph {
            frame: t,
            objects: vec![
                SceneObject {
                    id: 0,
                    class: actor_name.clone(),
                    bbox: bbox(actor, size),
                },
                SceneObject {
                    id: 1,
                    class: land_name.clone(),
                    bbox: bbox(scene.landmark, size),
                },
            ],
            triplets: vec![
                SceneTriplet {
                    subj: 0,
                    pred: rel.into(),
                    obj: 1,
                },
                SceneTriplet {
                    subj: 1,
                    pred: inv.into(),
                    obj: 0,
                },
            ],
        });

        let mut fr = FrameRegions {
            frame: t,
            regions: BTreeMap::new(),
        };
        for (p, name) in [(actor, actor_name), (scene.landmark, land_name)] {
            if mentioned.contains(name) {
                let entry = fr.regions.entry(name.clone()).or_default();
                entry.extend(cells_of(p, size, side));
                entry.sort_unstable();
                entry.dedup();
            }
        }
        regions.push(fr);
    }

    let mut context = BTreeMap::new();
    context.insert("appearance".to_string(), appearance);
    context.insert("motion".to_string(), motion);
    let record = VideoRecord {
        id,
        frames,
        context,
        captions,
        scene_graphs,
        gt_regions: Some(regions),
    };
    record.validate()?;
    Ok(record)
}
