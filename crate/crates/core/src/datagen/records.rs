//! In-memory video records and their on-disk form.
//!
//! A corpus directory holds `manifest.json`, one folder per video with its
//! CMGF feature files, scene-graph JSON Lines and ground-truth regions, and
//! three small side files: `lexicon.txt` (object nouns), `synonyms.tsv`
//! (`member<TAB>canonical`) and `scene_classes.json` (object and predicate
//! class spaces).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cmgf::FeatureTensor;
use crate::error::{read_text, write_file, Error, Result};
use crate::tensor::Mat;

/// A `height x width` grid of feature cells, stored row-major as a
/// `cells x channels` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    height: usize,
    width: usize,
    cells: Mat,
}

impl FeatureGrid {
    pub fn new(height: usize, width: usize, cells: Mat) -> Result<Self> {
        if height == 0 || width == 0 || cells.cols() == 0 {
            return Err(Error::validation("feature grid needs at least one cell and channel"));
        }
        if cells.rows() != height * width {
            return Err(Error::validation(format!(
                "grid {height}x{width} needs {} cell rows, got {}",
                height * width,
                cells.rows()
            )));
        }
        if !cells.is_finite() {
            return Err(Error::Numeric("feature grid contains non-finite values".into()));
        }
        Ok(Self {
            height,
            width,
            cells,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_cells(&self) -> usize {
        self.height * self.width
    }

    pub fn channels(&self) -> usize {
        self.cells.cols()
    }

    pub fn cells(&self) -> &Mat {
        &self.cells
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: u32,
    pub class: String,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneTriplet {
    pub subj: u32,
    pub pred: String,
    pub obj: u32,
}

/// One line of a scene-graph JSON Lines file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameSceneGraph {
    pub frame: usize,
    pub objects: Vec<SceneObject>,
    pub triplets: Vec<SceneTriplet>,
}

impl FrameSceneGraph {
    pub fn object(&self, id: u32) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, o) in self.objects.iter().enumerate() {
            if self.objects[..i].iter().any(|p| p.id == o.id) {
                return Err(Error::validation(format!(
                    "frame {}: duplicate object id {}",
                    self.frame, o.id
                )));
            }
        }
        for t in &self.triplets {
            for id in [t.subj, t.obj] {
                if self.object(id).is_none() {
                    return Err(Error::validation(format!(
                        "frame {}: triplet references undeclared object {id}",
                        self.frame
                    )));
                }
            }
            if t.subj == t.obj {
                return Err(Error::validation(format!(
                    "frame {}: triplet relates object {} to itself",
                    self.frame, t.subj
                )));
            }
        }
        Ok(())
    }
}

pub fn parse_scene_graph_line(line: &str) -> Result<FrameSceneGraph> {
    let g: FrameSceneGraph =
        serde_json::from_str(line).map_err(|e| Error::parse("scene graph line", e))?;
    g.validate()?;
    Ok(g)
}

/// Parses a JSON Lines document; blank lines are skipped.
pub fn parse_scene_graphs(text: &str) -> Result<Vec<FrameSceneGraph>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            parse_scene_graph_line(l).map_err(|e| match e {
                Error::Parse { message, .. } => {
                    Error::parse(format!("scene graph line {}", n + 1), message)
                }
                other => other,
            })
        })
        .collect()
}

pub fn scene_graphs_to_jsonl(graphs: &[FrameSceneGraph]) -> String {
    let mut out = String::new();
    for g in graphs {
        out.push_str(&serde_json::to_string(g).expect("scene graph serialises"));
        out.push('\n');
    }
    out
}

/// Per-frame ground-truth regions: class name to the cell indices it covers.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameRegions {
    pub frame: usize,
    pub regions: BTreeMap<String, Vec<usize>>,
}

/// Object and predicate class spaces for scene-graph node encoding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneClasses {
    pub objects: Vec<String>,
    pub predicates: Vec<String>,
}

impl SceneClasses {
    pub fn object_id(&self, class: &str) -> Result<usize> {
        self.objects
            .iter()
            .position(|c| c == class)
            .ok_or_else(|| Error::validation(format!("unknown object class `{class}`")))
    }

    pub fn predicate_id(&self, pred: &str) -> Result<usize> {
        self.predicates
            .iter()
            .position(|c| c == pred)
            .ok_or_else(|| Error::validation(format!("unknown predicate `{pred}`")))
    }

    /// Size of the joint one-hot space: objects first, then predicates.
    pub fn total(&self) -> usize {
        self.objects.len() + self.predicates.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoRecord {
    pub id: String,
    pub frames: Vec<FeatureGrid>,
    /// Stream name to a `frames x dim` matrix.
    pub context: BTreeMap<String, Mat>,
    /// Raw caption strings.
    pub captions: Vec<String>,
    /// One entry per frame, in frame order.
    pub scene_graphs: Vec<FrameSceneGraph>,
    pub gt_regions: Option<Vec<FrameRegions>>,
}

impl VideoRecord {
    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::validation(format!("video {} has no frames", self.id)));
        }
        if self.captions.iter().any(|c| c.trim().is_empty()) {
            return Err(Error::validation(format!("video {} has an empty caption", self.id)));
        }
        let (h, w, d) = (
            self.frames[0].height(),
            self.frames[0].width(),
            self.frames[0].channels(),
        );
        if self
            .frames
            .iter()
            .any(|f| (f.height(), f.width(), f.channels()) != (h, w, d))
        {
            return Err(Error::validation(format!(
                "video {} mixes frame grid shapes",
                self.id
            )));
        }
        for (name, m) in &self.context {
            if m.rows() != self.frames.len() {
                return Err(Error::validation(format!(
                    "video {}: context stream `{name}` has {} rows for {} frames",
                    self.id,
                    m.rows(),
                    self.frames.len()
                )));
            }
        }
        for g in &self.scene_graphs {
            g.validate()?;
        }
        Ok(())
    }

    pub fn grid_shape(&self) -> (usize, usize, usize) {
        let f = &self.frames[0];
        (f.height(), f.width(), f.channels())
    }

    /// Scene graph for a frame index, if one was recorded.
    pub fn scene_graph(&self, frame: usize) -> Option<&FrameSceneGraph> {
        self.scene_graphs.iter().find(|g| g.frame == frame)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub videos: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub captions: Vec<String>,
    pub frames: String,
    pub context: BTreeMap<String, String>,
    pub scene_graphs: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_regions: Option<String>,
}

pub fn parse_manifest(text: &str) -> Result<Manifest> {
    let m: Manifest = serde_json::from_str(text).map_err(|e| Error::parse("manifest", e))?;
    for v in &m.videos {
        if v.id.is_empty() || v.id.contains(['/', '\\']) || v.id.starts_with('.') {
            return Err(Error::validation(format!("invalid video id `{}`", v.id)));
        }
    }
    Ok(m)
}

/// A loaded corpus directory.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub dir: PathBuf,
    pub videos: Vec<VideoRecord>,
    pub scene_classes: SceneClasses,
    pub lexicon: Vec<String>,
    pub synonyms: Vec<(String, String)>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LEXICON_FILE: &str = "lexicon.txt";
pub const SYNONYM_FILE: &str = "synonyms.tsv";
pub const SCENE_CLASSES_FILE: &str = "scene_classes.json";

impl Corpus {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = parse_manifest(&read_text(&dir.join(MANIFEST_FILE))?)?;
        let mut videos = Vec::with_capacity(manifest.videos.len());
        for entry in &manifest.videos {
            videos.push(load_video(dir, entry)?);
        }
        let scene_classes: SceneClasses =
            serde_json::from_str(&read_text(&dir.join(SCENE_CLASSES_FILE))?)
                .map_err(|e| Error::parse(SCENE_CLASSES_FILE, e))?;
        let lexicon = crate::corpus::parse_lexicon(&read_text(&dir.join(LEXICON_FILE))?);
        let synonyms = crate::corpus::parse_synonym_table(&read_text(&dir.join(SYNONYM_FILE))?)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            videos,
            scene_classes,
            lexicon,
            synonyms,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut manifest = Manifest::default();
        for v in &self.videos {
            manifest.videos.push(write_video(dir, v)?);
        }
        write_file(
            &dir.join(MANIFEST_FILE),
            serde_json::to_string_pretty(&manifest).expect("manifest serialises"),
        )?;
        write_file(
            &dir.join(SCENE_CLASSES_FILE),
            serde_json::to_string_pretty(&self.scene_classes).expect("classes serialise"),
        )?;
        let mut lex = self.lexicon.join("\n");
        lex.push('\n');
        write_file(&dir.join(LEXICON_FILE), lex)?;
        write_file(
            &dir.join(SYNONYM_FILE),
            crate::corpus::format_synonym_table(&self.synonyms),
        )
    }

    pub fn video(&self, id: &str) -> Option<&VideoRecord> {
        self.videos.iter().find(|v| v.id == id)
    }

    /// Deterministic train/held-out split: the last `fraction` of videos
    /// (at least one when `fraction > 0` and there are two or more videos)
    /// are held out.
    pub fn split(&self, fraction: f64) -> (Vec<usize>, Vec<usize>) {
        let n = self.videos.len();
        let mut held = ((n as f64) * fraction).round() as usize;
        if fraction > 0.0 && n >= 2 {
            held = held.max(1);
        }
        held = held.min(n.saturating_sub(1));
        ((0..n - held).collect(), (n - held..n).collect())
    }
}

fn load_video(dir: &Path, entry: &ManifestEntry) -> Result<VideoRecord> {
    let frames_t = FeatureTensor::read(&dir.join(&entry.frames))?;
    let dims = frames_t.dims();
    if dims.len() != 4 {
        return Err(Error::validation(format!(
            "{}: frames tensor must be rank 4 (frames, height, width, channels), got {dims:?}",
            entry.frames
        )));
    }
    let (f, h, w, d) = (dims[0], dims[1], dims[2], dims[3]);
    let per = h * w * d;
    let mut frames = Vec::with_capacity(f);
    for i in 0..f {
        let data = frames_t.data()[i * per..(i + 1) * per]
            .iter()
            .map(|&v| v as f64)
            .collect();
        frames.push(FeatureGrid::new(h, w, Mat::from_vec(h * w, d, data))?);
    }
    let mut context = BTreeMap::new();
    for (name, path) in &entry.context {
        let t = FeatureTensor::read(&dir.join(path))?;
        let dims = t.dims();
        if dims.len() != 2 {
            return Err(Error::validation(format!(
                "{path}: context tensor must be rank 2, got {dims:?}"
            )));
        }
        context.insert(name.clone(), t.to_mat(dims[0], dims[1])?);
    }
    let scene_graphs = parse_scene_graphs(&read_text(&dir.join(&entry.scene_graphs))?)?;
    let gt_regions = match &entry.gt_regions {
        Some(p) => Some(
            serde_json::from_str(&read_text(&dir.join(p))?)
                .map_err(|e| Error::parse(p.clone(), e))?,
        ),
        None => None,
    };
    let record = VideoRecord {
        id: entry.id.clone(),
        frames,
        context,
        captions: entry.captions.clone(),
        scene_graphs,
        gt_regions,
    };
    record.validate()?;
    Ok(record)
}

fn write_video(dir: &Path, v: &VideoRecord) -> Result<ManifestEntry> {
    let base = format!("videos/{}", v.id);
    let (h, w, d) = v.grid_shape();
    let mut data = Vec::with_capacity(v.frames.len() * h * w * d);
    for f in &v.frames {
        data.extend(f.cells().data().iter().map(|&x| x as f32));
    }
    let frames_path = format!("{base}/frames.cmgf");
    FeatureTensor::new(vec![v.frames.len(), h, w, d], data)?.write(&dir.join(&frames_path))?;

    let mut context = BTreeMap::new();
    for (name, m) in &v.context {
        let p = format!("{base}/context_{name}.cmgf");
        FeatureTensor::from_mat(m).write(&dir.join(&p))?;
        context.insert(name.clone(), p);
    }
    let sg_path = format!("{base}/scene_graphs.jsonl");
    write_file(&dir.join(&sg_path), scene_graphs_to_jsonl(&v.scene_graphs))?;
    let gt_path = match &v.gt_regions {
        Some(regions) => {
            let p = format!("{base}/gt_regions.json");
            write_file(
                &dir.join(&p),
                serde_json::to_string(regions).expect("regions serialise"),
            )?;
            Some(p)
        }
        None => None,
    };
    Ok(ManifestEntry {
        id: v.id.clone(),
        captions: v.captions.clone(),
        frames: frames_path,
        context,
        scene_graphs: sg_path,
        gt_regions: gt_path,
    })
}
