//! Frame-level and video-level scene graphs and their encoders.
//!
//! A frame graph holds one node per object instance and one per predicate
//! of each triplet, with edges `subj - pred - obj`. The video graph joins
//! the frame graphs and links objects of adjacent frames that look alike
//! (cosine of embedded features) and overlap (box IoU).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::datagen::{FrameSceneGraph, SceneClasses};
use crate::error::{Error, Result};
use crate::nn::{attention_mask, sinusoidal_positions, GatStack, TransformerLayer};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub node_dim: usize,
    pub gat_hidden: usize,
    pub gat_heads: usize,
    pub out_dim: usize,
    pub transformer_heads: usize,
    pub transformer_ffn: usize,
    pub tau_cos: f64,
    pub tau_iou: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            node_dim: 256,
            gat_hidden: 8,
            gat_heads: 8,
            out_dim: 256,
            transformer_heads: 4,
            transformer_ffn: 512,
            tau_cos: 0.9,
            tau_iou: 0.5,
        }
    }
}

fn check_box(b: &[f64; 4]) -> Result<()> {
    if !(b.iter().all(|v| v.is_finite()) && b[0] < b[2] && b[1] < b[3]) {
        return Err(Error::validation(format!("degenerate box {b:?}")));
    }
    Ok(())
}

/// Intersection over union of two `[x1, y1, x2, y2]` boxes.
pub fn iou(a: &[f64; 4], b: &[f64; 4]) -> Result<f64> {
    check_box(a)?;
    check_box(b)?;
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = w * h;
    let area = |r: &[f64; 4]| (r[2] - r[0]) * (r[3] - r[1]);
    Ok(inter / (area(a) + area(b) - inter))
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum GraphNode {
    Object { id: u32, class: usize, bbox: [f64; 4] },
    Predicate { class: usize },
}

impl GraphNode {
    /// Index into the joint one-hot space (objects, then predicates).
    pub fn one_hot(&self, classes: &SceneClasses) -> usize {
        match self {
            GraphNode::Object { class, .. } => *class,
            GraphNode::Predicate { class } => classes.objects.len() + class,
        }
    }

    pub fn is_object(&self) -> bool {
        matches!(self, GraphNode::Object { .. })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameGraph {
    pub frame: usize,
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<(usize, usize)>,
}

/// Object nodes in declaration order, then one predicate node per triplet.
pub fn build_frame_graph(g: &FrameSceneGraph, classes: &SceneClasses) -> Result<FrameGraph> {
    g.validate()?;
    let mut nodes = Vec::with_capacity(g.objects.len() + g.triplets.len());
    for o in &g.objects {
        check_box(&o.bbox)?;
        nodes.push(GraphNode::Object {
            id: o.id,
            class: classes.object_id(&o.class)?,
            bbox: o.bbox,
        });
    }
    let node_of = |id: u32| -> Result<usize> {
        g.objects.iter().position(|o| o.id == id).ok_or_else(|| {
            Error::validation(format!("frame {}: triplet references unknown object {id}", g.frame))
        })
    };
    let mut edges = Vec::with_capacity(2 * g.triplets.len());
    for tr in &g.triplets {
        let s = node_of(tr.subj)?;
        let o = node_of(tr.obj)?;
        let p = nodes.len();
        nodes.push(GraphNode::Predicate {
            class: classes.predicate_id(&tr.pred)?,
        });
        edges.push((s, p));
        edges.push((p, o));
    }
    Ok(FrameGraph {
        frame: g.frame,
        nodes,
        edges,
    })
}

impl FrameGraph {
    /// The same frame with predicate nodes and their edges removed.
    pub fn without_predicates(&self) -> FrameGraph {
        let nodes: Vec<GraphNode> = self.nodes.iter().filter(|n| n.is_object()).cloned().collect();
        FrameGraph {
            frame: self.frame,
            nodes,
            edges: Vec::new(),
        }
    }

    pub fn num_predicates(&self) -> usize {
        self.nodes.iter().filter(|n| !n.is_object()).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoGraph {
    pub nodes: Vec<GraphNode>,
    /// Start of each frame's nodes in `nodes`.
    pub offsets: Vec<usize>,
    /// Frame edges shifted by their offsets, then inter-frame links.
    pub edges: Vec<(usize, usize)>,
    pub links: Vec<(usize, usize)>,
}

/// Unions the frame graphs and links object `u` of frame `t` to object `w`
/// of frame `t + 1` when `cos(f_u, f_w) >= tau_cos` and
/// `iou(box_u, box_w) >= tau_iou`. `features` has one row per node in
/// concatenated frame order.
pub fn build_video_graph(
    frames: &[FrameGraph],
    features: &Mat,
    tau_cos: f64,
    tau_iou: f64,
) -> Result<VideoGraph> {
    let mut nodes = Vec::new();
    let mut offsets = Vec::with_capacity(frames.len());
    let mut edges = Vec::new();
    for f in frames {
        let off = nodes.len();
        offsets.push(off);
        nodes.extend(f.nodes.iter().cloned());
        edges.extend(f.edges.iter().map(|&(a, b)| (a + off, b + off)));
    }
    if features.rows() != nodes.len() {
        return Err(Error::validation(format!(
            "{} feature rows for {} nodes",
            features.rows(),
            nodes.len()
        )));
    }
    let mut links = Vec::new();
    for t in 0..frames.len().saturating_sub(1) {
        let (oa, ob) = (offsets[t], offsets[t + 1]);
        for (i, u) in frames[t].nodes.iter().enumerate() {
            let GraphNode::Object { bbox: bu, .. } = u else { continue };
            for (j, w) in frames[t + 1].nodes.iter().enumerate() {
                let GraphNode::Object { bbox: bw, .. } = w else { continue };
                if cosine(features.row(oa + i), features.row(ob + j)) >= tau_cos
                    && iou(bu, bw)? >= tau_iou
                {
                    links.push((oa + i, ob + j));
                }
            }
        }
    }
    edges.extend(links.iter().copied());
    Ok(VideoGraph {
        nodes,
        offsets,
        edges,
        links,
    })
}

/// Which parts of `R_obj` are produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SceneParts {
    pub frame: bool,
    pub video: bool,
    /// Drop predicate nodes from the video graph.
    pub video_without_predicates: bool,
}

#[derive(Clone, Debug)]
pub struct SceneEncoder {
    pub config: SceneConfig,
    pub classes: SceneClasses,
    pub embed: ParamId,
    pub embed_bias: ParamId,
    pub frame_gat: GatStack,
    pub temporal: TransformerLayer,
    pub video_gat: GatStack,
}

impl SceneEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        classes: SceneClasses,
        config: SceneConfig,
        rng: &mut R,
    ) -> Self {
        let c = &config;
        let embed = store.add(format!("{name}.embed"), Mat::xavier(classes.total(), c.node_dim, rng));
        let embed_bias = store.add(format!("{name}.embed_bias"), Mat::zeros(1, c.node_dim));
        let frame_gat = GatStack::new(
            store,
            &format!("{name}.frame_gat"),
            c.node_dim,
            c.gat_hidden,
            c.gat_heads,
            c.out_dim,
            rng,
        );
        let temporal = TransformerLayer::new(
            store,
            &format!("{name}.temporal"),
            c.out_dim,
            c.transformer_heads,
            c.transformer_ffn,
            rng,
        );
        let video_gat = GatStack::new(
            store,
            &format!("{name}.video_gat"),
            c.node_dim,
            c.gat_hidden,
            c.gat_heads,
            c.out_dim,
            rng,
        );
        Self {
            config,
            classes,
            embed,
            embed_bias,
            frame_gat,
            temporal,
            video_gat,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.config.out_dim
    }

    /// One-hot class through the linear embedding, one row per node.
    pub fn embed_nodes(&self, t: &mut Tape, nodes: &[GraphNode]) -> Var {
        let idx: Vec<usize> = nodes.iter().map(|n| n.one_hot(&self.classes)).collect();
        let e = t.param(self.embed);
        let b = t.param(self.embed_bias);
        let rows = t.gather_rows(e, &idx);
        t.add_row(rows, b)
    }

    /// Per-frame node-mean of the frame GAT, one row per non-empty frame.
    pub fn frame_features(&self, t: &mut Tape, frames: &[FrameGraph]) -> Option<Var> {
        let mut rows = Vec::with_capacity(frames.len());
        for f in frames.iter().filter(|f| !f.nodes.is_empty()) {
            let x = self.embed_nodes(t, &f.nodes);
            let mask = attention_mask(f.nodes.len(), &f.edges);
            let h = self.frame_gat.forward(t, x, &mask);
            rows.push(t.mean_rows(h));
        }
        if rows.is_empty() {
            None
        } else {
            Some(t.concat_rows(&rows))
        }
    }

    /// `R_Gf`: frame features with positions through the temporal layer,
    /// averaged over time.
    pub fn encode_frames(&self, t: &mut Tape, frames: &[FrameGraph]) -> Var {
        match self.frame_features(t, frames) {
            None => t.constant(Mat::zeros(1, self.out_dim())),
            Some(seq) => {
                let (n, d) = t.shape(seq);
                let pos = t.constant(sinusoidal_positions(n, d));
                let x = t.add(seq, pos);
                let y = self.temporal.forward(t, x);
                t.mean_rows(y)
            }
        }
    }

    pub fn video_graph(&self, frames: &[FrameGraph], features: &Mat) -> Result<VideoGraph> {
        build_video_graph(frames, features, self.config.tau_cos, self.config.tau_iou)
    }

    /// `R_Gv`: node mean of the video GAT.
    pub fn encode_video(&self, t: &mut Tape, frames: &[FrameGraph]) -> Result<Var> {
        let nodes: Vec<GraphNode> = frames.iter().flat_map(|f| f.nodes.iter().cloned()).collect();
        if nodes.is_empty() {
            return Ok(t.constant(Mat::zeros(1, self.out_dim())));
        }
        let x = self.embed_nodes(t, &nodes);
        let graph = self.video_graph(frames, t.value(x))?;
        let mask = attention_mask(nodes.len(), &graph.edges);
        let h = self.video_gat.forward(t, x, &mask);
        Ok(t.mean_rows(h))
    }

    /// `R_obj = [R_Gf, R_Gv]` restricted to the enabled parts; `None` when
    /// both are disabled.
    pub fn encode(&self, t: &mut Tape, frames: &[FrameGraph], parts: SceneParts) -> Result<Option<Var>> {
        let mut out = Vec::new();
        if parts.frame {
            out.push(self.encode_frames(t, frames));
        }
        if parts.video {
            let r = if parts.video_without_predicates {
                let stripped: Vec<FrameGraph> = frames.iter().map(|f| f.without_predicates()).collect();
                self.encode_video(t, &stripped)?
            } else {
                self.encode_video(t, frames)?
            };
            out.push(r);
        }
        Ok(match out.len() {
            0 => None,
            1 => Some(out[0]),
            _ => Some(t.concat_cols(&out)),
        })
    }
}
