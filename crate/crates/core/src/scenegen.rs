//! Synthetic multi-object scenes and the task instances derived from them.
//!
//! A scene is a unit square split into a `G x G` patch grid with up to
//! `M_max` labelled boxes. Everything here is a pure function of
//! `(seed, GenSpec)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vocab::{BBox, TokenId, VocabError, Vocabulary, BOS_ID, PAD_ID};

pub const CLASS_NAMES: [&str; 8] = ["bus", "truck", "car", "ship", "plane", "tank", "crane", "boat"];
pub const ATTRIBUTE_NAMES: [&str; 6] = ["yellow", "white", "red", "blue", "gray", "green"];
/// Scene categories, one per object class (the dominant class drives the draw).
pub const SCENE_NAMES: [&str; 8] =
    ["depot", "freightyard", "parking", "harbor", "airport", "tankfarm", "dockyard", "marina"];
pub const COUNT_WORDS: [&str; 9] = ["one", "two", "three", "four", "five", "six", "seven", "eight", "nine"];
pub const EMPTY_WORD: &str = "empty";
pub const MIXED_WORD: &str = "assorted";

/// Same-class objects never overlap more than this (IoU).
pub const SAME_CLASS_IOU_CAP: f64 = 0.3;
/// Any object may have at most this fraction of its area under another object.
pub const OCCLUSION_CAP: f64 = 0.5;
const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid generation spec: {0}")]
    Spec(String),
    #[error("could not place object {object} after {attempts} attempts (spec over-constrained)")]
    Placement { object: usize, attempts: usize },
    #[error("feature width {d_v} is smaller than the {needed} channels required")]
    FeatureWidth { d_v: usize, needed: usize },
    #[error("grounding referent {0:?} is ambiguous or invalid")]
    Ambiguous(Option<usize>),
    #[error("task mix proportions sum to {0}, expected 1")]
    TaskMix(f64),
    #[error("dataset directory {0} already exists (pass overwrite to replace it)")]
    Exists(String),
    #[error("dataset format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub grid_size: usize,
    pub max_objects: usize,
    pub num_classes: usize,
    pub num_attributes: usize,
    pub min_box: f64,
    pub max_box: f64,
}

impl Default for GenSpec {
    fn default() -> Self {
        Self { grid_size: 8, max_objects: 6, num_classes: 5, num_attributes: 4, min_box: 0.125, max_box: 0.375 }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: String| Err(SceneError::Spec(m));
        if self.grid_size == 0 || self.num_classes == 0 || self.num_attributes == 0 {
            return bad("grid size, class count and attribute count must be positive".into());
        }
        if self.num_classes > CLASS_NAMES.len() || self.num_attributes > ATTRIBUTE_NAMES.len() {
            return bad(format!(
                "at most {} classes and {} attributes are supported",
                CLASS_NAMES.len(),
                ATTRIBUTE_NAMES.len()
            ));
        }
        if self.max_objects > COUNT_WORDS.len() {
            return bad(format!("max_objects above {} has no count word", COUNT_WORDS.len()));
        }
        let cell = 1.0 / self.grid_size as f64;
        if !(self.min_box >= cell - 1e-12 && self.min_box <= self.max_box && self.max_box <= 1.0) {
            return bad(format!(
                "box sizes must satisfy 1/G <= min <= max <= 1 (got {}..{})",
                self.min_box, self.max_box
            ));
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        self.grid_size * self.grid_size
    }

    /// Raw feature channels before zero padding.
    pub fn feature_channels(&self) -> usize {
        self.num_classes + self.num_attributes + 3
    }

    /// The standard vocabulary for scenes of this spec.
    pub fn vocabulary(&self, coord_bins: u32) -> Result<Vocabulary, SceneError> {
        self.validate()?;
        let mut words: Vec<&str> = Task::ALL.iter().map(|t| t.tag()).collect();
        words.extend_from_slice(&COUNT_WORDS[..self.max_objects.max(1)]);
        words.push(EMPTY_WORD);
        words.push(MIXED_WORD);
        words.extend_from_slice(&ATTRIBUTE_NAMES[..self.num_attributes]);
        words.extend_from_slice(&SCENE_NAMES[..self.num_classes]);
        Ok(Vocabulary::build(&CLASS_NAMES[..self.num_classes], &words, coord_bins)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub class_id: usize,
    pub attribute_id: usize,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub grid_size: usize,
    pub scene_class_id: usize,
    pub objects: Vec<SceneObject>,
    pub seed: u64,
}

/// Intersection-over-union of two boxes; 0 when the union is empty.
pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

fn intersection(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    w * h
}

/// SplitMix64 finalizer over `(seed, stream)`, used for per-instance seeds.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn generate_scene(seed: u64, spec: &GenSpec) -> Result<Scene, SceneError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(0..=spec.max_objects);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(n);
    for object in 0..n {
        let class_id = rng.gen_range(0..spec.num_classes);
        let attribute_id = rng.gen_range(0..spec.num_attributes);
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let w = rng.gen_range(spec.min_box..=spec.max_box);
            let h = rng.gen_range(spec.min_box..=spec.max_box);
            let x1 = rng.gen_range(0.0..=1.0 - w);
            let y1 = rng.gen_range(0.0..=1.0 - h);
            let b = BBox { x1, y1, x2: x1 + w, y2: y1 + h };
            let ok = objects.iter().all(|o| {
                let inter = intersection(&o.bbox, &b);
                let occluded = inter > OCCLUSION_CAP * o.bbox.area().min(b.area());
                let same_class_clash = o.class_id == class_id && box_iou(&o.bbox, &b) > SAME_CLASS_IOU_CAP;
                !occluded && !same_class_clash
            });
            if ok {
                placed = Some(b);
                break;
            }
        }
        let bbox = placed.ok_or(SceneError::Placement { object, attempts: MAX_PLACEMENT_ATTEMPTS })?;
        objects.push(SceneObject { class_id, attribute_id, bbox });
    }

    let mut counts = vec![0usize; spec.num_classes];
    for o in &objects {
        counts[o.class_id] += 1;
    }
    // Weight (count^2 + 0.05): the dominant class usually names the scene.
    let weights: Vec<f64> = counts.iter().map(|&c| (c * c) as f64 + 0.05).collect();
    let total: f64 = weights.iter().sum();
    let mut dart = rng.gen::<f64>() * total;
    let mut scene_class_id = spec.num_classes - 1;
    for (k, w) in weights.iter().enumerate() {
        if dart < *w {
            scene_class_id = k;
            break;
        }
        dart -= w;
    }

    Ok(Scene { grid_size: spec.grid_size, scene_class_id, objects, seed })
}

/// Per-cell feature vectors, row-major over the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub grid_size: usize,
    pub d_v: usize,
    pub data: Vec<f32>,
}

impl FeatureGrid {
    pub fn cell(&self, row: usize, col: usize) -> &[f32] {
        let i = (row * self.grid_size + col) * self.d_v;
        &self.data[i..i + self.d_v]
    }

    pub fn n_patches(&self) -> usize {
        self.grid_size * self.grid_size
    }
}

/// Fraction of cell `(row, col)` covered by `b`.
pub fn cell_coverage(b: &BBox, grid_size: usize, row: usize, col: usize) -> f64 {
    let g = grid_size as f64;
    let cell = BBox { x1: col as f64 / g, y1: row as f64 / g, x2: (col + 1) as f64 / g, y2: (row + 1) as f64 / g };
    (intersection(b, &cell) * g * g).clamp(0.0, 1.0)
}

/// Channel layout per cell: class one-hot, attribute one-hot, coverage,
/// (row, col) cell-center position, then zero padding up to `d_v`.
pub fn render_features(scene: &Scene, spec: &GenSpec, d_v: usize) -> Result<FeatureGrid, SceneError> {
    let needed = spec.feature_channels();
    if d_v < needed {
        return Err(SceneError::FeatureWidth { d_v, needed });
    }
    let g = scene.grid_size;
    let mut data = vec![0.0f32; g * g * d_v];
    let cov_ch = spec.num_classes + spec.num_attributes;
    for row in 0..g {
        for col in 0..g {
            let cell = &mut data[(row * g + col) * d_v..][..d_v];
            let mut best: Option<(usize, f64)> = None;
            for (i, o) in scene.objects.iter().enumerate() {
                let c = cell_coverage(&o.bbox, g, row, col);
                if c > 0.0 && best.is_none_or(|(_, bc)| c > bc) {
                    best = Some((i, c));
                }
            }
            if let Some((i, c)) = best {
                let o = &scene.objects[i];
                cell[o.class_id] = 1.0;
                cell[spec.num_classes + o.attribute_id] = 1.0;
                cell[cov_ch] = c as f32;
            }
            cell[cov_ch + 1] = ((row as f64 + 0.5) / g as f64) as f32;
            cell[cov_ch + 2] = ((col as f64 + 0.5) / g as f64) as f32;
        }
    }
    Ok(FeatureGrid { grid_size: g, d_v, data })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Caption,
    Detect,
    Ground,
    Classify,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Caption, Task::Detect, Task::Ground, Task::Classify];

    pub fn tag(self) -> &'static str {
        match self {
            Task::Caption => "caption",
            Task::Detect => "detect",
            Task::Ground => "ground",
            Task::Classify => "classify",
        }
    }

    /// Fixed generated-segment length per task.
    pub fn target_len(self) -> usize {
        match self {
            Task::Caption => 16,
            Task::Detect => 32,
            Task::Ground | Task::Classify => 8,
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(b: u8) -> Option<Self> {
        Task::ALL.get(b as usize).copied()
    }

    pub fn parse(s: &str) -> Option<Self> {
        Task::ALL.into_iter().find(|t| t.tag() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskInstance {
    pub task: Task,
    pub scene: Scene,
    pub prompt_ids: Vec<TokenId>,
    pub target_ids: Vec<TokenId>,
    pub ref_object: Option<usize>,
    /// Set when detection objects did not fit the template and were dropped.
    pub truncated: bool,
}

impl TaskInstance {
    /// Ground-truth (class, box) pairs for detection scoring.
    pub fn truth_objects(&self) -> Vec<(usize, BBox)> {
        self.scene.objects.iter().map(|o| (o.class_id, o.bbox)).collect()
    }
}

fn pad_to(mut ids: Vec<TokenId>, len: usize) -> Vec<TokenId> {
    debug_assert!(ids.len() <= len);
    ids.resize(len, PAD_ID);
    ids
}

fn word(v: &Vocabulary, w: &str) -> Result<TokenId, SceneError> {
    v.lookup(w).ok_or_else(|| VocabError::UnknownWord(w.to_string()).into())
}

/// Objects in canonical detection order: (class_id, x1, y1).
pub fn canonical_order(scene: &Scene) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scene.objects.len()).collect();
    order.sort_by(|&a, &b| {
        let (oa, ob) = (&scene.objects[a], &scene.objects[b]);
        oa.class_id.cmp(&ob.class_id).then(oa.bbox.x1.total_cmp(&ob.bbox.x1)).then(oa.bbox.y1.total_cmp(&ob.bbox.y1))
    });
    order
}

fn referent_is_unique(scene: &Scene, idx: usize) -> bool {
    let Some(r) = scene.objects.get(idx) else { return false };
    scene.objects.iter().filter(|o| o.class_id == r.class_id && o.attribute_id == r.attribute_id).count() == 1
}

pub fn make_target(
    scene: &Scene,
    task: Task,
    v: &Vocabulary,
    ref_object: Option<usize>,
) -> Result<TaskInstance, SceneError> {
    let len = task.target_len();
    let mut prompt = vec![BOS_ID, word(v, task.tag())?];
    let mut truncated = false;
    let target = match task {
        Task::Caption => {
            let mut ids = Vec::new();
            if scene.objects.is_empty() {
                ids.push(word(v, EMPTY_WORD)?);
            }
            let mut classes: Vec<usize> = scene.objects.iter().map(|o| o.class_id).collect();
            classes.sort_unstable();
            classes.dedup();
            for c in classes {
                let group: Vec<_> = scene.objects.iter().filter(|o| o.class_id == c).collect();
                let attr = group[0].attribute_id;
                let attr_word =
                    if group.iter().all(|o| o.attribute_id == attr) { ATTRIBUTE_NAMES[attr] } else { MIXED_WORD };
                ids.push(word(v, COUNT_WORDS[group.len() - 1])?);
                ids.push(word(v, attr_word)?);
                ids.push(v.class_token(c));
            }
            if ids.len() > len {
                return Err(SceneError::Spec(format!("caption needs {} tokens", ids.len())));
            }
            pad_to(ids, len)
        }
        Task::Detect => {
            let mut ids = Vec::with_capacity(len);
            for i in canonical_order(scene) {
                if ids.len() + 5 > len {
                    truncated = true;
                    break;
                }
                let o = &scene.objects[i];
                ids.push(v.class_token(o.class_id));
                ids.extend(v.encode_box(&o.bbox)?);
            }
            pad_to(ids, len)
        }
        Task::Ground => {
            let idx = ref_object.filter(|&i| referent_is_unique(scene, i));
            let Some(idx) = idx else { return Err(SceneError::Ambiguous(ref_object)) };
            let o = &scene.objects[idx];
            prompt.push(word(v, ATTRIBUTE_NAMES[o.attribute_id])?);
            prompt.push(v.class_token(o.class_id));
            pad_to(v.encode_box(&o.bbox)?.to_vec(), len)
        }
        Task::Classify => pad_to(vec![word(v, SCENE_NAMES[scene.scene_class_id])?], len),
    };
    Ok(TaskInstance {
        task,
        scene: scene.clone(),
        prompt_ids: prompt,
        target_ids: target,
        ref_object: if task == Task::Ground { ref_object } else { None },
        truncated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> GenSpec {
        GenSpec::default()
    }

    #[test]
    fn generation_is_pure() {
        let s = spec();
        for seed in [0, 1, 42, u64::MAX] {
            assert_eq!(generate_scene(seed, &s).unwrap(), generate_scene(seed, &s).unwrap());
        }
    }

    #[test]
    fn zero_max_objects_gives_empty_scene() {
        let s = GenSpec { max_objects: 0, ..spec() };
        assert!(generate_scene(3, &s).unwrap().objects.is_empty());
    }

    #[test]
    fn spec_validation() {
        assert!(GenSpec { min_box: 0.05, ..spec() }.validate().is_err());
        assert!(GenSpec { grid_size: 0, ..spec() }.validate().is_err());
        assert!(GenSpec { max_objects: 12, ..spec() }.validate().is_err());
    }

    #[test]
    fn over_constrained_spec_fails_placement() {
        let s = GenSpec { max_objects: 9, num_classes: 1, min_box: 0.9, max_box: 1.0, ..spec() };
        let failed = (0..50).any(|seed| matches!(generate_scene(seed, &s), Err(SceneError::Placement { .. })));
        assert!(failed);
    }

    #[test]
    fn empty_scene_features() {
        let scene = Scene { grid_size: 8, scene_class_id: 0, objects: vec![], seed: 0 };
        let f = render_features(&scene, &spec(), 16).unwrap();
        for r in 0..8 {
            for c in 0..8 {
                let cell = f.cell(r, c);
                assert!(cell[..10].iter().all(|&x| x == 0.0));
                assert_eq!(cell[10], ((r as f64 + 0.5) / 8.0) as f32);
                assert_eq!(cell[11], ((c as f64 + 0.5) / 8.0) as f32);
            }
        }
    }

    #[test]
    fn single_cell_object_coverage() {
        let obj = SceneObject { class_id: 2, attribute_id: 1, bbox: BBox::new(0.0, 0.0, 0.125, 0.125).unwrap() };
        let scene = Scene { grid_size: 8, scene_class_id: 2, objects: vec![obj], seed: 0 };
        let f = render_features(&scene, &spec(), 16).unwrap();
        assert_eq!(f.cell(0, 0)[9], 1.0);
        assert_eq!(f.cell(0, 0)[2], 1.0);
        assert_eq!(f.cell(0, 0)[5 + 1], 1.0);
        for r in 0..8 {
            for c in 0..8 {
                if (r, c) != (0, 0) {
                    assert_eq!(f.cell(r, c)[9], 0.0);
                }
            }
        }
        assert!(matches!(render_features(&scene, &spec(), 8), Err(SceneError::FeatureWidth { .. })));
    }

    #[test]
    fn coverage_sums_match_brute_force_integration() {
        // Midpoint-rule integration over a fine sub-grid of each cell.
        let b = BBox::new(0.13, 0.27, 0.51, 0.6).unwrap();
        let g = 8;
        let sub = 200;
        let mut total_brute = 0.0;
        let mut total = 0.0;
        for r in 0..g {
            for c in 0..g {
                let mut inside = 0usize;
                for i in 0..sub {
                    for j in 0..sub {
                        let x = (c as f64 + (j as f64 + 0.5) / sub as f64) / g as f64;
                        let y = (r as f64 + (i as f64 + 0.5) / sub as f64) / g as f64;
                        if x >= b.x1 && x <= b.x2 && y >= b.y1 && y <= b.y2 {
                            inside += 1;
                        }
                    }
                }
                let brute = inside as f64 / (sub * sub) as f64;
                let exact = cell_coverage(&b, g, r, c);
                assert!((brute - exact).abs() < 0.011, "cell ({r},{c}): {brute} vs {exact}");
                total_brute += brute;
                total += exact;
            }
        }
        let want = b.area() * (g * g) as f64;
        assert!((total - want).abs() < 1e-9);
        assert!((total_brute - want).abs() < 0.02);
    }

    fn obj(class_id: usize, attribute_id: usize, b: (f64, f64, f64, f64)) -> SceneObject {
        SceneObject { class_id, attribute_id, bbox: BBox::new(b.0, b.1, b.2, b.3).unwrap() }
    }

    #[test]
    fn caption_targets() {
        let v = spec().vocabulary(100).unwrap();
        let empty = Scene { grid_size: 8, scene_class_id: 0, objects: vec![], seed: 0 };
        let t = make_target(&empty, Task::Caption, &v, None).unwrap();
        assert_eq!(t.target_ids.len(), 16);
        assert_eq!(t.target_ids[0], v.lookup("empty").unwrap());
        assert!(t.target_ids[1..].iter().all(|&i| i == PAD_ID));
        assert_eq!(t.prompt_ids, vec![BOS_ID, v.lookup("caption").unwrap()]);

        let scene = Scene {
            grid_size: 8,
            scene_class_id: 0,
            objects: vec![
                obj(2, 0, (0.5, 0.5, 0.7, 0.7)),
                obj(0, 1, (0.0, 0.0, 0.2, 0.2)),
                obj(0, 1, (0.3, 0.0, 0.5, 0.2)),
                obj(2, 3, (0.0, 0.6, 0.2, 0.8)),
            ],
            seed: 0,
        };
        let t = make_target(&scene, Task::Caption, &v, None).unwrap();
        let text = v.decode_text(&t.target_ids[..6]).unwrap();
        assert_eq!(text, "two white bus two assorted car");
        assert!(t.target_ids[6..].iter().all(|&i| i == PAD_ID));
    }

    #[test]
    fn ground_single_object() {
        let v = spec().vocabulary(100).unwrap();
        let o = obj(0, 0, (0.375, 0.5, 0.625, 0.75));
        let scene = Scene { grid_size: 8, scene_class_id: 0, objects: vec![o.clone()], seed: 0 };
        let t = make_target(&scene, Task::Ground, &v, Some(0)).unwrap();
        let mut want = v.encode_box(&o.bbox).unwrap().to_vec();
        want.extend([PAD_ID; 4]);
        assert_eq!(t.target_ids, want);
        assert_eq!(v.decode_text(&t.prompt_ids[1..]).unwrap(), "ground yellow bus");
        assert!(matches!(make_target(&scene, Task::Ground, &v, Some(1)), Err(SceneError::Ambiguous(_))));
        assert!(matches!(make_target(&scene, Task::Ground, &v, None), Err(SceneError::Ambiguous(_))));

        let twins = Scene { objects: vec![o.clone(), obj(0, 0, (0.0, 0.0, 0.2, 0.2))], ..scene };
        assert!(matches!(make_target(&twins, Task::Ground, &v, Some(0)), Err(SceneError::Ambiguous(_))));
    }

    #[test]
    fn detect_three_objects_token_by_token() {
        let v = spec().vocabulary(100).unwrap();
        let scene = Scene {
            grid_size: 8,
            scene_class_id: 1,
            objects: vec![
                obj(1, 0, (0.6, 0.1, 0.8, 0.3)),
                obj(0, 2, (0.5, 0.5, 0.7, 0.75)),
                obj(1, 1, (0.1, 0.6, 0.3, 0.9)),
            ],
            seed: 0,
        };
        let t = make_target(&scene, Task::Detect, &v, None).unwrap();
        assert!(!t.truncated);
        let c = |k| v.coord_id(k);
        let want = vec![
            v.class_token(0),
            c(50),
            c(50),
            c(70),
            c(75),
            v.class_token(1),
            c(10),
            c(60),
            c(30),
            c(90),
            v.class_token(1),
            c(60),
            c(10),
            c(80),
            c(30),
        ];
        assert_eq!(&t.target_ids[..15], &want[..]);
        assert!(t.target_ids[15..].iter().all(|&i| i == PAD_ID));
        assert_eq!(t.target_ids.len(), 32);
    }

    #[test]
    fn detect_truncation_is_flagged() {
        let v = GenSpec { max_objects: 9, ..spec() }.vocabulary(100).unwrap();
        let objects = (0..7).map(|i| obj(0, 0, (i as f64 * 0.1, 0.0, i as f64 * 0.1 + 0.1, 0.1))).collect();
        let scene = Scene { grid_size: 8, scene_class_id: 0, objects, seed: 0 };
        let t = make_target(&scene, Task::Detect, &v, None).unwrap();
        assert!(t.truncated);
        assert_eq!(t.target_ids.len(), 32);
        assert_eq!(t.target_ids[30..], [PAD_ID, PAD_ID]);
    }

    #[test]
    fn classify_target() {
        let v = spec().vocabulary(100).unwrap();
        let scene = generate_scene(11, &spec()).unwrap();
        let t = make_target(&scene, Task::Classify, &v, None).unwrap();
        assert_eq!(t.target_ids[0], v.lookup(SCENE_NAMES[scene.scene_class_id]).unwrap());
        assert_eq!(t.target_ids.len(), 8);
    }

    #[test]
    fn default_vocab_size() {
        // 3 specials + 4 tags + 6 counts + empty + assorted + 4 attrs + 5 scenes + 100 bins + 5 classes
        assert_eq!(spec().vocabulary(100).unwrap().len(), 3 + 21 + 100 + 5);
    }

    #[test]
    fn iou_hand_values() {
        let a = BBox::new(0.0, 0.0, 0.5, 0.5).unwrap();
        let b = BBox::new(0.25, 0.0, 0.75, 0.5).unwrap();
        assert!((box_iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
        let z = BBox::new(0.3, 0.3, 0.3, 0.3).unwrap();
        assert_eq!(box_iou(&z, &z), 0.0);
    }
}
