//! Task-instance datasets: deterministic generation and the on-disk format.
//!
//! `instances.bin` is a sequence of little-endian records `[u32 len][payload]`.
//! Payload layout:
//!
//! ```text
//! u8  task code (caption=0, detect=1, ground=2, classify=3)
//! u8  flags (bit 0: detection target truncated)
//! u8  referenced object index, 0xFF when absent
//! u64 scene seed
//! u8  grid size
//! u16 scene class id
//! u8  object count, then per object: u16 class, u16 attribute, 4 x f64 box
//! u16 prompt length, then u16 prompt ids
//! u16 target length, then u16 target ids
//! ```
//!
//! `manifest.json` records seed, generation spec, per-task counts and the
//! vocabulary hash.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::scenegen::{
    derive_seed, generate_scene, make_target, GenSpec, Scene, SceneError, SceneObject, Task, TaskInstance,
};
use crate::vocab::{BBox, TokenId, Vocabulary};

pub const INSTANCES_FILE: &str = "instances.bin";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const VOCAB_FILE: &str = "vocab.tsv";
const MAX_REGENERATIONS: u64 = 100;

/// Proportions per task; must sum to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMix(pub BTreeMap<Task, f64>);

impl TaskMix {
    pub fn new(entries: &[(Task, f64)]) -> Self {
        Self(entries.iter().copied().collect())
    }

    pub fn only(task: Task) -> Self {
        Self::new(&[(task, 1.0)])
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let sum: f64 = self.0.values().sum();
        if (sum - 1.0).abs() > 1e-9 || self.0.values().any(|&p| p < 0.0) {
            return Err(SceneError::TaskMix(sum));
        }
        Ok(())
    }

    /// Largest-remainder apportionment of `size` instances. Ties in the
    /// fractional part go to the task listed first.
    pub fn apportion(&self, size: usize) -> Result<BTreeMap<Task, usize>, SceneError> {
        self.validate()?;
        let mut counts: BTreeMap<Task, usize> = BTreeMap::new();
        let mut rems = Vec::new();
        let mut assigned = 0;
        for (&task, &p) in &self.0 {
            let exact = p * size as f64;
            let base = exact.floor() as usize;
            counts.insert(task, base);
            assigned += base;
            rems.push((exact - base as f64, task));
        }
        rems.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for (_, task) in rems.into_iter().take(size.saturating_sub(assigned)) {
            *counts.get_mut(&task).unwrap() += 1;
        }
        Ok(counts)
    }
}

impl Default for TaskMix {
    fn default() -> Self {
        Self::new(&[(Task::Caption, 0.25), (Task::Detect, 0.25), (Task::Ground, 0.25), (Task::Classify, 0.25)])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub spec: GenSpec,
    pub size: usize,
    pub coord_bins: u32,
    pub task_mix: TaskMix,
    pub counts: BTreeMap<Task, usize>,
    pub vocab_hash: String,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub vocab: Vocabulary,
    pub instances: Vec<TaskInstance>,
}

fn instance_for(
    seed: u64,
    index: usize,
    task: Task,
    spec: &GenSpec,
    vocab: &Vocabulary,
) -> Result<TaskInstance, SceneError> {
    let base = derive_seed(seed, index as u64);
    for attempt in 0..MAX_REGENERATIONS {
        let scene_seed = if attempt == 0 { base } else { derive_seed(base, attempt) };
        let scene = generate_scene(scene_seed, spec)?;
        let referent = if task == Task::Ground {
            let unique: Vec<usize> = (0..scene.objects.len())
                .filter(|&i| {
                    let r = &scene.objects[i];
                    scene
                        .objects
                        .iter()
                        .filter(|o| o.class_id == r.class_id && o.attribute_id == r.attribute_id)
                        .count()
                        == 1
                })
                .collect();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(scene_seed, 0x6772_6f75));
            match unique.choose(&mut rng) {
                Some(&i) => Some(i),
                None => continue,
            }
        } else {
            None
        };
        return make_target(&scene, task, vocab, referent);
    }
    Err(SceneError::Spec(format!("no groundable scene for instance {index}")))
}

/// Generates `size` instances in memory. Instance `i` derives its scene from
/// `derive_seed(seed, i)`; task order is a seeded shuffle of the apportionment.
pub fn generate_instances(
    spec: &GenSpec,
    seed: u64,
    size: usize,
    mix: &TaskMix,
    vocab: &Vocabulary,
) -> Result<(Vec<TaskInstance>, BTreeMap<Task, usize>), SceneError> {
    spec.validate()?;
    let counts = mix.apportion(size)?;
    let mut tasks: Vec<Task> = counts.iter().flat_map(|(&t, &n)| std::iter::repeat_n(t, n)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::MAX));
    tasks.shuffle(&mut rng);
    let instances = tasks
        .par_iter()
        .enumerate()
        .map(|(i, &task)| instance_for(seed, i, task, spec, vocab))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((instances, counts))
}

pub fn build_dataset(
    spec: &GenSpec,
    seed: u64,
    size: usize,
    mix: &TaskMix,
    coord_bins: u32,
    out_dir: &Path,
    overwrite: bool,
) -> Result<Dataset, SceneError> {
    if out_dir.join(INSTANCES_FILE).exists() && !overwrite {
        return Err(SceneError::Exists(out_dir.display().to_string()));
    }
    let ds = Dataset::generate(spec, seed, size, mix, coord_bins)?;
    ds.save(out_dir)?;
    Ok(ds)
}

impl Dataset {
    /// Same content as [`build_dataset`], without touching the filesystem.
    pub fn generate(
        spec: &GenSpec,
        seed: u64,
        size: usize,
        mix: &TaskMix,
        coord_bins: u32,
    ) -> Result<Self, SceneError> {
        let vocab = spec.vocabulary(coord_bins)?;
        let (instances, counts) = generate_instances(spec, seed, size, mix, &vocab)?;
        let manifest = Manifest {
            seed,
            spec: spec.clone(),
            size,
            coord_bins,
            task_mix: mix.clone(),
            counts,
            vocab_hash: vocab.hash(),
        };
        Ok(Dataset { manifest, vocab, instances })
    }

    pub fn save(&self, out_dir: &Path) -> Result<(), SceneError> {
        fs::create_dir_all(out_dir)?;
        fs::write(out_dir.join(INSTANCES_FILE), encode_instances(&self.instances))?;
        fs::write(out_dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&self.manifest)? + "\n")?;
        self.vocab.save(&out_dir.join(VOCAB_FILE))?;
        Ok(())
    }

    /// The instances satisfying `keep`, with the manifest size and counts
    /// updated to match.
    pub fn filtered(&self, keep: impl Fn(&TaskInstance) -> bool) -> Self {
        let instances: Vec<TaskInstance> = self.instances.iter().filter(|i| keep(i)).cloned().collect();
        let mut manifest = self.manifest.clone();
        manifest.size = instances.len();
        manifest.counts = BTreeMap::new();
        for i in &instances {
            *manifest.counts.entry(i.task).or_insert(0) += 1;
        }
        Self { manifest, vocab: self.vocab.clone(), instances }
    }

    pub fn load(dir: &Path) -> Result<Self, SceneError> {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
        if vocab.hash() != manifest.vocab_hash {
            return Err(SceneError::Format { offset: 0, msg: "vocabulary hash does not match manifest".into() });
        }
        let instances = decode_instances(&fs::read(dir.join(INSTANCES_FILE))?)?;
        if instances.len() != manifest.size {
            return Err(SceneError::Format {
                offset: 0,
                msg: format!("manifest lists {} instances, file has {}", manifest.size, instances.len()),
            });
        }
        Ok(Self { manifest, vocab, instances })
    }

    pub fn spec(&self) -> &GenSpec {
        &self.manifest.spec
    }
}

pub fn encode_instances(instances: &[TaskInstance]) -> Vec<u8> {
    let mut out = Vec::new();
    for inst in instances {
        let payload = encode_instance(inst);
        out.extend((payload.len() as u32).to_le_bytes());
        out.extend(payload);
    }
    out
}

fn encode_instance(inst: &TaskInstance) -> Vec<u8> {
    let mut p = Vec::with_capacity(64 + 40 * inst.scene.objects.len());
    p.push(inst.task.code());
    p.push(inst.truncated as u8);
    p.push(inst.ref_object.map_or(0xFF, |i| i as u8));
    p.extend(inst.scene.seed.to_le_bytes());
    p.push(inst.scene.grid_size as u8);
    p.extend((inst.scene.scene_class_id as u16).to_le_bytes());
    p.push(inst.scene.objects.len() as u8);
    for o in &inst.scene.objects {
        p.extend((o.class_id as u16).to_le_bytes());
        p.extend((o.attribute_id as u16).to_le_bytes());
        for c in o.bbox.coords() {
            p.extend(c.to_le_bytes());
        }
    }
    for ids in [&inst.prompt_ids, &inst.target_ids] {
        p.extend((ids.len() as u16).to_le_bytes());
        for &id in ids.iter() {
            p.extend((id as u16).to_le_bytes());
        }
    }
    p
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], SceneError> {
        if self.pos + n > self.buf.len() {
            return Err(SceneError::Format { offset: self.pos, msg: format!("truncated: need {n} bytes") });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, SceneError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, SceneError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, SceneError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, SceneError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, SceneError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn ids(&mut self) -> Result<Vec<TokenId>, SceneError> {
        let n = self.u16()? as usize;
        (0..n).map(|_| self.u16().map(TokenId::from)).collect()
    }
}

pub fn decode_instances(bytes: &[u8]) -> Result<Vec<TaskInstance>, SceneError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let mut out = Vec::new();
    while r.pos < bytes.len() {
        let len = r.u32()? as usize;
        let start = r.pos;
        let inst = decode_instance(&mut r)?;
        if r.pos - start != len {
            return Err(SceneError::Format { offset: start, msg: "record length mismatch".into() });
        }
        out.push(inst);
    }
    Ok(out)
}

fn decode_instance(r: &mut Reader<'_>) -> Result<TaskInstance, SceneError> {
    let at = r.pos;
    let task =
        Task::from_code(r.u8()?).ok_or_else(|| SceneError::Format { offset: at, msg: "unknown task code".into() })?;
    let truncated = r.u8()? & 1 == 1;
    let ref_object = match r.u8()? {
        0xFF => None,
        i => Some(i as usize),
    };
    let seed = r.u64()?;
    let grid_size = r.u8()? as usize;
    let scene_class_id = r.u16()? as usize;
    let n = r.u8()? as usize;
    let mut objects = Vec::with_capacity(n);
    for _ in 0..n {
        let class_id = r.u16()? as usize;
        let attribute_id = r.u16()? as usize;
        let at = r.pos;
        let (x1, y1, x2, y2) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
        let bbox = BBox::new(x1, y1, x2, y2).map_err(|e| SceneError::Format { offset: at, msg: e.to_string() })?;
        objects.push(SceneObject { class_id, attribute_id, bbox });
    }
    let prompt_ids = r.ids()?;
    let target_ids = r.ids()?;
    Ok(TaskInstance {
        task,
        scene: Scene { grid_size, scene_class_id, objects, seed },
        prompt_ids,
        target_ids,
        ref_object,
        truncated,
    })
}

/// Seeded subset of `k` indices out of `n`, returned in ascending order.
pub fn sample_indices(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx.truncate(k);
    idx.sort_unstable();
    idx
}
