//! Deterministic synthetic classification tasks arranged into a stream: one
//! pretraining task followed by downstream tasks that either reuse the
//! pretraining visual vocabulary (object) or do not (non-object).

mod idx;
mod render;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

pub use idx::{encode_idx, load_idx, parse_idx, write_idx, IMAGES_MAGIC, LABELS_MAGIC};
pub use render::{primitive_vocabulary, ClassRecipe, Placement, Primitive, PrimitiveShape};

use crate::error::{Error, Result};
use crate::par;
use crate::rng::{self, derive_seed};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Object,
    NonObject,
}

impl TaskKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskKind::Object => "object",
            TaskKind::NonObject => "nonobject",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Shapes,
    Textures,
    Glyphs,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub task_id: String,
    pub kind: TaskKind,
    pub family: Family,
    pub n_classes: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub image_size: usize,
    #[serde(with = "rng::hex_seed")]
    pub seed: u64,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| {
            Err(Error::InvalidTask {
                task: self.task_id.clone(),
                reason,
            })
        };
        if self.n_classes < 2 {
            return bad(format!("n_classes = {} (need >= 2)", self.n_classes));
        }
        if self.n_classes > 256 {
            return bad(format!("n_classes = {} (at most 256)", self.n_classes));
        }
        if self.n_train == 0 || self.n_test == 0 {
            return bad("n_train and n_test must be positive".into());
        }
        if self.image_size < 8 {
            return bad(format!("image_size = {} (need >= 8)", self.image_size));
        }
        let expected = match self.family {
            Family::Shapes => TaskKind::Object,
            Family::Textures | Family::Glyphs => TaskKind::NonObject,
        };
        if self.kind != expected {
            return bad(format!("{:?} tasks are {}", self.family, expected.as_str()));
        }
        Ok(())
    }

    /// Vocabulary entries this task's classes are composed of; empty for
    /// non-object families.
    pub fn vocabulary_used(&self) -> BTreeSet<usize> {
        self.recipes()
            .iter()
            .flat_map(|r| match r {
                ClassRecipe::Shapes(parts) => parts.iter().map(|p| p.primitive).collect(),
                _ => Vec::new(),
            })
            .collect()
    }

    pub fn recipes(&self) -> Vec<ClassRecipe> {
        let mut r = rng::rng(self.seed, &[RECIPE_STREAM]);
        match self.family {
            Family::Shapes => render::shapes_recipes(self.n_classes, &mut r),
            Family::Textures => render::texture_recipes(self.n_classes, &mut r),
            Family::Glyphs => render::glyph_recipes(self.n_classes, &mut r),
        }
    }
}

const RECIPE_STREAM: u64 = 0x5245_4349;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train = 1,
    Val = 2,
    Test = 3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[N, 1, H, W]`, values in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Examples `idx` as a batch.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        Ok((self.images.gather_rows(idx)?, idx.iter().map(|&i| self.labels[i]).collect()))
    }

    pub fn class_counts(&self, classes: usize) -> Vec<usize> {
        let mut c = vec![0; classes];
        self.labels.iter().for_each(|&l| c[l] += 1);
        c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub spec: TaskSpec,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Example `index` of `split` uses its own random stream and label
/// `index % n_classes`, so splits never share a stream position and every
/// example can be generated independently.
fn generate_split(spec: &TaskSpec, recipes: &[ClassRecipe], split: Split, n: usize) -> Result<Dataset> {
    let px = spec.image_size * spec.image_size;
    let mut images = vec![0.0; n * px];
    if n > 0 {
        par::map_chunks_mut(&mut images, px, |i, out| {
            let mut r = rng::rng(spec.seed, &[split as u64, i as u64]);
            render::render(&recipes[i % spec.n_classes], spec.image_size, &mut r, out);
        });
    }
    Ok(Dataset {
        images: Tensor::new(vec![n, 1, spec.image_size, spec.image_size], images)?,
        labels: (0..n).map(|i| i % spec.n_classes).collect(),
    })
}

pub fn generate_task(spec: &TaskSpec) -> Result<TaskData> {
    spec.validate()?;
    let recipes = spec.recipes();
    Ok(TaskData {
        spec: spec.clone(),
        train: generate_split(spec, &recipes, Split::Train, spec.n_train)?,
        val: generate_split(spec, &recipes, Split::Val, spec.n_val)?,
        test: generate_split(spec, &recipes, Split::Test, spec.n_test)?,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSpec {
    pub pretrain: TaskSpec,
    pub downstream: Vec<TaskSpec>,
    pub seed: u64,
}

/// Knobs for building a stream from counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamShape {
    pub seed: u64,
    pub image_size: usize,
    pub pretrain_classes: usize,
    pub pretrain_train: usize,
    pub n_object: usize,
    pub n_nonobject: usize,
    /// Downstream class counts cycle through this list.
    pub downstream_classes: Vec<usize>,
    /// Downstream training-set sizes cycle through this list.
    pub downstream_train: Vec<usize>,
    pub n_val: usize,
    pub n_test: usize,
}

impl Default for StreamShape {
    fn default() -> Self {
        Self {
            seed: 0,
            image_size: 32,
            pretrain_classes: 20,
            pretrain_train: 10_000,
            n_object: 8,
            n_nonobject: 4,
            downstream_classes: vec![5, 10, 8, 6],
            downstream_train: vec![200, 2000, 500, 1000],
            n_val: 200,
            n_test: 500,
        }
    }
}

impl StreamShape {
    /// 16 object and 8 non-object downstream tasks.
    pub fn full_mirror() -> Self {
        Self {
            n_object: 16,
            n_nonobject: 8,
            downstream_train: vec![200, 20_000, 500, 5000, 1000, 2000],
            ..Self::default()
        }
    }

    pub fn build(&self) -> Result<StreamSpec> {
        if self.downstream_classes.is_empty() || self.downstream_train.is_empty() {
            return Err(Error::InvalidSpec("downstream size lists must be non-empty".into()));
        }
        let task = |id: String, kind, family, n_classes, n_train, seed| TaskSpec {
            task_id: id,
            kind,
            family,
            n_classes,
            n_train,
            n_val: self.n_val,
            n_test: self.n_test,
            image_size: self.image_size,
            seed,
        };
        let pretrain = task(
            "pretrain".into(),
            TaskKind::Object,
            Family::Shapes,
            self.pretrain_classes,
            self.pretrain_train,
            derive_seed(self.seed, &[0]),
        );
        let mut downstream = Vec::new();
        let sizes = |i: usize| {
            (
                self.downstream_classes[i % self.downstream_classes.len()],
                self.downstream_train[i % self.downstream_train.len()],
            )
        };
        for i in 0..self.n_object {
            let (c, n) = sizes(i);
            downstream.push(task(format!("obj{i:02}"), TaskKind::Object, Family::Shapes, c, n, derive_seed(self.seed, &[1, i as u64])));
        }
        for i in 0..self.n_nonobject {
            let (c, n) = sizes(i + 1);
            let family = if i % 2 == 0 { Family::Textures } else { Family::Glyphs };
            downstream.push(task(format!("non{i:02}"), TaskKind::NonObject, family, c, n, derive_seed(self.seed, &[2, i as u64])));
        }
        // interleave kinds in a seed-dependent but fixed order
        let mut order: Vec<(u64, TaskSpec)> = downstream
            .into_iter()
            .map(|t| (derive_seed(self.seed, &[3, rng::name_hash(&t.task_id)]), t))
            .collect();
        order.sort_by_key(|(k, _)| *k);
        let spec = StreamSpec {
            pretrain,
            downstream: order.into_iter().map(|(_, t)| t).collect(),
            seed: self.seed,
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl StreamSpec {
    pub fn validate(&self) -> Result<()> {
        self.pretrain.validate()?;
        if self.pretrain.kind != TaskKind::Object {
            return Err(Error::InvalidSpec("the pretraining task must be an object task".into()));
        }
        let mut ids = BTreeSet::new();
        ids.insert(self.pretrain.task_id.as_str());
        for t in &self.downstream {
            t.validate()?;
            if t.seed == self.pretrain.seed && t.family == self.pretrain.family {
                return Err(Error::InvalidSpec(format!("task `{}` duplicates the pretraining task", t.task_id)));
            }
            if !ids.insert(t.task_id.as_str()) {
                return Err(Error::InvalidSpec(format!("duplicate task id `{}`", t.task_id)));
            }
        }
        Ok(())
    }

    pub fn count(&self, kind: TaskKind) -> usize {
        self.downstream.iter().filter(|t| t.kind == kind).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamData {
    pub pretrain: TaskData,
    pub downstream: Vec<TaskData>,
}

pub fn generate_stream(spec: &StreamSpec) -> Result<StreamData> {
    spec.validate()?;
    Ok(StreamData {
        pretrain: generate_task(&spec.pretrain)?,
        downstream: spec.downstream.iter().map(generate_task).collect::<Result<_>>()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(family: Family, kind: TaskKind) -> TaskSpec {
        TaskSpec {
            task_id: "t".into(),
            kind,
            family,
            n_classes: 5,
            n_train: 500,
            n_val: 20,
            n_test: 30,
            image_size: 32,
            seed: 4,
        }
    }

    #[test]
    fn deterministic_and_balanced() {
        for (f, k) in [
            (Family::Shapes, TaskKind::Object),
            (Family::Textures, TaskKind::NonObject),
            (Family::Glyphs, TaskKind::NonObject),
        ] {
            let spec = small(f, k);
            let a = generate_task(&spec).unwrap();
            assert_eq!(a, generate_task(&spec).unwrap());
            assert_eq!(a.train.class_counts(5), vec![100; 5]);
            assert!(a.train.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert_ne!(a.train.images.slice_rows(0, 1).unwrap(), a.test.images.slice_rows(0, 1).unwrap());
        }
    }

    #[test]
    fn split_examples_are_distinct() {
        let d = generate_task(&small(Family::Shapes, TaskKind::Object)).unwrap();
        let px = 32 * 32;
        let rows = |ds: &Dataset| -> Vec<Vec<u64>> {
            ds.images.data().chunks(px).map(|r| r.iter().map(|v| v.to_bits()).collect()).collect()
        };
        let train: BTreeSet<_> = rows(&d.train).into_iter().collect();
        assert!(rows(&d.test).iter().all(|r| !train.contains(r)));
        assert!(rows(&d.val).iter().all(|r| !train.contains(r)));
    }

    #[test]
    fn invalid_tasks_rejected() {
        let mut s = small(Family::Shapes, TaskKind::Object);
        s.n_classes = 1;
        assert!(matches!(generate_task(&s), Err(Error::InvalidTask { .. })));
        let s = small(Family::Glyphs, TaskKind::Object);
        assert!(generate_task(&s).is_err());
    }

    #[test]
    fn default_stream_counts() {
        let s = StreamShape::default().build().unwrap();
        assert_eq!(s.downstream.len(), 12);
        assert_eq!((s.count(TaskKind::Object), s.count(TaskKind::NonObject)), (8, 4));
        assert_eq!(s.pretrain.n_classes, 20);
        assert_eq!(s.pretrain.n_train, 10_000);
        assert_eq!(s, StreamShape::default().build().unwrap());
        let full = StreamShape::full_mirror().build().unwrap();
        assert_eq!((full.count(TaskKind::Object), full.count(TaskKind::NonObject)), (16, 8));
    }

    #[test]
    fn vocabulary_split_by_kind() {
        let s = StreamShape::default().build().unwrap();
        let vocab: BTreeSet<usize> = (0..primitive_vocabulary().len()).collect();
        for t in &s.downstream {
            let used = t.vocabulary_used();
            match t.kind {
                TaskKind::Object => assert!(!used.is_empty() && used.is_subset(&vocab)),
                TaskKind::NonObject => assert!(used.is_empty()),
            }
        }
    }
}
