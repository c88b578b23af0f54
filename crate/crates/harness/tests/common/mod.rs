//! Small synthetic stand-ins for the distributed IDX originals.

#![allow(dead_code)]

use std::fs;
use std::path::Path;

use crc_core::idx::{encode_images, encode_labels};
use crc_core::{Image, LabelVector, Split};
use crc_harness::pipeline::ORIGINAL_FILES;
use crc_harness::{ExperimentPlan, Family};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TRAIN_IMAGES: usize = 240;
pub const TEST_IMAGES: usize = 100;

/// 28x28 images whose class sets the position of a bright square.
pub fn synthetic_split(n: usize, seed: u64) -> (Vec<Image<f64>>, LabelVector) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % 10;
        let mut img = Image::new(28, 28, (0..784).map(|_| rng.random_range(0.0..0.1)).collect());
        let top = (c / 5) * 14 + 2 + rng.random_range(0..=4usize);
        let left = (c % 5) * 5 + rng.random_range(0..=2usize);
        let level = rng.random_range(0.5..1.0);
        for y in top..top + 6 {
            for x in left..left + 6 {
                img.set(y, x, level);
            }
        }
        images.push(img);
        labels.push(c);
    }
    (images, LabelVector::new(labels, 10).unwrap())
}

/// Writes the four original files of `family` under `data_dir/<family>`.
pub fn write_originals(data_dir: &Path, family: Family, seed: u64) {
    let dir = data_dir.join(family.name());
    fs::create_dir_all(&dir).unwrap();
    for (split, images_name, labels_name) in ORIGINAL_FILES {
        let n = match split {
            Split::Train => TRAIN_IMAGES,
            Split::Test => TEST_IMAGES,
        };
        let (images, labels) = synthetic_split(n, seed ^ (split as u64 + 1) ^ ((family as u64) << 8));
        fs::write(dir.join(images_name), encode_images(&images).unwrap()).unwrap();
        fs::write(dir.join(labels_name), encode_labels(&labels).unwrap()).unwrap();
    }
}

/// A plan small enough to run end to end in seconds.
pub fn tiny_plan(root: &Path, families: &[Family]) -> ExperimentPlan {
    let mut plan = ExperimentPlan {
        families: families.to_vec(),
        data_dir: root.join("data"),
        out_dir: root.join("out"),
        ..Default::default()
    };
    plan.apply_config_text(
        "eval_sizes = 100, 20\n\
         epochs = 2\n\
         initial_lr = 0.02\n\
         momentum = 0.9\n\
         batch_size = 16\n\
         monitor_samples = 64\n",
    )
    .unwrap();
    plan
}

/// Originals for every family of `plan`.
pub fn seed_originals(plan: &ExperimentPlan) {
    for &f in &plan.families {
        write_originals(&plan.data_dir, f, 99);
    }
}

pub fn copy_dir(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for entry in fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        let target = to.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_dir(&entry.path(), &target);
        } else {
            fs::copy(entry.path(), target).unwrap();
        }
    }
}
