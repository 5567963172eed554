//! Synthetic attention containers shared by the integration tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use attnforge::mask::{ClassEntry, ClassTable};
use attnforge::tensor_io::{write_attention_stack, AttentionLayer, AttentionStack, TokenMeta};
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const VOC_CLASSES: [(&str, &[&str]); 20] = [
    ("aeroplane", &["aeroplane", "airplane", "plane"]),
    ("bicycle", &["bicycle", "bike"]),
    ("bird", &["bird"]),
    ("boat", &["boat", "ship"]),
    ("bottle", &["bottle"]),
    ("bus", &["bus"]),
    ("car", &["car"]),
    ("cat", &["cat", "kitten"]),
    ("chair", &["chair"]),
    ("cow", &["cow"]),
    ("diningtable", &["dining table", "table"]),
    ("dog", &["dog", "puppy"]),
    ("horse", &["horse"]),
    ("motorbike", &["motorbike", "motorcycle"]),
    ("person", &["person", "man", "woman"]),
    ("pottedplant", &["potted plant"]),
    ("sheep", &["sheep"]),
    ("sofa", &["sofa", "couch"]),
    ("train", &["train"]),
    ("tvmonitor", &["tv monitor", "monitor"]),
];

pub fn voc_entries() -> Vec<ClassEntry> {
    VOC_CLASSES
        .iter()
        .enumerate()
        .map(|(i, (name, words))| ClassEntry {
            id: i as u32 + 1,
            name: name.to_string(),
            match_words: words.iter().map(|w| w.to_string()).collect(),
        })
        .collect()
}

pub fn voc_table() -> ClassTable {
    ClassTable::new(voc_entries()).unwrap()
}

pub fn write_classes(dir: &Path) -> PathBuf {
    let path = dir.join("classes.json");
    std::fs::write(&path, serde_json::to_string_pretty(&voc_entries()).unwrap()).unwrap();
    path
}

/// Shape of a synthetic container.
#[derive(Debug, Clone)]
pub struct Scene {
    pub width: u32,
    pub height: u32,
    /// Class words placed as objects, one ellipse each, named in the prompt.
    pub objects: Vec<&'static str>,
    /// Filler words appended to the prompt.
    pub filler: Vec<&'static str>,
    /// `(width, height, heads)` per captured layer.
    pub layers: Vec<(usize, usize, usize)>,
    pub timesteps: Vec<u32>,
}

impl Scene {
    pub fn small(objects: Vec<&'static str>) -> Self {
        Scene {
            width: 48,
            height: 40,
            objects,
            filler: vec!["in", "a", "field"],
            layers: vec![(16, 16, 2), (8, 8, 2)],
            timesteps: vec![25],
        }
    }

    /// The 512x512 setting of a full-size generation: two 64x64, two 32x32
    /// and one 16x16 layer with 8 heads.
    pub fn full(objects: Vec<&'static str>) -> Self {
        Scene {
            width: 512,
            height: 512,
            objects,
            filler: vec!["on", "a", "sunny", "day"],
            layers: vec![(64, 64, 8), (64, 64, 8), (32, 32, 8), (32, 32, 8), (16, 16, 8)],
            timesteps: vec![50],
        }
    }
}

struct Blob {
    cx: f32,
    cy: f32,
    rx: f32,
    ry: f32,
    colour: [u8; 3],
}

impl Blob {
    /// Squared normalized distance from the centre, in unit-square coordinates.
    fn dist(&self, u: f32, v: f32) -> f32 {
        ((u - self.cx) / self.rx).powi(2) + ((v - self.cy) / self.ry).powi(2)
    }
}

/// Deterministic synthetic stack: coloured ellipses on a gradient background
/// and, for every layer and head, per-token spatial softmax maps peaked on
/// the ellipse of the token's object.
pub fn synth_stack(seed: u64, scene: &Scene) -> AttentionStack {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blobs: Vec<Blob> = scene
        .objects
        .iter()
        .map(|_| Blob {
            cx: rng.random_range(0.2..0.8),
            cy: rng.random_range(0.2..0.8),
            rx: rng.random_range(0.08..0.25),
            ry: rng.random_range(0.08..0.25),
            colour: [rng.random(), rng.random(), rng.random()],
        })
        .collect();

    let (w, h) = (scene.width, scene.height);
    let base = [rng.random_range(40..200u8), rng.random_range(40..200u8), rng.random_range(40..200u8)];
    let image = RgbImage::from_fn(w, h, |x, y| {
        let (u, v) = ((x as f32 + 0.5) / w as f32, (y as f32 + 0.5) / h as f32);
        let mut c = [
            base[0].saturating_add((u * 40.0) as u8),
            base[1].saturating_add((v * 40.0) as u8),
            base[2],
        ];
        for b in &blobs {
            if b.dist(u, v) <= 1.0 {
                c = b.colour;
            }
        }
        Rgb(c.map(|ch| ch.saturating_add(rng.random_range(0..6))))
    });

    let mut words: Vec<String> = vec!["a".into(), "photo".into(), "of".into()];
    // word index -> blob
    let mut object_word = Vec::new();
    for (k, obj) in scene.objects.iter().enumerate() {
        if k > 0 {
            words.push("and".into());
        }
        words.push("a".into());
        for part in obj.split(' ') {
            object_word.push((words.len(), k));
            words.push(part.to_string());
        }
    }
    words.extend(scene.filler.iter().map(|s| s.to_string()));
    let prompt = words.join(" ");

    let mut tokens = vec![TokenMeta {
        text: "<|startoftext|>".into(),
        word_index: None,
        position: 0,
    }];
    for (wi, word) in words.iter().enumerate() {
        tokens.push(TokenMeta {
            text: format!("{word}</w>"),
            word_index: Some(wi),
            position: tokens.len(),
        });
    }
    tokens.push(TokenMeta {
        text: "<|endoftext|>".into(),
        word_index: None,
        position: tokens.len(),
    });
    let l = tokens.len();
    // token position -> blob
    let owner: Vec<Option<usize>> = tokens
        .iter()
        .map(|t| {
            t.word_index
                .and_then(|wi| object_word.iter().find(|(ow, _)| *ow == wi).map(|&(_, k)| k))
        })
        .collect();

    let mut layers = Vec::new();
    for &t in &scene.timesteps {
        for (li, &(lw, lh, heads)) in scene.layers.iter().enumerate() {
            let mut data = vec![0f32; heads * lh * lw * l];
            let mut logits = vec![0f64; lh * lw];
            for head in 0..heads {
                for (pos, own) in owner.iter().enumerate() {
                    let gain = rng.random_range(4.0..7.0f64);
                    for y in 0..lh {
                        for x in 0..lw {
                            let (u, v) = ((x as f32 + 0.5) / lw as f32, (y as f32 + 0.5) / lh as f32);
                            let peak = match own {
                                Some(b) => gain * (-0.7 * blobs[*b].dist(u, v) as f64).exp(),
                                None => 0.0,
                            };
                            logits[y * lw + x] = peak + rng.random_range(0.0..0.3);
                        }
                    }
                    let max = logits.iter().cloned().fold(f64::MIN, f64::max);
                    let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
                    for (i, z) in logits.iter().enumerate() {
                        data[(head * lh * lw + i) * l + pos] = ((z - max).exp() / sum) as f32;
                    }
                }
            }
            layers.push(AttentionLayer {
                layer_id: format!("layer{li:02}"),
                heads,
                width: lw,
                height: lh,
                timestep: t,
                data,
            });
        }
    }

    AttentionStack {
        image,
        prompt,
        seed,
        tokens,
        layers,
    }
}

/// Objects for the `i`-th fixture of a set: one to three VOC classes.
pub fn objects_for(i: u64) -> Vec<&'static str> {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + i);
    let k = rng.random_range(1..=3);
    let idx = rand::seq::index::sample(&mut rng, VOC_CLASSES.len(), k);
    let mut names: Vec<&'static str> = idx.iter().map(|j| VOC_CLASSES[j].1[0]).collect();
    names.sort_unstable();
    names
}

/// Writes `n` small containers named `sample_000`, `sample_001`, ...
pub fn write_fixture_set(dir: &Path, n: u64, seed: u64) -> Vec<PathBuf> {
    (0..n)
        .map(|i| {
            let path = dir.join(format!("sample_{i:03}"));
            let stack = synth_stack(seed + i, &Scene::small(objects_for(seed + i)));
            write_attention_stack(&stack, &path).unwrap();
            path
        })
        .collect()
}

/// The container used as a fixed reference: a dog on grass, 12 tokens and
/// five layers at three resolutions.
pub fn voc_dog_0001() -> AttentionStack {
    let scene = Scene {
        width: 64,
        height: 64,
        objects: vec!["dog"],
        filler: vec!["lying", "on", "the", "green", "grass"],
        layers: vec![(16, 16, 2), (16, 16, 2), (8, 8, 2), (8, 8, 2), (4, 4, 2)],
        timesteps: vec![50],
    };
    synth_stack(1, &scene)
}
