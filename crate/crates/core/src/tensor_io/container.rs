use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AttentionLayer, AttentionStack, TokenMeta, SPATIAL_SUM_TOLERANCE};
use crate::codec;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;
const IMAGE_FILE: &str = "image.png";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    image: ImageEntry,
    prompt: String,
    seed: u64,
    tokens: Vec<TokenMeta>,
    layers: Vec<LayerEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ImageEntry {
    file: String,
    width: u32,
    height: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerEntry {
    layer_id: String,
    heads: usize,
    width: usize,
    height: usize,
    timestep: u32,
    file: String,
    byte_length: u64,
}

/// Member files must stay inside the container directory.
fn member_path(dir: &Path, name: &str) -> Result<PathBuf> {
    let p = Path::new(name);
    let mut comps = p.components();
    match (comps.next(), comps.next()) {
        (Some(std::path::Component::Normal(_)), None) => Ok(dir.join(p)),
        _ => Err(Error::Corrupt(format!("invalid member file name {name:?}"))),
    }
}

pub fn read_attention_stack(path: impl AsRef<Path>) -> Result<AttentionStack> {
    let dir = path.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = match fs::read_to_string(&manifest_path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::format(dir, "missing manifest.json"))
        }
        Err(e) => return Err(Error::io(&manifest_path, e)),
    };
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&manifest_path, e.to_string()))?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::format(
            &manifest_path,
            format!("unsupported version {}", manifest.version),
        ));
    }

    let image_path = member_path(dir, &manifest.image.file)?;
    if !image_path.is_file() {
        return Err(Error::Corrupt(format!("image file {} missing", image_path.display())));
    }
    let image = codec::read_rgb(&image_path)?;
    if image.width() != manifest.image.width || image.height() != manifest.image.height {
        return Err(Error::Corrupt(format!(
            "image is {}x{} but manifest declares {}x{}",
            image.width(),
            image.height(),
            manifest.image.width,
            manifest.image.height
        )));
    }

    let l = manifest.tokens.len();
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for entry in manifest.layers {
        let expected = (entry.heads * entry.height * entry.width * l * 4) as u64;
        if entry.byte_length != expected {
            return Err(Error::Corrupt(format!(
                "layer {} declares {} bytes, expected {expected} for {} heads x {}x{} x {l} tokens",
                entry.layer_id, entry.byte_length, entry.heads, entry.height, entry.width
            )));
        }
        let file = member_path(dir, &entry.file)?;
        let bytes = fs::read(&file).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => {
                Error::Corrupt(format!("layer file {} missing", file.display()))
            }
            _ => Error::io(&file, e),
        })?;
        if bytes.len() as u64 != entry.byte_length {
            return Err(Error::Corrupt(format!(
                "layer file {} has {} bytes, manifest declares {}",
                file.display(),
                bytes.len(),
                entry.byte_length
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        layers.push(AttentionLayer {
            layer_id: entry.layer_id,
            heads: entry.heads,
            width: entry.width,
            height: entry.height,
            timestep: entry.timestep,
            data,
        });
    }

    let stack = AttentionStack {
        image,
        prompt: manifest.prompt,
        seed: manifest.seed,
        tokens: manifest.tokens,
        layers,
    };
    validate_stack(&stack)?;
    Ok(stack)
}

pub fn write_attention_stack(stack: &AttentionStack, path: impl AsRef<Path>) -> Result<()> {
    validate_stack(stack)?;
    let dir = path.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let l = stack.tokens.len();
    let mut entries = Vec::with_capacity(stack.layers.len());
    for layer in &stack.layers {
        let file = layer.file_name();
        let mut bytes = Vec::with_capacity(layer.data.len() * 4);
        for v in &layer.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let out = member_path(dir, &file)?;
        fs::write(&out, &bytes).map_err(|e| Error::io(&out, e))?;
        entries.push(LayerEntry {
            layer_id: layer.layer_id.clone(),
            heads: layer.heads,
            width: layer.width,
            height: layer.height,
            timestep: layer.timestep,
            file,
            byte_length: (layer.heads * layer.height * layer.width * l * 4) as u64,
        });
    }

    codec::write_rgb(&dir.join(IMAGE_FILE), &stack.image)?;

    let manifest = Manifest {
        version: FORMAT_VERSION,
        image: ImageEntry {
            file: IMAGE_FILE.to_string(),
            width: stack.image.width(),
            height: stack.image.height(),
        },
        prompt: stack.prompt.clone(),
        seed: stack.seed,
        tokens: stack.tokens.clone(),
        layers: entries,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let manifest_path = dir.join(MANIFEST_FILE);
    fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))
}

pub(super) fn validate_stack(stack: &AttentionStack) -> Result<()> {
    let l = stack.tokens.len();
    if stack.image.width() == 0 || stack.image.height() == 0 {
        return Err(Error::Corrupt("image has zero size".into()));
    }
    for (i, tok) in stack.tokens.iter().enumerate() {
        if tok.position >= l {
            return Err(Error::Corrupt(format!(
                "token {i} has position {} outside sequence of length {l}",
                tok.position
            )));
        }
        if i > 0 && tok.position <= stack.tokens[i - 1].position {
            return Err(Error::Corrupt(format!(
                "token positions not strictly increasing at index {i}"
            )));
        }
    }

    let mut seen = HashSet::new();
    for layer in &stack.layers {
        let id = &layer.layer_id;
        if layer.heads == 0 || layer.width == 0 || layer.height == 0 {
            return Err(Error::Corrupt(format!("layer {id} has a zero dimension")));
        }
        if !seen.insert((id.as_str(), layer.timestep)) {
            return Err(Error::Corrupt(format!(
                "duplicate layer {id} at timestep {}",
                layer.timestep
            )));
        }
        let expected = layer.heads * layer.height * layer.width * l;
        if layer.data.len() != expected {
            return Err(Error::Corrupt(format!(
                "layer {id} holds {} values, expected {expected}",
                layer.data.len()
            )));
        }
        if let Some(bad) = layer.data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Corrupt(format!("layer {id} contains non-finite value {bad}")));
        }
        if layer.data.iter().any(|&v| v < 0.0) {
            return Err(Error::Corrupt(format!("layer {id} contains negative attention")));
        }
        if l == 0 {
            continue;
        }
        let plane = layer.height * layer.width;
        for head in 0..layer.heads {
            let mut sums = vec![0f64; l];
            let block = &layer.data[head * plane * l..(head + 1) * plane * l];
            for px in block.chunks_exact(l) {
                for (s, &v) in sums.iter_mut().zip(px) {
                    *s += v as f64;
                }
            }
            if let Some((t, s)) = sums
                .iter()
                .enumerate()
                .find(|(_, s)| (**s - 1.0).abs() > SPATIAL_SUM_TOLERANCE)
            {
                return Err(Error::Corrupt(format!(
                    "layer {id} head {head} token {t}: spatial sum {s:.6} is not 1"
                )));
            }
        }
    }
    Ok(())
}
