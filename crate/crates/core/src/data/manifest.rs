//! On-disk clip format: `manifest.json` next to raw little-endian `f32`
//! tensor files, with masks stored inline as run lengths.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{BinaryMask, FeatureClip, ObjectTrack, ResizeRule, ScaleFeatures};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;
const DTYPE: &str = "float32-le";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub clip_id: String,
    pub expression: String,
    pub frames: usize,
    pub dtype: String,
    /// Number of feature scales; must equal `scales.len()`.
    pub levels: usize,
    pub scales: Vec<ScaleEntry>,
    pub text: TextEntry,
    pub mask_height: usize,
    pub mask_width: usize,
    pub objects: Vec<ObjectEntry>,
    pub target_ids: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resize: Option<ResizeRule>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaleEntry {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextEntry {
    pub tokens: usize,
    pub channels: usize,
    pub tokens_file: String,
    pub sentence_file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectEntry {
    pub id: usize,
    /// One run-length list per frame.
    pub rle: Vec<Vec<u32>>,
}

fn f32_bytes(data: &[f32]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn read_f32(dir: &Path, file: &str, field: &str, expected: usize) -> Result<Vec<f32>> {
    let path = dir.join(file);
    let bytes = fs::read(&path).map_err(|e| {
        Error::load(
            &path,
            format!("{field}: cannot read tensor file {file}: {e}"),
        )
    })?;
    if bytes.len() != expected * 4 {
        return Err(Error::load(
            &path,
            format!(
                "{field}: {file} holds {} bytes, manifest implies {}",
                bytes.len(),
                expected * 4
            ),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Writes `clip` into `dir` (created if missing) and returns the manifest path.
pub fn save_clip(clip: &FeatureClip, dir: &Path) -> Result<PathBuf> {
    clip.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut scales = Vec::with_capacity(clip.scales.len());
    for (l, s) in clip.scales.iter().enumerate() {
        let file = format!("scale{l}.f32");
        write_atomic(&dir.join(&file), &f32_bytes(&s.data))?;
        scales.push(ScaleEntry {
            height: s.height,
            width: s.width,
            channels: s.channels,
            file,
        });
    }
    write_atomic(&dir.join("text_tokens.f32"), &f32_bytes(clip.text_tokens.data()))?;
    write_atomic(&dir.join("text_sentence.f32"), &f32_bytes(&clip.text_sentence))?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        clip_id: clip.clip_id.clone(),
        expression: clip.expression.clone(),
        frames: clip.frames,
        dtype: DTYPE.into(),
        levels: scales.len(),
        scales,
        text: TextEntry {
            tokens: clip.num_tokens(),
            channels: clip.text_channels(),
            tokens_file: "text_tokens.f32".into(),
            sentence_file: "text_sentence.f32".into(),
        },
        mask_height: clip.mask_height,
        mask_width: clip.mask_width,
        objects: clip
            .objects
            .iter()
            .map(|o| ObjectEntry {
                id: o.id,
                rle: o.masks.iter().map(BinaryMask::to_rle).collect(),
            })
            .collect(),
        target_ids: clip.target_ids.clone(),
        resize: clip.resize,
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Json {
        path: path.clone(),
        source: e,
    })?;
    write_atomic(&path, &json)?;
    Ok(path)
}

/// Loads and validates a clip from its manifest.
pub fn load_clip(manifest_path: &Path) -> Result<FeatureClip> {
    let bytes = fs::read(manifest_path).map_err(|e| Error::load(manifest_path, e.to_string()))?;
    let m: Manifest = serde_json::from_slice(&bytes).map_err(|e| Error::Json {
        path: manifest_path.to_path_buf(),
        source: e,
    })?;
    let err = |msg: String| Error::load(manifest_path, msg);
    if m.format_version != FORMAT_VERSION {
        return Err(err(format!(
            "format_version {} unsupported (expected {FORMAT_VERSION})",
            m.format_version
        )));
    }
    if m.dtype != DTYPE {
        return Err(err(format!("dtype {:?} unsupported", m.dtype)));
    }
    if m.frames == 0 {
        return Err(err("frames: must be >= 1".into()));
    }
    if m.levels != m.scales.len() {
        return Err(err(format!(
            "levels declares {} scales but {} are listed (scales[{}] missing)",
            m.levels,
            m.scales.len(),
            m.scales.len().min(m.levels)
        )));
    }
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let mut scales = Vec::with_capacity(m.scales.len());
    for (l, s) in m.scales.iter().enumerate() {
        let field = format!("scales[{l}]");
        let data = read_f32(dir, &s.file, &field, m.frames * s.height * s.width * s.channels)?;
        scales.push(ScaleFeatures {
            height: s.height,
            width: s.width,
            channels: s.channels,
            data,
        });
    }
    let tokens = read_f32(
        dir,
        &m.text.tokens_file,
        "text.tokens_file",
        m.text.tokens * m.text.channels,
    )?;
    let sentence = read_f32(dir, &m.text.sentence_file, "text.sentence_file", m.text.channels)?;
    let mut objects = Vec::with_capacity(m.objects.len());
    for (i, o) in m.objects.iter().enumerate() {
        if o.rle.len() != m.frames {
            return Err(err(format!(
                "objects[{i}].rle: {} frames, expected {}",
                o.rle.len(),
                m.frames
            )));
        }
        let masks = o
            .rle
            .iter()
            .enumerate()
            .map(|(t, runs)| {
                BinaryMask::from_rle(m.mask_height, m.mask_width, runs)
                    .map_err(|e| err(format!("objects[{i}].rle[{t}]: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        objects.push(ObjectTrack { id: o.id, masks });
    }
    let clip = FeatureClip {
        clip_id: m.clip_id,
        expression: m.expression,
        frames: m.frames,
        scales,
        text_tokens: Tensor::new([m.text.tokens, m.text.channels], tokens)?,
        text_sentence: sentence,
        mask_height: m.mask_height,
        mask_width: m.mask_width,
        objects,
        target_ids: m.target_ids,
        resize: m.resize,
    };
    clip.validate().map_err(|e| err(e.to_string()))?;
    Ok(clip)
}

/// Manifest paths of every clip directory under `root`, sorted. `root` may
/// itself be a clip directory or a manifest file.
pub fn list_clips(root: &Path) -> Result<Vec<PathBuf>> {
    if root.is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    if root.join(MANIFEST_FILE).is_file() {
        return Ok(vec![root.join(MANIFEST_FILE)]);
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let path = entry.map_err(|e| Error::io(root, e))?.path();
        if path.join(MANIFEST_FILE).is_file() {
            out.push(path.join(MANIFEST_FILE));
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(Error::load(root, "no clip manifests found"));
    }
    Ok(out)
}

/// Per-frame predicted masks for one clip, in the manifest mask encoding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionFile {
    pub clip_id: String,
    pub mask_height: usize,
    pub mask_width: usize,
    pub rle: Vec<Vec<u32>>,
}

impl PredictionFile {
    pub fn from_masks(clip_id: &str, masks: &[BinaryMask]) -> Self {
        let (h, w) = masks.first().map_or((0, 0), |m| (m.height(), m.width()));
        PredictionFile {
            clip_id: clip_id.to_string(),
            mask_height: h,
            mask_width: w,
            rle: masks.iter().map(BinaryMask::to_rle).collect(),
        }
    }

    pub fn masks(&self) -> Result<Vec<BinaryMask>> {
        self.rle
            .iter()
            .map(|r| BinaryMask::from_rle(self.mask_height, self.mask_width, r))
            .collect()
    }
}

pub fn write_prediction(dir: &Path, pred: &PredictionFile) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(format!("{}.json", pred.clip_id));
    let json = serde_json::to_vec(pred).map_err(|e| Error::Json {
        path: path.clone(),
        source: e,
    })?;
    write_atomic(&path, &json)?;
    Ok(path)
}

pub fn read_prediction(path: &Path) -> Result<PredictionFile> {
    let bytes = fs::read(path).map_err(|e| Error::load(path, e.to_string()))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};

    fn tiny() -> FeatureClip {
        generate_synthetic(&SyntheticSpec {
            seed: 5,
            frames: 2,
            height: 16,
            width: 16,
            scales: vec![(8, 8), (4, 4), (2, 2)],
            channels: 4,
            text_channels: 4,
            text_tokens: 2,
            objects: 2,
            min_radius: 2.0,
            max_radius: 4.0,
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let clip = tiny();
        let path = save_clip(&clip, dir.path()).unwrap();
        assert_eq!(load_clip(&path).unwrap(), clip);
        assert_eq!(list_clips(dir.path()).unwrap(), vec![path]);
    }

    #[test]
    fn missing_scale_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = save_clip(&tiny(), dir.path()).unwrap();
        fs::remove_file(dir.path().join("scale2.f32")).unwrap();
        let msg = load_clip(&path).unwrap_err().to_string();
        assert!(msg.contains("scales[2]"), "{msg}");
    }

    #[test]
    fn every_truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = save_clip(&tiny(), dir.path()).unwrap();
        let files: Vec<PathBuf> = fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        for file in files {
            let original = fs::read(&file).unwrap();
            for cut in [0, 1, original.len() / 2, original.len() - 1] {
                fs::write(&file, &original[..cut]).unwrap();
                assert!(load_clip(&path).is_err(), "{} cut at {cut}", file.display());
            }
            fs::write(&file, &original).unwrap();
        }
        assert!(load_clip(&path).is_ok());
    }

    #[test]
    fn flipped_header_fields_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = save_clip(&tiny(), dir.path()).unwrap();
        let good: serde_json::Value = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
        let edits: Vec<(&str, Box<dyn Fn(&mut serde_json::Value)>)> = vec![
            ("format_version", Box::new(|m| m["format_version"] = 9.into())),
            ("dtype", Box::new(|m| m["dtype"] = "float64".into())),
            ("frames+1", Box::new(|m| m["frames"] = 3.into())),
            ("frames=0", Box::new(|m| m["frames"] = 0.into())),
            ("scale height", Box::new(|m| m["scales"][1]["height"] = 5.into())),
            ("scale channels", Box::new(|m| m["scales"][0]["channels"] = 3.into())),
            ("scale order", Box::new(|m| {
                let s = m["scales"].as_array_mut().unwrap();
                s.swap(0, 1);
            })),
            ("drop scale", Box::new(|m| {
                m["scales"].as_array_mut().unwrap().pop();
            })),
            ("levels", Box::new(|m| m["levels"] = 2.into())),
            ("text tokens", Box::new(|m| m["text"]["tokens"] = 3.into())),
            ("text channels", Box::new(|m| m["text"]["channels"] = 5.into())),
            ("mask height", Box::new(|m| m["mask_height"] = 15.into())),
            ("rle", Box::new(|m| m["objects"][0]["rle"][0][0] = 1000.into())),
            ("rle frames", Box::new(|m| {
                m["objects"][0]["rle"].as_array_mut().unwrap().pop();
            })),
            ("target id", Box::new(|m| m["target_ids"] = vec![7].into())),
            ("duplicate id", Box::new(|m| m["objects"][1]["id"] = m["objects"][0]["id"].clone())),
            ("unknown field", Box::new(|m| m["extra"] = 1.into())),
            ("missing field", Box::new(|m| {
                m.as_object_mut().unwrap().remove("expression");
            })),
        ];
        for (what, edit) in edits {
            let mut m = good.clone();
            edit(&mut m);
            fs::write(&path, serde_json::to_vec(&m).unwrap()).unwrap();
            assert!(load_clip(&path).is_err(), "accepted corrupted {what}");
        }
    }

    #[test]
    fn prediction_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let masks = vec![
            BinaryMask::from_fn(4, 5, |r, c| r == c),
            BinaryMask::empty(4, 5),
        ];
        let pred = PredictionFile::from_masks("clip-a", &masks);
        let path = write_prediction(dir.path(), &pred).unwrap();
        let back = read_prediction(&path).unwrap();
        assert_eq!(back.masks().unwrap(), masks);
    }
}
