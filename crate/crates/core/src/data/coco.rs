//! COCO-style keypoint annotation files (subset of the schema).

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::image::write_pnm8;
use super::{DataError, ImageSource, Keypoint, PoseSample, SkeletonTemplate};

#[derive(Debug, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub images: Vec<ImageEntry>,
    pub annotations: Vec<AnnotationEntry>,
    #[serde(default)]
    pub categories: Vec<CategoryEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: u64,
    pub file_name: String,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AnnotationEntry {
    pub id: u64,
    pub image_id: u64,
    /// Flat `[x1, y1, v1, x2, y2, v2, ...]`.
    pub keypoints: Vec<f64>,
    pub bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub area: Option<f64>,
    #[serde(default)]
    pub num_keypoints: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_size: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CategoryEntry {
    pub id: u64,
    pub name: String,
    #[serde(default)]
    pub keypoints: Vec<String>,
    #[serde(default)]
    pub skeleton: Vec<[usize; 2]>,
}

fn schema(path: impl Into<String>, message: impl Into<String>) -> DataError {
    DataError::SchemaError { path: path.into(), message: message.into() }
}

/// Parse an annotation document; image paths resolve against `base`.
pub fn parse_annotations(text: &str, base: &Path, num_keypoints: usize) -> Result<Vec<PoseSample>, DataError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let file: AnnotationFile = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        schema(path, e.into_inner().to_string())
    })?;
    let images: HashMap<u64, &ImageEntry> = file.images.iter().map(|i| (i.id, i)).collect();
    file.annotations
        .iter()
        .enumerate()
        .map(|(i, a)| {
            if a.keypoints.len() != 3 * num_keypoints {
                return Err(schema(
                    format!("annotations[{i}].keypoints"),
                    format!("expected {} values, found {}", 3 * num_keypoints, a.keypoints.len()),
                ));
            }
            let img = images
                .get(&a.image_id)
                .ok_or_else(|| schema(format!("annotations[{i}].image_id"), format!("unknown image {}", a.image_id)))?;
            if a.keypoints.iter().chain(&a.bbox).any(|v| !v.is_finite()) {
                return Err(schema(format!("annotations[{i}]"), "non-finite number"));
            }
            let keypoints = a.keypoints.chunks(3).map(|c| Keypoint { x: c[0], y: c[1], v: c[2] }).collect();
            let area = a.area.unwrap_or(a.bbox[2] * a.bbox[3]);
            Ok(PoseSample {
                id: a.id.to_string(),
                image: ImageSource::Lazy(base.join(&img.file_name)),
                keypoints,
                bbox: a.bbox,
                scale: area.max(0.0).sqrt(),
                head_size: a.head_size,
            })
        })
        .collect()
}

/// Read an annotation file with `num_keypoints` joints per person.
pub fn load_annotations(path: &Path, num_keypoints: usize) -> Result<Vec<PoseSample>, DataError> {
    let text = fs::read_to_string(path).map_err(|e| DataError::Io(path.display().to_string(), e.to_string()))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_annotations(&text, &base, num_keypoints)
}

/// Write `samples` as `<dir>/<name>` plus one PPM per sample under
/// `<dir>/images/`. Returns the annotation path.
pub fn write_annotations(
    samples: &[PoseSample],
    template: &SkeletonTemplate,
    dir: &Path,
    name: &str,
) -> Result<PathBuf, DataError> {
    let io = |p: &Path, e: std::io::Error| DataError::Io(p.display().to_string(), e.to_string());
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| io(&img_dir, e))?;
    let mut file = AnnotationFile {
        images: Vec::with_capacity(samples.len()),
        annotations: Vec::with_capacity(samples.len()),
        categories: vec![CategoryEntry {
            id: 1,
            name: "person".into(),
            keypoints: template.joints.iter().map(|j| j.name.clone()).collect(),
            skeleton: template.bones.iter().map(|b| [b.parent + 1, b.child + 1]).collect(),
        }],
    };
    for (i, s) in samples.iter().enumerate() {
        let img = s.image()?;
        let file_name = format!("images/{:06}.ppm", i);
        write_pnm8(&dir.join(&file_name), &img)?;
        let id = i as u64 + 1;
        file.images.push(ImageEntry { id, file_name, height: img.height, width: img.width });
        file.annotations.push(AnnotationEntry {
            id,
            image_id: id,
            keypoints: s.keypoints.iter().flat_map(|k| [k.x, k.y, k.v]).collect(),
            bbox: s.bbox,
            area: Some(s.scale * s.scale),
            num_keypoints: s.keypoints.iter().filter(|k| k.labeled()).count(),
            head_size: s.head_size,
        });
    }
    let path = dir.join(name);
    let text = serde_json::to_string(&file).map_err(|e| DataError::Invalid(e.to_string()))?;
    fs::write(&path, text).map_err(|e| io(&path, e))?;
    Ok(path)
}
