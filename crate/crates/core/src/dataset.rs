//! On-disk dataset splits loaded into memory.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::pgm::Gray8;
use crate::synthdata::{parse_manifest, MANIFEST_FILE};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Sample {
    /// File stem, e.g. `00012`.
    pub name: String,
    pub category: usize,
    /// `[3, S, S]`
    pub image: Tensor,
    /// `[1, S, S]`, binary.
    pub mask: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct Split {
    pub samples: Vec<Sample>,
    /// Reference images `[3, S, S]` per category.
    pub refs: Vec<Vec<Tensor>>,
    /// Sentence embeddings `[N, C_t]` per category.
    pub text: Vec<Tensor>,
}

/// Replicates a `[1, H, W]` plane over three channels.
pub fn gray_to_rgb(plane: &Tensor) -> Tensor {
    let mut data = Vec::with_capacity(3 * plane.numel());
    for _ in 0..3 {
        data.extend_from_slice(plane.data());
    }
    let s = plane.shape();
    Tensor::new(vec![3, s[1], s[2]], data).expect("three planes")
}

pub fn load_image(path: &Path) -> Result<Tensor> {
    Ok(gray_to_rgb(&Gray8::read(path)?.to_tensor()))
}

/// Masks are binarized at mid-grey.
pub fn load_mask(path: &Path) -> Result<Tensor> {
    Ok(Gray8::read(path)?.to_tensor().map(|v| (v >= 0.5) as u8 as f64))
}

fn stem(path: &str) -> String {
    Path::new(path)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

impl Split {
    /// Loads split `name` (`train` or `test`) of the dataset rooted at `root`,
    /// in manifest order.
    pub fn load(root: &Path, name: &str) -> Result<Self> {
        let manifest_path = root.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let entries = parse_manifest(&text)?;
        let prefix = |sub: &str| format!("{name}/{sub}/");
        let mut split = Split::default();
        let categories = entries.iter().map(|e| e.category + 1).max().unwrap_or(0);
        split.refs = vec![Vec::new(); categories];
        let mut text_slots: Vec<Option<Tensor>> = vec![None; categories];
        for e in &entries {
            let full: PathBuf = root.join(&e.path);
            if e.path.starts_with(&prefix("images")) {
                let mask_path = root.join(prefix("masks")).join(format!("{}.pgm", stem(&e.path)));
                split.samples.push(Sample {
                    name: stem(&e.path),
                    category: e.category,
                    image: load_image(&full)?,
                    mask: load_mask(&mask_path)?,
                });
            } else if e.path.starts_with(&prefix("refs")) {
                split.refs[e.category].push(load_image(&full)?);
            } else if e.path.starts_with(&prefix("text")) {
                let bytes = std::fs::read(&full).map_err(|err| Error::io(&full, err))?;
                text_slots[e.category] = Some(Tensor::from_bytes(&bytes)?);
            }
        }
        if split.samples.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "split {name} under {} has no samples",
                root.display()
            )));
        }
        split.text = text_slots
            .into_iter()
            .enumerate()
            .map(|(c, t)| t.ok_or_else(|| Error::Format(format!("split {name} lacks text for category {c}"))))
            .collect::<Result<_>>()?;
        Ok(split)
    }

    /// The first `n` samples, with all references kept.
    pub fn truncated(&self, n: usize) -> Self {
        Self {
            samples: self.samples.iter().take(n).cloned().collect(),
            refs: self.refs.clone(),
            text: self.text.clone(),
        }
    }
}
