//! Sequence directory I/O. A sequence is a directory of PNG frames in
//! filename order plus a `groundtruth.txt` with one "x,y,w,h" line per
//! frame (top-left corner convention) and an optional `attributes.txt`
//! with one tag per line.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::geometry::BoundingBox;

#[derive(Debug, Clone)]
pub struct Sequence {
    pub name: String,
    pub frames: Vec<Frame>,
    pub gt: Vec<BoundingBox>,
    pub attributes: Vec<String>,
}

impl Sequence {
    pub fn new(
        name: String,
        frames: Vec<Frame>,
        gt: Vec<BoundingBox>,
        attributes: Vec<String>,
    ) -> Result<Self> {
        if frames.len() != gt.len() {
            return Err(Error::CountMismatch {
                left: frames.len(),
                left_name: "frames".into(),
                right: gt.len(),
                right_name: "ground-truth boxes".into(),
            });
        }
        if frames.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "a sequence needs at least 2 frames, got {}",
                frames.len()
            )));
        }
        Ok(Sequence {
            name,
            frames,
            gt,
            attributes,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Writes frames as zero-padded PNGs plus groundtruth.txt (and
    /// attributes.txt when any tags exist) into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (i, f) in self.frames.iter().enumerate() {
            f.save(&dir.join(format!("{:06}.png", i + 1)))?;
        }
        save_boxes(&dir.join("groundtruth.txt"), &self.gt)?;
        if !self.attributes.is_empty() {
            fs::write(dir.join("attributes.txt"), self.attributes.join("\n") + "\n")?;
        }
        Ok(())
    }
}

impl crate::training::PairSource for Sequence {
    fn num_frames(&self) -> usize {
        self.frames.len()
    }
    fn frame(&self, idx: usize) -> &Frame {
        &self.frames[idx]
    }
    fn gt(&self, idx: usize) -> &BoundingBox {
        &self.gt[idx]
    }
}

/// One "x,y,w,h" line per box, floats printed with full round-trip
/// precision.
pub fn save_boxes(path: &Path, boxes: &[BoundingBox]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for b in boxes {
        let (x, y, w, h) = b.to_tlwh();
        writeln!(f, "{x},{y},{w},{h}")?;
    }
    Ok(())
}

/// Parses "x,y,w,h" lines; errors carry the 1-based line number.
pub fn load_boxes(path: &Path) -> Result<Vec<BoundingBox>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::InvalidArgument(format!("cannot read {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = |msg: String| Error::MalformedLine {
            path: path.display().to_string(),
            line: idx + 1,
            msg,
        };
        if parts.len() != 4 {
            return Err(bad(format!("expected 4 fields, got {}", parts.len())));
        }
        let mut v = [0.0f64; 4];
        for (k, p) in parts.iter().enumerate() {
            v[k] = p
                .parse()
                .map_err(|e| bad(format!("field {}: {e}", k + 1)))?;
        }
        out.push(
            BoundingBox::from_tlwh(v[0], v[1], v[2], v[3])
                .map_err(|e| bad(e.to_string()))?,
        );
    }
    Ok(out)
}

/// Loads a sequence directory: PNG frames in ascending filename order,
/// groundtruth.txt, optional attributes.txt. Frame and box counts must
/// agree.
pub fn load_sequence(dir: &Path) -> Result<Sequence> {
    let mut image_paths = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            image_paths.push(path);
        }
    }
    image_paths.sort();
    let frames: Vec<Frame> = image_paths
        .iter()
        .map(|p| Frame::load(p))
        .collect::<Result<_>>()?;
    let gt = load_boxes(&dir.join("groundtruth.txt"))?;
    let attributes = match fs::read_to_string(dir.join("attributes.txt")) {
        Ok(text) => text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(e.into()),
    };
    let name = dir
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("sequence")
        .to_string();
    Sequence::new(name, frames, gt, attributes)
}
