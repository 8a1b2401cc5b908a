//! Dataset manifests and salient ground-truth selection.
//!
//! An image may contain several annotated objects, but exactly one of them
//! carries the image-level label for training: the salient one. Selection is
//! lexicographic — label consistency, then visibility, then size, then
//! centrality — with seeded random choice among exact ties.
//!
//! Manifests are line-delimited UTF-8: a header
//! `OCSMANIFEST v1 <split> <num_classes>` followed by one record per line,
//! `<image-path>\t<label>\t<salient_idx>\t<n_objects>\t{x0,y0,x1,y1,label,occ,trunc}...`

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::geometry::Rect;
use crate::{OcsError, Result};

/// One annotated object.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ObjectAnnotation {
    pub bbox: Rect,
    pub class_label: usize,
    pub occluded: bool,
    pub truncated: bool,
}

/// One image record: path, image-level label, candidate objects, and the
/// index of the selected salient ground truth (if any).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotationRecord {
    pub image_path: String,
    pub label: usize,
    pub objects: Vec<ObjectAnnotation>,
    pub salient_gt: Option<usize>,
}

impl AnnotationRecord {
    /// The salient object's box, when one is selected.
    pub fn salient_box(&self) -> Option<Rect> {
        self.salient_gt.map(|i| self.objects[i].bbox)
    }
}

/// An ordered set of records plus split metadata.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub split: String,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub records: Vec<AnnotationRecord>,
}

impl DatasetManifest {
    pub fn new(split: impl Into<String>, num_classes: usize) -> DatasetManifest {
        DatasetManifest {
            split: split.into(),
            num_classes,
            class_names: (0..num_classes).map(|c| format!("class_{c}")).collect(),
            records: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Pick the salient ground truth among `candidates` for an image labeled
/// `image_label` with dimensions `(image_w, image_h)`.
///
/// Filter and prefer, in order: label-consistent only; non-occluded over
/// occluded; larger area; center closer to the image center. Exact ties are
/// resolved by a seeded uniform draw. Errors when no candidate carries the
/// image label.
pub fn select_salient_ground_truth<R: Rng + ?Sized>(
    candidates: &[ObjectAnnotation],
    image_label: usize,
    image_w: usize,
    image_h: usize,
    rng: &mut R,
) -> Result<usize> {
    let mut pool: Vec<usize> = (0..candidates.len())
        .filter(|&i| candidates[i].class_label == image_label)
        .collect();
    if pool.is_empty() {
        return Err(OcsError::Config(format!(
            "unlabelable image: no candidate has class {image_label}"
        )));
    }

    if pool.iter().any(|&i| !candidates[i].occluded) {
        pool.retain(|&i| !candidates[i].occluded);
    }

    let max_area = pool.iter().map(|&i| candidates[i].bbox.area()).max().unwrap();
    pool.retain(|&i| candidates[i].bbox.area() == max_area);

    // Squared center distance in doubled coordinates, so it stays integer.
    let center_dist = |r: &Rect| -> i64 {
        let dx = (r.x0() + r.x1()) as i64 - image_w as i64;
        let dy = (r.y0() + r.y1()) as i64 - image_h as i64;
        dx * dx + dy * dy
    };
    let min_dist = pool.iter().map(|&i| center_dist(&candidates[i].bbox)).min().unwrap();
    pool.retain(|&i| center_dist(&candidates[i].bbox) == min_dist);

    Ok(pool[rng.random_range(0..pool.len())])
}

/// Join a manifest-relative image path to the manifest's directory.
pub fn resolve_image_path(manifest_path: &Path, image_path: &str) -> PathBuf {
    let p = Path::new(image_path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest_path.parent().unwrap_or(Path::new(".")).join(p)
    }
}

/// Serialize to the line format. Inverse of [`load_manifest`].
pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let mut out = String::new();
    writeln!(
        out,
        "OCSMANIFEST v1 {} {}",
        manifest.split, manifest.num_classes
    )
    .expect("string write");
    for rec in &manifest.records {
        if rec.image_path.contains(['\t', '\n']) {
            return Err(OcsError::Config(format!(
                "image path {:?} contains tab or newline",
                rec.image_path
            )));
        }
        let salient = rec.salient_gt.map(|i| i as i64).unwrap_or(-1);
        write!(
            out,
            "{}\t{}\t{}\t{}",
            rec.image_path,
            rec.label,
            salient,
            rec.objects.len()
        )
        .expect("string write");
        for obj in &rec.objects {
            write!(
                out,
                "\t{{{},{},{},{},{},{},{}}}",
                obj.bbox.x0(),
                obj.bbox.y0(),
                obj.bbox.x1(),
                obj.bbox.y1(),
                obj.class_label,
                obj.occluded as u8,
                obj.truncated as u8
            )
            .expect("string write");
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| OcsError::io(path.display().to_string(), e))
}

/// Parse a manifest file, validating every record.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| OcsError::io(path.display().to_string(), e))?;
    let loc = path.display().to_string();
    let mut lines = text.lines().enumerate();

    let (_, header) = lines
        .next()
        .ok_or_else(|| OcsError::format(&loc, 1, "empty file"))?;
    let head: Vec<&str> = header.split(' ').collect();
    if head.len() != 4 || head[0] != "OCSMANIFEST" || head[1] != "v1" {
        return Err(OcsError::format(
            &loc,
            1,
            format!("bad header {header:?}, want 'OCSMANIFEST v1 <split> <num_classes>'"),
        ));
    }
    let num_classes: usize = head[3]
        .parse()
        .map_err(|_| OcsError::format(&loc, 1, format!("bad class count {:?}", head[3])))?;
    let mut manifest = DatasetManifest::new(head[2], num_classes);

    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.is_empty() {
            continue;
        }
        let rec = parse_record(line, num_classes)
            .map_err(|msg| OcsError::format(&loc, line_no, msg))?;
        manifest.records.push(rec);
    }
    Ok(manifest)
}

fn parse_record(line: &str, num_classes: usize) -> std::result::Result<AnnotationRecord, String> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() < 4 {
        return Err(format!("want at least 4 tab-separated fields, got {}", fields.len()));
    }
    let image_path = fields[0].to_string();
    if image_path.is_empty() {
        return Err("empty image path".into());
    }
    let label: usize = fields[1].parse().map_err(|_| format!("bad label {:?}", fields[1]))?;
    if label >= num_classes {
        return Err(format!("label {label} out of range for {num_classes} classes"));
    }
    let salient: i64 = fields[2]
        .parse()
        .map_err(|_| format!("bad salient index {:?}", fields[2]))?;
    let n_objects: usize = fields[3]
        .parse()
        .map_err(|_| format!("bad object count {:?}", fields[3]))?;
    if fields.len() != 4 + n_objects {
        return Err(format!(
            "record declares {n_objects} objects but carries {} fields after the count",
            fields.len() - 4
        ));
    }

    let mut objects = Vec::with_capacity(n_objects);
    for raw in &fields[4..] {
        objects.push(parse_object(raw, num_classes)?);
    }

    let salient_gt = match salient {
        -1 => None,
        i if i >= 0 && (i as usize) < objects.len() => Some(i as usize),
        i => return Err(format!("salient index {i} out of range for {n_objects} objects")),
    };
    if let Some(i) = salient_gt {
        if objects[i].class_label != label {
            return Err(format!(
                "salient object has class {} but image label is {label}",
                objects[i].class_label
            ));
        }
    }

    Ok(AnnotationRecord {
        image_path,
        label,
        objects,
        salient_gt,
    })
}

fn parse_object(raw: &str, num_classes: usize) -> std::result::Result<ObjectAnnotation, String> {
    let inner = raw
        .strip_prefix('{')
        .and_then(|s| s.strip_suffix('}'))
        .ok_or_else(|| format!("object {raw:?} not brace-delimited"))?;
    let parts: Vec<&str> = inner.split(',').collect();
    if parts.len() != 7 {
        return Err(format!("object {raw:?} needs 7 comma-separated values"));
    }
    let nums: Vec<i64> = parts
        .iter()
        .map(|p| p.parse::<i64>().map_err(|_| format!("bad number {p:?} in {raw:?}")))
        .collect::<std::result::Result<_, _>>()?;
    let (x0, y0, x1, y1) = (nums[0], nums[1], nums[2], nums[3]);
    if x0 < 0 || y0 < 0 {
        return Err(format!("box ({x0},{y0},{x1},{y1}) is out of bounds"));
    }
    let bbox = Rect::new(x0 as i32, y0 as i32, x1 as i32, y1 as i32)
        .map_err(|_| format!("box ({x0},{y0},{x1},{y1}) is degenerate"))?;
    let class_label = nums[4] as usize;
    if nums[4] < 0 || class_label >= num_classes {
        return Err(format!("object class {} out of range", nums[4]));
    }
    let flag = |v: i64, what: &str| -> std::result::Result<bool, String> {
        match v {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(format!("{what} flag must be 0 or 1, got {v}")),
        }
    };
    Ok(ObjectAnnotation {
        bbox,
        class_label,
        occluded: flag(nums[5], "occlusion")?,
        truncated: flag(nums[6], "truncation")?,
    })
}
