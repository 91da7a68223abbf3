//! Dataset directory layout and round-trip IO:
//!
//! ```text
//! <dir>/manifest.tsv       id, split, fg_class, bg_class, x0, y0, x1, y1
//! <dir>/images/<id>.ppm    binary P6, 8-bit
//! <dir>/masks/<id>.pgm     binary P5, values 0 or 255
//! ```
//!
//! The train split is drawn from the biased co-occurrence matrix, the test
//! split from the uniform one; generation is a pure function of the config.

use crate::error::{Error, Result};
use crate::eval::BBox;
use crate::pnm::{self, GrayImage, RgbImage};
use crate::rng::CounterRng;
use crate::synth::{
    build_cooc_matrix, render_scene, sample_scene_spec, tight_bbox, uniform_cooc_matrix, Scene,
};
use crate::tensor::Tensor;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub id: String,
    pub split: Split,
    pub fg_class: usize,
    pub bg_class: usize,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub rows: Vec<ManifestRow>,
}

impl DatasetManifest {
    pub fn count(&self, split: Split) -> usize {
        self.rows.iter().filter(|r| r.split == split).count()
    }
}

#[derive(Debug, Clone)]
pub struct GenConfig {
    pub seed: u64,
    pub image_size: usize,
    pub num_fg_classes: usize,
    pub num_bg_classes: usize,
    pub cooc_bias: f32,
    pub train_size: usize,
    pub test_size: usize,
}

const MANIFEST_HEADER: &str = "id\tsplit\tfg_class\tbg_class\tx0\ty0\tx1\ty1";

/// Generate both splits into `out_dir`. Byte-identical for identical configs.
pub fn generate_split(cfg: &GenConfig, out_dir: &Path) -> Result<DatasetManifest> {
    let biased = build_cooc_matrix(cfg.num_fg_classes, cfg.num_bg_classes, cfg.cooc_bias)?;
    let uniform = uniform_cooc_matrix(cfg.num_fg_classes, cfg.num_bg_classes)?;
    let images_dir = out_dir.join("images");
    let masks_dir = out_dir.join("masks");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    std::fs::create_dir_all(&masks_dir).map_err(|e| Error::io(&masks_dir, e))?;

    let root = CounterRng::new(cfg.seed);
    let mut rows = Vec::with_capacity(cfg.train_size + cfg.test_size);
    let mut manifest_text = String::from(MANIFEST_HEADER);
    manifest_text.push('\n');

    let plans = [
        (Split::Train, cfg.train_size, &biased, root.derive(1)),
        (Split::Test, cfg.test_size, &uniform, root.derive(2)),
    ];
    for (split, count, matrix, mut rng) in plans {
        for i in 0..count {
            let spec = sample_scene_spec(matrix, cfg.image_size, &mut rng);
            let mut scene = render_scene(&spec, cfg.image_size)?;
            scene.id = format!("{}_{:05}", split.as_str(), i);
            write_scene_files(&images_dir, &masks_dir, &scene, cfg.image_size)?;
            writeln!(
                manifest_text,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                scene.id,
                split.as_str(),
                scene.fg_class,
                scene.bg_class,
                scene.bbox.x0,
                scene.bbox.y0,
                scene.bbox.x1,
                scene.bbox.y1
            )
            .expect("string write");
            rows.push(ManifestRow {
                id: scene.id.clone(),
                split,
                fg_class: scene.fg_class,
                bg_class: scene.bg_class,
                bbox: scene.bbox,
            });
        }
    }
    let manifest_path = out_dir.join("manifest.tsv");
    std::fs::write(&manifest_path, manifest_text).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(DatasetManifest { rows })
}

fn write_scene_files(images_dir: &Path, masks_dir: &Path, scene: &Scene, size: usize) -> Result<()> {
    let img = RgbImage {
        width: size,
        height: size,
        pixels: scene.rgb_bytes(),
    };
    pnm::write_ppm(&images_dir.join(format!("{}.ppm", scene.id)), &img)?;
    let mask = GrayImage {
        width: size,
        height: size,
        pixels: scene.mask_bytes(),
    };
    pnm::write_pgm(&masks_dir.join(format!("{}.pgm", scene.id)), &mask)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("manifest.tsv");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == MANIFEST_HEADER => {}
        other => {
            return Err(Error::Data(format!(
                "manifest.tsv: bad header {other:?}"
            )))
        }
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 8 {
            return Err(Error::Data(format!(
                "manifest.tsv line {}: expected 8 fields, got {}",
                lineno + 2,
                fields.len()
            )));
        }
        let split = match fields[1] {
            "train" => Split::Train,
            "test" => Split::Test,
            other => {
                return Err(Error::Data(format!(
                    "manifest.tsv line {}: unknown split '{other}'",
                    lineno + 2
                )))
            }
        };
        let num = |s: &str, what: &str| -> Result<usize> {
            s.parse::<usize>().map_err(|_| {
                Error::Data(format!(
                    "manifest.tsv line {}: bad {what} '{s}'",
                    lineno + 2
                ))
            })
        };
        rows.push(ManifestRow {
            id: fields[0].to_string(),
            split,
            fg_class: num(fields[2], "fg_class")?,
            bg_class: num(fields[3], "bg_class")?,
            bbox: BBox {
                x0: num(fields[4], "x0")?,
                y0: num(fields[5], "y0")?,
                x1: num(fields[6], "x1")?,
                y1: num(fields[7], "y1")?,
            },
        });
    }
    Ok(DatasetManifest { rows })
}

#[derive(Debug)]
pub struct Dataset {
    pub train: Vec<Scene>,
    pub test: Vec<Scene>,
}

/// Load every scene listed in the manifest, verifying that each mask exists,
/// matches the declared bounding box, and that sizes line up.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for row in &manifest.rows {
        let scene = load_scene(dir, row)?;
        match row.split {
            Split::Train => train.push(scene),
            Split::Test => test.push(scene),
        }
    }
    Ok(Dataset { train, test })
}

fn load_scene(dir: &Path, row: &ManifestRow) -> Result<Scene> {
    let img_path = dir.join("images").join(format!("{}.ppm", row.id));
    let rgb = pnm::read_ppm(&img_path)
        .map_err(|e| Error::Data(format!("scene '{}': {e}", row.id)))?;
    let mask_path = dir.join("masks").join(format!("{}.pgm", row.id));
    let gray = pnm::read_pgm(&mask_path)
        .map_err(|e| Error::Data(format!("scene '{}': {e}", row.id)))?;
    if rgb.width != rgb.height || gray.width != rgb.width || gray.height != rgb.height {
        return Err(Error::Data(format!(
            "scene '{}': image {}x{} and mask {}x{} sizes disagree",
            row.id, rgb.width, rgb.height, gray.width, gray.height
        )));
    }
    let s = rgb.width;
    let plane = s * s;
    let mut img = vec![0.0f32; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            img[c * plane + p] = rgb.pixels[p * 3 + c] as f32 / 255.0;
        }
    }
    let mask_bool: Vec<bool> = gray.pixels.iter().map(|&v| v >= 128).collect();
    let mask_f: Vec<f32> = mask_bool.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let recomputed = tight_bbox(&mask_bool, s, s)
        .ok_or_else(|| Error::Data(format!("scene '{}': empty mask", row.id)))?;
    if recomputed != row.bbox {
        return Err(Error::Data(format!(
            "scene '{}': manifest box {:?} does not match mask box {:?}",
            row.id, row.bbox, recomputed
        )));
    }
    Ok(Scene {
        image: Tensor::new(vec![3, s, s], img)?,
        mask: Tensor::new(vec![s, s], mask_f)?,
        bbox: row.bbox,
        fg_class: row.fg_class,
        bg_class: row.bg_class,
        id: row.id.clone(),
    })
}

/// Label-free loading path for test-time adaptation: reads only the id and
/// split columns of the manifest plus the image files. Ground-truth class,
/// background, and box columns are never parsed here.
pub fn load_split_images(dir: &Path, split: Split) -> Result<Vec<(String, Tensor)>> {
    let path = dir.join("manifest.tsv");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for line in text.lines().skip(1) {
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let id = fields
            .next()
            .ok_or_else(|| Error::Data("manifest.tsv: empty row".to_string()))?;
        let row_split = fields
            .next()
            .ok_or_else(|| Error::Data(format!("manifest.tsv: row '{id}' missing split")))?;
        if row_split != split.as_str() {
            continue;
        }
        let img_path = dir.join("images").join(format!("{id}.ppm"));
        let rgb = pnm::read_ppm(&img_path)
            .map_err(|e| Error::Data(format!("scene '{id}': {e}")))?;
        let s = rgb.width;
        if rgb.height != s {
            return Err(Error::Data(format!("scene '{id}': non-square image")));
        }
        let plane = s * s;
        let mut img = vec![0.0f32; 3 * plane];
        for p in 0..plane {
            for c in 0..3 {
                img[c * plane + p] = rgb.pixels[p * 3 + c] as f32 / 255.0;
            }
        }
        out.push((id.to_string(), Tensor::new(vec![3, s, s], img)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(seed: u64) -> GenConfig {
        GenConfig {
            seed,
            image_size: 32,
            num_fg_classes: 4,
            num_bg_classes: 4,
            cooc_bias: 0.9,
            train_size: 24,
            test_size: 8,
        }
    }

    #[test]
    fn generate_writes_expected_rows_with_disjoint_ids() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_split(&small_cfg(5), dir.path()).unwrap();
        assert_eq!(manifest.rows.len(), 32);
        assert_eq!(manifest.count(Split::Train), 24);
        assert_eq!(manifest.count(Split::Test), 8);
        let mut ids: Vec<&str> = manifest.rows.iter().map(|r| r.id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 32);
    }

    #[test]
    fn round_trip_reproduces_scenes_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg(9);
        let manifest = generate_split(&cfg, dir.path()).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.train.len(), 24);
        assert_eq!(ds.test.len(), 8);

        // Regenerate the first train scene directly and compare field by field.
        let biased = build_cooc_matrix(4, 4, 0.9).unwrap();
        let mut rng = CounterRng::new(cfg.seed).derive(1);
        let spec = sample_scene_spec(&biased, 32, &mut rng);
        let mut scene = render_scene(&spec, 32).unwrap();
        scene.id = "train_00000".to_string();
        assert_eq!(ds.train[0], scene);
        assert_eq!(manifest.rows[0].bbox, scene.bbox);
    }

    #[test]
    fn truncated_image_reports_id() {
        let dir = tempfile::tempdir().unwrap();
        generate_split(&small_cfg(2), dir.path()).unwrap();
        let victim = dir.path().join("images/train_00003.ppm");
        let bytes = std::fs::read(&victim).unwrap();
        std::fs::write(&victim, &bytes[..bytes.len() - 10]).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::Data(msg)) => assert!(msg.contains("train_00003"), "{msg}"),
            other => panic!("expected data error, got {other:?}"),
        }
    }

    #[test]
    fn missing_mask_reports_id() {
        let dir = tempfile::tempdir().unwrap();
        generate_split(&small_cfg(2), dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("masks/test_00001.pgm")).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::Data(msg)) => assert!(msg.contains("test_00001"), "{msg}"),
            other => panic!("expected data error, got {other:?}"),
        }
    }

    #[test]
    fn tampered_manifest_box_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        generate_split(&small_cfg(2), dir.path()).unwrap();
        let path = dir.path().join("manifest.tsv");
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        // Shift x0 of the first data row by one.
        let fields: Vec<String> = lines[1].split('\t').map(String::from).collect();
        let mut fields = fields;
        let x0: usize = fields[4].parse().unwrap();
        fields[4] = (x0 + 1).to_string();
        lines[1] = fields.join("\t");
        std::fs::write(&path, lines.join("\n") + "\n").unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Data(_))));
    }

    #[test]
    fn generation_is_byte_identical_for_same_seed() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_split(&small_cfg(31), a.path()).unwrap();
        generate_split(&small_cfg(31), b.path()).unwrap();
        for sub in ["manifest.tsv", "images/train_00000.ppm", "masks/test_00007.pgm"] {
            let x = std::fs::read(a.path().join(sub)).unwrap();
            let y = std::fs::read(b.path().join(sub)).unwrap();
            assert_eq!(x, y, "{sub}");
        }
    }

    #[test]
    fn train_cooccurrence_tracks_biased_matrix() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_cfg(77);
        cfg.train_size = 1200;
        cfg.test_size = 4;
        let manifest = generate_split(&cfg, dir.path()).unwrap();
        let mut dominant = 0usize;
        let mut per_fg = vec![0usize; 4];
        for row in manifest.rows.iter().filter(|r| r.split == Split::Train) {
            per_fg[row.fg_class] += 1;
            if row.bg_class == row.fg_class % 4 {
                dominant += 1;
            }
        }
        let freq = dominant as f32 / 1200.0;
        assert!((freq - 0.9).abs() <= 0.03, "dominant pairing freq {freq}");
        // All foreground classes actually present.
        assert!(per_fg.iter().all(|&c| c > 0));
    }

    #[test]
    fn label_free_loader_matches_full_loader_images() {
        let dir = tempfile::tempdir().unwrap();
        generate_split(&small_cfg(8), dir.path()).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        let imgs = load_split_images(dir.path(), Split::Test).unwrap();
        assert_eq!(imgs.len(), ds.test.len());
        for ((id, img), scene) in imgs.iter().zip(ds.test.iter()) {
            assert_eq!(id, &scene.id);
            assert_eq!(img.data(), scene.image.data());
        }
    }
}
