//! Datasets: VisDrone annotation files, a synthetic small-object generator,
//! mosaic augmentation and letterboxing.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{DynamicImage, Rgb, Rgb32FImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::GroundTruth;
use crate::error::{Error, Result};
use crate::geometry::{intersection, BBox};
use crate::tensor::Tensor;

/// Fill value of letterbox padding and empty mosaic regions.
pub const PAD_VALUE: f32 = 114.0 / 255.0;

/// Boxes narrower or shorter than this after clipping are discarded.
pub const MIN_BOX_SIDE: f64 = 2.0;

/// One line of a VisDrone annotation file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub bbox_left: i64,
    pub bbox_top: i64,
    pub width: i64,
    pub height: i64,
    pub score: i64,
    pub category: i64,
    pub truncation: i64,
    pub occlusion: i64,
}

impl AnnotationRecord {
    pub fn bbox(&self) -> BBox {
        BBox {
            x1: self.bbox_left as f64,
            y1: self.bbox_top as f64,
            x2: (self.bbox_left + self.width) as f64,
            y2: (self.bbox_top + self.height) as f64,
        }
    }

    /// Class index for categories `1..=num_classes`.
    pub fn class(&self, num_classes: usize) -> Option<usize> {
        (self.category >= 1 && self.category as usize <= num_classes).then(|| self.category as usize - 1)
    }

    pub fn from_gt(gt: &GroundTruth) -> Self {
        let l = gt.bbox.x1.round() as i64;
        let t = gt.bbox.y1.round() as i64;
        AnnotationRecord {
            bbox_left: l,
            bbox_top: t,
            width: (gt.bbox.x2.round() as i64 - l).max(0),
            height: (gt.bbox.y2.round() as i64 - t).max(0),
            score: 1,
            category: gt.class as i64 + 1,
            truncation: 0,
            occlusion: 0,
        }
    }

    fn line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.bbox_left,
            self.bbox_top,
            self.width,
            self.height,
            self.score,
            self.category,
            self.truncation,
            self.occlusion
        )
    }
}

/// Parsed records plus counts of what was filtered out.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParsedAnnotations {
    pub records: Vec<AnnotationRecord>,
    pub dropped_zero_area: usize,
    pub dropped_out_of_range: usize,
    /// Ignored regions (category 0) and score-0 records.
    pub dropped_ignored: usize,
}

impl ParsedAnnotations {
    pub fn ground_truths(&self, num_classes: usize) -> Vec<GroundTruth> {
        self.records
            .iter()
            .filter_map(|r| r.class(num_classes).map(|class| GroundTruth { bbox: r.bbox(), class }))
            .collect()
    }
}

/// Parse VisDrone comma-separated lines. Blank lines are skipped; a
/// trailing comma is tolerated.
pub fn parse_annotations(text: &str, num_classes: usize) -> Result<ParsedAnnotations> {
    let mut out = ParsedAnnotations::default();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim_end_matches(',').split(',').map(str::trim).collect();
        if fields.len() < 8 {
            return Err(Error::Parse {
                line: n + 1,
                msg: format!("expected 8 fields, found {}", fields.len()),
            });
        }
        let mut v = [0i64; 8];
        for (k, f) in fields[..8].iter().enumerate() {
            v[k] = f.parse().map_err(|_| Error::Parse {
                line: n + 1,
                msg: format!("field {} is not an integer: '{}'", k + 1, f),
            })?;
        }
        let r = AnnotationRecord {
            bbox_left: v[0],
            bbox_top: v[1],
            width: v[2],
            height: v[3],
            score: v[4],
            category: v[5],
            truncation: v[6],
            occlusion: v[7],
        };
        if r.category == 0 || r.score == 0 {
            out.dropped_ignored += 1;
        } else if r.width <= 0 || r.height <= 0 {
            out.dropped_zero_area += 1;
        } else if r.class(num_classes).is_none() {
            out.dropped_out_of_range += 1;
        } else {
            out.records.push(r);
        }
    }
    Ok(out)
}

pub fn write_annotations(records: &[AnnotationRecord]) -> String {
    records.iter().map(|r| r.line() + "\n").collect()
}

/// An image with its ground truth. Pixel values lie in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Rgb32FImage,
    pub gts: Vec<GroundTruth>,
}

/// Read a manifest of `image_path annotation_path` lines, resolving
/// relative paths against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        match (it.next(), it.next(), it.next()) {
            (Some(i), Some(a), None) => out.push((base.join(i), base.join(a))),
            _ => {
                return Err(Error::Parse {
                    line: n + 1,
                    msg: "expected '<image> <annotation>'".into(),
                })
            }
        }
    }
    Ok(out)
}

pub fn load_sample(image: &Path, annotation: &Path, num_classes: usize) -> Result<Sample> {
    let img = image::open(image)?.to_rgb32f();
    let parsed = parse_annotations(&fs::read_to_string(annotation)?, num_classes)?;
    Ok(Sample {
        image: img,
        gts: parsed.ground_truths(num_classes),
    })
}

pub fn load_dataset(manifest: &Path, num_classes: usize) -> Result<Vec<Sample>> {
    read_manifest(manifest)?
        .iter()
        .map(|(i, a)| load_sample(i, a, num_classes))
        .collect()
}

/// Write PNG images, annotation files and a `manifest.txt` into `dir`.
pub fn save_dataset(dir: &Path, samples: &[Sample]) -> Result<PathBuf> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("annotations"))?;
    let mut manifest = String::new();
    for (k, s) in samples.iter().enumerate() {
        let img = format!("images/{:06}.png", k);
        let ann = format!("annotations/{:06}.txt", k);
        DynamicImage::ImageRgb32F(s.image.clone()).to_rgb8().save(dir.join(&img))?;
        let recs: Vec<_> = s.gts.iter().map(AnnotationRecord::from_gt).collect();
        fs::write(dir.join(&ann), write_annotations(&recs))?;
        manifest.push_str(&format!("{} {}\n", img, ann));
    }
    let path = dir.join("manifest.txt");
    fs::write(&path, manifest)?;
    Ok(path)
}

/// Parameters of the synthetic small-object dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub image_size: usize,
    pub num_images: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Fraction of objects drawn from the small size range.
    pub small_fraction: f64,
    /// Range of the short side, in pixels, for small objects.
    pub small_side: (f64, f64),
    /// Range of the short side for the remaining objects.
    pub other_side: (f64, f64),
    pub max_aspect: f64,
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            image_size: 128,
            num_images: 500,
            min_objects: 1,
            max_objects: 6,
            small_fraction: 0.7,
            small_side: (5.0, 14.0),
            other_side: (14.0, 36.0),
            max_aspect: 5.0,
            num_classes: 10,
            seed: 0,
        }
    }
}

/// Class colours, far apart in RGB and from the grey background.
pub const PALETTE: [[f32; 3]; 10] = [
    [0.90, 0.10, 0.10],
    [0.10, 0.80, 0.10],
    [0.10, 0.20, 0.95],
    [0.95, 0.90, 0.10],
    [0.10, 0.90, 0.90],
    [0.90, 0.10, 0.90],
    [1.00, 0.55, 0.00],
    [0.45, 0.10, 0.60],
    [1.00, 1.00, 1.00],
    [0.02, 0.02, 0.02],
];

fn class_colour(class: usize) -> [f32; 3] {
    if class < PALETTE.len() {
        PALETTE[class]
    } else {
        // deterministic extra colours for larger class counts
        let h = (class as f32 * 0.618_034).fract();
        [h, (h + 0.33).fract(), (h + 0.67).fract()]
    }
}

/// Generate image `index` of the dataset. Each index has its own random
/// stream, so any subset is reproducible on its own.
pub fn synth_sample(spec: &SynthSpec, index: usize) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64 + 1);
    let s = spec.image_size;
    let base: f32 = rng.random_range(0.35..0.65);
    let tint: [f32; 3] = [0, 1, 2].map(|_| rng.random_range(-0.05..0.05));
    let freq: f32 = rng.random_range(0.05..0.3);
    let phase: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let mut img = Rgb32FImage::from_fn(s as u32, s as u32, |x, y| {
        let wave = 0.04 * ((x as f32 * freq + phase).sin() * (y as f32 * freq * 0.7).cos());
        Rgb([0, 1, 2].map(|c| (base + tint[c] + wave).clamp(0.0, 1.0)))
    });
    for px in img.pixels_mut() {
        let n: f32 = rng.random_range(-0.03..0.03);
        for v in px.0.iter_mut() {
            *v = (*v + n).clamp(0.0, 1.0);
        }
    }
    let count = rng.random_range(spec.min_objects..=spec.max_objects);
    let mut gts = Vec::with_capacity(count);
    for _ in 0..count {
        let class = rng.random_range(0..spec.num_classes);
        let (lo, hi) = if rng.random_bool(spec.small_fraction) {
            spec.small_side
        } else {
            spec.other_side
        };
        let short = rng.random_range(lo..hi).round().max(1.0);
        let aspect: f64 = rng.random_range(1.0..spec.max_aspect);
        let long = (short * aspect).round().clamp(short, (short * spec.max_aspect).floor());
        let long = long.min(s as f64 - 2.0);
        let short = short.min(long);
        let (w, h) = if rng.random_bool(0.5) { (long, short) } else { (short, long) };
        let x1 = rng.random_range(0.0..=(s as f64 - w)).floor();
        let y1 = rng.random_range(0.0..=(s as f64 - h)).floor();
        let bbox = BBox {
            x1,
            y1,
            x2: x1 + w,
            y2: y1 + h,
        };
        let colour = class_colour(class);
        for y in y1 as u32..(y1 + h) as u32 {
            for x in x1 as u32..(x1 + w) as u32 {
                let n: f32 = rng.random_range(-0.04..0.04);
                img.put_pixel(x, y, Rgb(colour.map(|c| (c + n).clamp(0.0, 1.0))));
            }
        }
        gts.push(GroundTruth { bbox, class });
    }
    // later objects paint over earlier ones; drop boxes that are mostly hidden
    let visible: Vec<bool> = (0..gts.len())
        .map(|k| {
            let b = &gts[k].bbox;
            let covered: f64 = gts[k + 1..].iter().map(|o| intersection(b, &o.bbox)).sum();
            covered < 0.5 * b.area()
        })
        .collect();
    let gts = gts.into_iter().zip(visible).filter_map(|(g, v)| v.then_some(g)).collect();
    Sample { image: img, gts }
}

pub fn synth_dataset(spec: &SynthSpec) -> Vec<Sample> {
    (0..spec.num_images).map(|i| synth_sample(spec, i)).collect()
}

/// Mapping between source and letterboxed coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Letterbox {
    pub scale: f64,
    pub pad_x: f64,
    pub pad_y: f64,
    pub src_w: u32,
    pub src_h: u32,
}

impl Letterbox {
    pub fn for_size(src_w: u32, src_h: u32, target: u32) -> Self {
        let scale = (target as f64 / src_w as f64).min(target as f64 / src_h as f64);
        let nw = (src_w as f64 * scale).round();
        let nh = (src_h as f64 * scale).round();
        Letterbox {
            scale,
            pad_x: ((target as f64 - nw) / 2.0).floor(),
            pad_y: ((target as f64 - nh) / 2.0).floor(),
            src_w,
            src_h,
        }
    }

    pub fn forward(&self, b: &BBox) -> BBox {
        BBox {
            x1: b.x1 * self.scale + self.pad_x,
            y1: b.y1 * self.scale + self.pad_y,
            x2: b.x2 * self.scale + self.pad_x,
            y2: b.y2 * self.scale + self.pad_y,
        }
    }

    /// Map a letterboxed box back to source pixels, clipped to the image.
    pub fn inverse(&self, b: &BBox) -> BBox {
        let fx = |x: f64| ((x - self.pad_x) / self.scale).clamp(0.0, self.src_w as f64);
        let fy = |y: f64| ((y - self.pad_y) / self.scale).clamp(0.0, self.src_h as f64);
        BBox {
            x1: fx(b.x1),
            y1: fy(b.y1),
            x2: fx(b.x2),
            y2: fy(b.y2),
        }
    }
}

/// Aspect-preserving resize onto a `target × target` canvas padded with
/// grey. The image is centred.
pub fn letterbox(image: &Rgb32FImage, target: u32) -> (Rgb32FImage, Letterbox) {
    let meta = Letterbox::for_size(image.width(), image.height(), target);
    let nw = ((image.width() as f64 * meta.scale).round() as u32).max(1);
    let nh = ((image.height() as f64 * meta.scale).round() as u32).max(1);
    let resized = if (nw, nh) == image.dimensions() {
        image.clone()
    } else {
        imageops::resize(image, nw, nh, FilterType::Triangle)
    };
    let mut canvas = Rgb32FImage::from_pixel(target, target, Rgb([PAD_VALUE; 3]));
    imageops::replace(&mut canvas, &resized, meta.pad_x as i64, meta.pad_y as i64);
    (canvas, meta)
}

pub fn letterbox_sample(s: &Sample, target: u32) -> (Sample, Letterbox) {
    let (image, meta) = letterbox(&s.image, target);
    let gts = s
        .gts
        .iter()
        .map(|g| GroundTruth {
            bbox: meta.forward(&g.bbox),
            class: g.class,
        })
        .collect();
    (Sample { image, gts }, meta)
}

/// Placement of one mosaic tile: the tile's scaled image is translated by
/// `(dx, dy)` and visible only inside `region` (x1, y1, x2, y2).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TilePlacement {
    pub scale: f64,
    pub dx: f64,
    pub dy: f64,
    pub region: [f64; 4],
}

/// Tile placements for a 2×2 mosaic of `out × out` around `(xc, yc)`. Tile
/// 0 is top-left and meets the centre with its bottom-right corner; tiles
/// 1, 2, 3 are top-right, bottom-left and bottom-right.
pub fn mosaic_layout(sizes: [(u32, u32); 4], out: u32, xc: f64, yc: f64, scale: f64) -> [TilePlacement; 4] {
    let o = out as f64;
    let mut p = [TilePlacement {
        scale,
        dx: 0.0,
        dy: 0.0,
        region: [0.0; 4],
    }; 4];
    for (k, &(w, h)) in sizes.iter().enumerate() {
        let (w, h) = ((w as f64 * scale).round(), (h as f64 * scale).round());
        let (dx, x1, x2) = if k % 2 == 0 { (xc - w, 0.0, xc) } else { (xc, xc, o) };
        let (dy, y1, y2) = if k < 2 { (yc - h, 0.0, yc) } else { (yc, yc, o) };
        p[k] = TilePlacement {
            scale,
            dx,
            dy,
            region: [x1, y1, x2, y2],
        };
    }
    p
}

/// Map a box through a tile placement; `None` if clipping leaves it
/// narrower or shorter than [`MIN_BOX_SIDE`].
pub fn place_box(b: &BBox, t: &TilePlacement) -> Option<BBox> {
    let [rx1, ry1, rx2, ry2] = t.region;
    let x1 = (b.x1 * t.scale + t.dx).clamp(rx1, rx2);
    let y1 = (b.y1 * t.scale + t.dy).clamp(ry1, ry2);
    let x2 = (b.x2 * t.scale + t.dx).clamp(rx1, rx2);
    let y2 = (b.y2 * t.scale + t.dy).clamp(ry1, ry2);
    (x2 - x1 >= MIN_BOX_SIDE && y2 - y1 >= MIN_BOX_SIDE).then_some(BBox { x1, y1, x2, y2 })
}

/// Assemble four samples into one `out × out` mosaic.
pub fn mosaic_with(samples: [&Sample; 4], out: u32, xc: f64, yc: f64, scale: f64) -> Sample {
    let sizes = samples.map(|s| s.image.dimensions());
    let layout = mosaic_layout(sizes, out, xc, yc, scale);
    let mut canvas = Rgb32FImage::from_pixel(out, out, Rgb([PAD_VALUE; 3]));
    let mut gts = Vec::new();
    for (s, t) in samples.iter().zip(&layout) {
        let (w, h) = s.image.dimensions();
        let (sw, sh) = (
            ((w as f64 * scale).round() as u32).max(1),
            ((h as f64 * scale).round() as u32).max(1),
        );
        let tile = if (sw, sh) == (w, h) {
            s.image.clone()
        } else {
            imageops::resize(&s.image, sw, sh, FilterType::Triangle)
        };
        let [rx1, ry1, rx2, ry2] = t.region.map(|v| v as i64);
        for y in ry1.max(0)..ry2.min(out as i64) {
            for x in rx1.max(0)..rx2.min(out as i64) {
                let (tx, ty) = (x - t.dx as i64, y - t.dy as i64);
                if tx >= 0 && ty >= 0 && (tx as u32) < sw && (ty as u32) < sh {
                    canvas.put_pixel(x as u32, y as u32, *tile.get_pixel(tx as u32, ty as u32));
                }
            }
        }
        gts.extend(s.gts.iter().filter_map(|g| {
            place_box(&g.bbox, t).map(|bbox| GroundTruth { bbox, class: g.class })
        }));
    }
    Sample { image: canvas, gts }
}

/// Mosaic with a centre drawn from the middle half of the canvas and a
/// scale drawn from `scale_range`.
pub fn mosaic(samples: [&Sample; 4], out: u32, scale_range: (f64, f64), rng: &mut impl Rng) -> Sample {
    let o = out as f64;
    let xc = rng.random_range(0.25 * o..0.75 * o).floor();
    let yc = rng.random_range(0.25 * o..0.75 * o).floor();
    let scale = if scale_range.0 < scale_range.1 {
        rng.random_range(scale_range.0..scale_range.1)
    } else {
        scale_range.0
    };
    mosaic_with(samples, out, xc, yc, scale)
}

/// Stack images into an `[N, 3, H, W]` tensor.
pub fn images_to_tensor(images: &[&Rgb32FImage]) -> Result<Tensor<f32>> {
    let first = images.first().ok_or_else(|| Error::Shape("empty image batch".into()))?;
    let (w, h) = first.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if img.dimensions() != first.dimensions() {
            return Err(Error::Shape("images in a batch must share dimensions".into()));
        }
        for c in 0..3 {
            data.extend(img.pixels().map(|p| p.0[c]));
        }
    }
    Tensor::from_vec(&[images.len(), 3, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_single_line() {
        let p = parse_annotations("10,20,30,40,1,4,0,0\n", 10).unwrap();
        assert_eq!(p.records.len(), 1);
        assert_eq!(p.records[0].bbox(), BBox::new(10.0, 20.0, 40.0, 60.0).unwrap());
        assert_eq!(p.records[0].category, 4);
        assert_eq!(p.ground_truths(10)[0].class, 3);
    }

    #[test]
    fn parse_filters_and_errors() {
        let p = parse_annotations("1,1,0,5,1,2,0,0\n1,1,5,5,0,2,0,0\n1,1,5,5,1,0,0,0\n1,1,5,5,1,11,0,0,\n", 10).unwrap();
        assert!(p.records.is_empty());
        assert_eq!((p.dropped_zero_area, p.dropped_ignored, p.dropped_out_of_range), (1, 2, 1));
        match parse_annotations("1,2,3,4,1,1,0,0\n1,2,x,4,1,1,0,0\n", 10) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {:?}", other),
        }
        assert!(matches!(parse_annotations("1,2,3\n", 10), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn letterbox_arithmetic() {
        let m = Letterbox::for_size(800, 400, 640);
        assert_eq!(m.scale, 0.8);
        // 640×320 resized content centred in 640×640: 160 rows above and below
        assert_eq!((m.pad_x, m.pad_y), (0.0, 160.0));
        let sq = Letterbox::for_size(320, 320, 640);
        assert_eq!((sq.scale, sq.pad_x, sq.pad_y), (2.0, 0.0, 0.0));
        let b = BBox::new(100.0, 50.0, 300.0, 390.0).unwrap();
        let r = m.inverse(&m.forward(&b));
        assert!((r.x1 - b.x1).abs() < 0.5 && (r.y2 - b.y2).abs() < 0.5);
    }
}
