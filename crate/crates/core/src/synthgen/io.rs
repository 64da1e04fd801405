//! Corpus directory layout:
//!
//! ```text
//! manifest.json          dims, identities, samples (id + label), seed, corruption
//! images/<id>_<k>.png    8-bit RGB or grayscale, normalized to [0, 1] on load
//! clouds/<id>_<k>.xyz    ASCII, one `x y z` triple per line; extra columns ignored
//! attrs.csv              header row, then `sample_id,a0,..,a{a-1}`
//! splits.csv             header row, then `sample_id,split`
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use super::{sample_points, Corpus, CorpusError, CorpusMeta, CorruptionSpec, DataConfig, Split};
use crate::domain::{validate_paired_sample, AttributeVector, Dims, ImageSample, PairedSample, PointCloudSample};
use crate::rng;

const MANIFEST_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestSample {
    id: String,
    label: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    #[serde(default)]
    seed: Option<u64>,
    dims: Dims,
    identities: Vec<String>,
    samples: Vec<ManifestSample>,
    #[serde(default)]
    corruption: CorruptionSpec,
    #[serde(default)]
    generator: Option<DataConfig>,
    /// When false, clouds are centred on ingestion.
    #[serde(default)]
    centered: bool,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io { path: path.display().to_string(), source }
}

pub fn export_corpus(corpus: &Corpus, dir: &Path) -> Result<(), CorpusError> {
    fs::create_dir_all(dir.join("images")).map_err(io_err(dir))?;
    fs::create_dir_all(dir.join("clouds")).map_err(io_err(dir))?;

    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        seed: corpus.meta.seed,
        dims: corpus.dims.clone(),
        identities: corpus.identities.clone(),
        samples: corpus
            .samples
            .iter()
            .map(|s| ManifestSample { id: s.id.clone(), label: s.label })
            .collect(),
        corruption: corpus.meta.corruption.clone(),
        generator: corpus.meta.generator.clone(),
        centered: corpus.meta.centered,
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(io_err(&path))?;

    for s in &corpus.samples {
        let img = &s.image;
        let (w, h) = (img.width as u32, img.height as u32);
        let byte = |c: usize, y: u32, x: u32| (img.get(c, y as usize, x as usize) * 255.0).round() as u8;
        let path = dir.join("images").join(format!("{}.png", s.id));
        let saved = if img.channels == 1 {
            GrayImage::from_fn(w, h, |x, y| image::Luma([byte(0, y, x)])).save(&path)
        } else {
            RgbImage::from_fn(w, h, |x, y| image::Rgb([byte(0, y, x), byte(1, y, x), byte(2, y, x)])).save(&path)
        };
        saved.map_err(|e| CorpusError::BadImage { sample_id: s.id.clone(), reason: e.to_string() })?;

        let mut text = String::with_capacity(s.cloud.len() * 3 * 20);
        for p in s.cloud.coords.chunks(s.cloud.dim) {
            let line: Vec<String> = p.iter().map(|v| v.to_string()).collect();
            text.push_str(&line.join(" "));
            text.push('\n');
        }
        let path = dir.join("clouds").join(format!("{}.xyz", s.id));
        fs::write(&path, text).map_err(io_err(&path))?;
    }

    let path = dir.join("attrs.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| CorpusError::Io {
        path: path.display().to_string(),
        source: e.into(),
    })?;
    let csv_err = |e: csv::Error| CorpusError::Io { path: "attrs.csv".into(), source: e.into() };
    let mut header = vec!["sample_id".to_string()];
    header.extend((0..corpus.dims.attrs).map(|i| format!("a{i}")));
    w.write_record(&header).map_err(csv_err)?;
    for s in &corpus.samples {
        let mut row = vec![s.id.clone()];
        row.extend(s.attrs.0.iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(&path))?;

    let path = dir.join("splits.csv");
    let mut text = String::from("sample_id,split\n");
    for (s, split) in corpus.samples.iter().zip(&corpus.splits) {
        text.push_str(&format!("{},{}\n", s.id, split));
    }
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(())
}

fn read_attrs(path: &Path, attrs: usize) -> Result<HashMap<String, AttributeVector>, CorpusError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = HashMap::new();
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.starts_with("sample_id") => {}
        _ => {
            return Err(CorpusError::MalformedAttributes { line: 1, reason: "missing `sample_id,...` header".into() })
        }
    }
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if cols.len() != attrs + 1 {
            return Err(CorpusError::MalformedAttributes {
                line: lineno,
                reason: format!("expected {attrs} attribute columns, found {}", cols.len() - 1),
            });
        }
        let vals = cols[1..]
            .iter()
            .map(|c| c.parse::<f64>())
            .collect::<Result<Vec<f64>, _>>()
            .map_err(|e| CorpusError::MalformedAttributes { line: lineno, reason: e.to_string() })?;
        out.insert(cols[0].to_string(), AttributeVector(vals));
    }
    Ok(out)
}

fn read_splits(path: &Path) -> Result<HashMap<String, Split>, CorpusError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let (id, split) = line
            .split_once(',')
            .ok_or_else(|| CorpusError::MalformedSplits { line: i + 1, reason: "expected `sample_id,split`".into() })?;
        let split = split
            .trim()
            .parse()
            .map_err(|reason| CorpusError::MalformedSplits { line: i + 1, reason })?;
        out.insert(id.trim().to_string(), split);
    }
    Ok(out)
}

fn read_cloud(path: &Path, sample_id: &str) -> Result<PointCloudSample, CorpusError> {
    let text = fs::read_to_string(path).map_err(|_| CorpusError::MissingFile {
        sample_id: sample_id.to_string(),
        what: "cloud",
        path: path.display().to_string(),
    })?;
    let mut coords = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 3 {
            return Err(CorpusError::MalformedCloud {
                path: path.display().to_string(),
                line: i + 1,
                reason: format!("expected at least 3 columns, found {}", fields.len()),
            });
        }
        // extra columns (colour, normals) are dropped
        for f in &fields[..3] {
            coords.push(f.parse::<f64>().map_err(|e| CorpusError::MalformedCloud {
                path: path.display().to_string(),
                line: i + 1,
                reason: e.to_string(),
            })?);
        }
    }
    Ok(PointCloudSample::new(3, coords))
}

fn read_image(path: &Path, sample_id: &str, dims: &Dims) -> Result<ImageSample, CorpusError> {
    if !path.exists() {
        return Err(CorpusError::MissingFile {
            sample_id: sample_id.to_string(),
            what: "image",
            path: path.display().to_string(),
        });
    }
    let img = image::open(path)
        .map_err(|e| CorpusError::BadImage { sample_id: sample_id.to_string(), reason: e.to_string() })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if (h, w) != (dims.height, dims.width) {
        return Err(CorpusError::BadImage {
            sample_id: sample_id.to_string(),
            reason: format!("is {h}x{w}, expected {}x{}", dims.height, dims.width),
        });
    }
    let mut out = ImageSample::filled(h, w, dims.channels, 0.0);
    if dims.channels == 1 {
        let g = img.to_luma8();
        for (x, y, p) in g.enumerate_pixels() {
            out.set(0, y as usize, x as usize, f64::from(p[0]) / 255.0);
        }
    } else {
        let rgb = img.to_rgb8();
        for (x, y, p) in rgb.enumerate_pixels() {
            for c in 0..3 {
                out.set(c, y as usize, x as usize, f64::from(p[c]) / 255.0);
            }
        }
    }
    Ok(out)
}

/// Reads a corpus directory. Clouds with a different point count are
/// resampled to `dims.points`; clouds are centred unless the manifest says
/// they already are; every sample is validated against the manifest dims.
pub fn load_corpus(dir: &Path) -> Result<Corpus, CorpusError> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| CorpusError::Manifest(e.to_string()))?;
    if manifest.format_version != MANIFEST_VERSION {
        return Err(CorpusError::Manifest(format!(
            "format_version {} unsupported (expected {MANIFEST_VERSION})",
            manifest.format_version
        )));
    }
    let dims = manifest.dims.clone();
    if dims.point_dim != 3 {
        return Err(CorpusError::Manifest("only xyz clouds (point_dim = 3) are supported".into()));
    }
    if manifest.identities.len() != dims.classes {
        return Err(CorpusError::Manifest(format!(
            "{} identity names for {} classes",
            manifest.identities.len(),
            dims.classes
        )));
    }
    let attrs = read_attrs(&dir.join("attrs.csv"), dims.attrs)?;
    let splits = read_splits(&dir.join("splits.csv"))?;
    let ingest_seed = manifest.seed.unwrap_or(0);

    let mut samples = Vec::with_capacity(manifest.samples.len());
    let mut split_list = Vec::with_capacity(manifest.samples.len());
    for ms in &manifest.samples {
        let image = read_image(&dir.join("images").join(format!("{}.png", ms.id)), &ms.id, &dims)?;
        let mut cloud = read_cloud(&dir.join("clouds").join(format!("{}.xyz", ms.id)), &ms.id)?;
        if cloud.len() != dims.points && !cloud.is_empty() {
            let tag = rng::derive_seed(0, &ms.id, &[]);
            cloud = sample_points(&cloud, dims.points, &mut rng::stream(ingest_seed, "ingest", &[tag]))?;
        }
        if !manifest.centered {
            cloud = cloud.centered();
        }
        let attr = attrs.get(&ms.id).cloned().ok_or_else(|| CorpusError::MalformedAttributes {
            line: 0,
            reason: format!("no row for sample `{}`", ms.id),
        })?;
        let split = *splits.get(&ms.id).ok_or_else(|| CorpusError::MalformedSplits {
            line: 0,
            reason: format!("no split for sample `{}`", ms.id),
        })?;
        let sample = PairedSample { id: ms.id.clone(), image, cloud, attrs: attr, label: ms.label };
        validate_paired_sample(&sample, &dims)?;
        samples.push(sample);
        split_list.push(split);
    }
    Ok(Corpus {
        dims,
        identities: manifest.identities,
        samples,
        splits: split_list,
        meta: CorpusMeta {
            seed: manifest.seed,
            generator: manifest.generator,
            corruption: manifest.corruption,
            centered: manifest.centered,
        },
    })
}
