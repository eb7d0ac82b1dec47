//! On-disk formats: binary tensor container, key-value manifests, CSV and
//! PGM writers. All writers are deterministic so identical runs produce
//! byte-identical files.
//!
//! Container layout (little-endian):
//!
//! ```text
//! magic "ADPT" | u32 version=1 | u32 record_count |
//!   repeat: u32 name_len | name utf-8 | u32 ndim | u64 dims[ndim] | f64 payload
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::data::{Dataset, DatasetManifest, Image, LabeledSample, Style, WorldKind, EMBED_DIM};
use crate::lfb::{AttributeVector, SignatureTable};
use crate::{AdpError, Result};

const MAGIC: &[u8; 4] = b"ADPT";
const VERSION: u32 = 1;

/// One named dense tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl TensorRecord {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f64>) -> Self {
        let rec = TensorRecord {
            name: name.into(),
            dims,
            data,
        };
        assert_eq!(
            rec.dims.iter().product::<usize>(),
            rec.data.len(),
            "tensor record {} dims/data mismatch",
            rec.name
        );
        rec
    }
}

/// Write records in the given order.
pub fn write_container(path: &Path, records: &[TensorRecord]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        let name = r.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        buf.extend_from_slice(&(r.dims.len() as u32).to_le_bytes());
        for &d in &r.dims {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &r.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| AdpError::io(path.display().to_string(), e))
}

pub fn read_container(path: &Path) -> Result<Vec<TensorRecord>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| AdpError::io(path.display().to_string(), e))?;
    let fail = |detail: &str| AdpError::Format {
        path: path.display().to_string(),
        detail: detail.to_string(),
    };
    if bytes.len() < 12 || &bytes[0..4] != MAGIC {
        return Err(fail("missing ADPT magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(fail(&format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let mut pos = 12;
    let mut take = |n: usize| -> Result<&[u8]> {
        if pos + n > bytes.len() {
            return Err(AdpError::Format {
                path: path.display().to_string(),
                detail: "truncated container".to_string(),
            });
        }
        let s = &bytes[pos..pos + n];
        pos += n;
        Ok(s)
    };
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(name_len)?.to_vec())
            .map_err(|_| fail("record name not utf-8"))?;
        let ndim = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize);
        }
        let numel: usize = dims.iter().product();
        let raw = take(numel * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        records.push(TensorRecord { name, dims, data });
    }
    Ok(records)
}

/// `key = value` text file, keys sorted for stable bytes.
pub fn write_kv(path: &Path, pairs: &BTreeMap<String, String>) -> Result<()> {
    let mut out = String::new();
    for (k, v) in pairs {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(v);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| AdpError::io(path.display().to_string(), e))
}

pub fn read_kv(path: &Path) -> Result<BTreeMap<String, String>> {
    let text =
        fs::read_to_string(path).map_err(|e| AdpError::io(path.display().to_string(), e))?;
    let mut map = BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| AdpError::Format {
            path: path.display().to_string(),
            detail: format!("expected `key = value`, got `{line}`"),
        })?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

/// CSV writer whose first line is a comment embedding the schema name and
/// the run's config hash.
pub struct CsvWriter {
    path: PathBuf,
    buf: String,
}

impl CsvWriter {
    pub fn create(path: &Path, schema: &str, config_hash: &str, columns: &[&str]) -> Self {
        let mut buf = format!("# schema={schema} config_hash={config_hash}\n");
        buf.push_str(&columns.join(","));
        buf.push('\n');
        CsvWriter {
            path: path.to_path_buf(),
            buf,
        }
    }

    pub fn row(&mut self, fields: &[String]) {
        self.buf.push_str(&fields.join(","));
        self.buf.push('\n');
    }

    pub fn finish(self) -> Result<()> {
        fs::write(&self.path, self.buf).map_err(|e| AdpError::io(self.path.display().to_string(), e))
    }
}

/// Format a float for CSV output (shortest round-trip representation, which
/// is deterministic across runs).
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// Binary PGM (P5) grid of images in [−1,1], one-pixel separators.
pub fn write_pgm_grid(
    path: &Path,
    images: &[Image],
    grid_cols: usize,
    config_hash: &str,
) -> Result<()> {
    if images.is_empty() {
        return Err(AdpError::invalid("pgm grid", "no images"));
    }
    let (h, w) = (images[0].height, images[0].width);
    let rows = images.len().div_ceil(grid_cols);
    let gh = rows * h + rows.saturating_sub(1);
    let gw = grid_cols * w + grid_cols.saturating_sub(1);
    let mut pixels = vec![0u8; gh * gw];
    for (i, img) in images.iter().enumerate() {
        let gr = (i / grid_cols) * (h + 1);
        let gc = (i % grid_cols) * (w + 1);
        for r in 0..h {
            for c in 0..w {
                let v = ((img.get(r, c) + 1.0) * 0.5 * 255.0).round().clamp(0.0, 255.0);
                pixels[(gr + r) * gw + gc + c] = v as u8;
            }
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(format!("P5\n# config_hash={config_hash}\n{gw} {gh}\n255\n").as_bytes());
    out.extend_from_slice(&pixels);
    let mut f =
        fs::File::create(path).map_err(|e| AdpError::io(path.display().to_string(), e))?;
    f.write_all(&out)
        .map_err(|e| AdpError::io(path.display().to_string(), e))
}

// ---- dataset persistence ----------------------------------------------------

/// Write a dataset as manifest + tensor container + labels CSV.
pub fn save_dataset(dir: &Path, ds: &Dataset, config_hash: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| AdpError::io(dir.display().to_string(), e))?;
    let m = &ds.manifest;
    let mut kv = BTreeMap::new();
    kv.insert("name".to_string(), m.name.clone());
    kv.insert("classes".to_string(), m.classes.to_string());
    kv.insert("height".to_string(), m.height.to_string());
    kv.insert("width".to_string(), m.width.to_string());
    kv.insert("count".to_string(), m.count.to_string());
    kv.insert("seed".to_string(), m.seed.to_string());
    kv.insert("train_fraction".to_string(), fmt_f64(m.train_fraction));
    kv.insert("config_hash".to_string(), config_hash.to_string());
    match &m.kind {
        WorldKind::Shapes { style } => {
            kv.insert("kind".to_string(), "shapes".to_string());
            kv.insert("style".to_string(), style.tag().to_string());
        }
        WorldKind::Attributes {
            attrs,
            seen_fraction,
            noise,
        } => {
            kv.insert("kind".to_string(), "attributes".to_string());
            kv.insert("attrs".to_string(), attrs.to_string());
            kv.insert("seen_fraction".to_string(), fmt_f64(*seen_fraction));
            kv.insert("noise".to_string(), fmt_f64(*noise));
            kv.insert(
                "seen_classes".to_string(),
                ds.seen_classes.unwrap_or(m.classes).to_string(),
            );
        }
    }
    write_kv(&dir.join("manifest.txt"), &kv)?;

    let mut images = Vec::with_capacity(ds.samples.len() * m.height * m.width);
    for s in &ds.samples {
        images.extend_from_slice(&s.image.pixels);
    }
    let mut records = vec![TensorRecord::new(
        "images",
        vec![ds.samples.len(), m.height, m.width],
        images,
    )];
    if let Some(sig) = &ds.signatures {
        records.push(TensorRecord::new(
            "signatures",
            vec![sig.classes, sig.attrs],
            sig.raw().to_vec(),
        ));
    }
    if let Some(emb) = &ds.embeddings {
        records.push(TensorRecord::new(
            "embeddings",
            vec![emb.len(), EMBED_DIM],
            emb.iter().flatten().copied().collect(),
        ));
    }
    write_container(&dir.join("tensors.bin"), &records)?;

    let has_attrs = ds.samples.iter().any(|s| s.attributes.is_some());
    let p = ds.signatures.as_ref().map(|s| s.attrs).unwrap_or(0);
    let mut cols = vec!["sample".to_string(), "label".to_string(), "condition".to_string()];
    for j in 0..if has_attrs { p } else { 0 } {
        cols.push(format!("attr{j}"));
    }
    let col_refs: Vec<&str> = cols.iter().map(|s| s.as_str()).collect();
    let mut csv = CsvWriter::create(&dir.join("labels.csv"), "labels-v1", config_hash, &col_refs);
    for (i, s) in ds.samples.iter().enumerate() {
        let mut row = vec![
            i.to_string(),
            s.label.to_string(),
            s.condition.map(|c| c.to_string()).unwrap_or_default(),
        ];
        if has_attrs {
            if let Some(a) = &s.attributes {
                row.extend(a.values().iter().map(|v| fmt_f64(*v)));
            }
        }
        csv.row(&row);
    }
    csv.finish()
}

/// Read a dataset back; bit-exact inverse of [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let kv = read_kv(&dir.join("manifest.txt"))?;
    let get = |key: &str| -> Result<&String> {
        kv.get(key).ok_or_else(|| AdpError::Config {
            field: key.to_string(),
            detail: "missing from dataset manifest".to_string(),
        })
    };
    let parse_usize = |key: &str| -> Result<usize> {
        get(key)?.parse().map_err(|_| AdpError::Config {
            field: key.to_string(),
            detail: format!("not an integer: {}", kv[key]),
        })
    };
    let parse_f64 = |key: &str| -> Result<f64> {
        get(key)?.parse().map_err(|_| AdpError::Config {
            field: key.to_string(),
            detail: format!("not a number: {}", kv[key]),
        })
    };
    let kind = match get("kind")?.as_str() {
        "shapes" => WorldKind::Shapes {
            style: Style::from_tag(get("style")?)?,
        },
        "attributes" => WorldKind::Attributes {
            attrs: parse_usize("attrs")?,
            seen_fraction: parse_f64("seen_fraction")?,
            noise: parse_f64("noise")?,
        },
        other => {
            return Err(AdpError::Config {
                field: "kind".to_string(),
                detail: format!("unknown dataset kind {other}"),
            })
        }
    };
    let manifest = DatasetManifest {
        name: get("name")?.clone(),
        kind,
        classes: parse_usize("classes")?,
        height: parse_usize("height")?,
        width: parse_usize("width")?,
        count: parse_usize("count")?,
        seed: get("seed")?.parse().map_err(|_| AdpError::Config {
            field: "seed".to_string(),
            detail: "not an integer".to_string(),
        })?,
        train_fraction: parse_f64("train_fraction")?,
    };

    let records = read_container(&dir.join("tensors.bin"))?;
    let find = |name: &str| records.iter().find(|r| r.name == name);
    let images = find("images").ok_or_else(|| AdpError::Format {
        path: dir.join("tensors.bin").display().to_string(),
        detail: "missing images record".to_string(),
    })?;
    let (h, w) = (manifest.height, manifest.width);
    let signatures = match find("signatures") {
        Some(r) => Some(SignatureTable::new(r.dims[0], r.dims[1], r.data.clone())?),
        None => None,
    };
    let embeddings = find("embeddings").map(|r| {
        r.data
            .chunks_exact(r.dims[1])
            .map(|c| c.to_vec())
            .collect::<Vec<_>>()
    });

    // labels
    let labels_path = dir.join("labels.csv");
    let text = fs::read_to_string(&labels_path)
        .map_err(|e| AdpError::io(labels_path.display().to_string(), e))?;
    let mut samples = Vec::new();
    for line in text.lines().skip(2) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let idx: usize = fields[0].parse().map_err(|_| AdpError::Format {
            path: labels_path.display().to_string(),
            detail: format!("bad sample index {}", fields[0]),
        })?;
        let label: usize = fields[1].parse().map_err(|_| AdpError::Format {
            path: labels_path.display().to_string(),
            detail: format!("bad label {}", fields[1]),
        })?;
        let condition = if fields[2].is_empty() {
            None
        } else {
            Some(fields[2].parse().map_err(|_| AdpError::Format {
                path: labels_path.display().to_string(),
                detail: format!("bad condition {}", fields[2]),
            })?)
        };
        let attributes = if fields.len() > 3 {
            let vals: Vec<f64> = fields[3..]
                .iter()
                .map(|f| f.parse().unwrap_or(0.0))
                .collect();
            Some(AttributeVector::new(vals)?)
        } else {
            None
        };
        let pixels = images.data[idx * h * w..(idx + 1) * h * w].to_vec();
        samples.push(LabeledSample {
            image: Image::new(h, w, pixels),
            label,
            attributes,
            condition,
        });
    }

    let seen_classes = kv.get("seen_classes").and_then(|s| s.parse().ok());
    Ok(Dataset {
        manifest,
        samples,
        signatures,
        embeddings,
        seen_classes,
    })
}
