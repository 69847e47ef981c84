//! Line-delimited dataset files.
//!
//! ```text
//! lightsign-dataset\tversion=1\twidth=640\theight=480\ttaxonomy=light_0:LIGHT,...\tgenerator=width:640;...
//! frame\tid=0\tsource=LIGHTS_SET\tseed=123\twidth=640.000000\theight=480.000000\tn=2\tx1,y1,x2,y2,sub,vis\t...
//! ```
//!
//! Fields are tab separated and appear in a fixed order. Box coordinates and
//! frame dimensions carry six decimals; the visibility flag is `1` or `0`.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::{quantize, Annotation, Dataset, DatasetError, Frame, GeneratorConfig, SourceTag};
use crate::geometry::BBox;
use crate::taxonomy::{GlobalClass, Taxonomy};

pub const FORMAT_NAME: &str = "lightsign-dataset";
pub const FORMAT_VERSION: u32 = 1;

/// Writes `contents` to a quarantined sibling and renames it into place, so
/// `path` only ever holds complete output.
pub fn write_atomic(path: &Path, contents: &[u8]) -> std::io::Result<()> {
    let mut partial: PathBuf = path.to_path_buf();
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    partial.set_file_name(format!(".{name}.partial-{}", std::process::id()));
    {
        let mut f = fs::File::create(&partial)?;
        f.write_all(contents)?;
        f.sync_all()?;
    }
    fs::rename(&partial, path)
}

fn generator_fields(c: &GeneratorConfig) -> String {
    let fields: [(&str, String); 19] = [
        ("width", c.width.to_string()),
        ("height", c.height.to_string()),
        ("lights_min", c.lights_per_frame.0.to_string()),
        ("lights_max", c.lights_per_frame.1.to_string()),
        ("signs_min", c.signs_per_frame.0.to_string()),
        ("signs_max", c.signs_per_frame.1.to_string()),
        ("light_width_min", c.light_width.0.to_string()),
        ("light_width_max", c.light_width.1.to_string()),
        ("light_aspect", c.light_aspect.to_string()),
        ("sign_side_min", c.sign_side.0.to_string()),
        ("sign_side_max", c.sign_side.1.to_string()),
        ("separation", c.separation.to_string()),
        ("violation_prob", c.violation_prob.to_string()),
        ("feature_dim", c.feature_dim.to_string()),
        ("feature_noise", c.feature_noise.to_string()),
        ("prototype_seed", c.prototype_seed.to_string()),
        ("object_share", c.object_share.to_string()),
        ("family_share", c.family_share.to_string()),
        ("offset_gain", c.offset_gain.to_string()),
    ];
    fields
        .iter()
        .map(|(k, v)| format!("{k}:{v}"))
        .collect::<Vec<_>>()
        .join(";")
}

/// Renders the dataset in the line-delimited text format.
pub fn to_text(dataset: &Dataset) -> String {
    let mut out = String::new();
    let taxonomy = dataset
        .taxonomy
        .entries()
        .map(|(n, g)| format!("{n}:{g}"))
        .collect::<Vec<_>>()
        .join(",");
    let _ = writeln!(
        out,
        "{FORMAT_NAME}\tversion={FORMAT_VERSION}\twidth={}\theight={}\ttaxonomy={taxonomy}\tgenerator={}",
        dataset.config.width,
        dataset.config.height,
        generator_fields(&dataset.config)
    );
    for f in &dataset.frames {
        let _ = write!(
            out,
            "frame\tid={}\tsource={}\tseed={}\twidth={:.6}\theight={:.6}\tn={}",
            f.id,
            f.source,
            f.seed,
            f.width,
            f.height,
            f.annotations.len()
        );
        for a in &f.annotations {
            let [x1, y1, x2, y2] = a.bbox.coords();
            let _ = write!(
                out,
                "\t{x1:.6},{y1:.6},{x2:.6},{y2:.6},{},{}",
                a.subclass,
                a.visible as u8
            );
        }
        out.push('\n');
    }
    out
}

pub fn save(dataset: &Dataset, path: &Path) -> Result<(), DatasetError> {
    write_atomic(path, to_text(dataset).as_bytes())?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Dataset, DatasetError> {
    parse(&fs::read_to_string(path)?)
}

/// Loads and additionally requires the file's taxonomy to equal `expected`.
pub fn load_expecting(path: &Path, expected: &Taxonomy) -> Result<Dataset, DatasetError> {
    let ds = load(path)?;
    if &ds.taxonomy != expected {
        return Err(DatasetError::Schema(format!(
            "taxonomy mismatch: file declares K = {}, expected K = {}",
            ds.taxonomy.len(),
            expected.len()
        )));
    }
    Ok(ds)
}

struct Fields<'a> {
    line: usize,
    parts: std::str::Split<'a, char>,
}

impl<'a> Fields<'a> {
    fn err(&self, message: impl Into<String>) -> DatasetError {
        DatasetError::Parse {
            line: self.line,
            message: message.into(),
        }
    }

    fn next_raw(&mut self, what: &str) -> Result<&'a str, DatasetError> {
        self.parts.next().ok_or_else(|| self.err(format!("missing field `{what}`")))
    }

    fn keyed(&mut self, key: &str) -> Result<&'a str, DatasetError> {
        let raw = self.next_raw(key)?;
        raw.strip_prefix(key)
            .and_then(|r| r.strip_prefix('='))
            .ok_or_else(|| self.err(format!("expected `{key}=...`, found `{raw}`")))
    }

    fn keyed_num<T: FromStr>(&mut self, key: &str) -> Result<T, DatasetError> {
        let raw = self.keyed(key)?;
        raw.parse()
            .map_err(|_| self.err(format!("bad value `{raw}` for `{key}`")))
    }
}

fn parse_generator(line: usize, text: &str) -> Result<GeneratorConfig, DatasetError> {
    let err = |m: String| DatasetError::Parse { line, message: m };
    let mut kv = text.split(';').map(|p| p.split_once(':').ok_or_else(|| err(format!("bad generator field `{p}`"))));
    let mut take = |key: &str| -> Result<String, DatasetError> {
        let (k, v) = kv.next().ok_or_else(|| err(format!("missing generator field `{key}`")))??;
        if k != key {
            return Err(err(format!("expected generator field `{key}`, found `{k}`")));
        }
        Ok(v.to_string())
    };
    fn num<T: FromStr>(line: usize, key: &str, v: String) -> Result<T, DatasetError> {
        v.parse().map_err(|_| DatasetError::Parse {
            line,
            message: format!("bad generator value `{v}` for `{key}`"),
        })
    }
    macro_rules! field {
        ($k:literal) => {
            num(line, $k, take($k)?)?
        };
    }
    let c = GeneratorConfig {
        width: field!("width"),
        height: field!("height"),
        lights_per_frame: (field!("lights_min"), field!("lights_max")),
        signs_per_frame: (field!("signs_min"), field!("signs_max")),
        light_width: (field!("light_width_min"), field!("light_width_max")),
        light_aspect: field!("light_aspect"),
        sign_side: (field!("sign_side_min"), field!("sign_side_max")),
        separation: field!("separation"),
        violation_prob: field!("violation_prob"),
        feature_dim: field!("feature_dim"),
        feature_noise: field!("feature_noise"),
        prototype_seed: field!("prototype_seed"),
        object_share: field!("object_share"),
        family_share: field!("family_share"),
        offset_gain: field!("offset_gain"),
    };
    if kv.next().is_some() {
        return Err(err("trailing generator fields".into()));
    }
    Ok(c)
}

fn parse_taxonomy(line: usize, text: &str) -> Result<Taxonomy, DatasetError> {
    let mut entries = Vec::new();
    for item in text.split(',').filter(|s| !s.is_empty()) {
        let (name, global) = item.rsplit_once(':').ok_or_else(|| DatasetError::Parse {
            line,
            message: format!("bad taxonomy entry `{item}`"),
        })?;
        let global = GlobalClass::from_str(global).map_err(|e| DatasetError::Parse {
            line,
            message: e.to_string(),
        })?;
        entries.push((name.to_string(), global));
    }
    Taxonomy::build(entries).map_err(|e| DatasetError::Schema(format!("header taxonomy: {e}")))
}

fn parse_annotation(fields: &Fields<'_>, frame: u64, raw: &str) -> Result<Annotation, DatasetError> {
    let parts: Vec<&str> = raw.split(',').collect();
    if parts.len() != 6 {
        return Err(fields.err(format!("frame {frame}: annotation `{raw}` needs 6 values")));
    }
    let coord = |s: &str| -> Result<f64, DatasetError> {
        s.parse::<f64>()
            .map_err(|_| fields.err(format!("frame {frame}: bad coordinate `{s}`")))
    };
    let (x1, y1, x2, y2) = (coord(parts[0])?, coord(parts[1])?, coord(parts[2])?, coord(parts[3])?);
    let bbox = BBox::new(x1, y1, x2, y2).map_err(|e| fields.err(format!("frame {frame}: {e}")))?;
    let subclass = parts[4]
        .parse()
        .map_err(|_| fields.err(format!("frame {frame}: bad subclass `{}`", parts[4])))?;
    let visible = match parts[5] {
        "1" => true,
        "0" => false,
        other => return Err(fields.err(format!("frame {frame}: bad visibility flag `{other}`"))),
    };
    Ok(Annotation { bbox, subclass, visible })
}

pub fn parse(text: &str) -> Result<Dataset, DatasetError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (hline, header) = lines.next().ok_or(DatasetError::Parse {
        line: 1,
        message: "empty file, expected header".into(),
    })?;
    let mut h = Fields {
        line: hline,
        parts: header.split('\t'),
    };
    let magic = h.next_raw("format")?;
    if magic != FORMAT_NAME {
        return Err(h.err(format!("not a {FORMAT_NAME} file (found `{magic}`)")));
    }
    let version: u32 = h.keyed_num("version")?;
    if version != FORMAT_VERSION {
        return Err(DatasetError::Schema(format!("unsupported format version {version}")));
    }
    let width: f64 = h.keyed_num("width")?;
    let height: f64 = h.keyed_num("height")?;
    let taxonomy = parse_taxonomy(hline, h.keyed("taxonomy")?)?;
    let config = parse_generator(hline, h.keyed("generator")?)?;
    if config.width != width || config.height != height {
        return Err(h.err("header dimensions disagree with generator echo"));
    }

    let mut frames = Vec::new();
    for (line, text) in lines {
        if text.is_empty() {
            continue;
        }
        let mut f = Fields {
            line,
            parts: text.split('\t'),
        };
        if f.next_raw("frame")? != "frame" {
            return Err(f.err("expected a `frame` record"));
        }
        let id: u64 = f.keyed_num("id")?;
        let source_raw = f.keyed("source")?;
        let source = SourceTag::from_str(source_raw).map_err(|e| f.err(format!("frame {id}: {e}")))?;
        let seed: u64 = f.keyed_num("seed")?;
        let fw: f64 = f.keyed_num("width")?;
        let fh: f64 = f.keyed_num("height")?;
        let n: usize = f.keyed_num("n")?;
        let mut annotations = Vec::with_capacity(n);
        for _ in 0..n {
            let raw = f.next_raw("annotation")?;
            annotations.push(parse_annotation(&f, id, raw)?);
        }
        if f.parts.next().is_some() {
            return Err(f.err(format!("frame {id}: more annotations than n={n}")));
        }
        let frame = Frame {
            id,
            width: quantize(fw),
            height: quantize(fh),
            source,
            annotations,
            seed,
        };
        frame.validate(&taxonomy)?;
        frames.push(frame);
    }
    Ok(Dataset {
        taxonomy,
        config,
        frames,
    })
}
