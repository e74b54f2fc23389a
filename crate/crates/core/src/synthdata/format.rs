//! Dataset container.
//!
//! A text header (one `key value` pair per line, terminated by `end_header`)
//! carries the format version, the generator name, the split and the full
//! [`DatasetConfig`], so a file can be regenerated from its own header. Scene
//! records follow in binary, every number little-endian:
//!
//! ```text
//! u64 scene_id | f32 width | f32 height
//! u32 n_objects     | n_objects x (u32 class, 4 x f32 box, f32 hardness)
//! u32 n_distractors | n_distractors x (u32 class, 4 x f32 box, f32 strength)
//! u32 n_proposals   | n_proposals x 4 x f32 box | n_proposals x D x f32 features
//! ```

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Dataset, DatasetConfig, Distractor, GtObject, Scene, Split};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::rng::RNG_NAME;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "OHEM-DATASET";

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    write_to(&mut w, ds)?;
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    read_from(&mut r)
}

pub(crate) fn write_to<W: Write>(w: &mut W, ds: &Dataset) -> Result<()> {
    writeln!(w, "{MAGIC} {FORMAT_VERSION}")?;
    writeln!(w, "rng {RNG_NAME}")?;
    writeln!(w, "split {}", ds.split.name())?;
    writeln!(w, "scene_count {}", ds.scenes.len())?;
    for (k, v) in ds.config.to_kv() {
        writeln!(w, "config.{k} {v}")?;
    }
    writeln!(w, "end_header")?;

    let mut buf = Vec::new();
    for s in &ds.scenes {
        buf.clear();
        buf.extend_from_slice(&s.scene_id.to_le_bytes());
        put_f32(&mut buf, s.extent.0);
        put_f32(&mut buf, s.extent.1);
        buf.extend_from_slice(&(s.objects.len() as u32).to_le_bytes());
        for o in &s.objects {
            buf.extend_from_slice(&(o.class_id as u32).to_le_bytes());
            put_box(&mut buf, &o.bbox);
            put_f32(&mut buf, o.hardness);
        }
        buf.extend_from_slice(&(s.distractors.len() as u32).to_le_bytes());
        for d in &s.distractors {
            buf.extend_from_slice(&(d.class_id as u32).to_le_bytes());
            put_box(&mut buf, &d.bbox);
            put_f32(&mut buf, d.strength);
        }
        buf.extend_from_slice(&(s.proposals.len() as u32).to_le_bytes());
        for p in &s.proposals {
            put_box(&mut buf, p);
        }
        for v in &s.features {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn put_f32(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&(v as f32).to_le_bytes());
}

fn put_box(buf: &mut Vec<u8>, b: &BBox) {
    for v in b.as_array() {
        put_f32(buf, v);
    }
}

pub(crate) fn read_from<R: BufRead>(r: &mut R) -> Result<Dataset> {
    let mut line_no = 0usize;
    let mut next_line = |r: &mut R| -> Result<(usize, String)> {
        let mut line = String::new();
        line_no += 1;
        let n = r.read_line(&mut line).map_err(|e| {
            Error::parse(format!("header line {line_no}"), e.to_string())
        })?;
        if n == 0 {
            return Err(Error::parse(
                format!("header line {line_no}"),
                "unexpected end of file inside header",
            ));
        }
        Ok((line_no, line.trim_end_matches(['\n', '\r']).to_string()))
    };

    let (ln, first) = next_line(r)?;
    let mut parts = first.split_whitespace();
    if parts.next() != Some(MAGIC) {
        return Err(Error::parse(format!("header line {ln}"), "not a dataset file"));
    }
    let version = parts.next().unwrap_or("");
    if version != FORMAT_VERSION.to_string() {
        return Err(Error::Version {
            found: version.to_string(),
            expected: FORMAT_VERSION.to_string(),
        });
    }

    let mut config = DatasetConfig::default();
    let mut split = None;
    let mut scene_count = None;
    loop {
        let (ln, line) = next_line(r)?;
        if line == "end_header" {
            break;
        }
        let loc = || format!("header line {ln}");
        let (key, value) = line
            .split_once(' ')
            .ok_or_else(|| Error::parse(loc(), format!("expected `key value`, got {line:?}")))?;
        match key {
            "rng" if value == RNG_NAME => {}
            "rng" => return Err(Error::parse(loc(), format!("unsupported generator {value:?}"))),
            "split" => split = Some(value.parse::<Split>().map_err(|e| Error::parse(loc(), e.to_string()))?),
            "scene_count" => {
                scene_count = Some(value.parse::<usize>().map_err(|e| Error::parse(loc(), e.to_string()))?)
            }
            k => {
                let field = k
                    .strip_prefix("config.")
                    .ok_or_else(|| Error::parse(loc(), format!("unknown header key {k:?}")))?;
                config
                    .set(field, value)
                    .map_err(|e| Error::parse(loc(), e.to_string()))?;
            }
        }
    }
    let split = split.ok_or_else(|| Error::parse("header", "missing split"))?;
    let scene_count = scene_count.ok_or_else(|| Error::parse("header", "missing scene_count"))?;
    config
        .validate()
        .map_err(|e| Error::parse("header", e.to_string()))?;

    let d = config.feature_dim;
    let mut scenes = Vec::with_capacity(scene_count);
    for rec in 0..scene_count {
        let mut cur = Cursor { r: &mut *r, rec };
        let scene_id = cur.u64()?;
        let extent = (cur.f32()?, cur.f32()?);
        let n_obj = cur.count()?;
        let mut objects = Vec::with_capacity(n_obj);
        for _ in 0..n_obj {
            let class_id = cur.u32()? as usize;
            let bbox = cur.bbox()?;
            let hardness = cur.f32()?;
            objects.push(GtObject { class_id, bbox, hardness });
        }
        let n_dist = cur.count()?;
        let mut distractors = Vec::with_capacity(n_dist);
        for _ in 0..n_dist {
            let class_id = cur.u32()? as usize;
            let bbox = cur.bbox()?;
            let strength = cur.f32()?;
            distractors.push(Distractor { class_id, bbox, strength });
        }
        let n_prop = cur.count()?;
        let mut proposals = Vec::with_capacity(n_prop);
        for _ in 0..n_prop {
            proposals.push(cur.bbox()?);
        }
        let mut features = vec![0f32; n_prop * d];
        for v in features.iter_mut() {
            *v = cur.f32()? as f32;
        }
        let scene = Scene {
            scene_id,
            extent,
            objects,
            distractors,
            proposals,
            features,
            feature_dim: d,
        };
        scene
            .validate()
            .map_err(|e| Error::parse(format!("record {rec}"), e.to_string()))?;
        scenes.push(scene);
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::parse(
            format!("record {scene_count}"),
            "trailing data after the declared scene count",
        ));
    }
    Ok(Dataset {
        config,
        split,
        scenes,
    })
}

struct Cursor<'a, R> {
    r: &'a mut R,
    rec: usize,
}

impl<R: Read> Cursor<'_, R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.r.read_exact(&mut b).map_err(|e| {
            let msg = if e.kind() == std::io::ErrorKind::UnexpectedEof {
                "truncated record".to_string()
            } else {
                e.to_string()
            };
            Error::parse(format!("record {}", self.rec), msg)
        })?;
        Ok(b)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn f32(&mut self) -> Result<f64> {
        Ok(f32::from_le_bytes(self.bytes()?) as f64)
    }

    fn count(&mut self) -> Result<usize> {
        let n = self.u32()? as usize;
        if n > 1 << 24 {
            return Err(Error::parse(
                format!("record {}", self.rec),
                format!("implausible element count {n}"),
            ));
        }
        Ok(n)
    }

    fn bbox(&mut self) -> Result<BBox> {
        let (x1, y1, x2, y2) = (self.f32()?, self.f32()?, self.f32()?, self.f32()?);
        BBox::new(x1, y1, x2, y2)
            .map_err(|e| Error::parse(format!("record {}", self.rec), e.to_string()))
    }
}
