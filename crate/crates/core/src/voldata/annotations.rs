//! Particle annotation tables: a header line `class_name\tz\ty\tx` followed
//! by one particle per row.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{in_bounds, ClassCatalog, ParticleLabel, Shape3};
use crate::error::{Error, Result};

const HEADER: [&str; 4] = ["class_name", "z", "y", "x"];

pub fn load_annotations(
    path: &Path,
    catalog: &ClassCatalog,
    bounds: Option<Shape3>,
) -> Result<Vec<ParticleLabel>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&text, catalog, bounds)
}

pub fn parse_annotations(
    text: &str,
    catalog: &ClassCatalog,
    bounds: Option<Shape3>,
) -> Result<Vec<ParticleLabel>> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    match lines.next() {
        Some((_, header)) if header.split_whitespace().eq(HEADER.iter().copied()) => {}
        Some((line, header)) => {
            return Err(Error::Parse {
                line,
                reason: format!("expected header `class_name\tz\ty\tx`, got {header:?}"),
            })
        }
        None => {
            return Err(Error::Parse {
                line: 1,
                reason: "missing header".into(),
            })
        }
    }
    let mut out = Vec::new();
    for (line, row) in lines {
        let fields: Vec<&str> = row.split_whitespace().collect();
        if fields.len() < 4 {
            return Err(Error::Parse {
                line,
                reason: format!("expected 4 columns, got {}", fields.len()),
            });
        }
        let entry = catalog.by_name(fields[0]).ok_or_else(|| Error::Parse {
            line,
            reason: format!("unknown class {:?} in row {row:?}", fields[0]),
        })?;
        let mut center = [0.0; 3];
        for (c, f) in center.iter_mut().zip(&fields[1..4]) {
            *c = f.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Parse {
                line,
                reason: format!("non-numeric coordinate {f:?}"),
            })?;
        }
        if let Some(shape) = bounds {
            if !in_bounds(shape, center) {
                return Err(Error::Parse {
                    line,
                    reason: format!("coordinate {center:?} outside volume {shape:?}"),
                });
            }
        }
        out.push(ParticleLabel {
            class_id: entry.id,
            center,
            radius_vox: entry.radius_vox,
        });
    }
    Ok(out)
}

pub fn write_annotations(labels: &[ParticleLabel], catalog: &ClassCatalog) -> Result<String> {
    let mut s = HEADER.join("\t");
    s.push('\n');
    for l in labels {
        let name = catalog
            .name(l.class_id)
            .ok_or_else(|| Error::invalid("labels", format!("class id {} not in catalog", l.class_id)))?;
        let [z, y, x] = l.center;
        writeln!(s, "{name}\t{z}\t{y}\t{x}").expect("string write");
    }
    Ok(s)
}

pub fn save_annotations(path: &Path, labels: &[ParticleLabel], catalog: &ClassCatalog) -> Result<()> {
    let s = write_annotations(labels, catalog)?;
    fs::write(path, s).map_err(|e| Error::io(path, e))
}
