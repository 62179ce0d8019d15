//! Dataset manifests: one sample per line, as `key=value` pairs.
//!
//! A line either describes a synthetic scene (`seed=3 height=64 ...`; keys
//! left out take the default scene values) or points at files
//! (`rgb=a.ppm depth=a.pfm`, relative to the manifest's directory). Blank
//! lines and `#` comments are ignored.

use std::fs;
use std::path::{Path, PathBuf};

use super::io::{load_pfm, load_ppm};
use super::scene::{gen_synthetic_scene, DepthSample, SceneSpec};
use crate::config::ModelConfig;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum ManifestEntry {
    Scene(SceneSpec),
    Files { rgb: PathBuf, depth: PathBuf },
}

impl ManifestEntry {
    pub fn to_line(&self) -> String {
        match self {
            ManifestEntry::Scene(s) => s.to_string(),
            ManifestEntry::Files { rgb, depth } => format!("rgb={} depth={}", rgb.display(), depth.display()),
        }
    }
}

fn value<T: std::str::FromStr>(offset: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::format(offset, format!("bad value {v:?} for {key}")))
}

fn parse_line(line: &str, base: usize) -> Result<ManifestEntry> {
    let mut spec = SceneSpec::from_config(&ModelConfig::default(), 0, 64);
    let (mut rgb, mut depth, mut seed) = (None, None, false);
    let mut scene_keys = false;
    let mut rest = line;
    let mut consumed = 0;
    while let Some(start) = rest.find(|c: char| !c.is_whitespace()) {
        let end = rest[start..].find(char::is_whitespace).map_or(rest.len(), |e| start + e);
        let at = base + consumed + start;
        let pair = &rest[start..end];
        let (k, v) = pair.split_once('=').ok_or_else(|| Error::format(at, format!("expected key=value, got {pair:?}")))?;
        match k {
            "rgb" => rgb = Some(PathBuf::from(v)),
            "depth" => depth = Some(PathBuf::from(v)),
            _ => {
                scene_keys = true;
                match k {
                    "seed" => {
                        spec.seed = value(at, k, v)?;
                        seed = true;
                    }
                    "height" => spec.height = value(at, k, v)?,
                    "width" => spec.width = value(at, k, v)?,
                    "size" => {
                        spec.height = value(at, k, v)?;
                        spec.width = spec.height;
                    }
                    "rects" => spec.rects = value(at, k, v)?,
                    "spheres" => spec.spheres = value(at, k, v)?,
                    "near" => spec.near = value(at, k, v)?,
                    "far" => spec.far = value(at, k, v)?,
                    "texture" => spec.texture = value(at, k, v)?,
                    "fog" => spec.fog = value(at, k, v)?,
                    _ => return Err(Error::format(at, format!("unknown key {k:?}"))),
                }
            }
        }
        consumed += end;
        rest = &line[consumed..];
    }
    match (rgb, depth) {
        (Some(rgb), Some(depth)) if !scene_keys => Ok(ManifestEntry::Files { rgb, depth }),
        (None, None) if seed => {
            spec.validate().map_err(|e| Error::format(base, e.to_string()))?;
            Ok(ManifestEntry::Scene(spec))
        }
        _ => Err(Error::format(base, "a line needs either seed=... or both rgb= and depth=")),
    }
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    let mut offset = 0;
    for raw in text.split_inclusive('\n') {
        let line = raw.split('#').next().unwrap_or("");
        if !line.trim().is_empty() {
            out.push(parse_line(line.trim_end_matches(['\n', '\r']), offset)?);
        }
        offset += raw.len();
    }
    Ok(out)
}

pub fn write_manifest(entries: &[ManifestEntry]) -> String {
    entries.iter().map(|e| e.to_line() + "\n").collect()
}

/// Materializes every entry; file paths resolve against `base_dir`.
pub fn load_samples(entries: &[ManifestEntry], base_dir: &Path) -> Result<Vec<DepthSample>> {
    entries
        .iter()
        .map(|e| {
            let sample = match e {
                ManifestEntry::Scene(spec) => gen_synthetic_scene(spec)?,
                ManifestEntry::Files { rgb, depth } => {
                    let rgb = load_ppm(base_dir.join(rgb))?;
                    let depth = load_pfm(base_dir.join(depth))?;
                    let mask = depth.data().iter().map(|&d| d > 0.0 && d.is_finite()).collect();
                    DepthSample { rgb, depth, mask }
                }
            };
            sample.validate()?;
            Ok(sample)
        })
        .collect()
}

/// Reads a manifest file and loads its samples.
pub fn load_manifest_file(path: &Path) -> Result<Vec<DepthSample>> {
    let entries = parse_manifest(&fs::read_to_string(path)?)?;
    load_samples(&entries, path.parent().unwrap_or(Path::new(".")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let text = "# scenes\nseed=3 size=96 texture=0\n\nrgb=a.ppm depth=a.pfm\n";
        let entries = parse_manifest(text).unwrap();
        assert_eq!(entries.len(), 2);
        match &entries[0] {
            ManifestEntry::Scene(s) => assert_eq!((s.seed, s.height, s.width, s.texture), (3, 96, 96, 0.0)),
            other => panic!("{other:?}"),
        }
        assert_eq!(parse_manifest(&write_manifest(&entries)).unwrap(), entries);
    }

    #[test]
    fn errors_point_at_the_token() {
        let text = "seed=1\nseed=2 colour=red\n";
        match parse_manifest(text) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 14),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_manifest("rgb=a.ppm\n"), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(parse_manifest("seed=1 size=50\n"), Err(Error::Format { .. })));
    }
}
