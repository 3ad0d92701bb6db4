//! Dataset directories: 16-bit PGM frames, line-oriented labels and a
//! manifest.
//!
//! ```text
//! <dir>/config.toml
//! <dir>/manifest.txt          # config_hash=.. / # seed=.. / # count=..
//!                             clip_0000<TAB>seed<TAB>digest
//! <dir>/clip_0000/frame_0.pgm
//! <dir>/clip_0000/labels.txt  # crop x y w h, then: frame joint x y visible
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{generate_set, BoxCrop, Image, SynthConfig, SyntheticClip};
use crate::error::{Error, Result};

const MAXVAL: f32 = 65535.0;

pub fn write_pgm(path: &Path, img: &Image) -> Result<()> {
    let mut out = format!("P5\n{} {}\n65535\n", img.w, img.h).into_bytes();
    for &v in &img.data {
        let q = (v.clamp(0.0, 1.0) * MAXVAL).round() as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |r: &str| Error::Archive {
        path: path.to_path_buf(),
        reason: r.into(),
    };
    // Header: magic, width, height, maxval separated by whitespace, then one
    // whitespace byte before the raster.
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated PGM header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?);
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "65535" {
        return Err(bad("expected a 16-bit binary PGM"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let raster = bytes.get(pos..pos + 2 * w * h).ok_or_else(|| bad("truncated raster"))?;
    let data = raster
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]) as f32 / MAXVAL)
        .collect();
    Ok(Image { h, w, data })
}

fn labels_text(clip: &SyntheticClip) -> String {
    let c = clip.crop;
    let mut s = format!("# seed {}\n# crop {} {} {} {}\n", clip.seed, c.x, c.y, c.w, c.h);
    for (t, frame) in clip.joints.iter().enumerate() {
        for (k, p) in frame.iter().enumerate() {
            let _ = writeln!(s, "{t} {k} {} {} {}", p[0], p[1], clip.visible[k] as u8);
        }
    }
    s
}

pub fn write_clip(dir: &Path, clip: &SyntheticClip) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (t, f) in clip.frames.iter().enumerate() {
        write_pgm(&dir.join(format!("frame_{t}.pgm")), f)?;
    }
    let lp = dir.join("labels.txt");
    fs::write(&lp, labels_text(clip)).map_err(|e| Error::io(&lp, e))
}

pub fn read_clip(dir: &Path, frames: usize) -> Result<SyntheticClip> {
    let lp = dir.join("labels.txt");
    let text = fs::read_to_string(&lp).map_err(|e| Error::io(&lp, e))?;
    let bad = |r: String| Error::Archive { path: lp.clone(), reason: r };
    let mut seed = 0;
    let mut crop = BoxCrop::new(0.0, 0.0, 1.0, 1.0);
    let mut joints: Vec<Vec<[f64; 2]>> = vec![Vec::new(); frames];
    let mut visible = Vec::new();
    for line in text.lines() {
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["#", "seed", v] => seed = v.parse().map_err(|_| bad(format!("bad seed line {line}")))?,
            ["#", "crop", x, y, w, h] => {
                let p = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("bad crop line {line}")));
                crop = BoxCrop::new(p(x)?, p(y)?, p(w)?, p(h)?);
            }
            [t, k, x, y, v] => {
                let t: usize = t.parse().map_err(|_| bad(format!("bad frame index in {line}")))?;
                let k: usize = k.parse().map_err(|_| bad(format!("bad joint index in {line}")))?;
                let p = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("bad coordinate in {line}")));
                let frame = joints.get_mut(t).ok_or_else(|| bad(format!("frame {t} out of range")))?;
                if frame.len() != k {
                    return Err(bad(format!("joints out of order at {line}")));
                }
                frame.push([p(x)?, p(y)?]);
                if t == 0 {
                    visible.push(*v == "1");
                }
            }
            [] => {}
            _ => return Err(bad(format!("unrecognised line {line}"))),
        }
    }
    let frames = (0..frames)
        .map(|t| read_pgm(&dir.join(format!("frame_{t}.pgm"))))
        .collect::<Result<Vec<_>>>()?;
    if joints.iter().any(|f| f.len() != visible.len()) {
        return Err(bad("frames list different joint counts".into()));
    }
    Ok(SyntheticClip {
        seed,
        frames,
        joints,
        visible,
        crop,
    })
}

fn clip_name(i: usize) -> String {
    format!("clip_{i:04}")
}

/// Generates `count` clips from `seed` and writes them under `dir`.
/// Returns the manifest text.
pub fn write_dataset(dir: &Path, seed: u64, count: usize, cfg: &SynthConfig) -> Result<String> {
    let clips = generate_set(seed, count, cfg)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cp = dir.join("config.toml");
    let cfg_text = toml::to_string(cfg).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(&cp, cfg_text).map_err(|e| Error::io(&cp, e))?;
    let mut manifest = format!("# config_hash={}\n# seed={seed}\n# count={count}\n", cfg.hash());
    for (i, clip) in clips.iter().enumerate() {
        write_clip(&dir.join(clip_name(i)), clip)?;
        let _ = writeln!(manifest, "{}\t{}\t{}", clip_name(i), clip.seed, clip.digest());
    }
    let mp = dir.join("manifest.txt");
    fs::write(&mp, &manifest).map_err(|e| Error::io(&mp, e))?;
    Ok(manifest)
}

pub fn read_dataset(dir: &Path) -> Result<(SynthConfig, Vec<SyntheticClip>)> {
    let cp = dir.join("config.toml");
    let text = fs::read_to_string(&cp).map_err(|e| Error::io(&cp, e))?;
    let cfg: SynthConfig = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", cp.display())))?;
    cfg.validate()?;
    let mp = dir.join("manifest.txt");
    let manifest = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let clips = manifest
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|l| {
            let name = l.split('\t').next().unwrap_or_default();
            read_clip(&dir.join(name), cfg.frames())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((cfg, clips))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image {
            h: 2,
            w: 3,
            data: vec![0.0, 0.25, 0.5, 0.75, 1.0, 0.123],
        };
        let p = dir.path().join("x.pgm");
        write_pgm(&p, &img).unwrap();
        let back = read_pgm(&p).unwrap();
        assert_eq!((back.h, back.w), (2, 3));
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 0.5 / MAXVAL + 1e-7);
        }
    }

    #[test]
    fn dataset_round_trip_keeps_labels() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            image_size: 32,
            ..SynthConfig::default()
        };
        write_dataset(dir.path(), 3, 2, &cfg).unwrap();
        let (cfg2, clips) = read_dataset(dir.path()).unwrap();
        assert_eq!(cfg, cfg2);
        let orig = generate_set(3, 2, &cfg).unwrap();
        for (a, b) in orig.iter().zip(&clips) {
            assert_eq!(a.joints, b.joints);
            assert_eq!(a.visible, b.visible);
            assert_eq!(a.crop, b.crop);
            assert_eq!(a.seed, b.seed);
        }
    }
}
