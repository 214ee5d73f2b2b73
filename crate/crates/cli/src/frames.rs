//! Frame sequences on disk: a directory of PNGs, or one raw planar RGB8 file
//! with a `<file>.dims` sidecar holding `WxH`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use vqvc_core::Tensor;

/// Frame extents must be multiples of this before encoding.
pub const CROP_MULTIPLE: usize = 128;

pub fn dims_path(raw: &Path) -> PathBuf {
    let mut s = raw.as_os_str().to_owned();
    s.push(".dims");
    PathBuf::from(s)
}

fn is_raw(path: &Path) -> bool {
    matches!(path.extension().and_then(|e| e.to_str()), Some("rgb" | "raw"))
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("cannot read {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

fn from_rgb8(w: usize, h: usize, bytes: &[u8], interleaved: bool) -> Tensor {
    let n = w * h;
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / n, i % n);
        let b = if interleaved { bytes[p * 3 + c] } else { bytes[i] };
        b as f32 / 255.0
    })
}

fn to_rgb8(x: &Tensor, interleaved: bool) -> Vec<u8> {
    let n = x.len() / 3;
    let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    if !interleaved {
        return x.data().iter().map(|&v| q(v)).collect();
    }
    (0..3 * n).map(|i| q(x.data()[(i % 3) * n + i / 3])).collect()
}

fn read_dims(raw: &Path) -> Result<(usize, usize)> {
    let side = dims_path(raw);
    let text = fs::read_to_string(&side).with_context(|| format!("missing sidecar {}", side.display()))?;
    let parse = || -> Option<(usize, usize)> {
        let (w, h) = text.trim().split_once(['x', 'X'])?;
        Some((w.trim().parse().ok()?, h.trim().parse().ok()?))
    };
    match parse() {
        Some((w, h)) if w > 0 && h > 0 => Ok((w, h)),
        _ => bail!("{} must contain WxH, found {:?}", side.display(), text.trim()),
    }
}

/// Reads every frame of a clip as `[3,h,w]` tensors in `[0,1]`.
pub fn read_clip(path: &Path) -> Result<Vec<Tensor>> {
    if path.is_dir() {
        let files = png_files(path)?;
        ensure!(!files.is_empty(), "no PNG frames in {}", path.display());
        let mut out = Vec::with_capacity(files.len());
        for f in &files {
            let img = image::open(f).with_context(|| format!("cannot decode {}", f.display()))?.to_rgb8();
            let (w, h) = (img.width() as usize, img.height() as usize);
            out.push(from_rgb8(w, h, img.as_raw(), true));
        }
        ensure!(
            out.iter().all(|x| x.shape() == out[0].shape()),
            "frames in {} differ in size",
            path.display()
        );
        return Ok(out);
    }
    let (w, h) = read_dims(path)?;
    let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    let frame = 3 * w * h;
    ensure!(
        !bytes.is_empty() && bytes.len() % frame == 0,
        "{} holds {} bytes, not a whole number of {w}x{h} frames",
        path.display(),
        bytes.len()
    );
    Ok(bytes.chunks(frame).map(|b| from_rgb8(w, h, b, false)).collect())
}

/// Center-crops to multiples of [`CROP_MULTIPLE`]; without `crop` the extents
/// must already be multiples.
pub fn prepare(frames: Vec<Tensor>, crop: bool) -> Result<Vec<Tensor>> {
    let (_, h, w) = frames[0].dims3()?;
    if h % CROP_MULTIPLE == 0 && w % CROP_MULTIPLE == 0 {
        return Ok(frames);
    }
    ensure!(
        crop,
        "frame extents {w}x{h} are not multiples of {CROP_MULTIPLE}; pass --center-crop"
    );
    let (nh, nw) = (h / CROP_MULTIPLE * CROP_MULTIPLE, w / CROP_MULTIPLE * CROP_MULTIPLE);
    ensure!(nh > 0 && nw > 0, "frame extents {w}x{h} are smaller than {CROP_MULTIPLE}");
    let (top, left) = ((h - nh) / 2, (w - nw) / 2);
    Ok(frames
        .iter()
        .map(|x| {
            Tensor::from_fn(&[3, nh, nw], |i| {
                let (c, y, xx) = (i / (nh * nw), (i / nw) % nh, i % nw);
                x.data()[(c * h + top + y) * w + left + xx]
            })
        })
        .collect())
}

/// Writes frames as raw planar RGB8 (`.rgb`/`.raw` path) or as a PNG directory.
pub fn write_clip(frames: &[Tensor], out: &Path) -> Result<()> {
    let (_, h, w) = frames[0].dims3()?;
    if is_raw(out) {
        let bytes: Vec<u8> = frames.iter().flat_map(|x| to_rgb8(x, false)).collect();
        fs::write(out, bytes).with_context(|| format!("cannot write {}", out.display()))?;
        fs::write(dims_path(out), format!("{w}x{h}\n"))?;
        return Ok(());
    }
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    for (i, x) in frames.iter().enumerate() {
        let img = image::RgbImage::from_raw(w as u32, h as u32, to_rgb8(x, true)).expect("buffer size");
        let p = out.join(format!("frame_{i:05}.png"));
        img.save(&p).with_context(|| format!("cannot write {}", p.display()))?;
    }
    Ok(())
}

/// Clips of a dataset: the directory itself if it holds PNGs, else each
/// PNG subdirectory and raw file inside it, sorted by name.
pub fn dataset_clips(dir: &Path) -> Result<Vec<PathBuf>> {
    if !png_files(dir)?.is_empty() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut clips: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| (p.is_dir() && png_files(p).is_ok_and(|f| !f.is_empty())) || (p.is_file() && is_raw(p)))
        .collect();
    clips.sort();
    ensure!(!clips.is_empty(), "no clips found in {}", dir.display());
    Ok(clips)
}
