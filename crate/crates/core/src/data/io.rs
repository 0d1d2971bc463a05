use std::fs;
use std::io::Write;
use std::path::Path;

use crate::attention::RegionMask;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary PPM (P6) of a `[3, S, S]` image in `[0, 1]`.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::invalid(format!("ppm needs [3, H, W], got {shape:?}")));
    }
    let (h, w) = (shape[1], shape[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for p in 0..h * w {
        for ch in 0..3 {
            out.push(to_byte(d[ch * h * w + p]));
        }
    }
    Ok(out)
}

/// Binary PGM (P5) of `h x w` values in `[0, 1]`.
pub fn encode_pgm(values: &[f64], h: usize, w: usize) -> Result<Vec<u8>> {
    if values.len() != h * w {
        return Err(Error::invalid("pgm size mismatch"));
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| to_byte(v)));
    Ok(out)
}

fn parse_header<'a>(bytes: &'a [u8], magic: &str, path: &Path) -> Result<(usize, usize, &'a [u8])> {
    let bad = |msg: &str| Error::Data(format!("{}: {msg}", path.display()));
    let mut fields = Vec::with_capacity(4);
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..i]).map_err(|_| bad("non-ascii header"))?);
    }
    if fields[0] != magic {
        return Err(bad(&format!("expected {magic}, found {}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max != 255 {
        return Err(bad("only 8-bit files are supported"));
    }
    Ok((w, h, &bytes[i + 1..]))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    write_file(path, &encode_ppm(image)?)
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, h, body) = parse_header(&bytes, "P6", path)?;
    if body.len() < 3 * w * h {
        return Err(Error::Data(format!("{}: truncated pixel data", path.display())));
    }
    let mut data = vec![0.0; 3 * w * h];
    for p in 0..w * h {
        for ch in 0..3 {
            data[ch * w * h + p] = body[3 * p + ch] as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Raw PGM samples scaled to `[0, 1]`, with the image height and width.
pub fn read_pgm(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, h, body) = parse_header(&bytes, "P5", path)?;
    if body.len() < w * h {
        return Err(Error::Data(format!("{}: truncated pixel data", path.display())));
    }
    Ok((body[..w * h].iter().map(|&b| b as f64 / 255.0).collect(), h, w))
}

pub fn write_mask(path: &Path, mask: &RegionMask) -> Result<()> {
    let values: Vec<f64> = mask.bits().iter().map(|&b| b as f64).collect();
    write_file(path, &encode_pgm(&values, mask.size(), mask.size())?)
}

pub fn read_mask(path: &Path) -> Result<RegionMask> {
    let (values, h, w) = read_pgm(path)?;
    if h != w {
        return Err(Error::Data(format!("{}: mask is not square", path.display())));
    }
    RegionMask::new(h, values.iter().map(|&v| (v >= 0.5) as u8).collect())
}
