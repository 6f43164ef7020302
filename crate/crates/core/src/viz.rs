//! Raster views of reassembly kernels.
//!
//! Heatmaps are 8-bit PGM (P5) images quantized linearly from `[0, max]` to
//! `[0, 255]`; the maximum is kept in a `# max-weight` header comment so the
//! weights can be recovered. Overlays are PPM (P6).
//!
//! Across several chained upsampling levels, the weight a target pixel draws
//! from a source pixel is the product of the kernel weights along one
//! reassembly path, summed over all paths.

use crate::carafe::{predict_kernels, reassemble, CarafeConfig, CarafeParams, KernelField};
use crate::error::{config_err, Error, Result};
use crate::tensor::Tensor;

const MAX_WEIGHT_TAG: &str = "max-weight";

/// Kernel fields of `levels` successive applications of the same operator,
/// starting from `x`. Entry `l` maps level `l` to level `l + 1`.
pub fn chain_fields(x: &Tensor, params: &CarafeParams, cfg: &CarafeConfig, levels: usize) -> Result<Vec<KernelField>> {
    if levels == 0 {
        return Err(config_err!("level count must be >= 1"));
    }
    let mut fields = Vec::with_capacity(levels);
    let mut feat = x.clone();
    for l in 0..levels {
        let field = predict_kernels(&feat, params, cfg)?;
        if l + 1 < levels {
            feat = reassemble(&feat, &field, cfg)?;
        }
        fields.push(field);
    }
    Ok(fields)
}

fn check_target(field: &KernelField, y: usize, x: usize) -> Result<()> {
    let (oh, ow) = (field.sigma * field.height(), field.sigma * field.width());
    if y >= oh || x >= ow {
        return Err(config_err!("target pixel ({y},{x}) outside the {oh}×{ow} output"));
    }
    Ok(())
}

/// The `k_up × k_up` kernel that produces output pixel `(y, x)`, as a
/// `1 × k_up × k_up` tensor.
pub fn kernel_window(field: &KernelField, y: usize, x: usize) -> Result<Tensor> {
    check_target(field, y, x)?;
    let s = field.sigma;
    let p = (y % s) * s + x % s;
    Tensor::new(vec![1, field.k_up, field.k_up], field.group(p, y / s, x / s))
}

/// Weight every level-0 pixel contributes to output pixel `(y, x)` of the
/// last level. Taps that fall outside a map carry no weight.
pub fn accumulated_source_weights(fields: &[KernelField], y: usize, x: usize) -> Result<Tensor> {
    let last = fields.last().ok_or_else(|| config_err!("no kernel fields"))?;
    check_target(last, y, x)?;
    let (mut h, mut w) = (last.sigma * last.height(), last.sigma * last.width());
    let mut mass = vec![0.0; h * w];
    mass[y * w + x] = 1.0;
    for field in fields.iter().rev() {
        let (s, k) = (field.sigma, field.k_up);
        let r = k / 2;
        let (sh, sw) = (field.height(), field.width());
        if sh * s != h || sw * s != w {
            return Err(Error::Shape(format!(
                "kernel field {sh}×{sw} (σ={s}) does not produce the {h}×{w} level above it"
            )));
        }
        let mut src = vec![0.0; sh * sw];
        for ty in 0..h {
            for tx in 0..w {
                let m = mass[ty * w + tx];
                if m == 0.0 {
                    continue;
                }
                let (i, j, p) = (ty / s, tx / s, (ty % s) * s + tx % s);
                for n in 0..k {
                    let Some(si) = (i + n).checked_sub(r).filter(|&v| v < sh) else { continue };
                    for mm in 0..k {
                        let Some(sj) = (j + mm).checked_sub(r).filter(|&v| v < sw) else { continue };
                        src[si * sw + sj] += m * field.weight(p, n, mm, i, j);
                    }
                }
            }
        }
        mass = src;
        (h, w) = (sh, sw);
    }
    Tensor::new(vec![1, h, w], mass)
}

/// A decoded 8-bit grayscale image.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
    /// Value of the `# max-weight` comment, when present.
    pub max_weight: Option<f64>,
}

impl GrayImage {
    /// Undoes the heatmap quantization. Requires the `max-weight` comment.
    pub fn weights(&self) -> Result<Vec<f64>> {
        let max = self
            .max_weight
            .ok_or_else(|| Error::Format("heatmap lacks a max-weight comment".into()))?;
        Ok(self.pixels.iter().map(|&q| q as f64 / 255.0 * max).collect())
    }
}

fn quantize(values: &[f64], max: f64) -> Vec<u8> {
    values
        .iter()
        .map(|&v| {
            if max > 0.0 {
                (v.max(0.0) / max * 255.0).round().min(255.0) as u8
            } else {
                0
            }
        })
        .collect()
}

/// Encodes a `1 × H × W` map of non-negative weights as a P5 heatmap.
pub fn heatmap_pgm(weights: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = weights.chw()?;
    if c != 1 {
        return Err(Error::Shape(format!("heatmap needs one channel, got {c}")));
    }
    let (_, max) = weights.min_max();
    let mut out = format!("P5\n# {MAX_WEIGHT_TAG} {max:e}\n{w} {h}\n255\n").into_bytes();
    out.extend(quantize(weights.data(), max));
    Ok(out)
}

/// Red-tinted overlay of a `1 × H × W` weight map on the channel mean of a
/// `C × H × W` feature map, as P6.
pub fn overlay_ppm(base: &Tensor, weights: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = base.chw()?;
    if weights.dims() != [1, h, w] {
        return Err(Error::Shape(format!(
            "overlay weights {:?} do not match base {h}×{w}",
            weights.dims()
        )));
    }
    let mean: Vec<f64> = (0..h * w)
        .map(|k| (0..c).map(|ci| base.data()[ci * h * w + k]).sum::<f64>() / c as f64)
        .collect();
    let (lo, hi) = mean.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let (_, wmax) = weights.min_max();
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for (k, &m) in mean.iter().enumerate() {
        let g = if hi > lo { (m - lo) / (hi - lo) } else { 0.5 };
        let a = if wmax > 0.0 { (weights.data()[k] / wmax).clamp(0.0, 1.0) } else { 0.0 };
        let dim = g * (1.0 - a);
        for v in [dim + a, dim, dim] {
            out.push((v * 255.0).round() as u8);
        }
    }
    Ok(out)
}

struct Header<'a> {
    magic: &'a str,
    fields: [usize; 3],
    comments: Vec<&'a str>,
    body: &'a [u8],
}

fn parse_header(bytes: &[u8]) -> Result<Header<'_>> {
    let bad = |m: &str| Error::Format(format!("netpbm: {m}"));
    let mut pos = 0;
    let mut tokens: Vec<&str> = Vec::new();
    let mut comments = Vec::new();
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos >= bytes.len() {
            return Err(bad("truncated header"));
        }
        if bytes[pos] == b'#' {
            let end = bytes[pos..].iter().position(|&b| b == b'\n').map_or(bytes.len(), |e| pos + e);
            comments.push(std::str::from_utf8(&bytes[pos + 1..end]).map_err(|_| bad("non-UTF-8 comment"))?.trim());
            pos = end;
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        tokens.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
    }
    if pos >= bytes.len() {
        return Err(bad("missing raster"));
    }
    let mut fields = [0usize; 3];
    for (f, t) in fields.iter_mut().zip(&tokens[1..]) {
        *f = t.parse().map_err(|_| bad("bad header number"))?;
    }
    if fields[2] != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    Ok(Header {
        magic: tokens[0],
        fields,
        comments,
        body: &bytes[pos + 1..],
    })
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let hdr = parse_header(bytes)?;
    if hdr.magic != "P5" {
        return Err(Error::Format(format!("expected P5, found {}", hdr.magic)));
    }
    let [width, height, _] = hdr.fields;
    if hdr.body.len() != width * height {
        return Err(Error::Format(format!(
            "P5 raster has {} bytes, expected {}",
            hdr.body.len(),
            width * height
        )));
    }
    let max_weight = hdr
        .comments
        .iter()
        .find_map(|c| c.strip_prefix(MAX_WEIGHT_TAG))
        .map(|v| v.trim().parse::<f64>().map_err(|_| Error::Format("bad max-weight comment".into())))
        .transpose()?;
    Ok(GrayImage {
        width,
        height,
        pixels: hdr.body.to_vec(),
        max_weight,
    })
}

/// Returns `(width, height, rgb)`.
pub fn decode_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let hdr = parse_header(bytes)?;
    if hdr.magic != "P6" {
        return Err(Error::Format(format!("expected P6, found {}", hdr.magic)));
    }
    let [width, height, _] = hdr.fields;
    if hdr.body.len() != 3 * width * height {
        return Err(Error::Format("P6 raster size mismatch".into()));
    }
    Ok((width, height, hdr.body.to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn setup(k_up: usize, zero: bool) -> (Tensor, CarafeParams, CarafeConfig) {
        let cfg = CarafeConfig::new(3, 2, k_up, 1, Some(2)).unwrap();
        let mut rng = Rng::new(11);
        let params = if zero {
            CarafeParams::zeros(&cfg).unwrap()
        } else {
            CarafeParams::init(&cfg, &mut rng).unwrap()
        };
        let x = Tensor::new(vec![3, 4, 5], rng.normal(60, 1.0)).unwrap();
        (x, params, cfg)
    }

    #[test]
    fn zero_params_give_uniform_windows() {
        let (x, params, cfg) = setup(5, true);
        let fields = chain_fields(&x, &params, &cfg, 1).unwrap();
        let win = kernel_window(&fields[0], 3, 7).unwrap();
        assert!(win.data().iter().all(|&v| (v - 1.0 / 25.0).abs() < 1e-15));
    }

    #[test]
    fn unit_window_is_one_full_cell() {
        let (x, params, cfg) = setup(1, false);
        let fields = chain_fields(&x, &params, &cfg, 1).unwrap();
        let win = kernel_window(&fields[0], 0, 0).unwrap();
        assert_eq!(win.data(), &[1.0]);
        let img = decode_pgm(&heatmap_pgm(&win).unwrap()).unwrap();
        assert_eq!(img.pixels, vec![255]);
    }

    #[test]
    fn out_of_range_target_is_rejected() {
        let (x, params, cfg) = setup(3, false);
        let fields = chain_fields(&x, &params, &cfg, 1).unwrap();
        assert!(kernel_window(&fields[0], 8, 0).is_err());
        assert!(kernel_window(&fields[0], 0, 10).is_err());
        assert!(accumulated_source_weights(&fields, 8, 0).is_err());
    }

    #[test]
    fn heatmap_round_trip_within_quantization() {
        let (x, params, cfg) = setup(5, false);
        let fields = chain_fields(&x, &params, &cfg, 1).unwrap();
        let win = kernel_window(&fields[0], 5, 2).unwrap();
        let img = decode_pgm(&heatmap_pgm(&win).unwrap()).unwrap();
        assert_eq!((img.width, img.height), (5, 5));
        let w = img.weights().unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() <= 25.0 / 255.0);
        for (a, b) in w.iter().zip(win.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 * img.max_weight.unwrap() + 1e-12);
        }
    }

    #[test]
    fn single_level_accumulation_is_the_window() {
        let (x, params, cfg) = setup(3, false);
        let fields = chain_fields(&x, &params, &cfg, 1).unwrap();
        let (ty, tx) = (3, 4);
        let acc = accumulated_source_weights(&fields, ty, tx).unwrap();
        let win = kernel_window(&fields[0], ty, tx).unwrap();
        let (i, j) = (ty / 2, tx / 2);
        for n in 0..3 {
            for m in 0..3 {
                assert_eq!(acc.at3(0, i + n - 1, j + m - 1), win.at3(0, n, m));
            }
        }
        assert!((acc.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn accumulation_matches_path_enumeration() {
        let (x, params, cfg) = setup(3, false);
        let fields = chain_fields(&x, &params, &cfg, 2).unwrap();
        assert_eq!(fields[1].height(), 8);
        let (ty, tx) = (9, 6);
        let acc = accumulated_source_weights(&fields, ty, tx).unwrap();
        assert_eq!(acc.dims(), &[1, 4, 5]);
        let mut brute = vec![0.0; 20];
        let (f0, f1) = (&fields[0], &fields[1]);
        let (i1, j1, p1) = (ty / 2, tx / 2, (ty % 2) * 2 + tx % 2);
        for n1 in 0..3 {
            for m1 in 0..3 {
                let (my, mx) = (i1 as isize + n1 as isize - 1, j1 as isize + m1 as isize - 1);
                if !(0..8).contains(&my) || !(0..10).contains(&mx) {
                    continue;
                }
                let w1 = f1.weight(p1, n1, m1, i1, j1);
                let (my, mx) = (my as usize, mx as usize);
                let (i0, j0, p0) = (my / 2, mx / 2, (my % 2) * 2 + mx % 2);
                for n0 in 0..3 {
                    for m0 in 0..3 {
                        let (sy, sx) = (i0 as isize + n0 as isize - 1, j0 as isize + m0 as isize - 1);
                        if (0..4).contains(&sy) && (0..5).contains(&sx) {
                            brute[sy as usize * 5 + sx as usize] += w1 * f0.weight(p0, n0, m0, i0, j0);
                        }
                    }
                }
            }
        }
        for (a, b) in acc.data().iter().zip(&brute) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn overlay_is_valid_p6() {
        let (x, params, cfg) = setup(3, false);
        let fields = chain_fields(&x, &params, &cfg, 1).unwrap();
        let acc = accumulated_source_weights(&fields, 1, 1).unwrap();
        let (w, h, rgb) = decode_ppm(&overlay_ppm(&x, &acc).unwrap()).unwrap();
        assert_eq!((w, h, rgb.len()), (5, 4, 60));
        assert!(decode_pgm(&overlay_ppm(&x, &acc).unwrap()).is_err());
    }

    #[test]
    fn malformed_images_are_rejected() {
        assert!(decode_pgm(b"P5\n2 2\n255\n\x00").is_err());
        assert!(decode_pgm(b"P5\n2 2\n65535\n\x00\x00\x00\x00").is_err());
        assert!(decode_pgm(b"P5\n2").is_err());
        let ok = decode_pgm(b"P5\n# hello\n2 1\n255\n\x07\x09").unwrap();
        assert_eq!(ok.pixels, vec![7, 9]);
        assert!(ok.weights().is_err());
    }
}
