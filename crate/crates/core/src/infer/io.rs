use std::fmt::Write as _;

use crate::diffcore::{Real, Tensor};
use crate::error::{Error, Result};

use super::LatentStats;

/// Binary PGM (`P5`) of one grayscale image with values in `[0, 1]`.
pub fn pgm(pixels: &[f64], width: usize, height: usize) -> Result<Vec<u8>> {
    if pixels.len() != width * height {
        return Err(Error::shape(format!("{} pixels for a {width}x{height} image", pixels.len())));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(pixels.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

/// Tiles the rows of `images` (each `side * side` pixels) into a grid with
/// `cols` images per row and a one-pixel black gap.
pub fn pgm_grid<T: Real>(images: &Tensor<T>, side: usize, cols: usize) -> Result<Vec<u8>> {
    let (n, d) = images.dims2()?;
    if d != side * side || cols == 0 {
        return Err(Error::shape(format!("rows of {d} values do not form {side}x{side} images")));
    }
    let grid_rows = n.div_ceil(cols).max(1);
    let (w, h) = (cols * (side + 1) - 1, grid_rows * (side + 1) - 1);
    let mut canvas = vec![0.0; w * h];
    for i in 0..n {
        let (gr, gc) = (i / cols, i % cols);
        for (j, v) in images.row(i).iter().enumerate() {
            let (y, x) = (gr * (side + 1) + j / side, gc * (side + 1) + j % side);
            canvas[y * w + x] = v.to_f64_lossy();
        }
    }
    pgm(&canvas, w, h)
}

/// Latent export: `item,label,mean0..,var0..,has_x,has_w`, one row per item.
pub fn latent_csv<T: Real>(
    stats: &LatentStats<T>,
    ids: &[u64],
    labels: &[usize],
    has_x: bool,
    has_w: bool,
) -> Result<String> {
    let (n, d) = stats.mean.dims2()?;
    if labels.len() != n || ids.len() != n || stats.var.shape() != stats.mean.shape() {
        return Err(Error::shape(format!("{} ids and {} labels for {n} rows", ids.len(), labels.len())));
    }
    let mut s = String::from("item,label");
    for j in 0..d {
        let _ = write!(s, ",mean{j}");
    }
    for j in 0..d {
        let _ = write!(s, ",var{j}");
    }
    s.push_str(",has_x,has_w\n");
    for i in 0..n {
        let _ = write!(s, "{},{}", ids[i], labels[i]);
        for v in stats.mean.row(i).iter().chain(stats.var.row(i)) {
            let _ = write!(s, ",{}", v.to_f64_lossy());
        }
        let _ = writeln!(s, ",{},{}", u8::from(has_x), u8::from(has_w));
    }
    Ok(s)
}
