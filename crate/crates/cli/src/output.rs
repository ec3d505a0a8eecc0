//! Writers for CSV tables, PGM images and SVG contact sheets.

use std::fmt::Write as _;
use std::path::Path;

use flowmix::flow::GridShape;
use flowmix::Tensor;

use crate::error::{CliError, Result};

pub fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::write_failed(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| CliError::write_failed(path, e))
}

/// Writes to `path`, or to stdout when no path is given.
pub fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => write_file(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn comment_block(lines: &[String]) -> String {
    lines.iter().map(|l| format!("# {l}\n")).collect()
}

/// `# ` header lines, a `x1,...,xN` column row, then one row per sample.
pub fn matrix_csv(comments: &[String], x: &Tensor) -> String {
    let mut out = comment_block(comments);
    let names: Vec<String> = (1..=x.cols()).map(|j| format!("x{j}")).collect();
    out.push_str(&names.join(","));
    out.push('\n');
    for i in 0..x.rows() {
        let row: Vec<String> = x.row(i).iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Grey level of a value on `[0, max]`.
fn grey(v: f64, max: f64) -> u8 {
    (v / max).clamp(0.0, 1.0).mul_add(255.0, 0.5) as u8
}

fn check_grid(grid: GridShape, dim: usize) -> Result<()> {
    if grid.channels != 1 {
        return Err(CliError::Config(format!(
            "image output needs a single-channel grid, got {} channels",
            grid.channels
        )));
    }
    if grid.len() != dim {
        return Err(CliError::Config(format!(
            "grid {}x{} does not match sample dimension {dim}",
            grid.height, grid.width
        )));
    }
    Ok(())
}

/// Binary (P5) greymap of one sample.
pub fn pgm(row: &[f64], grid: GridShape, max: f64) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", grid.width, grid.height).into_bytes();
    out.extend(row.iter().map(|&v| grey(v, max)));
    out
}

/// Writes `sample_0000.pgm`, `sample_0001.pgm`, ... into `dir`.
pub fn write_pgms(dir: &Path, x: &Tensor, grid: GridShape, max: f64) -> Result<()> {
    check_grid(grid, x.cols())?;
    std::fs::create_dir_all(dir).map_err(|e| CliError::write_failed(dir, e))?;
    for i in 0..x.rows() {
        write_file(&dir.join(format!("sample_{i:04}.pgm")), &pgm(x.row(i), grid, max))?;
    }
    Ok(())
}

/// All samples tiled on one sheet, `columns` per row, each pixel a square.
pub fn contact_sheet_svg(x: &Tensor, grid: GridShape, max: f64, columns: usize) -> Result<String> {
    check_grid(grid, x.cols())?;
    const PX: usize = 4;
    const GAP: usize = 2;
    let columns = columns.max(1);
    let rows = x.rows().div_ceil(columns);
    let (cell_w, cell_h) = (grid.width * PX + GAP, grid.height * PX + GAP);
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" shape-rendering="crispEdges">"#,
        columns * cell_w + GAP,
        rows * cell_h + GAP
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for i in 0..x.rows() {
        let (ox, oy) = (GAP + (i % columns) * cell_w, GAP + (i / columns) * cell_h);
        for (p, &v) in x.row(i).iter().enumerate() {
            let g = grey(v, max);
            let _ = writeln!(
                out,
                r#"<rect x="{}" y="{}" width="{PX}" height="{PX}" fill="rgb({g},{g},{g})"/>"#,
                ox + (p % grid.width) * PX,
                oy + (p / grid.width) * PX
            );
        }
    }
    out.push_str("</svg>\n");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(h: usize, w: usize) -> GridShape {
        GridShape {
            channels: 1,
            height: h,
            width: w,
        }
    }

    #[test]
    fn pgm_header_and_clamped_pixels() {
        let bytes = pgm(&[0.0, 0.5, 1.0, 2.0, -1.0, 1.0], grid(2, 3), 1.0);
        let header = b"P5\n3 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[0, 128, 255, 255, 0, 255]);
    }

    #[test]
    fn csv_rows_round_trip_exactly() {
        let x = Tensor::matrix(1, 2, vec![0.1, -3.25]).unwrap();
        let text = matrix_csv(&["a=b".into()], &x);
        assert_eq!(text, "# a=b\nx1,x2\n0.1,-3.25\n");
    }

    #[test]
    fn grid_must_match() {
        let x = Tensor::zeros(&[2, 4]);
        assert!(contact_sheet_svg(&x, grid(2, 2), 1.0, 2).is_ok());
        assert!(contact_sheet_svg(&x, grid(3, 2), 1.0, 2).is_err());
    }
}
