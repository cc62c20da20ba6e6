//! Generates each toy dataset and writes a scatter plot colored by mode.
//!
//! ```text
//! cargo run --example datasets_preview -- [out_dir]
//! ```

use std::path::{Path, PathBuf};

use flowguide::datasets::{by_name, Standardizer};
use flowguide::io::svg;
use flowguide::Result;

/// Writes `<name>.svg` for every dataset into `out` and returns the paths.
pub fn run_example(out: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out).map_err(|e| flowguide::Error::io(out, e))?;
    let mut written = Vec::new();
    for name in ["ring8", "moons", "checkerboard"] {
        let d = by_name(name, 4000, 0.05, 0)?;
        let s = Standardizer::fit(&d.samples);
        let points: Vec<[f64; 2]> = (0..d.samples.rows()).map(|i| [d.samples.get(i, 0), d.samples.get(i, 1)]).collect();
        let labels: Vec<Option<usize>> = d.labels.iter().map(|&l| Some(l)).collect();
        let path = out.join(format!("{name}.svg"));
        svg::write(&path, &svg::scatter_svg(&points, &labels)?)?;
        println!(
            "{name:<13} {} points, {} modes, mean ({:+.3}, {:+.3}), std ({:.3}, {:.3}) -> {}",
            d.samples.rows(),
            d.modes,
            s.mean[0],
            s.mean[1],
            s.std[0],
            s.std[1],
            path.display()
        );
        written.push(path);
    }
    Ok(written)
}

#[allow(dead_code)]
fn main() -> Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "out/datasets".into());
    run_example(Path::new(&out)).map(|_| ())
}
