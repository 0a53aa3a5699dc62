//! Regenerates the example datasets under `crates/core/data/`.
//!
//! ```text
//! cargo run -p fpca --example bundled_data
//! ```

use std::fmt::Write as _;
use std::path::Path;

use rand_distr::{Distribution, Normal};

use fpca::rng::seeded;
use fpca::simulate::{generate_dataset, SimDesign};

fn main() -> fpca::Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("data");
    std::fs::create_dir_all(&dir)?;
    // 30 x 30 covariance-model data with two components and 10% of cells hidden.
    let design = SimDesign::new(30, 30, 2, 0.1).with_seed(20240611);
    let data = generate_dataset(&design, 0)?;
    data.masked.save_coordinate_csv(dir.join("sim_k2.csv"))?;
    println!("wrote {} cells of a {}x{} grid", data.masked.len(), design.n, design.p);

    // A 40 x 40 three-channel "image": each channel is a sum of three
    // separable patterns plus N(0, 0.01^2) noise, written as dense CSV.
    let noise = Normal::new(0.0, 0.01).unwrap();
    let mut rng = seeded(20240612);
    for (c, name) in ["red", "green", "blue"].iter().enumerate() {
        let w = [0.5 + 0.1 * c as f64, 0.2 - 0.05 * c as f64, 0.15 + 0.02 * c as f64];
        let mut out = String::new();
        for i in 0..40 {
            let fi = i as f64;
            let row: Vec<String> = (0..40)
                .map(|j| {
                    let fj = j as f64;
                    let v = w[0] * (1.0 + 0.2 * (fi / 7.0).sin()) * (1.0 + 0.2 * (fj / 5.0).cos())
                        + w[1] * (fi / 6.0).sin() * (fj / 9.0).cos()
                        + w[2] * (2.0 * fi / 40.0 - 1.0) * (1.0 - 2.0 * fj / 40.0)
                        + noise.sample(&mut rng);
                    format!("{:.6}", v.clamp(0.0, 1.0))
                })
                .collect();
            writeln!(out, "{}", row.join(",")).unwrap();
        }
        std::fs::write(dir.join(format!("image_{name}.csv")), out)?;
    }
    println!("wrote image_red.csv, image_green.csv, image_blue.csv (40x40)");
    Ok(())
}
