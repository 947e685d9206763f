//! Generate a small synthetic dataset on disk and validate it.
//!
//!     cargo run --example synthetic_dataset -- /tmp/raa-synth

use raa_mil::dataio::{generate_synthetic_dataset, validate_manifest, SynthConfig};

fn main() -> raa_mil::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "target/example-synth".into());
    let cfg = SynthConfig {
        patients_per_class: 10,
        rows: 8,
        cols: 8,
        dim: 16,
        ..SynthConfig::default()
    };
    let ds = generate_synthetic_dataset(&cfg, &out)?;
    let report = validate_manifest(&ds.manifest_path);
    println!("manifest: {}", ds.manifest_path.display());
    println!("patients: {}, held out: {:?}", ds.manifest.patients.len(), ds.test_ids);
    println!("valid: {}", report.ok);
    Ok(())
}
