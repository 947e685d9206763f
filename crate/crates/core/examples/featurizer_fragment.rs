//! Write token files the way an external featurizer would, describe them in
//! a manifest fragment, merge it into a manifest and validate the result.

use std::fs;
use std::path::Path;

use raa_mil::dataio::{
    synthesize_bags, validate_manifest, write_bag, DatasetManifest, ManifestFragment, PatientEntry, SynthConfig,
};

fn main() -> raa_mil::Result<()> {
    let root = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "target/example-featurizer".into());
    let root = Path::new(&root);
    let feat = root.join("features");
    fs::create_dir_all(&feat).expect("create output directory");

    let bags = synthesize_bags(&SynthConfig {
        patients_per_class: 2,
        dim: 32,
        ..SynthConfig::default()
    })?;
    let mut patients = Vec::new();
    for b in &bags {
        let file = format!("{}.raab", b.patient_id);
        write_bag(b, feat.join(&file))?;
        patients.push(PatientEntry {
            id: b.patient_id.clone(),
            label: b.label,
            path: file.into(),
            patches: b.patches(),
        });
    }
    let fragment = ManifestFragment {
        rows: 14,
        cols: 14,
        dim: 32,
        patients,
        errors: Vec::new(),
        provenance: serde_json::json!({"encoder": "example"}),
    };
    let mut manifest = DatasetManifest::new(14, 14, 32);
    manifest.merge_fragment(&fragment, &feat, root)?;
    let path = root.join("manifest.json");
    manifest.save(&path)?;
    let report = validate_manifest(&path);
    println!(
        "{} patients merged, first path {:?}, valid: {}",
        manifest.patients.len(),
        manifest.patients[0].path,
        report.ok
    );
    Ok(())
}
