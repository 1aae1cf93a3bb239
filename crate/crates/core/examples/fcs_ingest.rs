//! Writes two small FCS 3.1 files (float32 little-endian and 16-bit integer
//! big-endian), describes them in a manifest, and builds a dataset from it.
//!
//! ```text
//! cargo run --release --example fcs_ingest
//! ```

use cytoset::data::{build_dataset, parse_fcs, ByteOrder, FcsWriter, Manifest, SampleEntry};
use cytoset::tensor::Tensor;

fn main() -> cytoset::Result<()> {
    let dir = std::env::temp_dir().join("cytoset-fcs");
    std::fs::create_dir_all(&dir).map_err(|e| cytoset::Error::Io { path: dir.clone(), source: e })?;
    let write = |name: &str, bytes: Vec<u8>| {
        let path = dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| cytoset::Error::Io { path, source: e })
    };

    let names = ["FSC-A", "CD19", "CD45"];
    let mut entries = Vec::new();
    for i in 0..4 {
        let id = format!("tube{i}");
        let bytes = if i % 2 == 0 {
            let rows: Vec<Vec<f32>> = (0..50).map(|r| vec![r as f32, (r % 7) as f32 * 1.5, 100.0 - r as f32]).collect();
            let mut w = FcsWriter::float32(&names, &Tensor::from_rows(&rows)?, ByteOrder::Little);
            // Stain names win over channel names; `/` is the delimiter and is doubled on disk.
            w.set("$P2S", "CD19/PE");
            w.to_bytes()
        } else {
            let rows: Vec<Vec<u32>> = (0..50).map(|r| vec![r * 10, r % 7, 1000 - r]).collect();
            FcsWriter::uint(&names, &rows, 16, ByteOrder::Big).to_bytes()
        };
        let parsed = parse_fcs(&bytes, &id)?;
        println!("{id}: {} events, markers {:?}", parsed.n_events(), parsed.markers);
        write(&format!("{id}.fcs"), bytes)?;
        let labels: String = (0..50).map(|r| if r % 10 == 0 { "1\n" } else { "0\n" }).collect();
        write(&format!("{id}.labels"), labels.into_bytes())?;
        entries.push(SampleEntry {
            id: id.clone(),
            path: format!("{id}.fcs").into(),
            labels: Some(format!("{id}.labels").into()),
            split: None,
        });
    }

    // Canonical markers are matched by exact name, so the stain-named
    // samples only join the panel through FSC-A and CD45.
    let manifest = Manifest {
        name: "fcs-demo".into(),
        markers: vec!["FSC-A".into(), "CD45".into()],
        samples: entries,
        ..Manifest::default()
    };
    let path = dir.join("manifest.toml");
    write("manifest.toml", manifest.to_toml().into_bytes())?;
    let dataset = build_dataset(&path, 0)?;
    println!("split {:?}", dataset.split);
    println!("standardization mean {:?} std {:?}", dataset.standardization.mean, dataset.standardization.std);
    Ok(())
}
