//! Writes every catalog scenario as a JSON file.
//!
//! `cargo run --example export_catalog -- [DIR]` (default: `catalog/` next to the manifest).

use std::path::PathBuf;

use relu_ident::oracle::catalog::scenario_files;

fn main() -> std::io::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("catalog"));
    std::fs::create_dir_all(&dir)?;
    for (name, file) in scenario_files() {
        let path = dir.join(&name);
        std::fs::write(&path, file.to_json() + "\n")?;
        println!("wrote {}", path.display());
    }
    Ok(())
}
