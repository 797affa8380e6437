//! Regenerate `data/reference/` at the workspace root.

use std::path::PathBuf;

use gridcc::opf::ProductKind;
use gridcc::reference::{reference_data, write_files, SUMMER_WEEK};

fn main() -> gridcc::error::Result<()> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/reference");
    let cfg = write_files(&dir, &reference_data(), ProductKind::Pfc, SUMMER_WEEK, SUMMER_WEEK + 24)?;
    println!("wrote {}", cfg.display());
    Ok(())
}
