//! Synthetic-corpus export: one plain-text manifest plus one binary
//! record per example.
//!
//! Record layout (little-endian):
//!
//! ```text
//! rank     u8          always 3 (channels, height, width)
//! dims     rank × u64
//! pixels   product(dims) × f32
//! n_tokens u64
//! tokens   n_tokens × u32   caption token ids, [CLS]/[SEP] included
//! ```

use std::path::Path;

use vlp_core::corpus::{answer_inventory, class_names, PairedExample};

use crate::error::{CliError, Result};

/// Write `manifest.txt` and `example_%05d.bin` files into `dir`.
pub fn export_corpus(dir: &Path, seed: u64, examples: &[PairedExample]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut manifest = String::new();
    manifest.push_str("# synthetic image-caption corpus manifest\n");
    manifest.push_str("# fields, in order: version, seed, count, image_shape,\n");
    manifest.push_str("#   classes (comma list), answers (comma list),\n");
    manifest.push_str("#   then one `record = <file> | <caption>` line per example\n");
    manifest.push_str("# record files: rank u8, dims rank*u64 LE, pixels f32 LE,\n");
    manifest.push_str("#   n_tokens u64 LE, caption token ids n_tokens*u32 LE\n");
    manifest.push_str("version = 1\n");
    manifest.push_str(&format!("seed = {seed}\n"));
    manifest.push_str(&format!("count = {}\n", examples.len()));
    if let Some(first) = examples.first() {
        let dims: Vec<String> = first.image.shape.iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!("image_shape = {}\n", dims.join(",")));
    }
    manifest.push_str(&format!("classes = {}\n", class_names().join(",")));
    manifest.push_str(&format!("answers = {}\n", answer_inventory().join(",")));

    for (i, ex) in examples.iter().enumerate() {
        let name = format!("example_{i:05}.bin");
        let mut buf = Vec::new();
        buf.push(ex.image.shape.len() as u8);
        for &d in &ex.image.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in &ex.image.data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        buf.extend_from_slice(&(ex.caption_tokens.len() as u64).to_le_bytes());
        for &id in &ex.caption_tokens.ids {
            buf.extend_from_slice(&id.to_le_bytes());
        }
        let path = dir.join(&name);
        std::fs::write(&path, buf).map_err(|e| CliError::io(&path, e))?;
        manifest.push_str(&format!("record = {name} | {}\n", ex.caption));
    }
    let mpath = dir.join("manifest.txt");
    std::fs::write(&mpath, manifest).map_err(|e| CliError::io(&mpath, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use vlp_core::corpus::{build_vocab, generate_corpus, TaskMix};

    #[test]
    fn exports_manifest_and_records() {
        let vocab = build_vocab();
        let examples = generate_corpus(3, 4, TaskMix::default(), &vocab).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_corpus(dir.path(), 3, &examples).unwrap();
        let manifest = std::fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
        assert!(manifest.contains("count = 4"));
        assert!(manifest.contains("image_shape = 3,32,32"));
        let rec = std::fs::read(dir.path().join("example_00000.bin")).unwrap();
        assert_eq!(rec[0], 3);
        let expect = 1 + 3 * 8 + 3 * 32 * 32 * 4 + 8 + examples[0].caption_tokens.len() * 4;
        assert_eq!(rec.len(), expect);
    }
}
