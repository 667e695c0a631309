//! Self-contained demo workspace built from the synthetic shape model.

use std::fs;
use std::path::Path;

use anyhow::Context;
use dissect_core::corpus::{GrayImage, ReferenceCorpus, MANIFEST_FILE};
use dissect_core::index::{build_index, save_index, IndexConfig};
use dissect_core::model::save_weights;
use dissect_core::synthetic::{background, reference_corpus, render, shape_model, Shape};

use crate::session::SessionPaths;

/// Patch edge the demo model is built for.
pub const DEMO_PATCH: usize = 32;

/// Browsable demo images: 64×64, so each splits into four patches.
pub fn demo_images() -> Vec<(&'static str, GrayImage)> {
    let mut plain = background(3, 64, 64);
    Shape::Square { x: 40, y: 8, side: 14 }.draw(&mut plain);
    vec![
        (
            "case-1",
            render(
                64,
                64,
                &[
                    Shape::Square { x: 8, y: 8, side: 12 },
                    Shape::Disc { cx: 48, cy: 48, r: 7 },
                ],
            ),
        ),
        ("case-2", render(64, 64, &[Shape::Disc { cx: 16, cy: 44, r: 8 }])),
        ("case-3", plain),
    ]
}

fn write_images(dir: &Path, images: &[(impl AsRef<str>, GrayImage)]) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut manifest = String::new();
    for (id, img) in images {
        let id = id.as_ref();
        let file = format!("{id}.png");
        fs::write(dir.join(&file), img.encode_png8())?;
        manifest.push_str(&format!("{id}\t{file}\n"));
    }
    fs::write(dir.join(MANIFEST_FILE), manifest)?;
    Ok(())
}

/// Writes model weights, the reference corpus, an exhaustive index and the
/// demo images under `dir`. Returns the paths a session opens from; the
/// label log is not created until the first write.
pub fn write_demo(dir: &Path) -> anyhow::Result<SessionPaths> {
    let paths = SessionPaths {
        model: dir.join("model.nscw"),
        index: dir.join("index.nsci"),
        corpus: dir.join("images"),
        reference: dir.join("reference"),
        labels: dir.join("labels.jsonl"),
    };
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let model = shape_model(DEMO_PATCH);
    save_weights(&model, &paths.model)?;
    write_images(&paths.reference, &reference_corpus())?;
    write_images(&paths.corpus, &demo_images())?;
    let reference = ReferenceCorpus::open(&paths.reference)?;
    let index = build_index(&model, &reference, IndexConfig::exhaustive(0.99))?;
    save_index(&index, &paths.index)?;
    Ok(paths)
}
