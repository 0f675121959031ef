//! Train a flaw highlighter and localize planted artifacts with flaw
//! activation maps.
//!
//! "Fake" images here are toy faces with a speckle artifact planted in the
//! top-left quadrant. After training the real-vs-fake classifier, Grad-CAM
//! with respect to the fake logit should light up that quadrant — and because
//! the network ends in global average pooling plus a linear head, vanilla CAM
//! and Grad-CAM agree to numerical precision.
//!
//! ```bash
//! cargo run --release --example flaw_maps
//! ```

use ndarray::{Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srdiff::data::gen_toy_faces;
use srdiff::fam::Fam;
use srdiff::highlighter::{
    classifier_metrics, train_highlighter, HighlighterConfig, CLASS_FAKE,
};
use srdiff::imageio::save_image;
use srdiff::render::{cell_report, overlay, render_heatmap, top_cells};

/// Plant a speckle artifact in the top-left quadrant of every image.
fn plant_artifacts(images: &Array4<f32>, rng: &mut impl Rng) -> Array4<f32> {
    let mut out = images.clone();
    let (_, c, h, w) = out.dim();
    for mut img in out.axis_iter_mut(Axis(0)) {
        for ch in 0..c {
            for y in 0..h / 2 {
                for x in 0..w / 2 {
                    if rng.gen::<f32>() < 0.5 {
                        img[[ch, y, x]] = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                    }
                }
            }
        }
    }
    out
}

fn main() -> srdiff::Result<()> {
    let out_dir = std::path::Path::new("examples-out/flaw_maps");
    std::fs::create_dir_all(out_dir)?;

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let real = gen_toy_faces(96, 16, 5)?;
    let fake = plant_artifacts(&real, &mut rng);

    let cfg = HighlighterConfig {
        stage_channels: vec![8, 16],
        epochs: 12,
        ..HighlighterConfig::default()
    };
    println!("training highlighter: {} real vs {} fake", real.dim().0, fake.dim().0);
    let (hl, holdout_acc) = train_highlighter::<f32, _>(&real, &fake, &cfg, &mut rng)?;
    println!("holdout accuracy: {holdout_acc:.3}");

    // Score a fresh set the model never saw.
    let real_test = gen_toy_faces(24, 16, 77)?;
    let fake_test = plant_artifacts(&real_test, &mut rng);
    let mut labels = vec![false; 24];
    labels.extend(vec![true; 24]);
    let mut scores = hl.scores(&real_test)?;
    scores.extend(hl.scores(&fake_test)?);
    let m = classifier_metrics(&labels, &scores)?;
    println!(
        "test accuracy {:.3}, f1 {:.3}, roc-auc {:?}",
        m.accuracy, m.f1, m.roc_auc
    );

    // Flaw maps for the first few test fakes.
    let mut hits = 0;
    for i in 0..4 {
        let img = fake_test.index_axis(Axis(0), i);
        let fam = hl.grad_cam(img, CLASS_FAKE)?;

        // GAP + linear head makes Grad-CAM collapse to vanilla CAM.
        let cam = hl.cam(img, CLASS_FAKE)?;
        let diff = fam
            .data()
            .iter()
            .zip(cam.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        println!("image {i}: max |grad-cam - cam| = {diff:.2e}");

        let cells = top_cells(&fam, 2, 4)?;
        if cells[0].row == 0 && cells[0].col == 0 {
            hits += 1;
        }
        std::fs::write(out_dir.join(format!("cells_{i}.csv")), cell_report(&cells))?;
        fam.save(&out_dir.join(format!("fam_{i}.fam")), false)?;
        save_image(&out_dir.join(format!("heat_{i}.ppm")), &render_heatmap(&fam))?;
        save_image(
            &out_dir.join(format!("overlay_{i}.ppm")),
            &overlay(&img.to_owned(), &fam)?,
        )?;
    }
    println!("top cell in the planted quadrant for {hits}/4 fakes");

    // Round-trip one map through its file format.
    let (reload, binary) = Fam::load(&out_dir.join("fam_0.fam"))?;
    assert_eq!((reload.height(), reload.width(), binary), (16, 16, false));
    println!("artifacts in {}", out_dir.display());
    Ok(())
}
