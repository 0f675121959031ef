//! Tour of the evaluation toolkit: Fréchet distance, desk-FID, PSNR, SSIM,
//! classifier metrics, and the metric-row file formats.
//!
//! Everything here is closed-form or tiny, so the example doubles as a
//! numeric sanity sheet: identical Gaussians score 0, N(0,1) vs N(1,1)
//! scores 1, and a perfect ranking scores AUC 1.
//!
//! ```bash
//! cargo run --release --example evaluate_metrics
//! ```

use ndarray::{arr1, arr2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use srdiff::data::gen_toy_faces;
use srdiff::highlighter::classifier_metrics;
use srdiff::metrics::{
    desk_fid, frechet_distance, psnr, ssim, MetricRow, PcaEmbedder, IMAGE_RANGE,
    METRIC_CSV_HEADER,
};

fn main() -> srdiff::Result<()> {
    let out_dir = std::path::Path::new("examples-out/evaluate_metrics");
    std::fs::create_dir_all(out_dir)?;

    // Fréchet distance between Gaussian moments. A distribution vs itself is
    // 0; in one dimension the distance is (mu1-mu2)^2 + (s1-s2)^2.
    let mu = arr1(&[0.3, -1.2]);
    let cov = arr2(&[[2.0, 0.4], [0.4, 1.0]]);
    println!("frechet(self, self)        = {:.2e}", frechet_distance(&mu, &cov, &mu, &cov)?);
    let (m0, m1) = (arr1(&[0.0]), arr1(&[1.0]));
    let (v1, v4) = (arr2(&[[1.0]]), arr2(&[[4.0]]));
    println!("frechet(N(0,1), N(1,1))    = {:.6}", frechet_distance(&m0, &v1, &m1, &v1)?);
    println!("frechet(N(0,1), N(0,4))    = {:.6}", frechet_distance(&m0, &v1, &m0, &v4)?);

    // desk-FID: Fréchet distance in a PCA feature space fit on the real set.
    let real = gen_toy_faces(48, 16, 0)?;
    let same = gen_toy_faces(48, 16, 0)?;
    let shifted = gen_toy_faces(48, 16, 1)? * 0.5f32;
    let embedder = PcaEmbedder::fit(&real, 8)?;
    println!("desk-fid(real, real)       = {:.2e}", desk_fid(&real, &same, &embedder)?);
    println!("desk-fid(real, dimmed)     = {:.4}", desk_fid(&real, &shifted, &embedder)?);

    // Pixel metrics on a clean/noisy pair.
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let noise = Normal::new(0.0f32, 0.05).expect("valid sigma");
    let clean = real.index_axis(ndarray::Axis(0), 0).to_owned();
    let noisy = clean.mapv(|v| (v + noise.sample(&mut rng)).clamp(-1.0, 1.0));
    println!("psnr(img, img)             = {:?} dB", psnr(&clean, &clean, IMAGE_RANGE)?);
    println!("psnr(img, img + noise)     = {:.2} dB", psnr(&clean, &noisy, IMAGE_RANGE)?);
    println!("ssim(img, img)             = {:.4}", ssim(clean.view(), clean.view())?);
    println!("ssim(img, img + noise)     = {:.4}", ssim(clean.view(), noisy.view())?);

    // Classifier metrics with a tie: AUC counts half-ordered pairs.
    let labels = [false, false, true, true, true];
    let scores = [0.1, 0.4, 0.4, 0.8, 0.9];
    let m = classifier_metrics(&labels, &scores)?;
    println!(
        "accuracy {:.3}, f1 {:.3}, roc-auc {:.4}",
        m.accuracy,
        m.f1,
        m.roc_auc.expect("both classes present")
    );

    // Metric rows serialize to one CSV table and one JSONL stream.
    let rows = vec![
        MetricRow { metric: "desk-fid".into(), split: "eval".into(), value: 0.25, seed: 2 },
        MetricRow { metric: "psnr".into(), split: "eval".into(), value: 31.7, seed: 2 },
    ];
    let mut csv = String::from(METRIC_CSV_HEADER);
    csv.push('\n');
    let mut jsonl = String::new();
    for r in &rows {
        csv.push_str(&r.to_csv_row());
        csv.push('\n');
        jsonl.push_str(&r.to_json_line());
        jsonl.push('\n');
    }
    std::fs::write(out_dir.join("metrics.csv"), &csv)?;
    std::fs::write(out_dir.join("metrics.jsonl"), &jsonl)?;
    print!("metrics.csv:\n{csv}");
    println!("artifacts in {}", out_dir.display());
    Ok(())
}
