use lnca_core::ae::{AeConfig, Autoencoder};
use lnca_core::checkpoint;
use lnca_core::corrupt::{corrupt, CorruptionSpec};
use lnca_core::dataset::Dataset;
use lnca_core::metrics::{ssim, SsimConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let ckpt = args.get(1).map(|s| s.as_str()).unwrap_or("/tmp/toy/run5/ae.ckpt");
    let skip_ch: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(8);
    let ds = Dataset::toy(16, 32, 32, 42).unwrap();
    let cfg = AeConfig { height: 32, width: 32, channels: 3, downsample_stages: 2, base_filters: 16, latent_channels: 16, skip_channels: skip_ch };
    let mut ae: Autoencoder<f32> = Autoencoder::new(cfg, 42).unwrap();
    checkpoint::load_section(std::path::Path::new(ckpt), "ae", &mut ae).unwrap();
    let sc = SsimConfig::default();
    for (name, idx) in [("train", ds.train.clone()), ("heldout", ds.test.clone())] {
        let clean = ds.images.select(&idx);
        let corrupted = corrupt(&clean, &CorruptionSpec::noise(0.1, 7)).unwrap();
        let bypass_clean = ae.forward_bypass(&clean).unwrap();
        let enc_clean = ae.encode(&clean).unwrap();
        let enc_corr = ae.encode(&corrupted).unwrap();
        let swapped = ae.decode(&enc_clean.latent, &enc_corr.skip).unwrap();
        println!("[{name}] bypass(clean) {:.4} | ceiling D(y_hat, skip_corr) {:.4} | corrupt {:.4}",
            ssim(&bypass_clean, &clean, &sc).unwrap().1,
            ssim(&swapped, &clean, &sc).unwrap().1,
            ssim(&corrupted, &clean, &sc).unwrap().1);
    }
}
