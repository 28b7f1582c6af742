use maskgst::data::{generate_synthetic, Image, SyntheticConfig};
use maskgst::vq::{moving_average, train_tokenizer, ImageBatch, VqConfig, VqTokenizer, VqTrainConfig};

#[test]
fn tokenizer_reaches_reconstruction_and_usage_targets() {
    let ds = generate_synthetic(&SyntheticConfig {
        train_stories: 200,
        val_stories: 0,
        test_stories: 0,
        ..Default::default()
    })
    .unwrap();
    let frames: Vec<Image> = ds.train.iter().flat_map(|s| s.images.clone()).collect();
    assert_eq!(frames.len(), 1000);
    let mut tok = VqTokenizer::<f32>::new(VqConfig::default(), 11).unwrap();
    let stats = train_tokenizer(&mut tok, &frames, &VqTrainConfig::default()).unwrap();

    let batch = ImageBatch::<f32>::from_images(&frames).unwrap();
    let grids = tok.encode(&batch).unwrap();
    let recon = tok.decode(&grids).unwrap();
    let mse = recon.mse(&batch);
    assert!(mse < 0.01, "reconstruction mse {mse}");

    let usage = tok.usage(&batch).unwrap();
    let used = usage.iter().filter(|&&c| c > 0).count();
    assert!(used * 2 > usage.len(), "{used} of {} codes used", usage.len());

    let again = tok.encode(&recon).unwrap();
    let cells = grids.iter().map(|g| g.len()).sum::<usize>();
    let same: usize = grids
        .iter()
        .zip(&again)
        .map(|(a, b)| a.indices().iter().zip(b.indices()).filter(|(x, y)| x == y).count())
        .sum();
    assert!(same as f64 >= 0.95 * cells as f64, "{same}/{cells} cells stable");

    let ma = moving_average(&stats.iter().map(|s| s.recon_mse).collect::<Vec<_>>(), 10);
    for w in ma.windows(2) {
        assert!(w[1] <= w[0], "moving average rose: {ma:?}");
    }
}
