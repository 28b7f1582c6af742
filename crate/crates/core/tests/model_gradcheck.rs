use std::time::Instant;

use maskgst::model::ModelConfig;
use maskgst::training::model_gradcheck;

#[test]
fn full_model_matches_finite_differences() {
    let cfg = ModelConfig {
        text_vocab: 64,
        ..ModelConfig::default()
    };
    assert_eq!((cfg.d, cfg.seq_len, cfg.caption_len, cfg.n_chars), (64, 64, 32, 9));
    let start = Instant::now();
    let report = model_gradcheck(cfg, 200, 3).unwrap();
    let secs = start.elapsed().as_secs_f64();
    assert_eq!(report.probes, 200);
    assert!(report.max_rel_err < 1e-4, "{report:?}");
    assert!(secs < 300.0, "took {secs:.1}s");
}
