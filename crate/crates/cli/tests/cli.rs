use std::fs;
use std::process::Command;

use maskgst::data::{read_png, Image};
use maskgst_cli::{render_frame_grid, GAP, SCALE};

fn frames(n: usize, shade: u8) -> Vec<Image> {
    (0..n).map(|i| Image::filled(8, [shade, 10 * i as u8, 0])).collect()
}

fn caps(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("caption {i}")).collect()
}

/// Width and height of a PNG from its header.
fn png_dims(bytes: &[u8]) -> (u32, u32) {
    let be = |o: usize| u32::from_be_bytes(bytes[o..o + 4].try_into().unwrap());
    (be(16), be(20))
}

#[test]
fn one_story_is_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("grid.png");
    let txt = render_frame_grid(&[frames(5, 200)], &[caps(5)], &out).unwrap();
    let cell = 8 * SCALE;
    assert_eq!(png_dims(&fs::read(&out).unwrap()), ((5 * cell + 6 * GAP) as u32, (cell + 2 * GAP) as u32));
    let text = fs::read_to_string(txt).unwrap();
    assert_eq!(text.lines().count(), 6);
    assert!(text.contains("  5. caption 4"));
}

#[test]
fn two_stories_are_two_rows_with_frames_in_place() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("grid.png");
    let stories = [frames(5, 50), frames(5, 150)];
    render_frame_grid(&stories, &[caps(5), caps(5)], &out).unwrap();
    let cell = 8 * SCALE;
    let (w, h) = png_dims(&fs::read(&out).unwrap());
    assert_eq!((w, h), ((5 * cell + 6 * GAP) as u32, (2 * cell + 3 * GAP) as u32));

    let a = dir.path().join("a.png");
    render_frame_grid(&stories, &[caps(5), caps(5)], &a).unwrap();
    assert_eq!(fs::read(&out).unwrap(), fs::read(&a).unwrap());
}

#[test]
fn frame_pixels_land_in_their_cells() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("grid.png");
    // square layout so the square-image reader can load it back
    let f = |c: u8| Image::filled(4, [c, c, c]);
    let stories = vec![vec![f(10), f(20)], vec![f(30), f(40)]];
    let captions = vec![caps(2), caps(2)];
    render_frame_grid(&stories, &captions, &out).unwrap();
    let img = read_png(&out).unwrap();
    let cell = 4 * SCALE;
    let at = |row: usize, col: usize| img.pixel(GAP + row * (cell + GAP) + cell / 2, GAP + col * (cell + GAP) + cell / 2);
    assert_eq!([at(0, 0), at(0, 1), at(1, 0), at(1, 1)], [[10; 3], [20; 3], [30; 3], [40; 3]]);
    assert_eq!(img.pixel(0, 0), [255; 3]);
}

#[test]
fn mismatched_captions_and_unwritable_paths_fail() {
    let dir = tempfile::tempdir().unwrap();
    assert!(render_frame_grid(&[frames(2, 0)], &[caps(3)], &dir.path().join("g.png")).is_err());
    assert!(render_frame_grid(&[frames(2, 0)], &[caps(2)], &dir.path().join("no/such/g.png")).is_err());
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_maskgst"))
}

#[test]
fn usage_errors_exit_with_two() {
    let out = bin().output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(bin().arg("--no-such-flag").output().unwrap().status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let bad = bin().args(["synth-data", "--set", "train.epochs=many", "--out"]).arg(dir.path()).output().unwrap();
    assert_eq!(bad.status.code(), Some(2));
    assert_eq!(String::from_utf8_lossy(&bad.stderr).lines().count(), 1);
}

#[test]
fn runtime_failures_exit_with_one_line_cause() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin().arg("generate").arg("--out").arg(dir.path()).env("RUST_LOG", "off").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.contains("run `train-"), "{err}");
}

#[test]
fn augment_without_key_fails_before_network() {
    let dir = tempfile::tempdir().unwrap();
    let small = ["--set", "data.train_stories=3", "--set", "data.val_stories=1", "--set", "data.test_stories=1"];
    let ok = bin().arg("synth-data").args(small).arg("--out").arg(dir.path()).output().unwrap();
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    assert!(dir.path().join("resolved-config.toml").exists());
    let out = bin()
        .args(["augment", "--endpoint", "http://127.0.0.1:9", "--api-key-env", "MASKGST_TEST_UNSET_KEY"])
        .args(small)
        .arg("--out")
        .arg(dir.path())
        .env_remove("MASKGST_TEST_UNSET_KEY")
        .env("RUST_LOG", "off")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("MASKGST_TEST_UNSET_KEY"));

    let t = bin().args(["augment", "--backend", "template"]).args(small).arg("--out").arg(dir.path()).output().unwrap();
    assert_eq!(t.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&t.stdout).contains("100.0% covered"));
    let manifest = fs::read_to_string(dir.path().join("data/train.jsonl")).unwrap();
    assert!(manifest.lines().next().unwrap().contains("aug.jsonl"));
}
