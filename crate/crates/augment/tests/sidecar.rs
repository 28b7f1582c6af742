use std::collections::HashSet;
use std::fs;
use std::path::Path;

use augment::*;
use maskgst::data::{attach_augmentations, generate_synthetic, load_sidecar, Dataset, SyntheticConfig};

fn data(n: usize) -> Dataset {
    generate_synthetic(&SyntheticConfig {
        train_stories: n,
        val_stories: 0,
        test_stories: 0,
        image_size: 16,
        ..Default::default()
    })
    .unwrap()
}

/// Canned replies for every story, wrapped in chat-style prose.
fn write_fixtures(dir: &Path, ds: &Dataset) {
    for s in &ds.train {
        let p = build_prompt(&s.captions, &ds.characters).unwrap();
        let reply = TemplateBackend.complete(&s.story_id, &p, false).unwrap();
        fs::write(dir.join(format!("{}.txt", s.story_id)), format!("Of course! Here they are:\n\n{reply}\n\nHope this helps.")).unwrap();
    }
}

fn keys(path: &Path) -> Vec<(String, usize)> {
    let mut k: Vec<_> = load_sidecar(path).unwrap().into_iter().map(|r| (r.story_id, r.frame_index)).collect();
    k.sort();
    k
}

#[test]
fn fixture_run_is_complete_and_duplicate_free() {
    let ds = data(12);
    let dir = tempfile::tempdir().unwrap();
    write_fixtures(dir.path(), &ds);
    let out = dir.path().join("aug.jsonl");
    let report = run_augmentation(&ds.train, &ds.characters, &FixtureBackend::new(dir.path()), &out, RunOptions::default()).unwrap();
    assert_eq!((report.augmented, report.skipped, report.coverage()), (12, 0, 1.0));
    assert_eq!(keys(&out).len(), 12 * 5);

    let again = run_augmentation(&ds.train, &ds.characters, &FixtureBackend::new(dir.path()), &out, RunOptions::default()).unwrap();
    assert_eq!((again.augmented, again.skipped), (0, 12));
    assert_eq!(keys(&out).len(), 60);

    let mut stories = ds.train.clone();
    attach_augmentations(&mut stories, &load_sidecar(&out).unwrap());
    assert!(stories.iter().all(|s| s.aug_captions.is_some()));
}

#[test]
fn interrupted_run_resumes_without_duplicates() {
    let ds = data(6);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("aug.jsonl");
    run_augmentation(&ds.train[..3], &ds.characters, &TemplateBackend, &out, RunOptions::default()).unwrap();
    // a story cut off after two frames, then a torn line
    let full = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = full.lines().collect();
    let mut text = lines[..12].join("\n");
    text.push('\n');
    text.push_str(&lines[12][..10]);
    fs::write(&out, text).unwrap();

    let report = run_augmentation(&ds.train, &ds.characters, &TemplateBackend, &out, RunOptions { concurrency: 3, resume: true }).unwrap();
    assert_eq!((report.skipped, report.augmented), (2, 4));
    let k = keys(&out);
    assert_eq!(k.len(), 30);
    assert_eq!(k.iter().collect::<HashSet<_>>().len(), 30);
}

#[test]
fn failed_stories_are_skipped_not_fatal() {
    let ds = data(5);
    let dir = tempfile::tempdir().unwrap();
    write_fixtures(dir.path(), &ds);
    let broken = &ds.train[1].story_id;
    fs::write(dir.path().join(format!("{broken}.txt")), "I cannot help with that.").unwrap();
    fs::remove_file(dir.path().join(format!("{}.txt", ds.train[3].story_id))).unwrap();
    let out = dir.path().join("aug.jsonl");
    let report = run_augmentation(&ds.train, &ds.characters, &FixtureBackend::new(dir.path()), &out, RunOptions { concurrency: 2, resume: false }).unwrap();
    assert_eq!(report.augmented, 3);
    assert_eq!(report.failed, vec![ds.train[1].story_id.clone(), ds.train[3].story_id.clone()]);
    assert!((report.coverage() - 0.6).abs() < 1e-12);
    assert!(report.to_string().contains("60.0%"));

    // a corrective fixture rescues the broken story on the next run
    let good = TemplateBackend
        .complete(broken, &build_prompt(&ds.train[1].captions, &ds.characters).unwrap(), false)
        .unwrap();
    fs::write(dir.path().join(format!("{broken}.retry.txt")), good).unwrap();
    let report = run_augmentation(&ds.train, &ds.characters, &FixtureBackend::new(dir.path()), &out, RunOptions::default()).unwrap();
    assert_eq!((report.skipped, report.augmented, report.failed.len()), (3, 1, 1));
}

#[test]
fn concurrency_does_not_change_content() {
    let ds = data(10);
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    run_augmentation(&ds.train, &ds.characters, &TemplateBackend, &a, RunOptions { concurrency: 1, resume: false }).unwrap();
    run_augmentation(&ds.train, &ds.characters, &TemplateBackend, &b, RunOptions { concurrency: 4, resume: false }).unwrap();
    let sorted = |p: &Path| {
        let mut v = load_sidecar(p).unwrap();
        v.sort_by(|x, y| (&x.story_id, x.frame_index).cmp(&(&y.story_id, y.frame_index)));
        v
    };
    assert_eq!(sorted(&a), sorted(&b));
}

#[test]
fn unwritable_path_is_an_error() {
    let ds = data(1);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("missing-dir").join("aug.jsonl");
    assert!(matches!(
        run_augmentation(&ds.train, &ds.characters, &TemplateBackend, &out, RunOptions::default()),
        Err(AugmentError::Io { .. })
    ));
}
