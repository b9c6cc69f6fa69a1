//! The checked-in mock suite must match the generator.
//! Set `DNR_REGEN_FIXTURES=1` to rewrite it.

use std::path::PathBuf;

use dnr_core::fixtures::{mock_suite, suite_config, write_mock_suite};
use dnr_core::DnRConfig;

fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

#[test]
fn mock_suite_files_match_generator() {
    let scenes = fixture_dir().join("mock_suite");
    let config = fixture_dir().join("mock_suite.toml");
    if std::env::var_os("DNR_REGEN_FIXTURES").is_some() {
        write_mock_suite(&scenes).unwrap();
        std::fs::write(&config, suite_config().to_toml()).unwrap();
    }
    let suite = mock_suite();
    let mut on_disk: Vec<_> = std::fs::read_dir(&scenes)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    on_disk.sort();
    assert_eq!(on_disk.len(), suite.len(), "stale files in {}", scenes.display());
    for s in &suite {
        let p = scenes.join(format!("{}.toml", s.id));
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text, s.to_toml(), "{} is out of date", p.display());
    }
    let cfg = DnRConfig::from_toml(&std::fs::read_to_string(&config).unwrap()).unwrap();
    assert_eq!(cfg, suite_config());
}
