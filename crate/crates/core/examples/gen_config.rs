fn main() {
    let cfg = ttslab_core::config::desk_experiment(std::path::PathBuf::from("/tmp/ttslab_smoke"));
    cfg.save(std::path::Path::new("/tmp/desk.toml")).unwrap();
    println!("{}", std::fs::read_to_string("/tmp/desk.toml").unwrap());
}
