use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use untied::harness::{
    emit_curves, emit_table, fetch_datasets, run_experiment, write_outputs, DatasetSpec, ExperimentConfig,
    RemoteDataset, ResultArchive, TableFormat,
};
use untied::training::Architecture;

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn small_ones() -> ExperimentConfig {
    ExperimentConfig::from_toml(
        r#"
        id = "tiny"
        architecture = "suc"
        dataset = { name = "ones", n = 200 }
        dims = [2, 5]
        batch_sizes = [16, 32]
        learning_rates = [0.1]
        pairings = ["log/d", "log/1", "step/dlog"]
        runs = 3
        epochs = 4
        "#,
    )
    .unwrap()
}

#[test]
fn shipped_experiment_configs_parse() {
    let mut seen = 0;
    for entry in fs::read_dir(workspace().join("experiments")).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_none_or(|e| e != "toml") {
            continue;
        }
        let cfg = ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert!(!cfg.cells().is_empty(), "{}", path.display());
        assert_eq!(cfg.id, path.file_stem().unwrap().to_str().unwrap());
        let expected_epochs = if cfg.architecture == Architecture::LeNet5 { 20 } else { 100 };
        assert_eq!(cfg.epochs(), expected_epochs, "{}", cfg.id);
        match &cfg.dataset {
            DatasetSpec::Ones { .. } => assert!(!cfg.dims.is_empty()),
            DatasetSpec::Digits { path } => assert!(cfg.base_dir.join(path).is_file(), "{}", cfg.id),
            DatasetSpec::Mnist { .. } | DatasetSpec::Fashion { .. } => assert!(cfg.dims.is_empty()),
        }
        seen += 1;
    }
    assert!(seen >= 10, "only {seen} configs found");
}

#[test]
fn outputs_round_trip_through_disk() {
    let cfg = small_ones();
    let archive = run_experiment(&cfg, 2).unwrap();
    assert_eq!(archive.cells.len(), 2 * 2 * 3);
    let dir = tempfile::tempdir().unwrap();
    let written = write_outputs(&archive, dir.path()).unwrap();
    assert_eq!(written.len(), 5);

    let loaded = ResultArchive::load(dir.path().join("archive.json")).unwrap();
    assert_eq!(loaded, archive);
    assert_eq!(loaded.to_json().unwrap(), fs::read_to_string(dir.path().join("archive.json")).unwrap());

    let timing: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("timing.json")).unwrap()).unwrap();
    assert!(timing.is_object());
}

#[test]
fn csv_table_carries_exact_means() {
    let archive = run_experiment(&small_ones(), 1).unwrap();
    let text = emit_table(&archive, TableFormat::Csv).unwrap();
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let headers = reader.headers().unwrap().clone();
    assert_eq!(headers.len(), 3 + 3 * 3);
    assert_eq!(&headers[0], "dim");
    let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 4);
    for row in &rows {
        for (p, pairing) in archive.config.pairings.iter().enumerate() {
            let id = format!("dim={},bs={},lr={},pair={pairing}", &row[0], &row[1], &row[2]);
            let cell = archive.cell(&id).unwrap();
            let mean: f64 = row[3 + 3 * p].parse().unwrap();
            let std: f64 = row[4 + 3 * p].parse().unwrap();
            let div: usize = row[5 + 3 * p].parse().unwrap();
            assert_eq!(mean, cell.mean);
            assert_eq!(std, cell.std);
            assert_eq!(div, cell.divergences);
        }
    }

    let md = emit_table(&archive, TableFormat::Markdown).unwrap();
    assert_eq!(md.lines().count(), 2 + rows.len());
    assert!(md.contains("**"));
}

#[test]
fn curves_have_one_row_per_run_and_epoch() {
    let cfg = small_ones();
    let archive = run_experiment(&cfg, 1).unwrap();
    let id = archive.cells[0].id.clone();
    let text = emit_curves(&archive, &id).unwrap();
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    assert_eq!(reader.headers().unwrap(), vec!["run", "epoch", "accuracy", "loss"]);
    let rows = reader.records().count();
    assert_eq!(rows, cfg.runs * cfg.epochs());
    assert!(emit_curves(&archive, "bs=1,lr=1,pair=log/d").is_err());
}

#[test]
fn single_cell_reruns_match_the_grid() {
    let cfg = small_ones();
    let full = run_experiment(&cfg, 3).unwrap();
    let mut one = cfg.clone();
    one.dims = vec![5];
    one.batch_sizes = vec![32];
    one.pairings = vec!["log/1".parse().unwrap()];
    let single = run_experiment(&one, 1).unwrap();
    let cell = &single.cells[0];
    assert_eq!(full.cell(&cell.id).unwrap(), cell);
}

#[test]
fn archive_with_unknown_schema_is_rejected() {
    let archive = run_experiment(&small_ones(), 1).unwrap();
    let text = archive.to_json().unwrap().replace("untied-archive/1", "untied-archive/0");
    assert!(ResultArchive::from_json(&text).is_err());
}

fn local_mnist() -> Option<PathBuf> {
    let dir = std::env::var_os("MNIST_DIR").map(PathBuf::from).unwrap_or_else(|| workspace().join("data/mnist"));
    RemoteDataset::Mnist.files().iter().all(|f| dir.join(f.name).is_file()).then_some(dir)
}

#[test]
fn fetch_from_directory_verifies_and_is_idempotent() {
    let Some(src) = local_mnist() else {
        eprintln!("skipping: MNIST files not present");
        return;
    };
    let dest = tempfile::tempdir().unwrap();
    let paths = fetch_datasets(RemoteDataset::Mnist, dest.path(), Some(&src)).unwrap();
    assert_eq!(paths.len(), 4);
    for p in &paths {
        let name = p.file_name().unwrap();
        assert_eq!(fs::read(p).unwrap(), fs::read(src.join(name)).unwrap());
    }

    // Valid files stay untouched even when the source disappears.
    let empty = tempfile::tempdir().unwrap();
    let before: Vec<_> = paths.iter().map(|p| fs::metadata(p).unwrap().modified().unwrap()).collect();
    fetch_datasets(RemoteDataset::Mnist, dest.path(), Some(empty.path())).unwrap();
    let after: Vec<_> = paths.iter().map(|p| fs::metadata(p).unwrap().modified().unwrap()).collect();
    assert_eq!(before, after);

    // A corrupted file is replaced from a gzipped source.
    let labels = &RemoteDataset::Mnist.files()[1];
    let target = dest.path().join(labels.name);
    fs::write(&target, b"garbage").unwrap();
    let gz_src = tempfile::tempdir().unwrap();
    for f in RemoteDataset::Mnist.files() {
        let raw = fs::read(src.join(f.name)).unwrap();
        let out = fs::File::create(gz_src.path().join(format!("{}.gz", f.name))).unwrap();
        let mut enc = flate2::write::GzEncoder::new(out, flate2::Compression::fast());
        enc.write_all(&raw).unwrap();
        enc.finish().unwrap();
    }
    fetch_datasets(RemoteDataset::Mnist, dest.path(), Some(gz_src.path())).unwrap();
    assert_eq!(fs::read(&target).unwrap(), fs::read(src.join(labels.name)).unwrap());
}

#[test]
fn fetch_rejects_bad_payloads_without_writing() {
    let src = tempfile::tempdir().unwrap();
    for f in RemoteDataset::Mnist.files() {
        fs::write(src.path().join(f.name), vec![0u8; f.size as usize]).unwrap();
    }
    let dest = tempfile::tempdir().unwrap();
    let err = fetch_datasets(RemoteDataset::Mnist, dest.path(), Some(src.path())).unwrap_err();
    assert!(err.to_string().contains("sha256"), "{err}");
    assert_eq!(fs::read_dir(dest.path()).unwrap().count(), 0);

    let missing = tempfile::tempdir().unwrap();
    assert!(fetch_datasets(RemoteDataset::Fashion, dest.path(), Some(missing.path())).is_err());
}
