use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use fusegraph::answer::{load_checkpoint, save_checkpoint, Model, ModelConfig};
use fusegraph::builder::BuildReport;
use fusegraph::graph::GraphFile;
use fusegraph::harness::commands::{cmd_build_graph, cmd_synth_gen, cmd_train, GradCheckConfig};
use fusegraph::harness::config::RUN_CONFIG_FILE;
use fusegraph::harness::io::{load_examples, read_json, save_examples, write_json};
use fusegraph::harness::{RunConfig, SignalMode, SyntheticSpec};
use fusegraph::knowledge::{FileFeatures, RegionStore, TripleStore};

fn json_twice<T: Serialize + DeserializeOwned>(dir: &Path, src: &Path) {
    let v: T = read_json(src).unwrap();
    let a = dir.join("a.json");
    write_json(&a, &v).unwrap();
    let w: T = read_json(&a).unwrap();
    let b = dir.join("b.json");
    write_json(&b, &w).unwrap();
    assert_eq!(
        fs::read(&a).unwrap(),
        fs::read(&b).unwrap(),
        "{}",
        src.display()
    );
}

fn dataset(dir: &Path) -> RunConfig {
    let spec = SyntheticSpec {
        n_examples: 5,
        n_test: 2,
        mode: SignalMode::CrossModal,
        rationales: true,
        ..SyntheticSpec::default()
    };
    cmd_synth_gen(&spec, dir).unwrap();
    read_json(&dir.join(RUN_CONFIG_FILE)).unwrap()
}

#[test]
fn dataset_files_roundtrip_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let run = dataset(dir.path());
    let scratch = tempfile::tempdir().unwrap();
    let s = scratch.path();

    let triples = TripleStore::load(&run.paths.triples).unwrap();
    triples.save(&s.join("t.tsv")).unwrap();
    assert_eq!(
        fs::read(&run.paths.triples).unwrap(),
        fs::read(s.join("t.tsv")).unwrap()
    );

    let regions = RegionStore::load(&run.paths.regions).unwrap();
    regions.save(&s.join("r.json")).unwrap();
    assert_eq!(
        fs::read(&run.paths.regions).unwrap(),
        fs::read(s.join("r.json")).unwrap()
    );

    let features = FileFeatures::load(&run.paths.features).unwrap();
    features.save(&s.join("f.bin")).unwrap();
    assert_eq!(
        fs::read(&run.paths.features).unwrap(),
        fs::read(s.join("f.bin")).unwrap()
    );

    for p in [
        &run.paths.examples,
        run.paths.eval_examples.as_ref().unwrap(),
    ] {
        let ex = load_examples(p).unwrap();
        save_examples(&s.join("e.jsonl"), &ex).unwrap();
        assert_eq!(fs::read(p).unwrap(), fs::read(s.join("e.jsonl")).unwrap());
    }

    json_twice::<RunConfig>(s, &dir.path().join(RUN_CONFIG_FILE));
    json_twice::<SyntheticSpec>(s, &dir.path().join("synthetic_spec.json"));
}

#[test]
fn command_outputs_roundtrip_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let mut run = dataset(dir.path());
    run.epochs = 2;
    run.warmup = 1;
    run.model.gnn.layers = 1;
    let out = cmd_build_graph(&run, "ex1").unwrap();
    let scratch = tempfile::tempdir().unwrap();
    for g in &out.graphs {
        json_twice::<GraphFile>(scratch.path(), g);
        let file: GraphFile = read_json(g).unwrap();
        let p = scratch.path().join("g.json");
        fs::write(&p, serde_json::to_string_pretty(&file).unwrap() + "\n").unwrap();
        assert_eq!(fs::read(g).unwrap(), fs::read(&p).unwrap());
    }
    json_twice::<Vec<BuildReport>>(scratch.path(), &out.report);

    let trained = cmd_train(&run).unwrap();
    let ck = load_checkpoint::<f64>(&trained.checkpoint).unwrap();
    let again = scratch.path().join("ck");
    save_checkpoint(&again, &ck.model.config, &ck.params, ck.optimizer.as_ref()).unwrap();
    for entry in fs::read_dir(&trained.checkpoint).unwrap() {
        let p = entry.unwrap().path();
        let name = p.file_name().unwrap();
        assert_eq!(
            fs::read(&p).unwrap(),
            fs::read(again.join(name)).unwrap(),
            "{name:?}"
        );
    }
    json_twice::<RunConfig>(scratch.path(), &run.paths.output.join(RUN_CONFIG_FILE));
}

#[test]
fn configs_roundtrip_through_json() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("gc.json");
    write_json(&p, &GradCheckConfig::default()).unwrap();
    json_twice::<GradCheckConfig>(dir.path(), &p);
    assert_eq!(
        read_json::<GradCheckConfig>(&p).unwrap(),
        GradCheckConfig::default()
    );

    let cfg = ModelConfig::default();
    let (_, params) = Model::init::<f64>(cfg.clone(), 5).unwrap();
    let ck = dir.path().join("ck");
    save_checkpoint(&ck, &cfg, &params, None).unwrap();
    let back = load_checkpoint::<f64>(&ck).unwrap();
    assert_eq!(back.params, params);
    assert_eq!(back.model.config, cfg);
    assert!(back.optimizer.is_none());
}
