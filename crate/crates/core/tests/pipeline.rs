use std::fs;
use std::path::Path;

use fiber_core::checkpoint::{file_hash, Checkpoint, CheckpointStage, MAGIC};
use fiber_core::data::{generate_dataset, write_dataset, PixelEncoding};
use fiber_core::pipeline::*;
use fiber_core::{Config, Error, Stage, Task};
use tempfile::TempDir;

const SMALL: &str = "arch = compact\ndata.count = 16\nbatch_size = 4\nwarmup_steps = 2\nlog_every = 1\neval.mlm_probe = 8\neval.itc_probe = 8\nsteps = 3\n";

fn cfg(extra: &str) -> Config {
    Config::parse(&format!("{SMALL}{extra}")).unwrap()
}

fn coarse(dir: &Path, extra: &str) -> RunOutput {
    run_pretrain_coarse(&cfg(extra), &dir.join("coarse")).unwrap()
}

// Configuration

#[test]
fn config_text_round_trips() {
    for text in ["", SMALL, "arch = compact\nstrategy = merged_attention\nimage.depths = 2,2,4\nfused_layers = 2\ngrad_clip = none\ntask = caption\ncaption.variant = ladder\n"] {
        let c = Config::parse(text).unwrap();
        assert_eq!(Config::parse(&c.to_text()).unwrap(), c, "{text}");
    }
}

#[test]
fn config_comments_presets_and_overrides() {
    let c = Config::parse("# a comment\n\narch = compact\ntext.width = 48\nmlm = off\n").unwrap();
    assert_eq!(c.arch_preset, "compact");
    assert_eq!(c.arch.text.width, 48);
    assert!(!c.objectives.mlm);
    assert_eq!(c.stage, Stage::Coarse);
}

#[test]
fn config_errors_are_reported() {
    for bad in [
        "bogus = 1\n",
        "steps = many\n",
        "no equals sign\n",
        "arch = huge\n",
        "mlm = maybe\n",
        "mlm = false\nitm = false\nitm_hard = false\nitc = false\n",
        "batch_size = 1\n",
        "caption.beam = 0\n",
        "detect.nms_iou = 2\n",
        "strategy = late_fusion\n",
        "stage = medium\n",
        "task = vqa_generation\n",
    ] {
        assert!(matches!(Config::parse(bad), Err(Error::Config(_))), "{bad}");
    }
}

// Checkpoints

#[test]
fn checkpoint_round_trips_and_hashes_its_bytes() {
    let dir = TempDir::new().unwrap();
    let out = coarse(dir.path(), "");
    let bytes = fs::read(&out.checkpoint_path).unwrap();
    assert_eq!(&bytes[..8], MAGIC);
    assert_eq!(file_hash(&out.checkpoint_path).unwrap(), out.checkpoint_hash);
    let back = Checkpoint::load(&out.checkpoint_path).unwrap();
    assert_eq!(back, out.checkpoint);
    assert_eq!(back.to_bytes().unwrap(), bytes);
    assert_eq!(back.stage, CheckpointStage::Pretrain(Stage::Coarse));
    assert_eq!(back.step, 3);
    assert_eq!(back.optimizer.as_ref().unwrap().step, 3);

    // Manifest entries tile the payload in order.
    let mut offset = 0;
    for e in back.manifest().unwrap() {
        assert_eq!(e.offset, offset);
        assert_eq!(e.dtype, "f64");
        offset += 8 * e.shape.iter().product::<usize>() as u64;
    }
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let dir = TempDir::new().unwrap();
    let bytes = coarse(dir.path(), "").checkpoint.to_bytes().unwrap();
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    let mut bad_version = bytes.clone();
    bad_version[8] = 99;
    let mut huge_header = bytes.clone();
    huge_header[12..20].copy_from_slice(&u64::MAX.to_le_bytes());
    let truncated = bytes[..bytes.len() - 8].to_vec();
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let header = String::from_utf8(bytes[20..20 + hlen].to_vec()).unwrap();
    let mut bad_dtype = bytes[..20].to_vec();
    bad_dtype.extend_from_slice(header.replacen("\"f64\"", "\"f32\"", 1).as_bytes());
    bad_dtype.extend_from_slice(&bytes[20 + hlen..]);
    for (what, b) in [("magic", bad_magic), ("version", bad_version), ("header", huge_header), ("payload", truncated), ("dtype", bad_dtype), ("empty", vec![])] {
        assert!(matches!(Checkpoint::from_bytes(&b), Err(Error::Checkpoint(_))), "{what}");
    }
    assert!(matches!(Checkpoint::load(&dir.path().join("nope.fbr")), Err(Error::Checkpoint(_))));
}

#[test]
fn shape_mismatch_leaves_the_store_untouched() {
    let dir = TempDir::new().unwrap();
    let ck = coarse(dir.path(), "").checkpoint;
    let mut model = Model::new(&cfg("text.width = 48\ntext.heads = 2\n"), Purpose::Coarse).unwrap();
    let before: Vec<_> = model.store.iter().map(|(_, p)| p.value.clone()).collect();
    assert!(matches!(ck.load_into(&mut model.store), Err(Error::Checkpoint(_))));
    let after: Vec<_> = model.store.iter().map(|(_, p)| p.value.clone()).collect();
    assert_eq!(before, after);
}

#[test]
fn tasks_demand_the_right_stage() {
    let dir = TempDir::new().unwrap();
    let ck = coarse(dir.path(), "").checkpoint;
    ck.require_for_task(Task::Classify).unwrap();
    ck.require_for_task(Task::Retrieval).unwrap();
    ck.require_for_task(Task::Caption).unwrap();
    let err = ck.require_for_task(Task::Grounding).unwrap_err();
    assert!(matches!(&err, Error::Stage(m) if m.contains("pretrain-fine")), "{err}");
    let e = run_finetune(Task::Grounding, &cfg("task = grounding\nstage = fine\n"), Some(&ck), &dir.path().join("g"));
    assert!(matches!(e, Err(Error::Stage(_))));
    assert!(!dir.path().join("g").exists());

    let fine = run_pretrain_fine(&cfg("stage = fine\nsteps = 1\n"), Some(&ck), &dir.path().join("fine")).unwrap();
    let e = run_pretrain_fine(&cfg("stage = fine\nsteps = 1\n"), Some(&fine.checkpoint), &dir.path().join("fine2"));
    assert!(matches!(e, Err(Error::Stage(_))));
    assert!(matches!(fine.checkpoint.require_for_task(Task::Classify), Err(Error::Stage(_))));
    assert!(matches!(run_pretrain_coarse(&cfg("stage = fine\n"), &dir.path().join("x")), Err(Error::Config(_))));
}

// Run directories and metrics

#[test]
fn run_directory_lock_is_exclusive_and_released() {
    let dir = TempDir::new().unwrap();
    let run = RunDir::open(dir.path()).unwrap();
    assert!(matches!(RunDir::open(dir.path()), Err(Error::Locked(_))));
    assert!(matches!(run_pretrain_coarse(&cfg(""), dir.path()), Err(Error::Locked(_))));
    drop(run);
    assert!(!dir.path().join(LOCK_FILE).exists());
    RunDir::open(dir.path()).unwrap();
}

#[test]
fn metrics_are_newline_delimited_records() {
    let dir = TempDir::new().unwrap();
    let out = coarse(dir.path(), "");
    let text = fs::read_to_string(dir.path().join("coarse").join(METRICS_FILE)).unwrap();
    let mut names = std::collections::BTreeSet::new();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let obj = v.as_object().unwrap();
        assert_eq!(obj.len(), 3);
        assert!(obj["step"].is_u64() && obj["value"].is_f64());
        names.insert(obj["name"].as_str().unwrap().to_string());
    }
    for n in ["loss.mlm", "loss.itc", "loss.itm", "loss.total", "grad_norm", "lr_factor", "gate.max_abs", "train.loss_tail", "probe.mlm_loss"] {
        assert!(names.contains(n), "{n}");
    }
    assert!(out.summary.contains_key("train.loss_tail"));
    let config = fs::read_to_string(dir.path().join("coarse").join(CONFIG_FILE)).unwrap();
    assert_eq!(Config::parse(&config).unwrap(), cfg(""));
    assert!(!dir.path().join("coarse").join(LOCK_FILE).exists());
}

// Training semantics

#[test]
fn same_config_and_seed_reproduce_the_checkpoint() {
    let dir = TempDir::new().unwrap();
    let a = run_pretrain_coarse(&cfg(""), &dir.path().join("a")).unwrap();
    let b = run_pretrain_coarse(&cfg(""), &dir.path().join("b")).unwrap();
    let c = run_pretrain_coarse(&cfg("seed = 1\n"), &dir.path().join("c")).unwrap();
    assert_eq!(a.checkpoint_hash, b.checkpoint_hash);
    assert_ne!(a.checkpoint_hash, c.checkpoint_hash);
    assert_eq!(fs::read(dir.path().join("a").join(METRICS_FILE)).unwrap(), fs::read(dir.path().join("b").join(METRICS_FILE)).unwrap());
}

fn changed_heads(out: &RunOutput, config: &Config) -> (bool, bool, bool) {
    let init = Model::new(config, Purpose::Coarse).unwrap();
    let differs = |prefix: &str| {
        init.store.iter().filter(|(_, p)| p.name.starts_with(prefix)).any(|(_, p)| out.checkpoint.get(&p.name).unwrap() != &p.value)
    };
    (differs("mlm."), differs("itm."), differs("logit_scale"))
}

#[test]
fn disabled_objectives_leave_their_heads_untouched() {
    let dir = TempDir::new().unwrap();
    let only_itc = cfg("mlm = false\nitm_hard = false\n");
    let out = run_pretrain_coarse(&only_itc, &dir.path().join("itc")).unwrap();
    assert_eq!(changed_heads(&out, &only_itc), (false, false, true));
    assert!(!out.summary.contains_key("loss.mlm"));

    let only_mlm = cfg("itc = false\nitm_hard = false\n");
    let out = run_pretrain_coarse(&only_mlm, &dir.path().join("mlm")).unwrap();
    assert_eq!(changed_heads(&out, &only_mlm), (true, false, false));

    let plain_itm = cfg("mlm = false\nitc = false\nitm_hard = false\nitm = true\n");
    let out = run_pretrain_coarse(&plain_itm, &dir.path().join("itm")).unwrap();
    assert_eq!(changed_heads(&out, &plain_itm), (false, true, false));
}

#[test]
fn fine_stage_initializes_everything_but_the_detection_head() {
    let dir = TempDir::new().unwrap();
    let c = coarse(dir.path(), "");
    let fine = run_pretrain_fine(&cfg("stage = fine\nsteps = 1\n"), Some(&c.checkpoint), &dir.path().join("fine")).unwrap();
    let report = fine.load_report.unwrap();
    assert!(!report.fresh.is_empty());
    assert!(report.fresh.iter().all(|n| n.starts_with("od_head.")));
    assert!(report.loaded.iter().all(|n| !n.starts_with("od_head.")));
    assert!(report.unused.iter().all(|n| n.starts_with("mlm.") || n.starts_with("itm.") || n == "logit_scale"));
    assert_eq!(fine.checkpoint.provenance, vec!["coarse".to_string()]);
    assert_eq!(fine.checkpoint.stage, CheckpointStage::Pretrain(Stage::Fine));
}

#[test]
fn fine_stage_needs_box_annotations() {
    let dir = TempDir::new().unwrap();
    let mut records = generate_dataset(7, 4);
    for r in &mut records {
        r.targets.clear();
    }
    let path = dir.path().join("nobox.jsonl");
    write_dataset(&path, 7, &records, PixelEncoding::Hex).unwrap();
    let c = cfg(&format!("stage = fine\ndata.train = {}\n", path.display()));
    assert!(matches!(run_pretrain_fine(&c, None, &dir.path().join("f")), Err(Error::Data(_))));
}

#[test]
fn architecture_mismatch_with_init_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let c = coarse(dir.path(), "");
    let e = run_pretrain_fine(&cfg("stage = fine\nsteps = 1\nfused_layers = 2\n"), Some(&c.checkpoint), &dir.path().join("f"));
    assert!(e.is_err());
}

#[test]
fn every_task_fine_tunes_and_evaluates() {
    let dir = TempDir::new().unwrap();
    let c = coarse(dir.path(), "");
    for task in [Task::Classify, Task::Retrieval, Task::Caption] {
        let tc = cfg(&format!("task = {task}\ncaption.max_len = 6\ncaption.beam = 2\n"));
        let out = run_finetune(task, &tc, Some(&c.checkpoint), &dir.path().join(format!("ft_{task}"))).unwrap();
        assert_eq!(out.checkpoint.stage, CheckpointStage::Finetune(task));
        assert_eq!(out.checkpoint.provenance, vec!["coarse".to_string()]);
        let report = run_eval(task, &tc, Some(&out.checkpoint), &dir.path().join(format!("ev_{task}"))).unwrap();
        let key = match task {
            Task::Classify => "accuracy",
            Task::Retrieval => "rerank.i2t_r1",
            Task::Caption => "bleu4",
            Task::Grounding => unreachable!(),
        };
        assert!((0.0..=1.0).contains(&report[key]), "{task}: {report:?}");
        let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join(format!("ev_{task}")).join(REPORT_FILE)).unwrap()).unwrap();
        assert_eq!(json[key].as_f64().unwrap(), report[key]);
    }
}

#[test]
fn captioning_rejects_merged_attention() {
    let dir = TempDir::new().unwrap();
    let e = run_finetune(Task::Caption, &cfg("task = caption\nstrategy = merged_attention\n"), None, &dir.path().join("c"));
    assert!(matches!(e, Err(Error::Config(_))));
}

#[test]
fn probes_report_sensible_ranges() {
    let model = Model::new(&cfg(""), Purpose::Coarse).unwrap();
    let records = generate_dataset(7, 8);
    let mlm = mlm_probe(&model, &records).unwrap();
    assert!(mlm.is_finite() && mlm > 0.0);
    let (i2t, t2i) = itc_probe(&model, &records).unwrap();
    assert!((0.0..=1.0).contains(&i2t) && (0.0..=1.0).contains(&t2i));
    assert_eq!(model.gate_max_abs(), Some(0.0));
    assert_eq!(load_train_data(&cfg("")).unwrap().len(), 16);
}
